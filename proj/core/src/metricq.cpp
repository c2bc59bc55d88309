#include "moaserve/metricq.hpp"

#include <algorithm>
#include <cmath>

#include "moaserve/errors.hpp"

namespace moaserve {

void TokenLogProbs::validate() const {
  if (values.empty()) throw ValidationError("logprobs: need at least one token");
  for (double v : values) {
    if (!std::isfinite(v)) throw ValidationError("logprobs: values must be finite");
    if (v > 0.0) throw ValidationError("logprobs: values must be <= 0");
  }
}

double geometric_mean_confidence(const TokenLogProbs& lp) {
  lp.validate();
  double sum = 0.0;
  for (double v : lp.values) sum += v;
  return std::exp(sum / static_cast<double>(lp.values.size()));
}

double rms_aggregate(std::span<const double> confidences) {
  if (confidences.empty()) throw ValidationError("rms_aggregate: empty confidence set");
  double sum = 0.0;
  for (double c : confidences) sum += c * c;
  return std::sqrt(sum / static_cast<double>(confidences.size()));
}

Eigen::MatrixXd correlation_from_gram(const Eigen::MatrixXd& gram, double epsilon) {
  if (gram.rows() != gram.cols()) {
    throw ValidationError("correlation_from_gram: gram matrix must be square");
  }
  const Eigen::Index h = gram.rows();
  Eigen::MatrixXd corr = Eigen::MatrixXd::Zero(h, h);
  std::vector<bool> live(static_cast<std::size_t>(h));
  for (Eigen::Index i = 0; i < h; ++i) {
    live[static_cast<std::size_t>(i)] = gram(i, i) > epsilon;
  }
  for (Eigen::Index i = 0; i < h; ++i) {
    if (!live[static_cast<std::size_t>(i)]) continue;  // degenerate column: row stays zero
    corr(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < h; ++j) {
      if (!live[static_cast<std::size_t>(j)]) continue;
      double v = gram(i, j) / std::sqrt(gram(i, i) * gram(j, j));
      corr(i, j) = v;
      corr(j, i) = v;
    }
  }
  return corr;
}

double frob_cos_sim_corr(const Eigen::MatrixXd& corr_u, const Eigen::MatrixXd& corr_v) {
  if (corr_u.rows() != corr_v.rows() || corr_u.cols() != corr_v.cols()) {
    throw ValidationError("frob_cos_sim: correlation matrices must share dimensions");
  }
  double dot = (corr_u.array() * corr_v.array()).sum();
  double nu = corr_u.norm();
  double nv = corr_v.norm();
  if (nu == 0.0 || nv == 0.0) return 0.0;
  return dot / (nu * nv);
}

double frob_cos_sim(const Eigen::MatrixXd& gram_u, const Eigen::MatrixXd& gram_v,
                    double epsilon) {
  return frob_cos_sim_corr(correlation_from_gram(gram_u, epsilon),
                           correlation_from_gram(gram_v, epsilon));
}

Eigen::MatrixXd sim_matrix(const std::vector<Eigen::MatrixXd>& embeddings, double epsilon) {
  const Eigen::Index n = static_cast<Eigen::Index>(embeddings.size());
  std::vector<Eigen::MatrixXd> corrs;
  corrs.reserve(embeddings.size());
  for (const auto& t : embeddings) {
    corrs.push_back(correlation_from_gram(t.transpose() * t, epsilon));
  }
  Eigen::MatrixXd sim = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    sim(i, i) = 1.0;  // self-similarity by definition, even for degenerate inputs
    for (Eigen::Index j = 0; j < i; ++j) {
      double v = frob_cos_sim_corr(corrs[static_cast<std::size_t>(i)],
                                   corrs[static_cast<std::size_t>(j)]);
      sim(i, j) = v;
      sim(j, i) = v;
    }
  }
  return sim;
}

WeightedSimilarity weighted_similarity(std::span<const double> confidences,
                                       const Eigen::MatrixXd& sim, bool include_diagonal) {
  const Eigen::Index n = static_cast<Eigen::Index>(confidences.size());
  if (sim.rows() != n || sim.cols() != n) {
    throw ValidationError("weighted_similarity: sim matrix does not match confidence count");
  }
  WeightedSimilarity ws;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index jmax = include_diagonal ? i : i - 1;
    for (Eigen::Index j = 0; j <= jmax; ++j) {
      double w = confidences[static_cast<std::size_t>(i)] *
                 confidences[static_cast<std::size_t>(j)];
      ws.weight_sum += w;
      acc += w * sim(i, j);
    }
  }
  ws.score = ws.weight_sum > 0.0 ? acc / ws.weight_sum : 0.0;
  return ws;
}

double calibrate(double p, double tau) {
  if (!(tau > 0.0)) throw ValidationError("calibrate: tau must be > 0");
  return std::clamp(1.0 - std::abs(p - tau) / tau, 0.0, 1.0);
}

double quality(double c_bar, double b) { return std::sqrt(c_bar * b); }

void MetricQOptions::validate() const {
  if (!(tau > 0.0 && tau <= 1.0)) throw ValidationError("metricq: tau must be in (0, 1]");
  if (!(epsilon > 0.0)) throw ValidationError("metricq: epsilon must be > 0");
}

ExitDecision decide_exit(double q, RngStream& rng) {
  ExitDecision d;
  d.q = q;
  d.draw = rng.next_uniform();
  d.exited = d.draw < q;
  return d;
}

QualityScore score_outputs(const std::vector<TokenSeq>& outputs,
                           const std::vector<TokenLogProbs>& logprobs,
                           EmbeddingProvider& provider, const MetricQOptions& opts) {
  if (outputs.size() != logprobs.size()) {
    throw ValidationError("score_outputs: outputs and logprobs must align");
  }
  if (outputs.empty()) throw ValidationError("score_outputs: need at least one output");
  MetricQEvaluator ev(provider, opts);
  QualityScore qs;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    qs = ev.add_completion(outputs[i], logprobs[i]);
  }
  return qs;
}

MetricQEvaluator::MetricQEvaluator(EmbeddingProvider& provider, MetricQOptions opts)
    : provider_(provider), opts_(opts) {
  opts_.validate();
  sim_.resize(0, 0);
}

QualityScore MetricQEvaluator::add_completion(const TokenSeq& output, const TokenLogProbs& lp) {
  double c = geometric_mean_confidence(lp);
  Eigen::MatrixXd t = provider_.embed(output);
  Eigen::MatrixXd corr = correlation_from_gram(t.transpose() * t, opts_.epsilon);

  const Eigen::Index n = static_cast<Eigen::Index>(confidences_.size()) + 1;
  Eigen::MatrixXd grown = Eigen::MatrixXd::Zero(n, n);
  if (n > 1) grown.topLeftCorner(n - 1, n - 1) = sim_;
  grown(n - 1, n - 1) = 1.0;
  for (Eigen::Index j = 0; j + 1 < n; ++j) {
    double v = frob_cos_sim_corr(corr, corrs_[static_cast<std::size_t>(j)]);
    grown(n - 1, j) = v;
    grown(j, n - 1) = v;
  }
  sim_ = std::move(grown);
  corrs_.push_back(std::move(corr));
  confidences_.push_back(c);
  return current();
}

std::pair<QualityScore, ExitDecision> MetricQEvaluator::add_and_decide(const TokenSeq& output,
                                                                       const TokenLogProbs& lp,
                                                                       RngStream& rng) {
  QualityScore qs = add_completion(output, lp);
  return {qs, decide_exit(qs.q, rng)};
}

QualityScore MetricQEvaluator::current() const {
  QualityScore qs;
  qs.outputs = static_cast<int>(confidences_.size());
  qs.confidences = confidences_;
  qs.c_bar = rms_aggregate(confidences_);
  qs.sim = sim_;
  auto ws = weighted_similarity(confidences_, sim_, opts_.include_diagonal);
  qs.weight_sum = ws.weight_sum;
  qs.weighted = ws.score;
  qs.calibrated = calibrate(ws.score, opts_.tau);
  qs.q = quality(qs.c_bar, qs.calibrated);
  qs.tau = opts_.tau;
  return qs;
}

}  // namespace moaserve
