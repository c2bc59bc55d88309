#pragma once

#include <memory>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "moaserve/embedding.hpp"
#include "moaserve/prompt.hpp"
#include "moaserve/rng.hpp"

namespace moaserve {

inline constexpr double kDefaultTau = 0.7;

// Per-token log-probabilities of one sampled output; every value must be
// finite and <= 0.
struct TokenLogProbs {
  std::vector<double> values;

  void validate() const;
};

// C = exp(mean of token logprobs): the geometric mean of token probabilities.
double geometric_mean_confidence(const TokenLogProbs& lp);

// Aggregate confidence over outputs seen so far: sqrt(mean of C_i^2).
double rms_aggregate(std::span<const double> confidences);

// Feature-correlation matrix of a Gram matrix G = T^T T (columns are
// feature dimensions). Degenerate columns (zero variance within epsilon)
// yield zero rows/columns, including the diagonal entry.
Eigen::MatrixXd correlation_from_gram(const Eigen::MatrixXd& gram, double epsilon = 1e-12);

// Frobenius cosine similarity of two correlation structures. Returns 0 when
// either correlation matrix is all-zero.
double frob_cos_sim_corr(const Eigen::MatrixXd& corr_u, const Eigen::MatrixXd& corr_v);
double frob_cos_sim(const Eigen::MatrixXd& gram_u, const Eigen::MatrixXd& gram_v,
                    double epsilon = 1e-12);

// Pairwise similarity matrix over token-embedding matrices (rows = tokens).
Eigen::MatrixXd sim_matrix(const std::vector<Eigen::MatrixXd>& embeddings,
                           double epsilon = 1e-12);

struct WeightedSimilarity {
  double weight_sum = 0.0;  // W = sum over j <= i of C_i * C_j
  double score = 0.0;       // P = weighted mean pairwise similarity
};

// Confidence-weighted pairwise similarity over the lower triangle
// (diagonal included by default; self-similarity always contributes 1).
WeightedSimilarity weighted_similarity(std::span<const double> confidences,
                                       const Eigen::MatrixXd& sim,
                                       bool include_diagonal = true);

// B = clamp(1 - |P - tau| / tau) into [0, 1]: peaks when the consensus level
// matches the target tau, falls off toward blind agreement or noise.
double calibrate(double p, double tau);

// Q = sqrt(C_bar * B).
double quality(double c_bar, double b);

struct MetricQOptions {
  double tau = kDefaultTau;
  bool include_diagonal = true;
  double epsilon = 1e-12;

  void validate() const;
};

// Everything the score computation produced, for traces and inspection.
struct QualityScore {
  int outputs = 0;
  std::vector<double> confidences;
  double c_bar = 0.0;
  Eigen::MatrixXd sim;
  double weight_sum = 0.0;  // W
  double weighted = 0.0;    // P
  double calibrated = 0.0;  // B
  double q = 0.0;
  double tau = kDefaultTau;
};

struct ExitDecision {
  double q = 0.0;
  double draw = 1.0;  // uniform used for the Bernoulli
  bool exited = false;
};

// Bernoulli(q): exit iff draw < q.
ExitDecision decide_exit(double q, RngStream& rng);

// One-shot scoring of a completed output set (offline path).
QualityScore score_outputs(const std::vector<TokenSeq>& outputs,
                           const std::vector<TokenLogProbs>& logprobs,
                           EmbeddingProvider& provider, const MetricQOptions& opts = {});

// Incremental evaluator, one instance per exit group. Confidences and
// pairwise similarities of earlier completions are retained; each new
// completion adds one row.
class MetricQEvaluator {
 public:
  MetricQEvaluator(EmbeddingProvider& provider, MetricQOptions opts = {});

  // Scores the group after appending this output. Exit draws come from rng
  // in completion order.
  QualityScore add_completion(const TokenSeq& output, const TokenLogProbs& lp);
  std::pair<QualityScore, ExitDecision> add_and_decide(const TokenSeq& output,
                                                       const TokenLogProbs& lp, RngStream& rng);

  int completions() const { return static_cast<int>(confidences_.size()); }

 private:
  QualityScore current() const;

  EmbeddingProvider& provider_;
  MetricQOptions opts_;
  std::vector<double> confidences_;
  std::vector<Eigen::MatrixXd> corrs_;  // correlation matrix per completion
  Eigen::MatrixXd sim_;
};

}  // namespace moaserve
