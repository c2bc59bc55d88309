#include "moaserve/trace.hpp"

#include <sstream>

#include "moaserve/errors.hpp"

namespace moaserve {

namespace {

using json = nlohmann::ordered_json;

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j) {
  if (!j.is_array()) throw ValidationError("trace: matrix field must be an array of rows");
  Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  Eigen::Index cols = rows > 0 ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = j[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
    }
  }
  return m;
}

json interval_to_json(const PrefillInterval& p) {
  json j;
  j["start"] = p.start;
  j["end"] = p.end;
  j["begin_token"] = p.begin_token;
  j["end_token"] = p.end_token;
  j["wasted"] = p.wasted;
  return j;
}

PrefillInterval interval_from_json(const json& j) {
  PrefillInterval p;
  p.start = j.at("start").get<double>();
  p.end = j.at("end").get<double>();
  p.begin_token = j.at("begin_token").get<int>();
  p.end_token = j.at("end_token").get<int>();
  p.wasted = j.at("wasted").get<bool>();
  return p;
}

json agent_to_json(const AgentRecord& a) {
  json j;
  j["agent"] = a.id.str();
  j["model_tag"] = a.model_tag;
  j["invoked"] = a.invoked;
  j["pruned"] = a.pruned;
  j["empty_input"] = a.empty_input;
  j["submit_t"] = a.submit_t;
  j["precursor_ready_t"] = a.precursor_ready_t;
  j["prompt_tokens"] = a.prompt_tokens;
  j["output_tokens"] = a.output_tokens;
  json prefill = json::array();
  for (const auto& p : a.prefill) prefill.push_back(interval_to_json(p));
  j["prefill"] = std::move(prefill);
  j["prefill_only_calls"] = a.prefill_only_calls;
  j["recomputed_tokens"] = a.recomputed_tokens;
  j["reclaimed_tokens"] = a.reclaimed_tokens;
  j["wasted_prefill_tokens"] = a.wasted_prefill_tokens;
  j["transfer_seconds"] = a.transfer_seconds;
  j["transfer_end"] = a.transfer_end;
  j["decode_start"] = a.decode_start;
  j["decode_end"] = a.decode_end;
  j["complete_t"] = a.complete_t;
  j["exposed_prefill"] = a.exposed_prefill;
  j["pe_busy"] = a.pe_busy;
  j["de_busy"] = a.de_busy;
  return j;
}

AgentRecord agent_from_json(const json& j) {
  AgentRecord a;
  a.id = AgentId::parse(j.at("agent").get<std::string>());
  a.model_tag = j.at("model_tag").get<std::string>();
  a.invoked = j.at("invoked").get<bool>();
  a.pruned = j.at("pruned").get<bool>();
  a.empty_input = j.at("empty_input").get<bool>();
  a.submit_t = j.at("submit_t").get<double>();
  a.precursor_ready_t = j.at("precursor_ready_t").get<double>();
  a.prompt_tokens = j.at("prompt_tokens").get<int>();
  a.output_tokens = j.at("output_tokens").get<int>();
  for (const auto& p : j.at("prefill")) a.prefill.push_back(interval_from_json(p));
  a.prefill_only_calls = j.at("prefill_only_calls").get<int>();
  a.recomputed_tokens = j.at("recomputed_tokens").get<int>();
  a.reclaimed_tokens = j.at("reclaimed_tokens").get<int>();
  a.wasted_prefill_tokens = j.at("wasted_prefill_tokens").get<int>();
  a.transfer_seconds = j.at("transfer_seconds").get<double>();
  a.transfer_end = j.at("transfer_end").get<double>();
  a.decode_start = j.at("decode_start").get<double>();
  a.decode_end = j.at("decode_end").get<double>();
  a.complete_t = j.at("complete_t").get<double>();
  a.exposed_prefill = j.at("exposed_prefill").get<double>();
  a.pe_busy = j.at("pe_busy").get<double>();
  a.de_busy = j.at("de_busy").get<double>();
  return a;
}

json metricq_to_json(const MetricQRecord& m) {
  json j;
  j["t"] = m.t;
  j["group"] = m.group;
  j["eval_index"] = m.eval_index;
  j["completed"] = m.completed.str();
  j["evaluated"] = m.evaluated;
  if (m.evaluated) j["score"] = to_json(m.score);
  json d;
  d["q"] = m.decision.q;
  d["draw"] = m.decision.draw;
  d["exited"] = m.decision.exited;
  j["decision"] = std::move(d);
  json pruned = json::array();
  for (const auto& a : m.pruned) pruned.push_back(a.str());
  j["pruned"] = std::move(pruned);
  return j;
}

MetricQRecord metricq_from_json(const json& j) {
  MetricQRecord m;
  m.t = j.at("t").get<double>();
  m.group = j.at("group").get<std::string>();
  m.eval_index = j.at("eval_index").get<int>();
  m.completed = AgentId::parse(j.at("completed").get<std::string>());
  m.evaluated = j.at("evaluated").get<bool>();
  if (m.evaluated) m.score = quality_score_from_json(j.at("score"));
  m.decision.q = j.at("decision").at("q").get<double>();
  m.decision.draw = j.at("decision").at("draw").get<double>();
  m.decision.exited = j.at("decision").at("exited").get<bool>();
  for (const auto& a : j.at("pruned")) m.pruned.push_back(AgentId::parse(a.get<std::string>()));
  return m;
}

}  // namespace

nlohmann::ordered_json to_json(const QualityScore& qs) {
  json j;
  j["outputs"] = qs.outputs;
  j["confidences"] = qs.confidences;
  j["c_bar"] = qs.c_bar;
  j["sim"] = matrix_to_json(qs.sim);
  j["weight_sum"] = qs.weight_sum;
  j["weighted"] = qs.weighted;
  j["calibrated"] = qs.calibrated;
  j["q"] = qs.q;
  j["tau"] = qs.tau;
  return j;
}

QualityScore quality_score_from_json(const nlohmann::ordered_json& j) {
  QualityScore qs;
  qs.outputs = j.at("outputs").get<int>();
  qs.confidences = j.at("confidences").get<std::vector<double>>();
  qs.c_bar = j.at("c_bar").get<double>();
  qs.sim = matrix_from_json(j.at("sim"));
  qs.weight_sum = j.at("weight_sum").get<double>();
  qs.weighted = j.at("weighted").get<double>();
  qs.calibrated = j.at("calibrated").get<double>();
  qs.q = j.at("q").get<double>();
  qs.tau = j.at("tau").get<double>();
  return qs;
}

std::string format_double(double v) { return json(v).dump(); }

void RunTrace::add_event(double t, const std::string& kind, const std::string& agent,
                         nlohmann::ordered_json payload) {
  TraceEvent e;
  e.t = t;
  e.seq = events.size();
  e.kind = kind;
  e.agent = agent;
  e.payload = std::move(payload);
  events.push_back(std::move(e));
  horizon = std::max(horizon, t);
}

void RunTrace::roll_up() {
  prefill_only_calls_total = 0;
  recomputed_tokens_total = 0;
  reclaimed_tokens_total = 0;
  wasted_prefill_tokens_total = 0;
  activation.clear();
  for (const auto& [id, a] : agents) {
    prefill_only_calls_total += a.prefill_only_calls;
    recomputed_tokens_total += a.recomputed_tokens;
    reclaimed_tokens_total += a.reclaimed_tokens;
    wasted_prefill_tokens_total += a.wasted_prefill_tokens;
    auto& act = activation[a.model_tag];
    act.instances += 1;
    if (a.invoked && !a.pruned) act.invoked += 1;
    if (a.pruned) act.pruned += 1;
  }
  ee_latency_share = e2e_latency > 0.0 ? ee_latency_total / e2e_latency : 0.0;
}

std::string RunTrace::to_jsonl() const {
  std::ostringstream out;
  json meta;
  meta["record"] = "meta";
  meta["mode"] = mode_label;
  meta["seed"] = seed;
  meta["sample_index"] = sample_index;
  meta["e2e_latency"] = e2e_latency;
  meta["horizon"] = horizon;
  meta["ee_evals"] = ee_evals;
  meta["ee_latency_total"] = ee_latency_total;
  meta["ee_latency_share"] = ee_latency_share;
  meta["prefill_only_calls_total"] = prefill_only_calls_total;
  meta["recomputed_tokens_total"] = recomputed_tokens_total;
  meta["reclaimed_tokens_total"] = reclaimed_tokens_total;
  meta["wasted_prefill_tokens_total"] = wasted_prefill_tokens_total;
  json act = json::object();
  for (const auto& [tag, a] : activation) {
    act[tag] = {{"instances", a.instances}, {"invoked", a.invoked}, {"pruned", a.pruned}};
  }
  meta["activation"] = std::move(act);
  out << meta.dump() << "\n";

  for (const auto& [id, a] : agents) {
    json j;
    j["record"] = "agent";
    j.update(agent_to_json(a));
    out << j.dump() << "\n";
  }
  for (const auto& m : metricq) {
    json j;
    j["record"] = "metricq";
    j.update(metricq_to_json(m));
    out << j.dump() << "\n";
  }
  for (const auto& e : events) {
    json j;
    j["record"] = "event";
    j["t"] = e.t;
    j["seq"] = e.seq;
    j["kind"] = e.kind;
    j["agent"] = e.agent;
    j["payload"] = e.payload;
    out << j.dump() << "\n";
  }
  return out.str();
}

RunTrace RunTrace::from_jsonl(std::istream& in) {
  RunTrace t;
  std::string line;
  bool saw_meta = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      throw ValidationError(std::string("trace: line is not valid JSON: ") + e.what());
    }
    std::string record = j.value("record", "");
    if (record == "meta") {
      saw_meta = true;
      t.mode_label = j.value("mode", "");
      t.seed = j.value("seed", std::uint64_t{0});
      t.sample_index = j.value("sample_index", 0);
      t.e2e_latency = j.value("e2e_latency", 0.0);
      t.horizon = j.value("horizon", 0.0);
      t.ee_evals = j.value("ee_evals", 0);
      t.ee_latency_total = j.value("ee_latency_total", 0.0);
      t.ee_latency_share = j.value("ee_latency_share", 0.0);
      t.prefill_only_calls_total = j.value("prefill_only_calls_total", 0);
      t.recomputed_tokens_total = j.value("recomputed_tokens_total", 0);
      t.reclaimed_tokens_total = j.value("reclaimed_tokens_total", 0);
      t.wasted_prefill_tokens_total = j.value("wasted_prefill_tokens_total", 0);
      if (j.contains("activation")) {
        for (const auto& [tag, a] : j.at("activation").items()) {
          ModelActivation act;
          act.instances = a.value("instances", 0);
          act.invoked = a.value("invoked", 0);
          act.pruned = a.value("pruned", 0);
          t.activation[tag] = act;
        }
      }
    } else if (record == "agent") {
      AgentRecord a = agent_from_json(j);
      t.agents[a.id] = std::move(a);
    } else if (record == "metricq") {
      t.metricq.push_back(metricq_from_json(j));
    } else if (record == "event") {
      TraceEvent e;
      e.t = j.at("t").get<double>();
      e.seq = j.at("seq").get<std::uint64_t>();
      e.kind = j.at("kind").get<std::string>();
      e.agent = j.value("agent", "");
      e.payload = j.value("payload", json::object());
      t.events.push_back(std::move(e));
    } else {
      throw ValidationError("trace: unknown record type '" + record + "'");
    }
  }
  if (!saw_meta) throw ValidationError("trace: missing meta record");
  return t;
}

RunTrace RunTrace::from_jsonl_string(const std::string& s) {
  std::istringstream in(s);
  return from_jsonl(in);
}

std::string RunTrace::agents_csv() const {
  std::ostringstream out;
  out << "agent,model_tag,invoked,pruned,empty_input,prompt_tokens,output_tokens,"
         "submit_t,precursor_ready_t,prefill_only_calls,recomputed_tokens,reclaimed_tokens,"
         "wasted_prefill_tokens,transfer_seconds,decode_start,decode_end,complete_t,"
         "exposed_prefill,pe_busy,de_busy\n";
  for (const auto& [id, a] : agents) {
    out << id.str() << ',' << a.model_tag << ',' << (a.invoked ? 1 : 0) << ','
        << (a.pruned ? 1 : 0) << ',' << (a.empty_input ? 1 : 0) << ',' << a.prompt_tokens << ','
        << a.output_tokens << ',' << format_double(a.submit_t) << ','
        << format_double(a.precursor_ready_t) << ',' << a.prefill_only_calls << ','
        << a.recomputed_tokens << ',' << a.reclaimed_tokens << ',' << a.wasted_prefill_tokens
        << ',' << format_double(a.transfer_seconds) << ',' << format_double(a.decode_start) << ','
        << format_double(a.decode_end) << ',' << format_double(a.complete_t) << ','
        << format_double(a.exposed_prefill) << ',' << format_double(a.pe_busy) << ','
        << format_double(a.de_busy) << "\n";
  }
  return out.str();
}

}  // namespace moaserve
