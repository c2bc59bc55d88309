// moaserve: drives the layered-agent serving study end to end.
//
// Subcommands:
//   simulate       run the configured scenario; emit per-sample traces + summary
//   ablate         four-setting latency comparison, or --second-layer schedule study
//   metricq-eval   offline quality scoring of an output set, all intermediates shown
//   topology-check validate a config's topologies and print their shape
//   trace-export   re-emit a trace file as jsonl or as the per-agent csv
//
// Exit codes: 0 success, 2 invalid config/input, 3 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "moaserve/config.hpp"
#include "moaserve/errors.hpp"
#include "moaserve/orchestrator.hpp"

namespace {

using json = nlohmann::ordered_json;
using namespace moaserve;

// Writes via a temp file + rename so a rerun never exposes a half-written file.
void write_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RunError("cannot open for writing: " + tmp.string());
    out << content;
    if (!out) throw RunError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void emit(const std::optional<std::string>& out_path, const std::string& content) {
  if (out_path) {
    write_atomic(*out_path, content);
  } else {
    std::cout << content;
  }
}

AppConfig load_config(const std::optional<std::string>& path) {
  return path ? AppConfig::load_file(*path) : AppConfig::preset();
}

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<double> tau;
  std::optional<int> chunk_size;
};

void apply(AppConfig& cfg, const Overrides& ov) {
  if (ov.seed) {
    cfg.run.seed = *ov.seed;
    cfg.second_layer.seed = *ov.seed;
  }
  if (ov.mode) cfg.run.mode = schedule_mode_from_string(*ov.mode);
  if (ov.tau) cfg.run.tau = *ov.tau;
  if (ov.chunk_size) cfg.run.chunk_size = *ov.chunk_size;
  cfg.finalize();
}

std::string sample_file_name(const char* stem, int index, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%03d.%s", stem, index, ext);
  return buf;
}

int cmd_simulate(const std::optional<std::string>& config_path, const Overrides& ov,
                 const std::optional<std::string>& out_dir, const std::string& format) {
  AppConfig cfg = load_config(config_path);
  apply(cfg, ov);

  std::vector<RunTrace> traces = run_repetitions(cfg.run);
  RunSummary summary = summarize(cfg.run, traces);
  std::string summary_text = summary.to_json().dump(2) + "\n";

  if (out_dir) {
    std::filesystem::path dir(*out_dir);
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < traces.size(); ++i) {
      int idx = static_cast<int>(i);
      if (format == "csv") {
        write_atomic(dir / sample_file_name("agents", idx, "csv"), traces[i].agents_csv());
      } else {
        write_atomic(dir / sample_file_name("trace", idx, "jsonl"), traces[i].to_jsonl());
      }
    }
    write_atomic(dir / "summary.json", summary_text);
  }
  std::cout << summary_text;
  return 0;
}

std::string rows_as_jsonl(const json& rows) {
  std::string out;
  for (const auto& row : rows) out += row.dump() + "\n";
  return out;
}

int cmd_ablate(const std::optional<std::string>& config_path, const Overrides& ov,
               const std::optional<std::string>& out_path, const std::string& format,
               bool second_layer, const std::vector<std::string>& settings) {
  AppConfig cfg = load_config(config_path);
  apply(cfg, ov);

  std::string content;
  if (second_layer) {
    std::vector<SecondLayerRow> rows = run_second_layer_study(cfg.second_layer);
    if (format == "jsonl") {
      json arr = json::array();
      for (const auto& r : rows) {
        json row;
        row["mode"] = to_string(r.mode);
        row["mean_e2e_s"] = r.mean_e2e;
        row["normalized_vs_sequential"] = r.normalized_vs_sequential;
        row["reduction_vs_sequential"] = 1.0 - r.normalized_vs_sequential;
        arr.push_back(std::move(row));
      }
      content = rows_as_jsonl(arr);
    } else {
      content = second_layer_csv(rows);
    }
  } else {
    AblationTable table = run_ablation(cfg.run, cfg.all_to_all_topology(), cfg.ablation_samples);
    if (!settings.empty()) {
      std::vector<AblationRow> kept;
      for (const auto& want : settings) {
        bool found = false;
        for (const auto& row : table.rows) {
          if (row.setting == want) {
            kept.push_back(row);
            found = true;
          }
        }
        if (!found) {
          throw ValidationError("settings: unknown setting '" + want +
                                "'; expected all-to-all, tree, tree+overlap, tree+overlap+ee");
        }
      }
      table.rows = std::move(kept);
    }
    content = format == "jsonl" ? rows_as_jsonl(table.to_json().at("rows")) : table.to_csv();
  }
  emit(out_path, content);
  return 0;
}

json parse_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(path + ": cannot open");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

// Accepts either a bare top-level array or an object holding it under `key`.
json records_of(const json& j, const std::string& key, const std::string& path) {
  if (j.is_array()) return j;
  if (j.is_object() && j.contains(key)) {
    const json& v = j.at(key);
    if (v.is_array()) return v;
  }
  throw ValidationError(path + ": expected an array or an object with an '" + key + "' array");
}

TokenSeq tokens_at(const json& rec, const std::string& where) {
  if (!rec.is_array()) throw ValidationError(where + ": expected an array of token ids");
  TokenSeq out;
  out.reserve(rec.size());
  for (const auto& e : rec) {
    if (!e.is_number_integer() && !e.is_number_unsigned())
      throw ValidationError(where + ": expected an array of token ids");
    out.push_back(e.get<Token>());
  }
  return out;
}

Eigen::MatrixXd matrix_at(const json& rec, const std::string& where) {
  if (!rec.is_array() || rec.empty())
    throw ValidationError(where + ": expected a non-empty array of rows");
  Eigen::Index rows = static_cast<Eigen::Index>(rec.size());
  Eigen::Index cols = -1;
  Eigen::MatrixXd m;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const json& row = rec[static_cast<std::size_t>(r)];
    if (!row.is_array()) throw ValidationError(where + ": expected rows of numbers");
    if (cols < 0) {
      cols = static_cast<Eigen::Index>(row.size());
      m.resize(rows, cols);
    }
    if (static_cast<Eigen::Index>(row.size()) != cols)
      throw ValidationError(where + ": ragged rows");
    for (Eigen::Index c = 0; c < cols; ++c) {
      const json& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number()) throw ValidationError(where + ": expected rows of numbers");
      m(r, c) = v.get<double>();
    }
  }
  return m;
}

std::unique_ptr<EmbeddingProvider> provider_for_eval(const json& outputs_doc,
                                                     const std::string& path) {
  if (outputs_doc.is_object() && outputs_doc.contains("embeddings")) {
    const json& recs = outputs_doc.at("embeddings");
    if (!recs.is_object()) throw ValidationError(path + ": embeddings: expected an object");
    std::map<std::string, Eigen::MatrixXd> records;
    int hidden = 0;
    for (const auto& [key, value] : recs.items()) {
      Eigen::MatrixXd m = matrix_at(value, path + ": embeddings['" + key + "']");
      hidden = static_cast<int>(m.cols());
      records.emplace(key, std::move(m));
    }
    if (outputs_doc.contains("hidden")) hidden = outputs_doc.at("hidden").get<int>();
    return make_map_provider(std::move(records), hidden);
  }
  if (outputs_doc.is_object() && outputs_doc.contains("provider")) {
    json wrapper;
    wrapper["provider"] = outputs_doc.at("provider");
    return make_provider(AppConfig::from_json(wrapper).run.provider);
  }
  return make_provider(ProviderSpec{});
}

int cmd_metricq_eval(const std::string& outputs_path, const std::string& logprobs_path,
                     double tau, bool exclude_diagonal,
                     const std::optional<std::string>& out_path) {
  json outputs_doc = parse_json_file(outputs_path);
  json logprobs_doc = parse_json_file(logprobs_path);
  json output_recs = records_of(outputs_doc, "outputs", outputs_path);
  json logprob_recs = records_of(logprobs_doc, "logprobs", logprobs_path);

  if (output_recs.size() != logprob_recs.size()) {
    throw ValidationError("outputs has " + std::to_string(output_recs.size()) +
                          " records but logprobs has " + std::to_string(logprob_recs.size()));
  }
  if (output_recs.empty()) throw ValidationError(outputs_path + ": at least one output required");

  MetricQOptions opts;
  opts.tau = tau;
  opts.include_diagonal = !exclude_diagonal;
  opts.validate();

  auto provider = provider_for_eval(outputs_doc, outputs_path);
  MetricQEvaluator eval(*provider, opts);

  json steps = json::array();
  QualityScore last;
  for (std::size_t i = 0; i < output_recs.size(); ++i) {
    TokenSeq tokens = tokens_at(output_recs[i], "outputs[" + std::to_string(i) + "]");
    TokenLogProbs lp;
    const json& lp_rec = logprob_recs[i];
    std::string lp_where = "logprobs[" + std::to_string(i) + "]";
    if (!lp_rec.is_array()) throw ValidationError(lp_where + ": expected an array of numbers");
    for (const auto& v : lp_rec) {
      if (!v.is_number()) throw ValidationError(lp_where + ": expected an array of numbers");
      lp.values.push_back(v.get<double>());
    }
    try {
      lp.validate();
    } catch (const ValidationError& e) {
      throw ValidationError(lp_where + ": " + e.what());
    }
    last = eval.add_completion(tokens, lp);
    json step = to_json(last);
    step.erase("tau");
    steps.push_back({{"index", static_cast<int>(i)},
                     {"c", last.confidences.back()},
                     {"score", std::move(step)}});
  }

  json report;
  report["tau"] = tau;
  report["include_diagonal"] = opts.include_diagonal;
  report["completions"] = static_cast<int>(output_recs.size());
  report["steps"] = std::move(steps);
  report["c_bar"] = last.c_bar;
  report["weight_sum"] = last.weight_sum;
  report["weighted"] = last.weighted;
  report["calibrated"] = last.calibrated;
  report["q"] = last.q;
  emit(out_path, report.dump(2) + "\n");
  return 0;
}

json topology_report(const Topology& topo) {
  json j;
  j["kind"] = to_string(topo.kind());
  j["depth"] = topo.depth();
  j["agents"] = topo.agent_count();
  json widths = json::array();
  for (const auto& layer : topo.layers()) widths.push_back(layer.size());
  j["widths"] = std::move(widths);
  json clusters = json::array();
  for (int l = 2; l <= topo.depth(); ++l) {
    json sizes = json::array();
    for (const auto& cluster : topo.clusters_of_layer(l)) sizes.push_back(cluster.size());
    clusters.push_back({{"layer", l}, {"cluster_sizes", std::move(sizes)}});
  }
  j["clusters"] = std::move(clusters);
  return j;
}

int cmd_topology_check(const std::optional<std::string>& config_path,
                       const std::optional<std::string>& out_path) {
  AppConfig cfg = load_config(config_path);
  cfg.finalize();

  json report;
  report["ok"] = true;
  report["tree"] = topology_report(cfg.tree_topology());
  report["all_to_all"] = topology_report(cfg.all_to_all_topology());
  json models = json::array();
  for (std::size_t l = 1; l <= cfg.widths.size(); ++l) {
    json layer = json::array();
    for (int j = 0; j < cfg.widths[l - 1]; ++j)
      layer.push_back(cfg.profile_name_for(static_cast<int>(l), j));
    models.push_back(std::move(layer));
  }
  report["models"] = std::move(models);
  emit(out_path, report.dump(2) + "\n");
  return 0;
}

int cmd_trace_export(const std::string& trace_path, const std::string& format,
                     const std::optional<std::string>& out_path) {
  std::ifstream in(trace_path, std::ios::binary);
  if (!in) throw ValidationError(trace_path + ": cannot open");
  RunTrace trace;
  try {
    trace = RunTrace::from_jsonl(in);
  } catch (const json::exception& e) {
    throw ValidationError(trace_path + ": " + e.what());
  }
  emit(out_path, format == "csv" ? trace.agents_csv() : trace.to_jsonl());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"layered-agent serving study: deterministic simulator, quality-gated early "
               "exit, schedule ablations"};
  app.require_subcommand(1);

  std::optional<std::string> config_path;
  std::optional<std::string> out_path;
  Overrides ov;
  std::string sim_format = "jsonl";
  std::string abl_format = "csv";
  std::string te_format = "jsonl";
  bool second_layer = false;
  std::vector<std::string> settings;
  std::string outputs_path, logprobs_path, trace_path;
  double tau = kDefaultTau;
  bool exclude_diagonal = false;

  CLI::App* sim = app.add_subcommand("simulate", "run the configured scenario");
  sim->add_option("--config", config_path, "config file (json); defaults to the built-in preset");
  sim->add_option("--seed", ov.seed, "override the run seed");
  sim->add_option("--format", sim_format, "per-sample trace format")
      ->check(CLI::IsMember({"csv", "jsonl"}));
  sim->add_option("--out", out_path, "directory for per-sample traces and summary.json");
  sim->add_option("--mode", ov.mode,
                  "schedule mode: sequential-pd | dp-only | dp-chunked-prefill | "
                  "incremental-overlap");
  sim->add_option("--tau", ov.tau, "consensus target for the exit score");
  sim->add_option("--chunk-size", ov.chunk_size, "incremental prefill chunk size (tokens)");

  CLI::App* abl = app.add_subcommand("ablate", "four-setting latency comparison");
  abl->add_option("--config", config_path, "config file (json); defaults to the built-in preset");
  abl->add_option("--seed", ov.seed, "override the run seed");
  abl->add_option("--format", abl_format, "output format")
      ->check(CLI::IsMember({"csv", "jsonl"}));
  abl->add_option("--out", out_path, "output file (stdout when omitted)");
  abl->add_option("--tau", ov.tau, "consensus target for the exit score");
  abl->add_option("--chunk-size", ov.chunk_size, "incremental prefill chunk size (tokens)");
  abl->add_flag("--second-layer", second_layer,
                "run the single-aggregator schedule-mode study instead");
  abl->add_option("--settings", settings,
                  "comma-separated subset of settings to report (default: all four)")
      ->delimiter(',');

  CLI::App* mq = app.add_subcommand("metricq-eval", "score a completed output set offline");
  mq->add_option("outputs", outputs_path, "json file: array of token-id arrays, or object with "
                 "'outputs' (+ optional 'embeddings'/'provider')")
      ->required();
  mq->add_option("logprobs", logprobs_path,
                 "json file: array of per-token logprob arrays, or object with 'logprobs'")
      ->required();
  mq->add_option("--tau", tau, "consensus target");
  mq->add_flag("--exclude-diagonal", exclude_diagonal,
               "drop self-similarity terms from the weighted score");
  mq->add_option("--out", out_path, "output file (stdout when omitted)");

  CLI::App* tc = app.add_subcommand("topology-check", "validate topologies and print their shape");
  tc->add_option("--config", config_path, "config file (json); defaults to the built-in preset");
  tc->add_option("--out", out_path, "output file (stdout when omitted)");

  CLI::App* te = app.add_subcommand("trace-export", "re-emit a trace file");
  te->add_option("trace", trace_path, "trace file (jsonl) produced by simulate")->required();
  te->add_option("--format", te_format, "jsonl (full trace) or csv (per-agent table)")
      ->check(CLI::IsMember({"csv", "jsonl"}));
  te->add_option("--out", out_path, "output file (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(sim)) return cmd_simulate(config_path, ov, out_path, sim_format);
    if (app.got_subcommand(abl))
      return cmd_ablate(config_path, ov, out_path, abl_format, second_layer, settings);
    if (app.got_subcommand(mq))
      return cmd_metricq_eval(outputs_path, logprobs_path, tau, exclude_diagonal, out_path);
    if (app.got_subcommand(tc)) return cmd_topology_check(config_path, out_path);
    if (app.got_subcommand(te)) return cmd_trace_export(trace_path, te_format, out_path);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
