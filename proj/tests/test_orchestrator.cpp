#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>
#include <vector>

#include "moaserve/config.hpp"
#include "moaserve/errors.hpp"
#include "moaserve/orchestrator.hpp"
#include "moaserve/rng.hpp"

using namespace moaserve;

namespace {

AgentProfile make_profile(const std::string& tag, double prefill, double decode,
                          OutputLenDist out) {
  AgentProfile p;
  p.model_tag = tag;
  p.prefill_rate = prefill;
  p.decode_rate = decode;
  p.output_len = out;
  p.conf_logprob_mu = -0.8;
  p.conf_logprob_sigma = 0.2;
  p.semantic_overlap = 0.7;
  return p;
}

// Small 4-2-1 tree with distinct proposer/aggregator profiles and no
// kv-transfer or startup costs, so latencies reduce to closed form.
RunConfig small_tree_config() {
  Topology topo = Topology::tree({4, 2, 1}, {2, 2});
  AgentProfile leaf = make_profile("leaf", 2000, 100, OutputLenDist::uniform(40, 120));
  AgentProfile agg = make_profile("agg", 700, 60, OutputLenDist::fixed_len(64));
  for (const auto& layer : topo.layers()) {
    for (const auto& a : layer) {
      topo.assign_profile(a, topo.precursors(a).empty() ? leaf : agg);
    }
  }
  RunConfig cfg;
  cfg.topology = topo;
  cfg.mode = ScheduleMode::SequentialPd;
  cfg.early_exit = false;
  cfg.chunk_size = 16;
  cfg.seed = 5;
  cfg.repetitions = 1;
  cfg.query_tokens = 128;
  cfg.leaf_prefix_tokens = 32;
  cfg.agg_prefix_tokens = 48;
  cfg.separator_tokens = 3;
  cfg.suffix_tokens = 16;
  cfg.prefill_startup_overhead = 0.0;
  cfg.kv_transfer_per_block = 0.0;
  cfg.kv_block_tokens = 16;
  return cfg;
}

int planned_output_len(const RunConfig& cfg, int sample, const AgentId& a) {
  std::uint64_t ss = hash_combine(cfg.seed, static_cast<std::uint64_t>(sample));
  RngStream r = RngStream::derive(ss, "outlen:" + a.str());
  return cfg.topology.profile(a).output_len.sample(r);
}

}  // namespace

TEST_CASE("a query run is a pure function of config and sample index") {
  RunConfig cfg = small_tree_config();
  CHECK(run_query(cfg, 0).to_jsonl() == run_query(cfg, 0).to_jsonl());
  CHECK(run_query(cfg, 0).to_jsonl() != run_query(cfg, 1).to_jsonl());
  RunConfig other = cfg;
  other.seed = 6;
  CHECK(run_query(other, 0).to_jsonl() != run_query(cfg, 0).to_jsonl());
}

TEST_CASE("sequential scheduling matches the closed-form layered latency") {
  RunConfig cfg = small_tree_config();
  const Topology& topo = cfg.topology;
  for (int sample : {0, 1, 2}) {
    RunTrace t = run_query(cfg, sample);

    // Completion time, agent by agent, from the arithmetic model:
    //   complete = max(precursor completes) + prompt/prefill + out/decode.
    std::map<AgentId, int> out_len;
    std::map<AgentId, double> complete;
    for (const auto& layer : topo.layers()) {
      for (const auto& a : layer) {
        out_len[a] = planned_output_len(cfg, sample, a);
        const AgentProfile& prof = topo.profile(a);
        const auto& pre = topo.precursors(a);
        double ready = 0.0;
        int prompt = 0;
        if (pre.empty()) {
          prompt = cfg.leaf_prefix_tokens + cfg.query_tokens;
        } else {
          prompt = cfg.agg_prefix_tokens + cfg.suffix_tokens;
          for (const auto& p : pre) {
            prompt += cfg.separator_tokens + out_len[p];
            ready = std::max(ready, complete[p]);
          }
        }
        complete[a] = ready + prompt / prof.prefill_rate + out_len[a] / prof.decode_rate;
      }
    }

    for (const auto& [id, rec] : t.agents) {
      INFO("sample ", sample, " agent ", id.str());
      CHECK(rec.complete_t == doctest::Approx(complete[id]).epsilon(1e-9));
      CHECK(rec.output_tokens == out_len[id]);
    }
    CHECK(t.e2e_latency == doctest::Approx(complete[topo.root()]).epsilon(1e-9));
  }
}

TEST_CASE("critical-path prefill share follows the latest-precursor chain") {
  RunConfig cfg = small_tree_config();
  RunTrace t = run_query(cfg, 0);
  const Topology& topo = cfg.topology;

  // Reimplement the walk: from the root, hop to the latest-completing
  // surviving precursor, accumulating committed prefill seconds.
  double prefill = 0.0;
  AgentId at = topo.root();
  while (true) {
    for (const auto& p : t.agents.at(at).prefill) {
      if (!p.wasted) prefill += p.end - p.start;
    }
    const auto& pre = topo.precursors(at);
    if (pre.empty()) break;
    at = *std::max_element(pre.begin(), pre.end(), [&](const AgentId& x, const AgentId& y) {
      return t.agents.at(x).complete_t < t.agents.at(y).complete_t;
    });
  }
  double expect = prefill / t.e2e_latency;
  CHECK(critical_path_prefill_share(topo, t) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(critical_path_prefill_share(topo, t) > 0.0);
  CHECK(critical_path_prefill_share(topo, t) < 1.0);
}

TEST_CASE("a never-exiting evaluator leaves the schedule identical to early-exit off") {
  RunConfig base = AppConfig::preset().run;
  base.repetitions = 1;
  base.early_exit = false;
  RunTrace off = run_query(base, 0);

  RunConfig never = base;
  never.early_exit = true;
  never.force_q = 0.0;       // exit draw never fires
  never.ee_eval_latency = 0.0;
  RunTrace on = run_query(never, 0);

  REQUIRE(on.agents.size() == off.agents.size());
  for (const auto& [id, rec] : off.agents) {
    INFO("agent ", id.str());
    const AgentRecord& o = on.agents.at(id);
    CHECK(o.decode_start == doctest::Approx(rec.decode_start).epsilon(1e-12));
    CHECK(o.complete_t == doctest::Approx(rec.complete_t).epsilon(1e-12));
    CHECK(o.invoked == rec.invoked);
    CHECK_FALSE(o.pruned);
  }
  CHECK(on.e2e_latency == doctest::Approx(off.e2e_latency).epsilon(1e-12));
  // Every completion below the root was evaluated; none exited.
  CHECK(on.ee_evals == 12);  // 9 proposers + 3 mid-layer aggregators
  for (const auto& m : on.metricq) {
    CHECK(m.evaluated);
    CHECK_FALSE(m.decision.exited);
    CHECK(m.pruned.empty());
  }
  CHECK(on.ee_latency_total == 0.0);
}

TEST_CASE("evaluation latency shifts each dependency hop by exactly its cost") {
  RunConfig base = AppConfig::preset().run;
  base.mode = ScheduleMode::SequentialPd;  // releases gate the next layer exactly
  base.repetitions = 1;
  base.early_exit = false;
  RunTrace off = run_query(base, 0);

  RunConfig delayed = base;
  delayed.early_exit = true;
  delayed.force_q = 0.0;
  delayed.ee_eval_latency = 0.25;
  RunTrace on = run_query(delayed, 0);

  // Two gated dependency hops (proposers -> mid, mid -> root).
  CHECK(on.e2e_latency == doctest::Approx(off.e2e_latency + 0.5).epsilon(1e-9));
  CHECK(on.ee_evals == 12);
  CHECK(on.ee_latency_total == doctest::Approx(12 * 0.25));
  CHECK(on.ee_latency_share ==
        doctest::Approx(on.ee_latency_total / on.e2e_latency).epsilon(1e-12));
}

TEST_CASE("a certain exit keeps the first completion per cluster and prunes the rest") {
  RunConfig cfg = AppConfig::preset().run;
  cfg.repetitions = 1;
  cfg.early_exit = true;
  cfg.exit_scope = ExitScope::Cluster;
  cfg.force_q = 1.0;
  cfg.ee_eval_latency = 0.0;
  RunTrace t = run_query(cfg, 0);
  const Topology& topo = cfg.topology;

  // Four exit groups: three leaf clusters and one mid-layer cluster.
  CHECK(t.ee_evals == 4);
  std::set<std::string> groups;
  for (const auto& m : t.metricq) {
    groups.insert(m.group);
    CHECK(m.evaluated);
    CHECK(m.decision.exited);
    CHECK(m.decision.q == 1.0);
    // The root never participates in an exit group.
    CHECK(m.completed != topo.root());
  }
  CHECK(groups.size() == 4);

  // Exactly one survivor per cluster; survivors are the evaluation triggers.
  for (int l = 2; l <= topo.depth(); ++l) {
    for (const auto& cluster : topo.clusters_of_layer(l)) {
      int survivors = 0;
      for (const auto& m : cluster) {
        if (!t.agents.at(m).pruned) survivors += 1;
      }
      CHECK(survivors == 1);
    }
  }
  CHECK_FALSE(t.agents.at(topo.root()).pruned);
  CHECK(t.agents.at(topo.root()).invoked);

  // 2 pruned per leaf cluster x3 + 2 pruned in the mid cluster.
  int pruned = 0;
  for (const auto& [id, rec] : t.agents) pruned += rec.pruned ? 1 : 0;
  CHECK(pruned == 8);

  // Each evaluation names the members it cut off.
  for (const auto& m : t.metricq) {
    for (const auto& p : m.pruned) {
      CHECK(t.agents.at(p).pruned);
    }
  }
}

TEST_CASE("layer scope pools every sibling into one exit group") {
  RunConfig cfg = AppConfig::preset().run;
  cfg.repetitions = 1;
  cfg.early_exit = true;
  cfg.exit_scope = ExitScope::Layer;
  cfg.force_q = 1.0;
  cfg.ee_eval_latency = 0.0;
  RunTrace t = run_query(cfg, 0);

  // Two groups (proposer layer, mid layer); one eval each.
  CHECK(t.ee_evals == 2);
  int pruned = 0;
  for (const auto& [id, rec] : t.agents) pruned += rec.pruned ? 1 : 0;
  CHECK(pruned == 8 + 2);  // one survivor in each of the two gated layers
}

TEST_CASE("the all-to-all baseline always scopes exits per layer") {
  AppConfig app = AppConfig::preset();
  RunConfig cfg = app.run;
  cfg.topology = app.all_to_all_topology();
  cfg.repetitions = 1;
  cfg.early_exit = true;
  cfg.exit_scope = ExitScope::Cluster;  // ignored for all-to-all
  cfg.force_q = 1.0;
  cfg.ee_eval_latency = 0.0;
  RunTrace t = run_query(cfg, 0);
  CHECK(t.ee_evals == 2);
  std::set<std::string> groups;
  for (const auto& m : t.metricq) groups.insert(m.group);
  CHECK(groups.size() == 2);
}

TEST_CASE("repetitions sweep the sample index") {
  RunConfig cfg = small_tree_config();
  cfg.repetitions = 4;
  auto traces = run_repetitions(cfg);
  REQUIRE(traces.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(traces[static_cast<std::size_t>(i)].sample_index == i);
  // Sampled output lengths vary across samples, so latencies do too.
  std::set<std::string> distinct;
  for (const auto& t : traces) distinct.insert(format_double(t.e2e_latency));
  CHECK(distinct.size() > 1);
}

TEST_CASE("summaries aggregate latency, shares, and activation over samples") {
  RunConfig cfg = small_tree_config();
  cfg.repetitions = 3;
  auto traces = run_repetitions(cfg);
  RunSummary s = summarize(cfg, traces);

  CHECK(s.samples == 3);
  std::vector<double> e2e;
  for (const auto& t : traces) e2e.push_back(t.e2e_latency);
  double mean = (e2e[0] + e2e[1] + e2e[2]) / 3.0;
  CHECK(s.mean_e2e == doctest::Approx(mean).epsilon(1e-12));
  std::sort(e2e.begin(), e2e.end());
  CHECK(s.p50_e2e == doctest::Approx(e2e[1]).epsilon(1e-12));
  // Linear interpolation at rank 0.95 * 2 = 1.9.
  CHECK(s.p95_e2e == doctest::Approx(e2e[1] * 0.1 + e2e[2] * 0.9).epsilon(1e-9));

  // No early exit: every instance ran, activation is 1 for both profiles.
  REQUIRE(s.activation_counts.count("leaf") == 1);
  CHECK(s.activation_counts["leaf"].instances == 4 * 3);
  CHECK(s.activation_counts["leaf"].invoked == 4 * 3);
  CHECK(s.activation_counts["leaf"].pruned == 0);
  CHECK(s.activation["leaf"] == doctest::Approx(1.0));
  CHECK(s.activation["agg"] == doctest::Approx(1.0));
  CHECK(s.mean_recomputed_tokens == 0.0);
  CHECK(s.prefill_share > 0.0);

  auto j = s.to_json();
  CHECK(j.at("samples") == 3);
  CHECK(j.at("accuracy").get<std::string>().find("excluded") != std::string::npos);
}

TEST_CASE("the four-setting comparison orders the configurations as designed") {
  AppConfig app = AppConfig::preset();
  RunConfig base = app.run;
  base.seed = 1;
  AblationTable table = run_ablation(base, app.all_to_all_topology(), 4);

  REQUIRE(table.rows.size() == 4);
  CHECK(table.rows[0].setting == "all-to-all");
  CHECK(table.rows[1].setting == "tree");
  CHECK(table.rows[2].setting == "tree+overlap");
  CHECK(table.rows[3].setting == "tree+overlap+ee");
  CHECK(table.rows[0].normalized_mean == doctest::Approx(1.0).epsilon(1e-12));

  // Each added mechanism lowers mean end-to-end latency on this workload.
  CHECK(table.rows[1].mean_e2e < table.rows[0].mean_e2e);
  CHECK(table.rows[2].mean_e2e < table.rows[1].mean_e2e);
  CHECK(table.rows[3].mean_e2e < table.rows[2].mean_e2e);
  CHECK(table.rows[3].normalized_mean < table.rows[2].normalized_mean);

  // Early exit only appears in the integrated setting.
  CHECK(table.rows[0].mean_ee_share == 0.0);
  CHECK(table.rows[1].mean_ee_share == 0.0);
  CHECK(table.rows[2].mean_ee_share == 0.0);
  // Pruning shows up as sub-unity proposer activation in the last row only.
  CHECK(table.rows[2].activation.at("4B") == doctest::Approx(1.0));
  CHECK(table.rows[3].activation.at("4B") < 1.0);

  // Serialized forms carry the accuracy exclusion and the settings in order.
  std::string csv = table.to_csv();
  CHECK(csv.find("setting,samples,mean_e2e_s") == 0);
  CHECK(csv.find("excluded") != std::string::npos);
  auto j = table.to_json();
  REQUIRE(j.at("rows").size() == 4);
  CHECK(j.at("rows")[0].at("setting") == "all-to-all");

  CHECK_THROWS_AS(run_ablation(base, app.all_to_all_topology(), 0), ValidationError);
  RunConfig ata_base = base;
  ata_base.topology = app.all_to_all_topology();
  CHECK_THROWS_AS(run_ablation(ata_base, app.all_to_all_topology(), 1), ValidationError);
  CHECK_THROWS_AS(run_ablation(base, base.topology, 1), ValidationError);
}

TEST_CASE("the single-aggregator mode study ranks schedules consistently") {
  SecondLayerConfig cfg;
  cfg.samples = 6;
  cfg.seed = 3;
  cfg.out_min = 64;
  cfg.out_max = 512;
  auto rows = run_second_layer_study(cfg);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].mode == ScheduleMode::SequentialPd);
  CHECK(rows[1].mode == ScheduleMode::DpOnly);
  CHECK(rows[2].mode == ScheduleMode::DpChunkedPrefill);
  CHECK(rows[3].mode == ScheduleMode::IncrementalOverlap);
  CHECK(rows[0].normalized_vs_sequential == doctest::Approx(1.0).epsilon(1e-12));
  // Chunking the remainder changes nothing when startup overhead is zero.
  CHECK(rows[2].mean_e2e == doctest::Approx(rows[1].mean_e2e).epsilon(1e-9));
  // Incremental overlap beats sequential scheduling.
  CHECK(rows[3].mean_e2e < rows[0].mean_e2e);
  CHECK(rows[3].normalized_vs_sequential < 1.0);

  std::string csv = second_layer_csv(rows);
  CHECK(csv.find("mode,mean_e2e_s,normalized_vs_sequential,reduction_vs_sequential\n") == 0);
  CHECK(csv.find("sequential-pd,") != std::string::npos);
  CHECK(csv.find("incremental-overlap,") != std::string::npos);

  SecondLayerConfig bad = cfg;
  bad.samples = 0;
  CHECK_THROWS_AS(run_second_layer_study(bad), ValidationError);
  bad = cfg;
  bad.out_min = 0;
  CHECK_THROWS_AS(run_second_layer_study(bad), ValidationError);
}

TEST_CASE("config guards reject invalid run parameters") {
  RunConfig cfg = small_tree_config();
  cfg.tau = 1.5;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("tau"), ValidationError);
  cfg = small_tree_config();
  cfg.force_q = -0.25;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("force_q"), ValidationError);
  cfg = small_tree_config();
  cfg.repetitions = 0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("repetitions"), ValidationError);
  cfg = small_tree_config();
  cfg.ee_eval_latency = -1.0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("ee_eval_latency"), ValidationError);

  // Early exit needs at least one logprob per output: a zero-length output
  // distribution is rejected up front.
  cfg = small_tree_config();
  cfg.early_exit = true;
  Topology topo = cfg.topology;
  AgentProfile silent = make_profile("silent", 1000, 50, OutputLenDist::fixed_len(0));
  topo.assign_profile(AgentId{1, 0}, silent);
  cfg.topology = topo;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg.early_exit = false;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("mode labels compose topology, schedule, and exit flag") {
  RunConfig cfg = small_tree_config();
  CHECK(cfg.mode_label() == "tree|sequential-pd");
  cfg.mode = ScheduleMode::IncrementalOverlap;
  cfg.early_exit = true;
  CHECK(cfg.mode_label() == "tree|incremental-overlap|ee");
  AppConfig app = AppConfig::preset();
  cfg.topology = app.all_to_all_topology();
  CHECK(cfg.mode_label() == "all_to_all|incremental-overlap|ee");
}
