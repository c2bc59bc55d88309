#include <doctest.h>

#include <sys/wait.h>

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "moaserve/config.hpp"
#include "moaserve/errors.hpp"
#include "moaserve/orchestrator.hpp"

// After every project header: pulling in httplib earlier corrupts Eigen's
// expression templates through its macro surface.
#include <httplib.h>

#ifndef MOASERVE_CLI_PATH
#error "MOASERVE_CLI_PATH must be defined by the build"
#endif
#ifndef MOASERVE_ENGINE_SERVICE_PATH
#error "MOASERVE_ENGINE_SERVICE_PATH must be defined by the build"
#endif

using namespace moaserve;
using json = nlohmann::ordered_json;

namespace {

const std::string kCli = MOASERVE_CLI_PATH;
const std::string kEngineService = MOASERVE_ENGINE_SERVICE_PATH;

struct CmdResult {
  int status = -1;
  std::string out;
};

CmdResult run_cmd(const std::string& cmd, bool merge_stderr = true) {
  std::string full = cmd + (merge_stderr ? " 2>&1" : " 2>/dev/null");
  FILE* pipe = popen(full.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CmdResult r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), pipe)) > 0) r.out.append(buf, n);
  int rc = pclose(pipe);
  r.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  return r;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name)
      : path(std::filesystem::path("/tmp") / ("moaserve_cli_" + name)) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  REQUIRE(out.good());
  out << content;
}

// Shrunk 4-2-1 variant of the calibrated preset: fast enough to run many
// times in subprocesses while exercising every code path.
std::string write_small_config(const TempDir& dir) {
  AppConfig c = AppConfig::preset();
  c.widths = {4, 2, 1};
  c.branching = {2, 2};
  c.all_to_all_widths = {4, 4, 1};
  c.run.repetitions = 3;
  c.ablation_samples = 4;
  c.second_layer.samples = 4;
  c.finalize();
  std::string path = dir.file("config.json");
  write_file(path, c.to_json().dump(2) + "\n");
  return path;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::string cur;
  for (char ch : text) {
    if (ch == '\n') {
      lines.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) lines.push_back(cur);
  return lines;
}

// Runs the standalone engine daemon on an ephemeral port until destruction.
struct Daemon {
  pid_t pid = -1;
  FILE* out = nullptr;
  int port = 0;

  explicit Daemon(std::vector<std::string> args) {
    args.insert(args.begin(), kEngineService);
    int fds[2];
    REQUIRE(pipe(fds) == 0);
    pid = fork();
    REQUIRE(pid >= 0);
    if (pid == 0) {
      dup2(fds[1], 1);
      dup2(fds[1], 2);
      close(fds[0]);
      close(fds[1]);
      std::vector<char*> argv;
      argv.reserve(args.size() + 1);
      for (auto& a : args) argv.push_back(a.data());
      argv.push_back(nullptr);
      execv(argv[0], argv.data());
      _exit(127);
    }
    close(fds[1]);
    out = fdopen(fds[0], "r");
    REQUIRE(out != nullptr);
    char line[256];
    REQUIRE(std::fgets(line, sizeof(line), out) != nullptr);
    std::string banner(line);
    CHECK(banner.rfind("listening on 127.0.0.1:", 0) == 0);
    auto colon = banner.rfind(':');
    REQUIRE(colon != std::string::npos);
    port = std::atoi(banner.c_str() + colon + 1);
    REQUIRE(port > 0);
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port); }

  ~Daemon() {
    if (pid > 0) {
      kill(pid, SIGTERM);
      int status = 0;
      waitpid(pid, &status, 0);
    }
    if (out) std::fclose(out);
  }
};

}  // namespace

TEST_CASE("cli: simulate is deterministic and writes per-sample traces plus a summary") {
  TempDir dir("simulate");
  std::string cfg = write_small_config(dir);

  auto r1 = run_cmd(kCli + " simulate --config " + cfg + " --out " + dir.file("d1"), false);
  auto r2 = run_cmd(kCli + " simulate --config " + cfg + " --out " + dir.file("d2"), false);
  REQUIRE(r1.status == 0);
  REQUIRE(r2.status == 0);

  // stdout carries the same summary that lands on disk.
  CHECK(r1.out == read_file(dir.file("d1/summary.json")));
  CHECK(r1.out == r2.out);

  json summary = json::parse(r1.out);
  CHECK(summary.at("mode") == "tree|incremental-overlap|ee");
  CHECK(summary.at("samples") == 3);
  CHECK(summary.at("mean_e2e").get<double>() > 0.0);
  CHECK(summary.at("accuracy") == "excluded: requires real model inference");

  for (int i = 0; i < 3; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "trace_%03d.jsonl", i);
    std::string a = read_file(dir.file(std::string("d1/") + name));
    CHECK(a == read_file(dir.file(std::string("d2/") + name)));
    CHECK_FALSE(a.empty());
  }

  // A different seed changes the traces.
  auto r3 = run_cmd(
      kCli + " simulate --config " + cfg + " --seed 99 --out " + dir.file("d3"), false);
  REQUIRE(r3.status == 0);
  CHECK(read_file(dir.file("d3/trace_000.jsonl")) != read_file(dir.file("d1/trace_000.jsonl")));
}

TEST_CASE("cli: simulate --format csv writes per-agent tables") {
  TempDir dir("simulate_csv");
  std::string cfg = write_small_config(dir);
  auto r = run_cmd(kCli + " simulate --config " + cfg + " --format csv --out " + dir.file("d"),
                   false);
  REQUIRE(r.status == 0);
  for (int i = 0; i < 3; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "d/agents_%03d.csv", i);
    std::string csv = read_file(dir.file(name));
    auto lines = lines_of(csv);
    REQUIRE(lines.size() >= 2);
    CHECK(lines[0].rfind("agent,", 0) == 0);
    CHECK(lines[0].substr(lines[0].size() - 8) == ",de_busy");
    CHECK(lines.size() == 8u);  // header + 7 agents
  }
  CHECK(json::parse(r.out).at("samples") == 3);
}

TEST_CASE("cli: mode, tau and chunk-size overrides are applied and validated") {
  TempDir dir("overrides");
  std::string cfg = write_small_config(dir);

  auto seq = run_cmd(kCli + " simulate --config " + cfg + " --mode sequential-pd", false);
  REQUIRE(seq.status == 0);
  CHECK(json::parse(seq.out).at("mode") == "tree|sequential-pd|ee");

  auto inc = run_cmd(kCli + " simulate --config " + cfg, false);
  REQUIRE(inc.status == 0);
  CHECK(json::parse(inc.out).at("mean_e2e").get<double>() !=
        json::parse(seq.out).at("mean_e2e").get<double>());

  auto bad_mode = run_cmd(kCli + " simulate --config " + cfg + " --mode warp");
  CHECK(bad_mode.status == 2);
  auto bad_tau = run_cmd(kCli + " simulate --config " + cfg + " --tau 0");
  CHECK(bad_tau.status == 2);
  auto bad_chunk = run_cmd(kCli + " simulate --config " + cfg + " --chunk-size 0");
  CHECK(bad_chunk.status == 2);
}

TEST_CASE("cli: ablate emits the four-setting table with optional filtering") {
  TempDir dir("ablate");
  std::string cfg = write_small_config(dir);

  auto r = run_cmd(kCli + " ablate --config " + cfg, false);
  REQUIRE(r.status == 0);
  auto lines = lines_of(r.out);
  REQUIRE(lines.size() == 5);
  CHECK(lines[0].rfind("setting,samples,mean_e2e_s", 0) == 0);
  CHECK(lines[1].rfind("all-to-all,", 0) == 0);
  CHECK(lines[2].rfind("tree,", 0) == 0);
  CHECK(lines[3].rfind("tree+overlap,", 0) == 0);
  CHECK(lines[4].rfind("tree+overlap+ee,", 0) == 0);

  // --out writes the same bytes to a file.
  auto r2 = run_cmd(kCli + " ablate --config " + cfg + " --out " + dir.file("table.csv"), false);
  REQUIRE(r2.status == 0);
  CHECK(read_file(dir.file("table.csv")) == r.out);

  // Filtering keeps the requested settings in request order.
  auto filt = run_cmd(
      kCli + " ablate --config " + cfg + " --settings 'tree+overlap+ee,tree'", false);
  REQUIRE(filt.status == 0);
  auto flines = lines_of(filt.out);
  REQUIRE(flines.size() == 3);
  CHECK(flines[1].rfind("tree+overlap+ee,", 0) == 0);
  CHECK(flines[2].rfind("tree,", 0) == 0);

  auto bogus = run_cmd(kCli + " ablate --config " + cfg + " --settings nonsense");
  CHECK(bogus.status == 2);
  CHECK(bogus.out.find("unknown setting") != std::string::npos);

  auto jl = run_cmd(kCli + " ablate --config " + cfg + " --format jsonl", false);
  REQUIRE(jl.status == 0);
  auto jlines = lines_of(jl.out);
  REQUIRE(jlines.size() == 4);
  CHECK(json::parse(jlines[0]).at("setting") == "all-to-all");
  CHECK(json::parse(jlines[3]).at("setting") == "tree+overlap+ee");
}

TEST_CASE("cli: ablate --second-layer emits the schedule-mode study") {
  TempDir dir("second_layer");
  std::string cfg = write_small_config(dir);

  auto r = run_cmd(kCli + " ablate --config " + cfg + " --second-layer", false);
  REQUIRE(r.status == 0);
  auto lines = lines_of(r.out);
  REQUIRE(lines.size() == 5);
  CHECK(lines[0] == "mode,mean_e2e_s,normalized_vs_sequential,reduction_vs_sequential");
  CHECK(lines[1].rfind("sequential-pd,", 0) == 0);
  CHECK(lines[4].rfind("incremental-overlap,", 0) == 0);

  auto jl = run_cmd(kCli + " ablate --config " + cfg + " --second-layer --format jsonl", false);
  REQUIRE(jl.status == 0);
  auto jlines = lines_of(jl.out);
  REQUIRE(jlines.size() == 4);
  json first = json::parse(jlines[0]);
  CHECK(first.at("mode") == "sequential-pd");
  CHECK(first.at("normalized_vs_sequential").get<double>() == doctest::Approx(1.0));
  CHECK(first.at("reduction_vs_sequential").get<double>() == doctest::Approx(0.0));
  json last = json::parse(jlines[3]);
  CHECK(last.at("mode") == "incremental-overlap");
  CHECK(last.at("reduction_vs_sequential").get<double>() > 0.0);
}

TEST_CASE("cli: metricq-eval reports every intermediate of the worked pair") {
  TempDir dir("metricq");
  json outputs;
  outputs["outputs"] = json::array({json::array({1, 2}), json::array({3, 4})});
  outputs["embeddings"] = {
      {"1,2", json::array({json::array({1.0, 1.0}), json::array({1.0, -1.0})})},
      {"3,4", json::array({json::array({1.0, 0.75}),
                           json::array({0.0, std::sqrt(0.4375)})})}};
  outputs["hidden"] = 2;
  write_file(dir.file("outputs.json"), outputs.dump());
  write_file(dir.file("logprobs.json"), "[[-0.1, -0.3], [-0.1, -0.3]]");

  auto r = run_cmd(
      kCli + " metricq-eval " + dir.file("outputs.json") + " " + dir.file("logprobs.json"),
      false);
  REQUIRE(r.status == 0);
  json report = json::parse(r.out);
  CHECK(report.at("tau").get<double>() == doctest::Approx(0.7));
  CHECK(report.at("include_diagonal") == true);
  CHECK(report.at("completions") == 2);
  REQUIRE(report.at("steps").size() == 2);
  CHECK(report.at("steps").at(1).at("c").get<double>() ==
        doctest::Approx(0.8187307530779818).epsilon(1e-12));
  CHECK(report.at("c_bar").get<double>() == doctest::Approx(0.8187307530779818).epsilon(1e-12));
  CHECK(report.at("weight_sum").get<double>() ==
        doctest::Approx(2.0109601381069178).epsilon(1e-12));
  CHECK(report.at("weighted").get<double>() ==
        doctest::Approx(0.9333333333333333).epsilon(1e-12));
  CHECK(report.at("calibrated").get<double>() ==
        doctest::Approx(0.6666666666666665).epsilon(1e-12));
  CHECK(report.at("q").get<double>() == doctest::Approx(0.7387966581218324).epsilon(1e-12));

  // The diagonal carries the self-confidence mass; without it only the
  // cross-pair similarity remains.
  auto nodiag = run_cmd(kCli + " metricq-eval " + dir.file("outputs.json") + " " +
                            dir.file("logprobs.json") + " --exclude-diagonal",
                        false);
  REQUIRE(nodiag.status == 0);
  json nreport = json::parse(nodiag.out);
  CHECK(nreport.at("include_diagonal") == false);
  CHECK(nreport.at("weighted").get<double>() == doctest::Approx(0.8).epsilon(1e-12));

  // Landing exactly on tau maximizes the calibration term.
  auto attau = run_cmd(kCli + " metricq-eval " + dir.file("outputs.json") + " " +
                           dir.file("logprobs.json") + " --tau 0.9333333333333333",
                       false);
  REQUIRE(attau.status == 0);
  json treport = json::parse(attau.out);
  CHECK(treport.at("calibrated").get<double>() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(treport.at("q").get<double>() ==
        doctest::Approx(std::sqrt(0.8187307530779818)).epsilon(1e-12));

  write_file(dir.file("short.json"), "[[-0.1, -0.3]]");
  auto mismatch = run_cmd(
      kCli + " metricq-eval " + dir.file("outputs.json") + " " + dir.file("short.json"));
  CHECK(mismatch.status == 2);
  CHECK(mismatch.out.find("records") != std::string::npos);

  auto missing = run_cmd(
      kCli + " metricq-eval " + dir.file("nope.json") + " " + dir.file("logprobs.json"));
  CHECK(missing.status == 2);
  CHECK(missing.out.find("cannot open") != std::string::npos);
}

TEST_CASE("cli: topology-check reports both topology shapes and the model plan") {
  auto r = run_cmd(kCli + " topology-check", false);
  REQUIRE(r.status == 0);
  json report = json::parse(r.out);
  CHECK(report.at("ok") == true);
  CHECK(report.at("tree").at("agents") == 13);
  CHECK(report.at("tree").at("widths") == json::array({9, 3, 1}));
  CHECK(report.at("tree").at("kind") == "tree");
  CHECK(report.at("all_to_all").at("agents") == 19);
  CHECK(report.at("all_to_all").at("widths") == json::array({9, 9, 1}));
  CHECK(report.at("tree").at("clusters").at(0).at("cluster_sizes") == json::array({3, 3, 3}));
  CHECK(report.at("models").at(0).at(0) == "4B");
  CHECK(report.at("models").at(0).at(3) == "4B");  // assignment cycles
  CHECK(report.at("models").at(1).at(0) == "agg-mid");
  CHECK(report.at("models").at(2).at(0) == "agg-root");

  TempDir dir("topology");
  write_file(dir.file("bad.json"), R"({"topology": {"widths": [9, 4, 1]}})");
  auto bad = run_cmd(kCli + " topology-check --config " + dir.file("bad.json"));
  CHECK(bad.status == 2);
  CHECK(bad.out.find("layer 2") != std::string::npos);
}

TEST_CASE("cli: trace-export round trips traces byte-identically") {
  TempDir dir("export");
  std::string cfg = write_small_config(dir);
  REQUIRE(run_cmd(kCli + " simulate --config " + cfg + " --out " + dir.file("j"), false).status ==
          0);
  REQUIRE(run_cmd(kCli + " simulate --config " + cfg + " --format csv --out " + dir.file("c"),
                  false)
              .status == 0);

  std::string trace_path = dir.file("j/trace_000.jsonl");
  auto jsonl = run_cmd(kCli + " trace-export " + trace_path, false);
  REQUIRE(jsonl.status == 0);
  CHECK(jsonl.out == read_file(trace_path));

  auto csv = run_cmd(kCli + " trace-export " + trace_path + " --format csv", false);
  REQUIRE(csv.status == 0);
  CHECK(csv.out == read_file(dir.file("c/agents_000.csv")));

  auto missing = run_cmd(kCli + " trace-export " + dir.file("absent.jsonl"));
  CHECK(missing.status == 2);
  CHECK(missing.out.find("cannot open") != std::string::npos);

  write_file(dir.file("garbage.jsonl"), "this is not a trace\n");
  auto garbage = run_cmd(kCli + " trace-export " + dir.file("garbage.jsonl"));
  CHECK(garbage.status == 2);
}

TEST_CASE("cli: config and usage errors exit with code 2") {
  TempDir dir("errors");
  auto missing_cfg = run_cmd(kCli + " simulate --config " + dir.file("absent.json"));
  CHECK(missing_cfg.status == 2);
  CHECK(missing_cfg.out.find("cannot open") != std::string::npos);

  write_file(dir.file("broken.json"), "{nope");
  auto broken = run_cmd(kCli + " simulate --config " + dir.file("broken.json"));
  CHECK(broken.status == 2);

  write_file(dir.file("unknown.json"), R"({"mystery": 1})");
  auto unknown = run_cmd(kCli + " simulate --config " + dir.file("unknown.json"));
  CHECK(unknown.status == 2);
  CHECK(unknown.out.find("unknown field 'mystery'") != std::string::npos);

  CHECK(run_cmd(kCli + " explode").status == 2);
  CHECK(run_cmd(kCli).status == 2);
  CHECK(run_cmd(kCli + " simulate --format yaml").status == 2);

  auto help = run_cmd(kCli + " --help", false);
  CHECK(help.status == 0);
  CHECK(help.out.find("simulate") != std::string::npos);
  CHECK(help.out.find("metricq-eval") != std::string::npos);
}

TEST_CASE("engine daemon: flag validation exits with code 2") {
  CHECK(run_cmd(kEngineService + " --port 70000").status == 2);
  CHECK(run_cmd(kEngineService + " --chunk-size 0").status == 2);
  CHECK(run_cmd(kEngineService + " --decode-rate 0").status == 2);
  CHECK(run_cmd(kEngineService + " --bogus-flag 1").status == 2);
}

TEST_CASE("engine daemon: serves the split protocol end to end") {
  Daemon daemon({"--port", "0", "--prefill-rate", "1000", "--decode-rate", "50"});
  httplib::Client cli(daemon.url());
  cli.set_connection_timeout(10, 0);

  auto health = cli.Get("/healthz");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(json::parse(health->body).at("ok") == true);

  json pre = {{"agent", "1:0"}, {"start", 0}, {"tokens", json::array({1, 2, 3, 4})}, {"t", 0.0}};
  auto res = cli.Post("/prefill_only", pre.dump(), "application/json");
  REQUIRE(res);
  REQUIRE(res->status == 200);
  CHECK(json::parse(res->body).at("t_end").get<double>() == doctest::Approx(0.004));

  json gen = {{"agent", "1:0"}, {"prompt", json::array({1, 2, 3, 4, 5})}, {"output_tokens", 10}};
  auto res2 = cli.Post("/generate", gen.dump(), "application/json");
  REQUIRE(res2);
  REQUIRE(res2->status == 200);
  json parsed = json::parse(res2->body);
  CHECK(parsed.at("remainder") == 1);
  CHECK(parsed.at("decode_end").get<double>() ==
        doctest::Approx(parsed.at("decode_start").get<double>() + 0.2));
}

TEST_CASE("engine daemon: --no-prefill-route drops the split entrypoint") {
  Daemon daemon({"--port", "0", "--no-prefill-route"});
  httplib::Client cli(daemon.url());
  cli.set_connection_timeout(10, 0);

  json pre = {{"agent", "1:0"}, {"start", 0}, {"tokens", json::array({1})}};
  auto res = cli.Post("/prefill_only", pre.dump(), "application/json");
  REQUIRE(res);
  CHECK(res->status == 404);

  json gen = {{"agent", "1:0"}, {"prompt", json::array({1, 2})}};
  auto res2 = cli.Post("/generate", gen.dump(), "application/json");
  REQUIRE(res2);
  CHECK(res2->status == 200);
}
