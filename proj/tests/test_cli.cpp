#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "json.hpp"
#include "qttt/experiment.hpp"
#include "qttt/tasks.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int rc;
  std::string out, err;
};

Run cli_run(std::vector<std::string> args) {
  args.insert(args.begin(), "qttt");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int rc = qttt::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {rc, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("qttt_test_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("gen writes one valid record per seed, deterministically") {
  const auto d = scratch("gen");
  for (const char* sub : {"a", "b"}) {
    const auto r = cli_run({"gen", "--kind", "transactions", "--n-ops", "30", "--seeds", "8", "--seed", "5", "--out",
                            (d / sub).string()});
    REQUIRE(r.rc == 0);
  }
  const std::string a = slurp(d / "a" / "dataset.jsonl");
  CHECK(a == slurp(d / "b" / "dataset.jsonl"));
  const auto tasks = qttt::read_dataset(d / "a" / "dataset.jsonl");
  REQUIRE(tasks.size() == 8);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    CHECK(tasks[i].seed == 5 + i);
    CHECK(tasks[i].length_param == 30);
  }
  fs::remove_all(d);
}

TEST_CASE("flops --json reproduces the headline schedule") {
  const auto r = cli_run({"flops", "--json"});
  REQUIRE(r.rc == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j.at("thinking_tokens_rule_of_thumb") == "8192");
  CHECK(j.at("T") == 100000);
}

TEST_CASE("theory-check exits 0 on a small trial count") { CHECK(cli_run({"theory-check", "--trials", "20"}).rc == 0); }

TEST_CASE("run refuses mismatched budgets with exit code 3 and writes nothing") {
  const auto d = scratch("budget");
  qttt::ModelConfig mc;
  mc.n_layers = 1;
  mc.n_heads = 1;
  mc.d_model = 8;
  qttt::save_checkpoint(qttt::init_params(mc, 0), d / "model.ckpt");
  {
    std::ofstream cfg(d / "config.json");
    cfg << R"({"task": {"kind": "transactions", "lengths": [8], "allow_out_of_range": true},
               "checkpoint": "model.ckpt",
               "conditions": [{"type": "thinking", "tokens": 1000}],
               "adaptation": {"steps": 4, "span_length": 16}})";
  }
  const auto r = cli_run({"run", "--config", (d / "config.json").string(), "--out", (d / "out").string()});
  CHECK(r.rc == 3);
  CHECK(!fs::exists(d / "out" / "results.csv"));
  fs::remove_all(d);
}

TEST_CASE("report aggregates a hand-written results file") {
  const auto d = scratch("report");
  std::vector<qttt::ResultRow> rows;
  for (int s = 0; s < 4; ++s) {
    qttt::ResultRow r;
    r.task_kind = "transactions";
    r.length_param = 16;
    r.condition = "in_context";
    r.seed = static_cast<std::uint64_t>(s);
    r.accuracy = s < 3 ? 1.0 : 0.0;
    r.needle_mass_mean = 0.1;
    rows.push_back(r);
  }
  {
    std::ofstream out(d / "results.csv");
    out << qttt::results_csv(rows);
  }
  const auto r = cli_run({"report", (d / "results.csv").string()});
  REQUIRE(r.rc == 0);
  CHECK(r.out.find("in_context") != std::string::npos);
  CHECK(r.out.find("0.75") != std::string::npos);  // 3 of 4 correct
  fs::remove_all(d);
}

TEST_CASE("bad arguments are a nonzero exit, not a crash") {
  CHECK(cli_run({"gen", "--kind", "nonsense"}).rc != 0);
  CHECK(cli_run({"flops", "--layers", "0"}).rc != 0);
}
