#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "qttt/experiment.hpp"
#include "qttt/flops.hpp"
#include "qttt/model.hpp"
#include "qttt/tasks.hpp"
#include "qttt/theory.hpp"
#include "qttt/transformer.hpp"

namespace qttt::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string config;
  std::string out;
};

// --out wins, then QTTT_OUTPUT_DIR, then the fallback.
std::string output_dir(const Common& c, const std::string& fallback) {
  if (!c.out.empty()) return c.out;
  if (const char* env = std::getenv("QTTT_OUTPUT_DIR"); env && *env) return env;
  return fallback;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::vector<BugType> parse_bug_mix(const std::string& s) {
  if (s == "all") return {BugType::CalcError, BugType::NegativeBal, BugType::LostUpdate, BugType::DuplicateTxn};
  std::vector<BugType> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(bug_type_from_string(item));
  if (out.empty()) throw std::invalid_argument("empty --bug-mix");
  return out;
}

// ---- gen -------------------------------------------------------------------

struct GenArgs {
  std::string kind = "transactions";
  std::size_t length = 100;
  std::size_t seeds = 10;
  std::string bug_mix = "all";
  std::size_t n_accounts = 2;
  bool allow_out_of_range = false;
  std::string name = "dataset.jsonl";
};

int cmd_gen(const GenArgs& a, const Common& c, std::ostream& out) {
  const TaskKind kind = task_kind_from_string(a.kind);
  TransactionOptions opt;
  opt.n_accounts = a.n_accounts;
  opt.allow_out_of_range = a.allow_out_of_range;
  const auto mix = parse_bug_mix(a.bug_mix);
  std::vector<TaskInstance> tasks;
  std::map<std::string, std::size_t> counts;
  std::size_t tok_min = SIZE_MAX, tok_max = 0, tok_sum = 0;
  for (std::size_t i = 0; i < a.seeds; ++i) {
    const std::uint64_t seed = c.seed + i;
    tasks.push_back(kind == TaskKind::Transactions ? make_transaction_instance(a.length, mix[i % mix.size()], seed, opt)
                                                   : make_code_instance(a.length, seed));
    const auto& t = tasks.back();
    ++counts[kind == TaskKind::Transactions ? to_string(std::get<TransactionTask>(t.task).bug_type)
                                            : "needle_kind_" + std::to_string(std::get<CodeNeedleTask>(t.task).needle_kind)];
    const std::size_t n = render_task_tokens(t, PromptStyle::Direct).tokens.size();
    tok_min = std::min(tok_min, n);
    tok_max = std::max(tok_max, n);
    tok_sum += n;
  }
  const fs::path path = fs::path(output_dir(c, ".")) / a.name;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_dataset(path.string(), tasks);
  out << "wrote " << tasks.size() << " tasks to " << path.string() << "\n";
  for (const auto& [k, v] : counts) out << "  " << k << ": " << v << "\n";
  if (!tasks.empty()) {
    out << "  tokens per prompt: min " << tok_min << ", mean " << tok_sum / tasks.size() << ", max " << tok_max << "\n";
  }
  return 0;
}

// ---- theory-check --------------------------------------------------------------

int cmd_theory(std::size_t trials, const Common& c, bool json, std::ostream& out) {
  TheoryOptions opt;
  opt.trials = trials;
  opt.seed = c.seed;
  const auto results = run_theory_suite(opt);
  bool ok = true;
  if (json) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& r : results) {
      j.push_back({{"name", r.name}, {"trials", r.trials}, {"violations", r.violations},
                   {"worst", r.worst}, {"seconds", r.seconds}, {"note", r.note}, {"passed", r.passed()}});
      ok &= r.passed();
    }
    out << j.dump(2) << "\n";
  } else {
    for (const auto& r : results) {
      out << (r.passed() ? "PASS " : "FAIL ") << std::left << std::setw(22) << r.name << " trials=" << r.trials
          << " violations=" << r.violations << " worst=" << r.worst << " (" << std::fixed << std::setprecision(2)
          << r.seconds << " s)" << std::defaultfloat << std::setprecision(6);
      if (!r.note.empty()) out << "  " << r.note;
      out << "\n";
      ok &= r.passed();
    }
  }
  return ok ? 0 : 1;
}

// ---- flops -------------------------------------------------------------------------

struct FlopArgs {
  std::uint64_t layers = 32, d_model = 4096, mlp_ratio = 4, T = 100000, k = 128, steps = 32;
  std::uint64_t bon_tokens = 0;
  bool json = false;
};

int cmd_flops(const FlopArgs& a, std::ostream& out) {
  const FlopModel m{a.layers, a.d_model, a.mlp_ratio};
  const auto rot = matched_thinking_tokens(m, a.k, a.steps, a.T, MatchMode::RuleOfThumb);
  const auto exact = matched_thinking_tokens(m, a.k, a.steps, a.T, MatchMode::Exact);
  const auto exact_span = matched_thinking_tokens(m, a.k, a.steps, a.T, MatchMode::Exact, true);
  const Budget q = qttt_partial_flops(m, a.k, a.T, a.steps);
  const Budget qs = qttt_partial_flops(m, a.k, a.T, a.steps, true);
  const Budget g = gen_flops(m, rot, a.T);
  std::vector<std::pair<std::string, std::string>> rows = {
      {"C_quad", to_string_u128(m.c_quad())},
      {"C_tok", to_string_u128(m.c_tok())},
      {"prefill_flops(T)", to_string_u128(prefill_flops(m, a.T).flops)},
      {"qttt_partial_flops", to_string_u128(q.flops)},
      {"qttt_partial_flops_in_span", to_string_u128(qs.flops)},
      {"thinking_tokens_rule_of_thumb", std::to_string(rot)},
      {"gen_flops(rule_of_thumb)", to_string_u128(g.flops)},
      {"thinking_tokens_exact", std::to_string(exact)},
      {"thinking_tokens_exact_in_span", std::to_string(exact_span)},
      {"full_ttt_equivalent_tokens", std::to_string(full_ttt_equivalent_tokens(m, a.T))},
  };
  if (a.bon_tokens > 0) {
    rows.emplace_back("bon_trajectories", std::to_string(matched_bon_trajectories(m, q, a.bon_tokens, a.T)));
  }
  if (a.json) {
    nlohmann::ordered_json j;
    j["model"] = {{"layers", a.layers}, {"d_model", a.d_model}, {"mlp_ratio", a.mlp_ratio}};
    j["T"] = a.T;
    j["k"] = a.k;
    j["steps"] = a.steps;
    for (const auto& [k, v] : rows) j[k] = v;  // u128 values as decimal strings
    out << j.dump(2) << "\n";
  } else {
    out << "L=" << a.layers << " d=" << a.d_model << " r=" << a.mlp_ratio << " T=" << a.T << " k=" << a.k
        << " N=" << a.steps << "\n";
    for (const auto& [k, v] : rows) out << "  " << std::left << std::setw(32) << k << std::right << std::setw(28) << v << "\n";
  }
  return 0;
}

// ---- run / report -------------------------------------------------------------------

int cmd_run(const Common& c, const std::string& checkpoint, std::ostream& out) {
  if (c.config.empty()) throw std::invalid_argument("run needs --config");
  ExperimentConfig cfg = ExperimentConfig::from_json(read_file(c.config));
  if (c.seed_set) cfg.seed = c.seed;
  if (!checkpoint.empty()) cfg.checkpoint = checkpoint;
  if (cfg.checkpoint.empty()) throw std::invalid_argument("no checkpoint given (config or --checkpoint)");
  fs::path ckpt = cfg.checkpoint;
  if (ckpt.is_relative() && !fs::exists(ckpt)) ckpt = fs::path(c.config).parent_path() / ckpt;
  if (!fs::exists(ckpt)) throw std::runtime_error("checkpoint not found: " + cfg.checkpoint);
  const std::string dir = output_dir(c, cfg.out_dir);

  // Budgets are checked against the checkpoint's shape before any forward pass.
  const ModelParams params = load_checkpoint(ckpt);
  const auto result = run_experiment(cfg, params);
  write_experiment(result, dir);
  write_file(fs::path(dir) / "config.json", cfg.to_json() + "\n");
  out << "wrote " << result.rows.size() << " rows to " << (fs::path(dir) / "results.csv").string() << "\n";
  out << render_report(aggregate(result.rows));
  return 0;
}

int cmd_report(const std::string& results, const Common& c, std::ostream& out) {
  fs::path p = results.empty() ? fs::path(output_dir(c, "results")) : fs::path(results);
  if (fs::is_directory(p)) p /= "results.csv";
  out << render_report(aggregate(parse_results_csv(read_file(p.string()))));
  return 0;
}

// ---- train ----------------------------------------------------------------------------

struct TrainArgs {
  std::string kind = "transactions";
  std::vector<std::size_t> lengths{8, 16};
  std::size_t docs = 64;
  std::size_t n_accounts = 2;
  ModelConfig model{};
  TrainConfig train{};
  std::string name = "model.ckpt";
};

int cmd_train(TrainArgs a, const Common& c, std::ostream& out) {
  TransactionOptions opt;
  opt.allow_out_of_range = true;
  opt.n_accounts = a.n_accounts;
  a.train.seed = c.seed;
  const auto corpus = build_training_corpus(task_kind_from_string(a.kind), a.lengths, a.docs, c.seed, opt);
  std::size_t longest = 0;
  for (const auto& d : corpus) longest = std::max(longest, d.size());
  a.model.max_context = std::max(a.model.max_context, longest + 1024);
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = train_base_model(a.model, corpus, a.train);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const fs::path dir = output_dir(c, ".");
  fs::create_directories(dir);
  save_checkpoint(r.params, dir / a.name);
  std::string log = "step,loss\n";
  for (std::size_t i = 0; i < r.losses.size(); ++i) log += std::to_string(i) + "," + std::to_string(r.losses[i]) + "\n";
  write_file(dir / (a.name + ".loss.csv"), log);
  auto mean = [&](std::size_t from, std::size_t to) {
    double s = 0;
    for (std::size_t i = from; i < to; ++i) s += r.losses[i];
    return to > from ? s / static_cast<double>(to - from) : 0.0;
  };
  const std::size_t n = r.losses.size(), w = std::max<std::size_t>(1, std::min<std::size_t>(20, n));
  out << "trained " << r.params.parameter_count() << " parameters on " << corpus.size() << " documents in " << std::fixed
      << std::setprecision(1) << secs << " s; loss " << std::setprecision(3) << mean(0, std::min(w, n)) << " -> "
      << mean(n - std::min(w, n), n) << std::defaultfloat << "\n";
  out << "checkpoint: " << (dir / a.name).string() << "\n";
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"qttt: query-only test-time training experiments on synthetic long-context tasks"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { common.seed = s, common.seed_set = true; }, "Base seed");
    sub->add_option("--config", common.config, "Experiment config (JSON)");
    sub->add_option("--out", common.out, "Output directory (overrides QTTT_OUTPUT_DIR)");
  };

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a JSONL task dataset");
  add_common(g);
  g->add_option("--kind", gen.kind, "transactions | code")->capture_default_str();
  g->add_option("--n-ops,--length,-L", gen.length, "Operations per log, or code lines")->capture_default_str();
  g->add_option("--seeds", gen.seeds, "Number of tasks")->capture_default_str();
  g->add_option("--bug-mix", gen.bug_mix, "all or a comma list of bug types (NONE allowed)")->capture_default_str();
  g->add_option("--n-accounts", gen.n_accounts)->capture_default_str();
  g->add_flag("--allow-out-of-range", gen.allow_out_of_range, "Permit n_ops outside [25, 500]");
  g->add_option("--name", gen.name, "File name inside the output directory")->capture_default_str();

  std::size_t trials = 10000;
  bool theory_json = false;
  auto* th = app.add_subcommand("theory-check", "Randomized checks of the attention bounds and gradients");
  add_common(th);
  th->add_option("--trials", trials)->capture_default_str();
  th->add_flag("--json", theory_json);

  FlopArgs fl;
  auto* f = app.add_subcommand("flops", "FLOP budget table");
  add_common(f);
  f->add_option("--layers", fl.layers)->capture_default_str();
  f->add_option("--d-model", fl.d_model)->capture_default_str();
  f->add_option("--mlp-ratio", fl.mlp_ratio)->capture_default_str();
  f->add_option("--T", fl.T, "Context length")->capture_default_str();
  f->add_option("--k", fl.k, "Span length")->capture_default_str();
  f->add_option("--steps,-N", fl.steps, "qTTT steps")->capture_default_str();
  f->add_option("--bon-tokens", fl.bon_tokens, "Tokens per best-of-N trajectory");
  f->add_flag("--json", fl.json);

  std::string checkpoint;
  auto* r = app.add_subcommand("run", "Run an experiment config");
  add_common(r);
  r->add_option("--checkpoint", checkpoint, "Overrides the config's checkpoint");

  std::string results;
  auto* rep = app.add_subcommand("report", "Aggregate a results directory");
  add_common(rep);
  rep->add_option("results", results, "results.csv or its directory");

  TrainArgs tr;
  tr.model.n_layers = 2;
  tr.model.n_heads = 2;
  tr.model.d_model = 32;
  tr.model.max_context = 1024;
  tr.train.steps = 400;
  tr.train.seq_len = 256;
  auto* t = app.add_subcommand("train", "Train a byte-level base model on rendered tasks");
  add_common(t);
  t->add_option("--kind", tr.kind)->capture_default_str();
  t->add_option("--lengths", tr.lengths, "Task lengths in the corpus")->delimiter(',');
  t->add_option("--docs", tr.docs)->capture_default_str();
  t->add_option("--n-accounts", tr.n_accounts)->capture_default_str();
  t->add_option("--layers", tr.model.n_layers)->capture_default_str();
  t->add_option("--heads", tr.model.n_heads)->capture_default_str();
  t->add_option("--d-model", tr.model.d_model)->capture_default_str();
  t->add_option("--mlp-ratio", tr.model.mlp_ratio)->capture_default_str();
  t->add_option("--max-context", tr.model.max_context, "Raised to fit the longest document")->capture_default_str();
  t->add_option("--steps", tr.train.steps)->capture_default_str();
  t->add_option("--seq-len", tr.train.seq_len)->capture_default_str();
  t->add_option("--lr", tr.train.optimizer.lr)->capture_default_str();
  t->add_option("--name", tr.name)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  try {
    if (g->parsed()) return cmd_gen(gen, common, out);
    if (th->parsed()) return cmd_theory(trials, common, theory_json, out);
    if (f->parsed()) return cmd_flops(fl, out);
    if (r->parsed()) return cmd_run(common, checkpoint, out);
    if (rep->parsed()) return cmd_report(results, common, out);
    if (t->parsed()) return cmd_train(tr, common, out);
  } catch (const BudgetMismatch& e) {
    err << "budget mismatch: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace qttt::cli
