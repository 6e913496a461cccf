#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "qttt/diagnostics.hpp"
#include "qttt/experiment.hpp"

using namespace qttt;

namespace {

ModelConfig byte_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.mlp_ratio = 2;
  c.max_context = 2048;
  return c;
}

ExperimentConfig small_experiment() {
  ExperimentConfig c;
  c.lengths = {6, 10};
  c.seeds_per_point = 2;
  c.seed = 5;
  c.tx_options.allow_out_of_range = true;
  c.adaptation.steps = 4;
  c.adaptation.span_length = 16;
  c.adaptation.optimizer.lr = 1e-3;
  c.answer_tokens = 12;
  c.conditions = {{ConditionKind::InContext, 0, 1},
                  {ConditionKind::Thinking, 0, 1},
                  {ConditionKind::Thinking, 128, 1},
                  {ConditionKind::Qttt, 0, 1},
                  {ConditionKind::BestOfN, 128, 4}};
  return c;
}

}  // namespace

TEST_CASE("attention mass: normalization, uniform attention and errors") {
  const auto p = init_params(byte_config(), 1, 0.3);
  const std::vector<int> prompt = bytes_to_tokens("abcdefghij");
  const KVCache cache = prefill_and_cache(p, prompt);
  std::vector<std::size_t> all(prompt.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const std::vector<int> out = bytes_to_tokens("xyz");
  const auto r = attention_mass(p, cache, all, out);
  CHECK(r.cells.size() == 2 * 2 * 3);
  // Later steps also attend to the generated tokens, so only step 0 sums to one.
  for (const auto& c : r.cells) {
    CHECK(c.mass >= 0.0);
    CHECK(c.mass <= 1.0 + 1e-12);
    if (c.step == 0) CHECK(std::abs(c.mass - 1.0) <= 1e-10);
  }
  CHECK(r.mean >= 0.0);
  CHECK(r.mean <= 1.0);

  ModelConfig one = byte_config();
  one.n_layers = 1;
  one.n_heads = 1;
  auto flat = init_params(one, 2, 0.3);
  flat.layers[0].w_q.fill(0.0);  // every logit equal
  const std::vector<int> two{65, 66};
  const KVCache c2 = prefill_and_cache(flat, two);
  const std::vector<std::size_t> first{0};
  const std::vector<int> one_step{67};
  const auto half = attention_mass(flat, c2, first, one_step);
  REQUIRE(half.cells.size() == 1);
  CHECK(half.cells[0].mass == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(half.margin_mean == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(half.std == 0.0);

  const std::vector<std::size_t> none;
  CHECK_THROWS_AS(attention_mass(p, cache, none, out), std::invalid_argument);
  const std::vector<std::size_t> beyond{prompt.size()};
  CHECK_THROWS_AS(attention_mass(p, cache, beyond, out), std::out_of_range);
  CHECK_THROWS_AS(attention_mass(p, cache, all, std::vector<int>{}), std::invalid_argument);
}

TEST_CASE("attention mass matches a full-forward recompute, with and without a prefix") {
  const auto p = init_params(byte_config(), 4, 0.3);
  const std::vector<int> prompt = bytes_to_tokens("the needle is here; then noise");
  const KVCache cache = prefill_and_cache(p, prompt);
  const std::vector<std::size_t> targets{4, 5, 6, 7, 8, 9};
  const std::vector<int> prefix = bytes_to_tokens("::");
  const std::vector<int> out = bytes_to_tokens("abc");
  for (bool with_prefix : {false, true}) {
    const auto r = with_prefix ? attention_mass(p, cache, targets, out, prefix) : attention_mass(p, cache, targets, out);
    std::vector<int> seq = prompt;
    if (with_prefix) seq.insert(seq.end(), prefix.begin(), prefix.end());
    const std::size_t first_row = seq.size() - 1;
    seq.insert(seq.end(), out.begin(), out.end() - 1);
    std::map<std::tuple<std::size_t, std::size_t, std::size_t>, double> oracle;
    const AttentionTap tap = [&](std::size_t l, std::size_t h, std::size_t row, std::span<const double> w) {
      if (row < first_row) return;
      double m = 0;
      for (auto t : targets) m += w[t];
      oracle[{l, h, row - first_row}] = m;
    };
    full_forward_logits(p, seq, &tap);
    for (const auto& c : r.cells) CHECK(std::abs(c.mass - oracle.at({c.layer, c.head, c.step})) <= 1e-10);
  }
}

TEST_CASE("experiment config JSON round trip and validation") {
  auto c = small_experiment();
  c.checkpoint = "m.ckpt";
  c.budget_rule = BudgetRule::Exact;
  c.bug_mix = {BugType::LostUpdate, BugType::CalcError};
  const auto back = ExperimentConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.bug_mix == c.bug_mix);
  CHECK(back.conditions.size() == 5);
  CHECK(back.conditions[4].samples == 4);

  const auto minimal = ExperimentConfig::from_json(
      R"({"task": {"kind": "code", "lengths": [5]}, "conditions": [{"type": "in_context"}]})");
  CHECK(minimal.task_kind == TaskKind::CodeNeedle);
  CHECK(minimal.adaptation.steps == 32);
  CHECK(minimal.answer_tokens == 64);
  CHECK_THROWS(ExperimentConfig::from_json(R"({"task": {"kind": "code", "lengths": []}, "conditions": [{"type": "in_context"}]})"));
  CHECK_THROWS(ExperimentConfig::from_json(R"({"task": {"kind": "code", "lengths": [5]}, "conditions": [{"type": "magic"}]})"));
  CHECK_THROWS(ExperimentConfig::from_json("not json"));
}

TEST_CASE("task list is deterministic and cycles the bug mix") {
  const auto c = small_experiment();
  const auto a = build_tasks(c), b = build_tasks(c);
  REQUIRE(a.size() == 4);
  CHECK(a == b);
  CHECK(std::get<TransactionTask>(a[0].task).bug_type == BugType::CalcError);
  CHECK(std::get<TransactionTask>(a[1].task).bug_type == BugType::NegativeBal);
  CHECK(a[2].length_param == 10);
  CHECK(a[0].seed != a[1].seed);
}

TEST_CASE("budget validation") {
  auto c = small_experiment();
  const FlopModel fm = flop_model_of(byte_config());
  const auto tasks = build_tasks(c);
  CHECK_NOTHROW(validate_budgets(c, fm, tasks));  // 2 * 4 * 16 = 128
  c.conditions.push_back({ConditionKind::Thinking, 135, 1});  // 5.5% over
  CHECK_THROWS_AS(validate_budgets(c, fm, tasks), BudgetMismatch);
  c.conditions.back().think_tokens = 134;  // 4.7% over
  CHECK_NOTHROW(validate_budgets(c, fm, tasks));

  // Exact rule at toy scale: M ~ T, so 2Nk is far from the matched token count.
  c.budget_rule = BudgetRule::Exact;
  CHECK_THROWS_AS(validate_budgets(c, fm, tasks), BudgetMismatch);
  c.conditions = {{ConditionKind::InContext, 0, 1}, {ConditionKind::Qttt, 0, 1}};
  CHECK_NOTHROW(validate_budgets(c, fm, tasks));

  // The flops column is the flop module's own evaluation.
  const Condition think{ConditionKind::Thinking, 128, 1};
  CHECK(condition_flops(think, c.adaptation, fm, 500) == gen_flops(fm, 128, 500).flops);
  CHECK(condition_flops({ConditionKind::Qttt, 0, 1}, c.adaptation, fm, 500) ==
        qttt_partial_flops(fm, 16, 500, 4).flops);
  CHECK(condition_flops({ConditionKind::BestOfN, 128, 4}, c.adaptation, fm, 500) == 4 * gen_flops(fm, 32, 500).flops);
  CHECK(condition_flops({ConditionKind::InContext, 0, 1}, c.adaptation, fm, 500) == 0);
}

TEST_CASE("budget mismatch is refused before the model is touched") {
  auto c = small_experiment();
  c.conditions.push_back({ConditionKind::Thinking, 1000, 1});
  ModelConfig wrong = byte_config();
  wrong.vocab_size = 12;  // would fail the compatibility check if reached
  CHECK_THROWS_AS(run_experiment(c, init_params(wrong, 1)), BudgetMismatch);
  c.conditions.pop_back();
  CHECK_THROWS_AS(run_experiment(c, init_params(wrong, 1)), std::invalid_argument);
  ModelConfig short_ctx = byte_config();
  short_ctx.max_context = 300;
  CHECK_THROWS_AS(run_experiment(c, init_params(short_ctx, 1)), std::invalid_argument);
}

TEST_CASE("experiment rows: determinism, zero thinking equals in-context, flops column") {
  const auto p = init_params(byte_config(), 3, 0.1);
  auto c = small_experiment();
  const auto r1 = run_experiment(c, p);
  c.threads = 3;
  const auto r2 = run_experiment(c, p);
  REQUIRE(r1.rows.size() == 4 * 5);
  CHECK(results_csv(r1.rows) == results_csv(r2.rows));
  CHECK(r1.traces.size() == 4);
  CHECK(r1.traces == r2.traces);

  const FlopModel fm = flop_model_of(p.config());
  const auto tasks = build_tasks(c);
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto& in = r1.rows[t * 5];
    const auto& zero = r1.rows[t * 5 + 1];
    CHECK(in.condition == "in_context");
    CHECK(zero.condition == "thinking_M0");
    CHECK(zero.accuracy == in.accuracy);
    CHECK(zero.needle_mass_mean == in.needle_mass_mean);
    CHECK(zero.margin_mean == in.margin_mean);
    const auto T = render_task_tokens(tasks[t], PromptStyle::Direct).tokens.size();
    for (std::size_t k = 0; k < 5; ++k) {
      const auto& row = r1.rows[t * 5 + k];
      CHECK(row.flops == condition_flops(c.conditions[k], c.adaptation, fm, T));
      CHECK(row.needle_mass_mean >= 0.0);
      CHECK(row.needle_mass_mean <= 1.0);
      CHECK(row.seed == tasks[t].seed);
    }
    CHECK(r1.rows[t * 5 + 3].condition == "qttt_k16_N4");
    CHECK(r1.rows[t * 5 + 4].condition == "bon_N4_M128");
  }
  CHECK(parse_results_csv(results_csv(r1.rows)) == r1.rows);

  const auto dir = std::filesystem::temp_directory_path() / "qttt_test_experiment";
  std::filesystem::remove_all(dir);
  write_experiment(r1, dir.string());
  std::ifstream in(dir / "results.csv");
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == results_csv(r1.rows));
  CHECK(std::filesystem::exists(dir / "traces" / (r1.traces[0].first + ".json")));
  std::filesystem::remove_all(dir);
}

TEST_CASE("results CSV parsing and aggregation against a hand sum") {
  CHECK(results_csv({}) == std::string(kResultsHeader) + "\n");
  const std::string csv = std::string(kResultsHeader) +
                          "\n"
                          "transactions,25,in_context,1,1,0.2,0.01,-1.5,0\n"
                          "transactions,25,in_context,2,0,0.4,0.02,-0.5,0\n"
                          "transactions,25,qttt_k16_N4,1,1,0.6,0.03,0.5,12345678901234567890123\n";
  const auto rows = parse_results_csv(csv);
  REQUIRE(rows.size() == 3);
  CHECK(to_string_u128(rows[2].flops) == "12345678901234567890123");
  const auto cells = aggregate(rows);
  REQUIRE(cells.size() == 2);
  CHECK(cells[0].n == 2);
  CHECK(cells[0].accuracy == doctest::Approx(0.5));
  CHECK(cells[0].needle_mass_mean == doctest::Approx(0.3));
  CHECK(cells[0].margin_mean == doctest::Approx(-1.0));
  CHECK(cells[1].accuracy == doctest::Approx(1.0));
  CHECK(render_report(cells) == render_report(aggregate(parse_results_csv(csv))));
  CHECK(render_report(cells).find("qttt_k16_N4") != std::string::npos);

  const std::string empty = render_report(aggregate({}));
  CHECK(empty.find("condition") != std::string::npos);
  CHECK_THROWS(parse_results_csv("a,b\n"));
  CHECK_THROWS(parse_results_csv(std::string(kResultsHeader) + "\nx,1,2\n"));
}

TEST_CASE("training corpus ends each document with the answer") {
  TransactionOptions o;
  o.allow_out_of_range = true;
  const auto corpus = build_training_corpus(TaskKind::Transactions, {5, 8}, 6, 1, o);
  REQUIRE(corpus.size() == 6);
  for (const auto& doc : corpus) {
    CHECK(doc.front() == kBosToken);
    CHECK(doc.back() == kEosToken);
    const std::string text = tokens_to_bytes(doc);
    CHECK(text.find("[ANSWER] {\"bug_type\": ") != std::string::npos);
  }
  CHECK(build_training_corpus(TaskKind::CodeNeedle, {5}, 2, 1) == build_training_corpus(TaskKind::CodeNeedle, {5}, 2, 1));
}
