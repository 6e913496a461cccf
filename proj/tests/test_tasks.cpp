#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <map>
#include <set>

#include "qttt/tasks.hpp"
#include "qttt/vocab.hpp"

using namespace qttt;

namespace {

const BugType kBugs[] = {BugType::CalcError, BugType::NegativeBal, BugType::LostUpdate,
                         BugType::DuplicateTxn};

TransactionOptions loose() {
  TransactionOptions o;
  o.allow_out_of_range = true;
  return o;
}

// Independent replay: the running sum of reported new balances after each line.
bool conserved_at_every_prefix(const TransactionTask& t) {
  std::map<std::string, long long> bal(t.accounts.begin(), t.accounts.end());
  const long long total = t.total();
  for (const auto& op : t.ops) {
    bal[op.from.account] = op.from.new_balance;
    bal[op.to.account] = op.to.new_balance;
    long long s = 0;
    for (const auto& [k, v] : bal) s += v;
    if (s != total) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("reference log renders and verifies as an over-debit at TX004") {
  const auto t = reference_transaction_log();
  CHECK(render_initial_state(t) == R"({"account_A": 4000, "account_B": 4200, "total": 8200})");
  CHECK(render_transaction_line(t.ops[0]) == "[TX001]: Transfer $107: A=4000 → 3893, B=4200 → 4307");
  CHECK(render_transaction_line(t.ops[3]) == "[TX004]: Transfer $2925: A=2909 → -16, B=5291 → 8216");
  const auto v = verify_transaction_log(t);
  CHECK_FALSE(v.valid);
  CHECK(*v.violated_rule == LogRule::NonNegative);
  CHECK(bug_type_for(*v.violated_rule) == BugType::NegativeBal);
  CHECK(*v.first_offender == 4);
  CHECK(tx_id(*v.first_offender) == "TX004");
}

TEST_CASE("hand-built violations hit the intended rule") {
  TransactionTask t;
  t.accounts = {{"A", 1000}, {"B", 1000}};
  t.ops = {{1, 100, {"A", 1000, 900}, {"B", 1000, 1100}},
           {2, 50, {"B", 1100, 1050}, {"A", 900, 950}}};
  CHECK(verify_transaction_log(t).valid);

  SUBCASE("off-by-one debit is an arithmetic error") {
    t.ops[1].from.new_balance = 1100 - 50 + 1;
    const auto v = verify_transaction_log(t);
    CHECK(*v.violated_rule == LogRule::Arithmetic);
    CHECK(bug_type_for(*v.violated_rule) == BugType::CalcError);
    CHECK(*v.first_offender == 2);
  }
  SUBCASE("stale old balance is a lost update") {
    t.ops[1].to = {"A", 1000, 1050};
    const auto v = verify_transaction_log(t);
    CHECK(*v.violated_rule == LogRule::LostUpdate);
    CHECK(*v.first_offender == 2);
  }
  SUBCASE("replayed record is a duplicate") {
    t.ops.push_back({3, 100, {"A", 1000, 900}, {"B", 1000, 1100}});
    const auto v = verify_transaction_log(t);
    CHECK(*v.violated_rule == LogRule::Duplicate);
    CHECK(*v.first_offender == 3);
  }
  SUBCASE("an unbalanced credit is caught by the arithmetic rule first") {
    t.ops[0].to.new_balance = 1200;
    CHECK(*verify_transaction_log(t).violated_rule == LogRule::Arithmetic);
  }
  SUBCASE("unknown accounts are a parse error") {
    t.ops[0].to.account = "Z";
    CHECK_THROWS_AS(verify_transaction_log(t), ParseError);
  }
}

TEST_CASE("clean logs conserve money at every prefix and stay non-negative") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    TransactionOptions o;
    o.n_accounts = 2 + seed % 5;
    const auto t = gen_transaction_task(25 + seed * 3, BugType::None, seed, o);
    CHECK(t.n_ops() == 25 + seed * 3);
    CHECK(verify_transaction_log(t).valid);
    CHECK(conserved_at_every_prefix(t));
    for (const auto& op : t.ops) {
      CHECK(op.amount >= 1);
      CHECK(op.amount <= 999);
      CHECK(op.from.new_balance >= 0);
      CHECK(op.from.account != op.to.account);
    }
  }
}

TEST_CASE("injected anomalies are detected exactly at the injected line") {
  std::map<BugType, std::set<int>> positions;
  for (BugType bug : kBugs) {
    for (std::uint64_t seed = 0; seed < 250; ++seed) {
      const auto t = gen_transaction_task(25 + seed % 26, bug, seed);
      REQUIRE(t.bug_tx.has_value());
      CHECK(t.bug_type == bug);
      CHECK(t.n_ops() == 25 + seed % 26);
      const auto v = verify_transaction_log(t);
      REQUIRE_FALSE(v.valid);
      CHECK(bug_type_for(*v.violated_rule) == bug);
      CHECK(*v.first_offender == *t.bug_tx);
      positions[bug].insert(*t.bug_tx);
      // Every earlier prefix is clean.
      TransactionTask prefix = t;
      prefix.ops.resize(static_cast<std::size_t>(*t.bug_tx - 1));
      CHECK(verify_transaction_log(prefix).valid);
    }
  }
  // Positions spread over the log rather than clustering.
  for (BugType bug : kBugs) CHECK(positions[bug].size() >= 20);
}

TEST_CASE("removing the anomaly and re-chaining gives back a clean log") {
  for (BugType bug : kBugs) {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
      auto t = gen_transaction_task(40, bug, seed);
      const auto p = static_cast<std::size_t>(*t.bug_tx - 1);
      t.ops.erase(t.ops.begin() + static_cast<std::ptrdiff_t>(p));
      for (std::size_t i = 0; i < t.ops.size(); ++i) t.ops[i].tx = static_cast<int>(i + 1);
      rechain_balances(t, p);
      CHECK(verify_transaction_log(t).valid);
      CHECK(conserved_at_every_prefix(t));
    }
  }
}

TEST_CASE("generation is deterministic and validates its options") {
  CHECK(gen_transaction_task(50, BugType::LostUpdate, 9) == gen_transaction_task(50, BugType::LostUpdate, 9));
  CHECK_FALSE(gen_transaction_task(50, BugType::LostUpdate, 9) == gen_transaction_task(50, BugType::LostUpdate, 10));
  CHECK_THROWS_AS(gen_transaction_task(24, BugType::None, 0), std::invalid_argument);
  CHECK_THROWS_AS(gen_transaction_task(501, BugType::None, 0), std::invalid_argument);
  CHECK_NOTHROW(gen_transaction_task(8, BugType::CalcError, 0, loose()));
  CHECK_THROWS_AS(gen_transaction_task(1, BugType::CalcError, 0, loose()), std::invalid_argument);
  TransactionOptions bad = loose();
  bad.n_accounts = 27;
  CHECK_THROWS_AS(gen_transaction_task(8, BugType::None, 0, bad), std::invalid_argument);
  CHECK(gen_transaction_task(500, BugType::DuplicateTxn, 3).n_ops() == 500);
}

TEST_CASE("transaction parser round-trips and tolerates irregular spacing") {
  for (BugType bug : {BugType::None, BugType::CalcError, BugType::NegativeBal, BugType::LostUpdate,
                      BugType::DuplicateTxn}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      TransactionOptions o;
      o.n_accounts = 2 + seed % 4;
      const auto t = gen_transaction_task(25, bug, seed, o);
      auto back = parse_transaction_log(render_initial_state(t), render_transaction_lines(t));
      back.bug_type = t.bug_type;
      back.bug_tx = t.bug_tx;
      back.seed = t.seed;
      CHECK(back == t);
    }
  }
  const auto ref = reference_transaction_log();
  const auto odd = parse_transaction_log(
      render_initial_state(ref),
      "TX001: Transfer $107: A=4000 -> 3893, B=4200 -> 4307\n"
      "  [TX002]:Transfer $ 204 : A = 3893 → 3689 ,B=4307→4511\n"
      "\n"
      "[TX003]: Transfer $780: A=3689 → 2909, B=4511 → 5291\n"
      "[TX004]: Transfer $2925:A=2909 → -16,  B=5291 → 8216 \n"
      "[TX005]: Transfer $699: B=8216 → 7517, A=-16 → 683");
  CHECK(odd.ops == ref.ops);
  CHECK(odd.accounts == ref.accounts);

  const auto init = render_initial_state(ref);
  CHECK_THROWS_AS(parse_transaction_log(init, "[TX002]: Transfer $1: A=1 → 0, B=1 → 2"), ParseError);
  CHECK_THROWS_AS(parse_transaction_log(init, "[TX001]: Transfer $1: A=1 → 0"), ParseError);
  CHECK_THROWS_AS(parse_transaction_log(init, "[TX001]: Transfer $0: A=1 → 1, B=1 → 1"), ParseError);
  CHECK_THROWS_AS(parse_transaction_log(init, "[TX001]: Transfer $1: A=1 → 0, B=1 → 2 extra"), ParseError);
  CHECK_THROWS_AS(parse_transaction_log(R"({"account_A": 1, "account_B": 2, "total": 4})", ""), ParseError);
  CHECK_THROWS_AS(parse_transaction_log("not json", ""), ParseError);
  try {
    parse_transaction_log(init, "[TX001]: Transfer $1: A=4000 → 3999, B=4200 → 4201\n[TX003]: x");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line == 2);
  }
}

TEST_CASE("needle predicates separate the planted lines from distractors") {
  const auto& pool = needle_pool();
  REQUIRE(pool.size() == 4);
  for (std::size_t k = 0; k < pool.size(); ++k) {
    CHECK(needle_predicate(k, "        " + pool[k].text));
    CHECK_FALSE(pool[k].description.empty());
    for (std::size_t j = 0; j < pool.size(); ++j) {
      if (j != k) CHECK_FALSE(needle_predicate(j, pool[k].text));
    }
  }
  CHECK_FALSE(needle_predicate(0, "attn_weights = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(d)"));
  CHECK_FALSE(needle_predicate(1, "attn_weights = F.softmax(attn_weights, dim=-1)"));
  CHECK_FALSE(needle_predicate(2, "x = x + self.attn_out(att)"));
  CHECK_FALSE(needle_predicate(3, "x = x + self.attn(self.ln_1(x))"));
  CHECK_THROWS_AS(needle_predicate(4, "x"), std::out_of_range);

  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto t = gen_code_needle_task(400, seed);
    std::size_t hits = 0;
    for (const auto& l : t.lines) hits += needle_predicate(t.needle_kind, l.text);
    CHECK(hits == 1);
    CHECK(needle_predicate(t.needle_kind, t.lines[t.needle_index].text));
  }
}

TEST_CASE("code needle text and relative position are fixed per seed across lengths") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto small = gen_code_needle_task(5, seed);
    const auto large = gen_code_needle_task(10000, seed);
    CHECK(small.n_lines() == 5);
    CHECK(large.n_lines() == 10000);
    CHECK(small.needle_kind == large.needle_kind);
    CHECK(small.lines[small.needle_index].text == large.lines[large.needle_index].text);
    CHECK(small.lines.front().line_no == kFirstCodeLine);
    CHECK(large.lines.back().line_no == 10000);
    const double rs = static_cast<double>(small.needle_index) / 5.0;
    const double rl = static_cast<double>(large.needle_index) / 10000.0;
    CHECK(std::abs(rs - rl) < 0.2 + 1e-9);
  }
  CHECK_THROWS_AS(gen_code_needle_task(4, 0), std::invalid_argument);
  CHECK(gen_code_needle_task(77, 5) == gen_code_needle_task(77, 5));
}

TEST_CASE("scorer fixtures") {
  const auto ref = [] {
    TaskInstance t;
    t.id = "ref";
    t.length_param = 5;
    t.task = reference_transaction_log();
    return t;
  }();
  CHECK(score_answer(ref, answer_text(ref)).correct);
  CHECK(score_answer(ref, R"({"bug_type": "NEGATIVE_BAL", "bug_location": "TX004"})").correct);
  CHECK(score_answer(ref, "bug_type:negative_bal   bug_location = tx004").correct);
  CHECK(score_answer(ref, "I think this is NEGATIVE_BAL at TX004.").correct);
  CHECK_FALSE(score_answer(ref, R"({"bug_type": "NEGATIVE_BAL", "bug_location": "TX4"})").correct);
  CHECK_FALSE(score_answer(ref, R"({"bug_type": "CALC_ERROR", "bug_location": "TX004"})").correct);
  CHECK_FALSE(score_answer(ref, R"({"bug_type": "NEGATIVE_BAL", "bug_location": "TX005"})").correct);
  CHECK_FALSE(score_answer(ref, "").correct);
  const auto r = score_answer(ref, "bug_type: LOST_UPDATE, bug_location: TX002");
  CHECK(*r.bug_type == "LOST_UPDATE");
  CHECK(*r.location == "TX002");
  CHECK_FALSE(r.reason.empty());

  const auto clean = make_transaction_instance(25, BugType::None, 1);
  CHECK(score_answer(clean, R"({"bug_type": NONE, "bug_location": NONE})").correct);
  CHECK_FALSE(score_answer(clean, "CALC_ERROR TX001").correct);

  auto code = make_code_instance(50, 3);
  const auto n = std::get<CodeNeedleTask>(code.task).needle_line_no();
  const std::string ln = std::to_string(n);
  CHECK(answer_text(code) == "model.py:L" + ln);
  CHECK(score_answer(code, "model.py:L" + ln).correct);
  CHECK(score_answer(code, "  MODEL.PY : l " + ln + " ").correct);
  CHECK(score_answer(code, "the bug is on L" + ln).correct);
  CHECK_FALSE(score_answer(code, "model.py:L" + std::to_string(n + 1)).correct);
  CHECK_FALSE(score_answer(code, "train.py:L" + ln).correct);
  CHECK_FALSE(score_answer(code, "line " + ln).correct);
}

TEST_CASE("rendering is deterministic, byte-level and marks the needle span") {
  const auto t = make_transaction_instance(30, BugType::CalcError, 4);
  const auto a = render_task_tokens(t, PromptStyle::Direct);
  const auto b = render_task_tokens(t, PromptStyle::Direct);
  CHECK(a.tokens == b.tokens);
  CHECK(a.tokens.front() == kBosToken);
  std::string text;
  for (std::size_t i = 1; i < a.tokens.size(); ++i) {
    REQUIRE(a.tokens[i] >= 0);
    REQUIRE(a.tokens[i] < 256);
    text.push_back(static_cast<char>(a.tokens[i]));
  }
  CHECK(text.rfind("[TASK] ", 0) == 0);
  CHECK(text.size() >= 9);
  CHECK(text.substr(text.size() - 9) == kAnswerMarker);
  const std::string needle(text.begin() + static_cast<std::ptrdiff_t>(a.needle_begin - 1),
                           text.begin() + static_cast<std::ptrdiff_t>(a.needle_end - 1));
  const auto& task = std::get<TransactionTask>(t.task);
  CHECK(needle == render_transaction_line(task.ops[static_cast<std::size_t>(*task.bug_tx - 1)]));
  for (const char* s : {"[RULES]", "[CONTEXT]", "[QUESTION]"}) CHECK(text.find(s) != std::string::npos);

  const auto think = render_task_tokens(t, PromptStyle::Thinking);
  std::string tail;
  for (std::size_t i = think.tokens.size() - 8; i < think.tokens.size(); ++i) tail.push_back(static_cast<char>(think.tokens[i]));
  CHECK(tail == kThinkMarker);

  TaskInstance ref;
  ref.task = reference_transaction_log();
  const auto rr = render_task_tokens(ref, PromptStyle::Direct);
  const std::string rtext(rr.tokens.begin() + 1, rr.tokens.end());
  CHECK(rtext.find(render_transaction_lines(std::get<TransactionTask>(ref.task))) != std::string::npos);
  CHECK(rtext.find("[TX004]: Transfer $2925: A=2909 → -16, B=5291 → 8216\n") != std::string::npos);

  const auto none = render_task_tokens(make_transaction_instance(25, BugType::None, 2), PromptStyle::Direct);
  CHECK(none.needle_begin == none.needle_end);

  const auto code = make_code_instance(60, 8);
  const auto rc = render_task_tokens(code, PromptStyle::Direct);
  std::string ctext;
  for (std::size_t i = rc.needle_begin; i < rc.needle_end; ++i) ctext.push_back(static_cast<char>(rc.tokens[i]));
  const auto& ct = std::get<CodeNeedleTask>(code.task);
  CHECK(ctext == "L" + std::to_string(ct.needle_line_no()) + ": " + ct.lines[ct.needle_index].text);

  // Longer logs render strictly longer prompts.
  std::size_t prev = 0;
  for (std::size_t n : {25u, 50u, 100u, 200u}) {
    const auto len = render_task_tokens(make_transaction_instance(n, BugType::LostUpdate, 1), PromptStyle::Direct).tokens.size();
    CHECK(len > prev);
    prev = len;
  }
  prev = 0;
  for (std::size_t L : {10u, 100u, 1000u}) {
    const auto len = render_task_tokens(make_code_instance(L, 1), PromptStyle::Direct).tokens.size();
    CHECK(len > prev);
    prev = len;
  }
}

TEST_CASE("JSONL records round-trip bit-exactly") {
  std::vector<TaskInstance> tasks;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    tasks.push_back(make_transaction_instance(25 + seed, kBugs[seed % 4], seed));
    tasks.push_back(make_transaction_instance(25, BugType::None, seed));
    tasks.push_back(make_code_instance(5 + seed * 17, seed));
  }
  tasks.push_back(make_code_instance(20, 0xFFFFFFFFFFFFFFFFull));
  for (const auto& t : tasks) {
    const auto line = to_jsonl(t);
    CHECK(line.find('\n') == std::string::npos);
    const auto back = from_jsonl(line);
    CHECK(back == t);
    CHECK(to_jsonl(back) == line);
  }
  const auto first = to_jsonl(tasks[0]);
  CHECK(first.rfind(R"({"id":)", 0) == 0);
  CHECK(first.find(R"("kind":"transactions","length_param":25,"context_text":)") != std::string::npos);

  const auto path = (std::filesystem::temp_directory_path() / "qttt_test_dataset.jsonl").string();
  write_dataset(path, tasks);
  CHECK(read_dataset(path) == tasks);
  std::remove(path.c_str());
  CHECK_THROWS(from_jsonl("{}"));
  CHECK_THROWS(read_dataset("/nonexistent/dir/x.jsonl"));
}
