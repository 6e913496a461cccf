#include "qttt/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <tuple>

#include "json.hpp"
#include "qttt/numeric.hpp"
#include "qttt/vocab.hpp"

namespace qttt {

namespace {

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

long long draw(Rng& rng, long long lo, long long hi) { return rng.uniform_int(lo, hi); }

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(text);
  while (std::getline(in, cur)) out.push_back(cur);
  return out;
}

}  // namespace

// ---- transaction logs ------------------------------------------------------

std::string to_string(BugType b) {
  switch (b) {
    case BugType::None: return "NONE";
    case BugType::CalcError: return "CALC_ERROR";
    case BugType::NegativeBal: return "NEGATIVE_BAL";
    case BugType::LostUpdate: return "LOST_UPDATE";
    case BugType::DuplicateTxn: return "DUPLICATE_TXN";
  }
  return "?";
}

BugType bug_type_from_string(const std::string& s) {
  const std::string u = upper(s);
  for (auto b : {BugType::None, BugType::CalcError, BugType::NegativeBal, BugType::LostUpdate,
                 BugType::DuplicateTxn}) {
    if (u == to_string(b)) return b;
  }
  throw std::invalid_argument("unknown bug type '" + s + "'");
}

long long TransactionTask::total() const {
  long long t = 0;
  for (const auto& [name, bal] : accounts) t += bal;
  return t;
}

std::string tx_id(int tx) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "TX%03d", tx);
  return buf;
}

std::string to_string(LogRule r) {
  switch (r) {
    case LogRule::Conservation: return "conservation";
    case LogRule::NonNegative: return "non-negative";
    case LogRule::Arithmetic: return "arithmetic";
    case LogRule::Duplicate: return "duplicate";
    case LogRule::LostUpdate: return "lost-update";
  }
  return "?";
}

BugType bug_type_for(LogRule r) {
  switch (r) {
    case LogRule::NonNegative: return BugType::NegativeBal;
    case LogRule::Duplicate: return BugType::DuplicateTxn;
    case LogRule::LostUpdate: return BugType::LostUpdate;
    case LogRule::Arithmetic:
    case LogRule::Conservation: return BugType::CalcError;
  }
  return BugType::None;
}

ParseError::ParseError(std::size_t l, const std::string& what)
    : std::runtime_error("line " + std::to_string(l) + ": " + what), line(l) {}

void rechain_balances(TransactionTask& task, std::size_t first) {
  std::map<std::string, long long> state(task.accounts.begin(), task.accounts.end());
  for (std::size_t i = 0; i < task.ops.size(); ++i) {
    auto& op = task.ops[i];
    if (i >= first) {
      op.from.old_balance = state.at(op.from.account);
      op.from.new_balance = op.from.old_balance - op.amount;
      op.to.old_balance = state.at(op.to.account);
      op.to.new_balance = op.to.old_balance + op.amount;
    }
    state[op.from.account] = op.from.new_balance;
    state[op.to.account] = op.to.new_balance;
  }
}

Verdict verify_transaction_log(const TransactionTask& task) {
  std::map<std::string, long long> state;
  for (const auto& [name, bal] : task.accounts) {
    if (!state.emplace(name, bal).second) throw ParseError(0, "duplicate account " + name);
  }
  const long long total = task.total();
  std::set<std::tuple<long long, std::string, std::string, long long, long long>> seen;
  Verdict v;
  auto fail = [&](LogRule r, const TransferRecord& op, std::string detail) {
    v.valid = false;
    v.violated_rule = r;
    v.first_offender = op.tx;
    v.detail = tx_id(op.tx) + ": " + detail;
    return v;
  };
  for (std::size_t i = 0; i < task.ops.size(); ++i) {
    const auto& op = task.ops[i];
    if (!state.count(op.from.account) || !state.count(op.to.account)) {
      throw ParseError(i + 1, "unknown account in " + tx_id(op.tx));
    }
    if (op.from.account == op.to.account) throw ParseError(i + 1, "self transfer in " + tx_id(op.tx));
    const auto key = std::make_tuple(op.amount, op.from.account, op.to.account, op.from.old_balance,
                                     op.to.old_balance);
    if (seen.count(key)) return fail(LogRule::Duplicate, op, "repeats an earlier transfer");
    const long long cur_from = state[op.from.account], cur_to = state[op.to.account];
    if (op.from.old_balance != cur_from || op.to.old_balance != cur_to) {
      return fail(LogRule::LostUpdate, op, "old balance ignores the latest committed write");
    }
    if (op.from.new_balance != op.from.old_balance - op.amount ||
        op.to.new_balance != op.to.old_balance + op.amount) {
      return fail(LogRule::Arithmetic, op, "new balance != old +/- amount");
    }
    if (std::min({op.from.old_balance, op.from.new_balance, op.to.old_balance, op.to.new_balance}) < 0) {
      return fail(LogRule::NonNegative, op, "negative balance");
    }
    state[op.from.account] = op.from.new_balance;
    state[op.to.account] = op.to.new_balance;
    long long sum = 0;
    for (const auto& [name, bal] : state) sum += bal;
    if (sum != total) return fail(LogRule::Conservation, op, "total changed");
    seen.insert(key);
  }
  return v;
}

namespace {

struct LedgerState {
  std::map<std::string, long long> balance;
  std::map<std::string, std::vector<long long>> history;  // committed values, oldest first
};

LedgerState replay(const TransactionTask& task, std::size_t upto) {
  LedgerState s;
  for (const auto& [name, bal] : task.accounts) {
    s.balance[name] = bal;
    s.history[name] = {bal};
  }
  for (std::size_t i = 0; i < upto; ++i) {
    const auto& op = task.ops[i];
    for (const Posting* p : {&op.from, &op.to}) {
      s.balance[p->account] = p->new_balance;
      s.history[p->account].push_back(p->new_balance);
    }
  }
  return s;
}

std::string account_name(std::size_t i) { return std::string(1, static_cast<char>('A' + i)); }

template <typename T>
const T& pick_from(Rng& rng, const std::vector<T>& v) {
  return v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(v.size()) - 1))];
}

std::optional<TransferRecord> clean_transfer(Rng& rng, const std::map<std::string, long long>& bal,
                                             const TransactionOptions& opt) {
  std::vector<std::string> payers, names;
  for (const auto& [name, b] : bal) {
    names.push_back(name);
    if (b >= opt.min_amount) payers.push_back(name);
  }
  if (payers.empty()) return std::nullopt;
  TransferRecord r;
  const std::string from = pick_from(rng, payers);
  std::string to = from;
  while (to == from) to = pick_from(rng, names);
  r.amount = draw(rng, opt.min_amount, std::min(opt.max_amount, bal.at(from)));
  r.from = {from, bal.at(from), bal.at(from) - r.amount};
  r.to = {to, bal.at(to), bal.at(to) + r.amount};
  return r;
}

// Builds the anomalous record for insertion at `pos`, or nothing if this
// position cannot host the requested bug.
std::optional<TransferRecord> anomaly(Rng& rng, BugType bug, const TransactionTask& task,
                                      std::size_t pos, const TransactionOptions& opt) {
  const LedgerState s = replay(task, pos);
  switch (bug) {
    case BugType::CalcError: {
      auto r = clean_transfer(rng, s.balance, opt);
      if (!r) return std::nullopt;
      long long err = draw(rng, 1, 99) * (rng.uniform() < 0.5 ? -1 : 1);
      Posting& side = rng.uniform() < 0.5 ? r->from : r->to;
      if (side.new_balance + err < 0) err = -err;
      side.new_balance += err;
      return r;
    }
    case BugType::NegativeBal: {
      std::vector<std::string> names;
      for (const auto& [name, b] : s.balance)
        if (b >= 0) names.push_back(name);
      if (names.empty()) return std::nullopt;
      const std::string from = pick_from(rng, names);
      std::string to = from;
      while (to == from) to = account_name(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(task.accounts.size()) - 1)));
      // Over-debit: exceed the payer's balance by 1..200.
      TransferRecord r;
      r.amount = s.balance.at(from) + draw(rng, 1, 200);
      r.from = {from, s.balance.at(from), s.balance.at(from) - r.amount};
      r.to = {to, s.balance.at(to), s.balance.at(to) + r.amount};
      return r;
    }
    case BugType::LostUpdate: {
      std::vector<std::string> written;
      for (const auto& [name, h] : s.history)
        if (h.size() >= 2) written.push_back(name);
      if (written.empty()) return std::nullopt;
      const std::string stale_acct = pick_from(rng, written);
      const auto& h = s.history.at(stale_acct);
      const long long stale = h[h.size() - 2];  // value before the latest commit
      std::vector<std::string> others;
      for (const auto& [name, b] : s.balance)
        if (name != stale_acct) others.push_back(name);
      const std::string other = pick_from(rng, others);
      TransferRecord r;
      if (rng.uniform() < 0.5) {
        if (stale < opt.min_amount) return std::nullopt;
        r.amount = draw(rng, opt.min_amount, std::min(opt.max_amount, stale));
        r.from = {stale_acct, stale, stale - r.amount};
        r.to = {other, s.balance.at(other), s.balance.at(other) + r.amount};
      } else {
        const long long payer = s.balance.at(other);
        if (payer < opt.min_amount) return std::nullopt;
        r.amount = draw(rng, opt.min_amount, std::min(opt.max_amount, payer));
        r.from = {other, payer, payer - r.amount};
        r.to = {stale_acct, stale, stale + r.amount};
      }
      return r;
    }
    case BugType::DuplicateTxn: {
      if (pos == 0) return std::nullopt;
      return task.ops[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pos) - 1))];
    }
    case BugType::None: break;
  }
  return std::nullopt;
}

}  // namespace

TransactionTask gen_transaction_task(std::size_t n_ops, BugType bug, std::uint64_t seed,
                                     const TransactionOptions& opt) {
  if (n_ops < 1) throw std::invalid_argument("gen_transaction_task: n_ops must be >= 1");
  if (!opt.allow_out_of_range && (n_ops < 25 || n_ops > 500)) {
    throw std::invalid_argument("gen_transaction_task: n_ops " + std::to_string(n_ops) +
                                " outside [25, 500] (set allow_out_of_range)");
  }
  if (opt.n_accounts < 2 || opt.n_accounts > 26) {
    throw std::invalid_argument("gen_transaction_task: n_accounts must be in [2, 26]");
  }
  if (opt.min_amount < 1 || opt.max_amount < opt.min_amount || opt.min_initial < opt.min_amount ||
      opt.max_initial < opt.min_initial) {
    throw std::invalid_argument("gen_transaction_task: bad amount/balance ranges");
  }
  if (bug != BugType::None && n_ops < 2) {
    throw std::invalid_argument("gen_transaction_task: an injected bug needs n_ops >= 2");
  }
  const Rng root(seed);
  for (int attempt = 0; attempt < opt.max_retries; ++attempt) {
    Rng rng = root.fork(static_cast<std::uint64_t>(attempt));
    TransactionTask task;
    task.seed = seed;
    for (std::size_t a = 0; a < opt.n_accounts; ++a) {
      task.accounts.emplace_back(account_name(a), draw(rng, opt.min_initial, opt.max_initial));
    }
    std::map<std::string, long long> bal(task.accounts.begin(), task.accounts.end());
    const std::size_t n_clean = bug == BugType::None ? n_ops : n_ops - 1;
    bool ok = true;
    for (std::size_t i = 0; i < n_clean && ok; ++i) {
      auto r = clean_transfer(rng, bal, opt);
      if (!r) {
        ok = false;
        break;
      }
      r->tx = static_cast<int>(i + 1);
      bal[r->from.account] = r->from.new_balance;
      bal[r->to.account] = r->to.new_balance;
      task.ops.push_back(*r);
    }
    if (!ok) continue;
    if (bug == BugType::None) {
      if (verify_transaction_log(task).valid) return task;
      continue;
    }
    const auto pos = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n_ops) - 1));
    auto rec = anomaly(rng, bug, task, pos, opt);
    if (!rec) continue;
    task.ops.insert(task.ops.begin() + static_cast<std::ptrdiff_t>(pos), *rec);
    for (std::size_t i = 0; i < task.ops.size(); ++i) task.ops[i].tx = static_cast<int>(i + 1);
    rechain_balances(task, pos + 1);
    task.bug_type = bug;
    task.bug_tx = static_cast<int>(pos + 1);
    const Verdict v = verify_transaction_log(task);
    if (!v.valid && bug_type_for(*v.violated_rule) == bug && v.first_offender == task.bug_tx) return task;
  }
  throw std::runtime_error("gen_transaction_task: could not inject " + to_string(bug) + " in " +
                           std::to_string(opt.max_retries) + " attempts");
}

TransactionTask reference_transaction_log() {
  TransactionTask t;
  t.accounts = {{"A", 4000}, {"B", 4200}};
  auto rec = [](int tx, long long amt, Posting f, Posting to) { return TransferRecord{tx, amt, f, to}; };
  t.ops = {rec(1, 107, {"A", 4000, 3893}, {"B", 4200, 4307}),
           rec(2, 204, {"A", 3893, 3689}, {"B", 4307, 4511}),
           rec(3, 780, {"A", 3689, 2909}, {"B", 4511, 5291}),
           rec(4, 2925, {"A", 2909, -16}, {"B", 5291, 8216}),
           rec(5, 699, {"B", 8216, 7517}, {"A", -16, 683})};
  t.bug_type = BugType::NegativeBal;
  t.bug_tx = 4;
  return t;
}

std::string render_initial_state(const TransactionTask& task) {
  std::string s = "{";
  for (const auto& [name, bal] : task.accounts) s += "\"account_" + name + "\": " + std::to_string(bal) + ", ";
  return s + "\"total\": " + std::to_string(task.total()) + "}";
}

std::string render_transaction_line(const TransferRecord& r) {
  auto posting = [](const Posting& p) {
    return p.account + "=" + std::to_string(p.old_balance) + " → " + std::to_string(p.new_balance);
  };
  return "[" + tx_id(r.tx) + "]: Transfer $" + std::to_string(r.amount) + ": " + posting(r.from) + ", " +
         posting(r.to);
}

std::string render_transaction_lines(const TransactionTask& task) {
  std::string s;
  for (const auto& op : task.ops) s += render_transaction_line(op) + "\n";
  return s;
}

namespace {

class Cursor {
 public:
  Cursor(const std::string& s, std::size_t line) : s_(s), line_(line) {}

  void ws() {
    while (i_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[i_]))) ++i_;
  }
  bool eat(const std::string& lit) {
    ws();
    if (s_.compare(i_, lit.size(), lit) == 0) {
      i_ += lit.size();
      return true;
    }
    return false;
  }
  void expect(const std::string& lit) {
    if (!eat(lit)) fail("expected '" + lit + "'");
  }
  long long integer() {
    ws();
    const std::size_t start = i_;
    if (i_ < s_.size() && s_[i_] == '-') ++i_;
    const std::size_t digits = i_;
    while (i_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[i_]))) ++i_;
    if (i_ == digits || i_ - digits > 15) fail("expected an integer");
    return std::stoll(s_.substr(start, i_ - start));
  }
  std::string name() {
    ws();
    const std::size_t start = i_;
    while (i_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[i_])) || s_[i_] == '_')) ++i_;
    if (i_ == start) fail("expected an account name");
    return s_.substr(start, i_ - start);
  }
  void arrow() {
    if (!eat("→") && !eat("->")) fail("expected an arrow");
  }
  void end() {
    ws();
    if (i_ != s_.size()) fail("trailing text");
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(line_, what + " at column " + std::to_string(i_ + 1));
  }

 private:
  const std::string& s_;
  std::size_t line_;
  std::size_t i_ = 0;
};

Posting parse_posting(Cursor& c) {
  Posting p;
  p.account = c.name();
  c.expect("=");
  p.old_balance = c.integer();
  c.arrow();
  p.new_balance = c.integer();
  return p;
}

}  // namespace

TransactionTask parse_transaction_log(const std::string& initial_state, const std::string& lines) {
  TransactionTask task;
  nlohmann::ordered_json init;
  try {
    init = nlohmann::ordered_json::parse(initial_state);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(0, std::string("initial state: ") + e.what());
  }
  if (!init.is_object()) throw ParseError(0, "initial state must be an object");
  std::optional<long long> total;
  for (const auto& [key, value] : init.items()) {
    if (!value.is_number_integer()) throw ParseError(0, "initial state: non-integer " + key);
    if (key == "total") {
      total = value.get<long long>();
    } else if (key.rfind("account_", 0) == 0 && key.size() > 8) {
      task.accounts.emplace_back(key.substr(8), value.get<long long>());
    } else {
      throw ParseError(0, "initial state: unexpected key " + key);
    }
  }
  if (task.accounts.size() < 2) throw ParseError(0, "initial state needs at least two accounts");
  if (total && *total != task.total()) throw ParseError(0, "initial state: total != sum of accounts");

  std::size_t line_no = 0;
  for (const auto& raw : split_lines(lines)) {
    ++line_no;
    if (std::all_of(raw.begin(), raw.end(), [](unsigned char ch) { return std::isspace(ch); })) continue;
    Cursor c(raw, line_no);
    const bool bracket = c.eat("[");
    c.expect("TX");
    TransferRecord r;
    r.tx = static_cast<int>(c.integer());
    if (bracket) c.expect("]");
    c.expect(":");
    c.expect("Transfer");
    c.expect("$");
    r.amount = c.integer();
    if (r.amount < 1) c.fail("amount must be positive");
    c.expect(":");
    r.from = parse_posting(c);
    c.expect(",");
    r.to = parse_posting(c);
    c.end();
    if (r.tx != static_cast<int>(task.ops.size()) + 1) {
      throw ParseError(line_no, "expected " + tx_id(static_cast<int>(task.ops.size()) + 1));
    }
    task.ops.push_back(r);
  }
  return task;
}

// ---- code needle -------------------------------------------------------------

const std::vector<NeedleSpec>& needle_pool() {
  static const std::vector<NeedleSpec> pool = {
      {"attn_weights = torch.matmul(q, k.transpose(-2, -1))",
       "Attention scores are never divided by the square root of the head dimension, so the "
       "softmax saturates and training diverges."},
      {"attn_weights = F.softmax(attn_weights, dim=0)",
       "Attention probabilities are normalized over the wrong axis, so the weights of a query "
       "no longer sum to one."},
      {"x = self.attn_out(att)",
       "The attention output overwrites the hidden state instead of being added to it, which "
       "drops the residual stream."},
      {"x = self.ln_1(x + self.attn(x))",
       "Layer normalization is applied after the residual addition instead of to the block input."},
  };
  return pool;
}

namespace {

std::string strip(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

bool contains(const std::string& s, const char* needle) { return s.find(needle) != std::string::npos; }

const char* const kVars[] = {"h", "x", "y", "att", "scores", "hidden", "residual", "logits", "probs",
                             "q", "k", "v", "mask", "bias", "out", "state", "emb", "pos"};
const char* const kModules[] = {"ln_1", "ln_2", "attn_out", "mlp", "proj", "ff_in", "ff_out",
                                "dropout", "rotary", "norm", "wte", "wpe", "head", "act"};
const char* const kVerbs[] = {"forward", "init", "reset", "compute", "apply", "build", "get", "merge",
                              "split", "scale", "load", "save"};
const char* const kNouns[] = {"weights", "heads", "cache", "mask", "block", "bias", "params",
                              "state", "buffers", "rotary", "layer", "logits"};
const char* const kComments[] = {
    "# shape: (batch, heads, seq, head_dim)", "# apply rotary embeddings to queries and keys",
    "# TODO: fuse this into a single kernel", "# causal mask: query i sees keys j <= i",
    "# keep activations in float32 for stability", "# residual branch", "# project back to d_model",
    "# NOTE: this path is only used at inference time", "# split heads", "# merge heads"};
const char* const kCorrect[] = {
    "attn_weights = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(q.size(-1))",
    "attn_weights = F.softmax(attn_weights, dim=-1)",
    "x = x + self.attn_out(att)",
    "x = x + self.attn(self.ln_1(x))",
    "x = x + self.mlp(self.ln_2(x))",
    "attn_weights = attn_weights.masked_fill(mask == 0, float(\"-inf\"))",
    "att = torch.matmul(attn_weights, v)",
    "q, k, v = self.att_proj(x).split(self.d_model, dim=-1)"};

template <std::size_t N>
const char* any(Rng& rng, const char* const (&arr)[N]) {
  return arr[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(N) - 1))];
}

std::string distractor(Rng& rng) {
  const std::string ind(static_cast<std::size_t>(4 * rng.uniform_int(0, 3)), ' ');
  switch (rng.uniform_int(0, 9)) {
    case 0: return "";
    case 1: return ind + any(rng, kComments);
    case 2:
      return "    def " + std::string(any(rng, kVerbs)) + "_" + any(rng, kNouns) + "(self, " +
             any(rng, kVars) + ": torch.Tensor) -> torch.Tensor:";
    case 3:
      return ind + any(rng, kVars) + " = self." + any(rng, kModules) + "(" + any(rng, kVars) + ")";
    case 4:
      return ind + any(rng, kVars) + " = " + any(rng, kVars) + " * " +
             std::to_string(rng.uniform_int(1, 64)) + "." + std::to_string(rng.uniform_int(0, 9));
    case 5: return ind + "return " + any(rng, kVars);
    case 6: return "        " + std::string(any(rng, kCorrect));
    case 7:
      return ind + "if self.config." + any(rng, kNouns) + "_" + std::to_string(rng.uniform_int(1, 8)) +
             " is not None:";
    case 8:
      return ind + any(rng, kVars) + " = " + any(rng, kVars) + ".view(B, T, self.n_heads, " +
             std::to_string(8 * rng.uniform_int(1, 16)) + ")";
    default:
      return ind + "self." + any(rng, kNouns) + " = nn.Linear(" + std::to_string(64 * rng.uniform_int(1, 32)) +
             ", " + std::to_string(64 * rng.uniform_int(1, 32)) + ", bias=False)";
  }
}

}  // namespace

bool needle_predicate(std::size_t kind, const std::string& line) {
  const std::string s = strip(line);
  switch (kind) {
    case 0: return contains(s, "torch.matmul(q, k.transpose(-2, -1))") && !contains(s, "sqrt") && !contains(s, "scale");
    case 1: return contains(s, "softmax(") && contains(s, "dim=0");
    case 2: return s.rfind("x = self.attn_out(", 0) == 0;
    case 3: return contains(s, "self.ln_1(x + ");
    default: throw std::out_of_range("needle_predicate: unknown kind");
  }
}

CodeNeedleTask gen_code_needle_task(std::size_t L, std::uint64_t seed) {
  if (L < 5) throw std::invalid_argument("gen_code_needle_task: L must be >= 5");
  Rng family = Rng(seed).fork(0);
  CodeNeedleTask t;
  t.seed = seed;
  t.needle_kind = static_cast<std::size_t>(family.uniform_int(0, static_cast<std::int64_t>(needle_pool().size()) - 1));
  const double rel = family.uniform();  // pinned relative position
  t.needle_index = std::min(L - 1, static_cast<std::size_t>(rel * static_cast<double>(L)));
  t.needle_desc = needle_pool()[t.needle_kind].description;
  // One distractor stream per seed: a longer task extends the shorter one's haystack.
  Rng hay = Rng(seed).fork(1);
  for (std::size_t i = 0; i < L; ++i) {
    std::string text;
    if (i == t.needle_index) {
      text = "        " + needle_pool()[t.needle_kind].text;
    } else {
      do {
        text = distractor(hay);
      } while (needle_predicate(t.needle_kind, text));
    }
    t.lines.push_back({kFirstCodeLine + i, text});
  }
  return t;
}

// ---- shared --------------------------------------------------------------------

std::string to_string(TaskKind k) { return k == TaskKind::Transactions ? "transactions" : "code"; }

TaskKind task_kind_from_string(const std::string& s) {
  const std::string l = lower(s);
  if (l == "transactions" || l == "transaction" || l == "tx") return TaskKind::Transactions;
  if (l == "code" || l == "code-needle" || l == "code_needle") return TaskKind::CodeNeedle;
  throw std::invalid_argument("unknown task kind '" + s + "'");
}

TaskInstance make_transaction_instance(std::size_t n_ops, BugType bug, std::uint64_t seed,
                                       const TransactionOptions& opt) {
  TaskInstance t;
  t.length_param = n_ops;
  t.seed = seed;
  t.id = "tx-" + std::to_string(n_ops) + "-" + lower(to_string(bug)) + "-" + std::to_string(seed);
  t.task = gen_transaction_task(n_ops, bug, seed, opt);
  return t;
}

TaskInstance make_code_instance(std::size_t L, std::uint64_t seed) {
  TaskInstance t;
  t.length_param = L;
  t.seed = seed;
  t.id = "code-" + std::to_string(L) + "-" + std::to_string(seed);
  t.task = gen_code_needle_task(L, seed);
  return t;
}

namespace {

constexpr const char* kTxTask = "Analyze this banking transaction log for bugs.";
constexpr const char* kTxRules =
    "1. Total money must remain constant (conservation)\n"
    "2. No account can go negative\n"
    "3. All calculations must be mathematically correct\n"
    "Possible bug types (choose exactly one): CALC_ERROR, NEGATIVE_BAL, LOST_UPDATE, DUPLICATE_TXN, NONE\n"
    "Answer format: {\"bug_type\": TYPE, \"bug_location\": TXnnn}\n";
constexpr const char* kTxQuestion = "Please identify the bug type and location.";
constexpr const char* kCodeTask = "Find the line that contains the described bug.";
constexpr const char* kCodeRules = "Answer with the file and line, e.g. model.py:L12\n";
constexpr const char* kCodeQuestion = "Given the above code context, please identify the exact location of the bug.";
constexpr const char* kStatePrefix = "Initial state: ";
constexpr const char* kLogsHeader = "Transaction logs:\n";
constexpr const char* kDescPrefix = "Bug description: ";

std::string code_line(const CodeLine& l) { return "L" + std::to_string(l.line_no) + ": " + l.text; }

}  // namespace

std::string context_text(const TaskInstance& t) {
  if (const auto* tx = std::get_if<TransactionTask>(&t.task)) {
    return kStatePrefix + render_initial_state(*tx) + "\n" + kLogsHeader + render_transaction_lines(*tx);
  }
  const auto& code = std::get<CodeNeedleTask>(t.task);
  std::string s = code.file + "\n";
  for (const auto& l : code.lines) s += code_line(l) + "\n";
  return s;
}

std::string question_text(const TaskInstance& t) {
  if (t.kind() == TaskKind::Transactions) return kTxQuestion;
  return kDescPrefix + std::get<CodeNeedleTask>(t.task).needle_desc + "\n" + kCodeQuestion;
}

std::string answer_text(const TaskInstance& t) {
  if (const auto* tx = std::get_if<TransactionTask>(&t.task)) {
    const std::string loc = tx->bug_tx ? tx_id(*tx->bug_tx) : "NONE";
    return "{\"bug_type\": " + to_string(tx->bug_type) + ", \"bug_location\": " + loc + "}";
  }
  const auto& code = std::get<CodeNeedleTask>(t.task);
  return code.file + ":L" + std::to_string(code.needle_line_no());
}

ScoreResult score_answer(const TaskInstance& t, const std::string& answer) {
  ScoreResult r;
  std::smatch m;
  if (const auto* tx = std::get_if<TransactionTask>(&t.task)) {
    static const std::regex keyed_type(R"re(bug_type"?\s*[:=]\s*"?\s*([A-Za-z_]+))re", std::regex::icase);
    static const std::regex keyed_loc(R"re(bug_location"?\s*[:=]\s*"?\s*([A-Za-z]+[0-9]*))re", std::regex::icase);
    static const std::regex any_type(R"re(\b(CALC_ERROR|NEGATIVE_BAL|LOST_UPDATE|DUPLICATE_TXN|NONE)\b)re",
                                     std::regex::icase);
    static const std::regex any_loc(R"re(\b(TX[0-9]+)\b)re", std::regex::icase);
    if (std::regex_search(answer, m, keyed_type) || std::regex_search(answer, m, any_type)) {
      r.bug_type = upper(m[1].str());
    }
    if (std::regex_search(answer, m, keyed_loc) || std::regex_search(answer, m, any_loc)) {
      r.location = upper(m[1].str());
    }
    if (!r.bug_type) {
      r.reason = "no bug type found";
      return r;
    }
    if (*r.bug_type != to_string(tx->bug_type)) {
      r.reason = "bug type " + *r.bug_type + " != " + to_string(tx->bug_type);
      return r;
    }
    if (tx->bug_type == BugType::None) {
      r.correct = true;
      return r;
    }
    if (!r.location) {
      r.reason = "no location found";
      return r;
    }
    r.correct = *r.location == tx_id(*tx->bug_tx);
    if (!r.correct) r.reason = "location " + *r.location + " != " + tx_id(*tx->bug_tx);
    return r;
  }
  const auto& code = std::get<CodeNeedleTask>(t.task);
  static const std::regex with_file(R"re(([A-Za-z0-9_./-]+\.py)\s*:\s*L\s*([0-9]+))re", std::regex::icase);
  static const std::regex bare(R"re(\bL\s*([0-9]+)\b)re", std::regex::icase);
  std::string line;
  if (std::regex_search(answer, m, with_file)) {
    if (lower(m[1].str()) != lower(code.file)) {
      r.location = m[1].str() + ":L" + m[2].str();
      r.reason = "wrong file " + m[1].str();
      return r;
    }
    line = m[2].str();
  } else if (std::regex_search(answer, m, bare)) {
    line = m[1].str();
  } else {
    r.reason = "no line reference found";
    return r;
  }
  r.location = code.file + ":L" + line;
  r.correct = line == std::to_string(code.needle_line_no());
  if (!r.correct) r.reason = "line L" + line + " != L" + std::to_string(code.needle_line_no());
  return r;
}

RenderedTask render_task_tokens(const TaskInstance& t, PromptStyle style) {
  const bool tx = t.kind() == TaskKind::Transactions;
  std::string s = std::string("[TASK] ") + (tx ? kTxTask : kCodeTask) + "\n[RULES]\n" +
                  (tx ? kTxRules : kCodeRules) + "[CONTEXT]\n";
  std::size_t needle_begin = 0, needle_end = 0;
  if (tx) {
    const auto& task = std::get<TransactionTask>(t.task);
    s += kStatePrefix + render_initial_state(task) + "\n" + kLogsHeader;
    for (const auto& op : task.ops) {
      const std::string line = render_transaction_line(op);
      if (task.bug_tx && op.tx == *task.bug_tx) {
        needle_begin = s.size();
        needle_end = s.size() + line.size();
      }
      s += line + "\n";
    }
  } else {
    const auto& code = std::get<CodeNeedleTask>(t.task);
    s += code.file + "\n";
    for (std::size_t i = 0; i < code.lines.size(); ++i) {
      const std::string line = code_line(code.lines[i]);
      if (i == code.needle_index) {
        needle_begin = s.size();
        needle_end = s.size() + line.size();
      }
      s += line + "\n";
    }
  }
  s += "[QUESTION] " + question_text(t) + "\n";
  s += style == PromptStyle::Direct ? kAnswerMarker : kThinkMarker;

  RenderedTask r;
  r.tokens.reserve(s.size() + 1);
  r.tokens.push_back(kBosToken);
  for (unsigned char c : s) r.tokens.push_back(c);
  if (needle_end > needle_begin) {
    r.needle_begin = needle_begin + 1;  // BOS offset
    r.needle_end = needle_end + 1;
  }
  return r;
}

// ---- JSONL -------------------------------------------------------------------------

std::string to_jsonl(const TaskInstance& t) {
  nlohmann::ordered_json j;
  j["id"] = t.id;
  j["kind"] = to_string(t.kind());
  j["length_param"] = t.length_param;
  j["context_text"] = context_text(t);
  j["question_text"] = question_text(t);
  if (const auto* tx = std::get_if<TransactionTask>(&t.task)) {
    j["answer"] = {{"bug_type", to_string(tx->bug_type)},
                   {"bug_location", tx->bug_tx ? tx_id(*tx->bug_tx) : "NONE"}};
  } else {
    const auto& code = std::get<CodeNeedleTask>(t.task);
    j["answer"] = {{"location", answer_text(t)},
                   {"line", code.needle_line_no()},
                   {"needle_kind", code.needle_kind}};
  }
  j["seed"] = t.seed;
  return j.dump();
}

TaskInstance from_jsonl(const std::string& line) {
  const auto j = nlohmann::ordered_json::parse(line);
  TaskInstance t;
  t.id = j.at("id").get<std::string>();
  t.length_param = j.at("length_param").get<std::size_t>();
  t.seed = j.at("seed").get<std::uint64_t>();
  const std::string ctx = j.at("context_text").get<std::string>();
  const auto& ans = j.at("answer");
  if (task_kind_from_string(j.at("kind").get<std::string>()) == TaskKind::Transactions) {
    const auto nl = ctx.find('\n');
    if (ctx.rfind(kStatePrefix, 0) != 0 || nl == std::string::npos) throw ParseError(1, "missing initial state");
    const std::string state = ctx.substr(std::string(kStatePrefix).size(), nl - std::string(kStatePrefix).size());
    std::string rest = ctx.substr(nl + 1);
    if (rest.rfind(kLogsHeader, 0) != 0) throw ParseError(2, "missing log header");
    auto task = parse_transaction_log(state, rest.substr(std::string(kLogsHeader).size()));
    task.seed = t.seed;
    task.bug_type = bug_type_from_string(ans.at("bug_type").get<std::string>());
    const std::string loc = ans.at("bug_location").get<std::string>();
    if (task.bug_type != BugType::None) {
      if (loc.size() < 3 || upper(loc.substr(0, 2)) != "TX") throw ParseError(0, "bad bug_location " + loc);
      task.bug_tx = std::stoi(loc.substr(2));
    }
    t.task = std::move(task);
  } else {
    CodeNeedleTask code;
    code.seed = t.seed;
    const auto lines = split_lines(ctx);
    if (lines.empty()) throw ParseError(1, "empty code context");
    code.file = lines[0];
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const auto colon = lines[i].find(": ");
      if (lines[i].empty() || lines[i][0] != 'L' || colon == std::string::npos) {
        throw ParseError(i + 1, "expected 'L<n>: text'");
      }
      code.lines.push_back({std::stoul(lines[i].substr(1, colon - 1)), lines[i].substr(colon + 2)});
    }
    const auto needle_line = ans.at("line").get<std::size_t>();
    if (code.lines.empty() || needle_line < code.lines.front().line_no ||
        needle_line - code.lines.front().line_no >= code.lines.size()) {
      throw ParseError(0, "needle line outside the context");
    }
    code.needle_index = needle_line - code.lines.front().line_no;
    code.needle_kind = ans.at("needle_kind").get<std::size_t>();
    const std::string q = j.at("question_text").get<std::string>();
    const auto qnl = q.find('\n');
    if (q.rfind(kDescPrefix, 0) != 0 || qnl == std::string::npos) throw ParseError(0, "missing bug description");
    code.needle_desc = q.substr(std::string(kDescPrefix).size(), qnl - std::string(kDescPrefix).size());
    t.task = std::move(code);
  }
  return t;
}

void write_dataset(const std::string& path, const std::vector<TaskInstance>& tasks) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& t : tasks) out << to_jsonl(t) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<TaskInstance> read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<TaskInstance> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(from_jsonl(line));
    } catch (const std::exception& e) {
      throw ParseError(n, std::string("dataset record: ") + e.what());
    }
  }
  return out;
}

}  // namespace qttt
