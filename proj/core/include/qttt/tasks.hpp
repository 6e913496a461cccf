#pragma once

// Synthetic long-context retrieval tasks: banking transaction logs with one
// injected anomaly, and line-numbered code with one planted bug line. Both are
// pure functions of their seed; rendering is byte-level.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace qttt {

// ---- transaction logs ------------------------------------------------------

enum class BugType { None, CalcError, NegativeBal, LostUpdate, DuplicateTxn };

std::string to_string(BugType b);  // "NONE", "CALC_ERROR", ...
BugType bug_type_from_string(const std::string& s);  // case-insensitive; throws

struct Posting {
  std::string account;
  long long old_balance = 0;
  long long new_balance = 0;
  bool operator==(const Posting&) const = default;
};

struct TransferRecord {
  int tx = 0;  // 1-based, rendered TX%03d
  long long amount = 0;
  Posting from;
  Posting to;
  bool operator==(const TransferRecord&) const = default;
};

struct TransactionTask {
  std::vector<std::pair<std::string, long long>> accounts;  // name -> initial balance, in order
  std::vector<TransferRecord> ops;
  BugType bug_type = BugType::None;
  std::optional<int> bug_tx;
  std::uint64_t seed = 0;

  std::size_t n_ops() const { return ops.size(); }
  long long total() const;
  bool operator==(const TransactionTask&) const = default;
};

struct TransactionOptions {
  std::size_t n_accounts = 2;
  long long min_initial = 1000;
  long long max_initial = 9000;
  long long min_amount = 1;
  long long max_amount = 999;
  bool allow_out_of_range = false;  // n_ops outside [25, 500]
  int max_retries = 64;
};

std::string tx_id(int tx);

/// Clean log of n_ops transfers, then exactly one anomaly of `bug` inserted at
/// a uniformly random feasible position with downstream balances re-chained.
TransactionTask gen_transaction_task(std::size_t n_ops, BugType bug, std::uint64_t seed,
                                     const TransactionOptions& opt = {});

/// Recomputes reported balances of ops[first..] by chaining from the state
/// the earlier lines report; amounts and accounts are kept.
void rechain_balances(TransactionTask& task, std::size_t first);

/// The five-line two-account example with an over-debit at TX004.
TransactionTask reference_transaction_log();

enum class LogRule { Conservation, NonNegative, Arithmetic, Duplicate, LostUpdate };
std::string to_string(LogRule r);
BugType bug_type_for(LogRule r);

struct Verdict {
  bool valid = true;
  std::optional<LogRule> violated_rule;
  std::optional<int> first_offender;
  std::string detail;
};

/// Replays from the initial state and reports the first violation. Per line
/// the rules are tested in the order duplicate, lost-update, arithmetic,
/// non-negative, conservation.
Verdict verify_transaction_log(const TransactionTask& task);

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what);
  std::size_t line;
};

/// `{"account_A": 4000, ..., "total": N}`.
std::string render_initial_state(const TransactionTask& task);
/// One `[TXnnn]: Transfer $a: X=old → new, Y=old → new` line per op.
std::string render_transaction_lines(const TransactionTask& task);
std::string render_transaction_line(const TransferRecord& r);

/// Inverse of the two renderers; tolerant of spacing, brackets and "->".
/// Bug fields of the result are unset (None).
TransactionTask parse_transaction_log(const std::string& initial_state, const std::string& lines);

// ---- code needle -------------------------------------------------------------

struct CodeLine {
  std::size_t line_no = 0;
  std::string text;
  bool operator==(const CodeLine&) const = default;
};

struct CodeNeedleTask {
  std::string file = "model.py";
  std::vector<CodeLine> lines;
  std::size_t needle_index = 0;  // into lines
  std::size_t needle_kind = 0;
  std::string needle_desc;
  std::uint64_t seed = 0;

  std::size_t n_lines() const { return lines.size(); }
  std::size_t needle_line_no() const { return lines.at(needle_index).line_no; }
  bool operator==(const CodeNeedleTask&) const = default;
};

constexpr std::size_t kFirstCodeLine = 1;

struct NeedleSpec {
  std::string text;         // exact needle line (without indentation)
  std::string description;  // shown to the solver
};

const std::vector<NeedleSpec>& needle_pool();
/// True when `line` (indentation ignored) exhibits needle kind `kind`.
bool needle_predicate(std::size_t kind, const std::string& line);

/// L line-numbered lines; the seed fixes the needle kind and its relative
/// position, so every L of one seed shows the same needle text.
CodeNeedleTask gen_code_needle_task(std::size_t L, std::uint64_t seed);

// ---- shared --------------------------------------------------------------------

enum class TaskKind { Transactions, CodeNeedle };
std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);

struct TaskInstance {
  std::string id;
  std::size_t length_param = 0;  // n_ops or L
  std::uint64_t seed = 0;
  std::variant<TransactionTask, CodeNeedleTask> task;

  TaskKind kind() const {
    return std::holds_alternative<TransactionTask>(task) ? TaskKind::Transactions : TaskKind::CodeNeedle;
  }
  bool operator==(const TaskInstance&) const = default;
};

TaskInstance make_transaction_instance(std::size_t n_ops, BugType bug, std::uint64_t seed,
                                       const TransactionOptions& opt = {});
TaskInstance make_code_instance(std::size_t L, std::uint64_t seed);

std::string context_text(const TaskInstance& t);
std::string question_text(const TaskInstance& t);
/// Canonical correct answer, e.g. {"bug_type": NEGATIVE_BAL, "bug_location": TX004}.
std::string answer_text(const TaskInstance& t);

struct ScoreResult {
  bool correct = false;
  std::optional<std::string> bug_type;  // parsed, upper-cased
  std::optional<std::string> location;  // TXnnn or file:Ln
  std::string reason;
};

/// Whitespace/case tolerant parse; field contents must match exactly.
ScoreResult score_answer(const TaskInstance& t, const std::string& answer);

enum class PromptStyle { Direct, Thinking };

struct RenderedTask {
  std::vector<int> tokens;    // BOS + bytes
  std::size_t needle_begin = 0;  // token range of the evidence line, [begin, end)
  std::size_t needle_end = 0;
};

inline constexpr const char* kAnswerMarker = "[ANSWER] ";
inline constexpr const char* kThinkMarker = "[THINK] ";

/// [TASK] / [RULES] / [CONTEXT] / [QUESTION] sections, then "[ANSWER] "
/// (Direct) or "[THINK] " (Thinking). Clean logs have an empty needle range.
RenderedTask render_task_tokens(const TaskInstance& t, PromptStyle style);

// ---- JSONL -------------------------------------------------------------------------

std::string to_jsonl(const TaskInstance& t);
TaskInstance from_jsonl(const std::string& line);
void write_dataset(const std::string& path, const std::vector<TaskInstance>& tasks);
std::vector<TaskInstance> read_dataset(const std::string& path);

}  // namespace qttt
