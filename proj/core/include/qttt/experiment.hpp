#pragma once

// Compute-matched comparison of answering strategies on generated tasks:
// direct answer, thinking tokens, query-only adaptation and best-of-N, with
// FLOP budgets validated before any model is run.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qttt/diagnostics.hpp"
#include "qttt/flops.hpp"
#include "qttt/qttt.hpp"
#include "qttt/tasks.hpp"

namespace qttt {

enum class ConditionKind { InContext, Thinking, Qttt, BestOfN };

struct Condition {
  ConditionKind kind = ConditionKind::InContext;
  std::size_t think_tokens = 0;  // Thinking: M. BestOfN: total M, split evenly over samples.
  std::size_t samples = 1;       // BestOfN only

  /// "in_context", "thinking(M=64)", "qttt(k=16,N=4)", "bon(N=4,M=64)".
  std::string label(const AdaptationConfig& adaptation) const;
};

enum class BudgetRule { RuleOfThumb, Exact };

struct ExperimentConfig {
  TaskKind task_kind = TaskKind::Transactions;
  std::vector<std::size_t> lengths;      // n_ops or L
  std::size_t seeds_per_point = 1;
  std::uint64_t seed = 0;
  std::vector<BugType> bug_mix{BugType::CalcError, BugType::NegativeBal, BugType::LostUpdate,
                               BugType::DuplicateTxn};
  TransactionOptions tx_options{};
  std::string checkpoint;
  std::vector<Condition> conditions;
  AdaptationConfig adaptation{};
  std::size_t answer_tokens = 64;
  BudgetRule budget_rule = BudgetRule::RuleOfThumb;
  double budget_tolerance = 0.05;
  double think_temperature = 0.0;  // 0 => greedy scratch tokens
  double bon_temperature = 0.8;
  std::size_t threads = 1;
  std::string out_dir = "results";

  static ExperimentConfig from_json(const std::string& text);
  std::string to_json() const;
  /// Structural checks only (budgets need the model; see validate_budgets).
  void validate() const;
};

class BudgetMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Deterministic task list: lengths x seeds_per_point, bug types cycling
/// through bug_mix.
std::vector<TaskInstance> build_tasks(const ExperimentConfig& cfg);

/// Throws BudgetMismatch unless every thinking / best-of-N budget M is within
/// budget_tolerance of the qTTT schedule: |M - 2Nk| / 2Nk under the rule of
/// thumb, |gen(M, T) - qttt(k, N, T)| / qttt(k, N, T) for every task length T
/// under the exact rule.
void validate_budgets(const ExperimentConfig& cfg, const FlopModel& model,
                      const std::vector<TaskInstance>& tasks);

/// Extra compute of a condition beyond the shared prefill and answer decode.
u128 condition_flops(const Condition& c, const AdaptationConfig& adaptation, const FlopModel& model,
                     std::uint64_t context_tokens);

FlopModel flop_model_of(const ModelConfig& config);

struct ConditionOutcome {
  std::string answer;
  ScoreResult score;
  std::optional<AttentionMassReport> mass;  // absent when the task has no needle
  std::optional<AdaptationTrace> trace;     // qTTT only
  u128 flops = 0;
};

ConditionOutcome run_condition(const ModelParams& params, const TaskInstance& task,
                               const Condition& condition, const ExperimentConfig& cfg);

struct ResultRow {
  std::string task_kind;
  std::size_t length_param = 0;
  std::string condition;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double needle_mass_mean = 0.0;  // NaN when there is no needle
  double needle_mass_std = 0.0;
  double margin_mean = 0.0;
  u128 flops = 0;
  bool operator==(const ResultRow& o) const;
};

inline constexpr const char* kResultsHeader =
    "task_kind,length_param,condition,seed,accuracy,needle_mass_mean,needle_mass_std,margin_mean,flops";

std::string results_csv(const std::vector<ResultRow>& rows);
/// Throws std::runtime_error on a wrong header or malformed row.
std::vector<ResultRow> parse_results_csv(const std::string& text);

struct ExperimentResult {
  std::vector<ResultRow> rows;
  std::vector<std::pair<std::string, AdaptationTrace>> traces;  // (task id, trace)
};

/// Validates budgets and model compatibility, then runs every task under
/// every condition. Row order is task-major, condition-minor regardless of
/// the thread count.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const ModelParams& params);

/// Writes results.csv and traces/<task id>.json under `dir`.
void write_experiment(const ExperimentResult& result, const std::string& dir);

struct ReportCell {
  std::string task_kind;
  std::size_t length_param = 0;
  std::string condition;
  std::size_t n = 0;
  double accuracy = 0.0;
  double needle_mass_mean = 0.0;  // over rows with a needle
  double margin_mean = 0.0;
  std::size_t n_mass = 0;
};

/// Groups by (task kind, length, condition) in first-appearance order.
std::vector<ReportCell> aggregate(const std::vector<ResultRow>& rows);
/// Accuracy-by-length and attention-mass tables as aligned text.
std::string render_report(const std::vector<ReportCell>& cells);

/// Training documents: Direct rendering + canonical answer + newline + EOS.
std::vector<std::vector<int>> build_training_corpus(TaskKind kind, const std::vector<std::size_t>& lengths,
                                                    std::size_t docs, std::uint64_t seed,
                                                    const TransactionOptions& tx_options = {});

}  // namespace qttt
