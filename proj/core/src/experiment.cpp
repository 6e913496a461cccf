#include "qttt/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "qttt/vocab.hpp"

namespace qttt {

namespace {

using ojson = nlohmann::ordered_json;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (b * 0x9E3779B97F4A7C15ull);
  return splitmix64(s);
}

const std::string kAnswerPrefix = std::string("\n") + kAnswerMarker;

struct Decoded {
  std::vector<int> tokens;  // every emitted token, including the stop token
  std::string text;
  double log_prob = 0.0;
};

Decoded decode_answer(DecodeSession& session, std::size_t max_tokens, const SamplerConfig& sampler, Rng& rng) {
  Decoded d;
  for (std::size_t i = 0; i < max_tokens; ++i) {
    const int tok = session.step(sampler, rng, &d.log_prob);
    d.tokens.push_back(tok);
    if (tok == '\n' || tok == kEosToken) break;
    if (tok < 256) d.text.push_back(static_cast<char>(tok));
  }
  return d;
}

std::vector<int> scratch(DecodeSession& session, std::size_t n, const SamplerConfig& sampler, Rng& rng) {
  std::vector<int> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(session.step(sampler, rng));
  return out;
}

std::string vote_key(const ScoreResult& s) {
  if (!s.bug_type && !s.location) return "";
  return s.bug_type.value_or("") + "|" + s.location.value_or("");
}

long double rel_diff(u128 a, u128 b) {
  const long double x = static_cast<long double>(a), y = static_cast<long double>(b);
  return y == 0 ? (x == 0 ? 0.0L : INFINITY) : std::fabs(x - y) / y;
}

std::string condition_type(ConditionKind k) {
  switch (k) {
    case ConditionKind::InContext: return "in_context";
    case ConditionKind::Thinking: return "thinking";
    case ConditionKind::Qttt: return "qttt";
    case ConditionKind::BestOfN: return "bon";
  }
  return "?";
}

ConditionKind condition_kind(const std::string& s) {
  for (auto k : {ConditionKind::InContext, ConditionKind::Thinking, ConditionKind::Qttt, ConditionKind::BestOfN})
    if (condition_type(k) == s) return k;
  throw std::invalid_argument("unknown condition type '" + s + "'");
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

}  // namespace

std::string Condition::label(const AdaptationConfig& a) const {
  switch (kind) {
    case ConditionKind::InContext: return "in_context";
    case ConditionKind::Thinking: return "thinking_M" + std::to_string(think_tokens);
    case ConditionKind::Qttt: return "qttt_k" + std::to_string(a.span_length) + "_N" + std::to_string(a.steps);
    case ConditionKind::BestOfN: return "bon_N" + std::to_string(samples) + "_M" + std::to_string(think_tokens);
  }
  return "?";
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  const auto j = ojson::parse(text);
  ExperimentConfig c;
  const auto& task = j.at("task");
  c.task_kind = task_kind_from_string(task.at("kind").get<std::string>());
  c.lengths = task.at("lengths").get<std::vector<std::size_t>>();
  c.seeds_per_point = task.value("seeds_per_point", c.seeds_per_point);
  if (task.contains("bug_mix")) {
    const auto& mixj = task.at("bug_mix");
    if (mixj.is_string() && mixj.get<std::string>() == "all") {
      // keep default
    } else {
      c.bug_mix.clear();
      for (const auto& b : mixj) c.bug_mix.push_back(bug_type_from_string(b.get<std::string>()));
    }
  }
  c.tx_options.n_accounts = task.value("n_accounts", c.tx_options.n_accounts);
  c.tx_options.allow_out_of_range = task.value("allow_out_of_range", c.tx_options.allow_out_of_range);
  c.checkpoint = j.value("checkpoint", c.checkpoint);
  c.seed = j.value("seed", c.seed);
  for (const auto& cj : j.at("conditions")) {
    Condition cond;
    cond.kind = condition_kind(cj.at("type").get<std::string>());
    cond.think_tokens = cj.value("tokens", std::size_t{0});
    cond.samples = cj.value("samples", std::size_t{1});
    c.conditions.push_back(cond);
  }
  if (j.contains("adaptation")) {
    const auto& a = j.at("adaptation");
    c.adaptation.steps = a.value("steps", c.adaptation.steps);
    c.adaptation.span_length = a.value("span_length", c.adaptation.span_length);
    c.adaptation.seed = a.value("seed", c.adaptation.seed);
    auto& o = c.adaptation.optimizer;
    if (a.contains("optimizer")) o.kind = optimizer_kind_from_string(a.at("optimizer").get<std::string>());
    o.lr = a.value("lr", o.lr);
    o.beta1 = a.value("beta1", o.beta1);
    o.beta2 = a.value("beta2", o.beta2);
    o.eps = a.value("eps", o.eps);
    o.weight_decay = a.value("weight_decay", o.weight_decay);
    o.grad_clip = a.value("grad_clip", o.grad_clip);
  }
  c.answer_tokens = j.value("answer_tokens", c.answer_tokens);
  if (j.contains("budget")) {
    const auto& b = j.at("budget");
    const std::string rule = b.value("rule", std::string("rule_of_thumb"));
    if (rule == "rule_of_thumb") c.budget_rule = BudgetRule::RuleOfThumb;
    else if (rule == "exact") c.budget_rule = BudgetRule::Exact;
    else throw std::invalid_argument("unknown budget rule '" + rule + "'");
    c.budget_tolerance = b.value("tolerance", c.budget_tolerance);
  }
  if (j.contains("sampler")) {
    c.think_temperature = j.at("sampler").value("think_temperature", c.think_temperature);
    c.bon_temperature = j.at("sampler").value("bon_temperature", c.bon_temperature);
  }
  c.threads = j.value("threads", c.threads);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.validate();
  return c;
}

std::string ExperimentConfig::to_json() const {
  ojson j;
  ojson mixj = ojson::array();
  for (auto b : bug_mix) mixj.push_back(to_string(b));
  j["task"] = {{"kind", to_string(task_kind)},
               {"lengths", lengths},
               {"seeds_per_point", seeds_per_point},
               {"bug_mix", mixj},
               {"n_accounts", tx_options.n_accounts},
               {"allow_out_of_range", tx_options.allow_out_of_range}};
  j["checkpoint"] = checkpoint;
  j["seed"] = seed;
  j["conditions"] = ojson::array();
  for (const auto& c : conditions) {
    ojson cj = {{"type", condition_type(c.kind)}};
    if (c.kind == ConditionKind::Thinking || c.kind == ConditionKind::BestOfN) cj["tokens"] = c.think_tokens;
    if (c.kind == ConditionKind::BestOfN) cj["samples"] = c.samples;
    j["conditions"].push_back(cj);
  }
  const auto& o = adaptation.optimizer;
  j["adaptation"] = {{"steps", adaptation.steps},   {"span_length", adaptation.span_length},
                     {"seed", adaptation.seed},     {"optimizer", to_string(o.kind)},
                     {"lr", o.lr},                  {"beta1", o.beta1},
                     {"beta2", o.beta2},            {"eps", o.eps},
                     {"weight_decay", o.weight_decay}, {"grad_clip", o.grad_clip}};
  j["answer_tokens"] = answer_tokens;
  j["budget"] = {{"rule", budget_rule == BudgetRule::Exact ? "exact" : "rule_of_thumb"},
                 {"tolerance", budget_tolerance}};
  j["sampler"] = {{"think_temperature", think_temperature}, {"bon_temperature", bon_temperature}};
  j["threads"] = threads;
  j["out_dir"] = out_dir;
  return j.dump(2);
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("ExperimentConfig: " + m); };
  if (lengths.empty()) fail("no lengths");
  if (seeds_per_point < 1) fail("seeds_per_point must be >= 1");
  if (conditions.empty()) fail("no conditions");
  if (answer_tokens < 1) fail("answer_tokens must be >= 1");
  if (!(budget_tolerance >= 0.0)) fail("budget tolerance must be >= 0");
  if (threads < 1) fail("threads must be >= 1");
  if (task_kind == TaskKind::Transactions && bug_mix.empty()) fail("empty bug_mix");
  if (think_temperature < 0.0 || bon_temperature < 0.0) fail("temperatures must be >= 0");
  for (const auto& c : conditions) {
    if (c.kind == ConditionKind::BestOfN && c.samples < 1) fail("bon needs samples >= 1");
  }
  adaptation.validate();
}

std::vector<TaskInstance> build_tasks(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<TaskInstance> out;
  for (std::size_t li = 0; li < cfg.lengths.size(); ++li) {
    for (std::size_t si = 0; si < cfg.seeds_per_point; ++si) {
      const std::uint64_t seed = mix(cfg.seed, (static_cast<std::uint64_t>(li) << 32) | si);
      if (cfg.task_kind == TaskKind::Transactions) {
        out.push_back(make_transaction_instance(cfg.lengths[li], cfg.bug_mix[si % cfg.bug_mix.size()], seed,
                                                cfg.tx_options));
      } else {
        out.push_back(make_code_instance(cfg.lengths[li], seed));
      }
    }
  }
  return out;
}

FlopModel flop_model_of(const ModelConfig& c) { return {c.n_layers, c.d_model, c.mlp_ratio}; }

u128 condition_flops(const Condition& c, const AdaptationConfig& a, const FlopModel& m, std::uint64_t T) {
  switch (c.kind) {
    case ConditionKind::InContext: return 0;
    case ConditionKind::Thinking: return gen_flops(m, c.think_tokens, T).flops;
    case ConditionKind::Qttt: return qttt_partial_flops(m, a.span_length, T, a.steps).flops;
    case ConditionKind::BestOfN: return u128{c.samples} * gen_flops(m, c.think_tokens / c.samples, T).flops;
  }
  return 0;
}

void validate_budgets(const ExperimentConfig& cfg, const FlopModel& model, const std::vector<TaskInstance>& tasks) {
  std::set<std::uint64_t> lengths;
  for (const auto& t : tasks) lengths.insert(render_task_tokens(t, PromptStyle::Direct).tokens.size());
  const auto& a = cfg.adaptation;
  std::ostringstream problems;
  for (const auto& c : cfg.conditions) {
    if (c.kind != ConditionKind::Thinking && c.kind != ConditionKind::BestOfN) continue;
    if (c.think_tokens == 0) continue;  // zero extra budget: a baseline, not a matched arm
    const std::string name = c.label(a);
    if (cfg.budget_rule == BudgetRule::RuleOfThumb) {
      const u128 target = u128{2} * a.steps * a.span_length;
      const long double r = rel_diff(c.think_tokens, target);
      if (r > cfg.budget_tolerance) {
        problems << name << ": M=" << c.think_tokens << " vs 2Nk=" << to_string_u128(target) << " ("
                 << static_cast<double>(100 * r) << "% apart)\n";
      }
    } else {
      for (std::uint64_t T : lengths) {
        if (a.span_length > T) continue;  // reported by the compatibility check
        const u128 q = qttt_partial_flops(model, a.span_length, T, a.steps).flops;
        const long double r = rel_diff(condition_flops(c, a, model, T), q);
        if (r > cfg.budget_tolerance) {
          problems << name << " at T=" << T << ": " << static_cast<double>(100 * r) << "% from the qTTT budget\n";
        }
      }
    }
  }
  const std::string p = problems.str();
  if (!p.empty()) {
    throw BudgetMismatch("budgets not matched within " + fmt_short(100 * cfg.budget_tolerance) + "%:\n" + p);
  }
}

ConditionOutcome run_condition(const ModelParams& params, const TaskInstance& task, const Condition& cond,
                               const ExperimentConfig& cfg) {
  const FlopModel fm = flop_model_of(params.config());
  const SamplerConfig greedy{};
  ConditionOutcome out;

  if (cond.kind == ConditionKind::InContext || cond.kind == ConditionKind::Qttt ||
      (cond.kind == ConditionKind::Thinking && cond.think_tokens == 0)) {
    const RenderedTask r = render_task_tokens(task, PromptStyle::Direct);
    const KVCache cache = prefill_and_cache(params, r.tokens);
    const ModelParams* model = &params;
    ModelParams adapted;
    if (cond.kind == ConditionKind::Qttt) {
      AdaptationConfig a = cfg.adaptation;
      a.seed = mix(cfg.adaptation.seed, task.seed);
      auto res = run_qttt(params, cache, a);
      adapted = std::move(res.params);
      out.trace = std::move(res.trace);
      model = &adapted;
    }
    DecodeSession session(*model, cache);
    Rng rng(0);
    const Decoded d = decode_answer(session, cfg.answer_tokens, greedy, rng);
    out.answer = d.text;
    if (r.needle_end > r.needle_begin) out.mass = attention_mass(*model, cache, needle_targets(r), d.tokens);
    out.flops = condition_flops(cond, cfg.adaptation, fm, r.tokens.size());
    out.score = score_answer(task, out.answer);
    return out;
  }

  const RenderedTask r = render_task_tokens(task, PromptStyle::Thinking);
  const RenderedTask direct = render_task_tokens(task, PromptStyle::Direct);
  const KVCache cache = prefill_and_cache(params, r.tokens);
  const auto marker = bytes_to_tokens(kAnswerPrefix);
  out.flops = condition_flops(cond, cfg.adaptation, fm, direct.tokens.size());

  struct Sample {
    std::vector<int> prefix;
    Decoded answer;
    ScoreResult parsed;
  };
  auto sample = [&](std::size_t think, const SamplerConfig& sampler, Rng& rng) {
    Sample s;
    DecodeSession session(params, cache);
    s.prefix = scratch(session, think, sampler, rng);
    session.feed(marker);
    s.prefix.insert(s.prefix.end(), marker.begin(), marker.end());
    s.answer = decode_answer(session, cfg.answer_tokens, sampler, rng);
    s.parsed = score_answer(task, s.answer.text);
    return s;
  };

  Sample chosen;
  if (cond.kind == ConditionKind::Thinking) {
    SamplerConfig think{};
    think.temperature = cfg.think_temperature;
    Rng rng(mix(task.seed, 0x7417));
    // Scratch tokens may be sampled; the answer after the marker is greedy.
    DecodeSession session(params, cache);
    chosen.prefix = scratch(session, cond.think_tokens, think, rng);
    session.feed(marker);
    chosen.prefix.insert(chosen.prefix.end(), marker.begin(), marker.end());
    chosen.answer = decode_answer(session, cfg.answer_tokens, greedy, rng);
  } else {
    SamplerConfig s{};
    s.temperature = cfg.bon_temperature;
    std::vector<Sample> samples;
    for (std::size_t i = 0; i < cond.samples; ++i) {
      Rng rng(mix(task.seed, 0xB0B0 + i));
      samples.push_back(sample(cond.think_tokens / cond.samples, s, rng));
    }
    // Majority vote over parsed answers; ties go to the higher answer log-prob.
    std::map<std::string, std::size_t> votes;
    for (const auto& x : samples)
      if (!vote_key(x.parsed).empty()) ++votes[vote_key(x.parsed)];
    std::size_t best = 0;
    for (std::size_t i = 1; i < samples.size(); ++i) {
      const auto vi = votes[vote_key(samples[i].parsed)], vb = votes[vote_key(samples[best].parsed)];
      if (vi > vb || (vi == vb && samples[i].answer.log_prob > samples[best].answer.log_prob)) best = i;
    }
    chosen = samples[best];
  }
  out.answer = chosen.answer.text;
  out.score = score_answer(task, out.answer);
  if (r.needle_end > r.needle_begin) {
    out.mass = attention_mass(params, cache, needle_targets(r), chosen.answer.tokens, chosen.prefix);
  }
  return out;
}

bool ResultRow::operator==(const ResultRow& o) const {
  auto same = [](double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; };
  return task_kind == o.task_kind && length_param == o.length_param && condition == o.condition &&
         seed == o.seed && same(accuracy, o.accuracy) && same(needle_mass_mean, o.needle_mass_mean) &&
         same(needle_mass_std, o.needle_mass_std) && same(margin_mean, o.margin_mean) && flops == o.flops;
}

std::string results_csv(const std::vector<ResultRow>& rows) {
  std::string s = std::string(kResultsHeader) + "\n";
  for (const auto& r : rows) {
    s += r.task_kind + "," + std::to_string(r.length_param) + "," + r.condition + "," + std::to_string(r.seed) +
         "," + fmt(r.accuracy) + "," + fmt(r.needle_mass_mean) + "," + fmt(r.needle_mass_std) + "," +
         fmt(r.margin_mean) + "," + to_string_u128(r.flops) + "\n";
  }
  return s;
}

std::vector<ResultRow> parse_results_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kResultsHeader) throw std::runtime_error("results CSV: bad header");
  std::vector<ResultRow> rows;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 9) throw std::runtime_error("results CSV line " + std::to_string(n) + ": expected 9 fields");
    try {
      ResultRow r;
      r.task_kind = f[0];
      r.length_param = std::stoull(f[1]);
      r.condition = f[2];
      r.seed = std::stoull(f[3]);
      r.accuracy = std::stod(f[4]);
      r.needle_mass_mean = std::stod(f[5]);
      r.needle_mass_std = std::stod(f[6]);
      r.margin_mean = std::stod(f[7]);
      r.flops = parse_u128(f[8]);
      rows.push_back(r);
    } catch (const std::exception& e) {
      throw std::runtime_error("results CSV line " + std::to_string(n) + ": " + e.what());
    }
  }
  return rows;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const ModelParams& params) {
  cfg.validate();
  const auto tasks = build_tasks(cfg);
  const FlopModel fm = flop_model_of(params.config());
  validate_budgets(cfg, fm, tasks);  // refuse before touching the model

  const auto& mc = params.config();
  if (mc.vocab_size != static_cast<std::size_t>(kByteVocabSize)) {
    throw std::invalid_argument("checkpoint vocabulary is not the byte vocabulary");
  }
  std::size_t extra = 0;
  for (const auto& c : cfg.conditions) extra = std::max(extra, c.think_tokens);
  for (const auto& t : tasks) {
    const std::size_t T = render_task_tokens(t, PromptStyle::Thinking).tokens.size();
    if (T + extra + kAnswerPrefix.size() + cfg.answer_tokens > mc.max_context) {
      throw std::invalid_argument("task " + t.id + " needs " + std::to_string(T + extra + kAnswerPrefix.size() + cfg.answer_tokens) +
                                  " positions; checkpoint max_context is " + std::to_string(mc.max_context));
    }
    for (const auto& c : cfg.conditions) {
      if (c.kind == ConditionKind::Qttt && T < cfg.adaptation.span_length + 1) {
        throw std::invalid_argument("task " + t.id + " is shorter than the qTTT span + 1");
      }
    }
  }

  const std::size_t nc = cfg.conditions.size();
  std::vector<ConditionOutcome> outcomes(tasks.size() * nc);
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      try {
        for (std::size_t c = 0; c < nc; ++c) outcomes[i * nc + c] = run_condition(params, tasks[i], cfg.conditions[c], cfg);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(cfg.threads, tasks.size()); ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);

  ExperimentResult res;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    for (std::size_t c = 0; c < nc; ++c) {
      const auto& o = outcomes[i * nc + c];
      ResultRow r;
      r.task_kind = to_string(tasks[i].kind());
      r.length_param = tasks[i].length_param;
      r.condition = cfg.conditions[c].label(cfg.adaptation);
      r.seed = tasks[i].seed;
      r.accuracy = o.score.correct ? 1.0 : 0.0;
      const double nan = std::nan("");
      r.needle_mass_mean = o.mass ? o.mass->mean : nan;
      r.needle_mass_std = o.mass ? o.mass->std : nan;
      r.margin_mean = o.mass ? o.mass->margin_mean : nan;
      r.flops = o.flops;
      res.rows.push_back(r);
      if (o.trace) res.traces.emplace_back(tasks[i].id, *o.trace);
    }
  }
  return res;
}

void write_experiment(const ExperimentResult& result, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "traces");
  auto write = [](const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    out << s;
    if (!out) throw std::runtime_error("cannot write " + p.string());
  };
  write(fs::path(dir) / "results.csv", results_csv(result.rows));
  for (const auto& [id, trace] : result.traces) write(fs::path(dir) / "traces" / (id + ".json"), trace.to_json() + "\n");
}

std::vector<ReportCell> aggregate(const std::vector<ResultRow>& rows) {
  std::vector<ReportCell> cells;
  std::map<std::tuple<std::string, std::size_t, std::string>, std::size_t> index;
  std::vector<double> margin_sum;
  for (const auto& r : rows) {
    const auto key = std::make_tuple(r.task_kind, r.length_param, r.condition);
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, cells.size()).first;
      ReportCell c;
      c.task_kind = r.task_kind;
      c.length_param = r.length_param;
      c.condition = r.condition;
      cells.push_back(c);
    }
    auto& c = cells[it->second];
    ++c.n;
    c.accuracy += r.accuracy;
    if (!std::isnan(r.needle_mass_mean)) {
      ++c.n_mass;
      c.needle_mass_mean += r.needle_mass_mean;
      c.margin_mean += r.margin_mean;
    }
  }
  for (auto& c : cells) {
    c.accuracy /= static_cast<double>(c.n);
    if (c.n_mass > 0) {
      c.needle_mass_mean /= static_cast<double>(c.n_mass);
      c.margin_mean /= static_cast<double>(c.n_mass);
    } else {
      c.needle_mass_mean = c.margin_mean = std::nan("");
    }
  }
  return cells;
}

std::string render_report(const std::vector<ReportCell>& cells) {
  std::vector<std::string> kinds, conditions;
  std::vector<std::size_t> lengths;
  auto add = [](auto& v, const auto& x) {
    if (std::find(v.begin(), v.end(), x) == v.end()) v.push_back(x);
  };
  for (const auto& c : cells) {
    add(kinds, c.task_kind);
    add(conditions, c.condition);
    add(lengths, c.length_param);
  }
  std::sort(lengths.begin(), lengths.end());
  auto table = [&](const std::string& title, const std::string& kind, auto value) {
    std::ostringstream o;
    o << title << "\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%-24s", "condition");
    o << buf;
    for (auto L : lengths) {
      std::snprintf(buf, sizeof(buf), "%12zu", L);
      o << buf;
    }
    o << "\n";
    for (const auto& cond : conditions) {
      std::snprintf(buf, sizeof(buf), "%-24s", cond.c_str());
      std::string line = buf;
      bool any = false;
      for (auto L : lengths) {
        const ReportCell* hit = nullptr;
        for (const auto& c : cells)
          if (c.task_kind == kind && c.condition == cond && c.length_param == L) hit = &c;
        if (hit) {
          any = true;
          std::snprintf(buf, sizeof(buf), "%12s", value(*hit).c_str());
        } else {
          std::snprintf(buf, sizeof(buf), "%12s", "-");
        }
        line += buf;
      }
      if (any) o << line << "\n";
    }
    return o.str();
  };
  if (cells.empty()) return table("accuracy", "", [](const ReportCell&) { return std::string(); });
  std::string s;
  for (const auto& kind : kinds) {
    s += table("accuracy (" + kind + ")", kind, [](const ReportCell& c) { return fmt(c.accuracy); });
    s += "\n";
    s += table("needle attention mass (" + kind + ")", kind, [](const ReportCell& c) {
      if (c.n_mass == 0) return std::string("-");
      char b[32];
      std::snprintf(b, sizeof(b), "%.4f", c.needle_mass_mean);
      return std::string(b);
    });
    s += "\n";
  }
  return s;
}

std::vector<std::vector<int>> build_training_corpus(TaskKind kind, const std::vector<std::size_t>& lengths,
                                                    std::size_t docs, std::uint64_t seed,
                                                    const TransactionOptions& tx_options) {
  if (lengths.empty()) throw std::invalid_argument("build_training_corpus: no lengths");
  static const BugType kCycle[] = {BugType::CalcError, BugType::NegativeBal, BugType::LostUpdate,
                                   BugType::DuplicateTxn, BugType::None};
  std::vector<std::vector<int>> corpus;
  for (std::size_t i = 0; i < docs; ++i) {
    const std::uint64_t s = mix(seed ^ 0xC0DE, i);
    const std::size_t L = lengths[i % lengths.size()];
    const TaskInstance t = kind == TaskKind::Transactions
                               ? make_transaction_instance(L, kCycle[i % 5], s, tx_options)
                               : make_code_instance(L, s);
    auto tokens = render_task_tokens(t, PromptStyle::Direct).tokens;
    const auto answer = bytes_to_tokens(answer_text(t) + "\n");
    tokens.insert(tokens.end(), answer.begin(), answer.end());
    tokens.push_back(kEosToken);
    corpus.push_back(std::move(tokens));
  }
  return corpus;
}

}  // namespace qttt
