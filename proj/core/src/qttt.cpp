#include "qttt/qttt.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace qttt {

void AdaptationConfig::validate() const {
  if (span_length < 1) throw std::invalid_argument("AdaptationConfig: span_length must be >= 1");
  if (!(optimizer.lr > 0.0)) throw std::invalid_argument("AdaptationConfig: lr must be > 0");
}

Span sample_span(Rng& rng, std::size_t context_length, std::size_t span_length) {
  if (context_length < span_length + 1) {
    throw std::invalid_argument("sample_span: context of " + std::to_string(context_length) +
                                " tokens is shorter than span " + std::to_string(span_length) +
                                " + 1");
  }
  const auto last = static_cast<std::int64_t>(context_length - span_length);
  return {static_cast<std::size_t>(rng.uniform_int(1, last)), span_length};
}

AdaptationResult run_qttt(const ModelParams& params, std::span<const int> tokens,
                          const AdaptationConfig& config) {
  config.validate();
  if (tokens.size() < config.span_length + 1) {
    throw std::invalid_argument("run_qttt: context shorter than span + 1");
  }
  const KVCache cache = prefill_and_cache(params, tokens);
  return run_qttt(params, cache, config);
}

AdaptationResult run_qttt(const ModelParams& params, const KVCache& cache,
                          const AdaptationConfig& config) {
  config.validate();
  const std::size_t T = cache.length();
  if (T < config.span_length + 1) throw std::invalid_argument("run_qttt: context shorter than span + 1");
  if (cache.n_layers() != params.config().n_layers) {
    throw std::invalid_argument("run_qttt: cache/model layer count mismatch");
  }

  AdaptationResult out{params, {}};
  out.trace.initial_fingerprint = cache.fingerprint();
  std::vector<Matrix*> query;
  for (auto& slot : out.params.tensors())
    if (slot.role == ParamRole::Query) query.push_back(slot.tensor);
  Optimizer opt(config.optimizer, query);  // fresh moments per run
  Rng rng(config.seed);
  const std::span<const int> tokens = cache.tokens();

  for (std::size_t s = 0; s < config.steps; ++s) {
    const Span span = sample_span(rng, T, config.span_length);
    auto grads = grad_wq_span(out.params, cache, tokens, span);
    if (!std::isfinite(grads.loss)) {
      out.trace.aborted = true;
      out.trace.abort_reason = "non-finite span loss at step " + std::to_string(s);
      break;
    }
    std::vector<Matrix> saved;
    for (const Matrix* m : query) saved.push_back(*m);
    AdaptationStep step;
    step.span = span;
    step.loss_before = grads.loss;
    step.grad_norm = opt.step(grads.w_q);
    step.loss_after = span_forward_frozen_kv(out.params, cache, tokens, span).loss;
    if (!std::isfinite(step.loss_after) || !std::isfinite(step.grad_norm)) {
      for (std::size_t i = 0; i < query.size(); ++i) *query[i] = saved[i];
      out.trace.aborted = true;
      out.trace.abort_reason = "non-finite loss after update at step " + std::to_string(s);
      break;
    }
    step.fingerprint = cache.compute_fingerprint();
    out.trace.steps.push_back(step);
  }
  return out;
}

namespace {

using nlohmann::json;

// Fingerprints are 64-bit; JSON carries them as hex strings so that no
// reader truncates them to a double.
json step_to_json(const AdaptationStep& s) {
  return {{"span_start", s.span.start},
          {"span_length", s.span.length},
          {"loss_before", s.loss_before},
          {"loss_after", s.loss_after},
          {"grad_norm", s.grad_norm},
          {"fingerprint", fingerprint_hex(s.fingerprint)}};
}

std::uint64_t parse_hex(const std::string& s) { return std::stoull(s, nullptr, 16); }

}  // namespace

std::string AdaptationTrace::to_json() const {
  json j;
  j["initial_fingerprint"] = fingerprint_hex(initial_fingerprint);
  j["aborted"] = aborted;
  j["abort_reason"] = abort_reason;
  j["steps"] = json::array();
  for (const auto& s : steps) j["steps"].push_back(step_to_json(s));
  return j.dump(2);
}

AdaptationTrace AdaptationTrace::from_json(const std::string& text) {
  const json j = json::parse(text);
  AdaptationTrace t;
  t.initial_fingerprint = parse_hex(j.at("initial_fingerprint").get<std::string>());
  t.aborted = j.at("aborted").get<bool>();
  t.abort_reason = j.at("abort_reason").get<std::string>();
  for (const auto& s : j.at("steps")) {
    AdaptationStep st;
    st.span = {s.at("span_start").get<std::size_t>(), s.at("span_length").get<std::size_t>()};
    st.loss_before = s.at("loss_before").get<double>();
    st.loss_after = s.at("loss_after").get<double>();
    st.grad_norm = s.at("grad_norm").get<double>();
    st.fingerprint = parse_hex(s.at("fingerprint").get<std::string>());
    t.steps.push_back(st);
  }
  return t;
}

bool AdaptationTrace::operator==(const AdaptationTrace& o) const {
  if (initial_fingerprint != o.initial_fingerprint || aborted != o.aborted ||
      abort_reason != o.abort_reason || steps.size() != o.steps.size()) {
    return false;
  }
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const auto& a = steps[i];
    const auto& b = o.steps[i];
    if (!(a.span == b.span) || a.loss_before != b.loss_before || a.loss_after != b.loss_after ||
        a.grad_norm != b.grad_norm || a.fingerprint != b.fingerprint) {
      return false;
    }
  }
  return true;
}

}  // namespace qttt
