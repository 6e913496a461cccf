#include "qttt/transformer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "qttt/autograd.hpp"

namespace qttt {

namespace detail {

// Parameters bound as autodiff leaves, in ModelParams::tensors() order.
struct BoundGraph {
  std::vector<ad::Var> vars;
  std::size_t n_layers = 0;

  const ad::Var& embedding() const { return vars[0]; }
  const ad::Var& layer(std::size_t l, std::size_t k) const { return vars[1 + 8 * l + k]; }
  const ad::Var& final_norm() const { return vars[1 + 8 * n_layers]; }
  const ad::Var& unembedding() const { return vars[2 + 8 * n_layers]; }
};

}  // namespace detail

namespace {

using detail::BoundGraph;

enum LayerSlot : std::size_t { kAttnNorm = 0, kWq, kWk, kWv, kWo, kMlpNorm, kWup, kWdown };

enum class GradScope { None, Query, All };

BoundGraph bind(const ModelParams& params, GradScope scope) {
  BoundGraph g;
  g.n_layers = params.config().n_layers;
  for (const auto& slot : params.tensors()) {
    const bool grad = scope == GradScope::All ||
                      (scope == GradScope::Query && slot.role == ParamRole::Query);
    g.vars.push_back(grad ? ad::parameter(*slot.tensor) : ad::constant(*slot.tensor));
  }
  return g;
}

enum class KvMode { Causal, Frozen, Append };

struct KvPlan {
  KvMode mode = KvMode::Causal;
  const std::vector<Matrix>* frozen_keys = nullptr;
  const std::vector<Matrix>* frozen_values = nullptr;
  std::vector<Matrix>* sink_keys = nullptr;  // Causal: capture; Append: extend
  std::vector<Matrix>* sink_values = nullptr;
};

void check_tokens(const ModelConfig& c, std::span<const int> tokens) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= c.vocab_size) {
      throw std::invalid_argument("unknown token id " + std::to_string(tokens[i]) +
                                  " at position " + std::to_string(i));
    }
  }
}

ad::Var forward(const BoundGraph& g, const ModelConfig& c, std::span<const int> tokens,
                const std::vector<std::size_t>& positions, const KvPlan& plan,
                const AttentionTap* tap) {
  const std::size_t H = c.n_heads;
  const RopeConfig rope = c.rope();
  ad::Var x = ad::gather_rows(g.embedding(), std::vector<int>(tokens.begin(), tokens.end()));
  for (std::size_t l = 0; l < g.n_layers; ++l) {
    ad::AttentionObserver observer;
    if (tap) {
      observer = [tap, l](std::size_t h, std::size_t row, std::span<const double> w) {
        (*tap)(l, h, row, w);
      };
    }
    const ad::AttentionObserver* obs = tap ? &observer : nullptr;

    ad::Var xn = ad::rms_norm(x, g.layer(l, kAttnNorm), c.norm_eps);
    ad::Var q = ad::rope(ad::matmul(xn, g.layer(l, kWq)), positions, H, rope);
    ad::Var attn;
    if (plan.mode == KvMode::Frozen) {
      attn = ad::attention_frozen(q, (*plan.frozen_keys)[l], (*plan.frozen_values)[l], positions,
                                  H, obs);
    } else {
      ad::Var k = ad::rope(ad::matmul(xn, g.layer(l, kWk)), positions, H, rope);
      ad::Var v = ad::matmul(xn, g.layer(l, kWv));
      if (plan.mode == KvMode::Causal) {
        if (plan.sink_keys) {
          (*plan.sink_keys)[l] = k->value;
          (*plan.sink_values)[l] = v->value;
        }
        attn = ad::attention(q, k, v, positions, H, obs);
      } else {
        Matrix& ks = (*plan.sink_keys)[l];
        Matrix& vs = (*plan.sink_values)[l];
        for (std::size_t i = 0; i < k->value.rows(); ++i) {
          ks.append_row(k->value.row(i));
          vs.append_row(v->value.row(i));
        }
        attn = ad::attention_frozen(q, ks, vs, positions, H, obs);
      }
    }
    x = ad::add(x, ad::matmul(attn, g.layer(l, kWo)));
    ad::Var hn = ad::rms_norm(x, g.layer(l, kMlpNorm), c.norm_eps);
    x = ad::add(x, ad::matmul(ad::gelu(ad::matmul(hn, g.layer(l, kWup))), g.layer(l, kWdown)));
  }
  ad::Var y = ad::rms_norm(x, g.final_norm(), c.norm_eps);
  return ad::matmul(y, g.unembedding());
}

std::vector<std::size_t> iota_positions(std::size_t first, std::size_t count) {
  std::vector<std::size_t> p(count);
  std::iota(p.begin(), p.end(), first);
  return p;
}

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv_u64(std::uint64_t& h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xffU;
    h *= kFnvPrime;
  }
}

void check_span(const KVCache& cache, std::span<const int> tokens, Span span) {
  if (tokens.size() != cache.length() ||
      !std::equal(tokens.begin(), tokens.end(), cache.tokens().begin())) {
    throw std::invalid_argument("span: tokens do not match the cached context");
  }
  if (span.length < 1 || span.start < 1 || span.start + span.length > cache.length()) {
    throw std::out_of_range("span [" + std::to_string(span.start) + ", +" +
                            std::to_string(span.length) + ") outside context of length " +
                            std::to_string(cache.length()));
  }
}

struct SpanGraph {
  BoundGraph graph;
  ad::Var logits;
  ad::Var loss;
};

SpanGraph build_span(const ModelParams& params, const KVCache& cache, std::span<const int> tokens,
                     Span span, GradScope scope) {
  check_span(cache, tokens, span);
  SpanGraph sg{bind(params, scope), nullptr, nullptr};
  const std::size_t first = span.start - 1;
  KvPlan plan;
  plan.mode = KvMode::Frozen;
  plan.frozen_keys = &cache.key_layers();
  plan.frozen_values = &cache.value_layers();
  sg.logits = forward(sg.graph, params.config(), tokens.subspan(first, span.length),
                      iota_positions(first, span.length), plan, nullptr);
  sg.loss = ad::cross_entropy(
      sg.logits, std::vector<int>(tokens.begin() + static_cast<std::ptrdiff_t>(first + 1),
                                  tokens.begin() + static_cast<std::ptrdiff_t>(first + 1 + span.length)));
  return sg;
}

}  // namespace

KVCache::KVCache(std::vector<int> tokens, std::vector<Matrix> keys, std::vector<Matrix> values)
    : tokens_(std::move(tokens)), keys_(std::move(keys)), values_(std::move(values)) {
  fingerprint_ = compute_fingerprint();
}

std::uint64_t KVCache::compute_fingerprint() const {
  std::uint64_t h = kFnvOffset;
  fnv_u64(h, tokens_.size());
  for (int t : tokens_) fnv_u64(h, static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)));
  for (const auto* layers : {&keys_, &values_}) {
    for (const auto& m : *layers) {
      fnv_u64(h, m.rows());
      fnv_u64(h, m.cols());
      for (double v : m.values()) fnv_u64(h, std::bit_cast<std::uint64_t>(v));
    }
  }
  return h;
}

std::string fingerprint_hex(std::uint64_t fp) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fp));
  return buf;
}

KVCache prefill_and_cache(const ModelParams& params, std::span<const int> tokens,
                          const AttentionTap* tap) {
  const auto& c = params.config();
  if (tokens.empty()) throw std::invalid_argument("prefill: empty context");
  if (tokens.size() > c.max_context) {
    throw std::length_error("prefill: context of " + std::to_string(tokens.size()) +
                            " tokens exceeds max_context " + std::to_string(c.max_context));
  }
  check_tokens(c, tokens);
  const BoundGraph g = bind(params, GradScope::None);
  std::vector<Matrix> keys(c.n_layers), values(c.n_layers);
  KvPlan plan;
  plan.mode = KvMode::Causal;
  plan.sink_keys = &keys;
  plan.sink_values = &values;
  forward(g, c, tokens, iota_positions(0, tokens.size()), plan, tap);
  return KVCache(std::vector<int>(tokens.begin(), tokens.end()), std::move(keys), std::move(values));
}

Matrix full_forward_logits(const ModelParams& params, std::span<const int> tokens,
                           const AttentionTap* tap) {
  const auto& c = params.config();
  if (tokens.empty()) throw std::invalid_argument("forward: empty context");
  if (tokens.size() > c.max_context) throw std::length_error("forward: context exceeds max_context");
  check_tokens(c, tokens);
  const BoundGraph g = bind(params, GradScope::None);
  return forward(g, c, tokens, iota_positions(0, tokens.size()), KvPlan{}, tap)->value;
}

double full_forward_loss(const ModelParams& params, std::span<const int> tokens,
                         std::size_t first, std::size_t last) {
  if (first > last || last >= tokens.size()) throw std::out_of_range("full_forward_loss: range");
  const Matrix logits = full_forward_logits(params, tokens);
  double loss = 0.0;
  for (std::size_t p = first; p < last; ++p) {
    loss += log_sum_exp(logits.row(p)) - logits(p, static_cast<std::size_t>(tokens[p + 1]));
  }
  return loss;
}

SpanLoss span_forward_frozen_kv(const ModelParams& params, const KVCache& cache,
                                std::span<const int> tokens, Span span) {
  auto sg = build_span(params, cache, tokens, span, GradScope::None);
  return {sg.loss->value(0, 0), sg.logits->value};
}

QueryGradients grad_wq_span(const ModelParams& params, const KVCache& cache,
                            std::span<const int> tokens, Span span) {
  auto sg = build_span(params, cache, tokens, span, GradScope::Query);
  ad::backward(sg.loss);
  QueryGradients out;
  out.loss = sg.loss->value(0, 0);
  for (std::size_t l = 0; l < sg.graph.n_layers; ++l) out.w_q.push_back(sg.graph.layer(l, kWq)->grad);
  return out;
}

int sample_token(std::span<const double> logits, const SamplerConfig& cfg, Rng& rng) {
  if (logits.empty()) throw std::invalid_argument("sample_token: empty logits");
  if (cfg.temperature <= 0.0) {
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  std::vector<std::size_t> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  std::size_t keep = order.size();
  if (cfg.top_k > 0) keep = std::min(keep, cfg.top_k);
  std::vector<double> scaled(keep);
  for (std::size_t i = 0; i < keep; ++i) scaled[i] = logits[order[i]] / cfg.temperature;
  auto probs = softmax_row(scaled);
  if (cfg.top_p < 1.0) {
    double cum = 0.0;
    std::size_t cut = 0;
    while (cut < probs.size()) {
      cum += probs[cut++];
      if (cum >= cfg.top_p) break;
    }
    probs.resize(cut);
    const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
    for (double& p : probs) p /= total;
  }
  const double u = rng.uniform();
  double cum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    cum += probs[i];
    if (u < cum) return static_cast<int>(order[i]);
  }
  return static_cast<int>(order[probs.size() - 1]);
}

DecodeSession::DecodeSession(const ModelParams& params, const KVCache& cache,
                             const AttentionTap* tap)
    : params_(params),
      graph_(std::make_unique<BoundGraph>(bind(params, GradScope::None))),
      keys_(cache.key_layers()),
      values_(cache.value_layers()),
      tokens_(cache.tokens()),
      tap_(tap) {
  if (cache.n_layers() != params.config().n_layers) {
    throw std::invalid_argument("DecodeSession: cache/model layer count mismatch");
  }
  // The last prompt position's query is recomputed with the current parameters
  // against the cached rows (including its own).
  compute_logits(tokens_.back(), tokens_.size() - 1, /*append=*/false);
}

DecodeSession::~DecodeSession() = default;

void DecodeSession::compute_logits(int token, std::size_t position, bool append) {
  KvPlan plan;
  if (append) {
    plan.mode = KvMode::Append;
    plan.sink_keys = &keys_;
    plan.sink_values = &values_;
  } else {
    plan.mode = KvMode::Frozen;
    plan.frozen_keys = &keys_;
    plan.frozen_values = &values_;
  }
  const int tok[1] = {token};
  auto logits = forward(*graph_, params_.config(), tok, {position}, plan, tap_);
  auto row = logits->value.row(0);
  next_logits_.assign(row.begin(), row.end());
}

void DecodeSession::feed(int token) {
  const auto& c = params_.config();
  if (tokens_.size() + 1 > c.max_context) {
    throw std::length_error("decode: exceeding max_context " + std::to_string(c.max_context));
  }
  const int tok[1] = {token};
  check_tokens(c, tok);
  tokens_.push_back(token);
  compute_logits(token, tokens_.size() - 1, /*append=*/true);
}

void DecodeSession::feed(std::span<const int> tokens) {
  for (int t : tokens) feed(t);
}

int DecodeSession::step(const SamplerConfig& cfg, Rng& rng, double* log_prob) {
  const int tok = sample_token(next_logits_, cfg, rng);
  if (log_prob) {
    *log_prob += next_logits_[static_cast<std::size_t>(tok)] - log_sum_exp(next_logits_);
  }
  feed(tok);
  return tok;
}

DecodeResult decode(const ModelParams& params, const KVCache& cache, std::size_t prompt_len,
                    std::size_t n_tokens, const SamplerConfig& sampler) {
  if (prompt_len != cache.length()) throw std::invalid_argument("decode: prompt_len != cache length");
  if (cache.length() + n_tokens > params.config().max_context) {
    throw std::length_error("decode: prompt plus generation exceeds max_context");
  }
  DecodeResult out;
  if (n_tokens == 0) return out;
  DecodeSession session(params, cache);
  Rng rng(sampler.seed);
  for (std::size_t i = 0; i < n_tokens; ++i) out.tokens.push_back(session.step(sampler, rng, &out.log_prob));
  return out;
}

TrainingDiverged::TrainingDiverged(std::size_t s, double l)
    : std::runtime_error("training diverged at step " + std::to_string(s) +
                         " (loss=" + std::to_string(l) + ")"),
      step(s),
      loss(l) {}

TrainResult train_base_model(const ModelConfig& config,
                             const std::vector<std::vector<int>>& corpus,
                             const TrainConfig& train) {
  if (corpus.empty()) throw std::invalid_argument("train_base_model: empty corpus");
  for (const auto& doc : corpus) {
    if (doc.size() < 2) throw std::invalid_argument("train_base_model: document shorter than 2 tokens");
    check_tokens(config, doc);
  }
  if (train.seq_len < 1 || train.batch < 1) throw std::invalid_argument("train_base_model: seq_len/batch");
  TrainResult result{init_params(config, train.seed, train.init_std), {}};
  auto slots = result.params.tensors();
  std::vector<Matrix*> ptrs;
  for (auto& s : slots) ptrs.push_back(s.tensor);
  Optimizer opt(train.optimizer, ptrs);
  Rng rng = Rng(train.seed).fork(1);

  for (std::size_t step = 0; step < train.steps; ++step) {
    std::vector<Matrix> grads;
    for (auto* p : ptrs) grads.emplace_back(p->rows(), p->cols());
    double step_loss = 0.0;
    for (std::size_t b = 0; b < train.batch; ++b) {
      const auto& doc = corpus[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(corpus.size()) - 1))];
      const std::size_t window = std::min(doc.size(), std::min(train.seq_len + 1, config.max_context));
      const std::size_t start = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(doc.size() - window)));
      std::span<const int> w(doc.data() + start, window);
      const BoundGraph g = bind(result.params, GradScope::All);
      auto logits = forward(g, config, w.first(window - 1), iota_positions(0, window - 1), KvPlan{},
                            nullptr);
      auto loss = ad::scale(ad::cross_entropy(logits, std::vector<int>(w.begin() + 1, w.end())),
                            1.0 / static_cast<double>((window - 1) * train.batch));
      step_loss += loss->value(0, 0);
      if (!std::isfinite(step_loss)) throw TrainingDiverged(step, step_loss);
      ad::backward(loss);
      for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += g.vars[i]->grad;
    }
    result.losses.push_back(step_loss);
    opt.step(grads);
  }
  return result;
}

}  // namespace qttt
