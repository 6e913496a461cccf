#pragma once

// Forward passes over ModelParams: full causal forward, one-shot prefill into
// an immutable KV cache, span next-token loss against that frozen cache (with
// gradients for the query projections only), autoregressive decoding over a
// private copy of the cache, and full-parameter base-model training.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <span>
#include <string>
#include <vector>

#include "qttt/model.hpp"
#include "qttt/numeric.hpp"
#include "qttt/optimizer.hpp"

namespace qttt {

/// Attention weights for (layer, head, query row) over keys [0, position].
using AttentionTap = std::function<void(std::size_t layer, std::size_t head, std::size_t row,
                                        std::span<const double> weights)>;

class KVCache {
 public:
  std::size_t length() const { return tokens_.size(); }
  std::size_t n_layers() const { return keys_.size(); }
  /// T x d per layer, post-RoPE; head h occupies columns [h*d_k, (h+1)*d_k).
  const Matrix& keys(std::size_t layer) const { return keys_.at(layer); }
  const Matrix& values(std::size_t layer) const { return values_.at(layer); }
  const std::vector<Matrix>& key_layers() const { return keys_; }
  const std::vector<Matrix>& value_layers() const { return values_; }
  const std::vector<int>& tokens() const { return tokens_; }

  /// Content hash taken at construction.
  std::uint64_t fingerprint() const { return fingerprint_; }
  /// Re-hashes the current contents (FNV-1a over tokens, keys, values).
  std::uint64_t compute_fingerprint() const;

 private:
  friend KVCache prefill_and_cache(const ModelParams&, std::span<const int>, const AttentionTap*);
  KVCache(std::vector<int> tokens, std::vector<Matrix> keys, std::vector<Matrix> values);

  std::vector<int> tokens_;
  std::vector<Matrix> keys_;
  std::vector<Matrix> values_;
  std::uint64_t fingerprint_ = 0;
};

std::string fingerprint_hex(std::uint64_t fp);

/// Single causal forward over `tokens`; caches every layer's K/V.
KVCache prefill_and_cache(const ModelParams& params, std::span<const int> tokens,
                          const AttentionTap* tap = nullptr);

/// Logits (T x vocab) of a plain causal forward with no cache involved.
Matrix full_forward_logits(const ModelParams& params, std::span<const int> tokens,
                           const AttentionTap* tap = nullptr);

/// Σ over positions p in [first, last) of -log p(tokens[p+1] | tokens[..p]) from a full forward.
double full_forward_loss(const ModelParams& params, std::span<const int> tokens,
                         std::size_t first, std::size_t last);

/// Contiguous context slice [start, start + length) in 1-based positions; it
/// predicts tokens start+1 .. start+length. Valid when 1 <= start and
/// start + length <= T.
struct Span {
  std::size_t start = 1;
  std::size_t length = 1;
  bool operator==(const Span&) const = default;
};

struct SpanLoss {
  double loss = 0.0;  // summed next-token negative log-likelihood
  Matrix logits;      // length x vocab
};

/// Span positions recompute their queries (and hidden states) from `params`
/// but attend to the cached K/V rows [0, p], never refreshed.
SpanLoss span_forward_frozen_kv(const ModelParams& params, const KVCache& cache,
                                std::span<const int> tokens, Span span);

struct QueryGradients {
  double loss = 0.0;
  std::vector<Matrix> w_q;  // one per layer, same shape as W_Q
};

/// Reverse-mode gradient of the span loss w.r.t. every layer's W_Q. Cached K/V
/// and all other parameters are constants; no other gradient is allocated.
QueryGradients grad_wq_span(const ModelParams& params, const KVCache& cache,
                            std::span<const int> tokens, Span span);

struct SamplerConfig {
  double temperature = 0.0;  // 0 => greedy (lowest index wins ties)
  std::size_t top_k = 0;     // 0 => unrestricted
  double top_p = 1.0;
  std::uint64_t seed = 0;
};

int sample_token(std::span<const double> logits, const SamplerConfig& cfg, Rng& rng);

namespace detail {
struct BoundGraph;
}

/// Autoregressive state over a private copy of a prefill cache. New tokens get
/// K/V computed with the current parameters and appended to the copy.
class DecodeSession {
 public:
  /// `tap` observes the query that produces the first next_logits().
  DecodeSession(const ModelParams& params, const KVCache& cache,
                const AttentionTap* tap = nullptr);
  ~DecodeSession();
  DecodeSession(const DecodeSession&) = delete;
  DecodeSession& operator=(const DecodeSession&) = delete;

  /// Logits predicting the next token.
  std::span<const double> next_logits() const { return next_logits_; }
  /// Total attended length (prompt plus appended tokens).
  std::size_t length() const { return tokens_.size(); }
  const std::vector<int>& tokens() const { return tokens_; }

  /// Observes the attention of every query computed from now on (one per feed).
  void set_tap(const AttentionTap* tap) { tap_ = tap; }

  /// Appends `token`, extends the private cache and refreshes next_logits().
  void feed(int token);
  void feed(std::span<const int> tokens);

  /// Samples, feeds and returns a token; `log_prob` accumulates log p(token).
  int step(const SamplerConfig& cfg, Rng& rng, double* log_prob = nullptr);

 private:
  void compute_logits(int token, std::size_t position, bool append);

  const ModelParams& params_;
  std::unique_ptr<detail::BoundGraph> graph_;
  std::vector<Matrix> keys_;
  std::vector<Matrix> values_;
  std::vector<int> tokens_;
  std::vector<double> next_logits_;
  const AttentionTap* tap_ = nullptr;
};

struct DecodeResult {
  std::vector<int> tokens;
  double log_prob = 0.0;
};

/// Generates `n_tokens` after the cached prompt. `prompt_len` must equal the
/// cache length; the cache itself is never modified.
DecodeResult decode(const ModelParams& params, const KVCache& cache, std::size_t prompt_len,
                    std::size_t n_tokens, const SamplerConfig& sampler);

struct TrainConfig {
  std::size_t steps = 500;
  std::size_t seq_len = 128;
  std::size_t batch = 1;
  OptimizerConfig optimizer{OptimizerKind::AdamW, 3e-3, 0.9, 0.99, 1e-8, 0.01, 1.0};
  std::uint64_t seed = 0;
  double init_std = 0.02;
};

struct TrainResult {
  ModelParams params;
  std::vector<double> losses;  // mean per-token loss at each step, before the update
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t step, double loss);
  std::size_t step;
  double loss;
};

/// Full-parameter next-token training on random windows of the corpus.
TrainResult train_base_model(const ModelConfig& config,
                             const std::vector<std::vector<int>>& corpus,
                             const TrainConfig& train);

}  // namespace qttt
