#pragma once

// Decoder-only transformer parameters: pre-RMSNorm blocks, tanh-GELU MLP,
// untied embedding/unembedding, optional rotary phases on queries and keys.
// Row-vector convention throughout: q = x · W_Q.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "qttt/numeric.hpp"
#include "qttt/rope.hpp"
#include "qttt/vocab.hpp"

namespace qttt {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t mlp_ratio = 4;
  std::size_t vocab_size = kByteVocabSize;
  std::size_t max_context = 4096;
  bool rope_enabled = true;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t d_ff() const { return mlp_ratio * d_model; }
  RopeConfig rope() const { return {rope_enabled, rope_base}; }
  /// Throws std::invalid_argument when an invariant is broken.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

enum class ParamRole : std::uint8_t { Other = 0, Query = 1 };

struct LayerParams {
  Matrix attn_norm;  // 1 x d
  Matrix w_q;        // d x d
  Matrix w_k;        // d x d
  Matrix w_v;        // d x d
  Matrix w_o;        // d x d
  Matrix mlp_norm;   // 1 x d
  Matrix w_up;       // d x r·d
  Matrix w_down;     // r·d x d
};

template <typename M>
struct TensorSlot {
  std::string name;
  ParamRole role;
  M* tensor;
};

class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(ModelConfig config);  // zero-filled, correctly shaped

  const ModelConfig& config() const { return config_; }

  Matrix embedding;    // vocab x d
  std::vector<LayerParams> layers;
  Matrix final_norm;   // 1 x d
  Matrix unembedding;  // d x vocab

  /// Every tensor in declared (checkpoint) order with its partition role.
  /// Exactly the per-layer query projections carry ParamRole::Query.
  std::vector<TensorSlot<Matrix>> tensors();
  std::vector<TensorSlot<const Matrix>> tensors() const;

  std::size_t parameter_count() const;

  bool operator==(const ModelParams& other) const;

 private:
  ModelConfig config_;
};

/// Gaussian init (std `init_std`; output projections scaled by 1/sqrt(2L)), unit gains.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed, double init_std = 0.02);

// Checkpoint: little-endian; see docs/formats.md.
void save_checkpoint(const ModelParams& params, std::ostream& out);
ModelParams load_checkpoint(std::istream& in);
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_bytes(const ModelParams& params);

/// Raw little-endian bytes of one tensor's values.
std::string tensor_bytes(const Matrix& m);

}  // namespace qttt
