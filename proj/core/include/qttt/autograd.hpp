#pragma once

// Matrix-granularity reverse-mode differentiation. Each op computes its value
// eagerly and, when any input requires a gradient, records a closure that
// pushes the output gradient back into its inputs. Nodes that do not require
// a gradient never allocate one, so frozen tensors cost nothing in backward.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "qttt/numeric.hpp"
#include "qttt/rope.hpp"

namespace qttt::ad {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
};

using Var = std::shared_ptr<Node>;

Var constant(Matrix value);
Var parameter(Matrix value);

/// Seeds d(root)/d(root) = 1 and propagates. `root` must be 1x1.
void backward(const Var& root);

/// Called once per (query row, head) during the forward pass with that row's
/// attention weights over keys [0, position].
using AttentionObserver =
    std::function<void(std::size_t head, std::size_t row, std::span<const double> weights)>;

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// x_i / sqrt(mean(x_i^2) + eps) * gain, per row; gain is 1 x d.
Var rms_norm(const Var& x, const Var& gain, double eps = 1e-5);
/// tanh-approximated GELU.
Var gelu(const Var& x);
/// Rotates every head slice of row i by positions[i].
Var rope(const Var& x, std::vector<std::size_t> positions, std::size_t n_heads,
         const RopeConfig& cfg);
Var gather_rows(const Var& table, std::vector<int> ids);

/// Multi-head softmax attention. Query row i attends to key rows
/// [0, positions[i]] (causal), scaled by 1/sqrt(head_dim).
Var attention(const Var& q, const Var& k, const Var& v, std::vector<std::size_t> positions,
              std::size_t n_heads, const AttentionObserver* observer = nullptr);

/// Same as attention() with keys/values held as constants by reference. The
/// referenced matrices must outlive any backward() through the result.
Var attention_frozen(const Var& q, const Matrix& k, const Matrix& v,
                     std::vector<std::size_t> positions, std::size_t n_heads,
                     const AttentionObserver* observer = nullptr);

/// Σ_i [lse(logits_i) - logits_i[targets_i]], a 1x1 result.
Var cross_entropy(const Var& logits, std::vector<int> targets);

}  // namespace qttt::ad
