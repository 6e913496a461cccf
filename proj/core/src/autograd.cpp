#include "qttt/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace qttt::ad {

namespace {

Var make_node(Matrix value, std::vector<Var> inputs) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || in->requires_grad;
  if (n->requires_grad) n->inputs = std::move(inputs);
  return n;
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

Var parameter(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

void backward(const Var& root) {
  if (root->value.rows() != 1 || root->value.cols() != 1) {
    throw std::invalid_argument("backward: root must be a scalar");
  }
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->grad = Matrix(n->value.rows(), n->value.cols());
  root->grad(0, 0) = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

Var matmul(const Var& a, const Var& b) {
  auto out = make_node(qttt::matmul(a->value, b->value), {a, b});
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      Node& a = *self.inputs[0];
      Node& b = *self.inputs[1];
      if (a.requires_grad) a.grad += matmul_bt(self.grad, b.value);
      if (b.requires_grad) b.grad += matmul_at(a.value, self.grad);
    };
  }
  return out;
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a->value, b->value, "add");
  auto out = make_node(a->value + b->value, {a, b});
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      for (auto& in : self.inputs)
        if (in->requires_grad) in->grad += self.grad;
    };
  }
  return out;
}

Var scale(const Var& a, double s) {
  Matrix v = a->value;
  v *= s;
  auto out = make_node(std::move(v), {a});
  if (out->requires_grad) {
    out->backward = [s](Node& self) {
      Matrix g = self.grad;
      g *= s;
      self.inputs[0]->grad += g;
    };
  }
  return out;
}

Var rms_norm(const Var& x, const Var& gain, double eps) {
  const Matrix& xv = x->value;
  const Matrix& gv = gain->value;
  if (gv.rows() != 1 || gv.cols() != xv.cols()) throw std::invalid_argument("rms_norm: gain shape");
  const std::size_t d = xv.cols();
  Matrix y(xv.rows(), d);
  std::vector<double> inv_rms(xv.rows());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    auto row = xv.row(i);
    const double ms = dot(row, row) / static_cast<double>(d);
    inv_rms[i] = 1.0 / std::sqrt(ms + eps);
    for (std::size_t c = 0; c < d; ++c) y(i, c) = row[c] * inv_rms[i] * gv(0, c);
  }
  auto out = make_node(std::move(y), {x, gain});
  if (out->requires_grad) {
    out->backward = [inv_rms = std::move(inv_rms)](Node& self) {
      Node& x = *self.inputs[0];
      Node& g = *self.inputs[1];
      const std::size_t d = x.value.cols();
      for (std::size_t i = 0; i < x.value.rows(); ++i) {
        auto xr = x.value.row(i);
        auto dy = self.grad.row(i);
        const double r = inv_rms[i];
        if (g.requires_grad) {
          for (std::size_t c = 0; c < d; ++c) g.grad(0, c) += dy[c] * xr[c] * r;
        }
        if (x.requires_grad) {
          double s = 0.0;
          for (std::size_t c = 0; c < d; ++c) s += dy[c] * g.value(0, c) * xr[c];
          const double coef = s * r * r * r / static_cast<double>(d);
          for (std::size_t c = 0; c < d; ++c) {
            x.grad(i, c) += dy[c] * g.value(0, c) * r - xr[c] * coef;
          }
        }
      }
    };
  }
  return out;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(const Var& x) {
  Matrix y = x->value;
  for (double& v : y.values()) {
    const double u = kGeluC * (v + kGeluA * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  auto out = make_node(std::move(y), {x});
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      Node& x = *self.inputs[0];
      auto xv = x.value.values();
      auto dy = self.grad.values();
      auto dx = x.grad.values();
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const double v = xv[i];
        const double u = kGeluC * (v + kGeluA * v * v * v);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        dx[i] += dy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
      }
    };
  }
  return out;
}

Var rope(const Var& x, std::vector<std::size_t> positions, std::size_t n_heads,
         const RopeConfig& cfg) {
  const Matrix& xv = x->value;
  if (positions.size() != xv.rows()) throw std::invalid_argument("rope: positions/rows mismatch");
  if (n_heads == 0 || xv.cols() % n_heads != 0) throw std::invalid_argument("rope: head split");
  const std::size_t hd = xv.cols() / n_heads;
  Matrix y = xv;
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t h = 0; h < n_heads; ++h)
      rope_rotate_inplace(y.row(i).subspan(h * hd, hd), positions[i], cfg);
  auto out = make_node(std::move(y), {x});
  if (out->requires_grad) {
    out->backward = [positions = std::move(positions), n_heads, hd, cfg](Node& self) {
      Matrix g = self.grad;
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t h = 0; h < n_heads; ++h)
          rope_rotate_inplace(g.row(i).subspan(h * hd, hd), positions[i], cfg, /*inverse=*/true);
      self.inputs[0]->grad += g;
    };
  }
  return out;
}

Var gather_rows(const Var& table, std::vector<int> ids) {
  const Matrix& t = table->value;
  Matrix y(ids.size(), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= t.rows()) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " out of range");
    }
    auto src = t.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), y.row(i).begin());
  }
  auto out = make_node(std::move(y), {table});
  if (out->requires_grad) {
    out->backward = [ids = std::move(ids)](Node& self) {
      Matrix& g = self.inputs[0]->grad;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        auto dst = g.row(static_cast<std::size_t>(ids[i]));
        auto src = self.grad.row(i);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
      }
    };
  }
  return out;
}

namespace {

struct AttentionShape {
  std::size_t n_heads;
  std::size_t head_dim;
  double scale;
};

AttentionShape check_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                               const std::vector<std::size_t>& positions, std::size_t n_heads) {
  if (n_heads == 0 || q.cols() % n_heads != 0) throw std::invalid_argument("attention: head split");
  if (k.cols() != q.cols() || v.cols() != q.cols()) {
    throw std::invalid_argument("attention: q/k/v width mismatch");
  }
  if (k.rows() != v.rows()) throw std::invalid_argument("attention: K/V row mismatch");
  if (positions.size() != q.rows()) throw std::invalid_argument("attention: positions/rows");
  for (std::size_t p : positions) {
    if (p >= k.rows()) {
      throw std::out_of_range("attention: position " + std::to_string(p) + " beyond " +
                              std::to_string(k.rows()) + " keys");
    }
  }
  const std::size_t hd = q.cols() / n_heads;
  return {n_heads, hd, 1.0 / std::sqrt(static_cast<double>(hd))};
}

// Logits for one (row, head) over keys [0, pos] -> softmax weights in place.
void head_weights(const Matrix& q, const Matrix& k, std::size_t row, std::size_t pos,
                  std::size_t off, const AttentionShape& s, std::vector<double>& w) {
  w.resize(pos + 1);
  auto qh = q.row(row).subspan(off, s.head_dim);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j <= pos; ++j) {
    w[j] = dot(qh, k.row(j).subspan(off, s.head_dim)) * s.scale;
    mx = std::max(mx, w[j]);
  }
  double sum = 0.0;
  for (double& x : w) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : w) x /= sum;
}

Matrix attention_values(const Matrix& q, const Matrix& k, const Matrix& v,
                        const std::vector<std::size_t>& positions, const AttentionShape& s,
                        const AttentionObserver* observer) {
  Matrix out(q.rows(), q.cols());
  std::vector<double> w;
  for (std::size_t i = 0; i < q.rows(); ++i) {
    for (std::size_t h = 0; h < s.n_heads; ++h) {
      const std::size_t off = h * s.head_dim;
      head_weights(q, k, i, positions[i], off, s, w);
      if (observer) (*observer)(h, i, w);
      auto o = out.row(i).subspan(off, s.head_dim);
      for (std::size_t j = 0; j < w.size(); ++j) {
        auto vj = v.row(j).subspan(off, s.head_dim);
        for (std::size_t c = 0; c < s.head_dim; ++c) o[c] += w[j] * vj[c];
      }
    }
  }
  return out;
}

// Weights are recomputed rather than stored so long contexts stay O(T d) in memory.
void attention_backward(const Matrix& dout, const Matrix& q, const Matrix& k, const Matrix& v,
                        const std::vector<std::size_t>& positions, const AttentionShape& s,
                        Matrix* dq, Matrix* dk, Matrix* dv) {
  std::vector<double> w;
  std::vector<double> dz;
  for (std::size_t i = 0; i < q.rows(); ++i) {
    for (std::size_t h = 0; h < s.n_heads; ++h) {
      const std::size_t off = h * s.head_dim;
      const std::size_t pos = positions[i];
      head_weights(q, k, i, pos, off, s, w);
      auto go = dout.row(i).subspan(off, s.head_dim);
      dz.assign(pos + 1, 0.0);
      double mean = 0.0;
      for (std::size_t j = 0; j <= pos; ++j) {
        dz[j] = dot(go, v.row(j).subspan(off, s.head_dim));
        mean += w[j] * dz[j];
      }
      for (std::size_t j = 0; j <= pos; ++j) dz[j] = w[j] * (dz[j] - mean) * s.scale;
      if (dq) {
        auto g = dq->row(i).subspan(off, s.head_dim);
        for (std::size_t j = 0; j <= pos; ++j) {
          auto kj = k.row(j).subspan(off, s.head_dim);
          for (std::size_t c = 0; c < s.head_dim; ++c) g[c] += dz[j] * kj[c];
        }
      }
      if (dk) {
        auto qh = q.row(i).subspan(off, s.head_dim);
        for (std::size_t j = 0; j <= pos; ++j) {
          auto g = dk->row(j).subspan(off, s.head_dim);
          for (std::size_t c = 0; c < s.head_dim; ++c) g[c] += dz[j] * qh[c];
        }
      }
      if (dv) {
        for (std::size_t j = 0; j <= pos; ++j) {
          auto g = dv->row(j).subspan(off, s.head_dim);
          for (std::size_t c = 0; c < s.head_dim; ++c) g[c] += w[j] * go[c];
        }
      }
    }
  }
}

}  // namespace

Var attention(const Var& q, const Var& k, const Var& v, std::vector<std::size_t> positions,
              std::size_t n_heads, const AttentionObserver* observer) {
  const auto shape = check_attention(q->value, k->value, v->value, positions, n_heads);
  auto out = make_node(attention_values(q->value, k->value, v->value, positions, shape, observer),
                       {q, k, v});
  if (out->requires_grad) {
    out->backward = [positions = std::move(positions), shape](Node& self) {
      Node& q = *self.inputs[0];
      Node& k = *self.inputs[1];
      Node& v = *self.inputs[2];
      attention_backward(self.grad, q.value, k.value, v.value, positions, shape,
                         q.requires_grad ? &q.grad : nullptr, k.requires_grad ? &k.grad : nullptr,
                         v.requires_grad ? &v.grad : nullptr);
    };
  }
  return out;
}

Var attention_frozen(const Var& q, const Matrix& k, const Matrix& v,
                     std::vector<std::size_t> positions, std::size_t n_heads,
                     const AttentionObserver* observer) {
  const auto shape = check_attention(q->value, k, v, positions, n_heads);
  auto out = make_node(attention_values(q->value, k, v, positions, shape, observer), {q});
  if (out->requires_grad) {
    out->backward = [positions = std::move(positions), shape, kp = &k, vp = &v](Node& self) {
      Node& q = *self.inputs[0];
      attention_backward(self.grad, q.value, *kp, *vp, positions, shape, &q.grad, nullptr,
                         nullptr);
    };
  }
  return out;
}

Var cross_entropy(const Var& logits, std::vector<int> targets) {
  const Matrix& z = logits->value;
  if (targets.size() != z.rows()) throw std::invalid_argument("cross_entropy: targets/rows");
  double total = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= z.cols()) {
      throw std::out_of_range("cross_entropy: target out of range");
    }
    total += log_sum_exp(z.row(i)) - z(i, static_cast<std::size_t>(targets[i]));
  }
  auto out = make_node(Matrix(1, 1, total), {logits});
  if (out->requires_grad) {
    out->backward = [targets = std::move(targets)](Node& self) {
      Node& in = *self.inputs[0];
      const double g = self.grad(0, 0);
      for (std::size_t i = 0; i < in.value.rows(); ++i) {
        auto p = softmax_row(in.value.row(i));
        auto dst = in.grad.row(i);
        for (std::size_t c = 0; c < p.size(); ++c) dst[c] += g * p[c];
        dst[static_cast<std::size_t>(targets[i])] -= g;
      }
    };
  }
  return out;
}

}  // namespace qttt::ad
