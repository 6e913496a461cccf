#include "qttt/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace qttt {

void ModelConfig::validate() const {
  if (n_layers == 0) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("ModelConfig: d_model must equal n_heads * head_dim");
  }
  if (head_dim() % 2 != 0) throw std::invalid_argument("ModelConfig: head_dim must be even");
  if (mlp_ratio < 1) throw std::invalid_argument("ModelConfig: mlp_ratio must be >= 1");
  if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be >= 2");
  if (max_context < 1) throw std::invalid_argument("ModelConfig: max_context must be >= 1");
}

ModelParams::ModelParams(ModelConfig config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  embedding = Matrix(config_.vocab_size, d);
  layers.resize(config_.n_layers);
  for (auto& l : layers) {
    l.attn_norm = Matrix(1, d, 1.0);
    l.w_q = Matrix(d, d);
    l.w_k = Matrix(d, d);
    l.w_v = Matrix(d, d);
    l.w_o = Matrix(d, d);
    l.mlp_norm = Matrix(1, d, 1.0);
    l.w_up = Matrix(d, config_.d_ff());
    l.w_down = Matrix(config_.d_ff(), d);
  }
  final_norm = Matrix(1, d, 1.0);
  unembedding = Matrix(d, config_.vocab_size);
}

namespace {

template <typename Self, typename M>
std::vector<TensorSlot<M>> collect(Self& self) {
  std::vector<TensorSlot<M>> out;
  out.push_back({"embedding", ParamRole::Other, &self.embedding});
  for (std::size_t l = 0; l < self.layers.size(); ++l) {
    auto& L = self.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "attn_norm", ParamRole::Other, &L.attn_norm});
    out.push_back({p + "w_q", ParamRole::Query, &L.w_q});
    out.push_back({p + "w_k", ParamRole::Other, &L.w_k});
    out.push_back({p + "w_v", ParamRole::Other, &L.w_v});
    out.push_back({p + "w_o", ParamRole::Other, &L.w_o});
    out.push_back({p + "mlp_norm", ParamRole::Other, &L.mlp_norm});
    out.push_back({p + "w_up", ParamRole::Other, &L.w_up});
    out.push_back({p + "w_down", ParamRole::Other, &L.w_down});
  }
  out.push_back({"final_norm", ParamRole::Other, &self.final_norm});
  out.push_back({"unembedding", ParamRole::Other, &self.unembedding});
  return out;
}

}  // namespace

std::vector<TensorSlot<Matrix>> ModelParams::tensors() { return collect<ModelParams, Matrix>(*this); }

std::vector<TensorSlot<const Matrix>> ModelParams::tensors() const {
  return collect<const ModelParams, const Matrix>(*this);
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.tensor->size();
  return n;
}

bool ModelParams::operator==(const ModelParams& other) const {
  if (!(config_ == other.config_)) return false;
  auto a = tensors();
  auto b = other.tensors();
  for (std::size_t i = 0; i < a.size(); ++i)
    if (tensor_bytes(*a[i].tensor) != tensor_bytes(*b[i].tensor)) return false;
  return true;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed, double init_std) {
  ModelParams p(config);
  Rng rng(seed);
  const double out_std = init_std / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  for (auto& slot : p.tensors()) {
    const bool is_gain = slot.tensor->rows() == 1 && slot.name.ends_with("norm");
    if (is_gain) continue;
    const bool is_out = slot.name.ends_with("w_o") || slot.name.ends_with("w_down");
    const double s = is_out ? out_std : init_std;
    for (double& v : slot.tensor->values()) v = rng.normal(0.0, s);
  }
  return p;
}

namespace {

constexpr char kMagic[8] = {'Q', 'T', 'T', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::ostream& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) {
    throw std::runtime_error("checkpoint: unexpected end of file");
  }
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
  return v;
}

void put_f64(std::ostream& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }
double get_f64(std::istream& in) { return std::bit_cast<double>(get_le<std::uint64_t>(in)); }

void put_u32(std::ostream& out, std::size_t v) {
  if (v > 0xffffffffULL) throw std::invalid_argument("checkpoint: field exceeds 32 bits");
  put_le(out, static_cast<std::uint32_t>(v));
}

}  // namespace

std::string tensor_bytes(const Matrix& m) {
  std::ostringstream out;
  for (double v : m.values()) put_f64(out, v);
  return out.str();
}

void save_checkpoint(const ModelParams& params, std::ostream& out) {
  const auto& c = params.config();
  out.write(kMagic, sizeof(kMagic));
  put_le(out, kVersion);
  put_u32(out, c.n_layers);
  put_u32(out, c.n_heads);
  put_u32(out, c.d_model);
  put_u32(out, c.mlp_ratio);
  put_u32(out, c.vocab_size);
  put_u32(out, c.max_context);
  put_le(out, static_cast<std::uint8_t>(c.rope_enabled ? 1 : 0));
  put_f64(out, c.rope_base);
  put_f64(out, c.norm_eps);
  const auto slots = params.tensors();
  put_u32(out, slots.size());
  for (const auto& s : slots) {
    put_u32(out, s.name.size());
    out.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
    put_le(out, static_cast<std::uint8_t>(s.role));
    put_le(out, static_cast<std::uint64_t>(s.tensor->rows()));
    put_le(out, static_cast<std::uint64_t>(s.tensor->cols()));
    for (double v : s.tensor->values()) put_f64(out, v);
  }
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

ModelParams load_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  if (const auto v = get_le<std::uint32_t>(in); v != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(v));
  }
  ModelConfig c;
  c.n_layers = get_le<std::uint32_t>(in);
  c.n_heads = get_le<std::uint32_t>(in);
  c.d_model = get_le<std::uint32_t>(in);
  c.mlp_ratio = get_le<std::uint32_t>(in);
  c.vocab_size = get_le<std::uint32_t>(in);
  c.max_context = get_le<std::uint32_t>(in);
  c.rope_enabled = get_le<std::uint8_t>(in) != 0;
  c.rope_base = get_f64(in);
  c.norm_eps = get_f64(in);
  ModelParams p(c);
  auto slots = p.tensors();
  if (get_le<std::uint32_t>(in) != slots.size()) throw std::runtime_error("checkpoint: tensor count");
  for (auto& s : slots) {
    const auto len = get_le<std::uint32_t>(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw std::runtime_error("checkpoint: truncated name");
    if (name != s.name) throw std::runtime_error("checkpoint: expected " + s.name + ", got " + name);
    if (get_le<std::uint8_t>(in) != static_cast<std::uint8_t>(s.role)) {
      throw std::runtime_error("checkpoint: role mismatch for " + name);
    }
    const auto rows = get_le<std::uint64_t>(in);
    const auto cols = get_le<std::uint64_t>(in);
    if (rows != s.tensor->rows() || cols != s.tensor->cols()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    }
    for (double& v : s.tensor->values()) v = get_f64(in);
  }
  return p;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string());
  save_checkpoint(params, out);
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  return load_checkpoint(in);
}

std::string checkpoint_bytes(const ModelParams& params) {
  std::ostringstream out(std::ios::binary);
  save_checkpoint(params, out);
  return out.str();
}

}  // namespace qttt
