#include "amess/nn.hpp"

#include <cmath>
#include <numbers>

#include "amess/error.hpp"

namespace amess {

double Rng::uniform() {
  // 53 random bits -> [0, 1)
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

int Rng::below(int n) {
  require(n > 0, "Rng::below: n must be positive");
  return static_cast<int>(engine_() % static_cast<std::uint64_t>(n));
}

Rng Rng::derive(std::uint64_t seed, std::uint64_t tag) { return Rng(mix64(seed ^ mix64(tag + 0x9e3779b97f4a7c15ULL))); }

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t basis) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t h = basis;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

ag::Var ParameterStore::create(const std::string& name, Matrix init, bool decay) {
  require(!contains(name), "duplicate parameter name: " + name);
  ag::Var v(std::move(init), true);
  index_[name] = params_.size();
  params_.push_back({name, v, decay});
  return v;
}

const ag::Var& ParameterStore::at(const std::string& name) const {
  auto it = index_.find(name);
  require(it != index_.end(), "unknown parameter: " + name);
  return params_[it->second].var;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.var.value().size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

ParameterStore::Snapshot ParameterStore::snapshot() const {
  Snapshot s;
  s.reserve(params_.size());
  for (const auto& p : params_) s.push_back(p.var.value());
  return s;
}

void ParameterStore::restore(const Snapshot& snap) {
  require(snap.size() == params_.size(), "snapshot does not match parameter store");
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].var.mutable_value() = snap[i];
}

Linear::Linear(ParameterStore& store, const std::string& name, int in, int out, Rng& rng, bool bias) {
  require(in > 0 && out > 0, "Linear: dimensions must be positive");
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Matrix w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = (2.0 * rng.uniform() - 1.0) * limit;
  weight_ = store.create(name + ".weight", std::move(w));
  if (bias) bias_ = store.create(name + ".bias", Matrix::Zero(1, out), false);
}

ag::Var Linear::forward(const ag::Var& x) const {
  ag::Var y = ag::matmul(x, weight_);
  return bias_.defined() ? ag::add_row(y, bias_) : y;
}

void Linear::set_identity() {
  require(weight_.rows() == weight_.cols(), "Linear::set_identity: weight is not square");
  weight_.mutable_value().setIdentity();
  if (bias_.defined()) bias_.mutable_value().setZero();
}

void Linear::set_zero() {
  weight_.mutable_value().setZero();
  if (bias_.defined()) bias_.mutable_value().setZero();
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, int dim, double eps)
    : gamma_(store.create(name + ".gamma", Matrix::Ones(1, dim), false)),
      beta_(store.create(name + ".beta", Matrix::Zero(1, dim), false)),
      eps_(eps) {}

ag::Var LayerNorm::forward(const ag::Var& x) const {
  return ag::add_row(ag::mul_row(ag::normalize_rows(x, eps_), gamma_), beta_);
}

FeedForward::FeedForward(ParameterStore& store, const std::string& name, int dim, int hidden, Rng& rng)
    : up_(store, name + ".up", dim, hidden, rng), down_(store, name + ".down", hidden, dim, rng) {}

ag::Var FeedForward::forward(const ag::Var& x) const { return down_.forward(ag::gelu(up_.forward(x))); }

MultiHeadAttention::MultiHeadAttention(ParameterStore& store, const std::string& name, int dim, int heads,
                                       Rng& rng)
    : query_(store, name + ".q", dim, dim, rng),
      key_(store, name + ".k", dim, dim, rng),
      value_(store, name + ".v", dim, dim, rng),
      heads_(heads) {
  require(heads > 0 && dim % heads == 0, "attention: dim must be divisible by head count");
}

Attention MultiHeadAttention::attend(const ag::Var& query, const ag::Var& key_value, const Mask& key_mask) const {
  const int d = dim();
  require(query.cols() == d && key_value.cols() == d,
          "attention: expected inputs of width " + std::to_string(d));
  require(key_value.rows() > 0, "attention: no keys");
  require(key_mask.empty() || static_cast<Eigen::Index>(key_mask.size()) == key_value.rows(),
          "attention: key mask length differs from key count");
  ag::Var q = query_.forward(query);
  ag::Var k = key_.forward(key_value);
  ag::Var v = value_.forward(key_value);

  const int head_dim = d / heads_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Attention out;
  std::vector<ag::Var> contexts;
  for (int h = 0; h < heads_; ++h) {
    ag::Var qh = heads_ == 1 ? q : ag::slice_cols(q, h * head_dim, head_dim);
    ag::Var kh = heads_ == 1 ? k : ag::slice_cols(k, h * head_dim, head_dim);
    ag::Var vh = heads_ == 1 ? v : ag::slice_cols(v, h * head_dim, head_dim);
    ag::Var p = ag::softmax_rows(ag::scale(ag::matmul(qh, kh, false, true), inv_sqrt), key_mask);
    out.weights.push_back(p.value());
    contexts.push_back(ag::matmul(p, vh));
  }
  out.context = heads_ == 1 ? contexts.front() : ag::concat_cols(contexts);
  return out;
}

void MultiHeadAttention::set_identity_projections() {
  query_.set_identity();
  key_.set_identity();
  value_.set_identity();
}

CrossAttentionBlock::CrossAttentionBlock(ParameterStore& store, const std::string& name, int dim, int heads,
                                         int ff_hidden, Rng& rng)
    : attention_(store, name + ".attn", dim, heads, rng), ff_(store, name + ".ff", dim, ff_hidden, rng) {}

Attention CrossAttentionBlock::forward(const ag::Var& query, const ag::Var& key_value,
                                       const Mask& key_mask) const {
  Attention a = attend(query, key_value, key_mask);
  a.context = ag::add(a.context, ff_.forward(a.context));
  return a;
}

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  require(rate >= 0.0 && rate < 1.0, "dropout rate must be in [0, 1)");
  Matrix m = Matrix::Ones(rows, cols);
  if (rate == 0.0) return m;
  const double keep_scale = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < rate ? 0.0 : keep_scale;
  return m;
}

}  // namespace amess
