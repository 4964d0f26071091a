#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "amess/autograd.hpp"

namespace amess {

/// Seeded random stream. Gaussian draws use Box-Muller over mt19937_64 so
/// that sequences are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1).
  double uniform();
  double normal();
  std::uint64_t next() { return engine_(); }
  int below(int n);

  /// Child stream derived from this seed and a tag; parent state untouched.
  static Rng derive(std::uint64_t seed, std::uint64_t tag);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// 64-bit FNV-1a, used for content hashing and mock-encoder seeding.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t mix64(std::uint64_t x);

struct NamedParameter {
  std::string name;
  ag::Var var;
  bool decay = true;  // subject to decoupled weight decay
};

/// Owns every learnable tensor of a model in creation order.
class ParameterStore {
 public:
  ag::Var create(const std::string& name, Matrix init, bool decay = true);

  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  const ag::Var& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t scalar_count() const;

  void zero_grad();

  using Snapshot = std::vector<Matrix>;
  Snapshot snapshot() const;
  void restore(const Snapshot& snap);

 private:
  std::vector<NamedParameter> params_;
  std::map<std::string, std::size_t> index_;
};

/// Xavier-uniform initialised (in x out) weight, optional zero bias.
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, int in, int out, Rng& rng, bool bias = true);

  ag::Var forward(const ag::Var& x) const;

  /// Identity weight (requires in == out) and zero bias.
  void set_identity();
  void set_zero();

  int in_features() const { return static_cast<int>(weight_.rows()); }
  int out_features() const { return static_cast<int>(weight_.cols()); }
  ag::Var& weight() { return weight_; }
  ag::Var& bias() { return bias_; }

 private:
  ag::Var weight_;
  ag::Var bias_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, int dim, double eps);

  ag::Var forward(const ag::Var& x) const;

 private:
  ag::Var gamma_;
  ag::Var beta_;
  double eps_ = 1e-5;
};

/// Two-layer position-wise map: down(gelu(up(x))).
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterStore& store, const std::string& name, int dim, int hidden, Rng& rng);

  ag::Var forward(const ag::Var& x) const;

  /// Makes the map identically zero by zeroing the output layer.
  void freeze_to_zero() { down_.set_zero(); }

  Linear& up() { return up_; }
  Linear& down() { return down_; }

 private:
  Linear up_;
  Linear down_;
};

/// Output of scaled dot-product attention.
struct Attention {
  ag::Var context;               // (queries x dim)
  std::vector<Matrix> weights;   // one (queries x keys) matrix per head
};

/// Query/key/value projections and multi-head scaled dot-product attention.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& store, const std::string& name, int dim, int heads, Rng& rng);

  /// softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated.
  Attention attend(const ag::Var& query, const ag::Var& key_value, const Mask& key_mask = {}) const;

  Linear& query() { return query_; }
  Linear& key() { return key_; }
  Linear& value() { return value_; }
  int heads() const { return heads_; }
  int dim() const { return query_.out_features(); }

  void set_identity_projections();

 private:
  Linear query_;
  Linear key_;
  Linear value_;
  int heads_ = 1;
};

/// Attention plus the feedforward map that follows it.
class CrossAttentionBlock {
 public:
  CrossAttentionBlock() = default;
  CrossAttentionBlock(ParameterStore& store, const std::string& name, int dim, int heads, int ff_hidden,
                      Rng& rng);

  Attention attend(const ag::Var& query, const ag::Var& key_value, const Mask& key_mask = {}) const {
    return attention_.attend(query, key_value, key_mask);
  }

  /// context + FF(context), the block's standard output path.
  Attention forward(const ag::Var& query, const ag::Var& key_value, const Mask& key_mask = {}) const;

  MultiHeadAttention& attention() { return attention_; }
  FeedForward& feedforward() { return ff_; }
  const FeedForward& feedforward() const { return ff_; }
  int dim() const { return attention_.dim(); }

  void set_identity_projections() { attention_.set_identity_projections(); }

 private:
  MultiHeadAttention attention_;
  FeedForward ff_;
};

/// Bernoulli keep-mask scaled by 1/(1-rate); all ones when rate == 0.
Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng);

}  // namespace amess
