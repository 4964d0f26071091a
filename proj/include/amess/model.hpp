#pragma once

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "amess/a_me.hpp"
#include "amess/autograd.hpp"
#include "amess/encoders.hpp"
#include "amess/nn.hpp"

namespace amess {

/// Post-norm transformer encoder layer (self-attention then feedforward).
class EncoderLayer {
 public:
  EncoderLayer(ParameterStore& store, const std::string& name, int dim, int heads, int ff_hidden, double ln_eps,
               Rng& rng);

  ag::Var forward(const ag::Var& x, const Mask& mask, double dropout_rate, Rng* rng) const;

  MultiHeadAttention& attention() { return attention_; }
  FeedForward& feedforward() { return ff_; }

 private:
  MultiHeadAttention attention_;
  LayerNorm attention_norm_;
  FeedForward ff_;
  LayerNorm output_norm_;
};

enum class EncoderStackKind { Toy, External };

/// Shape-preserving stack applied to the fused sequence. The external kind
/// has the same layout but takes its initial weights from a checkpoint file.
class MultimodalEncoderStack {
 public:
  MultimodalEncoderStack(ParameterStore& store, const std::string& name, int depth, int dim, int heads,
                         int ff_hidden, double ln_eps, Rng& rng);

  ag::Var forward(const ag::Var& e_m, const Mask& mask, double dropout_rate = 0.0, Rng* rng = nullptr) const;

  int depth() const { return static_cast<int>(layers_.size()); }
  EncoderLayer& layer(int i) { return layers_.at(static_cast<std::size_t>(i)); }

 private:
  int dim_;
  std::vector<EncoderLayer> layers_;
};

enum class Pooling { Mean, Cls };

/// Pools the sequence to one vector and passes it through a two-layer MLP.
class TokenProjector {
 public:
  TokenProjector(ParameterStore& store, const std::string& name, int dim, Pooling pooling, Rng& rng);

  ag::Var forward(const ag::Var& e_f, const Mask& mask = {}) const;

  Linear& first() { return first_; }
  Linear& second() { return second_; }

 private:
  Linear first_;
  Linear second_;
  Pooling pooling_;
};

/// LayerNorm over [CLS row of E_f ; T_f] followed by a linear map to logits.
class ClassifierHead {
 public:
  ClassifierHead(ParameterStore& store, const std::string& name, int dim, int label_count, double ln_eps, Rng& rng);

  ag::Var forward(const ag::Var& e_f, const ag::Var& token) const;

  int label_count() const { return linear_.out_features(); }
  Linear& linear() { return linear_; }

 private:
  LayerNorm norm_;
  Linear linear_;
};

struct ModelConfig {
  AMeConfig a_me;
  int encoder_depth = 2;
  int encoder_ff_hidden = 128;
  EncoderStackKind encoder_kind = EncoderStackKind::Toy;
  std::string encoder_weights;  // checkpoint path for the external kind
  Pooling pooling = Pooling::Mean;
  int label_count = 2;
};

struct SampleOutput {
  ag::Var logits;    // (1 x L)
  ag::Var token;     // T_f (1 x d_t)
  ag::Var encoded;   // E_f (l_t x d_t)
  Mask mask;
};

/// The full classifier: A-ME, multimodal encoder, token projection, head.
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  SampleOutput forward(const ModalityEmbedding& text, const ModalityEmbedding& video,
                       const ModalityEmbedding& audio, Rng* dropout_rng = nullptr) const;

  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  const ModelConfig& config() const { return config_; }

  AMeModule& a_me() { return a_me_; }
  MultimodalEncoderStack& encoder() { return encoder_; }
  TokenProjector& projector() { return projector_; }
  ClassifierHead& head() { return head_; }

 private:
  ModelConfig config_;
  ParameterStore store_;
  Rng init_rng_;
  AMeModule a_me_;
  MultimodalEncoderStack encoder_;
  TokenProjector projector_;
  ClassifierHead head_;
};

/// Mean negative log-softmax probability of the true label.
ag::Var cross_entropy_loss(const ag::Var& logits, std::span<const int> labels);

/// l_tri + l_cls; throws on non-finite components.
ag::Var total_loss(const ag::Var& triplet, const ag::Var& classification);

// Checkpoint container, little-endian:
//   magic "AMESSCKP" | u32 version | u64 metadata length | metadata JSON
//   u32 tensor count | per tensor: u32 name length, name, u32 rows, u32 cols,
//   rows*cols float32 row-major.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json metadata;
  std::vector<std::pair<std::string, Matrix>> tensors;
};

Checkpoint make_checkpoint(const ParameterStore& store, nlohmann::json metadata);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Copies tensors into `store` by name. With a prefix only names starting
/// with it are copied. Throws on missing names or shape mismatches.
void apply_checkpoint(const Checkpoint& checkpoint, ParameterStore& store, const std::string& prefix = "");

}  // namespace amess
