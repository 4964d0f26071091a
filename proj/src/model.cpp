#include "amess/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "amess/error.hpp"

namespace amess {

EncoderLayer::EncoderLayer(ParameterStore& store, const std::string& name, int dim, int heads, int ff_hidden,
                           double ln_eps, Rng& rng)
    : attention_(store, name + ".attn", dim, heads, rng),
      attention_norm_(store, name + ".attn_norm", dim, ln_eps),
      ff_(store, name + ".ff", dim, ff_hidden, rng),
      output_norm_(store, name + ".out_norm", dim, ln_eps) {}

ag::Var EncoderLayer::forward(const ag::Var& x, const Mask& mask, double dropout_rate, Rng* rng) const {
  auto drop = [&](const ag::Var& v) {
    if (rng == nullptr || dropout_rate <= 0.0) return v;
    return ag::mul_const(v, dropout_mask(v.rows(), v.cols(), dropout_rate, *rng));
  };
  ag::Var attended = attention_.attend(x, x, mask).context;
  ag::Var h = attention_norm_.forward(ag::add(x, drop(attended)));
  return output_norm_.forward(ag::add(h, drop(ff_.forward(h))));
}

MultimodalEncoderStack::MultimodalEncoderStack(ParameterStore& store, const std::string& name, int depth, int dim,
                                               int heads, int ff_hidden, double ln_eps, Rng& rng)
    : dim_(dim) {
  require(depth >= 0, "encoder depth must be non-negative");
  layers_.reserve(static_cast<std::size_t>(depth));
  for (int i = 0; i < depth; ++i) {
    layers_.emplace_back(store, name + ".layer" + std::to_string(i), dim, heads, ff_hidden, ln_eps, rng);
  }
}

ag::Var MultimodalEncoderStack::forward(const ag::Var& e_m, const Mask& mask, double dropout_rate, Rng* rng) const {
  require(e_m.cols() == dim_, "multimodal encoder: expected width " + std::to_string(dim_) + ", got " +
                                  std::to_string(e_m.cols()));
  require(mask.empty() || static_cast<Eigen::Index>(mask.size()) == e_m.rows(),
          "multimodal encoder: mask length mismatch");
  ag::Var x = e_m;
  for (const auto& layer : layers_) x = layer.forward(x, mask, dropout_rate, rng);
  return x;
}

TokenProjector::TokenProjector(ParameterStore& store, const std::string& name, int dim, Pooling pooling, Rng& rng)
    : first_(store, name + ".mlp0", dim, dim, rng), second_(store, name + ".mlp1", dim, dim, rng), pooling_(pooling) {}

ag::Var TokenProjector::forward(const ag::Var& e_f, const Mask& mask) const {
  const int first_row = 0;
  ag::Var pooled = pooling_ == Pooling::Mean ? ag::mean_rows(e_f, mask)
                                             : ag::gather_rows(e_f, std::span<const int>(&first_row, 1));
  return second_.forward(ag::gelu(first_.forward(pooled)));
}

ClassifierHead::ClassifierHead(ParameterStore& store, const std::string& name, int dim, int label_count,
                               double ln_eps, Rng& rng)
    : norm_(store, name + ".norm", 2 * dim, ln_eps), linear_(store, name + ".linear", 2 * dim, label_count, rng) {}

ag::Var ClassifierHead::forward(const ag::Var& e_f, const ag::Var& token) const {
  require(token.rows() == 1 && token.cols() * 2 == linear_.in_features(),
          "classifier: token width does not match the head");
  const int cls_row = 0;
  const std::vector<ag::Var> parts{ag::gather_rows(e_f, std::span<const int>(&cls_row, 1)), token};
  return linear_.forward(norm_.forward(ag::concat_cols(parts)));
}

Model::Model(const ModelConfig& config, std::uint64_t seed)
    : config_(config),
      init_rng_(seed),
      a_me_(store_, "a_me", config.a_me, init_rng_),
      encoder_(store_, "encoder", config.encoder_depth, config.a_me.dim, config.a_me.heads, config.encoder_ff_hidden,
               config.a_me.layer_norm_eps, init_rng_),
      projector_(store_, "projector", config.a_me.dim, config.pooling, init_rng_),
      head_(store_, "head", config.a_me.dim, config.label_count, config.a_me.layer_norm_eps, init_rng_) {
  require(config.label_count >= 2, "model: need at least two labels");
  if (config.encoder_kind == EncoderStackKind::External) {
    require(!config.encoder_weights.empty(), "external multimodal encoder requires encoder_weights");
    apply_checkpoint(load_checkpoint(config.encoder_weights), store_, "encoder.");
  }
}

SampleOutput Model::forward(const ModalityEmbedding& text, const ModalityEmbedding& video,
                            const ModalityEmbedding& audio, Rng* dropout_rng) const {
  AMeOutput fused = a_me_.forward(text, video, audio, dropout_rng);
  SampleOutput out;
  out.mask = fused.mask;
  out.encoded = encoder_.forward(fused.fused, fused.mask, config_.a_me.dropout, dropout_rng);
  out.token = projector_.forward(out.encoded, fused.mask);
  out.logits = head_.forward(out.encoded, out.token);
  return out;
}

ag::Var cross_entropy_loss(const ag::Var& logits, std::span<const int> labels) {
  return ag::cross_entropy(logits, labels);
}

ag::Var total_loss(const ag::Var& triplet, const ag::Var& classification) {
  require(triplet.rows() == 1 && triplet.cols() == 1 && classification.rows() == 1 && classification.cols() == 1,
          "total_loss: components must be scalars");
  if (!std::isfinite(triplet.value()(0, 0)) || !std::isfinite(classification.value()(0, 0))) {
    fail(ErrorCode::Divergence, "total_loss: non-finite loss component");
  }
  return ag::add(triplet, classification);
}

Checkpoint make_checkpoint(const ParameterStore& store, nlohmann::json metadata) {
  Checkpoint c;
  c.metadata = std::move(metadata);
  for (const auto& p : store.parameters()) c.tensors.emplace_back(p.name, p.var.value());
  return c;
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[8] = {'A', 'M', 'E', 'S', 'S', 'C', 'K', 'P'};

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) fail(ErrorCode::Validation, "checkpoint truncated while reading " + what);
  return v;
}

std::string read_bytes(std::istream& in, std::size_t n, const std::string& what) {
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) fail(ErrorCode::Validation, "checkpoint truncated while reading " + what);
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  const std::string meta = checkpoint.metadata.dump();
  write_pod<std::uint64_t>(out, meta.size());
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(checkpoint.tensors.size()));
  for (const auto& [name, m] : checkpoint.tensors) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) write_pod<float>(out, static_cast<float>(m.data()[i]));
  }
  if (!out) fail(ErrorCode::Io, "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open checkpoint " + path.string());
  const std::string magic = read_bytes(in, sizeof(kMagic), "magic");
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0) {
    fail(ErrorCode::Validation, path.string() + " is not a checkpoint file");
  }
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    fail(ErrorCode::Validation, "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  const auto meta_len = read_pod<std::uint64_t>(in, "metadata length");
  try {
    c.metadata = nlohmann::json::parse(read_bytes(in, meta_len, "metadata"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Validation, std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const auto count = read_pod<std::uint32_t>(in, "tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = read_pod<std::uint32_t>(in, "name length");
    std::string name = read_bytes(in, name_len, "tensor name");
    const auto rows = read_pod<std::uint32_t>(in, name + " rows");
    const auto cols = read_pod<std::uint32_t>(in, name + " cols");
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(read_pod<float>(in, name));
    c.tensors.emplace_back(std::move(name), std::move(m));
  }
  return c;
}

void apply_checkpoint(const Checkpoint& checkpoint, ParameterStore& store, const std::string& prefix) {
  std::map<std::string, const Matrix*> by_name;
  for (const auto& [name, m] : checkpoint.tensors) by_name[name] = &m;
  for (auto& p : store.parameters()) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    auto it = by_name.find(p.name);
    if (it == by_name.end()) fail(ErrorCode::Validation, "checkpoint is missing parameter " + p.name);
    const Matrix& m = *it->second;
    if (m.rows() != p.var.rows() || m.cols() != p.var.cols()) {
      fail(ErrorCode::Validation, "checkpoint parameter " + p.name + " has shape " + std::to_string(m.rows()) + "x" +
                                      std::to_string(m.cols()) + ", model expects " + std::to_string(p.var.rows()) +
                                      "x" + std::to_string(p.var.cols()));
    }
    p.var.mutable_value() = m;
  }
}

}  // namespace amess
