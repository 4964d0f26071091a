#include "amess/a_me.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "amess/error.hpp"

namespace amess {

namespace {
constexpr double kNormEps = 1e-12;
}

double cosine_similarity(const Eigen::Ref<const RowVector>& a, const Eigen::Ref<const RowVector>& b) {
  const double na = std::max(a.norm(), kNormEps);
  const double nb = std::max(b.norm(), kNormEps);
  return a.dot(b) / (na * nb);
}

std::vector<double> reliability_scores(const Matrix& text, const Matrix& fused, const Mask& mask) {
  require(text.rows() == fused.rows() && text.cols() == fused.cols(),
          "select_anchors: text and fused shapes differ");
  require(static_cast<Eigen::Index>(mask.size()) == text.rows(), "select_anchors: mask length mismatch");
  const auto n = static_cast<std::size_t>(text.rows());
  std::vector<int> valid;
  for (std::size_t j = 0; j < n; ++j) {
    if (mask[j]) valid.push_back(static_cast<int>(j));
  }
  require(valid.size() >= 2, "select_anchors: need at least two valid tokens for a second nearest neighbour");

  // Row-normalise once; the similarity matrix is then a plain product.
  auto normalized = [](const Matrix& m) {
    Eigen::VectorXd norms = m.rowwise().norm().cwiseMax(kNormEps);
    return Matrix(m.array().colwise() / norms.array());
  };
  const Matrix tn = normalized(text);
  const Matrix fn = normalized(fused);

  std::vector<double> scores(n, std::numeric_limits<double>::quiet_NaN());
  std::vector<double> sims(valid.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    for (std::size_t c = 0; c < valid.size(); ++c) sims[c] = tn.row(static_cast<Eigen::Index>(i)).dot(fn.row(valid[c]));
    std::partial_sort(sims.begin(), sims.begin() + 2, sims.end(), std::greater<>());
    double second = sims[1];
    // Signed zeros from zero-norm rows must not flip the guard's sign.
    if (std::abs(second) < kNormEps) second = second < 0.0 ? -kNormEps : kNormEps;
    scores[i] = sims[0] / second;
  }
  return scores;
}

FusedEmbedding fuse_with_text(const AlignedSequence& aux, const AlignedSequence& text,
                              const CrossAttentionBlock& block, Modality source, std::vector<Matrix>* weights) {
  require(aux.data.rows() == text.data.rows() && aux.data.cols() == text.data.cols(),
          "fuse_with_text: auxiliary stream must be aligned to the text shape");
  require(std::find(aux.mask.begin(), aux.mask.end(), true) != aux.mask.end(), "no attendable keys");
  Attention a = block.forward(text.data, aux.data, aux.mask);
  if (weights != nullptr) *weights = a.weights;
  return FusedEmbedding{a.context, text.mask, source};
}

AnchorSet select_anchors(const ag::Var& text, const FusedEmbedding& fused, int k) {
  const Eigen::Index len = fused.data.rows();
  require(k >= 1 && k <= len, "select_anchors: k must lie in [1, l_t]");
  require(len >= 2, "select_anchors: l_t must be at least 2");
  const std::vector<double> scores = reliability_scores(text.value(), fused.data.value(), fused.mask);

  std::vector<int> order;
  for (Eigen::Index i = 0; i < len; ++i) {
    if (fused.mask[static_cast<std::size_t>(i)]) order.push_back(static_cast<int>(i));
  }
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(k)));

  AnchorSet out;
  out.indices = order;
  for (int i : order) out.scores.push_back(scores[static_cast<std::size_t>(i)]);
  out.vectors = ag::gather_rows(fused.data, out.indices);
  return out;
}

AnchorSet anchor_cross_attention(const AnchorSet& target, const AnchorSet& source, const CrossAttentionBlock& block,
                                 std::vector<Matrix>* weights) {
  require(target.size() > 0 && target.size() == source.size(),
          "anchor_cross_attention: anchor sets must have the same non-zero size");
  Attention a = block.attend(target.vectors, source.vectors);
  if (weights != nullptr) *weights = a.weights;
  AnchorSet out = target;
  out.vectors = ag::add(target.vectors, block.feedforward().forward(a.context));
  return out;
}

ag::Var temporal_cross_attention(const FusedEmbedding& fused, const AnchorSet& anchors,
                                 const CrossAttentionBlock& block, std::vector<Matrix>* weights) {
  require(anchors.size() > 0, "temporal_cross_attention: empty anchor set");
  Attention a = block.forward(fused.data, anchors.vectors);
  if (weights != nullptr) *weights = a.weights;
  return a.context;
}

ag::Var combine(const ag::Var& e_vm, const ag::Var& e_am, const LayerNorm& norm, double dropout_rate, Rng* rng) {
  ag::Var out = norm.forward(ag::add(e_vm, e_am));
  if (rng != nullptr && dropout_rate > 0.0) {
    out = ag::mul_const(out, dropout_mask(out.rows(), out.cols(), dropout_rate, *rng));
  }
  return out;
}

AMeModule::AMeModule(ParameterStore& store, const std::string& name, const AMeConfig& config, Rng& rng)
    : config_(config),
      video_proj_(store, name + ".video_proj", config.video_dim, config.dim, rng),
      audio_proj_(store, name + ".audio_proj", config.audio_dim, config.dim, rng),
      video_fuse_(store, name + ".video_fuse", config.dim, config.heads, config.ff_hidden, rng),
      audio_fuse_(store, name + ".audio_fuse", config.dim, config.heads, config.ff_hidden, rng),
      audio_to_video_(store, name + ".anchor_a2v", config.dim, config.heads, config.ff_hidden, rng),
      video_to_audio_(store, name + ".anchor_v2a", config.dim, config.heads, config.ff_hidden, rng),
      video_temporal_(store, name + ".temporal_v", config.dim, config.heads, config.ff_hidden, rng),
      audio_temporal_(store, name + ".temporal_a", config.dim, config.heads, config.ff_hidden, rng),
      norm_(store, name + ".norm", config.dim, config.layer_norm_eps) {
  require(config.text_len >= 2, "A-ME: text length must be at least 2");
  require(config.anchors >= 1 && config.anchors <= config.text_len, "A-ME: anchor count must lie in [1, l_t]");
}

AMeOutput AMeModule::forward(const ModalityEmbedding& text, const ModalityEmbedding& video,
                             const ModalityEmbedding& audio, Rng* dropout_rng) const {
  require(text.dim() == config_.dim, "A-ME: text dim " + std::to_string(text.dim()) + " differs from d_t " +
                                         std::to_string(config_.dim));
  const AlignedSequence text_seq = pad_or_subsample(text, config_.text_len);
  const AlignedSequence video_seq = align(video, config_.text_len, config_.dim, video_proj_);
  const AlignedSequence audio_seq = align(audio, config_.text_len, config_.dim, audio_proj_);

  AMeOutput out;
  out.mask = text_seq.mask;
  out.video_fused = fuse_with_text(video_seq, text_seq, video_fuse_, Modality::Video);
  out.audio_fused = fuse_with_text(audio_seq, text_seq, audio_fuse_, Modality::Audio);

  const AnchorSet video_anchors = select_anchors(text_seq.data, out.video_fused, config_.anchors);
  const AnchorSet audio_anchors = select_anchors(text_seq.data, out.audio_fused, config_.anchors);

  out.video_anchors = anchor_cross_attention(video_anchors, audio_anchors, audio_to_video_);
  out.audio_anchors = anchor_cross_attention(audio_anchors, video_anchors, video_to_audio_);

  const ag::Var e_vm = temporal_cross_attention(out.video_fused, out.video_anchors, video_temporal_);
  const ag::Var e_am = temporal_cross_attention(out.audio_fused, out.audio_anchors, audio_temporal_);
  out.fused = combine(e_vm, e_am, norm_, config_.dropout, dropout_rng);
  return out;
}

}  // namespace amess
