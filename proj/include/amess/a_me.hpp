// Anchor-based multimodal embedding.
//
// Video and audio are aligned to the text length, fused with the text by
// cross-attention (text as query), and reduced to k anchor tokens each by a
// first/second nearest-neighbour similarity ratio. The two anchor sets
// exchange information through anchor cross-attention, then each fused
// sequence attends to its enhanced anchors to restore a full-length
// sequence. The two streams are summed, layer-normalised and dropped out.

#pragma once

#include <optional>
#include <vector>

#include "amess/autograd.hpp"
#include "amess/encoders.hpp"
#include "amess/nn.hpp"

namespace amess {

struct FusedEmbedding {
  ag::Var data;  // (l_t x d_t)
  Mask mask;     // inherited from the text query
  Modality source = Modality::Video;
};

struct AnchorSet {
  ag::Var vectors;              // (k x d_t)
  std::vector<int> indices;     // rows of the fused sequence
  std::vector<double> scores;   // reliability ratios, non-increasing

  int size() const { return static_cast<int>(indices.size()); }
};

/// Cosine similarity with norms guarded by 1e-12; zero vectors give 0.
double cosine_similarity(const Eigen::Ref<const RowVector>& a, const Eigen::Ref<const RowVector>& b);

/// Text row i is scored by the ratio of its highest to second-highest cosine
/// similarity over the valid fused rows. Entries for masked rows are NaN.
std::vector<double> reliability_scores(const Matrix& text, const Matrix& fused, const Mask& mask);

FusedEmbedding fuse_with_text(const AlignedSequence& aux, const AlignedSequence& text,
                              const CrossAttentionBlock& block, Modality source,
                              std::vector<Matrix>* weights = nullptr);

/// Top-k fused rows by reliability score, ties broken by lower index.
/// Masked rows are never selected, so fewer than k anchors come back when
/// fewer than k rows are valid.
AnchorSet select_anchors(const ag::Var& text, const FusedEmbedding& fused, int k);

/// target + FF(softmax(Q_target K_source^T / sqrt(d)) V_source).
AnchorSet anchor_cross_attention(const AnchorSet& target, const AnchorSet& source,
                                 const CrossAttentionBlock& block, std::vector<Matrix>* weights = nullptr);

/// Fused sequence as query, enhanced anchors as key and value.
ag::Var temporal_cross_attention(const FusedEmbedding& fused, const AnchorSet& anchors,
                                 const CrossAttentionBlock& block, std::vector<Matrix>* weights = nullptr);

/// Dropout(LayerNorm(e_vm + e_am)); dropout only when `rng` is given.
ag::Var combine(const ag::Var& e_vm, const ag::Var& e_am, const LayerNorm& norm, double dropout_rate,
                Rng* rng);

struct AMeConfig {
  int text_len = 50;
  int dim = 32;
  int video_dim = 32;
  int audio_dim = 32;
  int anchors = 8;
  int heads = 1;
  int ff_hidden = 128;
  double dropout = 0.1;
  double layer_norm_eps = 1e-5;
};

struct AMeOutput {
  ag::Var fused;  // E_m (l_t x d_t)
  Mask mask;      // text mask
  FusedEmbedding video_fused;
  FusedEmbedding audio_fused;
  AnchorSet video_anchors;  // after interaction
  AnchorSet audio_anchors;
};

class AMeModule {
 public:
  AMeModule(ParameterStore& store, const std::string& name, const AMeConfig& config, Rng& init_rng);

  /// Eval mode when `dropout_rng` is null.
  AMeOutput forward(const ModalityEmbedding& text, const ModalityEmbedding& video,
                    const ModalityEmbedding& audio, Rng* dropout_rng = nullptr) const;

  const AMeConfig& config() const { return config_; }
  void set_anchor_count(int k) { config_.anchors = k; }

  Linear& video_projection() { return video_proj_; }
  Linear& audio_projection() { return audio_proj_; }
  CrossAttentionBlock& video_fusion() { return video_fuse_; }
  CrossAttentionBlock& audio_fusion() { return audio_fuse_; }
  CrossAttentionBlock& audio_to_video() { return audio_to_video_; }
  CrossAttentionBlock& video_to_audio() { return video_to_audio_; }
  CrossAttentionBlock& video_temporal() { return video_temporal_; }
  CrossAttentionBlock& audio_temporal() { return audio_temporal_; }

 private:
  AMeConfig config_;
  Linear video_proj_;
  Linear audio_proj_;
  CrossAttentionBlock video_fuse_;
  CrossAttentionBlock audio_fuse_;
  CrossAttentionBlock audio_to_video_;
  CrossAttentionBlock video_to_audio_;
  CrossAttentionBlock video_temporal_;
  CrossAttentionBlock audio_temporal_;
  LayerNorm norm_;
};

}  // namespace amess
