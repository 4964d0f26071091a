#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>

#include "amess/data.hpp"
#include "amess/encoders.hpp"
#include "amess/model.hpp"
#include "amess/semantic_sync.hpp"

namespace amess {

enum class Averaging { Macro, Weighted };

/// Every knob of a run. Defaults follow the reference training setup
/// (lr 2e-5, batch 8, 40 epochs, patience 8, tau 0.7, k 8, lengths
/// 50/180/400) except d_t, which defaults to a desk-scale 32.
struct TrainConfig {
  std::uint64_t seed = 0;

  double lr = 2e-5;
  int batch_size = 8;
  int epochs = 40;
  int patience = 8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;

  double tau = 0.7;
  int anchors = 8;
  int text_len = 50;
  int video_len = 180;
  int audio_len = 400;
  int dim = 32;
  int heads = 1;
  int ff_hidden = 0;  // 0 means 4 * dim
  int encoder_depth = 2;
  EncoderStackKind encoder_kind = EncoderStackKind::Toy;
  std::string encoder_weights;
  double dropout = 0.1;
  double layer_norm_eps = 1e-5;

  NegativeScope negatives = NegativeScope::Label;
  bool include_positive_in_denominator = false;
  Pooling pooling = Pooling::Mean;
  Averaging averaging = Averaging::Macro;

  EncoderSpec text_encoder{EncoderKind::Mock, 32, 50, 11};
  EncoderSpec video_encoder{EncoderKind::Mock, 32, 180, 12};
  EncoderSpec audio_encoder{EncoderKind::Mock, 32, 400, 13};

  std::string descriptions;  // description bank JSON
  int description_count = 3;
  DescriptionEmbedderSpec embedder{EmbedderKind::Mock, 32, 14, {}};

  std::string train_manifest;
  std::string val_manifest;
  std::string test_manifest;
  bool oos_mode = false;

  SyntheticSpec synthetic;

  int effective_ff_hidden() const { return ff_hidden > 0 ? ff_hidden : 4 * dim; }
  /// Pushes lengths and d_t into the encoder and embedder specs.
  void sync_derived();
  void validate() const;
  ModelConfig model_config(int label_count) const;
};

nlohmann::json to_json(const TrainConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected. Relative
/// paths are resolved against `base_dir` when it is non-empty.
TrainConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
TrainConfig load_config(const std::filesystem::path& path);

}  // namespace amess
