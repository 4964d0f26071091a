// Per-modality feature extraction and sequence/dimension alignment.
//
// Two encoder kinds exist. Mock encoders are deterministic stand-ins for
// the pretrained text, video and audio backbones: a pure function of the
// input and a seed. External encoders take features that were extracted
// offline (one feature file per sample) and only enforce the length limit.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "amess/autograd.hpp"
#include "amess/nn.hpp"

namespace amess {

enum class Modality { Text, Video, Audio };

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view s);

struct ModalityEmbedding {
  Matrix data;  // (length x dim)
  Mask mask;    // true = valid token
  Modality modality = Modality::Text;
  bool truncated = false;  // input exceeded max_length and was cut

  Eigen::Index length() const { return data.rows(); }
  Eigen::Index dim() const { return data.cols(); }
  /// Throws unless length/dim are positive and the mask matches.
  void validate() const;
  std::size_t valid_count() const;
};

enum class EncoderKind { Mock, External };

struct EncoderSpec {
  EncoderKind kind = EncoderKind::Mock;
  int output_dim = 32;
  int max_length = 50;
  std::uint64_t seed = 0;
};

/// Token id reserved for the CLS position of mock text embeddings.
inline constexpr std::int64_t kClsTokenId = -1;

/// Mock text encoder: row 0 is CLS, row i+1 embeds token_ids[i]. Each row is
/// a unit-variance Gaussian vector seeded by (seed, token id).
ModalityEmbedding encode_text(std::span<const std::int64_t> token_ids, const EncoderSpec& spec);
/// External text features, already (length x output_dim) with CLS at row 0.
ModalityEmbedding encode_text_features(const Matrix& features, const EncoderSpec& spec);
ModalityEmbedding encode_video(const Matrix& frames, const EncoderSpec& spec);
ModalityEmbedding encode_audio(const Matrix& waveform, const EncoderSpec& spec);

/// Source row for each target row under uniform-stride subsampling
/// (floor(i * source_len / target_len)) or the identity when padding.
std::vector<int> alignment_rows(int source_len, int target_len);

struct AlignedSequence {
  ag::Var data;  // (target_len x target_dim)
  Mask mask;
};

/// Length change by zero-padding or uniform-stride subsampling, dimension
/// change through `proj`. Padded rows are exactly zero.
AlignedSequence align(const ModalityEmbedding& emb, int target_len, int target_dim, const Linear& proj);
/// Length change only; the dimension is kept. Used for the text stream.
AlignedSequence pad_or_subsample(const ModalityEmbedding& emb, int target_len);

/// One precomputed feature record: {id, modality, shape, data}.
struct FeatureRecord {
  std::string id;
  Modality modality = Modality::Video;
  Matrix data;
};

/// JSON object on a single line; data is row-major float32.
std::string serialize_feature_record(const FeatureRecord& record);
FeatureRecord parse_feature_record(const std::string& line);
void write_feature_file(const std::filesystem::path& path, std::span<const FeatureRecord> records);
/// Resolves "file" (first record) or "file#id" (record with that id).
FeatureRecord read_feature_ref(const std::filesystem::path& base_dir, const std::string& ref);
/// Whether the file exists and, for "file#id", holds a record with that id.
bool feature_ref_exists(const std::filesystem::path& base_dir, const std::string& ref);

}  // namespace amess
