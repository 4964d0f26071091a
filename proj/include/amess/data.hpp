// Dataset manifests and the synthetic dataset generator.
//
// A manifest is a JSON-lines file. The first line is a header object
// {"split", "label_space", "oos_label"?}; every following line is one
// sample record {"id", "text_tokens" | "text_feature_ref",
// "video_feature_ref", "audio_feature_ref", "label", "scope"}. Feature
// references are resolved relative to the manifest's directory.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace amess {

enum class Scope { In, Out };
enum class Split { Train, Val, Test };

std::string_view to_string(Split s);
Split parse_split(std::string_view s);

struct ManifestRecord {
  std::string id;
  std::vector<std::int64_t> text_tokens;
  std::string text_feature_ref;
  std::string video_feature_ref;
  std::string audio_feature_ref;
  std::string label;
  Scope scope = Scope::In;
};

struct DatasetManifest {
  Split split = Split::Train;
  std::vector<std::string> label_space;
  std::optional<std::string> oos_label;
  std::vector<ManifestRecord> records;
  std::filesystem::path base_dir;
};

/// Parses and validates eagerly: unique ids, known labels, scope consistent
/// with the out-of-scope label, and every feature reference resolvable.
/// Errors name the offending record id.
DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir);
DatasetManifest load_manifest(const std::filesystem::path& path);
std::string serialize_manifest(const DatasetManifest& manifest);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

struct SyntheticSpec {
  int n_samples = 200;  // training split size
  int n_val = 50;
  int n_test = 50;
  int n_classes = 4;
  std::vector<std::string> label_names;  // defaults to class_0..class_{n-1}
  std::string oos_label = "UNKNOWN";
  int text_tokens_min = 4;
  int text_tokens_max = 15;
  int video_frames_min = 8;
  int video_frames_max = 30;
  int audio_frames_min = 10;
  int audio_frames_max = 40;
  int video_dim = 16;
  int audio_dim = 12;
  double margin = 10.0;
  double oos_fraction = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticDataset {
  DatasetManifest train;
  DatasetManifest val;
  DatasetManifest test;
  /// Class centers of the raw video and audio features (n_classes x dim).
  std::vector<std::vector<double>> video_centers;
  std::vector<std::vector<double>> audio_centers;
};

/// Writes train/val/test manifests plus content-addressed feature files
/// under out_dir/features. Identical spec and seed give identical bytes.
SyntheticDataset generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

}  // namespace amess
