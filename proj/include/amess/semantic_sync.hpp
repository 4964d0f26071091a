// Label-description semantics: loading and embedding the per-label
// description bank, the triplet contrastive loss that pulls the pooled
// multimodal token towards its label's descriptions, and a joint PCA used
// to inspect that alignment.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "amess/autograd.hpp"

namespace amess {

struct LabelDescriptionBank {
  std::string prompt_template;
  std::vector<std::string> labels;
  std::vector<std::vector<std::string>> descriptions;  // per label, m strings
  std::vector<Matrix> embeddings;                      // per label, (m x d), rows unit-norm
  std::optional<std::string> oos_label;

  int descriptions_per_label() const;
  bool embedded() const { return !embeddings.empty(); }
  int dim() const;
  /// Index of `name` in labels, or -1.
  int index_of(const std::string& name) const;
  /// Copy keeping the first m descriptions (and embeddings) of every label.
  LabelDescriptionBank truncated(int m) const;
};

/// Checks uniform description counts (m >= 2), unique labels, and that
/// the out-of-scope label has no descriptions.
void validate_bank(const LabelDescriptionBank& bank);

LabelDescriptionBank parse_descriptions(const std::string& json_text);
LabelDescriptionBank load_descriptions(const std::filesystem::path& path);

enum class EmbedderKind { Mock, External };

struct DescriptionEmbedderSpec {
  EmbedderKind kind = EmbedderKind::Mock;
  int dim = 32;
  std::uint64_t seed = 0;
  std::filesystem::path path;  // external: file written by save_embedded_bank
};

/// Mock sentence embedding: sum of seeded Gaussian vectors of the lowercased
/// alphanumeric words, L2-normalised. Identical strings map identically.
RowVector mock_sentence_embedding(const std::string& text, int dim, std::uint64_t seed);

LabelDescriptionBank embed_descriptions(const LabelDescriptionBank& bank, const DescriptionEmbedderSpec& spec);
void save_embedded_bank(const std::filesystem::path& path, const LabelDescriptionBank& bank);

enum class NegativeScope {
  Label,  // every other label in the bank
  Batch,  // labels of the other batch samples, with multiplicity
};

struct TripletOptions {
  double temperature = 0.7;
  NegativeScope negatives = NegativeScope::Label;
  bool include_positive_in_denominator = false;
};

/// Marks a sample as out-of-scope in `bank_labels`.
inline constexpr int kOutOfScope = -1;

struct TripletLoss {
  ag::Var value;          // scalar
  int contributing = 0;   // samples that entered the average
  bool empty = false;     // no contributing sample; value is 0
};

/// Per contributing sample i with label y:
///   -log( sum_j exp(cos(T_i, S^y_j)/tau) / sum_{k != y} sum_j exp(cos(T_i, S^k_j)/tau) )
/// averaged over contributing samples. Out-of-scope samples never contribute.
TripletLoss triplet_contrastive_loss(const ag::Var& tokens, std::span<const int> bank_labels,
                                     const LabelDescriptionBank& bank, const TripletOptions& options);

/// Centered projection onto the top principal axes, axes ordered by
/// decreasing variance and signed so the largest-magnitude loading is positive.
Matrix pca_project(const Matrix& points, int components = 2);

struct PcaPoint {
  std::string role;  // "mean", "synchronized" or "description"
  double x = 0.0;
  double y = 0.0;
};

/// Joint 2-D PCA of the three point groups, min-max normalised per axis.
std::vector<PcaPoint> pca_semantic_analysis(const Matrix& tokens_before, const Matrix& tokens_after,
                                            const Matrix& descriptions);

void write_pca_csv(const std::filesystem::path& path, const std::string& label, std::span<const PcaPoint> points);

}  // namespace amess
