#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "amess/config.hpp"
#include "amess/data.hpp"
#include "amess/encoders.hpp"
#include "amess/model.hpp"
#include "amess/semantic_sync.hpp"

namespace amess {

/// A manifest record after running the (frozen) modality encoders.
struct Sample {
  std::string id;
  ModalityEmbedding text;
  ModalityEmbedding video;
  ModalityEmbedding audio;
  int label = 0;  // index into the label space
  bool out_of_scope = false;
};

std::vector<Sample> encode_manifest(const DatasetManifest& manifest, const TrainConfig& config);

/// Decoupled weight decay Adam.
class AdamW {
 public:
  AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(ParameterStore& store);

 private:
  double lr_, weight_decay_, beta1_, beta2_, eps_;
  long long t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(ParameterStore& store, double max_norm);

struct ClassMetrics {
  std::string name;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  int support = 0;
};

struct MetricsReport {
  double acc = 0.0;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::optional<double> f1_is;  // F1-IS: averaged over in-scope classes
  std::optional<double> f1_os;  // F1-OS: F1 of the out-of-scope class
  std::vector<ClassMetrics> per_class;
  std::vector<std::vector<int>> confusion;  // [true][predicted]

  nlohmann::json to_json() const;
};

/// Averages run over classes that occur in the labels or the predictions.
/// A class with no predictions has precision 0 (likewise recall).
MetricsReport compute_metrics(std::span<const int> predictions, std::span<const int> labels,
                              const std::vector<std::string>& class_names, std::optional<int> oos_class,
                              Averaging averaging = Averaging::Macro);

/// Links a model's label space to the rows of a description bank.
struct LabelSpace {
  std::vector<std::string> names;
  std::optional<std::string> oos_label;

  std::optional<int> oos_index() const;
  /// Bank row per label; kOutOfScope for the out-of-scope label. Throws when
  /// an in-scope label has no descriptions.
  std::vector<int> bank_rows(const LabelDescriptionBank& bank) const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_triplet = 0.0;
  double train_cls = 0.0;
  double val_acc = 0.0;
  double val_f1 = 0.0;
};

struct TrainResult {
  std::unique_ptr<Model> model;  // parameters of the best validation epoch
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_acc = 0.0;
};

/// One optimisation step's worth of losses for a batch.
struct BatchLoss {
  ag::Var total;
  ag::Var triplet;
  ag::Var classification;
};

BatchLoss batch_loss(const Model& model, std::span<const Sample* const> batch, const std::vector<int>& bank_rows,
                     const LabelDescriptionBank& bank, const TripletOptions& options, Rng* dropout_rng);

/// AdamW on the joint loss with early stopping on validation accuracy.
/// Deterministic for a given config and data.
TrainResult train(const TrainConfig& config, const LabelSpace& labels, const std::vector<Sample>& train_split,
                  const std::vector<Sample>& val_split, const LabelDescriptionBank& bank);

std::vector<int> predict(const Model& model, const std::vector<Sample>& samples);

MetricsReport evaluate(const Model& model, const std::vector<Sample>& samples, const LabelSpace& labels,
                       bool oos_mode, Averaging averaging = Averaging::Macro);

void write_history_csv(const std::filesystem::path& path, std::span<const EpochRecord> history);

/// Checkpoint metadata holds the config and the label space.
Checkpoint checkpoint_for(const Model& model, const TrainConfig& config, const LabelSpace& labels);
struct LoadedModel {
  std::unique_ptr<Model> model;
  TrainConfig config;
  LabelSpace labels;
};
LoadedModel load_model(const std::filesystem::path& checkpoint_path);

struct SweepRow {
  int value = 0;  // k or m
  MetricsReport metrics;
};

/// Retrains from the same seed for every anchor count and evaluates on
/// `eval_split`.
std::vector<SweepRow> anchor_sweep(const TrainConfig& config, std::span<const int> k_values, const LabelSpace& labels,
                                   const std::vector<Sample>& train_split, const std::vector<Sample>& val_split,
                                   const std::vector<Sample>& eval_split, const LabelDescriptionBank& bank);

/// Retrains with the first m descriptions per label for every m.
std::vector<SweepRow> description_count_sweep(const TrainConfig& config, std::span<const int> m_values,
                                              const LabelSpace& labels, const std::vector<Sample>& train_split,
                                              const std::vector<Sample>& val_split,
                                              const std::vector<Sample>& eval_split,
                                              const LabelDescriptionBank& raw_bank);

/// header is "k" or "m"; columns (header, acc, f1).
void write_sweep_csv(const std::filesystem::path& path, const std::string& header, std::span<const SweepRow> rows);

}  // namespace amess
