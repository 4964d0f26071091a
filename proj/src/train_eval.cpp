#include "amess/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>

#include "amess/error.hpp"

namespace amess {

using nlohmann::json;

std::vector<Sample> encode_manifest(const DatasetManifest& manifest, const TrainConfig& config) {
  std::vector<Sample> out;
  out.reserve(manifest.records.size());
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    Sample s;
    s.id = r.id;
    try {
      if (!r.text_tokens.empty()) {
        s.text = encode_text(r.text_tokens, config.text_encoder);
      } else {
        s.text = encode_text_features(read_feature_ref(manifest.base_dir, r.text_feature_ref).data, config.text_encoder);
      }
      s.video = encode_video(read_feature_ref(manifest.base_dir, r.video_feature_ref).data, config.video_encoder);
      s.audio = encode_audio(read_feature_ref(manifest.base_dir, r.audio_feature_ref).data, config.audio_encoder);
    } catch (const Error& e) {
      fail(e.code(), "record '" + r.id + "': " + e.what());
    }
    const auto it = std::find(manifest.label_space.begin(), manifest.label_space.end(), r.label);
    s.label = static_cast<int>(it - manifest.label_space.begin());
    s.out_of_scope = r.scope == Scope::Out;
    out.push_back(std::move(s));
  }
  return out;
}

AdamW::AdamW(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(ParameterStore& store) {
  auto& params = store.parameters();
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
      v_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const Matrix g = p.var.grad();
    Matrix& w = p.var.mutable_value();
    if (p.decay && weight_decay_ > 0.0) w *= (1.0 - lr_ * weight_decay_);
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    const Matrix m_hat = m_[i] / bc1;
    const Matrix v_hat = v_[i] / bc2;
    w.array() -= lr_ * m_hat.array() / (v_hat.array().sqrt() + eps_);
  }
}

double clip_grad_norm(ParameterStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& p : store.parameters()) {
    if (p.var.node()->grad.size() != 0) sq += p.var.node()->grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) fail(ErrorCode::Divergence, "gradient norm is not finite");
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : store.parameters()) {
      if (p.var.node()->grad.size() != 0) p.var.node()->grad *= s;
    }
  }
  return norm;
}

json MetricsReport::to_json() const {
  json j;
  j["acc"] = acc;
  j["f1"] = f1;
  j["precision"] = precision;
  j["recall"] = recall;
  if (f1_is) j["F1-IS"] = *f1_is;
  if (f1_os) j["F1-OS"] = *f1_os;
  j["per_class"] = json::array();
  for (const auto& c : per_class) {
    j["per_class"].push_back(
        {{"label", c.name}, {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}, {"support", c.support}});
  }
  j["confusion"] = confusion;
  return j;
}

MetricsReport compute_metrics(std::span<const int> predictions, std::span<const int> labels,
                              const std::vector<std::string>& class_names, std::optional<int> oos_class,
                              Averaging averaging) {
  require(predictions.size() == labels.size(), "metrics: prediction and label counts differ");
  require(!labels.empty(), "metrics: no samples");
  const auto n_classes = static_cast<int>(class_names.size());
  MetricsReport r;
  r.confusion.assign(static_cast<std::size_t>(n_classes), std::vector<int>(static_cast<std::size_t>(n_classes), 0));
  int correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    const int p = predictions[i];
    require(y >= 0 && y < n_classes && p >= 0 && p < n_classes, "metrics: class index out of range");
    ++r.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(p)];
    if (y == p) ++correct;
  }
  r.acc = static_cast<double>(correct) / static_cast<double>(labels.size());

  std::vector<int> predicted(static_cast<std::size_t>(n_classes), 0);
  for (int c = 0; c < n_classes; ++c) {
    for (int t = 0; t < n_classes; ++t) predicted[static_cast<std::size_t>(c)] += r.confusion[static_cast<std::size_t>(t)][static_cast<std::size_t>(c)];
  }
  for (int c = 0; c < n_classes; ++c) {
    const auto cu = static_cast<std::size_t>(c);
    ClassMetrics m;
    m.name = class_names[cu];
    const int tp = r.confusion[cu][cu];
    for (int p : r.confusion[cu]) m.support += p;
    m.precision = predicted[cu] > 0 ? static_cast<double>(tp) / predicted[cu] : 0.0;
    m.recall = m.support > 0 ? static_cast<double>(tp) / m.support : 0.0;
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    r.per_class.push_back(m);
  }

  auto average = [&](bool in_scope_only, auto field) {
    double num = 0.0;
    double den = 0.0;
    for (int c = 0; c < n_classes; ++c) {
      const auto& m = r.per_class[static_cast<std::size_t>(c)];
      if (m.support == 0 && predicted[static_cast<std::size_t>(c)] == 0) continue;
      if (in_scope_only && oos_class && c == *oos_class) continue;
      const double w = averaging == Averaging::Macro ? 1.0 : static_cast<double>(m.support);
      num += w * (m.*field);
      den += w;
    }
    return den > 0.0 ? num / den : 0.0;
  };
  r.f1 = average(false, &ClassMetrics::f1);
  r.precision = average(false, &ClassMetrics::precision);
  r.recall = average(false, &ClassMetrics::recall);
  if (oos_class) {
    require(*oos_class >= 0 && *oos_class < n_classes, "metrics: out-of-scope class out of range");
    r.f1_is = average(true, &ClassMetrics::f1);
    r.f1_os = r.per_class[static_cast<std::size_t>(*oos_class)].f1;
  }
  return r;
}

std::optional<int> LabelSpace::oos_index() const {
  if (!oos_label) return std::nullopt;
  auto it = std::find(names.begin(), names.end(), *oos_label);
  if (it == names.end()) return std::nullopt;
  return static_cast<int>(it - names.begin());
}

std::vector<int> LabelSpace::bank_rows(const LabelDescriptionBank& bank) const {
  std::vector<int> rows;
  for (const auto& n : names) {
    if (oos_label && n == *oos_label) {
      rows.push_back(kOutOfScope);
      continue;
    }
    const int idx = bank.index_of(n);
    if (idx < 0) fail(ErrorCode::Validation, "label '" + n + "' has no descriptions in the bank");
    rows.push_back(idx);
  }
  return rows;
}

BatchLoss batch_loss(const Model& model, std::span<const Sample* const> batch, const std::vector<int>& bank_rows,
                     const LabelDescriptionBank& bank, const TripletOptions& options, Rng* dropout_rng) {
  std::vector<ag::Var> logits;
  std::vector<ag::Var> tokens;
  std::vector<int> labels;
  std::vector<int> rows;
  for (const Sample* s : batch) {
    SampleOutput o = model.forward(s->text, s->video, s->audio, dropout_rng);
    logits.push_back(o.logits);
    tokens.push_back(o.token);
    labels.push_back(s->label);
    rows.push_back(s->out_of_scope ? kOutOfScope : bank_rows.at(static_cast<std::size_t>(s->label)));
  }
  BatchLoss out;
  out.classification = cross_entropy_loss(ag::concat_rows(logits), labels);
  out.triplet = triplet_contrastive_loss(ag::concat_rows(tokens), rows, bank, options).value;
  out.total = total_loss(out.triplet, out.classification);
  return out;
}

std::vector<int> predict(const Model& model, const std::vector<Sample>& samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    const SampleOutput o = model.forward(s.text, s.video, s.audio);
    Eigen::Index arg = 0;
    o.logits.value().row(0).maxCoeff(&arg);
    out.push_back(static_cast<int>(arg));
  }
  return out;
}

MetricsReport evaluate(const Model& model, const std::vector<Sample>& samples, const LabelSpace& labels,
                       bool oos_mode, Averaging averaging) {
  if (model.config().label_count != static_cast<int>(labels.names.size())) {
    fail(ErrorCode::InvalidInput, "evaluate: model has " + std::to_string(model.config().label_count) +
                                      " labels, split has " + std::to_string(labels.names.size()));
  }
  std::vector<int> truth;
  for (const auto& s : samples) truth.push_back(s.label);
  const std::vector<int> preds = predict(model, samples);
  std::optional<int> oos = oos_mode ? labels.oos_index() : std::nullopt;
  if (oos_mode && !oos) fail(ErrorCode::InvalidInput, "evaluate: out-of-scope mode needs an oos_label in the label space");
  return compute_metrics(preds, truth, labels.names, oos, averaging);
}

TrainResult train(const TrainConfig& config, const LabelSpace& labels, const std::vector<Sample>& train_split,
                  const std::vector<Sample>& val_split, const LabelDescriptionBank& bank) {
  config.validate();
  require(!train_split.empty(), "train: training split is empty");
  require(!val_split.empty(), "train: validation split is empty");
  require(bank.embedded(), "train: description bank is not embedded");
  const std::vector<int> bank_rows = labels.bank_rows(bank);

  TrainResult result;
  result.model = std::make_unique<Model>(config.model_config(static_cast<int>(labels.names.size())), config.seed);
  Model& model = *result.model;
  AdamW optimizer(config.lr, config.weight_decay);
  const TripletOptions options{config.tau, config.negatives, config.include_positive_in_denominator};

  Rng shuffle_rng = Rng::derive(config.seed, 1);
  Rng dropout_rng = Rng::derive(config.seed, 2);
  std::vector<std::size_t> order(train_split.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  ParameterStore::Snapshot best = model.parameters().snapshot();
  double best_acc = -1.0;
  int stale = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::swap(order[i], order[static_cast<std::size_t>(shuffle_rng.below(static_cast<int>(i) + 1))]);
    }
    double loss_sum = 0.0, tri_sum = 0.0, cls_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<const Sample*> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(&train_split[order[i]]);

      model.parameters().zero_grad();
      BatchLoss loss;
      try {
        loss = batch_loss(model, batch, bank_rows, bank, options, &dropout_rng);
        ag::backward(loss.total);
        clip_grad_norm(model.parameters(), config.grad_clip);
        optimizer.step(model.parameters());
        for (const auto& p : model.parameters().parameters()) {
          if (!p.var.value().allFinite()) fail(ErrorCode::Divergence, "parameter " + p.name + " became non-finite");
        }
      } catch (const Error& e) {
        if (e.code() != ErrorCode::Divergence) throw;
        fail(ErrorCode::Divergence, "epoch " + std::to_string(epoch) + ", batch at " + std::to_string(start) + ": " +
                                        e.what());
      }

      const double w = static_cast<double>(batch.size());
      loss_sum += w * loss.total.value()(0, 0);
      tri_sum += w * loss.triplet.value()(0, 0);
      cls_sum += w * loss.classification.value()(0, 0);
    }
    const double n = static_cast<double>(order.size());
    const MetricsReport val = evaluate(model, val_split, labels, false, config.averaging);
    result.history.push_back({epoch, loss_sum / n, tri_sum / n, cls_sum / n, val.acc, val.f1});

    if (val.acc > best_acc) {
      best_acc = val.acc;
      best = model.parameters().snapshot();
      result.best_epoch = epoch;
      stale = 0;
    } else if (++stale >= config.patience) {
      break;
    }
  }
  model.parameters().restore(best);
  result.best_val_acc = best_acc;
  return result;
}

void write_history_csv(const std::filesystem::path& path, std::span<const EpochRecord> history) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << "epoch,train_loss,val_acc,val_f1\n" << std::setprecision(17);
  for (const auto& h : history) out << h.epoch << ',' << h.train_loss << ',' << h.val_acc << ',' << h.val_f1 << '\n';
}

Checkpoint checkpoint_for(const Model& model, const TrainConfig& config, const LabelSpace& labels) {
  json meta;
  meta["config"] = to_json(config);
  meta["label_space"] = labels.names;
  if (labels.oos_label) meta["oos_label"] = *labels.oos_label;
  return make_checkpoint(model.parameters(), meta);
}

LoadedModel load_model(const std::filesystem::path& checkpoint_path) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  LoadedModel out;
  try {
    json cfg = ckpt.metadata.at("config");
    // Weights come from the checkpoint itself.
    cfg["encoder_kind"] = "toy";
    cfg["encoder_weights"] = "";
    out.config = config_from_json(cfg);
    out.labels.names = ckpt.metadata.at("label_space").get<std::vector<std::string>>();
    if (ckpt.metadata.contains("oos_label")) out.labels.oos_label = ckpt.metadata.at("oos_label").get<std::string>();
  } catch (const json::exception& e) {
    fail(ErrorCode::Validation, std::string("checkpoint metadata is incomplete: ") + e.what());
  }
  out.model = std::make_unique<Model>(out.config.model_config(static_cast<int>(out.labels.names.size())),
                                      out.config.seed);
  apply_checkpoint(ckpt, out.model->parameters());
  return out;
}

namespace {

MetricsReport train_and_score(const TrainConfig& config, const LabelSpace& labels, const std::vector<Sample>& train_split,
                              const std::vector<Sample>& val_split, const std::vector<Sample>& eval_split,
                              const LabelDescriptionBank& bank) {
  TrainResult r = train(config, labels, train_split, val_split, bank);
  return evaluate(*r.model, eval_split, labels, config.oos_mode, config.averaging);
}

}  // namespace

std::vector<SweepRow> anchor_sweep(const TrainConfig& config, std::span<const int> k_values, const LabelSpace& labels,
                                   const std::vector<Sample>& train_split, const std::vector<Sample>& val_split,
                                   const std::vector<Sample>& eval_split, const LabelDescriptionBank& bank) {
  require(!k_values.empty(), "anchor sweep: no k values");
  for (int k : k_values) {
    require(k >= 1 && k <= config.text_len, "anchor sweep: k=" + std::to_string(k) + " outside [1, " +
                                                std::to_string(config.text_len) + "]");
  }
  std::vector<SweepRow> rows;
  for (int k : k_values) {
    TrainConfig c = config;
    c.anchors = k;
    rows.push_back({k, train_and_score(c, labels, train_split, val_split, eval_split, bank)});
  }
  return rows;
}

std::vector<SweepRow> description_count_sweep(const TrainConfig& config, std::span<const int> m_values,
                                              const LabelSpace& labels, const std::vector<Sample>& train_split,
                                              const std::vector<Sample>& val_split,
                                              const std::vector<Sample>& eval_split,
                                              const LabelDescriptionBank& raw_bank) {
  require(!m_values.empty(), "description sweep: no m values");
  for (int m : m_values) {
    require(m >= 2, "description sweep: m=" + std::to_string(m) + " is below 2");
    if (m > raw_bank.descriptions_per_label()) {
      fail(ErrorCode::InvalidInput, "insufficient descriptions: m=" + std::to_string(m) + " but the bank has " +
                                        std::to_string(raw_bank.descriptions_per_label()) + " per label");
    }
  }
  std::vector<SweepRow> rows;
  for (int m : m_values) {
    TrainConfig c = config;
    c.description_count = m;
    LabelDescriptionBank bank = raw_bank.truncated(m);
    if (!bank.embedded()) bank = embed_descriptions(bank, c.embedder);
    rows.push_back({m, train_and_score(c, labels, train_split, val_split, eval_split, bank)});
  }
  return rows;
}

void write_sweep_csv(const std::filesystem::path& path, const std::string& header, std::span<const SweepRow> rows) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << header << ",acc,f1\n" << std::setprecision(10);
  for (const auto& r : rows) out << r.value << ',' << r.metrics.acc << ',' << r.metrics.f1 << '\n';
}

}  // namespace amess
