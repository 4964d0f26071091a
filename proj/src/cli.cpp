#include "amess/cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "amess/error.hpp"
#include "amess/train_eval.hpp"

namespace amess {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out_dir = "out";
  std::vector<std::string> overrides;
};

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::Validation, "config " + path.string() + " is not valid JSON: " + e.what());
  }
}

// `a.b.c=value`; the value is parsed as JSON and falls back to a string.
void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) fail(ErrorCode::InvalidInput, "--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &j;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) path.push_back(part);
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    json& next = (*node)[path[i]];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) fail(ErrorCode::InvalidInput, "--set: '" + path[i] + "' is not a section");
    node = &next;
  }
  (*node)[path.back()] = value;
}

TrainConfig make_config(const Globals& g) {
  json j = json::object();
  fs::path base;
  if (!g.config.empty()) {
    j = read_json_file(g.config);
    base = fs::absolute(g.config).parent_path();
  }
  for (const auto& o : g.overrides) apply_override(j, o);
  if (g.seed_given) {
    j["seed"] = g.seed;
    j["synthetic"]["seed"] = g.seed;
  }
  return config_from_json(j, base);
}

fs::path manifest_path(const TrainConfig& c, Split split, const fs::path& out_dir) {
  const std::string& p = split == Split::Train ? c.train_manifest
                         : split == Split::Val ? c.val_manifest
                                               : c.test_manifest;
  if (!p.empty()) return p;
  return out_dir / "data" / (std::string(to_string(split)) + ".jsonl");
}

LabelDescriptionBank raw_bank(const TrainConfig& c) {
  if (c.descriptions.empty()) fail(ErrorCode::InvalidInput, "no description file configured (key \"descriptions\")");
  return load_descriptions(c.descriptions);
}

LabelDescriptionBank embedded_bank(const TrainConfig& c) {
  const LabelDescriptionBank raw = raw_bank(c);
  if (c.description_count > raw.descriptions_per_label()) {
    fail(ErrorCode::InvalidInput, "insufficient descriptions: description_count=" + std::to_string(c.description_count) +
                                      " but the bank has " + std::to_string(raw.descriptions_per_label()) + " per label");
  }
  return embed_descriptions(raw.truncated(c.description_count), c.embedder);
}

struct Splits {
  LabelSpace labels;
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> eval;
};

LabelSpace label_space_of(const DatasetManifest& m) { return {m.label_space, m.oos_label}; }

void require_same_labels(const LabelSpace& a, const DatasetManifest& m, const std::string& what) {
  if (a.names != m.label_space || a.oos_label != m.oos_label) {
    fail(ErrorCode::Validation, "label space of " + what + " differs from the training split");
  }
}

Splits load_splits(const TrainConfig& c, const fs::path& out_dir, Split eval_split) {
  Splits s;
  const DatasetManifest train = load_manifest(manifest_path(c, Split::Train, out_dir));
  const DatasetManifest val = load_manifest(manifest_path(c, Split::Val, out_dir));
  s.labels = label_space_of(train);
  require_same_labels(s.labels, val, "the validation split");
  s.train = encode_manifest(train, c);
  s.val = encode_manifest(val, c);
  if (eval_split == Split::Val) {
    s.eval = s.val;
  } else {
    const DatasetManifest test = load_manifest(manifest_path(c, eval_split, out_dir));
    require_same_labels(s.labels, test, "the evaluation split");
    s.eval = encode_manifest(test, c);
  }
  return s;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Split parse_eval_split(const std::string& s) {
  const Split split = parse_split(s);
  if (split == Split::Train) fail(ErrorCode::InvalidInput, "evaluation split must be val or test");
  return split;
}

int cmd_gen_data(const Globals& g, std::ostream& out) {
  const TrainConfig c = make_config(g);
  SyntheticSpec spec = c.synthetic;
  if (spec.label_names.empty() && !c.descriptions.empty()) {
    const LabelDescriptionBank bank = raw_bank(c);
    if (static_cast<int>(bank.labels.size()) < spec.n_classes) {
      fail(ErrorCode::InvalidInput, "synthetic: n_classes exceeds the labels in " + c.descriptions);
    }
    spec.label_names.assign(bank.labels.begin(), bank.labels.begin() + spec.n_classes);
    if (bank.oos_label) spec.oos_label = *bank.oos_label;
  }
  const fs::path dir = fs::path(g.out_dir) / "data";
  fs::create_directories(dir);
  const SyntheticDataset d = generate_synthetic(spec, dir);
  out << "wrote " << d.train.records.size() << '/' << d.val.records.size() << '/' << d.test.records.size()
      << " train/val/test records to " << dir.string() << '\n';
  return 0;
}

int cmd_validate(const Globals& g, const std::vector<std::string>& manifests, std::ostream& out) {
  std::vector<fs::path> paths(manifests.begin(), manifests.end());
  if (paths.empty()) {
    const TrainConfig c = make_config(g);
    for (Split s : {Split::Train, Split::Val, Split::Test}) paths.push_back(manifest_path(c, s, g.out_dir));
  }
  for (const auto& p : paths) {
    const DatasetManifest m = load_manifest(p);
    out << "ok " << p.string() << ": " << m.records.size() << " records, " << m.label_space.size() << " labels\n";
  }
  return 0;
}

int cmd_embed(const Globals& g, std::ostream& out) {
  const TrainConfig c = make_config(g);
  const LabelDescriptionBank bank = embedded_bank(c);
  fs::create_directories(g.out_dir);
  const fs::path path = fs::path(g.out_dir) / "descriptions.embedded.json";
  save_embedded_bank(path, bank);
  out << "embedded " << bank.labels.size() << " labels x " << bank.descriptions_per_label() << " descriptions (d="
      << bank.dim() << ") to " << path.string() << '\n';
  return 0;
}

int cmd_train(const Globals& g, std::ostream& out) {
  const TrainConfig c = make_config(g);
  const LabelDescriptionBank bank = embedded_bank(c);
  const Splits s = load_splits(c, g.out_dir, Split::Val);
  const TrainResult r = train(c, s.labels, s.train, s.val, bank);
  fs::create_directories(g.out_dir);
  const fs::path dir(g.out_dir);
  save_checkpoint(dir / "model.ckpt", checkpoint_for(*r.model, c, s.labels));
  write_history_csv(dir / "history.csv", r.history);
  const MetricsReport val = evaluate(*r.model, s.val, s.labels, c.oos_mode, c.averaging);
  write_json(dir / "val_metrics.json", val.to_json());
  out << "trained " << r.history.size() << " epochs; best epoch " << r.best_epoch << " val acc " << r.best_val_acc
      << "; checkpoint " << (dir / "model.ckpt").string() << '\n';
  return 0;
}

int cmd_eval(const Globals& g, const std::string& checkpoint, const std::string& split_name,
             const std::string& manifest, bool oos_flag, std::ostream& out) {
  const fs::path ckpt = checkpoint.empty() ? fs::path(g.out_dir) / "model.ckpt" : fs::path(checkpoint);
  const LoadedModel loaded = load_model(ckpt);
  const TrainConfig data_config = g.config.empty() ? loaded.config : make_config(g);
  const fs::path path = !manifest.empty() ? fs::path(manifest)
                                          : manifest_path(data_config, parse_eval_split(split_name), g.out_dir);
  const DatasetManifest m = load_manifest(path);
  if (m.label_space != loaded.labels.names) {
    fail(ErrorCode::Validation, "label space of " + path.string() + " does not match the checkpoint");
  }
  const std::vector<Sample> samples = encode_manifest(m, loaded.config);
  const bool oos = oos_flag || loaded.config.oos_mode;
  const MetricsReport r = evaluate(*loaded.model, samples, loaded.labels, oos, loaded.config.averaging);
  fs::create_directories(g.out_dir);
  write_json(fs::path(g.out_dir) / "metrics.json", r.to_json());
  json summary{{"acc", r.acc}, {"f1", r.f1}, {"precision", r.precision}, {"recall", r.recall}};
  if (r.f1_is) summary["F1-IS"] = *r.f1_is;
  if (r.f1_os) summary["F1-OS"] = *r.f1_os;
  out << summary.dump() << '\n';
  return 0;
}

int cmd_sweep_anchors(const Globals& g, const std::vector<int>& ks, const std::string& split_name,
                      std::ostream& out) {
  const TrainConfig c = make_config(g);
  const LabelDescriptionBank bank = embedded_bank(c);
  const Splits s = load_splits(c, g.out_dir, parse_eval_split(split_name));
  const auto rows = anchor_sweep(c, ks, s.labels, s.train, s.val, s.eval, bank);
  fs::create_directories(g.out_dir);
  const fs::path path = fs::path(g.out_dir) / "anchor_sweep.csv";
  write_sweep_csv(path, "k", rows);
  out << "wrote " << rows.size() << " rows to " << path.string() << '\n';
  return 0;
}

int cmd_sweep_descriptions(const Globals& g, const std::vector<int>& ms, const std::string& split_name,
                           std::ostream& out) {
  const TrainConfig c = make_config(g);
  const LabelDescriptionBank raw = raw_bank(c);
  const Splits s = load_splits(c, g.out_dir, parse_eval_split(split_name));
  const auto rows = description_count_sweep(c, ms, s.labels, s.train, s.val, s.eval, raw);
  fs::create_directories(g.out_dir);
  const fs::path path = fs::path(g.out_dir) / "description_sweep.csv";
  write_sweep_csv(path, "m", rows);
  out << "wrote " << rows.size() << " rows to " << path.string() << '\n';
  return 0;
}

int cmd_pca(const Globals& g, const std::string& checkpoint, const std::vector<std::string>& labels,
            const std::string& split_name, std::ostream& out) {
  const fs::path ckpt = checkpoint.empty() ? fs::path(g.out_dir) / "model.ckpt" : fs::path(checkpoint);
  const LoadedModel loaded = load_model(ckpt);
  const TrainConfig data_config = g.config.empty() ? loaded.config : make_config(g);
  const LabelDescriptionBank bank = embedded_bank(loaded.config);
  const DatasetManifest m = load_manifest(manifest_path(data_config, parse_split(split_name), g.out_dir));
  if (m.label_space != loaded.labels.names) fail(ErrorCode::Validation, "split label space does not match the checkpoint");
  const std::vector<Sample> samples = encode_manifest(m, loaded.config);

  // Forward once; group pooled E_f and T_f rows by label.
  std::map<int, std::vector<std::pair<RowVector, RowVector>>> by_label;
  for (const auto& smp : samples) {
    const SampleOutput o = loaded.model->forward(smp.text, smp.video, smp.audio);
    RowVector before = RowVector::Zero(o.encoded.cols());
    int valid = 0;
    for (std::size_t r = 0; r < o.mask.size(); ++r) {
      if (!o.mask[r]) continue;
      before += o.encoded.value().row(static_cast<Eigen::Index>(r));
      ++valid;
    }
    before /= std::max(valid, 1);
    by_label[smp.label].push_back({before, o.token.value().row(0)});
  }

  fs::create_directories(g.out_dir);
  for (const auto& name : labels) {
    const auto it = std::find(loaded.labels.names.begin(), loaded.labels.names.end(), name);
    if (it == loaded.labels.names.end()) fail(ErrorCode::InvalidInput, "label '" + name + "' is not in the label space");
    const int label = static_cast<int>(it - loaded.labels.names.begin());
    const int row = bank.index_of(name);
    if (row < 0) fail(ErrorCode::InvalidInput, "label '" + name + "' has no descriptions");
    const auto& pairs = by_label[label];
    if (pairs.empty()) fail(ErrorCode::InvalidInput, "split has no samples of label '" + name + "'");
    Matrix before(static_cast<Eigen::Index>(pairs.size()), bank.dim());
    Matrix after(static_cast<Eigen::Index>(pairs.size()), bank.dim());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      before.row(static_cast<Eigen::Index>(i)) = pairs[i].first;
      after.row(static_cast<Eigen::Index>(i)) = pairs[i].second;
    }
    const auto points = pca_semantic_analysis(before, after, bank.embeddings[static_cast<std::size_t>(row)]);
    std::string file = name;
    std::replace(file.begin(), file.end(), ' ', '_');
    const fs::path path = fs::path(g.out_dir) / ("pca_" + file + ".csv");
    write_pca_csv(path, name, points);
    out << "wrote " << path.string() << '\n';
  }
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Anchor-based multimodal intent recognition with label-description synchronization", "amess"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON config file");
  auto* seed_opt = app.add_option("--seed", g.seed, "Override the run seed (and the synthetic data seed)");
  app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();
  app.add_option("--set", g.overrides, "Override a config key, e.g. --set epochs=5 --set synthetic.margin=4")
      ->take_all();

  auto* train_cmd = app.add_subcommand("train", "Train a model and write model.ckpt, history.csv");

  std::string checkpoint, split = "test", manifest;
  bool oos = false;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint (default <out-dir>/model.ckpt)");
  eval_cmd->add_option("--split", split, "val or test")->capture_default_str();
  eval_cmd->add_option("--manifest", manifest, "Evaluate this manifest instead of a configured split");
  eval_cmd->add_flag("--oos", oos, "Report F1-IS and F1-OS");

  std::vector<int> ks;
  auto* sweep_k = app.add_subcommand("sweep-anchors", "Retrain for every anchor count k");
  sweep_k->add_option("--k", ks, "Comma-separated anchor counts")->required()->delimiter(',');
  sweep_k->add_option("--split", split, "Evaluation split")->capture_default_str();

  std::vector<int> ms;
  auto* sweep_m = app.add_subcommand("sweep-descriptions", "Retrain for every description count m");
  sweep_m->add_option("--m", ms, "Comma-separated description counts")->required()->delimiter(',');
  sweep_m->add_option("--split", split, "Evaluation split")->capture_default_str();

  std::vector<std::string> pca_labels;
  auto* pca = app.add_subcommand("analyze-pca", "Write one PCA CSV per label");
  pca->add_option("--checkpoint", checkpoint, "Checkpoint (default <out-dir>/model.ckpt)");
  pca->add_option("--labels", pca_labels, "Comma-separated label names")->required()->delimiter(',');
  pca->add_option("--split", split, "Split to project")->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset under <out-dir>/data");

  std::vector<std::string> manifests;
  auto* validate = app.add_subcommand("validate-data", "Validate manifests");
  validate->add_option("--manifest", manifests, "Manifest file (repeatable; default: configured splits)");

  auto* embed = app.add_subcommand("embed-descriptions", "Embed the description bank");

  std::vector<std::string> args;
  for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error[usage]: " << e.what() << '\n' << app.help();
    return 2;
  }
  g.seed_given = seed_opt->count() > 0;

  try {
    if (train_cmd->parsed()) return cmd_train(g, out);
    if (eval_cmd->parsed()) return cmd_eval(g, checkpoint, split, manifest, oos, out);
    if (sweep_k->parsed()) return cmd_sweep_anchors(g, ks, split, out);
    if (sweep_m->parsed()) return cmd_sweep_descriptions(g, ms, split, out);
    if (pca->parsed()) return cmd_pca(g, checkpoint, pca_labels, split, out);
    if (gen->parsed()) return cmd_gen_data(g, out);
    if (validate->parsed()) return cmd_validate(g, manifests, out);
    if (embed->parsed()) return cmd_embed(g, out);
  } catch (const Error& e) {
    err << "error[" << to_string(e.code()) << "]: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace amess
