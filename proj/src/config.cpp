#include "amess/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "amess/error.hpp"

namespace amess {

using nlohmann::json;

namespace {

std::string kind_name(EncoderKind k) { return k == EncoderKind::Mock ? "mock" : "external"; }

EncoderKind parse_encoder_kind(const std::string& s) {
  if (s == "mock") return EncoderKind::Mock;
  if (s == "external") return EncoderKind::External;
  fail(ErrorCode::Validation, "unknown encoder kind '" + s + "'");
}

json encoder_json(const EncoderSpec& s) {
  return {{"kind", kind_name(s.kind)}, {"output_dim", s.output_dim}, {"seed", s.seed}};
}

void read_encoder(const json& j, EncoderSpec& s, const char* what) {
  static const std::set<std::string> keys{"kind", "output_dim", "seed", "max_length"};
  for (const auto& [k, v] : j.items()) {
    if (keys.count(k) == 0) fail(ErrorCode::Validation, std::string("unknown key '") + k + "' in encoders." + what);
  }
  if (j.contains("kind")) s.kind = parse_encoder_kind(j.at("kind").get<std::string>());
  if (j.contains("output_dim")) s.output_dim = j.at("output_dim").get<int>();
  if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
}

json synthetic_json(const SyntheticSpec& s) {
  return {{"n_samples", s.n_samples},
          {"n_val", s.n_val},
          {"n_test", s.n_test},
          {"n_classes", s.n_classes},
          {"label_names", s.label_names},
          {"oos_label", s.oos_label},
          {"text_tokens", {s.text_tokens_min, s.text_tokens_max}},
          {"video_frames", {s.video_frames_min, s.video_frames_max}},
          {"audio_frames", {s.audio_frames_min, s.audio_frames_max}},
          {"video_dim", s.video_dim},
          {"audio_dim", s.audio_dim},
          {"margin", s.margin},
          {"oos_fraction", s.oos_fraction},
          {"seed", s.seed}};
}

void read_range(const json& j, int& lo, int& hi) {
  const auto v = j.get<std::vector<int>>();
  if (v.size() != 2) fail(ErrorCode::Validation, "length ranges must be [min, max]");
  lo = v[0];
  hi = v[1];
}

void read_synthetic(const json& j, SyntheticSpec& s) {
  for (const auto& [k, v] : j.items()) {
    if (k == "n_samples") s.n_samples = v.get<int>();
    else if (k == "n_val") s.n_val = v.get<int>();
    else if (k == "n_test") s.n_test = v.get<int>();
    else if (k == "n_classes") s.n_classes = v.get<int>();
    else if (k == "label_names") s.label_names = v.get<std::vector<std::string>>();
    else if (k == "oos_label") s.oos_label = v.get<std::string>();
    else if (k == "text_tokens") read_range(v, s.text_tokens_min, s.text_tokens_max);
    else if (k == "video_frames") read_range(v, s.video_frames_min, s.video_frames_max);
    else if (k == "audio_frames") read_range(v, s.audio_frames_min, s.audio_frames_max);
    else if (k == "video_dim") s.video_dim = v.get<int>();
    else if (k == "audio_dim") s.audio_dim = v.get<int>();
    else if (k == "margin") s.margin = v.get<double>();
    else if (k == "oos_fraction") s.oos_fraction = v.get<double>();
    else if (k == "seed") s.seed = v.get<std::uint64_t>();
    else fail(ErrorCode::Validation, "unknown key '" + k + "' in synthetic");
  }
}

std::string resolve(const std::string& p, const std::filesystem::path& base) {
  if (p.empty() || base.empty()) return p;
  const std::filesystem::path path(p);
  return path.is_absolute() ? p : (base / path).lexically_normal().string();
}

}  // namespace

void TrainConfig::sync_derived() {
  text_encoder.output_dim = dim;
  text_encoder.max_length = text_len;
  video_encoder.max_length = video_len;
  audio_encoder.max_length = audio_len;
  embedder.dim = dim;
}

void TrainConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorCode::Validation, "config: " + what);
  };
  check(lr > 0.0, "lr must be positive");
  check(batch_size > 0, "batch_size must be positive");
  check(epochs > 0, "epochs must be positive");
  check(patience > 0 && patience <= epochs, "patience must be in [1, epochs]");
  check(weight_decay >= 0.0, "weight_decay must be non-negative");
  check(grad_clip >= 0.0, "grad_clip must be non-negative (0 disables)");
  check(tau > 0.0, "tau must be positive");
  check(text_len >= 2 && video_len > 0 && audio_len > 0, "sequence lengths must be positive (text >= 2)");
  check(anchors >= 1 && anchors <= text_len, "k must lie in [1, text_len]");
  check(dim > 0 && heads > 0 && dim % heads == 0, "dim must be positive and divisible by heads");
  check(ff_hidden >= 0, "ff_hidden must be non-negative");
  check(encoder_depth >= 0, "encoder_depth must be non-negative");
  check(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  check(layer_norm_eps > 0.0, "layer_norm_eps must be positive");
  check(description_count >= 2, "description_count must be at least 2");
  check(video_encoder.output_dim > 0 && audio_encoder.output_dim > 0, "encoder output dims must be positive");
  check(text_encoder.output_dim == dim, "text encoder output_dim must equal dim");
}

ModelConfig TrainConfig::model_config(int label_count) const {
  ModelConfig m;
  m.a_me.text_len = text_len;
  m.a_me.dim = dim;
  m.a_me.video_dim = video_encoder.output_dim;
  m.a_me.audio_dim = audio_encoder.output_dim;
  m.a_me.anchors = anchors;
  m.a_me.heads = heads;
  m.a_me.ff_hidden = effective_ff_hidden();
  m.a_me.dropout = dropout;
  m.a_me.layer_norm_eps = layer_norm_eps;
  m.encoder_depth = encoder_depth;
  m.encoder_ff_hidden = effective_ff_hidden();
  m.encoder_kind = encoder_kind;
  m.encoder_weights = encoder_weights;
  m.pooling = pooling;
  m.label_count = label_count;
  return m;
}

json to_json(const TrainConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["patience"] = c.patience;
  j["weight_decay"] = c.weight_decay;
  j["grad_clip"] = c.grad_clip;
  j["tau"] = c.tau;
  j["k"] = c.anchors;
  j["text_len"] = c.text_len;
  j["video_len"] = c.video_len;
  j["audio_len"] = c.audio_len;
  j["dim"] = c.dim;
  j["heads"] = c.heads;
  j["ff_hidden"] = c.ff_hidden;
  j["encoder_depth"] = c.encoder_depth;
  j["encoder_kind"] = c.encoder_kind == EncoderStackKind::Toy ? "toy" : "external";
  j["encoder_weights"] = c.encoder_weights;
  j["dropout"] = c.dropout;
  j["layer_norm_eps"] = c.layer_norm_eps;
  j["negatives"] = c.negatives == NegativeScope::Label ? "label" : "batch";
  j["include_positive_in_denominator"] = c.include_positive_in_denominator;
  j["pooling"] = c.pooling == Pooling::Mean ? "mean" : "cls";
  j["averaging"] = c.averaging == Averaging::Macro ? "macro" : "weighted";
  j["encoders"] = {{"text", encoder_json(c.text_encoder)},
                   {"video", encoder_json(c.video_encoder)},
                   {"audio", encoder_json(c.audio_encoder)}};
  j["descriptions"] = c.descriptions;
  j["description_count"] = c.description_count;
  j["embedder"] = {{"kind", c.embedder.kind == EmbedderKind::Mock ? "mock" : "external"},
                   {"seed", c.embedder.seed},
                   {"path", c.embedder.path.string()}};
  j["data"] = {{"train", c.train_manifest}, {"val", c.val_manifest}, {"test", c.test_manifest}};
  j["oos_mode"] = c.oos_mode;
  j["synthetic"] = synthetic_json(c.synthetic);
  return j;
}

TrainConfig config_from_json(const json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) fail(ErrorCode::Validation, "config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "lr") c.lr = v.get<double>();
      else if (k == "batch_size") c.batch_size = v.get<int>();
      else if (k == "epochs") c.epochs = v.get<int>();
      else if (k == "patience") c.patience = v.get<int>();
      else if (k == "weight_decay") c.weight_decay = v.get<double>();
      else if (k == "grad_clip") c.grad_clip = v.get<double>();
      else if (k == "tau") c.tau = v.get<double>();
      else if (k == "k") c.anchors = v.get<int>();
      else if (k == "text_len") c.text_len = v.get<int>();
      else if (k == "video_len") c.video_len = v.get<int>();
      else if (k == "audio_len") c.audio_len = v.get<int>();
      else if (k == "dim") c.dim = v.get<int>();
      else if (k == "heads") c.heads = v.get<int>();
      else if (k == "ff_hidden") c.ff_hidden = v.get<int>();
      else if (k == "encoder_depth") c.encoder_depth = v.get<int>();
      else if (k == "encoder_kind") {
        const auto s = v.get<std::string>();
        if (s != "toy" && s != "external") fail(ErrorCode::Validation, "encoder_kind must be toy or external");
        c.encoder_kind = s == "toy" ? EncoderStackKind::Toy : EncoderStackKind::External;
      } else if (k == "encoder_weights") c.encoder_weights = resolve(v.get<std::string>(), base_dir);
      else if (k == "dropout") c.dropout = v.get<double>();
      else if (k == "layer_norm_eps") c.layer_norm_eps = v.get<double>();
      else if (k == "negatives") {
        const auto s = v.get<std::string>();
        if (s != "label" && s != "batch") fail(ErrorCode::Validation, "negatives must be label or batch");
        c.negatives = s == "label" ? NegativeScope::Label : NegativeScope::Batch;
      } else if (k == "include_positive_in_denominator") c.include_positive_in_denominator = v.get<bool>();
      else if (k == "pooling") {
        const auto s = v.get<std::string>();
        if (s != "mean" && s != "cls") fail(ErrorCode::Validation, "pooling must be mean or cls");
        c.pooling = s == "mean" ? Pooling::Mean : Pooling::Cls;
      } else if (k == "averaging") {
        const auto s = v.get<std::string>();
        if (s != "macro" && s != "weighted") fail(ErrorCode::Validation, "averaging must be macro or weighted");
        c.averaging = s == "macro" ? Averaging::Macro : Averaging::Weighted;
      } else if (k == "encoders") {
        for (const auto& [name, spec] : v.items()) {
          if (name == "text") read_encoder(spec, c.text_encoder, "text");
          else if (name == "video") read_encoder(spec, c.video_encoder, "video");
          else if (name == "audio") read_encoder(spec, c.audio_encoder, "audio");
          else fail(ErrorCode::Validation, "unknown encoder '" + name + "'");
        }
      } else if (k == "descriptions") c.descriptions = resolve(v.get<std::string>(), base_dir);
      else if (k == "description_count") c.description_count = v.get<int>();
      else if (k == "embedder") {
        for (const auto& [ek, ev] : v.items()) {
          if (ek == "kind") {
            const auto s = ev.get<std::string>();
            if (s != "mock" && s != "external") fail(ErrorCode::Validation, "embedder kind must be mock or external");
            c.embedder.kind = s == "mock" ? EmbedderKind::Mock : EmbedderKind::External;
          } else if (ek == "seed") c.embedder.seed = ev.get<std::uint64_t>();
          else if (ek == "path") c.embedder.path = resolve(ev.get<std::string>(), base_dir);
          else fail(ErrorCode::Validation, "unknown key '" + ek + "' in embedder");
        }
      } else if (k == "data") {
        for (const auto& [dk, dv] : v.items()) {
          if (dk == "train") c.train_manifest = resolve(dv.get<std::string>(), base_dir);
          else if (dk == "val") c.val_manifest = resolve(dv.get<std::string>(), base_dir);
          else if (dk == "test") c.test_manifest = resolve(dv.get<std::string>(), base_dir);
          else fail(ErrorCode::Validation, "unknown key '" + dk + "' in data");
        }
      } else if (k == "oos_mode") c.oos_mode = v.get<bool>();
      else if (k == "synthetic") read_synthetic(v, c.synthetic);
      else fail(ErrorCode::Validation, "unknown config key '" + k + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Validation, std::string("config has a value of the wrong type: ") + e.what());
  }
  c.sync_derived();
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::Validation, "config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j, std::filesystem::absolute(path).parent_path());
}

}  // namespace amess
