#include "amess/data.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "amess/encoders.hpp"
#include "amess/error.hpp"
#include "amess/nn.hpp"

namespace amess {

using nlohmann::json;

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "unknown";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  fail(ErrorCode::Validation, "unknown split '" + std::string(s) + "'");
}

namespace {

[[noreturn]] void record_error(const std::string& id, const std::string& what) {
  fail(ErrorCode::Validation, "record '" + id + "': " + what);
}

ManifestRecord parse_record(const json& j) {
  ManifestRecord r;
  r.id = j.at("id").get<std::string>();
  try {
    if (j.contains("text_tokens")) r.text_tokens = j.at("text_tokens").get<std::vector<std::int64_t>>();
    r.text_feature_ref = j.value("text_feature_ref", "");
    r.video_feature_ref = j.value("video_feature_ref", "");
    r.audio_feature_ref = j.value("audio_feature_ref", "");
    r.label = j.at("label").get<std::string>();
    const std::string scope = j.value("scope", "in");
    if (scope == "in") {
      r.scope = Scope::In;
    } else if (scope == "out") {
      r.scope = Scope::Out;
    } else {
      record_error(r.id, "scope must be 'in' or 'out'");
    }
  } catch (const json::exception& e) {
    record_error(r.id, e.what());
  }
  return r;
}

}  // namespace

DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir) {
  DatasetManifest m;
  m.base_dir = base_dir;
  std::istringstream in(text);
  std::string line;
  bool have_header = false;
  std::set<std::string> ids;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail(ErrorCode::Validation, "manifest line " + std::to_string(line_no) + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) fail(ErrorCode::Validation, "manifest line " + std::to_string(line_no) + " is not an object");
    if (!j.contains("id")) {
      if (have_header || !m.records.empty()) {
        fail(ErrorCode::Validation, "manifest line " + std::to_string(line_no) + " has no id");
      }
      try {
        m.split = parse_split(j.at("split").get<std::string>());
        m.label_space = j.at("label_space").get<std::vector<std::string>>();
        if (j.contains("oos_label") && !j.at("oos_label").is_null()) m.oos_label = j.at("oos_label").get<std::string>();
      } catch (const json::exception& e) {
        fail(ErrorCode::Validation, std::string("manifest header is malformed: ") + e.what());
      }
      have_header = true;
      continue;
    }
    if (!have_header) fail(ErrorCode::Validation, "manifest must start with a header line");
    ManifestRecord r = parse_record(j);
    if (r.id.empty()) fail(ErrorCode::Validation, "manifest line " + std::to_string(line_no) + " has an empty id");
    if (!ids.insert(r.id).second) record_error(r.id, "duplicate id");
    m.records.push_back(std::move(r));
  }
  if (!have_header) fail(ErrorCode::Validation, "manifest has no header line");

  std::set<std::string> labels(m.label_space.begin(), m.label_space.end());
  if (labels.size() != m.label_space.size()) fail(ErrorCode::Validation, "manifest label_space has duplicates");
  if (m.label_space.size() < 2) fail(ErrorCode::Validation, "manifest label_space needs at least two labels");
  if (m.oos_label && labels.count(*m.oos_label) == 0) {
    fail(ErrorCode::Validation, "oos_label '" + *m.oos_label + "' is not in label_space");
  }
  for (const auto& r : m.records) {
    if (labels.count(r.label) == 0) record_error(r.id, "unknown label '" + r.label + "'");
    const bool is_oos = m.oos_label && r.label == *m.oos_label;
    if (is_oos != (r.scope == Scope::Out)) record_error(r.id, "scope does not match the out-of-scope label");
    if (r.text_tokens.empty() && r.text_feature_ref.empty()) record_error(r.id, "no text tokens or text feature ref");
    for (const auto* ref : {&r.text_feature_ref, &r.video_feature_ref, &r.audio_feature_ref}) {
      if (ref == &r.text_feature_ref && ref->empty()) continue;
      if (ref->empty()) record_error(r.id, "missing feature reference");
      if (!feature_ref_exists(base_dir, *ref)) record_error(r.id, "dangling feature reference '" + *ref + "'");
    }
  }
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str(), path.parent_path());
}

std::string serialize_manifest(const DatasetManifest& manifest) {
  std::string out;
  json header;
  header["split"] = std::string(to_string(manifest.split));
  header["label_space"] = manifest.label_space;
  if (manifest.oos_label) header["oos_label"] = *manifest.oos_label;
  out += header.dump() + "\n";
  for (const auto& r : manifest.records) {
    json j;
    j["id"] = r.id;
    if (!r.text_tokens.empty()) j["text_tokens"] = r.text_tokens;
    if (!r.text_feature_ref.empty()) j["text_feature_ref"] = r.text_feature_ref;
    j["video_feature_ref"] = r.video_feature_ref;
    j["audio_feature_ref"] = r.audio_feature_ref;
    j["label"] = r.label;
    j["scope"] = r.scope == Scope::In ? "in" : "out";
    out += j.dump() + "\n";
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write manifest " + path.string());
  out << serialize_manifest(manifest);
}

void SyntheticSpec::validate() const {
  require(n_samples > 0 && n_val >= 0 && n_test >= 0, "synthetic: sample counts must be positive");
  require(n_classes >= 2, "synthetic: need at least two classes");
  require(label_names.empty() || static_cast<int>(label_names.size()) == n_classes,
          "synthetic: label_names must list n_classes names");
  require(margin > 0.0, "synthetic: margin must be positive");
  require(oos_fraction >= 0.0 && oos_fraction < 1.0, "synthetic: oos_fraction must be in [0, 1)");
  require(text_tokens_min >= 1 && text_tokens_min <= text_tokens_max, "synthetic: bad text length range");
  require(video_frames_min >= 1 && video_frames_min <= video_frames_max, "synthetic: bad video length range");
  require(audio_frames_min >= 1 && audio_frames_min <= audio_frames_max, "synthetic: bad audio length range");
  const int axes_needed = n_classes + (oos_fraction > 0.0 ? 1 : 0);
  require(video_dim >= axes_needed && audio_dim >= axes_needed,
          "synthetic: feature dims must be at least the number of classes (+1 with out-of-scope samples)");
}

namespace {

constexpr std::int64_t kFillerVocab = 999;
constexpr std::int64_t kKeywordBase = 1000;
constexpr std::int64_t kKeywordsPerClass = 50;
constexpr double kKeywordProbability = 0.5;

Matrix orthonormal_basis(int dim, Rng& rng) {
  Matrix g(dim, dim);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  Eigen::HouseholderQR<Matrix> qr(g);
  return qr.householderQ() * Matrix::Identity(dim, dim);
}

std::string content_file(const std::filesystem::path& out_dir, const FeatureRecord& rec) {
  const std::string line = serialize_feature_record(rec);
  char name[32];
  std::snprintf(name, sizeof(name), "%016llx", static_cast<unsigned long long>(fnv1a(line.data(), line.size())));
  const std::string rel = std::string("features/") + name + ".jsonl";
  const auto path = out_dir / rel;
  if (!std::filesystem::exists(path)) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
    out << line << '\n';
  }
  return rel;
}

Matrix frames_around(const RowVector& center, int length, Rng& rng) {
  Matrix m(length, center.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = center(c) + rng.normal();
  }
  return m;
}

int uniform_int(Rng& rng, int lo, int hi) { return lo + rng.below(hi - lo + 1); }

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir / "features");
  Rng rng(spec.seed);

  std::vector<std::string> names = spec.label_names;
  if (names.empty()) {
    for (int c = 0; c < spec.n_classes; ++c) names.push_back("class_" + std::to_string(c));
  }
  const bool with_oos = spec.oos_fraction > 0.0;
  std::vector<std::string> label_space = names;
  if (with_oos) label_space.push_back(spec.oos_label);

  const Matrix video_basis = orthonormal_basis(spec.video_dim, rng);
  const Matrix audio_basis = orthonormal_basis(spec.audio_dim, rng);
  const double radius = spec.margin / std::sqrt(2.0);  // pairwise center distance == margin
  auto center = [&](const Matrix& basis, int axis, double scale) { return RowVector(scale * basis.col(axis).transpose()); };

  SyntheticDataset out;
  for (int c = 0; c < spec.n_classes; ++c) {
    const RowVector v = center(video_basis, c, radius);
    const RowVector a = center(audio_basis, c, radius);
    out.video_centers.emplace_back(v.data(), v.data() + v.size());
    out.audio_centers.emplace_back(a.data(), a.data() + a.size());
  }

  auto make_split = [&](Split split, int n) {
    DatasetManifest m;
    m.split = split;
    m.label_space = label_space;
    if (with_oos) m.oos_label = spec.oos_label;
    m.base_dir = out_dir;
    const int n_oos = with_oos ? static_cast<int>(std::floor(spec.oos_fraction * n)) : 0;
    std::vector<int> classes;
    for (int i = 0; i < n - n_oos; ++i) classes.push_back(i % spec.n_classes);
    for (int i = 0; i < n_oos; ++i) classes.push_back(-1);
    for (int i = static_cast<int>(classes.size()) - 1; i > 0; --i) std::swap(classes[i], classes[rng.below(i + 1)]);

    for (int i = 0; i < n; ++i) {
      const int c = classes[static_cast<std::size_t>(i)];
      char id[32];
      std::snprintf(id, sizeof(id), "%s-%05d", std::string(to_string(split)).c_str(), i);
      ManifestRecord r;
      r.id = id;
      r.label = c >= 0 ? names[static_cast<std::size_t>(c)] : spec.oos_label;
      r.scope = c >= 0 ? Scope::In : Scope::Out;

      const int n_tokens = uniform_int(rng, spec.text_tokens_min, spec.text_tokens_max);
      for (int t = 0; t < n_tokens; ++t) {
        if (c >= 0 && rng.uniform() < kKeywordProbability) {
          r.text_tokens.push_back(kKeywordBase + c * kKeywordsPerClass + rng.below(kKeywordsPerClass));
        } else {
          r.text_tokens.push_back(1 + rng.below(kFillerVocab));
        }
      }
      const RowVector vc = c >= 0 ? center(video_basis, c, radius) : center(video_basis, spec.n_classes, 2.0 * spec.margin);
      const RowVector ac = c >= 0 ? center(audio_basis, c, radius) : center(audio_basis, spec.n_classes, 2.0 * spec.margin);
      FeatureRecord video{r.id, Modality::Video,
                          frames_around(vc, uniform_int(rng, spec.video_frames_min, spec.video_frames_max), rng)};
      FeatureRecord audio{r.id, Modality::Audio,
                          frames_around(ac, uniform_int(rng, spec.audio_frames_min, spec.audio_frames_max), rng)};
      r.video_feature_ref = content_file(out_dir, video);
      r.audio_feature_ref = content_file(out_dir, audio);
      m.records.push_back(std::move(r));
    }
    write_manifest(out_dir / (std::string(to_string(split)) + ".jsonl"), m);
    return m;
  };

  out.train = make_split(Split::Train, spec.n_samples);
  out.val = make_split(Split::Val, spec.n_val);
  out.test = make_split(Split::Test, spec.n_test);
  return out;
}

}  // namespace amess
