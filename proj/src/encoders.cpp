#include "amess/encoders.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "amess/error.hpp"

namespace amess {

using nlohmann::json;

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::Text: return "text";
    case Modality::Video: return "video";
    case Modality::Audio: return "audio";
  }
  return "unknown";
}

Modality parse_modality(std::string_view s) {
  if (s == "text") return Modality::Text;
  if (s == "video") return Modality::Video;
  if (s == "audio") return Modality::Audio;
  fail(ErrorCode::Validation, "unknown modality '" + std::string(s) + "'");
}

void ModalityEmbedding::validate() const {
  require(data.rows() > 0 && data.cols() > 0, "modality embedding must have positive length and dim");
  require(static_cast<Eigen::Index>(mask.size()) == data.rows(), "modality embedding mask length mismatch");
  require(data.allFinite(), "modality embedding contains non-finite values");
}

std::size_t ModalityEmbedding::valid_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

namespace {

void check_spec(const EncoderSpec& spec) {
  require(spec.output_dim > 0, "encoder output_dim must be positive");
  require(spec.max_length > 0, "encoder max_length must be positive");
}

Matrix gaussian_row(std::uint64_t seed, std::int64_t token, int dim) {
  Rng rng(mix64(seed ^ mix64(static_cast<std::uint64_t>(token))));
  Matrix row(1, dim);
  for (int j = 0; j < dim; ++j) row(0, j) = rng.normal();
  return row;
}

// Seeded Gaussian projection shared by the continuous-input mock encoders.
ModalityEmbedding encode_continuous(const Matrix& input, const EncoderSpec& spec, Modality modality) {
  check_spec(spec);
  require(input.rows() > 0 && input.cols() > 0, std::string(to_string(modality)) + " input is empty");
  require(input.allFinite(), std::string(to_string(modality)) + " input contains non-finite values");
  ModalityEmbedding out;
  out.modality = modality;
  const Eigen::Index length = std::min<Eigen::Index>(input.rows(), spec.max_length);
  out.truncated = input.rows() > spec.max_length;
  const Matrix kept = input.topRows(length);
  if (spec.kind == EncoderKind::External) {
    require(input.cols() == spec.output_dim, std::string(to_string(modality)) +
                                                 " features have dim " + std::to_string(input.cols()) +
                                                 ", expected " + std::to_string(spec.output_dim));
    out.data = kept;
  } else {
    const std::uint64_t tag = mix64(static_cast<std::uint64_t>(modality) + 1) ^
                              mix64(static_cast<std::uint64_t>(input.cols()) << 20);
    Rng rng(mix64(spec.seed ^ tag));
    Matrix w(input.cols(), spec.output_dim);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
    out.data = kept * w / std::sqrt(static_cast<double>(input.cols()));
  }
  out.mask.assign(static_cast<std::size_t>(length), true);
  return out;
}

}  // namespace

ModalityEmbedding encode_text(std::span<const std::int64_t> token_ids, const EncoderSpec& spec) {
  check_spec(spec);
  require(!token_ids.empty(), "text input is empty");
  require(spec.kind == EncoderKind::Mock, "token ids require a mock text encoder; external text uses features");
  const std::size_t wanted = token_ids.size() + 1;
  const std::size_t length = std::min<std::size_t>(wanted, static_cast<std::size_t>(spec.max_length));
  ModalityEmbedding out;
  out.modality = Modality::Text;
  out.truncated = wanted > length;
  out.data.resize(static_cast<Eigen::Index>(length), spec.output_dim);
  out.data.row(0) = gaussian_row(spec.seed, kClsTokenId, spec.output_dim);
  for (std::size_t i = 1; i < length; ++i) {
    out.data.row(static_cast<Eigen::Index>(i)) = gaussian_row(spec.seed, token_ids[i - 1], spec.output_dim);
  }
  out.mask.assign(length, true);
  return out;
}

ModalityEmbedding encode_text_features(const Matrix& features, const EncoderSpec& spec) {
  EncoderSpec external = spec;
  external.kind = EncoderKind::External;
  ModalityEmbedding out = encode_continuous(features, external, Modality::Text);
  return out;
}

ModalityEmbedding encode_video(const Matrix& frames, const EncoderSpec& spec) {
  return encode_continuous(frames, spec, Modality::Video);
}

ModalityEmbedding encode_audio(const Matrix& waveform, const EncoderSpec& spec) {
  return encode_continuous(waveform, spec, Modality::Audio);
}

std::vector<int> alignment_rows(int source_len, int target_len) {
  require(source_len > 0 && target_len > 0, "alignment lengths must be positive");
  std::vector<int> rows;
  if (source_len <= target_len) {
    for (int i = 0; i < source_len; ++i) rows.push_back(i);
  } else {
    for (int i = 0; i < target_len; ++i) {
      rows.push_back(static_cast<int>((static_cast<long long>(i) * source_len) / target_len));
    }
  }
  return rows;
}

namespace {

AlignedSequence resample(const ModalityEmbedding& emb, int target_len, const Linear* proj) {
  emb.validate();
  require(target_len > 0, "align: target length must be positive");
  const int source_len = static_cast<int>(emb.length());
  const std::vector<int> rows = alignment_rows(source_len, target_len);

  ag::Var x = ag::constant(emb.data);
  if (source_len > target_len) x = ag::gather_rows(x, rows);
  if (proj != nullptr) x = proj->forward(x);

  AlignedSequence out;
  for (int r : rows) out.mask.push_back(emb.mask[static_cast<std::size_t>(r)]);
  if (static_cast<int>(rows.size()) < target_len) {
    const auto pad = static_cast<Eigen::Index>(target_len - static_cast<int>(rows.size()));
    std::vector<ag::Var> parts{x, ag::constant(Matrix::Zero(pad, x.cols()))};
    x = ag::concat_rows(parts);
    out.mask.resize(static_cast<std::size_t>(target_len), false);
  }
  // Rows that were already invalid in the source are zeroed as well.
  if (std::find(out.mask.begin(), out.mask.end(), false) != out.mask.end() && proj != nullptr) {
    Matrix keep(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < keep.rows(); ++i) keep.row(i).setConstant(out.mask[static_cast<std::size_t>(i)] ? 1.0 : 0.0);
    x = ag::mul_const(x, keep);
  }
  out.data = x;
  return out;
}

}  // namespace

AlignedSequence align(const ModalityEmbedding& emb, int target_len, int target_dim, const Linear& proj) {
  require(target_dim > 0, "align: target dim must be positive");
  require(proj.in_features() == emb.dim() && proj.out_features() == target_dim,
          "align: projection maps " + std::to_string(proj.in_features()) + "->" +
              std::to_string(proj.out_features()) + ", need " + std::to_string(emb.dim()) + "->" +
              std::to_string(target_dim));
  return resample(emb, target_len, &proj);
}

AlignedSequence pad_or_subsample(const ModalityEmbedding& emb, int target_len) {
  return resample(emb, target_len, nullptr);
}

std::string serialize_feature_record(const FeatureRecord& record) {
  json j;
  j["id"] = record.id;
  j["modality"] = std::string(to_string(record.modality));
  j["shape"] = {record.data.rows(), record.data.cols()};
  std::vector<float> data(static_cast<std::size_t>(record.data.size()));
  for (Eigen::Index i = 0; i < record.data.size(); ++i) data[static_cast<std::size_t>(i)] = static_cast<float>(record.data.data()[i]);
  j["data"] = data;
  return j.dump();
}

FeatureRecord parse_feature_record(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    fail(ErrorCode::Validation, std::string("feature record is not valid JSON: ") + e.what());
  }
  FeatureRecord rec;
  try {
    rec.id = j.at("id").get<std::string>();
    rec.modality = parse_modality(j.at("modality").get<std::string>());
    const auto shape = j.at("shape").get<std::vector<long long>>();
    if (shape.size() != 2 || shape[0] <= 0 || shape[1] <= 0) {
      fail(ErrorCode::Validation, "feature record '" + rec.id + "' has invalid shape");
    }
    const auto data = j.at("data").get<std::vector<float>>();
    if (static_cast<long long>(data.size()) != shape[0] * shape[1]) {
      fail(ErrorCode::Validation, "feature record '" + rec.id + "' data size does not match shape");
    }
    rec.data.resize(shape[0], shape[1]);
    for (std::size_t i = 0; i < data.size(); ++i) rec.data.data()[i] = static_cast<double>(data[i]);
  } catch (const json::exception& e) {
    fail(ErrorCode::Validation, std::string("feature record is malformed: ") + e.what());
  }
  return rec;
}

void write_feature_file(const std::filesystem::path& path, std::span<const FeatureRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write feature file " + path.string());
  for (const auto& r : records) out << serialize_feature_record(r) << '\n';
}

namespace {

std::pair<std::string, std::string> split_ref(const std::string& ref) {
  const auto hash = ref.find('#');
  if (hash == std::string::npos) return {ref, {}};
  return {ref.substr(0, hash), ref.substr(hash + 1)};
}

}  // namespace

bool feature_ref_exists(const std::filesystem::path& base_dir, const std::string& ref) {
  const auto [file, id] = split_ref(ref);
  if (file.empty() || !std::filesystem::is_regular_file(base_dir / file)) return false;
  if (id.empty()) return true;
  std::ifstream in(base_dir / file);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line, nullptr, false);
    if (!j.is_discarded() && j.is_object() && j.value("id", std::string()) == id) return true;
  }
  return false;
}

FeatureRecord read_feature_ref(const std::filesystem::path& base_dir, const std::string& ref) {
  const auto [file, id] = split_ref(ref);
  const auto path = base_dir / file;
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open feature file " + path.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    FeatureRecord rec = parse_feature_record(line);
    if (id.empty() || rec.id == id) return rec;
  }
  fail(ErrorCode::Validation, "feature reference '" + ref + "' not found");
}

}  // namespace amess
