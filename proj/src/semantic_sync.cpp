#include "amess/semantic_sync.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "amess/error.hpp"
#include "amess/nn.hpp"

namespace amess {

using nlohmann::json;

int LabelDescriptionBank::descriptions_per_label() const {
  return descriptions.empty() ? 0 : static_cast<int>(descriptions.front().size());
}

int LabelDescriptionBank::dim() const {
  return embeddings.empty() ? 0 : static_cast<int>(embeddings.front().cols());
}

int LabelDescriptionBank::index_of(const std::string& name) const {
  auto it = std::find(labels.begin(), labels.end(), name);
  return it == labels.end() ? -1 : static_cast<int>(it - labels.begin());
}

LabelDescriptionBank LabelDescriptionBank::truncated(int m) const {
  require(m >= 2, "description count must be at least 2, got " + std::to_string(m));
  if (m > descriptions_per_label()) {
    fail(ErrorCode::InvalidInput, "insufficient descriptions: bank has " + std::to_string(descriptions_per_label()) +
                                      " per label, " + std::to_string(m) + " requested");
  }
  LabelDescriptionBank out = *this;
  for (auto& d : out.descriptions) d.resize(static_cast<std::size_t>(m));
  for (auto& e : out.embeddings) e = Matrix(e.topRows(m));
  return out;
}

void validate_bank(const LabelDescriptionBank& bank) {
  if (bank.labels.empty()) fail(ErrorCode::Validation, "description bank has no labels");
  if (bank.labels.size() != bank.descriptions.size()) {
    fail(ErrorCode::Validation, "description bank: label and description list counts differ");
  }
  std::set<std::string> seen;
  for (const auto& l : bank.labels) {
    if (l.empty()) fail(ErrorCode::Validation, "description bank: empty label name");
    if (!seen.insert(l).second) fail(ErrorCode::Validation, "description bank: duplicate label '" + l + "'");
    if (bank.oos_label && l == *bank.oos_label) {
      fail(ErrorCode::Validation, "description bank: out-of-scope label '" + l + "' must not carry descriptions");
    }
  }
  const std::size_t m = bank.descriptions.front().size();
  for (std::size_t i = 0; i < bank.labels.size(); ++i) {
    if (bank.descriptions[i].size() != m) {
      fail(ErrorCode::Validation, "description bank: label '" + bank.labels[i] + "' has " +
                                      std::to_string(bank.descriptions[i].size()) + " descriptions, expected " +
                                      std::to_string(m));
    }
  }
  if (m < 2) fail(ErrorCode::Validation, "description bank: need at least 2 descriptions per label");
  if (!bank.embeddings.empty()) {
    if (bank.embeddings.size() != bank.labels.size()) {
      fail(ErrorCode::Validation, "description bank: embedding count differs from label count");
    }
    for (std::size_t i = 0; i < bank.embeddings.size(); ++i) {
      if (bank.embeddings[i].rows() != static_cast<Eigen::Index>(m) ||
          bank.embeddings[i].cols() != bank.embeddings.front().cols()) {
        fail(ErrorCode::Validation, "description bank: embeddings of '" + bank.labels[i] + "' have the wrong shape");
      }
    }
  }
}

LabelDescriptionBank parse_descriptions(const std::string& json_text) {
  LabelDescriptionBank bank;
  try {
    const json j = json::parse(json_text);
    bank.prompt_template = j.value("prompt_template", "");
    if (j.contains("oos_label") && !j.at("oos_label").is_null()) bank.oos_label = j.at("oos_label").get<std::string>();
    for (const auto& entry : j.at("labels")) {
      bank.labels.push_back(entry.at("name").get<std::string>());
      bank.descriptions.push_back(entry.at("descriptions").get<std::vector<std::string>>());
      if (entry.contains("embeddings")) {
        const auto rows = entry.at("embeddings").get<std::vector<std::vector<double>>>();
        Matrix m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
        for (std::size_t r = 0; r < rows.size(); ++r) {
          if (static_cast<Eigen::Index>(rows[r].size()) != m.cols()) {
            fail(ErrorCode::Validation, "description bank: ragged embeddings for '" + bank.labels.back() + "'");
          }
          for (std::size_t c = 0; c < rows[r].size(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
        }
        bank.embeddings.push_back(std::move(m));
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::Validation, std::string("description file is malformed: ") + e.what());
  }
  if (!bank.embeddings.empty() && bank.embeddings.size() != bank.labels.size()) {
    fail(ErrorCode::Validation, "description bank: some labels lack embeddings");
  }
  validate_bank(bank);
  return bank;
}

LabelDescriptionBank load_descriptions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open description file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_descriptions(ss.str());
}

RowVector mock_sentence_embedding(const std::string& text, int dim, std::uint64_t seed) {
  require(dim > 0, "embedding dim must be positive");
  RowVector v = RowVector::Zero(dim);
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    Rng rng(mix64(seed ^ fnv1a(word.data(), word.size())));
    for (int j = 0; j < dim; ++j) v(j) += rng.normal();
    word.clear();
  };
  for (unsigned char ch : text) {
    if (std::isalnum(ch) || ch == '\'') {
      word.push_back(static_cast<char>(std::tolower(ch)));
    } else {
      flush();
    }
  }
  flush();
  const double n = v.norm();
  require(n > 0.0, "cannot embed a description without words: '" + text + "'");
  return v / n;
}

LabelDescriptionBank embed_descriptions(const LabelDescriptionBank& bank, const DescriptionEmbedderSpec& spec) {
  validate_bank(bank);
  require(spec.dim > 0, "description embedder dim must be positive");
  LabelDescriptionBank out = bank;
  out.embeddings.clear();
  if (spec.kind == EmbedderKind::Mock) {
    for (const auto& list : bank.descriptions) {
      Matrix m(static_cast<Eigen::Index>(list.size()), spec.dim);
      for (std::size_t r = 0; r < list.size(); ++r) {
        m.row(static_cast<Eigen::Index>(r)) = mock_sentence_embedding(list[r], spec.dim, spec.seed);
      }
      out.embeddings.push_back(std::move(m));
    }
    return out;
  }
  const LabelDescriptionBank pre = load_descriptions(spec.path);
  if (!pre.embedded()) fail(ErrorCode::Validation, spec.path.string() + " carries no embeddings");
  if (pre.dim() != spec.dim) {
    fail(ErrorCode::InvalidInput, "description embeddings have dim " + std::to_string(pre.dim()) + ", model d_t is " +
                                      std::to_string(spec.dim));
  }
  for (std::size_t i = 0; i < bank.labels.size(); ++i) {
    const int src = pre.index_of(bank.labels[i]);
    if (src < 0) fail(ErrorCode::Validation, "precomputed embeddings lack label '" + bank.labels[i] + "'");
    if (pre.descriptions[static_cast<std::size_t>(src)].size() < bank.descriptions[i].size()) {
      fail(ErrorCode::Validation, "precomputed embeddings for '" + bank.labels[i] + "' have too few rows");
    }
    Matrix m = pre.embeddings[static_cast<std::size_t>(src)].topRows(static_cast<Eigen::Index>(bank.descriptions[i].size()));
    Eigen::VectorXd norms = m.rowwise().norm().cwiseMax(1e-12);
    out.embeddings.push_back(m.array().colwise() / norms.array());
  }
  return out;
}

void save_embedded_bank(const std::filesystem::path& path, const LabelDescriptionBank& bank) {
  json j;
  j["prompt_template"] = bank.prompt_template;
  if (bank.oos_label) j["oos_label"] = *bank.oos_label;
  j["labels"] = json::array();
  for (std::size_t i = 0; i < bank.labels.size(); ++i) {
    json entry;
    entry["name"] = bank.labels[i];
    entry["descriptions"] = bank.descriptions[i];
    if (bank.embedded()) {
      json rows = json::array();
      const Matrix& m = bank.embeddings[i];
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        rows.push_back(std::vector<double>(m.row(r).data(), m.row(r).data() + m.cols()));
      }
      entry["embeddings"] = rows;
    }
    j["labels"].push_back(entry);
  }
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

TripletLoss triplet_contrastive_loss(const ag::Var& tokens, std::span<const int> bank_labels,
                                     const LabelDescriptionBank& bank, const TripletOptions& options) {
  if (!(options.temperature > 0.0)) fail(ErrorCode::InvalidInput, "triplet loss: temperature must be positive");
  require(bank.embedded(), "triplet loss: description bank is not embedded");
  require(tokens.rows() == static_cast<Eigen::Index>(bank_labels.size()),
          "triplet loss: token count differs from label count");
  require(tokens.cols() == bank.dim(), "triplet loss: token dim " + std::to_string(tokens.cols()) +
                                           " differs from description dim " + std::to_string(bank.dim()));
  const auto label_count = static_cast<int>(bank.labels.size());
  const int m = bank.descriptions_per_label();
  for (int y : bank_labels) {
    require(y == kOutOfScope || (y >= 0 && y < label_count), "triplet loss: label " + std::to_string(y) + " not in bank");
  }

  // Positive / negative weights per (sample, description column).
  const Eigen::Index columns = static_cast<Eigen::Index>(label_count) * m;
  std::vector<int> contributing;
  std::vector<RowVector> pos_rows;
  std::vector<RowVector> neg_rows;
  for (std::size_t i = 0; i < bank_labels.size(); ++i) {
    const int y = bank_labels[i];
    if (y == kOutOfScope) continue;
    RowVector label_weight = RowVector::Zero(label_count);
    if (options.negatives == NegativeScope::Label) {
      label_weight.setOnes();
      label_weight(y) = 0.0;
    } else {
      for (std::size_t k = 0; k < bank_labels.size(); ++k) {
        if (k != i && bank_labels[k] != kOutOfScope && bank_labels[k] != y) label_weight(bank_labels[k]) += 1.0;
      }
    }
    if (label_weight.sum() == 0.0) continue;  // no negatives in scope
    RowVector pos = RowVector::Zero(columns);
    RowVector neg = RowVector::Zero(columns);
    for (int l = 0; l < label_count; ++l) {
      for (int j = 0; j < m; ++j) {
        neg(l * m + j) = label_weight(l);
        if (l == y) pos(l * m + j) = 1.0;
      }
    }
    if (options.include_positive_in_denominator) neg += pos;
    contributing.push_back(static_cast<int>(i));
    pos_rows.push_back(pos);
    neg_rows.push_back(neg);
  }

  TripletLoss out;
  out.contributing = static_cast<int>(contributing.size());
  if (contributing.empty()) {
    out.empty = true;
    out.value = ag::scalar(0.0);
    return out;
  }

  Matrix descriptions(columns, bank.dim());
  for (int l = 0; l < label_count; ++l) descriptions.middleRows(static_cast<Eigen::Index>(l) * m, m) = bank.embeddings[static_cast<std::size_t>(l)];
  const Eigen::VectorXd norms = descriptions.rowwise().norm().cwiseMax(1e-12);
  descriptions = descriptions.array().colwise() / norms.array();

  const auto n = static_cast<Eigen::Index>(contributing.size());
  Matrix pos_w(n, columns);
  Matrix neg_w(n, columns);
  for (Eigen::Index r = 0; r < n; ++r) {
    pos_w.row(r) = pos_rows[static_cast<std::size_t>(r)];
    neg_w.row(r) = neg_rows[static_cast<std::size_t>(r)];
  }

  ag::Var selected = ag::gather_rows(tokens, contributing);
  ag::Var sims = ag::scale(ag::matmul(ag::l2_normalize_rows(selected), ag::constant(descriptions), false, true),
                           1.0 / options.temperature);
  ag::Var per_sample = ag::sub(ag::weighted_logsumexp_rows(sims, neg_w), ag::weighted_logsumexp_rows(sims, pos_w));
  out.value = ag::scale(ag::sum(per_sample), 1.0 / static_cast<double>(n));
  return out;
}

Matrix pca_project(const Matrix& points, int components) {
  require(points.rows() >= 2 && components >= 1 && components <= points.cols(),
          "pca: need at least two points and 1 <= components <= dim");
  const RowVector mean = points.colwise().mean();
  const Matrix centered = points.rowwise() - mean;
  if (centered.cwiseAbs().maxCoeff() == 0.0) fail(ErrorCode::InvalidInput, "pca: all points are identical");
  const Matrix cov = centered.transpose() * centered / static_cast<double>(points.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
  require(solver.info() == Eigen::Success, "pca: eigen-decomposition failed");
  Matrix axes(points.cols(), components);
  for (int c = 0; c < components; ++c) {
    Eigen::VectorXd v = solver.eigenvectors().col(points.cols() - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    axes.col(c) = v;
  }
  return centered * axes;
}

std::vector<PcaPoint> pca_semantic_analysis(const Matrix& tokens_before, const Matrix& tokens_after,
                                            const Matrix& descriptions) {
  const Eigen::Index dim = descriptions.cols();
  require(tokens_before.cols() == dim && tokens_after.cols() == dim, "pca analysis: point groups differ in dim");
  const Eigen::Index total = tokens_before.rows() + tokens_after.rows() + descriptions.rows();
  require(total >= 3, "pca analysis: need at least three points");
  Matrix all(total, dim);
  all << tokens_before, tokens_after, descriptions;
  Matrix coords = pca_project(all, 2);
  for (int c = 0; c < 2; ++c) {
    const double lo = coords.col(c).minCoeff();
    const double range = coords.col(c).maxCoeff() - lo;
    for (Eigen::Index r = 0; r < total; ++r) coords(r, c) = range > 0.0 ? (coords(r, c) - lo) / range : 0.0;
  }
  std::vector<PcaPoint> out;
  out.reserve(static_cast<std::size_t>(total));
  for (Eigen::Index r = 0; r < total; ++r) {
    const char* role = r < tokens_before.rows() ? "mean"
                       : r < tokens_before.rows() + tokens_after.rows() ? "synchronized"
                                                                         : "description";
    out.push_back({role, coords(r, 0), coords(r, 1)});
  }
  return out;
}

void write_pca_csv(const std::filesystem::path& path, const std::string& label, std::span<const PcaPoint> points) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << "role,label,x,y\n" << std::setprecision(10);
  for (const auto& p : points) out << p.role << ',' << '"' << label << '"' << ',' << p.x << ',' << p.y << '\n';
}

}  // namespace amess
