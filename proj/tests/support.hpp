// Reference implementations used as test oracles. They are written with
// plain loops over std::vector and deliberately avoid the library's own
// helpers, so agreement means two independent derivations match.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "amess/autograd.hpp"
#include "amess/nn.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;
using Vec = std::vector<double>;

inline Mat to_mat(const amess::Matrix& m) {
  Mat out(static_cast<std::size_t>(m.rows()), Vec(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double cosine(const Vec& a, const Vec& b) {
  const double na = std::max(std::sqrt(dot(a, a)), 1e-12);
  const double nb = std::max(std::sqrt(dot(b, b)), 1e-12);
  return dot(a, b) / (na * nb);
}

struct Anchors {
  std::vector<int> indices;
  Vec scores;
};

// Every valid text row i is compared with every valid fused row j; the
// score of row i is best / second best after a full descending sort. Anchors
// are picked one at a time as the highest remaining score, lowest index first.
inline Anchors brute_force_anchors(const Mat& text, const Mat& fused, const std::vector<bool>& mask, int k) {
  const std::size_t n = text.size();
  Vec score(n, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    Vec sims;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask[j]) sims.push_back(cosine(text[i], fused[j]));
    }
    std::sort(sims.begin(), sims.end(), [](double a, double b) { return a > b; });
    double second = sims[1];
    if (std::abs(second) < 1e-12) second = second < 0 ? -1e-12 : 1e-12;
    score[i] = sims[0] / second;
  }
  Anchors out;
  std::vector<bool> taken(n, false);
  for (int pick = 0; pick < k; ++pick) {
    int best = -1;
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask[i] || taken[i]) continue;
      if (best < 0 || score[i] > score[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    if (best < 0) break;
    taken[static_cast<std::size_t>(best)] = true;
    out.indices.push_back(best);
    out.scores.push_back(score[static_cast<std::size_t>(best)]);
  }
  return out;
}

// 1e-9 absolute for ordinary scores, relative once the ratio is large
// (a near-zero second similarity makes scores of order 1e12).
inline bool score_close(double a, double b, double tol = 1e-9) {
  return std::abs(a - b) <= tol * std::max(1.0, std::abs(b));
}

// x W + b with W stored (in x out).
inline Mat linear(const Mat& x, const Mat& w, const Vec& b) {
  Mat out(x.size(), Vec(w[0].size(), 0.0));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t o = 0; o < w[0].size(); ++o) {
      double s = b.empty() ? 0.0 : b[o];
      for (std::size_t k = 0; k < w.size(); ++k) s += x[i][k] * w[k][o];
      out[i][o] = s;
    }
  return out;
}

inline double gelu(double x) {
  const double c = std::sqrt(2.0 / M_PI);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

inline Mat apply(const Mat& x, double (*f)(double)) {
  Mat out = x;
  for (auto& row : out)
    for (auto& v : row) v = f(v);
  return out;
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat out = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) out[i][j] += b[i][j];
  return out;
}

// Single-head softmax(Q K^T / sqrt(d)) V; masked keys are skipped.
inline Mat attention(const Mat& q, const Mat& k, const Mat& v, const std::vector<bool>& key_mask = {},
                     Mat* weights = nullptr) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q[0].size()));
  Mat out(q.size(), Vec(v[0].size(), 0.0));
  if (weights) weights->assign(q.size(), Vec(k.size(), 0.0));
  for (std::size_t i = 0; i < q.size(); ++i) {
    Vec logits(k.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k.size(); ++j) {
      if (!key_mask.empty() && !key_mask[j]) continue;
      logits[j] = dot(q[i], k[j]) * scale;
      mx = std::max(mx, logits[j]);
    }
    double z = 0.0;
    Vec p(k.size(), 0.0);
    for (std::size_t j = 0; j < k.size(); ++j) {
      if (!key_mask.empty() && !key_mask[j]) continue;
      p[j] = std::exp(logits[j] - mx);
      z += p[j];
    }
    for (std::size_t j = 0; j < k.size(); ++j) {
      p[j] /= z;
      for (std::size_t c = 0; c < v[0].size(); ++c) out[i][c] += p[j] * v[j][c];
    }
    if (weights) (*weights)[i] = p;
  }
  return out;
}

inline Mat layer_norm(const Mat& x, const Vec& gamma, const Vec& beta, double eps) {
  Mat out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mean = 0.0;
    for (double v : x[i]) mean += v;
    mean /= static_cast<double>(x[i].size());
    double var = 0.0;
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x[i].size());
    for (std::size_t j = 0; j < x[i].size(); ++j) out[i][j] = (x[i][j] - mean) / std::sqrt(var + eps) * gamma[j] + beta[j];
  }
  return out;
}

// -log( sum_pos exp(s/tau) / sum_neg exp(s/tau) ), averaged over samples
// whose label is >= 0. Negatives are all other bank labels.
inline double triplet_loss(const Mat& tokens, const std::vector<int>& labels, const std::vector<Mat>& bank,
                           double tau, bool include_positive = false) {
  double total = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (labels[i] < 0) continue;
    double pos = 0.0, neg = 0.0;
    for (std::size_t l = 0; l < bank.size(); ++l) {
      for (const auto& s : bank[l]) {
        const double e = std::exp(cosine(tokens[i], s) / tau);
        if (static_cast<int>(l) == labels[i]) {
          pos += e;
          if (include_positive) neg += e;
        } else {
          neg += e;
        }
      }
    }
    total += -std::log(pos / neg);
    ++count;
  }
  return count == 0 ? 0.0 : total / count;
}

inline double cross_entropy(const Mat& logits, const std::vector<int>& labels) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    double z = 0.0;
    for (double v : logits[i]) z += std::exp(v);
    total += std::log(z) - logits[i][static_cast<std::size_t>(labels[i])];
  }
  return total / static_cast<double>(logits.size());
}

}  // namespace oracle

namespace testing_support {

inline amess::Matrix random_matrix(amess::Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  amess::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  std::string worst;
};

// Central differences on every entry of `inputs` against reverse mode.
// Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheckResult check_gradients(const std::vector<std::pair<std::string, amess::ag::Var>>& inputs,
                                       const std::function<amess::ag::Var()>& loss, double h = 1e-5,
                                       double floor = 1e-6) {
  for (auto& [name, v] : inputs) {
    amess::ag::Var copy = v;
    copy.zero_grad();
  }
  amess::ag::backward(loss());
  GradCheckResult r;
  for (auto& [name, v] : inputs) {
    amess::ag::Var var = v;
    const amess::Matrix analytic = var.grad();
    for (Eigen::Index e = 0; e < var.value().size(); ++e) {
      double& x = var.mutable_value().data()[e];
      const double saved = x;
      x = saved + h;
      const double fp = loss().value()(0, 0);
      x = saved - h;
      const double fm = loss().value()(0, 0);
      x = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic.data()[e];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst = name + "[" + std::to_string(e) + "] analytic " + std::to_string(a) + " numeric " +
                  std::to_string(numeric);
      }
      ++r.entries;
    }
  }
  return r;
}

// FNV-1a over every "label\n" and "description\n" in bank order. The
// expected values were computed once from the reference description lists.
inline std::uint64_t bank_fingerprint(const std::vector<std::string>& labels,
                                      const std::vector<std::vector<std::string>>& descriptions) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const std::string& s) {
    for (unsigned char c : s + "\n") {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t i = 0; i < labels.size(); ++i) {
    feed(labels[i]);
    for (const auto& d : descriptions[i]) feed(d);
  }
  return h;
}
inline constexpr std::uint64_t kMintrecFingerprint = 0xc3739780d9d4d77cULL;
inline constexpr std::uint64_t kMintrec2Fingerprint = 0xa40205de73f98363ULL;

inline std::vector<std::pair<std::string, amess::ag::Var>> all_parameters(amess::ParameterStore& store) {
  std::vector<std::pair<std::string, amess::ag::Var>> out;
  for (auto& p : store.parameters()) out.emplace_back(p.name, p.var);
  return out;
}

}  // namespace testing_support
