#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <set>

#include "amess/error.hpp"
#include "amess/train_eval.hpp"
#include "support.hpp"
#include "toy_run.hpp"

using namespace amess;
using testing_support::make_toy_run;
using testing_support::scratch_dir;

namespace {

struct NaiveMetrics {
  double acc, p, r, f1, f1_is, f1_os;
};

// Per-class counts, then macro averages over classes seen in either list.
NaiveMetrics naive_metrics(const std::vector<int>& pred, const std::vector<int>& truth, int classes, int oos) {
  std::vector<double> tp(classes, 0), fp(classes, 0), fn(classes, 0);
  int correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == truth[i]) {
      ++tp[pred[i]];
      ++correct;
    } else {
      ++fp[pred[i]];
      ++fn[truth[i]];
    }
  }
  std::set<int> present(pred.begin(), pred.end());
  present.insert(truth.begin(), truth.end());
  NaiveMetrics m{static_cast<double>(correct) / pred.size(), 0, 0, 0, 0, 0};
  double is_sum = 0;
  int is_count = 0;
  for (int c : present) {
    const double p = tp[c] + fp[c] > 0 ? tp[c] / (tp[c] + fp[c]) : 0.0;
    const double r = tp[c] + fn[c] > 0 ? tp[c] / (tp[c] + fn[c]) : 0.0;
    const double f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    m.p += p / present.size();
    m.r += r / present.size();
    m.f1 += f / present.size();
    if (c == oos) {
      m.f1_os = f;
    } else {
      is_sum += f;
      ++is_count;
    }
  }
  m.f1_is = is_sum / is_count;
  return m;
}

const std::vector<std::string> kNames{"a", "b", "c", "d"};

TEST(Metrics, PerfectPredictions) {
  const std::vector<int> y{0, 1, 2, 3, 1, 2};
  const auto m = compute_metrics(y, y, kNames, std::nullopt);
  EXPECT_EQ(m.acc, 1.0);
  EXPECT_EQ(m.f1, 1.0);
  EXPECT_EQ(m.precision, 1.0);
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_FALSE(m.f1_is.has_value());
}

TEST(Metrics, HandComputedTwoClassConfusion) {
  // Confusion [[1,1],[0,2]].
  const std::vector<int> truth{0, 0, 1, 1};
  const std::vector<int> pred{0, 1, 1, 1};
  const auto m = compute_metrics(pred, truth, {"x", "y"}, std::nullopt);
  EXPECT_NEAR(m.acc, 0.75, 1e-9);
  EXPECT_NEAR(m.precision, (1.0 + 2.0 / 3.0) / 2.0, 1e-9);
  EXPECT_NEAR(m.recall, (0.5 + 1.0) / 2.0, 1e-9);
  EXPECT_NEAR(m.f1, (2.0 / 3.0 + 0.8) / 2.0, 1e-9);
  EXPECT_EQ(m.confusion, (std::vector<std::vector<int>>{{1, 1}, {0, 2}}));
  EXPECT_NEAR(m.per_class[1].f1, 0.8, 1e-9);
  EXPECT_EQ(m.per_class[0].support, 2);
}

TEST(Metrics, OutOfScopeColumns) {
  // Classes a, b and the out-of-scope class at index 2.
  const std::vector<int> truth{0, 0, 1, 1, 2, 2, 2, 2};
  const std::vector<int> pred{0, 2, 1, 0, 2, 2, 1, 2};
  const auto m = compute_metrics(pred, truth, {"a", "b", "UNKNOWN"}, 2);
  // a: P 1/2 R 1/2; b: P 1/2 R 1/2; UNKNOWN: P 3/4 R 3/4.
  ASSERT_TRUE(m.f1_is && m.f1_os);
  EXPECT_NEAR(*m.f1_is, 0.5, 1e-9);
  EXPECT_NEAR(*m.f1_os, 0.75, 1e-9);
  EXPECT_NEAR(m.f1, (0.5 + 0.5 + 0.75) / 3.0, 1e-9);
  const auto j = m.to_json();
  EXPECT_TRUE(j.contains("F1-IS"));
  EXPECT_TRUE(j.contains("F1-OS"));
  for (const char* key : {"acc", "f1", "precision", "recall", "per_class", "confusion"}) EXPECT_TRUE(j.contains(key));
}

TEST(Metrics, RandomCasesMatchNaiveCounts) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const int classes = 2 + rng.below(4), n = 1 + rng.below(30);
    std::vector<int> pred, truth;
    for (int i = 0; i < n; ++i) {
      truth.push_back(rng.below(classes));
      pred.push_back(rng.below(3) == 0 ? truth.back() : rng.below(classes));
    }
    const int oos = classes - 1;
    std::vector<std::string> names(classes, "c");
    for (int c = 0; c < classes; ++c) names[c] += std::to_string(c);
    const auto m = compute_metrics(pred, truth, names, oos);
    const auto ref = naive_metrics(pred, truth, classes, oos);
    EXPECT_NEAR(m.acc, ref.acc, 1e-12);
    EXPECT_NEAR(m.precision, ref.p, 1e-12);
    EXPECT_NEAR(m.recall, ref.r, 1e-12);
    EXPECT_NEAR(m.f1, ref.f1, 1e-12);
    std::set<int> present(pred.begin(), pred.end());
    present.insert(truth.begin(), truth.end());
    if (present.count(oos) && present.size() > 1) {
      EXPECT_NEAR(*m.f1_os, ref.f1_os, 1e-12);
      EXPECT_NEAR(*m.f1_is, ref.f1_is, 1e-12);
    }
    for (double v : {m.acc, m.precision, m.recall, m.f1}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    for (int c = 0; c < classes; ++c) {
      int row = 0;
      for (int v : m.confusion[c]) row += v;
      EXPECT_EQ(row, m.per_class[c].support);
      EXPECT_EQ(row, std::count(truth.begin(), truth.end(), c));
    }
  }
}

TEST(Metrics, MacroF1InvariantUnderRelabelling) {
  Rng rng(2);
  const std::vector<int> perm{2, 0, 3, 1};
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> pred, truth, pp, tp;
    for (int i = 0; i < 25; ++i) {
      truth.push_back(rng.below(4));
      pred.push_back(rng.below(4));
      tp.push_back(perm[truth.back()]);
      pp.push_back(perm[pred.back()]);
    }
    EXPECT_NEAR(compute_metrics(pred, truth, kNames, std::nullopt).f1,
                compute_metrics(pp, tp, kNames, std::nullopt).f1, 1e-12);
  }
}

TEST(Metrics, RandomBaselineAccuracyNearChance) {
  Rng rng(3);
  const int classes = 4, n = 200, trials = 30;
  double mean = 0.0;
  for (int t = 0; t < trials; ++t) {
    std::vector<int> truth, pred;
    for (int i = 0; i < n; ++i) {
      truth.push_back(i % classes);
      pred.push_back(rng.below(classes));
    }
    mean += compute_metrics(pred, truth, kNames, std::nullopt).acc / trials;
  }
  const double p = 1.0 / classes;
  const double sigma = std::sqrt(p * (1 - p) / (static_cast<double>(n) * trials));
  EXPECT_LT(std::abs(mean - p), 3.0 * sigma);
}

TEST(Metrics, WeightedAveragingUsesSupport) {
  const std::vector<int> truth{0, 0, 0, 1};
  const std::vector<int> pred{0, 0, 1, 1};
  const auto m = compute_metrics(pred, truth, {"x", "y"}, std::nullopt, Averaging::Weighted);
  // x: P 1 R 2/3 F 0.8; y: P 1/2 R 1 F 2/3.
  EXPECT_NEAR(m.f1, 0.75 * 0.8 + 0.25 * (2.0 / 3.0), 1e-12);
  EXPECT_NEAR(m.precision, 0.75 * 1.0 + 0.25 * 0.5, 1e-12);
  EXPECT_THROW(compute_metrics(pred, std::vector<int>{0, 1}, {"x", "y"}, std::nullopt), Error);
}

TEST(Optimizer, AdamWFirstStepMatchesClosedForm) {
  ParameterStore store;
  auto w = store.create("w", Matrix::Constant(1, 2, 0.5));
  auto b = store.create("b", Matrix::Constant(1, 1, 0.5), false);
  w.node()->grad = (Matrix(1, 2) << 0.3, -2.0).finished();
  b.node()->grad = Matrix::Constant(1, 1, 0.3);
  const double lr = 0.1, wd = 0.01, eps = 1e-8;
  AdamW opt(lr, wd, 0.9, 0.999, eps);
  opt.step(store);
  // Bias-corrected first step: update = g / (|g| + eps).
  EXPECT_NEAR(w.value()(0, 0), 0.5 * (1 - lr * wd) - lr * 0.3 / (0.3 + eps), 1e-12);
  EXPECT_NEAR(w.value()(0, 1), 0.5 * (1 - lr * wd) + lr * 2.0 / (2.0 + eps), 1e-12);
  EXPECT_NEAR(b.value()(0, 0), 0.5 - lr * 0.3 / (0.3 + eps), 1e-12);
}

TEST(Optimizer, AdamWMinimisesQuadratic) {
  ParameterStore store;
  auto x = store.create("x", Matrix::Constant(1, 3, 4.0), false);
  AdamW opt(0.05, 0.0);
  for (int i = 0; i < 2000; ++i) {
    store.zero_grad();
    ag::backward(ag::sum(ag::hadamard(x, x)));
    opt.step(store);
  }
  EXPECT_LT(x.value().cwiseAbs().maxCoeff(), 1e-2);
}

TEST(Optimizer, ClipGradNorm) {
  ParameterStore store;
  auto a = store.create("a", Matrix::Zero(1, 2));
  auto b = store.create("b", Matrix::Zero(1, 1));
  a.node()->grad = (Matrix(1, 2) << 3.0, 0.0).finished();
  b.node()->grad = Matrix::Constant(1, 1, 4.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm(store, 1.0), 5.0);
  EXPECT_NEAR(a.grad()(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(b.grad()(0, 0), 0.8, 1e-15);
  EXPECT_NEAR(clip_grad_norm(store, 10.0), 1.0, 1e-15);
  EXPECT_NEAR(b.grad()(0, 0), 0.8, 1e-15);
  b.node()->grad(0, 0) = std::nan("");
  try {
    clip_grad_norm(store, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Divergence);
  }
}

TEST(LabelSpaceMapping, BankRowsAndOutOfScope) {
  Rng rng(4);
  LabelDescriptionBank bank;
  bank.labels = {"x", "y", "z"};
  bank.descriptions.assign(3, {"p", "q"});
  LabelSpace space{{"z", "x", "UNKNOWN"}, std::string("UNKNOWN")};
  EXPECT_EQ(space.bank_rows(bank), (std::vector<int>{2, 0, kOutOfScope}));
  EXPECT_EQ(space.oos_index(), 2);
  LabelSpace missing{{"x", "w"}, std::nullopt};
  EXPECT_THROW(missing.bank_rows(bank), Error);
}

void small_dims(TrainConfig& c) {
  c.dim = 16;
  c.ff_hidden = 32;
  c.encoder_depth = 1;
  c.text_len = 12;
  c.video_len = 12;
  c.audio_len = 12;
  c.synthetic.n_samples = 40;
  c.synthetic.n_val = 20;
  c.synthetic.n_test = 20;
}

TEST(Training, OneEpochOnTwoSamples) {
  const auto dir = scratch_dir("train_two");
  auto run = make_toy_run(dir, [](TrainConfig& c) {
    small_dims(c);
    c.epochs = 1;
    c.patience = 1;
  });
  run.train.resize(2);
  const auto r = train(run.config, run.labels, run.train, run.val, run.bank);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.history[0].epoch, 1);
  EXPECT_TRUE(std::isfinite(r.history[0].train_loss));
  save_checkpoint(dir / "m.ckpt", checkpoint_for(*r.model, run.config, run.labels));
  const auto loaded = load_model(dir / "m.ckpt");
  EXPECT_EQ(loaded.labels.names, run.labels.names);
  EXPECT_EQ(predict(*loaded.model, run.val), predict(*r.model, run.val));
  EXPECT_THROW(train(run.config, run.labels, {}, run.val, run.bank), Error);
}

TEST(Training, DeterministicAndEarlyStoppingKeepsBest) {
  const auto dir = scratch_dir("train_det");
  auto run = make_toy_run(dir, [](TrainConfig& c) {
    small_dims(c);
    c.epochs = 6;
    c.patience = 2;
    c.lr = 3e-4;
  });
  const auto a = train(run.config, run.labels, run.train, run.val, run.bank);
  const auto b = train(run.config, run.labels, run.train, run.val, run.bank);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(std::memcmp(&a.history[i].train_loss, &b.history[i].train_loss, sizeof(double)), 0);
    EXPECT_EQ(a.history[i].val_acc, b.history[i].val_acc);
  }
  double best = 0.0;
  for (const auto& h : a.history) best = std::max(best, h.val_acc);
  EXPECT_EQ(a.best_val_acc, best);
  EXPECT_EQ(a.history[static_cast<std::size_t>(a.best_epoch - 1)].val_acc, best);
  EXPECT_EQ(evaluate(*a.model, run.val, run.labels, false).acc, best);
  // Stopping happens exactly `patience` epochs after the last improvement.
  if (static_cast<int>(a.history.size()) < run.config.epochs) {
    EXPECT_EQ(static_cast<int>(a.history.size()), a.best_epoch + run.config.patience);
  }

  const auto csv = dir / "history.csv";
  write_history_csv(csv, a.history);
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "epoch,train_loss,val_acc,val_f1");
}

TEST(Training, SeedChangesTheRun) {
  const auto dir = scratch_dir("train_seed");
  auto run = make_toy_run(dir, [](TrainConfig& c) {
    small_dims(c);
    c.epochs = 1;
    c.patience = 1;
  });
  const auto a = train(run.config, run.labels, run.train, run.val, run.bank);
  run.config.seed = 77;
  const auto b = train(run.config, run.labels, run.train, run.val, run.bank);
  EXPECT_NE(a.history[0].train_loss, b.history[0].train_loss);
}

TEST(Training, LossFallsOnSeparableData) {
  const auto dir = scratch_dir("train_conv");
  auto run = make_toy_run(dir, [](TrainConfig& c) {
    small_dims(c);
    c.synthetic.n_samples = 80;
    c.epochs = 20;
    c.patience = 20;
  });
  const auto r = train(run.config, run.labels, run.train, run.val, run.bank);
  ASSERT_EQ(r.history.size(), 20u);
  const auto& first = r.history.front();
  const auto& last = r.history.back();
  // The classification term collapses; the contrastive term is bounded
  // below by the fixed description geometry, so the total falls less.
  EXPECT_LE(last.train_cls, 0.5 * first.train_cls);
  EXPECT_LE(last.train_loss, 0.8 * first.train_loss);
  EXPECT_GE(r.best_val_acc, 0.9);
}

TEST(Training, NonFiniteValuesAbortWithDiagnostic) {
  const auto dir = scratch_dir("train_nan");
  auto run = make_toy_run(dir, [](TrainConfig& c) {
    small_dims(c);
    c.epochs = 3;
    c.patience = 3;
  });
  auto bad = run.train;
  bad[0].video.data(0, 0) = std::nan("");
  EXPECT_THROW(train(run.config, run.labels, bad, run.val, run.bank), Error);

  // A step size this large overflows the weights within a few updates.
  run.config.lr = 1e300;
  run.config.weight_decay = 0.0;
  try {
    train(run.config, run.labels, run.train, run.val, run.bank);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Divergence);
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos) << e.what();
  }
}

TEST(Evaluation, LabelMismatchAndOosModeChecks) {
  const auto dir = scratch_dir("eval_checks");
  auto run = make_toy_run(dir, [](TrainConfig& c) {
    small_dims(c);
    c.epochs = 1;
    c.patience = 1;
  });
  const auto r = train(run.config, run.labels, run.train, run.val, run.bank);
  LabelSpace wrong = run.labels;
  wrong.names.push_back("extra");
  EXPECT_THROW(evaluate(*r.model, run.val, wrong, false), Error);
  EXPECT_THROW(evaluate(*r.model, run.val, run.labels, true), Error);  // no out-of-scope label
}

TEST(Evaluation, OosSplitReportsInAndOutOfScopeF1) {
  const auto dir = scratch_dir("eval_oos");
  auto run = make_toy_run(dir, [](TrainConfig& c) {
    small_dims(c);
    c.descriptions = std::string(AMESS_SOURCE_DIR) + "/data/descriptions/mintrec2.json";
    c.synthetic.oos_fraction = 0.2;
    c.synthetic.oos_label = "UNKNOWN";
    c.epochs = 3;
    c.patience = 3;
    c.oos_mode = true;
  });
  ASSERT_TRUE(run.labels.oos_index().has_value());
  const auto r = train(run.config, run.labels, run.train, run.val, run.bank);
  const auto m = evaluate(*r.model, run.test, run.labels, true);
  ASSERT_TRUE(m.f1_is && m.f1_os);
  const auto preds = predict(*r.model, run.test);
  std::vector<int> truth;
  for (const auto& s : run.test) truth.push_back(s.label);
  const auto ref = naive_metrics(preds, truth, static_cast<int>(run.labels.names.size()), *run.labels.oos_index());
  EXPECT_NEAR(*m.f1_is, ref.f1_is, 1e-12);
  EXPECT_NEAR(*m.f1_os, ref.f1_os, 1e-12);
  EXPECT_NEAR(m.f1, ref.f1, 1e-12);
}

TEST(Sweeps, AnchorAndDescriptionSweepsProduceFiniteRows) {
  const auto dir = scratch_dir("sweeps");
  auto run = make_toy_run(dir, [](TrainConfig& c) {
    small_dims(c);
    c.epochs = 1;
    c.patience = 1;
  });
  const std::vector<int> ks{2, 4, 8};
  const auto rows = anchor_sweep(run.config, ks, run.labels, run.train, run.val, run.test, run.bank);
  ASSERT_EQ(rows.size(), 3u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].value, ks[i]);
    EXPECT_TRUE(std::isfinite(rows[i].metrics.acc) && std::isfinite(rows[i].metrics.f1));
  }
  EXPECT_EQ(anchor_sweep(run.config, std::vector<int>{3}, run.labels, run.train, run.val, run.test, run.bank).size(), 1u);
  EXPECT_THROW(anchor_sweep(run.config, std::vector<int>{0}, run.labels, run.train, run.val, run.test, run.bank), Error);
  EXPECT_THROW(anchor_sweep(run.config, std::vector<int>{run.config.text_len + 1}, run.labels, run.train, run.val,
                            run.test, run.bank),
               Error);

  const std::vector<int> ms{2, 3};
  const auto d1 = description_count_sweep(run.config, ms, run.labels, run.train, run.val, run.test, run.raw_bank);
  const auto d2 = description_count_sweep(run.config, ms, run.labels, run.train, run.val, run.test, run.raw_bank);
  ASSERT_EQ(d1.size(), 2u);
  for (std::size_t i = 0; i < d1.size(); ++i) {
    EXPECT_EQ(d1[i].metrics.acc, d2[i].metrics.acc);
    EXPECT_EQ(d1[i].metrics.f1, d2[i].metrics.f1);
  }
  EXPECT_THROW(description_count_sweep(run.config, std::vector<int>{1}, run.labels, run.train, run.val, run.test,
                                       run.raw_bank),
               Error);
  EXPECT_THROW(description_count_sweep(run.config, std::vector<int>{5}, run.labels, run.train, run.val, run.test,
                                       run.raw_bank),
               Error);

  write_sweep_csv(dir / "k.csv", "k", rows);
  std::ifstream in(dir / "k.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "k,acc,f1");
  int count = 0;
  while (std::getline(in, line)) ++count;
  EXPECT_EQ(count, 3);
}

}  // namespace
