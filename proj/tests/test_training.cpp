#include <gtest/gtest.h>

#include "mmfuse/data.hpp"
#include "mmfuse/grad_check.hpp"
#include "mmfuse/metrics.hpp"
#include "mmfuse/training.hpp"
#include "oracles.hpp"

using namespace mmfuse;

// ---------------------------------------------------------------------------
// BCE loss
// ---------------------------------------------------------------------------

TEST(Bce, AnalyticValues) {
  Tensor half = Tensor::from_data({1}, {0.5});
  Tensor one = Tensor::from_data({1}, {1.0});
  EXPECT_NEAR(bce_loss(half, one).value(), std::log(2.0), 1e-12);

  Tensor preds = Tensor::from_data({2}, {0.9, 0.1});
  Tensor labels = Tensor::from_data({2}, {1.0, 0.0});
  EXPECT_NEAR(bce_loss(preds, labels).value(), -std::log(0.9), 1e-12);
}

TEST(Bce, ClampKeepsLossFinite) {
  Tensor nearly_one = Tensor::from_data({1}, {1.0 - 1e-7});
  Tensor one = Tensor::from_data({1}, {1.0});
  double loss = bce_loss(nearly_one, one).value();
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_NEAR(loss, 1e-7, 1e-9);

  Tensor exact = Tensor::from_data({1}, {1.0});  // clamped before the log
  EXPECT_TRUE(std::isfinite(bce_loss(exact, one).value()));
}

TEST(Bce, BadLabelRejected) {
  Tensor p = Tensor::from_data({1}, {0.5});
  EXPECT_THROW(bce_loss(p, Tensor::from_data({1}, {0.5})), DataError);
  EXPECT_THROW(bce_loss(p, Tensor::from_data({1}, {2.0})), DataError);
}

TEST(Bce, NonNegativeAndZeroOnlyAtClampedPerfect) {
  Rng rng(90);
  for (int i = 0; i < 50; ++i) {
    double p = rng.uniform(0.001, 0.999);
    double y = rng.uniform() < 0.5 ? 0.0 : 1.0;
    double loss = bce_loss(Tensor::from_data({1}, {p}), Tensor::from_data({1}, {y})).value();
    EXPECT_GE(loss, 0.0);
    EXPECT_GT(loss, 0.0);  // p strictly inside (0,1) is never a perfect prediction
  }
  double at_perfect =
      bce_loss(Tensor::from_data({1}, {1.0}), Tensor::from_data({1}, {1.0})).value();
  EXPECT_NEAR(at_perfect, 1e-7, 1e-9);  // clamp floor, effectively zero
}

TEST(Bce, GradientMatchesFiniteDifferences) {
  Rng rng(91);
  Tensor y = Tensor::from_data({4}, {1, 0, 0, 1});
  Tensor p0 = Tensor::uniform({4}, rng, 0.05, 0.95);
  EXPECT_LE(grad_check([&](const Tensor& p) { return bce_loss(p, y); }, p0), 1e-5);
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

TEST(Sgd, SingleStepValues) {
  Tensor w = Tensor::from_data({1}, {1.0});
  Tensor g = Tensor::from_data({1}, {1.0});
  EXPECT_DOUBLE_EQ(sgd_step(w, g, 0.1, 0.0).value(), 0.9);
  EXPECT_DOUBLE_EQ(sgd_step(w, g, 0.1, 0.01).value(), 1.0 - 0.1 * 1.01);
  EXPECT_THROW(sgd_step(w, Tensor::zeros({2}), 0.1, 0.0), ContractError);
}

TEST(Sgd, TwoStepsOnQuadratic) {
  // f(w) = w^2, df = 2w; lr 0.1 multiplies w by 0.8 per step: 1 -> 0.8 -> 0.64
  std::vector<Tensor> params = {Tensor::from_data({1}, {1.0}, /*requires_grad=*/true)};
  for (int step = 0; step < 2; ++step) {
    zero_grad(params);
    Tensor loss = mul(params[0], params[0]);
    backward(loss);
    sgd_step(params, 0.1, 0.0);
  }
  EXPECT_NEAR(params[0].value(), 0.64, 1e-12);
}

TEST(Sgd, MonotoneConvergenceOnHalfQuadratic) {
  // f(w) = w^2/2 from any |w| <= 10 with lr 0.1 and no decay
  for (double start : {-10.0, -2.5, 0.5, 10.0}) {
    std::vector<Tensor> params = {Tensor::from_data({1}, {start}, true)};
    double prev = std::abs(start);
    for (int step = 0; step < 100; ++step) {
      zero_grad(params);
      Tensor loss = mul_scalar(mul(params[0], params[0]), 0.5);
      backward(loss);
      sgd_step(params, 0.1, 0.0);
      double cur = std::abs(params[0].value());
      EXPECT_LE(cur, prev + 1e-15);
      prev = cur;
    }
    EXPECT_LT(prev, 1e-2);
  }
}

// ---------------------------------------------------------------------------
// Oversampling
// ---------------------------------------------------------------------------

TEST(Oversample, ReferenceCounts) {
  // 198 majority + 34 minority training samples -> minority grows to 198
  std::vector<int> labels(198, 0);
  labels.insert(labels.end(), 34, 1);
  std::vector<std::size_t> idx = oversample(labels, 1, 7);
  EXPECT_EQ(idx.size(), 198u + 198u);
  std::size_t minority_entries = 0;
  std::vector<bool> seen(labels.size(), false);
  for (std::size_t i : idx) {
    seen[i] = true;
    minority_entries += (labels[i] == 1);
  }
  EXPECT_EQ(minority_entries, 198u);
  // every original sample retained
  for (bool s : seen) EXPECT_TRUE(s);
}

TEST(Oversample, BalancedIsNoOp) {
  std::vector<int> labels = {0, 1, 0, 1};
  std::vector<std::size_t> idx = oversample(labels, 1, 3);
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Oversample, DeterministicUnderSeed) {
  std::vector<int> labels(20, 0);
  labels.insert(labels.end(), 5, 1);
  EXPECT_EQ(oversample(labels, 1, 11), oversample(labels, 1, 11));
  EXPECT_NE(oversample(labels, 1, 11), oversample(labels, 1, 12));
}

TEST(Oversample, ExplicitTargetAndEmptyMinority) {
  std::vector<int> labels = {0, 0, 1};
  std::vector<std::size_t> idx = oversample(labels, 1, 5, /*target=*/10);
  std::size_t minority_entries = 0;
  for (std::size_t i : idx) minority_entries += (labels[i] == 1);
  EXPECT_EQ(minority_entries, 10u);

  std::vector<int> no_minority = {0, 0, 0};
  EXPECT_THROW(oversample(no_minority, 1, 5), DataError);
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

TEST(Augment, ZeroRotationIsIdentity) {
  Rng rng(92);
  Tensor vol = Tensor::uniform({1, 2, 6, 6}, rng, -2, 2);
  Tensor rot = rotate_volume(vol, 0.0);
  for (std::size_t i = 0; i < vol.size(); ++i) EXPECT_DOUBLE_EQ(rot.data()[i], vol.data()[i]);
}

TEST(Augment, RotationPreservesCenterAndShape) {
  Rng rng(93);
  Tensor vol = Tensor::uniform({1, 1, 7, 7}, rng, -1, 1);
  Tensor rot = rotate_volume(vol, 15.0);
  EXPECT_EQ(rot.shape(), vol.shape());
  EXPECT_NEAR(rot.at({0, 0, 3, 3}), vol.at({0, 0, 3, 3}), 1e-12);  // center fixed point
}

TEST(Augment, NormalizeMoments) {
  Rng rng(94);
  Tensor vol = Tensor::uniform({1, 3, 8, 8}, rng, 5.0, 9.0);
  Tensor norm = normalize_volume(vol);
  double mean = 0.0;
  for (double v : norm.data()) mean += v;
  mean /= static_cast<double>(norm.size());
  double var = 0.0;
  for (double v : norm.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(norm.size());
  EXPECT_NEAR(mean, 0.0, 1e-10);
  EXPECT_NEAR(var, 1.0, 1e-6);
}

TEST(Augment, SharpenMatchesConv2dOracle) {
  Rng rng(95);
  std::size_t D = 3, H = 7, W = 6;
  Tensor vol = Tensor::uniform({1, D, H, W}, rng, -2, 2);
  Tensor sharp = sharpen_volume(vol);
  std::vector<double> kernel = {0, -1, 0, -1, 5, -1, 0, -1, 0};
  for (std::size_t z = 0; z < D; ++z) {
    std::vector<double> slice(vol.data().begin() + z * H * W, vol.data().begin() + (z + 1) * H * W);
    std::vector<double> ref = oracle::conv2d_same(slice, H, W, kernel, 3);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      EXPECT_NEAR(sharp.data()[z * H * W + i], ref[i], 1e-10);
    }
  }
}

TEST(Augment, PipelineDeterministicUnderSeed) {
  Rng data_rng(96);
  Tensor vol = Tensor::uniform({1, 2, 8, 8}, data_rng, -1, 1);
  AugmentOptions opts;
  Rng r1(42), r2(42);
  Tensor a = augment_volume(vol, opts, r1);
  Tensor b = augment_volume(vol, opts, r2);
  EXPECT_EQ(a.data(), b.data());
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

TEST(Metrics, ReferenceRowFromUniqueConfusionMatrix) {
  // Enumerate confusion matrices with 15 positives / 28 negatives; exactly one
  // reproduces the reference metric row at 3 decimals.
  auto rounds_to = [](std::optional<double> v, double target) {
    return v && std::llround(*v * 1000.0) == std::llround(target * 1000.0);
  };
  int solutions = 0;
  long long sol_tp = -1, sol_tn = -1;
  for (long long tp = 0; tp <= 15; ++tp) {
    for (long long tn = 0; tn <= 28; ++tn) {
      MetricsReport r = metrics_from_counts(tp, 28 - tn, tn, 15 - tp);
      if (rounds_to(r.acc, 0.791) && rounds_to(r.f1, 0.690) && rounds_to(r.specificity, 0.857) &&
          rounds_to(r.sensitivity, 0.667) && rounds_to(r.ppv, 0.714) && rounds_to(r.npv, 0.828)) {
        ++solutions;
        sol_tp = tp;
        sol_tn = tn;
      }
    }
  }
  EXPECT_EQ(solutions, 1);
  EXPECT_EQ(sol_tp, 10);
  EXPECT_EQ(sol_tn, 24);

  MetricsReport r = metrics_from_counts(10, 4, 24, 5);
  EXPECT_NEAR(*r.acc, 0.791, 5e-4);
  EXPECT_NEAR(*r.f1, 0.690, 5e-4);
  EXPECT_NEAR(*r.specificity, 0.857, 5e-4);
  EXPECT_NEAR(*r.sensitivity, 0.667, 5e-4);
  EXPECT_NEAR(*r.ppv, 0.714, 5e-4);
  EXPECT_NEAR(*r.npv, 0.828, 5e-4);
}

TEST(Metrics, AurocTrivialCases) {
  EXPECT_DOUBLE_EQ(*compute_metrics({0.9, 0.1}, {1, 0}).auroc, 1.0);
  EXPECT_DOUBLE_EQ(*compute_metrics({0.4, 0.4, 0.4}, {1, 0, 1}).auroc, 0.5);
  EXPECT_DOUBLE_EQ(*compute_metrics({0.1, 0.9}, {1, 0}).auroc, 0.0);
}

TEST(Metrics, AurocMatchesBruteForcePairs) {
  Rng rng(97);
  for (int trial = 0; trial < 30; ++trial) {
    std::size_t n = 2 + rng.index(198);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    bool has_pos = false, has_neg = false;
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = (rng.index(4) == 0) ? 0.5 : rng.uniform();  // force ties sometimes
      labels[i] = rng.index(2) ? 1 : 0;
      has_pos = has_pos || labels[i] == 1;
      has_neg = has_neg || labels[i] == 0;
    }
    if (!has_pos || !has_neg) continue;
    MetricsReport r = compute_metrics(scores, labels);
    EXPECT_NEAR(*r.auroc, oracle::auroc_pairs(scores, labels), 1e-12);
  }
}

TEST(Metrics, SingleClassHasNoAuroc) {
  MetricsReport r = compute_metrics({0.2, 0.7}, {1, 1});
  EXPECT_FALSE(r.auroc.has_value());
  EXPECT_TRUE(r.acc.has_value());
  EXPECT_FALSE(r.specificity.has_value());  // no negatives: TN+FP = 0
  EXPECT_TRUE(r.sensitivity.has_value());
  nlohmann::json j = r.to_json();
  EXPECT_FALSE(j["metrics"].contains("auroc"));
  EXPECT_FALSE(j["metrics"].contains("specificity"));
}

TEST(Metrics, RatiosConsistentWithCounts) {
  Rng rng(98);
  for (int trial = 0; trial < 20; ++trial) {
    std::size_t n = 5 + rng.index(100);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = rng.uniform();
      labels[i] = rng.index(2) ? 1 : 0;
    }
    MetricsReport r = compute_metrics(scores, labels, 0.5);
    EXPECT_EQ(r.total(), static_cast<long long>(n));
    MetricsReport rc = metrics_from_counts(r.tp, r.fp, r.tn, r.fn);
    auto close = [](const std::optional<double>& a, const std::optional<double>& b) {
      if (a.has_value() != b.has_value()) return false;
      return !a || std::abs(*a - *b) <= 1e-12;
    };
    EXPECT_TRUE(close(r.acc, rc.acc));
    EXPECT_TRUE(close(r.f1, rc.f1));
    EXPECT_TRUE(close(r.specificity, rc.specificity));
    EXPECT_TRUE(close(r.sensitivity, rc.sensitivity));
    EXPECT_TRUE(close(r.ppv, rc.ppv));
    EXPECT_TRUE(close(r.npv, rc.npv));
  }
}

TEST(Metrics, ContractErrors) {
  EXPECT_THROW(compute_metrics({}, {}), ContractError);
  EXPECT_THROW(compute_metrics({0.5}, {2}), DataError);
  EXPECT_THROW(compute_metrics({0.5, 0.5}, {1}), ContractError);
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

TEST(Synth, ReferenceSplitSizes) {
  SynthConfig cfg;
  cfg.seed = 5;
  cfg.depth = 4;
  cfg.height = 16;
  cfg.width = 16;  // desk-scale geometry, same counts
  Dataset ds = synth_generate(cfg);
  EXPECT_EQ(ds.count(Split::train, 1), 34u);
  EXPECT_EQ(ds.count(Split::val, 1), 12u);
  EXPECT_EQ(ds.count(Split::test, 1), 15u);
  EXPECT_EQ(ds.count(Split::train, 0), 198u);
  EXPECT_EQ(ds.count(Split::val, 0), 25u);
  EXPECT_EQ(ds.count(Split::test, 0), 28u);

  // oversampling the training split reproduces 34 -> 198
  std::vector<int> train_labels;
  for (std::size_t i : ds.indices(Split::train)) train_labels.push_back(ds.labels[i]);
  std::vector<std::size_t> idx = oversample(train_labels, 1, 3);
  std::size_t minority_entries = 0;
  for (std::size_t i : idx) minority_entries += (train_labels[i] == 1);
  EXPECT_EQ(minority_entries, 198u);
}

TEST(Synth, DeterministicUnderSeed) {
  SynthConfig cfg;
  cfg.seed = 17;
  cfg.n_majority = 12;
  cfg.n_minority = 6;
  cfg.depth = 4;
  cfg.height = 12;
  cfg.width = 12;
  Dataset a = synth_generate(cfg);
  Dataset b = synth_generate(cfg);
  ASSERT_EQ(a.volumes.size(), b.volumes.size());
  for (std::size_t i = 0; i < a.volumes.size(); ++i) {
    EXPECT_EQ(a.volumes[i].data(), b.volumes[i].data());  // bitwise
    EXPECT_EQ(a.labels[i], b.labels[i]);
    EXPECT_EQ(a.tabular[i].age, b.tabular[i].age);
  }
  cfg.seed = 18;
  Dataset c = synth_generate(cfg);
  EXPECT_NE(a.volumes[0].data(), c.volumes[0].data());
}

TEST(Synth, LesionPresent) {
  SynthConfig cfg;
  cfg.seed = 19;
  cfg.n_majority = 2;
  cfg.n_minority = 2;
  cfg.depth = 6;
  cfg.height = 16;
  cfg.width = 16;
  cfg.class_signal = 50.0;  // unmistakable
  Dataset ds = synth_generate(cfg);
  for (std::size_t i = 0; i < ds.volumes.size(); ++i) {
    double mx = -1e300;
    for (double v : ds.volumes[i].data()) mx = std::max(mx, v);
    EXPECT_GT(mx, 10.0);
  }
}

TEST(Synth, GeometryTooSmallRejected) {
  SynthConfig cfg;
  cfg.depth = 2;  // cannot hold a lesion
  cfg.height = 16;
  cfg.width = 16;
  EXPECT_THROW(synth_generate(cfg), ConfigError);
  cfg.depth = 4;
  cfg.height = 4;
  EXPECT_THROW(synth_generate(cfg), ConfigError);
}

TEST(Tabular, MissingCsvColumnNamed) {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "mmfuse_csv_test";
  fs::create_directories(dir);
  std::ofstream out(dir / "tabular.csv");
  out << "id,gender,age,t_stage,n_stage,m_stage,smoking_history,label\n";  // no weight
  out.close();
  try {
    read_tabular_csv(dir / "tabular.csv");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("weight"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Synth, DatasetRoundTripThroughDisk) {
  namespace fs = std::filesystem;
  SynthConfig cfg;
  cfg.seed = 20;
  cfg.n_majority = 6;
  cfg.n_minority = 4;
  cfg.depth = 4;
  cfg.height = 8;
  cfg.width = 8;
  Dataset ds = synth_generate(cfg);
  fs::path dir = fs::temp_directory_path() / "mmfuse_ds_test";
  fs::remove_all(dir);
  write_dataset(dir, ds);
  Dataset back = load_dataset(dir / "manifest.json");
  ASSERT_EQ(back.volumes.size(), ds.volumes.size());
  for (std::size_t i = 0; i < ds.volumes.size(); ++i) {
    EXPECT_EQ(back.volumes[i].data(), ds.volumes[i].data());
    EXPECT_EQ(back.labels[i], ds.labels[i]);
    EXPECT_EQ(back.splits[i], ds.splits[i]);
    EXPECT_EQ(back.tabular[i].t_stage, ds.tabular[i].t_stage);
    EXPECT_DOUBLE_EQ(back.tabular[i].age, ds.tabular[i].age);
  }
  EXPECT_EQ(dataset_hash(back), dataset_hash(ds));
  fs::remove_all(dir);
}
