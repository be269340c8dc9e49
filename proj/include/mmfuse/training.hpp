#pragma once

#include "mmfuse/data.hpp"
#include "mmfuse/metrics.hpp"
#include "mmfuse/model.hpp"

namespace mmfuse {

// ----------------------------------------------------------------------------
// Plain SGD with coupled L2 weight decay: w <- w - lr * (g + wd * w).
// ----------------------------------------------------------------------------

inline Tensor sgd_step(const Tensor& w, const Tensor& g, double lr, double weight_decay) {
  if (w.shape() != g.shape()) {
    throw ContractError("sgd_step: weight shape " + shape_str(w.shape()) +
                        " does not match gradient shape " + shape_str(g.shape()));
  }
  std::vector<double> out(w.size());
  const auto& wd = w.data();
  const auto& gd = g.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = wd[i] - lr * (gd[i] + weight_decay * wd[i]);
  }
  return Tensor::from_data(w.shape(), std::move(out));
}

// In-place update of parameters from their accumulated gradients.
inline void sgd_step(std::vector<Tensor>& params, double lr, double weight_decay) {
  for (Tensor& p : params) {
    auto& w = p.mutable_data();
    if (!p.has_grad()) {
      for (double& v : w) v -= lr * weight_decay * v;
      continue;
    }
    const auto& g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (g[i] + weight_decay * w[i]);
  }
}

// ----------------------------------------------------------------------------
// Training recipe
// ----------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 50;
  double lr = 1e-4;
  double weight_decay = 0.01;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  bool oversample_minority = true;
  AugmentOptions augment;
  double threshold = 0.5;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  }
};

struct EpochRow {
  std::size_t epoch = 0;
  double loss = 0.0;
  std::optional<double> val_auroc, val_acc;
};

struct EvalOutput {
  std::vector<std::string> ids;
  std::vector<double> scores;
  std::vector<int> labels;
  MetricsReport metrics;
};

struct TrainResult {
  std::vector<EpochRow> epochs;
  EvalOutput final_test;
  EvalOutput best_test;       // parameters at the best-val-AUROC epoch
  std::size_t best_epoch = 0;
  std::vector<std::vector<double>> best_params;  // raw copies, order of named_parameters()
};

// Thrown when a training step goes non-finite; carries the step description.
struct TrainAbort : Error {
  using Error::Error;
};

namespace detail {

inline Tensor stack_volumes(const Dataset& ds, const std::vector<std::size_t>& idx) {
  std::size_t per = ds.depth * ds.height * ds.width;
  std::vector<double> data(idx.size() * per);
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const auto& v = ds.volumes[idx[n]].data();
    std::copy(v.begin(), v.end(), data.begin() + n * per);
  }
  return Tensor::from_data({idx.size(), 1, ds.depth, ds.height, ds.width}, std::move(data));
}

inline Tensor stack_augmented(const Dataset& ds, const std::vector<std::size_t>& idx,
                              const AugmentOptions& opts, Rng& rng) {
  std::size_t per = ds.depth * ds.height * ds.width;
  std::vector<double> data(idx.size() * per);
  for (std::size_t n = 0; n < idx.size(); ++n) {
    Tensor v = augment_volume(ds.volumes[idx[n]], opts, rng);
    std::copy(v.data().begin(), v.data().end(), data.begin() + n * per);
  }
  return Tensor::from_data({idx.size(), 1, ds.depth, ds.height, ds.width}, std::move(data));
}

}  // namespace detail

// Deterministic batched inference over one split.
inline EvalOutput evaluate_split(const Model& model, const Dataset& ds, const TabularScaler& scaler,
                                 Split split, double threshold, std::size_t batch_size = 8) {
  NoGradGuard no_grad;
  EvalOutput out;
  std::vector<std::size_t> idx = ds.indices(split);
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    std::vector<std::size_t> batch(idx.begin() + start,
                                   idx.begin() + std::min(idx.size(), start + batch_size));
    Tensor vols = detail::stack_volumes(ds, batch);
    Tensor tab = encode_tabular(ds.tabular, batch, scaler);
    Tensor probs = model.forward(vols, tab, /*train_mode=*/false);
    for (std::size_t n = 0; n < batch.size(); ++n) {
      out.ids.push_back(ds.ids[batch[n]]);
      out.scores.push_back(probs.data()[n]);
      out.labels.push_back(ds.labels[batch[n]]);
    }
  }
  out.metrics = compute_metrics(out.scores, out.labels, threshold);
  return out;
}

// Oversample -> augment -> forward -> BCE -> SGD, with per-epoch validation.
inline TrainResult fit(Model& model, const Dataset& ds, const TabularScaler& scaler,
                       const TrainConfig& cfg) {
  cfg.validate();
  TrainResult result;
  std::vector<Tensor> params = model.parameters();

  std::vector<std::size_t> train_idx = ds.indices(Split::train);
  if (train_idx.empty()) throw DataError("fit: empty training split");
  std::vector<int> train_labels;
  for (std::size_t i : train_idx) train_labels.push_back(ds.labels[i]);

  std::vector<std::size_t> epoch_pool;  // indices into train_idx
  if (cfg.oversample_minority) {
    epoch_pool = oversample(train_labels, /*minority_label=*/1, derive_seed(cfg.seed, "oversample"));
  } else {
    epoch_pool.resize(train_idx.size());
    std::iota(epoch_pool.begin(), epoch_pool.end(), 0);
  }

  Rng loop_rng(derive_seed(cfg.seed, "train_loop"));
  double best_val = -1.0;
  result.best_epoch = 0;

  auto snapshot_params = [&] {
    std::vector<std::vector<double>> snap;
    snap.reserve(params.size());
    for (const Tensor& p : params) snap.push_back(p.data());
    return snap;
  };
  result.best_params = snapshot_params();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = epoch_pool;
    loop_rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<std::size_t> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k) {
        batch.push_back(train_idx[order[k]]);
      }
      ++batches;
      try {
        Tensor vols = detail::stack_augmented(ds, batch, cfg.augment, loop_rng);
        Tensor tab = encode_tabular(ds.tabular, batch, scaler);
        std::vector<double> y;
        for (std::size_t i : batch) y.push_back(static_cast<double>(ds.labels[i]));
        Tensor labels = Tensor::from_data({batch.size()}, std::move(y));

        Tensor probs = model.forward(vols, tab, /*train_mode=*/true, &loop_rng);
        Tensor loss = bce_loss(probs, labels);
        epoch_loss += loss.value();
        zero_grad(params);
        backward(loss);
        sgd_step(params, cfg.lr, cfg.weight_decay);
      } catch (const NonFiniteError& e) {
        throw TrainAbort("epoch " + std::to_string(epoch) + " batch " + std::to_string(batches) +
                         ": " + e.what());
      }
    }

    EpochRow row;
    row.epoch = epoch;
    row.loss = epoch_loss / static_cast<double>(std::max<std::size_t>(1, batches));
    if (!ds.indices(Split::val).empty()) {
      EvalOutput val;
      try {
        val = evaluate_split(model, ds, scaler, Split::val, cfg.threshold);
      } catch (const NonFiniteError& e) {
        throw TrainAbort("epoch " + std::to_string(epoch) + " validation: " + e.what());
      }
      row.val_auroc = val.metrics.auroc;
      row.val_acc = val.metrics.acc;
      if (row.val_auroc && *row.val_auroc > best_val) {
        best_val = *row.val_auroc;
        result.best_epoch = epoch;
        result.best_params = snapshot_params();
      }
    }
    result.epochs.push_back(row);
  }
  if (result.best_epoch == 0) {  // no val AUROC ever defined; fall back to last
    result.best_epoch = cfg.epochs;
    result.best_params = snapshot_params();
  }

  try {
    result.final_test = evaluate_split(model, ds, scaler, Split::test, cfg.threshold);
    // Re-evaluate the test split at the best-val parameters, then restore.
    std::vector<std::vector<double>> last = snapshot_params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i].mutable_data() = result.best_params[i];
    }
    result.best_test = evaluate_split(model, ds, scaler, Split::test, cfg.threshold);
    for (std::size_t i = 0; i < params.size(); ++i) params[i].mutable_data() = last[i];
  } catch (const NonFiniteError& e) {
    throw TrainAbort(std::string("final test evaluation: ") + e.what());
  }
  return result;
}

}  // namespace mmfuse
