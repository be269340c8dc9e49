#pragma once

#include <chrono>
#include <set>

#include "mmfuse/training.hpp"

namespace mmfuse {

// ----------------------------------------------------------------------------
// Flat JSON run configuration (versioned schema, unknown keys rejected)
// ----------------------------------------------------------------------------

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t epochs = 50;
  double lr = 1e-4;
  double weight_decay = 0.01;
  std::size_t batch_size = 4;
  std::string fusion_mode = "msca";

  std::size_t depth = 12, height = 192, width = 192;
  std::size_t channels_base = 64;
  std::size_t feature_dim = 256;
  std::size_t token_width = 16;
  std::size_t heads = 4;
  std::size_t cab_reduction = 16;
  double dropout = 0.5;
  bool use_e3d_msca = true;
  std::size_t kan_degree = 3, kan_grid = 8, kan_hidden = 64;
  double kan_range = 3.0;

  std::size_t n_majority = 251, n_minority = 61;
  double class_signal = 1.0;

  bool augment_rotation = true, augment_sharpen = true, augment_normalize = true;
  bool oversample = true;
  double threshold = 0.5;

  nlohmann::json to_json() const {
    return nlohmann::json{{"schema_version", 1},
                          {"seed", seed},
                          {"epochs", epochs},
                          {"lr", lr},
                          {"weight_decay", weight_decay},
                          {"batch_size", batch_size},
                          {"fusion_mode", fusion_mode},
                          {"depth", depth},
                          {"height", height},
                          {"width", width},
                          {"channels_base", channels_base},
                          {"feature_dim", feature_dim},
                          {"token_width", token_width},
                          {"heads", heads},
                          {"cab_reduction", cab_reduction},
                          {"dropout", dropout},
                          {"use_e3d_msca", use_e3d_msca},
                          {"kan_degree", kan_degree},
                          {"kan_grid", kan_grid},
                          {"kan_hidden", kan_hidden},
                          {"kan_range", kan_range},
                          {"n_majority", n_majority},
                          {"n_minority", n_minority},
                          {"class_signal", class_signal},
                          {"augment_rotation", augment_rotation},
                          {"augment_sharpen", augment_sharpen},
                          {"augment_normalize", augment_normalize},
                          {"oversample", oversample},
                          {"threshold", threshold}};
  }

  static RunConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    RunConfig c;
    std::set<std::string> known;
    auto get_uint = [&](const char* key, std::size_t& field) {
      known.insert(key);
      if (!j.contains(key)) return;
      if (!j[key].is_number_integer() && !j[key].is_number_unsigned()) {
        throw ConfigError(std::string("config field '") + key + "': expected an integer");
      }
      long long v = j[key].get<long long>();
      if (v < 0) throw ConfigError(std::string("config field '") + key + "': must be >= 0");
      field = static_cast<std::size_t>(v);
    };
    auto get_double = [&](const char* key, double& field) {
      known.insert(key);
      if (!j.contains(key)) return;
      if (!j[key].is_number()) {
        throw ConfigError(std::string("config field '") + key + "': expected a number");
      }
      field = j[key].get<double>();
    };
    auto get_bool = [&](const char* key, bool& field) {
      known.insert(key);
      if (!j.contains(key)) return;
      if (!j[key].is_boolean()) {
        throw ConfigError(std::string("config field '") + key + "': expected a boolean");
      }
      field = j[key].get<bool>();
    };
    auto get_string = [&](const char* key, std::string& field) {
      known.insert(key);
      if (!j.contains(key)) return;
      if (!j[key].is_string()) {
        throw ConfigError(std::string("config field '") + key + "': expected a string");
      }
      field = j[key].get<std::string>();
    };

    known.insert("schema_version");
    if (j.contains("schema_version")) {
      if (!j["schema_version"].is_number_integer() || j["schema_version"].get<int>() != 1) {
        throw ConfigError("config field 'schema_version': only version 1 is supported");
      }
    }
    std::size_t seed_sz = static_cast<std::size_t>(c.seed);
    get_uint("seed", seed_sz);
    c.seed = seed_sz;
    get_uint("epochs", c.epochs);
    get_double("lr", c.lr);
    get_double("weight_decay", c.weight_decay);
    get_uint("batch_size", c.batch_size);
    get_string("fusion_mode", c.fusion_mode);
    get_uint("depth", c.depth);
    get_uint("height", c.height);
    get_uint("width", c.width);
    get_uint("channels_base", c.channels_base);
    get_uint("feature_dim", c.feature_dim);
    get_uint("token_width", c.token_width);
    get_uint("heads", c.heads);
    get_uint("cab_reduction", c.cab_reduction);
    get_double("dropout", c.dropout);
    get_bool("use_e3d_msca", c.use_e3d_msca);
    get_uint("kan_degree", c.kan_degree);
    get_uint("kan_grid", c.kan_grid);
    get_uint("kan_hidden", c.kan_hidden);
    get_double("kan_range", c.kan_range);
    get_uint("n_majority", c.n_majority);
    get_uint("n_minority", c.n_minority);
    get_double("class_signal", c.class_signal);
    get_bool("augment_rotation", c.augment_rotation);
    get_bool("augment_sharpen", c.augment_sharpen);
    get_bool("augment_normalize", c.augment_normalize);
    get_bool("oversample", c.oversample);
    get_double("threshold", c.threshold);

    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!known.count(it.key())) {
        throw ConfigError("config field '" + it.key() + "' is not part of schema version 1");
      }
    }
    c.validate();
    return c;
  }

  void validate() const {
    model_config().validate();
    train_config().validate();
    parse_fusion_mode(fusion_mode);
    if (n_majority < 1 || n_minority < 1) throw ConfigError("class counts must be >= 1");
    if (threshold <= 0.0 || threshold >= 1.0) throw ConfigError("threshold must be in (0,1)");
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.depth = depth;
    m.height = height;
    m.width = width;
    m.channels_base = channels_base;
    m.feature_dim = feature_dim;
    m.token_width = token_width;
    m.heads = heads;
    m.cab_reduction = cab_reduction;
    m.dropout = dropout;
    m.use_e3d_msca = use_e3d_msca;
    m.fusion_mode = parse_fusion_mode(fusion_mode);
    m.kan_degree = kan_degree;
    m.kan_grid = kan_grid;
    m.kan_range = kan_range;
    m.kan_hidden = kan_hidden;
    return m;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.epochs = epochs;
    t.lr = lr;
    t.weight_decay = weight_decay;
    t.batch_size = batch_size;
    t.seed = seed;
    t.oversample_minority = oversample;
    t.augment.rotation = augment_rotation;
    t.augment.sharpen = augment_sharpen;
    t.augment.normalize = augment_normalize;
    t.threshold = threshold;
    return t;
  }

  SynthConfig synth_config() const {
    SynthConfig s;
    s.n_majority = n_majority;
    s.n_minority = n_minority;
    s.depth = depth;
    s.height = height;
    s.width = width;
    s.class_signal = class_signal;
    s.seed = derive_seed(seed, "dataset");
    return s;
  }

  std::string content_hash() const { return git_blob_hash(to_json().dump()); }
};

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return RunConfig::from_json(j);
}

// ----------------------------------------------------------------------------
// Checkpoint container: "MMCK" | u32 version | u64 json_len | json |
// MMF1 records in the order listed under "params".
// ----------------------------------------------------------------------------

struct Checkpoint {
  RunConfig config;
  TabularScaler scaler;
  std::vector<std::pair<std::string, Tensor>> params;
};

inline void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg,
                            const TabularScaler& scaler,
                            const std::vector<std::pair<std::string, Tensor>>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot open " + path.string() + " for writing");
  nlohmann::json meta;
  meta["config"] = cfg.to_json();
  meta["scaler"] = {{"age_mean", scaler.age_mean},
                    {"age_std", scaler.age_std},
                    {"weight_mean", scaler.weight_mean},
                    {"weight_std", scaler.weight_std}};
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, t] : params) names.push_back(name);
  meta["params"] = names;
  std::string blob = meta.dump();

  out.write("MMCK", 4);
  detail::write_le<std::uint32_t>(out, 1);
  detail::write_le<std::uint64_t>(out, blob.size());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  for (const auto& [name, t] : params) write_tensor(out, t);
  if (!out) throw DataError("checkpoint: write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "MMCK", 4) != 0) {
    throw DataError("checkpoint: bad magic in " + path.string());
  }
  std::uint32_t version = detail::read_le<std::uint32_t>(in);
  if (version != 1) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  std::uint64_t len = detail::read_le<std::uint64_t>(in);
  std::string blob(len, '\0');
  in.read(blob.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("checkpoint: truncated metadata");
  nlohmann::json meta = nlohmann::json::parse(blob);

  Checkpoint ck;
  ck.config = RunConfig::from_json(meta.at("config"));
  ck.scaler.age_mean = meta.at("scaler").at("age_mean").get<double>();
  ck.scaler.age_std = meta.at("scaler").at("age_std").get<double>();
  ck.scaler.weight_mean = meta.at("scaler").at("weight_mean").get<double>();
  ck.scaler.weight_std = meta.at("scaler").at("weight_std").get<double>();
  for (const auto& name : meta.at("params")) {
    ck.params.emplace_back(name.get<std::string>(), read_tensor(in));
  }
  return ck;
}

// ----------------------------------------------------------------------------
// Artifact writers
// ----------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path);
  out << content;
  if (!out) throw DataError("cannot write " + path.string());
}

inline std::string predictions_csv(const EvalOutput& eval) {
  std::ostringstream os;
  os << "id,score,label\n";
  for (std::size_t i = 0; i < eval.ids.size(); ++i) {
    os << eval.ids[i] << ',' << fmt_double(eval.scores[i]) << ',' << eval.labels[i] << '\n';
  }
  return os.str();
}

inline std::string epochs_csv(const std::vector<EpochRow>& rows) {
  std::ostringstream os;
  os << "epoch,loss,val_auroc,val_acc\n";
  for (const EpochRow& r : rows) {
    os << r.epoch << ',' << fmt_double(r.loss) << ',';
    if (r.val_auroc) os << fmt_double(*r.val_auroc);
    os << ',';
    if (r.val_acc) os << fmt_double(*r.val_acc);
    os << '\n';
  }
  return os.str();
}

}  // namespace detail

// ----------------------------------------------------------------------------
// train / eval / ablate entry points (shared by the CLI and the tests)
// ----------------------------------------------------------------------------

struct RunArtifacts {
  nlohmann::json manifest;
  MetricsReport final_metrics;
  std::filesystem::path out_dir;
};

inline RunArtifacts run_train(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(out_dir);

  Dataset ds = synth_generate(cfg.synth_config());
  write_dataset(out_dir / "dataset", ds);
  std::string ds_hash = dataset_hash(ds);

  TabularScaler scaler = TabularScaler::fit(ds.tabular, ds.indices(Split::train));
  Rng init_rng(derive_seed(cfg.seed, "init"));
  Model model = build_model(cfg.model_config(), init_rng);

  TrainResult result = fit(model, ds, scaler, cfg.train_config());

  save_checkpoint(out_dir / "checkpoint_last.mmck", cfg, scaler, model.named_parameters());
  {
    auto named = model.named_parameters();
    for (std::size_t i = 0; i < named.size(); ++i) {
      named[i].second = Tensor::from_data(named[i].second.shape(), result.best_params[i]);
    }
    save_checkpoint(out_dir / "checkpoint_best.mmck", cfg, scaler, named);
  }

  detail::write_text(out_dir / "epochs.csv", detail::epochs_csv(result.epochs));
  detail::write_text(out_dir / "predictions.csv", detail::predictions_csv(result.final_test));
  detail::write_text(out_dir / "metrics.json", result.final_test.metrics.to_json().dump(2) + "\n");

  nlohmann::json manifest;
  manifest["config"] = cfg.to_json();
  manifest["seed"] = cfg.seed;
  manifest["config_hash"] = cfg.content_hash();
  manifest["dataset_hash"] = ds_hash;
  nlohmann::json epochs = nlohmann::json::array();
  for (const EpochRow& r : result.epochs) {
    nlohmann::json row{{"epoch", r.epoch}, {"loss", r.loss}};
    if (r.val_auroc) row["val_auroc"] = *r.val_auroc;
    if (r.val_acc) row["val_acc"] = *r.val_acc;
    epochs.push_back(row);
  }
  manifest["epochs"] = epochs;
  manifest["final_metrics"] = result.final_test.metrics.to_json();
  manifest["best"] = {{"epoch", result.best_epoch},
                      {"metrics", result.best_test.metrics.to_json()}};
  auto t1 = std::chrono::steady_clock::now();
  manifest["wall_clock_seconds"] = std::chrono::duration<double>(t1 - t0).count();
  detail::write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");

  RunArtifacts art;
  art.manifest = manifest;
  art.final_metrics = result.final_test.metrics;
  art.out_dir = out_dir;
  return art;
}

inline MetricsReport run_eval(const std::filesystem::path& ckpt_path,
                              const std::filesystem::path& data_manifest,
                              const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  Checkpoint ck = load_checkpoint(ckpt_path);
  Dataset ds = load_dataset(data_manifest);
  if (ds.depth != ck.config.depth || ds.height != ck.config.height ||
      ds.width != ck.config.width) {
    throw ConfigError("eval: dataset geometry " + std::to_string(ds.depth) + "x" +
                      std::to_string(ds.height) + "x" + std::to_string(ds.width) +
                      " does not match checkpoint " + std::to_string(ck.config.depth) + "x" +
                      std::to_string(ck.config.height) + "x" + std::to_string(ck.config.width));
  }

  Rng init_rng(derive_seed(ck.config.seed, "init"));
  Model model = build_model(ck.config.model_config(), init_rng);
  auto named = model.named_parameters();
  if (named.size() != ck.params.size()) {
    throw DataError("eval: checkpoint has " + std::to_string(ck.params.size()) +
                    " tensors, model expects " + std::to_string(named.size()));
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (named[i].first != ck.params[i].first ||
        named[i].second.shape() != ck.params[i].second.shape()) {
      throw DataError("eval: checkpoint tensor '" + ck.params[i].first +
                      "' does not match model parameter '" + named[i].first + "'");
    }
    named[i].second.mutable_data() = ck.params[i].second.data();
  }

  EvalOutput eval = evaluate_split(model, ds, ck.scaler, Split::test, ck.config.threshold);
  fs::create_directories(out_dir);
  detail::write_text(out_dir / "predictions.csv", detail::predictions_csv(eval));
  detail::write_text(out_dir / "metrics.json", eval.metrics.to_json().dump(2) + "\n");
  return eval.metrics;
}

// Grid file: {"base": {flat config...},
//             "fusion_modes": ["msca", ...],
//             "encoder_variants": [{"use_e3d_msca": .., "dropout": ..}, ...]}
// Cells are the cross product; encoder_variants defaults to one empty variant.
inline std::filesystem::path run_ablate(const std::filesystem::path& grid_path,
                                        const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  std::ifstream in(grid_path);
  if (!in) throw ConfigError("ablate: cannot open " + grid_path.string());
  nlohmann::json grid;
  try {
    grid = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("ablate: grid is not valid JSON: " + std::string(e.what()));
  }
  if (!grid.contains("base") || !grid["base"].is_object()) {
    throw ConfigError("ablate: grid needs a 'base' config object");
  }
  if (!grid.contains("fusion_modes") || !grid["fusion_modes"].is_array() ||
      grid["fusion_modes"].empty()) {
    throw ConfigError("ablate: grid needs a non-empty 'fusion_modes' array");
  }
  nlohmann::json variants = nlohmann::json::array({nlohmann::json::object()});
  if (grid.contains("encoder_variants")) {
    if (!grid["encoder_variants"].is_array() || grid["encoder_variants"].empty()) {
      throw ConfigError("ablate: 'encoder_variants' must be a non-empty array");
    }
    variants = grid["encoder_variants"];
  }

  fs::create_directories(out_dir);
  std::ostringstream csv;
  csv << "fusion_mode,use_e3d_msca,dropout,auroc,acc,f1,specificity,sensitivity,ppv,npv\n";
  for (const auto& mode : grid["fusion_modes"]) {
    if (!mode.is_string()) throw ConfigError("ablate: fusion_modes entries must be strings");
    parse_fusion_mode(mode.get<std::string>());  // unknown mode rejected before any training
    for (const auto& variant : variants) {
      nlohmann::json cell_json = grid["base"];
      cell_json["fusion_mode"] = mode;
      for (auto it = variant.begin(); it != variant.end(); ++it) cell_json[it.key()] = it.value();
      RunConfig cell = RunConfig::from_json(cell_json);

      std::string name = mode.get<std::string>();
      if (variant.contains("use_e3d_msca") || variant.contains("dropout")) {
        name += std::string("_e3d") + (cell.use_e3d_msca ? "1" : "0") + "_drop" +
                (cell.dropout > 0.0 ? "1" : "0");
      }
      RunArtifacts art = run_train(cell, out_dir / "cells" / name);

      auto metric = [&](const std::optional<double>& v) {
        return v ? detail::fmt_double(*v) : std::string();
      };
      const MetricsReport& m = art.final_metrics;
      csv << cell.fusion_mode << ',' << (cell.use_e3d_msca ? 1 : 0) << ','
          << detail::fmt_double(cell.dropout) << ',' << metric(m.auroc) << ',' << metric(m.acc)
          << ',' << metric(m.f1) << ',' << metric(m.specificity) << ',' << metric(m.sensitivity)
          << ',' << metric(m.ppv) << ',' << metric(m.npv) << '\n';
    }
  }
  fs::path csv_path = out_dir / "ablation.csv";
  detail::write_text(csv_path, csv.str());
  return csv_path;
}

}  // namespace mmfuse
