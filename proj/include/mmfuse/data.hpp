#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "mmfuse/encoders.hpp"
#include "mmfuse/hash.hpp"
#include "mmfuse/io.hpp"
#include "mmfuse/tensor.hpp"

#include <nlohmann/json.hpp>

namespace mmfuse {

// ----------------------------------------------------------------------------
// Oversampling: duplicate minority training samples (uniform, with
// replacement) until the minority count reaches the target. Originals are all
// retained; the majority is untouched.
// ----------------------------------------------------------------------------

inline std::vector<std::size_t> oversample(const std::vector<int>& labels, int minority_label,
                                           std::uint64_t seed, std::size_t target = 0) {
  std::vector<std::size_t> minority;
  std::size_t majority_count = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == minority_label) {
      minority.push_back(i);
    } else {
      ++majority_count;
    }
  }
  if (minority.empty()) throw DataError("oversample: minority class is empty");
  if (target == 0) target = majority_count;  // equalize

  std::vector<std::size_t> out(labels.size());
  std::iota(out.begin(), out.end(), 0);
  Rng rng(seed);
  for (std::size_t n = minority.size(); n < target; ++n) {
    out.push_back(minority[rng.index(minority.size())]);
  }
  return out;
}

// ----------------------------------------------------------------------------
// Augmentation ops (raw volume data, not taped)
// ----------------------------------------------------------------------------

struct AugmentOptions {
  bool rotation = true;
  bool sharpen = true;
  bool normalize = true;
};

// In-plane rotation by `angle_deg` about the slice center, bilinear sampling,
// zero outside the frame.
inline Tensor rotate_volume(const Tensor& vol, double angle_deg) {
  const Shape& s = vol.shape();
  if (s.size() < 3) throw ShapeError("rotate_volume: need [...,D,H,W]");
  std::size_t W = s[s.size() - 1], H = s[s.size() - 2];
  std::size_t slices = vol.size() / (H * W);
  double theta = angle_deg * 3.14159265358979323846 / 180.0;
  double c = std::cos(theta), sn = std::sin(theta);
  double cy = (static_cast<double>(H) - 1.0) / 2.0;
  double cx = (static_cast<double>(W) - 1.0) / 2.0;

  std::vector<double> out(vol.size(), 0.0);
  const auto& in = vol.data();
  for (std::size_t sl = 0; sl < slices; ++sl) {
    const double* ip = in.data() + sl * H * W;
    double* op = out.data() + sl * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        double dy = static_cast<double>(y) - cy;
        double dx = static_cast<double>(x) - cx;
        // inverse map: source = R(-theta) * offset + center
        double sy = cy + c * dy + sn * dx;
        double sx = cx - sn * dy + c * dx;
        double fy = std::floor(sy), fx = std::floor(sx);
        long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
        double wy = sy - fy, wx = sx - fx;
        double acc = 0.0;
        for (int oy = 0; oy <= 1; ++oy) {
          for (int ox = 0; ox <= 1; ++ox) {
            long yy = y0 + oy, xx = x0 + ox;
            if (yy < 0 || yy >= static_cast<long>(H) || xx < 0 || xx >= static_cast<long>(W)) continue;
            double w = (oy ? wy : 1.0 - wy) * (ox ? wx : 1.0 - wx);
            acc += w * ip[static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)];
          }
        }
        op[y * W + x] = acc;
      }
    }
  }
  return Tensor::from_data(s, std::move(out));
}

// Per-slice 3x3 sharpening kernel [[0,-1,0],[-1,5,-1],[0,-1,0]], zero padding.
inline Tensor sharpen_volume(const Tensor& vol) {
  const Shape& s = vol.shape();
  if (s.size() < 3) throw ShapeError("sharpen_volume: need [...,D,H,W]");
  std::size_t W = s[s.size() - 1], H = s[s.size() - 2];
  std::size_t slices = vol.size() / (H * W);
  static const double kernel[3][3] = {{0, -1, 0}, {-1, 5, -1}, {0, -1, 0}};

  std::vector<double> out(vol.size());
  const auto& in = vol.data();
  for (std::size_t sl = 0; sl < slices; ++sl) {
    const double* ip = in.data() + sl * H * W;
    double* op = out.data() + sl * H * W;
    for (long y = 0; y < static_cast<long>(H); ++y) {
      for (long x = 0; x < static_cast<long>(W); ++x) {
        double acc = 0.0;
        for (int ky = -1; ky <= 1; ++ky) {
          for (int kx = -1; kx <= 1; ++kx) {
            long yy = y + ky, xx = x + kx;
            if (yy < 0 || yy >= static_cast<long>(H) || xx < 0 || xx >= static_cast<long>(W)) continue;
            acc += kernel[ky + 1][kx + 1] * ip[yy * W + xx];
          }
        }
        op[y * W + x] = acc;
      }
    }
  }
  return Tensor::from_data(s, std::move(out));
}

// Whole-volume standardization, std floored at 1e-6.
inline Tensor normalize_volume(const Tensor& vol) {
  double mean = 0.0;
  for (double v : vol.data()) mean += v;
  mean /= static_cast<double>(vol.size());
  double var = 0.0;
  for (double v : vol.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(vol.size());
  double inv = 1.0 / std::max(std::sqrt(var), 1e-6);
  std::vector<double> out(vol.size());
  const auto& in = vol.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (in[i] - mean) * inv;
  return Tensor::from_data(vol.shape(), std::move(out));
}

inline Tensor augment_volume(const Tensor& vol, const AugmentOptions& opts, Rng& rng) {
  Tensor v = vol;
  if (opts.rotation) v = rotate_volume(v, rng.uniform(-15.0, 15.0));
  if (opts.sharpen) v = sharpen_volume(v);
  if (opts.normalize) v = normalize_volume(v);
  return v;
}

// ----------------------------------------------------------------------------
// Synthetic dataset: class-dependent bright ellipsoid in noise, plus
// class-conditional tabular attributes. Split fractions mirror the source
// study: minority 34/12/15 of 61, majority 198/25/28 of 251.
// ----------------------------------------------------------------------------

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

struct SynthConfig {
  std::size_t n_majority = 251;  // label 0
  std::size_t n_minority = 61;   // label 1
  std::size_t depth = 12, height = 192, width = 192;
  double class_signal = 1.0;
  std::uint64_t seed = 0;
};

struct Dataset {
  std::size_t depth = 0, height = 0, width = 0;
  std::vector<std::string> ids;
  std::vector<Tensor> volumes;  // each [1,D,H,W]
  std::vector<TabularRow> tabular;
  std::vector<int> labels;
  std::vector<Split> splits;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i) {
      if (splits[i] == s) out.push_back(i);
    }
    return out;
  }

  std::size_t count(Split s, int label) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < splits.size(); ++i) n += (splits[i] == s && labels[i] == label);
    return n;
  }
};

namespace detail {

// val/test counts proportional to the reference split; exact at the
// reference sizes (61 -> 12/15, 251 -> 25/28).
inline std::pair<std::size_t, std::size_t> split_counts(std::size_t n, double val_frac,
                                                        double test_frac) {
  auto rounded = [](double x) { return static_cast<std::size_t>(std::llround(x)); };
  std::size_t val = rounded(val_frac * static_cast<double>(n));
  std::size_t test = rounded(test_frac * static_cast<double>(n));
  while (val + test + 1 > n) {  // keep at least one training sample
    if (test > 0) {
      --test;
    } else if (val > 0) {
      --val;
    } else {
      break;
    }
  }
  return {val, test};
}

inline int categorical(Rng& rng, const std::vector<double>& probs) {
  double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size()) - 1;
}

}  // namespace detail

inline Dataset synth_generate(const SynthConfig& cfg) {
  if (cfg.n_majority < 1 || cfg.n_minority < 1) {
    throw ConfigError("synth: class counts must be >= 1");
  }
  if (cfg.depth < 3 || cfg.height < 5 || cfg.width < 5) {
    throw ConfigError("synth: geometry " + std::to_string(cfg.depth) + "x" +
                      std::to_string(cfg.height) + "x" + std::to_string(cfg.width) +
                      " is too small to hold a lesion");
  }

  Dataset ds;
  ds.depth = cfg.depth;
  ds.height = cfg.height;
  ds.width = cfg.width;

  Rng vol_rng(derive_seed(cfg.seed, "volumes"));
  Rng tab_rng(derive_seed(cfg.seed, "tabular"));
  Rng split_rng(derive_seed(cfg.seed, "splits"));

  std::size_t total = cfg.n_majority + cfg.n_minority;
  ds.ids.reserve(total);
  ds.volumes.reserve(total);

  auto gen_volume = [&](int label) {
    std::size_t D = cfg.depth, H = cfg.height, W = cfg.width;
    std::vector<double> v(D * H * W);
    for (double& x : v) x = vol_rng.normal();

    // Small bright ellipsoid; minority lesions carry the full signal,
    // majority lesions a fraction of it.
    double amplitude = cfg.class_signal * (label == 1 ? 1.0 : 0.35);
    double rd = vol_rng.uniform(1.0, std::min(4.0, (static_cast<double>(D) - 1.0) / 2.0));
    double rh = vol_rng.uniform(2.0, std::min(3.5, (static_cast<double>(H) - 1.0) / 2.0));
    double rw = vol_rng.uniform(2.0, std::min(3.5, (static_cast<double>(W) - 1.0) / 2.0));
    double cd = vol_rng.uniform(rd, static_cast<double>(D) - 1.0 - rd);
    double ch = vol_rng.uniform(rh, static_cast<double>(H) - 1.0 - rh);
    double cw = vol_rng.uniform(rw, static_cast<double>(W) - 1.0 - rw);
    for (std::size_t z = 0; z < D; ++z) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          double dz = (static_cast<double>(z) - cd) / rd;
          double dy = (static_cast<double>(y) - ch) / rh;
          double dx = (static_cast<double>(x) - cw) / rw;
          if (dz * dz + dy * dy + dx * dx <= 1.0) v[(z * H + y) * W + x] += amplitude;
        }
      }
    }
    return Tensor::from_data({1, D, H, W}, std::move(v));
  };

  auto gen_row = [&](int label) {
    TabularRow r;
    double cs = cfg.class_signal;
    r.gender = TabularSchema::gender_values()[detail::categorical(
        tab_rng, label ? std::vector<double>{0.55, 0.45} : std::vector<double>{0.6, 0.4})];
    r.age = (label ? 62.0 + 1.6 * cs : 62.0) + 8.0 * tab_rng.normal();
    r.weight = (label ? 72.0 - 1.2 * cs : 72.0) + 10.0 * tab_rng.normal();
    r.t_stage = TabularSchema::t_values()[detail::categorical(
        tab_rng, label ? std::vector<double>{0.1, 0.2, 0.3, 0.4}
                       : std::vector<double>{0.45, 0.3, 0.15, 0.1})];
    r.n_stage = TabularSchema::n_values()[detail::categorical(
        tab_rng, label ? std::vector<double>{0.15, 0.25, 0.35, 0.25}
                       : std::vector<double>{0.5, 0.3, 0.12, 0.08})];
    r.m_stage = TabularSchema::m_values()[detail::categorical(
        tab_rng, label ? std::vector<double>{0.55, 0.45} : std::vector<double>{0.88, 0.12})];
    r.smoking = TabularSchema::smoking_values()[detail::categorical(
        tab_rng, label ? std::vector<double>{0.12, 0.33, 0.55}
                       : std::vector<double>{0.45, 0.35, 0.2})];
    return r;
  };

  // Per-class split assignment, then interleaved sample emission.
  auto assign_splits = [&](std::size_t n, double val_frac, double test_frac) {
    auto [val, test] = detail::split_counts(n, val_frac, test_frac);
    std::vector<Split> s(n, Split::train);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    split_rng.shuffle(order);
    for (std::size_t i = 0; i < val; ++i) s[order[i]] = Split::val;
    for (std::size_t i = 0; i < test; ++i) s[order[val + i]] = Split::test;
    return s;
  };
  std::vector<Split> majority_splits = assign_splits(cfg.n_majority, 25.0 / 251.0, 28.0 / 251.0);
  std::vector<Split> minority_splits = assign_splits(cfg.n_minority, 12.0 / 61.0, 15.0 / 61.0);

  char id_buf[32];
  std::size_t maj_emitted = 0, min_emitted = 0;
  for (std::size_t i = 0; i < total; ++i) {
    int label = (i % 2 == 1 && min_emitted < cfg.n_minority) || maj_emitted >= cfg.n_majority ? 1 : 0;
    std::snprintf(id_buf, sizeof(id_buf), "case_%04zu", i);
    ds.ids.emplace_back(id_buf);
    ds.labels.push_back(label);
    ds.volumes.push_back(gen_volume(label));
    ds.tabular.push_back(gen_row(label));
    ds.splits.push_back(label ? minority_splits[min_emitted++] : majority_splits[maj_emitted++]);
  }
  return ds;
}

// ----------------------------------------------------------------------------
// Dataset persistence: MMF1 volumes + tabular CSV + JSON manifest.
// ----------------------------------------------------------------------------

inline std::string tabular_csv(const Dataset& ds) {
  std::ostringstream os;
  os << "id";
  for (const auto& c : TabularSchema::column_names()) os << ',' << c;
  os << ",label\n";
  char num[32];
  for (std::size_t i = 0; i < ds.tabular.size(); ++i) {
    const TabularRow& r = ds.tabular[i];
    os << ds.ids[i] << ',' << r.gender << ',';
    std::snprintf(num, sizeof(num), "%.17g", r.age);
    os << num << ',';
    std::snprintf(num, sizeof(num), "%.17g", r.weight);
    os << num << ',' << r.t_stage << ',' << r.n_stage << ',' << r.m_stage << ',' << r.smoking
       << ',' << ds.labels[i] << '\n';
  }
  return os.str();
}

inline std::string dataset_hash(const Dataset& ds) {
  Sha1 h;
  std::string csv = tabular_csv(ds);
  h.update(csv);
  for (std::size_t i = 0; i < ds.volumes.size(); ++i) {
    h.update(ds.ids[i]);
    h.update(split_name(ds.splits[i]), std::strlen(split_name(ds.splits[i])));
    const auto& data = ds.volumes[i].data();
    h.update(data.data(), data.size() * sizeof(double));
  }
  return h.hex_digest();
}

inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "volumes");
  nlohmann::json manifest;
  manifest["geometry"] = {{"depth", ds.depth}, {"height", ds.height}, {"width", ds.width}};
  manifest["tabular_csv"] = "tabular.csv";
  nlohmann::json samples = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.volumes.size(); ++i) {
    std::string file = "volumes/" + ds.ids[i] + ".mmf1";
    save_tensor((dir / file).string(), ds.volumes[i]);
    samples.push_back({{"id", ds.ids[i]},
                       {"volume", file},
                       {"label", ds.labels[i]},
                       {"split", split_name(ds.splits[i])}});
  }
  manifest["samples"] = samples;

  std::ofstream csv(dir / "tabular.csv");
  csv << tabular_csv(ds);
  std::ofstream mf(dir / "manifest.json");
  mf << manifest.dump(2) << '\n';
  if (!csv || !mf) throw DataError("dataset: failed to write " + dir.string());
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

// Parses the tabular CSV; header must name the schema attributes.
inline std::map<std::string, TabularRow> read_tabular_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("tabular: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("tabular: empty file " + path.string());
  std::vector<std::string> header = detail::split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const auto& name : TabularSchema::column_names()) {
    if (!col.count(name)) throw DataError("tabular: missing column '" + name + "'");
  }
  if (!col.count("id")) throw DataError("tabular: missing column 'id'");

  std::map<std::string, TabularRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f = detail::split_csv_line(line);
    if (f.size() < header.size()) throw DataError("tabular: short row in " + path.string());
    TabularRow r;
    r.gender = f[col["gender"]];
    r.age = std::stod(f[col["age"]]);
    r.weight = std::stod(f[col["weight"]]);
    r.t_stage = f[col["t_stage"]];
    r.n_stage = f[col["n_stage"]];
    r.m_stage = f[col["m_stage"]];
    r.smoking = f[col["smoking_history"]];
    rows[f[col["id"]]] = r;
  }
  return rows;
}

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest_path);
  if (!in) throw DataError("dataset: cannot open " + manifest_path.string());
  nlohmann::json manifest = nlohmann::json::parse(in);
  fs::path dir = manifest_path.parent_path();

  Dataset ds;
  ds.depth = manifest.at("geometry").at("depth").get<std::size_t>();
  ds.height = manifest.at("geometry").at("height").get<std::size_t>();
  ds.width = manifest.at("geometry").at("width").get<std::size_t>();

  auto rows = read_tabular_csv(dir / manifest.at("tabular_csv").get<std::string>());
  for (const auto& s : manifest.at("samples")) {
    std::string id = s.at("id").get<std::string>();
    ds.ids.push_back(id);
    ds.volumes.push_back(load_tensor((dir / s.at("volume").get<std::string>()).string()));
    ds.labels.push_back(s.at("label").get<int>());
    std::string split = s.at("split").get<std::string>();
    ds.splits.push_back(split == "train" ? Split::train : split == "val" ? Split::val : Split::test);
    auto it = rows.find(id);
    if (it == rows.end()) throw DataError("dataset: no tabular row for id '" + id + "'");
    ds.tabular.push_back(it->second);
  }
  return ds;
}

}  // namespace mmfuse
