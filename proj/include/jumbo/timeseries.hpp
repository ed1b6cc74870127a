#pragma once
// Patch-based time-series classification on the shared backbone. Each
// channel is patched and encoded independently; the per-channel global
// representations are concatenated and projected to class logits.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "jumbo/cost_model.hpp"
#include "jumbo/data.hpp"
#include "jumbo/training.hpp"
#include "jumbo/vit.hpp"

namespace jumbo::ts {

// ---------------------------------------------------------------------------
// Patch geometry

struct SeriesPatchConfig {
  std::size_t num_patches = 8;
  std::size_t series_length = 0;
  std::size_t patch_length = 0;
  std::size_t stride = 0;
  std::size_t padding = 0;

  std::size_t padded_length() const { return series_length + padding; }

  std::string describe() const {
    return "L=" + std::to_string(series_length) + " P=" + std::to_string(num_patches) + " patch_length=" +
           std::to_string(patch_length) + " stride=" + std::to_string(stride) + " padding=" + std::to_string(padding);
  }

  void validate() const {
    auto fail = [&](const std::string& m) { throw ConfigError("series patches: " + m + " (" + describe() + ")"); };
    if (series_length < 2) fail("series length must be >= 2");
    if (num_patches < 1) fail("need at least one patch");
    if (patch_length < 2 || patch_length % 2 != 0) fail("patch length must be even and >= 2");
    if (stride != patch_length / 2) fail("stride must be half the patch length");
    if (padding >= patch_length) fail("padding must be smaller than the patch length");
    if ((num_patches - 1) * stride + patch_length != padded_length()) fail("windows do not cover the padded series exactly");
  }

  // Smallest even patch length whose windows cover L; the rest is end padding.
  static SeriesPatchConfig resolve(std::size_t length, std::size_t patches) {
    SeriesPatchConfig g;
    g.series_length = length;
    g.num_patches = patches;
    if (length < 2 || patches < 1) {
      g.validate();  // throws with the geometry
    }
    g.stride = (length + patches) / (patches + 1);  // ceil(L / (P + 1))
    g.patch_length = 2 * g.stride;
    g.padding = (patches + 1) * g.stride - length;
    g.validate();
    return g;
  }
};

// One channel [L] -> rows [P, patch_length], row i starting at i * stride.
template <class T>
std::vector<T> patch_series(std::span<const T> series, const SeriesPatchConfig& g) {
  g.validate();
  if (series.size() != g.series_length) {
    throw ShapeError("patch_series: series of length " + std::to_string(series.size()) + " for " + g.describe());
  }
  std::vector<T> out(g.num_patches * g.patch_length, T(0));
  for (std::size_t i = 0; i < g.num_patches; ++i) {
    for (std::size_t k = 0; k < g.patch_length; ++k) {
      const std::size_t t = i * g.stride + k;
      if (t < g.series_length) out[i * g.patch_length + k] = series[t];
    }
  }
  return out;
}

// Zero mean, unit variance over time; eps guards constant channels.
template <class T>
std::vector<T> instance_normalize(std::span<const T> series, double eps = 1e-5) {
  double mean = 0;
  for (T v : series) mean += static_cast<double>(v);
  mean /= static_cast<double>(series.size());
  double var = 0;
  for (T v : series) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
  var /= static_cast<double>(series.size());
  const double inv = 1.0 / std::sqrt(var + eps);
  std::vector<T> out(series.size());
  for (std::size_t i = 0; i < series.size(); ++i) out[i] = static_cast<T>((static_cast<double>(series[i]) - mean) * inv);
  return out;
}

// ---------------------------------------------------------------------------
// Model

enum class Arch { patchtst, registers, jumbo };

inline std::string arch_name(Arch a) {
  switch (a) {
    case Arch::patchtst: return "patchtst";
    case Arch::registers: return "registers";
    case Arch::jumbo: return "jumbo";
  }
  return "?";
}

inline Arch parse_arch(const std::string& s) {
  if (s == "patchtst") return Arch::patchtst;
  if (s == "registers") return Arch::registers;
  if (s == "jumbo") return Arch::jumbo;
  throw ConfigError("unknown time-series architecture '" + s + "' (patchtst, registers, jumbo)");
}

struct TSModelConfig {
  Arch arch = Arch::jumbo;
  std::size_t series_length = 0, channels = 1, num_classes = 2;
  std::size_t num_patches = 8;
  std::size_t width = 128, heads = 16, depth = 3;
  std::size_t ffn_multiplier = 2;
  std::size_t jumbo_multiplier = 4;
  std::size_t jumbo_ffn_multiplier = 2;
  double dropout = 0.0;

  // Register count that matches the Jumbo per-layer cost at (P, D, J).
  std::size_t matched_registers() const {
    return static_cast<std::size_t>(cost::match_registers(num_patches, width, jumbo_multiplier).rounded);
  }

  ModelConfig backbone() const {
    if (channels < 1) throw ConfigError("time series: need at least one channel");
    if (num_classes < 1) throw ConfigError("time series: need at least one class");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("time series: dropout must be in [0, 1)");
    const auto g = SeriesPatchConfig::resolve(series_length, num_patches);
    ModelConfig c;
    c.variant = arch == Arch::jumbo ? Variant::jumbo : arch == Arch::registers ? Variant::registers : Variant::plain;
    c.depth = depth;
    c.width = width;
    c.heads = heads;
    c.patch_ffn_multiplier = ffn_multiplier;
    c.jumbo_multiplier = arch == Arch::jumbo ? jumbo_multiplier : 0;
    c.jumbo_ffn_multiplier = jumbo_ffn_multiplier;
    c.register_count = arch == Arch::registers ? matched_registers() : 0;
    c.discard_last_patch_ffn = arch == Arch::jumbo;
    c.num_classes = 0;
    c.token_count = g.num_patches;
    c.token_dim = g.patch_length;
    c.validate();
    return c;
  }
};

// [N, J*D] -> [N, D], the mean of the J width-D segments.
template <class T>
Tensor<T> pool_jumbo(Tape<T>& tp, const Tensor<T>& jumbo, std::size_t width) {
  if (jumbo.rank() != 2 || width == 0 || jumbo.dim(1) % width != 0) {
    throw ContractError("pool_jumbo: width " + (jumbo.rank() == 2 ? std::to_string(jumbo.dim(1)) : to_string(jumbo.shape())) +
                        " is not a multiple of " + std::to_string(width));
  }
  const std::size_t j = jumbo.dim(1) / width;
  return ops::mean(tp, ops::reshape(tp, jumbo, {jumbo.dim(0), j, width}), 1);
}

template <class T>
struct TSModel {
  TSModelConfig config;
  SeriesPatchConfig geometry;
  Model<T> backbone;
  LinearParams<T> head;  // [C, M*D]

  static TSModel init(const TSModelConfig& cfg, std::uint64_t seed) {
    TSModel m{cfg, SeriesPatchConfig::resolve(cfg.series_length, cfg.num_patches), Model<T>::init(cfg.backbone(), seed), {}};
    Rng rng(seed ^ fnv1a("ts_head"));
    m.head.weight = Tensor<T>({cfg.num_classes, cfg.channels * cfg.width}, true);
    for (auto& v : m.head.weight.mutable_values()) v = static_cast<T>(rng.trunc_normal(0.02));
    m.head.bias = Tensor<T>({cfg.num_classes}, true);
    return m;
  }

  ParamList<T> parameters() const {
    ParamList<T> ps = backbone.parameters();
    ps.emplace_back("ts_head.weight", head.weight);
    ps.emplace_back("ts_head.bias", head.bias);
    return ps;
  }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.second.numel();
    return n;
  }
};

// Series [B, M, L] -> normalized patch rows [B*M, P, patch_length].
template <class T>
Tensor<T> series_patches(const Tensor<T>& series, const SeriesPatchConfig& g) {
  if (series.rank() != 3) throw ShapeError("series_patches: expected [B, M, L], got " + to_string(series.shape()));
  const std::size_t b = series.dim(0), m = series.dim(1), l = series.dim(2);
  Tensor<T> out({b * m, g.num_patches, g.patch_length});
  auto ov = out.mutable_values();
  const std::size_t row = g.num_patches * g.patch_length;
  for (std::size_t s = 0; s < b * m; ++s) {
    const auto norm = instance_normalize<T>(series.values().subspan(s * l, l));
    const auto p = patch_series<T>(norm, g);
    std::copy(p.begin(), p.end(), ov.begin() + static_cast<std::ptrdiff_t>(s * row));
  }
  return out;
}

// Per-channel global representation [B*M, D]: the class row for the plain and
// registers backbones, the pooled Jumbo token otherwise.
template <class T>
Tensor<T> channel_representations(Tape<T>& tp, const TSModel<T>& m, const Tensor<T>& series, const ForwardOptions& o = {}) {
  auto tokens = embed(tp, m.backbone, series_patches(series, m.geometry));
  auto g = encode(tp, m.backbone, tokens, o);
  return m.config.arch == Arch::jumbo ? pool_jumbo(tp, g, m.config.width) : g;
}

template <class T>
Tensor<T> forward_multichannel(Tape<T>& tp, const TSModel<T>& m, const Tensor<T>& series, const ForwardOptions& o = {}) {
  if (series.rank() != 3 || series.dim(1) != m.config.channels) {
    throw ContractError("forward_multichannel: series " + to_string(series.shape()) + " but the head expects " +
                        std::to_string(m.config.channels) + " channels");
  }
  auto reps = channel_representations(tp, m, series, o);
  auto flat = ops::reshape(tp, reps, {series.dim(0), m.config.channels * m.config.width});
  return ops::linear(tp, flat, m.head.weight, m.head.bias);
}

// ---------------------------------------------------------------------------
// Training

template <class T>
Tensor<T> series_batch(const SeriesDataset& d, std::span<const std::size_t> idx) {
  Tensor<T> out({idx.size(), d.channels, d.length});
  auto v = out.mutable_values();
  const std::size_t n = d.record_size();
  for (std::size_t b = 0; b < idx.size(); ++b)
    for (std::size_t k = 0; k < n; ++k) v[b * n + k] = static_cast<T>(d.values[idx[b] * n + k]);
  return out;
}

template <class T>
double accuracy(const TSModel<T>& m, const SeriesDataset& d, std::size_t chunk = 128) {
  if (d.size() == 0) return 0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < d.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(d.size(), start + chunk); ++i) idx.push_back(i);
    auto tp = Tape<T>::no_grad();
    auto logits = forward_multichannel(tp, m, series_batch<T>(d, idx));
    const std::size_t c = logits.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto row = logits.values().subspan(r * c, c);
      correct += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == d.labels[idx[r]];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

struct TSTrainPlan {
  std::size_t epochs = 100;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  double final_lr = 1e-8;
  double warmup_fraction = 0.1;
  double weight_decay = 0.02;
  double clip_grad_norm = 1.0;
  std::size_t eval_interval = 0;  // 0: once per epoch
  double stop_at_accuracy = 0;
  std::uint64_t seed = 0;

  std::size_t steps_per_epoch(std::size_t n) const { return std::max<std::size_t>(1, (n + batch_size - 1) / batch_size); }

  TrainPlan to_plan(std::size_t train_size) const {
    TrainPlan p;
    p.steps = epochs * steps_per_epoch(train_size);
    p.batch_size = std::min(batch_size, train_size);
    p.peak_lr = lr;
    p.final_lr = final_lr;
    p.warmup_fraction = warmup_fraction;
    p.weight_decay = weight_decay;
    p.clip_grad_norm = clip_grad_norm;
    p.mixup_alpha = p.cutmix_alpha = 0;
    p.eval_interval = eval_interval ? eval_interval : steps_per_epoch(train_size);
    p.stop_at_accuracy = stop_at_accuracy;
    p.seed = seed;
    return p;
  }
};

// Metrics rows report accuracy on eval_set (train_set when null).
template <class T>
TrainResult train(TSModel<T>& m, const SeriesDataset& train_set, const SeriesDataset* eval_set, const TSTrainPlan& tsp,
                  std::ostream* metrics = nullptr) {
  if (train_set.channels != m.config.channels || train_set.length != m.config.series_length) {
    throw DataError("ts train: dataset shape (M=" + std::to_string(train_set.channels) + ", L=" + std::to_string(train_set.length) +
                    ") does not match the model");
  }
  if (train_set.num_classes > m.config.num_classes) throw DataError("ts train: dataset has more classes than the model head");
  const auto plan = tsp.to_plan(train_set.size());
  Rng rng(plan.seed);
  BatchSampler sampler(train_set.size(), rng);
  const ForwardOptions train_opts{m.config.dropout, &rng};
  auto step_loss = [&](Tape<T>& tp, std::size_t) {
    const auto idx = sampler.next(plan.batch_size);
    std::vector<int> labels;
    for (auto i : idx) labels.push_back(train_set.labels[i]);
    return ops::cross_entropy(tp, forward_multichannel(tp, m, series_batch<T>(train_set, idx), train_opts), labels);
  };
  const SeriesDataset& ev = eval_set ? *eval_set : train_set;
  return optimize<T>(m.parameters(), plan, step_loss, [&] { return accuracy(m, ev); }, [](std::size_t) { return 0.0; },
                     metrics);
}

// ---------------------------------------------------------------------------
// Datasets and sweeps

struct TSData {
  std::string name;
  SeriesDataset train, val, test;
};

// Uses a "val" split when present; otherwise the held-out "test" split is
// halved into validation and test with split_seed.
inline TSData load_ts_dataset(const fs::path& dir, std::uint64_t split_seed = 0) {
  const auto h = read_series_header(dir);
  auto has = [&](const std::string& s) { return std::find(h.splits.begin(), h.splits.end(), s) != h.splits.end(); };
  if (!has("train") || !has("test")) throw DataError(dir.string() + ": header must list train and test splits");
  TSData d;
  d.name = dir.filename().string();
  if (d.name.empty()) d.name = dir.parent_path().filename().string();
  d.train = load_series_split(dir / "train.tsv", h);
  if (has("val")) {
    d.val = load_series_split(dir / "val.tsv", h);
    d.test = load_series_split(dir / "test.tsv", h);
  } else {
    std::tie(d.val, d.test) = halve_split(load_series_split(dir / "test.tsv", h), split_seed);
  }
  return d;
}

struct SweepGrid {
  std::vector<double> lrs{3e-3, 1e-3, 3e-4, 1e-4};
  std::vector<double> dropouts{0.0, 0.1, 0.2};
};

struct SweepRun {
  std::string dataset, arch;
  double lr = 0, dropout = 0;
  std::optional<double> val_acc, test_acc;  // empty when the run failed
};

inline std::uint64_t run_seed(const std::string& dataset, double lr, double dropout, std::uint64_t base_seed) {
  return fnv1a(dataset + "|" + detail::format_double(lr) + "|" + detail::format_double(dropout) + "|" + std::to_string(base_seed));
}

// Trains every (architecture, lr, dropout) cell on every dataset. A run that
// fails numerically is recorded with empty accuracies and a warning.
template <class T = float>
std::vector<SweepRun> sweep(const std::vector<TSData>& datasets, const std::vector<Arch>& archs, const SweepGrid& grid,
                            const TSModelConfig& base_model, const TSTrainPlan& base_plan, std::uint64_t base_seed,
                            std::ostream* log = nullptr) {
  std::vector<SweepRun> out;
  for (const auto& d : datasets) {
    for (Arch a : archs) {
      for (double lr : grid.lrs) {
        for (double dr : grid.dropouts) {
          SweepRun r{d.name, arch_name(a), lr, dr, std::nullopt, std::nullopt};
          auto cfg = base_model;
          cfg.arch = a;
          cfg.dropout = dr;
          cfg.series_length = d.train.length;
          cfg.channels = d.train.channels;
          cfg.num_classes = d.train.num_classes;
          auto plan = base_plan;
          plan.lr = lr;
          plan.seed = run_seed(d.name, lr, dr, base_seed);
          try {
            auto m = TSModel<T>::init(cfg, plan.seed);
            const auto res = train(m, d.train, &d.val, plan);
            if (res.aborted) throw NumericError(res.diagnostic);
            r.val_acc = accuracy(m, d.val);
            r.test_acc = accuracy(m, d.test);
          } catch (const NumericError& e) {
            if (log) *log << "warning: " << d.name << " " << r.arch << " lr=" << lr << " dropout=" << dr << " failed: " << e.what() << '\n';
          }
          if (log && r.test_acc) {
            *log << d.name << " " << r.arch << " lr=" << lr << " dropout=" << dr << " val=" << *r.val_acc << " test=" << *r.test_acc
                 << '\n';
          }
          out.push_back(std::move(r));
        }
      }
    }
  }
  return out;
}

inline std::string results_header() { return "dataset,arch,lr,dropout,val_acc,test_acc\n"; }

inline void write_results(std::ostream& os, const std::vector<SweepRun>& runs) {
  os << results_header();
  char buf[64];
  for (const auto& r : runs) {
    os << r.dataset << ',' << r.arch << ',' << detail::format_double(r.lr) << ',' << detail::format_double(r.dropout) << ',';
    if (r.val_acc) {
      std::snprintf(buf, sizeof buf, "%.6f,%.6f", *r.val_acc, *r.test_acc);
      os << buf;
    } else {
      os << ',';
    }
    os << '\n';
  }
}

inline std::vector<SweepRun> read_results(std::istream& is, const std::string& source = "results") {
  std::vector<SweepRun> runs;
  std::string line;
  std::size_t lineno = 0;
  auto num = [&](const std::string& s, const std::string& what) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || *end != '\0' || !std::isfinite(v)) {
      throw DataError(source + ":" + std::to_string(lineno) + ": " + what + " '" + s + "' is not a number");
    }
    return v;
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("dataset,", 0) == 0)) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 6) throw DataError(source + ":" + std::to_string(lineno) + ": expected 6 fields, got " + std::to_string(f.size()));
    SweepRun r{f[0], f[1], num(f[2], "lr"), num(f[3], "dropout"), std::nullopt, std::nullopt};
    if (f[4].empty() != f[5].empty()) throw DataError(source + ":" + std::to_string(lineno) + ": val_acc and test_acc must both be set or both empty");
    if (!f[4].empty()) {
      r.val_acc = num(f[4], "val_acc");
      r.test_acc = num(f[5], "test_acc");
    }
    runs.push_back(std::move(r));
  }
  return runs;
}

struct CellSummary {
  std::optional<double> best, avg;  // test accuracy; empty when every run failed
  std::size_t runs = 0, failed = 0;
};

struct SweepSummary {
  std::vector<std::string> datasets, archs;  // first-appearance order
  std::vector<std::vector<CellSummary>> cells;  // [dataset][arch]
};

// Best: test accuracy of the run with the highest validation accuracy (first
// in grid order on ties). Avg: mean test accuracy over successful runs.
inline SweepSummary summarize(const std::vector<SweepRun>& runs, std::ostream* warn = nullptr) {
  SweepSummary s;
  auto index_of = [](std::vector<std::string>& v, const std::string& x) {
    auto it = std::find(v.begin(), v.end(), x);
    if (it != v.end()) return static_cast<std::size_t>(it - v.begin());
    v.push_back(x);
    return v.size() - 1;
  };
  for (const auto& r : runs) {
    index_of(s.datasets, r.dataset);
    index_of(s.archs, r.arch);
  }
  s.cells.assign(s.datasets.size(), std::vector<CellSummary>(s.archs.size()));
  std::vector<std::vector<double>> best_val(s.datasets.size(), std::vector<double>(s.archs.size(), -1.0));
  std::vector<std::vector<double>> sum(s.datasets.size(), std::vector<double>(s.archs.size(), 0.0));
  for (const auto& r : runs) {
    const auto d = index_of(s.datasets, r.dataset), a = index_of(s.archs, r.arch);
    auto& c = s.cells[d][a];
    ++c.runs;
    if (!r.test_acc) {
      ++c.failed;
      continue;
    }
    sum[d][a] += *r.test_acc;
    if (*r.val_acc > best_val[d][a]) {
      best_val[d][a] = *r.val_acc;
      c.best = *r.test_acc;
    }
  }
  for (std::size_t d = 0; d < s.datasets.size(); ++d) {
    for (std::size_t a = 0; a < s.archs.size(); ++a) {
      auto& c = s.cells[d][a];
      if (c.runs > c.failed) c.avg = sum[d][a] / static_cast<double>(c.runs - c.failed);
      if (c.failed && warn) {
        *warn << "warning: " << s.datasets[d] << "/" << s.archs[a] << ": " << c.failed << " of " << c.runs
              << " runs missing, excluded from the average\n";
      }
    }
  }
  return s;
}

// Rows are datasets, columns architectures. Each row is ranked by descending
// accuracy (1 = best, ties share the mean of their ranks); returns the mean
// rank per architecture. Missing cells are rejected unless impute is set, in
// which case they rank below every present cell.
inline std::vector<double> rank_models(const std::vector<std::vector<std::optional<double>>>& acc, bool impute = false) {
  if (acc.empty()) throw ContractError("rank_models: no datasets");
  const std::size_t na = acc.front().size();
  if (na == 0) throw ContractError("rank_models: no architectures");
  std::vector<double> total(na, 0.0);
  for (std::size_t d = 0; d < acc.size(); ++d) {
    const auto& row = acc[d];
    if (row.size() != na) throw ContractError("rank_models: ragged accuracy matrix");
    for (std::size_t a = 0; a < na; ++a) {
      if (!row[a] && !impute) {
        throw DataError("rank_models: missing accuracy for dataset row " + std::to_string(d) + ", architecture column " +
                        std::to_string(a) + " (enable imputation to rank it last)");
      }
    }
    for (std::size_t a = 0; a < na; ++a) {
      // rank = 1 + #strictly better + (#tied others) / 2, missing below all.
      std::size_t better = 0, tied = 0;
      for (std::size_t b = 0; b < na; ++b) {
        if (b == a) continue;
        if (row[a] && row[b]) {
          better += *row[b] > *row[a];
          tied += *row[b] == *row[a];
        } else if (!row[a]) {
          better += row[b].has_value();
          tied += !row[b].has_value();
        }
      }
      total[a] += 1.0 + static_cast<double>(better) + 0.5 * static_cast<double>(tied);
    }
  }
  for (auto& t : total) t /= static_cast<double>(acc.size());
  return total;
}

struct RankTable {
  std::vector<std::string> archs;
  std::vector<double> best, avg;
};

inline RankTable rank_summary(const SweepSummary& s, bool impute = false) {
  std::vector<std::vector<std::optional<double>>> best, avg;
  for (const auto& row : s.cells) {
    best.emplace_back();
    avg.emplace_back();
    for (const auto& c : row) {
      best.back().push_back(c.best);
      avg.back().push_back(c.avg);
    }
  }
  return {s.archs, rank_models(best, impute), rank_models(avg, impute)};
}

inline void write_rank_table(std::ostream& os, const RankTable& t) {
  os << "metric";
  for (const auto& a : t.archs) os << ',' << a;
  os << '\n';
  char buf[32];
  auto row = [&](const char* name, const std::vector<double>& v) {
    os << name;
    for (double x : v) {
      std::snprintf(buf, sizeof buf, ",%.4f", x);
      os << buf;
    }
    os << '\n';
  };
  row("Best", t.best);
  row("Avg", t.avg);
}

}  // namespace jumbo::ts
