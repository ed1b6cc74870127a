#pragma once

// Optimization recipe at toy scale: warmup + cosine learning rate, AdamW with
// decoupled decay, global-norm clipping, mixup/cutmix, KL distillation and
// the linear token-drop schedule.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "jumbo/data.hpp"
#include "jumbo/model.hpp"
#include "jumbo/ops.hpp"
#include "jumbo/vit.hpp"

namespace jumbo {

struct TrainPlan {
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  double peak_lr = 1e-3;
  double final_lr = 1e-5;
  double warmup_fraction = 0.10;
  double weight_decay = 0.05;
  double clip_grad_norm = 1.0;  // 0 disables clipping
  double mixup_alpha = 0.8;     // 0 disables mixup
  double cutmix_alpha = 1.0;    // 0 disables cutmix
  bool token_drop = false;
  double drop_start = 0.9;
  double drop_end = 0.1;
  std::string distill;          // teacher checkpoint path; empty trains on labels
  double distill_temperature = 1.0;
  bool flip = false;            // random horizontal flips
  std::uint64_t seed = 0;
  std::size_t eval_interval = 100;
  double stop_at_accuracy = 0;  // stop after an eval reaching this; 0 never stops

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train plan: " + m); };
    if (batch_size == 0) fail("batch_size must be >= 1");
    if (!(warmup_fraction >= 0 && warmup_fraction < 1)) fail("warmup_fraction must be in [0, 1)");
    if (!(final_lr > 0 && peak_lr > final_lr)) fail("need peak_lr > final_lr > 0");
    if (!(drop_end >= 0 && drop_end <= drop_start && drop_start < 1)) fail("need 0 <= drop_end <= drop_start < 1");
    if (weight_decay < 0 || clip_grad_norm < 0 || mixup_alpha < 0 || cutmix_alpha < 0) fail("negative coefficient");
    if (!(distill_temperature > 0)) fail("distill_temperature must be > 0");
    if (eval_interval == 0) fail("eval_interval must be >= 1");
  }
};

namespace detail {

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double d = 0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (v.empty() || pos != v.size()) throw ConfigError("'" + key + "': expected a number, got '" + v + "'");
  return d;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long u = 0;
  try {
    u = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (v.empty() || pos != v.size() || v[0] == '-') throw ConfigError("'" + key + "': expected a non-negative integer, got '" + v + "'");
  return u;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + key + "': expected true/false, got '" + v + "'");
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// Returns false for keys that are not plan fields.
inline bool set_plan_field(TrainPlan& p, const std::string& key, const std::string& v) {
  using namespace detail;
  if (key == "steps") p.steps = parse_uint(key, v);
  else if (key == "batch_size") p.batch_size = parse_uint(key, v);
  else if (key == "peak_lr") p.peak_lr = parse_double(key, v);
  else if (key == "final_lr") p.final_lr = parse_double(key, v);
  else if (key == "warmup_fraction") p.warmup_fraction = parse_double(key, v);
  else if (key == "weight_decay") p.weight_decay = parse_double(key, v);
  else if (key == "clip_grad_norm") p.clip_grad_norm = parse_double(key, v);
  else if (key == "mixup_alpha") p.mixup_alpha = parse_double(key, v);
  else if (key == "cutmix_alpha") p.cutmix_alpha = parse_double(key, v);
  else if (key == "token_drop") p.token_drop = parse_bool(key, v);
  else if (key == "drop_start") p.drop_start = parse_double(key, v);
  else if (key == "drop_end") p.drop_end = parse_double(key, v);
  else if (key == "distill") p.distill = v;
  else if (key == "distill_temperature") p.distill_temperature = parse_double(key, v);
  else if (key == "flip") p.flip = parse_bool(key, v);
  else if (key == "seed") p.seed = parse_uint(key, v);
  else if (key == "eval_interval") p.eval_interval = parse_uint(key, v);
  else if (key == "stop_at_accuracy") p.stop_at_accuracy = parse_double(key, v);
  else return false;
  return true;
}

inline std::vector<std::pair<std::string, std::string>> plan_fields(const TrainPlan& p) {
  using detail::format_double;
  return {{"steps", std::to_string(p.steps)},
          {"batch_size", std::to_string(p.batch_size)},
          {"peak_lr", format_double(p.peak_lr)},
          {"final_lr", format_double(p.final_lr)},
          {"warmup_fraction", format_double(p.warmup_fraction)},
          {"weight_decay", format_double(p.weight_decay)},
          {"clip_grad_norm", format_double(p.clip_grad_norm)},
          {"mixup_alpha", format_double(p.mixup_alpha)},
          {"cutmix_alpha", format_double(p.cutmix_alpha)},
          {"token_drop", p.token_drop ? "true" : "false"},
          {"drop_start", format_double(p.drop_start)},
          {"drop_end", format_double(p.drop_end)},
          {"distill", p.distill},
          {"distill_temperature", format_double(p.distill_temperature)},
          {"flip", p.flip ? "true" : "false"},
          {"seed", std::to_string(p.seed)},
          {"eval_interval", std::to_string(p.eval_interval)},
          {"stop_at_accuracy", format_double(p.stop_at_accuracy)}};
}

// Flat key=value lines; '#' starts a comment line. Unknown keys are errors.
inline std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text, const std::string& source) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key=value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

inline TrainPlan parse_plan(const std::string& text) {
  TrainPlan p;
  for (const auto& [k, v] : parse_key_values(text, "plan")) {
    if (!set_plan_field(p, k, v)) throw ConfigError("plan: unknown key '" + k + "'");
  }
  p.validate();
  return p;
}

inline std::string plan_to_text(const TrainPlan& p) {
  std::string s;
  for (const auto& [k, v] : plan_fields(p)) s += k + "=" + v + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// Schedules

// Linear warmup from 0 to peak over warmup_fraction * steps, then cosine
// decay to final_lr at step == steps.
inline double lr_at(double step, const TrainPlan& p) {
  const double total = static_cast<double>(p.steps);
  const double warm = p.warmup_fraction * total;
  if (step <= 0 && warm > 0) return 0.0;
  if (step >= total) return p.final_lr;
  if (warm > 0 && step <= warm) return p.peak_lr * (step / warm);
  const double progress = (step - warm) / (total - warm);
  return p.final_lr + (p.peak_lr - p.final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// Linear in progress; the endpoints are returned without arithmetic error.
inline double drop_rate_at(double progress, const TrainPlan& p) {
  if (progress <= 0) return p.drop_start;
  if (progress >= 1) return p.drop_end;
  return (1.0 - progress) * p.drop_start + progress * p.drop_end;
}

// k = max(1, round((1 - rate) * n)) distinct indices, ascending.
inline std::vector<std::size_t> sample_kept_tokens(std::size_t n, double rate, Rng& rng) {
  if (!(rate >= 0 && rate < 1)) throw ContractError("sample_kept_tokens: rate must be in [0, 1)");
  if (n == 0) throw ContractError("sample_kept_tokens: no tokens");
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround((1.0 - rate) * static_cast<double>(n))));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// ---------------------------------------------------------------------------
// Optimizer

template <class T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
struct OptimizerState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m, v;
};

template <class T>
double grad_norm(const ParamList<T>& params) {
  double s = 0;
  for (const auto& [name, t] : params)
    for (T g : t.grad()) s += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(s);
}

// Scales every gradient by max_norm / (norm + 1e-6) when the global norm
// exceeds max_norm. Returns the norm before clipping.
template <class T>
double clip_grad_norm(const ParamList<T>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (max_norm > 0 && norm > max_norm) {
    const T coef = static_cast<T>(max_norm / (norm + 1e-6));
    for (const auto& [name, t] : params)
      for (auto& g : t.mutable_grad()) g *= coef;
  }
  return norm;
}

// Decoupled weight decay (matrices only) followed by the bias-corrected Adam
// update. Gradients are checked before any weight changes, so a failure
// leaves the model untouched.
template <class T>
void adamw_step(const ParamList<T>& params, OptimizerState<T>& st, double lr, double weight_decay) {
  for (const auto& [name, t] : params) {
    for (T g : t.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("adamw_step: non-finite gradient in '" + name + "'");
    }
  }
  if (st.m.empty()) {
    for (const auto& [name, t] : params) {
      st.m.emplace_back(t.numel(), T(0));
      st.v.emplace_back(t.numel(), T(0));
    }
  }
  if (st.m.size() != params.size()) throw ContractError("adamw_step: optimizer state does not match the parameter list");
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto t = params[p].second;
    auto w = t.mutable_values();
    auto g = t.grad();
    auto& m = st.m[p];
    auto& v = st.v[p];
    if (m.size() != w.size()) throw ContractError("adamw_step: moment shape mismatch for '" + params[p].first + "'");
    const bool decay = t.rank() >= 2 && weight_decay > 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      double wi = w[i];
      if (decay) wi -= lr * weight_decay * wi;
      const double gi = g[i];
      const double mi = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
      const double vi = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      wi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + st.eps);
      w[i] = static_cast<T>(wi);
    }
  }
}

// ---------------------------------------------------------------------------
// Augmentation and losses

template <class T>
struct MixedBatch {
  Tensor<T> images;
  std::vector<int> labels_a, labels_b;
  double lambda = 1.0;          // weight of labels_a
  double sampled_lambda = 1.0;  // Beta draw before cutmix box rounding
  enum class Kind { none, mixup, cutmix } kind = Kind::none;
};

// Partner of sample i is sample B-1-i. One of mixup/cutmix is picked per batch
// with equal probability when both are enabled.
template <class T>
MixedBatch<T> mix_batch(const Tensor<T>& images, const std::vector<int>& labels, double mixup_alpha, double cutmix_alpha, Rng& rng) {
  if (images.rank() != 4 || images.dim(0) != labels.size()) throw ShapeError("mix_batch: expected [B,Y,X,C] images with B labels");
  const std::size_t b = images.dim(0), ny = images.dim(1), nx = images.dim(2), ch = images.dim(3);
  MixedBatch<T> out;
  out.labels_a = labels;
  out.labels_b.assign(labels.rbegin(), labels.rend());
  const bool mixup = mixup_alpha > 0, cutmix = cutmix_alpha > 0;
  if (b < 2 || (!mixup && !cutmix)) {
    out.images = images.detach();
    out.labels_b = labels;
    return out;
  }
  const bool use_cutmix = cutmix && (!mixup || rng.uniform() < 0.5);
  const std::size_t n = ny * nx * ch;
  auto src = images.values();
  std::vector<T> dst(src.begin(), src.end());
  if (!use_cutmix) {
    const double lam = rng.beta(mixup_alpha, mixup_alpha);
    for (std::size_t s = 0; s < b; ++s) {
      const std::size_t o = b - 1 - s;
      for (std::size_t i = 0; i < n; ++i) dst[s * n + i] = static_cast<T>(lam * src[s * n + i] + (1.0 - lam) * src[o * n + i]);
    }
    out.lambda = out.sampled_lambda = lam;
    out.kind = MixedBatch<T>::Kind::mixup;
  } else {
    const double lam = rng.beta(cutmix_alpha, cutmix_alpha);
    const double side = std::sqrt(1.0 - lam);
    const auto h = static_cast<std::size_t>(std::llround(side * static_cast<double>(ny)));
    const auto w = static_cast<std::size_t>(std::llround(side * static_cast<double>(nx)));
    const std::size_t y0 = rng.below(ny - h + 1), x0 = rng.below(nx - w + 1);
    for (std::size_t s = 0; s < b; ++s) {
      const std::size_t o = b - 1 - s;
      for (std::size_t y = y0; y < y0 + h; ++y)
        for (std::size_t x = x0; x < x0 + w; ++x)
          for (std::size_t c = 0; c < ch; ++c) dst[s * n + (y * nx + x) * ch + c] = src[o * n + (y * nx + x) * ch + c];
    }
    out.sampled_lambda = lam;
    out.lambda = 1.0 - static_cast<double>(h * w) / static_cast<double>(ny * nx);
    out.kind = MixedBatch<T>::Kind::cutmix;
  }
  out.images = Tensor<T>(images.shape(), std::move(dst));
  return out;
}

// lambda * CE(labels_a) + (1 - lambda) * CE(labels_b).
template <class T>
Tensor<T> mixed_cross_entropy(Tape<T>& tp, const Tensor<T>& logits, const MixedBatch<T>& mb) {
  auto a = ops::cross_entropy(tp, logits, std::span<const int>(mb.labels_a));
  if (mb.lambda == 1.0) return a;
  auto b = ops::cross_entropy(tp, logits, std::span<const int>(mb.labels_b));
  return ops::add(tp, ops::scale(tp, a, static_cast<T>(mb.lambda)), ops::scale(tp, b, static_cast<T>(1.0 - mb.lambda)));
}

// KL(softmax(teacher / t) || softmax(student / t)), mean over the batch.
template <class T>
Tensor<T> distill_loss(Tape<T>& tp, const Tensor<T>& student_logits, const Tensor<T>& teacher_logits, double temperature = 1.0) {
  if (student_logits.shape() != teacher_logits.shape()) throw ShapeError("distill_loss: student and teacher logits differ in shape");
  const T inv = static_cast<T>(1.0 / temperature);
  auto teacher = teacher_logits.detach();
  auto pt = ops::log_softmax(tp, ops::scale(tp, teacher, inv));
  auto ps = ops::log_softmax(tp, ops::scale(tp, student_logits, inv));
  return ops::kl_div(tp, pt, ps);
}

// ---------------------------------------------------------------------------
// Loop

struct MetricsRow {
  std::size_t step;
  double lr, drop_rate, train_loss, eval_acc;
};

inline std::string metrics_header() { return "step,lr,drop_rate,train_loss,eval_acc\n"; }

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.6g,%.9g,%.6f\n", r.step, r.lr, r.drop_rate, r.train_loss, r.eval_acc);
  return buf;
}

struct TrainResult {
  std::vector<MetricsRow> rows;
  std::size_t steps_done = 0;
  double final_eval_acc = 0;
  bool aborted = false;
  std::string diagnostic;
};

// Generic optimizer loop. step_loss builds the loss for one step on tp;
// evaluate returns the accuracy reported in metrics rows. On a numeric
// failure the loop stops with the weights from the last completed step.
template <class T>
TrainResult optimize(const ParamList<T>& params, const TrainPlan& plan,
                     const std::function<Tensor<T>(Tape<T>&, std::size_t step)>& step_loss,
                     const std::function<double()>& evaluate, const std::function<double(std::size_t)>& drop_rate_for_step,
                     std::ostream* metrics = nullptr) {
  plan.validate();
  TrainResult res;
  if (metrics) *metrics << metrics_header();
  OptimizerState<T> st;
  double loss_sum = 0;
  std::size_t loss_count = 0;
  auto emit = [&](std::size_t step, double lr) {
    MetricsRow row{step, lr, drop_rate_for_step(step == 0 ? 0 : step - 1), loss_count ? loss_sum / loss_count : 0.0, evaluate()};
    res.rows.push_back(row);
    res.final_eval_acc = row.eval_acc;
    if (metrics) *metrics << format_metrics_row(row) << std::flush;
    loss_sum = 0;
    loss_count = 0;
  };
  for (std::size_t s = 0; s < plan.steps; ++s) {
    const double lr = lr_at(static_cast<double>(s + 1), plan);
    try {
      for (const auto& p : params) {
        auto g = p.second.mutable_grad();
        std::fill(g.begin(), g.end(), T(0));
      }
      Tape<T> tp;
      auto loss = step_loss(tp, s);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) throw NumericError("non-finite loss at step " + std::to_string(s + 1));
      tp.backward(loss);
      clip_grad_norm(params, plan.clip_grad_norm);
      adamw_step(params, st, lr, plan.weight_decay);
      loss_sum += lv;
      ++loss_count;
    } catch (const NumericError& e) {
      res.aborted = true;
      res.diagnostic = std::string("step ") + std::to_string(s + 1) + ": " + e.what();
      return res;
    }
    res.steps_done = s + 1;
    if ((s + 1) % plan.eval_interval == 0 || s + 1 == plan.steps) {
      emit(s + 1, lr);
      if (plan.stop_at_accuracy > 0 && res.final_eval_acc >= plan.stop_at_accuracy) break;
    }
  }
  return res;
}

template <class T>
double accuracy(const Model<T>& m, const ImageDataset& d, std::size_t chunk = 256) {
  if (d.size() == 0) return 0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < d.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(d.size(), start + chunk); ++i) idx.push_back(i);
    auto tp = Tape<T>::no_grad();
    auto logits = forward(tp, m, d.batch<T>(idx));
    const std::size_t c = logits.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto row = logits.values().subspan(r * c, c);
      const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += pred == d.labels[idx[r]];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

// Seeded epoch order; batches run across epoch boundaries.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, Rng& rng) : order_(n), rng_(rng) {
    if (n == 0) throw DataError("training set is empty");
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    rng_.shuffle(order_);
    pos_ = 0;
  }
  std::vector<std::size_t> order_;
  Rng& rng_;
  std::size_t pos_ = 0;
};

template <class T>
void flip_horizontal(Tensor<T>& images, Rng& rng) {
  const std::size_t b = images.dim(0), ny = images.dim(1), nx = images.dim(2), ch = images.dim(3);
  auto v = images.mutable_values();
  for (std::size_t s = 0; s < b; ++s) {
    if (rng.uniform() >= 0.5) continue;
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx / 2; ++x)
        for (std::size_t c = 0; c < ch; ++c) std::swap(v[((s * ny + y) * nx + x) * ch + c], v[((s * ny + y) * nx + nx - 1 - x) * ch + c]);
  }
}

// Image classification training. With a teacher the loss is KL to the
// teacher's logits on the same augmented images (teacher sees every token).
template <class T>
TrainResult train(Model<T>& model, const ImageDataset& train_set, const ImageDataset* eval_set, const TrainPlan& plan,
                  std::ostream* metrics = nullptr, const Model<T>* teacher = nullptr) {
  plan.validate();
  const auto& c = model.config();
  if (train_set.height != c.image_y || train_set.width != c.image_x || train_set.channels != c.in_channels) {
    throw DataError("train: dataset images do not match the model geometry");
  }
  if (train_set.num_classes > c.num_classes) throw DataError("train: dataset has more classes than the model head");
  Rng rng(plan.seed);
  BatchSampler sampler(train_set.size(), rng);
  const std::size_t n = c.num_patches();
  auto drop_for = [&](std::size_t s) {
    if (!plan.token_drop) return 0.0;
    const double progress = plan.steps > 1 ? static_cast<double>(s) / static_cast<double>(plan.steps - 1) : 1.0;
    return drop_rate_at(progress, plan);
  };
  auto step_loss = [&](Tape<T>& tp, std::size_t s) {
    const auto idx = sampler.next(plan.batch_size);
    auto images = train_set.batch<T>(idx);
    if (plan.flip) flip_horizontal(images, rng);
    std::vector<int> labels;
    for (auto i : idx) labels.push_back(train_set.labels[i]);
    const auto mb = mix_batch(images, labels, plan.mixup_alpha, plan.cutmix_alpha, rng);
    Tensor<T> logits;
    if (plan.token_drop) {
      const double rate = drop_for(s);
      KeepSets keep;
      for (std::size_t b = 0; b < idx.size(); ++b) keep.push_back(sample_kept_tokens(n, rate, rng));
      logits = forward_with_drop(tp, model, mb.images, keep);
    } else {
      logits = forward(tp, model, mb.images);
    }
    if (teacher) {
      auto ntp = Tape<T>::no_grad();
      auto target = forward(ntp, *teacher, mb.images);
      return distill_loss(tp, logits, target, plan.distill_temperature);
    }
    return mixed_cross_entropy(tp, logits, mb);
  };
  const ImageDataset& ev = eval_set ? *eval_set : train_set;
  return optimize<T>(model.parameters(), plan, step_loss, [&] { return accuracy(model, ev); }, drop_for, metrics);
}

}  // namespace jumbo
