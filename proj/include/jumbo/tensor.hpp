#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <new>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "jumbo/errors.hpp"

namespace jumbo {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

// Vectorized kernels peel differently depending on the base address, which
// changes float summation order. A fixed alignment keeps reruns bit-identical.
template <class T>
struct CacheAligned {
  using value_type = T;
  static constexpr std::align_val_t align{64};
  CacheAligned() = default;
  template <class U>
  CacheAligned(const CacheAligned<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), align)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, align); }
  friend bool operator==(const CacheAligned&, const CacheAligned&) { return true; }
};

template <class T>
using Buffer = std::vector<T, CacheAligned<T>>;

template <class T>
struct Storage {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;  // empty unless requires_grad
  bool requires_grad = false;
};

}  // namespace detail

// Dense row-major array. Copies are shallow: two Tensor handles may refer to
// the same storage, which is how tied parameters alias each other.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : s_(std::make_shared<detail::Storage<T>>()) {
    s_->value.assign(jumbo::numel(shape), T(0));
    s_->shape = std::move(shape);
    set_requires_grad(requires_grad);
  }

  Tensor(Shape shape, std::span<const T> values, bool requires_grad = false)
      : s_(std::make_shared<detail::Storage<T>>()) {
    if (values.size() != jumbo::numel(shape)) {
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " + to_string(shape));
    }
    s_->shape = std::move(shape);
    s_->value.assign(values.begin(), values.end());
    set_requires_grad(requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) { return Tensor(std::move(shape), requires_grad); }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.s_->value.begin(), t.s_->value.end(), v);
    return t;
  }

  Tensor(Shape shape, const std::vector<T>& values, bool requires_grad = false)
      : Tensor(std::move(shape), std::span<const T>(values), requires_grad) {}
  Tensor(Shape shape, std::initializer_list<T> values, bool requires_grad = false)
      : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size()), requires_grad) {}

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->value.size(); }

  std::span<const T> values() const { return s_->value; }
  // Raw mutation is reserved for initialization, optimizer updates and loading.
  std::span<T> mutable_values() { return s_->value; }
  T operator[](std::size_t i) const { return s_->value[i]; }

  T item() const {
    if (numel() != 1) throw ContractError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
    return s_->value[0];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }

  void set_requires_grad(bool on) {
    s_->requires_grad = on;
    if (on && s_->grad.size() != s_->value.size()) s_->grad.assign(s_->value.size(), T(0));
    if (!on) s_->grad.clear();
  }

  std::span<const T> grad() const { return s_->grad; }
  // Gradient accumulation is the one mutation permitted through a const handle.
  std::span<T> mutable_grad() const { return s_->grad; }

  void zero_grad() {
    std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }

  // Deep copy without gradient participation.
  Tensor detach() const { return Tensor(shape(), values(), false); }

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

  const std::shared_ptr<detail::Storage<T>>& storage() const { return s_; }

 private:
  std::shared_ptr<detail::Storage<T>> s_;
};

// Records one entry per batched matrix product executed in counting mode.
struct MatmulRecord {
  std::size_t batch, m, k, n;
};

// Counts matrix-product work in multiply-accumulates (MACs); total_flops()
// reports the 1 MAC = 2 FLOPs convention. Only forward products are counted;
// elementwise ops, norms and softmax are not.
class FlopCounter {
 public:
  enum class Mode { off, counting };

  explicit FlopCounter(Mode mode = Mode::counting, bool keep_log = false) : mode_(mode), keep_log_(keep_log) {}

  void add_matmul(std::size_t batch, std::size_t m, std::size_t k, std::size_t n) {
    if (mode_ == Mode::off) return;
    macs_ += static_cast<std::uint64_t>(batch) * m * k * n;
    if (keep_log_) log_.push_back({batch, m, k, n});
  }

  std::uint64_t macs() const { return macs_; }
  std::uint64_t total_flops() const { return 2 * macs_; }
  const std::vector<MatmulRecord>& log() const { return log_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }

  void reset() {
    macs_ = 0;
    log_.clear();
  }

 private:
  Mode mode_;
  bool keep_log_;
  std::uint64_t macs_ = 0;
  std::vector<MatmulRecord> log_;
};

// Ordered record of differentiable operations. Nodes are appended as the
// forward pass executes, so reverse iteration is a valid topological order.
template <class T>
class Tape {
 public:
  Tape() = default;
  explicit Tape(FlopCounter* counter, bool recording = true) : counter_(counter), recording_(recording) {}

  static Tape no_grad(FlopCounter* counter = nullptr) { return Tape(counter, false); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  bool recording() const { return recording_; }
  FlopCounter* counter() const { return counter_; }
  std::size_t size() const { return nodes_.size(); }

  void count_matmul(std::size_t batch, std::size_t m, std::size_t k, std::size_t n) const {
    if (counter_) counter_->add_matmul(batch, m, k, n);
  }

  bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording_) return false;
    for (const auto* t : inputs) {
      if (t && t->defined() && t->requires_grad()) return true;
    }
    return false;
  }

  void record(const Tensor<T>& output, std::function<void()> backward) {
    nodes_.push_back({output.storage(), std::move(backward)});
  }

  // Seeds d(loss)/d(loss) = 1 and propagates through every recorded node.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward: loss must be a scalar, got shape " +
                          (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    }
    if (consumed_) throw ContractError("backward: tape already consumed");
    bool found = false;
    for (const auto& n : nodes_) {
      if (n.output == loss.storage()) {
        found = true;
        break;
      }
    }
    if (!found) throw ContractError("backward: loss was not produced on this tape");
    consumed_ = true;
    loss.storage()->grad.assign(1, T(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
  }

 private:
  struct Node {
    std::shared_ptr<detail::Storage<T>> output;
    std::function<void()> backward;
  };
  FlopCounter* counter_ = nullptr;
  bool recording_ = true;
  bool consumed_ = false;
  std::vector<Node> nodes_;
};

}  // namespace jumbo
