#pragma once

#include <optional>

#include "jumbo/model.hpp"
#include "jumbo/ops.hpp"

namespace jumbo {

// x * W^T + b + (x * A^T) * B^T. The dense sum W + B*A is never formed, so an
// adapter costs rows * r * (d_in + d_out) extra MACs.
template <class T>
Tensor<T> lora_linear(Tape<T>& tp, const Tensor<T>& x, const LinearParams<T>& shared, const LoraAdapter<T>* adapter) {
  auto y = ops::linear(tp, x, shared.weight, shared.bias);
  if (!adapter) return y;
  if (!adapter->a.defined() || adapter->rank() == 0) throw ContractError("lora_linear: rank 0 adapter; use the shared linear");
  const std::size_t d_in = shared.weight.dim(1), d_out = shared.weight.dim(0);
  if (adapter->a.dim(1) != d_in || adapter->b.dim(0) != d_out || adapter->b.dim(1) != adapter->rank()) {
    throw ShapeError("lora_linear: adapter A " + to_string(adapter->a.shape()) + " B " + to_string(adapter->b.shape()) +
                     " does not fit weight " + to_string(shared.weight.shape()));
  }
  auto down = ops::linear(tp, x, adapter->a);
  auto up = ops::linear(tp, down, adapter->b);
  return ops::add(tp, y, up);
}

template <class T>
Tensor<T> lora_linear(Tape<T>& tp, const Tensor<T>& x, const LinearParams<T>& shared, const std::optional<LoraAdapter<T>>& adapter) {
  return lora_linear(tp, x, shared, adapter ? &*adapter : nullptr);
}

}  // namespace jumbo
