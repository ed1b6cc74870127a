#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "jumbo/model.hpp"
#include "jumbo/rng.hpp"

namespace jumbo::testing {

// D=16, J=2, depth 2, 4 patches (4x4 image, 2x2 patches, 1 channel), 3 classes.
inline ModelConfig tiny_jumbo(std::size_t j = 2) {
  ModelConfig c;
  c.variant = Variant::jumbo;
  c.depth = 2;
  c.width = 16;
  c.heads = 2;
  c.jumbo_multiplier = j;
  c.patch_ffn_multiplier = 2;
  c.jumbo_ffn_multiplier = 2;
  c.image_y = c.image_x = 4;
  c.in_channels = 1;
  c.patch_y = c.patch_x = 2;
  c.num_classes = 3;
  return c;
}

inline ModelConfig tiny_plain() {
  auto c = tiny_jumbo();
  c.variant = Variant::plain;
  c.jumbo_multiplier = 0;
  c.discard_last_patch_ffn = false;
  return c;
}

// Same weight values for every parameter name the two models share.
template <class T>
void copy_shared(const Model<T>& from, Model<T>& to) {
  for (const auto& [name, t] : to.parameters()) {
    if (!from.has_param(name)) continue;
    auto src = from.param(name);
    auto dst = t;
    std::copy(src.values().begin(), src.values().end(), dst.mutable_values().begin());
  }
}

// Parameters are initialized small; spreading them keeps the network far
// from its near-linear regime so the checks exercise every nonlinearity.
template <class T>
void randomize(Model<T>& m, std::uint64_t seed, double stddev = 0.3) {
  Rng rng(seed);
  for (const auto& [name, t] : m.parameters()) {
    auto h = t;
    for (auto& v : h.mutable_values()) v = static_cast<T>(stddev * rng.normal());
  }
}

inline std::vector<std::size_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  rng.shuffle(p);
  return p;
}

}  // namespace jumbo::testing
