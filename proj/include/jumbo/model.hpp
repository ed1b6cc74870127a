#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "jumbo/config.hpp"
#include "jumbo/rng.hpp"
#include "jumbo/tensor.hpp"

namespace jumbo {

enum class ParamGroup { attention, patch_ffn, jumbo_ffn, tokens, head, adapters };

inline std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::attention: return "attention";
    case ParamGroup::patch_ffn: return "patch_ffn";
    case ParamGroup::jumbo_ffn: return "jumbo_ffn";
    case ParamGroup::tokens: return "tokens";
    case ParamGroup::head: return "head";
    case ParamGroup::adapters: return "adapters";
  }
  return "?";
}

enum class ParamInit { trunc_normal, normal, zeros, ones };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamGroup group;
  ParamInit init;
};

inline std::string block_prefix(std::size_t i) { return "blocks." + std::to_string(i) + "."; }

inline std::string jumbo_ffn_prefix(const ModelConfig& c, std::size_t layer) {
  return c.tie_jumbo_ffn ? std::string("jumbo_ffn.shared.") : block_prefix(layer) + "jumbo_ffn.";
}

inline std::string lora_name(std::size_t layer, char side, const char* linear) {
  return "jumbo_ffn.lora.layer" + std::to_string(layer) + "." + side + "." + linear;
}

// Canonical parameter manifest for a configuration, in storage order. Tied
// parameters appear once. Counting parameters from this list needs no
// allocation, which matters for full-size configurations.
inline std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.width, gw = c.global_width();
  std::vector<ParamSpec> s;
  auto linear = [&s](const std::string& p, std::size_t out, std::size_t in, ParamGroup g) {
    s.push_back({p + "weight", {out, in}, g, ParamInit::trunc_normal});
    s.push_back({p + "bias", {out}, g, ParamInit::zeros});
  };
  auto norm = [&s](const std::string& p, std::size_t w, ParamGroup g) {
    s.push_back({p + "gain", {w}, g, ParamInit::ones});
    s.push_back({p + "bias", {w}, g, ParamInit::zeros});
  };
  auto jumbo_ffn = [&](const std::string& p) {
    const std::size_t hidden = c.jumbo_ffn_multiplier * gw;
    norm(p + "norm.", gw, ParamGroup::jumbo_ffn);
    linear(p + "fc1.", hidden, gw, ParamGroup::jumbo_ffn);
    linear(p + "fc2.", gw, hidden, ParamGroup::jumbo_ffn);
  };

  linear("patch_embed.", d, c.patch_dim(), ParamGroup::tokens);
  s.push_back({"pos_embed", {c.num_patches(), d}, ParamGroup::tokens, ParamInit::trunc_normal});
  if (c.is_jumbo()) {
    s.push_back({"jumbo_token", {1, gw}, ParamGroup::tokens, ParamInit::trunc_normal});
  } else {
    s.push_back({"cls_token", {1, d}, ParamGroup::tokens, ParamInit::trunc_normal});
  }
  if (c.variant == Variant::registers && c.register_count > 0) {
    s.push_back({"register_tokens", {c.register_count, d}, ParamGroup::tokens, ParamInit::trunc_normal});
  }
  for (std::size_t i = 0; i < c.depth; ++i) {
    const auto p = block_prefix(i);
    norm(p + "attn_norm.", d, ParamGroup::attention);
    linear(p + "attn.qkv.", 3 * d, d, ParamGroup::attention);
    linear(p + "attn.proj.", d, d, ParamGroup::attention);
    if (c.has_patch_ffn(i)) {
      const std::size_t hidden = c.patch_ffn_multiplier * d;
      norm(p + "ffn.norm.", d, ParamGroup::patch_ffn);
      linear(p + "ffn.fc1.", hidden, d, ParamGroup::patch_ffn);
      linear(p + "ffn.fc2.", d, hidden, ParamGroup::patch_ffn);
    }
    if (c.is_jumbo() && !c.tie_jumbo_ffn) jumbo_ffn(p + "jumbo_ffn.");
  }
  if (c.is_jumbo() && c.tie_jumbo_ffn) jumbo_ffn("jumbo_ffn.shared.");
  if (c.lora_rank > 0) {
    const std::size_t r = c.lora_rank, hidden = c.jumbo_ffn_multiplier * gw;
    for (std::size_t i = 0; i < c.depth; ++i) {
      if (c.lora_target != LoraTarget::fc2) {
        s.push_back({lora_name(i, 'A', "fc1"), {r, gw}, ParamGroup::adapters, ParamInit::normal});
        s.push_back({lora_name(i, 'B', "fc1"), {hidden, r}, ParamGroup::adapters, ParamInit::zeros});
      }
      if (c.lora_target != LoraTarget::fc1) {
        s.push_back({lora_name(i, 'A', "fc2"), {r, hidden}, ParamGroup::adapters, ParamInit::normal});
        s.push_back({lora_name(i, 'B', "fc2"), {gw, r}, ParamGroup::adapters, ParamInit::zeros});
      }
    }
  }
  norm("final_norm.", gw, ParamGroup::head);
  if (c.num_classes > 0) linear("head.", c.num_classes, gw, ParamGroup::head);
  return s;
}

template <class T>
struct LinearParams {
  Tensor<T> weight, bias;
};

template <class T>
struct NormParams {
  Tensor<T> gain, bias;
};

template <class T>
struct FfnParams {
  NormParams<T> norm;
  LinearParams<T> fc1, fc2;
};

// Low-rank update B*A; a is [rank, d_in], b is [d_out, rank].
template <class T>
struct LoraAdapter {
  Tensor<T> a, b;
  std::size_t rank() const { return a.dim(0); }
};

template <class T>
struct BlockParams {
  NormParams<T> attn_norm;
  LinearParams<T> qkv, proj;
  std::optional<FfnParams<T>> patch_ffn;
  std::optional<FfnParams<T>> jumbo_ffn;
  std::optional<LoraAdapter<T>> lora_fc1, lora_fc2;
};

// Weights plus the structured view the forward pass uses. Move-only: the
// structured view holds handles into the parameter list, so a shallow copy
// would silently alias; use clone() for an independent copy.
template <class T>
class Model {
 public:
  using Param = std::pair<std::string, Tensor<T>>;

  // Truncated-normal(0.02) tokens/embeddings/weights, zero biases, unit gains.
  static Model init(const ModelConfig& config, std::uint64_t seed) {
    Model m(config);
    Rng rng(seed);
    for (std::size_t i = 0; i < m.params_.size(); ++i) {
      auto v = m.params_[i].second.mutable_values();
      switch (m.specs_[i].init) {
        case ParamInit::trunc_normal:
          for (auto& x : v) x = static_cast<T>(rng.trunc_normal(0.02));
          break;
        case ParamInit::normal:
          for (auto& x : v) x = static_cast<T>(0.02 * rng.normal());
          break;
        case ParamInit::zeros: break;
        case ParamInit::ones: std::fill(v.begin(), v.end(), T(1)); break;
      }
    }
    return m;
  }

  // All-zero weights (unit gains not applied); used before loading values.
  static Model zeros(const ModelConfig& config) { return Model(config); }

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  Model clone() const {
    Model m(config_);
    m.copy_values_from(*this);
    return m;
  }

  template <class U>
  Model<U> cast() const {
    auto m = Model<U>::zeros(config_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto src = params_[i].second.values();
      auto dst = m.parameters()[i].second;
      auto dv = dst.mutable_values();
      for (std::size_t k = 0; k < src.size(); ++k) dv[k] = static_cast<U>(src[k]);
    }
    return m;
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<Param>& parameters() const { return params_; }
  const std::vector<ParamSpec>& specs() const { return specs_; }

  Tensor<T> param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("model has no parameter '" + name + "'");
    return params_[it->second].second;
  }

  bool has_param(const std::string& name) const { return index_.count(name) > 0; }

  void copy_values_from(const Model& other) {
    for (auto& [name, t] : params_) {
      auto src = other.param(name);
      if (src.shape() != t.shape()) throw ShapeError("copy_values_from: shape mismatch for " + name);
      std::copy(src.values().begin(), src.values().end(), t.mutable_values().begin());
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.second.zero_grad();
  }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.second.numel();
    return n;
  }

  LinearParams<T> patch_embed;
  Tensor<T> pos_embed;
  Tensor<T> global_token;  // cls [1,D] or jumbo [1,J*D]
  Tensor<T> register_tokens;
  std::vector<BlockParams<T>> blocks;
  NormParams<T> final_norm;
  LinearParams<T> head;

 private:
  explicit Model(const ModelConfig& config) : config_(config), specs_(param_specs(config)) {
    for (const auto& s : specs_) {
      index_[s.name] = params_.size();
      params_.emplace_back(s.name, Tensor<T>(s.shape, true));
    }
    wire();
  }

  LinearParams<T> lin(const std::string& p) const { return {param(p + "weight"), param(p + "bias")}; }
  NormParams<T> nrm(const std::string& p) const { return {param(p + "gain"), param(p + "bias")}; }
  FfnParams<T> ffn(const std::string& p) const { return {nrm(p + "norm."), lin(p + "fc1."), lin(p + "fc2.")}; }

  void wire() {
    const auto& c = config_;
    patch_embed = lin("patch_embed.");
    pos_embed = param("pos_embed");
    global_token = param(c.is_jumbo() ? "jumbo_token" : "cls_token");
    if (has_param("register_tokens")) register_tokens = param("register_tokens");
    blocks.resize(c.depth);
    for (std::size_t i = 0; i < c.depth; ++i) {
      auto& b = blocks[i];
      const auto p = block_prefix(i);
      b.attn_norm = nrm(p + "attn_norm.");
      b.qkv = lin(p + "attn.qkv.");
      b.proj = lin(p + "attn.proj.");
      if (c.has_patch_ffn(i)) b.patch_ffn = ffn(p + "ffn.");
      if (c.is_jumbo()) b.jumbo_ffn = ffn(jumbo_ffn_prefix(c, i));
      if (has_param(lora_name(i, 'A', "fc1"))) b.lora_fc1 = LoraAdapter<T>{param(lora_name(i, 'A', "fc1")), param(lora_name(i, 'B', "fc1"))};
      if (has_param(lora_name(i, 'A', "fc2"))) b.lora_fc2 = LoraAdapter<T>{param(lora_name(i, 'A', "fc2")), param(lora_name(i, 'B', "fc2"))};
    }
    final_norm = nrm("final_norm.");
    if (c.num_classes > 0) head = lin("head.");
  }

  ModelConfig config_;
  std::vector<ParamSpec> specs_;
  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace jumbo
