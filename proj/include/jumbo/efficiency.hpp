#pragma once

// Parameter-controlled Jumbo variants: one Jumbo FFN shared by every layer,
// optionally with per-layer low-rank adapters, and exact parameter counting.

#include <cstdint>
#include <map>

#include "jumbo/lora.hpp"
#include "jumbo/model.hpp"

namespace jumbo {

// Returns a model whose layers all alias one Jumbo FFN, initialized from
// layer 0. Every other parameter is copied unchanged.
template <class T>
Model<T> tie_jumbo_ffn(const Model<T>& m) {
  const auto& c = m.config();
  if (!c.is_jumbo()) throw ContractError("tie_jumbo_ffn: model is not a Jumbo variant");
  if (c.tie_jumbo_ffn) return m.clone();
  ModelConfig tied = c;
  tied.tie_jumbo_ffn = true;
  auto out = Model<T>::zeros(tied);
  const std::string shared = "jumbo_ffn.shared.", layer0 = block_prefix(0) + "jumbo_ffn.";
  for (const auto& [name, t] : out.parameters()) {
    const std::string src = name.rfind(shared, 0) == 0 ? layer0 + name.substr(shared.size()) : name;
    auto v = m.param(src).values();
    auto dst = t;
    std::copy(v.begin(), v.end(), dst.mutable_values().begin());
  }
  return out;
}

// Adds per-layer adapters of the given rank to a tied model: A ~ N(0, 0.02),
// B = 0, so the result initially computes exactly what the tied model does.
template <class T>
Model<T> add_lora(const Model<T>& m, std::size_t rank, LoraTarget target, std::uint64_t seed) {
  const auto& c = m.config();
  if (!c.tie_jumbo_ffn) throw ContractError("add_lora: adapters attach to a tied Jumbo FFN");
  if (rank == 0) throw ContractError("add_lora: rank must be >= 1");
  ModelConfig lc = c;
  lc.lora_rank = rank;
  lc.lora_target = target;
  auto out = Model<T>::init(lc, seed);
  for (const auto& [name, t] : out.parameters()) {
    if (m.has_param(name)) {
      auto v = m.param(name).values();
      auto dst = t;
      std::copy(v.begin(), v.end(), dst.mutable_values().begin());
    }
  }
  return out;
}

struct ParamCount {
  std::uint64_t total = 0;
  std::map<ParamGroup, std::uint64_t> groups;

  std::uint64_t group(ParamGroup g) const {
    auto it = groups.find(g);
    return it == groups.end() ? 0 : it->second;
  }
};

// Counted from the manifest, so full-size configurations need no weights.
inline ParamCount count_params(const ModelConfig& c) {
  ParamCount pc;
  for (auto g : {ParamGroup::attention, ParamGroup::patch_ffn, ParamGroup::jumbo_ffn, ParamGroup::tokens, ParamGroup::head,
                 ParamGroup::adapters}) {
    pc.groups[g] = 0;
  }
  for (const auto& s : param_specs(c)) {
    const auto n = static_cast<std::uint64_t>(numel(s.shape));
    pc.total += n;
    pc.groups[s.group] += n;
  }
  return pc;
}

template <class T>
ParamCount count_params(const Model<T>& m) {
  ParamCount pc = count_params(m.config());
  std::uint64_t held = 0;
  for (const auto& p : m.parameters()) held += p.second.numel();
  if (held != pc.total) throw ContractError("count_params: model storage disagrees with its manifest");
  return pc;
}

}  // namespace jumbo
