#pragma once

#include <cstddef>
#include <string>

#include "json.hpp"
#include "jumbo/errors.hpp"

namespace jumbo {

enum class Variant { plain, registers, jumbo };

// Which linear maps of the shared Jumbo FFN receive per-layer adapters.
enum class LoraTarget { fc1, fc2, both };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::plain: return "plain";
    case Variant::registers: return "registers";
    case Variant::jumbo: return "jumbo";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "plain") return Variant::plain;
  if (s == "registers") return Variant::registers;
  if (s == "jumbo") return Variant::jumbo;
  throw ConfigError("unknown variant '" + s + "' (expected plain|registers|jumbo)");
}

inline std::string to_string(LoraTarget t) {
  switch (t) {
    case LoraTarget::fc1: return "fc1";
    case LoraTarget::fc2: return "fc2";
    case LoraTarget::both: return "both";
  }
  return "?";
}

inline LoraTarget parse_lora_target(const std::string& s) {
  if (s == "fc1") return LoraTarget::fc1;
  if (s == "fc2") return LoraTarget::fc2;
  if (s == "both") return LoraTarget::both;
  throw ConfigError("unknown lora target '" + s + "' (expected fc1|fc2|both)");
}

struct ModelConfig {
  Variant variant = Variant::jumbo;
  std::size_t depth = 12;
  std::size_t width = 384;  // D
  std::size_t heads = 6;
  std::size_t jumbo_multiplier = 6;  // J
  std::size_t register_count = 0;    // R
  std::size_t patch_ffn_multiplier = 4;
  std::size_t jumbo_ffn_multiplier = 4;
  std::size_t image_y = 224, image_x = 224, in_channels = 3;
  std::size_t patch_y = 16, patch_x = 16;
  // 0 builds a headless backbone (used by the time-series adapter).
  std::size_t num_classes = 1000;
  bool discard_last_patch_ffn = true;

  // When token_count > 0 the model consumes pre-built patch rows of width
  // token_dim instead of images (time series).
  std::size_t token_count = 0, token_dim = 0;

  bool tie_jumbo_ffn = false;
  std::size_t lora_rank = 0;
  LoraTarget lora_target = LoraTarget::fc1;

  bool is_jumbo() const { return variant == Variant::jumbo; }

  std::size_t num_patches() const {
    if (token_count > 0) return token_count;
    return (image_y / patch_y) * (image_x / patch_x);
  }

  std::size_t patch_dim() const { return token_count > 0 ? token_dim : patch_y * patch_x * in_channels; }

  // Width of the global token that feeds the head: J*D for Jumbo, D otherwise.
  std::size_t global_width() const { return is_jumbo() ? jumbo_multiplier * width : width; }

  // Global rows joining the attention sequence (J, R+1, or 1).
  std::size_t global_rows() const {
    switch (variant) {
      case Variant::jumbo: return jumbo_multiplier;
      case Variant::registers: return register_count + 1;
      case Variant::plain: return 1;
    }
    return 1;
  }

  bool has_patch_ffn(std::size_t layer) const {
    return !(is_jumbo() && discard_last_patch_ffn && layer + 1 == depth);
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (depth == 0) fail("depth must be >= 1");
    if (width == 0 || heads == 0) fail("width and heads must be >= 1");
    if (width % heads != 0) fail("width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
    if (patch_ffn_multiplier == 0) fail("patch_ffn_multiplier must be >= 1");
    if (token_count > 0) {
      if (token_dim == 0) fail("token_dim must be >= 1");
    } else {
      if (patch_y == 0 || patch_x == 0 || in_channels == 0) fail("patch size and channels must be >= 1");
      if (image_y % patch_y != 0 || image_x % patch_x != 0) {
        fail("image " + std::to_string(image_y) + "x" + std::to_string(image_x) + " not divisible by patch " +
             std::to_string(patch_y) + "x" + std::to_string(patch_x));
      }
      if (num_patches() == 0) fail("image yields no patches");
    }
    if (is_jumbo()) {
      if (jumbo_multiplier == 0) fail("jumbo variant needs jumbo_multiplier >= 1");
      if (jumbo_ffn_multiplier == 0) fail("jumbo_ffn_multiplier must be >= 1");
    } else {
      if (discard_last_patch_ffn) fail("discard_last_patch_ffn applies to the jumbo variant only");
      if (tie_jumbo_ffn || lora_rank > 0) fail("layer tying and LoRA apply to the jumbo variant only");
    }
    if (variant != Variant::registers && register_count != 0) fail("register_count is only valid for the registers variant");
    if (lora_rank > 0 && !tie_jumbo_ffn) fail("LoRA adapters require a tied Jumbo FFN");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"variant", to_string(c.variant)},
                     {"depth", c.depth},
                     {"width", c.width},
                     {"heads", c.heads},
                     {"jumbo_multiplier", c.jumbo_multiplier},
                     {"register_count", c.register_count},
                     {"patch_ffn_multiplier", c.patch_ffn_multiplier},
                     {"jumbo_ffn_multiplier", c.jumbo_ffn_multiplier},
                     {"image_y", c.image_y},
                     {"image_x", c.image_x},
                     {"in_channels", c.in_channels},
                     {"patch_y", c.patch_y},
                     {"patch_x", c.patch_x},
                     {"num_classes", c.num_classes},
                     {"discard_last_patch_ffn", c.discard_last_patch_ffn},
                     {"token_count", c.token_count},
                     {"token_dim", c.token_dim},
                     {"tie_jumbo_ffn", c.tie_jumbo_ffn},
                     {"lora_rank", c.lora_rank},
                     {"lora_target", to_string(c.lora_target)}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.variant = parse_variant(j.at("variant").get<std::string>());
  j.at("depth").get_to(c.depth);
  j.at("width").get_to(c.width);
  j.at("heads").get_to(c.heads);
  j.at("jumbo_multiplier").get_to(c.jumbo_multiplier);
  j.at("register_count").get_to(c.register_count);
  j.at("patch_ffn_multiplier").get_to(c.patch_ffn_multiplier);
  j.at("jumbo_ffn_multiplier").get_to(c.jumbo_ffn_multiplier);
  j.at("image_y").get_to(c.image_y);
  j.at("image_x").get_to(c.image_x);
  j.at("in_channels").get_to(c.in_channels);
  j.at("patch_y").get_to(c.patch_y);
  j.at("patch_x").get_to(c.patch_x);
  j.at("num_classes").get_to(c.num_classes);
  j.at("discard_last_patch_ffn").get_to(c.discard_last_patch_ffn);
  j.at("token_count").get_to(c.token_count);
  j.at("token_dim").get_to(c.token_dim);
  j.at("tie_jumbo_ffn").get_to(c.tie_jumbo_ffn);
  j.at("lora_rank").get_to(c.lora_rank);
  c.lora_target = parse_lora_target(j.at("lora_target").get<std::string>());
}

}  // namespace jumbo
