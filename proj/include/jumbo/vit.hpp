#pragma once

// Forward pass shared by the plain, registers and Jumbo variants.
//
// Sequence layout entering attention, per sample:
//   plain      [cls, patches...]                 N' + 1 rows
//   registers  [cls, reg_1..reg_R, patches...]   N' + R + 1 rows
//   jumbo      [jumbo split into J rows, patches] N' + J rows
// Layers are pre-norm residual. In the Jumbo variant the J rows are
// reassembled after attention and pass through the dedicated Jumbo FFN,
// while patch rows use the patch FFN (absent in the last layer when
// discard_last_patch_ffn). Other variants run every row through the patch FFN.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "jumbo/lora.hpp"
#include "jumbo/model.hpp"
#include "jumbo/ops.hpp"

namespace jumbo {

struct ForwardOptions {
  // Applied to attention weights and FFN hidden activations when rng is set.
  double dropout = 0.0;
  Rng* rng = nullptr;
};

// Per-sample kept patch indices. A single set applies to every sample.
using KeepSets = std::vector<std::vector<std::size_t>>;

// images [B,Y,X,C] (or [Y,X,C]) -> [B,N,P_y*P_x*C]; patches in raster grid
// order, pixels flattened in (y, x, channel) order.
template <class T>
Tensor<T> patchify(const Tensor<T>& images, const ModelConfig& c) {
  const bool single = images.rank() == 3;
  if (!single && images.rank() != 4) throw ShapeError("patchify: expected [B,Y,X,C] or [Y,X,C], got " + to_string(images.shape()));
  const std::size_t b = single ? 1 : images.dim(0);
  const std::size_t off = single ? 0 : 1;
  const std::size_t ny = images.dim(off), nx = images.dim(off + 1), ch = images.dim(off + 2);
  if (ny % c.patch_y != 0 || nx % c.patch_x != 0) {
    throw ConfigError("patchify: image " + std::to_string(ny) + "x" + std::to_string(nx) + " not divisible by patch " +
                      std::to_string(c.patch_y) + "x" + std::to_string(c.patch_x));
  }
  if (ny != c.image_y || nx != c.image_x || ch != c.in_channels) {
    throw ShapeError("patchify: image " + to_string(images.shape()) + " does not match configured geometry");
  }
  const std::size_t gy = ny / c.patch_y, gx = nx / c.patch_x, dpix = c.patch_y * c.patch_x * ch;
  Tensor<T> out({b, gy * gx, dpix});
  auto ov = out.mutable_values();
  auto iv = images.values();
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t py = 0; py < gy; ++py) {
      for (std::size_t px = 0; px < gx; ++px) {
        std::size_t o = (s * gy * gx + py * gx + px) * dpix;
        for (std::size_t y = 0; y < c.patch_y; ++y) {
          const std::size_t row = ((s * ny) + py * c.patch_y + y) * nx + px * c.patch_x;
          std::copy_n(iv.begin() + static_cast<std::ptrdiff_t>(row * ch), c.patch_x * ch, ov.begin() + static_cast<std::ptrdiff_t>(o));
          o += c.patch_x * ch;
        }
      }
    }
  }
  return out;
}

// [..., 1, J*D] -> [..., J, D]; a pure reshape.
template <class T>
Tensor<T> split_jumbo(Tape<T>& tp, const Tensor<T>& jumbo, std::size_t width) {
  if (jumbo.rank() < 2 || jumbo.shape()[jumbo.rank() - 2] != 1 || width == 0 || jumbo.shape().back() % width != 0) {
    throw ContractError("split_jumbo: token " + to_string(jumbo.shape()) + " is not 1 x (J*" + std::to_string(width) + ")");
  }
  Shape s = jumbo.shape();
  s[s.size() - 2] = s.back() / width;
  s.back() = width;
  return ops::reshape(tp, jumbo, std::move(s));
}

// [..., J, D] -> [..., 1, J*D].
template <class T>
Tensor<T> reassemble_jumbo(Tape<T>& tp, const Tensor<T>& rows) {
  if (rows.rank() < 2) throw ContractError("reassemble_jumbo: expected [..., J, D], got " + to_string(rows.shape()));
  Shape s = rows.shape();
  s.back() *= s[s.size() - 2];
  s[s.size() - 2] = 1;
  return ops::reshape(tp, rows, std::move(s));
}

namespace detail {

template <class T>
void check_keep(const KeepSets& keep, std::size_t batch, std::size_t n) {
  if (keep.empty() || (keep.size() != 1 && keep.size() != batch)) {
    throw ContractError("keep sets: need 1 or " + std::to_string(batch) + " sets, got " + std::to_string(keep.size()));
  }
  const std::size_t k = keep[0].size();
  for (const auto& set : keep) {
    if (set.size() != k || k == 0) throw ContractError("keep sets: every sample must keep the same non-zero count");
    std::vector<bool> seen(n, false);
    for (std::size_t i : set) {
      if (i >= n) throw ContractError("keep sets: index " + std::to_string(i) + " out of range [0, " + std::to_string(n) + ")");
      if (seen[i]) throw ContractError("keep sets: duplicate index " + std::to_string(i));
      seen[i] = true;
    }
  }
}

template <class T>
Tensor<T> maybe_dropout(Tape<T>& tp, const Tensor<T>& x, const ForwardOptions& o) {
  if (o.rng && o.dropout > 0.0) return ops::dropout(tp, x, o.dropout, *o.rng);
  return x;
}

}  // namespace detail

// Patch projection plus learnable position embeddings: patches [B,N,Dpix] -> [B,N,D].
template <class T>
Tensor<T> embed(Tape<T>& tp, const Model<T>& m, const Tensor<T>& patches) {
  const auto& c = m.config();
  if (patches.rank() != 3 || patches.dim(1) != c.num_patches() || patches.dim(2) != c.patch_dim()) {
    throw ShapeError("embed: patches " + to_string(patches.shape()) + " do not match config");
  }
  auto proj = ops::linear(tp, patches, m.patch_embed.weight, m.patch_embed.bias);
  return ops::add(tp, proj, m.pos_embed);
}

// Embeds only the kept patch rows, each with its own position embedding.
template <class T>
Tensor<T> embed_kept(Tape<T>& tp, const Model<T>& m, const Tensor<T>& patches, const KeepSets& keep) {
  const auto& c = m.config();
  if (patches.rank() != 3 || patches.dim(1) != c.num_patches() || patches.dim(2) != c.patch_dim()) {
    throw ShapeError("embed_kept: patches " + to_string(patches.shape()) + " do not match config");
  }
  const std::size_t b = patches.dim(0), n = patches.dim(1);
  detail::check_keep<T>(keep, b, n);
  const std::size_t k = keep[0].size();
  std::vector<std::size_t> rows, pos;
  rows.reserve(b * k);
  pos.reserve(b * k);
  for (std::size_t s = 0; s < b; ++s) {
    const auto& set = keep.size() == 1 ? keep[0] : keep[s];
    for (std::size_t i : set) {
      rows.push_back(s * n + i);
      pos.push_back(i);
    }
  }
  auto flat = ops::reshape(tp, patches, {b * n, c.patch_dim()});
  auto sel = ops::reshape(tp, ops::index_select(tp, flat, rows), {b, k, c.patch_dim()});
  auto proj = ops::linear(tp, sel, m.patch_embed.weight, m.patch_embed.bias);
  auto pe = ops::reshape(tp, ops::index_select(tp, m.pos_embed, pos), {b, k, c.width});
  return ops::add(tp, proj, pe);
}

// x + MHSA(LN(x)) for x [B,S,D].
template <class T>
Tensor<T> attention_sublayer(Tape<T>& tp, const BlockParams<T>& blk, const ModelConfig& c, const Tensor<T>& x,
                             const ForwardOptions& o = {}) {
  if (x.rank() != 3 || x.dim(2) != c.width) throw ContractError("attention: sequence " + to_string(x.shape()) + " has wrong width");
  const std::size_t b = x.dim(0), s = x.dim(1), d = c.width, h = c.heads, dh = d / h;
  auto hn = ops::layer_norm(tp, x, blk.attn_norm.gain, blk.attn_norm.bias);
  auto qkv = ops::linear(tp, hn, blk.qkv.weight, blk.qkv.bias);  // [B,S,3D]
  auto heads = ops::permute(tp, ops::reshape(tp, qkv, {b, s, 3, h, dh}), {2, 0, 3, 1, 4});
  heads = ops::reshape(tp, heads, {3, b * h, s, dh});
  auto q = ops::reshape(tp, ops::slice(tp, heads, 0, 0, 1), {b * h, s, dh});
  auto k = ops::reshape(tp, ops::slice(tp, heads, 0, 1, 1), {b * h, s, dh});
  auto v = ops::reshape(tp, ops::slice(tp, heads, 0, 2, 1), {b * h, s, dh});
  auto scores = ops::scale(tp, ops::bmm(tp, q, k, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  auto attn = detail::maybe_dropout(tp, ops::softmax(tp, scores, -1), o);
  auto ctx = ops::bmm(tp, attn, v);  // [B*H,S,dh]
  ctx = ops::reshape(tp, ops::permute(tp, ops::reshape(tp, ctx, {b, h, s, dh}), {0, 2, 1, 3}), {b, s, d});
  auto out = ops::linear(tp, ctx, blk.proj.weight, blk.proj.bias);
  return ops::add(tp, x, out);
}

// x + FC2(GELU(FC1(LN(x)))), with optional per-layer adapters on the linears.
template <class T>
Tensor<T> ffn_sublayer(Tape<T>& tp, const FfnParams<T>& f, const Tensor<T>& x, const ForwardOptions& o = {},
                       const std::optional<LoraAdapter<T>>& lora_fc1 = std::nullopt,
                       const std::optional<LoraAdapter<T>>& lora_fc2 = std::nullopt) {
  auto hn = ops::layer_norm(tp, x, f.norm.gain, f.norm.bias);
  auto hidden = detail::maybe_dropout(tp, ops::gelu(tp, lora_linear(tp, hn, f.fc1, lora_fc1)), o);
  return ops::add(tp, x, lora_linear(tp, hidden, f.fc2, lora_fc2));
}

// Patch rows [B,N',D] and global state: [B,1,J*D] for Jumbo, [B,1+R,D] otherwise.
template <class T>
struct LayerState {
  Tensor<T> patches;
  Tensor<T> globals;
};

template <class T>
LayerState<T> layer_forward(Tape<T>& tp, const Model<T>& m, std::size_t layer, const LayerState<T>& in, const ForwardOptions& o = {}) {
  const auto& c = m.config();
  const auto& blk = m.blocks.at(layer);
  if (in.patches.rank() != 3 || in.patches.dim(2) != c.width) {
    throw ContractError("layer_forward: patch rows " + to_string(in.patches.shape()) + " do not have width " + std::to_string(c.width));
  }
  const std::size_t np = in.patches.dim(1);
  if (c.is_jumbo()) {
    if (in.globals.rank() != 3 || in.globals.dim(1) != 1 || in.globals.dim(2) != c.global_width()) {
      throw ContractError("layer_forward: jumbo token " + to_string(in.globals.shape()) + " is not [B,1,J*D]");
    }
    const std::size_t j = c.jumbo_multiplier;
    auto seq = ops::concat(tp, {split_jumbo(tp, in.globals, c.width), in.patches}, 1);
    seq = attention_sublayer(tp, blk, c, seq, o);
    auto jumbo = reassemble_jumbo(tp, ops::slice(tp, seq, 1, 0, j));
    auto patches = ops::slice(tp, seq, 1, j, np);
    jumbo = ffn_sublayer(tp, *blk.jumbo_ffn, jumbo, o, blk.lora_fc1, blk.lora_fc2);
    if (blk.patch_ffn) patches = ffn_sublayer(tp, *blk.patch_ffn, patches, o);
    return {patches, jumbo};
  }
  if (in.globals.rank() != 3 || in.globals.dim(1) != c.global_rows() || in.globals.dim(2) != c.width) {
    throw ContractError("layer_forward: global rows " + to_string(in.globals.shape()) + " do not match variant");
  }
  const std::size_t g = c.global_rows();
  auto seq = ops::concat(tp, {in.globals, in.patches}, 1);
  seq = attention_sublayer(tp, blk, c, seq, o);
  seq = ffn_sublayer(tp, *blk.patch_ffn, seq, o);
  return {ops::slice(tp, seq, 1, g, np), ops::slice(tp, seq, 1, 0, g)};
}

// Learnable global rows replicated over the batch.
template <class T>
Tensor<T> initial_globals(Tape<T>& tp, const Model<T>& m, std::size_t batch) {
  auto g = ops::broadcast_leading(tp, m.global_token, batch);  // [B,1,W]
  if (m.register_tokens.defined()) {
    g = ops::concat(tp, {g, ops::broadcast_leading(tp, m.register_tokens, batch)}, 1);
  }
  return g;
}

// Runs every layer over embedded patch rows [B,N',D] and returns the final
// normalized global representation [B, global_width].
template <class T>
Tensor<T> encode(Tape<T>& tp, const Model<T>& m, const Tensor<T>& tokens, const ForwardOptions& o = {}) {
  const auto& c = m.config();
  LayerState<T> st{tokens, initial_globals(tp, m, tokens.dim(0))};
  for (std::size_t l = 0; l < c.depth; ++l) st = layer_forward(tp, m, l, st, o);
  const std::size_t b = tokens.dim(0);
  auto g = c.is_jumbo() ? ops::reshape(tp, st.globals, {b, c.global_width()})
                        : ops::reshape(tp, ops::slice(tp, st.globals, 1, 0, 1), {b, c.width});
  return ops::layer_norm(tp, g, m.final_norm.gain, m.final_norm.bias);
}

template <class T>
Tensor<T> classify(Tape<T>& tp, const Model<T>& m, const Tensor<T>& global) {
  if (m.config().num_classes == 0) throw ContractError("classify: model has no head");
  return ops::linear(tp, global, m.head.weight, m.head.bias);
}

// Patch rows [B,N,Dpix] -> logits [B,C]; keep selects patch rows when given.
template <class T>
Tensor<T> forward_patches(Tape<T>& tp, const Model<T>& m, const Tensor<T>& patches, const KeepSets* keep = nullptr,
                          const ForwardOptions& o = {}) {
  auto tokens = keep ? embed_kept(tp, m, patches, *keep) : embed(tp, m, patches);
  return classify(tp, m, encode(tp, m, tokens, o));
}

// images [B,Y,X,C] or [Y,X,C] -> logits [B,C].
template <class T>
Tensor<T> forward(Tape<T>& tp, const Model<T>& m, const Tensor<T>& images, const ForwardOptions& o = {}) {
  return forward_patches(tp, m, patchify(images, m.config()), nullptr, o);
}

template <class T>
Tensor<T> forward_with_drop(Tape<T>& tp, const Model<T>& m, const Tensor<T>& images, const KeepSets& keep,
                            const ForwardOptions& o = {}) {
  return forward_patches(tp, m, patchify(images, m.config()), &keep, o);
}

}  // namespace jumbo
