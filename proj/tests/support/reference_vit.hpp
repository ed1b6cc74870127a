#pragma once

// Straight-line re-evaluation of the model algebra with nested loops over
// std::vector<double>, reading weights by canonical name. Shares no code
// with the tape-based forward pass.

#include <cmath>
#include <string>
#include <vector>

#include "jumbo/model.hpp"

namespace jumbo::testing {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(std::span<const double> v, std::size_t rows, std::size_t cols) {
  Mat m(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = v[r * cols + c];
  return m;
}

class ReferenceVit {
 public:
  explicit ReferenceVit(const Model<double>& m) : m_(m), c_(m.config()) {}

  // image [Y][X][C] flattened row-major.
  std::vector<double> logits(const std::vector<double>& image) const {
    const std::size_t gy = c_.image_y / c_.patch_y, gx = c_.image_x / c_.patch_x;
    Mat patches;
    for (std::size_t py = 0; py < gy; ++py) {
      for (std::size_t px = 0; px < gx; ++px) {
        std::vector<double> row;
        for (std::size_t y = 0; y < c_.patch_y; ++y)
          for (std::size_t x = 0; x < c_.patch_x; ++x)
            for (std::size_t ch = 0; ch < c_.in_channels; ++ch)
              row.push_back(image[((py * c_.patch_y + y) * c_.image_x + px * c_.patch_x + x) * c_.in_channels + ch]);
        patches.push_back(row);
      }
    }
    Mat tokens = affine(patches, "patch_embed.");
    const Mat pos = mat("pos_embed");
    for (std::size_t i = 0; i < tokens.size(); ++i)
      for (std::size_t j = 0; j < c_.width; ++j) tokens[i][j] += pos[i][j];

    const std::size_t d = c_.width;
    std::vector<double> jumbo;
    Mat globals;
    if (c_.is_jumbo()) {
      jumbo = mat("jumbo_token")[0];
    } else {
      globals.push_back(mat("cls_token")[0]);
      if (m_.has_param("register_tokens"))
        for (auto& r : mat("register_tokens")) globals.push_back(r);
    }
    for (std::size_t l = 0; l < c_.depth; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      Mat seq;
      if (c_.is_jumbo()) {
        for (std::size_t j = 0; j < c_.jumbo_multiplier; ++j)
          seq.emplace_back(jumbo.begin() + static_cast<std::ptrdiff_t>(j * d), jumbo.begin() + static_cast<std::ptrdiff_t>((j + 1) * d));
      } else {
        seq = globals;
      }
      const std::size_t g = seq.size();
      for (auto& t : tokens) seq.push_back(t);
      seq = add(seq, attention(norm(seq, p + "attn_norm."), p));
      if (c_.is_jumbo()) {
        std::vector<double> j;
        for (std::size_t r = 0; r < g; ++r) j.insert(j.end(), seq[r].begin(), seq[r].end());
        Mat jm{j};
        const std::string jp = c_.tie_jumbo_ffn ? "jumbo_ffn.shared." : p + "jumbo_ffn.";
        jm = add(jm, ffn(norm(jm, jp + "norm."), jp));
        jumbo = jm[0];
        tokens.assign(seq.begin() + static_cast<std::ptrdiff_t>(g), seq.end());
        if (m_.has_param(p + "ffn.fc1.weight")) tokens = add(tokens, ffn(norm(tokens, p + "ffn.norm."), p + "ffn."));
      } else {
        seq = add(seq, ffn(norm(seq, p + "ffn.norm."), p + "ffn."));
        globals.assign(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(g));
        tokens.assign(seq.begin() + static_cast<std::ptrdiff_t>(g), seq.end());
      }
    }
    Mat out{c_.is_jumbo() ? jumbo : globals[0]};
    out = norm(out, "final_norm.");
    return affine(out, "head.")[0];
  }

 private:
  Mat mat(const std::string& name) const {
    auto t = m_.param(name);
    const std::size_t cols = t.shape().back();
    return to_mat(t.values(), t.numel() / cols, cols);
  }

  std::vector<double> vec(const std::string& name) const {
    auto v = m_.param(name).values();
    return {v.begin(), v.end()};
  }

  // x W^T + b with W stored [out, in].
  Mat affine(const Mat& x, const std::string& p) const {
    const Mat w = mat(p + "weight");
    const auto b = vec(p + "bias");
    Mat y(x.size(), std::vector<double>(w.size()));
    for (std::size_t r = 0; r < x.size(); ++r) {
      for (std::size_t o = 0; o < w.size(); ++o) {
        double s = b[o];
        for (std::size_t i = 0; i < x[r].size(); ++i) s += x[r][i] * w[o][i];
        y[r][o] = s;
      }
    }
    return y;
  }

  Mat norm(const Mat& x, const std::string& p) const {
    const auto g = vec(p + "gain"), b = vec(p + "bias");
    Mat y = x;
    for (auto& row : y) {
      double mean = 0, var = 0;
      for (double v : row) mean += v;
      mean /= static_cast<double>(row.size());
      for (double v : row) var += (v - mean) * (v - mean);
      var /= static_cast<double>(row.size());
      const double inv = 1.0 / std::sqrt(var + 1e-6);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean) * inv * g[j] + b[j];
    }
    return y;
  }

  static Mat add(const Mat& a, const Mat& b) {
    Mat y = a;
    for (std::size_t r = 0; r < a.size(); ++r)
      for (std::size_t j = 0; j < a[r].size(); ++j) y[r][j] += b[r][j];
    return y;
  }

  Mat ffn(const Mat& x, const std::string& p) const {
    Mat h = affine(x, p + "fc1.");
    for (auto& row : h)
      for (auto& v : row) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    return affine(h, p + "fc2.");
  }

  Mat attention(const Mat& x, const std::string& p) const {
    const std::size_t s = x.size(), d = c_.width, h = c_.heads, dh = d / h;
    const Mat qkv = affine(x, p + "attn.qkv.");
    Mat ctx(s, std::vector<double>(d, 0.0));
    for (std::size_t head = 0; head < h; ++head) {
      for (std::size_t i = 0; i < s; ++i) {
        std::vector<double> score(s);
        double mx = -1e300;
        for (std::size_t j = 0; j < s; ++j) {
          double dot = 0;
          for (std::size_t e = 0; e < dh; ++e) dot += qkv[i][head * dh + e] * qkv[j][d + head * dh + e];
          score[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, score[j]);
        }
        double z = 0;
        for (auto& v : score) z += (v = std::exp(v - mx));
        for (std::size_t j = 0; j < s; ++j)
          for (std::size_t e = 0; e < dh; ++e) ctx[i][head * dh + e] += score[j] / z * qkv[j][2 * d + head * dh + e];
      }
    }
    return affine(ctx, p + "attn.proj.");
  }

  const Model<double>& m_;
  ModelConfig c_;
};

}  // namespace jumbo::testing
