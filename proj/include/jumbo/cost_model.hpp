#pragma once

// Closed-form per-layer cost model, counted in multiply-accumulates (one MAC
// per unit). Attention on n rows of width d costs 4nd^2 (Q, K, V and output
// projections) plus 2n^2 d (scores and weighted sum); an FFN d -> l*d -> d on
// n rows costs 2*l*n*d^2. Softmax, norms and the CLS row are not part of the
// register-matching accounting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "jumbo/errors.hpp"

namespace jumbo::cost {

using Count = std::uint64_t;

inline Count flops_mhsa(Count n, Count d) { return 4 * n * d * d + 2 * n * n * d; }

inline Count flops_ffn(Count n, Count d, Count l) {
  if (l < 1) throw ContractError("flops_ffn: hidden multiplier must be >= 1");
  return 2 * l * n * d * d;
}

enum class Mode { registers, jumbo };

struct FlopSpec {
  Count patches = 0;  // P
  Count width = 1;    // D
  Count jumbo = 0;    // J
  Count registers = 0;  // R
  Count ffn_multiplier = 2;  // l; the matching identity assumes 2
};

struct FlopReport {
  Count mhsa = 0, ffn_patches = 0, ffn_global = 0, total = 0;
};

// Registers: attention and shared FFN over P+R rows.
// Jumbo: attention over P+J rows, patch FFN over P rows, Jumbo FFN on one
// row of width J*D.
inline FlopReport layer_flops(const FlopSpec& s, Mode mode) {
  if (s.width < 1) throw ContractError("layer_flops: width must be >= 1");
  FlopReport r;
  if (mode == Mode::registers) {
    const Count n = s.patches + s.registers;
    r.mhsa = flops_mhsa(n, s.width);
    r.ffn_patches = flops_ffn(n, s.width, s.ffn_multiplier);
  } else {
    r.mhsa = flops_mhsa(s.patches + s.jumbo, s.width);
    r.ffn_patches = flops_ffn(s.patches, s.width, s.ffn_multiplier);
    r.ffn_global = s.jumbo ? flops_ffn(1, s.jumbo * s.width, s.ffn_multiplier) : 0;
  }
  r.total = r.mhsa + r.ffn_patches + r.ffn_global;
  return r;
}

// Registers-mode cost at a real-valued register count (l = 2).
inline long double register_layer_flops_real(long double p, long double d, long double r) {
  const long double n = p + r;
  return 8.0L * n * d * d + 2.0L * n * n * d;
}

struct RegisterMatch {
  long double real = 0;
  Count rounded = 0;
};

// Register count with the same per-layer cost as multiplier J:
//   R = -(2D + P) + sqrt((2D + P)^2 + (1 + 2D) J^2 + 2 (D + P) J)
// evaluated in the cancellation-free form X / ((2D + P) + sqrt(...)) with
// X = (1 + 2D) J^2 + 2 (D + P) J, which is exactly 0 at J = 0.
inline RegisterMatch match_registers(Count patches, Count width, Count jumbo) {
  if (patches < 1 || width < 1) throw ContractError("match_registers: P and D must be >= 1");
  const long double p = static_cast<long double>(patches), d = static_cast<long double>(width),
                    j = static_cast<long double>(jumbo);
  const long double base = 2.0L * d + p;
  const long double extra = (1.0L + 2.0L * d) * j * j + 2.0L * (d + p) * j;
  RegisterMatch m;
  m.real = extra / (base + std::sqrt(base * base + extra));
  m.rounded = static_cast<Count>(std::llround(m.real));
  return m;
}

// Variants plotted by the cost curve; defaults follow the ViT configurations
// being compared (patch FFN l = 4, R = 16, J = 6 with inner multiplier 4).
struct CurveVariants {
  bool plain = true, registers = true, jumbo = true;
  Count register_count = 16;
  Count jumbo_multiplier = 6;
  Count jumbo_ffn_multiplier = 4;
  Count patch_ffn_multiplier = 4;
};

struct CurveRow {
  Count n_patches;
  std::string variant;
  Count width;
  Count macs;
};

// Plain: attention + FFN over N+1 rows. Registers: over N+R+1 rows.
// Jumbo: attention over N+J rows, patch FFN over N, Jumbo FFN on J*D.
inline Count curve_point(const std::string& variant, Count n, Count d, const CurveVariants& v) {
  if (variant == "plain") return flops_mhsa(n + 1, d) + flops_ffn(n + 1, d, v.patch_ffn_multiplier);
  if (variant == "registers") {
    const Count rows = n + v.register_count + 1;
    return flops_mhsa(rows, d) + flops_ffn(rows, d, v.patch_ffn_multiplier);
  }
  if (variant == "jumbo") {
    const Count j = v.jumbo_multiplier;
    return flops_mhsa(n + j, d) + flops_ffn(n, d, v.patch_ffn_multiplier) + flops_ffn(1, j * d, v.jumbo_ffn_multiplier);
  }
  throw ContractError("curve_point: unknown variant '" + variant + "'");
}

// Rows ordered by variant (plain, registers, jumbo), then width, then N.
inline std::vector<CurveRow> flop_curve(const std::vector<Count>& widths, const std::vector<Count>& patch_counts,
                                        const CurveVariants& v = {}) {
  if (widths.empty() || patch_counts.empty()) throw ContractError("flop_curve: empty width or patch range");
  std::vector<std::string> names;
  if (v.plain) names.push_back("plain");
  if (v.registers) names.push_back("registers");
  if (v.jumbo) names.push_back("jumbo");
  if (names.empty()) throw ContractError("flop_curve: no variants selected");
  std::vector<Count> ws = widths, ns = patch_counts;
  std::sort(ws.begin(), ws.end());
  std::sort(ns.begin(), ns.end());
  std::vector<CurveRow> rows;
  for (const auto& name : names) {
    for (Count d : ws) {
      for (Count n : ns) rows.push_back({n, name, d, curve_point(name, n, d, v)});
    }
  }
  return rows;
}

inline void write_curve_csv(std::ostream& os, const std::vector<CurveRow>& rows) {
  os << "n_patches,variant,width,flops_macs\n";
  for (const auto& r : rows) os << r.n_patches << ',' << r.variant << ',' << r.width << ',' << r.macs << '\n';
  if (!os) throw IoError("write_curve_csv: stream write failed");
}

}  // namespace jumbo::cost
