#pragma once

// Dataset containers, on-disk formats and the synthetic task generators.
//
// Image split directory:  <dir>/<split>/labels.csv  ("file,label" rows)
//                         <dir>/<split>/<file>.ppm  (binary P6, maxval 255)
// Series split file:      <dir>/<split>.tsv  one record per line, label then
//                         L*M values in channel-major order
// Series header:          <dir>/header.txt  key=value lines L, M, num_classes, splits
// Both generators also write <dir>/manifest.json with the spec and its hash.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "jumbo/errors.hpp"
#include "jumbo/rng.hpp"
#include "jumbo/tensor.hpp"

namespace jumbo {

namespace fs = std::filesystem;

struct ImageDataset {
  std::size_t height = 0, width = 0, channels = 0, num_classes = 0;
  std::vector<std::uint8_t> pixels;  // [n, height, width, channels]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return height * width * channels; }

  // Pixels mapped to [-1, 1], shape [B, height, width, channels].
  template <class T>
  Tensor<T> batch(std::span<const std::size_t> indices) const {
    Tensor<T> out({indices.size(), height, width, channels});
    auto v = out.mutable_values();
    const std::size_t n = image_size();
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const std::uint8_t* src = pixels.data() + indices[b] * n;
      for (std::size_t i = 0; i < n; ++i) v[b * n + i] = static_cast<T>(src[i] / 127.5 - 1.0);
    }
    return out;
  }
};

struct SeriesDataset {
  std::size_t length = 0, channels = 0, num_classes = 0;
  std::vector<float> values;  // [n, channels, length]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t record_size() const { return length * channels; }
};

// ---------------------------------------------------------------------------
// PPM

inline void write_ppm(const fs::path& path, std::size_t height, std::size_t width, std::span<const std::uint8_t> rgb) {
  if (rgb.size() != height * width * 3) throw ContractError("write_ppm: pixel buffer does not match geometry");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("write_ppm: cannot open " + path.string());
  os << "P6\n" << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!os) throw IoError("write_ppm: write failed for " + path.string());
}

namespace detail {

// Next header token, skipping whitespace and '#' comments.
inline std::string ppm_token(std::istream& is) {
  std::string tok;
  for (int ch; (ch = is.get()) != EOF;) {
    if (ch == '#') {
      std::string skip;
      std::getline(is, skip);
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

inline std::size_t parse_size(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (s.empty() || pos != s.size() || s[0] == '-') throw DataError(what + ": expected a non-negative integer, got '" + s + "'");
  return static_cast<std::size_t>(v);
}

}  // namespace detail

struct PpmImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> rgb;
};

inline PpmImage read_ppm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("read_ppm: cannot open " + path.string());
  const std::string where = "read_ppm " + path.string();
  if (detail::ppm_token(is) != "P6") throw DataError(where + ": not a binary PPM (P6)");
  PpmImage img;
  img.width = detail::parse_size(detail::ppm_token(is), where);
  img.height = detail::parse_size(detail::ppm_token(is), where);
  if (detail::parse_size(detail::ppm_token(is), where) != 255) throw DataError(where + ": only maxval 255 is supported");
  img.rgb.resize(img.height * img.width * 3);
  is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (static_cast<std::size_t>(is.gcount()) != img.rgb.size()) throw DataError(where + ": truncated pixel data");
  return img;
}

// ---------------------------------------------------------------------------
// Image splits

inline void save_image_split(const ImageDataset& d, const fs::path& dir) {
  if (d.channels != 3) throw ContractError("save_image_split: PPM storage needs 3 channels");
  fs::create_directories(dir);
  std::ofstream labels(dir / "labels.csv");
  if (!labels) throw IoError("save_image_split: cannot write " + (dir / "labels.csv").string());
  labels << "file,label\n";
  const std::size_t n = d.image_size();
  for (std::size_t i = 0; i < d.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%06zu.ppm", i);
    write_ppm(dir / name, d.height, d.width, std::span<const std::uint8_t>(d.pixels.data() + i * n, n));
    labels << name << ',' << d.labels[i] << '\n';
  }
  if (!labels) throw IoError("save_image_split: write failed in " + dir.string());
}

inline ImageDataset load_image_split(const fs::path& dir, std::size_t num_classes) {
  const auto csv = dir / "labels.csv";
  std::ifstream is(csv);
  if (!is) throw IoError("load_image_split: cannot open " + csv.string());
  ImageDataset d;
  d.channels = 3;
  d.num_classes = num_classes;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw DataError(csv.string() + ":" + std::to_string(lineno) + ": expected 'file,label'");
    const auto label = detail::parse_size(line.substr(comma + 1), csv.string() + ":" + std::to_string(lineno));
    if (label >= num_classes) {
      throw DataError(csv.string() + ":" + std::to_string(lineno) + ": label " + std::to_string(label) + " >= num_classes");
    }
    const auto img = read_ppm(dir / line.substr(0, comma));
    if (d.labels.empty()) {
      d.height = img.height;
      d.width = img.width;
    } else if (img.height != d.height || img.width != d.width) {
      throw DataError(csv.string() + ":" + std::to_string(lineno) + ": image size differs from the first image");
    }
    d.pixels.insert(d.pixels.end(), img.rgb.begin(), img.rgb.end());
    d.labels.push_back(static_cast<int>(label));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Series splits

struct SeriesHeader {
  std::size_t length = 0, channels = 0, num_classes = 0;
  std::vector<std::string> splits;
};

inline void write_series_header(const SeriesHeader& h, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream os(dir / "header.txt");
  if (!os) throw IoError("write_series_header: cannot write in " + dir.string());
  os << "L=" << h.length << "\nM=" << h.channels << "\nnum_classes=" << h.num_classes << "\nsplits=";
  for (std::size_t i = 0; i < h.splits.size(); ++i) os << (i ? "," : "") << h.splits[i];
  os << '\n';
}

inline SeriesHeader read_series_header(const fs::path& dir) {
  const auto path = dir / "header.txt";
  std::ifstream is(path);
  if (!is) throw IoError("read_series_header: cannot open " + path.string());
  SeriesHeader h;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw DataError(where + ": expected key=value");
    const auto key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "L") {
      h.length = detail::parse_size(value, where);
    } else if (key == "M") {
      h.channels = detail::parse_size(value, where);
    } else if (key == "num_classes") {
      h.num_classes = detail::parse_size(value, where);
    } else if (key == "splits") {
      std::stringstream ss(value);
      for (std::string s; std::getline(ss, s, ',');) {
        if (!s.empty()) h.splits.push_back(s);
      }
    } else {
      throw DataError(where + ": unknown key '" + key + "'");
    }
  }
  if (h.length == 0 || h.channels == 0 || h.num_classes == 0) throw DataError(path.string() + ": L, M and num_classes are required");
  return h;
}

inline void save_series_split(const SeriesDataset& d, const fs::path& file) {
  std::ofstream os(file);
  if (!os) throw IoError("save_series_split: cannot write " + file.string());
  char buf[32];
  const std::size_t n = d.record_size();
  for (std::size_t i = 0; i < d.size(); ++i) {
    os << d.labels[i];
    for (std::size_t k = 0; k < n; ++k) {
      std::snprintf(buf, sizeof buf, "\t%.9g", static_cast<double>(d.values[i * n + k]));
      os << buf;
    }
    os << '\n';
  }
  if (!os) throw IoError("save_series_split: write failed for " + file.string());
}

inline SeriesDataset load_series_split(const fs::path& file, const SeriesHeader& h) {
  std::ifstream is(file);
  if (!is) throw IoError("load_series_split: cannot open " + file.string());
  SeriesDataset d;
  d.length = h.length;
  d.channels = h.channels;
  d.num_classes = h.num_classes;
  const std::size_t n = h.length * h.channels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = file.string() + ":" + std::to_string(lineno);
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, '\t');) fields.push_back(f);
    if (fields.size() != n + 1) {
      throw DataError(where + ": expected " + std::to_string(n + 1) + " fields, got " + std::to_string(fields.size()));
    }
    const auto label = detail::parse_size(fields[0], where);
    if (label >= h.num_classes) throw DataError(where + ": label " + std::to_string(label) + " >= num_classes");
    for (std::size_t k = 1; k <= n; ++k) {
      char* end = nullptr;
      const double v = std::strtod(fields[k].c_str(), &end);
      if (fields[k].empty() || *end != '\0' || !std::isfinite(v)) {
        throw DataError(where + ": field " + std::to_string(k + 1) + " is not a finite number: '" + fields[k] + "'");
      }
      d.values.push_back(static_cast<float>(v));
    }
    d.labels.push_back(static_cast<int>(label));
  }
  return d;
}

inline SeriesDataset subset(const SeriesDataset& d, std::span<const std::size_t> idx) {
  SeriesDataset out;
  out.length = d.length;
  out.channels = d.channels;
  out.num_classes = d.num_classes;
  const std::size_t n = d.record_size();
  for (std::size_t i : idx) {
    out.values.insert(out.values.end(), d.values.begin() + static_cast<std::ptrdiff_t>(i * n),
                      d.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    out.labels.push_back(d.labels[i]);
  }
  return out;
}

// Seeded, unstratified 50/50 split of a held-out set into (validation, test).
// An odd record goes to the test half.
inline std::pair<SeriesDataset, SeriesDataset> halve_split(const SeriesDataset& d, std::uint64_t seed) {
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  const std::size_t half = idx.size() / 2;
  return {subset(d, std::span(idx).first(half)), subset(d, std::span(idx).subspan(half))};
}

// ---------------------------------------------------------------------------
// Synthetic tasks

struct SyntheticImageSpec {
  std::size_t classes = 10;
  std::size_t train = 1000, val = 200, test = 200;
  std::size_t height = 16, width = 16;
  // Noise standard deviation is 1/separation in units of the pixel range;
  // infinity gives noiseless copies of the prototypes.
  double separation = 4.0;
  std::uint64_t seed = 0;
};

struct SyntheticSeriesSpec {
  std::size_t classes = 2;
  std::size_t train = 400, val = 200, test = 200;
  std::size_t length = 64, channels = 3;
  double base_frequency = 2.0;  // cycles per series for class 1
  double separation = 2.0;      // noise std is 1/separation
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const SyntheticImageSpec& s) {
  j = {{"task", "image-classes"}, {"classes", s.classes}, {"train", s.train}, {"val", s.val}, {"test", s.test},
       {"height", s.height}, {"width", s.width}, {"separation", std::isinf(s.separation) ? -1.0 : s.separation},
       {"seed", s.seed}};
}

inline void to_json(nlohmann::json& j, const SyntheticSeriesSpec& s) {
  j = {{"task", "series-classes"}, {"classes", s.classes}, {"train", s.train}, {"val", s.val}, {"test", s.test},
       {"length", s.length}, {"channels", s.channels}, {"base_frequency", s.base_frequency},
       {"separation", std::isinf(s.separation) ? -1.0 : s.separation}, {"seed", s.seed}};
}

// Prototype i is a fixed random RGB texture; separation < inf adds clipped noise.
inline std::vector<std::vector<double>> image_prototypes(const SyntheticImageSpec& s) {
  Rng rng(s.seed ^ fnv1a("prototypes"));
  std::vector<std::vector<double>> protos(s.classes, std::vector<double>(s.height * s.width * 3));
  for (auto& p : protos)
    for (auto& v : p) v = rng.uniform();
  return protos;
}

struct ImageSplits {
  ImageDataset train, val, test;
};

inline ImageSplits synthesize_images(const SyntheticImageSpec& s) {
  if (s.classes < 1 || s.height == 0 || s.width == 0) throw ConfigError("synthetic images: classes and geometry must be >= 1");
  if (!(s.separation > 0)) throw ConfigError("synthetic images: separation must be > 0");
  const auto protos = image_prototypes(s);
  const double noise = std::isinf(s.separation) ? 0.0 : 1.0 / s.separation;
  auto make = [&](std::size_t count, const char* split) {
    ImageDataset d;
    d.height = s.height;
    d.width = s.width;
    d.channels = 3;
    d.num_classes = s.classes;
    Rng rng(s.seed ^ fnv1a(split));
    for (std::size_t i = 0; i < count; ++i) {
      const auto label = static_cast<int>(i % s.classes);
      for (double p : protos[static_cast<std::size_t>(label)]) {
        const double v = std::clamp(p + (noise > 0 ? noise * rng.normal() : 0.0), 0.0, 1.0);
        d.pixels.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
      }
      d.labels.push_back(label);
    }
    return d;
  };
  return {make(s.train, "train"), make(s.val, "val"), make(s.test, "test")};
}

struct SeriesSplits {
  SeriesDataset train, val, test;
};

// Class 0 is noise only; class c > 0 carries a sinusoid of c * base_frequency
// cycles with an independent random phase on every channel.
inline SeriesSplits synthesize_series(const SyntheticSeriesSpec& s) {
  if (s.classes < 2 || s.length < 2 || s.channels < 1) throw ConfigError("synthetic series: need classes >= 2, L >= 2, M >= 1");
  if (!(s.separation > 0)) throw ConfigError("synthetic series: separation must be > 0");
  const double noise = std::isinf(s.separation) ? 0.0 : 1.0 / s.separation;
  auto make = [&](std::size_t count, const char* split) {
    SeriesDataset d;
    d.length = s.length;
    d.channels = s.channels;
    d.num_classes = s.classes;
    Rng rng(s.seed ^ fnv1a(split));
    for (std::size_t i = 0; i < count; ++i) {
      const auto label = static_cast<int>(i % s.classes);
      for (std::size_t m = 0; m < s.channels; ++m) {
        const double phase = 2 * std::numbers::pi * rng.uniform();
        for (std::size_t t = 0; t < s.length; ++t) {
          const double cyc = label * s.base_frequency * static_cast<double>(t) / static_cast<double>(s.length);
          const double signal = label == 0 ? 0.0 : std::sin(2 * std::numbers::pi * cyc + phase);
          d.values.push_back(static_cast<float>(signal + noise * rng.normal()));
        }
      }
      d.labels.push_back(label);
    }
    return d;
  };
  return {make(s.train, "train"), make(s.val, "val"), make(s.test, "test")};
}

inline void write_manifest(const fs::path& dir, const nlohmann::json& spec, const nlohmann::json& counts) {
  nlohmann::json m;
  m["spec"] = spec;
  m["spec_hash"] = fnv1a(spec.dump());
  m["counts"] = counts;
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("write_manifest: cannot write in " + dir.string());
  os << m.dump(2) << '\n';
}

inline void write_synthetic_images(const SyntheticImageSpec& s, const fs::path& dir) {
  const auto d = synthesize_images(s);
  fs::create_directories(dir);
  save_image_split(d.train, dir / "train");
  save_image_split(d.val, dir / "val");
  save_image_split(d.test, dir / "test");
  write_manifest(dir, s, {{"train", d.train.size()}, {"val", d.val.size()}, {"test", d.test.size()}});
}

inline void write_synthetic_series(const SyntheticSeriesSpec& s, const fs::path& dir) {
  const auto d = synthesize_series(s);
  fs::create_directories(dir);
  write_series_header({s.length, s.channels, s.classes, {"train", "val", "test"}}, dir);
  save_series_split(d.train, dir / "train.tsv");
  save_series_split(d.val, dir / "val.tsv");
  save_series_split(d.test, dir / "test.tsv");
  write_manifest(dir, s, {{"train", d.train.size()}, {"val", d.val.size()}, {"test", d.test.size()}});
}

inline std::size_t manifest_classes(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("manifest_classes: cannot open " + (dir / "manifest.json").string());
  try {
    return nlohmann::json::parse(is).at("spec").at("classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest_classes: " + std::string(e.what()));
  }
}

}  // namespace jumbo
