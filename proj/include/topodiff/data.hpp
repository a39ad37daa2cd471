#pragma once

// Samples, the synthetic topology-controlled generator, file ingestion and
// train/val/test splitting.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "topodiff/errors.hpp"
#include "topodiff/image_io.hpp"
#include "topodiff/topology.hpp"

namespace topodiff {

struct Sample {
  ScalarField2D image;  // conditioning input, values in [0, 1]
  ScalarField2D mask;   // ground truth, values in {0, 1}
  std::string id;
};

struct IntRange {
  int lo = 0;
  int hi = 0;
};

struct SynthSpec {
  std::size_t size = 32;
  IntRange components{1, 1};
  IntRange holes{0, 0};
  double noise_sigma = 0.5;
  double contrast = 0.4;
  std::uint64_t seed = 0;

  void validate() const {
    if (size < 16) throw ConfigError("data.size must be >= 16, got " + std::to_string(size));
    if (components.lo < 1 || components.hi < components.lo) throw ConfigError("data.components range is empty or < 1");
    if (holes.lo < 0 || holes.hi < holes.lo) throw ConfigError("data.holes range is empty or negative");
    if (noise_sigma < 0) throw ConfigError("data.noise_sigma must be >= 0");
    if (!(contrast > 0 && contrast <= 1)) throw ConfigError("data.contrast must lie in (0, 1]");
  }
};

namespace detail {

struct Blob {
  double cy, cx, radius;
  std::array<double, 2> amp, phase;  // 2nd and 3rd harmonic boundary wobble

  double reach(double angle) const {
    return radius * (1.0 + amp[0] * std::cos(2 * angle + phase[0]) + amp[1] * std::cos(3 * angle + phase[1]));
  }
  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    return std::hypot(dy, dx) <= reach(std::atan2(dy, dx));
  }
};

inline std::vector<double> box_smooth3(const std::vector<double>& v, std::size_t h, std::size_t w) {
  std::vector<double> out(v.size());
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      double acc = 0;
      int n = 0;
      for (long dr = -1; dr <= 1; ++dr)
        for (long dc = -1; dc <= 1; ++dc) {
          const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
          if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
          acc += v[static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc)];
          ++n;
        }
      out[r * w + c] = acc / n;
    }
  return out;
}

// One attempt at a mask with the requested counts; verified by the caller.
inline std::vector<double> draw_mask(std::size_t size, int n_comp, int n_holes, std::mt19937_64& rng) {
  auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  const double s = static_cast<double>(size);
  std::vector<int> label(size * size, 0);
  std::vector<Blob> blobs;
  // Holes go to the first component, which is drawn larger when it hosts any.
  for (int k = 0; k < n_comp; ++k) {
    const bool host = k == 0 && n_holes > 0;
    double r = uni(0.14, 0.3) * s;
    if (host) r = uni(0.26, 0.34) * s;
    else if (n_holes > 0) r = uni(0.07, 0.12) * s;
    else if (n_comp > 1) r = uni(0.1, 0.18) * s;
    const double wobble = host ? 0.08 : 0.15;
    Blob b{0, 0, r, {uni(0, wobble), uni(0, wobble)}, {uni(0, 6.2832), uni(0, 6.2832)}};
    const double margin = r * (1 + 2 * wobble) + 1.5;
    bool placed = false;
    for (int attempt = 0; attempt < 120 && !placed; ++attempt) {
      if (margin * 2 >= s) break;
      b.cy = uni(margin, s - margin);
      b.cx = uni(margin, s - margin);
      // Keep a gap of at least two pixels to every earlier component.
      bool clash = false;
      for (std::size_t y = 0; y < size && !clash; ++y)
        for (std::size_t x = 0; x < size && !clash; ++x) {
          if (!b.contains(static_cast<double>(y), static_cast<double>(x))) continue;
          for (long dy = -2; dy <= 2 && !clash; ++dy)
            for (long dx = -2; dx <= 2 && !clash; ++dx) {
              const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
              if (yy < 0 || xx < 0 || yy >= static_cast<long>(size) || xx >= static_cast<long>(size)) continue;
              if (label[static_cast<std::size_t>(yy) * size + static_cast<std::size_t>(xx)] != 0) clash = true;
            }
        }
      if (clash) continue;
      placed = true;
    }
    if (!placed) return {};
    blobs.push_back(b);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        if (b.contains(static_cast<double>(y), static_cast<double>(x))) label[y * size + x] = k + 1;
  }
  std::vector<double> mask(size * size);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = label[i] ? 1.0 : 0.0;
  if (n_holes > 0) {
    const Blob& host = blobs.front();
    std::vector<std::pair<double, double>> centres;
    for (int k = 0; k < n_holes; ++k) {
      const double hr = uni(1.2, 2.2) * s / 32.0;
      bool placed = false;
      for (int attempt = 0; attempt < 60 && !placed; ++attempt) {
        const double ang = uni(0, 6.2832);
        const double lim = host.radius * (1 - 0.16) - hr - 2.5;
        if (lim <= 0) break;
        const double d = n_holes == 1 ? uni(0, lim * 0.6) : uni(lim * 0.35, lim);
        const double cy = host.cy + d * std::sin(ang), cx = host.cx + d * std::cos(ang);
        bool ok = true;
        for (auto [py, px] : centres)
          if (std::hypot(cy - py, cx - px) < 2 * hr + 3.0) ok = false;
        if (!ok) continue;
        centres.push_back({cy, cx});
        for (std::size_t y = 0; y < size; ++y)
          for (std::size_t x = 0; x < size; ++x)
            if (std::hypot(static_cast<double>(y) - cy, static_cast<double>(x) - cx) <= hr) mask[y * size + x] = 0.0;
        placed = true;
      }
      if (!placed) return {};
    }
  }
  return mask;
}

}  // namespace detail

// Deterministic in (spec.seed, sample index). Each mask is re-drawn until its
// Betti numbers at 0.5 match the drawn component and hole counts.
inline std::vector<Sample> generate_synthetic(const SynthSpec& spec, std::size_t count) {
  spec.validate();
  constexpr int kMaxAttempts = 200;
  std::vector<Sample> out;
  out.reserve(count);
  const std::size_t n = spec.size;
  for (std::size_t i = 0; i < count; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(seq);
    const int n_comp = std::uniform_int_distribution<int>(spec.components.lo, spec.components.hi)(rng);
    const int n_holes = std::uniform_int_distribution<int>(spec.holes.lo, spec.holes.hi)(rng);
    std::vector<double> mask;
    for (int attempt = 0; attempt < kMaxAttempts && mask.empty(); ++attempt) {
      auto candidate = detail::draw_mask(n, n_comp, n_holes, rng);
      if (candidate.empty()) continue;
      const auto betti = betti_at_threshold(ScalarField2D(n, n, candidate), 0.5);
      if (betti.b0 == static_cast<std::size_t>(n_comp) && betti.b1 == static_cast<std::size_t>(n_holes)) {
        mask = std::move(candidate);
      }
    }
    if (mask.empty()) {
      throw DataError("synthetic sample " + std::to_string(i) + ": could not place " + std::to_string(n_comp) +
                      " components with " + std::to_string(n_holes) + " holes");
    }
    const double bg = (1.0 - spec.contrast) / 2.0;
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<double> img(n * n);
    for (std::size_t p = 0; p < img.size(); ++p) {
      const double base = bg + spec.contrast * mask[p];
      img[p] = base * (1.0 + spec.noise_sigma * noise(rng));
    }
    img = detail::box_smooth3(img, n, n);
    for (auto& v : img) v = std::clamp(v, 0.0, 1.0);
    char id[32];
    std::snprintf(id, sizeof id, "s%05zu", i);
    out.push_back({ScalarField2D(n, n, std::move(img)), ScalarField2D(n, n, std::move(mask)), id});
  }
  return out;
}

// Bilinear resampling with half-pixel centres.
inline ScalarField2D resize_bilinear(const ScalarField2D& f, std::size_t out_h, std::size_t out_w) {
  std::vector<double> out(out_h * out_w);
  const double sy = static_cast<double>(f.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(f.width) / static_cast<double>(out_w);
  for (std::size_t r = 0; r < out_h; ++r) {
    const double y = std::clamp((static_cast<double>(r) + 0.5) * sy - 0.5, 0.0, static_cast<double>(f.height - 1));
    const auto y0 = static_cast<std::size_t>(y);
    const std::size_t y1 = std::min(y0 + 1, f.height - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::size_t c = 0; c < out_w; ++c) {
      const double x = std::clamp((static_cast<double>(c) + 0.5) * sx - 0.5, 0.0, static_cast<double>(f.width - 1));
      const auto x0 = static_cast<std::size_t>(x);
      const std::size_t x1 = std::min(x0 + 1, f.width - 1);
      const double fx = x - static_cast<double>(x0);
      const double top = f.at(y0, x0) * (1 - fx) + f.at(y0, x1) * fx;
      const double bot = f.at(y1, x0) * (1 - fx) + f.at(y1, x1) * fx;
      out[r * out_w + c] = std::clamp(top * (1 - fy) + bot * fy, 0.0, 1.0);
    }
  }
  return ScalarField2D(out_h, out_w, std::move(out));
}

inline ScalarField2D resize_nearest(const ScalarField2D& f, std::size_t out_h, std::size_t out_w) {
  std::vector<double> out(out_h * out_w);
  for (std::size_t r = 0; r < out_h; ++r) {
    const auto y = std::min(f.height - 1, static_cast<std::size_t>((static_cast<double>(r) + 0.5) * f.height / out_h));
    for (std::size_t c = 0; c < out_w; ++c) {
      const auto x = std::min(f.width - 1, static_cast<std::size_t>((static_cast<double>(c) + 0.5) * f.width / out_w));
      out[r * out_w + c] = f.at(y, x);
    }
  }
  return ScalarField2D(out_h, out_w, std::move(out));
}

inline ScalarField2D image_to_field(const GrayImage& img) {
  std::vector<double> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = img.pixels[i] / 255.0;
  return ScalarField2D(img.height, img.width, std::move(v));
}

// Mask pixels >= 128 are foreground.
inline ScalarField2D mask_to_field(const GrayImage& img) {
  std::vector<double> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = img.pixels[i] >= 128 ? 1.0 : 0.0;
  return ScalarField2D(img.height, img.width, std::move(v));
}

inline GrayImage field_to_image(const ScalarField2D& f) {
  GrayImage img{f.height, f.width, std::vector<std::uint8_t>(f.size())};
  for (std::size_t i = 0; i < f.size(); ++i)
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(f.values[i], 0.0, 1.0) * 255.0));
  return img;
}

inline Sample load_sample(const std::string& id, const std::string& image_path, const std::string& mask_path,
                          std::size_t size) {
  const auto image = image_to_field(read_gray_image(image_path));
  const auto mask = mask_to_field(read_gray_image(mask_path));
  return {resize_bilinear(image, size, size), resize_nearest(mask, size, size), id};
}

// Pairs files with identical names in the two directories.
inline std::vector<Sample> load_pairs(const std::string& image_dir, const std::string& mask_dir, std::size_t size) {
  namespace fs = std::filesystem;
  auto list = [](const std::string& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
    std::map<std::string, std::string> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (!e.is_regular_file()) continue;
      const auto ext = detail::lower_extension(e.path().string());
      if (ext == "pgm" || ext == "png") files[e.path().filename().string()] = e.path().string();
    }
    return files;
  };
  const auto images = list(image_dir), masks = list(mask_dir);
  std::vector<std::string> orphans;
  for (const auto& [name, _] : images)
    if (!masks.count(name)) orphans.push_back(image_dir + "/" + name);
  for (const auto& [name, _] : masks)
    if (!images.count(name)) orphans.push_back(mask_dir + "/" + name);
  if (!orphans.empty()) {
    std::string msg = "unpaired files:";
    for (const auto& o : orphans) msg += " " + o;
    throw DataError(msg);
  }
  std::vector<Sample> out;
  for (const auto& [name, path] : images) {
    out.push_back(load_sample(fs::path(name).stem().string(), path, masks.at(name), size));
  }
  return out;
}

struct ManifestEntry {
  std::string id, image_path, mask_path;
};

// One "id image_path mask_path" line per sample; relative paths resolve
// against the manifest's directory.
inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  namespace fs = std::filesystem;
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest " + path);
  const fs::path base = fs::path(path).parent_path();
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!(ls >> e.id >> e.image_path >> e.mask_path)) {
      throw DataError("manifest " + path + ":" + std::to_string(lineno) + ": expected 'id image mask'");
    }
    if (fs::path(e.image_path).is_relative()) e.image_path = (base / e.image_path).string();
    if (fs::path(e.mask_path).is_relative()) e.mask_path = (base / e.mask_path).string();
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<Sample> load_manifest(const std::string& path, std::size_t size) {
  std::vector<Sample> out;
  for (const auto& e : read_manifest(path)) out.push_back(load_sample(e.id, e.image_path, e.mask_path, size));
  return out;
}

// Writes images/<id>.pgm, masks/<id>.pgm and manifest.txt under dir.
inline void write_dataset(const std::string& dir, const std::vector<Sample>& samples) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  std::ofstream manifest(fs::path(dir) / "manifest.txt", std::ios::trunc);
  if (!manifest) throw DataError("cannot write manifest in " + dir);
  for (const auto& s : samples) {
    const std::string img = "images/" + s.id + ".pgm", msk = "masks/" + s.id + ".pgm";
    write_pgm((fs::path(dir) / img).string(), field_to_image(s.image));
    write_pgm((fs::path(dir) / msk).string(), field_to_image(s.mask));
    manifest << s.id << ' ' << img << ' ' << msk << '\n';
  }
}

struct DataSplit {
  std::vector<Sample> train, val, test;
};

// Seeded shuffle, then consecutive runs of round(n * fraction) samples.
inline DataSplit split(const std::vector<Sample>& samples, std::array<double, 3> fractions, std::uint64_t seed) {
  double total = 0;
  for (double f : fractions) {
    if (f < 0) throw ConfigError("data.split fractions must be nonnegative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("data.split fractions must sum to 1");
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const double n = static_cast<double>(samples.size());
  const auto n_train = static_cast<std::size_t>(std::llround(n * fractions[0]));
  const auto n_val = std::min(samples.size() - n_train, static_cast<std::size_t>(std::llround(n * fractions[1])));
  const std::array<std::size_t, 3> sizes{n_train, n_val, samples.size() - n_train - n_val};
  const char* names[3] = {"train", "val", "test"};
  for (int k = 0; k < 3; ++k) {
    if (fractions[static_cast<std::size_t>(k)] > 0 && sizes[static_cast<std::size_t>(k)] == 0) {
      throw ConfigError(std::string("data.split: ") + names[k] + " partition is empty");
    }
  }
  DataSplit out;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto& dst = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
    dst.push_back(samples[idx[i]]);
  }
  return out;
}

}  // namespace topodiff
