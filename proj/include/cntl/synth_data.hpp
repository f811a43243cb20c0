#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cntl/contour_eval.hpp"
#include "cntl/image_io.hpp"
#include "cntl/loss.hpp"
#include "cntl/random.hpp"
#include "cntl/tensor.hpp"

namespace cntl {

struct GenConfig {
  std::uint64_t seed = 1;
  int num_subjects = 49;
  int slices_min = 28;
  int slices_max = 136;
  int height = 352;
  int width = 512;
  double grain = 1.2;               // speckle correlation length in pixels
  int control_min = 5;              // spline control points per interface
  int control_max = 8;
  double walk_step = 0.006;         // per-slice control-point drift, fraction of height
  int distractors_min = 1;
  int distractors_max = 3;
  double dropout_probability = 0.35;
  double bulge_fraction = 31.0 / 49.0;

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("invalid generator config: " + what);
    };
    need(num_subjects >= 1, "num_subjects must be >= 1");
    need(slices_min >= 1 && slices_min <= slices_max, "slice range must be nonempty");
    need(height >= 32 && width >= 32, "image size must be at least 32x32");
    need(grain > 0.0, "grain must be positive");
    need(control_min >= 3 && control_min <= control_max, "control point range must be nonempty and >= 3");
    need(walk_step >= 0.0, "walk_step must be nonnegative");
    need(distractors_min >= 1 && distractors_min <= distractors_max, "distractor range must be nonempty and >= 1");
    need(dropout_probability >= 0.0 && dropout_probability <= 1.0, "dropout_probability must lie in [0,1]");
    need(bulge_fraction >= 0.0 && bulge_fraction <= 1.0, "bulge_fraction must lie in [0,1]");
  }
};

struct ImageSample {
  GrayImage image;
  BinaryMask mask;
  std::string subject_id;
  int slice_index = 0;
};

// Generator-side truth that is never written to disk.
struct SliceTruth {
  BinaryMask distractors;  // rasterized distractor curves (unlabelled edges)
  BinaryMask dropout;      // pixels inside a low-contrast dropout band
};

struct Volume {
  std::string subject_id;
  bool bulge = false;
  std::vector<ImageSample> slices;
  std::vector<SliceTruth> truth;  // empty when loaded from disk
};

inline std::string subject_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "s%03d", index);
  return buf;
}

namespace synth {

// Uniform Catmull-Rom interpolation through equally spaced knots spanning
// [x0, x1], evaluated at integer columns 0..w-1.
inline std::vector<double> catmull_rom(const std::vector<double>& knots, double x0, double x1, int w) {
  const int k = static_cast<int>(knots.size());
  auto at = [&](int i) { return knots[std::clamp(i, 0, k - 1)]; };
  std::vector<double> y(w);
  for (int c = 0; c < w; ++c) {
    const double u = std::clamp((c - x0) / (x1 - x0), 0.0, 1.0) * (k - 1);
    const int i = std::min(static_cast<int>(u), k - 2);
    const double t = u - i;
    const double p0 = at(i - 1), p1 = at(i), p2 = at(i + 1), p3 = at(i + 2);
    y[c] = 0.5 * (2 * p1 + (-p0 + p2) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t * t +
                  (-p0 + 3 * p1 - 3 * p2 + p3) * t * t * t);
  }
  return y;
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * r + 1);
  double s = 0;
  for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  return k;
}

// Separable blur with edge clamping.
inline void blur(std::vector<double>& a, int h, int w, double sigma_r, double sigma_c) {
  std::vector<double> tmp(a.size());
  const auto kc = gaussian_kernel(sigma_c), kr = gaussian_kernel(sigma_r);
  const int rc = static_cast<int>(kc.size() / 2), rr = static_cast<int>(kr.size() / 2);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double s = 0;
      for (int j = -rc; j <= rc; ++j) s += kc[j + rc] * a[std::size_t(r) * w + std::clamp(c + j, 0, w - 1)];
      tmp[std::size_t(r) * w + c] = s;
    }
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double s = 0;
      for (int j = -rr; j <= rr; ++j) s += kr[j + rr] * tmp[std::size_t(std::clamp(r + j, 0, h - 1)) * w + c];
      a[std::size_t(r) * w + c] = s;
    }
}

// Envelope of complex white scatter convolved with a Gaussian point-spread
// function, scaled to unit mean.
inline std::vector<double> speckle(int h, int w, double sigma_r, double sigma_c, Rng& rng) {
  std::vector<double> re(std::size_t(h) * w), im(re.size());
  for (auto& v : re) v = rng.normal();
  for (auto& v : im) v = rng.normal();
  blur(re, h, w, sigma_r, sigma_c);
  blur(im, h, w, sigma_r, sigma_c);
  std::vector<double> env(re.size());
  double mean = 0;
  for (std::size_t i = 0; i < env.size(); ++i) mean += env[i] = std::hypot(re[i], im[i]);
  mean /= static_cast<double>(env.size());
  for (auto& v : env) v /= mean;
  return env;
}

// 8-connected polyline through (c, round(y[c])), clipped to the image.
inline void rasterize(BinaryMask& m, const std::vector<double>& y, int c0, int c1) {
  auto plot = [&](int r, int c) {
    if (r >= 0 && r < m.height() && c >= 0 && c < m.width()) m.set(r, c, true);
  };
  for (int c = c0; c <= c1; ++c) {
    const int r = static_cast<int>(std::lround(y[c]));
    if (c == c0) {
      plot(r, c);
      continue;
    }
    // Bresenham from the previous column's pixel
    int x = c - 1, yy = static_cast<int>(std::lround(y[c - 1]));
    const int dx = 1, dy = std::abs(r - yy), sy = r > yy ? 1 : -1;
    int err = dx - dy;
    while (x != c || yy != r) {
      const int e2 = 2 * err;
      if (e2 > -dy) {
        err -= dy;
        x += 1;
      }
      if (e2 < dx) {
        err += dx;
        yy += sy;
      }
      plot(yy, x);
    }
  }
}

inline double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

struct Distractor {
  int side = -1;                 // -1 above the interface, +1 below
  std::vector<double> wobble;    // extra offset knots (pixels)
  double separation = 0;         // minimum offset (pixels)
  double relative_step = 0;      // signed intensity step as a fraction of the interface step
  double x_lo = 0, x_hi = 0;     // visible column range
  double thickness = 0;          // extent of the altered layer beyond the curve (pixels)
};

struct VolumeState {
  std::vector<double> knots;     // interface control points (rows)
  double mean_above = 0, mean_below = 0;
  bool bulge = false;
  double bulge_center = 0, bulge_width = 0, bulge_amp = 0;
  bool dropout = false;
  double dropout_center = 0, dropout_width = 0, dropout_depth = 0;
  std::vector<Distractor> distractors;
};

}  // namespace synth

// Deterministic in (cfg.seed, subject_index).
inline Volume generate_volume(const GenConfig& cfg, int subject_index) {
  cfg.validate();
  if (subject_index < 0 || subject_index >= cfg.num_subjects)
    throw ConfigError("subject index " + std::to_string(subject_index) + " outside 0.." +
                      std::to_string(cfg.num_subjects - 1));
  const int H = cfg.height, W = cfg.width;

  // bulge assignment: a seeded permutation marks round(fraction * N) subjects
  std::vector<int> order(cfg.num_subjects);
  for (int i = 0; i < cfg.num_subjects; ++i) order[i] = i;
  Rng assign(derive_seed(cfg.seed, 0xB0B0));
  assign.shuffle(order.begin(), order.end());
  const int n_bulge = static_cast<int>(std::lround(cfg.bulge_fraction * cfg.num_subjects));
  const bool bulge = std::find(order.begin(), order.begin() + n_bulge, subject_index) != order.begin() + n_bulge;

  Rng rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(subject_index)));
  Volume vol;
  vol.subject_id = subject_name(subject_index);
  vol.bulge = bulge;
  const int n_slices = static_cast<int>(rng.uniform_int(cfg.slices_min, cfg.slices_max));

  synth::VolumeState st;
  const int k = static_cast<int>(rng.uniform_int(cfg.control_min, cfg.control_max));
  for (int i = 0; i < k; ++i) st.knots.push_back(rng.uniform(0.38, 0.58) * H);
  st.mean_above = rng.uniform(0.56, 0.68);
  st.mean_below = rng.uniform(0.24, 0.36);
  st.bulge = bulge;
  st.bulge_center = rng.uniform(0.25, 0.75) * W;
  st.bulge_width = rng.uniform(0.06, 0.12) * W;
  st.bulge_amp = rng.uniform(0.06, 0.12) * H;
  st.dropout = rng.bernoulli(cfg.dropout_probability);
  st.dropout_center = rng.uniform(0.15, 0.85) * W;
  st.dropout_width = rng.uniform(0.05, 0.12) * W;
  st.dropout_depth = rng.uniform(0.6, 0.85);
  const int n_distract = static_cast<int>(rng.uniform_int(cfg.distractors_min, cfg.distractors_max));
  for (int d = 0; d < n_distract; ++d) {
    synth::Distractor ds;
    ds.side = d == 0 ? -1 : (rng.bernoulli(0.5) ? -1 : 1);
    ds.separation = std::max(8.0, 0.09 * H) * (1.0 + 0.4 * d);
    for (int i = 0; i < 4; ++i) ds.wobble.push_back(rng.uniform(0.0, 0.06) * H);
    ds.relative_step = rng.uniform(0.8, 1.2) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
    const double span = rng.uniform(0.5, 1.0) * W;
    ds.x_lo = rng.uniform(0.0, W - span);
    ds.x_hi = ds.x_lo + span;
    ds.thickness = rng.uniform(0.12, 0.3) * H;
    st.distractors.push_back(ds);
  }

  const double kappa = 0.55;  // speckle contrast
  for (int s = 0; s < n_slices; ++s) {
    if (s > 0) {
      for (auto& v : st.knots) v = std::clamp(v + rng.normal(0.0, cfg.walk_step * H), 0.32 * H, 0.62 * H);
      for (auto& ds : st.distractors)
        for (auto& v : ds.wobble) v = std::clamp(v + rng.normal(0.0, 0.3 * cfg.walk_step * H), 0.0, 0.08 * H);
      st.dropout_center = std::clamp(st.dropout_center + rng.normal(0.0, 0.004 * W), 0.1 * W, 0.9 * W);
    }
    std::vector<double> y = synth::catmull_rom(st.knots, -0.05 * W, 1.05 * W, W);
    if (st.bulge) {
      const double amp = st.bulge_amp * std::sin(std::numbers::pi * (s + 1) / (n_slices + 1));
      for (int c = 0; c < W; ++c) {
        const double z = (c - st.bulge_center) / st.bulge_width;
        y[c] += amp * std::exp(-0.5 * z * z);
      }
    }
    // distractor curves and their visibility weights along x
    std::vector<std::vector<double>> dy;
    std::vector<std::vector<double>> dw;
    for (const auto& ds : st.distractors) {
      const auto wob = synth::catmull_rom(ds.wobble, 0.0, W - 1.0, W);
      std::vector<double> curve(W), weight(W);
      const double ramp = 0.25 * (ds.x_hi - ds.x_lo);
      for (int c = 0; c < W; ++c) {
        curve[c] = y[c] + ds.side * (ds.separation + wob[c]);
        weight[c] = synth::smoothstep(ds.x_lo, ds.x_lo + ramp, c) * (1 - synth::smoothstep(ds.x_hi - ramp, ds.x_hi, c));
      }
      dy.push_back(std::move(curve));
      dw.push_back(std::move(weight));
    }
    std::vector<double> drop(W, 0.0);
    if (st.dropout) {
      const double half = st.dropout_width / 2, ramp = 0.35 * st.dropout_width;
      for (int c = 0; c < W; ++c) {
        const double d = std::abs(c - st.dropout_center);
        drop[c] = 1 - synth::smoothstep(half - ramp, half, d);
      }
    }

    Rng srng(derive_seed(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(subject_index)), 77 + s));
    const auto fine = synth::speckle(H, W, cfg.grain, cfg.grain, srng);
    const auto coarse = synth::speckle(H, W, 0.8 * cfg.grain, 2.6 * cfg.grain, srng);
    const double step = st.mean_above - st.mean_below;
    const double mid = 0.5 * (st.mean_above + st.mean_below);

    ImageSample sample;
    sample.subject_id = vol.subject_id;
    sample.slice_index = s;
    sample.image = GrayImage(H, W);
    SliceTruth truth{BinaryMask(H, W), BinaryMask(H, W)};
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        const bool above = r < y[c];
        double mean = above ? st.mean_above : st.mean_below;
        for (std::size_t d = 0; d < dy.size(); ++d) {
          const auto& ds = st.distractors[d];
          const double depth = ds.side < 0 ? dy[d][c] - r : r - dy[d][c];
          if (depth > 0)
            mean += ds.relative_step * step * dw[d][c] *
                    (1 - synth::smoothstep(ds.thickness, 1.5 * ds.thickness, depth));
        }
        mean = std::max(mean, 0.08);
        if (drop[c] > 0) mean = (mean + (mid - mean) * st.dropout_depth * drop[c]) * (1 - 0.3 * drop[c]);
        const std::size_t i = std::size_t(r) * W + c;
        const double tex = above ? fine[i] : coarse[i];
        const double v = 255.0 * mean * (1 - kappa + kappa * tex);
        sample.image.at(r, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        if (drop[c] > 0) truth.dropout.set(r, c, true);
      }
    BinaryMask mask(H, W);
    synth::rasterize(mask, y, 0, W - 1);
    sample.mask = thin(mask);
    for (std::size_t d = 0; d < dy.size(); ++d) {
      int c0 = W, c1 = -1;
      for (int c = 0; c < W; ++c)
        if (dw[d][c] >= 0.5) c0 = std::min(c0, c), c1 = std::max(c1, c);
      if (c1 >= c0) synth::rasterize(truth.distractors, dy[d], c0, c1);
    }
    vol.slices.push_back(std::move(sample));
    vol.truth.push_back(std::move(truth));
  }
  return vol;
}

inline std::vector<Volume> generate_dataset(const GenConfig& cfg) {
  std::vector<Volume> v;
  for (int i = 0; i < cfg.num_subjects; ++i) v.push_back(generate_volume(cfg, i));
  return v;
}

// Gradient magnitude of the Gaussian-smoothed image (central differences).
inline std::vector<double> edge_strength(const GrayImage& img, double sigma = 1.5) {
  const int h = img.height, w = img.width;
  std::vector<double> a(img.pixels.begin(), img.pixels.end());
  synth::blur(a, h, w, sigma, sigma);
  std::vector<double> g(a.size());
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double gx = a[std::size_t(r) * w + std::min(c + 1, w - 1)] - a[std::size_t(r) * w + std::max(c - 1, 0)];
      const double gy = a[std::size_t(std::min(r + 1, h - 1)) * w + c] - a[std::size_t(std::max(r - 1, 0)) * w + c];
      g[std::size_t(r) * w + c] = 0.5 * std::hypot(gx, gy);
    }
  return g;
}

inline ImageSample crop(const ImageSample& s, int top, int left, int h, int w) {
  if (top < 0 || left < 0 || top + h > s.image.height || left + w > s.image.width)
    throw ShapeError("crop " + std::to_string(h) + "x" + std::to_string(w) + " at (" + std::to_string(top) + "," +
                     std::to_string(left) + ") exceeds image " + std::to_string(s.image.height) + "x" +
                     std::to_string(s.image.width));
  ImageSample out;
  out.subject_id = s.subject_id;
  out.slice_index = s.slice_index;
  out.image = GrayImage(h, w);
  out.mask = BinaryMask(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      out.image.at(r, c) = s.image.at(top + r, left + c);
      out.mask.set(r, c, s.mask(top + r, left + c));
    }
  return out;
}

// Top-left offset uniform over all valid positions.
inline std::pair<int, int> random_crop_offset(int height, int width, int h, int w, Rng& rng) {
  if (height < h || width < w)
    throw ShapeError("image " + std::to_string(height) + "x" + std::to_string(width) + " is smaller than the crop " +
                     std::to_string(h) + "x" + std::to_string(w));
  return {static_cast<int>(rng.uniform_int(0, height - h)), static_cast<int>(rng.uniform_int(0, width - w))};
}

inline ImageSample random_crop(const ImageSample& s, int h, int w, Rng& rng) {
  const auto [top, left] = random_crop_offset(s.image.height, s.image.width, h, w, rng);
  return crop(s, top, left, h, w);
}

// Central window; odd margins round toward the top-left.
inline ImageSample center_crop(const ImageSample& s, int h, int w) {
  if (s.image.height < h || s.image.width < w)
    throw ShapeError("image " + std::to_string(s.image.height) + "x" + std::to_string(s.image.width) +
                     " is smaller than the crop " + std::to_string(h) + "x" + std::to_string(w));
  return crop(s, (s.image.height - h) / 2, (s.image.width - w) / 2, h, w);
}

// Per-image standardization to zero mean and unit variance.
inline FeatureMap<float> normalize(const GrayImage& img) {
  const std::size_t n = img.pixels.size();
  double mean = 0;
  for (auto v : img.pixels) mean += v;
  mean /= static_cast<double>(n);
  double var = 0;
  for (auto v : img.pixels) var += (v - mean) * (v - mean);
  const double sd = std::max(std::sqrt(var / static_cast<double>(n)), 1e-6);
  FeatureMap<float> out(1, 1, img.height, img.width);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>((img.pixels[i] - mean) / sd);
  return out;
}

inline GrayImage mask_image(const BinaryMask& m) {
  GrayImage g(m.height(), m.width());
  for (std::size_t i = 0; i < m.size(); ++i) g.pixels[i] = m.data()[i] ? 255 : 0;
  return g;
}

inline nlohmann::json to_json(const GenConfig& c) {
  return {{"seed", c.seed},
          {"num_subjects", c.num_subjects},
          {"slices_min", c.slices_min},
          {"slices_max", c.slices_max},
          {"height", c.height},
          {"width", c.width},
          {"grain", c.grain},
          {"control_min", c.control_min},
          {"control_max", c.control_max},
          {"walk_step", c.walk_step},
          {"distractors_min", c.distractors_min},
          {"distractors_max", c.distractors_max},
          {"dropout_probability", c.dropout_probability},
          {"bulge_fraction", c.bulge_fraction}};
}

// Writes PNGs and manifest.json; the manifest is written last, via a
// temporary file, so an interrupted run leaves no manifest.
inline void write_dataset(const std::filesystem::path& dir, const GenConfig& cfg, const std::vector<Volume>& volumes) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  nlohmann::json vols = nlohmann::json::array();
  for (const auto& v : volumes) {
    fs::create_directories(dir / v.subject_id, ec);
    if (ec) throw DataError("cannot create " + (dir / v.subject_id).string() + ": " + ec.message());
    nlohmann::json slices = nlohmann::json::array();
    for (const auto& s : v.slices) {
      char name[32];
      std::snprintf(name, sizeof name, "%03d", s.slice_index);
      const std::string img = v.subject_id + "/img_" + name + ".png";
      const std::string msk = v.subject_id + "/mask_" + name + ".png";
      write_png(dir / img, s.image);
      write_png(dir / msk, mask_image(s.mask));
      slices.push_back({{"image", img}, {"mask", msk}, {"index", s.slice_index}});
    }
    vols.push_back({{"subject_id", v.subject_id}, {"bulge", v.bulge}, {"slices", slices}});
  }
  const nlohmann::json manifest{{"format", "cntl-dataset-1"}, {"generator", to_json(cfg)}, {"volumes", vols}};
  const fs::path tmp = dir / "manifest.json.tmp";
  {
    std::ofstream os(tmp);
    os << manifest.dump(2) << "\n";
    if (!os) throw DataError("cannot write " + tmp.string());
  }
  fs::rename(tmp, dir / "manifest.json");
}

// Loads every slice listed in the manifest; missing or malformed files raise
// DataError naming the path.
inline std::vector<Volume> load_dataset(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  std::ifstream is(mpath);
  if (!is) throw DataError("missing manifest " + mpath.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  std::vector<Volume> out;
  try {
    for (const auto& v : j.at("volumes")) {
      Volume vol;
      vol.subject_id = v.at("subject_id").get<std::string>();
      vol.bulge = v.value("bulge", false);
      for (const auto& s : v.at("slices")) {
        ImageSample smp;
        smp.subject_id = vol.subject_id;
        smp.slice_index = s.at("index").get<int>();
        smp.image = read_png(dir / s.at("image").get<std::string>());
        const GrayImage m = read_png(dir / s.at("mask").get<std::string>());
        if (m.height != smp.image.height || m.width != smp.image.width)
          throw DataError("mask " + (dir / s.at("mask").get<std::string>()).string() + " does not match its image size");
        smp.mask = BinaryMask(m.height, m.width);
        for (std::size_t i = 0; i < m.pixels.size(); ++i) smp.mask.set(int(i / m.width), int(i % m.width), m.pixels[i] > 127);
        vol.slices.push_back(std::move(smp));
      }
      out.push_back(std::move(vol));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  if (out.empty()) throw DataError("manifest " + mpath.string() + " lists no volumes");
  return out;
}

}  // namespace cntl
