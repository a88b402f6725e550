#include "phieat/synthgen/material.hpp"

#include <algorithm>
#include <cmath>

#include "phieat/core/errors.hpp"
#include "phieat/core/rng.hpp"

namespace phieat::synthgen {

namespace {

constexpr uint64_t kMaterialTag = 0x6d617445;
constexpr uint64_t kNoiseTag = 0x6e6f6973;
constexpr uint64_t kCellTag = 0x63656c6c;
constexpr double kTwoPi = 6.283185307179586476925286766559;

// Shared palette pool: every family draws from the same color pairs.
struct PalettePair {
  std::array<float, 3> a, b;
};
const PalettePair kPalettes[] = {
    {{0.78f, 0.16f, 0.14f}, {0.12f, 0.10f, 0.11f}},  // red / near-black
    {{0.16f, 0.32f, 0.72f}, {0.92f, 0.92f, 0.88f}},  // blue / off-white
    {{0.22f, 0.55f, 0.24f}, {0.45f, 0.30f, 0.15f}},  // green / brown
    {{0.88f, 0.76f, 0.20f}, {0.42f, 0.42f, 0.44f}},  // yellow / gray
    {{0.52f, 0.22f, 0.62f}, {0.90f, 0.52f, 0.16f}},  // purple / orange
    {{0.14f, 0.58f, 0.58f}, {0.93f, 0.88f, 0.76f}},  // teal / cream
    {{0.88f, 0.44f, 0.60f}, {0.12f, 0.16f, 0.38f}},  // pink / navy
    {{0.48f, 0.50f, 0.20f}, {0.82f, 0.76f, 0.64f}},  // olive / beige
};
constexpr int kPaletteCount = int(sizeof(kPalettes) / sizeof(kPalettes[0]));

float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

double wrap01(double x) {
  double w = x - std::floor(x);
  return w;
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

// Value at an integer lattice point of a periodic nx-by-ny lattice.
double lattice_value(uint64_t seed, int64_t ix, int64_t iy, int nx, int ny, uint64_t salt) {
  int64_t wx = ((ix % nx) + nx) % nx;
  int64_t wy = ((iy % ny) + ny) % ny;
  return Rng::stream(seed, {kNoiseTag, salt, uint64_t(wx), uint64_t(wy), uint64_t(nx), uint64_t(ny)})
      .uniform();
}

// Periodic value noise, smoothstep-interpolated. Distinct nx/ny give
// anisotropic streaks.
double value_noise(uint64_t seed, double u, double v, int nx, int ny, uint64_t salt) {
  double x = wrap01(u) * nx;
  double y = wrap01(v) * ny;
  int64_t ix = int64_t(std::floor(x));
  int64_t iy = int64_t(std::floor(y));
  double fx = smooth(x - double(ix));
  double fy = smooth(y - double(iy));
  double v00 = lattice_value(seed, ix, iy, nx, ny, salt);
  double v10 = lattice_value(seed, ix + 1, iy, nx, ny, salt);
  double v01 = lattice_value(seed, ix, iy + 1, nx, ny, salt);
  double v11 = lattice_value(seed, ix + 1, iy + 1, nx, ny, salt);
  return (v00 * (1 - fx) + v10 * fx) * (1 - fy) + (v01 * (1 - fx) + v11 * fx) * fy;
}

double fractal_noise(uint64_t seed, double u, double v, int n, uint64_t salt) {
  return (value_noise(seed, u, v, n, n, salt) + 0.5 * value_noise(seed, u, v, 2 * n, 2 * n, salt + 1)) /
         1.5;
}

// Periodic Worley distance: one jittered feature point per lattice cell;
// returns nearest-point distance scaled so values land roughly in [0,1].
double cell_distance(uint64_t seed, double u, double v, int n) {
  double x = wrap01(u) * n;
  double y = wrap01(v) * n;
  int64_t ix = int64_t(std::floor(x));
  int64_t iy = int64_t(std::floor(y));
  double best = 1e9;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      int64_t cx = ix + dx;
      int64_t cy = iy + dy;
      int64_t wx = ((cx % n) + n) % n;
      int64_t wy = ((cy % n) + n) % n;
      Rng r = Rng::stream(seed, {kCellTag, uint64_t(wx), uint64_t(wy), uint64_t(n)});
      double px = double(cx) + r.uniform();
      double py = double(cy) + r.uniform();
      double d2 = (x - px) * (x - px) + (y - py) * (y - py);
      best = std::min(best, d2);
    }
  }
  return std::min(1.0, std::sqrt(best));
}

std::array<float, 3> mix_color(const std::array<float, 3>& a, const std::array<float, 3>& b,
                               double t) {
  float tf = float(std::clamp(t, 0.0, 1.0));
  return {a[0] + (b[0] - a[0]) * tf, a[1] + (b[1] - a[1]) * tf, a[2] + (b[2] - a[2]) * tf};
}

// Pattern value in [0,1] driving both albedo mix and the height map.
double pattern_at(const MaterialSpec& s, double u, double v) {
  const int f = int(std::lround(s.frequency));
  switch (s.family) {
    case Family::checker: {
      int cx = int(std::floor(wrap01(u) * f));
      int cy = int(std::floor(wrap01(v) * f));
      return (cx + cy) % 2 == 0 ? 0.0 : 1.0;
    }
    case Family::stripes: {
      int cx = int(std::floor(wrap01(u) * f));
      return cx % 2 == 0 ? 0.0 : 1.0;
    }
    case Family::value_noise:
      return fractal_noise(s.instance_seed, u, v, f, 0);
    case Family::cells:
      return cell_distance(s.instance_seed, u, v, f);
    case Family::gradient_ramp:
      return 0.5 - 0.5 * std::cos(kTwoPi * f * wrap01(u));
    case Family::dots: {
      double x = wrap01(u) * f;
      double y = wrap01(v) * f;
      int64_t ix = int64_t(std::floor(x));
      int64_t iy = int64_t(std::floor(y));
      double inside = 0.0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          int64_t cx = ix + dx, cy = iy + dy;
          int64_t wx = ((cx % f) + f) % f;
          int64_t wy = ((cy % f) + f) % f;
          Rng r = Rng::stream(s.instance_seed, {kCellTag, 7, uint64_t(wx), uint64_t(wy)});
          double px = double(cx) + 0.3 + 0.4 * r.uniform();
          double py = double(cy) + 0.3 + 0.4 * r.uniform();
          double d = std::sqrt((x - px) * (x - px) + (y - py) * (y - py));
          // disc radius 0.28 cells with a one-tenth-cell soft edge
          double e = std::clamp((0.28 - d) / 0.1, 0.0, 1.0);
          inside = std::max(inside, smooth(e));
        }
      }
      return inside;
    }
    case Family::marble_warp: {
      double w = fractal_noise(s.instance_seed, u, v, std::max(2, f / 2), 3);
      return 0.5 + 0.5 * std::sin(kTwoPi * (f * wrap01(u) + s.warp_amplitude * w));
    }
    case Family::brushed: {
      // fine streaks elongated along u riding on coarse bands
      double streak = value_noise(s.instance_seed, u, v, f, 8 * f, 11);
      double band = 0.5 + 0.5 * std::sin(kTwoPi * (f * wrap01(v) + s.warp_amplitude * streak));
      return 0.65 * band + 0.35 * streak;
    }
  }
  return 0.0;
}

}  // namespace

const char* family_name(Family f) {
  switch (f) {
    case Family::checker: return "checker";
    case Family::stripes: return "stripes";
    case Family::value_noise: return "value-noise";
    case Family::cells: return "cells";
    case Family::gradient_ramp: return "gradient-ramp";
    case Family::dots: return "dots";
    case Family::marble_warp: return "marble-warp";
    case Family::brushed: return "brushed";
  }
  return "unknown";
}

Family family_from_name(const std::string& name) {
  for (Family f : all_families())
    if (name == family_name(f)) return f;
  fail(ErrorKind::invalid_argument, "unknown material family: " + name);
}

const std::vector<Family>& all_families() {
  static const std::vector<Family> fams = {
      Family::checker,     Family::stripes, Family::value_noise, Family::cells,
      Family::gradient_ramp, Family::dots,  Family::marble_warp, Family::brushed,
  };
  return fams;
}

MaterialSpec make_material(Family family, uint64_t instance_seed) {
  Rng r = Rng::stream(instance_seed, {kMaterialTag, uint64_t(family)});
  MaterialSpec s;
  s.family = family;
  s.instance_seed = instance_seed;
  s.material_id = std::string(family_name(family)) + "-s" + std::to_string(instance_seed);

  const PalettePair& pal = kPalettes[r.below(kPaletteCount)];
  for (int c = 0; c < 3; ++c) {
    s.color_a[c] = clamp01(pal.a[c] + float(r.uniform(-0.06, 0.06)));
    s.color_b[c] = clamp01(pal.b[c] + float(r.uniform(-0.06, 0.06)));
  }
  s.frequency = float(2 + int(r.below(5)));  // 2..6 cycles, integer for tiling
  s.warp_amplitude = float(r.uniform(0.4, 1.6));
  s.height_amplitude = float(r.uniform(0.01, 0.05));
  s.roughness = float(r.uniform(0.05, 1.0));
  s.specular_strength = float(r.uniform(0.05, 0.7));
  return s;
}

MaterialSpec make_material(const std::string& family, uint64_t instance_seed) {
  return make_material(family_from_name(family), instance_seed);
}

std::array<float, 3> albedo_at(const MaterialSpec& spec, double u, double v) {
  return mix_color(spec.color_a, spec.color_b, pattern_at(spec, u, v));
}

float height_at(const MaterialSpec& spec, double u, double v) {
  return float(std::clamp(pattern_at(spec, u, v), 0.0, 1.0));
}

float roughness_at(const MaterialSpec& spec, double u, double v) {
  double p = pattern_at(spec, u, v);
  return std::clamp(spec.roughness * float(0.85 + 0.3 * p), 0.05f, 1.0f);
}

MaterialMaps bake_maps(const MaterialSpec& spec, int resolution) {
  require(resolution >= 16 && (resolution & (resolution - 1)) == 0, ErrorKind::invalid_argument,
          "bake resolution must be a power of two >= 16, got " + std::to_string(resolution));
  MaterialMaps maps;
  maps.resolution = resolution;
  maps.albedo.resize(size_t(resolution) * resolution * 3);
  maps.height.resize(size_t(resolution) * resolution);
  maps.roughness.resize(size_t(resolution) * resolution);
  for (int y = 0; y < resolution; ++y) {
    for (int x = 0; x < resolution; ++x) {
      double u = (x + 0.5) / resolution;
      double v = (y + 0.5) / resolution;
      size_t i = size_t(y) * resolution + x;
      auto rgb = albedo_at(spec, u, v);
      maps.albedo[3 * i + 0] = rgb[0];
      maps.albedo[3 * i + 1] = rgb[1];
      maps.albedo[3 * i + 2] = rgb[2];
      maps.height[i] = spec.height_amplitude == 0.0f ? 0.0f : height_at(spec, u, v);
      maps.roughness[i] = roughness_at(spec, u, v);
    }
  }
  return maps;
}

}  // namespace phieat::synthgen
