#include "phieat/synthgen/scene_model.hpp"

#include <cmath>

#include "phieat/core/errors.hpp"

namespace phieat::synthgen {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kPi = 3.14159265358979323846;

std::array<double, 3> normalized(std::array<double, 3> v) {
  double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  require(n > 1e-12, ErrorKind::invalid_argument, "zero-length light direction");
  return {v[0] / n, v[1] / n, v[2] / n};
}
}  // namespace

double GeometryTemplate::height_at(double u, double v) const {
  switch (height_fn) {
    case HeightFn::flat:
      return 0.0;
    case HeightFn::sine_ripples: {
      // ripples along a tilted axis; param = axis angle
      double c = std::cos(param), s = std::sin(param);
      return amplitude * std::sin(kTwoPi * 2.5 * (u * c + v * s));
    }
    case HeightFn::gaussian_bumps: {
      static const double cx[3] = {0.30, 0.72, 0.52};
      static const double cy[3] = {0.34, 0.40, 0.78};
      double h = 0.0;
      const double s2 = 2.0 * param * param;
      for (int j = 0; j < 3; ++j) {
        double dx = u - cx[j], dy = v - cy[j];
        h += amplitude * std::exp(-(dx * dx + dy * dy) / s2);
      }
      return h;
    }
    case HeightFn::tilted_plane:
      return amplitude * (u + param * v);
    case HeightFn::crossed_waves:
      return amplitude * std::sin(kTwoPi * 2.0 * u) * std::sin(kTwoPi * 2.0 * v);
    case HeightFn::dome: {
      // cos^2 cap: zero slope at the rim keeps the field C1
      double dx = u - 0.5, dy = v - 0.5;
      double d = std::min(1.0, 2.0 * std::sqrt(dx * dx + dy * dy));
      double c = std::cos(0.5 * kPi * d);
      return amplitude * c * c;
    }
  }
  return 0.0;
}

bool GeometryTemplate::allows(Family f) const {
  for (Family g : allowed_families)
    if (g == f) return true;
  return false;
}

LightingCondition make_lighting(const std::string& id, std::array<double, 3> key_dir,
                                double key_intensity, double ambient,
                                std::array<double, 3> fill_dir, double fill_intensity) {
  require(key_intensity >= 0.0, ErrorKind::invalid_argument, "key intensity must be >= 0");
  require(fill_intensity >= 0.0, ErrorKind::invalid_argument, "fill intensity must be >= 0");
  require(ambient >= 0.0 && ambient <= 0.5, ErrorKind::invalid_argument,
          "ambient must be in [0, 0.5]");
  LightingCondition l;
  l.lighting_id = id;
  l.key_direction = normalized(key_dir);
  l.key_intensity = key_intensity;
  l.ambient = ambient;
  l.fill_direction = normalized(fill_dir);
  l.fill_intensity = fill_intensity;
  return l;
}

const std::vector<GeometryTemplate>& standard_templates() {
  using F = Family;
  static const std::vector<GeometryTemplate> t = [] {
    std::vector<GeometryTemplate> v;
    v.push_back({"flat", HeightFn::flat, 0.0, 0.0,
                 {F::checker, F::stripes, F::value_noise, F::cells, F::gradient_ramp, F::dots,
                  F::marble_warp, F::brushed}});
    v.push_back({"tilted-plane", HeightFn::tilted_plane, 0.35, 0.6,
                 {F::checker, F::stripes, F::value_noise, F::cells, F::gradient_ramp, F::dots,
                  F::marble_warp, F::brushed}});
    v.push_back({"sine-ripples", HeightFn::sine_ripples, 0.16, 0.5,
                 {F::stripes, F::value_noise, F::gradient_ramp, F::marble_warp, F::brushed}});
    v.push_back({"gaussian-bumps", HeightFn::gaussian_bumps, 0.30, 0.16,
                 {F::value_noise, F::cells, F::dots, F::marble_warp}});
    v.push_back({"crossed-waves", HeightFn::crossed_waves, 0.14, 0.0,
                 {F::checker, F::stripes, F::gradient_ramp, F::dots, F::brushed}});
    v.push_back({"dome", HeightFn::dome, 0.40, 0.0,
                 {F::checker, F::value_noise, F::cells, F::gradient_ramp, F::dots,
                  F::marble_warp}});
    return v;
  }();
  return t;
}

const GeometryTemplate& template_by_id(const std::string& id) {
  for (const auto& t : standard_templates())
    if (t.geometry_id == id) return t;
  fail(ErrorKind::invalid_argument, "unknown geometry template: " + id);
}

const std::vector<LightingCondition>& standard_lightings() {
  static const std::vector<LightingCondition> l = {
      make_lighting("L0", {0.0, 0.0, 1.0}, 1.00, 0.10, {0.8, 0.0, 0.6}, 0.25),
      make_lighting("L1", {0.6, 0.2, 0.75}, 1.35, 0.05, {-0.7, -0.3, 0.65}, 0.10),
      make_lighting("L2", {-0.55, 0.5, 0.67}, 0.70, 0.30, {0.4, -0.8, 0.45}, 0.40),
      make_lighting("L3", {0.3, -0.75, 0.59}, 1.10, 0.18, {-0.2, 0.9, 0.39}, 0.05),
      make_lighting("L4", {-0.8, -0.25, 0.55}, 1.50, 0.02, {0.9, 0.3, 0.31}, 0.30),
      make_lighting("L5", {0.15, 0.65, 0.74}, 0.55, 0.40, {-0.5, -0.6, 0.62}, 0.50),
      make_lighting("L6", {0.85, -0.4, 0.34}, 1.25, 0.08, {-0.85, 0.4, 0.34}, 0.45),
      make_lighting("L7", {-0.3, 0.2, 0.93}, 0.85, 0.25, {0.6, 0.7, 0.39}, 0.15),
  };
  return l;
}

const LightingCondition& lighting_by_id(const std::string& id) {
  for (const auto& l : standard_lightings())
    if (l.lighting_id == id) return l;
  fail(ErrorKind::invalid_argument, "unknown lighting condition: " + id);
}

}  // namespace phieat::synthgen
