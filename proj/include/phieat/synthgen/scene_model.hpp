#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "phieat/synthgen/material.hpp"

namespace phieat::synthgen {

enum class HeightFn {
  flat,
  sine_ripples,
  gaussian_bumps,
  tilted_plane,
  crossed_waves,
  dome,
};

// Macrogeometry as a C1 height field over the unit square, paired with the
// material families it may carry.
struct GeometryTemplate {
  std::string geometry_id;
  HeightFn height_fn = HeightFn::flat;
  double amplitude = 0.0;
  double param = 0.0;  // per-kind shape parameter

  std::vector<Family> allowed_families;

  double height_at(double u, double v) const;
  bool allows(Family f) const;
};

// Two directional lights plus a constant ambient term.
struct LightingCondition {
  std::string lighting_id;
  std::array<double, 3> key_direction{0, 0, 1};
  double key_intensity = 1.0;
  double ambient = 0.1;
  std::array<double, 3> fill_direction{0, 0, 1};
  double fill_intensity = 0.0;
};

LightingCondition make_lighting(const std::string& id, std::array<double, 3> key_dir,
                                double key_intensity, double ambient,
                                std::array<double, 3> fill_dir, double fill_intensity);

// The six canonical macrogeometries with their family pairings.
const std::vector<GeometryTemplate>& standard_templates();
const GeometryTemplate& template_by_id(const std::string& id);

// Pool of eight lighting conditions; each material gets a subset.
const std::vector<LightingCondition>& standard_lightings();
const LightingCondition& lighting_by_id(const std::string& id);

}  // namespace phieat::synthgen
