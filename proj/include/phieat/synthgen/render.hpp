#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "phieat/core/image.hpp"
#include "phieat/synthgen/material.hpp"
#include "phieat/synthgen/scene_model.hpp"

namespace phieat::synthgen {

struct RenderSample {
  Image image;
  std::string material_id;
  std::string geometry_id;
  std::string lighting_id;
  double object_rotation = 0.0;
  double light_rotation = 0.0;
  uint64_t sample_seed = 0;
};

// Blinn-Phong exponent from roughness: 2/r^2 - 2, clamped to [2, 2048].
double shininess_from_roughness(double roughness);

// Orthographic shading of the material-displaced height field.
// Per pixel: ambient*albedo + sum over lights of
//   intensity * (max(0, n.l)*albedo + specular_strength*max(0, n.h)^shininess),
// normals by central differences (one-texel step) on geometry height plus
// height_amplitude-scaled material height, texture coordinates rotated by
// object_rotation, light directions rotated about z by light_rotation.
// Throws pairing-violation when the template does not list spec's family.
RenderSample render(const MaterialSpec& spec, const GeometryTemplate& tmpl,
                    const LightingCondition& lighting, double object_rotation,
                    double light_rotation, int resolution, uint64_t sample_seed);

struct SelectionScene {
  Image image;
  GrayImage material_mask;  // region index per pixel, indexes part_specs
  std::vector<MaterialSpec> part_specs;
  std::string geometry_id;
  std::string lighting_id;
};

// Seeded-Voronoi composite of 2..4 materials on one shared geometry and
// lighting; sites are resampled until every region covers at least 4% of the
// pixels. Throws invalid-argument outside 2..4 parts, pairing-violation when
// the template rejects any part's family.
SelectionScene make_selection_scene(const std::vector<MaterialSpec>& specs, uint64_t layout_seed,
                                    int resolution, const GeometryTemplate& tmpl,
                                    const LightingCondition& lighting);

// Convenience overload: picks a compatible template and lighting from the
// layout stream.
SelectionScene make_selection_scene(const std::vector<MaterialSpec>& specs, uint64_t layout_seed,
                                    int resolution);

}  // namespace phieat::synthgen
