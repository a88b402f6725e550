#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace phieat::synthgen {

enum class Family {
  checker,
  stripes,
  value_noise,
  cells,
  gradient_ramp,
  dots,
  marble_warp,
  brushed,
};

inline constexpr int kFamilyCount = 8;

const char* family_name(Family f);
Family family_from_name(const std::string& name);  // invalid-argument on unknown
const std::vector<Family>& all_families();

// Procedural recipe for one material instance. The category label is the
// family; every numeric field is drawn from a stream keyed on
// (family, instance_seed), so identical fields always bake identical maps.
//
// Instances of every family draw their two albedo colors from one shared
// palette pool: color identifies a palette slot, the pattern identifies the
// family. This keeps the category signal in the texture structure rather
// than in the histogram.
struct MaterialSpec {
  std::string material_id;
  Family family = Family::checker;
  std::array<float, 3> color_a{0, 0, 0};
  std::array<float, 3> color_b{1, 1, 1};
  float frequency = 2.0f;       // integer cycles per unit keeps maps tileable
  float warp_amplitude = 0.0f;  // marble/brushed coordinate distortion
  float height_amplitude = 0.0f;
  float roughness = 0.5f;
  float specular_strength = 0.0f;
  uint64_t instance_seed = 0;

  std::string category() const { return family_name(family); }
};

MaterialSpec make_material(Family family, uint64_t instance_seed);
MaterialSpec make_material(const std::string& family, uint64_t instance_seed);

// Continuous texture evaluation, periodic with period 1 in both axes.
std::array<float, 3> albedo_at(const MaterialSpec& spec, double u, double v);
float height_at(const MaterialSpec& spec, double u, double v);     // in [0,1]
float roughness_at(const MaterialSpec& spec, double u, double v);  // in [0.05,1]

struct MaterialMaps {
  int resolution = 0;
  std::vector<float> albedo;     // R*R*3
  std::vector<float> height;     // R*R
  std::vector<float> roughness;  // R*R
};

// resolution must be a power of two >= 16
MaterialMaps bake_maps(const MaterialSpec& spec, int resolution);

}  // namespace phieat::synthgen
