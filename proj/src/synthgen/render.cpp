#include "phieat/synthgen/render.hpp"

#include <algorithm>
#include <cmath>

#include "phieat/core/errors.hpp"
#include "phieat/core/parallel.hpp"
#include "phieat/core/rng.hpp"

namespace phieat::synthgen {

namespace {

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

Vec3 normalize(Vec3 v) {
  double n = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
  return {v.x / n, v.y / n, v.z / n};
}

double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

Vec3 rotate_z(Vec3 v, double angle) {
  double c = std::cos(angle), s = std::sin(angle);
  return {c * v.x - s * v.y, s * v.x + c * v.y, v.z};
}

// texture lookup coordinates: rotate about the image center
void rotate_uv(double u, double v, double angle, double& tu, double& tv) {
  double c = std::cos(angle), s = std::sin(angle);
  double du = u - 0.5, dv = v - 0.5;
  tu = 0.5 + c * du - s * dv;
  tv = 0.5 + s * du + c * dv;
}

double combined_height(const MaterialSpec& spec, const GeometryTemplate& tmpl, double u, double v,
                       double object_rotation) {
  double tu, tv;
  rotate_uv(u, v, object_rotation, tu, tv);
  return tmpl.height_at(u, v) + double(spec.height_amplitude) * double(height_at(spec, tu, tv));
}

}  // namespace

double shininess_from_roughness(double roughness) {
  double s = 2.0 / (roughness * roughness) - 2.0;
  return std::clamp(s, 2.0, 2048.0);
}

RenderSample render(const MaterialSpec& spec, const GeometryTemplate& tmpl,
                    const LightingCondition& lighting, double object_rotation,
                    double light_rotation, int resolution, uint64_t sample_seed) {
  require(tmpl.allows(spec.family), ErrorKind::pairing_violation,
          std::string(family_name(spec.family)) + " is not allowed on template " +
              tmpl.geometry_id);
  require(resolution >= 8, ErrorKind::invalid_argument, "render resolution too small");

  RenderSample out;
  out.image = Image(resolution, resolution);
  out.material_id = spec.material_id;
  out.geometry_id = tmpl.geometry_id;
  out.lighting_id = lighting.lighting_id;
  out.object_rotation = object_rotation;
  out.light_rotation = light_rotation;
  out.sample_seed = sample_seed;

  const Vec3 key = rotate_z({lighting.key_direction[0], lighting.key_direction[1],
                             lighting.key_direction[2]},
                            light_rotation);
  const Vec3 fill = rotate_z({lighting.fill_direction[0], lighting.fill_direction[1],
                              lighting.fill_direction[2]},
                             light_rotation);
  const Vec3 view{0, 0, 1};
  const Vec3 half_key = normalize({key.x + view.x, key.y + view.y, key.z + view.z});
  const Vec3 half_fill = normalize({fill.x + view.x, fill.y + view.y, fill.z + view.z});
  const double step = 1.0 / resolution;

  parallel_chunks(resolution, 16, [&](int y0, int y1, int) {
    for (int y = y0; y < y1; ++y) {
      for (int x = 0; x < resolution; ++x) {
        double u = (x + 0.5) * step;
        double v = (y + 0.5) * step;

        double hl = combined_height(spec, tmpl, u - step, v, object_rotation);
        double hr = combined_height(spec, tmpl, u + step, v, object_rotation);
        double hd = combined_height(spec, tmpl, u, v - step, object_rotation);
        double hu = combined_height(spec, tmpl, u, v + step, object_rotation);
        Vec3 n = normalize({-(hr - hl) / (2 * step), -(hu - hd) / (2 * step), 1.0});

        double tu, tv;
        rotate_uv(u, v, object_rotation, tu, tv);
        auto alb = albedo_at(spec, tu, tv);
        double shin = shininess_from_roughness(roughness_at(spec, tu, tv));

        double diffuse = lighting.key_intensity * std::max(0.0, dot(n, key)) +
                         lighting.fill_intensity * std::max(0.0, dot(n, fill));
        double spec_term =
            double(spec.specular_strength) *
            (lighting.key_intensity * std::pow(std::max(0.0, dot(n, half_key)), shin) +
             lighting.fill_intensity * std::pow(std::max(0.0, dot(n, half_fill)), shin));

        for (int c = 0; c < 3; ++c) {
          double val = (lighting.ambient + diffuse) * double(alb[c]) + spec_term;
          out.image.at(y, x, c) = float(std::clamp(val, 0.0, 1.0));
        }
      }
    }
  });
  return out;
}

SelectionScene make_selection_scene(const std::vector<MaterialSpec>& specs, uint64_t layout_seed,
                                    int resolution, const GeometryTemplate& tmpl,
                                    const LightingCondition& lighting) {
  require(specs.size() >= 2 && specs.size() <= 4, ErrorKind::invalid_argument,
          "selection scene needs 2..4 materials, got " + std::to_string(specs.size()));
  for (const auto& s : specs)
    require(tmpl.allows(s.family), ErrorKind::pairing_violation,
            std::string(family_name(s.family)) + " is not allowed on template " +
                tmpl.geometry_id);

  const int n = int(specs.size());
  const int total = resolution * resolution;
  const int min_pixels = int(std::ceil(0.04 * total));

  Rng rng = Rng::stream(layout_seed, {0x73636e65, uint64_t(n)});
  std::vector<double> sx(n), sy(n);
  GrayImage mask(resolution, resolution);

  // resample Voronoi sites until every region holds >= 4% of the pixels
  bool ok = false;
  for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
    for (int i = 0; i < n; ++i) {
      sx[i] = rng.uniform(0.1, 0.9);
      sy[i] = rng.uniform(0.1, 0.9);
    }
    std::vector<int> counts(n, 0);
    for (int y = 0; y < resolution; ++y) {
      for (int x = 0; x < resolution; ++x) {
        double u = (x + 0.5) / resolution;
        double v = (y + 0.5) / resolution;
        int best = 0;
        double bd = 1e18;
        for (int i = 0; i < n; ++i) {
          double d = (u - sx[i]) * (u - sx[i]) + (v - sy[i]) * (v - sy[i]);
          if (d < bd) {
            bd = d;
            best = i;
          }
        }
        mask.at(y, x) = uint8_t(best);
        ++counts[best];
      }
    }
    ok = *std::min_element(counts.begin(), counts.end()) >= min_pixels;
  }
  require(ok, ErrorKind::invalid_argument, "could not place Voronoi sites with 4% area floor");

  Rng rot = Rng::stream(layout_seed, {0x726f7473});
  const double obj_rot = rot.uniform(0.0, 6.283185307179586);
  const double light_rot = rot.uniform(0.0, 6.283185307179586);

  SelectionScene scene;
  scene.material_mask = mask;
  scene.part_specs = specs;
  scene.geometry_id = tmpl.geometry_id;
  scene.lighting_id = lighting.lighting_id;
  scene.image = Image(resolution, resolution);

  std::vector<Image> parts;
  parts.reserve(n);
  for (int i = 0; i < n; ++i)
    parts.push_back(
        render(specs[i], tmpl, lighting, obj_rot, light_rot, resolution, layout_seed).image);
  for (int y = 0; y < resolution; ++y)
    for (int x = 0; x < resolution; ++x)
      for (int c = 0; c < 3; ++c) scene.image.at(y, x, c) = parts[mask.at(y, x)].at(y, x, c);
  return scene;
}

SelectionScene make_selection_scene(const std::vector<MaterialSpec>& specs, uint64_t layout_seed,
                                    int resolution) {
  // pick a template compatible with every part, then a lighting
  Rng pick = Rng::stream(layout_seed, {0x7363706b});
  std::vector<const GeometryTemplate*> ok;
  for (const auto& t : standard_templates()) {
    bool all = true;
    for (const auto& s : specs) all = all && t.allows(s.family);
    if (all) ok.push_back(&t);
  }
  require(!ok.empty(), ErrorKind::pairing_violation,
          "no geometry template accepts every material in the scene");
  const GeometryTemplate& tmpl = *ok[pick.below(ok.size())];
  const auto& pool = standard_lightings();
  const LightingCondition& lighting = pool[pick.below(pool.size())];
  return make_selection_scene(specs, layout_seed, resolution, tmpl, lighting);
}

}  // namespace phieat::synthgen
