#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "phieat/synthgen/material.hpp"
#include "phieat/synthgen/render.hpp"

namespace phieat::synthgen {

struct DatasetConfig {
  std::vector<Family> families = all_families();
  int instances_per_family = 8;
  int geometries_per_material = 4;  // drawn from the templates allowing the family
  int lightings_per_material = 4;   // drawn from the 8-light pool
  int resolution = 64;
  int selection_scenes = 32;  // held-out composites with ground-truth masks
  uint64_t seed = 0;
  std::string out_dir;
};

struct ManifestEntry {
  std::string path;  // relative to the dataset root
  std::string material_id;
  std::string family;
  std::string geometry_id;
  std::string lighting_id;
  double object_rotation = 0;
  double light_rotation = 0;
};

struct Manifest {
  int version = 1;
  uint64_t seed = 0;
  std::vector<ManifestEntry> samples;
  std::string root;  // directory manifest.json lives in; not serialized

  std::vector<std::string> material_ids() const;  // unique, in first-seen order
  std::vector<const ManifestEntry*> samples_of(const std::string& material_id) const;
};

// Scene ground truth: which material owns each mask region.
struct SceneEntry {
  std::string image_path;  // relative to root
  std::string mask_path;
  std::string geometry_id;
  std::string lighting_id;
  std::vector<std::string> part_material_ids;  // index = mask value
  std::vector<std::string> part_families;
};

struct SceneIndex {
  int version = 1;
  uint64_t seed = 0;
  std::vector<SceneEntry> scenes;
  std::string root;
};

// Renders every (material, geometry, lighting) triple under out_dir/renders/,
// writes out_dir/manifest.json, then composes held-out selection scenes under
// out_dir/scenes/ with out_dir/scenes.json. Pure function of the config: two
// runs with equal configs produce byte-identical files.
Manifest generate_dataset(const DatasetConfig& config);

Manifest load_manifest(const std::string& path);
SceneIndex load_scene_index(const std::string& path);

// FNV-1a over the canonical serialized manifest; equal configs hash equal.
uint64_t manifest_hash(const Manifest& manifest);

std::string manifest_to_json(const Manifest& manifest);

}  // namespace phieat::synthgen
