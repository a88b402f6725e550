#include "phieat/synthgen/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "phieat/core/errors.hpp"
#include "phieat/core/image.hpp"
#include "phieat/core/rng.hpp"
#include "phieat/synthgen/scene_model.hpp"

namespace phieat::synthgen {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr uint64_t kMaterialTag = 0x6d617431;
constexpr uint64_t kPoseTag = 0x706f7365;
constexpr uint64_t kSceneTag = 0x7363656e;

std::string two_digits(int n) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%02d", n);
  return buf;
}

json manifest_json(const Manifest& m) {
  json samples = json::array();
  for (const auto& e : m.samples) {
    samples.push_back({{"path", e.path},
                       {"material_id", e.material_id},
                       {"family", e.family},
                       {"geometry_id", e.geometry_id},
                       {"lighting_id", e.lighting_id},
                       {"object_rotation", e.object_rotation},
                       {"light_rotation", e.light_rotation}});
  }
  return json{{"version", m.version}, {"seed", m.seed}, {"samples", std::move(samples)}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(bool(out), ErrorKind::io, "cannot write " + path.string());
  out << text;
  require(bool(out), ErrorKind::io, "short write to " + path.string());
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorKind::io, "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::vector<std::string> Manifest::material_ids() const {
  std::vector<std::string> ids;
  for (const auto& e : samples)
    if (std::find(ids.begin(), ids.end(), e.material_id) == ids.end())
      ids.push_back(e.material_id);
  return ids;
}

std::vector<const ManifestEntry*> Manifest::samples_of(const std::string& material_id) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : samples)
    if (e.material_id == material_id) out.push_back(&e);
  return out;
}

Manifest generate_dataset(const DatasetConfig& config) {
  require(!config.families.empty(), ErrorKind::config, "dataset needs at least one family");
  require(config.instances_per_family >= 1, ErrorKind::config, "instances_per_family < 1");
  require(config.geometries_per_material >= 1 && config.lightings_per_material >= 1,
          ErrorKind::config, "need at least one geometry and one lighting per material");
  require(!config.out_dir.empty(), ErrorKind::config, "dataset out_dir is empty");

  const auto& lightings = standard_lightings();
  require(config.lightings_per_material <= int(lightings.size()), ErrorKind::config,
          "lightings_per_material exceeds the lighting pool");

  fs::path root(config.out_dir);
  std::error_code ec;
  fs::create_directories(root / "renders", ec);
  fs::create_directories(root / "scenes", ec);
  require(fs::is_directory(root / "renders") && fs::is_directory(root / "scenes"), ErrorKind::io,
          "cannot create dataset directories under " + config.out_dir);

  Manifest manifest;
  manifest.seed = config.seed;
  manifest.root = root.string();

  struct Planned {
    MaterialSpec spec;
    const GeometryTemplate* tmpl;
    const LightingCondition* lighting;
    double object_rotation, light_rotation;
    std::string rel_path;
  };
  std::vector<Planned> plan;
  std::vector<MaterialSpec> all_specs;

  int material_index = 0;
  for (size_t fi = 0; fi < config.families.size(); ++fi) {
    Family family = config.families[fi];
    std::vector<const GeometryTemplate*> allowed;
    for (const auto& t : standard_templates())
      if (t.allows(family)) allowed.push_back(&t);
    require(config.geometries_per_material <= int(allowed.size()), ErrorKind::pairing_violation,
            std::string("family ") + std::string(family_name(family)) + " only fits " +
                std::to_string(allowed.size()) + " templates");

    for (int inst = 0; inst < config.instances_per_family; ++inst, ++material_index) {
      Rng draw = Rng::stream(config.seed, {kMaterialTag, fi, uint64_t(inst)});
      MaterialSpec spec = make_material(family, draw.next_u64());
      spec.material_id = std::string(family_name(family)) + "-i" + two_digits(inst);
      all_specs.push_back(spec);

      auto geo_pick = draw.sample_without_replacement(int(allowed.size()),
                                                      config.geometries_per_material);
      auto light_pick = draw.sample_without_replacement(int(lightings.size()),
                                                        config.lightings_per_material);
      for (int g : geo_pick) {
        for (int l : light_pick) {
          Rng pose = Rng::stream(config.seed,
                                 {kPoseTag, uint64_t(material_index), uint64_t(g), uint64_t(l)});
          Planned p;
          p.spec = spec;
          p.tmpl = allowed[g];
          p.lighting = &lightings[l];
          p.object_rotation = pose.uniform(0.0, 6.283185307179586);
          p.light_rotation = pose.uniform(0.0, 6.283185307179586);
          p.rel_path = "renders/" + spec.material_id + "/" + p.tmpl->geometry_id + "__" +
                       p.lighting->lighting_id + ".png";
          plan.push_back(std::move(p));
        }
      }
    }
  }

  for (const auto& p : plan) {
    fs::create_directories((root / p.rel_path).parent_path(), ec);
    RenderSample sample = render(p.spec, *p.tmpl, *p.lighting, p.object_rotation,
                                 p.light_rotation, config.resolution, config.seed);
    write_png((root / p.rel_path).string(), sample.image);
    manifest.samples.push_back({p.rel_path, p.spec.material_id, p.spec.category(),
                                p.tmpl->geometry_id, p.lighting->lighting_id, p.object_rotation,
                                p.light_rotation});
  }

  write_text(root / "manifest.json", manifest_to_json(manifest));

  // Held-out selection scenes: fresh material instances (distinct families per
  // scene) so the selection protocol never sees a training render.
  SceneIndex index;
  index.seed = config.seed;
  index.root = manifest.root;
  for (int s = 0; s < config.selection_scenes; ++s) {
    Rng pick = Rng::stream(config.seed, {kSceneTag, uint64_t(s)});
    int n_parts = 2 + int(pick.below(3));
    auto fam_idx = pick.sample_without_replacement(
        int(config.families.size()), std::min(n_parts, int(config.families.size())));
    std::vector<MaterialSpec> parts;
    for (size_t k = 0; k < fam_idx.size(); ++k) {
      MaterialSpec spec = make_material(config.families[fam_idx[k]], pick.next_u64());
      spec.material_id = std::string(family_name(spec.family)) + "-scene" + two_digits(s) + "-" +
                         std::to_string(k);
      parts.push_back(spec);
    }
    SelectionScene scene = make_selection_scene(parts, pick.next_u64(), config.resolution);

    SceneEntry entry;
    entry.image_path = "scenes/scene_" + two_digits(s) + ".png";
    entry.mask_path = "scenes/scene_" + two_digits(s) + ".mask.png";
    entry.geometry_id = scene.geometry_id;
    entry.lighting_id = scene.lighting_id;
    for (const auto& p : scene.part_specs) {
      entry.part_material_ids.push_back(p.material_id);
      entry.part_families.push_back(p.category());
    }
    write_png((root / entry.image_path).string(), scene.image);
    write_png((root / entry.mask_path).string(), scene.material_mask);
    index.scenes.push_back(std::move(entry));
  }

  json scenes_json{{"version", index.version}, {"seed", index.seed}, {"scenes", json::array()}};
  for (const auto& e : index.scenes)
    scenes_json["scenes"].push_back({{"image", e.image_path},
                                     {"mask", e.mask_path},
                                     {"geometry_id", e.geometry_id},
                                     {"lighting_id", e.lighting_id},
                                     {"part_material_ids", e.part_material_ids},
                                     {"part_families", e.part_families}});
  write_text(root / "scenes.json", scenes_json.dump(2) + "\n");

  return manifest;
}

std::string manifest_to_json(const Manifest& manifest) {
  return manifest_json(manifest).dump(2) + "\n";
}

Manifest load_manifest(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::io, "manifest parse failure at " + path + ": " + e.what());
  }
  Manifest m;
  try {
    m.version = j.at("version").get<int>();
    m.seed = j.at("seed").get<uint64_t>();
    for (const auto& s : j.at("samples")) {
      ManifestEntry e;
      e.path = s.at("path").get<std::string>();
      e.material_id = s.at("material_id").get<std::string>();
      e.family = s.at("family").get<std::string>();
      e.geometry_id = s.at("geometry_id").get<std::string>();
      e.lighting_id = s.at("lighting_id").get<std::string>();
      e.object_rotation = s.at("object_rotation").get<double>();
      e.light_rotation = s.at("light_rotation").get<double>();
      m.samples.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::io, "manifest schema mismatch at " + path + ": " + e.what());
  }
  m.root = fs::path(path).parent_path().string();
  return m;
}

SceneIndex load_scene_index(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::io, "scene index parse failure at " + path + ": " + e.what());
  }
  SceneIndex idx;
  try {
    idx.version = j.at("version").get<int>();
    idx.seed = j.at("seed").get<uint64_t>();
    for (const auto& s : j.at("scenes")) {
      SceneEntry e;
      e.image_path = s.at("image").get<std::string>();
      e.mask_path = s.at("mask").get<std::string>();
      e.geometry_id = s.at("geometry_id").get<std::string>();
      e.lighting_id = s.at("lighting_id").get<std::string>();
      e.part_material_ids = s.at("part_material_ids").get<std::vector<std::string>>();
      e.part_families = s.at("part_families").get<std::vector<std::string>>();
      idx.scenes.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::io, "scene index schema mismatch at " + path + ": " + e.what());
  }
  idx.root = fs::path(path).parent_path().string();
  return idx;
}

uint64_t manifest_hash(const Manifest& manifest) {
  const std::string text = manifest_to_json(manifest);
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace phieat::synthgen
