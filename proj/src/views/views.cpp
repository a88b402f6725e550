#include "phieat/views/views.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "phieat/core/errors.hpp"

namespace phieat::views {

namespace {

constexpr uint64_t kPairTag = 0x70616972;
constexpr uint64_t kViewTag = 0x76696577;

float sample_bilinear(const Image& img, double sy, double sx, int c) {
  // clamp-to-edge; callers stay inside the image except for half-texel rims
  double x = std::clamp(sx, 0.0, double(img.width - 1));
  double y = std::clamp(sy, 0.0, double(img.height - 1));
  int x0 = int(x), y0 = int(y);
  int x1 = std::min(x0 + 1, img.width - 1);
  int y1 = std::min(y0 + 1, img.height - 1);
  double fx = x - x0, fy = y - y0;
  double top = double(img.at(y0, x0, c)) * (1 - fx) + double(img.at(y0, x1, c)) * fx;
  double bot = double(img.at(y1, x0, c)) * (1 - fx) + double(img.at(y1, x1, c)) * fx;
  return float(top * (1 - fy) + bot * fy);
}

CropResult draw_crop(const Image& image, CropKind kind, double lo, double hi, int out_size,
                     int view_index, Rng& rng) {
  CropResult r;
  r.spec.source_view_index = view_index;
  r.spec.kind = kind;
  r.spec.output_size = out_size;
  r.spec.area_fraction = rng.uniform(lo, hi);
  double side = std::sqrt(r.spec.area_fraction);
  double x = rng.uniform(0.0, 1.0 - side);
  double y = rng.uniform(0.0, 1.0 - side);
  r.spec.crop_rect = {x, y, side, side};
  r.image = crop_resize(image, r.spec.crop_rect, out_size);
  return r;
}

}  // namespace

const Image& RenderCache::get(const std::string& rel_path) {
  auto it = images_.find(rel_path);
  if (it != images_.end()) return it->second;
  std::filesystem::path p = std::filesystem::path(root_) / rel_path;
  return images_.emplace(rel_path, read_png(p.string())).first->second;
}

Image crop_resize(const Image& src, const std::array<double, 4>& rect, int out) {
  require(out >= 1, ErrorKind::invalid_argument, "crop output size must be >= 1");
  require(rect[0] >= 0 && rect[1] >= 0 && rect[0] + rect[2] <= 1.0 + 1e-12 &&
              rect[1] + rect[3] <= 1.0 + 1e-12,
          ErrorKind::invalid_argument, "crop rect escapes the unit square");
  Image dst(out, out);
  for (int i = 0; i < out; ++i) {
    for (int j = 0; j < out; ++j) {
      // map output texel centers onto the rect's span of source texels
      double sy = (rect[1] + rect[3] * (i + 0.5) / out) * src.height - 0.5;
      double sx = (rect[0] + rect[2] * (j + 0.5) / out) * src.width - 0.5;
      for (int c = 0; c < 3; ++c) dst.at(i, j, c) = sample_bilinear(src, sy, sx, c);
    }
  }
  return dst;
}

std::pair<const synthgen::ManifestEntry*, const synthgen::ManifestEntry*> sample_pair(
    const synthgen::Manifest& manifest, const std::string& material_id, Rng& rng) {
  auto samples = manifest.samples_of(material_id);
  require(samples.size() >= 2, ErrorKind::insufficient_variants,
          material_id + " has " + std::to_string(samples.size()) +
              " render(s); pairing needs at least 2");
  uint64_t first = rng.below(samples.size());
  uint64_t second = rng.below(samples.size() - 1);
  if (second >= first) ++second;  // uniform over the remaining indices
  return {samples[first], samples[second]};
}

std::vector<CropResult> multi_crop(const Image& image, const ViewConfig& cfg, int view_index,
                                   Rng& rng) {
  require(image.height >= cfg.global_size && image.width >= cfg.global_size,
          ErrorKind::invalid_argument, "source image smaller than the global crop size");
  std::vector<CropResult> out;
  out.reserve(cfg.globals_per_view + cfg.locals_per_view);
  for (int i = 0; i < cfg.globals_per_view; ++i)
    out.push_back(draw_crop(image, CropKind::global, cfg.global_area_lo, cfg.global_area_hi,
                            cfg.global_size, view_index, rng));
  for (int i = 0; i < cfg.locals_per_view; ++i)
    out.push_back(draw_crop(image, CropKind::local, cfg.local_area_lo, cfg.local_area_hi,
                            cfg.local_size, view_index, rng));
  return out;
}

std::vector<uint8_t> make_mask(int num_patches, const ViewConfig& cfg, Rng& rng) {
  require(num_patches >= 4, ErrorKind::invalid_argument, "mask needs at least 4 patches");
  std::vector<uint8_t> mask(num_patches, 0);
  if (rng.uniform() >= cfg.mask_probability) return mask;
  double r = rng.uniform(cfg.mask_lo, cfg.mask_hi);
  int m = int(std::ceil(r * num_patches));
  for (int idx : rng.sample_without_replacement(num_patches, m)) mask[idx] = 1;
  return mask;
}

void append_pair_views(const synthgen::Manifest& manifest, RenderCache& cache,
                       const std::string& material_id, const ViewConfig& cfg, uint64_t seed,
                       uint64_t step, int pair_index, MultiCropBatch& out) {
  Rng rng = Rng::stream(seed, {kViewTag, step, uint64_t(pair_index)});
  auto [a, b] = sample_pair(manifest, material_id, rng);
  if (cfg.single_render_pairs) b = a;

  const int g_patches = (cfg.global_size / cfg.patch_size) * (cfg.global_size / cfg.patch_size);
  const int l_patches = (cfg.local_size / cfg.patch_size) * (cfg.local_size / cfg.patch_size);

  const synthgen::ManifestEntry* sources[2] = {a, b};
  for (int view = 0; view < 2; ++view) {
    const Image& img = cache.get(sources[view]->path);
    for (auto& crop : multi_crop(img, cfg, view, rng)) {
      BatchCrop bc;
      bc.image = std::move(crop.image);
      bc.spec = crop.spec;
      bc.material_id = material_id;
      bc.pair_index = pair_index;
      bc.source_path = sources[view]->path;
      bc.patch_mask =
          make_mask(crop.spec.kind == CropKind::global ? g_patches : l_patches, cfg, rng);
      (crop.spec.kind == CropKind::global ? out.global_crops : out.local_crops)
          .push_back(std::move(bc));
    }
  }
}

MultiCropBatch assemble_batch(const synthgen::Manifest& manifest, RenderCache& cache,
                              const ViewConfig& cfg, uint64_t seed, uint64_t step) {
  auto ids = manifest.material_ids();
  require(int(ids.size()) >= cfg.pairs_per_batch, ErrorKind::degenerate_batch,
          "manifest has fewer materials than pairs_per_batch");
  Rng pick = Rng::stream(seed, {kPairTag, step});
  auto chosen = pick.sample_without_replacement(int(ids.size()), cfg.pairs_per_batch);

  MultiCropBatch batch;
  batch.n_pairs = cfg.pairs_per_batch;
  batch.global_crops.reserve(size_t(cfg.pairs_per_batch) * 2 * cfg.globals_per_view);
  batch.local_crops.reserve(size_t(cfg.pairs_per_batch) * 2 * cfg.locals_per_view);
  for (int p = 0; p < cfg.pairs_per_batch; ++p)
    append_pair_views(manifest, cache, ids[chosen[p]], cfg, seed, step, p, batch);
  return batch;
}

void dump_batch(const MultiCropBatch& batch, const std::string& dir) {
  std::filesystem::create_directories(dir);
  auto tile = [&](const std::vector<BatchCrop>& crops, int size, const std::string& name) {
    if (crops.empty()) return;
    int per_row = 16;
    int rows = (int(crops.size()) + per_row - 1) / per_row;
    Image canvas(rows * size, per_row * size);
    for (size_t k = 0; k < crops.size(); ++k) {
      int oy = int(k) / per_row * size, ox = int(k) % per_row * size;
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          for (int c = 0; c < 3; ++c)
            canvas.at(oy + y, ox + x, c) = crops[k].image.at(y, x, c);
    }
    write_png((std::filesystem::path(dir) / name).string(), canvas);
  };
  tile(batch.global_crops, batch.global_crops.empty() ? 0 : batch.global_crops[0].spec.output_size,
       "globals.png");
  tile(batch.local_crops, batch.local_crops.empty() ? 0 : batch.local_crops[0].spec.output_size,
       "locals.png");
}

}  // namespace phieat::views
