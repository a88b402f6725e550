#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "phieat/core/image.hpp"
#include "phieat/core/rng.hpp"
#include "phieat/synthgen/dataset.hpp"

namespace phieat::views {

enum class CropKind { global, local };

struct CropSpec {
  int source_view_index = 0;  // which of the pair's two renders fed this crop
  CropKind kind = CropKind::global;
  double area_fraction = 1.0;            // the drawn value, inside the kind's range
  std::array<double, 4> crop_rect{0, 0, 1, 1};  // x, y, w, h in the unit square
  int output_size = 0;
};

struct ViewConfig {
  int global_size = 64;
  int local_size = 32;
  int globals_per_view = 2;
  int locals_per_view = 8;
  int patch_size = 8;
  double global_area_lo = 0.40, global_area_hi = 1.00;
  double local_area_lo = 0.10, local_area_hi = 0.40;
  double mask_probability = 0.5;
  double mask_lo = 0.10, mask_hi = 0.50;
  int pairs_per_batch = 32;
  // ablation switch: both "renders" of a pair are the same file, so crops are
  // the only source of variation
  bool single_render_pairs = false;
};

// In-memory PNG cache so repeated batch assembly never re-decodes files.
class RenderCache {
 public:
  explicit RenderCache(std::string root) : root_(std::move(root)) {}
  const Image& get(const std::string& rel_path);

 private:
  std::string root_;
  std::unordered_map<std::string, Image> images_;
};

// Axis-aligned crop of `rect` (normalized x,y,w,h) resized to out×out with
// bilinear interpolation; no photometric change of any kind.
Image crop_resize(const Image& src, const std::array<double, 4>& rect, int out);

// Two distinct renders of one material, uniformly drawn; they always differ
// in geometry or lighting because manifest paths are unique per combination.
// Throws insufficient-variants when the material has fewer than 2 samples.
std::pair<const synthgen::ManifestEntry*, const synthgen::ManifestEntry*> sample_pair(
    const synthgen::Manifest& manifest, const std::string& material_id, Rng& rng);

struct CropResult {
  CropSpec spec;
  Image image;
};

// 2 global + 8 local square crops (config-adjustable), globals first. Area
// fractions drawn uniformly within each kind's range; a drawn fraction of
// exactly 1 yields the identity rect.
std::vector<CropResult> multi_crop(const Image& image, const ViewConfig& cfg, int view_index,
                                   Rng& rng);

// Patch mask: all-false with probability (1 - mask_probability); otherwise
// ceil(r * num_patches) positions masked, r ~ U[mask_lo, mask_hi], positions
// uniform without replacement. Indexes the patch grid only.
std::vector<uint8_t> make_mask(int num_patches, const ViewConfig& cfg, Rng& rng);

struct BatchCrop {
  Image image;
  CropSpec spec;
  std::string material_id;
  int pair_index = 0;
  std::string source_path;          // render file identity
  std::vector<uint8_t> patch_mask;  // one flag per patch of the student grid
};

struct MultiCropBatch {
  std::vector<BatchCrop> global_crops;  // pairs * 2 views * globals_per_view
  std::vector<BatchCrop> local_crops;   // pairs * 2 views * locals_per_view
  int n_pairs = 0;
};

// All crops one pair contributes; keyed by (seed, step, pair_index) so batch
// assembly is order-independent and parallel-safe.
void append_pair_views(const synthgen::Manifest& manifest, RenderCache& cache,
                       const std::string& material_id, const ViewConfig& cfg, uint64_t seed,
                       uint64_t step, int pair_index, MultiCropBatch& out);

// Draws pairs_per_batch distinct materials for this step and assembles their
// crops. Requires at least pairs_per_batch materials in the manifest.
MultiCropBatch assemble_batch(const synthgen::Manifest& manifest, RenderCache& cache,
                              const ViewConfig& cfg, uint64_t seed, uint64_t step);

// Debug aid: tile the batch's crops into one PNG per crop kind.
void dump_batch(const MultiCropBatch& batch, const std::string& dir);

}  // namespace phieat::views
