#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "phieat/backbone/backbone.hpp"
#include "phieat/synthgen/dataset.hpp"

namespace phieat::evalsuite {

struct SampleInfo {
  std::string material_id;
  std::string category;
  std::string geometry_id;
  std::string lighting_id;
};

// Frozen features for every render in a manifest: one normalized cls vector
// and a normalized patch grid per sample. Columns are unit within 1e-5.
struct FeatureArchive {
  backbone::BackboneConfig config;
  int grid = 0;  // patches per image side
  std::vector<SampleInfo> samples;
  Eigen::MatrixXf globals;  // D x N
  Eigen::MatrixXf patches;  // D x (N * grid^2), sample-major

  int patches_per_sample() const { return grid * grid; }
  void validate() const;  // shape consistency + unit-norm columns
};

// Frozen features for one held-out composite scene plus its patch-level
// ground truth (majority vote of the pixel mask per patch cell).
struct SceneFeatures {
  std::string image_path;
  int grid = 0;
  Eigen::MatrixXf patches;  // D x grid^2, unit columns
  std::vector<int> gt;      // region index per patch
  std::vector<std::string> part_material_ids;  // region index -> material
  std::vector<std::string> part_families;
};

// Normalized patch features of one encoded image, one unit column per patch
// in grid order.
Eigen::MatrixXf patch_features(const backbone::FeatureSet& features);

FeatureArchive embed_manifest(const backbone::BackboneConfig& cfg,
                              const backbone::ParamStore<float>& params,
                              const synthgen::Manifest& manifest);
std::vector<SceneFeatures> embed_scenes(const backbone::BackboneConfig& cfg,
                                        const backbone::ParamStore<float>& params,
                                        const synthgen::SceneIndex& scenes);

void save_archive(const std::string& path, const FeatureArchive& archive);
FeatureArchive load_archive(const std::string& path);
void save_scene_features(const std::string& path, const std::vector<SceneFeatures>& scenes);
std::vector<SceneFeatures> load_scene_features(const std::string& path);

// ---------------------------------------------------------------------------
// Evaluation kernels. All are pure functions of their inputs.

// Cosine of the query patch against every patch; map[query] == 1 exactly.
Eigen::VectorXf similarity_map(const Eigen::MatrixXf& patches, int query);

// mask = map >= threshold.
std::vector<uint8_t> select_material(const Eigen::VectorXf& map, float threshold = 0.5f);

struct SelectionMetrics {
  double l1 = 0;
  double iou = 0;
  double f1 = 0;
};

// l1 compares the clamped continuous map against the binary ground truth;
// IoU and F1 compare the thresholded mask against it. F1 = 2*IoU/(1+IoU) is
// asserted internally.
SelectionMetrics selection_metrics(const Eigen::VectorXf& map, const std::vector<uint8_t>& mask,
                                   const std::vector<int>& gt, int query_label);

struct KnnMetrics {
  double top1 = 0;
  double precision = 0;  // macro over classes present in the query labels
  double recall = 0;
  double f1 = 0;
};

struct KnnResult {
  std::vector<int> predictions;
  KnnMetrics metrics;
};

// Cosine-weighted k-NN vote. Neighbor ties at the k-th similarity break by
// gallery index; class-score ties break by smallest class index.
KnnResult knn_classify(const Eigen::MatrixXf& gallery, const std::vector<int>& gallery_labels,
                       const Eigen::MatrixXf& queries, const std::vector<int>& query_labels,
                       int k, int n_classes);

struct HammingScores {
  double illumination = 0;
  double geometry = 0;
};

// Mean pairwise prediction disagreement across lightings (fixed material and
// geometry) and across geometries (fixed material and lighting). Each
// material must cover its own full geometry x lighting grid; variant pools
// are per material, so the grids need not match across materials.
HammingScores robustness_hamming(const std::vector<SampleInfo>& samples,
                                 const std::vector<int>& predictions);

struct KmeansResult {
  std::vector<int> labels;
  int chosen_k = 0;
  double silhouette = 0;
  bool degenerate = false;  // all-identical points: K=2 with silhouette 0
};

// K-means over normalized columns with seeded k-means++ starts (10 restarts,
// 100 iterations each); K drawn from [k_lo, min(k_hi, P-1)] by best mean
// silhouette (ties prefer smaller K).
KmeansResult kmeans_segment(const Eigen::MatrixXf& points, int k_lo = 2, int k_hi = 12,
                            uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Protocols over archives.

// Leave-one-out classification of every sample against all others; labels are
// category indices in sorted order.
struct KnnProtocolResult {
  std::vector<std::string> classes;  // sorted category names
  std::vector<int> labels;           // per sample
  KnnResult result;
};
KnnProtocolResult knn_protocol(const FeatureArchive& archive, int k = 16);

// Mean selection quality over seeded queries: per scene, up to
// queries_per_scene queries drawn from distinct ground-truth regions when
// possible.
SelectionMetrics selection_protocol(const std::vector<SceneFeatures>& scenes, uint64_t seed,
                                    int queries_per_scene = 8);

struct SegmentationSummary {
  std::vector<int> chosen_k;              // per scene
  double mean_silhouette = 0;
  std::vector<std::vector<int>> labels;   // per scene patch labels
};
SegmentationSummary segmentation_protocol(const std::vector<SceneFeatures>& scenes,
                                          uint64_t seed);

struct EvalReport {
  bool has_selection = false, has_knn = false, has_robustness = false,
       has_segmentation = false;
  SelectionMetrics selection;
  KnnMetrics knn;
  HammingScores robustness;
  std::vector<int> segmentation_k;
  double mean_silhouette = 0;
};

std::string report_to_json(const EvalReport& report);

}  // namespace phieat::evalsuite
