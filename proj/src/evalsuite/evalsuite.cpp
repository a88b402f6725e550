#include "phieat/evalsuite/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <set>
#include <unordered_map>
#include <utility>

#include <json.hpp>

#include "phieat/core/errors.hpp"
#include "phieat/core/image.hpp"
#include "phieat/core/rng.hpp"
#include "phieat/core/tensor_file.hpp"

namespace phieat::evalsuite {
namespace {

using nlohmann::json;

constexpr uint64_t kQueryTag = 0x71756572;
constexpr uint64_t kKmeansTag = 0x6b6d6e73;
constexpr uint64_t kSegmentTag = 0x73656774;

void normalize_column(Eigen::MatrixXf& m, Eigen::Index col) {
  double sq = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) sq += double(m(r, col)) * double(m(r, col));
  require(sq > 0, ErrorKind::numeric, "cannot normalize a zero feature vector");
  const float inv = float(1.0 / std::sqrt(sq));
  m.col(col) *= inv;
}

std::string join(const std::string& root, const std::string& rel) {
  return (std::filesystem::path(root) / rel).string();
}

// Majority mask value per patch cell; ties go to the smallest region index.
std::vector<int> pool_mask(const GrayImage& mask, int grid_rows, int grid_cols, int n_regions) {
  require(grid_rows > 0 && grid_cols > 0, ErrorKind::invalid_argument, "empty patch grid");
  require(mask.height % grid_rows == 0 && mask.width % grid_cols == 0, ErrorKind::shape,
          "mask size is not a multiple of the patch grid");
  const int ph = mask.height / grid_rows, pw = mask.width / grid_cols;
  std::vector<int> gt(size_t(grid_rows) * grid_cols, 0);
  std::vector<int> counts(size_t(n_regions), 0);
  for (int gy = 0; gy < grid_rows; ++gy) {
    for (int gx = 0; gx < grid_cols; ++gx) {
      std::fill(counts.begin(), counts.end(), 0);
      for (int y = gy * ph; y < (gy + 1) * ph; ++y) {
        for (int x = gx * pw; x < (gx + 1) * pw; ++x) {
          const int v = mask.at(y, x);
          require(v < n_regions, ErrorKind::io, "mask value exceeds the region table");
          ++counts[size_t(v)];
        }
      }
      int best = 0;
      for (int r = 1; r < n_regions; ++r) {
        if (counts[size_t(r)] > counts[size_t(best)]) best = r;
      }
      gt[size_t(gy) * grid_cols + gx] = best;
    }
  }
  return gt;
}

std::vector<float> to_vec(const Eigen::MatrixXf& m) {
  return std::vector<float>(m.data(), m.data() + m.size());
}

Eigen::MatrixXf from_array(const NamedArray& a) {
  const std::vector<float> v = unpack_f32(a);
  Eigen::MatrixXf m(a.rows, a.cols);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

// Cosine in double with a fixed accumulation order, so rankings do not hinge
// on BLAS kernel rounding.
double ddot(const Eigen::MatrixXf& a, Eigen::Index i, const Eigen::MatrixXf& b, Eigen::Index j) {
  double s = 0;
  for (Eigen::Index r = 0; r < a.rows(); ++r) s += double(a(r, i)) * double(b(r, j));
  return s;
}

// Shared k-NN scoring: rank candidates by (-similarity, index), take k, and
// vote with raw cosine weights. Class ties resolve to the smallest index.
int vote(const std::vector<std::pair<double, int>>& ranked, int k,
         const std::vector<int>& gallery_labels, int n_classes) {
  std::vector<double> scores(size_t(n_classes), 0.0);
  for (int i = 0; i < k; ++i) {
    const int g = ranked[size_t(i)].second;
    scores[size_t(gallery_labels[size_t(g)])] += ranked[size_t(i)].first;
  }
  int best = 0;
  for (int c = 1; c < n_classes; ++c) {
    if (scores[size_t(c)] > scores[size_t(best)]) best = c;
  }
  return best;
}

KnnMetrics classification_metrics(const std::vector<int>& predictions,
                                  const std::vector<int>& labels, int n_classes) {
  KnnMetrics m;
  const size_t n = labels.size();
  size_t hits = 0;
  std::vector<int64_t> tp(size_t(n_classes), 0), fp(size_t(n_classes), 0),
      fn(size_t(n_classes), 0), support(size_t(n_classes), 0);
  for (size_t i = 0; i < n; ++i) {
    ++support[size_t(labels[i])];
    if (predictions[i] == labels[i]) {
      ++hits;
      ++tp[size_t(labels[i])];
    } else {
      ++fp[size_t(predictions[i])];
      ++fn[size_t(labels[i])];
    }
  }
  m.top1 = double(hits) / double(n);
  // Macro averages run over classes present in the ground truth; a class the
  // classifier never predicts contributes zero precision rather than NaN.
  int present = 0;
  double sp = 0, sr = 0, sf = 0;
  for (int c = 0; c < n_classes; ++c) {
    if (support[size_t(c)] == 0) continue;
    ++present;
    const double denom_p = double(tp[size_t(c)] + fp[size_t(c)]);
    const double p = denom_p > 0 ? double(tp[size_t(c)]) / denom_p : 0.0;
    const double r = double(tp[size_t(c)]) / double(tp[size_t(c)] + fn[size_t(c)]);
    sp += p;
    sr += r;
    sf += (p + r) > 0 ? 2.0 * p * r / (p + r) : 0.0;
  }
  require(present > 0, ErrorKind::degenerate_batch, "no classes present in the query labels");
  m.precision = sp / present;
  m.recall = sr / present;
  m.f1 = sf / present;
  return m;
}

double sq_dist(const Eigen::MatrixXd& a, Eigen::Index i, const Eigen::MatrixXd& b,
               Eigen::Index j) {
  return (a.col(i) - b.col(j)).squaredNorm();
}

Eigen::MatrixXd kmeanspp(const Eigen::MatrixXd& pts, int k, Rng& rng) {
  const Eigen::Index P = pts.cols();
  Eigen::MatrixXd centers(pts.rows(), k);
  centers.col(0) = pts.col(Eigen::Index(rng.below(uint64_t(P))));
  Eigen::VectorXd d2 = Eigen::VectorXd::Constant(P, std::numeric_limits<double>::infinity());
  for (int c = 1; c < k; ++c) {
    for (Eigen::Index i = 0; i < P; ++i)
      d2[i] = std::min(d2[i], sq_dist(pts, i, centers, c - 1));
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0) {
      double target = rng.uniform() * total, acc = 0;
      for (Eigen::Index i = 0; i < P; ++i) {
        acc += d2[i];
        if (acc >= target) {
          pick = i;
          break;
        }
        pick = i;  // rounding may leave acc just below target at the end
      }
    } else {
      pick = Eigen::Index(rng.below(uint64_t(P)));
    }
    centers.col(c) = pts.col(pick);
  }
  return centers;
}

struct LloydResult {
  std::vector<int> labels;
  double sse = 0;
};

LloydResult lloyd(const Eigen::MatrixXd& pts, Eigen::MatrixXd centers, int max_iters) {
  const Eigen::Index P = pts.cols();
  const int k = int(centers.cols());
  std::vector<int> labels(size_t(P), -1);
  for (int it = 0; it < max_iters; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < P; ++i) {
      int best = 0;
      double bd = sq_dist(pts, i, centers, 0);
      for (int c = 1; c < k; ++c) {
        const double d = sq_dist(pts, i, centers, c);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (labels[size_t(i)] != best) {
        labels[size_t(i)] = best;
        changed = true;
      }
    }
    if (!changed) break;
    centers.setZero();
    std::vector<int64_t> counts(size_t(k), 0);
    for (Eigen::Index i = 0; i < P; ++i) {
      centers.col(labels[size_t(i)]) += pts.col(i);
      ++counts[size_t(labels[size_t(i)])];
    }
    std::vector<char> claimed(size_t(P), 0);
    for (int c = 0; c < k; ++c) {
      if (counts[size_t(c)] > 0) {
        centers.col(c) /= double(counts[size_t(c)]);
        continue;
      }
      // Empty cluster: restart it at the unclaimed point farthest from its
      // current center (ties to the smallest index).
      Eigen::Index far = -1;
      double fd = -1;
      for (Eigen::Index i = 0; i < P; ++i) {
        if (claimed[size_t(i)]) continue;
        const double d = sq_dist(pts, i, centers, labels[size_t(i)]);
        if (d > fd) {
          fd = d;
          far = i;
        }
      }
      centers.col(c) = pts.col(far);
      claimed[size_t(far)] = 1;
    }
  }
  LloydResult out;
  out.labels = std::move(labels);
  for (Eigen::Index i = 0; i < P; ++i)
    out.sse += sq_dist(pts, i, centers, out.labels[size_t(i)]);
  return out;
}

double mean_silhouette(const Eigen::MatrixXd& pts, const std::vector<int>& labels, int k) {
  const Eigen::Index P = pts.cols();
  std::vector<int64_t> counts(size_t(k), 0);
  for (int l : labels) ++counts[size_t(l)];
  double total = 0;
  for (Eigen::Index i = 0; i < P; ++i) {
    const int own = labels[size_t(i)];
    if (counts[size_t(own)] <= 1) continue;  // singleton: s(i) = 0
    std::vector<double> sums(size_t(k), 0.0);
    for (Eigen::Index j = 0; j < P; ++j) {
      if (j == i) continue;
      sums[size_t(labels[size_t(j)])] += std::sqrt(sq_dist(pts, i, pts, j));
    }
    const double a = sums[size_t(own)] / double(counts[size_t(own)] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      if (c == own || counts[size_t(c)] == 0) continue;
      b = std::min(b, sums[size_t(c)] / double(counts[size_t(c)]));
    }
    const double denom = std::max(a, b);
    total += denom > 0 ? (b - a) / denom : 0.0;
  }
  return total / double(P);
}

json sample_to_json(const SampleInfo& s) {
  return json{{"material_id", s.material_id},
              {"category", s.category},
              {"geometry_id", s.geometry_id},
              {"lighting_id", s.lighting_id}};
}

SampleInfo sample_from_json(const json& j) {
  SampleInfo s;
  s.material_id = j.at("material_id").get<std::string>();
  s.category = j.at("category").get<std::string>();
  s.geometry_id = j.at("geometry_id").get<std::string>();
  s.lighting_id = j.at("lighting_id").get<std::string>();
  return s;
}

}  // namespace

Eigen::MatrixXf patch_features(const backbone::FeatureSet& fs) {
  const int P = fs.grid_rows * fs.grid_cols;
  Eigen::MatrixXf m(fs.dim, P);
  for (int p = 0; p < P; ++p) {
    for (int d = 0; d < fs.dim; ++d) m(d, p) = fs.patches[size_t(p) * fs.dim + d];
    normalize_column(m, p);
  }
  return m;
}

void FeatureArchive::validate() const {
  const Eigen::Index N = Eigen::Index(samples.size());
  require(N > 0, ErrorKind::invalid_argument, "empty feature archive");
  require(grid > 0, ErrorKind::shape, "archive patch grid must be positive");
  require(globals.cols() == N, ErrorKind::shape, "global count does not match sample count");
  require(patches.cols() == N * patches_per_sample(), ErrorKind::shape,
          "patch count does not match sample count");
  require(globals.rows() == patches.rows(), ErrorKind::shape,
          "global and patch feature widths differ");
  auto check_unit = [](const Eigen::MatrixXf& m, const char* what) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      double sq = 0;
      for (Eigen::Index r = 0; r < m.rows(); ++r) sq += double(m(r, c)) * double(m(r, c));
      require(std::abs(std::sqrt(sq) - 1.0) <= 1e-5, ErrorKind::numeric, what);
    }
  };
  check_unit(globals, "global feature is not unit norm");
  check_unit(patches, "patch feature is not unit norm");
}

FeatureArchive embed_manifest(const backbone::BackboneConfig& cfg,
                              const backbone::ParamStore<float>& params,
                              const synthgen::Manifest& manifest) {
  require(!manifest.samples.empty(), ErrorKind::invalid_argument, "manifest has no samples");
  FeatureArchive archive;
  archive.config = cfg;
  const Eigen::Index N = Eigen::Index(manifest.samples.size());
  archive.samples.reserve(size_t(N));
  for (Eigen::Index i = 0; i < N; ++i) {
    const auto& e = manifest.samples[size_t(i)];
    const Image img = read_png(join(manifest.root, e.path));
    const backbone::FeatureSet fs = backbone::encode(img, params, cfg);
    require(fs.grid_rows == fs.grid_cols, ErrorKind::shape, "expected a square patch grid");
    if (i == 0) {
      archive.grid = fs.grid_rows;
      archive.globals.resize(fs.dim, N);
      archive.patches.resize(fs.dim, N * archive.patches_per_sample());
    }
    require(fs.grid_rows == archive.grid && fs.dim == archive.globals.rows(), ErrorKind::shape,
            "samples disagree on feature shape");
    for (int d = 0; d < fs.dim; ++d) archive.globals(d, i) = fs.cls[size_t(d)];
    normalize_column(archive.globals, i);
    archive.patches.middleCols(i * archive.patches_per_sample(), archive.patches_per_sample()) =
        patch_features(fs);
    archive.samples.push_back({e.material_id, e.family, e.geometry_id, e.lighting_id});
  }
  archive.validate();
  return archive;
}

std::vector<SceneFeatures> embed_scenes(const backbone::BackboneConfig& cfg,
                                        const backbone::ParamStore<float>& params,
                                        const synthgen::SceneIndex& scenes) {
  std::vector<SceneFeatures> out;
  out.reserve(scenes.scenes.size());
  for (const auto& entry : scenes.scenes) {
    const Image img = read_png(join(scenes.root, entry.image_path));
    const GrayImage mask = read_png_gray(join(scenes.root, entry.mask_path));
    require(mask.height == img.height && mask.width == img.width, ErrorKind::shape,
            "scene mask size does not match the image");
    const backbone::FeatureSet fs = backbone::encode(img, params, cfg);
    require(fs.grid_rows == fs.grid_cols, ErrorKind::shape, "expected a square patch grid");
    SceneFeatures sf;
    sf.image_path = entry.image_path;
    sf.grid = fs.grid_rows;
    sf.patches = patch_features(fs);
    sf.gt = pool_mask(mask, fs.grid_rows, fs.grid_cols, int(entry.part_material_ids.size()));
    sf.part_material_ids = entry.part_material_ids;
    sf.part_families = entry.part_families;
    out.push_back(std::move(sf));
  }
  return out;
}

void save_archive(const std::string& path, const FeatureArchive& archive) {
  archive.validate();
  json meta;
  meta["kind"] = "feature_archive";
  meta["format"] = 1;
  meta["backbone"] = json::parse(backbone::config_to_json(archive.config));
  meta["grid"] = archive.grid;
  json samples = json::array();
  for (const auto& s : archive.samples) samples.push_back(sample_to_json(s));
  meta["samples"] = std::move(samples);
  TensorFile tf;
  tf.meta_json = meta.dump();
  tf.arrays.push_back(
      pack_f32("globals", to_vec(archive.globals), archive.globals.rows(), archive.globals.cols()));
  tf.arrays.push_back(
      pack_f32("patches", to_vec(archive.patches), archive.patches.rows(), archive.patches.cols()));
  write_tensor_file(path, tf);
}

FeatureArchive load_archive(const std::string& path) {
  const TensorFile tf = read_tensor_file(path);
  json meta;
  try {
    meta = json::parse(tf.meta_json);
  } catch (const json::exception& e) {
    fail(ErrorKind::io, std::string("bad archive metadata: ") + e.what());
  }
  require(meta.value("kind", "") == "feature_archive", ErrorKind::io,
          "file is not a feature archive");
  require(meta.value("format", 0) == 1, ErrorKind::io, "unknown feature archive format");
  FeatureArchive archive;
  archive.config = backbone::config_from_json(meta.at("backbone").dump());
  archive.grid = meta.at("grid").get<int>();
  for (const auto& j : meta.at("samples")) archive.samples.push_back(sample_from_json(j));
  archive.globals = from_array(tf.find("globals"));
  archive.patches = from_array(tf.find("patches"));
  archive.validate();
  return archive;
}

void save_scene_features(const std::string& path, const std::vector<SceneFeatures>& scenes) {
  json meta;
  meta["kind"] = "scene_features";
  meta["format"] = 1;
  json list = json::array();
  TensorFile tf;
  for (size_t i = 0; i < scenes.size(); ++i) {
    const SceneFeatures& s = scenes[i];
    list.push_back(json{{"image_path", s.image_path},
                        {"grid", s.grid},
                        {"gt", s.gt},
                        {"part_material_ids", s.part_material_ids},
                        {"part_families", s.part_families}});
    tf.arrays.push_back(pack_f32("patches." + std::to_string(i), to_vec(s.patches),
                                 s.patches.rows(), s.patches.cols()));
  }
  meta["scenes"] = std::move(list);
  tf.meta_json = meta.dump();
  write_tensor_file(path, tf);
}

std::vector<SceneFeatures> load_scene_features(const std::string& path) {
  const TensorFile tf = read_tensor_file(path);
  json meta;
  try {
    meta = json::parse(tf.meta_json);
  } catch (const json::exception& e) {
    fail(ErrorKind::io, std::string("bad scene feature metadata: ") + e.what());
  }
  require(meta.value("kind", "") == "scene_features", ErrorKind::io,
          "file is not a scene feature archive");
  require(meta.value("format", 0) == 1, ErrorKind::io, "unknown scene feature format");
  std::vector<SceneFeatures> out;
  size_t i = 0;
  for (const auto& j : meta.at("scenes")) {
    SceneFeatures s;
    s.image_path = j.at("image_path").get<std::string>();
    s.grid = j.at("grid").get<int>();
    s.gt = j.at("gt").get<std::vector<int>>();
    s.part_material_ids = j.at("part_material_ids").get<std::vector<std::string>>();
    s.part_families = j.at("part_families").get<std::vector<std::string>>();
    s.patches = from_array(tf.find("patches." + std::to_string(i)));
    require(s.patches.cols() == Eigen::Index(s.gt.size()), ErrorKind::shape,
            "scene patch count does not match its ground truth");
    out.push_back(std::move(s));
    ++i;
  }
  return out;
}

Eigen::VectorXf similarity_map(const Eigen::MatrixXf& patches, int query) {
  require(patches.cols() > 0, ErrorKind::invalid_argument, "no patches to compare");
  require(query >= 0 && query < patches.cols(), ErrorKind::invalid_argument,
          "query patch index out of range");
  Eigen::VectorXf map = patches.transpose() * patches.col(query);
  map[query] = 1.0f;  // self-cosine is 1 by definition; rounding must not leak
  return map;
}

std::vector<uint8_t> select_material(const Eigen::VectorXf& map, float threshold) {
  std::vector<uint8_t> mask(size_t(map.size()), 0);
  for (Eigen::Index i = 0; i < map.size(); ++i) mask[size_t(i)] = map[i] >= threshold ? 1 : 0;
  return mask;
}

SelectionMetrics selection_metrics(const Eigen::VectorXf& map, const std::vector<uint8_t>& mask,
                                   const std::vector<int>& gt, int query_label) {
  const size_t P = gt.size();
  require(P > 0, ErrorKind::invalid_argument, "empty ground truth");
  require(size_t(map.size()) == P && mask.size() == P, ErrorKind::shape,
          "similarity map, mask, and ground truth sizes differ");
  SelectionMetrics out;
  int64_t tp = 0, fp = 0, fn = 0;
  for (size_t i = 0; i < P; ++i) {
    const bool truth = gt[i] == query_label;
    const double clamped = std::clamp(double(map[Eigen::Index(i)]), 0.0, 1.0);
    out.l1 += std::abs(clamped - (truth ? 1.0 : 0.0));
    if (mask[i] && truth) ++tp;
    if (mask[i] && !truth) ++fp;
    if (!mask[i] && truth) ++fn;
  }
  out.l1 /= double(P);
  const int64_t uni = tp + fp + fn;
  out.iou = uni > 0 ? double(tp) / double(uni) : 1.0;
  out.f1 = uni > 0 ? 2.0 * double(tp) / double(tp + uni) : 1.0;
  // Identity check: with one positive class these are the same measurement.
  require(std::abs(out.f1 - 2.0 * out.iou / (1.0 + out.iou)) <= 1e-12, ErrorKind::numeric,
          "selection F1 and IoU disagree");
  return out;
}

KnnResult knn_classify(const Eigen::MatrixXf& gallery, const std::vector<int>& gallery_labels,
                       const Eigen::MatrixXf& queries, const std::vector<int>& query_labels,
                       int k, int n_classes) {
  const Eigen::Index G = gallery.cols(), Q = queries.cols();
  require(k >= 1, ErrorKind::invalid_argument, "k must be positive");
  require(k <= G, ErrorKind::invalid_argument, "k exceeds the gallery size");
  require(size_t(G) == gallery_labels.size() && size_t(Q) == query_labels.size(),
          ErrorKind::shape, "label counts do not match feature counts");
  require(gallery.rows() == queries.rows(), ErrorKind::shape, "feature widths differ");
  require(n_classes > 0, ErrorKind::invalid_argument, "need at least one class");
  for (int l : gallery_labels)
    require(l >= 0 && l < n_classes, ErrorKind::invalid_argument, "gallery label out of range");
  for (int l : query_labels)
    require(l >= 0 && l < n_classes, ErrorKind::invalid_argument, "query label out of range");

  KnnResult out;
  out.predictions.resize(size_t(Q));
  std::vector<std::pair<double, int>> ranked(static_cast<size_t>(G));
  for (Eigen::Index q = 0; q < Q; ++q) {
    for (Eigen::Index g = 0; g < G; ++g) ranked[size_t(g)] = {ddot(gallery, g, queries, q), int(g)};
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    out.predictions[size_t(q)] = vote(ranked, k, gallery_labels, n_classes);
  }
  out.metrics = classification_metrics(out.predictions, query_labels, n_classes);
  return out;
}

HammingScores robustness_hamming(const std::vector<SampleInfo>& samples,
                                 const std::vector<int>& predictions) {
  require(samples.size() == predictions.size(), ErrorKind::shape,
          "prediction count does not match sample count");
  require(!samples.empty(), ErrorKind::invalid_argument, "no samples");

  // material -> geometry -> lighting -> prediction. Geometry and lighting
  // pools are drawn per material, so completeness is per material: each one
  // must cover its own geometry x lighting grid.
  std::map<std::string, std::map<std::string, std::map<std::string, int>>> grid;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    auto& cell = grid[s.material_id][s.geometry_id];
    require(!cell.count(s.lighting_id), ErrorKind::invalid_argument,
            "duplicate (material, geometry, lighting) variant");
    cell[s.lighting_id] = predictions[i];
  }

  auto pair_disagreement = [](const std::vector<int>& preds) {
    const size_t n = preds.size();
    int64_t diff = 0, pairs = 0;
    for (size_t a = 0; a < n; ++a) {
      for (size_t b = a + 1; b < n; ++b) {
        diff += preds[a] != preds[b] ? 1 : 0;
        ++pairs;
      }
    }
    return double(diff) / double(pairs);
  };

  HammingScores out;
  int64_t illum_groups = 0, geo_groups = 0;
  for (const auto& [mat, by_geo] : grid) {
    std::set<std::string> geos, lights;
    for (const auto& [g, by_light] : by_geo) {
      geos.insert(g);
      for (const auto& [l, pred] : by_light) lights.insert(l);
    }
    require(geos.size() >= 2, ErrorKind::invalid_argument,
            "material " + mat + " needs at least two geometries");
    require(lights.size() >= 2, ErrorKind::invalid_argument,
            "material " + mat + " needs at least two lightings");
    for (const auto& g : geos)
      for (const auto& l : lights)
        require(by_geo.at(g).count(l), ErrorKind::missing_variant,
                "material " + mat + " is missing lighting " + l + " for geometry " + g);

    for (const auto& g : geos) {
      std::vector<int> preds;
      for (const auto& l : lights) preds.push_back(by_geo.at(g).at(l));
      out.illumination += pair_disagreement(preds);
      ++illum_groups;
    }
    for (const auto& l : lights) {
      std::vector<int> preds;
      for (const auto& g : geos) preds.push_back(by_geo.at(g).at(l));
      out.geometry += pair_disagreement(preds);
      ++geo_groups;
    }
  }
  out.illumination /= double(illum_groups);
  out.geometry /= double(geo_groups);
  return out;
}

KmeansResult kmeans_segment(const Eigen::MatrixXf& points, int k_lo, int k_hi, uint64_t seed) {
  const Eigen::Index P = points.cols();
  require(P >= 2, ErrorKind::invalid_argument, "need at least two points");
  require(k_lo >= 2, ErrorKind::invalid_argument, "k must start at 2 or above");
  require(k_hi >= k_lo, ErrorKind::invalid_argument, "empty k range");

  Eigen::MatrixXd pts = points.cast<double>();
  for (Eigen::Index i = 0; i < P; ++i) {
    const double n = pts.col(i).norm();
    require(n > 0, ErrorKind::numeric, "cannot normalize a zero embedding");
    pts.col(i) /= n;
  }

  bool identical = true;
  for (Eigen::Index i = 1; i < P && identical; ++i)
    identical = sq_dist(pts, i, pts, 0) <= 1e-24;
  if (identical) {
    KmeansResult out;
    out.labels.assign(size_t(P), 0);
    out.chosen_k = 2;
    out.silhouette = 0;
    out.degenerate = true;
    return out;
  }

  k_hi = std::min<int>(k_hi, int(P) - 1);
  require(k_hi >= k_lo, ErrorKind::invalid_argument, "too few points for the requested k range");

  KmeansResult out;
  double best_sil = -std::numeric_limits<double>::infinity();
  for (int k = k_lo; k <= k_hi; ++k) {
    LloydResult best;
    best.sse = std::numeric_limits<double>::infinity();
    for (int restart = 0; restart < 10; ++restart) {
      Rng rng = Rng::stream(seed, {kKmeansTag, uint64_t(k), uint64_t(restart)});
      LloydResult r = lloyd(pts, kmeanspp(pts, k, rng), 100);
      if (r.sse < best.sse) best = std::move(r);
    }
    const double sil = mean_silhouette(pts, best.labels, k);
    if (sil > best_sil) {  // strict: ties keep the smaller k
      best_sil = sil;
      out.labels = best.labels;
      out.chosen_k = k;
      out.silhouette = sil;
    }
  }
  return out;
}

KnnProtocolResult knn_protocol(const FeatureArchive& archive, int k) {
  archive.validate();
  const Eigen::Index N = Eigen::Index(archive.samples.size());
  require(k >= 1, ErrorKind::invalid_argument, "k must be positive");
  require(k <= N - 1, ErrorKind::invalid_argument,
          "k exceeds the leave-one-out gallery size");

  KnnProtocolResult out;
  std::set<std::string> names;
  for (const auto& s : archive.samples) names.insert(s.category);
  out.classes.assign(names.begin(), names.end());
  std::unordered_map<std::string, int> index;
  for (size_t i = 0; i < out.classes.size(); ++i) index[out.classes[i]] = int(i);
  out.labels.resize(size_t(N));
  for (Eigen::Index i = 0; i < N; ++i)
    out.labels[size_t(i)] = index.at(archive.samples[size_t(i)].category);

  const int n_classes = int(out.classes.size());
  out.result.predictions.resize(size_t(N));
  std::vector<std::pair<double, int>> ranked;
  ranked.reserve(size_t(N - 1));
  for (Eigen::Index q = 0; q < N; ++q) {
    ranked.clear();
    for (Eigen::Index g = 0; g < N; ++g) {
      if (g == q) continue;
      ranked.push_back({ddot(archive.globals, g, archive.globals, q), int(g)});
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    out.result.predictions[size_t(q)] = vote(ranked, k, out.labels, n_classes);
  }
  out.result.metrics = classification_metrics(out.result.predictions, out.labels, n_classes);
  return out;
}

SelectionMetrics selection_protocol(const std::vector<SceneFeatures>& scenes, uint64_t seed,
                                    int queries_per_scene) {
  require(!scenes.empty(), ErrorKind::invalid_argument, "no scenes to evaluate");
  require(queries_per_scene > 0, ErrorKind::invalid_argument, "need at least one query");
  SelectionMetrics total;
  int64_t count = 0;
  for (size_t si = 0; si < scenes.size(); ++si) {
    const SceneFeatures& scene = scenes[si];
    const int R = int(scene.part_material_ids.size());
    std::vector<std::vector<int>> members(static_cast<size_t>(R));
    for (size_t p = 0; p < scene.gt.size(); ++p) members[size_t(scene.gt[p])].push_back(int(p));
    std::vector<int> present;
    for (int r = 0; r < R; ++r)
      if (!members[size_t(r)].empty()) present.push_back(r);
    require(!present.empty(), ErrorKind::degenerate_batch, "scene has no labeled patches");

    // Queries walk a seeded permutation of the populated regions, so distinct
    // regions are covered before any repeats.
    Rng rng = Rng::stream(seed, {kQueryTag, uint64_t(si)});
    const std::vector<int> perm =
        rng.sample_without_replacement(int(present.size()), int(present.size()));
    for (int q = 0; q < queries_per_scene; ++q) {
      const int region = present[size_t(perm[size_t(q) % perm.size()])];
      const auto& pool = members[size_t(region)];
      const int patch = pool[size_t(rng.below(uint64_t(pool.size())))];
      const Eigen::VectorXf map = similarity_map(scene.patches, patch);
      const std::vector<uint8_t> mask = select_material(map);
      const SelectionMetrics m = selection_metrics(map, mask, scene.gt, region);
      total.l1 += m.l1;
      total.iou += m.iou;
      total.f1 += m.f1;
      ++count;
    }
  }
  total.l1 /= double(count);
  total.iou /= double(count);
  total.f1 /= double(count);
  return total;
}

SegmentationSummary segmentation_protocol(const std::vector<SceneFeatures>& scenes,
                                          uint64_t seed) {
  require(!scenes.empty(), ErrorKind::invalid_argument, "no scenes to segment");
  SegmentationSummary out;
  for (size_t si = 0; si < scenes.size(); ++si) {
    const uint64_t scene_seed = Rng::stream(seed, {kSegmentTag, uint64_t(si)}).next_u64();
    const KmeansResult r = kmeans_segment(scenes[si].patches, 2, 12, scene_seed);
    out.chosen_k.push_back(r.chosen_k);
    out.labels.push_back(r.labels);
    out.mean_silhouette += r.silhouette;
  }
  out.mean_silhouette /= double(scenes.size());
  return out;
}

std::string report_to_json(const EvalReport& report) {
  json j;
  if (report.has_selection) {
    j["selection"] = {{"l1", report.selection.l1},
                      {"iou", report.selection.iou},
                      {"f1", report.selection.f1}};
  }
  if (report.has_knn) {
    j["knn"] = {{"top1", report.knn.top1},
                {"precision", report.knn.precision},
                {"recall", report.knn.recall},
                {"f1", report.knn.f1}};
  }
  if (report.has_robustness) {
    j["robustness"] = {{"illumination_hamming", report.robustness.illumination},
                       {"geometry_hamming", report.robustness.geometry}};
  }
  if (report.has_segmentation) {
    j["segmentation"] = {{"chosen_k", report.segmentation_k},
                         {"mean_silhouette", report.mean_silhouette}};
  }
  return j.dump(2);
}

}  // namespace phieat::evalsuite
