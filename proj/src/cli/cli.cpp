#include "phieat/cli/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "phieat/backbone/backbone.hpp"
#include "phieat/core/errors.hpp"
#include "phieat/core/image.hpp"
#include "phieat/core/rng.hpp"
#include "phieat/core/tensor_file.hpp"
#include "phieat/evalsuite/evalsuite.hpp"
#include "phieat/objectives/objectives.hpp"
#include "phieat/views/views.hpp"

namespace phieat::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

int64_t to_int(const std::string& key, const std::string& value) {
  size_t pos = 0;
  int64_t v = 0;
  try {
    v = std::stoll(value, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  require(pos == value.size() && !value.empty(), ErrorKind::config,
          "config key " + key + " needs an integer, got '" + value + "'");
  return v;
}

double to_double(const std::string& key, const std::string& value) {
  size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  require(pos == value.size() && !value.empty(), ErrorKind::config,
          "config key " + key + " needs a number, got '" + value + "'");
  return v;
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  fail(ErrorKind::config, "config key " + key + " needs a boolean, got '" + value + "'");
}

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// Inputs may be given relative to the working directory or to --out.
std::string resolve_input(const std::string& path, const std::string& out) {
  if (fs::exists(path)) return path;
  if (!out.empty()) {
    const fs::path alt = fs::path(out) / path;
    if (fs::exists(alt)) return alt.string();
  }
  return path;
}

void require_file(const std::string& path, const std::string& what) {
  require(fs::exists(path), ErrorKind::config, what + " not found: " + path);
}

// Accepts either a saved backbone or a full training checkpoint; a checkpoint
// contributes its teacher weights, which are what evaluation uses.
std::pair<backbone::BackboneConfig, backbone::ParamStore<float>> load_eval_weights(
    const std::string& path) {
  const TensorFile tf = read_tensor_file(path);
  json meta;
  try {
    meta = json::parse(tf.meta_json);
  } catch (const json::exception& e) {
    fail(ErrorKind::io, std::string("bad checkpoint metadata: ") + e.what());
  }
  const std::string kind = meta.value("kind", "");
  if (kind == "backbone") return backbone::load_backbone(path);
  if (kind == "train_state") {
    const trainer::TrainConfig cfg = trainer::train_config_from_json(meta.at("config").dump());
    auto params = backbone::make_param_store<float>(cfg.backbone);
    for (const auto& e : params.entries()) {
      const NamedArray& arr = tf.find("teacher." + e.name);
      require(arr.rows == e.rows && arr.cols == e.cols, ErrorKind::shape,
              "checkpoint entry " + e.name + " has the wrong shape");
      const std::vector<float> v = unpack_f32(arr);
      std::copy(v.begin(), v.end(), params.data().begin() + long(e.offset));
    }
    return {cfg.backbone, std::move(params)};
  }
  fail(ErrorKind::config, "file is neither a backbone nor a training checkpoint: " + path);
}

// Per-patch grayscale cells; red cross through the query cell whose center
// pixel stays white, so the query keeps the image's maximum intensity.
Image render_heatmap(const Eigen::VectorXf& map, int grid, int cell, int query) {
  Image img(grid * cell, grid * cell);
  for (int p = 0; p < int(map.size()); ++p) {
    const float v = std::clamp(map[p], 0.0f, 1.0f);
    const int y0 = (p / grid) * cell, x0 = (p % grid) * cell;
    for (int y = y0; y < y0 + cell; ++y)
      for (int x = x0; x < x0 + cell; ++x)
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = v;
  }
  const int cy = (query / grid) * cell + cell / 2;
  const int cx = (query % grid) * cell + cell / 2;
  for (int d = -cell / 2; d <= cell / 2; ++d) {
    for (auto [y, x] : {std::pair<int, int>{cy, cx + d}, {cy + d, cx}}) {
      if (y < 0 || y >= img.height || x < 0 || x >= img.width) continue;
      img.at(y, x, 0) = 1.0f;
      img.at(y, x, 1) = 0.0f;
      img.at(y, x, 2) = 0.0f;
    }
  }
  for (int c = 0; c < 3; ++c) img.at(cy, cx, c) = 1.0f;
  return img;
}

GrayImage render_mask(const std::vector<uint8_t>& mask, int grid, int cell) {
  GrayImage img(grid * cell, grid * cell);
  for (int p = 0; p < int(mask.size()); ++p) {
    const int y0 = (p / grid) * cell, x0 = (p % grid) * cell;
    for (int y = y0; y < y0 + cell; ++y)
      for (int x = x0; x < x0 + cell; ++x) img.at(y, x) = mask[size_t(p)] ? 255 : 0;
  }
  return img;
}

Image render_labels(const std::vector<int>& labels, int grid, int cell) {
  static constexpr float kPalette[12][3] = {
      {0.90f, 0.10f, 0.10f}, {0.10f, 0.60f, 0.90f}, {0.10f, 0.75f, 0.20f},
      {0.95f, 0.75f, 0.10f}, {0.60f, 0.25f, 0.80f}, {0.95f, 0.45f, 0.10f},
      {0.15f, 0.80f, 0.75f}, {0.90f, 0.30f, 0.60f}, {0.55f, 0.55f, 0.10f},
      {0.35f, 0.35f, 0.95f}, {0.50f, 0.30f, 0.15f}, {0.40f, 0.40f, 0.40f}};
  Image img(grid * cell, grid * cell);
  for (int p = 0; p < int(labels.size()); ++p) {
    const auto& rgb = kPalette[size_t(labels[size_t(p)]) % 12];
    const int y0 = (p / grid) * cell, x0 = (p % grid) * cell;
    for (int y = y0; y < y0 + cell; ++y)
      for (int x = x0; x < x0 + cell; ++x)
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
  }
  return img;
}

// ---------------------------------------------------------------------------
// Subcommands.

int cmd_gen(const std::string& out, std::optional<uint64_t> seed, const std::string& overrides) {
  synthgen::DatasetConfig cfg;
  cfg.out_dir = out;
  if (seed) cfg.seed = *seed;
  for (const auto& [k, v] : parse_overrides(overrides)) apply_override(cfg, k, v);
  const synthgen::Manifest m = synthgen::generate_dataset(cfg);
  std::cout << "generated " << m.samples.size() << " renders and " << cfg.selection_scenes
            << " scenes under " << out << "\n"
            << "manifest hash " << synthgen::manifest_hash(m) << "\n";
  return 0;
}

int cmd_train(const std::string& dataset, const std::string& config_path, const std::string& out,
              std::optional<uint64_t> seed, const std::string& overrides, bool resume) {
  trainer::TrainConfig cfg;
  if (!config_path.empty()) cfg = load_train_config(resolve_input(config_path, out));
  if (seed) cfg.seed = *seed;
  for (const auto& [k, v] : parse_overrides(overrides)) apply_override(cfg, k, v);

  const std::string data_dir = resolve_input(dataset, out);
  const std::string manifest_path = (fs::path(data_dir) / "manifest.json").string();
  require_file(manifest_path, "dataset manifest");
  const synthgen::Manifest manifest = synthgen::load_manifest(manifest_path);

  const trainer::TrainResult r = trainer::train(cfg, manifest, out, resume);
  std::cout << "trained " << r.steps_run << " steps\n"
            << "metrics " << r.metrics_path << "\n"
            << "checkpoint " << r.checkpoint_path << "\n"
            << "backbone " << r.backbone_path << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset,
             const std::string& protocols_csv, const std::string& out, uint64_t seed,
             bool plot) {
  std::set<std::string> protocols;
  std::stringstream ss(protocols_csv);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (item.empty()) continue;
    require(item == "knn" || item == "select" || item == "robust" || item == "segment",
            ErrorKind::config, "unknown protocol: " + item);
    protocols.insert(item);
  }
  require(!protocols.empty(), ErrorKind::config, "no protocols requested");

  const std::string ckpt = resolve_input(checkpoint, out);
  require_file(ckpt, "checkpoint");
  const std::string data_dir = resolve_input(dataset, out);
  require_file((fs::path(data_dir) / "manifest.json").string(), "dataset manifest");

  auto [bb, params] = load_eval_weights(ckpt);
  fs::create_directories(out);

  evalsuite::EvalReport report;
  if (protocols.count("knn") || protocols.count("robust")) {
    const synthgen::Manifest manifest =
        synthgen::load_manifest((fs::path(data_dir) / "manifest.json").string());
    const evalsuite::FeatureArchive archive = evalsuite::embed_manifest(bb, params, manifest);
    std::cout << "embedded " << archive.samples.size() << " renders\n";
    const evalsuite::KnnProtocolResult knn = evalsuite::knn_protocol(archive);
    if (protocols.count("knn")) {
      report.has_knn = true;
      report.knn = knn.result.metrics;
    }
    if (protocols.count("robust")) {
      report.has_robustness = true;
      report.robustness = evalsuite::robustness_hamming(archive.samples, knn.result.predictions);
    }
  }
  if (protocols.count("select") || protocols.count("segment")) {
    const std::string scenes_path = (fs::path(data_dir) / "scenes.json").string();
    require_file(scenes_path, "scene index");
    const synthgen::SceneIndex index = synthgen::load_scene_index(scenes_path);
    const std::vector<evalsuite::SceneFeatures> scenes =
        evalsuite::embed_scenes(bb, params, index);
    std::cout << "embedded " << scenes.size() << " scenes\n";
    if (protocols.count("select")) {
      report.has_selection = true;
      report.selection = evalsuite::selection_protocol(scenes, seed);
    }
    std::optional<evalsuite::SegmentationSummary> seg;
    if (protocols.count("segment")) {
      seg = evalsuite::segmentation_protocol(scenes, seed);
      report.has_segmentation = true;
      report.segmentation_k = seg->chosen_k;
      report.mean_silhouette = seg->mean_silhouette;
    }
    if (plot) {
      const fs::path plots = fs::path(out) / "plots";
      fs::create_directories(plots);
      const int cell = bb.patch_size;
      for (size_t s = 0; s < scenes.size(); ++s) {
        const auto& sc = scenes[s];
        char tag[32];
        std::snprintf(tag, sizeof tag, "scene_%03zu", s);
        const int query = (sc.grid / 2) * sc.grid + sc.grid / 2;
        const Eigen::VectorXf map = evalsuite::similarity_map(sc.patches, query);
        write_png((plots / (std::string(tag) + "_heatmap.png")).string(),
                  render_heatmap(map, sc.grid, cell, query));
        write_png((plots / (std::string(tag) + "_mask.png")).string(),
                  render_mask(evalsuite::select_material(map), sc.grid, cell));
        if (seg)
          write_png((plots / (std::string(tag) + "_segments.png")).string(),
                    render_labels(seg->labels[s], sc.grid, cell));
      }
      std::cout << "plots under " << plots.string() << "\n";
    }
  }

  const std::string text = evalsuite::report_to_json(report);
  const std::string report_path = (fs::path(out) / "report.json").string();
  std::ofstream(report_path) << text << "\n";
  std::cout << text << "\n"
            << "report " << report_path << "\n";
  return 0;
}

int cmd_select(const std::string& checkpoint, const std::string& image_path, int qx, int qy,
               const std::string& out) {
  const std::string ckpt = resolve_input(checkpoint, out);
  require_file(ckpt, "checkpoint");
  const std::string img_path = resolve_input(image_path, out);
  require_file(img_path, "image");

  auto [bb, params] = load_eval_weights(ckpt);
  const Image img = read_png(img_path);
  require(qx >= 0 && qx < img.width && qy >= 0 && qy < img.height, ErrorKind::config,
          "query pixel is outside the image");

  const backbone::FeatureSet fs_out = backbone::encode(img, params, bb);
  const Eigen::MatrixXf patches = evalsuite::patch_features(fs_out);
  const int grid = fs_out.grid_cols;
  const int query = (qy / bb.patch_size) * grid + (qx / bb.patch_size);
  const Eigen::VectorXf map = evalsuite::similarity_map(patches, query);

  fs::create_directories(out);
  const std::string heat_path = (fs::path(out) / "heatmap.png").string();
  const std::string mask_path = (fs::path(out) / "mask.png").string();
  write_png(heat_path, render_heatmap(map, grid, bb.patch_size, query));
  write_png(mask_path, render_mask(evalsuite::select_material(map), grid, bb.patch_size));
  std::cout << "query patch " << query << " (" << qx << "," << qy << ")\n"
            << "heatmap " << heat_path << "\n"
            << "mask " << mask_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// verify: fast self-checks of the numerical core. `sabotage` injects a fault
// into the named check so harnesses can confirm failures are caught.

using Mat = Eigen::MatrixXd;

bool check_loss_units(bool sabotage, std::string& detail) {
  Mat q = Mat::Zero(4, 1);
  q(2, 0) = 1.0;
  const Mat logits = Mat::Zero(4, 1);
  const std::vector<std::pair<int, int>> pairing{{0, 0}};
  double image = objectives::image_loss(q, logits, pairing, 0.1);
  if (sabotage) image += 1e-3;
  if (std::abs(image - std::log(4.0)) > 1e-9) {
    detail = "one-hot/uniform cross-entropy != ln 4";
    return false;
  }

  Mat anti(2, 2);
  anti << 1, -1, 0, 0;
  if (std::abs(objectives::koleo_loss(anti, 1e-6) - (-std::log(2.0 + 1e-6))) > 1e-9) {
    detail = "antipodal spread value != -ln(2 + eps)";
    return false;
  }

  Mat student(1, 2), anchor(1, 2);
  student << 1, -1;
  anchor << 0, 0;
  if (std::abs(objectives::gram_loss(student, anchor) - 1.0) > 1e-12) {
    detail = "two-patch second-order case != 1";
    return false;
  }

  Mat z(2, 3);
  z.col(0) << 1, 0;
  z.col(1) << 1, 0;
  z.col(2) << 0, 1;
  const double expect = std::log(1.0 + std::exp(1.0)) - 1.0;  // -log(e / (e + 1))
  if (std::abs(objectives::infonce_loss(z, {7, 7, 8}, 1.0) - expect) > 1e-9) {
    detail = "unit-temperature contrastive case != -log(e/(e+1))";
    return false;
  }

  objectives::LossWeights w;
  if (objectives::total_loss(1, 1, 1, 1, 1, w, true).total != 3.05) {
    detail = "weighted sum of unit parts != 3.05";
    return false;
  }
  return true;
}

bool check_sinkhorn(bool sabotage, std::string& detail) {
  const int B = 64, K = 32;
  Rng rng = Rng::stream(17, {0x736b6870});
  Mat logits(B, K);
  for (int i = 0; i < logits.size(); ++i) logits.data()[i] = rng.uniform();
  Mat qa = objectives::sinkhorn_assign(logits, 1.0, 3);
  if (sabotage) qa(0, 0) += 1e-3;
  for (int i = 0; i < B; ++i) {
    if (std::abs(qa.row(i).sum() - 1.0) > 1e-9) {
      detail = "row sum drifts from 1";
      return false;
    }
  }
  for (int k = 0; k < K; ++k) {
    if (std::abs(qa.col(k).sum() - double(B) / K) > 1e-3) {
      detail = "column sum drifts from B/K";
      return false;
    }
  }
  const Mat flat = Mat::Constant(6, 4, 0.37);
  const Mat uq = objectives::sinkhorn_assign(flat, 0.07, 3);
  for (int i = 0; i < uq.size(); ++i) {
    if (std::abs(uq.data()[i] - 0.25) > 1e-12) {
      detail = "uniform logits are not a fixed point";
      return false;
    }
  }
  return true;
}

bool check_schedules(bool sabotage, std::string& detail) {
  const int64_t total = 2000;
  double m0 = trainer::momentum_at(0, total, 0.996, 1.0);
  if (sabotage) m0 += 1e-6;
  if (m0 != 0.996 || trainer::momentum_at(total, total, 0.996, 1.0) != 1.0) {
    detail = "momentum endpoints are not exact";
    return false;
  }
  double prev = m0;
  for (int64_t s = 1; s <= total; ++s) {
    const double m = trainer::momentum_at(s, total, 0.996, 1.0);
    if (m < prev) {
      detail = "momentum schedule is not monotone";
      return false;
    }
    prev = m;
  }
  const double base = 1e-3, floor = 0.01;
  if (trainer::lr_at(0, total, base, 0.1, floor) != 0.0 ||
      trainer::lr_at(total, total, base, 0.1, floor) != base * floor) {
    detail = "learning-rate endpoints are not exact";
    return false;
  }
  return true;
}

Mat verify_random(int r, int c, uint64_t seed) {
  Rng rng = Rng::stream(seed, {0x76667978});
  Mat m(r, c);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

bool check_gradients(bool sabotage, std::string& detail) {
  // isolated terms against central differences
  {
    const Mat raw = verify_random(3, 5, 1);  // rows = samples for the assignment
    const Mat q = objectives::sinkhorn_assign(raw, 1.0, 3).transpose();
    Mat logits = verify_random(5, 3, 2);
    const std::vector<std::pair<int, int>> pairing{{0, 1}, {1, 2}, {2, 0}};
    Mat d = Mat::Zero(5, 3);
    objectives::image_loss_grad(q, logits, pairing, 0.1, d);
    const auto value = [&] { return objectives::image_loss(q, logits, pairing, 0.1); };
    const double err =
        objectives::grad_check(value, logits.data(), d.data(), size_t(logits.size()), 8, 1e-5, 3);
    if (err > 1e-4) {
      detail = "assignment cross-entropy gradient error " + std::to_string(err);
      return false;
    }
  }
  {
    Mat z = verify_random(4, 6, 4);
    const std::vector<int> ids{1, 1, 2, 2, 3, 3};
    Mat d = Mat::Zero(4, 6);
    objectives::infonce_loss_grad(z, ids, 0.5, d);
    const auto value = [&] { return objectives::infonce_loss(z, ids, 0.5); };
    const double err =
        objectives::grad_check(value, z.data(), d.data(), size_t(z.size()), 8, 1e-5, 5);
    if (err > 1e-4) {
      detail = "contrastive gradient error " + std::to_string(err);
      return false;
    }
  }
  {
    Mat s = verify_random(4, 7, 6);
    const Mat a = verify_random(4, 7, 7);
    Mat d = Mat::Zero(4, 7);
    objectives::gram_loss_grad(s, a, d);
    const auto value = [&] { return objectives::gram_loss(s, a); };
    const double err =
        objectives::grad_check(value, s.data(), d.data(), size_t(s.size()), 8, 1e-5, 7);
    if (err > 1e-4) {
      detail = "second-order anchoring gradient error " + std::to_string(err);
      return false;
    }
  }

  // composite through a depth-2 backbone
  backbone::BackboneConfig bb;
  bb.image_size = 16;
  bb.patch_size = 8;
  bb.embed_dim = 32;
  bb.depth = 2;
  bb.num_heads = 2;
  bb.num_registers = 2;
  bb.prototype_count = 16;
  bb.head_hidden_dim = 24;
  bb.head_bottleneck_dim = 12;
  bb.ibot_head_dim = 10;
  auto student = backbone::make_param_store<double>(bb);
  auto teacher = backbone::make_param_store<double>(bb);
  auto anchor = backbone::make_param_store<double>(bb);
  backbone::init_params(student, bb, 11);
  backbone::init_params(teacher, bb, 22);
  backbone::init_params(anchor, bb, 33);

  views::MultiCropBatch batch;
  batch.n_pairs = 2;
  uint64_t k = 0;
  for (int p = 0; p < 2; ++p) {
    for (int g = 0; g < 2; ++g) {
      views::BatchCrop bc;
      Rng rng = Rng::stream(500 + 100 * k++, {0x76696d67});
      bc.image = Image(16, 16);
      for (auto& v : bc.image.data) v = float(rng.uniform());
      bc.spec.kind = views::CropKind::global;
      bc.spec.output_size = 16;
      bc.material_id = "m" + std::to_string(p);
      bc.pair_index = p;
      bc.patch_mask.assign(4, 0);
      bc.patch_mask[size_t((p + g) % 4)] = 1;
      bc.patch_mask[size_t((p + g + 2) % 4)] = 1;
      batch.global_crops.push_back(std::move(bc));
    }
    for (int l = 0; l < 2; ++l) {
      views::BatchCrop bc;
      Rng rng = Rng::stream(800 + 100 * k++, {0x76696d67});
      bc.image = Image(8, 8);
      for (auto& v : bc.image.data) v = float(rng.uniform());
      bc.spec.kind = views::CropKind::local;
      bc.spec.output_size = 8;
      bc.material_id = "m" + std::to_string(p);
      bc.pair_index = p;
      bc.patch_mask.assign(1, uint8_t(l % 2));
      batch.local_crops.push_back(std::move(bc));
    }
  }

  objectives::LossWeights w;
  auto grads = backbone::make_param_store<double>(bb);
  grads.zero_grad();
  trainer::compute_losses<double>(bb, w, student, teacher, &anchor, batch, &grads, nullptr);
  std::vector<double> analytic(grads.grad().begin(), grads.grad().end());
  if (sabotage)
    for (double& a : analytic) a += 1e-2;  // injected broken gradient
  const auto value = [&] {
    return trainer::compute_losses<double>(bb, w, student, teacher, &anchor, batch, nullptr,
                                           nullptr)
        .total;
  };
  const double err = objectives::grad_check(value, student.data().data(), analytic.data(),
                                            student.data().size(), 10, 1e-5, 99);
  if (err > 1e-3) {
    detail = "composite gradient error " + std::to_string(err);
    return false;
  }
  return true;
}

int cmd_verify(const std::string& break_check) {
  const std::vector<std::pair<std::string, std::function<bool(bool, std::string&)>>> checks{
      {"loss-units", check_loss_units},
      {"sinkhorn", check_sinkhorn},
      {"schedules", check_schedules},
      {"gradients", check_gradients},
  };
  if (!break_check.empty()) {
    const bool known = std::any_of(checks.begin(), checks.end(),
                                   [&](const auto& c) { return c.first == break_check; });
    require(known, ErrorKind::config, "unknown check name: " + break_check);
  }
  std::vector<std::string> failed;
  for (const auto& [name, fn] : checks) {
    std::string detail;
    bool ok = false;
    try {
      ok = fn(name == break_check, detail);
    } catch (const std::exception& e) {
      detail = e.what();
    }
    if (ok) {
      std::cout << "[PASS] " << name << "\n";
    } else {
      std::cout << "[FAIL] " << name << (detail.empty() ? "" : ": " + detail) << "\n";
      failed.push_back(name);
    }
  }
  if (failed.empty()) {
    std::cout << "verify: all checks passed\n";
    return 0;
  }
  std::cout << "verify: FAILED (";
  for (size_t i = 0; i < failed.size(); ++i) std::cout << (i ? ", " : "") << failed[i];
  std::cout << ")\n";
  return 1;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_overrides(const std::string& csv) {
  std::vector<std::pair<std::string, std::string>> out;
  std::stringstream ss(csv);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (item.empty()) continue;
    const size_t eq = item.find('=');
    require(eq != std::string::npos && eq > 0, ErrorKind::config,
            "override must be key=value, got '" + item + "'");
    out.emplace_back(trim(item.substr(0, eq)), trim(item.substr(eq + 1)));
  }
  return out;
}

void apply_override(trainer::TrainConfig& cfg, const std::string& key, const std::string& value) {
  auto& w = cfg.weights;
  auto& bb = cfg.backbone;
  auto& vw = cfg.views;
  if (key == "total_steps") cfg.total_steps = to_int(key, value);
  else if (key == "batch_pairs") cfg.batch_pairs = int(to_int(key, value));
  else if (key == "base_lr") cfg.base_lr = to_double(key, value);
  else if (key == "weight_decay") cfg.weight_decay = to_double(key, value);
  else if (key == "momentum_start") cfg.momentum_start = to_double(key, value);
  else if (key == "momentum_end") cfg.momentum_end = to_double(key, value);
  else if (key == "gram_activation_fraction") cfg.gram_activation_fraction = to_double(key, value);
  else if (key == "clip_norm") cfg.clip_norm = to_double(key, value);
  else if (key == "warmup_fraction") cfg.warmup_fraction = to_double(key, value);
  else if (key == "final_lr_fraction") cfg.final_lr_fraction = to_double(key, value);
  else if (key == "checkpoint_every") cfg.checkpoint_every = to_int(key, value);
  else if (key == "seed") cfg.seed = uint64_t(to_int(key, value));
  else if (key == "weights.lambda_p") w.lambda_p = to_double(key, value);
  else if (key == "weights.lambda_k") w.lambda_k = to_double(key, value);
  else if (key == "weights.lambda_g") w.lambda_g = to_double(key, value);
  else if (key == "weights.lambda_c") w.lambda_c = to_double(key, value);
  else if (key == "weights.student_temp") w.student_temp = to_double(key, value);
  else if (key == "weights.teacher_temp") w.teacher_temp = to_double(key, value);
  else if (key == "weights.infonce_temp") w.infonce_temp = to_double(key, value);
  else if (key == "weights.koleo_eps") w.koleo_eps = to_double(key, value);
  else if (key == "backbone.image_size") bb.image_size = int(to_int(key, value));
  else if (key == "backbone.patch_size") bb.patch_size = int(to_int(key, value));
  else if (key == "backbone.embed_dim") bb.embed_dim = int(to_int(key, value));
  else if (key == "backbone.depth") bb.depth = int(to_int(key, value));
  else if (key == "backbone.num_heads") bb.num_heads = int(to_int(key, value));
  else if (key == "backbone.num_registers") bb.num_registers = int(to_int(key, value));
  else if (key == "backbone.prototype_count") bb.prototype_count = int(to_int(key, value));
  else if (key == "backbone.head_hidden_dim") bb.head_hidden_dim = int(to_int(key, value));
  else if (key == "backbone.head_bottleneck_dim") bb.head_bottleneck_dim = int(to_int(key, value));
  else if (key == "backbone.ibot_head_dim") bb.ibot_head_dim = int(to_int(key, value));
  else if (key == "views.global_size") vw.global_size = int(to_int(key, value));
  else if (key == "views.local_size") vw.local_size = int(to_int(key, value));
  else if (key == "views.globals_per_view") vw.globals_per_view = int(to_int(key, value));
  else if (key == "views.locals_per_view") vw.locals_per_view = int(to_int(key, value));
  else if (key == "views.patch_size") vw.patch_size = int(to_int(key, value));
  else if (key == "views.global_area_lo") vw.global_area_lo = to_double(key, value);
  else if (key == "views.global_area_hi") vw.global_area_hi = to_double(key, value);
  else if (key == "views.local_area_lo") vw.local_area_lo = to_double(key, value);
  else if (key == "views.local_area_hi") vw.local_area_hi = to_double(key, value);
  else if (key == "views.mask_probability") vw.mask_probability = to_double(key, value);
  else if (key == "views.mask_lo") vw.mask_lo = to_double(key, value);
  else if (key == "views.mask_hi") vw.mask_hi = to_double(key, value);
  else if (key == "views.pairs_per_batch") cfg.batch_pairs = int(to_int(key, value));
  else if (key == "views.single_render_pairs") vw.single_render_pairs = to_bool(key, value);
  else fail(ErrorKind::config, "unknown config key: " + key);
}

void apply_override(synthgen::DatasetConfig& cfg, const std::string& key,
                    const std::string& value) {
  if (key == "instances_per_family") cfg.instances_per_family = int(to_int(key, value));
  else if (key == "geometries_per_material") cfg.geometries_per_material = int(to_int(key, value));
  else if (key == "lightings_per_material") cfg.lightings_per_material = int(to_int(key, value));
  else if (key == "resolution") cfg.resolution = int(to_int(key, value));
  else if (key == "selection_scenes") cfg.selection_scenes = int(to_int(key, value));
  else if (key == "seed") cfg.seed = uint64_t(to_int(key, value));
  else fail(ErrorKind::config, "unknown config key: " + key);
}

trainer::TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::config, "config file not found: " + path);
  trainer::TrainConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    require(eq != std::string::npos && eq > 0, ErrorKind::config,
            path + ":" + std::to_string(line_no) + ": expected key = value");
    apply_override(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"procedural-material self-supervised training lab"};
  app.require_subcommand(1);

  std::string out = ".";
  std::optional<uint64_t> seed;
  std::string overrides, config_path, protocols = "knn,select,robust,segment";
  std::string dataset, checkpoint, image_path, break_check;
  int qx = 0, qy = 0;
  bool resume = false, plot = false;

  auto* gen = app.add_subcommand("gen", "render a procedural material dataset");
  gen->add_option("--out", out, "dataset directory")->required();
  gen->add_option("--seed", seed, "generation seed");
  gen->add_option("--overrides", overrides, "k=v,... dataset config overrides");

  auto* train = app.add_subcommand("train", "run the self-distillation loop");
  train->add_option("dataset", dataset, "dataset directory from gen")->required();
  train->add_option("--config", config_path, "flat key=value training config");
  train->add_option("--out", out, "run directory for checkpoints and metrics")->required();
  train->add_option("--seed", seed, "training seed");
  train->add_option("--overrides", overrides, "k=v,... training config overrides");
  train->add_flag("--resume", resume, "continue from <out>/checkpoint.bin");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("checkpoint", checkpoint, "backbone or training checkpoint")->required();
  eval->add_option("dataset", dataset, "dataset directory from gen")->required();
  eval->add_option("--protocols", protocols, "subset of knn,select,robust,segment");
  eval->add_option("--out", out, "directory for report.json");
  eval->add_option("--seed", seed, "query/clustering seed");
  eval->add_flag("--plot", plot, "write heatmap and segment PNGs");

  auto* select = app.add_subcommand("select", "similarity heatmap and mask for one query");
  select->add_option("checkpoint", checkpoint, "backbone or training checkpoint")->required();
  select->add_option("image", image_path, "input PNG")->required();
  select->add_option("query_x", qx, "query pixel x")->required();
  select->add_option("query_y", qy, "query pixel y")->required();
  select->add_option("--out", out, "directory for heatmap.png and mask.png");

  auto* verify = app.add_subcommand("verify", "fast numerical self-checks");
  verify->add_option("--break", break_check, "force the named check to fail")->group("");

  std::vector<const char*> argv;
  argv.push_back("phieat");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(int(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen(out, seed, overrides);
    if (*train) return cmd_train(dataset, config_path, out, seed, overrides, resume);
    if (*eval) return cmd_eval(checkpoint, dataset, protocols, out, seed.value_or(0), plot);
    if (*select) return cmd_select(checkpoint, image_path, qx, qy, out);
    if (*verify) return cmd_verify(break_check);
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return e.kind() == ErrorKind::config ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 2;  // unreachable with require_subcommand(1)
}

}  // namespace phieat::cli
