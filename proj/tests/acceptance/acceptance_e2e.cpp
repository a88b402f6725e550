// Acceptance gate, long half: end-to-end toy training (criterion 6) and the
// ablation direction on seed medians (criterion 7). Budget: a few hours on a
// laptop-class CPU; progress lines keep the harness log alive.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "phieat/backbone/backbone.hpp"
#include "phieat/evalsuite/evalsuite.hpp"
#include "phieat/synthgen/dataset.hpp"
#include "phieat/trainer/trainer.hpp"

namespace {

using namespace phieat;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double minutes_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count() / 60.0;
}

void info(const std::string& msg) {
  std::printf("[info] %s\n", msg.c_str());
  std::fflush(stdout);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

struct EvalNumbers {
  double top1 = 0, iou = 0, illumination = 0, geometry = 0;
};

EvalNumbers evaluate(const backbone::BackboneConfig& bb,
                     const backbone::ParamStore<float>& params, const synthgen::Manifest& m,
                     const synthgen::SceneIndex& scenes, bool with_scenes) {
  EvalNumbers out;
  const evalsuite::FeatureArchive archive = evalsuite::embed_manifest(bb, params, m);
  const evalsuite::KnnProtocolResult knn = evalsuite::knn_protocol(archive);
  out.top1 = knn.result.metrics.top1;
  const evalsuite::HammingScores ham =
      evalsuite::robustness_hamming(archive.samples, knn.result.predictions);
  out.illumination = ham.illumination;
  out.geometry = ham.geometry;
  if (with_scenes) {
    const auto sf = evalsuite::embed_scenes(bb, params, scenes);
    out.iou = evalsuite::selection_protocol(sf, 5).iou;
  }
  return out;
}

double median3(double a, double b, double c) {
  std::vector<double> v{a, b, c};
  std::sort(v.begin(), v.end());
  return v[1];
}

}  // namespace

int main() {
  int failures = 0;
  const fs::path work = fs::temp_directory_path() / "phieat_acceptance_e2e";
  fs::remove_all(work);
  fs::create_directories(work);

  // toy dataset: 8 families x 32 instances x 4 geometries x 4 lightings
  synthgen::DatasetConfig dcfg;
  dcfg.instances_per_family = 32;
  dcfg.geometries_per_material = 4;
  dcfg.lightings_per_material = 4;
  dcfg.resolution = 64;
  dcfg.selection_scenes = 32;
  dcfg.seed = 1;
  dcfg.out_dir = (work / "ds").string();
  info("rendering toy dataset (4096 samples, 32 scenes)");
  const synthgen::Manifest manifest = synthgen::generate_dataset(dcfg);
  const synthgen::SceneIndex scenes =
      synthgen::load_scene_index((work / "ds" / "scenes.json").string());
  info("dataset ready: " + std::to_string(manifest.samples.size()) + " renders");

  trainer::TrainConfig tcfg;  // production defaults: 2000 steps, 32 pairs
  tcfg.seed = 1;

  // random-init baseline shares the trained run's architecture
  auto baseline_params = backbone::make_param_store<float>(tcfg.backbone);
  backbone::init_params(baseline_params, tcfg.backbone, 7);
  info("evaluating random-init baseline");
  const EvalNumbers base = evaluate(tcfg.backbone, baseline_params, manifest, scenes, true);
  info("baseline: top1 " + fmt(base.top1) + ", iou " + fmt(base.iou) + ", hamming " +
       fmt(base.illumination) + "/" + fmt(base.geometry));

  const auto t0 = Clock::now();
  info("training " + std::to_string(tcfg.total_steps) + " steps");
  const trainer::TrainResult run = trainer::train(tcfg, manifest, (work / "run").string(), false);
  const double train_minutes = minutes_since(t0);
  info("training finished in " + fmt(train_minutes) + " minutes");

  auto [bb, trained_params] = backbone::load_backbone(run.backbone_path);
  info("evaluating trained model");
  const EvalNumbers trained = evaluate(bb, trained_params, manifest, scenes, true);
  info("trained: top1 " + fmt(trained.top1) + ", iou " + fmt(trained.iou) + ", hamming " +
       fmt(trained.illumination) + "/" + fmt(trained.geometry));

  {
    const bool budget_ok = train_minutes <= 180.0;
    const bool knn_ok = trained.top1 >= 3 * 0.125 && trained.top1 >= 2 * base.top1;
    const bool iou_ok = trained.iou >= base.iou + 0.15;
    const bool ham_ok =
        trained.illumination < base.illumination && trained.geometry < base.geometry;
    const bool ok = budget_ok && knn_ok && iou_ok && ham_ok;
    std::printf(
        "[%s] criterion 6: end-to-end toy training -- top1 %s vs chance 0.125 and random %s "
        "(%s); iou %s vs random %s (%s); hamming %s/%s vs random %s/%s (%s); %.1f min (%s)\n",
        ok ? "PASS" : "FAIL", fmt(trained.top1).c_str(), fmt(base.top1).c_str(),
        knn_ok ? "ok" : "FAIL", fmt(trained.iou).c_str(), fmt(base.iou).c_str(),
        iou_ok ? "ok" : "FAIL", fmt(trained.illumination).c_str(), fmt(trained.geometry).c_str(),
        fmt(base.illumination).c_str(), fmt(base.geometry).c_str(), ham_ok ? "ok" : "FAIL",
        train_minutes, budget_ok ? "ok" : "FAIL");
    std::fflush(stdout);
    if (!ok) ++failures;
  }

  // criterion 7: ablation direction on the median of 3 seeds, matched steps
  const int64_t abl_steps = 400;
  const int abl_batch = 16;
  double with_c[3], without_c[3], multi[3], single[3];
  for (int si = 0; si < 3; ++si) {
    const uint64_t seed = uint64_t(si + 1);
    struct Variant {
      const char* name;
      double* slot_a;
      double* slot_b;
      double lambda_c;
      bool single_render;
    };
    const Variant variants[] = {
        {"full", &with_c[si], &multi[si], 0.25, false},
        {"no-contrast", &without_c[si], nullptr, 0.0, false},
        {"single-render", &single[si], nullptr, 0.25, true},
    };
    for (const auto& v : variants) {
      trainer::TrainConfig cfg;
      cfg.total_steps = abl_steps;
      cfg.batch_pairs = abl_batch;
      cfg.checkpoint_every = 1000000;  // no periodic checkpoints needed
      cfg.seed = seed;
      cfg.weights.lambda_c = v.lambda_c;
      cfg.views.single_render_pairs = v.single_render;
      const auto tv0 = Clock::now();
      trainer::Trainer t(cfg, manifest);
      for (int64_t s = 0; s < cfg.total_steps; ++s) t.train_step();
      const EvalNumbers n = evaluate(cfg.backbone, t.teacher(), manifest, scenes, false);
      info("ablation seed " + std::to_string(seed) + " " + v.name + ": top1 " + fmt(n.top1) +
           " (" + fmt(minutes_since(tv0)) + " min)");
      *v.slot_a = n.top1;
      if (v.slot_b) *v.slot_b = n.top1;
    }
  }
  {
    const double m_with = median3(with_c[0], with_c[1], with_c[2]);
    const double m_without = median3(without_c[0], without_c[1], without_c[2]);
    const double m_multi = median3(multi[0], multi[1], multi[2]);
    const double m_single = median3(single[0], single[1], single[2]);
    const bool contrast_ok = m_with >= m_without;
    const bool pairing_ok = m_multi >= m_single;
    const bool ok = contrast_ok && pairing_ok;
    std::printf(
        "[%s] criterion 7: ablation direction -- median top1 with contrast %s >= without %s "
        "(%s); multi-render %s >= single-render %s (%s)\n",
        ok ? "PASS" : "FAIL", fmt(m_with).c_str(), fmt(m_without).c_str(),
        contrast_ok ? "ok" : "FAIL", fmt(m_multi).c_str(), fmt(m_single).c_str(),
        pairing_ok ? "ok" : "FAIL");
    std::fflush(stdout);
    if (!ok) ++failures;
  }

  if (failures) {
    std::printf("acceptance e2e: %d criterion(s) FAILED\n", failures);
    return 1;
  }
  std::printf("acceptance e2e: all criteria passed\n");
  return 0;
}
