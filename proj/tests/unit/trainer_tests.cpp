#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "phieat/core/errors.hpp"
#include "phieat/core/rng.hpp"
#include "phieat/trainer/trainer.hpp"

using namespace phieat;
using namespace phieat::trainer;
using backbone::BackboneConfig;
using backbone::ParamStore;

namespace {

BackboneConfig tiny_bb() {
  BackboneConfig bb;
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
  return bb;
}

Image random_image(int size, uint64_t seed) {
  Rng r = Rng::stream(seed, {0x74726e69});
  Image img(size, size);
  for (auto& v : img.data) v = float(r.uniform());
  return img;
}

// hand-built two-pair batch: 2 globals at 16px (4 patches) and 2 locals at
// 8px (1 patch) per pair, with fixed masks so the patch term always has work
views::MultiCropBatch manual_batch(uint64_t seed) {
  views::MultiCropBatch batch;
  batch.n_pairs = 2;
  uint64_t k = 0;
  for (int p = 0; p < 2; ++p) {
    for (int g = 0; g < 2; ++g) {
      views::BatchCrop bc;
      bc.image = random_image(16, seed + 100 * k++);
      bc.spec.kind = views::CropKind::global;
      bc.spec.output_size = 16;
      bc.material_id = "mat" + std::to_string(p);
      bc.pair_index = p;
      bc.patch_mask.assign(4, 0);
      bc.patch_mask[size_t((p + g) % 4)] = 1;
      bc.patch_mask[size_t((p + g + 2) % 4)] = 1;
      batch.global_crops.push_back(std::move(bc));
    }
    for (int l = 0; l < 2; ++l) {
      views::BatchCrop bc;
      bc.image = random_image(8, seed + 100 * k++);
      bc.spec.kind = views::CropKind::local;
      bc.spec.output_size = 8;
      bc.material_id = "mat" + std::to_string(p);
      bc.pair_index = p;
      bc.patch_mask.assign(1, uint8_t(l % 2));
      batch.local_crops.push_back(std::move(bc));
    }
  }
  return batch;
}

const synthgen::Manifest& tiny_manifest() {
  static synthgen::Manifest m = [] {
    synthgen::DatasetConfig cfg;
    cfg.families = {synthgen::Family::checker, synthgen::Family::stripes};
    cfg.instances_per_family = 2;
    cfg.geometries_per_material = 2;
    cfg.lightings_per_material = 2;
    cfg.resolution = 32;
    cfg.selection_scenes = 1;
    cfg.seed = 7;
    auto dir = std::filesystem::temp_directory_path() / "phieat_trainer_ds";
    std::filesystem::remove_all(dir);
    cfg.out_dir = dir.string();
    return synthgen::generate_dataset(cfg);
  }();
  return m;
}

TrainConfig tiny_cfg() {
  TrainConfig cfg;
  cfg.total_steps = 4;
  cfg.batch_pairs = 2;
  cfg.checkpoint_every = 2;
  cfg.gram_activation_fraction = 0.5;
  cfg.seed = 5;
  cfg.backbone = tiny_bb();
  cfg.views.global_size = 16;
  cfg.views.local_size = 16;  // the 8px patch grid needs at least 4 patches to mask
  cfg.views.globals_per_view = 2;
  cfg.views.locals_per_view = 2;
  cfg.views.patch_size = 8;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("momentum schedule hits its endpoints and never decreases") {
  CHECK(momentum_at(0, 2000) == 0.996);
  CHECK(momentum_at(2000, 2000) == 1.0);
  double prev = -1;
  for (int64_t s = 0; s <= 200; ++s) {
    double m = momentum_at(s, 200);
    CHECK(m >= prev);
    prev = m;
  }
  CHECK(momentum_at(100, 200) == doctest::Approx(0.998).epsilon(1e-12));
  CHECK_THROWS_AS(momentum_at(-1, 10), Error);
  CHECK_THROWS_AS(momentum_at(11, 10), Error);
  CHECK_THROWS_AS(momentum_at(0, 0), Error);
}

TEST_CASE("learning rate warms up linearly then decays to its floor") {
  const double base = 1e-3;
  CHECK(lr_at(0, 2000, base) == 0.0);
  CHECK(lr_at(100, 2000, base) == doctest::Approx(5e-4).epsilon(1e-14));
  CHECK(lr_at(200, 2000, base) == doctest::Approx(base).epsilon(1e-14));
  CHECK(lr_at(2000, 2000, base) == doctest::Approx(1e-5).epsilon(1e-12));
  double prev = base + 1;
  for (int64_t s = 200; s <= 2000; s += 50) {
    double lr = lr_at(s, 2000, base);
    CHECK(lr <= prev);
    CHECK(lr >= 1e-5 - 1e-18);
    prev = lr;
  }
  // mid-cosine: halfway between warmup end and total
  CHECK(lr_at(1100, 2000, base) ==
        doctest::Approx(1e-5 + (base - 1e-5) * 0.5).epsilon(1e-12));
  // no warmup phase when the fraction rounds to zero steps
  CHECK(lr_at(0, 2000, base, 0.0) == doctest::Approx(base).epsilon(1e-14));
  CHECK_THROWS_AS(lr_at(0, 0, base), Error);
}

TEST_CASE("teacher follows the ema recurrence exactly") {
  auto bb = tiny_bb();
  auto student = backbone::make_param_store<float>(bb);
  auto teacher = backbone::make_param_store<float>(bb);
  backbone::init_params(student, bb, 1);
  backbone::init_params(teacher, bb, 2);

  auto t0 = teacher.data();
  ema_update(teacher, student, 1.0);
  CHECK(teacher.data() == t0);

  ema_update(teacher, student, 0.0);
  CHECK(teacher.data() == student.data());

  backbone::init_params(teacher, bb, 2);
  t0 = teacher.data();
  ema_update(teacher, student, 0.5);
  bool all_match = true;
  for (size_t i = 0; i < t0.size(); ++i)
    all_match = all_match &&
                teacher.data()[i] == float(0.5 * t0[i] + 0.5 * student.data()[i]);
  CHECK(all_match);

  CHECK_THROWS_AS(ema_update(teacher, student, 1.5), Error);
  auto other_bb = tiny_bb();
  other_bb.embed_dim = 16;
  other_bb.head_bottleneck_dim = 8;
  auto other = backbone::make_param_store<float>(other_bb);
  CHECK_THROWS_AS(ema_update(teacher, other, 0.5), Error);
}

TEST_CASE("adamw matches a hand-stepped oracle and decays only flagged entries") {
  auto bb = tiny_bb();
  auto params = backbone::make_param_store<float>(bb);
  backbone::init_params(params, bb, 3);
  const size_t n = params.data().size();

  AdamW opt;
  opt.init(n);
  CHECK(opt.t == 0);

  auto w0 = params.data();
  for (size_t i = 0; i < n; ++i) params.grad()[i] = 0.01f * float(int(i % 7) - 3);
  auto g = params.grad();

  const double lr = 0.002, wd = 0.05;
  opt.step(params, lr, wd);
  CHECK(opt.t == 1);

  std::vector<float> m1(n), m2(n);
  bool ok = true;
  for (const auto& e : params.entries()) {
    for (size_t i = e.offset; i < e.offset + size_t(e.rows) * e.cols; ++i) {
      double gi = g[i];
      m1[i] = float(0.9 * 0 + 0.1 * gi);
      m2[i] = float(0.999 * 0 + 0.001 * gi * gi);
      double mh = double(m1[i]) / (1 - 0.9);
      double vh = double(m2[i]) / (1 - 0.999);
      double upd = lr * mh / (std::sqrt(vh) + 1e-8);
      if (e.decay) upd += lr * wd * double(w0[i]);
      ok = ok && params.data()[i] == float(double(w0[i]) - upd);
    }
  }
  CHECK(ok);

  // zero gradient on an undecayed entry leaves it untouched; a decayed entry
  // still shrinks toward zero
  auto w1 = params.data();
  std::fill(params.grad().begin(), params.grad().end(), 0.f);
  // moments are nonzero now, so pick fresh state for the zero-grad claim
  AdamW opt2;
  opt2.init(n);
  opt2.step(params, lr, wd);
  bool decay_only = true;
  for (const auto& e : params.entries()) {
    for (size_t i = e.offset; i < e.offset + size_t(e.rows) * e.cols; ++i) {
      if (e.decay)
        decay_only = decay_only && params.data()[i] == float(double(w1[i]) * (1 - lr * wd));
      else
        decay_only = decay_only && params.data()[i] == w1[i];
    }
  }
  CHECK(decay_only);

  AdamW bad;
  bad.init(3);
  CHECK_THROWS_AS(bad.step(params, lr, wd), Error);
}

TEST_CASE("loss assembly produces finite terms and respects gating") {
  auto bb = tiny_bb();
  auto student = backbone::make_param_store<float>(bb);
  auto teacher = backbone::make_param_store<float>(bb);
  auto anchor = backbone::make_param_store<float>(bb);
  backbone::init_params(student, bb, 1);
  backbone::init_params(teacher, bb, 2);
  backbone::init_params(anchor, bb, 3);
  auto batch = manual_batch(9);

  objectives::LossWeights w;
  int masked = -1;
  auto bd = compute_losses<float>(bb, w, student, teacher, &anchor, batch, nullptr, &masked);
  CHECK(masked == 8);  // 4 global crops x 2 masked patches
  CHECK(std::isfinite(bd.total));
  CHECK(bd.image > 0);
  CHECK(bd.patch > 0);
  CHECK(std::isfinite(bd.koleo));
  CHECK(bd.gram > 0);
  CHECK(std::isfinite(bd.contrast));
  CHECK(bd.total == bd.image + 1.0 * bd.patch + 0.1 * bd.koleo + 0.7 * bd.gram +
                        0.25 * bd.contrast);

  // same values whether or not gradients are requested
  auto grads = backbone::make_param_store<float>(bb);
  grads.zero_grad();
  auto bd_g = compute_losses<float>(bb, w, student, teacher, &anchor, batch, &grads, nullptr);
  CHECK(bd_g.image == bd.image);
  CHECK(bd_g.patch == bd.patch);
  CHECK(bd_g.koleo == bd.koleo);
  CHECK(bd_g.gram == bd.gram);
  CHECK(bd_g.contrast == bd.contrast);
  bool any_grad = false;
  for (float v : grads.grad()) any_grad = any_grad || v != 0;
  CHECK(any_grad);

  // no anchor snapshot: the second-order term is inert
  auto bd_off = compute_losses<float>(bb, w, student, teacher, nullptr, batch, nullptr, nullptr);
  CHECK(bd_off.gram == 0.0);
  CHECK(bd_off.image == bd.image);
  CHECK(bd_off.total == doctest::Approx(bd.total - 0.7 * bd.gram).epsilon(1e-12));

  // zero weights silence each auxiliary term
  objectives::LossWeights w0;
  w0.lambda_p = w0.lambda_k = w0.lambda_g = w0.lambda_c = 0;
  auto bd0 = compute_losses<float>(bb, w0, student, teacher, &anchor, batch, nullptr, nullptr);
  CHECK(bd0.patch == 0.0);
  CHECK(bd0.koleo == 0.0);
  CHECK(bd0.gram == 0.0);
  CHECK(bd0.contrast == 0.0);
  CHECK(bd0.total == bd0.image);
  CHECK(bd0.image == bd.image);
}

TEST_CASE("loss assembly validates batch layout") {
  auto bb = tiny_bb();
  auto student = backbone::make_param_store<float>(bb);
  auto teacher = backbone::make_param_store<float>(bb);
  backbone::init_params(student, bb, 1);
  backbone::init_params(teacher, bb, 2);
  objectives::LossWeights w;

  auto shuffled = manual_batch(4);
  std::swap(shuffled.global_crops[0], shuffled.global_crops[2]);
  CHECK_THROWS_AS(
      compute_losses<float>(bb, w, student, teacher, nullptr, shuffled, nullptr, nullptr),
      Error);

  // a single global crop per pair cannot form teacher-student global pairs
  auto thin = manual_batch(4);
  thin.global_crops.erase(thin.global_crops.begin() + 1);
  thin.global_crops.erase(thin.global_crops.begin() + 2);
  CHECK_THROWS_AS(
      compute_losses<float>(bb, w, student, teacher, nullptr, thin, nullptr, nullptr), Error);

  views::MultiCropBatch empty;
  empty.n_pairs = 0;
  CHECK_THROWS_AS(
      compute_losses<float>(bb, w, student, teacher, nullptr, empty, nullptr, nullptr), Error);
}

TEST_CASE("student gradients of the composite objective match finite differences") {
  auto bb = tiny_bb();
  auto student = backbone::make_param_store<double>(bb);
  auto teacher = backbone::make_param_store<double>(bb);
  auto anchor = backbone::make_param_store<double>(bb);
  backbone::init_params(student, bb, 11);
  backbone::init_params(teacher, bb, 22);
  backbone::init_params(anchor, bb, 33);
  auto batch = manual_batch(17);

  objectives::LossWeights w;
  auto grads = backbone::make_param_store<double>(bb);
  grads.zero_grad();
  int masked = 0;
  compute_losses<double>(bb, w, student, teacher, &anchor, batch, &grads, &masked);
  REQUIRE(masked > 0);

  auto value = [&] {
    return compute_losses<double>(bb, w, student, teacher, &anchor, batch, nullptr, nullptr)
        .total;
  };
  double err = objectives::grad_check(value, student.data().data(), grads.grad().data(),
                                      student.data().size(), 24, 1e-5, 99);
  CHECK(err < 1e-3);
}

TEST_CASE("train config survives json and rejects bad combinations") {
  TrainConfig cfg = tiny_cfg();
  cfg.weights.lambda_c = 0.125;
  cfg.views.single_render_pairs = true;
  std::string j = train_config_to_json(cfg);
  TrainConfig back = train_config_from_json(j);
  CHECK(train_config_to_json(back) == j);
  CHECK(back.views.single_render_pairs);
  CHECK(back.weights.lambda_c == 0.125);
  CHECK(back.total_steps == cfg.total_steps);

  CHECK_THROWS_AS(train_config_from_json("{\"total_steps\": 4}"), Error);
  CHECK_THROWS_AS(train_config_from_json("not json"), Error);

  TrainConfig bad = tiny_cfg();
  bad.views.patch_size = 4;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = tiny_cfg();
  bad.momentum_start = 1.0;
  bad.momentum_end = 0.996;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = tiny_cfg();
  bad.warmup_fraction = 1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = tiny_cfg();
  bad.gram_activation_fraction = 1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("trainer steps follow the published schedules and ema recurrence") {
  TrainConfig cfg = tiny_cfg();
  Trainer tr(cfg, tiny_manifest());
  CHECK(tr.step() == 0);
  CHECK(tr.teacher().data() == tr.student().data());  // teacher starts as a copy
  CHECK(!tr.gram_teacher());

  auto t_before = tr.teacher().data();
  StepMetrics m0 = tr.train_step();
  CHECK(m0.step == 0);
  CHECK(tr.step() == 1);
  CHECK(std::isfinite(m0.loss.total));
  CHECK(m0.grad_norm > 0);
  CHECK(m0.lr == lr_at(0, cfg.total_steps, cfg.base_lr, cfg.warmup_fraction,
                       cfg.final_lr_fraction));
  CHECK(m0.momentum == momentum_at(0, cfg.total_steps));
  CHECK(m0.loss.gram == 0.0);  // the anchor is not active yet
  CHECK(!tr.gram_teacher());

  // fp contraction may fuse the blend differently here than in the library
  // loop, so allow one ulp around the replayed recurrence
  bool ema_ok = true;
  for (size_t i = 0; i < t_before.size(); ++i) {
    float expect = float(m0.momentum * t_before[i] +
                         (1.0 - m0.momentum) * tr.student().data()[i]);
    float got = tr.teacher().data()[i];
    ema_ok = ema_ok && (got == expect ||
                        got == std::nextafter(expect, got));
  }
  CHECK(ema_ok);

  StepMetrics m1 = tr.train_step();
  CHECK(m1.step == 1);
  CHECK(!tr.gram_teacher());

  // activation at ceil(0.5 * 4) = 2: the snapshot is the teacher as it stood
  // before the step runs
  auto teacher_at_snap = tr.teacher().data();
  StepMetrics m2 = tr.train_step();
  REQUIRE(tr.gram_teacher().has_value());
  CHECK(tr.gram_teacher()->data() == teacher_at_snap);
  CHECK(m2.loss.gram > 0);

  auto frozen = tr.gram_teacher()->data();
  tr.train_step();
  CHECK(tr.gram_teacher()->data() == frozen);        // never re-copied
  CHECK(tr.teacher().data() != teacher_at_snap);     // while the teacher moves

  CHECK(tr.step() == 4);
  CHECK_THROWS_AS(tr.train_step(), Error);
}

TEST_CASE("checkpoints restore training bit for bit") {
  TrainConfig cfg = tiny_cfg();
  cfg.total_steps = 6;
  cfg.gram_activation_fraction = 0.5;  // snapshot fires at step 3
  auto dir = std::filesystem::temp_directory_path() / "phieat_ckpt_rt";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);

  Trainer a(cfg, tiny_manifest());
  for (int i = 0; i < 3; ++i) a.train_step();
  auto p1 = (dir / "state_a.bin").string();
  a.save_checkpoint(p1);

  Trainer b(cfg, tiny_manifest());
  b.load_checkpoint(p1);
  CHECK(b.step() == 3);
  CHECK(b.student().data() == a.student().data());
  CHECK(b.teacher().data() == a.teacher().data());
  CHECK(b.optimizer().m1 == a.optimizer().m1);
  CHECK(b.optimizer().m2 == a.optimizer().m2);
  CHECK(b.optimizer().t == a.optimizer().t);
  CHECK(!b.gram_teacher());

  auto p2 = (dir / "state_b.bin").string();
  b.save_checkpoint(p2);
  CHECK(slurp(p1) == slurp(p2));

  // both copies replay the remaining steps identically
  for (int i = 3; i < 6; ++i) {
    StepMetrics ma = a.train_step();
    StepMetrics mb = b.train_step();
    CHECK(ma.loss.total == mb.loss.total);
    CHECK(ma.grad_norm == mb.grad_norm);
    CHECK(ma.masked_patches == mb.masked_patches);
  }
  CHECK(a.student().data() == b.student().data());
  CHECK(a.teacher().data() == b.teacher().data());
  REQUIRE(a.gram_teacher().has_value());
  REQUIRE(b.gram_teacher().has_value());
  CHECK(a.gram_teacher()->data() == b.gram_teacher()->data());

  // a checkpoint taken after activation carries the frozen snapshot
  auto p3 = (dir / "state_gram.bin").string();
  a.save_checkpoint(p3);
  Trainer c(cfg, tiny_manifest());
  c.load_checkpoint(p3);
  REQUIRE(c.gram_teacher().has_value());
  CHECK(c.gram_teacher()->data() == a.gram_teacher()->data());

  TrainConfig other = cfg;
  other.backbone.embed_dim = 16;
  other.backbone.head_bottleneck_dim = 8;
  Trainer d(other, tiny_manifest());
  CHECK_THROWS_AS(d.load_checkpoint(p1), Error);
  try {
    d.load_checkpoint(p1);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
  }
}

TEST_CASE("the training loop writes metrics, checkpoints, and final weights") {
  TrainConfig cfg = tiny_cfg();
  cfg.total_steps = 3;
  cfg.checkpoint_every = 2;
  auto dir = std::filesystem::temp_directory_path() / "phieat_train_loop";
  std::filesystem::remove_all(dir);

  TrainResult res = train(cfg, tiny_manifest(), dir.string(), false);
  CHECK(res.steps_run == 3);
  CHECK(std::filesystem::exists(res.checkpoint_path));
  CHECK(std::filesystem::exists(res.backbone_path));

  std::ifstream metrics(res.metrics_path);
  std::vector<nlohmann::json> lines;
  for (std::string line; std::getline(metrics, line);)
    lines.push_back(nlohmann::json::parse(line));
  REQUIRE(lines.size() == 3);
  for (size_t i = 0; i < lines.size(); ++i) {
    CHECK(lines[i].at("step").get<int64_t>() == int64_t(i));
    CHECK(std::isfinite(lines[i].at("total").get<double>()));
    CHECK(lines[i].at("lr").get<double>() >= 0);
  }

  // the saved backbone holds the final teacher
  auto loaded = backbone::load_backbone(res.backbone_path);
  CHECK(backbone::config_to_json(loaded.first) == backbone::config_to_json(cfg.backbone));

  // an identical second run reproduces every artifact byte for byte
  auto dir2 = std::filesystem::temp_directory_path() / "phieat_train_loop2";
  std::filesystem::remove_all(dir2);
  TrainResult res2 = train(cfg, tiny_manifest(), dir2.string(), false);
  CHECK(slurp(res.backbone_path) == slurp(res2.backbone_path));
  CHECK(slurp(res.checkpoint_path) == slurp(res2.checkpoint_path));
  CHECK(slurp(res.metrics_path) == slurp(res2.metrics_path));

  // resuming extends the run in place
  TrainConfig longer = cfg;
  longer.total_steps = 5;
  TrainResult res3 = train(longer, tiny_manifest(), dir.string(), true);
  CHECK(res3.steps_run == 5);
  std::ifstream more(res3.metrics_path);
  std::vector<int64_t> steps;
  for (std::string line; std::getline(more, line);)
    steps.push_back(nlohmann::json::parse(line).at("step").get<int64_t>());
  REQUIRE(steps.size() == 5);
  for (size_t i = 0; i < steps.size(); ++i) CHECK(steps[i] == int64_t(i));
}

TEST_CASE("training runs with every auxiliary weight disabled") {
  TrainConfig cfg = tiny_cfg();
  cfg.total_steps = 2;
  cfg.weights.lambda_p = 0;
  cfg.weights.lambda_k = 0;
  cfg.weights.lambda_g = 0;
  cfg.weights.lambda_c = 0;
  Trainer tr(cfg, tiny_manifest());
  StepMetrics m = tr.train_step();
  CHECK(m.loss.total == m.loss.image);
  CHECK(std::isfinite(m.loss.total));
  CHECK(m.grad_norm > 0);
}
