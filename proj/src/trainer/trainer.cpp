#include "phieat/trainer/trainer.hpp"

#include <cmath>
#include <numbers>
#include <filesystem>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "phieat/core/errors.hpp"
#include "phieat/core/tensor_file.hpp"

namespace phieat::trainer {

namespace fs = std::filesystem;
using backbone::Encoder;
using backbone::Mat;
using backbone::ParamStore;
using nlohmann::json;

void TrainConfig::validate() const {
  require(total_steps > 0 && batch_pairs > 0, ErrorKind::config,
          "total_steps and batch_pairs must be positive");
  require(base_lr > 0 && weight_decay >= 0 && clip_norm >= 0, ErrorKind::config,
          "base_lr must be positive; weight_decay and clip_norm non-negative");
  require(momentum_start > 0 && momentum_start <= momentum_end && momentum_end <= 1,
          ErrorKind::config, "need 0 < momentum_start <= momentum_end <= 1");
  require(gram_activation_fraction > 0 && gram_activation_fraction < 1, ErrorKind::config,
          "gram_activation_fraction must lie in (0, 1)");
  require(warmup_fraction >= 0 && warmup_fraction < 1, ErrorKind::config,
          "warmup_fraction must lie in [0, 1)");
  require(final_lr_fraction > 0 && final_lr_fraction <= 1, ErrorKind::config,
          "final_lr_fraction must lie in (0, 1]");
  require(checkpoint_every > 0, ErrorKind::config, "checkpoint_every must be positive");
  require(views.patch_size == backbone.patch_size, ErrorKind::config,
          "view pipeline and backbone disagree on patch_size");
  weights.validate();
  backbone.validate();
}

std::string train_config_to_json(const TrainConfig& cfg) {
  json j{{"total_steps", cfg.total_steps},
         {"batch_pairs", cfg.batch_pairs},
         {"base_lr", cfg.base_lr},
         {"weight_decay", cfg.weight_decay},
         {"momentum_start", cfg.momentum_start},
         {"momentum_end", cfg.momentum_end},
         {"gram_activation_fraction", cfg.gram_activation_fraction},
         {"clip_norm", cfg.clip_norm},
         {"warmup_fraction", cfg.warmup_fraction},
         {"final_lr_fraction", cfg.final_lr_fraction},
         {"checkpoint_every", cfg.checkpoint_every},
         {"seed", cfg.seed}};
  j["weights"] = {{"lambda_p", cfg.weights.lambda_p},
                  {"lambda_k", cfg.weights.lambda_k},
                  {"lambda_g", cfg.weights.lambda_g},
                  {"lambda_c", cfg.weights.lambda_c},
                  {"student_temp", cfg.weights.student_temp},
                  {"teacher_temp", cfg.weights.teacher_temp},
                  {"infonce_temp", cfg.weights.infonce_temp},
                  {"koleo_eps", cfg.weights.koleo_eps}};
  j["backbone"] = json::parse(backbone::config_to_json(cfg.backbone));
  j["views"] = {{"global_size", cfg.views.global_size},
                {"local_size", cfg.views.local_size},
                {"globals_per_view", cfg.views.globals_per_view},
                {"locals_per_view", cfg.views.locals_per_view},
                {"patch_size", cfg.views.patch_size},
                {"global_area_lo", cfg.views.global_area_lo},
                {"global_area_hi", cfg.views.global_area_hi},
                {"local_area_lo", cfg.views.local_area_lo},
                {"local_area_hi", cfg.views.local_area_hi},
                {"mask_probability", cfg.views.mask_probability},
                {"mask_lo", cfg.views.mask_lo},
                {"mask_hi", cfg.views.mask_hi},
                {"pairs_per_batch", cfg.views.pairs_per_batch},
                {"single_render_pairs", cfg.views.single_render_pairs}};
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::io, std::string("bad train config json: ") + e.what());
  }
  TrainConfig cfg;
  try {
    cfg.total_steps = j.at("total_steps").get<int64_t>();
    cfg.batch_pairs = j.at("batch_pairs").get<int>();
    cfg.base_lr = j.at("base_lr").get<double>();
    cfg.weight_decay = j.at("weight_decay").get<double>();
    cfg.momentum_start = j.at("momentum_start").get<double>();
    cfg.momentum_end = j.at("momentum_end").get<double>();
    cfg.gram_activation_fraction = j.at("gram_activation_fraction").get<double>();
    cfg.clip_norm = j.at("clip_norm").get<double>();
    cfg.warmup_fraction = j.at("warmup_fraction").get<double>();
    cfg.final_lr_fraction = j.at("final_lr_fraction").get<double>();
    cfg.checkpoint_every = j.at("checkpoint_every").get<int64_t>();
    cfg.seed = j.at("seed").get<uint64_t>();
    const json& w = j.at("weights");
    cfg.weights.lambda_p = w.at("lambda_p").get<double>();
    cfg.weights.lambda_k = w.at("lambda_k").get<double>();
    cfg.weights.lambda_g = w.at("lambda_g").get<double>();
    cfg.weights.lambda_c = w.at("lambda_c").get<double>();
    cfg.weights.student_temp = w.at("student_temp").get<double>();
    cfg.weights.teacher_temp = w.at("teacher_temp").get<double>();
    cfg.weights.infonce_temp = w.at("infonce_temp").get<double>();
    cfg.weights.koleo_eps = w.at("koleo_eps").get<double>();
    cfg.backbone = backbone::config_from_json(j.at("backbone").dump());
    const json& v = j.at("views");
    cfg.views.global_size = v.at("global_size").get<int>();
    cfg.views.local_size = v.at("local_size").get<int>();
    cfg.views.globals_per_view = v.at("globals_per_view").get<int>();
    cfg.views.locals_per_view = v.at("locals_per_view").get<int>();
    cfg.views.patch_size = v.at("patch_size").get<int>();
    cfg.views.global_area_lo = v.at("global_area_lo").get<double>();
    cfg.views.global_area_hi = v.at("global_area_hi").get<double>();
    cfg.views.local_area_lo = v.at("local_area_lo").get<double>();
    cfg.views.local_area_hi = v.at("local_area_hi").get<double>();
    cfg.views.mask_probability = v.at("mask_probability").get<double>();
    cfg.views.mask_lo = v.at("mask_lo").get<double>();
    cfg.views.mask_hi = v.at("mask_hi").get<double>();
    cfg.views.pairs_per_batch = v.at("pairs_per_batch").get<int>();
    cfg.views.single_render_pairs = v.at("single_render_pairs").get<bool>();
  } catch (const json::exception& e) {
    fail(ErrorKind::io, std::string("train config json missing fields: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

double momentum_at(int64_t step, int64_t total_steps, double start, double end) {
  require(total_steps > 0, ErrorKind::invalid_argument, "total_steps must be positive");
  require(step >= 0 && step <= total_steps, ErrorKind::invalid_argument,
          "step outside [0, total_steps]");
  double phase = (std::cos(std::numbers::pi * double(step) / double(total_steps)) + 1.0) / 2.0;
  return end - (end - start) * phase;
}

double lr_at(int64_t step, int64_t total_steps, double base_lr, double warmup_fraction,
             double final_lr_fraction) {
  require(total_steps > 0, ErrorKind::invalid_argument, "total_steps must be positive");
  step = std::clamp<int64_t>(step, 0, total_steps);
  int64_t warmup = std::llround(warmup_fraction * double(total_steps));
  if (warmup > 0 && step < warmup) return base_lr * double(step) / double(warmup);
  double floor = final_lr_fraction * base_lr;
  if (total_steps == warmup) return base_lr;
  double t = double(step - warmup) / double(total_steps - warmup);
  return floor + (base_lr - floor) * (std::cos(std::numbers::pi * t) + 1.0) / 2.0;
}

void ema_update(ParamStore<float>& teacher, const ParamStore<float>& student, double m) {
  require(teacher.data().size() == student.data().size(), ErrorKind::shape,
          "teacher and student parameter counts differ");
  require(m >= 0 && m <= 1, ErrorKind::invalid_argument, "momentum outside [0, 1]");
  auto& t = teacher.data();
  const auto& s = student.data();
  for (size_t i = 0; i < t.size(); ++i) t[i] = float(m * t[i] + (1.0 - m) * s[i]);
}

void AdamW::init(size_t param_count) {
  m1.assign(param_count, 0.f);
  m2.assign(param_count, 0.f);
  t = 0;
}

void AdamW::step(ParamStore<float>& params, double lr, double weight_decay) {
  require(m1.size() == params.data().size() && m2.size() == params.data().size(),
          ErrorKind::shape, "optimizer moments do not match the parameter store");
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, double(t));
  const double bc2 = 1.0 - std::pow(beta2, double(t));
  auto& data = params.data();
  const auto& grad = params.grad();
  for (const auto& e : params.entries()) {
    const size_t end = e.offset + size_t(e.rows) * e.cols;
    for (size_t i = e.offset; i < end; ++i) {
      double g = grad[i];
      m1[i] = float(beta1 * m1[i] + (1.0 - beta1) * g);
      m2[i] = float(beta2 * m2[i] + (1.0 - beta2) * g * g);
      double update = lr * (double(m1[i]) / bc1) / (std::sqrt(double(m2[i]) / bc2) + eps);
      if (e.decay) update += lr * weight_decay * double(data[i]);
      data[i] = float(double(data[i]) - update);
    }
  }
}

// ---------------------------------------------------------------------------
// Loss assembly

namespace {

template <typename S>
Mat<S> gather_cls(const Encoder<S>& enc) {
  Mat<S> out(enc.tokens().rows(), enc.crop_count());
  for (int c = 0; c < enc.crop_count(); ++c) out.col(c) = enc.tokens().col(enc.cls_col(c));
  return out;
}

}  // namespace

template <typename S>
objectives::LossBreakdown compute_losses(const backbone::BackboneConfig& bb,
                                         const objectives::LossWeights& w,
                                         const ParamStore<S>& student,
                                         const ParamStore<S>& teacher,
                                         const ParamStore<S>* gram_teacher,
                                         const views::MultiCropBatch& batch,
                                         ParamStore<S>* grads, int* masked_patches) {
  const int ng = int(batch.global_crops.size());
  const int nl = int(batch.local_crops.size());
  require(batch.n_pairs > 0 && ng > 0, ErrorKind::invalid_argument, "empty batch");
  require(ng % batch.n_pairs == 0 && (nl == 0 || nl % batch.n_pairs == 0),
          ErrorKind::invalid_argument, "crop counts must be uniform across pairs");
  const int gpp = ng / batch.n_pairs;
  const int lpp = nl / batch.n_pairs;
  require(gpp >= 2, ErrorKind::degenerate_batch, "need at least two global crops per pair");
  for (int c = 0; c < ng; ++c)
    require(batch.global_crops[size_t(c)].pair_index == c / gpp, ErrorKind::invalid_argument,
            "global crops must be ordered by pair");
  for (int c = 0; c < nl; ++c)
    require(batch.local_crops[size_t(c)].pair_index == c / std::max(lpp, 1),
            ErrorKind::invalid_argument, "local crops must be ordered by pair");

  const bool want_grad = grads != nullptr;
  const bool do_patch = w.lambda_p > 0;
  const bool do_koleo = w.lambda_k > 0;
  const bool do_contrast = w.lambda_c > 0;
  const bool do_gram = w.lambda_g > 0 && gram_teacher != nullptr;

  std::vector<const Image*> g_imgs(static_cast<size_t>(ng)), l_imgs(static_cast<size_t>(nl));
  std::vector<const std::vector<uint8_t>*> g_masks(static_cast<size_t>(ng)),
      l_masks(static_cast<size_t>(nl));
  for (int c = 0; c < ng; ++c) {
    g_imgs[size_t(c)] = &batch.global_crops[size_t(c)].image;
    g_masks[size_t(c)] = &batch.global_crops[size_t(c)].patch_mask;
  }
  for (int c = 0; c < nl; ++c) {
    l_imgs[size_t(c)] = &batch.local_crops[size_t(c)].image;
    l_masks[size_t(c)] = &batch.local_crops[size_t(c)].patch_mask;
  }

  // ---- teachers: value-only passes over global crops, no masking
  Encoder<S> t_enc(bb, teacher);
  t_enc.forward(g_imgs, {}, false);
  const int pg = t_enc.grid() * t_enc.grid();

  Mat<S> t_cls = gather_cls(t_enc);
  backbone::ProtoTrace<S> t_proto;
  proto_forward(bb, teacher, t_cls, t_proto);
  Mat<S> q_rows =
      objectives::sinkhorn_assign(Mat<S>(t_proto.logits.transpose()), w.teacher_temp, 3);
  Mat<S> teacher_q = q_rows.transpose();  // prototypes x global crops

  // masked global patch positions, shared between student and teacher
  std::vector<std::pair<int, int>> masked;  // (crop, patch)
  for (int c = 0; c < ng; ++c) {
    const auto& mask = batch.global_crops[size_t(c)].patch_mask;
    if (mask.empty()) continue;
    require(int(mask.size()) == pg, ErrorKind::shape,
            "global patch mask does not match the encoder grid");
    for (int p = 0; p < pg; ++p)
      if (mask[size_t(p)]) masked.emplace_back(c, p);
  }
  const int m_count = int(masked.size());
  if (masked_patches) *masked_patches = m_count;

  backbone::IbotTrace<S> t_ibot;
  if (do_patch && m_count > 0) {
    Mat<S> t_feats(bb.embed_dim, m_count);
    for (int m = 0; m < m_count; ++m)
      t_feats.col(m) = t_enc.tokens().col(t_enc.patch_col(masked[size_t(m)].first,
                                                          masked[size_t(m)].second));
    ibot_forward(bb, teacher, t_feats, t_ibot);
  }

  // ---- student
  Encoder<S> s_global(bb, student);
  s_global.forward(g_imgs, g_masks, want_grad);
  Encoder<S> s_local(bb, student);
  if (nl > 0) s_local.forward(l_imgs, l_masks, want_grad);

  Mat<S> s_cls(bb.embed_dim, ng + nl);
  s_cls.leftCols(ng) = gather_cls(s_global);
  if (nl > 0) s_cls.rightCols(nl) = gather_cls(s_local);

  backbone::ProtoTrace<S> s_proto;
  proto_forward(bb, student, s_cls, s_proto);

  // all (teacher global, student crop) pairs of one material, self excluded
  std::vector<std::pair<int, int>> pairing;
  pairing.reserve(size_t(batch.n_pairs) * gpp * (gpp - 1 + lpp));
  for (int p = 0; p < batch.n_pairs; ++p) {
    for (int tg = 0; tg < gpp; ++tg) {
      int t = p * gpp + tg;
      for (int sg = 0; sg < gpp; ++sg)
        if (sg != tg) pairing.emplace_back(t, p * gpp + sg);
      for (int sl = 0; sl < lpp; ++sl) pairing.emplace_back(t, ng + p * lpp + sl);
    }
  }

  Mat<S> d_slogits;
  double loss_image =
      want_grad ? double(objectives::image_loss_grad(teacher_q, s_proto.logits, pairing,
                                                     w.student_temp, d_slogits))
                : double(objectives::image_loss(teacher_q, s_proto.logits, pairing,
                                                w.student_temp));

  // masked patch regression against the teacher's own projections
  double loss_patch = 0;
  backbone::IbotTrace<S> s_ibot;
  Mat<S> d_ibot_out;
  if (do_patch && m_count > 0) {
    Mat<S> s_feats(bb.embed_dim, m_count);
    for (int m = 0; m < m_count; ++m)
      s_feats.col(m) = s_global.tokens().col(
          s_global.patch_col(masked[size_t(m)].first, masked[size_t(m)].second));
    ibot_forward(bb, student, s_feats, s_ibot);
    std::vector<int> ident(static_cast<size_t>(m_count));
    for (int m = 0; m < m_count; ++m) ident[size_t(m)] = m;
    loss_patch =
        want_grad
            ? double(objectives::patch_loss_grad(s_ibot.out, t_ibot.out, ident, d_ibot_out))
            : double(objectives::patch_loss(s_ibot.out, t_ibot.out, ident));
  }

  // spread + contrastive terms act on normalized global cls features before
  // the prototype head
  double loss_koleo = 0, loss_contrast = 0;
  Mat<S> z, d_cls_norm;
  Eigen::Matrix<S, Eigen::Dynamic, 1> z_norms;
  if (do_koleo || do_contrast) {
    z.resize(bb.embed_dim, ng);
    z_norms.resize(ng);
    for (int c = 0; c < ng; ++c) {
      S n = std::sqrt(s_cls.col(c).squaredNorm() + S(1e-24));
      z_norms(c) = n;
      z.col(c) = s_cls.col(c) / n;
    }
    Mat<S> dz = Mat<S>::Zero(bb.embed_dim, ng);
    if (do_koleo) {
      if (want_grad) {
        Mat<S> dzk;
        loss_koleo = double(objectives::koleo_loss_grad(z, w.koleo_eps, dzk));
        dz += S(w.lambda_k) * dzk;
      } else {
        loss_koleo = double(objectives::koleo_loss(z, w.koleo_eps));
      }
    }
    if (do_contrast) {
      std::unordered_map<std::string, int> id_map;
      std::vector<int> ids(static_cast<size_t>(ng));
      for (int c = 0; c < ng; ++c) {
        auto [it, inserted] =
            id_map.emplace(batch.global_crops[size_t(c)].material_id, int(id_map.size()));
        ids[size_t(c)] = it->second;
      }
      if (want_grad) {
        Mat<S> dzc;
        loss_contrast = double(objectives::infonce_loss_grad(z, ids, w.infonce_temp, dzc));
        dz += S(w.lambda_c) * dzc;
      } else {
        loss_contrast = double(objectives::infonce_loss(z, ids, w.infonce_temp));
      }
    }
    if (want_grad) {
      d_cls_norm.resize(bb.embed_dim, ng);
      for (int c = 0; c < ng; ++c) {
        S dot = z.col(c).dot(dz.col(c));
        d_cls_norm.col(c) = (dz.col(c) - z.col(c) * dot) / z_norms(c);
      }
    }
  }

  // second-order anchoring per global crop against the frozen snapshot
  double loss_gram = 0;
  std::vector<Mat<S>> d_gram(want_grad && do_gram ? size_t(ng) : 0);
  if (do_gram) {
    Encoder<S> a_enc(bb, *gram_teacher);
    a_enc.forward(g_imgs, {}, false);
    const int reg = bb.num_registers;
    for (int c = 0; c < ng; ++c) {
      Mat<S> xs =
          s_global.tokens().middleCols(c * s_global.tokens_per_crop() + 1 + reg, pg);
      Mat<S> xa = a_enc.tokens().middleCols(c * a_enc.tokens_per_crop() + 1 + reg, pg);
      if (want_grad) {
        Mat<S> dxs;
        loss_gram += double(objectives::gram_loss_grad(xs, xa, dxs));
        d_gram[size_t(c)] = std::move(dxs);
      } else {
        loss_gram += double(objectives::gram_loss(xs, xa));
      }
    }
    loss_gram /= ng;
  }

  objectives::LossBreakdown bd =
      objectives::total_loss(loss_image, loss_patch, loss_koleo, loss_gram, loss_contrast, w,
                             do_gram);

  if (!want_grad) return bd;

  // ---- backward
  Mat<S> d_cls_all;
  proto_backward(bb, student, s_proto, d_slogits, *grads, d_cls_all);
  if (do_koleo || do_contrast) d_cls_all.leftCols(ng) += d_cls_norm;

  Mat<S> d_spatch;
  if (do_patch && m_count > 0) {
    d_ibot_out *= S(w.lambda_p);
    ibot_backward(bb, student, s_ibot, d_ibot_out, *grads, d_spatch);
  }

  Mat<S> d_tokens_g = Mat<S>::Zero(bb.embed_dim, s_global.tokens().cols());
  for (int c = 0; c < ng; ++c) d_tokens_g.col(s_global.cls_col(c)) = d_cls_all.col(c);
  if (do_patch && m_count > 0)
    for (int m = 0; m < m_count; ++m)
      d_tokens_g.col(s_global.patch_col(masked[size_t(m)].first, masked[size_t(m)].second)) +=
          d_spatch.col(m);
  if (do_gram) {
    const S scale = S(w.lambda_g) / S(ng);
    const int reg = bb.num_registers;
    for (int c = 0; c < ng; ++c)
      d_tokens_g.middleCols(c * s_global.tokens_per_crop() + 1 + reg, pg) +=
          scale * d_gram[size_t(c)];
  }
  s_global.backward(d_tokens_g, *grads);

  if (nl > 0) {
    Mat<S> d_tokens_l = Mat<S>::Zero(bb.embed_dim, s_local.tokens().cols());
    for (int c = 0; c < nl; ++c) d_tokens_l.col(s_local.cls_col(c)) = d_cls_all.col(ng + c);
    s_local.backward(d_tokens_l, *grads);
  }
  return bd;
}

template objectives::LossBreakdown compute_losses<float>(
    const backbone::BackboneConfig&, const objectives::LossWeights&, const ParamStore<float>&,
    const ParamStore<float>&, const ParamStore<float>*, const views::MultiCropBatch&,
    ParamStore<float>*, int*);
template objectives::LossBreakdown compute_losses<double>(
    const backbone::BackboneConfig&, const objectives::LossWeights&, const ParamStore<double>&,
    const ParamStore<double>&, const ParamStore<double>*, const views::MultiCropBatch&,
    ParamStore<double>*, int*);

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(const TrainConfig& cfg, const synthgen::Manifest& manifest)
    : cfg_(cfg), manifest_(&manifest), cache_(manifest.root) {
  cfg_.views.pairs_per_batch = cfg_.batch_pairs;
  cfg_.validate();
  student_ = backbone::make_param_store<float>(cfg_.backbone);
  backbone::init_params(student_, cfg_.backbone, cfg_.seed);
  teacher_ = student_;  // the teacher starts as an exact copy
  opt_.init(student_.data().size());
}

void Trainer::maybe_snapshot_gram() {
  if (gram_teacher_) return;
  int64_t trigger =
      int64_t(std::ceil(cfg_.gram_activation_fraction * double(cfg_.total_steps)));
  if (step_ >= trigger) gram_teacher_ = teacher_;
}

StepMetrics Trainer::train_step() {
  require(step_ < cfg_.total_steps, ErrorKind::invalid_argument,
          "training already ran to total_steps");
  maybe_snapshot_gram();
  views::MultiCropBatch batch =
      views::assemble_batch(*manifest_, cache_, cfg_.views, cfg_.seed, uint64_t(step_));

  student_.zero_grad();
  int masked = 0;
  objectives::LossBreakdown bd =
      compute_losses<float>(cfg_.backbone, cfg_.weights, student_, teacher_,
                            gram_teacher_ ? &*gram_teacher_ : nullptr, batch, &student_, &masked);

  double norm_sq = 0;
  for (float g : student_.grad()) norm_sq += double(g) * g;
  double grad_norm = std::sqrt(norm_sq);
  require(std::isfinite(grad_norm), ErrorKind::numeric, "gradient norm is not finite");
  if (cfg_.clip_norm > 0 && grad_norm > cfg_.clip_norm) {
    float scale = float(cfg_.clip_norm / grad_norm);
    for (float& g : student_.grad()) g *= scale;
  }

  double lr = lr_at(step_, cfg_.total_steps, cfg_.base_lr, cfg_.warmup_fraction,
                    cfg_.final_lr_fraction);
  opt_.step(student_, lr, cfg_.weight_decay);
  backbone::renormalize_prototypes(student_);
  double m = momentum_at(step_, cfg_.total_steps, cfg_.momentum_start, cfg_.momentum_end);
  ema_update(teacher_, student_, m);

  StepMetrics metrics;
  metrics.step = step_;
  metrics.loss = bd;
  metrics.grad_norm = grad_norm;
  metrics.lr = lr;
  metrics.momentum = m;
  metrics.masked_patches = masked;
  ++step_;
  return metrics;
}

namespace {

void pack_store(TensorFile& tf, const std::string& prefix, const ParamStore<float>& store) {
  for (size_t i = 0; i < store.entries().size(); ++i) {
    const auto& e = store.entries()[i];
    std::vector<float> v(size_t(e.rows) * e.cols);
    std::copy_n(store.data().begin() + long(e.offset), v.size(), v.begin());
    tf.arrays.push_back(pack_f32(prefix + e.name, v, e.rows, e.cols));
  }
}

void unpack_store(const TensorFile& tf, const std::string& prefix, ParamStore<float>& store,
                  const std::string& path) {
  for (size_t i = 0; i < store.entries().size(); ++i) {
    const auto& e = store.entries()[i];
    const NamedArray& a = tf.find(prefix + e.name);
    require(a.rows == e.rows && a.cols == e.cols, ErrorKind::shape,
            path + ": array '" + prefix + e.name + "' shape mismatch");
    auto v = unpack_f32(a);
    std::copy(v.begin(), v.end(), store.data().begin() + long(e.offset));
  }
}

}  // namespace

void Trainer::save_checkpoint(const std::string& path) const {
  TensorFile tf;
  json meta{{"kind", "train_state"},
            {"format", 1},
            {"step", step_},
            {"adam_t", opt_.t},
            {"has_gram", bool(gram_teacher_)},
            {"config", json::parse(train_config_to_json(cfg_))}};
  tf.meta_json = meta.dump();
  pack_store(tf, "student.", student_);
  pack_store(tf, "teacher.", teacher_);
  if (gram_teacher_) pack_store(tf, "gram.", *gram_teacher_);
  tf.arrays.push_back(pack_f32("opt.m1", opt_.m1, int64_t(opt_.m1.size()), 1));
  tf.arrays.push_back(pack_f32("opt.m2", opt_.m2, int64_t(opt_.m2.size()), 1));
  write_tensor_file(path, tf);
}

void Trainer::load_checkpoint(const std::string& path) {
  TensorFile tf = read_tensor_file(path);
  json meta;
  try {
    meta = json::parse(tf.meta_json);
  } catch (const json::exception& e) {
    fail(ErrorKind::io, path + ": bad checkpoint metadata: " + e.what());
  }
  require(meta.value("kind", "") == "train_state", ErrorKind::io,
          path + " is not a training checkpoint");
  TrainConfig stored = train_config_from_json(meta.at("config").dump());
  require(backbone::config_to_json(stored.backbone) == backbone::config_to_json(cfg_.backbone),
          ErrorKind::config, path + ": checkpoint backbone configuration differs");

  unpack_store(tf, "student.", student_, path);
  unpack_store(tf, "teacher.", teacher_, path);
  if (meta.at("has_gram").get<bool>()) {
    gram_teacher_ = backbone::make_param_store<float>(cfg_.backbone);
    unpack_store(tf, "gram.", *gram_teacher_, path);
  } else {
    gram_teacher_.reset();
  }
  auto m1 = unpack_f32(tf.find("opt.m1"));
  auto m2 = unpack_f32(tf.find("opt.m2"));
  require(m1.size() == student_.data().size() && m2.size() == student_.data().size(),
          ErrorKind::shape, path + ": optimizer moment size mismatch");
  opt_.m1 = std::move(m1);
  opt_.m2 = std::move(m2);
  opt_.t = meta.at("adam_t").get<int64_t>();
  step_ = meta.at("step").get<int64_t>();
}

TrainResult train(const TrainConfig& cfg, const synthgen::Manifest& manifest,
                  const std::string& out_dir, bool resume) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  require(!ec, ErrorKind::io, "cannot create output directory " + out_dir);

  Trainer tr(cfg, manifest);
  const std::string ckpt_path = (fs::path(out_dir) / "checkpoint.bin").string();
  const std::string metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();
  const std::string backbone_path = (fs::path(out_dir) / "backbone_final.bin").string();

  bool resumed = false;
  if (resume && fs::exists(ckpt_path)) {
    tr.load_checkpoint(ckpt_path);
    resumed = true;
  }

  std::ofstream metrics(metrics_path, resumed ? std::ios::app : std::ios::trunc);
  require(metrics.good(), ErrorKind::io, "cannot open metrics log " + metrics_path);

  while (tr.step() < cfg.total_steps) {
    StepMetrics m = tr.train_step();
    json line{{"step", m.step},
              {"image", m.loss.image},
              {"patch", m.loss.patch},
              {"koleo", m.loss.koleo},
              {"gram", m.loss.gram},
              {"contrast", m.loss.contrast},
              {"total", m.loss.total},
              {"grad_norm", m.grad_norm},
              {"lr", m.lr},
              {"momentum", m.momentum},
              {"masked_patches", m.masked_patches}};
    metrics << line.dump() << '\n';
    metrics.flush();
    if ((m.step + 1) % cfg.checkpoint_every == 0 && m.step + 1 < cfg.total_steps)
      tr.save_checkpoint(ckpt_path);
  }
  tr.save_checkpoint(ckpt_path);
  backbone::save_backbone(backbone_path, cfg.backbone, tr.teacher());

  TrainResult out;
  out.checkpoint_path = ckpt_path;
  out.backbone_path = backbone_path;
  out.metrics_path = metrics_path;
  out.steps_run = tr.step();
  return out;
}

}  // namespace phieat::trainer
