#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "phieat/backbone/backbone.hpp"
#include "phieat/objectives/objectives.hpp"
#include "phieat/synthgen/dataset.hpp"
#include "phieat/views/views.hpp"

namespace phieat::trainer {

struct TrainConfig {
  int64_t total_steps = 2000;
  int batch_pairs = 32;
  double base_lr = 0.001;
  double weight_decay = 0.05;
  double momentum_start = 0.996;
  double momentum_end = 1.0;
  double gram_activation_fraction = 0.8;
  double clip_norm = 3.0;          // 0 disables clipping
  double warmup_fraction = 0.1;    // linear warmup share of total steps
  double final_lr_fraction = 0.01; // cosine floor as a share of base_lr
  int64_t checkpoint_every = 500;
  uint64_t seed = 0;
  objectives::LossWeights weights;
  backbone::BackboneConfig backbone;
  views::ViewConfig views;

  void validate() const;
};

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

// Teacher momentum: cosine from momentum_start at step 0 to momentum_end at
// step total_steps, monotone non-decreasing.
double momentum_at(int64_t step, int64_t total_steps, double start = 0.996, double end = 1.0);

// Linear warmup from 0 over the first warmup_fraction of steps, then cosine
// decay to final_lr_fraction * base_lr.
double lr_at(int64_t step, int64_t total_steps, double base_lr, double warmup_fraction = 0.1,
             double final_lr_fraction = 0.01);

// teacher <- m * teacher + (1 - m) * student, elementwise.
void ema_update(backbone::ParamStore<float>& teacher,
                const backbone::ParamStore<float>& student, double m);

// Adam with decoupled weight decay; decay applies only to entries flagged in
// the parameter registry. Moments live here so checkpoints can capture them.
struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<float> m1, m2;
  int64_t t = 0;

  void init(size_t param_count);
  void step(backbone::ParamStore<float>& params, double lr, double weight_decay);
};

// Forward (and optionally backward) of the full five-term objective on one
// multi-crop batch. The teacher and the second-order anchor are value-only:
// no gradient reaches them. When `grads` is non-null, parameter gradients
// accumulate into it (pass the student store itself in training). Terms whose
// weight is zero are skipped and reported as 0. `masked_patches`, when
// non-null, receives the masked-global-patch count.
template <typename S>
objectives::LossBreakdown compute_losses(const backbone::BackboneConfig& bb,
                                         const objectives::LossWeights& w,
                                         const backbone::ParamStore<S>& student,
                                         const backbone::ParamStore<S>& teacher,
                                         const backbone::ParamStore<S>* gram_teacher,
                                         const views::MultiCropBatch& batch,
                                         backbone::ParamStore<S>* grads,
                                         int* masked_patches = nullptr);

struct StepMetrics {
  int64_t step = 0;  // the step that was just executed (0-based)
  objectives::LossBreakdown loss;
  double grad_norm = 0;  // global norm before clipping
  double lr = 0;
  double momentum = 0;
  int masked_patches = 0;
};

// Owns the training state: student, EMA teacher, optional frozen second-order
// anchor, optimizer moments, and the step counter. All randomness is drawn
// from counter-based streams keyed by (seed, step), so the step counter fully
// determines the RNG state.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const synthgen::Manifest& manifest);

  StepMetrics train_step();

  // At step ceil(gram_activation_fraction * total_steps) copies the teacher
  // into the frozen anchor; never re-copies. Called by train_step; exposed
  // for direct tests.
  void maybe_snapshot_gram();

  int64_t step() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  const backbone::ParamStore<float>& student() const { return student_; }
  const backbone::ParamStore<float>& teacher() const { return teacher_; }
  const std::optional<backbone::ParamStore<float>>& gram_teacher() const {
    return gram_teacher_;
  }
  const AdamW& optimizer() const { return opt_; }

  void save_checkpoint(const std::string& path) const;
  // Restores parameters, moments, and step; rejects a checkpoint whose
  // backbone configuration differs from this trainer's.
  void load_checkpoint(const std::string& path);

 private:
  TrainConfig cfg_;
  const synthgen::Manifest* manifest_;
  views::RenderCache cache_;
  backbone::ParamStore<float> student_;
  backbone::ParamStore<float> teacher_;
  std::optional<backbone::ParamStore<float>> gram_teacher_;
  AdamW opt_;
  int64_t step_ = 0;
};

struct TrainResult {
  std::string checkpoint_path;
  std::string backbone_path;  // final teacher weights for evaluation
  std::string metrics_path;
  int64_t steps_run = 0;
};

// Full loop: runs to total_steps, appends one JSON line per step to
// out_dir/metrics.jsonl, checkpoints periodically, and writes the final
// teacher backbone. With resume=true continues from out_dir/checkpoint.bin
// when present.
TrainResult train(const TrainConfig& cfg, const synthgen::Manifest& manifest,
                  const std::string& out_dir, bool resume);

}  // namespace phieat::trainer
