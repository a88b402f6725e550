#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

namespace phieat::objectives {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// Loss mixing weights and temperatures. The teacher temperature is a config
// default rather than a published value; everything else follows the training
// recipe.
struct LossWeights {
  double lambda_p = 1.0;   // patch reconstruction
  double lambda_k = 0.1;   // spread regularizer
  double lambda_g = 0.7;   // second-order anchoring
  double lambda_c = 0.25;  // contrastive term
  double student_temp = 0.1;
  double teacher_temp = 0.07;
  double infonce_temp = 0.1;
  double koleo_eps = 1e-6;

  void validate() const;  // temperatures and eps must be positive, weights >= 0
};

struct LossBreakdown {
  double image = 0, patch = 0, koleo = 0, gram = 0, contrast = 0, total = 0;
};

// Balanced soft assignments from teacher logits. Input is one row per sample
// and one column per prototype; exp(logits / teacher_temp) is alternately
// rescaled so columns sum to B/K and rows sum to 1, ending on the row step, so
// row sums are exact and column sums approach B/K with iterations. Plain value
// computation: nothing propagates gradients back through the result.
template <typename S>
Mat<S> sinkhorn_assign(const Mat<S>& teacher_logits, double teacher_temp, int n_iters);

// Cross-entropy between teacher assignments and student prototype predictions,
// averaged over an explicit (teacher column, student column) pairing. Both
// matrices hold one column per view: teacher_q columns are assignment
// distributions, student_logits columns are raw scores softmaxed at
// student_temp. The caller builds the pairing (all cross-view pairs of the
// same material, identical crops excluded).
template <typename S>
S image_loss(const Mat<S>& teacher_q, const Mat<S>& student_logits,
             const std::vector<std::pair<int, int>>& pairing, double student_temp);
template <typename S>
S image_loss_grad(const Mat<S>& teacher_q, const Mat<S>& student_logits,
                  const std::vector<std::pair<int, int>>& pairing, double student_temp,
                  Mat<S>& d_student_logits);

// Mean squared reconstruction of teacher patch features at masked positions.
// student_proj has one column per masked patch; target_cols[m] names the
// teacher column holding the feature of the same spatial position. Zero when
// nothing is masked.
template <typename S>
S patch_loss(const Mat<S>& student_proj, const Mat<S>& teacher_proj,
             const std::vector<int>& target_cols);
template <typename S>
S patch_loss_grad(const Mat<S>& student_proj, const Mat<S>& teacher_proj,
                  const std::vector<int>& target_cols, Mat<S>& d_student_proj);

// Nearest-neighbor spread regularizer -mean_i log(rho_i + eps) with rho_i the
// Euclidean distance to i's nearest other column. Columns are samples and are
// expected to be L2-normalized by the caller.
template <typename S>
S koleo_loss(const Mat<S>& z, double eps);
template <typename S>
S koleo_loss_grad(const Mat<S>& z, double eps, Mat<S>& d_z);

// Second-order patch-relation match between two crops' patch features (one
// column per patch). Both sides are mean-centered across patches internally;
// the anchor side is a fixed target and receives no gradient.
template <typename S>
S gram_loss(const Mat<S>& student_patches, const Mat<S>& anchor_patches);
template <typename S>
S gram_loss_grad(const Mat<S>& student_patches, const Mat<S>& anchor_patches,
                 Mat<S>& d_student);

// In-batch contrastive loss over L2-normalized columns. Anchors are samples
// whose material id occurs at least twice; a sample whose id is unique serves
// only as a negative. Per anchor: -log(sum over positives of exp(sim/tau) /
// sum over all other samples of exp(sim/tau)), averaged over anchors.
template <typename S>
S infonce_loss(const Mat<S>& z, const std::vector<int>& material_ids, double tau);
template <typename S>
S infonce_loss_grad(const Mat<S>& z, const std::vector<int>& material_ids, double tau,
                    Mat<S>& d_z);

// Weighted sum with the second-order term gated by its activation flag; the
// breakdown stores the gated value so the total always equals the weighted sum
// of its own fields.
LossBreakdown total_loss(double image, double patch, double koleo, double gram, double contrast,
                         const LossWeights& w, bool gram_active);

// Central-difference probe: perturbs probe_count randomly chosen coordinates
// of params and compares against the analytic gradient; returns the worst
// relative error. `value` must recompute the objective from params.
double grad_check(const std::function<double()>& value, double* params, const double* analytic,
                  size_t count, int probe_count, double step, uint64_t seed);

}  // namespace phieat::objectives
