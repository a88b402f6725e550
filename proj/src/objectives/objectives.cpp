#include "phieat/objectives/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "phieat/core/errors.hpp"
#include "phieat/core/rng.hpp"

namespace phieat::objectives {

void LossWeights::validate() const {
  require(student_temp > 0 && teacher_temp > 0 && infonce_temp > 0, ErrorKind::config,
          "temperatures must be positive");
  require(koleo_eps > 0, ErrorKind::config, "koleo_eps must be positive");
  require(lambda_p >= 0 && lambda_k >= 0 && lambda_g >= 0 && lambda_c >= 0, ErrorKind::config,
          "loss weights must be non-negative");
}

template <typename S>
Mat<S> sinkhorn_assign(const Mat<S>& teacher_logits, double teacher_temp, int n_iters) {
  require(teacher_logits.allFinite(), ErrorKind::numeric, "teacher logits contain NaN or Inf");
  const int B = int(teacher_logits.rows()), K = int(teacher_logits.cols());
  require(B >= 2 && K >= 2, ErrorKind::invalid_argument, "need at least a 2x2 logit matrix");
  require(teacher_temp > 0 && n_iters >= 1, ErrorKind::invalid_argument,
          "temperature and iteration count must be positive");

  // global max subtraction only rescales, and the first normalization step
  // absorbs any constant factor
  S mx = teacher_logits.maxCoeff();
  Mat<S> q = ((teacher_logits.array() - mx) / S(teacher_temp)).exp();
  const S col_target = S(B) / S(K);
  for (int it = 0; it < n_iters; ++it) {
    for (int k = 0; k < K; ++k) {
      S cs = q.col(k).sum();
      if (cs > S(0)) q.col(k) *= col_target / cs;
    }
    for (int i = 0; i < B; ++i) {
      S rs = q.row(i).sum();
      if (rs > S(0)) q.row(i) /= rs;
    }
  }
  return q;
}

namespace {

// column-wise log-softmax at the given temperature, computed lazily for the
// columns a pairing actually references
template <typename S>
struct LogSoftmaxCache {
  const Mat<S>& logits;
  double temp;
  Mat<S> logp;
  std::vector<char> ready;

  LogSoftmaxCache(const Mat<S>& l, double t)
      : logits(l), temp(t), logp(l.rows(), l.cols()), ready(size_t(l.cols()), 0) {}

  const auto col(int s) {
    if (!ready[size_t(s)]) {
      auto scaled = (logits.col(s) / S(temp)).eval();
      S mx = scaled.maxCoeff();
      S lse = std::log((scaled.array() - mx).exp().sum()) + mx;
      logp.col(s) = scaled.array() - lse;
      ready[size_t(s)] = 1;
    }
    return logp.col(s);
  }
};

template <typename S>
void check_pairing(const Mat<S>& teacher_q, const Mat<S>& student_logits,
                   const std::vector<std::pair<int, int>>& pairing) {
  require(!pairing.empty(), ErrorKind::invalid_argument, "empty view pairing");
  require(teacher_q.rows() == student_logits.rows(), ErrorKind::shape,
          "teacher and student must score the same prototype count");
  for (auto [t, s] : pairing) {
    require(t >= 0 && t < teacher_q.cols(), ErrorKind::invalid_argument,
            "pairing references a missing teacher view");
    require(s >= 0 && s < student_logits.cols(), ErrorKind::invalid_argument,
            "pairing references a missing student view");
  }
}

}  // namespace

template <typename S>
S image_loss(const Mat<S>& teacher_q, const Mat<S>& student_logits,
             const std::vector<std::pair<int, int>>& pairing, double student_temp) {
  check_pairing(teacher_q, student_logits, pairing);
  LogSoftmaxCache<S> cache(student_logits, student_temp);
  S acc = 0;
  for (auto [t, s] : pairing) acc -= teacher_q.col(t).dot(cache.col(s));
  return acc / S(pairing.size());
}

template <typename S>
S image_loss_grad(const Mat<S>& teacher_q, const Mat<S>& student_logits,
                  const std::vector<std::pair<int, int>>& pairing, double student_temp,
                  Mat<S>& d_student_logits) {
  check_pairing(teacher_q, student_logits, pairing);
  LogSoftmaxCache<S> cache(student_logits, student_temp);
  d_student_logits = Mat<S>::Zero(student_logits.rows(), student_logits.cols());
  const S scale = S(1) / (S(pairing.size()) * S(student_temp));
  S acc = 0;
  for (auto [t, s] : pairing) {
    auto logp = cache.col(s);
    acc -= teacher_q.col(t).dot(logp);
    S q_mass = teacher_q.col(t).sum();
    d_student_logits.col(s) +=
        (logp.array().exp() * q_mass - teacher_q.col(t).array()).matrix() * scale;
  }
  return acc / S(pairing.size());
}

template <typename S>
S patch_loss(const Mat<S>& student_proj, const Mat<S>& teacher_proj,
             const std::vector<int>& target_cols) {
  require(size_t(student_proj.cols()) == target_cols.size(), ErrorKind::shape,
          "one target column per masked patch");
  if (target_cols.empty()) return S(0);
  require(student_proj.rows() == teacher_proj.rows(), ErrorKind::shape,
          "student and teacher projections must share a dimension");
  S acc = 0;
  for (size_t m = 0; m < target_cols.size(); ++m) {
    int t = target_cols[m];
    require(t >= 0 && t < teacher_proj.cols(), ErrorKind::alignment,
            "masked patch maps outside the teacher grid");
    acc += (student_proj.col(Eigen::Index(m)) - teacher_proj.col(t)).squaredNorm();
  }
  return acc / S(target_cols.size());
}

template <typename S>
S patch_loss_grad(const Mat<S>& student_proj, const Mat<S>& teacher_proj,
                  const std::vector<int>& target_cols, Mat<S>& d_student_proj) {
  S loss = patch_loss(student_proj, teacher_proj, target_cols);
  d_student_proj = Mat<S>::Zero(student_proj.rows(), student_proj.cols());
  if (target_cols.empty()) return loss;
  const S scale = S(2) / S(target_cols.size());
  for (size_t m = 0; m < target_cols.size(); ++m)
    d_student_proj.col(Eigen::Index(m)) =
        (student_proj.col(Eigen::Index(m)) - teacher_proj.col(target_cols[m])) * scale;
  return loss;
}

namespace {

// nearest other column per column, ties to the smallest index
template <typename S>
void nearest_neighbors(const Mat<S>& z, std::vector<int>& nn, std::vector<S>& rho) {
  const int B = int(z.cols());
  Mat<S> g = z.transpose() * z;
  nn.assign(size_t(B), -1);
  rho.assign(size_t(B), S(0));
  for (int i = 0; i < B; ++i) {
    S best = std::numeric_limits<S>::max();
    int who = -1;
    for (int j = 0; j < B; ++j) {
      if (j == i) continue;
      S d2 = std::max(S(0), g(i, i) + g(j, j) - 2 * g(i, j));
      if (d2 < best) {
        best = d2;
        who = j;
      }
    }
    nn[size_t(i)] = who;
    rho[size_t(i)] = std::sqrt(best);
  }
}

}  // namespace

template <typename S>
S koleo_loss(const Mat<S>& z, double eps) {
  require(z.cols() >= 2, ErrorKind::invalid_argument, "need at least two samples");
  require(eps > 0, ErrorKind::invalid_argument, "eps must be positive");
  std::vector<int> nn;
  std::vector<S> rho;
  nearest_neighbors(z, nn, rho);
  S acc = 0;
  for (S r : rho) acc += std::log(r + S(eps));
  return -acc / S(z.cols());
}

template <typename S>
S koleo_loss_grad(const Mat<S>& z, double eps, Mat<S>& d_z) {
  require(z.cols() >= 2, ErrorKind::invalid_argument, "need at least two samples");
  require(eps > 0, ErrorKind::invalid_argument, "eps must be positive");
  std::vector<int> nn;
  std::vector<S> rho;
  nearest_neighbors(z, nn, rho);
  const int B = int(z.cols());
  d_z = Mat<S>::Zero(z.rows(), z.cols());
  S acc = 0;
  for (int i = 0; i < B; ++i) {
    acc += std::log(rho[size_t(i)] + S(eps));
    if (rho[size_t(i)] <= S(1e-12)) continue;  // coincident points: flat direction
    S coef = S(-1) / (S(B) * rho[size_t(i)] * (rho[size_t(i)] + S(eps)));
    auto diff = (z.col(i) - z.col(nn[size_t(i)])).eval();
    d_z.col(i) += coef * diff;
    d_z.col(nn[size_t(i)]) -= coef * diff;
  }
  return -acc / S(B);
}

namespace {

template <typename S>
Mat<S> center_columns(const Mat<S>& x) {
  return x.colwise() - x.rowwise().mean();
}

}  // namespace

template <typename S>
S gram_loss(const Mat<S>& student_patches, const Mat<S>& anchor_patches) {
  require(student_patches.cols() == anchor_patches.cols(), ErrorKind::shape,
          "both sides must cover the same patch count");
  const int N = int(student_patches.cols());
  require(N >= 1, ErrorKind::invalid_argument, "need at least one patch");
  Mat<S> xs = center_columns(student_patches);
  Mat<S> xa = center_columns(anchor_patches);
  Mat<S> delta = xs.transpose() * xs - xa.transpose() * xa;
  return delta.squaredNorm() / (S(N) * S(N));
}

template <typename S>
S gram_loss_grad(const Mat<S>& student_patches, const Mat<S>& anchor_patches, Mat<S>& d_student) {
  require(student_patches.cols() == anchor_patches.cols(), ErrorKind::shape,
          "both sides must cover the same patch count");
  const int N = int(student_patches.cols());
  require(N >= 1, ErrorKind::invalid_argument, "need at least one patch");
  Mat<S> xs = center_columns(student_patches);
  Mat<S> xa = center_columns(anchor_patches);
  Mat<S> delta = xs.transpose() * xs - xa.transpose() * xa;
  d_student = xs * delta * (S(4) / (S(N) * S(N)));
  d_student = center_columns(d_student);  // undo the centering map
  return delta.squaredNorm() / (S(N) * S(N));
}

namespace {

struct ContrastIndex {
  std::vector<int> anchors;
  std::vector<std::vector<int>> positives;  // per sample (empty when not an anchor)
};

inline ContrastIndex index_contrast(const std::vector<int>& ids, int n) {
  require(int(ids.size()) == n, ErrorKind::shape, "one material id per column");
  ContrastIndex out;
  out.positives.resize(size_t(n));
  for (int i = 0; i < n; ++i) {
    bool has_negative = false;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      if (ids[size_t(j)] == ids[size_t(i)])
        out.positives[size_t(i)].push_back(j);
      else
        has_negative = true;
    }
    if (!out.positives[size_t(i)].empty()) {
      require(has_negative, ErrorKind::degenerate_batch,
              "an anchor has no negative in the batch");
      out.anchors.push_back(i);
    }
  }
  require(!out.anchors.empty(), ErrorKind::degenerate_batch,
          "no sample has a positive in the batch");
  return out;
}

}  // namespace

template <typename S>
S infonce_loss(const Mat<S>& z, const std::vector<int>& material_ids, double tau) {
  require(tau > 0, ErrorKind::invalid_argument, "tau must be positive");
  const int n = int(z.cols());
  require(n >= 2, ErrorKind::invalid_argument, "need at least two samples");
  ContrastIndex idx = index_contrast(material_ids, n);
  Mat<S> sims = z.transpose() * z;
  S acc = 0;
  for (int i : idx.anchors) {
    S mx = -std::numeric_limits<S>::max();
    for (int k = 0; k < n; ++k)
      if (k != i) mx = std::max(mx, sims(k, i) / S(tau));
    S denom = 0;
    for (int k = 0; k < n; ++k)
      if (k != i) denom += std::exp(sims(k, i) / S(tau) - mx);
    S numer = 0;
    for (int j : idx.positives[size_t(i)]) numer += std::exp(sims(j, i) / S(tau) - mx);
    acc += std::log(denom) - std::log(numer);
  }
  return acc / S(idx.anchors.size());
}

template <typename S>
S infonce_loss_grad(const Mat<S>& z, const std::vector<int>& material_ids, double tau,
                    Mat<S>& d_z) {
  require(tau > 0, ErrorKind::invalid_argument, "tau must be positive");
  const int n = int(z.cols());
  require(n >= 2, ErrorKind::invalid_argument, "need at least two samples");
  ContrastIndex idx = index_contrast(material_ids, n);
  Mat<S> sims = z.transpose() * z;
  d_z = Mat<S>::Zero(z.rows(), z.cols());
  const S inv_at = S(1) / (S(idx.anchors.size()) * S(tau));
  S acc = 0;
  for (int i : idx.anchors) {
    S mx = -std::numeric_limits<S>::max();
    for (int k = 0; k < n; ++k)
      if (k != i) mx = std::max(mx, sims(k, i) / S(tau));
    std::vector<S> w(size_t(n), S(0));
    S denom = 0, numer = 0;
    for (int k = 0; k < n; ++k) {
      if (k == i) continue;
      w[size_t(k)] = std::exp(sims(k, i) / S(tau) - mx);
      denom += w[size_t(k)];
    }
    std::vector<char> is_pos(size_t(n), 0);
    for (int j : idx.positives[size_t(i)]) {
      is_pos[size_t(j)] = 1;
      numer += w[size_t(j)];
    }
    acc += std::log(denom) - std::log(numer);
    for (int k = 0; k < n; ++k) {
      if (k == i) continue;
      S g = inv_at * (w[size_t(k)] / denom - (is_pos[size_t(k)] ? w[size_t(k)] / numer : S(0)));
      d_z.col(i) += g * z.col(k);
      d_z.col(k) += g * z.col(i);
    }
  }
  return acc / S(idx.anchors.size());
}

LossBreakdown total_loss(double image, double patch, double koleo, double gram, double contrast,
                         const LossWeights& w, bool gram_active) {
  w.validate();
  auto check = [](double v, const char* name) {
    require(std::isfinite(v), ErrorKind::numeric,
            std::string("non-finite loss term: ") + name);
  };
  check(image, "image");
  check(patch, "patch");
  check(koleo, "koleo");
  check(gram, "gram");
  check(contrast, "contrast");
  LossBreakdown out;
  out.image = image;
  out.patch = patch;
  out.koleo = koleo;
  out.gram = gram_active ? gram : 0.0;
  out.contrast = contrast;
  out.total = out.image + w.lambda_p * out.patch + w.lambda_k * out.koleo +
              w.lambda_g * out.gram + w.lambda_c * out.contrast;
  return out;
}

double grad_check(const std::function<double()>& value, double* params, const double* analytic,
                  size_t count, int probe_count, double step, uint64_t seed) {
  require(count > 0 && step > 0, ErrorKind::invalid_argument, "empty probe space");
  Rng rng = Rng::stream(seed, {0x67636b75});
  int k = int(std::min<size_t>(size_t(probe_count), count));
  std::vector<int> picks = rng.sample_without_replacement(int(count), k);
  double worst = 0;
  for (int idx : picks) {
    double orig = params[idx];
    params[idx] = orig + step;
    double up = value();
    params[idx] = orig - step;
    double down = value();
    params[idx] = orig;
    double numeric = (up - down) / (2 * step);
    double denom = std::max({std::abs(numeric), std::abs(analytic[idx]), 1e-8});
    worst = std::max(worst, std::abs(numeric - analytic[idx]) / denom);
  }
  return worst;
}

#define PHIEAT_INSTANTIATE(S)                                                                  \
  template Mat<S> sinkhorn_assign<S>(const Mat<S>&, double, int);                              \
  template S image_loss<S>(const Mat<S>&, const Mat<S>&,                                       \
                           const std::vector<std::pair<int, int>>&, double);                   \
  template S image_loss_grad<S>(const Mat<S>&, const Mat<S>&,                                  \
                                const std::vector<std::pair<int, int>>&, double, Mat<S>&);     \
  template S patch_loss<S>(const Mat<S>&, const Mat<S>&, const std::vector<int>&);             \
  template S patch_loss_grad<S>(const Mat<S>&, const Mat<S>&, const std::vector<int>&,         \
                                Mat<S>&);                                                      \
  template S koleo_loss<S>(const Mat<S>&, double);                                             \
  template S koleo_loss_grad<S>(const Mat<S>&, double, Mat<S>&);                               \
  template S gram_loss<S>(const Mat<S>&, const Mat<S>&);                                       \
  template S gram_loss_grad<S>(const Mat<S>&, const Mat<S>&, Mat<S>&);                         \
  template S infonce_loss<S>(const Mat<S>&, const std::vector<int>&, double);                  \
  template S infonce_loss_grad<S>(const Mat<S>&, const std::vector<int>&, double, Mat<S>&);

PHIEAT_INSTANTIATE(float)
PHIEAT_INSTANTIATE(double)
#undef PHIEAT_INSTANTIATE

}  // namespace phieat::objectives
