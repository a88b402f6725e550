#include <doctest.h>

#include <cmath>
#include <vector>

#include <Eigen/QR>

#include "phieat/core/errors.hpp"
#include "phieat/core/rng.hpp"
#include "phieat/objectives/objectives.hpp"

using namespace phieat;
using namespace phieat::objectives;

namespace {

Mat<double> random_mat(int rows, int cols, uint64_t seed, double scale = 1.0) {
  Rng r = Rng::stream(seed, {0x6f626a74});
  Mat<double> m(rows, cols);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = scale * r.normal();
  return m;
}

Mat<double> normalized_columns(int rows, int cols, uint64_t seed) {
  Mat<double> m = random_mat(rows, cols, seed);
  for (int c = 0; c < cols; ++c) m.col(c).normalize();
  return m;
}

// independent Sinkhorn oracle via explicit row/column scaling vectors
Mat<double> sinkhorn_oracle(const Mat<double>& logits, double temp, int iters) {
  const int B = int(logits.rows()), K = int(logits.cols());
  Mat<double> m = (logits.array() / temp).exp();
  Eigen::VectorXd u = Eigen::VectorXd::Ones(B), v = Eigen::VectorXd::Ones(K);
  for (int it = 0; it < iters; ++it) {
    for (int k = 0; k < K; ++k) {
      double cs = (u.array() * m.col(k).array()).sum() * v(k);
      v(k) = cs > 0 ? v(k) * (double(B) / K) / cs : v(k);
    }
    for (int i = 0; i < B; ++i) {
      double rs = (v.array() * m.row(i).transpose().array()).sum() * u(i);
      u(i) = rs > 0 ? u(i) / rs : u(i);
    }
  }
  return u.asDiagonal() * m * v.asDiagonal();
}

}  // namespace

TEST_CASE("sinkhorn fixes the uniform distribution exactly") {
  Mat<double> logits = Mat<double>::Constant(6, 4, 0.37);
  Mat<double> q = sinkhorn_assign(logits, 0.07, 3);
  for (int i = 0; i < q.size(); ++i)
    CHECK(std::abs(q.data()[i] - 0.25) < 1e-12);
}

TEST_CASE("sinkhorn matches an independent scaling-vector oracle") {
  Mat<double> logits = random_mat(12, 5, 3, 0.5);
  Mat<double> ours = sinkhorn_assign(logits, 0.5, 3);
  Mat<double> ref = sinkhorn_oracle(logits, 0.5, 3);
  CHECK((ours - ref).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("sinkhorn drives strong diagonal logits to near-identity rows") {
  Mat<double> logits(2, 2);
  logits << 10, 0, 0, 10;
  Mat<double> q = sinkhorn_assign(logits, 1.0, 3);
  CHECK(q(0, 0) > 0.99);
  CHECK(q(1, 1) > 0.99);
  CHECK(q(0, 1) < 0.01);
  CHECK(q(1, 0) < 0.01);
  Mat<double> ref = sinkhorn_oracle(logits, 1.0, 3);
  CHECK((q - ref).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("sinkhorn row sums are exact; column sums approach balance") {
  Rng seed_rng = Rng::stream(1, {0x736b});
  for (uint64_t s = 0; s < 5; ++s) {
    Rng r = Rng::stream(s, {0x736b6c});
    Mat<double> logits(64, 32);
    for (int i = 0; i < logits.size(); ++i) logits.data()[i] = r.uniform();
    Mat<double> q1 = sinkhorn_assign(logits, 1.0, 1);
    Mat<double> q3 = sinkhorn_assign(logits, 1.0, 3);
    for (int i = 0; i < 64; ++i) {
      CHECK(std::abs(q1.row(i).sum() - 1.0) < 1e-9);
      CHECK(std::abs(q3.row(i).sum() - 1.0) < 1e-9);
    }
    double target = 64.0 / 32.0;
    double err1 = 0, err3 = 0;
    for (int k = 0; k < 32; ++k) {
      err1 = std::max(err1, std::abs(q1.col(k).sum() - target));
      err3 = std::max(err3, std::abs(q3.col(k).sum() - target));
    }
    CHECK(err3 <= err1);
    CHECK(err3 < 1e-3);
    CHECK(q3.minCoeff() >= 0.0);
  }
}

TEST_CASE("sinkhorn rejects non-finite logits and degenerate shapes") {
  Mat<double> bad = Mat<double>::Zero(4, 4);
  bad(1, 2) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS((void)sinkhorn_assign(bad, 0.07, 3), Error);
  Mat<double> tiny = Mat<double>::Zero(1, 4);
  CHECK_THROWS_AS((void)sinkhorn_assign(tiny, 0.07, 3), Error);
}

TEST_CASE("image loss reproduces closed-form cross-entropy values") {
  // one-hot target, uniform student over K=4 -> ln 4
  Mat<double> q = Mat<double>::Zero(4, 1);
  q(2, 0) = 1.0;
  Mat<double> logits = Mat<double>::Zero(4, 1);
  std::vector<std::pair<int, int>> pairing{{0, 0}};
  CHECK(std::abs(image_loss(q, logits, pairing, 0.1) - std::log(4.0)) < 1e-9);

  // uniform target against uniform prediction -> entropy ln K
  Mat<double> qu = Mat<double>::Constant(5, 1, 0.2);
  Mat<double> lu = Mat<double>::Constant(5, 1, 1.3);
  CHECK(std::abs(image_loss(qu, lu, pairing, 0.1) - std::log(5.0)) < 1e-9);

  // teacher equals student softmax -> loss is the distribution's entropy
  Mat<double> raw = random_mat(6, 1, 9);
  Mat<double> p(6, 1);
  double mx = (raw / 0.1).maxCoeff();
  p = ((raw / 0.1).array() - mx).exp();
  p /= p.sum();
  double entropy = -(p.array() * p.array().log()).sum();
  CHECK(std::abs(image_loss(p, raw, pairing, 0.1) - entropy) < 1e-9);

  // decisive margin: k* ahead by 1.0 raw, temperature 0.1 -> tiny loss
  Mat<double> strong = Mat<double>::Zero(4, 1);
  strong(1, 0) = 1.0;
  Mat<double> one_hot = Mat<double>::Zero(4, 1);
  one_hot(1, 0) = 1.0;
  CHECK(image_loss(one_hot, strong, pairing, 0.1) < 1e-3);
  CHECK(image_loss(one_hot, strong, pairing, 0.1) > 0.0);

  CHECK_THROWS_AS((void)image_loss(q, logits, {}, 0.1), Error);
}

TEST_CASE("image loss averages over the pairing and ignores unpaired columns") {
  Mat<double> q(3, 2);
  q.col(0) << 1, 0, 0;
  q.col(1) << 0, 1, 0;
  Mat<double> logits = Mat<double>::Zero(3, 3);
  logits.col(2).setConstant(99.0);  // never referenced
  std::vector<std::pair<int, int>> pairing{{0, 0}, {1, 1}, {0, 1}, {1, 0}};
  double expect = std::log(3.0);  // every paired prediction is uniform
  CHECK(std::abs(image_loss(q, logits, pairing, 0.5) - expect) < 1e-9);
}

TEST_CASE("patch loss matches hand arithmetic and handles the empty case") {
  Mat<double> teacher = Mat<double>::Zero(6, 3);
  Mat<double> student = Mat<double>::Zero(6, 1);
  student(0, 0) = 3.0;
  student(1, 0) = 4.0;
  std::vector<int> map{1};
  CHECK(patch_loss(student, teacher, map) == doctest::Approx(25.0).epsilon(1e-12));

  // exact reconstruction
  Mat<double> t2 = random_mat(6, 4, 11);
  Mat<double> s2 = t2.leftCols(2);
  CHECK(patch_loss(s2, t2, {0, 1}) == 0.0);

  // empty mask contributes nothing
  Mat<double> empty(6, 0);
  CHECK(patch_loss(empty, t2, {}) == 0.0);

  // misaligned index
  CHECK_THROWS_AS((void)patch_loss(student, teacher, std::vector<int>{7}), Error);
}

TEST_CASE("koleo loss reproduces the symmetric closed forms") {
  Mat<double> anti(2, 2);
  anti << 1, -1, 0, 0;
  CHECK(std::abs(koleo_loss(anti, 1e-6) - (-std::log(2.0 + 1e-6))) < 1e-9);

  // three points equally spaced on the unit circle: nearest distance sqrt(3)
  Mat<double> tri(2, 3);
  for (int i = 0; i < 3; ++i) {
    double a = 2.0 * M_PI * i / 3.0;
    tri(0, i) = std::cos(a);
    tri(1, i) = std::sin(a);
  }
  CHECK(std::abs(koleo_loss(tri, 1e-6) - (-std::log(std::sqrt(3.0) + 1e-6))) < 1e-9);

  // duplicated point stays finite through the eps guard
  Mat<double> dup(2, 2);
  dup << 1, 1, 0, 0;
  CHECK(std::abs(koleo_loss(dup, 1e-6) - (-std::log(1e-6))) < 1e-9);

  Mat<double> lone(2, 1);
  CHECK_THROWS_AS((void)koleo_loss(lone, 1e-6), Error);
}

TEST_CASE("koleo loss is invariant to batch permutation and global rotation") {
  Mat<double> z = normalized_columns(8, 10, 21);
  double base = koleo_loss(z, 1e-6);

  Mat<double> perm(8, 10);
  int order[10] = {3, 1, 4, 0, 9, 2, 6, 8, 5, 7};
  for (int c = 0; c < 10; ++c) perm.col(c) = z.col(order[c]);
  CHECK(std::abs(koleo_loss(perm, 1e-6) - base) < 1e-12);

  Eigen::HouseholderQR<Mat<double>> qr(random_mat(8, 8, 22));
  Mat<double> rot = qr.householderQ() * z;
  CHECK(std::abs(koleo_loss(rot, 1e-6) - base) < 1e-9);
}

TEST_CASE("gram loss reproduces the hand-computed two-patch case") {
  // one feature dim, two patches; centered student (1,-1), anchor zero
  Mat<double> student(1, 2), anchor(1, 2);
  student << 1, -1;
  anchor << 0, 0;
  CHECK(gram_loss(student, anchor) == doctest::Approx(1.0).epsilon(1e-12));

  Mat<double> s = random_mat(5, 7, 31);
  CHECK(gram_loss(s, s) == 0.0);
  Mat<double> flipped = -s;
  CHECK(std::abs(gram_loss(s, flipped)) < 1e-18);

  Mat<double> wrong(5, 6);
  CHECK_THROWS_AS((void)gram_loss(s, wrong), Error);
}

TEST_CASE("gram loss sees only second-order structure") {
  Mat<double> s = random_mat(6, 9, 41);
  Mat<double> a = random_mat(6, 9, 42);
  double base = gram_loss(s, a);
  // orthogonal mixing of feature dims preserves patch-patch inner products
  Eigen::HouseholderQR<Mat<double>> qr(random_mat(6, 6, 43));
  Mat<double> q = qr.householderQ();
  Mat<double> qs = q * s, qa = q * a;
  CHECK(std::abs(gram_loss(qs, a) - base) < 1e-9);
  CHECK(std::abs(gram_loss(s, qa) - base) < 1e-9);
  // centering makes a constant patch offset invisible
  Mat<double> shifted = s.colwise() + Eigen::VectorXd::Constant(6, 0.7);
  CHECK(std::abs(gram_loss(shifted, a) - base) < 1e-9);
}

TEST_CASE("infonce loss reproduces the worked examples") {
  // anchor pair sharing an id plus one orthogonal sample with a unique id:
  // each anchor sees one positive at sim 1 and one negative at sim 0
  Mat<double> z(2, 3);
  z.col(0) << 1, 0;
  z.col(1) << 1, 0;
  z.col(2) << 0, 1;
  std::vector<int> ids{7, 7, 8};
  double e = std::exp(1.0);
  double expect = -std::log(e / (e + 1.0));
  CHECK(std::abs(infonce_loss(z, ids, 1.0) - expect) < 1e-9);
  CHECK(std::abs(expect - 0.31326) < 1e-5);

  double e10 = std::exp(10.0);
  double expect_sharp = -std::log(e10 / (e10 + 1.0));
  CHECK(std::abs(infonce_loss(z, ids, 0.1) - expect_sharp) < 1e-12);
  CHECK(expect_sharp < 1e-4);

  // four identical embeddings, ids in two pairs: all sims equal, one positive
  // among three others -> ln 3
  Mat<double> same = Mat<double>::Zero(3, 4);
  same.row(0).setOnes();
  std::vector<int> two_pairs{1, 1, 2, 2};
  CHECK(std::abs(infonce_loss(same, two_pairs, 0.7) - std::log(3.0)) < 1e-9);
}

TEST_CASE("infonce loss drops when a positive moves closer") {
  Mat<double> z(2, 4);
  z.col(0) << 1, 0;
  z.col(1) << std::cos(0.9), std::sin(0.9);
  z.col(2) << 0, 1;
  z.col(3) << -1, 0;
  std::vector<int> ids{1, 1, 2, 2};
  double far = infonce_loss(z, ids, 0.1);
  z.col(1) << std::cos(0.2), std::sin(0.2);
  double near = infonce_loss(z, ids, 0.1);
  CHECK(near < far);
}

TEST_CASE("infonce flags batches without positives or negatives") {
  Mat<double> z = normalized_columns(4, 4, 55);
  // all distinct ids: nobody has a positive
  CHECK_THROWS_AS((void)infonce_loss(z, {1, 2, 3, 4}, 0.1), Error);
  // all same id: anchors exist but no negatives
  CHECK_THROWS_AS((void)infonce_loss(z, {1, 1, 1, 1}, 0.1), Error);
  // unique-id samples may coexist with anchored pairs
  CHECK_NOTHROW((void)infonce_loss(z, {1, 1, 2, 3}, 0.1));
}

TEST_CASE("total loss applies the published weights exactly") {
  LossWeights w;
  LossBreakdown active = total_loss(1, 1, 1, 1, 1, w, true);
  CHECK(active.total == 3.05);
  CHECK(active.gram == 1.0);
  LossBreakdown inactive = total_loss(1, 1, 1, 1, 1, w, false);
  CHECK(inactive.total == 2.35);
  CHECK(inactive.gram == 0.0);
  LossBreakdown zero = total_loss(0, 0, 0, 0, 0, w, true);
  CHECK(zero.total == 0.0);
  // the breakdown invariant: total equals the weighted sum of stored fields
  LossBreakdown mixed = total_loss(0.3, 1.7, -0.2, 0.9, 0.05, w, true);
  double recomputed = mixed.image + w.lambda_p * mixed.patch + w.lambda_k * mixed.koleo +
                      w.lambda_g * mixed.gram + w.lambda_c * mixed.contrast;
  CHECK(mixed.total == recomputed);
  CHECK_THROWS_AS((void)total_loss(std::nan(""), 0, 0, 0, 0, w, true), Error);
  LossWeights bad;
  bad.student_temp = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("analytic loss gradients match central differences") {
  SUBCASE("koleo") {
    Mat<double> z = normalized_columns(16, 8, 61);
    Mat<double> dz;
    koleo_loss_grad(z, 1e-6, dz);
    auto value = [&]() { return koleo_loss(z, 1e-6); };
    double err = grad_check(value, z.data(), dz.data(), size_t(z.size()), 40, 1e-5, 612);
    CHECK(err < 1e-4);
  }
  SUBCASE("gram") {
    Mat<double> s = random_mat(8, 16, 62);
    Mat<double> a = random_mat(8, 16, 63);
    Mat<double> ds;
    gram_loss_grad(s, a, ds);
    auto value = [&]() { return gram_loss(s, a); };
    double err = grad_check(value, s.data(), ds.data(), size_t(s.size()), 40, 1e-5, 622);
    CHECK(err < 1e-4);
  }
  SUBCASE("infonce") {
    Mat<double> z = normalized_columns(12, 8, 64);
    std::vector<int> ids{0, 0, 1, 1, 2, 2, 3, 3};
    Mat<double> dz;
    infonce_loss_grad(z, ids, 0.1, dz);
    auto value = [&]() { return infonce_loss(z, ids, 0.1); };
    double err = grad_check(value, z.data(), dz.data(), size_t(z.size()), 40, 1e-5, 632);
    CHECK(err < 1e-4);
  }
  SUBCASE("image") {
    Mat<double> raw = random_mat(16, 4, 65);
    Mat<double> q(16, 2);
    q.col(0) = raw.col(0).array().exp();
    q.col(0) /= q.col(0).sum();
    q.col(1) = raw.col(1).array().exp();
    q.col(1) /= q.col(1).sum();
    Mat<double> logits = random_mat(16, 3, 66);
    std::vector<std::pair<int, int>> pairing{{0, 0}, {0, 1}, {1, 1}, {1, 2}};
    Mat<double> dl;
    image_loss_grad(q, logits, pairing, 0.1, dl);
    auto value = [&]() { return image_loss(q, logits, pairing, 0.1); };
    double err = grad_check(value, logits.data(), dl.data(), size_t(logits.size()), 40, 1e-5, 642);
    CHECK(err < 1e-4);
  }
  SUBCASE("patch") {
    Mat<double> teacher = random_mat(10, 6, 67);
    Mat<double> student = random_mat(10, 4, 68);
    std::vector<int> map{5, 0, 3, 3};
    Mat<double> ds;
    patch_loss_grad(student, teacher, map, ds);
    auto value = [&]() { return patch_loss(student, teacher, map); };
    double err = grad_check(value, student.data(), ds.data(), size_t(student.size()), 40, 1e-5, 652);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("grad values agree between plain and grad-returning variants") {
  Mat<double> z = normalized_columns(6, 5, 71);
  Mat<double> dz;
  CHECK(koleo_loss(z, 1e-6) == koleo_loss_grad(z, 1e-6, dz));
  Mat<double> a = random_mat(6, 5, 72);
  Mat<double> ds;
  CHECK(gram_loss(z, a) == gram_loss_grad(z, a, ds));
  std::vector<int> ids{0, 0, 1, 1, 2};
  Mat<double> dzz;
  CHECK(infonce_loss(z, ids, 0.1) == infonce_loss_grad(z, ids, 0.1, dzz));
}
