#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "pera/error.hpp"
#include "pera/objective.hpp"

using namespace pera;

namespace {

MatD random_mat(int rows, int cols, Rng& rng, double scale = 1.0) {
  MatD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

}  // namespace

TEST_CASE("softmax_h closed forms") {
  MatD equal = MatD::Constant(1, 5, 3.0);
  const MatD p = softmax_h(equal, 0.7);
  for (int k = 0; k < 5; ++k) CHECK(p(0, k) == doctest::Approx(0.2).epsilon(1e-15));

  MatD two(1, 2);
  two << 1.0, 0.0;
  const MatD q = softmax_h(two, 1.0);
  CHECK(q(0, 0) == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)).epsilon(1e-14));
  CHECK(q(0, 1) == doctest::Approx(1.0 / (std::exp(1.0) + 1.0)).epsilon(1e-14));

  double prev = 0.0;
  for (double tau : {1.0, 0.5, 0.1}) {
    const double top = softmax_h(two, tau)(0, 0);
    CHECK(top > prev);
    prev = top;
  }
  CHECK(softmax_h(two, 0.01)(0, 0) > 1.0 - 1e-12);
}

TEST_CASE("softmax_h sums to one and ignores constant shifts") {
  Rng rng{11};
  const MatD z = random_mat(6, 16, rng, 3.0);
  const MatD p = softmax_h(z, 0.3);
  const MatD shifted = softmax_h(MatD(z.array() + 17.5), 0.3);
  for (int r = 0; r < 6; ++r) CHECK(p.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(oracle::max_abs_diff(p, shifted) < 1e-12);
}

TEST_CASE("softmax_h rejects non-finite logits") {
  MatD z = MatD::Zero(1, 3);
  z(0, 1) = NAN;
  CHECK_THROWS_AS(softmax_h(z, 1.0), Error);
}

TEST_CASE("cls_loss of uniform distributions is ln K") {
  const int k = 12;
  const MatD zeros = MatD::Zero(3, k);
  const MatD c = MatD::Zero(1, k);
  CHECK(cls_loss(zeros, zeros, c, Temperatures{0.1, 0.04}) ==
        doctest::Approx(std::log(static_cast<double>(k))).epsilon(1e-14));
}

TEST_CASE("cls_loss with a one-hot teacher against a uniform student tends to ln K") {
  const int k = 8;
  MatD teacher = MatD::Zero(1, k);
  teacher(0, 3) = 50.0;
  const double loss = cls_loss(MatD(MatD::Zero(1, k)), teacher, MatD(MatD::Zero(1, k)),
                               Temperatures{0.1, 1e-3});
  CHECK(loss == doctest::Approx(std::log(8.0)).epsilon(1e-12));
}

TEST_CASE("cls_loss matches the loop oracle and bounds the teacher entropy") {
  Rng rng{21};
  for (int trial = 0; trial < 10; ++trial) {
    const MatD s = random_mat(4, 8, rng);
    const MatD t = random_mat(4, 8, rng);
    const MatD c = random_mat(1, 8, rng, 0.3);
    const double lib = cls_loss(s, t, c, Temperatures{0.1, 0.04});
    const double ref = oracle::cls_loss(oracle::to_table(s), oracle::to_table(t),
                                        oracle::to_table(c)[0], 0.1, 0.04);
    CHECK(oracle::max_rel_diff(lib, ref) < 1e-10);

    const MatD pt = softmax_h(MatD(t.rowwise() - c.row(0)), 0.04);
    for (int b = 0; b < 4; ++b) {
      const double ce = cls_loss(MatD(s.row(b)), MatD(t.row(b)), c, Temperatures{0.1, 0.04});
      CHECK(ce >= row_entropy(MatD(pt.row(b)))(0) - 1e-6);
    }
  }
}

TEST_CASE("cls_loss gradient is p_s - p_t over tpt_s per sample") {
  Rng rng{5};
  const MatD s = random_mat(3, 6, rng);
  const MatD t = random_mat(3, 6, rng);
  const MatD c = random_mat(1, 6, rng, 0.2);
  MatD grad;
  cls_loss(s, t, c, Temperatures{0.2, 0.05}, &grad);
  const double h = 1e-6;
  for (int b = 0; b < 3; ++b) {
    for (int k = 0; k < 6; ++k) {
      MatD sp = s, sm = s;
      sp(b, k) += h;
      sm(b, k) -= h;
      const double num = (cls_loss(sp, t, c, Temperatures{0.2, 0.05}) -
                          cls_loss(sm, t, c, Temperatures{0.2, 0.05})) /
                         (2 * h);
      CHECK(grad(b, k) == doctest::Approx(num).epsilon(1e-6));
    }
  }
}

TEST_CASE("cls_loss rejects mismatched prototype counts") {
  CHECK_THROWS_AS(cls_loss(MatD(MatD::Zero(2, 4)), MatD(MatD::Zero(2, 5)), MatD(MatD::Zero(1, 4)),
                           Temperatures{}),
                  Error);
}

TEST_CASE("centering keeps the teacher argmax of the shifted logits") {
  Rng rng{8};
  const MatD t = random_mat(5, 10, rng);
  const MatD c = random_mat(1, 10, rng);
  const MatD shifted = t.rowwise() - c.row(0);
  const MatD pt = softmax_h(shifted, 0.04);
  for (int b = 0; b < 5; ++b) {
    Eigen::Index a = 0, p = 0;
    shifted.row(b).maxCoeff(&a);
    pt.row(b).maxCoeff(&p);
    CHECK(a == p);
  }
}

TEST_CASE("mse_loss closed forms, oracle and linearity in w") {
  Rng rng{3};
  const MatD target = random_mat(5, 12, rng);
  CHECK(mse_loss(target, target, 1.0) == 0.0);
  CHECK(mse_loss(MatD(target.array() + 0.5), target, 1.0) == doctest::Approx(0.25).epsilon(1e-14));
  const MatD pred = random_mat(5, 12, rng);
  const double lib = mse_loss(pred, target, 0.7);
  CHECK(oracle::max_rel_diff(lib, oracle::mse(oracle::to_table(pred), oracle::to_table(target), 0.7)) <
        1e-12);
  CHECK(mse_loss(pred, target, 1.4) == 2.0 * mse_loss(pred, target, 0.7));
  CHECK(mse_loss(MatD(0, 12), MatD(0, 12), 1.0) == 0.0);
  CHECK_THROWS_AS(mse_loss(pred, MatD(MatD::Zero(5, 11)), 1.0), Error);
}

TEST_CASE("center update closed forms") {
  MatD logits(2, 3);
  logits << 1.0, 2.0, 3.0, 3.0, 4.0, 5.0;
  const MatD c0 = MatD::Zero(1, 3);
  const MatD c1 = updated_center(c0, logits, 0.9);
  CHECK(c1(0, 0) == doctest::Approx(0.2));
  CHECK(c1(0, 1) == doctest::Approx(0.3));
  CHECK(c1(0, 2) == doctest::Approx(0.4));
  CHECK(oracle::max_abs_diff(updated_center(c1, logits, 1.0), c1) == 0.0);
  CHECK_THROWS_AS(updated_center(c0, MatD(0, 3), 0.9), Error);

  MatD c = c0;
  for (int i = 0; i < 100; ++i) c = updated_center(c, logits, 0.9);
  const double factor = 1.0 - std::pow(0.9, 100);
  CHECK(std::abs(c(0, 0) - 2.0 * factor) < 1e-9);
  CHECK(std::abs(c(0, 2) - 4.0 * factor) < 1e-9);

  Center state{MatF::Zero(1, 3), 0.9};
  update_center(state, logits.cast<float>());
  CHECK(state.value(0, 1) == doctest::Approx(0.3f));
}

TEST_CASE("ema_update closed forms") {
  const auto cfg = oracle::tiny_config();
  Rng rng{4};
  auto student = init_network<double>(cfg.backbone, cfg.head, rng);
  auto teacher = zeros_like(student);
  for (auto& r : param_refs(teacher)) r.tensor->setConstant(1.0);
  for (auto& r : param_refs(student)) r.tensor->setConstant(0.0);
  ema_update(teacher, student, 0.9);
  for (auto& r : param_refs(teacher)) CHECK(r.tensor->maxCoeff() == doctest::Approx(0.9));

  auto frozen = teacher;
  auto other = init_network<double>(cfg.backbone, cfg.head, rng);
  ema_update(frozen, other, 1.0);
  for (std::size_t k = 0; k < param_refs(frozen).size(); ++k)
    CHECK(oracle::max_abs_diff(*param_refs(frozen)[k].tensor, *param_refs(teacher)[k].tensor) == 0.0);

  ema_update(frozen, other, 0.0);
  for (std::size_t k = 0; k < param_refs(frozen).size(); ++k)
    CHECK(oracle::max_abs_diff(*param_refs(frozen)[k].tensor, *param_refs(other)[k].tensor) == 0.0);
}

TEST_CASE("ema_update rejects structural mismatch") {
  auto cfg = oracle::tiny_config();
  Rng rng{4};
  auto a = init_network<double>(cfg.backbone, cfg.head, rng);
  cfg.backbone.depth = 3;
  auto b = init_network<double>(cfg.backbone, cfg.head, rng);
  CHECK_THROWS_AS(ema_update(a, b, 0.5), Error);
}
