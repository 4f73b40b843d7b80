#include <doctest.h>

#include "osrm/error.hpp"
#include "osrm/linalg.hpp"
#include "osrm/subspace.hpp"
#include "support.hpp"

#include <cmath>

using namespace osrm;
using namespace osrm::subspace;

namespace {

FeatureBank bank(const std::string& task, const Matrix& h, FeatureMode mode = FeatureMode::full) {
  FeatureBank b;
  b.task = task;
  b.layers["layer0"] = h;
  b.k = mode == FeatureMode::full ? static_cast<int>(h.rows()) : 7;
  b.mode = mode;
  return b;
}

// Gaussian matrix orthonormalized by Eigen's QR directly, independent of the
// library's own orthonormalization.
Matrix random_row_orthonormal(std::mt19937_64& rng, int r, int n) {
  const Matrix g = test::randn(rng, n, r);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, r);
  return q.transpose();
}

double objective(const Matrix& a, const Matrix& h) {
  return (a * h.transpose()).squaredNorm();
}

double orth_error(const Matrix& a) {
  return (a * a.transpose() - Matrix::Identity(a.rows(), a.rows())).norm();
}

// Kahan-summed column means.
Matrix compensated_mean(const Matrix& h) {
  Matrix out(1, h.cols());
  for (Eigen::Index c = 0; c < h.cols(); ++c) {
    double sum = 0, comp = 0;
    for (Eigen::Index r = 0; r < h.rows(); ++r) {
      const double y = h(r, c) - comp;
      const double t = sum + y;
      comp = (t - sum) - y;
      sum = t;
    }
    out(0, c) = sum / static_cast<double>(h.rows());
  }
  return out;
}

}  // namespace

TEST_CASE("excluded features stack the other tasks in order") {
  std::mt19937_64 rng(1);
  SUBCASE("two tasks") {
    const Matrix h2 = test::randn(rng, 5, 4);
    std::vector<FeatureBank> banks{bank("T1", test::randn(rng, 5, 4)), bank("T2", h2)};
    CHECK(build_excluded_features(banks, "T1").at("layer0") == h2);
  }
  SUBCASE("three tasks averaged") {
    std::vector<FeatureBank> banks;
    for (int t = 1; t <= 3; ++t) {
      banks.push_back(average_features(bank("T" + std::to_string(t), test::randn(rng, 10, 6))));
    }
    const Matrix h = build_excluded_features(banks, "T2").at("layer0");
    REQUIRE(h.rows() == 2);
    CHECK(h.row(0) == banks[0].layers["layer0"].row(0));
    CHECK(h.row(1) == banks[2].layers["layer0"].row(0));
  }
  SUBCASE("four tasks full") {
    std::vector<FeatureBank> banks;
    for (int t = 1; t <= 4; ++t) banks.push_back(bank("T" + std::to_string(t), test::randn(rng, 10, 3)));
    const Matrix h = build_excluded_features(banks, "T3").at("layer0");
    REQUIRE(h.rows() == 30);
    CHECK(h.middleRows(0, 10) == banks[0].layers["layer0"]);
    CHECK(h.middleRows(10, 10) == banks[1].layers["layer0"]);
    CHECK(h.middleRows(20, 10) == banks[3].layers["layer0"]);
  }
  SUBCASE("errors") {
    std::vector<FeatureBank> one{bank("T1", test::randn(rng, 3, 4))};
    CHECK_THROWS_AS(build_excluded_features(one, "T1"), ValidationError);
    std::vector<FeatureBank> mixed{bank("T1", test::randn(rng, 3, 4)), bank("T2", test::randn(rng, 3, 4)),
                                   average_features(bank("T3", test::randn(rng, 3, 4)))};
    CHECK_THROWS_AS(build_excluded_features(mixed, "T1"), ValidationError);
    std::vector<FeatureBank> widths{bank("T1", test::randn(rng, 3, 4)), bank("T2", test::randn(rng, 3, 4)),
                                    bank("T3", test::randn(rng, 3, 5))};
    CHECK_THROWS_AS(build_excluded_features(widths, "T1"), ValidationError);
  }
}

TEST_CASE("average_features") {
  Matrix one(1, 3);
  one << 1, -2, 5;
  CHECK(average_features(bank("T", one)).layers["layer0"] == one);

  Matrix h(2, 2);
  h << 1, 3, 3, 1;
  Matrix mean(1, 2);
  mean << 2, 2;
  const auto avg = average_features(bank("T", h));
  CHECK(avg.layers.at("layer0") == mean);
  CHECK(avg.mode == FeatureMode::averaged);
  CHECK(avg.k == 2);

  std::mt19937_64 rng(2);
  const Matrix r = test::randn(rng, 100, 16, 5.0);
  CHECK(test::max_abs_diff(average_features(bank("T", r)).layers["layer0"], compensated_mean(r)) < 1e-12);
  CHECK_THROWS_AS(average_features(avg), ValidationError);
}

TEST_CASE("osrm_init examples") {
  SUBCASE("rank-deficient H is annihilated") {
    Matrix h(4, 3);
    h << 1, 0, 0, -2, 0, 0, 0.5, 0, 0, 3, 0, 0;
    const auto res = osrm_init(h, 2);
    CHECK(res.objective < 1e-24);
    CHECK(res.a_tilde.col(0).norm() < 1e-12);
    CHECK(orth_error(res.a_tilde) < 1e-12);
  }
  SUBCASE("zero H") {
    const auto res = osrm_init(Matrix::Zero(3, 4), 3);
    CHECK(res.objective == 0);
    CHECK(orth_error(res.a_tilde) < 1e-12);
  }
  SUBCASE("2x2 closed form") {
    const auto& c = test::derived()["osrm_init"];
    const auto res = osrm_init(test::to_matrix(c["h"]), c["r"].get<int>(), 2);
    CHECK(std::abs(res.objective - c["objective"].get<double>()) < 1e-12);
    CHECK(test::max_abs_diff(res.a_tilde, test::to_matrix(c["a_tilde"])) < 1e-12);
    REQUIRE(res.covariance_objective.has_value());
    CHECK(*res.covariance_objective == doctest::Approx(res.objective));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(osrm_init(Matrix::Ones(3, 4), 0), ValidationError);
    CHECK_THROWS_AS(osrm_init(Matrix::Ones(3, 4), 5), ValidationError);
    CHECK_THROWS_AS(osrm_init(Matrix(0, 4), 1), ValidationError);
  }
}

TEST_CASE("optimality certificate against random row-orthonormal competitors") {
  std::mt19937_64 rng(3);
  for (int inst = 0; inst < 40; ++inst) {
    const int n = test::uniform_int(rng, 4, 32);
    const int m = test::uniform_int(rng, 3, 64);
    const int r = test::uniform_int(rng, 1, n);
    const Matrix h = test::randn(rng, m, n);
    const auto res = osrm_init(h, r, m);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(h.transpose() * h));
    const double bound = es.eigenvalues().head(r).sum();
    CHECK(std::abs(res.objective - bound) <= 1e-6 * std::max(1.0, bound));
    CHECK(orth_error(res.a_tilde) <= 1e-8);
    for (int c = 0; c < 200; ++c) {
      CHECK(res.objective <= objective(random_row_orthonormal(rng, r, n), h) + 1e-9);
    }
  }
}

TEST_CASE("averaged features leave an exact null space") {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 50; ++rep) {
    const int n = test::uniform_int(rng, 4, 24);
    const int tasks = test::uniform_int(rng, 2, std::min(6, n));
    const int r = test::uniform_int(rng, 1, n - (tasks - 1));
    std::vector<FeatureBank> banks;
    for (int t = 0; t < tasks; ++t) {
      banks.push_back(average_features(bank("T" + std::to_string(t), test::randn(rng, 20, n, 3.0))));
    }
    const auto init = osrm_init_layers(banks, "T0", r);
    const Matrix h = build_excluded_features(banks, "T0").at("layer0");
    CHECK(init.objective.at("layer0") <= 1e-9 * h.squaredNorm());
    CHECK(orth_error(init.a_tilde.at("layer0")) <= 1e-8);
  }
}

TEST_CASE("solution subspace is invariant to scaling H") {
  std::mt19937_64 rng(5);
  int checked = 0;
  for (int rep = 0; rep < 30; ++rep) {
    const int n = test::uniform_int(rng, 4, 16);
    const int r = test::uniform_int(rng, 1, n - 1);
    const Matrix h = test::randn(rng, test::uniform_int(rng, 3, 40), n);
    const Vector ev = linalg::sym_eig(linalg::gram(h)).values;
    if (ev(r) - ev(r - 1) <= 1e-6 * std::max(1.0, std::abs(ev(r)))) continue;
    for (double c : {1e-3, 0.5, 7.0, 1e3}) {
      const auto a = osrm_init(h, r);
      const auto b = osrm_init(c * h, r);
      CHECK(b.objective / (c * c) == doctest::Approx(a.objective).epsilon(1e-8));
      // Same subspace: some orthogonal Ω maps one basis onto the other.
      CHECK(linalg::procrustes_distance(b.a_tilde, a.a_tilde).distance <= 1e-6);
    }
    ++checked;
  }
  CHECK(checked > 20);
}

TEST_CASE("interference norm") {
  const auto& c = test::derived()["interference"];
  CHECK(interference_norm(test::to_matrix(c["b"]), test::to_matrix(c["a"]), test::to_matrix(c["h"]),
                          c["scale"].get<double>()) == doctest::Approx(c["norm"].get<double>()).epsilon(1e-14));
  Matrix a(1, 2);
  a << 0, 1;
  Matrix h(3, 2);
  h << 1, 0, -2, 0, 5, 0;
  CHECK(interference_norm(Matrix::Ones(4, 1), a, h, 3.0) == 0.0);
  CHECK(interference_norm(Matrix::Zero(4, 1), Matrix::Ones(1, 2), h, 3.0) == 0.0);
  CHECK_THROWS_AS(interference_norm(Matrix::Ones(4, 2), a, h, 1.0), ValidationError);
}

TEST_CASE("feature banks persist as checkpoints") {
  std::mt19937_64 rng(6);
  FeatureBank b = bank("T4", test::randn(rng, 12, 5));
  b.layers["layer1"] = test::randn(rng, 12, 5);
  const auto c = to_checkpoint(b);
  CHECK(c.role == io::Role::features);
  CHECK(c.require_meta("mode") == "full");
  CHECK(c.require_meta("k") == "12");
  const auto back = bank_from_checkpoint(io::deserialize(io::serialize(c)));
  CHECK(back.task == "T4");
  CHECK(back.layers == b.layers);

  const auto avg = bank_from_checkpoint(to_checkpoint(average_features(b)));
  CHECK(avg.mode == FeatureMode::averaged);
  CHECK(avg.k == 12);
}
