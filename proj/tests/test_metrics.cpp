#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "gafield/metrics.hpp"
#include "gafield/rng.hpp"

using namespace gafield;

TEST_CASE("metrics: hand-computed fixture y=(1,2,3), yhat=(1,2,5)") {
  const std::vector<double> y{1, 2, 3};
  const std::vector<double> yhat{1, 2, 5};
  CHECK(mse(yhat, y) == 4.0 / 3.0);
  CHECK(mae(yhat, y) == 2.0 / 3.0);
  CHECK(maxae(yhat, y) == 2.0);
  CHECK(rel_l2(yhat, y) == 2.0 / std::sqrt(14.0));
  CHECK(rel_l1(yhat, y) == 2.0 / 6.0);
  // R^2 = 1 - 4/2 = -1.
  CHECK(r2(yhat, y) == -1.0);
}

TEST_CASE("metrics: perfect prediction and mean predictor identities") {
  Rng rng(601);
  std::vector<double> y(40);
  for (auto& v : y) v = rng.uniform(-3.0, 3.0);

  MetricReport perfect = compute_metrics(y, y);
  CHECK(perfect.mse == 0.0);
  CHECK(perfect.mae == 0.0);
  CHECK(perfect.maxae == 0.0);
  CHECK(perfect.rel_l1 == 0.0);
  CHECK(perfect.rel_l2 == 0.0);
  CHECK(std::abs(perfect.r2 - 1.0) <= 1e-12);

  double mean = 0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(y.size());
  std::vector<double> constant(y.size(), mean);
  CHECK(std::abs(r2(constant, y)) <= 1e-12);
}

TEST_CASE("metrics: zero denominators surface as a distinct condition") {
  const std::vector<double> zeros(5, 0.0);
  const std::vector<double> ones(5, 1.0);
  CHECK_THROWS_AS(rel_l2(ones, zeros), MetricError);
  CHECK_THROWS_AS(rel_l1(ones, zeros), MetricError);
  CHECK_THROWS_AS(r2(zeros, ones), MetricError);  // constant truth
  CHECK_THROWS_AS(mse(std::vector<double>{1.0}, std::vector<double>{}), MetricError);
}

TEST_CASE("metrics: relative errors are scale invariant") {
  Rng rng(603);
  std::vector<double> y(30), yhat(30);
  for (std::size_t i = 0; i < 30; ++i) {
    y[i] = rng.uniform(-2.0, 2.0);
    yhat[i] = y[i] + rng.uniform(-0.5, 0.5);
  }
  for (double c : {2.0, -3.5, 0.125}) {
    std::vector<double> cy(30), cyh(30);
    for (std::size_t i = 0; i < 30; ++i) {
      cy[i] = c * y[i];
      cyh[i] = c * yhat[i];
    }
    CHECK(rel_l2(cyh, cy) == doctest::Approx(rel_l2(yhat, y)).epsilon(1e-13));
    CHECK(rel_l1(cyh, cy) == doctest::Approx(rel_l1(yhat, y)).epsilon(1e-13));
  }
}

TEST_CASE("metrics: maxae dominates mae; mse vs mae^2 obeys Jensen") {
  Rng rng(605);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> y(25), yhat(25);
    for (std::size_t i = 0; i < 25; ++i) {
      y[i] = rng.uniform(-2.0, 2.0);
      yhat[i] = y[i] + rng.uniform(-1.0, 1.0);
    }
    const double a = mae(yhat, y);
    CHECK(maxae(yhat, y) >= a);
    // E[r^2] >= (E|r|)^2 holds for every residual distribution, with
    // equality exactly when all |residuals| coincide.
    CHECK(mse(yhat, y) >= a * a - 1e-15);
  }
  // Equality case: all residuals equal.
  std::vector<double> y{1, 2, 3, 4};
  std::vector<double> yhat{1.5, 2.5, 3.5, 4.5};
  CHECK(mse(yhat, y) == doctest::Approx(mae(yhat, y) * mae(yhat, y)).epsilon(1e-15));
  // Strict inequality once residual magnitudes differ.
  std::vector<double> uneven{1.1, 2.9, 3.0, 4.0};
  CHECK(mse(uneven, y) > mae(uneven, y) * mae(uneven, y));
}

TEST_CASE("metrics: permutation invariance of all six") {
  Rng rng(607);
  std::vector<double> y(32), yhat(32);
  for (std::size_t i = 0; i < 32; ++i) {
    y[i] = rng.uniform(-1.0, 1.0);
    yhat[i] = y[i] + rng.uniform(-0.3, 0.3);
  }
  std::vector<std::size_t> perm(32);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  std::vector<double> py(32), pyh(32);
  for (std::size_t i = 0; i < 32; ++i) {
    py[i] = y[perm[i]];
    pyh[i] = yhat[perm[i]];
  }
  CHECK(mse(pyh, py) == doctest::Approx(mse(yhat, y)).epsilon(1e-13));
  CHECK(mae(pyh, py) == doctest::Approx(mae(yhat, y)).epsilon(1e-13));
  CHECK(maxae(pyh, py) == maxae(yhat, y));
  CHECK(r2(pyh, py) == doctest::Approx(r2(yhat, y)).epsilon(1e-12));
  CHECK(rel_l2(pyh, py) == doctest::Approx(rel_l2(yhat, y)).epsilon(1e-13));
  CHECK(rel_l1(pyh, py) == doctest::Approx(rel_l1(yhat, y)).epsilon(1e-13));
}

TEST_CASE("metrics: report averaging and serialization") {
  MetricReport a;
  a.mse = 1.0; a.mae = 0.5; a.maxae = 2.0; a.r2 = 0.9; a.rel_l2 = 0.1; a.rel_l1 = 0.2;
  a.sample_count = 1;
  MetricReport b = a;
  b.mse = 3.0;
  MetricReport avg = average_reports({a, b});
  CHECK(avg.mse == doctest::Approx(2.0));
  CHECK(avg.sample_count == 2);

  const std::string csv = metric_report_csv(avg);
  CHECK(csv.find("mse,mae,maxae,r2,rel_l2,rel_l1,samples") == 0);
  CHECK(metric_report_table(avg).find("RelL2") != std::string::npos);
  CHECK_THROWS_AS(average_reports({}), MetricError);
}
