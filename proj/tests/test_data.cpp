#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <set>

#include "gafield/data.hpp"
#include "testutil.hpp"

using namespace gafield;

namespace {

PointCloud tiny_surface_cloud() {
  PointCloud pc;
  pc.positions = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  pc.features = Tensor::zeros({3, 0});
  pc.normals = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  return pc;
}

}  // namespace

TEST_CASE("surface_features: inflow-angle channel") {
  PointCloud pc = tiny_surface_cloud();
  const std::array<double, 3> d{1, 0, 0};
  Tensor f = surface_features(pc, d);
  REQUIRE(f.shape() == Shape{3, 7});
  CHECK(f.vec()[6] == 1.0);        // n parallel to d
  CHECK(f.vec()[7 + 6] == 0.0);    // n perpendicular to d
  CHECK(f.vec()[14 + 6] == 0.0);

  // Random unit normals against the explicit dot product, d = (-1,0,0).
  Rng rng(501);
  PointCloud rc;
  rc.positions = testutil::random_cloud(20, rng);
  rc.features = Tensor::zeros({20, 0});
  rc.normals = Tensor::zeros({20, 3});
  for (std::size_t i = 0; i < 20; ++i) {
    double x = rng.normal(), y = rng.normal(), z = rng.normal();
    const double len = std::sqrt(x * x + y * y + z * z);
    rc.normals->storage()[i * 3] = x / len;
    rc.normals->storage()[i * 3 + 1] = y / len;
    rc.normals->storage()[i * 3 + 2] = z / len;
  }
  Tensor rf = surface_features(rc, {-1, 0, 0});
  for (std::size_t i = 0; i < 20; ++i)
    CHECK(rf.vec()[i * 7 + 6] == -rc.normals->vec()[i * 3]);

  PointCloud no_normals;
  no_normals.positions = rc.positions;
  no_normals.features = Tensor::zeros({20, 0});
  CHECK_THROWS_AS(surface_features(no_normals, d), DataError);
  CHECK_THROWS_AS(surface_features(pc, {1, 1, 0}), DataError);  // not unit
}

TEST_CASE("surface_features: translation invariance and normal negation of cos theta") {
  Rng rng(503);
  PointCloud pc = tiny_surface_cloud();
  Tensor f = surface_features(pc, {1, 0, 0});

  PointCloud moved = pc;
  moved.positions = add_scalar(pc.positions, 5.0);
  Tensor fm = surface_features(moved, {1, 0, 0});
  for (std::size_t i = 0; i < 3; ++i) CHECK(fm.vec()[i * 7 + 6] == f.vec()[i * 7 + 6]);

  PointCloud flipped = pc;
  flipped.normals = mul_scalar(*pc.normals, -1.0);
  Tensor ff = surface_features(flipped, {1, 0, 0});
  for (std::size_t i = 0; i < 3; ++i) CHECK(ff.vec()[i * 7 + 6] == -f.vec()[i * 7 + 6]);
}

TEST_CASE("volume_features: flag-gated initial velocity") {
  PointCloud pc;
  pc.positions = Tensor::from({4, 3}, {0, 0, 0, 1, 0, 0, 2, 0, 0, 3, 0, 0});
  pc.features = Tensor::zeros({4, 0});

  pc.surface = {1, 1, 1, 1};
  Tensor all_surface = volume_features(pc, {30, 0, 0}, false);
  REQUIRE(all_surface.shape() == Shape{4, 6});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t d = 3; d < 6; ++d) CHECK(all_surface.vec()[i * 6 + d] == 0.0);

  pc.surface = {0, 0, 0, 0};
  Tensor all_flow = volume_features(pc, {30, 0, 0}, false);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(all_flow.vec()[i * 6 + 3] == 30.0);
    CHECK(all_flow.vec()[i * 6 + 4] == 0.0);
    CHECK(all_flow.vec()[i * 6 + 5] == 0.0);
  }

  // Mixed cloud: channel equals the flag-gated selection.
  Rng rng(505);
  pc.surface = {1, 0, 1, 0};
  Tensor mixed = volume_features(pc, {30, -2, 1}, false);
  for (std::size_t i = 0; i < 4; ++i) {
    const double expect[3] = {pc.surface[i] ? 0.0 : 30.0, pc.surface[i] ? 0.0 : -2.0,
                              pc.surface[i] ? 0.0 : 1.0};
    for (std::size_t d = 0; d < 3; ++d) CHECK(mixed.vec()[i * 6 + 3 + d] == expect[d]);
  }

  pc.sdf = Tensor::row({0.0, 0.5, 0.0, 1.5});
  Tensor with_sdf = volume_features(pc, {30, 0, 0}, true);
  REQUIRE(with_sdf.shape() == Shape{4, 7});
  CHECK(with_sdf.vec()[1 * 7 + 6] == 0.5);

  PointCloud no_flags;
  no_flags.positions = pc.positions;
  CHECK_THROWS_AS(volume_features(no_flags, {30, 0, 0}, false), DataError);
}

TEST_CASE("normalize_pressure: reference constants and round trip") {
  Tensor p = Tensor::from({3, 1}, {-94.5, 22.75, 100.0});
  Tensor n = normalize_pressure(p);
  CHECK(n.vec()[0] == 0.0);
  CHECK(n.vec()[1] == 1.0);

  Tensor back = denormalize_pressure(n);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(std::abs(back.vec()[i] - p.vec()[i]) <= 1e-12 * std::abs(p.vec()[i]));

  CHECK_THROWS_AS(normalize_pressure(p, 0.0, 0.0), DataError);

  Normalizer norm = Normalizer::fit({p});
  Tensor applied = norm.apply(p);
  Tensor inverted = norm.invert(applied);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(std::abs(inverted.vec()[i] - p.vec()[i]) <= 1e-12 * std::abs(p.vec()[i]));

  Normalizer bad;
  bad.mean = Tensor::row({0.0});
  bad.stdev = Tensor::row({0.0});
  CHECK_THROWS_AS(bad.validate(), DataError);
}

TEST_CASE("wss_magnitude: fixtures and elementwise oracle") {
  Tensor t = Tensor::from({2, 3}, {3, 4, 0, 0, 0, 0});
  Tensor m = wss_magnitude(t);
  CHECK(m.vec()[0] == 5.0);
  CHECK(m.vec()[1] == 0.0);

  Rng rng(507);
  Tensor r = Tensor::uniform({10, 3}, rng, -2.0, 2.0);
  Tensor rm = wss_magnitude(r);
  for (std::size_t i = 0; i < 10; ++i) {
    const double want = std::sqrt(r.vec()[i * 3] * r.vec()[i * 3] +
                                  r.vec()[i * 3 + 1] * r.vec()[i * 3 + 1] +
                                  r.vec()[i * 3 + 2] * r.vec()[i * 3 + 2]);
    CHECK(rm.vec()[i] == want);
  }
  CHECK_THROWS_AS(wss_magnitude(Tensor::zeros({4, 2})), ShapeError);
}

TEST_CASE("sample_points: determinism, alignment, permutation case") {
  PointCloud pc = synth_sphere_flow(64, 0, 1.0, {30, 0, 0}, 11);
  bool replaced = false;

  PointCloud all = sample_points(pc, 64, 3, &replaced);
  CHECK(!replaced);
  // n = count returns a permutation of the input points.
  std::multiset<double> a(pc.positions.vec().begin(), pc.positions.vec().end());
  std::multiset<double> b(all.positions.vec().begin(), all.positions.vec().end());
  CHECK(a == b);

  PointCloud one = sample_points(pc, 1, 3);
  CHECK(one.count() == 1);

  PointCloud s1 = sample_points(pc, 20, 9);
  PointCloud s2 = sample_points(pc, 20, 9);
  CHECK(s1.positions.vec() == s2.positions.vec());

  // Per-point alignment: every sampled row exists as a full row of the
  // original sample, fields included.
  for (std::size_t i = 0; i < s1.count(); ++i) {
    bool found = false;
    for (std::size_t j = 0; j < pc.count() && !found; ++j) {
      if (s1.positions.vec()[i * 3] != pc.positions.vec()[j * 3] ||
          s1.positions.vec()[i * 3 + 1] != pc.positions.vec()[j * 3 + 1] ||
          s1.positions.vec()[i * 3 + 2] != pc.positions.vec()[j * 3 + 2])
        continue;
      found = true;
      CHECK(s1.parts[i] == pc.parts[j]);
      CHECK(s1.surface[i] == pc.surface[j]);
      CHECK(s1.fields.at("cp").vec()[i] == pc.fields.at("cp").vec()[j]);
      for (std::size_t d = 0; d < 3; ++d) {
        CHECK(s1.fields.at("normal").vec()[i * 3 + d] == pc.fields.at("normal").vec()[j * 3 + d]);
        CHECK(s1.fields.at("wss").vec()[i * 3 + d] == pc.fields.at("wss").vec()[j * 3 + d]);
      }
    }
    CHECK(found);
  }

  bool replaced2 = false;
  PointCloud big = sample_points(pc, 100, 5, &replaced2);
  CHECK(replaced2);
  CHECK(big.count() == 100);
  CHECK_THROWS_AS(sample_points(pc, 0, 1), std::invalid_argument);
}

TEST_CASE("synth sphere: analytic pressure targets and generator invariants") {
  // Canonical potential-flow values evaluated independently of the
  // generator: stagnation Cp = 1, equator Cp = -5/4.
  CHECK(sphere_cp({-1, 0, 0}, {1, 0, 0}) == 1.0);
  CHECK(sphere_cp({0, 1, 0}, {1, 0, 0}) == -1.25);
  CHECK(sphere_cp({0, 0, -1}, {1, 0, 0}) == -1.25);

  PointCloud pc = synth_sphere_flow(512, 256, 1.0, {30, 0, 0}, 21);
  CHECK(pc.count() == 768);
  pc.validate(1e-9);

  // Every surface target matches the analytic formula recomputed from the
  // stored normal (sphere: normal is the stretched coordinate).
  const auto& nv = pc.fields.at("normal").vec();
  for (std::size_t i = 0; i < 512; ++i) {
    REQUIRE(pc.surface[i] == 1);
    const double want = sphere_cp({nv[i * 3], nv[i * 3 + 1], nv[i * 3 + 2]}, {1, 0, 0});
    CHECK(pc.fields.at("cp").vec()[i] == doctest::Approx(want).epsilon(1e-12));
    // Unit normals within 1e-9 and positive areas.
    const double len = std::sqrt(nv[i * 3] * nv[i * 3] + nv[i * 3 + 1] * nv[i * 3 + 1] +
                                 nv[i * 3 + 2] * nv[i * 3 + 2]);
    CHECK(std::abs(len - 1.0) <= 1e-9);
    CHECK(pc.fields.at("area").vec()[i] > 0.0);
    // Equal-area lattice on a sphere: every cell is 4 pi r^2 / n.
    CHECK(pc.fields.at("area").vec()[i] ==
          doctest::Approx(4.0 * 3.14159265358979323846 / 512.0).epsilon(1e-9));
  }
  // Volume points sit outside the body and carry the analytic field.
  for (std::size_t i = 512; i < 768; ++i) {
    const double r = std::sqrt(pc.positions.vec()[i * 3] * pc.positions.vec()[i * 3] +
                               pc.positions.vec()[i * 3 + 1] * pc.positions.vec()[i * 3 + 1] +
                               pc.positions.vec()[i * 3 + 2] * pc.positions.vec()[i * 3 + 2]);
    CHECK(r > 1.0);
    CHECK(pc.sdf->vec()[i] == doctest::Approx(r - 1.0).epsilon(1e-9));
  }

  PointCloud again = synth_sphere_flow(512, 256, 1.0, {30, 0, 0}, 21);
  CHECK(again.positions.vec() == pc.positions.vec());

  // Far field tends to the inflow velocity.
  const auto far = sphere_velocity({100, 0, 0}, {30, 0, 0});
  CHECK(far[0] == doctest::Approx(30.0).epsilon(1e-4));
  // No penetration at the surface.
  const auto at_surface = sphere_velocity({0.6, 0.8, 0.0}, {30, 0, 0});
  CHECK(std::abs(at_surface[0] * 0.6 + at_surface[1] * 0.8) <= 1e-12);
}

TEST_CASE("synth ellipsoid: geometry invariants and stretched labels") {
  PointCloud pc = synth_ellipsoid_flow(256, 64, {1.5, 1.0, 0.8}, {30, 0, 0}, 31, "prolate");
  CHECK(pc.category == "prolate");
  pc.validate(1e-9);
  const auto& nv = pc.fields.at("normal").vec();
  for (std::size_t i = 0; i < 256; ++i) {
    // Point lies on the ellipsoid.
    const double x = pc.positions.vec()[i * 3] / 1.5;
    const double y = pc.positions.vec()[i * 3 + 1] / 1.0;
    const double z = pc.positions.vec()[i * 3 + 2] / 0.8;
    CHECK(std::abs(x * x + y * y + z * z - 1.0) <= 1e-9);
    // Normal is parallel to the ellipsoid gradient.
    const double gx = pc.positions.vec()[i * 3] / (1.5 * 1.5);
    const double gy = pc.positions.vec()[i * 3 + 1];
    const double gz = pc.positions.vec()[i * 3 + 2] / (0.8 * 0.8);
    const double glen = std::sqrt(gx * gx + gy * gy + gz * gz);
    CHECK(nv[i * 3] == doctest::Approx(gx / glen).epsilon(1e-9));
  }
  // The total lattice area approximates the ellipsoid area (Thomsen's
  // approximation, ~1% accurate) -- a sanity bound, not an identity.
  double total = 0;
  for (std::size_t i = 0; i < 256; ++i) total += pc.fields.at("area").vec()[i];
  const double p = 1.6075;
  auto pw = [&](double a, double b) { return std::pow(a * b, p); };
  const double approx = 4.0 * 3.14159265358979323846 *
                        std::pow((pw(1.5, 1.0) + pw(1.5, 0.8) + pw(1.0, 0.8)) / 3.0, 1.0 / p);
  CHECK(std::abs(total - approx) / approx < 0.05);
}

TEST_CASE("split_by_category: partitions, errors, filter oracle") {
  std::vector<PointCloud> corpus;
  const char* cats[3] = {"sphere", "prolate", "oblate"};
  for (int i = 0; i < 12; ++i) {
    PointCloud pc;
    pc.positions = Tensor::from({1, 3}, {0, 0, 0});
    pc.features = Tensor::zeros({1, 0});
    pc.category = cats[i % 3];
    corpus.push_back(pc);
  }
  auto [train, test] = split_by_category(corpus, {"sphere", "prolate"}, {"oblate"});
  CHECK(train.size() == 8);
  CHECK(test.size() == 4);
  for (const auto& s : test) CHECK(s.category == "oblate");

  // Counts match a brute-force filter.
  std::size_t want_train = 0;
  for (const auto& s : corpus)
    if (s.category == "sphere" || s.category == "prolate") ++want_train;
  CHECK(train.size() == want_train);

  CHECK_THROWS_AS(split_by_category(corpus, {"sphere"}, {}), std::invalid_argument);
  CHECK_THROWS_AS(split_by_category(corpus, {"sphere"}, {"sphere"}), std::invalid_argument);
}

TEST_CASE("prepare_sample: surface and volume recipes") {
  PointCloud pc = synth_sphere_flow(128, 64, 1.0, {30, 0, 0}, 41);
  TaskSpec spec;
  spec.task = Task::pressure;
  spec.inflow_speed = 30.0;
  spec.inflow_dir = {1, 0, 0};

  PointCloud surf = pc;
  prepare_sample(surf, spec);
  CHECK(surf.count() == 128);  // surface subset
  CHECK(surf.features.cols() == 7);
  CHECK(surf.targets->cols() == 1);
  CHECK(surf.normals.has_value());
  CHECK(surf.areas.has_value());

  spec.task = Task::velocity;
  PointCloud vol = pc;
  prepare_sample(vol, spec);
  CHECK(vol.count() == 192);  // keeps everything
  CHECK(vol.features.cols() == 7);  // sdf appended
  CHECK(vol.targets->cols() == 3);

  spec.task = Task::wss;
  PointCloud wss_cloud = pc;
  prepare_sample(wss_cloud, spec);
  CHECK(wss_cloud.targets->cols() == 3);
}

TEST_CASE("gpc container: quantized round trip is stable") {
  PointCloud pc = synth_sphere_flow(64, 32, 1.0, {30, 0, 0}, 51);
  const std::string path = "/tmp/gafield_test_cloud.gpc";
  write_gpc(path, pc);
  PointCloud r1 = read_gpc(path);
  CHECK(r1.count() == pc.count());
  CHECK(r1.category == "sphere");
  CHECK(r1.parts == pc.parts);
  CHECK(r1.surface == pc.surface);
  REQUIRE(r1.fields.count("cp") == 1);
  REQUIRE(r1.fields.count("velocity") == 1);

  // Values pass through float storage once; a second round trip is exact.
  write_gpc(path, r1);
  PointCloud r2 = read_gpc(path);
  CHECK(r2.positions.vec() == r1.positions.vec());
  CHECK(r2.fields.at("cp").vec() == r1.fields.at("cp").vec());
  CHECK(r2.sdf->vec() == r1.sdf->vec());
  std::remove(path.c_str());
}

TEST_CASE("csv fallback: header-driven round trip") {
  PointCloud pc = synth_sphere_flow(16, 8, 1.0, {30, 0, 0}, 61);
  const std::string path = "/tmp/gafield_test_cloud.csv";
  write_cloud(path, pc);
  PointCloud r1 = read_cloud(path);
  CHECK(r1.count() == 24);
  CHECK(r1.category == "sphere");
  CHECK(r1.parts == pc.parts);
  REQUIRE(r1.fields.count("wss") == 1);
  CHECK(r1.fields.at("wss").cols() == 3);
  for (std::size_t i = 0; i < r1.count(); ++i)
    CHECK(r1.positions.vec()[i * 3] ==
          doctest::Approx(pc.positions.vec()[i * 3]).epsilon(1e-6));

  write_cloud(path, r1);
  PointCloud r2 = read_cloud(path);
  CHECK(r2.positions.vec() == r1.positions.vec());
  CHECK(r2.fields.at("cp").vec() == r1.fields.at("cp").vec());
  std::remove(path.c_str());
}
