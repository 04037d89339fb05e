#include "gafield/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gafield/rng.hpp"

namespace gafield {

Task task_from_string(const std::string& name) {
  if (name == "pressure") return Task::pressure;
  if (name == "wss") return Task::wss;
  if (name == "velocity") return Task::velocity;
  throw std::invalid_argument("unknown task '" + name + "'");
}

std::string task_to_string(Task t) {
  switch (t) {
    case Task::pressure: return "pressure";
    case Task::wss: return "wss";
    case Task::velocity: return "velocity";
  }
  throw std::logic_error("unreachable");
}

std::size_t task_output_width(Task t) { return t == Task::pressure ? 1 : 3; }

std::string task_target_field(Task t) {
  switch (t) {
    case Task::pressure: return "cp";
    case Task::wss: return "wss";
    case Task::velocity: return "velocity";
  }
  throw std::logic_error("unreachable");
}

void TaskSpec::validate() const {
  const double len = std::sqrt(inflow_dir[0] * inflow_dir[0] + inflow_dir[1] * inflow_dir[1] +
                               inflow_dir[2] * inflow_dir[2]);
  if (std::abs(len - 1.0) > 1e-9)
    throw DataError("TaskSpec: inflow direction must be unit length");
  if (!(inflow_speed > 0)) throw DataError("TaskSpec: inflow speed must be positive");
}

// ---------------------------------------------------------------------------
// Normalizer

Normalizer Normalizer::identity(std::size_t channels) {
  Normalizer n;
  n.mean = Tensor::zeros({channels});
  n.stdev = Tensor::full({channels}, 1.0);
  return n;
}

Normalizer Normalizer::pressure_default() {
  Normalizer n;
  n.mean = Tensor::row({-94.5});
  n.stdev = Tensor::row({117.25});
  return n;
}

Normalizer Normalizer::fit(const std::vector<Tensor>& fields) {
  if (fields.empty()) throw DataError("Normalizer::fit: no fields given");
  const std::size_t c = fields.front().cols();
  std::vector<double> mean(c, 0.0);
  double count = 0.0;
  for (const Tensor& f : fields) {
    if (f.cols() != c) throw ShapeError("Normalizer::fit: inconsistent channel counts");
    for (std::size_t i = 0; i < f.rows(); ++i) {
      count += 1.0;
      for (std::size_t j = 0; j < c; ++j)
        mean[j] += (f.vec()[i * c + j] - mean[j]) / count;
    }
  }
  std::vector<double> var(c, 0.0);
  double k = 0.0;
  for (const Tensor& f : fields)
    for (std::size_t i = 0; i < f.rows(); ++i) {
      k += 1.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double d = f.vec()[i * c + j] - mean[j];
        var[j] += (d * d - var[j]) / k;
      }
    }
  Normalizer n;
  n.mean = Tensor::row(std::move(mean));
  std::vector<double> sd(c);
  for (std::size_t j = 0; j < c; ++j) sd[j] = std::sqrt(var[j]);
  n.stdev = Tensor::row(std::move(sd));
  n.validate();
  return n;
}

void Normalizer::validate() const {
  if (mean.numel() != stdev.numel()) throw ShapeError("Normalizer: mean/std width mismatch");
  for (double s : stdev.vec())
    if (!(s > 0)) throw DataError("Normalizer: zero or negative standard deviation");
}

Tensor Normalizer::apply(const Tensor& values) const {
  validate();
  if (values.cols() != mean.numel()) throw ShapeError("Normalizer: channel mismatch");
  Tensor out = Tensor::zeros(values.shape());
  const std::size_t c = mean.numel();
  for (std::size_t i = 0; i < values.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j)
      out.storage()[i * c + j] = (values.vec()[i * c + j] - mean.vec()[j]) / stdev.vec()[j];
  return out;
}

Tensor Normalizer::invert(const Tensor& values) const {
  validate();
  if (values.cols() != mean.numel()) throw ShapeError("Normalizer: channel mismatch");
  Tensor out = Tensor::zeros(values.shape());
  const std::size_t c = mean.numel();
  for (std::size_t i = 0; i < values.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j)
      out.storage()[i * c + j] = values.vec()[i * c + j] * stdev.vec()[j] + mean.vec()[j];
  return out;
}

Tensor normalize_pressure(const Tensor& values, double mean, double stdev) {
  if (!(stdev > 0)) throw DataError("normalize_pressure: standard deviation must be positive");
  Tensor out = Tensor::zeros(values.shape());
  for (std::size_t i = 0; i < values.numel(); ++i)
    out.storage()[i] = (values.vec()[i] - mean) / stdev;
  return out;
}

Tensor denormalize_pressure(const Tensor& values, double mean, double stdev) {
  if (!(stdev > 0)) throw DataError("denormalize_pressure: standard deviation must be positive");
  Tensor out = Tensor::zeros(values.shape());
  for (std::size_t i = 0; i < values.numel(); ++i)
    out.storage()[i] = values.vec()[i] * stdev + mean;
  return out;
}

// ---------------------------------------------------------------------------
// feature recipes

Tensor surface_features(const PointCloud& pc, const std::array<double, 3>& inflow_dir) {
  if (!pc.normals) throw DataError("surface_features: normals required");
  const double len = std::sqrt(inflow_dir[0] * inflow_dir[0] + inflow_dir[1] * inflow_dir[1] +
                               inflow_dir[2] * inflow_dir[2]);
  if (std::abs(len - 1.0) > 1e-9)
    throw DataError("surface_features: inflow direction must be unit length");
  pc.validate();
  const std::size_t n = pc.count();
  Tensor out = Tensor::zeros({n, 7});
  const auto& pv = pc.positions.vec();
  const auto& nv = pc.normals->vec();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < 3; ++d) {
      out.storage()[i * 7 + d] = pv[i * 3 + d];
      out.storage()[i * 7 + 3 + d] = nv[i * 3 + d];
    }
    out.storage()[i * 7 + 6] = nv[i * 3] * inflow_dir[0] + nv[i * 3 + 1] * inflow_dir[1] +
                               nv[i * 3 + 2] * inflow_dir[2];
  }
  return out;
}

Tensor volume_features(const PointCloud& pc, const std::array<double, 3>& inflow_velocity,
                       bool append_sdf) {
  if (pc.surface.empty()) throw DataError("volume_features: surface flags required");
  if (append_sdf && !pc.sdf) throw DataError("volume_features: sdf channel missing");
  if (append_sdf && pc.sdf->numel() != pc.count())
    throw DataError("volume_features: sdf length mismatch");
  const std::size_t n = pc.count();
  const std::size_t w = append_sdf ? 7 : 6;
  Tensor out = Tensor::zeros({n, w});
  const auto& pv = pc.positions.vec();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < 3; ++d) {
      out.storage()[i * w + d] = pv[i * 3 + d];
      out.storage()[i * w + 3 + d] = pc.surface[i] ? 0.0 : inflow_velocity[d];
    }
    if (append_sdf) out.storage()[i * w + 6] = pc.sdf->vec()[i];
  }
  return out;
}

Tensor wss_magnitude(const Tensor& wss) {
  if (wss.rank() != 2 || wss.cols() != 3)
    throw ShapeError("wss_magnitude: expects an N x 3 field");
  Tensor out = Tensor::zeros({wss.rows(), 1});
  for (std::size_t i = 0; i < wss.rows(); ++i) {
    const double x = wss.vec()[i * 3], y = wss.vec()[i * 3 + 1], z = wss.vec()[i * 3 + 2];
    out.storage()[i] = std::sqrt(x * x + y * y + z * z);
  }
  return out;
}

// ---------------------------------------------------------------------------
// subsetting

namespace {

Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  const std::size_t c = t.cols();
  Tensor out = Tensor::zeros({idx.size(), c});
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t j = 0; j < c; ++j) out.storage()[r * c + j] = t.vec()[idx[r] * c + j];
  return out;
}

Tensor take_vec(const Tensor& t, const std::vector<std::size_t>& idx) {
  Tensor out = Tensor::zeros({idx.size()});
  for (std::size_t r = 0; r < idx.size(); ++r) out.storage()[r] = t.vec()[idx[r]];
  return out;
}

PointCloud subset_cloud(const PointCloud& pc, const std::vector<std::size_t>& idx) {
  PointCloud out;
  out.positions = take_rows(pc.positions, idx);
  if (pc.features.defined() && pc.features.cols() > 0) out.features = take_rows(pc.features, idx);
  else out.features = Tensor::zeros({idx.size(), 0});
  if (pc.normals) out.normals = take_rows(*pc.normals, idx);
  if (pc.areas) out.areas = take_vec(*pc.areas, idx);
  if (pc.sdf) out.sdf = take_vec(*pc.sdf, idx);
  if (pc.targets) out.targets = take_rows(*pc.targets, idx);
  if (!pc.parts.empty()) {
    out.parts.reserve(idx.size());
    for (std::size_t i : idx) out.parts.push_back(pc.parts[i]);
  }
  if (!pc.surface.empty()) {
    out.surface.reserve(idx.size());
    for (std::size_t i : idx) out.surface.push_back(pc.surface[i]);
  }
  for (const auto& [name, field] : pc.fields) out.fields[name] = take_rows(field, idx);
  out.category = pc.category;
  return out;
}

}  // namespace

PointCloud sample_points(const PointCloud& pc, std::size_t n, std::uint64_t seed,
                         bool* with_replacement) {
  if (n == 0) throw std::invalid_argument("sample_points: n must be positive");
  const std::size_t total = pc.count();
  Rng rng(seed);
  std::vector<std::size_t> pick;
  bool replaced = false;
  if (n <= total) {
    std::vector<std::size_t> idx(total);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    pick.assign(idx.begin(), idx.begin() + static_cast<long>(n));
  } else {
    replaced = true;
    pick.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      pick.push_back(static_cast<std::size_t>(rng.uniform_index(total)));
  }
  if (with_replacement) *with_replacement = replaced;
  return subset_cloud(pc, pick);
}

// ---------------------------------------------------------------------------
// analytic flow generator

double sphere_cp(const std::array<double, 3>& normal, const std::array<double, 3>& inflow_dir) {
  const double cos_theta = -(normal[0] * inflow_dir[0] + normal[1] * inflow_dir[1] +
                             normal[2] * inflow_dir[2]);
  const double sin2 = 1.0 - cos_theta * cos_theta;
  return 1.0 - 2.25 * sin2;
}

std::array<double, 3> sphere_velocity(const std::array<double, 3>& w,
                                      const std::array<double, 3>& u_inf) {
  const double r2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
  const double r = std::sqrt(r2);
  const double r3 = r2 * r, r5 = r3 * r2;
  const double udotw = u_inf[0] * w[0] + u_inf[1] * w[1] + u_inf[2] * w[2];
  std::array<double, 3> u;
  for (std::size_t d = 0; d < 3; ++d)
    u[d] = u_inf[d] + 0.5 * (u_inf[d] / r3 - 3.0 * udotw * w[d] / r5);
  return u;
}

namespace {

// Tangential slip-velocity based shear label. A smooth, surface-tangent
// 3-vector with the right symmetry; a label model, not viscous physics.
constexpr double kShearScale = 0.05;

std::array<std::array<double, 3>, 3> random_rotation(Rng& rng) {
  double q[4];
  double norm = 0;
  for (double& v : q) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (double& v : q) v /= norm;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
           {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
           {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

std::array<double, 3> rotate(const std::array<std::array<double, 3>, 3>& m,
                             const std::array<double, 3>& v) {
  return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
          m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
          m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

}  // namespace

PointCloud synth_ellipsoid_flow(std::size_t n_surface, std::size_t n_volume,
                                const std::array<double, 3>& axes,
                                const std::array<double, 3>& inflow_velocity, std::uint64_t seed,
                                const std::string& category) {
  if (n_surface == 0) throw std::invalid_argument("synth: need at least one surface point");
  for (double a : axes)
    if (!(a > 0)) throw std::invalid_argument("synth: axes must be positive");
  const double speed = std::sqrt(inflow_velocity[0] * inflow_velocity[0] +
                                 inflow_velocity[1] * inflow_velocity[1] +
                                 inflow_velocity[2] * inflow_velocity[2]);
  if (!(speed > 0)) throw std::invalid_argument("synth: inflow speed must be positive");
  const std::array<double, 3> d{inflow_velocity[0] / speed, inflow_velocity[1] / speed,
                                inflow_velocity[2] / speed};

  Rng rng(seed);
  const auto rot = random_rotation(rng);
  const std::size_t n = n_surface + n_volume;
  const double min_axis = std::min({axes[0], axes[1], axes[2]});

  PointCloud pc;
  pc.category = category;
  pc.positions = Tensor::zeros({n, 3});
  pc.features = Tensor::zeros({n, 0});
  pc.sdf = Tensor::zeros({n});
  pc.surface.assign(n, 0);
  pc.parts.assign(n, -1);
  Tensor cp = Tensor::zeros({n, 1});
  Tensor wss = Tensor::zeros({n, 3});
  Tensor vel = Tensor::zeros({n, 3});
  Tensor area = Tensor::zeros({n, 1});
  Tensor normal = Tensor::zeros({n, 3});

  constexpr double kGoldenAngle = 2.39996322972865332;  // pi (3 - sqrt 5)
  const double cell = 4.0 * 3.14159265358979323846 / static_cast<double>(n_surface);

  for (std::size_t i = 0; i < n_surface; ++i) {
    // Fibonacci lattice direction, then the seeded rotation. The lattice is
    // an equal-area covering, so per-point areas integrate cleanly.
    const double zc = 1.0 - (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(n_surface);
    const double rxy = std::sqrt(std::max(0.0, 1.0 - zc * zc));
    const double phi = kGoldenAngle * static_cast<double>(i);
    const std::array<double, 3> u =
        rotate(rot, {rxy * std::cos(phi), rxy * std::sin(phi), zc});

    const std::array<double, 3> x{axes[0] * u[0], axes[1] * u[1], axes[2] * u[2]};
    std::array<double, 3> nrm{u[0] / axes[0], u[1] / axes[1], u[2] / axes[2]};
    const double nlen = std::sqrt(nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]);
    for (double& v : nrm) v /= nlen;
    // Surface element of the sphere-to-ellipsoid map.
    const double jac = axes[0] * axes[1] * axes[2] * nlen;

    for (std::size_t dd = 0; dd < 3; ++dd) {
      pc.positions.storage()[i * 3 + dd] = x[dd];
      normal.storage()[i * 3 + dd] = nrm[dd];
    }
    area.storage()[i] = jac * cell;
    pc.surface[i] = 1;
    pc.sdf->storage()[i] = 0.0;

    // Pressure coefficient in stretched coordinates (exact for spheres).
    cp.storage()[i] = sphere_cp(u, d);
    // Slip velocity of the stretched potential flow.
    const auto slip = sphere_velocity(u, inflow_velocity);
    for (std::size_t dd = 0; dd < 3; ++dd) vel.storage()[i * 3 + dd] = slip[dd];
    // Tangential shear label along the true surface.
    const double un = inflow_velocity[0] * nrm[0] + inflow_velocity[1] * nrm[1] +
                      inflow_velocity[2] * nrm[2];
    for (std::size_t dd = 0; dd < 3; ++dd)
      wss.storage()[i * 3 + dd] = kShearScale * 1.5 * (inflow_velocity[dd] - un * nrm[dd]);

    const double along = u[0] * d[0] + u[1] * d[1] + u[2] * d[2];
    int part = 2;
    if (along <= -1.0 / 3.0) part = 0;        // upstream face
    else if (along >= 1.0 / 3.0) part = 1;    // downstream face
    else if (u[2] < 0) part = 3;
    pc.parts[i] = part;
  }

  for (std::size_t j = 0; j < n_volume; ++j) {
    const std::size_t i = n_surface + j;
    std::array<double, 3> dir{rng.normal(), rng.normal(), rng.normal()};
    double len = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
    while (len < 1e-12) {
      dir = {rng.normal(), rng.normal(), rng.normal()};
      len = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
    }
    for (double& v : dir) v /= len;
    // Volume-uniform radius in the stretched shell (1, 3].
    const double r = std::cbrt(1.0 + rng.uniform() * 26.0);
    const std::array<double, 3> w{r * dir[0], r * dir[1], r * dir[2]};
    for (std::size_t dd = 0; dd < 3; ++dd)
      pc.positions.storage()[i * 3 + dd] = axes[dd] * w[dd];
    pc.sdf->storage()[i] = (r - 1.0) * min_axis;
    const auto u = sphere_velocity(w, inflow_velocity);
    for (std::size_t dd = 0; dd < 3; ++dd) vel.storage()[i * 3 + dd] = u[dd];
    const double u2 = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
    cp.storage()[i] = 1.0 - u2 / (speed * speed);
  }

  pc.fields["cp"] = cp;
  pc.fields["wss"] = wss;
  pc.fields["velocity"] = vel;
  pc.fields["area"] = area;
  pc.fields["normal"] = normal;
  return pc;
}

PointCloud synth_sphere_flow(std::size_t n_surface, std::size_t n_volume, double radius,
                             const std::array<double, 3>& inflow_velocity, std::uint64_t seed) {
  if (!(radius > 0)) throw std::invalid_argument("synth: radius must be positive");
  return synth_ellipsoid_flow(n_surface, n_volume, {radius, radius, radius}, inflow_velocity,
                              seed, "sphere");
}

// ---------------------------------------------------------------------------
// splits and preparation

std::pair<std::vector<PointCloud>, std::vector<PointCloud>> split_by_category(
    const std::vector<PointCloud>& samples, const std::vector<std::string>& train_categories,
    const std::vector<std::string>& test_categories) {
  if (test_categories.empty()) throw std::invalid_argument("split: empty test category list");
  if (train_categories.empty()) throw std::invalid_argument("split: empty train category list");
  for (const auto& t : test_categories)
    if (std::find(train_categories.begin(), train_categories.end(), t) != train_categories.end())
      throw std::invalid_argument("split: category '" + t + "' appears on both sides");
  std::pair<std::vector<PointCloud>, std::vector<PointCloud>> out;
  for (const PointCloud& s : samples) {
    if (std::find(train_categories.begin(), train_categories.end(), s.category) !=
        train_categories.end())
      out.first.push_back(s);
    else if (std::find(test_categories.begin(), test_categories.end(), s.category) !=
             test_categories.end())
      out.second.push_back(s);
  }
  return out;
}

void prepare_sample(PointCloud& pc, const TaskSpec& spec) {
  spec.validate();
  const std::string field = task_target_field(spec.task);
  if (!pc.fields.count(field))
    throw DataError("prepare_sample: sample lacks target field '" + field + "'");

  if (spec.task == Task::pressure || spec.task == Task::wss) {
    // Surface tasks run on the body surface subset.
    if (!pc.surface.empty()) {
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < pc.count(); ++i)
        if (pc.surface[i]) keep.push_back(i);
      if (keep.empty()) throw DataError("prepare_sample: no surface points in sample");
      if (keep.size() != pc.count()) pc = subset_cloud(pc, keep);
    }
    if (!pc.normals && pc.fields.count("normal")) {
      pc.normals = pc.fields.at("normal");
      pc.fields.erase("normal");
    }
    if (!pc.areas && pc.fields.count("area")) {
      const Tensor& a = pc.fields.at("area");
      Tensor areas = Tensor::zeros({pc.count()});
      for (std::size_t i = 0; i < pc.count(); ++i) areas.storage()[i] = a.vec()[i];
      pc.areas = areas;
      pc.fields.erase("area");
    }
    pc.features = surface_features(pc, spec.inflow_dir);
  } else {
    if (pc.surface.empty()) pc.surface.assign(pc.count(), 0);
    pc.features = volume_features(pc, spec.inflow_velocity(), pc.sdf.has_value());
  }
  pc.targets = pc.fields.at(field);
  pc.validate();
}

// ---------------------------------------------------------------------------
// binary container

namespace {

constexpr char kGpcMagic[7] = {'G', 'A', 'F', 'P', 'C', '1', '\n'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("gpc: truncated file");
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const auto len = get<std::uint32_t>(is);
  std::string s(len, '\0');
  is.read(s.data(), static_cast<std::streamsize>(len));
  if (!is) throw DataError("gpc: truncated string");
  return s;
}

enum class Dtype : std::uint8_t { f32 = 1, f64 = 2, i32 = 3 };

void put_channel_f32(std::ostream& os, const std::string& name, const Tensor& t) {
  put_string(os, name);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.cols()));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(Dtype::f32));
  for (double v : t.vec()) put<float>(os, static_cast<float>(v));
}

void put_channel_i32(std::ostream& os, const std::string& name, const std::vector<int>& v) {
  put_string(os, name);
  put<std::uint32_t>(os, 1);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(Dtype::i32));
  for (int x : v) put<std::int32_t>(os, x);
}

Tensor as_matrix(const Tensor& t) {
  if (t.rank() == 1) return reshape(t, {t.numel(), 1});
  return t;
}

}  // namespace

void write_gpc(const std::string& path, const PointCloud& pc) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("gpc: cannot open '" + path + "' for writing");
  os.write(kGpcMagic, sizeof(kGpcMagic));
  const std::size_t n = pc.count();
  put<std::uint64_t>(os, n);

  std::uint32_t channels = 1;  // position
  if (!pc.surface.empty()) ++channels;
  if (!pc.parts.empty()) ++channels;
  if (pc.sdf) ++channels;
  if (pc.normals) ++channels;
  if (pc.areas) ++channels;
  channels += static_cast<std::uint32_t>(pc.fields.size());
  put<std::uint32_t>(os, channels);

  put_channel_f32(os, "position", pc.positions);
  if (pc.normals) put_channel_f32(os, "normals", *pc.normals);
  if (pc.areas) put_channel_f32(os, "areas", as_matrix(*pc.areas));
  if (pc.sdf) put_channel_f32(os, "sdf", as_matrix(*pc.sdf));
  if (!pc.surface.empty()) {
    std::vector<int> s(pc.surface.begin(), pc.surface.end());
    put_channel_i32(os, "surface", s);
  }
  if (!pc.parts.empty()) put_channel_i32(os, "part", pc.parts);
  for (const auto& [name, field] : pc.fields) put_channel_f32(os, name, field);

  std::uint32_t meta = pc.category.empty() ? 0u : 1u;
  put<std::uint32_t>(os, meta);
  if (meta) {
    put_string(os, "category");
    put_string(os, pc.category);
  }
  if (!os) throw DataError("gpc: write to '" + path + "' failed");
}

PointCloud read_gpc(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("gpc: cannot open '" + path + "'");
  char magic[7];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kGpcMagic, sizeof(kGpcMagic)) != 0)
    throw DataError("gpc: '" + path + "' is not a gafield point-cloud file");
  const auto n = static_cast<std::size_t>(get<std::uint64_t>(is));
  const auto channels = get<std::uint32_t>(is);

  PointCloud pc;
  for (std::uint32_t c = 0; c < channels; ++c) {
    const std::string name = get_string(is);
    const auto width = get<std::uint32_t>(is);
    const auto dtype = static_cast<Dtype>(get<std::uint8_t>(is));
    const std::size_t count = n * width;
    if (dtype == Dtype::i32) {
      std::vector<int> v(count);
      for (auto& x : v) x = get<std::int32_t>(is);
      if (name == "surface") {
        pc.surface.assign(v.begin(), v.end());
      } else if (name == "part") {
        pc.parts = std::move(v);
      } else {
        throw DataError("gpc: unknown integer channel '" + name + "'");
      }
      continue;
    }
    std::vector<double> v(count);
    if (dtype == Dtype::f32) {
      for (auto& x : v) x = static_cast<double>(get<float>(is));
    } else {
      for (auto& x : v) x = get<double>(is);
    }
    Tensor t = Tensor::from({n, width}, std::move(v));
    if (name == "position") pc.positions = t;
    else if (name == "normals") pc.normals = t;
    else if (name == "areas") pc.areas = reshape(t, {n});
    else if (name == "sdf") pc.sdf = reshape(t, {n});
    else pc.fields[name] = t;
  }
  const auto meta = get<std::uint32_t>(is);
  for (std::uint32_t m = 0; m < meta; ++m) {
    const std::string key = get_string(is);
    const std::string value = get_string(is);
    if (key == "category") pc.category = value;
  }
  if (!pc.positions.defined()) throw DataError("gpc: file lacks a position channel");
  pc.features = Tensor::zeros({n, 0});
  return pc;
}

// ---------------------------------------------------------------------------
// CSV fallback

void write_cloud_csv(const std::string& path, const PointCloud& pc) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("csv: cannot open '" + path + "' for writing");
  os << "x,y,z";
  if (pc.normals) os << ",nx,ny,nz";
  if (pc.areas) os << ",area";
  if (pc.sdf) os << ",sdf";
  if (!pc.surface.empty()) os << ",surface";
  if (!pc.parts.empty()) os << ",part";
  for (const auto& [name, field] : pc.fields)
    for (std::size_t j = 0; j < field.cols(); ++j) os << "," << name << "_" << j;
  os << "\n";
  char buf[64];
  auto emit = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(static_cast<float>(v)));
    os << "," << buf;
  };
  for (std::size_t i = 0; i < pc.count(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(static_cast<float>(pc.positions.vec()[i * 3])));
    os << buf;
    emit(pc.positions.vec()[i * 3 + 1]);
    emit(pc.positions.vec()[i * 3 + 2]);
    if (pc.normals)
      for (std::size_t d = 0; d < 3; ++d) emit(pc.normals->vec()[i * 3 + d]);
    if (pc.areas) emit(pc.areas->vec()[i]);
    if (pc.sdf) emit(pc.sdf->vec()[i]);
    if (!pc.surface.empty()) os << "," << static_cast<int>(pc.surface[i]);
    if (!pc.parts.empty()) os << "," << pc.parts[i];
    for (const auto& [name, field] : pc.fields)
      for (std::size_t j = 0; j < field.cols(); ++j) emit(field.vec()[i * field.cols() + j]);
    os << "\n";
  }
  os << "# category=" << pc.category << "\n";
}

PointCloud read_cloud_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("csv: cannot open '" + path + "'");
  std::string header;
  if (!std::getline(is, header)) throw DataError("csv: empty file");
  std::vector<std::string> cols;
  {
    std::stringstream ss(header);
    std::string tok;
    while (std::getline(ss, tok, ',')) cols.push_back(tok);
  }
  std::vector<std::vector<double>> data(cols.size());
  std::string line;
  std::string category;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto pos = line.find("category=");
      if (pos != std::string::npos) category = line.substr(pos + 9);
      continue;
    }
    std::stringstream ss(line);
    std::string tok;
    std::size_t c = 0;
    while (std::getline(ss, tok, ',')) {
      if (c >= cols.size()) throw DataError("csv: row wider than header");
      data[c++].push_back(std::stod(tok));
    }
    if (c != cols.size()) throw DataError("csv: row narrower than header");
  }
  const std::size_t n = data.empty() ? 0 : data[0].size();
  if (n == 0) throw DataError("csv: no rows");

  auto col_index = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < cols.size(); ++i)
      if (cols[i] == name) return static_cast<int>(i);
    return -1;
  };
  PointCloud pc;
  pc.category = category;
  const int xi = col_index("x"), yi = col_index("y"), zi = col_index("z");
  if (xi < 0 || yi < 0 || zi < 0) throw DataError("csv: missing x/y/z columns");
  pc.positions = Tensor::zeros({n, 3});
  for (std::size_t i = 0; i < n; ++i) {
    pc.positions.storage()[i * 3] = data[static_cast<std::size_t>(xi)][i];
    pc.positions.storage()[i * 3 + 1] = data[static_cast<std::size_t>(yi)][i];
    pc.positions.storage()[i * 3 + 2] = data[static_cast<std::size_t>(zi)][i];
  }
  pc.features = Tensor::zeros({n, 0});
  if (col_index("nx") >= 0) {
    Tensor nm = Tensor::zeros({n, 3});
    const char* names[3] = {"nx", "ny", "nz"};
    for (std::size_t d = 0; d < 3; ++d) {
      const int ci = col_index(names[d]);
      if (ci < 0) throw DataError("csv: partial normal columns");
      for (std::size_t i = 0; i < n; ++i) nm.storage()[i * 3 + d] = data[static_cast<std::size_t>(ci)][i];
    }
    pc.normals = nm;
  }
  if (const int ci = col_index("area"); ci >= 0)
    pc.areas = Tensor::row(data[static_cast<std::size_t>(ci)]);
  if (const int ci = col_index("sdf"); ci >= 0)
    pc.sdf = Tensor::row(data[static_cast<std::size_t>(ci)]);
  if (const int ci = col_index("surface"); ci >= 0) {
    pc.surface.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      pc.surface[i] = data[static_cast<std::size_t>(ci)][i] != 0.0 ? 1 : 0;
  }
  if (const int ci = col_index("part"); ci >= 0) {
    pc.parts.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      pc.parts[i] = static_cast<int>(data[static_cast<std::size_t>(ci)][i]);
  }
  // Grouped field columns: name_0..name_{w-1}.
  for (std::size_t c = 0; c < cols.size(); ++c) {
    const auto us = cols[c].rfind('_');
    if (us == std::string::npos) continue;
    const std::string base = cols[c].substr(0, us);
    if (cols[c].substr(us + 1) != "0" || pc.fields.count(base)) continue;
    std::size_t width = 0;
    while (col_index(base + "_" + std::to_string(width)) >= 0) ++width;
    Tensor f = Tensor::zeros({n, width});
    for (std::size_t j = 0; j < width; ++j) {
      const int ci = col_index(base + "_" + std::to_string(j));
      for (std::size_t i = 0; i < n; ++i)
        f.storage()[i * width + j] = data[static_cast<std::size_t>(ci)][i];
    }
    pc.fields[base] = f;
  }
  return pc;
}

void write_cloud(const std::string& path, const PointCloud& pc) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") write_cloud_csv(path, pc);
  else write_gpc(path, pc);
}

PointCloud read_cloud(const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") return read_cloud_csv(path);
  return read_gpc(path);
}

}  // namespace gafield
