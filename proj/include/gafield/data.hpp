#pragma once

// Feature construction, normalization, dataset splits, the synthetic
// analytic-flow generator, and point-cloud file I/O.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gafield/pointcloud.hpp"

namespace gafield {

enum class Task { pressure, wss, velocity };

Task task_from_string(const std::string& name);
std::string task_to_string(Task t);
std::size_t task_output_width(Task t);
// Per-point target field stored in PointCloud::fields for each task.
std::string task_target_field(Task t);

struct TaskSpec {
  Task task = Task::pressure;
  double inflow_speed = 30.0;                   // m/s
  std::array<double, 3> inflow_dir{1.0, 0.0, 0.0};  // unit d_inf

  Tensor condition() const { return Tensor::row({inflow_speed}); }
  std::array<double, 3> inflow_velocity() const {
    return {inflow_speed * inflow_dir[0], inflow_speed * inflow_dir[1],
            inflow_speed * inflow_dir[2]};
  }
  void validate() const;
};

// Per-channel affine normalization. Defaults carry the reference surface
// pressure statistics (mean -94.5, std 117.25).
struct Normalizer {
  Tensor mean;  // [C]
  Tensor stdev; // [C], strictly positive

  static Normalizer identity(std::size_t channels);
  static Normalizer pressure_default();
  static Normalizer fit(const std::vector<Tensor>& fields);  // per-channel corpus stats

  Tensor apply(const Tensor& values) const;    // (x - mean) / std
  Tensor invert(const Tensor& values) const;   // x * std + mean
  void validate() const;
};

// (p - (-94.5)) / 117.25 with the reference constants as defaults.
Tensor normalize_pressure(const Tensor& values, double mean = -94.5, double stdev = 117.25);
Tensor denormalize_pressure(const Tensor& values, double mean = -94.5, double stdev = 117.25);

// Surface recipe: [x(3), n(3), cos theta(1)] with cos theta = <n, d_inf>.
Tensor surface_features(const PointCloud& pc, const std::array<double, 3>& inflow_dir);

// Volume recipe: [x(3), v0(3)] with v0 = 0 on the body surface and u_inf in
// the flow domain; appends the SDF channel when present.
Tensor volume_features(const PointCloud& pc, const std::array<double, 3>& inflow_velocity,
                       bool append_sdf);

// Magnitude of a 3-vector field, one row per point.
Tensor wss_magnitude(const Tensor& wss);

// Uniform random subset without replacement (with replacement when n exceeds
// the cloud, reported through *with_replacement). All per-point data stays
// aligned.
PointCloud sample_points(const PointCloud& pc, std::size_t n, std::uint64_t seed,
                         bool* with_replacement = nullptr);

// Analytic incompressible potential flow around a triaxial ellipsoid
// (stretched-sphere label model; exact classical solution when the axes are
// equal). Surface points come from a seeded randomly rotated Fibonacci
// lattice, flow-domain points fill the shell r in (1, 3] in stretched
// coordinates. Target fields: "cp", "wss", "velocity".
PointCloud synth_ellipsoid_flow(std::size_t n_surface, std::size_t n_volume,
                                const std::array<double, 3>& axes,
                                const std::array<double, 3>& inflow_velocity, std::uint64_t seed,
                                const std::string& category = "sphere");

PointCloud synth_sphere_flow(std::size_t n_surface, std::size_t n_volume, double radius,
                             const std::array<double, 3>& inflow_velocity, std::uint64_t seed);

// Pressure coefficient of potential flow around a sphere at a surface point
// with outward normal `normal`: 1 - (9/4) sin^2(theta), theta the angle
// between the normal and -d_inf.
double sphere_cp(const std::array<double, 3>& normal, const std::array<double, 3>& inflow_dir);

// Potential-flow velocity around the unit sphere in stretched coordinates.
std::array<double, 3> sphere_velocity(const std::array<double, 3>& w,
                                      const std::array<double, 3>& u_inf);

// Partition samples by category. Both lists must be disjoint and the test
// list non-empty; samples in neither list are dropped.
std::pair<std::vector<PointCloud>, std::vector<PointCloud>> split_by_category(
    const std::vector<PointCloud>& samples, const std::vector<std::string>& train_categories,
    const std::vector<std::string>& test_categories);

// Selects the task target field and builds model input features in place.
void prepare_sample(PointCloud& pc, const TaskSpec& spec);

// Binary point-cloud container (.gpc): magic, point count, channel manifest
// (name, width, dtype), little-endian column payloads, then metadata pairs.
void write_gpc(const std::string& path, const PointCloud& pc);
PointCloud read_gpc(const std::string& path);

// CSV fallback with a header row naming channels.
void write_cloud_csv(const std::string& path, const PointCloud& pc);
PointCloud read_cloud_csv(const std::string& path);

// Dispatch on extension (.gpc or .csv).
void write_cloud(const std::string& path, const PointCloud& pc);
PointCloud read_cloud(const std::string& path);

}  // namespace gafield
