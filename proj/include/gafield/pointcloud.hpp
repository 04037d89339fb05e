#pragma once

// Point-set containers, grid clustering/pooling with fine-to-coarse index
// maps, and neighborhood queries.
//
// Clusters are ordered canonically: clusters sorted by integer cell key
// (lexicographic), members within a cluster sorted by position. All segment
// reductions downstream consume that ordering, which is what makes the full
// network forward pass bitwise permutation-equivariant.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gafield/tensor.hpp"

namespace gafield {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PointCloud {
  Tensor positions;                       // N x 3, meters
  Tensor features;                        // N x F (F may be 0)
  std::optional<Tensor> normals;          // N x 3, unit
  std::optional<Tensor> areas;            // N, m^2, strictly positive
  std::optional<Tensor> sdf;              // N, signed distance
  std::optional<Tensor> targets;          // N x W, active task target
  std::vector<int> parts;                 // empty or size N
  std::vector<std::uint8_t> surface;      // empty or size N; 1 = body surface
  std::map<std::string, Tensor> fields;   // named per-point target fields
  std::string category;

  std::size_t count() const { return positions.defined() ? positions.rows() : 0; }

  // Enforces the container invariants: aligned lengths, unit normals within
  // tol, strictly positive areas.
  void validate(double normal_tol = 1e-6) const;
};

// Result of clustering a point set into axis-aligned cubic cells of side s.
struct GridClusters {
  double grid_size = 0.0;
  std::array<double, 3> origin{};            // grid anchor (bounding-box minimum by default)
  int n_fine = 0;
  int n_clusters = 0;
  std::vector<int> map;                      // fine index -> cluster index
  std::vector<int> order;                    // fine indices grouped per cluster, canonical order
  std::vector<int> offsets;                  // cluster c members: order[offsets[c], offsets[c+1])
  std::vector<int> counts;                   // members per cluster
  std::vector<std::array<std::int64_t, 3>> keys;  // cell key per cluster
  Tensor centroids;                          // M x 3 member-position means

  std::vector<int> members(int cluster) const;
};

GridClusters cluster_points(const Tensor& positions, double grid_size,
                            std::optional<std::array<double, 3>> origin = std::nullopt);

enum class Reduce { mean, max };

struct PoolResult {
  PointCloud coarse;
  std::vector<int> index_map;   // pi: fine -> coarse
  double grid_size = 0.0;
  std::array<double, 3> origin{};
};

// One coarse point per occupied cell; coarse position is the member
// centroid, coarse feature the chosen reduction of member features.
PoolResult grid_pool(const PointCloud& pc, double grid_size, Reduce feature_reduce,
                     std::optional<std::array<double, 3>> origin = std::nullopt);

// out[i] = coarse_values[index_map[i]]. Differentiates through tracked input.
Tensor unpool(const Tensor& coarse_values, const std::vector<int>& index_map);

// All fine indices sharing i's cluster, i included, in canonical member order.
std::vector<int> cluster_neighborhood(const PoolResult& pool, int fine_index);

// k nearest refs per query under Euclidean distance; ties broken by lower
// ref index. Brute force.
std::vector<std::vector<int>> knn(const Tensor& queries, const Tensor& refs, int k);

// Attention neighborhood structure: one run of edges per target point,
// targets ordered cluster-major, sources in canonical member order.
struct EdgeSet {
  std::vector<int> target;        // per edge
  std::vector<int> source;        // per edge
  std::vector<int> run_offsets;   // n_runs + 1
  std::vector<int> run_target;    // row written by each run (== target of its edges)
  int n_rows = 0;
};

EdgeSet cluster_edges(const GridClusters& clusters);
EdgeSet full_edges(int n);

// Member-ordered segment reduction of per-point values into per-cluster rows.
Tensor pool_features(const Tensor& values, const GridClusters& clusters, Reduce reduce);

}  // namespace gafield
