#include "gafield/pointcloud.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

namespace gafield {

void PointCloud::validate(double normal_tol) const {
  const std::size_t n = count();
  if (!positions.defined() || positions.rank() != 2 || positions.cols() != 3)
    throw DataError("PointCloud: positions must be N x 3");
  if (features.defined() && (features.rank() != 2 || features.rows() != n))
    throw DataError("PointCloud: features misaligned with positions");
  if (normals) {
    if (normals->rank() != 2 || normals->rows() != n || normals->cols() != 3)
      throw DataError("PointCloud: normals must be N x 3");
    const auto& nv = normals->vec();
    for (std::size_t i = 0; i < n; ++i) {
      const double len = std::sqrt(nv[3 * i] * nv[3 * i] + nv[3 * i + 1] * nv[3 * i + 1] +
                                   nv[3 * i + 2] * nv[3 * i + 2]);
      if (std::abs(len - 1.0) > normal_tol)
        throw DataError("PointCloud: normal " + std::to_string(i) + " has length " +
                        std::to_string(len));
    }
  }
  if (areas) {
    if (areas->rank() != 1 || areas->numel() != n)
      throw DataError("PointCloud: areas must have one entry per point");
    for (double a : areas->vec())
      if (!(a > 0.0)) throw DataError("PointCloud: areas must be strictly positive");
  }
  if (sdf && sdf->numel() != n) throw DataError("PointCloud: sdf misaligned");
  if (targets && (targets->rank() != 2 || targets->rows() != n))
    throw DataError("PointCloud: targets misaligned");
  if (!parts.empty() && parts.size() != n) throw DataError("PointCloud: parts misaligned");
  if (!surface.empty() && surface.size() != n) throw DataError("PointCloud: surface flags misaligned");
  for (const auto& [name, field] : fields)
    if (field.rank() != 2 || field.rows() != n)
      throw DataError("PointCloud: field '" + name + "' misaligned");
}

std::vector<int> GridClusters::members(int cluster) const {
  if (cluster < 0 || cluster >= n_clusters)
    throw std::out_of_range("GridClusters::members: cluster out of range");
  return {order.begin() + offsets[static_cast<std::size_t>(cluster)],
          order.begin() + offsets[static_cast<std::size_t>(cluster) + 1]};
}

GridClusters cluster_points(const Tensor& positions, double grid_size,
                            std::optional<std::array<double, 3>> origin_opt) {
  if (!(grid_size > 0.0)) throw std::invalid_argument("cluster_points: grid size must be positive");
  if (!positions.defined() || positions.rank() != 2 || positions.cols() != 3)
    throw ShapeError("cluster_points: positions must be N x 3");
  const std::size_t n = positions.rows();
  if (n == 0) throw DataError("cluster_points: empty cloud");
  const auto& pv = positions.vec();

  GridClusters out;
  out.grid_size = grid_size;
  out.n_fine = static_cast<int>(n);
  if (origin_opt) {
    out.origin = *origin_opt;
  } else {
    out.origin = {pv[0], pv[1], pv[2]};
    for (std::size_t i = 1; i < n; ++i)
      for (int a = 0; a < 3; ++a) out.origin[static_cast<std::size_t>(a)] =
          std::min(out.origin[static_cast<std::size_t>(a)], pv[3 * i + static_cast<std::size_t>(a)]);
  }

  std::vector<std::array<std::int64_t, 3>> key(n);
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a)
      key[i][static_cast<std::size_t>(a)] = static_cast<std::int64_t>(
          std::floor((pv[3 * i + static_cast<std::size_t>(a)] - out.origin[static_cast<std::size_t>(a)]) / grid_size));

  // Canonical order: cell key lex, then position lex, then index. Ties among
  // coincident points keep input order.
  out.order.resize(n);
  std::iota(out.order.begin(), out.order.end(), 0);
  std::sort(out.order.begin(), out.order.end(), [&](int ia, int ib) {
    const auto a = static_cast<std::size_t>(ia), b = static_cast<std::size_t>(ib);
    if (key[a] != key[b]) return key[a] < key[b];
    const auto pa = std::make_tuple(pv[3 * a], pv[3 * a + 1], pv[3 * a + 2]);
    const auto pb = std::make_tuple(pv[3 * b], pv[3 * b + 1], pv[3 * b + 2]);
    if (pa != pb) return pa < pb;
    return ia < ib;
  });

  out.map.assign(n, -1);
  out.offsets.push_back(0);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = static_cast<std::size_t>(out.order[r]);
    if (r == 0 || key[i] != key[static_cast<std::size_t>(out.order[r - 1])]) {
      if (r != 0) out.offsets.push_back(static_cast<int>(r));
      out.keys.push_back(key[i]);
    }
    out.map[i] = static_cast<int>(out.keys.size()) - 1;
  }
  out.offsets.push_back(static_cast<int>(n));
  out.n_clusters = static_cast<int>(out.keys.size());

  out.counts.resize(static_cast<std::size_t>(out.n_clusters));
  out.centroids = Tensor::zeros({static_cast<std::size_t>(out.n_clusters), 3});
  auto& cv = out.centroids.storage();
  for (int c = 0; c < out.n_clusters; ++c) {
    const std::size_t cc = static_cast<std::size_t>(c);
    out.counts[cc] = out.offsets[cc + 1] - out.offsets[cc];
    // Running mean: exact on constant member positions.
    double k = 0.0;
    for (int r = out.offsets[cc]; r < out.offsets[cc + 1]; ++r) {
      const std::size_t i = static_cast<std::size_t>(out.order[static_cast<std::size_t>(r)]);
      k += 1.0;
      for (std::size_t a = 0; a < 3; ++a)
        cv[cc * 3 + a] += (pv[3 * i + a] - cv[cc * 3 + a]) / k;
    }
  }
  return out;
}

Tensor pool_features(const Tensor& values, const GridClusters& clusters, Reduce reduce) {
  if (values.rank() != 2 || values.rows() != static_cast<std::size_t>(clusters.n_fine))
    throw ShapeError("pool_features: values misaligned with clusters");
  std::vector<int> identity(static_cast<std::size_t>(clusters.n_clusters));
  std::iota(identity.begin(), identity.end(), 0);
  Tensor ordered = gather_rows(values, clusters.order);
  if (reduce == Reduce::max)
    return segment_max_runs(ordered, clusters.offsets, identity,
                            static_cast<std::size_t>(clusters.n_clusters));
  return segment_mean_runs(ordered, clusters.offsets, identity,
                           static_cast<std::size_t>(clusters.n_clusters));
}

PoolResult grid_pool(const PointCloud& pc, double grid_size, Reduce feature_reduce,
                     std::optional<std::array<double, 3>> origin) {
  GridClusters clusters = cluster_points(pc.positions, grid_size, origin);
  PoolResult out;
  out.grid_size = grid_size;
  out.origin = clusters.origin;
  out.index_map = clusters.map;
  out.coarse.positions = clusters.centroids;
  if (pc.features.defined() && pc.features.cols() > 0) {
    out.coarse.features = pool_features(pc.features, clusters, feature_reduce);
  } else {
    out.coarse.features = Tensor::zeros({static_cast<std::size_t>(clusters.n_clusters), 0});
  }
  return out;
}

Tensor unpool(const Tensor& coarse_values, const std::vector<int>& index_map) {
  return gather_rows(coarse_values, index_map);
}

std::vector<int> cluster_neighborhood(const PoolResult& pool, int fine_index) {
  if (fine_index < 0 || static_cast<std::size_t>(fine_index) >= pool.index_map.size())
    throw std::out_of_range("cluster_neighborhood: fine index out of range");
  const int cluster = pool.index_map[static_cast<std::size_t>(fine_index)];
  std::vector<int> result;
  for (std::size_t j = 0; j < pool.index_map.size(); ++j)
    if (pool.index_map[j] == cluster) result.push_back(static_cast<int>(j));
  return result;
}

std::vector<std::vector<int>> knn(const Tensor& queries, const Tensor& refs, int k) {
  if (queries.rank() != 2 || refs.rank() != 2 || queries.cols() != refs.cols())
    throw ShapeError("knn: queries and refs must share width");
  if (k <= 0) throw std::invalid_argument("knn: k must be positive");
  const std::size_t nr = refs.rows();
  if (static_cast<std::size_t>(k) > nr)
    throw std::invalid_argument("knn: k exceeds reference count");
  const std::size_t d = queries.cols();
  const auto& qv = queries.vec();
  const auto& rv = refs.vec();
  std::vector<std::vector<int>> out(queries.rows());
  std::vector<std::pair<double, int>> dist(nr);
  for (std::size_t q = 0; q < queries.rows(); ++q) {
    for (std::size_t r = 0; r < nr; ++r) {
      double d2 = 0.0;
      for (std::size_t a = 0; a < d; ++a) {
        const double diff = qv[q * d + a] - rv[r * d + a];
        d2 += diff * diff;
      }
      dist[r] = {d2, static_cast<int>(r)};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    out[q].reserve(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) out[q].push_back(dist[static_cast<std::size_t>(j)].second);
  }
  return out;
}

EdgeSet cluster_edges(const GridClusters& clusters) {
  EdgeSet e;
  e.n_rows = clusters.n_fine;
  std::size_t total = 0;
  for (int c = 0; c < clusters.n_clusters; ++c) {
    const std::size_t m = static_cast<std::size_t>(clusters.counts[static_cast<std::size_t>(c)]);
    total += m * m;
  }
  e.target.reserve(total);
  e.source.reserve(total);
  e.run_offsets.push_back(0);
  for (int c = 0; c < clusters.n_clusters; ++c) {
    const std::size_t cc = static_cast<std::size_t>(c);
    for (int ti = clusters.offsets[cc]; ti < clusters.offsets[cc + 1]; ++ti) {
      const int t = clusters.order[static_cast<std::size_t>(ti)];
      for (int si = clusters.offsets[cc]; si < clusters.offsets[cc + 1]; ++si) {
        e.target.push_back(t);
        e.source.push_back(clusters.order[static_cast<std::size_t>(si)]);
      }
      e.run_offsets.push_back(static_cast<int>(e.target.size()));
      e.run_target.push_back(t);
    }
  }
  return e;
}

EdgeSet full_edges(int n) {
  if (n <= 0) throw std::invalid_argument("full_edges: n must be positive");
  EdgeSet e;
  e.n_rows = n;
  e.target.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(n));
  e.source.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(n));
  e.run_offsets.push_back(0);
  for (int t = 0; t < n; ++t) {
    for (int s = 0; s < n; ++s) {
      e.target.push_back(t);
      e.source.push_back(s);
    }
    e.run_offsets.push_back(static_cast<int>(e.target.size()));
    e.run_target.push_back(t);
  }
  return e;
}

}  // namespace gafield
