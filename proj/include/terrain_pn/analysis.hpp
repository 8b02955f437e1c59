#pragma once

// Critical points, upper-bound points, and the global-feature-length sweep.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "terrain_pn/geometry.hpp"
#include "terrain_pn/model.hpp"
#include "terrain_pn/train.hpp"

namespace terrain_pn {

struct CriticalSet {
  std::vector<std::size_t> indices;  // sorted, unique, into the source cloud
  PointCloud points;                 // the points at `indices`, in that order
  std::vector<std::size_t> argmax;   // per global-feature dimension, the winning point
};

/// Points that win at least one dimension of the global feature (lowest index on ties).
inline CriticalSet critical_points(const ModelWeights& w, const PointCloud& cloud) {
  const ForwardTrace tr = forward_trace(w, cloud.points);
  CriticalSet cs;
  cs.argmax.assign(tr.pool.argmax.begin(), tr.pool.argmax.end());
  cs.indices = cs.argmax;
  std::sort(cs.indices.begin(), cs.indices.end());
  cs.indices.erase(std::unique(cs.indices.begin(), cs.indices.end()), cs.indices.end());
  cs.points.label = cloud.label;
  for (std::size_t i : cs.indices) cs.points.points.push_back(cloud.points[i]);
  return cs;
}

struct CubeSpec {
  std::optional<Point3> center;  // defaults to the cloud's bounding-box center
  double edge = 1.0;
  std::size_t resolution = 40;

  void validate() const {
    if (!(edge > 0.0)) throw std::invalid_argument("CubeSpec: edge must be positive");
    if (resolution < 2) throw std::invalid_argument("CubeSpec: resolution must be at least 2");
  }
};

struct UpperBoundResult {
  PointCloud points;                      // kept grid vertices, in grid order
  std::vector<std::size_t> grid_indices;  // i * r^2 + j * r + k
  std::size_t candidates_evaluated = 0;
  Point3 center{};
};

namespace detail {

// Elementwise <= against a pooled feature for each row's branch output.
inline void mark_dominated(const std::vector<LinearLayer>& layers, std::size_t first, const double* input,
                           std::size_t rows, const std::vector<double>& bound, std::vector<char>& keep) {
  constexpr std::size_t kTile = 64;
  const std::size_t in = layers[first].in();
  const std::size_t width = layers.back().out();
  const std::size_t buf = kTile * max_width(layers);
  std::vector<double> a(buf), b(buf);
  for (std::size_t t0 = 0; t0 < rows; t0 += kTile) {
    const std::size_t tn = std::min(kTile, rows - t0);
    const double* out = nullptr;
    run_chain(layers, first, layers.size(), input + t0 * in, tn, a, b, true, out);
    for (std::size_t r = 0; r < tn; ++r) {
      if (!keep[t0 + r]) continue;
      const double* row = out + r * width;
      for (std::size_t j = 0; j < width; ++j)
        if (!(row[j] <= bound[j])) {
          keep[t0 + r] = 0;
          break;
        }
    }
  }
}

}  // namespace detail

/// For each candidate point, whether adding it to `cloud` would leave every
/// pooled feature of the network (global feature and any transform-net
/// features) unchanged. Transforms are those computed from `cloud`.
inline std::vector<char> dominated_by(const ModelWeights& w, const ForwardTrace& tr,
                                      const std::vector<Point3>& candidates) {
  const std::size_t m = candidates.size();
  std::vector<char> keep(m, 1);
  if (m == 0) return keep;
  const double* x = candidates.front().data();
  const double* stage = x;
  std::vector<double> transformed;
  if (w.input_tnet) {
    detail::mark_dominated(w.input_tnet->point, 0, x, m, tr.input_tnet->pool.feature, keep);
    transformed = detail::apply_transform(x, m, 3, tr.input_tnet->transform);
    stage = transformed.data();
  }
  const std::size_t split = w.spec.split_index();
  const double* pooled = stage;
  std::vector<double> features, transformed_features;
  if (w.feature_tnet) {
    features = detail::dense_branch(w.point, 0, split, stage, m);
    detail::mark_dominated(w.feature_tnet->point, 0, features.data(), m, tr.feature_tnet->pool.feature, keep);
    transformed_features = detail::apply_transform(features.data(), m, w.feature_tnet->dim, tr.feature_tnet->transform);
    pooled = transformed_features.data();
  }
  detail::mark_dominated(w.point, split, pooled, m, tr.pool.feature, keep);
  return keep;
}

/// Grid vertices of a cube whose per-point features are elementwise <= the
/// cloud's global feature. Comparisons are exact.
inline UpperBoundResult upper_bound_points(const ModelWeights& w, const PointCloud& cloud, const CubeSpec& cube = {}) {
  cube.validate();
  const ForwardTrace tr = forward_trace(w, cloud.points);
  UpperBoundResult out;
  if (cube.center) {
    out.center = *cube.center;
  } else {
    const Box bb = bounding_box(cloud);
    for (int a = 0; a < 3; ++a) out.center[a] = 0.5 * (bb.min[a] + bb.max[a]);
  }
  const std::size_t r = cube.resolution;
  std::vector<Point3> grid;
  grid.reserve(r * r * r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < r; ++j)
      for (std::size_t k = 0; k < r; ++k) {
        auto coord = [&](std::size_t idx, int axis) {
          return out.center[axis] + cube.edge * (static_cast<double>(idx) / static_cast<double>(r - 1) - 0.5);
        };
        grid.push_back({coord(i, 0), coord(j, 1), coord(k, 2)});
      }
  out.candidates_evaluated = grid.size();
  const auto keep = dominated_by(w, tr, grid);
  out.points.label = cloud.label;
  for (std::size_t g = 0; g < grid.size(); ++g)
    if (keep[g]) {
      out.points.points.push_back(grid[g]);
      out.grid_indices.push_back(g);
    }
  return out;
}

/// Rows that win any pooled maximum in the network: the main global feature
/// plus, for the baseline, both transform-net pools. For the directional
/// variant this equals critical_points(...).indices.
inline std::vector<std::size_t> pooling_support(const ForwardTrace& tr) {
  std::vector<std::size_t> rows(tr.pool.argmax.begin(), tr.pool.argmax.end());
  for (const auto* t : {&tr.input_tnet, &tr.feature_tnet})
    if (*t) rows.insert(rows.end(), (*t)->pool.argmax.begin(), (*t)->pool.argmax.end());
  std::sort(rows.begin(), rows.end());
  rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
  return rows;
}

/// Whether the pooling support alone reproduces the global feature bit for bit.
inline bool critical_subset_identity(const ModelWeights& w, const PointCloud& cloud) {
  const ForwardTrace tr = forward_trace(w, cloud.points);
  PointCloud subset;
  for (std::size_t i : pooling_support(tr)) subset.points.push_back(cloud.points[i]);
  return forward(w, subset).global_feature == tr.pool.feature;
}

/// Whether appending `extra` to the cloud leaves the global feature bit for bit unchanged.
inline bool addition_identity(const ModelWeights& w, const PointCloud& cloud, const PointCloud& extra) {
  PointCloud merged = cloud;
  merged.points.insert(merged.points.end(), extra.points.begin(), extra.points.end());
  return forward(w, merged).global_feature == forward(w, cloud).global_feature;
}

struct SweepEntry {
  std::size_t feature_length = 0;
  ModelWeights weights;
  TrainHistory history;
};

class SweepError : public std::runtime_error {
 public:
  SweepError(std::size_t length, const std::string& what)
      : std::runtime_error("feature length " + std::to_string(length) + ": " + what), length_(length) {}
  std::size_t length() const noexcept { return length_; }

 private:
  std::size_t length_;
};

inline const std::vector<std::size_t>& default_sweep_lengths() {
  static const std::vector<std::size_t> lengths{32, 64, 128, 256, 512, 1024};
  return lengths;
}

/// One Directional model per global-feature length; everything else (seeds,
/// data order, hyperparameters, other widths) is shared.
inline std::vector<SweepEntry> sweep_feature_length(const std::vector<std::size_t>& lengths, const Dataset& ds,
                                                    const TrainConfig& config, const ModelSpec& base = ModelSpec{},
                                                    const std::function<void(std::size_t, const EpochRecord&)>& on_epoch = {}) {
  std::vector<SweepEntry> out;
  for (std::size_t n : lengths) {
    ModelSpec spec = base;
    spec.variant = Variant::Directional;
    if (spec.per_point_widths.empty()) spec.per_point_widths = {n};
    spec.per_point_widths.back() = n;
    try {
      EpochCallback cb;
      if (on_epoch) cb = [&](const EpochRecord& e) {
        on_epoch(n, e);
        return true;
      };
      auto r = train(spec, ds, config, cb);
      out.push_back({n, std::move(r.weights), std::move(r.history)});
    } catch (const std::exception& e) {
      throw SweepError(n, e.what());
    }
  }
  return out;
}

}  // namespace terrain_pn
