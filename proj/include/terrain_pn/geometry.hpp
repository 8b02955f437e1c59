#pragma once

// Point clouds in the gravity-aligned ground frame (x forward, y left, z up),
// camera-attitude stabilization, seeded downsampling and workspace cropping.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "terrain_pn/rng.hpp"

namespace terrain_pn {

using Point3 = std::array<double, 3>;
using Matrix3 = std::array<std::array<double, 3>, 3>;

enum class TerrainClass : std::uint8_t { LevelGround = 0, UpStairs = 1, DownStairs = 2 };

inline constexpr int kNumClasses = 3;

inline constexpr std::string_view class_name(TerrainClass c) {
  switch (c) {
    case TerrainClass::LevelGround: return "level_ground";
    case TerrainClass::UpStairs: return "up_stairs";
    case TerrainClass::DownStairs: return "down_stairs";
  }
  return "unknown";
}

inline constexpr std::string_view class_abbrev(TerrainClass c) {
  switch (c) {
    case TerrainClass::LevelGround: return "LG";
    case TerrainClass::UpStairs: return "US";
    case TerrainClass::DownStairs: return "DS";
  }
  return "??";
}

struct PointCloud {
  std::vector<Point3> points;
  std::optional<TerrainClass> label;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }

  friend bool operator==(const PointCloud&, const PointCloud&) = default;
};

class EmptyCloudError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Camera attitude relative to the ground frame, intrinsic Z-Y-X angles in radians.
struct Orientation {
  double roll = 0.0;
  double pitch = 0.0;
  double yaw = 0.0;
};

/// R = Rz(yaw) * Ry(pitch) * Rx(roll).
inline Matrix3 rotation_from_orientation(const Orientation& o) {
  const double cr = std::cos(o.roll), sr = std::sin(o.roll);
  const double cp = std::cos(o.pitch), sp = std::sin(o.pitch);
  const double cy = std::cos(o.yaw), sy = std::sin(o.yaw);
  return {{{cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr},
           {sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr},
           {-sp, cp * sr, cp * cr}}};
}

inline Matrix3 transpose(const Matrix3& m) {
  Matrix3 t{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) t[i][j] = m[j][i];
  return t;
}

inline Matrix3 multiply(const Matrix3& a, const Matrix3& b) {
  Matrix3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline double determinant(const Matrix3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

inline Point3 apply(const Matrix3& r, const Point3& p) {
  return {r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2], r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
          r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2]};
}

inline PointCloud transform_cloud(const PointCloud& cloud, const Matrix3& r) {
  PointCloud out;
  out.label = cloud.label;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(apply(r, p));
  return out;
}

/// Rotates every point by R(o).
inline PointCloud rotate_cloud(const PointCloud& cloud, const Orientation& o) {
  return transform_cloud(cloud, rotation_from_orientation(o));
}

/// Applies the inverse rotation R(o)^T; undoes rotate_cloud(c, o).
inline PointCloud rotate_cloud_inverse(const PointCloud& cloud, const Orientation& o) {
  return transform_cloud(cloud, transpose(rotation_from_orientation(o)));
}

/// Maps a camera-frame cloud into the ground frame: p_ground = R(o) p_camera.
/// R(o) is the inverse of the ground-to-camera rotation measured by the IMU.
inline PointCloud stabilize(const PointCloud& camera_cloud, const Orientation& o) {
  if (camera_cloud.empty()) throw EmptyCloudError("stabilize: empty cloud");
  return rotate_cloud(camera_cloud, o);
}

/// Exactly n points: a seeded uniform subset when the cloud is large enough,
/// otherwise every point once followed by uniform draws with replacement.
inline PointCloud downsample(const PointCloud& cloud, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("downsample: n must be at least 1");
  if (cloud.empty()) throw EmptyCloudError("downsample: empty cloud");
  Rng rng(seed);
  PointCloud out;
  out.label = cloud.label;
  out.points.reserve(n);
  const std::size_t m = cloud.size();
  if (m >= n) {
    // Partial Fisher-Yates over an index permutation.
    std::vector<std::size_t> idx(m);
    for (std::size_t i = 0; i < m; ++i) idx[i] = i;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(m - i));
      std::swap(idx[i], idx[j]);
      out.points.push_back(cloud.points[idx[i]]);
    }
  } else {
    out.points = cloud.points;
    while (out.points.size() < n) out.points.push_back(cloud.points[rng.uniform_index(m)]);
  }
  return out;
}

struct Box {
  Point3 min{};
  Point3 max{};

  bool valid() const noexcept { return min[0] < max[0] && min[1] < max[1] && min[2] < max[2]; }
  bool contains(const Point3& p) const noexcept {
    for (int a = 0; a < 3; ++a)
      if (p[a] < min[a] || p[a] > max[a]) return false;
    return true;
  }
};

class EmptyAfterCropError : public std::runtime_error {
 public:
  explicit EmptyAfterCropError(std::size_t input_points)
      : std::runtime_error("crop_workspace: no points left after crop (input had " + std::to_string(input_points) +
                           ")"),
        input_points_(input_points) {}
  std::size_t input_points() const noexcept { return input_points_; }

 private:
  std::size_t input_points_;
};

/// Keeps points inside the closed box; order is preserved.
inline PointCloud crop_workspace(const PointCloud& cloud, const Box& bounds) {
  if (!bounds.valid()) throw std::invalid_argument("crop_workspace: box min must be below max on every axis");
  PointCloud out;
  out.label = cloud.label;
  for (const auto& p : cloud.points)
    if (bounds.contains(p)) out.points.push_back(p);
  if (out.empty()) throw EmptyAfterCropError(cloud.size());
  return out;
}

inline Box bounding_box(const PointCloud& cloud) {
  if (cloud.empty()) throw EmptyCloudError("bounding_box: empty cloud");
  Box b{cloud.points.front(), cloud.points.front()};
  for (const auto& p : cloud.points)
    for (int a = 0; a < 3; ++a) {
      b.min[a] = std::min(b.min[a], p[a]);
      b.max[a] = std::max(b.max[a], p[a]);
    }
  return b;
}

inline double distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

}  // namespace terrain_pn
