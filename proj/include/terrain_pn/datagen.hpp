#pragma once

// Synthetic level-ground / up-stairs / down-stairs scans, sensor-style noise
// with side-wall and leg outliers, a geometric label oracle, and the on-disk
// dataset format.
//
// Clouds are expressed in the ground frame with the origin on the floor
// directly below the camera; the camera sits at (0, 0, camera_height).

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "terrain_pn/geometry.hpp"
#include "terrain_pn/parallel.hpp"
#include "terrain_pn/rng.hpp"

namespace terrain_pn {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Range {
  double lo = 0.0;
  double hi = 0.0;

  bool contains(double v) const noexcept { return v >= lo && v <= hi; }
  double draw(Rng& rng) const { return lo == hi ? lo : rng.uniform(lo, hi); }

  friend bool operator==(const Range&, const Range&) = default;
};

namespace limits {
inline constexpr Range kStepHeight{0.10, 0.20};
inline constexpr Range kStepDepth{0.25, 0.35};
inline constexpr Range kStepWidth{0.8, 1.5};
inline constexpr int kMinSteps = 3;
inline constexpr int kMaxSteps = 8;
inline constexpr Range kCameraHeight{0.8, 1.1};
inline constexpr Range kExtent{1.0, 4.0};
inline constexpr Range kApproach{0.2, 1.5};
inline constexpr Range kNearDistance{0.0, 0.6};
}  // namespace limits

struct TerrainParams {
  double step_height = 0.15;
  double step_depth = 0.30;
  double step_width = 1.0;
  int num_steps = 5;
  double extent = 2.5;             // forward reach of level ground
  double camera_height = 0.95;
  double approach_distance = 0.6;  // floor distance from the camera to the first riser
  double near_distance = 0.3;      // closest visible floor point ahead of the camera
  std::size_t points_raw = 4096;

  void validate() const {
    auto check = [](bool ok, const char* what) {
      if (!ok) throw std::invalid_argument(std::string("TerrainParams: ") + what + " out of range");
    };
    check(limits::kStepHeight.contains(step_height), "step_height");
    check(limits::kStepDepth.contains(step_depth), "step_depth");
    check(limits::kStepWidth.contains(step_width), "step_width");
    check(num_steps >= limits::kMinSteps && num_steps <= limits::kMaxSteps, "num_steps");
    check(limits::kCameraHeight.contains(camera_height), "camera_height");
    check(limits::kExtent.contains(extent), "extent");
    check(limits::kApproach.contains(approach_distance), "approach_distance");
    check(limits::kNearDistance.contains(near_distance), "near_distance");
    check(near_distance < approach_distance && near_distance < extent, "near_distance");
    check(points_raw >= 1, "points_raw");
  }
};

struct NoiseParams {
  double gaussian_sigma = 0.0;
  double outlier_fraction = 0.0;
  bool side_wall = true;
  bool leg = true;

  void validate() const {
    if (!(gaussian_sigma >= 0.0) || !std::isfinite(gaussian_sigma))
      throw std::invalid_argument("NoiseParams: gaussian_sigma must be >= 0");
    if (!(outlier_fraction >= 0.0 && outlier_fraction < 0.3))
      throw std::invalid_argument("NoiseParams: outlier_fraction must be in [0, 0.3)");
    if (outlier_fraction > 0.0 && !side_wall && !leg)
      throw std::invalid_argument("NoiseParams: outliers requested but no outlier kind enabled");
  }
};

enum class StairDirection { Up, Down };

namespace detail {

// One planar face of the extruded stair profile, as a segment in the x-z plane.
struct ProfileFace {
  double x0, z0, x1, z1;
  double nx, nz;  // outward normal in the x-z plane
  double length() const { return std::hypot(x1 - x0, z1 - z0); }
};

inline std::vector<ProfileFace> stair_profile(const TerrainParams& p, StairDirection dir) {
  const double sign = dir == StairDirection::Up ? 1.0 : -1.0;
  std::vector<ProfileFace> faces;
  faces.push_back({p.near_distance, 0.0, p.approach_distance, 0.0, 0.0, 1.0});
  for (int i = 1; i < p.num_steps; ++i) {
    const double x = p.approach_distance + (i - 1) * p.step_depth;
    const double z_lo = sign * (i - 1) * p.step_height;
    const double z_hi = sign * i * p.step_height;
    // Risers face the camera going up and away from it going down.
    faces.push_back({x, z_lo, x, z_hi, -sign, 0.0});
    faces.push_back({x, z_hi, x + p.step_depth, z_hi, 0.0, 1.0});
  }
  return faces;
}

// Proper intersection of segments ab and cd (shared endpoints do not count).
inline bool segments_cross(double ax, double az, double bx, double bz, double cx, double cz, double dx, double dz) {
  auto orient = [](double px, double pz, double qx, double qz, double rx, double rz) {
    return (qx - px) * (rz - pz) - (qz - pz) * (rx - px);
  };
  constexpr double eps = 1e-12;
  const double o1 = orient(ax, az, bx, bz, cx, cz);
  const double o2 = orient(ax, az, bx, bz, dx, dz);
  const double o3 = orient(cx, cz, dx, dz, ax, az);
  const double o4 = orient(cx, cz, dx, dz, bx, bz);
  return ((o1 > eps && o2 < -eps) || (o1 < -eps && o2 > eps)) && ((o3 > eps && o4 < -eps) || (o3 < -eps && o4 > eps));
}

inline bool visible_from_camera(const std::vector<ProfileFace>& faces, std::size_t own, double x, double z,
                                double camera_height) {
  const ProfileFace& f = faces[own];
  if (f.nx * (0.0 - x) + f.nz * (camera_height - z) <= 0.0) return false;
  for (std::size_t i = 0; i < faces.size(); ++i) {
    if (i == own) continue;
    const auto& o = faces[i];
    if (segments_cross(0.0, camera_height, x, z, o.x0, o.z0, o.x1, o.z1)) return false;
  }
  return true;
}

}  // namespace detail

/// Uniform samples of the visible floor ahead of the camera; all z are 0.
inline PointCloud gen_level_ground(const TerrainParams& p, std::uint64_t seed) {
  p.validate();
  Rng rng(seed);
  PointCloud cloud;
  cloud.label = TerrainClass::LevelGround;
  cloud.points.reserve(p.points_raw);
  const double half_width = 0.5 * p.step_width;
  for (std::size_t i = 0; i < p.points_raw; ++i) {
    const double x = rng.uniform(p.near_distance, p.extent);
    const double y = rng.uniform(-half_width, half_width);
    cloud.points.push_back({x, y, 0.0});
  }
  return cloud;
}

/// Treads and risers of a straight flight seen from the camera. Tread 0 is the
/// floor the subject stands on; tread i sits at +/- i * step_height. Faces that
/// point away from the camera or lie in the shadow of a step edge are not sampled.
inline PointCloud gen_stairs(const TerrainParams& p, StairDirection dir, std::uint64_t seed) {
  p.validate();
  const auto faces = detail::stair_profile(p, dir);
  std::vector<double> cumulative;
  double total = 0.0;
  for (const auto& f : faces) {
    total += f.length();
    cumulative.push_back(total);
  }

  Rng rng(seed);
  PointCloud cloud;
  cloud.label = dir == StairDirection::Up ? TerrainClass::UpStairs : TerrainClass::DownStairs;
  cloud.points.reserve(p.points_raw);
  const double half_width = 0.5 * p.step_width;
  const std::size_t max_attempts = 200 * p.points_raw;
  for (std::size_t attempt = 0; attempt < max_attempts && cloud.size() < p.points_raw; ++attempt) {
    // Area-uniform: face chosen by length (all faces share the width), then a uniform position on it.
    const double pick = rng.uniform() * total;
    const auto face_idx = static_cast<std::size_t>(
        std::upper_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin());
    const std::size_t fi = std::min(face_idx, faces.size() - 1);
    const auto& f = faces[fi];
    const double t = rng.uniform();
    const double y = rng.uniform(-half_width, half_width);
    const double x = f.x0 + t * (f.x1 - f.x0);
    const double z = f.z0 + t * (f.z1 - f.z0);
    if (detail::visible_from_camera(faces, fi, x, z, p.camera_height)) cloud.points.push_back({x, y, z});
  }
  if (cloud.empty()) throw std::runtime_error("gen_stairs: no visible surface for the given parameters");
  return cloud;
}

/// Gaussian jitter on every coordinate after replacing round(fraction * n)
/// randomly chosen points with side-wall and leg samples. Point count is preserved.
inline PointCloud add_noise_and_outliers(const PointCloud& cloud, const NoiseParams& np, std::uint64_t seed,
                                         std::vector<std::size_t>* outlier_indices = nullptr) {
  np.validate();
  PointCloud out = cloud;
  if (outlier_indices != nullptr) outlier_indices->clear();
  if (cloud.empty()) return out;
  Rng rng(seed);

  const std::size_t n = cloud.size();
  const auto num_outliers = static_cast<std::size_t>(std::floor(np.outlier_fraction * static_cast<double>(n) + 0.5));
  if (num_outliers > 0) {
    const Box bounds = bounding_box(cloud);
    // Floor level near the camera: lowest z among the nearest points.
    double floor_z = std::numeric_limits<double>::infinity();
    for (const auto& p : cloud.points)
      if (p[0] <= bounds.min[0] + 0.2) floor_z = std::min(floor_z, p[2]);

    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < num_outliers; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(n - i));
      std::swap(idx[i], idx[j]);
    }
    std::vector<std::size_t> chosen(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(num_outliers));
    std::sort(chosen.begin(), chosen.end());

    const double wall_side = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double wall_y = wall_side * (std::max(std::abs(bounds.min[1]), std::abs(bounds.max[1])) + 0.05);
    const double leg_x = rng.uniform(0.2, 0.45);
    const double leg_y = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.08, 0.25);
    constexpr double kLegRadius = 0.06;
    constexpr double kLegHeight = 0.6;
    constexpr double kWallHeight = 1.2;

    for (std::size_t i : chosen) {
      const bool use_wall = np.side_wall && (!np.leg || rng.uniform() < 0.5);
      Point3 q{};
      if (use_wall) {
        q = {rng.uniform(bounds.min[0], bounds.max[0]), wall_y, rng.uniform(bounds.min[2], bounds.min[2] + kWallHeight)};
      } else {
        // Front half of a vertical cylinder, facing the camera.
        const double theta = rng.uniform(0.5 * std::numbers::pi, 1.5 * std::numbers::pi);
        q = {leg_x + kLegRadius * std::cos(theta), leg_y + kLegRadius * std::sin(theta),
             rng.uniform(floor_z, floor_z + kLegHeight)};
      }
      out.points[i] = q;
    }
    if (outlier_indices != nullptr) *outlier_indices = std::move(chosen);
  }

  if (np.gaussian_sigma > 0.0) {
    for (auto& p : out.points)
      for (double& c : p) c += rng.normal(0.0, np.gaussian_sigma);
  }
  return out;
}

class TooFewPointsError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct OracleOptions {
  double slope_threshold = 0.05;
  double bin_width = 0.1;
  std::size_t min_points = 100;
  std::size_t min_bin_points = 5;
};

namespace detail {

inline double median(std::vector<double> v) {
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

}  // namespace detail

/// Robust slope of terrain height against horizontal distance from the camera.
/// Heights are binned by distance, reduced to per-bin medians, and a Theil-Sen
/// slope is fitted through the bin medians.
inline double terrain_slope(const PointCloud& cloud, const OracleOptions& opt = {}) {
  if (cloud.size() < opt.min_points)
    throw TooFewPointsError("label_oracle: need at least " + std::to_string(opt.min_points) + " points, got " +
                            std::to_string(cloud.size()));
  double r_min = std::numeric_limits<double>::infinity();
  std::vector<double> radius(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    radius[i] = std::hypot(cloud.points[i][0], cloud.points[i][1]);
    r_min = std::min(r_min, radius[i]);
  }
  std::vector<std::vector<double>> bin_r, bin_z;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto b = static_cast<std::size_t>((radius[i] - r_min) / opt.bin_width);
    if (b >= bin_r.size()) {
      bin_r.resize(b + 1);
      bin_z.resize(b + 1);
    }
    bin_r[b].push_back(radius[i]);
    bin_z[b].push_back(cloud.points[i][2]);
  }
  std::vector<std::pair<double, double>> profile;
  for (std::size_t b = 0; b < bin_r.size(); ++b)
    if (bin_r[b].size() >= opt.min_bin_points) profile.emplace_back(detail::median(bin_r[b]), detail::median(bin_z[b]));
  if (profile.size() < 2) return 0.0;
  std::vector<double> slopes;
  for (std::size_t i = 0; i < profile.size(); ++i)
    for (std::size_t j = i + 1; j < profile.size(); ++j) {
      const double dr = profile[j].first - profile[i].first;
      if (dr > 1e-9) slopes.push_back((profile[j].second - profile[i].second) / dr);
    }
  return slopes.empty() ? 0.0 : detail::median(std::move(slopes));
}

/// Geometric class decision, independent of any learned model.
inline TerrainClass label_oracle(const PointCloud& cloud, const OracleOptions& opt = {}) {
  const double slope = terrain_slope(cloud, opt);
  if (std::abs(slope) < opt.slope_threshold) return TerrainClass::LevelGround;
  return slope > 0.0 ? TerrainClass::UpStairs : TerrainClass::DownStairs;
}

// ---------------------------------------------------------------------------
// Dataset assembly

enum class Regime : std::uint8_t { CleanSim = 0, NoisySim = 1 };
enum class Split : std::uint8_t { Train = 0, Test = 1 };

inline constexpr std::string_view regime_name(Regime r) { return r == Regime::CleanSim ? "clean-sim" : "noisy-sim"; }

struct GeneratorRanges {
  Range step_height{0.10, 0.20};
  Range step_depth{0.25, 0.35};
  Range step_width{0.8, 1.5};
  int min_steps = 3;
  int max_steps = 8;
  Range extent{1.5, 3.5};
  Range camera_height{0.8, 1.1};
  Range approach_distance{0.3, 0.8};
  double near_distance = 0.2;
  std::size_t points_raw = 4096;
  double clean_sigma = 0.002;
  double noisy_sigma = 0.02;
  Range noisy_outlier_fraction{0.05, 0.2};

  friend bool operator==(const GeneratorRanges&, const GeneratorRanges&) = default;
};

struct SampleRecord {
  std::uint64_t seed = 0;
  TerrainClass label = TerrainClass::LevelGround;
  Regime regime = Regime::CleanSim;
  Split split = Split::Train;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

struct DatasetManifest {
  static constexpr int kFormatVersion = 1;

  int format_version = kFormatVersion;
  std::uint64_t seed = 0;
  std::size_t points_per_sample = 2048;
  std::vector<std::string> class_names{"level_ground", "up_stairs", "down_stairs"};
  GeneratorRanges ranges;
  std::vector<SampleRecord> samples;

  std::size_t num_samples() const noexcept { return samples.size(); }

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Balanced assignment: sample i belongs to block i / 6; inside a block the six
/// (class, regime) strata appear once each, and the split alternates across
/// blocks so every stratum is halved between train and test.
inline DatasetManifest make_manifest(std::size_t num_samples, std::size_t points_per_sample, std::uint64_t seed,
                                     const GeneratorRanges& ranges = {}) {
  if (num_samples == 0) throw std::invalid_argument("make_manifest: num_samples must be positive");
  if (points_per_sample == 0) throw std::invalid_argument("make_manifest: points_per_sample must be positive");
  if (ranges.min_steps < limits::kMinSteps || ranges.max_steps > limits::kMaxSteps || ranges.min_steps > ranges.max_steps)
    throw std::invalid_argument("make_manifest: step count range invalid");
  DatasetManifest m;
  m.seed = seed;
  m.points_per_sample = points_per_sample;
  m.ranges = ranges;
  m.samples.resize(num_samples);
  for (std::size_t i = 0; i < num_samples; ++i) {
    const std::size_t block = i / 6;
    const std::size_t slot = i % 6;
    auto& s = m.samples[i];
    s.seed = mix_seed(seed, i);
    s.label = static_cast<TerrainClass>(slot % 3);
    s.regime = slot < 3 ? Regime::CleanSim : Regime::NoisySim;
    s.split = (block + slot) % 2 == 0 ? Split::Train : Split::Test;
  }
  return m;
}

/// Per-sample generator inputs drawn from the manifest ranges.
struct SampleParams {
  TerrainParams terrain;
  NoiseParams noise;
};

inline SampleParams draw_sample_params(const DatasetManifest& m, std::size_t index) {
  const auto& rec = m.samples.at(index);
  const auto& r = m.ranges;
  Rng rng(mix_seed(rec.seed, 1));
  SampleParams sp;
  auto& t = sp.terrain;
  t.step_height = r.step_height.draw(rng);
  t.step_depth = r.step_depth.draw(rng);
  t.step_width = r.step_width.draw(rng);
  t.num_steps = r.min_steps + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(r.max_steps - r.min_steps + 1)));
  t.extent = r.extent.draw(rng);
  t.camera_height = r.camera_height.draw(rng);
  t.approach_distance = r.approach_distance.draw(rng);
  t.near_distance = r.near_distance;
  t.points_raw = r.points_raw;
  if (rec.regime == Regime::CleanSim) {
    sp.noise = {r.clean_sigma, 0.0, true, true};
  } else {
    sp.noise = {r.noisy_sigma, r.noisy_outlier_fraction.draw(rng), true, true};
  }
  return sp;
}

/// Generates sample `index` of the manifest, already downsampled.
inline PointCloud generate_sample(const DatasetManifest& m, std::size_t index) {
  const auto& rec = m.samples.at(index);
  const SampleParams sp = draw_sample_params(m, index);
  PointCloud raw;
  switch (rec.label) {
    case TerrainClass::LevelGround: raw = gen_level_ground(sp.terrain, mix_seed(rec.seed, 2)); break;
    case TerrainClass::UpStairs: raw = gen_stairs(sp.terrain, StairDirection::Up, mix_seed(rec.seed, 2)); break;
    case TerrainClass::DownStairs: raw = gen_stairs(sp.terrain, StairDirection::Down, mix_seed(rec.seed, 2)); break;
  }
  PointCloud noisy = add_noise_and_outliers(raw, sp.noise, mix_seed(rec.seed, 3));
  PointCloud out = downsample(noisy, m.points_per_sample, mix_seed(rec.seed, 4));
  out.label = rec.label;
  return out;
}

/// In-memory dataset with the exact contents of the on-disk files.
struct Dataset {
  DatasetManifest manifest;
  std::vector<float> points;  // [sample][point][xyz]

  std::size_t size() const noexcept { return manifest.num_samples(); }
  std::size_t points_per_sample() const noexcept { return manifest.points_per_sample; }
  TerrainClass label(std::size_t i) const { return manifest.samples.at(i).label; }
  Split split(std::size_t i) const { return manifest.samples.at(i).split; }

  std::span<const float> raw_sample(std::size_t i) const {
    const std::size_t stride = points_per_sample() * 3;
    return {points.data() + i * stride, stride};
  }

  PointCloud cloud(std::size_t i) const {
    const auto raw = raw_sample(i);
    PointCloud c;
    c.label = label(i);
    c.points.resize(points_per_sample());
    for (std::size_t p = 0; p < c.points.size(); ++p)
      c.points[p] = {static_cast<double>(raw[3 * p]), static_cast<double>(raw[3 * p + 1]),
                     static_cast<double>(raw[3 * p + 2])};
    return c;
  }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (split(i) == s) out.push_back(i);
    return out;
  }
};

inline Dataset build_dataset(const DatasetManifest& manifest, unsigned threads = 1) {
  if (manifest.format_version != DatasetManifest::kFormatVersion)
    throw std::invalid_argument("build_dataset: unsupported manifest format version " +
                                std::to_string(manifest.format_version));
  if (manifest.num_samples() == 0 || manifest.points_per_sample == 0)
    throw std::invalid_argument("build_dataset: empty manifest");
  Dataset ds;
  ds.manifest = manifest;
  const std::size_t stride = manifest.points_per_sample * 3;
  ds.points.assign(manifest.num_samples() * stride, 0.0F);
  parallel_for(manifest.num_samples(), threads, [&](std::size_t i) {
    const PointCloud c = generate_sample(manifest, i);
    float* dst = ds.points.data() + i * stride;
    for (std::size_t p = 0; p < c.size(); ++p)
      for (int a = 0; a < 3; ++a) dst[3 * p + static_cast<std::size_t>(a)] = static_cast<float>(c.points[p][static_cast<std::size_t>(a)]);
  });
  return ds;
}

// ---------------------------------------------------------------------------
// Persistence: manifest.json, points.bin (LE float32), labels.bin, split.bin

inline nlohmann::json range_to_json(const Range& r) { return nlohmann::json::array({r.lo, r.hi}); }
inline Range range_from_json(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["format_version"] = m.format_version;
  j["seed"] = m.seed;
  j["num_samples"] = m.num_samples();
  j["points_per_sample"] = m.points_per_sample;
  j["class_names"] = m.class_names;
  const auto& r = m.ranges;
  j["generator"] = {
      {"step_height", range_to_json(r.step_height)},
      {"step_depth", range_to_json(r.step_depth)},
      {"step_width", range_to_json(r.step_width)},
      {"num_steps", nlohmann::json::array({r.min_steps, r.max_steps})},
      {"extent", range_to_json(r.extent)},
      {"camera_height", range_to_json(r.camera_height)},
      {"approach_distance", range_to_json(r.approach_distance)},
      {"near_distance", r.near_distance},
      {"points_raw", r.points_raw},
      {"clean_sigma", r.clean_sigma},
      {"noisy_sigma", r.noisy_sigma},
      {"noisy_outlier_fraction", range_to_json(r.noisy_outlier_fraction)},
  };
  nlohmann::json samples = nlohmann::json::array();
  std::size_t train = 0;
  for (const auto& s : m.samples) {
    samples.push_back({{"seed", s.seed},
                       {"label", static_cast<int>(s.label)},
                       {"regime", std::string(regime_name(s.regime))},
                       {"split", s.split == Split::Train ? "train" : "test"}});
    if (s.split == Split::Train) ++train;
  }
  j["num_train"] = train;
  j["num_test"] = m.num_samples() - train;
  j["samples"] = std::move(samples);
  j["files"] = {{"points", "points.bin"}, {"labels", "labels.bin"}, {"split", "split.bin"}};
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.format_version = j.at("format_version").get<int>();
  if (m.format_version != DatasetManifest::kFormatVersion)
    throw std::invalid_argument("manifest: unsupported format version " + std::to_string(m.format_version));
  m.seed = j.at("seed").get<std::uint64_t>();
  m.points_per_sample = j.at("points_per_sample").get<std::size_t>();
  m.class_names = j.at("class_names").get<std::vector<std::string>>();
  const auto& g = j.at("generator");
  auto& r = m.ranges;
  r.step_height = range_from_json(g.at("step_height"));
  r.step_depth = range_from_json(g.at("step_depth"));
  r.step_width = range_from_json(g.at("step_width"));
  r.min_steps = g.at("num_steps").at(0).get<int>();
  r.max_steps = g.at("num_steps").at(1).get<int>();
  r.extent = range_from_json(g.at("extent"));
  r.camera_height = range_from_json(g.at("camera_height"));
  r.approach_distance = range_from_json(g.at("approach_distance"));
  r.near_distance = g.at("near_distance").get<double>();
  r.points_raw = g.at("points_raw").get<std::size_t>();
  r.clean_sigma = g.at("clean_sigma").get<double>();
  r.noisy_sigma = g.at("noisy_sigma").get<double>();
  r.noisy_outlier_fraction = range_from_json(g.at("noisy_outlier_fraction"));
  for (const auto& s : j.at("samples")) {
    SampleRecord rec;
    rec.seed = s.at("seed").get<std::uint64_t>();
    const int label = s.at("label").get<int>();
    if (label < 0 || label >= kNumClasses) throw std::invalid_argument("manifest: label out of range");
    rec.label = static_cast<TerrainClass>(label);
    rec.regime = s.at("regime").get<std::string>() == "noisy-sim" ? Regime::NoisySim : Regime::CleanSim;
    rec.split = s.at("split").get<std::string>() == "test" ? Split::Test : Split::Train;
    m.samples.push_back(rec);
  }
  if (m.samples.size() != j.at("num_samples").get<std::size_t>())
    throw std::invalid_argument("manifest: num_samples does not match sample list");
  return m;
}

namespace detail {

inline void write_bytes(const std::filesystem::path& path, const void* data, std::size_t bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::vector<char> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffU) << 24) | ((v & 0xff00U) << 8) | ((v >> 8) & 0xff00U) | (v >> 24);
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  {
    std::ofstream f(dir / "manifest.json", std::ios::trunc);
    if (!f) throw IoError("cannot write " + (dir / "manifest.json").string());
    f << manifest_to_json(ds.manifest).dump(2) << '\n';
    if (!f) throw IoError("write failed: manifest.json");
  }
  std::vector<std::uint32_t> words(ds.points.size());
  for (std::size_t i = 0; i < words.size(); ++i)
    words[i] = detail::to_little_endian(std::bit_cast<std::uint32_t>(ds.points[i]));
  detail::write_bytes(dir / "points.bin", words.data(), words.size() * sizeof(std::uint32_t));
  std::vector<std::uint8_t> labels, split;
  for (const auto& s : ds.manifest.samples) {
    labels.push_back(static_cast<std::uint8_t>(s.label));
    split.push_back(static_cast<std::uint8_t>(s.split));
  }
  detail::write_bytes(dir / "labels.bin", labels.data(), labels.size());
  detail::write_bytes(dir / "split.bin", split.data(), split.size());
}

inline DatasetManifest load_manifest(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot open " + (dir / "manifest.json").string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest.json: " + std::string(e.what()));
  }
  return manifest_from_json(j);
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.manifest = load_manifest(dir);
  const std::size_t count = ds.manifest.num_samples() * ds.manifest.points_per_sample * 3;
  const auto raw = detail::read_bytes(dir / "points.bin");
  if (raw.size() != count * 4) throw IoError("points.bin: expected " + std::to_string(count * 4) + " bytes");
  ds.points.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t w;
    std::memcpy(&w, raw.data() + 4 * i, 4);
    ds.points[i] = std::bit_cast<float>(detail::to_little_endian(w));
  }
  const auto labels = detail::read_bytes(dir / "labels.bin");
  const auto split = detail::read_bytes(dir / "split.bin");
  if (labels.size() != ds.size() || split.size() != ds.size())
    throw IoError("labels.bin/split.bin length does not match manifest");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (static_cast<std::uint8_t>(labels[i]) != static_cast<std::uint8_t>(ds.manifest.samples[i].label) ||
        static_cast<std::uint8_t>(split[i]) != static_cast<std::uint8_t>(ds.manifest.samples[i].split))
      throw IoError("labels.bin/split.bin disagree with manifest at sample " + std::to_string(i));
  }
  return ds;
}

}  // namespace terrain_pn
