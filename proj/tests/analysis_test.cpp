#include <gtest/gtest.h>

#include <algorithm>

#include "terrain_pn/analysis.hpp"

using namespace terrain_pn;

namespace {

PointCloud random_cloud(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) c.points.push_back({rng.uniform(0, 2), rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4)});
  return c;
}

ModelWeights perturbed(const ModelSpec& spec, std::uint64_t seed) {
  ModelWeights w = build_model(spec, seed);
  Rng rng(seed + 1);
  auto flat = w.flatten();
  for (double& v : flat) v += rng.uniform(-0.05, 0.05);
  w.assign(flat);
  return w;
}

ModelSpec small_baseline() {
  ModelSpec s = ModelSpec::baseline_tnet();
  s.input_tnet.point_widths = {16, 32};
  s.input_tnet.head_widths = {16};
  s.per_point_widths = {16, 16, 32, 64};
  s.classifier_widths = {16, 3};
  return s;
}

}  // namespace

TEST(Critical, SinglePointOwnsEveryDimension) {
  const ModelWeights w = perturbed(ModelSpec{}, 1);
  const CriticalSet cs = critical_points(w, random_cloud(1, 2));
  EXPECT_EQ(cs.indices, std::vector<std::size_t>{0});
  EXPECT_EQ(cs.argmax.size(), 256U);
  for (std::size_t a : cs.argmax) EXPECT_EQ(a, 0U);
}

TEST(Critical, SubsetReproducesGlobalFeatureBitwise) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ModelWeights w = perturbed(ModelSpec{}, seed);
    const PointCloud c = random_cloud(800, seed + 20);
    const CriticalSet cs = critical_points(w, c);
    const auto full = forward(w, c);
    const auto sub = forward(w, cs.points);
    EXPECT_EQ(sub.global_feature, full.global_feature);
    EXPECT_EQ(sub.logits, full.logits);
    EXPECT_LE(cs.indices.size(), 256U);
    EXPECT_TRUE(std::is_sorted(cs.indices.begin(), cs.indices.end()));
    EXPECT_TRUE(critical_subset_identity(w, c));
  }
}

TEST(Critical, BaselineSupportIdentity) {
  const ModelWeights w = perturbed(small_baseline(), 3);
  const PointCloud c = random_cloud(300, 4);
  EXPECT_TRUE(critical_subset_identity(w, c));
  const ForwardTrace tr = forward_trace(w, c.points);
  const auto support = pooling_support(tr);
  const CriticalSet cs = critical_points(w, c);
  EXPECT_TRUE(std::includes(support.begin(), support.end(), cs.indices.begin(), cs.indices.end()));
}

TEST(Critical, CardinalityBoundedByFeatureLength) {
  for (std::size_t n : {16U, 64U}) {
    const ModelWeights w = perturbed(ModelSpec::directional(n), 7);
    for (std::uint64_t seed = 0; seed < 4; ++seed) EXPECT_LE(critical_points(w, random_cloud(1000, seed)).indices.size(), n);
  }
}

TEST(Critical, RemovingNonCriticalPointKeepsFeature) {
  const ModelWeights w = perturbed(ModelSpec{}, 9);
  const PointCloud c = random_cloud(120, 10);
  const CriticalSet cs = critical_points(w, c);
  const auto ref = forward(w, c).global_feature;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (std::binary_search(cs.indices.begin(), cs.indices.end(), i)) continue;
    PointCloud d = c;
    d.points.erase(d.points.begin() + static_cast<std::ptrdiff_t>(i));
    ASSERT_EQ(forward(w, d).global_feature, ref) << "point " << i;
  }
}

TEST(UpperBound, GridSizeAndOrder) {
  const ModelWeights w = perturbed(ModelSpec{}, 2);
  const PointCloud c = random_cloud(200, 3);
  const UpperBoundResult ub = upper_bound_points(w, c);
  EXPECT_EQ(ub.candidates_evaluated, 64000U);
  EXPECT_TRUE(std::is_sorted(ub.grid_indices.begin(), ub.grid_indices.end()));
  EXPECT_EQ(ub.points.size(), ub.grid_indices.size());
  CubeSpec small;
  small.resolution = 5;
  EXPECT_EQ(upper_bound_points(w, c, small).candidates_evaluated, 125U);
}

TEST(UpperBound, CloudPointsInsideCubeAreDominated) {
  const ModelWeights w = perturbed(ModelSpec{}, 4);
  const PointCloud c = random_cloud(300, 5);
  const ForwardTrace tr = forward_trace(w, c.points);
  const auto keep = dominated_by(w, tr, c.points);
  for (char k : keep) EXPECT_TRUE(k);
}

TEST(UpperBound, AddingKeptPointsChangesNothing) {
  for (const ModelSpec& spec : {ModelSpec{}, small_baseline()}) {
    const ModelWeights w = perturbed(spec, 6);
    const PointCloud c = random_cloud(400, 7);
    CubeSpec cube;
    cube.resolution = 20;
    const UpperBoundResult ub = upper_bound_points(w, c, cube);
    ASSERT_GT(ub.points.size(), 0U);
    EXPECT_TRUE(addition_identity(w, c, ub.points));
    PointCloud merged = c;
    merged.points.insert(merged.points.end(), ub.points.points.begin(), ub.points.points.end());
    EXPECT_EQ(forward(w, merged).logits, forward(w, c).logits);
  }
}

TEST(UpperBound, RejectedPointsWouldChangeFeature) {
  const ModelWeights w = perturbed(ModelSpec{}, 8);
  const PointCloud c = random_cloud(100, 9);
  CubeSpec cube;
  cube.resolution = 6;
  cube.edge = 3.0;
  const UpperBoundResult ub = upper_bound_points(w, c, cube);
  ASSERT_LT(ub.points.size(), 216U);
  // Any vertex not returned raises at least one global feature entry.
  const Point3 center = ub.center;
  std::size_t checked = 0;
  for (std::size_t g = 0; g < 216 && checked < 10; ++g) {
    if (std::binary_search(ub.grid_indices.begin(), ub.grid_indices.end(), g)) continue;
    const std::size_t i = g / 36, j = (g / 6) % 6, k = g % 6;
    auto coord = [&](std::size_t idx, int axis) { return center[axis] + 3.0 * (static_cast<double>(idx) / 5.0 - 0.5); };
    PointCloud extra;
    extra.points.push_back({coord(i, 0), coord(j, 1), coord(k, 2)});
    EXPECT_FALSE(addition_identity(w, c, extra));
    ++checked;
  }
  EXPECT_GT(checked, 0U);
}

TEST(UpperBound, InvalidCube) {
  const ModelWeights w = perturbed(ModelSpec{}, 1);
  CubeSpec bad;
  bad.resolution = 1;
  EXPECT_THROW(upper_bound_points(w, random_cloud(5, 1), bad), std::invalid_argument);
  bad = {};
  bad.edge = 0.0;
  EXPECT_THROW(upper_bound_points(w, random_cloud(5, 1), bad), std::invalid_argument);
}

TEST(Sweep, SingleLengthMatchesTrain) {
  const Dataset ds = build_dataset(make_manifest(24, 48, 8));
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 6;
  const auto sweep = sweep_feature_length({24}, ds, c);
  ASSERT_EQ(sweep.size(), 1U);
  const TrainResult direct = train(ModelSpec::directional(24), ds, c);
  EXPECT_EQ(sweep[0].weights, direct.weights);
  ASSERT_EQ(sweep[0].history.epochs.size(), direct.history.epochs.size());
  for (std::size_t i = 0; i < direct.history.epochs.size(); ++i)
    EXPECT_EQ(sweep[0].history.epochs[i].test_loss, direct.history.epochs[i].test_loss);
}

TEST(Sweep, AlignedHistoriesAndTaggedErrors) {
  const Dataset ds = build_dataset(make_manifest(12, 32, 2));
  TrainConfig c;
  c.epochs = 2;
  std::vector<std::size_t> seen;
  const auto sweep = sweep_feature_length({8, 16}, ds, c, ModelSpec{}, [&](std::size_t n, const EpochRecord&) {
    seen.push_back(n);
  });
  ASSERT_EQ(sweep.size(), 2U);
  EXPECT_EQ(sweep[0].history.epochs.size(), sweep[1].history.epochs.size());
  EXPECT_EQ(sweep[1].weights.spec.global_feature_length(), 16U);
  EXPECT_EQ(seen, (std::vector<std::size_t>{8, 8, 16, 16}));
  try {
    sweep_feature_length({8, 0}, ds, c);
    FAIL() << "expected SweepError";
  } catch (const SweepError& e) {
    EXPECT_EQ(e.length(), 0U);
  }
}

TEST(Sweep, DefaultLengths) {
  EXPECT_EQ(default_sweep_lengths(), (std::vector<std::size_t>{32, 64, 128, 256, 512, 1024}));
}
