// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance --suite core   criteria 1 (desk), 2, 3, 5, 6 plus supporting checks
//   acceptance --suite full   criteria 1 (full) and 4 at paper scale
//
// Exit status is 0 only when every line passes.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "terrain_pn/terrain_pn.hpp"

using namespace terrain_pn;
namespace fs = std::filesystem;

namespace {

// Tolerances and thresholds, all in one place.
constexpr double kDeskAccuracy = 0.97;
constexpr double kDeskWallSeconds = 600.0;
constexpr double kFullAccuracy = 0.99;
constexpr double kConvergenceThreshold = 0.95;
constexpr int kConvergenceSeeds = 3;
constexpr int kConvergenceWins = 2;
constexpr std::size_t kExpectedParams = 62403;
constexpr std::uint64_t kExpectedMacs = 42377408;
constexpr double kPaperMacs = 43e6;
constexpr double kMacTolerance = 0.05;
constexpr double kParamLo = 0.03e6, kParamHi = 0.10e6;
constexpr double kBaselineLo = 1.7e6, kBaselineHi = 7e6;
constexpr double kParamRatio = 10.0, kMacRatio = 5.0;
constexpr double kGradTolerance = 1e-4;
constexpr double kRigidTolerance = 1e-9;
constexpr double kPropertySeconds = 60.0;
constexpr double kDirectionSensitivity = 0.90;
constexpr double kOutlineSpan = 1.0;
constexpr std::uint64_t kDatasetSeed = 0;
constexpr std::uint64_t kTrainSeed = 7;

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Report {
  int failures = 0;
  void line(bool ok, const std::string& name, const std::string& detail) {
    std::printf("%s  %-34s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
  }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

void note(const std::string& s) {
  std::printf("      %s\n", s.c_str());
  std::fflush(stdout);
}

Dataset make_dataset(const Profile& p, unsigned threads) {
  return build_dataset(make_manifest(p.samples, p.points, kDatasetSeed), threads);
}

TrainConfig profile_config(const Profile& p, std::uint64_t seed, unsigned threads) {
  TrainConfig c = p.train_config(seed);
  c.threads = threads;
  return c;
}

std::string epoch_or_never(std::optional<int> e) { return e ? std::to_string(*e) : std::string("never"); }

// ---------------------------------------------------------------------------
// Supporting checks on a trained model

// Fraction of correctly classified up-stairs test clouds whose prediction
// changes after a half turn about the lateral (y) axis.
double direction_sensitivity(const ModelWeights& w, const Dataset& ds, std::size_t& considered) {
  std::size_t changed = 0;
  considered = 0;
  for (std::size_t i : ds.indices(Split::Test)) {
    if (ds.label(i) != TerrainClass::UpStairs) continue;
    const PointCloud c = ds.cloud(i);
    if (predict(w, c) != static_cast<int>(TerrainClass::UpStairs)) continue;
    ++considered;
    changed += predict(w, rotate_cloud(c, {0, std::numbers::pi, 0})) != static_cast<int>(TerrainClass::UpStairs);
  }
  return considered == 0 ? 0.0 : static_cast<double>(changed) / static_cast<double>(considered);
}

// Clean up-stairs test clouds whose critical-point z range spans every
// populated tread level (levels found as well-populated z bands). `every_level`
// counts the stricter variant where each level holds a critical point.
struct OutlineStats {
  std::size_t considered = 0, spanning = 0, every_level = 0;
};

OutlineStats outline_coverage(const ModelWeights& w, const Dataset& ds) {
  constexpr double kBand = 0.02;
  constexpr std::size_t kMinBandPoints = 15;
  OutlineStats st;
  for (std::size_t i : ds.indices(Split::Test)) {
    const auto& rec = ds.manifest.samples[i];
    if (rec.label != TerrainClass::UpStairs || rec.regime != Regime::CleanSim) continue;
    const PointCloud c = ds.cloud(i);
    const double h = draw_sample_params(ds.manifest, i).terrain.step_height;
    auto level_of = [&](double z) -> std::optional<long> {
      const long k = std::lround(z / h);
      if (std::abs(z - static_cast<double>(k) * h) > kBand) return std::nullopt;
      return k;
    };
    std::map<long, std::size_t> band_count;
    for (const auto& p : c.points)
      if (auto k = level_of(p[2])) ++band_count[*k];
    const CriticalSet cs = critical_points(w, c);
    std::map<long, bool> hit;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& p : cs.points.points) {
      lo = std::min(lo, p[2]);
      hi = std::max(hi, p[2]);
      if (auto k = level_of(p[2])) hit[*k] = true;
    }
    bool spans = true, all = true;
    for (auto [k, n] : band_count) {
      if (n < kMinBandPoints) continue;
      const double z = static_cast<double>(k) * h;
      spans = spans && lo <= z + kBand && hi >= z - kBand;
      all = all && hit[k];
    }
    ++st.considered;
    st.spanning += spans;
    st.every_level += all;
  }
  return st;
}

// ---------------------------------------------------------------------------
// Criterion 5: property suite on random and generated data

void property_suite(Report& rep) {
  const auto t0 = Clock::now();
  Rng rng(2024);
  auto random_cloud = [&](std::size_t n) {
    PointCloud c;
    for (std::size_t i = 0; i < n; ++i) c.points.push_back({rng.uniform(0, 3), rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)});
    return c;
  };
  auto jitter = [&](ModelWeights w, double s) {
    auto flat = w.flatten();
    for (double& v : flat) v += rng.uniform(-s, s);
    w.assign(flat);
    return w;
  };

  // Permutation invariance.
  bool perm_ok = true;
  for (const ModelSpec& spec : {ModelSpec{}, ModelSpec::baseline_tnet()}) {
    const ModelWeights w = jitter(build_model(spec, 1), 0.02);
    PointCloud c = random_cloud(spec.has_input_tnet() ? 256 : 2048);
    const auto ref = forward(w, c);
    for (int t = 0; t < 3; ++t) {
      rng.shuffle(c.points);
      const auto r = forward(w, c);
      perm_ok = perm_ok && r.global_feature == ref.global_feature && r.logits == ref.logits;
    }
  }
  rep.line(perm_ok, "5a permutation invariance", "global feature and logits bit-identical under 3 shuffles, both variants");

  // Gradient check on 8-point toys.
  double worst = 0.0;
  {
    ModelSpec dir;
    dir.per_point_widths = {8, 16};
    dir.classifier_widths = {8, 3};
    ModelSpec base = ModelSpec::baseline_tnet();
    base.input_tnet = {{8, 12}, {8}};
    base.per_point_widths = {8, 8, 16};
    base.classifier_widths = {8, 3};
    base.feature_tnet_after = 1;
    for (const ModelSpec& spec : {dir, base})
      for (std::uint64_t seed = 1; seed <= 2; ++seed) {
        const ModelWeights w = jitter(build_model(spec, seed), 0.3);
        const std::vector<PointCloud> batch{random_cloud(8), random_cloud(8)};
        const std::vector<int> labels{0, 2};
        const auto analytic = backward(w, batch, labels).gradients.flatten();
        const auto numeric = finite_difference_grad(
            [&](std::span<const double> p) {
              ModelWeights v = w;
              v.assign(p);
              return batch_loss(v, batch, labels);
            },
            w.flatten());
        worst = std::max(worst, max_relative_error(analytic, numeric, 1e-6));
      }
  }
  rep.line(worst < kGradTolerance, "5b gradient check", fmt("max relative error %.3g < %.0e", worst, kGradTolerance));

  // Critical set identity, cardinality, upper-bound identity on generated clouds.
  const Dataset ds = build_dataset(make_manifest(12, 2048, 11));
  const ModelWeights w = jitter(build_model(ModelSpec{}, 3), 0.02);
  bool crit_ok = true, card_ok = true, ub_ok = true;
  std::size_t max_crit = 0, ub_points = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const PointCloud c = ds.cloud(i);
    const CriticalSet cs = critical_points(w, c);
    crit_ok = crit_ok && forward(w, cs.points).global_feature == forward(w, c).global_feature;
    max_crit = std::max(max_crit, cs.indices.size());
    card_ok = card_ok && cs.indices.size() <= w.spec.global_feature_length();
    if (i < 3) {
      const UpperBoundResult ub = upper_bound_points(w, c);
      ub_points += ub.points.size();
      ub_ok = ub_ok && ub.candidates_evaluated == 64000 && addition_identity(w, c, ub.points);
    }
  }
  rep.line(crit_ok, "5c critical-set identity", "forward(critical subset) == forward(cloud) bitwise on 12 clouds");
  rep.line(ub_ok, "5d upper-bound addition identity",
           fmt("%zu upper-bound points added to 3 clouds, global feature bitwise unchanged", ub_points));
  rep.line(card_ok, "5e |critical| <= N", fmt("max |critical| %zu <= %zu", max_crit, w.spec.global_feature_length()));

  // Stabilization rigidity.
  double worst_dist = 0.0;
  {
    const PointCloud c = random_cloud(300);
    for (int t = 0; t < 5; ++t) {
      const Orientation o{rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)};
      const PointCloud s = stabilize(c, o);
      for (std::size_t i = 0; i < c.size(); ++i)
        for (std::size_t j = i + 1; j < c.size(); j += 7)
          worst_dist = std::max(worst_dist, std::abs(distance(s.points[i], s.points[j]) - distance(c.points[i], c.points[j])));
    }
  }
  rep.line(worst_dist <= kRigidTolerance, "5f stabilization rigidity",
           fmt("max pairwise distance change %.3g <= %.0e", worst_dist, kRigidTolerance));

  // Oracle agreement on clean-sim and the half-turn label flip.
  const DatasetManifest m = make_manifest(600, 512, 5);
  std::size_t clean = 0, agree = 0, ups = 0, flipped = 0;
  for (std::size_t i = 0; i < m.num_samples(); ++i) {
    if (m.samples[i].regime != Regime::CleanSim) continue;
    const PointCloud c = generate_sample(m, i);
    ++clean;
    agree += label_oracle(c) == m.samples[i].label;
    if (m.samples[i].label == TerrainClass::UpStairs) {
      ++ups;
      flipped += label_oracle(rotate_cloud(c, {0, std::numbers::pi, 0})) == TerrainClass::DownStairs;
    }
  }
  rep.line(agree == clean, "5g oracle agreement (clean-sim)", fmt("%zu / %zu", agree, clean));
  rep.line(flipped == ups, "5h half-turn flips Up to Down", fmt("%zu / %zu up-stairs clouds", flipped, ups));

  const double secs = seconds_since(t0);
  rep.line(secs < kPropertySeconds, "5  property suite runtime", fmt("%.1f s < %.0f s", secs, kPropertySeconds));
}

// ---------------------------------------------------------------------------

int run_core(const fs::path& out, unsigned threads) {
  Report rep;
  const Profile desk = desk_profile();

  // Criterion 2: efficiency accounting.
  {
    const std::size_t params = count_params(ModelSpec{});
    const std::uint64_t macs = count_flops(ModelSpec{}, 2048, FlopConvention::MAC);
    const std::size_t base_params = count_params(ModelSpec::baseline_tnet());
    const std::uint64_t base_macs = count_flops(ModelSpec::baseline_tnet(), 2048, FlopConvention::MAC);
    const double mac_err = std::abs(static_cast<double>(macs) - kPaperMacs) / kPaperMacs;
    const double pr = static_cast<double>(base_params) / static_cast<double>(params);
    const double mr = static_cast<double>(base_macs) / static_cast<double>(macs);
    const bool flop2_ok = count_flops(ModelSpec{}, 2048, FlopConvention::FLOP2) == 2 * macs &&
                          count_flops(ModelSpec::baseline_tnet(), 2048, FlopConvention::FLOP2) == 2 * base_macs;
    rep.line(params == kExpectedParams && params >= kParamLo && params <= kParamHi, "2a directional params",
             fmt("%zu (expected %zu, within [0.03M, 0.10M])", params, kExpectedParams));
    rep.line(macs == kExpectedMacs && mac_err <= kMacTolerance, "2b directional MACs n=2048",
             fmt("%llu (expected %llu, %.2f%% from 43M)", static_cast<unsigned long long>(macs),
                 static_cast<unsigned long long>(kExpectedMacs), 100 * mac_err));
    rep.line(base_params >= kBaselineLo && base_params <= kBaselineHi, "2c baseline params",
             fmt("%zu within [1.7M, 7M]", base_params));
    rep.line(pr >= kParamRatio && mr >= kMacRatio && flop2_ok, "2d efficiency ratios",
             fmt("params %.1fx >= 10x, MACs %.1fx >= 5x (both conventions)", pr, mr));
  }

  // Criterion 5.
  property_suite(rep);

  // Criterion 1 (desk) and 6 (determinism).
  const Dataset ds = make_dataset(desk, threads);
  const TrainConfig cfg = profile_config(desk, kTrainSeed, threads);
  const auto t0 = Clock::now();
  const TrainResult run1 = train(ModelSpec::directional(desk.feature_length), ds, cfg);
  const double wall = seconds_since(t0);
  const double acc = run1.history.final_accuracy();
  rep.line(!run1.history.diverged && run1.history.epochs.size() == 30 && acc >= kDeskAccuracy && wall <= kDeskWallSeconds,
           "1  accuracy (desk)",
           fmt("final test acc %.4f >= %.2f after %zu epochs, %.1f s <= %.0f s (%u thread)", acc, kDeskAccuracy,
               run1.history.epochs.size(), wall, kDeskWallSeconds, threads));
  fs::create_directories(out);
  write_text(out / "desk_history.csv", history_csv(run1.history));
  save_checkpoint(run1.weights, out / "desk_model.tpnw");

  const TrainResult run2 = train(ModelSpec::directional(desk.feature_length), ds, cfg);
  const bool hist_same = history_csv(run1.history) == history_csv(run2.history);
  const bool ckpt_same = serialize_checkpoint(run1.weights) == serialize_checkpoint(run2.weights);
  rep.line(hist_same && ckpt_same, "6  determinism (desk)",
           fmt("history.csv %s, checkpoint %s across two runs", hist_same ? "identical" : "DIFFERS",
               ckpt_same ? "identical" : "DIFFERS"));

  // Supporting checks on the trained desk model.
  {
    std::size_t n = 0;
    const double frac = direction_sensitivity(run1.weights, ds, n);
    rep.line(n > 0 && frac >= kDirectionSensitivity, "+  direction sensitivity (desk)",
             fmt("%.3f of %zu correct up-stairs clouds change class after half turn (>= %.2f)", frac, n,
                 kDirectionSensitivity));
    const OutlineStats os = outline_coverage(run1.weights, ds);
    const double span = os.considered == 0 ? 0.0 : static_cast<double>(os.spanning) / static_cast<double>(os.considered);
    rep.line(os.considered > 0 && span >= kOutlineSpan, "+  critical points span treads",
             fmt("%zu of %zu clean up-stairs clouds: critical z range covers every tread level (>= %.2f)", os.spanning,
                 os.considered, kOutlineSpan));
    note(fmt("critical point on every individual tread level: %zu of %zu clouds", os.every_level, os.considered));
  }

  // Criterion 3: convergence comparison.
  {
    int wins = 0;
    std::string detail;
    for (int s = 1; s <= kConvergenceSeeds; ++s) {
      TrainConfig c = profile_config(desk, static_cast<std::uint64_t>(s), threads);
      c.stop_at_accuracy = kConvergenceThreshold;
      const auto d = train(ModelSpec::directional(desk.feature_length), ds, c).history.epoch_reaching(kConvergenceThreshold);
      const auto b = train(ModelSpec::baseline_tnet(), ds, c).history.epoch_reaching(kConvergenceThreshold);
      const int de = d.value_or(desk.epochs + 1), be = b.value_or(desk.epochs + 1);
      wins += d.has_value() && de <= be;
      detail += fmt("seed %d: dir %s vs base %s; ", s, epoch_or_never(d).c_str(), epoch_or_never(b).c_str());
      note(fmt("convergence seed %d: directional reaches 95%% at epoch %s, baseline at %s", s,
               epoch_or_never(d).c_str(), epoch_or_never(b).c_str()));
    }
    rep.line(wins >= kConvergenceWins, "3  convergence vs baseline (desk)",
             detail + fmt("directional no later in %d/%d seeds (>= %d)", wins, kConvergenceSeeds, kConvergenceWins));
  }

  // Supporting sweep check: N=512 reaches 95% no later than N=64, majority of 3 seeds.
  {
    int wins = 0;
    std::string detail;
    for (int s = 1; s <= kConvergenceSeeds; ++s) {
      TrainConfig c = profile_config(desk, static_cast<std::uint64_t>(s), threads);
      c.stop_at_accuracy = kConvergenceThreshold;
      const auto e512 = train(ModelSpec::directional(512), ds, c).history.epoch_reaching(kConvergenceThreshold);
      const auto e64 = train(ModelSpec::directional(64), ds, c).history.epoch_reaching(kConvergenceThreshold);
      wins += e512.has_value() && e512.value() <= e64.value_or(desk.epochs + 1);
      detail += fmt("seed %d: N512 %s vs N64 %s; ", s, epoch_or_never(e512).c_str(), epoch_or_never(e64).c_str());
    }
    rep.line(wins >= kConvergenceWins, "+  sweep speed N=512 vs N=64 (desk)",
             detail + fmt("%d/%d seeds", wins, kConvergenceSeeds));
  }

  std::printf("%s: %d failing line(s)\n", rep.failures == 0 ? "ALL PASS" : "FAILURES", rep.failures);
  return rep.failures == 0 ? 0 : 1;
}

int run_full(const fs::path& out, unsigned threads, int epochs) {
  Report rep;
  const Profile full = full_profile();
  const auto tg = Clock::now();
  const Dataset ds = make_dataset(full, threads);
  note(fmt("full dataset: %zu samples x %zu points built in %.1f s", ds.size(), ds.points_per_sample(), seconds_since(tg)));
  TrainConfig cfg = profile_config(full, kTrainSeed, threads);
  cfg.epochs = epochs;
  fs::create_directories(out);

  // One sweep; its N=256 member is exactly the profile run used for criterion 1.
  std::map<std::size_t, TrainHistory> hist;
  ModelWeights w256;
  for (std::size_t n : default_sweep_lengths()) {
    const auto t0 = Clock::now();
    TrainResult r = train(ModelSpec::directional(n), ds, cfg, [&](const EpochRecord& e) {
      if (e.epoch % 10 == 0) note(fmt("N=%zu epoch %d test acc %.4f", n, e.epoch, e.test_accuracy));
      return true;
    });
    write_text(out / ("full_history_N" + std::to_string(n) + ".csv"), history_csv(r.history));
    note(fmt("N=%zu: final %.4f, 95%% at epoch %s, %.0f s", n, r.history.final_accuracy(),
             epoch_or_never(r.history.epoch_reaching(kConvergenceThreshold)).c_str(), seconds_since(t0)));
    if (n == full.feature_length) w256 = r.weights;
    hist[n] = std::move(r.history);
  }

  const TrainHistory& h = hist.at(full.feature_length);
  rep.line(!h.diverged && h.final_accuracy() >= kFullAccuracy, "1  accuracy (full)",
           fmt("final test acc %.4f >= %.2f after %zu epochs (first >= 0.99 at epoch %s)", h.final_accuracy(),
               kFullAccuracy, h.epochs.size(), epoch_or_never(h.epoch_reaching(kFullAccuracy)).c_str()));
  save_checkpoint(w256, out / "full_model.tpnw");
  {
    std::size_t n = 0;
    const double frac = direction_sensitivity(w256, ds, n);
    rep.line(n > 0 && frac >= kDirectionSensitivity, "+  direction sensitivity (full)",
             fmt("%.3f of %zu correct up-stairs clouds change class after half turn", frac, n));
    const OutlineStats os = outline_coverage(w256, ds);
    rep.line(os.considered > 0 && os.spanning == os.considered, "+  critical points span treads (full)",
             fmt("%zu of %zu clean up-stairs clouds", os.spanning, os.considered));
    note(fmt("critical point on every individual tread level: %zu of %zu clouds", os.every_level, os.considered));
  }

  bool above = true;
  std::string detail;
  for (std::size_t n : default_sweep_lengths()) {
    detail += fmt("N=%zu %.4f; ", n, hist.at(n).final_accuracy());
    if (n != 32) above = above && hist.at(n).final_accuracy() > kFullAccuracy;
  }
  const double acc32 = hist.at(32).final_accuracy();
  bool strictly_worst = true, last_to_95 = true;
  const int e32 = hist.at(32).epoch_reaching(kConvergenceThreshold).value_or(epochs + 1);
  for (std::size_t n : default_sweep_lengths()) {
    if (n == 32) continue;
    strictly_worst = strictly_worst && acc32 < hist.at(n).final_accuracy();
    last_to_95 = last_to_95 && e32 >= hist.at(n).epoch_reaching(kConvergenceThreshold).value_or(epochs + 1);
  }
  rep.line(above, "4a sweep: N>=64 above 0.99", detail);
  rep.line(strictly_worst || last_to_95, "4b sweep: N=32 worst or slowest",
           fmt("N=32 strictly worst final: %s; last to reach 95%% (epoch %d): %s", strictly_worst ? "yes" : "no", e32,
               last_to_95 ? "yes" : "no"));

  std::printf("%s: %d failing line(s)\n", rep.failures == 0 ? "ALL PASS" : "FAILURES", rep.failures);
  return rep.failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"terrain_pn acceptance suite"};
  std::string suite = "core";
  std::string out = "acceptance_out";
  int full_epochs = full_profile().epochs;
  app.add_option("--suite", suite, "core or full")->check(CLI::IsMember({"core", "full"}));
  app.add_option("--out", out, "Directory for histories and checkpoints");
  app.add_option("--full-epochs", full_epochs, "Epoch budget for the full suite")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  const unsigned threads = thread_count_from_env();
  try {
    return suite == "core" ? run_core(out, threads) : run_full(out, threads, full_epochs);
  } catch (const std::exception& e) {
    std::printf("FAIL  acceptance aborted: %s\n", e.what());
    return 1;
  }
}
