// terrain_pn: generate | train | eval | sweep | analyze | export
//
// Exit codes: 0 ok, 1 internal error, 2 invalid arguments or missing inputs,
// 3 I/O failure, 4 training diverged (partial history is still written).

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "terrain_pn/terrain_pn.hpp"

namespace fs = std::filesystem;
using namespace terrain_pn;

namespace {

enum Exit : int { kOk = 0, kInternal = 1, kUsage = 2, kIo = 3, kDiverged = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string profile = "desk";
  std::string data;
  unsigned threads = 0;

  Profile prof() const { return profile_by_name(profile); }
  fs::path data_dir() const { return data.empty() ? fs::path("data") / profile : fs::path(data); }
  unsigned worker_count() const { return threads > 0 ? threads : thread_count_from_env(); }
};

struct TrainOverrides {
  std::uint64_t seed = 0;
  std::optional<int> epochs;
  std::optional<double> lr;
  std::optional<std::size_t> batch_size;
  std::optional<std::int64_t> decay_step;
  std::optional<double> decay_rate;
  std::optional<std::size_t> feature_length;
  std::optional<double> stop_at;
  std::string variant = "directional";
  bool no_feature_tnet = false;

  TrainConfig config(const Profile& p, unsigned threads) const {
    TrainConfig c = p.train_config(seed);
    if (epochs) c.epochs = *epochs;
    if (lr) c.initial_lr = *lr;
    if (batch_size) c.batch_size = *batch_size;
    if (decay_step) c.decay_step = *decay_step;
    if (decay_rate) c.decay_rate = *decay_rate;
    c.stop_at_accuracy = stop_at;
    c.threads = threads;
    c.validate();
    return c;
  }

  ModelSpec spec(const Profile& p) const {
    ModelSpec s;
    if (variant == "directional") {
      s = ModelSpec::directional(feature_length.value_or(p.feature_length));
    } else if (variant == "baseline") {
      s = ModelSpec::baseline_tnet(!no_feature_tnet);
      if (feature_length) s.per_point_widths.back() = *feature_length;
    } else {
      throw UsageError("unknown variant '" + variant + "' (expected directional or baseline)");
    }
    s.validate();
    return s;
  }
};

void add_common(CLI::App* cmd, Common& c, bool with_data = true) {
  cmd->add_option("--profile", c.profile, "Scale profile: desk or full")->check(CLI::IsMember({"desk", "full"}));
  if (with_data) cmd->add_option("--data", c.data, "Dataset directory (default data/<profile>)");
  cmd->add_option("--threads", c.threads, "Worker threads (default: TERRAIN_PN_THREADS or 1)");
}

void add_train_overrides(CLI::App* cmd, TrainOverrides& o) {
  cmd->add_option("--seed", o.seed, "Training seed");
  cmd->add_option("--epochs", o.epochs, "Override epoch count");
  cmd->add_option("--lr", o.lr, "Initial learning rate");
  cmd->add_option("--batch-size", o.batch_size, "Mini-batch size");
  cmd->add_option("--decay-step", o.decay_step, "Steps per learning-rate decay");
  cmd->add_option("--decay-rate", o.decay_rate, "Learning-rate decay factor");
  cmd->add_option("--feature-length", o.feature_length, "Global feature length N");
  cmd->add_option("--stop-at", o.stop_at, "Stop once test accuracy reaches this value");
  cmd->add_option("--variant", o.variant, "directional or baseline")->check(CLI::IsMember({"directional", "baseline"}));
  cmd->add_flag("--no-feature-tnet", o.no_feature_tnet, "Baseline without the feature transform");
}

void require_dir(const fs::path& dir, const char* what) {
  if (!fs::is_directory(dir) || !fs::exists(dir / "manifest.json"))
    throw UsageError(std::string(what) + " not found: " + dir.string());
}

void require_file(const fs::path& file, const char* what) {
  if (!fs::is_regular_file(file)) throw UsageError(std::string(what) + " not found: " + file.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

std::string format_confusion(const ConfusionMatrix& m) {
  std::ostringstream os;
  os << "confusion (rows true, cols predicted):\n";
  os << "        ";
  for (int p = 0; p < kNumClasses; ++p) os << std::string(6 - 2, ' ') << class_abbrev(static_cast<TerrainClass>(p));
  os << '\n';
  for (int t = 0; t < kNumClasses; ++t) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "  %-6s", std::string(class_abbrev(static_cast<TerrainClass>(t))).c_str());
    os << buf;
    for (int p = 0; p < kNumClasses; ++p) {
      std::snprintf(buf, sizeof(buf), "%6zu", m[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)]);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

void print_epoch(const EpochRecord& e) {
  std::printf("epoch %3d  step %6lld  lr %.3g  train_loss %.5f  test_loss %.5f  test_acc %.4f  (%.1fs)\n", e.epoch,
              static_cast<long long>(e.step), e.lr, e.train_loss, e.test_loss, e.test_accuracy, e.wall_seconds);
  std::fflush(stdout);
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  Common common;
  std::string out;
  std::optional<std::size_t> samples;
  std::optional<std::size_t> points;
  std::uint64_t seed = 0;
};

int cmd_generate(const GenerateArgs& a) {
  const Profile p = a.common.prof();
  const fs::path out = a.out.empty() ? a.common.data_dir() : fs::path(a.out);
  const std::size_t samples = a.samples.value_or(p.samples);
  const std::size_t points = a.points.value_or(p.points);
  if (samples == 0 || points == 0) throw UsageError("--samples and --points must be positive");
  ensure_dir(out);
  const DatasetManifest m = make_manifest(samples, points, a.seed);
  const Dataset ds = build_dataset(m, a.common.worker_count());
  save_dataset(ds, out);
  std::size_t per_class[kNumClasses] = {};
  std::size_t per_regime[2] = {};
  for (const auto& s : m.samples) {
    ++per_class[static_cast<int>(s.label)];
    ++per_regime[static_cast<int>(s.regime)];
  }
  std::printf("wrote %zu samples x %zu points to %s\n", samples, points, out.string().c_str());
  std::printf("  train %zu  test %zu\n", ds.indices(Split::Train).size(), ds.indices(Split::Test).size());
  for (int c = 0; c < kNumClasses; ++c)
    std::printf("  %-13s %zu\n", std::string(class_name(static_cast<TerrainClass>(c))).c_str(), per_class[c]);
  std::printf("  clean-sim %zu  noisy-sim %zu\n", per_regime[0], per_regime[1]);
  return kOk;
}

struct TrainArgs {
  Common common;
  TrainOverrides over;
  std::string out;
};

fs::path default_run_dir(const Common& c) { return fs::path("runs") / c.profile; }

int cmd_train(const TrainArgs& a) {
  const Profile p = a.common.prof();
  const fs::path data = a.common.data_dir();
  require_dir(data, "dataset");
  const TrainConfig cfg = a.over.config(p, a.common.worker_count());
  const ModelSpec spec = a.over.spec(p);
  const fs::path out = a.out.empty() ? default_run_dir(a.common) : fs::path(a.out);
  ensure_dir(out);

  const Dataset ds = load_dataset(data);
  std::printf("training %s (N=%zu, %zu params) on %s: %d epochs, seed %llu, %u thread(s)\n",
              std::string(variant_name(spec.variant)).c_str(), spec.global_feature_length(), count_params(spec),
              data.string().c_str(), cfg.epochs, static_cast<unsigned long long>(cfg.seed), cfg.threads);
  const TrainResult r = train(spec, ds, cfg, [](const EpochRecord& e) {
    print_epoch(e);
    return true;
  });
  write_text(out / "history.csv", history_csv(r.history));
  write_text(out / "steps.csv", steps_csv(r.history));
  nlohmann::json run{{"profile", p.name},
                     {"dataset", data.string()},
                     {"seed", cfg.seed},
                     {"epochs", cfg.epochs},
                     {"initial_lr", cfg.initial_lr},
                     {"batch_size", cfg.batch_size},
                     {"decay_step", cfg.decay_step},
                     {"decay_rate", cfg.decay_rate},
                     {"spec", spec_to_json(spec)},
                     {"epochs_completed", r.history.epochs.size()},
                     {"final_test_accuracy", r.history.final_accuracy()},
                     {"diverged", r.history.diverged}};
  if (r.history.diverged) run["error"] = r.history.error;
  write_json(out / "run.json", run);
  if (r.history.diverged) {
    std::fprintf(stderr, "error: training diverged: %s (partial history in %s)\n", r.history.error.c_str(),
                 out.string().c_str());
    return kDiverged;
  }
  save_checkpoint(r.weights, out / "model.tpnw");
  std::printf("final test accuracy %.4f; checkpoint %s\n", r.history.final_accuracy(),
              (out / "model.tpnw").string().c_str());
  return kOk;
}

struct EvalArgs {
  Common common;
  std::string checkpoint;
  std::string split = "test";
  std::string report;
};

fs::path checkpoint_path(const Common& c, const std::string& given) {
  return given.empty() ? default_run_dir(c) / "model.tpnw" : fs::path(given);
}

int cmd_eval(const EvalArgs& a) {
  const fs::path data = a.common.data_dir();
  const fs::path ckpt = checkpoint_path(a.common, a.checkpoint);
  require_dir(data, "dataset");
  require_file(ckpt, "checkpoint");
  const ModelWeights w = load_checkpoint(ckpt);
  const Dataset ds = load_dataset(data);
  const Split split = a.split == "train" ? Split::Train : Split::Test;
  const EvalResult r = evaluate(w, ds, split, a.common.worker_count());
  std::printf("split %s: %zu samples\n", a.split.c_str(), r.total);
  std::printf("accuracy %.4f\n", r.accuracy);
  std::printf("mean loss %.6f\n", r.mean_loss);
  std::fputs(format_confusion(r.confusion).c_str(), stdout);
  if (!a.report.empty()) {
    nlohmann::json conf = nlohmann::json::array();
    for (const auto& row : r.confusion) conf.push_back(row);
    write_json(a.report, {{"split", a.split}, {"samples", r.total}, {"accuracy", r.accuracy}, {"mean_loss", r.mean_loss},
                          {"confusion", conf}});
  }
  return kOk;
}

struct SweepArgs {
  Common common;
  TrainOverrides over;
  std::vector<std::size_t> lengths;
  std::string out;
};

int cmd_sweep(const SweepArgs& a) {
  const Profile p = a.common.prof();
  const fs::path data = a.common.data_dir();
  require_dir(data, "dataset");
  if (a.over.variant != "directional") throw UsageError("sweep trains the directional variant only");
  const std::vector<std::size_t> lengths = a.lengths.empty() ? default_sweep_lengths() : a.lengths;
  for (std::size_t n : lengths)
    if (n == 0) throw UsageError("--lengths entries must be positive");
  const TrainConfig cfg = a.over.config(p, a.common.worker_count());
  const fs::path out = a.out.empty() ? default_run_dir(a.common) / "sweep" : fs::path(a.out);
  ensure_dir(out);
  const Dataset ds = load_dataset(data);

  std::string summary = "feature_length,final_test_acc,epoch_reaching_95,epochs_completed,diverged\n";
  bool diverged = false;
  for (std::size_t n : lengths) {
    std::printf("-- N=%zu\n", n);
    const TrainResult r = train(ModelSpec::directional(n), ds, cfg, [](const EpochRecord& e) {
      print_epoch(e);
      return true;
    });
    const std::string stem = "history_N" + std::to_string(n);
    write_text(out / (stem + ".csv"), history_csv(r.history));
    const auto e95 = r.history.epoch_reaching(0.95);
    summary += std::to_string(n) + "," + detail::format_double(r.history.final_accuracy()) + "," +
               (e95 ? std::to_string(*e95) : std::string()) + "," + std::to_string(r.history.epochs.size()) + "," +
               (r.history.diverged ? "1" : "0") + "\n";
    if (r.history.diverged) {
      std::fprintf(stderr, "error: N=%zu diverged: %s\n", n, r.history.error.c_str());
      diverged = true;
      break;
    }
  }
  write_text(out / "sweep.csv", summary);
  std::printf("wrote %s\n", (out / "sweep.csv").string().c_str());
  return diverged ? kDiverged : kOk;
}

struct AnalyzeArgs {
  Common common;
  std::string checkpoint;
  std::optional<std::size_t> sample;
  std::string out;
  double edge = 1.0;
  std::size_t resolution = 40;
};

int cmd_analyze(const AnalyzeArgs& a) {
  const fs::path data = a.common.data_dir();
  const fs::path ckpt = checkpoint_path(a.common, a.checkpoint);
  require_dir(data, "dataset");
  require_file(ckpt, "checkpoint");
  CubeSpec cube;
  cube.edge = a.edge;
  cube.resolution = a.resolution;
  cube.validate();
  const fs::path out = a.out.empty() ? default_run_dir(a.common) / "analysis" : fs::path(a.out);
  ensure_dir(out);

  const ModelWeights w = load_checkpoint(ckpt);
  const Dataset ds = load_dataset(data);
  std::size_t index = 0;
  if (a.sample) {
    index = *a.sample;
  } else {
    const auto test = ds.indices(Split::Test);
    if (!test.empty()) index = test.front();
  }
  if (index >= ds.size()) throw UsageError("--sample out of range (dataset has " + std::to_string(ds.size()) + ")");
  const PointCloud cloud = ds.cloud(index);

  const CriticalSet cs = critical_points(w, cloud);
  const UpperBoundResult ub = upper_bound_points(w, cloud, cube);
  const bool feature_identity = critical_subset_identity(w, cloud);
  const bool upper_bound_identity = addition_identity(w, cloud, ub.points);
  const int predicted = predict(w, cloud);

  std::vector<Color> crit_colors(cloud.size(), colors::kBase);
  for (std::size_t i : cs.indices) crit_colors[i] = colors::kCritical;
  export_ply(cloud, out / "critical.ply", crit_colors);

  PointCloud ub_view = cloud;
  std::vector<Color> ub_colors = crit_colors;
  ub_view.points.insert(ub_view.points.end(), ub.points.points.begin(), ub.points.points.end());
  ub_colors.insert(ub_colors.end(), ub.points.size(), colors::kUpperBound);
  export_ply(ub_view, out / "upper_bound.ply", ub_colors);

  nlohmann::json report{{"sample", index},
                        {"label", std::string(class_name(*cloud.label))},
                        {"predicted", std::string(class_name(static_cast<TerrainClass>(predicted)))},
                        {"num_points", cloud.size()},
                        {"global_feature_length", w.spec.global_feature_length()},
                        {"critical_count", cs.indices.size()},
                        {"feature_identity", feature_identity},
                        {"upper_bound_count", ub.points.size()},
                        {"upper_bound_candidates", ub.candidates_evaluated},
                        {"upper_bound_identity", upper_bound_identity},
                        {"cube_center", ub.center},
                        {"cube_edge", cube.edge},
                        {"cube_resolution", cube.resolution}};
  write_json(out / "report.json", report);
  std::printf("sample %zu (%s, predicted %s): %zu critical of %zu points, %zu upper-bound of %zu candidates\n", index,
              std::string(class_name(*cloud.label)).c_str(),
              std::string(class_name(static_cast<TerrainClass>(predicted))).c_str(), cs.indices.size(), cloud.size(),
              ub.points.size(), ub.candidates_evaluated);
  std::printf("feature_identity %s, upper_bound_identity %s\n", feature_identity ? "true" : "false",
              upper_bound_identity ? "true" : "false");
  std::printf("wrote %s\n", out.string().c_str());
  return feature_identity && upper_bound_identity ? kOk : kInternal;
}

struct ExportArgs {
  Common common;
  std::size_t sample = 0;
  std::string out;
};

int cmd_export(const ExportArgs& a) {
  const fs::path data = a.common.data_dir();
  require_dir(data, "dataset");
  const Dataset ds = load_dataset(data);
  if (a.sample >= ds.size()) throw UsageError("--sample out of range (dataset has " + std::to_string(ds.size()) + ")");
  const fs::path out = a.out.empty() ? fs::path("sample_" + std::to_string(a.sample) + ".ply") : fs::path(a.out);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  const PointCloud cloud = ds.cloud(a.sample);
  export_ply(cloud, out);
  std::printf("wrote %zu points (%s) to %s\n", cloud.size(), std::string(class_name(*cloud.label)).c_str(),
              out.string().c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Directional PointNet terrain classifier"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Build a synthetic dataset");
  add_common(g, gen.common, false);
  g->add_option("--out", gen.out, "Output directory (default data/<profile>)");
  g->add_option("--samples", gen.samples, "Number of samples (default from profile)");
  g->add_option("--points", gen.points, "Points per sample (default from profile)");
  g->add_option("--seed", gen.seed, "Dataset seed");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a classifier");
  add_common(t, tr.common);
  add_train_overrides(t, tr.over);
  t->add_option("--out", tr.out, "Run directory (default runs/<profile>)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(e, ev.common);
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint (default runs/<profile>/model.tpnw)");
  e->add_option("--split", ev.split, "train or test")->check(CLI::IsMember({"train", "test"}));
  e->add_option("--report", ev.report, "Also write a JSON report here");

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "Train one model per global feature length");
  add_common(s, sw.common);
  add_train_overrides(s, sw.over);
  s->add_option("--lengths", sw.lengths, "Comma-separated feature lengths")->delimiter(',');
  s->add_option("--out", sw.out, "Output directory (default runs/<profile>/sweep)");

  AnalyzeArgs an;
  auto* a = app.add_subcommand("analyze", "Critical and upper-bound points for one sample");
  add_common(a, an.common);
  a->add_option("--checkpoint", an.checkpoint, "Checkpoint (default runs/<profile>/model.tpnw)");
  a->add_option("--sample", an.sample, "Sample index (default: first test sample)");
  a->add_option("--out", an.out, "Output directory (default runs/<profile>/analysis)");
  a->add_option("--edge", an.edge, "Cube edge length in metres");
  a->add_option("--resolution", an.resolution, "Grid vertices per cube edge");

  ExportArgs ex;
  auto* x = app.add_subcommand("export", "Write one dataset sample as PLY");
  add_common(x, ex.common);
  x->add_option("--sample", ex.sample, "Sample index");
  x->add_option("--out", ex.out, "Output PLY path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsage;
  }

  try {
    if (*g) return cmd_generate(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*s) return cmd_sweep(sw);
    if (*a) return cmd_analyze(an);
    if (*x) return cmd_export(ex);
  } catch (const UsageError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kUsage;
  } catch (const IoError& err) {
    std::fprintf(stderr, "I/O error: %s\n", err.what());
    return kIo;
  } catch (const CheckpointError& err) {
    std::fprintf(stderr, "I/O error: %s\n", err.what());
    return kIo;
  } catch (const std::invalid_argument& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kUsage;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "internal error: %s\n", err.what());
    return kInternal;
  }
  return kUsage;
}
