// SPDX-License-Identifier: Apache-2.0
//
// sfmc: dataset generation, training, inference and evaluation.
//
//   sfmc synth --config scene.json --out data/basic
//   sfmc train --config desk.json --dataset data/basic --out runs/desk
//   sfmc infer --checkpoint runs/desk/latest.ckpt --dataset data/basic --out runs/desk/pred
//   sfmc eval  --predictions runs/desk/pred --dataset data/basic --out runs/desk/eval --keep 0.8 --split-dynamic
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfmc/error.hpp"
#include "sfmc/eval.hpp"
#include "sfmc/grad/ops.hpp"
#include "sfmc/image.hpp"
#include "sfmc/synthdata.hpp"
#include "sfmc/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sfmc;

namespace {

constexpr int kRuntimeFailure = 1;
constexpr int kUsageError = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json load_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot read config file " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

// A config file is either the bare section or a config_resolved.json that holds it.
json section(const json& j, const char* name) {
  if (j.is_object() && j.contains("command") && j.contains(name)) return j.at(name);
  return j;
}

void require_dir(const fs::path& p, const char* what) {
  if (!fs::is_directory(p)) throw UsageError(std::string(what) + " " + p.string() + " is not a directory");
}

// The output directory must be new or empty unless `allow` (force / resume).
void claim_out(const fs::path& out, bool allow) {
  if (fs::exists(out) && !fs::is_directory(out)) throw UsageError(out.string() + " exists and is not a directory");
  if (!allow && fs::exists(out) && !fs::is_empty(out))
    throw Error(ErrorCode::kRefusingOverwrite, out.string() + " is not empty; pass --force to overwrite");
  fs::create_directories(out);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  f << j.dump(2) << '\n';
  if (!f) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
}

Image to_image(const grad::Tensor& t) {
  Image im(1, t.dim(0), t.dim(1));
  const auto v = t.values();
  im.data.assign(v.begin(), v.end());
  return im;
}

// --- synth ------------------------------------------------------------------

struct SynthArgs {
  fs::path config, out;
  std::size_t n_train = 64, n_test = 16;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

void cmd_synth(const SynthArgs& a) {
  synth::SceneConfig scene = synth::parse_scene_config(section(load_json(a.config), "scene"));
  if (a.seed) scene.seed = *a.seed;
  const json resolved = {{"command", "synth"},
                         {"scene", synth::to_json(scene)},
                         {"n_train", a.n_train},
                         {"n_test", a.n_test}};
  const fs::path manifest = synth::generate_split(scene, a.n_train, a.n_test, a.out, a.force);
  write_json(a.out / "config_resolved.json", resolved);
  std::cout << manifest.string() << '\n';
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  fs::path config, dataset, out, resume;
  std::string stage = "all";
  std::optional<std::uint64_t> seed;
  bool force = false;
};

// Keeps the rows a resumed run has already accounted for.
void rewrite_log(const fs::path& log, std::size_t next_step) {
  std::vector<std::string> keep;
  if (std::ifstream f(log); f) {
    std::string line;
    std::getline(f, line);
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      if (std::stoull(line.substr(0, line.find(','))) < next_step) keep.push_back(line);
    }
  }
  std::ofstream f(log, std::ios::trunc);
  f << trainer::kLogHeader << '\n';
  for (const auto& l : keep) f << l << '\n';
}

void cmd_train(const TrainArgs& a) {
  trainer::TrainConfig config = trainer::parse_train_config(section(load_json(a.config), "train"));
  if (a.seed) config.seed = *a.seed;
  require_dir(a.dataset, "dataset");
  if (!a.resume.empty() && !fs::is_regular_file(a.resume))
    throw UsageError("checkpoint " + a.resume.string() + " does not exist");
  const synth::Manifest manifest = synth::read_manifest(a.dataset);
  const auto windows = synth::load_split(a.dataset, "train");

  std::optional<trainer::TrainState> state;
  if (!a.resume.empty()) {
    state.emplace(trainer::load_checkpoint(a.resume, config));
  } else {
    state.emplace(config);
  }
  if (a.stage == "2" && state->stage == 1)
    throw UsageError("--stage 2 needs --resume with a checkpoint that finished stage 1");
  claim_out(a.out, a.force || !a.resume.empty());

  write_json(a.out / "config_resolved.json", {{"command", "train"},
                                              {"train", trainer::to_json(config)},
                                              {"dataset_config_hash", manifest.config_hash},
                                              {"stage", a.stage}});
  const fs::path log = a.out / "training_log.csv";
  rewrite_log(log, a.resume.empty() ? 0 : state->step);
  std::ofstream log_file(log, std::ios::app);
  std::size_t last_epoch = static_cast<std::size_t>(-1), last_stage = 0;
  trainer::TrainOptions options{a.out, [&](const trainer::LogRow& r) {
                                  log_file << trainer::log_line(r) << '\n';
                                  log_file.flush();
                                  if (r.stage != last_stage || r.epoch != last_epoch) {
                                    std::cerr << "stage " << r.stage << " epoch " << r.epoch << " step " << r.step
                                              << " loss " << r.total << '\n';
                                    last_stage = r.stage;
                                    last_epoch = r.epoch;
                                  }
                                }};
  if (a.stage == "1" || a.stage == "all") trainer::train_stage1(windows, manifest.intrinsics, config, *state, options);
  if (a.stage == "2" || a.stage == "all") trainer::train_stage2(windows, manifest.intrinsics, config, *state, options);
  std::cout << (a.out / "latest.ckpt").string() << '\n';
}

// --- infer ------------------------------------------------------------------

struct InferArgs {
  fs::path checkpoint, dataset, out, config;
  std::string split = "test";
  std::optional<std::size_t> iterations;
  bool force = false;
};

void cmd_infer(const InferArgs& a) {
  const fs::path config_path = a.config.empty() ? a.checkpoint.parent_path() / "config_resolved.json" : a.config;
  const trainer::TrainConfig config = trainer::parse_train_config(section(load_json(config_path), "train"));
  if (!fs::is_regular_file(a.checkpoint)) throw UsageError("checkpoint " + a.checkpoint.string() + " does not exist");
  require_dir(a.dataset, "dataset");
  const std::size_t iterations = a.iterations.value_or(config.iterations);
  if (iterations == 0) throw UsageError("--iterations must be at least 1");
  const synth::Manifest manifest = synth::read_manifest(a.dataset);
  const trainer::TrainState state = trainer::load_checkpoint(a.checkpoint, config);
  std::vector<synth::WindowRecord> records;
  for (const auto& w : manifest.windows)
    if (w.split == a.split) records.push_back(w);
  if (records.empty()) throw Error(ErrorCode::kEmptyDataset, "no " + a.split + " windows in " + a.dataset.string());
  claim_out(a.out, a.force);

  write_json(a.out / "config_resolved.json", {{"command", "infer"},
                                              {"train", trainer::to_json(config)},
                                              {"iterations", iterations},
                                              {"split", a.split},
                                              {"dataset_config_hash", manifest.config_hash}});
  for (const auto& rec : records) {
    const synth::Window w = synth::load_window(a.dataset, rec);
    const trainer::InferenceResult r = trainer::infer(state.model, w.images, manifest.intrinsics, config, iterations);
    const fs::path dir = a.out / w.name;
    fs::create_directories(dir);
    write_pfm(dir / "depth.pfm", to_image(r.depth));
    write_pfm(dir / "uncertainty.pfm", to_image(r.sigma));
    write_pfm(dir / "uncertainty_rank.pfm", to_image(r.uncertainty));
    write_pfm(dir / "entropy.pfm", to_image(r.entropy));
    motion::write_trajectory(dir / "poses.csv", r.poses.poses);
    std::cerr << w.name << (r.degenerate ? " (degenerate GN step skipped)" : "") << '\n';
  }
  std::cout << records.size() << " windows -> " << a.out.string() << '\n';
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  fs::path predictions, dataset, out;
  std::string split = "test";
  std::vector<double> keep;
  bool split_dynamic = false;
  std::optional<std::uint64_t> seed;
  double cap = eval::kDefaultDepthCap;
  bool force = false;
};

std::vector<double> read_map(const fs::path& p) { return read_pfm(p).data; }

void cmd_eval(const EvalArgs& a) {
  require_dir(a.predictions, "predictions");
  require_dir(a.dataset, "dataset");
  for (const double k : a.keep)
    if (!(k > 0.0 && k <= 1.0)) throw UsageError("--keep values must lie in (0,1]");
  std::uint64_t seed = 0;
  if (a.seed) {
    seed = *a.seed;
  } else if (fs::exists(a.predictions / "config_resolved.json")) {
    const json j = load_json(a.predictions / "config_resolved.json");
    if (j.contains("train") && j.at("train").contains("seed")) seed = j.at("train").at("seed").get<std::uint64_t>();
  }
  const synth::Manifest manifest = synth::read_manifest(a.dataset);
  std::vector<synth::WindowRecord> records;
  for (const auto& w : manifest.windows)
    if (w.split == a.split) records.push_back(w);
  if (records.empty()) throw Error(ErrorCode::kEmptyDataset, "no " + a.split + " windows in " + a.dataset.string());
  for (const auto& w : records)
    if (!fs::exists(a.predictions / w.frames[w.key] / "depth.pfm"))
      throw Error(ErrorCode::kIoError, "no prediction for window " + w.frames[w.key]);
  claim_out(a.out, a.force);

  write_json(a.out / "config_resolved.json", {{"command", "eval"},
                                              {"split", a.split},
                                              {"keep", a.keep},
                                              {"split_dynamic", a.split_dynamic},
                                              {"seed", seed},
                                              {"cap", a.cap},
                                              {"dataset_config_hash", manifest.config_hash}});
  std::vector<eval::MetricsRow> rows;
  std::vector<eval::SparsificationCurve> curves;
  std::vector<eval::DepthMetrics> all, stat, dyn;
  std::vector<std::vector<eval::DepthMetrics>> filtered(a.keep.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const synth::Window w = synth::load_window(a.dataset, records[i]);
    const fs::path dir = a.predictions / w.name;
    const auto depth = read_map(dir / "depth.pfm");
    const auto rank = read_map(dir / "uncertainty_rank.pfm");
    const auto entropy = read_map(dir / "entropy.pfm");
    const auto truth = w.depth.values();
    if (depth.size() != truth.size()) throw Error(ErrorCode::kShapeMismatch, "prediction size differs for " + w.name);
    const std::vector<double> valid(truth.size(), 1.0);
    const std::vector<double> no_dynamic;
    const eval::WindowInputs in{depth,
                                truth,
                                valid,
                                a.split_dynamic ? w.dynamic_mask.values() : std::span<const double>(no_dynamic),
                                rank,
                                entropy};
    const eval::WindowReport r = eval::evaluate_window(in, a.keep, seed * 0x9E3779B97F4A7C15ULL + i, a.cap);
    rows.push_back({w.name, "all", *r.metrics.all});
    all.push_back(*r.metrics.all);
    if (a.split_dynamic) {
      if (r.metrics.static_) {
        rows.push_back({w.name, "static", *r.metrics.static_});
        stat.push_back(*r.metrics.static_);
      }
      if (r.metrics.dynamic) {
        rows.push_back({w.name, "dynamic", *r.metrics.dynamic});
        dyn.push_back(*r.metrics.dynamic);
      }
    }
    for (std::size_t k = 0; k < r.filtered.size(); ++k) {
      char name[32];
      std::snprintf(name, sizeof(name), "filtered@%g", r.filtered[k].first);
      rows.push_back({w.name, name, r.filtered[k].second});
      filtered[k].push_back(r.filtered[k].second);
    }
    curves.push_back(r.curve);
  }
  auto summary = [&](const char* split, const std::vector<eval::DepthMetrics>& m) {
    if (m.empty()) return;
    rows.push_back({"mean", split, eval::mean_metrics(m)});
    std::printf("%-12s abs_rel %.4f  sq_rel %.4f  rmse %.4f  delta1 %.4f\n", split, rows.back().metrics.abs_rel,
                rows.back().metrics.sq_rel, rows.back().metrics.rmse, rows.back().metrics.delta1);
  };
  summary("all", all);
  summary("static", stat);
  summary("dynamic", dyn);
  for (std::size_t k = 0; k < a.keep.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof(name), "filtered@%g", a.keep[k]);
    summary(name, filtered[k]);
  }
  eval::write_metrics_csv(a.out / "metrics.csv", rows);
  const eval::SparsificationCurve mean_curve = eval::average(curves);
  eval::write_sparsification_csv(a.out / "sparsification.csv", mean_curve);
  std::printf("sparsification AUC learned %.4f entropy %.4f random %.4f oracle %.4f\n",
              eval::area_under(mean_curve.fractions, mean_curve.learned),
              eval::area_under(mean_curve.fractions, mean_curve.entropy),
              eval::area_under(mean_curve.fractions, mean_curve.random),
              eval::area_under(mean_curve.fractions, mean_curve.oracle));
}

int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::kConfigError:
    case ErrorCode::kInvalidConfig:
    case ErrorCode::kRefusingOverwrite:
      return kUsageError;
    default:
      return kRuntimeFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structure-from-motion depth and uncertainty, desk scale"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--config", synth_args.config, "Scene config (JSON)")->required();
  synth->add_option("--out", synth_args.out, "Dataset directory")->required();
  synth->add_option("--train", synth_args.n_train, "Training frames")->capture_default_str();
  synth->add_option("--test", synth_args.n_test, "Test frames")->capture_default_str();
  synth->add_option("--seed", synth_args.seed, "Override the scene seed");
  synth->add_flag("--force", synth_args.force, "Replace an existing dataset");

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train the motion and depth networks");
  train->add_option("--config", train_args.config, "Train config (JSON)")->required();
  train->add_option("--dataset", train_args.dataset, "Dataset directory")->required();
  train->add_option("--out", train_args.out, "Run directory")->required();
  train->add_option("--stage", train_args.stage, "1, 2 or all")
      ->check(CLI::IsMember({"1", "2", "all"}))
      ->capture_default_str();
  train->add_option("--resume", train_args.resume, "Checkpoint to continue from");
  train->add_option("--seed", train_args.seed, "Override the training seed");
  train->add_flag("--force", train_args.force, "Write into a non-empty run directory");

  InferArgs infer_args;
  auto* infer = app.add_subcommand("infer", "Alternate depth and motion updates on a split");
  infer->add_option("--checkpoint", infer_args.checkpoint, "Trained checkpoint")->required();
  infer->add_option("--dataset", infer_args.dataset, "Dataset directory")->required();
  infer->add_option("--out", infer_args.out, "Prediction directory")->required();
  infer->add_option("--config", infer_args.config, "Train config (default: config_resolved.json beside the checkpoint)");
  infer->add_option("--split", infer_args.split, "Dataset split")->capture_default_str();
  infer->add_option("--iterations", infer_args.iterations, "Depth/motion alternations (default from config: 5)");
  infer->add_flag("--force", infer_args.force, "Write into a non-empty directory");

  EvalArgs eval_args;
  auto* ev = app.add_subcommand("eval", "Metrics and sparsification curves");
  ev->add_option("--predictions", eval_args.predictions, "Output of `sfmc infer`")->required();
  ev->add_option("--dataset", eval_args.dataset, "Dataset directory")->required();
  ev->add_option("--out", eval_args.out, "Report directory")->required();
  ev->add_option("--split", eval_args.split, "Dataset split")->capture_default_str();
  ev->add_option("--keep", eval_args.keep, "Kept fraction for filtered metrics (repeatable)");
  ev->add_flag("--split-dynamic", eval_args.split_dynamic, "Add static and dynamic rows");
  ev->add_option("--seed", eval_args.seed, "Random-baseline seed (default: training seed)");
  ev->add_option("--cap", eval_args.cap, "Depth cap in metres")->capture_default_str();
  ev->add_flag("--force", eval_args.force, "Write into a non-empty directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kUsageError;
  }

  try {
    if (*synth) cmd_synth(synth_args);
    if (*train) cmd_train(train_args);
    if (*infer) cmd_infer(infer_args);
    if (*ev) cmd_eval(eval_args);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsageError;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return 0;
}
