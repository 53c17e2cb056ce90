// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion. Exit status is 0 only
// when every selected criterion passes.
//
//   sfmc_acceptance [--only name,name] [--work dir]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "eval_oracle.hpp"
#include "loss_cases.hpp"
#include "op_cases.hpp"
#include "planar_scene.hpp"
#include "rigid_scene.hpp"
#include "sfmc/depthnet.hpp"
#include "sfmc/eval.hpp"
#include "sfmc/geometry.hpp"
#include "sfmc/motion.hpp"
#include "sfmc/synthdata.hpp"
#include "sfmc/trainer.hpp"

namespace fs = std::filesystem;
namespace g = sfmc::geometry;
using sfmc::grad::Tensor;
using namespace sfmc;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

// ---------------------------------------------------------------------------

Outcome geometry_suite() {
  const auto t0 = Clock::now();
  const g::CameraIntrinsics k{80.0, 80.0, 47.5, 31.5, 96, 64};
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> z(0.5, 80.0), xy(-20.0, 20.0), px(0.0, 96.0);
  double round_trip = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const g::Vector4 X{xy(rng), xy(rng), z(rng), 1.0};
    round_trip = std::max(round_trip, (X - g::backproject(g::project(X, k), X.z(), k)).cwiseAbs().maxCoeff());
    const g::Vector2 x{px(rng), px(rng)};
    round_trip = std::max(round_trip, (g::project(g::backproject(x, z(rng), k), k) - x).cwiseAbs().maxCoeff());
  }

  std::uniform_real_distribution<double> ang(0.0, std::numbers::pi - 1e-3);
  std::normal_distribution<double> n(0.0, 1.0);
  double exp_log = 0.0;
  for (int i = 0; i < 1000; ++i) {
    g::Vector3 axis{n(rng), n(rng), n(rng)};
    axis.normalize();
    g::Vector6 xi;
    xi.head<3>() = g::Vector3{n(rng), n(rng), n(rng)} * 3.0;
    xi.tail<3>() = axis * (i < 10 ? 1e-9 * i : ang(rng));
    const auto pose = g::se3_exp(xi);
    exp_log = std::max(exp_log, (g::se3_exp(g::se3_log(pose)).matrix() - pose.matrix()).cwiseAbs().maxCoeff());
  }

  // Chained reprojection i -> j -> k against the direct one and a world-point oracle.
  std::uniform_real_distribution<double> u(0.0, 96.0), v(0.0, 64.0), zz(2.0, 40.0);
  double composition = 0.0;
  std::size_t checked = 0;
  for (int scene = 0; scene < 100; ++scene) {
    const auto gi = g::se3_exp(testkit::random_twist(rng, 0.3));
    const auto gj = g::se3_exp(testkit::random_twist(rng, 0.3));
    const auto gk = g::se3_exp(testkit::random_twist(rng, 0.3));
    const auto gij = gj * gi.inverse(), gjk = gk * gj.inverse(), gik = gk * gi.inverse();
    for (int p = 0; p < 20; ++p) {
      const g::Vector2 x{u(rng), v(rng)};
      const double Z = zz(rng);
      const auto a = g::reproject(gij, x, Z, k);
      const auto c = g::reproject(gik, x, Z, k);
      if (a.depth <= 0.1 || c.depth <= 0.1) continue;
      const auto b = g::reproject(gjk, a.pixel, a.depth, k);
      const g::Vector4 Xi = g::backproject(x, Z, k);
      const g::Vector3 Xk = gk * (gi.inverse() * g::Vector3(Xi.head<3>()));
      const g::Vector2 oracle{k.fx * Xk.x() / Xk.z() + k.cx, k.fy * Xk.y() / Xk.z() + k.cy};
      composition = std::max({composition, (b.pixel - c.pixel).norm(), (c.pixel - oracle).norm()});
      ++checked;
    }
  }
  const double t = seconds_since(t0);
  return {round_trip < 1e-9 && exp_log < 1e-7 && composition < 1e-6 && checked > 1000 && t < 5.0,
          "round-trip " + fmt(round_trip) + ", exp/log " + fmt(exp_log) + ", composition " + fmt(composition) +
              " px over " + std::to_string(checked) + " points, " + fmt(t) + " s"};
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name = "-";
  std::size_t runs = 0;
  const auto run = [&](const std::vector<std::pair<std::string, testkit::CaseFactory>>& table, std::uint64_t base) {
    for (std::size_t i = 0; i < table.size(); ++i)
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(base + seed * 7919 + i);
        testkit::Case c = table[i].second(rng);
        const auto r = testkit::fd_check(c.build, c.leaves, 1e-6);
        if (r.checked == 0) worst = INFINITY;
        if (r.max_rel_error > worst || r.checked == 0) {
          worst = r.checked == 0 ? INFINITY : r.max_rel_error;
          worst_name = table[i].first + " seed " + std::to_string(seed);
        }
        ++runs;
      }
  };
  run(testkit::op_cases(), 1000);
  run(testkit::loss_cases(), 5000);
  const double t = seconds_since(t0);
  return {worst < 1e-5 && t < 120.0,
          std::to_string(runs) + " checks (" + std::to_string(testkit::op_cases().size()) + " ops, " +
              std::to_string(testkit::loss_cases().size()) + " losses, 10 seeds), max rel error " + fmt(worst) +
              " at " + worst_name + ", " + fmt(t) + " s"};
}

Outcome cost_volume() {
  const auto t0 = Clock::now();
  const g::CameraIntrinsics kq{20, 20, 11.875, 7.875, 24, 16};
  const depthnet::DepthHypothesis hyp(1, 80, 32);
  double worst = 1.0;
  std::size_t worst_bin = 0, bins = 0;
  // Every bin whose plane keeps enough of the key view visible in all frames.
  // Baselines grow with z^2 so neighbouring bins stay the same fraction of a
  // pixel apart; a fixed rig cannot separate far bins at all.
  for (std::size_t d = 0; d < hyp.size(); ++d) {
    const double b = std::pow(hyp[d] / hyp[4], 2.0);
    const auto scene = testkit::make_planar_scene(kq, hyp[d], {0.0, 0.5 * b, b}, 0, 4);
    const Tensor s = depthnet::matching_score(depthnet::build_cost_volume(scene.features, scene.poses, kq, hyp, 0));
    std::size_t inview = 0, hits = 0;
    for (std::size_t y = 0; y < kq.height; ++y)
      for (std::size_t x = 0; x < kq.width; ++x) {
        bool ok = true;
        for (const auto& p : scene.poses) ok &= g::reproject(p, {double(x), double(y)}, hyp[d], kq).valid;
        if (!ok) continue;
        ++inview;
        std::size_t best = 0;
        for (std::size_t b = 1; b < hyp.size(); ++b)
          if (s.at({b, y, x}) > s.at({best, y, x})) best = b;
        hits += best == d;
      }
    if (inview < 100) continue;
    ++bins;
    const double rate = static_cast<double>(hits) / static_cast<double>(inview);
    if (rate < worst) worst = rate, worst_bin = d;
  }
  const double t = seconds_since(t0);
  return {bins > 0 && worst >= 0.99 && t < 30.0,
          std::to_string(bins) + " bins, worst hit rate " + fmt(worst) + " at bin " + std::to_string(worst_bin) +
              ", " + fmt(t) + " s"};
}

Outcome gauss_newton() {
  const auto t0 = Clock::now();
  double worst_r = 0.0, worst_t = 0.0;
  std::size_t max_iters = 0, failures = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto scene = testkit::make_rigid_scene(100 + seed);
    std::mt19937_64 rng(seed + 1100);
    motion::PoseGraph current = testkit::perturb(scene.truth, 0.05, rng);
    const std::size_t P = current.others().size();
    const Tensor ones = Tensor::full({P, 1, scene.k.height, scene.k.width}, 1.0);
    testkit::PoseError e = testkit::relative_pose_error(current, scene.truth);
    std::size_t it = 0;
    while (it < 5 && !(e.rotation < 1e-6 && e.translation < 1e-6)) {
      const Tensor r = motion::induced_residual_flow(current, scene.truth, scene.depth, scene.k);
      current = motion::gauss_newton_update(current, scene.depth, r, ones, scene.k).graph;
      e = testkit::relative_pose_error(current, scene.truth);
      ++it;
    }
    worst_r = std::max(worst_r, e.rotation);
    worst_t = std::max(worst_t, e.translation);
    max_iters = std::max(max_iters, it);
    failures += !(e.rotation < 1e-6 && e.translation < 1e-6);
  }
  const double t = seconds_since(t0);
  return {failures == 0 && t < 30.0,
          "50 seeds, |xi| = 0.05, worst rotation " + fmt(worst_r) + " rad, translation " + fmt(worst_t) +
              " m, at most " + std::to_string(max_iters) + " iterations, " + fmt(t) + " s"};
}

Outcome unit_examples() {
  const depthnet::DepthHypothesis hyp(1, 80, 32);
  bool soft = true;
  for (std::size_t d = 0; d < 32; ++d) {
    std::vector<double> p(32, 0.0);
    p[d] = 1.0;
    soft &= depthnet::soft_argmax(Tensor::from({32, 1, 1}, p), hyp).item() == hyp[d];
  }
  const double h_uniform = depthnet::shannon_entropy(Tensor::full({32, 1, 1}, 1.0 / 32)).item();
  std::vector<double> onehot(32, 0.0);
  onehot[5] = 1.0;
  const double h_onehot = depthnet::shannon_entropy(Tensor::from({32, 1, 1}, onehot)).item();
  const Tensor sigma = depthnet::sigma_from_confidence(Tensor::from({2}, {1.0, 0.0}), 2.0, 0.25);
  const bool entropy = std::fabs(h_uniform - std::log(32.0)) < 1e-12 && h_onehot == 0.0;
  const bool mapping = sigma.values()[0] == 0.25 && sigma.values()[1] == 2.25;
  return {soft && entropy && mapping, std::string("one-hot soft-argmax ") + (soft ? "exact" : "wrong") +
                                          ", H(uniform 32) = " + fmt(h_uniform) + ", sigma(f=1) = " +
                                          fmt(sigma.values()[0]) + ", sigma(f=0) = " + fmt(sigma.values()[1])};
}

Outcome eval_oracle() {
  std::mt19937_64 rng(11);
  std::bernoulli_distribution b(0.7);
  std::size_t mismatches = 0;
  const auto same = [](const eval::DepthMetrics& a, const eval::DepthMetrics& c) {
    return a.abs_rel == c.abs_rel && a.sq_rel == c.sq_rel && a.rmse == c.rmse && a.rmse_log == c.rmse_log &&
           a.delta1 == c.delta1 && a.delta2 == c.delta2 && a.delta3 == c.delta3 && a.count == c.count;
  };
  for (int trial = 0; trial < 100; ++trial) {
    const auto z = testkit::uniform(64, rng, 0.0, 100);
    const auto t = testkit::uniform(64, rng, 0.5, 100);
    std::vector<double> m(64);
    for (auto& v : m) v = b(rng);
    m[static_cast<std::size_t>(trial) % 64] = 1;
    mismatches += !same(eval::depth_metrics(z, t, m), testkit::brute_metrics(z, t, m, eval::kDefaultDepthCap));
    const auto e = testkit::uniform(64, rng, 0, 1);
    auto u = testkit::uniform(64, rng, 0, 1);
    for (std::size_t i = 0; i < 64; i += 5) u[i] = 0.5;
    mismatches += eval::sparsification_curve(e, u) != testkit::brute_curve(e, u, eval::kDefaultStep);
  }
  std::size_t violations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 10 + static_cast<std::size_t>(trial) * 3;
    const auto e = testkit::uniform(n, rng, 0, 1);
    const auto u = testkit::uniform(n, rng, 0, 1);
    const auto c = eval::sparsification(e, u, std::nullopt, static_cast<std::uint64_t>(trial));
    for (std::size_t i = 0; i < c.fractions.size(); ++i)
      violations += c.oracle[i] > c.learned[i] + 1e-12 || c.oracle[i] > c.random[i] + 1e-12;
  }
  return {mismatches == 0 && violations == 0, std::to_string(mismatches) + " mismatches in 200 8x8 comparisons, " +
                                                  std::to_string(violations) + " dominance violations on 100 pairs"};
}

// ---------------------------------------------------------------------------
// End to end

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return nlohmann::json::parse(in);
}

const fs::path kConfigs = SFMC_CONFIG_DIR;
constexpr std::size_t kTrainFrames = 64, kTestFrames = 16;

struct SeedResult {
  double static_abs_rel = 0, dynamic_abs_rel = 0, keep_full = 0, keep_08 = 0;
  eval::SparsificationCurve curve;
  std::size_t windows = 0;
  double train_seconds = 0;
};

SeedResult run_seed(std::uint64_t seed, const fs::path& work) {
  synth::SceneConfig scene = synth::parse_scene_config(read_json(kConfigs / "scenes" / "desk.json"));
  scene.seed = seed;
  nlohmann::json tj = read_json(kConfigs / "train" / "desk.json");
  tj["seed"] = seed;
  const trainer::TrainConfig config = trainer::parse_train_config(tj);
  const fs::path dataset = work / ("desk_seed" + std::to_string(seed));
  synth::generate_split(scene, kTrainFrames, kTestFrames, dataset, true);
  const auto manifest = synth::read_manifest(dataset);
  const auto train = synth::load_split(dataset, "train");
  const auto test = synth::load_split(dataset, "test");

  SeedResult out;
  out.windows = train.size() + test.size();
  trainer::TrainState state(config);
  const auto t0 = Clock::now();
  trainer::train_stage1(train, manifest.intrinsics, config, state);
  trainer::train_stage2(train, manifest.intrinsics, config, state);
  out.train_seconds = seconds_since(t0);

  std::vector<eval::DepthMetrics> stat, dyn, full, kept;
  std::vector<eval::SparsificationCurve> curves;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& w = test[i];
    const auto r = trainer::infer(state.model, w.images, manifest.intrinsics, config, config.iterations);
    const std::vector<double> valid(w.depth.numel(), 1.0);
    eval::WindowInputs in{r.depth.values(),       w.depth.values(),       valid,
                          w.dynamic_mask.values(), r.uncertainty.values(), r.entropy.values()};
    const auto rep = eval::evaluate_window(in, {1.0, 0.8}, seed * 0x9E3779B97F4A7C15ull + i);
    if (rep.metrics.static_) stat.push_back(*rep.metrics.static_);
    if (rep.metrics.dynamic) dyn.push_back(*rep.metrics.dynamic);
    full.push_back(rep.filtered[0].second);
    kept.push_back(rep.filtered[1].second);
    curves.push_back(rep.curve);
  }
  out.static_abs_rel = eval::mean_metrics(stat).abs_rel;
  out.dynamic_abs_rel = dyn.empty() ? NAN : eval::mean_metrics(dyn).abs_rel;
  out.keep_full = eval::mean_metrics(full).abs_rel;
  out.keep_08 = eval::mean_metrics(kept).abs_rel;
  out.curve = eval::average(curves);
  return out;
}

std::vector<Outcome> end_to_end(const fs::path& work) {
  std::vector<SeedResult> seeds;
  for (std::uint64_t s = 1; s <= 3; ++s) {
    seeds.push_back(run_seed(s, work));
    const auto& r = seeds.back();
    std::cout << "  seed " << s << ": " << r.windows << " windows, train " << fmt(r.train_seconds)
              << " s, static " << fmt(r.static_abs_rel) << ", dynamic " << fmt(r.dynamic_abs_rel) << std::endl;
  }
  const auto mean = [&](double SeedResult::*field) {
    double acc = 0;
    for (const auto& s : seeds) acc += s.*field;
    return acc / static_cast<double>(seeds.size());
  };
  double slowest = 0;
  bool sized = true;
  for (const auto& s : seeds) slowest = std::max(slowest, s.train_seconds), sized &= s.windows == 40;
  std::vector<eval::SparsificationCurve> curves;
  for (const auto& s : seeds) curves.push_back(s.curve);
  const auto curve = eval::average(curves);

  const double st = mean(&SeedResult::static_abs_rel), dy = mean(&SeedResult::dynamic_abs_rel);
  bool below = true;
  std::string margins;
  for (std::size_t i = 0; i < curve.fractions.size(); ++i) {
    const double f = curve.fractions[i];
    if (f < 0.5 - 1e-9) continue;
    if (f > 1.0 - 1e-9) continue;
    below &= curve.learned[i] < curve.random[i];
    margins += (margins.empty() ? "" : " ") + fmt(curve.learned[i] - curve.random[i]);
  }
  const double auc_l = eval::area_under(curve.fractions, curve.learned);
  const double auc_e = eval::area_under(curve.fractions, curve.entropy);
  const double k1 = mean(&SeedResult::keep_full), k8 = mean(&SeedResult::keep_08);
  const std::string budget = sized && slowest <= 1800.0 ? "" : " (budget: windows or time exceeded)";
  const bool ok = sized && slowest <= 1800.0;
  return {
      {ok && st < 0.15, "(a) static Abs Rel " + fmt(st) + " (< 0.15), slowest training " + fmt(slowest) + " s" + budget},
      {ok && dy > st, "(b) dynamic Abs Rel " + fmt(dy) + " vs static " + fmt(st)},
      {ok && below && auc_l < auc_e, "(c) learned - random at 0.95..0.5: " + margins + "; AUC learned " + fmt(auc_l) +
                                         " vs entropy " + fmt(auc_e)},
      {ok && k8 < k1, "(d) Abs Rel keep 0.8 " + fmt(k8) + " vs keep 1.0 " + fmt(k1)},
  };
}

// ---------------------------------------------------------------------------
// Determinism: two CLI pipeline runs, compared file by file.

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run(const std::string& cmd) {
  return std::system((cmd + " > /dev/null 2>&1").c_str());
}

Outcome determinism(const fs::path& work) {
  const auto t0 = Clock::now();
  const std::string cli = SFMC_CLI_PATH;
  const fs::path root = work / "determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  nlohmann::json scene = read_json(kConfigs / "scenes" / "desk.json");
  scene["image"] = {{"width", 48}, {"height", 32}};
  scene["intrinsics"] = {{"fx", 32}, {"fy", 32}};
  nlohmann::json train = read_json(kConfigs / "train" / "desk.json");
  train["stage1"] = {{"epochs", 1}, {"batch", 2}};
  train["stage2"] = {{"epochs", 2}, {"batch", 2}};
  std::ofstream(root / "scene.json") << scene.dump(2);
  std::ofstream(root / "train.json") << train.dump(2);
  std::vector<std::string> failures;
  for (const char* name : {"a", "b"}) {
    const fs::path r = root / name;
    const std::string q = "'" + r.string() + "'";
    const std::string steps[] = {
        cli + " synth --config '" + (root / "scene.json").string() + "' --out " + q + "/data --train 16 --test 8",
        cli + " train --config '" + (root / "train.json").string() + "' --dataset " + q + "/data --out " + q +
            "/run",
        cli + " infer --checkpoint " + q + "/run/latest.ckpt --dataset " + q + "/data --out " + q + "/pred",
        cli + " eval --predictions " + q + "/pred --dataset " + q + "/data --out " + q + "/eval --keep 0.8 --split-dynamic",
    };
    for (const auto& s : steps)
      if (run(s) != 0) failures.push_back("command failed: " + s);
  }
  std::size_t files = 0, differing = 0;
  std::set<std::string> kinds;
  if (failures.empty()) {
    for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
      if (!e.is_regular_file()) continue;
      const fs::path rel = fs::relative(e.path(), root / "a");
      const fs::path other = root / "b" / rel;
      ++files;
      kinds.insert(e.path().extension().string());
      if (!fs::exists(other) || slurp(e.path()) != slurp(other)) {
        ++differing;
        if (failures.size() < 3) failures.push_back("differs: " + rel.string());
      }
    }
  }
  const bool covered = kinds.count(".ckpt") && kinds.count(".csv") && kinds.count(".pfm");
  std::string detail = std::to_string(files) + " files compared, " + std::to_string(differing) + " differ, " +
                       fmt(seconds_since(t0)) + " s";
  for (const auto& f : failures) detail += "; " + f;
  return {failures.empty() && differing == 0 && covered && files > 0, detail};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<std::string> only;
  fs::path work = fs::temp_directory_path() / "sfmc_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string item; std::getline(ss, item, ',');) only.insert(item);
    } else if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else {
      std::cerr << "usage: sfmc_acceptance [--only name,name] [--work dir]\n";
      return 2;
    }
  }
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<std::vector<Outcome>()>>> criteria = {
      {"geometry", [] { return std::vector<Outcome>{geometry_suite()}; }},
      {"gradients", [] { return std::vector<Outcome>{gradient_suite()}; }},
      {"cost_volume", [] { return std::vector<Outcome>{cost_volume()}; }},
      {"gauss_newton", [] { return std::vector<Outcome>{gauss_newton()}; }},
      {"unit_examples", [] { return std::vector<Outcome>{unit_examples()}; }},
      {"end_to_end", [&] { return end_to_end(work); }},
      {"eval_oracle", [] { return std::vector<Outcome>{eval_oracle()}; }},
      {"determinism", [&] { return std::vector<Outcome>{determinism(work)}; }},
  };
  bool all = true;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && !only.count(name)) continue;
    std::vector<Outcome> results;
    try {
      results = fn();
    } catch (const std::exception& e) {
      results = {{false, std::string("exception: ") + e.what()}};
    }
    bool pass = true;
    std::string detail;
    for (const auto& r : results) {
      pass &= r.pass;
      detail += (detail.empty() ? "" : " | ") + std::string(r.pass ? "" : "[fail] ") + r.detail;
    }
    all &= pass;
    std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
  }
  return all ? 0 : 1;
}
