// Acceptance gate: one PASS/FAIL line per criterion. Exits non-zero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "mmfusion/pipeline.hpp"
#include "support.hpp"

namespace mmfusion {
namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double time_limit_s;  // <= 0 means no limit
  std::function<Outcome()> check;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

json run_cli(const std::vector<std::string>& args, int& code, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  code = cli::run(args, out, err);
  if (err_text) *err_text = err.str();
  if (code != 0) return json{{"error", err.str()}};
  return json::parse(out.str());
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// 1. Stated configuration numbers.
Outcome config_fidelity() {
  const PipelineConfig d = PipelineConfig::defaults();
  d.validate();
  const auto grid = d.voxel.grid().report_order();
  const bool ok = grid == std::array<std::size_t, 3>{1600, 1408, 40} &&
                  d.streams.lidar_out == MapDims{256, 200, 176} && d.streams.image_out == MapDims{256, 39, 11} &&
                  d.mffm.pooled_h == 25 && d.mffm.pooled_w == 22 && d.mffm.tokens() == 550 && d.loss.alpha == 2.0 &&
                  d.loss.beta == 0.2;
  std::ostringstream s;
  s << "grid " << grid[0] << "x" << grid[1] << "x" << grid[2] << ", tokens " << d.mffm.tokens() << ", alpha "
    << d.loss.alpha << ", beta " << d.loss.beta;
  return {ok, s.str()};
}

// 2. Finite-difference check of every parameter on the tiny config.
Outcome gradient_oracle() {
  const PipelineConfig t = PipelineConfig::tiny();
  const auto g = t.voxel.grid();
  if (g.x > 8 || g.y > 8 || g.z > 4 || t.vlpm.feature_dim != 4 || t.mffm.channels != 8 || t.mffm.tokens() > 9) {
    return {false, "tiny preset exceeds the stated size"};
  }
  int code = 0;
  std::string err;
  const json r = run_cli({"gradcheck", "--tolerance", "1e-4"}, code, &err);
  if (code != 0) return {false, err};
  std::size_t scalars = 0;
  for (const auto& s : r["stages"]) scalars += s["scalars"].get<std::size_t>();
  return {r["pass"].get<bool>() && r["max_rel_error"].get<double>() < 1e-4,
          "max rel error " + fmt("%.3g", r["max_rel_error"].get<double>()) + " over " + std::to_string(scalars) +
              " scalar checks, worst " + r["worst"].get<std::string>()};
}

// 3. Row-stochastic attention and convex-hull outputs on 100 seeds.
Outcome attention_normalization() {
  double worst_sum = 0;
  double worst_hull = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    SplitMix64 rng(seed);
    const std::size_t n = 1 + rng.below(30), m = 1 + rng.below(30), c = 1 + rng.below(16);
    Tape<float> tape(false);
    const auto q = testing::random_tensor<float>({n, c}, seed * 3 + 1, -3, 3);
    const auto k = testing::random_tensor<float>({m, c}, seed * 3 + 2, -3, 3);
    const auto v = testing::random_tensor<float>({m, c}, seed * 3 + 3, -3, 3);
    const auto res = cross_attention(tape.constant(q), tape.constant(k), tape.constant(v));
    const auto& w = res.weights.value();
    const auto& a = res.attended.value();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < m; ++j) s += w.at(i, j);
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      for (std::size_t ch = 0; ch < c; ++ch) {
        float lo = v.at(0, ch), hi = v.at(0, ch);
        for (std::size_t j = 1; j < m; ++j) {
          lo = std::min(lo, v.at(j, ch));
          hi = std::max(hi, v.at(j, ch));
        }
        worst_hull = std::max({worst_hull, static_cast<double>(lo - a.at(i, ch)),
                               static_cast<double>(a.at(i, ch) - hi)});
      }
    }
  }
  return {worst_sum <= 1e-5 && worst_hull <= 1e-5,
          "max |row sum - 1| " + fmt("%.3g", worst_sum) + ", max hull excursion " + fmt("%.3g", worst_hull)};
}

// 4. vlpm_forward does not depend on the order of points inside a voxel.
Outcome permutation_invariance() {
  const VlpmConfig config = PipelineConfig::defaults().vlpm;
  ParamStore<float> params(17);
  init_vlpm_params(params, config);
  const std::size_t slots = 5;
  SplitMix64 rng(4);
  std::vector<std::vector<Point>> voxels(100);
  for (auto& v : voxels) {
    const std::size_t n = 1 + rng.below(slots);
    const double x0 = rng.uniform(0, 70), y0 = rng.uniform(-40, 40), z0 = rng.uniform(-3, 1);
    for (std::size_t i = 0; i < n; ++i) {
      v.push_back({static_cast<float>(x0 + rng.uniform(0, 0.05)), static_cast<float>(y0 + rng.uniform(0, 0.05)),
                   static_cast<float>(z0 + rng.uniform(0, 0.1)), static_cast<float>(rng.uniform())});
    }
  }
  auto build = [&](const std::vector<std::vector<Point>>& vs) {
    VoxelBatch b;
    b.max_points = slots;
    b.grid = PipelineConfig::defaults().voxel.grid();
    b.points.assign(vs.size() * slots * 4, 0.0f);
    for (std::size_t k = 0; k < vs.size(); ++k) {
      b.indices.push_back({static_cast<std::int32_t>(k), 0, 0});
      b.counts.push_back(static_cast<std::uint32_t>(vs[k].size()));
      double mean[4] = {0, 0, 0, 0};
      for (std::size_t s = 0; s < vs[k].size(); ++s) {
        const float p[4] = {vs[k][s].x, vs[k][s].y, vs[k][s].z, vs[k][s].r};
        for (int c = 0; c < 4; ++c) {
          b.points[(k * slots + s) * 4 + c] = p[c];
          mean[c] += p[c];
        }
      }
      for (double c : mean) b.means.push_back(static_cast<float>(c / static_cast<double>(vs[k].size())));
    }
    return b;
  };
  auto forward = [&](const VoxelBatch& b) {
    Tape<float> tape(false);
    return vlpm_forward(tape, b, config, params).value();
  };
  const auto ref = forward(build(voxels));
  double worst = 0;
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    auto shuffled = voxels;
    SplitMix64 prng(100 + trial);
    for (auto& v : shuffled) {
      for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[prng.below(i)]);
    }
    // Means are recomputed from the permuted order, as the voxelizer would.
    worst = std::max(worst, testing::max_abs_diff(forward(build(shuffled)), ref));
  }
  return {worst < 1e-5, "max abs deviation " + fmt("%.3g", worst) + " over 10 permutations of 100 voxels (f32)"};
}

// 5. Zero image features leave f_L untouched before the post stack.
Outcome zero_image_identity() {
  const PipelineConfig d = PipelineConfig::defaults();
  ParamStore<float> params(d.seed);
  init_mffm_params(params, d.mffm);
  for (const char* name : {"mffm.psi.b", "mffm.vartheta.b", "mffm.gamma.b"}) {
    for (float v : params.value(name).data()) {
      if (v != 0.0f) return {false, std::string(name) + " is not zero-initialised"};
    }
  }
  for (float v : params.value("mffm.pos_image").data()) {
    if (v != 0.0f) return {false, "mffm.pos_image is not zero-initialised"};
  }
  const auto f_lidar = testing::random_tensor<float>(d.streams.lidar_out.shape(), 5);
  Tape<float> tape(false);
  const auto out =
      mffm_forward(tape.constant(f_lidar), tape.constant(Tensor<float>(d.streams.image_out.shape())), d.mffm, params);
  const bool same = out.pre_stack.value() == f_lidar;
  return {same, same ? "pre-stack output equals f_L bit for bit (256x200x176)"
                     : "max deviation " + fmt("%.3g", testing::max_abs_diff(out.pre_stack.value(), f_lidar))};
}

// 6. Voxelizer accounting and worker independence on a 120k-point frame.
Outcome voxelizer_partition() {
  const PipelineConfig d = PipelineConfig::defaults();
  SceneOptions o = scene_options_for(d);
  const PointCloud cloud = crop_range(synth_scene(6, 10, 120000 - 10 * o.points_per_object, o).cloud, d.voxel.range);
  if (cloud.size() != 120000) return {false, "frame has " + std::to_string(cloud.size()) + " points"};
  const VoxelBatch one = voxelize(cloud, d.voxel, 1);
  const VoxelBatch eight = voxelize(cloud, d.voxel, 8);
  const auto& s = one.stats;
  const bool sums = s.kept_points + s.dropped_by_max_points + s.dropped_by_max_voxels == cloud.size();
  std::vector<VoxelIndex> sorted = one.indices;
  std::sort(sorted.begin(), sorted.end());
  const bool unique = std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end();
  const bool same = one.same_contents(eight) && one.stats.kept_points == eight.stats.kept_points &&
                    one.stats.dropped_by_max_points == eight.stats.dropped_by_max_points &&
                    one.stats.dropped_by_max_voxels == eight.stats.dropped_by_max_voxels;
  std::ostringstream msg;
  msg << "K " << one.size() << ", kept " << s.kept_points << " + N-dropped " << s.dropped_by_max_points
      << " + cap-dropped " << s.dropped_by_max_voxels << " = " << cloud.size() << ", unique " << unique
      << ", workers 1 vs 8 identical " << same;
  return {sums && unique && same, msg.str()};
}

// 7. Plain gradient descent overfits five synthetic scenes.
Outcome toy_overfit(const std::filesystem::path& dir) {
  int code = 0;
  std::string err;
  const auto scenes = (dir / "scenes.json").string();
  run_cli({"--seed", "0", "synth-scenes", "--count", "5", "--objects", "1", "--output", scenes}, code, &err);
  if (code != 0) return {false, err};
  const json r = run_cli({"--seed", "0", "train-toy", "--scenes", scenes, "--steps", "500", "--lr", "1e-2",
                          "--recall", "--trace", (dir / "toy_trace.csv").string()},
                         code, &err);
  if (code != 0) return {false, err};
  const double initial = r["initial_total"].get<double>();
  const double final_total = r["final_total"].get<double>();
  const double ratio = final_total / initial;
  const double recall = r["recall"].get<double>();
  std::ostringstream msg;
  msg << "loss " << fmt("%.4f", initial) << " -> " << fmt("%.4f", final_total) << " (" << fmt("%.1f", 100 * ratio)
      << "% of initial, need <= 10%: " << (ratio <= 0.1 ? "ok" : "not met") << "), recall@0.5 " << recall
      << " (need >= 0.9: " << (recall >= 0.9 ? "ok" : "not met") << ")";
  return {ratio <= 0.1 && recall >= 0.9, msg.str()};
}

// 8. The loss composition is the literal weighted sum.
Outcome loss_arithmetic() {
  const LossWeights w;
  SplitMix64 rng(8);
  std::size_t exact = 0;
  for (int i = 0; i < 10; ++i) {
    const double cls = rng.uniform(0, 5), reg = rng.uniform(0, 5), dir = rng.uniform(0, 5);
    Tape<double> tape(false);
    const double total = combine_losses(tape.constant(Tensor<double>::scalar(cls)),
                                        tape.constant(Tensor<double>::scalar(reg)),
                                        tape.constant(Tensor<double>::scalar(dir)), w)
                             .value()[0];
    const double direct = cls + 2.0 * reg + 0.2 * dir;
    exact += total == direct && combine_losses(cls, reg, dir, w) == direct;
  }
  return {exact == 10, std::to_string(exact) + "/10 triples exact"};
}

// 9. Two full runs produce identical fused maps and traces.
Outcome determinism(const std::filesystem::path& dir) {
  std::vector<std::string> fused, traces;
  for (int run = 0; run < 2; ++run) {
    const auto d = dir / ("run" + std::to_string(run));
    std::filesystem::create_directories(d);
    auto p = [&](const char* name) { return (d / name).string(); };
    int code = 0;
    std::string err;
    const std::vector<std::vector<std::string>> steps{
        {"--seed", "3", "synth-scenes", "--count", "2", "--output", p("scenes.json"), "--frame-dir", p("frames")},
        {"--seed", "3", "train-toy", "--scenes", p("scenes.json"), "--steps", "20", "--lr", "1e-2", "--out",
         p("trained.mmck"), "--trace", p("trace.csv")},
    };
    for (const auto& s : steps) {
      run_cli(s, code, &err);
      if (code != 0) return {false, err};
    }
    const auto cfg = p("toy.json");
    PipelineConfig toy = PipelineConfig::toy();
    toy.seed = 3;
    save_config(toy, cfg);
    const std::vector<std::vector<std::string>> fuse_steps{
        {"--config", cfg, "voxelize", "--input", (d / "frames" / "000000.bin").string(), "--output", p("v.mmvx")},
        {"--config", cfg, "encode", "--stream", "lidar", "--input", p("v.mmvx"), "--checkpoint", p("trained.mmck"),
         "--output", p("lidar.mmff")},
        {"--config", cfg, "encode", "--stream", "image", "--synthetic-index", "0", "--checkpoint", p("trained.mmck"),
         "--output", p("image.mmff")},
        {"--config", cfg, "fuse", "--lidar-features", p("lidar.mmff"), "--image-features", p("image.mmff"),
         "--checkpoint", p("trained.mmck"), "--output", p("fused.mmff")},
    };
    for (const auto& s : fuse_steps) {
      std::ostringstream out, e;
      if (cli::run(s, out, e) != 0) return {false, e.str()};
    }
    fused.push_back(slurp(p("fused.mmff")));
    traces.push_back(slurp(p("trace.csv")));
  }
  const bool ok = !fused[0].empty() && fused[0] == fused[1] && !traces[0].empty() && traces[0] == traces[1];
  return {ok, "fused.mmff " + std::to_string(fused[0].size()) + " bytes identical " +
                  (fused[0] == fused[1] ? "yes" : "no") + ", trace.csv identical " +
                  (traces[0] == traces[1] ? "yes" : "no")};
}

// 10. Informational voxelization throughput.
Outcome throughput() {
  int code = 0;
  std::string err;
  const json r = run_cli({"bench", "--voxelize-only", "--frames", "10", "--repetitions", "3", "--points", "120000"},
                         code, &err);
  if (code != 0) return {false, err};
  return {true, fmt("%.1f", r["voxelize_frames_per_s"].get<double>()) + " frames/s at 120k points, " +
                    std::to_string(r["machine"]["hardware_threads"].get<unsigned>()) + " hardware threads"};
}

}  // namespace
}  // namespace mmfusion

int main() {
  using namespace mmfusion;
  testing::TempDir dir("acceptance");
  const std::vector<Criterion> criteria{
      {1, "configuration fidelity", 1.0, config_fidelity},
      {2, "gradient oracle", 120.0, gradient_oracle},
      {3, "attention normalization", 10.0, attention_normalization},
      {4, "permutation invariance", 10.0, permutation_invariance},
      {5, "zero-image identity", 0.0, zero_image_identity},
      {6, "voxelizer partition", 0.0, voxelizer_partition},
      {7, "toy overfit", 600.0, [&] { return toy_overfit(dir.path()); }},
      {8, "loss arithmetic", 0.0, loss_arithmetic},
      {9, "determinism", 0.0, [&] { return determinism(dir.path()); }},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    const bool in_time = c.time_limit_s <= 0 || secs < c.time_limit_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << o.detail << " ["
              << fmt("%.2f", secs) << " s";
    if (c.time_limit_s > 0) std::cout << ", limit " << c.time_limit_s << " s";
    std::cout << "]" << std::endl;
  }
  Outcome info;
  try {
    info = throughput();
  } catch (const std::exception& e) {
    info = {false, e.what()};
  }
  std::cout << "INFO criterion 10 (throughput): " << info.detail << std::endl;
  std::cout << (failures ? "acceptance: " + std::to_string(failures) + " criterion(s) failed" : "acceptance: all passed")
            << std::endl;
  return failures ? 1 : 0;
}
