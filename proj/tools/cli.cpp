#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "mmfusion/binary_io.hpp"
#include "mmfusion/checkpoint.hpp"
#include "mmfusion/pipeline.hpp"

namespace mmfusion::cli {

using nlohmann::json;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kShape:
    case ErrorKind::kDomain:
    case ErrorKind::kLookup:
      return 1;
    case ErrorKind::kFormat:
    case ErrorKind::kData:
    case ErrorKind::kIo:
      return 2;
    case ErrorKind::kNumeric:
    case ErrorKind::kOracle:
    case ErrorKind::kTraining:
      return 3;
  }
  return 1;
}

std::string error_line(ErrorKind kind, const std::string& message) {
  std::string escaped;
  for (char c : message) {
    if (c == '"' || c == '\\') escaped += '\\';
    if (c == '\n') {
      escaped += "\\n";
      continue;
    }
    escaped += c;
  }
  return "error kind=" + std::string(to_string(kind)) + " code=" + std::to_string(exit_code(kind)) + " message=\"" +
         escaped + "\"";
}

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  std::string precision;
};

struct Context {
  Globals globals;
  std::ostream& out;
};

PipelineConfig resolve_config(const Globals& g, const PipelineConfig& fallback) {
  PipelineConfig config = g.config_path.empty() ? fallback : load_config(g.config_path);
  if (g.seed) config.seed = *g.seed;
  if (!g.precision.empty()) config.precision = parse_precision(g.precision);
  config.validate();
  return config;
}

void configure_logging() {
  const char* env = std::getenv("MMFUSION_LOG");
  spdlog::level::level_enum level = spdlog::level::warn;
  if (env && *env) {
    level = spdlog::level::from_str(env);
    // from_str maps unknown names to off; keep warnings in that case.
    if (level == spdlog::level::off && std::string(env) != "off") level = spdlog::level::warn;
  }
  spdlog::set_level(level);
}

template <Real T>
ParamStore<T> pipeline_params(const PipelineConfig& config, const std::string& checkpoint) {
  ParamStore<T> params = init_pipeline_params<T>(config);
  if (!checkpoint.empty()) {
    spdlog::info("loading checkpoint {}", checkpoint);
    ParamStore<float> stored = init_pipeline_params<float>(config);
    load_checkpoint_into(stored, checkpoint);
    if constexpr (std::is_same_v<T, float>) {
      params = std::move(stored);
    } else {
      params = stored.template cast<T>();
    }
  }
  return params;
}

template <Real T>
void save_params(const ParamStore<T>& params, const std::string& path) {
  if constexpr (std::is_same_v<T, float>) {
    save_checkpoint(params, path);
  } else {
    save_checkpoint(params.template cast<float>(), path);
  }
}

template <Real T>
void save_map(const Tensor<T>& tensor, SpatialFrame frame, const std::string& path) {
  save_feature_map(FeatureMap<T>{frame, tensor}, path);
}

template <typename F>
decltype(auto) dispatch(Precision p, F&& f) {
  if (p == Precision::kF64) return f(double{});
  return f(float{});
}

// ---------------------------------------------------------------------------

struct VoxelizeArgs {
  std::string input;
  std::string output;
  std::string summary;
};

int cmd_voxelize(const Context& ctx, const VoxelizeArgs& a) {
  const PipelineConfig config = resolve_config(ctx.globals, PipelineConfig::defaults());
  const PointCloud raw = read_kitti_bin(a.input);
  const PointCloud cloud = crop_range(raw, config.voxel.range);
  const VoxelBatch batch = voxelize(cloud, config.voxel, ctx.globals.workers);
  save_voxel_batch(batch, a.output);
  json summary = json::parse(voxel_summary_json(batch));
  summary["points_in_file"] = raw.size();
  summary["points_outside_range"] = raw.size() - cloud.size();
  const std::string text = summary.dump(2) + "\n";
  if (!a.summary.empty()) io::write_text_atomic(a.summary, text);
  ctx.out << text;
  spdlog::info("voxelized {} points into {} voxels", cloud.size(), batch.size());
  return 0;
}

struct EncodeArgs {
  std::string stream;
  std::string input;
  std::string checkpoint;
  std::string output;
  std::optional<std::size_t> synthetic_index;
};

int cmd_encode(const Context& ctx, const EncodeArgs& a) {
  const PipelineConfig config = resolve_config(ctx.globals, PipelineConfig::defaults());
  return dispatch(config.precision, [&](auto tag) {
    using T = decltype(tag);
    ParamStore<T> params = pipeline_params<T>(config, a.checkpoint);
    Tape<T> tape(/*record=*/false);
    if (a.stream == "lidar") {
      if (a.input.empty()) throw ConfigError("encode --stream lidar needs --input with a voxel batch");
      const VoxelBatch batch = load_voxel_batch(a.input);
      const Var<T> f_lidar = lidar_stream(tape, batch, config, params);
      save_map(f_lidar.value(), SpatialFrame::kBev, a.output);
    } else {
      Tensor<T> source;
      if (config.streams.image_source == ImageSource::kFeatureFile) {
        if (a.input.empty()) throw ConfigError("feature_file image source needs --input");
        source = load_image_features<T>(a.input, config.streams).tensor;
      } else if (a.synthetic_index) {
        source = scene_image<T>(config, *a.synthetic_index);
      } else {
        if (a.input.empty()) throw ConfigError("encode --stream image needs --input or --synthetic-index");
        source = load_feature_map<T>(a.input, SpatialFrame::kImagePlane).tensor;
      }
      const Var<T> f_image = image_stream(tape, source, config, params);
      save_map(f_image.value(), SpatialFrame::kImagePlane, a.output);
    }
    return 0;
  });
}

struct VlpmArgs {
  std::string input;
  std::string checkpoint;
  std::string output;
};

int cmd_vlpm(const Context& ctx, const VlpmArgs& a) {
  const PipelineConfig config = resolve_config(ctx.globals, PipelineConfig::defaults());
  return dispatch(config.precision, [&](auto tag) {
    using T = decltype(tag);
    ParamStore<T> params = pipeline_params<T>(config, a.checkpoint);
    const VoxelBatch batch = load_voxel_batch(a.input);
    Tape<T> tape(/*record=*/false);
    const Var<T> features = vlpm_forward(tape, batch, config.vlpm, params);
    Tensor<T> out = features.value().reshaped({1, features.dim(0), features.dim(1)});
    save_map(out, SpatialFrame::kUnspecified, a.output);
    ctx.out << json{{"voxels", features.dim(0)}, {"feature_dim", features.dim(1)}}.dump() << "\n";
    return 0;
  });
}

struct FuseArgs {
  std::string lidar;
  std::string image;
  std::string checkpoint;
  std::string output;
  std::string pre_stack;
};

int cmd_fuse(const Context& ctx, const FuseArgs& a) {
  const PipelineConfig config = resolve_config(ctx.globals, PipelineConfig::defaults());
  return dispatch(config.precision, [&](auto tag) {
    using T = decltype(tag);
    ParamStore<T> params = pipeline_params<T>(config, a.checkpoint);
    const FeatureMap<T> f_lidar = load_feature_map<T>(a.lidar, SpatialFrame::kBev);
    const FeatureMap<T> f_image = load_feature_map<T>(a.image, SpatialFrame::kImagePlane);
    if (f_lidar.tensor.dims() != config.streams.lidar_out.shape()) {
      throw ConfigError("LiDAR features " + shape_string(f_lidar.tensor.dims()) + " do not match configured " +
                        shape_string(config.streams.lidar_out.shape()));
    }
    if (f_image.tensor.dims() != config.streams.image_out.shape()) {
      throw ConfigError("image features " + shape_string(f_image.tensor.dims()) + " do not match configured " +
                        shape_string(config.streams.image_out.shape()));
    }
    Tape<T> tape(/*record=*/false);
    const MffmOutput<T> out =
        mffm_forward(tape.constant(f_lidar.tensor), tape.constant(f_image.tensor), config.mffm, params);
    save_map(out.fused.value(), SpatialFrame::kBev, a.output);
    if (!a.pre_stack.empty()) save_map(out.pre_stack.value(), SpatialFrame::kBev, a.pre_stack);
    return 0;
  });
}

struct InitArgs {
  std::string output;
};

int cmd_init(const Context& ctx, const InitArgs& a) {
  const PipelineConfig config = resolve_config(ctx.globals, PipelineConfig::defaults());
  const ParamStore<float> params = init_pipeline_params<float>(config);
  save_checkpoint(params, a.output);
  ctx.out << json{{"parameters", params.size()}, {"scalars", params.scalar_count()}}.dump() << "\n";
  return 0;
}

struct SynthArgs {
  std::size_t count = 5;
  std::size_t objects = 1;
  std::size_t noise = 200;
  std::size_t points_per_object = 150;
  std::string output;
  std::string frame_dir;
};

int cmd_synth(const Context& ctx, const SynthArgs& a) {
  const PipelineConfig config = resolve_config(ctx.globals, PipelineConfig::toy());
  SceneOptions options = scene_options_for(config);
  options.points_per_object = a.points_per_object;
  std::vector<SyntheticScene> scenes;
  for (std::size_t i = 0; i < a.count; ++i) {
    scenes.push_back(synth_scene(config.seed + i, a.objects, a.noise, options));
  }
  write_scenes(scenes, a.output);
  if (!a.frame_dir.empty()) {
    std::filesystem::create_directories(a.frame_dir);
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%06zu.bin", i);
      write_kitti_bin(scenes[i].cloud, std::filesystem::path(a.frame_dir) / name);
    }
  }
  ctx.out << json{{"scenes", scenes.size()}, {"objects_per_scene", a.objects}}.dump() << "\n";
  return 0;
}

struct TrainArgs {
  std::string scenes;
  std::size_t steps = 500;
  double lr = 1e-2;
  std::string init;
  std::string out;
  std::string trace;
  bool recall = false;
  double score_threshold = 0.1;
};

int cmd_train(const Context& ctx, const TrainArgs& a) {
  const PipelineConfig config = resolve_config(ctx.globals, PipelineConfig::toy());
  const std::vector<SyntheticScene> scenes = read_scenes(a.scenes);
  return dispatch(config.precision, [&](auto tag) {
    using T = decltype(tag);
    ParamStore<T> params = pipeline_params<T>(config, a.init);
    const TrainOptions options{a.steps, a.lr, ctx.globals.workers};
    const auto trace = train_toy<T>(scenes, config, params, options);
    if (!a.trace.empty()) io::write_text_atomic(a.trace, trace_to_csv(trace));
    if (!a.out.empty()) save_params(params, a.out);
    json summary{{"steps", trace.size()}};
    if (!trace.empty()) {
      // Final losses are measured after the last update.
      const TrainStep last = evaluate_loss<T>(scenes, config, params, ctx.globals.workers);
      summary["initial_total"] = trace.front().total;
      summary["final_total"] = last.total;
      summary["final_cls"] = last.cls;
      summary["final_reg"] = last.reg;
      summary["final_dir"] = last.dir;
    }
    if (a.recall) {
      const RecallReport r = evaluate_recall<T>(scenes, config, params, a.score_threshold, 0.5, 0.5,
                                                ctx.globals.workers);
      summary["recall"] = r.recall;
      summary["gt_boxes"] = r.gt_boxes;
      summary["detections"] = r.detections;
    }
    ctx.out << summary.dump(2) << "\n";
    return 0;
  });
}

struct GradcheckArgs {
  double tolerance = 1e-4;
  double step = 1e-5;
  double floor = 1e-4;
  std::string csv;
  std::string corrupt;
  std::vector<std::string> prefixes;
};

int cmd_gradcheck(const Context& ctx, const GradcheckArgs& a) {
  const PipelineConfig config = resolve_config(ctx.globals, PipelineConfig::tiny());
  if (config.precision != Precision::kF64) {
    spdlog::warn("gradient checks always run in 64-bit; the precision setting is ignored");
  }
  if (!(a.tolerance >= 0) || !(a.step > 0) || !(a.floor > 0)) {
    throw ConfigError("gradcheck needs tolerance >= 0, step > 0 and floor > 0");
  }
  GradCheckOptions options;
  options.tolerance = a.tolerance;
  options.step = a.step;
  options.floor = a.floor;
  options.prefixes = a.prefixes;
  if (!a.corrupt.empty()) options.corrupt = a.corrupt;
  const auto stages = pipeline_gradcheck(config, options);
  if (!a.csv.empty()) io::write_text_atomic(a.csv, gradcheck_to_csv(stages, a.tolerance));

  bool pass = !stages.empty();
  double worst = 0;
  std::string worst_name;
  std::string worst_stage;
  json rows = json::array();
  for (const auto& s : stages) {
    pass = pass && s.report.pass;
    rows.push_back({{"stage", s.stage},
                    {"parameters", s.report.entries.size()},
                    {"scalars", s.report.checked},
                    {"max_rel_error", s.report.max_rel_error},
                    {"worst", s.report.worst_name},
                    {"pass", s.report.pass}});
    if (worst_name.empty() || s.report.max_rel_error > worst || !std::isfinite(s.report.max_rel_error)) {
      worst = s.report.max_rel_error;
      worst_name = s.report.worst_name;
      worst_stage = s.stage;
    }
  }
  ctx.out << json{{"pass", pass}, {"tolerance", a.tolerance}, {"max_rel_error", worst}, {"worst", worst_name},
                  {"stages", rows}}
                 .dump(2)
          << "\n";
  if (!pass) {
    std::ostringstream msg;
    msg << "gradient check failed: worst parameter " << worst_name << " in stage " << worst_stage
        << " with relative error " << worst << " (tolerance " << a.tolerance << ")";
    throw OracleError(msg.str());
  }
  return 0;
}

struct BenchArgs {
  std::size_t frames = 10;
  std::size_t repetitions = 5;
  std::size_t points = 120000;
  std::size_t objects = 10;
  bool voxelize_only = false;
  std::string output;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_bench(const Context& ctx, const BenchArgs& a) {
  const PipelineConfig config = resolve_config(ctx.globals, PipelineConfig::defaults());
  if (a.repetitions == 0) throw ConfigError("bench needs at least one repetition");
  if (a.frames == 0) throw ConfigError("bench needs at least one frame");
  SceneOptions options = scene_options_for(config);
  const std::size_t object_points = std::min(a.points, a.objects * options.points_per_object);
  std::vector<PointCloud> frames;
  for (std::size_t f = 0; f < a.frames; ++f) {
    frames.push_back(synth_scene(config.seed + f, object_points / options.points_per_object,
                                 a.points - object_points, options)
                         .cloud);
  }
  using Clock = std::chrono::steady_clock;
  const auto ms_since = [](Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
  };

  std::vector<std::string> stage_names{"voxelize"};
  if (!a.voxelize_only) {
    for (const char* s : {"vlpm", "lidar_stream", "image_stream", "mffm", "head", "end_to_end"}) stage_names.push_back(s);
  }
  std::map<std::string, std::vector<double>> samples;
  std::vector<double> points_per_s;
  std::vector<std::size_t> voxel_counts;

  dispatch(config.precision, [&](auto tag) {
    using T = decltype(tag);
    ParamStore<T> params = init_pipeline_params<T>(config);
    const Tensor<T> image = scene_image<T>(config, 0);
    for (std::size_t r = 0; r < a.repetitions; ++r) {
      std::map<std::string, double> total;
      std::vector<VoxelBatch> batches;
      const auto t_vox = Clock::now();
      for (const PointCloud& cloud : frames) batches.push_back(voxelize(cloud, config.voxel, ctx.globals.workers));
      total["voxelize"] = ms_since(t_vox);
      if (r == 0) {
        for (const auto& b : batches) voxel_counts.push_back(b.size());
      }
      if (!a.voxelize_only) {
        for (const VoxelBatch& batch : batches) {
          Tape<T> tape(/*record=*/false);
          auto t = Clock::now();
          const auto t_start = t;
          Var<T> feats = vlpm_forward(tape, batch, config.vlpm, params);
          total["vlpm"] += ms_since(t);
          t = Clock::now();
          Var<T> f_lidar = bev_encode(scatter_bev(feats, batch.indices, batch.grid), config.streams, params);
          total["lidar_stream"] += ms_since(t);
          t = Clock::now();
          Var<T> f_image = image_stream(tape, image, config, params);
          total["image_stream"] += ms_since(t);
          t = Clock::now();
          const MffmOutput<T> fused = mffm_forward(f_lidar, f_image, config.mffm, params);
          total["mffm"] += ms_since(t);
          t = Clock::now();
          head_forward(fused.fused, config.anchors, params);
          total["head"] += ms_since(t);
          total["end_to_end"] += ms_since(t_start);
        }
        total["end_to_end"] += total["voxelize"];
      }
      for (const auto& name : stage_names) samples[name].push_back(total[name] / static_cast<double>(a.frames));
      const double seconds = total["voxelize"] / 1000.0;
      points_per_s.push_back(seconds > 0 ? static_cast<double>(a.frames * a.points) / seconds : 0.0);
    }
    return 0;
  });

  json stages;
  for (const auto& name : stage_names) {
    stages[name] = {{"samples_ms_per_frame", samples[name]}, {"median_ms_per_frame", median(samples[name])}};
  }
  const double med_pps = median(points_per_s);
  json report{
      {"machine",
       {{"hardware_threads", std::thread::hardware_concurrency()},
        {"workers", ctx.globals.workers},
        {"compiler", __VERSION__},
        {"precision", to_string(config.precision)}}},
      {"frames", a.frames},
      {"points_per_frame", a.points},
      {"repetitions", a.repetitions},
      {"voxels_per_frame", voxel_counts},
      {"max_voxels", config.voxel.max_voxels},
      {"voxelize_points_per_s", {{"samples", points_per_s}, {"median", med_pps}}},
      {"voxelize_frames_per_s", med_pps / static_cast<double>(a.points)},
      {"stages", stages},
  };
  const std::string text = report.dump(2) + "\n";
  if (!a.output.empty()) io::write_text_atomic(a.output, text);
  ctx.out << text;
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  configure_logging();
  CLI::App app{"LiDAR-camera fusion pipeline: voxelization, voxel point attention, cross-modal fusion, RPN loss"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "Pipeline config JSON");
  app.add_option("--seed", g.seed, "Override the config seed");
  app.add_option("--workers", g.workers, "Worker threads; never changes results")->check(CLI::PositiveNumber);
  app.add_option("--precision", g.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));

  VoxelizeArgs vox;
  auto* s_vox = app.add_subcommand("voxelize", "Voxelize a KITTI .bin frame into an MMVX batch");
  s_vox->add_option("--input", vox.input, "KITTI velodyne .bin")->required();
  s_vox->add_option("--output", vox.output, "MMVX output")->required();
  s_vox->add_option("--summary", vox.summary, "Also write the JSON summary here");

  EncodeArgs enc;
  auto* s_enc = app.add_subcommand("encode", "Run one single-modal stream and write an MMFF map");
  s_enc->add_option("--stream", enc.stream, "lidar or image")->required()->check(CLI::IsMember({"lidar", "image"}));
  s_enc->add_option("--input", enc.input, "MMVX batch (lidar), MMFF image or feature map (image)");
  s_enc->add_option("--checkpoint", enc.checkpoint, "MMCK parameters; seeded init when absent");
  s_enc->add_option("--output", enc.output, "MMFF output")->required();
  s_enc->add_option("--synthetic-index", enc.synthetic_index, "Use the synthetic image of this scene index");

  VlpmArgs vl;
  auto* s_vl = app.add_subcommand("vlpm", "Voxel features of an MMVX batch, written as a 1 x K x d MMFF map");
  s_vl->add_option("--input", vl.input, "MMVX batch")->required();
  s_vl->add_option("--checkpoint", vl.checkpoint, "MMCK parameters; seeded init when absent");
  s_vl->add_option("--output", vl.output, "MMFF output")->required();

  FuseArgs fu;
  auto* s_fu = app.add_subcommand("fuse", "Fuse LiDAR and image feature maps");
  s_fu->add_option("--lidar-features", fu.lidar, "MMFF LiDAR map")->required();
  s_fu->add_option("--image-features", fu.image, "MMFF image map")->required();
  s_fu->add_option("--checkpoint", fu.checkpoint, "MMCK parameters; seeded init when absent");
  s_fu->add_option("--output", fu.output, "MMFF fused map")->required();
  s_fu->add_option("--pre-stack", fu.pre_stack, "Also write the fusion before the post stack");

  InitArgs in;
  auto* s_in = app.add_subcommand("init", "Write freshly initialised parameters");
  s_in->add_option("--output", in.output, "MMCK output")->required();

  SynthArgs sy;
  auto* s_sy = app.add_subcommand("synth-scenes", "Generate synthetic labelled scenes");
  s_sy->add_option("--count", sy.count, "Number of scenes");
  s_sy->add_option("--objects", sy.objects, "Objects per scene");
  s_sy->add_option("--noise", sy.noise, "Clutter points per scene");
  s_sy->add_option("--points-per-object", sy.points_per_object, "Points per object")->check(CLI::PositiveNumber);
  s_sy->add_option("--output", sy.output, "Scenes JSON")->required();
  s_sy->add_option("--frame-dir", sy.frame_dir, "Also write each cloud as a KITTI .bin here");

  TrainArgs tr;
  auto* s_tr = app.add_subcommand("train-toy", "Gradient descent over synthetic scenes");
  s_tr->add_option("--scenes", tr.scenes, "Scenes JSON")->required();
  s_tr->add_option("--steps", tr.steps, "Steps");
  s_tr->add_option("--lr", tr.lr, "Learning rate");
  s_tr->add_option("--init", tr.init, "Start from this checkpoint");
  s_tr->add_option("--out", tr.out, "MMCK output");
  s_tr->add_option("--trace", tr.trace, "CSV loss trace");
  s_tr->add_flag("--recall", tr.recall, "Report NMS recall at BEV IoU 0.5 after training");
  s_tr->add_option("--score-threshold", tr.score_threshold, "Detection score threshold for --recall");

  GradcheckArgs gc;
  auto* s_gc = app.add_subcommand("gradcheck", "Finite-difference check of every parameter (64-bit)");
  s_gc->add_option("--tolerance", gc.tolerance, "Maximum relative error");
  s_gc->add_option("--step", gc.step, "Central-difference step");
  s_gc->add_option("--floor", gc.floor, "Lower bound of the relative-error denominator");
  s_gc->add_option("--csv", gc.csv, "Per-parameter comparison table");
  s_gc->add_option("--corrupt", gc.corrupt, "Test hook: perturb this parameter's analytic gradient");
  s_gc->add_option("--only", gc.prefixes, "Restrict to parameter name prefixes");

  BenchArgs be;
  auto* s_be = app.add_subcommand("bench", "Timing report over synthetic frames");
  s_be->add_option("--frames", be.frames, "Frames per repetition");
  s_be->add_option("--repetitions", be.repetitions, "Repetitions");
  s_be->add_option("--points", be.points, "Points per frame");
  s_be->add_option("--objects", be.objects, "Objects per frame");
  s_be->add_flag("--voxelize-only", be.voxelize_only, "Skip the network stages");
  s_be->add_option("--output", be.output, "JSON report");

  std::vector<std::string> argv_storage{"mmfusion"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : argv_storage) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << error_line(ErrorKind::kConfig, e.what()) << "\n";
    return exit_code(ErrorKind::kConfig);
  }

  const Context ctx{g, out};
  try {
    if (s_vox->parsed()) return cmd_voxelize(ctx, vox);
    if (s_enc->parsed()) return cmd_encode(ctx, enc);
    if (s_vl->parsed()) return cmd_vlpm(ctx, vl);
    if (s_fu->parsed()) return cmd_fuse(ctx, fu);
    if (s_in->parsed()) return cmd_init(ctx, in);
    if (s_sy->parsed()) return cmd_synth(ctx, sy);
    if (s_tr->parsed()) return cmd_train(ctx, tr);
    if (s_gc->parsed()) return cmd_gradcheck(ctx, gc);
    if (s_be->parsed()) return cmd_bench(ctx, be);
  } catch (const Error& e) {
    err << error_line(e.kind(), e.what()) << "\n";
    return exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    err << error_line(ErrorKind::kIo, e.what()) << "\n";
    return exit_code(ErrorKind::kIo);
  } catch (const std::exception& e) {
    err << error_line(ErrorKind::kNumeric, std::string("unexpected failure: ") + e.what()) << "\n";
    return exit_code(ErrorKind::kNumeric);
  }
  err << error_line(ErrorKind::kConfig, "no subcommand given") << "\n";
  return exit_code(ErrorKind::kConfig);
}

}  // namespace mmfusion::cli
