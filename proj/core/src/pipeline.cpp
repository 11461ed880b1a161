#include "mmfusion/pipeline.hpp"

#include <cmath>
#include <cstdlib>
#include <set>
#include <sstream>

#include "mmfusion/binary_io.hpp"

namespace mmfusion {

using nlohmann::json;

std::string to_string(Precision p) { return p == Precision::kF64 ? "f64" : "f32"; }

Precision parse_precision(std::string_view text) {
  if (text == "f32") return Precision::kF32;
  if (text == "f64") return Precision::kF64;
  throw ConfigError("precision must be f32 or f64, got '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Presets and validation

namespace {

// Maps the range onto [1, 3] per axis. The voxel features are positively homogeneous in
// the coordinates at initialisation, so the band keeps them away from zero.
void band_coordinates(PipelineConfig& c) {
  for (int a = 0; a < 3; ++a) {
    c.vlpm.coord_scale[a] = 0.5 * c.voxel.range.extent(a);
    c.vlpm.coord_offset[a] = c.voxel.range.axis(a)[0] - c.vlpm.coord_scale[a];
  }
}

}  // namespace

PipelineConfig PipelineConfig::defaults() {
  PipelineConfig c;
  band_coordinates(c);
  return c;
}

PipelineConfig PipelineConfig::tiny() {
  PipelineConfig c;
  c.voxel.voxel_size = {0.4, 0.4, 1.0};
  c.voxel.range = RangeSpec{{0.0, 3.2}, {-1.6, 1.6}, {-3.0, 1.0}};
  c.voxel.max_points_per_voxel = 4;
  c.voxel.max_voxels = 64;
  c.vlpm.feature_dim = 4;
  c.streams.lidar_out = {8, 4, 4};
  c.streams.image_out = {8, 3, 2};
  c.streams.bev_channels = {4};
  c.streams.image_in = {3, 16, 8};
  c.streams.image_patch = 4;
  c.mffm.pooled_h = 3;
  c.mffm.pooled_w = 3;
  c.mffm.channels = 8;
  c.mffm.post_channels = {4, 8};
  c.anchors.size = {1.2, 0.6, 0.6};
  c.precision = Precision::kF64;
  return c;
}

PipelineConfig PipelineConfig::toy() {
  PipelineConfig c;
  c.voxel.voxel_size = {0.4, 0.4, 1.0};
  c.voxel.range = RangeSpec{{0.0, 25.6}, {-12.8, 12.8}, {-3.0, 1.0}};
  c.vlpm.feature_dim = 8;
  band_coordinates(c);
  c.streams.lidar_out = {16, 32, 32};
  c.streams.image_out = {16, 8, 4};
  c.streams.bev_channels = {16};
  c.streams.image_in = {3, 64, 32};
  c.streams.image_patch = 8;
  c.mffm.pooled_h = 4;
  c.mffm.pooled_w = 4;
  c.mffm.channels = 16;
  c.mffm.post_channels = {16, 16};
  // Without normalisation layers the pairwise products of the point attention make the
  // activation scale grow with the square of the init gain. Softmax-normalised pair weights
  // keep it near linear, so a ReLU-preserving gain reaches the head with O(1) features.
  c.vlpm.normalize_pam_weights = true;
  c.init_gain = 2.0;
  c.anchors.cls_prior = 0.01;
  c.anchors.head_init_scale = 0.01;
  return c;
}

void PipelineConfig::validate() const {
  voxel.validate();
  vlpm.validate();
  streams.validate();
  mffm.validate();
  anchors.validate();
  loss.validate();
  if (!(init_gain > 0) || !std::isfinite(init_gain)) throw ConfigError("init_gain must be positive and finite");
  if (mffm.channels != streams.lidar_out.c) {
    throw ConfigError("fusion width " + std::to_string(mffm.channels) + " differs from the stream width " +
                      std::to_string(streams.lidar_out.c));
  }
  if (streams.image_in.c == 0) throw ConfigError("image must have at least one channel");
  if (!(anchors.z_center >= voxel.range.z[0] && anchors.z_center < voxel.range.z[1])) {
    throw ConfigError("anchor z centre lies outside the z range");
  }
}

// ---------------------------------------------------------------------------
// JSON

namespace {

const char* sampling_name(InVoxelSampling s) { return s == InVoxelSampling::kFirstN ? "first_n" : "seeded_random"; }
const char* dwm_name(DwmInput d) { return d == DwmInput::kPamFeatures ? "pam_features" : "raw_points"; }
const char* source_name(ImageSource s) {
  return s == ImageSource::kStandInEncoder ? "stand_in_encoder" : "feature_file";
}
const char* residual_name(ResidualMode m) { return m == ResidualMode::kLiteralValue ? "literal_value" : "query_side"; }

json dims_json(const MapDims& d) { return json::array({d.c, d.h, d.w}); }

json hidden_json(const VlpmHiddenWidths& h) {
  return {{"alpha", h.alpha}, {"beta", h.beta},   {"gamma", h.gamma}, {"delta", h.delta},
          {"epsilon", h.epsilon}, {"theta", h.theta}, {"zeta", h.zeta},   {"eta", h.eta}};
}

// Reads the keys of one JSON object, rejecting anything it was not asked about.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be a JSON object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.contains(it.key())) throw ConfigError("unknown config key " + path_ + "." + it.key());
    }
  }

  template <typename V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<V>();
    } catch (const json::exception& e) {
      throw ConfigError("config key " + path_ + "." + key + " has the wrong type: " + e.what());
    }
  }

  template <typename E>
  void get_enum(const std::string& key, E& out, std::initializer_list<std::pair<const char*, E>> names) {
    std::string text;
    get(key, text);
    if (text.empty()) return;
    for (const auto& [name, value] : names) {
      if (text == name) {
        out = value;
        return;
      }
    }
    throw ConfigError("config key " + path_ + "." + key + " has unknown value '" + text + "'");
  }

  void get_dims(const std::string& key, MapDims& out) {
    std::vector<std::size_t> v;
    get(key, v);
    if (!j_.contains(key)) return;
    if (v.size() != 3) throw ConfigError("config key " + path_ + "." + key + " must list (C, H, W)");
    out = {v[0], v[1], v[2]};
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const std::string& path() const { return path_; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_range(const json& j, RangeSpec& range) {
  Reader r(j, "voxel.range");
  r.get("x", range.x);
  r.get("y", range.y);
  r.get("z", range.z);
}

}  // namespace

json config_to_json(const PipelineConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["init_gain"] = c.init_gain;
  j["precision"] = to_string(c.precision);
  j["voxel"] = {{"voxel_size", c.voxel.voxel_size},
                {"range", {{"x", c.voxel.range.x}, {"y", c.voxel.range.y}, {"z", c.voxel.range.z}}},
                {"max_points_per_voxel", c.voxel.max_points_per_voxel},
                {"max_voxels", c.voxel.max_voxels},
                {"seed", c.voxel.seed},
                {"sampling", sampling_name(c.voxel.sampling)}};
  j["vlpm"] = {{"feature_dim", c.vlpm.feature_dim},
               {"hidden", hidden_json(c.vlpm.hidden)},
               {"num_pam_stages", c.vlpm.num_pam_stages},
               {"normalize_pam_weights", c.vlpm.normalize_pam_weights},
               {"dwm_input", dwm_name(c.vlpm.dwm_input)},
               {"mean_baseline", c.vlpm.mean_baseline},
               {"coord_offset", c.vlpm.coord_offset},
               {"coord_scale", c.vlpm.coord_scale}};
  j["streams"] = {{"lidar_out", dims_json(c.streams.lidar_out)},
                  {"image_out", dims_json(c.streams.image_out)},
                  {"bev_channels", c.streams.bev_channels},
                  {"image_source", source_name(c.streams.image_source)},
                  {"image_in", dims_json(c.streams.image_in)},
                  {"image_patch", c.streams.image_patch}};
  j["mffm"] = {{"pooled_hw", {c.mffm.pooled_h, c.mffm.pooled_w}},
               {"channels", c.mffm.channels},
               {"residual_mode", residual_name(c.mffm.residual_mode)},
               {"post_channels", c.mffm.post_channels}};
  j["anchors"] = {{"yaws", c.anchors.yaws},
                  {"size", c.anchors.size},
                  {"z_center", c.anchors.z_center},
                  {"num_classes", c.anchors.num_classes},
                  {"match_iou", c.anchors.match_iou},
                  {"ignore_iou", c.anchors.ignore_iou},
                  {"focal_alpha", c.anchors.focal_alpha},
                  {"focal_gamma", c.anchors.focal_gamma},
                  {"smooth_l1_beta", c.anchors.smooth_l1_beta},
                  {"cls_prior", c.anchors.cls_prior},
                  {"head_init_scale", c.anchors.head_init_scale}};
  j["loss"] = {{"alpha", c.loss.alpha}, {"beta", c.loss.beta}};
  return j;
}

PipelineConfig config_from_json(const json& j) {
  PipelineConfig c = PipelineConfig::defaults();
  {
    Reader top(j, "config");
    std::string preset;
    top.get("preset", preset);
    if (preset == "tiny") {
      c = PipelineConfig::tiny();
    } else if (preset == "toy") {
      c = PipelineConfig::toy();
    } else if (!preset.empty() && preset != "default") {
      throw ConfigError("unknown preset '" + preset + "'");
    }
    top.get("seed", c.seed);
    top.get("init_gain", c.init_gain);
    top.get_enum("precision", c.precision, {{"f32", Precision::kF32}, {"f64", Precision::kF64}});

    if (const json* v = top.child("voxel")) {
      Reader r(*v, "voxel");
      r.get("voxel_size", c.voxel.voxel_size);
      if (const json* range = r.child("range")) read_range(*range, c.voxel.range);
      r.get("max_points_per_voxel", c.voxel.max_points_per_voxel);
      r.get("max_voxels", c.voxel.max_voxels);
      r.get("seed", c.voxel.seed);
      r.get_enum("sampling", c.voxel.sampling,
                 {{"first_n", InVoxelSampling::kFirstN}, {"seeded_random", InVoxelSampling::kSeededRandom}});
    }
    if (const json* v = top.child("vlpm")) {
      Reader r(*v, "vlpm");
      r.get("feature_dim", c.vlpm.feature_dim);
      if (const json* h = r.child("hidden")) {
        Reader hr(*h, "vlpm.hidden");
        auto& w = c.vlpm.hidden;
        hr.get("alpha", w.alpha);
        hr.get("beta", w.beta);
        hr.get("gamma", w.gamma);
        hr.get("delta", w.delta);
        hr.get("epsilon", w.epsilon);
        hr.get("theta", w.theta);
        hr.get("zeta", w.zeta);
        hr.get("eta", w.eta);
      }
      r.get("num_pam_stages", c.vlpm.num_pam_stages);
      r.get("normalize_pam_weights", c.vlpm.normalize_pam_weights);
      r.get_enum("dwm_input", c.vlpm.dwm_input,
                 {{"pam_features", DwmInput::kPamFeatures}, {"raw_points", DwmInput::kRawPoints}});
      r.get("mean_baseline", c.vlpm.mean_baseline);
      r.get("coord_offset", c.vlpm.coord_offset);
      r.get("coord_scale", c.vlpm.coord_scale);
    }
    if (const json* v = top.child("streams")) {
      Reader r(*v, "streams");
      r.get_dims("lidar_out", c.streams.lidar_out);
      r.get_dims("image_out", c.streams.image_out);
      r.get("bev_channels", c.streams.bev_channels);
      r.get_enum("image_source", c.streams.image_source,
                 {{"stand_in_encoder", ImageSource::kStandInEncoder}, {"feature_file", ImageSource::kFeatureFile}});
      r.get_dims("image_in", c.streams.image_in);
      r.get("image_patch", c.streams.image_patch);
    }
    if (const json* v = top.child("mffm")) {
      Reader r(*v, "mffm");
      std::vector<std::size_t> hw;
      r.get("pooled_hw", hw);
      if (v->contains("pooled_hw")) {
        if (hw.size() != 2) throw ConfigError("config key mffm.pooled_hw must list (H, W)");
        c.mffm.pooled_h = hw[0];
        c.mffm.pooled_w = hw[1];
      }
      r.get("channels", c.mffm.channels);
      r.get_enum("residual_mode", c.mffm.residual_mode,
                 {{"literal_value", ResidualMode::kLiteralValue}, {"query_side", ResidualMode::kQuerySide}});
      r.get("post_channels", c.mffm.post_channels);
    }
    if (const json* v = top.child("anchors")) {
      Reader r(*v, "anchors");
      r.get("yaws", c.anchors.yaws);
      r.get("size", c.anchors.size);
      r.get("z_center", c.anchors.z_center);
      r.get("num_classes", c.anchors.num_classes);
      r.get("match_iou", c.anchors.match_iou);
      r.get("ignore_iou", c.anchors.ignore_iou);
      r.get("focal_alpha", c.anchors.focal_alpha);
      r.get("focal_gamma", c.anchors.focal_gamma);
      r.get("smooth_l1_beta", c.anchors.smooth_l1_beta);
      r.get("cls_prior", c.anchors.cls_prior);
      r.get("head_init_scale", c.anchors.head_init_scale);
    }
    if (const json* v = top.child("loss")) {
      Reader r(*v, "loss");
      r.get("alpha", c.loss.alpha);
      r.get("beta", c.loss.beta);
    }
  }
  c.validate();
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw FormatError("config " + path.string() + " is not valid JSON: " + e.what(), e.byte);
  }
  return config_from_json(j);
}

void save_config(const PipelineConfig& config, const std::filesystem::path& path) {
  io::write_text_atomic(path, config_to_json(config).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Parameters and forward pass

template <Real T>
ParamStore<T> init_pipeline_params(const PipelineConfig& config) {
  config.validate();
  ParamStore<T> params(config.seed, config.init_gain);
  init_vlpm_params(params, config.vlpm);
  init_stream_params(params, config.streams, config.vlpm.output_dim());
  init_mffm_params(params, config.mffm);
  init_head_params(params, config.anchors, config.mffm.channels);
  return params;
}

template <Real T>
Tensor<T> scene_image(const PipelineConfig& config, std::size_t scene_index) {
  const MapDims& d = config.streams.image_in;
  const std::uint64_t seed = config.seed ^ (0x9E3779B97F4A7C15ull * (scene_index + 1));
  return synth_image<T>(seed, d.c, d.h, d.w);
}

template <Real T>
Var<T> lidar_stream(Tape<T>& tape, const VoxelBatch& batch, const PipelineConfig& config, ParamStore<T>& params,
                    Var<T>* voxel_features, Var<T>* bev) {
  if (batch.grid != config.voxel.grid()) throw ConfigError("voxel batch grid does not match the config");
  Var<T> features = vlpm_forward(tape, batch, config.vlpm, params);
  Var<T> map = scatter_bev(features, batch.indices, batch.grid);
  if (voxel_features) *voxel_features = features;
  if (bev) *bev = map;
  return bev_encode(map, config.streams, params);
}

template <Real T>
Var<T> image_stream(Tape<T>& tape, const Tensor<T>& image_or_features, const PipelineConfig& config,
                    ParamStore<T>& params) {
  if (config.streams.image_source == ImageSource::kStandInEncoder) {
    return image_encode(tape.constant(image_or_features), config.streams, params);
  }
  if (image_or_features.dims() != config.streams.image_out.shape()) {
    throw ConfigError("image features " + shape_string(image_or_features.dims()) + " do not match configured " +
                      shape_string(config.streams.image_out.shape()));
  }
  return tape.constant(image_or_features);
}

template <Real T>
PipelineOutputs<T> pipeline_forward(Tape<T>& tape, const VoxelBatch& batch, const Tensor<T>& image_or_features,
                                    const PipelineConfig& config, ParamStore<T>& params) {
  PipelineOutputs<T> out;
  out.f_lidar = lidar_stream(tape, batch, config, params, &out.voxel_features, &out.bev);
  out.f_image = image_stream(tape, image_or_features, config, params);
  out.fusion = mffm_forward(out.f_lidar, out.f_image, config.mffm, params);
  out.detection = head_forward(out.fusion.fused, config.anchors, params);
  return out;
}

// ---------------------------------------------------------------------------
// Training and evaluation

namespace {

template <Real T>
struct PreparedScene {
  VoxelBatch batch;
  Tensor<T> image;
  AnchorTargets targets;
};

template <Real T>
std::vector<PreparedScene<T>> prepare(std::span<const SyntheticScene> scenes, const PipelineConfig& config,
                                      std::span<const Box3d> anchors, std::size_t workers) {
  std::vector<PreparedScene<T>> out;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    PreparedScene<T> p;
    p.batch = voxelize(scenes[s].cloud, config.voxel, workers);
    if (config.streams.image_source == ImageSource::kStandInEncoder) p.image = scene_image<T>(config, s);
    else p.image = Tensor<T>(config.streams.image_out.shape());
    p.targets = assign_targets(anchors, scenes[s].boxes, config.anchors);
    out.push_back(std::move(p));
  }
  return out;
}

template <Real T>
void accumulate(TrainStep& row, const LossTerms<T>& loss, std::size_t scenes) {
  const double n = static_cast<double>(scenes);
  row.total += static_cast<double>(loss.total.value()[0]) / n;
  row.cls += static_cast<double>(loss.cls.value()[0]) / n;
  row.reg += static_cast<double>(loss.reg.value()[0]) / n;
  row.dir += static_cast<double>(loss.dir.value()[0]) / n;
}

}  // namespace

template <Real T>
TrainStep evaluate_loss(std::span<const SyntheticScene> scenes, const PipelineConfig& config, ParamStore<T>& params,
                        std::size_t workers) {
  config.validate();
  if (scenes.empty()) throw ConfigError("evaluate_loss needs at least one scene");
  const std::vector<Box3d> anchors =
      make_anchors(config.anchors, config.voxel.range, config.streams.lidar_out.h, config.streams.lidar_out.w);
  TrainStep row;
  for (const auto& scene : prepare<T>(scenes, config, anchors, workers)) {
    Tape<T> tape(/*record=*/false);
    const PipelineOutputs<T> out = pipeline_forward(tape, scene.batch, scene.image, config, params);
    accumulate(row, rpn_loss(out.detection, scene.targets, config.anchors, config.loss), scenes.size());
  }
  return row;
}

template <Real T>
std::vector<TrainStep> train_toy(std::span<const SyntheticScene> scenes, const PipelineConfig& config,
                                 ParamStore<T>& params, const TrainOptions& options) {
  config.validate();
  if (scenes.empty()) throw ConfigError("train_toy needs at least one scene");
  if (!(options.lr >= 0) || !std::isfinite(options.lr)) throw ConfigError("learning rate must be finite and >= 0");
  const std::vector<Box3d> anchors =
      make_anchors(config.anchors, config.voxel.range, config.streams.lidar_out.h, config.streams.lidar_out.w);
  const auto prepared = prepare<T>(scenes, config, anchors, options.workers);
  const T inv_scenes = T(1) / static_cast<T>(scenes.size());
  const T lr = static_cast<T>(options.lr);

  std::vector<TrainStep> trace;
  trace.reserve(options.steps);
  for (std::size_t step = 0; step < options.steps; ++step) {
    params.zero_grad();
    TrainStep row{step};
    for (const auto& scene : prepared) {
      Tape<T> tape;
      LossTerms<T> loss;
      try {
        const PipelineOutputs<T> out = pipeline_forward(tape, scene.batch, scene.image, config, params);
        loss = rpn_loss(out.detection, scene.targets, config.anchors, config.loss);
      } catch (const NumericError& e) {
        throw TrainingError(std::string("forward pass failed: ") + e.what(), step);
      }
      accumulate(row, loss, scenes.size());
      if (!std::isfinite(row.total)) throw TrainingError("loss became non-finite", step);
      tape.backward(scale(loss.total, inv_scenes));
    }
    trace.push_back(row);
    for (auto& [name, entry] : params.entries()) {
      auto v = entry.value.data();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * entry.grad[i];
      if (!entry.value.all_finite()) throw TrainingError("parameter " + name + " became non-finite", step);
    }
  }
  return trace;
}

std::string trace_to_csv(std::span<const TrainStep> trace) {
  std::ostringstream out;
  out.precision(9);
  out << "step,total,cls,reg,dir\n";
  for (const TrainStep& s : trace) {
    out << s.step << ',' << s.total << ',' << s.cls << ',' << s.reg << ',' << s.dir << '\n';
  }
  return out.str();
}

template <Real T>
RecallReport evaluate_recall(std::span<const SyntheticScene> scenes, const PipelineConfig& config,
                             ParamStore<T>& params, double score_threshold, double nms_iou, double match_iou,
                             std::size_t workers) {
  config.validate();
  const std::vector<Box3d> anchors =
      make_anchors(config.anchors, config.voxel.range, config.streams.lidar_out.h, config.streams.lidar_out.w);
  const auto prepared = prepare<T>(scenes, config, anchors, workers);
  RecallReport report;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    Tape<T> tape(/*record=*/false);
    const PipelineOutputs<T> out = pipeline_forward(tape, prepared[s].batch, prepared[s].image, config, params);
    const auto kept = nms(decode_detections(out.detection, anchors, config.anchors, score_threshold), nms_iou);
    const double r = recall_at_iou(kept, scenes[s].boxes, match_iou);
    report.gt_boxes += scenes[s].boxes.size();
    report.matched += static_cast<std::size_t>(std::llround(r * static_cast<double>(scenes[s].boxes.size())));
    report.detections += kept.size();
  }
  report.recall = report.gt_boxes == 0
                      ? 1.0
                      : static_cast<double>(report.matched) / static_cast<double>(report.gt_boxes);
  return report;
}

SceneOptions scene_options_for(const PipelineConfig& config) {
  SceneOptions o;
  o.range = config.voxel.range;
  o.mean_size = config.anchors.size;
  o.ground_z = config.anchors.z_center - config.anchors.size[2] / 2;
  const double span = std::min(o.range.extent(0), o.range.extent(1));
  o.border = std::min(1.0, span / 16);
  o.gap = std::min(0.5, span / 16);
  return o;
}

// ---------------------------------------------------------------------------
// Gradient check driver

namespace {

Tensor<double> random_like(const Shape& dims, SplitMix64& rng) {
  Tensor<double> t(dims);
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

Var<double> readout(Var<double> x, const Tensor<double>& weights) {
  return sum(mul(x, x.tape().constant(weights)));
}

}  // namespace

std::vector<GradcheckStage> pipeline_gradcheck(const PipelineConfig& config, const GradCheckOptions& options) {
  config.validate();
  ParamStore<double> params = init_pipeline_params<double>(config);
  // Move off the zero-bias point so no ReLU sits exactly on its kink.
  SplitMix64 jitter(config.seed ^ 0xC0FFEEull);
  for (auto& [name, entry] : params.entries()) {
    for (auto& v : entry.value.data()) v += jitter.uniform(-0.1, 0.1);
  }

  SceneOptions scene_opts = scene_options_for(config);
  scene_opts.points_per_object = 12;
  const SyntheticScene scene = synth_scene(config.seed, 1, 6, scene_opts);
  const VoxelBatch batch = voxelize(scene.cloud, config.voxel, 1);
  const Tensor<double> image = config.streams.image_source == ImageSource::kStandInEncoder
                                   ? scene_image<double>(config, 0)
                                   : random_like(config.streams.image_out.shape(), jitter);
  const std::vector<Box3d> anchors =
      make_anchors(config.anchors, config.voxel.range, config.streams.lidar_out.h, config.streams.lidar_out.w);
  const AnchorTargets targets = assign_targets(anchors, scene.boxes, config.anchors);

  // Intermediate values at the check point, used as fixed inputs of the per-module stages.
  Tensor<double> bev_value, f_lidar_value, f_image_value, fused_value;
  Shape vlpm_dims;
  {
    Tape<double> tape(/*record=*/false);
    const auto out = pipeline_forward(tape, batch, image, config, params);
    vlpm_dims = out.voxel_features.dims();
    bev_value = out.bev.value();
    f_lidar_value = out.f_lidar.value();
    f_image_value = out.f_image.value();
    fused_value = out.fusion.fused.value();
  }
  const Tensor<double> r_vlpm = random_like(vlpm_dims, jitter);
  const Tensor<double> r_lidar = random_like(f_lidar_value.dims(), jitter);
  const Tensor<double> r_image = random_like(f_image_value.dims(), jitter);
  const Tensor<double> r_fused = random_like(fused_value.dims(), jitter);

  struct Stage {
    std::string name;
    std::vector<std::string> prefixes;
    Objective<double> objective;
  };
  std::vector<Stage> stages;
  if (!config.vlpm.mean_baseline) {
    stages.push_back({"vlpm", {"pam", "dwm."}, [&](Tape<double>& tape, ParamStore<double>& p) {
                        return readout(vlpm_forward(tape, batch, config.vlpm, p), r_vlpm);
                      }});
  }
  stages.push_back({"streams", {"bev.", "image."}, [&](Tape<double>& tape, ParamStore<double>& p) {
                      Var<double> lidar = readout(bev_encode(tape.constant(bev_value), config.streams, p), r_lidar);
                      if (config.streams.image_source != ImageSource::kStandInEncoder) return lidar;
                      return add(lidar, readout(image_encode(tape.constant(image), config.streams, p), r_image));
                    }});
  stages.push_back({"mffm", {"mffm."}, [&](Tape<double>& tape, ParamStore<double>& p) {
                      const auto out =
                          mffm_forward(tape.constant(f_lidar_value), tape.constant(f_image_value), config.mffm, p);
                      return readout(out.fused, r_fused);
                    }});
  stages.push_back({"head", {"head."}, [&](Tape<double>& tape, ParamStore<double>& p) {
                      const auto det = head_forward(tape.constant(fused_value), config.anchors, p);
                      return rpn_loss(det, targets, config.anchors, config.loss).total;
                    }});
  stages.push_back({"end_to_end", {}, [&](Tape<double>& tape, ParamStore<double>& p) {
                      const auto out = pipeline_forward(tape, batch, image, config, p);
                      return rpn_loss(out.detection, targets, config.anchors, config.loss).total;
                    }});

  std::vector<GradcheckStage> results;
  for (const Stage& stage : stages) {
    GradCheckOptions opts = options;
    if (opts.prefixes.empty()) {
      opts.prefixes = stage.prefixes;
    } else if (!stage.prefixes.empty()) {
      // Intersect: keep the stage's prefixes that some requested prefix selects.
      std::vector<std::string> keep;
      for (const auto& mine : stage.prefixes) {
        for (const auto& wanted : options.prefixes) {
          if (mine.rfind(wanted, 0) == 0 || wanted.rfind(mine, 0) == 0) {
            keep.push_back(wanted.size() > mine.size() ? wanted : mine);
          }
        }
      }
      if (keep.empty()) continue;
      opts.prefixes = keep;
    }
    results.push_back({stage.name, grad_check(stage.objective, params, opts)});
  }
  return results;
}

std::string gradcheck_to_csv(std::span<const GradcheckStage> stages, double tolerance) {
  std::ostringstream out;
  out.precision(6);
  out << "stage,parameter,scalars,max_rel_error,max_abs_error,pass\n";
  for (const auto& s : stages) {
    for (const auto& e : s.report.entries) {
      out << s.stage << ',' << e.name << ',' << e.scalars << ',' << e.max_rel_error << ',' << e.max_abs_error << ','
          << (e.max_rel_error < tolerance ? "true" : "false") << '\n';
    }
  }
  return out.str();
}

#define MMFUSION_INSTANTIATE(T)                                                                               \
  template ParamStore<T> init_pipeline_params(const PipelineConfig&);                                         \
  template Tensor<T> scene_image(const PipelineConfig&, std::size_t);                                         \
  template Var<T> lidar_stream(Tape<T>&, const VoxelBatch&, const PipelineConfig&, ParamStore<T>&, Var<T>*,   \
                               Var<T>*);                                                                      \
  template Var<T> image_stream(Tape<T>&, const Tensor<T>&, const PipelineConfig&, ParamStore<T>&);            \
  template PipelineOutputs<T> pipeline_forward(Tape<T>&, const VoxelBatch&, const Tensor<T>&,                 \
                                               const PipelineConfig&, ParamStore<T>&);                        \
  template std::vector<TrainStep> train_toy(std::span<const SyntheticScene>, const PipelineConfig&,           \
                                            ParamStore<T>&, const TrainOptions&);                             \
  template TrainStep evaluate_loss(std::span<const SyntheticScene>, const PipelineConfig&, ParamStore<T>&,      \
                                   std::size_t);                                                             \
  template RecallReport evaluate_recall(std::span<const SyntheticScene>, const PipelineConfig&, ParamStore<T>&, \
                                        double, double, double, std::size_t);

MMFUSION_INSTANTIATE(float)
MMFUSION_INSTANTIATE(double)

#undef MMFUSION_INSTANTIATE

}  // namespace mmfusion
