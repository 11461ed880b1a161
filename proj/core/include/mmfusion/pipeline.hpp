#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmfusion/gradcheck.hpp"
#include "mmfusion/head.hpp"
#include "mmfusion/mffm.hpp"
#include "mmfusion/streams.hpp"
#include "mmfusion/vlpm.hpp"
#include "mmfusion/voxelizer.hpp"

namespace mmfusion {

enum class Precision { kF32, kF64 };

std::string to_string(Precision p);
Precision parse_precision(std::string_view text);

struct PipelineConfig {
  VoxelConfig voxel{};
  VlpmConfig vlpm{};
  StreamConfig streams{};
  MffmConfig mffm{};
  AnchorConfig anchors{};
  LossWeights loss{};
  /// Seeds parameter initialisation and the stand-in images of synthetic frames.
  std::uint64_t seed = 0;
  /// Scales the +-1/sqrt(fan_in) bound of weight initialisation.
  double init_gain = 1.0;
  Precision precision = Precision::kF32;

  /// Every per-module check plus cross-module consistency.
  void validate() const;

  /// Full-size defaults, with point coordinates mapped onto [1, 3] over the range.
  static PipelineConfig defaults();
  /// Gradient-check size: 8x8x4 grid, d_v = 4, C = 8, 3x3 tokens.
  static PipelineConfig tiny();
  /// Small enough to train for hundreds of steps on one core: 64x64x4 grid, C = 16, 32x32
  /// anchor map, softmax-normalised point attention, init gain 2, classification prior 0.01
  /// and head weights scaled by 0.01.
  static PipelineConfig toy();
};

nlohmann::json config_to_json(const PipelineConfig& config);
/// Missing keys keep the values of the preset named by "preset" (default, tiny or toy;
/// default if absent). Unknown keys and ill-typed values raise ConfigError.
PipelineConfig config_from_json(const nlohmann::json& j);
PipelineConfig load_config(const std::filesystem::path& path);
void save_config(const PipelineConfig& config, const std::filesystem::path& path);

template <Real T>
ParamStore<T> init_pipeline_params(const PipelineConfig& config);

/// Stand-in camera image paired with a synthetic scene.
template <Real T>
Tensor<T> scene_image(const PipelineConfig& config, std::size_t scene_index);

template <Real T>
struct PipelineOutputs {
  Var<T> voxel_features;  // K x d
  Var<T> bev;             // d x grid.y x grid.x
  Var<T> f_lidar;
  Var<T> f_image;
  MffmOutput<T> fusion;
  DetectionOutput<T> detection;
};

/// LiDAR branch up to the BEV feature map f_L.
template <Real T>
Var<T> lidar_stream(Tape<T>& tape, const VoxelBatch& batch, const PipelineConfig& config, ParamStore<T>& params,
                    Var<T>* voxel_features = nullptr, Var<T>* bev = nullptr);

/// Camera branch: the stand-in encoder over an image, or precomputed features passed through.
template <Real T>
Var<T> image_stream(Tape<T>& tape, const Tensor<T>& image_or_features, const PipelineConfig& config,
                    ParamStore<T>& params);

template <Real T>
PipelineOutputs<T> pipeline_forward(Tape<T>& tape, const VoxelBatch& batch, const Tensor<T>& image_or_features,
                                    const PipelineConfig& config, ParamStore<T>& params);

struct TrainOptions {
  std::size_t steps = 500;
  double lr = 1e-2;
  std::size_t workers = 1;
};

struct TrainStep {
  std::size_t step = 0;
  double total = 0;
  double cls = 0;
  double reg = 0;
  double dir = 0;
};

/// Mean losses over scenes at the current parameters.
template <Real T>
TrainStep evaluate_loss(std::span<const SyntheticScene> scenes, const PipelineConfig& config, ParamStore<T>& params,
                        std::size_t workers = 1);

/// Plain full-batch gradient descent; the loss is the mean over scenes. Each trace row
/// holds the losses before that step's update. A non-finite loss or a numeric failure in
/// the forward pass raises TrainingError with the step index.
template <Real T>
std::vector<TrainStep> train_toy(std::span<const SyntheticScene> scenes, const PipelineConfig& config,
                                 ParamStore<T>& params, const TrainOptions& options);

std::string trace_to_csv(std::span<const TrainStep> trace);

struct RecallReport {
  double recall = 0;
  std::size_t gt_boxes = 0;
  std::size_t matched = 0;
  std::size_t detections = 0;
};

/// Decode, greedy NMS, then recall over all scenes.
template <Real T>
RecallReport evaluate_recall(std::span<const SyntheticScene> scenes, const PipelineConfig& config,
                             ParamStore<T>& params, double score_threshold, double nms_iou, double match_iou,
                             std::size_t workers = 1);

/// Scene options whose range follows the config and whose objects match the anchor size.
SceneOptions scene_options_for(const PipelineConfig& config);

struct GradcheckStage {
  std::string stage;
  GradCheckReport report;
};

/// Finite-difference check of every module on its own (fixed inputs, random linear
/// readout) and of the whole pipeline through the detection loss.
std::vector<GradcheckStage> pipeline_gradcheck(const PipelineConfig& config, const GradCheckOptions& options);
std::string gradcheck_to_csv(std::span<const GradcheckStage> stages, double tolerance);

}  // namespace mmfusion
