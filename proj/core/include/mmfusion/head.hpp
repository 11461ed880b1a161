#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mmfusion/autograd.hpp"
#include "mmfusion/dataio.hpp"

namespace mmfusion {

inline constexpr std::size_t kBoxCodeSize = 7;

struct AnchorConfig {
  /// One anchor per yaw per BEV cell.
  std::vector<double> yaws{0.0, 1.5707963267948966};
  std::array<double, 3> size{3.9, 1.6, 1.56};
  double z_center = -1.0;
  std::size_t num_classes = 1;
  double match_iou = 0.6;
  double ignore_iou = 0.45;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double smooth_l1_beta = 1.0 / 9.0;
  /// Initial foreground probability of the classification branch; its bias starts at
  /// log(prior / (1 - prior)), so 0.5 means a zero bias.
  double cls_prior = 0.5;
  /// Multiplies the initial weights of the three head layers. Small values start every
  /// prediction near the prior and the zero box residual.
  double head_init_scale = 1.0;

  void validate() const;
  std::size_t anchors_per_cell() const { return yaws.size(); }
};

struct LossWeights {
  double alpha = 2.0;
  double beta = 0.2;

  void validate() const;
};

template <Real T>
struct DetectionOutput {
  Var<T> cls;  // (A * classes) x H x W
  Var<T> box;  // (A * 7) x H x W
  Var<T> dir;  // (A * 2) x H x W
};

template <Real T>
void init_head_params(ParamStore<T>& params, const AnchorConfig& config, std::size_t channels);

template <Real T>
DetectionOutput<T> head_forward(Var<T> fused, const AnchorConfig& config, ParamStore<T>& params);

/// Anchors at every cell centre of an h x w BEV map spanning the range (rows follow y,
/// columns follow x). Anchor ((row * w + col) * A + a) pairs with output channel a.
std::vector<Box3d> make_anchors(const AnchorConfig& config, const RangeSpec& range, std::size_t h, std::size_t w);

/// IoU of the axis-aligned BEV footprints (the rotated boxes' enclosing rectangles).
double standup_bev_iou(const Box3d& a, const Box3d& b);
/// IoU of the rotated BEV footprints.
double rotated_bev_iou(const Box3d& a, const Box3d& b);

enum class AnchorLabel : std::int8_t { kIgnore = -1, kNegative = 0, kPositive = 1 };

struct AnchorTargets {
  std::vector<AnchorLabel> labels;
  std::vector<std::array<double, kBoxCodeSize>> residuals;  // meaningful for positives
  std::vector<std::uint8_t> dir_bins;                        // 1 when the gt yaw >= 0
  std::vector<std::int32_t> matched_gt;                      // -1 when unmatched
  std::vector<std::uint32_t> gt_class;
  std::size_t positives = 0;
};

std::array<double, kBoxCodeSize> encode_box(const Box3d& gt, const Box3d& anchor);
/// Inverse of encode_box; the yaw is placed in [0, pi) for dir bin 1 and [-pi, 0) for bin 0.
Box3d decode_box(std::span<const double> code, const Box3d& anchor, std::uint8_t dir_bin);

AnchorTargets assign_targets(std::span<const Box3d> anchors, std::span<const Box3d> gt, const AnchorConfig& config);

template <Real T>
struct LossTerms {
  Var<T> total;
  Var<T> cls;
  Var<T> reg;
  Var<T> dir;
};

/// Sigmoid focal loss over positive and negative anchors, divided by max(1, positives).
template <Real T>
Var<T> focal_loss(Var<T> cls, const AnchorTargets& targets, const AnchorConfig& config);
/// Smooth-L1 over the 7 residuals of positive anchors, divided by max(1, positives).
template <Real T>
Var<T> box_loss(Var<T> box, const AnchorTargets& targets, const AnchorConfig& config);
/// Two-way softmax cross-entropy over positive anchors, divided by max(1, positives).
template <Real T>
Var<T> direction_loss(Var<T> dir, const AnchorTargets& targets, const AnchorConfig& config);

/// total = cls + alpha * reg + beta * dir, evaluated in that order.
template <Real T>
Var<T> combine_losses(Var<T> cls, Var<T> reg, Var<T> dir, const LossWeights& weights);
template <Real T>
T combine_losses(T cls, T reg, T dir, const LossWeights& weights);

template <Real T>
LossTerms<T> rpn_loss(const DetectionOutput<T>& out, const AnchorTargets& targets, const AnchorConfig& config,
                      const LossWeights& weights);

struct Detection {
  Box3d box;
  double score = 0;
  std::size_t anchor = 0;
};

/// Decodes every anchor whose best class score reaches score_threshold.
template <Real T>
std::vector<Detection> decode_detections(const DetectionOutput<T>& out, std::span<const Box3d> anchors,
                                         const AnchorConfig& config, double score_threshold);

/// Greedy NMS by descending score (ties: lower anchor index first) on rotated BEV IoU.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold);

/// Fraction of gt boxes matched one-to-one by a detection with rotated BEV IoU >= threshold.
/// Detections are consumed in descending score order. Empty gt gives 1.
double recall_at_iou(std::span<const Detection> detections, std::span<const Box3d> gt, double iou_threshold);

}  // namespace mmfusion
