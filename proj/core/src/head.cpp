#include "mmfusion/head.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>

namespace mmfusion {

void AnchorConfig::validate() const {
  if (yaws.empty()) throw ConfigError("anchor config needs at least one yaw");
  for (double s : size) {
    if (!(s > 0) || !std::isfinite(s)) throw ConfigError("anchor sizes must be positive and finite");
  }
  if (num_classes == 0) throw ConfigError("anchor config needs at least one class");
  if (!(match_iou > 0 && match_iou < 1) || !(ignore_iou > 0 && ignore_iou < 1)) {
    throw ConfigError("IoU thresholds must lie in (0, 1)");
  }
  if (!(match_iou > ignore_iou)) throw ConfigError("match IoU must exceed ignore IoU");
  if (!(focal_alpha >= 0 && focal_alpha <= 1)) throw ConfigError("focal alpha must lie in [0, 1]");
  if (!(focal_gamma >= 0)) throw ConfigError("focal gamma must be non-negative");
  if (!(smooth_l1_beta > 0)) throw ConfigError("smooth-L1 beta must be positive");
  if (!(cls_prior > 0 && cls_prior < 1)) throw ConfigError("classification prior must lie in (0, 1)");
  if (!(head_init_scale > 0) || !std::isfinite(head_init_scale)) {
    throw ConfigError("head init scale must be positive and finite");
  }
}

void LossWeights::validate() const {
  if (!(alpha >= 0) || !(beta >= 0) || !std::isfinite(alpha) || !std::isfinite(beta)) {
    throw ConfigError("loss weights must be non-negative and finite");
  }
}

template <Real T>
void init_head_params(ParamStore<T>& params, const AnchorConfig& config, std::size_t channels) {
  config.validate();
  const std::size_t a = config.anchors_per_cell();
  add_linear_params(params, "head.cls", channels, a * config.num_classes);
  params.value("head.cls.b").fill(static_cast<T>(std::log(config.cls_prior / (1 - config.cls_prior))));
  add_linear_params(params, "head.box", channels, a * kBoxCodeSize);
  add_linear_params(params, "head.dir", channels, a * 2);
  for (const char* name : {"head.cls.w", "head.box.w", "head.dir.w"}) {
    for (auto& v : params.value(name).data()) v *= static_cast<T>(config.head_init_scale);
  }
}

template <Real T>
DetectionOutput<T> head_forward(Var<T> fused, const AnchorConfig& config, ParamStore<T>& params) {
  config.validate();
  if (fused.value().rank() != 3) throw ShapeError("head input must be C x H x W, got " + shape_string(fused.dims()));
  return {conv1x1(fused, params, "head.cls"), conv1x1(fused, params, "head.box"), conv1x1(fused, params, "head.dir")};
}

std::vector<Box3d> make_anchors(const AnchorConfig& config, const RangeSpec& range, std::size_t h, std::size_t w) {
  config.validate();
  if (h == 0 || w == 0) throw ConfigError("anchor map must have at least one cell");
  const double step_x = range.extent(0) / static_cast<double>(w);
  const double step_y = range.extent(1) / static_cast<double>(h);
  std::vector<Box3d> anchors;
  anchors.reserve(h * w * config.anchors_per_cell());
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      for (double yaw : config.yaws) {
        Box3d box;
        box.center = {range.x[0] + (static_cast<double>(c) + 0.5) * step_x,
                      range.y[0] + (static_cast<double>(r) + 0.5) * step_y, config.z_center};
        box.size = config.size;
        box.yaw = yaw;
        anchors.push_back(box);
      }
    }
  }
  return anchors;
}

double standup_bev_iou(const Box3d& a, const Box3d& b) {
  const auto ba = a.bev_bounds();
  const auto bb = b.bev_bounds();
  const double iw = std::min(ba[2], bb[2]) - std::max(ba[0], bb[0]);
  const double ih = std::min(ba[3], bb[3]) - std::max(ba[1], bb[1]);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double area_a = (ba[2] - ba[0]) * (ba[3] - ba[1]);
  const double area_b = (bb[2] - bb[0]) * (bb[3] - bb[1]);
  return inter / (area_a + area_b - inter);
}

namespace {

using Vec2 = std::array<double, 2>;

std::vector<Vec2> footprint(const Box3d& box) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double hl = box.size[0] / 2, hw = box.size[1] / 2;
  std::vector<Vec2> pts;
  // Counter-clockwise.
  for (auto [u, v] : {std::pair{hl, hw}, std::pair{-hl, hw}, std::pair{-hl, -hw}, std::pair{hl, -hw}}) {
    pts.push_back({box.center[0] + u * c - v * s, box.center[1] + u * s + v * c});
  }
  return pts;
}

double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
}

double polygon_area(const std::vector<Vec2>& poly) {
  double area = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % poly.size()];
    area += p[0] * q[1] - q[0] * p[1];
  }
  return std::abs(area) / 2;
}

// Sutherland-Hodgman clip of `subject` by the convex counter-clockwise `clip`.
std::vector<Vec2> clip_polygon(std::vector<Vec2> subject, const std::vector<Vec2>& clip) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Vec2& a = clip[e];
    const Vec2& b = clip[(e + 1) % clip.size()];
    std::vector<Vec2> out;
    for (std::size_t i = 0; i < subject.size(); ++i) {
      const Vec2& p = subject[i];
      const Vec2& q = subject[(i + 1) % subject.size()];
      const double dp = cross(a, b, p), dq = cross(a, b, q);
      if (dp >= 0) out.push_back(p);
      if ((dp >= 0) != (dq >= 0)) {
        const double t = dp / (dp - dq);
        out.push_back({p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])});
      }
    }
    subject = std::move(out);
  }
  return subject;
}

double wrap_half_pi(double angle) {
  constexpr double pi = std::numbers::pi;
  return angle - pi * std::floor((angle + pi / 2) / pi);
}

}  // namespace

double rotated_bev_iou(const Box3d& a, const Box3d& b) {
  const double area_a = a.size[0] * a.size[1];
  const double area_b = b.size[0] * b.size[1];
  const double inter = polygon_area(clip_polygon(footprint(a), footprint(b)));
  const double uni = area_a + area_b - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::array<double, kBoxCodeSize> encode_box(const Box3d& gt, const Box3d& anchor) {
  const double diag = std::hypot(anchor.size[0], anchor.size[1]);
  return {(gt.center[0] - anchor.center[0]) / diag,
          (gt.center[1] - anchor.center[1]) / diag,
          (gt.center[2] - anchor.center[2]) / anchor.size[2],
          std::log(gt.size[0] / anchor.size[0]),
          std::log(gt.size[1] / anchor.size[1]),
          std::log(gt.size[2] / anchor.size[2]),
          wrap_half_pi(gt.yaw - anchor.yaw)};
}

Box3d decode_box(std::span<const double> code, const Box3d& anchor, std::uint8_t dir_bin) {
  if (code.size() != kBoxCodeSize) throw ShapeError("box code must have 7 values");
  constexpr double pi = std::numbers::pi;
  const double diag = std::hypot(anchor.size[0], anchor.size[1]);
  Box3d box;
  box.center = {anchor.center[0] + code[0] * diag, anchor.center[1] + code[1] * diag,
                anchor.center[2] + code[2] * anchor.size[2]};
  box.size = {anchor.size[0] * std::exp(code[3]), anchor.size[1] * std::exp(code[4]),
              anchor.size[2] * std::exp(code[5])};
  const double yaw = anchor.yaw + code[6];
  const double base = yaw - pi * std::floor(yaw / pi);
  box.yaw = dir_bin ? base : base - pi;
  box.class_id = anchor.class_id;
  return box;
}

AnchorTargets assign_targets(std::span<const Box3d> anchors, std::span<const Box3d> gt, const AnchorConfig& config) {
  config.validate();
  if (anchors.empty()) throw ConfigError("assign_targets needs at least one anchor");
  const std::size_t n = anchors.size();
  AnchorTargets t;
  t.labels.assign(n, AnchorLabel::kNegative);
  t.residuals.assign(n, {});
  t.dir_bins.assign(n, 0);
  t.matched_gt.assign(n, -1);
  t.gt_class.assign(n, 0);
  if (gt.empty()) return t;

  for (const Box3d& g : gt) {
    if (g.class_id < 0 || static_cast<std::size_t>(g.class_id) >= config.num_classes) {
      throw DomainError("gt class " + std::to_string(g.class_id) + " outside the configured " +
                        std::to_string(config.num_classes) + " classes");
    }
  }

  std::vector<double> best_iou(n, 0.0);
  std::vector<std::int32_t> best_gt(n, -1);
  std::vector<double> gt_best_iou(gt.size(), 0.0);
  std::vector<std::size_t> gt_best_anchor(gt.size(), n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double iou = standup_bev_iou(anchors[i], gt[g]);
      // Strict comparisons keep the lowest index on ties.
      if (iou > best_iou[i]) {
        best_iou[i] = iou;
        best_gt[i] = static_cast<std::int32_t>(g);
      }
      if (iou > gt_best_iou[g]) {
        gt_best_iou[g] = iou;
        gt_best_anchor[g] = i;
      }
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (best_iou[i] >= config.match_iou) {
      t.labels[i] = AnchorLabel::kPositive;
      t.matched_gt[i] = best_gt[i];
    } else if (best_iou[i] > config.ignore_iou) {
      t.labels[i] = AnchorLabel::kIgnore;
    }
  }
  std::vector<bool> forced(n, false);
  for (std::size_t g = 0; g < gt.size(); ++g) {
    const std::size_t i = gt_best_anchor[g];
    if (i == n || forced[i]) continue;
    forced[i] = true;
    t.labels[i] = AnchorLabel::kPositive;
    t.matched_gt[i] = static_cast<std::int32_t>(g);
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (t.labels[i] != AnchorLabel::kPositive) continue;
    const Box3d& g = gt[static_cast<std::size_t>(t.matched_gt[i])];
    t.residuals[i] = encode_box(g, anchors[i]);
    t.dir_bins[i] = g.yaw >= 0 ? 1 : 0;
    t.gt_class[i] = static_cast<std::uint32_t>(g.class_id);
    ++t.positives;
  }
  return t;
}

namespace {

struct HeadLayout {
  std::size_t anchors_per_cell;
  std::size_t h;
  std::size_t w;

  // Flat offset of channel `slot` of anchor `index` in a (A * width) x H x W map.
  std::size_t offset(std::size_t index, std::size_t width, std::size_t slot) const {
    const std::size_t a = index % anchors_per_cell;
    const std::size_t cell = index / anchors_per_cell;
    return (a * width + slot) * h * w + cell;
  }
};

template <Real T>
HeadLayout check_layout(Var<T> x, std::size_t width, const AnchorTargets& targets, const AnchorConfig& config,
                        const char* what) {
  const std::size_t a = config.anchors_per_cell();
  const Tensor<T>& v = x.value();
  if (v.rank() != 3 || v.dim(0) != a * width) {
    throw ShapeError(std::string(what) + " output " + shape_string(v.dims()) + " does not have " +
                     std::to_string(a * width) + " channels");
  }
  if (v.dim(1) * v.dim(2) * a != targets.labels.size()) {
    throw ShapeError(std::string(what) + " output " + shape_string(v.dims()) + " does not match " +
                     std::to_string(targets.labels.size()) + " anchor targets");
  }
  return {a, v.dim(1), v.dim(2)};
}

template <Real T>
Var<T> scalar_with_gradient(Var<T> x, double loss, std::shared_ptr<Tensor<T>> grad) {
  return x.tape().record(Tensor<T>::scalar(static_cast<T>(loss)), {x},
                         [grad](const Tensor<T>& g, std::span<Tensor<T>*> in) {
                           auto s = in[0]->data();
                           const T scale = g[0];
                           for (std::size_t i = 0; i < s.size(); ++i) s[i] += scale * (*grad)[i];
                         });
}

// log(1 + e^x) without overflow.
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double normaliser(const AnchorTargets& t) { return static_cast<double>(std::max<std::size_t>(t.positives, 1)); }

}  // namespace

template <Real T>
Var<T> focal_loss(Var<T> cls, const AnchorTargets& targets, const AnchorConfig& config) {
  const std::size_t k = config.num_classes;
  const HeadLayout layout = check_layout(cls, k, targets, config, "classification");
  const Tensor<T>& x = cls.value();
  auto grad = std::make_shared<Tensor<T>>(x.dims());
  const double alpha = config.focal_alpha, gamma = config.focal_gamma, norm = normaliser(targets);
  double loss = 0;
  for (std::size_t i = 0; i < targets.labels.size(); ++i) {
    if (targets.labels[i] == AnchorLabel::kIgnore) continue;
    const bool pos = targets.labels[i] == AnchorLabel::kPositive;
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t off = layout.offset(i, k, c);
      const double z = static_cast<double>(x[off]);
      const double p = 1.0 / (1.0 + std::exp(-z));
      if (pos && targets.gt_class[i] == c) {
        const double log_p = -softplus(-z);
        const double q = 1.0 - p;
        loss += -alpha * std::pow(q, gamma) * log_p;
        (*grad)[off] = static_cast<T>(alpha * std::pow(q, gamma) * (gamma * p * log_p - q) / norm);
      } else {
        const double log_q = -softplus(z);
        loss += -(1 - alpha) * std::pow(p, gamma) * log_q;
        (*grad)[off] = static_cast<T>(-(1 - alpha) * std::pow(p, gamma) * (gamma * (1 - p) * log_q - p) / norm);
      }
    }
  }
  if (!std::isfinite(loss)) throw NumericError("classification loss is not finite");
  return scalar_with_gradient(cls, loss / norm, grad);
}

template <Real T>
Var<T> box_loss(Var<T> box, const AnchorTargets& targets, const AnchorConfig& config) {
  const HeadLayout layout = check_layout(box, kBoxCodeSize, targets, config, "box");
  const Tensor<T>& x = box.value();
  auto grad = std::make_shared<Tensor<T>>(x.dims());
  const double beta = config.smooth_l1_beta, norm = normaliser(targets);
  double loss = 0;
  for (std::size_t i = 0; i < targets.labels.size(); ++i) {
    if (targets.labels[i] != AnchorLabel::kPositive) continue;
    for (std::size_t j = 0; j < kBoxCodeSize; ++j) {
      const std::size_t off = layout.offset(i, kBoxCodeSize, j);
      const double d = static_cast<double>(x[off]) - targets.residuals[i][j];
      const double ad = std::abs(d);
      if (ad < beta) {
        loss += 0.5 * d * d / beta;
        (*grad)[off] = static_cast<T>(d / beta / norm);
      } else {
        loss += ad - 0.5 * beta;
        (*grad)[off] = static_cast<T>((d > 0 ? 1.0 : -1.0) / norm);
      }
    }
  }
  if (!std::isfinite(loss)) throw NumericError("box regression loss is not finite");
  return scalar_with_gradient(box, loss / norm, grad);
}

template <Real T>
Var<T> direction_loss(Var<T> dir, const AnchorTargets& targets, const AnchorConfig& config) {
  const HeadLayout layout = check_layout(dir, 2, targets, config, "direction");
  const Tensor<T>& x = dir.value();
  auto grad = std::make_shared<Tensor<T>>(x.dims());
  const double norm = normaliser(targets);
  double loss = 0;
  for (std::size_t i = 0; i < targets.labels.size(); ++i) {
    if (targets.labels[i] != AnchorLabel::kPositive) continue;
    const std::size_t o0 = layout.offset(i, 2, 0), o1 = layout.offset(i, 2, 1);
    const double z0 = static_cast<double>(x[o0]), z1 = static_cast<double>(x[o1]);
    // p1 = sigmoid(z1 - z0); CE = softplus of the wrong-minus-right margin.
    const double margin = z1 - z0;
    const double p1 = 1.0 / (1.0 + std::exp(-margin));
    const bool bin1 = targets.dir_bins[i] != 0;
    loss += bin1 ? softplus(-margin) : softplus(margin);
    const double d1 = (p1 - (bin1 ? 1.0 : 0.0)) / norm;
    (*grad)[o1] = static_cast<T>(d1);
    (*grad)[o0] = static_cast<T>(-d1);
  }
  if (!std::isfinite(loss)) throw NumericError("direction loss is not finite");
  return scalar_with_gradient(dir, loss / norm, grad);
}

template <Real T>
Var<T> combine_losses(Var<T> cls, Var<T> reg, Var<T> dir, const LossWeights& weights) {
  weights.validate();
  return add(add(cls, scale(reg, static_cast<T>(weights.alpha))), scale(dir, static_cast<T>(weights.beta)));
}

template <Real T>
T combine_losses(T cls, T reg, T dir, const LossWeights& weights) {
  weights.validate();
  const T weighted_reg = static_cast<T>(weights.alpha) * reg;
  const T weighted_dir = static_cast<T>(weights.beta) * dir;
  return (cls + weighted_reg) + weighted_dir;
}

template <Real T>
LossTerms<T> rpn_loss(const DetectionOutput<T>& out, const AnchorTargets& targets, const AnchorConfig& config,
                      const LossWeights& weights) {
  Var<T> cls = focal_loss(out.cls, targets, config);
  Var<T> reg = box_loss(out.box, targets, config);
  Var<T> dir = direction_loss(out.dir, targets, config);
  return {combine_losses(cls, reg, dir, weights), cls, reg, dir};
}

template <Real T>
std::vector<Detection> decode_detections(const DetectionOutput<T>& out, std::span<const Box3d> anchors,
                                         const AnchorConfig& config, double score_threshold) {
  AnchorTargets shape_only;
  shape_only.labels.resize(anchors.size());
  const std::size_t k = config.num_classes;
  const HeadLayout layout = check_layout(out.cls, k, shape_only, config, "classification");
  check_layout(out.box, kBoxCodeSize, shape_only, config, "box");
  check_layout(out.dir, 2, shape_only, config, "direction");
  const Tensor<T>& cls = out.cls.value();
  const Tensor<T>& box = out.box.value();
  const Tensor<T>& dir = out.dir.value();
  std::vector<Detection> dets;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    double best = -1;
    std::size_t best_class = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(cls[layout.offset(i, k, c)])));
      if (p > best) {
        best = p;
        best_class = c;
      }
    }
    if (best < score_threshold) continue;
    std::array<double, kBoxCodeSize> code{};
    for (std::size_t j = 0; j < kBoxCodeSize; ++j) code[j] = static_cast<double>(box[layout.offset(i, kBoxCodeSize, j)]);
    const std::uint8_t bin = dir[layout.offset(i, 2, 1)] > dir[layout.offset(i, 2, 0)] ? 1 : 0;
    Detection d{decode_box(code, anchors[i], bin), best, i};
    d.box.class_id = static_cast<int>(best_class);
    dets.push_back(d);
  }
  return dets;
}

namespace {

void sort_by_score(std::vector<Detection>& dets) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.anchor < b.anchor;
  });
}

}  // namespace

std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold) {
  sort_by_score(detections);
  std::vector<Detection> kept;
  for (const Detection& d : detections) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return rotated_bev_iou(k.box, d.box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

double recall_at_iou(std::span<const Detection> detections, std::span<const Box3d> gt, double iou_threshold) {
  if (gt.empty()) return 1.0;
  std::vector<Detection> dets(detections.begin(), detections.end());
  sort_by_score(dets);
  std::vector<bool> taken(gt.size(), false);
  std::size_t hits = 0;
  for (const Detection& d : dets) {
    double best = -1;
    std::size_t best_g = gt.size();
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (taken[g]) continue;
      const double iou = rotated_bev_iou(d.box, gt[g]);
      if (iou >= iou_threshold && iou > best) {
        best = iou;
        best_g = g;
      }
    }
    if (best_g != gt.size()) {
      taken[best_g] = true;
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(gt.size());
}

#define MMFUSION_INSTANTIATE(T)                                                                               \
  template void init_head_params(ParamStore<T>&, const AnchorConfig&, std::size_t);                           \
  template DetectionOutput<T> head_forward(Var<T>, const AnchorConfig&, ParamStore<T>&);                      \
  template Var<T> focal_loss(Var<T>, const AnchorTargets&, const AnchorConfig&);                              \
  template Var<T> box_loss(Var<T>, const AnchorTargets&, const AnchorConfig&);                                \
  template Var<T> direction_loss(Var<T>, const AnchorTargets&, const AnchorConfig&);                          \
  template Var<T> combine_losses(Var<T>, Var<T>, Var<T>, const LossWeights&);                                 \
  template T combine_losses(T, T, T, const LossWeights&);                                                     \
  template LossTerms<T> rpn_loss(const DetectionOutput<T>&, const AnchorTargets&, const AnchorConfig&,        \
                                 const LossWeights&);                                                         \
  template std::vector<Detection> decode_detections(const DetectionOutput<T>&, std::span<const Box3d>,        \
                                                    const AnchorConfig&, double);

MMFUSION_INSTANTIATE(float)
MMFUSION_INSTANTIATE(double)

#undef MMFUSION_INSTANTIATE

}  // namespace mmfusion
