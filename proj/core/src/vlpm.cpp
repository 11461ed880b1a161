#include "mmfusion/vlpm.hpp"

#include <cmath>

namespace mmfusion {

void VlpmConfig::validate() const {
  if (feature_dim < 1) throw ConfigError("vlpm feature_dim must be >= 1");
  if (num_pam_stages < 1) throw ConfigError("vlpm needs at least one point attention stage");
  for (int a = 0; a < 3; ++a) {
    if (!(coord_scale[a] > 0) || !std::isfinite(coord_scale[a]) || !std::isfinite(coord_offset[a])) {
      throw ConfigError("vlpm coordinate scale must be positive and finite");
    }
  }
}

std::size_t VlpmConfig::output_dim() const {
  if (mean_baseline || dwm_input == DwmInput::kRawPoints) return 4;
  return feature_dim;
}

namespace {

std::string stage_prefix(std::size_t stage) { return "pam" + std::to_string(stage); }

std::size_t stage_input_dim(const VlpmConfig& config, std::size_t stage) {
  return stage == 1 ? 4 : config.feature_dim;
}

FcBlockSpec spec(std::size_t in, std::size_t hidden, std::size_t out) { return {in, hidden, out, true}; }

}  // namespace

template <Real T>
void init_vlpm_params(ParamStore<T>& params, const VlpmConfig& config) {
  config.validate();
  if (config.mean_baseline) return;
  const std::size_t d = config.feature_dim;
  const auto& h = config.hidden;
  for (std::size_t s = 1; s <= config.num_pam_stages; ++s) {
    const std::string p = stage_prefix(s);
    add_fc_block_params(params, p + ".alpha", spec(3, config.width(h.alpha), d));
    add_fc_block_params(params, p + ".beta", spec(3, config.width(h.beta), d));
    add_fc_block_params(params, p + ".gamma", spec(stage_input_dim(config, s), config.width(h.gamma), d));
    add_fc_block_params(params, p + ".delta", spec(3, config.width(h.delta), d));
    add_fc_block_params(params, p + ".epsilon", spec(d, config.width(h.epsilon), d));
  }
  add_fc_block_params(params, "dwm.zeta", spec(3, config.width(h.zeta), d));
  add_fc_block_params(params, "dwm.eta", spec(3, config.width(h.eta), d));
  add_fc_block_params(params, "dwm.theta", spec(d, config.width(h.theta), config.output_dim()));
}

PointLayout PointLayout::from_batch(const VoxelBatch& batch) {
  PointLayout layout;
  layout.voxels = batch.size();
  std::uint32_t base = 0;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const std::uint32_t n = batch.counts[k];
    for (std::uint32_t i = 0; i < n; ++i) {
      layout.voxel_of_point.push_back(static_cast<std::uint32_t>(k));
      for (std::uint32_t j = 0; j < n; ++j) {
        layout.pair_i.push_back(base + i);
        layout.pair_j.push_back(base + j);
      }
    }
    base += n;
  }
  return layout;
}

PointLayout PointLayout::single_voxel(std::size_t n) {
  PointLayout layout;
  layout.voxels = 1;
  layout.voxel_of_point.assign(n, 0);
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t j = 0; j < n; ++j) {
      layout.pair_i.push_back(i);
      layout.pair_j.push_back(j);
    }
  return layout;
}

template <Real T>
Var<T> point_attention(Var<T> coords, Var<T> feats, const PointLayout& layout, ParamStore<T>& params,
                       const VlpmConfig& config, std::size_t stage) {
  const std::size_t points = layout.voxel_of_point.size();
  if (points == 0) throw DomainError("point attention needs at least one point");
  if (coords.value().rank() != 2 || coords.dim(0) != points || coords.dim(1) != 3) {
    throw ShapeError("point_attention: coords " + shape_string(coords.dims()) + " do not match " +
                     std::to_string(points) + " points");
  }
  if (feats.value().rank() != 2 || feats.dim(0) != points) {
    throw ShapeError("point_attention: coords " + shape_string(coords.dims()) + " and features " +
                     shape_string(feats.dims()) + " differ in point count");
  }
  const std::size_t d = config.feature_dim;
  const auto& h = config.hidden;
  const std::string p = stage_prefix(stage);
  Var<T> query = fc_block(coords, spec(3, config.width(h.alpha), d), params, p + ".alpha");
  Var<T> key = fc_block(coords, spec(3, config.width(h.beta), d), params, p + ".beta");
  Var<T> value = fc_block(feats, spec(feats.dim(1), config.width(h.gamma), d), params, p + ".gamma");

  Var<T> rel = sub(gather_rows(coords, layout.pair_i), gather_rows(coords, layout.pair_j));
  Var<T> pos = fc_block(rel, spec(3, config.width(h.delta), d), params, p + ".delta");
  Var<T> logits = add(sub(gather_rows(query, layout.pair_i), gather_rows(key, layout.pair_j)), pos);
  Var<T> weights = fc_block(logits, spec(d, config.width(h.epsilon), d), params, p + ".epsilon");
  if (config.normalize_pam_weights) weights = segment_softmax(weights, layout.pair_i, points);
  Var<T> messages = mul(weights, gather_rows(value, layout.pair_j));
  return segment_sum(messages, layout.pair_i, points);
}

template <Real T>
Var<T> dynamic_weights(Var<T> coords, Var<T> feats, Var<T> mean_coords, const PointLayout& layout,
                       ParamStore<T>& params, const VlpmConfig& config) {
  const std::size_t d = config.feature_dim;
  const auto& h = config.hidden;
  if (mean_coords.value().rank() != 2 || mean_coords.dim(0) != layout.voxels || mean_coords.dim(1) != 3) {
    throw ShapeError("dynamic_weights: mean coords " + shape_string(mean_coords.dims()) + " do not match " +
                     std::to_string(layout.voxels) + " voxels");
  }
  // zeta(c_mean) is evaluated once per voxel and broadcast to its points.
  Var<T> centre = fc_block(mean_coords, spec(3, config.width(h.zeta), d), params, "dwm.zeta");
  Var<T> local = fc_block(coords, spec(3, config.width(h.eta), d), params, "dwm.eta");
  Var<T> diff = sub(gather_rows(centre, layout.voxel_of_point), local);
  Var<T> weights = fc_block(diff, spec(d, config.width(h.theta), config.output_dim()), params, "dwm.theta");
  if (weights.dims() != feats.dims()) {
    throw ShapeError("dynamic_weights: weights " + shape_string(weights.dims()) + " and features " +
                     shape_string(feats.dims()) + " differ");
  }
  return segment_sum(mul(weights, feats), layout.voxel_of_point, layout.voxels);
}

template <Real T>
Var<T> point_attention(Var<T> coords, Var<T> feats, ParamStore<T>& params, const VlpmConfig& config,
                       std::size_t stage) {
  if (coords.value().rank() != 2 || coords.dim(0) == 0) throw DomainError("point attention on an empty voxel");
  return point_attention(coords, feats, PointLayout::single_voxel(coords.dim(0)), params, config, stage);
}

template <Real T>
Var<T> dynamic_weights(Var<T> coords, Var<T> feats, Var<T> mean_coord, ParamStore<T>& params,
                       const VlpmConfig& config) {
  if (coords.value().rank() != 2 || coords.dim(0) == 0) throw DomainError("dynamic weights on an empty voxel");
  return dynamic_weights(coords, feats, mean_coord, PointLayout::single_voxel(coords.dim(0)), params, config);
}

template <Real T>
Var<T> vlpm_forward(Tape<T>& tape, const VoxelBatch& batch, const VlpmConfig& config, ParamStore<T>& params) {
  config.validate();
  const std::size_t k = batch.size();
  const auto normalise = [&](float v, int axis) {
    return static_cast<T>((static_cast<double>(v) - config.coord_offset[axis]) / config.coord_scale[axis]);
  };
  if (config.mean_baseline) {
    Tensor<T> means({k, 4});
    for (std::size_t v = 0; v < k; ++v) {
      for (int c = 0; c < 3; ++c) means.at(v, c) = normalise(batch.mean(v)[c], c);
      means.at(v, 3) = static_cast<T>(batch.mean(v)[3]);
    }
    return tape.constant(std::move(means));
  }
  if (k == 0) return tape.constant(Tensor<T>({0, config.output_dim()}));

  const PointLayout layout = PointLayout::from_batch(batch);
  const std::size_t points = layout.voxel_of_point.size();
  Tensor<T> coords({points, 3});
  Tensor<T> raw({points, 4});
  std::size_t row = 0;
  for (std::size_t v = 0; v < k; ++v) {
    for (std::size_t s = 0; s < batch.counts[v]; ++s, ++row) {
      const float* p = batch.point(v, s);
      for (int c = 0; c < 3; ++c) {
        const T v = normalise(p[c], c);
        raw.at(row, c) = v;
        coords.at(row, c) = v;
      }
      raw.at(row, 3) = static_cast<T>(p[3]);
    }
  }
  Tensor<T> means({k, 3});
  for (std::size_t v = 0; v < k; ++v)
    for (int c = 0; c < 3; ++c) means.at(v, c) = normalise(batch.mean(v)[c], c);

  Var<T> c = tape.constant(std::move(coords));
  Var<T> points_raw = tape.constant(std::move(raw));
  Var<T> features = points_raw;
  for (std::size_t s = 1; s <= config.num_pam_stages; ++s) {
    features = point_attention(c, features, layout, params, config, s);
  }
  Var<T> summed = config.dwm_input == DwmInput::kRawPoints ? points_raw : features;
  return dynamic_weights(c, summed, tape.constant(std::move(means)), layout, params, config);
}

#define MMFUSION_INSTANTIATE(T)                                                                         \
  template void init_vlpm_params(ParamStore<T>&, const VlpmConfig&);                                    \
  template Var<T> point_attention(Var<T>, Var<T>, ParamStore<T>&, const VlpmConfig&, std::size_t);      \
  template Var<T> dynamic_weights(Var<T>, Var<T>, Var<T>, ParamStore<T>&, const VlpmConfig&);           \
  template Var<T> point_attention(Var<T>, Var<T>, const PointLayout&, ParamStore<T>&, const VlpmConfig&, \
                                  std::size_t);                                                         \
  template Var<T> dynamic_weights(Var<T>, Var<T>, Var<T>, const PointLayout&, ParamStore<T>&,           \
                                  const VlpmConfig&);                                                   \
  template Var<T> vlpm_forward(Tape<T>&, const VoxelBatch&, const VlpmConfig&, ParamStore<T>&);

MMFUSION_INSTANTIATE(float)
MMFUSION_INSTANTIATE(double)

#undef MMFUSION_INSTANTIATE

}  // namespace mmfusion
