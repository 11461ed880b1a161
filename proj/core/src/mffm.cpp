#include "mmfusion/mffm.hpp"

#include <cmath>

namespace mmfusion {

void MffmConfig::validate() const {
  if (pooled_h == 0 || pooled_w == 0) throw ConfigError("mffm pooled grid must have at least one token");
  if (channels == 0) throw ConfigError("mffm channel width must be positive");
  if (!post_channels.empty()) {
    if (post_channels.size() != 2) {
      throw ConfigError("mffm post_channels must list exactly two widths (down, up), got " +
                        std::to_string(post_channels.size()));
    }
    if (post_channels[0] == 0) throw ConfigError("mffm post_channels entries must be positive");
    if (post_channels[1] != channels) {
      throw ConfigError("mffm post stack must end at the fusion width " + std::to_string(channels) + ", got " +
                        std::to_string(post_channels[1]));
    }
  }
}

template <Real T>
void init_mffm_params(ParamStore<T>& params, const MffmConfig& config) {
  config.validate();
  const std::size_t c = config.channels;
  params.add_zeros("mffm.pos_lidar", {c, config.pooled_h, config.pooled_w});
  params.add_zeros("mffm.pos_image", {c, config.pooled_h, config.pooled_w});
  add_linear_params(params, "mffm.phi", c, c);
  add_linear_params(params, "mffm.psi", c, c);
  add_linear_params(params, "mffm.vartheta", c, c);
  add_linear_params(params, "mffm.gamma", c, c);
  if (!config.post_channels.empty()) {
    const std::size_t mid = config.post_channels[0];
    params.add_uniform("mffm.down.w", {mid, c, 3, 3}, c * 9);
    params.add_zeros("mffm.down.b", {mid});
    params.add_uniform("mffm.up.w", {c, mid, 3, 3}, mid * 9);
    params.add_zeros("mffm.up.b", {c});
  }
}

namespace {

template <Real T>
Var<T> project(Var<T> tokens, ParamStore<T>& params, const std::string& prefix) {
  Tape<T>& tape = tokens.tape();
  return linear(tokens, tape.param(params, prefix + ".w"), tape.param(params, prefix + ".b"));
}

template <Real T>
void require_map(Var<T> x, const char* what) {
  if (x.value().rank() != 3) throw ShapeError(std::string(what) + " must be C x H x W, got " + shape_string(x.dims()));
}

}  // namespace

template <Real T>
TokenPair<T> pool_and_encode(Var<T> f_lidar, Var<T> f_image, const MffmConfig& config, ParamStore<T>& params) {
  config.validate();
  require_map(f_lidar, "LiDAR features");
  require_map(f_image, "image features");
  if (f_lidar.dim(0) != f_image.dim(0)) {
    throw ShapeError("LiDAR and image features differ in channel width: " + shape_string(f_lidar.dims()) + " vs " +
                     shape_string(f_image.dims()));
  }
  if (f_lidar.dim(0) != config.channels) {
    throw ShapeError("feature channel width " + std::to_string(f_lidar.dim(0)) + " does not match configured " +
                     std::to_string(config.channels));
  }
  Tape<T>& tape = f_lidar.tape();
  Var<T> lidar = add(adaptive_resize2d(f_lidar, config.pooled_h, config.pooled_w), tape.param(params, "mffm.pos_lidar"));
  Var<T> image = add(adaptive_resize2d(f_image, config.pooled_h, config.pooled_w), tape.param(params, "mffm.pos_image"));
  return {map_to_tokens(lidar), map_to_tokens(image)};
}

template <Real T>
Qkv<T> project_qkv(const TokenPair<T>& tokens, ParamStore<T>& params) {
  return {project(tokens.lidar, params, "mffm.phi"), project(tokens.image, params, "mffm.psi"),
          project(tokens.image, params, "mffm.vartheta")};
}

template <Real T>
AttentionResult<T> cross_attention(Var<T> q, Var<T> k, Var<T> v) {
  if (q.value().rank() != 2 || k.value().rank() != 2 || v.value().rank() != 2) {
    throw ShapeError("cross_attention expects token matrices");
  }
  if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0) || q.dim(1) == 0) {
    throw ShapeError("cross_attention: Q " + shape_string(q.dims()) + ", K " + shape_string(k.dims()) + ", V " +
                     shape_string(v.dims()) + " are inconsistent");
  }
  const T inv_sqrt_c = T(1) / std::sqrt(static_cast<T>(q.dim(1)));
  Var<T> weights = softmax(scale(matmul_nt(q, k), inv_sqrt_c));
  return {weights, matmul(weights, v)};
}

template <Real T>
Var<T> fuse_pre_stack(Var<T> f_lidar, Var<T> attended, Var<T> values, Var<T> lidar_tokens, const MffmConfig& config,
                      ParamStore<T>& params) {
  require_map(f_lidar, "LiDAR features");
  Var<T> residual = config.residual_mode == ResidualMode::kLiteralValue ? values : lidar_tokens;
  if (residual.dims() != attended.dims()) {
    throw ShapeError("fusion residual " + shape_string(residual.dims()) + " does not match attended tokens " +
                     shape_string(attended.dims()));
  }
  Var<T> image_tokens = project(add(attended, residual), params, "mffm.gamma");
  Var<T> image_map = tokens_to_map(image_tokens, config.pooled_h, config.pooled_w);
  return add(f_lidar, upsample2d(image_map, f_lidar.dim(1), f_lidar.dim(2)));
}

template <Real T>
Var<T> post_fusion_stack(Var<T> pre_stack, const MffmConfig& config, ParamStore<T>& params) {
  if (config.post_channels.empty()) return pre_stack;
  Tape<T>& tape = pre_stack.tape();
  Var<T> down = relu(conv2d(pre_stack, tape.param(params, "mffm.down.w"), tape.param(params, "mffm.down.b"), 2, 1));
  Var<T> back = adaptive_resize2d(down, pre_stack.dim(1), pre_stack.dim(2));
  return conv2d(back, tape.param(params, "mffm.up.w"), tape.param(params, "mffm.up.b"), 1, 1);
}

template <Real T>
MffmOutput<T> mffm_forward(Var<T> f_lidar, Var<T> f_image, const MffmConfig& config, ParamStore<T>& params) {
  const TokenPair<T> tokens = pool_and_encode(f_lidar, f_image, config, params);
  const Qkv<T> qkv = project_qkv(tokens, params);
  const AttentionResult<T> attention = cross_attention(qkv.q, qkv.k, qkv.v);
  Var<T> pre = fuse_pre_stack(f_lidar, attention.attended, qkv.v, tokens.lidar, config, params);
  return {post_fusion_stack(pre, config, params), pre, attention.weights};
}

#define MMFUSION_INSTANTIATE(T)                                                                                  \
  template void init_mffm_params(ParamStore<T>&, const MffmConfig&);                                             \
  template TokenPair<T> pool_and_encode(Var<T>, Var<T>, const MffmConfig&, ParamStore<T>&);                      \
  template Qkv<T> project_qkv(const TokenPair<T>&, ParamStore<T>&);                                              \
  template AttentionResult<T> cross_attention(Var<T>, Var<T>, Var<T>);                                           \
  template Var<T> fuse_pre_stack(Var<T>, Var<T>, Var<T>, Var<T>, const MffmConfig&, ParamStore<T>&);             \
  template Var<T> post_fusion_stack(Var<T>, const MffmConfig&, ParamStore<T>&);                                  \
  template MffmOutput<T> mffm_forward(Var<T>, Var<T>, const MffmConfig&, ParamStore<T>&);

MMFUSION_INSTANTIATE(float)
MMFUSION_INSTANTIATE(double)

#undef MMFUSION_INSTANTIATE

}  // namespace mmfusion
