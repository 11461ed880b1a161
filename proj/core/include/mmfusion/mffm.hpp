#pragma once

#include <cstddef>
#include <vector>

#include "mmfusion/autograd.hpp"

namespace mmfusion {

/// Which tokens the attended values are added back to before the output projection.
enum class ResidualMode {
  /// f_I'' = gamma(W V + V)
  kLiteralValue,
  /// f_I'' = gamma(W V + f_L')
  kQuerySide,
};

struct MffmConfig {
  std::size_t pooled_h = 25;
  std::size_t pooled_w = 22;
  std::size_t channels = 256;
  ResidualMode residual_mode = ResidualMode::kLiteralValue;
  /// Post-fusion stack: a stride-2 conv to [0] with ReLU, resize back, a conv to [1].
  /// Empty disables the stack; otherwise exactly two entries and [1] == channels.
  std::vector<std::size_t> post_channels{128, 256};

  void validate() const;
  std::size_t tokens() const { return pooled_h * pooled_w; }
};

template <Real T>
void init_mffm_params(ParamStore<T>& params, const MffmConfig& config);

template <Real T>
struct TokenPair {
  Var<T> lidar;  // n x C
  Var<T> image;  // n x C
};

template <Real T>
struct Qkv {
  Var<T> q;
  Var<T> k;
  Var<T> v;
};

template <Real T>
struct AttentionResult {
  Var<T> weights;   // n x m, row-stochastic
  Var<T> attended;  // n x C
};

template <Real T>
struct MffmOutput {
  Var<T> fused;      // C x H1 x W1
  Var<T> pre_stack;  // f_L + upsampled f_I'', before the post-fusion stack
  Var<T> weights;
};

/// Resizes both maps to the pooled grid, adds the positional encodings and flattens
/// row-major to tokens.
template <Real T>
TokenPair<T> pool_and_encode(Var<T> f_lidar, Var<T> f_image, const MffmConfig& config, ParamStore<T>& params);

/// Per-token linear maps: Q from LiDAR tokens, K and V from image tokens.
template <Real T>
Qkv<T> project_qkv(const TokenPair<T>& tokens, ParamStore<T>& params);

/// W = softmax(Q K^T / sqrt(C)), A = W V. Non-finite logits raise NumericError.
template <Real T>
AttentionResult<T> cross_attention(Var<T> q, Var<T> k, Var<T> v);

/// Residual, output projection, upsample to f_L's grid and add to f_L.
template <Real T>
Var<T> fuse_pre_stack(Var<T> f_lidar, Var<T> attended, Var<T> values, Var<T> lidar_tokens, const MffmConfig& config,
                      ParamStore<T>& params);

template <Real T>
Var<T> post_fusion_stack(Var<T> pre_stack, const MffmConfig& config, ParamStore<T>& params);

template <Real T>
MffmOutput<T> mffm_forward(Var<T> f_lidar, Var<T> f_image, const MffmConfig& config, ParamStore<T>& params);

}  // namespace mmfusion
