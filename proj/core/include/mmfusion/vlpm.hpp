#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mmfusion/autograd.hpp"
#include "mmfusion/voxelizer.hpp"

namespace mmfusion {

/// Hidden widths of the VLPM FC blocks; 0 means "same as feature_dim".
struct VlpmHiddenWidths {
  std::size_t alpha = 0;
  std::size_t beta = 0;
  std::size_t gamma = 0;
  std::size_t delta = 0;
  std::size_t epsilon = 0;
  std::size_t theta = 0;
  std::size_t zeta = 0;
  std::size_t eta = 0;
};

/// What the dynamic-weights reduction sums over.
enum class DwmInput {
  kPamFeatures,
  /// Sum the raw 4-channel points instead; the voxel feature is then 4 wide.
  kRawPoints,
};

struct VlpmConfig {
  std::size_t feature_dim = 16;
  VlpmHiddenWidths hidden{};
  std::size_t num_pam_stages = 2;
  /// Softmax-normalise the pairwise weights over j, per channel.
  bool normalize_pam_weights = false;
  DwmInput dwm_input = DwmInput::kPamFeatures;
  /// Comparison baseline: the voxel feature is its mean point, no learned weights.
  bool mean_baseline = false;
  /// Affine map applied to point x, y, z before they enter the network:
  /// (v - coord_offset) / coord_scale. The identity by default.
  std::array<double, 3> coord_offset{0.0, 0.0, 0.0};
  std::array<double, 3> coord_scale{1.0, 1.0, 1.0};

  void validate() const;
  std::size_t output_dim() const;
  std::size_t width(std::size_t hidden_width) const { return hidden_width ? hidden_width : feature_dim; }
};

template <Real T>
void init_vlpm_params(ParamStore<T>& params, const VlpmConfig& config);

/// Point Attention over the points of one voxel. coords: n x 3, feats: n x d_in
/// (d_in is 4 for stage 1, feature_dim afterwards); returns n x feature_dim.
/// Stages are numbered from 1.
template <Real T>
Var<T> point_attention(Var<T> coords, Var<T> feats, ParamStore<T>& params, const VlpmConfig& config,
                       std::size_t stage);

/// Dynamic weights over the points of one voxel. mean_coord is 1 x 3; returns 1 x d.
template <Real T>
Var<T> dynamic_weights(Var<T> coords, Var<T> feats, Var<T> mean_coord, ParamStore<T>& params,
                       const VlpmConfig& config);

/// Real points of a batch flattened across voxels, plus the intra-voxel pair list.
struct PointLayout {
  std::size_t voxels = 0;
  std::vector<std::uint32_t> voxel_of_point;
  std::vector<std::uint32_t> pair_i;
  std::vector<std::uint32_t> pair_j;

  static PointLayout from_batch(const VoxelBatch& batch);
  static PointLayout single_voxel(std::size_t n);
};

/// Batched forms of the two operations above over every voxel of a layout.
template <Real T>
Var<T> point_attention(Var<T> coords, Var<T> feats, const PointLayout& layout, ParamStore<T>& params,
                       const VlpmConfig& config, std::size_t stage);
template <Real T>
Var<T> dynamic_weights(Var<T> coords, Var<T> feats, Var<T> mean_coords, const PointLayout& layout,
                       ParamStore<T>& params, const VlpmConfig& config);

/// One output_dim() feature row per voxel of the batch; padding rows are never read.
template <Real T>
Var<T> vlpm_forward(Tape<T>& tape, const VoxelBatch& batch, const VlpmConfig& config, ParamStore<T>& params);

}  // namespace mmfusion
