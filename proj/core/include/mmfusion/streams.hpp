#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include "mmfusion/autograd.hpp"
#include "mmfusion/dataio.hpp"

namespace mmfusion {

struct MapDims {
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  Shape shape() const { return {c, h, w}; }
  friend bool operator==(const MapDims&, const MapDims&) = default;
};

enum class ImageSource {
  /// Patch-averaging stand-in encoder over a raw image.
  kStandInEncoder,
  /// Precomputed features from any 2D backbone, loaded from an MMFF file.
  kFeatureFile,
};

struct StreamConfig {
  MapDims lidar_out{256, 200, 176};
  MapDims image_out{256, 39, 11};
  /// Output channels of the stride-2 3x3 convolutions of the BEV encoder.
  std::vector<std::size_t> bev_channels{16, 32, 48, 64};
  ImageSource image_source = ImageSource::kStandInEncoder;
  MapDims image_in{3, 1216, 352};
  std::size_t image_patch = 32;

  void validate() const;
  /// Size of the patch grid the stand-in image encoder works on.
  std::size_t patch_rows() const;
  std::size_t patch_cols() const;
};

/// `bev_in_channels` is the width of the scattered voxel features.
template <Real T>
void init_stream_params(ParamStore<T>& params, const StreamConfig& config, std::size_t bev_in_channels);

/// LiDAR stream: conv3x3/s2 + ReLU per entry of bev_channels, a 1x1 projection
/// to lidar_out.c, then adaptive resize to (lidar_out.h, lidar_out.w).
template <Real T>
Var<T> bev_encode(Var<T> bev, const StreamConfig& config, ParamStore<T>& params);

/// Camera stream stand-in: patch means, two per-location FC blocks (3 -> C -> C),
/// adaptive resize to (image_out.h, image_out.w).
template <Real T>
Var<T> image_encode(Var<T> image, const StreamConfig& config, ParamStore<T>& params);

/// Camera stream from a feature file; dims must equal image_out.
template <Real T>
FeatureMap<T> load_image_features(const std::filesystem::path& path, const StreamConfig& config);

}  // namespace mmfusion
