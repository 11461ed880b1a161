#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmfusion/tensor.hpp"

namespace mmfusion {

/// One LiDAR return in the sensor frame: metres and unitless reflectance.
struct Point {
  float x = 0;
  float y = 0;
  float z = 0;
  float r = 0;

  friend bool operator==(const Point&, const Point&) = default;
};

struct PointCloud {
  std::vector<Point> points;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
  friend bool operator==(const PointCloud&, const PointCloud&) = default;
};

/// Axis-aligned crop box. Membership is half-open: min <= coord < max.
struct RangeSpec {
  std::array<double, 2> x{0.0, 70.4};
  std::array<double, 2> y{-40.0, 40.0};
  std::array<double, 2> z{-3.0, 1.0};

  void validate() const;
  bool contains(const Point& p) const;
  const std::array<double, 2>& axis(int a) const { return a == 0 ? x : (a == 1 ? y : z); }
  double extent(int a) const { return axis(a)[1] - axis(a)[0]; }

  friend bool operator==(const RangeSpec&, const RangeSpec&) = default;
};

// ---------------------------------------------------------------------------
// KITTI velodyne .bin: consecutive little-endian float32 quadruples (x, y, z, r).

PointCloud decode_kitti_bin(std::span<const char> bytes);
std::vector<char> encode_kitti_bin(const PointCloud& cloud);
PointCloud read_kitti_bin(const std::filesystem::path& path);
void write_kitti_bin(const PointCloud& cloud, const std::filesystem::path& path);

/// Keeps the points inside `range`, preserving order.
PointCloud crop_range(const PointCloud& cloud, const RangeSpec& range);

// ---------------------------------------------------------------------------
// Feature maps

enum class SpatialFrame : std::uint8_t {
  kUnspecified,
  kBev,
  kImagePlane,
};

const char* to_string(SpatialFrame frame);

/// C x H x W features tagged with the plane they live in.
template <Real T>
struct FeatureMap {
  SpatialFrame frame = SpatialFrame::kUnspecified;
  Tensor<T> tensor;

  std::size_t channels() const { return tensor.dim(0); }
  std::size_t height() const { return tensor.dim(1); }
  std::size_t width() const { return tensor.dim(2); }
};

// MMFF layout: "MMFF" | u16 version | u8 rank (= 3) | 3 x u32 (C, H, W) | f32 payload, row-major.
inline constexpr std::uint16_t kFeatureMapVersion = 1;

template <Real T>
std::vector<char> encode_feature_map(const FeatureMap<T>& map);
template <Real T>
FeatureMap<T> decode_feature_map(std::span<const char> bytes, SpatialFrame frame = SpatialFrame::kUnspecified);
template <Real T>
void save_feature_map(const FeatureMap<T>& map, const std::filesystem::path& path);
/// The file does not carry the frame tag; the caller states which plane it expects.
template <Real T>
FeatureMap<T> load_feature_map(const std::filesystem::path& path, SpatialFrame frame = SpatialFrame::kUnspecified);

/// Nearest-neighbour resize of a C x H x W image.
template <Real T>
Tensor<T> resize_nearest(const Tensor<T>& image, std::size_t out_h, std::size_t out_w);

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Oriented 3D box; size is (length along heading, width, height).
struct Box3d {
  std::array<double, 3> center{};
  std::array<double, 3> size{};
  double yaw = 0;
  int class_id = 0;

  bool contains(const Point& p, double eps = 1e-6) const;
  /// Axis-aligned BEV bounds of the rotated footprint: {xmin, ymin, xmax, ymax}.
  std::array<double, 4> bev_bounds() const;
  friend bool operator==(const Box3d&, const Box3d&) = default;
};

struct SyntheticScene {
  PointCloud cloud;
  std::vector<Box3d> boxes;

  friend bool operator==(const SyntheticScene&, const SyntheticScene&) = default;
};

struct SceneOptions {
  RangeSpec range{};
  std::size_t points_per_object = 150;
  std::array<double, 3> mean_size{3.9, 1.6, 1.56};
  double size_jitter = 0.1;
  double ground_z = -1.78;
  /// Minimum BEV clearance between an object footprint and the range border.
  double border = 1.0;
  /// Minimum BEV gap between object footprints.
  double gap = 0.5;
};

/// Deterministic car-like point clusters (a box whose front 30% is half height) plus
/// uniform clutter over the range. Object heading is +x of the box frame.
SyntheticScene synth_scene(std::uint64_t seed, std::size_t n_objects, std::size_t noise_points,
                           const SceneOptions& options = {});

/// Uniform [-1, 1) image of the given dims, deterministic in the seed.
template <Real T>
Tensor<T> synth_image(std::uint64_t seed, std::size_t channels, std::size_t height, std::size_t width);

/// {"scenes": [{"points": [[x,y,z,r],...], "boxes": [[cx,cy,cz,l,w,h,yaw,class],...]}, ...]}
std::string scenes_to_json(std::span<const SyntheticScene> scenes);
std::vector<SyntheticScene> scenes_from_json(std::string_view text);
std::vector<SyntheticScene> read_scenes(const std::filesystem::path& path);
void write_scenes(std::span<const SyntheticScene> scenes, const std::filesystem::path& path);

}  // namespace mmfusion
