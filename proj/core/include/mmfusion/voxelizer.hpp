#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mmfusion/autograd.hpp"
#include "mmfusion/dataio.hpp"

namespace mmfusion {

struct GridDims {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t z = 0;

  std::size_t cells() const noexcept { return x * y * z; }
  /// (y, x, z), the order grid sizes are usually quoted in.
  std::array<std::size_t, 3> report_order() const noexcept { return {y, x, z}; }
  friend bool operator==(const GridDims&, const GridDims&) = default;
};

enum class InVoxelSampling {
  /// Keep the first N points in input order.
  kFirstN,
  /// Keep a seeded random subset of N points, still emitted in input order.
  kSeededRandom,
};

struct VoxelConfig {
  std::array<double, 3> voxel_size{0.05, 0.05, 0.1};
  RangeSpec range{};
  std::size_t max_points_per_voxel = 5;
  std::size_t max_voxels = kTrainingVoxelCap;
  std::uint64_t seed = 0;
  InVoxelSampling sampling = InVoxelSampling::kFirstN;

  static constexpr std::size_t kTrainingVoxelCap = 16000;
  static constexpr std::size_t kTestingVoxelCap = 40000;

  /// Throws ConfigError unless every range extent is a whole number of voxels.
  void validate() const;
  GridDims grid() const;
};

using VoxelIndex = std::array<std::int32_t, 3>;  // (ix, iy, iz)

struct VoxelStats {
  std::size_t input_points = 0;
  std::size_t kept_points = 0;
  std::size_t dropped_by_max_points = 0;
  std::size_t dropped_by_max_voxels = 0;
  std::size_t voxels_before_cap = 0;
};

/// Non-empty voxels. Point rows beyond counts[k] are zero padding.
struct VoxelBatch {
  std::vector<VoxelIndex> indices;
  std::vector<float> points;  // K x N x 4
  std::vector<std::uint32_t> counts;
  std::vector<float> means;  // K x 4
  std::size_t max_points = 0;
  GridDims grid{};
  VoxelStats stats{};

  std::size_t size() const noexcept { return indices.size(); }
  const float* point(std::size_t voxel, std::size_t slot) const {
    return &points[(voxel * max_points + slot) * 4];
  }
  const float* mean(std::size_t voxel) const { return &means[voxel * 4]; }

  bool same_contents(const VoxelBatch& other) const;
};

/// floor((coord - min) / size) per axis. Throws DomainError outside the half-open range.
VoxelIndex voxel_index(const Point& point, const VoxelConfig& config);

/// Bins a range-cropped cloud. The result does not depend on `workers`.
VoxelBatch voxelize(const PointCloud& cloud, const VoxelConfig& config, std::size_t workers = 1);

/// Element-wise max over the z-levels of each BEV cell. `features` is K x C;
/// the result is C x grid.y x grid.x with untouched cells zero.
template <Real T>
Var<T> scatter_bev(Var<T> features, std::span<const VoxelIndex> indices, const GridDims& grid);

// MMVX layout: "MMVX" | u16 version | u32 K | u32 N | 3 x u32 grid (x, y, z) |
//   K x 3 i32 indices | K u32 counts | K x N x 4 f32 points | K x 4 f32 means
inline constexpr std::uint16_t kVoxelBatchVersion = 1;

std::vector<char> encode_voxel_batch(const VoxelBatch& batch);
VoxelBatch decode_voxel_batch(std::span<const char> bytes);
void save_voxel_batch(const VoxelBatch& batch, const std::filesystem::path& path);
VoxelBatch load_voxel_batch(const std::filesystem::path& path);

/// {"K", "input_points", "kept_points", "dropped_by_max_points", "dropped_by_max_voxels", "grid"}
std::string voxel_summary_json(const VoxelBatch& batch);

}  // namespace mmfusion
