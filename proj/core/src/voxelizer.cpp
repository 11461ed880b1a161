#include "mmfusion/voxelizer.hpp"

#include <algorithm>
#include <bit>
#include <memory>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "mmfusion/binary_io.hpp"
#include "mmfusion/parallel.hpp"

namespace mmfusion {

void VoxelConfig::validate() const {
  range.validate();
  for (int a = 0; a < 3; ++a) {
    if (!(voxel_size[a] > 0)) throw ConfigError("voxel size must be positive on every axis");
    const double cells = range.extent(a) / voxel_size[a];
    const double whole = std::round(cells);
    if (whole < 1 || std::abs(cells - whole) > 1e-6 * whole) {
      throw ConfigError("range extent " + std::to_string(range.extent(a)) + " on axis " + std::to_string(a) +
                        " is not a whole number of voxels of size " + std::to_string(voxel_size[a]));
    }
    if (whole > static_cast<double>(std::numeric_limits<std::int32_t>::max())) {
      throw ConfigError("voxel grid too large on axis " + std::to_string(a));
    }
  }
  if (max_points_per_voxel < 1) throw ConfigError("max_points_per_voxel must be >= 1");
  if (max_voxels < 1) throw ConfigError("max_voxels must be >= 1");
}

GridDims VoxelConfig::grid() const {
  auto cells = [&](int a) { return static_cast<std::size_t>(std::llround(range.extent(a) / voxel_size[a])); };
  return {cells(0), cells(1), cells(2)};
}

namespace {

struct AxisGrid {
  double min;
  double size;
  std::int64_t cells;
};

// Floor index with a correction step so that min + i*size <= c < min + (i+1)*size
// holds in double arithmetic.
inline std::int64_t axis_index(double c, const AxisGrid& g) {
  auto i = static_cast<std::int64_t>(std::floor((c - g.min) / g.size));
  if (i > 0 && g.min + static_cast<double>(i) * g.size > c) --i;
  if (i + 1 < g.cells && g.min + static_cast<double>(i + 1) * g.size <= c) ++i;
  return std::clamp<std::int64_t>(i, 0, g.cells - 1);
}

std::array<AxisGrid, 3> axis_grids(const VoxelConfig& config) {
  const GridDims grid = config.grid();
  const std::size_t cells[3] = {grid.x, grid.y, grid.z};
  std::array<AxisGrid, 3> out{};
  for (int a = 0; a < 3; ++a) {
    out[a] = {config.range.axis(a)[0], config.voxel_size[a], static_cast<std::int64_t>(cells[a])};
  }
  return out;
}

VoxelIndex index_with(const Point& p, const VoxelConfig& config, const std::array<AxisGrid, 3>& grids) {
  if (!config.range.contains(p)) {
    throw DomainError("point (" + std::to_string(p.x) + ", " + std::to_string(p.y) + ", " + std::to_string(p.z) +
                      ") lies outside the voxel range");
  }
  const double c[3] = {p.x, p.y, p.z};
  VoxelIndex idx{};
  for (int a = 0; a < 3; ++a) idx[a] = static_cast<std::int32_t>(axis_index(c[a], grids[a]));
  return idx;
}

}  // namespace

VoxelIndex voxel_index(const Point& point, const VoxelConfig& config) {
  return index_with(point, config, axis_grids(config));
}

bool VoxelBatch::same_contents(const VoxelBatch& other) const {
  auto bits_equal = [](const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](float x, float y) {
             return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
           });
  };
  return indices == other.indices && counts == other.counts && max_points == other.max_points &&
         grid == other.grid && bits_equal(points, other.points) && bits_equal(means, other.means);
}

VoxelBatch voxelize(const PointCloud& cloud, const VoxelConfig& config, std::size_t workers) {
  config.validate();
  const GridDims grid = config.grid();
  const auto grids = axis_grids(config);
  const std::size_t n = cloud.size();
  const std::size_t cap_n = config.max_points_per_voxel;

  // 1. Per-point voxel keys (parallel, index-addressed).
  std::vector<std::uint64_t> keys(n);
  parallel_for(n, workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const VoxelIndex v = index_with(cloud.points[i], config, grids);
      keys[i] = (static_cast<std::uint64_t>(v[2]) * grid.y + static_cast<std::uint64_t>(v[1])) * grid.x +
                static_cast<std::uint64_t>(v[0]);
    }
  });

  // 2. Group in first-occurrence order; members stay in original point order.
  std::unordered_map<std::uint64_t, std::uint32_t> slot_of;
  slot_of.reserve(n);
  std::vector<std::uint32_t> point_slot(n);
  std::vector<std::uint64_t> slot_key;
  std::vector<std::uint32_t> slot_size;
  for (std::size_t i = 0; i < n; ++i) {
    auto [it, inserted] = slot_of.try_emplace(keys[i], static_cast<std::uint32_t>(slot_key.size()));
    if (inserted) {
      slot_key.push_back(keys[i]);
      slot_size.push_back(0);
    }
    point_slot[i] = it->second;
    ++slot_size[it->second];
  }
  const std::size_t total_voxels = slot_key.size();
  std::vector<std::size_t> offsets(total_voxels + 1, 0);
  for (std::size_t s = 0; s < total_voxels; ++s) offsets[s + 1] = offsets[s] + slot_size[s];
  std::vector<std::uint32_t> members(n);
  {
    std::vector<std::size_t> cursor(offsets.begin(), offsets.end() - 1);
    for (std::size_t i = 0; i < n; ++i) members[cursor[point_slot[i]]++] = static_cast<std::uint32_t>(i);
  }

  // 3. Voxel cap: seeded shuffle, truncate, restore first-occurrence order.
  std::vector<std::uint32_t> kept(total_voxels);
  std::iota(kept.begin(), kept.end(), 0u);
  if (total_voxels > config.max_voxels) {
    SplitMix64 rng(config.seed ^ 0x6A09E667F3BCC909ull);
    for (std::size_t i = total_voxels - 1; i > 0; --i) std::swap(kept[i], kept[rng.below(i + 1)]);
    kept.resize(config.max_voxels);
    std::sort(kept.begin(), kept.end());
  }

  // 4. Fill per-voxel data (parallel over voxels, index-addressed).
  const std::size_t k_out = kept.size();
  VoxelBatch batch;
  batch.max_points = cap_n;
  batch.grid = grid;
  batch.indices.resize(k_out);
  batch.counts.resize(k_out);
  batch.points.assign(k_out * cap_n * 4, 0.0f);
  batch.means.assign(k_out * 4, 0.0f);
  parallel_for(k_out, workers, [&](std::size_t begin, std::size_t end) {
    std::vector<std::uint32_t> chosen;
    for (std::size_t k = begin; k < end; ++k) {
      const std::uint32_t slot = kept[k];
      const std::uint64_t key = slot_key[slot];
      batch.indices[k] = {static_cast<std::int32_t>(key % grid.x),
                          static_cast<std::int32_t>((key / grid.x) % grid.y),
                          static_cast<std::int32_t>(key / (static_cast<std::uint64_t>(grid.x) * grid.y))};
      const std::uint32_t* first = &members[offsets[slot]];
      const std::size_t size = slot_size[slot];
      chosen.assign(first, first + size);
      if (size > cap_n) {
        if (config.sampling == InVoxelSampling::kSeededRandom) {
          SplitMix64 rng(config.seed ^ (key * 0x9E3779B97F4A7C15ull));
          for (std::size_t i = 0; i < cap_n; ++i) std::swap(chosen[i], chosen[i + rng.below(size - i)]);
          chosen.resize(cap_n);
          std::sort(chosen.begin(), chosen.end());
        } else {
          chosen.resize(cap_n);
        }
      }
      batch.counts[k] = static_cast<std::uint32_t>(chosen.size());
      double sums[4] = {0, 0, 0, 0};
      for (std::size_t s = 0; s < chosen.size(); ++s) {
        const Point& p = cloud.points[chosen[s]];
        float* dst = &batch.points[(k * cap_n + s) * 4];
        dst[0] = p.x;
        dst[1] = p.y;
        dst[2] = p.z;
        dst[3] = p.r;
        sums[0] += p.x;
        sums[1] += p.y;
        sums[2] += p.z;
        sums[3] += p.r;
      }
      for (int c = 0; c < 4; ++c) {
        batch.means[k * 4 + c] = static_cast<float>(sums[c] / static_cast<double>(chosen.size()));
      }
    }
  });

  VoxelStats& stats = batch.stats;
  stats.input_points = n;
  stats.voxels_before_cap = total_voxels;
  std::vector<bool> is_kept(total_voxels, false);
  for (std::uint32_t s : kept) is_kept[s] = true;
  for (std::size_t s = 0; s < total_voxels; ++s) {
    if (is_kept[s]) {
      const std::size_t take = std::min(slot_size[s], static_cast<std::uint32_t>(cap_n));
      stats.kept_points += take;
      stats.dropped_by_max_points += slot_size[s] - take;
    } else {
      stats.dropped_by_max_voxels += slot_size[s];
    }
  }
  return batch;
}

template <Real T>
Var<T> scatter_bev(Var<T> features, std::span<const VoxelIndex> indices, const GridDims& grid) {
  if (features.value().rank() != 2 || features.dim(0) != indices.size()) {
    throw ShapeError("scatter_bev: features " + shape_string(features.dims()) + " do not match " +
                     std::to_string(indices.size()) + " voxel indices");
  }
  const std::size_t k = indices.size(), channels = features.dim(1);
  const std::size_t plane = grid.y * grid.x;
  Tensor<T> out({channels, grid.y, grid.x});
  // Winner voxel per output element; -1 where the cell is empty.
  auto winner = std::make_shared<std::vector<std::int64_t>>(channels * plane, -1);
  const auto& fv = features.value();
  for (std::size_t v = 0; v < k; ++v) {
    const auto& idx = indices[v];
    if (idx[0] < 0 || idx[1] < 0 || idx[2] < 0 || static_cast<std::size_t>(idx[0]) >= grid.x ||
        static_cast<std::size_t>(idx[1]) >= grid.y || static_cast<std::size_t>(idx[2]) >= grid.z) {
      throw DomainError("scatter_bev: voxel index (" + std::to_string(idx[0]) + ", " + std::to_string(idx[1]) +
                        ", " + std::to_string(idx[2]) + ") outside grid");
    }
    const std::size_t cell = static_cast<std::size_t>(idx[1]) * grid.x + static_cast<std::size_t>(idx[0]);
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t o = c * plane + cell;
      const T value = fv[v * channels + c];
      auto& w = (*winner)[o];
      if (w < 0 || value > out[o]) {
        out[o] = value;
        w = static_cast<std::int64_t>(v);
      }
    }
  }
  return features.tape().record(std::move(out), {features}, [winner, channels](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    auto& gf = *in[0];
    const std::size_t plane = winner->size() / std::max<std::size_t>(channels, 1);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t cell = 0; cell < plane; ++cell) {
        const std::int64_t v = (*winner)[c * plane + cell];
        if (v >= 0) gf[static_cast<std::size_t>(v) * channels + c] += g[c * plane + cell];
      }
  });
}

std::vector<char> encode_voxel_batch(const VoxelBatch& batch) {
  io::ByteWriter out;
  out.bytes("MMVX");
  out.u16(kVoxelBatchVersion);
  out.u32(static_cast<std::uint32_t>(batch.size()));
  out.u32(static_cast<std::uint32_t>(batch.max_points));
  out.u32(static_cast<std::uint32_t>(batch.grid.x));
  out.u32(static_cast<std::uint32_t>(batch.grid.y));
  out.u32(static_cast<std::uint32_t>(batch.grid.z));
  for (const auto& idx : batch.indices)
    for (std::int32_t v : idx) out.i32(v);
  for (std::uint32_t c : batch.counts) out.u32(c);
  for (float v : batch.points) out.f32(v);
  for (float v : batch.means) out.f32(v);
  return out.data();
}

VoxelBatch decode_voxel_batch(std::span<const char> bytes) {
  io::ByteReader in(bytes);
  if (in.bytes(4, "magic") != "MMVX") throw FormatError("bad voxel batch magic", 0);
  const std::uint16_t version = in.u16("version");
  if (version != kVoxelBatchVersion) throw FormatError("unsupported voxel batch version " + std::to_string(version), 4);
  VoxelBatch batch;
  const std::uint64_t k = in.u32("voxel count");
  batch.max_points = in.u32("max points");
  batch.grid.x = in.u32("grid x");
  batch.grid.y = in.u32("grid y");
  batch.grid.z = in.u32("grid z");
  const std::uint64_t expected = k * 12 + k * 4 + k * batch.max_points * 16 + k * 16;
  if (expected != in.remaining()) {
    throw FormatError(expected > in.remaining() ? "truncated voxel batch payload" : "trailing bytes after voxel batch",
                      in.offset());
  }
  batch.indices.resize(k);
  for (auto& idx : batch.indices)
    for (auto& v : idx) v = in.i32("indices");
  batch.counts.resize(k);
  for (auto& c : batch.counts) {
    c = in.u32("counts");
    if (c < 1 || c > batch.max_points) throw FormatError("voxel count out of range", in.offset() - 4);
  }
  batch.points.resize(k * batch.max_points * 4);
  for (auto& v : batch.points) v = in.f32("points");
  batch.means.resize(k * 4);
  for (auto& v : batch.means) v = in.f32("means");
  std::size_t kept = 0;
  for (auto c : batch.counts) kept += c;
  batch.stats.kept_points = kept;
  batch.stats.input_points = kept;
  batch.stats.voxels_before_cap = k;
  return batch;
}

void save_voxel_batch(const VoxelBatch& batch, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_voxel_batch(batch));
}

VoxelBatch load_voxel_batch(const std::filesystem::path& path) {
  return decode_voxel_batch(io::read_file(path));
}

std::string voxel_summary_json(const VoxelBatch& batch) {
  nlohmann::json j = {
      {"K", batch.size()},
      {"input_points", batch.stats.input_points},
      {"kept_points", batch.stats.kept_points},
      {"dropped_by_max_points", batch.stats.dropped_by_max_points},
      {"dropped_by_max_voxels", batch.stats.dropped_by_max_voxels},
      {"voxels_before_cap", batch.stats.voxels_before_cap},
      {"grid", {{"x", batch.grid.x}, {"y", batch.grid.y}, {"z", batch.grid.z}}},
  };
  return j.dump();
}

template Var<float> scatter_bev(Var<float>, std::span<const VoxelIndex>, const GridDims&);
template Var<double> scatter_bev(Var<double>, std::span<const VoxelIndex>, const GridDims&);

}  // namespace mmfusion
