#include "mmfusion/dataio.hpp"

#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

#include "mmfusion/binary_io.hpp"

namespace mmfusion {

void RangeSpec::validate() const {
  for (int a = 0; a < 3; ++a) {
    const auto& r = axis(a);
    if (!std::isfinite(r[0]) || !std::isfinite(r[1]) || !(r[0] < r[1])) {
      throw ConfigError("range axis " + std::to_string(a) + " must satisfy min < max");
    }
  }
}

bool RangeSpec::contains(const Point& p) const {
  const double c[3] = {p.x, p.y, p.z};
  for (int a = 0; a < 3; ++a) {
    if (!(c[a] >= axis(a)[0] && c[a] < axis(a)[1])) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

PointCloud decode_kitti_bin(std::span<const char> bytes) {
  if (bytes.size() % 16 != 0) {
    throw FormatError("KITTI .bin length " + std::to_string(bytes.size()) + " is not a multiple of 16",
                      bytes.size() - bytes.size() % 16);
  }
  io::ByteReader in(bytes);
  PointCloud cloud;
  cloud.points.resize(bytes.size() / 16);
  for (auto& p : cloud.points) {
    const std::size_t offset = in.offset();
    p.x = in.f32("x");
    p.y = in.f32("y");
    p.z = in.f32("z");
    p.r = in.f32("reflectance");
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) || !std::isfinite(p.r)) {
      throw DataError("non-finite point value at byte offset " + std::to_string(offset));
    }
  }
  return cloud;
}

std::vector<char> encode_kitti_bin(const PointCloud& cloud) {
  io::ByteWriter out;
  for (const auto& p : cloud.points) {
    out.f32(p.x);
    out.f32(p.y);
    out.f32(p.z);
    out.f32(p.r);
  }
  return out.data();
}

PointCloud read_kitti_bin(const std::filesystem::path& path) {
  return decode_kitti_bin(io::read_file(path));
}

void write_kitti_bin(const PointCloud& cloud, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_kitti_bin(cloud));
}

PointCloud crop_range(const PointCloud& cloud, const RangeSpec& range) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) {
    if (range.contains(p)) out.points.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------

const char* to_string(SpatialFrame frame) {
  switch (frame) {
    case SpatialFrame::kUnspecified: return "unspecified";
    case SpatialFrame::kBev: return "bev";
    case SpatialFrame::kImagePlane: return "image";
  }
  return "unknown";
}

template <Real T>
std::vector<char> encode_feature_map(const FeatureMap<T>& map) {
  if (map.tensor.rank() != 3) {
    throw ShapeError("feature map must be C x H x W, got " + shape_string(map.tensor.dims()));
  }
  io::ByteWriter out;
  out.bytes("MMFF");
  out.u16(kFeatureMapVersion);
  out.u8(3);
  for (std::size_t d : map.tensor.dims()) out.u32(static_cast<std::uint32_t>(d));
  for (T v : map.tensor.data()) out.f32(static_cast<float>(v));
  return out.data();
}

template <Real T>
FeatureMap<T> decode_feature_map(std::span<const char> bytes, SpatialFrame frame) {
  io::ByteReader in(bytes);
  if (in.bytes(4, "magic") != "MMFF") throw FormatError("bad feature map magic", 0);
  const std::uint16_t version = in.u16("version");
  if (version != kFeatureMapVersion) {
    throw FormatError("unsupported feature map version " + std::to_string(version), 4);
  }
  const std::uint8_t rank = in.u8("rank");
  if (rank != 3) throw FormatError("feature map rank must be 3, got " + std::to_string(rank), 6);
  Shape dims(3);
  std::uint64_t numel = 1;
  for (auto& d : dims) {
    d = in.u32("dims");
    numel *= d;
    if (numel > (std::uint64_t{1} << 40)) throw FormatError("feature map dim overflow", in.offset());
  }
  if (numel * 4 != in.remaining()) {
    if (numel * 4 > in.remaining()) throw FormatError("truncated feature map payload", in.offset() + in.remaining());
    throw FormatError("trailing bytes after feature map payload", in.offset() + numel * 4);
  }
  std::vector<T> data(numel);
  for (auto& v : data) v = static_cast<T>(in.f32("payload"));
  return FeatureMap<T>{frame, Tensor<T>(std::move(dims), std::move(data))};
}

template <Real T>
void save_feature_map(const FeatureMap<T>& map, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_feature_map(map));
}

template <Real T>
FeatureMap<T> load_feature_map(const std::filesystem::path& path, SpatialFrame frame) {
  return decode_feature_map<T>(io::read_file(path), frame);
}

template <Real T>
Tensor<T> resize_nearest(const Tensor<T>& image, std::size_t out_h, std::size_t out_w) {
  if (image.rank() != 3) throw ShapeError("image must be C x H x W, got " + shape_string(image.dims()));
  if (out_h == 0 || out_w == 0) throw ConfigError("resize_nearest: zero-sized target");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor<T> out({c, out_h, out_w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < out_h; ++i) {
      const std::size_t si = i * h / out_h;
      for (std::size_t j = 0; j < out_w; ++j) out.at(ch, i, j) = image.at(ch, si, j * w / out_w);
    }
  return out;
}

// ---------------------------------------------------------------------------

bool Box3d::contains(const Point& p, double eps) const {
  const double dx = p.x - center[0], dy = p.y - center[1], dz = p.z - center[2];
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  return std::abs(lx) <= size[0] / 2 + eps && std::abs(ly) <= size[1] / 2 + eps &&
         std::abs(dz) <= size[2] / 2 + eps;
}

std::array<double, 4> Box3d::bev_bounds() const {
  const double c = std::abs(std::cos(yaw)), s = std::abs(std::sin(yaw));
  const double hx = (size[0] * c + size[1] * s) / 2;
  const double hy = (size[0] * s + size[1] * c) / 2;
  return {center[0] - hx, center[1] - hy, center[0] + hx, center[1] + hy};
}

namespace {

float below(double value, double upper) {
  float f = static_cast<float>(value);
  while (static_cast<double>(f) >= upper) f = std::nextafter(f, -INFINITY);
  return f;
}

float within(double value, const std::array<double, 2>& axis) {
  float f = below(value, axis[1]);
  while (static_cast<double>(f) < axis[0]) f = std::nextafter(f, INFINITY);
  return f;
}

bool bev_overlap(const std::array<double, 4>& a, const std::array<double, 4>& b, double gap) {
  return a[0] < b[2] + gap && b[0] < a[2] + gap && a[1] < b[3] + gap && b[1] < a[3] + gap;
}

}  // namespace

SyntheticScene synth_scene(std::uint64_t seed, std::size_t n_objects, std::size_t noise_points,
                           const SceneOptions& options) {
  if (n_objects < 1) throw ConfigError("synth_scene needs at least one object");
  options.range.validate();
  SplitMix64 rng(seed * 0x2545F4914F6CDD1Dull + 0x5851F42D4C957F2Dull);
  SyntheticScene scene;
  const auto& range = options.range;
  constexpr int kMaxAttempts = 10000;
  for (std::size_t o = 0; o < n_objects; ++o) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      Box3d box;
      for (int a = 0; a < 3; ++a) {
        box.size[a] = options.mean_size[a] * (1.0 + options.size_jitter * rng.uniform(-1.0, 1.0));
      }
      // (-pi, pi]
      box.yaw = std::numbers::pi - 2.0 * std::numbers::pi * rng.uniform();
      box.center[0] = rng.uniform(range.x[0], range.x[1]);
      box.center[1] = rng.uniform(range.y[0], range.y[1]);
      box.center[2] = options.ground_z + box.size[2] / 2;
      const auto b = box.bev_bounds();
      if (b[0] < range.x[0] + options.border || b[2] > range.x[1] - options.border ||
          b[1] < range.y[0] + options.border || b[3] > range.y[1] - options.border) {
        continue;
      }
      if (box.center[2] - box.size[2] / 2 < range.z[0] || box.center[2] + box.size[2] / 2 >= range.z[1]) {
        throw ConfigError("synthetic object height does not fit the z range");
      }
      bool clash = false;
      for (const auto& other : scene.boxes) clash = clash || bev_overlap(b, other.bev_bounds(), options.gap);
      if (clash) continue;
      scene.boxes.push_back(box);
      placed = true;
    }
    if (!placed) throw ConfigError("cannot place " + std::to_string(n_objects) + " synthetic objects in range");
  }

  for (const auto& box : scene.boxes) {
    const double c = std::cos(box.yaw), s = std::sin(box.yaw);
    const std::size_t count = std::max<std::size_t>(options.points_per_object, 1);
    for (std::size_t i = 0; i < count; ++i) {
      // Keep samples strictly inside so float rounding cannot push them out.
      const double lx = rng.uniform(-0.49, 0.49) * box.size[0];
      const double ly = rng.uniform(-0.49, 0.49) * box.size[1];
      // The front 30% of the length only reaches half height, so heading is visible.
      const double top = lx > 0.2 * box.size[0] ? 0.0 : 0.49;
      const double lz = rng.uniform(-0.49, top) * box.size[2];
      Point p;
      p.x = within(box.center[0] + c * lx - s * ly, range.x);
      p.y = within(box.center[1] + s * lx + c * ly, range.y);
      p.z = within(box.center[2] + lz, range.z);
      p.r = static_cast<float>(rng.uniform());
      scene.cloud.points.push_back(p);
    }
  }
  for (std::size_t i = 0; i < noise_points; ++i) {
    Point p;
    p.x = within(rng.uniform(range.x[0], range.x[1]), range.x);
    p.y = within(rng.uniform(range.y[0], range.y[1]), range.y);
    p.z = within(rng.uniform(range.z[0], range.z[1]), range.z);
    p.r = static_cast<float>(rng.uniform());
    scene.cloud.points.push_back(p);
  }
  return scene;
}

template <Real T>
Tensor<T> synth_image(std::uint64_t seed, std::size_t channels, std::size_t height, std::size_t width) {
  Tensor<T> image({channels, height, width});
  SplitMix64 rng(seed ^ 0xA0761D6478BD642Full);
  for (auto& v : image.data()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  return image;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json scene_json(const SyntheticScene& scene) {
  nlohmann::json points = nlohmann::json::array();
  for (const auto& p : scene.cloud.points) points.push_back({p.x, p.y, p.z, p.r});
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : scene.boxes) {
    boxes.push_back({b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw,
                     static_cast<double>(b.class_id)});
  }
  return {{"points", std::move(points)}, {"boxes", std::move(boxes)}};
}

SyntheticScene scene_from(const nlohmann::json& j) {
  SyntheticScene scene;
  for (const auto& p : j.at("points")) {
    if (!p.is_array() || p.size() != 4) throw ConfigError("scene point must be a 4-number array");
    scene.cloud.points.push_back({p[0].get<float>(), p[1].get<float>(), p[2].get<float>(), p[3].get<float>()});
  }
  for (const auto& b : j.at("boxes")) {
    if (!b.is_array() || b.size() != 8) throw ConfigError("scene box must be an 8-number array");
    Box3d box;
    for (int a = 0; a < 3; ++a) {
      box.center[a] = b[a].get<double>();
      box.size[a] = b[3 + a].get<double>();
    }
    box.yaw = b[6].get<double>();
    box.class_id = static_cast<int>(b[7].get<double>());
    scene.boxes.push_back(box);
  }
  return scene;
}

}  // namespace

std::string scenes_to_json(std::span<const SyntheticScene> scenes) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& s : scenes) list.push_back(scene_json(s));
  return nlohmann::json{{"scenes", std::move(list)}}.dump();
}

std::vector<SyntheticScene> scenes_from_json(std::string_view text) {
  std::vector<SyntheticScene> scenes;
  try {
    const auto j = nlohmann::json::parse(text);
    const nlohmann::json* list = &j;
    if (j.is_object() && j.contains("scenes")) list = &j.at("scenes");
    if (list->is_array()) {
      for (const auto& s : *list) scenes.push_back(scene_from(s));
    } else {
      scenes.push_back(scene_from(*list));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid scene JSON: ") + e.what());
  }
  return scenes;
}

std::vector<SyntheticScene> read_scenes(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return scenes_from_json(std::string_view(bytes.data(), bytes.size()));
}

void write_scenes(std::span<const SyntheticScene> scenes, const std::filesystem::path& path) {
  io::write_text_atomic(path, scenes_to_json(scenes));
}

template std::vector<char> encode_feature_map(const FeatureMap<float>&);
template std::vector<char> encode_feature_map(const FeatureMap<double>&);
template FeatureMap<float> decode_feature_map(std::span<const char>, SpatialFrame);
template FeatureMap<double> decode_feature_map(std::span<const char>, SpatialFrame);
template void save_feature_map(const FeatureMap<float>&, const std::filesystem::path&);
template void save_feature_map(const FeatureMap<double>&, const std::filesystem::path&);
template FeatureMap<float> load_feature_map(const std::filesystem::path&, SpatialFrame);
template FeatureMap<double> load_feature_map(const std::filesystem::path&, SpatialFrame);
template Tensor<float> resize_nearest(const Tensor<float>&, std::size_t, std::size_t);
template Tensor<double> resize_nearest(const Tensor<double>&, std::size_t, std::size_t);
template Tensor<float> synth_image(std::uint64_t, std::size_t, std::size_t, std::size_t);
template Tensor<double> synth_image(std::uint64_t, std::size_t, std::size_t, std::size_t);

}  // namespace mmfusion
