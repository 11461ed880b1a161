#include "mmfusion/streams.hpp"

#include <algorithm>

namespace mmfusion {

namespace {

void require_positive(const MapDims& d, const char* what) {
  if (d.c == 0 || d.h == 0 || d.w == 0) throw ConfigError(std::string(what) + " dims must be positive");
}

std::string conv_prefix(std::size_t i) { return "bev.conv" + std::to_string(i + 1); }

}  // namespace

void StreamConfig::validate() const {
  require_positive(lidar_out, "lidar_out");
  require_positive(image_out, "image_out");
  require_positive(image_in, "image_in");
  if (lidar_out.c != image_out.c) {
    throw ConfigError("lidar and image streams must share a channel width (" + std::to_string(lidar_out.c) +
                      " vs " + std::to_string(image_out.c) + ")");
  }
  if (bev_channels.empty()) throw ConfigError("bev_channels must not be empty");
  if (std::find(bev_channels.begin(), bev_channels.end(), 0u) != bev_channels.end()) {
    throw ConfigError("bev_channels entries must be positive");
  }
  if (image_patch == 0) throw ConfigError("image_patch must be positive");
}

std::size_t StreamConfig::patch_rows() const { return std::max<std::size_t>(image_in.h / image_patch, 1); }
std::size_t StreamConfig::patch_cols() const { return std::max<std::size_t>(image_in.w / image_patch, 1); }

template <Real T>
void init_stream_params(ParamStore<T>& params, const StreamConfig& config, std::size_t bev_in_channels) {
  config.validate();
  if (bev_in_channels == 0) throw ConfigError("BEV input must have at least one channel");
  std::size_t in = bev_in_channels;
  for (std::size_t i = 0; i < config.bev_channels.size(); ++i) {
    const std::size_t out = config.bev_channels[i];
    params.add_uniform(conv_prefix(i) + ".w", {out, in, 3, 3}, in * 9);
    params.add_zeros(conv_prefix(i) + ".b", {out});
    in = out;
  }
  add_linear_params(params, "bev.proj", in, config.lidar_out.c);
  const std::size_t c = config.image_out.c;
  add_fc_block_params(params, "image.fc1", FcBlockSpec{config.image_in.c, c, c, true});
  add_fc_block_params(params, "image.fc2", FcBlockSpec{c, c, c, true});
}

template <Real T>
Var<T> bev_encode(Var<T> bev, const StreamConfig& config, ParamStore<T>& params) {
  config.validate();
  if (bev.value().rank() != 3) throw ShapeError("bev_encode: input must be C x H x W, got " + shape_string(bev.dims()));
  Tape<T>& tape = bev.tape();
  Var<T> x = bev;
  for (std::size_t i = 0; i < config.bev_channels.size(); ++i) {
    x = relu(conv2d(x, tape.param(params, conv_prefix(i) + ".w"), tape.param(params, conv_prefix(i) + ".b"), 2, 1));
  }
  x = conv1x1(x, params, "bev.proj");
  return adaptive_resize2d(x, config.lidar_out.h, config.lidar_out.w);
}

template <Real T>
Var<T> image_encode(Var<T> image, const StreamConfig& config, ParamStore<T>& params) {
  config.validate();
  if (config.image_source != ImageSource::kStandInEncoder) {
    throw ConfigError("image_encode called while the image source is a feature file");
  }
  if (image.dims() != config.image_in.shape()) {
    throw ConfigError("image dims " + shape_string(image.dims()) + " do not match configured " +
                      shape_string(config.image_in.shape()));
  }
  const std::size_t rows = config.patch_rows(), cols = config.patch_cols();
  const std::size_t c = config.image_out.c;
  Var<T> patches = avg_pool2d(image, rows, cols);
  Var<T> tokens = map_to_tokens(patches);
  tokens = fc_block(tokens, FcBlockSpec{config.image_in.c, c, c, true}, params, "image.fc1");
  tokens = fc_block(tokens, FcBlockSpec{c, c, c, true}, params, "image.fc2");
  return adaptive_resize2d(tokens_to_map(tokens, rows, cols), config.image_out.h, config.image_out.w);
}

template <Real T>
FeatureMap<T> load_image_features(const std::filesystem::path& path, const StreamConfig& config) {
  FeatureMap<T> map = load_feature_map<T>(path, SpatialFrame::kImagePlane);
  if (map.tensor.dims() != config.image_out.shape()) {
    throw ConfigError("image feature file dims " + shape_string(map.tensor.dims()) + " do not match configured " +
                      shape_string(config.image_out.shape()));
  }
  return map;
}

#define MMFUSION_INSTANTIATE(T)                                                          \
  template void init_stream_params(ParamStore<T>&, const StreamConfig&, std::size_t);    \
  template Var<T> bev_encode(Var<T>, const StreamConfig&, ParamStore<T>&);               \
  template Var<T> image_encode(Var<T>, const StreamConfig&, ParamStore<T>&);             \
  template FeatureMap<T> load_image_features(const std::filesystem::path&, const StreamConfig&);

MMFUSION_INSTANTIATE(float)
MMFUSION_INSTANTIATE(double)

#undef MMFUSION_INSTANTIATE

}  // namespace mmfusion
