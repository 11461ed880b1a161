#include "mmfusion/checkpoint.hpp"

#include <limits>

#include "mmfusion/binary_io.hpp"

namespace mmfusion {

template <Real T>
std::vector<char> encode_checkpoint(const ParamStore<T>& params) {
  io::ByteWriter out;
  out.bytes("MMCK");
  out.u16(kCheckpointVersion);
  out.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, entry] : params.entries()) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw ConfigError("parameter name too long for checkpoint: " + name);
    }
    out.u16(static_cast<std::uint16_t>(name.size()));
    out.bytes(name);
    const auto& dims = entry.value.dims();
    out.u8(static_cast<std::uint8_t>(dims.size()));
    for (std::size_t d : dims) out.u32(static_cast<std::uint32_t>(d));
    for (T v : entry.value.data()) out.f32(static_cast<float>(v));
  }
  return out.data();
}

template <Real T>
ParamStore<T> decode_checkpoint(std::span<const char> bytes) {
  io::ByteReader in(bytes);
  if (in.bytes(4, "magic") != "MMCK") throw FormatError("bad checkpoint magic", 0);
  const std::uint16_t version = in.u16("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  const std::uint32_t count = in.u32("entry count");
  ParamStore<T> params;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::size_t entry_offset = in.offset();
    const std::uint16_t name_len = in.u16("name length");
    std::string name = in.bytes(name_len, "name");
    const std::uint8_t rank = in.u8("rank");
    Shape dims(rank);
    std::uint64_t numel = 1;
    for (auto& d : dims) {
      d = in.u32("dims");
      numel *= d;
      if (numel > in.remaining()) throw FormatError("tensor '" + name + "' larger than file", in.offset());
    }
    in.require(numel * 4, "tensor payload");
    std::vector<T> data(numel);
    for (auto& v : data) v = static_cast<T>(in.f32("tensor payload"));
    if (params.contains(name)) throw FormatError("duplicate checkpoint entry '" + name + "'", entry_offset);
    params.add(name, Tensor<T>(std::move(dims), std::move(data)));
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes after checkpoint entries", in.offset());
  return params;
}

template <Real T>
void save_checkpoint(const ParamStore<T>& params, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(params));
}

template <Real T>
ParamStore<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(io::read_file(path));
}

template <Real T>
void load_checkpoint_into(ParamStore<T>& params, const std::filesystem::path& path) {
  ParamStore<T> loaded = load_checkpoint<T>(path);
  for (const auto& [name, entry] : loaded.entries()) {
    if (!params.contains(name)) throw ConfigError("checkpoint entry '" + name + "' is not a model parameter");
  }
  for (auto& [name, entry] : params.entries()) {
    if (!loaded.contains(name)) throw ConfigError("checkpoint lacks parameter '" + name + "'");
    const Tensor<T>& value = loaded.value(name);
    if (value.dims() != entry.value.dims()) {
      throw ConfigError("checkpoint parameter '" + name + "' has dims " + shape_string(value.dims()) +
                        ", model expects " + shape_string(entry.value.dims()));
    }
    entry.value = value;
    entry.grad.fill(T(0));
  }
}

template std::vector<char> encode_checkpoint(const ParamStore<float>&);
template std::vector<char> encode_checkpoint(const ParamStore<double>&);
template ParamStore<float> decode_checkpoint(std::span<const char>);
template ParamStore<double> decode_checkpoint(std::span<const char>);
template void save_checkpoint(const ParamStore<float>&, const std::filesystem::path&);
template void save_checkpoint(const ParamStore<double>&, const std::filesystem::path&);
template ParamStore<float> load_checkpoint(const std::filesystem::path&);
template ParamStore<double> load_checkpoint(const std::filesystem::path&);
template void load_checkpoint_into(ParamStore<float>&, const std::filesystem::path&);
template void load_checkpoint_into(ParamStore<double>&, const std::filesystem::path&);

}  // namespace mmfusion
