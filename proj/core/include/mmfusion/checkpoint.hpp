#pragma once

#include <filesystem>
#include <vector>

#include "mmfusion/tensor.hpp"

namespace mmfusion {

// MMCK layout (all little-endian):
//   "MMCK" | u16 version | u32 entry count |
//   per entry: u16 name length | UTF-8 name | u8 rank | rank x u32 dims | f32 payload
inline constexpr std::uint16_t kCheckpointVersion = 1;

template <Real T>
std::vector<char> encode_checkpoint(const ParamStore<T>& params);
template <Real T>
ParamStore<T> decode_checkpoint(std::span<const char> bytes);

template <Real T>
void save_checkpoint(const ParamStore<T>& params, const std::filesystem::path& path);
template <Real T>
ParamStore<T> load_checkpoint(const std::filesystem::path& path);

/// Overwrites the values of `params` from a checkpoint. Every entry of `params`
/// must be present with identical dims; extra checkpoint entries are an error.
template <Real T>
void load_checkpoint_into(ParamStore<T>& params, const std::filesystem::path& path);

}  // namespace mmfusion
