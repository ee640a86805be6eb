#pragma once

#include "attmil/model.hpp"

#include <string>
#include <string_view>

namespace attmil {

/// Binary model container:
///
///   "AMIL"  u32 version (=1)
///   u64 config length, config as UTF-8 JSON
///   per parameter, until end of file:
///     u32 name length, name bytes, u32 rank, rank x u64 extents, numel x f64
///
/// All integers and doubles little-endian.
struct Checkpoint {
  ModelConfig config;
  ModelParams params;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr std::string_view kCheckpointMagic = "AMIL";
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError on malformed bytes and ConfigError when the parameters
/// do not match the embedded config.
Checkpoint decode_checkpoint(std::string_view bytes);

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace attmil
