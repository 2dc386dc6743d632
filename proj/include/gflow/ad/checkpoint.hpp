#pragma once

// Named-tensor checkpoint file.
//
//   offset  field
//   0       magic "GFCK"
//   4       u32 version (currently 1)
//   8       u32 metadata entry count, then per entry: str key, str value
//   ..      u32 tensor count, then per tensor:
//             str name, u8 trainable, u32 rank, u64 extents[rank],
//             f64 payload[prod(extents)] in row-major order
//
// str = u32 byte length + UTF-8 bytes. All integers and floats little-endian.

#include <map>
#include <string>

#include "gflow/ad/param_store.hpp"

namespace gflow::ad {

inline constexpr char kCheckpointMagic[4] = {'G', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, std::string> meta;
  ParamStore<double> tensors;
};

void save_checkpoint(const std::string& path, const ParamStore<double>& tensors,
                     const std::map<std::string, std::string>& meta = {});
Checkpoint load_checkpoint(const std::string& path);

/// In-memory variants used by tests and by formats that embed a checkpoint.
std::vector<std::uint8_t> encode_checkpoint(const ParamStore<double>& tensors,
                                            const std::map<std::string, std::string>& meta);
Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes);

}  // namespace gflow::ad
