#pragma once

// Binary parameter checkpoints.
//
// Layout (all integers little-endian):
//   magic    5 bytes  "DLAB1"
//   version  u32      currently 1
//   count    u32      number of records
//   record*  count times:
//     name_len u32, name (UTF-8, name_len bytes),
//     rank u32, extents u64 x rank,
//     payload  f64 x prod(extents), IEEE-754 binary64 little-endian, row-major

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dlab/tensor.hpp"

namespace dlab {

inline constexpr char kCheckpointMagic[5] = {'D', 'L', 'A', 'B', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& params);
std::vector<NamedTensor> read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& params);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace dlab
