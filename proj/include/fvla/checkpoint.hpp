#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fvla/tensor.hpp"

namespace fvla {

// One named array in a checkpoint. Besides model weights this carries
// normalization statistics and model metadata (as 1-element records), so a
// checkpoint is self-describing.
struct ParamRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

// File layout: magic "FVLA", version u32 LE, then per-parameter records
// (name length u16, UTF-8 name, rank u8, extents u32[], f64 payload LE).
// Round trips are byte-exact.
void write_checkpoint(const std::filesystem::path& path, const std::vector<ParamRecord>& records);
std::vector<ParamRecord> read_checkpoint(const std::filesystem::path& path);

constexpr uint32_t kCheckpointVersion = 1;

}  // namespace fvla
