#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fuseseg/params.hpp"

namespace fuseseg::io {

// Binary checkpoint: magic "F4SG", version u32, entry count u32, then per
// entry [name_len u32][name][dtype u8 = 0 (f32)][ndim u32][dims u32 x ndim]
// [payload f32 LE], closed by a CRC32 of all preceding bytes. All integers
// little-endian. Save/load/save round-trips byte-identically.
constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const ParamSet& params);

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;  // widened from the f32 payload
};

std::vector<CheckpointEntry> read_checkpoint(const std::string& path);

// Copies matching entries into the ParamSet (names and shapes must agree).
// Missing parameters raise; extra file entries are ignored so a combined
// checkpoint can feed a single sub-model.
void load_checkpoint(const std::string& path, ParamSet& params);

uint32_t crc32(const uint8_t* data, std::size_t n);

}  // namespace fuseseg::io
