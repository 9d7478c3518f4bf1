#pragma once

// Binary training checkpoints.
//
// Little-endian layout:
//   "SVCK" | u32 version | records... | u32 CRC32 of everything before it
// Each record is
//   u16 name length | name bytes | u8 ndim | u32 dims[ndim] | raw 32-bit values
// Parameters are stored as "param/<name>", Adam/LAMB moments as
// "opt/m/<name>" and "opt/v/<name>", EMA shadows as "ema/<name>". Metadata
// records under "meta/" hold text (configuration, RNG state) packed four bytes
// per 32-bit word, zero padded, and counters split into two 32-bit words.

#include <cstdint>
#include <string>
#include <vector>

#include "snapdiff/config.hpp"
#include "snapdiff/train.hpp"

namespace snapdiff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointData {
  RunConfig config;
  TrainState state;
};

std::vector<std::uint8_t> encode_checkpoint(const RunConfig& cfg, const TrainState& state);
// Throws CheckpointError on bad magic, version, truncation or CRC mismatch.
CheckpointData decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::string& path, const RunConfig& cfg, const TrainState& state);
CheckpointData load_checkpoint(const std::string& path);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace snapdiff
