#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "elf/image_io.hpp"  // IoError
#include "elf/tensor.hpp"

namespace elf {

/// Versioned binary container of named f32 tensors plus an epoch counter.
/// Layout (little-endian): magic "ELF1", format_version u32, epoch u32,
/// tensor count u32, then per tensor: name length u16, UTF-8 name, rank u8,
/// dims u32 each, dtype tag u8 (0 = f32), payload; trailing CRC32 of all
/// preceding bytes.
struct CheckpointData {
  std::uint32_t epoch = 0;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::uint32_t crc32(const std::uint8_t* data, std::size_t n);

std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& data);
CheckpointData decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint_file(const std::string& path, const CheckpointData& data);
CheckpointData read_checkpoint_file(const std::string& path);

}  // namespace elf
