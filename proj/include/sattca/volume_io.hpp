#pragma once

// Binary volume/mask files.
//
//   offset  size  field
//   0       4     magic: "SVOL" (float32 volume) or "SMSK" (uint8 mask)
//   4       4     format version, u32 LE (currently 1)
//   8       12    dims d, h, w as u32 LE
//   20      12    spacing d, h, w in mm as f32 LE
//   32      ...   payload, slice-major: f32 LE per voxel, or u8 (0/1) per voxel

#include <sattca/volgrid.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace sattca {

inline constexpr std::uint32_t kVolumeFormatVersion = 1;
inline constexpr std::size_t kVolumeHeaderBytes = 32;

std::vector<std::uint8_t> encode_volume(const Volume3D& vol);
Volume3D decode_volume(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> encode_mask(const BinaryMask3D& mask, const Spacing3& spacing);

struct DecodedMask {
  BinaryMask3D mask;
  Spacing3 spacing = Spacing3::Ones();
};
DecodedMask decode_mask(const std::vector<std::uint8_t>& bytes);

void write_volume(const std::filesystem::path& path, const Volume3D& vol);
Volume3D read_volume(const std::filesystem::path& path);

void write_mask(const std::filesystem::path& path, const BinaryMask3D& mask,
                const Spacing3& spacing = Spacing3::Ones());
DecodedMask read_mask(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace sattca
