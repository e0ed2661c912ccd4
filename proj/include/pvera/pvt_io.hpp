#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "pvera/tensor.hpp"

namespace pvera {

/// PVT1 tensor files: the 8-byte magic "PVTENS01", a little-endian u32 rank,
/// rank little-endian u64 extents, then the values as little-endian f64 in
/// row-major order. Nothing else, no padding.
inline constexpr std::string_view kPvtMagic = "PVTENS01";

std::vector<std::uint8_t> encode_pvt(const Tensor& t);
/// Throws FormatError on bad magic, truncation, or trailing bytes.
Tensor decode_pvt(std::span<const std::uint8_t> bytes);

void write_pvt(const std::filesystem::path& path, const Tensor& t);
Tensor read_pvt(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace pvera
