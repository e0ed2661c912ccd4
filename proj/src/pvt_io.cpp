#include "pvera/pvt_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "pvera/errors.hpp"

namespace pvera {

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <typename T>
T get_le(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (bytes.size() - pos < sizeof(T)) {
    throw FormatError("PVT1: truncated at byte " + std::to_string(pos) + " of " +
                      std::to_string(bytes.size()));
  }
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    value |= static_cast<T>(static_cast<T>(bytes[pos + i]) << (8 * i));
  pos += sizeof(T);
  return value;
}

}  // namespace

std::vector<std::uint8_t> encode_pvt(const Tensor& t) {
  std::vector<std::uint8_t> out;
  out.reserve(kPvtMagic.size() + 4 + 8 * t.rank() + 8 * t.numel());
  out.insert(out.end(), kPvtMagic.begin(), kPvtMagic.end());
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_le<std::uint64_t>(out, static_cast<std::uint64_t>(e));
  for (double v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Tensor decode_pvt(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kPvtMagic.size() ||
      std::memcmp(bytes.data(), kPvtMagic.data(), kPvtMagic.size()) != 0) {
    throw FormatError("PVT1: bad magic (expected \"PVTENS01\")");
  }
  std::size_t pos = kPvtMagic.size();
  const auto rank = get_le<std::uint32_t>(bytes, pos);
  Shape shape(rank);
  std::size_t numel = 1;
  for (auto& e : shape) {
    e = static_cast<std::size_t>(get_le<std::uint64_t>(bytes, pos));
    numel *= e;
  }
  if ((bytes.size() - pos) / 8 < numel) {
    throw FormatError("PVT1: truncated payload, header " + shape_str(shape) + " needs " +
                      std::to_string(numel * 8) + " bytes, found " +
                      std::to_string(bytes.size() - pos));
  }
  std::vector<double> data(numel);
  for (auto& v : data) v = std::bit_cast<double>(get_le<std::uint64_t>(bytes, pos));
  if (pos != bytes.size()) {
    throw FormatError("PVT1: " + std::to_string(bytes.size() - pos) + " trailing bytes");
  }
  return Tensor(std::move(shape), std::move(data));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInputError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("short write to " + path.string());
}

void write_pvt(const std::filesystem::path& path, const Tensor& t) {
  write_file_bytes(path, encode_pvt(t));
}

Tensor read_pvt(const std::filesystem::path& path) {
  try {
    return decode_pvt(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace pvera
