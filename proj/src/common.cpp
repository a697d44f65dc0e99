#include "knnmt/common.hpp"

#include <bit>
#include <charconv>
#include <cstdio>

namespace knnmt {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex64(std::string_view s) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw FormatError("bad hex fingerprint '" + std::string(s) + "'");
  }
  return v;
}

void ByteWriter::u32(std::uint32_t v) { bytes(std::as_bytes(std::span(&v, 1))); }
void ByteWriter::u64(std::uint64_t v) { bytes(std::as_bytes(std::span(&v, 1))); }
void ByteWriter::f32(float v) { bytes(std::as_bytes(std::span(&v, 1))); }
void ByteWriter::f32s(std::span<const float> v) { bytes(std::as_bytes(v)); }
void ByteWriter::u32s(std::span<const std::uint32_t> v) { bytes(std::as_bytes(v)); }

void ByteWriter::f32s_from(std::span<const double> v) {
  for (double x : v) f32(static_cast<float>(x));
}

void ByteWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(std::as_bytes(std::span(s.data(), s.size())));
}

std::span<const std::byte> ByteReader::take(std::size_t n) {
  if (n > remaining()) {
    throw FormatError(what_ + ": truncated (need " + std::to_string(n) + " bytes at offset " +
                      std::to_string(pos_) + ", have " + std::to_string(remaining()) + ")");
  }
  auto s = data_.subspan(pos_, n);
  pos_ += n;
  return s;
}

void ByteReader::expect_magic(std::string_view m) {
  auto s = take(m.size());
  if (std::memcmp(s.data(), m.data(), m.size()) != 0) {
    throw FormatError(what_ + ": bad magic, expected " + std::string(m));
  }
}

std::uint32_t ByteReader::u32() {
  std::uint32_t v;
  std::memcpy(&v, take(4).data(), 4);
  return v;
}

std::uint64_t ByteReader::u64() {
  std::uint64_t v;
  std::memcpy(&v, take(8).data(), 8);
  return v;
}

float ByteReader::f32() {
  float v;
  std::memcpy(&v, take(4).data(), 4);
  return v;
}

std::vector<float> ByteReader::f32s(std::size_t n) {
  std::vector<float> v(n);
  auto s = take(n * sizeof(float));
  std::memcpy(v.data(), s.data(), s.size());
  return v;
}

std::vector<double> ByteReader::f32s_as_double(std::size_t n) {
  auto f = f32s(n);
  return {f.begin(), f.end()};
}

std::vector<std::uint32_t> ByteReader::u32s(std::size_t n) {
  std::vector<std::uint32_t> v(n);
  auto s = take(n * sizeof(std::uint32_t));
  std::memcpy(v.data(), s.data(), s.size());
  return v;
}

std::string ByteReader::str() {
  auto n = u32();
  auto s = take(n);
  return {reinterpret_cast<const char*>(s.data()), s.size()};
}

void ByteReader::expect_end() const {
  if (remaining() != 0) {
    throw FormatError(what_ + ": " + std::to_string(remaining()) + " trailing bytes");
  }
}

std::vector<std::byte> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> buf(size);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
  if (!in) throw Error("short read on " + path.string());
  return buf;
}

void write_file(const std::filesystem::path& path, std::span<const std::byte> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw Error("write failed on " + path.string());
}

}  // namespace knnmt
