#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace knnmt {

using TokenId = std::uint32_t;

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller supplied an out-of-range parameter or inconsistent configuration.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// A file on disk is truncated, has a bad magic, or disagrees with its header.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Artifacts were produced from a different model, vocabulary or datastore.
class StaleArtifact : public Error {
 public:
  using Error::Error;
};

// 64-bit FNV-1a. Incremental: feed the previous digest back in as `state`.
constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a(std::span<const std::byte> bytes,
                           std::uint64_t state = kFnvOffset) {
  for (std::byte b : bytes) {
    state ^= static_cast<std::uint64_t>(b);
    state *= kFnvPrime;
  }
  return state;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t state = kFnvOffset) {
  return fnv1a(std::as_bytes(std::span(s.data(), s.size())), state);
}

std::string hex64(std::uint64_t v);
std::uint64_t parse_hex64(std::string_view s);

// Little-endian append-only byte buffer used by every binary writer.
class ByteWriter {
 public:
  void bytes(std::span<const std::byte> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void magic(std::string_view m) { bytes(std::as_bytes(std::span(m.data(), m.size()))); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f32s(std::span<const float> v);
  // Narrows each value to float32.
  void f32s_from(std::span<const double> v);
  void u32s(std::span<const std::uint32_t> v);
  void str(std::string_view s);

  const std::vector<std::byte>& data() const { return buf_; }

 private:
  std::vector<std::byte> buf_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::byte> data, std::string what)
      : data_(data), what_(std::move(what)) {}

  void expect_magic(std::string_view m);
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  std::vector<float> f32s(std::size_t n);
  std::vector<double> f32s_as_double(std::size_t n);
  std::vector<std::uint32_t> u32s(std::size_t n);
  std::string str();

  std::size_t remaining() const { return data_.size() - pos_; }
  void expect_end() const;

 private:
  std::span<const std::byte> take(std::size_t n);

  std::span<const std::byte> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

std::vector<std::byte> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::byte> data);

}  // namespace knnmt
