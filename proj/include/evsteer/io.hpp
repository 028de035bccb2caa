#pragma once

// Byte-level helpers shared by the binary formats (NFMT, EVEC).

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace evsteer::io {

class ByteWriter {
 public:
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void text(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u32(std::uint32_t v);
  void f32(float v);
  void f32s(std::span<const float> v) {
    for (float x : v) f32(x);
  }
  [[nodiscard]] std::vector<std::uint8_t>& buffer() noexcept { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

// Bounds-checked little-endian reader; throws FormatError naming the offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : buf_(b) {}

  void expect_magic(std::string_view magic);
  std::uint32_t u32();
  float f32();
  std::string text(std::size_t n);
  [[nodiscard]] std::size_t offset() const noexcept { return pos_; }
  [[nodiscard]] std::size_t remaining() const noexcept { return buf_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const;

  std::span<const std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

[[nodiscard]] std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);
void write_text(const std::string& path, std::string_view text);
[[nodiscard]] std::string read_text(const std::string& path);

[[nodiscard]] std::string sha256_hex(std::span<const std::uint8_t> bytes);
[[nodiscard]] std::string sha256_hex(std::string_view text);

}  // namespace evsteer::io
