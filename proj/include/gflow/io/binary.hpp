#pragma once

// Little-endian primitive encoding shared by the checkpoint and trajectory
// store formats. Values are always written byte by byte so files are
// portable regardless of host endianness.

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "gflow/error.hpp"

namespace gflow::io {

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put(bits, 8);
  }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }

  std::size_t size() const { return buf_.size(); }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

  void write_file(const std::string& path) const { io::write_file(path, buf_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xffu));
  }
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked cursor over an in-memory file image. Every read past the
/// end raises FormatError naming the offending byte offset.
class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> data) : data_(std::move(data)) {}
  static ByteReader from_file(const std::string& path) { return ByteReader(read_file(path)); }

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() {
    const std::uint64_t bits = get(8);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string str() { return bytes(u32()); }

  std::size_t offset() const { return pos_; }
  void seek(std::size_t pos) {
    if (pos > data_.size()) throw FormatError("seek past end of data", pos);
    pos_ = pos;
  }
  std::size_t size() const { return data_.size(); }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw FormatError("truncated data: needed " + std::to_string(n) + " bytes", pos_);
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::vector<std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace gflow::io
