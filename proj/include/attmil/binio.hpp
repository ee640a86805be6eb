#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace attmil::binio {

/// Little-endian encoder into a growable byte string.
class Writer {
 public:
  void bytes(std::string_view raw) { buf_.append(raw); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void f64s(std::span<const double> values);
  /// u32 length prefix followed by raw bytes.
  void str32(std::string_view s);

  const std::string& buffer() const noexcept { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

/// Little-endian decoder over a byte view. Every failure throws FormatError
/// carrying the offset where decoding stopped.
class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  std::uint64_t offset() const noexcept { return pos_; }
  std::uint64_t remaining() const noexcept { return data_.size() - pos_; }
  bool at_end() const noexcept { return pos_ == data_.size(); }

  std::string_view bytes(std::uint64_t n, const char* what);
  std::uint32_t u32(const char* what);
  std::uint64_t u64(const char* what);
  double f64(const char* what);
  void f64s(std::span<double> out, const char* what);
  std::string str32(const char* what);
  /// Consumes `magic` or throws at the current offset.
  void expect(std::string_view magic, const char* what);
  [[noreturn]] void fail(const std::string& msg) const;

 private:
  std::string_view data_;
  std::uint64_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

}  // namespace attmil::binio
