#include "attmil/binio.hpp"

#include "attmil/errors.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace attmil::binio {

namespace {

template <typename T>
void put_le(std::string& buf, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::string_view bytes) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  }
  return v;
}

}  // namespace

void Writer::u32(std::uint32_t v) { put_le(buf_, v); }
void Writer::u64(std::uint64_t v) { put_le(buf_, v); }
void Writer::f64(double v) { put_le(buf_, std::bit_cast<std::uint64_t>(v)); }

void Writer::f64s(std::span<const double> values) {
  buf_.reserve(buf_.size() + values.size() * 8);
  for (double v : values) f64(v);
}

void Writer::str32(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s);
}

void Reader::fail(const std::string& msg) const { throw FormatError(pos_, msg); }

std::string_view Reader::bytes(std::uint64_t n, const char* what) {
  if (n > remaining()) fail(std::string("truncated input reading ") + what);
  auto out = data_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::uint32_t Reader::u32(const char* what) { return get_le<std::uint32_t>(bytes(4, what)); }
std::uint64_t Reader::u64(const char* what) { return get_le<std::uint64_t>(bytes(8, what)); }
double Reader::f64(const char* what) { return std::bit_cast<double>(get_le<std::uint64_t>(bytes(8, what))); }

void Reader::f64s(std::span<double> out, const char* what) {
  if (out.size() * 8 > remaining()) fail(std::string("truncated input reading ") + what);
  for (double& v : out) v = f64(what);
}

std::string Reader::str32(const char* what) {
  const std::uint32_t n = u32(what);
  return std::string(bytes(n, what));
}

void Reader::expect(std::string_view magic, const char* what) {
  const auto start = pos_;
  if (magic.size() > remaining() || data_.substr(pos_, magic.size()) != magic) {
    pos_ = start;
    fail(std::string("bad ") + what);
  }
  pos_ += magic.size();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path + " for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw std::runtime_error("failed writing " + path);
}

}  // namespace attmil::binio
