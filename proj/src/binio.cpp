#include "binio.hpp"

#include <zlib.h>

#include <fstream>
#include <iterator>

#include "tpn/errors.hpp"

namespace tpn::binio {

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void Writer::crc32_trailer() { u32(crc32(bytes_)); }

std::uint64_t Reader::get(int n) {
  if (remaining() < static_cast<std::size_t>(n)) fail("truncated " + what_);
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
  pos_ += static_cast<std::size_t>(n);
  return v;
}

std::string Reader::str(std::size_t n) {
  if (remaining() < n) fail("truncated " + what_);
  std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
  pos_ += n;
  return s;
}

void Reader::fail(const std::string& msg, std::size_t at) const { throw FormatError(msg, at); }

void Reader::expect_crc32_trailer() {
  const std::size_t body = pos_;
  if (remaining() < 4) fail("truncated " + what_ + " (missing checksum)");
  const std::uint32_t stored = u32();
  if (remaining() != 0) fail("unexpected trailing bytes in " + what_);
  if (crc32(bytes_.first(body)) != stored) fail(what_ + " checksum mismatch", body);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string(), 0);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace tpn::binio
