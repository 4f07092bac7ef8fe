#include "iekd/hash.hpp"

#include <array>

namespace iekd {

std::string to_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

std::string Fnv64::hex() const { return to_hex(state_); }

std::uint64_t fnv64(const void* bytes, std::size_t n) { return Fnv64().update(bytes, n).digest(); }

std::uint64_t fnv64(const std::string& s) { return fnv64(s.data(), s.size()); }

}  // namespace iekd
