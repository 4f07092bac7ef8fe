#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace iekd {

/// FNV-1a over raw bytes. Used for parameter/metric fingerprints in manifests
/// and freeze-contract checks; not cryptographic.
class Fnv64 {
 public:
  Fnv64& update(const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }

  Fnv64& update(double v) { return update(&v, sizeof v); }
  Fnv64& update(std::uint64_t v) { return update(&v, sizeof v); }
  Fnv64& update(const std::vector<double>& v) { return update(v.data(), v.size() * sizeof(double)); }
  Fnv64& update(const std::string& s) { return update(s.data(), s.size()); }

  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::uint64_t fnv64(const void* bytes, std::size_t n);
std::uint64_t fnv64(const std::string& s);
std::string to_hex(std::uint64_t v);

}  // namespace iekd
