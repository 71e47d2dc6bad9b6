#pragma once

// Little-endian binary container helpers shared by every checkpoint format.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace afss {

static_assert(std::endian::native == std::endian::little, "checkpoint formats assume a little-endian host");

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

using Magic = std::array<char, 8>;

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw CheckpointError("write failed");
}

inline void read_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!is || static_cast<std::size_t>(is.gcount()) != n) throw CheckpointError("truncated checkpoint");
}

template <typename V>
void write_pod(std::ostream& os, V v) {
  write_bytes(os, &v, sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
  V v{};
  read_bytes(is, &v, sizeof(V));
  return v;
}

inline void write_magic(std::ostream& os, const Magic& m) { write_bytes(os, m.data(), m.size()); }

inline void expect_magic(std::istream& is, const Magic& m, const char* what) {
  Magic got{};
  read_bytes(is, got.data(), got.size());
  if (got != m) throw CheckpointError(std::string("not a ") + what + " file (bad magic)");
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is) {
  const auto n = read_pod<std::uint32_t>(is);
  if (n > (1u << 20)) throw CheckpointError("implausible string length in checkpoint");
  std::string s(n, '\0');
  read_bytes(is, s.data(), n);
  return s;
}

// Values are always stored as 32-bit floats.
template <typename T>
void write_f32_array(std::ostream& os, const T* data, std::size_t n) {
  std::vector<float> buf(data, data + n);
  write_bytes(os, buf.data(), n * sizeof(float));
}

template <typename T>
void read_f32_array(std::istream& is, T* data, std::size_t n) {
  std::vector<float> buf(n);
  read_bytes(is, buf.data(), n * sizeof(float));
  for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<T>(buf[i]);
}

}  // namespace io

// 64-bit FNV-1a over raw bytes; used to fingerprint parameter state.
class Fnv1a {
 public:
  void update(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= b[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

}  // namespace afss
