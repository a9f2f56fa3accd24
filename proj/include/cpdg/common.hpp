#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpdg {

using NodeId = std::uint32_t;
using EventOrdinal = std::uint64_t;
using Time = double;

constexpr NodeId kInvalidNode = static_cast<NodeId>(-1);

// Runtime failure (bad data, numerical blowup, I/O). CLI maps this to exit 1.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration or schema violation. CLI maps this to exit 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void format_into(std::ostringstream&) {}

template <typename T, typename... Rest>
void format_into(std::ostringstream& os, const T& head, const Rest&... rest) {
  os << head;
  format_into(os, rest...);
}
}  // namespace detail

template <typename... Parts>
std::string concat(const Parts&... parts) {
  std::ostringstream os;
  detail::format_into(os, parts...);
  return os.str();
}

template <typename... Parts>
[[noreturn]] void fail(const Parts&... parts) {
  throw Error(concat(parts...));
}

#define CPDG_REQUIRE(cond, ...)     \
  do {                              \
    if (!(cond)) ::cpdg::fail(__VA_ARGS__); \
  } while (0)

// splitmix64 finalizer; full avalanche, used to build keyed RNG streams.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_str(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Counter-based RNG. A stream is fully determined by its key tuple, so
// draws are reproducible regardless of call order across streams or
// thread scheduling. Platform-independent: integer arithmetic only.
class StreamRng {
 public:
  StreamRng(std::uint64_t seed, std::uint64_t stream, std::uint64_t a = 0,
            std::uint64_t b = 0, std::uint64_t tag = 0) {
    std::uint64_t h = mix64(seed) ^ 0x6a09e667f3bcc908ULL;
    h = mix64(h ^ stream);
    h = mix64(h ^ a);
    h = mix64(h ^ b);
    state_ = mix64(h ^ tag);
  }

  std::uint64_t next_u64() {
    counter_ += 0x9e3779b97f4a7c15ULL;
    return mix64(state_ ^ counter_);
  }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    // Rejection-free modulo is fine here: n is tiny relative to 2^64 at
    // desk scale, so the bias is far below statistical test resolution.
    return next_u64() % n;
  }

  double uniform_range(double lo, double hi) { return lo + (hi - lo) * uniform(); }

 private:
  std::uint64_t state_ = 0;
  std::uint64_t counter_ = 0;
};

// ---- little-endian binary I/O -------------------------------------------

namespace io {

template <typename T>
void write_pod(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  is.read(buf, sizeof(T));
  if (!is) throw Error("unexpected end of file");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline void write_magic(std::ostream& os, const char magic[4]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char magic[4], const std::string& what) {
  char buf[4];
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0)
    throw Error(concat("bad magic in ", what, " file (expected ",
                       std::string(magic, 4), ")"));
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  auto n = read_pod<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw Error("unexpected end of file");
  return s;
}

template <typename T>
void write_vec(std::ostream& os, const std::vector<T>& v) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
void read_vec(std::istream& is, std::vector<T>& v, std::size_t count) {
  static_assert(std::is_trivially_copyable_v<T>);
  v.resize(count);
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(count * sizeof(T)));
  if (!is) throw Error("unexpected end of file");
}

}  // namespace io

}  // namespace cpdg
