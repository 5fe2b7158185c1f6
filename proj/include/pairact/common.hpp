#pragma once

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace pairact {

// Error categories map 1:1 onto CLI exit codes (0 = success).
enum class ErrorKind { config = 2, data = 3, training = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }
  int exit_code() const { return static_cast<int>(kind_); }
  const char* code() const {
    switch (kind_) {
      case ErrorKind::config: return "config";
      case ErrorKind::data: return "data";
      case ErrorKind::training: return "training";
    }
    return "internal";
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void config_error(const std::string& msg) { throw Error(ErrorKind::config, msg); }
[[noreturn]] inline void data_error(const std::string& msg) { throw Error(ErrorKind::data, msg); }
[[noreturn]] inline void training_error(const std::string& msg) { throw Error(ErrorKind::training, msg); }

namespace log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3 };

// Verbosity comes from the PAIRACT_LOG env var: debug|info|warn|error.
inline Level threshold() {
  static Level cached = [] {
    const char* env = std::getenv("PAIRACT_LOG");
    if (!env) return Level::info;
    std::string v(env);
    if (v == "debug") return Level::debug;
    if (v == "info") return Level::info;
    if (v == "warn") return Level::warn;
    if (v == "error") return Level::error;
    return Level::info;
  }();
  return cached;
}

inline void emit(Level lvl, const std::string& msg) {
  if (lvl < threshold()) return;
  static const char* names[] = {"debug", "info", "warn", "error"};
  std::cerr << "[" << names[static_cast<int>(lvl)] << "] " << msg << "\n";
}

inline void debug(const std::string& msg) { emit(Level::debug, msg); }
inline void info(const std::string& msg) { emit(Level::info, msg); }
inline void warn(const std::string& msg) { emit(Level::warn, msg); }
inline void error(const std::string& msg) { emit(Level::error, msg); }

}  // namespace log

// FNV-1a 64-bit, used for dataset and config checksums.
class Fnv1a64 {
 public:
  void update(const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
  std::uint64_t value() const { return hash_; }
  std::string hex() const {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    std::uint64_t h = hash_;
    for (int i = 15; i >= 0; --i) {
      out[static_cast<std::size_t>(i)] = digits[h & 0xf];
      h >>= 4;
    }
    return out;
  }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline std::string fnv1a64_hex(const void* bytes, std::size_t n) {
  Fnv1a64 h;
  h.update(bytes, n);
  return h.hex();
}

inline std::string fnv1a64_hex(const std::string& s) { return fnv1a64_hex(s.data(), s.size()); }

// Little-endian scalar I/O for the binary dataset / checkpoint formats.
inline void write_le_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_le_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_le_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, 4);
  write_le_u32(os, bits);
}

inline std::uint32_t read_le_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) data_error("unexpected end of file while reading u32");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t read_le_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) data_error("unexpected end of file while reading u64");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline float read_le_f32(std::istream& is) {
  std::uint32_t bits = read_le_u32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace pairact
