#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace storyhead {

// Error taxonomy. The CLI maps these onto its exit codes:
// DataError -> 3, NumericError -> 4, usage errors -> 2.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Deterministic RNG. All transforms are hand-rolled on top of the
// standardized mt19937_64 stream so that a fixed seed yields bit-identical
// draws on every platform (std::*_distribution makes no such promise).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
  }

  // Uniform integer in [0, n). Modulo bias is irrelevant at our scales and
  // keeps the draw exactly reproducible.
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw NumericError("Rng::uniform_index: n must be positive");
    return static_cast<std::size_t>(gen_() % n);
  }

  // Box-Muller, one value per call (no cached spare, simpler determinism).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Normal(0, std) with resampling outside two standard deviations.
  double truncated_normal(double std_dev) {
    double z = normal();
    while (std::fabs(z) > 2.0) z = normal();
    return z * std_dev;
  }

 private:
  std::mt19937_64 gen_;
};

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline std::vector<std::string> split_whitespace(std::string_view s) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) words.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return words;
}

inline std::string join(const std::vector<std::string>& words, std::string_view sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += sep;
    out += words[i];
  }
  return out;
}

inline std::string shape_to_string(const std::vector<int>& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  out += "]";
  return out;
}

// SHA-1, used for git-style content hashes of run inputs
// (hash of "blob <size>\0<content>", hex-encoded).
class Sha1 {
 public:
  Sha1() { reset(); }

  void reset() {
    h_ = {0x67452301u, 0xEFCDAB89u, 0x98BADCFEu, 0x10325476u, 0xC3D2E1F0u};
    buffer_.clear();
    total_bits_ = 0;
  }

  void update(const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    total_bits_ += static_cast<std::uint64_t>(len) * 8;
    buffer_.insert(buffer_.end(), bytes, bytes + len);
    std::size_t off = 0;
    while (buffer_.size() - off >= 64) {
      process_block(buffer_.data() + off);
      off += 64;
    }
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(off));
  }

  std::string hex_digest() {
    std::vector<unsigned char> tail = buffer_;
    tail.push_back(0x80);
    while (tail.size() % 64 != 56) tail.push_back(0x00);
    for (int i = 7; i >= 0; --i) {
      tail.push_back(static_cast<unsigned char>((total_bits_ >> (i * 8)) & 0xFF));
    }
    for (std::size_t off = 0; off < tail.size(); off += 64) process_block(tail.data() + off);
    std::ostringstream out;
    for (std::uint32_t word : h_) {
      for (int i = 3; i >= 0; --i) {
        const unsigned byte = (word >> (i * 8)) & 0xFF;
        static const char* digits = "0123456789abcdef";
        out << digits[byte >> 4] << digits[byte & 0xF];
      }
    }
    reset();
    return out.str();
  }

 private:
  static std::uint32_t rotl(std::uint32_t x, int n) { return (x << n) | (x >> (32 - n)); }

  void process_block(const unsigned char* block) {
    std::array<std::uint32_t, 80> w{};
    for (int i = 0; i < 16; ++i) {
      w[i] = (std::uint32_t(block[i * 4]) << 24) | (std::uint32_t(block[i * 4 + 1]) << 16) |
             (std::uint32_t(block[i * 4 + 2]) << 8) | std::uint32_t(block[i * 4 + 3]);
    }
    for (int i = 16; i < 80; ++i) w[i] = rotl(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
    std::uint32_t a = h_[0], b = h_[1], c = h_[2], d = h_[3], e = h_[4];
    for (int i = 0; i < 80; ++i) {
      std::uint32_t f, k;
      if (i < 20) {
        f = (b & c) | (~b & d);
        k = 0x5A827999u;
      } else if (i < 40) {
        f = b ^ c ^ d;
        k = 0x6ED9EBA1u;
      } else if (i < 60) {
        f = (b & c) | (b & d) | (c & d);
        k = 0x8F1BBCDCu;
      } else {
        f = b ^ c ^ d;
        k = 0xCA62C1D6u;
      }
      const std::uint32_t tmp = rotl(a, 5) + f + e + k + w[i];
      e = d;
      d = c;
      c = rotl(b, 30);
      b = a;
      a = tmp;
    }
    h_[0] += a;
    h_[1] += b;
    h_[2] += c;
    h_[3] += d;
    h_[4] += e;
  }

  std::array<std::uint32_t, 5> h_{};
  std::vector<unsigned char> buffer_;
  std::uint64_t total_bits_ = 0;
};

inline std::string git_blob_hash(std::string_view content) {
  Sha1 sha;
  const std::string header = "blob " + std::to_string(content.size());
  sha.update(header.data(), header.size() + 1);  // include the trailing NUL
  sha.update(content.data(), content.size());
  return sha.hex_digest();
}

}  // namespace storyhead
