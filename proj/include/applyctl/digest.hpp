#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>

namespace applyctl {

// Incremental SHA-256 with length-prefixed fields, so ("ab","c") and ("a","bc")
// hash differently.
class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
      throw std::runtime_error("sha256 init failed");
    }
  }

  Sha256& field(std::string_view bytes) {
    const std::uint64_t len = bytes.size();
    raw(&len, sizeof len);
    raw(bytes.data(), bytes.size());
    return *this;
  }

  Sha256& field(double v) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &v, sizeof bits);
    raw(&bits, sizeof bits);
    return *this;
  }

  Sha256& field(std::int64_t v) {
    raw(&v, sizeof v);
    return *this;
  }

  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> out{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), out.data(), &len) != 1) {
      throw std::runtime_error("sha256 final failed");
    }
    static constexpr char digits[] = "0123456789abcdef";
    std::string s;
    s.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
      s.push_back(digits[out[i] >> 4]);
      s.push_back(digits[out[i] & 0xf]);
    }
    return s;
  }

 private:
  void raw(const void* p, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), p, n) != 1) throw std::runtime_error("sha256 update failed");
  }

  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view bytes) { return Sha256{}.field(bytes).hex(); }

}  // namespace applyctl
