#include "steward/digest.hpp"

#include <openssl/evp.h>

#include <array>
#include <stdexcept>

namespace steward {
namespace {

std::string to_hex(const unsigned char* data, unsigned int len) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kDigits[data[i] >> 4]);
    out.push_back(kDigits[data[i] & 0xF]);
  }
  return out;
}

}  // namespace

struct Sha256::Impl {
  EVP_MD_CTX* ctx = nullptr;
};

Sha256::Sha256() : impl_(new Impl) {
  impl_->ctx = EVP_MD_CTX_new();
  if (impl_->ctx == nullptr || EVP_DigestInit_ex(impl_->ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(impl_->ctx);
    delete impl_;
    throw std::runtime_error("sha256 init failed");
  }
}

Sha256::~Sha256() {
  if (impl_ != nullptr) {
    EVP_MD_CTX_free(impl_->ctx);
    delete impl_;
  }
}

Sha256::Sha256(const Sha256& other) : impl_(new Impl) {
  impl_->ctx = EVP_MD_CTX_new();
  EVP_MD_CTX_copy_ex(impl_->ctx, other.impl_->ctx);
}

Sha256& Sha256::operator=(const Sha256& other) {
  if (this != &other) EVP_MD_CTX_copy_ex(impl_->ctx, other.impl_->ctx);
  return *this;
}

void Sha256::update(std::string_view data) {
  EVP_DigestUpdate(impl_->ctx, data.data(), data.size());
}

std::string Sha256::hex() const {
  EVP_MD_CTX* copy = EVP_MD_CTX_new();
  EVP_MD_CTX_copy_ex(copy, impl_->ctx);
  std::array<unsigned char, EVP_MAX_MD_SIZE> buf{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(copy, buf.data(), &len);
  EVP_MD_CTX_free(copy);
  return to_hex(buf.data(), len);
}

std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> buf{};
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), buf.data(), &len, EVP_sha256(), nullptr);
  return to_hex(buf.data(), len);
}

std::string sha256_hex(std::span<const std::string> parts, char separator) {
  Sha256 h;
  const char sep[1] = {separator};
  for (const auto& p : parts) {
    h.update(p);
    h.update(std::string_view(sep, 1));
  }
  return h.hex();
}

}  // namespace steward
