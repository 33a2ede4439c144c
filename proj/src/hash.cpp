#include "fpq/hash.hpp"

#include <openssl/evp.h>

#include <iomanip>
#include <memory>
#include <sstream>

namespace fpq {

std::string sha256_hex(const std::vector<std::span<const std::uint8_t>>& parts) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  for (const auto& p : parts) EVP_DigestUpdate(ctx.get(), p.data(), p.size());
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return out.str();
}

std::string sha256_hex(const std::string& text) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(text.data());
  return sha256_hex({std::span<const std::uint8_t>(p, text.size())});
}

}  // namespace fpq
