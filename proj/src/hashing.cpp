#include "dsba/hashing.hpp"

#include <array>
#include <memory>

#include <openssl/evp.h>

namespace dsba {
namespace {

struct DigestContext {
  DigestContext() : ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free) { EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr); }

  void update(const void* data, std::size_t size) { EVP_DigestUpdate(ctx.get(), data, size); }

  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> out{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), out.data(), &len);
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string s;
    s.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
      s.push_back(kDigits[out[i] >> 4]);
      s.push_back(kDigits[out[i] & 0xF]);
    }
    return s;
  }

  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx;
};

void hash_tensor(DigestContext& d, const std::string& name, const torch::Tensor& t) {
  d.update(name.data(), name.size());
  for (auto s : t.sizes()) {
    const std::int64_t v = s;
    d.update(&v, sizeof(v));
  }
  const auto c = t.detach().cpu().contiguous();
  d.update(c.data_ptr(), c.numel() * c.element_size());
}

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  DigestContext d;
  d.update(bytes.data(), bytes.size());
  return d.hex();
}

std::string sha256_hex(std::string_view text) {
  DigestContext d;
  d.update(text.data(), text.size());
  return d.hex();
}

std::string module_checksum(const torch::nn::Module& module) {
  DigestContext d;
  for (const auto& p : module.named_parameters()) hash_tensor(d, p.key(), p.value());
  for (const auto& b : module.named_buffers()) hash_tensor(d, b.key(), b.value());
  return d.hex();
}

}  // namespace dsba
