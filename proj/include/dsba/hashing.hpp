#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include <torch/torch.h>

namespace dsba {

/// Hex SHA-256 digest of a byte range.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

/// Digest over every parameter and buffer of a module (names, shapes and raw bytes),
/// in registration order. Two modules with bit-identical weights hash equal.
std::string module_checksum(const torch::nn::Module& module);

}  // namespace dsba
