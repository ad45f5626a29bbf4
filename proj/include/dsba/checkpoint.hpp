#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "dsba/models.hpp"

namespace dsba {

/// Sorted key=value lines, one per entry.
using Manifest = std::map<std::string, std::string>;

void write_manifest(const Manifest& manifest, const std::filesystem::path& file);
/// Throws LoadError for a missing file or a line without '='.
Manifest read_manifest(const std::filesystem::path& file);

/// A checkpoint directory holds `<name>.pt` weights and `<name>.manifest` with the
/// architecture, seed and weight checksum. Loading verifies the checksum and throws
/// LoadError naming the file on any mismatch.
void save_encoder(const EncoderParams& encoder, const std::filesystem::path& dir, const std::string& name = "encoder");
EncoderParams load_encoder(const std::filesystem::path& dir, const std::string& name = "encoder");

void save_generator(const GeneratorParams& generator, const std::filesystem::path& dir,
                    const std::string& name = "generator");
GeneratorParams load_generator(const std::filesystem::path& dir, const std::string& name = "generator");

}  // namespace dsba
