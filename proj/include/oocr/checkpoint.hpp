#pragma once

// Binary tensor container shared by models, adapters and steering vectors.
//
//   "OOCR"                       4 magic bytes
//   u32 version                  little-endian, currently 1
//   repeated until end of file:
//     u32 name_len, name bytes (UTF-8)
//     u32 rank, u32 dims[rank]
//     f32 data[prod(dims)]       little-endian IEEE-754
//
// A file holding only the header is a valid empty checkpoint.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "oocr/optim.hpp"

namespace oocr {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Throws ContractError on duplicate names, FormatError if the file cannot be written.
void save_checkpoint(const std::vector<NamedTensor>& tensors, const std::filesystem::path& path);

/// Throws FormatError (message includes the path) on bad magic, unsupported
/// version, truncation or duplicate names.
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace oocr
