#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ktir/tensor.hpp"

namespace ktir {

using NamedTensor = std::pair<std::string, Tensor>;

// Binary named-tensor container, little-endian:
//   "KTIR1"
//   repeated until end of file:
//     u32 name length, name bytes, u32 rank, rank x u64 dims, f64 payload
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace ktir
