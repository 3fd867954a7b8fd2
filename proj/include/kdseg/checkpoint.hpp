#pragma once

#include <filesystem>

#include "kdseg/segnet.hpp"

namespace kdseg {

// Checkpoint layout, all little-endian:
//   "KDSG" | u32 version=1 | u32 num_classes | u32 tensor_count
//   per tensor: u16 name_len | name | u8 ndim | u32 dims[ndim] | f32 data[]
// Tensors appear in the model's canonical parameter order; save -> load ->
// save reproduces the file byte for byte.
void save_checkpoint(const SegModel& model, const std::filesystem::path& path);
SegModel load_checkpoint(const std::filesystem::path& path);

}  // namespace kdseg
