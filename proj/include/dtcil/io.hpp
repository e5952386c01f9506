// SPDX-License-Identifier: Apache-2.0
//
// Binary parameter files: magic, JSON header, then raw little-endian float arrays.

#pragma once

#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "dtcil/tensor.hpp"

namespace dtcil::io {

void write_tensors(const std::filesystem::path& path, const nlohmann::json& meta, const std::vector<const Tensor*>& arrays);

struct TensorFile {
  nlohmann::json meta;
  std::vector<Tensor> arrays;
};

TensorFile read_tensors(const std::filesystem::path& path);

/// Binary PPM (P6) writer; `rgb` is [3, H, W] with values in [0, 1].
void write_ppm(const std::filesystem::path& path, const Tensor& rgb);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace dtcil::io
