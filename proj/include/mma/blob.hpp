#pragma once

// Versioned, self-describing binary container used for every persisted
// model: a JSON header followed by named raw tensors.
//
// Layout (little-endian):
//   "MMABLOB1" | u32 kind_len | kind | u32 version | u64 header_len | header
//   | u32 n_tensors | { u32 name_len | name | u8 dtype | u32 ndim | i64 dims[]
//   | raw bytes }*

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace mma {

struct Blob {
  std::string kind;
  std::uint32_t version = 1;
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  const torch::Tensor& tensor(std::string_view name) const;
};

std::string encode_blob(const Blob& blob);
Blob decode_blob(std::string_view bytes);

void write_blob(const std::filesystem::path& path, const Blob& blob);
// Throws FormatError when the file is not a blob of `kind` at `version`.
Blob read_blob(const std::filesystem::path& path, std::string_view kind,
               std::uint32_t version);

// Named parameters and buffers of a module, in registration order.
std::vector<std::pair<std::string, torch::Tensor>> module_state(
    const torch::nn::Module& module);
void load_module_state(torch::nn::Module& module, const Blob& blob);

// FNV-1a over the raw bytes of every tensor, in order.
std::uint64_t fingerprint(const std::vector<torch::Tensor>& tensors);
std::uint64_t fingerprint(const torch::nn::Module& module);
std::string hex64(std::uint64_t value);

}  // namespace mma
