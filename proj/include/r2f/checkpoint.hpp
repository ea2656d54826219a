// SPDX-License-Identifier: Apache-2.0
//
// Binary tensor container shared by model, dataset and decoder files.
//
// Little-endian layout:
//   "R2F1"  u32 version
//   u32 n_meta   { u32 len, key bytes, u32 len, value bytes } * n_meta
//   u32 n_entry  { u32 len, name bytes, u8 dtype (0 = f32), u32 rank,
//                  u64 dim * rank, u64 byte offset into payload } * n_entry
//   u64 payload size, payload bytes, u64 FNV-1a checksum of the payload

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "r2f/model.hpp"
#include "r2f/tensor.hpp"

namespace r2f {

inline constexpr std::uint32_t kContainerVersion = 1;

struct Container {
    std::map<std::string, std::string> meta;
    TensorMap tensors;

    const std::string& get(const std::string& key) const;
    bool operator==(const Container&) const = default;
};

std::string encode_container(const Container& c);
Container decode_container(const std::string& bytes);

/// Writes to a sibling temp file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

void save_container(const std::filesystem::path& path, const Container& c);
Container load_container(const std::filesystem::path& path);

/// FNV-1a over the encoded bytes, as 16 hex digits.
std::string checksum_hex(const std::string& bytes);

/// Model weights with the config in the metadata (kind=model).
Container model_to_container(const ModelParams& params);
ModelParams model_from_container(const Container& c);
void save_model(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_model(const std::filesystem::path& path);

}  // namespace r2f
