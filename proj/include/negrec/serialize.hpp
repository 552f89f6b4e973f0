// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0
//
// Versioned tensor container shared by the codec and policy checkpoints.
// Layout (all integers little-endian):
//   magic   "NRTC"                      4 bytes
//   u32     format version (currently 1)
//   u32     meta count, then per entry: u32 name length, name bytes, i64 value
//   u32     tensor count, then per tensor:
//             u32 name length, name bytes,
//             u32 rank, u64 dims[rank],
//             f32 data, row-major, prod(dims) elements
// Tensors are written and read back in declared order. In-memory math is
// double precision; storage is 32-bit float.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace negrec {

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> data;

  std::size_t size() const {
    std::size_t n = 1;
    for (auto d : dims) n *= static_cast<std::size_t>(d);
    return n;
  }
};

class TensorFile {
 public:
  static constexpr std::uint32_t kVersion = 1;

  void set_meta(const std::string& key, std::int64_t value);
  std::int64_t meta(const std::string& key) const;           // throws if absent
  bool has_meta(const std::string& key) const;

  void add(const std::string& name, std::vector<std::uint64_t> dims,
           const std::vector<double>& values);
  void add_raw(NamedTensor t);

  const NamedTensor& tensor(const std::string& name) const;  // throws if absent
  std::vector<double> values(const std::string& name) const;
  bool has_tensor(const std::string& name) const;
  const std::vector<NamedTensor>& tensors() const { return tensors_; }
  const std::map<std::string, std::int64_t>& meta_entries() const { return meta_; }

  void save(const std::filesystem::path& path) const;
  static TensorFile load(const std::filesystem::path& path);

 private:
  std::map<std::string, std::int64_t> meta_;
  std::vector<NamedTensor> tensors_;
};

// FNV-1a over a file's bytes; used for config/artifact fingerprints.
std::uint64_t hash_file(const std::filesystem::path& path);
std::uint64_t hash_bytes(const void* data, std::size_t size);

}  // namespace negrec
