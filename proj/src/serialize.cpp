// Copyright 2026 The negrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "negrec/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "tensor container assumes a little-endian host");

namespace negrec {

namespace {

constexpr char kMagic[4] = {'N', 'R', 'T', 'C'};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("tensor container: truncated file");
  return v;
}

void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  auto n = read_pod<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("tensor container: truncated string");
  return s;
}

}  // namespace

void TensorFile::set_meta(const std::string& key, std::int64_t value) { meta_[key] = value; }

std::int64_t TensorFile::meta(const std::string& key) const {
  auto it = meta_.find(key);
  if (it == meta_.end()) throw std::out_of_range("tensor container: missing meta key '" + key + "'");
  return it->second;
}

bool TensorFile::has_meta(const std::string& key) const { return meta_.count(key) > 0; }

void TensorFile::add(const std::string& name, std::vector<std::uint64_t> dims,
                     const std::vector<double>& values) {
  NamedTensor t;
  t.name = name;
  t.dims = std::move(dims);
  if (t.size() != values.size()) {
    throw std::invalid_argument("tensor container: dims do not match data size for '" + name + "'");
  }
  t.data.reserve(values.size());
  for (double v : values) t.data.push_back(static_cast<float>(v));
  tensors_.push_back(std::move(t));
}

void TensorFile::add_raw(NamedTensor t) {
  if (t.size() != t.data.size()) {
    throw std::invalid_argument("tensor container: dims do not match data size for '" + t.name + "'");
  }
  tensors_.push_back(std::move(t));
}

const NamedTensor& TensorFile::tensor(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw std::out_of_range("tensor container: missing tensor '" + name + "'");
}

std::vector<double> TensorFile::values(const std::string& name) const {
  const auto& t = tensor(name);
  return std::vector<double>(t.data.begin(), t.data.end());
}

bool TensorFile::has_tensor(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return true;
  }
  return false;
}

void TensorFile::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os.write(kMagic, 4);
  write_pod<std::uint32_t>(os, kVersion);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(meta_.size()));
  for (const auto& [k, v] : meta_) {
    write_string(os, k);
    write_pod<std::int64_t>(os, v);
  }
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(tensors_.size()));
  for (const auto& t : tensors_) {
    write_string(os, t.name);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) write_pod<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

TensorFile TensorFile::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("not a tensor container: " + path.string());
  }
  auto version = read_pod<std::uint32_t>(is);
  if (version != kVersion) {
    throw std::runtime_error("unsupported tensor container version " + std::to_string(version));
  }
  TensorFile f;
  auto meta_count = read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    std::string key = read_string(is);
    f.meta_[key] = read_pod<std::int64_t>(is);
  }
  auto tensor_count = read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < tensor_count; ++i) {
    NamedTensor t;
    t.name = read_string(is);
    auto rank = read_pod<std::uint32_t>(is);
    t.dims.resize(rank);
    for (auto& d : t.dims) d = read_pod<std::uint64_t>(is);
    t.data.resize(t.size());
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!is) throw std::runtime_error("tensor container: truncated tensor data");
    f.tensors_.push_back(std::move(t));
  }
  return f;
}

std::uint64_t hash_bytes(const void* data, std::size_t size) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t hash_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[65536];
  while (is) {
    is.read(buf, sizeof(buf));
    std::streamsize got = is.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace negrec
