// Self-describing binary container of named double tensors plus a JSON
// metadata string. Model checkpoints and cached datasets share this format.
// Round-trips are byte-exact: payloads are raw IEEE-754 doubles.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ami/tensor.hpp"

namespace ami {

constexpr char kArchiveMagic[8] = {'A', 'M', 'I', 'C', 'O', 'N', 'T', '1'};
constexpr uint32_t kArchiveVersion = 1;

struct ArchiveBlock {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

class TensorArchive {
 public:
  std::string metadata;  // JSON text, echoed verbatim

  void add(const std::string& name, const Shape& shape, std::vector<double> data) {
    if (index_.count(name))
      throw std::runtime_error("archive: duplicate block '" + name + "'");
    index_[name] = blocks_.size();
    blocks_.push_back({name, shape, std::move(data)});
  }
  void add(const std::string& name, const Tensor& t) { add(name, t.shape(), t.data()); }

  bool has(const std::string& name) const { return index_.count(name) > 0; }
  const ArchiveBlock& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("archive: missing block '" + name + "'");
    return blocks_[it->second];
  }
  const std::vector<ArchiveBlock>& blocks() const { return blocks_; }

  Tensor tensor(const std::string& name, bool requires_grad = false) const {
    const ArchiveBlock& b = at(name);
    return Tensor::from_data(b.shape, b.data, requires_grad);
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("archive: cannot open '" + path + "' for writing");
    f.write(kArchiveMagic, 8);
    write_u32(f, kArchiveVersion);
    write_u64(f, metadata.size());
    f.write(metadata.data(), static_cast<std::streamsize>(metadata.size()));
    write_u64(f, blocks_.size());
    for (const auto& b : blocks_) {
      write_u64(f, b.name.size());
      f.write(b.name.data(), static_cast<std::streamsize>(b.name.size()));
      write_u32(f, static_cast<uint32_t>(b.shape.size()));
      for (int64_t d : b.shape) write_i64(f, d);
      write_u64(f, b.data.size());
      f.write(reinterpret_cast<const char*>(b.data.data()),
              static_cast<std::streamsize>(b.data.size() * sizeof(double)));
    }
    if (!f) throw std::runtime_error("archive: write to '" + path + "' failed");
  }

  static TensorArchive load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("archive: cannot open '" + path + "'");
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kArchiveMagic, 8) != 0)
      throw std::runtime_error("archive: '" + path + "' is not a tensor archive");
    uint32_t version = read_u32(f, path);
    if (version != kArchiveVersion)
      throw std::runtime_error("archive: '" + path + "' has format version " +
                               std::to_string(version) + ", expected " +
                               std::to_string(kArchiveVersion));
    TensorArchive a;
    uint64_t meta_len = read_u64(f, path);
    a.metadata.resize(meta_len);
    f.read(a.metadata.data(), static_cast<std::streamsize>(meta_len));
    if (!f) throw_truncated(path);
    uint64_t count = read_u64(f, path);
    for (uint64_t i = 0; i < count; ++i) {
      ArchiveBlock b;
      uint64_t name_len = read_u64(f, path);
      b.name.resize(name_len);
      f.read(b.name.data(), static_cast<std::streamsize>(name_len));
      uint32_t ndim = read_u32(f, path);
      for (uint32_t d = 0; d < ndim; ++d) b.shape.push_back(read_i64(f, path));
      uint64_t n = read_u64(f, path);
      b.data.resize(n);
      f.read(reinterpret_cast<char*>(b.data.data()),
             static_cast<std::streamsize>(n * sizeof(double)));
      if (!f) throw_truncated(path);
      a.add(b.name, b.shape, std::move(b.data));
    }
    return a;
  }

 private:
  std::vector<ArchiveBlock> blocks_;
  std::unordered_map<std::string, size_t> index_;

  [[noreturn]] static void throw_truncated(const std::string& path) {
    throw std::runtime_error("archive: '" + path + "' is truncated");
  }
  static void write_u32(std::ofstream& f, uint32_t v) {
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  static void write_u64(std::ofstream& f, uint64_t v) {
    f.write(reinterpret_cast<const char*>(&v), 8);
  }
  static void write_i64(std::ofstream& f, int64_t v) {
    f.write(reinterpret_cast<const char*>(&v), 8);
  }
  static uint32_t read_u32(std::ifstream& f, const std::string& path) {
    uint32_t v;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) throw_truncated(path);
    return v;
  }
  static uint64_t read_u64(std::ifstream& f, const std::string& path) {
    uint64_t v;
    f.read(reinterpret_cast<char*>(&v), 8);
    if (!f) throw_truncated(path);
    return v;
  }
  static int64_t read_i64(std::ifstream& f, const std::string& path) {
    int64_t v;
    f.read(reinterpret_cast<char*>(&v), 8);
    if (!f) throw_truncated(path);
    return v;
  }
};

}  // namespace ami
