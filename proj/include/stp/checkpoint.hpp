#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "stp/tensor.hpp"

namespace stp {

// STPC container: magic "STPC", u32 version, u32 tensor count, then per
// tensor { u32 name length, name bytes, u8 dtype (0 = f32), u8 rank,
// rank x u64 dims, raw little-endian payload }, and a trailing u64 config
// digest. Fixed-width fields are little-endian.

constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_bytes(std::string& out, const void* p, size_t n) {
  out.append(static_cast<const char*>(p), n);
}
template <typename T>
void put_le(std::string& out, T v) {
  unsigned char b[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  put_bytes(out, b, sizeof(T));
}

class Reader {
 public:
  Reader(const char* data, size_t n) : p_(data), end_(data + n) {}
  template <typename T>
  T get_le() {
    need(sizeof(T));
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(static_cast<unsigned char>(p_[i])) << (8 * i);
    p_ += sizeof(T);
    return v;
  }
  void get_bytes(void* dst, size_t n) {
    need(n);
    std::memcpy(dst, p_, n);
    p_ += n;
  }
  size_t remaining() const { return static_cast<size_t>(end_ - p_); }

 private:
  void need(size_t n) const {
    if (remaining() < n) throw IoError("checkpoint: truncated file");
  }
  const char* p_;
  const char* end_;
};

}  // namespace detail

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::vector<CheckpointTensor> tensors;
  uint64_t config_digest = 0;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  std::string serialize() const {
    std::string out;
    out += "STPC";
    detail::put_le<uint32_t>(out, kCheckpointVersion);
    detail::put_le<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
      detail::put_le<uint32_t>(out, static_cast<uint32_t>(t.name.size()));
      detail::put_bytes(out, t.name.data(), t.name.size());
      detail::put_le<uint8_t>(out, 0);  // dtype f32
      detail::put_le<uint8_t>(out, static_cast<uint8_t>(t.shape.size()));
      for (int d : t.shape) detail::put_le<uint64_t>(out, static_cast<uint64_t>(d));
      for (float v : t.data) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        detail::put_le<uint32_t>(out, bits);
      }
    }
    detail::put_le<uint64_t>(out, config_digest);
    return out;
  }

  static Checkpoint deserialize(const std::string& bytes) {
    detail::Reader r(bytes.data(), bytes.size());
    char magic[4];
    r.get_bytes(magic, 4);
    if (std::memcmp(magic, "STPC", 4) != 0) throw IoError("checkpoint: bad magic bytes");
    const auto version = r.get_le<uint32_t>();
    if (version != kCheckpointVersion)
      throw IoError("checkpoint: unsupported version " + std::to_string(version));
    const auto count = r.get_le<uint32_t>();
    Checkpoint ck;
    ck.tensors.resize(count);
    for (auto& t : ck.tensors) {
      const auto name_len = r.get_le<uint32_t>();
      t.name.resize(name_len);
      r.get_bytes(t.name.data(), name_len);
      const auto dtype = r.get_le<uint8_t>();
      if (dtype != 0) throw IoError("checkpoint: unknown dtype code " + std::to_string(dtype));
      const auto rank = r.get_le<uint8_t>();
      t.shape.resize(rank);
      int64_t numel = 1;
      for (auto& d : t.shape) {
        d = static_cast<int>(r.get_le<uint64_t>());
        numel *= d;
      }
      t.data.resize(static_cast<size_t>(numel));
      for (auto& v : t.data) {
        const auto bits = r.get_le<uint32_t>();
        std::memcpy(&v, &bits, 4);
      }
    }
    ck.config_digest = r.get_le<uint64_t>();
    if (r.remaining() != 0) throw IoError("checkpoint: trailing bytes after digest");
    return ck;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    const std::string bytes = serialize();
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("checkpoint: write failed for '" + path + "'");
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
  }
};

}  // namespace stp
