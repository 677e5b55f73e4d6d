#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>

#include "visforce/autodiff.hpp"
#include "visforce/error.hpp"
#include "visforce/tensor.hpp"

namespace visforce {

// Binary layout, all integers little-endian:
//   magic "VFCKPT\0\0" | u32 version | u64 metadata length | metadata bytes |
//   u64 entry count | entries sorted by id
// entry: u32 id length | id bytes | u32 rank | u64 dims[rank] | f64 data[product(dims)]
inline constexpr char kCheckpointMagic[8] = {'V', 'F', 'C', 'K', 'P', 'T', '\0', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string metadata;  // free-form text (the CLI stores the model configuration as JSON)
  std::map<std::string, Tensor> tensors;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("checkpoint truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, ckpt.metadata.size());
  out += ckpt.metadata;
  detail::put_u64(out, ckpt.tensors.size());
  for (const auto& [id, t] : ckpt.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(id.size()));
    out += id;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u64(out, d);
    for (double v : t.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::ByteReader in(bytes);
  if (in.take(sizeof kCheckpointMagic) != std::string_view(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw IoError("not a checkpoint file (bad magic)");
  }
  const auto version = in.uint(4);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.metadata = std::string(in.take(in.uint(8)));
  const auto count = in.uint(8);
  for (std::uint64_t e = 0; e < count; ++e) {
    std::string id(in.take(in.uint(4)));
    const auto rank = in.uint(4);
    if (rank == 0 || rank > 8) throw IoError("checkpoint entry '" + id + "' has invalid rank");
    Shape shape;
    for (std::uint64_t r = 0; r < rank; ++r) shape.push_back(in.uint(8));
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = std::bit_cast<double>(in.uint(8));
    ckpt.tensors.emplace(std::move(id), Tensor(std::move(shape), std::move(data)));
  }
  if (!in.done()) throw IoError("trailing bytes after checkpoint entries");
  return ckpt;
}

inline Checkpoint snapshot(const ParameterSet& params, std::string metadata = {}) {
  Checkpoint ckpt{std::move(metadata), {}};
  for (const auto& [id, p] : params) ckpt.tensors.emplace(id, p.value);
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  const std::string bytes = encode_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

/// Copies checkpoint values into an existing parameter set. Every parameter must be present
/// with an identical shape and the checkpoint may not carry unknown entries.
inline void restore(const Checkpoint& ckpt, ParameterSet& params) {
  for (auto& [id, p] : params) {
    auto it = ckpt.tensors.find(id);
    if (it == ckpt.tensors.end()) throw IoError("checkpoint is missing parameter '" + id + "'");
    if (it->second.shape() != p.value.shape()) {
      throw IoError("checkpoint parameter '" + id + "' has shape " + shape_str(it->second.shape()) +
                    ", model expects " + shape_str(p.value.shape()));
    }
  }
  for (const auto& [id, t] : ckpt.tensors) {
    if (!params.contains(id)) throw IoError("checkpoint has unexpected parameter '" + id + "'");
  }
  for (auto& [id, p] : params) p.value = ckpt.tensors.at(id);
}

}  // namespace visforce
