#pragma once

// Named parameter registry and the binary checkpoint container.
//
// Checkpoint layout (all integers little-endian):
//
//   bytes 0..7   magic "TDCKPT01"
//   u32          meta_len, then meta_len bytes of UTF-8 text
//   u32          entry count
//   per entry:   u32 name_len, name bytes, u32 ndim, ndim x u32 extents,
//                u64 absolute byte offset of the data, u64 element count
//   data blobs:  IEEE-754 float32, little-endian, in entry order
//
// The meta block carries the model/schedule configuration as key = value
// lines so a loader can rebuild the matching network.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "topodiff/tensor/tensor.hpp"

namespace topodiff {

template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };

  Tensor<T> add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.push_back({name, t});
    return t;
  }

  Tensor<T> zeros(const std::string& name, Shape shape) { return add(name, Tensor<T>(std::move(shape))); }

  Tensor<T> constant(const std::string& name, Shape shape, T value) {
    return add(name, Tensor<T>(std::move(shape), value));
  }

  Tensor<T> uniform(const std::string& name, Shape shape, T bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
    std::vector<T> data(numel_of(shape));
    for (auto& v : data) v = static_cast<T>(dist(rng));
    return add(name, Tensor<T>::from_data(std::move(shape), std::move(data)));
  }

  Tensor<T> normal(const std::string& name, Shape shape, T stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    std::vector<T> data(numel_of(shape));
    for (auto& v : data) v = static_cast<T>(dist(rng));
    return add(name, Tensor<T>::from_data(std::move(shape), std::move(data)));
  }

  Tensor<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
    return entries_[it->second].tensor;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  // Deep copy of all values, used for best-epoch snapshots.
  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> out;
    for (const auto& e : entries_) out.push_back(e.tensor.values());
    return out;
  }
  void restore(const std::vector<std::vector<T>>& values) {
    if (values.size() != entries_.size()) throw ContractError("snapshot does not match parameter set");
    for (std::size_t i = 0; i < values.size(); ++i) {
      auto dst = entries_[i].tensor.mutable_data();
      if (dst.size() != values[i].size()) throw ContractError("snapshot size mismatch for " + entries_[i].name);
      std::copy(values[i].begin(), values[i].end(), dst.begin());
    }
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct CheckpointData {
  std::string meta;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
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
  ByteReader(const std::string& bytes, const std::string& path) : bytes_(bytes), path_(path) {}
  std::uint64_t uint(int width) {
    need(width);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += width;
    return v;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void seek(std::size_t p) { pos_ = p; }
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("truncated checkpoint " + path_);
  }

 private:
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline constexpr char kCheckpointMagic[9] = "TDCKPT01";

}  // namespace detail

inline void save_checkpoint(const std::string& path, const CheckpointData& ck) {
  std::string header(detail::kCheckpointMagic, 8);
  detail::put_u32(header, static_cast<std::uint32_t>(ck.meta.size()));
  header += ck.meta;
  detail::put_u32(header, static_cast<std::uint32_t>(ck.arrays.size()));
  std::size_t header_size = header.size();
  for (const auto& a : ck.arrays) header_size += 4 + a.name.size() + 4 + 4 * a.shape.size() + 16;
  std::uint64_t offset = header_size;
  for (const auto& a : ck.arrays) {
    detail::put_u32(header, static_cast<std::uint32_t>(a.name.size()));
    header += a.name;
    detail::put_u32(header, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) detail::put_u32(header, static_cast<std::uint32_t>(d));
    detail::put_u64(header, offset);
    detail::put_u64(header, a.values.size());
    offset += 4 * a.values.size();
  }
  std::string blob;
  blob.reserve(offset - header_size);
  for (const auto& a : ck.arrays)
    for (float v : a.values) detail::put_u32(blob, std::bit_cast<std::uint32_t>(v));
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write checkpoint " + path);
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!os) throw DataError("failed writing checkpoint " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  detail::ByteReader rd(bytes, path);
  if (rd.text(8) != std::string(detail::kCheckpointMagic, 8)) throw DataError("bad checkpoint magic in " + path);
  CheckpointData ck;
  ck.meta = rd.text(rd.uint(4));
  const auto count = rd.uint(4);
  struct Loc {
    std::uint64_t offset, count;
  };
  std::vector<Loc> locs;
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = rd.text(rd.uint(4));
    const auto ndim = rd.uint(4);
    for (std::uint64_t d = 0; d < ndim; ++d) a.shape.push_back(rd.uint(4));
    const auto off = rd.uint(8);
    const auto n = rd.uint(8);
    if (n != numel_of(a.shape)) throw DataError("checkpoint entry '" + a.name + "' count/shape mismatch");
    locs.push_back({off, n});
    ck.arrays.push_back(std::move(a));
  }
  for (std::size_t i = 0; i < ck.arrays.size(); ++i) {
    rd.seek(locs[i].offset);
    auto& vals = ck.arrays[i].values;
    vals.resize(locs[i].count);
    for (auto& v : vals) v = std::bit_cast<float>(static_cast<std::uint32_t>(rd.uint(4)));
  }
  return ck;
}

template <typename T>
std::vector<NamedArray> export_params(const ParamStore<T>& params, const std::string& prefix = "") {
  std::vector<NamedArray> out;
  for (const auto& e : params.entries()) {
    NamedArray a{prefix + e.name, e.tensor.shape(), {}};
    for (T v : e.tensor.data()) a.values.push_back(static_cast<float>(v));
    out.push_back(std::move(a));
  }
  return out;
}

// Copies checkpoint arrays into the registered parameters. Every parameter
// whose name starts with `only_prefix` must be present with an identical shape.
template <typename T>
void import_params(ParamStore<T>& params, const CheckpointData& ck, const std::string& only_prefix = "") {
  for (auto& e : params.entries()) {
    if (e.name.rfind(only_prefix, 0) != 0) continue;
    const NamedArray* a = ck.find(e.name);
    if (!a) throw DataError("checkpoint lacks parameter '" + e.name + "'");
    if (a->shape != e.tensor.shape()) {
      throw DataError("checkpoint shape " + shape_str(a->shape) + " for '" + e.name + "' does not match model shape " +
                      shape_str(e.tensor.shape()));
    }
    auto dst = e.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(a->values[i]);
  }
}

}  // namespace topodiff
