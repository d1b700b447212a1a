#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "stf/params.hpp"
#include "stf/tensor.hpp"

namespace stf {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Self-contained training snapshot: every named tensor with its optimizer
// moments and frozen flag, plus the epoch counter and a config snapshot.
template <typename T>
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  int epoch = 0;
  std::uint64_t adam_step = 0;
  nlohmann::json config;
  ParamStore<T> params;
};

namespace ckpt_detail {

inline constexpr char kMagic[8] = {'S', 'T', 'F', 'C', 'K', 'P', 'T', '\n'};

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

struct Writer {
  std::string out;
  template <typename V>
  void pod(V v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof(V));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out += s;
  }
  template <typename T>
  void tensor(const Tensor<T>& t) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) pod<std::int32_t>(d);
    out.append(reinterpret_cast<const char*>(t.ptr()),
               static_cast<size_t>(t.numel()) * sizeof(T));
  }
};

struct Reader {
  const std::string& in;
  size_t pos = 0;
  explicit Reader(const std::string& s) : in(s) {}

  void need(size_t n) const {
    if (pos + n > in.size()) throw CheckpointError("checkpoint truncated");
  }
  template <typename V>
  V pod() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, in.data() + pos, sizeof(V));
    pos += sizeof(V);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = in.substr(pos, n);
    pos += n;
    return s;
  }
  template <typename T>
  Tensor<T> tensor() {
    const auto nd = pod<std::uint32_t>();
    std::vector<int> shape;
    for (std::uint32_t i = 0; i < nd; ++i) shape.push_back(pod<std::int32_t>());
    Tensor<T> t(std::move(shape));
    const size_t bytes = static_cast<size_t>(t.numel()) * sizeof(T);
    need(bytes);
    std::memcpy(t.ptr(), in.data() + pos, bytes);
    pos += bytes;
    return t;
  }
};

}  // namespace ckpt_detail

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ckpt) {
  ckpt_detail::Writer w;
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(sizeof(T)));
  w.pod<std::int32_t>(ckpt.epoch);
  w.pod<std::uint64_t>(ckpt.adam_step);
  w.str(ckpt.config.dump());
  w.pod<std::uint64_t>(ckpt.params.size());
  for (const auto& e : ckpt.params.entries()) {
    w.str(e.name);
    w.pod<std::uint8_t>(e.frozen ? 1 : 0);
    w.tensor(e.value);
    const bool moments = !e.adam_m.empty();
    w.pod<std::uint8_t>(moments ? 1 : 0);
    if (moments) {
      w.tensor(e.adam_m);
      w.tensor(e.adam_v);
    }
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open for writing: " + path);
  f.write(ckpt_detail::kMagic, sizeof(ckpt_detail::kMagic));
  const std::uint32_t version = Checkpoint<T>::kVersion;
  f.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t checksum = ckpt_detail::fnv1a(w.out);
  f.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
  const std::uint64_t payload_size = w.out.size();
  f.write(reinterpret_cast<const char*>(&payload_size), sizeof(payload_size));
  f.write(w.out.data(), static_cast<std::streamsize>(w.out.size()));
  if (!f) throw CheckpointError("write failed: " + path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint: " + path);
  std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  const size_t header = sizeof(ckpt_detail::kMagic) + sizeof(std::uint32_t) +
                        2 * sizeof(std::uint64_t);
  if (raw.size() < header) throw CheckpointError("checkpoint truncated");
  if (std::memcmp(raw.data(), ckpt_detail::kMagic, sizeof(ckpt_detail::kMagic)) != 0)
    throw CheckpointError("not a checkpoint file: " + path);
  std::uint32_t version;
  std::uint64_t checksum, payload_size;
  size_t off = sizeof(ckpt_detail::kMagic);
  std::memcpy(&version, raw.data() + off, sizeof(version));
  off += sizeof(version);
  std::memcpy(&checksum, raw.data() + off, sizeof(checksum));
  off += sizeof(checksum);
  std::memcpy(&payload_size, raw.data() + off, sizeof(payload_size));
  off += sizeof(payload_size);
  if (version != Checkpoint<T>::kVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  if (raw.size() - off != payload_size) throw CheckpointError("checkpoint truncated");
  const std::string payload = raw.substr(off);
  if (ckpt_detail::fnv1a(payload) != checksum)
    throw CheckpointError("checkpoint checksum mismatch");

  ckpt_detail::Reader r(payload);
  if (r.template pod<std::uint32_t>() != sizeof(T))
    throw CheckpointError("checkpoint scalar width mismatch");
  Checkpoint<T> ckpt;
  ckpt.epoch = r.template pod<std::int32_t>();
  ckpt.adam_step = r.template pod<std::uint64_t>();
  ckpt.config = nlohmann::json::parse(r.str());
  const auto n = r.template pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::string name = r.str();
    const bool frozen = r.template pod<std::uint8_t>() != 0;
    Tensor<T> value = r.template tensor<T>();
    auto& entry = [&]() -> auto& {
      ckpt.params.add(name, std::move(value));
      return ckpt.params.entry(name);
    }();
    entry.frozen = frozen;
    if (r.template pod<std::uint8_t>()) {
      entry.adam_m = r.template tensor<T>();
      entry.adam_v = r.template tensor<T>();
    }
  }
  if (r.pos != payload.size()) throw CheckpointError("checkpoint has trailing bytes");
  return ckpt;
}

}  // namespace stf
