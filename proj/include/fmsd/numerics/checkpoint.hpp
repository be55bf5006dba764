#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fmsd/numerics/optim.hpp"
#include "fmsd/numerics/tape.hpp"
#include "fmsd/util/io.hpp"

namespace fmsd::nn {

inline constexpr char kCheckpointMagic[4] = {'F', 'M', 'S', 'D'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

// Layout: "FMSD" | u16 version | u32 count | per entry: u32 name_len, name bytes,
// u32 rank, u32 extents[rank], f32 data (little-endian, row-major).
inline std::string encode_checkpoint(const std::vector<NamedTensor>& entries) {
  ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name);
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (auto x : e.value.shape()) w.u32(static_cast<std::uint32_t>(x));
    for (float v : e.value.data()) w.f32(v);
  }
  return w.str();
}

inline std::vector<NamedTensor> decode_checkpoint(std::string bytes, const std::string& what = "checkpoint") {
  ByteReader r(std::move(bytes), what);
  if (r.bytes(4) != std::string_view(kCheckpointMagic, 4)) throw IoError(what + ": bad magic");
  const auto version = r.u16();
  if (version != kCheckpointVersion) throw IoError(what + ": unsupported version " + std::to_string(version));
  const auto count = r.u32();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor e;
    e.name = r.bytes(r.u32());
    const auto rank = r.u32();
    Shape shape(rank);
    for (auto& x : shape) x = r.u32();
    std::vector<float> data(shape_size(shape));
    for (auto& v : data) v = r.f32();
    e.value = Tensor<float>(std::move(shape), std::move(data));
    out.push_back(std::move(e));
  }
  if (!r.at_end()) throw IoError(what + ": trailing bytes");
  return out;
}

inline void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries) {
  atomic_write(path, encode_checkpoint(entries));
}

inline std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

template <typename T>
std::vector<NamedTensor> export_parameters(const ParameterStore<T>& store, const std::string& prefix = "") {
  std::vector<NamedTensor> out;
  for (const auto& p : store) out.push_back({prefix + p->name, p->value.template cast<float>()});
  return out;
}

/// Copies every matching "<prefix><name>" entry into the store. Missing entries are an error.
template <typename T>
void import_parameters(ParameterStore<T>& store, const std::vector<NamedTensor>& entries, const std::string& prefix = "") {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (auto& p : store) {
    auto it = by_name.find(prefix + p->name);
    if (it == by_name.end()) throw IoError("checkpoint is missing parameter " + prefix + p->name);
    if (it->second->value.shape() != p->value.shape()) {
      throw IoError("checkpoint shape mismatch for " + p->name + ": " + shape_str(it->second->value.shape()) +
                    " vs " + shape_str(p->value.shape()));
    }
    p->value = it->second->value.template cast<T>();
  }
}

/// Optimizer moments and step counter as checkpoint entries ("opt.step", "opt.m.<p>", "opt.v.<p>").
template <typename T>
std::vector<NamedTensor> export_optimizer(const AdamW<T>& opt, const ParameterStore<T>& store) {
  std::vector<NamedTensor> out;
  const auto& st = opt.state();
  out.push_back({"opt.step", Tensor<float>::scalar(static_cast<float>(st.step))});
  for (std::size_t i = 0; i < st.moments.size(); ++i) {
    out.push_back({"opt.m." + store[i].name, st.moments[i].m.template cast<float>()});
    out.push_back({"opt.v." + store[i].name, st.moments[i].v.template cast<float>()});
  }
  return out;
}

template <typename T>
void import_optimizer(AdamW<T>& opt, const ParameterStore<T>& store, const std::vector<NamedTensor>& entries) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  auto& st = opt.state();
  auto step = by_name.find("opt.step");
  if (step == by_name.end()) return;
  st.step = static_cast<std::uint64_t>(step->second->value.item());
  st.moments.clear();
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto m = by_name.find("opt.m." + store[i].name);
    auto v = by_name.find("opt.v." + store[i].name);
    if (m == by_name.end() || v == by_name.end()) {
      st.moments.clear();
      return;
    }
    st.moments.push_back({m->second->value.template cast<T>(), v->second->value.template cast<T>()});
  }
}

}  // namespace fmsd::nn
