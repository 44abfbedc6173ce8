#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dudo/io.hpp"
#include "dudo/params.hpp"

namespace dudo {

// Layout: "DDCK", u32 version, u64 manifest length, UTF-8 JSON manifest, f32 LE payload.
// The manifest lists every tensor as {name, shape, offset} with offsets counted in floats.
inline constexpr char kCheckpointMagic[4] = {'D', 'D', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  nlohmann::json meta = nlohmann::json::object();

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json manifest{{"format", "dudo-checkpoint"}, {"version", kCheckpointVersion}, {"meta", ck.meta}};
  nlohmann::json list = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : ck.tensors) {
    list.push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", offset}});
    offset += t.value.size();
  }
  manifest["tensors"] = std::move(list);
  manifest["payload_floats"] = offset;
  const std::string text = manifest.dump();

  std::string out(kCheckpointMagic, 4);
  le::put_u32(out, kCheckpointVersion);
  le::put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset * 4);
  for (const auto& t : ck.tensors)
    for (float v : t.value.data()) le::put_f32(out, v);
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  le::Reader r(bytes);
  if (r.take(4) != std::string_view(kCheckpointMagic, 4)) throw FormatError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t len = r.u64();
  if (len > r.remaining()) throw FormatError("truncated payload");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(r.take(len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint manifest: ") + e.what());
  }
  Checkpoint ck;
  ck.meta = manifest.value("meta", nlohmann::json::object());
  const std::size_t total = manifest.at("payload_floats").get<std::size_t>();
  if (total > r.remaining() / 4) throw FormatError("truncated payload");
  std::vector<float> payload(total);
  for (auto& v : payload) v = r.f32();
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint payload");
  for (const auto& e : manifest.at("tensors")) {
    Shape shape = e.at("shape").get<Shape>();
    const std::size_t off = e.at("offset").get<std::size_t>(), n = numel(shape);
    if (off > total || n > total - off) throw FormatError("tensor '" + e.at("name").get<std::string>() + "' out of range");
    ck.tensors.push_back({e.at("name").get<std::string>(),
                          Tensor<float>(std::move(shape), std::vector<float>(payload.begin() + off, payload.begin() + off + n))});
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  atomic_write(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

/// Appends every parameter of `ps` under its own name, optionally prefixed.
inline void export_params(const ParamSet<float>& ps, Checkpoint& ck, const std::string& prefix = "") {
  for (const auto& p : ps.params()) ck.tensors.push_back({prefix + p.name, p.var.value()});
}

/// Copies stored values into `ps`; every parameter must be present with a matching shape.
inline void import_params(ParamSet<float>& ps, const Checkpoint& ck, const std::string& prefix = "") {
  for (auto& p : ps.params()) {
    const NamedTensor* t = ck.find(prefix + p.name);
    if (!t) throw FormatError("checkpoint lacks parameter '" + prefix + p.name + "'");
    if (t->value.shape() != p.var.shape()) {
      throw FormatError("parameter '" + p.name + "' has shape " + shape_string(t->value.shape()) + " in checkpoint, " +
                        shape_string(p.var.shape()) + " in model");
    }
    p.var.mutable_value() = t->value;
  }
}

}  // namespace dudo
