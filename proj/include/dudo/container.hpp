#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dudo/io.hpp"
#include "dudo/tensor.hpp"

namespace dudo {

// Layout: "CPLX", u32 version, u32 count, u32 h, u32 w, then count*h*w (re, im) f32 pairs.
inline constexpr char kContainerMagic[4] = {'C', 'P', 'L', 'X'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::size_t kContainerHeaderBytes = 20;

/// A set of equally sized complex images.
struct ImageSet {
  std::size_t height = 0, width = 0;
  std::vector<ComplexTensor<float>> images;  // each (height, width)
};

inline std::string encode_container(const ImageSet& set) {
  for (const auto& im : set.images) {
    if (im.rank() != 2 || im.height() != set.height || im.width() != set.width) {
      throw ShapeError("container images must all be " + std::to_string(set.height) + "x" + std::to_string(set.width));
    }
  }
  std::string out(kContainerMagic, 4);
  out.reserve(kContainerHeaderBytes + set.images.size() * set.height * set.width * 8);
  le::put_u32(out, kContainerVersion);
  le::put_u32(out, static_cast<std::uint32_t>(set.images.size()));
  le::put_u32(out, static_cast<std::uint32_t>(set.height));
  le::put_u32(out, static_cast<std::uint32_t>(set.width));
  for (const auto& im : set.images)
    for (const auto& v : im.data()) {
      le::put_f32(out, v.real());
      le::put_f32(out, v.imag());
    }
  return out;
}

inline ImageSet decode_container(std::string_view bytes) {
  le::Reader r(bytes);
  if (r.take(4) != std::string_view(kContainerMagic, 4)) throw FormatError("not a CPLX container (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kContainerVersion) throw FormatError("unsupported container version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  ImageSet set;
  set.height = r.u32();
  set.width = r.u32();
  const std::size_t plane = set.height * set.width;
  if (count > 0 && plane > 0 && r.remaining() / 8 / plane < count) throw FormatError("truncated payload");
  set.images.reserve(count);
  for (std::uint32_t n = 0; n < count; ++n) {
    ComplexTensor<float> im({set.height, set.width});
    for (auto& v : im.data()) {
      const float re = r.f32();
      v = {re, r.f32()};
    }
    set.images.push_back(std::move(im));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after container payload");
  return set;
}

inline void write_container(const std::filesystem::path& path, const ImageSet& set) {
  atomic_write(path, encode_container(set));
}

inline ImageSet read_container(const std::filesystem::path& path) { return decode_container(read_file(path)); }

}  // namespace dudo
