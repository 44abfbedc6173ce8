#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dudo/container.hpp"
#include "dudo/phantom.hpp"

namespace dudo {

/// Fully sampled targets plus, for reference-guided runs, the paired contrast.
struct Dataset {
  std::string name = "data";
  ImageSet target;
  std::optional<ImageSet> reference;

  std::size_t size() const { return target.images.size(); }

  /// First `n` images (all of them when n exceeds the size).
  Dataset head(std::size_t n) const {
    Dataset d{name, {target.height, target.width, {}}, std::nullopt};
    n = std::min(n, size());
    d.target.images.assign(target.images.begin(), target.images.begin() + static_cast<std::ptrdiff_t>(n));
    if (reference) {
      d.reference = ImageSet{reference->height, reference->width, {}};
      d.reference->images.assign(reference->images.begin(), reference->images.begin() + static_cast<std::ptrdiff_t>(n));
    }
    return d;
  }
};

/// Phantom dataset recipe. Split s draws phantom seeds from the contiguous range starting at
/// seed + (sizes of the splits before it), so the three splits never share a seed.
struct DataPreset {
  PhantomSpec phantom;  // seed field is ignored; per-image seeds come from `seed`
  std::size_t train = 280, val = 40, test = 80;
  std::uint64_t seed = 0;

  std::uint64_t first_seed(const std::string& split) const {
    if (split == "train") return seed;
    if (split == "val") return seed + train;
    if (split == "test") return seed + train + val;
    throw ParameterError("unknown split '" + split + "'");
  }
  std::size_t count(const std::string& split) const {
    if (split == "train") return train;
    if (split == "val") return val;
    if (split == "test") return test;
    throw ParameterError("unknown split '" + split + "'");
  }
};

inline Dataset generate_split(const DataPreset& preset, const std::string& split) {
  Dataset d;
  d.name = split;
  const std::size_t n = preset.phantom.size;
  d.target = {n, n, {}};
  if (preset.phantom.paired_contrast) d.reference = ImageSet{n, n, {}};
  const std::uint64_t first = preset.first_seed(split);
  for (std::size_t i = 0; i < preset.count(split); ++i) {
    PhantomSpec spec = preset.phantom;
    spec.seed = first + i;
    Phantom ph = generate_phantom(spec);
    d.target.images.push_back(std::move(ph.image));
    if (ph.paired) d.reference->images.push_back(std::move(*ph.paired));
  }
  return d;
}

inline const char* const kSplits[] = {"train", "val", "test"};

/// Writes <split>.cplx (and <split>_ref.cplx when paired) for every split plus manifest.json.
inline nlohmann::json write_dataset(const std::filesystem::path& dir, const DataPreset& preset) {
  nlohmann::json manifest{{"version", 1},
                          {"size", preset.phantom.size},
                          {"paired_contrast", preset.phantom.paired_contrast},
                          {"phantom",
                           {{"min_ellipses", preset.phantom.min_ellipses},
                            {"max_ellipses", preset.phantom.max_ellipses},
                            {"intensity_lo", preset.phantom.intensity_lo},
                            {"intensity_hi", preset.phantom.intensity_hi},
                            {"phase_amplitude", preset.phantom.phase_amplitude}}},
                          {"splits", nlohmann::json::object()}};
  for (const char* split : kSplits) {
    const Dataset d = generate_split(preset, split);
    write_container(dir / (std::string(split) + ".cplx"), d.target);
    if (d.reference) write_container(dir / (std::string(split) + "_ref.cplx"), *d.reference);
    manifest["splits"][split] = {{"count", d.size()},
                                 {"first_seed", preset.first_seed(split)},
                                 {"last_seed", preset.first_seed(split) + d.size() - (d.size() ? 1 : 0)},
                                 {"file", std::string(split) + ".cplx"}};
  }
  atomic_write(dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

/// Loads one split written by write_dataset; the reference file is read when present.
inline Dataset read_split(const std::filesystem::path& dir, const std::string& split) {
  Dataset d;
  d.name = split;
  d.target = read_container(dir / (split + ".cplx"));
  const auto ref = dir / (split + "_ref.cplx");
  if (std::filesystem::exists(ref)) {
    d.reference = read_container(ref);
    if (d.reference->images.size() != d.size() || d.reference->height != d.target.height ||
        d.reference->width != d.target.width) {
      throw FormatError("reference container does not match " + split + ".cplx");
    }
  }
  return d;
}

}  // namespace dudo
