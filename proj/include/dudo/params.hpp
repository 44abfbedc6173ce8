#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dudo/autodiff.hpp"

namespace dudo {

template <class T>
struct Parameter {
  std::string name;
  Var<T> var;
};

enum class Init {
  kaiming,   // N(0, 2 / fan_in), fan_in = product of the trailing dimensions
  zeros,
  identity,  // square matrix identity
};

inline std::uint64_t name_hash(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Ordered registry of named trainable tensors. Initial values depend only on (seed, name), so
/// models that differ by optional modules share identical weights for their common layers.
template <class T>
class ParamSet {
 public:
  explicit ParamSet(std::uint64_t seed = 0) : seed_(seed) {}

  Var<T> add(const std::string& name, Shape shape, Init init) {
    if (index_.count(name)) throw ParameterError("duplicate parameter name '" + name + "'");
    Tensor<T> value(shape);
    switch (init) {
      case Init::zeros:
        break;
      case Init::identity:
        if (shape.size() != 2 || shape[0] != shape[1]) throw ParameterError("identity init needs a square matrix");
        for (std::size_t i = 0; i < shape[0]; ++i) value[i * shape[0] + i] = T(1);
        break;
      case Init::kaiming: {
        std::size_t fan_in = 1;
        for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
        std::mt19937_64 rng(seed_ ^ name_hash(name));
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (auto& v : value.data()) v = static_cast<T>(normal(rng));
        break;
      }
    }
    index_[name] = params_.size();
    params_.push_back({name, Var<T>::leaf(std::move(value), true, name)});
    return params_.back().var;
  }

  const std::vector<Parameter<T>>& params() const noexcept { return params_; }
  std::vector<Parameter<T>>& params() noexcept { return params_; }

  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  /// Overwrites every parameter with N(0, stddev^2) noise, including zero-initialized ones.
  void randomize(std::uint64_t seed, double stddev) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, stddev);
    for (auto& p : params_)
      for (auto& v : p.var.mutable_value().data()) v = static_cast<T>(normal(rng));
  }

 private:
  std::uint64_t seed_;
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace dudo
