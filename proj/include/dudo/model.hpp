#pragma once

#include <json.hpp>

#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dudo/blocks.hpp"
#include "dudo/fourier.hpp"

namespace dudo {

enum class Mode { image_only, dual, dual_with_reference };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::image_only:
      return "image_only";
    case Mode::dual:
      return "dual";
    case Mode::dual_with_reference:
      return "dual_with_reference";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "image_only") return Mode::image_only;
  if (s == "dual") return Mode::dual;
  if (s == "dual_with_reference") return Mode::dual_with_reference;
  throw ParameterError("unknown mode '" + s + "'");
}

/// Which domains a module is placed in.
struct DomainSet {
  bool image = false;
  bool kspace = false;

  static DomainSet none() { return {}; }
  static DomainSet image_only() { return {true, false}; }
  static DomainSet kspace_only() { return {false, true}; }
  static DomainSet both() { return {true, true}; }

  std::string label() const {
    if (image && kspace) return "both";
    if (image) return "image";
    if (kspace) return "kspace";
    return "none";
  }
  friend bool operator==(const DomainSet&, const DomainSet&) = default;
};

struct ModelConfig {
  static constexpr int kSchemaVersion = 1;

  Mode mode = Mode::dual;
  std::size_t recurrence = 2;
  DcMode dc = DcMode::hard();
  BlockConfig block;
  DomainSet glim = DomainSet::kspace_only();
  DomainSet plde = DomainSet::image_only();
  bool shared_weights = true;
  bool kspace_first = true;

  void validate() const {
    if (recurrence < 1) throw ParameterError("recurrence must be >= 1");
    if (mode == Mode::image_only && (glim.kspace || plde.kspace)) {
      throw ParameterError("image_only mode admits module placement in the image domain only");
    }
    block.validate(glim.image || glim.kspace);
  }

  std::size_t input_channels() const { return mode == Mode::dual_with_reference ? 4 : 2; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json domains_to_json(const DomainSet& d) {
  auto arr = nlohmann::json::array();
  if (d.image) arr.push_back("image");
  if (d.kspace) arr.push_back("kspace");
  return arr;
}

inline DomainSet domains_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ParameterError("domain list must be an array");
  DomainSet d;
  for (const auto& e : j) {
    const auto s = e.get<std::string>();
    if (s == "image") {
      d.image = true;
    } else if (s == "kspace") {
      d.kspace = true;
    } else {
      throw ParameterError("unknown domain '" + s + "'");
    }
  }
  return d;
}

namespace detail {
inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const char* where) {
  if (!j.is_object()) throw ParameterError(std::string(where) + " must be a JSON object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ParameterError(std::string("unknown key '") + it.key() + "' in " + where);
}
}  // namespace detail

inline nlohmann::json to_json(const BlockConfig& b) {
  return {{"channels", b.channels}, {"growth", b.growth},       {"stage_count", b.stage_count},
          {"heads", b.heads},       {"head_dim", b.head_dim()}, {"dilations", b.dilations},
          {"plde_hidden", b.plde_hidden}, {"window", b.window}};
}

/// Reads a block config; absent keys keep their value from `b`.
inline BlockConfig block_from_json(const nlohmann::json& j, BlockConfig b = {}) {
  detail::reject_unknown(j, {"channels", "growth", "stage_count", "heads", "head_dim", "dilations", "plde_hidden", "window"},
                         "block config");
  b.channels = j.value("channels", b.channels);
  b.growth = j.value("growth", b.growth);
  b.stage_count = j.value("stage_count", b.stage_count);
  b.heads = j.value("heads", b.heads);
  if (j.contains("dilations")) b.dilations = j.at("dilations").get<std::vector<std::size_t>>();
  b.plde_hidden = j.value("plde_hidden", b.plde_hidden);
  b.window = j.value("window", b.window);
  if (j.contains("head_dim") && b.heads && j.at("head_dim").get<std::size_t>() != b.head_dim()) {
    throw ParameterError("head_dim must equal channels / heads");
  }
  return b;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json lam = c.dc.is_hard() ? nlohmann::json("hard") : nlohmann::json(c.dc.lambda());
  return {{"version", ModelConfig::kSchemaVersion},
          {"mode", to_string(c.mode)},
          {"recurrence", c.recurrence},
          {"lambda", lam},
          {"block", to_json(c.block)},
          {"glim_domains", domains_to_json(c.glim)},
          {"plde_domains", domains_to_json(c.plde)},
          {"shared_weights", c.shared_weights},
          {"order", c.kspace_first ? "kspace_first" : "image_first"}};
}

/// Reads a model config; absent keys keep their value from `c`.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  detail::reject_unknown(j, {"version", "mode", "recurrence", "lambda", "block", "glim_domains", "plde_domains",
                             "shared_weights", "order"},
                         "model config");
  if (j.contains("version") && j.at("version").get<int>() != ModelConfig::kSchemaVersion) {
    throw ParameterError("unsupported model config version");
  }
  if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
  c.recurrence = j.value("recurrence", c.recurrence);
  if (j.contains("lambda")) {
    const auto& l = j.at("lambda");
    if (l.is_string()) {
      if (l.get<std::string>() != "hard") throw ParameterError("lambda must be a number or \"hard\"");
      c.dc = DcMode::hard();
    } else {
      c.dc = DcMode::soft(l.get<double>());
    }
  }
  if (j.contains("block")) c.block = block_from_json(j.at("block"), c.block);
  if (j.contains("glim_domains")) c.glim = domains_from_json(j.at("glim_domains"));
  if (j.contains("plde_domains")) c.plde = domains_from_json(j.at("plde_domains"));
  c.shared_weights = j.value("shared_weights", c.shared_weights);
  if (j.contains("order")) {
    const auto o = j.at("order").get<std::string>();
    if (o != "kspace_first" && o != "image_first") throw ParameterError("order must be kspace_first or image_first");
    c.kspace_first = o == "kspace_first";
  }
  c.validate();
  return c;
}

/// Reconstruction as plain complex tensors, shape (batch, h, w).
template <class T>
struct ReconResult {
  ComplexTensor<T> image;
  ComplexTensor<T> kspace;
  std::vector<ComplexTensor<T>> per_recurrence;
};

/// Graph-level reconstruction; all tensors are (batch, 2, h, w).
template <class T>
struct GraphResult {
  Var<T> image;
  Var<T> kspace;
  std::vector<Var<T>> per_recurrence;
  std::vector<Var<T>> kspace_per_recurrence;
};

/// A batch of undersampled inputs in 2-channel layout.
template <class T>
struct ReconInput {
  Tensor<T> i_u;
  Tensor<T> k_u;
  std::optional<Tensor<T>> i_ref;
};

template <class T>
ReconInput<T> make_input(const ComplexTensor<T>& k_u, const ComplexTensor<T>* i_ref = nullptr) {
  ReconInput<T> in{to_channels(ifft2c(k_u)), to_channels(k_u), std::nullopt};
  if (i_ref) in.i_ref = to_channels(*i_ref);
  return in;
}

/// Recurrent dual-domain reconstruction network in one of three conventions.
template <class T>
class ReconModel {
 public:
  ReconModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), params_(seed) {
    cfg_.validate();
    const std::size_t nets = cfg_.shared_weights ? 1 : cfg_.recurrence;
    const std::size_t in_ch = cfg_.input_channels();
    for (std::size_t r = 0; r < nets; ++r) {
      const std::string suffix = cfg_.shared_weights ? "" : ".r" + std::to_string(r);
      if (cfg_.mode != Mode::image_only)
        kspace_nets_.emplace_back(params_, "ksp" + suffix, cfg_.block, in_ch, cfg_.glim.kspace, cfg_.plde.kspace);
      image_nets_.emplace_back(params_, "img" + suffix, cfg_.block, in_ch, cfg_.glim.image, cfg_.plde.image);
    }
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  ParamSet<T>& params() noexcept { return params_; }
  const ParamSet<T>& params() const noexcept { return params_; }

  GraphResult<T> forward_image_only(const ReconInput<T>& in, const SamplingMask& mask) const {
    require_mode(cfg_.mode == Mode::image_only, "forward_image_only needs mode image_only");
    return run(in, mask);
  }
  GraphResult<T> forward_dual(const ReconInput<T>& in, const SamplingMask& mask) const {
    require_mode(cfg_.mode == Mode::dual, "forward_dual needs mode dual");
    return run(in, mask);
  }
  GraphResult<T> forward_with_reference(const ReconInput<T>& in, const SamplingMask& mask) const {
    require_mode(cfg_.mode == Mode::dual_with_reference, "forward_with_reference needs mode dual_with_reference");
    return run(in, mask);
  }

  /// Dispatches on the configured mode.
  GraphResult<T> forward(const ReconInput<T>& in, const SamplingMask& mask) const { return run(in, mask); }

  /// Inference without graph recording.
  ReconResult<T> reconstruct(const ReconInput<T>& in, const SamplingMask& mask) const {
    NoGradGuard guard;
    GraphResult<T> g = run(in, mask);
    ReconResult<T> out{from_channels(g.image.value()), from_channels(g.kspace.value()), {}};
    for (const auto& v : g.per_recurrence) out.per_recurrence.push_back(from_channels(v.value()));
    return out;
  }

 private:
  static void require_mode(bool ok, const char* msg) {
    if (!ok) throw ParameterError(msg);
  }

  const ReconNet<T>& image_net(std::size_t r) const { return image_nets_[cfg_.shared_weights ? 0 : r]; }
  const ReconNet<T>& kspace_net(std::size_t r) const { return kspace_nets_[cfg_.shared_weights ? 0 : r]; }

  GraphResult<T> run(const ReconInput<T>& in, const SamplingMask& mask) const {
    const Shape& s = in.k_u.shape();
    if (s.size() != 4 || s[1] != 2 || in.i_u.shape() != s) {
      throw ShapeError("model input must be (batch, 2, h, w) with matching i_u and k_u");
    }
    check_mask_shape(mask, s[2]);
    const bool with_ref = cfg_.mode == Mode::dual_with_reference;
    if (with_ref && !in.i_ref) throw ParameterError("reference image required in dual_with_reference mode");
    if (with_ref && in.i_ref->shape() != s) throw ShapeError("reference image shape mismatch");

    Var<T> ref_img, ref_k;
    if (with_ref) {
      ref_img = Var<T>::leaf(*in.i_ref, false, "i_ref");
      ref_k = Var<T>::leaf(to_channels(fft2c(from_channels(*in.i_ref))), false, "k_ref");
    }
    auto guided = [&](const Var<T>& x, const Var<T>& ref) { return with_ref ? concat_channels<T>({x, ref}) : x; };

    GraphResult<T> res;
    Var<T> image = Var<T>::leaf(in.i_u, false, "i_u");
    Var<T> kspace = Var<T>::leaf(in.k_u, false, "k_u");
    for (std::size_t r = 0; r < cfg_.recurrence; ++r) {
      if (cfg_.mode == Mode::image_only) {
        image = image_net(r)(image);
        kspace = data_consistency(fft2c(image), in.k_u, mask, cfg_.dc);
        image = ifft2c(kspace);
      } else if (cfg_.kspace_first) {
        if (r > 0) kspace = fft2c(image);
        kspace = data_consistency(kspace_net(r)(guided(kspace, ref_k)), in.k_u, mask, cfg_.dc);
        image = image_net(r)(guided(ifft2c(kspace), ref_img));
        kspace = data_consistency(fft2c(image), in.k_u, mask, cfg_.dc);
        image = ifft2c(kspace);
      } else {
        image = image_net(r)(guided(image, ref_img));
        kspace = data_consistency(fft2c(image), in.k_u, mask, cfg_.dc);
        kspace = data_consistency(kspace_net(r)(guided(kspace, ref_k)), in.k_u, mask, cfg_.dc);
        image = ifft2c(kspace);
      }
      res.per_recurrence.push_back(image);
      res.kspace_per_recurrence.push_back(kspace);
    }
    res.image = image;
    res.kspace = kspace;
    return res;
  }

  ModelConfig cfg_;
  ParamSet<T> params_;
  std::vector<ReconNet<T>> image_nets_;
  std::vector<ReconNet<T>> kspace_nets_;
};

/// Training objective: mean |(|image| - |i_f|)| + beta * mean |kspace - k_f| (per real component).
template <class T>
Var<T> recon_loss(const GraphResult<T>& result, const Tensor<T>& i_f, const Tensor<T>& k_f, double beta = 0.01) {
  const Tensor<T> target_mag = complex_magnitude(Var<T>::leaf(i_f)).value();
  Var<T> image_term = l1_loss(complex_magnitude(result.image), target_mag);
  if (beta == 0.0) return image_term;
  return add(image_term, scale(l1_loss(result.kspace, k_f), static_cast<T>(beta)));
}

/// Same objective evaluated on complex tensors.
template <class T>
double recon_loss(const ReconResult<T>& result, const ComplexTensor<T>& i_f, const ComplexTensor<T>& k_f,
                  double beta = 0.01) {
  if (result.image.size() != i_f.size() || result.kspace.size() != k_f.size()) {
    throw ShapeError("loss: shape mismatch");
  }
  double img = 0, k = 0;
  for (std::size_t i = 0; i < i_f.size(); ++i) img += std::abs(double(std::abs(result.image[i])) - std::abs(i_f[i]));
  for (std::size_t i = 0; i < k_f.size(); ++i) {
    k += std::abs(double(result.kspace[i].real()) - k_f[i].real());
    k += std::abs(double(result.kspace[i].imag()) - k_f[i].imag());
  }
  return img / static_cast<double>(i_f.size()) + beta * k / (2.0 * static_cast<double>(k_f.size()));
}

/// Exact trainable-parameter count for a configuration.
inline std::size_t count_parameters(const ModelConfig& cfg) {
  ReconModel<float> model(cfg, 0);
  return model.params().scalar_count();
}

/// Desk-scale preset trained on 64x64 phantoms.
inline ModelConfig desk_config(Mode mode = Mode::dual) {
  ModelConfig c;
  c.mode = mode;
  c.block.channels = 8;
  c.block.growth = 4;
  c.block.heads = 2;
  c.block.plde_hidden = 8;
  if (mode == Mode::image_only) {
    c.glim = DomainSet::none();
    c.plde = DomainSet::image_only();
  }
  return c;
}

/// Full-size preset with roughly one million trainable parameters.
inline ModelConfig full_config(Mode mode = Mode::dual_with_reference) {
  ModelConfig c;
  c.mode = mode;
  c.block.channels = 52;
  c.block.growth = 26;
  c.block.heads = 4;
  c.block.plde_hidden = 52;
  if (mode == Mode::image_only) {
    c.glim = DomainSet::none();
    c.plde = DomainSet::image_only();
  }
  return c;
}

}  // namespace dudo
