#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dudo/ops.hpp"
#include "dudo/params.hpp"

namespace dudo {

/// Hyperparameters shared by the image and k-space networks.
struct BlockConfig {
  std::size_t channels = 32;
  std::size_t growth = 16;
  std::size_t stage_count = 4;
  std::size_t heads = 4;
  std::vector<std::size_t> dilations{1, 2, 4, 1};
  std::size_t plde_hidden = 32;
  std::size_t window = 4;

  std::size_t head_dim() const { return channels / heads; }

  void validate(bool with_attention) const {
    if (channels == 0) throw ParameterError("channels must be positive");
    if (growth == 0) throw ParameterError("growth must be positive");
    if (stage_count < 1) throw ParameterError("stage_count must be >= 1");
    if (dilations.empty()) throw ParameterError("dilations must be non-empty");
    for (auto d : dilations)
      if (d < 1) throw ParameterError("dilations must be >= 1");
    if (plde_hidden == 0) throw ParameterError("plde_hidden must be positive");
    if (window == 0) throw ParameterError("window must be positive");
    if (with_attention && (heads == 0 || channels % heads != 0)) {
      throw ParameterError("channels (" + std::to_string(channels) + ") must be divisible by heads (" +
                           std::to_string(heads) + ")");
    }
  }

  friend bool operator==(const BlockConfig&, const BlockConfig&) = default;
};

/// Convolution layer with bias; weight (out, in/groups, k, k).
template <class T>
struct Conv {
  Var<T> weight;
  Var<T> bias;
  std::size_t dilation = 1;
  std::size_t groups = 1;

  Conv() = default;
  Conv(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
       std::size_t dil = 1, std::size_t grp = 1, Init init = Init::kaiming)
      : dilation(dil), groups(grp) {
    weight = ps.add(name + ".weight", {out, in / grp, kernel, kernel}, init);
    bias = ps.add(name + ".bias", {out}, Init::zeros);
  }

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias, dilation, groups); }
  std::size_t out_channels() const { return weight.shape()[0]; }
};

/// Two 3x3 convolutions with ReLU: F_{-1} and F_0^C.
template <class T>
class ShallowFeatureExtraction {
 public:
  ShallowFeatureExtraction() = default;
  ShallowFeatureExtraction(ParamSet<T>& ps, const std::string& prefix, std::size_t in_channels, std::size_t channels)
      : in_channels_(in_channels),
        conv1_(ps, prefix + ".conv1", in_channels, channels, 3),
        conv2_(ps, prefix + ".conv2", channels, channels, 3) {}

  std::pair<Var<T>, Var<T>> operator()(const Var<T>& x) const {
    if (x.shape().size() != 4 || x.shape()[1] != in_channels_) {
      throw ShapeError("sfe: expected " + std::to_string(in_channels_) + " input channels, got shape " +
                       shape_string(x.shape()));
    }
    Var<T> f_minus1 = relu(conv1_(x));
    Var<T> f0c = relu(conv2_(f_minus1));
    return {f_minus1, f0c};
  }

 private:
  std::size_t in_channels_ = 2;
  Conv<T> conv1_, conv2_;
};

/// Channel-wise multi-head self-attention with a residual connection.
///
/// Tokens are the C channel vectors of length h*w. Q, K, V come from 1x1 projections; each head
/// of d = C/heads channels forms a d x d map softmax(Q K^T / sqrt(d)) and mixes the V rows with
/// it. Heads are concatenated, passed through a zero-initialized output projection and added to
/// the input, so the block starts as the identity.
template <class T>
class ChannelMSA {
 public:
  ChannelMSA() = default;
  ChannelMSA(ParamSet<T>& ps, const std::string& prefix, std::size_t channels, std::size_t heads)
      : channels_(channels), heads_(heads) {
    if (heads == 0 || channels % heads != 0) {
      throw ParameterError("channel_msa: channels (" + std::to_string(channels) + ") not divisible by heads (" +
                           std::to_string(heads) + ")");
    }
    q_ = Conv<T>(ps, prefix + ".q", channels, channels, 1);
    k_ = Conv<T>(ps, prefix + ".k", channels, channels, 1);
    v_ = Conv<T>(ps, prefix + ".v", channels, channels, 1);
    out_ = Conv<T>(ps, prefix + ".out", channels, channels, 1, 1, 1, Init::zeros);
  }

  Var<T> operator()(const Var<T>& x) const { return forward(x).first; }

  /// Returns (output, attention maps of shape (batch*heads, d, d)).
  std::pair<Var<T>, Var<T>> forward(const Var<T>& x) const {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != channels_) {
      throw ShapeError("channel_msa: expected " + std::to_string(channels_) + " channels, got " + shape_string(s));
    }
    const std::size_t B = s[0], d = channels_ / heads_, N = s[2] * s[3];
    const Shape tokens{B * heads_, d, N};
    Var<T> q = reshape(q_(x), tokens);
    Var<T> k = reshape(k_(x), tokens);
    Var<T> v = reshape(v_(x), tokens);
    Var<T> logits = scale(matmul_nt(q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    Var<T> attn = softmax(logits, 2);
    Var<T> mixed = reshape(matmul(attn, v), s);
    return {add(x, out_(mixed)), attn};
  }

  std::size_t heads() const { return heads_; }

 private:
  std::size_t channels_ = 0;
  std::size_t heads_ = 1;
  Conv<T> q_, k_, v_, out_;
};

/// Dilated residual dense block: L dense 3x3 layers (ReLU) with the configured dilations, each
/// consuming all previous features and emitting `growth` channels, 1x1 local fusion back to C,
/// and a local residual.
template <class T>
class DRDB {
 public:
  DRDB() = default;
  DRDB(ParamSet<T>& ps, const std::string& prefix, const BlockConfig& cfg) {
    std::size_t width = cfg.channels;
    for (std::size_t j = 0; j < cfg.dilations.size(); ++j) {
      layers_.emplace_back(ps, prefix + ".conv" + std::to_string(j + 1), width, cfg.growth, 3, cfg.dilations[j]);
      widths_.push_back(width);
      width += cfg.growth;
    }
    fusion_ = Conv<T>(ps, prefix + ".lff", width, cfg.channels, 1);
    widths_.push_back(width);
  }

  Var<T> operator()(const Var<T>& x) const {
    std::vector<Var<T>> features{x};
    Var<T> cat = x;
    for (const auto& layer : layers_) {
      features.push_back(relu(layer(cat)));
      cat = concat_channels(features);
    }
    return add(x, fusion_(cat));
  }

  /// Input width of each dense layer followed by the fusion width: C, C+g, C+2g, ...
  const std::vector<std::size_t>& widths() const { return widths_; }

 private:
  std::vector<Conv<T>> layers_;
  Conv<T> fusion_;
  std::vector<std::size_t> widths_;
};

/// Parallel local-detail branch: 1x1 match conv, three depthwise 3x3 convs with SiLU, window
/// embedding, and a zero-initialized 1x1 projection back to C channels.
template <class T>
class PLDE {
 public:
  PLDE() = default;
  PLDE(ParamSet<T>& ps, const std::string& prefix, const BlockConfig& cfg) : window_(cfg.window) {
    match_ = Conv<T>(ps, prefix + ".match", cfg.channels, cfg.plde_hidden, 1);
    for (int i = 1; i <= 3; ++i)
      dw_.emplace_back(ps, prefix + ".dw" + std::to_string(i), cfg.plde_hidden, cfg.plde_hidden, 3, 1,
                       cfg.plde_hidden);
    const std::size_t p = cfg.window * cfg.window;
    embed_weight_ = ps.add(prefix + ".embed.weight", {p, p}, Init::identity);
    embed_bias_ = ps.add(prefix + ".embed.bias", {p}, Init::zeros);
    proj_ = Conv<T>(ps, prefix + ".proj", cfg.plde_hidden, cfg.channels, 1, 1, 1, Init::zeros);
  }

  Var<T> operator()(const Var<T>& x) const {
    Var<T> h = match_(x);
    for (const auto& dw : dw_) h = silu(dw(h));
    h = window_embed(h, embed_weight_, embed_bias_, window_);
    return proj_(h);
  }

 private:
  std::size_t window_ = 4;
  Conv<T> match_;
  std::vector<Conv<T>> dw_;
  Var<T> embed_weight_, embed_bias_;
  Conv<T> proj_;
};

/// One backbone stage: DRDB, plus the PLDE branch added in parallel when enabled.
template <class T>
class Stage {
 public:
  Stage() = default;
  Stage(ParamSet<T>& ps, const std::string& prefix, const BlockConfig& cfg, bool with_plde)
      : drdb_(ps, prefix + ".drdb", cfg) {
    if (with_plde) plde_.emplace(ps, prefix + ".plde", cfg);
  }

  Var<T> operator()(const Var<T>& x) const {
    Var<T> y = drdb_(x);
    return plde_ ? add(y, (*plde_)(x)) : y;
  }

 private:
  DRDB<T> drdb_;
  std::optional<PLDE<T>> plde_;
};

/// Global feature fusion: concat of stage outputs, 1x1 conv to C, 3x3 conv to C.
template <class T>
class GFF {
 public:
  GFF() = default;
  GFF(ParamSet<T>& ps, const std::string& prefix, std::size_t stages, std::size_t channels)
      : stages_(stages),
        conv1x1_(ps, prefix + ".conv1x1", stages * channels, channels, 1),
        conv3x3_(ps, prefix + ".conv3x3", channels, channels, 3) {}

  Var<T> operator()(const std::vector<Var<T>>& stage_outputs) const {
    if (stage_outputs.size() != stages_) {
      throw ShapeError("gff: expected " + std::to_string(stages_) + " stage outputs, got " +
                       std::to_string(stage_outputs.size()));
    }
    return conv3x3_(conv1x1_(concat_channels(stage_outputs)));
  }

 private:
  std::size_t stages_ = 4;
  Conv<T> conv1x1_, conv3x3_;
};

/// Global feature refinement on F_{-1} + fused: 3x3 conv (ReLU), then a zero-initialized 3x3 conv
/// to the 2 output channels.
template <class T>
class GFR {
 public:
  GFR() = default;
  GFR(ParamSet<T>& ps, const std::string& prefix, std::size_t channels)
      : conv1_(ps, prefix + ".conv1", channels, channels, 3),
        conv2_(ps, prefix + ".conv2", channels, 2, 3, 1, 1, Init::zeros) {}

  Var<T> operator()(const Var<T>& f_minus1, const Var<T>& fused) const {
    if (f_minus1.shape() != fused.shape()) {
      throw ShapeError("gfr: shape mismatch " + shape_string(f_minus1.shape()) + " vs " +
                       shape_string(fused.shape()));
    }
    return conv2_(relu(conv1_(add(f_minus1, fused))));
  }

 private:
  Conv<T> conv1_, conv2_;
};

template <class T>
struct FeatureMaps {
  Var<T> f_minus1;
  Var<T> f0_c;
  Var<T> f0;
  std::vector<Var<T>> stages;
  Var<T> fused;
};

/// One domain's recurrent block: SFE, optional K-GLIM, stages, GFF, GFR, and an input skip so the
/// block predicts a residual on its 2-channel input.
template <class T>
class ReconNet {
 public:
  ReconNet() = default;
  ReconNet(ParamSet<T>& ps, const std::string& prefix, const BlockConfig& cfg, std::size_t in_channels,
           bool with_glim, bool with_plde)
      : sfe_(ps, prefix + ".sfe", in_channels, cfg.channels), gff_(ps, prefix + ".gff", cfg.stage_count, cfg.channels),
        gfr_(ps, prefix + ".gfr", cfg.channels) {
    cfg.validate(with_glim);
    if (with_glim) glim_.emplace(ps, prefix + ".glim", cfg.channels, cfg.heads);
    for (std::size_t i = 0; i < cfg.stage_count; ++i)
      stages_.emplace_back(ps, prefix + ".stage" + std::to_string(i + 1), cfg, with_plde);
  }

  /// x: (batch, in_channels, h, w) -> (batch, 2, h, w).
  Var<T> operator()(const Var<T>& x) const { return forward(x).first; }

  std::pair<Var<T>, FeatureMaps<T>> forward(const Var<T>& x) const {
    FeatureMaps<T> fm;
    std::tie(fm.f_minus1, fm.f0_c) = sfe_(x);
    fm.f0 = glim_ ? (*glim_)(fm.f0_c) : fm.f0_c;
    Var<T> f = fm.f0;
    for (const auto& stage : stages_) {
      f = stage(f);
      fm.stages.push_back(f);
    }
    fm.fused = gff_(fm.stages);
    Var<T> residual = gfr_(fm.f_minus1, fm.fused);
    Var<T> base = x.shape()[1] == 2 ? x : slice_channels(x, 0, 2);
    return {add(base, residual), std::move(fm)};
  }

 private:
  ShallowFeatureExtraction<T> sfe_;
  std::optional<ChannelMSA<T>> glim_;
  std::vector<Stage<T>> stages_;
  GFF<T> gff_;
  GFR<T> gfr_;
};

}  // namespace dudo
