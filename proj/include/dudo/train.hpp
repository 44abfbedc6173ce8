#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "dudo/checkpoint.hpp"
#include "dudo/dataset.hpp"
#include "dudo/metrics.hpp"
#include "dudo/model.hpp"

namespace dudo {

/// Stacks the selected (h, w) images into one (batch, h, w) tensor.
inline ComplexTensor<float> stack_images(const ImageSet& set, std::span<const std::size_t> idx) {
  const std::size_t hw = set.height * set.width;
  ComplexTensor<float> out({idx.size(), set.height, set.width});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& src = set.images.at(idx[b]).data();
    std::copy(src.begin(), src.end(), out.data().begin() + b * hw);
  }
  return out;
}

struct Batch {
  ComplexTensor<float> i_f, k_f, k_u;
  std::optional<ComplexTensor<float>> ref;
  ReconInput<float> input;
};

inline Batch make_batch(const Dataset& d, std::span<const std::size_t> idx, const SamplingMask& mask) {
  Batch b;
  b.i_f = stack_images(d.target, idx);
  b.k_f = fft2c(b.i_f);
  b.k_u = undersample(b.k_f, mask);
  if (d.reference) b.ref = stack_images(*d.reference, idx);
  b.input = make_input(b.k_u, b.ref ? &*b.ref : nullptr);
  return b;
}

/// Maps undersampled k-space (batch, h, w) and an optional reference batch to reconstructed images.
using Reconstructor =
    std::function<ComplexTensor<float>(const ComplexTensor<float>& k_u, const ComplexTensor<float>* ref)>;

inline Reconstructor zero_fill_reconstructor() {
  return [](const ComplexTensor<float>& k_u, const ComplexTensor<float>*) { return ifft2c(k_u); };
}

inline Reconstructor model_reconstructor(const ReconModel<float>& model, const SamplingMask& mask) {
  return [&model, mask](const ComplexTensor<float>& k_u, const ComplexTensor<float>* ref) {
    return model.reconstruct(make_input(k_u, ref), mask).image;
  };
}

/// Reconstructs every image of `d` and scores it against its fully sampled target.
inline MetricsReport evaluate(const Reconstructor& recon, const Dataset& d, const SamplingMask& mask,
                              std::size_t batch = 8) {
  if (d.size() == 0) throw ParameterError("cannot evaluate an empty dataset");
  MetricsReport report;
  const std::size_t h = d.target.height, w = d.target.width;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < d.size(); start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(d.size(), start + batch); ++i) idx.push_back(i);
    Batch b = make_batch(d, idx, mask);
    const ComplexTensor<float> out = recon(b.k_u, b.ref ? &*b.ref : nullptr);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      char id[64];
      std::snprintf(id, sizeof id, "%s_%04zu", d.name.c_str(), idx[j]);
      report.per_image.push_back({id, compare_magnitudes<float>(out.plane(j), b.i_f.plane(j), h, w)});
    }
  }
  return report;
}

/// Adam with bias correction; moments kept in float so checkpoints restore them exactly.
class Adam {
 public:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  explicit Adam(ParamSet<float>& ps) : ps_(&ps) {
    for (const auto& p : ps.params()) {
      m_.emplace_back(p.var.shape());
      v_.emplace_back(p.var.shape());
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    const float b1 = static_cast<float>(kBeta1), b2 = static_cast<float>(kBeta2);
    const float step = static_cast<float>(lr / c1), inv_c2 = static_cast<float>(1.0 / c2);
    const float eps = static_cast<float>(kEps);
    auto& params = ps_->params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      Var<float>& var = params[i].var;
      if (!var.node()->has_grad()) continue;
      const float* g = var.grad().data().data();
      float* w = var.mutable_value().data().data();
      float* m = m_[i].data().data();
      float* v = v_[i].data().data();
      for (std::size_t j = 0, n = m_[i].size(); j < n; ++j) {
        m[j] = b1 * m[j] + (1.0f - b1) * g[j];
        v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
        w[j] -= step * m[j] / (std::sqrt(v[j] * inv_c2) + eps);
      }
    }
  }

  std::uint64_t steps() const noexcept { return t_; }

  void save(Checkpoint& ck) const {
    const auto& params = ps_->params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      ck.tensors.push_back({"adam.m/" + params[i].name, m_[i]});
      ck.tensors.push_back({"adam.v/" + params[i].name, v_[i]});
    }
    ck.meta["adam_steps"] = t_;
  }

  void load(const Checkpoint& ck) {
    const auto& params = ps_->params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const NamedTensor* m = ck.find("adam.m/" + params[i].name);
      const NamedTensor* v = ck.find("adam.v/" + params[i].name);
      if (!m || !v || m->value.shape() != m_[i].shape() || v->value.shape() != v_[i].shape()) {
        throw FormatError("checkpoint lacks optimizer state for '" + params[i].name + "'");
      }
      m_[i] = m->value;
      v_[i] = v->value;
    }
    t_ = ck.meta.at("adam_steps").get<std::uint64_t>();
  }

  static nlohmann::json describe() {
    return {{"name", "adam"}, {"beta1", kBeta1}, {"beta2", kBeta2}, {"eps", kEps}, {"bias_correction", true}};
  }

 private:
  ParamSet<float>* ps_;
  std::vector<Tensor<float>> m_, v_;
  std::uint64_t t_ = 0;
};

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch = 4;
  double lr = 1e-3;
  std::size_t decay_epoch = 20;  // lr is multiplied by decay_factor from this 0-based epoch on
  double decay_factor = 0.5;
  double beta = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1 || batch < 1) throw ParameterError("epochs and batch must be >= 1");
    if (!(lr > 0) || !(decay_factor > 0) || !(beta >= 0)) throw ParameterError("lr, decay_factor must be > 0, beta >= 0");
  }
  double lr_at(std::size_t epoch) const { return epoch >= decay_epoch ? lr * decay_factor : lr; }
};

inline nlohmann::json to_json(const TrainOptions& o) {
  return {{"epochs", o.epochs}, {"batch", o.batch},         {"lr", o.lr},      {"decay_epoch", o.decay_epoch},
          {"decay_factor", o.decay_factor}, {"beta", o.beta}, {"seed", o.seed}};
}

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double lr = 0, train_loss = 0, val_loss = 0, val_psnr = 0;
};

inline std::string epoch_log_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,lr,train_loss,val_loss,val_psnr\n";
  char buf[160];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.6f\n", e.epoch, e.lr, e.train_loss, e.val_loss, e.val_psnr);
    out += buf;
  }
  return out;
}

/// Order in which epoch `epoch` visits the training set; depends only on (seed, epoch).
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + epoch + 1);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

/// Owns the optimizer and bookkeeping for one model; one epoch at a time.
class Trainer {
 public:
  Trainer(ReconModel<float>& model, SamplingMask mask, TrainOptions opts)
      : model_(&model), mask_(std::move(mask)), opts_(opts), adam_(model.params()) {
    opts_.validate();
  }

  std::size_t next_epoch() const noexcept { return next_epoch_; }
  double best_val_psnr() const noexcept { return best_psnr_; }
  const std::vector<EpochLog>& log() const noexcept { return log_; }
  const SamplingMask& mask() const noexcept { return mask_; }

  /// Loss of one optimizer step; throws NumericalError on a non-finite loss or gradient.
  double step(const Batch& b, double lr) {
    ParamSet<float>& ps = model_->params();
    ps.zero_grad();
    GraphResult<float> g = model_->forward(b.input, mask_);
    Var<float> loss = recon_loss(g, to_channels(b.i_f), to_channels(b.k_f), opts_.beta);
    const double value = loss.value()[0];
    backward(loss);
    for (const auto& p : ps.params()) {
      if (p.var.node()->has_grad() && !p.var.grad().all_finite()) {
        std::string where;
        try {
          check_graph_finite(loss);
        } catch (const NumericalError& e) {
          where = std::string("; ") + e.what();
        }
        throw NumericalError("non-finite gradient for parameter '" + p.name + "' (loss " + std::to_string(value) + ")" +
                             where);
      }
    }
    if (!std::isfinite(value)) {
      check_graph_finite(loss);
      throw NumericalError("non-finite loss");
    }
    adam_.step(lr);
    return value;
  }

  /// Runs the next epoch over `train` and scores `val`; returns the appended log row.
  EpochLog run_epoch(const Dataset& train, const Dataset& val) {
    if (train.size() == 0 || val.size() == 0) throw ParameterError("train and val sets must be non-empty");
    const std::size_t epoch = next_epoch_;
    const double lr = opts_.lr_at(epoch);
    const auto order = epoch_permutation(train.size(), opts_.seed, epoch);
    double total = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opts_.batch) {
      const std::size_t end = std::min(order.size(), start + opts_.batch);
      Batch b = make_batch(train, std::span(order).subspan(start, end - start), mask_);
      total += step(b, lr);
      ++batches;
    }
    EpochLog row{epoch + 1, lr, total / static_cast<double>(batches), 0, 0};
    validate(val, row);
    log_.push_back(row);
    ++next_epoch_;
    return row;
  }

  /// Complete trainer state: parameters, optimizer moments, schedule position, log.
  Checkpoint snapshot() const {
    Checkpoint ck;
    export_params(model_->params(), ck);
    adam_.save(ck);
    ck.meta["model"] = to_json(model_->config());
    ck.meta["train"] = to_json(opts_);
    ck.meta["mask"] = mask_.serialize();
    ck.meta["next_epoch"] = next_epoch_;
    ck.meta["best_val_psnr"] = best_psnr_;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& e : log_) rows.push_back({e.epoch, e.lr, e.train_loss, e.val_loss, e.val_psnr});
    ck.meta["log"] = std::move(rows);
    return ck;
  }

  void restore(const Checkpoint& ck) {
    import_params(model_->params(), ck);
    adam_.load(ck);
    next_epoch_ = ck.meta.at("next_epoch").get<std::size_t>();
    best_psnr_ = ck.meta.at("best_val_psnr").is_number() ? ck.meta.at("best_val_psnr").get<double>()
                                                          : -std::numeric_limits<double>::infinity();
    log_.clear();
    for (const auto& r : ck.meta.at("log"))
      log_.push_back({r[0].get<std::size_t>(), r[1].get<double>(), r[2].get<double>(), r[3].get<double>(),
                      r[4].get<double>()});
  }

  /// True when the most recent epoch set a new best validation PSNR.
  bool improved() const noexcept { return improved_; }

 private:
  void validate(const Dataset& val, EpochLog& row) {
    double loss = 0;
    std::vector<double> psnrs;
    std::vector<std::size_t> idx;
    const std::size_t h = val.target.height, w = val.target.width;
    for (std::size_t start = 0; start < val.size(); start += 8) {
      idx.clear();
      for (std::size_t i = start; i < std::min(val.size(), start + 8); ++i) idx.push_back(i);
      Batch b = make_batch(val, idx, mask_);
      ReconResult<float> r = model_->reconstruct(b.input, mask_);
      loss += recon_loss(r, b.i_f, b.k_f, opts_.beta) * static_cast<double>(idx.size());
      for (std::size_t j = 0; j < idx.size(); ++j)
        psnrs.push_back(compare_magnitudes<float>(r.image.plane(j), b.i_f.plane(j), h, w).psnr);
    }
    row.val_loss = loss / static_cast<double>(val.size());
    row.val_psnr = aggregate(psnrs).mean;
    improved_ = row.val_psnr > best_psnr_;
    if (improved_) best_psnr_ = row.val_psnr;
  }

  ReconModel<float>* model_;
  SamplingMask mask_;
  TrainOptions opts_;
  Adam adam_;
  std::size_t next_epoch_ = 0;
  double best_psnr_ = -std::numeric_limits<double>::infinity();
  bool improved_ = false;
  std::vector<EpochLog> log_;
};

/// Trains until `opts.epochs` epochs are logged. With `out_dir`, writes train_log.csv,
/// train_meta.json, last.ckpt and best.ckpt after every epoch; resumes from `resume` when given.
inline std::vector<EpochLog> train(ReconModel<float>& model, const Dataset& train_set, const Dataset& val_set,
                                   const SamplingMask& mask, const TrainOptions& opts,
                                   const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                   const std::optional<std::filesystem::path>& resume = std::nullopt,
                                   const std::function<void(const EpochLog&)>& on_epoch = {}) {
  if (model.config().mode == Mode::dual_with_reference && (!train_set.reference || !val_set.reference)) {
    throw ParameterError("reference-guided training needs reference images for train and val");
  }
  Trainer trainer(model, mask, opts);
  if (resume) trainer.restore(load_checkpoint(*resume));
  if (out_dir) {
    nlohmann::json meta{{"version", 1},
                        {"optimizer", Adam::describe()},
                        {"train", to_json(opts)},
                        {"model", to_json(model.config())},
                        {"parameters", model.params().scalar_count()},
                        {"mask", mask.serialize()},
                        {"train_images", train_set.size()},
                        {"val_images", val_set.size()}};
    atomic_write(*out_dir / "train_meta.json", meta.dump(2) + "\n");
  }
  while (trainer.next_epoch() < opts.epochs) {
    const EpochLog row = trainer.run_epoch(train_set, val_set);
    if (out_dir) {
      const Checkpoint ck = trainer.snapshot();
      save_checkpoint(*out_dir / "last.ckpt", ck);
      if (trainer.improved()) save_checkpoint(*out_dir / "best.ckpt", ck);
      atomic_write(*out_dir / "train_log.csv", epoch_log_csv(trainer.log()));
    }
    if (on_epoch) on_epoch(row);
  }
  return trainer.log();
}

/// Rebuilds a model from a checkpoint written by `train`.
inline ReconModel<float> load_model(const Checkpoint& ck) {
  ReconModel<float> model(model_config_from_json(ck.meta.at("model")), 0);
  import_params(model.params(), ck);
  return model;
}

}  // namespace dudo
