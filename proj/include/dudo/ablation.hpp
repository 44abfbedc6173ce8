#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "dudo/train.hpp"

namespace dudo {

/// One module placement: where K-GLIM and I-PLDE sit.
struct Placement {
  DomainSet glim;
  DomainSet plde;

  /// "baseline", "glim@kspace", "plde@both", "glim@kspace+plde@image", ...
  std::string name() const {
    std::string out;
    if (glim != DomainSet::none()) out = "glim@" + glim.label();
    if (plde != DomainSet::none()) out += (out.empty() ? "" : "+") + std::string("plde@") + plde.label();
    return out.empty() ? "baseline" : out;
  }
  friend bool operator==(const Placement&, const Placement&) = default;
};

inline DomainSet parse_domains(const std::string& s) {
  if (s == "image") return DomainSet::image_only();
  if (s == "kspace") return DomainSet::kspace_only();
  if (s == "both") return DomainSet::both();
  if (s == "none") return DomainSet::none();
  throw ParameterError("unknown domain '" + s + "' (expected image, kspace, both or none)");
}

inline Placement parse_placement(const std::string& text) {
  Placement p;
  if (text == "baseline") return p;
  std::size_t start = 0;
  bool seen_glim = false, seen_plde = false;
  while (start <= text.size()) {
    const std::size_t plus = std::min(text.find('+', start), text.size());
    const std::string part = text.substr(start, plus - start);
    const std::size_t at = part.find('@');
    if (at == std::string::npos) throw ParameterError("bad placement '" + text + "'");
    const std::string module = part.substr(0, at);
    if (module == "glim" && !seen_glim) {
      p.glim = parse_domains(part.substr(at + 1));
      seen_glim = true;
    } else if (module == "plde" && !seen_plde) {
      p.plde = parse_domains(part.substr(at + 1));
      seen_plde = true;
    } else {
      throw ParameterError("bad placement '" + text + "'");
    }
    start = plus + 1;
  }
  return p;
}

/// Every cell of the domain-wise ablation table: baseline, each module alone in each domain
/// placement, and the combined K-GLIM@k-space + I-PLDE@image model.
inline std::vector<Placement> default_placements() {
  const DomainSet n = DomainSet::none(), i = DomainSet::image_only(), k = DomainSet::kspace_only(),
                  b = DomainSet::both();
  return {{n, n}, {i, n}, {k, n}, {b, n}, {n, i}, {n, k}, {n, b}, {k, i}};
}

/// Training budget shared by every ablation row. Smaller than the single-model preset so the
/// eight-row table fits a desk-scale run.
struct AblationBudget {
  std::size_t train_images = 80;
  std::size_t val_images = 40;
  std::size_t test_images = 80;
  std::size_t epochs = 8;
};

struct AblationRow {
  Placement placement;
  std::size_t parameters = 0;
  Aggregate psnr, ssim;
  std::string status = "ok";  // or the failure message
};

struct AblationMatrix {
  std::vector<AblationRow> rows;

  std::string to_csv() const {
    std::string out = "row,glim,plde,parameters,psnr,psnr_std,ssim,ssim_std,status\n";
    char buf[200];
    for (const auto& r : rows) {
      std::string status = r.status;
      for (char& c : status)
        if (c == ',' || c == '\n') c = ';';
      std::snprintf(buf, sizeof buf, ",%s,%s,%zu,%.4f,%.4f,%.6f,%.6f,", r.placement.glim.label().c_str(),
                    r.placement.plde.label().c_str(), r.parameters, r.psnr.mean, r.psnr.std, r.ssim.mean, r.ssim.std);
      out += r.placement.name() + buf + status + "\n";
    }
    return out;
  }

  const AblationRow* find(const Placement& p) const {
    for (const auto& r : rows)
      if (r.placement == p) return &r;
    return nullptr;
  }
};

/// Trains one model per placement from identical seeds and budget, then scores it on `test`.
/// A failing row records its error and the run continues.
inline AblationMatrix run_ablation(const std::vector<Placement>& placements, const ModelConfig& base,
                                   std::uint64_t model_seed, const Dataset& train_set, const Dataset& val_set,
                                   const Dataset& test_set, const SamplingMask& mask, const TrainOptions& opts,
                                   const std::function<void(const AblationRow&)>& on_row = {}) {
  AblationMatrix m;
  for (const auto& p : placements) {
    AblationRow row{p, 0, {}, {}, "ok"};
    try {
      ModelConfig cfg = base;
      cfg.glim = p.glim;
      cfg.plde = p.plde;
      ReconModel<float> model(cfg, model_seed);
      row.parameters = model.params().scalar_count();
      train(model, train_set, val_set, mask, opts);
      const MetricsReport rep = evaluate(model_reconstructor(model, mask), test_set, mask);
      row.psnr = rep.psnr();
      row.ssim = rep.ssim();
    } catch (const std::exception& e) {
      row.status = std::string("failed: ") + e.what();
    }
    m.rows.push_back(row);
    if (on_row) on_row(m.rows.back());
  }
  return m;
}

}  // namespace dudo
