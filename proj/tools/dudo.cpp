// Command-line front end: feasibility analysis, masks, phantom data, training, evaluation and
// the module-placement ablation.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dudo/ablation.hpp"
#include "dudo/feasibility.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dudo;

namespace {

enum Exit { kOk = 0, kUsage = 2, kData = 3, kNumerical = 4 };

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Globals {
  std::uint64_t seed = 0;
  std::string config;
  std::string out = "out";
  double accel = 4.0;
  double acs = 0.125;
};

// Inclusive range "lo..hi" or "lo..hi:step", or a comma list.
std::vector<double> parse_range(const std::string& text) {
  std::vector<double> out;
  const auto dots = text.find("..");
  try {
    if (dots == std::string::npos) {
      std::size_t start = 0;
      while (start <= text.size()) {
        const auto comma = std::min(text.find(',', start), text.size());
        std::size_t used = 0;
        const std::string item = text.substr(start, comma - start);
        out.push_back(std::stod(item, &used));
        if (used != item.size()) throw UsageError("bad number '" + item + "'");
        start = comma + 1;
      }
      return out;
    }
    const auto colon = text.find(':', dots);
    const double lo = std::stod(text.substr(0, dots));
    const double hi = std::stod(text.substr(dots + 2, colon == std::string::npos ? std::string::npos : colon - dots - 2));
    const double step = colon == std::string::npos ? 1.0 : std::stod(text.substr(colon + 1));
    if (!(step > 0) || hi < lo) throw UsageError("range '" + text + "' is empty or has a non-positive step");
    for (std::size_t i = 0;; ++i) {
      const double v = lo + static_cast<double>(i) * step;
      if (v > hi + 1e-9 * step) break;
      out.push_back(v);
    }
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const UsageError*>(&e)) throw;
    throw UsageError("cannot parse range '" + text + "'");
  }
  return out;
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw UsageError("config " + path + ": " + e.what());
  }
  detail::reject_unknown(j, {"version", "preset", "model", "train", "data", "ablation", "analyze"}, "run config");
  return j;
}

ModelConfig model_from(const json& cfg, const std::string& preset_flag, const std::string& mode_flag) {
  const std::string preset = !preset_flag.empty() ? preset_flag : cfg.value("preset", std::string("desk"));
  Mode mode = Mode::dual;
  if (cfg.contains("model") && cfg["model"].contains("mode")) mode = parse_mode(cfg["model"]["mode"]);
  if (!mode_flag.empty()) mode = parse_mode(mode_flag);
  ModelConfig m;
  if (preset == "desk") {
    m = desk_config(mode);
  } else if (preset == "full") {
    m = full_config(mode);
  } else {
    throw UsageError("unknown preset '" + preset + "' (desk or full)");
  }
  if (cfg.contains("model")) m = model_config_from_json(cfg["model"], m);
  m.mode = mode;
  if (mode == Mode::image_only) {
    m.glim.kspace = false;
    m.plde.kspace = false;
  }
  m.validate();
  return m;
}

TrainOptions train_from(const json& cfg) {
  TrainOptions o;
  if (!cfg.contains("train")) return o;
  const json& t = cfg["train"];
  detail::reject_unknown(t, {"epochs", "batch", "lr", "decay_epoch", "decay_factor", "beta"}, "train config");
  o.epochs = t.value("epochs", o.epochs);
  o.batch = t.value("batch", o.batch);
  o.lr = t.value("lr", o.lr);
  o.decay_epoch = t.value("decay_epoch", o.decay_epoch);
  o.decay_factor = t.value("decay_factor", o.decay_factor);
  o.beta = t.value("beta", o.beta);
  return o;
}

DataPreset data_from(const json& cfg) {
  DataPreset p;
  if (!cfg.contains("data")) return p;
  const json& d = cfg["data"];
  detail::reject_unknown(d, {"size", "train", "val", "test", "paired_contrast", "min_ellipses", "max_ellipses",
                             "intensity_lo", "intensity_hi", "phase_amplitude"},
                         "data config");
  p.phantom.size = d.value("size", p.phantom.size);
  p.train = d.value("train", p.train);
  p.val = d.value("val", p.val);
  p.test = d.value("test", p.test);
  p.phantom.paired_contrast = d.value("paired_contrast", p.phantom.paired_contrast);
  p.phantom.min_ellipses = d.value("min_ellipses", p.phantom.min_ellipses);
  p.phantom.max_ellipses = d.value("max_ellipses", p.phantom.max_ellipses);
  p.phantom.intensity_lo = d.value("intensity_lo", p.phantom.intensity_lo);
  p.phantom.intensity_hi = d.value("intensity_hi", p.phantom.intensity_hi);
  p.phantom.phase_amplitude = d.value("phase_amplitude", p.phantom.phase_amplitude);
  return p;
}

void emit(const fs::path& path, const std::string& text) {
  atomic_write(path, text);
  std::printf("wrote %s\n", path.string().c_str());
}

// Magnitudes of up to 16 images tiled 4 wide as an 8-bit PGM, scaled by the reference peaks.
std::string pgm_grid(const std::vector<ComplexTensor<float>>& recon, const std::vector<ComplexTensor<float>>& ref) {
  const std::size_t n = std::min<std::size_t>(recon.size(), 16), cols = std::min<std::size_t>(n, 4);
  const std::size_t rows = (n + cols - 1) / cols, h = recon[0].height(), w = recon[0].width();
  std::vector<unsigned char> px(rows * h * cols * w, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double peak = 0;
    for (const auto& v : ref[i].data()) peak = std::max(peak, double(std::abs(v)));
    const double s = peak > 0 ? 255.0 / peak : 0.0;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double v = std::clamp(std::abs(recon[i][y * w + x]) * s, 0.0, 255.0);
        px[((i / cols) * h + y) * cols * w + (i % cols) * w + x] = static_cast<unsigned char>(std::lround(v));
      }
  }
  std::string out = "P5\n" + std::to_string(cols * w) + " " + std::to_string(rows * h) + "\n255\n";
  out.append(reinterpret_cast<const char*>(px.data()), px.size());
  return out;
}

int cmd_analyze(const Globals& g, const std::string& k_text, const std::string& a_text,
                std::uint64_t trials) {
  const std::vector<double> ks = parse_range(k_text), as = parse_range(a_text);
  for (double k : ks)
    if (k != std::floor(k) || k < 2) throw UsageError("window sizes must be integers >= 2");
  for (double a : as)
    if (!(a >= 1)) throw UsageError("accelerations must be >= 1");
  if (!(g.acs >= 0 && g.acs < 1)) throw UsageError("--acs must lie in [0, 1)");

  std::string csv = "k,a,P\n", mc = "k,a,P,P_mc,abs_diff\n";
  double worst_gap = 0;
  char buf[128];
  std::vector<FeasibilityCell> cells;
  for (double k : ks)
    for (double a : as) {
      const FeasibilityQuery q{static_cast<int>(k), a, g.acs};
      const double p = feasibility_probability(q);
      cells.push_back({q.window_k, a, p});
      std::snprintf(buf, sizeof buf, "%d,%g,%.6f\n", q.window_k, a, p);
      csv += buf;
      if (trials > 0) {
        const double sim = monte_carlo_feasibility(q, trials, cell_seed(g.seed, q.window_k, a));
        worst_gap = std::max(worst_gap, std::abs(sim - p));
        std::snprintf(buf, sizeof buf, "%d,%g,%.6f,%.6f,%.6f\n", q.window_k, a, p, sim, std::abs(sim - p));
        mc += buf;
      }
    }
  const fs::path out(g.out);
  emit(out / "feasibility.csv", csv);
  const auto below = min_accel_below(cells, 0.5);
  json summary{{"version", 1}, {"acs_fraction", g.acs}, {"cells", cells.size()}};
  summary["min_accel_max_P_below_0.5"] = below ? json(*below) : json(nullptr);
  if (trials > 0) {
    emit(out / "feasibility_mc.csv", mc);
    summary["mc_trials"] = trials;
    summary["max_abs_diff"] = worst_gap;
  }
  emit(out / "feasibility_summary.json", summary.dump(2) + "\n");
  if (below) {
    std::printf("smallest a with max over k of P < 0.5: %g\n", *below);
  } else {
    std::printf("no grid acceleration has max over k of P < 0.5\n");
  }
  return kOk;
}

int cmd_mask(const Globals& g, std::size_t h) {
  const SamplingMask m = make_cartesian_mask(h, g.accel, g.acs, g.seed);
  emit(fs::path(g.out) / "mask.txt", m.serialize() + "\n");
  std::printf("%s\n", m.serialize().c_str());
  return kOk;
}

int cmd_gen_data(const Globals& g, const json& cfg, CLI::App& sub, std::size_t size, std::size_t train,
                 std::size_t val, std::size_t test, bool paired) {
  DataPreset p = data_from(cfg);
  if (sub.count("--size")) p.phantom.size = size;
  if (sub.count("--train")) p.train = train;
  if (sub.count("--val")) p.val = val;
  if (sub.count("--test")) p.test = test;
  if (paired) p.phantom.paired_contrast = true;
  p.seed = g.seed;
  p.phantom.validate();
  write_dataset(g.out, p);
  std::printf("wrote %zu/%zu/%zu phantoms of %zux%zu to %s\n", p.train, p.val, p.test, p.phantom.size,
              p.phantom.size, g.out.c_str());
  return kOk;
}

SamplingMask mask_for(const Globals& g, std::size_t h, std::optional<std::uint64_t> mask_seed) {
  return make_cartesian_mask(h, g.accel, g.acs, mask_seed.value_or(g.seed));
}

struct TrainFlags {
  std::string data, preset, mode, resume;
  std::size_t epochs = 0, batch = 0;
  double lr = 0, beta = 0;
  std::optional<std::uint64_t> mask_seed;
};

int cmd_train(const Globals& g, const json& cfg, CLI::App& sub, const TrainFlags& f) {
  ModelConfig mcfg = model_from(cfg, f.preset, f.mode);
  TrainOptions opts = train_from(cfg);
  if (sub.count("--epochs")) opts.epochs = f.epochs;
  if (sub.count("--batch")) opts.batch = f.batch;
  if (sub.count("--lr")) opts.lr = f.lr;
  if (sub.count("--beta")) opts.beta = f.beta;
  opts.seed = g.seed;
  opts.validate();

  const Dataset train_set = read_split(f.data, "train"), val_set = read_split(f.data, "val");
  const SamplingMask mask = mask_for(g, train_set.target.height, f.mask_seed);
  ReconModel<float> model(mcfg, g.seed);
  std::printf("model %s, %zu parameters, mask %zu/%zu lines\n", to_string(mcfg.mode).c_str(),
              model.params().scalar_count(), mask.acquired(), mask.height());
  const auto t0 = std::chrono::steady_clock::now();
  train(model, train_set, val_set, mask, opts, fs::path(g.out),
        f.resume.empty() ? std::nullopt : std::optional<fs::path>(f.resume), [&](const EpochLog& e) {
          const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          std::printf("epoch %3zu  lr %.2e  train %.6f  val %.6f  val_psnr %.3f  (%.0fs)\n", e.epoch, e.lr,
                      e.train_loss, e.val_loss, e.val_psnr, secs);
          std::fflush(stdout);
        });
  return kOk;
}

int cmd_eval(const Globals& g, CLI::App& app, CLI::App& sub, const std::string& data, const std::string& split,
             const std::string& checkpoint, bool zero_fill, bool export_pgm,
             std::optional<std::uint64_t> mask_seed) {
  if (zero_fill == !checkpoint.empty()) throw UsageError("give exactly one of --checkpoint or --zero-fill");
  const Dataset set = read_split(data, split);
  const bool explicit_mask = app.count("--accel") || app.count("--acs") || sub.count("--mask-seed");
  std::optional<ReconModel<float>> model;
  SamplingMask mask = mask_for(g, set.target.height, mask_seed);
  if (!zero_fill) {
    const Checkpoint ck = load_checkpoint(checkpoint);
    model.emplace(load_model(ck));
    if (!explicit_mask && ck.meta.contains("mask")) mask = SamplingMask::parse(ck.meta["mask"].get<std::string>());
    if (model->config().mode == Mode::dual_with_reference && !set.reference) {
      throw FormatError("checkpoint expects reference images but " + split + "_ref.cplx is missing");
    }
  }
  check_mask_shape(mask, set.target.height);
  const Reconstructor recon = zero_fill ? zero_fill_reconstructor() : model_reconstructor(*model, mask);
  const MetricsReport rep = evaluate(recon, set, mask);
  const fs::path out(g.out);
  emit(out / "metrics.csv", rep.to_csv());
  json j = rep.to_json();
  j["method"] = zero_fill ? "zero_fill" : "model";
  j["split"] = split;
  j["mask"] = mask.serialize();
  emit(out / "metrics.json", j.dump(2) + "\n");
  if (export_pgm) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < std::min<std::size_t>(set.size(), 16); ++i) idx.push_back(i);
    const Batch b = make_batch(set, idx, mask);
    const ComplexTensor<float> r = recon(b.k_u, b.ref ? &*b.ref : nullptr);
    std::vector<ComplexTensor<float>> rs, refs;
    const std::size_t hw = set.target.height * set.target.width;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      rs.emplace_back(Shape{set.target.height, set.target.width},
                      std::vector<std::complex<float>>(r.data().begin() + i * hw, r.data().begin() + (i + 1) * hw));
      refs.push_back(set.target.images[i]);
    }
    emit(out / "recon.pgm", pgm_grid(rs, refs));
  }
  std::printf("%s %s: PSNR %.3f +- %.3f dB, SSIM %.4f +- %.4f, MSE %.3f e-5 (n=%zu)\n",
              zero_fill ? "zero-fill" : "model", split.c_str(), rep.psnr().mean, rep.psnr().std, rep.ssim().mean,
              rep.ssim().std, rep.mse().mean / kMseUnit, rep.per_image.size());
  return kOk;
}

struct AblateFlags {
  std::string data, rows, preset;
  std::size_t train_images = 0, val_images = 0, test_images = 0, epochs = 0;
  std::optional<std::uint64_t> mask_seed;
};

int cmd_ablate(const Globals& g, const json& cfg, CLI::App& sub, const AblateFlags& f) {
  ModelConfig base = model_from(cfg, f.preset, "dual");
  AblationBudget budget;
  TrainOptions opts = train_from(cfg);
  std::vector<Placement> rows = default_placements();
  if (cfg.contains("ablation")) {
    const json& a = cfg["ablation"];
    detail::reject_unknown(a, {"rows", "train_images", "val_images", "test_images", "epochs"}, "ablation config");
    budget.train_images = a.value("train_images", budget.train_images);
    budget.val_images = a.value("val_images", budget.val_images);
    budget.test_images = a.value("test_images", budget.test_images);
    budget.epochs = a.value("epochs", budget.epochs);
    if (a.contains("rows")) {
      rows.clear();
      for (const auto& r : a["rows"]) rows.push_back(parse_placement(r.get<std::string>()));
    }
  }
  if (sub.count("--train-images")) budget.train_images = f.train_images;
  if (sub.count("--val-images")) budget.val_images = f.val_images;
  if (sub.count("--test-images")) budget.test_images = f.test_images;
  if (sub.count("--epochs")) budget.epochs = f.epochs;
  if (sub.count("--rows")) {
    rows.clear();
    std::size_t start = 0;
    while (start <= f.rows.size()) {
      const auto comma = std::min(f.rows.find(',', start), f.rows.size());
      rows.push_back(parse_placement(f.rows.substr(start, comma - start)));
      start = comma + 1;
    }
  }
  if (rows.empty()) throw UsageError("no ablation rows requested");
  opts.epochs = budget.epochs;
  opts.seed = g.seed;
  opts.validate();

  const Dataset train_set = read_split(f.data, "train").head(budget.train_images);
  const Dataset val_set = read_split(f.data, "val").head(budget.val_images);
  const Dataset test_set = read_split(f.data, "test").head(budget.test_images);
  const SamplingMask mask = mask_for(g, train_set.target.height, f.mask_seed);
  std::printf("ablation: %zu rows, %zu/%zu/%zu images, %zu epochs\n", rows.size(), train_set.size(), val_set.size(),
              test_set.size(), opts.epochs);
  const auto t0 = std::chrono::steady_clock::now();
  const AblationMatrix m = run_ablation(rows, base, g.seed, train_set, val_set, test_set, mask, opts,
                                        [&](const AblationRow& r) {
                                          const double secs =
                                              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                                          std::printf("%-24s PSNR %.3f  SSIM %.4f  %s  (%.0fs)\n",
                                                      r.placement.name().c_str(), r.psnr.mean, r.ssim.mean,
                                                      r.status.c_str(), secs);
                                          std::fflush(stdout);
                                        });
  const fs::path out(g.out);
  emit(out / "ablation.csv", m.to_csv());
  json j{{"version", 1},
         {"budget",
          {{"train_images", train_set.size()},
           {"val_images", val_set.size()},
           {"test_images", test_set.size()},
           {"epochs", opts.epochs}}},
         {"model", to_json(base)},
         {"train", to_json(opts)},
         {"mask", mask.serialize()}};
  emit(out / "ablation_meta.json", j.dump(2) + "\n");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-domain undersampled MRI reconstruction toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Seed for masks, data, weights and shuffling");
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--accel", g.accel, "Acceleration rate a");
  app.add_option("--acs", g.acs, "Fully sampled central fraction R_acs");

  auto* analyze = app.add_subcommand("analyze", "Feasibility grid of local k-space interpolation");
  std::string k_text = "2..32", a_text = "1..8";
  std::uint64_t trials = 0;
  analyze->add_option("--k", k_text, "Window sizes, lo..hi[:step] or a comma list");
  analyze->add_option("--a", a_text, "Accelerations, lo..hi[:step] or a comma list");
  analyze->add_option("--trials", trials, "Monte-Carlo trials per cell (0 = analytic only)");

  auto* mask = app.add_subcommand("mask", "Write a 1-D Cartesian sampling mask");
  std::size_t mask_h = 64;
  mask->add_option("--height", mask_h, "Number of phase-encode lines");

  auto* gen = app.add_subcommand("gen-data", "Generate phantom train/val/test containers");
  std::size_t size = 64, n_train = 280, n_val = 40, n_test = 80;
  bool paired = false;
  gen->add_option("--size", size, "Image side length");
  gen->add_option("--train", n_train);
  gen->add_option("--val", n_val);
  gen->add_option("--test", n_test);
  gen->add_flag("--paired", paired, "Also emit a paired reference contrast");

  auto* train_cmd = app.add_subcommand("train", "Train a reconstruction model");
  TrainFlags tf;
  std::uint64_t train_mask_seed = 0;
  train_cmd->add_option("--data", tf.data, "Dataset directory from gen-data")->required();
  train_cmd->add_option("--preset", tf.preset, "desk or full");
  train_cmd->add_option("--mode", tf.mode, "image_only, dual or dual_with_reference");
  train_cmd->add_option("--epochs", tf.epochs);
  train_cmd->add_option("--batch", tf.batch);
  train_cmd->add_option("--lr", tf.lr);
  train_cmd->add_option("--beta", tf.beta, "k-space loss weight");
  train_cmd->add_option("--resume", tf.resume, "Continue from a last.ckpt");
  train_cmd->add_option("--mask-seed", train_mask_seed, "Mask seed (defaults to --seed)");

  auto* eval = app.add_subcommand("eval", "Score a checkpoint or the zero-filled baseline");
  std::string e_data, e_split = "test", e_ckpt;
  bool e_zero = false, e_pgm = false;
  std::uint64_t eval_mask_seed = 0;
  eval->add_option("--data", e_data, "Dataset directory")->required();
  eval->add_option("--split", e_split)->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--checkpoint", e_ckpt);
  eval->add_flag("--zero-fill", e_zero, "Score ifft2c of the undersampled k-space");
  eval->add_flag("--export-pgm", e_pgm, "Write reconstructed magnitudes as recon.pgm");
  eval->add_option("--mask-seed", eval_mask_seed);

  auto* ablate = app.add_subcommand("ablate", "Train and score every module placement");
  AblateFlags af;
  std::uint64_t ablate_mask_seed = 0;
  ablate->add_option("--data", af.data, "Dataset directory")->required();
  ablate->add_option("--rows", af.rows, "Comma list such as baseline,glim@kspace+plde@image");
  ablate->add_option("--preset", af.preset, "desk or full");
  ablate->add_option("--train-images", af.train_images);
  ablate->add_option("--val-images", af.val_images);
  ablate->add_option("--test-images", af.test_images);
  ablate->add_option("--epochs", af.epochs);
  ablate->add_option("--mask-seed", ablate_mask_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    const json cfg = load_config(g.config);
    if (*analyze) {
      if (cfg.contains("analyze")) {
        const json& a = cfg["analyze"];
        detail::reject_unknown(a, {"k", "a", "trials"}, "analyze config");
        if (!analyze->count("--k") && a.contains("k")) k_text = a["k"].get<std::string>();
        if (!analyze->count("--a") && a.contains("a")) a_text = a["a"].get<std::string>();
        if (!analyze->count("--trials") && a.contains("trials")) trials = a["trials"].get<std::uint64_t>();
      }
      return cmd_analyze(g, k_text, a_text, trials);
    }
    if (*mask) return cmd_mask(g, mask_h);
    if (*gen) return cmd_gen_data(g, cfg, *gen, size, n_train, n_val, n_test, paired);
    if (*train_cmd) {
      if (train_cmd->count("--mask-seed")) tf.mask_seed = train_mask_seed;
      return cmd_train(g, cfg, *train_cmd, tf);
    }
    if (*eval) {
      return cmd_eval(g, app, *eval, e_data, e_split, e_ckpt, e_zero, e_pgm,
                      eval->count("--mask-seed") ? std::optional<std::uint64_t>(eval_mask_seed) : std::nullopt);
    }
    if (*ablate) {
      if (ablate->count("--mask-seed")) af.mask_seed = ablate_mask_seed;
      return cmd_ablate(g, cfg, *ablate, af);
    }
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kNumerical;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const ParameterError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  }
  return kUsage;
}
