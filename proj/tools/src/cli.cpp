#include "loupe_cli/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "loupe/error.hpp"
#include "loupe/metrics.hpp"
#include "loupe/rng.hpp"
#include "loupe/training.hpp"
#include "loupe_cli/run_config.hpp"

namespace loupe::cli {

namespace fs = std::filesystem;

namespace {

/// Flag-facing view of a RunConfig. Enumerations and paths travel as strings
/// and are folded back into the config after parsing.
struct Options {
  RunConfig cfg;
  std::string out, data, anisotropy, loss, readout, phase_encode, binarize, kind;
  std::string config_file = "none";
  double mask_lr = 0.0;
  CLI::Option* mask_lr_option = nullptr;

  std::string mask_file, weights_file, prob_file, prediction_file, target_file;
  std::string split = "test";
  bool lines = false;
  bool quiet = false;
  std::size_t probes = 16;
  double step = 1e-5;
  double check_slope_s = 10.0;

  explicit Options(RunConfig c) : cfg(std::move(c)) {
    out = cfg.out.string();
    data = cfg.data.string();
    anisotropy = to_string(cfg.phantom.anisotropy);
    loss = to_string(cfg.train.loss);
    readout = to_string(cfg.train.readout);
    phase_encode = to_string(cfg.mask.phase_encode);
    binarize = to_string(cfg.mask.binarize);
    kind = cfg.mask.kind;
    mask_lr = cfg.train.mask_learning_rate.value_or(cfg.train.learning_rate);
  }

  void fold() {
    cfg.out = out;
    cfg.data = data;
    cfg.phantom.anisotropy = parse_anisotropy(anisotropy);
    cfg.train.loss = parse_loss_kind(loss);
    cfg.train.readout = parse_axis(readout);
    cfg.mask.phase_encode = parse_axis(phase_encode);
    cfg.mask.binarize = parse_binarize_mode(binarize);
    cfg.mask.kind = kind;
    if (mask_lr_option && mask_lr_option->count() > 0) cfg.train.mask_learning_rate = mask_lr;
    cfg.propagate();
  }
};

const std::vector<std::string> kAxes{"rows", "columns"};

void add_common(CLI::App& sub, Options& o, bool writes) {
  sub.add_option("--seed", o.cfg.seed, "Seed for every random choice of the run");
  sub.add_option("--threads", o.cfg.threads, "Worker threads for validation and evaluation")
      ->check(CLI::PositiveNumber);
  sub.add_option("--config", o.config_file, "JSON run configuration; flags override its values");
  if (writes) sub.add_option("--out", o.out, "Output directory");
}

void add_data(CLI::App& sub, Options& o) {
  auto& p = o.cfg.phantom;
  sub.add_option("--data", o.data, "Dataset directory or manifest; synthesized from the phantom flags when unset")
      ->default_str(o.data.empty() ? "synthesize" : o.data);
  sub.add_option("--train-volumes", p.train_volumes, "Synthetic training volumes");
  sub.add_option("--val-volumes", p.val_volumes, "Synthetic validation volumes");
  sub.add_option("--test-volumes", p.test_volumes, "Synthetic test volumes");
  sub.add_option("--slices", p.slices_per_volume, "Slices per synthetic volume");
  sub.add_option("--height", p.height, "Image height");
  sub.add_option("--width", p.width, "Image width");
  sub.add_option("--min-ellipses", p.min_ellipses, "Fewest ellipses per phantom slice");
  sub.add_option("--max-ellipses", p.max_ellipses, "Most ellipses per phantom slice");
  sub.add_option("--anisotropy", o.anisotropy, "Dominant feature orientation")
      ->check(CLI::IsMember({"horizontal", "vertical", "isotropic"}));
  sub.add_option("--noise", p.noise_level, "Complex Gaussian noise level");
}

void add_alpha(CLI::App& sub, Options& o) {
  sub.add_option("--alpha", o.cfg.train.alpha, "Sampling fraction (1/acceleration)")->check(CLI::Range(0.0, 1.0));
}

void add_train(CLI::App& sub, Options& o) {
  auto& t = o.cfg.train;
  add_alpha(sub, o);
  sub.add_option("--slope-t", t.slope_t, "Slope of the logit-to-probability sigmoid");
  sub.add_option("--slope-s", t.slope_s, "Slope of the relaxed sampling sigmoid");
  sub.add_option("--mc-samples", t.mc_samples, "Mask draws averaged per example");
  sub.add_option("--lr", t.learning_rate, "Adam learning rate for the network");
  o.mask_lr_option = sub.add_option("--mask-lr", o.mask_lr, "Adam learning rate for the mask logits")
                         ->default_str(t.mask_learning_rate ? std::to_string(*t.mask_learning_rate) : "same as --lr");
  sub.add_option("--batch-size", t.batch_size, "Mini-batch size");
  sub.add_option("--epochs", t.max_epochs, "Maximum epochs");
  sub.add_option("--patience", t.patience, "Epochs without validation improvement before stopping");
  sub.add_option("--min-improvement", t.min_improvement, "Smallest validation decrease that counts");
  sub.add_option("--loss", o.loss, "Training loss")->check(CLI::IsMember({"magnitude-l2", "complex-l2"}));
  sub.add_flag("--line-constrained", t.line_constrained, "Share one logit per readout line");
  sub.add_option("--readout", o.readout, "Readout axis of line-constrained masks")->check(CLI::IsMember(kAxes));
  sub.add_option("--depth", t.unet.depth, "U-Net pooling stages");
  sub.add_option("--base-channels", t.unet.base_channels, "U-Net channels of the first stage");
  sub.add_option("--output-gain", t.unet.output_gain, "Initial scale of the U-Net output convolution");
  sub.add_flag("--record-time", o.cfg.record_time, "Write wall-clock seconds to the history CSV");
  sub.add_flag("--quiet", o.quiet, "Suppress per-epoch progress");
}

struct Commands {
  std::unique_ptr<CLI::App> app;
  std::map<std::string, CLI::App*> subs;
};

Commands build(Options& o) {
  Commands c;
  c.app = std::make_unique<CLI::App>("Joint k-space sampling mask and reconstruction learning", "loupe");
  auto& app = *c.app;
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Synthesize an anisotropic phantom dataset");
  add_common(*gen, o, true);
  add_data(*gen, o);

  auto* loupe = app.add_subcommand("train-loupe", "Jointly learn a sampling mask and a reconstruction network");
  add_common(*loupe, o, true);
  add_data(*loupe, o);
  add_train(*loupe, o);
  loupe->add_option("--binarize", o.binarize, "How the learned mask is binarized")
      ->check(CLI::IsMember({"topk", "bernoulli"}));

  auto* recon = app.add_subcommand("train-recon", "Train a reconstruction network for a fixed binary mask");
  add_common(*recon, o, true);
  add_data(*recon, o);
  add_train(*recon, o);
  recon->add_option("--mask", o.mask_file, "Binary mask PGM")->required();

  auto* make = app.add_subcommand("make-mask", "Generate a benchmark sampling mask");
  add_common(*make, o, true);
  add_data(*make, o);
  add_alpha(*make, o);
  make->add_option("--kind", o.kind, "Mask family")->check(CLI::IsMember({"uniform", "vd", "cartesian", "spectrum"}));
  make->add_option("--power", o.cfg.mask.power, "Variable-density falloff exponent");
  make->add_option("--center-lines", o.cfg.mask.center_lines, "Fully sampled lines around DC (cartesian)");
  make->add_option("--phase-encode", o.phase_encode, "Axis whose lines are sampled (cartesian)")
      ->check(CLI::IsMember(kAxes));

  auto* bin = app.add_subcommand("binarize-mask", "Binarize a probabilistic mask");
  add_common(*bin, o, true);
  add_alpha(*bin, o);
  bin->add_option("--prob", o.prob_file, "Probabilistic mask PGM")->required();
  bin->add_option("--binarize", o.binarize, "Selection rule")->check(CLI::IsMember({"topk", "bernoulli"}));
  bin->add_flag("--lines", o.lines, "Select whole readout lines");
  bin->add_option("--readout", o.readout, "Readout axis for --lines")->check(CLI::IsMember(kAxes));

  auto* eval = app.add_subcommand("evaluate", "Compute reconstruction metrics");
  add_common(*eval, o, true);
  add_data(*eval, o);
  eval->add_option("--mask", o.mask_file, "Binary mask PGM (with --weights)")->default_str("none");
  eval->add_option("--weights", o.weights_file, "Network checkpoint manifest (with --mask)")->default_str("none");
  eval->add_option("--split", o.split, "Dataset split to reconstruct")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--prediction", o.prediction_file, "Reconstructed volume manifest (with --target)")
      ->default_str("none");
  eval->add_option("--target", o.target_file, "Ground-truth volume manifest (with --prediction)")->default_str("none");

  auto* grad = app.add_subcommand("gradcheck", "Compare pipeline gradients with central finite differences");
  add_common(*grad, o, false);
  add_alpha(*grad, o);
  grad->add_option("--probes", o.probes, "Coordinates probed per tensor")->check(CLI::PositiveNumber);
  grad->add_option("--step", o.step, "Finite-difference step");
  grad->add_option("--check-slope-s", o.check_slope_s, "Relaxed sampling slope used for the check");
  grad->add_option("--loss", o.loss, "Loss checked")->check(CLI::IsMember({"magnitude-l2", "complex-l2"}));
  grad->add_flag("--line-constrained", o.cfg.train.line_constrained, "Check the line-constrained pipeline");

  auto* grid = app.add_subcommand("slope-grid", "Validation loss over a grid of sigmoid slopes");
  add_common(*grid, o, true);
  add_data(*grid, o);
  add_train(*grid, o);
  grid->add_option("--grid-s", o.cfg.grid.slope_s, "Sampling slopes to sweep")->delimiter(',');
  grid->add_option("--grid-t", o.cfg.grid.slope_t, "Probability slopes to sweep")->delimiter(',');

  for (auto* s : {gen, loupe, recon, make, bin, eval, grad, grid}) c.subs[s->get_name()] = s;
  return c;
}

/// Removes what a failed command left in its output directory: everything
/// when the directory is new, otherwise only entries that appeared.
class OutputGuard {
public:
  explicit OutputGuard(fs::path dir) : dir_(std::move(dir)), existed_(fs::exists(dir_)) {
    if (existed_ && fs::is_directory(dir_))
      for (const auto& e : fs::directory_iterator(dir_)) before_.insert(e.path());
  }

  void rollback() noexcept {
    std::error_code ec;
    if (!existed_) {
      fs::remove_all(dir_, ec);
      return;
    }
    if (!fs::is_directory(dir_, ec)) return;
    std::vector<fs::path> added;
    for (const auto& e : fs::directory_iterator(dir_, ec))
      if (!before_.count(e.path())) added.push_back(e.path());
    for (const auto& p : added) fs::remove_all(p, ec);
  }

private:
  fs::path dir_;
  bool existed_;
  std::set<fs::path> before_;
};

VolumeDataset dataset(const Options& o) {
  return o.cfg.data.empty() ? gen_phantoms(o.cfg.phantom) : load_dataset(o.cfg.data);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write '" + path.string() + "'");
  f << text;
}

void prepare_out(const Options& o) {
  fs::create_directories(o.cfg.out);
  write_text(o.cfg.out / "config.json", to_json(o.cfg));
}

EpochCallback progress(const Options& o, std::ostream& out) {
  if (o.quiet) return {};
  return [&out](const EpochRecord& r) {
    out << "epoch " << r.epoch << "  train " << r.train_loss << "  val " << r.val_loss << '\n' << std::flush;
    return true;
  };
}

void report_history(const TrainHistory& h, std::ostream& out) {
  const auto& best = h.epochs.at(h.best_epoch - 1);
  out << "best epoch " << h.best_epoch << " of " << h.stopping_epoch << ", validation loss " << best.val_loss << '\n';
}

int cmd_gen_data(Options& o, std::ostream& out) {
  const auto ds = gen_phantoms(o.cfg.phantom);
  fs::create_directories(o.cfg.out);
  save_dataset(o.cfg.out, ds);
  write_text(o.cfg.out / "config.json", to_json(o.cfg));
  out << "wrote " << ds.volumes.size() << " volumes to " << o.cfg.out.string() << '\n';
  return kSuccess;
}

int cmd_train_loupe(Options& o, std::ostream& out) {
  const auto ds = dataset(o);
  prepare_out(o);
  const auto result = train_loupe(ds, o.cfg.train, progress(o, out));
  const auto& mask = result.model.mask;
  const auto p = learned_probabilities(mask);
  const BinaryMask binary = o.cfg.mask.binarize == BinarizeMode::TopK || mask.line_constrained
                                ? binarize_learned(mask)
                                : binarize(p, mask.alpha, BinarizeMode::Bernoulli, o.cfg.seed);
  save_probability_mask(o.cfg.out / "mask_prob.pgm", p, mask.alpha);
  save_mask(o.cfg.out / "mask.pgm", binary);
  save_checkpoint(o.cfg.out / "model.json", make_checkpoint(result.model, result.history.best_epoch));
  result.history.write_csv(o.cfg.out / "history.csv", o.cfg.record_time);
  report_history(result.history, out);
  out << "mask samples " << binary.sampled() << " points, sparsity " << binary.achieved_sparsity << '\n';
  return kSuccess;
}

int cmd_train_recon(Options& o, std::ostream& out) {
  const auto mask = load_mask(o.mask_file);
  const auto ds = dataset(o);
  prepare_out(o);
  const auto result = train_fixed_mask(ds, mask, o.cfg.train, progress(o, out));
  save_checkpoint(o.cfg.out / "model.json",
                  make_checkpoint(result.weights, o.cfg.train.unet, result.history.best_epoch));
  result.history.write_csv(o.cfg.out / "history.csv", o.cfg.record_time);
  report_history(result.history, out);
  return kSuccess;
}

int cmd_make_mask(Options& o, std::ostream& out) {
  const auto& c = o.cfg;
  const std::size_t h = c.phantom.height, w = c.phantom.width;
  BinaryMask mask;
  if (c.mask.kind == "uniform") mask = gen_uniform_random(h, w, c.train.alpha, c.seed);
  else if (c.mask.kind == "vd") mask = gen_variable_density(h, w, c.train.alpha, c.mask.power, c.seed);
  else if (c.mask.kind == "cartesian")
    mask = gen_cartesian_equispaced(h, w, c.train.alpha, c.mask.phase_encode, c.mask.center_lines);
  else mask = gen_spectrum(dataset(o), c.train.alpha);
  prepare_out(o);
  save_mask(c.out / "mask.pgm", mask);
  out << c.mask.kind << " mask " << mask.height() << "x" << mask.width() << ", " << mask.sampled()
      << " sampled points\n";
  return kSuccess;
}

int cmd_binarize(Options& o, std::ostream& out) {
  const auto p = load_probability_mask(o.prob_file);
  const auto& c = o.cfg;
  const BinaryMask mask = o.lines ? binarize_lines(p, c.train.alpha, c.train.readout)
                                  : binarize(p, c.train.alpha, c.mask.binarize, c.seed);
  prepare_out(o);
  save_mask(c.out / "mask.pgm", mask);
  out << mask.sampled() << " sampled points, sparsity " << mask.achieved_sparsity << '\n';
  return kSuccess;
}

void print_mean(const SliceMetrics& m, std::ostream& out) {
  out << "mse " << m.mse << "  mae " << m.mae << "  hfen " << m.hfen << "  psnr " << m.psnr << " dB  ssim " << m.ssim
      << '\n';
}

int cmd_evaluate(Options& o, std::ostream& out) {
  const bool pair_mode = !o.prediction_file.empty() || !o.target_file.empty();
  const bool model_mode = !o.mask_file.empty() || !o.weights_file.empty();
  if (pair_mode == model_mode || (pair_mode && (o.prediction_file.empty() || o.target_file.empty())) ||
      (model_mode && (o.mask_file.empty() || o.weights_file.empty())))
    throw CLI::ValidationError("evaluate", "give either --prediction and --target, or --mask and --weights");

  if (pair_mode) {
    const auto pred = load_volume(o.prediction_file);
    const auto target = load_volume(o.target_file);
    const auto report = evaluate_pair(magnitude(target.data), magnitude(pred.data));
    prepare_out(o);
    write_metrics_csv(o.cfg.out / "metrics.csv", report);
    print_mean(report.volume_mean, out);
    return kSuccess;
  }

  const auto mask = load_mask(o.mask_file);
  const auto cp = load_checkpoint(o.weights_file);
  auto weights = init_unet<float>(cp.config);
  restore_weights(cp, weights);
  const auto ds = dataset(o);
  const Split split = parse_split(o.split);
  prepare_out(o);

  std::ostringstream summary;
  summary << std::setprecision(9) << "volume,mse,mae,hfen,psnr_db,ssim\n";
  std::vector<SliceMetrics> means;
  for (std::size_t v = 0; v < ds.volumes.size(); ++v) {
    const auto& vol = ds.volumes[v];
    if (vol.split != split) continue;
    const auto recon = reconstruct(vol.data, mask, weights, cp.config, o.cfg.threads);
    const auto report = evaluate_pair(magnitude(vol.data), magnitude(recon));
    write_metrics_csv(o.cfg.out / ("metrics_volume" + std::to_string(v) + ".csv"), report);
    const auto& m = report.volume_mean;
    summary << v << ',' << m.mse << ',' << m.mae << ',' << m.hfen << ',' << m.psnr << ',' << m.ssim << '\n';
    means.push_back(m);
  }
  if (means.empty()) throw DataError("dataset has no volumes in split '" + o.split + "'");
  const auto m = average(means);
  summary << "mean," << m.mse << ',' << m.mae << ',' << m.hfen << ',' << m.psnr << ',' << m.ssim << '\n';
  write_text(o.cfg.out / "summary.csv", summary.str());
  print_mean(m, out);
  return kSuccess;
}

int cmd_gradcheck(Options& o, std::ostream& out) {
  const auto& t = o.cfg.train;
  constexpr std::size_t n = 8, batch = 2, draws = 2;
  Rng rng(o.cfg.seed);
  auto mask = init_prob_mask<double>(n, n, t.alpha, t.slope_t, o.check_slope_s, t.line_constrained, t.readout, rng,
                                     0.3);
  UNetConfig unet;
  unet.depth = 1;
  unet.base_channels = 2;
  unet.output_gain = 1.0;
  unet.seed = o.cfg.seed;
  auto weights = init_unet<double>(unet);
  auto lg = build_loupe_graph(mask, weights, unet, batch, t.loss, draws);

  Tensor<double> x({batch, 2, n, n});
  for (auto& v : x.data()) v = rng.uniform(-1.0, 1.0);
  Bindings<double> inputs{{"x", x}};
  const auto u = draw_uniforms<double>(rng, batch, n, n, draws);
  for (std::size_t k = 0; k < draws; ++k) inputs["u" + std::to_string(k)] = u[k];

  double worst = 0.0;
  auto check = [&](Parameter<double>& p, std::uint64_t seed) {
    const auto r = finite_difference_check(lg.graph, lg.loss, p, inputs, o.probes, o.step, seed);
    out << std::left << std::setw(22) << p.name << " max relative error " << r.max_relative_error << '\n';
    worst = std::max(worst, r.max_relative_error);
  };
  check(mask.logits, 1);
  check(weights.get("enc0.conv1.weight"), 2);
  check(weights.get("dec0.conv2.weight"), 3);
  check(weights.get("out.weight"), 4);
  const bool ok = worst <= 1e-3;
  out << "max relative error " << worst << (ok ? " (pass)" : " (fail)") << '\n';
  return ok ? kSuccess : kDataError;
}

int cmd_slope_grid(Options& o, std::ostream& out) {
  const auto ds = dataset(o);
  prepare_out(o);
  std::ostringstream csv;
  csv << std::setprecision(9) << "slope_s,slope_t,best_val_loss,best_epoch\n";
  for (double s : o.cfg.grid.slope_s)
    for (double t : o.cfg.grid.slope_t) {
      TrainConfig cfg = o.cfg.train;
      cfg.slope_s = s;
      cfg.slope_t = t;
      const auto result = train_loupe(ds, cfg);
      const auto& h = result.history;
      const double best = h.epochs.at(h.best_epoch - 1).val_loss;
      csv << s << ',' << t << ',' << best << ',' << h.best_epoch << '\n';
      if (!o.quiet) out << "s " << s << "  t " << t << "  best validation loss " << best << '\n' << std::flush;
    }
  write_text(o.cfg.out / "slope_grid.csv", csv.str());
  return kSuccess;
}

const std::map<std::string, std::function<int(Options&, std::ostream&)>> kHandlers{
    {"gen-data", cmd_gen_data},     {"train-loupe", cmd_train_loupe}, {"train-recon", cmd_train_recon},
    {"make-mask", cmd_make_mask},   {"binarize-mask", cmd_binarize}, {"evaluate", cmd_evaluate},
    {"gradcheck", cmd_gradcheck},   {"slope-grid", cmd_slope_grid},
};

/// The config file has to be read before the parser is built so that flag
/// defaults (and --help) reflect it.
std::string find_config(int argc, const char* const* argv) {
  std::string path;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--config" && i + 1 < argc) path = argv[i + 1];
    else if (arg.rfind("--config=", 0) == 0) path = arg.substr(9);
  }
  return path;
}

} // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  RunConfig base;
  const std::string config_file = find_config(argc, argv);
  if (!config_file.empty()) {
    try {
      apply_json_file(base, config_file);
    } catch (const Error& e) {
      err << "loupe: " << e.what() << '\n';
      return kUsageError;
    }
  }
  Options o(base);
  auto commands = build(o);
  try {
    commands.app->parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = commands.app->exit(e, out, err);
    return code == 0 ? kSuccess : kUsageError;
  }

  std::string name;
  for (const auto& [n, sub] : commands.subs)
    if (sub->parsed()) name = n;

  OutputGuard guard(o.out);
  try {
    o.fold();
    return kHandlers.at(name)(o, out);
  } catch (const CLI::Error& e) {
    guard.rollback();
    err << "loupe " << name << ": " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    guard.rollback();
    err << "loupe " << name << ": " << e.what() << '\n';
    return kDataError;
  }
}

std::map<std::string, std::vector<OptionSummary>> describe_options() {
  Options o{RunConfig{}};
  auto commands = build(o);
  std::map<std::string, std::vector<OptionSummary>> table;
  for (const auto& [name, sub] : commands.subs)
    for (const auto* opt : sub->get_options()) {
      if (opt->get_lnames().empty() || opt->get_lnames().front() == "help") continue;
      table[name].push_back({"--" + opt->get_lnames().front(), !opt->get_type_name().empty(), opt->get_required(),
                             opt->get_default_str()});
    }
  return table;
}

} // namespace loupe::cli
