// Acceptance criteria A1-A9. Each criterion prints one PASS/FAIL line; the
// process exits non-zero if any selected criterion fails.
//
//   loupe_acceptance [--loupe PATH] (all | A1 ... A9)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "loupe/data.hpp"
#include "loupe/fourier.hpp"
#include "loupe/masks.hpp"
#include "loupe/metrics.hpp"
#include "loupe/rng.hpp"
#include "loupe/training.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace loupe;
using namespace loupe::testing;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail = what;
    pass = pass && ok;
  }
};

struct Context {
  std::string loupe_binary;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome a1_renormalization(const Context&) {
  Outcome o;
  Rng rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t h = 1 + rng.below(64), w = 1 + rng.below(64);
    Tensor<double> p({h, w});
    const double skew = rng.uniform(0.05, 6.0);
    for (auto& v : p.data()) {
      const double r = rng.uniform();
      v = r < 0.02 ? 0.0 : r > 0.98 ? 1.0 : std::pow(rng.uniform(), skew);
    }
    for (double alpha : {0.125, 0.25, 0.5}) {
      const auto out = renormalize(p, alpha);
      double mean = 0;
      for (double v : out.data()) {
        o.require(v >= 0.0 && v <= 1.0, "value outside [0,1]");
        mean += v;
      }
      mean /= static_cast<double>(out.size());
      worst = std::max(worst, std::abs(mean - alpha));
    }
  }
  o.require(worst <= 1e-6, "mean deviates from alpha by " + fmt("%.3g", worst));
  if (o.pass) o.detail = "max |mean - alpha| = " + fmt("%.3g", worst) + " over 3000 cases";
  return o;
}

Outcome a2_gradients(const Context&) {
  Outcome o;
  double worst = 0.0;
  std::size_t checked = 0;
  for (bool line : {false, true})
    for (LossKind kind : {LossKind::MagnitudeL2, LossKind::ComplexL2}) {
      Rng rng(202);
      auto mask = init_prob_mask<double>(8, 8, 0.25, 5.0, 10.0, line, Axis::Rows, rng, 0.3);
      UNetConfig unet;
      unet.depth = 1;
      unet.base_channels = 2;
      unet.output_gain = 1.0;
      unet.seed = 17;
      auto w = init_unet<double>(unet);
      auto lg = build_loupe_graph(mask, w, unet, 2, kind, 2);
      Rng draws(203);
      const auto u = draw_uniforms<double>(draws, 2, 8, 8, 2);
      Bindings<double> in{{"x", random_tensor({2, 2, 8, 8}, 204)}, {"u0", u[0]}, {"u1", u[1]}};

      std::vector<Parameter<double>*> params{&mask.logits};
      for (const char* name : {"enc0.conv1.weight", "enc0.conv2.weight", "bottleneck.conv1.weight",
                               "bottleneck.conv2.weight", "dec0.conv1.weight", "dec0.conv2.weight", "out.weight"})
        params.push_back(&w.get(name));
      std::uint64_t seed = 300;
      for (auto* p : params) {
        const auto r = finite_difference_check(lg.graph, lg.loss, *p, in, 12, 1e-5, seed++);
        worst = std::max(worst, r.max_relative_error);
        ++checked;
        o.require(r.max_relative_error <= 1e-3, p->name + (line ? " (line)" : "") + " relative error " +
                                                    fmt("%.3g", r.max_relative_error));
      }
    }
  if (o.pass) o.detail = "max relative error " + fmt("%.3g", worst) + " over " + std::to_string(checked) + " tensors";
  return o;
}

double test_psnr(const VolumeDataset& ds, const BinaryMask& mask, UNetWeights<float>& w, const UNetConfig& unet) {
  std::vector<SliceMetrics> per_volume;
  for (const auto& v : ds.volumes)
    if (v.split == Split::Test)
      per_volume.push_back(evaluate_pair(magnitude(v.data), magnitude(reconstruct(v.data, mask, w, unet))).volume_mean);
  return average(per_volume).psnr;
}

/// Desk-scale recipe shared by the ordering and symmetry experiments.
TrainConfig desk_config(double alpha) {
  TrainConfig cfg;
  cfg.alpha = alpha;
  cfg.unet.depth = 3;
  cfg.unet.base_channels = 8;
  cfg.max_epochs = 10;
  cfg.patience = 100;
  return cfg;
}

TrainConfig desk_loupe_config(double alpha) {
  TrainConfig cfg = desk_config(alpha);
  cfg.max_epochs = 20;
  cfg.mask_learning_rate = 0.05;
  return cfg;
}

Outcome a3_ordering(const Context&) {
  Outcome o;
  PhantomSpec spec; // 40/5/5 volumes of 5 slices: 200/25/25 images, 64x64
  spec.seed = 7;
  const auto ds = gen_phantoms(spec);
  std::ostringstream detail;
  for (double alpha : {0.25, 0.125}) {
    const auto learned = train_loupe(ds, desk_loupe_config(alpha));
    const BinaryMask masks[] = {binarize_learned(learned.model.mask), gen_uniform_random(64, 64, alpha, 11),
                                gen_variable_density(64, 64, alpha, 3.0, 11)};
    double psnr[3];
    const auto cfg = desk_config(alpha);
    for (int i = 0; i < 3; ++i) {
      auto trained = train_fixed_mask(ds, masks[i], cfg);
      psnr[i] = test_psnr(ds, masks[i], trained.weights, cfg.unet);
    }
    detail << "alpha " << alpha << ": loupe " << fmt("%.2f", psnr[0]) << " uniform " << fmt("%.2f", psnr[1]) << " vd "
           << fmt("%.2f", psnr[2]) << " dB; ";
    std::printf("  alpha %.3f  loupe %.3f  uniform %.3f  vd %.3f dB\n", alpha, psnr[0], psnr[1], psnr[2]);
    std::fflush(stdout);
    o.require(psnr[0] >= psnr[1] + 1.0, "alpha " + fmt("%g", alpha) + ": LOUPE not 1 dB above uniform");
    o.require(psnr[0] >= psnr[2] - 0.2, "alpha " + fmt("%g", alpha) + ": LOUPE below variable density");
  }
  if (o.pass) o.detail = detail.str();
  else o.detail += " (" + detail.str() + ")";
  return o;
}

Outcome a4_symmetry(const Context&) {
  Outcome o;
  double ratio[2];
  int k = 0;
  for (Anisotropy a : {Anisotropy::Horizontal, Anisotropy::Vertical}) {
    PhantomSpec spec;
    spec.seed = 7;
    spec.anisotropy = a;
    const auto learned = train_loupe(gen_phantoms(spec), desk_loupe_config(0.125));
    ratio[k++] = axis_wedge_ratio(learned_probabilities(learned.model.mask));
  }
  const std::string detail = "wedge ratio horizontal " + fmt("%.3f", ratio[0]) + ", vertical " + fmt("%.3f", ratio[1]);
  o.require((ratio[0] > 1.0 && ratio[1] < 1.0) || (ratio[0] < 1.0 && ratio[1] > 1.0), "no flip: " + detail);
  if (o.pass) o.detail = detail;
  return o;
}

bool constant_along(const Tensor<double>& t, Axis readout) {
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j)
      if (t.at({i, j}) != (readout == Axis::Rows ? t.at({0, j}) : t.at({i, 0}))) return false;
  return true;
}

Outcome a5_lines(const Context&) {
  Outcome o;
  PhantomSpec spec;
  spec.train_volumes = 8;
  spec.val_volumes = 2;
  spec.test_volumes = 1;
  spec.height = 32;
  spec.width = 48;
  spec.seed = 5;
  const auto ds = gen_phantoms(spec);
  TempDir dir("acceptance-a5");
  // alpha = num / den so the expected line count is an exact integer ceiling.
  for (auto [num, den] : {std::pair<std::size_t, std::size_t>{1, 5}, {1, 8}, {3, 10}})
    for (Axis readout : {Axis::Rows, Axis::Columns}) {
      TrainConfig cfg;
      cfg.alpha = static_cast<double>(num) / static_cast<double>(den);
      cfg.line_constrained = true;
      cfg.readout = readout;
      cfg.unet.depth = 2;
      cfg.unet.base_channels = 4;
      cfg.max_epochs = 2;
      cfg.batch_size = 5;
      cfg.seed = 3;
      const auto learned = train_loupe(ds, cfg);
      const auto p = learned_probabilities(learned.model.mask);
      const auto bin = binarize_learned(learned.model.mask);
      save_probability_mask(dir / "p.pgm", p, cfg.alpha);
      save_mask(dir / "m.pgm", bin);
      const auto p_file = load_probability_mask(dir / "p.pgm");
      const auto m_file = load_mask(dir / "m.pgm");

      const std::size_t lines = readout == Axis::Rows ? spec.width : spec.height;
      const std::size_t expected = (num * lines + den - 1) / den;
      const std::string tag = "alpha " + fmt("%g", cfg.alpha) + (readout == Axis::Rows ? " rows" : " columns");
      o.require(constant_along(p, readout) && constant_along(p_file, readout), tag + ": probabilities vary");
      o.require(constant_along(bin.values, readout) && constant_along(m_file.values, readout), tag + ": mask varies");
      o.require(m_file.achieved_sparsity == static_cast<double>(expected) / static_cast<double>(lines),
                tag + ": sparsity " + fmt("%g", m_file.achieved_sparsity));
      o.require(m_file.sampled() == expected * (spec.height * spec.width / lines), tag + ": sample count");
    }
  if (o.pass) o.detail = "6 line-constrained runs, both readout axes";
  return o;
}

Outcome a6_metrics(const Context&) {
  Outcome o;
  Rng rng(606);
  double worst_psnr = 0, worst_ssim = 0, worst_hfen = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 7 + rng.below(26), w = 7 + rng.below(26);
    const auto x = random_tensor({h, w}, 1000 + trial, 0.0, rng.uniform(0.5, 2.0));
    auto y = random_tensor({h, w}, 2000 + trial, -1.0, 1.0);
    const double amount = rng.uniform(0.001, 0.5);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + amount * y[i];
    worst_psnr = std::max(worst_psnr, std::abs(psnr(x, y) - brute_psnr(x, y)));
    worst_ssim = std::max(worst_ssim, std::abs(ssim(x, y) - brute_ssim(x, y, 7, 0.01, 0.03)));
    worst_hfen = std::max(worst_hfen, std::abs(hfen(x, y) - brute_hfen(x, y)));

    o.require(ssim(x, x) == 1.0, "SSIM of identical images is not 1");
    o.require(hfen(x, x) == 0.0, "HFEN of identical images is not 0");
    o.require(psnr(x, x) == kInfinitePsnr, "PSNR of identical images is not the sentinel");
    Tensor<double> shifted = x;
    const double c = rng.uniform(-1.0, 1.0);
    for (auto& v : shifted.data()) v += c;
    o.require(hfen(x, shifted) < 1e-9, "HFEN changes under a constant offset");
  }
  o.require(worst_psnr <= 1e-6, "PSNR differs from the oracle by " + fmt("%.3g", worst_psnr));
  o.require(worst_ssim <= 1e-6, "SSIM differs from the oracle by " + fmt("%.3g", worst_ssim));
  o.require(worst_hfen <= 1e-6, "HFEN differs from the oracle by " + fmt("%.3g", worst_hfen));
  if (o.pass)
    o.detail = "max deviation psnr " + fmt("%.2g", worst_psnr) + ", ssim " + fmt("%.2g", worst_ssim) + ", hfen " +
               fmt("%.2g", worst_hfen);
  return o;
}

double l2(const Tensor<double>& t) {
  double s = 0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

Outcome a7_fourier(const Context&) {
  Outcome o;
  Rng rng(707);
  double rt32 = 0, rt64 = 0, parseval = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = trial < 4 ? std::size_t{64} : 1 + rng.below(48);
    const std::size_t w = trial < 4 ? std::size_t{64} : 1 + rng.below(48);
    const auto xd = random_tensor<double>({2, 2, h, w}, 700 + trial);
    const auto xf = random_tensor<float>({2, 2, h, w}, 800 + trial);
    rt64 = std::max(rt64, max_abs_diff(fourier::idft2(fourier::dft2(xd)), xd));
    rt32 = std::max(rt32, max_abs_diff(fourier::idft2(fourier::dft2(xf)), xf));
    parseval = std::max(parseval, std::abs(l2(fourier::dft2(xd)) - l2(xd)));
  }
  o.require(rt32 <= 1e-5, "32-bit roundtrip error " + fmt("%.3g", rt32));
  o.require(rt64 <= 1e-10, "64-bit roundtrip error " + fmt("%.3g", rt64));
  o.require(parseval <= 1e-5, "Parseval error " + fmt("%.3g", parseval));

  constexpr std::size_t n = 4, d = n * n;
  double dense = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto centered = random_tensor({1, 1, n, n}, 900 + seed, 0.0, 1.0);
    if (seed % 2)
      for (auto& v : centered.data()) v = v < 0.5 ? 0.0 : 1.0;
    const auto op = dense_masked_operator(fourier::ifftshift(centered), n, n);
    const auto x = random_tensor({1, 2, n, n}, 950 + seed);
    Graph<double> g;
    Node xin = g.input("x", {1, 2, n, n});
    Node m = g.input("m", {1, 1, n, n});
    Node out = g.idft2(g.multiply(g.dft2(xin), g.ifftshift(m)));
    g.evaluate({{"x", x}, {"m", centered}});
    const auto got = to_complex(g.value(out));
    const auto xc = to_complex(x);
    for (std::size_t a = 0; a < d; ++a) {
      cd expect = 0;
      for (std::size_t b = 0; b < d; ++b) expect += op[a * d + b] * xc[b];
      dense = std::max(dense, std::abs(got[a] - expect));
    }
  }
  o.require(dense <= 1e-10, "masked operator differs from its dense matrix by " + fmt("%.3g", dense));
  if (o.pass)
    o.detail = "roundtrip " + fmt("%.2g", rt32) + " (f32) " + fmt("%.2g", rt64) + " (f64), parseval " +
               fmt("%.2g", parseval) + ", dense " + fmt("%.2g", dense);
  return o;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return "<missing>";
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome a8_reproducibility(const Context& ctx) {
  Outcome o;
  if (ctx.loupe_binary.empty()) {
    o.require(false, "no --loupe binary given");
    return o;
  }
  TempDir dir("acceptance-a8");
  {
    std::ofstream cfg(dir / "run.json");
    cfg << R"({"seed": 42, "threads": 1,
  "data": {"train_volumes": 10, "val_volumes": 2, "test_volumes": 1, "height": 32, "width": 32},
  "train": {"alpha": 0.25, "max_epochs": 3, "batch_size": 5, "mask_learning_rate": 0.05},
  "unet": {"depth": 2, "base_channels": 4}})";
  }
  // Both runs use the same output path; the first result is moved aside.
  for (const char* run : {"a", "b"}) {
    const std::string cmd = "\"" + ctx.loupe_binary + "\" train-loupe --quiet --config \"" +
                            (dir / "run.json").string() + "\" --out \"" + (dir / "out").string() + "\" > /dev/null";
    o.require(std::system(cmd.c_str()) == 0, std::string("train-loupe run ") + run + " failed");
    if (std::filesystem::exists(dir / "out")) std::filesystem::rename(dir / "out", dir / run);
  }
  std::size_t compared = 0;
  for (const char* f : {"mask.pgm", "mask.json", "mask_prob.pgm", "mask_prob.json", "model.json", "model.f32",
                        "history.csv", "config.json"}) {
    const auto a = slurp(dir / "a" / f), b = slurp(dir / "b" / f);
    o.require(a != "<missing>", std::string(f) + " was not written");
    o.require(a == b, std::string(f) + " differs between runs");
    ++compared;
  }
  if (o.pass) o.detail = std::to_string(compared) + " artifacts byte-identical";
  return o;
}

Outcome a9_budgets(const Context&) {
  Outcome o;
  Rng rng(909);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 4 + rng.below(61), w = 4 + rng.below(61), d = h * w;
    // alpha = m / 1000 keeps the expected ceiling in exact integer arithmetic.
    const std::size_t m = 1 + rng.below(999);
    const double alpha = static_cast<double>(m) / 1000.0;
    const std::size_t points = (m * d + 999) / 1000;
    const std::string tag = std::to_string(h) + "x" + std::to_string(w) + " alpha " + fmt("%g", alpha);
    const std::uint64_t seed = rng.next_u64();

    o.require(gen_uniform_random(h, w, alpha, seed).sampled() == points, tag + ": uniform");
    o.require(gen_variable_density(h, w, alpha, rng.uniform(0.0, 6.0), seed).sampled() == points, tag + ": vd");
    o.require(binarize(random_tensor({h, w}, seed, 0.0, 1.0), alpha, BinarizeMode::TopK).sampled() == points,
              tag + ": topk");

    const Axis axis = rng.below(2) ? Axis::Rows : Axis::Columns;
    const std::size_t lines_total = axis == Axis::Rows ? h : w, line_len = d / lines_total;
    const std::size_t lines = (m * lines_total + 999) / 1000;
    const auto cart = gen_cartesian_equispaced(h, w, alpha, axis, rng.below(lines));
    o.require(cart.sampled() == lines * line_len, tag + ": cartesian");
    const auto line_bin = binarize_lines(random_tensor({h, w}, seed + 1, 0.0, 1.0), alpha, axis);
    // A readout along rows makes every column one line.
    const std::size_t readout_lines = axis == Axis::Rows ? w : h;
    o.require(line_bin.sampled() == (m * readout_lines + 999) / 1000 * (d / readout_lines),
              tag + ": line binarization");

    if (trial % 10 == 0) {
      PhantomSpec spec;
      spec.train_volumes = 2;
      spec.val_volumes = 1;
      spec.test_volumes = 1;
      spec.slices_per_volume = 2;
      spec.height = h;
      spec.width = w;
      spec.seed = seed;
      o.require(gen_spectrum(gen_phantoms(spec), alpha).sampled() == points, tag + ": spectrum");
    }
  }
  if (o.pass) o.detail = "100 configurations, 6 generators";
  return o;
}

struct Criterion {
  std::function<Outcome(const Context&)> run;
  double budget_seconds;
};

const std::map<std::string, Criterion> kCriteria{
    {"A1", {a1_renormalization, 5}},   {"A2", {a2_gradients, 60}},       {"A3", {a3_ordering, 1800}},
    {"A4", {a4_symmetry, 1800}},        {"A5", {a5_lines, 300}},          {"A6", {a6_metrics, 30}},
    {"A7", {a7_fourier, 10}},           {"A8", {a8_reproducibility, 600}}, {"A9", {a9_budgets, 5}},
};

} // namespace

int main(int argc, char** argv) {
  Context ctx;
  std::vector<std::string> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--loupe" && i + 1 < argc) ctx.loupe_binary = argv[++i];
    else if (arg == "all")
      for (const auto& [name, c] : kCriteria) selected.push_back(name);
    else if (kCriteria.count(arg)) selected.push_back(arg);
    else {
      std::fprintf(stderr, "usage: %s [--loupe PATH] (all | A1 ... A9)\n", argv[0]);
      return 1;
    }
  }
  if (selected.empty())
    for (const auto& [name, c] : kCriteria) selected.push_back(name);

  int failures = 0;
  for (const auto& name : selected) {
    const auto& criterion = kCriteria.at(name);
    const auto start = std::chrono::steady_clock::now();
    Outcome outcome;
    try {
      outcome = criterion.run(ctx);
    } catch (const std::exception& e) {
      outcome.pass = false;
      outcome.detail = std::string("exception: ") + e.what();
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (outcome.pass && seconds > criterion.budget_seconds) {
      outcome.pass = false;
      outcome.detail = "over the " + fmt("%g", criterion.budget_seconds) + " s budget; " + outcome.detail;
    }
    std::printf("%s %s  %s  (%.1f s)\n", name.c_str(), outcome.pass ? "PASS" : "FAIL", outcome.detail.c_str(),
                seconds);
    std::fflush(stdout);
    failures += outcome.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
