#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "loupe/data.hpp"
#include "loupe/masks.hpp"
#include "loupe/rng.hpp"
#include "test_support.hpp"

using namespace loupe;
using loupe::testing::random_tensor;
using loupe::testing::TempDir;

namespace {

double mean(const Tensor<double>& t) {
  double s = 0;
  for (double v : t.data()) s += v;
  return s / static_cast<double>(t.size());
}

/// Mean distance of sampled points from the DC-centered grid center.
double mean_radius(const BinaryMask& m) {
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.height(); ++i)
    for (std::size_t j = 0; j < m.width(); ++j)
      if (m.values.at({i, j}) == 1.0) {
        acc += std::hypot(static_cast<double>(i) - static_cast<double>(m.height() / 2),
                          static_cast<double>(j) - static_cast<double>(m.width() / 2));
        ++n;
      }
  return acc / static_cast<double>(n);
}

bool constant_along_rows(const Tensor<double>& t) {
  for (std::size_t i = 1; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j)
      if (t.at({i, j}) != t.at({0, j})) return false;
  return true;
}

} // namespace

TEST_SUITE("masks") {

TEST_CASE("probabilities") {
  Rng rng(1);
  auto params = init_prob_mask<double>(3, 3, 0.5, 5.0, 200.0, false, Axis::Rows, rng, 0.0);
  const auto half = probabilities(params);
  for (double v : half.data()) CHECK(v == doctest::Approx(0.5));
  params.logits.value.fill(1.0);
  const auto high = probabilities(params);
  for (double v : high.data()) CHECK(v == doctest::Approx(0.993307).epsilon(1e-6));

  auto line = init_prob_mask<double>(2, 2, 0.5, 5.0, 200.0, true, Axis::Rows, rng, 0.0);
  line.logits.value = Tensor<double>({2}, {-0.3, 0.8});
  const auto p = probabilities(line);
  CHECK(p.at({0, 0}) == p.at({1, 0}));
  CHECK(p.at({0, 1}) == p.at({1, 1}));
  CHECK(p.at({0, 0}) != p.at({0, 1}));
}

TEST_CASE("initialization starts on the constraint surface") {
  Rng rng(2);
  const auto params = init_prob_mask<double>(8, 8, 0.125, 5.0, 200.0, false, Axis::Rows, rng, 0.0);
  CHECK(mean(probabilities(params)) == doctest::Approx(0.125));
}

TEST_CASE("renormalize examples") {
  auto a = renormalize(Tensor<double>({2}, {0.2, 0.8}), 0.25);
  CHECK(a[0] == doctest::Approx(0.1));
  CHECK(a[1] == doctest::Approx(0.4));
  // Reflected branch: 1 - (1 - 0.5) / (1 - 0.3) * (1 - p)
  auto b = renormalize(Tensor<double>({2}, {0.2, 0.4}), 0.5);
  CHECK(b[0] == doctest::Approx(1.0 - 0.5 / 0.7 * 0.8));
  CHECK(b[1] == doctest::Approx(1.0 - 0.5 / 0.7 * 0.6));
  CHECK(b[0] == doctest::Approx(0.428571).epsilon(1e-6));
  const Tensor<double> at_alpha({4}, {0.1, 0.2, 0.3, 0.4});
  const auto c = renormalize(at_alpha, 0.25);
  for (std::size_t i = 0; i < 4; ++i) CHECK(c[i] == doctest::Approx(at_alpha[i]));
  CHECK_THROWS_AS(renormalize(at_alpha, 1.0), DomainError);
  CHECK_THROWS_AS(renormalize(at_alpha, 0.0), DomainError);
}

TEST_CASE("renormalize hits alpha exactly, stays in range and is monotone") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 1 + rng.below(32), w = 1 + rng.below(32);
    Tensor<double> p({h, w});
    const double skew = rng.uniform();
    for (auto& v : p.data()) v = std::pow(rng.uniform(), 4.0 * skew + 0.1);
    for (double alpha : {0.125, 0.25, 0.5}) {
      const auto out = renormalize(p, alpha);
      CHECK(std::abs(mean(out) - alpha) <= 1e-6);
      for (std::size_t i = 0; i < out.size(); ++i) {
        CHECK(out[i] >= 0.0);
        CHECK(out[i] <= 1.0);
      }
      for (int k = 0; k < 20; ++k) {
        const std::size_t i = rng.below(p.size()), j = rng.below(p.size());
        if (p[i] <= p[j]) CHECK(out[i] <= out[j]);
      }
    }
  }
}

TEST_CASE("relaxed sampling") {
  Rng a(4), b(4);
  const auto p = random_tensor({8, 8}, 5, 0.0, 1.0);
  const auto ma = sample_relaxed(p, 200.0, a);
  const auto mb = sample_relaxed(p, 200.0, b);
  CHECK(ma.values == mb.values);
  for (double v : ma.values.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  // sigma_200(0.7 - 0.2) = sigma(100)
  const double sharp = 1.0 / (1.0 + std::exp(-200.0 * 0.5));
  CHECK(sharp > 1.0 - 1e-6);

  // Converges to the indicator U < P as the slope grows.
  Rng r1(6), r2(6), r3(6);
  const auto p_big = random_tensor({64, 64}, 7, 0.0, 1.0);
  const auto s200 = sample_relaxed(p_big, 200.0, r1);
  const auto s2000 = sample_relaxed(p_big, 2000.0, r2);
  double gap200 = 0, gap2000 = 0;
  for (std::size_t i = 0; i < p_big.size(); ++i) {
    const double indicator = r3.uniform() < p_big[i] ? 1.0 : 0.0;
    gap200 += std::abs(s200.values[i] - indicator);
    gap2000 += std::abs(s2000.values[i] - indicator);
  }
  CHECK(gap200 / static_cast<double>(p_big.size()) < 1e-2);
  CHECK(gap2000 < gap200);
}

TEST_CASE("topk binarization") {
  const auto m = binarize(Tensor<double>({2, 2}, {0.9, 0.1, 0.8, 0.2}), 0.5, BinarizeMode::TopK);
  CHECK(m.values == Tensor<double>({2, 2}, {1, 0, 1, 0}));
  CHECK(m.achieved_sparsity == 0.5);

  const auto all = binarize(random_tensor({3, 5}, 8, 0.0, 1.0), 1.0, BinarizeMode::TopK);
  CHECK(all.sampled() == 15);

  const auto tie = binarize(Tensor<double>({2, 2}, 0.25), 0.25, BinarizeMode::TopK);
  CHECK(tie.values == Tensor<double>({2, 2}, {1, 0, 0, 0}));

  const auto bern_a = binarize(random_tensor({8, 8}, 9, 0.0, 1.0), 0.5, BinarizeMode::Bernoulli, 3);
  const auto bern_b = binarize(random_tensor({8, 8}, 9, 0.0, 1.0), 0.5, BinarizeMode::Bernoulli, 3);
  CHECK(bern_a.values == bern_b.values);
  CHECK(bern_a.achieved_sparsity == doctest::Approx(static_cast<double>(bern_a.sampled()) / 64.0));
}

TEST_CASE("uniform random masks") {
  const auto m = gen_uniform_random(4, 4, 0.5, 10);
  CHECK(m.sampled() == 8);
  CHECK(gen_uniform_random(4, 4, 0.5, 10).values == m.values);
  CHECK(gen_uniform_random(4, 4, 0.5, 11).values != m.values);
  CHECK(gen_uniform_random(4, 4, 1.0, 10).sampled() == 16);
}

TEST_CASE("variable density masks") {
  for (auto [h, w, alpha, expected] : {std::tuple{16, 16, 0.25, 64}, {12, 20, 0.1, 24}, {10, 10, 0.333, 34}}) {
    const auto m = gen_variable_density(h, w, alpha, 3.0, 1);
    CHECK(m.sampled() == static_cast<std::size_t>(expected));
    CHECK(m.achieved_sparsity == static_cast<double>(expected) / (h * w));
  }
  const auto profile = variable_density_profile(16, 16, 0.25, 3.0);
  double total = 0;
  for (double v : profile.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    total += v;
  }
  CHECK(total == doctest::Approx(64.0));
  const auto flat = variable_density_profile(8, 8, 0.25, 0.0);
  for (double v : flat.data()) CHECK(v == doctest::Approx(0.25));

  double r3 = 0, r0 = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    r3 += mean_radius(gen_variable_density(32, 32, 0.25, 3.0, seed));
    r0 += mean_radius(gen_variable_density(32, 32, 0.25, 0.0, seed));
  }
  CHECK(r3 < r0);
  CHECK(gen_variable_density(16, 16, 0.3, 3.0, 5).values == gen_variable_density(16, 16, 0.3, 3.0, 5).values);
}

TEST_CASE("equispaced cartesian masks") {
  const auto m = gen_cartesian_equispaced(8, 8, 0.25, Axis::Columns, 0);
  CHECK(m.sampled() == 16);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) CHECK(m.values.at({i, j}) == ((j == 0 || j == 4) ? 1.0 : 0.0));
  CHECK(constant_along_rows(m.values));

  const auto rows = gen_cartesian_equispaced(8, 6, 0.5, Axis::Rows, 2);
  for (std::size_t i = 0; i < 8; ++i) {
    const double first = rows.values.at({i, 0});
    for (std::size_t j = 1; j < 6; ++j) CHECK(rows.values.at({i, j}) == first);
  }
  CHECK(rows.sampled() == 4 * 6);
  CHECK(rows.values.at({3, 0}) == 1.0);
  CHECK(rows.values.at({4, 0}) == 1.0);

  CHECK(gen_cartesian_equispaced(8, 8, 1.0, Axis::Columns, 0).sampled() == 64);
  CHECK_THROWS_AS(gen_cartesian_equispaced(8, 8, 0.25, Axis::Columns, 2), DomainError);
}

TEST_CASE("spectrum masks") {
  VolumeDataset ds;
  Tensor<float> flat({2, 2, 8, 8});
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t i = 0; i < 64; ++i) flat[s * 128 + i] = 1.0f;
  ds.volumes.push_back({flat, Split::Train, "flat"});
  const auto m = gen_spectrum(ds, 1.0 / 64.0);
  CHECK(m.sampled() == 1);
  CHECK(m.values.at({4, 4}) == 1.0);
  CHECK(gen_spectrum(ds, 1.0).sampled() == 64);

  PhantomSpec spec;
  spec.train_volumes = 2;
  spec.val_volumes = spec.test_volumes = 0;
  spec.slices_per_volume = 3;
  spec.height = spec.width = 16;
  spec.seed = 4;
  auto phantoms = gen_phantoms(spec);
  auto reversed = phantoms;
  std::reverse(reversed.volumes.begin(), reversed.volumes.end());
  CHECK(gen_spectrum(phantoms, 0.2).values == gen_spectrum(reversed, 0.2).values);

  VolumeDataset empty;
  empty.volumes.push_back({flat, Split::Validation, "val only"});
  CHECK_THROWS_AS(gen_spectrum(empty, 0.25), DataError);
}

TEST_CASE("line expansion") {
  const auto grid = expand_line_params(Tensor<double>({2}, {1.5, -2.0}), 2, 2, Axis::Rows);
  CHECK(grid == Tensor<double>({2, 2}, {1.5, -2.0, 1.5, -2.0}));
  const auto cols = expand_line_params(Tensor<double>({3}, {1, 2, 3}), 3, 2, Axis::Columns);
  CHECK(cols == Tensor<double>({3, 2}, {1, 1, 2, 2, 3, 3}));
  CHECK_THROWS_AS(expand_line_params(Tensor<double>({3}), 2, 2, Axis::Rows), ShapeError);

  // d/dO_line of sum(expand(O_line)) = H for every entry.
  Graph<double> g;
  Node line = g.input("line", {5});
  Node loss = g.sum(g.expand_line(line, 7, 5, Axis::Rows));
  g.evaluate({{"line", random_tensor({5}, 1)}});
  g.backpropagate(loss, Tensor<double>::scalar(1.0));
  for (double v : g.gradient(line).data()) CHECK(v == 7.0);
}

TEST_CASE("line binarization keeps whole lines") {
  Rng rng(12);
  auto params = init_prob_mask<double>(8, 16, 0.25, 5.0, 200.0, true, Axis::Rows, rng, 0.5);
  const auto p = renormalize(probabilities(params), 0.25);
  CHECK(constant_along_rows(p));
  const auto m = binarize_lines(p, 0.25, Axis::Rows);
  CHECK(constant_along_rows(m.values));
  CHECK(m.sampled() == 4 * 8);
  CHECK(m.achieved_sparsity == 0.25);
}

TEST_CASE("sample budgets") {
  CHECK(sample_budget(0.25, 16) == 4);
  CHECK(sample_budget(0.3, 10) == 3);
  CHECK(sample_budget(0.31, 10) == 4);
  CHECK(sample_budget(0.1, 30) == 3);
  CHECK(sample_budget(1.0, 7) == 7);
}

TEST_CASE("mask files roundtrip") {
  TempDir dir("masks");
  const auto m = gen_variable_density(12, 16, 0.25, 3.0, 42);
  save_mask(dir / "vd.pgm", m);
  CHECK(std::filesystem::exists(sidecar_path(dir / "vd.pgm")));
  const auto back = load_mask(dir / "vd.pgm");
  CHECK(back.values == m.values);
  CHECK(back.kind == "variable-density");
  CHECK(back.seed == 42);
  CHECK(back.alpha == 0.25);
  CHECK(back.achieved_sparsity == m.achieved_sparsity);

  const auto p = random_tensor({6, 10}, 3, 0.0, 1.0);
  save_probability_mask(dir / "p.pgm", p, 0.3);
  const auto pb = load_probability_mask(dir / "p.pgm");
  CHECK(loupe::testing::max_abs_diff(p, pb) <= 0.5 / 65535.0 + 1e-12);
  CHECK_THROWS_AS(load_mask(dir / "p.pgm"), DataError);
}

TEST_CASE("axis wedge ratio") {
  Tensor<double> horizontal({16, 16});
  for (std::size_t j = 0; j < 16; ++j) horizontal.at({8, j}) = 1.0;
  CHECK(axis_wedge_ratio(horizontal) > 1.0);
  Tensor<double> vertical({16, 16});
  for (std::size_t i = 0; i < 16; ++i) vertical.at({i, 8}) = 1.0;
  CHECK(axis_wedge_ratio(vertical) < 1.0);
}

} // TEST_SUITE
