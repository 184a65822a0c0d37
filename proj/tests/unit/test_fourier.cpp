#include <cmath>
#include <complex>
#include <numbers>

#include "doctest.h"
#include "loupe/autodiff.hpp"
#include "loupe/fourier.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace loupe;
using namespace loupe::testing;
using loupe::testing::max_abs_diff;
using loupe::testing::random_tensor;

namespace {

double norm(const Tensor<double>& t) {
  double s = 0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

} // namespace

TEST_SUITE("fourier") {

TEST_CASE("2x2 examples") {
  Tensor<double> delta({2, 2, 2});
  delta.at({0, 0, 0}) = 1.0;
  const auto k = fourier::dft2(delta);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(k[i] == doctest::Approx(0.5));
    CHECK(k[4 + i] == doctest::Approx(0.0));
  }

  Tensor<double> ones({2, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) ones[i] = 1.0;
  const auto kc = fourier::dft2(ones);
  CHECK(kc[0] == doctest::Approx(2.0));
  for (std::size_t i = 1; i < 8; ++i) CHECK(kc[i] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("inverse of a DC delta is a constant image") {
  Tensor<double> delta({2, 3, 5});
  delta[0] = 1.0;
  const auto img = fourier::idft2(delta);
  for (std::size_t i = 0; i < 15; ++i) {
    CHECK(img[i] == doctest::Approx(1.0 / std::sqrt(15.0)));
    CHECK(std::abs(img[15 + i]) < 1e-12);
  }
}

TEST_CASE("matches a naive DFT for odd and even sizes") {
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{3, 5}, {4, 6}, {7, 8}}) {
    const auto x = random_tensor({2, h, w}, h * 100 + w);
    const auto fwd = to_complex(fourier::dft2(x));
    const auto inv = to_complex(fourier::idft2(x));
    const auto ref_fwd = naive_dft2(to_complex(x), h, w, -1.0);
    const auto ref_inv = naive_dft2(to_complex(x), h, w, +1.0);
    for (std::size_t i = 0; i < h * w; ++i) {
      CHECK(std::abs(fwd[i] - ref_fwd[i]) < 1e-12);
      CHECK(std::abs(inv[i] - ref_inv[i]) < 1e-12);
    }
  }
}

TEST_CASE("linearity") {
  const auto x = random_tensor({2, 6, 6}, 1);
  const auto y = random_tensor({2, 6, 6}, 2);
  Tensor<double> combo(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) combo[i] = 2.0 * x[i] - 0.5 * y[i];
  const auto lhs = fourier::dft2(combo);
  const auto fx = fourier::dft2(x), fy = fourier::dft2(y);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(lhs[i] - (2.0 * fx[i] - 0.5 * fy[i])) < 1e-12);
}

TEST_CASE("roundtrip in both precisions") {
  const auto xd = random_tensor<double>({3, 2, 16, 12}, 5);
  CHECK(max_abs_diff(fourier::idft2(fourier::dft2(xd)), xd) < 1e-10);
  const auto xf = random_tensor<float>({3, 2, 16, 12}, 6);
  CHECK(max_abs_diff(fourier::idft2(fourier::dft2(xf)), xf) < 1e-5);
}

TEST_CASE("Parseval up to 128x128") {
  for (std::size_t n : {8, 33, 64, 128}) {
    const auto x = random_tensor({2, n, n}, n);
    CHECK(std::abs(norm(fourier::dft2(x)) - norm(x)) < 1e-5);
  }
}

TEST_CASE("radix-2 and direct algorithms agree") {
  const auto x = random_tensor({2, 128, 128}, 9);
  const auto a = fourier::dft2(x, fourier::Algorithm::Direct);
  const auto b = fourier::dft2(x, fourier::Algorithm::Radix2);
  CHECK(max_abs_diff(a, b) < 1e-5);
  CHECK_THROWS_AS(fourier::dft2(random_tensor({2, 12, 8}, 1), fourier::Algorithm::Radix2), DomainError);
}

TEST_CASE("fftshift examples") {
  Tensor<double> grid({4, 4});
  grid.at({2, 2}) = 1.0;
  CHECK(fourier::fftshift(grid).at({0, 0}) == 1.0);

  const auto odd = random_tensor({5, 5}, 3);
  CHECK(fourier::ifftshift(fourier::fftshift(odd)) == odd);
  CHECK(fourier::fftshift(fourier::ifftshift(odd)) == odd);

  Tensor<double> dc({5, 4});
  dc[0] = 1.0;
  CHECK(fourier::fftshift(dc).at({2, 2}) == 1.0);

  const Tensor<double> flat({3, 5}, 0.25);
  CHECK(fourier::fftshift(flat) == flat);
}

TEST_CASE("masked operator equals its dense matrix") {
  constexpr std::size_t n = 4, d = n * n;
  const auto mask_centered = random_tensor({1, 1, n, n}, 11, 0.0, 1.0);
  const auto m = fourier::ifftshift(mask_centered);

  const auto op = dense_masked_operator(m, n, n);

  const auto x = random_tensor({1, 2, n, n}, 12);
  Graph<double> g;
  Node xin = g.input("x", {1, 2, n, n});
  Node min = g.input("m", {1, 1, n, n});
  Node out = g.idft2(g.multiply(g.dft2(xin), g.ifftshift(min)));
  g.evaluate({{"x", x}, {"m", mask_centered}});
  const auto got = to_complex(g.value(out));
  const auto xc = to_complex(x);
  for (std::size_t a = 0; a < d; ++a) {
    cd expect = 0;
    for (std::size_t b = 0; b < d; ++b) expect += op[a * d + b] * xc[b];
    CHECK(std::abs(got[a] - expect) < 1e-10);
  }
}

} // TEST_SUITE
