#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "doctest.h"
#include "loupe/metrics.hpp"
#include "loupe/rng.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace loupe;
using namespace loupe::testing;
using loupe::testing::random_tensor;
using loupe::testing::TempDir;

namespace {

Tensor<double> perturbed(const Tensor<double>& x, std::uint64_t seed, double amount) {
  auto noise = random_tensor(x.shape(), seed, -amount, amount);
  for (std::size_t i = 0; i < x.size(); ++i) noise[i] += x[i];
  return noise;
}

} // namespace

TEST_SUITE("metrics") {

TEST_CASE("PSNR") {
  const Tensor<double> x({2, 2}, {1.0, 0.5, 0.2, 0.0});
  Tensor<double> y = x;
  for (auto& v : y.data()) v += 0.1;
  CHECK(psnr(x, y) == doctest::Approx(20.0));
  CHECK(psnr(x, x) == kInfinitePsnr);
  Tensor<double> xs = x, ys = y;
  for (auto& v : xs.data()) v *= 3.7;
  for (auto& v : ys.data()) v *= 3.7;
  CHECK(psnr(xs, ys) == doctest::Approx(psnr(x, y)));
  CHECK_THROWS_AS(psnr(x, Tensor<double>({4})), ShapeError);

  double previous = kInfinitePsnr;
  for (double e : {0.01, 0.02, 0.05, 0.1, 0.3}) {
    Tensor<double> z = x;
    z[1] += e;
    const double value = psnr(x, z);
    CHECK(value < previous);
    previous = value;
  }
}

TEST_CASE("SSIM") {
  const auto x = random_tensor({16, 16}, 1, 0.0, 1.0);
  CHECK(ssim(x, x) == 1.0);

  const double a = 0.3, b = 0.7;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  CHECK(ssim(Tensor<double>({9, 9}, a), Tensor<double>({9, 9}, b)) ==
        doctest::Approx((2 * a * b + c1) * c2 / ((a * a + b * b + c1) * c2)));

  const auto y = perturbed(x, 2, 0.2);
  CHECK(std::abs(ssim(x, y) - brute_ssim(x, y, 7, 0.01, 0.03)) < 1e-6);
  SsimConfig fixed;
  fixed.dynamic_range = 1.0;
  CHECK(std::abs(ssim(x, y, fixed) - ssim(y, x, fixed)) < 1e-9);
  CHECK_THROWS_AS(ssim(Tensor<double>({6, 10}), Tensor<double>({6, 10})), ShapeError);
}

TEST_CASE("LoG kernel") {
  const auto k = log_kernel();
  const auto ref = reference_log(15, 1.5);
  double sum = 0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    CHECK(std::abs(k[i] - ref[i]) < 1e-12);
    sum += k[i];
  }
  CHECK(std::abs(sum) < 1e-12);
}

TEST_CASE("HFEN") {
  const auto x = random_tensor({20, 24}, 3, 0.0, 1.0);
  CHECK(hfen(x, x) == 0.0);
  Tensor<double> shifted = x;
  for (auto& v : shifted.data()) v += 0.37;
  CHECK(hfen(x, shifted) < 1e-9);
  const auto y = perturbed(x, 4, 0.3);
  CHECK(std::abs(hfen(x, y) - brute_hfen(x, y)) < 1e-6);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto p = random_tensor({12, 12}, seed * 3 + 10);
    const auto q = random_tensor({12, 12}, seed * 3 + 11);
    const auto r = random_tensor({12, 12}, seed * 3 + 12);
    CHECK(hfen(p, q) >= 0.0);
    CHECK(hfen(p, r) <= hfen(p, q) + hfen(q, r) + 1e-9);
  }
}

TEST_CASE("MSE and MAE") {
  const Tensor<double> x({2, 2}, {0, 1, 2, 3});
  const Tensor<double> y({2, 2}, {1, 1, 0, 3});
  CHECK(mse(x, y) == doctest::Approx(5.0 / 4.0));
  CHECK(mae(x, y) == doctest::Approx(3.0 / 4.0));
}

TEST_CASE("volume reports") {
  const auto gt = random_tensor({3, 16, 16}, 20, 0.0, 1.0);
  const auto same = evaluate_pair(gt, gt);
  CHECK(same.volume_mean.mse == 0.0);
  CHECK(same.volume_mean.mae == 0.0);
  CHECK(same.volume_mean.hfen == 0.0);
  CHECK(same.volume_mean.ssim == 1.0);
  CHECK(same.volume_mean.psnr == kInfinitePsnr);

  const auto rec = perturbed(gt, 21, 0.1);
  const auto report = evaluate_pair(gt, rec);
  REQUIRE(report.slices.size() == 3);
  double mean_mse = 0;
  for (const auto& s : report.slices) mean_mse += s.mse / 3.0;
  CHECK(report.volume_mean.mse == doctest::Approx(mean_mse));

  // Permuting slices of both volumes leaves the means unchanged.
  Tensor<double> gt_perm(gt.shape()), rec_perm(gt.shape());
  const std::size_t plane = 256;
  const std::size_t order[3] = {2, 0, 1};
  for (std::size_t s = 0; s < 3; ++s) {
    std::copy_n(gt.raw() + order[s] * plane, plane, gt_perm.raw() + s * plane);
    std::copy_n(rec.raw() + order[s] * plane, plane, rec_perm.raw() + s * plane);
  }
  const auto permuted = evaluate_pair(gt_perm, rec_perm);
  CHECK(permuted.volume_mean.psnr == doctest::Approx(report.volume_mean.psnr));
  CHECK(permuted.volume_mean.ssim == doctest::Approx(report.volume_mean.ssim));
  CHECK(permuted.volume_mean.hfen == doctest::Approx(report.volume_mean.hfen));

  const auto avg = average({SliceMetrics{1, 2, 3, 4, 0.5}, SliceMetrics{3, 4, 5, 6, 0.7}});
  CHECK(avg.mse == 2.0);
  CHECK(avg.psnr == 5.0);
  CHECK(avg.ssim == doctest::Approx(0.6));
}

TEST_CASE("metrics CSV") {
  TempDir dir("metrics");
  const auto gt = random_tensor({2, 8, 8}, 30, 0.0, 1.0);
  write_metrics_csv(dir / "m.csv", evaluate_pair(gt, gt));
  std::ifstream in(dir / "m.csv");
  std::string header, first, second, mean_row;
  std::getline(in, header);
  std::getline(in, first);
  std::getline(in, second);
  std::getline(in, mean_row);
  CHECK(header == "slice_index,mse,mae,hfen,psnr_db,ssim");
  CHECK(first.rfind("0,", 0) == 0);
  CHECK(first.substr(first.rfind(',') + 1) == "1");
  CHECK(mean_row.rfind("mean,", 0) == 0);
}

} // TEST_SUITE
