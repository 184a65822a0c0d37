#pragma once

// Dense kernels behind the graph primitives. Layouts are row-major
// [N, C, H, W]; every function accumulates or overwrites as documented.

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <vector>

namespace loupe::kernels {

template <typename Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MatrixMap = Eigen::Map<RowMatrix<Real>>;
template <typename Real>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Real>>;

/// Unfolds 3x3 zero-padded neighbourhoods of one [C, H, W] image into a
/// [C*9, H*W] matrix.
template <typename Real>
void im2col3x3(const Real* x, std::size_t channels, std::size_t h, std::size_t w, Real* col) {
  const std::size_t plane = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    const Real* src = x + c * plane;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        Real* dst = col + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * plane;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          Real* row = dst + y * w;
          if (sy < 0 || sy >= static_cast<long>(h)) {
            std::fill(row, row + w, Real{0});
            continue;
          }
          const Real* srow = src + static_cast<std::size_t>(sy) * w;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx) + kx - 1;
            row[xx] = (sx < 0 || sx >= static_cast<long>(w)) ? Real{0} : srow[sx];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col3x3: scatters-adds a [C*9, H*W] matrix into [C, H, W].
template <typename Real>
void col2im3x3_add(const Real* col, std::size_t channels, std::size_t h, std::size_t w, Real* x) {
  const std::size_t plane = h * w;
  for (std::size_t c = 0; c < channels; ++c) {
    Real* dst = x + c * plane;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Real* src = col + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * plane;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          const Real* row = src + y * w;
          Real* drow = dst + static_cast<std::size_t>(sy) * w;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const long sx = static_cast<long>(xx) + kx - 1;
            if (sx >= 0 && sx < static_cast<long>(w)) drow[sx] += row[xx];
          }
        }
      }
    }
  }
}

template <typename Real>
void conv3x3_forward(const Real* x, const Real* weight, const Real* bias, Real* y, std::size_t n,
                     std::size_t cin, std::size_t cout, std::size_t h, std::size_t w, std::vector<Real>& col) {
  const std::size_t plane = h * w;
  const std::size_t k = cin * 9;
  col.resize(k * plane);
  ConstMatrixMap<Real> wm(weight, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(k));
  for (std::size_t b = 0; b < n; ++b) {
    im2col3x3(x + b * cin * plane, cin, h, w, col.data());
    ConstMatrixMap<Real> cm(col.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(plane));
    MatrixMap<Real> ym(y + b * cout * plane, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(plane));
    ym.noalias() = wm * cm;
    if (bias)
      for (std::size_t o = 0; o < cout; ++o) ym.row(static_cast<Eigen::Index>(o)).array() += bias[o];
  }
}

/// Accumulates into gx (if non-null), gweight and gbias (if non-null).
template <typename Real>
void conv3x3_backward(const Real* x, const Real* weight, const Real* gy, Real* gx, Real* gweight, Real* gbias,
                      std::size_t n, std::size_t cin, std::size_t cout, std::size_t h, std::size_t w,
                      std::vector<Real>& col) {
  const std::size_t plane = h * w;
  const std::size_t k = cin * 9;
  col.resize(k * plane);
  ConstMatrixMap<Real> wm(weight, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(k));
  MatrixMap<Real> gwm(gweight, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(k));
  RowMatrix<Real> gcol;
  for (std::size_t b = 0; b < n; ++b) {
    ConstMatrixMap<Real> gym(gy + b * cout * plane, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(plane));
    im2col3x3(x + b * cin * plane, cin, h, w, col.data());
    ConstMatrixMap<Real> cm(col.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(plane));
    gwm.noalias() += gym * cm.transpose();
    if (gbias)
      for (std::size_t o = 0; o < cout; ++o) gbias[o] += gym.row(static_cast<Eigen::Index>(o)).sum();
    if (gx) {
      gcol.noalias() = wm.transpose() * gym;
      col2im3x3_add(gcol.data(), cin, h, w, gx + b * cin * plane);
    }
  }
}

template <typename Real>
void avg_pool2_forward(const Real* x, Real* y, std::size_t planes, std::size_t h, std::size_t w) {
  const std::size_t oh = h / 2, ow = w / 2;
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* src = x + p * h * w;
    Real* dst = y + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const Real* s = src + 2 * i * w + 2 * j;
        dst[i * ow + j] = (s[0] + s[1] + s[w] + s[w + 1]) * Real(0.25);
      }
  }
}

template <typename Real>
void avg_pool2_backward(const Real* gy, Real* gx, std::size_t planes, std::size_t h, std::size_t w) {
  const std::size_t oh = h / 2, ow = w / 2;
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* src = gy + p * oh * ow;
    Real* dst = gx + p * h * w;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const Real g = src[i * ow + j] * Real(0.25);
        Real* d = dst + 2 * i * w + 2 * j;
        d[0] += g;
        d[1] += g;
        d[w] += g;
        d[w + 1] += g;
      }
  }
}

/// x is [planes, h, w]; y is [planes, 2h, 2w].
template <typename Real>
void upsample2_forward(const Real* x, Real* y, std::size_t planes, std::size_t h, std::size_t w) {
  const std::size_t ow = 2 * w;
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* src = x + p * h * w;
    Real* dst = y + p * 4 * h * w;
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < ow; ++j) dst[i * ow + j] = src[(i / 2) * w + j / 2];
  }
}

template <typename Real>
void upsample2_backward(const Real* gy, Real* gx, std::size_t planes, std::size_t h, std::size_t w) {
  const std::size_t ow = 2 * w;
  for (std::size_t p = 0; p < planes; ++p) {
    const Real* src = gy + p * 4 * h * w;
    Real* dst = gx + p * h * w;
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < ow; ++j) dst[(i / 2) * w + j / 2] += src[i * ow + j];
  }
}

/// Numerically stable logistic function with slope.
template <typename Real>
Real sigmoid(Real x, double slope) {
  const double z = slope * static_cast<double>(x);
  if (z >= 0) return static_cast<Real>(1.0 / (1.0 + std::exp(-z)));
  const double e = std::exp(z);
  return static_cast<Real>(e / (1.0 + e));
}

} // namespace loupe::kernels
