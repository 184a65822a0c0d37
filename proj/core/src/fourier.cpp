#include "loupe/fourier.hpp"

#include <bit>
#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

namespace loupe::fourier {
namespace {

using cplx = std::complex<double>;

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

/// Transforms one line of n samples. Twiddles come from a table indexed by
/// (j*k) mod n, which keeps direct evaluation accurate for large j*k.
class LineTransform {
public:
  LineTransform(std::size_t n, Direction direction, Algorithm algorithm)
      : n_(n), scale_(1.0 / std::sqrt(static_cast<double>(n))), twiddle_(n), scratch_(n) {
    const double sign = direction == Direction::Forward ? -1.0 : 1.0;
    for (std::size_t m = 0; m < n; ++m) {
      const double angle = sign * 2.0 * std::numbers::pi * static_cast<double>(m) / static_cast<double>(n);
      twiddle_[m] = cplx(std::cos(angle), std::sin(angle));
    }
    switch (algorithm) {
    case Algorithm::Direct: radix2_ = false; break;
    case Algorithm::Radix2:
      if (!is_power_of_two(n)) throw DomainError("radix-2 transform needs a power-of-two length, got " + std::to_string(n));
      radix2_ = true;
      break;
    case Algorithm::Auto: radix2_ = is_power_of_two(n) && n > kDirectMaxLength; break;
    }
  }

  void apply(std::span<cplx> line) {
    if (radix2_)
      apply_radix2(line);
    else
      apply_direct(line);
    for (auto& v : line) v *= scale_;
  }

private:
  void apply_direct(std::span<cplx> line) {
    for (std::size_t k = 0; k < n_; ++k) {
      cplx acc = 0.0;
      std::size_t idx = 0;
      for (std::size_t j = 0; j < n_; ++j) {
        acc += line[j] * twiddle_[idx];
        idx += k;
        if (idx >= n_) idx -= n_;
      }
      scratch_[k] = acc;
    }
    std::copy(scratch_.begin(), scratch_.end(), line.begin());
  }

  void apply_radix2(std::span<cplx> line) {
    const unsigned bits = static_cast<unsigned>(std::countr_zero(n_));
    for (std::size_t i = 0; i < n_; ++i) {
      std::size_t r = 0;
      for (unsigned b = 0; b < bits; ++b)
        if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
      if (r > i) std::swap(line[i], line[r]);
    }
    for (std::size_t len = 2; len <= n_; len <<= 1) {
      const std::size_t stride = n_ / len;
      for (std::size_t start = 0; start < n_; start += len) {
        for (std::size_t k = 0; k < len / 2; ++k) {
          const cplx w = twiddle_[k * stride];
          const cplx a = line[start + k];
          const cplx b = line[start + k + len / 2] * w;
          line[start + k] = a + b;
          line[start + k + len / 2] = a - b;
        }
      }
    }
  }

  std::size_t n_;
  double scale_;
  bool radix2_ = false;
  std::vector<cplx> twiddle_;
  std::vector<cplx> scratch_;
};

template <typename Real>
void check_complex_layout(const Tensor<Real>& t, const char* what) {
  if (t.rank() < 3 || t.dim(t.rank() - 3) != 2)
    throw ShapeError(std::string(what) + " expects a [..., 2, H, W] tensor, got " + to_string(t.shape()));
}

} // namespace

template <typename Real>
void transform2d(std::span<Real> blocks, std::size_t count, std::size_t height, std::size_t width,
                 Direction direction, Algorithm algorithm) {
  const std::size_t plane = height * width;
  if (blocks.size() != count * 2 * plane)
    throw ShapeError("transform2d buffer size does not match count*2*H*W");
  LineTransform rows(width, direction, algorithm);
  LineTransform cols(height, direction, algorithm);
  std::vector<cplx> line(std::max(height, width));
  for (std::size_t b = 0; b < count; ++b) {
    Real* re = blocks.data() + b * 2 * plane;
    Real* im = re + plane;
    for (std::size_t i = 0; i < height; ++i) {
      for (std::size_t j = 0; j < width; ++j) line[j] = cplx(re[i * width + j], im[i * width + j]);
      rows.apply(std::span<cplx>(line.data(), width));
      for (std::size_t j = 0; j < width; ++j) {
        re[i * width + j] = static_cast<Real>(line[j].real());
        im[i * width + j] = static_cast<Real>(line[j].imag());
      }
    }
    for (std::size_t j = 0; j < width; ++j) {
      for (std::size_t i = 0; i < height; ++i) line[i] = cplx(re[i * width + j], im[i * width + j]);
      cols.apply(std::span<cplx>(line.data(), height));
      for (std::size_t i = 0; i < height; ++i) {
        re[i * width + j] = static_cast<Real>(line[i].real());
        im[i * width + j] = static_cast<Real>(line[i].imag());
      }
    }
  }
}

template <typename Real>
Tensor<Real> dft2(const Tensor<Real>& image, Algorithm algorithm) {
  check_complex_layout(image, "dft2");
  Tensor<Real> out = image;
  const std::size_t h = image.dim(image.rank() - 2);
  const std::size_t w = image.dim(image.rank() - 1);
  transform2d(out.data(), image.size() / (2 * h * w), h, w, Direction::Forward, algorithm);
  return out;
}

template <typename Real>
Tensor<Real> idft2(const Tensor<Real>& kspace, Algorithm algorithm) {
  check_complex_layout(kspace, "idft2");
  Tensor<Real> out = kspace;
  const std::size_t h = kspace.dim(kspace.rank() - 2);
  const std::size_t w = kspace.dim(kspace.rank() - 1);
  transform2d(out.data(), kspace.size() / (2 * h * w), h, w, Direction::Inverse, algorithm);
  return out;
}

template <typename Real>
void shift_planes(const Real* in, Real* out, std::size_t count, std::size_t height, std::size_t width,
                  bool inverse) {
  // fftshift sends index i to (i + floor(n/2)) mod n; ifftshift undoes it.
  const std::size_t dh = inverse ? height - height / 2 : height / 2;
  const std::size_t dw = inverse ? width - width / 2 : width / 2;
  const std::size_t plane = height * width;
  for (std::size_t p = 0; p < count; ++p) {
    const Real* src = in + p * plane;
    Real* dst = out + p * plane;
    for (std::size_t i = 0; i < height; ++i) {
      const std::size_t oi = (i + dh) % height;
      for (std::size_t j = 0; j < width; ++j) dst[oi * width + (j + dw) % width] = src[i * width + j];
    }
  }
}

template <typename Real>
Tensor<Real> fftshift(const Tensor<Real>& grid) {
  if (grid.rank() < 2) throw ShapeError("fftshift needs at least 2 axes, got " + to_string(grid.shape()));
  Tensor<Real> out(grid.shape());
  const std::size_t h = grid.dim(grid.rank() - 2);
  const std::size_t w = grid.dim(grid.rank() - 1);
  shift_planes(grid.raw(), out.raw(), grid.size() / (h * w), h, w, false);
  return out;
}

template <typename Real>
Tensor<Real> ifftshift(const Tensor<Real>& grid) {
  if (grid.rank() < 2) throw ShapeError("ifftshift needs at least 2 axes, got " + to_string(grid.shape()));
  Tensor<Real> out(grid.shape());
  const std::size_t h = grid.dim(grid.rank() - 2);
  const std::size_t w = grid.dim(grid.rank() - 1);
  shift_planes(grid.raw(), out.raw(), grid.size() / (h * w), h, w, true);
  return out;
}

#define LOUPE_INSTANTIATE_FOURIER(Real)                                                                     \
  template void transform2d<Real>(std::span<Real>, std::size_t, std::size_t, std::size_t, Direction,       \
                                  Algorithm);                                                               \
  template Tensor<Real> dft2<Real>(const Tensor<Real>&, Algorithm);                                         \
  template Tensor<Real> idft2<Real>(const Tensor<Real>&, Algorithm);                                        \
  template Tensor<Real> fftshift<Real>(const Tensor<Real>&);                                                \
  template Tensor<Real> ifftshift<Real>(const Tensor<Real>&);                                               \
  template void shift_planes<Real>(const Real*, Real*, std::size_t, std::size_t, std::size_t, bool);

LOUPE_INSTANTIATE_FOURIER(float)
LOUPE_INSTANTIATE_FOURIER(double)

} // namespace loupe::fourier
