#pragma once

#include <cstddef>
#include <span>

#include "loupe/tensor.hpp"

/// Orthonormal 2D DFT over complex images stored as paired real/imaginary
/// planes: a tensor of shape [..., 2, H, W]. Both directions scale by
/// 1/sqrt(H*W), so the forward transform is unitary and its adjoint is the
/// inverse transform.
namespace loupe::fourier {

enum class Direction { Forward, Inverse };

/// Direct evaluation is O(n^2) per line; radix-2 is used for power-of-two
/// lengths above 64 when Auto is selected.
enum class Algorithm { Auto, Direct, Radix2 };

inline constexpr std::size_t kDirectMaxLength = 64;

/// Transforms `count` complex images laid out as consecutive [2, H, W]
/// blocks, in place.
template <typename Real>
void transform2d(std::span<Real> blocks, std::size_t count, std::size_t height, std::size_t width,
                 Direction direction, Algorithm algorithm = Algorithm::Auto);

/// Forward transform of a [..., 2, H, W] tensor.
template <typename Real>
Tensor<Real> dft2(const Tensor<Real>& image, Algorithm algorithm = Algorithm::Auto);

/// Inverse transform of a [..., 2, H, W] tensor.
template <typename Real>
Tensor<Real> idft2(const Tensor<Real>& kspace, Algorithm algorithm = Algorithm::Auto);

/// Circular shift of the trailing two axes by (floor(H/2), floor(W/2)):
/// moves the DC sample from (0, 0) to the grid center.
template <typename Real>
Tensor<Real> fftshift(const Tensor<Real>& grid);

/// Inverse of fftshift for every H, W including odd sizes.
template <typename Real>
Tensor<Real> ifftshift(const Tensor<Real>& grid);

/// Raw-buffer variants used by the graph engine: shifts `count` consecutive
/// H x W planes from `in` into `out`.
template <typename Real>
void shift_planes(const Real* in, Real* out, std::size_t count, std::size_t height, std::size_t width,
                  bool inverse);

} // namespace loupe::fourier
