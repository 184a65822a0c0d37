#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "loupe/autodiff.hpp"

namespace loupe {

struct UNetConfig {
  /// Number of pooling stages.
  std::size_t depth = 4;
  /// Channels of the first stage; doubled after every pooling.
  std::size_t base_channels = 16;
  double negative_slope = 0.01;
  /// Output = input + network(input).
  bool residual = true;
  /// Multiplier on the output convolution's initial scale. Small values
  /// start the residual network near the identity map.
  double output_gain = 0.1;
  std::uint64_t seed = 0;
  BatchNormOptions batch_norm;

  void validate() const;
  /// Throws ShapeError unless both sizes are divisible by 2^depth.
  void check_input(std::size_t height, std::size_t width) const;
};

/// Ordered weights of one U-Net: conv kernels and biases, batch-norm affine
/// terms (trainable) and running statistics (buffers).
template <typename Real>
struct UNetWeights {
  std::vector<Parameter<Real>> params;

  Parameter<Real>& get(const std::string& name);
  const Parameter<Real>& get(const std::string& name) const;
  std::vector<Parameter<Real>*> trainable();
  std::size_t trainable_count() const;
  void set_all(Real value);

  template <typename Other>
  UNetWeights<Other> cast() const {
    UNetWeights<Other> out;
    out.params.reserve(params.size());
    for (const auto& p : params) out.params.emplace_back(p.name, p.value.template cast<Other>(), p.trainable);
    return out;
  }
};

/// Seeded initialization: conv kernels uniform with standard deviation
/// sqrt(2 / fan_in), zero biases, unit batch-norm scale, zero shift.
template <typename Real>
UNetWeights<Real> init_unet(const UNetConfig& config);

/// Appends the network to `graph`, mapping a [N, 2, H, W] complex image to a
/// [N, 2, H, W] reconstruction. Encoder stages are (conv3x3, leaky ReLU,
/// batch norm) x2 followed by 2x2 average pooling; the decoder upsamples,
/// concatenates the matching skip and mirrors the encoder.
template <typename Real>
Node unet_forward(Graph<Real>& graph, UNetWeights<Real>& weights, const UNetConfig& config, Node input);

/// Closed-form trainable parameter count for a two-channel U-Net.
std::size_t unet_parameter_count(const UNetConfig& config);

/// Named float32 tensors with a JSON manifest. The payload file holds the
/// little-endian tensors concatenated in manifest order.
struct Checkpoint {
  UNetConfig config;
  std::size_t epoch = 0;
  /// JSON object text for anything else worth recording (mask settings).
  std::string metadata = "{}";
  std::vector<Parameter<float>> tensors;

  const Parameter<float>* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& manifest_path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& manifest_path);

/// Copies every weight of `weights` from the checkpoint (by name).
template <typename Real>
void restore_weights(const Checkpoint& checkpoint, UNetWeights<Real>& weights);

} // namespace loupe
