#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "loupe/autodiff.hpp"
#include "loupe/data.hpp"
#include "loupe/masks.hpp"
#include "loupe/unet.hpp"

namespace loupe {

enum class LossKind { MagnitudeL2, ComplexL2 };

std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& text);

/// Magnitude guard inside sqrt(re^2 + im^2 + eps).
inline constexpr double kMagnitudeEpsilon = 1e-12;

struct TrainConfig {
  double alpha = 0.25;
  double slope_t = 5.0;
  double slope_s = 200.0;
  std::size_t mc_samples = 1;
  double learning_rate = 1e-3;
  /// Step size for the mask logits; the network learning rate when unset.
  std::optional<double> mask_learning_rate;
  /// Partial final batches are dropped.
  std::size_t batch_size = 8;
  std::size_t max_epochs = 20;
  /// Stop after this many epochs without a validation improvement of at
  /// least min_improvement.
  std::size_t patience = 5;
  double min_improvement = 1e-5;
  LossKind loss = LossKind::MagnitudeL2;
  bool line_constrained = false;
  Axis readout = Axis::Rows;
  double mask_init_noise = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  /// Worker threads for validation and inference; results do not depend on it.
  std::size_t threads = 1;
  std::uint64_t seed = 0;
  UNetConfig unet;

  void validate() const;
};

template <typename Real>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t step = 0;
  std::vector<Tensor<Real>> first_moment;
  std::vector<Tensor<Real>> second_moment;
};

/// One bias-corrected Adam step over `params` using their stored gradients.
template <typename Real>
void adam_update(AdamState<Real>& state, const std::vector<Parameter<Real>*>& params, double learning_rate);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  std::size_t stopping_epoch = 0;

  /// epoch,train_loss,val_loss,seconds. With record_time false the seconds
  /// column is written as 0 so identical runs give identical files.
  void write_csv(const std::filesystem::path& path, bool record_time = false) const;
};

/// Differentiable LOUPE pipeline for a fixed batch size. Inputs: "x"
/// [N, 2, H, W] ground truth and "u0".."u{K-1}" [N, 1, H, W] uniform draws.
template <typename Real>
struct LoupeGraph {
  Graph<Real> graph;
  Node x;
  std::vector<Node> uniforms;
  Node probabilities;  // sigmoid_t(O) on the grid
  Node renormalized;   // mean exactly alpha
  std::vector<Node> relaxed_masks;
  std::vector<Node> reconstructions;
  Node loss;
};

template <typename Real>
LoupeGraph<Real> build_loupe_graph(ProbMaskParams<Real>& mask, UNetWeights<Real>& weights, const UNetConfig& unet,
                                   std::size_t batch, LossKind loss, std::size_t mc_samples = 1);

/// Reconstruction pipeline with a given mask. Inputs: "x" [N, 2, H, W] and
/// "mask" [N, 1, H, W] (DC-centered, any values in [0, 1]).
template <typename Real>
struct MaskedGraph {
  Graph<Real> graph;
  Node x;
  Node mask;
  Node zero_filled;
  Node reconstruction;
  Node loss;
};

template <typename Real>
MaskedGraph<Real> build_masked_graph(UNetWeights<Real>& weights, const UNetConfig& unet, std::size_t batch,
                                     std::size_t height, std::size_t width, LossKind loss);

/// Runs the LOUPE pipeline on a batch with the given draws; returns the loss
/// and the reconstruction of the first Monte-Carlo sample.
template <typename Real>
struct LoupeForwardResult {
  Tensor<Real> reconstruction;
  double loss = 0.0;
};

template <typename Real>
LoupeForwardResult<Real> loupe_forward(const Tensor<Real>& x, ProbMaskParams<Real>& mask, UNetWeights<Real>& weights,
                                       const UNetConfig& unet, LossKind loss, const std::vector<Tensor<Real>>& uniforms,
                                       Mode mode = Mode::Train);

/// Draws "u" tensors [N, 1, H, W] for one step.
template <typename Real>
std::vector<Tensor<Real>> draw_uniforms(Rng& rng, std::size_t batch, std::size_t height, std::size_t width,
                                        std::size_t samples);

struct LoupeModel {
  ProbMaskParams<float> mask;
  UNetWeights<float> weights;
  UNetConfig unet;
};

struct LoupeResult {
  LoupeModel model;
  TrainHistory history;
};

struct FixedMaskResult {
  UNetWeights<float> weights;
  TrainHistory history;
};

/// Called after each epoch; returning false stops training early.
using EpochCallback = std::function<bool(const EpochRecord&)>;

/// Joint optimization of mask logits and reconstruction weights on the train
/// split with early stopping on the validation split. Returns the snapshot
/// with the best validation loss.
LoupeResult train_loupe(const VolumeDataset& dataset, const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Same loop with a frozen binary mask; only the network is trained.
FixedMaskResult train_fixed_mask(const VolumeDataset& dataset, const BinaryMask& mask, const TrainConfig& config,
                                 const EpochCallback& on_epoch = {});

/// Renormalized probabilities of a trained mask, [H, W] DC-centered.
Tensor<double> learned_probabilities(const ProbMaskParams<float>& mask);

/// Binary mask from a trained LOUPE model (top-k, line-aware).
BinaryMask binarize_learned(const ProbMaskParams<float>& mask);

/// Eval-mode reconstructions of [S, 2, H, W] slices under a binary mask.
Tensor<float> reconstruct(const Tensor<float>& slices, const BinaryMask& mask, UNetWeights<float>& weights,
                          const UNetConfig& unet, std::size_t threads = 1);

/// Checkpoint helpers: U-Net weights plus, for LOUPE models, the mask logits
/// and slope/sparsity settings.
Checkpoint make_checkpoint(const UNetWeights<float>& weights, const UNetConfig& unet, std::size_t epoch);
Checkpoint make_checkpoint(const LoupeModel& model, std::size_t epoch);
LoupeModel load_loupe_model(const Checkpoint& checkpoint);

} // namespace loupe
