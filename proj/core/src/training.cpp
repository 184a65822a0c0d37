#include "loupe/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <thread>

#include "json.hpp"
#include "loupe/rng.hpp"

namespace loupe {

using json = nlohmann::json;

std::string to_string(LossKind kind) { return kind == LossKind::MagnitudeL2 ? "magnitude-l2" : "complex-l2"; }

LossKind parse_loss_kind(const std::string& text) {
  if (text == "magnitude-l2") return LossKind::MagnitudeL2;
  if (text == "complex-l2") return LossKind::ComplexL2;
  throw DomainError("unknown loss '" + text + "' (expected magnitude-l2 or complex-l2)");
}

void TrainConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in (0, 1)");
  if (!(slope_t > 0.0) || !(slope_s > 0.0)) throw DomainError("slopes t and s must be positive");
  if (mc_samples < 1) throw DomainError("at least one Monte-Carlo sample is required");
  if (!(learning_rate > 0.0)) throw DomainError("learning rate must be positive");
  if (mask_learning_rate && !(*mask_learning_rate > 0.0)) throw DomainError("mask learning rate must be positive");
  if (batch_size < 1) throw DomainError("batch size must be at least 1");
  if (max_epochs < 1) throw DomainError("max_epochs must be at least 1");
  if (patience < 1) throw DomainError("patience must be at least 1");
  if (threads < 1) throw DomainError("threads must be at least 1");
  unet.validate();
}

template <typename Real>
void adam_update(AdamState<Real>& state, const std::vector<Parameter<Real>*>& params, double learning_rate) {
  if (state.first_moment.size() != params.size()) {
    state.first_moment.clear();
    state.second_moment.clear();
    for (auto* p : params) {
      state.first_moment.emplace_back(p->value.shape());
      state.second_moment.emplace_back(p->value.shape());
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.shape() != p.value.shape() || p.gradient.shape() != p.value.shape())
      throw ShapeError("adam: state or gradient shape does not match parameter '" + p.name + "'");
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.gradient[i];
      const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      m[i] = static_cast<Real>(mi);
      v[i] = static_cast<Real>(vi);
      const double update = learning_rate * (mi / c1) / (std::sqrt(vi / c2) + state.epsilon);
      p.value[i] = static_cast<Real>(p.value[i] - update);
    }
  }
}

template void adam_update<float>(AdamState<float>&, const std::vector<Parameter<float>*>&, double);
template void adam_update<double>(AdamState<double>&, const std::vector<Parameter<double>*>&, double);

void TrainHistory::write_csv(const std::filesystem::path& path, bool record_time) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << "epoch,train_loss,val_loss,seconds\n";
  for (const auto& e : epochs) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.3f\n", e.epoch, e.train_loss, e.val_loss,
                  record_time ? e.seconds : 0.0);
    out << buf;
  }
}

namespace {

template <typename Real>
Node reconstruction_loss(Graph<Real>& g, Node recon, Node x, Node x_magnitude, LossKind kind) {
  if (kind == LossKind::MagnitudeL2)
    return g.mean(g.square(g.subtract(g.complex_magnitude(recon, kMagnitudeEpsilon), x_magnitude)));
  return g.mean(g.square(g.subtract(recon, x)));
}

} // namespace

template <typename Real>
LoupeGraph<Real> build_loupe_graph(ProbMaskParams<Real>& mask, UNetWeights<Real>& weights, const UNetConfig& unet,
                                   std::size_t batch, LossKind loss, std::size_t mc_samples) {
  mask.validate();
  if (mc_samples < 1) throw DomainError("at least one Monte-Carlo sample is required");
  const std::size_t h = mask.height, w = mask.width;
  LoupeGraph<Real> lg;
  auto& g = lg.graph;
  lg.x = g.input("x", Shape{batch, 2, h, w}, false);
  g.push_scope("mask");
  Node logits = g.parameter(mask.logits);
  if (mask.line_constrained) logits = g.expand_line(logits, h, w, mask.readout);
  lg.probabilities = g.sigmoid(logits, mask.slope_t);
  lg.renormalized = g.renormalize(lg.probabilities, mask.alpha);
  g.pop_scope();
  const Node kspace = g.dft2(lg.x);
  const Node x_mag = g.complex_magnitude(lg.x, kMagnitudeEpsilon);
  std::vector<Node> losses;
  for (std::size_t k = 0; k < mc_samples; ++k) {
    g.push_scope("sample" + std::to_string(k));
    const Node u = g.input("u" + std::to_string(k), Shape{batch, 1, h, w}, false);
    lg.uniforms.push_back(u);
    const Node relaxed = g.sigmoid(g.subtract(lg.renormalized, u), mask.slope_s);
    lg.relaxed_masks.push_back(relaxed);
    const Node zero_filled = g.idft2(g.multiply(kspace, g.ifftshift(relaxed)));
    g.pop_scope();
    const Node recon = unet_forward(g, weights, unet, zero_filled);
    lg.reconstructions.push_back(recon);
    losses.push_back(reconstruction_loss(g, recon, lg.x, x_mag, loss));
  }
  Node total = losses.front();
  for (std::size_t k = 1; k < losses.size(); ++k) total = g.add(total, losses[k]);
  lg.loss = mc_samples == 1 ? total : g.scale(total, 1.0 / static_cast<double>(mc_samples));
  return lg;
}

template <typename Real>
MaskedGraph<Real> build_masked_graph(UNetWeights<Real>& weights, const UNetConfig& unet, std::size_t batch,
                                     std::size_t height, std::size_t width, LossKind loss) {
  MaskedGraph<Real> mg;
  auto& g = mg.graph;
  mg.x = g.input("x", Shape{batch, 2, height, width}, false);
  mg.mask = g.input("mask", Shape{batch, 1, height, width}, false);
  mg.zero_filled = g.idft2(g.multiply(g.dft2(mg.x), g.ifftshift(mg.mask)));
  mg.reconstruction = unet_forward(g, weights, unet, mg.zero_filled);
  mg.loss = reconstruction_loss(g, mg.reconstruction, mg.x, g.complex_magnitude(mg.x, kMagnitudeEpsilon), loss);
  return mg;
}

template <typename Real>
std::vector<Tensor<Real>> draw_uniforms(Rng& rng, std::size_t batch, std::size_t height, std::size_t width,
                                        std::size_t samples) {
  std::vector<Tensor<Real>> out;
  for (std::size_t k = 0; k < samples; ++k) {
    Tensor<Real> u(Shape{batch, 1, height, width});
    for (auto& v : u.data()) v = static_cast<Real>(rng.uniform());
    out.push_back(std::move(u));
  }
  return out;
}

template <typename Real>
LoupeForwardResult<Real> loupe_forward(const Tensor<Real>& x, ProbMaskParams<Real>& mask, UNetWeights<Real>& weights,
                                       const UNetConfig& unet, LossKind loss, const std::vector<Tensor<Real>>& uniforms,
                                       Mode mode) {
  if (x.rank() != 4 || x.dim(1) != 2) throw ShapeError("loupe_forward expects x of shape [N, 2, H, W]");
  if (x.dim(2) != mask.height || x.dim(3) != mask.width)
    throw ShapeError("image grid " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                     " does not match mask grid " + std::to_string(mask.height) + "x" + std::to_string(mask.width));
  auto lg = build_loupe_graph(mask, weights, unet, x.dim(0), loss, uniforms.size());
  Bindings<Real> in{{"x", x}};
  for (std::size_t k = 0; k < uniforms.size(); ++k) in.emplace("u" + std::to_string(k), uniforms[k]);
  lg.graph.evaluate(in, mode);
  return {lg.graph.value(lg.reconstructions.front()), static_cast<double>(lg.graph.value(lg.loss)[0])};
}

#define LOUPE_INSTANTIATE_TRAINING(Real)                                                                          \
  template LoupeGraph<Real> build_loupe_graph<Real>(ProbMaskParams<Real>&, UNetWeights<Real>&, const UNetConfig&, \
                                                    std::size_t, LossKind, std::size_t);                          \
  template MaskedGraph<Real> build_masked_graph<Real>(UNetWeights<Real>&, const UNetConfig&, std::size_t,         \
                                                      std::size_t, std::size_t, LossKind);                        \
  template std::vector<Tensor<Real>> draw_uniforms<Real>(Rng&, std::size_t, std::size_t, std::size_t, std::size_t); \
  template LoupeForwardResult<Real> loupe_forward<Real>(const Tensor<Real>&, ProbMaskParams<Real>&,                \
                                                        UNetWeights<Real>&, const UNetConfig&, LossKind,          \
                                                        const std::vector<Tensor<Real>>&, Mode);

LOUPE_INSTANTIATE_TRAINING(float)
LOUPE_INSTANTIATE_TRAINING(double)

namespace {

Tensor<float> gather(const Tensor<float>& slices, std::span<const std::size_t> indices) {
  const std::size_t per = slices.size() / slices.dim(0);
  Tensor<float> out(Shape{indices.size(), slices.dim(1), slices.dim(2), slices.dim(3)});
  for (std::size_t b = 0; b < indices.size(); ++b)
    std::copy_n(slices.raw() + indices[b] * per, per, out.raw() + b * per);
  return out;
}

Tensor<float> slice_range(const Tensor<float>& slices, std::size_t begin, std::size_t count) {
  const std::size_t per = slices.size() / slices.dim(0);
  Tensor<float> out(Shape{count, slices.dim(1), slices.dim(2), slices.dim(3)});
  std::copy_n(slices.raw() + begin * per, count * per, out.raw());
  return out;
}

/// Broadcasts a DC-centered [H, W] mask to [N, 1, H, W].
Tensor<float> tile_mask(const Tensor<double>& mask, std::size_t batch) {
  const std::size_t plane = mask.size();
  Tensor<float> out(Shape{batch, 1, mask.dim(0), mask.dim(1)});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < plane; ++i) out[b * plane + i] = static_cast<float>(mask[i]);
  return out;
}

/// Splits `total` slices into chunks of at most `chunk`, evaluates them on
/// `threads` workers with per-worker state, and returns per-chunk results in
/// chunk order, so the outcome does not depend on the thread count.
template <typename Worker, typename Result>
std::vector<Result> parallel_chunks(std::size_t total, std::size_t chunk, std::size_t threads,
                                    const std::function<Worker()>& make_worker,
                                    const std::function<Result(Worker&, std::size_t, std::size_t)>& run) {
  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  for (std::size_t b = 0; b < total; b += chunk) chunks.emplace_back(b, std::min(chunk, total - b));
  std::vector<Result> results(chunks.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, chunks.size()));
  std::vector<std::exception_ptr> errors(workers);
  auto body = [&](std::size_t t) {
    try {
      Worker worker = make_worker();
      for (std::size_t c = t; c < chunks.size(); c += workers) results[c] = run(worker, chunks[c].first, chunks[c].second);
    } catch (...) {
      errors[t] = std::current_exception();
    }
  };
  if (workers == 1) {
    body(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(body, t);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

/// Per-worker cache of graphs keyed by batch size.
template <typename G>
struct GraphCache {
  std::map<std::size_t, G> graphs;
};

class Task {
public:
  virtual ~Task() = default;
  virtual double train_step(const Tensor<float>& batch, Rng& rng) = 0;
  virtual double validation_loss(const Tensor<float>& slices, std::size_t batch, std::size_t threads) = 0;
  virtual std::vector<Parameter<float>*> trainable() = 0;
  /// Mask logits, updated with their own learning rate; null for fixed masks.
  virtual Parameter<float>* mask_logits() { return nullptr; }
  virtual std::vector<Parameter<float>*> state() = 0;
};

double weighted_mean(const std::vector<std::pair<double, std::size_t>>& parts) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& [loss, count] : parts) {
    acc += loss * static_cast<double>(count);
    n += count;
  }
  return acc / static_cast<double>(n);
}

class LoupeTask final : public Task {
public:
  LoupeTask(LoupeModel& model, const TrainConfig& config, std::uint64_t val_seed)
      : model_(model), config_(config), val_seed_(val_seed) {}

  double train_step(const Tensor<float>& batch, Rng& rng) override {
    auto& lg = train_graph(batch.dim(0));
    Bindings<float> in{{"x", batch}};
    auto draws = draw_uniforms<float>(rng, batch.dim(0), model_.mask.height, model_.mask.width, config_.mc_samples);
    for (std::size_t k = 0; k < draws.size(); ++k) in.emplace("u" + std::to_string(k), std::move(draws[k]));
    lg.graph.evaluate(in, Mode::Train);
    lg.graph.backpropagate(lg.loss, Tensor<float>::scalar(1.0f));
    return lg.graph.value(lg.loss)[0];
  }

  double validation_loss(const Tensor<float>& slices, std::size_t batch, std::size_t threads) override {
    // Fixed draws make validation losses comparable across epochs.
    Rng rng(val_seed_);
    const std::size_t n = slices.dim(0), h = model_.mask.height, w = model_.mask.width;
    std::vector<Tensor<float>> draws = draw_uniforms<float>(rng, n, h, w, config_.mc_samples);
    using Cache = GraphCache<LoupeGraph<float>>;
    auto parts = parallel_chunks<Cache, std::pair<double, std::size_t>>(
        n, batch, threads, [] { return Cache{}; },
        [&](Cache& cache, std::size_t begin, std::size_t count) {
          auto it = cache.graphs.find(count);
          if (it == cache.graphs.end())
            it = cache.graphs.emplace(count, build_loupe_graph(model_.mask, model_.weights, model_.unet, count,
                                                               config_.loss, config_.mc_samples)).first;
          Bindings<float> in{{"x", slice_range(slices, begin, count)}};
          for (std::size_t k = 0; k < draws.size(); ++k)
            in.emplace("u" + std::to_string(k), slice_range(draws[k], begin, count));
          it->second.graph.evaluate(in, Mode::Eval);
          return std::make_pair(static_cast<double>(it->second.graph.value(it->second.loss)[0]), count);
        });
    return weighted_mean(parts);
  }

  std::vector<Parameter<float>*> trainable() override { return model_.weights.trainable(); }
  Parameter<float>* mask_logits() override { return &model_.mask.logits; }

  std::vector<Parameter<float>*> state() override {
    std::vector<Parameter<float>*> out{&model_.mask.logits};
    for (auto& p : model_.weights.params) out.push_back(&p);
    return out;
  }

private:
  LoupeGraph<float>& train_graph(std::size_t batch) {
    auto it = train_.graphs.find(batch);
    if (it == train_.graphs.end())
      it = train_.graphs.emplace(batch, build_loupe_graph(model_.mask, model_.weights, model_.unet, batch, config_.loss,
                                                          config_.mc_samples)).first;
    return it->second;
  }

  LoupeModel& model_;
  const TrainConfig& config_;
  std::uint64_t val_seed_;
  GraphCache<LoupeGraph<float>> train_;
};

class FixedMaskTask final : public Task {
public:
  FixedMaskTask(UNetWeights<float>& weights, const BinaryMask& mask, const TrainConfig& config)
      : weights_(weights), mask_(mask), config_(config) {}

  double train_step(const Tensor<float>& batch, Rng&) override {
    auto& mg = graph(train_, batch.dim(0));
    mg.graph.evaluate({{"x", batch}, {"mask", tile_mask(mask_.values, batch.dim(0))}}, Mode::Train);
    mg.graph.backpropagate(mg.loss, Tensor<float>::scalar(1.0f));
    return mg.graph.value(mg.loss)[0];
  }

  double validation_loss(const Tensor<float>& slices, std::size_t batch, std::size_t threads) override {
    using Cache = GraphCache<MaskedGraph<float>>;
    auto parts = parallel_chunks<Cache, std::pair<double, std::size_t>>(
        slices.dim(0), batch, threads, [] { return Cache{}; },
        [&](Cache& cache, std::size_t begin, std::size_t count) {
          auto& mg = graph(cache, count);
          mg.graph.evaluate({{"x", slice_range(slices, begin, count)}, {"mask", tile_mask(mask_.values, count)}},
                            Mode::Eval);
          return std::make_pair(static_cast<double>(mg.graph.value(mg.loss)[0]), count);
        });
    return weighted_mean(parts);
  }

  std::vector<Parameter<float>*> trainable() override { return weights_.trainable(); }

  std::vector<Parameter<float>*> state() override {
    std::vector<Parameter<float>*> out;
    for (auto& p : weights_.params) out.push_back(&p);
    return out;
  }

private:
  MaskedGraph<float>& graph(GraphCache<MaskedGraph<float>>& cache, std::size_t batch) {
    auto it = cache.graphs.find(batch);
    if (it == cache.graphs.end())
      it = cache.graphs.emplace(batch, build_masked_graph(weights_, config_.unet, batch, mask_.height(), mask_.width(),
                                                          config_.loss)).first;
    return it->second;
  }

  UNetWeights<float>& weights_;
  const BinaryMask& mask_;
  const TrainConfig& config_;
  GraphCache<MaskedGraph<float>> train_;
};

TrainHistory run_training(Task& task, const VolumeDataset& dataset, const TrainConfig& config, Rng& shuffle_rng,
                          const EpochCallback& on_epoch) {
  const Tensor<float> train = dataset.stack(Split::Train);
  const Tensor<float> val = dataset.stack(Split::Validation);
  const std::size_t n = train.dim(0);
  const std::size_t batch = std::min(config.batch_size, n);
  const std::size_t steps = n / batch;

  AdamState<float> adam;
  adam.beta1 = config.adam_beta1;
  adam.beta2 = config.adam_beta2;
  adam.epsilon = config.adam_epsilon;
  AdamState<float> mask_adam = adam;
  const auto trainable = task.trainable();
  Parameter<float>* logits = task.mask_logits();
  const double mask_lr = config.mask_learning_rate.value_or(config.learning_rate);
  const auto state = task.state();

  TrainHistory history;
  double best = std::numeric_limits<double>::infinity();
  std::vector<Tensor<float>> snapshot;
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto order = shuffle_rng.permutation(n);
    double total = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      const Tensor<float> x = gather(train, std::span<const std::size_t>(order).subspan(s * batch, batch));
      total += task.train_step(x, shuffle_rng);
      adam_update(adam, trainable, config.learning_rate);
      if (logits) adam_update(mask_adam, {logits}, mask_lr);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(steps);
    rec.val_loss = task.validation_loss(val, batch, config.threads);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    history.epochs.push_back(rec);
    history.stopping_epoch = epoch;
    if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.val_loss))
      throw Error("training diverged at epoch " + std::to_string(epoch) + " (non-finite loss)");
    if (rec.val_loss < best - config.min_improvement || snapshot.empty()) {
      best = std::min(best, rec.val_loss);
      history.best_epoch = epoch;
      snapshot.clear();
      for (auto* p : state) snapshot.push_back(p->value);
      stale = 0;
    } else {
      ++stale;
    }
    const bool keep_going = !on_epoch || on_epoch(rec);
    if (!keep_going || stale >= config.patience) break;
  }
  for (std::size_t k = 0; k < state.size(); ++k) state[k]->value = snapshot[k];
  return history;
}

void require_splits(const VolumeDataset& dataset) {
  if (dataset.slice_count(Split::Train) == 0) throw DataError("training split is empty");
  if (dataset.slice_count(Split::Validation) == 0) throw DataError("validation split is empty");
}

} // namespace

LoupeResult train_loupe(const VolumeDataset& dataset, const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  require_splits(dataset);
  const std::size_t h = dataset.height(), w = dataset.width();
  config.unet.check_input(h, w);
  Rng master(config.seed);
  Rng init_rng(master.fork());
  Rng shuffle_rng(master.fork());
  const std::uint64_t val_seed = master.fork();

  LoupeResult result;
  auto& model = result.model;
  model.unet = config.unet;
  model.mask = init_prob_mask<float>(h, w, config.alpha, config.slope_t, config.slope_s, config.line_constrained,
                                     config.readout, init_rng, config.mask_init_noise);
  model.weights = init_unet<float>(config.unet);
  LoupeTask task(model, config, val_seed);
  result.history = run_training(task, dataset, config, shuffle_rng, on_epoch);
  return result;
}

FixedMaskResult train_fixed_mask(const VolumeDataset& dataset, const BinaryMask& mask, const TrainConfig& config,
                                 const EpochCallback& on_epoch) {
  config.validate();
  require_splits(dataset);
  const std::size_t h = dataset.height(), w = dataset.width();
  if (mask.height() != h || mask.width() != w)
    throw ShapeError("mask grid " + std::to_string(mask.height()) + "x" + std::to_string(mask.width()) +
                     " does not match image grid " + std::to_string(h) + "x" + std::to_string(w));
  config.unet.check_input(h, w);
  Rng master(config.seed);
  master.fork(); // keep the shuffle stream aligned with train_loupe
  Rng shuffle_rng(master.fork());

  FixedMaskResult result;
  result.weights = init_unet<float>(config.unet);
  FixedMaskTask task(result.weights, mask, config);
  result.history = run_training(task, dataset, config, shuffle_rng, on_epoch);
  return result;
}

Tensor<double> learned_probabilities(const ProbMaskParams<float>& mask) {
  return renormalize(probabilities(mask), mask.alpha);
}

BinaryMask binarize_learned(const ProbMaskParams<float>& mask) {
  const Tensor<double> p = learned_probabilities(mask);
  return mask.line_constrained ? binarize_lines(p, mask.alpha, mask.readout)
                               : binarize(p, mask.alpha, BinarizeMode::TopK);
}

Tensor<float> reconstruct(const Tensor<float>& slices, const BinaryMask& mask, UNetWeights<float>& weights,
                          const UNetConfig& unet, std::size_t threads) {
  if (slices.rank() != 4 || slices.dim(1) != 2) throw ShapeError("reconstruct expects [S, 2, H, W] slices");
  const std::size_t h = slices.dim(2), w = slices.dim(3);
  if (mask.height() != h || mask.width() != w) throw ShapeError("mask grid does not match the slices");
  constexpr std::size_t kChunk = 8;
  using Cache = GraphCache<MaskedGraph<float>>;
  auto parts = parallel_chunks<Cache, Tensor<float>>(
      slices.dim(0), kChunk, threads, [] { return Cache{}; },
      [&](Cache& cache, std::size_t begin, std::size_t count) {
        auto it = cache.graphs.find(count);
        if (it == cache.graphs.end())
          it = cache.graphs.emplace(count, build_masked_graph(weights, unet, count, h, w, LossKind::MagnitudeL2)).first;
        auto& mg = it->second;
        mg.graph.evaluate({{"x", slice_range(slices, begin, count)}, {"mask", tile_mask(mask.values, count)}}, Mode::Eval);
        return mg.graph.value(mg.reconstruction);
      });
  Tensor<float> out(slices.shape());
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.raw() + offset);
    offset += p.size();
  }
  return out;
}

Checkpoint make_checkpoint(const UNetWeights<float>& weights, const UNetConfig& unet, std::size_t epoch) {
  Checkpoint cp;
  cp.config = unet;
  cp.epoch = epoch;
  cp.tensors = weights.params;
  return cp;
}

Checkpoint make_checkpoint(const LoupeModel& model, std::size_t epoch) {
  Checkpoint cp = make_checkpoint(model.weights, model.unet, epoch);
  cp.tensors.push_back(model.mask.logits);
  const auto& m = model.mask;
  cp.metadata = json{{"mask",
                      {{"height", m.height},
                       {"width", m.width},
                       {"slope_t", m.slope_t},
                       {"slope_s", m.slope_s},
                       {"alpha", m.alpha},
                       {"line_constrained", m.line_constrained},
                       {"readout", m.readout == Axis::Rows ? "rows" : "columns"}}}}
                    .dump();
  return cp;
}

LoupeModel load_loupe_model(const Checkpoint& checkpoint) {
  LoupeModel model;
  model.unet = checkpoint.config;
  model.weights = init_unet<float>(checkpoint.config);
  restore_weights(checkpoint, model.weights);
  const json meta = json::parse(checkpoint.metadata);
  if (!meta.contains("mask")) throw DataError("checkpoint does not contain a learned mask");
  const auto& m = meta.at("mask");
  const auto* logits = checkpoint.find("mask.logits");
  if (!logits) throw DataError("checkpoint lacks tensor 'mask.logits'");
  try {
    model.mask.height = m.at("height").get<std::size_t>();
    model.mask.width = m.at("width").get<std::size_t>();
    model.mask.slope_t = m.at("slope_t").get<double>();
    model.mask.slope_s = m.at("slope_s").get<double>();
    model.mask.alpha = m.at("alpha").get<double>();
    model.mask.line_constrained = m.at("line_constrained").get<bool>();
    model.mask.readout = m.at("readout").get<std::string>() == "rows" ? Axis::Rows : Axis::Columns;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed mask metadata in checkpoint: ") + e.what());
  }
  model.mask.logits = *logits;
  model.mask.validate();
  return model;
}

} // namespace loupe
