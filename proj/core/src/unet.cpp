#include "loupe/unet.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "loupe/rng.hpp"

namespace loupe {

using json = nlohmann::json;

void UNetConfig::validate() const {
  if (depth < 1) throw DomainError("U-Net depth must be at least 1");
  if (base_channels < 1) throw DomainError("U-Net base channel count must be at least 1");
  if (negative_slope < 0.0) throw DomainError("leaky ReLU slope must be non-negative");
  if (!(output_gain >= 0.0)) throw DomainError("output gain must be non-negative");
}

void UNetConfig::check_input(std::size_t height, std::size_t width) const {
  const std::size_t factor = std::size_t{1} << depth;
  if (height % factor || width % factor)
    throw ShapeError("U-Net of depth " + std::to_string(depth) + " needs spatial sizes divisible by " +
                     std::to_string(factor) + ", got " + std::to_string(height) + "x" + std::to_string(width) +
                     "; pad or center-crop the images first");
}

template <typename Real>
Parameter<Real>& UNetWeights<Real>::get(const std::string& name) {
  for (auto& p : params)
    if (p.name == name) return p;
  throw Error("U-Net has no weight named '" + name + "'");
}

template <typename Real>
const Parameter<Real>& UNetWeights<Real>::get(const std::string& name) const {
  for (const auto& p : params)
    if (p.name == name) return p;
  throw Error("U-Net has no weight named '" + name + "'");
}

template <typename Real>
std::vector<Parameter<Real>*> UNetWeights<Real>::trainable() {
  std::vector<Parameter<Real>*> out;
  for (auto& p : params)
    if (p.trainable) out.push_back(&p);
  return out;
}

template <typename Real>
std::size_t UNetWeights<Real>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params)
    if (p.trainable) n += p.value.size();
  return n;
}

template <typename Real>
void UNetWeights<Real>::set_all(Real value) {
  for (auto& p : params)
    if (p.trainable) p.value.fill(value);
}

namespace {

std::size_t stage_channels(const UNetConfig& c, std::size_t level) { return c.base_channels << level; }

/// Visits every convolution block of the topology in construction order:
/// (prefix, input channels, output channels).
template <typename F>
void for_each_block(const UNetConfig& c, F&& f) {
  std::size_t in = 2;
  for (std::size_t l = 0; l < c.depth; ++l) {
    f("enc" + std::to_string(l), in, stage_channels(c, l));
    in = stage_channels(c, l);
  }
  f(std::string("bottleneck"), in, stage_channels(c, c.depth));
  for (std::size_t l = c.depth; l-- > 0;)
    f("dec" + std::to_string(l), stage_channels(c, l + 1) + stage_channels(c, l), stage_channels(c, l));
}

template <typename Real>
void add_conv(UNetWeights<Real>& w, Rng& rng, const std::string& name, std::size_t in, std::size_t out,
              double gain = 1.0) {
  const double fan_in = static_cast<double>(in * 9);
  const double bound = gain * std::sqrt(3.0) * std::sqrt(2.0 / fan_in);
  Tensor<Real> kernel(Shape{out, in, 3, 3});
  for (auto& v : kernel.data()) v = static_cast<Real>(rng.uniform(-bound, bound));
  w.params.emplace_back(name + ".weight", std::move(kernel));
  w.params.emplace_back(name + ".bias", Tensor<Real>(Shape{out}));
}

template <typename Real>
void add_bn(UNetWeights<Real>& w, const std::string& name, std::size_t channels) {
  w.params.emplace_back(name + ".gamma", Tensor<Real>(Shape{channels}, Real{1}));
  w.params.emplace_back(name + ".beta", Tensor<Real>(Shape{channels}));
  w.params.emplace_back(name + ".running_mean", Tensor<Real>(Shape{channels}), false);
  w.params.emplace_back(name + ".running_var", Tensor<Real>(Shape{channels}, Real{1}), false);
}

template <typename Real>
Node conv_block(Graph<Real>& g, UNetWeights<Real>& w, const UNetConfig& c, const std::string& prefix, Node x) {
  g.push_scope(prefix);
  for (int k = 1; k <= 2; ++k) {
    const std::string conv = prefix + ".conv" + std::to_string(k);
    const std::string bn = prefix + ".bn" + std::to_string(k);
    x = g.conv2d(x, g.parameter(w.get(conv + ".weight")), g.parameter(w.get(conv + ".bias")));
    x = g.leaky_relu(x, c.negative_slope);
    x = g.batch_norm(x, g.parameter(w.get(bn + ".gamma")), g.parameter(w.get(bn + ".beta")),
                     w.get(bn + ".running_mean"), w.get(bn + ".running_var"), c.batch_norm);
  }
  g.pop_scope();
  return x;
}

} // namespace

template <typename Real>
UNetWeights<Real> init_unet(const UNetConfig& config) {
  config.validate();
  Rng rng(config.seed);
  UNetWeights<Real> w;
  for_each_block(config, [&](const std::string& prefix, std::size_t in, std::size_t out) {
    add_conv(w, rng, prefix + ".conv1", in, out);
    add_bn(w, prefix + ".bn1", out);
    add_conv(w, rng, prefix + ".conv2", out, out);
    add_bn(w, prefix + ".bn2", out);
  });
  add_conv(w, rng, "out", config.base_channels, 2, config.output_gain);
  return w;
}

template <typename Real>
Node unet_forward(Graph<Real>& graph, UNetWeights<Real>& weights, const UNetConfig& config, Node input) {
  config.validate();
  const Shape& s = graph.shape(input);
  if (s.size() != 4 || s[1] != 2) throw ShapeError("U-Net input must be [N, 2, H, W], got " + to_string(s));
  config.check_input(s[2], s[3]);

  std::vector<Node> skips;
  Node x = input;
  for (std::size_t l = 0; l < config.depth; ++l) {
    x = conv_block(graph, weights, config, "enc" + std::to_string(l), x);
    skips.push_back(x);
    x = graph.avg_pool2(x);
  }
  x = conv_block(graph, weights, config, "bottleneck", x);
  for (std::size_t l = config.depth; l-- > 0;) {
    x = graph.concat(graph.upsample2(x), skips[l]);
    x = conv_block(graph, weights, config, "dec" + std::to_string(l), x);
  }
  graph.push_scope("out");
  x = graph.conv2d(x, graph.parameter(weights.get("out.weight")), graph.parameter(weights.get("out.bias")));
  if (config.residual) x = graph.add(input, x);
  graph.pop_scope();
  return x;
}

std::size_t unet_parameter_count(const UNetConfig& config) {
  config.validate();
  std::size_t total = 0;
  auto conv = [](std::size_t in, std::size_t out) { return 9 * in * out + out; };
  for_each_block(config, [&](const std::string&, std::size_t in, std::size_t out) {
    total += conv(in, out) + conv(out, out) + 4 * out;
  });
  return total + conv(config.base_channels, 2);
}

template struct UNetWeights<float>;
template struct UNetWeights<double>;
template UNetWeights<float> init_unet<float>(const UNetConfig&);
template UNetWeights<double> init_unet<double>(const UNetConfig&);
template Node unet_forward<float>(Graph<float>&, UNetWeights<float>&, const UNetConfig&, Node);
template Node unet_forward<double>(Graph<double>&, UNetWeights<double>&, const UNetConfig&, Node);

const Parameter<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

namespace {

json config_to_json(const UNetConfig& c) {
  return {{"depth", c.depth},
          {"base_channels", c.base_channels},
          {"negative_slope", c.negative_slope},
          {"residual", c.residual},
          {"output_gain", c.output_gain},
          {"seed", c.seed},
          {"batch_norm_epsilon", c.batch_norm.epsilon},
          {"batch_norm_momentum", c.batch_norm.momentum}};
}

UNetConfig config_from_json(const json& j) {
  UNetConfig c;
  c.depth = j.at("depth").get<std::size_t>();
  c.base_channels = j.at("base_channels").get<std::size_t>();
  c.negative_slope = j.at("negative_slope").get<double>();
  c.residual = j.at("residual").get<bool>();
  c.output_gain = j.at("output_gain").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.batch_norm.epsilon = j.at("batch_norm_epsilon").get<double>();
  c.batch_norm.momentum = j.at("batch_norm_momentum").get<double>();
  return c;
}

} // namespace

void save_checkpoint(const std::filesystem::path& manifest_path, const Checkpoint& checkpoint) {
  auto payload = manifest_path;
  payload.replace_extension(".f32");
  json manifest = {{"format", "loupe-checkpoint"},
                   {"config", config_to_json(checkpoint.config)},
                   {"seed", checkpoint.config.seed},
                   {"epoch", checkpoint.epoch},
                   {"dtype", "f32le"},
                   {"data_file", payload.filename().string()},
                   {"tensors", json::array()}};
  try {
    manifest["metadata"] = json::parse(checkpoint.metadata);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  std::vector<unsigned char> bytes;
  for (const auto& t : checkpoint.tensors) {
    manifest["tensors"].push_back({{"name", t.name}, {"shape", t.value.shape()}, {"trainable", t.trainable}});
    for (float v : t.value.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<unsigned char>(bits >> (8 * b)));
    }
  }
  {
    std::ofstream out(manifest_path);
    if (!out) throw DataError("cannot open '" + manifest_path.string() + "' for writing");
    out << manifest.dump(2) << "\n";
  }
  std::ofstream out(payload, std::ios::binary);
  if (!out) throw DataError("cannot open '" + payload.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open checkpoint '" + manifest_path.string() + "'");
  Checkpoint cp;
  try {
    const json manifest = json::parse(in);
    if (manifest.at("format").get<std::string>() != "loupe-checkpoint")
      throw DataError("'" + manifest_path.string() + "' is not a loupe checkpoint");
    if (manifest.at("dtype").get<std::string>() != "f32le")
      throw DataError("unsupported checkpoint dtype in '" + manifest_path.string() + "'");
    cp.config = config_from_json(manifest.at("config"));
    cp.epoch = manifest.at("epoch").get<std::size_t>();
    cp.metadata = manifest.value("metadata", json::object()).dump();
    const auto payload = manifest_path.parent_path() / manifest.at("data_file").get<std::string>();
    std::ifstream data(payload, std::ios::binary | std::ios::ate);
    if (!data) throw DataError("cannot open checkpoint payload '" + payload.string() + "'");
    const auto actual = static_cast<std::size_t>(data.tellg());
    std::size_t expected = 0;
    for (const auto& t : manifest.at("tensors")) expected += numel(t.at("shape").get<Shape>()) * 4;
    if (actual != expected)
      throw DataError("checkpoint payload '" + payload.string() + "' has " + std::to_string(actual) +
                      " bytes, expected " + std::to_string(expected));
    data.seekg(0);
    std::vector<unsigned char> bytes(actual);
    data.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(actual));
    std::size_t offset = 0;
    for (const auto& t : manifest.at("tensors")) {
      const Shape shape = t.at("shape").get<Shape>();
      std::vector<float> values(numel(shape));
      for (auto& v : values) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[offset++]) << (8 * b);
        std::memcpy(&v, &bits, 4);
      }
      cp.tensors.emplace_back(t.at("name").get<std::string>(), Tensor<float>(shape, std::move(values)),
                              t.value("trainable", true));
    }
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint '" + manifest_path.string() + "': " + e.what());
  }
  return cp;
}

template <typename Real>
void restore_weights(const Checkpoint& checkpoint, UNetWeights<Real>& weights) {
  for (auto& p : weights.params) {
    const auto* t = checkpoint.find(p.name);
    if (!t) throw DataError("checkpoint lacks weight '" + p.name + "'");
    if (t->value.shape() != p.value.shape())
      throw DataError("checkpoint weight '" + p.name + "' has shape " + to_string(t->value.shape()) + ", expected " +
                      to_string(p.value.shape()));
    p.value = t->value.template cast<Real>();
  }
}

template void restore_weights<float>(const Checkpoint&, UNetWeights<float>&);
template void restore_weights<double>(const Checkpoint&, UNetWeights<double>&);

} // namespace loupe
