#include "loupe/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "kernels.hpp"
#include "loupe/fourier.hpp"
#include "loupe/rng.hpp"

namespace loupe {

std::string_view op_name(OpKind kind) {
  switch (kind) {
  case OpKind::Input: return "input";
  case OpKind::Parameter: return "parameter";
  case OpKind::Add: return "add";
  case OpKind::Subtract: return "subtract";
  case OpKind::Multiply: return "multiply";
  case OpKind::Scale: return "scale";
  case OpKind::Square: return "square";
  case OpKind::Sqrt: return "sqrt";
  case OpKind::Sigmoid: return "sigmoid";
  case OpKind::LeakyRelu: return "leaky_relu";
  case OpKind::Sum: return "sum";
  case OpKind::Mean: return "mean";
  case OpKind::Conv2d: return "conv2d";
  case OpKind::AvgPool2: return "avg_pool2";
  case OpKind::Upsample2: return "upsample2";
  case OpKind::Concat: return "concat";
  case OpKind::BatchNorm: return "batch_norm";
  case OpKind::ComplexMagnitude: return "complex_magnitude";
  case OpKind::Dft2: return "dft2";
  case OpKind::Idft2: return "idft2";
  case OpKind::FftShift: return "fftshift";
  case OpKind::IfftShift: return "ifftshift";
  case OpKind::ExpandLine: return "expand_line";
  case OpKind::Renormalize: return "renormalize";
  }
  return "unknown";
}

namespace {

Shape broadcast_shapes(const Shape& a, const Shape& b, const std::string& where) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i + a.size() >= rank ? a[i + a.size() - rank] : 1;
    const std::size_t db = i + b.size() >= rank ? b[i + b.size() - rank] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError(where + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
    out[i] = std::max(da, db);
  }
  return out;
}

/// Strides of `operand` when iterated over `out`; broadcast axes get 0.
std::vector<std::size_t> broadcast_strides(const Shape& operand, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < operand.size(); ++k) {
    const std::size_t axis_in = operand.size() - 1 - k;
    const std::size_t axis_out = out.size() - 1 - k;
    strides[axis_out] = operand[axis_in] == 1 ? 0 : stride;
    stride *= operand[axis_in];
  }
  return strides;
}

/// Calls f(out_index, a_index, b_index) over every output element.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
  const std::size_t total = numel(out);
  if (sa == out && sb == out) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  const auto ta = broadcast_strides(sa, out);
  const auto tb = broadcast_strides(sb, out);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; ++o) {
    f(o, ia, ib);
    for (std::size_t d = out.size(); d-- > 0;) {
      ++idx[d];
      ia += ta[d];
      ib += tb[d];
      if (idx[d] < out[d]) break;
      ia -= ta[d] * out[d];
      ib -= tb[d] * out[d];
      idx[d] = 0;
    }
  }
}

void require_rank(const Shape& s, std::size_t rank, const std::string& where) {
  if (s.size() != rank)
    throw ShapeError(where + ": expected a rank-" + std::to_string(rank) + " tensor, got " + to_string(s));
}

void require_complex(const Shape& s, const std::string& where) {
  if (s.size() < 3 || s[s.size() - 3] != 2)
    throw ShapeError(where + ": expected a [..., 2, H, W] complex tensor, got " + to_string(s));
}

} // namespace

template <typename Real>
auto Graph<Real>::at(Node n) -> NodeData& {
  if (n.id >= nodes_.size()) throw Error("node handle " + std::to_string(n.id) + " does not belong to this graph");
  return nodes_[n.id];
}

template <typename Real>
auto Graph<Real>::at(Node n) const -> const NodeData& {
  if (n.id >= nodes_.size()) throw Error("node handle " + std::to_string(n.id) + " does not belong to this graph");
  return nodes_[n.id];
}

template <typename Real>
Node Graph<Real>::append(OpKind kind, std::vector<std::uint32_t> inputs, Shape shape) {
  NodeData node;
  node.kind = kind;
  node.inputs = std::move(inputs);
  for (const auto& s : scopes_) node.name += s + "/";
  node.name += std::string(op_name(kind)) + "#" + std::to_string(nodes_.size());
  node.shape = std::move(shape);
  node.requires_grad = false;
  for (auto src : node.inputs) node.requires_grad = node.requires_grad || nodes_[src].requires_grad;
  if (kind == OpKind::Parameter) node.requires_grad = true;
  nodes_.push_back(std::move(node));
  evaluated_ = false;
  return Node{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename Real>
Node Graph<Real>::input(std::string name, Shape shape, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw ShapeError("input '" + name + "' has a zero dimension: " + to_string(shape));
  for (const auto& n : nodes_)
    if (n.kind == OpKind::Input && n.name == name) throw Error("duplicate graph input '" + name + "'");
  Node n = append(OpKind::Input, {}, std::move(shape));
  nodes_.back().name = std::move(name);
  nodes_.back().requires_grad = requires_grad;
  return n;
}

template <typename Real>
Node Graph<Real>::parameter(Parameter<Real>& param) {
  Node n = append(OpKind::Parameter, {}, param.value.shape());
  nodes_.back().param = &param;
  nodes_.back().name = param.name;
  return n;
}

template <typename Real>
Node Graph<Real>::elementwise(OpKind kind, Node a, Node b) {
  const std::string where = std::string(op_name(kind)) + "#" + std::to_string(nodes_.size());
  Shape out = broadcast_shapes(at(a).shape, at(b).shape, where);
  return append(kind, {a.id, b.id}, std::move(out));
}

template <typename Real>
Node Graph<Real>::add(Node a, Node b) { return elementwise(OpKind::Add, a, b); }
template <typename Real>
Node Graph<Real>::subtract(Node a, Node b) { return elementwise(OpKind::Subtract, a, b); }
template <typename Real>
Node Graph<Real>::multiply(Node a, Node b) { return elementwise(OpKind::Multiply, a, b); }

template <typename Real>
Node Graph<Real>::scale(Node a, double factor) {
  Node n = append(OpKind::Scale, {a.id}, at(a).shape);
  nodes_.back().scalar = factor;
  return n;
}

template <typename Real>
Node Graph<Real>::square(Node a) { return append(OpKind::Square, {a.id}, at(a).shape); }

template <typename Real>
Node Graph<Real>::sqrt(Node a, double epsilon) {
  Node n = append(OpKind::Sqrt, {a.id}, at(a).shape);
  nodes_.back().scalar = epsilon;
  return n;
}

template <typename Real>
Node Graph<Real>::sigmoid(Node a, double slope) {
  Node n = append(OpKind::Sigmoid, {a.id}, at(a).shape);
  nodes_.back().scalar = slope;
  return n;
}

template <typename Real>
Node Graph<Real>::leaky_relu(Node a, double negative_slope) {
  Node n = append(OpKind::LeakyRelu, {a.id}, at(a).shape);
  nodes_.back().scalar = negative_slope;
  return n;
}

template <typename Real>
Node Graph<Real>::sum(Node a) { return append(OpKind::Sum, {a.id}, Shape{1}); }
template <typename Real>
Node Graph<Real>::mean(Node a) { return append(OpKind::Mean, {a.id}, Shape{1}); }

template <typename Real>
Node Graph<Real>::conv2d(Node x, Node weight, std::optional<Node> bias) {
  const std::string where = "conv2d#" + std::to_string(nodes_.size());
  const Shape& xs = at(x).shape;
  const Shape& ws = at(weight).shape;
  require_rank(xs, 4, where + " input");
  require_rank(ws, 4, where + " weight");
  if (ws[2] != 3 || ws[3] != 3) throw ShapeError(where + ": kernel must be 3x3, got " + to_string(ws));
  if (ws[1] != xs[1])
    throw ShapeError(where + ": weight expects " + std::to_string(ws[1]) + " input channels, input has " +
                     std::to_string(xs[1]));
  std::vector<std::uint32_t> inputs{x.id, weight.id};
  if (bias) {
    if (at(*bias).shape != Shape{ws[0]})
      throw ShapeError(where + ": bias shape " + to_string(at(*bias).shape) + " does not match " +
                       std::to_string(ws[0]) + " output channels");
    inputs.push_back(bias->id);
  }
  return append(OpKind::Conv2d, std::move(inputs), Shape{xs[0], ws[0], xs[2], xs[3]});
}

template <typename Real>
Node Graph<Real>::avg_pool2(Node x) {
  const std::string where = "avg_pool2#" + std::to_string(nodes_.size());
  const Shape& xs = at(x).shape;
  require_rank(xs, 4, where);
  if (xs[2] % 2 || xs[3] % 2) throw ShapeError(where + ": spatial size must be even, got " + to_string(xs));
  return append(OpKind::AvgPool2, {x.id}, Shape{xs[0], xs[1], xs[2] / 2, xs[3] / 2});
}

template <typename Real>
Node Graph<Real>::upsample2(Node x) {
  const Shape& xs = at(x).shape;
  require_rank(xs, 4, "upsample2#" + std::to_string(nodes_.size()));
  return append(OpKind::Upsample2, {x.id}, Shape{xs[0], xs[1], xs[2] * 2, xs[3] * 2});
}

template <typename Real>
Node Graph<Real>::concat(Node a, Node b) {
  const std::string where = "concat#" + std::to_string(nodes_.size());
  const Shape& sa = at(a).shape;
  const Shape& sb = at(b).shape;
  require_rank(sa, 4, where);
  require_rank(sb, 4, where);
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw ShapeError(where + ": cannot concatenate " + to_string(sa) + " with " + to_string(sb));
  return append(OpKind::Concat, {a.id, b.id}, Shape{sa[0], sa[1] + sb[1], sa[2], sa[3]});
}

template <typename Real>
Node Graph<Real>::batch_norm(Node x, Node gamma, Node beta, Parameter<Real>& running_mean,
                             Parameter<Real>& running_var, BatchNormOptions options) {
  const std::string where = "batch_norm#" + std::to_string(nodes_.size());
  const Shape& xs = at(x).shape;
  require_rank(xs, 4, where);
  const Shape per_channel{xs[1]};
  if (at(gamma).shape != per_channel || at(beta).shape != per_channel || running_mean.value.shape() != per_channel ||
      running_var.value.shape() != per_channel)
    throw ShapeError(where + ": affine terms and running statistics must have shape " + to_string(per_channel));
  Node n = append(OpKind::BatchNorm, {x.id, gamma.id, beta.id}, xs);
  auto& node = nodes_.back();
  node.scalar = options.epsilon;
  node.scalar2 = options.momentum;
  node.running_mean = &running_mean;
  node.running_var = &running_var;
  return n;
}

template <typename Real>
Node Graph<Real>::complex_magnitude(Node x, double epsilon) {
  const Shape& xs = at(x).shape;
  require_complex(xs, "complex_magnitude#" + std::to_string(nodes_.size()));
  Shape out = xs;
  out[out.size() - 3] = 1;
  Node n = append(OpKind::ComplexMagnitude, {x.id}, std::move(out));
  nodes_.back().scalar = epsilon;
  return n;
}

template <typename Real>
Node Graph<Real>::dft2(Node x) {
  require_complex(at(x).shape, "dft2#" + std::to_string(nodes_.size()));
  return append(OpKind::Dft2, {x.id}, at(x).shape);
}

template <typename Real>
Node Graph<Real>::idft2(Node x) {
  require_complex(at(x).shape, "idft2#" + std::to_string(nodes_.size()));
  return append(OpKind::Idft2, {x.id}, at(x).shape);
}

template <typename Real>
Node Graph<Real>::fftshift(Node x) {
  if (at(x).shape.size() < 2) throw ShapeError("fftshift needs at least two axes");
  return append(OpKind::FftShift, {x.id}, at(x).shape);
}

template <typename Real>
Node Graph<Real>::ifftshift(Node x) {
  if (at(x).shape.size() < 2) throw ShapeError("ifftshift needs at least two axes");
  return append(OpKind::IfftShift, {x.id}, at(x).shape);
}

template <typename Real>
Node Graph<Real>::expand_line(Node line, std::size_t height, std::size_t width, Axis readout) {
  const std::size_t lines = readout == Axis::Rows ? width : height;
  if (at(line).shape != Shape{lines})
    throw ShapeError("expand_line#" + std::to_string(nodes_.size()) + ": expected " + std::to_string(lines) +
                     " line logits for a " + std::to_string(height) + "x" + std::to_string(width) + " grid, got " +
                     to_string(at(line).shape));
  Node n = append(OpKind::ExpandLine, {line.id}, Shape{height, width});
  nodes_.back().axis = readout;
  return n;
}

template <typename Real>
Node Graph<Real>::renormalize(Node p, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("renormalize: alpha must lie in (0, 1), got " + std::to_string(alpha));
  Node n = append(OpKind::Renormalize, {p.id}, at(p).shape);
  nodes_.back().scalar = alpha;
  return n;
}

template <typename Real>
const Tensor<Real>& Graph<Real>::forward_value(std::uint32_t id) const {
  const auto& node = nodes_[id];
  return node.kind == OpKind::Parameter ? node.param->value : node.value;
}

template <typename Real>
const Tensor<Real>& Graph<Real>::value(Node n) const {
  if (!evaluated_) throw Error("value requested before evaluate()");
  at(n);
  return forward_value(n.id);
}

template <typename Real>
const Tensor<Real>& Graph<Real>::gradient(Node n) const {
  const auto& node = at(n);
  if (node.grad.empty()) throw Error("no gradient recorded for node '" + node.name + "'");
  return node.grad;
}

template <typename Real>
const Shape& Graph<Real>::shape(Node n) const { return at(n).shape; }
template <typename Real>
OpKind Graph<Real>::kind(Node n) const { return at(n).kind; }
template <typename Real>
const std::string& Graph<Real>::name(Node n) const { return at(n).name; }

template <typename Real>
std::vector<Parameter<Real>*> Graph<Real>::parameters() const {
  std::vector<Parameter<Real>*> out;
  auto push = [&](Parameter<Real>* p) {
    if (p && std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
  };
  for (const auto& n : nodes_) {
    push(n.param);
    push(n.running_mean);
    push(n.running_var);
  }
  return out;
}

template <typename Real>
void Graph<Real>::evaluate(const Bindings<Real>& inputs, Mode mode) {
  std::size_t bound = 0;
  for (auto& node : nodes_) {
    if (node.kind != OpKind::Input) continue;
    auto it = inputs.find(node.name);
    if (it == inputs.end()) throw Error("graph input '" + node.name + "' is not bound");
    if (it->second.shape() != node.shape)
      throw ShapeError("graph input '" + node.name + "' expects shape " + to_string(node.shape) + ", got " +
                       to_string(it->second.shape()));
    node.value = it->second;
    ++bound;
  }
  if (bound != inputs.size()) {
    for (const auto& [key, _] : inputs) {
      const bool known = std::any_of(nodes_.begin(), nodes_.end(),
                                     [&](const NodeData& n) { return n.kind == OpKind::Input && n.name == key; });
      if (!known) throw Error("binding '" + key + "' does not name a graph input");
    }
  }
  evaluated_ = false;
  for (auto& node : nodes_) {
    if (node.kind == OpKind::Input || node.kind == OpKind::Parameter) continue;
    forward(node, mode);
    if (debug_checks_ && !node.value.all_finite()) throw Error("non-finite value produced by node '" + node.name + "'");
  }
  evaluated_ = true;
}

template <typename Real>
void Graph<Real>::forward(NodeData& node, Mode mode) {
  if (node.value.shape() != node.shape) node.value = Tensor<Real>(node.shape);
  node.mode = mode;
  Real* y = node.value.raw();
  const std::size_t count = node.value.size();
  auto in = [&](std::size_t k) -> const Tensor<Real>& { return forward_value(node.inputs[k]); };

  switch (node.kind) {
  case OpKind::Input:
  case OpKind::Parameter: break;
  case OpKind::Add:
  case OpKind::Subtract:
  case OpKind::Multiply: {
    const Real* a = in(0).raw();
    const Real* b = in(1).raw();
    const OpKind kind = node.kind;
    for_each_broadcast(node.shape, in(0).shape(), in(1).shape(), [&](std::size_t o, std::size_t ia, std::size_t ib) {
      y[o] = kind == OpKind::Add ? a[ia] + b[ib] : kind == OpKind::Subtract ? a[ia] - b[ib] : a[ia] * b[ib];
    });
    break;
  }
  case OpKind::Scale: {
    const Real f = static_cast<Real>(node.scalar);
    const Real* a = in(0).raw();
    for (std::size_t i = 0; i < count; ++i) y[i] = f * a[i];
    break;
  }
  case OpKind::Square: {
    const Real* a = in(0).raw();
    for (std::size_t i = 0; i < count; ++i) y[i] = a[i] * a[i];
    break;
  }
  case OpKind::Sqrt: {
    const Real* a = in(0).raw();
    const Real eps = static_cast<Real>(node.scalar);
    for (std::size_t i = 0; i < count; ++i) y[i] = std::sqrt(a[i] + eps);
    break;
  }
  case OpKind::Sigmoid: {
    const Real* a = in(0).raw();
    for (std::size_t i = 0; i < count; ++i) y[i] = kernels::sigmoid(a[i], node.scalar);
    break;
  }
  case OpKind::LeakyRelu: {
    const Real* a = in(0).raw();
    const Real slope = static_cast<Real>(node.scalar);
    for (std::size_t i = 0; i < count; ++i) y[i] = a[i] >= 0 ? a[i] : slope * a[i];
    break;
  }
  case OpKind::Sum:
  case OpKind::Mean: {
    const auto& a = in(0);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
    if (node.kind == OpKind::Mean) acc /= static_cast<double>(a.size());
    y[0] = static_cast<Real>(acc);
    break;
  }
  case OpKind::Conv2d: {
    const auto& x = in(0);
    const auto& w = in(1);
    const Real* bias = node.inputs.size() > 2 ? in(2).raw() : nullptr;
    kernels::conv3x3_forward(x.raw(), w.raw(), bias, y, x.dim(0), x.dim(1), w.dim(0), x.dim(2), x.dim(3), node.saved);
    break;
  }
  case OpKind::AvgPool2: {
    const auto& x = in(0);
    kernels::avg_pool2_forward(x.raw(), y, x.dim(0) * x.dim(1), x.dim(2), x.dim(3));
    break;
  }
  case OpKind::Upsample2: {
    const auto& x = in(0);
    kernels::upsample2_forward(x.raw(), y, x.dim(0) * x.dim(1), x.dim(2), x.dim(3));
    break;
  }
  case OpKind::Concat: {
    const auto& a = in(0);
    const auto& b = in(1);
    const std::size_t plane = a.dim(2) * a.dim(3);
    const std::size_t ca = a.dim(1) * plane, cb = b.dim(1) * plane;
    for (std::size_t n = 0; n < a.dim(0); ++n) {
      std::copy_n(a.raw() + n * ca, ca, y + n * (ca + cb));
      std::copy_n(b.raw() + n * cb, cb, y + n * (ca + cb) + ca);
    }
    break;
  }
  case OpKind::BatchNorm: {
    const auto& x = in(0);
    const Real* gamma = in(1).raw();
    const Real* beta = in(2).raw();
    const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
    const double m = static_cast<double>(batch * plane);
    // saved = [xhat (x.size()), inverse std (channels)]
    node.saved.resize(x.size() + channels);
    Real* xhat = node.saved.data();
    Real* inv_std = xhat + x.size();
    for (std::size_t c = 0; c < channels; ++c) {
      double mu = 0.0, var = 0.0;
      if (mode == Mode::Train) {
        for (std::size_t n = 0; n < batch; ++n) {
          const Real* src = x.raw() + (n * channels + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) mu += src[i];
        }
        mu /= m;
        for (std::size_t n = 0; n < batch; ++n) {
          const Real* src = x.raw() + (n * channels + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            const double d = src[i] - mu;
            var += d * d;
          }
        }
        var /= m;
        const double momentum = node.scalar2;
        Real& rm = node.running_mean->value[c];
        Real& rv = node.running_var->value[c];
        rm = static_cast<Real>(momentum * rm + (1.0 - momentum) * mu);
        rv = static_cast<Real>(momentum * rv + (1.0 - momentum) * var);
      } else {
        mu = node.running_mean->value[c];
        var = node.running_var->value[c];
      }
      const double istd = 1.0 / std::sqrt(var + node.scalar);
      inv_std[c] = static_cast<Real>(istd);
      for (std::size_t n = 0; n < batch; ++n) {
        const std::size_t off = (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const Real h = static_cast<Real>((x[off + i] - mu) * istd);
          xhat[off + i] = h;
          y[off + i] = gamma[c] * h + beta[c];
        }
      }
    }
    break;
  }
  case OpKind::ComplexMagnitude: {
    const auto& x = in(0);
    const std::size_t plane = node.shape[node.shape.size() - 1] * node.shape[node.shape.size() - 2];
    const std::size_t blocks = count / plane;
    const Real eps = static_cast<Real>(node.scalar);
    for (std::size_t b = 0; b < blocks; ++b) {
      const Real* re = x.raw() + 2 * b * plane;
      const Real* im = re + plane;
      for (std::size_t i = 0; i < plane; ++i) y[b * plane + i] = std::sqrt(re[i] * re[i] + im[i] * im[i] + eps);
    }
    break;
  }
  case OpKind::Dft2:
  case OpKind::Idft2: {
    std::copy_n(in(0).raw(), count, y);
    const std::size_t h = node.shape[node.shape.size() - 2], w = node.shape[node.shape.size() - 1];
    fourier::transform2d(node.value.data(), count / (2 * h * w), h, w,
                         node.kind == OpKind::Dft2 ? fourier::Direction::Forward : fourier::Direction::Inverse);
    break;
  }
  case OpKind::FftShift:
  case OpKind::IfftShift: {
    const std::size_t h = node.shape[node.shape.size() - 2], w = node.shape[node.shape.size() - 1];
    fourier::shift_planes(in(0).raw(), y, count / (h * w), h, w, node.kind == OpKind::IfftShift);
    break;
  }
  case OpKind::ExpandLine: {
    const Real* line = in(0).raw();
    const std::size_t h = node.shape[0], w = node.shape[1];
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) y[i * w + j] = node.axis == Axis::Rows ? line[j] : line[i];
    break;
  }
  case OpKind::Renormalize: {
    const auto& p = in(0);
    double pbar = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) pbar += p[i];
    pbar /= static_cast<double>(p.size());
    const double alpha = node.scalar;
    const bool scale_down = pbar >= alpha;
    node.saved.assign({static_cast<Real>(scale_down ? 1 : 0)});
    node.saved_scalar = pbar;
    for (std::size_t i = 0; i < count; ++i) {
      const double v = scale_down ? alpha / pbar * p[i] : 1.0 - (1.0 - alpha) / (1.0 - pbar) * (1.0 - p[i]);
      y[i] = static_cast<Real>(std::clamp(v, 0.0, 1.0));
    }
    break;
  }
  }
}

template <typename Real>
void Graph<Real>::backpropagate(Node output, const Tensor<Real>& seed) {
  if (!evaluated_) throw Error("backpropagate called before evaluate()");
  const auto& out = at(output);
  if (seed.shape() != out.shape)
    throw ShapeError("seed shape " + to_string(seed.shape()) + " does not match output '" + out.name + "' of shape " +
                     to_string(out.shape));

  std::vector<char> reachable(nodes_.size(), 0);
  reachable[output.id] = 1;
  for (std::size_t i = output.id + 1; i-- > 0;)
    if (reachable[i])
      for (auto src : nodes_[i].inputs) reachable[src] = 1;

  for (std::size_t i = 0; i <= output.id; ++i) {
    auto& node = nodes_[i];
    if (!reachable[i]) {
      node.grad = Tensor<Real>();
      continue;
    }
    if (node.grad.shape() != node.shape)
      node.grad = Tensor<Real>(node.shape);
    else
      node.grad.fill(Real{0});
  }
  for (std::size_t i = output.id + 1; i < nodes_.size(); ++i) nodes_[i].grad = Tensor<Real>();
  nodes_[output.id].grad = seed;

  for (std::size_t i = output.id + 1; i-- > 0;)
    if (reachable[i]) backward(nodes_[i]);

  for (auto* p : parameters())
    if (p->gradient.shape() != p->value.shape())
      p->gradient = Tensor<Real>(p->value.shape());
    else
      p->gradient.fill(Real{0});
  for (std::size_t i = 0; i <= output.id; ++i) {
    auto& node = nodes_[i];
    if (node.kind != OpKind::Parameter || !reachable[i]) continue;
    auto& g = node.param->gradient;
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += node.grad[k];
  }
}

template <typename Real>
void Graph<Real>::backward(NodeData& node) {
  const Real* g = node.grad.raw();
  const std::size_t count = node.grad.size();
  auto in = [&](std::size_t k) -> const Tensor<Real>& { return forward_value(node.inputs[k]); };
  auto gin = [&](std::size_t k) -> Tensor<Real>& { return nodes_[node.inputs[k]].grad; };

  switch (node.kind) {
  case OpKind::Input:
  case OpKind::Parameter: break;
  case OpKind::Add:
  case OpKind::Subtract:
  case OpKind::Multiply: {
    const Real* a = in(0).raw();
    const Real* b = in(1).raw();
    Real* ga = gin(0).raw();
    Real* gb = gin(1).raw();
    const OpKind kind = node.kind;
    const bool same = node.inputs[0] == node.inputs[1];
    // Accumulate into a temporary when both operands are the same node so
    // the two contributions do not alias.
    std::vector<Real> tmp;
    if (same) {
      tmp.assign(gin(0).size(), Real{0});
      ga = tmp.data();
      gb = tmp.data();
    }
    for_each_broadcast(node.shape, in(0).shape(), in(1).shape(), [&](std::size_t o, std::size_t ia, std::size_t ib) {
      switch (kind) {
      case OpKind::Add: ga[ia] += g[o]; gb[ib] += g[o]; break;
      case OpKind::Subtract: ga[ia] += g[o]; gb[ib] -= g[o]; break;
      default: ga[ia] += g[o] * b[ib]; gb[ib] += g[o] * a[ia]; break;
      }
    });
    if (same)
      for (std::size_t i = 0; i < tmp.size(); ++i) gin(0)[i] += tmp[i];
    break;
  }
  case OpKind::Scale: {
    Real* ga = gin(0).raw();
    const Real f = static_cast<Real>(node.scalar);
    for (std::size_t i = 0; i < count; ++i) ga[i] += f * g[i];
    break;
  }
  case OpKind::Square: {
    const Real* a = in(0).raw();
    Real* ga = gin(0).raw();
    for (std::size_t i = 0; i < count; ++i) ga[i] += Real(2) * a[i] * g[i];
    break;
  }
  case OpKind::Sqrt: {
    const Real* y = node.value.raw();
    Real* ga = gin(0).raw();
    for (std::size_t i = 0; i < count; ++i) ga[i] += g[i] / (Real(2) * y[i]);
    break;
  }
  case OpKind::Sigmoid: {
    const Real* y = node.value.raw();
    Real* ga = gin(0).raw();
    const Real k = static_cast<Real>(node.scalar);
    for (std::size_t i = 0; i < count; ++i) ga[i] += g[i] * k * y[i] * (Real(1) - y[i]);
    break;
  }
  case OpKind::LeakyRelu: {
    const Real* a = in(0).raw();
    Real* ga = gin(0).raw();
    const Real slope = static_cast<Real>(node.scalar);
    for (std::size_t i = 0; i < count; ++i) ga[i] += a[i] >= 0 ? g[i] : slope * g[i];
    break;
  }
  case OpKind::Sum:
  case OpKind::Mean: {
    auto& ga = gin(0);
    const Real v = node.kind == OpKind::Sum ? g[0] : static_cast<Real>(g[0] / static_cast<double>(ga.size()));
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += v;
    break;
  }
  case OpKind::Conv2d: {
    const auto& x = in(0);
    const auto& w = in(1);
    auto& gx = gin(0);
    Real* gb = node.inputs.size() > 2 ? gin(2).raw() : nullptr;
    const bool need_gx = nodes_[node.inputs[0]].requires_grad;
    kernels::conv3x3_backward(x.raw(), w.raw(), g, need_gx ? gx.raw() : nullptr, gin(1).raw(), gb, x.dim(0), x.dim(1),
                              w.dim(0), x.dim(2), x.dim(3), node.saved);
    break;
  }
  case OpKind::AvgPool2: {
    const auto& x = in(0);
    kernels::avg_pool2_backward(g, gin(0).raw(), x.dim(0) * x.dim(1), x.dim(2), x.dim(3));
    break;
  }
  case OpKind::Upsample2: {
    const auto& x = in(0);
    kernels::upsample2_backward(g, gin(0).raw(), x.dim(0) * x.dim(1), x.dim(2), x.dim(3));
    break;
  }
  case OpKind::Concat: {
    const auto& a = in(0);
    const auto& b = in(1);
    const std::size_t plane = a.dim(2) * a.dim(3);
    const std::size_t ca = a.dim(1) * plane, cb = b.dim(1) * plane;
    Real* ga = gin(0).raw();
    Real* gb = gin(1).raw();
    for (std::size_t n = 0; n < a.dim(0); ++n) {
      const Real* src = g + n * (ca + cb);
      for (std::size_t i = 0; i < ca; ++i) ga[n * ca + i] += src[i];
      for (std::size_t i = 0; i < cb; ++i) gb[n * cb + i] += src[ca + i];
    }
    break;
  }
  case OpKind::BatchNorm: {
    const auto& x = in(0);
    const Real* gamma = in(1).raw();
    Real* gx = gin(0).raw();
    Real* ggamma = gin(1).raw();
    Real* gbeta = gin(2).raw();
    const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
    const Real* xhat = node.saved.data();
    const Real* inv_std = xhat + x.size();
    const double m = static_cast<double>(batch * plane);
    for (std::size_t c = 0; c < channels; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const std::size_t off = (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum_g += g[off + i];
          sum_gx += static_cast<double>(g[off + i]) * xhat[off + i];
        }
      }
      ggamma[c] += static_cast<Real>(sum_gx);
      gbeta[c] += static_cast<Real>(sum_g);
      const double k = static_cast<double>(gamma[c]) * inv_std[c];
      for (std::size_t n = 0; n < batch; ++n) {
        const std::size_t off = (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          if (node.mode == Mode::Train)
            gx[off + i] += static_cast<Real>(k * (g[off + i] - sum_g / m - xhat[off + i] * sum_gx / m));
          else
            gx[off + i] += static_cast<Real>(k * g[off + i]);
        }
      }
    }
    break;
  }
  case OpKind::ComplexMagnitude: {
    const auto& x = in(0);
    Real* gx = gin(0).raw();
    const Real* y = node.value.raw();
    const std::size_t plane = node.shape[node.shape.size() - 1] * node.shape[node.shape.size() - 2];
    const std::size_t blocks = count / plane;
    for (std::size_t b = 0; b < blocks; ++b) {
      const Real* re = x.raw() + 2 * b * plane;
      const Real* im = re + plane;
      Real* gre = gx + 2 * b * plane;
      Real* gim = gre + plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const Real s = g[b * plane + i] / y[b * plane + i];
        gre[i] += s * re[i];
        gim[i] += s * im[i];
      }
    }
    break;
  }
  case OpKind::Dft2:
  case OpKind::Idft2: {
    // The transform is unitary, so its adjoint is the opposite direction.
    Tensor<Real> tmp = node.grad;
    const std::size_t h = node.shape[node.shape.size() - 2], w = node.shape[node.shape.size() - 1];
    fourier::transform2d(tmp.data(), count / (2 * h * w), h, w,
                         node.kind == OpKind::Dft2 ? fourier::Direction::Inverse : fourier::Direction::Forward);
    Real* ga = gin(0).raw();
    for (std::size_t i = 0; i < count; ++i) ga[i] += tmp[i];
    break;
  }
  case OpKind::FftShift:
  case OpKind::IfftShift: {
    std::vector<Real> tmp(count);
    const std::size_t h = node.shape[node.shape.size() - 2], w = node.shape[node.shape.size() - 1];
    fourier::shift_planes(g, tmp.data(), count / (h * w), h, w, node.kind == OpKind::FftShift);
    Real* ga = gin(0).raw();
    for (std::size_t i = 0; i < count; ++i) ga[i] += tmp[i];
    break;
  }
  case OpKind::ExpandLine: {
    Real* gl = gin(0).raw();
    const std::size_t h = node.shape[0], w = node.shape[1];
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) gl[node.axis == Axis::Rows ? j : i] += g[i * w + j];
    break;
  }
  case OpKind::Renormalize: {
    const auto& p = in(0);
    Real* gp = gin(0).raw();
    const double alpha = node.scalar;
    const double pbar = node.saved_scalar;
    const double d = static_cast<double>(count);
    if (node.saved[0] != Real{0}) {
      // y = alpha/pbar * p
      double dot = 0.0;
      for (std::size_t j = 0; j < count; ++j) dot += static_cast<double>(g[j]) * p[j];
      const double coupling = alpha / (pbar * pbar * d) * dot;
      for (std::size_t i = 0; i < count; ++i) gp[i] += static_cast<Real>(alpha / pbar * g[i] - coupling);
    } else {
      // y = 1 - c (1 - p), c = (1 - alpha) / (1 - pbar)
      const double c = (1.0 - alpha) / (1.0 - pbar);
      double dot = 0.0;
      for (std::size_t j = 0; j < count; ++j) dot += static_cast<double>(g[j]) * (1.0 - p[j]);
      const double coupling = (1.0 - alpha) / ((1.0 - pbar) * (1.0 - pbar) * d) * dot;
      for (std::size_t i = 0; i < count; ++i) gp[i] += static_cast<Real>(c * g[i] - coupling);
    }
    break;
  }
  }
}

template class Graph<float>;
template class Graph<double>;

namespace {

template <typename Perturb>
GradientCheckResult run_check(Graph<double>& graph, Node output, const Tensor<double>& analytic_grad,
                              std::size_t size, const Bindings<double>& inputs, std::size_t probes, double h,
                              std::uint64_t seed, Mode mode, Perturb&& perturb) {
  std::vector<std::size_t> coords;
  if (probes >= size) {
    coords.resize(size);
    for (std::size_t i = 0; i < size; ++i) coords[i] = i;
  } else {
    Rng rng(seed);
    auto perm = rng.permutation(size);
    coords.assign(perm.begin(), perm.begin() + static_cast<long>(probes));
  }
  GradientCheckResult result;
  result.probes = coords.size();
  for (auto idx : coords) {
    perturb(idx, h);
    graph.evaluate(inputs, mode);
    const double plus = graph.value(output)[0];
    perturb(idx, -2.0 * h);
    graph.evaluate(inputs, mode);
    const double minus = graph.value(output)[0];
    perturb(idx, h);
    const double numeric = (plus - minus) / (2.0 * h);
    const double analytic = analytic_grad[idx];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic - numeric) / denom;
    if (rel >= result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_index = idx;
      result.analytic = analytic;
      result.numeric = numeric;
    }
  }
  graph.evaluate(inputs, mode);
  return result;
}

void require_scalar(const Graph<double>& graph, Node output) {
  if (numel(graph.shape(output)) != 1)
    throw ShapeError("finite_difference_check needs a scalar output, got " + to_string(graph.shape(output)));
}

} // namespace

GradientCheckResult finite_difference_check(Graph<double>& graph, Node output, Parameter<double>& param,
                                            const Bindings<double>& inputs, std::size_t probes, double h,
                                            std::uint64_t seed, Mode mode) {
  require_scalar(graph, output);
  graph.evaluate(inputs, mode);
  graph.backpropagate(output, Tensor<double>::scalar(1.0));
  const Tensor<double> analytic = param.gradient;
  return run_check(graph, output, analytic, param.value.size(), inputs, probes, h, seed, mode,
                   [&](std::size_t idx, double delta) { param.value[idx] += delta; });
}

GradientCheckResult finite_difference_check(Graph<double>& graph, Node output, Node input,
                                            const Bindings<double>& inputs, std::size_t probes, double h,
                                            std::uint64_t seed, Mode mode) {
  require_scalar(graph, output);
  if (graph.kind(input) != OpKind::Input) throw Error("finite_difference_check: node is not a graph input");
  Bindings<double> bound = inputs;
  auto it = bound.find(graph.name(input));
  if (it == bound.end()) throw Error("graph input '" + graph.name(input) + "' is not bound");
  graph.evaluate(bound, mode);
  graph.backpropagate(output, Tensor<double>::scalar(1.0));
  const Tensor<double> analytic = graph.gradient(input);
  auto& tensor = it->second;
  return run_check(graph, output, analytic, tensor.size(), bound, probes, h, seed, mode,
                   [&](std::size_t idx, double delta) { tensor[idx] += delta; });
}

} // namespace loupe
