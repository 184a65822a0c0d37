#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "loupe/tensor.hpp"

namespace loupe {

/// A named trainable (or buffer) tensor with a gradient of the same shape.
template <typename Real>
struct Parameter {
  Parameter() = default;
  Parameter(std::string name_, Tensor<Real> value_, bool trainable_ = true)
      : name(std::move(name_)), value(std::move(value_)), gradient(value.shape()), trainable(trainable_) {}

  std::string name;
  Tensor<Real> value;
  Tensor<Real> gradient;
  /// Buffers (batch-norm running statistics) are stored and checkpointed
  /// like parameters but never receive optimizer updates.
  bool trainable = true;
};

enum class OpKind : std::uint8_t {
  Input,
  Parameter,
  Add,
  Subtract,
  Multiply,
  Scale,
  Square,
  Sqrt,
  Sigmoid,
  LeakyRelu,
  Sum,
  Mean,
  Conv2d,
  AvgPool2,
  Upsample2,
  Concat,
  BatchNorm,
  ComplexMagnitude,
  Dft2,
  Idft2,
  FftShift,
  IfftShift,
  ExpandLine,
  Renormalize,
};

std::string_view op_name(OpKind kind);

/// Handle to a node inside one Graph.
struct Node {
  std::uint32_t id = 0;
  friend bool operator==(Node, Node) = default;
};

enum class Mode { Train, Eval };

/// Which grid axis a readout line runs along. Rows means each line is a
/// column of the grid (constant over the row index).
enum class Axis { Rows, Columns };

struct BatchNormOptions {
  double epsilon = 1e-5;
  double momentum = 0.9;
};

template <typename Real>
using Bindings = std::map<std::string, Tensor<Real>, std::less<>>;

/// Define-then-run computation graph with reverse-mode differentiation.
///
/// Nodes are appended in topological order by the builder methods, which
/// infer and check shapes immediately. evaluate() runs every node forward
/// and retains activations; backpropagate() walks the nodes reachable from
/// an output in reverse and overwrites the gradient of every registered
/// parameter (unreachable ones get zeros).
///
/// Parameters are referenced, not owned; they must outlive the graph.
/// Elementwise binary ops broadcast with numpy rules.
template <typename Real>
class Graph {
public:
  Graph() = default;

  /// Inputs with requires_grad=false (data, random draws) skip gradient
  /// work in ops that can avoid it.
  Node input(std::string name, Shape shape, bool requires_grad = true);
  Node parameter(Parameter<Real>& param);

  Node add(Node a, Node b);
  Node subtract(Node a, Node b);
  Node multiply(Node a, Node b);
  Node scale(Node a, double factor);
  Node square(Node a);
  /// sqrt(a + epsilon)
  Node sqrt(Node a, double epsilon = 0.0);
  /// 1 / (1 + exp(-slope * a))
  Node sigmoid(Node a, double slope = 1.0);
  Node leaky_relu(Node a, double negative_slope);
  Node sum(Node a);
  Node mean(Node a);

  /// 3x3, stride 1, zero padded "same" convolution of [N, Cin, H, W] with
  /// weight [Cout, Cin, 3, 3] and optional bias [Cout].
  Node conv2d(Node x, Node weight, std::optional<Node> bias = std::nullopt);
  Node avg_pool2(Node x);
  /// Nearest-neighbour x2 upsampling.
  Node upsample2(Node x);
  /// Concatenation along the channel axis of two [N, C, H, W] tensors.
  Node concat(Node a, Node b);
  /// Per-channel normalization of [N, C, H, W]. Train mode normalizes with
  /// batch statistics and updates the running buffers; eval mode uses them.
  Node batch_norm(Node x, Node gamma, Node beta, Parameter<Real>& running_mean, Parameter<Real>& running_var,
                  BatchNormOptions options = {});

  /// sqrt(re^2 + im^2 + epsilon) of [..., 2, H, W] into [..., 1, H, W].
  Node complex_magnitude(Node x, double epsilon);
  Node dft2(Node x);
  Node idft2(Node x);
  Node fftshift(Node x);
  Node ifftshift(Node x);

  /// Broadcasts one logit per phase-encode line [L] onto an [H, W] grid.
  Node expand_line(Node line, std::size_t height, std::size_t width, Axis readout);
  /// Affine rescaling of probabilities to mean alpha, staying in [0, 1].
  Node renormalize(Node p, double alpha);

  void evaluate(const Bindings<Real>& inputs, Mode mode = Mode::Train);
  void backpropagate(Node output, const Tensor<Real>& seed);

  const Tensor<Real>& value(Node n) const;
  const Tensor<Real>& gradient(Node n) const;
  const Shape& shape(Node n) const;
  OpKind kind(Node n) const;
  const std::string& name(Node n) const;
  std::size_t size() const noexcept { return nodes_.size(); }
  bool evaluated() const noexcept { return evaluated_; }

  /// Every distinct parameter referenced by a Parameter or BatchNorm node,
  /// in registration order.
  std::vector<Parameter<Real>*> parameters() const;

  /// Raise an error naming the node when a forward value is not finite.
  void set_debug_checks(bool enabled) noexcept { debug_checks_ = enabled; }

  /// Prefix applied to the names of nodes created until the matching pop.
  void push_scope(std::string scope) { scopes_.push_back(std::move(scope)); }
  void pop_scope() { scopes_.pop_back(); }

private:
  struct NodeData {
    OpKind kind;
    std::vector<std::uint32_t> inputs;
    std::string name;
    Shape shape;
    Tensor<Real> value;
    Tensor<Real> grad;
    double scalar = 0.0;  // slope, factor, epsilon or alpha depending on kind
    double scalar2 = 0.0; // batch-norm momentum
    Axis axis = Axis::Rows;
    Parameter<Real>* param = nullptr;
    Parameter<Real>* running_mean = nullptr;
    Parameter<Real>* running_var = nullptr;
    std::vector<Real> saved; // op-specific forward state
    double saved_scalar = 0.0;
    bool requires_grad = true;
    Mode mode = Mode::Train;
  };

  Node append(OpKind kind, std::vector<std::uint32_t> inputs, Shape shape);
  Node elementwise(OpKind kind, Node a, Node b);
  NodeData& at(Node n);
  const NodeData& at(Node n) const;
  const Tensor<Real>& forward_value(std::uint32_t id) const;
  void forward(NodeData& node, Mode mode);
  void backward(NodeData& node);

  std::vector<NodeData> nodes_;
  std::vector<std::string> scopes_;
  bool evaluated_ = false;
  bool debug_checks_ = false;
};

extern template class Graph<float>;
extern template class Graph<double>;

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t probes = 0;
};

/// Compares the analytic gradient of a scalar output with respect to
/// `param` against central differences of step h at `probes` coordinates
/// (all of them when probes >= size). The relative error per coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradientCheckResult finite_difference_check(Graph<double>& graph, Node output, Parameter<double>& param,
                                            const Bindings<double>& inputs, std::size_t probes, double h,
                                            std::uint64_t seed = 0, Mode mode = Mode::Train);

/// Same check with respect to a bound input tensor.
GradientCheckResult finite_difference_check(Graph<double>& graph, Node output, Node input,
                                            const Bindings<double>& inputs, std::size_t probes, double h,
                                            std::uint64_t seed = 0, Mode mode = Mode::Train);

} // namespace loupe
