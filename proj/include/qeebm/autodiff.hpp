#pragma once

// Tape-based reverse-mode automatic differentiation over fp64 tensors of rank 0, 1 or 2.
//
// A Graph records every operation in creation order, which is a topological order by
// construction. backward() walks the tape once in reverse. Graphs are rebuilt per training
// step and are confined to a single thread.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qeebm::ad {

using Shape = std::vector<std::size_t>;
using NodeId = std::uint32_t;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// A named trainable array owned by a model. Graphs bind to parameters by pointer.
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Shape s);

  std::size_t size() const { return value.size(); }
  void zero_grad();
};

class Graph;
class GradientTable;

/// Handle to a node of a Graph. Cheap to copy; valid while its graph is alive.
class Tensor {
 public:
  Tensor() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const { return *graph_; }
  NodeId id() const { return id_; }

  const Shape& shape() const;
  std::span<const double> data() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const { return data().size(); }
  /// Rows of a matrix; 1 for vectors and scalars.
  std::size_t rows() const;
  /// Length of the last axis; 1 for scalars.
  std::size_t cols() const;
  bool requires_grad() const;

  double item() const;
  double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

 private:
  friend class Graph;
  Tensor(Graph* g, NodeId id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

/// Gradient arrays keyed by node id. Slots are allocated on first accumulation.
class GradientTable {
 public:
  explicit GradientTable(std::size_t nodes) : grads_(nodes) {}

  bool has(NodeId id) const { return id < grads_.size() && !grads_[id].empty(); }
  std::span<const double> operator[](NodeId id) const;
  std::span<const double> of(const Tensor& t) const { return (*this)[t.id()]; }
  std::vector<double>& slot(NodeId id, std::size_t size);

 private:
  std::vector<std::vector<double>> grads_;
};

/// Receives the upstream gradient of the node it belongs to and accumulates into its inputs.
using BackwardRule = std::function<void(std::span<const double> upstream, GradientTable& grads)>;

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = delete;
  Graph& operator=(Graph&&) = delete;

  Tensor constant(Shape shape, std::vector<double> value);
  Tensor scalar(double v) { return constant({}, {v}); }
  Tensor leaf(Shape shape, std::vector<double> value, bool requires_grad = true);
  /// Binds a model parameter. With track=false (or a frozen parameter) the node is a constant.
  Tensor parameter(Parameter& p, bool track = true);

  /// Appends an op node. The rule is dropped when no input requires a gradient.
  Tensor record(std::string_view op, Shape shape, std::vector<double> value,
                std::vector<Tensor> inputs, BackwardRule rule);

  std::size_t size() const { return nodes_.size(); }
  const Shape& shape(NodeId id) const { return nodes_[id].shape; }
  std::span<const double> value(NodeId id) const { return nodes_[id].value; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  std::string_view op(NodeId id) const { return nodes_[id].op; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_[id].inputs; }
  Parameter* bound_parameter(NodeId id) const { return nodes_[id].param; }
  const BackwardRule& rule(NodeId id) const { return nodes_[id].rule; }

 private:
  struct Node {
    std::string_view op;
    Shape shape;
    std::vector<double> value;
    std::vector<NodeId> inputs;
    BackwardRule rule;
    bool requires_grad = false;
    Parameter* param = nullptr;
  };

  Tensor push(Node node);

  std::vector<Node> nodes_;
};

/// Reverse sweep from a scalar loss. Every requires-grad node reachable from the loss gets a slot.
GradientTable backward(const Graph& graph, const Tensor& loss);

/// Adds the gradient of every bound, trainable parameter into Parameter::grad.
void accumulate_parameter_grads(const Graph& graph, const GradientTable& grads);

// ---------------------------------------------------------------------------------------------
// Operations. Elementwise ops need identical shapes; the only broadcast is a vector over the
// rows of a matrix (add_row / mul_row). Violations throw std::invalid_argument naming the shapes.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& m, const Tensor& v);
Tensor mul_row(const Tensor& m, const Tensor& v);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);

/// Scalars -> vector.
Tensor stack(std::span<const Tensor> scalars);
Tensor reduce_sum(const Tensor& a);
Tensor reduce_mean(const Tensor& a);
/// Column means of a matrix: (r, c) -> (c).
Tensor mean_rows(const Tensor& a);

Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
/// log(sigmoid(x)) without cancellation.
Tensor log_sigmoid(const Tensor& a);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor softmax(const Tensor& logits);
Tensor log_softmax(const Tensor& logits);
/// Forward: one-hot at the argmax of each row (lowest index on ties).
/// Backward: the softmax backward rule on the same logits.
Tensor ste_onehot(const Tensor& logits);
/// Forward: one-hot at the given per-row tokens. Backward: the softmax backward rule.
Tensor ste_onehot(const Tensor& logits, std::span<const int> tokens);
/// Row-wise standardization without affine terms.
Tensor layer_norm(const Tensor& a, double eps = 1e-5);

/// Rows of a (V, d) table selected by ids -> (n, d).
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
/// One entry per row of a (r, c) matrix -> (r).
Tensor pick(const Tensor& m, std::span<const int> cols);

// Shared numeric kernels (also used by the gradient-free inference path).
void softmax_row(std::span<const double> in, std::span<double> out);
void softmax_backward_row(std::span<const double> probs, std::span<const double> upstream,
                          std::span<double> grad_in);
double stable_sigmoid(double x);

}  // namespace qeebm::ad
