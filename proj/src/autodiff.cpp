#include "qeebm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace qeebm::ad {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Parameter::Parameter(std::string n, Shape s)
    : name(std::move(n)), shape(std::move(s)), value(shape_size(shape), 0.0),
      grad(shape_size(shape), 0.0) {}

void Parameter::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

// --- Tensor ----------------------------------------------------------------------------------

const Shape& Tensor::shape() const { return graph_->shape(id_); }
std::span<const double> Tensor::data() const { return graph_->value(id_); }
bool Tensor::requires_grad() const { return graph_->requires_grad(id_); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  return s.size() == 2 ? s[0] : 1;
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  return s.empty() ? 1 : s.back();
}

double Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("item() on tensor of shape " + shape_string(shape()));
  }
  return data()[0];
}

// --- GradientTable ---------------------------------------------------------------------------

std::span<const double> GradientTable::operator[](NodeId id) const {
  if (!has(id)) throw std::out_of_range("no gradient recorded for node " + std::to_string(id));
  return grads_[id];
}

std::vector<double>& GradientTable::slot(NodeId id, std::size_t size) {
  auto& g = grads_.at(id);
  if (g.empty()) g.assign(size, 0.0);
  return g;
}

// --- Graph -----------------------------------------------------------------------------------

Tensor Graph::push(Node node) {
  if (shape_size(node.shape) != node.value.size()) {
    throw std::invalid_argument("node '" + std::string(node.op) + "': value length " +
                                std::to_string(node.value.size()) + " does not match shape " +
                                shape_string(node.shape));
  }
  nodes_.push_back(std::move(node));
  return Tensor(this, static_cast<NodeId>(nodes_.size() - 1));
}

Tensor Graph::constant(Shape shape, std::vector<double> value) {
  return push(Node{"constant", std::move(shape), std::move(value), {}, {}, false, nullptr});
}

Tensor Graph::leaf(Shape shape, std::vector<double> value, bool requires_grad) {
  return push(Node{"leaf", std::move(shape), std::move(value), {}, {}, requires_grad, nullptr});
}

Tensor Graph::parameter(Parameter& p, bool track) {
  const bool grad = track && !p.frozen;
  return push(Node{"parameter", p.shape, p.value, {}, {}, grad, grad ? &p : nullptr});
}

Tensor Graph::record(std::string_view op, Shape shape, std::vector<double> value,
                     std::vector<Tensor> inputs, BackwardRule rule) {
  Node node{op, std::move(shape), std::move(value), {}, {}, false, nullptr};
  node.inputs.reserve(inputs.size());
  for (const auto& t : inputs) {
    if (&t.graph() != this) throw std::invalid_argument("input tensor belongs to another graph");
    node.inputs.push_back(t.id());
    node.requires_grad = node.requires_grad || t.requires_grad();
  }
  if (node.requires_grad) node.rule = std::move(rule);
  return push(std::move(node));
}

GradientTable backward(const Graph& graph, const Tensor& loss) {
  if (&loss.graph() != &graph) throw std::invalid_argument("loss belongs to another graph");
  if (loss.size() != 1) {
    throw std::invalid_argument("backward() needs a scalar loss, got shape " +
                                shape_string(loss.shape()));
  }
  GradientTable grads(graph.size());
  if (!loss.requires_grad()) return grads;
  grads.slot(loss.id(), 1)[0] = 1.0;
  for (NodeId id = loss.id() + 1; id-- > 0;) {
    if (!grads.has(id)) continue;
    const auto& rule = graph.rule(id);
    if (rule) rule(grads[id], grads);
  }
  return grads;
}

void accumulate_parameter_grads(const Graph& graph, const GradientTable& grads) {
  for (NodeId id = 0; id < graph.size(); ++id) {
    Parameter* p = graph.bound_parameter(id);
    if (!p || !grads.has(id)) continue;
    auto g = grads[id];
    for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
  }
}

// --- Kernels ---------------------------------------------------------------------------------

void softmax_row(std::span<const double> in, std::span<double> out) {
  double mx = in[0];
  for (double v : in) mx = std::max(mx, v);
  double sum = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = std::exp(in[i] - mx);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
}

void softmax_backward_row(std::span<const double> probs, std::span<const double> upstream,
                          std::span<double> grad_in) {
  double dot = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) dot += upstream[i] * probs[i];
  for (std::size_t i = 0; i < probs.size(); ++i) grad_in[i] += probs[i] * (upstream[i] - dot);
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// --- Operations ------------------------------------------------------------------------------

namespace {

[[noreturn]] void shape_error(std::string_view op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              shape_string(a.shape()) + " and " + shape_string(b.shape()));
}

[[noreturn]] void shape_error(std::string_view op, const Tensor& a, std::string_view why) {
  throw std::invalid_argument(std::string(op) + ": shape " + shape_string(a.shape()) + " " +
                              std::string(why));
}

void require_rank(std::string_view op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) shape_error(op, a, "must have rank " + std::to_string(rank));
}

void require_finite(std::string_view op, const Tensor& a) {
  for (double v : a.data()) {
    if (!std::isfinite(v)) shape_error(op, a, "contains non-finite values");
  }
}

// Runs `fill` on the gradient slot of `t` when it requires a gradient.
template <class F>
void accumulate(const Tensor& t, GradientTable& grads, F&& fill) {
  if (!t.requires_grad()) return;
  auto& g = grads.slot(t.id(), t.size());
  fill(g);
}

// Elementwise unary op whose derivative is expressed through input x and output y.
template <class F, class D>
Tensor elementwise(std::string_view op, const Tensor& a, F f, D dydx) {
  auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  const Graph* graph = &a.graph();
  const NodeId self = static_cast<NodeId>(graph->size());
  return a.graph().record(
      op, a.shape(), std::move(out), {a},
      [a, graph, self, dydx](std::span<const double> up, GradientTable& grads) {
        auto x = a.data();
        auto y = graph->value(self);
        accumulate(a, grads, [&](std::vector<double>& g) {
          for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] * dydx(x[i], y[i]);
        });
      });
}

Shape matrix(std::size_t r, std::size_t c) { return Shape{r, c}; }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("add", a, b);
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return a.graph().record("add", a.shape(), std::move(out), {a, b},
                          [a, b](std::span<const double> up, GradientTable& grads) {
                            for (const Tensor* t : {&a, &b}) {
                              accumulate(*t, grads, [&](std::vector<double>& g) {
                                for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i];
                              });
                            }
                          });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("sub", a, b);
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return a.graph().record("sub", a.shape(), std::move(out), {a, b},
                          [a, b](std::span<const double> up, GradientTable& grads) {
                            accumulate(a, grads, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i];
                            });
                            accumulate(b, grads, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < up.size(); ++i) g[i] -= up[i];
                            });
                          });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", a, b);
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return a.graph().record("mul", a.shape(), std::move(out), {a, b},
                          [a, b](std::span<const double> up, GradientTable& grads) {
                            auto x = a.data(), y = b.data();
                            accumulate(a, grads, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] * y[i];
                            });
                            accumulate(b, grads, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] * x[i];
                            });
                          });
}

Tensor add_row(const Tensor& m, const Tensor& v) {
  if (m.rank() != 2 || v.rank() != 1 || v.size() != m.cols()) shape_error("add_row", m, v);
  const std::size_t r = m.rows(), c = m.cols();
  auto x = m.data(), y = v.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] + y[j];
  return m.graph().record("add_row", m.shape(), std::move(out), {m, v},
                          [m, v, r, c](std::span<const double> up, GradientTable& grads) {
                            accumulate(m, grads, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i];
                            });
                            accumulate(v, grads, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j) g[j] += up[i * c + j];
                            });
                          });
}

Tensor mul_row(const Tensor& m, const Tensor& v) {
  if (m.rank() != 2 || v.rank() != 1 || v.size() != m.cols()) shape_error("mul_row", m, v);
  const std::size_t r = m.rows(), c = m.cols();
  auto x = m.data(), y = v.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] * y[j];
  return m.graph().record("mul_row", m.shape(), std::move(out), {m, v},
                          [m, v, r, c](std::span<const double> up, GradientTable& grads) {
                            auto x = m.data(), y = v.data();
                            accumulate(m, grads, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j)
                                  g[i * c + j] += up[i * c + j] * y[j];
                            });
                            accumulate(v, grads, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j)
                                  g[j] += up[i * c + j] * x[i * c + j];
                            });
                          });
}

Tensor scale(const Tensor& a, double c) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * c;
  return a.graph().record("scale", a.shape(), std::move(out), {a},
                          [a, c](std::span<const double> up, GradientTable& grads) {
                            accumulate(a, grads, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i] * c;
                            });
                          });
}

Tensor add_scalar(const Tensor& a, double c) {
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + c;
  return a.graph().record("add_scalar", a.shape(), std::move(out), {a},
                          [a](std::span<const double> up, GradientTable& grads) {
                            accumulate(a, grads, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i];
                            });
                          });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) shape_error("matmul", a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  auto x = a.data(), y = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = x[i * k + p];
      const double* brow = y.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  return a.graph().record(
      "matmul", matrix(m, n), std::move(out), {a, b},
      [a, b, m, k, n](std::span<const double> up, GradientTable& grads) {
        auto x = a.data(), y = b.data();
        // dA = dC * B^T
        accumulate(a, grads, [&](std::vector<double>& g) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j) s += up[i * n + j] * y[p * n + j];
              g[i * k + p] += s;
            }
        });
        // dB = A^T * dC
        accumulate(b, grads, [&](std::vector<double>& g) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double s = x[i * k + p];
              for (std::size_t j = 0; j < n; ++j) g[p * n + j] += s * up[i * n + j];
            }
        });
      });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t r = a.rows(), c = a.cols();
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return a.graph().record("transpose", matrix(c, r), std::move(out), {a},
                          [a, r, c](std::span<const double> up, GradientTable& grads) {
                            accumulate(a, grads, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j) g[i * c + j] += up[j * r + i];
                            });
                          });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    shape_error("reshape", a, "cannot be reshaped to " + shape_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return a.graph().record("reshape", std::move(shape), std::move(out), {a},
                          [a](std::span<const double> up, GradientTable& grads) {
                            accumulate(a, grads, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < up.size(); ++i) g[i] += up[i];
                            });
                          });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    require_rank("concat_rows", p, 2);
    if (p.cols() != c) shape_error("concat_rows", parts[0], p);
    r += p.rows();
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return parts[0].graph().record(
      "concat_rows", matrix(r, c), std::move(out), inputs,
      [inputs](std::span<const double> up, GradientTable& grads) {
        std::size_t offset = 0;
        for (const auto& p : inputs) {
          const std::size_t n = p.size();
          accumulate(p, grads, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < n; ++i) g[i] += up[offset + i];
          });
          offset += n;
        }
      });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    require_rank("concat_cols", p, 2);
    if (p.rows() != r) shape_error("concat_cols", parts[0], p);
    c += p.cols();
  }
  std::vector<double> out(r * c);
  std::size_t col0 = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    auto x = p.data();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j) out[i * c + col0 + j] = x[i * pc + j];
    col0 += pc;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return parts[0].graph().record(
      "concat_cols", matrix(r, c), std::move(out), inputs,
      [inputs, r, c](std::span<const double> up, GradientTable& grads) {
        std::size_t col0 = 0;
        for (const auto& p : inputs) {
          const std::size_t pc = p.cols();
          accumulate(p, grads, [&](std::vector<double>& g) {
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < pc; ++j) g[i * pc + j] += up[i * c + col0 + j];
          });
          col0 += pc;
        }
      });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank("slice_cols", a, 2);
  if (begin >= end || end > a.cols()) {
    shape_error("slice_cols", a,
                "cannot be sliced to columns [" + std::to_string(begin) + ", " +
                    std::to_string(end) + ")");
  }
  const std::size_t r = a.rows(), c = a.cols(), w = end - begin;
  auto x = a.data();
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * c + begin + j];
  return a.graph().record("slice_cols", matrix(r, w), std::move(out), {a},
                          [a, r, c, w, begin](std::span<const double> up, GradientTable& grads) {
                            accumulate(a, grads, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < w; ++j)
                                  g[i * c + begin + j] += up[i * w + j];
                            });
                          });
}

Tensor stack(std::span<const Tensor> scalars) {
  if (scalars.empty()) throw std::invalid_argument("stack: no inputs");
  std::vector<double> out;
  out.reserve(scalars.size());
  for (const auto& s : scalars) {
    require_rank("stack", s, 0);
    out.push_back(s.item());
  }
  std::vector<Tensor> inputs(scalars.begin(), scalars.end());
  const Shape shape{out.size()};
  return inputs[0].graph().record(
      "stack", shape, std::move(out), inputs,
      [inputs](std::span<const double> up, GradientTable& grads) {
        for (std::size_t i = 0; i < inputs.size(); ++i)
          accumulate(inputs[i], grads, [&](std::vector<double>& g) { g[0] += up[i]; });
      });
}

Tensor reduce_sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return a.graph().record("reduce_sum", {}, {s}, {a},
                          [a](std::span<const double> up, GradientTable& grads) {
                            accumulate(a, grads, [&](std::vector<double>& g) {
                              for (auto& v : g) v += up[0];
                            });
                          });
}

Tensor reduce_mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double n = static_cast<double>(a.size());
  return a.graph().record("reduce_mean", {}, {s / n}, {a},
                          [a, n](std::span<const double> up, GradientTable& grads) {
                            accumulate(a, grads, [&](std::vector<double>& g) {
                              for (auto& v : g) v += up[0] / n;
                            });
                          });
}

Tensor mean_rows(const Tensor& a) {
  require_rank("mean_rows", a, 2);
  const std::size_t r = a.rows(), c = a.cols();
  auto x = a.data();
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x[i * c + j];
  for (auto& v : out) v /= static_cast<double>(r);
  return a.graph().record("mean_rows", Shape{c}, std::move(out), {a},
                          [a, r, c](std::span<const double> up, GradientTable& grads) {
                            accumulate(a, grads, [&](std::vector<double>& g) {
                              const double inv = 1.0 / static_cast<double>(r);
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j) g[i * c + j] += up[j] * inv;
                            });
                          });
}

Tensor tanh(const Tensor& a) {
  return elementwise(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
  return elementwise(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return elementwise(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) shape_error("log", a, "has non-positive entries");
  }
  return elementwise(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  return elementwise(
      "sigmoid", a, [](double x) { return stable_sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& a) {
  return elementwise(
      "log_sigmoid", a,
      [](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return stable_sigmoid(-x); });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("minimum", a, b);
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = y[i] < x[i] ? y[i] : x[i];
  return a.graph().record("minimum", a.shape(), std::move(out), {a, b},
                          [a, b](std::span<const double> up, GradientTable& grads) {
                            auto x = a.data(), y = b.data();
                            // Ties route the gradient to the first operand.
                            accumulate(a, grads, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < up.size(); ++i)
                                if (!(y[i] < x[i])) g[i] += up[i];
                            });
                            accumulate(b, grads, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < up.size(); ++i)
                                if (y[i] < x[i]) g[i] += up[i];
                            });
                          });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must not exceed hi");
  return elementwise(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor softmax(const Tensor& logits) {
  require_finite("softmax", logits);
  if (logits.cols() == 0) shape_error("softmax", logits, "has an empty last axis");
  const std::size_t r = logits.size() / logits.cols(), c = logits.cols();
  auto x = logits.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    softmax_row(x.subspan(i * c, c), std::span<double>(out).subspan(i * c, c));
  }
  const Graph* graph = &logits.graph();
  const NodeId self = static_cast<NodeId>(graph->size());
  return logits.graph().record(
      "softmax", logits.shape(), std::move(out), {logits},
      [logits, graph, self, r, c](std::span<const double> up, GradientTable& grads) {
        auto y = graph->value(self);
        accumulate(logits, grads, [&](std::vector<double>& g) {
          for (std::size_t i = 0; i < r; ++i) {
            softmax_backward_row(y.subspan(i * c, c), up.subspan(i * c, c),
                                 std::span<double>(g).subspan(i * c, c));
          }
        });
      });
}

Tensor log_softmax(const Tensor& logits) {
  require_finite("log_softmax", logits);
  if (logits.cols() == 0) shape_error("log_softmax", logits, "has an empty last axis");
  const std::size_t r = logits.size() / logits.cols(), c = logits.cols();
  auto x = logits.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    double mx = x[i * c];
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(x[i * c + j] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] - lse;
  }
  const Graph* graph = &logits.graph();
  const NodeId self = static_cast<NodeId>(graph->size());
  return logits.graph().record(
      "log_softmax", logits.shape(), std::move(out), {logits},
      [logits, graph, self, r, c](std::span<const double> up, GradientTable& grads) {
        auto y = graph->value(self);
        accumulate(logits, grads, [&](std::vector<double>& g) {
          for (std::size_t i = 0; i < r; ++i) {
            double total = 0.0;
            for (std::size_t j = 0; j < c; ++j) total += up[i * c + j];
            for (std::size_t j = 0; j < c; ++j)
              g[i * c + j] += up[i * c + j] - std::exp(y[i * c + j]) * total;
          }
        });
      });
}

namespace {

Tensor straight_through(const Tensor& logits, std::span<const int> tokens) {
  const std::size_t r = logits.size() / logits.cols(), c = logits.cols();
  auto x = logits.data();
  std::vector<double> probs(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    softmax_row(x.subspan(i * c, c), std::span<double>(probs).subspan(i * c, c));
  }
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t i = 0; i < r; ++i) out[i * c + static_cast<std::size_t>(tokens[i])] = 1.0;
  return logits.graph().record(
      "ste_onehot", logits.shape(), std::move(out), {logits},
      [logits, probs = std::move(probs), r, c](std::span<const double> up, GradientTable& grads) {
        accumulate(logits, grads, [&](std::vector<double>& g) {
          for (std::size_t i = 0; i < r; ++i) {
            softmax_backward_row(std::span<const double>(probs).subspan(i * c, c),
                                 up.subspan(i * c, c), std::span<double>(g).subspan(i * c, c));
          }
        });
      });
}

}  // namespace

Tensor ste_onehot(const Tensor& logits) {
  require_finite("ste_onehot", logits);
  if (logits.cols() == 0) shape_error("ste_onehot", logits, "has an empty last axis");
  const std::size_t r = logits.size() / logits.cols(), c = logits.cols();
  auto x = logits.data();
  std::vector<int> tokens(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (x[i * c + j] > x[i * c + best]) best = j;
    tokens[i] = static_cast<int>(best);
  }
  return straight_through(logits, tokens);
}

Tensor ste_onehot(const Tensor& logits, std::span<const int> tokens) {
  require_finite("ste_onehot", logits);
  if (logits.cols() == 0) shape_error("ste_onehot", logits, "has an empty last axis");
  const std::size_t r = logits.size() / logits.cols(), c = logits.cols();
  if (tokens.size() != r) shape_error("ste_onehot", logits, "does not match the token count");
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= c) {
      shape_error("ste_onehot", logits, "indexed out of range by token " + std::to_string(t));
    }
  }
  return straight_through(logits, tokens);
}

Tensor layer_norm(const Tensor& a, double eps) {
  require_rank("layer_norm", a, 2);
  const std::size_t r = a.rows(), c = a.cols();
  auto x = a.data();
  std::vector<double> out(x.size());
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += x[i * c + j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = x[i * c + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (x[i * c + j] - mean) * inv_std[i];
  }
  const Graph* graph = &a.graph();
  const NodeId self = static_cast<NodeId>(graph->size());
  return a.graph().record(
      "layer_norm", a.shape(), std::move(out), {a},
      [a, graph, self, r, c, inv_std = std::move(inv_std)](std::span<const double> up,
                                                           GradientTable& grads) {
        auto y = graph->value(self);
        accumulate(a, grads, [&](std::vector<double>& g) {
          const double n = static_cast<double>(c);
          for (std::size_t i = 0; i < r; ++i) {
            double mean_up = 0.0, mean_up_y = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              mean_up += up[i * c + j];
              mean_up_y += up[i * c + j] * y[i * c + j];
            }
            mean_up /= n;
            mean_up_y /= n;
            for (std::size_t j = 0; j < c; ++j) {
              g[i * c + j] += inv_std[i] * (up[i * c + j] - mean_up - y[i * c + j] * mean_up_y);
            }
          }
        });
      });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_rank("gather_rows", table, 2);
  const std::size_t v = table.rows(), d = table.cols();
  auto x = table.data();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      shape_error("gather_rows", table, "indexed out of range by id " + std::to_string(ids[i]));
    }
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() +
                static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return table.graph().record("gather_rows", matrix(ids.size(), d), std::move(out), {table},
                              [table, idx = std::move(idx), d](std::span<const double> up,
                                                               GradientTable& grads) {
                                accumulate(table, grads, [&](std::vector<double>& g) {
                                  for (std::size_t i = 0; i < idx.size(); ++i) {
                                    const std::size_t row = static_cast<std::size_t>(idx[i]);
                                    for (std::size_t j = 0; j < d; ++j)
                                      g[row * d + j] += up[i * d + j];
                                  }
                                });
                              });
}

Tensor pick(const Tensor& m, std::span<const int> cols) {
  require_rank("pick", m, 2);
  const std::size_t r = m.rows(), c = m.cols();
  if (cols.size() != r) shape_error("pick", m, "needs one index per row");
  auto x = m.data();
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (cols[i] < 0 || static_cast<std::size_t>(cols[i]) >= c) {
      shape_error("pick", m, "indexed out of range by column " + std::to_string(cols[i]));
    }
    out[i] = x[i * c + static_cast<std::size_t>(cols[i])];
  }
  std::vector<int> idx(cols.begin(), cols.end());
  return m.graph().record("pick", Shape{r}, std::move(out), {m},
                          [m, idx = std::move(idx), c](std::span<const double> up,
                                                       GradientTable& grads) {
                            accumulate(m, grads, [&](std::vector<double>& g) {
                              for (std::size_t i = 0; i < idx.size(); ++i)
                                g[i * c + static_cast<std::size_t>(idx[i])] += up[i];
                            });
                          });
}

}  // namespace qeebm::ad
