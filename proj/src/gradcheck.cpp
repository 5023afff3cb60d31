#include "qeebm/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "qeebm/autodiff.hpp"
#include "qeebm/decoding.hpp"
#include "qeebm/losses.hpp"
#include "qeebm/models.hpp"
#include "qeebm/rng.hpp"

namespace qeebm {

bool GradcheckReport::ok() const {
  return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.failures == 0; });
}

namespace {

using ad::Graph;
using ad::Shape;
using ad::Tensor;

using OpFn = std::function<Tensor(Graph&, const std::vector<Tensor>&)>;

struct OpCase {
  std::vector<Shape> shapes;
  std::vector<std::vector<double>> values;
  OpFn fn;
  /// Function differentiated numerically; fn when unset.
  OpFn reference;
};

/// Identity forward whose backward scales the gradient: a deliberately broken rule.
Tensor faulty(const Tensor& t) {
  std::vector<double> v(t.data().begin(), t.data().end());
  return t.graph().record("fault", t.shape(), std::move(v), {t},
                          [t](std::span<const double> up, ad::GradientTable& grads) {
                            auto& g = grads.slot(t.id(), t.size());
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += 1.5 * up[i];
                          });
}

std::vector<double> uniform(RngStream& rng, std::size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

/// Values bounded away from zero, for ops with a kink there.
std::vector<double> away_from_zero(RngStream& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.05, 2.0);
  return v;
}

std::vector<int> random_ids(RngStream& rng, std::size_t n, int hi) {
  std::vector<int> v(n);
  for (auto& x : v) x = rng.uniform_int(0, hi - 1);
  return v;
}

class Checker {
 public:
  Checker(const GradcheckOptions& o, GradcheckEntry& e) : o_(o), e_(e) {}

  bool compare(double a, double n, std::uint64_t case_id, const std::string& where) {
    const double err = std::abs(a - n);
    const double mag = std::max(std::abs(a), std::abs(n));
    e_.worst_rel = std::max(e_.worst_rel, err / (mag + o_.atol / o_.rtol));
    if (err <= o_.rtol * mag + o_.atol && std::isfinite(a) && std::isfinite(n)) return true;
    if (e_.detail.empty()) {
      std::ostringstream s;
      s.precision(10);
      s << where << ": analytic " << a << " vs numeric " << n;
      e_.detail = s.str();
      e_.first_failing_case = case_id;
    }
    return false;
  }

 private:
  const GradcheckOptions& o_;
  GradcheckEntry& e_;
};

OpCase make_op_case(const std::string& name, RngStream& rng) {
  const auto r = static_cast<std::size_t>(rng.uniform_int(1, 4));
  const auto c = static_cast<std::size_t>(rng.uniform_int(2, 5));
  const std::size_t n = r * c;
  auto mat = [&](double lo = -2.0, double hi = 2.0) { return uniform(rng, n, lo, hi); };
  OpCase k;
  auto unary = [&](std::vector<double> v, OpFn f) {
    k.shapes = {{r, c}};
    k.values = {std::move(v)};
    k.fn = std::move(f);
  };
  auto binary = [&](std::vector<double> a, std::vector<double> b, OpFn f) {
    k.shapes = {{r, c}, {r, c}};
    k.values = {std::move(a), std::move(b)};
    k.fn = std::move(f);
  };

  if (name == "add") binary(mat(), mat(), [](Graph&, const auto& x) { return ad::add(x[0], x[1]); });
  else if (name == "sub") binary(mat(), mat(), [](Graph&, const auto& x) { return ad::sub(x[0], x[1]); });
  else if (name == "mul") binary(mat(), mat(), [](Graph&, const auto& x) { return ad::mul(x[0], x[1]); });
  else if (name == "add_row" || name == "mul_row") {
    k.shapes = {{r, c}, {c}};
    k.values = {mat(), uniform(rng, c, -2.0, 2.0)};
    if (name == "add_row") k.fn = [](Graph&, const auto& x) { return ad::add_row(x[0], x[1]); };
    else k.fn = [](Graph&, const auto& x) { return ad::mul_row(x[0], x[1]); };
  } else if (name == "scale") {
    const double s = rng.uniform(-3.0, 3.0);
    unary(mat(), [s](Graph&, const auto& x) { return ad::scale(x[0], s); });
  } else if (name == "add_scalar") {
    const double s = rng.uniform(-3.0, 3.0);
    unary(mat(), [s](Graph&, const auto& x) { return ad::add_scalar(x[0], s); });
  } else if (name == "matmul") {
    const auto inner = static_cast<std::size_t>(rng.uniform_int(1, 4));
    k.shapes = {{r, inner}, {inner, c}};
    k.values = {uniform(rng, r * inner, -2.0, 2.0), uniform(rng, inner * c, -2.0, 2.0)};
    k.fn = [](Graph&, const auto& x) { return ad::matmul(x[0], x[1]); };
  } else if (name == "transpose") unary(mat(), [](Graph&, const auto& x) { return ad::transpose(x[0]); });
  else if (name == "reshape") unary(mat(), [n](Graph&, const auto& x) { return ad::reshape(x[0], {n}); });
  else if (name == "concat_rows" || name == "concat_cols") {
    binary(mat(), mat(), [name](Graph&, const auto& x) {
      std::vector<Tensor> parts{x[0], x[1]};
      return name == "concat_rows" ? ad::concat_rows(parts) : ad::concat_cols(parts);
    });
  } else if (name == "slice_cols") {
    const auto b = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(c) - 1));
    const auto e = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(b) + 1, static_cast<int>(c)));
    unary(mat(), [b, e](Graph&, const auto& x) { return ad::slice_cols(x[0], b, e); });
  } else if (name == "stack") {
    for (std::size_t i = 0; i < c; ++i) {
      k.shapes.push_back({});
      k.values.push_back({rng.uniform(-2.0, 2.0)});
    }
    k.fn = [](Graph&, const auto& x) { return ad::stack(x); };
  } else if (name == "reduce_sum") unary(mat(), [](Graph&, const auto& x) { return ad::reduce_sum(x[0]); });
  else if (name == "reduce_mean") unary(mat(), [](Graph&, const auto& x) { return ad::reduce_mean(x[0]); });
  else if (name == "mean_rows") unary(mat(), [](Graph&, const auto& x) { return ad::mean_rows(x[0]); });
  else if (name == "tanh") unary(mat(), [](Graph&, const auto& x) { return ad::tanh(x[0]); });
  else if (name == "relu") unary(away_from_zero(rng, n), [](Graph&, const auto& x) { return ad::relu(x[0]); });
  else if (name == "exp") unary(mat(), [](Graph&, const auto& x) { return ad::exp(x[0]); });
  else if (name == "log") unary(mat(0.2, 3.0), [](Graph&, const auto& x) { return ad::log(x[0]); });
  else if (name == "sigmoid") unary(mat(-4.0, 4.0), [](Graph&, const auto& x) { return ad::sigmoid(x[0]); });
  else if (name == "log_sigmoid") unary(mat(-6.0, 6.0), [](Graph&, const auto& x) { return ad::log_sigmoid(x[0]); });
  else if (name == "minimum") {
    auto a = mat();
    auto gap = away_from_zero(rng, n);
    std::vector<double> b(n);
    for (std::size_t i = 0; i < n; ++i) b[i] = a[i] + gap[i];
    binary(std::move(a), std::move(b), [](Graph&, const auto& x) { return ad::minimum(x[0], x[1]); });
  } else if (name == "clamp") {
    std::vector<double> v(n);
    for (auto& x : v) {
      do x = rng.uniform(-1.5, 1.5);
      while (std::abs(std::abs(x) - 0.5) < 0.02);
    }
    unary(std::move(v), [](Graph&, const auto& x) { return ad::clamp(x[0], -0.5, 0.5); });
  } else if (name == "softmax") unary(mat(-3.0, 3.0), [](Graph&, const auto& x) { return ad::softmax(x[0]); });
  else if (name == "log_softmax") unary(mat(-3.0, 3.0), [](Graph&, const auto& x) { return ad::log_softmax(x[0]); });
  else if (name == "ste_onehot") {
    unary(mat(-3.0, 3.0), [](Graph&, const auto& x) { return ad::ste_onehot(x[0]); });
    k.reference = [](Graph&, const auto& x) { return ad::softmax(x[0]); };
  } else if (name == "ste_onehot_tokens") {
    const auto ids = random_ids(rng, r, static_cast<int>(c));
    unary(mat(-3.0, 3.0), [ids](Graph&, const auto& x) { return ad::ste_onehot(x[0], ids); });
    k.reference = [](Graph&, const auto& x) { return ad::softmax(x[0]); };
  } else if (name == "layer_norm") unary(mat(), [](Graph&, const auto& x) { return ad::layer_norm(x[0]); });
  else if (name == "gather_rows") {
    const auto ids = random_ids(rng, static_cast<std::size_t>(rng.uniform_int(1, 6)), static_cast<int>(r));
    unary(mat(), [ids](Graph&, const auto& x) { return ad::gather_rows(x[0], ids); });
  } else if (name == "pick") {
    const auto ids = random_ids(rng, r, static_cast<int>(c));
    unary(mat(), [ids](Graph&, const auto& x) { return ad::pick(x[0], ids); });
  } else {
    throw std::invalid_argument("gradcheck: unknown op " + name);
  }
  return k;
}

const std::vector<std::string>& op_names() {
  static const std::vector<std::string> names{
      "add",       "sub",         "mul",         "add_row",    "mul_row",     "scale",
      "add_scalar", "matmul",     "transpose",   "reshape",    "concat_rows", "concat_cols",
      "slice_cols", "stack",      "reduce_sum",  "reduce_mean", "mean_rows",  "tanh",
      "relu",      "exp",         "log",         "sigmoid",    "log_sigmoid", "minimum",
      "clamp",     "softmax",     "log_softmax", "ste_onehot", "ste_onehot_tokens",
      "layer_norm", "gather_rows", "pick"};
  return names;
}

const std::vector<std::string>& loss_names() {
  static const std::vector<std::string> names{"cross_entropy", "energy_term", "joint_nmt_loss",
                                              "nce_loss",      "reinforce",   "ppo"};
  return names;
}

void check_op(const std::string& name, const GradcheckOptions& o, GradcheckEntry& e) {
  Checker chk(o, e);
  const bool fault = o.inject_fault == name;
  for (int cs = 0; cs < o.cases; ++cs) {
    RngStream rng(o.seed, "gradcheck:" + name, static_cast<std::uint64_t>(cs));
    OpCase k = make_op_case(name, rng);
    const OpFn& ref = k.reference ? k.reference : k.fn;

    std::vector<double> w;
    auto eval = [&](const std::vector<std::vector<double>>& values) {
      Graph g;
      std::vector<Tensor> xs;
      for (std::size_t i = 0; i < values.size(); ++i) xs.push_back(g.constant(k.shapes[i], values[i]));
      const Tensor out = ref(g, xs);
      double s = 0.0;
      for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out.data()[i];
      return s;
    };

    Graph g;
    std::vector<Tensor> xs;
    for (std::size_t i = 0; i < k.values.size(); ++i) xs.push_back(g.leaf(k.shapes[i], k.values[i]));
    Tensor out = k.fn(g, xs);
    if (fault) out = faulty(out);
    w = uniform(rng, out.size(), -1.0, 1.0);
    const Tensor loss = ad::reduce_sum(ad::mul(out, g.constant(out.shape(), w)));
    const auto grads = ad::backward(g, loss);

    bool ok = true;
    for (std::size_t i = 0; i < k.values.size(); ++i) {
      for (std::size_t j = 0; j < k.values[i].size(); ++j) {
        auto values = k.values;
        values[i][j] = k.values[i][j] + o.h;
        const double up = eval(values);
        values[i][j] = k.values[i][j] - o.h;
        const double down = eval(values);
        const double numeric = (up - down) / (2.0 * o.h);
        const double analytic = grads.has(xs[i].id()) ? grads.of(xs[i])[j] : 0.0;
        ok &= chk.compare(analytic, numeric, static_cast<std::uint64_t>(cs),
                          "input " + std::to_string(i) + "[" + std::to_string(j) + "]");
      }
    }
    ++e.cases;
    if (!ok) ++e.failures;
  }
}

// --- model-level objectives ------------------------------------------------------------------

struct LossCase {
  std::vector<ParameterStore*> stores;
  /// Taped loss with every store in `stores` bound for tracking.
  std::function<Tensor(Graph&, const std::vector<Bound>&)> analytic;
  /// Loss value at the stores' current parameters.
  std::function<double()> numeric;
};

ModelDims tiny_dims() { return ModelDims{8, 8, 2, 8, 0.3}; }

TokenSeq random_seq(RngStream& rng, int vocab, bool eos) {
  TokenSeq s(static_cast<std::size_t>(rng.uniform_int(2, 4)));
  for (auto& t : s) t = rng.uniform_int(special::kCount, vocab - 1);
  if (eos) s.push_back(special::kEos);
  return s;
}

/// Mean -s over samples with hypothesis rows onehot + softmax(logits) - anchor: equal to the
/// hard one-hot at the anchor parameters, differentiable like softmax around them.
double surrogate_energy(const TaskNet& net, const EnergyNet& qe, const TokenSeq& src,
                        const std::vector<Hypothesis>& samples,
                        const std::vector<std::vector<double>>& anchors) {
  Graph g;
  const Bound b = net.bind_constant(g);
  const Bound qb = qe.bind_constant(g);
  const Tensor memory = net.encode(g, b, src);
  double total = 0.0;
  for (std::size_t j = 0; j < samples.size(); ++j) {
    const auto& tokens = samples[j].tokens;
    const Tensor probs = ad::softmax(net.decode(g, b, memory, decoder_input(tokens)).logits);
    std::vector<double> rows(probs.data().begin(), probs.data().end());
    const std::size_t V = probs.cols();
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] -= anchors[j][i];
    for (std::size_t t = 0; t < tokens.size(); ++t) rows[t * V + static_cast<std::size_t>(tokens[t])] += 1.0;
    total -= qe.score(g, qb, src, g.constant(probs.shape(), rows)).item();
  }
  return total / static_cast<double>(samples.size());
}

std::vector<std::vector<double>> softmax_anchors(const TaskNet& net, const TokenSeq& src,
                                                 const std::vector<Hypothesis>& samples) {
  Graph g;
  const Bound b = net.bind_constant(g);
  const Tensor memory = net.encode(g, b, src);
  std::vector<std::vector<double>> out;
  for (const auto& h : samples) {
    const Tensor p = ad::softmax(net.decode(g, b, memory, decoder_input(h.tokens)).logits);
    out.emplace_back(p.data().begin(), p.data().end());
  }
  return out;
}

void check_loss(const std::string& name, const GradcheckOptions& o, GradcheckEntry& e) {
  Checker chk(o, e);
  const bool fault = o.inject_fault == name;
  const ModelDims dims = tiny_dims();
  for (int cs = 0; cs < o.cases; ++cs) {
    RngStream rng(o.seed, "gradcheck:" + name, static_cast<std::uint64_t>(cs));
    TaskNet net(dims, rng.next_u64());
    EnergyNet qe(dims, rng.next_u64(), 8);
    ValueHead value(dims.d_model, rng.next_u64(), 0.3);
    const TokenSeq src = random_seq(rng, dims.vocab, false);
    RngStream sampler(o.seed, "gradcheck:samples:" + name, static_cast<std::uint64_t>(cs));
    auto draw = [&](const TokenSeq& s, int k) { return sample_k(net, s, k, 1.0, sampler, 5); };

    LossCase lc;
    // State captured by the closures below lives in this scope for the whole case.
    std::vector<Hypothesis> samples;
    std::vector<std::vector<double>> anchors, weights;
    std::vector<ParallelPair> labeled;
    std::vector<UnlabeledItem> unlabeled;
    std::vector<std::vector<std::vector<double>>> unl_anchors;
    std::vector<NceExample> nce_batch;
    std::vector<double> old_lp, rewards, advantages;
    double alpha = 0.0, beta = 0.0;

    if (name == "cross_entropy") {
      const TokenSeq tgt = random_seq(rng, dims.vocab, true);
      lc.stores = {&net};
      lc.analytic = [&, tgt](Graph& g, const std::vector<Bound>& b) {
        return cross_entropy(g, b[0], net, src, tgt);
      };
      lc.numeric = [&, tgt] {
        Graph g;
        return cross_entropy(g, net.bind_constant(g), net, src, tgt).item();
      };
    } else if (name == "energy_term") {
      samples = draw(src, 2);
      anchors = softmax_anchors(net, src, samples);
      lc.stores = {&net};
      lc.analytic = [&](Graph& g, const std::vector<Bound>& b) {
        return energy_term(g, b[0], net, qe.bind_constant(g), qe, src, samples);
      };
      lc.numeric = [&] { return surrogate_energy(net, qe, src, samples, anchors); };
    } else if (name == "joint_nmt_loss") {
      for (int i = 0; i < 2; ++i) {
        const TokenSeq s = random_seq(rng, dims.vocab, false);
        labeled.push_back({s, random_seq(rng, dims.vocab, true), std::nullopt, false});
        const TokenSeq u = random_seq(rng, dims.vocab, false);
        unlabeled.push_back({u, draw(u, 2)});
        unl_anchors.push_back(softmax_anchors(net, u, unlabeled.back().samples));
      }
      alpha = rng.uniform(0.1, 1.0);
      beta = rng.uniform(0.1, 1.0);
      lc.stores = {&net};
      lc.analytic = [&](Graph& g, const std::vector<Bound>& b) {
        return joint_nmt_loss(g, b[0], net, qe.bind_constant(g), qe, labeled, unlabeled, alpha, beta).loss;
      };
      lc.numeric = [&] {
        double ce = 0.0, en = 0.0;
        for (const auto& p : labeled) {
          Graph g;
          ce += cross_entropy(g, net.bind_constant(g), net, p.src, p.tgt).item();
        }
        for (std::size_t i = 0; i < unlabeled.size(); ++i)
          en += surrogate_energy(net, qe, unlabeled[i].src, unlabeled[i].samples, unl_anchors[i]);
        return alpha * ce / static_cast<double>(labeled.size()) +
               beta * en / static_cast<double>(unlabeled.size());
      };
    } else if (name == "nce_loss") {
      for (int i = 0; i < 2; ++i) {
        const TokenSeq s = random_seq(rng, dims.vocab, false);
        nce_batch.push_back({s, random_seq(rng, dims.vocab, true), draw(s, 2)});
      }
      lc.stores = {&qe};
      lc.analytic = [&](Graph& g, const std::vector<Bound>& b) { return nce_loss(g, b[0], qe, net, nce_batch); };
      lc.numeric = [&] {
        Graph g;
        return nce_loss(g, qe.bind_constant(g), qe, net, nce_batch).item();
      };
    } else if (name == "reinforce") {
      samples = draw(src, 3);
      RewardNormalizer norm;
      std::vector<double> r;
      for (std::size_t j = 0; j < samples.size(); ++j) r.push_back(rng.uniform());
      weights = {norm.normalize_batch(r)};
      lc.stores = {&net};
      lc.analytic = [&](Graph& g, const std::vector<Bound>& b) {
        return policy_gradient_loss(g, b[0], net, net.encode(g, b[0], src), samples, weights[0]);
      };
      lc.numeric = [&] {
        Graph g;
        const Bound b = net.bind_constant(g);
        return policy_gradient_loss(g, b, net, net.encode(g, b, src), samples, weights[0]).item();
      };
    } else if (name == "ppo") {
      samples = draw(src, 3);
      for (const auto& h : samples) {
        double off = 0.0;
        // Keep the ratio clear of the clip boundaries so central differences stay on one side.
        do off = rng.uniform(-0.5, 0.5);
        while (std::abs(std::exp(-off) - 0.8) < 0.02 || std::abs(std::exp(-off) - 1.2) < 0.02);
        old_lp.push_back(h.logprob + off);
        rewards.push_back(rng.uniform(-1.0, 1.0));
      }
      {
        Graph g;
        const Bound b = net.bind_constant(g);
        const Bound vb = value.bind_constant(g);
        const Tensor memory = net.encode(g, b, src);
        for (std::size_t j = 0; j < samples.size(); ++j) {
          const auto dec = net.decode(g, b, memory, decoder_input(samples[j].tokens));
          advantages.push_back(rewards[j] - value.value(g, vb, dec.states).item());
        }
      }
      lc.stores = {&net, &value};
      lc.analytic = [&](Graph& g, const std::vector<Bound>& b) {
        return ppo_loss(g, b[0], net, b[1], value, src, samples, old_lp, rewards).loss;
      };
      // Advantages are constants of the surrogate, so the oracle holds them fixed.
      lc.numeric = [&] {
        Graph g;
        const Bound b = net.bind_constant(g);
        const Bound vb = value.bind_constant(g);
        const Tensor memory = net.encode(g, b, src);
        std::vector<Tensor> lp;
        double verr = 0.0;
        for (std::size_t j = 0; j < samples.size(); ++j) {
          const auto dec = net.decode(g, b, memory, decoder_input(samples[j].tokens));
          lp.push_back(ad::reduce_sum(ad::pick(ad::log_softmax(dec.logits), samples[j].tokens)));
          const double d = value.value(g, vb, dec.states).item() - rewards[j];
          verr += d * d;
        }
        return ppo_surrogate(lp, old_lp, advantages, 0.2).item() +
               0.5 * verr / static_cast<double>(samples.size());
      };
    } else {
      throw std::invalid_argument("gradcheck: unknown loss " + name);
    }

    Graph g;
    std::vector<Bound> bounds;
    for (ParameterStore* s : lc.stores) bounds.push_back(s->bind(g));
    Tensor loss = lc.analytic(g, bounds);
    if (fault) loss = faulty(loss);
    const auto grads = ad::backward(g, loss);
    for (ParameterStore* s : lc.stores) s->zero_grad();
    ad::accumulate_parameter_grads(g, grads);

    std::vector<ad::Parameter*> params;
    std::size_t total = 0;
    for (ParameterStore* s : lc.stores)
      for (auto& p : s->parameters())
        if (!p.frozen) {
          params.push_back(&p);
          total += p.size();
        }
    bool ok = true;
    for (int c = 0; c < o.coords_per_case; ++c) {
      auto flat = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(total) - 1));
      std::size_t pi = 0;
      while (flat >= params[pi]->size()) flat -= params[pi++]->size();
      ad::Parameter& p = *params[pi];
      const double saved = p.value[flat];
      auto central = [&](double h) {
        p.value[flat] = saved + h;
        const double up = lc.numeric();
        p.value[flat] = saved - h;
        const double down = lc.numeric();
        p.value[flat] = saved;
        return (up - down) / (2.0 * h);
      };
      const double a = p.grad[flat];
      double numeric = central(o.h);
      // A relu inside the model can switch within [x - h, x + h]; retry with a tenth of the step.
      if (std::abs(a - numeric) > o.rtol * std::max(std::abs(a), std::abs(numeric)) + o.atol)
        numeric = central(o.h / 10.0);
      ok &= chk.compare(a, numeric, static_cast<std::uint64_t>(cs), p.name + "[" + std::to_string(flat) + "]");
    }
    ++e.cases;
    if (!ok) ++e.failures;
  }
}

}  // namespace

std::vector<std::string> gradcheck_names() {
  std::vector<std::string> all = op_names();
  all.insert(all.end(), loss_names().begin(), loss_names().end());
  return all;
}

GradcheckReport run_gradcheck(const GradcheckOptions& o) {
  const auto start = std::chrono::steady_clock::now();
  if (!o.inject_fault.empty()) {
    const auto names = gradcheck_names();
    if (std::find(names.begin(), names.end(), o.inject_fault) == names.end())
      throw std::invalid_argument("gradcheck: cannot inject a fault into unknown check '" + o.inject_fault + "'");
  }
  GradcheckReport rep;
  const auto& ops = op_names();
  for (const auto& name : gradcheck_names()) {
    if (!o.only.empty() && std::find(o.only.begin(), o.only.end(), name) == o.only.end()) continue;
    GradcheckEntry e;
    e.name = name;
    if (std::find(ops.begin(), ops.end(), name) != ops.end()) check_op(name, o, e);
    else check_loss(name, o, e);
    rep.entries.push_back(std::move(e));
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

}  // namespace qeebm
