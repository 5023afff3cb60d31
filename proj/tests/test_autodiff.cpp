#include <cmath>
#include <limits>
#include <numbers>

#include "doctest.h"
#include "helpers.hpp"
#include "qeebm/autodiff.hpp"
#include "qeebm/gradcheck.hpp"

using namespace qeebm;
using ad::Graph;
using ad::Tensor;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

double central_difference(const std::function<double(double)>& f, double x, double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

}  // namespace

TEST_SUITE("autodiff") {
  TEST_CASE("matmul with the identity and add with zero are exact") {
    Graph g;
    RngStream rng(3, "t");
    const auto a = testing::random_values(rng, 9);
    const Tensor A = g.constant({3, 3}, a);
    const Tensor I = g.constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    CHECK(values(ad::matmul(I, A)) == a);
    CHECK(values(ad::add(A, g.constant({3, 3}, std::vector<double>(9, 0.0)))) == a);
  }

  TEST_CASE("matmul agrees with a triple loop") {
    RngStream rng(4, "t");
    for (int trial = 0; trial < 20; ++trial) {
      Graph g;
      const auto a = testing::random_values(rng, 12, -3, 3), b = testing::random_values(rng, 6, -3, 3);
      const Tensor c = ad::matmul(g.constant({4, 3}, a), g.constant({3, 2}, b));
      REQUIRE(c.shape() == ad::Shape{4, 2});
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
          double s = 0.0;
          for (std::size_t k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 2 + j];
          CHECK(std::abs(c.at(i, j) - s) < 1e-12);
        }
    }
  }

  TEST_CASE("shape mismatches are rejected with both shapes named") {
    Graph g;
    const Tensor a = g.constant({2, 3}, std::vector<double>(6, 1.0));
    const Tensor b = g.constant({3, 2}, std::vector<double>(6, 1.0));
    try {
      ad::add(a, b);
      FAIL("expected a throw");
    } catch (const std::invalid_argument& e) {
      const std::string msg = e.what();
      CHECK(msg.find(ad::shape_string({2, 3})) != std::string::npos);
      CHECK(msg.find(ad::shape_string({3, 2})) != std::string::npos);
    }
    CHECK_THROWS_AS(ad::matmul(a, a), std::invalid_argument);
    CHECK_THROWS_AS(ad::add_row(a, g.constant({2}, {1, 2})), std::invalid_argument);
    CHECK_THROWS_AS(g.constant({2, 2}, {1, 2, 3}), std::invalid_argument);
  }

  TEST_CASE("softmax examples") {
    Graph g;
    const auto third = values(ad::softmax(g.constant({3}, {0, 0, 0})));
    for (double p : third) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    const auto sat = values(ad::softmax(g.constant({3}, {100, 0, 0})));
    CHECK(std::isfinite(sat[0]));
    CHECK(sat[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(sat[1] < 1e-40);

    const double x[] = {0.3, -1.2, 2.0};
    const double z = std::exp(0.3) + std::exp(-1.2) + std::exp(2.0);
    const auto p = values(ad::softmax(g.constant({3}, {x[0], x[1], x[2]})));
    for (int i = 0; i < 3; ++i) CHECK(std::abs(p[i] - std::exp(x[i]) / z) < 1e-15);

    CHECK_THROWS_AS(ad::softmax(g.constant({2}, {0.0, std::numeric_limits<double>::infinity()})),
                    std::invalid_argument);
    CHECK_THROWS_AS(ad::softmax(g.constant({2}, {0.0, std::nan("")})), std::invalid_argument);
  }

  TEST_CASE("softmax rows sum to one and log_softmax is shift invariant") {
    RngStream rng(5, "t");
    for (int trial = 0; trial < 100; ++trial) {
      Graph g;
      const std::size_t r = 1 + static_cast<std::size_t>(rng.uniform_int(0, 3));
      const std::size_t c = 1 + static_cast<std::size_t>(rng.uniform_int(0, 6));
      auto x = testing::random_values(rng, r * c, -20, 20);
      const Tensor sm = ad::softmax(g.constant({r, c}, x));
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          CHECK(sm.at(i, j) >= 0.0);
          s += sm.at(i, j);
        }
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
      const double shift = rng.uniform(-50, 50);
      auto y = x;
      for (auto& v : y) v += shift;
      const auto a = values(ad::log_softmax(g.constant({r, c}, x)));
      const auto b = values(ad::log_softmax(g.constant({r, c}, y)));
      CHECK(testing::max_abs_diff(a, b) < 1e-10);
    }
  }

  TEST_CASE("log_softmax examples") {
    Graph g;
    const auto half = values(ad::log_softmax(g.constant({2}, {0, 0})));
    CHECK(std::abs(half[0] + std::numbers::ln2) < 1e-15);
    CHECK(std::abs(half[1] + std::numbers::ln2) < 1e-15);

    RngStream rng(6, "t");
    for (int trial = 0; trial < 50; ++trial) {
      const auto x = testing::random_values(rng, 5, -4, 4);
      const auto ls = values(ad::log_softmax(g.constant({5}, x)));
      const auto sm = values(ad::softmax(g.constant({5}, x)));
      double best = -INFINITY;
      for (int i = 0; i < 5; ++i) {
        CHECK(std::abs(ls[i] - std::log(sm[i])) < 1e-12);
        best = std::max(best, ls[i]);
      }
      CHECK(best <= 0.0);
    }
  }

  TEST_CASE("sigmoid examples and symmetry") {
    Graph g;
    CHECK(ad::sigmoid(g.scalar(0.0)).item() == 0.5);
    CHECK(ad::sigmoid(g.scalar(50.0)).item() == doctest::Approx(1.0).epsilon(1e-15));
    const Tensor far = g.leaf({}, {-50.0});
    const Tensor s = ad::sigmoid(far);
    CHECK(s.item() > 0.0);
    const auto grads = ad::backward(g, s);
    CHECK(grads.of(far)[0] > 0.0);

    RngStream rng(7, "t");
    for (int trial = 0; trial < 200; ++trial) {
      const double x = rng.uniform(-40, 40);
      CHECK(std::abs(ad::stable_sigmoid(-x) - (1.0 - ad::stable_sigmoid(x))) <= 1e-15);
    }

    Graph g2;
    const Tensor x = g2.leaf({}, {0.7});
    const auto d = ad::backward(g2, ad::sigmoid(x)).of(x)[0];
    const double fd = central_difference([](double v) { return ad::stable_sigmoid(v); }, 0.7);
    CHECK(std::abs(d - fd) <= 1e-6 * std::abs(fd));
  }

  TEST_CASE("ste_onehot forward is the argmax one-hot with lowest-index ties") {
    Graph g;
    CHECK(values(ad::ste_onehot(g.constant({3}, {2, 1, -1}))) == std::vector<double>{1, 0, 0});
    CHECK(values(ad::ste_onehot(g.constant({2}, {1, 1}))) == std::vector<double>{1, 0});

    RngStream rng(8, "t");
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t r = 1 + static_cast<std::size_t>(rng.uniform_int(0, 4));
      const std::size_t c = 1 + static_cast<std::size_t>(rng.uniform_int(0, 7));
      auto x = testing::random_values(rng, r * c, -3, 3);
      // Coarse values make ties common.
      for (auto& v : x) v = std::round(v);
      const Tensor oh = ad::ste_onehot(g.constant({r, c}, x));
      for (std::size_t i = 0; i < r; ++i) {
        int ones = 0;
        std::size_t at = 0;
        for (std::size_t j = 0; j < c; ++j) {
          const double v = oh.at(i, j);
          CHECK((v == 0.0 || v == 1.0));
          if (v == 1.0) {
            ++ones;
            at = j;
          }
        }
        CHECK(ones == 1);
        const auto row = std::span(x).subspan(i * c, c);
        CHECK(at == static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
      }
    }
  }

  TEST_CASE("ste_onehot gradient equals the softmax path under the same downstream") {
    RngStream rng(9, "t");
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t r = 1 + static_cast<std::size_t>(rng.uniform_int(0, 4));
      const std::size_t c = 2 + static_cast<std::size_t>(rng.uniform_int(0, 6));
      const auto x = testing::random_values(rng, r * c, -3, 3);
      const auto w = testing::random_values(rng, r * c, -2, 2);
      auto grad_through = [&](bool ste) {
        Graph g;
        const Tensor logits = g.leaf({r, c}, x);
        const Tensor rows = ste ? ad::ste_onehot(logits) : ad::softmax(logits);
        const Tensor loss = ad::reduce_sum(ad::mul(rows, g.constant({r, c}, w)));
        const auto grads = ad::backward(g, loss);
        return std::vector<double>(grads.of(logits).begin(), grads.of(logits).end());
      };
      CHECK(testing::max_abs_diff(grad_through(true), grad_through(false)) < 1e-15);
    }
  }

  TEST_CASE("ste_onehot applies the softmax backward rule to a nonlinear downstream gradient") {
    RngStream rng(10, "t");
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t c = 5;
      const auto x = testing::random_values(rng, c, -3, 3);
      const auto w = testing::random_values(rng, c, -2, 2);
      Graph g;
      const Tensor logits = g.leaf({1, c}, x);
      const Tensor oh = ad::ste_onehot(logits);
      const Tensor loss = ad::reduce_sum(ad::tanh(ad::mul(oh, g.constant({1, c}, w))));
      const auto grads = ad::backward(g, loss);

      std::vector<double> upstream(c), probs(c), expect(c, 0.0);
      for (std::size_t j = 0; j < c; ++j) {
        const double t = std::tanh(oh.data()[j] * w[j]);
        upstream[j] = (1.0 - t * t) * w[j];
      }
      ad::softmax_row(x, probs);
      ad::softmax_backward_row(probs, upstream, expect);
      CHECK(testing::max_abs_diff(grads.of(logits), expect) < 1e-15);
    }
  }

  TEST_CASE("backward: sum, hand chain rule, scalar requirement") {
    Graph g;
    const Tensor x = g.leaf({4}, {1, -2, 3, 0.5});
    const auto gs = ad::backward(g, ad::reduce_sum(x));
    CHECK(std::vector<double>(gs.of(x).begin(), gs.of(x).end()) == std::vector<double>{1, 1, 1, 1});
    CHECK_THROWS_AS(ad::backward(g, x), std::invalid_argument);

    Graph h;
    const double av = 0.8, bv = -1.3;
    const Tensor a = h.leaf({}, {av});
    const Tensor b = h.leaf({}, {bv});
    const auto gr = ad::backward(h, ad::sigmoid(ad::mul(a, b)));
    const double s = 1.0 / (1.0 + std::exp(-av * bv));
    CHECK(std::abs(gr.of(a)[0] - s * (1.0 - s) * bv) < 1e-12);
    CHECK(std::abs(gr.of(b)[0] - s * (1.0 - s) * av) < 1e-12);
  }

  TEST_CASE("graph order is topological and backward is bit-deterministic") {
    RngStream rng(11, "t");
    Graph g;
    const Tensor a = g.leaf({3, 4}, testing::random_values(rng, 12));
    const Tensor b = g.leaf({4, 2}, testing::random_values(rng, 8));
    const Tensor v = g.leaf({2}, testing::random_values(rng, 2));
    const Tensor h = ad::tanh(ad::add_row(ad::matmul(a, b), v));
    const Tensor loss = ad::reduce_mean(ad::mul(ad::log_softmax(h), ad::sigmoid(h)));
    for (ad::NodeId id = 0; id < g.size(); ++id)
      for (ad::NodeId in : g.inputs(id)) CHECK(in < id);
    const auto g1 = ad::backward(g, loss);
    const auto g2 = ad::backward(g, loss);
    for (const Tensor& t : {a, b, v})
      CHECK(std::vector<double>(g1.of(t).begin(), g1.of(t).end()) ==
            std::vector<double>(g2.of(t).begin(), g2.of(t).end()));
  }

  TEST_CASE("random composed graphs match central differences") {
    RngStream rng(12, "t");
    for (int trial = 0; trial < 100; ++trial) {
      const auto a0 = testing::random_values(rng, 6), b0 = testing::random_values(rng, 6);
      const auto w = testing::random_values(rng, 2);
      auto build = [&](Graph& g, const std::vector<double>& a, const std::vector<double>& b, bool track) {
        const Tensor A = g.leaf({2, 3}, a, track);
        const Tensor B = g.leaf({3, 2}, b, track);
        // Six ops: matmul, tanh, log_softmax, mul, sigmoid, reduce_sum.
        const Tensor h = ad::tanh(ad::matmul(A, B));
        const Tensor y = ad::mul(ad::log_softmax(h), ad::sigmoid(h));
        return std::tuple{A, B, ad::reduce_sum(ad::mul(ad::mean_rows(y), g.constant({2}, w)))};
      };
      Graph g;
      auto [A, B, loss] = build(g, a0, b0, true);
      const auto grads = ad::backward(g, loss);
      for (int which = 0; which < 2; ++which)
        for (std::size_t i = 0; i < 6; ++i) {
          auto f = [&](double delta) {
            auto a = a0, b = b0;
            (which == 0 ? a : b)[i] += delta;
            Graph q;
            return std::get<2>(build(q, a, b, false)).item();
          };
          const double fd = (f(1e-5) - f(-1e-5)) / 2e-5;
          const double an = grads.of(which == 0 ? A : B)[i];
          CHECK(std::abs(an - fd) <= 1e-4 * std::max(std::abs(an), std::abs(fd)) + 1e-8);
        }
    }
  }

  TEST_CASE("gradcheck suite passes and catches an injected fault") {
    GradcheckOptions o;
    o.cases = 5;
    const auto rep = run_gradcheck(o);
    CHECK(rep.ok());
    CHECK(rep.entries.size() == gradcheck_names().size());

    for (const char* target : {"matmul", "ste_onehot", "energy_term", "nce_loss"}) {
      GradcheckOptions bad = o;
      bad.inject_fault = target;
      bad.only = {target, "add"};
      const auto r = run_gradcheck(bad);
      REQUIRE(r.entries.size() == 2);
      for (const auto& e : r.entries) {
        if (e.name == target) CHECK(e.failures == e.cases);
        else CHECK(e.failures == 0);
      }
      CHECK_FALSE(r.ok());
    }
    GradcheckOptions unknown = o;
    unknown.inject_fault = "no-such-op";
    CHECK_THROWS_AS(run_gradcheck(unknown), std::invalid_argument);
  }
}
