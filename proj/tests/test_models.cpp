#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "qeebm/decoding.hpp"
#include "qeebm/models.hpp"
#include "qeebm/optim.hpp"

using namespace qeebm;
using ad::Graph;
using ad::Tensor;

namespace {

std::vector<double> taped_logits(const TaskNet& net, const TokenSeq& src, const TokenSeq& tgt_in) {
  Graph g;
  const Tensor l = net.forward(g, net.bind_constant(g), src, tgt_in);
  return {l.data().begin(), l.data().end()};
}

Tensor onehot_rows(Graph& g, const TokenSeq& hyp, int vocab) {
  std::vector<double> rows(hyp.size() * static_cast<std::size_t>(vocab), 0.0);
  for (std::size_t i = 0; i < hyp.size(); ++i) rows[i * static_cast<std::size_t>(vocab) + static_cast<std::size_t>(hyp[i])] = 1.0;
  return g.constant({hyp.size(), static_cast<std::size_t>(vocab)}, rows);
}

}  // namespace

TEST_SUITE("models") {
  TEST_CASE("logit shape and bitwise determinism") {
    const ModelDims dims;
    TaskNet net(dims, 3);
    const TokenSeq src{4, 9, 17, 5}, tgt_in{special::kBos, 8, 11};
    const auto a = taped_logits(net, src, tgt_in);
    CHECK(a.size() == tgt_in.size() * static_cast<std::size_t>(dims.vocab));
    for (double v : a) CHECK(std::isfinite(v));
    CHECK(a == taped_logits(net, src, tgt_in));
    TaskNet twin(dims, 3);
    CHECK(a == taped_logits(twin, src, tgt_in));
  }

  TEST_CASE("initialization ranges") {
    const ModelDims dims;
    TaskNet net(dims, 1);
    for (const auto& p : net.parameters()) {
      const bool norm = p.name.find(".gain") != std::string::npos || p.name.find(".bias") != std::string::npos;
      for (double v : p.value) {
        if (p.name.ends_with(".gain")) CHECK(v == 1.0);
        else if (norm) CHECK(v == 0.0);
        else CHECK(std::abs(v) <= dims.init_range);
      }
    }
  }

  TEST_CASE("decoder is causal: future target tokens never change earlier logits") {
    RngStream rng(11, "t");
    TaskNet net(ModelDims{}, 4);
    const auto V = static_cast<std::size_t>(net.dims().vocab);
    for (int trial = 0; trial < 20; ++trial) {
      const TokenSeq src = testing::random_tokens(rng, 24, 3, 8);
      TokenSeq tgt_in{special::kBos};
      const auto extra = testing::random_tokens(rng, 24, 4, 7);
      tgt_in.insert(tgt_in.end(), extra.begin(), extra.end());
      const std::size_t keep = static_cast<std::size_t>(rng.uniform_int(1, static_cast<int>(tgt_in.size()) - 1));
      TokenSeq changed = tgt_in;
      for (std::size_t i = keep; i < changed.size(); ++i) changed[i] = testing::random_tokens(rng, 24, 1, 1)[0];
      const auto a = taped_logits(net, src, tgt_in), b = taped_logits(net, src, changed);
      for (std::size_t i = 0; i < keep * V; ++i) CHECK(a[i] == b[i]);
    }
  }

  TEST_CASE("incremental decoder agrees with the taped forward") {
    RngStream rng(12, "t");
    TaskNet net(ModelDims{}, 5);
    const auto V = static_cast<std::size_t>(net.dims().vocab);
    for (int trial = 0; trial < 10; ++trial) {
      const TokenSeq src = testing::random_tokens(rng, 24, 2, 10);
      TokenSeq tgt_in{special::kBos};
      const auto extra = testing::random_tokens(rng, 24, 1, 8);
      tgt_in.insert(tgt_in.end(), extra.begin(), extra.end());
      const auto taped = taped_logits(net, src, tgt_in);
      TaskNet::Stepper st(net, src);
      for (std::size_t t = 0; t < tgt_in.size(); ++t) {
        const auto step = st.step(tgt_in[t]);
        CHECK(testing::max_abs_diff(step, std::span(taped).subspan(t * V, V)) < 1e-12);
      }
    }
  }

  TEST_CASE("out-of-range tokens are rejected") {
    TaskNet net(ModelDims{}, 1);
    Graph g;
    const Bound b = net.bind_constant(g);
    CHECK_THROWS_AS(net.forward(g, b, TokenSeq{4, 24}, TokenSeq{special::kBos}), std::invalid_argument);
    CHECK_THROWS_AS(net.forward(g, b, TokenSeq{4, -1}, TokenSeq{special::kBos}), std::invalid_argument);
    CHECK_THROWS_AS(TaskNet(ModelDims{4, 8, 2, 8, 0.1}, 1), std::invalid_argument);
    CHECK_THROWS_AS(TaskNet(ModelDims{24, 10, 3, 8, 0.1}, 1), std::invalid_argument);
  }

  TEST_CASE("scorer output lies in (0, 1) and is representation invariant") {
    RngStream rng(13, "t");
    EnergyNet qe(ModelDims{}, 6);
    for (int trial = 0; trial < 30; ++trial) {
      const TokenSeq src = testing::random_tokens(rng, 24, 2, 10);
      TokenSeq hyp = testing::random_tokens(rng, 24, 1, 10);
      hyp.push_back(special::kEos);
      Graph g;
      const Bound b = qe.bind_constant(g);
      const double by_ids = qe.score_tokens(g, b, src, hyp).item();
      const double by_rows = qe.score(g, b, src, onehot_rows(g, hyp, 24)).item();
      CHECK(by_ids > 0.0);
      CHECK(by_ids < 1.0);
      CHECK(by_ids == by_rows);
      CHECK(qe.score_value(src, hyp) == by_ids);
    }
  }

  TEST_CASE("scorer rejects rows that are not distributions") {
    EnergyNet qe(ModelDims{}, 6);
    Graph g;
    const Bound b = qe.bind_constant(g);
    std::vector<double> rows(2 * 24, 0.0);
    rows[5] = 1.0;
    rows[24 + 6] = 0.9;
    CHECK_THROWS_AS(qe.score(g, b, TokenSeq{4, 5}, g.constant({2, 24}, rows)), std::invalid_argument);
  }

  TEST_CASE("attaching adapters preserves outputs and freezes the host") {
    const TokenSeq src{4, 9, 17, 5}, tgt_in{special::kBos, 8, 11}, hyp{8, 11, special::kEos};
    TaskNet net(ModelDims{}, 7);
    EnergyNet qe(ModelDims{}, 8);
    const auto before = taped_logits(net, src, tgt_in);
    const double s_before = qe.score_value(src, hyp);
    const std::size_t host_params = net.parameters().size(), qe_host = qe.parameters().size();

    net.attach_adapters(4, 9);
    qe.attach_adapters(4, 9);
    CHECK(taped_logits(net, src, tgt_in) == before);
    CHECK(qe.score_value(src, hyp) == s_before);

    std::size_t adapter_values = 0;
    for (std::size_t i = host_params; i < net.parameters().size(); ++i) adapter_values += net.parameters()[i].size();
    CHECK(net.trainable_count() == adapter_values);
    std::size_t qe_adapter = 0;
    for (std::size_t i = qe_host; i < qe.parameters().size(); ++i) qe_adapter += qe.parameters()[i].size();
    CHECK(qe.trainable_count() == qe_adapter);

    CHECK_THROWS_AS(net.attach_adapters(4, 1), std::logic_error);
    TaskNet other(ModelDims{}, 1);
    CHECK_THROWS_AS(other.attach_adapters(32, 1), std::invalid_argument);
    CHECK_THROWS_AS(other.attach_adapters(0, 1), std::invalid_argument);
  }

  TEST_CASE("a training step on an adapted model moves only adapter parameters") {
    EnergyNet qe(ModelDims{}, 10);
    qe.attach_adapters(4, 11);
    const auto host_hash = qe.hash(true, false);
    const auto adapter_hash = qe.hash(false, true);
    Adam opt({1e-2});
    for (int step = 0; step < 3; ++step) {
      Graph g;
      const Bound b = qe.bind(g);
      const Tensor s = qe.score_tokens(g, b, TokenSeq{4, 9, 17}, TokenSeq{8, 11, special::kEos});
      qe.zero_grad();
      ad::accumulate_parameter_grads(g, ad::backward(g, ad::log(s)));
      ParameterStore* stores[] = {&qe};
      opt.step(stores, 5.0);
    }
    CHECK(qe.hash(true, false) == host_hash);
    CHECK(qe.hash(false, true) != adapter_hash);
  }

  TEST_CASE("value head reads mean-pooled states") {
    ValueHead head(4, 1);
    Graph g;
    const Tensor states = g.constant({2, 4}, {1, 2, 3, 4, 3, 2, 1, 0});
    const auto& w = head.parameters()[0].value;
    const double expect = 2 * w[0] + 2 * w[1] + 2 * w[2] + 2 * w[3] + head.parameters()[1].value[0];
    CHECK(head.value(g, head.bind_constant(g), states).item() == doctest::Approx(expect).epsilon(1e-14));
  }
}
