#include <cmath>
#include <map>

#include "doctest.h"
#include "helpers.hpp"
#include "qeebm/decoding.hpp"
#include "qeebm/losses.hpp"

using namespace qeebm;
using ad::Graph;

TEST_SUITE("decoding") {
  TEST_CASE("a net rigged towards one token emits it up to the length cap") {
    TaskNet net(testing::small_dims(), 1);
    testing::rig_token(net, 7);
    const Hypothesis h = greedy_decode(net, TokenSeq{4, 5, 6}, 6);
    CHECK(h.tokens == TokenSeq(6, 7));
    CHECK_FALSE(h.finished());
    CHECK(greedy_decode(net, TokenSeq{4, 5, 6}, 6).tokens == h.tokens);
  }

  TEST_CASE("greedy decoding stops at EOS and respects the default cap") {
    TaskNet net(testing::small_dims(), 1);
    testing::rig_token(net, special::kEos);
    const Hypothesis h = greedy_decode(net, TokenSeq{4, 5}, 9);
    CHECK(h.tokens == TokenSeq{special::kEos});
    CHECK(h.finished());
    CHECK(default_max_len(5) == 14);
    CHECK_THROWS_AS(greedy_decode(net, TokenSeq{4, 5}, 0), std::invalid_argument);
  }

  TEST_CASE("greedy output is invariant to positive rescaling of the logits") {
    RngStream rng(1, "t");
    for (int trial = 0; trial < 10; ++trial) {
      TaskNet net(testing::small_dims(), 100 + static_cast<std::uint64_t>(trial));
      const TokenSeq src = testing::random_tokens(rng, 10, 2, 6);
      const auto before = greedy_decode(net, src, 10).tokens;
      const double c = rng.uniform(0.2, 5.0);
      for (const char* name : {"out.w", "out.b"})
        for (double& v : testing::param(net, name).value) v *= c;
      CHECK(greedy_decode(net, src, 10).tokens == before);
    }
  }

  TEST_CASE("near-zero temperature sampling reproduces greedy output") {
    RngStream rng(2, "t");
    for (int trial = 0; trial < 10; ++trial) {
      TaskNet net(testing::small_dims(), 200 + static_cast<std::uint64_t>(trial));
      const TokenSeq src = testing::random_tokens(rng, 10, 2, 6);
      const auto greedy = greedy_decode(net, src, 10).tokens;
      RngStream s(trial, "sample");
      for (const auto& h : sample_k(net, src, 4, 1e-6, s, 10)) CHECK(h.tokens == greedy);
    }
  }

  TEST_CASE("sampling is reproducible per stream and rejects bad arguments") {
    TaskNet net(testing::small_dims(), 3);
    RngStream a(5, "sample:unlabeled:0", 3), b(5, "sample:unlabeled:0", 3), c(6, "sample:unlabeled:0", 3);
    const auto x = sample_k(net, TokenSeq{4, 5, 6}, 8, 1.0, a, 10);
    const auto y = sample_k(net, TokenSeq{4, 5, 6}, 8, 1.0, b, 10);
    const auto z = sample_k(net, TokenSeq{4, 5, 6}, 8, 1.0, c, 10);
    REQUIRE(x.size() == 8);
    bool any_diff = false;
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(x[i].tokens == y[i].tokens);
      CHECK(x[i].logprob == y[i].logprob);
      any_diff |= x[i].tokens != z[i].tokens;
    }
    CHECK(any_diff);
    CHECK_THROWS_AS(sample_k(net, TokenSeq{4}, 1, 0.0, a, 5), std::invalid_argument);
    CHECK_THROWS_AS(sample_k(net, TokenSeq{4}, 0, 1.0, a, 5), std::invalid_argument);
  }

  TEST_CASE("single-step sampling frequencies match the model distribution") {
    TaskNet net(testing::small_dims(), 4);
    testing::make_uniform(net);
    auto& b = testing::param(net, "out.b").value;
    std::fill(b.begin(), b.end(), -1000.0);
    const std::map<Token, double> p{{special::kEos, 0.7}, {4, 0.2}, {5, 0.1}};
    for (auto [tok, prob] : p) b[static_cast<std::size_t>(tok)] = std::log(prob);

    const int n = 100000;
    RngStream rng(9, "freq");
    std::map<Token, int> counts;
    for (const auto& h : sample_k(net, TokenSeq{6, 7}, n, 1.0, rng, 1)) ++counts[h.tokens.at(0)];
    for (auto [tok, prob] : p) {
      const double sd = std::sqrt(n * prob * (1 - prob));
      CHECK(std::abs(counts[tok] - n * prob) < 3.0 * sd);
    }
    CHECK(counts.size() == 3);
  }

  TEST_CASE("uniform net: sequence log-probability is -T ln V") {
    TaskNet net(testing::small_dims(5), 5);
    testing::make_uniform(net);
    const TokenSeq tgt{4, 4, special::kEos};
    CHECK(std::abs(sequence_logprob_value(net, TokenSeq{4}, tgt) + 3 * std::log(5.0)) < 1e-12);
    Graph g;
    CHECK(std::abs(sequence_logprob(g, net.bind_constant(g), net, TokenSeq{4}, tgt).item() + 3 * std::log(5.0)) < 1e-12);
  }

  TEST_CASE("enumerated sequence probabilities account for all mass") {
    TaskNet net(ModelDims{5, 4, 2, 8, 0.5}, 6);
    const TokenSeq src{4, 4};
    double finished = 0.0, total = 0.0;
    for (Token a = 0; a < 5; ++a) {
      if (a == special::kEos) {
        finished += std::exp(sequence_logprob_value(net, src, TokenSeq{a}));
        continue;
      }
      for (Token b = 0; b < 5; ++b) {
        const double p = std::exp(sequence_logprob_value(net, src, TokenSeq{a, b}));
        if (b == special::kEos) finished += p;
        total += p;
      }
    }
    total += std::exp(sequence_logprob_value(net, src, TokenSeq{special::kEos}));
    CHECK(finished <= 1.0);
    CHECK(std::abs(total - 1.0) < 1e-12);
  }

  TEST_CASE("stored log-probabilities match teacher-forced rescoring") {
    RngStream rng(7, "t");
    TaskNet net(testing::small_dims(), 7);
    for (int trial = 0; trial < 20; ++trial) {
      const TokenSeq src = testing::random_tokens(rng, 10, 2, 6);
      RngStream s(trial, "sample");
      for (const auto& h : sample_k(net, src, 3, 1.0, s, 10)) {
        double sum = 0.0;
        for (double v : h.token_logprobs) sum += v;
        CHECK(h.token_logprobs.size() == h.tokens.size());
        CHECK(std::abs(sum - h.logprob) < 1e-10);
        Graph g;
        const double taped = sequence_logprob(g, net.bind_constant(g), net, src, h.tokens).item();
        CHECK(std::abs(taped - h.logprob) < 1e-10);
        CHECK(std::abs(sequence_logprob_value(net, src, h.tokens) - h.logprob) < 1e-10);
      }
    }
  }

  TEST_CASE("teacher-forced helpers") {
    CHECK(decoder_input(TokenSeq{5, 6, special::kEos}) == TokenSeq{special::kBos, 5, 6});
    CHECK(strip_eos(TokenSeq{5, 6, special::kEos, 7}) == TokenSeq{5, 6});
    CHECK(strip_eos(TokenSeq{5, 6}) == TokenSeq{5, 6});
  }
}
