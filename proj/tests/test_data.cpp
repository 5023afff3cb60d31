#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "qeebm/data.hpp"
#include "qeebm/decoding.hpp"

using namespace qeebm;

namespace {

TaskSpec small_spec(std::uint64_t seed = 3) {
  TaskSpec s;
  s.vocab = 12;
  s.min_len = 3;
  s.max_len = 6;
  s.pool_size = 101;
  s.valid_size = 20;
  s.test_size = 20;
  s.rating_size = 30;
  s.seed = seed;
  return s;
}

// Plain recursive Levenshtein distance.
std::size_t brute_edit(const TokenSeq& a, std::size_t i, const TokenSeq& b, std::size_t j) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  const std::size_t sub = brute_edit(a, i + 1, b, j + 1) + (a[i] == b[j] ? 0 : 1);
  return std::min({sub, brute_edit(a, i + 1, b, j) + 1, brute_edit(a, i, b, j + 1) + 1});
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("copy task reproduces the source") {
    TaskSpec s = small_spec();
    s.substitute = false;
    s.noise_fraction = 0.0;
    const DataPools p = generate_corpus(s);
    for (const auto& pair : p.labeled) {
      TokenSeq expect = pair.src;
      expect.push_back(special::kEos);
      CHECK(pair.tgt == expect);
    }
  }

  TEST_CASE("substitution is a permutation of content tokens") {
    const DataPools p = generate_corpus(small_spec());
    for (Token t = 0; t < special::kCount; ++t) CHECK(p.mapping[static_cast<std::size_t>(t)] == t);
    std::vector<Token> inverse(p.mapping.size(), -1);
    for (std::size_t t = 0; t < p.mapping.size(); ++t) inverse[static_cast<std::size_t>(p.mapping[t])] = static_cast<Token>(t);
    for (Token t : inverse) CHECK(t >= 0);
    for (const auto& pair : p.valid) {
      TokenSeq back;
      for (Token t : strip_eos(pair.tgt)) back.push_back(inverse[static_cast<std::size_t>(t)]);
      CHECK(back == pair.src);
    }
  }

  TEST_CASE("swap_pairs swaps adjacent targets after substitution") {
    TaskSpec s = small_spec();
    s.substitute = false;
    s.swap_pairs = true;
    std::vector<Token> id(12);
    for (int i = 0; i < 12; ++i) id[static_cast<std::size_t>(i)] = i;
    CHECK(task_target(s, id, TokenSeq{4, 5, 6, 7, 8}) == TokenSeq{5, 4, 7, 6, 8, special::kEos});
  }

  TEST_CASE("corpus generation is deterministic with disjoint splits") {
    const DataPools a = generate_corpus(small_spec(9)), b = generate_corpus(small_spec(9));
    CHECK(a.mapping == b.mapping);
    CHECK(a.unlabeled == b.unlabeled);
    REQUIRE(a.labeled.size() == b.labeled.size());
    for (std::size_t i = 0; i < a.labeled.size(); ++i) CHECK(a.labeled[i].tgt == b.labeled[i].tgt);

    std::set<TokenSeq> sources;
    std::size_t total = 0;
    for (const auto* split : {&a.valid, &a.test, &a.rating})
      for (const auto& pair : *split) {
        sources.insert(pair.src);
        ++total;
      }
    for (const auto& s : a.unlabeled) {
      sources.insert(s);
      ++total;
    }
    CHECK(sources.size() == total);
  }

  TEST_CASE("labeled pool is a fifth of the pool and carries the requested noise") {
    const DataPools p = generate_corpus(small_spec());
    CHECK(p.unlabeled.size() == 101);
    CHECK(p.labeled.size() == 21);
    const auto noisy = std::count_if(p.labeled.begin(), p.labeled.end(), [](const ParallelPair& x) { return x.noisy; });
    CHECK(noisy == std::lround(0.2 * 21));
    for (const auto& pair : p.labeled) {
      TokenSeq gold = task_target(p.spec, p.mapping, pair.src);
      CHECK((pair.tgt == gold) == !pair.noisy);
      CHECK(pair.tgt.back() == special::kEos);
    }
  }

  TEST_CASE("degenerate specs are rejected") {
    TaskSpec s = small_spec();
    s.vocab = 7;
    CHECK_THROWS_AS(generate_corpus(s), std::invalid_argument);
    s = small_spec();
    s.max_len = 2;
    CHECK_THROWS_AS(generate_corpus(s), std::invalid_argument);
    s = small_spec();
    s.min_len = s.max_len = 2;
    s.pool_size = 5000;
    CHECK_THROWS_AS(generate_corpus(s), std::invalid_argument);
    s = small_spec();
    s.noise_fraction = 1.5;
    CHECK_THROWS_AS(validate(s), std::invalid_argument);
  }

  TEST_CASE("oracle quality examples") {
    CHECK(oracle_quality(TokenSeq{4, 5, 6}, TokenSeq{4, 5, 6}) == 1.0);
    CHECK(oracle_quality(TokenSeq{7, 8, 9}, TokenSeq{4, 5, 6}) == 0.0);
    CHECK(oracle_quality(TokenSeq{4, 5, 6, 9}, TokenSeq{4, 5, 6, 7}) == 0.75);
    CHECK(oracle_quality(TokenSeq{}, TokenSeq{}) == 1.0);
    CHECK(oracle_quality(TokenSeq{}, TokenSeq{4}) == 0.0);
  }

  TEST_CASE("edit distance agrees with brute force and oracle quality stays in [0, 1]") {
    RngStream rng(4, "edit");
    for (int trial = 0; trial < 300; ++trial) {
      const TokenSeq a = testing::random_tokens(rng, 7, 0, 6), b = testing::random_tokens(rng, 7, 0, 6);
      CHECK(edit_distance(a, b) == brute_edit(a, 0, b, 0));
      CHECK(edit_distance(a, b) == edit_distance(b, a));
      const double q = oracle_quality(a, b);
      CHECK(q >= 0.0);
      CHECK(q <= 1.0);
      CHECK(q == oracle_quality(b, a));
      CHECK((q == 1.0) == (a == b));
    }
  }

  TEST_CASE("corruption changes at least one content token and keeps EOS") {
    RngStream rng(5, "corrupt");
    for (int trial = 0; trial < 200; ++trial) {
      TokenSeq t = testing::random_tokens(rng, 12, 1, 6);
      t.push_back(special::kEos);
      const TokenSeq c = corrupt_target(t, 12, rng);
      CHECK(c.size() == t.size());
      CHECK(c != t);
      CHECK(c.back() == special::kEos);
      for (std::size_t i = 0; i + 1 < c.size(); ++i) {
        CHECK(c[i] >= special::kCount);
        CHECK(c[i] < 12);
      }
    }
  }

  TEST_CASE("top fraction keeps the best scores in original order") {
    CHECK(top_fraction(std::vector<double>{0.9, 0.1, 0.5}, 0.5) == std::vector<std::size_t>{0, 2});
    CHECK(top_fraction(std::vector<double>{0.3, 0.3, 0.3}, 0.34) == std::vector<std::size_t>{0, 1});
    CHECK_THROWS_AS(top_fraction(std::vector<double>{0.1}, 0.0), std::invalid_argument);
    RngStream rng(6, "top");
    for (int trial = 0; trial < 100; ++trial) {
      const auto n = static_cast<std::size_t>(rng.uniform_int(1, 40));
      const auto scores = testing::random_values(rng, n, 0.0, 1.0);
      const double keep = rng.uniform(0.05, 1.0);
      const auto kept = top_fraction(scores, keep);
      CHECK(kept.size() == static_cast<std::size_t>(std::ceil(keep * static_cast<double>(n))));
      CHECK(std::is_sorted(kept.begin(), kept.end()));
      double worst_kept = 1.0, best_dropped = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (std::binary_search(kept.begin(), kept.end(), i)) worst_kept = std::min(worst_kept, scores[i]);
        else best_dropped = std::max(best_dropped, scores[i]);
      }
      CHECK(worst_kept >= best_dropped);
    }
  }

  TEST_CASE("filtering caches scorer outputs on kept pairs") {
    const DataPools p = generate_corpus(small_spec());
    EnergyNet qe(ModelDims{12, 8, 2, 16, 0.3}, 2);
    const auto kept = filter_labeled(p.labeled, qe, 0.8);
    CHECK(kept.size() == 17);
    for (const auto& k : kept) CHECK(*k.qe == qe.score_value(k.src, k.tgt));
  }

  TEST_CASE("cosine similarity") {
    CHECK(cosine(std::vector<double>{1, 2, 2}, std::vector<double>{2, 1, 2}) == doctest::Approx(8.0 / 9.0).epsilon(1e-15));
    CHECK(cosine(std::vector<double>{1, 0}, std::vector<double>{0, 3}) == 0.0);
    CHECK_THROWS_AS(cosine(std::vector<double>{1}, std::vector<double>{1, 2}), std::invalid_argument);
  }

  TEST_CASE("nearest-neighbour pairing") {
    EmbeddingIndex q, c;
    q.add(0, {1, 0});
    q.add(1, {0, 1});
    c.add(10, {0.1, 1});
    c.add(11, {1, 0.1});
    c.add(12, {1, 0.2});
    CHECK(nn_pair_batches(q, c) == std::vector<std::size_t>{1, 0});

    // Second query must skip the candidate already taken.
    EmbeddingIndex q2;
    q2.add(0, {1, 0});
    q2.add(1, {1, 0});
    CHECK(nn_pair_batches(q2, c) == std::vector<std::size_t>{1, 2});

    EmbeddingIndex small;
    small.add(0, {1, 0});
    CHECK_THROWS_AS(nn_pair_batches(q, small), std::invalid_argument);
    CHECK_THROWS_AS(small.add(1, {0, 0}), std::invalid_argument);
  }

  TEST_CASE("pairing is invariant to positive rescaling of embeddings") {
    RngStream rng(7, "nn");
    for (int trial = 0; trial < 50; ++trial) {
      EmbeddingIndex q, c, qs, cs;
      for (std::size_t i = 0; i < 4; ++i) {
        auto v = testing::random_values(rng, 5);
        auto w = v;
        const double f = rng.uniform(0.1, 10.0);
        for (double& x : w) x *= f;
        q.add(i, v);
        qs.add(i, w);
      }
      for (std::size_t i = 0; i < 6; ++i) {
        auto v = testing::random_values(rng, 5);
        auto w = v;
        const double f = rng.uniform(0.1, 10.0);
        for (double& x : w) x *= f;
        c.add(i, v);
        cs.add(i, w);
      }
      CHECK(nn_pair_batches(q, c) == nn_pair_batches(qs, cs));
    }
  }

  TEST_CASE("centroid is the normalized mean") {
    const std::vector<std::vector<double>> e{{3, 0}, {0, 4}, {9, 9}};
    const std::vector<std::size_t> members{0, 1};
    const auto c = centroid(e, members);
    CHECK(c[0] == doctest::Approx(0.6));
    CHECK(c[1] == doctest::Approx(0.8));
  }

  TEST_CASE("batching") {
    const std::vector<std::size_t> order{5, 4, 3, 2, 1, 0, 9};
    const auto keep = make_batches(order, 3, false);
    REQUIRE(keep.size() == 3);
    CHECK(keep[2] == std::vector<std::size_t>{9});
    CHECK(make_batches(order, 3, true).size() == 2);
    CHECK_THROWS_AS(make_batches(order, 0, false), std::invalid_argument);
  }

  TEST_CASE("corpus files round-trip") {
    const DataPools p = generate_corpus(small_spec());
    std::stringstream pairs, sources;
    write_pairs(pairs, p.labeled);
    write_sources(sources, p.unlabeled);
    const auto back = read_pairs(pairs);
    REQUIRE(back.size() == p.labeled.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(back[i].src == p.labeled[i].src);
      CHECK(back[i].tgt == p.labeled[i].tgt);
    }
    const auto unl = read_pairs(sources);
    REQUIRE(unl.size() == p.unlabeled.size());
    for (std::size_t i = 0; i < unl.size(); ++i) {
      CHECK(unl[i].src == p.unlabeled[i]);
      CHECK(unl[i].tgt.empty());
    }
    std::stringstream bad("4 5 x\t6\n");
    CHECK_THROWS_AS(read_pairs(bad), std::invalid_argument);
  }
}
