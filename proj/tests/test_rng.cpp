#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "qeebm/rng.hpp"

using namespace qeebm;

TEST_SUITE("rng") {
  TEST_CASE("a stream is a pure function of its address") {
    RngStream a(42, "sample:unlabeled:3", 7), b(42, "sample:unlabeled:3", 7);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
  }

  TEST_CASE("different seeds, purposes or indices give different streams") {
    auto first = [](std::uint64_t seed, const char* purpose, std::uint64_t index) {
      RngStream r(seed, purpose, index);
      std::vector<std::uint64_t> v(8);
      for (auto& x : v) x = r.next_u64();
      return v;
    };
    const auto base = first(1, "p", 0);
    CHECK(first(2, "p", 0) != base);
    CHECK(first(1, "q", 0) != base);
    CHECK(first(1, "p", 1) != base);
  }

  TEST_CASE("uniform draws stay in range and have the right mean") {
    RngStream r(5, "u");
    double sum = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
      const double u = r.uniform();
      REQUIRE(u >= 0.0);
      REQUIRE(u < 1.0);
      sum += u;
    }
    // Standard error of the mean of U(0,1) is sqrt(1/12/n).
    CHECK(std::abs(sum / n - 0.5) < 4.0 * std::sqrt(1.0 / 12.0 / n));

    std::set<int> seen;
    for (int i = 0; i < 2000; ++i) {
      const int k = r.uniform_int(-2, 3);
      REQUIRE(k >= -2);
      REQUIRE(k <= 3);
      seen.insert(k);
    }
    CHECK(seen.size() == 6);
  }

  TEST_CASE("categorical frequencies match the weights") {
    RngStream r(6, "c");
    const std::vector<double> w{0.7, 0.2, 0.1};
    std::vector<int> counts(3, 0);
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[r.categorical(w)];
    for (int k = 0; k < 3; ++k) {
      const double sd = std::sqrt(n * w[k] * (1 - w[k]));
      CHECK(std::abs(counts[k] - n * w[k]) < 3.0 * sd);
    }
  }

  TEST_CASE("shuffle yields a permutation and is reproducible") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      std::vector<int> v(17);
      std::iota(v.begin(), v.end(), 0);
      auto a = v, b = v;
      RngStream r1(seed, "s"), r2(seed, "s");
      r1.shuffle(a);
      r2.shuffle(b);
      CHECK(a == b);
      CHECK(std::is_permutation(a.begin(), a.end(), v.begin()));
    }
  }

  TEST_CASE("derived seeds differ by purpose") {
    CHECK(derive_seed(1, "init:task") != derive_seed(1, "init:value"));
    CHECK(derive_seed(1, "init:task") == derive_seed(1, "init:task"));
    CHECK(derive_seed(1, "init:task") != derive_seed(2, "init:task"));
  }
}
