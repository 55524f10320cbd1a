#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "stitchlab/rng.hpp"

using namespace stitchlab;

TEST_SUITE("rng") {
  TEST_CASE("same seed gives the same stream") {
    Rng a(42), b(42), c(43);
    bool differs = false;
    for (int k = 0; k < 1000; ++k) {
      const auto x = a.next_u64();
      CHECK(x == b.next_u64());
      differs = differs || x != c.next_u64();
    }
    CHECK(differs);
  }

  TEST_CASE("uniform, below and normal stay in range with plausible moments") {
    Rng rng(7);
    double sum = 0.0, sq = 0.0;
    const int n = 200000;
    for (int k = 0; k < n; ++k) {
      const double u = rng.uniform();
      CHECK_UNARY(u >= 0.0 && u < 1.0);
      const auto b = rng.below(13);
      CHECK(b < 13);
      const double z = rng.normal();
      sum += z;
      sq += z * z;
    }
    CHECK(std::abs(sum / n) < 0.01);
    CHECK(std::abs(sq / n - 1.0) < 0.02);
  }

  TEST_CASE("shuffle is a permutation and deterministic") {
    std::vector<int> a(50);
    std::iota(a.begin(), a.end(), 0);
    std::vector<int> b(a.begin(), a.end());
    Rng r1(9), r2(9);
    r1.shuffle(std::span<int>(a));
    r2.shuffle(std::span<int>(b));
    CHECK(a == b);
    std::vector<int> sorted = a;
    std::sort(sorted.begin(), sorted.end());
    std::vector<int> expected(50);
    std::iota(expected.begin(), expected.end(), 0);
    CHECK(sorted == expected);
  }

  TEST_CASE("derived seeds are distinct per tag") {
    CHECK(derive_seed(1, 2) != derive_seed(1, 3));
    CHECK(derive_seed(1, 2) != derive_seed(2, 2));
    CHECK(derive_seed(5, 5) == derive_seed(5, 5));
  }
}
