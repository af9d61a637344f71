#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "meet/rng.hpp"

using meet::SeededRng;

TEST_CASE("identical seed gives identical integer stream") {
    SeededRng a(42), b(42);
    for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("different seeds and streams diverge") {
    SeededRng a(1), b(2);
    SeededRng c = SeededRng(1).stream("data");
    SeededRng d = SeededRng(1).stream("init");
    int same_ab = 0, same_cd = 0;
    for (int i = 0; i < 100; ++i) {
        if (a.next_u64() == b.next_u64()) ++same_ab;
        if (c.next_u64() == d.next_u64()) ++same_cd;
    }
    CHECK(same_ab == 0);
    CHECK(same_cd == 0);
}

TEST_CASE("named stream derivation is deterministic") {
    SeededRng a = SeededRng(7).stream("gen").stream(3);
    SeededRng b = SeededRng(7).stream("gen").stream(3);
    for (int i = 0; i < 64; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("uniform draws live in [0,1)") {
    SeededRng rng(123);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.next_uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
    }
}

TEST_CASE("next_below is in range and roughly uniform") {
    SeededRng rng(9);
    std::vector<int> counts(7, 0);
    const int n = 70000;
    for (int i = 0; i < n; ++i) ++counts[rng.next_below(7)];
    for (int c : counts) {
        CHECK(c > n / 7 - 600);
        CHECK(c < n / 7 + 600);
    }
}

TEST_CASE("gaussian moments look like a standard normal") {
    SeededRng rng(2024, "gauss");
    const int n = 200000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double g = rng.next_gaussian();
        sum += g;
        sq += g * g;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("shuffle is a permutation and seed-stable") {
    std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    std::vector<int> w = v;
    SeededRng a(5, "shuffle"), b(5, "shuffle");
    a.shuffle(v);
    b.shuffle(w);
    REQUIRE(v == w);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    REQUIRE(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
}
