#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "exitwise/math.hpp"
#include "test_support.hpp"

using namespace exitwise;

TEST_CASE("softmax of equal logits is uniform") {
    const std::vector<double> two{0.0, 0.0};
    auto d = softmax(two);
    CHECK(d[0] == 0.5);
    CHECK(d[1] == 0.5);

    const std::vector<double> three{1000.0, 1000.0, 1000.0};
    auto u = softmax(three);
    for (int i = 0; i < 3; ++i) CHECK(u[i] == Catch::Approx(1.0 / 3.0).margin(1e-15));
}

TEST_CASE("softmax closed form") {
    const std::vector<double> logits{std::log(2.0), 0.0};
    auto d = softmax(logits);
    CHECK(d[0] == Catch::Approx(2.0 / 3.0).margin(1e-12));
    CHECK(d[1] == Catch::Approx(1.0 / 3.0).margin(1e-12));
}

TEST_CASE("softmax rejects bad input") {
    const std::vector<double> nan{0.0, std::nan("")};
    CHECK_THROWS_AS(softmax(nan), InvalidInputError);
    const std::vector<double> inf{0.0, std::numeric_limits<double>::infinity()};
    CHECK_THROWS_AS(softmax(inf), InvalidInputError);
    const std::vector<double> one{1.0};
    CHECK_THROWS_AS(softmax(one), InvalidInputError);
}

TEST_CASE("softmax is shift invariant") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> gauss(0.0, 3.0);
    for (int it = 0; it < 200; ++it) {
        const int n = 2 + static_cast<int>(rng() % 6);
        std::vector<double> logits(static_cast<std::size_t>(n));
        for (double& v : logits) v = gauss(rng);
        const double shift = gauss(rng);
        std::vector<double> shifted = logits;
        for (double& v : shifted) v += shift;
        auto a = softmax(logits);
        auto b = softmax(shifted);
        for (int i = 0; i < n; ++i) CHECK(a[i] == Catch::Approx(b[i]).margin(1e-9));
    }
}

TEST_CASE("entropy basics") {
    CHECK(entropy(make_distribution({1.0, 0.0})) == 0.0);
    CHECK(entropy(make_distribution({0.5, 0.5})) == Catch::Approx(std::log(2.0)).margin(1e-15));
    const double oracle = -0.9 * std::log(0.9) - 0.1 * std::log(0.1);
    CHECK(entropy(make_distribution({0.9, 0.1})) == Catch::Approx(oracle).margin(1e-15));
    CHECK(oracle == Catch::Approx(0.325083).margin(1e-6));
}

TEST_CASE("entropy is maximal for uniform") {
    std::mt19937_64 rng(11);
    for (int it = 0; it < 500; ++it) {
        const int c = 2 + static_cast<int>(rng() % 7);
        auto p = testsup::random_distribution(rng, c);
        CHECK(entropy(p) <= std::log(static_cast<double>(c)) + 1e-12);
        CHECK(entropy(p) >= 0.0);
    }
}

TEST_CASE("cross entropy examples") {
    auto half = make_distribution({0.5, 0.5});
    CHECK(cross_entropy(half, half) == Catch::Approx(std::log(2.0)).margin(1e-15));

    auto q = make_distribution({0.7, 0.3});
    auto onehot = make_distribution({1.0, 0.0});
    CHECK(cross_entropy(q, onehot) == Catch::Approx(-std::log(0.7)).margin(1e-15));

    auto q2 = make_distribution({0.6, 0.4});
    auto p2 = make_distribution({0.2, 0.8});
    const double oracle = -0.2 * std::log(0.6) - 0.8 * std::log(0.4);
    CHECK(cross_entropy(q2, p2) == Catch::Approx(oracle).margin(1e-15));
}

TEST_CASE("cross entropy rejects mismatched classes") {
    auto q = make_distribution({0.5, 0.5});
    auto p = make_distribution({0.2, 0.3, 0.5});
    CHECK_THROWS_AS(cross_entropy(q, p), InvalidInputError);
}

TEST_CASE("Gibbs inequality holds for random pairs") {
    std::mt19937_64 rng(13);
    for (int it = 0; it < 1000; ++it) {
        const int c = 2 + static_cast<int>(rng() % 5);
        auto p = testsup::random_distribution(rng, c);
        auto q = testsup::random_distribution(rng, c);
        CHECK(cross_entropy(q, p) >= entropy(p) - 1e-9);
    }
}

TEST_CASE("cross entropy against one-hot equals NLL") {
    std::mt19937_64 rng(17);
    for (int it = 0; it < 300; ++it) {
        const int c = 2 + static_cast<int>(rng() % 5);
        auto q = testsup::random_distribution(rng, c);
        const int gold = static_cast<int>(rng() % static_cast<std::uint64_t>(c));
        std::vector<double> onehot(static_cast<std::size_t>(c), 0.0);
        onehot[static_cast<std::size_t>(gold)] = 1.0;
        const double nll = -log_clamped(q[gold]);
        CHECK(cross_entropy(q, make_distribution(std::move(onehot))) ==
              Catch::Approx(nll).margin(1e-12));
    }
}

TEST_CASE("argmax breaks ties toward the smallest index") {
    CHECK(argmax_class(make_distribution({0.2, 0.8})) == 1);
    CHECK(argmax_class(make_distribution({0.5, 0.5})) == 0);
    CHECK(argmax_class(make_distribution({0.3, 0.3, 0.4})) == 2);
}

TEST_CASE("make_distribution enforces invariants") {
    CHECK_THROWS_AS(make_distribution({1.0}), InvalidInputError);
    CHECK_THROWS_AS(make_distribution({0.5, 0.6}), InvalidInputError);
    CHECK_THROWS_AS(make_distribution({-0.1, 1.1}), InvalidInputError);
    CHECK_THROWS_AS(make_distribution({0.5, std::nan("")}), InvalidInputError);
}
