#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "exitwise/model.hpp"
#include "exitwise/objective.hpp"
#include "test_support.hpp"

using namespace exitwise;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.input_dim = 3;
    cfg.hidden_dim = 4;
    cfg.num_layers = 3;
    cfg.num_classes = 3;
    cfg.head_hidden_dim = 4;
    cfg.activation = Activation::tanh;
    cfg.seed = 5;
    return cfg;
}

std::filesystem::path temp_file(const char* name) {
    return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("init_model is deterministic per seed") {
    auto cfg = small_config();
    auto a = init_model(cfg);
    auto b = init_model(cfg);
    CHECK(a.params == b.params);

    cfg.seed = 6;
    auto c = init_model(cfg);
    CHECK(a.params != c.params);
}

TEST_CASE("init_model shapes follow the config") {
    ModelConfig cfg;
    cfg.input_dim = 2;
    cfg.hidden_dim = 3;
    cfg.num_layers = 2;
    cfg.num_classes = 2;
    cfg.head_hidden_dim = 3;
    auto model = init_model(cfg);
    ParamLayout lay(cfg);
    // blocks: 3x2+3 and 3x3+3; heads: 2 * (3x3+3 + 2x3+2)
    CHECK(lay.total() == (6 + 3) + (9 + 3) + 2 * (9 + 3 + 6 + 2));
    CHECK(model.params.size() == lay.total());

    const std::vector<double> x{0.3, -0.4};
    auto trace = forward(model, x);
    CHECK(trace.layers() == 2);

    cfg.num_layers = 1;
    CHECK_THROWS_AS(init_model(cfg), InvalidInputError);
}

TEST_CASE("forward outputs valid distributions and is deterministic") {
    auto model = init_model(small_config());
    const std::vector<double> x{0.5, -1.0, 2.0};
    auto t1 = forward(model, x);
    auto t2 = forward(model, x);
    for (int l = 0; l < t1.layers(); ++l) {
        double sum = 0.0;
        for (double p : t1.dists[static_cast<std::size_t>(l)].probs) {
            CHECK(p >= 0.0);
            sum += p;
        }
        CHECK(sum == Catch::Approx(1.0).margin(1e-9));
        CHECK(t1.dists[static_cast<std::size_t>(l)].probs == t2.dists[static_cast<std::size_t>(l)].probs);
    }
}

TEST_CASE("zero parameters produce uniform heads") {
    auto model = init_model(small_config());
    std::fill(model.params.begin(), model.params.end(), 0.0);
    const std::vector<double> x{1.0, 2.0, 3.0};
    auto trace = forward(model, x);
    for (const auto& d : trace.dists) {
        for (double p : d.probs) CHECK(p == 1.0 / 3.0);
    }
}

TEST_CASE("forward rejects bad features") {
    auto model = init_model(small_config());
    const std::vector<double> short_x{1.0, 2.0};
    CHECK_THROWS_AS(forward(model, short_x), InvalidInputError);
    const std::vector<double> nan_x{1.0, 2.0, std::nan("")};
    CHECK_THROWS_AS(forward(model, nan_x), InvalidInputError);
}

TEST_CASE("forward_prefix matches the full pass bitwise") {
    auto model = init_model(small_config());
    const std::vector<double> x{0.1, 0.2, -0.3};
    auto full = forward(model, x);
    for (int l = 1; l <= model.config.num_layers; ++l) {
        auto prefix = forward_prefix(model, x, l);
        REQUIRE(static_cast<int>(prefix.size()) == l);
        for (int i = 0; i < l; ++i) {
            CHECK(prefix[static_cast<std::size_t>(i)].probs == full.dists[static_cast<std::size_t>(i)].probs);
        }
    }
    CHECK_THROWS_AS(forward_prefix(model, x, 0), InvalidInputError);
    CHECK_THROWS_AS(forward_prefix(model, x, 4), InvalidInputError);
}

TEST_CASE("head locality: deeper parameters cannot affect shallower heads") {
    auto model = init_model(small_config());
    const std::vector<double> x{0.4, 0.9, -0.2};
    auto before = forward(model, x);

    ParamLayout lay(model.config);
    auto perturbed = model;
    perturbed.params[lay.block_w(2)] += 0.37;        // block 3 weight
    perturbed.params[lay.head_out_w(2)] -= 0.21;     // head 3 weight
    auto after = forward(perturbed, x);

    CHECK(after.dists[0].probs == before.dists[0].probs);
    CHECK(after.dists[1].probs == before.dists[1].probs);
    CHECK(after.dists[2].probs != before.dists[2].probs);
}

TEST_CASE("backward with zero output gradients is zero") {
    auto model = init_model(small_config());
    ForwardCache cache;
    const std::vector<double> x{0.4, 0.9, -0.2};
    forward(model, x, 0, 0, &cache);
    std::vector<std::vector<double>> zero(3, std::vector<double>(3, 0.0));
    auto grads = backward(model, cache, zero);
    for (double g : grads) CHECK(g == 0.0);
}

TEST_CASE("backward respects stack causality") {
    auto model = init_model(small_config());
    ForwardCache cache;
    const std::vector<double> x{0.4, 0.9, -0.2};
    forward(model, x, 0, 0, &cache);

    // Only head 1 receives gradient.
    std::vector<std::vector<double>> g(3, std::vector<double>(3, 0.0));
    g[0] = {0.3, -0.5, 0.2};
    auto grads = backward(model, cache, g);

    ParamLayout lay(model.config);
    auto all_zero = [&](std::size_t off, std::size_t count) {
        for (std::size_t i = off; i < off + count; ++i) {
            if (grads[i] != 0.0) return false;
        }
        return true;
    };
    const auto d = static_cast<std::size_t>(model.config.hidden_dim);
    const auto c = static_cast<std::size_t>(model.config.num_classes);
    // Blocks 2..3 and heads 2..3 sit deeper than head 1: untouched.
    CHECK(all_zero(lay.block_w(1), d * d + d));
    CHECK(all_zero(lay.block_w(2), d * d + d));
    CHECK(all_zero(lay.head_hidden_w(1), lay.head_out_b(1) + c - lay.head_hidden_w(1)));
    CHECK(all_zero(lay.head_hidden_w(2), lay.head_out_b(2) + c - lay.head_hidden_w(2)));
    CHECK_FALSE(all_zero(lay.block_w(0), d * static_cast<std::size_t>(model.config.input_dim)));
}

TEST_CASE("backward rejects a mismatched cache") {
    auto model = init_model(small_config());
    ForwardCache cache;
    const std::vector<double> x{0.4, 0.9, -0.2};
    forward(model, x, 0, 0, &cache);
    std::vector<std::vector<double>> g(3, std::vector<double>(3, 0.0));

    auto bad = cache;
    bad.block_h.pop_back();
    CHECK_THROWS_AS(backward(model, bad, g), InvalidInputError);

    auto bad_g = g;
    bad_g[1].push_back(0.0);
    CHECK_THROWS_AS(backward(model, cache, bad_g), InvalidInputError);
}

TEST_CASE("analytic gradients match finite differences") {
    std::mt19937_64 rng(101);
    auto cfg = small_config();  // L=3, d=4, C=3, tanh
    cfg.seed = 31;
    auto model = init_model(cfg);
    const auto samples = testsup::random_samples(rng, 3, cfg.input_dim, cfg.num_classes);
    const auto obj = ObjectiveConfig::make(0.2, cfg.num_layers);
    CHECK(testsup::fd_max_rel_error(model, samples, obj) <= 1e-4);
}

TEST_CASE("analytic gradients match finite differences with relu") {
    std::mt19937_64 rng(102);
    auto cfg = small_config();
    cfg.activation = Activation::relu;
    cfg.seed = 33;
    auto model = init_model(cfg);
    const auto samples = testsup::random_samples(rng, 3, cfg.input_dim, cfg.num_classes);
    const auto obj = ObjectiveConfig::make(0.3, cfg.num_layers);
    CHECK(testsup::fd_max_rel_error(model, samples, obj) <= 1e-4);
}

TEST_CASE("gradients flow through the diversity target when enabled") {
    std::mt19937_64 rng(103);
    auto cfg = small_config();
    auto model = init_model(cfg);
    const auto samples = testsup::random_samples(rng, 2, cfg.input_dim, cfg.num_classes);
    auto obj = ObjectiveConfig::make(0.4, cfg.num_layers);
    obj.grad_through_target = true;
    CHECK(testsup::fd_max_rel_error(model, samples, obj) <= 1e-4);
}

TEST_CASE("adam leaves parameters alone on zero gradients") {
    auto model = init_model(small_config());
    const auto before = model.params;
    AdamState state;
    std::vector<double> zeros(model.params.size(), 0.0);
    adam_step(model, zeros, state, 0.1);
    CHECK(model.params == before);
}

TEST_CASE("adam is deterministic") {
    auto model1 = init_model(small_config());
    auto model2 = model1;
    AdamState s1, s2;
    std::vector<double> grads(model1.params.size());
    std::mt19937_64 rng(9);
    std::normal_distribution<double> gauss;
    for (double& g : grads) g = gauss(rng);
    adam_step(model1, grads, s1, 0.05);
    adam_step(model2, grads, s2, 0.05);
    CHECK(model1.params == model2.params);
    CHECK(model1.params != init_model(small_config()).params);
}

TEST_CASE("adam rejects non-finite gradients") {
    auto model = init_model(small_config());
    AdamState state;
    std::vector<double> grads(model.params.size(), 0.0);
    grads[3] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(adam_step(model, grads, state, 0.1), DivergenceError);
}

TEST_CASE("checkpoint round-trips bitwise") {
    auto model = init_model(small_config());
    const auto path = temp_file("exitwise_ckpt_test.mexm");
    save_checkpoint(model, path);
    auto loaded = load_checkpoint(path);
    CHECK(loaded.config == model.config);
    CHECK(loaded.params == model.params);

    const std::vector<double> x{0.25, -0.75, 1.5};
    auto a = forward(model, x);
    auto b = forward(loaded, x);
    for (int l = 0; l < a.layers(); ++l) {
        CHECK(a.dists[static_cast<std::size_t>(l)].probs == b.dists[static_cast<std::size_t>(l)].probs);
    }
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint loader rejects damage") {
    auto model = init_model(small_config());
    const auto path = temp_file("exitwise_ckpt_damage.mexm");
    save_checkpoint(model, path);

    // Bad magic.
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XXXXX", 5);
    }
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);

    // Truncation.
    save_checkpoint(model, path);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 5);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);

    // Trailing bytes.
    save_checkpoint(model, path);
    {
        std::ofstream f(path, std::ios::app | std::ios::binary);
        f.write("zz", 2);
    }
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);

    CHECK_THROWS_AS(load_checkpoint(temp_file("exitwise_missing.mexm")), FormatError);
    std::filesystem::remove(path);
}
