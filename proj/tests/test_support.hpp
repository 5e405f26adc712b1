#ifndef EXITWISE_TEST_SUPPORT_HPP
#define EXITWISE_TEST_SUPPORT_HPP

// Shared generators and the finite-difference gradient oracle. Everything
// here is test-only and deliberately independent of the library's analytic
// gradient path.

#include <cmath>
#include <random>
#include <vector>

#include "exitwise/exitwise.hpp"

namespace testsup {

inline exitwise::Distribution random_distribution(std::mt19937_64& rng, int num_classes) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> v(static_cast<std::size_t>(num_classes));
    double sum = 0.0;
    for (double& x : v) {
        x = -std::log(1.0 - unit(rng));  // Exp(1) draws give Dirichlet(1,..,1)
        sum += x;
    }
    for (double& x : v) x /= sum;
    return exitwise::Distribution{std::move(v)};
}

inline exitwise::LayerTrace random_trace(std::mt19937_64& rng, int layers, int num_classes,
                                         std::int64_t sample_id = 0) {
    exitwise::LayerTrace t;
    t.sample_id = sample_id;
    t.gold = static_cast<int>(rng() % static_cast<std::uint64_t>(num_classes));
    for (int l = 0; l < layers; ++l) t.dists.push_back(random_distribution(rng, num_classes));
    return t;
}

inline exitwise::ExitLog random_exitlog(std::mt19937_64& rng, int samples, int layers,
                                        int num_classes) {
    exitwise::ExitLog log;
    log.num_layers = layers;
    log.num_classes = num_classes;
    for (int i = 0; i < samples; ++i) {
        log.traces.push_back(random_trace(rng, layers, num_classes, i));
    }
    return log;
}

// Cross-entropy recomputed from scratch; used to cross-check the library.
inline double ce_oracle(const std::vector<double>& q, const std::vector<double>& p) {
    double s = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        if (p[i] > 0.0) s -= p[i] * std::log(std::min(std::max(q[i], 1e-12), 1.0));
    }
    return s;
}

struct LabeledSample {
    std::vector<double> features;
    int gold = 0;
};

inline double mean_combined_loss(const exitwise::MultiExitModel& model,
                                 const std::vector<LabeledSample>& samples,
                                 const exitwise::ObjectiveConfig& cfg) {
    double total = 0.0;
    for (const auto& s : samples) {
        const exitwise::LayerTrace trace = exitwise::forward(model, s.features, 0, s.gold);
        total += exitwise::combined_loss(trace, cfg).loss;
    }
    return total / static_cast<double>(samples.size());
}

inline std::vector<double> analytic_mean_gradient(const exitwise::MultiExitModel& model,
                                                  const std::vector<LabeledSample>& samples,
                                                  const exitwise::ObjectiveConfig& cfg) {
    std::vector<double> acc(model.params.size(), 0.0);
    exitwise::ForwardCache cache;
    for (const auto& s : samples) {
        const exitwise::LayerTrace trace = exitwise::forward(model, s.features, 0, s.gold, &cache);
        const auto res = exitwise::combined_loss(trace, cfg);
        const auto g = exitwise::backward(model, cache, res.head_grads);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    }
    for (double& v : acc) v /= static_cast<double>(samples.size());
    return acc;
}

/// Central finite differences over every parameter; returns the worst
/// relative error |analytic - numeric| / max(|numeric|, 1e-8).
inline double fd_max_rel_error(exitwise::MultiExitModel model,
                               const std::vector<LabeledSample>& samples,
                               const exitwise::ObjectiveConfig& cfg, double h = 1e-5) {
    const std::vector<double> analytic = analytic_mean_gradient(model, samples, cfg);
    double worst = 0.0;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const double saved = model.params[i];
        model.params[i] = saved + h;
        const double up = mean_combined_loss(model, samples, cfg);
        model.params[i] = saved - h;
        const double down = mean_combined_loss(model, samples, cfg);
        model.params[i] = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double rel = std::abs(analytic[i] - numeric) / std::max(std::abs(numeric), 1e-8);
        worst = std::max(worst, rel);
    }
    return worst;
}

inline std::vector<LabeledSample> random_samples(std::mt19937_64& rng, int n, int input_dim,
                                                 int num_classes) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<LabeledSample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        LabeledSample s;
        s.gold = static_cast<int>(rng() % static_cast<std::uint64_t>(num_classes));
        for (int d = 0; d < input_dim; ++d) s.features.push_back(gauss(rng));
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace testsup

#endif  // EXITWISE_TEST_SUPPORT_HPP
