#ifndef EXITWISE_OBJECTIVE_HPP
#define EXITWISE_OBJECTIVE_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "exitwise/dataset.hpp"
#include "exitwise/math.hpp"
#include "exitwise/model.hpp"

namespace exitwise {

enum class AlphaScheme { uniform, linear };

inline AlphaScheme alpha_scheme_from_string(const std::string& s) {
    if (s == "uniform") return AlphaScheme::uniform;
    if (s == "linear") return AlphaScheme::linear;
    throw InvalidInputError("unknown alpha scheme '" + s + "' (expected uniform or linear)");
}

/// Loss configuration. alpha[i] weights head i+1's cross-entropy against the
/// gold label; beta[i] weights head i+1's diversity term (beta[0] is always
/// zero, the first head has no earlier head to differ from).
struct ObjectiveConfig {
    double lambda = 0.2;
    std::vector<double> alpha;
    std::vector<double> beta;
    AlphaScheme alpha_scheme = AlphaScheme::uniform;
    bool zero_last_beta = false;
    bool adjacent_only = false;
    // By default the selected earlier distribution is a fixed target, like a
    // distillation teacher; flip to also push gradient into it.
    bool grad_through_target = false;

    static ObjectiveConfig make(double lambda, int num_layers,
                                AlphaScheme scheme = AlphaScheme::uniform,
                                bool zero_last_beta = false, bool adjacent_only = false) {
        if (!(lambda >= 0.0 && lambda < 1.0)) {
            throw InvalidInputError("lambda must lie in [0,1), the useful range is (0,1); got " +
                                    std::to_string(lambda));
        }
        if (num_layers < 2) {
            throw InvalidInputError("objective needs num_layers >= 2; the diversity term is "
                                    "undefined for a single head");
        }
        ObjectiveConfig cfg;
        cfg.lambda = lambda;
        cfg.alpha_scheme = scheme;
        cfg.zero_last_beta = zero_last_beta;
        cfg.adjacent_only = adjacent_only;
        cfg.alpha.resize(static_cast<std::size_t>(num_layers));
        cfg.beta.assign(static_cast<std::size_t>(num_layers), lambda);
        cfg.beta[0] = 0.0;
        for (int i = 0; i < num_layers; ++i) {
            cfg.alpha[static_cast<std::size_t>(i)] =
                scheme == AlphaScheme::uniform ? 1.0 : static_cast<double>(i + 1);
        }
        if (zero_last_beta) cfg.beta.back() = 0.0;
        return cfg;
    }

    void validate(int num_layers) const {
        if (!(lambda >= 0.0 && lambda < 1.0)) {
            throw InvalidInputError("lambda must lie in [0,1)");
        }
        if (static_cast<int>(alpha.size()) != num_layers ||
            static_cast<int>(beta.size()) != num_layers) {
            throw InvalidInputError("objective weights do not match the layer count");
        }
        for (double a : alpha) {
            if (!std::isfinite(a) || a < 0.0) throw InvalidInputError("alpha weights must be finite and >= 0");
        }
        for (double b : beta) {
            if (!std::isfinite(b) || b < 0.0) throw InvalidInputError("beta weights must be finite and >= 0");
        }
    }
};

/// Weighted sum of per-head cross-entropies against the gold label.
inline double relevancy_loss(const LayerTrace& trace, std::span<const double> alpha) {
    if (alpha.size() != trace.dists.size()) {
        throw InvalidInputError("alpha weight count does not match trace layers");
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < trace.dists.size(); ++i) {
        loss += alpha[i] * -log_clamped(trace.dists[i][trace.gold]);
    }
    return loss;
}

struct DiversityResult {
    double loss = 0.0;             // negative: minus the summed minima
    std::vector<int> argmin;       // 1-based earlier layer chosen per layer 2..L
    std::vector<double> min_ce;    // the minimum cross-entropy per layer 2..L
};

/// Minus the weighted sum over layers of the minimum cross-entropy to any
/// earlier head. Ties choose the smallest earlier layer; adjacent_only
/// restricts the search to the immediately preceding head.
inline DiversityResult diversity_loss(const LayerTrace& trace, std::span<const double> beta,
                                      bool adjacent_only) {
    const int L = trace.layers();
    if (L < 2) throw InvalidInputError("diversity loss needs at least two layers");
    if (static_cast<int>(beta.size()) != L) {
        throw InvalidInputError("beta weight count does not match trace layers");
    }
    DiversityResult res;
    res.argmin.reserve(static_cast<std::size_t>(L - 1));
    res.min_ce.reserve(static_cast<std::size_t>(L - 1));
    double total = 0.0;
    for (int i = 1; i < L; ++i) {
        int best_j = adjacent_only ? i - 1 : 0;
        double best = cross_entropy(trace.dists[static_cast<std::size_t>(i)],
                                    trace.dists[static_cast<std::size_t>(best_j)]);
        if (!adjacent_only) {
            for (int j = 1; j < i; ++j) {
                const double ce = cross_entropy(trace.dists[static_cast<std::size_t>(i)],
                                                trace.dists[static_cast<std::size_t>(j)]);
                if (ce < best) {
                    best = ce;
                    best_j = j;
                }
            }
        }
        res.argmin.push_back(best_j + 1);
        res.min_ce.push_back(best);
        total += beta[static_cast<std::size_t>(i)] * best;
    }
    res.loss = -total;
    return res;
}

struct CombinedLossResult {
    double loss = 0.0;
    double relevancy = 0.0;
    double diversity = 0.0;                         // the (negative) diversity term
    std::vector<std::vector<double>> head_grads;    // dLoss/d(x_i) per head
    std::vector<int> argmin_layer;                  // chosen earlier layer, per layer 2..L
    std::vector<double> alpha_trace;                // lambda * p_c, per layer 2..L
};

/// Full objective for one sample: loss value plus the analytic gradient with
/// respect to every head distribution. The diversity target only receives
/// gradient when grad_through_target is set.
inline CombinedLossResult combined_loss(const LayerTrace& trace, const ObjectiveConfig& cfg) {
    const int L = trace.layers();
    cfg.validate(L);
    const int C = trace.dists.empty() ? 0 : trace.dists[0].classes();
    if (trace.gold < 0 || trace.gold >= C) {
        throw InvalidInputError("gold label out of range");
    }

    CombinedLossResult res;
    res.relevancy = relevancy_loss(trace, cfg.alpha);
    DiversityResult div = diversity_loss(trace, cfg.beta, cfg.adjacent_only);
    res.diversity = div.loss;
    res.loss = res.relevancy + res.diversity;
    res.argmin_layer = div.argmin;

    res.head_grads.assign(static_cast<std::size_t>(L),
                          std::vector<double>(static_cast<std::size_t>(C), 0.0));
    for (int i = 0; i < L; ++i) {
        const Distribution& q = trace.dists[static_cast<std::size_t>(i)];
        res.head_grads[static_cast<std::size_t>(i)][static_cast<std::size_t>(trace.gold)] =
            -cfg.alpha[static_cast<std::size_t>(i)] * dlog_clamped(q[trace.gold]);
    }
    res.alpha_trace.reserve(static_cast<std::size_t>(L - 1));
    for (int i = 1; i < L; ++i) {
        const int j = div.argmin[static_cast<std::size_t>(i - 1)] - 1;
        const Distribution& q = trace.dists[static_cast<std::size_t>(i)];
        const Distribution& target = trace.dists[static_cast<std::size_t>(j)];
        const double b = cfg.beta[static_cast<std::size_t>(i)];
        // d(-b * CE(q, target))/dq_k = b * target_k / q_k.
        for (int k = 0; k < C; ++k) {
            res.head_grads[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] +=
                b * target[k] * dlog_clamped(q[k]);
        }
        if (cfg.grad_through_target) {
            // d(-b * CE(q, target))/dtarget_k = b * ln q_k.
            for (int k = 0; k < C; ++k) {
                res.head_grads[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)] +=
                    b * log_clamped(q[k]);
            }
        }
        res.alpha_trace.push_back(cfg.lambda * target[trace.gold]);
    }
    return res;
}

/// Training-time diagnostic: the dynamic soft-target strength lambda * p_c
/// and the chosen closest earlier layer, both per layer 2..L.
struct DiagnosticRecord {
    std::int64_t step = 0;
    std::vector<double> alpha;       // entries lie in [0, lambda]
    std::vector<int> argmin_layer;   // 1-based; entry for layer i is < i
};

inline DiagnosticRecord record_diagnostics(const LayerTrace& trace, const ObjectiveConfig& cfg,
                                           std::int64_t step) {
    CombinedLossResult r = combined_loss(trace, cfg);
    return DiagnosticRecord{step, std::move(r.alpha_trace), std::move(r.argmin_layer)};
}

struct TrainOptions {
    int epochs = 30;
    double lr = 1e-2;
    int batch_size = 32;
    std::uint32_t seed = 42;
    int log_interval = 10;  // optimizer steps between diagnostic records

    void validate() const {
        if (epochs < 1) throw InvalidInputError("epochs must be >= 1");
        if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidInputError("learning rate must be > 0");
        if (batch_size < 1) throw InvalidInputError("batch_size must be >= 1");
        if (log_interval < 1) throw InvalidInputError("log_interval must be >= 1");
    }
};

struct TrainResult {
    std::vector<DiagnosticRecord> diagnostics;
    // closest_layer_percent[i-2][j-1]: share (in %) of training evaluations
    // where layer i picked earlier layer j as its closest prediction.
    std::vector<std::vector<double>> closest_layer_percent;
    std::vector<double> step_losses;
    std::int64_t steps = 0;
};

namespace detail {

// Hand-rolled Fisher-Yates so shuffles stay identical across standard
// libraries (std::shuffle's draw sequence is implementation-defined).
inline void deterministic_shuffle(std::vector<int>& idx, std::mt19937_64& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(idx[i - 1], idx[j]);
    }
}

}  // namespace detail

/// Mini-batch training with Adam on the combined objective. Deterministic
/// given options.seed. Throws DivergenceError on a non-finite batch loss.
inline TrainResult train(MultiExitModel& model, const Dataset& data, const ObjectiveConfig& cfg,
                         const TrainOptions& opt) {
    opt.validate();
    cfg.validate(model.config.num_layers);
    if (data.samples.empty()) throw InvalidInputError("training dataset is empty");
    if (data.feature_dim() != model.config.input_dim) {
        throw InvalidInputError("dataset feature dim " + std::to_string(data.feature_dim()) +
                                " does not match model input_dim " +
                                std::to_string(model.config.input_dim));
    }
    for (const auto& s : data.samples) {
        if (s.label < 0 || s.label >= model.config.num_classes) {
            throw InvalidInputError("dataset label " + std::to_string(s.label) +
                                    " outside [0, " + std::to_string(model.config.num_classes) + ")");
        }
        for (double f : s.features) {
            if (!std::isfinite(f)) throw InvalidInputError("dataset features must be finite");
        }
    }

    const int L = model.config.num_layers;
    const int n = data.size();
    TrainResult result;
    std::vector<std::vector<std::int64_t>> closest_counts(
        static_cast<std::size_t>(L - 1), std::vector<std::int64_t>(static_cast<std::size_t>(L - 1), 0));

    AdamState adam;
    std::mt19937_64 rng(opt.seed);
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    ForwardCache cache;
    std::vector<double> batch_grads;
    std::vector<double> alpha_sum(static_cast<std::size_t>(L - 1));
    std::vector<std::vector<int>> argmin_counts(static_cast<std::size_t>(L - 1),
                                                std::vector<int>(static_cast<std::size_t>(L - 1)));

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        detail::deterministic_shuffle(order, rng);
        for (int start = 0; start < n; start += opt.batch_size) {
            const int end = std::min(start + opt.batch_size, n);
            const int bsz = end - start;
            batch_grads.assign(model.params.size(), 0.0);
            double batch_loss = 0.0;
            std::fill(alpha_sum.begin(), alpha_sum.end(), 0.0);
            for (auto& row : argmin_counts) std::fill(row.begin(), row.end(), 0);

            for (int b = start; b < end; ++b) {
                const Sample& s = data.samples[static_cast<std::size_t>(order[static_cast<std::size_t>(b)])];
                LayerTrace trace;
                try {
                    trace = forward(model, s.features, order[static_cast<std::size_t>(b)],
                                    s.label, &cache);
                } catch (const InvalidInputError&) {
                    // Inputs were validated up front, so a rejected forward can
                    // only mean the parameters overflowed.
                    throw DivergenceError("training diverged at step " +
                                          std::to_string(result.steps + 1) +
                                          ": non-finite activations");
                }
                CombinedLossResult cl = combined_loss(trace, cfg);
                batch_loss += cl.loss;
                const std::vector<double> grads = backward(model, cache, cl.head_grads);
                for (std::size_t i = 0; i < grads.size(); ++i) batch_grads[i] += grads[i];
                for (int i = 0; i < L - 1; ++i) {
                    const int j = cl.argmin_layer[static_cast<std::size_t>(i)];
                    closest_counts[static_cast<std::size_t>(i)][static_cast<std::size_t>(j - 1)] += 1;
                    argmin_counts[static_cast<std::size_t>(i)][static_cast<std::size_t>(j - 1)] += 1;
                    alpha_sum[static_cast<std::size_t>(i)] += cl.alpha_trace[static_cast<std::size_t>(i)];
                }
            }

            batch_loss /= bsz;
            if (!std::isfinite(batch_loss)) {
                throw DivergenceError("training diverged at step " + std::to_string(result.steps + 1) +
                                      ": batch loss is not finite");
            }
            const double inv = 1.0 / bsz;
            for (double& g : batch_grads) g *= inv;
            adam_step(model, batch_grads, adam, opt.lr);
            result.steps += 1;
            result.step_losses.push_back(batch_loss);

            if (result.steps % opt.log_interval == 0) {
                DiagnosticRecord rec;
                rec.step = result.steps;
                rec.alpha.resize(static_cast<std::size_t>(L - 1));
                rec.argmin_layer.resize(static_cast<std::size_t>(L - 1));
                for (int i = 0; i < L - 1; ++i) {
                    rec.alpha[static_cast<std::size_t>(i)] = alpha_sum[static_cast<std::size_t>(i)] / bsz;
                    const auto& counts = argmin_counts[static_cast<std::size_t>(i)];
                    int best_j = 0;
                    for (int j = 1; j < L - 1; ++j) {
                        if (counts[static_cast<std::size_t>(j)] > counts[static_cast<std::size_t>(best_j)]) best_j = j;
                    }
                    rec.argmin_layer[static_cast<std::size_t>(i)] = best_j + 1;
                }
                result.diagnostics.push_back(std::move(rec));
            }
        }
    }

    result.closest_layer_percent.assign(static_cast<std::size_t>(L - 1),
                                        std::vector<double>(static_cast<std::size_t>(L - 1), 0.0));
    for (int i = 0; i < L - 1; ++i) {
        std::int64_t row_total = 0;
        for (auto c : closest_counts[static_cast<std::size_t>(i)]) row_total += c;
        if (row_total == 0) continue;
        for (int j = 0; j < L - 1; ++j) {
            result.closest_layer_percent[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                100.0 * static_cast<double>(closest_counts[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) /
                static_cast<double>(row_total);
        }
    }
    return result;
}

}  // namespace exitwise

#endif  // EXITWISE_OBJECTIVE_HPP
