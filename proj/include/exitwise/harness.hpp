#ifndef EXITWISE_HARNESS_HPP
#define EXITWISE_HARNESS_HPP

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "exitwise/dataset.hpp"
#include "exitwise/exit_policy.hpp"
#include "exitwise/math.hpp"
#include "exitwise/model.hpp"

namespace exitwise {

/// Materialized per-sample traces of all L internal classifiers, the unit
/// every exit strategy is evaluated on.
struct ExitLog {
    int num_layers = 0;
    int num_classes = 0;
    std::vector<LayerTrace> traces;

    int size() const { return static_cast<int>(traces.size()); }
};

inline ExitLog make_exitlog(const MultiExitModel& model, const Dataset& data) {
    if (data.feature_dim() != model.config.input_dim) {
        throw InvalidInputError("dataset feature dim does not match model input_dim");
    }
    if (data.num_classes > model.config.num_classes) {
        throw InvalidInputError("dataset has more classes than the model predicts");
    }
    ExitLog log;
    log.num_layers = model.config.num_layers;
    log.num_classes = model.config.num_classes;
    log.traces.reserve(data.samples.size());
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        const Sample& s = data.samples[i];
        log.traces.push_back(forward(model, s.features, static_cast<std::int64_t>(i), s.label));
    }
    return log;
}

// --- exitlog v1 text format --------------------------------------------------
// line 1: `#exitlog v1 L=<int> C=<int>`
// then one line per sample: `<sample_id>,<gold>,<p[1][0]>,...,<p[L][C-1]>`
// layer-major, class-minor, probabilities as decimal floats.

inline void save_exitlog(const ExitLog& log, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open exitlog for writing: " + path.string());
    os << "#exitlog v1 L=" << log.num_layers << " C=" << log.num_classes << '\n';
    char buf[64];
    for (const auto& t : log.traces) {
        os << t.sample_id << ',' << t.gold;
        for (const auto& d : t.dists) {
            for (double p : d.probs) {
                std::snprintf(buf, sizeof(buf), "%.17g", p);
                os << ',' << buf;
            }
        }
        os << '\n';
    }
    if (!os) throw FormatError("failed writing exitlog: " + path.string());
}

inline void dump_exitlog(const MultiExitModel& model, const Dataset& data,
                         const std::filesystem::path& path) {
    save_exitlog(make_exitlog(model, data), path);
}

inline ExitLog load_exitlog(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open exitlog: " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw FormatError("exitlog is empty: " + path.string());
    if (!line.empty() && line.back() == '\r') line.pop_back();

    ExitLog log;
    if (std::sscanf(line.c_str(), "#exitlog v1 L=%d C=%d", &log.num_layers, &log.num_classes) != 2) {
        throw FormatError("bad exitlog header (expected '#exitlog v1 L=<int> C=<int>'): " + line);
    }
    if (log.num_layers < 1 || log.num_classes < 2) {
        throw FormatError("exitlog header has invalid L or C");
    }
    const std::size_t expected = 2 + static_cast<std::size_t>(log.num_layers) *
                                         static_cast<std::size_t>(log.num_classes);
    int line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != expected) {
            throw FormatError("line " + std::to_string(line_no) + ": expected " +
                              std::to_string(expected) + " fields, got " +
                              std::to_string(fields.size()));
        }
        LayerTrace trace;
        trace.sample_id = static_cast<std::int64_t>(detail::parse_double_field(fields[0], line_no));
        const double gold_raw = detail::parse_double_field(fields[1], line_no);
        trace.gold = static_cast<int>(gold_raw);
        if (static_cast<double>(trace.gold) != gold_raw || trace.gold < 0 ||
            trace.gold >= log.num_classes) {
            throw FormatError("line " + std::to_string(line_no) + ": gold label out of range");
        }
        std::size_t f = 2;
        for (int l = 0; l < log.num_layers; ++l) {
            std::vector<double> probs(static_cast<std::size_t>(log.num_classes));
            double sum = 0.0;
            for (int c = 0; c < log.num_classes; ++c) {
                const double p = detail::parse_double_field(fields[f++], line_no);
                if (!std::isfinite(p) || p < 0.0) {
                    throw FormatError("line " + std::to_string(line_no) +
                                      ": probabilities must be finite and >= 0");
                }
                probs[static_cast<std::size_t>(c)] = p;
                sum += p;
            }
            if (std::abs(sum - 1.0) > 1e-6) {
                throw FormatError("line " + std::to_string(line_no) + ": layer " +
                                  std::to_string(l + 1) + " probabilities sum to " +
                                  std::to_string(sum));
            }
            for (double& p : probs) p /= sum;  // restore the exact-sum invariant
            trace.dists.push_back(Distribution{std::move(probs)});
        }
        log.traces.push_back(std::move(trace));
    }
    return log;
}

/// One evaluated (policy, parameter) point of the accuracy/speed trade-off.
struct SweepPoint {
    ExitPolicy policy;
    double accuracy = 0.0;
    double mean_exit_layer = 0.0;
    double speedup = 1.0;  // num_layers / mean_exit_layer
    std::vector<std::int64_t> exit_histogram;          // exits per layer, sums to n
    std::vector<std::int64_t> correct_exit_histogram;  // correct exits per layer
};

namespace detail {

struct EvalPartial {
    std::int64_t correct = 0;
    std::int64_t layer_sum = 0;
    std::vector<std::int64_t> exits, correct_exits;
};

inline int worker_count(int n_samples) {
    int threads = 1;
    if (const char* env = std::getenv("EXITWISE_THREADS")) {
        threads = std::max(1, std::atoi(env));
    }
    const unsigned hw = std::thread::hardware_concurrency();
    if (hw > 0) threads = std::min<int>(threads, static_cast<int>(hw));
    // No point splitting tiny logs.
    return std::min(threads, std::max(1, n_samples / 64));
}

inline EvalPartial evaluate_range(const ExitLog& log, const ExitPolicy& policy, int begin,
                                  int end) {
    EvalPartial part;
    part.exits.assign(static_cast<std::size_t>(log.num_layers), 0);
    part.correct_exits.assign(static_cast<std::size_t>(log.num_layers), 0);
    for (int i = begin; i < end; ++i) {
        const LayerTrace& t = log.traces[static_cast<std::size_t>(i)];
        const ExitOutcome out = decide(t, policy);
        part.layer_sum += out.exit_layer;
        part.exits[static_cast<std::size_t>(out.exit_layer - 1)] += 1;
        if (out.prediction == t.gold) {
            part.correct += 1;
            part.correct_exits[static_cast<std::size_t>(out.exit_layer - 1)] += 1;
        }
    }
    return part;
}

}  // namespace detail

/// Runs a policy over every trace. Samples may be split across workers
/// (capped by EXITWISE_THREADS); aggregates are integer sums, so the result
/// is identical for any worker count.
inline SweepPoint evaluate(const ExitLog& log, const ExitPolicy& policy) {
    policy.validate();
    const int n = log.size();
    if (n == 0) throw InvalidInputError("exitlog has no traces");
    for (const auto& t : log.traces) {
        if (t.layers() != log.num_layers) {
            throw InvalidInputError("trace layer count does not match the log header");
        }
    }

    const int threads = detail::worker_count(n);
    std::vector<detail::EvalPartial> parts(static_cast<std::size_t>(threads));
    if (threads == 1) {
        parts[0] = detail::evaluate_range(log, policy, 0, n);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(threads));
        const int chunk = (n + threads - 1) / threads;
        for (int w = 0; w < threads; ++w) {
            const int begin = w * chunk;
            const int end = std::min(begin + chunk, n);
            pool.emplace_back([&, w, begin, end] {
                parts[static_cast<std::size_t>(w)] = detail::evaluate_range(log, policy, begin, end);
            });
        }
        for (auto& th : pool) th.join();
    }

    SweepPoint point;
    point.policy = policy;
    point.exit_histogram.assign(static_cast<std::size_t>(log.num_layers), 0);
    point.correct_exit_histogram.assign(static_cast<std::size_t>(log.num_layers), 0);
    std::int64_t correct = 0, layer_sum = 0;
    for (const auto& part : parts) {
        if (part.exits.empty()) continue;
        correct += part.correct;
        layer_sum += part.layer_sum;
        for (int l = 0; l < log.num_layers; ++l) {
            point.exit_histogram[static_cast<std::size_t>(l)] += part.exits[static_cast<std::size_t>(l)];
            point.correct_exit_histogram[static_cast<std::size_t>(l)] +=
                part.correct_exits[static_cast<std::size_t>(l)];
        }
    }
    point.accuracy = static_cast<double>(correct) / n;
    point.mean_exit_layer = static_cast<double>(layer_sum) / n;
    point.speedup = log.num_layers / point.mean_exit_layer;
    return point;
}

/// Copies `base` and swaps in a grid value for the kind's main parameter:
/// delta for voting, the threshold for entropy/maxprob, s for patience.
inline ExitPolicy with_grid_value(ExitPolicy base, double value) {
    switch (base.kind) {
        case PolicyKind::voting: base.vote_threshold = value; break;
        case PolicyKind::entropy: base.entropy_threshold = value; break;
        case PolicyKind::maxprob: base.prob_threshold = value; break;
        case PolicyKind::patience:
            if (value != std::floor(value)) {
                throw InvalidInputError("patience grid values must be integers");
            }
            base.patience = static_cast<int>(value);
            break;
        case PolicyKind::oracle:
        case PolicyKind::hybrid:
            throw InvalidInputError("sweep needs a single-parameter policy kind");
    }
    base.validate();
    return base;
}

/// One SweepPoint per grid value, sorted by speed-up (stable, ascending).
inline std::vector<SweepPoint> sweep(const ExitLog& log, const ExitPolicy& base,
                                     std::span<const double> grid) {
    if (grid.empty()) throw InvalidInputError("sweep grid is empty");
    std::vector<SweepPoint> points;
    points.reserve(grid.size());
    for (double v : grid) points.push_back(evaluate(log, with_grid_value(base, v)));
    std::stable_sort(points.begin(), points.end(),
                     [](const SweepPoint& a, const SweepPoint& b) { return a.speedup < b.speedup; });
    return points;
}

/// Evaluates every policy plus the oracle bound (always the first row).
inline std::vector<SweepPoint> compare_policies(const ExitLog& log,
                                                std::span<const ExitPolicy> policies) {
    if (log.size() == 0) throw InvalidInputError("exitlog has no traces");
    std::vector<SweepPoint> rows;
    rows.reserve(policies.size() + 1);
    ExitPolicy oracle;
    oracle.kind = PolicyKind::oracle;
    rows.push_back(evaluate(log, oracle));
    for (const auto& p : policies) rows.push_back(evaluate(log, p));
    return rows;
}

/// Mean pairwise prediction disagreement across heads: the fraction of
/// samples on which two heads' argmax differ, averaged over all head pairs.
inline double head_disagreement(const ExitLog& log) {
    const int L = log.num_layers;
    if (log.size() == 0 || L < 2) throw InvalidInputError("need traces and at least two layers");
    std::int64_t disagree = 0;
    std::int64_t pairs = 0;
    for (const auto& t : log.traces) {
        std::vector<int> votes = detail::layer_votes(t);
        for (int i = 0; i < L; ++i) {
            for (int j = i + 1; j < L; ++j) {
                disagree += votes[static_cast<std::size_t>(i)] != votes[static_cast<std::size_t>(j)] ? 1 : 0;
                pairs += 1;
            }
        }
    }
    return static_cast<double>(disagree) / static_cast<double>(pairs);
}

/// Accuracy of always reading the deepest head.
inline double final_layer_accuracy(const ExitLog& log) {
    if (log.size() == 0) throw InvalidInputError("exitlog has no traces");
    std::int64_t correct = 0;
    for (const auto& t : log.traces) {
        if (argmax_class(t.dists.back()) == t.gold) ++correct;
    }
    return static_cast<double>(correct) / log.size();
}

// --- report CSVs ---------------------------------------------------------
// Inside the params column, parameters are ';'-separated so the column stays
// a single CSV field.

namespace detail {

inline std::pair<std::string, std::string> policy_columns(const ExitPolicy& p) {
    std::string spec = to_spec_string(p);
    const std::size_t colon = spec.find(':');
    std::string kind = spec.substr(0, colon);
    std::string params = colon == std::string::npos ? "" : spec.substr(colon + 1);
    std::replace(params.begin(), params.end(), ',', ';');
    return {kind, params};
}

inline std::string format_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

}  // namespace detail

inline void write_points_csv(std::ostream& os, std::span<const SweepPoint> rows) {
    os << "policy,params,accuracy,speedup,mean_exit_layer\n";
    for (const auto& r : rows) {
        const auto [kind, params] = detail::policy_columns(r.policy);
        os << kind << ',' << params << ',' << detail::format_metric(r.accuracy) << ','
           << detail::format_metric(r.speedup) << ',' << detail::format_metric(r.mean_exit_layer)
           << '\n';
    }
}

inline void write_exit_histogram_csv(std::ostream& os, std::span<const SweepPoint> rows) {
    os << "policy,params,layer,exits,correct_exits\n";
    for (const auto& r : rows) {
        const auto [kind, params] = detail::policy_columns(r.policy);
        for (std::size_t l = 0; l < r.exit_histogram.size(); ++l) {
            os << kind << ',' << params << ',' << (l + 1) << ',' << r.exit_histogram[l] << ','
               << r.correct_exit_histogram[l] << '\n';
        }
    }
}

}  // namespace exitwise

#endif  // EXITWISE_HARNESS_HPP
