#ifndef EXITWISE_MATH_HPP
#define EXITWISE_MATH_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace exitwise {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad arguments or broken call contracts (maps to CLI exit code 2).
class InvalidInputError : public Error {
public:
    using Error::Error;
};

/// Malformed or unreadable data files (maps to CLI exit code 3).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Training produced non-finite values (maps to CLI exit code 4).
class DivergenceError : public Error {
public:
    using Error::Error;
};

// Probabilities are clamped to [kProbFloor, 1] before any logarithm so that
// saturated softmax outputs cannot produce infinite losses.
inline constexpr double kProbFloor = 1e-12;

inline double log_clamped(double x) {
    return std::log(std::clamp(x, kProbFloor, 1.0));
}

// Derivative of log_clamped: zero where the clamp is active.
inline double dlog_clamped(double x) {
    return x < kProbFloor ? 0.0 : 1.0 / x;
}

/// A normalized probability vector over C >= 2 classes.
struct Distribution {
    std::vector<double> probs;

    int classes() const { return static_cast<int>(probs.size()); }
    double operator[](int i) const { return probs[static_cast<std::size_t>(i)]; }
};

/// Validates the Distribution invariants: C >= 2, entries >= 0, sum within
/// 1e-9 of one.
inline Distribution make_distribution(std::vector<double> probs) {
    if (probs.size() < 2) {
        throw InvalidInputError("distribution needs at least 2 classes, got " +
                                std::to_string(probs.size()));
    }
    double sum = 0.0;
    for (double p : probs) {
        if (!std::isfinite(p) || p < 0.0) {
            throw InvalidInputError("distribution entries must be finite and non-negative");
        }
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw InvalidInputError("distribution entries sum to " + std::to_string(sum) +
                                ", expected 1");
    }
    return Distribution{std::move(probs)};
}

/// Numerically stabilized softmax (max subtraction). Rejects non-finite
/// logits and vectors shorter than 2.
inline Distribution softmax(std::span<const double> logits) {
    if (logits.size() < 2) {
        throw InvalidInputError("softmax needs at least 2 logits");
    }
    double max_logit = logits[0];
    for (double v : logits) {
        if (!std::isfinite(v)) {
            throw InvalidInputError("softmax input must be finite");
        }
        max_logit = std::max(max_logit, v);
    }
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - max_logit);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return Distribution{std::move(out)};
}

/// Shannon entropy in nats; 0 * ln 0 counts as 0.
inline double entropy(const Distribution& p) {
    double h = 0.0;
    for (double v : p.probs) {
        if (v > 0.0) h -= v * log_clamped(v);
    }
    return h;
}

/// Cross-entropy in nats with q as the prediction and p as the target:
/// -sum_i p_i ln q_i.
inline double cross_entropy(const Distribution& q, const Distribution& p) {
    if (q.classes() != p.classes()) {
        throw InvalidInputError("cross_entropy class counts differ: " +
                                std::to_string(q.classes()) + " vs " +
                                std::to_string(p.classes()));
    }
    double ce = 0.0;
    for (int i = 0; i < q.classes(); ++i) {
        if (p[i] > 0.0) ce -= p[i] * log_clamped(q[i]);
    }
    return ce;
}

inline int argmax_class(std::span<const double> values) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(values.size()); ++i) {
        if (values[static_cast<std::size_t>(i)] > values[static_cast<std::size_t>(best)]) {
            best = i;  // strict > keeps the smallest index on ties
        }
    }
    return best;
}

inline int argmax_class(const Distribution& p) {
    return argmax_class(std::span<const double>(p.probs));
}

}  // namespace exitwise

#endif  // EXITWISE_MATH_HPP
