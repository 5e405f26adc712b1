#ifndef EXITWISE_EXIT_POLICY_HPP
#define EXITWISE_EXIT_POLICY_HPP

#include <cmath>
#include <cstdio>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "exitwise/math.hpp"
#include "exitwise/model.hpp"

namespace exitwise {

enum class PolicyKind { entropy, maxprob, patience, voting, oracle, hybrid };

inline const char* to_string(PolicyKind k) {
    switch (k) {
        case PolicyKind::entropy: return "entropy";
        case PolicyKind::maxprob: return "maxprob";
        case PolicyKind::patience: return "patience";
        case PolicyKind::voting: return "voting";
        case PolicyKind::oracle: return "oracle";
        case PolicyKind::hybrid: return "hybrid";
    }
    return "?";
}

/// An exit strategy plus its parameters. Hybrid policies hold two inner
/// policies; the first one wins prediction ties.
struct ExitPolicy {
    PolicyKind kind = PolicyKind::entropy;
    double entropy_threshold = 0.0;   // exit when entropy(x_l) < threshold
    double prob_threshold = 1.0;      // exit when max prob >= threshold
    int patience = 1;                 // consecutive agreements required
    double vote_threshold = 1.0;      // delta: exit when V_l >= delta
    double vote_exponent = 0.0;       // k in [0,1)
    bool voting_final_uses_last_argmax = false;  // fallback prediction flavor
    std::vector<ExitPolicy> inner;

    void validate() const {
        switch (kind) {
            case PolicyKind::entropy:
                if (!(entropy_threshold >= 0.0) || !std::isfinite(entropy_threshold)) {
                    throw InvalidInputError("entropy threshold must be finite and >= 0");
                }
                break;
            case PolicyKind::maxprob:
                if (!(prob_threshold > 0.0 && prob_threshold <= 1.0)) {
                    throw InvalidInputError("maxprob threshold must lie in (0,1]");
                }
                break;
            case PolicyKind::patience:
                if (patience < 1) throw InvalidInputError("patience must be >= 1");
                break;
            case PolicyKind::voting:
                if (!(vote_threshold > 0.0) || !std::isfinite(vote_threshold)) {
                    throw InvalidInputError("voting delta must be finite and > 0");
                }
                if (!(vote_exponent >= 0.0 && vote_exponent < 1.0)) {
                    throw InvalidInputError("voting exponent k must lie in [0,1)");
                }
                break;
            case PolicyKind::oracle:
                break;
            case PolicyKind::hybrid:
                if (inner.size() != 2) {
                    throw InvalidInputError("hybrid needs exactly two inner policies");
                }
                for (const auto& p : inner) {
                    if (p.kind == PolicyKind::hybrid) {
                        throw InvalidInputError("hybrid policies cannot nest");
                    }
                    p.validate();
                }
                break;
        }
    }
};

struct ExitOutcome {
    int exit_layer = 1;        // 1-based
    int prediction = 0;
    bool forced_final = false; // no criterion fired anywhere, fell back to layer L
};

/// Scaled maximum vote count V_l over the first l head predictions:
/// max_c(votes for c) / l^k.
inline double vote_score(std::span<const Distribution> dists, double k) {
    if (dists.empty()) throw InvalidInputError("vote_score needs at least one distribution");
    std::vector<int> votes(static_cast<std::size_t>(dists[0].classes()), 0);
    int max_votes = 0;
    for (const auto& d : dists) {
        const int v = argmax_class(d);
        max_votes = std::max(max_votes, ++votes[static_cast<std::size_t>(v)]);
    }
    return static_cast<double>(max_votes) /
           std::pow(static_cast<double>(dists.size()), k);
}

namespace detail {

// Plurality class among the first l votes, smallest class on ties.
inline int plurality(std::span<const int> votes_per_layer, int upto, int num_classes) {
    std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
    for (int i = 0; i < upto; ++i) ++counts[static_cast<std::size_t>(votes_per_layer[static_cast<std::size_t>(i)])];
    int best = 0;
    for (int c = 1; c < num_classes; ++c) {
        if (counts[static_cast<std::size_t>(c)] > counts[static_cast<std::size_t>(best)]) best = c;
    }
    return best;
}

inline std::vector<int> layer_votes(const LayerTrace& trace) {
    std::vector<int> votes;
    votes.reserve(trace.dists.size());
    for (const auto& d : trace.dists) votes.push_back(argmax_class(d));
    return votes;
}

}  // namespace detail

/// Exit at the smallest l with V_l >= delta; the emitted prediction is the
/// plurality vote among the first l heads.
inline ExitOutcome decide_voting(const LayerTrace& trace, double delta, double k,
                                 bool final_uses_last_argmax = false) {
    const int L = trace.layers();
    const int C = trace.dists[0].classes();
    const std::vector<int> votes = detail::layer_votes(trace);
    std::vector<int> counts(static_cast<std::size_t>(C), 0);
    int max_votes = 0;
    for (int l = 1; l <= L; ++l) {
        max_votes = std::max(max_votes, ++counts[static_cast<std::size_t>(votes[static_cast<std::size_t>(l - 1)])]);
        const double score = static_cast<double>(max_votes) / std::pow(static_cast<double>(l), k);
        if (score >= delta) {
            return ExitOutcome{l, detail::plurality(votes, l, C), false};
        }
    }
    const int pred = final_uses_last_argmax ? votes.back() : detail::plurality(votes, L, C);
    return ExitOutcome{L, pred, true};
}

/// Exit once the argmax prediction has stayed unchanged for `patience`
/// consecutive layers; the counter resets to zero on every change.
inline ExitOutcome decide_patience(const LayerTrace& trace, int patience) {
    const int L = trace.layers();
    const std::vector<int> votes = detail::layer_votes(trace);
    int streak = 0;
    for (int l = 2; l <= L; ++l) {
        streak = votes[static_cast<std::size_t>(l - 1)] == votes[static_cast<std::size_t>(l - 2)] ? streak + 1 : 0;
        if (streak >= patience) {
            return ExitOutcome{l, votes[static_cast<std::size_t>(l - 1)], false};
        }
    }
    return ExitOutcome{L, votes.back(), true};
}

/// Exit at the first layer whose entropy falls strictly below the threshold.
inline ExitOutcome decide_entropy(const LayerTrace& trace, double threshold) {
    const int L = trace.layers();
    for (int l = 1; l <= L; ++l) {
        const Distribution& d = trace.dists[static_cast<std::size_t>(l - 1)];
        if (entropy(d) < threshold) {
            return ExitOutcome{l, argmax_class(d), false};
        }
    }
    return ExitOutcome{L, argmax_class(trace.dists.back()), true};
}

/// Exit at the first layer whose top probability reaches the threshold.
inline ExitOutcome decide_maxprob(const LayerTrace& trace, double threshold) {
    const int L = trace.layers();
    for (int l = 1; l <= L; ++l) {
        const Distribution& d = trace.dists[static_cast<std::size_t>(l - 1)];
        if (d[argmax_class(d)] >= threshold) {
            return ExitOutcome{l, argmax_class(d), false};
        }
    }
    return ExitOutcome{L, argmax_class(trace.dists.back()), true};
}

/// Idealized upper bound: exits at the first head whose argmax equals the
/// gold label; wrong at layer L by construction when no head is correct.
inline ExitOutcome decide_oracle(const LayerTrace& trace) {
    const int L = trace.layers();
    for (int l = 1; l <= L; ++l) {
        const int pred = argmax_class(trace.dists[static_cast<std::size_t>(l - 1)]);
        if (pred == trace.gold) return ExitOutcome{l, pred, false};
    }
    return ExitOutcome{L, argmax_class(trace.dists.back()), true};
}

ExitOutcome decide(const LayerTrace& trace, const ExitPolicy& policy);

/// Fires when either inner policy fires; the earlier layer wins, and on the
/// same layer a real exit beats a forced one, then the first policy wins.
inline ExitOutcome decide_hybrid(const LayerTrace& trace, const ExitPolicy& policy) {
    const ExitOutcome a = decide(trace, policy.inner[0]);
    const ExitOutcome b = decide(trace, policy.inner[1]);
    if (a.exit_layer != b.exit_layer) return a.exit_layer < b.exit_layer ? a : b;
    if (a.forced_final != b.forced_final) return a.forced_final ? b : a;
    return a;
}

inline ExitOutcome decide(const LayerTrace& trace, const ExitPolicy& policy) {
    if (trace.dists.empty()) throw InvalidInputError("trace has no distributions");
    switch (policy.kind) {
        case PolicyKind::entropy: return decide_entropy(trace, policy.entropy_threshold);
        case PolicyKind::maxprob: return decide_maxprob(trace, policy.prob_threshold);
        case PolicyKind::patience: return decide_patience(trace, policy.patience);
        case PolicyKind::voting:
            return decide_voting(trace, policy.vote_threshold, policy.vote_exponent,
                                 policy.voting_final_uses_last_argmax);
        case PolicyKind::oracle: return decide_oracle(trace);
        case PolicyKind::hybrid: return decide_hybrid(trace, policy);
    }
    throw InvalidInputError("unknown policy kind");
}

// --- policy spec strings -----------------------------------------------------
// e.g. "voting:delta=2.5,k=0.5", "patience:s=6", "entropy:t=0.3",
// "maxprob:t=0.9", "oracle", "hybrid:voting:delta=2.5,k=0.5+entropy:t=0.15".
// Every parameter is mandatory; there are no silent defaults.

namespace detail {

inline std::map<std::string, double> parse_kv_params(const std::string& s, const std::string& spec) {
    std::map<std::string, double> out;
    std::size_t pos = 0;
    while (pos < s.size()) {
        std::size_t next = s.find(',', pos);
        if (next == std::string::npos) next = s.size();
        const std::string item = s.substr(pos, next - pos);
        const std::size_t eq = item.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 >= item.size()) {
            throw InvalidInputError("bad policy parameter '" + item + "' in '" + spec + "'");
        }
        const std::string key = item.substr(0, eq);
        const std::string val = item.substr(eq + 1);
        double v = 0.0;
        try {
            std::size_t used = 0;
            v = std::stod(val, &used);
            if (used != val.size()) throw std::invalid_argument(val);
        } catch (const std::invalid_argument&) {
            throw InvalidInputError("non-numeric value for '" + key + "' in '" + spec + "'");
        } catch (const std::out_of_range&) {
            throw InvalidInputError("out-of-range value for '" + key + "' in '" + spec + "'");
        }
        if (!out.emplace(key, v).second) {
            throw InvalidInputError("duplicate parameter '" + key + "' in '" + spec + "'");
        }
        pos = next + 1;
    }
    return out;
}

inline double take_param(std::map<std::string, double>& params, const std::string& key,
                         const std::string& spec) {
    auto it = params.find(key);
    if (it == params.end()) {
        throw InvalidInputError("policy '" + spec + "' is missing required parameter '" + key + "'");
    }
    const double v = it->second;
    params.erase(it);
    return v;
}

inline void reject_leftovers(const std::map<std::string, double>& params, const std::string& spec) {
    if (!params.empty()) {
        throw InvalidInputError("unknown parameter '" + params.begin()->first + "' in '" + spec + "'");
    }
}

}  // namespace detail

inline ExitPolicy parse_policy(const std::string& spec) {
    const std::size_t colon = spec.find(':');
    const std::string head = spec.substr(0, colon);
    const std::string rest = colon == std::string::npos ? "" : spec.substr(colon + 1);

    ExitPolicy p;
    if (head == "oracle") {
        if (!rest.empty()) throw InvalidInputError("oracle takes no parameters: '" + spec + "'");
        p.kind = PolicyKind::oracle;
        return p;
    }
    if (head == "hybrid") {
        const std::size_t plus = rest.find('+');
        if (plus == std::string::npos) {
            throw InvalidInputError("hybrid needs two '+'-separated inner policies: '" + spec + "'");
        }
        p.kind = PolicyKind::hybrid;
        p.inner.push_back(parse_policy(rest.substr(0, plus)));
        p.inner.push_back(parse_policy(rest.substr(plus + 1)));
        p.validate();
        return p;
    }

    auto params = detail::parse_kv_params(rest, spec);
    if (head == "entropy") {
        p.kind = PolicyKind::entropy;
        p.entropy_threshold = detail::take_param(params, "t", spec);
    } else if (head == "maxprob") {
        p.kind = PolicyKind::maxprob;
        p.prob_threshold = detail::take_param(params, "t", spec);
    } else if (head == "patience") {
        p.kind = PolicyKind::patience;
        const double s = detail::take_param(params, "s", spec);
        if (s != std::floor(s)) throw InvalidInputError("patience s must be an integer: '" + spec + "'");
        p.patience = static_cast<int>(s);
    } else if (head == "voting") {
        p.kind = PolicyKind::voting;
        p.vote_threshold = detail::take_param(params, "delta", spec);
        p.vote_exponent = detail::take_param(params, "k", spec);
    } else {
        throw InvalidInputError("unknown policy kind '" + head + "' in '" + spec + "'");
    }
    detail::reject_leftovers(params, spec);
    p.validate();
    return p;
}

namespace detail {

inline std::string format_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

}  // namespace detail

/// Canonical spec string, parseable by parse_policy.
inline std::string to_spec_string(const ExitPolicy& p) {
    switch (p.kind) {
        case PolicyKind::entropy: return "entropy:t=" + detail::format_num(p.entropy_threshold);
        case PolicyKind::maxprob: return "maxprob:t=" + detail::format_num(p.prob_threshold);
        case PolicyKind::patience: return "patience:s=" + std::to_string(p.patience);
        case PolicyKind::voting:
            return "voting:delta=" + detail::format_num(p.vote_threshold) +
                   ",k=" + detail::format_num(p.vote_exponent);
        case PolicyKind::oracle: return "oracle";
        case PolicyKind::hybrid:
            return "hybrid:" + to_spec_string(p.inner[0]) + "+" + to_spec_string(p.inner[1]);
    }
    return "?";
}

}  // namespace exitwise

#endif  // EXITWISE_EXIT_POLICY_HPP
