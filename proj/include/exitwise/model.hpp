#ifndef EXITWISE_MODEL_HPP
#define EXITWISE_MODEL_HPP

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "exitwise/math.hpp"

namespace exitwise {

enum class Activation : std::uint32_t { relu = 0, tanh = 1 };

inline Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw InvalidInputError("unknown activation '" + s + "' (expected relu or tanh)");
}

inline const char* to_string(Activation a) {
    return a == Activation::relu ? "relu" : "tanh";
}

struct ModelConfig {
    int input_dim = 2;
    int hidden_dim = 16;
    int num_layers = 2;       // L, one internal classifier per layer
    int num_classes = 2;      // C
    int head_hidden_dim = 16; // width of each classifier head's hidden layer
    Activation activation = Activation::relu;
    std::uint32_t seed = 42;

    void validate() const {
        if (input_dim < 1 || hidden_dim < 1 || head_hidden_dim < 1) {
            throw InvalidInputError("model dimensions must be >= 1");
        }
        if (num_layers < 2) {
            throw InvalidInputError("num_layers must be >= 2 (the diversity term needs "
                                    "at least two internal classifiers)");
        }
        if (num_classes < 2) {
            throw InvalidInputError("num_classes must be >= 2");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

/// Per-sample record of every internal classifier's output distribution,
/// shallow to deep, plus the gold label.
struct LayerTrace {
    std::int64_t sample_id = 0;
    int gold = 0;
    std::vector<Distribution> dists;

    int layers() const { return static_cast<int>(dists.size()); }
};

// Offsets of each weight matrix and bias inside the flat parameter vector.
// Order (also the checkpoint order): block 1..L as (W row-major, b), then
// head 1..L as (hidden W, hidden b, out W, out b).
class ParamLayout {
public:
    explicit ParamLayout(const ModelConfig& cfg) : cfg_(cfg) {
        std::size_t off = 0;
        block_w_.reserve(static_cast<std::size_t>(cfg.num_layers));
        for (int i = 0; i < cfg.num_layers; ++i) {
            block_w_.push_back(off);
            off += static_cast<std::size_t>(cfg.hidden_dim) * block_in(i);
            block_b_.push_back(off);
            off += static_cast<std::size_t>(cfg.hidden_dim);
        }
        for (int i = 0; i < cfg.num_layers; ++i) {
            head_hidden_w_.push_back(off);
            off += static_cast<std::size_t>(cfg.head_hidden_dim) * cfg.hidden_dim;
            head_hidden_b_.push_back(off);
            off += static_cast<std::size_t>(cfg.head_hidden_dim);
            head_out_w_.push_back(off);
            off += static_cast<std::size_t>(cfg.num_classes) * cfg.head_hidden_dim;
            head_out_b_.push_back(off);
            off += static_cast<std::size_t>(cfg.num_classes);
        }
        total_ = off;
    }

    // Input width of block i (0-based): the first block reads raw features.
    std::size_t block_in(int i) const {
        return static_cast<std::size_t>(i == 0 ? cfg_.input_dim : cfg_.hidden_dim);
    }

    std::size_t block_w(int i) const { return block_w_[static_cast<std::size_t>(i)]; }
    std::size_t block_b(int i) const { return block_b_[static_cast<std::size_t>(i)]; }
    std::size_t head_hidden_w(int i) const { return head_hidden_w_[static_cast<std::size_t>(i)]; }
    std::size_t head_hidden_b(int i) const { return head_hidden_b_[static_cast<std::size_t>(i)]; }
    std::size_t head_out_w(int i) const { return head_out_w_[static_cast<std::size_t>(i)]; }
    std::size_t head_out_b(int i) const { return head_out_b_[static_cast<std::size_t>(i)]; }
    std::size_t total() const { return total_; }

private:
    ModelConfig cfg_;
    std::vector<std::size_t> block_w_, block_b_;
    std::vector<std::size_t> head_hidden_w_, head_hidden_b_, head_out_w_, head_out_b_;
    std::size_t total_ = 0;
};

/// L feature blocks (affine + activation) each followed by a one-hidden-layer
/// classifier head. All parameters live in one flat vector, see ParamLayout.
struct MultiExitModel {
    ModelConfig config;
    std::vector<double> params;

    ParamLayout layout() const { return ParamLayout(config); }
};

namespace detail {

inline double activate(Activation a, double z) {
    return a == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z);
}

// Derivative expressed through the activation value h = act(z).
inline double activate_deriv(Activation a, double h) {
    return a == Activation::relu ? (h > 0.0 ? 1.0 : 0.0) : 1.0 - h * h;
}

// y = W x + b, W row-major with `out` rows.
inline void affine(std::span<const double> w, std::span<const double> b,
                   std::span<const double> x, std::span<double> y) {
    const std::size_t out = b.size();
    const std::size_t in = x.size();
    for (std::size_t r = 0; r < out; ++r) {
        double acc = b[r];
        const double* wr = w.data() + r * in;
        for (std::size_t c = 0; c < in; ++c) acc += wr[c] * x[c];
        y[r] = acc;
    }
}

}  // namespace detail

/// Glorot-uniform parameters (bound sqrt(6/(fan_in+fan_out)) per matrix),
/// zero biases. Deterministic for a given config.seed.
inline MultiExitModel init_model(const ModelConfig& cfg) {
    cfg.validate();
    ParamLayout lay(cfg);
    MultiExitModel model{cfg, std::vector<double>(lay.total(), 0.0)};
    std::mt19937_64 rng(cfg.seed);
    auto fill_matrix = [&](std::size_t off, std::size_t rows, std::size_t cols) {
        const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
        std::uniform_real_distribution<double> dist(-a, a);
        for (std::size_t i = 0; i < rows * cols; ++i) model.params[off + i] = dist(rng);
    };
    const auto d = static_cast<std::size_t>(cfg.hidden_dim);
    const auto m = static_cast<std::size_t>(cfg.head_hidden_dim);
    const auto c = static_cast<std::size_t>(cfg.num_classes);
    for (int i = 0; i < cfg.num_layers; ++i) fill_matrix(lay.block_w(i), d, lay.block_in(i));
    for (int i = 0; i < cfg.num_layers; ++i) {
        fill_matrix(lay.head_hidden_w(i), m, d);
        fill_matrix(lay.head_out_w(i), c, m);
    }
    return model;
}

/// Activations recorded by forward() so backward() can run without
/// recomputing: block outputs h_i, head hidden activations and head
/// distributions, shallow to deep.
struct ForwardCache {
    std::vector<double> input;
    std::vector<std::vector<double>> block_h;
    std::vector<std::vector<double>> head_v;
    std::vector<Distribution> head_probs;
};

namespace detail {

// Runs blocks and heads 1..upto (1-based). Shared by forward and
// forward_prefix so a prefix is bitwise a prefix of the full pass.
inline std::vector<Distribution> run_layers(const MultiExitModel& model,
                                            std::span<const double> features, int upto,
                                            ForwardCache* cache) {
    const ModelConfig& cfg = model.config;
    if (static_cast<int>(features.size()) != cfg.input_dim) {
        throw InvalidInputError("feature length " + std::to_string(features.size()) +
                                " does not match input_dim " + std::to_string(cfg.input_dim));
    }
    for (double v : features) {
        if (!std::isfinite(v)) throw InvalidInputError("features must be finite");
    }
    ParamLayout lay(cfg);
    std::span<const double> p(model.params);

    std::vector<Distribution> dists;
    dists.reserve(static_cast<std::size_t>(upto));
    if (cache) {
        cache->input.assign(features.begin(), features.end());
        cache->block_h.clear();
        cache->head_v.clear();
        cache->head_probs.clear();
    }

    std::vector<double> h(static_cast<std::size_t>(cfg.hidden_dim));
    std::vector<double> prev(features.begin(), features.end());
    std::vector<double> v(static_cast<std::size_t>(cfg.head_hidden_dim));
    std::vector<double> logits(static_cast<std::size_t>(cfg.num_classes));
    for (int i = 0; i < upto; ++i) {
        detail::affine(p.subspan(lay.block_w(i), static_cast<std::size_t>(cfg.hidden_dim) * lay.block_in(i)),
                       p.subspan(lay.block_b(i), static_cast<std::size_t>(cfg.hidden_dim)), prev, h);
        for (double& z : h) z = detail::activate(cfg.activation, z);

        detail::affine(p.subspan(lay.head_hidden_w(i),
                                 static_cast<std::size_t>(cfg.head_hidden_dim) * cfg.hidden_dim),
                       p.subspan(lay.head_hidden_b(i), static_cast<std::size_t>(cfg.head_hidden_dim)),
                       h, v);
        for (double& z : v) z = detail::activate(cfg.activation, z);
        detail::affine(p.subspan(lay.head_out_w(i),
                                 static_cast<std::size_t>(cfg.num_classes) * cfg.head_hidden_dim),
                       p.subspan(lay.head_out_b(i), static_cast<std::size_t>(cfg.num_classes)),
                       v, logits);
        Distribution dist = softmax(logits);

        if (cache) {
            cache->block_h.push_back(h);
            cache->head_v.push_back(v);
            cache->head_probs.push_back(dist);
        }
        dists.push_back(std::move(dist));
        prev = h;
    }
    return dists;
}

}  // namespace detail

/// Full forward pass: all L internal classifier distributions. Pass a cache
/// to keep the activations needed for backward().
inline LayerTrace forward(const MultiExitModel& model, std::span<const double> features,
                          std::int64_t sample_id = 0, int gold = 0,
                          ForwardCache* cache = nullptr) {
    LayerTrace trace;
    trace.sample_id = sample_id;
    trace.gold = gold;
    trace.dists = detail::run_layers(model, features, model.config.num_layers, cache);
    return trace;
}

/// Runs only the first `upto_layer` blocks/heads; deeper blocks are never
/// evaluated (this is exactly what early exiting saves).
inline std::vector<Distribution> forward_prefix(const MultiExitModel& model,
                                                std::span<const double> features,
                                                int upto_layer) {
    if (upto_layer < 1 || upto_layer > model.config.num_layers) {
        throw InvalidInputError("prefix layer " + std::to_string(upto_layer) +
                                " out of range [1, " +
                                std::to_string(model.config.num_layers) + "]");
    }
    return detail::run_layers(model, features, upto_layer, nullptr);
}

/// Exact reverse-mode gradients. head_output_grads[i] is dLoss/d(x_i), the
/// gradient with respect to head i's output distribution. A head's gradient
/// reaches its own head parameters and every block at its depth or above.
inline std::vector<double> backward(const MultiExitModel& model, const ForwardCache& cache,
                                    const std::vector<std::vector<double>>& head_output_grads) {
    const ModelConfig& cfg = model.config;
    const auto L = static_cast<std::size_t>(cfg.num_layers);
    const auto d = static_cast<std::size_t>(cfg.hidden_dim);
    const auto m = static_cast<std::size_t>(cfg.head_hidden_dim);
    const auto C = static_cast<std::size_t>(cfg.num_classes);

    auto bad_cache = [&](const char* what) {
        throw InvalidInputError(std::string("forward cache does not match the model: ") + what);
    };
    if (cache.input.size() != static_cast<std::size_t>(cfg.input_dim)) bad_cache("input size");
    if (cache.block_h.size() != L || cache.head_v.size() != L || cache.head_probs.size() != L) {
        bad_cache("layer count");
    }
    for (std::size_t i = 0; i < L; ++i) {
        if (cache.block_h[i].size() != d) bad_cache("hidden size");
        if (cache.head_v[i].size() != m) bad_cache("head hidden size");
        if (cache.head_probs[i].probs.size() != C) bad_cache("class count");
    }
    if (head_output_grads.size() != L) bad_cache("gradient layer count");
    for (const auto& g : head_output_grads) {
        if (g.size() != C) bad_cache("gradient class count");
    }

    ParamLayout lay(cfg);
    std::span<const double> p(model.params);
    std::vector<double> grads(lay.total(), 0.0);

    // dh[i] collects gradient flowing into block i's activation output.
    std::vector<std::vector<double>> dh(L, std::vector<double>(d, 0.0));

    std::vector<double> ds(C), dv(m), du(m);
    for (std::size_t i = 0; i < L; ++i) {
        const auto& probs = cache.head_probs[i].probs;
        const auto& g = head_output_grads[i];
        // Through softmax: ds_j = p_j * (g_j - sum_k p_k g_k).
        double dot = 0.0;
        for (std::size_t k = 0; k < C; ++k) dot += probs[k] * g[k];
        for (std::size_t j = 0; j < C; ++j) ds[j] = probs[j] * (g[j] - dot);

        const auto& v = cache.head_v[i];
        const auto& h = cache.block_h[i];
        const int ii = static_cast<int>(i);
        double* gw_out = grads.data() + lay.head_out_w(ii);
        double* gb_out = grads.data() + lay.head_out_b(ii);
        const double* w_out = p.data() + lay.head_out_w(ii);
        std::fill(dv.begin(), dv.end(), 0.0);
        for (std::size_t r = 0; r < C; ++r) {
            gb_out[r] += ds[r];
            for (std::size_t c = 0; c < m; ++c) {
                gw_out[r * m + c] += ds[r] * v[c];
                dv[c] += w_out[r * m + c] * ds[r];
            }
        }
        for (std::size_t c = 0; c < m; ++c) {
            du[c] = dv[c] * detail::activate_deriv(cfg.activation, v[c]);
        }
        double* gw_hid = grads.data() + lay.head_hidden_w(ii);
        double* gb_hid = grads.data() + lay.head_hidden_b(ii);
        const double* w_hid = p.data() + lay.head_hidden_w(ii);
        for (std::size_t r = 0; r < m; ++r) {
            gb_hid[r] += du[r];
            for (std::size_t c = 0; c < d; ++c) {
                gw_hid[r * d + c] += du[r] * h[c];
                dh[i][c] += w_hid[r * d + c] * du[r];
            }
        }
    }

    // Block stack, deep to shallow.
    std::vector<double> dz(d);
    for (int i = static_cast<int>(L) - 1; i >= 0; --i) {
        const auto ui = static_cast<std::size_t>(i);
        const auto& h = cache.block_h[ui];
        for (std::size_t r = 0; r < d; ++r) {
            dz[r] = dh[ui][r] * detail::activate_deriv(cfg.activation, h[r]);
        }
        const std::size_t in = lay.block_in(i);
        const double* x = i == 0 ? cache.input.data() : cache.block_h[ui - 1].data();
        double* gw = grads.data() + lay.block_w(i);
        double* gb = grads.data() + lay.block_b(i);
        const double* w = p.data() + lay.block_w(i);
        for (std::size_t r = 0; r < d; ++r) {
            gb[r] += dz[r];
            for (std::size_t c = 0; c < in; ++c) gw[r * in + c] += dz[r] * x[c];
        }
        if (i > 0) {
            for (std::size_t r = 0; r < d; ++r) {
                for (std::size_t c = 0; c < d; ++c) dh[ui - 1][c] += w[r * d + c] * dz[r];
            }
        }
    }
    return grads;
}

struct AdamState {
    std::vector<double> m, v;
    std::int64_t step = 0;
};

/// One Adam update (beta1 0.9, beta2 0.999, eps 1e-8) applied in place.
/// Non-finite gradients abort with DivergenceError.
inline void adam_step(MultiExitModel& model, std::span<const double> grads, AdamState& state,
                      double lr) {
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    if (grads.size() != model.params.size()) {
        throw InvalidInputError("gradient size does not match parameter count");
    }
    for (double g : grads) {
        if (!std::isfinite(g)) {
            throw DivergenceError("non-finite gradient encountered; training diverged");
        }
    }
    if (state.m.empty()) {
        state.m.assign(model.params.size(), 0.0);
        state.v.assign(model.params.size(), 0.0);
    } else if (state.m.size() != model.params.size()) {
        throw InvalidInputError("optimizer state does not match parameter count");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < grads.size(); ++i) {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        model.params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

// --- checkpoint format -----------------------------------------------------
// magic "MEXM1", then 7 little-endian u32 (input_dim, hidden_dim, num_layers,
// num_classes, head_hidden_dim, activation, seed), then every parameter as a
// little-endian IEEE-754 double in ParamLayout order.

namespace detail {

inline void write_u32le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_f64le(std::ostream& os, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, sizeof(v));
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t read_u32le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw FormatError("checkpoint truncated while reading header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline double read_f64le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw FormatError("checkpoint truncated while reading parameters");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double d;
    std::memcpy(&d, &v, sizeof(d));
    return d;
}

inline constexpr char kCheckpointMagic[5] = {'M', 'E', 'X', 'M', '1'};

}  // namespace detail

inline void save_checkpoint(const MultiExitModel& model, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open checkpoint for writing: " + path.string());
    os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
    const ModelConfig& c = model.config;
    for (std::uint32_t v : {static_cast<std::uint32_t>(c.input_dim),
                            static_cast<std::uint32_t>(c.hidden_dim),
                            static_cast<std::uint32_t>(c.num_layers),
                            static_cast<std::uint32_t>(c.num_classes),
                            static_cast<std::uint32_t>(c.head_hidden_dim),
                            static_cast<std::uint32_t>(c.activation), c.seed}) {
        detail::write_u32le(os, v);
    }
    for (double p : model.params) detail::write_f64le(os, p);
    if (!os) throw FormatError("failed writing checkpoint: " + path.string());
}

inline MultiExitModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint: " + path.string());
    char magic[sizeof(detail::kCheckpointMagic)];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0) {
        throw FormatError("bad checkpoint magic in " + path.string());
    }
    ModelConfig cfg;
    cfg.input_dim = static_cast<int>(detail::read_u32le(is));
    cfg.hidden_dim = static_cast<int>(detail::read_u32le(is));
    cfg.num_layers = static_cast<int>(detail::read_u32le(is));
    cfg.num_classes = static_cast<int>(detail::read_u32le(is));
    cfg.head_hidden_dim = static_cast<int>(detail::read_u32le(is));
    const std::uint32_t act = detail::read_u32le(is);
    if (act > 1) throw FormatError("bad activation id in checkpoint");
    cfg.activation = static_cast<Activation>(act);
    cfg.seed = detail::read_u32le(is);
    try {
        cfg.validate();
    } catch (const InvalidInputError& e) {
        throw FormatError(std::string("checkpoint holds an invalid config: ") + e.what());
    }
    ParamLayout lay(cfg);
    MultiExitModel model{cfg, std::vector<double>(lay.total())};
    for (double& p : model.params) {
        p = detail::read_f64le(is);
        if (!std::isfinite(p)) throw FormatError("non-finite parameter in checkpoint");
    }
    is.peek();
    if (!is.eof()) throw FormatError("trailing bytes after checkpoint parameters");
    return model;
}

}  // namespace exitwise

#endif  // EXITWISE_MODEL_HPP
