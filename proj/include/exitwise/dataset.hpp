#ifndef EXITWISE_DATASET_HPP
#define EXITWISE_DATASET_HPP

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "exitwise/math.hpp"

namespace exitwise {

struct Sample {
    std::vector<double> features;
    int label = 0;
};

struct Dataset {
    std::vector<Sample> samples;
    int num_classes = 0;
    std::string name;

    int size() const { return static_cast<int>(samples.size()); }
    int feature_dim() const { return samples.empty() ? 0 : static_cast<int>(samples[0].features.size()); }
};

enum class SyntheticKind { gaussian_blobs, two_moons, concentric_rings };

inline SyntheticKind synthetic_kind_from_string(const std::string& s) {
    if (s == "blobs" || s == "gaussian_blobs") return SyntheticKind::gaussian_blobs;
    if (s == "moons" || s == "two_moons") return SyntheticKind::two_moons;
    if (s == "rings" || s == "concentric_rings") return SyntheticKind::concentric_rings;
    throw InvalidInputError("unknown synthetic dataset kind '" + s + "'");
}

/// Deterministic 2-d synthetic datasets. Labels are assigned round-robin, so
/// class counts never differ by more than one.
inline Dataset gen_synthetic(SyntheticKind kind, int n, int num_classes, double noise,
                             std::uint32_t seed) {
    if (num_classes < 2) throw InvalidInputError("num_classes must be >= 2");
    if (n < num_classes) throw InvalidInputError("need at least one sample per class");
    if (noise < 0.0 || !std::isfinite(noise)) throw InvalidInputError("noise must be >= 0");
    if (kind == SyntheticKind::two_moons && num_classes != 2) {
        throw InvalidInputError("two_moons is a binary dataset; got num_classes = " +
                                std::to_string(num_classes));
    }

    Dataset ds;
    ds.num_classes = num_classes;
    ds.samples.reserve(static_cast<std::size_t>(n));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    for (int i = 0; i < n; ++i) {
        const int label = i % num_classes;
        double x = 0.0, y = 0.0;
        switch (kind) {
            case SyntheticKind::gaussian_blobs: {
                const double ang = 2.0 * std::numbers::pi * label / num_classes;
                x = 4.0 * std::cos(ang);
                y = 4.0 * std::sin(ang);
                break;
            }
            case SyntheticKind::two_moons: {
                const double t = std::numbers::pi * unit(rng);
                if (label == 0) {
                    x = std::cos(t);
                    y = std::sin(t);
                } else {
                    x = 1.0 - std::cos(t);
                    y = 0.5 - std::sin(t);
                }
                break;
            }
            case SyntheticKind::concentric_rings: {
                const double theta = 2.0 * std::numbers::pi * unit(rng);
                const double r = 1.0 + label;
                x = r * std::cos(theta);
                y = r * std::sin(theta);
                break;
            }
        }
        x += noise * gauss(rng);
        y += noise * gauss(rng);
        ds.samples.push_back(Sample{{x, y}, label});
    }
    return ds;
}

namespace detail {

inline double parse_double_field(const std::string& field, int line_no) {
    double value = 0.0;
    const char* first = field.data();
    const char* last = field.data() + field.size();
    while (first != last && (*first == ' ' || *first == '\t')) ++first;
    while (last != first && (*(last - 1) == ' ' || *(last - 1) == '\t' || *(last - 1) == '\r')) --last;
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last) {
        throw FormatError("line " + std::to_string(line_no) + ": non-numeric field '" + field + "'");
    }
    return value;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace detail

/// CSV rows are `label,f1,f2,...`. The class count is inferred as
/// max(label)+1. Ragged or non-numeric rows are rejected with their line
/// number.
inline Dataset load_csv_dataset(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open dataset: " + path.string());
    Dataset ds;
    ds.name = path.filename().string();
    std::string line;
    int line_no = 0;
    int width = -1;
    int max_label = -1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() < 2) {
            throw FormatError("line " + std::to_string(line_no) +
                              ": expected label followed by features");
        }
        if (width < 0) {
            width = static_cast<int>(fields.size());
        } else if (static_cast<int>(fields.size()) != width) {
            throw FormatError("line " + std::to_string(line_no) + ": expected " +
                              std::to_string(width) + " fields, got " +
                              std::to_string(fields.size()));
        }
        const double raw_label = detail::parse_double_field(fields[0], line_no);
        const int label = static_cast<int>(raw_label);
        if (label < 0 || static_cast<double>(label) != raw_label) {
            throw FormatError("line " + std::to_string(line_no) +
                              ": label must be a non-negative integer");
        }
        Sample s;
        s.label = label;
        max_label = std::max(max_label, label);
        s.features.reserve(fields.size() - 1);
        for (std::size_t i = 1; i < fields.size(); ++i) {
            const double v = detail::parse_double_field(fields[i], line_no);
            if (!std::isfinite(v)) {
                throw FormatError("line " + std::to_string(line_no) + ": non-finite feature");
            }
            s.features.push_back(v);
        }
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.empty()) throw FormatError("dataset file is empty: " + path.string());
    ds.num_classes = max_label + 1;
    return ds;
}

inline void save_csv_dataset(const Dataset& ds, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open dataset for writing: " + path.string());
    char buf[64];
    for (const auto& s : ds.samples) {
        os << s.label;
        for (double f : s.features) {
            std::snprintf(buf, sizeof(buf), "%.17g", f);
            os << ',' << buf;
        }
        os << '\n';
    }
    if (!os) throw FormatError("failed writing dataset: " + path.string());
}

}  // namespace exitwise

#endif  // EXITWISE_DATASET_HPP
