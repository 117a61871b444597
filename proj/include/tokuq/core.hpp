#pragma once
// Domain types shared by every tokuq module.
//
// Response-token indices are 0-based and relative to the first generated
// token: response index j names sequence position query_len + j.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tokuq {

using TokenId = std::uint32_t;

enum class ErrorCode {
    capability_unsupported,
    shape_mismatch,
    position_overflow,
    invalid_config,
    invalid_argument,
    empty_series,
    missing_annotation,
    parse_error,
    validation_error,
    io_error,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::capability_unsupported: return "capability_unsupported";
        case ErrorCode::shape_mismatch: return "shape_mismatch";
        case ErrorCode::position_overflow: return "position_overflow";
        case ErrorCode::invalid_config: return "invalid_config";
        case ErrorCode::invalid_argument: return "invalid_argument";
        case ErrorCode::empty_series: return "empty_series";
        case ErrorCode::missing_annotation: return "missing_annotation";
        case ErrorCode::parse_error: return "parse_error";
        case ErrorCode::validation_error: return "validation_error";
        case ErrorCode::io_error: return "io_error";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

// Dense row-major matrix of doubles. Used for embeddings, gradients, logits
// and model parameters.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> flat() noexcept { return data_; }
    std::span<const double> flat() const noexcept { return data_; }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// H: one row per sequence position, d columns.
using EmbeddingMatrix = Matrix;
// dObjective/dH, same shape as the EmbeddingMatrix it differentiates.
using GradientMatrix = Matrix;

struct Vocabulary {
    std::size_t size = 0;
    std::vector<std::string> display;  // optional; empty or exactly `size` entries

    std::string token_text(TokenId id) const {
        if (id < display.size()) return display[id];
        return "<" + std::to_string(id) + ">";
    }
};

struct TokenSequence {
    std::vector<TokenId> ids;
    std::size_t query_len = 0;
    std::size_t response_len = 0;

    std::size_t length() const noexcept { return ids.size(); }
    // Sequence position of response index j.
    std::size_t position_of(std::size_t response_index) const noexcept {
        return query_len + response_index;
    }
    TokenId response_token(std::size_t j) const { return ids.at(query_len + j); }
    std::span<const TokenId> response() const {
        return std::span<const TokenId>(ids).subspan(query_len, response_len);
    }

    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

enum class PerturbationMode { random, adv_l2, adv_linf };

struct PerturbationConfig {
    double sigma = 0.001;
    std::size_t num_samples = 20;
    double alpha = 0.0001;
    PerturbationMode mode = PerturbationMode::random;
    std::uint64_t seed = 0;
    bool normalize_gradient = false;
    bool noise_response_only = false;  // ablation: leave query rows unperturbed

    friend bool operator==(const PerturbationConfig&, const PerturbationConfig&) = default;
};

enum class DecodeStrategy { greedy, sample };

struct GenerationConfig {
    double temperature = 0.2;
    std::size_t max_new_tokens = 1;
    DecodeStrategy strategy = DecodeStrategy::greedy;
    std::uint64_t seed = 0;
};

enum class Metric { nll, entropy, rand_pert, adv_l2_pert, adv_linf_pert, external, rand_pert_log };

inline std::string_view to_string(Metric m) {
    switch (m) {
        case Metric::nll: return "nll";
        case Metric::entropy: return "entropy";
        case Metric::rand_pert: return "rand_pert";
        case Metric::adv_l2_pert: return "adv_l2_pert";
        case Metric::adv_linf_pert: return "adv_linf_pert";
        case Metric::external: return "external";
        case Metric::rand_pert_log: return "rand_pert_log";
    }
    return "unknown";
}

inline std::optional<Metric> parse_metric(std::string_view s) {
    for (Metric m : {Metric::nll, Metric::entropy, Metric::rand_pert, Metric::adv_l2_pert,
                     Metric::adv_linf_pert, Metric::external, Metric::rand_pert_log}) {
        if (to_string(m) == s) return m;
    }
    return std::nullopt;
}

// The five scores reported by default; rand_pert_log and external are opt-in.
inline std::vector<Metric> default_metrics() {
    return {Metric::nll, Metric::entropy, Metric::rand_pert, Metric::adv_l2_pert,
            Metric::adv_linf_pert};
}

inline bool needs_white_box(Metric m) {
    return m == Metric::rand_pert || m == Metric::rand_pert_log || m == Metric::adv_l2_pert ||
           m == Metric::adv_linf_pert;
}

// One score per generated token; larger = more uncertain.
struct ScoreSeries {
    Metric metric = Metric::nll;
    std::vector<double> values;

    std::size_t size() const noexcept { return values.size(); }

    friend bool operator==(const ScoreSeries&, const ScoreSeries&) = default;
};

struct Interval {
    std::size_t start = 0;
    std::size_t end = 0;  // exclusive

    std::size_t width() const noexcept { return end - start; }
    bool contains(std::size_t i) const noexcept { return i >= start && i < end; }

    friend bool operator==(const Interval&, const Interval&) = default;
};

struct WrongStepAnnotation {
    Interval token_range;
    std::optional<std::size_t> sentence_index;
    std::optional<std::string> source;

    friend bool operator==(const WrongStepAnnotation&, const WrongStepAnnotation&) = default;
};

struct KSpec {
    enum class Kind { absolute, percent };
    Kind kind = Kind::absolute;
    double value = 1;

    static KSpec absolute(std::size_t k) { return {Kind::absolute, static_cast<double>(k)}; }
    static KSpec percent(double p) { return {Kind::percent, p}; }

    // "top3" / "1%"
    std::string label() const {
        if (kind == Kind::absolute) return "top" + std::to_string(static_cast<std::size_t>(value));
        std::string s = std::to_string(value);
        s.erase(s.find_last_not_of('0') + 1);
        if (!s.empty() && s.back() == '.') s.pop_back();
        return s + "%";
    }

    friend bool operator==(const KSpec&, const KSpec&) = default;
};

// Parses "5" (absolute) or "1%" (percent).
inline KSpec parse_kspec(std::string_view text) {
    if (text.empty()) throw Error(ErrorCode::invalid_argument, "empty k spec");
    std::string s(text);
    if (s.rfind("top", 0) == 0) s = s.substr(3);
    try {
        std::size_t used = 0;
        if (s.back() == '%') {
            double p = std::stod(s.substr(0, s.size() - 1), &used);
            if (used != s.size() - 1 || !(p > 0.0 && p <= 100.0)) throw std::invalid_argument(s);
            return KSpec::percent(p);
        }
        long long k = std::stoll(s, &used);
        if (used != s.size() || k < 1) throw std::invalid_argument(s);
        return KSpec::absolute(static_cast<std::size_t>(k));
    } catch (const std::logic_error&) {
        throw Error(ErrorCode::invalid_argument, "bad k spec '" + std::string(text) + "'");
    }
}

inline std::vector<KSpec> default_kspecs() {
    return {KSpec::absolute(3), KSpec::absolute(5), KSpec::percent(1)};
}

struct ReasoningCase {
    std::string case_id;
    TokenSequence tokens;
    std::optional<WrongStepAnnotation> annotation;
    std::optional<bool> final_answer_correct;
    std::optional<std::vector<Interval>> sentence_boundaries;

    friend bool operator==(const ReasoningCase&, const ReasoningCase&) = default;
};

// Returns one human-readable description per broken invariant; empty when valid.
inline std::vector<std::string> validate_case(const ReasoningCase& c, const Vocabulary& vocab) {
    std::vector<std::string> out;
    const auto& t = c.tokens;
    if (vocab.size < 2) out.push_back("vocabulary.size: must be >= 2");
    if (t.query_len < 1) out.push_back("tokens.query_len: must be >= 1");
    if (t.response_len < 1) out.push_back("tokens.response_len: must be >= 1");
    if (t.ids.size() != t.query_len + t.response_len) {
        out.push_back("tokens.ids: length " + std::to_string(t.ids.size()) +
                      " != query_len + response_len = " +
                      std::to_string(t.query_len + t.response_len));
    }
    for (std::size_t i = 0; i < t.ids.size(); ++i) {
        if (t.ids[i] >= vocab.size) {
            out.push_back("tokens.ids[" + std::to_string(i) + "]: id " + std::to_string(t.ids[i]) +
                          " >= vocabulary size " + std::to_string(vocab.size));
            break;
        }
    }
    if (c.annotation) {
        const auto& r = c.annotation->token_range;
        if (!(r.start < r.end && r.end <= t.response_len)) {
            out.push_back("annotation.token_range: [" + std::to_string(r.start) + "," +
                          std::to_string(r.end) + ") must satisfy 0 <= start < end <= " +
                          std::to_string(t.response_len));
        }
        if (c.annotation->sentence_index && c.sentence_boundaries &&
            *c.annotation->sentence_index >= c.sentence_boundaries->size()) {
            out.push_back("annotation.sentence_index: out of range");
        }
    }
    if (c.sentence_boundaries) {
        std::size_t cursor = 0;
        bool broken = false;
        for (const auto& iv : *c.sentence_boundaries) {
            broken = true;
            if (iv.start >= iv.end) {
                out.push_back("sentence_boundaries: empty or inverted interval [" +
                              std::to_string(iv.start) + "," + std::to_string(iv.end) + ")");
                break;
            }
            if (iv.start < cursor) {
                out.push_back("sentence_boundaries: overlap or unsorted at index " +
                              std::to_string(iv.start));
                break;
            }
            if (iv.start > cursor) {
                out.push_back("sentence_boundaries: coverage gap at index " +
                              std::to_string(cursor));
                break;
            }
            cursor = iv.end;
            broken = false;
        }
        if (!broken && cursor != t.response_len) {
            out.push_back("sentence_boundaries: union must equal [0," +
                          std::to_string(t.response_len) + "), ends at " + std::to_string(cursor));
        }
    }
    return out;
}

}  // namespace tokuq
