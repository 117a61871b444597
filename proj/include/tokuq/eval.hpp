#pragma once
// Evaluation protocol: top-k first-wrong-step detection, sentence-level
// aggregation, response-level AUROC / average precision, plot normalization.
//
// Ties are broken everywhere by the earlier index.

#include <tokuq/core.hpp>
#include <tokuq/metrics.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace tokuq {

struct DetectionOutcome {
    std::string case_id;
    Metric metric = Metric::nll;
    KSpec k_spec;
    std::size_t resolved_k = 0;
    std::vector<std::size_t> top_k_indices;  // ascending
    bool detected = false;
};

struct BinaryClassificationReport {
    double auroc = 0.0;
    double average_precision = 0.0;
    std::size_t n_positive = 0;
    std::size_t n_negative = 0;
};

struct SentenceMean {
    Interval interval;
    double mean = 0.0;
};

// absolute -> min(value, n); percent p -> clamp(ceil(p/100 * n), 1, n).
inline std::size_t resolve_k(const KSpec& spec, std::size_t n) {
    if (n < 1) throw Error(ErrorCode::invalid_argument, "response length must be >= 1");
    if (spec.kind == KSpec::Kind::absolute) {
        if (!(spec.value >= 1.0) || spec.value != std::floor(spec.value)) {
            throw Error(ErrorCode::invalid_argument, "absolute k must be a positive integer");
        }
        return std::min(static_cast<std::size_t>(spec.value), n);
    }
    if (!(spec.value > 0.0 && spec.value <= 100.0)) {
        throw Error(ErrorCode::invalid_argument, "percent k must lie in (0, 100]");
    }
    const double raw = std::ceil(spec.value / 100.0 * static_cast<double>(n));
    return std::clamp(static_cast<std::size_t>(raw), std::size_t{1}, n);
}

// Indices of the k largest values (score descending, then index ascending),
// returned in ascending index order.
inline std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
    if (k < 1 || k > scores.size()) throw Error(ErrorCode::invalid_argument, "k out of range");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto before = [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline DetectionOutcome detect_wrong_step(const ScoreSeries& series,
                                          const std::optional<WrongStepAnnotation>& annotation,
                                          const KSpec& spec, std::string case_id = {}) {
    if (!annotation) throw Error(ErrorCode::missing_annotation, "case '" + case_id + "' has no annotation");
    const auto& range = annotation->token_range;
    if (range.end > series.size() || range.start >= range.end) {
        throw Error(ErrorCode::invalid_argument, "annotation range does not fit the series");
    }
    DetectionOutcome out;
    out.case_id = std::move(case_id);
    out.metric = series.metric;
    out.k_spec = spec;
    out.resolved_k = resolve_k(spec, series.size());
    out.top_k_indices = top_k_indices(series.values, out.resolved_k);
    out.detected = std::any_of(out.top_k_indices.begin(), out.top_k_indices.end(),
                               [&](std::size_t i) { return range.contains(i); });
    return out;
}

inline double detection_rate(std::span<const DetectionOutcome> outcomes) {
    if (outcomes.empty()) throw Error(ErrorCode::invalid_argument, "no detection outcomes");
    std::size_t hits = 0;
    for (const auto& o : outcomes) {
        if (o.metric != outcomes.front().metric || !(o.k_spec == outcomes.front().k_spec)) {
            throw Error(ErrorCode::invalid_argument, "mixed metric or k spec in detection outcomes");
        }
        hits += o.detected ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(outcomes.size());
}

inline std::vector<SentenceMean> sentence_means(const ScoreSeries& series,
                                                std::span<const Interval> boundaries) {
    if (boundaries.empty()) throw Error(ErrorCode::invalid_argument, "no sentence boundaries");
    std::size_t cursor = 0;
    std::vector<SentenceMean> out;
    out.reserve(boundaries.size());
    for (const auto& iv : boundaries) {
        if (iv.start != cursor || iv.end <= iv.start) {
            throw Error(ErrorCode::invalid_argument, "sentence boundaries must tile the response");
        }
        cursor = iv.end;
        if (iv.end > series.size()) {
            throw Error(ErrorCode::shape_mismatch, "sentence boundaries exceed series length");
        }
        double sum = 0.0;
        for (std::size_t i = iv.start; i < iv.end; ++i) sum += series.values[i];
        out.push_back({iv, sum / static_cast<double>(iv.width())});
    }
    if (cursor != series.size()) {
        throw Error(ErrorCode::shape_mismatch, "sentence boundaries do not cover the series");
    }
    return out;
}

inline std::size_t most_uncertain_sentence(const ScoreSeries& series,
                                           std::span<const Interval> boundaries) {
    const auto means = sentence_means(series, boundaries);
    std::size_t best = 0;
    for (std::size_t i = 1; i < means.size(); ++i) {
        if (means[i].mean > means[best].mean) best = i;
    }
    return best;
}

// Sentence index of the annotation: the explicit index if present, otherwise
// the sentence containing the first annotated token.
inline std::size_t annotated_sentence(const ReasoningCase& c) {
    if (!c.annotation) throw Error(ErrorCode::missing_annotation, "case '" + c.case_id + "'");
    if (c.annotation->sentence_index) return *c.annotation->sentence_index;
    if (!c.sentence_boundaries) {
        throw Error(ErrorCode::missing_annotation, "case '" + c.case_id + "' has no sentence boundaries");
    }
    const auto& b = *c.sentence_boundaries;
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (b[i].contains(c.annotation->token_range.start)) return i;
    }
    throw Error(ErrorCode::invalid_argument, "annotation lies outside the sentence boundaries");
}

struct ScoredCase {
    const ReasoningCase* reasoning_case = nullptr;
    const ScoreSeries* series = nullptr;
};

inline double sentence_overlap_rate(std::span<const ScoredCase> cases) {
    if (cases.empty()) throw Error(ErrorCode::invalid_argument, "no cases");
    std::size_t hits = 0;
    for (const auto& sc : cases) {
        const auto& c = *sc.reasoning_case;
        if (!c.sentence_boundaries) {
            throw Error(ErrorCode::missing_annotation,
                        "case '" + c.case_id + "' has no sentence boundaries");
        }
        if (most_uncertain_sentence(*sc.series, *c.sentence_boundaries) == annotated_sentence(c)) {
            ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(cases.size());
}

// Sentence ends after a token the predicate marks terminal; the tail forms a
// final sentence.
inline std::vector<Interval> split_sentences(std::span<const TokenId> response,
                                             const std::function<bool(TokenId)>& is_terminal) {
    std::vector<Interval> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < response.size(); ++i) {
        if (is_terminal(response[i])) {
            out.push_back({start, i + 1});
            start = i + 1;
        }
    }
    if (start < response.size()) out.push_back({start, response.size()});
    return out;
}

// Terminal tokens: display text containing a newline, or ending in . ! ?
inline std::vector<Interval> split_sentences(std::span<const TokenId> response,
                                             const Vocabulary& vocab) {
    return split_sentences(response, [&](TokenId id) {
        const std::string text = vocab.token_text(id);
        if (text.find('\n') != std::string::npos) return true;
        const auto last = text.find_last_not_of(" \t");
        if (last == std::string::npos) return false;
        const char ch = text[last];
        return ch == '.' || ch == '!' || ch == '?';
    });
}

namespace detail {

inline void check_labels(const std::vector<bool>& labels, std::span<const double> scores) {
    if (labels.size() != scores.size()) {
        throw Error(ErrorCode::shape_mismatch, "labels and scores differ in length");
    }
}

}  // namespace detail

// Mann-Whitney form: P(score of random positive > random negative), ties 1/2.
inline double auroc(const std::vector<bool>& labels, std::span<const double> scores) {
    detail::check_labels(labels, scores);
    const std::size_t n = labels.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Mid-ranks over tie groups.
    double rank_sum_pos = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
        const double mid = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t t = i; t < j; ++t) {
            if (labels[idx[t]]) {
                rank_sum_pos += mid;
                ++n_pos;
            }
        }
        i = j;
    }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) {
        throw Error(ErrorCode::invalid_argument, "AUROC needs at least one positive and one negative");
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

// Mean precision at each positive's rank (score descending, index ascending).
inline double average_precision(const std::vector<bool>& labels, std::span<const double> scores) {
    detail::check_labels(labels, scores);
    std::vector<std::size_t> idx(labels.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (labels[idx[r]]) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(r + 1);
        }
    }
    if (hits == 0) throw Error(ErrorCode::invalid_argument, "average precision needs a positive label");
    return sum / static_cast<double>(hits);
}

inline BinaryClassificationReport classify(const std::vector<bool>& labels,
                                           std::span<const double> scores) {
    BinaryClassificationReport r;
    r.n_positive = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
    r.n_negative = labels.size() - r.n_positive;
    r.auroc = auroc(labels, scores);
    r.average_precision = average_precision(labels, scores);
    return r;
}

// (v - min) / (max - min); a constant series maps to zeros.
inline ScoreSeries min_max_normalize(const ScoreSeries& series) {
    if (series.values.empty()) return series;
    const auto [lo, hi] = std::minmax_element(series.values.begin(), series.values.end());
    const double mn = *lo, range = *hi - *lo;
    ScoreSeries out{series.metric, std::vector<double>(series.size(), 0.0)};
    if (range > 0.0) {
        for (std::size_t i = 0; i < series.size(); ++i) out.values[i] = (series.values[i] - mn) / range;
    }
    return out;
}

}  // namespace tokuq
