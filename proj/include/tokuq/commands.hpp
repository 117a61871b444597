#pragma once
// Corpus-level pipelines behind the CLI: scoring, detection and correctness
// evaluation, ablation sweeps, timing, plot data, synthetic corpora, and the
// exact-match consistency baseline.

#include <tokuq/backend.hpp>
#include <tokuq/core.hpp>
#include <tokuq/eval.hpp>
#include <tokuq/io.hpp>
#include <tokuq/metrics.hpp>
#include <tokuq/reference_model.hpp>
#include <tokuq/rng.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>
#include <vector>

namespace tokuq {

// ---------------------------------------------------------------- scoring

struct ScoreOptions {
    std::vector<Metric> metrics = default_metrics();
    PerturbationConfig config;
    std::size_t workers = 1;
};

// Throws capability_unsupported naming the first metric the tier cannot serve.
inline void check_tier(const Backend& backend, std::span<const Metric> metrics) {
    const auto tier = backend.capabilities().tier;
    for (Metric m : metrics) {
        if (m == Metric::external) {
            throw Error(ErrorCode::invalid_argument, "metric external cannot be computed");
        }
        if (tier == BackendTier::trace_only && needs_white_box(m)) {
            throw Error(ErrorCode::capability_unsupported,
                        "metric " + std::string(to_string(m)) + " requires a white_box backend; "
                        "backend tier is " + std::string(to_string(tier)));
        }
    }
}

// Runs fn(i) for i in [0, n) on `workers` threads. The first exception is
// rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    next.store(n);
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

// One record per (case, metric), in case order then metric order.
inline std::vector<ScoreRecord> score_cases(const Backend& backend,
                                            std::span<const ReasoningCase> cases,
                                            const ScoreOptions& opts) {
    check_tier(backend, opts.metrics);
    validate(PerturbationConfig{opts.config.sigma, std::max<std::size_t>(opts.config.num_samples, 2),
                                opts.config.alpha});
    const bool white_box = backend.capabilities().tier == BackendTier::white_box;
    std::vector<std::vector<ScoreRecord>> per_case(cases.size());
    parallel_for(cases.size(), opts.workers, [&](std::size_t ci) {
        const ReasoningCase& c = cases[ci];
        EmbeddingMatrix H;
        if (white_box) H = embed_tokens(backend, c.tokens);
        for (Metric m : opts.metrics) {
            const auto t0 = std::chrono::steady_clock::now();
            ScoreRecord rec;
            rec.case_id = c.case_id;
            rec.config = opts.config;
            rec.config.mode = m == Metric::adv_l2_pert    ? PerturbationMode::adv_l2
                              : m == Metric::adv_linf_pert ? PerturbationMode::adv_linf
                                                           : PerturbationMode::random;
            rec.series = compute_metric(backend, c, m, rec.config, white_box ? &H : nullptr);
            rec.duration_s =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            per_case[ci].push_back(std::move(rec));
        }
    });
    std::vector<ScoreRecord> out;
    for (auto& v : per_case) {
        for (auto& r : v) out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------- detection

struct DetectOptions {
    std::vector<KSpec> k_specs;          // empty -> {3, 5, 1%}
    bool include_correct = false;        // by default only incorrect-final-answer cases count
};

struct DetectionRateRow {
    Metric metric = Metric::nll;
    KSpec k_spec;
    double rate = 0.0;
    std::size_t n_cases = 0;
};

struct DetectionReport {
    std::vector<DetectionOutcome> outcomes;
    std::vector<DetectionRateRow> rates;
    std::size_t unannotated = 0;
    std::size_t excluded_correct = 0;
    std::vector<std::string> join_failures;
};

namespace detail {

// Score lookup by (case_id, metric); join failures are collected.
inline std::map<std::pair<std::string, Metric>, const ScoreRecord*> index_scores(
    std::span<const ScoreRecord> scores) {
    std::map<std::pair<std::string, Metric>, const ScoreRecord*> idx;
    for (const auto& s : scores) idx[{s.case_id, s.series.metric}] = &s;
    return idx;
}

inline std::vector<Metric> metrics_in(std::span<const ScoreRecord> scores) {
    std::vector<Metric> out;
    for (const auto& s : scores) {
        if (std::find(out.begin(), out.end(), s.series.metric) == out.end()) out.push_back(s.series.metric);
    }
    return out;
}

}  // namespace detail

inline DetectionReport evaluate_detection(std::span<const ScoreRecord> scores,
                                          std::span<const ReasoningCase> cases,
                                          const DetectOptions& opts = {}) {
    const auto k_specs = opts.k_specs.empty() ? default_kspecs() : opts.k_specs;
    const auto metrics = detail::metrics_in(scores);
    const auto idx = detail::index_scores(scores);
    DetectionReport report;
    std::set<std::string> case_ids;
    for (const auto& c : cases) case_ids.insert(c.case_id);
    for (const auto& s : scores) {
        if (!case_ids.count(s.case_id)) {
            report.join_failures.push_back("score for unknown case '" + s.case_id + "'");
        }
    }

    std::vector<const ReasoningCase*> eligible;
    for (const auto& c : cases) {
        if (!opts.include_correct && c.final_answer_correct.value_or(false)) {
            ++report.excluded_correct;
            continue;
        }
        if (!c.annotation) {
            ++report.unannotated;
            continue;
        }
        eligible.push_back(&c);
    }
    for (Metric m : metrics) {
        for (const auto& k : k_specs) {
            std::vector<DetectionOutcome> group;
            for (const ReasoningCase* c : eligible) {
                auto it = idx.find({c->case_id, m});
                if (it == idx.end()) {
                    if (&k == &k_specs.front()) {
                        report.join_failures.push_back("case '" + c->case_id + "' has no " +
                                                       std::string(to_string(m)) + " scores");
                    }
                    continue;
                }
                if (it->second->series.size() != c->tokens.response_len) {
                    if (&k == &k_specs.front()) {
                        report.join_failures.push_back("case '" + c->case_id + "' " +
                                                       std::string(to_string(m)) +
                                                       " series length != response_len");
                    }
                    continue;
                }
                group.push_back(detect_wrong_step(it->second->series, c->annotation, k, c->case_id));
            }
            if (group.empty()) continue;
            report.rates.push_back({m, k, detection_rate(group), group.size()});
            for (auto& o : group) report.outcomes.push_back(std::move(o));
        }
    }
    return report;
}

inline std::string format_rate_table(const std::vector<DetectionRateRow>& rows) {
    std::vector<Metric> metrics;
    std::vector<KSpec> ks;
    for (const auto& r : rows) {
        if (std::find(metrics.begin(), metrics.end(), r.metric) == metrics.end()) metrics.push_back(r.metric);
        if (std::find(ks.begin(), ks.end(), r.k_spec) == ks.end()) ks.push_back(r.k_spec);
    }
    std::ostringstream os;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-16s", "metric");
    os << buf;
    for (const auto& k : ks) {
        std::snprintf(buf, sizeof buf, "%10s", k.label().c_str());
        os << buf;
    }
    os << '\n';
    for (Metric m : metrics) {
        std::snprintf(buf, sizeof buf, "%-16s", std::string(to_string(m)).c_str());
        os << buf;
        for (const auto& k : ks) {
            auto it = std::find_if(rows.begin(), rows.end(),
                                   [&](const auto& r) { return r.metric == m && r.k_spec == k; });
            if (it == rows.end()) {
                std::snprintf(buf, sizeof buf, "%10s", "-");
            } else {
                std::snprintf(buf, sizeof buf, "%10.3f", it->rate);
            }
            os << buf;
        }
        os << '\n';
    }
    return os.str();
}

inline std::vector<json> detection_report_records(const DetectionReport& report) {
    std::vector<json> out;
    for (const auto& r : report.rates) {
        out.push_back({{"format_version", kFormatVersion},
                       {"kind", "detection_rate"},
                       {"metric", to_string(r.metric)},
                       {"k", r.k_spec.label()},
                       {"rate", r.rate},
                       {"n_cases", r.n_cases}});
    }
    for (const auto& o : report.outcomes) {
        out.push_back({{"format_version", kFormatVersion},
                       {"kind", "detection_outcome"},
                       {"case_id", o.case_id},
                       {"metric", to_string(o.metric)},
                       {"k", o.k_spec.label()},
                       {"resolved_k", o.resolved_k},
                       {"top_k_indices", o.top_k_indices},
                       {"detected", o.detected}});
    }
    out.push_back({{"format_version", kFormatVersion},
                   {"kind", "detection_summary"},
                   {"unannotated", report.unannotated},
                   {"excluded_correct", report.excluded_correct},
                   {"join_failures", report.join_failures}});
    return out;
}

// ---------------------------------------------------------------- correctness

struct CorrectnessRow {
    Metric metric = Metric::nll;
    BinaryClassificationReport report;
};

// Label true = incorrect final answer; score = mean token score.
inline std::vector<CorrectnessRow> evaluate_correctness(std::span<const ScoreRecord> scores,
                                                        std::span<const ReasoningCase> cases) {
    const auto idx = detail::index_scores(scores);
    std::vector<CorrectnessRow> out;
    for (Metric m : detail::metrics_in(scores)) {
        std::vector<bool> labels_v;
        std::vector<double> values;
        for (const auto& c : cases) {
            if (!c.final_answer_correct) continue;
            auto it = idx.find({c.case_id, m});
            if (it == idx.end()) continue;
            labels_v.push_back(!*c.final_answer_correct);
            values.push_back(response_average_score(it->second->series));
        }
        const auto n_pos = static_cast<std::size_t>(std::count(labels_v.begin(), labels_v.end(), true));
        if (n_pos == 0 || n_pos == labels_v.size()) {
            throw Error(ErrorCode::invalid_argument,
                        "correctness evaluation needs both correct and incorrect cases (metric " +
                            std::string(to_string(m)) + ")");
        }
        out.push_back({m, classify(labels_v, values)});
    }
    return out;
}

// ---------------------------------------------------------------- sentences

struct SentenceOverlapRow {
    Metric metric = Metric::nll;
    double rate = 0.0;
    std::size_t n_cases = 0;
};

inline std::vector<SentenceOverlapRow> evaluate_sentence_overlap(
    std::span<const ScoreRecord> scores, std::span<const ReasoningCase> cases,
    bool include_correct = false) {
    const auto idx = detail::index_scores(scores);
    std::vector<SentenceOverlapRow> out;
    for (Metric m : detail::metrics_in(scores)) {
        std::vector<ScoredCase> group;
        for (const auto& c : cases) {
            if (!include_correct && c.final_answer_correct.value_or(false)) continue;
            if (!c.annotation || !c.sentence_boundaries) continue;
            auto it = idx.find({c.case_id, m});
            if (it == idx.end()) continue;
            group.push_back({&c, &it->second->series});
        }
        if (group.empty()) continue;
        out.push_back({m, sentence_overlap_rate(group), group.size()});
    }
    return out;
}

// ---------------------------------------------------------------- ablation

struct AblationGrid {
    std::vector<double> sigma_values{1e-4, 1e-3, 1e-2};
    std::vector<std::size_t> num_samples_values{5, 10, 20};
    std::vector<double> alpha_values{1e-5, 1e-4, 1e-3};
    std::vector<Metric> metrics = default_metrics();
};

struct AblationRow {
    Metric metric = Metric::nll;
    double sigma = 0.0;
    std::size_t num_samples = 0;
    double alpha = 0.0;
    KSpec k_spec;
    double rate = 0.0;
    std::size_t n_cases = 0;
    std::string error;  // non-empty when this grid point failed
};

inline json to_json(const AblationRow& r) {
    json j = {{"format_version", kFormatVersion},
              {"kind", "ablation"},
              {"metric", to_string(r.metric)},
              {"sigma", r.sigma},
              {"num_samples", r.num_samples},
              {"alpha", r.alpha},
              {"k", r.k_spec.label()},
              {"rate", r.rate},
              {"n_cases", r.n_cases}};
    if (!r.error.empty()) j["error"] = r.error;
    return j;
}

// One row per (sigma, num_samples, alpha) x metric x k. Scores are computed
// once per distinct setting of the hyperparameters a metric depends on.
inline std::vector<AblationRow> ablate(const Backend& backend, std::span<const ReasoningCase> cases,
                                       const AblationGrid& grid, const PerturbationConfig& base,
                                       const DetectOptions& detect = {}, std::size_t workers = 1) {
    if (grid.sigma_values.empty() || grid.num_samples_values.empty() || grid.alpha_values.empty() ||
        grid.metrics.empty()) {
        throw Error(ErrorCode::invalid_config, "ablation grid axes must be non-empty");
    }
    const auto k_specs = detect.k_specs.empty() ? default_kspecs() : detect.k_specs;
    using Key = std::tuple<Metric, double, std::size_t, double>;
    std::map<Key, std::pair<std::vector<DetectionRateRow>, std::string>> cache;

    auto relevant_key = [](Metric m, double sigma, std::size_t r, double alpha) -> Key {
        switch (m) {
            case Metric::rand_pert:
            case Metric::rand_pert_log: return {m, sigma, r, 0.0};
            case Metric::adv_l2_pert:
            case Metric::adv_linf_pert: return {m, 0.0, 0, alpha};
            default: return {m, 0.0, 0, 0.0};
        }
    };

    std::vector<AblationRow> rows;
    for (double sigma : grid.sigma_values) {
        for (std::size_t r : grid.num_samples_values) {
            for (double alpha : grid.alpha_values) {
                for (Metric m : grid.metrics) {
                    const Key key = relevant_key(m, sigma, r, alpha);
                    auto it = cache.find(key);
                    if (it == cache.end()) {
                        std::pair<std::vector<DetectionRateRow>, std::string> entry;
                        try {
                            ScoreOptions so;
                            so.metrics = {m};
                            so.config = base;
                            so.config.sigma = sigma;
                            so.config.num_samples = r;
                            so.config.alpha = alpha;
                            so.workers = workers;
                            const auto scores = score_cases(backend, cases, so);
                            DetectOptions d = detect;
                            d.k_specs = k_specs;
                            entry.first = evaluate_detection(scores, cases, d).rates;
                        } catch (const std::exception& e) {
                            entry.second = e.what();
                        }
                        it = cache.emplace(key, std::move(entry)).first;
                    }
                    for (const auto& k : k_specs) {
                        AblationRow row{m, sigma, r, alpha, k, 0.0, 0, it->second.second};
                        for (const auto& rr : it->second.first) {
                            if (rr.k_spec == k) {
                                row.rate = rr.rate;
                                row.n_cases = rr.n_cases;
                            }
                        }
                        if (row.error.empty() && row.n_cases == 0) row.error = "no eligible cases";
                        rows.push_back(std::move(row));
                    }
                }
            }
        }
    }
    return rows;
}

// ---------------------------------------------------------------- timing

struct TimingRow {
    Metric metric = Metric::nll;
    double mean_s = 0.0;
    double min_s = 0.0;
    double max_s = 0.0;
    double total_s = 0.0;
    std::size_t count = 0;
};

inline std::vector<TimingRow> timing_report(std::span<const ScoreRecord> scores) {
    std::vector<TimingRow> out;
    for (Metric m : detail::metrics_in(scores)) {
        TimingRow row{m};
        for (const auto& s : scores) {
            if (s.series.metric != m) continue;
            if (row.count == 0) {
                row.min_s = row.max_s = s.duration_s;
            } else {
                row.min_s = std::min(row.min_s, s.duration_s);
                row.max_s = std::max(row.max_s, s.duration_s);
            }
            row.total_s += s.duration_s;
            ++row.count;
        }
        row.mean_s = row.total_s / static_cast<double>(row.count);
        out.push_back(row);
    }
    return out;
}

// ---------------------------------------------------------------- plot data

struct PlotRow {
    Metric metric = Metric::nll;
    std::size_t token_index = 0;
    std::string display;
    double value = 0.0;
};

inline std::vector<PlotRow> plot_data(std::span<const ScoreRecord> scores, const ReasoningCase& c,
                                      const Vocabulary& vocab = {}) {
    std::vector<PlotRow> out;
    for (const auto& s : scores) {
        if (s.case_id != c.case_id) continue;
        const ScoreSeries norm = min_max_normalize(s.series);
        for (std::size_t j = 0; j < norm.size(); ++j) {
            const std::string text =
                j < c.tokens.response_len ? vocab.token_text(c.tokens.response_token(j)) : "";
            out.push_back({s.series.metric, j, text, norm.values[j]});
        }
    }
    if (out.empty()) throw Error(ErrorCode::invalid_argument, "unknown case_id '" + c.case_id + "'");
    return out;
}

// ---------------------------------------------------------------- synthetic corpus

enum class CorruptionSite { uniform, entropy_weighted };

struct SynthCorpusConfig {
    std::size_t num_cases = 200;
    std::size_t prompt_len = 8;
    std::size_t response_len = 64;
    double corruption_fraction = 1.0;
    std::size_t sentence_len = 8;
    DecodeStrategy strategy = DecodeStrategy::greedy;
    double temperature = 0.2;
    std::uint64_t seed = 0;
    CorruptionSite site = CorruptionSite::entropy_weighted;
};

inline void validate(const SynthCorpusConfig& c) {
    if (c.num_cases < 1 || c.prompt_len < 1 || c.response_len < 2 || c.sentence_len < 1) {
        throw Error(ErrorCode::invalid_config, "synth corpus sizes must be positive (response_len >= 2)");
    }
    if (!(c.corruption_fraction >= 0.0 && c.corruption_fraction <= 1.0)) {
        throw Error(ErrorCode::invalid_config, "corruption_fraction must lie in [0, 1]");
    }
}

// Token of median rank (probabilities descending, ties by lower id), skipping
// the excluded token.
inline TokenId median_probability_token(std::span<const double> probs, TokenId exclude) {
    std::vector<TokenId> order(probs.size());
    std::iota(order.begin(), order.end(), TokenId{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](TokenId a, TokenId b) { return probs[a] > probs[b]; });
    const std::size_t mid = probs.size() / 2;
    if (order[mid] != exclude) return order[mid];
    return order[mid + 1 < order.size() ? mid + 1 : mid - 1];
}

// Generates one response per case; a corruption_fraction share of cases has
// one token in the middle half of the response replaced by its
// median-probability alternative, which becomes the annotation [i, i+1) and
// marks the case incorrect. The corrupted position is drawn uniformly, or with
// probability proportional to the entropy of the step's next-token
// distribution (entropy_weighted: errors land where the model hesitates).
inline std::vector<ReasoningCase> synth_corpus(const ReferenceModel& model,
                                               const SynthCorpusConfig& cfg) {
    validate(cfg);
    const std::size_t V = model.vocab_size();
    std::vector<ReasoningCase> out;
    out.reserve(cfg.num_cases);
    for (std::size_t i = 0; i < cfg.num_cases; ++i) {
        ReasoningCase c;
        char id[32];
        std::snprintf(id, sizeof id, "synth-%05zu", i);
        c.case_id = id;
        Rng rng(derive_seed(cfg.seed, "synth", i));
        std::vector<TokenId> prompt(cfg.prompt_len);
        for (auto& t : prompt) t = static_cast<TokenId>(rng.next_u64() % V);
        GenerationConfig gen{cfg.temperature, cfg.response_len, cfg.strategy, rng.next_u64()};
        c.tokens = model.generate(prompt, gen);

        std::vector<Interval> sentences;
        for (std::size_t s = 0; s < cfg.response_len; s += cfg.sentence_len) {
            sentences.push_back({s, std::min(s + cfg.sentence_len, cfg.response_len)});
        }
        c.sentence_boundaries = sentences;

        const bool corrupt = rng.uniform() < cfg.corruption_fraction;
        if (!corrupt) {
            c.final_answer_correct = true;
            out.push_back(std::move(c));
            continue;
        }
        const Matrix logp = response_log_probs(model, model.embed_tokens(c.tokens), c.tokens);
        const std::size_t lo = cfg.response_len / 4;
        const std::size_t hi = std::max(lo + 1, (3 * cfg.response_len) / 4);
        std::size_t j = lo + static_cast<std::size_t>(rng.next_u64() % (hi - lo));
        if (cfg.site == CorruptionSite::entropy_weighted) {
            std::vector<double> weight(hi - lo);
            double total = 0.0;
            for (std::size_t t = lo; t < hi; ++t) total += weight[t - lo] = entropy_from_log_probs(logp.row(t));
            if (total > 0.0) {
                double u = rng.uniform() * total;
                j = hi - 1;
                for (std::size_t t = lo; t < hi; ++t) {
                    u -= weight[t - lo];
                    if (u < 0.0) {
                        j = t;
                        break;
                    }
                }
            }
        }
        std::vector<double> probs(V);
        for (std::size_t v = 0; v < V; ++v) probs[v] = std::exp(logp(j, v));
        const TokenId original = c.tokens.response_token(j);
        c.tokens.ids[c.tokens.position_of(j)] = median_probability_token(probs, original);
        c.annotation = WrongStepAnnotation{{j, j + 1}, j / cfg.sentence_len, "synthetic-corruption"};
        c.final_answer_correct = false;
        out.push_back(std::move(c));
    }
    return out;
}

// ---------------------------------------------------------------- consistency

struct ConsistencyReport {
    std::vector<double> fractions;  // per target sentence
    std::size_t least_consistent = 0;
    std::string method = "exact_token_subsequence";
};

namespace detail {

inline bool contains_subsequence(std::span<const TokenId> hay, std::span<const TokenId> needle) {
    if (needle.empty()) return true;
    return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

}  // namespace detail

// Fraction of sampled responses containing each target sentence verbatim as a
// contiguous token run. Semantic similarity judging is not implemented.
inline ConsistencyReport consistency_stub(std::span<const std::vector<TokenId>> samples,
                                          const ReasoningCase& target) {
    if (samples.size() < 2) throw Error(ErrorCode::invalid_argument, "need >= 2 sampled responses");
    std::vector<Interval> boundaries;
    if (target.sentence_boundaries) {
        boundaries = *target.sentence_boundaries;
    } else {
        boundaries = {{0, target.tokens.response_len}};
    }
    const auto response = target.tokens.response();
    ConsistencyReport rep;
    for (const auto& iv : boundaries) {
        const auto sentence = response.subspan(iv.start, iv.width());
        std::size_t hits = 0;
        for (const auto& s : samples) hits += detail::contains_subsequence(s, sentence) ? 1 : 0;
        rep.fractions.push_back(static_cast<double>(hits) / static_cast<double>(samples.size()));
    }
    for (std::size_t i = 1; i < rep.fractions.size(); ++i) {
        if (rep.fractions[i] < rep.fractions[rep.least_consistent]) rep.least_consistent = i;
    }
    return rep;
}

}  // namespace tokuq
