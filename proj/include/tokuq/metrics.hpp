#pragma once
// Token-level uncertainty scores over the generated part of a sequence.
//
//   nll            -log P(x_t)
//   entropy        Shannon entropy of the next-token distribution at t
//   rand_pert      sample variance of P(x_t) under i.i.d. Gaussian noise on H
//   adv_l2_pert    log P(x_t | H) - log P(x_t | H - alpha * g)
//   adv_linf_pert  log P(x_t | H) - log P(x_t | H - alpha * sign(g))
// where g is the gradient of the total response log-prob with respect to H.

#include <tokuq/backend.hpp>
#include <tokuq/core.hpp>
#include <tokuq/rng.hpp>

#include <cmath>
#include <optional>
#include <string_view>
#include <vector>

namespace tokuq {

struct PerturbationOutcome {
    ScoreSeries score_series;
    std::optional<EmbeddingMatrix> perturbed_embeddings;
    double objective_before = 0.0;  // total response log-prob at H
    double objective_after = 0.0;   // total response log-prob at the perturbed H
};

inline void validate(const PerturbationConfig& cfg) {
    if (!(cfg.sigma >= 0.0) || !std::isfinite(cfg.sigma))
        throw Error(ErrorCode::invalid_config, "sigma must be finite and >= 0");
    if (!(cfg.alpha >= 0.0) || !std::isfinite(cfg.alpha))
        throw Error(ErrorCode::invalid_config, "alpha must be finite and >= 0");
    if (cfg.mode == PerturbationMode::random && cfg.num_samples < 2)
        throw Error(ErrorCode::invalid_config, "num_samples must be >= 2 for random perturbation");
}

namespace detail {

inline std::vector<double> chosen_from_logits(const Matrix& logits, const TokenSequence& tokens) {
    std::vector<double> out(tokens.response_len);
    std::vector<double> row(logits.cols());
    for (std::size_t j = 0; j < tokens.response_len; ++j) {
        log_softmax(logits.row(tokens.query_len + j - 1), row);
        out[j] = row[tokens.response_token(j)];
    }
    return out;
}

// Unbiased variance, shifted by the first sample so identical samples give exactly 0.
inline double sample_variance(std::span<const double> xs) {
    const double shift = xs[0];
    double mean = 0.0;
    for (double x : xs) mean += x - shift;
    mean /= static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) {
        const double dv = (x - shift) - mean;
        ss += dv * dv;
    }
    return ss / static_cast<double>(xs.size() - 1);
}

inline void require_gradients(const Backend& b, const char* what) {
    const auto caps = b.capabilities();
    if (caps.tier != BackendTier::white_box || !caps.supports_gradients) {
        throw Error(ErrorCode::capability_unsupported,
                    std::string(what) + " requires a white_box backend with gradients, got " +
                        std::string(to_string(caps.tier)));
    }
}

}  // namespace detail

inline ScoreSeries nll_series(const Backend& backend, const EmbeddingMatrix& H,
                              const TokenSequence& tokens) {
    ScoreSeries s{Metric::nll, chosen_token_log_probs(backend, H, tokens)};
    for (double& v : s.values) v = 0.0 - v;
    return s;
}

inline ScoreSeries nll_series(const TraceRecord& trace) {
    ScoreSeries s{Metric::nll, trace.chosen_logprobs};
    for (double& v : s.values) v = 0.0 - v;
    return s;
}

inline ScoreSeries entropy_series(const Backend& backend, const EmbeddingMatrix& H,
                                  const TokenSequence& tokens) {
    const Matrix logp = response_log_probs(backend, H, tokens);
    ScoreSeries s{Metric::entropy, std::vector<double>(tokens.response_len)};
    for (std::size_t j = 0; j < tokens.response_len; ++j) {
        s.values[j] = entropy_from_log_probs(logp.row(j));
    }
    return s;
}

inline ScoreSeries entropy_series(const TraceRecord& trace) {
    if (trace.entropy) return {Metric::entropy, *trace.entropy};
    if (trace.distributions) {
        ScoreSeries s{Metric::entropy, {}};
        for (const auto& dist : *trace.distributions) s.values.push_back(entropy_of(dist));
        return s;
    }
    throw Error(ErrorCode::capability_unsupported,
                "entropy: trace '" + trace.case_id +
                    "' carries neither full distributions nor precomputed entropy");
}

// One forward pass per noise sample; value j is the unbiased variance across
// samples of P(x_t) (or log P(x_t) when log_space is set). Sample s of case
// case_id draws its noise from derive_seed(cfg.seed, case_id, s).
inline ScoreSeries random_perturbation_series(const Backend& backend, const EmbeddingMatrix& H,
                                              const TokenSequence& tokens,
                                              const PerturbationConfig& cfg,
                                              std::string_view case_id = {},
                                              bool log_space = false) {
    detail::require_white_box(backend, "rand_pert");
    PerturbationConfig checked = cfg;
    checked.mode = PerturbationMode::random;
    validate(checked);
    detail::check_tokens(backend, tokens);
    detail::check_shape(backend, H, tokens);

    const std::size_t n = tokens.response_len, S = cfg.num_samples;
    const std::size_t first_row = cfg.noise_response_only ? tokens.query_len : 0;
    Matrix samples(n, S);  // row j holds the S draws for token j
    EmbeddingMatrix noisy(H.rows(), H.cols());
    for (std::size_t s = 0; s < S; ++s) {
        Rng rng(derive_seed(cfg.seed, case_id, s));
        noisy = H;
        for (std::size_t i = first_row; i < H.rows(); ++i) {
            for (double& v : noisy.row(i)) v += cfg.sigma * rng.gaussian();
        }
        const auto lp = detail::chosen_from_logits(backend.logits(noisy), tokens);
        for (std::size_t j = 0; j < n; ++j) samples(j, s) = log_space ? lp[j] : std::exp(lp[j]);
    }
    ScoreSeries out{log_space ? Metric::rand_pert_log : Metric::rand_pert, std::vector<double>(n)};
    for (std::size_t j = 0; j < n; ++j) out.values[j] = detail::sample_variance(samples.row(j));
    return out;
}

namespace detail {

inline EmbeddingMatrix apply_adversarial_step(const EmbeddingMatrix& H, const GradientMatrix& g,
                                              const PerturbationConfig& cfg) {
    if (cfg.alpha == 0.0) return H;
    EmbeddingMatrix out = H;
    auto dst = out.flat();
    const auto grad = g.flat();
    if (cfg.mode == PerturbationMode::adv_linf) {
        for (std::size_t n = 0; n < dst.size(); ++n) {
            const double sgn = grad[n] > 0.0 ? 1.0 : (grad[n] < 0.0 ? -1.0 : 0.0);
            dst[n] -= cfg.alpha * sgn;
        }
        return out;
    }
    double step = cfg.alpha;
    if (cfg.normalize_gradient) {
        double norm2 = 0.0;
        for (double v : grad) norm2 += v * v;
        if (norm2 > 0.0) step /= std::sqrt(norm2);
    }
    for (std::size_t n = 0; n < dst.size(); ++n) dst[n] -= step * grad[n];
    return out;
}

inline void require_adversarial_mode(const PerturbationConfig& cfg) {
    if (cfg.mode != PerturbationMode::adv_l2 && cfg.mode != PerturbationMode::adv_linf) {
        throw Error(ErrorCode::invalid_config, "adversarial perturbation needs mode adv_l2 or adv_linf");
    }
}

}  // namespace detail

// H_hat = H - alpha * g (adv_l2) or H - alpha * sign(g) (adv_linf), sign(0) = 0.
inline EmbeddingMatrix adversarial_perturb(const Backend& backend, const EmbeddingMatrix& H,
                                           const TokenSequence& tokens,
                                           const PerturbationConfig& cfg) {
    detail::require_gradients(backend, "adversarial perturbation");
    detail::require_adversarial_mode(cfg);
    validate(cfg);
    const auto weights = response_weights(tokens);
    const GradientMatrix g = log_prob_gradient(backend, H, tokens, weights);
    return detail::apply_adversarial_step(H, g, cfg);
}

// One forward+backward at H, one forward at H_hat.
inline PerturbationOutcome adversarial_score_series(const Backend& backend,
                                                    const EmbeddingMatrix& H,
                                                    const TokenSequence& tokens,
                                                    const PerturbationConfig& cfg,
                                                    bool keep_perturbed = false) {
    detail::require_gradients(backend, "adversarial perturbation");
    detail::require_adversarial_mode(cfg);
    validate(cfg);
    const auto weights = response_weights(tokens);
    Matrix logits_before;
    const GradientMatrix g = log_prob_gradient(backend, H, tokens, weights, &logits_before);
    EmbeddingMatrix perturbed = detail::apply_adversarial_step(H, g, cfg);

    const auto before = detail::chosen_from_logits(logits_before, tokens);
    const auto after = detail::chosen_from_logits(backend.logits(perturbed), tokens);

    PerturbationOutcome out;
    out.score_series.metric =
        cfg.mode == PerturbationMode::adv_l2 ? Metric::adv_l2_pert : Metric::adv_linf_pert;
    out.score_series.values.resize(tokens.response_len);
    for (std::size_t j = 0; j < tokens.response_len; ++j) {
        out.score_series.values[j] = before[j] - after[j];
        out.objective_before += before[j];
        out.objective_after += after[j];
    }
    if (keep_perturbed) out.perturbed_embeddings = std::move(perturbed);
    return out;
}

inline double response_average_score(const ScoreSeries& series) {
    if (series.values.empty()) throw Error(ErrorCode::empty_series, "cannot average an empty series");
    double sum = 0.0;
    for (double v : series.values) sum += v;
    return sum / static_cast<double>(series.values.size());
}

// Any metric for one case on any backend tier. Throws capability_unsupported
// naming the metric when the tier cannot provide it.
inline ScoreSeries compute_metric(const Backend& backend, const ReasoningCase& c, Metric metric,
                                  const PerturbationConfig& cfg,
                                  const EmbeddingMatrix* embeddings = nullptr) {
    const auto caps = backend.capabilities();
    if (metric == Metric::external) {
        throw Error(ErrorCode::invalid_argument, "external scores are ingested, not computed");
    }
    if (caps.tier == BackendTier::trace_only) {
        if (needs_white_box(metric)) {
            throw Error(ErrorCode::capability_unsupported,
                        "metric " + std::string(to_string(metric)) +
                            " is not available on a trace_only backend");
        }
        const TraceRecord& trace = backend.trace(c.case_id);
        if (trace.chosen_logprobs.size() != c.tokens.response_len) {
            throw Error(ErrorCode::validation_error,
                        "trace '" + c.case_id + "' length != response_len");
        }
        return metric == Metric::nll ? nll_series(trace) : entropy_series(trace);
    }

    EmbeddingMatrix local;
    if (!embeddings) {
        local = embed_tokens(backend, c.tokens);
        embeddings = &local;
    }
    const EmbeddingMatrix& H = *embeddings;
    PerturbationConfig run = cfg;
    switch (metric) {
        case Metric::nll: return nll_series(backend, H, c.tokens);
        case Metric::entropy: return entropy_series(backend, H, c.tokens);
        case Metric::rand_pert:
        case Metric::rand_pert_log:
            run.mode = PerturbationMode::random;
            return random_perturbation_series(backend, H, c.tokens, run, c.case_id,
                                              metric == Metric::rand_pert_log);
        case Metric::adv_l2_pert:
            run.mode = PerturbationMode::adv_l2;
            return adversarial_score_series(backend, H, c.tokens, run).score_series;
        case Metric::adv_linf_pert:
            run.mode = PerturbationMode::adv_linf;
            return adversarial_score_series(backend, H, c.tokens, run).score_series;
        case Metric::external: break;
    }
    throw Error(ErrorCode::invalid_argument, "unknown metric");
}

}  // namespace tokuq
