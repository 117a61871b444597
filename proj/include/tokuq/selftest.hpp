#pragma once
// Built-in self checks run by `tokuq selftest`: analytic gradients against
// central finite differences, causality of both white-box backends, and a
// handful of closed-form metric / evaluation fixtures.

#include <tokuq/backend.hpp>
#include <tokuq/core.hpp>
#include <tokuq/eval.hpp>
#include <tokuq/metrics.hpp>
#include <tokuq/reference_model.hpp>
#include <tokuq/rng.hpp>

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace tokuq::selftest {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

// Guards the relative error against 0/0 on coordinates whose analytic and
// numeric gradients are both (near) zero, e.g. the final row of H.
inline constexpr double kRelativeErrorFloor = 1e-8;

inline BigramBackend random_bigram(std::size_t V, std::size_t d, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Matrix E(V, d), U(V, d);
    for (double& v : E.flat()) v = scale * rng.gaussian();
    for (double& v : U.flat()) v = scale * rng.gaussian();
    return BigramBackend(std::move(E), std::move(U));
}

inline TokenSequence random_sequence(std::size_t V, std::size_t m, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    TokenSequence t;
    t.query_len = m;
    t.response_len = n;
    for (std::size_t i = 0; i < m + n; ++i) t.ids.push_back(static_cast<TokenId>(rng.next_u64() % V));
    return t;
}

// sum_i w_i log P(ids[i] | rows < i), evaluated by a plain forward pass.
inline double weighted_objective(const Backend& b, const EmbeddingMatrix& H, const TokenSequence& t,
                                 std::span<const double> w) {
    const Matrix lg = b.logits(H);
    double total = 0.0;
    for (std::size_t pos = 1; pos < t.length(); ++pos) {
        if (w[pos] == 0.0) continue;
        total += w[pos] * log_softmax(lg.row(pos - 1))[t.ids[pos]];
    }
    return total;
}

// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor) over every
// entry of H, with central differences of the given step.
inline double max_gradient_relative_error(const Backend& b, const EmbeddingMatrix& H,
                                          const TokenSequence& t, std::span<const double> w,
                                          double step = 1e-5, double floor = kRelativeErrorFloor) {
    const GradientMatrix g = log_prob_gradient(b, H, t, w);
    EmbeddingMatrix probe = H;
    double worst = 0.0;
    auto flat = probe.flat();
    const auto gf = g.flat();
    for (std::size_t n = 0; n < flat.size(); ++n) {
        const double orig = flat[n];
        flat[n] = orig + step;
        const double up = weighted_objective(b, probe, t, w);
        flat[n] = orig - step;
        const double down = weighted_objective(b, probe, t, w);
        flat[n] = orig;
        const double numeric = (up - down) / (2.0 * step);
        const double denom = std::max({std::abs(gf[n]), std::abs(numeric), floor});
        worst = std::max(worst, std::abs(gf[n] - numeric) / denom);
    }
    return worst;
}

// Replaces rows >= t of H with fresh noise and checks that logits rows < t
// (the distributions for positions <= t) are bit-identical.
inline bool suffix_perturbation_is_invisible(const Backend& b, const EmbeddingMatrix& H, std::size_t t,
                                             std::uint64_t seed) {
    const Matrix before = b.logits(H);
    EmbeddingMatrix P = H;
    Rng rng(seed);
    for (std::size_t i = t; i < P.rows(); ++i) {
        for (double& v : P.row(i)) v += rng.gaussian();
    }
    const Matrix after = b.logits(P);
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t v = 0; v < before.cols(); ++v) {
            if (std::bit_cast<std::uint64_t>(before(i, v)) != std::bit_cast<std::uint64_t>(after(i, v))) {
                return false;
            }
        }
    }
    return true;
}

// Small transformer shapes used for gradient and causality checks.
inline std::vector<TinyTransformerConfig> probe_configs() {
    std::vector<TinyTransformerConfig> out;
    const std::size_t dims[] = {8, 12, 16, 8, 16};
    const std::size_t layers[] = {1, 2, 3, 2, 0};
    const std::size_t heads[] = {2, 3, 4, 1, 2};
    const std::size_t vocab[] = {16, 32, 64, 24, 40};
    for (std::size_t i = 0; i < 5; ++i) {
        TinyTransformerConfig c;
        c.vocab_size = vocab[i];
        c.dim = dims[i];
        c.num_layers = layers[i];
        c.num_heads = heads[i];
        c.ffn_dim = 2 * dims[i];
        c.max_positions = 24;
        c.init_seed = 101 + i;
        c.init_scale = 0.5;
        out.push_back(c);
    }
    return out;
}

inline CheckResult check_gradients() {
    CheckResult r{"gradient vs central differences", true, ""};
    std::ostringstream detail;
    double worst = 0.0;
    std::size_t i = 0;
    for (const auto& cfg : probe_configs()) {
        const auto model = init_reference_model(cfg);
        const auto t = random_sequence(cfg.vocab_size, 4, 8 + 2 * i, 900 + i);
        const auto H = model.embed_tokens(t);
        worst = std::max(worst, max_gradient_relative_error(model, H, t, response_weights(t)));
        ++i;
    }
    const auto bigram = random_bigram(8, 4, 17);
    const auto tb = random_sequence(8, 3, 6, 18);
    const double bigram_err =
        max_gradient_relative_error(bigram, bigram.embed_tokens(tb), tb, response_weights(tb));
    r.passed = worst < 1e-4 && bigram_err < 1e-6;
    detail << "transformer max rel err " << worst << ", bigram " << bigram_err;
    r.detail = detail.str();
    return r;
}

inline CheckResult check_causality(std::size_t trials = 20) {
    CheckResult r{"causality under suffix perturbation", true, ""};
    const auto configs = probe_configs();
    for (std::size_t k = 0; k < trials; ++k) {
        const auto& cfg = configs[k % configs.size()];
        const auto model = init_reference_model(cfg);
        const auto bigram = random_bigram(cfg.vocab_size, cfg.dim, 300 + k);
        const auto t = random_sequence(cfg.vocab_size, 3, 9, 500 + k);
        const std::size_t cut = 1 + k % (t.length() - 1);
        if (!suffix_perturbation_is_invisible(model, model.embed_tokens(t), cut, 700 + k) ||
            !suffix_perturbation_is_invisible(bigram, bigram.embed_tokens(t), cut, 800 + k)) {
            r.passed = false;
            r.detail = "trial " + std::to_string(k) + " leaked a suffix change";
            return r;
        }
    }
    r.detail = std::to_string(trials) + " trials";
    return r;
}

inline CheckResult check_metric_fixtures() {
    CheckResult r{"metric closed forms", true, ""};
    auto fail = [&](const std::string& what) {
        if (r.passed) r.detail = what;
        r.passed = false;
    };
    const std::vector<double> uniform(4, 0.25), onehot = {0.0, 1.0, 0.0};
    if (std::abs(entropy_of(uniform) - std::log(4.0)) > 1e-12) fail("uniform entropy");
    if (entropy_of(onehot) != 0.0) fail("one-hot entropy");
    if (std::abs(entropy_of(std::vector<double>{0.7, 0.2, 0.1}) - 0.8018185525433373) > 1e-12)
        fail("entropy (0.7, 0.2, 0.1)");

    const auto bigram = random_bigram(6, 3, 41);
    const auto t = random_sequence(6, 2, 5, 42);
    const auto H = bigram.embed_tokens(t);
    PerturbationConfig cfg;
    cfg.sigma = 0.0;
    for (double v : random_perturbation_series(bigram, H, t, cfg, "fixture").values) {
        if (v != 0.0) fail("rand_pert at sigma 0");
    }
    cfg.alpha = 0.0;
    for (auto mode : {PerturbationMode::adv_l2, PerturbationMode::adv_linf}) {
        cfg.mode = mode;
        for (double v : adversarial_score_series(bigram, H, t, cfg).score_series.values) {
            if (v != 0.0) fail("adversarial score at alpha 0");
        }
    }
    cfg.mode = PerturbationMode::adv_l2;
    cfg.alpha = 1e-4;
    const auto out = adversarial_score_series(bigram, H, t, cfg);
    double sum = 0.0;
    for (double v : out.score_series.values) sum += v;
    if (std::abs(sum - (out.objective_before - out.objective_after)) > 1e-9) fail("telescoping sum");
    if (!(out.objective_after < out.objective_before)) fail("adv_l2 descent");
    if (r.passed) r.detail = "entropy, sigma=0, alpha=0, telescoping, descent";
    return r;
}

inline CheckResult check_eval_fixtures() {
    CheckResult r{"evaluation fixtures", true, ""};
    auto fail = [&](const std::string& what) {
        if (r.passed) r.detail = what;
        r.passed = false;
    };
    const std::vector<double> s = {0.9, 0.9, 0.2, 0.1};
    if (std::abs(auroc({true, false, true, false}, s) - 0.625) > 1e-12) fail("auroc tie fixture");
    const std::vector<double> ap = {0.9, 0.8, 0.7};
    if (std::abs(average_precision({true, false, true}, ap) - 5.0 / 6.0) > 1e-9) fail("average precision");
    if (resolve_k(KSpec::percent(1), 250) != 3 || resolve_k(KSpec::percent(1), 50) != 1 ||
        resolve_k(KSpec::absolute(5), 4) != 4)
        fail("resolve_k");
    const std::vector<double> tie = {0.5, 0.5, 0.1};
    if (top_k_indices(tie, 1) != std::vector<std::size_t>{0}) fail("top-k tie break");
    if (r.passed) r.detail = "auroc, AP, resolve_k, top-k";
    return r;
}

inline std::vector<CheckResult> run_all() {
    std::vector<CheckResult> out;
    const std::vector<std::function<CheckResult()>> checks = {
        [] { return check_gradients(); }, [] { return check_causality(); },
        [] { return check_metric_fixtures(); }, [] { return check_eval_fixtures(); }};
    for (const auto& check : checks) {
        try {
            out.push_back(check());
        } catch (const std::exception& e) {
            out.push_back({"(check threw)", false, e.what()});
        }
    }
    return out;
}

}  // namespace tokuq::selftest
