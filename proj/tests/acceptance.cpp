// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <tokuq/commands.hpp>
#include <tokuq/selftest.hpp>

#include "oracles.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <thread>

using namespace tokuq;

namespace {

// NLL top-1 detection rate on the end-to-end synthetic corpus, measured once and frozen.
constexpr double kFrozenNllTop1 = 0.64;

struct Verdict {
    bool ok = true;
    std::ostringstream why;
    void require(bool cond, const std::string& msg) {
        if (!cond) {
            ok = false;
            why << " [" << msg << "]";
        }
    }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::size_t worker_count() { return std::max(1u, std::thread::hardware_concurrency()); }

bool run(int id, const std::string& title, double budget_s, const std::function<void(Verdict&)>& body) {
    Verdict v;
    const auto t0 = Clock::now();
    try {
        body(v);
    } catch (const std::exception& e) {
        v.require(false, std::string("exception: ") + e.what());
    }
    const double dt = seconds_since(t0);
    if (budget_s > 0.0) v.require(dt < budget_s, "over time budget");
    std::printf("%s criterion %d: %s (%.2fs)%s\n", v.ok ? "PASS" : "FAIL", id, title.c_str(), dt,
                v.why.str().c_str());
    std::fflush(stdout);
    return v.ok;
}

std::string fmt(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3g", x);
    return buf;
}

void gradients(Verdict& v) {
    double worst = 0.0;
    std::size_t probes = 0;
    for (const auto& cfg : selftest::probe_configs()) {
        const auto model = init_reference_model(cfg);
        for (std::size_t len : {std::size_t{6}, std::size_t{24}}) {
            const auto t = oracle::random_tokens(cfg.vocab_size, 3, len - 3, cfg.init_seed + len);
            Matrix H = model.embed_tokens(t);
            const auto w = response_weights(t);
            const auto g = log_prob_gradient(model, H, t, w);
            worst = std::max(worst, oracle::max_relative_error(g, oracle::finite_difference_gradient(model, H, t, w)));
            ++probes;
        }
    }
    v.require(probes >= 10, "too few transformer probes");
    v.require(worst < 1e-4, "transformer FD rel err " + fmt(worst));

    double bigram_fd = 0.0, bigram_closed = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto b = oracle::random_bigram(32, 8, seed, 0.7);
        const auto t = oracle::random_tokens(32, 4, 16, seed);
        const Matrix H = b.embed_tokens(t);
        const auto w = response_weights(t);
        const auto g = log_prob_gradient(b, H, t, w);
        bigram_fd = std::max(bigram_fd, oracle::max_relative_error(g, oracle::finite_difference_gradient(b, H, t, w)));
        bigram_closed = std::max(
            bigram_closed, oracle::max_abs_diff(g, oracle::bigram_response_gradient(b.unembedding_table(), H, t, w)));
    }
    v.require(bigram_fd < 1e-4, "bigram FD rel err " + fmt(bigram_fd));
    v.require(bigram_closed < 1e-10, "bigram closed-form diff " + fmt(bigram_closed));
    v.why << " transformer=" << fmt(worst) << " bigram_fd=" << fmt(bigram_fd) << " closed=" << fmt(bigram_closed);
}

void causality(Verdict& v) {
    const auto configs = selftest::probe_configs();
    Rng rng(77);
    std::size_t failures = 0;
    for (std::size_t trial = 0; trial < 100; ++trial) {
        const auto model = init_reference_model(configs[trial % configs.size()]);
        const auto bigram = oracle::random_bigram(16, 6, 500 + trial);
        const std::size_t len = 2 + rng.next_u64() % 23;
        const std::size_t t = rng.next_u64() % len;
        const auto toks = oracle::random_tokens(16, 1, len - 1, trial);
        failures += selftest::suffix_perturbation_is_invisible(model, model.embed_tokens(toks), t, trial) ? 0 : 1;
        failures += selftest::suffix_perturbation_is_invisible(bigram, bigram.embed_tokens(toks), t, trial) ? 0 : 1;
    }
    v.require(failures == 0, std::to_string(failures) + " trials changed a prefix distribution");
}

void adversarial_identities(Verdict& v) {
    std::vector<std::pair<std::unique_ptr<Backend>, TokenSequence>> fixtures;
    for (std::uint64_t s = 0; s < 3; ++s) {
        auto cfg = oracle::small_config(s, 40 + s);
        fixtures.emplace_back(std::make_unique<ReferenceModel>(init_reference_model(cfg)),
                              oracle::random_tokens(cfg.vocab_size, 4, 12, s));
        fixtures.emplace_back(std::make_unique<BigramBackend>(oracle::random_bigram(16, 6, 90 + s)),
                              oracle::random_tokens(16, 3, 10, 90 + s));
    }
    double worst_sum = 0.0;
    for (const auto& [backend, t] : fixtures) {
        const Matrix H = backend->embed_tokens(t);
        for (auto mode : {PerturbationMode::adv_l2, PerturbationMode::adv_linf}) {
            PerturbationConfig cfg;
            cfg.mode = mode;
            cfg.alpha = 0.0;
            for (double x : adversarial_score_series(*backend, H, t, cfg).score_series.values) {
                v.require(x == 0.0, "nonzero score at alpha 0");
            }
            for (double alpha : {1e-6, 1e-5, 1e-4, 1e-2}) {
                cfg.alpha = alpha;
                const auto out = adversarial_score_series(*backend, H, t, cfg);
                double sum = 0.0;
                for (double x : out.score_series.values) sum += x;
                worst_sum = std::max(worst_sum, std::abs(sum - (out.objective_before - out.objective_after)));
                if (mode == PerturbationMode::adv_l2 && alpha <= 1e-4) {
                    v.require(out.objective_after < out.objective_before,
                              "objective did not decrease at alpha " + fmt(alpha));
                }
            }
        }
    }
    v.require(worst_sum < 1e-9, "telescoping diff " + fmt(worst_sum));
}

void delta_method(Verdict& v) {
    const auto b = oracle::random_bigram(16, 8, 4242, 0.5);
    const auto t = oracle::random_tokens(16, 2, 12, 4242);
    const Matrix H = b.embed_tokens(t);
    PerturbationConfig cfg;
    cfg.sigma = 1e-4;
    cfg.num_samples = 10000;
    cfg.seed = 99;
    const auto var = random_perturbation_series(b, H, t, cfg, "delta").values;
    std::size_t within = 0;
    for (std::size_t j = 0; j < t.response_len; ++j) {
        const std::size_t pos = t.position_of(j);
        const auto p = oracle::softmax_direct(oracle::bigram_logits(b.unembedding_table(), H.row(pos - 1)));
        const auto glog = oracle::bigram_logprob_grad(b.unembedding_table(), H.row(pos - 1), t.ids[pos]);
        double norm2 = 0.0;
        for (double x : glog) norm2 += x * x;
        const double P = p[t.ids[pos]];
        const double predicted = cfg.sigma * cfg.sigma * P * P * norm2;
        within += std::abs(var[j] - predicted) <= 0.25 * predicted ? 1 : 0;
    }
    const double frac = static_cast<double>(within) / static_cast<double>(t.response_len);
    v.require(frac >= 0.9, "only " + fmt(frac) + " of tokens within 25%");
    v.why << " within=" << within << "/" << t.response_len;

    cfg.sigma = 0.0;
    cfg.num_samples = 50;
    for (double x : random_perturbation_series(b, H, t, cfg, "delta").values) v.require(x == 0.0, "sigma 0 nonzero");
}

void entropy_nll(Verdict& v) {
    // Explicit distributions served through a trace backend.
    const std::size_t V = 8;
    std::vector<std::vector<double>> dists = {std::vector<double>(V, 1.0 / V), {1, 0, 0, 0, 0, 0, 0, 0},
                                              {0.25, 0.25, 0.5, 0, 0, 0, 0, 0},
                                              {0.05, 0.1, 0.15, 0.2, 0.25, 0.1, 0.1, 0.05}};
    TraceRecord tr{"e", {std::log(0.25), 0.0, std::log(0.5), std::log(0.2)}, dists, std::nullopt, "", std::nullopt};
    const TraceBackend tb(V, {tr});
    const auto ent = entropy_series(tb.trace("e"));
    for (std::size_t i = 0; i < dists.size(); ++i) {
        v.require(std::abs(ent.values[i] - oracle::entropy_direct(dists[i])) < 1e-12, "entropy row " + std::to_string(i));
    }
    v.require(std::abs(ent.values[0] - std::log(8.0)) < 1e-12, "uniform entropy");
    v.require(ent.values[1] == 0.0, "one-hot entropy");
    v.require(std::abs(nll_series(tb.trace("e")).values[0] - std::log(4.0)) < 1e-12, "trace nll of 0.25");

    // White-box: logits chosen so the observed token has probability 0.25.
    Matrix E(4, 4), U(4, 4);
    for (std::size_t i = 0; i < 4; ++i) E(i, i) = 1.0;
    const BigramBackend b(E, U);  // zero unembedding: uniform over 4 tokens
    const TokenSequence t{{0, 1, 2, 3}, 1, 3};
    const Matrix H = b.embed_tokens(t);
    for (double x : nll_series(b, H, t).values) v.require(std::abs(x - std::log(4.0)) < 1e-12, "nll of 0.25");
    for (double x : entropy_series(b, H, t).values) v.require(std::abs(x - std::log(4.0)) < 1e-12, "uniform ln|V|");

    const auto model = init_reference_model(oracle::small_config(1, 5));
    const auto toks = oracle::random_tokens(32, 3, 9, 5);
    const Matrix Hm = model.embed_tokens(toks);
    const auto es = entropy_series(model, Hm, toks).values;
    const auto ns = nll_series(model, Hm, toks).values;
    const Matrix lg = model.forward_logits(Hm);
    for (std::size_t j = 0; j < toks.response_len; ++j) {
        const auto row = lg.row(toks.position_of(j) - 1);
        const auto p = oracle::softmax_direct({row.begin(), row.end()});
        v.require(std::abs(es[j] - oracle::entropy_direct(p)) < 1e-12, "model entropy");
        v.require(std::abs(ns[j] + std::log(p[toks.response_token(j)])) < 1e-12, "model nll");
    }
}

void eval_oracles(Verdict& v) {
    Rng rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.next_u64() % 40;
        std::vector<double> s(n);
        for (double& x : s) x = static_cast<double>(rng.next_u64() % 6);  // plenty of ties
        const std::size_t a = rng.next_u64() % n;
        const std::size_t e = a + 1 + rng.next_u64() % (n - a);
        const bool pct = trial % 2 == 1;
        const double kv = pct ? 1.0 + static_cast<double>(rng.next_u64() % 100) : 1.0 + static_cast<double>(rng.next_u64() % 8);
        const KSpec spec = pct ? KSpec::percent(kv) : KSpec::absolute(static_cast<std::size_t>(kv));
        const auto out = detect_wrong_step({Metric::nll, s}, WrongStepAnnotation{{a, e}, std::nullopt, std::nullopt}, spec);
        const std::size_t k = oracle::brute_resolve_k(pct, kv, n);
        const auto expect = oracle::brute_top_k(s, k);
        bool hit = false;
        for (std::size_t i : expect) hit = hit || (i >= a && i < e);
        v.require(out.resolved_k == k && out.top_k_indices == expect && out.detected == hit,
                  "detection mismatch at trial " + std::to_string(trial));
    }
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng.next_u64() % 30;
        std::vector<bool> labels(n);
        std::vector<double> s(n);
        for (std::size_t i = 0; i < n; ++i) {
            labels[i] = i == 0 ? true : (i == 1 ? false : rng.uniform() < 0.5);
            s[i] = static_cast<double>(rng.next_u64() % 5);
        }
        v.require(std::abs(auroc(labels, s) - oracle::all_pairs_auroc(labels, s)) < 1e-12, "auroc fuzz");
        v.require(std::abs(average_precision(labels, s) - oracle::rank_precision_ap(labels, s)) < 1e-12, "ap fuzz");
    }
    v.require(std::abs(auroc({true, false, true, false}, std::vector<double>{0.9, 0.9, 0.2, 0.1}) - 0.625) < 1e-12,
              "auroc tie fixture");
    v.require(std::abs(average_precision({true, false, true}, std::vector<double>{0.9, 0.8, 0.7}) - 0.8333333333) < 1e-9,
              "ap fixture");
    v.require(resolve_k(KSpec::percent(1), 250) == 3, "resolve 1% of 250");
    v.require(resolve_k(KSpec::percent(1), 50) == 1, "resolve 1% of 50");
    v.require(resolve_k(KSpec::absolute(5), 4) == 4, "resolve 5 of 4");
}

ReferenceModel synthetic_model() {
    return init_reference_model({64, 32, 2, 4, 64, 80, 2024, 1.0});
}

SynthCorpusConfig synthetic_config() {
    SynthCorpusConfig cfg;
    cfg.num_cases = 200;
    cfg.prompt_len = 8;
    cfg.response_len = 64;
    cfg.corruption_fraction = 1.0;
    cfg.seed = 7;
    return cfg;
}

void end_to_end(Verdict& v) {
    const auto model = synthetic_model();
    const auto cases = synth_corpus(model, synthetic_config());
    ScoreOptions so;
    so.workers = worker_count();
    const auto scores = score_cases(model, cases, so);
    DetectOptions det;
    det.k_specs = {KSpec::absolute(1), KSpec::absolute(5)};
    const auto rep = evaluate_detection(scores, cases, det);
    const double baseline = 5.0 / 64.0;
    for (const auto& r : rep.rates) {
        v.why << " " << to_string(r.metric) << "@" << r.k_spec.label() << "=" << fmt(r.rate);
        v.require(r.n_cases == 200, "case count");
        if (r.k_spec == KSpec::absolute(5)) {
            v.require(r.rate > baseline, std::string(to_string(r.metric)) + " top5 not above k/n");
        }
        if (r.metric == Metric::nll && r.k_spec == KSpec::absolute(1)) {
            v.require(r.rate >= kFrozenNllTop1, "nll top1 below frozen value");
        }
    }
    v.require(rep.rates.size() == 10, "expected 5 metrics x 2 k");
}

void reproducibility(Verdict& v) {
    const auto model = init_reference_model({32, 16, 2, 2, 32, 48, 8, 1.0});
    auto cfg = synthetic_config();
    cfg.num_cases = 16;
    cfg.response_len = 32;
    const auto cases = synth_corpus(model, cfg);
    ScoreOptions so;
    so.config.seed = 31337;
    so.workers = 1;
    const auto a = score_payload_text(score_cases(model, cases, so));
    v.require(a == score_payload_text(score_cases(model, cases, so)), "second run differs");
    so.workers = 8;
    v.require(a == score_payload_text(score_cases(model, cases, so)), "8 workers differ");

    AblationGrid grid;
    grid.sigma_values = {so.config.sigma};
    grid.num_samples_values = {so.config.num_samples};
    grid.alpha_values = {so.config.alpha};
    const auto rows = ablate(model, cases, grid, so.config, DetectOptions{}, 8);
    const auto rep = evaluate_detection(score_cases(model, cases, so), cases);
    v.require(rows.size() == rep.rates.size(), "row count");
    for (std::size_t i = 0; i < rows.size() && i < rep.rates.size(); ++i) {
        const auto& r = rep.rates[i];
        auto it = std::find_if(rows.begin(), rows.end(),
                               [&](const AblationRow& x) { return x.metric == r.metric && x.k_spec == r.k_spec; });
        v.require(it != rows.end() && it->rate == r.rate && it->n_cases == r.n_cases && it->error.empty(),
                  "ablation differs from composed pipeline");
    }
}

void ablation_sweep(Verdict& v) {
    const PerturbationConfig d;
    v.require(d.num_samples == 20 && d.sigma == 1e-3 && d.alpha == 1e-4, "perturbation defaults");
    const AblationGrid grid;
    v.require(grid.sigma_values == std::vector<double>{1e-4, 1e-3, 1e-2}, "sigma grid");
    v.require(grid.num_samples_values == std::vector<std::size_t>{5, 10, 20}, "samples grid");
    v.require(grid.alpha_values == std::vector<double>{1e-5, 1e-4, 1e-3}, "alpha grid");
    v.require(default_kspecs().size() == 3, "default k list");

    const auto model = init_reference_model({32, 16, 2, 2, 32, 48, 9, 1.0});
    auto cfg = synthetic_config();
    cfg.num_cases = 20;
    cfg.response_len = 32;
    const auto cases = synth_corpus(model, cfg);
    const auto rows = ablate(model, cases, grid, d, DetectOptions{}, worker_count());
    const std::size_t expected = 27 * grid.metrics.size() * default_kspecs().size();
    v.require(rows.size() == expected, "rows " + std::to_string(rows.size()) + " != " + std::to_string(expected));
    for (const auto& r : rows) v.require(r.error.empty(), "grid point failed: " + r.error);
    v.why << " rows=" << rows.size();
}

void tier_safety(Verdict& v) {
    const TokenSequence t{{1, 2, 3, 0}, 1, 3};
    const ReasoningCase c{"trace-case", t, WrongStepAnnotation{{1, 2}, std::nullopt, std::nullopt}, false, std::nullopt};
    const TraceRecord tr{"trace-case", {-0.1, -2.0, -0.7}, std::nullopt, std::vector<double>{0.3, 1.1, 0.8}, "", std::nullopt};
    const TraceBackend tb(4, {tr});
    const std::vector<ReasoningCase> cases = {c};
    ScoreOptions so;
    so.metrics = {Metric::nll, Metric::entropy};
    const auto ok = score_cases(tb, cases, so);
    v.require(ok.size() == 2 && ok[0].series.values[1] == 2.0 && ok[1].series.values[1] == 1.1, "trace nll/entropy");
    for (Metric m : {Metric::rand_pert, Metric::adv_l2_pert, Metric::adv_linf_pert}) {
        so.metrics = {m};
        try {
            score_cases(tb, cases, so);
            v.require(false, std::string(to_string(m)) + " was accepted");
        } catch (const Error& e) {
            v.require(e.code() == ErrorCode::capability_unsupported, "wrong error code");
            v.require(std::string(e.what()).find(to_string(m)) != std::string::npos, "metric not named");
        }
    }
}

}  // namespace

int main() {
    bool all = true;
    all &= run(1, "gradients match central differences", 30, gradients);
    all &= run(2, "causality under suffix perturbation", 10, causality);
    all &= run(3, "adversarial score identities", 0, adversarial_identities);
    all &= run(4, "delta-method variance", 60, delta_method);
    all &= run(5, "entropy and nll oracles", 0, entropy_nll);
    all &= run(6, "evaluation oracles", 0, eval_oracles);
    all &= run(7, "end-to-end synthetic detection", 300, end_to_end);
    all &= run(8, "reproducibility", 0, reproducibility);
    all &= run(9, "ablation sweep and defaults", 0, ablation_sweep);
    all &= run(10, "tier safety", 0, tier_safety);
    return all ? 0 : 1;
}
