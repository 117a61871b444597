#pragma once
// Independent reference computations used by the tests. Nothing here calls
// into the code under test except to obtain forward logits or tables.

#include <tokuq/backend.hpp>
#include <tokuq/core.hpp>
#include <tokuq/reference_model.hpp>
#include <tokuq/rng.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace oracle {

using namespace tokuq;

inline double logsumexp(std::span<const double> x) {
    double mx = -INFINITY;
    for (double v : x) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : x) s += std::exp(v - mx);
    return mx + std::log(s);
}

inline double entropy_direct(const std::vector<double>& p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

// Bigram: logits for row r = U * h_r.
inline std::vector<double> bigram_logits(const Matrix& U, std::span<const double> h) {
    std::vector<double> out(U.rows(), 0.0);
    for (std::size_t v = 0; v < U.rows(); ++v) {
        for (std::size_t c = 0; c < U.cols(); ++c) out[v] += U(v, c) * h[c];
    }
    return out;
}

inline std::vector<double> softmax_direct(const std::vector<double>& z) {
    const double lse = logsumexp(z);
    std::vector<double> p(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) p[i] = std::exp(z[i] - lse);
    return p;
}

// d log softmax(U h)_c / dh = U_c - sum_v p_v U_v
inline std::vector<double> bigram_logprob_grad(const Matrix& U, std::span<const double> h, TokenId c) {
    const auto p = softmax_direct(bigram_logits(U, h));
    std::vector<double> g(U.cols());
    for (std::size_t k = 0; k < U.cols(); ++k) {
        double s = U(c, k);
        for (std::size_t v = 0; v < U.rows(); ++v) s -= p[v] * U(v, k);
        g[k] = s;
    }
    return g;
}

// Closed-form gradient of the response log-prob sum on a bigram backend.
inline Matrix bigram_response_gradient(const Matrix& U, const Matrix& H, const TokenSequence& t,
                                       std::span<const double> w) {
    Matrix g(H.rows(), H.cols());
    for (std::size_t pos = 1; pos < t.length(); ++pos) {
        if (w[pos] == 0.0) continue;
        const auto gr = bigram_logprob_grad(U, H.row(pos - 1), t.ids[pos]);
        for (std::size_t k = 0; k < H.cols(); ++k) g(pos - 1, k) += w[pos] * gr[k];
    }
    return g;
}

// sum_i w_i log P(ids[i] | rows < i) straight from the backend's logits.
inline double objective(const Backend& b, const Matrix& H, const TokenSequence& t,
                        std::span<const double> w) {
    const Matrix lg = b.logits(H);
    double s = 0.0;
    for (std::size_t pos = 1; pos < t.length(); ++pos) {
        if (w[pos] == 0.0) continue;
        s += w[pos] * (lg(pos - 1, t.ids[pos]) - logsumexp(lg.row(pos - 1)));
    }
    return s;
}

inline Matrix finite_difference_gradient(const Backend& b, const Matrix& H, const TokenSequence& t,
                                         std::span<const double> w, double step = 1e-5) {
    Matrix g(H.rows(), H.cols());
    Matrix probe = H;
    for (std::size_t i = 0; i < H.rows(); ++i) {
        for (std::size_t c = 0; c < H.cols(); ++c) {
            const double orig = probe(i, c);
            probe(i, c) = orig + step;
            const double up = objective(b, probe, t, w);
            probe(i, c) = orig - step;
            const double down = objective(b, probe, t, w);
            probe(i, c) = orig;
            g(i, c) = (up - down) / (2.0 * step);
        }
    }
    return g;
}

// max |a - b| / max(|a|, |b|, floor); floor only guards 0/0.
inline double max_relative_error(const Matrix& a, const Matrix& b, double floor = 1e-8) {
    double worst = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) {
        const double x = a.flat()[n], y = b.flat()[n];
        worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
    }
    return worst;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    double worst = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) worst = std::max(worst, std::abs(a.flat()[n] - b.flat()[n]));
    return worst;
}

// Logits row i recomputed from a fresh forward over rows 0..i only.
inline Matrix per_prefix_logits(const ReferenceModel& m, const Matrix& H) {
    Matrix out(H.rows(), m.vocab_size());
    for (std::size_t i = 0; i < H.rows(); ++i) {
        Matrix prefix(i + 1, H.cols());
        for (std::size_t r = 0; r <= i; ++r) std::ranges::copy(H.row(r), prefix.row(r).begin());
        const Matrix lg = m.forward_logits(prefix);
        std::ranges::copy(lg.row(i), out.row(i).begin());
    }
    return out;
}

// Sort every (score, index) pair; take the first k.
inline std::vector<std::size_t> brute_top_k(const std::vector<double>& s, std::size_t k) {
    std::vector<std::pair<double, std::size_t>> pairs;
    for (std::size_t i = 0; i < s.size(); ++i) pairs.push_back({-s[i], i});
    std::sort(pairs.begin(), pairs.end());
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(pairs[i].second);
    std::sort(out.begin(), out.end());
    return out;
}

inline std::size_t brute_resolve_k(bool percent, double value, std::size_t n) {
    if (!percent) return std::min<std::size_t>(static_cast<std::size_t>(value), n);
    std::size_t k = 0;
    while (static_cast<double>(k) < value * static_cast<double>(n) / 100.0) ++k;  // ceiling by counting
    return std::clamp<std::size_t>(k, 1, n);
}

// Pairwise Mann-Whitney count, ties 1/2.
inline double all_pairs_auroc(const std::vector<bool>& labels, const std::vector<double>& s) {
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!labels[i]) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (labels[j]) continue;
            pairs += 1.0;
            wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
    }
    return wins / pairs;
}

// Precision at each positive's rank; ranking by score desc then index asc.
inline double rank_precision_ap(const std::vector<bool>& labels, const std::vector<double>& s) {
    std::vector<std::size_t> order(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return s[a] != s[b] ? s[a] > s[b] : a < b;
    });
    double total = 0.0;
    std::size_t pos = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
        if (!labels[order[r]]) continue;
        ++pos;
        total += static_cast<double>(pos) / static_cast<double>(r + 1);
    }
    return total / static_cast<double>(pos);
}

inline BigramBackend random_bigram(std::size_t V, std::size_t d, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Matrix E(V, d), U(V, d);
    for (double& v : E.flat()) v = scale * rng.gaussian();
    for (double& v : U.flat()) v = scale * rng.gaussian();
    return BigramBackend(std::move(E), std::move(U));
}

inline TokenSequence random_tokens(std::size_t V, std::size_t m, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    TokenSequence t{{}, m, n};
    for (std::size_t i = 0; i < m + n; ++i) t.ids.push_back(static_cast<TokenId>(rng.next_u64() % V));
    return t;
}

inline TinyTransformerConfig small_config(std::size_t shape, std::uint64_t seed) {
    TinyTransformerConfig c;
    switch (shape % 3) {
        case 0: c = {16, 8, 1, 2, 16, 24, seed, 0.5}; break;
        case 1: c = {32, 8, 2, 2, 16, 24, seed, 0.5}; break;
        default: c = {64, 16, 3, 4, 32, 24, seed, 0.5}; break;
    }
    return c;
}

inline std::string temp_path(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "tokuq_tests";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

}  // namespace oracle
