#pragma once
// Model-access contract for the uncertainty metrics, plus the closed-form
// bigram backend and the trace-only backend for externally produced scores.
//
// White-box backends expose three hooks: token embedding lookup, teacher-forced
// logits over a (possibly perturbed) embedding matrix H, and the analytic
// gradient of a weighted sum of chosen-token log-probs with respect to H.
// Logit row i of H predicts sequence position i + 1, and must depend only on
// rows 0..i of H.

#include <tokuq/core.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tokuq {

enum class BackendTier { white_box, trace_only };

inline std::string_view to_string(BackendTier t) {
    return t == BackendTier::white_box ? "white_box" : "trace_only";
}

struct BackendCapabilities {
    BackendTier tier = BackendTier::white_box;
    bool supports_gradients = false;
    bool supports_embedding_override = false;
    std::size_t embedding_dim = 0;  // white_box only
};

struct NextTokenDistribution {
    std::vector<double> probs;
    std::size_t position = 0;  // sequence position whose token this predicts
};

// Externally produced per-token statistics for one case.
struct TraceRecord {
    std::string case_id;
    std::vector<double> chosen_logprobs;                       // length response_len, all <= 0
    std::optional<std::vector<std::vector<double>>> distributions;  // full next-token probs
    std::optional<std::vector<double>> entropy;                     // precomputed, nats
    std::string model;
    std::optional<double> temperature;
};

class Backend {
public:
    virtual ~Backend() = default;

    virtual BackendCapabilities capabilities() const = 0;
    virtual std::size_t vocab_size() const = 0;

    virtual EmbeddingMatrix embed_tokens(const TokenSequence&) const { unsupported("embedTokens"); }

    // (rows of H) x |V| logits; row i predicts position i + 1.
    virtual Matrix logits(const EmbeddingMatrix&) const { unsupported("forward"); }

    // d/dH of sum_i weights[i] * log P(ids[i] | rows < i). weights[0] has no
    // predicting row and contributes nothing. When logits_out is non-null it
    // receives the logits of the forward pass the gradient was taken at.
    virtual GradientMatrix log_prob_gradient_raw(const EmbeddingMatrix&, const TokenSequence&,
                                                 std::span<const double>,
                                                 Matrix* /*logits_out*/ = nullptr) const {
        unsupported("logProbGradient");
    }

    virtual const TraceRecord& trace(std::string_view) const { unsupported("trace lookup"); }

protected:
    [[noreturn]] void unsupported(const char* op) const {
        throw Error(ErrorCode::capability_unsupported,
                    std::string(op) + " requires a capability the " +
                        std::string(to_string(capabilities().tier)) + " backend lacks");
    }
};

// Numerically stable log-softmax of one logit row.
inline void log_softmax(std::span<const double> logits, std::span<double> out) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
}

inline std::vector<double> log_softmax(std::span<const double> logits) {
    std::vector<double> out(logits.size());
    log_softmax(logits, out);
    return out;
}

inline void softmax(std::span<const double> logits, std::span<double> out) {
    log_softmax(logits, out);
    for (double& v : out) v = std::exp(v);
}

// Shannon entropy in nats of a distribution given by its log-probs.
inline double entropy_from_log_probs(std::span<const double> logp) {
    double h = 0.0;
    for (double lp : logp) {
        const double p = std::exp(lp);
        if (p > 0.0) h -= p * lp;
    }
    const double upper = std::log(static_cast<double>(logp.size()));
    return std::clamp(h, 0.0, upper);
}

inline double entropy_of(std::span<const double> probs) {
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) h -= p * std::log(p);
    }
    return std::clamp(h, 0.0, std::log(static_cast<double>(probs.size())));
}

namespace detail {

inline void require_white_box(const Backend& b, const char* op) {
    if (b.capabilities().tier != BackendTier::white_box) {
        throw Error(ErrorCode::capability_unsupported,
                    std::string(op) + " is unavailable on a trace_only backend");
    }
}

inline void check_tokens(const Backend& b, const TokenSequence& t) {
    if (t.query_len < 1 || t.response_len < 1 || t.ids.size() != t.query_len + t.response_len) {
        throw Error(ErrorCode::invalid_argument, "malformed token sequence");
    }
    for (TokenId id : t.ids) {
        if (id >= b.vocab_size()) {
            throw Error(ErrorCode::invalid_argument,
                        "token id " + std::to_string(id) + " out of vocabulary range " +
                            std::to_string(b.vocab_size()));
        }
    }
}

inline void check_shape(const Backend& b, const EmbeddingMatrix& H, const TokenSequence& t) {
    const auto caps = b.capabilities();
    if (H.rows() != t.length() || H.cols() != caps.embedding_dim) {
        throw Error(ErrorCode::shape_mismatch,
                    "H is " + std::to_string(H.rows()) + "x" + std::to_string(H.cols()) +
                        ", expected " + std::to_string(t.length()) + "x" +
                        std::to_string(caps.embedding_dim));
    }
}

}  // namespace detail

inline EmbeddingMatrix embed_tokens(const Backend& b, const TokenSequence& tokens) {
    detail::require_white_box(b, "embedTokens");
    detail::check_tokens(b, tokens);
    return b.embed_tokens(tokens);
}

// Log-probs of the full vocabulary at each generated position: row j is the
// distribution predicting response index j.
inline Matrix response_log_probs(const Backend& b, const EmbeddingMatrix& H,
                                 const TokenSequence& tokens) {
    detail::require_white_box(b, "forwardDistributions");
    detail::check_tokens(b, tokens);
    detail::check_shape(b, H, tokens);
    const Matrix logits = b.logits(H);
    Matrix out(tokens.response_len, b.vocab_size());
    for (std::size_t j = 0; j < tokens.response_len; ++j) {
        log_softmax(logits.row(tokens.query_len + j - 1), out.row(j));
    }
    return out;
}

inline std::vector<NextTokenDistribution> forward_distributions(const Backend& b,
                                                                const EmbeddingMatrix& H,
                                                                const TokenSequence& tokens) {
    const Matrix logp = response_log_probs(b, H, tokens);
    std::vector<NextTokenDistribution> out(tokens.response_len);
    for (std::size_t j = 0; j < tokens.response_len; ++j) {
        out[j].position = tokens.query_len + j;
        out[j].probs.resize(logp.cols());
        for (std::size_t v = 0; v < logp.cols(); ++v) out[j].probs[v] = std::exp(logp(j, v));
    }
    return out;
}

inline std::vector<double> chosen_token_log_probs(const Backend& b, const EmbeddingMatrix& H,
                                                  const TokenSequence& tokens) {
    const Matrix logp = response_log_probs(b, H, tokens);
    std::vector<double> out(tokens.response_len);
    for (std::size_t j = 0; j < tokens.response_len; ++j) {
        out[j] = logp(j, tokens.response_token(j));
    }
    return out;
}

// Unit weight on every generated position, zero on the query.
inline std::vector<double> response_weights(const TokenSequence& tokens) {
    std::vector<double> w(tokens.length(), 0.0);
    std::fill(w.begin() + static_cast<std::ptrdiff_t>(tokens.query_len), w.end(), 1.0);
    return w;
}

inline GradientMatrix log_prob_gradient(const Backend& b, const EmbeddingMatrix& H,
                                        const TokenSequence& tokens,
                                        std::span<const double> position_weights,
                                        Matrix* logits_out = nullptr) {
    detail::require_white_box(b, "logProbGradient");
    if (!b.capabilities().supports_gradients) {
        throw Error(ErrorCode::capability_unsupported, "backend has no gradient support");
    }
    detail::check_tokens(b, tokens);
    detail::check_shape(b, H, tokens);
    if (position_weights.size() != tokens.length()) {
        throw Error(ErrorCode::shape_mismatch, "position_weights length != sequence length");
    }
    for (double w : position_weights) {
        if (!std::isfinite(w)) throw Error(ErrorCode::invalid_argument, "non-finite weight");
    }
    return b.log_prob_gradient_raw(H, tokens, position_weights, logits_out);
}

// logits(row i) = unembedding * h_i. Used as the analytic oracle backend.
class BigramBackend final : public Backend {
public:
    BigramBackend(Matrix embedding_table, Matrix unembedding_table)
        : embedding_(std::move(embedding_table)), unembedding_(std::move(unembedding_table)) {
        if (embedding_.rows() != unembedding_.rows() || embedding_.cols() != unembedding_.cols() ||
            embedding_.rows() < 2 || embedding_.cols() < 1) {
            throw Error(ErrorCode::shape_mismatch,
                        "bigram tables must both be |V| x d with |V| >= 2, d >= 1");
        }
        if (!embedding_.all_finite() || !unembedding_.all_finite()) {
            throw Error(ErrorCode::invalid_argument, "bigram tables must be finite");
        }
    }

    BackendCapabilities capabilities() const override {
        return {BackendTier::white_box, true, true, embedding_.cols()};
    }
    std::size_t vocab_size() const override { return embedding_.rows(); }

    const Matrix& embedding_table() const { return embedding_; }
    const Matrix& unembedding_table() const { return unembedding_; }

    EmbeddingMatrix embed_tokens(const TokenSequence& tokens) const override {
        EmbeddingMatrix H(tokens.length(), embedding_.cols());
        for (std::size_t i = 0; i < tokens.length(); ++i) {
            std::ranges::copy(embedding_.row(tokens.ids[i]), H.row(i).begin());
        }
        return H;
    }

    Matrix logits(const EmbeddingMatrix& H) const override {
        const std::size_t V = vocab_size(), d = embedding_.cols();
        Matrix out(H.rows(), V);
        for (std::size_t i = 0; i < H.rows(); ++i) {
            for (std::size_t v = 0; v < V; ++v) {
                double acc = 0.0;
                for (std::size_t c = 0; c < d; ++c) acc += unembedding_(v, c) * H(i, c);
                out(i, v) = acc;
            }
        }
        return out;
    }

    GradientMatrix log_prob_gradient_raw(const EmbeddingMatrix& H, const TokenSequence& tokens,
                                         std::span<const double> weights,
                                         Matrix* logits_out = nullptr) const override {
        const std::size_t V = vocab_size(), d = embedding_.cols();
        GradientMatrix grad(H.rows(), d);
        Matrix lg = logits(H);
        std::vector<double> p(V);
        for (std::size_t pos = 1; pos < tokens.length(); ++pos) {
            const double w = weights[pos];
            if (w == 0.0) continue;
            const std::size_t r = pos - 1;
            softmax(lg.row(r), p);
            for (std::size_t v = 0; v < V; ++v) {
                const double dl = w * ((v == tokens.ids[pos] ? 1.0 : 0.0) - p[v]);
                for (std::size_t c = 0; c < d; ++c) grad(r, c) += dl * unembedding_(v, c);
            }
        }
        if (logits_out) *logits_out = std::move(lg);
        return grad;
    }

private:
    Matrix embedding_;
    Matrix unembedding_;
};

// Serves pre-recorded per-token statistics; supports only NLL/entropy.
class TraceBackend final : public Backend {
public:
    TraceBackend(std::size_t vocab_size, std::vector<TraceRecord> records) : vocab_(vocab_size) {
        for (auto& r : records) {
            for (double lp : r.chosen_logprobs) {
                if (!(lp <= 0.0)) {
                    throw Error(ErrorCode::validation_error,
                                "trace " + r.case_id + ": chosen log-prob must be <= 0");
                }
            }
            if (r.entropy && r.entropy->size() != r.chosen_logprobs.size()) {
                throw Error(ErrorCode::validation_error,
                            "trace " + r.case_id + ": entropy length mismatch");
            }
            if (r.distributions && r.distributions->size() != r.chosen_logprobs.size()) {
                throw Error(ErrorCode::validation_error,
                            "trace " + r.case_id + ": distributions length mismatch");
            }
            std::string id = r.case_id;
            records_.emplace(std::move(id), std::move(r));
        }
    }

    BackendCapabilities capabilities() const override {
        return {BackendTier::trace_only, false, false, 0};
    }
    std::size_t vocab_size() const override { return vocab_; }

    const TraceRecord& trace(std::string_view case_id) const override {
        auto it = records_.find(std::string(case_id));
        if (it == records_.end()) {
            throw Error(ErrorCode::invalid_argument,
                        "no trace record for case '" + std::string(case_id) + "'");
        }
        return it->second;
    }

private:
    std::size_t vocab_;
    std::map<std::string, TraceRecord> records_;
};

}  // namespace tokuq
