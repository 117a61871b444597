#pragma once
// A deterministic tiny causal transformer usable as a white-box backend.
//
// Architecture (pre-LN GPT block, all math in double precision):
//   H      = token_embedding[x_i] + position_embedding[i]      (embed_tokens)
//   x      = H
//   per layer:
//     x    = x + Wo * CausalSelfAttention(LN1(x))
//     x    = x + W2 * gelu(W1 * LN2(x) + b1) + b2
//   logits = Unembedding * LNf(x)
//
// Position information is added before the point where perturbations act, so
// metrics perturb exactly the summed rows returned by embed_tokens.
//
// Parameter draw order (also the parameter-file order):
//   token_embedding (V x d), position_embedding (P x d),
//   per layer: ln1.gain, ln1.bias, Wq, Wk, Wv, Wo, ln2.gain, ln2.bias,
//              W1 (F x d), b1 (F), W2 (d x F), b2 (d),
//   lnf.gain, lnf.bias, unembedding (V x d).
// Matrices are row-major. Weight matrices, embeddings and FFN biases are drawn
// from N(0, init_scale^2) in that order from one Rng(init_seed) stream;
// LayerNorm gains are fixed at 1 and LayerNorm biases at 0 (no draws consumed).

#include <tokuq/backend.hpp>
#include <tokuq/core.hpp>
#include <tokuq/rng.hpp>

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

namespace tokuq {

struct TinyTransformerConfig {
    std::size_t vocab_size = 32;
    std::size_t dim = 8;
    std::size_t num_layers = 2;
    std::size_t num_heads = 2;
    std::size_t ffn_dim = 16;
    std::size_t max_positions = 64;
    std::uint64_t init_seed = 0;
    double init_scale = 0.5;

    friend bool operator==(const TinyTransformerConfig&, const TinyTransformerConfig&) = default;
};

inline void validate(const TinyTransformerConfig& c) {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::invalid_config, m); };
    if (c.vocab_size < 2) fail("vocab_size must be >= 2");
    if (c.dim < 1 || c.num_heads < 1 || c.ffn_dim < 1 || c.max_positions < 1)
        fail("dim, num_heads, ffn_dim and max_positions must be >= 1");
    if (c.dim % c.num_heads != 0) fail("dim must be divisible by num_heads");
    if (!(c.init_scale > 0.0) || !std::isfinite(c.init_scale)) fail("init_scale must be > 0");
}

struct LayerNormParams {
    std::vector<double> gain;
    std::vector<double> bias;
};

struct BlockParams {
    LayerNormParams ln1;
    Matrix wq, wk, wv, wo;  // d x d
    LayerNormParams ln2;
    Matrix w1;               // F x d
    std::vector<double> b1;  // F
    Matrix w2;               // d x F
    std::vector<double> b2;  // d
};

struct TinyTransformerParams {
    Matrix token_embedding;     // V x d
    Matrix position_embedding;  // P x d
    std::vector<BlockParams> blocks;
    LayerNormParams lnf;
    Matrix unembedding;  // V x d
};

namespace detail {

enum class ParamKind { weight, ln_gain, ln_bias };

// Visits every parameter buffer in the documented draw order.
template <class Params, class Fn>
void for_each_parameter(Params& p, Fn&& fn) {
    auto mat = [&](auto& m) { fn(m.flat(), ParamKind::weight); };
    auto vec = [&](auto& v, ParamKind k) { fn(std::span(v), k); };
    mat(p.token_embedding);
    mat(p.position_embedding);
    for (auto& b : p.blocks) {
        vec(b.ln1.gain, ParamKind::ln_gain);
        vec(b.ln1.bias, ParamKind::ln_bias);
        mat(b.wq);
        mat(b.wk);
        mat(b.wv);
        mat(b.wo);
        vec(b.ln2.gain, ParamKind::ln_gain);
        vec(b.ln2.bias, ParamKind::ln_bias);
        mat(b.w1);
        vec(b.b1, ParamKind::weight);
        mat(b.w2);
        vec(b.b2, ParamKind::weight);
    }
    vec(p.lnf.gain, ParamKind::ln_gain);
    vec(p.lnf.bias, ParamKind::ln_bias);
    mat(p.unembedding);
}

inline TinyTransformerParams allocate_params(const TinyTransformerConfig& c) {
    const std::size_t V = c.vocab_size, d = c.dim, F = c.ffn_dim;
    TinyTransformerParams p;
    p.token_embedding = Matrix(V, d);
    p.position_embedding = Matrix(c.max_positions, d);
    p.blocks.resize(c.num_layers);
    for (auto& b : p.blocks) {
        b.ln1 = {std::vector<double>(d, 1.0), std::vector<double>(d, 0.0)};
        b.wq = b.wk = b.wv = b.wo = Matrix(d, d);
        b.ln2 = {std::vector<double>(d, 1.0), std::vector<double>(d, 0.0)};
        b.w1 = Matrix(F, d);
        b.b1.assign(F, 0.0);
        b.w2 = Matrix(d, F);
        b.b2.assign(d, 0.0);
    }
    p.lnf = {std::vector<double>(d, 1.0), std::vector<double>(d, 0.0)};
    p.unembedding = Matrix(V, d);
    return p;
}

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluCoeff = 0.044715;

// out = W x
inline void matvec(const Matrix& W, std::span<const double> x, std::span<double> out) {
    for (std::size_t o = 0; o < W.rows(); ++o) {
        double acc = 0.0;
        const auto w = W.row(o);
        for (std::size_t c = 0; c < W.cols(); ++c) acc += w[c] * x[c];
        out[o] = acc;
    }
}

// out += W^T dy
inline void matvec_t_acc(const Matrix& W, std::span<const double> dy, std::span<double> out) {
    for (std::size_t o = 0; o < W.rows(); ++o) {
        const double g = dy[o];
        if (g == 0.0) continue;
        const auto w = W.row(o);
        for (std::size_t c = 0; c < W.cols(); ++c) out[c] += g * w[c];
    }
}

inline double gelu(double u) {
    const double k = std::numbers::sqrt2 / std::sqrt(std::numbers::pi);
    return 0.5 * u * (1.0 + std::tanh(k * (u + kGeluCoeff * u * u * u)));
}

inline double gelu_grad(double u) {
    const double k = std::numbers::sqrt2 / std::sqrt(std::numbers::pi);
    const double t = std::tanh(k * (u + kGeluCoeff * u * u * u));
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * k * (1.0 + 3.0 * kGeluCoeff * u * u);
}

struct LayerNormCache {
    Matrix xhat;
    std::vector<double> rstd;
};

inline Matrix layer_norm(const Matrix& x, const LayerNormParams& p, LayerNormCache& cache) {
    const std::size_t T = x.rows(), d = x.cols();
    Matrix y(T, d);
    cache.xhat = Matrix(T, d);
    cache.rstd.assign(T, 0.0);
    for (std::size_t i = 0; i < T; ++i) {
        const auto row = x.row(i);
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        cache.rstd[i] = rstd;
        for (std::size_t c = 0; c < d; ++c) {
            const double xh = (row[c] - mean) * rstd;
            cache.xhat(i, c) = xh;
            y(i, c) = p.gain[c] * xh + p.bias[c];
        }
    }
    return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const LayerNormParams& p,
                                  const LayerNormCache& cache) {
    const std::size_t T = dy.rows(), d = dy.cols();
    Matrix dx(T, d);
    std::vector<double> dxhat(d);
    for (std::size_t i = 0; i < T; ++i) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            dxhat[c] = dy(i, c) * p.gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * cache.xhat(i, c);
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        for (std::size_t c = 0; c < d; ++c) {
            dx(i, c) = cache.rstd[i] * (dxhat[c] - mean_dxhat - cache.xhat(i, c) * mean_dxhat_xhat);
        }
    }
    return dx;
}

struct BlockCache {
    LayerNormCache ln1;
    Matrix a;        // LN1 output
    Matrix q, k, v;  // T x d
    std::vector<Matrix> probs;  // per head, T x T, lower triangle used
    Matrix o;        // concatenated head outputs
    LayerNormCache ln2;
    Matrix b;        // LN2 output
    Matrix pre;      // T x F, before gelu
};

struct ForwardCache {
    std::vector<BlockCache> blocks;
    LayerNormCache lnf;
    Matrix logits;
};

}  // namespace detail

class ReferenceModel final : public Backend {
public:
    ReferenceModel(TinyTransformerConfig config, TinyTransformerParams params)
        : config_(config), params_(std::move(params)) {
        validate(config_);
    }

    const TinyTransformerConfig& config() const { return config_; }
    const TinyTransformerParams& params() const { return params_; }

    BackendCapabilities capabilities() const override {
        return {BackendTier::white_box, true, true, config_.dim};
    }
    std::size_t vocab_size() const override { return config_.vocab_size; }

    EmbeddingMatrix embed_ids(std::span<const TokenId> ids) const {
        if (ids.size() > config_.max_positions) {
            throw Error(ErrorCode::position_overflow,
                        "sequence length " + std::to_string(ids.size()) + " exceeds max_positions " +
                            std::to_string(config_.max_positions));
        }
        EmbeddingMatrix H(ids.size(), config_.dim);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] >= config_.vocab_size) {
                throw Error(ErrorCode::invalid_argument, "token id out of range");
            }
            for (std::size_t c = 0; c < config_.dim; ++c) {
                H(i, c) = params_.token_embedding(ids[i], c) + params_.position_embedding(i, c);
            }
        }
        return H;
    }

    EmbeddingMatrix embed_tokens(const TokenSequence& tokens) const override {
        return embed_ids(tokens.ids);
    }

    Matrix logits(const EmbeddingMatrix& H) const override { return forward_logits(H); }

    // (rows of H) x |V|; row i depends only on rows 0..i of H.
    Matrix forward_logits(const EmbeddingMatrix& H) const {
        detail::ForwardCache cache;
        run_forward(H, cache);
        return std::move(cache.logits);
    }

    GradientMatrix log_prob_gradient_raw(const EmbeddingMatrix& H, const TokenSequence& tokens,
                                         std::span<const double> weights,
                                         Matrix* logits_out = nullptr) const override {
        return backward_to_embeddings(H, tokens, weights, logits_out);
    }

    GradientMatrix backward_to_embeddings(const EmbeddingMatrix& H, const TokenSequence& tokens,
                                          std::span<const double> weights,
                                          Matrix* logits_out = nullptr) const {
        if (weights.size() != H.rows() || tokens.length() != H.rows()) {
            throw Error(ErrorCode::shape_mismatch, "weights/tokens must match H rows");
        }
        const std::size_t T = H.rows(), V = config_.vocab_size;
        bool any = false;
        for (std::size_t i = 1; i < T; ++i) any = any || weights[i] != 0.0;
        if (!any && !logits_out) {
            check_input(H);
            return GradientMatrix(T, config_.dim);
        }

        detail::ForwardCache cache;
        run_forward(H, cache);

        Matrix dlogits(T, V);
        std::vector<double> p(V);
        for (std::size_t pos = 1; pos < T; ++pos) {
            const double w = weights[pos];
            if (w == 0.0) continue;
            softmax(cache.logits.row(pos - 1), p);
            for (std::size_t v = 0; v < V; ++v) {
                dlogits(pos - 1, v) = w * ((v == tokens.ids[pos] ? 1.0 : 0.0) - p[v]);
            }
        }
        Matrix dz(T, config_.dim);
        for (std::size_t i = 0; i < T; ++i) {
            detail::matvec_t_acc(params_.unembedding, dlogits.row(i), dz.row(i));
        }
        Matrix dx = detail::layer_norm_backward(dz, params_.lnf, cache.lnf);
        for (std::size_t l = config_.num_layers; l-- > 0;) {
            dx = block_backward(params_.blocks[l], cache.blocks[l], dx);
        }
        if (logits_out) *logits_out = std::move(cache.logits);
        return dx;
    }

    // Autoregressive decoding from a prompt; re-runs the full forward pass per step.
    TokenSequence generate(std::span<const TokenId> prompt, const GenerationConfig& gen) const {
        if (prompt.empty()) throw Error(ErrorCode::invalid_argument, "empty prompt");
        if (gen.max_new_tokens < 1) throw Error(ErrorCode::invalid_config, "max_new_tokens < 1");
        if (prompt.size() + gen.max_new_tokens > config_.max_positions) {
            throw Error(ErrorCode::position_overflow, "prompt + max_new_tokens exceeds max_positions");
        }
        if (gen.strategy == DecodeStrategy::sample && !(gen.temperature > 0.0)) {
            throw Error(ErrorCode::invalid_config, "temperature must be > 0");
        }
        TokenSequence out;
        out.ids.assign(prompt.begin(), prompt.end());
        out.query_len = prompt.size();
        out.response_len = gen.max_new_tokens;
        Rng rng(gen.seed);
        std::vector<double> scaled(config_.vocab_size), probs(config_.vocab_size);
        for (std::size_t step = 0; step < gen.max_new_tokens; ++step) {
            const Matrix lg = forward_logits(embed_ids(out.ids));
            const auto last = lg.row(lg.rows() - 1);
            TokenId next = 0;
            if (gen.strategy == DecodeStrategy::greedy) {
                for (std::size_t v = 1; v < last.size(); ++v) {
                    if (last[v] > last[next]) next = static_cast<TokenId>(v);
                }
            } else {
                for (std::size_t v = 0; v < last.size(); ++v) scaled[v] = last[v] / gen.temperature;
                softmax(scaled, probs);
                const double u = rng.uniform();
                double cum = 0.0;
                next = static_cast<TokenId>(last.size() - 1);
                for (std::size_t v = 0; v < probs.size(); ++v) {
                    cum += probs[v];
                    if (u < cum) {
                        next = static_cast<TokenId>(v);
                        break;
                    }
                }
            }
            out.ids.push_back(next);
        }
        return out;
    }

private:
    void check_input(const EmbeddingMatrix& H) const {
        if (H.cols() != config_.dim) {
            throw Error(ErrorCode::shape_mismatch, "H has " + std::to_string(H.cols()) +
                                                       " columns, model dim is " +
                                                       std::to_string(config_.dim));
        }
        if (H.rows() > config_.max_positions) {
            throw Error(ErrorCode::position_overflow,
                        std::to_string(H.rows()) + " rows exceed max_positions " +
                            std::to_string(config_.max_positions));
        }
    }

    void run_forward(const EmbeddingMatrix& H, detail::ForwardCache& cache) const {
        check_input(H);
        Matrix x = H;
        cache.blocks.resize(config_.num_layers);
        for (std::size_t l = 0; l < config_.num_layers; ++l) {
            x = block_forward(params_.blocks[l], cache.blocks[l], x);
        }
        const Matrix z = detail::layer_norm(x, params_.lnf, cache.lnf);
        cache.logits = Matrix(H.rows(), config_.vocab_size);
        for (std::size_t i = 0; i < H.rows(); ++i) {
            detail::matvec(params_.unembedding, z.row(i), cache.logits.row(i));
        }
    }

    Matrix block_forward(const BlockParams& bp, detail::BlockCache& bc, const Matrix& x_in) const {
        const std::size_t T = x_in.rows(), d = config_.dim, F = config_.ffn_dim;
        const std::size_t nh = config_.num_heads, hd = d / nh;
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

        bc.a = detail::layer_norm(x_in, bp.ln1, bc.ln1);
        bc.q = bc.k = bc.v = bc.o = Matrix(T, d);
        for (std::size_t i = 0; i < T; ++i) {
            detail::matvec(bp.wq, bc.a.row(i), bc.q.row(i));
            detail::matvec(bp.wk, bc.a.row(i), bc.k.row(i));
            detail::matvec(bp.wv, bc.a.row(i), bc.v.row(i));
        }
        bc.probs.assign(nh, Matrix(T, T));
        for (std::size_t h = 0; h < nh; ++h) {
            const std::size_t off = h * hd;
            Matrix& P = bc.probs[h];
            for (std::size_t i = 0; i < T; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) s += bc.q(i, off + c) * bc.k(j, off + c);
                    P(i, j) = s * scale;
                    mx = std::max(mx, P(i, j));
                }
                double sum = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    P(i, j) = std::exp(P(i, j) - mx);
                    sum += P(i, j);
                }
                for (std::size_t j = 0; j <= i; ++j) P(i, j) /= sum;
                for (std::size_t c = 0; c < hd; ++c) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) acc += P(i, j) * bc.v(j, off + c);
                    bc.o(i, off + c) = acc;
                }
            }
        }
        Matrix x_mid = x_in;
        std::vector<double> tmp(d);
        for (std::size_t i = 0; i < T; ++i) {
            detail::matvec(bp.wo, bc.o.row(i), tmp);
            for (std::size_t c = 0; c < d; ++c) x_mid(i, c) += tmp[c];
        }

        bc.b = detail::layer_norm(x_mid, bp.ln2, bc.ln2);
        bc.pre = Matrix(T, F);
        Matrix x_out = x_mid;
        std::vector<double> act(F);
        for (std::size_t i = 0; i < T; ++i) {
            detail::matvec(bp.w1, bc.b.row(i), bc.pre.row(i));
            for (std::size_t f = 0; f < F; ++f) {
                bc.pre(i, f) += bp.b1[f];
                act[f] = detail::gelu(bc.pre(i, f));
            }
            detail::matvec(bp.w2, act, tmp);
            for (std::size_t c = 0; c < d; ++c) x_out(i, c) += tmp[c] + bp.b2[c];
        }
        return x_out;
    }

    Matrix block_backward(const BlockParams& bp, const detail::BlockCache& bc,
                          const Matrix& dx_out) const {
        const std::size_t T = dx_out.rows(), d = config_.dim, F = config_.ffn_dim;
        const std::size_t nh = config_.num_heads, hd = d / nh;
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

        // feed-forward branch
        Matrix db(T, d);
        std::vector<double> dpre(F);
        for (std::size_t i = 0; i < T; ++i) {
            std::fill(dpre.begin(), dpre.end(), 0.0);
            detail::matvec_t_acc(bp.w2, dx_out.row(i), dpre);
            for (std::size_t f = 0; f < F; ++f) dpre[f] *= detail::gelu_grad(bc.pre(i, f));
            detail::matvec_t_acc(bp.w1, dpre, db.row(i));
        }
        Matrix dx_mid = detail::layer_norm_backward(db, bp.ln2, bc.ln2);
        for (std::size_t n = 0; n < dx_mid.size(); ++n) dx_mid.flat()[n] += dx_out.flat()[n];

        // attention branch
        Matrix d_o(T, d);
        for (std::size_t i = 0; i < T; ++i) detail::matvec_t_acc(bp.wo, dx_mid.row(i), d_o.row(i));
        Matrix dq(T, d), dk(T, d), dv(T, d);
        std::vector<double> dP(T);
        for (std::size_t h = 0; h < nh; ++h) {
            const std::size_t off = h * hd;
            const Matrix& P = bc.probs[h];
            for (std::size_t i = 0; i < T; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    double g = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) {
                        g += d_o(i, off + c) * bc.v(j, off + c);
                        dv(j, off + c) += P(i, j) * d_o(i, off + c);
                    }
                    dP[j] = g;
                    dot += P(i, j) * g;
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    const double ds = P(i, j) * (dP[j] - dot) * scale;
                    for (std::size_t c = 0; c < hd; ++c) {
                        dq(i, off + c) += ds * bc.k(j, off + c);
                        dk(j, off + c) += ds * bc.q(i, off + c);
                    }
                }
            }
        }
        Matrix da(T, d);
        for (std::size_t i = 0; i < T; ++i) {
            detail::matvec_t_acc(bp.wq, dq.row(i), da.row(i));
            detail::matvec_t_acc(bp.wk, dk.row(i), da.row(i));
            detail::matvec_t_acc(bp.wv, dv.row(i), da.row(i));
        }
        Matrix dx_in = detail::layer_norm_backward(da, bp.ln1, bc.ln1);
        for (std::size_t n = 0; n < dx_in.size(); ++n) dx_in.flat()[n] += dx_mid.flat()[n];
        return dx_in;
    }

    TinyTransformerConfig config_;
    TinyTransformerParams params_;
};

inline ReferenceModel init_reference_model(const TinyTransformerConfig& config) {
    validate(config);
    auto params = detail::allocate_params(config);
    Rng rng(config.init_seed);
    detail::for_each_parameter(params, [&](std::span<double> buf, detail::ParamKind kind) {
        if (kind != detail::ParamKind::weight) return;
        for (double& v : buf) v = config.init_scale * rng.gaussian();
    });
    return ReferenceModel(config, std::move(params));
}

// Parameter file layout, all integers and floats little-endian:
//   8 bytes  magic "TOKUQPM1"
//   u64      format version (1)
//   u64 x 7  vocab_size, dim, num_layers, num_heads, ffn_dim, max_positions, init_seed
//   f64      init_scale
//   u64      parameter count N
//   f64 x N  parameters in draw order
namespace param_file {

inline constexpr std::array<char, 8> kMagic = {'T', 'O', 'K', 'U', 'Q', 'P', 'M', '1'};
inline constexpr std::uint64_t kVersion = 1;

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}
    std::uint64_t u64() {
        if (pos_ + 8 > bytes_.size()) throw Error(ErrorCode::parse_error, "parameter file truncated");
        std::uint64_t v = 0;
        for (int b = 0; b < 8; ++b) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
        }
        pos_ += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    bool at_end() const { return pos_ == bytes_.size(); }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

inline std::string serialize(const ReferenceModel& model) {
    const auto& c = model.config();
    std::string out(kMagic.begin(), kMagic.end());
    put_u64(out, kVersion);
    for (std::uint64_t v : {std::uint64_t{c.vocab_size}, std::uint64_t{c.dim},
                            std::uint64_t{c.num_layers}, std::uint64_t{c.num_heads},
                            std::uint64_t{c.ffn_dim}, std::uint64_t{c.max_positions}, c.init_seed}) {
        put_u64(out, v);
    }
    put_f64(out, c.init_scale);
    std::vector<double> flat;
    detail::for_each_parameter(model.params(), [&](std::span<const double> buf, detail::ParamKind) {
        flat.insert(flat.end(), buf.begin(), buf.end());
    });
    put_u64(out, flat.size());
    for (double v : flat) put_f64(out, v);
    return out;
}

inline ReferenceModel deserialize(std::string_view bytes) {
    if (bytes.size() < 8 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
        throw Error(ErrorCode::parse_error, "bad parameter file magic");
    }
    Reader r(bytes.substr(8));
    if (r.u64() != kVersion) throw Error(ErrorCode::parse_error, "unsupported parameter file version");
    TinyTransformerConfig c;
    c.vocab_size = r.u64();
    c.dim = r.u64();
    c.num_layers = r.u64();
    c.num_heads = r.u64();
    c.ffn_dim = r.u64();
    c.max_positions = r.u64();
    c.init_seed = r.u64();
    c.init_scale = r.f64();
    validate(c);
    auto params = detail::allocate_params(c);
    std::size_t expected = 0;
    detail::for_each_parameter(params, [&](std::span<double> buf, detail::ParamKind) {
        expected += buf.size();
    });
    if (r.u64() != expected) throw Error(ErrorCode::parse_error, "parameter count mismatch");
    detail::for_each_parameter(params, [&](std::span<double> buf, detail::ParamKind) {
        for (double& v : buf) v = r.f64();
    });
    if (!r.at_end()) throw Error(ErrorCode::parse_error, "trailing bytes in parameter file");
    return ReferenceModel(c, std::move(params));
}

inline void save(const std::string& path, const ReferenceModel& model) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorCode::io_error, "cannot open " + path + " for writing");
    const std::string bytes = serialize(model);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error(ErrorCode::io_error, "write failed: " + path);
}

inline ReferenceModel load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorCode::io_error, "cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

}  // namespace param_file

}  // namespace tokuq
