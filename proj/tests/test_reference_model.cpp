#include <tokuq/reference_model.hpp>

#include "catch_amalgamated.hpp"
#include "oracles.hpp"

#include <bit>
#include <cmath>
#include <fstream>

using namespace tokuq;
using Catch::Matchers::WithinAbs;

namespace {

bool bit_equal_rows(const Matrix& a, const Matrix& b, std::size_t rows) {
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t v = 0; v < a.cols(); ++v) {
            if (std::bit_cast<std::uint64_t>(a(i, v)) != std::bit_cast<std::uint64_t>(b(i, v))) return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("same config gives identical log-probs") {
    const TinyTransformerConfig cfg{32, 8, 2, 2, 16, 24, 7, 0.5};
    const auto a = init_reference_model(cfg);
    const auto b = init_reference_model(cfg);
    const auto t = oracle::random_tokens(32, 4, 10, 1);
    CHECK(chosen_token_log_probs(a, embed_tokens(a, t), t) == chosen_token_log_probs(b, embed_tokens(b, t), t));
    CHECK(a.capabilities().embedding_dim == 8);
    CHECK(a.capabilities().tier == BackendTier::white_box);
    CHECK(a.capabilities().supports_gradients);
    CHECK(a.capabilities().supports_embedding_override);
}

TEST_CASE("different init seeds change the model") {
    TinyTransformerConfig cfg{32, 8, 2, 2, 16, 24, 1, 0.5};
    const auto a = init_reference_model(cfg);
    cfg.init_seed = 2;
    const auto b = init_reference_model(cfg);
    const auto t = oracle::random_tokens(32, 4, 10, 1);
    CHECK(chosen_token_log_probs(a, embed_tokens(a, t), t) != chosen_token_log_probs(b, embed_tokens(b, t), t));
}

TEST_CASE("invalid configs and inputs are rejected") {
    CHECK_THROWS_AS(init_reference_model({32, 9, 2, 2, 16, 24, 0, 0.5}), Error);
    CHECK_THROWS_AS(init_reference_model({1, 8, 2, 2, 16, 24, 0, 0.5}), Error);
    CHECK_THROWS_AS(init_reference_model({32, 8, 2, 2, 16, 24, 0, 0.0}), Error);
    const auto m = init_reference_model({16, 8, 1, 2, 16, 10, 0, 0.5});
    try {
        m.embed_ids(std::vector<TokenId>(11, 0));
        FAIL("expected position_overflow");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::position_overflow);
    }
    try {
        m.forward_logits(Matrix(11, 8));
        FAIL("expected position_overflow");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::position_overflow);
    }
    try {
        m.forward_logits(Matrix(3, 7));
        FAIL("expected shape_mismatch");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::shape_mismatch);
    }
    const std::vector<TokenId> prompt(8, 0);
    CHECK_THROWS_AS(m.generate(prompt, {0.2, 3, DecodeStrategy::greedy, 0}), Error);
}

TEST_CASE("zero-layer model is unembedding of normalized embeddings") {
    const auto m = init_reference_model({12, 6, 0, 2, 8, 16, 3, 0.7});
    const auto t = oracle::random_tokens(12, 3, 5, 2);
    const auto H = m.embed_tokens(t);
    const auto lg = m.forward_logits(H);
    const auto& U = m.params().unembedding;
    for (std::size_t i = 0; i < H.rows(); ++i) {
        double mean = 0.0, var = 0.0;
        for (double v : H.row(i)) mean += v;
        mean /= 6.0;
        for (double v : H.row(i)) var += (v - mean) * (v - mean);
        var /= 6.0;
        std::vector<double> x(6);
        for (std::size_t c = 0; c < 6; ++c) x[c] = (H(i, c) - mean) / std::sqrt(var + 1e-5);
        const auto expected = oracle::bigram_logits(U, x);
        for (std::size_t v = 0; v < 12; ++v) CHECK_THAT(lg(i, v), WithinAbs(expected[v], 1e-12));
    }
}

TEST_CASE("embedding adds the position row to the token row") {
    const auto m = init_reference_model({12, 6, 1, 2, 8, 16, 3, 0.7});
    const std::vector<TokenId> ids = {4, 4, 1};
    const auto H = m.embed_ids(ids);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t c = 0; c < 6; ++c) {
            CHECK(H(i, c) == m.params().token_embedding(ids[i], c) + m.params().position_embedding(i, c));
        }
    }
}

TEST_CASE("causality, per-prefix agreement and gradients over seeds and shapes") {
    for (std::size_t shape = 0; shape < 3; ++shape) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            CAPTURE(shape, seed);
            const auto cfg = oracle::small_config(shape, 100 + seed);
            const auto m = init_reference_model(cfg);
            const auto again = init_reference_model(cfg);
            const auto t = oracle::random_tokens(cfg.vocab_size, 4, 8, 10 * shape + seed);
            const auto H = m.embed_tokens(t);
            const auto lg = m.forward_logits(H);
            CHECK(lg == again.forward_logits(H));

            Rng rng(seed);
            const std::size_t cut = 1 + rng.next_u64() % (H.rows() - 1);
            auto P = H;
            for (std::size_t i = cut; i < P.rows(); ++i) {
                for (double& v : P.row(i)) v = 3.0 * rng.gaussian();
            }
            CHECK(bit_equal_rows(lg, m.forward_logits(P), cut));

            CHECK(oracle::max_abs_diff(lg, oracle::per_prefix_logits(m, H)) < 1e-9);

            const auto w = response_weights(t);
            const auto g = m.backward_to_embeddings(H, t, w);
            CHECK(oracle::max_relative_error(g, oracle::finite_difference_gradient(m, H, t, w)) < 1e-4);
        }
    }
}

TEST_CASE("finite-difference check on d=8, L=2, length 12") {
    const auto m = init_reference_model({32, 8, 2, 2, 16, 16, 9, 0.5});
    const auto t = oracle::random_tokens(32, 4, 8, 77);
    const auto H = m.embed_tokens(t);
    Rng rng(5);
    std::vector<double> w(t.length());
    for (double& v : w) v = rng.gaussian();
    const auto g = m.backward_to_embeddings(H, t, w);
    CHECK(oracle::max_relative_error(g, oracle::finite_difference_gradient(m, H, t, w)) < 1e-4);
}

TEST_CASE("gradient support respects weights") {
    const auto m = init_reference_model({16, 8, 2, 2, 16, 16, 4, 0.5});
    const auto t = oracle::random_tokens(16, 3, 7, 3);
    const auto H = m.embed_tokens(t);
    const auto zero = m.backward_to_embeddings(H, t, std::vector<double>(t.length(), 0.0));
    for (double v : zero.flat()) CHECK(v == 0.0);

    for (std::size_t pos = 1; pos < t.length(); ++pos) {
        std::vector<double> w(t.length(), 0.0);
        w[pos] = 1.0;
        const auto g = m.backward_to_embeddings(H, t, w);
        for (std::size_t i = pos; i < g.rows(); ++i) {
            for (double v : g.row(i)) REQUIRE(v == 0.0);
        }
        bool any = false;
        for (std::size_t i = 0; i < pos; ++i) {
            for (double v : g.row(i)) any = any || v != 0.0;
        }
        CHECK(any);
    }
}

TEST_CASE("greedy generation is deterministic and picks the argmax") {
    const auto m = init_reference_model({24, 8, 2, 2, 16, 32, 11, 1.0});
    const std::vector<TokenId> prompt = {1, 5, 9};
    const GenerationConfig gen{0.2, 12, DecodeStrategy::greedy, 0};
    const auto a = m.generate(prompt, gen);
    CHECK(a == m.generate(prompt, gen));
    REQUIRE(a.query_len == 3);
    REQUIRE(a.response_len == 12);
    const auto dists = forward_distributions(m, m.embed_tokens(a), a);
    for (std::size_t j = 0; j < 12; ++j) {
        const auto& p = dists[j].probs;
        const TokenId chosen = a.response_token(j);
        for (std::size_t v = 0; v < p.size(); ++v) {
            CHECK(p[chosen] >= p[v]);
            if (v < chosen) CHECK(p[v] < p[chosen]);
        }
    }
}

TEST_CASE("sampled generation is reproducible for a fixed seed") {
    const auto m = init_reference_model({24, 8, 2, 2, 16, 32, 11, 1.0});
    const std::vector<TokenId> prompt = {2, 3};
    const GenerationConfig gen{1.0, 20, DecodeStrategy::sample, 99};
    CHECK(m.generate(prompt, gen) == m.generate(prompt, gen));
    GenerationConfig other = gen;
    other.seed = 100;
    const auto a = m.generate(prompt, gen), b = m.generate(prompt, other);
    CHECK(a.ids != b.ids);
    CHECK_THROWS_AS(m.generate(prompt, {0.0, 3, DecodeStrategy::sample, 0}), Error);
}

TEST_CASE("distributions normalize up to max_positions") {
    const auto m = init_reference_model({40, 8, 2, 2, 16, 48, 12, 2.0});
    const auto t = oracle::random_tokens(40, 1, 47, 3);
    for (const auto& d : forward_distributions(m, m.embed_tokens(t), t)) {
        double s = 0.0;
        for (double p : d.probs) {
            REQUIRE(p > 0.0);
            s += p;
        }
        REQUIRE_THAT(s, WithinAbs(1.0, 1e-9));
    }
}

TEST_CASE("entropy of softmax(logits / T) does not decrease with T") {
    const auto m = init_reference_model({32, 8, 2, 2, 16, 24, 13, 1.0});
    const auto t = oracle::random_tokens(32, 3, 12, 4);
    const auto lg = m.forward_logits(m.embed_tokens(t));
    for (std::size_t i = 0; i < lg.rows(); ++i) {
        double prev = -1.0;
        for (double T : {0.2, 0.5, 1.0}) {
            std::vector<double> z(lg.cols());
            for (std::size_t v = 0; v < z.size(); ++v) z[v] = lg(i, v) / T;
            const double h = oracle::entropy_direct(oracle::softmax_direct(z));
            CHECK(h >= prev - 1e-12);
            prev = h;
        }
    }
}

TEST_CASE("parameter file round-trips bit-exactly") {
    const TinyTransformerConfig cfg{20, 8, 2, 4, 12, 30, 21, 0.8};
    const auto m = init_reference_model(cfg);
    const auto bytes = param_file::serialize(m);
    CHECK(bytes.substr(0, 8) == "TOKUQPM1");
    const auto back = param_file::deserialize(bytes);
    CHECK(back.config() == cfg);
    CHECK(param_file::serialize(back) == bytes);
    const auto t = oracle::random_tokens(20, 3, 9, 1);
    CHECK(back.forward_logits(back.embed_tokens(t)) == m.forward_logits(m.embed_tokens(t)));

    const auto path = oracle::temp_path("model.bin");
    param_file::save(path, m);
    CHECK(param_file::serialize(param_file::load(path)) == bytes);

    std::string corrupt = bytes;
    corrupt[0] = 'X';
    CHECK_THROWS_AS(param_file::deserialize(corrupt), Error);
    CHECK_THROWS_AS(param_file::deserialize(bytes.substr(0, bytes.size() - 8)), Error);
    CHECK_THROWS_AS(param_file::deserialize(bytes + "12345678"), Error);
}

TEST_CASE("parameter file layout is little-endian in draw order") {
    const TinyTransformerConfig cfg{4, 2, 0, 1, 2, 3, 5, 1.0};
    const auto m = init_reference_model(cfg);
    const auto bytes = param_file::serialize(m);
    auto u64_at = [&](std::size_t off) {
        std::uint64_t v = 0;
        for (int b = 7; b >= 0; --b) v = (v << 8) | static_cast<unsigned char>(bytes[off + b]);
        return v;
    };
    CHECK(u64_at(8) == 1);   // version
    CHECK(u64_at(16) == 4);  // vocab_size
    CHECK(u64_at(24) == 2);  // dim
    CHECK(u64_at(32) == 0);  // layers
    CHECK(u64_at(40) == 1);  // heads
    CHECK(u64_at(48) == 2);  // ffn
    CHECK(u64_at(56) == 3);  // max_positions
    CHECK(u64_at(64) == 5);  // init_seed
    CHECK(std::bit_cast<double>(u64_at(72)) == 1.0);
    const std::size_t count = 4 * 2 + 3 * 2 + 2 + 2 + 4 * 2;
    CHECK(u64_at(80) == count);
    // First parameter is token_embedding(0, 0), the first Gaussian draw of Rng(init_seed).
    Rng rng(5);
    CHECK(std::bit_cast<double>(u64_at(88)) == rng.gaussian());
    CHECK(std::bit_cast<double>(u64_at(88)) == m.params().token_embedding(0, 0));
    CHECK(bytes.size() == 88 + 8 * count);
}
