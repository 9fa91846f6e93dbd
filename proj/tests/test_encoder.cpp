#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "tg/encoder.hpp"
#include "tg/errors.hpp"
#include "tg/rng.hpp"
#include "tg/tensor.hpp"

using namespace tg;

namespace {

EncoderConfig small_config() {
    EncoderConfig cfg;
    cfg.vocab_size = 17;
    cfg.d = 8;
    cfg.n_heads = 2;
    cfg.n_pre_layers = 1;
    cfg.n_post_layers = 1;
    cfg.n_groups = 3;
    cfg.max_tokens = 16;
    return cfg;
}

TextBatch batch_from_ids(const std::vector<std::vector<int32_t>>& rows) {
    TextBatch b;
    b.batch = static_cast<int64_t>(rows.size());
    for (const auto& r : rows) b.len = std::max(b.len, static_cast<int64_t>(r.size()));
    b.token_ids.assign(static_cast<size_t>(b.batch * b.len), 0);
    b.real.assign(static_cast<size_t>(b.batch * b.len), 0);
    for (size_t i = 0; i < rows.size(); ++i) {
        for (size_t j = 0; j < rows[i].size(); ++j) {
            b.token_ids[i * static_cast<size_t>(b.len) + j] = rows[i][j];
            b.real[i * static_cast<size_t>(b.len) + j] = 1;
        }
        b.gold_spans.emplace_back();
    }
    return b;
}

GroupingParams random_grouping(int64_t d, Rng& rng) {
    GroupingParams p;
    p.wq = init_weight(d, d, rng);
    p.bq = init_zeros(d);
    p.wk = init_weight(d, d, rng);
    p.bk = init_zeros(d);
    p.wv = init_weight(d, d, rng);
    p.bv = init_zeros(d);
    p.ww = init_weight(d, d, rng);
    p.bw = init_zeros(d);
    return p;
}

// x: B x N x din (rows), w: din x dout -> y[b,n,:] = x[b,n,:] w + bias
template <class BufX, class BufW, class BufB>
std::vector<double> manual_linear(const BufX& x, int64_t rows, int64_t din, const BufW& w,
                                  const BufB& b, int64_t dout) {
    std::vector<double> y(static_cast<size_t>(rows * dout), 0.0);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t o = 0; o < dout; ++o) {
            double acc = b[static_cast<size_t>(o)];
            for (int64_t i = 0; i < din; ++i)
                acc += x[static_cast<size_t>(r * din + i)] * w[static_cast<size_t>(i * dout + o)];
            y[static_cast<size_t>(r * dout + o)] = acc;
        }
    return y;
}

}  // namespace

TEST_CASE("config validation rejects inconsistent settings") {
    EncoderConfig cfg = small_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.d = 9;  // not divisible by 2 heads
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.n_groups = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.vocab_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.gumbel_temperature = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.max_tokens = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("a zero-layer stack embeds and appends groups verbatim") {
    EncoderConfig cfg = small_config();
    cfg.n_pre_layers = 0;
    cfg.n_post_layers = 0;
    Rng rng(31);
    EncoderParams p = init_encoder(cfg, rng);
    TextBatch batch = batch_from_ids({{1, 5, 9, 2}, {1, 7, 2}});

    auto [t_hat, g_hat] = embed_and_encode(batch, p);
    REQUIRE(t_hat.shape() == Shape{2, 4, 8});
    REQUIRE(g_hat.shape() == Shape{2, 3, 8});

    const auto& emb = p.token_embed.data();
    const auto& pos = p.pos_embed.data();
    const auto& gv = p.group_vectors.data();
    for (int64_t b = 0; b < 2; ++b) {
        for (int64_t j = 0; j < 4; ++j) {
            int32_t id = batch.token_ids[static_cast<size_t>(b * 4 + j)];
            for (int64_t c = 0; c < 8; ++c) {
                double want = emb[static_cast<size_t>(id * 8 + c)] +
                              pos[static_cast<size_t>(j * 8 + c)];
                CHECK(t_hat.data()[static_cast<size_t>((b * 4 + j) * 8 + c)] == want);
            }
        }
        for (int64_t k = 0; k < 3; ++k)
            for (int64_t c = 0; c < 8; ++c)
                CHECK(g_hat.data()[static_cast<size_t>((b * 3 + k) * 8 + c)] ==
                      gv[static_cast<size_t>(k * 8 + c)]);
    }

    TextBatch longer = batch_from_ids({std::vector<int32_t>(17, 1)});
    CHECK_THROWS_AS(embed_and_encode(longer, p), ShapeError);
}

TEST_CASE("permuting the batch permutes encoder outputs") {
    EncoderConfig cfg = small_config();
    Rng rng(77);
    EncoderParams p = init_encoder(cfg, rng);
    TextBatch fwd = batch_from_ids({{1, 5, 9, 11, 2}, {1, 7, 2}});
    TextBatch rev = batch_from_ids({{1, 7, 2}, {1, 5, 9, 11, 2}});

    auto [groups_f, out_f] = encode_text(fwd, p, GroupMode::Eval, 0);
    auto [groups_r, out_r] = encode_text(rev, p, GroupMode::Eval, 0);
    int64_t per = 3 * 8;
    for (int64_t c = 0; c < per; ++c) {
        CHECK(groups_f.data()[static_cast<size_t>(c)] ==
              doctest::Approx(groups_r.data()[static_cast<size_t>(per + c)]).epsilon(1e-12));
        CHECK(groups_f.data()[static_cast<size_t>(per + c)] ==
              doctest::Approx(groups_r.data()[static_cast<size_t>(c)]).epsilon(1e-12));
    }
    auto seg_f = extract_segmentation(out_f, fwd);
    auto seg_r = extract_segmentation(out_r, rev);
    CHECK(seg_f[0] == seg_r[1]);
    CHECK(seg_f[1] == seg_r[0]);
}

TEST_CASE("perturbing padded positions leaves every real output bit-identical") {
    EncoderConfig cfg = small_config();
    Rng rng(123);
    EncoderParams p = init_encoder(cfg, rng);

    TextBatch clean = batch_from_ids({{1, 5, 9, 11, 2, 4, 6, 13, 2}, {1, 7, 12, 2}});
    TextBatch dirty = clean;
    for (int64_t j = 0; j < clean.len; ++j) {
        size_t idx = static_cast<size_t>(clean.len + j);  // example 1's row
        if (!dirty.real[idx]) dirty.token_ids[idx] = 13;  // arbitrary real id as padding
    }

    for (GroupMode mode : {GroupMode::Eval, GroupMode::Train, GroupMode::Soft}) {
        auto [g1, o1] = encode_text(clean, p, mode, 99);
        auto [g2, o2] = encode_text(dirty, p, mode, 99);
        REQUIRE(g1.shape() == g2.shape());
        for (size_t i = 0; i < g1.data().size(); ++i) CHECK(g1.data()[i] == g2.data()[i]);
        // soft attention equal at real-token columns
        for (int64_t b = 0; b < 2; ++b)
            for (int64_t k = 0; k < cfg.n_groups; ++k)
                for (int64_t j = 0; j < clean.len; ++j) {
                    if (!clean.real[static_cast<size_t>(b * clean.len + j)]) continue;
                    size_t at = static_cast<size_t>((b * cfg.n_groups + k) * clean.len + j);
                    CHECK(o1.soft_attention.data()[at] == o2.soft_attention.data()[at]);
                }
        CHECK(o1.hard_assignment == o2.hard_assignment);
    }
}

TEST_CASE("grouping block invariants hold across random shapes and modes") {
    Rng meta(2024);
    for (int trial = 0; trial < 12; ++trial) {
        int64_t B = 1 + static_cast<int64_t>(meta.below(3));
        int64_t S = 2 + static_cast<int64_t>(meta.below(8));
        int64_t K = 1 + static_cast<int64_t>(meta.below(5));
        int64_t d = 4 + 2 * static_cast<int64_t>(meta.below(5));
        double temperature = 0.5 + meta.uniform();
        uint64_t seed = meta.below(1u << 30);

        Rng rng(meta.below(1u << 30));
        GroupingParams p = random_grouping(d, rng);
        Tensor t_hat = tgtest::rand_tensor({B, S, d}, rng, 1.0, true);
        Tensor g_hat = tgtest::rand_tensor({B, K, d}, rng, 1.0, true);

        TextBatch batch;
        batch.batch = B;
        batch.len = S;
        batch.token_ids.assign(static_cast<size_t>(B * S), 0);
        batch.real.assign(static_cast<size_t>(B * S), 0);
        for (int64_t b = 0; b < B; ++b) {
            int64_t real_len = 1 + static_cast<int64_t>(meta.below(static_cast<uint64_t>(S)));
            for (int64_t j = 0; j < real_len; ++j)
                batch.real[static_cast<size_t>(b * S + j)] = 1;
        }

        for (GroupMode mode : {GroupMode::Train, GroupMode::Eval, GroupMode::Soft}) {
            GroupingOutput out = grouping_block(t_hat, g_hat, batch, p, temperature, mode, seed);
            REQUIRE(out.groups.shape() == Shape{B, K, d});
            REQUIRE(out.soft_attention.shape() == Shape{B, K, S});
            REQUIRE(static_cast<int64_t>(out.hard_assignment.size()) == B * S);

            const auto& soft = out.soft_attention.data();
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t j = 0; j < S; ++j) {
                    bool real = batch.real[static_cast<size_t>(b * S + j)];
                    double col_sum = 0.0;
                    double best = -1.0;
                    int64_t best_k = -1;
                    for (int64_t k = 0; k < K; ++k) {
                        double val = soft[static_cast<size_t>((b * K + k) * S + j)];
                        col_sum += val;
                        if (val > best) {
                            best = val;
                            best_k = k;
                        }
                    }
                    int64_t assigned = out.hard_assignment[static_cast<size_t>(b * S + j)];
                    if (real) {
                        CHECK(std::abs(col_sum - 1.0) < 1e-9);
                        CHECK(assigned == best_k);
                    } else {
                        CHECK(assigned == -1);
                    }
                }
            }
        }

        // eval mode ignores the seed entirely
        GroupingOutput e1 = grouping_block(t_hat, g_hat, batch, p, temperature, GroupMode::Eval, 1);
        GroupingOutput e2 =
            grouping_block(t_hat, g_hat, batch, p, temperature, GroupMode::Eval, 999);
        CHECK(e1.groups.data() == e2.groups.data());
        CHECK(e1.soft_attention.data() == e2.soft_attention.data());
        CHECK(e1.hard_assignment == e2.hard_assignment);

        // train mode is deterministic in the seed, and the seed matters
        GroupingOutput tr1 =
            grouping_block(t_hat, g_hat, batch, p, temperature, GroupMode::Train, seed);
        GroupingOutput tr2 =
            grouping_block(t_hat, g_hat, batch, p, temperature, GroupMode::Train, seed);
        CHECK(tr1.soft_attention.data() == tr2.soft_attention.data());
        CHECK(tr1.groups.data() == tr2.groups.data());
        GroupingOutput tr3 =
            grouping_block(t_hat, g_hat, batch, p, temperature, GroupMode::Train, seed + 1);
        // with a single group the soft attention is identically 1 whatever the
        // noise, so only multi-group trials can see the seed
        if (K > 1) CHECK(tr1.soft_attention.data() != tr3.soft_attention.data());
    }
}

TEST_CASE("grouping block matches a from-scratch recomputation, hard and soft") {
    int64_t B = 2, S = 5, K = 3, d = 6;
    Rng rng(4711);
    GroupingParams p = random_grouping(d, rng);
    Tensor t_hat = tgtest::rand_tensor({B, S, d}, rng, 1.0, false);
    Tensor g_hat = tgtest::rand_tensor({B, K, d}, rng, 1.0, false);
    double temperature = 0.8;
    uint64_t seed = 51;

    TextBatch batch;
    batch.batch = B;
    batch.len = S;
    batch.token_ids.assign(static_cast<size_t>(B * S), 0);
    batch.real.assign(static_cast<size_t>(B * S), 1);
    batch.real[static_cast<size_t>(S - 1)] = 0;  // example 0 has one padded slot

    for (GroupMode mode : {GroupMode::Train, GroupMode::Eval, GroupMode::Soft}) {
        GroupingOutput out = grouping_block(t_hat, g_hat, batch, p, temperature, mode, seed);

        std::vector<double> q = manual_linear(g_hat.data(), B * K, d, p.wq.data(), p.bq.data(), d);
        std::vector<double> k = manual_linear(t_hat.data(), B * S, d, p.wk.data(), p.bk.data(), d);
        std::vector<double> v = manual_linear(t_hat.data(), B * S, d, p.wv.data(), p.bv.data(), d);

        std::vector<double> noise(static_cast<size_t>(B * K * S), 0.0);
        if (mode != GroupMode::Eval) {
            Tensor drawn = gumbel_noise({B, K, S}, seed);
            noise.assign(drawn.data().begin(), drawn.data().end());
        }

        // raw scores, reproducing the padded-column shift
        std::vector<double> raw(static_cast<size_t>(B * K * S));
        for (int64_t b = 0; b < B; ++b)
            for (int64_t g = 0; g < K; ++g)
                for (int64_t j = 0; j < S; ++j) {
                    double dot = 0.0;
                    for (int64_t c = 0; c < d; ++c)
                        dot += q[static_cast<size_t>((b * K + g) * d + c)] *
                               k[static_cast<size_t>((b * S + j) * d + c)];
                    double val = dot / std::sqrt(static_cast<double>(d));
                    if (!batch.real[static_cast<size_t>(b * S + j)]) val += -1e30;
                    raw[static_cast<size_t>((b * K + g) * S + j)] =
                        (val + noise[static_cast<size_t>((b * K + g) * S + j)]) / temperature;
                }

        // softmax over the group axis, per (example, token) column
        std::vector<double> soft(raw.size());
        for (int64_t b = 0; b < B; ++b)
            for (int64_t j = 0; j < S; ++j) {
                double mx = -1e301;
                for (int64_t g = 0; g < K; ++g)
                    mx = std::max(mx, raw[static_cast<size_t>((b * K + g) * S + j)]);
                double sum = 0.0;
                for (int64_t g = 0; g < K; ++g)
                    sum += std::exp(raw[static_cast<size_t>((b * K + g) * S + j)] - mx);
                for (int64_t g = 0; g < K; ++g)
                    soft[static_cast<size_t>((b * K + g) * S + j)] =
                        std::exp(raw[static_cast<size_t>((b * K + g) * S + j)] - mx) / sum;
            }
        for (size_t i = 0; i < soft.size(); ++i)
            CHECK(out.soft_attention.data()[i] == doctest::Approx(soft[i]).epsilon(1e-9));

        // assignment matrix: exact one-hot of the block's own soft attention
        // in hard modes, the soft distribution itself otherwise; padded
        // columns zeroed either way
        std::vector<double> a(soft.size(), 0.0);
        const auto& block_soft = out.soft_attention.data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t j = 0; j < S; ++j) {
                if (!batch.real[static_cast<size_t>(b * S + j)]) continue;
                if (mode == GroupMode::Soft) {
                    for (int64_t g = 0; g < K; ++g)
                        a[static_cast<size_t>((b * K + g) * S + j)] =
                            block_soft[static_cast<size_t>((b * K + g) * S + j)];
                } else {
                    int64_t best = 0;
                    for (int64_t g = 1; g < K; ++g)
                        if (block_soft[static_cast<size_t>((b * K + g) * S + j)] >
                            block_soft[static_cast<size_t>((b * K + best) * S + j)])
                            best = g;
                    a[static_cast<size_t>((b * K + best) * S + j)] = 1.0;
                }
            }

        // mass-normalized pooling, update projection, residual
        for (int64_t b = 0; b < B; ++b)
            for (int64_t g = 0; g < K; ++g) {
                double mass = 0.0;
                for (int64_t j = 0; j < S; ++j)
                    mass += a[static_cast<size_t>((b * K + g) * S + j)];
                std::vector<double> pooled(static_cast<size_t>(d), 0.0);
                for (int64_t j = 0; j < S; ++j) {
                    double w = a[static_cast<size_t>((b * K + g) * S + j)] / (1.0 + mass);
                    for (int64_t c = 0; c < d; ++c)
                        pooled[static_cast<size_t>(c)] +=
                            w * v[static_cast<size_t>((b * S + j) * d + c)];
                }
                for (int64_t c = 0; c < d; ++c) {
                    double upd = p.bw.data()[static_cast<size_t>(c)];
                    for (int64_t i = 0; i < d; ++i)
                        upd += pooled[static_cast<size_t>(i)] *
                               p.ww.data()[static_cast<size_t>(i * d + c)];
                    double want = g_hat.data()[static_cast<size_t>((b * K + g) * d + c)] + upd;
                    CHECK(out.groups.data()[static_cast<size_t>((b * K + g) * d + c)] ==
                          doctest::Approx(want).epsilon(1e-9));
                }
            }
    }
}

TEST_CASE("straight-through estimator: raw-score gradients match the paired soft run") {
    int64_t B = 2, K = 4, S = 6;
    Rng rng(88);
    Tensor readout = tgtest::rand_tensor({B, K, S}, rng, 1.0, false);
    uint64_t seed = 7;
    double temperature = 1.3;

    auto build = [&](bool hard) {
        Rng leaf_rng(555);
        Tensor a_raw = tgtest::rand_tensor({B, K, S}, leaf_rng, 1.0, true);
        Tensor logits = scale(add(a_raw, gumbel_noise({B, K, S}, seed)), 1.0 / temperature);
        Tensor soft = softmax(logits, 1);
        Tensor a = hard ? straight_through_onehot(soft, 1) : soft;
        mean_all(mul(a, readout)).backward();
        return a_raw.grad();
    };
    auto g_hard = build(true);
    auto g_soft = build(false);
    REQUIRE(g_hard.size() == g_soft.size());
    for (size_t i = 0; i < g_hard.size(); ++i)
        CHECK(std::abs(g_hard[i] - g_soft[i]) <= 1e-12);
}

TEST_CASE("train-mode value path is computed at the hard assignment") {
    int64_t B = 1, S = 4, K = 2, d = 4;
    Rng rng(99);
    GroupingParams p = random_grouping(d, rng);
    Tensor t_hat = tgtest::rand_tensor({B, S, d}, rng, 1.0, true);
    Tensor g_hat = tgtest::rand_tensor({B, K, d}, rng, 1.0, false);
    TextBatch batch;
    batch.batch = B;
    batch.len = S;
    batch.token_ids.assign(static_cast<size_t>(B * S), 0);
    batch.real.assign(static_cast<size_t>(B * S), 1);
    Tensor readout = tgtest::rand_tensor({B, K, d}, rng, 1.0, false);

    GroupingOutput out = grouping_block(t_hat, g_hat, batch, p, 1.0, GroupMode::Train, 3);
    mean_all(mul(out.groups, readout)).backward();
    auto ww_grad = p.ww.grad();
    auto bw_grad = p.bw.grad();
    auto wv_grad = p.wv.grad();
    auto bv_grad = p.bv.grad();
    // the assignment path must also carry gradient (straight-through alive)
    bool q_alive = false;
    for (double g : p.wq.grad()) q_alive |= g != 0.0;
    bool k_alive = false;
    for (double g : p.wk.grad()) k_alive |= g != 0.0;
    CHECK(q_alive);
    CHECK(k_alive);

    // paired run replacing the assignment by its constant hard value
    for (Tensor t : {p.ww, p.bw, p.wv, p.bv, t_hat}) t.zero_grad();
    std::vector<double> hard(static_cast<size_t>(B * K * S), 0.0);
    const auto& soft = out.soft_attention.data();
    for (int64_t j = 0; j < S; ++j) {
        int64_t best = 0;
        for (int64_t g = 1; g < K; ++g)
            if (soft[static_cast<size_t>(g * S + j)] > soft[static_cast<size_t>(best * S + j)])
                best = g;
        hard[static_cast<size_t>(best * S + j)] = 1.0;
    }
    Tensor a_const = Tensor::from_data({B, K, S}, std::move(hard), false);
    Tensor v = linear(t_hat, p.wv, p.bv);
    Tensor groups2 = add(g_hat, linear(matmul(mass_normalize(a_const, 1.0), v), p.ww, p.bw));
    mean_all(mul(groups2, readout)).backward();

    CHECK(p.ww.grad() == ww_grad);
    CHECK(p.bw.grad() == bw_grad);
    CHECK(p.wv.grad() == wv_grad);
    CHECK(p.bv.grad() == bv_grad);
}

TEST_CASE("grouping block passes finite differences in soft mode") {
    int64_t B = 2, S = 4, K = 2, d = 4;
    Rng rng(314);
    GroupingParams p = random_grouping(d, rng);
    Tensor t_hat = tgtest::rand_tensor({B, S, d}, rng, 1.0, true);
    Tensor g_hat = tgtest::rand_tensor({B, K, d}, rng, 1.0, true);
    TextBatch batch;
    batch.batch = B;
    batch.len = S;
    batch.token_ids.assign(static_cast<size_t>(B * S), 0);
    batch.real.assign(static_cast<size_t>(B * S), 1);
    batch.real[static_cast<size_t>(S - 1)] = 0;
    Tensor readout = tgtest::rand_tensor({B, K, d}, rng, 1.0, false);

    std::vector<Tensor> leaves{t_hat, g_hat, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.ww, p.bw};
    auto fn = [&]() {
        GroupingOutput out = grouping_block(t_hat, g_hat, batch, p, 0.9, GroupMode::Soft, 17);
        return mean_all(mul(out.groups, readout));
    };
    auto report = tgtest::fd_check(fn, leaves, 1e-4, 1e-7, "grouping-soft");
    CHECK(report.ok);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("full text tower: K=1, determinism, and end-to-end finite differences") {
    EncoderConfig cfg = small_config();
    cfg.n_groups = 1;
    Rng rng(2718);
    EncoderParams p = init_encoder(cfg, rng);
    TextBatch batch = batch_from_ids({{1, 5, 9, 2}, {1, 7, 11, 13, 2}});

    auto [groups, out] = encode_text(batch, p, GroupMode::Eval, 0);
    REQUIRE(groups.shape() == Shape{2, 1, 8});
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t j = 0; j < batch.len; ++j) {
            size_t at = static_cast<size_t>(b * batch.len + j);
            if (batch.real[at]) {
                CHECK(out.hard_assignment[at] == 0);
                CHECK(out.soft_attention.data()[at] == 1.0);
            }
        }
    auto seg = extract_segmentation(out, batch);
    CHECK(seg[0] == std::vector<int32_t>(4, 0));
    CHECK(seg[1] == std::vector<int32_t>(5, 0));

    auto [groups2, out2] = encode_text(batch, p, GroupMode::Eval, 31337);
    CHECK(groups.data() == groups2.data());

    // small end-to-end gradient check through both stacks and the grouping
    EncoderConfig fd_cfg = small_config();
    Rng rng2(999);
    EncoderParams fp = init_encoder(fd_cfg, rng2);
    TextBatch fd_batch = batch_from_ids({{1, 5, 9, 2}, {1, 7, 2}});
    Tensor readout = tgtest::rand_tensor({2, 3, 8}, rng2, 1.0, false);
    std::vector<Tensor> leaves{fp.token_embed,    fp.pos_embed,     fp.group_vectors,
                               fp.pre[0].wq,      fp.pre[0].w1,     fp.grouping.wk,
                               fp.grouping.ww,    fp.post[0].wv,    fp.final_ln_g};
    auto fn = [&]() {
        auto [g, o] = encode_text(fd_batch, fp, GroupMode::Soft, 5);
        return mean_all(mul(g, readout));
    };
    auto report = tgtest::fd_check(fn, leaves, 1e-3, 1e-7, "encode-text-soft");
    CHECK(report.ok);
    CHECK(report.max_rel_err < 1e-3);
}
