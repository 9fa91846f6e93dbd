#include "tg/encoder.hpp"

#include <cmath>

#include "tg/errors.hpp"

namespace tg {

namespace {
// Large negative additive mask value: underflows to exactly 0 after softmax
// max-subtraction without producing NaN the way a literal -inf would.
constexpr double kMaskedScore = -1e30;
}  // namespace

void EncoderConfig::validate() const {
    if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
    if (d <= 0) throw ConfigError("model dim must be positive");
    if (n_heads <= 0 || d % n_heads != 0)
        throw ConfigError("model dim " + std::to_string(d) + " not divisible by " +
                          std::to_string(n_heads) + " heads");
    if (n_pre_layers < 0 || n_post_layers < 0) throw ConfigError("layer counts must be >= 0");
    if (n_groups < 1) throw ConfigError("n_groups must be >= 1");
    if (max_tokens < 1) throw ConfigError("max_tokens must be >= 1");
    if (gumbel_temperature <= 0.0) throw ConfigError("gumbel_temperature must be positive");
    if (projection_dim <= 0) throw ConfigError("projection_dim must be positive");
}

Tensor init_weight(int64_t rows, int64_t cols, Rng& rng) {
    std::vector<double> v(static_cast<size_t>(rows * cols));
    for (double& x : v) x = rng.normal() * 0.02;
    return Tensor::from_data({rows, cols}, std::move(v), true);
}

Tensor init_zeros(int64_t n) { return Tensor::zeros({n}, true); }
Tensor init_ones(int64_t n) { return Tensor::full({n}, 1.0, true); }

LayerParams init_layer(int64_t d, Rng& rng) {
    LayerParams p;
    p.ln1_g = init_ones(d);
    p.ln1_b = init_zeros(d);
    p.wq = init_weight(d, d, rng);
    p.bq = init_zeros(d);
    p.wk = init_weight(d, d, rng);
    p.bk = init_zeros(d);
    p.wv = init_weight(d, d, rng);
    p.bv = init_zeros(d);
    p.wo = init_weight(d, d, rng);
    p.bo = init_zeros(d);
    p.ln2_g = init_ones(d);
    p.ln2_b = init_zeros(d);
    p.w1 = init_weight(d, 4 * d, rng);
    p.b1 = init_zeros(4 * d);
    p.w2 = init_weight(4 * d, d, rng);
    p.b2 = init_zeros(d);
    return p;
}

void visit_layer(LayerParams& p, const std::string& prefix, const ParamVisitor& visit) {
    visit(prefix + ".ln1_g", p.ln1_g);
    visit(prefix + ".ln1_b", p.ln1_b);
    visit(prefix + ".wq", p.wq);
    visit(prefix + ".bq", p.bq);
    visit(prefix + ".wk", p.wk);
    visit(prefix + ".bk", p.bk);
    visit(prefix + ".wv", p.wv);
    visit(prefix + ".bv", p.bv);
    visit(prefix + ".wo", p.wo);
    visit(prefix + ".bo", p.bo);
    visit(prefix + ".ln2_g", p.ln2_g);
    visit(prefix + ".ln2_b", p.ln2_b);
    visit(prefix + ".w1", p.w1);
    visit(prefix + ".b1", p.b1);
    visit(prefix + ".w2", p.w2);
    visit(prefix + ".b2", p.b2);
}

EncoderParams init_encoder(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    EncoderParams p;
    p.cfg = cfg;
    p.token_embed = init_weight(cfg.vocab_size, cfg.d, rng);
    p.pos_embed = init_weight(cfg.max_tokens, cfg.d, rng);
    p.group_vectors = init_weight(cfg.n_groups, cfg.d, rng);
    for (int64_t i = 0; i < cfg.n_pre_layers; ++i) p.pre.push_back(init_layer(cfg.d, rng));
    p.grouping.wq = init_weight(cfg.d, cfg.d, rng);
    p.grouping.bq = init_zeros(cfg.d);
    p.grouping.wk = init_weight(cfg.d, cfg.d, rng);
    p.grouping.bk = init_zeros(cfg.d);
    p.grouping.wv = init_weight(cfg.d, cfg.d, rng);
    p.grouping.bv = init_zeros(cfg.d);
    p.grouping.ww = init_weight(cfg.d, cfg.d, rng);
    p.grouping.bw = init_zeros(cfg.d);
    for (int64_t i = 0; i < cfg.n_post_layers; ++i) p.post.push_back(init_layer(cfg.d, rng));
    p.final_ln_g = init_ones(cfg.d);
    p.final_ln_b = init_zeros(cfg.d);
    return p;
}

void visit_params(EncoderParams& p, const ParamVisitor& visit) {
    visit("encoder.token_embed", p.token_embed);
    visit("encoder.pos_embed", p.pos_embed);
    visit("encoder.group_vectors", p.group_vectors);
    for (size_t i = 0; i < p.pre.size(); ++i)
        visit_layer(p.pre[i], "encoder.pre" + std::to_string(i), visit);
    visit("encoder.grouping.wq", p.grouping.wq);
    visit("encoder.grouping.bq", p.grouping.bq);
    visit("encoder.grouping.wk", p.grouping.wk);
    visit("encoder.grouping.bk", p.grouping.bk);
    visit("encoder.grouping.wv", p.grouping.wv);
    visit("encoder.grouping.bv", p.grouping.bv);
    visit("encoder.grouping.ww", p.grouping.ww);
    visit("encoder.grouping.bw", p.grouping.bw);
    for (size_t i = 0; i < p.post.size(); ++i)
        visit_layer(p.post[i], "encoder.post" + std::to_string(i), visit);
    visit("encoder.final_ln_g", p.final_ln_g);
    visit("encoder.final_ln_b", p.final_ln_b);
}

namespace {

bool has_padding(const TextBatch& batch) {
    for (char c : batch.real)
        if (!c) return true;
    return false;
}

// B x h x T x T additive mask: kMaskedScore wherever the KEY position is a
// padded token (queries are left free; their outputs are discarded or masked
// downstream). Token positions are 0..S-1, group positions S..S+K-1.
Tensor pad_attention_mask(const TextBatch& batch, int64_t n_heads, int64_t k_groups) {
    if (!has_padding(batch)) return {};
    int64_t B = batch.batch, S = batch.len, T = S + k_groups;
    std::vector<double> m(static_cast<size_t>(B * n_heads * T * T), 0.0);
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t j = 0; j < S; ++j) {
            if (batch.real[static_cast<size_t>(b * S + j)]) continue;
            for (int64_t h = 0; h < n_heads; ++h)
                for (int64_t q = 0; q < T; ++q)
                    m[static_cast<size_t>(((b * n_heads + h) * T + q) * T + j)] = kMaskedScore;
        }
    }
    return Tensor::from_data({B, n_heads, T, T}, std::move(m), false);
}

Tensor mhsa(const Tensor& x, const LayerParams& p, int64_t n_heads, const Tensor& mask) {
    int64_t B = x.dim(0), S = x.dim(1), d = x.dim(2);
    int64_t hd = d / n_heads;
    auto split = [&](const Tensor& t) {
        return permute(reshape(t, {B, S, n_heads, hd}), {0, 2, 1, 3});  // B,h,S,hd
    };
    Tensor q = split(linear(x, p.wq, p.bq));
    Tensor k = split(linear(x, p.wk, p.bk));
    Tensor v = split(linear(x, p.wv, p.bv));
    Tensor scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(hd)));
    if (mask.defined()) scores = add(scores, mask);
    Tensor ctx = matmul(softmax(scores, 3), v);  // B,h,S,hd
    Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {B, S, d});
    return linear(merged, p.wo, p.bo);
}

}  // namespace

Tensor encoder_layer(const Tensor& x, const LayerParams& p, int64_t n_heads, const Tensor& mask) {
    Tensor x1 = add(x, mhsa(layer_norm(x, p.ln1_g, p.ln1_b), p, n_heads, mask));
    Tensor h = layer_norm(x1, p.ln2_g, p.ln2_b);
    return add(x1, linear(gelu(linear(h, p.w1, p.b1)), p.w2, p.b2));
}

std::pair<Tensor, Tensor> embed_and_encode(const TextBatch& batch, const EncoderParams& p) {
    const EncoderConfig& cfg = p.cfg;
    int64_t B = batch.batch, S = batch.len, K = cfg.n_groups;
    if (S > cfg.max_tokens)
        throw ShapeError("batch length " + std::to_string(S) + " exceeds the model maximum " +
                         std::to_string(cfg.max_tokens));
    if (static_cast<int64_t>(batch.token_ids.size()) != B * S)
        throw ShapeError("token id buffer does not match batch dimensions");

    Tensor tok = embedding_lookup(p.token_embed, batch.token_ids, {B, S});
    Tensor x_tokens = add_bias(tok, slice(p.pos_embed, 0, 0, S));
    // learned group vectors, broadcast across the batch
    Tensor x_groups = add_bias(Tensor::zeros({B, K, cfg.d}), p.group_vectors);
    Tensor x = concat({x_tokens, x_groups}, 1);  // B, S+K, d

    Tensor mask = pad_attention_mask(batch, cfg.n_heads, K);
    for (const LayerParams& layer : p.pre) x = encoder_layer(x, layer, cfg.n_heads, mask);
    return {slice(x, 1, 0, S), slice(x, 1, S, K)};
}

GroupingOutput grouping_block(const Tensor& encoded_tokens, const Tensor& encoded_groups,
                              const TextBatch& batch, const GroupingParams& p,
                              double temperature, GroupMode mode, uint64_t seed) {
    int64_t B = encoded_tokens.dim(0), S = encoded_tokens.dim(1), d = encoded_tokens.dim(2);
    int64_t K = encoded_groups.dim(1);
    if (encoded_groups.dim(0) != B || encoded_groups.dim(2) != d)
        throw ShapeError("token/group encodings disagree: " + shape_str(encoded_tokens.shape()) +
                         " vs " + shape_str(encoded_groups.shape()));

    Tensor q = linear(encoded_groups, p.wq, p.bq);  // B,K,d
    Tensor k = linear(encoded_tokens, p.wk, p.bk);  // B,S,d
    Tensor v = linear(encoded_tokens, p.wv, p.bv);
    Tensor a_raw = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(d)));  // B,K,S

    bool padded = has_padding(batch);
    if (padded) {
        // shift padded columns far negative before normalization
        std::vector<double> m(static_cast<size_t>(B * K * S), 0.0);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t j = 0; j < S; ++j)
                if (!batch.real[static_cast<size_t>(b * S + j)])
                    for (int64_t g = 0; g < K; ++g)
                        m[static_cast<size_t>((b * K + g) * S + j)] = kMaskedScore;
        a_raw = add(a_raw, Tensor::from_data({B, K, S}, std::move(m), false));
    }

    Tensor logits = a_raw;
    if (mode != GroupMode::Eval) logits = add(logits, gumbel_noise({B, K, S}, seed));
    logits = scale(logits, 1.0 / temperature);
    Tensor a_soft = softmax(logits, 1);  // competition across groups, per token

    Tensor a = mode == GroupMode::Soft ? a_soft : straight_through_onehot(a_soft, 1);
    if (padded) {
        // zero the padded columns so they add exactly nothing to any group
        std::vector<double> m(static_cast<size_t>(B * K * S), 1.0);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t j = 0; j < S; ++j)
                if (!batch.real[static_cast<size_t>(b * S + j)])
                    for (int64_t g = 0; g < K; ++g)
                        m[static_cast<size_t>((b * K + g) * S + j)] = 0.0;
        a = mul(a, Tensor::from_data({B, K, S}, std::move(m), false));
    }

    Tensor pooled = matmul(mass_normalize(a, 1.0), v);  // B,K,d
    GroupingOutput out;
    out.groups = add(encoded_groups, linear(pooled, p.ww, p.bw));
    out.soft_attention = a_soft;
    out.hard_assignment = argmax(a_soft, 1);  // B*S lanes
    for (int64_t b = 0; b < B; ++b)
        for (int64_t j = 0; j < S; ++j)
            if (!batch.real[static_cast<size_t>(b * S + j)])
                out.hard_assignment[static_cast<size_t>(b * S + j)] = -1;
    return out;
}

std::pair<Tensor, GroupingOutput> encode_text(const TextBatch& batch, const EncoderParams& p,
                                              GroupMode mode, uint64_t seed) {
    auto [t_hat, g_hat] = embed_and_encode(batch, p);
    GroupingOutput grouping = grouping_block(t_hat, g_hat, batch, p.grouping,
                                             p.cfg.gumbel_temperature, mode, seed);
    Tensor x = grouping.groups;
    Tensor no_mask;
    for (const LayerParams& layer : p.post) x = encoder_layer(x, layer, p.cfg.n_heads, no_mask);
    x = layer_norm(x, p.final_ln_g, p.final_ln_b);
    return {x, grouping};
}

std::vector<std::vector<int32_t>> extract_segmentation(const GroupingOutput& out,
                                                       const TextBatch& batch) {
    std::vector<std::vector<int32_t>> result(static_cast<size_t>(batch.batch));
    for (int64_t b = 0; b < batch.batch; ++b) {
        for (int64_t j = 0; j < batch.len; ++j) {
            if (!batch.real[static_cast<size_t>(b * batch.len + j)]) continue;
            result[static_cast<size_t>(b)].push_back(
                static_cast<int32_t>(out.hard_assignment[static_cast<size_t>(b * batch.len + j)]));
        }
    }
    return result;
}

}  // namespace tg
