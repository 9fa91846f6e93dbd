#include "tg/objectives.hpp"

#include <cmath>

#include "tg/errors.hpp"

namespace tg {

namespace {
constexpr double kMaskedScore = -1e30;
}

Model init_model(const EncoderConfig& cfg, int64_t d_img, uint64_t init_seed) {
    cfg.validate();
    if (d_img <= 0) throw ConfigError("image dimension must be positive");
    Rng rng(init_seed);
    Model m;
    m.d_img = d_img;
    m.encoder = init_encoder(cfg, rng);

    int64_t d = cfg.d;
    DecoderParams& dec = m.decoder;
    dec.pos_embed = init_weight(cfg.max_tokens, d, rng);
    dec.ln1_g = init_ones(d);
    dec.ln1_b = init_zeros(d);
    dec.wq = init_weight(d, d, rng);
    dec.bq = init_zeros(d);
    dec.wk = init_weight(d, d, rng);
    dec.bk = init_zeros(d);
    dec.wv = init_weight(d, d, rng);
    dec.bv = init_zeros(d);
    dec.wo = init_weight(d, d, rng);
    dec.bo = init_zeros(d);
    dec.ln2_g = init_ones(d);
    dec.ln2_b = init_zeros(d);
    dec.cwq = init_weight(d, d, rng);
    dec.cbq = init_zeros(d);
    dec.cwk = init_weight(d, d, rng);
    dec.cbk = init_zeros(d);
    dec.cwv = init_weight(d, d, rng);
    dec.cbv = init_zeros(d);
    dec.cwo = init_weight(d, d, rng);
    dec.cbo = init_zeros(d);
    dec.ln3_g = init_ones(d);
    dec.ln3_b = init_zeros(d);
    dec.w1 = init_weight(d, 4 * d, rng);
    dec.b1 = init_zeros(4 * d);
    dec.w2 = init_weight(4 * d, d, rng);
    dec.b2 = init_zeros(d);
    dec.final_ln_g = init_ones(d);
    dec.final_ln_b = init_zeros(d);

    m.projector.text_w = init_weight(d, cfg.projection_dim, rng);
    m.projector.text_b = init_zeros(cfg.projection_dim);
    m.projector.image_w = init_weight(d_img, cfg.projection_dim, rng);
    m.projector.image_b = init_zeros(cfg.projection_dim);
    return m;
}

void visit_params(Model& m, const ParamVisitor& visit) {
    visit_params(m.encoder, visit);  // token_embed lives here; the decoder reuses it
    DecoderParams& d = m.decoder;
    visit("decoder.pos_embed", d.pos_embed);
    visit("decoder.ln1_g", d.ln1_g);
    visit("decoder.ln1_b", d.ln1_b);
    visit("decoder.wq", d.wq);
    visit("decoder.bq", d.bq);
    visit("decoder.wk", d.wk);
    visit("decoder.bk", d.bk);
    visit("decoder.wv", d.wv);
    visit("decoder.bv", d.bv);
    visit("decoder.wo", d.wo);
    visit("decoder.bo", d.bo);
    visit("decoder.ln2_g", d.ln2_g);
    visit("decoder.ln2_b", d.ln2_b);
    visit("decoder.cwq", d.cwq);
    visit("decoder.cbq", d.cbq);
    visit("decoder.cwk", d.cwk);
    visit("decoder.cbk", d.cbk);
    visit("decoder.cwv", d.cwv);
    visit("decoder.cbv", d.cbv);
    visit("decoder.cwo", d.cwo);
    visit("decoder.cbo", d.cbo);
    visit("decoder.ln3_g", d.ln3_g);
    visit("decoder.ln3_b", d.ln3_b);
    visit("decoder.w1", d.w1);
    visit("decoder.b1", d.b1);
    visit("decoder.w2", d.w2);
    visit("decoder.b2", d.b2);
    visit("decoder.final_ln_g", d.final_ln_g);
    visit("decoder.final_ln_b", d.final_ln_b);
    visit("proj.text_w", m.projector.text_w);
    visit("proj.text_b", m.projector.text_b);
    visit("proj.image_w", m.projector.image_w);
    visit("proj.image_b", m.projector.image_b);
}

Tensor project_and_pool(const Tensor& groups, const Tensor& w, const Tensor& b) {
    return mean_pool(linear(groups, w, b), 1);
}

Tensor info_nce(const Tensor& text, const Tensor& image, double tau, NceDirection direction) {
    if (text.rank() != 2 || image.rank() != 2 || text.dim(0) != image.dim(0) ||
        text.dim(1) != image.dim(1))
        throw ShapeError("contrastive inputs must be equal-shape B x dim matrices, got " +
                         shape_str(text.shape()) + " and " + shape_str(image.shape()));
    if (tau <= 0.0) throw ConfigError("contrastive temperature must be positive");
    int64_t B = text.dim(0);
    if (B < 2) throw ConfigError("contrastive loss needs a batch of at least 2 pairs, got " +
                                 std::to_string(B));

    // sim[t][i] = cosine(text_t, image_i)
    Tensor sim = matmul_nt(l2_normalize(text), l2_normalize(image));
    std::vector<int32_t> diag(static_cast<size_t>(B));
    for (int64_t i = 0; i < B; ++i) diag[static_cast<size_t>(i)] = static_cast<int32_t>(i);

    // i2t holds each image fixed and normalizes over the texts; t2i the reverse
    Tensor logits = direction == NceDirection::ImageToText ? transpose_last2(sim) : sim;
    return cross_entropy(scale(logits, 1.0 / tau), diag, -1);
}

ContrastiveTerms contrastive_loss(const Tensor& text_pooled, const Tensor& image_pooled,
                                  double tau) {
    ContrastiveTerms out;
    out.i2t = info_nce(text_pooled, image_pooled, tau, NceDirection::ImageToText);
    out.t2i = info_nce(text_pooled, image_pooled, tau, NceDirection::TextToImage);
    out.combined = scale(add(out.i2t, out.t2i), 0.5);
    return out;
}

Tensor decode_reconstruct(const TextBatch& batch, const Tensor& groups, const DecoderParams& p,
                          const Tensor& token_embed, int32_t bos_id) {
    int64_t B = batch.batch, S = batch.len;
    int64_t d = token_embed.dim(1);
    if (groups.dim(0) != B) throw ShapeError("group batch does not match the text batch");
    if (S > p.pos_embed.dim(0))
        throw ShapeError("sequence longer than the decoder position table");

    std::vector<int32_t> shifted(static_cast<size_t>(B * S));
    for (int64_t b = 0; b < B; ++b) {
        shifted[static_cast<size_t>(b * S)] = bos_id;
        for (int64_t j = 1; j < S; ++j)
            shifted[static_cast<size_t>(b * S + j)] =
                batch.token_ids[static_cast<size_t>(b * S + j - 1)];
    }
    Tensor x = add_bias(embedding_lookup(token_embed, shifted, {B, S}),
                        slice(p.pos_embed, 0, 0, S));

    // causal self-attention, single head
    std::vector<double> cm(static_cast<size_t>(S * S), 0.0);
    for (int64_t qpos = 0; qpos < S; ++qpos)
        for (int64_t kpos = qpos + 1; kpos < S; ++kpos)
            cm[static_cast<size_t>(qpos * S + kpos)] = kMaskedScore;
    Tensor causal = Tensor::from_data({S, S}, std::move(cm), false);

    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    {
        Tensor h = layer_norm(x, p.ln1_g, p.ln1_b);
        Tensor q = linear(h, p.wq, p.bq);
        Tensor k = linear(h, p.wk, p.bk);
        Tensor v = linear(h, p.wv, p.bv);
        Tensor scores = add_bias(scale(matmul_nt(q, k), inv_sqrt_d), causal);  // B,S,S
        x = add(x, linear(matmul(softmax(scores, 2), v), p.wo, p.bo));
    }
    {
        Tensor h = layer_norm(x, p.ln2_g, p.ln2_b);
        Tensor q = linear(h, p.cwq, p.cbq);       // B,S,d
        Tensor k = linear(groups, p.cwk, p.cbk);  // B,K,d
        Tensor v = linear(groups, p.cwv, p.cbv);
        Tensor scores = scale(matmul_nt(q, k), inv_sqrt_d);  // B,S,K
        x = add(x, linear(matmul(softmax(scores, 2), v), p.cwo, p.cbo));
    }
    {
        Tensor h = layer_norm(x, p.ln3_g, p.ln3_b);
        x = add(x, linear(gelu(linear(h, p.w1, p.b1)), p.w2, p.b2));
    }
    x = layer_norm(x, p.final_ln_g, p.final_ln_b);
    return matmul_nt(x, token_embed);  // tied output projection, B x S x V
}

Tensor reconstruction_loss(const Tensor& logits, const TextBatch& batch, int32_t pad_id) {
    return sequence_cross_entropy(logits, batch.token_ids, pad_id);
}

LossBreakdown total_loss(const TextBatch& batch, const Tensor& image_groups, Model& model,
                         GroupMode mode, uint64_t gumbel_seed, const LossOptions& opt) {
    if (opt.disable_contrastive && opt.disable_reconstruction)
        throw ConfigError("both objectives disabled; nothing to train");

    LossBreakdown out;
    out.lambda = opt.lambda;
    out.tau = opt.tau;

    auto [final_groups, grouping] = encode_text(batch, model.encoder, mode, gumbel_seed);
    out.grouping = grouping;

    Tensor contrast, recon_scaled;
    if (!opt.disable_contrastive) {
        Tensor text_pooled =
            project_and_pool(final_groups, model.projector.text_w, model.projector.text_b);
        Tensor image_pooled =
            project_and_pool(image_groups, model.projector.image_w, model.projector.image_b);
        ContrastiveTerms terms = contrastive_loss(text_pooled, image_pooled, opt.tau);
        out.l_i2t = terms.i2t.item();
        out.l_t2i = terms.t2i.item();
        out.l_contrastive = terms.combined.item();
        contrast = terms.combined;
    }
    if (!opt.disable_reconstruction) {
        Tensor logits = decode_reconstruct(batch, final_groups, model.decoder,
                                           model.encoder.token_embed, opt.bos_id);
        Tensor recon = reconstruction_loss(logits, batch, opt.pad_id);
        out.l_reconstruction = recon.item();
        recon_scaled = scale(recon, opt.lambda);
    }

    if (contrast.defined() && recon_scaled.defined())
        out.total = add(contrast, recon_scaled);
    else if (contrast.defined())
        out.total = contrast;
    else
        out.total = recon_scaled;
    out.l_total = out.total.item();
    return out;
}

}  // namespace tg
