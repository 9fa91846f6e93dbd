#pragma once

#include <cstdint>

#include "tg/encoder.hpp"
#include "tg/tensor.hpp"

namespace tg {

// Single pre-norm decoder layer: causally masked self-attention (1 head),
// cross-attention over the K group vectors (1 head), 4x MLP. Owns its own
// positional table; the output projection is tied to the token embeddings.
struct DecoderParams {
    Tensor pos_embed;  // M x d
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // self-attention
    Tensor ln2_g, ln2_b;
    Tensor cwq, cbq, cwk, cbk, cwv, cbv, cwo, cbo;  // cross-attention
    Tensor ln3_g, ln3_b;
    Tensor w1, b1, w2, b2;  // MLP
    Tensor final_ln_g, final_ln_b;
};

struct ProjectorParams {
    Tensor text_w, text_b;    // d -> projection_dim
    Tensor image_w, image_b;  // d_img -> projection_dim
};

struct Model {
    EncoderParams encoder;
    DecoderParams decoder;
    ProjectorParams projector;
    int64_t d_img = 0;
};

Model init_model(const EncoderConfig& cfg, int64_t d_img, uint64_t init_seed);
void visit_params(Model& m, const ParamVisitor& visit);

// Per-group linear projection, then mean over the group axis. groups is
// B x K x d_in, weight d_in x d_out; result B x d_out.
Tensor project_and_pool(const Tensor& groups, const Tensor& w, const Tensor& b);

enum class NceDirection {
    ImageToText,  // for each image, a softmax over the texts in the batch
    TextToImage,  // for each text, a softmax over the images
};

// InfoNCE over cosine similarities at temperature tau. Throws ConfigError
// when the batch has fewer than two pairs (no negatives to contrast with).
Tensor info_nce(const Tensor& text, const Tensor& image, double tau, NceDirection direction);

struct ContrastiveTerms {
    Tensor i2t, t2i, combined;  // combined = (i2t + t2i) / 2
};
ContrastiveTerms contrastive_loss(const Tensor& text_pooled, const Tensor& image_pooled,
                                  double tau);

// Teacher-forced reconstruction: embeds the batch shifted right with <bos>,
// runs the decoder layer conditioned on the groups, and returns logits
// B x S x V through the tied embedding matrix.
Tensor decode_reconstruct(const TextBatch& batch, const Tensor& groups, const DecoderParams& p,
                          const Tensor& token_embed, int32_t bos_id);

// Mean over each example's real tokens, then mean over the batch.
Tensor reconstruction_loss(const Tensor& logits, const TextBatch& batch, int32_t pad_id);

struct LossOptions {
    double lambda = 1.0;
    double tau = 0.07;
    int32_t pad_id = 0;
    int32_t bos_id = 1;
    bool disable_contrastive = false;
    bool disable_reconstruction = false;
};

struct LossBreakdown {
    double l_i2t = 0.0;
    double l_t2i = 0.0;
    double l_contrastive = 0.0;
    double l_reconstruction = 0.0;
    double l_total = 0.0;
    double lambda = 1.0;
    double tau = 0.07;
    Tensor total;                 // scalar node for backward()
    GroupingOutput grouping;      // diagnostics from the encoder pass
};

// Full objective: encode, contrast against the frozen image groups, and
// reconstruct the caption. Disabled terms contribute exactly zero;
// l_total = l_contrastive + lambda * l_reconstruction holds exactly.
LossBreakdown total_loss(const TextBatch& batch, const Tensor& image_groups, Model& model,
                         GroupMode mode, uint64_t gumbel_seed, const LossOptions& opt);

}  // namespace tg
