#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tg/rng.hpp"
#include "tg/tensor.hpp"

namespace tg {

struct EncoderConfig {
    int64_t vocab_size = 0;
    int64_t d = 128;
    int64_t n_heads = 4;
    int64_t n_pre_layers = 6;
    int64_t n_post_layers = 3;
    int64_t n_groups = 4;       // K
    int64_t max_tokens = 77;    // M
    double gumbel_temperature = 1.0;
    int64_t projection_dim = 256;

    void validate() const;  // throws ConfigError
};

// One padded batch of token sequences. `len` is the longest sequence in the
// batch (<= max_tokens), not the model maximum; padding carries the pad id.
struct TextBatch {
    int64_t batch = 0;
    int64_t len = 0;
    std::vector<int32_t> token_ids;  // batch x len
    std::vector<char> real;          // batch x len, 1 = real token
    // per example: disjoint [start, end) index ranges of groundable phrases
    std::vector<std::vector<std::pair<int32_t, int32_t>>> gold_spans;

    int64_t real_count(int64_t b) const {
        int64_t n = 0;
        for (int64_t j = 0; j < len; ++j) n += real[static_cast<size_t>(b * len + j)];
        return n;
    }
};

enum class GroupMode {
    Train,  // Gumbel noise + hard one-hot assignment (straight-through)
    Eval,   // no noise, hard assignment
    Soft,   // noise but no hard rounding; diagnostic mode for gradient checks
};

struct GroupingOutput {
    Tensor groups;          // B x K x d, group vectors after the token update
    Tensor soft_attention;  // B x K x S, columns over K sum to 1 for real tokens
    // B x S group index per real token, -1 at padded positions
    std::vector<int64_t> hard_assignment;
};

// Pre-norm transformer encoder layer parameters (self-attention + 4x MLP).
struct LayerParams {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
};

struct GroupingParams {
    Tensor wq, bq;  // queries from groups
    Tensor wk, bk;  // keys from tokens
    Tensor wv, bv;  // values from tokens
    Tensor ww, bw;  // output update
};

struct EncoderParams {
    EncoderConfig cfg;
    Tensor token_embed;    // V x d
    Tensor pos_embed;      // M x d
    Tensor group_vectors;  // K x d
    std::vector<LayerParams> pre;
    GroupingParams grouping;
    std::vector<LayerParams> post;
    Tensor final_ln_g, final_ln_b;
};

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

EncoderParams init_encoder(const EncoderConfig& cfg, Rng& rng);
void visit_params(EncoderParams& p, const ParamVisitor& visit);

LayerParams init_layer(int64_t d, Rng& rng);
void visit_layer(LayerParams& p, const std::string& prefix, const ParamVisitor& visit);

// Shared building blocks (also used by the decoder).
Tensor init_weight(int64_t rows, int64_t cols, Rng& rng);  // Normal(0, 0.02)
Tensor init_zeros(int64_t n);
Tensor init_ones(int64_t n);

// Multi-head self-attention with residual, pre-norm. mask, when defined, is a
// B x h x S x T additive bias (0 or -1e30) applied to the attention scores.
Tensor encoder_layer(const Tensor& x, const LayerParams& p, int64_t n_heads, const Tensor& mask);

// Embed tokens, add learned positions, append the K learned group vectors,
// run the pre-group layers with padding masked on the key side. Returns
// (encoded_tokens B x S x d, encoded_groups B x K x d).
std::pair<Tensor, Tensor> embed_and_encode(const TextBatch& batch, const EncoderParams& p);

GroupingOutput grouping_block(const Tensor& encoded_tokens, const Tensor& encoded_groups,
                              const TextBatch& batch, const GroupingParams& p,
                              double temperature, GroupMode mode, uint64_t seed);

// Full text tower: embed_and_encode -> grouping_block -> post layers -> norm.
std::pair<Tensor, GroupingOutput> encode_text(const TextBatch& batch, const EncoderParams& p,
                                              GroupMode mode, uint64_t seed);

// Per example: group id per real token (indexed by token position, padded
// positions dropped), from the argmax over groups of the soft attention.
std::vector<std::vector<int32_t>> extract_segmentation(const GroupingOutput& out,
                                                       const TextBatch& batch);

}  // namespace tg
