#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "tg/encoder.hpp"
#include "tg/tensor.hpp"

namespace tg {

// Closed word lists of the synthetic scene grammar.
namespace words {
extern const std::vector<std::string> shapes;     // 12
extern const std::vector<std::string> colors;     // 8
extern const std::vector<std::string> sizes;      // 3
extern const std::vector<std::string> relations;  // 6
extern const std::vector<std::vector<std::string>> fillers;  // unannotated prefixes
}  // namespace words

struct Vocab {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int32_t> index;
    int32_t pad = 0, bos = 1, eos = 2, unk = 3;

    int32_t id(const std::string& word) const;  // unk for unknown words
    const std::string& word(int32_t id) const;
    static Vocab world_vocab();
};

struct ObjectSpec {
    int32_t shape = 0;
    int32_t color = 0;
    int32_t size = -1;  // -1 = no size attribute
};

struct Scene {
    std::vector<ObjectSpec> objects;  // 1..4
    int32_t relation = 0;             // between consecutive objects
    uint64_t seed = 0;                // drives the oracle's per-scene noise
};

// Frozen oracle output: plain float storage, never part of the autodiff tape.
struct ImageGroups {
    int64_t k = 0, d = 0;
    std::vector<float> data;  // k x d row-major
};

struct CaptionWithSpans {
    std::vector<int32_t> tokens;  // includes <bos> ... <eos>
    // [start, end) per object noun phrase ("size? color shape"), in token order
    std::vector<std::pair<int32_t, int32_t>> gold_spans;
    bool is_foil = false;
};

struct WorldConfig {
    int64_t k_img = 4;
    int64_t d_img = 256;
    double noise_sigma = 0.05;
    uint64_t oracle_seed = 9001;
    int32_t fixed_object_count = 0;  // 0 = mixed 1..4, otherwise exactly this
};

// Deterministic per-attribute-combination embedding table plus per-scene noise.
class Oracle {
public:
    explicit Oracle(const WorldConfig& cfg);
    ImageGroups encode(const Scene& scene) const;
    ImageGroups encode_noiseless(const Scene& scene) const;
    const std::vector<float>& base_table() const { return base_; }
    int64_t combo_count() const;
    const WorldConfig& config() const { return cfg_; }

private:
    void fill(const Scene& scene, double sigma, ImageGroups& out) const;
    WorldConfig cfg_;
    std::vector<float> base_;  // combos x d_img
};

Scene generate_scene(uint64_t seed, const WorldConfig& cfg = {});

enum class SceneAlteration { Subject, Object, Relation };
Scene alter_scene(const Scene& scene, SceneAlteration kind, uint64_t seed);

CaptionWithSpans generate_caption(const Scene& scene, uint64_t seed, const Vocab& vocab);
CaptionWithSpans make_foil(const CaptionWithSpans& caption, const Scene& scene, uint64_t seed,
                           const Vocab& vocab);

std::string detokenize(const Vocab& vocab, const std::vector<int32_t>& tokens);
std::vector<int32_t> tokenize(const Vocab& vocab, const std::string& text);  // whitespace split

struct DatasetExample {
    Scene scene;
    ImageGroups image_groups;
    CaptionWithSpans caption;
    std::vector<int32_t> foil_tokens;
    struct Negative {
        std::string kind;  // "subject" | "object" | "relation"
        ImageGroups groups;
    };
    std::vector<Negative> negatives;
};

// Writes train.jsonl / val.jsonl / test.jsonl / vocab.json into dir. Caption
// strings are disjoint across splits (rejection-sampled against earlier
// splits); duplicates within a split are allowed.
void build_dataset(const std::string& dir, int64_t n_train, int64_t n_val, int64_t n_test,
                   uint64_t seed, const WorldConfig& cfg = {});

Vocab load_vocab(const std::string& path, WorldConfig* cfg_out = nullptr);
std::vector<DatasetExample> load_dataset(const std::string& path, const Vocab& vocab,
                                         const WorldConfig& cfg);

// Batching helpers for the model.
TextBatch make_text_batch(const std::vector<const CaptionWithSpans*>& captions, const Vocab& vocab,
                          int64_t max_tokens);
Tensor image_groups_tensor(const std::vector<const ImageGroups*>& groups);  // B x K x d constant

std::string base64_encode(const uint8_t* data, size_t len);
std::vector<uint8_t> base64_decode(const std::string& text);  // throws DataError

}  // namespace tg
