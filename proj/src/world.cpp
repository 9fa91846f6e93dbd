#include "tg/world.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "json.hpp"
#include "tg/errors.hpp"
#include "tg/rng.hpp"

using nlohmann::json;

namespace tg {

namespace words {
const std::vector<std::string> shapes = {"cube",  "sphere", "cone",  "cylinder",
                                         "pyramid", "torus", "block", "disk",
                                         "wedge", "prism",  "arch",  "slab"};
const std::vector<std::string> colors = {"red",    "blue",   "green", "yellow",
                                         "purple", "orange", "teal",  "gray"};
const std::vector<std::string> sizes = {"small", "large", "tiny"};
const std::vector<std::string> relations = {"beside", "above", "below",
                                            "behind", "near",  "inside"};
const std::vector<std::vector<std::string>> fillers = {
    {"the", "scene", "shows"}, {"a", "photo", "of"}, {"we", "see"}};
}  // namespace words

namespace {

// Mixed object-count weights for generate_scene.
constexpr double kCountWeights[4] = {0.20, 0.35, 0.30, 0.15};
constexpr double kSizeProb = 0.5;
constexpr double kFillerProb = 0.3;

int32_t find_word(const std::vector<std::string>& list, const std::string& w,
                  const char* what) {
    for (size_t i = 0; i < list.size(); ++i)
        if (list[i] == w) return static_cast<int32_t>(i);
    throw DataError(std::string("unknown ") + what + " word '" + w + "'");
}

}  // namespace

int32_t Vocab::id(const std::string& word) const {
    auto it = index.find(word);
    return it == index.end() ? unk : it->second;
}

const std::string& Vocab::word(int32_t id) const {
    if (id < 0 || id >= static_cast<int32_t>(tokens.size()))
        throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    return tokens[static_cast<size_t>(id)];
}

Vocab Vocab::world_vocab() {
    Vocab v;
    v.tokens = {"<pad>", "<bos>", "<eos>", "<unk>", "a"};
    auto extend = [&](const std::vector<std::string>& ws) {
        v.tokens.insert(v.tokens.end(), ws.begin(), ws.end());
    };
    extend(words::shapes);
    extend(words::colors);
    extend(words::sizes);
    extend(words::relations);
    for (const auto& f : words::fillers)
        for (const auto& w : f)
            if (std::find(v.tokens.begin(), v.tokens.end(), w) == v.tokens.end())
                v.tokens.push_back(w);
    for (size_t i = 0; i < v.tokens.size(); ++i)
        v.index[v.tokens[i]] = static_cast<int32_t>(i);
    return v;
}

// ---------------------------------------------------------------------------
// Scenes and captions
// ---------------------------------------------------------------------------

Scene generate_scene(uint64_t seed, const WorldConfig& cfg) {
    Rng rng(seed);
    Scene s;
    s.seed = seed;
    int32_t count;
    if (cfg.fixed_object_count > 0) {
        count = cfg.fixed_object_count;
    } else {
        double u = rng.uniform();
        double acc = 0.0;
        count = 4;
        for (int i = 0; i < 4; ++i) {
            acc += kCountWeights[i];
            if (u < acc) {
                count = i + 1;
                break;
            }
        }
    }
    if (count > cfg.k_img)
        throw ConfigError("scene object count " + std::to_string(count) + " exceeds k_img " +
                          std::to_string(cfg.k_img));
    s.relation = static_cast<int32_t>(rng.below(words::relations.size()));
    for (int32_t i = 0; i < count; ++i) {
        ObjectSpec o;
        o.shape = static_cast<int32_t>(rng.below(words::shapes.size()));
        o.color = static_cast<int32_t>(rng.below(words::colors.size()));
        o.size = rng.uniform() < kSizeProb ? static_cast<int32_t>(rng.below(words::sizes.size()))
                                           : -1;
        s.objects.push_back(o);
    }
    return s;
}

Scene alter_scene(const Scene& scene, SceneAlteration kind, uint64_t seed) {
    Rng rng(seed);
    Scene out = scene;
    out.seed = Rng::mix(scene.seed, seed);
    auto reroll = [&](int32_t old, size_t n) {
        auto v = static_cast<int32_t>(rng.below(n - 1));
        return v >= old ? v + 1 : v;
    };
    switch (kind) {
        case SceneAlteration::Subject:
            out.objects[0].shape = reroll(scene.objects[0].shape, words::shapes.size());
            break;
        case SceneAlteration::Object:
            if (scene.objects.size() < 2)
                throw ConfigError("object alteration needs at least two objects");
            out.objects[1].shape = reroll(scene.objects[1].shape, words::shapes.size());
            break;
        case SceneAlteration::Relation:
            out.relation = reroll(scene.relation, words::relations.size());
            break;
    }
    return out;
}

CaptionWithSpans generate_caption(const Scene& scene, uint64_t seed, const Vocab& vocab) {
    Rng rng(seed);
    CaptionWithSpans c;
    c.tokens.push_back(vocab.bos);
    if (rng.uniform() < kFillerProb) {
        const auto& filler = words::fillers[rng.below(words::fillers.size())];
        for (const auto& w : filler) c.tokens.push_back(vocab.id(w));
    }
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        const ObjectSpec& o = scene.objects[i];
        c.tokens.push_back(vocab.id("a"));
        auto start = static_cast<int32_t>(c.tokens.size());
        if (o.size >= 0) c.tokens.push_back(vocab.id(words::sizes[static_cast<size_t>(o.size)]));
        c.tokens.push_back(vocab.id(words::colors[static_cast<size_t>(o.color)]));
        c.tokens.push_back(vocab.id(words::shapes[static_cast<size_t>(o.shape)]));
        c.gold_spans.emplace_back(start, static_cast<int32_t>(c.tokens.size()));
        if (i + 1 < scene.objects.size())
            c.tokens.push_back(vocab.id(words::relations[static_cast<size_t>(scene.relation)]));
    }
    c.tokens.push_back(vocab.eos);
    return c;
}

CaptionWithSpans make_foil(const CaptionWithSpans& caption, const Scene& scene, uint64_t seed,
                           const Vocab& vocab) {
    if (caption.gold_spans.empty()) throw DataError("foil requires a caption with spans");
    Rng rng(seed);
    size_t idx = rng.below(caption.gold_spans.size());
    int32_t old_shape = scene.objects[idx].shape;
    auto repl = static_cast<int32_t>(rng.below(words::shapes.size() - 1));
    if (repl >= old_shape) ++repl;

    CaptionWithSpans foil = caption;
    foil.is_foil = true;
    // the shape noun is the last token of its span
    int32_t pos = caption.gold_spans[idx].second - 1;
    foil.tokens[static_cast<size_t>(pos)] = vocab.id(words::shapes[static_cast<size_t>(repl)]);
    return foil;
}

std::string detokenize(const Vocab& vocab, const std::vector<int32_t>& tokens) {
    std::string out;
    for (int32_t t : tokens) {
        if (!out.empty()) out += ' ';
        out += vocab.word(t);
    }
    return out;
}

std::vector<int32_t> tokenize(const Vocab& vocab, const std::string& text) {
    std::vector<int32_t> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(vocab.id(w));
    return out;
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

Oracle::Oracle(const WorldConfig& cfg) : cfg_(cfg) {
    int64_t combos = combo_count();
    base_.resize(static_cast<size_t>(combos * cfg_.d_img));
    Rng rng(cfg_.oracle_seed);
    for (float& x : base_) x = static_cast<float>(rng.normal());
}

int64_t Oracle::combo_count() const {
    return static_cast<int64_t>(words::shapes.size() * words::colors.size() *
                                (words::sizes.size() + 1));
}

void Oracle::fill(const Scene& scene, double sigma, ImageGroups& out) const {
    if (static_cast<int64_t>(scene.objects.size()) > cfg_.k_img)
        throw DataError("scene has more objects than image group slots");
    out.k = cfg_.k_img;
    out.d = cfg_.d_img;
    out.data.assign(static_cast<size_t>(out.k * out.d), 0.0f);  // empty slots stay zero
    Rng noise(Rng::mix(cfg_.oracle_seed, scene.seed));
    for (size_t i = 0; i < scene.objects.size(); ++i) {
        const ObjectSpec& o = scene.objects[i];
        int64_t row = (static_cast<int64_t>(o.shape) * static_cast<int64_t>(words::colors.size()) +
                       o.color) *
                          (static_cast<int64_t>(words::sizes.size()) + 1) +
                      (o.size + 1);
        const float* base = base_.data() + row * cfg_.d_img;
        float* dst = out.data.data() + static_cast<int64_t>(i) * cfg_.d_img;
        for (int64_t j = 0; j < cfg_.d_img; ++j)
            dst[j] = static_cast<float>(static_cast<double>(base[j]) + sigma * noise.normal());
    }
}

ImageGroups Oracle::encode(const Scene& scene) const {
    ImageGroups out;
    fill(scene, cfg_.noise_sigma, out);
    return out;
}

ImageGroups Oracle::encode_noiseless(const Scene& scene) const {
    ImageGroups out;
    fill(scene, 0.0, out);
    return out;
}

// ---------------------------------------------------------------------------
// base64 (RFC 4648)
// ---------------------------------------------------------------------------

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const uint8_t* data, size_t len) {
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    for (size_t i = 0; i < len; i += 3) {
        uint32_t chunk = static_cast<uint32_t>(data[i]) << 16;
        if (i + 1 < len) chunk |= static_cast<uint32_t>(data[i + 1]) << 8;
        if (i + 2 < len) chunk |= data[i + 2];
        out += kB64[(chunk >> 18) & 63];
        out += kB64[(chunk >> 12) & 63];
        out += i + 1 < len ? kB64[(chunk >> 6) & 63] : '=';
        out += i + 2 < len ? kB64[chunk & 63] : '=';
    }
    return out;
}

std::vector<uint8_t> base64_decode(const std::string& text) {
    if (text.size() % 4 != 0) throw DataError("base64 length not a multiple of 4");
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (size_t i = 0; i < text.size(); i += 4) {
        int pad = 0;
        uint32_t chunk = 0;
        for (int j = 0; j < 4; ++j) {
            char c = text[i + static_cast<size_t>(j)];
            if (c == '=') {
                if (i + 4 != text.size() || j < 2) throw DataError("bad base64 padding");
                ++pad;
                chunk <<= 6;
                continue;
            }
            if (pad > 0) throw DataError("bad base64 padding");
            int v = val(c);
            if (v < 0) throw DataError(std::string("bad base64 character '") + c + "'");
            chunk = (chunk << 6) | static_cast<uint32_t>(v);
        }
        out.push_back(static_cast<uint8_t>((chunk >> 16) & 0xff));
        if (pad < 2) out.push_back(static_cast<uint8_t>((chunk >> 8) & 0xff));
        if (pad < 1) out.push_back(static_cast<uint8_t>(chunk & 0xff));
    }
    return out;
}

namespace {

std::string floats_b64(const std::vector<float>& v) {
    std::vector<uint8_t> bytes;
    bytes.reserve(v.size() * 4);
    for (float f : v) {
        auto u = std::bit_cast<uint32_t>(f);
        bytes.push_back(static_cast<uint8_t>(u & 0xff));
        bytes.push_back(static_cast<uint8_t>((u >> 8) & 0xff));
        bytes.push_back(static_cast<uint8_t>((u >> 16) & 0xff));
        bytes.push_back(static_cast<uint8_t>((u >> 24) & 0xff));
    }
    return base64_encode(bytes.data(), bytes.size());
}

std::vector<float> b64_floats(const std::string& text) {
    std::vector<uint8_t> bytes = base64_decode(text);
    if (bytes.size() % 4 != 0) throw DataError("float blob length not a multiple of 4");
    std::vector<float> out(bytes.size() / 4);
    for (size_t i = 0; i < out.size(); ++i) {
        uint32_t u = static_cast<uint32_t>(bytes[i * 4]) |
                     (static_cast<uint32_t>(bytes[i * 4 + 1]) << 8) |
                     (static_cast<uint32_t>(bytes[i * 4 + 2]) << 16) |
                     (static_cast<uint32_t>(bytes[i * 4 + 3]) << 24);
        out[i] = std::bit_cast<float>(u);
    }
    return out;
}

json scene_to_json(const Scene& s) {
    json objs = json::array();
    for (const ObjectSpec& o : s.objects) {
        json j{{"shape", words::shapes[static_cast<size_t>(o.shape)]},
               {"color", words::colors[static_cast<size_t>(o.color)]}};
        j["size"] = o.size >= 0 ? json(words::sizes[static_cast<size_t>(o.size)]) : json(nullptr);
        objs.push_back(std::move(j));
    }
    return json{{"objects", std::move(objs)},
                {"relation", words::relations[static_cast<size_t>(s.relation)]},
                {"seed", s.seed}};
}

Scene scene_from_json(const json& j) {
    Scene s;
    s.seed = j.at("seed").get<uint64_t>();
    s.relation = find_word(words::relations, j.at("relation").get<std::string>(), "relation");
    for (const json& oj : j.at("objects")) {
        ObjectSpec o;
        o.shape = find_word(words::shapes, oj.at("shape").get<std::string>(), "shape");
        o.color = find_word(words::colors, oj.at("color").get<std::string>(), "color");
        o.size = oj.at("size").is_null()
                     ? -1
                     : find_word(words::sizes, oj.at("size").get<std::string>(), "size");
        s.objects.push_back(o);
    }
    return s;
}

json spans_to_json(const std::vector<std::pair<int32_t, int32_t>>& spans) {
    json out = json::array();
    for (const auto& [a, b] : spans) out.push_back(json::array({a, b}));
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

void build_dataset(const std::string& dir, int64_t n_train, int64_t n_val, int64_t n_test,
                   uint64_t seed, const WorldConfig& cfg) {
    Vocab vocab = Vocab::world_vocab();
    Oracle oracle(cfg);

    const char* names[3] = {"train.jsonl", "val.jsonl", "test.jsonl"};
    int64_t sizes[3] = {n_train, n_val, n_test};
    std::unordered_set<std::string> earlier_splits;

    for (int split = 0; split < 3; ++split) {
        std::string path = dir + "/" + names[split];
        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError("cannot open '" + path + "' for writing");
        uint64_t split_base = Rng::mix(seed, static_cast<uint64_t>(split) + 1);
        std::unordered_set<std::string> this_split;

        for (int64_t i = 0; i < sizes[split]; ++i) {
            Scene scene;
            CaptionWithSpans caption;
            std::string text;
            uint64_t scene_seed = 0;
            bool found = false;
            for (uint64_t attempt = 0; attempt < 4096; ++attempt) {
                scene_seed = Rng::mix(split_base, (static_cast<uint64_t>(i) << 16) | attempt);
                scene = generate_scene(scene_seed, cfg);
                caption = generate_caption(scene, Rng::mix(scene_seed, 1), vocab);
                text = detokenize(vocab, caption.tokens);
                if (!earlier_splits.count(text)) {
                    found = true;
                    break;
                }
            }
            if (!found)
                throw DataError("caption space exhausted while keeping splits disjoint (" + path +
                                ", record " + std::to_string(i) + ")");
            this_split.insert(text);

            CaptionWithSpans foil = make_foil(caption, scene, Rng::mix(scene_seed, 2), vocab);

            std::vector<SceneAlteration> kinds{SceneAlteration::Subject};
            if (scene.objects.size() >= 2) {
                kinds.push_back(SceneAlteration::Object);
                kinds.push_back(SceneAlteration::Relation);
            }
            Rng kind_rng(Rng::mix(scene_seed, 3));
            SceneAlteration kind = kinds[kind_rng.below(kinds.size())];
            Scene altered = alter_scene(scene, kind, Rng::mix(scene_seed, 4));
            const char* kind_name = kind == SceneAlteration::Subject ? "subject"
                                    : kind == SceneAlteration::Object ? "object"
                                                                      : "relation";

            json record{
                {"schema", "tgv1"},
                {"scene", scene_to_json(scene)},
                {"image_groups", floats_b64(oracle.encode(scene).data)},
                {"caption_tokens", caption.tokens},
                {"gold_spans", spans_to_json(caption.gold_spans)},
                {"foil_tokens", foil.tokens},
                {"negatives",
                 json::array({json{{"kind", kind_name},
                                   {"image_groups", floats_b64(oracle.encode(altered).data)}}})},
            };
            out << record.dump() << '\n';
        }
        if (!out) throw DataError("write failure on '" + path + "'");
        earlier_splits.insert(this_split.begin(), this_split.end());
    }

    std::string vpath = dir + "/vocab.json";
    std::ofstream vout(vpath, std::ios::binary);
    if (!vout) throw DataError("cannot open '" + vpath + "' for writing");
    json vj{{"schema", "tgv1"},
            {"tokens", vocab.tokens},
            {"pad", vocab.pad},
            {"bos", vocab.bos},
            {"eos", vocab.eos},
            {"unk", vocab.unk},
            {"k_img", cfg.k_img},
            {"d_img", cfg.d_img},
            {"noise_sigma", cfg.noise_sigma},
            {"oracle_seed", cfg.oracle_seed},
            {"fixed_object_count", cfg.fixed_object_count}};
    vout << vj.dump(2) << '\n';
    if (!vout) throw DataError("write failure on '" + vpath + "'");
}

Vocab load_vocab(const std::string& path, WorldConfig* cfg_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open vocabulary file '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError("bad vocabulary file '" + path + "': " + e.what());
    }
    if (j.value("schema", "") != "tgv1")
        throw DataError("unsupported schema in '" + path + "' (want tgv1)");
    Vocab v;
    v.tokens = j.at("tokens").get<std::vector<std::string>>();
    v.pad = j.at("pad").get<int32_t>();
    v.bos = j.at("bos").get<int32_t>();
    v.eos = j.at("eos").get<int32_t>();
    v.unk = j.at("unk").get<int32_t>();
    for (size_t i = 0; i < v.tokens.size(); ++i)
        v.index[v.tokens[i]] = static_cast<int32_t>(i);
    if (cfg_out) {
        cfg_out->k_img = j.at("k_img").get<int64_t>();
        cfg_out->d_img = j.at("d_img").get<int64_t>();
        cfg_out->noise_sigma = j.at("noise_sigma").get<double>();
        cfg_out->oracle_seed = j.at("oracle_seed").get<uint64_t>();
        cfg_out->fixed_object_count = j.value("fixed_object_count", 0);
    }
    return v;
}

std::vector<DatasetExample> load_dataset(const std::string& path, const Vocab& vocab,
                                         const WorldConfig& cfg) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset file '" + path + "'");
    std::vector<DatasetExample> out;
    std::string line;
    int64_t line_no = 0;
    auto fail = [&](const std::string& msg) -> DataError {
        return DataError(path + ":" + std::to_string(line_no) + ": " + msg);
    };
    auto parse_groups = [&](const std::string& b64) {
        ImageGroups g;
        g.k = cfg.k_img;
        g.d = cfg.d_img;
        g.data = b64_floats(b64);
        if (static_cast<int64_t>(g.data.size()) != g.k * g.d)
            throw fail("image group blob has " + std::to_string(g.data.size()) +
                       " floats, want " + std::to_string(g.k * g.d));
        return g;
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw fail(std::string("bad JSON: ") + e.what());
        }
        try {
            if (j.value("schema", "") != "tgv1") throw fail("unsupported record schema");
            DatasetExample ex;
            ex.scene = scene_from_json(j.at("scene"));
            ex.image_groups = parse_groups(j.at("image_groups").get<std::string>());
            ex.caption.tokens = j.at("caption_tokens").get<std::vector<int32_t>>();
            for (const json& sp : j.at("gold_spans"))
                ex.caption.gold_spans.emplace_back(sp.at(0).get<int32_t>(),
                                                   sp.at(1).get<int32_t>());
            ex.foil_tokens = j.at("foil_tokens").get<std::vector<int32_t>>();
            for (const json& nj : j.at("negatives"))
                ex.negatives.push_back({nj.at("kind").get<std::string>(),
                                        parse_groups(nj.at("image_groups").get<std::string>())});
            for (int32_t t : ex.caption.tokens)
                if (t < 0 || t >= static_cast<int32_t>(vocab.tokens.size()))
                    throw fail("token id out of vocabulary range");
            out.push_back(std::move(ex));
        } catch (const json::exception& e) {
            throw fail(std::string("bad record: ") + e.what());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

TextBatch make_text_batch(const std::vector<const CaptionWithSpans*>& captions,
                          const Vocab& vocab, int64_t max_tokens) {
    TextBatch batch;
    batch.batch = static_cast<int64_t>(captions.size());
    for (const auto* c : captions)
        batch.len = std::max(batch.len, static_cast<int64_t>(c->tokens.size()));
    if (batch.len > max_tokens)
        throw DataError("caption of " + std::to_string(batch.len) +
                        " tokens exceeds the model maximum " + std::to_string(max_tokens));
    batch.token_ids.assign(static_cast<size_t>(batch.batch * batch.len), vocab.pad);
    batch.real.assign(static_cast<size_t>(batch.batch * batch.len), 0);
    for (int64_t b = 0; b < batch.batch; ++b) {
        const auto& toks = captions[static_cast<size_t>(b)]->tokens;
        for (size_t j = 0; j < toks.size(); ++j) {
            batch.token_ids[static_cast<size_t>(b * batch.len) + j] = toks[j];
            batch.real[static_cast<size_t>(b * batch.len) + j] = 1;
        }
        batch.gold_spans.push_back(captions[static_cast<size_t>(b)]->gold_spans);
    }
    return batch;
}

Tensor image_groups_tensor(const std::vector<const ImageGroups*>& groups) {
    if (groups.empty()) throw DataError("empty image group batch");
    int64_t k = groups[0]->k, d = groups[0]->d;
    std::vector<double> data;
    data.reserve(groups.size() * static_cast<size_t>(k * d));
    for (const auto* g : groups) {
        if (g->k != k || g->d != d) throw DataError("inconsistent image group shapes in batch");
        for (float f : g->data) data.push_back(static_cast<double>(f));
    }
    return Tensor::from_data({static_cast<int64_t>(groups.size()), k, d}, std::move(data), false);
}

}  // namespace tg
