#include "tg/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "tg/errors.hpp"

namespace tg {

using nlohmann::json;

void RunConfig::validate() const {
    encoder.validate();
    if (disable_contrastive && disable_reconstruction)
        throw ConfigError("both objectives disabled; nothing to train");
    if (lambda < 0.0) throw ConfigError("reconstruction weight must be non-negative");
    if (tau <= 0.0) throw ConfigError("contrastive temperature must be positive");
    if (optimizer.lr <= 0.0) throw ConfigError("learning rate must be positive");
    if (optimizer.beta1 < 0.0 || optimizer.beta1 >= 1.0 || optimizer.beta2 < 0.0 ||
        optimizer.beta2 >= 1.0)
        throw ConfigError("Adam betas must lie in [0, 1)");
    if (optimizer.weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    if (optimizer.warmup_steps < 0) throw ConfigError("warmup steps must be non-negative");
    if (optimizer.total_epochs < 1) throw ConfigError("need at least one epoch");
    int64_t min_batch = disable_contrastive ? 1 : 2;
    if (batch_size < min_batch)
        throw ConfigError("batch size must be at least " + std::to_string(min_batch));
    if (dataset.n_train < 0 || dataset.n_val < 0 || dataset.n_test < 0)
        throw ConfigError("dataset sizes must be non-negative");
    if (dataset.dir.empty()) throw ConfigError("dataset directory must be set");
    if (dataset.world.k_img < 1 || dataset.world.d_img < 1)
        throw ConfigError("image groups need positive k and d");
    if (dataset.world.noise_sigma < 0.0) throw ConfigError("noise sigma must be non-negative");
    if (dataset.world.fixed_object_count < 0 ||
        dataset.world.fixed_object_count > dataset.world.k_img)
        throw ConfigError("fixed object count must lie in [0, k_img]");
}

namespace {

json to_json(const RunConfig& c) {
    return json{
        {"encoder",
         {{"vocab_size", c.encoder.vocab_size},
          {"d", c.encoder.d},
          {"n_heads", c.encoder.n_heads},
          {"n_pre_layers", c.encoder.n_pre_layers},
          {"n_post_layers", c.encoder.n_post_layers},
          {"n_groups", c.encoder.n_groups},
          {"max_tokens", c.encoder.max_tokens},
          {"gumbel_temperature", c.encoder.gumbel_temperature},
          {"projection_dim", c.encoder.projection_dim}}},
        {"lambda", c.lambda},
        {"tau", c.tau},
        {"optimizer",
         {{"lr", c.optimizer.lr},
          {"beta1", c.optimizer.beta1},
          {"beta2", c.optimizer.beta2},
          {"weight_decay", c.optimizer.weight_decay},
          {"warmup_steps", c.optimizer.warmup_steps},
          {"total_epochs", c.optimizer.total_epochs},
          {"cosine_decay", c.optimizer.cosine_decay}}},
        {"batch_size", c.batch_size},
        {"seeds", {{"data", c.data_seed}, {"init", c.init_seed}, {"gumbel", c.gumbel_seed}}},
        {"dataset",
         {{"dir", c.dataset.dir},
          {"n_train", c.dataset.n_train},
          {"n_val", c.dataset.n_val},
          {"n_test", c.dataset.n_test},
          {"world",
           {{"k_img", c.dataset.world.k_img},
            {"d_img", c.dataset.world.d_img},
            {"noise_sigma", c.dataset.world.noise_sigma},
            {"oracle_seed", c.dataset.world.oracle_seed},
            {"fixed_object_count", c.dataset.world.fixed_object_count}}}}},
        {"ablate",
         {{"contrastive", c.disable_contrastive}, {"reconstruction", c.disable_reconstruction}}}};
}

// Missing keys keep their defaults so configs stay forward-readable; unknown
// keys are rejected loudly rather than silently ignored.
template <typename T>
void pull(const json& j, const char* key, T& into) {
    if (j.contains(key)) j.at(key).get_to(into);
}

void check_keys(const json& j, std::initializer_list<const char*> known,
                const std::string& where) {
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw ConfigError("unknown config key '" + where + key + "'");
    }
}

RunConfig from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    check_keys(j, {"encoder", "lambda", "tau", "optimizer", "batch_size", "seeds", "dataset",
                   "ablate"},
               "");
    RunConfig c;
    if (j.contains("encoder")) {
        const json& e = j.at("encoder");
        check_keys(e, {"vocab_size", "d", "n_heads", "n_pre_layers", "n_post_layers", "n_groups",
                       "max_tokens", "gumbel_temperature", "projection_dim"},
                   "encoder.");
        pull(e, "vocab_size", c.encoder.vocab_size);
        pull(e, "d", c.encoder.d);
        pull(e, "n_heads", c.encoder.n_heads);
        pull(e, "n_pre_layers", c.encoder.n_pre_layers);
        pull(e, "n_post_layers", c.encoder.n_post_layers);
        pull(e, "n_groups", c.encoder.n_groups);
        pull(e, "max_tokens", c.encoder.max_tokens);
        pull(e, "gumbel_temperature", c.encoder.gumbel_temperature);
        pull(e, "projection_dim", c.encoder.projection_dim);
    }
    pull(j, "lambda", c.lambda);
    pull(j, "tau", c.tau);
    if (j.contains("optimizer")) {
        const json& o = j.at("optimizer");
        check_keys(o, {"lr", "beta1", "beta2", "weight_decay", "warmup_steps", "total_epochs",
                       "cosine_decay"},
                   "optimizer.");
        pull(o, "lr", c.optimizer.lr);
        pull(o, "beta1", c.optimizer.beta1);
        pull(o, "beta2", c.optimizer.beta2);
        pull(o, "weight_decay", c.optimizer.weight_decay);
        pull(o, "warmup_steps", c.optimizer.warmup_steps);
        pull(o, "total_epochs", c.optimizer.total_epochs);
        pull(o, "cosine_decay", c.optimizer.cosine_decay);
    }
    pull(j, "batch_size", c.batch_size);
    if (j.contains("seeds")) {
        const json& s = j.at("seeds");
        check_keys(s, {"data", "init", "gumbel"}, "seeds.");
        pull(s, "data", c.data_seed);
        pull(s, "init", c.init_seed);
        pull(s, "gumbel", c.gumbel_seed);
    }
    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        check_keys(d, {"dir", "n_train", "n_val", "n_test", "world"}, "dataset.");
        pull(d, "dir", c.dataset.dir);
        pull(d, "n_train", c.dataset.n_train);
        pull(d, "n_val", c.dataset.n_val);
        pull(d, "n_test", c.dataset.n_test);
        if (d.contains("world")) {
            const json& w = d.at("world");
            check_keys(w, {"k_img", "d_img", "noise_sigma", "oracle_seed", "fixed_object_count"},
                       "dataset.world.");
            pull(w, "k_img", c.dataset.world.k_img);
            pull(w, "d_img", c.dataset.world.d_img);
            pull(w, "noise_sigma", c.dataset.world.noise_sigma);
            pull(w, "oracle_seed", c.dataset.world.oracle_seed);
            pull(w, "fixed_object_count", c.dataset.world.fixed_object_count);
        }
    }
    if (j.contains("ablate")) {
        const json& a = j.at("ablate");
        check_keys(a, {"contrastive", "reconstruction"}, "ablate.");
        pull(a, "contrastive", c.disable_contrastive);
        pull(a, "reconstruction", c.disable_reconstruction);
    }
    return c;
}

}  // namespace

std::string run_config_to_json(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

RunConfig run_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    try {
        return from_json(j);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config field has the wrong type: ") + e.what());
    }
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return run_config_from_json(buf.str());
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write config file " + path);
    out << run_config_to_json(cfg);
    if (!out) throw DataError("failed writing config file " + path);
}

uint64_t fnv1a64(const void* data, size_t len, uint64_t seed) {
    const auto* p = static_cast<const uint8_t*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t config_hash(const RunConfig& cfg) {
    std::string s = run_config_to_json(cfg);
    return fnv1a64(s.data(), s.size());
}

std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

}  // namespace tg
