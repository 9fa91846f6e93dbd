#pragma once

#include <cstdint>
#include <string>

#include "tg/encoder.hpp"
#include "tg/world.hpp"

namespace tg {

struct OptimizerConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    int64_t warmup_steps = 158;  // two epochs of 5000/64 = 79 steps
    int64_t total_epochs = 30;
    bool cosine_decay = true;  // cosine to zero after warmup; constant otherwise
};

struct DatasetConfig {
    std::string dir = "data";
    int64_t n_train = 5000;
    int64_t n_val = 500;
    int64_t n_test = 2000;
    WorldConfig world;
};

// Everything that identifies a run. Two runs with equal serialized configs
// and equal dataset bytes produce identical logs, checkpoints, and reports.
struct RunConfig {
    EncoderConfig encoder;
    double lambda = 1.0;  // reconstruction weight in the combined loss
    double tau = 0.07;    // contrastive temperature
    OptimizerConfig optimizer;
    int64_t batch_size = 64;
    uint64_t data_seed = 1;
    uint64_t init_seed = 2;
    uint64_t gumbel_seed = 3;
    DatasetConfig dataset;
    bool disable_contrastive = false;
    bool disable_reconstruction = false;

    RunConfig() { encoder.d = 64; }  // desk-scale default; the encoder type keeps its own

    // Throws ConfigError on an unusable combination (both losses disabled,
    // non-positive temperatures, degenerate optimizer settings, ...).
    void validate() const;
};

std::string run_config_to_json(const RunConfig& cfg);  // pretty, stable key order
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);
void save_run_config(const std::string& path, const RunConfig& cfg);

// FNV-1a over bytes; the run identity is the hash of the serialized config.
uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 14695981039346656037ull);
uint64_t config_hash(const RunConfig& cfg);
std::string hash_hex(uint64_t h);

}  // namespace tg
