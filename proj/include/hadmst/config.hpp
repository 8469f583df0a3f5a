#pragma once

// Run configuration: JSON file + dotted-key command-line overrides. Unknown
// keys are rejected by name so typos fail fast.

#include <string>

#include "hadmst/cmsa.hpp"
#include "hadmst/model.hpp"

namespace hadmst {
namespace config {

struct TrainConfig {
    model::ModelConfig model;

    int epochs = 50;
    int batch = 4;
    double lr = 1e-4;
    double weight_decay = 0.01;
    double ema_decay = 0.999;  // generator weight EMA for sampling; 0 disables
    double lambda_contrast = 0.1;
    double lambda_adv = 0.01;
    cmsa::ContrastiveParams contrastive;
    double graph_threshold = 0.3;

    // ablation / degradation switches
    bool use_hsd_fusion = true;
    bool use_cmsa = true;
    bool use_gdal = true;
    bool use_lr = true;

    std::string prompt = "tissue section with spatially resolved gene expression";
    uint64_t seed = 0;
    int log_every = 10;
    int checkpoint_every = 0;  // 0 = only at the end
    int eval_tiles = 8;        // test tiles used for validation
};

// Serialization (full nested schema).
std::string to_json_text(const TrainConfig& cfg);

// Loads a config file on top of the defaults. Throws std::invalid_argument
// naming any key not in the schema.
TrainConfig load_config(const std::string& path);

// Applies one "dotted.key=value" override; the key must exist in the schema.
void apply_override(TrainConfig& cfg, const std::string& assignment);

// Basic sanity constraints (positive sizes, valid schedule, ...).
void validate(const TrainConfig& cfg);

}  // namespace config
}  // namespace hadmst
