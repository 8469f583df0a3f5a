#pragma once

// Training loop: composite loss (denoising + cross-modal alignment +
// adversarial), alternating discriminator updates, JSONL logging, validation
// against interpolation baselines.

#include <map>
#include <optional>
#include <string>

#include "hadmst/checkpoint.hpp"
#include "hadmst/config.hpp"
#include "hadmst/data.hpp"
#include "hadmst/model.hpp"

namespace hadmst {
namespace train {

using ag::Var;

// Mean squared error between predicted and true noise.
Var diffusion_loss(const Var& eps_hat, const Var& eps);

struct StepStats {
    double l_diff = 0, l_contrast = 0, l_gen_adv = 0, l_disc = 0, l_total = 0;
    int t = 0;
};

struct MethodScores {
    double rmse = 0, ssim = 0;
};

struct ValidationResult {
    MethodScores model, nearest, bilinear;
    int tiles = 0;
};

class Trainer {
  public:
    Trainer(const config::TrainConfig& cfg, const data::Dataset& ds,
            const std::string& out_dir);

    model::HadmstModel& model_ref() { return *model_; }
    const gdal::CoexpressionGraph& graph() const { return graph_; }

    // One optimization step over the given training-tile ids.
    StepStats train_step(const std::vector<int>& tile_ids, Rng& rng);

    // Full run; returns the final validation result.
    ValidationResult train();

    // Samples up to `max_tiles` test tiles and scores the model against
    // nearest / bilinear LR upsampling in [0,1] eval space.
    ValidationResult validate(int max_tiles, Rng& rng) const;

    // Per-sample conditional generation in eval [0,1] space.
    Array generate_eval01(int tile_id, Rng& rng) const;

  private:
    struct Prepared {
        Array morpho;  // [4,H,W] (rgb + seg)
        Array x0;      // [C,H,W] model space
        Array lr;      // [C,h,w] model space
    };
    Prepared prepare(int tile_id) const;
    Var contrastive_term(const model::ConditionBundle& bundle, int n) const;
    void ema_update();
    void ema_swap();  // exchanges generator weights with the EMA shadow

    config::TrainConfig cfg_;
    const data::Dataset& ds_;
    std::string out_dir_;
    std::unique_ptr<model::HadmstModel> model_;
    gdal::CoexpressionGraph graph_;
    hsd::PromptEmbedding prompt_;
    std::unique_ptr<nn::AdamW> opt_g_, opt_d_;
    std::map<std::string, Array> ema_;  // generator weight EMA used for sampling
};

}  // namespace train
}  // namespace hadmst
