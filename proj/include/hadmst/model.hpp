#pragma once

// The conditional denoising model: condition fusion (morphology + LR-ST +
// timestep + gene context), the U-Net noise predictor, and the aggregate that
// wires every module together.

#include <functional>
#include <optional>
#include <string>

#include "hadmst/cmsa.hpp"
#include "hadmst/diffusion.hpp"
#include "hadmst/gdal.hpp"
#include "hadmst/hsd.hpp"
#include "hadmst/nn.hpp"

namespace hadmst {
namespace model {

using ag::Var;

struct ModelConfig {
    int genes = 8;
    int hr_size = 64;
    int lr_size = 6;

    // diffusion schedule
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    hsd::HsdConfig hsd;       // morphology encoder
    int d_lr = 32;            // LR-ST feature channels
    int d_cond = 64;          // fused condition channels (at hr/4 resolution)
    int t_embed = 32;         // sinusoidal timestep embedding width
    std::vector<int> unet_widths = {16, 32, 48};

    int d_gene = 16;          // gene embedding width for the co-expression GNN
    int gnn_layers = 2;
    int disc_patch = 32;      // discriminator patch size
};

// Fixed sinusoidal embedding of an integer timestep, [dim].
Array timestep_embedding(int t, int dim);

struct ConditionBundle {
    Var cond;             // [N, d_cond, H/4, W/4]
    Var morph_features;   // [N, hsd.out_channels, H/4, W/4] (psi before fusion)
    Var lr_features;      // [N, d_lr, lr_h, lr_w] (alignment features; null token if absent)
    bool lr_present = false;
};

// Builds c_t = g_t(psi(m), phi(s~)): concatenates the morphology feature with
// the upsampled LR-ST feature (or a learned null token when the LR modality is
// missing), mixes with a 1x1 conv and modulates by the timestep embedding.
class ConditionFuser {
  public:
    ConditionFuser(nn::ParamStore& ps, const std::string& prefix, const ModelConfig& cfg,
                   Rng& rng);

    // f_m: [N, hsd.out_channels, H/4, W/4]; lr_feat empty Var -> null token.
    // The timestep-independent part (so sampling can reuse it across steps):
    Var fuse_base(const Var& f_m, const Var& lr_feat, int n, int fh, int fw) const;
    // Timestep modulation of the fused base.
    Var apply_time(const Var& base, int t, int n) const;
    Var fuse(const Var& f_m, const Var& lr_feat, int t, int n, int fh, int fw) const {
        return apply_time(fuse_base(f_m, lr_feat, n, fh, fw), t, n);
    }

    Var null_token() const { return null_token_; }

  private:
    ModelConfig cfg_;
    Var null_token_;          // [d_lr]
    nn::Conv2d mix_;          // (hsd_out + d_lr) -> d_cond, 1x1
    nn::Linear t_proj1_, t_proj2_;  // t-embedding MLP -> 2*d_cond (FiLM)
};

// Small U-Net over HR maps with condition injection at 1/4 resolution and a
// zero-init output head (the initial prediction is exactly zero noise).
class Denoiser {
  public:
    Denoiser(nn::ParamStore& ps, const std::string& prefix, const ModelConfig& cfg, Rng& rng);

    // x_t: [N, genes, H, W]; cond: [N, d_cond, H/4, W/4] -> eps_hat, same shape as x_t.
    Var forward(const Var& x_t, const Var& cond, int t) const;

  private:
    struct ResBlock {
        nn::GroupNorm n1, n2;
        nn::Conv2d c1, c2;  // c2 zero-init
        nn::Linear temb;    // t embedding -> channel bias
        nn::Conv2d skip;    // 1x1 when channel count changes
        bool has_skip = false;
        Var forward(const Var& x, const Var& temb_rows) const;
    };
    ResBlock make_block(nn::ParamStore& ps, const std::string& name, int cin, int cout,
                        int t_dim, Rng& rng);

    ModelConfig cfg_;
    nn::Conv2d in_;
    ResBlock enc0_, enc1_, enc2_, mid_, dec1_, dec0_;
    nn::Conv2d down1_, down2_, up1_, up0_;
    nn::Conv2d cond_in0_, cond_in1_, cond_in_;  // 1x1 injections at H, H/2, H/4
    nn::GroupNorm out_norm_;
    nn::Conv2d out_;      // zero-init
};

// Everything the generator and discriminator need, in two parameter stores.
class HadmstModel {
  public:
    HadmstModel(const ModelConfig& cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    const diff::DiffusionSchedule& schedule() const { return sched_; }

    nn::ParamStore& gen_params() { return ps_g_; }
    nn::ParamStore& disc_params() { return ps_d_; }
    const nn::ParamStore& gen_params() const { return ps_g_; }
    const nn::ParamStore& disc_params() const { return ps_d_; }

    const hsd::SemanticEncoder& semantic() const { return *semantic_; }
    const cmsa::LrEncoder& lr_encoder() const { return *lr_enc_; }
    const gdal::GeneGnn& gnn() const { return *gnn_; }
    const gdal::ChannelDiscriminator& discriminator() const { return *disc_; }

    // Refined gene embeddings [genes, d_gene] through the co-expression GNN.
    Var gene_context(const gdal::CoexpressionGraph& graph) const;

    // morpho: [N,4,H,W]; lr: [N,genes,h,w] or empty for --no-lr.
    // When `graph` is given the pooled gene context further modulates the
    // condition (identity at init).
    ConditionBundle build_condition(const Var& morpho, const Var& lr, int t,
                                    const hsd::PromptEmbedding& prompt, bool prompt_fusion,
                                    const gdal::CoexpressionGraph* graph = nullptr) const;

    // eps_hat for one batch and timestep.
    Var predict_eps(const Var& x_t, const ConditionBundle& cond, int t) const;

    // Projects morphology features into the LR-ST feature space for the
    // cross-modal alignment loss.
    Var align_features(const Var& morph_features) const;

    // Full reverse-process sampling (no tape). morpho/lr as in build_condition.
    Array sample(const Array& morpho, const std::optional<Array>& lr,
                 const hsd::PromptEmbedding& prompt, bool prompt_fusion, Rng& rng,
                 const gdal::CoexpressionGraph* graph = nullptr) const;

    hsd::PromptEmbedding embed_prompt(const std::string& prompt,
                                      hsd::PromptBackend* backend = nullptr) const {
        return semantic_->embed_prompt(prompt, backend);
    }

  private:
    ModelConfig cfg_;
    diff::DiffusionSchedule sched_;
    nn::ParamStore ps_g_, ps_d_;
    std::unique_ptr<hsd::SemanticEncoder> semantic_;
    std::unique_ptr<cmsa::LrEncoder> lr_enc_;
    std::unique_ptr<ConditionFuser> fuser_;
    std::unique_ptr<Denoiser> denoiser_;
    std::unique_ptr<gdal::GeneGnn> gnn_;
    std::unique_ptr<gdal::GeneContextFuser> gene_fuser_;
    std::unique_ptr<gdal::ChannelDiscriminator> disc_;
    nn::Conv2d align_proj_;  // 1x1: hsd.out_channels -> d_lr
    Var gene_embed_;  // [genes, d_gene] learned base embeddings
};

}  // namespace model

namespace diff {

// Generic reverse-process loop: starts from standard normal noise, applies the
// predictor at every timestep, clamps the final sample to [-1, 1]. Throws if a
// non-finite value appears, naming the offending timestep.
Array sample_loop(const std::vector<int>& shape, const DiffusionSchedule& sched,
                  const std::function<Array(const Array&, int)>& predict_eps, Rng& rng);

}  // namespace diff
}  // namespace hadmst
