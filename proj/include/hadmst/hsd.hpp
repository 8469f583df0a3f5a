#pragma once

// H&E-driven semantic distillation: morphology + segmentation + tissue prompt
// -> conditioning feature psi(m).

#include <memory>
#include <optional>
#include <string>

#include "hadmst/autograd.hpp"
#include "hadmst/nn.hpp"

namespace hadmst {
namespace hsd {

using ag::Var;

struct HistologyTile {
    Array rgb;  // [3, H, W] in [0,1]
    double pixel_size_um = 10.0;
};

struct SegMask {
    Array mask;  // [1, H, W], values in {0,1}
};

struct PromptEmbedding {
    Array vector;  // [d_text], unit L2 norm
    enum Source { kStub, kExternal } source = kStub;
    std::string prompt_text;
};

// Adapter contract for an external language-model embedding provider.
// Failures must degrade to the deterministic stub.
class PromptBackend {
  public:
    virtual ~PromptBackend() = default;
    virtual std::vector<double> embed(const std::string& prompt) = 0;
};

// Fixed-threshold stain-proxy segmentation: mask = 1 where (1 - mean RGB) > theta.
SegMask segment_cells(const HistologyTile& tile, double theta = 0.5);

// Deterministic stub embedding from a seeded hash of the normalized prompt.
Array stub_prompt_vector(const std::string& prompt, int d_text);

struct HsdConfig {
    int patch = 16;
    int width = 128;     // transformer width
    int layers = 4;
    int heads = 4;
    int d_text = 32;
    int out_channels = 96;  // channels of F_m (at 1/4 input resolution)
};

class SemanticEncoder {
  public:
    SemanticEncoder(nn::ParamStore& ps, const std::string& prefix, const HsdConfig& cfg,
                    Rng& rng);

    // x: [N, 4, H, W] (RGB + seg). Returns F_m: [N, out_channels, H/4, W/4].
    Var encode_morphology(const Var& x) const;

    // Embeds via the stub, or via `backend` when given (falling back to the
    // stub with a warning on failure). Empty prompt -> invalid_argument.
    PromptEmbedding embed_prompt(const std::string& prompt,
                                 PromptBackend* backend = nullptr) const;

    // FiLM modulation of F_m by the prompt embedding (identity at init).
    Var fuse_semantics(const Var& f_m, const PromptEmbedding& e_text) const;

    // psi(m) = fuse_semantics(encode_morphology(x), prompt); with the prompt
    // fusion disabled this is plain F_m.
    Var encode(const Var& x, const PromptEmbedding& e_text, bool prompt_fusion_on = true) const;

    // Test hooks into the patch pipeline.
    Var patch_tokens_with_pos(const Var& x, int sample) const;  // [Np, width]
    Var transformer_forward(const Var& tokens) const;

    const HsdConfig& config() const { return cfg_; }

  private:
    HsdConfig cfg_;
    // conv stem (keeps fine spatial detail at 1/4 resolution)
    nn::Conv2d stem1_, stem2_, stem3_;
    // patch transformer
    nn::Conv2d patch_embed_;
    struct Block {
        nn::LayerNorm ln1, ln2;
        nn::Linear qkv, proj, fc1, fc2;
    };
    std::vector<Block> blocks_;
    // fusion of stem + token grid
    nn::Conv2d merge_;
    // prompt projection (fixed, seeded) and zero-init FiLM head
    Array prompt_proj_;  // [d_text, d_text]
    nn::Linear film_;    // d_text -> 2*out_channels, zero-init

  public:
    // Fixed 2-D sinusoidal positional encoding for an Hp x Wp token grid.
    static Array positional_encoding(int hp, int wp, int width);
};

}  // namespace hsd
}  // namespace hadmst
