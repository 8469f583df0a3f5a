#pragma once

// Gene-wise differential adversarial learning: co-expression graph, attention
// GNN over genes, channel-aware discriminator, adversarial losses.

#include <string>
#include <vector>

#include "hadmst/autograd.hpp"
#include "hadmst/nn.hpp"

namespace hadmst {
namespace gdal {

using ag::Var;

struct CoexpressionGraph {
    int num_genes = 0;
    Array weights;    // [C, C] Pearson correlations (0 where no edge, 1 on diagonal)
    Array adjacency;  // [C, C] 0/1, symmetric, self-loops set
    std::vector<std::string> gene_panel;
};

// Pearson correlations over M expression samples; edge kept iff |r| >= threshold.
// Zero-variance genes keep only their self-loop. Throws below 3 samples.
CoexpressionGraph build_coexpression_graph(const Array& expression_samples /*[M,C]*/,
                                           double threshold,
                                           std::vector<std::string> gene_panel = {});

// Attention message passing, Eq-style: H^{l+1} = sigma(sum_u a_vu W H_u) with
// a_vu = softmax over N(v) of (p.(W H_v) + q.(W H_u) + s * corr_vu).
class GeneGnn {
  public:
    GeneGnn(nn::ParamStore& ps, const std::string& prefix, int d_g, int layers, Rng& rng);

    Var forward(const CoexpressionGraph& graph, const Var& h0) const;

    // Attention matrices of the last forward call (one [C,C] per layer);
    // rows sum to 1 over the neighborhood.
    const std::vector<Array>& last_attention() const { return last_attention_; }

    int layers() const { return (int)w_.size(); }
    // Test hooks: layer parameters.
    Var layer_weight(int l) const { return w_[l]; }
    Var attn_self(int l) const { return p_[l]; }
    Var attn_neigh(int l) const { return q_[l]; }
    Var corr_scale(int l) const { return s_[l]; }

  private:
    std::vector<Var> w_;  // [d_g, d_g]
    std::vector<Var> p_, q_;  // [d_g, 1]
    std::vector<Var> s_;      // [1]
    mutable std::vector<Array> last_attention_;
};

// Shared conv patch encoder per gene channel plus a projection term
// <proj(gene_embed_c), patch feature>; scores per channel and patch.
class ChannelDiscriminator {
  public:
    ChannelDiscriminator(nn::ParamStore& ps, const std::string& prefix, int d_g, Rng& rng,
                         int patch = 32);

    // st_map: [C, H, W] in model space; gene_embeds: [C, d_g]. Returns [C, P].
    Var discriminate(const Var& st_map, const Var& gene_embeds) const;

    int patch() const { return patch_; }

  private:
    std::vector<nn::Conv2d> downs_;
    nn::Conv2d score_;     // 1x1 feature -> 1
    nn::Linear embed_proj_;  // d_g -> feature width
    int patch_;
    int feat_width_;
};

// Non-saturating logistic GAN losses.
std::pair<Var, Var> adversarial_losses_op(const Var& real_scores, const Var& fake_scores);
std::pair<double, double> adversarial_losses(const Array& real_scores,
                                             const Array& fake_scores);

// Gene embeddings -> per-channel scale/shift of the fused condition maps
// (zero-initialized: identity at start).
class GeneContextFuser {
  public:
    GeneContextFuser(nn::ParamStore& ps, const std::string& prefix, int d_g, int d_cond,
                     Rng& rng);
    Var fuse(const Var& gene_embeds, const Var& cond_fused) const;

  private:
    nn::Linear head_;  // d_g -> 2*d_cond, zero-init
    int d_cond_;
};

}  // namespace gdal
}  // namespace hadmst
