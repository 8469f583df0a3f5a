#pragma once

// Cross-modal spatial alignment: LR-ST encoder phi(s~), similarity matrices,
// top/bottom-30% pair mining and the contrastive loss.

#include <utility>
#include <vector>

#include "hadmst/autograd.hpp"
#include "hadmst/nn.hpp"

namespace hadmst {
namespace cmsa {

using ag::Var;

struct RegionFeatures {
    Array features;                            // [N, d]
    std::vector<std::pair<int, int>> coords;   // grid (row, col) per region
};

struct PairSelection {
    std::vector<std::pair<int, int>> positives;  // (i, j) indices into the matrices
    std::vector<std::pair<int, int>> negatives;
};

struct ContrastiveParams {
    double lambda1 = 0.5;   // euclidean weight
    double lambda2 = 1.0;   // InfoNCE weight
    double tau = 0.1;       // InfoNCE temperature
    double margin = 1.0;    // euclidean hinge margin
};

// Plain-value similarity matrices (epsilon-guarded cosine).
Array cosine_matrix(const Array& fm, const Array& fs, double eps = 1e-8);
Array euclidean_matrix(const Array& fm, const Array& fs);

// Top/bottom 30% of all N*M pairs by similarity; deterministic lexicographic
// tie-break. Throws when fewer than 4 pairs exist.
PairSelection select_pairs(const Array& c);

// Differentiable loss over similarity-matrix Vars.
// L = L_cosine + lambda1*L_euclidean + lambda2*L_InfoNCE with
//   L_cosine    = mean_pos(1 - C) + mean_neg(max(0, C))
//   L_euclidean = mean_pos(D^2) + mean_neg(max(0, margin - D)^2)
//   L_InfoNCE   = -mean_pos log[ exp(C_ij/tau) /
//                  (exp(C_ij/tau) + sum_{(i,k) in neg, same i} exp(C_ik/tau)) ]
Var contrastive_loss_op(const Var& c, const Var& d, const PairSelection& pairs,
                        const ContrastiveParams& p);

// Plain-value convenience wrapper.
double contrastive_loss(const Array& c, const Array& d, const PairSelection& pairs,
                        const ContrastiveParams& p);

// Small convolutional LR-ST encoder producing per-region descriptors.
class LrEncoder {
  public:
    LrEncoder(nn::ParamStore& ps, const std::string& prefix, int genes, int d_out, Rng& rng);

    // lr: [N, C, h, w] -> feature map [N, d_out, h, w]
    Var encode_map(const Var& lr) const;

    // Region features for one sample: [h*w, d_out] row-major over the grid.
    RegionFeatures encode(const Array& lr_chw) const;

    int d_out() const { return d_out_; }

  private:
    nn::Conv2d c1_, c2_, c3_;
    int d_out_;
};

}  // namespace cmsa
}  // namespace hadmst
