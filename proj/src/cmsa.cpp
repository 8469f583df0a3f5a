#include "hadmst/cmsa.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hadmst {
namespace cmsa {

Array cosine_matrix(const Array& fm, const Array& fs, double eps) {
    ag::NoGradGuard ng;
    return ag::cosine_matrix_op(ag::constant(fm), ag::constant(fs), eps)->value;
}

Array euclidean_matrix(const Array& fm, const Array& fs) {
    ag::NoGradGuard ng;
    return ag::euclidean_matrix_op(ag::constant(fm), ag::constant(fs))->value;
}

PairSelection select_pairs(const Array& c) {
    if (c.rank() != 2) throw std::invalid_argument("select_pairs: expects a matrix");
    int n = c.shape[0], m = c.shape[1];
    long total = (long)n * m;
    if (total < 4) throw std::invalid_argument("select_pairs: too few pairs (need >= 4)");
    for (double v : c.v)
        if (!std::isfinite(v)) throw std::invalid_argument("select_pairs: non-finite entry");
    std::vector<long> idx(total);
    std::iota(idx.begin(), idx.end(), 0);
    // descending by similarity, lexicographic (i, j) on ties
    std::stable_sort(idx.begin(), idx.end(), [&](long a, long b) {
        if (c.v[a] != c.v[b]) return c.v[a] > c.v[b];
        return a < b;
    });
    long k = (long)std::floor(0.3 * (double)total);
    PairSelection sel;
    sel.positives.reserve(k);
    sel.negatives.reserve(k);
    for (long p = 0; p < k; ++p)
        sel.positives.push_back({(int)(idx[p] / m), (int)(idx[p] % m)});
    for (long p = total - k; p < total; ++p)
        sel.negatives.push_back({(int)(idx[p] / m), (int)(idx[p] % m)});
    return sel;
}

Var contrastive_loss_op(const Var& c, const Var& d, const PairSelection& pairs,
                        const ContrastiveParams& p) {
    if (p.tau <= 0) throw std::invalid_argument("contrastive_loss: tau must be > 0");
    if (pairs.positives.empty() || pairs.negatives.empty())
        throw std::invalid_argument("contrastive_loss: empty pair sets");
    const Array& C = c->value;
    const Array& D = d->value;
    long np = (long)pairs.positives.size(), nn = (long)pairs.negatives.size();

    // negatives grouped by row for the InfoNCE denominator
    int rows = C.shape[0];
    std::vector<std::vector<int>> neg_by_row(rows);
    for (auto& [i, j] : pairs.negatives) neg_by_row[i].push_back(j);

    Array dC(C.shape), dD(D.shape);

    double pos_cos = 0, neg_cos = 0, pos_euc = 0, neg_euc = 0, l_nce = 0;
    for (auto& [i, j] : pairs.positives) {
        pos_cos += 1.0 - C.at(i, j);
        pos_euc += D.at(i, j) * D.at(i, j);
        dC.at(i, j) += -1.0 / np;
        dD.at(i, j) += p.lambda1 * 2.0 * D.at(i, j) / np;
    }
    for (auto& [i, j] : pairs.negatives) {
        neg_cos += std::max(0.0, C.at(i, j));
        if (C.at(i, j) > 0) dC.at(i, j) += 1.0 / nn;
        double hinge = std::max(0.0, p.margin - D.at(i, j));
        neg_euc += hinge * hinge;
        if (hinge > 0) dD.at(i, j) += p.lambda1 * (-2.0 * hinge) / nn;
    }
    double l_cos = pos_cos / np + neg_cos / nn;
    double l_euc = pos_euc / np + neg_euc / nn;

    // InfoNCE over positives; denominator uses same-row negatives (max-shifted)
    for (auto& [i, j] : pairs.positives) {
        double mx = C.at(i, j);
        for (int k : neg_by_row[i]) mx = std::max(mx, C.at(i, k));
        double e_pos = std::exp((C.at(i, j) - mx) / p.tau);
        double z = e_pos;
        for (int k : neg_by_row[i]) z += std::exp((C.at(i, k) - mx) / p.tau);
        l_nce += -std::log(e_pos / z);
        double gscale = p.lambda2 / ((double)np * p.tau);
        dC.at(i, j) += -gscale * (1.0 - e_pos / z);
        for (int k : neg_by_row[i])
            dC.at(i, k) += gscale * std::exp((C.at(i, k) - mx) / p.tau) / z;
    }
    l_nce /= (double)np;

    double total = l_cos + p.lambda1 * l_euc + p.lambda2 * l_nce;
    Array out({1});
    out[0] = total;
    return ag::make_node(std::move(out), {c, d}, [c, d, dC, dD](ag::Node& n) {
        double g = n.grad[0];
        if (c->requires_grad) {
            Array& gc = c->ensure_grad();
            for (long i = 0; i < gc.numel(); ++i) gc[i] += g * dC[i];
        }
        if (d->requires_grad) {
            Array& gd = d->ensure_grad();
            for (long i = 0; i < gd.numel(); ++i) gd[i] += g * dD[i];
        }
    });
}

double contrastive_loss(const Array& c, const Array& d, const PairSelection& pairs,
                        const ContrastiveParams& p) {
    ag::NoGradGuard ng;
    return ag::scalar(contrastive_loss_op(ag::constant(c), ag::constant(d), pairs, p));
}

LrEncoder::LrEncoder(nn::ParamStore& ps, const std::string& prefix, int genes, int d_out,
                     Rng& rng)
    : d_out_(d_out) {
    c1_ = nn::Conv2d(ps, prefix + ".c1", genes, 32, 3, 1, 1, rng);
    c2_ = nn::Conv2d(ps, prefix + ".c2", 32, 48, 3, 1, 1, rng);
    c3_ = nn::Conv2d(ps, prefix + ".c3", 48, d_out, 3, 1, 1, rng);
}

Var LrEncoder::encode_map(const Var& lr) const {
    return c3_.forward(ag::silu(c2_.forward(ag::silu(c1_.forward(lr)))));
}

RegionFeatures LrEncoder::encode(const Array& lr_chw) const {
    ag::NoGradGuard ng;
    int c = lr_chw.shape[0], h = lr_chw.shape[1], w = lr_chw.shape[2];
    Var x = ag::constant(Array({1, c, h, w}, lr_chw.v));
    Var f = encode_map(x);
    Var rows = ag::nchw_to_rows(f);
    RegionFeatures rf;
    rf.features = rows->value;
    rf.coords.reserve((size_t)h * w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) rf.coords.push_back({i, j});
    return rf;
}

}  // namespace cmsa
}  // namespace hadmst
