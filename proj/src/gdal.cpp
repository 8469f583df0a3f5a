#include "hadmst/gdal.hpp"

#include <cmath>

namespace hadmst {
namespace gdal {

CoexpressionGraph build_coexpression_graph(const Array& samples, double threshold,
                                           std::vector<std::string> gene_panel) {
    if (samples.rank() != 2) throw std::invalid_argument("build_coexpression_graph: [M,C]");
    int m = samples.shape[0], c = samples.shape[1];
    if (m < 3)
        throw std::invalid_argument("build_coexpression_graph: need at least 3 samples, got " +
                                    std::to_string(m));
    CoexpressionGraph g;
    g.num_genes = c;
    g.weights = Array({c, c});
    g.adjacency = Array({c, c});
    if (gene_panel.empty())
        for (int i = 0; i < c; ++i) gene_panel.push_back("gene_" + std::to_string(i));
    g.gene_panel = std::move(gene_panel);

    std::vector<double> mean(c, 0.0), sd(c, 0.0);
    for (int j = 0; j < c; ++j) {
        for (int i = 0; i < m; ++i) mean[j] += samples.at(i, j);
        mean[j] /= m;
        for (int i = 0; i < m; ++i) {
            double d = samples.at(i, j) - mean[j];
            sd[j] += d * d;
        }
        sd[j] = std::sqrt(sd[j]);
    }
    for (int a = 0; a < c; ++a) {
        g.weights.at(a, a) = 1.0;
        g.adjacency.at(a, a) = 1.0;
        for (int b = a + 1; b < c; ++b) {
            if (sd[a] <= 0 || sd[b] <= 0) continue;  // zero-variance: self-loop only
            double cov = 0;
            for (int i = 0; i < m; ++i)
                cov += (samples.at(i, a) - mean[a]) * (samples.at(i, b) - mean[b]);
            double r = cov / (sd[a] * sd[b]);
            if (std::fabs(r) >= threshold) {
                g.weights.at(a, b) = g.weights.at(b, a) = r;
                g.adjacency.at(a, b) = g.adjacency.at(b, a) = 1.0;
            }
        }
    }
    return g;
}

GeneGnn::GeneGnn(nn::ParamStore& ps, const std::string& prefix, int d_g, int layers, Rng& rng) {
    for (int l = 0; l < layers; ++l) {
        std::string lp = prefix + ".layer" + std::to_string(l);
        w_.push_back(ps.add(lp + ".w", nn::kaiming_init({d_g, d_g}, d_g, rng)));
        p_.push_back(ps.add(lp + ".p", rng.normal_array({d_g, 1}, 0.0, 0.1)));
        q_.push_back(ps.add(lp + ".q", rng.normal_array({d_g, 1}, 0.0, 0.1)));
        s_.push_back(ps.add(lp + ".s", Array({1}, 1.0)));
    }
}

Var GeneGnn::forward(const CoexpressionGraph& graph, const Var& h0) const {
    int c = graph.num_genes;
    if (h0->value.shape[0] != c)
        throw std::invalid_argument("gnn_forward: embedding row count != num_genes");
    last_attention_.clear();
    Var h = h0;
    int L = (int)w_.size();
    for (int l = 0; l < L; ++l) {
        Var hw = ag::matmul(h, ag::transpose2d(w_[l]));  // [C, d_g] rows = W H_u
        Var sv = ag::matmul(hw, p_[l]);                  // [C,1] self term
        Var su = ag::matmul(hw, q_[l]);                  // [C,1] neighbor term
        // logits[v][u] = sv[v] + su[u] + s * corr_vu
        Var logits = ag::add_colvec(
            ag::add_rowvec(
                ag::broadcast_scalar_mul(ag::constant(Array({c, c}, graph.weights.v)), s_[l]),
                ag::reshape(su, {c})),
            ag::reshape(sv, {c}));
        Var attn = ag::masked_softmax_rows(logits, graph.adjacency);
        last_attention_.push_back(attn->value);
        Var agg = ag::matmul(attn, hw);
        h = (l + 1 < L) ? ag::relu(agg) : agg;  // identity on the last layer
    }
    return h;
}

ChannelDiscriminator::ChannelDiscriminator(nn::ParamStore& ps, const std::string& prefix,
                                           int d_g, Rng& rng, int patch)
    : patch_(patch) {
    int widths[] = {16, 32, 48, 64, 64};
    int steps = 0;
    for (int p = patch; p > 1; p /= 2) ++steps;
    if ((1 << steps) != patch) throw std::invalid_argument("discriminator: patch must be 2^k");
    int cin = 1;
    for (int i = 0; i < steps; ++i) {
        int cout = widths[std::min(i, 4)];
        downs_.push_back(nn::Conv2d(ps, prefix + ".down" + std::to_string(i), cin, cout, 4, 2,
                                    1, rng));
        cin = cout;
    }
    feat_width_ = cin;
    score_ = nn::Conv2d(ps, prefix + ".score", feat_width_, 1, 1, 1, 0, rng);
    embed_proj_ = nn::Linear(ps, prefix + ".embed_proj", d_g, feat_width_, rng);
}

Var ChannelDiscriminator::discriminate(const Var& st_map, const Var& gene_embeds) const {
    if (st_map->value.rank() != 3)
        throw std::invalid_argument("discriminate: st_map must be [C,H,W]");
    int c = st_map->value.shape[0], h = st_map->value.shape[1], w = st_map->value.shape[2];
    if (gene_embeds->value.shape[0] != c)
        throw std::invalid_argument("discriminate: channel count != embedding rows");
    if (h % patch_ != 0 || w % patch_ != 0)
        throw std::invalid_argument("discriminate: size must be a multiple of the patch size");
    Var x = ag::reshape(st_map, {c, 1, h, w});  // channels as batch, shared encoder
    for (auto& d : downs_) x = ag::silu(d.forward(x));
    Var base = score_.forward(x);                          // [C,1,ph,pw]
    Var proj = embed_proj_.forward(gene_embeds);           // [C,F]
    Var dot = ag::channel_dot(x, proj);                    // [C,1,ph,pw]
    Var scores = ag::add(base, dot);
    int ph = scores->value.shape[2], pw = scores->value.shape[3];
    return ag::reshape(scores, {c, ph * pw});
}

std::pair<Var, Var> adversarial_losses_op(const Var& real_scores, const Var& fake_scores) {
    check_same_shape(real_scores->value, fake_scores->value, "adversarial_losses");
    Var l_d = ag::add(ag::mean_all(ag::softplus(ag::neg(real_scores))),
                      ag::mean_all(ag::softplus(fake_scores)));
    Var l_g = ag::mean_all(ag::softplus(ag::neg(fake_scores)));
    return {l_d, l_g};
}

std::pair<double, double> adversarial_losses(const Array& real_scores,
                                             const Array& fake_scores) {
    ag::NoGradGuard ng;
    auto [ld, lg] = adversarial_losses_op(ag::constant(real_scores), ag::constant(fake_scores));
    return {ag::scalar(ld), ag::scalar(lg)};
}

GeneContextFuser::GeneContextFuser(nn::ParamStore& ps, const std::string& prefix, int d_g,
                                   int d_cond, Rng& rng)
    : d_cond_(d_cond) {
    head_ = nn::Linear(ps, prefix + ".head", d_g, 2 * d_cond, rng, /*zero_init=*/true);
}

Var GeneContextFuser::fuse(const Var& gene_embeds, const Var& cond_fused) const {
    int c = gene_embeds->value.shape[0];
    int n = cond_fused->value.shape[0];
    // mean-pool gene embeddings, then zero-init scale/shift on the condition
    Array ones({1, c}, 1.0 / c);
    Var pooled = ag::matmul(ag::constant(ones), gene_embeds);  // [1, d_g]
    Var st = ag::repeat_rows(head_.forward(pooled), n);        // [N, 2*d_cond]
    Var s = ag::slice_cols(st, 0, d_cond_);
    Var t = ag::slice_cols(st, d_cond_, 2 * d_cond_);
    return ag::film(cond_fused, s, t);
}

}  // namespace gdal
}  // namespace hadmst
