#include "hadmst/model.hpp"

#include <cmath>

namespace hadmst {

namespace diff {

Array sample_loop(const std::vector<int>& shape, const DiffusionSchedule& sched,
                  const std::function<Array(const Array&, int)>& predict_eps, Rng& rng) {
    Array x = rng.normal_array(shape);
    for (int t = sched.T; t >= 1; --t) {
        Array eps = predict_eps(x, t);
        check_same_shape(x, eps, "sample_loop");
        if (!all_finite(eps) || !all_finite(x))
            throw std::runtime_error("sampling produced a non-finite value at timestep " +
                                     std::to_string(t));
        // static thresholding: clamp the implied clean sample to the data range
        // and re-derive the noise estimate, which keeps the chain on-manifold
        double sa = std::sqrt(sched.alpha_bar_at(t));
        double sb = std::sqrt(1.0 - sched.alpha_bar_at(t));
        for (long i = 0; i < x.numel(); ++i) {
            double x0_hat = std::clamp((x[i] - sb * eps[i]) / sa, -1.0, 1.0);
            eps[i] = (x[i] - sa * x0_hat) / sb;
        }
        x = p_sample_step_from_eps(x, eps, t, sched, rng);
    }
    for (double& v : x.v) v = std::clamp(v, -1.0, 1.0);
    return x;
}

}  // namespace diff

namespace model {

Array timestep_embedding(int t, int dim) {
    if (dim < 2 || dim % 2 != 0)
        throw std::invalid_argument("timestep_embedding: dim must be even and >= 2");
    Array e({dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / (half - 1 > 0 ? half - 1 : 1));
        e[i] = std::sin(t * freq);
        e[half + i] = std::cos(t * freq);
    }
    return e;
}

// ---- ConditionFuser ----

ConditionFuser::ConditionFuser(nn::ParamStore& ps, const std::string& prefix,
                               const ModelConfig& cfg, Rng& rng)
    : cfg_(cfg) {
    null_token_ = ps.add(prefix + ".null_token", rng.normal_array({cfg.d_lr}, 0.0, 0.02));
    mix_ = nn::Conv2d(ps, prefix + ".mix", cfg.hsd.out_channels + cfg.d_lr, cfg.d_cond, 1, 1,
                      0, rng);
    t_proj1_ = nn::Linear(ps, prefix + ".t1", cfg.t_embed, cfg.d_cond, rng);
    t_proj2_ = nn::Linear(ps, prefix + ".t2", cfg.d_cond, 2 * cfg.d_cond, rng,
                          /*zero_init=*/true);
}

Var ConditionFuser::fuse_base(const Var& f_m, const Var& lr_feat, int n, int fh,
                              int fw) const {
    Var lr_up;
    if (lr_feat)
        lr_up = ag::bilinear_resize(lr_feat, fh, fw);
    else
        lr_up = ag::tile_chan(null_token_, n, fh, fw);
    return mix_.forward(ag::concat_channels({f_m, lr_up}));
}

Var ConditionFuser::apply_time(const Var& base, int t, int n) const {
    Array te = timestep_embedding(t, cfg_.t_embed);
    Var rows = ag::repeat_rows(ag::constant(Array({1, cfg_.t_embed}, te.v)), n);
    Var st = t_proj2_.forward(ag::silu(t_proj1_.forward(rows)));  // [N, 2*d_cond]
    Var s = ag::slice_cols(st, 0, cfg_.d_cond);
    Var sh = ag::slice_cols(st, cfg_.d_cond, 2 * cfg_.d_cond);
    return ag::film(base, s, sh);
}

// ---- Denoiser ----

Var Denoiser::ResBlock::forward(const Var& x, const Var& temb_rows) const {
    Var h = c1.forward(ag::silu(n1.forward(x)));
    h = ag::add_sample_chan(h, temb.forward(temb_rows));
    h = c2.forward(ag::silu(n2.forward(h)));
    Var s = has_skip ? skip.forward(x) : x;
    return ag::add(h, s);
}

Denoiser::ResBlock Denoiser::make_block(nn::ParamStore& ps, const std::string& name, int cin,
                                        int cout, int t_dim, Rng& rng) {
    ResBlock b;
    b.n1 = nn::GroupNorm(ps, name + ".n1", cin, 8);
    b.c1 = nn::Conv2d(ps, name + ".c1", cin, cout, 3, 1, 1, rng);
    b.temb = nn::Linear(ps, name + ".temb", t_dim, cout, rng);
    b.n2 = nn::GroupNorm(ps, name + ".n2", cout, 8);
    b.c2 = nn::Conv2d(ps, name + ".c2", cout, cout, 3, 1, 1, rng, /*zero_init=*/true);
    if (cin != cout) {
        b.skip = nn::Conv2d(ps, name + ".skip", cin, cout, 1, 1, 0, rng);
        b.has_skip = true;
    }
    return b;
}

Denoiser::Denoiser(nn::ParamStore& ps, const std::string& prefix, const ModelConfig& cfg,
                   Rng& rng)
    : cfg_(cfg) {
    if (cfg.unet_widths.size() != 3)
        throw std::invalid_argument("denoiser: expects exactly 3 width levels");
    for (int w : cfg.unet_widths)
        if (w % 8 != 0) throw std::invalid_argument("denoiser: widths must be multiples of 8");
    if (cfg.hr_size % 4 != 0)
        throw std::invalid_argument("denoiser: hr_size must be a multiple of 4");
    int w0 = cfg.unet_widths[0], w1 = cfg.unet_widths[1], w2 = cfg.unet_widths[2];
    int td = cfg.t_embed;
    in_ = nn::Conv2d(ps, prefix + ".in", cfg.genes, w0, 3, 1, 1, rng);
    enc0_ = make_block(ps, prefix + ".enc0", w0, w0, td, rng);
    down1_ = nn::Conv2d(ps, prefix + ".down1", w0, w1, 3, 2, 1, rng);
    enc1_ = make_block(ps, prefix + ".enc1", w1, w1, td, rng);
    down2_ = nn::Conv2d(ps, prefix + ".down2", w1, w2, 3, 2, 1, rng);
    cond_in0_ = nn::Conv2d(ps, prefix + ".cond_in0", cfg.d_cond, w0, 1, 1, 0, rng);
    cond_in1_ = nn::Conv2d(ps, prefix + ".cond_in1", cfg.d_cond, w1, 1, 1, 0, rng);
    cond_in_ = nn::Conv2d(ps, prefix + ".cond_in", cfg.d_cond, w2, 1, 1, 0, rng);
    enc2_ = make_block(ps, prefix + ".enc2", w2, w2, td, rng);
    mid_ = make_block(ps, prefix + ".mid", w2, w2, td, rng);
    up1_ = nn::Conv2d(ps, prefix + ".up1", w2, w1, 3, 1, 1, rng);
    dec1_ = make_block(ps, prefix + ".dec1", w1, w1, td, rng);
    up0_ = nn::Conv2d(ps, prefix + ".up0", w1, w0, 3, 1, 1, rng);
    dec0_ = make_block(ps, prefix + ".dec0", w0, w0, td, rng);
    out_norm_ = nn::GroupNorm(ps, prefix + ".out_norm", w0, 8);
    out_ = nn::Conv2d(ps, prefix + ".out", w0, cfg.genes, 3, 1, 1, rng, /*zero_init=*/true);
}

Var Denoiser::forward(const Var& x_t, const Var& cond, int t) const {
    int n = x_t->value.shape[0];
    int h = x_t->value.shape[2], w = x_t->value.shape[3];
    if (cond->value.shape[2] != h / 4 || cond->value.shape[3] != w / 4)
        throw std::invalid_argument("denoiser: condition must be at 1/4 input resolution");
    Array te = timestep_embedding(t, cfg_.t_embed);
    Var trows = ag::repeat_rows(ag::constant(Array({1, cfg_.t_embed}, te.v)), n);

    // condition injected at every resolution (1x1 projections of the fused map)
    Var c4 = cond;
    Var c2 = ag::bilinear_resize(cond, h / 2, w / 2);
    Var c1 = ag::bilinear_resize(cond, h, w);
    Var e0 = enc0_.forward(ag::add(in_.forward(x_t), cond_in0_.forward(c1)), trows);
    Var e1 = enc1_.forward(ag::add(down1_.forward(e0), cond_in1_.forward(c2)), trows);
    Var d2 = ag::add(down2_.forward(e1), cond_in_.forward(c4));
    Var e2 = enc2_.forward(d2, trows);                            // [N,w2,H/4,W/4]
    Var m = mid_.forward(e2, trows);
    Var u1 = up1_.forward(ag::bilinear_resize(m, h / 2, w / 2));
    Var x1 = dec1_.forward(ag::add(u1, e1), trows);
    Var u0 = up0_.forward(ag::bilinear_resize(x1, h, w));
    Var x0 = dec0_.forward(ag::add(u0, e0), trows);
    return out_.forward(ag::silu(out_norm_.forward(x0)));
}

// ---- HadmstModel ----

HadmstModel::HadmstModel(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    sched_ = diff::build_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
    Rng root = Rng::seeded(seed);
    Rng r_sem = root.child(1), r_lr = root.child(2), r_fuse = root.child(3),
        r_unet = root.child(4), r_gnn = root.child(5), r_disc = root.child(6),
        r_embed = root.child(7);
    semantic_ = std::make_unique<hsd::SemanticEncoder>(ps_g_, "hsd", cfg.hsd, r_sem);
    lr_enc_ = std::make_unique<cmsa::LrEncoder>(ps_g_, "lr_enc", cfg.genes, cfg.d_lr, r_lr);
    fuser_ = std::make_unique<ConditionFuser>(ps_g_, "fuser", cfg, r_fuse);
    denoiser_ = std::make_unique<Denoiser>(ps_g_, "unet", cfg, r_unet);
    gnn_ = std::make_unique<gdal::GeneGnn>(ps_g_, "gnn", cfg.d_gene, cfg.gnn_layers, r_gnn);
    gene_fuser_ = std::make_unique<gdal::GeneContextFuser>(ps_g_, "gene_fuser", cfg.d_gene,
                                                           cfg.d_cond, r_gnn);
    align_proj_ = nn::Conv2d(ps_g_, "align_proj", cfg.hsd.out_channels, cfg.d_lr, 1, 1, 0,
                             r_fuse);
    gene_embed_ = ps_g_.add("gene_embed", r_embed.normal_array({cfg.genes, cfg.d_gene}, 0.0,
                                                               0.1));
    disc_ = std::make_unique<gdal::ChannelDiscriminator>(ps_d_, "disc", cfg.d_gene, r_disc,
                                                         cfg.disc_patch);
}

Var HadmstModel::gene_context(const gdal::CoexpressionGraph& graph) const {
    if (graph.num_genes != cfg_.genes)
        throw std::invalid_argument("gene_context: graph gene count != model gene count");
    return gnn_->forward(graph, gene_embed_);
}

ConditionBundle HadmstModel::build_condition(const Var& morpho, const Var& lr, int t,
                                             const hsd::PromptEmbedding& prompt,
                                             bool prompt_fusion,
                                             const gdal::CoexpressionGraph* graph) const {
    if (morpho->value.rank() != 4 || morpho->value.shape[1] != 4)
        throw std::invalid_argument("build_condition: morphology input must be [N,4,H,W]");
    int n = morpho->value.shape[0];
    int fh = morpho->value.shape[2] / 4, fw = morpho->value.shape[3] / 4;
    Var f_m = semantic_->encode(morpho, prompt, prompt_fusion);
    ConditionBundle out;
    out.morph_features = f_m;
    if (lr) {
        out.lr_features = lr_enc_->encode_map(lr);
        out.lr_present = true;
    }
    Var base = fuser_->fuse_base(f_m, out.lr_features, n, fh, fw);
    if (graph) base = gene_fuser_->fuse(gene_context(*graph), base);
    out.cond = fuser_->apply_time(base, t, n);
    return out;
}

Var HadmstModel::predict_eps(const Var& x_t, const ConditionBundle& cond, int t) const {
    // The network predicts v = sqrt(abar)*eps - sqrt(1-abar)*x0; in v terms the
    // conditional structure keeps O(1) loss weight at every noise level (plain
    // eps-MSE scales it by abar_t, which vanishes at high t). Convert back so
    // the schedule and samplers stay in epsilon terms throughout.
    Var v = denoiser_->forward(x_t, cond.cond, t);
    double sa = std::sqrt(sched_.alpha_bar_at(t));
    double sb = std::sqrt(1.0 - sched_.alpha_bar_at(t));
    return ag::add(ag::scale(v, sa), ag::scale(x_t, sb));
}

Var HadmstModel::align_features(const Var& morph_features) const {
    return align_proj_.forward(morph_features);
}

Array HadmstModel::sample(const Array& morpho, const std::optional<Array>& lr,
                          const hsd::PromptEmbedding& prompt, bool prompt_fusion, Rng& rng,
                          const gdal::CoexpressionGraph* graph) const {
    ag::NoGradGuard ng;
    if (morpho.rank() != 4) throw std::invalid_argument("sample: morphology must be [N,4,H,W]");
    int n = morpho.shape[0], h = morpho.shape[2], w = morpho.shape[3];
    Var m = ag::constant(morpho);
    Var lr_feat;
    if (lr) lr_feat = lr_enc_->encode_map(ag::constant(*lr));
    Var f_m = semantic_->encode(m, prompt, prompt_fusion);
    Var base = fuser_->fuse_base(f_m, lr_feat, n, h / 4, w / 4);
    if (graph) base = gene_fuser_->fuse(gene_context(*graph), base);

    auto predict = [&](const Array& x_t, int t) {
        ConditionBundle b;
        b.cond = fuser_->apply_time(base, t, n);
        return predict_eps(ag::constant(x_t), b, t)->value;
    };
    return diff::sample_loop({n, cfg_.genes, h, w}, sched_, predict, rng);
}

}  // namespace model
}  // namespace hadmst
