#include "hadmst/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "hadmst/metrics.hpp"
#include "json.hpp"

namespace hadmst {
namespace train {

using nlohmann::json;

Var diffusion_loss(const Var& eps_hat, const Var& eps) {
    return ag::mean_all(ag::square(ag::sub(eps_hat, eps)));
}

namespace {

void check_term(double v, const char* term) {
    if (!std::isfinite(v))
        throw std::runtime_error(std::string("training diverged: ") + term +
                                 " is non-finite");
}

Array stack(const std::vector<Array>& xs) {
    std::vector<int> shape = xs[0].shape;
    shape.insert(shape.begin(), (int)xs.size());
    Array out(shape);
    long per = xs[0].numel();
    for (size_t i = 0; i < xs.size(); ++i)
        std::copy(xs[i].v.begin(), xs[i].v.end(), out.v.begin() + (long)i * per);
    return out;
}

Array nearest_upsample(const Array& lr, int h, int w) {
    int c = lr.shape[0], lh = lr.shape[1], lw = lr.shape[2];
    Array out({c, h, w});
    for (int g = 0; g < c; ++g)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                int sy = std::min(lh - 1, (int)((y + 0.5) * lh / h));
                int sx = std::min(lw - 1, (int)((x + 0.5) * lw / w));
                out.v[((size_t)g * h + y) * w + x] = lr.v[((size_t)g * lh + sy) * lw + sx];
            }
    return out;
}

Array bilinear_upsample(const Array& lr, int h, int w) {
    ag::NoGradGuard ng;
    int c = lr.shape[0];
    Var v = ag::bilinear_resize(ag::constant(Array({1, c, lr.shape[1], lr.shape[2]}, lr.v)),
                                h, w);
    return Array({c, h, w}, v->value.v);
}

}  // namespace

Trainer::Trainer(const config::TrainConfig& cfg, const data::Dataset& ds,
                 const std::string& out_dir)
    : cfg_(cfg), ds_(ds), out_dir_(out_dir) {
    config::validate(cfg);
    const auto& m = ds.manifest;
    if ((int)m.gene_panel.size() != cfg.model.genes)
        throw std::invalid_argument("trainer: config genes (" +
                                    std::to_string(cfg.model.genes) +
                                    ") != dataset panel size (" +
                                    std::to_string(m.gene_panel.size()) + ")");
    if (m.hr_size != cfg.model.hr_size || m.lr_size != cfg.model.lr_size)
        throw std::invalid_argument("trainer: config tile geometry does not match dataset");
    if (m.train_split.empty()) throw std::invalid_argument("trainer: empty train split");
    std::filesystem::create_directories(out_dir_);

    model_ = std::make_unique<model::HadmstModel>(cfg.model, cfg.seed);
    prompt_ = model_->embed_prompt(cfg.prompt);

    if (cfg.use_gdal) {
        // gene co-expression over per-tile mean expression of the train split
        int mt = (int)m.train_split.size();
        Array samples({mt, cfg.model.genes});
        for (int i = 0; i < mt; ++i) {
            const Array& hr = ds.tiles[m.train_split[i]].hr_raw;
            long hw = hr.numel() / cfg.model.genes;
            for (int g = 0; g < cfg.model.genes; ++g) {
                double s = 0;
                for (long k = 0; k < hw; ++k) s += hr.v[(size_t)g * hw + k];
                samples.at(i, g) = s / hw;
            }
        }
        graph_ = gdal::build_coexpression_graph(samples, cfg.graph_threshold, m.gene_panel);
    }

    std::vector<Var> gparams, dparams;
    for (auto& name : model_->gen_params().order())
        gparams.push_back(model_->gen_params().get(name));
    for (auto& name : model_->disc_params().order())
        dparams.push_back(model_->disc_params().get(name));
    opt_g_ = std::make_unique<nn::AdamW>(std::move(gparams), cfg.lr, cfg.weight_decay);
    opt_d_ = std::make_unique<nn::AdamW>(std::move(dparams), cfg.lr, cfg.weight_decay);
    if (cfg_.ema_decay > 0)
        for (auto& [k, v] : model_->gen_params().all()) ema_.emplace(k, v->value);
}

void Trainer::ema_update() {
    if (ema_.empty()) return;
    double d = cfg_.ema_decay;
    for (auto& [k, v] : model_->gen_params().all()) {
        Array& e = ema_.at(k);
        for (long i = 0; i < e.numel(); ++i) e[i] = d * e[i] + (1.0 - d) * v->value[i];
    }
}

void Trainer::ema_swap() {
    for (auto& [k, v] : model_->gen_params().all())
        if (auto it = ema_.find(k); it != ema_.end()) std::swap(it->second.v, v->value.v);
}

Trainer::Prepared Trainer::prepare(int tile_id) const {
    const data::Tile& t = ds_.tiles.at(tile_id);
    int h = t.he.rgb.shape[1], w = t.he.rgb.shape[2];
    Prepared p;
    p.morpho = Array({4, h, w});
    std::copy(t.he.rgb.v.begin(), t.he.rgb.v.end(), p.morpho.v.begin());
    std::copy(t.seg.v.begin(), t.seg.v.end(), p.morpho.v.begin() + (long)3 * h * w);
    p.x0 = data::normalize_expression(t.hr_raw, ds_.manifest);
    p.lr = data::normalize_expression(t.lr_raw, ds_.manifest);
    return p;
}

Var Trainer::contrastive_term(const model::ConditionBundle& bundle, int n) const {
    int lh = cfg_.model.lr_size, lw = cfg_.model.lr_size;
    // morphology features pooled onto the LR region grid, in LR feature space
    Var fm = ag::area_resize(model_->align_features(bundle.morph_features), lh, lw);
    Var fm_rows = ag::nchw_to_rows(fm);                  // [N*lh*lw, d_lr]
    Var fs_rows = ag::nchw_to_rows(bundle.lr_features);  // [N*lh*lw, d_lr]
    int per = lh * lw;
    Var total;
    for (int i = 0; i < n; ++i) {
        Var a = ag::slice_axis0(fm_rows, i * per, (i + 1) * per);
        Var b = ag::slice_axis0(fs_rows, i * per, (i + 1) * per);
        Var c = ag::cosine_matrix_op(a, b, 1e-8);
        Var d = ag::euclidean_matrix_op(a, b);
        cmsa::PairSelection pairs = cmsa::select_pairs(c->value);
        Var l = cmsa::contrastive_loss_op(c, d, pairs, cfg_.contrastive);
        total = total ? ag::add(total, l) : l;
    }
    return ag::scale(total, 1.0 / n);
}

StepStats Trainer::train_step(const std::vector<int>& tile_ids, Rng& rng) {
    int n = (int)tile_ids.size();
    std::vector<Array> morphos, x0s, lrs;
    for (int id : tile_ids) {
        Prepared p = prepare(id);
        morphos.push_back(std::move(p.morpho));
        x0s.push_back(std::move(p.x0));
        lrs.push_back(std::move(p.lr));
    }
    Array morpho = stack(morphos), x0 = stack(x0s), lr = stack(lrs);

    StepStats st;
    st.t = (int)rng.uniform_int(1, model_->schedule().T);
    const auto& sched = model_->schedule();
    Array eps = rng.normal_array(x0.shape);
    Array x_t(x0.shape);
    {
        double sa = std::sqrt(sched.alpha_bar_at(st.t));
        double sb = std::sqrt(1.0 - sched.alpha_bar_at(st.t));
        for (long i = 0; i < x0.numel(); ++i) x_t[i] = sa * x0[i] + sb * eps[i];
    }

    // ---- generator step ----
    model_->gen_params().zero_grads();
    model_->disc_params().zero_grads();
    Var vm = ag::constant(morpho);
    Var vlr = cfg_.use_lr ? ag::constant(lr) : Var();
    auto bundle = model_->build_condition(vm, vlr, st.t, prompt_, cfg_.use_hsd_fusion,
                                          cfg_.use_gdal ? &graph_ : nullptr);
    Var vxt = ag::constant(x_t);
    Var eps_hat = model_->predict_eps(vxt, bundle, st.t);
    // eps-MSE scaled by 1/abar_t == v-space MSE: uniform O(1) magnitude across
    // timesteps, so the conditional mean is learned at high noise levels too
    Var l_diff = ag::scale(diffusion_loss(eps_hat, ag::constant(eps)),
                           1.0 / sched.alpha_bar_at(st.t));
    st.l_diff = ag::scalar(l_diff);
    check_term(st.l_diff, "denoising loss");
    Var l_total = l_diff;

    if (cfg_.use_cmsa && cfg_.use_lr) {
        Var l_c = contrastive_term(bundle, n);
        st.l_contrast = ag::scalar(l_c);
        check_term(st.l_contrast, "alignment loss");
        l_total = ag::add(l_total, ag::scale(l_c, cfg_.lambda_contrast));
    }

    Var x0_hat;  // reconstruction implied by the predicted noise
    Var embeds;
    if (cfg_.use_gdal) {
        double sa = std::sqrt(sched.alpha_bar_at(st.t));
        double sb = std::sqrt(1.0 - sched.alpha_bar_at(st.t));
        x0_hat = ag::scale(ag::sub(vxt, ag::scale(eps_hat, sb)), 1.0 / sa);
        embeds = model_->gene_context(graph_);
        std::vector<Var> fakes;
        int h = cfg_.model.hr_size;
        for (int i = 0; i < n; ++i) {
            Var xi = ag::reshape(ag::slice_axis0(x0_hat, i, i + 1),
                                 {cfg_.model.genes, h, h});
            fakes.push_back(model_->discriminator().discriminate(xi, embeds));
        }
        Var fake_scores = ag::concat_axis0(fakes);
        Var l_g = ag::mean_all(ag::softplus(ag::neg(fake_scores)));
        st.l_gen_adv = ag::scalar(l_g);
        check_term(st.l_gen_adv, "generator adversarial loss");
        l_total = ag::add(l_total, ag::scale(l_g, cfg_.lambda_adv));
    }

    st.l_total = ag::scalar(l_total);
    check_term(st.l_total, "total generator loss");
    ag::backward(l_total);
    opt_g_->step();
    ema_update();

    // ---- discriminator step ----
    if (cfg_.use_gdal) {
        model_->gen_params().zero_grads();
        model_->disc_params().zero_grads();
        Var embeds_c = ag::constant(embeds->value);
        std::vector<Var> reals, fakes;
        int h = cfg_.model.hr_size;
        for (int i = 0; i < n; ++i) {
            Array xi({cfg_.model.genes, h, h});
            std::copy(x0.v.begin() + (long)i * xi.numel(),
                      x0.v.begin() + (long)(i + 1) * xi.numel(), xi.v.begin());
            reals.push_back(model_->discriminator().discriminate(ag::constant(xi), embeds_c));
            Array fi({cfg_.model.genes, h, h});
            std::copy(x0_hat->value.v.begin() + (long)i * fi.numel(),
                      x0_hat->value.v.begin() + (long)(i + 1) * fi.numel(), fi.v.begin());
            fakes.push_back(model_->discriminator().discriminate(ag::constant(fi), embeds_c));
        }
        auto [l_d, l_g_unused] = gdal::adversarial_losses_op(ag::concat_axis0(reals),
                                                             ag::concat_axis0(fakes));
        (void)l_g_unused;
        st.l_disc = ag::scalar(l_d);
        check_term(st.l_disc, "discriminator loss");
        ag::backward(l_d);
        opt_d_->step();
    }
    return st;
}

ValidationResult Trainer::train() {
    std::ofstream log(out_dir_ + "/train_log.jsonl");
    if (!log) throw std::runtime_error("trainer: cannot open log file in " + out_dir_);
    Rng root = Rng::seeded(cfg_.seed ^ 0x7261696Eull);
    std::vector<int> ids = ds_.manifest.train_split;
    auto t0 = std::chrono::steady_clock::now();

    int global_step = 0;
    for (int epoch = 1; epoch <= cfg_.epochs; ++epoch) {
        Rng erng = root.child(epoch);
        std::shuffle(ids.begin(), ids.end(), erng.engine());
        for (size_t i = 0; i < ids.size(); i += cfg_.batch) {
            std::vector<int> batch(ids.begin() + i,
                                   ids.begin() + std::min(ids.size(), i + cfg_.batch));
            StepStats st = train_step(batch, erng);
            ++global_step;
            if (global_step % cfg_.log_every == 0 || i + cfg_.batch >= ids.size()) {
                double secs = std::chrono::duration<double>(
                                  std::chrono::steady_clock::now() - t0)
                                  .count();
                json line = {{"epoch", epoch},       {"step", global_step},
                             {"t", st.t},            {"l_diff", st.l_diff},
                             {"l_contrast", st.l_contrast}, {"l_gen_adv", st.l_gen_adv},
                             {"l_disc", st.l_disc},  {"l_total", st.l_total},
                             {"elapsed_s", secs}};
                log << line.dump() << "\n";
                log.flush();
            }
        }
        if (cfg_.checkpoint_every > 0 && epoch % cfg_.checkpoint_every == 0) {
            ema_swap();
            checkpoint::save(out_dir_ + "/checkpoint_epoch_" + std::to_string(epoch) + ".ckpt",
                             *model_, {epoch, ds_.manifest.gene_panel});
            ema_swap();
        }
    }
    // the run ends on the averaged weights: checkpoint, validation and any
    // later sampling all use them
    ema_swap();
    checkpoint::save(out_dir_ + "/model.ckpt", *model_,
                     {cfg_.epochs, ds_.manifest.gene_panel});

    Rng vrng = root.child(1000003);
    ValidationResult res = validate(cfg_.eval_tiles, vrng);
    json vj = {{"tiles", res.tiles},
               {"model", {{"rmse", res.model.rmse}, {"ssim", res.model.ssim}}},
               {"nearest", {{"rmse", res.nearest.rmse}, {"ssim", res.nearest.ssim}}},
               {"bilinear", {{"rmse", res.bilinear.rmse}, {"ssim", res.bilinear.ssim}}}};
    std::ofstream vf(out_dir_ + "/validation.json");
    vf << vj.dump(2) << "\n";
    return res;
}

Array Trainer::generate_eval01(int tile_id, Rng& rng) const {
    Prepared p = prepare(tile_id);
    int h = cfg_.model.hr_size;
    Array morpho({1, 4, h, h}, p.morpho.v);
    std::optional<Array> lr;
    if (cfg_.use_lr) lr = Array({1, cfg_.model.genes, cfg_.model.lr_size, cfg_.model.lr_size},
                                p.lr.v);
    Array out = model_->sample(morpho, lr, prompt_, cfg_.use_hsd_fusion, rng,
                               cfg_.use_gdal ? &graph_ : nullptr);
    return data::model_to_eval01(Array({cfg_.model.genes, h, h}, out.v));
}

ValidationResult Trainer::validate(int max_tiles, Rng& rng) const {
    const auto& test = ds_.manifest.test_split;
    if (test.empty()) throw std::invalid_argument("validate: empty test split");
    int n = std::min<int>(max_tiles, (int)test.size());
    int h = cfg_.model.hr_size;

    // batched sampling over all evaluated tiles
    std::vector<Array> morphos, lrs;
    for (int i = 0; i < n; ++i) {
        Prepared p = prepare(test[i]);
        morphos.push_back(std::move(p.morpho));
        lrs.push_back(std::move(p.lr));
    }
    Array morpho = stack(morphos);
    std::optional<Array> lr;
    if (cfg_.use_lr) lr = stack(lrs);
    Array samples = model_->sample(morpho, lr, prompt_, cfg_.use_hsd_fusion, rng,
                                   cfg_.use_gdal ? &graph_ : nullptr);

    ValidationResult res;
    res.tiles = n;
    long per = (long)cfg_.model.genes * h * h;
    for (int i = 0; i < n; ++i) {
        const data::Tile& t = ds_.tiles[test[i]];
        Array truth = data::normalize01(t.hr_raw, ds_.manifest);
        Array pred({cfg_.model.genes, h, h});
        std::copy(samples.v.begin() + (long)i * per, samples.v.begin() + (long)(i + 1) * per,
                  pred.v.begin());
        pred = data::model_to_eval01(pred);
        Array lr01 = data::normalize01(t.lr_raw, ds_.manifest);
        Array up_n = nearest_upsample(lr01, h, h);
        Array up_b = bilinear_upsample(lr01, h, h);
        res.model.rmse += metrics::rmse(pred, truth);
        res.model.ssim += metrics::ssim(pred, truth);
        res.nearest.rmse += metrics::rmse(up_n, truth);
        res.nearest.ssim += metrics::ssim(up_n, truth);
        res.bilinear.rmse += metrics::rmse(up_b, truth);
        res.bilinear.ssim += metrics::ssim(up_b, truth);
    }
    for (MethodScores* s : {&res.model, &res.nearest, &res.bilinear}) {
        s->rmse /= n;
        s->ssim /= n;
    }
    return res;
}

}  // namespace train
}  // namespace hadmst
