// Command-line entry point: synthetic data generation, training, sampling,
// evaluation and report formatting.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "hadmst/checkpoint.hpp"
#include "hadmst/config.hpp"
#include "hadmst/data.hpp"
#include "hadmst/metrics.hpp"
#include "hadmst/png_io.hpp"
#include "hadmst/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace hadmst;

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<uint64_t> seed;
    bool no_lr = false, no_hsd_fusion = false, no_cmsa = false, no_gdal = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "JSON config file");
    cmd->add_option("--set", o.overrides, "dotted-key override, e.g. --set model.T=100");
    cmd->add_option("--seed", o.seed, "random seed (overrides config)");
    cmd->add_flag("--no-lr", o.no_lr, "run without the low-resolution expression input");
    cmd->add_flag("--no-hsd-fusion", o.no_hsd_fusion, "disable prompt fusion");
    cmd->add_flag("--no-cmsa", o.no_cmsa, "disable the cross-modal alignment loss");
    cmd->add_flag("--no-gdal", o.no_gdal, "disable the graph-adversarial branch");
}

config::TrainConfig resolve_config(const CommonOpts& o) {
    config::TrainConfig cfg;
    if (!o.config_path.empty()) cfg = config::load_config(o.config_path);
    for (auto& kv : o.overrides) config::apply_override(cfg, kv);
    if (o.seed) cfg.seed = *o.seed;
    if (o.no_lr) cfg.use_lr = false;
    if (o.no_hsd_fusion) cfg.use_hsd_fusion = false;
    if (o.no_cmsa) cfg.use_cmsa = false;
    if (o.no_gdal) cfg.use_gdal = false;
    config::validate(cfg);
    return cfg;
}

// Adopts tile geometry / panel size from the dataset so one config works for
// any corpus unless explicitly overridden.
void adapt_to_dataset(config::TrainConfig& cfg, const data::Dataset& ds) {
    cfg.model.genes = (int)ds.manifest.gene_panel.size();
    cfg.model.hr_size = ds.manifest.hr_size;
    cfg.model.lr_size = ds.manifest.lr_size;
    config::validate(cfg);
}

Array expression_heatmap_rgb(const Array& chw) {
    int c = chw.shape[0], h = chw.shape[1], w = chw.shape[2];
    Array rgb({3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double mean = 0;
            for (int g = 0; g < c; ++g) mean += chw.v[((size_t)g * h + y) * w + x];
            mean /= c;
            double col[3];
            metrics::quality_color(mean, col);
            for (int k = 0; k < 3; ++k) rgb.v[((size_t)k * h + y) * w + x] = col[k];
        }
    return rgb;
}

int cmd_synth(const std::string& out, data::SyntheticConfig scfg) {
    data::Dataset ds = data::generate_dataset(scfg);
    data::write_dataset(out, ds);
    std::cout << "wrote " << ds.tiles.size() << " tiles (" << ds.manifest.gene_panel.size()
              << " genes) to " << out << "\n";
    return 0;
}

int cmd_train(const CommonOpts& o, const std::string& data_dir, const std::string& out) {
    config::TrainConfig cfg = resolve_config(o);
    data::Dataset ds = data::read_dataset(data_dir);
    adapt_to_dataset(cfg, ds);
    fs::create_directories(out);
    {
        std::ofstream f(out + "/config.json");
        f << config::to_json_text(cfg) << "\n";
    }
    train::Trainer trainer(cfg, ds, out);
    train::ValidationResult res = trainer.train();
    std::cout << metrics::format_results_table(
        {{"model", res.model.rmse, res.model.ssim},
         {"nearest", res.nearest.rmse, res.nearest.ssim},
         {"bilinear", res.bilinear.rmse, res.bilinear.ssim}});
    return 0;
}

config::TrainConfig config_for_checkpoint(const CommonOpts& o, const std::string& ckpt) {
    CommonOpts adjusted = o;
    if (adjusted.config_path.empty()) {
        std::string side = (fs::path(ckpt).parent_path() / "config.json").string();
        if (fs::exists(side)) adjusted.config_path = side;
    }
    return resolve_config(adjusted);
}

int cmd_sample(const CommonOpts& o, const std::string& data_dir, const std::string& ckpt,
               const std::string& out, int tile) {
    config::TrainConfig cfg = config_for_checkpoint(o, ckpt);
    data::Dataset ds = data::read_dataset(data_dir);
    adapt_to_dataset(cfg, ds);
    train::Trainer trainer(cfg, ds, out);
    checkpoint::load(ckpt, trainer.model_ref(), ds.manifest.gene_panel);
    if (tile < 0) tile = ds.manifest.test_split.empty() ? 0 : ds.manifest.test_split[0];
    if (tile >= (int)ds.tiles.size())
        throw std::invalid_argument("no such tile id: " + std::to_string(tile));
    Rng rng = Rng::seeded(cfg.seed ^ 0x73616D70ull);
    Array pred = trainer.generate_eval01(tile, rng);
    fs::create_directories(out);
    std::string base = out + "/pred_tile_" + std::to_string(tile);
    data::write_array(base + ".arr", pred);
    png_io::write_png_rgb(base + ".png", expression_heatmap_rgb(pred));
    std::cout << "wrote " << base << ".arr and .png\n";
    return 0;
}

int cmd_evaluate(const CommonOpts& o, const std::string& data_dir, const std::string& ckpt,
                 const std::string& out, int max_tiles) {
    config::TrainConfig cfg = config_for_checkpoint(o, ckpt);
    data::Dataset ds = data::read_dataset(data_dir);
    adapt_to_dataset(cfg, ds);
    train::Trainer trainer(cfg, ds, out);
    checkpoint::load(ckpt, trainer.model_ref(), ds.manifest.gene_panel);
    fs::create_directories(out);

    Rng rng = Rng::seeded(cfg.seed ^ 0x6576616Cull);
    int n = std::min<int>(max_tiles, (int)ds.manifest.test_split.size());
    if (n < 1) throw std::invalid_argument("evaluate: dataset has no test tiles");

    std::vector<metrics::GeneScore> totals;
    double sum_rmse = 0, sum_ssim = 0;
    for (int i = 0; i < n; ++i) {
        int id = ds.manifest.test_split[i];
        Array pred = trainer.generate_eval01(id, rng);
        Array truth = data::normalize01(ds.tiles[id].hr_raw, ds.manifest);
        sum_rmse += metrics::rmse(pred, truth);
        sum_ssim += metrics::ssim(pred, truth);
        auto scores = metrics::per_gene_scores(pred, truth, ds.manifest.gene_panel);
        if (totals.empty()) totals = scores;
        else
            for (size_t g = 0; g < scores.size(); ++g) {
                totals[g].rmse += scores[g].rmse;
                totals[g].ssim += scores[g].ssim;
            }
        // mean local-similarity map across genes, rendered over the histology
        Array lmap = metrics::local_ssim_map(pred, truth, 4);
        int oh = lmap.shape[1], ow = lmap.shape[2];
        Array mean_map({oh, ow});
        for (int g = 0; g < lmap.shape[0]; ++g)
            for (long k = 0; k < (long)oh * ow; ++k)
                mean_map[k] += lmap.v[(size_t)g * oh * ow + k] / lmap.shape[0];
        for (double& v : mean_map.v) v = std::clamp(v, 0.0, 1.0);
        Array overlay = metrics::render_overlay(mean_map, ds.tiles[id].he.rgb);
        png_io::write_png_rgb(out + "/overlay_tile_" + std::to_string(id) + ".png", overlay);
        if (i == 0)
            metrics::write_scatter_json(out + "/scatter_tile_" + std::to_string(id) + ".json",
                                        pred, truth);
    }
    for (auto& s : totals) {
        s.rmse /= n;
        s.ssim /= n;
    }
    metrics::write_scores_csv(out + "/per_gene_metrics.csv", totals);

    nlohmann::json j = {{"tiles", n},
                        {"rmse", sum_rmse / n},
                        {"ssim", sum_ssim / n}};
    std::ofstream f(out + "/metrics.json");
    f << j.dump(2) << "\n";
    std::cout << metrics::format_results_table(
        {{ds.manifest.name, sum_rmse / n, sum_ssim / n}});
    return 0;
}

int cmd_report(const std::vector<std::string>& runs) {
    std::vector<metrics::ResultRow> rows;
    for (auto& dir : runs) {
        std::string path = fs::is_directory(dir) ? dir + "/metrics.json" : dir;
        std::ifstream f(path);
        if (!f) throw std::runtime_error("report: cannot open " + path);
        nlohmann::json j;
        f >> j;
        std::string name = j.contains("name") ? j.at("name").get<std::string>()
                                              : fs::path(dir).filename().string();
        rows.push_back({name, j.at("rmse"), j.at("ssim")});
    }
    std::cout << metrics::format_results_table(rows);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"histology-conditioned diffusion for high-resolution spatial "
                 "transcriptomics"};
    app.require_subcommand(1);

    // synth-data
    auto* synth = app.add_subcommand("synth-data", "generate a synthetic tile corpus");
    std::string synth_out;
    data::SyntheticConfig scfg;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--genes", scfg.genes, "gene panel size");
    synth->add_option("--hr-size", scfg.hr_size, "high-resolution tile size");
    synth->add_option("--lr-size", scfg.lr_size, "low-resolution grid size");
    synth->add_option("--train-tiles", scfg.train_tiles, "training tiles");
    synth->add_option("--test-tiles", scfg.test_tiles, "held-out tiles");
    synth->add_option("--seed", scfg.seed, "corpus seed");
    synth->add_option("--name", scfg.name, "dataset name");

    // train
    auto* tr = app.add_subcommand("train", "train the model");
    std::string tr_data, tr_out;
    CommonOpts tr_opts;
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    add_common(tr, tr_opts);

    // sample
    auto* sa = app.add_subcommand("sample", "generate an expression map for one tile");
    std::string sa_data, sa_ckpt, sa_out;
    int sa_tile = -1;
    CommonOpts sa_opts;
    sa->add_option("--data", sa_data, "dataset directory")->required();
    sa->add_option("--checkpoint", sa_ckpt, "trained checkpoint")->required();
    sa->add_option("--out", sa_out, "output directory")->required();
    sa->add_option("--tile", sa_tile, "tile id (default: first test tile)");
    add_common(sa, sa_opts);

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "score a checkpoint on the test split");
    std::string ev_data, ev_ckpt, ev_out;
    int ev_tiles = 8;
    CommonOpts ev_opts;
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--checkpoint", ev_ckpt, "trained checkpoint")->required();
    ev->add_option("--out", ev_out, "output directory")->required();
    ev->add_option("--tiles", ev_tiles, "number of test tiles to evaluate");
    add_common(ev, ev_opts);

    // report
    auto* rp = app.add_subcommand("report", "format metrics from one or more runs");
    std::vector<std::string> rp_runs;
    rp->add_option("--run", rp_runs, "run directory or metrics.json path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) return cmd_synth(synth_out, scfg);
        if (*tr) return cmd_train(tr_opts, tr_data, tr_out);
        if (*sa) return cmd_sample(sa_opts, sa_data, sa_ckpt, sa_out, sa_tile);
        if (*ev) return cmd_evaluate(ev_opts, ev_data, ev_ckpt, ev_out, ev_tiles);
        if (*rp) return cmd_report(rp_runs);
    } catch (const std::invalid_argument& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
