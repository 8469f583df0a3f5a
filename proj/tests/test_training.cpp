#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "json.hpp"

#include "hadmst/checkpoint.hpp"
#include "hadmst/config.hpp"
#include "hadmst/data.hpp"
#include "hadmst/trainer.hpp"

using namespace hadmst;
namespace fs = std::filesystem;

namespace {

config::TrainConfig tiny_config() {
    config::TrainConfig c;
    c.model.genes = 4;
    c.model.hr_size = 32;
    c.model.lr_size = 4;
    c.model.T = 10;
    c.model.beta_end = 0.3;
    c.model.unet_widths = {8, 16, 24};
    c.model.d_lr = 8;
    c.model.d_cond = 16;
    c.model.t_embed = 8;
    c.model.d_gene = 8;
    c.model.gnn_layers = 1;
    c.model.disc_patch = 16;
    c.model.hsd.patch = 16;
    c.model.hsd.width = 32;
    c.model.hsd.layers = 1;
    c.model.hsd.heads = 2;
    c.model.hsd.d_text = 8;
    c.model.hsd.out_channels = 16;
    c.epochs = 1;
    c.batch = 2;
    c.lr = 1e-3;
    c.eval_tiles = 1;
    c.log_every = 1;
    return c;
}

const data::Dataset& tiny_dataset() {
    static data::Dataset ds = [] {
        data::SyntheticConfig s;
        s.genes = 4;
        s.hr_size = 32;
        s.lr_size = 4;
        s.train_tiles = 6;
        s.test_tiles = 2;
        s.seed = 42;
        return data::generate_dataset(s);
    }();
    return ds;
}

std::string tmpdir(const std::string& name) {
    std::string d = (fs::temp_directory_path() / name).string();
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::map<std::string, Array> snapshot(const nn::ParamStore& ps) {
    std::map<std::string, Array> out;
    for (auto& [k, v] : ps.all()) out[k] = v->value;
    return out;
}

}  // namespace

TEST_CASE("config: overrides, unknown keys and validation") {
    config::TrainConfig c = tiny_config();
    config::validate(c);

    config::apply_override(c, "model.T=25");
    CHECK(c.model.T == 25);
    config::apply_override(c, "lr=0.005");
    CHECK(c.lr == doctest::Approx(0.005));
    config::apply_override(c, "prompt=breast tissue");
    CHECK(c.prompt == "breast tissue");
    config::apply_override(c, "use_gdal=false");
    CHECK(!c.use_gdal);
    config::apply_override(c, "model.unet_widths=[8,8,8]");
    CHECK(c.model.unet_widths == std::vector<int>{8, 8, 8});

    try {
        config::apply_override(c, "model.tee=3");
        FAIL("expected unknown-key error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("model.tee") != std::string::npos);
    }
    CHECK_THROWS_AS(config::apply_override(c, "nonsense"), std::invalid_argument);

    config::TrainConfig bad = tiny_config();
    bad.model.T = 0;
    CHECK_THROWS_AS(config::validate(bad), std::invalid_argument);
    bad = tiny_config();
    bad.model.beta_end = 1.0;
    CHECK_THROWS_AS(config::validate(bad), std::invalid_argument);
    bad = tiny_config();
    bad.contrastive.tau = 0;
    CHECK_THROWS_AS(config::validate(bad), std::invalid_argument);
    bad = tiny_config();
    bad.model.disc_patch = 24;  // does not divide 32
    CHECK_THROWS_AS(config::validate(bad), std::invalid_argument);
}

TEST_CASE("config files round trip; unknown file keys are named") {
    std::string dir = tmpdir("hadmst_cfg");
    config::TrainConfig c = tiny_config();
    c.prompt = "unusual prompt";
    {
        std::ofstream f(dir + "/c.json");
        f << config::to_json_text(c);
    }
    config::TrainConfig back = config::load_config(dir + "/c.json");
    CHECK(back.prompt == "unusual prompt");
    CHECK(back.model.hr_size == 32);
    CHECK(back.model.unet_widths == c.model.unet_widths);

    {
        std::ofstream f(dir + "/bad.json");
        f << "{\"model\": {\"hr_sizee\": 64}}";
    }
    try {
        config::load_config(dir + "/bad.json");
        FAIL("expected unknown-key error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("model.hr_sizee") != std::string::npos);
    }
    {
        std::ofstream f(dir + "/partial.json");
        f << "{\"epochs\": 7}";  // partial configs merge over defaults
    }
    config::TrainConfig part = config::load_config(dir + "/partial.json");
    CHECK(part.epochs == 7);
    CHECK(part.batch == config::TrainConfig().batch);

    CHECK_THROWS_AS(config::load_config(dir + "/missing.json"), std::invalid_argument);
}

TEST_CASE("model construction is deterministic per seed") {
    auto cfg = tiny_config();
    model::HadmstModel a(cfg.model, 7), b(cfg.model, 7), c(cfg.model, 8);
    bool same = true, diff = false;
    for (auto& [k, v] : a.gen_params().all()) {
        if (max_abs_diff(v->value, b.gen_params().get(k)->value) != 0.0) same = false;
        if (max_abs_diff(v->value, c.gen_params().get(k)->value) != 0.0) diff = true;
    }
    CHECK(same);
    CHECK(diff);
    CHECK(a.gen_params().total_params() > 0);
    CHECK(a.disc_params().total_params() > 0);
}

TEST_CASE("one training step: finite losses, parameters move, determinism") {
    auto cfg = tiny_config();
    const auto& ds = tiny_dataset();
    std::string dir = tmpdir("hadmst_step");
    train::Trainer t1(cfg, ds, dir + "/a");
    train::Trainer t2(cfg, ds, dir + "/b");

    auto before = snapshot(t1.model_ref().gen_params());
    Rng r1(5), r2(5);
    auto s1 = t1.train_step({0, 1}, r1);
    auto s2 = t2.train_step({0, 1}, r2);
    CHECK(std::isfinite(s1.l_diff));
    CHECK(std::isfinite(s1.l_contrast));
    CHECK(std::isfinite(s1.l_gen_adv));
    CHECK(std::isfinite(s1.l_disc));
    CHECK(s1.l_diff > 0.0);
    // identical seeds: identical step
    CHECK(s1.l_diff == s2.l_diff);
    CHECK(s1.l_total == s2.l_total);
    CHECK(s1.l_disc == s2.l_disc);

    // generator parameters moved
    double moved = 0;
    for (auto& [k, v] : t1.model_ref().gen_params().all())
        moved = std::max(moved, max_abs_diff(v->value, before[k]));
    CHECK(moved > 0.0);
}

TEST_CASE("ablation switches remove the corresponding loss terms") {
    const auto& ds = tiny_dataset();
    std::string dir = tmpdir("hadmst_abl");

    auto cfg = tiny_config();
    cfg.use_gdal = false;
    train::Trainer no_gdal(cfg, ds, dir + "/g");
    Rng r(3);
    auto sg = no_gdal.train_step({0, 1}, r);
    CHECK(sg.l_disc == 0.0);
    CHECK(sg.l_gen_adv == 0.0);
    CHECK(sg.l_contrast != 0.0);

    cfg = tiny_config();
    cfg.use_cmsa = false;
    train::Trainer no_cmsa(cfg, ds, dir + "/c");
    Rng r2(3);
    auto sc = no_cmsa.train_step({0, 1}, r2);
    CHECK(sc.l_contrast == 0.0);
    CHECK(sc.l_disc != 0.0);

    cfg = tiny_config();
    cfg.use_lr = false;  // graceful degradation: no LR input at all
    train::Trainer no_lr(cfg, ds, dir + "/l");
    Rng r3(3);
    auto sl = no_lr.train_step({0, 1}, r3);
    CHECK(std::isfinite(sl.l_total));
    CHECK(sl.l_contrast == 0.0);  // alignment needs the LR modality
    Rng r4(9);
    Array gen = no_lr.generate_eval01(ds.manifest.test_split[0], r4);
    REQUIRE(gen.shape == std::vector<int>{4, 32, 32});
    for (double v : gen.v) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("checkpoint round trip restores every parameter bit-exactly") {
    auto cfg = tiny_config();
    const auto& ds = tiny_dataset();
    std::string dir = tmpdir("hadmst_ckpt");
    train::Trainer t(cfg, ds, dir);
    Rng r(5);
    t.train_step({0, 1, 2}, r);  // move away from init
    auto gsnap = snapshot(t.model_ref().gen_params());
    auto dsnap = snapshot(t.model_ref().disc_params());
    checkpoint::save(dir + "/m.ckpt", t.model_ref(), {3, ds.manifest.gene_panel});

    // scramble, then restore
    for (auto& [k, v] : t.model_ref().gen_params().all())
        for (double& x : v->value.v) x += 1.5;
    checkpoint::Meta meta = checkpoint::load(dir + "/m.ckpt", t.model_ref(),
                                             ds.manifest.gene_panel);
    CHECK(meta.epoch == 3);
    for (auto& [k, v] : t.model_ref().gen_params().all())
        CHECK(max_abs_diff(v->value, gsnap[k]) == 0.0);
    for (auto& [k, v] : t.model_ref().disc_params().all())
        CHECK(max_abs_diff(v->value, dsnap[k]) == 0.0);

    // wrong panel is rejected with a clear error
    try {
        checkpoint::load(dir + "/m.ckpt", t.model_ref(), {"x", "y", "z", "w"});
        FAIL("expected panel mismatch");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("gene panel") != std::string::npos);
    }
    // corrupt header
    {
        std::fstream f(dir + "/m.ckpt", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.put('X');
    }
    CHECK_THROWS_AS(checkpoint::load(dir + "/m.ckpt", t.model_ref()), std::runtime_error);
}

TEST_CASE("a full train run is bit-reproducible and writes its artifacts") {
    auto cfg = tiny_config();
    const auto& ds = tiny_dataset();
    std::string dir = tmpdir("hadmst_full");
    train::Trainer a(cfg, ds, dir + "/a");
    train::Trainer b(cfg, ds, dir + "/b");
    auto ra = a.train();
    auto rb = b.train();
    CHECK(ra.model.rmse == rb.model.rmse);
    CHECK(ra.model.ssim == rb.model.ssim);
    CHECK(ra.nearest.rmse == rb.nearest.rmse);
    for (auto& [k, v] : a.model_ref().gen_params().all())
        CHECK(max_abs_diff(v->value, b.model_ref().gen_params().get(k)->value) == 0.0);
    CHECK(fs::exists(dir + "/a/train_log.jsonl"));
    CHECK(fs::exists(dir + "/a/model.ckpt"));
    CHECK(fs::exists(dir + "/a/validation.json"));
    // the log is valid JSONL with the expected fields
    std::ifstream log(dir + "/a/train_log.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
        auto j = nlohmann::json::parse(line);
        CHECK(j.contains("epoch"));
        CHECK(j.contains("l_diff"));
        ++lines;
    }
    CHECK(lines > 0);
}
