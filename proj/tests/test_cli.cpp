#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

using namespace std;
namespace fs = std::filesystem;

namespace {

const string cli = HADMST_CLI_PATH;

struct RunResult {
    int code;
    string output;
};

RunResult run(const string& args) {
    string out = (fs::temp_directory_path() / "hadmst_cli_out.txt").string();
    string cmd = cli + " " + args + " > " + out + " 2>&1";
    int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    ifstream f(out);
    r.output.assign(istreambuf_iterator<char>(f), istreambuf_iterator<char>());
    return r;
}

string base_dir() {
    static string d = [] {
        string dir = (fs::temp_directory_path() / "hadmst_cli").string();
        fs::remove_all(dir);
        fs::create_directories(dir);
        return dir;
    }();
    return d;
}

// shared tiny run: synth once, train once, reuse the checkpoint downstream
const string kTrainFlags =
    " --seed 3 --set epochs=1 --set model.T=6 --set model.disc_patch=16"
    " --set eval_tiles=1 --set log_every=1";

}  // namespace

TEST_CASE("cli: no subcommand and unknown flags fail") {
    CHECK(run("").code != 0);
    CHECK(run("--definitely-not-a-flag").code != 0);
    CHECK(run("train").code != 0);  // missing required options
}

TEST_CASE("cli: synthetic corpus generation") {
    string d = base_dir();
    auto r = run("synth-data --out " + d +
                 "/data --genes 4 --hr-size 32 --lr-size 4 --train-tiles 4 --test-tiles 2 "
                 "--seed 11 --name tiny");
    CHECK(r.code == 0);
    CHECK(fs::exists(d + "/data/manifest.json"));
    CHECK(fs::exists(d + "/data/tile_0_he.arr"));
}

TEST_CASE("cli: training produces a checkpoint, log and validation metrics") {
    string d = base_dir();
    auto r = run("train --data " + d + "/data --out " + d + "/run" + kTrainFlags);
    CHECK(r.code == 0);
    CHECK(fs::exists(d + "/run/model.ckpt"));
    CHECK(fs::exists(d + "/run/train_log.jsonl"));
    CHECK(fs::exists(d + "/run/validation.json"));
    CHECK(fs::exists(d + "/run/config.json"));
    CHECK(r.output.find("model") != string::npos);
    CHECK(r.output.find("bilinear") != string::npos);
}

TEST_CASE("cli: configuration errors exit with code 2 and name the key") {
    string d = base_dir();
    auto r = run("train --data " + d + "/data --out " + d + "/bad --set model.tee=1");
    CHECK(r.code == 2);
    CHECK(r.output.find("model.tee") != string::npos);

    auto r2 = run("train --data " + d + "/data --out " + d + "/bad --set model.T=0");
    CHECK(r2.code == 2);

    // malformed config file
    string cfg = d + "/broken.json";
    {
        ofstream f(cfg);
        f << "{\"epochz\": 1}";
    }
    auto r3 = run("train --data " + d + "/data --out " + d + "/bad --config " + cfg);
    CHECK(r3.code == 2);
    CHECK(r3.output.find("epochz") != string::npos);
}

TEST_CASE("cli: missing dataset is a runtime error (exit 1)") {
    string d = base_dir();
    auto r = run("train --data " + d + "/nope --out " + d + "/bad" + kTrainFlags);
    CHECK(r.code == 1);
}

TEST_CASE("cli: sampling from a checkpoint writes prediction artifacts") {
    string d = base_dir();
    auto r = run("sample --data " + d + "/data --checkpoint " + d + "/run/model.ckpt --out " +
                 d + "/samples" + kTrainFlags);
    CHECK(r.code == 0);
    CHECK(fs::exists(d + "/samples/pred_tile_4.arr"));  // first test tile id
    CHECK(fs::exists(d + "/samples/pred_tile_4.png"));
}

TEST_CASE("cli: evaluation writes metrics, per-gene csv and overlays") {
    string d = base_dir();
    auto r = run("evaluate --data " + d + "/data --checkpoint " + d + "/run/model.ckpt" +
                 " --out " + d + "/eval --tiles 1" + kTrainFlags);
    CHECK(r.code == 0);
    CHECK(fs::exists(d + "/eval/metrics.json"));
    CHECK(fs::exists(d + "/eval/per_gene_metrics.csv"));
    CHECK(fs::exists(d + "/eval/overlay_tile_4.png"));
    CHECK(r.output.find("RMSE") != string::npos);
}

TEST_CASE("cli: report formats metrics from a run directory") {
    string d = base_dir();
    auto r = run("report --run " + d + "/eval");
    CHECK(r.code == 0);
    CHECK(r.output.find("Dataset") != string::npos);
    CHECK(r.output.find("eval") != string::npos);

    CHECK(run("report --run " + d + "/does_not_exist").code == 1);
}

TEST_CASE("cli: degraded mode without the low-resolution input") {
    string d = base_dir();
    auto r = run("train --data " + d + "/data --out " + d + "/run_nolr --no-lr" + kTrainFlags);
    CHECK(r.code == 0);
    CHECK(fs::exists(d + "/run_nolr/model.ckpt"));
}
