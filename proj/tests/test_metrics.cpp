#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "hadmst/metrics.hpp"
#include "hadmst/png_io.hpp"
#include "hadmst/rng.hpp"

using namespace hadmst;
namespace fs = std::filesystem;

namespace {

// Independent scalar reference: compute mean SSIM by explicit sliding-window
// statistics with a freshly constructed Gaussian weight matrix.
double reference_ssim(const Array& a, const Array& b, int win = 11, double sigma = 1.5,
                      double k1 = 0.01, double k2 = 0.03) {
    int h = a.shape[0], w = a.shape[1];
    std::vector<double> g(win);
    double gs = 0;
    for (int i = 0; i < win; ++i) {
        double d = i - (win - 1) / 2.0;
        g[i] = std::exp(-d * d / (2 * sigma * sigma));
        gs += g[i];
    }
    for (double& v : g) v /= gs;
    double c1 = k1 * k1, c2 = k2 * k2, total = 0;
    int count = 0;
    for (int y = 0; y + win <= h; ++y)
        for (int x = 0; x + win <= w; ++x) {
            double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
            for (int i = 0; i < win; ++i)
                for (int j = 0; j < win; ++j) {
                    double wt = g[i] * g[j];
                    double av = a.v[(size_t)(y + i) * w + x + j];
                    double bv = b.v[(size_t)(y + i) * w + x + j];
                    mx += wt * av;
                    my += wt * bv;
                    xx += wt * av * av;
                    yy += wt * bv * bv;
                    xy += wt * av * bv;
                }
            double vx = xx - mx * mx, vy = yy - my * my, cv = xy - mx * my;
            total += ((2 * mx * my + c1) * (2 * cv + c2)) /
                     ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++count;
        }
    return total / count;
}

}  // namespace

TEST_CASE("rmse basics") {
    Array a({2, 2}, std::vector<double>{0, 0, 0, 0});
    Array b({2, 2}, std::vector<double>{1, 1, 1, 1});
    CHECK(metrics::rmse(a, b) == doctest::Approx(1.0));
    CHECK(metrics::rmse(a, a) == 0.0);
    Array c({3});
    CHECK_THROWS(metrics::rmse(a, c));
    // hand value: errors {3,4} over 2 elements -> sqrt(25/2)
    Array d({2}, std::vector<double>{3, 4});
    Array z({2});
    CHECK(metrics::rmse(d, z) == doctest::Approx(std::sqrt(12.5)));
}

TEST_CASE("ssim is 1 for identical images and matches a reference implementation") {
    Rng rng(17);
    Array a = rng.uniform_array({24, 24}, 0.0, 1.0);
    CHECK(metrics::ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));

    Array b = rng.uniform_array({24, 24}, 0.0, 1.0);
    CHECK(metrics::ssim(a, b) == doctest::Approx(reference_ssim(a, b)).epsilon(1e-10));

    // noisy version: high but below 1
    Array n = a;
    Rng rng2(18);
    for (double& v : n.v) v = std::clamp(v + 0.05 * rng2.normal(), 0.0, 1.0);
    double s = metrics::ssim(a, n);
    CHECK(s < 1.0);
    CHECK(s > 0.5);
    CHECK(s == doctest::Approx(reference_ssim(a, n)).epsilon(1e-10));
}

TEST_CASE("ssim closed form for constant images 0 vs 1") {
    Array z({16, 16}, 0.0);
    Array o({16, 16}, 1.0);
    // means 0 and 1, zero variance: C1/(1+C1) with C1 = 1e-4
    double expected = 1e-4 / (1.0 + 1e-4);
    CHECK(metrics::ssim(z, o) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(expected == doctest::Approx(9.999e-5).epsilon(1e-4));
}

TEST_CASE("multichannel ssim averages the per-channel values") {
    Rng rng(23);
    Array a = rng.uniform_array({3, 20, 20}, 0.0, 1.0);
    Array b = rng.uniform_array({3, 20, 20}, 0.0, 1.0);
    double avg = 0;
    for (int c = 0; c < 3; ++c) {
        Array ac({20, 20}), bc({20, 20});
        std::copy(a.v.begin() + c * 400, a.v.begin() + (c + 1) * 400, ac.v.begin());
        std::copy(b.v.begin() + c * 400, b.v.begin() + (c + 1) * 400, bc.v.begin());
        avg += metrics::ssim(ac, bc);
    }
    CHECK(metrics::ssim(a, b) == doctest::Approx(avg / 3).epsilon(1e-12));
}

TEST_CASE("stride-1 local map mean equals global ssim; strided grid has right shape") {
    Rng rng(29);
    Array a = rng.uniform_array({1, 26, 30}, 0.0, 1.0);
    Array b = rng.uniform_array({1, 26, 30}, 0.0, 1.0);
    Array m = metrics::local_ssim_map(a, b, 1);
    REQUIRE(m.shape == std::vector<int>{1, 16, 20});
    double s = 0;
    for (double v : m.v) s += v;
    CHECK(s / m.numel() == doctest::Approx(metrics::ssim(a, b)).epsilon(1e-12));

    Array m4 = metrics::local_ssim_map(a, b, 4);
    REQUIRE(m4.shape == std::vector<int>{1, 4, 5});
    // strided entries are a subsample of the dense map
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j)
            CHECK(m4.v[(size_t)i * 5 + j] == m.v[(size_t)(4 * i) * 20 + 4 * j]);

    CHECK_THROWS(metrics::ssim(Array({4, 4}), Array({4, 4})));  // below window size
}

TEST_CASE("overlay colormap endpoints and output bounds") {
    double lo[3], hi[3], mid[3];
    metrics::quality_color(0.0, lo);
    metrics::quality_color(1.0, hi);
    metrics::quality_color(0.5, mid);
    CHECK(lo[0] > lo[1]);  // low quality renders red-dominant
    CHECK(hi[1] > hi[0]);  // high quality renders green-dominant
    CHECK(mid[0] > 0.9);   // midpoint is yellowish
    CHECK(mid[1] > 0.9);

    Rng rng(31);
    Array he = rng.uniform_array({3, 32, 32}, 0.0, 1.0);
    Array good({8, 8}, 1.0), bad({8, 8}, 0.0);
    Array og = metrics::render_overlay(good, he);
    Array ob = metrics::render_overlay(bad, he);
    REQUIRE(og.shape == std::vector<int>{3, 32, 32});
    for (double v : og.v) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    double rg = 0, gg = 0, rb = 0, gb = 0;
    for (int i = 0; i < 32 * 32; ++i) {
        rg += og.v[i];
        gg += og.v[1024 + i];
        rb += ob.v[i];
        gb += ob.v[1024 + i];
    }
    CHECK(gg > rg);  // good map pushes green
    CHECK(rb > gb);  // bad map pushes red
}

TEST_CASE("png round trip") {
    Rng rng(37);
    Array img = rng.uniform_array({3, 17, 23}, 0.0, 1.0);
    std::string path = (fs::temp_directory_path() / "hadmst_png_rt.png").string();
    png_io::write_png_rgb(path, img);
    Array back = png_io::read_png_rgb(path);
    REQUIRE(back.shape == img.shape);
    for (long i = 0; i < img.numel(); ++i)
        CHECK(std::fabs(back[i] - img[i]) <= 0.5 / 255.0 + 1e-9);
}

TEST_CASE("per-gene scores, csv and results table formatting") {
    Rng rng(41);
    Array truth = rng.uniform_array({2, 16, 16}, 0.0, 1.0);
    Array pred = truth;
    for (int i = 0; i < 256; ++i) pred.v[256 + i] = std::clamp(pred.v[256 + i] + 0.2, 0.0, 1.0);
    auto scores = metrics::per_gene_scores(pred, truth, {"ga", "gb"});
    REQUIRE(scores.size() == 2);
    CHECK(scores[0].rmse == doctest::Approx(0.0));
    CHECK(scores[0].ssim == doctest::Approx(1.0));
    CHECK(scores[1].rmse > 0.1);
    CHECK(scores[1].ssim < 1.0);

    std::string csv = (fs::temp_directory_path() / "hadmst_scores.csv").string();
    metrics::write_scores_csv(csv, scores);
    std::ifstream f(csv);
    std::string header;
    std::getline(f, header);
    CHECK(header == "gene,rmse,ssim");

    std::string table = metrics::format_results_table(
        {{"mouse brain", 0.1630, 0.3184}, {"human breast", 0.2304, 0.4663}});
    CHECK(table.find("0.1630") != std::string::npos);
    CHECK(table.find("0.3184") != std::string::npos);
    CHECK(table.find("0.2304") != std::string::npos);
    CHECK(table.find("0.4663") != std::string::npos);
    CHECK(table.find("Dataset") != std::string::npos);

    std::string scatter = (fs::temp_directory_path() / "hadmst_scatter.json").string();
    metrics::write_scatter_json(scatter, pred, truth, 100);
    std::ifstream sf(scatter);
    std::string body((std::istreambuf_iterator<char>(sf)), std::istreambuf_iterator<char>());
    CHECK(body.find("\"pred\"") != std::string::npos);
    CHECK(body.find("\"truth\"") != std::string::npos);
}
