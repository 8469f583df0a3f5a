#pragma once

// Evaluation metrics: SSIM / RMSE on [0,1] expression maps, local similarity
// maps, overlay rendering and report formatting.

#include <string>
#include <vector>

#include "hadmst/array.hpp"

namespace hadmst {
namespace metrics {

struct SsimParams {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double data_range = 1.0;
};

// Root-mean-square error over all elements (shapes must match).
double rmse(const Array& a, const Array& b);

// Mean structural similarity: Gaussian-weighted 11x11 windows (sigma 1.5),
// valid mode (no padding), averaged over windows and channels. Inputs are
// [C,H,W] (or [H,W]) in [0, data_range]; H and W must be >= window.
double ssim(const Array& a, const Array& b, const SsimParams& p = {});

// Per-window SSIM values on a stride grid: [C, oh, ow]. With stride 1 the mean
// over all entries equals ssim().
Array local_ssim_map(const Array& a, const Array& b, int stride = 1,
                     const SsimParams& p = {});

// Renders a quality map [h,w] (values in [0,1], low = red, high = green) over
// an edge-boosted grayscale of the histology tile [3,H,W]. Returns [3,H,W].
Array render_overlay(const Array& quality_map, const Array& he_rgb, double alpha = 0.55);

// red-yellow-green colormap; t in [0,1] -> rgb in [0,1]
void quality_color(double t, double rgb[3]);

struct GeneScore {
    std::string gene;
    double rmse = 0.0;
    double ssim = 0.0;
};

// Per-gene metrics over [C,H,W] prediction/truth in [0,1] eval space.
std::vector<GeneScore> per_gene_scores(const Array& pred, const Array& truth,
                                       const std::vector<std::string>& panel,
                                       const SsimParams& p = {});

void write_scores_csv(const std::string& path, const std::vector<GeneScore>& scores);

// Scatter data (flattened predicted vs true values, optionally subsampled)
// serialized as JSON for downstream plotting.
void write_scatter_json(const std::string& path, const Array& pred, const Array& truth,
                        int max_points = 5000);

struct ResultRow {
    std::string dataset;
    double rmse = 0.0;
    double ssim = 0.0;
};

// Fixed-width text table with 4-decimal metric columns.
std::string format_results_table(const std::vector<ResultRow>& rows);

}  // namespace metrics
}  // namespace hadmst
