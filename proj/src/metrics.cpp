#include "hadmst/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace hadmst {
namespace metrics {

namespace {

std::vector<double> gaussian_kernel(int window, double sigma) {
    std::vector<double> k(window);
    double sum = 0, c = (window - 1) / 2.0;
    for (int i = 0; i < window; ++i) {
        k[i] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
        sum += k[i];
    }
    for (double& v : k) v /= sum;
    return k;
}

struct ChannelView {
    const double* p;
    int h, w;
    double at(int y, int x) const { return p[(size_t)y * w + x]; }
};

// SSIM of one Gaussian-weighted window anchored at (y0, x0)
double window_ssim(const ChannelView& a, const ChannelView& b, int y0, int x0,
                   const std::vector<double>& k, const SsimParams& p) {
    int win = p.window;
    double mx = 0, my = 0;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
            double wgt = k[i] * k[j];
            mx += wgt * a.at(y0 + i, x0 + j);
            my += wgt * b.at(y0 + i, x0 + j);
        }
    double vx = 0, vy = 0, cxy = 0;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
            double wgt = k[i] * k[j];
            double dx = a.at(y0 + i, x0 + j) - mx, dy = b.at(y0 + i, x0 + j) - my;
            vx += wgt * dx * dx;
            vy += wgt * dy * dy;
            cxy += wgt * dx * dy;
        }
    double c1 = (p.k1 * p.data_range) * (p.k1 * p.data_range);
    double c2 = (p.k2 * p.data_range) * (p.k2 * p.data_range);
    return ((2 * mx * my + c1) * (2 * cxy + c2)) /
           ((mx * mx + my * my + c1) * (vx + vy + c2));
}

void shape_check(const Array& a, const Array& b, const SsimParams& p) {
    check_same_shape(a, b, "ssim");
    int r = a.rank();
    if (r != 2 && r != 3) throw std::invalid_argument("ssim: expects [H,W] or [C,H,W]");
    int h = a.shape[r - 2], w = a.shape[r - 1];
    if (h < p.window || w < p.window)
        throw std::invalid_argument("ssim: image smaller than the window");
}

}  // namespace

double rmse(const Array& a, const Array& b) {
    check_same_shape(a, b, "rmse");
    if (a.numel() == 0) throw std::invalid_argument("rmse: empty input");
    double s = 0;
    for (long i = 0; i < a.numel(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s / a.numel());
}

Array local_ssim_map(const Array& a, const Array& b, int stride, const SsimParams& p) {
    shape_check(a, b, p);
    if (stride < 1) throw std::invalid_argument("ssim: stride must be >= 1");
    int r = a.rank();
    int c = r == 3 ? a.shape[0] : 1;
    int h = a.shape[r - 2], w = a.shape[r - 1];
    auto k = gaussian_kernel(p.window, p.sigma);
    int oh = (h - p.window) / stride + 1, ow = (w - p.window) / stride + 1;
    Array out({c, oh, ow});
    for (int ch = 0; ch < c; ++ch) {
        ChannelView va{a.v.data() + (size_t)ch * h * w, h, w};
        ChannelView vb{b.v.data() + (size_t)ch * h * w, h, w};
        for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j)
                out.v[((size_t)ch * oh + i) * ow + j] =
                    window_ssim(va, vb, i * stride, j * stride, k, p);
    }
    return out;
}

double ssim(const Array& a, const Array& b, const SsimParams& p) {
    Array m = local_ssim_map(a, b, 1, p);
    double s = 0;
    for (double v : m.v) s += v;
    return s / m.numel();
}

void quality_color(double t, double rgb[3]) {
    t = std::clamp(t, 0.0, 1.0);
    // red (bad) -> yellow -> green (good)
    const double lo[3] = {0.84, 0.19, 0.15};
    const double mid[3] = {1.00, 1.00, 0.75};
    const double hi[3] = {0.10, 0.68, 0.38};
    for (int c = 0; c < 3; ++c)
        rgb[c] = t < 0.5 ? lo[c] + (mid[c] - lo[c]) * (2 * t)
                         : mid[c] + (hi[c] - mid[c]) * (2 * t - 1);
}

Array render_overlay(const Array& quality_map, const Array& he_rgb, double alpha) {
    if (he_rgb.rank() != 3 || he_rgb.shape[0] != 3)
        throw std::invalid_argument("render_overlay: histology must be [3,H,W]");
    const Array* qm = &quality_map;
    Array squeezed;
    if (quality_map.rank() == 3 && quality_map.shape[0] == 1) {
        squeezed = Array({quality_map.shape[1], quality_map.shape[2]}, quality_map.v);
        qm = &squeezed;
    }
    if (qm->rank() != 2) throw std::invalid_argument("render_overlay: map must be [h,w]");
    int h = he_rgb.shape[1], w = he_rgb.shape[2];
    int mh = qm->shape[0], mw = qm->shape[1];

    // edge-boosted grayscale background
    Array gray({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double g = 0;
            for (int c = 0; c < 3; ++c) g += he_rgb.v[((size_t)c * h + y) * w + x];
            gray.at(y, x) = g / 3.0;
        }
    Array bg({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            auto at = [&](int yy, int xx) {
                yy = std::clamp(yy, 0, h - 1);
                xx = std::clamp(xx, 0, w - 1);
                return gray.at(yy, xx);
            };
            double gx = at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1) -
                        at(y - 1, x - 1) - 2 * at(y, x - 1) - at(y + 1, x - 1);
            double gy = at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1) -
                        at(y - 1, x - 1) - 2 * at(y - 1, x) - at(y - 1, x + 1);
            double edge = std::min(1.0, std::sqrt(gx * gx + gy * gy));
            bg.at(y, x) = std::clamp(0.75 * gray.at(y, x) + 0.25 * edge, 0.0, 1.0);
        }

    Array out({3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            // bilinear sample of the quality map at this pixel
            double fy = (y + 0.5) * mh / h - 0.5, fx = (x + 0.5) * mw / w - 0.5;
            int y0 = (int)std::floor(fy), x0 = (int)std::floor(fx);
            double ty = fy - y0, tx = fx - x0;
            auto q = [&](int yy, int xx) {
                yy = std::clamp(yy, 0, mh - 1);
                xx = std::clamp(xx, 0, mw - 1);
                return qm->v[(size_t)yy * mw + xx];
            };
            double val = (1 - ty) * ((1 - tx) * q(y0, x0) + tx * q(y0, x0 + 1)) +
                         ty * ((1 - tx) * q(y0 + 1, x0) + tx * q(y0 + 1, x0 + 1));
            double rgb[3];
            quality_color(val, rgb);
            for (int c = 0; c < 3; ++c)
                out.v[((size_t)c * h + y) * w + x] =
                    alpha * rgb[c] + (1 - alpha) * bg.at(y, x);
        }
    return out;
}

std::vector<GeneScore> per_gene_scores(const Array& pred, const Array& truth,
                                       const std::vector<std::string>& panel,
                                       const SsimParams& p) {
    check_same_shape(pred, truth, "per_gene_scores");
    if (pred.rank() != 3) throw std::invalid_argument("per_gene_scores: expects [C,H,W]");
    int c = pred.shape[0], h = pred.shape[1], w = pred.shape[2];
    if ((int)panel.size() != c)
        throw std::invalid_argument("per_gene_scores: panel size mismatch");
    std::vector<GeneScore> out;
    for (int g = 0; g < c; ++g) {
        Array pa({h, w}), ta({h, w});
        std::copy(pred.v.begin() + (long)g * h * w, pred.v.begin() + (long)(g + 1) * h * w,
                  pa.v.begin());
        std::copy(truth.v.begin() + (long)g * h * w, truth.v.begin() + (long)(g + 1) * h * w,
                  ta.v.begin());
        out.push_back({panel[g], rmse(pa, ta), ssim(pa, ta, p)});
    }
    return out;
}

void write_scores_csv(const std::string& path, const std::vector<GeneScore>& scores) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_scores_csv: cannot open " + path);
    f << "gene,rmse,ssim\n";
    f << std::fixed;
    f.precision(6);
    for (auto& s : scores) f << s.gene << "," << s.rmse << "," << s.ssim << "\n";
}

void write_scatter_json(const std::string& path, const Array& pred, const Array& truth,
                        int max_points) {
    check_same_shape(pred, truth, "write_scatter_json");
    long n = pred.numel();
    long step = std::max<long>(1, n / std::max(1, max_points));
    nlohmann::json j;
    auto& jp = j["pred"];
    auto& jt = j["truth"];
    for (long i = 0; i < n; i += step) {
        jp.push_back(pred[i]);
        jt.push_back(truth[i]);
    }
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_scatter_json: cannot open " + path);
    f << j.dump() << "\n";
}

std::string format_results_table(const std::vector<ResultRow>& rows) {
    size_t name_w = 7;  // "Dataset"
    for (auto& r : rows) name_w = std::max(name_w, r.dataset.size());
    std::ostringstream os;
    os << std::left;
    os.width((std::streamsize)name_w);
    os << "Dataset";
    os << "  RMSE    SSIM\n";
    os << std::string(name_w + 14, '-') << "\n";
    os << std::fixed;
    os.precision(4);
    for (auto& r : rows) {
        os << std::left;
        os.width((std::streamsize)name_w);
        os << r.dataset;
        os << "  " << r.rmse << "  " << r.ssim << "\n";
    }
    return os.str();
}

}  // namespace metrics
}  // namespace hadmst
