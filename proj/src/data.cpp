#include "hadmst/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <unordered_set>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace hadmst {
namespace data {

namespace {

constexpr int kNumTypes = 4;

// Fixed per-type H&E-like stain colors.
const double kTypeColor[kNumTypes][3] = {
    {0.45, 0.25, 0.55},
    {0.70, 0.35, 0.55},
    {0.35, 0.30, 0.65},
    {0.60, 0.45, 0.70},
};

// Fixed gene loading matrix over blob types; adjacent gene pairs share most of
// their loadings so the panel is genuinely co-expressed.
std::vector<std::vector<double>> gene_loadings(int genes) {
    Rng rng(0xC0E09E5ull);
    std::vector<std::vector<double>> m(genes, std::vector<double>(kNumTypes, 0.0));
    for (int c = 0; c < genes; ++c) {
        if (c % 2 == 1) {
            for (int k = 0; k < kNumTypes; ++k)
                m[c][k] = 0.85 * m[c - 1][k] + 0.15 * std::fabs(rng.normal());
        } else {
            for (int k = 0; k < kNumTypes; ++k) m[c][k] = std::fabs(rng.normal());
            m[c][c % kNumTypes] += 1.2;  // a dominant type per gene
        }
    }
    return m;
}

struct AxisWeights {
    std::vector<std::vector<std::pair<int, double>>> w;
};

AxisWeights area_axis(int in, int out) {
    AxisWeights aw;
    aw.w.resize(out);
    double scale = (double)in / out;
    for (int i = 0; i < out; ++i) {
        double lo = i * scale, hi = (i + 1) * scale;
        int s0 = (int)std::floor(lo), s1 = (int)std::ceil(hi);
        double total = hi - lo;
        for (int s = s0; s < s1 && s < in; ++s) {
            double ov = std::min(hi, (double)s + 1) - std::max(lo, (double)s);
            if (ov > 1e-12) aw.w[i].push_back({s, ov / total});
        }
    }
    return aw;
}

}  // namespace

std::pair<hsd::HistologyTile, Array> generate_synthetic_pair(Rng& rng, int genes, int size,
                                                             int forced_num_blobs) {
    if (genes < 2) throw std::invalid_argument("generate_synthetic_pair: need >= 2 genes");
    if (size < 16) throw std::invalid_argument("generate_synthetic_pair: size too small");
    int nblobs = forced_num_blobs >= 0 ? forced_num_blobs : (int)rng.uniform_int(10, 30);

    struct Blob {
        double cx, cy, sigma, amp;
        int type;
    };
    std::vector<Blob> blobs;
    for (int b = 0; b < nblobs; ++b) {
        Blob bl;
        bl.cx = (0.08 + 0.84 * rng.uniform()) * size;
        bl.cy = (0.08 + 0.84 * rng.uniform()) * size;
        // cell clusters smaller than one LR grid cell, so the coarse expression
        // grid alone cannot resolve them and morphology carries real signal
        bl.sigma = (0.025 + 0.045 * rng.uniform()) * size;
        bl.amp = 0.7 + 0.6 * rng.uniform();
        bl.type = (int)rng.uniform_int(0, kNumTypes - 1);
        blobs.push_back(bl);
    }

    // per-type density fields
    std::vector<Array> density(kNumTypes, Array({size, size}));
    for (auto& bl : blobs) {
        double inv2s2 = 1.0 / (2.0 * bl.sigma * bl.sigma);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                double dx = x + 0.5 - bl.cx, dy = y + 0.5 - bl.cy;
                density[bl.type].at(y, x) += bl.amp * std::exp(-(dx * dx + dy * dy) * inv2s2);
            }
    }

    auto loadings = gene_loadings(genes);
    const double shared_weight = 0.3;
    Array expr({genes, size, size});
    for (int c = 0; c < genes; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                double v = 0, total = 0;
                for (int k = 0; k < kNumTypes; ++k) {
                    v += loadings[c][k] * density[k].at(y, x);
                    total += density[k].at(y, x);
                }
                expr.v[((size_t)c * size + y) * size + x] = v + shared_weight * total;
            }

    // Beer-Lambert style stain rendering + small sensor noise
    hsd::HistologyTile tile;
    tile.rgb = Array({3, size, size});
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                double od = 0;
                for (int k = 0; k < kNumTypes; ++k)
                    od += density[k].at(y, x) * (1.0 - kTypeColor[k][ch]) * 0.9;
                double v = std::exp(-od) + 0.01 * rng.normal();
                tile.rgb.v[((size_t)ch * size + y) * size + x] = std::clamp(v, 0.0, 1.0);
            }
    return {tile, expr};
}

Array downsample_st(const Array& hr_chw, int lr_h, int lr_w) {
    if (hr_chw.rank() != 3) throw std::invalid_argument("downsample_st: expects [C,H,W]");
    int c = hr_chw.shape[0], h = hr_chw.shape[1], w = hr_chw.shape[2];
    if (lr_h > h || lr_w > w)
        throw std::invalid_argument("downsample_st: LR size exceeds HR size");
    AxisWeights ah = area_axis(h, lr_h), aw = area_axis(w, lr_w);
    Array out({c, lr_h, lr_w});
    for (int g = 0; g < c; ++g)
        for (int i = 0; i < lr_h; ++i)
            for (int j = 0; j < lr_w; ++j) {
                double acc = 0;
                for (auto& [hi, wi] : ah.w[i])
                    for (auto& [hj, wj] : aw.w[j])
                        acc += wi * wj * hr_chw.v[((size_t)g * h + hi) * w + hj];
                out.v[((size_t)g * lr_h + i) * lr_w + j] = acc;
            }
    return out;
}

static const GeneNorm& norm_for(const DatasetManifest& m, const std::string& gene) {
    auto it = m.normalization.find(gene);
    if (it == m.normalization.end())
        throw std::invalid_argument("no normalization stats for gene " + gene);
    return it->second;
}

Array normalize01(const Array& raw_chw, const DatasetManifest& m) {
    int c = raw_chw.shape[0];
    if (c != (int)m.gene_panel.size())
        throw std::invalid_argument("normalize: panel size mismatch");
    long hw = raw_chw.numel() / c;
    Array out(raw_chw.shape);
    for (int g = 0; g < c; ++g) {
        const GeneNorm& nz = norm_for(m, m.gene_panel[g]);
        double range = nz.max_log1p - nz.min_log1p;
        for (long i = 0; i < hw; ++i) {
            double x = raw_chw.v[(size_t)g * hw + i];
            if (x < 0) throw std::invalid_argument("normalize: negative raw expression");
            double z = (std::log1p(x) - nz.min_log1p) / range;
            out.v[(size_t)g * hw + i] = std::clamp(z, 0.0, 1.0);
        }
    }
    return out;
}

Array normalize_expression(const Array& raw_chw, const DatasetManifest& m) {
    Array z = normalize01(raw_chw, m);
    for (double& v : z.v) v = 2.0 * v - 1.0;
    return z;
}

Array denormalize_expression(const Array& model_chw, const DatasetManifest& m) {
    int c = model_chw.shape[0];
    long hw = model_chw.numel() / c;
    Array out(model_chw.shape);
    for (int g = 0; g < c; ++g) {
        const GeneNorm& nz = norm_for(m, m.gene_panel[g]);
        double range = nz.max_log1p - nz.min_log1p;
        for (long i = 0; i < hw; ++i) {
            double z01 = (model_chw.v[(size_t)g * hw + i] + 1.0) / 2.0;
            double lg = z01 * range + nz.min_log1p;
            out.v[(size_t)g * hw + i] = std::expm1(lg);
        }
    }
    return out;
}

Array model_to_eval01(const Array& model_chw) {
    Array out(model_chw.shape);
    for (long i = 0; i < out.numel(); ++i)
        out[i] = std::clamp((model_chw[i] + 1.0) / 2.0, 0.0, 1.0);
    return out;
}

std::vector<int> select_hvg(const Array& samples, const std::vector<std::string>& names,
                            int k) {
    int m = samples.shape[0], g = samples.shape[1];
    if (m < 2) throw std::invalid_argument("select_hvg: need >= 2 samples");
    if (k > g) throw std::invalid_argument("select_hvg: k exceeds gene count");
    if ((int)names.size() != g) throw std::invalid_argument("select_hvg: names size mismatch");
    std::vector<double> var(g, 0.0);
    for (int j = 0; j < g; ++j) {
        double mean = 0;
        for (int i = 0; i < m; ++i) mean += std::log1p(samples.at(i, j));
        mean /= m;
        for (int i = 0; i < m; ++i) {
            double d = std::log1p(samples.at(i, j)) - mean;
            var[j] += d * d;
        }
        var[j] /= m;
    }
    std::vector<int> idx(g);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (var[a] != var[b]) return var[a] > var[b];
        return names[a] < names[b];
    });
    idx.resize(k);
    return idx;
}

std::vector<std::string> merge_gene_panels(const std::vector<std::vector<std::string>>& panels) {
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;
    for (auto& panel : panels)
        for (auto& gene : panel)
            if (seen.insert(gene).second) out.push_back(gene);
    return out;
}

Dataset generate_dataset(const SyntheticConfig& cfg) {
    Dataset ds;
    int total = cfg.train_tiles + cfg.test_tiles;
    Rng master = Rng::seeded(cfg.seed);
    ds.tiles.reserve(total);
    for (int id = 0; id < total; ++id) {
        Rng trng = master.child((uint64_t)id + 1);
        auto [tile, expr] = generate_synthetic_pair(trng, cfg.genes, cfg.hr_size);
        Tile t;
        t.id = id;
        t.he = std::move(tile);
        t.seg = hsd::segment_cells(t.he).mask;
        t.hr_raw = std::move(expr);
        t.lr_raw = downsample_st(t.hr_raw, cfg.lr_size, cfg.lr_size);
        ds.tiles.push_back(std::move(t));
    }

    DatasetManifest& m = ds.manifest;
    m.name = cfg.name;
    m.num_tiles = total;
    m.hr_size = cfg.hr_size;
    m.lr_size = cfg.lr_size;
    m.pixel_size_um_hr = 10.0;
    m.pixel_size_um_lr = 10.0 * (double)cfg.hr_size / (double)cfg.lr_size;
    m.seed = cfg.seed;
    for (int g = 0; g < cfg.genes; ++g) m.gene_panel.push_back("gene_" + std::to_string(g));
    for (int id = 0; id < cfg.train_tiles; ++id) m.train_split.push_back(id);
    for (int id = cfg.train_tiles; id < total; ++id) m.test_split.push_back(id);

    // train-split log1p min/max per gene
    std::vector<std::string> dropped;
    for (int g = 0; g < cfg.genes; ++g) {
        double mn = 1e300, mx = -1e300;
        for (int id : m.train_split) {
            const Array& hr = ds.tiles[id].hr_raw;
            long hw = hr.numel() / cfg.genes;
            for (long i = 0; i < hw; ++i) {
                double lg = std::log1p(hr.v[(size_t)g * hw + i]);
                mn = std::min(mn, lg);
                mx = std::max(mx, lg);
            }
        }
        if (mx - mn <= 1e-12) {
            std::cerr << "[data] gene " << m.gene_panel[g]
                      << " has constant expression; dropping from panel\n";
            dropped.push_back(m.gene_panel[g]);
            continue;
        }
        m.normalization[m.gene_panel[g]] = {mn, mx};
    }
    if (!dropped.empty()) {
        // remove dropped genes from panel and all tiles
        std::vector<int> keep;
        for (int g = 0; g < cfg.genes; ++g)
            if (m.normalization.count(m.gene_panel[g])) keep.push_back(g);
        std::vector<std::string> new_panel;
        for (int g : keep) new_panel.push_back(m.gene_panel[g]);
        for (auto& t : ds.tiles) {
            auto filter = [&](const Array& a) {
                int h = a.shape[1], w = a.shape[2];
                Array out({(int)keep.size(), h, w});
                for (size_t gi = 0; gi < keep.size(); ++gi)
                    std::copy(a.v.begin() + (long)keep[gi] * h * w,
                              a.v.begin() + (long)(keep[gi] + 1) * h * w,
                              out.v.begin() + (long)gi * h * w);
                return out;
            };
            t.hr_raw = filter(t.hr_raw);
            t.lr_raw = filter(t.lr_raw);
        }
        m.gene_panel = new_panel;
    }
    return ds;
}

// ---- flat-array file format ----
// 16-byte header: magic 'HADM' (4) | dtype u8 (0 = f64) | rank u8 | pad u16 |
// dims 4 x u16 (little endian), then raw doubles.

void write_array(const std::string& path, const Array& a) {
    if (a.rank() > 4) throw std::invalid_argument("write_array: rank > 4");
    for (int d : a.shape)
        if (d > 65535) throw std::invalid_argument("write_array: dim too large");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_array: cannot open " + path);
    unsigned char hdr[16] = {'H', 'A', 'D', 'M', 0, (unsigned char)a.rank(), 0, 0};
    for (int i = 0; i < 4; ++i) {
        uint16_t d = i < a.rank() ? (uint16_t)a.shape[i] : 0;
        hdr[8 + 2 * i] = (unsigned char)(d & 0xff);
        hdr[9 + 2 * i] = (unsigned char)(d >> 8);
    }
    f.write((const char*)hdr, 16);
    f.write((const char*)a.v.data(), (std::streamsize)(a.v.size() * sizeof(double)));
    if (!f) throw std::runtime_error("write_array: write failed for " + path);
}

Array read_array(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_array: cannot open " + path);
    unsigned char hdr[16];
    f.read((char*)hdr, 16);
    if (!f || std::memcmp(hdr, "HADM", 4) != 0 || hdr[4] != 0)
        throw std::runtime_error("read_array: bad header in " + path);
    int rank = hdr[5];
    if (rank > 4) throw std::runtime_error("read_array: bad rank in " + path);
    std::vector<int> shape;
    for (int i = 0; i < rank; ++i)
        shape.push_back((int)hdr[8 + 2 * i] | ((int)hdr[9 + 2 * i] << 8));
    Array a(shape);
    f.read((char*)a.v.data(), (std::streamsize)(a.v.size() * sizeof(double)));
    if (!f) throw std::runtime_error("read_array: truncated data in " + path);
    return a;
}

uint64_t file_checksum(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checksum: cannot open " + path);
    uint64_t h = 1469598103934665603ull;
    char buf[65536];
    while (f) {
        f.read(buf, sizeof(buf));
        std::streamsize n = f.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= (unsigned char)buf[i];
            h *= 1099511628211ull;
        }
    }
    return h;
}

static std::string tile_file(int id, const std::string& kind) {
    return "tile_" + std::to_string(id) + "_" + kind + ".arr";
}

void write_dataset(const std::string& dir, const Dataset& ds) {
    fs::create_directories(dir);
    DatasetManifest m = ds.manifest;  // checksums recomputed below
    m.checksums.clear();
    for (auto& t : ds.tiles) {
        struct Entry {
            const char* kind;
            const Array* a;
        } entries[] = {{"he", &t.he.rgb}, {"seg", &t.seg}, {"hr", &t.hr_raw}, {"lr", &t.lr_raw}};
        for (auto& e : entries) {
            std::string name = tile_file(t.id, e.kind);
            write_array(dir + "/" + name, *e.a);
            m.checksums[name] = file_checksum(dir + "/" + name);
        }
    }
    json j;
    j["name"] = m.name;
    j["num_tiles"] = m.num_tiles;
    j["gene_panel"] = m.gene_panel;
    j["hr_size"] = m.hr_size;
    j["lr_size"] = m.lr_size;
    j["pixel_size_um_hr"] = m.pixel_size_um_hr;
    j["pixel_size_um_lr"] = m.pixel_size_um_lr;
    j["seed"] = m.seed;
    j["train_split"] = m.train_split;
    j["test_split"] = m.test_split;
    json norm;
    for (auto& [g, nz] : m.normalization) norm[g] = {nz.min_log1p, nz.max_log1p};
    j["normalization"] = norm;
    json cks;
    for (auto& [f2, c] : m.checksums) cks[f2] = c;
    j["checksums"] = cks;
    std::ofstream f(dir + "/manifest.json");
    f << j.dump(2) << "\n";
    if (!f) throw std::runtime_error("write_dataset: manifest write failed");
}

Dataset read_dataset(const std::string& dir) {
    std::ifstream f(dir + "/manifest.json");
    if (!f) throw std::runtime_error("read_dataset: missing manifest in " + dir);
    json j;
    f >> j;
    Dataset ds;
    DatasetManifest& m = ds.manifest;
    m.name = j.at("name");
    m.num_tiles = j.at("num_tiles");
    m.gene_panel = j.at("gene_panel").get<std::vector<std::string>>();
    m.hr_size = j.at("hr_size");
    m.lr_size = j.at("lr_size");
    m.pixel_size_um_hr = j.at("pixel_size_um_hr");
    m.pixel_size_um_lr = j.at("pixel_size_um_lr");
    m.seed = j.at("seed");
    m.train_split = j.at("train_split").get<std::vector<int>>();
    m.test_split = j.at("test_split").get<std::vector<int>>();
    for (auto& [g, nz] : j.at("normalization").items())
        m.normalization[g] = {nz[0].get<double>(), nz[1].get<double>()};
    for (auto& [f2, c] : j.at("checksums").items()) m.checksums[f2] = c.get<uint64_t>();

    // split sanity
    std::unordered_set<int> train(m.train_split.begin(), m.train_split.end());
    for (int id : m.test_split)
        if (train.count(id))
            throw std::runtime_error("read_dataset: splits overlap at tile " +
                                     std::to_string(id));

    ds.tiles.resize(m.num_tiles);
    for (int id = 0; id < m.num_tiles; ++id) {
        Tile& t = ds.tiles[id];
        t.id = id;
        const char* kinds[] = {"he", "seg", "hr", "lr"};
        for (const char* kind : kinds) {
            std::string name = tile_file(id, kind);
            std::string path = dir + "/" + name;
            auto it = m.checksums.find(name);
            if (it == m.checksums.end() || !fs::exists(path))
                throw std::runtime_error("read_dataset: missing file for tile " +
                                         std::to_string(id) + " (" + name + ")");
            if (file_checksum(path) != it->second)
                throw std::runtime_error("read_dataset: checksum mismatch for tile " +
                                         std::to_string(id) + " (" + name + ")");
        }
        t.he.rgb = read_array(dir + "/" + tile_file(id, "he"));
        t.seg = read_array(dir + "/" + tile_file(id, "seg"));
        t.hr_raw = read_array(dir + "/" + tile_file(id, "hr"));
        t.lr_raw = read_array(dir + "/" + tile_file(id, "lr"));
        if (t.hr_raw.shape[0] != (int)m.gene_panel.size())
            throw std::runtime_error("read_dataset: gene count mismatch for tile " +
                                     std::to_string(id));
    }
    return ds;
}

}  // namespace data
}  // namespace hadmst
