#include "hadmst/hsd.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iostream>

namespace hadmst {
namespace hsd {

SegMask segment_cells(const HistologyTile& tile, double theta) {
    int H = tile.rgb.shape[1], W = tile.rgb.shape[2];
    SegMask seg;
    seg.mask = Array({1, H, W});
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            double mean_rgb = (tile.rgb.v[(size_t)0 * H * W + h * W + w] +
                               tile.rgb.v[(size_t)1 * H * W + h * W + w] +
                               tile.rgb.v[(size_t)2 * H * W + h * W + w]) /
                              3.0;
            seg.mask.v[(size_t)h * W + w] = (1.0 - mean_rgb) > theta ? 1.0 : 0.0;
        }
    return seg;
}

static uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

static std::string normalize_prompt(const std::string& prompt) {
    std::string out;
    bool prev_space = true;
    for (char c : prompt) {
        if (std::isspace((unsigned char)c)) {
            if (!prev_space) out.push_back(' ');
            prev_space = true;
        } else {
            out.push_back((char)std::tolower((unsigned char)c));
            prev_space = false;
        }
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

Array stub_prompt_vector(const std::string& prompt, int d_text) {
    std::string norm = normalize_prompt(prompt);
    if (norm.empty()) throw std::invalid_argument("embed_prompt: empty prompt");
    Rng rng(fnv1a(norm));
    Array v = rng.normal_array({d_text});
    double n2 = 0;
    for (double x : v.v) n2 += x * x;
    double inv = 1.0 / std::max(std::sqrt(n2), 1e-12);
    for (double& x : v.v) x *= inv;
    return v;
}

Array SemanticEncoder::positional_encoding(int hp, int wp, int width) {
    Array pe({hp * wp, width});
    int half = width / 2;
    for (int i = 0; i < hp; ++i)
        for (int j = 0; j < wp; ++j) {
            int row = i * wp + j;
            for (int k = 0; k < half / 2; ++k) {
                double freq = std::pow(10000.0, -2.0 * k / half);
                pe.at(row, 2 * k) = std::sin(i * freq);
                pe.at(row, 2 * k + 1) = std::cos(i * freq);
                pe.at(row, half + 2 * k) = std::sin(j * freq);
                pe.at(row, half + 2 * k + 1) = std::cos(j * freq);
            }
        }
    return pe;
}

SemanticEncoder::SemanticEncoder(nn::ParamStore& ps, const std::string& prefix,
                                 const HsdConfig& cfg, Rng& rng)
    : cfg_(cfg) {
    stem1_ = nn::Conv2d(ps, prefix + ".stem1", 4, 32, 3, 1, 1, rng);
    stem2_ = nn::Conv2d(ps, prefix + ".stem2", 32, 48, 3, 2, 1, rng);
    stem3_ = nn::Conv2d(ps, prefix + ".stem3", 48, 64, 3, 2, 1, rng);
    patch_embed_ = nn::Conv2d(ps, prefix + ".patch_embed", 4, cfg.width, cfg.patch, cfg.patch,
                              0, rng);
    blocks_.resize(cfg.layers);
    for (int l = 0; l < cfg.layers; ++l) {
        std::string bp = prefix + ".block" + std::to_string(l);
        blocks_[l].ln1 = nn::LayerNorm(ps, bp + ".ln1", cfg.width);
        blocks_[l].ln2 = nn::LayerNorm(ps, bp + ".ln2", cfg.width);
        blocks_[l].qkv = nn::Linear(ps, bp + ".qkv", cfg.width, 3 * cfg.width, rng);
        blocks_[l].proj = nn::Linear(ps, bp + ".proj", cfg.width, cfg.width, rng);
        blocks_[l].fc1 = nn::Linear(ps, bp + ".fc1", cfg.width, 2 * cfg.width, rng);
        blocks_[l].fc2 = nn::Linear(ps, bp + ".fc2", 2 * cfg.width, cfg.width, rng);
    }
    merge_ = nn::Conv2d(ps, prefix + ".merge", 64 + cfg.width, cfg.out_channels, 1, 1, 0, rng);
    // fixed seeded projection, stable across processes
    Rng prng(0x48614D5354ull);  // "HaMST"
    prompt_proj_ = prng.normal_array({cfg.d_text, cfg.d_text}, 0.0,
                                     1.0 / std::sqrt((double)cfg.d_text));
    film_ = nn::Linear(ps, prefix + ".film", cfg.d_text, 2 * cfg.out_channels, rng,
                       /*zero_init=*/true);
}

Var SemanticEncoder::transformer_forward(const Var& tokens) const {
    int np = tokens->value.shape[0];
    int dh = cfg_.width / cfg_.heads;
    Var x = tokens;
    for (auto& b : blocks_) {
        Var h = b.ln1.forward(x);
        Var qkv = b.qkv.forward(h);
        std::vector<Var> head_outs;
        for (int hd = 0; hd < cfg_.heads; ++hd) {
            Var q = ag::slice_cols(qkv, hd * dh, (hd + 1) * dh);
            Var k = ag::slice_cols(qkv, cfg_.width + hd * dh, cfg_.width + (hd + 1) * dh);
            Var v = ag::slice_cols(qkv, 2 * cfg_.width + hd * dh, 2 * cfg_.width + (hd + 1) * dh);
            Var scores = ag::scale(ag::matmul(q, ag::transpose2d(k)), 1.0 / std::sqrt((double)dh));
            Var attn = ag::softmax_rows(scores);
            head_outs.push_back(ag::matmul(attn, v));
        }
        x = ag::add(x, b.proj.forward(ag::concat_cols(head_outs)));
        Var m = b.ln2.forward(x);
        x = ag::add(x, b.fc2.forward(ag::silu(b.fc1.forward(m))));
        (void)np;
    }
    return x;
}

Var SemanticEncoder::patch_tokens_with_pos(const Var& x, int sample) const {
    Var xs = ag::slice_axis0(x, sample, sample + 1);
    Var grid = patch_embed_.forward(xs);  // [1, width, Hp, Wp]
    int hp = grid->value.shape[2], wp = grid->value.shape[3];
    Var tok = ag::nchw_to_rows(grid);  // [Hp*Wp, width]
    Var pos = ag::constant(positional_encoding(hp, wp, cfg_.width));
    return ag::add(tok, pos);
}

Var SemanticEncoder::encode_morphology(const Var& x) const {
    if (x->value.rank() != 4 || x->value.shape[1] != 4)
        throw std::invalid_argument("encode_morphology: expected [N,4,H,W] input");
    int N = x->value.shape[0], H = x->value.shape[2], W = x->value.shape[3];
    if (H % cfg_.patch != 0 || W % cfg_.patch != 0)
        throw std::invalid_argument("encode_morphology: size not divisible by patch");
    Var stem = ag::silu(stem3_.forward(ag::silu(stem2_.forward(ag::silu(stem1_.forward(x))))));
    int hq = stem->value.shape[2], wq = stem->value.shape[3];

    Var grid = patch_embed_.forward(x);  // [N, width, Hp, Wp]
    int hp = grid->value.shape[2], wp = grid->value.shape[3];
    Var pos = ag::constant(positional_encoding(hp, wp, cfg_.width));
    Var rows = ag::nchw_to_rows(grid);  // [N*Hp*Wp, width], sample-major
    std::vector<Var> outs;
    for (int n = 0; n < N; ++n) {
        Var tok = ag::slice_axis0(rows, n * hp * wp, (n + 1) * hp * wp);
        outs.push_back(transformer_forward(ag::add(tok, pos)));
    }
    Var tok_grid = ag::rows_to_nchw(ag::concat_axis0(outs), N, hp, wp);
    Var tok_up = ag::bilinear_resize(tok_grid, hq, wq);
    return merge_.forward(ag::concat_channels({stem, tok_up}));
}

PromptEmbedding SemanticEncoder::embed_prompt(const std::string& prompt,
                                              PromptBackend* backend) const {
    std::string norm = normalize_prompt(prompt);
    if (norm.empty()) throw std::invalid_argument("embed_prompt: empty prompt");
    Array raw({0});
    PromptEmbedding out;
    out.prompt_text = prompt;
    if (backend) {
        try {
            std::vector<double> v = backend->embed(prompt);
            if ((int)v.size() != cfg_.d_text)
                throw std::runtime_error("backend returned wrong dimension");
            raw = Array({cfg_.d_text}, std::move(v));
            out.source = PromptEmbedding::kExternal;
        } catch (const std::exception& e) {
            std::cerr << "[hsd] prompt backend failed (" << e.what()
                      << "); falling back to stub embedding\n";
            backend = nullptr;
        }
    }
    if (!backend) {
        raw = stub_prompt_vector(prompt, cfg_.d_text);
        out.source = PromptEmbedding::kStub;
    }
    // project then L2-normalize
    Array proj({cfg_.d_text});
    for (int i = 0; i < cfg_.d_text; ++i) {
        double acc = 0;
        for (int j = 0; j < cfg_.d_text; ++j) acc += prompt_proj_.at(j, i) * raw[j];
        proj[i] = acc;
    }
    double n2 = 0;
    for (double v : proj.v) n2 += v * v;
    double inv = 1.0 / std::max(std::sqrt(n2), 1e-12);
    for (double& v : proj.v) v *= inv;
    out.vector = std::move(proj);
    return out;
}

Var SemanticEncoder::fuse_semantics(const Var& f_m, const PromptEmbedding& e_text) const {
    int N = f_m->value.shape[0], C = f_m->value.shape[1];
    if (C != cfg_.out_channels)
        throw std::invalid_argument("fuse_semantics: channel mismatch");
    Var e = ag::constant(Array({1, cfg_.d_text}, e_text.vector.v));
    Var st = film_.forward(e);  // [1, 2C], zero at init
    Var st_n = ag::repeat_rows(st, N);
    Var s = ag::slice_cols(st_n, 0, C);
    Var t = ag::slice_cols(st_n, C, 2 * C);
    return ag::film(f_m, s, t);
}

Var SemanticEncoder::encode(const Var& x, const PromptEmbedding& e_text,
                            bool prompt_fusion_on) const {
    Var fm = encode_morphology(x);
    return prompt_fusion_on ? fuse_semantics(fm, e_text) : fm;
}

}  // namespace hsd
}  // namespace hadmst
