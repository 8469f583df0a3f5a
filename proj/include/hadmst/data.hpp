#pragma once

// Synthetic dataset generation, tiling geometry, normalization and on-disk
// persistence.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hadmst/array.hpp"
#include "hadmst/hsd.hpp"
#include "hadmst/rng.hpp"

namespace hadmst {
namespace data {

struct GeneNorm {
    double min_log1p = 0.0;
    double max_log1p = 0.0;
};

struct DatasetManifest {
    std::string name;
    int num_tiles = 0;
    std::vector<std::string> gene_panel;
    int hr_size = 256;
    int lr_size = 26;
    double pixel_size_um_hr = 10.0;
    double pixel_size_um_lr = 100.0;
    std::map<std::string, GeneNorm> normalization;  // per-gene (min,max) in log1p space
    std::vector<int> train_split, test_split;
    uint64_t seed = 0;
    std::map<std::string, uint64_t> checksums;  // per tile file
};

struct Tile {
    int id = 0;
    hsd::HistologyTile he;
    Array seg;     // [1, H, W]
    Array hr_raw;  // [C, H, W], raw nonnegative expression
    Array lr_raw;  // [C, h, w]
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<Tile> tiles;  // indexed by tile id
};

struct SyntheticConfig {
    int genes = 8;
    int hr_size = 64;
    int lr_size = 6;
    int train_tiles = 256;
    int test_tiles = 64;
    uint64_t seed = 0;
    std::string name = "synthetic";
};

// One procedurally generated (histology, HR expression) pair built from
// Gaussian cell-cluster blobs with latent types; expression is a fixed linear
// map of type densities so morphology -> expression is learnable and genes are
// co-expressed. forced_num_blobs >= 0 overrides the random blob count.
std::pair<hsd::HistologyTile, Array> generate_synthetic_pair(Rng& rng, int genes, int size,
                                                             int forced_num_blobs = -1);

// Exact area-weighted average pooling with fractional bin edges.
Array downsample_st(const Array& hr_chw, int lr_h, int lr_w);

// log1p -> per-gene min-max to [0,1]  (eval space)
Array normalize01(const Array& raw_chw, const DatasetManifest& m);
// model space [-1, 1]
Array normalize_expression(const Array& raw_chw, const DatasetManifest& m);
Array denormalize_expression(const Array& model_chw, const DatasetManifest& m);
// [-1,1] -> [0,1] without leaving log1p space (for metric computation)
Array model_to_eval01(const Array& model_chw);

// Highly-variable-gene ranking by log1p variance (ties broken by identifier).
std::vector<int> select_hvg(const Array& expression_samples /*[M,G]*/,
                            const std::vector<std::string>& names, int k);

// Order-preserving union of gene panels (duplicates dropped).
std::vector<std::string> merge_gene_panels(const std::vector<std::vector<std::string>>& panels);

// Generates the full corpus, computes train-split normalization stats, splits
// tiles; fully reproducible from (config.seed, config).
Dataset generate_dataset(const SyntheticConfig& cfg);

void write_dataset(const std::string& dir, const Dataset& ds);
Dataset read_dataset(const std::string& dir);

// Flat-array persistence: 16-byte header (magic, dtype, rank, dims) + raw
// little-endian doubles.
void write_array(const std::string& path, const Array& a);
Array read_array(const std::string& path);
uint64_t file_checksum(const std::string& path);

}  // namespace data
}  // namespace hadmst
