#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "hadmst/cmsa.hpp"

using namespace hadmst;
using ag::Var;

namespace {

// Independent scalar oracle for the full contrastive objective.
double loss_oracle(const Array& c, const Array& d, const cmsa::PairSelection& pairs,
                   const cmsa::ContrastiveParams& p) {
    double pos_cos = 0, pos_euc = 0;
    for (auto& [i, j] : pairs.positives) {
        pos_cos += 1.0 - c.at(i, j);
        pos_euc += d.at(i, j) * d.at(i, j);
    }
    pos_cos /= pairs.positives.size();
    pos_euc /= pairs.positives.size();
    double neg_cos = 0, neg_euc = 0;
    for (auto& [i, j] : pairs.negatives) {
        neg_cos += std::max(0.0, c.at(i, j));
        double hinge = std::max(0.0, p.margin - d.at(i, j));
        neg_euc += hinge * hinge;
    }
    neg_cos /= pairs.negatives.size();
    neg_euc /= pairs.negatives.size();
    double info = 0;
    for (auto& [i, j] : pairs.positives) {
        double denom = std::exp(c.at(i, j) / p.tau);
        for (auto& [ni, nk] : pairs.negatives)
            if (ni == i) denom += std::exp(c.at(ni, nk) / p.tau);
        info += -std::log(std::exp(c.at(i, j) / p.tau) / denom);
    }
    info /= pairs.positives.size();
    return (pos_cos + neg_cos) + p.lambda1 * (pos_euc + neg_euc) + p.lambda2 * info;
}

}  // namespace

TEST_CASE("cosine matrix: hand values and zero-vector guard") {
    Array fm({3, 2}, std::vector<double>{1, 0, 1, 1, 0, 0});
    Array fs({2, 2}, std::vector<double>{1, 0, 0, 2});
    Array c = cmsa::cosine_matrix(fm, fs);
    REQUIRE(c.shape == std::vector<int>{3, 2});
    CHECK(c.at(0, 0) == doctest::Approx(1.0));
    CHECK(c.at(0, 1) == doctest::Approx(0.0));
    CHECK(c.at(1, 0) == doctest::Approx(1.0 / std::sqrt(2.0)));
    CHECK(c.at(1, 1) == doctest::Approx(1.0 / std::sqrt(2.0)));
    // zero row: guarded denominator, no NaN, similarity ~ 0
    CHECK(std::isfinite(c.at(2, 0)));
    CHECK(c.at(2, 0) == doctest::Approx(0.0));
}

TEST_CASE("euclidean matrix: 3-4-5 and self distance") {
    Array fm({2, 2}, std::vector<double>{0, 0, 3, 4});
    Array fs({2, 2}, std::vector<double>{0, 0, 3, 0});
    Array d = cmsa::euclidean_matrix(fm, fs);
    CHECK(d.at(0, 0) == doctest::Approx(0.0));
    CHECK(d.at(0, 1) == doctest::Approx(3.0));
    CHECK(d.at(1, 0) == doctest::Approx(5.0));
    CHECK(d.at(1, 1) == doctest::Approx(4.0));
}

TEST_CASE("pair selection: brute-force oracle on random matrices") {
    Rng rng(99);
    for (int trial = 0; trial < 5; ++trial) {
        int n = 4 + (int)rng.uniform_int(0, 3), m = 4 + (int)rng.uniform_int(0, 3);
        Array c = rng.uniform_array({n, m}, -1.0, 1.0);
        auto sel = cmsa::select_pairs(c);
        int k = (int)std::floor(0.3 * n * m);
        REQUIRE((int)sel.positives.size() == k);
        REQUIRE((int)sel.negatives.size() == k);
        // oracle: independent full sort of flat indices
        std::vector<int> idx(n * m);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
            if (c[a] != c[b]) return c[a] > c[b];
            return a < b;
        });
        for (int i = 0; i < k; ++i) {
            CHECK(sel.positives[i].first == idx[i] / m);
            CHECK(sel.positives[i].second == idx[i] % m);
            int bi = idx[n * m - k + i];
            CHECK(sel.negatives[i].first == bi / m);
            CHECK(sel.negatives[i].second == bi % m);
        }
    }
}

TEST_CASE("pair selection: deterministic ties and error cases") {
    // all-equal matrix: lexicographic order decides, and is stable across calls
    Array c({4, 4}, 0.5);
    auto a = cmsa::select_pairs(c);
    auto b = cmsa::select_pairs(c);
    CHECK(a.positives == b.positives);
    CHECK(a.negatives == b.negatives);
    CHECK(a.positives[0] == std::pair<int, int>{0, 0});

    // too few pairs for a 30% split
    Array tiny({1, 3}, 0.1);
    CHECK_THROWS_AS(cmsa::select_pairs(tiny), std::invalid_argument);

    Array nan_mat({4, 4}, 0.5);
    nan_mat[5] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS(cmsa::select_pairs(nan_mat));
}

TEST_CASE("selection is invariant to order-preserving rescaling") {
    Rng rng(7);
    Array c = rng.uniform_array({5, 5}, -1.0, 1.0);
    Array c2 = c;
    for (double& v : c2.v) v = 0.5 * v + 0.2;
    auto a = cmsa::select_pairs(c);
    auto b = cmsa::select_pairs(c2);
    CHECK(a.positives == b.positives);
    CHECK(a.negatives == b.negatives);
}

TEST_CASE("contrastive loss matches the scalar oracle") {
    Rng rng(11);
    cmsa::ContrastiveParams p;  // defaults: 0.5 / 1.0 / 0.1 / 1.0
    for (int trial = 0; trial < 3; ++trial) {
        Array c = rng.uniform_array({5, 5}, -1.0, 1.0);
        Array d = rng.uniform_array({5, 5}, 0.0, 2.0);
        auto pairs = cmsa::select_pairs(c);
        double got = cmsa::contrastive_loss(c, d, pairs, p);
        CHECK(got == doctest::Approx(loss_oracle(c, d, pairs, p)).epsilon(1e-10));
    }
    // tau must be positive
    cmsa::ContrastiveParams bad = p;
    bad.tau = 0.0;
    Array c({4, 4}, 0.3), d({4, 4}, 1.0);
    CHECK_THROWS(cmsa::contrastive_loss(c, d, cmsa::select_pairs(c), bad));
}

TEST_CASE("loss gradients through similarity matrices check against finite differences") {
    Rng rng(13);
    Array fm0 = rng.normal_array({4, 3});
    Array fs0 = rng.normal_array({4, 3});
    cmsa::ContrastiveParams p;
    // fix the pair selection from the initial features so the objective stays
    // differentiable at the evaluation point
    auto pairs = cmsa::select_pairs(cmsa::cosine_matrix(fm0, fs0));

    Var fm = ag::leaf(fm0);
    Var fs = ag::leaf(fs0);
    Var c = ag::cosine_matrix_op(fm, fs, 1e-8);
    Var d = ag::euclidean_matrix_op(fm, fs);
    Var loss = cmsa::contrastive_loss_op(c, d, pairs, p);
    ag::backward(loss);

    auto eval = [&]() {
        return cmsa::contrastive_loss(cmsa::cosine_matrix(fm->value, fs->value),
                                      cmsa::euclidean_matrix(fm->value, fs->value), pairs, p);
    };
    // h = 1e-4: several gradient entries are ~0, so a smaller step leaves the
    // finite-difference quotient dominated by roundoff noise
    CHECK(hadmst_test::fd_check(fm->value, fm->grad, eval, 1e-4) < 5e-4);
    CHECK(hadmst_test::fd_check(fs->value, fs->grad, eval, 1e-4) < 5e-4);
}

TEST_CASE("LR encoder produces grid-aligned region features") {
    nn::ParamStore ps;
    Rng rng(17);
    cmsa::LrEncoder enc(ps, "lr", 8, 16, rng);
    Rng drng(19);
    Array lr = drng.uniform_array({8, 3, 4}, -1.0, 1.0);
    cmsa::RegionFeatures rf = enc.encode(lr);
    REQUIRE(rf.features.shape == std::vector<int>{12, 16});
    REQUIRE(rf.coords.size() == 12);
    CHECK(rf.coords[0] == std::pair<int, int>{0, 0});
    CHECK(rf.coords[5] == std::pair<int, int>{1, 1});  // row-major over 3x4
    CHECK(rf.coords[11] == std::pair<int, int>{2, 3});

    // batched map agrees with the per-sample path
    ag::NoGradGuard ng;
    Var map = enc.encode_map(ag::constant(Array({1, 8, 3, 4}, lr.v)));
    REQUIRE(map->value.shape == std::vector<int>{1, 16, 3, 4});
    for (int r = 0; r < 12; ++r)
        for (int k = 0; k < 16; ++k)
            CHECK(rf.features.at(r, k) ==
                  doctest::Approx(map->value.v[(size_t)k * 12 + r]).epsilon(1e-12));
}
