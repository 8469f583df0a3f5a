#include "doctest.h"

#include "gradcheck.hpp"
#include "hadmst/autograd.hpp"
#include "hadmst/nn.hpp"
#include "hadmst/rng.hpp"

using namespace hadmst;
using ag::Var;
using hadmst_test::fd_check;

namespace {

// Builds a scalar loss from a graph function of one leaf, runs backward, and
// compares against central differences.
double check_graph(const Array& x0, const std::function<Var(const Var&)>& f, double h = 1e-5) {
    Var x = ag::leaf(x0);
    Var loss = f(x);
    ag::backward(loss);
    Array analytic = x->grad;
    Array param = x0;
    auto eval = [&]() {
        Var xv = ag::constant(param);
        return ag::scalar(f(xv));
    };
    // fd_check perturbs `param`, which eval reads
    Var dummy;
    return fd_check(param, analytic, eval, h);
}

}  // namespace

TEST_CASE("elementwise and reduction gradients") {
    Rng rng(7);
    Array x = rng.normal_array({3, 4});
    CHECK(check_graph(x, [](const Var& v) { return ag::mean_all(ag::square(v)); }) < 1e-6);
    CHECK(check_graph(x, [](const Var& v) { return ag::sum_all(ag::mul(ag::sigmoid(v), v)); }) < 1e-6);
    CHECK(check_graph(x, [](const Var& v) { return ag::mean_all(ag::silu(v)); }) < 1e-6);
    CHECK(check_graph(x, [](const Var& v) { return ag::sum_all(ag::softplus(v)); }) < 1e-6);
    CHECK(check_graph(x, [](const Var& v) {
              return ag::mean_all(ag::exp_op(ag::scale(v, 0.3)));
          }) < 1e-6);
}

TEST_CASE("matmul / linear algebra gradients") {
    Rng rng(8);
    Array a = rng.normal_array({3, 5});
    Array b = rng.normal_array({5, 2});
    Var bv = ag::constant(b);
    CHECK(check_graph(a, [&](const Var& v) {
              return ag::mean_all(ag::square(ag::matmul(v, bv)));
          }) < 1e-6);
    Array bias = rng.normal_array({5});
    Var biasv = ag::constant(bias);
    CHECK(check_graph(a, [&](const Var& v) {
              return ag::sum_all(ag::square(ag::add_rowvec(v, biasv)));
          }) < 1e-6);
    CHECK(check_graph(a, [&](const Var& v) {
              return ag::mean_all(ag::square(ag::transpose2d(v)));
          }) < 1e-6);
}

TEST_CASE("softmax, layer norm and group norm gradients") {
    Rng rng(9);
    Array x = rng.normal_array({4, 6});
    Array probe = rng.normal_array({4, 6});
    Var pv = ag::constant(probe);
    CHECK(check_graph(x, [&](const Var& v) {
              return ag::sum_all(ag::mul(ag::softmax_rows(v), pv));
          }) < 1e-6);

    Array gamma = rng.uniform_array({6}, 0.5, 1.5), beta = rng.normal_array({6});
    Var g = ag::constant(gamma), bt = ag::constant(beta);
    CHECK(check_graph(x, [&](const Var& v) {
              return ag::sum_all(ag::mul(ag::layer_norm_rows(v, g, bt), pv));
          }, 1e-6) < 1e-5);

    Array x4 = rng.normal_array({2, 4, 3, 3});
    Array probe4 = rng.normal_array({2, 4, 3, 3});
    Array gam4 = rng.uniform_array({4}, 0.5, 1.5), bet4 = rng.normal_array({4});
    Var p4 = ag::constant(probe4), g4 = ag::constant(gam4), b4 = ag::constant(bet4);
    CHECK(check_graph(x4, [&](const Var& v) {
              return ag::sum_all(ag::mul(ag::group_norm(v, g4, b4, 2), p4));
          }, 1e-6) < 1e-5);
}

TEST_CASE("conv2d matches direct convolution and gradcheck passes") {
    Rng rng(10);
    Array x = rng.normal_array({2, 3, 5, 5});
    Array w = rng.normal_array({4, 3, 3, 3});
    Array b = rng.normal_array({4});

    Var xv = ag::constant(x), wv = ag::constant(w), bv = ag::constant(b);
    Var y = ag::conv2d(xv, wv, bv, 1, 1);

    // direct scalar-loop convolution oracle
    for (int n = 0; n < 2; ++n)
        for (int co = 0; co < 4; ++co)
            for (int i = 0; i < 5; ++i)
                for (int j = 0; j < 5; ++j) {
                    double acc = b[co];
                    for (int ci = 0; ci < 3; ++ci)
                        for (int ki = 0; ki < 3; ++ki)
                            for (int kj = 0; kj < 3; ++kj) {
                                int hi = i - 1 + ki, wj = j - 1 + kj;
                                if (hi < 0 || hi >= 5 || wj < 0 || wj >= 5) continue;
                                acc += x.at(n, ci, hi, wj) * w.at(co, ci, ki, kj);
                            }
                    CHECK(y->value.at(n, co, i, j) == doctest::Approx(acc).epsilon(1e-12));
                }

    Array probe = rng.normal_array({2, 4, 5, 5});
    Var pv = ag::constant(probe);
    CHECK(check_graph(x, [&](const Var& v) {
              return ag::sum_all(ag::mul(ag::conv2d(v, wv, bv, 1, 1), pv));
          }) < 1e-6);
    // weight gradient
    Var xl = ag::constant(x);
    CHECK(check_graph(w, [&](const Var& v) {
              return ag::sum_all(ag::mul(ag::conv2d(xl, v, bv, 1, 1), pv));
          }) < 1e-6);
    // strided case
    Array probe2 = rng.normal_array({2, 4, 3, 3});
    Var p2 = ag::constant(probe2);
    CHECK(check_graph(x, [&](const Var& v) {
              return ag::sum_all(ag::mul(ag::conv2d(v, wv, bv, 2, 1), p2));
          }) < 1e-6);
}

TEST_CASE("resize, pooling and broadcast gradients") {
    Rng rng(11);
    Array x = rng.normal_array({2, 3, 6, 6});
    Array probe = rng.normal_array({2, 3, 9, 9});
    Var pv = ag::constant(probe);
    CHECK(check_graph(x, [&](const Var& v) {
              return ag::sum_all(ag::mul(ag::bilinear_resize(v, 9, 9), pv));
          }) < 1e-6);

    Array probe_dn = rng.normal_array({2, 3, 4, 4});
    Var pd = ag::constant(probe_dn);
    CHECK(check_graph(x, [&](const Var& v) {
              return ag::sum_all(ag::mul(ag::area_resize(v, 4, 4), pd));
          }) < 1e-6);

    Array pool_probe = rng.normal_array({2, 3});
    Var pp = ag::constant(pool_probe);
    CHECK(check_graph(x, [&](const Var& v) {
              return ag::sum_all(ag::mul(ag::global_avg_pool(v), pp));
          }) < 1e-6);

    Array sc = rng.normal_array({2, 3}), sh = rng.normal_array({2, 3});
    Var scv = ag::constant(sc), shv = ag::constant(sh);
    Array probe_same = rng.normal_array({2, 3, 6, 6});
    Var ps = ag::constant(probe_same);
    CHECK(check_graph(x, [&](const Var& v) {
              return ag::sum_all(ag::mul(ag::film(v, scv, shv), ps));
          }) < 1e-5);
    CHECK(check_graph(sc, [&](const Var& v) {
              return ag::sum_all(ag::mul(ag::film(ag::constant(x), v, shv), ps));
          }) < 1e-6);

    Array emb = rng.normal_array({2, 3});
    CHECK(check_graph(emb, [&](const Var& v) {
              return ag::sum_all(ag::square(ag::channel_dot(ag::constant(x), v)));
          }) < 1e-6);

    Array vec = rng.normal_array({3});
    CHECK(check_graph(vec, [&](const Var& v) {
              return ag::sum_all(ag::mul(ag::tile_chan(v, 2, 6, 6), ps));
          }) < 1e-6);
}

TEST_CASE("area_resize preserves constants and the global mean") {
    Rng rng(12);
    Array x = rng.uniform_array({1, 2, 17, 17}, -1, 1);
    Var y = ag::area_resize(ag::constant(x), 5, 5);
    double mx = 0, my = 0;
    for (double v : x.v) mx += v;
    for (double v : y->value.v) my += v;
    mx /= x.numel();
    my /= y->value.numel();
    CHECK(mx == doctest::Approx(my).epsilon(1e-10));

    Array c = Array::full({1, 1, 13, 13}, 0.37);
    Var yc = ag::area_resize(ag::constant(c), 4, 4);
    for (double v : yc->value.v) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("similarity matrix gradients") {
    Rng rng(13);
    Array fm = rng.normal_array({3, 4}), fs = rng.normal_array({3, 4});
    Array probe = rng.normal_array({3, 3});
    Var fsv = ag::constant(fs), pv = ag::constant(probe);
    CHECK(check_graph(fm, [&](const Var& v) {
              return ag::sum_all(ag::mul(ag::cosine_matrix_op(v, fsv, 1e-8), pv));
          }) < 1e-6);
    CHECK(check_graph(fm, [&](const Var& v) {
              return ag::sum_all(ag::mul(ag::euclidean_matrix_op(v, fsv), pv));
          }) < 1e-6);
    Var fmv = ag::constant(fm);
    CHECK(check_graph(fs, [&](const Var& v) {
              return ag::sum_all(ag::mul(ag::cosine_matrix_op(fmv, v, 1e-8), pv));
          }) < 1e-6);
}

TEST_CASE("concat / slice / permute gradients") {
    Rng rng(14);
    Array a = rng.normal_array({2, 3}), b = rng.normal_array({2, 2});
    Var bv = ag::constant(b);
    CHECK(check_graph(a, [&](const Var& v) {
              return ag::mean_all(ag::square(ag::concat_cols({v, bv})));
          }) < 1e-6);
    Array x4 = rng.normal_array({2, 3, 2, 2});
    CHECK(check_graph(x4, [&](const Var& v) {
              return ag::mean_all(ag::square(ag::nchw_to_rows(v)));
          }) < 1e-6);
    CHECK(check_graph(a, [&](const Var& v) {
              return ag::sum_all(ag::square(ag::slice_cols(v, 1, 3)));
          }) < 1e-6);
    Array c4 = rng.normal_array({1, 2, 2, 2});
    Var c4v = ag::constant(c4);
    Array x14 = rng.normal_array({1, 3, 2, 2});
    CHECK(check_graph(x14, [&](const Var& v) {
              return ag::mean_all(ag::square(ag::concat_channels({v, c4v})));
          }) < 1e-6);
}

TEST_CASE("no-grad guard suppresses tape recording") {
    Array x = Array::full({2, 2}, 1.5);
    Var leafv = ag::leaf(x);
    {
        ag::NoGradGuard ng;
        Var y = ag::mean_all(ag::square(leafv));
        CHECK_FALSE(y->requires_grad);
        CHECK(y->parents.empty());
    }
    Var y2 = ag::mean_all(ag::square(leafv));
    CHECK(y2->requires_grad);
}
