#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "hadmst/array.hpp"

namespace hadmst {
namespace ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Array value;
    Array grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;  // accumulates into parents' grads
    int id = 0;                              // creation order, for topo sort

    Array& ensure_grad() {
        if (grad.v.empty()) grad = Array(value.shape);
        return grad;
    }
};

// Globally disables tape recording (inference / sampling paths).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

Var constant(Array v);                  // requires_grad = false
Var leaf(Array v);                      // trainable parameter
Var make_node(Array v, std::vector<Var> parents, std::function<void(Node&)> bwd);

// Runs reverse-mode accumulation from a scalar root. Grad of root seeds to 1.
void backward(const Var& root);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var softplus(const Var& a);
Var square(const Var& a);
Var exp_op(const Var& a);
Var log_op(const Var& a);

// ---- reductions ----
Var sum_all(const Var& a);   // -> [1]
Var mean_all(const Var& a);  // -> [1]

// ---- shape ----
Var reshape(const Var& a, std::vector<int> shape);
Var concat_axis0(const std::vector<Var>& xs);
Var slice_axis0(const Var& a, int i0, int i1);
Var transpose2d(const Var& a);
Var slice_cols(const Var& a, int c0, int c1);            // [N,M] -> [N,c1-c0]
Var concat_cols(const std::vector<Var>& xs);             // [N,Mi] -> [N,sum Mi]
Var concat_channels(const std::vector<Var>& xs);         // [N,Ci,H,W] -> [N,sum Ci,H,W]
Var nchw_to_rows(const Var& a);                          // [N,C,H,W] -> [N*H*W, C]
Var rows_to_nchw(const Var& a, int n, int h, int w);     // inverse of nchw_to_rows
Var repeat_rows(const Var& a, int n);                    // [1,M] -> [N,M]
Var broadcast_scalar_mul(const Var& x, const Var& s);    // x * s, s scalar Var [1]

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);                  // [N,K]x[K,M]
Var add_rowvec(const Var& x, const Var& b);              // [N,M] + [M]
Var add_colvec(const Var& x, const Var& b);              // [N,M] + [N] (per row)

// ---- softmax / normalization ----
Var softmax_rows(const Var& x);
// mask: 1 = keep, 0 = excluded from the softmax support (must keep >=1 per row)
Var masked_softmax_rows(const Var& x, const Array& mask);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);

// ---- conv / resize (batched NCHW) ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var bilinear_resize(const Var& x, int out_h, int out_w);
Var area_resize(const Var& x, int out_h, int out_w);  // exact fractional-overlap averaging
Var global_avg_pool(const Var& x);                    // [N,C,H,W] -> [N,C]

// ---- broadcast helpers ----
Var add_chan_bias(const Var& x, const Var& b);         // [N,C,H,W] + [C]
Var add_sample_chan(const Var& x, const Var& b);       // [N,C,H,W] + [N,C]
Var film(const Var& x, const Var& s, const Var& t);    // x*(1+s)+t with s,t [N,C]
Var tile_chan(const Var& vec, int n, int h, int w);    // [C] -> [N,C,H,W]
Var channel_dot(const Var& x, const Var& e);           // sum_c x[n,c,:,:]*e[n,c] -> [N,1,H,W]

// ---- similarity matrices (CMSA) ----
Var cosine_matrix_op(const Var& fm, const Var& fs, double eps);   // [N,d]x[M,d] -> [N,M]
Var euclidean_matrix_op(const Var& fm, const Var& fs, double eps = 1e-12);

// Numerics helpers on plain values
double scalar(const Var& a);

}  // namespace ag
}  // namespace hadmst
