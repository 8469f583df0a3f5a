#include "hadmst/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace hadmst {
namespace ag {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

namespace {
int g_next_id = 0;
int g_no_grad_depth = 0;
}  // namespace

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Var constant(Array v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = false;
    n->id = ++g_next_id;
    return n;
}

Var leaf(Array v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    n->id = ++g_next_id;
    return n;
}

Var make_node(Array v, std::vector<Var> parents, std::function<void(Node&)> bwd) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->id = ++g_next_id;
    bool req = false;
    for (auto& p : parents) req = req || (p && p->requires_grad);
    n->requires_grad = req && grad_enabled();
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(bwd);
    }
    return n;
}

void backward(const Var& root) {
    if (root->value.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar");
    // Collect reachable grad-requiring nodes, then run in descending id order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.get()};
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (!n || !n->requires_grad || seen.count(n)) continue;
        seen.insert(n);
        order.push_back(n);
        for (auto& p : n->parents) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
    root->ensure_grad().v[0] = 1.0;
    for (Node* n : order) {
        if (n->backward_fn && !n->grad.v.empty()) n->backward_fn(*n);
    }
}

double scalar(const Var& a) {
    if (a->value.numel() != 1) throw std::invalid_argument("scalar: not a scalar");
    return a->value.v[0];
}

// ---------------- elementwise ----------------

static Var binary_ew(const Var& a, const Var& b, const char* who,
                     double (*fwd)(double, double),
                     void (*bwd)(double, double, double, double&, double&)) {
    check_same_shape(a->value, b->value, who);
    Array out(a->value.shape);
    for (long i = 0; i < out.numel(); ++i) out[i] = fwd(a->value[i], b->value[i]);
    return make_node(std::move(out), {a, b}, [a, b, bwd](Node& n) {
        Array* ga = a->requires_grad ? &a->ensure_grad() : nullptr;
        Array* gb = b->requires_grad ? &b->ensure_grad() : nullptr;
        for (long i = 0; i < n.value.numel(); ++i) {
            double da = 0, db = 0;
            bwd(a->value[i], b->value[i], n.grad[i], da, db);
            if (ga) (*ga)[i] += da;
            if (gb) (*gb)[i] += db;
        }
    });
}

Var add(const Var& a, const Var& b) {
    return binary_ew(a, b, "add", [](double x, double y) { return x + y; },
                     [](double, double, double g, double& da, double& db) {
                         da = g;
                         db = g;
                     });
}

Var sub(const Var& a, const Var& b) {
    return binary_ew(a, b, "sub", [](double x, double y) { return x - y; },
                     [](double, double, double g, double& da, double& db) {
                         da = g;
                         db = -g;
                     });
}

Var mul(const Var& a, const Var& b) {
    return binary_ew(a, b, "mul", [](double x, double y) { return x * y; },
                     [](double x, double y, double g, double& da, double& db) {
                         da = g * y;
                         db = g * x;
                     });
}

static Var unary_ew(const Var& a, double (*fwd)(double),
                    double (*dfdx)(double /*x*/, double /*y*/)) {
    Array out(a->value.shape);
    for (long i = 0; i < out.numel(); ++i) out[i] = fwd(a->value[i]);
    return make_node(std::move(out), {a}, [a, dfdx](Node& n) {
        Array& ga = a->ensure_grad();
        for (long i = 0; i < n.value.numel(); ++i)
            ga[i] += n.grad[i] * dfdx(a->value[i], n.value[i]);
    });
}

Var neg(const Var& a) {
    return unary_ew(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var relu(const Var& a) {
    return unary_ew(a, [](double x) { return x > 0 ? x : 0.0; },
                    [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
    return unary_ew(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                    [](double, double y) { return y * (1.0 - y); });
}

Var silu(const Var& a) {
    return unary_ew(a,
                    [](double x) { return x / (1.0 + std::exp(-x)); },
                    [](double x, double) {
                        double s = 1.0 / (1.0 + std::exp(-x));
                        return s * (1.0 + x * (1.0 - s));
                    });
}

Var softplus(const Var& a) {
    return unary_ew(a,
                    [](double x) { return x > 30 ? x : std::log1p(std::exp(x)); },
                    [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Var square(const Var& a) {
    return unary_ew(a, [](double x) { return x * x; },
                    [](double x, double) { return 2.0 * x; });
}

Var exp_op(const Var& a) {
    return unary_ew(a, [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Var log_op(const Var& a) {
    return unary_ew(a, [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Var scale(const Var& a, double c) {
    Array out(a->value.shape);
    for (long i = 0; i < out.numel(); ++i) out[i] = a->value[i] * c;
    return make_node(std::move(out), {a}, [a, c](Node& n) {
        Array& ga = a->ensure_grad();
        for (long i = 0; i < n.value.numel(); ++i) ga[i] += n.grad[i] * c;
    });
}

Var add_scalar(const Var& a, double c) {
    Array out(a->value.shape);
    for (long i = 0; i < out.numel(); ++i) out[i] = a->value[i] + c;
    return make_node(std::move(out), {a}, [a](Node& n) {
        Array& ga = a->ensure_grad();
        for (long i = 0; i < n.value.numel(); ++i) ga[i] += n.grad[i];
    });
}

// ---------------- reductions ----------------

Var sum_all(const Var& a) {
    Array out({1});
    for (long i = 0; i < a->value.numel(); ++i) out[0] += a->value[i];
    return make_node(std::move(out), {a}, [a](Node& n) {
        Array& ga = a->ensure_grad();
        for (long i = 0; i < ga.numel(); ++i) ga[i] += n.grad[0];
    });
}

Var mean_all(const Var& a) {
    long m = a->value.numel();
    Array out({1});
    for (long i = 0; i < m; ++i) out[0] += a->value[i];
    out[0] /= (double)m;
    return make_node(std::move(out), {a}, [a, m](Node& n) {
        Array& ga = a->ensure_grad();
        double g = n.grad[0] / (double)m;
        for (long i = 0; i < m; ++i) ga[i] += g;
    });
}

// ---------------- shape ----------------

Var reshape(const Var& a, std::vector<int> shape) {
    if (Array::numel_of(shape) != a->value.numel())
        throw std::invalid_argument("reshape: element count mismatch");
    Array out(shape, a->value.v);
    return make_node(std::move(out), {a}, [a](Node& n) {
        Array& ga = a->ensure_grad();
        for (long i = 0; i < n.value.numel(); ++i) ga[i] += n.grad[i];
    });
}

Var concat_axis0(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_axis0: empty");
    std::vector<int> shape = xs[0]->value.shape;
    long inner = xs[0]->value.numel() / std::max(1, shape[0]);
    int total = 0;
    for (auto& x : xs) {
        if (std::vector<int>(x->value.shape.begin() + 1, x->value.shape.end()) !=
            std::vector<int>(shape.begin() + 1, shape.end()))
            throw std::invalid_argument("concat_axis0: trailing shape mismatch");
        total += x->value.shape[0];
    }
    shape[0] = total;
    Array out(shape);
    long off = 0;
    for (auto& x : xs) {
        std::copy(x->value.v.begin(), x->value.v.end(), out.v.begin() + off);
        off += x->value.numel();
    }
    std::vector<Var> parents(xs.begin(), xs.end());
    return make_node(std::move(out), parents, [xs, inner](Node& n) {
        long off = 0;
        for (auto& x : xs) {
            long m = x->value.numel();
            if (x->requires_grad) {
                Array& g = x->ensure_grad();
                for (long i = 0; i < m; ++i) g[i] += n.grad[off + i];
            }
            off += m;
        }
        (void)inner;
    });
}

Var slice_axis0(const Var& a, int i0, int i1) {
    auto shape = a->value.shape;
    if (i0 < 0 || i1 > shape[0] || i0 >= i1)
        throw std::invalid_argument("slice_axis0: bad range");
    long inner = a->value.numel() / shape[0];
    shape[0] = i1 - i0;
    Array out(shape);
    std::copy(a->value.v.begin() + i0 * inner, a->value.v.begin() + i1 * inner, out.v.begin());
    return make_node(std::move(out), {a}, [a, i0, inner](Node& n) {
        Array& ga = a->ensure_grad();
        for (long i = 0; i < n.value.numel(); ++i) ga[i0 * inner + i] += n.grad[i];
    });
}

Var transpose2d(const Var& a) {
    int r = a->value.shape[0], c = a->value.shape[1];
    Array out({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(j, i) = a->value.at(i, j);
    return make_node(std::move(out), {a}, [a, r, c](Node& n) {
        Array& ga = a->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) ga.at(i, j) += n.grad.at(j, i);
    });
}

Var slice_cols(const Var& a, int c0, int c1) {
    int r = a->value.shape[0], c = a->value.shape[1];
    if (c0 < 0 || c1 > c || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
    Array out({r, c1 - c0});
    for (int i = 0; i < r; ++i)
        for (int j = c0; j < c1; ++j) out.at(i, j - c0) = a->value.at(i, j);
    return make_node(std::move(out), {a}, [a, r, c0, c1](Node& n) {
        Array& ga = a->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = c0; j < c1; ++j) ga.at(i, j) += n.grad.at(i, j - c0);
    });
}

Var concat_cols(const std::vector<Var>& xs) {
    int r = xs[0]->value.shape[0];
    int total = 0;
    for (auto& x : xs) {
        if (x->value.shape[0] != r) throw std::invalid_argument("concat_cols: row mismatch");
        total += x->value.shape[1];
    }
    Array out({r, total});
    int off = 0;
    for (auto& x : xs) {
        int c = x->value.shape[1];
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) out.at(i, off + j) = x->value.at(i, j);
        off += c;
    }
    std::vector<Var> parents(xs.begin(), xs.end());
    return make_node(std::move(out), parents, [xs, r](Node& n) {
        int off = 0;
        for (auto& x : xs) {
            int c = x->value.shape[1];
            if (x->requires_grad) {
                Array& g = x->ensure_grad();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) g.at(i, j) += n.grad.at(i, off + j);
            }
            off += c;
        }
    });
}

Var concat_channels(const std::vector<Var>& xs) {
    int N = xs[0]->value.shape[0], H = xs[0]->value.shape[2], W = xs[0]->value.shape[3];
    int total = 0;
    for (auto& x : xs) {
        if (x->value.shape[0] != N || x->value.shape[2] != H || x->value.shape[3] != W)
            throw std::invalid_argument("concat_channels: shape mismatch");
        total += x->value.shape[1];
    }
    Array out({N, total, H, W});
    long hw = (long)H * W;
    for (int n = 0; n < N; ++n) {
        int coff = 0;
        for (auto& x : xs) {
            int c = x->value.shape[1];
            std::copy(x->value.v.begin() + (long)n * c * hw,
                      x->value.v.begin() + (long)(n + 1) * c * hw,
                      out.v.begin() + ((long)n * total + coff) * hw);
            coff += c;
        }
    }
    std::vector<Var> parents(xs.begin(), xs.end());
    return make_node(std::move(out), parents, [xs, N, hw, total](Node& nd) {
        for (int n = 0; n < N; ++n) {
            int coff = 0;
            for (auto& x : xs) {
                int c = x->value.shape[1];
                if (x->requires_grad) {
                    Array& g = x->ensure_grad();
                    for (long i = 0; i < (long)c * hw; ++i)
                        g[(long)n * c * hw + i] += nd.grad[((long)n * total + coff) * hw + i];
                }
                coff += c;
            }
        }
    });
}

Var nchw_to_rows(const Var& a) {
    int N = a->value.shape[0], C = a->value.shape[1], H = a->value.shape[2], W = a->value.shape[3];
    Array out({N * H * W, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w)
                    out.at((n * H + h) * W + w, c) = a->value.at(n, c, h, w);
    return make_node(std::move(out), {a}, [a, N, C, H, W](Node& nd) {
        Array& g = a->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w)
                        g.at(n, c, h, w) += nd.grad.at((n * H + h) * W + w, c);
    });
}

Var rows_to_nchw(const Var& a, int N, int H, int W) {
    int C = a->value.shape[1];
    if (a->value.shape[0] != N * H * W)
        throw std::invalid_argument("rows_to_nchw: row count mismatch");
    Array out({N, C, H, W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w)
                    out.at(n, c, h, w) = a->value.at((n * H + h) * W + w, c);
    return make_node(std::move(out), {a}, [a, N, C, H, W](Node& nd) {
        Array& g = a->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w)
                        g.at((n * H + h) * W + w, c) += nd.grad.at(n, c, h, w);
    });
}

Var repeat_rows(const Var& a, int n) {
    if (a->value.shape[0] != 1) throw std::invalid_argument("repeat_rows: expects [1,M]");
    int M = a->value.shape[1];
    Array out({n, M});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < M; ++j) out.at(i, j) = a->value.at(0, j);
    return make_node(std::move(out), {a}, [a, n, M](Node& nd) {
        Array& g = a->ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < M; ++j) g.at(0, j) += nd.grad.at(i, j);
    });
}

Var broadcast_scalar_mul(const Var& x, const Var& s) {
    if (s->value.numel() != 1) throw std::invalid_argument("broadcast_scalar_mul: s not scalar");
    double sv = s->value[0];
    Array out(x->value.shape);
    for (long i = 0; i < out.numel(); ++i) out[i] = x->value[i] * sv;
    return make_node(std::move(out), {x, s}, [x, s, sv](Node& nd) {
        if (x->requires_grad) {
            Array& g = x->ensure_grad();
            for (long i = 0; i < nd.value.numel(); ++i) g[i] += nd.grad[i] * sv;
        }
        if (s->requires_grad) {
            Array& g = s->ensure_grad();
            for (long i = 0; i < nd.value.numel(); ++i) g[0] += nd.grad[i] * x->value[i];
        }
    });
}

// ---------------- linear algebra ----------------

Var matmul(const Var& a, const Var& b) {
    Array out = matmul_value(a->value, b->value);
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        int N = a->value.shape[0], K = a->value.shape[1], M = b->value.shape[1];
        CMap A(a->value.v.data(), N, K), B(b->value.v.data(), K, M), G(n.grad.v.data(), N, M);
        if (a->requires_grad) {
            MMap GA(a->ensure_grad().v.data(), N, K);
            GA.noalias() += G * B.transpose();
        }
        if (b->requires_grad) {
            MMap GB(b->ensure_grad().v.data(), K, M);
            GB.noalias() += A.transpose() * G;
        }
    });
}

Var add_rowvec(const Var& x, const Var& b) {
    int N = x->value.shape[0], M = x->value.shape[1];
    if (b->value.numel() != M) throw std::invalid_argument("add_rowvec: size mismatch");
    Array out({N, M});
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < M; ++j) out.at(i, j) = x->value.at(i, j) + b->value[j];
    return make_node(std::move(out), {x, b}, [x, b, N, M](Node& n) {
        if (x->requires_grad) {
            Array& g = x->ensure_grad();
            for (long i = 0; i < n.value.numel(); ++i) g[i] += n.grad[i];
        }
        if (b->requires_grad) {
            Array& g = b->ensure_grad();
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < M; ++j) g[j] += n.grad.at(i, j);
        }
    });
}

Var add_colvec(const Var& x, const Var& b) {
    int N = x->value.shape[0], M = x->value.shape[1];
    if (b->value.numel() != N) throw std::invalid_argument("add_colvec: size mismatch");
    Array out({N, M});
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < M; ++j) out.at(i, j) = x->value.at(i, j) + b->value[i];
    return make_node(std::move(out), {x, b}, [x, b, N, M](Node& n) {
        if (x->requires_grad) {
            Array& g = x->ensure_grad();
            for (long i = 0; i < n.value.numel(); ++i) g[i] += n.grad[i];
        }
        if (b->requires_grad) {
            Array& g = b->ensure_grad();
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < M; ++j) g[i] += n.grad.at(i, j);
        }
    });
}

// ---------------- softmax / normalization ----------------

Var softmax_rows(const Var& x) {
    int N = x->value.shape[0], M = x->value.shape[1];
    Array out({N, M});
    for (int i = 0; i < N; ++i) {
        double mx = -1e300;
        for (int j = 0; j < M; ++j) mx = std::max(mx, x->value.at(i, j));
        double z = 0;
        for (int j = 0; j < M; ++j) z += std::exp(x->value.at(i, j) - mx);
        for (int j = 0; j < M; ++j) out.at(i, j) = std::exp(x->value.at(i, j) - mx) / z;
    }
    return make_node(std::move(out), {x}, [x, N, M](Node& n) {
        Array& g = x->ensure_grad();
        for (int i = 0; i < N; ++i) {
            double dot = 0;
            for (int j = 0; j < M; ++j) dot += n.grad.at(i, j) * n.value.at(i, j);
            for (int j = 0; j < M; ++j)
                g.at(i, j) += (n.grad.at(i, j) - dot) * n.value.at(i, j);
        }
    });
}

Var masked_softmax_rows(const Var& x, const Array& mask) {
    check_same_shape(x->value, mask, "masked_softmax_rows");
    int N = x->value.shape[0], M = x->value.shape[1];
    Array out({N, M});
    for (int i = 0; i < N; ++i) {
        double mx = -1e300;
        bool any = false;
        for (int j = 0; j < M; ++j)
            if (mask.at(i, j) > 0.5) { mx = std::max(mx, x->value.at(i, j)); any = true; }
        if (!any) throw std::invalid_argument("masked_softmax_rows: empty row support");
        double z = 0;
        for (int j = 0; j < M; ++j)
            if (mask.at(i, j) > 0.5) z += std::exp(x->value.at(i, j) - mx);
        for (int j = 0; j < M; ++j)
            out.at(i, j) = mask.at(i, j) > 0.5 ? std::exp(x->value.at(i, j) - mx) / z : 0.0;
    }
    return make_node(std::move(out), {x}, [x, N, M](Node& n) {
        Array& g = x->ensure_grad();
        for (int i = 0; i < N; ++i) {
            double dot = 0;
            for (int j = 0; j < M; ++j) dot += n.grad.at(i, j) * n.value.at(i, j);
            for (int j = 0; j < M; ++j)
                g.at(i, j) += (n.grad.at(i, j) - dot) * n.value.at(i, j);
        }
    });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
    int N = x->value.shape[0], M = x->value.shape[1];
    Array out({N, M});
    Array xhat({N, M}), inv_sigma({N});
    for (int i = 0; i < N; ++i) {
        double mu = 0;
        for (int j = 0; j < M; ++j) mu += x->value.at(i, j);
        mu /= M;
        double var = 0;
        for (int j = 0; j < M; ++j) {
            double d = x->value.at(i, j) - mu;
            var += d * d;
        }
        var /= M;
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (int j = 0; j < M; ++j) {
            double xh = (x->value.at(i, j) - mu) * is;
            xhat.at(i, j) = xh;
            out.at(i, j) = gamma->value[j] * xh + beta->value[j];
        }
    }
    return make_node(std::move(out), {x, gamma, beta},
                     [x, gamma, beta, xhat, inv_sigma, N, M](Node& n) {
        if (gamma->requires_grad) {
            Array& gg = gamma->ensure_grad();
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < M; ++j) gg[j] += n.grad.at(i, j) * xhat.at(i, j);
        }
        if (beta->requires_grad) {
            Array& gb = beta->ensure_grad();
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < M; ++j) gb[j] += n.grad.at(i, j);
        }
        if (x->requires_grad) {
            Array& gx = x->ensure_grad();
            for (int i = 0; i < N; ++i) {
                double m1 = 0, m2 = 0;
                for (int j = 0; j < M; ++j) {
                    double dxh = n.grad.at(i, j) * gamma->value[j];
                    m1 += dxh;
                    m2 += dxh * xhat.at(i, j);
                }
                m1 /= M;
                m2 /= M;
                for (int j = 0; j < M; ++j) {
                    double dxh = n.grad.at(i, j) * gamma->value[j];
                    gx.at(i, j) += inv_sigma[i] * (dxh - m1 - xhat.at(i, j) * m2);
                }
            }
        }
    });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    int N = x->value.shape[0], C = x->value.shape[1], H = x->value.shape[2], W = x->value.shape[3];
    if (C % groups != 0) throw std::invalid_argument("group_norm: C % groups != 0");
    int cpg = C / groups;
    long gsz = (long)cpg * H * W;
    Array out({N, C, H, W});
    Array xhat({N, C, H, W}), inv_sigma({N, groups});
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            double mu = 0;
            for (int c = g * cpg; c < (g + 1) * cpg; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) mu += x->value.at(n, c, h, w);
            mu /= (double)gsz;
            double var = 0;
            for (int c = g * cpg; c < (g + 1) * cpg; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        double d = x->value.at(n, c, h, w) - mu;
                        var += d * d;
                    }
            var /= (double)gsz;
            double is = 1.0 / std::sqrt(var + eps);
            inv_sigma.at(n, g) = is;
            for (int c = g * cpg; c < (g + 1) * cpg; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        double xh = (x->value.at(n, c, h, w) - mu) * is;
                        xhat.at(n, c, h, w) = xh;
                        out.at(n, c, h, w) = gamma->value[c] * xh + beta->value[c];
                    }
        }
    return make_node(std::move(out), {x, gamma, beta},
                     [x, gamma, beta, xhat, inv_sigma, N, C, H, W, groups, cpg, gsz](Node& nd) {
        if (gamma->requires_grad) {
            Array& gg = gamma->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w)
                            gg[c] += nd.grad.at(n, c, h, w) * xhat.at(n, c, h, w);
        }
        if (beta->requires_grad) {
            Array& gb = beta->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) gb[c] += nd.grad.at(n, c, h, w);
        }
        if (x->requires_grad) {
            Array& gx = x->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int g = 0; g < groups; ++g) {
                    double m1 = 0, m2 = 0;
                    for (int c = g * cpg; c < (g + 1) * cpg; ++c)
                        for (int h = 0; h < H; ++h)
                            for (int w = 0; w < W; ++w) {
                                double dxh = nd.grad.at(n, c, h, w) * gamma->value[c];
                                m1 += dxh;
                                m2 += dxh * xhat.at(n, c, h, w);
                            }
                    m1 /= (double)gsz;
                    m2 /= (double)gsz;
                    double is = inv_sigma.at(n, g);
                    for (int c = g * cpg; c < (g + 1) * cpg; ++c)
                        for (int h = 0; h < H; ++h)
                            for (int w = 0; w < W; ++w) {
                                double dxh = nd.grad.at(n, c, h, w) * gamma->value[c];
                                gx.at(n, c, h, w) +=
                                    is * (dxh - m1 - xhat.at(n, c, h, w) * m2);
                            }
                }
        }
    });
}

// ---------------- conv2d via im2col ----------------

static void im2col(const Array& x, int n, int kh, int kw, int stride, int pad,
                   int oh, int ow, Array& col) {
    int C = x.shape[1], H = x.shape[2], W = x.shape[3];
    // col: [C*kh*kw, oh*ow]
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                int row = (c * kh + ki) * kw + kj;
                for (int i = 0; i < oh; ++i) {
                    int hi = i * stride - pad + ki;
                    for (int j = 0; j < ow; ++j) {
                        int wj = j * stride - pad + kj;
                        col.at(row, i * ow + j) =
                            (hi >= 0 && hi < H && wj >= 0 && wj < W) ? x.at(n, c, hi, wj) : 0.0;
                    }
                }
            }
}

static void col2im_add(const Array& col, int n, int kh, int kw, int stride, int pad,
                       int oh, int ow, Array& gx) {
    int C = gx.shape[1], H = gx.shape[2], W = gx.shape[3];
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                int row = (c * kh + ki) * kw + kj;
                for (int i = 0; i < oh; ++i) {
                    int hi = i * stride - pad + ki;
                    if (hi < 0 || hi >= H) continue;
                    for (int j = 0; j < ow; ++j) {
                        int wj = j * stride - pad + kj;
                        if (wj < 0 || wj >= W) continue;
                        gx.at(n, c, hi, wj) += col.at(row, i * ow + j);
                    }
                }
            }
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    int N = x->value.shape[0], C = x->value.shape[1], H = x->value.shape[2], W = x->value.shape[3];
    int Cout = w->value.shape[0], kh = w->value.shape[2], kw = w->value.shape[3];
    if (w->value.shape[1] != C)
        throw std::invalid_argument("conv2d: channel mismatch");
    int oh = (H + 2 * pad - kh) / stride + 1;
    int ow = (W + 2 * pad - kw) / stride + 1;
    if (oh < 1 || ow < 1) throw std::invalid_argument("conv2d: output would be empty");
    Array out({N, Cout, oh, ow});
    Array col({C * kh * kw, oh * ow});
    CMap Wm(w->value.v.data(), Cout, C * kh * kw);
    for (int n = 0; n < N; ++n) {
        im2col(x->value, n, kh, kw, stride, pad, oh, ow, col);
        CMap Cm(col.v.data(), C * kh * kw, oh * ow);
        MMap Om(out.v.data() + (long)n * Cout * oh * ow, Cout, oh * ow);
        Om.noalias() = Wm * Cm;
        for (int co = 0; co < Cout; ++co)
            for (long p = 0; p < (long)oh * ow; ++p)
                out.v[((long)n * Cout + co) * oh * ow + p] += b->value[co];
    }
    return make_node(std::move(out), {x, w, b},
                     [x, w, b, N, C, Cout, kh, kw, stride, pad, oh, ow](Node& nd) {
        Array col({C * kh * kw, oh * ow});
        Array dcol({C * kh * kw, oh * ow});
        CMap Wm(w->value.v.data(), Cout, C * kh * kw);
        for (int n = 0; n < N; ++n) {
            CMap Gm(nd.grad.v.data() + (long)n * Cout * oh * ow, Cout, oh * ow);
            if (w->requires_grad) {
                im2col(x->value, n, kh, kw, stride, pad, oh, ow, col);
                CMap Cm(col.v.data(), C * kh * kw, oh * ow);
                MMap GW(w->ensure_grad().v.data(), Cout, C * kh * kw);
                GW.noalias() += Gm * Cm.transpose();
            }
            if (b->requires_grad) {
                Array& gb = b->ensure_grad();
                for (int co = 0; co < Cout; ++co)
                    for (long p = 0; p < (long)oh * ow; ++p)
                        gb[co] += nd.grad.v[((long)n * Cout + co) * oh * ow + p];
            }
            if (x->requires_grad) {
                MMap Dm(dcol.v.data(), C * kh * kw, oh * ow);
                Dm.noalias() = Wm.transpose() * Gm;
                col2im_add(dcol, n, kh, kw, stride, pad, oh, ow, x->ensure_grad());
            }
        }
    });
}

// ---------------- resize ----------------

Var bilinear_resize(const Var& x, int out_h, int out_w) {
    int N = x->value.shape[0], C = x->value.shape[1], H = x->value.shape[2], W = x->value.shape[3];
    if (H == out_h && W == out_w) return x;
    // half-pixel centers
    auto axis = [](int in, int out, int i, int& i0, int& i1, double& a) {
        double src = (i + 0.5) * (double)in / out - 0.5;
        if (src < 0) src = 0;
        if (src > in - 1) src = in - 1;
        i0 = (int)src;
        i1 = std::min(i0 + 1, in - 1);
        a = src - i0;
    };
    Array out({N, C, out_h, out_w});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < out_h; ++i) {
                int i0, i1;
                double ai;
                axis(H, out_h, i, i0, i1, ai);
                for (int j = 0; j < out_w; ++j) {
                    int j0, j1;
                    double aj;
                    axis(W, out_w, j, j0, j1, aj);
                    out.at(n, c, i, j) =
                        (1 - ai) * ((1 - aj) * x->value.at(n, c, i0, j0) +
                                    aj * x->value.at(n, c, i0, j1)) +
                        ai * ((1 - aj) * x->value.at(n, c, i1, j0) +
                              aj * x->value.at(n, c, i1, j1));
                }
            }
    return make_node(std::move(out), {x}, [x, N, C, H, W, out_h, out_w, axis](Node& nd) {
        Array& g = x->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < out_h; ++i) {
                    int i0, i1;
                    double ai;
                    axis(H, out_h, i, i0, i1, ai);
                    for (int j = 0; j < out_w; ++j) {
                        int j0, j1;
                        double aj;
                        axis(W, out_w, j, j0, j1, aj);
                        double gv = nd.grad.at(n, c, i, j);
                        g.at(n, c, i0, j0) += (1 - ai) * (1 - aj) * gv;
                        g.at(n, c, i0, j1) += (1 - ai) * aj * gv;
                        g.at(n, c, i1, j0) += ai * (1 - aj) * gv;
                        g.at(n, c, i1, j1) += ai * aj * gv;
                    }
                }
    });
}

// Per-axis fractional-overlap weights: output cell i covers [i*in/out, (i+1)*in/out).
struct AxisWeights {
    std::vector<std::vector<std::pair<int, double>>> w;  // per output index
};

static AxisWeights area_axis(int in, int out) {
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

Var area_resize(const Var& x, int out_h, int out_w) {
    int N = x->value.shape[0], C = x->value.shape[1], H = x->value.shape[2], W = x->value.shape[3];
    if (out_h > H || out_w > W)
        throw std::invalid_argument("area_resize: output larger than input");
    AxisWeights ah = area_axis(H, out_h), aw = area_axis(W, out_w);
    Array out({N, C, out_h, out_w});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < out_h; ++i)
                for (int j = 0; j < out_w; ++j) {
                    double acc = 0;
                    for (auto& [hi, wi] : ah.w[i])
                        for (auto& [hj, wj] : aw.w[j]) acc += wi * wj * x->value.at(n, c, hi, hj);
                    out.at(n, c, i, j) = acc;
                }
    return make_node(std::move(out), {x}, [x, N, C, out_h, out_w, ah, aw](Node& nd) {
        Array& g = x->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < out_h; ++i)
                    for (int j = 0; j < out_w; ++j) {
                        double gv = nd.grad.at(n, c, i, j);
                        for (auto& [hi, wi] : ah.w[i])
                            for (auto& [hj, wj] : aw.w[j]) g.at(n, c, hi, hj) += wi * wj * gv;
                    }
    });
}

Var global_avg_pool(const Var& x) {
    int N = x->value.shape[0], C = x->value.shape[1], H = x->value.shape[2], W = x->value.shape[3];
    long hw = (long)H * W;
    Array out({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double acc = 0;
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) acc += x->value.at(n, c, h, w);
            out.at(n, c) = acc / (double)hw;
        }
    return make_node(std::move(out), {x}, [x, N, C, H, W, hw](Node& nd) {
        Array& g = x->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double gv = nd.grad.at(n, c) / (double)hw;
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) g.at(n, c, h, w) += gv;
            }
    });
}

// ---------------- broadcast helpers ----------------

Var add_chan_bias(const Var& x, const Var& b) {
    int N = x->value.shape[0], C = x->value.shape[1], H = x->value.shape[2], W = x->value.shape[3];
    if (b->value.numel() != C) throw std::invalid_argument("add_chan_bias: size mismatch");
    Array out = x->value;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) out.at(n, c, h, w) += b->value[c];
    return make_node(std::move(out), {x, b}, [x, b, N, C, H, W](Node& nd) {
        if (x->requires_grad) {
            Array& g = x->ensure_grad();
            for (long i = 0; i < nd.value.numel(); ++i) g[i] += nd.grad[i];
        }
        if (b->requires_grad) {
            Array& g = b->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) g[c] += nd.grad.at(n, c, h, w);
        }
    });
}

Var add_sample_chan(const Var& x, const Var& b) {
    int N = x->value.shape[0], C = x->value.shape[1], H = x->value.shape[2], W = x->value.shape[3];
    if (b->value.shape[0] != N || b->value.shape[1] != C)
        throw std::invalid_argument("add_sample_chan: size mismatch");
    Array out = x->value;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) out.at(n, c, h, w) += b->value.at(n, c);
    return make_node(std::move(out), {x, b}, [x, b, N, C, H, W](Node& nd) {
        if (x->requires_grad) {
            Array& g = x->ensure_grad();
            for (long i = 0; i < nd.value.numel(); ++i) g[i] += nd.grad[i];
        }
        if (b->requires_grad) {
            Array& g = b->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) g.at(n, c) += nd.grad.at(n, c, h, w);
        }
    });
}

Var film(const Var& x, const Var& s, const Var& t) {
    int N = x->value.shape[0], C = x->value.shape[1], H = x->value.shape[2], W = x->value.shape[3];
    if (s->value.shape != std::vector<int>({N, C}) || t->value.shape != std::vector<int>({N, C}))
        throw std::invalid_argument("film: scale/shift must be [N,C]");
    Array out({N, C, H, W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double sc = 1.0 + s->value.at(n, c), sh = t->value.at(n, c);
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w)
                    out.at(n, c, h, w) = x->value.at(n, c, h, w) * sc + sh;
        }
    return make_node(std::move(out), {x, s, t}, [x, s, t, N, C, H, W](Node& nd) {
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double sc = 1.0 + s->value.at(n, c);
                double gs = 0, gt = 0;
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        double gv = nd.grad.at(n, c, h, w);
                        if (x->requires_grad) x->ensure_grad().at(n, c, h, w) += gv * sc;
                        gs += gv * x->value.at(n, c, h, w);
                        gt += gv;
                    }
                if (s->requires_grad) s->ensure_grad().at(n, c) += gs;
                if (t->requires_grad) t->ensure_grad().at(n, c) += gt;
            }
    });
}

Var tile_chan(const Var& vec, int n_batch, int h, int w) {
    int C = (int)vec->value.numel();
    Array out({n_batch, C, h, w});
    for (int n = 0; n < n_batch; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) out.at(n, c, i, j) = vec->value[c];
    return make_node(std::move(out), {vec}, [vec, n_batch, C, h, w](Node& nd) {
        Array& g = vec->ensure_grad();
        for (int n = 0; n < n_batch; ++n)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j) g[c] += nd.grad.at(n, c, i, j);
    });
}

Var channel_dot(const Var& x, const Var& e) {
    int N = x->value.shape[0], C = x->value.shape[1], H = x->value.shape[2], W = x->value.shape[3];
    if (e->value.shape != std::vector<int>({N, C}))
        throw std::invalid_argument("channel_dot: embedding must be [N,C]");
    Array out({N, 1, H, W});
    for (int n = 0; n < N; ++n)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                double acc = 0;
                for (int c = 0; c < C; ++c) acc += x->value.at(n, c, h, w) * e->value.at(n, c);
                out.at(n, 0, h, w) = acc;
            }
    return make_node(std::move(out), {x, e}, [x, e, N, C, H, W](Node& nd) {
        for (int n = 0; n < N; ++n)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    double gv = nd.grad.at(n, 0, h, w);
                    for (int c = 0; c < C; ++c) {
                        if (x->requires_grad)
                            x->ensure_grad().at(n, c, h, w) += gv * e->value.at(n, c);
                        if (e->requires_grad)
                            e->ensure_grad().at(n, c) += gv * x->value.at(n, c, h, w);
                    }
                }
    });
}

// ---------------- similarity matrices ----------------

Var cosine_matrix_op(const Var& fm, const Var& fs, double eps) {
    int N = fm->value.shape[0], M = fs->value.shape[0], d = fm->value.shape[1];
    if (fs->value.shape[1] != d) throw std::invalid_argument("cosine_matrix: dim mismatch");
    std::vector<double> na(N), nb(M);
    for (int i = 0; i < N; ++i) {
        double s = 0;
        for (int k = 0; k < d; ++k) s += fm->value.at(i, k) * fm->value.at(i, k);
        na[i] = std::max(std::sqrt(s), eps);
    }
    for (int j = 0; j < M; ++j) {
        double s = 0;
        for (int k = 0; k < d; ++k) s += fs->value.at(j, k) * fs->value.at(j, k);
        nb[j] = std::max(std::sqrt(s), eps);
    }
    Array out({N, M});
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < M; ++j) {
            double dot = 0;
            for (int k = 0; k < d; ++k) dot += fm->value.at(i, k) * fs->value.at(j, k);
            out.at(i, j) = dot / (na[i] * nb[j]);
        }
    return make_node(std::move(out), {fm, fs}, [fm, fs, na, nb, N, M, d, eps](Node& nd) {
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < M; ++j) {
                double g = nd.grad.at(i, j);
                if (g == 0) continue;
                double cij = nd.value.at(i, j);
                for (int k = 0; k < d; ++k) {
                    if (fm->requires_grad) {
                        double d_a = fs->value.at(j, k) / (na[i] * nb[j]);
                        // derivative through the norm only when not clamped by eps
                        if (na[i] > eps) d_a -= cij * fm->value.at(i, k) / (na[i] * na[i]);
                        fm->ensure_grad().at(i, k) += g * d_a;
                    }
                    if (fs->requires_grad) {
                        double d_b = fm->value.at(i, k) / (na[i] * nb[j]);
                        if (nb[j] > eps) d_b -= cij * fs->value.at(j, k) / (nb[j] * nb[j]);
                        fs->ensure_grad().at(j, k) += g * d_b;
                    }
                }
            }
    });
}

Var euclidean_matrix_op(const Var& fm, const Var& fs, double eps) {
    int N = fm->value.shape[0], M = fs->value.shape[0], d = fm->value.shape[1];
    if (fs->value.shape[1] != d) throw std::invalid_argument("euclidean_matrix: dim mismatch");
    Array out({N, M});
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < M; ++j) {
            double s = 0;
            for (int k = 0; k < d; ++k) {
                double diff = fm->value.at(i, k) - fs->value.at(j, k);
                s += diff * diff;
            }
            out.at(i, j) = std::sqrt(s);
        }
    return make_node(std::move(out), {fm, fs}, [fm, fs, N, M, d, eps](Node& nd) {
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < M; ++j) {
                double g = nd.grad.at(i, j);
                if (g == 0) continue;
                double dij = std::max(nd.value.at(i, j), eps);
                for (int k = 0; k < d; ++k) {
                    double diff = (fm->value.at(i, k) - fs->value.at(j, k)) / dij;
                    if (fm->requires_grad) fm->ensure_grad().at(i, k) += g * diff;
                    if (fs->requires_grad) fs->ensure_grad().at(j, k) -= g * diff;
                }
            }
    });
}

}  // namespace ag
}  // namespace hadmst
