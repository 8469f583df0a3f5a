#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "hadmst/autograd.hpp"
#include "hadmst/rng.hpp"

namespace hadmst {
namespace nn {

using ag::Var;

// Flat registry of named parameters; modules register into a shared store so
// checkpoints and optimizers see one namespace.
class ParamStore {
  public:
    Var add(const std::string& name, Array init) {
        if (params_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        Var p = ag::leaf(std::move(init));
        params_[name] = p;
        order_.push_back(name);
        return p;
    }
    const std::map<std::string, Var>& all() const { return params_; }
    const std::vector<std::string>& order() const { return order_; }
    Var get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::invalid_argument("no such parameter: " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return params_.count(name) > 0; }

    void zero_grads() {
        for (auto& [k, p] : params_) {
            (void)k;
            if (!p->grad.v.empty()) std::fill(p->grad.v.begin(), p->grad.v.end(), 0.0);
        }
    }

    long total_params() const {
        long n = 0;
        for (auto& [k, p] : params_) {
            (void)k;
            n += p->value.numel();
        }
        return n;
    }

  private:
    std::map<std::string, Var> params_;
    std::vector<std::string> order_;
};

inline Array kaiming_init(std::vector<int> shape, long fan_in, Rng& rng) {
    double s = std::sqrt(2.0 / (double)fan_in);
    return rng.normal_array(std::move(shape), 0.0, s);
}

struct Linear {
    Var w, b;  // w: [in, out]
    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
           bool zero_init = false) {
        w = ps.add(name + ".w", zero_init ? Array({in, out})
                                          : kaiming_init({in, out}, in, rng));
        b = ps.add(name + ".b", Array({out}));
    }
    Var forward(const Var& x) const { return ag::add_rowvec(ag::matmul(x, w), b); }
};

struct Conv2d {
    Var w, b;
    int stride = 1, pad = 0;
    Conv2d() = default;
    Conv2d(ParamStore& ps, const std::string& name, int cin, int cout, int k, int stride_,
           int pad_, Rng& rng, bool zero_init = false)
        : stride(stride_), pad(pad_) {
        w = ps.add(name + ".w", zero_init ? Array({cout, cin, k, k})
                                          : kaiming_init({cout, cin, k, k},
                                                         (long)cin * k * k, rng));
        b = ps.add(name + ".b", Array({cout}));
    }
    Var forward(const Var& x) const { return ag::conv2d(x, w, b, stride, pad); }
};

struct GroupNorm {
    Var gamma, beta;
    int groups = 1;
    GroupNorm() = default;
    GroupNorm(ParamStore& ps, const std::string& name, int channels, int groups_)
        : groups(groups_) {
        gamma = ps.add(name + ".gamma", Array({channels}, 1.0));
        beta = ps.add(name + ".beta", Array({channels}));
    }
    Var forward(const Var& x) const { return ag::group_norm(x, gamma, beta, groups); }
};

struct LayerNorm {
    Var gamma, beta;
    LayerNorm() = default;
    LayerNorm(ParamStore& ps, const std::string& name, int dim) {
        gamma = ps.add(name + ".gamma", Array({dim}, 1.0));
        beta = ps.add(name + ".beta", Array({dim}));
    }
    Var forward(const Var& x) const { return ag::layer_norm_rows(x, gamma, beta); }
};

// Decoupled weight decay Adam over a subset of a ParamStore.
class AdamW {
  public:
    AdamW(std::vector<Var> params, double lr, double weight_decay, double beta1 = 0.9,
          double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2),
          eps_(eps) {
        for (auto& p : params_) {
            m_.push_back(Array(p->value.shape));
            v_.push_back(Array(p->value.shape));
        }
    }

    void step() {
        ++t_;
        double bc1 = 1.0 - std::pow(b1_, t_);
        double bc2 = 1.0 - std::pow(b2_, t_);
        for (size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            if (p->grad.v.empty()) continue;
            for (long i = 0; i < p->value.numel(); ++i) {
                double g = p->grad[i];
                m_[k][i] = b1_ * m_[k][i] + (1 - b1_) * g;
                v_[k][i] = b2_ * v_[k][i] + (1 - b2_) * g * g;
                double mh = m_[k][i] / bc1, vh = v_[k][i] / bc2;
                p->value[i] -= lr_ * (mh / (std::sqrt(vh) + eps_) + wd_ * p->value[i]);
            }
        }
    }

    double lr() const { return lr_; }

  private:
    std::vector<Var> params_;
    std::vector<Array> m_, v_;
    double lr_, wd_, b1_, b2_, eps_;
    long t_ = 0;
};

}  // namespace nn
}  // namespace hadmst
