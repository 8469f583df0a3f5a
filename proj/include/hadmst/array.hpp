#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace hadmst {

// Dense row-major tensor of doubles. Shapes are small (rank <= 4).
struct Array {
    std::vector<int> shape;
    std::vector<double> v;

    Array() = default;
    explicit Array(std::vector<int> s) : shape(std::move(s)), v(numel_of(shape), 0.0) {}
    Array(std::vector<int> s, double fill) : shape(std::move(s)), v(numel_of(shape), fill) {}
    Array(std::vector<int> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
        if ((long)v.size() != numel_of(shape))
            throw std::invalid_argument("Array: data size does not match shape");
    }

    static long numel_of(const std::vector<int>& s) {
        long n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("Array: negative dimension");
            n *= d;
        }
        return n;
    }

    long numel() const { return (long)v.size(); }
    int rank() const { return (int)shape.size(); }
    int dim(int i) const { return shape[(size_t)i]; }

    double& operator[](long i) { return v[(size_t)i]; }
    double operator[](long i) const { return v[(size_t)i]; }

    // 2-D accessors ([rows, cols])
    double& at(int i, int j) { return v[(size_t)i * shape[1] + j]; }
    double at(int i, int j) const { return v[(size_t)i * shape[1] + j]; }

    // 4-D accessors ([n, c, h, w])
    double& at(int n, int c, int h, int w) {
        return v[(((size_t)n * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    double at(int n, int c, int h, int w) const {
        return v[(((size_t)n * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }

    bool same_shape(const Array& o) const { return shape == o.shape; }

    static Array zeros_like(const Array& a) { return Array(a.shape); }
    static Array full(std::vector<int> s, double x) { return Array(std::move(s), x); }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i)
            s += std::to_string(shape[i]) + (i + 1 < shape.size() ? "," : "");
        return s + "]";
    }
};

inline void check_same_shape(const Array& a, const Array& b, const char* who) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(who) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

bool all_finite(const Array& a);
double max_abs_diff(const Array& a, const Array& b);

// C = A * B for 2-D arrays, via Eigen.
Array matmul_value(const Array& a, const Array& b);

}  // namespace hadmst
