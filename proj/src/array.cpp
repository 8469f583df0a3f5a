#include "hadmst/array.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace hadmst {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

bool all_finite(const Array& a) {
    for (double x : a.v)
        if (!std::isfinite(x)) return false;
    return true;
}

double max_abs_diff(const Array& a, const Array& b) {
    check_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::fabs(a.v[i] - b.v[i]));
    return m;
}

Array matmul_value(const Array& a, const Array& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
        throw std::invalid_argument("matmul: bad shapes " + a.shape_str() + " x " + b.shape_str());
    Array c({a.shape[0], b.shape[1]});
    CMap A(a.v.data(), a.shape[0], a.shape[1]);
    CMap B(b.v.data(), b.shape[0], b.shape[1]);
    MMap C(c.v.data(), c.shape[0], c.shape[1]);
    C.noalias() = A * B;
    return c;
}

}  // namespace hadmst
