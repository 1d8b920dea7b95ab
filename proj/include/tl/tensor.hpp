#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tl/random.hpp"

namespace tl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;
using VectorMap = Eigen::Map<Vector>;
using ConstVectorMap = Eigen::Map<const Vector>;
// Column-per-sample activations.
using Batch = Eigen::MatrixXd;

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline bool all_finite(const Vector& v) { return v.allFinite(); }

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, Seed seed, std::uint64_t stream = 0) {
    if (rows == 0 || cols == 0) throw DimensionError("gaussian_matrix: empty shape");
    if (!(stddev >= 0.0)) throw std::invalid_argument("gaussian_matrix: negative std");
    Matrix m(rows, cols);
    CounterRng(seed, stream).fill_normal({m.data(), rows * cols}, stddev);
    return m;
}

inline Vector gaussian_vector(std::size_t n, double stddev, Seed seed, std::uint64_t stream = 0) {
    Vector v(n);
    CounterRng(seed, stream).fill_normal({v.data(), n}, stddev);
    return v;
}

inline Vector random_unit_vector(std::size_t n, Seed seed, std::uint64_t stream) {
    Vector v = gaussian_vector(n, 1.0, seed, stream);
    const double nv = v.norm();
    if (nv == 0.0) {
        v.setZero();
        v[0] = 1.0;
        return v;
    }
    return v / nv;
}

// Matrix-free linear operator. `adjoint` may be empty for symmetric maps.
struct LinearMap {
    std::size_t dim_in = 0;
    std::size_t dim_out = 0;
    std::function<Vector(const Vector&)> apply;
    std::function<Vector(const Vector&)> adjoint;
    bool symmetric = false;

    static LinearMap from_matrix(const Matrix& a, bool symmetric = false) {
        LinearMap map;
        map.dim_in = static_cast<std::size_t>(a.cols());
        map.dim_out = static_cast<std::size_t>(a.rows());
        map.apply = [a](const Vector& u) -> Vector { return a * u; };
        map.adjoint = [a](const Vector& u) -> Vector { return a.transpose() * u; };
        map.symmetric = symmetric;
        return map;
    }
};

// Bilinear action of an order-3 tensor T (d1 x d2 x d3): contract(x, z)_k = sum_ij T_ijk x_i z_j.
// adjoint_first(z, s)_i = sum_jk T_ijk z_j s_k and adjoint_second(x, s)_j = sum_ik T_ijk x_i s_k.
struct Order3Action {
    std::size_t d1 = 0;
    std::size_t d2 = 0;
    std::size_t d3 = 0;
    std::function<Vector(const Vector&, const Vector&)> contract;
    std::function<Vector(const Vector&, const Vector&)> adjoint_first;
    std::function<Vector(const Vector&, const Vector&)> adjoint_second;

    // Dense tensor stored as slices: slices[k] is the d1 x d2 matrix T_{..k}.
    static Order3Action from_slices(std::vector<Matrix> slices) {
        if (slices.empty()) throw DimensionError("Order3Action: no slices");
        Order3Action t;
        t.d1 = static_cast<std::size_t>(slices[0].rows());
        t.d2 = static_cast<std::size_t>(slices[0].cols());
        t.d3 = slices.size();
        auto shared = std::make_shared<const std::vector<Matrix>>(std::move(slices));
        t.contract = [shared](const Vector& x, const Vector& z) {
            Vector out(shared->size());
            for (std::size_t k = 0; k < shared->size(); ++k) out[k] = x.dot((*shared)[k] * z);
            return out;
        };
        t.adjoint_first = [shared](const Vector& z, const Vector& s) {
            Vector out = Vector::Zero((*shared)[0].rows());
            for (std::size_t k = 0; k < shared->size(); ++k) out += s[k] * ((*shared)[k] * z);
            return out;
        };
        t.adjoint_second = [shared](const Vector& x, const Vector& s) {
            Vector out = Vector::Zero((*shared)[0].cols());
            for (std::size_t k = 0; k < shared->size(); ++k) out += s[k] * ((*shared)[k].transpose() * x);
            return out;
        };
        return t;
    }

    // A_ij = sum_k T_ijk v_k, materialized through d1*d2 contractions.
    Matrix weighted_slice_sum(const Vector& v) const {
        if (static_cast<std::size_t>(v.size()) != d3) throw DimensionError("weighted_slice_sum: length of v != d3");
        Matrix a(d1, d2);
        Vector ei = Vector::Zero(d1);
        Vector ej = Vector::Zero(d2);
        for (std::size_t i = 0; i < d1; ++i) {
            ei[i] = 1.0;
            for (std::size_t j = 0; j < d2; ++j) {
                ej[j] = 1.0;
                a(i, j) = contract(ei, ej).dot(v);
                ej[j] = 0.0;
            }
            ei[i] = 0.0;
        }
        return a;
    }
};

}  // namespace tl
