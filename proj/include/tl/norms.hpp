#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <vector>

#include "tl/random.hpp"
#include "tl/tensor.hpp"

namespace tl {

struct SpectralEstimate {
    double value = 0.0;     // estimate of the operator 2-norm
    double rayleigh = 0.0;  // signed Rayleigh quotient (symmetric mode) at the last iterate
    std::size_t iterations = 0;
    bool converged = false;
};

namespace detail {

// Stop once the change, and the geometric tail it predicts, are both below tol.
struct TailRule {
    double previous = 0.0, last_change = 0.0;
    std::size_t seen = 0;

    bool done(double value, double tol) {
        const double eps = std::numeric_limits<double>::epsilon();
        const double change = std::abs(value - previous);
        const double rate = (seen > 1 && last_change > 0.0) ? std::min(change / last_change, 1.0 - 1e-9) : 1.0;
        const double tail = change * rate / (1.0 - rate);
        const bool stop = seen > 1 && (change <= 4 * eps * value || (change <= tol * value && tail <= tol * value));
        previous = value;
        last_change = change;
        ++seen;
        return stop;
    }
};

// Plain power iteration. The tracked quantity is |A v| for the current unit iterate v, which is
// non-decreasing for symmetric A and for the A^T A iteration, and does not oscillate when
// A has eigenvalues +lambda and -lambda of equal magnitude.
inline SpectralEstimate power_iteration(const LinearMap& map, double tol, std::size_t max_iter, Seed seed) {
    SpectralEstimate est;
    Vector v = random_unit_vector(map.dim_in, seed, stream_id({stream_tag::power_start, map.dim_in}));
    TailRule rule;
    for (std::size_t it = 1; it <= max_iter; ++it) {
        Vector w = map.apply(v);
        const double value = w.norm();
        est.iterations = it;
        if (!std::isfinite(value)) return est;
        if (map.symmetric) est.rayleigh = v.dot(w);
        est.value = value;
        if (value == 0.0 || rule.done(value, tol)) {
            est.converged = true;
            return est;
        }
        if (map.symmetric) {
            v = w / value;
        } else {
            Vector u = map.adjoint(w);
            const double nu = u.norm();
            if (nu == 0.0) {
                est.converged = true;
                return est;
            }
            v = u / nu;
        }
    }
    return est;
}

// Thick-restart Lanczos with full reorthogonalization on a symmetric operator. The basis grows
// to `basis` vectors, then restarts keeping the half of the Ritz vectors with largest |theta|
// plus the residual direction, so near-ties of either sign survive the restart. A Q = Q T + r e^T
// holds throughout, so the Ritz residual of (theta, y) is |r| |y_last|, and some eigenvalue lies
// within it. Converged when that residual is below tol |theta|. The sharper r^2 / gap bound is not
// used: with the gap taken from Ritz values it is unsafe while a close eigenvalue is unresolved.
inline SpectralEstimate lanczos(const std::function<Vector(const Vector&)>& apply, std::size_t n, std::size_t basis,
                                double tol, std::size_t max_iter, const Vector& start) {
    SpectralEstimate est;
    const Eigen::Index k = static_cast<Eigen::Index>(std::min(basis, n));
    Matrix q(static_cast<Eigen::Index>(n), k);
    Matrix t = Matrix::Zero(k, k);
    q.col(0) = start;
    Eigen::Index p = 1;
    while (est.iterations < max_iter) {
        const Eigen::Index j = p - 1;
        Vector w = apply(q.col(j));
        ++est.iterations;
        if (!w.allFinite()) return est;
        Vector h = q.leftCols(p).transpose() * w;
        w -= q.leftCols(p) * h;
        const Vector h2 = q.leftCols(p).transpose() * w;
        w -= q.leftCols(p) * h2;
        h += h2;
        t.col(j).head(p) = h;
        t.row(j).head(p) = h.transpose();
        const double beta = w.norm();

        Eigen::SelfAdjointEigenSolver<Matrix> es(t.topLeftCorner(p, p));
        const Vector& theta = es.eigenvalues();
        Eigen::Index top = 0;
        theta.cwiseAbs().maxCoeff(&top);
        est.rayleigh = theta[top];
        est.value = std::abs(theta[top]);
        const double residual = beta * std::abs(es.eigenvectors()(j, top));
        const double scale = std::max(est.value, h.cwiseAbs().maxCoeff());
        if (beta <= 1e-14 * scale || residual <= tol * est.value) {
            est.converged = true;
            return est;
        }
        if (p < k) {
            q.col(p) = w / beta;
            ++p;
            continue;
        }
        const Eigen::Index keep = std::max<Eigen::Index>(1, k / 2);
        std::vector<Eigen::Index> order(static_cast<std::size_t>(p));
        for (Eigen::Index i = 0; i < p; ++i) order[static_cast<std::size_t>(i)] = i;
        std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return std::abs(theta[a]) > std::abs(theta[b]); });
        Matrix y(p, keep);
        t.setZero();
        for (Eigen::Index i = 0; i < keep; ++i) {
            y.col(i) = es.eigenvectors().col(order[static_cast<std::size_t>(i)]);
            t(i, i) = theta[order[static_cast<std::size_t>(i)]];
        }
        const Matrix kept = q * y;
        q.leftCols(keep) = kept;
        q.col(keep) = w / beta;
        p = keep + 1;
    }
    return est;
}

}  // namespace detail

// Largest singular value (for symmetric maps, largest |eigenvalue|). Uses restarted Lanczos
// when a Krylov basis of `basis` vectors fits in `memory_budget` bytes, power iteration otherwise.
// Non-symmetric maps run Lanczos on A^T A.
inline SpectralEstimate spectral_norm(const LinearMap& map, double tol = 1e-9, std::size_t max_iter = 1000,
                                      Seed seed = 0, std::size_t basis = 32,
                                      std::size_t memory_budget = std::size_t{256} << 20) {
    if (!(tol > 0.0)) throw std::invalid_argument("spectral_norm: tol must be positive");
    if (map.symmetric && map.dim_in != map.dim_out) throw DimensionError("spectral_norm: symmetric map must be square");
    if (!map.symmetric && !map.adjoint) throw std::invalid_argument("spectral_norm: non-symmetric map needs an adjoint");
    const std::size_t n = map.dim_in;
    if (n == 0) return SpectralEstimate{0.0, 0.0, 0, true};
    const std::size_t fits = memory_budget / (sizeof(double) * n);
    if (basis < 4 || fits < 4) return detail::power_iteration(map, tol, max_iter, seed);
    const Vector v = random_unit_vector(n, seed, stream_id({stream_tag::power_start, n}));
    if (map.symmetric) return detail::lanczos(map.apply, n, std::min(basis, fits), tol, max_iter, v);
    // sigma^2 of A^T A; relative accuracy in sigma is half that in sigma^2.
    const auto gram = [&](const Vector& u) { return map.adjoint(map.apply(u)); };
    SpectralEstimate est = detail::lanczos(gram, n, std::min(basis, fits), tol, max_iter, v);
    est.value = std::sqrt(est.value);
    est.rayleigh = 0.0;
    return est;
}

struct Tensor221Options {
    std::size_t restarts = 8;
    std::size_t sweeps = 100;
    double tol = 1e-12;
    Seed seed = 0;
};

namespace detail {
inline Vector sign_of(const Vector& c) {
    Vector s(c.size());
    for (Eigen::Index k = 0; k < c.size(); ++k) s[k] = c[k] < 0.0 ? -1.0 : 1.0;
    return s;
}
}  // namespace detail

// Lower-bound estimate of sup_{|x|=|z|=1} sum_k |contract(x,z)_k| by alternating ascent.
// With the signs s of the current contraction fixed, the best x is the normalized adjoint
// contraction; each half step cannot decrease the objective.
inline double tensor221_norm(const Order3Action& t, const Tensor221Options& opt) {
    if (opt.restarts == 0) throw std::invalid_argument("tensor221_norm: restarts must be >= 1");
    if (t.d1 == 0 || t.d2 == 0 || t.d3 == 0) throw DimensionError("tensor221_norm: empty dimension");
    double best = 0.0;
    for (std::size_t r = 0; r < opt.restarts; ++r) {
        Vector x = random_unit_vector(t.d1, opt.seed, stream_id({stream_tag::ascent_start, r, 0}));
        Vector z = random_unit_vector(t.d2, opt.seed, stream_id({stream_tag::ascent_start, r, 1}));
        Vector c = t.contract(x, z);
        double value = c.lpNorm<1>();
        for (std::size_t sweep = 0; sweep < opt.sweeps; ++sweep) {
            Vector gx = t.adjoint_first(z, detail::sign_of(c));
            const double ngx = gx.norm();
            if (ngx == 0.0) break;
            x = gx / ngx;
            c = t.contract(x, z);
            Vector gz = t.adjoint_second(x, detail::sign_of(c));
            const double ngz = gz.norm();
            if (ngz == 0.0) break;
            z = gz / ngz;
            c = t.contract(x, z);
            const double next = c.lpNorm<1>();
            const bool stalled = next - value <= opt.tol * next;
            value = std::max(value, next);
            if (stalled) break;
        }
        best = std::max(best, value);
    }
    return best;
}

inline double tensor221_norm(const Order3Action& t, std::size_t restarts = 8, double tol = 1e-12, Seed seed = 0) {
    Tensor221Options opt;
    opt.restarts = restarts;
    opt.tol = tol;
    opt.seed = seed;
    return tensor221_norm(t, opt);
}

struct HolderCheck {
    double lhs = 0.0;
    double rhs = 0.0;
};

// Holder bound: |sum_k T_..k v_k| <= |T|_{2,2,1} |v|_inf.
inline HolderCheck holder_matrix_bound_check(const Order3Action& t, const Vector& v,
                                             const Tensor221Options& opt = {}) {
    if (static_cast<std::size_t>(v.size()) != t.d3) throw DimensionError("holder_matrix_bound_check: |v| != d3");
    HolderCheck out;
    const Matrix a = t.weighted_slice_sum(v);
    out.lhs = Eigen::JacobiSVD<Matrix>(a).singularValues()(0);
    out.rhs = v.size() == 0 ? 0.0 : tensor221_norm(t, opt) * v.lpNorm<Eigen::Infinity>();
    return out;
}

}  // namespace tl
