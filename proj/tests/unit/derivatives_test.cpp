#include <cmath>

#include <gtest/gtest.h>

#include "support/nets.hpp"
#include "support/oracles.hpp"
#include "tl/derivatives.hpp"

namespace {

using tl::Matrix;
using tl::Vector;

Vector input_for(const tl::NetworkSpec& spec, tl::Seed seed) { return tl::gaussian_vector(spec.input_dim, 1.0, seed, 12345); }

TEST(Gradient, IdentityShallowIsLinear) {
    const std::size_t m = 10;
    const auto spec = nets::shallow(m, tl::ActivationKind::identity);
    const auto w = tl::init_weights(spec, 3);
    const double x = 0.7;
    const auto g = tl::gradient(spec, w, tl::forward(spec, w, Vector::Constant(1, x)), 0);
    for (std::size_t i = 0; i < m; ++i) EXPECT_NEAR(g.flat[i], w.fixed_output(0, i) * x / std::sqrt(10.0), 1e-15);
}

TEST(Gradient, ShallowSquaredNormFormula) {
    const std::size_t m = 50;
    const auto spec = nets::shallow(m);
    const auto w = tl::init_weights(spec, 8);
    const double x = 1.3;
    const auto g = tl::gradient(spec, w, tl::forward(spec, w, Vector::Constant(1, x)), 0);
    double expected = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double d = 1.0 - std::pow(std::tanh(w.flat[i] * x), 2);
        expected += x * x * d * d / m;
    }
    EXPECT_NEAR(g.flat.squaredNorm(), expected, 1e-14);
}

TEST(Gradient, ShallowSensitivityNorms) {
    const std::size_t m = 64;
    const auto spec = nets::shallow(m);
    const auto w = tl::init_weights(spec, 1);
    const auto g = tl::gradient(spec, w, tl::forward(spec, w, Vector::Constant(1, 0.5)), 0);
    EXPECT_NEAR(g.sensitivity[0].lpNorm<Eigen::Infinity>(), 1.0 / 8.0, 1e-15);
    EXPECT_NEAR(g.sensitivity[0].norm(), 1.0, 1e-14);
}

TEST(Gradient, MatchesCentralDifferences) {
    for (const auto& [name, spec] : nets::smooth_zoo(16)) {
        for (tl::Seed seed = 0; seed < 3; ++seed) {
            const auto w = tl::init_weights(spec, seed);
            const Vector x = input_for(spec, seed);
            const auto g = tl::gradient(spec, w, tl::forward(spec, w, x), 0);
            Vector fd(g.flat.size()), an(g.flat.size());
            for (Eigen::Index i = 0; i < g.flat.size(); ++i) {
                fd[i] = oracle::fd_partial(spec, w, x, 0, static_cast<std::size_t>(i), 1e-5);
                an[i] = g.flat[i];
            }
            EXPECT_LT(oracle::rel_error(an, fd), 1e-6) << name << " seed " << seed;
        }
    }
}

TEST(Gradient, HeadsMatchCentralDifferences) {
    auto base = nets::fc(2, 12, tl::ActivationKind::tanh, 2, 3);
    for (auto head : {tl::OutputHead::softmax(), tl::OutputHead::activated(tl::ActivationKind::swish),
                      tl::OutputHead::activated(tl::ActivationKind::quadratic)}) {
        const auto spec = base.with_head(head);
        const auto w = tl::init_weights(spec, 2);
        const Vector x = input_for(spec, 2);
        for (std::size_t c = 0; c < 3; ++c) {
            const auto g = tl::gradient(spec, w, tl::forward(spec, w, x), c);
            Vector fd(g.flat.size());
            for (Eigen::Index i = 0; i < fd.size(); ++i) fd[i] = oracle::fd_partial(spec, w, x, c, static_cast<std::size_t>(i), 1e-5);
            EXPECT_LT(oracle::rel_error(g.flat, fd), 1e-6) << head.name() << " c=" << c;
        }
    }
}

TEST(Gradient, BiasedShallowMatchesCentralDifferences) {
    const auto spec = nets::biased_shallow(20, tl::ActivationKind::tanh);
    const auto w = tl::init_weights(spec, 5);
    const Vector x = Vector::Constant(1, 1.7);
    for (std::size_t c = 0; c < 3; ++c) {
        const auto g = tl::gradient(spec, w, tl::forward(spec, w, x), c);
        Vector fd(g.flat.size());
        for (Eigen::Index i = 0; i < fd.size(); ++i) fd[i] = oracle::fd_partial(spec, w, x, c, static_cast<std::size_t>(i), 1e-5);
        EXPECT_LT(oracle::rel_error(g.flat, fd), 1e-6);
    }
}

// b^(l-1) = J_l^T b^(l) with J_l = scale * diag(sigma'(pre)) W, plus identity for residual layers.
TEST(Gradient, SensitivityMatchesDirectProductFormula) {
    for (auto spec : {nets::fc(4, 24), nets::residual(16, 3)}) {
        const auto lay = tl::make_layout(spec);
        const auto w = tl::init_weights(spec, 6);
        const auto t = tl::forward(spec, w, input_for(spec, 6));
        const auto g = tl::gradient(spec, w, t, 0);
        const std::size_t depth = lay.layers.size();
        Vector b = lay.output_fan_scale * tl::output_matrix(lay, w).row(0).transpose();
        EXPECT_TRUE(b.isApprox(g.sensitivity[depth - 1], 1e-12));
        for (std::size_t l = depth - 1; l > 0; --l) {
            const auto& s = lay.layers[l];
            Matrix j = s.map_scale * t.pre[l].col(0).unaryExpr([&](double z) { return s.act.d1(z); }).asDiagonal() *
                       Matrix(tl::layer_weight(s, w.flat.data()));
            if (s.residual()) j += Matrix::Identity(j.rows(), j.cols());
            b = j.transpose() * b;
            EXPECT_LT((b - g.sensitivity[l - 1]).norm(), 1e-12 * b.norm()) << "layer " << l;
        }
    }
}

TEST(Hvp, IdentityShallowHasZeroHessian) {
    const auto spec = nets::shallow(12, tl::ActivationKind::identity);
    const auto w = tl::init_weights(spec, 0);
    const Vector u = tl::gaussian_vector(12, 1.0, 0, 1);
    EXPECT_TRUE(tl::hvp(spec, w, Vector::Constant(1, 2.0), 0, u).isZero(0.0));
}

TEST(Hvp, ShallowHessianIsDiagonal) {
    const std::size_t m = 16;
    const auto spec = nets::shallow(m);
    const auto w = tl::init_weights(spec, 4);
    const double x = 0.8;
    const tl::HessianOperator op(spec, w, Vector::Constant(1, x), 0);
    const tl::Activation act(tl::ActivationKind::tanh);
    for (std::size_t i = 0; i < m; ++i) {
        Vector e = Vector::Zero(m);
        e[i] = 1.0;
        Vector expected = Vector::Zero(m);
        expected[i] = w.fixed_output(0, i) * act.d2(w.flat[i] * x) * x * x / 4.0;
        EXPECT_TRUE(op.apply(e).isApprox(expected, 1e-14)) << i;
    }
}

TEST(Hvp, MatchesFiniteDifferenceOfGradient) {
    for (const auto& [name, spec] : nets::smooth_zoo(32)) {
        for (tl::Seed seed = 0; seed < 3; ++seed) {
            const auto w = tl::init_weights(spec, seed);
            const Vector x = input_for(spec, seed);
            const tl::HessianOperator op(spec, w, x, 0);
            const Vector u = tl::random_unit_vector(op.dim(), seed, 555);
            const Vector fd = oracle::fd_gradient_of_gradient(spec, w, x, 0, u, 1e-4);
            EXPECT_LT(oracle::rel_error(op.apply(u), fd), 1e-5) << name << " seed " << seed;
        }
    }
}

TEST(Hvp, HeadsMatchFiniteDifferenceOfGradient) {
    auto base = nets::fc(2, 10, tl::ActivationKind::tanh, 2, 3);
    for (auto head : {tl::OutputHead::softmax(), tl::OutputHead::activated(tl::ActivationKind::swish),
                      tl::OutputHead::activated(tl::ActivationKind::sigmoid)}) {
        const auto spec = base.with_head(head);
        const auto w = tl::init_weights(spec, 1);
        const Vector x = input_for(spec, 1);
        for (std::size_t c = 0; c < 3; ++c) {
            const tl::HessianOperator op(spec, w, x, c);
            const Vector u = tl::random_unit_vector(op.dim(), c, 9);
            EXPECT_LT(oracle::rel_error(op.apply(u), oracle::fd_gradient_of_gradient(spec, w, x, c, u, 1e-4)), 1e-5)
                << head.name() << " c=" << c;
        }
    }
}

TEST(Hvp, BiasedNetMatchesFiniteDifferenceOfGradient) {
    const auto spec = nets::biased_shallow(10, tl::ActivationKind::sigmoid);
    const auto w = tl::init_weights(spec, 3);
    const Vector x = Vector::Constant(1, -1.1);
    const tl::HessianOperator op(spec, w, x, 2);
    const Vector u = tl::random_unit_vector(op.dim(), 3, 9);
    EXPECT_LT(oracle::rel_error(op.apply(u), oracle::fd_gradient_of_gradient(spec, w, x, 2, u, 1e-4)), 1e-5);
}

TEST(Hvp, SymmetricAndLinear) {
    for (const auto& [name, spec] : nets::smooth_zoo(16)) {
        const auto w = tl::init_weights(spec, 11);
        const tl::HessianOperator op(spec, w, input_for(spec, 11), 0);
        const Vector u = tl::gaussian_vector(op.dim(), 1.0, 1, 1);
        const Vector v = tl::gaussian_vector(op.dim(), 1.0, 1, 2);
        const Vector hu = op.apply(u), hv = op.apply(v);
        EXPECT_NEAR(u.dot(hv), v.dot(hu), 1e-10 * std::max(1.0, std::abs(u.dot(hv)))) << name;
        const Vector combo = op.apply(2.5 * u - 0.75 * v);
        EXPECT_LT((combo - (2.5 * hu - 0.75 * hv)).norm(), 1e-10 * std::max(1.0, combo.norm())) << name;
    }
}

TEST(Hvp, RejectsRelu) {
    const auto spec = nets::fc(2, 8, tl::ActivationKind::relu);
    const auto w = tl::init_weights(spec, 0);
    EXPECT_THROW(tl::HessianOperator(spec, w, Vector::Ones(3), 0), tl::SmoothnessError);
    EXPECT_NO_THROW(tl::gradient(spec, w, tl::forward(spec, w, Vector::Ones(3)), 0));
}

TEST(Hvp, WrongDirectionLengthThrows) {
    const auto spec = nets::fc(2, 8);
    const auto w = tl::init_weights(spec, 0);
    const tl::HessianOperator op(spec, w, Vector::Ones(3), 0);
    EXPECT_THROW(op.apply(Vector::Ones(3)), tl::DimensionError);
}

}  // namespace
