#include <cmath>

#include <gtest/gtest.h>

#include "support/nets.hpp"
#include "tl/analysis.hpp"
#include "tl/training.hpp"

namespace {

using tl::Batch;
using tl::Vector;

TEST(Dataset, DeterministicAndOneHot) {
    const auto a = tl::make_synthetic_dataset(5);
    const auto b = tl::make_synthetic_dataset(5);
    EXPECT_EQ(a.inputs, b.inputs);
    EXPECT_EQ(a.targets, b.targets);
    EXPECT_EQ(a.size(), 60u);
    EXPECT_EQ(a.classes(), 3u);
    EXPECT_TRUE((a.targets.colwise().sum().array() == 1.0).all());
    EXPECT_NE(tl::make_synthetic_dataset(6).inputs, a.inputs);
}

TEST(Dataset, ClassMeansAndCounts) {
    const auto d = tl::make_synthetic_dataset(0);
    const double means[] = {0.0, 10.0, -10.0};
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0;
        int count = 0;
        for (std::size_t i = 0; i < d.size(); ++i)
            if (d.labels[i] == c) {
                sum += d.inputs(0, static_cast<Eigen::Index>(i));
                ++count;
            }
        // Binomial(60, 1/3) 99% band.
        EXPECT_GE(count, 11);
        EXPECT_LE(count, 29);
        EXPECT_NEAR(sum / count, means[c], 3.0 / std::sqrt(static_cast<double>(count)));
    }
}

TEST(Dataset, PooledClassMeans) {
    double sum[3] = {0, 0, 0};
    int count[3] = {0, 0, 0};
    for (tl::Seed s = 0; s < 50; ++s) {
        const auto d = tl::make_synthetic_dataset(s);
        for (std::size_t i = 0; i < d.size(); ++i) {
            sum[d.labels[i]] += d.inputs(0, static_cast<Eigen::Index>(i));
            ++count[d.labels[i]];
        }
    }
    const double means[] = {0.0, 10.0, -10.0};
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(sum[c] / count[c], means[c], 3.0 / std::sqrt(static_cast<double>(count[c])));
}

TEST(Loss, GradientMatchesCentralDifferences) {
    const auto d = tl::make_synthetic_dataset(1, 12);
    const auto base = nets::biased_shallow(10, tl::ActivationKind::tanh);
    for (const auto& [spec, loss] : {std::pair{base, tl::Loss::square},
                                     std::pair{base.with_head(tl::OutputHead::softmax()), tl::Loss::cross_entropy},
                                     std::pair{base.with_head(tl::OutputHead::activated(tl::ActivationKind::swish)), tl::Loss::square}}) {
        const auto w = tl::init_weights(spec, 2);
        const Vector g = tl::loss_gradient(spec, w, d, loss);
        Vector fd(g.size());
        const double h = 1e-6;
        for (Eigen::Index i = 0; i < g.size(); ++i) {
            tl::Weights p = w, m = w;
            p.flat[i] += h;
            m.flat[i] -= h;
            fd[i] = (tl::loss_at(spec, p, d, loss) - tl::loss_at(spec, m, d, loss)) / (2 * h);
        }
        EXPECT_LT((g - fd).norm(), 1e-6 * std::max(1.0, g.norm())) << tl::to_string(loss);
    }
}

TEST(Loss, CrossEntropyNeedsSoftmax) {
    const auto spec = nets::biased_shallow(10, tl::ActivationKind::tanh);
    tl::GdConfig cfg;
    cfg.loss = tl::Loss::cross_entropy;
    EXPECT_THROW(tl::gradient_descent(spec, tl::init_weights(spec, 0), tl::make_synthetic_dataset(0), cfg), tl::SpecError);
}

TEST(GradientDescent, ZeroLearningRateLeavesWeights) {
    const auto spec = nets::biased_shallow(20, tl::ActivationKind::relu);
    const auto w = tl::init_weights(spec, 1);
    tl::GdConfig cfg;
    cfg.lr = 0.0;
    cfg.max_epochs = 25;
    const auto tr = tl::gradient_descent(spec, w, tl::make_synthetic_dataset(0), cfg);
    EXPECT_EQ(tr.final.flat, w.flat);
    EXPECT_EQ(tr.loss.size(), 26u);
    for (double l : tr.loss) EXPECT_EQ(l, tr.loss.front());
    EXPECT_EQ(tr.delta_k(), 0.0);
    EXPECT_FALSE(tr.converged);
}

TEST(GradientDescent, SmallStepsNeverIncreaseLoss) {
    const auto spec = nets::biased_shallow(30, tl::ActivationKind::tanh);
    const auto d = tl::make_synthetic_dataset(2, 20);
    const auto w = tl::init_weights(spec, 2);
    const tl::KernelMatrix k = tl::tangent_kernel(spec, w, d.inputs);
    tl::GdConfig cfg;
    cfg.lr = 0.2 / (2.0 / 20.0 * Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(k).eigenvalues().maxCoeff());
    cfg.max_epochs = 300;
    const auto tr = tl::gradient_descent(spec, w, d, cfg);
    for (std::size_t t = 1; t < tr.loss.size(); ++t) EXPECT_LE(tr.loss[t], tr.loss[t - 1]) << t;
}

TEST(GradientDescent, RecordsConsistentTrajectory) {
    const auto spec = nets::biased_shallow(40, tl::ActivationKind::tanh).with_head(tl::OutputHead::softmax());
    const auto d = tl::make_synthetic_dataset(3);
    const auto w = tl::init_weights(spec, 3);
    tl::GdConfig cfg;
    cfg.loss = tl::Loss::cross_entropy;
    cfg.lr = 0.05;
    cfg.max_epochs = 95;
    cfg.snapshot_every = 10;
    cfg.body_kernel = true;
    cfg.keep_snapshots = true;
    const auto tr = tl::gradient_descent(spec, w, d, cfg);
    EXPECT_EQ(tr.epochs, 95u);
    ASSERT_EQ(tr.snapshot_epochs.size(), 11u);
    EXPECT_EQ(tr.snapshot_epochs.front(), 0u);
    EXPECT_EQ(tr.snapshot_epochs.back(), 95u);
    for (std::size_t i = 1; i < tr.snapshot_epochs.size(); ++i) EXPECT_GT(tr.snapshot_epochs[i], tr.snapshot_epochs[i - 1]);
    EXPECT_EQ(tr.body_delta_k_t.size(), tr.snapshot_epochs.size());
    EXPECT_EQ(tr.weight_change.size(), 95u);
    EXPECT_DOUBLE_EQ(tr.delta_k(), tl::delta_k(tr.snapshots));
    EXPECT_NEAR(tr.final_loss(), tl::loss_at(spec, tr.final, d, cfg.loss), 1e-12);
    EXPECT_DOUBLE_EQ(tr.weight_change.back(), (tr.final.flat - w.flat).norm());
}

TEST(GradientDescent, LinearModelKernelIsConstant) {
    // f = (1/sqrt(m)) sum_i v_i w_i x is linear in w.
    const auto spec = nets::shallow(50, tl::ActivationKind::identity);
    auto d = tl::make_synthetic_dataset(4, 30);
    d.inputs /= 10.0;
    d.targets = d.targets.row(1).eval();
    tl::GdConfig cfg;
    cfg.lr = 0.1;
    cfg.max_epochs = 200;
    cfg.snapshot_every = 5;
    const auto tr = tl::gradient_descent(spec, tl::init_weights(spec, 4), d, cfg);
    EXPECT_LT(tr.delta_k(), 1e-10);
    EXPECT_GT(tr.weight_change.back(), 0.0);
}

TEST(GradientDescent, DivergenceIsReported) {
    const auto spec = nets::biased_shallow(50, tl::ActivationKind::relu);
    tl::GdConfig cfg;
    cfg.lr = 10.0;
    cfg.max_epochs = 1000;
    const auto tr = tl::gradient_descent(spec, tl::init_weights(spec, 0), tl::make_synthetic_dataset(0), cfg);
    EXPECT_TRUE(tr.diverged);
    EXPECT_FALSE(tr.converged);
    EXPECT_FALSE(tr.diagnostic.empty());
}

TEST(GradientDescent, ConvergesOnSmallProblem) {
    const auto spec = nets::biased_shallow(200, tl::ActivationKind::tanh);
    auto d = tl::make_synthetic_dataset(5, 12);
    tl::GdConfig cfg;
    cfg.lr = 0.01;
    cfg.max_epochs = 200000;
    cfg.tol = 1e-3;
    cfg.snapshot_every = 1000;
    const auto tr = tl::gradient_descent(spec, tl::init_weights(spec, 5), d, cfg);
    ASSERT_TRUE(tr.converged);
    EXPECT_LT(tr.final_loss(), 1e-3);
    const auto r = tl::weight_change_report(tr, spec, d);
    EXPECT_TRUE(r.holds);
    EXPECT_GT(r.lower_bound, 0.0);
}

TEST(WeightChange, NoMovementGivesZero) {
    const auto spec = nets::biased_shallow(10, tl::ActivationKind::relu);
    tl::Trajectory tr;
    tr.initial = tr.final = tl::init_weights(spec, 0);
    const auto r = tl::weight_change_report(tr, spec, tl::make_synthetic_dataset(0));
    EXPECT_EQ(r.change, 0.0);
    EXPECT_EQ(r.change_inf, 0.0);
}

}  // namespace
