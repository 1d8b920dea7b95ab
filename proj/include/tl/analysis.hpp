#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "tl/dataset.hpp"
#include "tl/derivatives.hpp"
#include "tl/kernel.hpp"
#include "tl/network.hpp"
#include "tl/norms.hpp"
#include "tl/quantities.hpp"

namespace tl {

struct PowerOptions {
    double tol = 1e-9;
    std::size_t max_iter = 1000;
    Seed seed = 0;
};

inline SpectralEstimate hessian_spectral_norm(const NetworkSpec& spec, const Weights& w, const Vector& x,
                                              std::size_t out_index, const PowerOptions& opt = {}) {
    auto op = std::make_shared<const HessianOperator>(spec, w, x, out_index);
    return spectral_norm(hessian_map(op), opt.tol, opt.max_iter, opt.seed);
}

// Max over output coordinates; converged only if every coordinate converged.
inline SpectralEstimate hessian_spectral_norm_all(const NetworkSpec& spec, const Weights& w, const Vector& x,
                                                  const PowerOptions& opt = {}) {
    SpectralEstimate best;
    best.converged = true;
    for (std::size_t c = 0; c < spec.output_dim; ++c) {
        const auto e = hessian_spectral_norm(spec, w, x, c, opt);
        best.converged = best.converged && e.converged;
        best.iterations = std::max(best.iterations, e.iterations);
        if (e.value >= best.value) {
            best.value = e.value;
            best.rayleigh = e.rayleigh;
        }
    }
    return best;
}

// max_t |K_t - K_0|_F / |K_0|_F over snapshots t >= 1.
inline double delta_k(const std::vector<KernelMatrix>& snapshots) {
    if (snapshots.size() < 2) throw std::invalid_argument("delta_k: need at least two snapshots");
    const double base = snapshots.front().norm();
    if (base == 0.0) throw std::domain_error("delta_k: initial kernel is zero");
    double out = 0.0;
    for (std::size_t t = 1; t < snapshots.size(); ++t) out = std::max(out, (snapshots[t] - snapshots.front()).norm() / base);
    return out;
}

struct KernelBallReport {
    double max_kernel_change = 0.0;  // max over probes and entries of |K(W) - K(W0)|
    double max_hessian = 0.0;        // epsilon: max over probes (and W0), inputs, outputs of |H|
    double max_gradient = 0.0;       // max over probes (and W0), inputs, outputs of |grad f|
    double radius = 0.0;
    double bound = 0.0;              // 2 * max_gradient * max_hessian * radius
    bool holds = true;
    std::size_t probes = 0;
};

// Probes W = W0 + r u with |u| = 1 and r cycling through R/4, R/2, 3R/4, R.
inline KernelBallReport kernel_change_vs_hessian_check(const NetworkSpec& spec, const Weights& w0, const Batch& inputs,
                                                       double radius, std::size_t probes, Seed seed,
                                                       const PowerOptions& power = {}) {
    require_smooth(spec, "kernel_change_vs_hessian_check");
    KernelBallReport r;
    r.radius = radius;
    r.probes = probes;
    const KernelMatrix k0 = tangent_kernel(spec, w0, inputs);
    auto account = [&](const Weights& w, const KernelMatrix& k) {
        r.max_gradient = std::max(r.max_gradient, std::sqrt(std::max(0.0, k.diagonal().maxCoeff())));
        for (Eigen::Index i = 0; i < inputs.cols(); ++i)
            r.max_hessian = std::max(r.max_hessian, hessian_spectral_norm_all(spec, w, inputs.col(i), power).value);
    };
    account(w0, k0);
    for (std::size_t p = 0; p < probes; ++p) {
        const double rad = radius * static_cast<double>(p % 4 + 1) / 4.0;
        Weights w = w0;
        w.flat += rad * random_unit_vector(w0.size(), seed, stream_id({stream_tag::probe, p}));
        const KernelMatrix k = tangent_kernel(spec, w, inputs);
        r.max_kernel_change = std::max(r.max_kernel_change, (k - k0).cwiseAbs().maxCoeff());
        account(w, k);
    }
    r.bound = 2.0 * r.max_gradient * r.max_hessian * radius;
    r.holds = r.max_kernel_change <= r.bound * (1.0 + 1e-9) + 1e-14;
    return r;
}

struct KappaReport {
    double kappa = 0.0;
    double a = 0.0;  // |f(w0) - y / alpha|
    double b = 0.0;  // max |H| / min |grad f|^2
};

struct KappaOptions {
    double alpha = 1.0;
    bool zero_output = false;  // treat f(w0) as 0
    PowerOptions power;
};

inline KappaReport kappa(const NetworkSpec& spec, const Weights& w0, const Dataset& data, const KappaOptions& opt = {}) {
    require_smooth(spec, "kappa");
    if (static_cast<std::size_t>(data.targets.rows()) != spec.output_dim) throw DimensionError("kappa: label width != output_dim");
    KappaReport r;
    const ForwardTrace t = forward_batch(spec, w0, data.inputs);
    const Batch f = opt.zero_output ? Batch::Zero(t.output.rows(), t.output.cols()) : t.output;
    r.a = (f - data.targets / opt.alpha).norm();
    double max_h = 0.0;
    double min_g = std::numeric_limits<double>::infinity();
    const KernelMatrix k = tangent_kernel(spec, w0, data.inputs);
    min_g = k.diagonal().minCoeff();
    for (Eigen::Index i = 0; i < data.inputs.cols(); ++i)
        max_h = std::max(max_h, hessian_spectral_norm_all(spec, w0, data.inputs.col(i), opt.power).value);
    if (!(min_g > 0.0)) throw std::domain_error("kappa: zero gradient norm");
    r.b = max_h / min_g;
    r.kappa = r.a * r.b;
    return r;
}

class ArchitectureError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// The bottleneck network: FC(m, quadratic), FC(1, identity), FC(m, quadratic), linear head, scalar in/out, NTK.
inline bool is_bottleneck_network(const NetworkSpec& spec) {
    if (spec.layers.size() != 3 || spec.input_dim != 1 || spec.output_dim != 1) return false;
    if (spec.head.kind != OutputHead::Kind::linear || spec.param != Parameterization::ntk) return false;
    const auto* a = std::get_if<FullyConnected>(&spec.layers[0]);
    const auto* b = std::get_if<FullyConnected>(&spec.layers[1]);
    const auto* c = std::get_if<FullyConnected>(&spec.layers[2]);
    if (!a || !b || !c) return false;
    return a->act.kind == ActivationKind::quadratic && b->act.kind == ActivationKind::identity &&
           c->act.kind == ActivationKind::quadratic && b->width == 1 && a->width == c->width && !a->bias &&
           a->normalized && b->normalized && c->normalized;
}

// Norm of the (w2, w2) Hessian block: m^{-3/2} |sum_j w4_j (w3_j)^2| |alpha^(1)|^2.
inline double bottleneck_block_stat(const NetworkSpec& spec, const Weights& w, double x) {
    if (!is_bottleneck_network(spec)) throw ArchitectureError("bottleneck_block_stat: not the bottleneck architecture");
    const ParameterLayout lay = make_layout(spec);
    const ForwardTrace t = forward(spec, w, Vector::Constant(1, x));
    const double m = static_cast<double>(lay.layers[0].out_dim);
    const ConstVectorMap w3(w.flat.data() + lay.layers[2].weight_offset, static_cast<Eigen::Index>(lay.layers[2].weight_count));
    const ConstVectorMap w4(w.flat.data() + lay.output_offset, static_cast<Eigen::Index>(lay.output_count()));
    return std::abs(w4.dot(w3.cwiseAbs2())) * t.act[0].col(0).squaredNorm() / std::pow(m, 1.5);
}

struct ScalingFit {
    std::vector<std::pair<double, double>> points;  // (ln width, ln value)
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
};

inline ScalingFit scaling_fit(const std::vector<std::pair<double, double>>& width_value) {
    if (width_value.size() < 3) throw std::invalid_argument("scaling_fit: need at least 3 points");
    ScalingFit fit;
    double sx = 0, sy = 0;
    for (const auto& [m, v] : width_value) {
        if (!(m > 0.0) || !(v > 0.0)) throw std::domain_error("scaling_fit: widths and values must be positive");
        fit.points.emplace_back(std::log(m), std::log(v));
        sx += fit.points.back().first;
        sy += fit.points.back().second;
    }
    const double n = static_cast<double>(fit.points.size());
    const double mx = sx / n, my = sy / n;
    double sxx = 0, sxy = 0, syy = 0;
    for (const auto& [lx, ly] : fit.points) {
        sxx += (lx - mx) * (lx - mx);
        sxy += (lx - mx) * (ly - my);
        syy += (ly - my) * (ly - my);
    }
    if (sxx == 0.0) throw std::domain_error("scaling_fit: all widths equal");
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    fit.r2 = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
    return fit;
}

}  // namespace tl
