#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tl/dataset.hpp"
#include "tl/derivatives.hpp"
#include "tl/kernel.hpp"
#include "tl/network.hpp"

namespace tl {

enum class Loss { square, cross_entropy };

inline const char* to_string(Loss l) { return l == Loss::square ? "square" : "cross_entropy"; }

struct GdConfig {
    Loss loss = Loss::square;
    double lr = 1e-2;
    std::size_t max_epochs = 10000;
    double tol = 1e-4;
    std::size_t snapshot_every = 10;
    bool body_kernel = false;      // also track the kernel of the linear-head body
    bool keep_snapshots = false;   // store every kernel snapshot in the trajectory
    double divergence = 1e6;
    std::optional<std::chrono::steady_clock::time_point> deadline;  // stop unconverged once passed
};

struct Trajectory {
    std::vector<double> loss;                 // loss[t] at W_t, t = 0 .. epochs
    std::vector<std::size_t> snapshot_epochs;
    std::vector<double> delta_k_t;            // |K_t - K_0|_F / |K_0|_F at each snapshot (post-head)
    std::vector<double> body_delta_k_t;       // same for the linear-head body, when tracked
    std::vector<KernelMatrix> snapshots;      // only with keep_snapshots
    std::vector<double> weight_change;        // |W_t - W_0| per epoch
    std::vector<double> weight_change_inf;    // |W_t - W_0|_inf per epoch
    Weights initial, final;
    double max_gradient_norm = 0.0;           // max over snapshots, inputs and outputs of |grad f|
    std::size_t epochs = 0;
    bool converged = false;
    bool diverged = false;
    bool timed_out = false;
    std::string diagnostic;

    double delta_k() const { return delta_k_t.empty() ? 0.0 : *std::max_element(delta_k_t.begin(), delta_k_t.end()); }
    double body_delta_k() const {
        return body_delta_k_t.empty() ? 0.0 : *std::max_element(body_delta_k_t.begin(), body_delta_k_t.end());
    }
    double final_loss() const { return loss.empty() ? std::numeric_limits<double>::quiet_NaN() : loss.back(); }
};

inline void check_loss_head(const NetworkSpec& spec, Loss loss) {
    if (loss == Loss::cross_entropy && spec.head.kind != OutputHead::Kind::softmax)
        throw SpecError("cross-entropy loss requires a softmax head");
}

// Square: (1/N) sum_i |head(f(x_i)) - y_i|^2. Cross-entropy: -(1/N) sum_i y_i . log softmax(f(x_i)).
inline double loss_value(Loss loss, const ForwardTrace& t, const Batch& y) {
    const double n = static_cast<double>(t.samples());
    if (loss == Loss::square) return (t.output - y).squaredNorm() / n;
    double total = 0.0;
    for (Eigen::Index i = 0; i < t.raw.cols(); ++i) {
        const double mx = t.raw.col(i).maxCoeff();
        const double lse = mx + std::log((t.raw.col(i).array() - mx).exp().sum());
        total -= y.col(i).dot((t.raw.col(i).array() - lse).matrix());
    }
    return total / n;
}

// dL / d(raw linear-head output), C x N.
inline Batch loss_raw_adjoint(const NetworkSpec& spec, Loss loss, const ForwardTrace& t, const Batch& y) {
    const double n = static_cast<double>(t.samples());
    if (loss == Loss::square) return head_vjp(spec.head, t.raw, (2.0 / n) * (t.output - y));
    Batch g = detail::softmax_columns(t.raw);
    for (Eigen::Index i = 0; i < g.cols(); ++i) g.col(i) = g.col(i) * y.col(i).sum() - y.col(i);
    return g / n;
}

inline double loss_at(const NetworkSpec& spec, const Weights& w, const Dataset& data, Loss loss) {
    return loss_value(loss, forward_batch(spec, w, data.inputs), data.targets);
}

inline Vector loss_gradient(const NetworkSpec& spec, const Weights& w, const Dataset& data, Loss loss) {
    const ParameterLayout lay = make_layout(spec);
    const ForwardTrace t = forward_batch(spec, w, data.inputs);
    return backprop(spec, lay, w, t, loss_raw_adjoint(spec, loss, t, data.targets));
}

inline Trajectory gradient_descent(const NetworkSpec& spec, const Weights& w0, const Dataset& data, const GdConfig& cfg) {
    if (!(cfg.lr >= 0.0)) throw std::invalid_argument("gradient_descent: lr must be >= 0");
    if (cfg.snapshot_every == 0) throw std::invalid_argument("gradient_descent: snapshot_every must be >= 1");
    if (data.classes() != spec.output_dim) throw DimensionError("gradient_descent: label width != output_dim");
    check_loss_head(spec, cfg.loss);
    const ParameterLayout lay = make_layout(spec);

    Trajectory tr;
    tr.initial = w0;
    Weights w = w0;
    const KernelOptions post{true}, body{false};
    const KernelMatrix k0 = tangent_kernel(spec, w0, data.inputs, post);
    const double k0_norm = k0.norm();
    std::optional<KernelMatrix> b0;
    double b0_norm = 0.0;
    if (cfg.body_kernel) {
        b0 = tangent_kernel(spec, w0, data.inputs, body);
        b0_norm = b0->norm();
    }
    if (k0_norm == 0.0 || (cfg.body_kernel && b0_norm == 0.0)) throw std::domain_error("gradient_descent: initial kernel is zero");

    auto snapshot = [&](std::size_t epoch, const KernelMatrix& k) {
        tr.snapshot_epochs.push_back(epoch);
        tr.delta_k_t.push_back((k - k0).norm() / k0_norm);
        tr.max_gradient_norm = std::max(tr.max_gradient_norm, std::sqrt(std::max(0.0, k.diagonal().maxCoeff())));
        if (b0) tr.body_delta_k_t.push_back((tangent_kernel(spec, w, data.inputs, body) - *b0).norm() / b0_norm);
        if (cfg.keep_snapshots) tr.snapshots.push_back(k);
    };
    snapshot(0, k0);

    std::size_t epoch = 0;
    for (;;) {
        ForwardTrace t;
        double value = 0.0;
        try {
            t = forward_batch(spec, w, data.inputs);
            value = loss_value(cfg.loss, t, data.targets);
        } catch (const NumericalError& e) {
            tr.diverged = true;
            tr.diagnostic = std::string("epoch ") + std::to_string(epoch) + ": " + e.what();
            break;
        }
        tr.loss.push_back(value);
        if (!std::isfinite(value) || value > cfg.divergence) {
            tr.diverged = true;
            tr.diagnostic = "epoch " + std::to_string(epoch) + ": loss diverged";
            break;
        }
        if (value < cfg.tol) {
            tr.converged = true;
            break;
        }
        if (epoch == cfg.max_epochs) break;
        if (cfg.deadline && epoch % 64 == 0 && std::chrono::steady_clock::now() > *cfg.deadline) {
            tr.timed_out = true;
            tr.diagnostic = "epoch " + std::to_string(epoch) + ": deadline reached";
            break;
        }
        w.flat -= cfg.lr * backprop(spec, lay, w, t, loss_raw_adjoint(spec, cfg.loss, t, data.targets));
        ++epoch;
        tr.weight_change.push_back((w.flat - w0.flat).norm());
        tr.weight_change_inf.push_back(w.flat.size() == 0 ? 0.0 : (w.flat - w0.flat).lpNorm<Eigen::Infinity>());
        if (!std::isfinite(tr.weight_change.back())) {
            tr.diverged = true;
            tr.diagnostic = "epoch " + std::to_string(epoch) + ": non-finite weights";
            break;
        }
        if (epoch % cfg.snapshot_every == 0) snapshot(epoch, tangent_kernel(spec, w, data.inputs, post));
    }
    tr.epochs = epoch;
    if (!tr.diverged && (tr.snapshot_epochs.back() != epoch)) snapshot(epoch, tangent_kernel(spec, w, data.inputs, post));
    tr.final = w;
    return tr;
}

struct WeightChangeReport {
    double change = 0.0;      // |W* - W0|
    double change_inf = 0.0;  // |W* - W0|_inf
    double lower_bound = 0.0; // max_{i,c} |f_c(W0; x_i) - y_ic| / sup |grad f|
    bool holds = true;
};

// The sup of the gradient norm is replaced by the maximum observed over the trajectory's kernel snapshots.
inline WeightChangeReport weight_change_report(const Trajectory& tr, const NetworkSpec& spec, const Dataset& data) {
    WeightChangeReport r;
    r.change = (tr.final.flat - tr.initial.flat).norm();
    r.change_inf = tr.final.flat.size() == 0 ? 0.0 : (tr.final.flat - tr.initial.flat).lpNorm<Eigen::Infinity>();
    const ForwardTrace t0 = forward_batch(spec, tr.initial, data.inputs);
    const double residual = (t0.output - data.targets).cwiseAbs().maxCoeff();
    r.lower_bound = tr.max_gradient_norm > 0.0 ? residual / tr.max_gradient_norm : 0.0;
    r.holds = r.change >= r.lower_bound * (1.0 - 1e-12);
    return r;
}

}  // namespace tl
