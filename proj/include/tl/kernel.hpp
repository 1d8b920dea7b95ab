#pragma once

#include <cstddef>
#include <vector>

#include "tl/derivatives.hpp"
#include "tl/network.hpp"

namespace tl {

// Rows/cols ordered (input i, output c) -> i * C + c.
using KernelMatrix = Eigen::MatrixXd;

struct KernelOptions {
    bool post_head = true;  // false: kernel of the linear-head body f instead of head(f)
};

namespace detail {

// Per-layer delta = d head_c / d pre^(l) for every (sample, output) column, without parameter gradients.
inline std::vector<Batch> backward_deltas(const ParameterLayout& lay, const Weights& w, const ForwardTrace& t,
                                          const Batch& g) {
    const std::size_t depth = lay.layers.size();
    std::vector<Batch> deltas(depth);
    Batch b = lay.output_map_scale * (output_matrix(lay, w).transpose() * g);
    for (std::size_t l = depth; l-- > 0;) {
        const auto& s = lay.layers[l];
        deltas[l] = detail::times_act_d1(s.act, t.pre[l], b);
        if (l > 0) {
            Batch below = layer_input_adjoint(s, w.flat.data(), deltas[l]);
            if (s.residual()) below += b;
            b = std::move(below);
        }
    }
    return deltas;
}

// Repeats each column C times: column i -> columns i*C .. i*C + C - 1.
inline Batch repeat_columns(const Batch& a, std::size_t c) {
    Batch out(a.rows(), a.cols() * static_cast<Eigen::Index>(c));
    for (Eigen::Index i = 0; i < a.cols(); ++i)
        for (std::size_t k = 0; k < c; ++k) out.col(i * static_cast<Eigen::Index>(c) + static_cast<Eigen::Index>(k)) = a.col(i);
    return out;
}

inline ForwardTrace repeat_trace(const ForwardTrace& t, std::size_t c) {
    if (c == 1) return t;
    ForwardTrace r;
    r.input = repeat_columns(t.input, c);
    for (const auto& p : t.pre) r.pre.push_back(repeat_columns(p, c));
    for (const auto& a : t.act) r.act.push_back(repeat_columns(a, c));
    r.raw = repeat_columns(t.raw, c);
    r.output = repeat_columns(t.output, c);
    return r;
}

}  // namespace detail

// K[(i,a),(j,b)] = grad f_a(x_i) . grad f_b(x_j), assembled layer by layer: for a fully connected
// layer the weight gradient is an outer product delta a^T, so its Gram factors into (delta Gram) .* (input Gram).
inline KernelMatrix tangent_kernel(const NetworkSpec& spec, const Weights& w, const Batch& inputs,
                                   const KernelOptions& opt = {}) {
    if (inputs.cols() == 0) throw DimensionError("tangent_kernel: no inputs");
    const NetworkSpec model = opt.post_head ? spec : spec.with_head(OutputHead::linear());
    const ParameterLayout lay = make_layout(model);
    const auto c = static_cast<std::size_t>(model.output_dim);
    const ForwardTrace t = detail::repeat_trace(forward_batch(model, w, inputs), c);
    const Eigen::Index nc = t.raw.cols();

    // Head adjoints for every (sample, output) column.
    Batch g(static_cast<Eigen::Index>(c), nc);
    for (Eigen::Index j = 0; j < nc; ++j)
        g.col(j) = head_adjoint(model.head, t.raw.col(j), static_cast<std::size_t>(j) % c);
    const Batch& top = t.act.back();
    const std::vector<Batch> deltas = detail::backward_deltas(lay, w, t, g);

    KernelMatrix k = KernelMatrix::Zero(nc, nc);
    if (lay.output_trainable) {
        const double s2 = lay.output_map_scale * lay.output_map_scale;
        k += s2 * (g.transpose() * g).cwiseProduct(top.transpose() * top);
    }
    for (std::size_t l = 0; l < lay.layers.size(); ++l) {
        const auto& s = lay.layers[l];
        const Batch& in = t.layer_input(l);
        if (!s.conv()) {
            const Eigen::MatrixXd dg = deltas[l].transpose() * deltas[l];
            Eigen::MatrixXd ag = s.map_scale * s.map_scale * (in.transpose() * in);
            if (s.bias_count > 0) ag.array() += 1.0;
            k += dg.cwiseProduct(ag);
        } else {
            Eigen::MatrixXd grads = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(s.weight_count), nc);
            const LayerShape local = [&] {
                LayerShape ls = s;
                ls.weight_offset = 0;
                return ls;
            }();
            for (Eigen::Index j = 0; j < nc; ++j)
                detail::layer_param_adjoint(local, deltas[l].col(j), in.col(j), grads.col(j).data());
            k += grads.transpose() * grads;
        }
    }
    return 0.5 * (k + k.transpose());
}

inline KernelMatrix tangent_kernel(const NetworkSpec& spec, const Weights& w, const std::vector<Vector>& inputs,
                                   const KernelOptions& opt = {}) {
    if (inputs.empty()) throw DimensionError("tangent_kernel: no inputs");
    Batch x(inputs.front().size(), static_cast<Eigen::Index>(inputs.size()));
    for (std::size_t i = 0; i < inputs.size(); ++i) x.col(static_cast<Eigen::Index>(i)) = inputs[i];
    return tangent_kernel(spec, w, x, opt);
}

}  // namespace tl
