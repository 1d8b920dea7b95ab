#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <vector>

#include "tl/derivatives.hpp"
#include "tl/network.hpp"
#include "tl/norms.hpp"

namespace tl {

namespace detail {

// Copy of a layer's geometry addressing a layer-local parameter vector (weights, then bias).
inline LayerShape local_shape(const LayerShape& s) {
    LayerShape local = s;
    local.weight_offset = 0;
    local.bias_offset = s.weight_count;
    return local;
}

// Shared per-layer state captured by the Jacobian maps and tensor actions.
struct LayerPoint {
    LayerShape shape;   // global offsets, for the current weights
    LayerShape local;   // local offsets, for parameter directions
    const double* weights = nullptr;
    Batch input;        // alpha^(l-1), one column
    Vector d1, d2;      // sigma'(pre), sigma''(pre)

    // P(u) = d pre / dW [u] including bias.
    Vector param_tangent(const Vector& u) const {
        Batch z = layer_pre(local, u.data(), input);
        add_bias(local, u.data(), z);
        return z.col(0);
    }
    Vector param_adjoint(const Vector& c) const {
        Vector g = Vector::Zero(static_cast<Eigen::Index>(local.param_count()));
        layer_param_adjoint(local, Batch(c), input, g.data());
        if (local.bias_count > 0) g.tail(static_cast<Eigen::Index>(local.bias_count)) += c;
        return g;
    }
    // R(x) = d pre / d alpha^(l-1) [x].
    Vector input_tangent(const Vector& x) const { return layer_pre(shape, weights, Batch(x)).col(0); }
    Vector input_adjoint(const Vector& c) const { return layer_input_adjoint(shape, weights, Batch(c)).col(0); }
};

inline std::shared_ptr<const LayerPoint> make_layer_point(const ParameterLayout& lay, const Weights& w,
                                                          const ForwardTrace& t, std::size_t l) {
    auto p = std::make_shared<LayerPoint>();
    p->shape = lay.layers[l];
    p->local = local_shape(p->shape);
    p->weights = w.flat.data();
    p->input = t.layer_input(l).col(0);
    const auto& act = p->shape.act;
    p->d1 = t.pre[l].col(0).unaryExpr([&](double z) { return act.d1(z); });
    p->d2 = t.pre[l].col(0).unaryExpr([&](double z) { return act.d2(z); });
    return p;
}

}  // namespace detail

// d alpha^(l) / d w^(l) (bias included) as a matrix-free map; l is 0-based.
inline LinearMap layer_param_jacobian(const ParameterLayout& lay, const Weights& w, const ForwardTrace& t, std::size_t l) {
    auto p = detail::make_layer_point(lay, w, t, l);
    LinearMap m;
    m.dim_in = p->local.param_count();
    m.dim_out = p->shape.out_dim;
    m.apply = [p](const Vector& u) -> Vector { return p->d1.cwiseProduct(p->param_tangent(u)); };
    m.adjoint = [p](const Vector& y) -> Vector { return p->param_adjoint(p->d1.cwiseProduct(y)); };
    return m;
}

// d alpha^(l) / d alpha^(l-1), with +I for residual layers; l >= 1.
inline LinearMap layer_input_jacobian(const ParameterLayout& lay, const Weights& w, const ForwardTrace& t, std::size_t l) {
    auto p = detail::make_layer_point(lay, w, t, l);
    const bool skip = p->shape.residual();
    LinearMap m;
    m.dim_in = p->shape.in_dim;
    m.dim_out = p->shape.out_dim;
    m.apply = [p, skip](const Vector& x) -> Vector {
        Vector y = p->d1.cwiseProduct(p->input_tangent(x));
        if (skip) y += x;
        return y;
    };
    m.adjoint = [p, skip](const Vector& y) -> Vector {
        Vector x = p->input_adjoint(p->d1.cwiseProduct(y));
        if (skip) x += y;
        return x;
    };
    return m;
}

// d^2 alpha^(l) / (d w^(l))^2: contract(u1, u2) = sigma'' . P(u1) . P(u2).
inline Order3Action layer_tensor_ww(const ParameterLayout& lay, const Weights& w, const ForwardTrace& t, std::size_t l) {
    auto p = detail::make_layer_point(lay, w, t, l);
    Order3Action a;
    a.d1 = a.d2 = p->local.param_count();
    a.d3 = p->shape.out_dim;
    a.contract = [p](const Vector& u1, const Vector& u2) -> Vector {
        return p->d2.cwiseProduct(p->param_tangent(u1)).cwiseProduct(p->param_tangent(u2));
    };
    a.adjoint_first = [p](const Vector& u2, const Vector& s) -> Vector {
        return p->param_adjoint(s.cwiseProduct(p->d2).cwiseProduct(p->param_tangent(u2)));
    };
    a.adjoint_second = a.adjoint_first;
    return a;
}

// d^2 alpha^(l) / (d alpha^(l-1))^2: contract(x, z) = sigma'' . R(x) . R(z).
inline Order3Action layer_tensor_aa(const ParameterLayout& lay, const Weights& w, const ForwardTrace& t, std::size_t l) {
    auto p = detail::make_layer_point(lay, w, t, l);
    Order3Action a;
    a.d1 = a.d2 = p->shape.in_dim;
    a.d3 = p->shape.out_dim;
    a.contract = [p](const Vector& x, const Vector& z) -> Vector {
        return p->d2.cwiseProduct(p->input_tangent(x)).cwiseProduct(p->input_tangent(z));
    };
    a.adjoint_first = [p](const Vector& z, const Vector& s) -> Vector {
        return p->input_adjoint(s.cwiseProduct(p->d2).cwiseProduct(p->input_tangent(z)));
    };
    a.adjoint_second = a.adjoint_first;
    return a;
}

// d^2 alpha^(l) / d alpha^(l-1) d w^(l) with (input direction x, parameter direction u):
// contract(x, u) = sigma'' . R(x) . P(u) + sigma' . P_W(u; x), the second term being the
// weight-direction preactivation evaluated on x instead of alpha^(l-1).
inline Order3Action layer_tensor_aw(const ParameterLayout& lay, const Weights& w, const ForwardTrace& t, std::size_t l) {
    auto p = detail::make_layer_point(lay, w, t, l);
    Order3Action a;
    a.d1 = p->shape.in_dim;
    a.d2 = p->local.param_count();
    a.d3 = p->shape.out_dim;
    a.contract = [p](const Vector& x, const Vector& u) -> Vector {
        Vector first = p->d2.cwiseProduct(p->input_tangent(x)).cwiseProduct(p->param_tangent(u));
        first += p->d1.cwiseProduct(detail::layer_pre(p->local, u.data(), Batch(x)).col(0));
        return first;
    };
    a.adjoint_first = [p](const Vector& u, const Vector& s) -> Vector {
        Vector g = p->input_adjoint(s.cwiseProduct(p->d2).cwiseProduct(p->param_tangent(u)));
        g += detail::layer_input_adjoint(p->local, u.data(), Batch(Vector(s.cwiseProduct(p->d1)))).col(0);
        return g;
    };
    a.adjoint_second = [p](const Vector& x, const Vector& s) -> Vector {
        Vector g = p->param_adjoint(s.cwiseProduct(p->d2).cwiseProduct(p->input_tangent(x)));
        detail::layer_param_adjoint(p->local, Batch(Vector(s.cwiseProduct(p->d1))), Batch(x), g.data());
        return g;
    };
    return a;
}

struct LayerQuantities {
    double b_inf = 0.0;   // |b^(l)|_inf
    double b_two = 0.0;   // |b^(l)|_2
    double jac_w = 0.0;   // |d alpha^(l) / d w^(l)|
    double jac_a = 0.0;   // |d alpha^(l) / d alpha^(l-1)|, 0 for the first layer
    double t_ww = 0.0;    // (2,2,1) norms of the three second-derivative tensors
    double t_aw = 0.0;
    double t_aa = 0.0;
    bool jac_converged = true;
};

struct QQuantities {
    double q_inf = 0.0;
    double q_l = 0.0;
    double q_221 = 0.0;
    double lipschitz_phi = 1.0;  // max(1, max_l |d alpha^(l) / d alpha^(l-1)|)
    std::vector<LayerQuantities> layers;
};

struct QuantityOptions {
    double tol = 1e-9;
    std::size_t max_iter = 1000;
    Tensor221Options tensor;
    Seed seed = 0;
};

// Q_inf, Q_L, Q_{2,2,1} of the linear-head body at input x for output coordinate out_index.
inline QQuantities layer_quantities(const NetworkSpec& spec, const Weights& w, const Vector& x, std::size_t out_index,
                                    const QuantityOptions& opt = {}) {
    const NetworkSpec body = spec.with_head(OutputHead::linear());
    require_smooth(body, "layer_quantities");
    const ParameterLayout lay = make_layout(body);
    const ForwardTrace t = forward(body, w, x);
    const GradientBundle g = gradient(body, w, t, out_index);
    const std::size_t depth = lay.layers.size();

    QQuantities q;
    q.layers.resize(depth);
    Tensor221Options topt = opt.tensor;
    for (std::size_t l = 0; l < depth; ++l) {
        auto& lq = q.layers[l];
        lq.b_inf = g.sensitivity[l].lpNorm<Eigen::Infinity>();
        lq.b_two = g.sensitivity[l].norm();
        const auto jw = spectral_norm(layer_param_jacobian(lay, w, t, l), opt.tol, opt.max_iter, opt.seed + l);
        lq.jac_w = jw.value;
        lq.jac_converged = jw.converged;
        topt.seed = opt.tensor.seed + 3 * l;
        lq.t_ww = tensor221_norm(layer_tensor_ww(lay, w, t, l), topt);
        if (l > 0) {
            const auto ja = spectral_norm(layer_input_jacobian(lay, w, t, l), opt.tol, opt.max_iter, opt.seed + l);
            lq.jac_a = ja.value;
            lq.jac_converged = lq.jac_converged && ja.converged;
            topt.seed = opt.tensor.seed + 3 * l + 1;
            lq.t_aw = tensor221_norm(layer_tensor_aw(lay, w, t, l), topt);
            topt.seed = opt.tensor.seed + 3 * l + 2;
            lq.t_aa = tensor221_norm(layer_tensor_aa(lay, w, t, l), topt);
        }
    }
    for (std::size_t l1 = 0; l1 < depth; ++l1) {
        const auto& a = q.layers[l1];
        q.q_inf = std::max(q.q_inf, a.b_inf);
        q.q_l = std::max(q.q_l, a.jac_w);
        q.q_221 = std::max(q.q_221, a.t_ww);
        if (l1 > 0) q.lipschitz_phi = std::max(q.lipschitz_phi, a.jac_a);
        for (std::size_t l2 = l1 + 1; l2 < depth; ++l2) q.q_221 = std::max(q.q_221, a.jac_w * q.layers[l2].t_aw);
        for (std::size_t l2 = l1; l2 < depth; ++l2)
            for (std::size_t l3 = l2 + 1; l3 < depth; ++l3)
                q.q_221 = std::max(q.q_221, a.jac_w * q.layers[l2].jac_w * q.layers[l3].t_aa);
    }
    return q;
}

// |H| <= C1 Q221 Qinf + C2 QL / sqrt(m), C1 = L(L^2 Lphi^2L + L Lphi^L + 1), C2 = L Lphi^L.
inline double hessian_bound(const QQuantities& q, std::size_t depth, double lipschitz_phi, double m) {
    const double L = static_cast<double>(depth);
    const double pl = std::pow(lipschitz_phi, L);
    const double c1 = L * (L * L * pl * pl + L * pl + 1.0);
    const double c2 = L * pl;
    return c1 * q.q_221 * q.q_inf + c2 * q.q_l / std::sqrt(m);
}

// The 1/sqrt(m) factor of the bound is the output-layer map scale; m = 1 under LeCun scaling.
inline double bound_width(const NetworkSpec& spec) {
    const ParameterLayout lay = make_layout(spec);
    return 1.0 / (lay.output_map_scale * lay.output_map_scale);
}

}  // namespace tl
