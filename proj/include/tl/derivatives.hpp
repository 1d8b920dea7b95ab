#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "tl/network.hpp"
#include "tl/tensor.hpp"

namespace tl {

// d(head_c)/d(raw) for one sample.
inline Vector head_adjoint(const OutputHead& head, const Vector& raw, std::size_t c) {
    Vector g = Vector::Zero(raw.size());
    switch (head.kind) {
        case OutputHead::Kind::linear: g[c] = 1.0; break;
        case OutputHead::Kind::activated: g[c] = head.phi.d1(raw[c]); break;
        case OutputHead::Kind::softmax: {
            const Vector p = detail::softmax_columns(raw).col(0);
            g = -p[c] * p;
            g[c] += p[c];
            break;
        }
    }
    return g;
}

// Directional derivative of head_adjoint along d(raw).
inline Vector head_adjoint_tangent(const OutputHead& head, const Vector& raw, const Vector& draw, std::size_t c) {
    Vector dg = Vector::Zero(raw.size());
    switch (head.kind) {
        case OutputHead::Kind::linear: break;
        case OutputHead::Kind::activated: dg[c] = head.phi.d2(raw[c]) * draw[c]; break;
        case OutputHead::Kind::softmax: {
            const Vector p = detail::softmax_columns(raw).col(0);
            const Vector dp = p.cwiseProduct((draw.array() - p.dot(draw)).matrix());
            dg = -dp[c] * p - p[c] * dp;
            dg[c] += dp[c];
            break;
        }
    }
    return dg;
}

// Transpose of the head Jacobian applied to u, per sample: returns J_head(raw)^T u.
inline Batch head_vjp(const OutputHead& head, const Batch& raw, const Batch& u) {
    switch (head.kind) {
        case OutputHead::Kind::linear: return u;
        case OutputHead::Kind::activated:
            return u.cwiseProduct(raw.unaryExpr([&](double v) { return head.phi.d1(v); }));
        case OutputHead::Kind::softmax: {
            const Batch p = detail::softmax_columns(raw);
            Batch out(u.rows(), u.cols());
            for (Eigen::Index n = 0; n < u.cols(); ++n)
                out.col(n) = p.col(n).cwiseProduct((u.col(n).array() - p.col(n).dot(u.col(n))).matrix());
            return out;
        }
    }
    return u;
}

struct BackwardCache {
    std::vector<Batch> sensitivity;  // b^(l) = df/d alpha^(l)
    std::vector<Batch> delta;        // df/d pre^(l) = sigma'(pre) * b^(l) (residual: skip part excluded)
};

// Reverse pass for an adjoint G (output_dim x n) on the linear-head output, summed over samples.
inline Vector backprop(const NetworkSpec& spec, const ParameterLayout& lay, const Weights& w, const ForwardTrace& t,
                       const Batch& g, BackwardCache* cache = nullptr) {
    Vector grad = Vector::Zero(static_cast<Eigen::Index>(lay.total));
    const std::size_t depth = lay.layers.size();
    const Batch& top = t.act.back();
    if (lay.output_trainable) {
        MatrixMap gv(grad.data() + lay.output_offset, lay.output_rows, lay.output_cols);
        gv.noalias() = lay.output_map_scale * (g * top.transpose());
    }
    Batch b = lay.output_map_scale * (output_matrix(lay, w).transpose() * g);
    if (cache) {
        cache->sensitivity.assign(depth, Batch());
        cache->delta.assign(depth, Batch());
    }
    for (std::size_t l = depth; l-- > 0;) {
        const auto& s = lay.layers[l];
        Batch delta = detail::times_act_d1(s.act, t.pre[l], b);
        detail::layer_param_adjoint(s, delta, t.layer_input(l), grad.data());
        if (s.bias_count > 0) VectorMap(grad.data() + s.bias_offset, s.bias_count) += delta.rowwise().sum();
        Batch below;
        if (l > 0) {
            below = detail::layer_input_adjoint(s, w.flat.data(), delta);
            if (s.residual()) below += b;
        }
        if (cache) {
            cache->sensitivity[l] = std::move(b);
            cache->delta[l] = std::move(delta);
        }
        b = std::move(below);
    }
    (void)spec;
    return grad;
}

struct GradientBundle {
    Vector flat;                     // df_c/dW in the flat layout
    std::vector<Vector> sensitivity;  // b^(l), l = 1..L stored at [l-1]
    Vector head_adjoint;             // d(head_c)/d(raw)
    double value = 0.0;              // head_c at the traced input

    // View of the layer-l block (0-based) of the flat gradient, bias included.
    Eigen::Map<const Vector> layer(const ParameterLayout& lay, std::size_t l) const {
        const auto& s = lay.layers[l];
        return {flat.data() + s.param_offset(), static_cast<Eigen::Index>(s.param_count())};
    }
    Eigen::Map<const Vector> output(const ParameterLayout& lay) const {
        return {flat.data() + lay.output_offset, static_cast<Eigen::Index>(lay.output_count())};
    }
};

inline void check_out_index(const NetworkSpec& spec, std::size_t out_index) {
    if (out_index >= spec.output_dim) throw DimensionError("out_index >= output_dim");
}

inline GradientBundle gradient(const NetworkSpec& spec, const Weights& w, const ForwardTrace& t, std::size_t out_index) {
    check_out_index(spec, out_index);
    if (t.samples() != 1) throw DimensionError("gradient: trace must hold exactly one input");
    const ParameterLayout lay = make_layout(spec);
    GradientBundle out;
    out.head_adjoint = head_adjoint(spec.head, t.raw.col(0), out_index);
    out.value = t.output(static_cast<Eigen::Index>(out_index), 0);
    BackwardCache cache;
    out.flat = backprop(spec, lay, w, t, Batch(out.head_adjoint), &cache);
    for (auto& b : cache.sensitivity) out.sensitivity.emplace_back(b.col(0));
    return out;
}

inline void require_smooth(const NetworkSpec& spec, const char* what) {
    if (!spec.smooth()) throw SmoothnessError(std::string(what) + ": second derivatives need smooth activations (relu rejected)");
}

// Matrix-free Hessian of head_c(f(W; x)) with respect to W, by forward-over-reverse propagation.
// Holds pointers to the spec and weights; both must outlive the operator.
class HessianOperator {
public:
    HessianOperator(const NetworkSpec& spec, const Weights& w, const Vector& x, std::size_t out_index)
        : spec_(&spec), w_(&w), lay_(make_layout(spec)), c_(out_index), trace_(forward(spec, w, x)) {
        require_smooth(spec, "hessian");
        check_out_index(spec, out_index);
        g_ = head_adjoint(spec.head, trace_.raw.col(0), c_);
        grad_ = backprop(spec, lay_, w, trace_, Batch(g_), &cache_);
    }

    std::size_t dim() const { return lay_.total; }
    const ForwardTrace& trace() const { return trace_; }
    const Vector& gradient() const { return grad_; }
    const ParameterLayout& layout() const { return lay_; }
    const BackwardCache& cache() const { return cache_; }

    Vector apply(const Vector& u) const {
        if (static_cast<std::size_t>(u.size()) != lay_.total) throw DimensionError("hvp: direction length != parameter count");
        const std::size_t depth = lay_.layers.size();
        const double* wf = w_->flat.data();
        const double* uf = u.data();

        // Tangent forward pass.
        std::vector<Batch> dpre(depth), dact(depth);
        for (std::size_t l = 0; l < depth; ++l) {
            const auto& s = lay_.layers[l];
            Batch dz = detail::layer_pre(s, uf, trace_.layer_input(l));
            if (l > 0) dz += detail::layer_pre(s, wf, dact[l - 1]);
            detail::add_bias(s, uf, dz);
            Batch da = dz.cwiseProduct(detail::act_d1(s.act, trace_.pre[l]));
            if (s.residual()) da += dact[l - 1];
            dpre[l] = std::move(dz);
            dact[l] = std::move(da);
        }
        const auto v = output_matrix(lay_, *w_);
        const Batch& top = trace_.act.back();
        Batch draw = lay_.output_map_scale * (v * dact.back());
        if (lay_.output_trainable)
            draw += lay_.output_map_scale * (ConstMatrixMap(uf + lay_.output_offset, lay_.output_rows, lay_.output_cols) * top);
        const Vector dg = head_adjoint_tangent(spec_->head, trace_.raw.col(0), draw.col(0), c_);

        // Tangent of the reverse pass.
        Vector out = Vector::Zero(static_cast<Eigen::Index>(lay_.total));
        const Batch gb(g_);
        const Batch dgb(dg);
        if (lay_.output_trainable) {
            MatrixMap go(out.data() + lay_.output_offset, lay_.output_rows, lay_.output_cols);
            go.noalias() = lay_.output_map_scale * (dgb * top.transpose() + gb * dact.back().transpose());
        }
        Batch db = lay_.output_map_scale * (v.transpose() * dgb);
        if (lay_.output_trainable)
            db += lay_.output_map_scale *
                  (ConstMatrixMap(uf + lay_.output_offset, lay_.output_rows, lay_.output_cols).transpose() * gb);
        for (std::size_t l = depth; l-- > 0;) {
            const auto& s = lay_.layers[l];
            const Batch& z = trace_.pre[l];
            const Batch& b = cache_.sensitivity[l];
            const Batch& delta = cache_.delta[l];
            Batch ddelta = z.unaryExpr([&](double q) { return s.act.d2(q); }).cwiseProduct(dpre[l]).cwiseProduct(b) +
                           detail::act_d1(s.act, z).cwiseProduct(db);
            detail::layer_param_adjoint(s, ddelta, trace_.layer_input(l), out.data());
            if (l > 0) detail::layer_param_adjoint(s, delta, dact[l - 1], out.data());
            if (s.bias_count > 0) VectorMap(out.data() + s.bias_offset, s.bias_count) += ddelta.col(0);
            if (l > 0) {
                Batch below = detail::layer_input_adjoint(s, wf, ddelta) + detail::layer_input_adjoint(s, uf, delta);
                if (s.residual()) below += db;
                db = std::move(below);
            }
        }
        return out;
    }

private:
    const NetworkSpec* spec_;
    const Weights* w_;
    ParameterLayout lay_;
    std::size_t c_;
    ForwardTrace trace_;
    Vector g_;
    Vector grad_;
    BackwardCache cache_;
};

inline LinearMap hessian_map(std::shared_ptr<const HessianOperator> op) {
    LinearMap m;
    m.dim_in = m.dim_out = op->dim();
    m.symmetric = true;
    m.apply = [op](const Vector& u) { return op->apply(u); };
    return m;
}

inline Vector hvp(const NetworkSpec& spec, const Weights& w, const Vector& x, std::size_t out_index, const Vector& direction) {
    return HessianOperator(spec, w, x, out_index).apply(direction);
}

}  // namespace tl
