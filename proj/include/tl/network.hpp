#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "tl/activation.hpp"
#include "tl/random.hpp"
#include "tl/tensor.hpp"

namespace tl {

enum class Parameterization { ntk, lecun };

struct FullyConnected {
    std::size_t width = 0;
    Activation act{ActivationKind::tanh};
    bool bias = false;        // first layer only
    bool normalized = true;   // false drops the 1/sqrt(fan-in) factor (bottleneck W3)
};

struct Conv1D {
    std::size_t channels = 0;
    std::size_t pixels = 1;
    std::size_t filter = 1;
    Activation act{ActivationKind::tanh};
};

struct Residual {
    std::size_t width = 0;
    Activation act{ActivationKind::tanh};
};

// f = (1/sqrt(m)) sum_i v_i sigma(w_i . x / sqrt(d)) with fixed v_i in {-1, +1}.
struct Shallow {
    std::size_t width = 0;
    Activation act{ActivationKind::tanh};
};

using LayerSpec = std::variant<FullyConnected, Conv1D, Residual, Shallow>;

struct OutputHead {
    enum class Kind { linear, activated, softmax };
    Kind kind = Kind::linear;
    Activation phi{ActivationKind::identity};

    static OutputHead linear() { return {}; }
    static OutputHead activated(Activation phi) { return {Kind::activated, phi}; }
    static OutputHead softmax() { return {Kind::softmax, Activation(ActivationKind::softmax)}; }

    bool smooth() const { return kind != Kind::activated || phi.smooth(); }
    std::string name() const {
        switch (kind) {
            case Kind::linear: return "linear";
            case Kind::softmax: return "softmax";
            case Kind::activated: return std::string(phi.name());
        }
        return "?";
    }
};

class SpecError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& what, std::size_t layer)
        : std::runtime_error(what + " (layer " + std::to_string(layer) + ")"), layer_(layer) {}
    std::size_t layer() const { return layer_; }

private:
    std::size_t layer_;
};

struct NetworkSpec {
    std::size_t input_dim = 1;
    std::size_t output_dim = 1;
    std::vector<LayerSpec> layers;
    OutputHead head;
    Parameterization param = Parameterization::ntk;

    std::size_t depth() const { return layers.size(); }
    void validate() const;

    bool smooth() const {
        for (const auto& l : layers) {
            const Activation a = std::visit([](const auto& s) { return s.act; }, l);
            if (!a.smooth()) return false;
        }
        return head.smooth();
    }

    NetworkSpec with_head(OutputHead h) const {
        NetworkSpec s = *this;
        s.head = h;
        return s;
    }
};

enum class LayerKind { fully_connected, conv1d, residual, shallow };

// Resolved geometry of one hidden layer inside the flat parameter vector.
struct LayerShape {
    LayerKind kind = LayerKind::fully_connected;
    Activation act;
    std::size_t in_dim = 0, out_dim = 0;
    std::size_t in_channels = 0, out_channels = 0, pixels = 1, filter = 1;
    std::size_t weight_offset = 0, weight_count = 0;
    std::size_t bias_offset = 0, bias_count = 0;
    double fan_scale = 1.0;  // sigma_m: 1/sqrt(fan-in), or 1 for unnormalized layers
    double map_scale = 1.0;  // explicit factor in the layer map
    double init_std = 1.0;

    bool residual() const { return kind == LayerKind::residual; }
    bool conv() const { return kind == LayerKind::conv1d; }
    std::size_t param_offset() const { return weight_offset; }
    std::size_t param_count() const { return weight_count + bias_count; }
};

struct ParameterLayout {
    std::vector<LayerShape> layers;
    std::size_t output_offset = 0;
    std::size_t output_rows = 0, output_cols = 0;
    bool output_trainable = true;
    double output_fan_scale = 1.0, output_map_scale = 1.0, output_init_std = 1.0;
    std::size_t total = 0;

    std::size_t output_count() const { return output_trainable ? output_rows * output_cols : 0; }
};

inline void NetworkSpec::validate() const {
    if (input_dim == 0) throw SpecError("input_dim must be >= 1");
    if (output_dim == 0) throw SpecError("output_dim must be >= 1");
    if (layers.empty()) throw SpecError("at least one hidden layer required");
    if (head.kind == OutputHead::Kind::activated && !head.phi.elementwise())
        throw SpecError("activated head needs an elementwise activation");
    std::size_t prev = input_dim;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& layer = layers[l];
        const std::string where = "layer " + std::to_string(l + 1) + ": ";
        if (const auto* fc = std::get_if<FullyConnected>(&layer)) {
            if (fc->width == 0) throw SpecError(where + "width must be >= 1");
            if (fc->bias && l != 0) throw SpecError(where + "bias is supported on the first layer only");
            if (!fc->act.elementwise()) throw SpecError(where + "softmax is only valid as an output head");
            prev = fc->width;
        } else if (const auto* cv = std::get_if<Conv1D>(&layer)) {
            if (cv->channels == 0 || cv->pixels == 0) throw SpecError(where + "channels and pixels must be >= 1");
            if (cv->filter % 2 == 0) throw SpecError(where + "filter size must be odd");
            if (prev % cv->pixels != 0) throw SpecError(where + "input size not divisible by pixel count");
            if (!cv->act.elementwise()) throw SpecError(where + "softmax is only valid as an output head");
            prev = cv->channels * cv->pixels;
        } else if (const auto* rs = std::get_if<Residual>(&layer)) {
            if (l == 0) throw SpecError(where + "residual layer cannot be the first layer");
            if (rs->width != prev) throw SpecError(where + "residual width must equal the previous layer width");
            if (!rs->act.elementwise()) throw SpecError(where + "softmax is only valid as an output head");
        } else if (const auto* sh = std::get_if<Shallow>(&layer)) {
            if (layers.size() != 1) throw SpecError(where + "shallow spec must be the only layer");
            if (sh->width == 0) throw SpecError(where + "width must be >= 1");
            if (!sh->act.elementwise()) throw SpecError(where + "softmax is only valid as an output head");
            prev = sh->width;
        }
    }
}

inline ParameterLayout make_layout(const NetworkSpec& spec) {
    spec.validate();
    const bool ntk = spec.param == Parameterization::ntk;
    ParameterLayout lay;
    std::size_t offset = 0;
    std::size_t prev = spec.input_dim;
    for (const auto& layer : spec.layers) {
        LayerShape s;
        s.in_dim = prev;
        bool normalized = true;
        std::size_t fan = prev;
        if (const auto* fc = std::get_if<FullyConnected>(&layer)) {
            s.kind = LayerKind::fully_connected;
            s.act = fc->act;
            s.out_dim = fc->width;
            s.bias_count = fc->bias ? fc->width : 0;
            normalized = fc->normalized;
        } else if (const auto* cv = std::get_if<Conv1D>(&layer)) {
            s.kind = LayerKind::conv1d;
            s.act = cv->act;
            s.pixels = cv->pixels;
            s.filter = cv->filter;
            s.out_dim = cv->channels * cv->pixels;
            fan = prev / cv->pixels;
        } else if (const auto* rs = std::get_if<Residual>(&layer)) {
            s.kind = LayerKind::residual;
            s.act = rs->act;
            s.out_dim = rs->width;
        } else if (const auto* sh = std::get_if<Shallow>(&layer)) {
            s.kind = LayerKind::shallow;
            s.act = sh->act;
            s.out_dim = sh->width;
        }
        s.in_channels = s.in_dim / s.pixels;
        s.out_channels = s.out_dim / s.pixels;
        s.weight_offset = offset;
        s.weight_count = s.filter * s.out_channels * s.in_channels;
        s.bias_offset = offset + s.weight_count;
        offset += s.weight_count + s.bias_count;
        s.fan_scale = normalized ? 1.0 / std::sqrt(static_cast<double>(fan)) : 1.0;
        s.map_scale = ntk ? s.fan_scale : 1.0;
        s.init_std = ntk ? 1.0 : s.fan_scale;
        lay.layers.push_back(s);
        prev = s.out_dim;
    }
    lay.output_rows = spec.output_dim;
    lay.output_cols = prev;
    lay.output_trainable = !std::holds_alternative<Shallow>(spec.layers.front());
    if (!lay.output_trainable && spec.output_dim != 1) throw SpecError("shallow spec has a scalar output");
    lay.output_offset = offset;
    lay.output_fan_scale = 1.0 / std::sqrt(static_cast<double>(prev));
    lay.output_map_scale = ntk ? lay.output_fan_scale : 1.0;
    lay.output_init_std = ntk ? 1.0 : lay.output_fan_scale;
    lay.total = offset + lay.output_count();
    return lay;
}

struct Weights {
    Vector flat;          // every trainable parameter, layer by layer, output layer last
    Matrix fixed_output;  // the non-trainable output signs of a shallow spec (empty otherwise)

    std::size_t size() const { return static_cast<std::size_t>(flat.size()); }
    double norm() const { return flat.norm(); }
    double norm_inf() const { return flat.size() == 0 ? 0.0 : flat.lpNorm<Eigen::Infinity>(); }
};

inline ConstMatrixMap output_matrix(const ParameterLayout& lay, const Weights& w) {
    if (lay.output_trainable)
        return ConstMatrixMap(w.flat.data() + lay.output_offset, lay.output_rows, lay.output_cols);
    return ConstMatrixMap(w.fixed_output.data(), lay.output_rows, lay.output_cols);
}

// Weight block k (filter tap) of layer l: out_channels x in_channels, row-major.
inline ConstMatrixMap layer_weight(const LayerShape& s, const double* flat, std::size_t k = 0) {
    return ConstMatrixMap(flat + s.weight_offset + k * s.out_channels * s.in_channels, s.out_channels, s.in_channels);
}

struct InitOptions {
    // Replaces the standard deviation of every trainable entry (0 gives the all-zero debug network).
    std::optional<double> std_override;
};

inline Weights init_weights(const NetworkSpec& spec, Seed seed, const InitOptions& opt = {}) {
    const ParameterLayout lay = make_layout(spec);
    Weights w;
    w.flat.resize(static_cast<Eigen::Index>(lay.total));
    for (std::size_t l = 0; l < lay.layers.size(); ++l) {
        const auto& s = lay.layers[l];
        const double sd = opt.std_override.value_or(s.init_std);
        CounterRng(seed, stream_id({stream_tag::weights, l + 1})).fill_normal({w.flat.data() + s.weight_offset, s.weight_count}, sd);
        if (s.bias_count > 0)
            CounterRng(seed, stream_id({stream_tag::bias, l + 1}))
                .fill_normal({w.flat.data() + s.bias_offset, s.bias_count}, opt.std_override.value_or(1.0));
    }
    if (lay.output_trainable) {
        const double sd = opt.std_override.value_or(lay.output_init_std);
        CounterRng(seed, stream_id({stream_tag::output})).fill_normal({w.flat.data() + lay.output_offset, lay.output_count()}, sd);
    } else {
        const CounterRng rng(seed, stream_id({stream_tag::signs}));
        const double mag = spec.param == Parameterization::ntk ? 1.0 : lay.output_fan_scale;
        w.fixed_output.resize(1, static_cast<Eigen::Index>(lay.output_cols));
        for (std::size_t i = 0; i < lay.output_cols; ++i) w.fixed_output(0, i) = rng.uniform(i) < 0.5 ? -mag : mag;
    }
    return w;
}

struct ForwardTrace {
    Batch input;             // input_dim x n
    std::vector<Batch> pre;  // preactivations per hidden layer
    std::vector<Batch> act;  // activations per hidden layer
    Batch raw;               // linear-head output, output_dim x n
    Batch output;            // output after the head

    std::size_t samples() const { return static_cast<std::size_t>(input.cols()); }
    const Batch& layer_input(std::size_t l) const { return l == 0 ? input : act[l - 1]; }
};

namespace detail {

// Conv tap k reads pixel q + offset(k); pixels shifted in from outside are zero.
inline long tap_offset(const LayerShape& s, std::size_t k) {
    return static_cast<long>(k) - static_cast<long>(s.filter - 1) / 2;
}

struct TapRange {
    Eigen::Index out_begin = 0, in_begin = 0, length = 0;
};

inline TapRange tap_range(const LayerShape& s, std::size_t k) {
    const long q = static_cast<long>(s.pixels);
    const long o = tap_offset(s, k);
    const long lo = std::max(0L, -o);
    const long hi = std::min(q, q - o);
    return {lo, lo + o, std::max(0L, hi - lo)};
}

inline Eigen::Map<const Matrix> sample_grid(const Batch& b, Eigen::Index col, std::size_t channels, std::size_t pixels) {
    return Eigen::Map<const Matrix>(b.col(col).data(), static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(pixels));
}

inline Eigen::Map<Matrix> sample_grid(Batch& b, Eigen::Index col, std::size_t channels, std::size_t pixels) {
    return Eigen::Map<Matrix>(b.col(col).data(), static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(pixels));
}

// z = map_scale * P(W, a): the layer's preactivation map without bias, bilinear in (W, a).
inline Batch layer_pre(const LayerShape& s, const double* flat, const Batch& a) {
    Batch z(static_cast<Eigen::Index>(s.out_dim), a.cols());
    if (!s.conv()) {
        z.noalias() = s.map_scale * (layer_weight(s, flat) * a);
        return z;
    }
    z.setZero();
    for (Eigen::Index n = 0; n < a.cols(); ++n) {
        auto in = sample_grid(a, n, s.in_channels, s.pixels);
        auto out = sample_grid(z, n, s.out_channels, s.pixels);
        for (std::size_t k = 0; k < s.filter; ++k) {
            const TapRange r = tap_range(s, k);
            if (r.length == 0) continue;
            out.middleCols(r.out_begin, r.length).noalias() +=
                s.map_scale * (layer_weight(s, flat, k) * in.middleCols(r.in_begin, r.length));
        }
    }
    return z;
}

// grad_W += map_scale * d<delta, P(W, a)>/dW, summed over samples.
inline void layer_param_adjoint(const LayerShape& s, const Batch& delta, const Batch& a, double* grad_flat) {
    if (!s.conv()) {
        MatrixMap g(grad_flat + s.weight_offset, s.out_channels, s.in_channels);
        g.noalias() += s.map_scale * (delta * a.transpose());
        return;
    }
    for (Eigen::Index n = 0; n < a.cols(); ++n) {
        auto in = sample_grid(a, n, s.in_channels, s.pixels);
        auto d = sample_grid(delta, n, s.out_channels, s.pixels);
        for (std::size_t k = 0; k < s.filter; ++k) {
            const TapRange r = tap_range(s, k);
            if (r.length == 0) continue;
            MatrixMap g(grad_flat + s.weight_offset + k * s.out_channels * s.in_channels, s.out_channels, s.in_channels);
            g.noalias() += s.map_scale * (d.middleCols(r.out_begin, r.length) * in.middleCols(r.in_begin, r.length).transpose());
        }
    }
}

// map_scale * d<delta, P(W, a)>/da.
inline Batch layer_input_adjoint(const LayerShape& s, const double* flat, const Batch& delta) {
    Batch g(static_cast<Eigen::Index>(s.in_dim), delta.cols());
    if (!s.conv()) {
        g.noalias() = s.map_scale * (layer_weight(s, flat).transpose() * delta);
        return g;
    }
    g.setZero();
    for (Eigen::Index n = 0; n < delta.cols(); ++n) {
        auto d = sample_grid(delta, n, s.out_channels, s.pixels);
        auto out = sample_grid(g, n, s.in_channels, s.pixels);
        for (std::size_t k = 0; k < s.filter; ++k) {
            const TapRange r = tap_range(s, k);
            if (r.length == 0) continue;
            out.middleCols(r.in_begin, r.length).noalias() +=
                s.map_scale * (layer_weight(s, flat, k).transpose() * d.middleCols(r.out_begin, r.length));
        }
    }
    return g;
}

inline void add_bias(const LayerShape& s, const double* flat, Batch& z) {
    if (s.bias_count == 0) return;
    z.colwise() += ConstVectorMap(flat + s.bias_offset, static_cast<Eigen::Index>(s.bias_count));
}

inline Batch act_value(const Activation& act, const Batch& z) {
    switch (act.kind) {
        case ActivationKind::relu: return z.cwiseMax(0.0);
        case ActivationKind::identity: return z;
        case ActivationKind::quadratic: return 0.5 * z.cwiseAbs2();
        case ActivationKind::tanh: return z.array().tanh().matrix();
        default: return z.unaryExpr([&](double v) { return act.value(v); });
    }
}

inline Batch act_d1(const Activation& act, const Batch& z) {
    switch (act.kind) {
        case ActivationKind::relu: return (z.array() > 0.0).cast<double>().matrix();
        case ActivationKind::identity: return Batch::Ones(z.rows(), z.cols());
        case ActivationKind::quadratic: return z;
        default: return z.unaryExpr([&](double v) { return act.d1(v); });
    }
}

// b .* sigma'(z) in one pass.
inline Batch times_act_d1(const Activation& act, const Batch& z, const Batch& b) {
    switch (act.kind) {
        case ActivationKind::relu: return (z.array() > 0.0).select(b, 0.0);
        case ActivationKind::identity: return b;
        case ActivationKind::quadratic: return b.cwiseProduct(z);
        default: return b.binaryExpr(z, [&](double v, double x) { return v * act.d1(x); });
    }
}

inline Batch softmax_columns(const Batch& f) {
    Batch p(f.rows(), f.cols());
    for (Eigen::Index n = 0; n < f.cols(); ++n) {
        const double mx = f.col(n).maxCoeff();
        p.col(n) = (f.col(n).array() - mx).exp().matrix();
        p.col(n) /= p.col(n).sum();
    }
    return p;
}

}  // namespace detail

inline Batch apply_head(const OutputHead& head, const Batch& raw) {
    switch (head.kind) {
        case OutputHead::Kind::linear: return raw;
        case OutputHead::Kind::activated: return raw.unaryExpr([&](double v) { return head.phi.value(v); });
        case OutputHead::Kind::softmax: return detail::softmax_columns(raw);
    }
    return raw;
}

inline ForwardTrace forward_batch(const NetworkSpec& spec, const Weights& w, const Batch& x) {
    const ParameterLayout lay = make_layout(spec);
    if (static_cast<std::size_t>(x.rows()) != spec.input_dim) throw DimensionError("forward: input length != input_dim");
    if (static_cast<std::size_t>(w.flat.size()) != lay.total) throw DimensionError("forward: weight count does not match spec");
    ForwardTrace t;
    t.input = x;
    const double* flat = w.flat.data();
    for (std::size_t l = 0; l < lay.layers.size(); ++l) {
        const auto& s = lay.layers[l];
        const Batch& a = t.layer_input(l);
        Batch z = detail::layer_pre(s, flat, a);
        detail::add_bias(s, flat, z);
        Batch out = detail::act_value(s.act, z);
        if (s.residual()) out += a;
        t.pre.push_back(std::move(z));
        t.act.push_back(std::move(out));
    }
    t.raw = lay.output_map_scale * (output_matrix(lay, w) * t.act.back());
    // Hidden layers are only scanned once the output shows a problem.
    if (!t.raw.allFinite()) {
        for (std::size_t l = 0; l < t.pre.size(); ++l)
            if (!t.pre[l].allFinite() || !t.act[l].allFinite()) throw NumericalError("non-finite activation", l + 1);
        throw NumericalError("non-finite output", lay.layers.size() + 1);
    }
    t.output = apply_head(spec.head, t.raw);
    return t;
}

inline ForwardTrace forward(const NetworkSpec& spec, const Weights& w, const Vector& x) {
    return forward_batch(spec, w, Batch(x));
}

}  // namespace tl
