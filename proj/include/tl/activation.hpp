#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>

namespace tl {

enum class ActivationKind { tanh, sigmoid, relu, quadratic, identity, swish, softmax };

class SmoothnessError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct Activation {
    ActivationKind kind = ActivationKind::tanh;

    constexpr Activation() = default;
    constexpr Activation(ActivationKind k) : kind(k) {}

    // Swish follows z * sigmoid(0.1 z).
    static constexpr double swish_beta = 0.1;

    double value(double z) const {
        switch (kind) {
            case ActivationKind::tanh: return std::tanh(z);
            case ActivationKind::sigmoid: return logistic(z);
            case ActivationKind::relu: return z > 0.0 ? z : 0.0;
            case ActivationKind::quadratic: return 0.5 * z * z;
            case ActivationKind::identity: return z;
            case ActivationKind::swish: return z * logistic(swish_beta * z);
            case ActivationKind::softmax: break;
        }
        throw std::logic_error("softmax is a vector head, not an elementwise activation");
    }

    double d1(double z) const {
        switch (kind) {
            case ActivationKind::tanh: {
                const double t = std::tanh(z);
                return 1.0 - t * t;
            }
            case ActivationKind::sigmoid: {
                const double s = logistic(z);
                return s * (1.0 - s);
            }
            case ActivationKind::relu: return z > 0.0 ? 1.0 : 0.0;
            case ActivationKind::quadratic: return z;
            case ActivationKind::identity: return 1.0;
            case ActivationKind::swish: {
                const double s = logistic(swish_beta * z);
                return s + swish_beta * z * s * (1.0 - s);
            }
            case ActivationKind::softmax: break;
        }
        throw std::logic_error("softmax is a vector head, not an elementwise activation");
    }

    double d2(double z) const {
        switch (kind) {
            case ActivationKind::tanh: {
                const double t = std::tanh(z);
                return -2.0 * t * (1.0 - t * t);
            }
            case ActivationKind::sigmoid: {
                const double s = logistic(z);
                return s * (1.0 - s) * (1.0 - 2.0 * s);
            }
            case ActivationKind::relu: return 0.0;
            case ActivationKind::quadratic: return 1.0;
            case ActivationKind::identity: return 0.0;
            case ActivationKind::swish: {
                const double s = logistic(swish_beta * z);
                const double ds = s * (1.0 - s);
                return swish_beta * ds * (2.0 + swish_beta * z * (1.0 - 2.0 * s));
            }
            case ActivationKind::softmax: break;
        }
        throw std::logic_error("softmax is a vector head, not an elementwise activation");
    }

    bool smooth() const { return kind != ActivationKind::relu; }
    bool elementwise() const { return kind != ActivationKind::softmax; }

    std::string_view name() const { return to_string(kind); }

    static constexpr std::string_view to_string(ActivationKind k) {
        switch (k) {
            case ActivationKind::tanh: return "tanh";
            case ActivationKind::sigmoid: return "sigmoid";
            case ActivationKind::relu: return "relu";
            case ActivationKind::quadratic: return "quadratic";
            case ActivationKind::identity: return "identity";
            case ActivationKind::swish: return "swish";
            case ActivationKind::softmax: return "softmax";
        }
        return "?";
    }

    static Activation parse(std::string_view s) {
        for (auto k : {ActivationKind::tanh, ActivationKind::sigmoid, ActivationKind::relu, ActivationKind::quadratic,
                       ActivationKind::identity, ActivationKind::swish, ActivationKind::softmax})
            if (to_string(k) == s) return Activation(k);
        throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
    }

    friend bool operator==(const Activation&, const Activation&) = default;

private:
    static double logistic(double z) {
        if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
        const double e = std::exp(z);
        return e / (1.0 + e);
    }
};

}  // namespace tl
