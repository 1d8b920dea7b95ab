#pragma once

// Flat key = value experiment configs. Lists are comma separated, '#' starts a comment.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tl/network.hpp"

namespace tl {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = s.find(sep, start);
        out.emplace_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline double parse_real(std::string_view s, std::string_view key) {
    double v = 0.0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v))
        throw ConfigError(std::string(key) + ": '" + std::string(s) + "' is not a finite number");
    return v;
}

// Accepts 1000 and 1e3 alike.
inline std::size_t parse_count(std::string_view s, std::string_view key) {
    const double v = parse_real(s, key);
    if (v < 0.0 || v != std::floor(v) || v > 9.0e15) throw ConfigError(std::string(key) + ": '" + std::string(s) + "' is not a count");
    return static_cast<std::size_t>(v);
}

}  // namespace detail

class Config {
public:
    static Config parse(std::string_view text) {
        Config c;
        std::size_t line_no = 0;
        for (const auto& raw : detail::split(text, '\n')) {
            ++line_no;
            std::string_view line = raw;
            if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
            const std::string key(detail::trim(line.substr(0, eq)));
            if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
            if (c.values_.count(key)) throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
            c.values_[key] = std::string(detail::trim(line.substr(eq + 1)));
        }
        return c;
    }

    static Config load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot read config '" + path + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
    const std::map<std::string, std::string>& entries() const { return values_; }

    std::string str(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("missing key '" + key + "'");
        return it->second;
    }
    std::string str(const std::string& key, const std::string& fallback) const { return has(key) ? str(key) : fallback; }

    double real(const std::string& key, double fallback) const { return has(key) ? detail::parse_real(str(key), key) : fallback; }
    std::size_t count(const std::string& key, std::size_t fallback) const {
        return has(key) ? detail::parse_count(str(key), key) : fallback;
    }
    bool flag(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const std::string v = str(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError(key + ": '" + v + "' is not a boolean");
    }

    std::vector<std::string> strings(const std::string& key, const std::vector<std::string>& fallback) const {
        if (!has(key)) return fallback;
        auto items = detail::split(str(key), ',');
        for (const auto& s : items)
            if (s.empty()) throw ConfigError(key + ": empty list item");
        return items;
    }
    std::vector<std::size_t> counts(const std::string& key, const std::vector<std::size_t>& fallback) const {
        if (!has(key)) return fallback;
        std::vector<std::size_t> out;
        for (const auto& s : strings(key, {})) out.push_back(detail::parse_count(s, key));
        return out;
    }

    void require_known(const std::set<std::string>& known) const {
        for (const auto& [k, v] : values_)
            if (!known.count(k)) throw ConfigError("unknown key '" + k + "'");
    }

    std::string serialize() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

private:
    std::map<std::string, std::string> values_;
};

// Network specs in config form:
//   input_dim, output_dim, param (ntk | lecun), head (linear | softmax | <activation>), layers
// where layers is a list of
//   fc:<width>:<act>[:bias][:raw]   res:<width>:<act>   shallow:<width>:<act>
//   conv:<channels>:<pixels>:<filter>:<act>
// A width written as m or mb takes the value supplied by the caller (sweep width, bottleneck width).
struct WidthBinding {
    std::size_t m = 0;
    std::size_t mb = 0;
};

namespace detail {

inline std::size_t layer_width(const std::string& s, const WidthBinding& b) {
    if (s == "m" || s == "mb") {
        const std::size_t v = s == "m" ? b.m : b.mb;
        if (v == 0) throw ConfigError("layers: width '" + s + "' used but not bound");
        return v;
    }
    return parse_count(s, "layers");
}

inline Activation parse_activation(const std::string& s) {
    try {
        return Activation::parse(s);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

inline OutputHead parse_head(const std::string& s) {
    if (s == "linear") return OutputHead::linear();
    if (s == "softmax") return OutputHead::softmax();
    return OutputHead::activated(parse_activation(s));
}

inline LayerSpec parse_layer(const std::string& token, const WidthBinding& b) {
    const auto f = split(token, ':');
    const auto need = [&](std::size_t lo, std::size_t hi) {
        if (f.size() < lo || f.size() > hi) throw ConfigError("layers: malformed layer '" + token + "'");
    };
    if (f[0] == "fc") {
        need(3, 5);
        FullyConnected fc{layer_width(f[1], b), parse_activation(f[2])};
        for (std::size_t i = 3; i < f.size(); ++i) {
            if (f[i] == "bias") fc.bias = true;
            else if (f[i] == "raw") fc.normalized = false;
            else throw ConfigError("layers: unknown fc flag '" + f[i] + "'");
        }
        return fc;
    }
    if (f[0] == "res") {
        need(3, 3);
        return Residual{layer_width(f[1], b), parse_activation(f[2])};
    }
    if (f[0] == "shallow") {
        need(3, 3);
        return Shallow{layer_width(f[1], b), parse_activation(f[2])};
    }
    if (f[0] == "conv") {
        need(5, 5);
        return Conv1D{layer_width(f[1], b), parse_count(f[2], "layers"), parse_count(f[3], "layers"), parse_activation(f[4])};
    }
    throw ConfigError("layers: unknown layer kind '" + f[0] + "'");
}

inline std::string layer_token(const LayerSpec& l) {
    if (const auto* fc = std::get_if<FullyConnected>(&l)) {
        std::string s = "fc:" + std::to_string(fc->width) + ":" + std::string(fc->act.name());
        if (fc->bias) s += ":bias";
        if (!fc->normalized) s += ":raw";
        return s;
    }
    if (const auto* r = std::get_if<Residual>(&l)) return "res:" + std::to_string(r->width) + ":" + std::string(r->act.name());
    if (const auto* sh = std::get_if<Shallow>(&l)) return "shallow:" + std::to_string(sh->width) + ":" + std::string(sh->act.name());
    const auto& c = std::get<Conv1D>(l);
    return "conv:" + std::to_string(c.channels) + ":" + std::to_string(c.pixels) + ":" + std::to_string(c.filter) + ":" +
           std::string(c.act.name());
}

}  // namespace detail

inline const std::set<std::string>& spec_keys() {
    static const std::set<std::string> keys = {"input_dim", "output_dim", "param", "head", "layers"};
    return keys;
}

inline NetworkSpec spec_from_config(const Config& c, const WidthBinding& b = {}) {
    NetworkSpec s;
    s.input_dim = c.count("input_dim", 1);
    s.output_dim = c.count("output_dim", 1);
    const std::string param = c.str("param", "ntk");
    if (param == "ntk") s.param = Parameterization::ntk;
    else if (param == "lecun") s.param = Parameterization::lecun;
    else throw ConfigError("param: expected ntk or lecun, got '" + param + "'");
    s.head = detail::parse_head(c.str("head", "linear"));
    for (const auto& token : c.strings("layers", {})) s.layers.push_back(detail::parse_layer(token, b));
    try {
        s.validate();
    } catch (const SpecError& e) {
        throw ConfigError(std::string("network: ") + e.what());
    }
    return s;
}

inline Config spec_to_config(const NetworkSpec& s) {
    Config c;
    c.set("input_dim", std::to_string(s.input_dim));
    c.set("output_dim", std::to_string(s.output_dim));
    c.set("param", s.param == Parameterization::ntk ? "ntk" : "lecun");
    c.set("head", s.head.name());
    std::string layers;
    for (const auto& l : s.layers) layers += (layers.empty() ? "" : ", ") + detail::layer_token(l);
    c.set("layers", layers);
    return c;
}

}  // namespace tl
