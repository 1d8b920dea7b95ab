#pragma once

// Experiment drivers shared by the command line tool and the acceptance runner.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "tl/analysis.hpp"
#include "tl/config.hpp"
#include "tl/quantities.hpp"
#include "tl/training.hpp"

namespace tl {

using Clock = std::chrono::steady_clock;
using Deadline = std::optional<Clock::time_point>;

inline bool past(const Deadline& d) { return d && Clock::now() > *d; }

// Training reallocates width x samples buffers every epoch. Keeping them on the heap instead of
// fresh mmap pages avoids a page-fault and zero-fill pass per buffer.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}
inline std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

// Runs fn(0 .. n-1) on up to `jobs` threads. fn must not throw.
template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) fn(i);
        });
    for (auto& t : pool) t.join();
}

// Named architectures in config form; m and mb stay symbolic until a width is bound.
inline Config preset(const std::string& name, const std::string& act = "tanh") {
    Config c;
    auto set = [&](std::size_t d, std::size_t out, const std::string& layers) {
        c.set("input_dim", std::to_string(d));
        c.set("output_dim", std::to_string(out));
        c.set("layers", layers);
    };
    if (name == "shallow") set(1, 1, "shallow:m:" + act);
    else if (name == "fc3") set(3, 1, "fc:m:" + act + ", fc:m:" + act + ", fc:m:" + act);
    else if (name == "conv1d") set(8, 1, "conv:m:4:3:" + act + ", conv:m:4:3:" + act);
    else if (name == "residual") set(3, 1, "fc:m:" + act + ", res:m:" + act + ", res:m:" + act);
    else if (name == "bottleneck") set(1, 1, "fc:m:quadratic, fc:1:identity, fc:m:quadratic");
    else if (name == "experiment") set(1, 3, "fc:m:relu:bias");
    else if (name == "narrow") set(1, 3, "fc:m:relu, fc:mb:identity, fc:m:relu:raw");
    else throw ConfigError("unknown arch '" + name + "'");
    return c;
}

// Expands `arch` (and `act`) into spec keys; explicit spec keys override the preset.
inline Config network_config(const Config& user, const std::string& default_arch, const std::string& default_act = "tanh") {
    Config c = preset(user.str("arch", default_arch), user.str("act", default_act));
    for (const auto& k : spec_keys())
        if (user.has(k)) c.set(k, user.str(k));
    return c;
}

inline NetworkSpec preset_spec(const std::string& name, std::size_t m, const std::string& act = "tanh", std::size_t mb = 0) {
    return spec_from_config(preset(name, act), {m, mb});
}

inline double relative_error(const Vector& a, const Vector& b) {
    const double s = std::max(a.norm(), b.norm());
    return s == 0.0 ? 0.0 : (a - b).norm() / s;
}

// ---------------------------------------------------------------------------------------------
// Derivative checks

struct DerivativeCheck {
    std::string arch;
    std::string check;  // gradient | hvp | hessian_norm
    Seed seed = 0;
    double error = 0.0;
    double threshold = 0.0;
    bool pass = false;
};

inline const std::vector<std::string>& derivative_archs() {
    static const std::vector<std::string> names = {"shallow", "fc3", "conv1d", "residual", "bottleneck"};
    return names;
}

// Gradient against central differences on up to max_coords evenly strided coordinates
// (step 1e-5 max(1, |w_i|)), hvp against the central difference of gradients along a random
// unit direction (step 1e-4), and for nets with at most 200 parameters the estimated |H|
// against the dense Hessian's largest |eigenvalue|.
inline std::vector<DerivativeCheck> check_derivatives(std::size_t m, std::size_t dense_m, const std::vector<Seed>& seeds,
                                                      std::size_t max_coords = 256) {
    std::vector<DerivativeCheck> out;
    for (const auto& name : derivative_archs()) {
        for (Seed seed : seeds) {
            const NetworkSpec spec = preset_spec(name, m);
            const Weights w = init_weights(spec, seed);
            const Vector x = gaussian_vector(spec.input_dim, 1.0, seed, stream_id({stream_tag::probe, 1}));
            const Vector g = gradient(spec, w, forward(spec, w, x), 0).flat;
            const auto p = static_cast<std::size_t>(g.size());
            const std::size_t stride = std::max<std::size_t>(1, (p + max_coords - 1) / max_coords);
            std::vector<double> an, fd;
            for (std::size_t i = 0; i < p; i += stride) {
                const double h = 1e-5 * std::max(1.0, std::abs(w.flat[static_cast<Eigen::Index>(i)]));
                Weights a = w, b = w;
                a.flat[static_cast<Eigen::Index>(i)] += h;
                b.flat[static_cast<Eigen::Index>(i)] -= h;
                fd.push_back((forward(spec, a, x).output(0, 0) - forward(spec, b, x).output(0, 0)) / (2 * h));
                an.push_back(g[static_cast<Eigen::Index>(i)]);
            }
            const double ge = relative_error(Eigen::Map<Vector>(an.data(), static_cast<Eigen::Index>(an.size())),
                                             Eigen::Map<Vector>(fd.data(), static_cast<Eigen::Index>(fd.size())));
            out.push_back({name, "gradient", seed, ge, 1e-6, ge < 1e-6});

            const Vector u = random_unit_vector(p, seed, stream_id({stream_tag::probe, 2}));
            const double h = 1e-4;
            Weights a = w, b = w;
            a.flat += h * u;
            b.flat -= h * u;
            const Vector fdh = (gradient(spec, a, forward(spec, a, x), 0).flat - gradient(spec, b, forward(spec, b, x), 0).flat) / (2 * h);
            const double he = relative_error(hvp(spec, w, x, 0, u), fdh);
            out.push_back({name, "hvp", seed, he, 1e-5, he < 1e-5});

            const NetworkSpec small = preset_spec(name, dense_m);
            if (make_layout(small).total > 200) continue;
            const Weights ws = init_weights(small, seed);
            const Vector xs = gaussian_vector(small.input_dim, 1.0, seed, stream_id({stream_tag::probe, 3}));
            const HessianOperator op(small, ws, xs, 0);
            const auto n = static_cast<Eigen::Index>(op.dim());
            Eigen::MatrixXd dense(n, n);
            Vector e = Vector::Zero(n);
            for (Eigen::Index i = 0; i < n; ++i) {
                e[i] = 1.0;
                dense.col(i) = op.apply(e);
                e[i] = 0.0;
            }
            const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (dense + dense.transpose()));
            const double exact = es.eigenvalues().cwiseAbs().maxCoeff();
            const double est = hessian_spectral_norm(small, ws, xs, 0).value;
            const double ne = exact == 0.0 ? std::abs(est) : std::abs(est - exact) / exact;
            out.push_back({name, "hessian_norm", seed, ne, 1e-6, ne < 1e-6});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Quantities at initialization

struct InitMeasurement {
    std::optional<double> hessian;  // max over outputs of |H| at the probe input
    bool hessian_converged = true;
    std::optional<double> q_inf, q_l, q_221, lipschitz_phi, bound;  // linear head only; at the output maximizing the bound
};

inline InitMeasurement measure_init(const NetworkSpec& spec, const Weights& w, const Vector& x, bool quantities,
                                    const PowerOptions& power, const Tensor221Options& tensor) {
    InitMeasurement r;
    if (!spec.smooth()) return r;
    const auto h = hessian_spectral_norm_all(spec, w, x, power);
    r.hessian = h.value;
    r.hessian_converged = h.converged;
    if (!quantities || spec.head.kind != OutputHead::Kind::linear) return r;
    QuantityOptions qo;
    qo.tol = power.tol;
    qo.max_iter = power.max_iter;
    qo.seed = power.seed;
    qo.tensor = tensor;
    const double m = bound_width(spec);
    for (std::size_t c = 0; c < spec.output_dim; ++c) {
        const QQuantities q = layer_quantities(spec, w, x, c, qo);
        const double b = hessian_bound(q, spec.depth(), q.lipschitz_phi, m);
        if (!r.bound || b > *r.bound) {
            r.bound = b;
            r.q_inf = q.q_inf;
            r.q_l = q.q_l;
            r.q_221 = q.q_221;
            r.lipschitz_phi = q.lipschitz_phi;
        }
    }
    return r;
}

// ---------------------------------------------------------------------------------------------
// Width sweep: the linear, softmax and swish output models of one body

struct WidthSweepConfig {
    Config network = preset("experiment");
    std::vector<std::size_t> widths = {30, 100, 1000, 10000};
    std::vector<Seed> seeds;
    std::vector<std::string> heads = {"linear", "softmax", "swish"};
    Seed data_seed = 0;
    std::size_t samples = 60;
    GdConfig cross_entropy, square;  // the softmax run also yields the linear model's kernel
    bool train = true;
    bool quantities = true;
    PowerOptions power;
    Tensor221Options tensor;
    Deadline deadline;

    WidthSweepConfig() {
        cross_entropy.loss = Loss::cross_entropy;
        cross_entropy.lr = 1.6;
        cross_entropy.max_epochs = 200000;
        cross_entropy.snapshot_every = 100;
        cross_entropy.body_kernel = true;
        square.lr = 0.05;
        square.max_epochs = 1000000;
        square.snapshot_every = 100;
    }
};

struct WidthRow {
    std::size_t width = 0;
    Seed seed = 0;
    std::string head;
    std::optional<double> delta_k, hessian_norm_init, kernel_trace_init, q_inf, q_l, q_221, bound;
};

struct RunRow {
    std::size_t width = 0;  // hidden width (the bottleneck sweep stores m_b here)
    Seed seed = 0;
    std::string model;      // cross_entropy | swish
    double lr = 0.0;
    std::size_t epochs = 0;
    bool converged = false, diverged = false, timed_out = false;
    double final_loss = 0.0;
    double delta_k = 0.0, body_delta_k = 0.0;
    double weight_change = 0.0, weight_change_inf = 0.0, lower_bound = 0.0;
    bool lower_bound_holds = true;
    double seconds = 0.0;
    std::string diagnostic;
};

struct StatusRow {
    std::size_t width = 0;
    Seed seed = 0;
    std::string what;
    std::string status;  // diverged | not_converged | deadline | skipped | error
    std::string detail;
};

struct CellResult {
    std::vector<WidthRow> rows;
    std::vector<RunRow> runs;
    std::vector<StatusRow> status;
    bool numerical_failure = false;
};

inline RunRow run_summary(const Trajectory& tr, const NetworkSpec& spec, const Dataset& data, std::size_t width, Seed seed,
                          const std::string& model, double lr, double seconds) {
    RunRow r;
    r.width = width;
    r.seed = seed;
    r.model = model;
    r.lr = lr;
    r.epochs = tr.epochs;
    r.converged = tr.converged;
    r.diverged = tr.diverged;
    r.timed_out = tr.timed_out;
    r.final_loss = tr.final_loss();
    r.delta_k = tr.delta_k();
    r.body_delta_k = tr.body_delta_k();
    r.seconds = seconds;
    r.diagnostic = tr.diagnostic;
    if (!tr.diverged) {
        const auto wc = weight_change_report(tr, spec, data);
        r.weight_change = wc.change;
        r.weight_change_inf = wc.change_inf;
        r.lower_bound = wc.lower_bound;
        r.lower_bound_holds = wc.holds;
    }
    return r;
}

inline std::string run_status(const RunRow& r) {
    if (r.diverged) return "diverged";
    if (r.timed_out) return "deadline";
    return r.converged ? "ok" : "not_converged";
}

inline CellResult width_cell(const WidthSweepConfig& cfg, std::size_t width, Seed seed) {
    CellResult cell;
    const auto wants = [&](const std::string& h) { return std::find(cfg.heads.begin(), cfg.heads.end(), h) != cfg.heads.end(); };
    try {
        const NetworkSpec body = spec_from_config(cfg.network, {width, 0}).with_head(OutputHead::linear());
        const NetworkSpec soft = body.with_head(OutputHead::softmax());
        const NetworkSpec swish = body.with_head(OutputHead::activated(ActivationKind::swish));
        const Weights w0 = init_weights(body, seed);
        const Dataset data = make_synthetic_dataset(cfg.data_seed, cfg.samples);
        const Vector probe = data.inputs.col(0);

        std::optional<RunRow> ce, sq;
        auto train = [&](const NetworkSpec& spec, GdConfig gd, const std::string& model) {
            gd.deadline = cfg.deadline;
            const auto t0 = Clock::now();
            const Trajectory tr = gradient_descent(spec, w0, data, gd);
            const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
            RunRow r = run_summary(tr, spec, data, width, seed, model, gd.lr, secs);
            const std::string st = run_status(r);
            if (st != "ok") cell.status.push_back({width, seed, model, st, tr.diagnostic});
            if (r.diverged) cell.numerical_failure = true;
            cell.runs.push_back(r);
            return r;
        };
        if (cfg.train && (wants("linear") || wants("softmax"))) ce = train(soft, cfg.cross_entropy, "cross_entropy");
        if (cfg.train && wants("swish")) sq = train(swish, cfg.square, "swish");

        for (const auto& head : cfg.heads) {
            const NetworkSpec& spec = head == "linear" ? body : head == "softmax" ? soft : swish;
            if (head != "linear" && head != "softmax" && head != "swish") throw ConfigError("heads: unknown head '" + head + "'");
            WidthRow row;
            row.width = width;
            row.seed = seed;
            row.head = head;
            const std::optional<RunRow>& run = head == "swish" ? sq : ce;
            if (run && run->converged) row.delta_k = head == "linear" ? run->body_delta_k : run->delta_k;
            row.kernel_trace_init = tangent_kernel(spec, w0, data.inputs).trace();
            const InitMeasurement im = measure_init(spec, w0, probe, cfg.quantities, cfg.power, cfg.tensor);
            row.hessian_norm_init = im.hessian;
            row.q_inf = im.q_inf;
            row.q_l = im.q_l;
            row.q_221 = im.q_221;
            row.bound = im.bound;
            if (!im.hessian_converged) cell.status.push_back({width, seed, head, "not_converged", "hessian power iteration"});
            cell.rows.push_back(row);
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const NumericalError& e) {
        cell.numerical_failure = true;
        cell.status.push_back({width, seed, "cell", "error", e.what()});
    } catch (const std::exception& e) {
        cell.status.push_back({width, seed, "cell", "error", e.what()});
    }
    return cell;
}

// Cells in (width, seed) order; cells not started before the deadline become skipped status rows.
using Progress = std::function<void(std::size_t width, Seed seed, const std::vector<StatusRow>& status)>;

inline std::vector<CellResult> width_sweep(const WidthSweepConfig& cfg, std::size_t jobs, const Progress& progress = {}) {
    std::mutex log;
    std::vector<std::pair<std::size_t, Seed>> cells;
    for (auto m : cfg.widths)
        for (auto s : cfg.seeds) cells.emplace_back(m, s);
    std::vector<CellResult> out(cells.size());
    parallel_for(cells.size(), jobs, [&](std::size_t i) {
        const auto [m, s] = cells[i];
        if (past(cfg.deadline)) {
            out[i].status.push_back({m, s, "cell", "skipped", "deadline reached before start"});
            return;
        }
        out[i] = width_cell(cfg, m, s);
        if (progress) {
            const std::lock_guard<std::mutex> lock(log);
            progress(m, s, out[i].status);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------------------------
// Bottleneck sweep: narrow middle layer of width m_b inside width-m layers, softmax head trained
// with cross-entropy; delta_k is the kernel of the linear-output network under the softmax.

// Largest rate with monotone loss over a 500-epoch probe (tl_line_search bottleneck, m = 1000).
// The unnormalized third layer makes the kernel grow with m_b, so the rate shrinks with it.
// Untabulated widths take the rate of the next larger tabulated width.
inline double searched_bottleneck_lr(std::size_t mb) {
    static const std::vector<std::pair<std::size_t, double>> table = {
        {3, 0.1024}, {5, 0.1024}, {10, 0.0512}, {50, 0.0128}, {100, 0.0032}, {500, 0.0016}, {1000, 0.0008}};
    for (const auto& [w, lr] : table)
        if (mb <= w) return lr;
    return 0.0008 * 1000.0 / static_cast<double>(mb);
}

struct BottleneckSweepConfig {
    Config network = preset("narrow");
    std::size_t width = 10000;
    std::vector<std::size_t> bottleneck_widths = {3, 5, 10, 50, 100, 500, 1000};
    std::vector<double> lrs;  // one per bottleneck width, a single shared value, or empty for searched_bottleneck_lr
    std::vector<Seed> seeds;
    Seed data_seed = 0;
    std::size_t samples = 60;
    GdConfig gd;
    Deadline deadline;

    BottleneckSweepConfig() {
        gd.loss = Loss::cross_entropy;
        gd.max_epochs = 200000;
        gd.snapshot_every = 100;
        gd.body_kernel = true;
    }

    double lr_for(std::size_t index) const {
        if (lrs.empty()) return searched_bottleneck_lr(bottleneck_widths.at(index));
        if (lrs.size() == 1) return lrs.front();
        if (index >= lrs.size()) throw ConfigError("lr: need one value per bottleneck width");
        return lrs[index];
    }
};

struct BottleneckRow {
    std::size_t bottleneck_width = 0;
    Seed seed = 0;
    std::size_t width = 0;
    std::optional<double> delta_k, softmax_delta_k;
    std::size_t epochs = 0;
    bool converged = false;
    double final_loss = 0.0;
};

struct BottleneckCell {
    std::optional<BottleneckRow> row;
    std::optional<RunRow> run;
    std::vector<StatusRow> status;
    bool numerical_failure = false;
};

inline BottleneckCell bottleneck_cell(const BottleneckSweepConfig& cfg, std::size_t index, Seed seed) {
    BottleneckCell cell;
    const std::size_t mb = cfg.bottleneck_widths[index];
    try {
        const NetworkSpec spec = spec_from_config(cfg.network, {cfg.width, mb}).with_head(OutputHead::softmax());
        const Weights w0 = init_weights(spec, seed);
        const Dataset data = make_synthetic_dataset(cfg.data_seed, cfg.samples);
        GdConfig gd = cfg.gd;
        gd.lr = cfg.lr_for(index);
        gd.deadline = cfg.deadline;
        const auto t0 = Clock::now();
        const Trajectory tr = gradient_descent(spec, w0, data, gd);
        const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        RunRow r = run_summary(tr, spec, data, mb, seed, "cross_entropy", gd.lr, secs);
        const std::string st = run_status(r);
        if (st != "ok") cell.status.push_back({mb, seed, "cross_entropy", st, tr.diagnostic});
        cell.numerical_failure = r.diverged;
        BottleneckRow row;
        row.bottleneck_width = mb;
        row.seed = seed;
        row.width = cfg.width;
        row.epochs = tr.epochs;
        row.converged = tr.converged;
        row.final_loss = tr.final_loss();
        if (tr.converged) {
            row.delta_k = tr.body_delta_k();
            row.softmax_delta_k = tr.delta_k();
        }
        if (!tr.diverged) cell.row = row;
        cell.run = r;
    } catch (const ConfigError&) {
        throw;
    } catch (const NumericalError& e) {
        cell.numerical_failure = true;
        cell.status.push_back({mb, seed, "cell", "error", e.what()});
    } catch (const std::exception& e) {
        cell.status.push_back({mb, seed, "cell", "error", e.what()});
    }
    return cell;
}

inline std::vector<BottleneckCell> bottleneck_sweep(const BottleneckSweepConfig& cfg, std::size_t jobs,
                                                    const Progress& progress = {}) {
    std::mutex log;
    std::vector<std::pair<std::size_t, Seed>> cells;
    for (std::size_t i = 0; i < cfg.bottleneck_widths.size(); ++i)
        for (auto s : cfg.seeds) cells.emplace_back(i, s);
    std::vector<BottleneckCell> out(cells.size());
    parallel_for(cells.size(), jobs, [&](std::size_t i) {
        const auto [idx, s] = cells[i];
        if (past(cfg.deadline)) {
            out[i].status.push_back({cfg.bottleneck_widths[idx], s, "cell", "skipped", "deadline reached before start"});
            return;
        }
        out[i] = bottleneck_cell(cfg, idx, s);
        if (progress) {
            const std::lock_guard<std::mutex> lock(log);
            progress(cfg.bottleneck_widths[idx], s, out[i].status);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------------------------
// Norms report for one network at initialization

struct NormsReport {
    std::size_t width = 0;
    Seed seed = 0;
    std::string head;
    double hessian_norm = 0.0;
    bool hessian_converged = true;
    double kernel_trace = 0.0;
    std::optional<double> q_inf, q_l, q_221, lipschitz_phi, bound, kappa, block_stat;
};

inline NormsReport norms_report(const NetworkSpec& spec, std::size_t width, Seed seed, const Dataset& data,
                                const PowerOptions& power, const Tensor221Options& tensor) {
    require_smooth(spec, "norms-report");
    const Weights w = init_weights(spec, seed);
    NormsReport r;
    r.width = width;
    r.seed = seed;
    r.head = spec.head.name();
    const Vector probe = data.inputs.col(0);
    const InitMeasurement im = measure_init(spec, w, probe, true, power, tensor);
    r.hessian_norm = im.hessian.value_or(0.0);
    r.hessian_converged = im.hessian_converged;
    r.q_inf = im.q_inf;
    r.q_l = im.q_l;
    r.q_221 = im.q_221;
    r.lipschitz_phi = im.lipschitz_phi;
    r.bound = im.bound;
    r.kernel_trace = tangent_kernel(spec, w, data.inputs).trace();
    if (static_cast<std::size_t>(data.targets.rows()) == spec.output_dim) {
        KappaOptions ko;
        ko.power = power;
        r.kappa = kappa(spec, w, data, ko).kappa;
    }
    if (is_bottleneck_network(spec)) r.block_stat = bottleneck_block_stat(spec, w, probe[0]);
    return r;
}

}  // namespace tl
