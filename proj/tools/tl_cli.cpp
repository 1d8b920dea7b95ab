// tl: experiment driver. See README.md for commands and config keys.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tl/experiments.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kVersion = "1.0.0";

enum Exit { ok = 0, usage = 1, config_error = 2, numerical = 3, io = 4 };

struct Options {
    std::string command;
    std::string config_path;
    std::string out_dir = ".";
    std::optional<std::size_t> seeds;
    std::size_t jobs = 1;
    bool full = false;
    std::optional<double> budget;
};

class CsvWriter {
public:
    CsvWriter(const fs::path& path, const std::string& header) : path_(path), out_(path) {
        if (!out_) throw tl::IoError("cannot write '" + path.string() + "'");
        out_ << header << '\n';
    }
    void row(const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) out_ << (i ? "," : "") << fields[i];
        out_ << '\n';
    }
    void close() {
        out_.close();
        if (!out_) throw tl::IoError("error writing '" + path_.string() + "'");
    }

private:
    fs::path path_;
    std::ofstream out_;
};

std::string csv_text(std::string s) {
    for (char& c : s)
        if (c == ',' || c == '\n') c = ';';
    return s;
}

std::string yes_no(bool b) { return b ? "true" : "false"; }

struct Context {
    Options opt;
    tl::Config cfg;
    std::vector<tl::Seed> seeds;
    fs::path out;
    std::vector<std::string> outputs;
    json summary = json::object();
};

const std::set<std::string> common_keys = {"arch", "act", "seed", "seeds", "input_dim", "output_dim", "param", "head", "layers"};

void require_keys(const tl::Config& cfg, std::set<std::string> extra) {
    extra.insert(common_keys.begin(), common_keys.end());
    cfg.require_known(extra);
}

// Seeds are base, base + 1, ... with base from TL_SEED, else the config's seed key, else 0.
std::vector<tl::Seed> resolve_seeds(const Options& opt, const tl::Config& cfg, std::size_t fallback) {
    tl::Seed base = cfg.count("seed", 0);
    if (const char* env = std::getenv("TL_SEED")) base = tl::detail::parse_count(env, "TL_SEED");
    const std::size_t n = opt.seeds.value_or(cfg.count("seeds", fallback));
    if (n == 0) throw tl::ConfigError("seeds must be >= 1");
    std::vector<tl::Seed> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(base + i);
    return out;
}

tl::PowerOptions power_options(const tl::Config& cfg) {
    tl::PowerOptions p;
    p.tol = cfg.real("power_tol", 1e-9);
    p.max_iter = cfg.count("power_max_iter", 1000);
    if (!(p.tol > 0.0)) throw tl::ConfigError("power_tol must be positive");
    return p;
}

tl::Tensor221Options tensor_options(const tl::Config& cfg) {
    tl::Tensor221Options t;
    t.restarts = cfg.count("restarts", 8);
    t.sweeps = cfg.count("sweeps", 100);
    if (t.restarts == 0) throw tl::ConfigError("restarts must be >= 1");
    return t;
}

void apply_training_keys(const tl::Config& cfg, const std::string& prefix, tl::GdConfig& gd) {
    gd.max_epochs = cfg.count("max_epochs", gd.max_epochs);
    gd.tol = cfg.real("tol", gd.tol);
    gd.snapshot_every = cfg.count("snapshot_every", gd.snapshot_every);
    if (!prefix.empty()) gd.lr = cfg.real("lr_" + prefix, gd.lr);
    if (!(gd.lr > 0.0)) throw tl::ConfigError("learning rate must be positive");
    if (gd.snapshot_every == 0) throw tl::ConfigError("snapshot_every must be >= 1");
}

tl::Deadline deadline(const Context& ctx) {
    const double secs = ctx.opt.budget.value_or(ctx.cfg.real("budget_seconds", 0.0));
    if (secs < 0.0) throw tl::ConfigError("budget must be >= 0");
    if (secs == 0.0) return std::nullopt;
    return tl::Clock::now() + std::chrono::duration_cast<tl::Clock::duration>(std::chrono::duration<double>(secs));
}

tl::Dataset probe_data(const tl::NetworkSpec& spec, const tl::Config& cfg) {
    const std::size_t n = cfg.count("samples", 60);
    if (n == 0) throw tl::ConfigError("samples must be >= 1");
    if (spec.input_dim == 1) return tl::make_synthetic_dataset(cfg.count("data_seed", 0), n);
    tl::Dataset d;
    d.inputs.resize(static_cast<Eigen::Index>(spec.input_dim), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i)
        d.inputs.col(static_cast<Eigen::Index>(i)) = tl::gaussian_vector(spec.input_dim, 1.0, cfg.count("data_seed", 0), i);
    return d;
}

void log_cell(const char* what, std::size_t width, tl::Seed seed, const std::vector<tl::StatusRow>& status) {
    std::fprintf(stderr, "[%s] width=%zu seed=%llu%s\n", what, width, static_cast<unsigned long long>(seed),
                 status.empty() ? "" : (" " + status.front().status).c_str());
}

void write_status(Context& ctx, const std::string& name, const std::vector<tl::StatusRow>& rows) {
    CsvWriter csv(ctx.out / name, "width,seed,what,status,detail");
    for (const auto& s : rows) csv.row({std::to_string(s.width), std::to_string(s.seed), s.what, s.status, csv_text(s.detail)});
    csv.close();
    ctx.outputs.push_back(name);
}

void write_runs(Context& ctx, const std::string& name, const std::vector<tl::RunRow>& runs) {
    CsvWriter csv(ctx.out / name,
                  "width,seed,model,lr,epochs,converged,final_loss,delta_k,body_delta_k,weight_change,weight_change_inf,"
                  "lower_bound,lower_bound_holds");
    for (const auto& r : runs)
        csv.row({std::to_string(r.width), std::to_string(r.seed), r.model, tl::fmt(r.lr), std::to_string(r.epochs),
                 yes_no(r.converged), tl::fmt(r.final_loss), tl::fmt(r.delta_k), tl::fmt(r.body_delta_k),
                 tl::fmt(r.weight_change), tl::fmt(r.weight_change_inf), tl::fmt(r.lower_bound), yes_no(r.lower_bound_holds)});
    csv.close();
    ctx.outputs.push_back(name);
}

int cmd_check_derivatives(Context& ctx) {
    require_keys(ctx.cfg, {"width", "dense_width", "max_coords"});
    const std::size_t m = ctx.cfg.count("width", 16);
    const std::size_t dense = ctx.cfg.count("dense_width", 6);
    if (m == 0 || m > 64) throw tl::ConfigError("width must be in 1..64");
    const auto rows = tl::check_derivatives(m, dense, ctx.seeds, ctx.cfg.count("max_coords", 256));
    CsvWriter csv(ctx.out / "check_derivatives.csv", "arch,check,seed,error,threshold,pass");
    std::size_t failed = 0;
    for (const auto& r : rows) {
        csv.row({r.arch, r.check, std::to_string(r.seed), tl::fmt(r.error), tl::fmt(r.threshold), yes_no(r.pass)});
        failed += r.pass ? 0 : 1;
    }
    csv.close();
    ctx.outputs.push_back("check_derivatives.csv");
    ctx.summary["checks"] = rows.size();
    ctx.summary["failed"] = failed;
    return failed ? numerical : ok;
}

int cmd_norms_report(Context& ctx) {
    require_keys(ctx.cfg, {"width", "bottleneck_width", "samples", "data_seed", "power_tol", "power_max_iter", "restarts", "sweeps"});
    const std::size_t m = ctx.cfg.count("width", 256);
    const tl::NetworkSpec spec = tl::spec_from_config(tl::network_config(ctx.cfg, "shallow"), {m, ctx.cfg.count("bottleneck_width", 0)});
    const tl::Dataset data = probe_data(spec, ctx.cfg);
    CsvWriter csv(ctx.out / "norms_report.csv",
                  "width,seed,head,hessian_norm,hessian_converged,kernel_trace,q_inf,q_l,q_221,lipschitz_phi,bound,kappa,block_stat");
    for (tl::Seed s : ctx.seeds) {
        const auto r = tl::norms_report(spec, m, s, data, power_options(ctx.cfg), tensor_options(ctx.cfg));
        csv.row({std::to_string(r.width), std::to_string(r.seed), r.head, tl::fmt(r.hessian_norm), yes_no(r.hessian_converged),
                 tl::fmt(r.kernel_trace), tl::fmt(r.q_inf), tl::fmt(r.q_l), tl::fmt(r.q_221), tl::fmt(r.lipschitz_phi),
                 tl::fmt(r.bound), tl::fmt(r.kappa), tl::fmt(r.block_stat)});
    }
    csv.close();
    ctx.outputs.push_back("norms_report.csv");
    return ok;
}

std::size_t hidden_layers(const tl::Config& net) { return net.strings("layers", {}).size(); }

int cmd_sweep_width(Context& ctx) {
    require_keys(ctx.cfg, {"widths", "heads", "data_seed", "samples", "lr_cross_entropy", "lr_square", "max_epochs", "tol",
                           "snapshot_every", "train", "quantities", "power_tol", "power_max_iter", "restarts", "sweeps",
                           "budget_seconds"});
    tl::WidthSweepConfig sc;
    sc.network = tl::network_config(ctx.cfg, "experiment", "relu");
    const std::vector<std::size_t> defaults = ctx.opt.full ? std::vector<std::size_t>{30, 100, 1000, 10000, 100000, 1000000}
                                                           : std::vector<std::size_t>{30, 100, 1000, 10000};
    sc.widths = ctx.cfg.counts("widths", defaults);
    for (auto m : sc.widths) {
        if (m == 0) throw tl::ConfigError("widths must be >= 1");
        if (m > 100000 && !ctx.opt.full) throw tl::ConfigError("widths above 1e5 need --full");
        if (m > 100000 && hidden_layers(sc.network) != 1) throw tl::ConfigError("widths above 1e5 are supported for one hidden layer only");
    }
    sc.seeds = ctx.seeds;
    sc.heads = ctx.cfg.strings("heads", sc.heads);
    sc.data_seed = ctx.cfg.count("data_seed", 0);
    sc.samples = ctx.cfg.count("samples", 60);
    apply_training_keys(ctx.cfg, "cross_entropy", sc.cross_entropy);
    apply_training_keys(ctx.cfg, "square", sc.square);
    sc.train = ctx.cfg.flag("train", true);
    sc.quantities = ctx.cfg.flag("quantities", true);
    sc.power = power_options(ctx.cfg);
    sc.tensor = tensor_options(ctx.cfg);
    sc.deadline = deadline(ctx);
    tl::spec_from_config(sc.network, {sc.widths.front(), 0});  // reject malformed networks before any work

    const auto cells = tl::width_sweep(sc, ctx.opt.jobs, [](std::size_t m, tl::Seed s, const auto& st) { log_cell("sweep-width", m, s, st); });
    CsvWriter csv(ctx.out / "sweep_width.csv", "width,seed,head,delta_k,hessian_norm_init,kernel_trace_init,q_inf,q_l,q_221,bound");
    std::vector<tl::RunRow> runs;
    std::vector<tl::StatusRow> status;
    bool failure = false;
    for (const auto& c : cells) {
        for (const auto& r : c.rows)
            csv.row({std::to_string(r.width), std::to_string(r.seed), r.head, tl::fmt(r.delta_k), tl::fmt(r.hessian_norm_init),
                     tl::fmt(r.kernel_trace_init), tl::fmt(r.q_inf), tl::fmt(r.q_l), tl::fmt(r.q_221), tl::fmt(r.bound)});
        runs.insert(runs.end(), c.runs.begin(), c.runs.end());
        status.insert(status.end(), c.status.begin(), c.status.end());
        failure = failure || c.numerical_failure;
    }
    csv.close();
    ctx.outputs.push_back("sweep_width.csv");
    write_runs(ctx, "sweep_width_runs.csv", runs);
    write_status(ctx, "sweep_width_status.csv", status);
    ctx.summary["status_rows"] = status.size();
    return failure ? numerical : ok;
}

int cmd_sweep_bottleneck(Context& ctx) {
    require_keys(ctx.cfg, {"width", "bottleneck_widths", "lr", "data_seed", "samples", "max_epochs", "tol", "snapshot_every",
                           "budget_seconds"});
    tl::BottleneckSweepConfig bc;
    bc.network = tl::network_config(ctx.cfg, "narrow", "relu");
    bc.width = ctx.cfg.count("width", bc.width);
    bc.bottleneck_widths = ctx.cfg.counts("bottleneck_widths", bc.bottleneck_widths);
    if (ctx.cfg.has("lr")) {
        bc.lrs.clear();
        for (const auto& s : ctx.cfg.strings("lr", {})) bc.lrs.push_back(tl::detail::parse_real(s, "lr"));
    }
    for (double lr : bc.lrs)
        if (!(lr > 0.0)) throw tl::ConfigError("lr must be positive");
    if (bc.lrs.size() > 1 && bc.lrs.size() != bc.bottleneck_widths.size()) throw tl::ConfigError("lr: give one value or one per bottleneck width");
    bc.seeds = ctx.seeds;
    bc.data_seed = ctx.cfg.count("data_seed", 0);
    bc.samples = ctx.cfg.count("samples", 60);
    apply_training_keys(ctx.cfg, "", bc.gd);
    bc.deadline = deadline(ctx);
    for (auto mb : bc.bottleneck_widths) tl::spec_from_config(bc.network, {bc.width, mb});

    const auto cells = tl::bottleneck_sweep(bc, ctx.opt.jobs, [](std::size_t mb, tl::Seed s, const auto& st) { log_cell("sweep-bottleneck", mb, s, st); });
    CsvWriter csv(ctx.out / "sweep_bottleneck.csv", "bottleneck_width,seed,width,delta_k,softmax_delta_k,epochs,converged,final_loss");
    std::vector<tl::RunRow> runs;
    std::vector<tl::StatusRow> status;
    bool failure = false;
    for (const auto& c : cells) {
        if (c.row)
            csv.row({std::to_string(c.row->bottleneck_width), std::to_string(c.row->seed), std::to_string(c.row->width),
                     tl::fmt(c.row->delta_k), tl::fmt(c.row->softmax_delta_k), std::to_string(c.row->epochs), yes_no(c.row->converged),
                     tl::fmt(c.row->final_loss)});
        if (c.run) runs.push_back(*c.run);
        status.insert(status.end(), c.status.begin(), c.status.end());
        failure = failure || c.numerical_failure;
    }
    csv.close();
    ctx.outputs.push_back("sweep_bottleneck.csv");
    write_runs(ctx, "sweep_bottleneck_runs.csv", runs);
    write_status(ctx, "sweep_bottleneck_status.csv", status);
    ctx.summary["status_rows"] = status.size();
    return failure ? numerical : ok;
}

int cmd_train(Context& ctx) {
    require_keys(ctx.cfg, {"width", "bottleneck_width", "loss", "lr", "max_epochs", "tol", "snapshot_every", "data_seed", "samples",
                           "body_kernel", "budget_seconds"});
    const std::size_t m = ctx.cfg.count("width", 10000);
    tl::Config net = tl::network_config(ctx.cfg, "experiment", "relu");
    if (!ctx.cfg.has("head")) net.set("head", "linear");
    const tl::NetworkSpec spec = tl::spec_from_config(net, {m, ctx.cfg.count("bottleneck_width", 0)});
    tl::GdConfig gd;
    const std::string loss = ctx.cfg.str("loss", spec.head.kind == tl::OutputHead::Kind::softmax ? "cross_entropy" : "square");
    if (loss == "square") gd.loss = tl::Loss::square;
    else if (loss == "cross_entropy") gd.loss = tl::Loss::cross_entropy;
    else throw tl::ConfigError("loss: expected square or cross_entropy");
    const double default_lr = gd.loss == tl::Loss::cross_entropy ? 1.6 : spec.head.kind == tl::OutputHead::Kind::linear ? 0.02 : 0.05;
    gd.lr = ctx.cfg.real("lr", default_lr);
    gd.max_epochs = 1000000;
    gd.snapshot_every = 100;
    apply_training_keys(ctx.cfg, "", gd);
    gd.body_kernel = ctx.cfg.flag("body_kernel", false);
    gd.deadline = deadline(ctx);
    try {
        tl::check_loss_head(spec, gd.loss);
    } catch (const tl::SpecError& e) {
        throw tl::ConfigError(e.what());
    }
    if (ctx.seeds.size() != 1) throw tl::ConfigError("train runs a single seed");
    const tl::Dataset data = tl::make_synthetic_dataset(ctx.cfg.count("data_seed", 0), ctx.cfg.count("samples", 60));
    const tl::Trajectory tr = tl::gradient_descent(spec, tl::init_weights(spec, ctx.seeds.front()), data, gd);

    CsvWriter csv(ctx.out / "train.csv", gd.body_kernel ? "epoch,loss,delta_k_t,body_delta_k_t" : "epoch,loss,delta_k_t");
    for (std::size_t i = 0; i < tr.snapshot_epochs.size(); ++i) {
        const std::size_t e = tr.snapshot_epochs[i];
        if (e >= tr.loss.size() || !std::isfinite(tr.loss[e])) continue;
        std::vector<std::string> f = {std::to_string(e), tl::fmt(tr.loss[e]), tl::fmt(tr.delta_k_t[i])};
        if (gd.body_kernel) f.push_back(tl::fmt(tr.body_delta_k_t[i]));
        csv.row(f);
    }
    csv.close();
    ctx.outputs.push_back("train.csv");
    const auto wc = tl::weight_change_report(tr, spec, data);
    ctx.summary = {{"epochs", tr.epochs},
                   {"converged", tr.converged},
                   {"diverged", tr.diverged},
                   {"final_loss", tr.final_loss()},
                   {"delta_k", tr.delta_k()},
                   {"weight_change", wc.change},
                   {"weight_change_inf", wc.change_inf},
                   {"lower_bound", wc.lower_bound},
                   {"diagnostic", tr.diagnostic}};
    if (tr.diverged) {
        std::fprintf(stderr, "train: %s\n", tr.diagnostic.c_str());
        return numerical;
    }
    return ok;
}

void write_manifest(const Context& ctx, int status) {
    json cfg = json::object();
    for (const auto& [k, v] : ctx.cfg.entries()) cfg[k] = v;
    json seeds = json::array();
    for (auto s : ctx.seeds) seeds.push_back(s);
    const json manifest = {{"command", ctx.opt.command},
                           {"config", cfg},
                           {"seeds", seeds},
                           {"full", ctx.opt.full},
                           {"outputs", ctx.outputs},
                           {"exit_status", status},
                           {"summary", ctx.summary},
                           {"versions",
                            {{"tl", kVersion},
                             {"compiler", __VERSION__},
                             {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                           std::to_string(EIGEN_MINOR_VERSION)}}}};
    const fs::path path = ctx.out / (ctx.opt.command + ".manifest.json");
    std::ofstream out(path);
    out << manifest.dump(2) << '\n';
    if (!out) throw tl::IoError("cannot write '" + path.string() + "'");
}

int run(const Options& opt) {
    Context ctx;
    ctx.opt = opt;
    ctx.cfg = opt.config_path.empty() ? tl::Config() : tl::Config::load(opt.config_path);
    ctx.seeds = resolve_seeds(opt, ctx.cfg, opt.command == "check-derivatives" ? 3 : opt.command == "train" || opt.command == "norms-report" ? 1 : 10);
    if (opt.jobs == 0) throw tl::ConfigError("jobs must be >= 1");
    ctx.out = opt.out_dir;
    std::error_code ec;
    fs::create_directories(ctx.out, ec);
    if (ec || !fs::is_directory(ctx.out)) throw tl::IoError("cannot create output directory '" + opt.out_dir + "'");

    int status = ok;
    if (opt.command == "check-derivatives") status = cmd_check_derivatives(ctx);
    else if (opt.command == "norms-report") status = cmd_norms_report(ctx);
    else if (opt.command == "sweep-width") status = cmd_sweep_width(ctx);
    else if (opt.command == "sweep-bottleneck") status = cmd_sweep_bottleneck(ctx);
    else status = cmd_train(ctx);
    write_manifest(ctx, status);
    return status;
}

}  // namespace

int main(int argc, char** argv) {
    tl::tune_allocator();
    CLI::App app{"Tangent kernel and Hessian experiments"};
    app.require_subcommand(1);
    Options opt;
    for (const char* name : {"check-derivatives", "norms-report", "sweep-width", "sweep-bottleneck", "train"}) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", opt.config_path, "key = value config file");
        sub->add_option("--out", opt.out_dir, "output directory");
        sub->add_option("--seeds", opt.seeds, "number of seeds");
        sub->add_option("--jobs", opt.jobs, "worker threads");
        sub->add_flag("--full", opt.full, "allow the largest widths");
        sub->add_option("--budget", opt.budget, "wall-clock budget in seconds (0: none)");
        sub->callback([&opt, name] { opt.command = name; });
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return usage;
    }
    try {
        return run(opt);
    } catch (const tl::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return config_error;
    } catch (const tl::SpecError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return config_error;
    } catch (const tl::IoError& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return io;
    } catch (const tl::NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return numerical;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return numerical;
    }
}
