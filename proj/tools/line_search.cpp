// One-time learning-rate search behind the sweep defaults. For each candidate rate on a doubling
// grid it runs a short probe and keeps the largest rate whose loss never increases.

#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tl/experiments.hpp"

namespace {

struct Probe {
    double lr = 0.0;
    bool monotone = false;
    bool diverged = false;
    double final_loss = 0.0;
};

Probe probe(const tl::NetworkSpec& spec, const tl::Dataset& data, tl::Loss loss, double lr, std::size_t epochs) {
    tl::GdConfig gd;
    gd.loss = loss;
    gd.lr = lr;
    gd.max_epochs = epochs;
    gd.tol = 0.0;
    gd.snapshot_every = epochs + 1;
    const tl::Trajectory tr = tl::gradient_descent(spec, tl::init_weights(spec, 0), data, gd);
    Probe p;
    p.lr = lr;
    p.diverged = tr.diverged;
    p.monotone = !tr.diverged;
    for (std::size_t i = 1; i < tr.loss.size(); ++i)
        if (tr.loss[i] > tr.loss[i - 1] * (1.0 + 1e-12)) p.monotone = false;
    p.final_loss = tr.loss.empty() ? 0.0 : tr.loss.back();
    return p;
}

}  // namespace

int main(int argc, char** argv) {
    tl::tune_allocator();
    CLI::App app{"Learning-rate line search"};
    std::string family = "width-ce";
    std::size_t width = 1000, mb = 10, epochs = 2000;
    double lo = 0.0125, hi = 8.0;
    app.add_option("family", family, "width-ce | width-square | width-linear | bottleneck")->required();
    app.add_option("--width", width);
    app.add_option("--mb", mb);
    app.add_option("--epochs", epochs);
    app.add_option("--lo", lo);
    app.add_option("--hi", hi);
    CLI11_PARSE(app, argc, argv);

    tl::NetworkSpec spec;
    tl::Loss loss = tl::Loss::cross_entropy;
    if (family == "width-ce") {
        spec = tl::preset_spec("experiment", width, "relu").with_head(tl::OutputHead::softmax());
    } else if (family == "width-square") {
        spec = tl::preset_spec("experiment", width, "relu").with_head(tl::OutputHead::activated(tl::Activation::parse("swish")));
        loss = tl::Loss::square;
    } else if (family == "width-linear") {
        spec = tl::preset_spec("experiment", width, "relu");
        loss = tl::Loss::square;
    } else if (family == "bottleneck") {
        spec = tl::preset_spec("narrow", width, "relu", mb).with_head(tl::OutputHead::softmax());
    } else {
        std::fprintf(stderr, "unknown family '%s'\n", family.c_str());
        return 1;
    }
    const tl::Dataset data = tl::make_synthetic_dataset(0);

    double best = 0.0;
    std::printf("lr,monotone,diverged,final_loss\n");
    for (double lr = lo; lr <= hi * (1.0 + 1e-12); lr *= 2.0) {
        const Probe p = probe(spec, data, loss, lr, epochs);
        std::printf("%s,%d,%d,%s\n", tl::fmt(p.lr).c_str(), p.monotone, p.diverged, tl::fmt(p.final_loss).c_str());
        std::fflush(stdout);
        if (p.monotone) best = lr;
    }
    std::printf("# largest monotone rate: %s\n", tl::fmt(best).c_str());
    return 0;
}
