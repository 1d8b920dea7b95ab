#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "tl/random.hpp"
#include "tl/tensor.hpp"

namespace tl {

struct Dataset {
    Batch inputs;             // input_dim x n
    Batch targets;            // C x n, one-hot
    std::vector<int> labels;

    std::size_t size() const { return static_cast<std::size_t>(inputs.cols()); }
    std::size_t classes() const { return static_cast<std::size_t>(targets.rows()); }
};

// Scalar inputs, labels uniform over {0, 1, 2}, x | y ~ N(mean[y], 1) with means (0, 10, -10).
inline Dataset make_synthetic_dataset(Seed seed, std::size_t n = 60) {
    static constexpr double means[] = {0.0, 10.0, -10.0};
    constexpr std::size_t classes = 3;
    if (n == 0) throw std::invalid_argument("make_synthetic_dataset: n must be >= 1");
    const CounterRng label_rng(seed, stream_id({stream_tag::dataset, 1}));
    const CounterRng noise_rng(seed, stream_id({stream_tag::dataset, 2}));
    Dataset d;
    d.inputs.resize(1, static_cast<Eigen::Index>(n));
    d.targets = Batch::Zero(classes, static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const auto y = std::min<std::size_t>(classes - 1, static_cast<std::size_t>(label_rng.uniform(i) * classes));
        d.labels.push_back(static_cast<int>(y));
        d.targets(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(i)) = 1.0;
        d.inputs(0, static_cast<Eigen::Index>(i)) = means[y] + noise_rng.normal(i);
    }
    return d;
}

}  // namespace tl
