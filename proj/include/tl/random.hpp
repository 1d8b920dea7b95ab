#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>

namespace tl {

using Seed = std::uint64_t;

// Philox4x32-10 (Salmon et al., SC'11). Stateless: every output block is a pure
// function of (key, counter).
struct Philox4x32 {
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static Counter generate(Counter ctr, Key key) {
        for (int r = 0; r < 10; ++r) {
            if (r > 0) {
                key[0] += 0x9E3779B9u;
                key[1] += 0xBB67AE85u;
            }
            ctr = round(ctr, key);
        }
        return ctr;
    }

private:
    static Counter round(const Counter& c, const Key& k) {
        const std::uint64_t p0 = std::uint64_t{0xD2511F53u} * c[0];
        const std::uint64_t p1 = std::uint64_t{0xCD9E8D57u} * c[2];
        const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
        const auto lo0 = static_cast<std::uint32_t>(p0);
        const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
        const auto lo1 = static_cast<std::uint32_t>(p1);
        return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
    }
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Combines tags (layer index, purpose, restart, ...) into one stream id.
inline std::uint64_t stream_id(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x6A09E667F3BCC909ull;
    for (auto p : parts) h = splitmix64(h ^ splitmix64(p));
    return h;
}

namespace stream_tag {
inline constexpr std::uint64_t weights = 1;
inline constexpr std::uint64_t bias = 2;
inline constexpr std::uint64_t output = 3;
inline constexpr std::uint64_t signs = 4;
inline constexpr std::uint64_t power_start = 5;
inline constexpr std::uint64_t ascent_start = 6;
inline constexpr std::uint64_t dataset = 7;
inline constexpr std::uint64_t probe = 8;
inline constexpr std::uint64_t test = 99;
}  // namespace stream_tag

// Counter-based generator keyed by (seed, stream). Draw number i of a stream is
// computed directly from i, so any subset of a stream can be regenerated in any order.
class CounterRng {
public:
    CounterRng(Seed seed, std::uint64_t stream)
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
          stream_(stream) {}

    Philox4x32::Counter block(std::uint64_t index) const {
        return Philox4x32::generate({static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                                     static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)},
                                    key_);
    }

    // Uniform on the open interval (0, 1) with 53 random bits.
    static double to_unit(std::uint32_t hi, std::uint32_t lo) {
        const std::uint64_t bits = ((std::uint64_t{hi} << 32) | lo) >> 11;
        return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
    }

    double uniform(std::uint64_t index) const {
        const auto b = block(index / 2);
        return index % 2 == 0 ? to_unit(b[0], b[1]) : to_unit(b[2], b[3]);
    }

    // Standard normal number `index` of the stream (Box-Muller on block index/2).
    double normal(std::uint64_t index) const {
        const auto z = normal_pair(index / 2);
        return z[index % 2];
    }

    std::array<double, 2> normal_pair(std::uint64_t block_index) const {
        const auto b = block(block_index);
        const double u1 = to_unit(b[0], b[1]);
        const double u2 = to_unit(b[2], b[3]);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * std::numbers::pi * u2;
        return {r * std::cos(t), r * std::sin(t)};
    }

    void fill_normal(std::span<double> out, double stddev = 1.0) const {
        const std::size_t n = out.size();
        for (std::size_t i = 0; i + 1 < n; i += 2) {
            const auto z = normal_pair(i / 2);
            out[i] = stddev * z[0];
            out[i + 1] = stddev * z[1];
        }
        if (n % 2 == 1) out[n - 1] = stddev * normal(n - 1);
    }

    void fill_uniform(std::span<double> out) const {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = uniform(i);
    }

    Seed seed() const { return (Seed{key_[1]} << 32) | key_[0]; }
    std::uint64_t stream() const { return stream_; }

private:
    Philox4x32::Key key_;
    std::uint64_t stream_;
};

}  // namespace tl
