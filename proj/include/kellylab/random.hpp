#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace kellylab {

/// SplitMix64 finaliser. Used to derive independent stream seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Seed of child stream `index` of `master`.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) noexcept {
    return splitmix64(master ^ splitmix64(index + 0x632BE59BD9B4E019ULL));
}

/// Seeded 64-bit Mersenne twister with splittable child streams.
///
/// Streams are derived from (master seed, index) through SplitMix64, so episode
/// k of a run always sees the same numbers no matter which thread or in which
/// order it is simulated.
class Rng {
public:
    using result_type = std::mt19937_64::result_type;

    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(splitmix64(seed)) {}

    static Rng stream(std::uint64_t master, std::uint64_t index) {
        return Rng(derive_seed(master, index));
    }

    Rng child(std::uint64_t index) const { return stream(seed_, index); }

    std::uint64_t seed() const noexcept { return seed_; }

    static constexpr result_type min() { return std::mt19937_64::min(); }
    static constexpr result_type max() { return std::mt19937_64::max(); }
    result_type operator()() { return engine_(); }

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }

    Eigen::VectorXd normal_vector(Eigen::Index n) {
        Eigen::VectorXd z(n);
        for (Eigen::Index i = 0; i < n; ++i) z[i] = normal();
        return z;
    }

    /// Draw an index from a discrete distribution given by (unnormalised) weights.
    template <class Vec>
    int categorical(const Vec& probs) {
        double total = 0.0;
        for (Eigen::Index i = 0; i < probs.size(); ++i) total += probs[i];
        const double u = uniform() * total;
        double acc = 0.0;
        for (Eigen::Index i = 0; i < probs.size(); ++i) {
            acc += probs[i];
            if (u < acc) return static_cast<int>(i);
        }
        // u landed on the upper edge through round-off: last positive entry
        for (Eigen::Index i = probs.size() - 1; i >= 0; --i)
            if (probs[i] > 0.0) return static_cast<int>(i);
        return 0;
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

} // namespace kellylab
