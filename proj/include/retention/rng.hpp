#ifndef RETENTION_RNG_HPP
#define RETENTION_RNG_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace retention {

// All randomness in a run flows from one seed through named substreams so
// that experiments are bit-reproducible. The mixing is FNV-1a over the
// stream name followed by a splitmix64 finalizer.
inline uint64_t substream_seed(uint64_t run_seed, std::string_view name,
                               uint64_t index = 0) {
    uint64_t h = 1469598103934665603ull;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    h ^= run_seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    h ^= index * 0xbf58476d1ce4e5b9ull + 0x94d049bb133111ebull;
    // splitmix64 finalizer
    h ^= h >> 30;
    h *= 0xbf58476d1ce4e5b9ull;
    h ^= h >> 27;
    h *= 0x94d049bb133111ebull;
    h ^= h >> 31;
    return h;
}

// mt19937_64 with hand-rolled distributions. The standard distribution
// objects are implementation-defined, which would tie reproducibility to a
// particular libstdc++ version; these are fully pinned.
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0,1)
    double uniform() { return (gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // index in [0, n)
    size_t uniform_index(size_t n) {
        // rejection sampling to avoid modulo bias
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = gen_();
        while (x >= limit) x = gen_();
        return static_cast<size_t>(x % n);
    }

    // standard normal via Box-Muller with a cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mu, double sigma) { return mu + sigma * normal(); }

    double lognormal(double mu_log, double sigma_log) {
        return std::exp(normal(mu_log, sigma_log));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // index sampled from unnormalized nonnegative weights
    int categorical(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        if (!(total > 0.0))
            throw std::invalid_argument("categorical: weights sum to zero");
        double u = uniform() * total;
        for (size_t i = 0; i < weights.size(); ++i) {
            u -= weights[i];
            if (u < 0.0) return static_cast<int>(i);
        }
        return static_cast<int>(weights.size()) - 1;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[uniform_index(i)]);
    }

  private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace retention

#endif
