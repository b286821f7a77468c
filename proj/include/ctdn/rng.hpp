#pragma once

#include <cmath>
#include <cstdint>

#include "ctdn/errors.hpp"
#include "ctdn/tensor.hpp"

namespace ctdn {

// xoshiro256++ with splitmix64 seeding. Self-contained so that streams are
// reproducible across standard libraries; std::normal_distribution is
// implementation-defined and would break byte-identical reruns elsewhere.
class Rng {
   public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& si : s_) si = splitmix64(x);
        have_spare_ = false;
        spare_ = 0.0;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        require(n > 0, "Rng::below needs n > 0");
        // Rejection sampling keeps the draw unbiased.
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        require(hi >= lo, "Rng::uniform_int needs hi >= lo");
        return lo + int(below(uint64_t(hi - lo) + 1));
    }

    // Marsaglia polar method (pairs cached); avoids trig for speed.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        have_spare_ = true;
        return u * m;
    }

    // Exponential-sum Poisson sampler: exact for any lambda, O(lambda) draws.
    int64_t poisson(double lambda) {
        require(lambda >= 0.0, "poisson needs lambda >= 0");
        if (lambda == 0.0) return 0;
        double acc = 0.0;
        int64_t k = -1;
        while (acc <= lambda) {
            acc += -std::log(1.0 - uniform());
            ++k;
        }
        return k;
    }

    template <class S>
    void fill_normal(Tens<S>& t) {
        for (auto& x : t.v) x = S(normal());
    }

    template <class S>
    Tens<S> normal_like(const Tens<S>& ref) {
        Tens<S> out = Tens<S>::zeros_like(ref);
        fill_normal(out);
        return out;
    }

    // Fisher-Yates.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

   private:
    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ULL;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4];
    bool have_spare_;
    double spare_;
};

}  // namespace ctdn
