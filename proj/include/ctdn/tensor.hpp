#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ctdn/errors.hpp"

namespace ctdn {

// Dense NHWC tensor. Rank-4 covers everything in this codebase:
// images are (n, h, w, 1), latents (n, h, w, c), token matrices (1, m, 1, c),
// vectors (1, 1, 1, d). Scalar type is a template parameter because the
// schedule kernels are exercised in both float32 and float64.
template <class S>
struct Tens {
    std::array<int, 4> shape{0, 0, 0, 0};  // n, h, w, c
    std::vector<S> v;

    Tens() = default;
    Tens(int n, int h, int w, int c) : shape{n, h, w, c}, v(static_cast<size_t>(n) * h * w * c, S(0)) {
        require(n >= 0 && h >= 0 && w >= 0 && c >= 0, "tensor dims must be nonnegative");
    }

    int n() const { return shape[0]; }
    int h() const { return shape[1]; }
    int w() const { return shape[2]; }
    int c() const { return shape[3]; }
    size_t size() const { return v.size(); }
    bool same_shape(const Tens& o) const { return shape == o.shape; }

    S& at(int in, int ih, int iw, int ic) {
        return v[((static_cast<size_t>(in) * shape[1] + ih) * shape[2] + iw) * shape[3] + ic];
    }
    const S& at(int in, int ih, int iw, int ic) const {
        return v[((static_cast<size_t>(in) * shape[1] + ih) * shape[2] + iw) * shape[3] + ic];
    }

    S* data() { return v.data(); }
    const S* data() const { return v.data(); }

    static Tens zeros_like(const Tens& o) { return Tens(o.shape[0], o.shape[1], o.shape[2], o.shape[3]); }

    Tens& operator+=(const Tens& o) {
        require(same_shape(o), "tensor shape mismatch in +=");
        for (size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
        return *this;
    }
    Tens& operator*=(S s) {
        for (auto& x : v) x *= s;
        return *this;
    }

    bool all_finite() const {
        for (S x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    std::string shape_str() const {
        return "(" + std::to_string(shape[0]) + ", " + std::to_string(shape[1]) + ", " +
               std::to_string(shape[2]) + ", " + std::to_string(shape[3]) + ")";
    }
};

using Tensor = Tens<float>;
using TensorD = Tens<double>;

template <class S>
Tens<S> operator+(Tens<S> a, const Tens<S>& b) {
    a += b;
    return a;
}

template <class S>
Tens<S> operator*(S s, Tens<S> a) {
    a *= s;
    return a;
}

template <class S>
double max_abs_diff(const Tens<S>& a, const Tens<S>& b) {
    require(a.same_shape(b), "tensor shape mismatch in max_abs_diff");
    double m = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(double(a.v[i]) - double(b.v[i])));
    return m;
}

template <class S>
double mean_abs(const Tens<S>& a) {
    if (a.v.empty()) return 0.0;
    double s = 0.0;
    for (S x : a.v) s += std::abs(double(x));
    return s / double(a.v.size());
}

}  // namespace ctdn
