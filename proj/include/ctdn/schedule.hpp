#pragma once

#include <cmath>
#include <cstdio>
#include <ostream>
#include <vector>

#include "ctdn/errors.hpp"
#include "ctdn/tensor.hpp"

namespace ctdn {

// Signal-retention table for the cosine noise schedule.
//
// alpha_bar is indexed t = 0..T with alpha_bar[0] == 1 exactly; beta is
// indexed t = 1..T (beta[0] is unused and stored as NaN). All schedule math
// runs in double regardless of the model tensor precision.
struct NoiseSchedule {
    int T = 0;
    double eps_sched = 0.0;
    std::vector<double> alpha_bar;  // size T+1
    std::vector<double> beta;       // size T+1, [0] unused

    double abar(int t) const {
        require(t >= 0 && t <= T, "alpha_bar index out of range: t=" + std::to_string(t));
        return alpha_bar[size_t(t)];
    }
    double beta_at(int t) const {
        require(t >= 1 && t <= T, "beta index out of range: t=" + std::to_string(t));
        return beta[size_t(t)];
    }

    // Rows with alpha_bar below this carry no recoverable signal: the clean
    // component sits under one rounding ulp of the noise even in float64.
    static constexpr double kZeroSnrAlphaBar = 1e-12;
    bool zero_snr(int t) const { return abar(t) < kZeroSnrAlphaBar; }
};

namespace detail {
inline double sched_angle(int t, int T, double eps) {
    // t/T as one rounded rational, then the affine map into [theta0, pi/2].
    const double frac = double(t) / double(T);
    return ((frac + eps) / (1.0 + eps)) * (M_PI / 2.0);
}
}  // namespace detail

// Cosine schedule: alpha_bar(t) = cos^2(theta_t) / cos^2(theta_0) with
// theta_t = ((t/T + eps)/(1 + eps)) * pi/2.
//
// beta(t) = 1 - alpha_bar(t)/alpha_bar(t-1) is evaluated through the
// identity cos^2(a) - cos^2(b) = sin(b-a) sin(b+a), i.e.
//   beta(t) = sin(dtheta) * sin(theta_t + theta_(t-1)) / cos^2(theta_(t-1)),
// which avoids the 1 - (ratio near 1) cancellation: the plain ratio form
// loses ~5e-12 relative accuracy for small t and rounds beta(T) up to
// exactly 1.0, which would break the open-interval validation below.
inline NoiseSchedule build_cosine_schedule(int T, double eps_sched) {
    require(T >= 1, "schedule step count T must be >= 1");
    require(eps_sched > 0.0, "schedule offset must be > 0");

    NoiseSchedule s;
    s.T = T;
    s.eps_sched = eps_sched;
    s.alpha_bar.resize(size_t(T) + 1);
    s.beta.assign(size_t(T) + 1, std::numeric_limits<double>::quiet_NaN());

    const double c0 = std::cos(detail::sched_angle(0, T, eps_sched));
    const double denom = c0 * c0;
    const double dtheta = (M_PI / 2.0) / (double(T) * (1.0 + eps_sched));

    for (int t = 0; t <= T; ++t) {
        const double c = std::cos(detail::sched_angle(t, T, eps_sched));
        s.alpha_bar[size_t(t)] = (c * c) / denom;
    }
    for (int t = 1; t <= T; ++t) {
        const double th_prev = detail::sched_angle(t - 1, T, eps_sched);
        const double th = detail::sched_angle(t, T, eps_sched);
        const double cp = std::cos(th_prev);
        double b = std::sin(dtheta) * std::sin(th + th_prev) / (cp * cp);
        // The terminal beta is 1 - O(1e-31) in exact arithmetic; the nearest
        // double is 1.0. Round into the open interval instead: the stored
        // value then differs from the true one by under one ulp of 1.0.
        if (b >= 1.0) b = std::nextafter(1.0, 0.0);
        s.beta[size_t(t)] = b;
    }

    // Validate rather than clamp; a schedule that violates these is a bug.
    if (s.alpha_bar[0] != 1.0) throw NumericError("cosine schedule: alpha_bar[0] != 1");
    for (int t = 1; t <= T; ++t) {
        if (!(s.alpha_bar[size_t(t)] < s.alpha_bar[size_t(t) - 1]))
            throw NumericError("cosine schedule: alpha_bar not strictly decreasing at t=" + std::to_string(t));
        const double b = s.beta[size_t(t)];
        if (!(b > 0.0 && b < 1.0))
            throw NumericError("cosine schedule: beta out of (0,1) at t=" + std::to_string(t));
    }
    if (s.alpha_bar[size_t(T)] < 0.0) throw NumericError("cosine schedule: alpha_bar[T] < 0");
    if (T >= 100 && !(s.alpha_bar[size_t(T)] < 1e-4))
        throw NumericError("cosine schedule: alpha_bar[T] not < 1e-4");
    return s;
}

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, elementwise. The noise is
// caller-supplied; sampling it belongs to the caller's seeded generator.
template <class S>
Tens<S> forward_diffuse(const Tens<S>& z0, int t, const Tens<S>& noise, const NoiseSchedule& sched) {
    require(t >= 1 && t <= sched.T, "forward_diffuse: t out of range");
    require(z0.same_shape(noise), "forward_diffuse: z0/noise shape mismatch " + z0.shape_str() + " vs " + noise.shape_str());
    const S a = S(std::sqrt(sched.abar(t)));
    const S b = S(std::sqrt(1.0 - sched.abar(t)));
    Tens<S> out = Tens<S>::zeros_like(z0);
    for (size_t i = 0; i < z0.v.size(); ++i) out.v[i] = a * z0.v[i] + b * noise.v[i];
    return out;
}

// Deterministic reverse update
//   z_prev = sqrt(abar_prev) * zhat0 + sqrt(1 - abar_prev) * eps_pred,
//   zhat0  = (z_t - sqrt(1 - abar_t) * eps_pred) / sqrt(abar_t).
// No noise term and no eta parameter: the quick sampler is fully
// deterministic, so identical inputs give bit-identical outputs.
template <class S>
Tens<S> ddim_step(const Tens<S>& z_t, const Tens<S>& eps_pred, int t, int t_prev, const NoiseSchedule& sched) {
    require(t >= 1 && t <= sched.T, "ddim_step: t out of range");
    require(t_prev >= 0 && t_prev < t, "ddim_step: need 0 <= t_prev < t");
    require(z_t.same_shape(eps_pred), "ddim_step: z_t/eps_pred shape mismatch");
    const S sa = S(std::sqrt(sched.abar(t)));
    const S sb = S(std::sqrt(1.0 - sched.abar(t)));
    const S sap = S(std::sqrt(sched.abar(t_prev)));
    const S sbp = S(std::sqrt(1.0 - sched.abar(t_prev)));
    Tens<S> out = Tens<S>::zeros_like(z_t);
    for (size_t i = 0; i < z_t.v.size(); ++i) {
        // True division, not a precomputed reciprocal: near-terminal steps
        // amplify zhat0 rounding by 1/sqrt(abar_t), so every ulp counts.
        const S zhat0 = (z_t.v[i] - sb * eps_pred.v[i]) / sa;
        out.v[i] = sap * zhat0 + sbp * eps_pred.v[i];
    }
    return out;
}

// Stochastic ancestral update:
//   z_(t-1) = (z_t - beta_t/sqrt(1-abar_t) * eps_pred) / sqrt(1-beta_t) + sqrt(beta_t) * noise,
// with the noise term suppressed at the terminal step t = 1.
template <class S>
Tens<S> ddpm_step(const Tens<S>& z_t, const Tens<S>& eps_pred, int t, const NoiseSchedule& sched, const Tens<S>& noise) {
    require(t >= 1 && t <= sched.T, "ddpm_step: t out of range");
    require(z_t.same_shape(eps_pred), "ddpm_step: z_t/eps_pred shape mismatch");
    require(z_t.same_shape(noise), "ddpm_step: z_t/noise shape mismatch");
    const double beta = sched.beta_at(t);
    const S mean_scale = S(1.0 / std::sqrt(1.0 - beta));
    const S eps_coef = S(beta / std::sqrt(1.0 - sched.abar(t)));
    const S noise_scale = (t == 1) ? S(0) : S(std::sqrt(beta));
    Tens<S> out = Tens<S>::zeros_like(z_t);
    for (size_t i = 0; i < z_t.v.size(); ++i)
        out.v[i] = mean_scale * (z_t.v[i] - eps_coef * eps_pred.v[i]) + noise_scale * noise.v[i];
    return out;
}

// Strictly decreasing timestep indices; the reverse loop pairs consecutive
// entries as (t, t_prev) and finishes with the implicit t_prev = 0.
struct TimestepSubsequence {
    std::vector<int> steps;
    int count() const { return int(steps.size()); }
};

// Evenly spaced (round-to-nearest) subsequence whose first element is
// `first`. Spacing first*(k-i)/k keeps consecutive gaps >= 1 when k <= first.
inline TimestepSubsequence make_timestep_subsequence_from(int first, int num_steps) {
    require(first >= 1, "subsequence: first step must be >= 1");
    require(num_steps >= 1 && num_steps <= first, "subsequence: need 1 <= num_steps <= first step");
    TimestepSubsequence sub;
    sub.steps.resize(size_t(num_steps));
    const double k = double(num_steps);
    for (int i = 0; i < num_steps; ++i)
        sub.steps[size_t(i)] = int(std::llround(double(first) * (k - i) / k));
    for (size_t i = 1; i < sub.steps.size(); ++i)
        if (!(sub.steps[i] < sub.steps[i - 1])) throw NumericError("subsequence not strictly decreasing");
    if (sub.steps.back() <= 0) throw NumericError("subsequence reached a nonpositive step");
    return sub;
}

inline TimestepSubsequence make_timestep_subsequence(int T, int num_steps) {
    require(T >= 1, "subsequence: T must be >= 1");
    require(num_steps <= T, "subsequence: num_steps must be <= T");
    return make_timestep_subsequence_from(T, num_steps);
}

// Plain-text columns for inspection: t, alpha_bar, beta (beta blank at t=0).
inline void dump_schedule(const NoiseSchedule& s, std::ostream& os) {
    os << "t alpha_bar beta\n";
    char line[96];
    std::snprintf(line, sizeof line, "0 %.17g -\n", s.alpha_bar[0]);
    os << line;
    for (int t = 1; t <= s.T; ++t) {
        std::snprintf(line, sizeof line, "%d %.17g %.17g\n", t, s.alpha_bar[size_t(t)], s.beta[size_t(t)]);
        os << line;
    }
}

}  // namespace ctdn
