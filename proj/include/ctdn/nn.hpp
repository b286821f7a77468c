#pragma once

// Training-capable layer kernels (forward + hand-written backward) on NHWC
// float tensors. GEMMs go through Eigen; everything else is plain loops.
// Layers expose two entry points:
//   apply(x)    -- const, cache-free; safe for concurrent inference
//   forward(x)  -- caches activations for a following backward(gy)
// backward() accumulates parameter gradients (zero_grad() clears them) and
// returns the input gradient. Training is single-writer by contract.

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "ctdn/errors.hpp"
#include "ctdn/rng.hpp"
#include "ctdn/tensor.hpp"

namespace ctdn::nn {

using MatMap = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

struct Param {
    Tensor w;
    Tensor g;
    void init(int n, int h, int wd, int c) {
        w = Tensor(n, h, wd, c);
        g = Tensor(n, h, wd, c);
    }
};

using ParamVisitor = std::function<void(const std::string&, Param&)>;

inline void fill_normal_scaled(Tensor& t, Rng& rng, double std) {
    for (auto& x : t.v) x = float(rng.normal() * std);
}

// ---------------------------------------------------------------------------
// Elementwise activations

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

struct SiLU {
    Tensor x_;
    Tensor run(const Tensor& x, bool cache) {
        if (cache) x_ = x;
        Tensor y = Tensor::zeros_like(x);
        for (size_t i = 0; i < x.v.size(); ++i) y.v[i] = x.v[i] * sigmoidf(x.v[i]);
        return y;
    }
    Tensor apply(const Tensor& x) const {
        Tensor y = Tensor::zeros_like(x);
        for (size_t i = 0; i < x.v.size(); ++i) y.v[i] = x.v[i] * sigmoidf(x.v[i]);
        return y;
    }
    Tensor forward(const Tensor& x) { return run(x, true); }
    Tensor backward(const Tensor& gy) {
        Tensor gx = Tensor::zeros_like(gy);
        for (size_t i = 0; i < gy.v.size(); ++i) {
            const float s = sigmoidf(x_.v[i]);
            gx.v[i] = gy.v[i] * s * (1.0f + x_.v[i] * (1.0f - s));
        }
        return gx;
    }
};

struct Tanh {
    Tensor y_;
    Tensor apply(const Tensor& x) const {
        Tensor y = Tensor::zeros_like(x);
        for (size_t i = 0; i < x.v.size(); ++i) y.v[i] = std::tanh(x.v[i]);
        return y;
    }
    Tensor forward(const Tensor& x) {
        y_ = apply(x);
        return y_;
    }
    Tensor backward(const Tensor& gy) {
        Tensor gx = Tensor::zeros_like(gy);
        for (size_t i = 0; i < gy.v.size(); ++i) gx.v[i] = gy.v[i] * (1.0f - y_.v[i] * y_.v[i]);
        return gx;
    }
};

// ---------------------------------------------------------------------------
// Conv2d, NHWC, square kernel, zero padding

struct Conv2d {
    int cin = 0, cout = 0, k = 1, stride = 1, pad = 0;
    Param w;  // (k, k, cin, cout)
    Param b;  // (1, 1, 1, cout)
    Tensor x_;

    Conv2d() = default;
    Conv2d(int cin_, int cout_, int k_, int stride_, int pad_, Rng& rng)
        : cin(cin_), cout(cout_), k(k_), stride(stride_), pad(pad_) {
        w.init(k, k, cin, cout);
        b.init(1, 1, 1, cout);
        fill_normal_scaled(w.w, rng, std::sqrt(2.0 / (double(k) * k * cin)));
    }

    int out_dim(int in) const { return (in + 2 * pad - k) / stride + 1; }

    void im2col(const Tensor& x, std::vector<float>& col) const {
        const int n = x.n(), h = x.h(), wd = x.w();
        const int ho = out_dim(h), wo = out_dim(wd);
        const size_t K = size_t(k) * k * cin;
        col.assign(size_t(n) * ho * wo * K, 0.0f);
        for (int in = 0; in < n; ++in)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    float* row = col.data() + ((size_t(in) * ho + oy) * wo + ox) * K;
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= wd) continue;
                            std::memcpy(row + (size_t(ky) * k + kx) * cin, &x.at(in, iy, ix, 0),
                                        sizeof(float) * size_t(cin));
                        }
                    }
                }
    }

    Tensor run(const Tensor& x, bool cache) {
        require(x.c() == cin, "Conv2d: expected " + std::to_string(cin) + " input channels, got " + x.shape_str());
        if (cache) x_ = x;
        const int n = x.n(), ho = out_dim(x.h()), wo = out_dim(x.w());
        const size_t M = size_t(n) * ho * wo, K = size_t(k) * k * cin;
        std::vector<float> col;
        im2col(x, col);
        Tensor y(n, ho, wo, cout);
        ConstMatMap C(col.data(), Eigen::Index(M), Eigen::Index(K));
        ConstMatMap W(w.w.data(), Eigen::Index(K), cout);
        MatMap Y(y.data(), Eigen::Index(M), cout);
        Y.noalias() = C * W;
        for (size_t r = 0; r < M; ++r)
            for (int c = 0; c < cout; ++c) y.v[r * cout + c] += b.w.v[size_t(c)];
        return y;
    }
    Tensor apply(const Tensor& x) const { return const_cast<Conv2d*>(this)->run(x, false); }
    Tensor forward(const Tensor& x) { return run(x, true); }

    Tensor backward(const Tensor& gy) {
        const Tensor& x = x_;
        const int n = x.n(), h = x.h(), wd = x.w();
        const int ho = out_dim(h), wo = out_dim(wd);
        const size_t M = size_t(n) * ho * wo, K = size_t(k) * k * cin;
        std::vector<float> col;
        im2col(x, col);  // recomputed; cheaper than caching per layer
        ConstMatMap C(col.data(), Eigen::Index(M), Eigen::Index(K));
        ConstMatMap GY(gy.data(), Eigen::Index(M), cout);
        MatMap GW(w.g.data(), Eigen::Index(K), cout);
        GW.noalias() += C.transpose() * GY;
        for (size_t r = 0; r < M; ++r)
            for (int c = 0; c < cout; ++c) b.g.v[size_t(c)] += gy.v[r * cout + c];

        std::vector<float> gcol(M * K);
        MatMap GC(gcol.data(), Eigen::Index(M), Eigen::Index(K));
        ConstMatMap W(w.w.data(), Eigen::Index(K), cout);
        GC.noalias() = GY * W.transpose();

        Tensor gx(n, h, wd, cin);
        for (int in = 0; in < n; ++in)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    const float* row = gcol.data() + ((size_t(in) * ho + oy) * wo + ox) * K;
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= wd) continue;
                            float* dst = &gx.at(in, iy, ix, 0);
                            const float* src = row + (size_t(ky) * k + kx) * cin;
                            for (int c = 0; c < cin; ++c) dst[c] += src[c];
                        }
                    }
                }
        return gx;
    }

    void visit(const std::string& prefix, const ParamVisitor& f) {
        f(prefix + ".weight", w);
        f(prefix + ".bias", b);
    }
};

// ---------------------------------------------------------------------------
// GroupNorm with affine parameters

struct GroupNorm {
    int channels = 0, groups = 1;
    double eps = 1e-5;
    Param gamma, beta;
    Tensor xhat_;
    std::vector<float> rstd_;  // per (n, group)

    GroupNorm() = default;
    explicit GroupNorm(int channels_, int groups_ = 8) : channels(channels_) {
        groups = std::min(groups_, channels);
        while (channels % groups != 0) --groups;
        gamma.init(1, 1, 1, channels);
        beta.init(1, 1, 1, channels);
        for (auto& g : gamma.w.v) g = 1.0f;
    }

    Tensor run(const Tensor& x, bool cache) {
        require(x.c() == channels, "GroupNorm: channel mismatch " + x.shape_str());
        const int n = x.n(), h = x.h(), wd = x.w();
        const int cg = channels / groups;
        const size_t group_elems = size_t(h) * wd * cg;
        Tensor xhat = Tensor::zeros_like(x);
        std::vector<float> rstd(size_t(n) * groups);
        for (int in = 0; in < n; ++in)
            for (int g = 0; g < groups; ++g) {
                double sum = 0, sum2 = 0;
                for (int iy = 0; iy < h; ++iy)
                    for (int ix = 0; ix < wd; ++ix)
                        for (int c = g * cg; c < (g + 1) * cg; ++c) {
                            const double v = x.at(in, iy, ix, c);
                            sum += v;
                            sum2 += v * v;
                        }
                const double mean = sum / double(group_elems);
                const double var = std::max(0.0, sum2 / double(group_elems) - mean * mean);
                const float rs = float(1.0 / std::sqrt(var + eps));
                rstd[size_t(in) * groups + g] = rs;
                for (int iy = 0; iy < h; ++iy)
                    for (int ix = 0; ix < wd; ++ix)
                        for (int c = g * cg; c < (g + 1) * cg; ++c)
                            xhat.at(in, iy, ix, c) = (x.at(in, iy, ix, c) - float(mean)) * rs;
            }
        Tensor y = Tensor::zeros_like(x);
        for (int in = 0; in < n; ++in)
            for (int iy = 0; iy < h; ++iy)
                for (int ix = 0; ix < wd; ++ix)
                    for (int c = 0; c < channels; ++c)
                        y.at(in, iy, ix, c) = xhat.at(in, iy, ix, c) * gamma.w.v[size_t(c)] + beta.w.v[size_t(c)];
        if (cache) {
            xhat_ = std::move(xhat);
            rstd_ = std::move(rstd);
        }
        return y;
    }
    Tensor apply(const Tensor& x) const { return const_cast<GroupNorm*>(this)->run(x, false); }
    Tensor forward(const Tensor& x) { return run(x, true); }

    Tensor backward(const Tensor& gy) {
        const int n = gy.n(), h = gy.h(), wd = gy.w();
        const int cg = channels / groups;
        const double m = double(h) * wd * cg;
        Tensor gx = Tensor::zeros_like(gy);
        for (int in = 0; in < n; ++in)
            for (int iy = 0; iy < h; ++iy)
                for (int ix = 0; ix < wd; ++ix)
                    for (int c = 0; c < channels; ++c) {
                        gamma.g.v[size_t(c)] += gy.at(in, iy, ix, c) * xhat_.at(in, iy, ix, c);
                        beta.g.v[size_t(c)] += gy.at(in, iy, ix, c);
                    }
        for (int in = 0; in < n; ++in)
            for (int g = 0; g < groups; ++g) {
                double sum_d = 0, sum_dx = 0;
                for (int iy = 0; iy < h; ++iy)
                    for (int ix = 0; ix < wd; ++ix)
                        for (int c = g * cg; c < (g + 1) * cg; ++c) {
                            const double d = double(gy.at(in, iy, ix, c)) * gamma.w.v[size_t(c)];
                            sum_d += d;
                            sum_dx += d * xhat_.at(in, iy, ix, c);
                        }
                const double mean_d = sum_d / m, mean_dx = sum_dx / m;
                const float rs = rstd_[size_t(in) * groups + g];
                for (int iy = 0; iy < h; ++iy)
                    for (int ix = 0; ix < wd; ++ix)
                        for (int c = g * cg; c < (g + 1) * cg; ++c) {
                            const double d = double(gy.at(in, iy, ix, c)) * gamma.w.v[size_t(c)];
                            gx.at(in, iy, ix, c) =
                                float(rs * (d - mean_d - double(xhat_.at(in, iy, ix, c)) * mean_dx));
                        }
            }
        return gx;
    }

    void visit(const std::string& prefix, const ParamVisitor& f) {
        f(prefix + ".gamma", gamma);
        f(prefix + ".beta", beta);
    }
};

// ---------------------------------------------------------------------------
// Linear over the channel (last) dimension

struct Linear {
    int din = 0, dout = 0;
    Param w;  // (1, 1, din, dout)
    Param b;  // (1, 1, 1, dout)
    Tensor x_;

    Linear() = default;
    Linear(int din_, int dout_, Rng& rng) : din(din_), dout(dout_) {
        w.init(1, 1, din, dout);
        b.init(1, 1, 1, dout);
        fill_normal_scaled(w.w, rng, std::sqrt(1.0 / double(din)));
    }

    Tensor run(const Tensor& x, bool cache) {
        require(x.c() == din, "Linear: expected " + std::to_string(din) + " channels, got " + x.shape_str());
        if (cache) x_ = x;
        const size_t M = x.size() / size_t(din);
        Tensor y(x.n(), x.h(), x.w(), dout);
        ConstMatMap X(x.data(), Eigen::Index(M), din);
        ConstMatMap W(w.w.data(), din, dout);
        MatMap Y(y.data(), Eigen::Index(M), dout);
        Y.noalias() = X * W;
        for (size_t r = 0; r < M; ++r)
            for (int c = 0; c < dout; ++c) y.v[r * size_t(dout) + c] += b.w.v[size_t(c)];
        return y;
    }
    Tensor apply(const Tensor& x) const { return const_cast<Linear*>(this)->run(x, false); }
    Tensor forward(const Tensor& x) { return run(x, true); }

    Tensor backward(const Tensor& gy) {
        const size_t M = gy.size() / size_t(dout);
        ConstMatMap X(x_.data(), Eigen::Index(M), din);
        ConstMatMap GY(gy.data(), Eigen::Index(M), dout);
        MatMap GW(w.g.data(), din, dout);
        GW.noalias() += X.transpose() * GY;
        for (size_t r = 0; r < M; ++r)
            for (int c = 0; c < dout; ++c) b.g.v[size_t(c)] += gy.v[r * size_t(dout) + c];
        Tensor gx(x_.n(), x_.h(), x_.w(), din);
        ConstMatMap W(w.w.data(), din, dout);
        MatMap GX(gx.data(), Eigen::Index(M), din);
        GX.noalias() = GY * W.transpose();
        return gx;
    }

    void visit(const std::string& prefix, const ParamVisitor& f) {
        f(prefix + ".weight", w);
        f(prefix + ".bias", b);
    }
};

// ---------------------------------------------------------------------------
// Row softmax with backward (rows = leading dims, cols = channel dim)

inline Tensor softmax_rows(const Tensor& x) {
    const int cols = x.c();
    const size_t rows = x.size() / size_t(cols);
    Tensor y = Tensor::zeros_like(x);
    for (size_t r = 0; r < rows; ++r) {
        const float* xr = x.data() + r * size_t(cols);
        float* yr = y.data() + r * size_t(cols);
        float mx = xr[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double sum = 0;
        for (int c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            sum += yr[c];
        }
        const float inv = float(1.0 / sum);
        for (int c = 0; c < cols; ++c) yr[c] *= inv;
    }
    return y;
}

inline Tensor softmax_rows_backward(const Tensor& y, const Tensor& gy) {
    const int cols = y.c();
    const size_t rows = y.size() / size_t(cols);
    Tensor gx = Tensor::zeros_like(y);
    for (size_t r = 0; r < rows; ++r) {
        const float* yr = y.data() + r * size_t(cols);
        const float* gr = gy.data() + r * size_t(cols);
        float* xr = gx.data() + r * size_t(cols);
        double dot = 0;
        for (int c = 0; c < cols; ++c) dot += double(yr[c]) * gr[c];
        for (int c = 0; c < cols; ++c) xr[c] = yr[c] * (gr[c] - float(dot));
    }
    return gx;
}

// ---------------------------------------------------------------------------
// Attention core: queries (n, mq, dq-projected) attend over keys/values.
// Self-attention passes the same token tensor for both; cross-attention
// passes the context as kv. Tokens are the flattened spatial grid.

struct Attention {
    int channels = 0, kv_dim = 0, heads = 1;
    GroupNorm norm;
    Linear wq, wk, wv, wo;
    // cache
    Tensor q_, k_, v_, attn_, normed_, kv_in_;
    bool self_attention = true;

    Attention() = default;
    Attention(int channels_, int kv_dim_, int heads_, bool self_attn, Rng& rng)
        : channels(channels_),
          kv_dim(kv_dim_),
          heads(heads_),
          norm(channels_),
          wq(channels_, channels_, rng),
          wk(kv_dim_, channels_, rng),
          wv(kv_dim_, channels_, rng),
          wo(channels_, channels_, rng),
          self_attention(self_attn) {
        require(channels_ % heads_ == 0, "Attention: heads must divide channels");
    }

    static Tensor tokens_of(const Tensor& x) {  // (n,h,w,c) -> (n, m, 1, c) view-copy
        Tensor t(x.n(), x.h() * x.w(), 1, x.c());
        t.v = x.v;
        return t;
    }

    // kv: token tensor (n, mk, 1, kv_dim); for self-attention pass x tokens.
    Tensor run(const Tensor& x, const Tensor& kv_raw, bool cache) {
        const int n = x.n(), hh = x.h(), ww = x.w();
        const int mq = hh * ww;
        Tensor normed = cache ? norm.forward(x) : norm.apply(x);
        Tensor qtok = tokens_of(normed);
        const Tensor& kv = self_attention ? qtok : kv_raw;
        const int mk = kv.h();
        Tensor q = cache ? wq.forward(qtok) : wq.apply(qtok);
        Tensor k = cache ? wk.forward(kv) : wk.apply(kv);
        Tensor v = cache ? wv.forward(kv) : wv.apply(kv);

        const int dh = channels / heads;
        const float scale = 1.0f / std::sqrt(float(dh));
        Tensor attn(n * heads, mq, 1, mk);
        Tensor ctx(n, mq, 1, channels);
        for (int in = 0; in < n; ++in)
            for (int hd = 0; hd < heads; ++hd) {
                // strided head views via Eigen maps with outer stride
                using StridedMap = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>,
                                              0, Eigen::OuterStride<>>;
                StridedMap Q(q.data() + (size_t(in) * mq) * channels + size_t(hd) * dh, mq, dh,
                             Eigen::OuterStride<>(channels));
                StridedMap K(k.data() + (size_t(in) * mk) * channels + size_t(hd) * dh, mk, dh,
                             Eigen::OuterStride<>(channels));
                StridedMap V(v.data() + (size_t(in) * mk) * channels + size_t(hd) * dh, mk, dh,
                             Eigen::OuterStride<>(channels));
                MatMap S(attn.data() + (size_t(in) * heads + hd) * size_t(mq) * mk, mq, mk);
                S.noalias() = (Q * K.transpose()) * scale;
            }
        Tensor attn_sm = softmax_rows(attn);
        for (int in = 0; in < n; ++in)
            for (int hd = 0; hd < heads; ++hd) {
                using StridedMap = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>,
                                              0, Eigen::OuterStride<>>;
                using StridedMapMut = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>,
                                                 0, Eigen::OuterStride<>>;
                ConstMatMap A(attn_sm.data() + (size_t(in) * heads + hd) * size_t(mq) * mk, mq, mk);
                StridedMap V(v.data() + (size_t(in) * mk) * channels + size_t(hd) * dh, mk, dh,
                             Eigen::OuterStride<>(channels));
                StridedMapMut C(ctx.data() + (size_t(in) * mq) * channels + size_t(hd) * dh, mq, dh,
                                Eigen::OuterStride<>(channels));
                C.noalias() = A * V;
            }
        Tensor out_tok = cache ? wo.forward(ctx) : wo.apply(ctx);
        Tensor y(n, hh, ww, channels);
        for (size_t i = 0; i < y.v.size(); ++i) y.v[i] = x.v[i] + out_tok.v[i];  // residual
        if (cache) {
            q_ = std::move(q);
            k_ = std::move(k);
            v_ = std::move(v);
            attn_ = std::move(attn_sm);
            normed_ = std::move(qtok);
            kv_in_ = self_attention ? Tensor() : kv_raw;
        }
        return y;
    }

    Tensor forward(const Tensor& x) {
        require(self_attention, "Attention: self-attention forward takes one input");
        return run(x, Tensor(), true);
    }
    Tensor forward(const Tensor& x, const Tensor& kv) { return run(x, kv, true); }
    Tensor apply(const Tensor& x) const {
        return const_cast<Attention*>(this)->run(x, Tensor(), false);
    }
    Tensor apply(const Tensor& x, const Tensor& kv) const { return const_cast<Attention*>(this)->run(x, kv, false); }

    // Returns gx; for cross-attention also accumulates into *gkv (token grads).
    Tensor backward(const Tensor& gy, Tensor* gkv = nullptr) {
        const int n = gy.n(), hh = gy.h(), ww = gy.w();
        const int mq = hh * ww;
        const int mk = self_attention ? mq : kv_in_.h();
        Tensor gy_tok(n, mq, 1, channels);
        gy_tok.v = gy.v;
        Tensor gctx = wo.backward(gy_tok);

        const int dh = channels / heads;
        const float scale = 1.0f / std::sqrt(float(dh));
        Tensor gq(n, mq, 1, channels), gk(n, mk, 1, channels), gv(n, mk, 1, channels);
        Tensor gattn(n * heads, mq, 1, mk);
        for (int in = 0; in < n; ++in)
            for (int hd = 0; hd < heads; ++hd) {
                using StridedMap = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>,
                                              0, Eigen::OuterStride<>>;
                using StridedMapMut = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>,
                                                 0, Eigen::OuterStride<>>;
                ConstMatMap A(attn_.data() + (size_t(in) * heads + hd) * size_t(mq) * mk, mq, mk);
                StridedMap GC(gctx.data() + (size_t(in) * mq) * channels + size_t(hd) * dh, mq, dh,
                              Eigen::OuterStride<>(channels));
                StridedMap V(v_.data() + (size_t(in) * mk) * channels + size_t(hd) * dh, mk, dh,
                              Eigen::OuterStride<>(channels));
                MatMap GA(gattn.data() + (size_t(in) * heads + hd) * size_t(mq) * mk, mq, mk);
                GA.noalias() = GC * V.transpose();
                StridedMapMut GV(gv.data() + (size_t(in) * mk) * channels + size_t(hd) * dh, mk, dh,
                                 Eigen::OuterStride<>(channels));
                GV.noalias() = A.transpose() * GC;
            }
        Tensor gscores = softmax_rows_backward(attn_, gattn);
        for (int in = 0; in < n; ++in)
            for (int hd = 0; hd < heads; ++hd) {
                using StridedMap = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>,
                                              0, Eigen::OuterStride<>>;
                using StridedMapMut = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>,
                                                 0, Eigen::OuterStride<>>;
                ConstMatMap GS(gscores.data() + (size_t(in) * heads + hd) * size_t(mq) * mk, mq, mk);
                StridedMap Q(q_.data() + (size_t(in) * mq) * channels + size_t(hd) * dh, mq, dh,
                             Eigen::OuterStride<>(channels));
                StridedMap K(k_.data() + (size_t(in) * mk) * channels + size_t(hd) * dh, mk, dh,
                             Eigen::OuterStride<>(channels));
                StridedMapMut GQ(gq.data() + (size_t(in) * mq) * channels + size_t(hd) * dh, mq, dh,
                                 Eigen::OuterStride<>(channels));
                StridedMapMut GK(gk.data() + (size_t(in) * mk) * channels + size_t(hd) * dh, mk, dh,
                                 Eigen::OuterStride<>(channels));
                GQ.noalias() = (GS * K) * scale;
                GK.noalias() = (GS.transpose() * Q) * scale;
            }
        Tensor g_qtok = wq.backward(gq);
        Tensor g_kv = wk.backward(gk);
        {
            Tensor g_kv2 = wv.backward(gv);
            g_kv += g_kv2;
        }
        if (self_attention) {
            g_qtok += g_kv;
        } else {
            require(gkv != nullptr, "Attention: cross-attention backward needs a context grad sink");
            *gkv += g_kv;
        }
        Tensor g_norm(n, hh, ww, channels);
        g_norm.v = g_qtok.v;
        Tensor gx = norm.backward(g_norm);
        for (size_t i = 0; i < gx.v.size(); ++i) gx.v[i] += gy.v[i];  // residual path
        return gx;
    }

    void visit(const std::string& prefix, const ParamVisitor& f) {
        norm.visit(prefix + ".norm", f);
        wq.visit(prefix + ".q", f);
        wk.visit(prefix + ".k", f);
        wv.visit(prefix + ".v", f);
        wo.visit(prefix + ".proj", f);
    }
};

// ---------------------------------------------------------------------------
// Nearest-neighbour 2x upsample

struct Upsample2x {
    std::array<int, 4> in_shape_{};
    Tensor apply(const Tensor& x) const {
        Tensor y(x.n(), x.h() * 2, x.w() * 2, x.c());
        for (int n = 0; n < x.n(); ++n)
            for (int iy = 0; iy < y.h(); ++iy)
                for (int ix = 0; ix < y.w(); ++ix)
                    for (int c = 0; c < x.c(); ++c) y.at(n, iy, ix, c) = x.at(n, iy / 2, ix / 2, c);
        return y;
    }
    Tensor forward(const Tensor& x) {
        in_shape_ = x.shape;
        return apply(x);
    }
    Tensor backward(const Tensor& gy) const {
        Tensor gx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
        for (int n = 0; n < gy.n(); ++n)
            for (int iy = 0; iy < gy.h(); ++iy)
                for (int ix = 0; ix < gy.w(); ++ix)
                    for (int c = 0; c < gy.c(); ++c) gx.at(n, iy / 2, ix / 2, c) += gy.at(n, iy, ix, c);
        return gx;
    }
};

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require(a.n() == b.n() && a.h() == b.h() && a.w() == b.w(), "concat: spatial mismatch");
    Tensor y(a.n(), a.h(), a.w(), a.c() + b.c());
    for (int n = 0; n < a.n(); ++n)
        for (int iy = 0; iy < a.h(); ++iy)
            for (int ix = 0; ix < a.w(); ++ix) {
                std::memcpy(&y.at(n, iy, ix, 0), &a.at(n, iy, ix, 0), sizeof(float) * size_t(a.c()));
                std::memcpy(&y.at(n, iy, ix, a.c()), &b.at(n, iy, ix, 0), sizeof(float) * size_t(b.c()));
            }
    return y;
}

inline std::pair<Tensor, Tensor> split_channels(const Tensor& y, int ca) {
    const int cb = y.c() - ca;
    require(cb >= 0, "split: bad channel count");
    Tensor a(y.n(), y.h(), y.w(), ca), b(y.n(), y.h(), y.w(), cb);
    for (int n = 0; n < y.n(); ++n)
        for (int iy = 0; iy < y.h(); ++iy)
            for (int ix = 0; ix < y.w(); ++ix) {
                std::memcpy(&a.at(n, iy, ix, 0), &y.at(n, iy, ix, 0), sizeof(float) * size_t(ca));
                std::memcpy(&b.at(n, iy, ix, 0), &y.at(n, iy, ix, ca), sizeof(float) * size_t(cb));
            }
    return {a, b};
}

// ---------------------------------------------------------------------------
// Residual block, optionally conditioned on a timestep embedding vector

struct ResBlock {
    int cin = 0, cout = 0;
    GroupNorm gn1, gn2;
    SiLU act1, act2;
    Conv2d conv1, conv2;
    Linear temb_proj;  // temb -> cout, added per channel
    Conv2d skip;       // 1x1 when cin != cout
    bool has_temb = false, has_skip = false;
    SiLU temb_act;
    Tensor x_in_;

    ResBlock() = default;
    ResBlock(int cin_, int cout_, int temb_dim, Rng& rng)
        : cin(cin_),
          cout(cout_),
          gn1(cin_),
          gn2(cout_),
          conv1(cin_, cout_, 3, 1, 1, rng),
          conv2(cout_, cout_, 3, 1, 1, rng),
          has_temb(temb_dim > 0),
          has_skip(cin_ != cout_) {
        if (has_temb) temb_proj = Linear(temb_dim, cout_, rng);
        if (has_skip) skip = Conv2d(cin_, cout_, 1, 1, 0, rng);
    }

    // temb: (1, 1, 1, temb_dim) broadcast over batch, or per-item (n, 1, 1, temb_dim)
    Tensor run(const Tensor& x, const Tensor* temb, bool cache) {
        if (cache) x_in_ = x;
        Tensor h = cache ? conv1.forward(act1.run(gn1.forward(x), true)) : conv1.apply(act1.apply(gn1.apply(x)));
        if (has_temb) {
            require(temb != nullptr, "ResBlock: missing timestep embedding");
            Tensor t = cache ? temb_proj.forward(temb_act.run(*temb, true)) : temb_proj.apply(temb_act.apply(*temb));
            require(t.n() == 1 || t.n() == x.n(), "ResBlock: temb batch mismatch");
            for (int n = 0; n < h.n(); ++n)
                for (int iy = 0; iy < h.h(); ++iy)
                    for (int ix = 0; ix < h.w(); ++ix)
                        for (int c = 0; c < cout; ++c) h.at(n, iy, ix, c) += t.at(t.n() == 1 ? 0 : n, 0, 0, c);
        }
        h = cache ? conv2.forward(act2.run(gn2.forward(h), true)) : conv2.apply(act2.apply(gn2.apply(h)));
        Tensor sk = has_skip ? (cache ? skip.forward(x) : skip.apply(x)) : x;
        for (size_t i = 0; i < h.v.size(); ++i) h.v[i] += sk.v[i];
        return h;
    }
    Tensor forward(const Tensor& x, const Tensor* temb = nullptr) { return run(x, temb, true); }
    Tensor apply(const Tensor& x, const Tensor* temb = nullptr) const {
        return const_cast<ResBlock*>(this)->run(x, temb, false);
    }

    // gtemb (optional sink, shape (n|1,1,1,temb_dim)) accumulates embedding grads.
    Tensor backward(const Tensor& gy, Tensor* gtemb = nullptr) {
        Tensor gh = conv2.backward(gy);
        gh = gn2.backward(act2.backward(gh));
        if (has_temb) {
            // grad into the added per-channel embedding: sum over spatial dims
            const int n = gh.n();
            Tensor gt(n, 1, 1, cout);
            for (int in = 0; in < n; ++in)
                for (int iy = 0; iy < gh.h(); ++iy)
                    for (int ix = 0; ix < gh.w(); ++ix)
                        for (int c = 0; c < cout; ++c) gt.at(in, 0, 0, c) += gh.at(in, iy, ix, c);
            Tensor gtin = temb_act.backward(temb_proj.backward(gt));
            if (gtemb != nullptr) {
                if (gtemb->n() == gtin.n()) {
                    *gtemb += gtin;
                } else {  // broadcast case: reduce over batch
                    for (int in = 0; in < gtin.n(); ++in)
                        for (int c = 0; c < gtin.c(); ++c) gtemb->at(0, 0, 0, c) += gtin.at(in, 0, 0, c);
                }
            }
        }
        Tensor gx = gn1.backward(act1.backward(conv1.backward(gh)));
        if (has_skip) {
            gx += skip.backward(gy);
        } else {
            gx += gy;
        }
        return gx;
    }

    void visit(const std::string& prefix, const ParamVisitor& f) {
        gn1.visit(prefix + ".norm1", f);
        conv1.visit(prefix + ".conv1", f);
        gn2.visit(prefix + ".norm2", f);
        conv2.visit(prefix + ".conv2", f);
        if (has_temb) temb_proj.visit(prefix + ".temb", f);
        if (has_skip) skip.visit(prefix + ".skip", f);
    }
};

// ---------------------------------------------------------------------------
// Adam with bias correction

struct Adam {
    double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t t = 0;
    std::vector<Tensor> m_, v_;

    void step(std::vector<Param*>& params) {
        if (m_.empty()) {
            for (auto* p : params) {
                m_.push_back(Tensor::zeros_like(p->w));
                v_.push_back(Tensor::zeros_like(p->w));
            }
        }
        require(m_.size() == params.size(), "Adam: parameter set changed between steps");
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, double(t));
        const double bc2 = 1.0 - std::pow(beta2, double(t));
        for (size_t i = 0; i < params.size(); ++i) {
            Param& p = *params[i];
            for (size_t j = 0; j < p.w.v.size(); ++j) {
                const double g = p.g.v[j];
                m_[i].v[j] = float(beta1 * m_[i].v[j] + (1.0 - beta1) * g);
                v_[i].v[j] = float(beta2 * v_[i].v[j] + (1.0 - beta2) * g * g);
                const double mhat = m_[i].v[j] / bc1;
                const double vhat = v_[i].v[j] / bc2;
                p.w.v[j] -= float(lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }
};

inline void zero_grads(std::vector<Param*>& params) {
    for (auto* p : params)
        for (auto& g : p->g.v) g = 0.0f;
}

}  // namespace ctdn::nn
