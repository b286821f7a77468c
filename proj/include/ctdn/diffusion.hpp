#pragma once

// Conditional latent diffusion: sinusoidal timestep embeddings, a residual
// U-Net with self- and cross-attention at its deepest level, the
// noise-prediction MSE objective, and the two reverse samplers (deterministic
// quick sampler over a timestep subsequence; stochastic ancestral sampler
// over every step).
//
// The cosine schedule's t = T row has zero SNR (alpha_bar ~ 1e-33), so both
// samplers treat rows with sched.zero_snr(t) as the pure-noise boundary and
// use the zhat0 -> 0 limit of their update there; without the guard the
// first update amplifies rounding by 1/sqrt(alpha_bar_T) ~ 1e16.

#include <chrono>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ctdn/autoencoder.hpp"
#include "ctdn/errors.hpp"
#include "ctdn/nn.hpp"
#include "ctdn/rng.hpp"
#include "ctdn/schedule.hpp"
#include "ctdn/tensor.hpp"

namespace ctdn {

// first dim/2 entries sin(t*w_i), last dim/2 entries cos(t*w_i),
// w_i = 10000^(-2i/dim)
inline Tensor timestep_embedding(int t, int dim) {
    require(dim >= 2 && dim % 2 == 0, "timestep embedding dimension must be even");
    require(t >= 0, "timestep must be nonnegative");
    Tensor e(1, 1, 1, dim);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double w = std::pow(10000.0, -2.0 * double(i) / double(dim));
        e.v[size_t(i)] = float(std::sin(double(t) * w));
        e.v[size_t(half + i)] = float(std::cos(double(t) * w));
    }
    return e;
}

// ---------------------------------------------------------------------------
// Conditioning

enum class ConditionSource { LdctLatent, None };

struct ConditioningContext {
    Tensor tokens;  // (n, rows*cols, 1, latent_channels); empty when source == None
    int rows = 0, cols = 0;
    ConditionSource source = ConditionSource::None;
};

// Fixed 2-D sinusoidal positional encoding over a token grid; dim % 4 == 0.
// Image-to-image cross-attention needs token positions to align spatially.
inline Tensor posenc_2d(int rows, int cols, int dim) {
    require(dim % 4 == 0, "positional encoding dimension must be divisible by 4");
    Tensor e(1, rows * cols, 1, dim);
    const int quarter = dim / 4;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            float* row = &e.at(0, r * cols + c, 0, 0);
            for (int k = 0; k < quarter; ++k) {
                const double w = std::pow(10000.0, -4.0 * double(k) / double(dim));
                row[k] = float(std::sin(double(r) * w));
                row[quarter + k] = float(std::cos(double(r) * w));
                row[2 * quarter + k] = float(std::sin(double(c) * w));
                row[3 * quarter + k] = float(std::cos(double(c) * w));
            }
        }
    return e;
}

struct FrozenAutoencoder {
    Autoencoder ae;
    bool frozen = true;
};

// Posterior-mean latent of the low-dose input, flattened to tokens.
inline ConditioningContext derive_condition(const Tensor& x_ld, const FrozenAutoencoder& enc) {
    if (!enc.frozen) throw ConfigError("derive_condition: encoder must be frozen for the second training stage");
    const auto dist = enc.ae.encode(x_ld);
    ConditioningContext ctx;
    ctx.source = ConditionSource::LdctLatent;
    ctx.rows = dist.mu.h();
    ctx.cols = dist.mu.w();
    ctx.tokens = Tensor(dist.mu.n(), dist.mu.h() * dist.mu.w(), 1, dist.mu.c());
    ctx.tokens.v = dist.mu.v;
    return ctx;
}

// ---------------------------------------------------------------------------
// Denoiser configuration and network

struct DenoiserConfig {
    int latent_channels = 4;
    int base_width = 32;
    std::vector<int> channel_mults{1, 2};
    int res_blocks = 1;
    int heads = 2;
    int temb_dim = 32;
    int ctx_dim = 32;  // context width after the token projection
    std::string mode = "conditional";  // conditional | prior

    int levels() const { return int(channel_mults.size()); }
    void validate() const {
        require(temb_dim >= 2 && temb_dim % 2 == 0, "temb_dim must be even");
        require(!channel_mults.empty(), "need at least one level");
        require(base_width % heads == 0, "heads must divide the deepest width");
        require(res_blocks >= 1 && base_width >= 4 && latent_channels >= 1, "degenerate denoiser config");
        require(mode == "conditional" || mode == "prior", "mode must be conditional or prior");
    }
};

namespace detail {

struct DenoiserNet {
    DenoiserConfig cfg;
    nn::Linear temb_mlp1, temb_mlp2;
    nn::SiLU temb_act;
    nn::Linear ctx_proj;   // latent channels -> ctx_dim
    nn::Param null_token;  // (1,1,1,ctx_dim) used when no condition is given
    nn::Conv2d conv_in, conv_out;
    nn::GroupNorm norm_out;
    nn::SiLU act_out;
    std::vector<nn::ResBlock> down_blocks;  // res_blocks per level
    std::vector<nn::Conv2d> downs;
    nn::ResBlock mid1, mid2;
    nn::Attention mid_attn, mid_cross;
    std::vector<nn::Conv2d> up_convs;
    std::vector<nn::Upsample2x> ups;
    std::vector<nn::ResBlock> up_blocks;
    // per-call training caches
    std::vector<Tensor> skips_;
    Tensor ctx_tokens_in_;
    bool used_null_ = false;

    DenoiserNet() = default;
    DenoiserNet(const DenoiserConfig& c, Rng& rng) : cfg(c) {
        cfg.validate();
        const int L = cfg.levels();
        std::vector<int> ch;
        for (int m : cfg.channel_mults) ch.push_back(cfg.base_width * m);
        const int tdim = cfg.temb_dim, tmlp = cfg.temb_dim * 2;
        temb_mlp1 = nn::Linear(tdim, tmlp, rng);
        temb_mlp2 = nn::Linear(tmlp, tmlp, rng);
        ctx_proj = nn::Linear(cfg.latent_channels, cfg.ctx_dim, rng);
        null_token.init(1, 1, 1, cfg.ctx_dim);
        nn::fill_normal_scaled(null_token.w, rng, 0.02);

        conv_in = nn::Conv2d(cfg.latent_channels, ch[0], 3, 1, 1, rng);
        int cur = ch[0];
        for (int i = 0; i < L; ++i) {
            for (int b = 0; b < cfg.res_blocks; ++b) {
                down_blocks.emplace_back(cur, ch[size_t(i)], tmlp, rng);
                cur = ch[size_t(i)];
            }
            if (i + 1 < L) downs.emplace_back(cur, ch[size_t(i) + 1], 3, 2, 1, rng);
            if (i + 1 < L) cur = ch[size_t(i) + 1];
        }
        mid1 = nn::ResBlock(cur, cur, tmlp, rng);
        mid_attn = nn::Attention(cur, cur, cfg.heads, true, rng);
        mid_cross = nn::Attention(cur, cfg.ctx_dim, cfg.heads, false, rng);
        mid2 = nn::ResBlock(cur, cur, tmlp, rng);
        for (int i = L - 2; i >= 0; --i) {
            ups.emplace_back();
            up_convs.emplace_back(cur, ch[size_t(i)], 3, 1, 1, rng);
            cur = ch[size_t(i)];
            for (int b = 0; b < cfg.res_blocks; ++b) {
                up_blocks.emplace_back(b == 0 ? cur * 2 : cur, cur, tmlp, rng);  // first block eats the skip concat
            }
        }
        norm_out = nn::GroupNorm(cur);
        conv_out = nn::Conv2d(cur, cfg.latent_channels, 3, 1, 1, rng);
    }

    // temb_raw: (n|1, 1, 1, temb_dim); ctx tokens (n|1, m, 1, latent_channels) or None source.
    Tensor run(const Tensor& z, const Tensor& temb_raw, const ConditioningContext& ctx, bool train) {
        const int L = cfg.levels();
        Tensor temb = train ? temb_mlp2.forward(temb_act.run(temb_mlp1.forward(temb_raw), true))
                            : temb_mlp2.apply(temb_act.apply(temb_mlp1.apply(temb_raw)));

        Tensor ctx_tok;
        const bool use_null = (ctx.source == ConditionSource::None);
        if (use_null) {
            ctx_tok = Tensor(z.n(), 1, 1, cfg.ctx_dim);
            for (int in = 0; in < z.n(); ++in)
                for (int c = 0; c < cfg.ctx_dim; ++c) ctx_tok.at(in, 0, 0, c) = null_token.w.v[size_t(c)];
        } else {
            require(ctx.tokens.n() == z.n() || ctx.tokens.n() == 1, "condition batch mismatch");
            require(ctx.rows * ctx.cols == ctx.tokens.h(), "condition token grid dims inconsistent");
            Tensor tokens = ctx.tokens;
            if (tokens.n() == 1 && z.n() > 1) {  // broadcast across the batch
                Tensor rep(z.n(), tokens.h(), 1, tokens.c());
                for (int in = 0; in < z.n(); ++in)
                    std::copy(tokens.v.begin(), tokens.v.end(), rep.v.begin() + size_t(in) * tokens.v.size());
                tokens = std::move(rep);
            }
            ctx_tok = train ? ctx_proj.forward(tokens) : ctx_proj.apply(tokens);
            // fixed positional encoding: spatial alignment for cross-attention
            const Tensor pe = posenc_2d(ctx.rows, ctx.cols, cfg.ctx_dim);
            for (int in = 0; in < ctx_tok.n(); ++in)
                for (size_t i = 0; i < pe.v.size(); ++i) ctx_tok.v[size_t(in) * pe.v.size() + i] += pe.v[i];
        }
        if (train) {
            used_null_ = use_null;
            ctx_tokens_in_ = ctx_tok;
            skips_.clear();
        }

        Tensor h = train ? conv_in.forward(z) : conv_in.apply(z);
        size_t bi = 0;
        std::vector<Tensor> skips;
        for (int i = 0; i < L; ++i) {
            for (int b = 0; b < cfg.res_blocks; ++b, ++bi)
                h = train ? down_blocks[bi].forward(h, &temb) : down_blocks[bi].apply(h, &temb);
            if (i + 1 < L) {
                skips.push_back(h);
                h = train ? downs[size_t(i)].forward(h) : downs[size_t(i)].apply(h);
            }
        }
        h = train ? mid1.forward(h, &temb) : mid1.apply(h, &temb);
        {
            // give the transformer queries their grid positions; additive
            // constant, so the backward pass is unchanged
            const Tensor pe = posenc_2d(h.h(), h.w(), h.c());
            for (int in = 0; in < h.n(); ++in)
                for (size_t i = 0; i < pe.v.size(); ++i) h.v[size_t(in) * pe.v.size() + i] += pe.v[i];
        }
        h = train ? mid_attn.forward(h) : mid_attn.apply(h);
        h = train ? mid_cross.forward(h, ctx_tok) : mid_cross.apply(h, ctx_tok);
        h = train ? mid2.forward(h, &temb) : mid2.apply(h, &temb);
        size_t ubi = 0;
        for (int i = L - 2; i >= 0; --i) {
            const size_t ui = size_t(L - 2 - i);
            h = train ? ups[ui].forward(h) : ups[ui].apply(h);
            h = train ? up_convs[ui].forward(h) : up_convs[ui].apply(h);
            h = nn::concat_channels(h, skips[size_t(i)]);
            for (int b = 0; b < cfg.res_blocks; ++b, ++ubi)
                h = train ? up_blocks[ubi].forward(h, &temb) : up_blocks[ubi].apply(h, &temb);
        }
        if (train) skips_ = std::move(skips);
        h = train ? conv_out.forward(act_out.run(norm_out.forward(h), true))
                  : conv_out.apply(act_out.apply(norm_out.apply(h)));
        return h;
    }

    Tensor backward(const Tensor& gy, Tensor* gtemb_raw_out = nullptr) {
        const int L = cfg.levels();
        Tensor g = norm_out.backward(act_out.backward(conv_out.backward(gy)));
        Tensor gtemb;  // accumulated grad on the mlp output embedding
        auto ensure_gtemb = [&](const nn::ResBlock& rb, int n) {
            (void)rb;
            if (gtemb.size() == 0) gtemb = Tensor(n, 1, 1, cfg.temb_dim * 2);
        };
        std::vector<Tensor> gskips(size_t(std::max(0, L - 1)));
        size_t ubi = up_blocks.size();
        for (int i = 0; i < L - 1; ++i) {
            const size_t ui = size_t(L - 2 - i);
            for (int b = cfg.res_blocks - 1; b >= 0; --b) {
                ensure_gtemb(up_blocks[ubi - 1], g.n());
                g = up_blocks[--ubi].backward(g, &gtemb);
            }
            auto [gh, gskip] = nn::split_channels(g, g.c() / 2);
            gskips[size_t(i)] = std::move(gskip);
            g = ups[ui].backward(up_convs[ui].backward(gh));
        }
        ensure_gtemb(mid2, g.n());
        g = mid2.backward(g, &gtemb);
        Tensor gctx = Tensor::zeros_like(ctx_tokens_in_);
        g = mid_cross.backward(g, &gctx);
        g = mid_attn.backward(g);
        g = mid1.backward(g, &gtemb);
        size_t bi = down_blocks.size();
        for (int i = L - 1; i >= 0; --i) {
            if (i + 1 < L) {
                g = downs[size_t(i)].backward(g);
                g += gskips[size_t(i)];
            }
            for (int b = 0; b < cfg.res_blocks; ++b) g = down_blocks[--bi].backward(g, &gtemb);
        }
        Tensor gz = conv_in.backward(g);

        if (used_null_) {
            for (int in = 0; in < gctx.n(); ++in)
                for (int c = 0; c < cfg.ctx_dim; ++c) null_token.g.v[size_t(c)] += gctx.at(in, 0, 0, c);
        } else {
            ctx_proj.backward(gctx);  // token grads stop at the frozen encoder output
        }
        Tensor gtemb_raw = temb_mlp1.backward(temb_act.backward(temb_mlp2.backward(gtemb)));
        if (gtemb_raw_out != nullptr) *gtemb_raw_out = std::move(gtemb_raw);
        return gz;
    }

    void visit(const std::string& p, const nn::ParamVisitor& f) {
        temb_mlp1.visit(p + ".temb1", f);
        temb_mlp2.visit(p + ".temb2", f);
        ctx_proj.visit(p + ".ctx_proj", f);
        f(p + ".null_token", null_token);
        conv_in.visit(p + ".conv_in", f);
        for (size_t i = 0; i < down_blocks.size(); ++i) down_blocks[i].visit(p + ".down_block" + std::to_string(i), f);
        for (size_t i = 0; i < downs.size(); ++i) downs[i].visit(p + ".down" + std::to_string(i), f);
        mid1.visit(p + ".mid1", f);
        mid_attn.visit(p + ".mid_attn", f);
        mid_cross.visit(p + ".mid_cross", f);
        mid2.visit(p + ".mid2", f);
        for (size_t i = 0; i < up_convs.size(); ++i) up_convs[i].visit(p + ".up" + std::to_string(i), f);
        for (size_t i = 0; i < up_blocks.size(); ++i) up_blocks[i].visit(p + ".up_block" + std::to_string(i), f);
        norm_out.visit(p + ".norm_out", f);
        conv_out.visit(p + ".conv_out", f);
    }
};

}  // namespace detail

struct LdmModel {
    DenoiserConfig cfg;
    detail::DenoiserNet net;
    double latent_std = 1.0;  // diffusion runs on latents scaled by 1/latent_std
    int T = 1000;
    double eps_sched = 0.008;

    LdmModel() = default;
    LdmModel(const DenoiserConfig& c, int T_, double eps_, uint64_t seed) : cfg(c), T(T_), eps_sched(eps_) {
        Rng rng(seed);
        net = detail::DenoiserNet(cfg, rng);
    }
    void visit_params(const nn::ParamVisitor& f) { net.visit("denoiser", f); }
    std::vector<nn::Param*> params() {
        std::vector<nn::Param*> ps;
        visit_params([&](const std::string&, nn::Param& p) { ps.push_back(&p); });
        return ps;
    }
};

// Per-item timesteps stacked into one embedding tensor.
inline Tensor batch_timestep_embedding(const std::vector<int>& ts, int dim) {
    Tensor out(int(ts.size()), 1, 1, dim);
    for (size_t i = 0; i < ts.size(); ++i) {
        const Tensor e = timestep_embedding(ts[i], dim);
        std::copy(e.v.begin(), e.v.end(), out.v.begin() + i * size_t(dim));
    }
    return out;
}

// eps_theta(z_t, t, c); deterministic, shape-preserving.
inline Tensor predict_noise(const LdmModel& model, const Tensor& z_t, int t, const ConditioningContext& c) {
    require(z_t.c() == model.cfg.latent_channels, "predict_noise: latent channel mismatch " + z_t.shape_str());
    require(t >= 0, "predict_noise: bad timestep");
    const Tensor temb = timestep_embedding(t, model.cfg.temb_dim);
    return const_cast<detail::DenoiserNet&>(model.net).run(z_t, temb, c, false);
}

// Mean squared error over all elements, with d(loss)/d(pred).
template <class S>
double mse_mean(const Tens<S>& pred, const Tens<S>& target, Tens<S>* gpred = nullptr) {
    require(pred.same_shape(target), "mse: shape mismatch");
    const double inv_n = 1.0 / double(pred.v.size());
    double acc = 0.0;
    for (size_t i = 0; i < pred.v.size(); ++i) {
        const double d = double(pred.v[i]) - double(target.v[i]);
        acc += d * d;
        if (gpred != nullptr) gpred->v[i] += S(2.0 * d * inv_n);
    }
    return acc * inv_n;
}

// Noise-prediction objective with a pluggable predictor; the scalar template
// backs the double-precision finite-difference oracle.
template <class S, class Pred>
double ldm_training_loss_with(Pred&& predictor, const Tens<S>& z0, int t, const Tens<S>& noise,
                              const NoiseSchedule& sched) {
    const Tens<S> z_t = forward_diffuse(z0, t, noise, sched);
    const Tens<S> pred = predictor(z_t, t);
    return mse_mean(pred, noise);
}

inline double ldm_training_loss(const LdmModel& model, const Tensor& z0, int t, const Tensor& noise,
                                const ConditioningContext& c, const NoiseSchedule& sched) {
    return ldm_training_loss_with([&](const Tensor& z_t, int tt) { return predict_noise(model, z_t, tt, c); }, z0, t,
                                  noise, sched);
}

// ---------------------------------------------------------------------------
// Training

struct LdmTrainConfig {
    DenoiserConfig arch;
    int T = 1000;
    double eps_sched = 0.008;
    double lr = 1e-4;
    int64_t steps = 2000;
    int batch = 8;
};

struct LatentDataset {
    // posterior-mean latents of the clean images; conditions are the matching
    // low-dose latents (empty for prior mode / unconditional training)
    std::vector<Tensor> z0;
    std::vector<Tensor> cond;  // token tensors (1, rows*cols, 1, c); may be empty
    int cond_rows = 0, cond_cols = 0;
};

struct LdmTrainResult {
    LdmModel model;
    std::vector<double> loss_history;
    NoiseSchedule sched;
};

inline LdmTrainResult train_ldm(const LatentDataset& data, const LdmTrainConfig& cfg, uint64_t seed) {
    require(!data.z0.empty(), "train_ldm: empty latent dataset");
    cfg.arch.validate();
    const bool conditional = cfg.arch.mode == "conditional";
    if (conditional)
        require(data.cond.size() == data.z0.size(), "train_ldm: conditional mode needs one condition per latent");

    LdmTrainResult res;
    res.sched = build_cosine_schedule(cfg.T, cfg.eps_sched);
    res.model = LdmModel(cfg.arch, cfg.T, cfg.eps_sched, seed);

    // Scale latents to unit std so they mix coherently with N(0,1) noise.
    {
        double sum = 0, sum2 = 0;
        size_t n = 0;
        for (const auto& z : data.z0) {
            for (float v : z.v) {
                sum += v;
                sum2 += double(v) * v;
            }
            n += z.v.size();
        }
        const double mean = sum / double(n);
        const double var = std::max(1e-12, sum2 / double(n) - mean * mean);
        res.model.latent_std = std::sqrt(var);
    }
    const float inv_std = float(1.0 / res.model.latent_std);

    auto params = res.model.params();
    nn::Adam opt;
    opt.lr = cfg.lr;
    Rng order_rng(seed + 0xd1f0001ULL);
    Rng noise_rng(seed + 0xd1f0002ULL);

    std::vector<size_t> order(data.z0.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = order.size();

    const auto& shape = data.z0[0].shape;
    for (const auto& z : data.z0) require(z.shape == shape, "train_ldm: inhomogeneous latent shapes");

    for (int64_t step = 0; step < cfg.steps; ++step) {
        nn::zero_grads(params);
        const int B = cfg.batch;
        Tensor z0(B, shape[1], shape[2], shape[3]);
        ConditioningContext ctx;
        if (conditional) {
            const auto& cs = data.cond[0].shape;
            require(data.cond_rows * data.cond_cols == cs[1] * cs[2], "latent dataset condition grid dims missing");
            ctx.source = ConditionSource::LdctLatent;
            ctx.rows = data.cond_rows;
            ctx.cols = data.cond_cols;
            ctx.tokens = Tensor(B, cs[1] * cs[2], 1, cs[3]);
        }
        std::vector<int> ts(static_cast<size_t>(B));
        Tensor noise(B, shape[1], shape[2], shape[3]);
        for (int b = 0; b < B; ++b) {
            if (cursor == order.size()) {
                order_rng.shuffle(order);
                cursor = 0;
            }
            const size_t idx = order[cursor++];
            const auto& zi = data.z0[idx];
            for (size_t i = 0; i < zi.v.size(); ++i) z0.v[size_t(b) * zi.v.size() + i] = zi.v[i] * inv_std;
            if (conditional) {
                const auto& ci = data.cond[idx];
                for (size_t i = 0; i < ci.v.size(); ++i)
                    ctx.tokens.v[size_t(b) * ci.v.size() + i] = ci.v[i] * inv_std;
            }
            ts[size_t(b)] = 1 + int(order_rng.below(uint64_t(cfg.T)));
        }
        noise_rng.fill_normal(noise);

        // forward_diffuse with per-item t
        Tensor z_t = Tensor::zeros_like(z0);
        for (int b = 0; b < B; ++b) {
            const double ab = res.sched.abar(ts[size_t(b)]);
            const float sa = float(std::sqrt(ab)), sb = float(std::sqrt(1.0 - ab));
            const size_t stride = z0.v.size() / size_t(B);
            for (size_t i = 0; i < stride; ++i) {
                const size_t j = size_t(b) * stride + i;
                z_t.v[j] = sa * z0.v[j] + sb * noise.v[j];
            }
        }
        const Tensor temb = batch_timestep_embedding(ts, cfg.arch.temb_dim);
        Tensor pred = res.model.net.run(z_t, temb, ctx, true);
        Tensor gpred = Tensor::zeros_like(pred);
        const double loss = mse_mean(pred, noise, &gpred);
        if (!std::isfinite(loss)) throw NumericError("ldm loss non-finite at step " + std::to_string(step));
        res.model.net.backward(gpred);
        opt.step(params);
        res.loss_history.push_back(loss);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Samplers

struct SamplerSpec {
    std::string kind = "ddim";  // ddim | ddpm
    int num_steps = 30;         // ddim only; ddpm always runs all T steps
    uint64_t seed = 0;          // z_T draw (ddim) / ancestral noise (ddpm)
    double t_start_frac = 1.0;  // prior mode starts the chain below T
    void validate() const {
        require(kind == "ddim" || kind == "ddpm", "sampler kind must be ddim or ddpm");
        require(num_steps >= 1, "sampler needs at least one step");
        require(t_start_frac > 0.0 && t_start_frac <= 1.0, "t_start fraction in (0, 1]");
    }
};

struct SampleTraceRow {
    int t;
    double mean_abs;
    double elapsed_s;
};

using SampleTrace = std::vector<SampleTraceRow>;

// Deterministic reverse chain along a strictly decreasing subsequence ending
// with the implicit t_prev = 0. Pure function of (predictor, z_init, sub).
template <class PredFn>
Tensor reverse_ddim_chain(PredFn&& predictor, const NoiseSchedule& sched, const TimestepSubsequence& sub,
                          const Tensor& z_init, SampleTrace* trace = nullptr) {
    require(!sub.steps.empty(), "ddim chain: empty subsequence");
    Tensor z = z_init;
    const auto begin = std::chrono::steady_clock::now();
    for (size_t i = 0; i < sub.steps.size(); ++i) {
        const int t = sub.steps[i];
        const int t_prev = (i + 1 < sub.steps.size()) ? sub.steps[i + 1] : 0;
        const Tensor eps = predictor(z, t);
        if (sched.zero_snr(t)) {
            // zero-SNR boundary: zhat0 -> 0 limit of the update
            const float sbp = float(std::sqrt(1.0 - sched.abar(t_prev)));
            for (size_t j = 0; j < z.v.size(); ++j) z.v[j] = sbp * eps.v[j];
        } else {
            z = ddim_step(z, eps, t, t_prev, sched);
        }
        if (trace != nullptr)
            trace->push_back({t, mean_abs(z),
                              std::chrono::duration<double>(std::chrono::steady_clock::now() - begin).count()});
    }
    return z;
}

inline Tensor sample_ddim(const LdmModel& model, const ConditioningContext& ctx, const NoiseSchedule& sched,
                          const TimestepSubsequence& sub, const Tensor& z_init, SampleTrace* trace = nullptr) {
    return reverse_ddim_chain([&](const Tensor& z, int t) { return predict_noise(model, z, t, ctx); }, sched, sub,
                              z_init, trace);
}

// Stochastic ancestral sampling over every step from t_start down to 1 with
// seeded noise; deterministic given the generator state.
inline Tensor sample_ddpm(const LdmModel& model, const ConditioningContext& ctx, const NoiseSchedule& sched,
                          const Tensor& z_init, Rng& rng, SampleTrace* trace = nullptr, int t_start = -1) {
    if (t_start < 0) t_start = sched.T;
    require(t_start >= 1 && t_start <= sched.T, "sample_ddpm: bad starting step");
    Tensor z = z_init;
    const auto begin = std::chrono::steady_clock::now();
    for (int t = t_start; t >= 1; --t) {
        const Tensor eps = predict_noise(model, z, t, ctx);
        Tensor noise = Tensor::zeros_like(z);
        if (t > 1) rng.fill_normal(noise);
        if (sched.zero_snr(t)) {
            // zero-SNR boundary: the posterior collapses to fresh noise
            const float sb = float(std::sqrt(sched.beta_at(t)));
            for (size_t j = 0; j < z.v.size(); ++j) z.v[j] = sb * noise.v[j];
        } else {
            z = ddpm_step(z, eps, t, sched, noise);
        }
        if (trace != nullptr && (t % 100 == 0 || t == 1))
            trace->push_back({t, mean_abs(z),
                              std::chrono::duration<double>(std::chrono::steady_clock::now() - begin).count()});
    }
    return z;
}

// ---------------------------------------------------------------------------
// Full image-space pipeline: condition -> reverse chain -> decode

struct DenoiseResult {
    Tensor image;
    SampleTrace trace;
    double sample_seconds = 0.0;
};

inline DenoiseResult denoise_image(const Tensor& x_ld, const FrozenAutoencoder& enc, const LdmModel& ldm,
                                   const SamplerSpec& spec, bool with_trace = false) {
    spec.validate();
    if (enc.ae.cfg.latent_channels != ldm.cfg.latent_channels)
        throw ConfigError("checkpoint mismatch: autoencoder latent_channels=" +
                          std::to_string(enc.ae.cfg.latent_channels) +
                          " vs denoiser latent_channels=" + std::to_string(ldm.cfg.latent_channels));
    const NoiseSchedule sched = build_cosine_schedule(ldm.T, ldm.eps_sched);

    ConditioningContext ctx;
    const auto dist = enc.ae.encode(x_ld);
    const float inv_std = float(1.0 / ldm.latent_std);
    if (ldm.cfg.mode == "conditional") {
        ctx = derive_condition(x_ld, enc);
        for (auto& v : ctx.tokens.v) v *= inv_std;
    } else {
        ctx.source = ConditionSource::None;
    }

    Rng rng(spec.seed);
    Tensor z_init = Tensor::zeros_like(dist.mu);
    int t_start = ldm.T;
    if (ldm.cfg.mode == "conditional") {
        rng.fill_normal(z_init);  // pure Gaussian z_T
    } else {
        // prior mode: forward-diffuse the (scaled) low-dose latent to t_start
        t_start = std::max(1, int(std::llround(spec.t_start_frac * ldm.T)));
        Tensor z_ld = dist.mu;
        for (auto& v : z_ld.v) v *= inv_std;
        Tensor noise = rng.normal_like(z_ld);
        z_init = forward_diffuse(z_ld, t_start, noise, sched);
    }

    DenoiseResult out;
    const auto begin = std::chrono::steady_clock::now();
    Tensor z;
    if (spec.kind == "ddim") {
        const int k = std::min(spec.num_steps, t_start);
        const auto sub = make_timestep_subsequence_from(t_start, k);
        z = sample_ddim(ldm, ctx, sched, sub, z_init, with_trace ? &out.trace : nullptr);
    } else {
        z = sample_ddpm(ldm, ctx, sched, z_init, rng, with_trace ? &out.trace : nullptr, t_start);
    }
    out.sample_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - begin).count();
    for (auto& v : z.v) v *= float(ldm.latent_std);
    out.image = enc.ae.decode(z);
    return out;
}

}  // namespace ctdn
