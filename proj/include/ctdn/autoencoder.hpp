#pragma once

// KL-regularized convolutional autoencoder with a perceptual term:
// encoder -> (mu, log_var), reparameterized latent, symmetric decoder with a
// bounded output. The composite loss is
//   L = pixel(l1w*MSE + l2w*L1) + w_kl(step)*KL + w_pl(step)*PL
// with both regularizer weights ramped from zero during training.
// Loss kernels are scalar-templated so the gradient oracles can run the same
// code in float64.

#include <cmath>
#include <string>
#include <vector>

#include "ctdn/errors.hpp"
#include "ctdn/features.hpp"
#include "ctdn/nn.hpp"
#include "ctdn/rng.hpp"
#include "ctdn/tensor.hpp"

namespace ctdn {

// ---------------------------------------------------------------------------
// Loss kernels

template <class S>
struct LatentDist {
    Tens<S> mu;
    Tens<S> log_var;
};

constexpr float kLogVarMin = -30.0f, kLogVarMax = 20.0f;

// 0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1); summed, not averaged -- the
// kl weight absorbs the scale.
template <class S>
double kl_loss(const LatentDist<S>& d, Tens<S>* gmu = nullptr, Tens<S>* glogvar = nullptr) {
    require(d.mu.same_shape(d.log_var), "kl_loss: mu/log_var shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < d.mu.v.size(); ++i) {
        const double mu = d.mu.v[i];
        const double lv = d.log_var.v[i];
        const double var = std::exp(lv);
        acc += 0.5 * (mu * mu + var - lv - 1.0);
        if (gmu != nullptr) gmu->v[i] += S(mu);
        if (glogvar != nullptr) glogvar->v[i] += S(0.5 * (var - 1.0));
    }
    if (!std::isfinite(acc)) throw NumericError("kl term non-finite");
    return acc;
}

// l1w * mean squared error + l2w * mean absolute error.
template <class S>
double pixel_loss(const Tens<S>& x, const Tens<S>& xt, double l1w, double l2w, Tens<S>* gxt = nullptr) {
    require(x.same_shape(xt), "pixel_loss: shape mismatch " + x.shape_str() + " vs " + xt.shape_str());
    const double inv_n = 1.0 / double(x.v.size());
    double mse = 0.0, mae = 0.0;
    for (size_t i = 0; i < x.v.size(); ++i) {
        const double d = double(xt.v[i]) - double(x.v[i]);
        mse += d * d;
        mae += std::abs(d);
        if (gxt != nullptr) {
            const double sign = (d > 0.0) ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            gxt->v[i] += S((l1w * 2.0 * d + l2w * sign) * inv_n);
        }
    }
    const double loss = l1w * mse * inv_n + l2w * mae * inv_n;
    if (!std::isfinite(loss)) throw NumericError("pixel term non-finite");
    return loss;
}

// Sum over layers of the summed elementwise absolute feature difference.
template <class S>
double feature_l1(const std::vector<Tens<S>>& fx, const std::vector<Tens<S>>& fy,
                  std::vector<Tens<S>>* gfy = nullptr) {
    require(fx.size() == fy.size(), "feature_l1: layer count mismatch");
    double acc = 0.0;
    for (size_t l = 0; l < fx.size(); ++l) {
        require(fx[l].same_shape(fy[l]), "feature_l1: feature shape mismatch at layer " + std::to_string(l));
        for (size_t i = 0; i < fx[l].v.size(); ++i) {
            const double d = double(fy[l].v[i]) - double(fx[l].v[i]);
            acc += std::abs(d);
            if (gfy != nullptr) (*gfy)[l].v[i] += S(d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
        }
    }
    if (!std::isfinite(acc)) throw NumericError("perceptual term non-finite");
    return acc;
}

inline double perceptual_loss(const Tensor& x, const Tensor& xt, const FeatureExtractor& ex) {
    require(x.same_shape(xt), "perceptual_loss: shape mismatch");
    return feature_l1(ex.features(x), ex.features(xt));
}

// ---------------------------------------------------------------------------
// Loss-weight ramp

enum class RampShape { Linear, CosineEase };

struct LossWeightRamp {
    int64_t ramp_start = 0;
    int64_t ramp_end = 0;
    double final_value = 0.0;
    RampShape shape = RampShape::Linear;
};

inline double weight_at(const LossWeightRamp& r, int64_t step) {
    require(r.ramp_start >= 0 && r.ramp_end >= r.ramp_start, "invalid ramp interval");
    require(r.final_value >= 0.0, "ramp final value must be nonnegative");
    if (step < r.ramp_start) return 0.0;
    if (step >= r.ramp_end) return r.final_value;
    const double u = double(step - r.ramp_start) / double(r.ramp_end - r.ramp_start);
    if (r.shape == RampShape::Linear) return r.final_value * u;
    return r.final_value * 0.5 * (1.0 - std::cos(M_PI * u));
}

struct AeLossBreakdown {
    double pixel = 0, kl = 0, pl = 0;
    double kl_weight = 0, pl_weight = 0;
    double total = 0;
};

struct AeLossWeights {
    double lambda1 = 1.0, lambda2 = 0.5;  // MSE / L1 pixel weights
    LossWeightRamp kl_ramp, pl_ramp;
};

template <class S>
AeLossBreakdown total_ae_loss(const Tens<S>& x, const Tens<S>& xt, const LatentDist<S>& dist, int64_t step,
                              const AeLossWeights& wts, const FeatureExtractor* extractor = nullptr) {
    AeLossBreakdown out;
    out.pixel = pixel_loss(x, xt, wts.lambda1, wts.lambda2);
    out.kl = kl_loss(dist);
    out.kl_weight = weight_at(wts.kl_ramp, step);
    out.pl_weight = weight_at(wts.pl_ramp, step);
    if (out.pl_weight != 0.0) {
        require(extractor != nullptr, "total_ae_loss: perceptual weight active but no extractor");
        if constexpr (std::is_same_v<S, float>) {
            out.pl = perceptual_loss(x, xt, *extractor);
        } else {
            // double-precision oracle path exists only for the identity extractor
            require(extractor->mode() == ExtractorMode::Identity, "float64 loss path supports identity extractor only");
            std::vector<Tens<S>> fx{x}, fy{xt};
            out.pl = feature_l1(fx, fy);
        }
    }
    out.total = out.pixel + out.kl_weight * out.kl + out.pl_weight * out.pl;
    return out;
}

// ---------------------------------------------------------------------------
// Model

struct AutoencoderConfig {
    int f = 4;  // total downsampling factor, a power of two
    int base_width = 16;
    int latent_channels = 4;
    int res_blocks = 1;
    std::vector<int> channel_mults;  // derived when empty: min(2^i, 4) per level

    int levels() const {
        int l = 1, d = f;
        while (d > 1) {
            require(d % 2 == 0, "downsampling factor must be a power of two");
            d /= 2;
            ++l;
        }
        return l;
    }
    std::vector<int> mults() const {
        if (!channel_mults.empty()) {
            require(int(channel_mults.size()) == levels(), "channel_mults must have one entry per level");
            return channel_mults;
        }
        std::vector<int> m;
        for (int i = 0; i < levels(); ++i) m.push_back(std::min(1 << i, 4));
        return m;
    }
    void validate() const {
        require(f >= 1, "f must be >= 1");
        require((1 << (levels() - 1)) == f, "f must equal 2^(levels-1)");
        require(base_width >= 4 && latent_channels >= 1 && res_blocks >= 1, "degenerate autoencoder config");
    }
};

namespace detail {

struct EncoderNet {
    std::vector<nn::ResBlock> blocks;      // all levels, in order
    std::vector<nn::Conv2d> downs;         // between levels
    nn::Conv2d conv_in, conv_out;
    nn::Attention attn;                    // deepest level only
    nn::GroupNorm norm_out;
    nn::SiLU act_out;
    int levels = 0, res_blocks = 0;

    EncoderNet() = default;
    EncoderNet(const AutoencoderConfig& cfg, Rng& rng) {
        levels = cfg.levels();
        res_blocks = cfg.res_blocks;
        const auto mults = cfg.mults();
        std::vector<int> ch;
        for (int m : mults) ch.push_back(cfg.base_width * m);
        conv_in = nn::Conv2d(1, ch[0], 3, 1, 1, rng);
        int cur = ch[0];
        for (int i = 0; i < levels; ++i) {
            for (int b = 0; b < res_blocks; ++b) {
                blocks.emplace_back(cur, ch[size_t(i)], 0, rng);
                cur = ch[size_t(i)];
            }
            if (i + 1 < levels) downs.emplace_back(cur, cur, 3, 2, 1, rng);
        }
        attn = nn::Attention(cur, cur, 1, true, rng);
        norm_out = nn::GroupNorm(cur);
        conv_out = nn::Conv2d(cur, 2 * cfg.latent_channels, 3, 1, 1, rng);
    }

    Tensor run(const Tensor& x, bool train) {
        Tensor h = train ? conv_in.forward(x) : conv_in.apply(x);
        size_t bi = 0;
        for (int i = 0; i < levels; ++i) {
            for (int b = 0; b < res_blocks; ++b, ++bi)
                h = train ? blocks[bi].forward(h) : blocks[bi].apply(h);
            if (i + 1 < levels) h = train ? downs[size_t(i)].forward(h) : downs[size_t(i)].apply(h);
        }
        h = train ? attn.forward(h) : attn.apply(h);
        h = train ? conv_out.forward(act_out.run(norm_out.forward(h), true))
                  : conv_out.apply(act_out.apply(norm_out.apply(h)));
        return h;
    }

    Tensor backward(const Tensor& gy) {
        Tensor g = norm_out.backward(act_out.backward(conv_out.backward(gy)));
        g = attn.backward(g);
        size_t bi = blocks.size();
        for (int i = levels - 1; i >= 0; --i) {
            if (i + 1 < levels) g = downs[size_t(i)].backward(g);
            for (int b = 0; b < res_blocks; ++b) g = blocks[--bi].backward(g);
        }
        return conv_in.backward(g);
    }

    void visit(const std::string& p, const nn::ParamVisitor& f) {
        conv_in.visit(p + ".conv_in", f);
        for (size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(p + ".block" + std::to_string(i), f);
        for (size_t i = 0; i < downs.size(); ++i) downs[i].visit(p + ".down" + std::to_string(i), f);
        attn.visit(p + ".attn", f);
        norm_out.visit(p + ".norm_out", f);
        conv_out.visit(p + ".conv_out", f);
    }
};

struct DecoderNet {
    std::vector<nn::ResBlock> blocks;
    std::vector<nn::Conv2d> up_convs;
    std::vector<nn::Upsample2x> ups;
    nn::Conv2d conv_in, conv_out;
    nn::Attention attn;
    nn::GroupNorm norm_out;
    nn::SiLU act_out;
    nn::Tanh bound;
    int levels = 0, res_blocks = 0;

    DecoderNet() = default;
    DecoderNet(const AutoencoderConfig& cfg, Rng& rng) {
        levels = cfg.levels();
        res_blocks = cfg.res_blocks;
        const auto mults = cfg.mults();
        std::vector<int> ch;
        for (int m : mults) ch.push_back(cfg.base_width * m);
        conv_in = nn::Conv2d(cfg.latent_channels, ch.back(), 3, 1, 1, rng);
        attn = nn::Attention(ch.back(), ch.back(), 1, true, rng);
        int cur = ch.back();
        for (int i = levels - 1; i >= 0; --i) {
            for (int b = 0; b < res_blocks; ++b) {
                blocks.emplace_back(cur, ch[size_t(i)], 0, rng);
                cur = ch[size_t(i)];
            }
            if (i > 0) {
                ups.emplace_back();
                up_convs.emplace_back(cur, ch[size_t(i) - 1], 3, 1, 1, rng);
                cur = ch[size_t(i) - 1];
            }
        }
        norm_out = nn::GroupNorm(cur);
        conv_out = nn::Conv2d(cur, 1, 3, 1, 1, rng);
    }

    Tensor run(const Tensor& z, bool train) {
        Tensor h = train ? conv_in.forward(z) : conv_in.apply(z);
        h = train ? attn.forward(h) : attn.apply(h);
        size_t bi = 0;
        for (int i = levels - 1; i >= 0; --i) {
            for (int b = 0; b < res_blocks; ++b, ++bi)
                h = train ? blocks[bi].forward(h) : blocks[bi].apply(h);
            if (i > 0) {
                const size_t ui = size_t(levels - 1 - i);
                h = train ? ups[ui].forward(h) : ups[ui].apply(h);
                h = train ? up_convs[ui].forward(h) : up_convs[ui].apply(h);
            }
        }
        h = train ? conv_out.forward(act_out.run(norm_out.forward(h), true))
                  : conv_out.apply(act_out.apply(norm_out.apply(h)));
        return train ? bound.forward(h) : bound.apply(h);
    }

    Tensor backward(const Tensor& gy) {
        Tensor g = bound.backward(gy);
        g = norm_out.backward(act_out.backward(conv_out.backward(g)));
        size_t bi = blocks.size();
        for (int i = 0; i < levels; ++i) {
            if (i > 0) {
                const size_t ui = size_t(levels - 1 - i);
                g = ups[ui].backward(up_convs[ui].backward(g));
            }
            for (int b = 0; b < res_blocks; ++b) g = blocks[--bi].backward(g);
        }
        g = attn.backward(g);
        return conv_in.backward(g);
    }

    void visit(const std::string& p, const nn::ParamVisitor& f) {
        conv_in.visit(p + ".conv_in", f);
        attn.visit(p + ".attn", f);
        for (size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(p + ".block" + std::to_string(i), f);
        for (size_t i = 0; i < up_convs.size(); ++i) up_convs[i].visit(p + ".up" + std::to_string(i), f);
        norm_out.visit(p + ".norm_out", f);
        conv_out.visit(p + ".conv_out", f);
    }
};

}  // namespace detail

struct Autoencoder {
    AutoencoderConfig cfg;
    detail::EncoderNet enc;
    detail::DecoderNet dec;
    std::vector<uint8_t> clamp_mask_;  // training cache for the log_var clamp

    Autoencoder() = default;
    Autoencoder(const AutoencoderConfig& cfg_, uint64_t seed) : cfg(cfg_) {
        cfg.validate();
        Rng rng(seed);
        enc = detail::EncoderNet(cfg, rng);
        dec = detail::DecoderNet(cfg, rng);
    }

    void visit_params(const nn::ParamVisitor& f) {
        enc.visit("encoder", f);
        dec.visit("decoder", f);
    }
    std::vector<nn::Param*> params() {
        std::vector<nn::Param*> ps;
        visit_params([&](const std::string&, nn::Param& p) { ps.push_back(&p); });
        return ps;
    }

    void check_image(const Tensor& x) const {
        require(x.c() == 1, "image tensors are single channel, got " + x.shape_str());
        require(x.h() % cfg.f == 0 && x.w() % cfg.f == 0,
                "image dims " + x.shape_str() + " not divisible by f=" + std::to_string(cfg.f));
        require(x.all_finite(), "image contains non-finite values");
    }

    LatentDist<float> split_head(Tensor head, bool cache_mask) {
        const int cl = cfg.latent_channels;
        auto [mu, lv] = nn::split_channels(head, cl);
        if (cache_mask) clamp_mask_.assign(lv.v.size(), 1);
        for (size_t i = 0; i < lv.v.size(); ++i) {
            if (lv.v[i] < kLogVarMin) {
                lv.v[i] = kLogVarMin;
                if (cache_mask) clamp_mask_[i] = 0;
            } else if (lv.v[i] > kLogVarMax) {
                lv.v[i] = kLogVarMax;
                if (cache_mask) clamp_mask_[i] = 0;
            }
        }
        return {std::move(mu), std::move(lv)};
    }

    LatentDist<float> encode_train(const Tensor& x) {
        check_image(x);
        return split_head(enc.run(x, true), true);
    }
    LatentDist<float> encode(const Tensor& x) const {
        check_image(x);
        return const_cast<Autoencoder*>(this)->split_head(const_cast<detail::EncoderNet&>(enc).run(x, false), false);
    }

    Tensor decode_train(const Tensor& z) {
        check_latent(z);
        return dec.run(z, true);
    }
    Tensor decode(const Tensor& z) const {
        check_latent(z);
        return const_cast<detail::DecoderNet&>(dec).run(z, false);
    }
    void check_latent(const Tensor& z) const {
        require(z.c() == cfg.latent_channels,
                "latent has " + std::to_string(z.c()) + " channels, config wants " + std::to_string(cfg.latent_channels));
        require(z.all_finite(), "latent contains non-finite values");
    }

    Tensor encoder_backward(const Tensor& gmu, Tensor glogvar) {
        require(clamp_mask_.size() == glogvar.v.size(), "encoder backward without cached clamp mask");
        for (size_t i = 0; i < glogvar.v.size(); ++i)
            if (clamp_mask_[i] == 0) glogvar.v[i] = 0.0f;
        return enc.backward(nn::concat_channels(gmu, glogvar));
    }
    Tensor decoder_backward(const Tensor& gxt) { return dec.backward(gxt); }
};

// Spec-facing free functions.
inline LatentDist<float> encode(const Tensor& x, const Autoencoder& model) { return model.encode(x); }
inline Tensor decode(const Tensor& z, const Autoencoder& model) { return model.decode(z); }

template <class S>
Tens<S> reparameterize(const LatentDist<S>& d, const Tens<S>& noise) {
    require(noise.same_shape(d.mu), "reparameterize: noise shape mismatch");
    Tens<S> z = Tens<S>::zeros_like(d.mu);
    for (size_t i = 0; i < z.v.size(); ++i)
        z.v[i] = d.mu.v[i] + std::exp(S(0.5) * d.log_var.v[i]) * noise.v[i];
    return z;
}

// ---------------------------------------------------------------------------
// Training

struct AeTrainConfig {
    AutoencoderConfig arch;
    double lr = 1e-4;
    int64_t steps = 2000;
    int batch = 2;
    int grad_accum = 1;  // effective batch = batch * grad_accum
    AeLossWeights weights;
    uint64_t extractor_seed = 9001;
    bool use_perceptual = true;  // wired to the pl ramp; false drops the extractor entirely
};

struct AeHistoryRow {
    int64_t step;
    double pixel, kl, pl, kl_weight, pl_weight, total;
};

struct AeTrainResult {
    Autoencoder model;
    FeatureExtractor extractor;
    std::vector<AeHistoryRow> history;
    int64_t steps_done = 0;
};

inline AeTrainResult train_autoencoder(const std::vector<Tensor>& images, const AeTrainConfig& cfg, uint64_t seed) {
    require(!images.empty(), "train_autoencoder: empty dataset");
    cfg.arch.validate();
    require(cfg.batch >= 1 && cfg.grad_accum >= 1, "batch and grad_accum must be >= 1");

    AeTrainResult res;
    res.model = Autoencoder(cfg.arch, seed);
    res.extractor = FeatureExtractor::fixed_random(cfg.extractor_seed);
    auto params = res.model.params();
    nn::Adam opt;
    opt.lr = cfg.lr;

    Rng order_rng(seed + 0x5eed0001ULL);
    Rng noise_rng(seed + 0x5eed0002ULL);

    std::vector<size_t> order(images.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = order.size();  // triggers a shuffle on first use

    const int hh = images[0].h(), ww = images[0].w();
    for (const auto& im : images)
        require(im.h() == hh && im.w() == ww && im.c() == 1, "train_autoencoder: inhomogeneous image shapes");

    for (int64_t step = 0; step < cfg.steps; ++step) {
        nn::zero_grads(params);
        AeLossBreakdown mean_terms;
        const double kl_w = weight_at(cfg.weights.kl_ramp, step);
        const double pl_w = cfg.use_perceptual ? weight_at(cfg.weights.pl_ramp, step) : 0.0;

        for (int acc = 0; acc < cfg.grad_accum; ++acc) {
            Tensor x(cfg.batch, hh, ww, 1);
            for (int b = 0; b < cfg.batch; ++b) {
                if (cursor == order.size()) {
                    order_rng.shuffle(order);
                    cursor = 0;
                }
                const Tensor& src = images[order[cursor++]];
                std::copy(src.v.begin(), src.v.end(), x.v.begin() + size_t(b) * src.v.size());
            }

            LatentDist<float> dist = res.model.encode_train(x);
            Tensor eps = noise_rng.normal_like(dist.mu);
            Tensor z = reparameterize(dist, eps);
            Tensor xt = res.model.decode_train(z);

            Tensor gxt = Tensor::zeros_like(xt);
            Tensor gmu = Tensor::zeros_like(dist.mu);
            Tensor glv = Tensor::zeros_like(dist.log_var);

            const double scale = 1.0 / double(cfg.grad_accum);
            const double pixel = pixel_loss(x, xt, cfg.weights.lambda1, cfg.weights.lambda2, &gxt);
            if (!std::isfinite(pixel)) throw NumericError("pixel term non-finite at step " + std::to_string(step));
            double kl = 0.0;
            {
                Tensor gmu_kl = Tensor::zeros_like(gmu), glv_kl = Tensor::zeros_like(glv);
                kl = kl_loss(dist, &gmu_kl, &glv_kl);
                if (!std::isfinite(kl)) throw NumericError("kl term non-finite at step " + std::to_string(step));
                if (kl_w != 0.0) {
                    for (size_t i = 0; i < gmu.v.size(); ++i) {
                        gmu.v[i] += float(kl_w) * gmu_kl.v[i];
                        glv.v[i] += float(kl_w) * glv_kl.v[i];
                    }
                }
            }
            double pl = 0.0;
            if (pl_w != 0.0) {
                auto fx = res.extractor.features(x);
                auto fy = res.extractor.forward_features(xt);
                std::vector<Tensor> gfy;
                for (const auto& f : fy) gfy.push_back(Tensor::zeros_like(f));
                pl = feature_l1(fx, fy, &gfy);
                if (!std::isfinite(pl)) throw NumericError("perceptual term non-finite at step " + std::to_string(step));
                Tensor gxt_pl = res.extractor.backward(gfy);
                for (size_t i = 0; i < gxt.v.size(); ++i) gxt.v[i] += float(pl_w) * gxt_pl.v[i];
            } else if (cfg.use_perceptual) {
                pl = 0.0;  // not evaluated before the ramp starts; logged as zero
            }

            for (auto& g : gxt.v) g *= float(scale);
            Tensor gz = res.model.decoder_backward(gxt);
            // reparameterize backward: z = mu + exp(lv/2) * eps
            for (size_t i = 0; i < gz.v.size(); ++i) {
                const float e = std::exp(0.5f * dist.log_var.v[i]);
                gmu.v[i] = gmu.v[i] * float(scale) + gz.v[i];
                glv.v[i] = glv.v[i] * float(scale) + gz.v[i] * 0.5f * e * eps.v[i];
            }
            res.model.encoder_backward(gmu, glv);

            mean_terms.pixel += pixel * scale;
            mean_terms.kl += kl * scale;
            mean_terms.pl += pl * scale;
        }

        opt.step(params);
        const double total = mean_terms.pixel + kl_w * mean_terms.kl + pl_w * mean_terms.pl;
        if (!std::isfinite(total)) throw NumericError("total loss non-finite at step " + std::to_string(step));
        res.history.push_back({step, mean_terms.pixel, mean_terms.kl, mean_terms.pl, kl_w, pl_w, total});
        res.steps_done = step + 1;
    }
    return res;
}

}  // namespace ctdn
