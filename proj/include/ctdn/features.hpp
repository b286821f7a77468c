#pragma once

// Multi-layer convolutional feature extractor behind the perceptual loss and
// LPIPS. Desk-scale default is a fixed-seed random stack: deterministic,
// hermetic, and exercising exactly the same multi-layer L1/normalized-L2
// math as a pretrained backbone, whose weights can be dropped in through the
// checkpoint loader when available. An identity mode backs the loss oracles.

#include <vector>

#include "ctdn/nn.hpp"
#include "ctdn/tensor.hpp"

namespace ctdn {

enum class ExtractorMode { FixedRandom, Identity };

class FeatureExtractor {
   public:
    FeatureExtractor() = default;

    static FeatureExtractor identity() {
        FeatureExtractor e;
        e.mode_ = ExtractorMode::Identity;
        return e;
    }

    static FeatureExtractor fixed_random(uint64_t seed, int base_channels = 8) {
        FeatureExtractor e;
        e.mode_ = ExtractorMode::FixedRandom;
        Rng rng(seed);
        e.convs_.emplace_back(1, base_channels, 3, 1, 1, rng);
        e.convs_.emplace_back(base_channels, base_channels * 2, 3, 2, 1, rng);
        e.convs_.emplace_back(base_channels * 2, base_channels * 2, 3, 2, 1, rng);
        e.acts_.resize(e.convs_.size());
        return e;
    }

    ExtractorMode mode() const { return mode_; }
    int num_layers() const { return mode_ == ExtractorMode::Identity ? 1 : int(convs_.size()); }

    // Pure feature taps; identical input yields identical features.
    std::vector<Tensor> features(const Tensor& x) const {
        std::vector<Tensor> taps;
        if (mode_ == ExtractorMode::Identity) {
            taps.push_back(x);
            return taps;
        }
        Tensor h = x;
        for (size_t i = 0; i < convs_.size(); ++i) {
            h = acts_[i].apply(convs_[i].apply(h));
            taps.push_back(h);
        }
        return taps;
    }

    // Caching variant for the training path (gradients w.r.t. the input).
    std::vector<Tensor> forward_features(const Tensor& x) {
        std::vector<Tensor> taps;
        if (mode_ == ExtractorMode::Identity) {
            taps.push_back(x);
            return taps;
        }
        Tensor h = x;
        for (size_t i = 0; i < convs_.size(); ++i) {
            h = acts_[i].forward(convs_[i].forward(h));
            taps.push_back(h);
        }
        return taps;
    }

    // Chain per-tap gradients back to the input. Extractor weights are fixed
    // (never trained), so parameter gradients are discarded.
    Tensor backward(const std::vector<Tensor>& tap_grads) {
        if (mode_ == ExtractorMode::Identity) {
            require(tap_grads.size() == 1, "identity extractor expects one tap grad");
            return tap_grads[0];
        }
        require(tap_grads.size() == convs_.size(), "extractor tap grad count mismatch");
        Tensor g = tap_grads.back();
        for (int i = int(convs_.size()) - 1; i >= 0; --i) {
            g = convs_[size_t(i)].backward(acts_[size_t(i)].backward(g));
            for (auto& gg : convs_[size_t(i)].w.g.v) gg = 0.0f;
            for (auto& gg : convs_[size_t(i)].b.g.v) gg = 0.0f;
            if (i > 0) g += tap_grads[size_t(i) - 1];
        }
        return g;
    }

   private:
    ExtractorMode mode_ = ExtractorMode::FixedRandom;
    std::vector<nn::Conv2d> convs_;
    mutable std::vector<nn::SiLU> acts_;
};

}  // namespace ctdn
