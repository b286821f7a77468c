#pragma once

// Run configuration: nested keys, JSON file loading, validation, and the
// fully-resolved echo that every report embeds. Unknown keys are rejected
// so config typos fail loudly instead of silently using defaults.

#include <cstdlib>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "ctdn/autoencoder.hpp"
#include "ctdn/data.hpp"
#include "ctdn/diffusion.hpp"
#include "ctdn/errors.hpp"

namespace ctdn {

struct RunConfig {
    struct DataCfg {
        int size = 64;
        double dose_sigma = 0.1;
        int patients = 6;
        int slices_per_patient = 4;
        uint64_t split_seed = 17;
        std::string dose_kind = "gaussian";  // gaussian | poisson-gaussian
        double photon_scale = 1000.0;
        uint64_t dose_seed = 7;
        uint64_t base_seed = 1000;
        double train_ratio = 0.7, val_ratio = 0.15, test_ratio = 0.15;
    } data;

    struct AeCfg {
        int f = 4;
        int latent_channels = 4;
        int width = 16;
        double lr = 1e-4;
        int64_t steps = 2000;
        double lambda1 = 1.0, lambda2 = 0.5;
        double kl_final = 1e-6;
        double pl_final = 1e-4;
        int64_t ramp_start = 0;
        int64_t ramp_end = -1;  // -1 resolves to steps/2
        uint64_t seed = 42;
        int res_blocks = 1;
        int batch = 2;
        int grad_accum = 1;
        std::string ramp_shape = "linear";  // linear | cosine-ease
        uint64_t extractor_seed = 9001;
    } ae;

    struct LdmCfg {
        int T = 1000;
        double eps_sched = 0.008;
        std::string mode = "conditional";  // conditional | prior
        int width = 32;
        double lr = 1e-4;
        int64_t steps = 3000;
        uint64_t seed = 77;
        int batch = 8;
        int res_blocks = 1;
        int heads = 2;
        int temb_dim = 32;
        int ctx_dim = 32;
    } ldm;

    struct SamplerCfg {
        std::string kind = "ddim";  // ddim | ddpm
        int num_steps = 30;
        double t_start = 0.4;  // prior mode: fraction of T where the chain starts
        uint64_t seed = 1234;
    } sampler;

    struct EvalCfg {
        double data_range = 2.0;
        int ssim_window = 11;
    } eval;

    struct PathsCfg {
        std::string dataset = "./data";
        std::string checkpoints = "./checkpoints";
        std::string reports = "./reports";
    } paths;

    bool verbose = false;

    int64_t ae_ramp_end_resolved() const { return ae.ramp_end >= 0 ? ae.ramp_end : ae.steps / 2; }

    void validate() const {
        require(data.size >= 8 && data.size % ae.f == 0, "data.size must be >= 8 and divisible by ae.f");
        require(data.patients >= 1 && data.slices_per_patient >= 1, "dataset dimensions must be positive");
        require(data.dose_sigma > 0, "data.dose_sigma must be > 0");
        require(data.dose_kind == "gaussian" || data.dose_kind == "poisson-gaussian", "unknown data.dose_kind");
        require(std::abs(data.train_ratio + data.val_ratio + data.test_ratio - 1.0) < 1e-9,
                "split ratios must sum to 1");
        require(ae.steps >= 1 && ldm.steps >= 1, "training steps must be >= 1");
        require(ae.ramp_start >= 0 && (ae.ramp_end == -1 || ae.ramp_end >= ae.ramp_start), "bad ae ramp interval");
        require(ae.ramp_shape == "linear" || ae.ramp_shape == "cosine-ease", "unknown ae.ramp_shape");
        require(ldm.T >= 1 && ldm.eps_sched > 0, "bad schedule parameters");
        require(ldm.mode == "conditional" || ldm.mode == "prior", "ldm.mode must be conditional or prior");
        require(sampler.kind == "ddim" || sampler.kind == "ddpm", "sampler.kind must be ddim or ddpm");
        require(sampler.num_steps >= 1 && sampler.num_steps <= ldm.T, "sampler.num_steps must be in [1, T]");
        require(sampler.t_start > 0.0 && sampler.t_start <= 1.0, "sampler.t_start must be in (0, 1]");
        require(eval.data_range > 0 && eval.ssim_window % 2 == 1, "bad eval config");
    }

    AutoencoderConfig ae_arch() const {
        AutoencoderConfig c;
        c.f = ae.f;
        c.base_width = ae.width;
        c.latent_channels = ae.latent_channels;
        c.res_blocks = ae.res_blocks;
        return c;
    }

    AeTrainConfig ae_train() const {
        AeTrainConfig c;
        c.arch = ae_arch();
        c.lr = ae.lr;
        c.steps = ae.steps;
        c.batch = ae.batch;
        c.grad_accum = ae.grad_accum;
        c.weights.lambda1 = ae.lambda1;
        c.weights.lambda2 = ae.lambda2;
        const RampShape shape = ae.ramp_shape == "linear" ? RampShape::Linear : RampShape::CosineEase;
        c.weights.kl_ramp = {ae.ramp_start, ae_ramp_end_resolved(), ae.kl_final, shape};
        c.weights.pl_ramp = {ae.ramp_start, ae_ramp_end_resolved(), ae.pl_final, shape};
        c.extractor_seed = ae.extractor_seed;
        c.use_perceptual = ae.pl_final > 0.0;
        return c;
    }

    DenoiserConfig ldm_arch() const {
        DenoiserConfig c;
        c.latent_channels = ae.latent_channels;
        c.base_width = ldm.width;
        c.channel_mults = {1, 2};
        c.res_blocks = ldm.res_blocks;
        c.heads = ldm.heads;
        c.temb_dim = ldm.temb_dim;
        c.ctx_dim = ldm.ctx_dim;
        c.mode = ldm.mode;
        return c;
    }

    DoseModel dose_model() const {
        DoseModel d;
        d.kind = data.dose_kind == "gaussian" ? DoseKind::Gaussian : DoseKind::PoissonGaussian;
        d.sigma = data.dose_sigma;
        d.photon_scale = data.photon_scale;
        d.seed = data.dose_seed;
        return d;
    }

    // Global seed override: every stream gets a distinct derived seed.
    void override_seed(uint64_t n) {
        data.split_seed = n;
        data.base_seed = n + 1;
        ae.seed = n + 2;
        ldm.seed = n + 3;
        sampler.seed = n + 4;
        data.dose_seed = n + 5;
    }

    ordered_json resolved_json() const {
        return ordered_json{
            {"data",
             {{"size", data.size},
              {"dose_sigma", data.dose_sigma},
              {"patients", data.patients},
              {"slices_per_patient", data.slices_per_patient},
              {"split_seed", data.split_seed},
              {"dose_kind", data.dose_kind},
              {"photon_scale", data.photon_scale},
              {"dose_seed", data.dose_seed},
              {"base_seed", data.base_seed},
              {"train_ratio", data.train_ratio},
              {"val_ratio", data.val_ratio},
              {"test_ratio", data.test_ratio}}},
            {"ae",
             {{"f", ae.f},
              {"latent_channels", ae.latent_channels},
              {"width", ae.width},
              {"lr", ae.lr},
              {"steps", ae.steps},
              {"lambda1", ae.lambda1},
              {"lambda2", ae.lambda2},
              {"kl_final", ae.kl_final},
              {"pl_final", ae.pl_final},
              {"ramp_start", ae.ramp_start},
              {"ramp_end", ae_ramp_end_resolved()},
              {"seed", ae.seed},
              {"res_blocks", ae.res_blocks},
              {"batch", ae.batch},
              {"grad_accum", ae.grad_accum},
              {"ramp_shape", ae.ramp_shape},
              {"extractor_seed", ae.extractor_seed}}},
            {"ldm",
             {{"T", ldm.T},
              {"eps_sched", ldm.eps_sched},
              {"mode", ldm.mode},
              {"width", ldm.width},
              {"lr", ldm.lr},
              {"steps", ldm.steps},
              {"seed", ldm.seed},
              {"batch", ldm.batch},
              {"res_blocks", ldm.res_blocks},
              {"heads", ldm.heads},
              {"temb_dim", ldm.temb_dim},
              {"ctx_dim", ldm.ctx_dim}}},
            {"sampler",
             {{"kind", sampler.kind},
              {"num_steps", sampler.num_steps},
              {"t_start", sampler.t_start},
              {"seed", sampler.seed}}},
            {"eval", {{"data_range", eval.data_range}, {"ssim_window", eval.ssim_window}}},
            {"paths",
             {{"dataset", paths.dataset}, {"checkpoints", paths.checkpoints}, {"reports", paths.reports}}}};
    }
};

namespace detail {

template <class T>
void read_key(const ordered_json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void check_known_keys(const ordered_json& j, const std::vector<std::string>& known, const std::string& block) {
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError("unknown config key '" + block + "." + key + "'");
}

}  // namespace detail

inline RunConfig config_from_json(const ordered_json& j) {
    RunConfig c;
    detail::check_known_keys(j, {"data", "ae", "ldm", "sampler", "eval", "paths"}, "(top)");
    if (j.contains("data")) {
        const auto& b = j.at("data");
        detail::check_known_keys(b,
                                 {"size", "dose_sigma", "patients", "slices_per_patient", "split_seed", "dose_kind",
                                  "photon_scale", "dose_seed", "base_seed", "train_ratio", "val_ratio", "test_ratio"},
                                 "data");
        detail::read_key(b, "size", c.data.size);
        detail::read_key(b, "dose_sigma", c.data.dose_sigma);
        detail::read_key(b, "patients", c.data.patients);
        detail::read_key(b, "slices_per_patient", c.data.slices_per_patient);
        detail::read_key(b, "split_seed", c.data.split_seed);
        detail::read_key(b, "dose_kind", c.data.dose_kind);
        detail::read_key(b, "photon_scale", c.data.photon_scale);
        detail::read_key(b, "dose_seed", c.data.dose_seed);
        detail::read_key(b, "base_seed", c.data.base_seed);
        detail::read_key(b, "train_ratio", c.data.train_ratio);
        detail::read_key(b, "val_ratio", c.data.val_ratio);
        detail::read_key(b, "test_ratio", c.data.test_ratio);
    }
    if (j.contains("ae")) {
        const auto& b = j.at("ae");
        detail::check_known_keys(b,
                                 {"f", "latent_channels", "width", "lr", "steps", "lambda1", "lambda2", "kl_final",
                                  "pl_final", "ramp_start", "ramp_end", "seed", "res_blocks", "batch", "grad_accum",
                                  "ramp_shape", "extractor_seed"},
                                 "ae");
        detail::read_key(b, "f", c.ae.f);
        detail::read_key(b, "latent_channels", c.ae.latent_channels);
        detail::read_key(b, "width", c.ae.width);
        detail::read_key(b, "lr", c.ae.lr);
        detail::read_key(b, "steps", c.ae.steps);
        detail::read_key(b, "lambda1", c.ae.lambda1);
        detail::read_key(b, "lambda2", c.ae.lambda2);
        detail::read_key(b, "kl_final", c.ae.kl_final);
        detail::read_key(b, "pl_final", c.ae.pl_final);
        detail::read_key(b, "ramp_start", c.ae.ramp_start);
        detail::read_key(b, "ramp_end", c.ae.ramp_end);
        detail::read_key(b, "seed", c.ae.seed);
        detail::read_key(b, "res_blocks", c.ae.res_blocks);
        detail::read_key(b, "batch", c.ae.batch);
        detail::read_key(b, "grad_accum", c.ae.grad_accum);
        detail::read_key(b, "ramp_shape", c.ae.ramp_shape);
        detail::read_key(b, "extractor_seed", c.ae.extractor_seed);
    }
    if (j.contains("ldm")) {
        const auto& b = j.at("ldm");
        detail::check_known_keys(
            b, {"T", "eps_sched", "mode", "width", "lr", "steps", "seed", "batch", "res_blocks", "heads", "temb_dim", "ctx_dim"},
            "ldm");
        detail::read_key(b, "T", c.ldm.T);
        detail::read_key(b, "eps_sched", c.ldm.eps_sched);
        detail::read_key(b, "mode", c.ldm.mode);
        detail::read_key(b, "width", c.ldm.width);
        detail::read_key(b, "lr", c.ldm.lr);
        detail::read_key(b, "steps", c.ldm.steps);
        detail::read_key(b, "seed", c.ldm.seed);
        detail::read_key(b, "batch", c.ldm.batch);
        detail::read_key(b, "res_blocks", c.ldm.res_blocks);
        detail::read_key(b, "heads", c.ldm.heads);
        detail::read_key(b, "temb_dim", c.ldm.temb_dim);
        detail::read_key(b, "ctx_dim", c.ldm.ctx_dim);
    }
    if (j.contains("sampler")) {
        const auto& b = j.at("sampler");
        detail::check_known_keys(b, {"kind", "num_steps", "t_start", "seed"}, "sampler");
        detail::read_key(b, "kind", c.sampler.kind);
        detail::read_key(b, "num_steps", c.sampler.num_steps);
        detail::read_key(b, "t_start", c.sampler.t_start);
        detail::read_key(b, "seed", c.sampler.seed);
    }
    if (j.contains("eval")) {
        const auto& b = j.at("eval");
        detail::check_known_keys(b, {"data_range", "ssim_window"}, "eval");
        detail::read_key(b, "data_range", c.eval.data_range);
        detail::read_key(b, "ssim_window", c.eval.ssim_window);
    }
    if (j.contains("paths")) {
        const auto& b = j.at("paths");
        detail::check_known_keys(b, {"dataset", "checkpoints", "reports"}, "paths");
        detail::read_key(b, "dataset", c.paths.dataset);
        detail::read_key(b, "checkpoints", c.paths.checkpoints);
        detail::read_key(b, "reports", c.paths.reports);
    }
    return c;
}

// File < environment < command line. The caller applies flag overrides after.
inline RunConfig load_config(const std::string& path_or_empty) {
    RunConfig c;
    if (!path_or_empty.empty()) {
        if (!std::filesystem::exists(path_or_empty))
            throw ConfigError("config file not found: " + path_or_empty);
        ordered_json j;
        try {
            j = ordered_json::parse(read_file_bytes(path_or_empty));
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config parse failure: " + std::string(e.what()));
        }
        c = config_from_json(j);
    }
    if (const char* root = std::getenv("CTDENOISE_REPORT_ROOT"); root != nullptr && *root != '\0')
        c.paths.reports = root;
    c.validate();
    return c;
}

}  // namespace ctdn
