// Command-line front end: dataset generation, two-stage training, denoising,
// evaluation, the 2x2 ablation grid, and schedule inspection.
//
// Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
// 4 numeric failure.

#include <CLI11.hpp>
#include <iostream>

#include "ctdn/pipeline.hpp"

using namespace ctdn;

int main(int argc, char** argv) {
    CLI::App app{"latent-diffusion low-dose CT denoising pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    bool force = false, verbose = false;
    int64_t seed_override = -1;
    app.add_option("--config", config_path, "JSON config file");
    app.add_flag("--force", force, "overwrite existing artifacts / retrain cached ablation cells");
    app.add_option("--seed", seed_override, "global seed override (derives all stream seeds)");
    app.add_flag("--verbose", verbose, "verbose output, including per-step sampling traces");

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic LD/FD phantom dataset");
    auto* train_ae_cmd = app.add_subcommand("train-ae", "stage one: train the autoencoder");
    auto* train_ldm_cmd = app.add_subcommand("train-ldm", "stage two: train the latent denoiser (frozen AE)");
    auto* denoise_cmd = app.add_subcommand("denoise", "denoise the test split with the trained models");
    std::string denoise_in, denoise_out;
    denoise_cmd->add_option("--input", denoise_in, "dataset directory (defaults to paths.dataset)");
    denoise_cmd->add_option("--output", denoise_out, "output directory (defaults to paths.reports/denoised)");
    auto* eval_cmd = app.add_subcommand("eval", "compute PSNR/SSIM/feature-distance reports");
    std::string eval_pred, eval_ref;
    eval_cmd->add_option("--pred", eval_pred, "denoised image directory")->required();
    eval_cmd->add_option("--ref", eval_ref, "reference dataset directory (defaults to paths.dataset)");
    auto* ablate_cmd = app.add_subcommand("ablate", "run the 2x2 {perceptual AE} x {quick sampler} grid");
    auto* dump_cmd = app.add_subcommand("dump-schedule", "write the t, alpha_bar, beta table");
    std::string dump_out = "-";
    dump_cmd->add_option("--out", dump_out, "output file ('-' for stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    try {
        RunConfig cfg = load_config(config_path);
        if (seed_override >= 0) cfg.override_seed(uint64_t(seed_override));
        cfg.verbose = verbose;

        if (gen->parsed()) pipeline::run_gen_data(cfg, force);
        if (train_ae_cmd->parsed()) pipeline::run_train_ae(cfg);
        if (train_ldm_cmd->parsed()) pipeline::run_train_ldm(cfg);
        if (denoise_cmd->parsed()) pipeline::run_denoise(cfg, denoise_in, denoise_out);
        if (eval_cmd->parsed()) pipeline::run_eval(cfg, eval_pred, eval_ref);
        if (ablate_cmd->parsed()) pipeline::run_ablate(cfg, force);
        if (dump_cmd->parsed()) pipeline::run_dump_schedule(cfg, dump_out);
        return 0;
    } catch (const MissingPrerequisiteError& e) {
        std::cerr << "error (missing prerequisite): " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "error (numeric): " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
