#pragma once

// Command orchestration shared by the CLI and the acceptance suite:
// data generation, the two training stages, denoising, evaluation, the
// 2x2 ablation grid, and the schedule dump.
//
// Determinism contract: for ddim runs, the tuple (data seeds, ae seed,
// ldm seed, sampler seed) fully determines every output byte. Wall-clock
// measurements are inherently nondeterministic and therefore live in
// separate timing files, never inside reports or manifests.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ctdn/checkpoint.hpp"
#include "ctdn/config.hpp"
#include "ctdn/data.hpp"
#include "ctdn/diffusion.hpp"
#include "ctdn/metrics.hpp"

namespace ctdn::pipeline {

namespace fs = std::filesystem;

struct SplitItems {
    std::vector<const DatasetItem*> train, val, test;
};

inline SplitItems split_items(const Dataset& ds, const RunConfig& cfg) {
    const auto split = patient_split(ds.patients, {cfg.data.train_ratio, cfg.data.val_ratio, cfg.data.test_ratio},
                                     cfg.data.split_seed);
    SplitItems out;
    auto collect = [&](const std::vector<PatientRecord>& recs, std::vector<const DatasetItem*>& dst) {
        for (const auto& r : recs)
            for (const auto& sid : r.slice_ids) dst.push_back(&ds.item_by_id(sid));
    };
    collect(split.train, out.train);
    collect(split.val, out.val);
    collect(split.test, out.test);
    return out;
}

inline Dataset load_dataset_or_fail(const RunConfig& cfg) {
    const fs::path dir = cfg.paths.dataset;
    if (!fs::exists(dir / "manifest.json"))
        throw MissingPrerequisiteError("dataset not found at " + dir.string() + "; run gen-data first");
    return load_dataset(dir);
}

inline fs::path ae_ckpt_path(const RunConfig& cfg) { return fs::path(cfg.paths.checkpoints) / "ae.ckpt"; }
inline fs::path ldm_ckpt_path(const RunConfig& cfg) { return fs::path(cfg.paths.checkpoints) / "ldm.ckpt"; }

// ---------------------------------------------------------------------------
// gen-data

inline Dataset run_gen_data(const RunConfig& cfg, bool force) {
    cfg.validate();
    const fs::path dir = cfg.paths.dataset;
    if (fs::exists(dir / "manifest.json") && !force)
        throw ConfigError("dataset already exists at " + dir.string() + "; pass --force to overwrite");
    const Dataset ds = make_synthetic_dataset(cfg.data.patients, cfg.data.slices_per_patient, cfg.data.size,
                                              cfg.dose_model(), cfg.data.base_seed);
    persist_dataset(ds, dir);
    std::cout << "gen-data: wrote " << ds.items.size() << " LD/FD pairs (" << cfg.data.patients << " patients x "
              << cfg.data.slices_per_patient << " slices) to " << dir.string() << "\n";
    return ds;
}

// ---------------------------------------------------------------------------
// train-ae

inline void write_ae_history_csv(const std::vector<AeHistoryRow>& rows, const fs::path& path) {
    std::ofstream os(path);
    os << "step,pixel,kl,pl,kl_weight,pl_weight,total\n";
    for (const auto& r : rows)
        os << r.step << "," << format_g17(r.pixel) << "," << format_g17(r.kl) << "," << format_g17(r.pl) << ","
           << format_g17(r.kl_weight) << "," << format_g17(r.pl_weight) << "," << format_g17(r.total) << "\n";
}

inline AeTrainResult run_train_ae(const RunConfig& cfg) {
    cfg.validate();
    const Dataset ds = load_dataset_or_fail(cfg);
    const auto split = split_items(ds, cfg);
    require(!split.train.empty(), "training split is empty");
    std::vector<Tensor> images;
    for (const auto* it : split.train) images.push_back(it->fd);

    auto res = train_autoencoder(images, cfg.ae_train(), cfg.ae.seed);
    fs::create_directories(cfg.paths.checkpoints);
    save_autoencoder(ae_ckpt_path(cfg), res.model, res.steps_done);
    write_ae_history_csv(res.history, fs::path(cfg.paths.checkpoints) / "ae_loss_history.csv");
    std::cout << "train-ae: " << res.steps_done << " steps on " << images.size() << " images; final loss "
              << res.history.back().total << "; checkpoint " << ae_ckpt_path(cfg).string() << "\n";
    return res;
}

// ---------------------------------------------------------------------------
// train-ldm

inline LdmTrainResult run_train_ldm(const RunConfig& cfg) {
    cfg.validate();
    const Dataset ds = load_dataset_or_fail(cfg);
    if (!fs::exists(ae_ckpt_path(cfg)))
        throw MissingPrerequisiteError("autoencoder checkpoint not found at " + ae_ckpt_path(cfg).string() +
                                       "; run train-ae first");
    FrozenAutoencoder enc{load_autoencoder(ae_ckpt_path(cfg)).ae, true};

    const auto split = split_items(ds, cfg);
    require(!split.train.empty(), "training split is empty");
    LatentDataset data;
    const bool conditional = cfg.ldm.mode == "conditional";
    for (const auto* it : split.train) {
        data.z0.push_back(enc.ae.encode(it->fd).mu);  // frozen posterior mean
        if (conditional) {
            auto cond = derive_condition(it->ld, enc);
            data.cond_rows = cond.rows;
            data.cond_cols = cond.cols;
            data.cond.push_back(std::move(cond.tokens));
        }
    }

    LdmTrainConfig tc;
    tc.arch = cfg.ldm_arch();
    tc.T = cfg.ldm.T;
    tc.eps_sched = cfg.ldm.eps_sched;
    tc.lr = cfg.ldm.lr;
    tc.steps = cfg.ldm.steps;
    tc.batch = cfg.ldm.batch;
    auto res = train_ldm(data, tc, cfg.ldm.seed);

    fs::create_directories(cfg.paths.checkpoints);
    save_ldm(ldm_ckpt_path(cfg), res.model, cfg.ldm.steps);
    {
        std::ofstream os(fs::path(cfg.paths.checkpoints) / "ldm_loss_history.csv");
        os << "step,loss\n";
        for (size_t i = 0; i < res.loss_history.size(); ++i) os << i << "," << format_g17(res.loss_history[i]) << "\n";
    }
    std::cout << "train-ldm: " << cfg.ldm.steps << " steps (" << cfg.ldm.mode << ") on " << data.z0.size()
              << " latents; final loss " << res.loss_history.back() << "; checkpoint " << ldm_ckpt_path(cfg).string()
              << "\n";
    return res;
}

// ---------------------------------------------------------------------------
// denoise

struct DenoiseRunResult {
    std::vector<std::pair<std::string, Tensor>> images;
    double total_seconds = 0;
    fs::path out_dir;
};

inline DenoiseRunResult run_denoise(const RunConfig& cfg, const std::string& input_dir_opt,
                                    const std::string& output_dir_opt) {
    cfg.validate();
    RunConfig in_cfg = cfg;
    if (!input_dir_opt.empty()) in_cfg.paths.dataset = input_dir_opt;
    const Dataset ds = load_dataset_or_fail(in_cfg);
    if (!fs::exists(ae_ckpt_path(cfg)))
        throw MissingPrerequisiteError("autoencoder checkpoint not found at " + ae_ckpt_path(cfg).string());
    if (!fs::exists(ldm_ckpt_path(cfg)))
        throw MissingPrerequisiteError("denoiser checkpoint not found at " + ldm_ckpt_path(cfg).string());
    FrozenAutoencoder enc{load_autoencoder(ae_ckpt_path(cfg)).ae, true};
    const LdmModel ldm = load_ldm(ldm_ckpt_path(cfg)).model;

    const auto split = split_items(ds, in_cfg);
    require(!split.test.empty(), "test split is empty");

    DenoiseRunResult out;
    out.out_dir = output_dir_opt.empty() ? fs::path(cfg.paths.reports) / "denoised" : fs::path(output_dir_opt);
    fs::create_directories(out.out_dir);

    SamplerSpec spec;
    spec.kind = cfg.sampler.kind;
    spec.num_steps = cfg.sampler.num_steps;
    spec.t_start_frac = cfg.ldm.mode == "prior" ? cfg.sampler.t_start : 1.0;

    ordered_json manifest;
    manifest["version"] = 1;
    manifest["config"] = cfg.resolved_json();
    manifest["ae_checkpoint_sha1"] = file_git_sha1(ae_ckpt_path(cfg));
    manifest["ldm_checkpoint_sha1"] = file_git_sha1(ldm_ckpt_path(cfg));
    manifest["items"] = ordered_json::array();

    double total = 0;
    for (size_t i = 0; i < split.test.size(); ++i) {
        const auto* item = split.test[i];
        spec.seed = cfg.sampler.seed + i;  // stable per-image stream
        const auto res = denoise_image(item->ld, enc, ldm, spec, cfg.verbose);
        total += res.sample_seconds;
        const std::string file = item->id + "_dn.bin";
        const auto bytes = tensor_bytes(res.image);
        write_file_bytes(out.out_dir / file, bytes);
        manifest["items"].push_back(ordered_json{{"id", item->id},
                                                 {"file", file},
                                                 {"height", res.image.h()},
                                                 {"width", res.image.w()},
                                                 {"crc32", crc32(bytes.data(), bytes.size())}});
        if (cfg.verbose) {
            std::ofstream ts(out.out_dir / (item->id + "_trace.txt"));
            ts << "t mean_abs_latent elapsed_s\n";
            for (const auto& row : res.trace)
                ts << row.t << " " << format_g17(row.mean_abs) << " " << format_g17(row.elapsed_s) << "\n";
        }
        out.images.emplace_back(item->id, res.image);
    }
    out.total_seconds = total;

    const std::string mtext = manifest.dump(2) + "\n";
    write_file_bytes(out.out_dir / "manifest.json", mtext.data(), mtext.size());
    // timing is nondeterministic; kept out of the byte-compared artifacts
    ordered_json timing{{"sampler", cfg.sampler.kind},
                        {"images", out.images.size()},
                        {"total_seconds", total},
                        {"per_image_mean_seconds", total / double(out.images.size())}};
    const std::string ttext = timing.dump(2) + "\n";
    write_file_bytes(out.out_dir / "timing.json", ttext.data(), ttext.size());
    std::cout << "denoise: " << out.images.size() << " images (" << cfg.sampler.kind << ") in " << total << " s -> "
              << out.out_dir.string() << "\n";
    return out;
}

// ---------------------------------------------------------------------------
// eval

inline std::vector<std::pair<std::string, Tensor>> load_denoised_dir(const fs::path& dir, ordered_json* manifest_out) {
    const fs::path mpath = dir / "manifest.json";
    if (!fs::exists(mpath)) throw MissingPrerequisiteError("prediction manifest not found: " + mpath.string());
    ordered_json manifest = ordered_json::parse(read_file_bytes(mpath));
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& ij : manifest.at("items")) {
        const auto bytes = read_file_bytes(dir / ij.at("file").get<std::string>());
        if (crc32(bytes.data(), bytes.size()) != ij.at("crc32").get<uint32_t>())
            throw IoError("denoised image checksum failure for " + ij.at("id").get<std::string>());
        out.emplace_back(ij.at("id").get<std::string>(),
                         tensor_from_bytes(bytes, 1, ij.at("height").get<int>(), ij.at("width").get<int>(), 1));
    }
    if (manifest_out != nullptr) *manifest_out = std::move(manifest);
    return out;
}

struct EvalRunResult {
    MetricReport report;
    fs::path csv_path, table_path;
};

inline EvalRunResult run_eval(const RunConfig& cfg, const std::string& pred_dir, const std::string& ref_dir_opt) {
    cfg.validate();
    ordered_json pred_manifest;
    auto preds = load_denoised_dir(pred_dir, &pred_manifest);

    RunConfig ref_cfg = cfg;
    if (!ref_dir_opt.empty()) ref_cfg.paths.dataset = ref_dir_opt;
    const Dataset ds = load_dataset_or_fail(ref_cfg);
    std::vector<std::pair<std::string, Tensor>> refs;
    std::string missing;
    for (const auto& [id, img] : preds) {
        bool found = false;
        for (const auto& item : ds.items)
            if (item.id == id) {
                refs.emplace_back(id, item.fd);
                found = true;
                break;
            }
        if (!found) missing += (missing.empty() ? "" : ", ") + id;
    }
    if (!missing.empty()) throw ArgumentError("eval: reference set is missing ids [" + missing + "]");

    EvalConfig ec;
    ec.data_range = cfg.eval.data_range;
    ec.ssim_window = cfg.eval.ssim_window;
    EvalRunResult out;
    out.report = evaluate_set(preds, refs, ec);

    // timing sidecar from the denoise pass, if present
    const fs::path timing_path = fs::path(pred_dir) / "timing.json";
    if (fs::exists(timing_path)) {
        const auto tj = ordered_json::parse(read_file_bytes(timing_path));
        out.report.wall_clock_total_s = tj.at("total_seconds").get<double>();
        out.report.wall_clock_per_image_s = tj.at("per_image_mean_seconds").get<double>();
    }

    fs::create_directories(cfg.paths.reports);
    out.csv_path = fs::path(cfg.paths.reports) / "report.csv";
    out.table_path = fs::path(cfg.paths.reports) / "report.txt";

    std::vector<std::string> provenance;
    provenance.push_back("config: " + cfg.resolved_json().dump());
    if (pred_manifest.contains("ae_checkpoint_sha1"))
        provenance.push_back("ae_checkpoint_sha1: " + pred_manifest["ae_checkpoint_sha1"].get<std::string>());
    if (pred_manifest.contains("ldm_checkpoint_sha1"))
        provenance.push_back("ldm_checkpoint_sha1: " + pred_manifest["ldm_checkpoint_sha1"].get<std::string>());
    {
        std::ofstream os(out.csv_path);
        write_report_csv(out.report, os, provenance);
    }
    {
        std::ofstream os(out.table_path);
        std::string label = "ctdenoise:" + cfg.sampler.kind;
        if (cfg.sampler.kind == "ddim") label += "-" + std::to_string(cfg.sampler.num_steps);
        write_aligned_table({{label, out.report.mean_psnr, out.report.mean_ssim, out.report.mean_lpips,
                              out.report.wall_clock_total_s}},
                            os);
    }
    std::cout << "eval: " << out.report.records.size() << " images; mean PSNR "
              << format_g17(out.report.mean_psnr) << " dB, SSIM " << out.report.mean_ssim << ", feature distance "
              << out.report.mean_lpips << " -> " << out.csv_path.string() << "\n";
    return out;
}

// ---------------------------------------------------------------------------
// ablate: the 2x2 grid over {perceptual AE, quick sampler}

struct AblationCell {
    bool p_ae = false, q_sp = false;
    MetricReport report;
    double time_seconds = 0;
};

namespace detail {

// Exclusive-create lock file; held for the duration of the ablation.
struct CacheLock {
    fs::path path;
    explicit CacheLock(const fs::path& p) : path(p) {
        if (fs::exists(path))
            throw ConfigError("ablation cache is locked by " + path.string() +
                              "; remove the stale lock if no other run is active");
        std::ofstream os(path);
        os << "locked\n";
    }
    ~CacheLock() { std::error_code ec; fs::remove(path, ec); }
};

}  // namespace detail

inline std::vector<AblationCell> run_ablate(const RunConfig& cfg, bool force) {
    cfg.validate();
    const Dataset ds = load_dataset_or_fail(cfg);
    const fs::path root = fs::path(cfg.paths.reports) / "ablate";
    fs::create_directories(root);
    detail::CacheLock lock(root / ".lock");

    // Two model stacks: the perceptually-optimized AE and the plain one
    // (pixel losses plus a constant, non-ramped KL weight; no perceptual term).
    auto variant_cfg = [&](bool p_ae) {
        RunConfig c = cfg;
        c.paths.checkpoints = (root / (p_ae ? "models_pae" : "models_plain")).string();
        if (!p_ae) {
            c.ae.pl_final = 0.0;
            c.ae.ramp_start = 0;
            c.ae.ramp_end = 0;  // constant KL weight from step 0
        }
        return c;
    };
    for (bool p_ae : {false, true}) {
        const RunConfig vc = variant_cfg(p_ae);
        const fs::path done = fs::path(vc.paths.checkpoints) / ".done";
        if (fs::exists(done) && !force) {
            std::cout << "ablate: cached models for P-AE=" << (p_ae ? "on" : "off") << "; skipping training\n";
            continue;
        }
        std::cout << "ablate: training models for P-AE=" << (p_ae ? "on" : "off") << "\n";
        run_train_ae(vc);
        run_train_ldm(vc);
        std::ofstream(done) << "done\n";
    }

    std::vector<AblationCell> cells;
    const bool grid[4][2] = {{false, false}, {true, false}, {false, true}, {true, true}};  // comparison-table order
    for (const auto& g : grid) {
        const bool p_ae = g[0], q_sp = g[1];
        AblationCell cell;
        cell.p_ae = p_ae;
        cell.q_sp = q_sp;
        const std::string tag = std::string("pae") + (p_ae ? "1" : "0") + "_qsp" + (q_sp ? "1" : "0");
        const fs::path cell_dir = root / tag;
        try {
            RunConfig vc = variant_cfg(p_ae);
            vc.sampler.kind = q_sp ? "ddim" : "ddpm";
            vc.paths.reports = cell_dir.string();
            const fs::path cell_done = cell_dir / ".done";
            if (fs::exists(cell_done) && !force) {
                std::cout << "ablate: cell " << tag << " cached; skipping\n";
                std::ifstream is(cell_dir / "report.csv");
                cell.report = parse_report_csv(is);
                const auto tj = ordered_json::parse(read_file_bytes(cell_dir / "cell_timing.json"));
                cell.time_seconds = tj.at("median_seconds").get<double>();
            } else {
                // median of 3 timed denoise passes over the test split
                std::vector<double> times;
                DenoiseRunResult dn;
                for (int rep = 0; rep < 3; ++rep) {
                    dn = run_denoise(vc, "", (cell_dir / "denoised").string());
                    times.push_back(dn.total_seconds);
                }
                std::sort(times.begin(), times.end());
                cell.time_seconds = times[1];
                const auto ev = run_eval(vc, (cell_dir / "denoised").string(), "");
                cell.report = ev.report;
                ordered_json tj{{"median_seconds", cell.time_seconds}, {"runs", times}};
                const std::string ttext = tj.dump(2) + "\n";
                write_file_bytes(cell_dir / "cell_timing.json", ttext.data(), ttext.size());
                std::ofstream(cell_done) << "done\n";
            }
        } catch (const std::exception& e) {
            throw NumericError("ablation cell " + tag + " failed: " + e.what());
        }
        cells.push_back(std::move(cell));
    }

    // combined comparison table
    std::vector<TableRow> rows;
    for (const auto& c : cells) {
        const std::string label = std::string(c.p_ae ? "P-AE " : "base ") + (c.q_sp ? "+ Q-SP" : "+ full-T");
        rows.push_back({label, c.report.mean_psnr, c.report.mean_ssim, c.report.mean_lpips, c.time_seconds});
    }
    {
        std::ofstream os(root / "ablation_table.txt");
        write_aligned_table(rows, os);
        std::ofstream cs(root / "ablation.csv");
        cs << "p_ae,q_sp,psnr_db,ssim,lpips,time_s\n";
        for (const auto& c : cells)
            cs << (c.p_ae ? 1 : 0) << "," << (c.q_sp ? 1 : 0) << "," << format_g17(c.report.mean_psnr) << ","
               << format_g17(c.report.mean_ssim) << "," << format_g17(c.report.mean_lpips) << ","
               << format_g17(c.time_seconds) << "\n";
    }
    std::cout << "ablate: wrote " << (root / "ablation_table.txt").string() << "\n";
    return cells;
}

// ---------------------------------------------------------------------------
// dump-schedule

inline void run_dump_schedule(const RunConfig& cfg, const std::string& out_path) {
    cfg.validate();
    const NoiseSchedule s = build_cosine_schedule(cfg.ldm.T, cfg.ldm.eps_sched);
    if (out_path.empty() || out_path == "-") {
        dump_schedule(s, std::cout);
    } else {
        std::ofstream os(out_path);
        if (!os) throw IoError("cannot open " + out_path);
        dump_schedule(s, os);
        std::cout << "dump-schedule: wrote " << (s.T + 1) << " rows to " << out_path << "\n";
    }
}

}  // namespace ctdn::pipeline
