#pragma once

// Synthetic CT phantoms (additive anti-aliased ellipses), low-dose noise
// simulation, HU windowing for ingested slices, patient-wise splitting, and
// the on-disk dataset container (manifest + one binary payload per image,
// CRC-32 checked).

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctdn/errors.hpp"
#include "ctdn/hash.hpp"
#include "ctdn/io.hpp"
#include "ctdn/rng.hpp"
#include "ctdn/tensor.hpp"

namespace ctdn {

using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Phantom generation

struct PhantomSpec {
    uint64_t seed = 0;
    int size = 64;
    int min_ellipses = 4, max_ellipses = 9;
    double min_intensity = -0.45, max_intensity = 0.45;  // additive amplitudes
    double background = -0.8;
};

// Deterministic piecewise-smooth phantom: a body ellipse plus additive
// internal ellipses, 3x3 supersampled at the boundaries, clamped to [-1,1].
inline Tensor generate_phantom(const PhantomSpec& spec) {
    require(spec.size >= 8, "phantom size too small");
    require(spec.min_ellipses >= 0 && spec.max_ellipses >= spec.min_ellipses, "bad ellipse count range");
    Rng rng(spec.seed);
    struct Ellipse {
        double cx, cy, a, b, phi, amp;
    };
    std::vector<Ellipse> shapes;
    const int count = rng.uniform_int(spec.min_ellipses, spec.max_ellipses);
    if (count > 0)
        // Body outline first so tissue sits on an anatomy-like support.
        shapes.push_back({0.5, 0.5, 0.42 + 0.05 * rng.uniform(), 0.34 + 0.08 * rng.uniform(),
                          0.3 * (rng.uniform() - 0.5), 0.55});
    for (int i = 0; i < count; ++i) {
        const double cx = 0.2 + 0.6 * rng.uniform();
        const double cy = 0.2 + 0.6 * rng.uniform();
        const double a = 0.04 + 0.22 * rng.uniform();
        const double b = 0.04 + 0.22 * rng.uniform();
        const double phi = 2.0 * M_PI * rng.uniform();
        const double amp = spec.min_intensity + (spec.max_intensity - spec.min_intensity) * rng.uniform();
        shapes.push_back({cx, cy, a, b, phi, amp});
    }

    const int n = spec.size;
    Tensor img(1, n, n, 1);
    const double inv = 1.0 / double(n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double acc = spec.background;
            for (const auto& e : shapes) {
                // 3x3 subsample coverage for anti-aliased edges
                int inside = 0;
                for (int sy = 0; sy < 3; ++sy)
                    for (int sx = 0; sx < 3; ++sx) {
                        const double px = (x + (sx + 0.5) / 3.0) * inv - e.cx;
                        const double py = (y + (sy + 0.5) / 3.0) * inv - e.cy;
                        const double c = std::cos(e.phi), s = std::sin(e.phi);
                        const double u = (px * c + py * s) / e.a;
                        const double v = (-px * s + py * c) / e.b;
                        if (u * u + v * v <= 1.0) ++inside;
                    }
                acc += e.amp * double(inside) / 9.0;
            }
            img.at(0, y, x, 0) = float(std::clamp(acc, -1.0, 1.0));
        }
    return img;
}

// ---------------------------------------------------------------------------
// Dose simulation

enum class DoseKind { Gaussian, PoissonGaussian };

struct DoseModel {
    DoseKind kind = DoseKind::Gaussian;
    double sigma = 0.1;          // normalized intensity units
    double photon_scale = 1000;  // poisson-gaussian only
    uint64_t seed = 0;
};

inline Tensor simulate_ldct(const Tensor& fdct, const DoseModel& dose) {
    require(dose.sigma > 0.0, "dose sigma must be > 0");
    require(fdct.all_finite(), "fdct image not finite");
    Rng rng(dose.seed);
    Tensor out = Tensor::zeros_like(fdct);
    if (dose.kind == DoseKind::Gaussian) {
        for (size_t i = 0; i < fdct.v.size(); ++i)
            out.v[i] = float(std::clamp(double(fdct.v[i]) + dose.sigma * rng.normal(), -1.0, 1.0));
        return out;
    }
    require(dose.photon_scale > 0.0, "photon scale must be > 0");
    for (size_t i = 0; i < fdct.v.size(); ++i) {
        // photon-count transform, Poisson draw, inverse transform
        const double intensity = (double(fdct.v[i]) + 1.0) * 0.5;
        const double counts = double(rng.poisson(intensity * dose.photon_scale));
        const double back = counts / dose.photon_scale * 2.0 - 1.0;
        out.v[i] = float(std::clamp(back + dose.sigma * rng.normal(), -1.0, 1.0));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Patient records and splitting

struct PatientRecord {
    std::string patient_id;
    std::vector<std::string> slice_ids;
    std::string anatomy = "abdomen";  // abdomen | chest
};

struct SplitRatios {
    double train = 0.7, val = 0.15, test = 0.15;
};

struct PatientSplit {
    std::vector<PatientRecord> train, val, test;
};

// Patient-granular split: every slice of a patient lands in exactly one
// split. Non-train splits get floor(ratio*n) patients but at least one when
// their ratio is nonzero; the remainder rounds toward train.
inline PatientSplit patient_split(std::vector<PatientRecord> records, const SplitRatios& ratios, uint64_t seed) {
    require(ratios.train > 0.0 || ratios.val > 0.0 || ratios.test > 0.0, "all split ratios are zero");
    require(ratios.train >= 0.0 && ratios.val >= 0.0 && ratios.test >= 0.0, "split ratios must be nonnegative");
    const double sum = ratios.train + ratios.val + ratios.test;
    require(std::abs(sum - 1.0) < 1e-9, "split ratios must sum to 1");
    const int n = int(records.size());
    int nonzero = (ratios.train > 0) + (ratios.val > 0) + (ratios.test > 0);
    require(n >= nonzero, "fewer patients than nonzero splits");

    // duplicate patient ids would silently leak across splits
    {
        std::vector<std::string> ids;
        for (const auto& r : records) ids.push_back(r.patient_id);
        std::sort(ids.begin(), ids.end());
        require(std::adjacent_find(ids.begin(), ids.end()) == ids.end(), "duplicate patient id");
    }

    Rng rng(seed);
    rng.shuffle(records);
    auto quota = [&](double ratio) { return ratio > 0.0 ? std::max(1, int(std::floor(ratio * n))) : 0; };
    int n_val = quota(ratios.val), n_test = quota(ratios.test);
    int n_train = n - n_val - n_test;
    require(n_train >= (ratios.train > 0 ? 1 : 0), "not enough patients for the requested ratios");

    PatientSplit out;
    int i = 0;
    for (; i < n_train; ++i) out.train.push_back(records[size_t(i)]);
    for (; i < n_train + n_val; ++i) out.val.push_back(records[size_t(i)]);
    for (; i < n; ++i) out.test.push_back(records[size_t(i)]);
    return out;
}

// ---------------------------------------------------------------------------
// HU windowing for ingested slices

inline Tensor normalize_hu(const std::vector<int32_t>& raw, int h, int w, double center, double width) {
    require(width > 0.0, "window width must be > 0");
    require(int64_t(raw.size()) == int64_t(h) * w, "raw grid size mismatch");
    Tensor out(1, h, w, 1);
    const double lo = center - width / 2.0;
    for (size_t i = 0; i < raw.size(); ++i)
        out.v[i] = float(std::clamp((double(raw[i]) - lo) / width * 2.0 - 1.0, -1.0, 1.0));
    return out;
}

inline double denormalize_hu(double value, double center, double width) {
    require(width > 0.0, "window width must be > 0");
    return (std::clamp(value, -1.0, 1.0) + 1.0) / 2.0 * width + (center - width / 2.0);
}

// ---------------------------------------------------------------------------
// Dataset container

struct DatasetItem {
    std::string id;
    std::string patient_id;
    Tensor fd;  // clean
    Tensor ld;  // low-dose counterpart
    PhantomSpec spec;
    uint64_t dose_seed = 0;
};

struct Dataset {
    int image_size = 64;
    DoseModel dose;
    uint64_t base_seed = 0;
    std::vector<PatientRecord> patients;
    std::vector<DatasetItem> items;

    const DatasetItem& item_by_id(const std::string& id) const {
        for (const auto& it : items)
            if (it.id == id) return it;
        throw ArgumentError("no dataset item with id " + id);
    }
};

inline Dataset make_synthetic_dataset(int n_patients, int slices_per_patient, int size, const DoseModel& dose,
                                      uint64_t base_seed) {
    require(n_patients >= 1 && slices_per_patient >= 1, "dataset shape must be positive");
    Dataset ds;
    ds.image_size = size;
    ds.dose = dose;
    ds.base_seed = base_seed;
    char buf[64];
    for (int p = 0; p < n_patients; ++p) {
        PatientRecord rec;
        std::snprintf(buf, sizeof buf, "patient%03d", p);
        rec.patient_id = buf;
        rec.anatomy = (p % 2 == 0) ? "abdomen" : "chest";
        for (int s = 0; s < slices_per_patient; ++s) {
            std::snprintf(buf, sizeof buf, "%s_slice%03d", rec.patient_id.c_str(), s);
            DatasetItem item;
            item.id = buf;
            item.patient_id = rec.patient_id;
            item.spec.seed = base_seed + uint64_t(p) * 1000003ULL + uint64_t(s) * 10007ULL;
            item.spec.size = size;
            item.dose_seed = dose.seed + uint64_t(p) * 7919ULL + uint64_t(s) * 104729ULL + 1ULL;
            item.fd = generate_phantom(item.spec);
            DoseModel d = dose;
            d.seed = item.dose_seed;
            item.ld = simulate_ldct(item.fd, d);
            rec.slice_ids.push_back(item.id);
            ds.items.push_back(std::move(item));
        }
        ds.patients.push_back(std::move(rec));
    }
    return ds;
}

namespace detail {
inline ordered_json spec_to_json(const PhantomSpec& s) {
    return ordered_json{{"seed", s.seed},
                        {"size", s.size},
                        {"min_ellipses", s.min_ellipses},
                        {"max_ellipses", s.max_ellipses},
                        {"min_intensity", s.min_intensity},
                        {"max_intensity", s.max_intensity},
                        {"background", s.background}};
}
inline PhantomSpec spec_from_json(const ordered_json& j) {
    PhantomSpec s;
    s.seed = j.at("seed").get<uint64_t>();
    s.size = j.at("size").get<int>();
    s.min_ellipses = j.at("min_ellipses").get<int>();
    s.max_ellipses = j.at("max_ellipses").get<int>();
    s.min_intensity = j.at("min_intensity").get<double>();
    s.max_intensity = j.at("max_intensity").get<double>();
    s.background = j.at("background").get<double>();
    return s;
}
}  // namespace detail

constexpr int kDatasetFormatVersion = 1;

inline void persist_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    ordered_json manifest;
    manifest["version"] = kDatasetFormatVersion;
    manifest["image_size"] = ds.image_size;
    manifest["base_seed"] = ds.base_seed;
    manifest["dose"] = ordered_json{{"kind", ds.dose.kind == DoseKind::Gaussian ? "gaussian" : "poisson-gaussian"},
                                    {"sigma", ds.dose.sigma},
                                    {"photon_scale", ds.dose.photon_scale},
                                    {"seed", ds.dose.seed}};
    manifest["patients"] = ordered_json::array();
    for (const auto& p : ds.patients)
        manifest["patients"].push_back(
            ordered_json{{"id", p.patient_id}, {"anatomy", p.anatomy}, {"slices", p.slice_ids}});
    manifest["items"] = ordered_json::array();
    for (const auto& it : ds.items) {
        const auto fd_bytes = tensor_bytes(it.fd);
        const auto ld_bytes = tensor_bytes(it.ld);
        const std::string fd_file = it.id + "_fd.bin";
        const std::string ld_file = it.id + "_ld.bin";
        write_file_bytes(dir / fd_file, fd_bytes);
        write_file_bytes(dir / ld_file, ld_bytes);
        manifest["items"].push_back(ordered_json{{"id", it.id},
                                                 {"patient", it.patient_id},
                                                 {"height", it.fd.h()},
                                                 {"width", it.fd.w()},
                                                 {"fd_file", fd_file},
                                                 {"ld_file", ld_file},
                                                 {"fd_crc32", crc32(fd_bytes.data(), fd_bytes.size())},
                                                 {"ld_crc32", crc32(ld_bytes.data(), ld_bytes.size())},
                                                 {"dose_seed", it.dose_seed},
                                                 {"spec", detail::spec_to_json(it.spec)}});
    }
    const std::string text = manifest.dump(2) + "\n";
    write_file_bytes(dir / "manifest.json", text.data(), text.size());
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path)) throw IoError("dataset manifest not found: " + manifest_path.string());
    ordered_json manifest;
    try {
        manifest = ordered_json::parse(read_file_bytes(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("dataset manifest parse failure: " + std::string(e.what()));
    }
    if (!manifest.contains("version") || manifest["version"].get<int>() != kDatasetFormatVersion)
        throw IoError("dataset manifest field 'version': unsupported value");

    Dataset ds;
    ds.image_size = manifest.at("image_size").get<int>();
    ds.base_seed = manifest.at("base_seed").get<uint64_t>();
    const auto& dj = manifest.at("dose");
    ds.dose.kind = dj.at("kind").get<std::string>() == "gaussian" ? DoseKind::Gaussian : DoseKind::PoissonGaussian;
    ds.dose.sigma = dj.at("sigma").get<double>();
    ds.dose.photon_scale = dj.at("photon_scale").get<double>();
    ds.dose.seed = dj.at("seed").get<uint64_t>();
    for (const auto& pj : manifest.at("patients")) {
        PatientRecord rec;
        rec.patient_id = pj.at("id").get<std::string>();
        rec.anatomy = pj.at("anatomy").get<std::string>();
        for (const auto& s : pj.at("slices")) rec.slice_ids.push_back(s.get<std::string>());
        ds.patients.push_back(std::move(rec));
    }
    for (const auto& ij : manifest.at("items")) {
        DatasetItem item;
        item.id = ij.at("id").get<std::string>();
        item.patient_id = ij.at("patient").get<std::string>();
        const int h = ij.at("height").get<int>(), w = ij.at("width").get<int>();
        const auto fd_bytes = read_file_bytes(dir / ij.at("fd_file").get<std::string>());
        const auto ld_bytes = read_file_bytes(dir / ij.at("ld_file").get<std::string>());
        if (crc32(fd_bytes.data(), fd_bytes.size()) != ij.at("fd_crc32").get<uint32_t>())
            throw IoError("dataset checksum failure in field 'fd_crc32' for item " + item.id);
        if (crc32(ld_bytes.data(), ld_bytes.size()) != ij.at("ld_crc32").get<uint32_t>())
            throw IoError("dataset checksum failure in field 'ld_crc32' for item " + item.id);
        item.fd = tensor_from_bytes(fd_bytes, 1, h, w, 1);
        item.ld = tensor_from_bytes(ld_bytes, 1, h, w, 1);
        item.spec = detail::spec_from_json(ij.at("spec"));
        item.dose_seed = ij.at("dose_seed").get<uint64_t>();
        ds.items.push_back(std::move(item));
    }
    return ds;
}

}  // namespace ctdn
