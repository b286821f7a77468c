#pragma once

// Image-quality metrics and the evaluation report. PSNR and SSIM follow the
// standard formulations (Gaussian-window SSIM, sigma 1.5, 11x11, K1 = 0.01,
// K2 = 0.03); the learned-feature distance runs over the shared extractor
// with per-position channel unit-normalization.
//
// The desk-scale extractor is a fixed-seed random stack, so learned-feature
// distances are comparable across runs of this codebase but NOT against
// published numbers from pretrained backbones; reports state this in their
// header.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ctdn/errors.hpp"
#include "ctdn/features.hpp"
#include "ctdn/tensor.hpp"

namespace ctdn {

inline double mse(const Tensor& x, const Tensor& y) {
    require(x.same_shape(y), "mse: shape mismatch " + x.shape_str() + " vs " + y.shape_str());
    double acc = 0.0;
    for (size_t i = 0; i < x.v.size(); ++i) {
        const double d = double(x.v[i]) - double(y.v[i]);
        acc += d * d;
    }
    return acc / double(x.v.size());
}

// 10 log10(range^2 / MSE); +inf sentinel when the images are identical.
inline double psnr(const Tensor& x, const Tensor& y, double data_range) {
    require(data_range > 0.0, "psnr: data_range must be > 0");
    const double m = mse(x, y);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(data_range * data_range / m);
}

namespace detail {
inline std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(static_cast<size_t>(size));
    const int half = size / 2;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        const double d = double(i - half);
        w[size_t(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
        sum += w[size_t(i)];
    }
    for (auto& v : w) v /= sum;
    return w;
}
}  // namespace detail

// Mean local SSIM over the valid region, Gaussian window.
inline double ssim(const Tensor& x, const Tensor& y, int window = 11, double k1 = 0.01, double k2 = 0.03,
                   double data_range = 2.0, double sigma = 1.5) {
    require(x.same_shape(y), "ssim: shape mismatch " + x.shape_str() + " vs " + y.shape_str());
    require(x.n() == 1 && x.c() == 1, "ssim expects single-channel (1,h,w,1) tensors");
    require(window % 2 == 1, "ssim window must be odd");
    require(window <= std::min(x.h(), x.w()), "ssim window larger than the image");
    require(data_range > 0.0, "ssim: data_range must be > 0");

    const auto w1d = detail::gaussian_window(window, sigma);
    const int half = window / 2;
    const double c1 = (k1 * data_range) * (k1 * data_range);
    const double c2 = (k2 * data_range) * (k2 * data_range);

    double acc = 0.0;
    size_t count = 0;
    for (int cy = half; cy < x.h() - half; ++cy)
        for (int cx = half; cx < x.w() - half; ++cx) {
            double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
            for (int dy = -half; dy <= half; ++dy)
                for (int dx = -half; dx <= half; ++dx) {
                    const double w = w1d[size_t(dy + half)] * w1d[size_t(dx + half)];
                    const double a = x.at(0, cy + dy, cx + dx, 0);
                    const double b = y.at(0, cy + dy, cx + dx, 0);
                    mx += w * a;
                    my += w * b;
                    mxx += w * a * a;
                    myy += w * b * b;
                    mxy += w * a * b;
                }
            const double vx = mxx - mx * mx;
            const double vy = myy - my * my;
            const double vxy = mxy - mx * my;
            const double num = (2.0 * mx * my + c1) * (2.0 * vxy + c2);
            const double den = (mx * mx + my * my + c1) * (vx + vy + c2);
            acc += num / den;
            ++count;
        }
    return acc / double(count);
}

// sum_l (1/(H_l W_l)) sum_{h,w} || w_l * (phihat_l(x) - phihat_l(y)) / 2 ||^2
// with phihat the per-position channel-unit-normalized features.
inline double lpips(const Tensor& x, const Tensor& y, const FeatureExtractor& extractor,
                    const std::vector<double>& layer_weights = {}) {
    require(x.same_shape(y), "lpips: shape mismatch " + x.shape_str() + " vs " + y.shape_str());
    const auto fx = extractor.features(x);
    const auto fy = extractor.features(y);
    std::vector<double> w = layer_weights;
    if (w.empty()) w.assign(fx.size(), 1.0);
    require(w.size() == fx.size(), "lpips: layer_weights count " + std::to_string(w.size()) +
                                        " does not match extractor layers " + std::to_string(fx.size()));

    constexpr double kNormEps = 1e-10;  // guards constant feature maps
    auto normalize_at = [&](const Tensor& f, int n, int hy, int hx, std::vector<double>& out) {
        double norm2 = 0.0;
        for (int c = 0; c < f.c(); ++c) {
            const double v = f.at(n, hy, hx, c);
            norm2 += v * v;
        }
        const double inv = 1.0 / std::sqrt(std::max(norm2, 0.0) + kNormEps);
        out.resize(size_t(f.c()));
        for (int c = 0; c < f.c(); ++c) out[size_t(c)] = double(f.at(n, hy, hx, c)) * inv;
    };

    double total = 0.0;
    std::vector<double> a, b;
    for (size_t l = 0; l < fx.size(); ++l) {
        const Tensor& gx = fx[l];
        const Tensor& gy = fy[l];
        double layer_acc = 0.0;
        for (int hy = 0; hy < gx.h(); ++hy)
            for (int hx = 0; hx < gx.w(); ++hx) {
                normalize_at(gx, 0, hy, hx, a);
                normalize_at(gy, 0, hy, hx, b);
                double d2 = 0.0;
                for (size_t c = 0; c < a.size(); ++c) {
                    const double d = w[l] * (a[c] - b[c]) * 0.5;
                    d2 += d * d;
                }
                layer_acc += d2;
            }
        total += layer_acc / (double(gx.h()) * double(gx.w()));
    }
    return total;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricRecord {
    std::string id;
    double psnr_db = 0, ssim = 0, lpips = 0;
};

struct MetricReport {
    std::vector<MetricRecord> records;
    double mean_psnr = 0, std_psnr = 0;
    double mean_ssim = 0, std_ssim = 0;
    double mean_lpips = 0, std_lpips = 0;
    double wall_clock_total_s = 0, wall_clock_per_image_s = 0;
    double data_range = 2.0;

    void recompute_aggregates() {
        auto stats = [&](auto get) {
            double mean = 0;
            for (const auto& r : records) mean += get(r);
            mean /= double(records.size());
            double var = 0;
            if (records.size() > 1) {
                for (const auto& r : records) {
                    const double d = get(r) - mean;
                    var += d * d;
                }
                var /= double(records.size() - 1);
            }
            return std::pair<double, double>{mean, std::sqrt(var)};
        };
        require(!records.empty(), "metric report with no records");
        std::tie(mean_psnr, std_psnr) = stats([](const MetricRecord& r) { return r.psnr_db; });
        std::tie(mean_ssim, std_ssim) = stats([](const MetricRecord& r) { return r.ssim; });
        std::tie(mean_lpips, std_lpips) = stats([](const MetricRecord& r) { return r.lpips; });
    }
};

struct EvalConfig {
    double data_range = 2.0;
    int ssim_window = 11;
    // Distinct from the training-time perceptual extractor seed, so the
    // evaluation feature space is independent of the training objective.
    uint64_t extractor_seed = 31337;
};

inline MetricReport evaluate_set(const std::vector<std::pair<std::string, Tensor>>& preds,
                                 const std::vector<std::pair<std::string, Tensor>>& refs, const EvalConfig& cfg,
                                 const FeatureExtractor* extractor = nullptr) {
    std::map<std::string, const Tensor*> ref_by_id;
    for (const auto& [id, t] : refs) ref_by_id[id] = &t;
    std::string missing;
    for (const auto& [id, t] : preds)
        if (ref_by_id.find(id) == ref_by_id.end()) missing += (missing.empty() ? "" : ", ") + id;
    if (preds.size() != refs.size() || !missing.empty())
        throw ArgumentError("evaluate_set: id mismatch; missing references for [" + missing + "] (" +
                            std::to_string(preds.size()) + " predictions vs " + std::to_string(refs.size()) +
                            " references)");

    FeatureExtractor local;
    if (extractor == nullptr) {
        local = FeatureExtractor::fixed_random(cfg.extractor_seed);
        extractor = &local;
    }
    MetricReport report;
    report.data_range = cfg.data_range;
    for (const auto& [id, pred] : preds) {
        const Tensor& ref = *ref_by_id.at(id);
        MetricRecord rec;
        rec.id = id;
        rec.psnr_db = psnr(pred, ref, cfg.data_range);
        rec.ssim = ssim(pred, ref, cfg.ssim_window, 0.01, 0.03, cfg.data_range);
        rec.lpips = lpips(pred, ref, *extractor);
        report.records.push_back(rec);
    }
    report.recompute_aggregates();
    return report;
}

// ---------------------------------------------------------------------------
// Serialization: comma-separated table plus an aligned human-readable table.

inline std::string format_g17(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_report_csv(const MetricReport& r, std::ostream& os,
                             const std::vector<std::string>& provenance_lines = {}) {
    os << "# metric report\n";
    os << "# data_range: " << format_g17(r.data_range) << " (normalized span [-1, 1] maps to 2)\n";
    os << "# lpips: fixed-seed extractor; values comparable within this tool only, not to published numbers\n";
    for (const auto& line : provenance_lines) os << "# " << line << "\n";
    os << "id,psnr_db,ssim,lpips\n";
    for (const auto& rec : r.records)
        os << rec.id << "," << format_g17(rec.psnr_db) << "," << format_g17(rec.ssim) << ","
           << format_g17(rec.lpips) << "\n";
    os << "mean," << format_g17(r.mean_psnr) << "," << format_g17(r.mean_ssim) << "," << format_g17(r.mean_lpips)
       << "\n";
    os << "std," << format_g17(r.std_psnr) << "," << format_g17(r.std_ssim) << "," << format_g17(r.std_lpips) << "\n";
}

inline MetricReport parse_report_csv(std::istream& is) {
    MetricReport r;
    std::string line;
    bool header_seen = false;
    auto parse_num = [](const std::string& s) {
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        return std::stod(s);
    };
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            if (line != "id,psnr_db,ssim,lpips") throw IoError("unexpected report header: " + line);
            header_seen = true;
            continue;
        }
        std::stringstream ss(line);
        std::string id, a, b, c;
        std::getline(ss, id, ',');
        std::getline(ss, a, ',');
        std::getline(ss, b, ',');
        std::getline(ss, c, ',');
        if (id == "mean" || id == "std") continue;  // recomputed below
        r.records.push_back({id, parse_num(a), parse_num(b), parse_num(c)});
    }
    r.recompute_aggregates();
    return r;
}

// Aligned table in the comparison-table layout: method, PSNR up, SSIM up,
// LPIPS down, Time down.
struct TableRow {
    std::string method;
    double psnr_db, ssim, lpips, time_s;
};

inline void write_aligned_table(const std::vector<TableRow>& rows, std::ostream& os) {
    auto fmt_time = [](double s) {
        char buf[32];
        if (!std::isfinite(s) || s <= 0) return std::string("-");
        if (s >= 60.0)
            std::snprintf(buf, sizeof buf, "%.2fm", s / 60.0);
        else
            std::snprintf(buf, sizeof buf, "%.2fs", s);
        return std::string(buf);
    };
    size_t name_w = std::string("Method").size();
    for (const auto& r : rows) name_w = std::max(name_w, r.method.size());
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-*s  %10s  %8s  %8s  %8s\n", int(name_w), "Method", "PSNR\xe2\x86\x91",
                  "SSIM\xe2\x86\x91", "LPIPS\xe2\x86\x93", "Time\xe2\x86\x93");
    os << buf;
    for (const auto& r : rows) {
        char psnr_buf[24];
        if (std::isinf(r.psnr_db))
            std::snprintf(psnr_buf, sizeof psnr_buf, "inf");
        else
            std::snprintf(psnr_buf, sizeof psnr_buf, "%.2f", r.psnr_db);
        std::snprintf(buf, sizeof buf, "%-*s  %8s  %6.3f  %6.4f  %8s\n", int(name_w), r.method.c_str(), psnr_buf,
                      r.ssim, r.lpips, fmt_time(r.time_s).c_str());
        os << buf;
    }
}

}  // namespace ctdn
