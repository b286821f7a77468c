#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "ctdn/metrics.hpp"
#include "ctdn/rng.hpp"

using namespace ctdn;

namespace {
Tensor random_image(int h, int w, uint64_t seed) {
    Rng rng(seed);
    Tensor x(1, h, w, 1);
    for (auto& v : x.v) v = float(std::tanh(rng.normal()));
    return x;
}
}  // namespace

TEST_CASE("psnr") {
    const Tensor x = random_image(16, 16, 1);

    SECTION("identical images give the infinity sentinel") {
        REQUIRE(std::isinf(psnr(x, x, 2.0)));
        REQUIRE(psnr(x, x, 2.0) > 0);
    }
    SECTION("uniform squared error of range^2/100 gives 20 dB") {
        Tensor a(1, 8, 8, 1), b(1, 8, 8, 1);
        for (auto& v : b.v) v = 0.1f;
        // 0.1 is not exactly representable in binary floats; 1e-6 here
        REQUIRE_THAT(psnr(a, b, 1.0), Catch::Matchers::WithinAbs(20.0, 1e-6));
        // exactly-representable variant: diff 0.25, range 2.5 -> exact 20 dB
        Tensor c(1, 8, 8, 1);
        for (auto& v : c.v) v = 0.25f;
        REQUIRE_THAT(psnr(a, c, 2.5), Catch::Matchers::WithinAbs(20.0, 1e-9));
    }
    SECTION("halving the MSE raises PSNR by 10 log10 2") {
        Tensor a(1, 8, 8, 1), b(1, 8, 8, 1), c(1, 8, 8, 1);
        for (auto& v : b.v) v = 0.2f;
        for (auto& v : c.v) v = float(0.2 / std::sqrt(2.0));
        REQUIRE_THAT(psnr(a, c, 1.0) - psnr(a, b, 1.0), Catch::Matchers::WithinAbs(3.0102999566398120, 1e-6));
    }
    SECTION("strictly decreasing in MSE") {
        Tensor base(1, 8, 8, 1);
        double prev = std::numeric_limits<double>::infinity();
        for (float off : {0.01f, 0.05f, 0.2f, 0.7f}) {
            Tensor y(1, 8, 8, 1);
            for (auto& v : y.v) v = off;
            const double p = psnr(base, y, 2.0);
            REQUIRE(p < prev);
            prev = p;
        }
    }
    SECTION("argument errors") {
        CHECK_THROWS_AS(psnr(x, random_image(8, 16, 2), 2.0), ArgumentError);
        CHECK_THROWS_AS(psnr(x, x, 0.0), ArgumentError);
    }
}

TEST_CASE("ssim") {
    const Tensor x = random_image(32, 32, 3);

    SECTION("identical images give exactly one") { REQUIRE(ssim(x, x) == 1.0); }
    SECTION("sign flip of a zero-mean image scores below one") {
        Tensor zm = x;
        double mean = 0;
        for (float v : zm.v) mean += v;
        mean /= double(zm.v.size());
        for (auto& v : zm.v) v -= float(mean);
        Tensor neg = zm;
        for (auto& v : neg.v) v = -v;
        REQUIRE(ssim(zm, neg) < 1.0);
    }
    SECTION("symmetric to 1e-12") {
        const Tensor y = random_image(32, 32, 4);
        REQUIRE_THAT(ssim(x, y), Catch::Matchers::WithinAbs(ssim(y, x), 1e-12));
    }
    SECTION("window larger than the image is rejected") {
        CHECK_THROWS_AS(ssim(random_image(8, 8, 5), random_image(8, 8, 6), 11), ArgumentError);
        CHECK_THROWS_AS(ssim(x, x, 10), ArgumentError);  // even window
    }
    SECTION("bounded by [-1, 1] on random pairs") {
        for (uint64_t s = 0; s < 10; ++s) {
            const double v = ssim(random_image(16, 16, 10 + s), random_image(16, 16, 20 + s));
            REQUIRE(v >= -1.0);
            REQUIRE(v <= 1.0);
        }
    }
}

TEST_CASE("lpips") {
    const FeatureExtractor rnd = FeatureExtractor::fixed_random(17);
    const FeatureExtractor ident = FeatureExtractor::identity();
    const Tensor x = random_image(16, 16, 7);
    const Tensor y = random_image(16, 16, 8);

    SECTION("zero at identical inputs") {
        REQUIRE(lpips(x, x, rnd) == 0.0);
    }
    SECTION("symmetric and nonnegative") {
        const double a = lpips(x, y, rnd);
        REQUIRE(a >= 0.0);
        REQUIRE_THAT(a, Catch::Matchers::WithinRel(lpips(y, x, rnd), 1e-12));
    }
    SECTION("hand-computed value on a 2x2 two-channel feature map") {
        // per position (channel pairs): normalized features and squared
        // half-differences: (2,0)|(0,3) -> 0.5; (3,4)|(5,0) -> 0.2;
        // (0,-7)|(0,-1) -> 0; (1,1)|(1,1) -> 0. Mean over 4 positions: 0.175.
        Tensor fx(1, 2, 2, 2), fy(1, 2, 2, 2);
        fx.at(0, 0, 0, 0) = 2;  fx.at(0, 0, 0, 1) = 0;
        fy.at(0, 0, 0, 0) = 0;  fy.at(0, 0, 0, 1) = 3;
        fx.at(0, 0, 1, 0) = 3;  fx.at(0, 0, 1, 1) = 4;
        fy.at(0, 0, 1, 0) = 5;  fy.at(0, 0, 1, 1) = 0;
        fx.at(0, 1, 0, 0) = 0;  fx.at(0, 1, 0, 1) = -7;
        fy.at(0, 1, 0, 0) = 0;  fy.at(0, 1, 0, 1) = -1;
        fx.at(0, 1, 1, 0) = 1;  fx.at(0, 1, 1, 1) = 1;
        fy.at(0, 1, 1, 0) = 1;  fy.at(0, 1, 1, 1) = 1;
        REQUIRE_THAT(lpips(fx, fy, ident), Catch::Matchers::WithinAbs(0.175, 1e-6));
        REQUIRE_THAT(lpips(fx, fy, ident, {1.0}), Catch::Matchers::WithinAbs(0.175, 1e-6));
    }
    SECTION("layer weight count mismatch") {
        CHECK_THROWS_AS(lpips(x, y, rnd, {1.0}), ArgumentError);  // extractor has 3 layers
        CHECK_THROWS_AS(lpips(x, y, ident, {1.0, 1.0}), ArgumentError);
    }
    SECTION("shape mismatch") {
        CHECK_THROWS_AS(lpips(x, random_image(8, 16, 9), rnd), ArgumentError);
    }
}

TEST_CASE("evaluate_set") {
    std::vector<std::pair<std::string, Tensor>> refs, preds;
    for (int i = 0; i < 3; ++i) {
        const std::string id = "img" + std::to_string(i);
        refs.emplace_back(id, random_image(16, 16, 30 + uint64_t(i)));
        preds.emplace_back(id, random_image(16, 16, 40 + uint64_t(i)));
    }
    EvalConfig cfg;

    SECTION("identical predictions hit the sentinel row") {
        const auto report = evaluate_set(refs, refs, cfg);
        REQUIRE(std::isinf(report.mean_psnr));
        REQUIRE(report.mean_ssim == 1.0);
        REQUIRE(report.mean_lpips == 0.0);
    }
    SECTION("single-image aggregates equal the record") {
        const auto report =
            evaluate_set({{preds[0].first, preds[0].second}}, {{refs[0].first, refs[0].second}}, cfg);
        REQUIRE(report.records.size() == 1);
        REQUIRE(report.mean_psnr == report.records[0].psnr_db);
        REQUIRE(report.std_psnr == 0.0);
    }
    SECTION("aggregates equal mean/std of records to 1e-12") {
        const auto report = evaluate_set(preds, refs, cfg);
        double mean = 0;
        for (const auto& r : report.records) mean += r.psnr_db;
        mean /= 3.0;
        double var = 0;
        for (const auto& r : report.records) var += (r.psnr_db - mean) * (r.psnr_db - mean);
        var /= 2.0;
        REQUIRE_THAT(report.mean_psnr, Catch::Matchers::WithinAbs(mean, 1e-12));
        REQUIRE_THAT(report.std_psnr, Catch::Matchers::WithinAbs(std::sqrt(var), 1e-12));
    }
    SECTION("id mismatch names the missing ids") {
        auto bad = preds;
        bad[1].first = "mystery";
        try {
            evaluate_set(bad, refs, cfg);
            FAIL("expected id mismatch");
        } catch (const ArgumentError& e) {
            REQUIRE(std::string(e.what()).find("mystery") != std::string::npos);
        }
    }
    SECTION("csv round-trip preserves records and aggregates") {
        const auto report = evaluate_set(preds, refs, cfg);
        std::ostringstream os;
        write_report_csv(report, os, {"config: test"});
        std::istringstream is(os.str());
        const auto back = parse_report_csv(is);
        REQUIRE(back.records.size() == report.records.size());
        REQUIRE(back.mean_psnr == report.mean_psnr);
        REQUIRE(back.std_lpips == report.std_lpips);
        // serialize again: byte-identical
        std::ostringstream os2;
        write_report_csv(back, os2, {"config: test"});
        REQUIRE(os.str() == os2.str());
    }
}

TEST_CASE("aligned table carries the direction markers") {
    std::vector<TableRow> rows{{"quick-sampler", 31.16, 0.703, 0.119, 18.8}, {"ancestral", 29.44, 0.655, 0.312, 197.0}};
    std::ostringstream os;
    write_aligned_table(rows, os);
    const std::string s = os.str();
    REQUIRE(s.find("PSNR\xe2\x86\x91") != std::string::npos);
    REQUIRE(s.find("SSIM\xe2\x86\x91") != std::string::npos);
    REQUIRE(s.find("LPIPS\xe2\x86\x93") != std::string::npos);
    REQUIRE(s.find("Time\xe2\x86\x93") != std::string::npos);
    REQUIRE(s.find("quick-sampler") != std::string::npos);
    REQUIRE(s.find("3.28m") != std::string::npos);  // 197 s renders in minutes
}
