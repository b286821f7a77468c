#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "ctdn/checkpoint.hpp"

using namespace ctdn;
namespace fs = std::filesystem;

namespace {
fs::path temp_file(const std::string& tag) {
    const fs::path p = fs::temp_directory_path() / ("ctdn_ck_" + tag + ".ckpt");
    fs::remove(p);
    return p;
}
}  // namespace

TEST_CASE("autoencoder checkpoint round-trip is bit-exact") {
    AutoencoderConfig cfg;
    cfg.f = 2;
    cfg.base_width = 8;
    cfg.latent_channels = 2;
    Autoencoder ae(cfg, 123);
    const fs::path p = temp_file("ae");
    save_autoencoder(p, ae, 42);

    auto loaded = load_autoencoder(p);
    REQUIRE(loaded.step == 42);
    REQUIRE(loaded.ae.cfg.f == 2);

    std::vector<std::vector<float>> orig, back;
    ae.visit_params([&](const std::string&, nn::Param& q) { orig.push_back(q.w.v); });
    loaded.ae.visit_params([&](const std::string&, nn::Param& q) { back.push_back(q.w.v); });
    REQUIRE(orig.size() == back.size());
    for (size_t i = 0; i < orig.size(); ++i) REQUIRE(orig[i] == back[i]);

    SECTION("re-saving produces byte-identical files") {
        const fs::path p2 = temp_file("ae2");
        save_autoencoder(p2, loaded.ae, 42);
        REQUIRE(read_file_bytes(p) == read_file_bytes(p2));
        fs::remove(p2);
    }
    SECTION("behavioral equivalence after reload") {
        Rng rng(5);
        Tensor x(1, 16, 16, 1);
        for (auto& v : x.v) v = float(std::tanh(rng.normal()));
        const auto a = ae.encode(x);
        const auto b = loaded.ae.encode(x);
        REQUIRE(a.mu.v == b.mu.v);
    }
    fs::remove(p);
}

TEST_CASE("denoiser checkpoint round-trip keeps config and latent scale") {
    DenoiserConfig cfg;
    cfg.latent_channels = 2;
    cfg.base_width = 8;
    cfg.channel_mults = {1, 2};
    cfg.temb_dim = 8;
    cfg.ctx_dim = 8;
    cfg.heads = 1;
    LdmModel m(cfg, 500, 0.008, 321);
    m.latent_std = 2.75;
    const fs::path p = temp_file("ldm");
    save_ldm(p, m, 7);

    auto loaded = load_ldm(p);
    REQUIRE(loaded.step == 7);
    REQUIRE(loaded.model.T == 500);
    REQUIRE(loaded.model.latent_std == 2.75);
    REQUIRE(loaded.model.cfg.mode == "conditional");

    Rng rng(9);
    Tensor z(1, 8, 8, 2);
    rng.fill_normal(z);
    ConditioningContext none;
    const Tensor a = predict_noise(m, z, 100, none);
    const Tensor b = predict_noise(loaded.model, z, 100, none);
    REQUIRE(a.v == b.v);
    fs::remove(p);
}

TEST_CASE("checkpoint error paths") {
    SECTION("missing file is a missing prerequisite") {
        CHECK_THROWS_AS(load_checkpoint("/tmp/ctdn_nonexistent.ckpt"), MissingPrerequisiteError);
    }
    SECTION("corrupted payload fails the checksum") {
        AutoencoderConfig cfg;
        cfg.f = 1;
        cfg.base_width = 8;
        cfg.latent_channels = 2;
        Autoencoder ae(cfg, 1);
        const fs::path p = temp_file("bad");
        save_autoencoder(p, ae, 0);
        auto bytes = read_file_bytes(p);
        bytes[bytes.size() - 3] ^= 0x55;
        write_file_bytes(p, bytes);
        CHECK_THROWS_AS(load_checkpoint(p), IoError);
        fs::remove(p);
    }
    SECTION("wrong kind is a configuration error") {
        AutoencoderConfig cfg;
        cfg.f = 1;
        cfg.base_width = 8;
        cfg.latent_channels = 2;
        Autoencoder ae(cfg, 1);
        const fs::path p = temp_file("kind");
        save_autoencoder(p, ae, 0);
        CHECK_THROWS_AS(load_ldm(p), ConfigError);
        fs::remove(p);
    }
    SECTION("not a checkpoint file") {
        const fs::path p = temp_file("junk");
        const std::string junk = "definitely not a checkpoint";
        write_file_bytes(p, junk.data(), junk.size());
        CHECK_THROWS_AS(load_checkpoint(p), IoError);
        fs::remove(p);
    }
}

TEST_CASE("git blob hash matches the reference value") {
    // sha1("blob 12\0hello world\n") -- the value `git hash-object` prints.
    const std::string content = "hello world\n";
    std::vector<uint8_t> bytes(content.begin(), content.end());
    REQUIRE(git_blob_sha1(bytes) == "3b18e512dba79e4c8300dd08aeb37f8e728b8dad");
}
