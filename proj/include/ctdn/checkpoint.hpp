#pragma once

// Single-file checkpoint archive:
//   magic "CTDNCKPT" | u64 manifest length | manifest JSON | f32 LE payload
// The manifest lists parameter names, shapes, dtype, byte offsets into the
// payload, the model config, the training step counter, and a payload CRC.
// Round-trips are bit-exact; the writer is fully deterministic (ordered
// manifest keys, fixed parameter visit order, no timestamps).

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctdn/autoencoder.hpp"
#include "ctdn/diffusion.hpp"
#include "ctdn/errors.hpp"
#include "ctdn/hash.hpp"
#include "ctdn/io.hpp"

namespace ctdn {

using ordered_json = nlohmann::ordered_json;

constexpr char kCheckpointMagic[9] = "CTDNCKPT";
constexpr int kCheckpointVersion = 1;

struct NamedTensorRef {
    std::string name;
    Tensor* tensor;
};

inline void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const ordered_json& config,
                            int64_t step, const std::vector<NamedTensorRef>& params) {
    std::vector<uint8_t> payload;
    ordered_json manifest;
    manifest["format_version"] = kCheckpointVersion;
    manifest["kind"] = kind;
    manifest["step"] = step;
    manifest["config"] = config;
    manifest["params"] = ordered_json::array();
    for (const auto& p : params) {
        const size_t offset = payload.size();
        const size_t nbytes = p.tensor->v.size() * sizeof(float);
        payload.resize(offset + nbytes);
        std::memcpy(payload.data() + offset, p.tensor->v.data(), nbytes);
        manifest["params"].push_back(ordered_json{{"name", p.name},
                                                  {"shape", p.tensor->shape},
                                                  {"dtype", "f32"},
                                                  {"offset", offset},
                                                  {"nbytes", nbytes}});
    }
    manifest["payload_crc32"] = crc32(payload.data(), payload.size());

    const std::string mtext = manifest.dump();
    std::vector<uint8_t> file;
    file.insert(file.end(), kCheckpointMagic, kCheckpointMagic + 8);
    uint64_t mlen = mtext.size();
    const auto* lp = reinterpret_cast<const uint8_t*>(&mlen);
    file.insert(file.end(), lp, lp + 8);
    file.insert(file.end(), mtext.begin(), mtext.end());
    file.insert(file.end(), payload.begin(), payload.end());
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    write_file_bytes(path, file);
}

struct LoadedCheckpoint {
    ordered_json manifest;
    std::vector<uint8_t> payload;

    int64_t step() const { return manifest.at("step").get<int64_t>(); }
    std::string kind() const { return manifest.at("kind").get<std::string>(); }
    const ordered_json& config() const { return manifest.at("config"); }

    void fill(const std::string& name, Tensor& dst) const {
        for (const auto& pj : manifest.at("params")) {
            if (pj.at("name").get<std::string>() != name) continue;
            const auto shape = pj.at("shape").get<std::array<int, 4>>();
            if (shape != dst.shape)
                throw ConfigError("checkpoint param " + name + " has shape (" + std::to_string(shape[0]) + "," +
                                  std::to_string(shape[1]) + "," + std::to_string(shape[2]) + "," +
                                  std::to_string(shape[3]) + "), model wants " + dst.shape_str());
            const size_t offset = pj.at("offset").get<size_t>();
            const size_t nbytes = pj.at("nbytes").get<size_t>();
            if (nbytes != dst.v.size() * sizeof(float) || offset + nbytes > payload.size())
                throw IoError("checkpoint param " + name + " payload bounds are inconsistent");
            std::memcpy(dst.v.data(), payload.data() + offset, nbytes);
            return;
        }
        throw ConfigError("checkpoint is missing parameter " + name);
    }
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw MissingPrerequisiteError("checkpoint not found: " + path.string());
    const auto bytes = read_file_bytes(path);
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw IoError("not a checkpoint file: " + path.string());
    uint64_t mlen = 0;
    std::memcpy(&mlen, bytes.data() + 8, 8);
    if (16 + mlen > bytes.size()) throw IoError("checkpoint manifest length out of bounds: " + path.string());
    LoadedCheckpoint out;
    try {
        out.manifest = ordered_json::parse(bytes.begin() + 16, bytes.begin() + 16 + std::ptrdiff_t(mlen));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint manifest parse failure: " + std::string(e.what()));
    }
    if (out.manifest.at("format_version").get<int>() != kCheckpointVersion)
        throw IoError("checkpoint field 'format_version': unsupported value");
    out.payload.assign(bytes.begin() + 16 + std::ptrdiff_t(mlen), bytes.end());
    if (crc32(out.payload.data(), out.payload.size()) != out.manifest.at("payload_crc32").get<uint32_t>())
        throw IoError("checkpoint payload checksum failure: " + path.string());
    return out;
}

// ---------------------------------------------------------------------------
// Autoencoder

inline ordered_json ae_config_json(const AutoencoderConfig& c) {
    return ordered_json{{"f", c.f},
                        {"base_width", c.base_width},
                        {"latent_channels", c.latent_channels},
                        {"res_blocks", c.res_blocks},
                        {"channel_mults", c.channel_mults}};
}

inline AutoencoderConfig ae_config_from_json(const ordered_json& j) {
    AutoencoderConfig c;
    c.f = j.at("f").get<int>();
    c.base_width = j.at("base_width").get<int>();
    c.latent_channels = j.at("latent_channels").get<int>();
    c.res_blocks = j.at("res_blocks").get<int>();
    c.channel_mults = j.at("channel_mults").get<std::vector<int>>();
    return c;
}

inline void save_autoencoder(const std::filesystem::path& path, Autoencoder& ae, int64_t step) {
    std::vector<NamedTensorRef> refs;
    ae.visit_params([&](const std::string& name, nn::Param& p) { refs.push_back({name, &p.w}); });
    save_checkpoint(path, "autoencoder", ae_config_json(ae.cfg), step, refs);
}

struct LoadedAutoencoder {
    Autoencoder ae;
    int64_t step = 0;
};

inline LoadedAutoencoder load_autoencoder(const std::filesystem::path& path) {
    const auto ck = load_checkpoint(path);
    if (ck.kind() != "autoencoder")
        throw ConfigError("expected an autoencoder checkpoint, found kind '" + ck.kind() + "' in " + path.string());
    LoadedAutoencoder out;
    out.ae = Autoencoder(ae_config_from_json(ck.config()), 0);
    out.step = ck.step();
    out.ae.visit_params([&](const std::string& name, nn::Param& p) { ck.fill(name, p.w); });
    return out;
}

// ---------------------------------------------------------------------------
// Denoiser

inline ordered_json ldm_config_json(const LdmModel& m) {
    return ordered_json{{"latent_channels", m.cfg.latent_channels},
                        {"base_width", m.cfg.base_width},
                        {"channel_mults", m.cfg.channel_mults},
                        {"res_blocks", m.cfg.res_blocks},
                        {"heads", m.cfg.heads},
                        {"temb_dim", m.cfg.temb_dim},
                        {"ctx_dim", m.cfg.ctx_dim},
                        {"mode", m.cfg.mode},
                        {"T", m.T},
                        {"eps_sched", m.eps_sched},
                        {"latent_std", m.latent_std}};
}

inline void save_ldm(const std::filesystem::path& path, LdmModel& m, int64_t step) {
    std::vector<NamedTensorRef> refs;
    m.visit_params([&](const std::string& name, nn::Param& p) { refs.push_back({name, &p.w}); });
    save_checkpoint(path, "denoiser", ldm_config_json(m), step, refs);
}

struct LoadedLdm {
    LdmModel model;
    int64_t step = 0;
};

inline LoadedLdm load_ldm(const std::filesystem::path& path) {
    const auto ck = load_checkpoint(path);
    if (ck.kind() != "denoiser")
        throw ConfigError("expected a denoiser checkpoint, found kind '" + ck.kind() + "' in " + path.string());
    const auto& j = ck.config();
    DenoiserConfig cfg;
    cfg.latent_channels = j.at("latent_channels").get<int>();
    cfg.base_width = j.at("base_width").get<int>();
    cfg.channel_mults = j.at("channel_mults").get<std::vector<int>>();
    cfg.res_blocks = j.at("res_blocks").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.temb_dim = j.at("temb_dim").get<int>();
    cfg.ctx_dim = j.at("ctx_dim").get<int>();
    cfg.mode = j.at("mode").get<std::string>();
    LoadedLdm out;
    out.model = LdmModel(cfg, j.at("T").get<int>(), j.at("eps_sched").get<double>(), 0);
    out.model.latent_std = j.at("latent_std").get<double>();
    out.step = ck.step();
    out.model.visit_params([&](const std::string& name, nn::Param& p) { ck.fill(name, p.w); });
    return out;
}

// git-style content hash of a file on disk, for report provenance.
inline std::string file_git_sha1(const std::filesystem::path& path) {
    return git_blob_sha1(read_file_bytes(path));
}

}  // namespace ctdn
