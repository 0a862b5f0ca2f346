#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scorelab/io.hpp"
#include "scorelab/version.hpp"

namespace scorelab::cli {

/// Reproducibility record written by every CLI command. The manifest hash
/// covers the command, the full configuration snapshot, the seed and the
/// input-file hashes -- everything that determines the outputs -- and keys
/// the run directory, so identical invocations land in the same place and
/// reproduce identical files. Timestamps and durations are recorded but
/// excluded from the hash.
class RunManifest {
public:
    RunManifest(std::string command, nlohmann::json config_snapshot, std::uint64_t seed)
        : command_(std::move(command)), config_(std::move(config_snapshot)), seed_(seed) {
        start_ = std::chrono::system_clock::now();
        timer_ = std::chrono::steady_clock::now();
    }

    void add_input(const std::string& name, const std::filesystem::path& path) {
        inputs_[name] = {{"path", path.string()}, {"hash", io::file_hash(path)}};
    }

    void add_output(const std::filesystem::path& relative) { outputs_.push_back(relative.string()); }

    std::string hash() const {
        nlohmann::json hashed{{"command", command_},
                              {"config", config_},
                              {"seed", seed_},
                              {"inputs", inputs_},
                              {"tool_version", kVersion}};
        return io::hex64(io::fnv1a(hashed.dump()));
    }

    /// Run directory under `out_root`, keyed by the manifest hash.
    std::filesystem::path run_dir(const std::filesystem::path& out_root) const {
        return out_root / (command_ + "-" + hash().substr(0, 12));
    }

    nlohmann::json to_json() const {
        const auto created = std::chrono::duration_cast<std::chrono::seconds>(start_.time_since_epoch());
        const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - timer_;
        return {{"command", command_},
                {"tool_version", kVersion},
                {"manifest_hash", hash()},
                {"seed", seed_},
                {"config", config_},
                {"inputs", inputs_},
                {"outputs", outputs_},
                {"created_at_unix", created.count()},
                {"duration_seconds", elapsed.count()}};
    }

    /// Writes manifest.json into the run directory.
    void write(const std::filesystem::path& out_root) const {
        io::write_file_atomic(run_dir(out_root) / "manifest.json", to_json().dump(2) + "\n");
    }

    const std::string& command() const { return command_; }
    const nlohmann::json& config() const { return config_; }

private:
    std::string command_;
    nlohmann::json config_;
    std::uint64_t seed_;
    std::map<std::string, nlohmann::json> inputs_;
    std::vector<std::string> outputs_;
    std::chrono::system_clock::time_point start_;
    std::chrono::steady_clock::time_point timer_;
};

}  // namespace scorelab::cli
