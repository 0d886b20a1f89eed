#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmbind/nn.hpp"

namespace mmbind {

struct NamedNet {
    std::string name;
    Mlp net;
};

/// manifest.json (architecture of each network plus `extra`) and a single
/// flat little-endian float32 parameter file, params.f32.
void save_checkpoint(const std::filesystem::path& dir, const std::vector<NamedNet>& nets,
                     const nlohmann::json& extra);

struct LoadedCheckpoint {
    std::vector<NamedNet> nets;
    nlohmann::json extra;

    const Mlp& net(const std::string& name) const;
    bool has(const std::string& name) const;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace mmbind
