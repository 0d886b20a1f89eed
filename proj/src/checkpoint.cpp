#include "mmbind/checkpoint.hpp"

#include "mmbind/error.hpp"
#include "mmbind/io.hpp"

namespace mmbind {

using nlohmann::json;

void save_checkpoint(const std::filesystem::path& dir, const std::vector<NamedNet>& nets, const json& extra) {
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["format"] = "mmbind-checkpoint";
    manifest["version"] = 1;
    manifest["extra"] = extra;
    manifest["params_file"] = "params.f32";
    manifest["networks"] = json::array();
    std::vector<double> params;
    for (const auto& [name, net] : nets) {
        json n;
        n["name"] = name;
        n["dims"] = net.dims();
        n["hidden_activation"] = to_string(net.hidden_activation());
        n["output_activation"] = to_string(net.output_activation());
        n["bias"] = net.empty() || net.layers().front().has_bias();
        n["offset"] = params.size();
        n["count"] = net.parameter_count();
        const auto flat = net.flatten();
        params.insert(params.end(), flat.begin(), flat.end());
        manifest["networks"].push_back(n);
    }
    io::write_f32(dir / "params.f32", params);
    io::write_json(dir / "manifest.json", manifest);
}

const Mlp& LoadedCheckpoint::net(const std::string& name) const {
    for (const auto& n : nets)
        if (n.name == name) return n.net;
    throw FormatError("checkpoint has no network '" + name + "'");
}

bool LoadedCheckpoint::has(const std::string& name) const {
    for (const auto& n : nets)
        if (n.name == name) return true;
    return false;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
    const json manifest = io::read_json(dir / "manifest.json");
    if (manifest.value("format", "") != "mmbind-checkpoint") throw FormatError("not an mmbind checkpoint: " + dir.string());
    LoadedCheckpoint out;
    try {
        out.extra = manifest.at("extra");
        const auto params = io::read_f32(dir / manifest.at("params_file").get<std::string>());
        for (const auto& n : manifest.at("networks")) {
            const auto dims = n.at("dims").get<std::vector<int>>();
            Rng scratch(0);
            Mlp net(dims, activation_from_string(n.at("hidden_activation").get<std::string>()),
                    activation_from_string(n.at("output_activation").get<std::string>()), scratch,
                    n.at("bias").get<bool>());
            const auto offset = n.at("offset").get<std::size_t>();
            const auto count = n.at("count").get<std::size_t>();
            if (count != net.parameter_count() || offset + count > params.size())
                throw ShapeError("checkpoint network '" + n.at("name").get<std::string>() + "' parameter count mismatch");
            net.assign(std::span<const double>(params).subspan(offset, count));
            out.nets.push_back({n.at("name").get<std::string>(), std::move(net)});
        }
    } catch (const json::exception& e) {
        throw FormatError("malformed checkpoint manifest in " + dir.string() + ": " + e.what());
    }
    return out;
}

}  // namespace mmbind
