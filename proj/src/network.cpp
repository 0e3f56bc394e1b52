#include "nlmf/network.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "nlmf/errors.hpp"

namespace nlmf {

NetworkConfig network_config_from_json(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("network config: invalid JSON: ") + e.what());
    }
    NetworkConfig cfg;
    try {
        if (j.contains("scales")) cfg.scales = j.at("scales").get<int>();
        if (j.contains("k_per_scale")) cfg.k_per_scale = j.at("k_per_scale").get<std::vector<int>>();
        if (j.contains("c_per_scale")) cfg.c_per_scale = j.at("c_per_scale").get<std::vector<int>>();
        if (j.contains("search_radius")) cfg.search_radius = j.at("search_radius").get<int>();
        if (j.contains("matching")) cfg.matching = parse_matching(j.at("matching").get<std::string>());
        if (j.contains("mode")) cfg.mode = j.at("mode").get<std::string>();
        if (j.contains("offset_hidden")) cfg.offset_hidden = j.at("offset_hidden").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("network config: bad field: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

std::string network_config_to_json(const NetworkConfig& cfg) {
    nlohmann::json j;
    j["scales"] = cfg.scales;
    j["k_per_scale"] = cfg.k_per_scale;
    j["c_per_scale"] = cfg.c_per_scale;
    j["search_radius"] = cfg.search_radius;
    j["matching"] = matching_name(cfg.matching);
    j["mode"] = cfg.mode;
    if (cfg.offset_hidden > 0) j["offset_hidden"] = cfg.offset_hidden;
    return j.dump(2);
}

NetworkConfig load_network_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open network config: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return network_config_from_json(ss.str());
}

Tensor denoise_image(const ParamStore& store, const NetworkConfig& cfg, const Tensor& image, const Tensor& noise_map) {
    if (image.shape != noise_map.shape)
        throw std::invalid_argument("denoise: image " + shape_str(image.shape) + " and noise map " +
                                    shape_str(noise_map.shape) + " must have equal shapes");
    const int m = cfg.pad_multiple();
    auto [img_p, rec] = pad_reflect_to_multiple(image, m);
    auto [map_p, rec2] = pad_reflect_to_multiple(noise_map, m);
    (void)rec2;
    Tensor out = network_apply(store, cfg, img_p, map_p);
    return crop_to_record(out, rec);
}

} // namespace nlmf
