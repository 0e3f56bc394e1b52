#include "nlmf/raw.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "nlmf/errors.hpp"

namespace nlmf {

Cfa parse_cfa(const std::string& s) {
    std::string u;
    for (char c : s) u.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    if (u == "RGGB") return Cfa::rggb;
    if (u == "BGGR") return Cfa::bggr;
    if (u == "GRBG") return Cfa::grbg;
    if (u == "GBRG") return Cfa::gbrg;
    throw DataError("unknown CFA pattern: " + s);
}

std::string cfa_name(Cfa cfa) {
    switch (cfa) {
        case Cfa::rggb: return "RGGB";
        case Cfa::bggr: return "BGGR";
        case Cfa::grbg: return "GRBG";
        case Cfa::gbrg: return "GBRG";
    }
    return "RGGB";
}

namespace {

// (row, col) of each canonical channel R, Gr, B, Gb inside the 2x2 tile.
struct SiteMap {
    int dy[4];
    int dx[4];
};

SiteMap sites(Cfa cfa) {
    switch (cfa) {
        case Cfa::rggb: return SiteMap{{0, 0, 1, 1}, {0, 1, 1, 0}};
        case Cfa::bggr: return SiteMap{{1, 1, 0, 0}, {1, 0, 0, 1}};
        case Cfa::grbg: return SiteMap{{0, 0, 1, 1}, {1, 0, 0, 1}};
        case Cfa::gbrg: return SiteMap{{1, 1, 0, 0}, {0, 1, 1, 0}};
    }
    return SiteMap{{0, 0, 1, 1}, {0, 1, 1, 0}};
}

} // namespace

void RawImage::validate() const {
    if (mosaic.rank() != 4 || mosaic.dim(0) != 1 || mosaic.dim(1) != 1)
        throw std::invalid_argument("raw mosaic must be 1 x 1 x H x W, got " + shape_str(mosaic.shape));
    if (mosaic.dim(2) % 2 != 0 || mosaic.dim(3) % 2 != 0)
        throw std::invalid_argument("raw mosaic dimensions must be even, got " + std::to_string(mosaic.dim(2)) + "x" +
                                    std::to_string(mosaic.dim(3)));
    for (float bl : black_level)
        if (!(bl < saturation))
            throw std::invalid_argument("raw metadata requires black_level < saturation");
}

PackedRaw pack(const RawImage& raw) {
    raw.validate();
    const int H = raw.mosaic.dim(2), W = raw.mosaic.dim(3);
    const SiteMap sm = sites(raw.cfa);
    PackedRaw out;
    out.data = Tensor(Shape{1, 4, H / 2, W / 2});
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < H / 2; ++i)
            for (int j = 0; j < W / 2; ++j)
                out.data.at4(0, c, i, j) = raw.mosaic.at4(0, 0, 2 * i + sm.dy[c], 2 * j + sm.dx[c]);
    out.cfa = raw.cfa;
    out.black_level = raw.black_level;
    out.saturation = raw.saturation;
    out.iso = raw.iso;
    out.sensor_id = raw.sensor_id;
    return out;
}

RawImage unpack(const PackedRaw& packed) {
    if (packed.data.rank() != 4 || packed.data.dim(0) != 1 || packed.data.dim(1) != 4)
        throw std::invalid_argument("packed raw must be 1 x 4 x H/2 x W/2, got " + shape_str(packed.data.shape));
    const int Hh = packed.data.dim(2), Wh = packed.data.dim(3);
    const SiteMap sm = sites(packed.cfa);
    RawImage out;
    out.mosaic = Tensor(Shape{1, 1, 2 * Hh, 2 * Wh});
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < Hh; ++i)
            for (int j = 0; j < Wh; ++j)
                out.mosaic.at4(0, 0, 2 * i + sm.dy[c], 2 * j + sm.dx[c]) = packed.data.at4(0, c, i, j);
    out.cfa = packed.cfa;
    out.black_level = packed.black_level;
    out.saturation = packed.saturation;
    out.iso = packed.iso;
    out.sensor_id = packed.sensor_id;
    return out;
}

Tensor normalize(const PackedRaw& packed) {
    for (float bl : packed.black_level)
        if (!(bl < packed.saturation)) throw std::invalid_argument("normalize requires black_level < saturation");
    Tensor out(packed.data.shape);
    const int Hh = packed.data.dim(2), Wh = packed.data.dim(3);
    for (int c = 0; c < 4; ++c) {
        const float black = packed.black_level[static_cast<std::size_t>(c)];
        const float scale = 1.0f / (packed.saturation - black);
        for (int i = 0; i < Hh; ++i)
            for (int j = 0; j < Wh; ++j) out.at4(0, c, i, j) = (packed.data.at4(0, c, i, j) - black) * scale;
    }
    return out;
}

PackedRaw denormalize(const Tensor& normalized, const PackedRaw& meta) {
    if (normalized.rank() != 4 || normalized.dim(0) != 1 || normalized.dim(1) != 4)
        throw std::invalid_argument("denormalize expects 1 x 4 x H/2 x W/2, got " + shape_str(normalized.shape));
    PackedRaw out = meta;
    out.data = Tensor(normalized.shape);
    const int Hh = normalized.dim(2), Wh = normalized.dim(3);
    for (int c = 0; c < 4; ++c) {
        const float black = meta.black_level[static_cast<std::size_t>(c)];
        const float scale = meta.saturation - black;
        for (int i = 0; i < Hh; ++i)
            for (int j = 0; j < Wh; ++j) out.data.at4(0, c, i, j) = normalized.at4(0, c, i, j) * scale + black;
    }
    return out;
}

namespace {

Tensor rot90_ccw(const Tensor& x) {
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out(Shape{B, C, W, H});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < W; ++i)
                for (int j = 0; j < H; ++j) out.at4(b, c, i, j) = x.at4(b, c, j, W - 1 - i);
    return out;
}

Tensor flip_h(const Tensor& x) {
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out(x.shape);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) out.at4(b, c, i, j) = x.at4(b, c, i, W - 1 - j);
    return out;
}

} // namespace

Tensor dihedral_transform(const Tensor& x, int g) {
    if (x.rank() != 4) throw std::invalid_argument("dihedral_transform expects a rank-4 tensor");
    if (g < 0 || g > 7) throw std::invalid_argument("dihedral_transform: g must be in 0..7, got " + std::to_string(g));
    Tensor y = x;
    for (int t = 0; t < g % 4; ++t) y = rot90_ccw(y);
    if (g >= 4) y = flip_h(y);
    return y;
}

RawImage load_raw(const std::string& ntf_path, const std::string& json_path) {
    RawImage raw;
    Tensor t = load_ntf(ntf_path);
    if (t.rank() == 2) t = Tensor(Shape{1, 1, t.dim(0), t.dim(1)}, std::move(t.data));
    raw.mosaic = std::move(t);

    std::ifstream is(json_path);
    if (!is) throw DataError("cannot open raw sidecar: " + json_path);
    nlohmann::json j;
    try {
        is >> j;
        raw.cfa = parse_cfa(j.at("cfa").get<std::string>());
        const auto& bl = j.at("black_level");
        if (bl.is_array()) {
            if (bl.size() != 4) throw DataError("raw sidecar: black_level array must have 4 entries");
            for (int c = 0; c < 4; ++c) raw.black_level[static_cast<std::size_t>(c)] = bl[static_cast<std::size_t>(c)].get<float>();
        } else {
            raw.black_level.fill(bl.get<float>());
        }
        raw.saturation = j.at("saturation").get<float>();
        raw.iso = j.value("iso", 100.0f);
        raw.sensor_id = j.value("sensor_id", std::string("unknown"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("raw sidecar " + json_path + ": " + e.what());
    }
    raw.validate();
    return raw;
}

void save_raw(const RawImage& raw, const std::string& ntf_path, const std::string& json_path) {
    raw.validate();
    save_ntf(ntf_path, raw.mosaic);
    nlohmann::json j;
    j["cfa"] = cfa_name(raw.cfa);
    j["black_level"] = raw.black_level;
    j["saturation"] = raw.saturation;
    j["iso"] = raw.iso;
    j["sensor_id"] = raw.sensor_id;
    std::ofstream os(json_path);
    if (!os) throw DataError("cannot write raw sidecar: " + json_path);
    os << j.dump(2) << "\n";
}

} // namespace nlmf
