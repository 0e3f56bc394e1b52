#pragma once

#include <array>
#include <string>

#include "nlmf/tensor.hpp"

namespace nlmf {

enum class Cfa { rggb, bggr, grbg, gbrg };

Cfa parse_cfa(const std::string& s);
std::string cfa_name(Cfa cfa);

// A Bayer mosaic with the metadata needed to normalize it. Black levels are
// stored per canonical channel in R, Gr, B, Gb order.
struct RawImage {
    Tensor mosaic; // 1 x 1 x H x W, H and W even
    Cfa cfa = Cfa::rggb;
    std::array<float, 4> black_level{0, 0, 0, 0};
    float saturation = 1;
    float iso = 100;
    std::string sensor_id;

    void validate() const;
};

// Half-resolution 4-channel representation, fixed channel order R, Gr, B, Gb
// regardless of the source CFA.
struct PackedRaw {
    Tensor data; // 1 x 4 x H/2 x W/2
    Cfa cfa = Cfa::rggb;
    std::array<float, 4> black_level{0, 0, 0, 0};
    float saturation = 1;
    float iso = 100;
    std::string sensor_id;
};

PackedRaw pack(const RawImage& raw);
RawImage unpack(const PackedRaw& packed);

// (x - black) / (saturation - black) per channel; values below the black
// level stay negative, nothing is clamped.
Tensor normalize(const PackedRaw& packed);
PackedRaw denormalize(const Tensor& normalized, const PackedRaw& meta);

// The 8 symmetries of the square: g in 0..3 rotates by 90*g degrees
// counterclockwise, g in 4..7 additionally flips horizontally after rotating
// by 90*(g-4). Applied identically to every channel.
Tensor dihedral_transform(const Tensor& x, int g);

// NTF tensor + JSON sidecar {cfa, black_level, saturation, iso, sensor_id}.
RawImage load_raw(const std::string& ntf_path, const std::string& json_path);
void save_raw(const RawImage& raw, const std::string& ntf_path, const std::string& json_path);

} // namespace nlmf
