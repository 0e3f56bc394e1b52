#pragma once

#include <string>
#include <vector>

#include "nlmf/nlfemf.hpp"

namespace nlmf {

// Multiscale UNet denoiser: head conv, one NL block per scale on the way down
// and up, 2x2/2 strided down-convolutions, transposed up-convolutions,
// additive skip connections, tail conv.
struct NetworkConfig {
    int scales = 3;
    std::vector<int> k_per_scale{15, 9, 7};
    std::vector<int> c_per_scale{48, 96, 192};
    int search_radius = 9;
    Matching matching = Matching::learned_offsets;
    std::string mode = "raw"; // "raw": packed 4ch + 4ch noise map; "awgn": RGB + scalar sigma map
    int offset_hidden = 0;    // 0: use the scale's channel width

    int in_channels() const { return mode == "awgn" ? 4 : 8; }
    int out_channels() const { return mode == "awgn" ? 3 : 4; }
    int pad_multiple() const { return 1 << (scales - 1); }

    NLFeMFConfig block_config(int scale) const {
        NLFeMFConfig c;
        c.channels = c_per_scale[static_cast<std::size_t>(scale)];
        c.neighbors = k_per_scale[static_cast<std::size_t>(scale)];
        c.radius = search_radius;
        c.offset_hidden = offset_hidden > 0 ? offset_hidden : c.channels;
        c.matching = matching;
        return c;
    }

    void validate() const {
        if (scales < 1) throw std::invalid_argument("network config: scales must be >= 1");
        if (k_per_scale.size() != static_cast<std::size_t>(scales) ||
            c_per_scale.size() != static_cast<std::size_t>(scales))
            throw std::invalid_argument("network config: k_per_scale and c_per_scale must have one entry per scale");
        if (mode != "raw" && mode != "awgn") throw std::invalid_argument("network config: mode must be raw or awgn");
        for (int s = 0; s < scales; ++s) block_config(s).validate();
    }
};

// Same core network; only the first and last layers change width.
inline NetworkConfig awgn_variant(NetworkConfig cfg) {
    cfg.mode = "awgn";
    return cfg;
}

NetworkConfig network_config_from_json(const std::string& json_text);
std::string network_config_to_json(const NetworkConfig& cfg);
NetworkConfig load_network_config(const std::string& path);

struct NetParams {
    ConvParams head, tail;
    std::vector<NlBlockParams> enc; // one per scale, deepest is the bottom block
    std::vector<ConvParams> down;   // scales-1 strided 2x2 convs
    std::vector<ConvParams> up;     // scales-1 transposed convs
    std::vector<NlBlockParams> dec; // scales-1 decoder blocks
};

template <class Sink>
NetParams declare_network(const NetworkConfig& cfg, Sink& sink) {
    cfg.validate();
    const int S = cfg.scales;
    const auto& C = cfg.c_per_scale;
    NetParams np;
    np.enc.resize(static_cast<std::size_t>(S));
    np.down.resize(static_cast<std::size_t>(S - 1));
    np.up.resize(static_cast<std::size_t>(S - 1));
    np.dec.resize(static_cast<std::size_t>(S - 1));

    np.head = declare_conv2d(sink, "head", cfg.in_channels(), C[0], 3, 1);
    for (int s = 0; s < S; ++s) {
        np.enc[static_cast<std::size_t>(s)] = declare_nl_block(sink, "enc" + std::to_string(s), cfg.block_config(s));
        if (s < S - 1)
            np.down[static_cast<std::size_t>(s)] = declare_conv2d(sink, "down" + std::to_string(s),
                                                                  C[static_cast<std::size_t>(s)],
                                                                  C[static_cast<std::size_t>(s + 1)], 2, 1);
    }
    for (int s = S - 2; s >= 0; --s) {
        np.up[static_cast<std::size_t>(s)] = declare_conv_transpose2d(sink, "up" + std::to_string(s),
                                                                      C[static_cast<std::size_t>(s + 1)],
                                                                      C[static_cast<std::size_t>(s)], 2);
        np.dec[static_cast<std::size_t>(s)] = declare_nl_block(sink, "dec" + std::to_string(s), cfg.block_config(s));
    }
    np.tail = declare_conv2d(sink, "tail", C[0], cfg.out_channels(), 3, 1);
    return np;
}

inline std::int64_t count_params(const NetworkConfig& cfg) {
    CountSink sink;
    declare_network(cfg, sink);
    return sink.total;
}

template <class T>
ParamStoreT<T> init_params(const NetworkConfig& cfg, std::uint64_t seed) {
    ParamStoreT<T> store;
    Rng rng(seed);
    InitSink<T> sink{store, rng};
    declare_network(cfg, sink);
    return store;
}

inline ParamStore init_params(const NetworkConfig& cfg, std::uint64_t seed) { return init_params<float>(cfg, seed); }

template <class T>
struct BoundNetwork {
    NetParams params;
    std::vector<std::pair<std::string, Value>> bound;
};

template <class T>
BoundNetwork<T> bind_network(Tape<T>& tape, const ParamStoreT<T>& store, const NetworkConfig& cfg,
                             bool requires_grad = true) {
    BoundNetwork<T> bn;
    BindSink<T> sink{tape, store, bn.bound, requires_grad};
    bn.params = declare_network(cfg, sink);
    return bn;
}

// Forward over the already-concatenated input (image channels then noise-map
// channels). Spatial extents must be divisible by 2^(scales-1).
template <class T>
Value network_forward(Tape<T>& t, const NetParams& np, const NetworkConfig& cfg, Value input) {
    const TensorT<T>& xv = t.val(input);
    detail::require(xv.rank() == 4, "network: input must be rank 4, got " + shape_str(xv.shape));
    detail::require(xv.dim(1) == cfg.in_channels(), "network: input has " + std::to_string(xv.dim(1)) +
                                                        " channels, config expects " + std::to_string(cfg.in_channels()));
    const int m = cfg.pad_multiple();
    const int H = xv.dim(2), W = xv.dim(3);
    if (H % m != 0 || W % m != 0)
        throw std::invalid_argument("network: spatial size " + std::to_string(H) + "x" + std::to_string(W) +
                                    " not divisible by " + std::to_string(m) + "; pad to " +
                                    std::to_string((H + m - 1) / m * m) + "x" + std::to_string((W + m - 1) / m * m) +
                                    " first (pad_reflect_to_multiple)");

    const int S = cfg.scales;
    Value f = conv2d(t, input, np.head.w, np.head.b, 1, 1, 1);
    std::vector<Value> skips(static_cast<std::size_t>(S - 1));
    for (int s = 0; s < S; ++s) {
        f = nl_block_forward(t, np.enc[static_cast<std::size_t>(s)], cfg.block_config(s), f);
        if (s < S - 1) {
            skips[static_cast<std::size_t>(s)] = f;
            f = conv2d(t, f, np.down[static_cast<std::size_t>(s)].w, np.down[static_cast<std::size_t>(s)].b, 2, 0, 1);
        }
    }
    for (int s = S - 2; s >= 0; --s) {
        f = conv_transpose2d(t, f, np.up[static_cast<std::size_t>(s)].w, np.up[static_cast<std::size_t>(s)].b, 2);
        f = add(t, f, skips[static_cast<std::size_t>(s)]);
        f = nl_block_forward(t, np.dec[static_cast<std::size_t>(s)], cfg.block_config(s), f);
    }
    return conv2d(t, f, np.tail.w, np.tail.b, 1, 1, 1);
}

// ---------------------------------------------------------------------------
// Arbitrary-size inference helpers.
// ---------------------------------------------------------------------------

struct CropRecord {
    int height = 0, width = 0;
};

// Reflect-pads right/bottom (without repeating the edge sample) so spatial
// extents become multiples of m.
template <class T>
std::pair<TensorT<T>, CropRecord> pad_reflect_to_multiple(const TensorT<T>& x, int m) {
    detail::require(x.rank() == 4, "pad_reflect_to_multiple expects a rank-4 tensor");
    detail::require(m >= 1, "pad_reflect_to_multiple: m must be >= 1");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const CropRecord rec{H, W};
    const int Hp = (H + m - 1) / m * m;
    const int Wp = (W + m - 1) / m * m;
    if (Hp == H && Wp == W) return {x, rec};
    if (Hp - H > H - 1 || Wp - W > W - 1)
        throw std::invalid_argument("pad_reflect_to_multiple: image too small to reflect-pad to multiple of " +
                                    std::to_string(m));
    TensorT<T> out(Shape{B, C, Hp, Wp});
    auto reflect = [](int i, int n) { return i < n ? i : 2 * n - 2 - i; };
    for (int bb = 0; bb < B; ++bb)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < Hp; ++i)
                for (int j = 0; j < Wp; ++j)
                    out.at4(bb, c, i, j) = x.at4(bb, c, reflect(i, H), reflect(j, W));
    return {std::move(out), rec};
}

template <class T>
TensorT<T> crop_to_record(const TensorT<T>& x, const CropRecord& rec) {
    detail::require(x.rank() == 4, "crop_to_record expects a rank-4 tensor");
    const int B = x.dim(0), C = x.dim(1);
    if (x.dim(2) == rec.height && x.dim(3) == rec.width) return x;
    TensorT<T> out(Shape{B, C, rec.height, rec.width});
    for (int bb = 0; bb < B; ++bb)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < rec.height; ++i)
                for (int j = 0; j < rec.width; ++j) out.at4(bb, c, i, j) = x.at4(bb, c, i, j);
    return out;
}

// Inference on exact-size inputs; the noise map must be non-negative.
template <class T>
TensorT<T> network_apply(const ParamStoreT<T>& store, const NetworkConfig& cfg, const TensorT<T>& image,
                         const TensorT<T>& noise_map) {
    for (T v : noise_map.data)
        if (v < T(0)) throw std::invalid_argument("network: noise map must be non-negative");
    Tape<T> tape;
    BoundNetwork<T> bn = bind_network(tape, store, cfg, false);
    Value in = tape.constant(concat_channels(image, noise_map));
    Value out = network_forward(tape, bn.params, cfg, in);
    return tape.val(out);
}

// Inference on arbitrary sizes: pad, run, crop back.
Tensor denoise_image(const ParamStore& store, const NetworkConfig& cfg, const Tensor& image, const Tensor& noise_map);

} // namespace nlmf
