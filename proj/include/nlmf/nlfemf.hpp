#pragma once

#include <array>
#include <string>

#include "nlmf/layers.hpp"

namespace nlmf {

enum class Matching { learned_offsets, local_window };

inline Matching parse_matching(const std::string& s) {
    if (s == "learned_offsets") return Matching::learned_offsets;
    if (s == "local_window") return Matching::local_window;
    throw std::invalid_argument("unknown matching strategy: " + s);
}

inline std::string matching_name(Matching m) {
    return m == Matching::learned_offsets ? "learned_offsets" : "local_window";
}

// Configuration of one nonlocal matching-and-filtering block.
struct NLFeMFConfig {
    int channels = 0;      // C
    int neighbors = 0;     // K
    int radius = 0;        // search half-width in pixels
    int offset_hidden = 0; // hidden width of the offset CNN
    Matching matching = Matching::learned_offsets;

    void validate() const {
        if (channels < 1 || neighbors < 1 || radius < 1)
            throw std::invalid_argument("nlfemf config requires channels, neighbors and radius >= 1");
        if (matching == Matching::learned_offsets && offset_hidden < 1)
            throw std::invalid_argument("nlfemf config requires offset_hidden >= 1");
        if (matching == Matching::local_window) (void)local_window_dims(neighbors, radius);
    }

    // The fixed-window baseline needs K to factor into an odd h x w rectangle
    // centered at the pixel. Picks the factorization closest to square.
    static std::pair<int, int> local_window_dims(int k, int radius) {
        int best_h = 0;
        for (int h = 1; h * h <= k; h += 2)
            if (k % h == 0 && (k / h) % 2 == 1) best_h = h;
        if (best_h == 0)
            throw std::invalid_argument("local_window matching: K = " + std::to_string(k) +
                                        " has no odd h x w factorization");
        const int w = k / best_h;
        if ((w - 1) / 2 > radius)
            throw std::invalid_argument("local_window matching: window " + std::to_string(best_h) + "x" +
                                        std::to_string(w) + " exceeds search radius " + std::to_string(radius));
        return {best_h, w};
    }
};

struct OffsetCnnParams {
    std::array<ConvParams, 6> conv;
};

struct NlfemfParams {
    OffsetCnnParams offset;
    ConvParams transform_in;  // 1x1 grouped, C groups, K -> K per group
    ConvParams transform_out; // separate inverse mapping, same shape
    std::array<ConvParams, 3> mod;
    ConvParams aggregate;
};

struct NlBlockParams {
    ConvNeXtParams pre;
    NlfemfParams core;
    ConvNeXtParams post;
};

// Six 3x3 convolutions predicting K (dy, dx) offset pairs per pixel. The
// final layer starts at exactly zero so initial offsets are zero.
template <class Sink>
OffsetCnnParams declare_offset_cnn(Sink& sink, const std::string& prefix, const NLFeMFConfig& cfg) {
    OffsetCnnParams p;
    const int h = cfg.offset_hidden;
    p.conv[0] = declare_conv2d(sink, prefix + ".conv0", cfg.channels, h, 3, 1);
    for (int i = 1; i < 5; ++i)
        p.conv[static_cast<std::size_t>(i)] = declare_conv2d(sink, prefix + ".conv" + std::to_string(i), h, h, 3, 1);
    p.conv[5] = declare_conv2d(sink, prefix + ".conv5", h, 2 * cfg.neighbors, 3, 1, ParamInit::zero);
    return p;
}

template <class Sink>
NlfemfParams declare_nlfemf(Sink& sink, const std::string& prefix, const NLFeMFConfig& cfg) {
    cfg.validate();
    NlfemfParams p;
    const int ck = cfg.channels * cfg.neighbors;
    if (cfg.matching == Matching::learned_offsets) p.offset = declare_offset_cnn(sink, prefix + ".offset_cnn", cfg);
    p.transform_in = declare_conv2d(sink, prefix + ".transform_in", ck, ck, 1, cfg.channels);
    p.transform_out = declare_conv2d(sink, prefix + ".transform_out", ck, ck, 1, cfg.channels);
    for (int i = 0; i < 3; ++i)
        p.mod[static_cast<std::size_t>(i)] = declare_conv2d(sink, prefix + ".mod_cnn.conv" + std::to_string(i), ck, ck, 3, ck);
    p.aggregate = declare_conv2d(sink, prefix + ".aggregate", ck, cfg.channels, 1, 1);
    return p;
}

template <class Sink>
NlBlockParams declare_nl_block(Sink& sink, const std::string& prefix, const NLFeMFConfig& cfg) {
    NlBlockParams p;
    p.pre = declare_convnext(sink, prefix + ".pre", cfg.channels);
    p.core = declare_nlfemf(sink, prefix + ".nlfemf", cfg);
    p.post = declare_convnext(sink, prefix + ".post", cfg.channels);
    return p;
}

// Offsets of the fixed local-window baseline: constant integer displacements
// centered at 0, (dy, dx) pairs in row-major window order.
template <class T>
TensorT<T> local_window_offsets(const NLFeMFConfig& cfg, int batch, int height, int width) {
    const auto [wh, ww] = NLFeMFConfig::local_window_dims(cfg.neighbors, cfg.radius);
    TensorT<T> out(Shape{batch, 2 * cfg.neighbors, height, width});
    const std::int64_t plane = static_cast<std::int64_t>(height) * width;
    int k = 0;
    for (int dy = -(wh - 1) / 2; dy <= (wh - 1) / 2; ++dy)
        for (int dx = -(ww - 1) / 2; dx <= (ww - 1) / 2; ++dx, ++k)
            for (int bb = 0; bb < batch; ++bb) {
                T* py = out.ptr() + (static_cast<std::int64_t>(bb) * 2 * cfg.neighbors + 2 * k) * plane;
                std::fill(py, py + plane, static_cast<T>(dy));
                std::fill(py + plane, py + 2 * plane, static_cast<T>(dx));
            }
    return out;
}

// Every emitted offset component lies strictly inside (-radius, radius).
template <class T>
Value predict_offsets(Tape<T>& t, const OffsetCnnParams& p, Value features, int radius) {
    Value h = features;
    for (int i = 0; i < 6; ++i) {
        const ConvParams& c = p.conv[static_cast<std::size_t>(i)];
        h = conv2d(t, h, c.w, c.b, 1, 1, 1);
        if (i < 5) h = leaky_relu(t, h, T(0.1));
    }
    return tanh_scaled(t, h, static_cast<T>(radius));
}

// Collaborative filtering of a channel-major neighbor stack: grouped K -> K
// transform, elementwise shrinkage by a learned modulation map computed from
// the un-transformed stack, then a separate grouped inverse transform.
template <class T>
Value collaborative_filter(Tape<T>& t, const NlfemfParams& p, Value stack, int neighbors) {
    const TensorT<T>& sv = t.val(stack);
    const int ck = sv.dim(1);
    if (ck % neighbors != 0)
        throw std::invalid_argument("collaborative_filter: stack channels " + std::to_string(ck) +
                                    " not divisible by K = " + std::to_string(neighbors));
    const int channels = ck / neighbors;

    Value transformed = conv2d(t, stack, p.transform_in.w, p.transform_in.b, 1, 0, channels);
    Value m = conv2d(t, stack, p.mod[0].w, p.mod[0].b, 1, 1, ck);
    m = relu(t, m);
    m = conv2d(t, m, p.mod[1].w, p.mod[1].b, 1, 1, ck);
    m = relu(t, m);
    m = conv2d(t, m, p.mod[2].w, p.mod[2].b, 1, 1, ck);
    m = sigmoid(t, m);
    Value shrunk = mul(t, transformed, m);
    return conv2d(t, shrunk, p.transform_out.w, p.transform_out.b, 1, 0, channels);
}

// Single full 1x1 convolution from C*K back to C channels.
template <class T>
Value aggregate(Tape<T>& t, const NlfemfParams& p, Value stack, int neighbors) {
    const TensorT<T>& sv = t.val(stack);
    if (sv.dim(1) % neighbors != 0)
        throw std::invalid_argument("aggregate: stack channels " + std::to_string(sv.dim(1)) +
                                    " not divisible by K = " + std::to_string(neighbors));
    return conv2d(t, stack, p.aggregate.w, p.aggregate.b, 1, 0, 1);
}

template <class T>
Value nlfemf_forward(Tape<T>& t, const NlfemfParams& p, const NLFeMFConfig& cfg, Value features) {
    const TensorT<T>& fv = t.val(features);
    if (fv.dim(1) != cfg.channels)
        throw std::invalid_argument("nlfemf: features have " + std::to_string(fv.dim(1)) + " channels, config says " +
                                    std::to_string(cfg.channels));
    Value offsets;
    if (cfg.matching == Matching::learned_offsets) {
        offsets = predict_offsets(t, p.offset, features, cfg.radius);
    } else {
        offsets = t.constant(local_window_offsets<T>(cfg, fv.dim(0), fv.dim(2), fv.dim(3)));
    }
    Value stack = gather_neighbors(t, features, offsets);
    Value filtered = collaborative_filter(t, p, stack, cfg.neighbors);
    return aggregate(t, p, filtered, cfg.neighbors);
}

template <class T>
Value nl_block_forward(Tape<T>& t, const NlBlockParams& p, const NLFeMFConfig& cfg, Value features) {
    Value h = convnext_forward(t, p.pre, features);
    h = nlfemf_forward(t, p.core, cfg, h);
    return convnext_forward(t, p.post, h);
}

} // namespace nlmf
