#pragma once

#include <string>

#include "nlmf/ops.hpp"
#include "nlmf/params.hpp"

namespace nlmf {

struct ConvParams {
    Value w, b;
};

template <class Sink>
ConvParams declare_conv2d(Sink& sink, const std::string& prefix, int in_c, int out_c, int k, int groups,
                          ParamInit::Kind weight_init = ParamInit::kaiming_uniform) {
    const int ipg = in_c / groups;
    ConvParams p;
    p.w = sink(prefix + ".weight", Shape{out_c, ipg, k, k}, ParamInit{weight_init, ipg * k * k});
    p.b = sink(prefix + ".bias", Shape{out_c}, ParamInit{ParamInit::zero, 0});
    return p;
}

template <class Sink>
ConvParams declare_conv_transpose2d(Sink& sink, const std::string& prefix, int in_c, int out_c, int k) {
    ConvParams p;
    p.w = sink(prefix + ".weight", Shape{in_c, out_c, k, k}, ParamInit{ParamInit::kaiming_uniform, in_c * k * k});
    p.b = sink(prefix + ".bias", Shape{out_c}, ParamInit{ParamInit::zero, 0});
    return p;
}

// Simplified ConvNeXt block: depthwise 7x7, pointwise expansion by 4, GELU,
// pointwise back, residual add. No normalization anywhere.
struct ConvNeXtParams {
    ConvParams dw, pw1, pw2;
};

template <class Sink>
ConvNeXtParams declare_convnext(Sink& sink, const std::string& prefix, int channels) {
    ConvNeXtParams p;
    p.dw = declare_conv2d(sink, prefix + ".dw", channels, channels, 7, channels);
    p.pw1 = declare_conv2d(sink, prefix + ".pw1", channels, 4 * channels, 1, 1);
    p.pw2 = declare_conv2d(sink, prefix + ".pw2", 4 * channels, channels, 1, 1);
    return p;
}

template <class T>
Value convnext_forward(Tape<T>& t, const ConvNeXtParams& p, Value x) {
    const int channels = t.val(p.dw.w).dim(0);
    Value h = conv2d(t, x, p.dw.w, p.dw.b, 1, 3, channels);
    h = conv2d(t, h, p.pw1.w, p.pw1.b, 1, 0, 1);
    h = gelu(t, h);
    h = conv2d(t, h, p.pw2.w, p.pw2.b, 1, 0, 1);
    return add(t, x, h);
}

} // namespace nlmf
