#pragma once

#include <cmath>
#include <string>

#include "nlmf/tape.hpp"
#include "nlmf/tensor.hpp"

namespace nlmf {

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// ---------------------------------------------------------------------------
// conv2d kernels. Weight layout O x (Cin/groups) x KH x KW; output channel o
// in group g reads only input channels of group g. Zero padding. Backward
// kernels accumulate into their destination buffers.
// ---------------------------------------------------------------------------

template <class T>
void conv2d_fwd(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride, int pad, int groups,
                TensorT<T>& out) {
    const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0), Ipg = w.dim(1), KH = w.dim(2), KW = w.dim(3);
    const int Ho = out.dim(2), Wo = out.dim(3);
    const std::int64_t xplane = static_cast<std::int64_t>(H) * W;
    const std::int64_t oplane = static_cast<std::int64_t>(Ho) * Wo;
    const int Og = O / groups;

    for (int bb = 0; bb < B; ++bb)
        for (int o = 0; o < O; ++o) {
            T* op = out.ptr() + (static_cast<std::int64_t>(bb) * O + o) * oplane;
            std::fill(op, op + oplane, b.data[static_cast<std::size_t>(o)]);
        }

    for (int bb = 0; bb < B; ++bb) {
        for (int o = 0; o < O; ++o) {
            const int g = o / Og;
            T* op = out.ptr() + (static_cast<std::int64_t>(bb) * O + o) * oplane;
            for (int cig = 0; cig < Ipg; ++cig) {
                const int ci = g * Ipg + cig;
                const T* xp = x.ptr() + (static_cast<std::int64_t>(bb) * Cin + ci) * xplane;
                const T* wp = w.ptr() + (static_cast<std::int64_t>(o) * Ipg + cig) * KH * KW;
                for (int kh = 0; kh < KH; ++kh) {
                    for (int kw = 0; kw < KW; ++kw) {
                        const T wv = wp[kh * KW + kw];
                        if (stride == 1) {
                            const int ow_lo = std::max(0, pad - kw);
                            const int ow_hi = std::min(Wo, W + pad - kw);
                            for (int oh = 0; oh < Ho; ++oh) {
                                const int ih = oh - pad + kh;
                                if (ih < 0 || ih >= H) continue;
                                const T* xrow = xp + static_cast<std::int64_t>(ih) * W + (ow_lo - pad + kw);
                                T* orow = op + static_cast<std::int64_t>(oh) * Wo + ow_lo;
                                for (int u = 0; u < ow_hi - ow_lo; ++u) orow[u] += wv * xrow[u];
                            }
                        } else {
                            for (int oh = 0; oh < Ho; ++oh) {
                                const int ih = oh * stride - pad + kh;
                                if (ih < 0 || ih >= H) continue;
                                T* orow = op + static_cast<std::int64_t>(oh) * Wo;
                                const T* xrow = xp + static_cast<std::int64_t>(ih) * W;
                                for (int ow = 0; ow < Wo; ++ow) {
                                    const int iw = ow * stride - pad + kw;
                                    if (iw < 0 || iw >= W) continue;
                                    orow[ow] += wv * xrow[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void conv2d_bwd_input(TensorT<T>& dx, const TensorT<T>& w, const TensorT<T>& dy, int stride, int pad, int groups) {
    const int B = dx.dim(0), Cin = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
    const int O = w.dim(0), Ipg = w.dim(1), KH = w.dim(2), KW = w.dim(3);
    const int Ho = dy.dim(2), Wo = dy.dim(3);
    const std::int64_t xplane = static_cast<std::int64_t>(H) * W;
    const std::int64_t oplane = static_cast<std::int64_t>(Ho) * Wo;
    const int Og = O / groups;

    for (int bb = 0; bb < B; ++bb) {
        for (int o = 0; o < O; ++o) {
            const int g = o / Og;
            const T* gp = dy.ptr() + (static_cast<std::int64_t>(bb) * O + o) * oplane;
            for (int cig = 0; cig < Ipg; ++cig) {
                const int ci = g * Ipg + cig;
                T* dxp = dx.ptr() + (static_cast<std::int64_t>(bb) * Cin + ci) * xplane;
                const T* wp = w.ptr() + (static_cast<std::int64_t>(o) * Ipg + cig) * KH * KW;
                for (int kh = 0; kh < KH; ++kh) {
                    for (int kw = 0; kw < KW; ++kw) {
                        const T wv = wp[kh * KW + kw];
                        if (wv == T(0)) continue;
                        if (stride == 1) {
                            const int ow_lo = std::max(0, pad - kw);
                            const int ow_hi = std::min(Wo, W + pad - kw);
                            for (int oh = 0; oh < Ho; ++oh) {
                                const int ih = oh - pad + kh;
                                if (ih < 0 || ih >= H) continue;
                                T* dxrow = dxp + static_cast<std::int64_t>(ih) * W + (ow_lo - pad + kw);
                                const T* grow = gp + static_cast<std::int64_t>(oh) * Wo + ow_lo;
                                for (int u = 0; u < ow_hi - ow_lo; ++u) dxrow[u] += wv * grow[u];
                            }
                        } else {
                            for (int oh = 0; oh < Ho; ++oh) {
                                const int ih = oh * stride - pad + kh;
                                if (ih < 0 || ih >= H) continue;
                                T* dxrow = dxp + static_cast<std::int64_t>(ih) * W;
                                const T* grow = gp + static_cast<std::int64_t>(oh) * Wo;
                                for (int ow = 0; ow < Wo; ++ow) {
                                    const int iw = ow * stride - pad + kw;
                                    if (iw < 0 || iw >= W) continue;
                                    dxrow[iw] += wv * grow[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void conv2d_bwd_weight(TensorT<T>& dw, const TensorT<T>& x, const TensorT<T>& dy, int stride, int pad, int groups) {
    const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = dw.dim(0), Ipg = dw.dim(1), KH = dw.dim(2), KW = dw.dim(3);
    const int Ho = dy.dim(2), Wo = dy.dim(3);
    const std::int64_t xplane = static_cast<std::int64_t>(H) * W;
    const std::int64_t oplane = static_cast<std::int64_t>(Ho) * Wo;
    const int Og = O / groups;

    for (int o = 0; o < O; ++o) {
        const int g = o / Og;
        for (int cig = 0; cig < Ipg; ++cig) {
            const int ci = g * Ipg + cig;
            T* dwp = dw.ptr() + (static_cast<std::int64_t>(o) * Ipg + cig) * KH * KW;
            for (int kh = 0; kh < KH; ++kh) {
                for (int kw = 0; kw < KW; ++kw) {
                    T acc = 0;
                    for (int bb = 0; bb < B; ++bb) {
                        const T* xp = x.ptr() + (static_cast<std::int64_t>(bb) * Cin + ci) * xplane;
                        const T* gp = dy.ptr() + (static_cast<std::int64_t>(bb) * O + o) * oplane;
                        if (stride == 1) {
                            const int ow_lo = std::max(0, pad - kw);
                            const int ow_hi = std::min(Wo, W + pad - kw);
                            for (int oh = 0; oh < Ho; ++oh) {
                                const int ih = oh - pad + kh;
                                if (ih < 0 || ih >= H) continue;
                                const T* xrow = xp + static_cast<std::int64_t>(ih) * W + (ow_lo - pad + kw);
                                const T* grow = gp + static_cast<std::int64_t>(oh) * Wo + ow_lo;
                                for (int u = 0; u < ow_hi - ow_lo; ++u) acc += xrow[u] * grow[u];
                            }
                        } else {
                            for (int oh = 0; oh < Ho; ++oh) {
                                const int ih = oh * stride - pad + kh;
                                if (ih < 0 || ih >= H) continue;
                                const T* xrow = xp + static_cast<std::int64_t>(ih) * W;
                                const T* grow = gp + static_cast<std::int64_t>(oh) * Wo;
                                for (int ow = 0; ow < Wo; ++ow) {
                                    const int iw = ow * stride - pad + kw;
                                    if (iw < 0 || iw >= W) continue;
                                    acc += xrow[iw] * grow[ow];
                                }
                            }
                        }
                    }
                    dwp[kh * KW + kw] += acc;
                }
            }
        }
    }
}

template <class T>
void conv2d_bwd_bias(TensorT<T>& db, const TensorT<T>& dy) {
    const int B = dy.dim(0), O = dy.dim(1);
    const std::int64_t oplane = static_cast<std::int64_t>(dy.dim(2)) * dy.dim(3);
    for (int o = 0; o < O; ++o) {
        T acc = 0;
        for (int bb = 0; bb < B; ++bb) {
            const T* gp = dy.ptr() + (static_cast<std::int64_t>(bb) * O + o) * oplane;
            for (std::int64_t u = 0; u < oplane; ++u) acc += gp[u];
        }
        db.data[static_cast<std::size_t>(o)] += acc;
    }
}

// ---------------------------------------------------------------------------
// conv_transpose2d kernels with kernel size == stride. Weight layout
// Cin x Cout x K x K; exact adjoint of the matching strided conv2d.
// ---------------------------------------------------------------------------

template <class T>
void convt2d_fwd(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride, TensorT<T>& out) {
    const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(1), K = w.dim(2);
    const int Ho = out.dim(2), Wo = out.dim(3);
    (void)Ho;
    const std::int64_t xplane = static_cast<std::int64_t>(H) * W;
    const std::int64_t oplane = static_cast<std::int64_t>(out.dim(2)) * Wo;

    for (int bb = 0; bb < B; ++bb)
        for (int co = 0; co < Cout; ++co) {
            T* op = out.ptr() + (static_cast<std::int64_t>(bb) * Cout + co) * oplane;
            std::fill(op, op + oplane, b.data[static_cast<std::size_t>(co)]);
        }

    for (int bb = 0; bb < B; ++bb)
        for (int ci = 0; ci < Cin; ++ci) {
            const T* xp = x.ptr() + (static_cast<std::int64_t>(bb) * Cin + ci) * xplane;
            for (int co = 0; co < Cout; ++co) {
                T* op = out.ptr() + (static_cast<std::int64_t>(bb) * Cout + co) * oplane;
                const T* wp = w.ptr() + (static_cast<std::int64_t>(ci) * Cout + co) * K * K;
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        const T v = xp[static_cast<std::int64_t>(i) * W + j];
                        T* base = op + static_cast<std::int64_t>(i) * stride * Wo + static_cast<std::int64_t>(j) * stride;
                        for (int kh = 0; kh < K; ++kh)
                            for (int kw = 0; kw < K; ++kw) base[static_cast<std::int64_t>(kh) * Wo + kw] += v * wp[kh * K + kw];
                    }
            }
        }
}

template <class T>
void convt2d_bwd(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& dy, int stride, TensorT<T>* dx,
                 TensorT<T>* dw, TensorT<T>* db) {
    const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(1), K = w.dim(2);
    const int Wo = dy.dim(3);
    const std::int64_t xplane = static_cast<std::int64_t>(H) * W;
    const std::int64_t oplane = static_cast<std::int64_t>(dy.dim(2)) * Wo;

    if (db) {
        for (int co = 0; co < Cout; ++co) {
            T acc = 0;
            for (int bb = 0; bb < B; ++bb) {
                const T* gp = dy.ptr() + (static_cast<std::int64_t>(bb) * Cout + co) * oplane;
                for (std::int64_t u = 0; u < oplane; ++u) acc += gp[u];
            }
            db->data[static_cast<std::size_t>(co)] += acc;
        }
    }
    for (int bb = 0; bb < B; ++bb)
        for (int ci = 0; ci < Cin; ++ci) {
            const T* xp = x.ptr() + (static_cast<std::int64_t>(bb) * Cin + ci) * xplane;
            T* dxp = dx ? dx->ptr() + (static_cast<std::int64_t>(bb) * Cin + ci) * xplane : nullptr;
            for (int co = 0; co < Cout; ++co) {
                const T* gp = dy.ptr() + (static_cast<std::int64_t>(bb) * Cout + co) * oplane;
                const T* wp = w.ptr() + (static_cast<std::int64_t>(ci) * Cout + co) * K * K;
                T* dwp = dw ? dw->ptr() + (static_cast<std::int64_t>(ci) * Cout + co) * K * K : nullptr;
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        const T* gbase =
                            gp + static_cast<std::int64_t>(i) * stride * Wo + static_cast<std::int64_t>(j) * stride;
                        if (dxp) {
                            T acc = 0;
                            for (int kh = 0; kh < K; ++kh)
                                for (int kw = 0; kw < K; ++kw)
                                    acc += wp[kh * K + kw] * gbase[static_cast<std::int64_t>(kh) * Wo + kw];
                            dxp[static_cast<std::int64_t>(i) * W + j] += acc;
                        }
                        if (dwp) {
                            const T v = xp[static_cast<std::int64_t>(i) * W + j];
                            for (int kh = 0; kh < K; ++kh)
                                for (int kw = 0; kw < K; ++kw)
                                    dwp[kh * K + kw] += v * gbase[static_cast<std::int64_t>(kh) * Wo + kw];
                        }
                    }
            }
        }
}

// ---------------------------------------------------------------------------
// Bilinear sampling shared by grid_sample_bilinear and gather_neighbors.
// Coordinates are absolute fractional pixel positions; out-of-range values
// are clamped to the image border before interpolation (replicate). The
// coordinate gradient is zeroed wherever the clamp is active.
// ---------------------------------------------------------------------------

template <class T>
struct BilinearCell {
    int y0, y1, x0, x1;
    T fy, fx;
    bool y_pass, x_pass;
};

template <class T>
inline BilinearCell<T> bilinear_cell(T y, T x, int H, int W) {
    BilinearCell<T> c;
    c.y_pass = (y >= T(0) && y <= T(H - 1));
    c.x_pass = (x >= T(0) && x <= T(W - 1));
    const T yc = std::min(std::max(y, T(0)), T(H - 1));
    const T xc = std::min(std::max(x, T(0)), T(W - 1));
    c.y0 = static_cast<int>(std::floor(yc));
    c.x0 = static_cast<int>(std::floor(xc));
    if (c.y0 > H - 1) c.y0 = H - 1;
    if (c.x0 > W - 1) c.x0 = W - 1;
    c.y1 = std::min(c.y0 + 1, H - 1);
    c.x1 = std::min(c.x0 + 1, W - 1);
    c.fy = yc - static_cast<T>(c.y0);
    c.fx = xc - static_cast<T>(c.x0);
    return c;
}

// Distance of a coordinate to the nearest sampling kink: integer grid lines
// inside the image, or the clamping border when outside.
template <class T>
inline double coord_kink_distance(T y, int H) {
    const double yd = static_cast<double>(y);
    if (yd < 0.0) return -yd;
    if (yd > static_cast<double>(H - 1)) return yd - static_cast<double>(H - 1);
    const double f = yd - std::floor(yd);
    return std::min(f, 1.0 - f);
}

// Sample every channel of one image at n coordinate pairs. out_cstride is the
// element stride between consecutive destination channels.
template <class T>
void bilinear_fwd(const T* feat, int C, int H, int W, const T* ys, const T* xs, std::int64_t n, T* out,
                  std::int64_t out_cstride) {
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (std::int64_t p = 0; p < n; ++p) {
        const BilinearCell<T> c = bilinear_cell(ys[p], xs[p], H, W);
        const T w00 = (T(1) - c.fy) * (T(1) - c.fx);
        const T w01 = (T(1) - c.fy) * c.fx;
        const T w10 = c.fy * (T(1) - c.fx);
        const T w11 = c.fy * c.fx;
        const std::int64_t i00 = static_cast<std::int64_t>(c.y0) * W + c.x0;
        const std::int64_t i01 = static_cast<std::int64_t>(c.y0) * W + c.x1;
        const std::int64_t i10 = static_cast<std::int64_t>(c.y1) * W + c.x0;
        const std::int64_t i11 = static_cast<std::int64_t>(c.y1) * W + c.x1;
        const T* f = feat;
        for (int ch = 0; ch < C; ++ch, f += plane)
            out[ch * out_cstride + p] = w00 * f[i00] + w01 * f[i01] + w10 * f[i10] + w11 * f[i11];
    }
}

template <class T>
void bilinear_bwd(const T* feat, int C, int H, int W, const T* ys, const T* xs, std::int64_t n, const T* dout,
                  std::int64_t dout_cstride, T* dfeat, T* dys, T* dxs) {
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (std::int64_t p = 0; p < n; ++p) {
        const BilinearCell<T> c = bilinear_cell(ys[p], xs[p], H, W);
        const T w00 = (T(1) - c.fy) * (T(1) - c.fx);
        const T w01 = (T(1) - c.fy) * c.fx;
        const T w10 = c.fy * (T(1) - c.fx);
        const T w11 = c.fy * c.fx;
        const std::int64_t i00 = static_cast<std::int64_t>(c.y0) * W + c.x0;
        const std::int64_t i01 = static_cast<std::int64_t>(c.y0) * W + c.x1;
        const std::int64_t i10 = static_cast<std::int64_t>(c.y1) * W + c.x0;
        const std::int64_t i11 = static_cast<std::int64_t>(c.y1) * W + c.x1;
        T gy = 0, gx = 0;
        const T* f = feat;
        T* df = dfeat;
        for (int ch = 0; ch < C; ++ch, f += plane) {
            const T g = dout[ch * dout_cstride + p];
            if (df) {
                df[i00] += w00 * g;
                df[i01] += w01 * g;
                df[i10] += w10 * g;
                df[i11] += w11 * g;
                df += plane;
            }
            if (dys) {
                gy += ((T(1) - c.fx) * (f[i10] - f[i00]) + c.fx * (f[i11] - f[i01])) * g;
                gx += ((T(1) - c.fy) * (f[i01] - f[i00]) + c.fy * (f[i11] - f[i10])) * g;
            }
        }
        if (dys && c.y_pass) dys[p] += gy;
        if (dxs && c.x_pass) dxs[p] += gx;
    }
}

template <class T>
void check_finite_coords(const TensorT<T>& coords, const char* op) {
    for (T v : coords.data)
        if (!std::isfinite(static_cast<double>(v)))
            throw std::invalid_argument(std::string(op) + ": non-finite sampling coordinate");
}

} // namespace detail

// ---------------------------------------------------------------------------
// Taped operations.
// ---------------------------------------------------------------------------

template <class T>
Value conv2d(Tape<T>& t, Value x, Value w, Value b, int stride, int padding, int groups) {
    const TensorT<T>& xv = t.val(x);
    const TensorT<T>& wv = t.val(w);
    const TensorT<T>& bv = t.val(b);
    detail::require(xv.rank() == 4, "conv2d: input must be rank 4, got " + shape_str(xv.shape));
    detail::require(wv.rank() == 4, "conv2d: weight must be rank 4, got " + shape_str(wv.shape));
    detail::require(bv.rank() == 1, "conv2d: bias must be rank 1, got " + shape_str(bv.shape));
    detail::require(stride >= 1 && padding >= 0 && groups >= 1, "conv2d: bad stride/padding/groups");
    const int Cin = xv.dim(1), O = wv.dim(0);
    detail::require(Cin % groups == 0, "conv2d: input channels " + std::to_string(Cin) + " not divisible by groups " +
                                           std::to_string(groups));
    detail::require(O % groups == 0, "conv2d: output channels " + std::to_string(O) + " not divisible by groups " +
                                         std::to_string(groups));
    detail::require(wv.dim(1) == Cin / groups, "conv2d: weight in-channels-per-group " + std::to_string(wv.dim(1)) +
                                                   " != Cin/groups = " + std::to_string(Cin / groups));
    detail::require(bv.dim(0) == O,
                    "conv2d: bias length " + std::to_string(bv.dim(0)) + " != out channels " + std::to_string(O));
    const int H = xv.dim(2), W = xv.dim(3), KH = wv.dim(2), KW = wv.dim(3);
    detail::require(H + 2 * padding >= KH && W + 2 * padding >= KW,
                    "conv2d: kernel " + std::to_string(KH) + "x" + std::to_string(KW) + " larger than padded input " +
                        std::to_string(H + 2 * padding) + "x" + std::to_string(W + 2 * padding));
    const int Ho = (H + 2 * padding - KH) / stride + 1;
    const int Wo = (W + 2 * padding - KW) / stride + 1;

    TensorT<T> out(Shape{xv.dim(0), O, Ho, Wo});
    detail::conv2d_fwd(xv, wv, bv, stride, padding, groups, out);
    const bool rg = t.requires_grad(x) || t.requires_grad(w) || t.requires_grad(b);
    return t.record(std::move(out), rg, [x, w, b, stride, padding, groups](Tape<T>& tp, Value out_v) {
        const TensorT<T>& dy = tp.grad(out_v);
        if (tp.requires_grad(x)) detail::conv2d_bwd_input(tp.grad_accum(x), tp.val(w), dy, stride, padding, groups);
        if (tp.requires_grad(w)) detail::conv2d_bwd_weight(tp.grad_accum(w), tp.val(x), dy, stride, padding, groups);
        if (tp.requires_grad(b)) detail::conv2d_bwd_bias(tp.grad_accum(b), dy);
    });
}

// Transposed convolution for upsampling; kernel size must equal the stride.
template <class T>
Value conv_transpose2d(Tape<T>& t, Value x, Value w, Value b, int stride) {
    const TensorT<T>& xv = t.val(x);
    const TensorT<T>& wv = t.val(w);
    const TensorT<T>& bv = t.val(b);
    detail::require(xv.rank() == 4, "conv_transpose2d: input must be rank 4, got " + shape_str(xv.shape));
    detail::require(wv.rank() == 4, "conv_transpose2d: weight must be rank 4, got " + shape_str(wv.shape));
    detail::require(stride >= 1, "conv_transpose2d: stride must be >= 1");
    detail::require(wv.dim(2) == stride && wv.dim(3) == stride,
                    "conv_transpose2d: kernel " + std::to_string(wv.dim(2)) + "x" + std::to_string(wv.dim(3)) +
                        " must equal stride " + std::to_string(stride));
    detail::require(wv.dim(0) == xv.dim(1), "conv_transpose2d: weight in-channels " + std::to_string(wv.dim(0)) +
                                                " != input channels " + std::to_string(xv.dim(1)));
    detail::require(bv.rank() == 1 && bv.dim(0) == wv.dim(1),
                    "conv_transpose2d: bias length " + std::to_string(bv.dim(0)) + " != out channels " +
                        std::to_string(wv.dim(1)));

    TensorT<T> out(Shape{xv.dim(0), wv.dim(1), xv.dim(2) * stride, xv.dim(3) * stride});
    detail::convt2d_fwd(xv, wv, bv, stride, out);
    const bool rg = t.requires_grad(x) || t.requires_grad(w) || t.requires_grad(b);
    return t.record(std::move(out), rg, [x, w, b, stride](Tape<T>& tp, Value out_v) {
        const TensorT<T>& dy = tp.grad(out_v);
        TensorT<T>* dx = tp.requires_grad(x) ? &tp.grad_accum(x) : nullptr;
        TensorT<T>* dw = tp.requires_grad(w) ? &tp.grad_accum(w) : nullptr;
        TensorT<T>* db = tp.requires_grad(b) ? &tp.grad_accum(b) : nullptr;
        detail::convt2d_bwd(tp.val(x), tp.val(w), dy, stride, dx, dw, db);
    });
}

// Bilinear sampling of `features` at absolute pixel coordinates. `coords` is
// B x 2 x H x W with channel 0 holding row and channel 1 column positions.
template <class T>
Value grid_sample_bilinear(Tape<T>& t, Value features, Value coords) {
    const TensorT<T>& fv = t.val(features);
    const TensorT<T>& cv = t.val(coords);
    detail::require(fv.rank() == 4, "grid_sample: features must be rank 4, got " + shape_str(fv.shape));
    detail::require(cv.rank() == 4 && cv.dim(1) == 2,
                    "grid_sample: coords must be B x 2 x H x W, got " + shape_str(cv.shape));
    detail::require(cv.dim(0) == fv.dim(0) && cv.dim(2) == fv.dim(2) && cv.dim(3) == fv.dim(3),
                    "grid_sample: coords " + shape_str(cv.shape) + " do not match features " + shape_str(fv.shape));
    detail::check_finite_coords(cv, "grid_sample");

    const int B = fv.dim(0), C = fv.dim(1), H = fv.dim(2), W = fv.dim(3);
    const std::int64_t n = static_cast<std::int64_t>(H) * W;
    TensorT<T> out(fv.shape);
    for (int bb = 0; bb < B; ++bb) {
        const T* ys = cv.ptr() + static_cast<std::int64_t>(bb) * 2 * n;
        const T* xs = ys + n;
        detail::bilinear_fwd(fv.ptr() + static_cast<std::int64_t>(bb) * C * n, C, H, W, ys, xs, n,
                             out.ptr() + static_cast<std::int64_t>(bb) * C * n, n);
    }
    if (t.requires_grad(coords)) {
        double kd = std::numeric_limits<double>::infinity();
        for (int bb = 0; bb < B; ++bb) {
            const T* ys = cv.ptr() + static_cast<std::int64_t>(bb) * 2 * n;
            const T* xs = ys + n;
            for (std::int64_t p = 0; p < n; ++p) {
                kd = std::min(kd, detail::coord_kink_distance(ys[p], H));
                kd = std::min(kd, detail::coord_kink_distance(xs[p], W));
            }
        }
        t.note_kink(kd);
    }
    const bool rg = t.requires_grad(features) || t.requires_grad(coords);
    return t.record(std::move(out), rg, [features, coords, B, C, H, W, n](Tape<T>& tp, Value out_v) {
        const TensorT<T>& dy = tp.grad(out_v);
        const TensorT<T>& fvv = tp.val(features);
        const TensorT<T>& cvv = tp.val(coords);
        T* dfeat = tp.requires_grad(features) ? tp.grad_accum(features).ptr() : nullptr;
        T* dcoords = tp.requires_grad(coords) ? tp.grad_accum(coords).ptr() : nullptr;
        for (int bb = 0; bb < B; ++bb) {
            const T* ys = cvv.ptr() + static_cast<std::int64_t>(bb) * 2 * n;
            const T* xs = ys + n;
            detail::bilinear_bwd(fvv.ptr() + static_cast<std::int64_t>(bb) * C * n, C, H, W, ys, xs, n,
                                 dy.ptr() + static_cast<std::int64_t>(bb) * C * n, n,
                                 dfeat ? dfeat + static_cast<std::int64_t>(bb) * C * n : nullptr,
                                 dcoords ? dcoords + static_cast<std::int64_t>(bb) * 2 * n : nullptr,
                                 dcoords ? dcoords + static_cast<std::int64_t>(bb) * 2 * n + n : nullptr);
        }
    });
}

// Stack K offset neighbors of every pixel. `offsets` is B x 2K x H x W with
// (dy, dx) pairs interleaved as channels [dy_0, dx_0, dy_1, dx_1, ...]. The
// output is B x C*K x H x W, channel-major: slot c*K + k holds neighbor k of
// feature channel c.
template <class T>
Value gather_neighbors(Tape<T>& t, Value features, Value offsets) {
    const TensorT<T>& fv = t.val(features);
    const TensorT<T>& ov = t.val(offsets);
    detail::require(fv.rank() == 4, "gather_neighbors: features must be rank 4, got " + shape_str(fv.shape));
    detail::require(ov.rank() == 4 && ov.dim(1) % 2 == 0,
                    "gather_neighbors: offsets must be B x 2K x H x W, got " + shape_str(ov.shape));
    detail::require(ov.dim(0) == fv.dim(0) && ov.dim(2) == fv.dim(2) && ov.dim(3) == fv.dim(3),
                    "gather_neighbors: offsets " + shape_str(ov.shape) + " do not match features " + shape_str(fv.shape));
    detail::check_finite_coords(ov, "gather_neighbors");

    const int B = fv.dim(0), C = fv.dim(1), H = fv.dim(2), W = fv.dim(3);
    const int K = ov.dim(1) / 2;
    const std::int64_t n = static_cast<std::int64_t>(H) * W;
    TensorT<T> out(Shape{B, C * K, H, W});
    std::vector<T> ys(static_cast<std::size_t>(n)), xs(static_cast<std::size_t>(n));
    double kd = std::numeric_limits<double>::infinity();
    const bool want_kink = t.requires_grad(offsets);
    for (int bb = 0; bb < B; ++bb) {
        for (int k = 0; k < K; ++k) {
            const T* dy = ov.ptr() + (static_cast<std::int64_t>(bb) * 2 * K + 2 * k) * n;
            const T* dx = dy + n;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    const std::int64_t p = static_cast<std::int64_t>(i) * W + j;
                    ys[static_cast<std::size_t>(p)] = static_cast<T>(i) + dy[p];
                    xs[static_cast<std::size_t>(p)] = static_cast<T>(j) + dx[p];
                }
            if (want_kink)
                for (std::int64_t p = 0; p < n; ++p) {
                    kd = std::min(kd, detail::coord_kink_distance(ys[static_cast<std::size_t>(p)], H));
                    kd = std::min(kd, detail::coord_kink_distance(xs[static_cast<std::size_t>(p)], W));
                }
            // neighbor k of channel c lands in slot c*K + k
            detail::bilinear_fwd(fv.ptr() + static_cast<std::int64_t>(bb) * C * n, C, H, W, ys.data(), xs.data(), n,
                                 out.ptr() + (static_cast<std::int64_t>(bb) * C * K + k) * n, static_cast<std::int64_t>(K) * n);
        }
    }
    if (want_kink) t.note_kink(kd);

    const bool rg = t.requires_grad(features) || t.requires_grad(offsets);
    return t.record(std::move(out), rg, [features, offsets, B, C, H, W, K, n](Tape<T>& tp, Value out_v) {
        const TensorT<T>& dyg = tp.grad(out_v);
        const TensorT<T>& fvv = tp.val(features);
        const TensorT<T>& ovv = tp.val(offsets);
        T* dfeat = tp.requires_grad(features) ? tp.grad_accum(features).ptr() : nullptr;
        T* doff = tp.requires_grad(offsets) ? tp.grad_accum(offsets).ptr() : nullptr;
        std::vector<T> ys(static_cast<std::size_t>(n)), xs(static_cast<std::size_t>(n));
        for (int bb = 0; bb < B; ++bb) {
            for (int k = 0; k < K; ++k) {
                const T* dy = ovv.ptr() + (static_cast<std::int64_t>(bb) * 2 * K + 2 * k) * n;
                const T* dx = dy + n;
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        const std::int64_t p = static_cast<std::int64_t>(i) * W + j;
                        ys[static_cast<std::size_t>(p)] = static_cast<T>(i) + dy[p];
                        xs[static_cast<std::size_t>(p)] = static_cast<T>(j) + dx[p];
                    }
                T* dys = doff ? doff + (static_cast<std::int64_t>(bb) * 2 * K + 2 * k) * n : nullptr;
                T* dxs = dys ? dys + n : nullptr;
                detail::bilinear_bwd(fvv.ptr() + static_cast<std::int64_t>(bb) * C * n, C, H, W, ys.data(), xs.data(), n,
                                     dyg.ptr() + (static_cast<std::int64_t>(bb) * C * K + k) * n,
                                     static_cast<std::int64_t>(K) * n,
                                     dfeat ? dfeat + static_cast<std::int64_t>(bb) * C * n : nullptr, dys, dxs);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise ops. Activation derivatives at kinks use the right-hand value.
// ---------------------------------------------------------------------------

template <class T>
Value add(Tape<T>& t, Value a, Value b) {
    const TensorT<T>& av = t.val(a);
    const TensorT<T>& bv = t.val(b);
    detail::require(av.shape == bv.shape,
                    "add: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    TensorT<T> out(av.shape);
    for (std::int64_t i = 0; i < av.size(); ++i)
        out.data[static_cast<std::size_t>(i)] = av.data[static_cast<std::size_t>(i)] + bv.data[static_cast<std::size_t>(i)];
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.record(std::move(out), rg, [a, b](Tape<T>& tp, Value out_v) {
        const TensorT<T>& g = tp.grad(out_v);
        if (tp.requires_grad(a)) {
            TensorT<T>& da = tp.grad_accum(a);
            for (std::int64_t i = 0; i < g.size(); ++i) da.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(i)];
        }
        if (tp.requires_grad(b)) {
            TensorT<T>& db = tp.grad_accum(b);
            for (std::int64_t i = 0; i < g.size(); ++i) db.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(i)];
        }
    });
}

template <class T>
Value mul(Tape<T>& t, Value a, Value b) {
    const TensorT<T>& av = t.val(a);
    const TensorT<T>& bv = t.val(b);
    detail::require(av.shape == bv.shape,
                    "mul: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    TensorT<T> out(av.shape);
    for (std::int64_t i = 0; i < av.size(); ++i)
        out.data[static_cast<std::size_t>(i)] = av.data[static_cast<std::size_t>(i)] * bv.data[static_cast<std::size_t>(i)];
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.record(std::move(out), rg, [a, b](Tape<T>& tp, Value out_v) {
        const TensorT<T>& g = tp.grad(out_v);
        if (tp.requires_grad(a)) {
            TensorT<T>& da = tp.grad_accum(a);
            const TensorT<T>& bvv = tp.val(b);
            for (std::int64_t i = 0; i < g.size(); ++i)
                da.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(i)] * bvv.data[static_cast<std::size_t>(i)];
        }
        if (tp.requires_grad(b)) {
            TensorT<T>& db = tp.grad_accum(b);
            const TensorT<T>& avv = tp.val(a);
            for (std::int64_t i = 0; i < g.size(); ++i)
                db.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(i)] * avv.data[static_cast<std::size_t>(i)];
        }
    });
}

template <class T>
Value relu(Tape<T>& t, Value x) {
    const TensorT<T>& xv = t.val(x);
    TensorT<T> out(xv.shape);
    double kd = std::numeric_limits<double>::infinity();
    const bool rg = t.requires_grad(x);
    for (std::int64_t i = 0; i < xv.size(); ++i) {
        const T v = xv.data[static_cast<std::size_t>(i)];
        out.data[static_cast<std::size_t>(i)] = v >= T(0) ? v : T(0);
        kd = std::min(kd, std::abs(static_cast<double>(v)));
    }
    t.note_kink(kd);
    return t.record(std::move(out), rg, [x](Tape<T>& tp, Value out_v) {
        const TensorT<T>& g = tp.grad(out_v);
        const TensorT<T>& xvv = tp.val(x);
        TensorT<T>& dx = tp.grad_accum(x);
        for (std::int64_t i = 0; i < g.size(); ++i)
            if (xvv.data[static_cast<std::size_t>(i)] >= T(0))
                dx.data[static_cast<std::size_t>(i)] += g.data[static_cast<std::size_t>(i)];
    });
}

template <class T>
Value leaky_relu(Tape<T>& t, Value x, T slope) {
    const TensorT<T>& xv = t.val(x);
    TensorT<T> out(xv.shape);
    double kd = std::numeric_limits<double>::infinity();
    const bool rg = t.requires_grad(x);
    for (std::int64_t i = 0; i < xv.size(); ++i) {
        const T v = xv.data[static_cast<std::size_t>(i)];
        out.data[static_cast<std::size_t>(i)] = v >= T(0) ? v : slope * v;
        kd = std::min(kd, std::abs(static_cast<double>(v)));
    }
    t.note_kink(kd);
    return t.record(std::move(out), rg, [x, slope](Tape<T>& tp, Value out_v) {
        const TensorT<T>& g = tp.grad(out_v);
        const TensorT<T>& xvv = tp.val(x);
        TensorT<T>& dx = tp.grad_accum(x);
        for (std::int64_t i = 0; i < g.size(); ++i) {
            const T d = xvv.data[static_cast<std::size_t>(i)] >= T(0) ? T(1) : slope;
            dx.data[static_cast<std::size_t>(i)] += d * g.data[static_cast<std::size_t>(i)];
        }
    });
}

template <class T>
Value sigmoid(Tape<T>& t, Value x) {
    const TensorT<T>& xv = t.val(x);
    TensorT<T> out(xv.shape);
    for (std::int64_t i = 0; i < xv.size(); ++i) {
        const T v = xv.data[static_cast<std::size_t>(i)];
        out.data[static_cast<std::size_t>(i)] =
            v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
    }
    return t.record(std::move(out), t.requires_grad(x), [x](Tape<T>& tp, Value out_v) {
        const TensorT<T>& g = tp.grad(out_v);
        const TensorT<T>& s = tp.val(out_v);
        TensorT<T>& dx = tp.grad_accum(x);
        for (std::int64_t i = 0; i < g.size(); ++i) {
            const T sv = s.data[static_cast<std::size_t>(i)];
            dx.data[static_cast<std::size_t>(i)] += sv * (T(1) - sv) * g.data[static_cast<std::size_t>(i)];
        }
    });
}

// r * tanh(x); output lies strictly inside (-r, r) away from saturation.
template <class T>
Value tanh_scaled(Tape<T>& t, Value x, T r) {
    const TensorT<T>& xv = t.val(x);
    TensorT<T> out(xv.shape);
    for (std::int64_t i = 0; i < xv.size(); ++i)
        out.data[static_cast<std::size_t>(i)] = r * std::tanh(xv.data[static_cast<std::size_t>(i)]);
    return t.record(std::move(out), t.requires_grad(x), [x, r](Tape<T>& tp, Value out_v) {
        const TensorT<T>& g = tp.grad(out_v);
        const TensorT<T>& xvv = tp.val(x);
        TensorT<T>& dx = tp.grad_accum(x);
        for (std::int64_t i = 0; i < g.size(); ++i) {
            const T th = std::tanh(xvv.data[static_cast<std::size_t>(i)]);
            dx.data[static_cast<std::size_t>(i)] += r * (T(1) - th * th) * g.data[static_cast<std::size_t>(i)];
        }
    });
}

template <class T>
Value gelu(Tape<T>& t, Value x) {
    const TensorT<T>& xv = t.val(x);
    TensorT<T> out(xv.shape);
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    for (std::int64_t i = 0; i < xv.size(); ++i) {
        const T v = xv.data[static_cast<std::size_t>(i)];
        out.data[static_cast<std::size_t>(i)] = v * T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
    }
    return t.record(std::move(out), t.requires_grad(x), [x](Tape<T>& tp, Value out_v) {
        const TensorT<T>& g = tp.grad(out_v);
        const TensorT<T>& xvv = tp.val(x);
        TensorT<T>& dx = tp.grad_accum(x);
        constexpr T inv_sqrt2pi = T(0.39894228040143267794);
        for (std::int64_t i = 0; i < g.size(); ++i) {
            const T v = xvv.data[static_cast<std::size_t>(i)];
            const T phi = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
            dx.data[static_cast<std::size_t>(i)] += (phi + v * pdf) * g.data[static_cast<std::size_t>(i)];
        }
    });
}

template <class T>
Value sum(Tape<T>& t, Value x) {
    const TensorT<T>& xv = t.val(x);
    double acc = 0;
    for (T v : xv.data) acc += static_cast<double>(v);
    TensorT<T> out(Shape{1});
    out.data[0] = static_cast<T>(acc);
    return t.record(std::move(out), t.requires_grad(x), [x](Tape<T>& tp, Value out_v) {
        const T g = tp.grad(out_v).data[0];
        TensorT<T>& dx = tp.grad_accum(x);
        for (auto& v : dx.data) v += g;
    });
}

// Mean absolute difference. The gradient at zero difference is 0 (sign
// convention); kink proximity is recorded for the gradient-check mode.
template <class T>
Value l1_loss(Tape<T>& t, Value pred, Value target) {
    const TensorT<T>& pv = t.val(pred);
    const TensorT<T>& tv = t.val(target);
    detail::require(pv.shape == tv.shape,
                    "l1_loss: shape mismatch " + shape_str(pv.shape) + " vs " + shape_str(tv.shape));
    double acc = 0;
    double kd = std::numeric_limits<double>::infinity();
    const bool rg = t.requires_grad(pred) || t.requires_grad(target);
    for (std::int64_t i = 0; i < pv.size(); ++i) {
        const double d = static_cast<double>(pv.data[static_cast<std::size_t>(i)]) -
                         static_cast<double>(tv.data[static_cast<std::size_t>(i)]);
        acc += std::abs(d);
        kd = std::min(kd, std::abs(d));
    }
    t.note_kink(kd);
    TensorT<T> out(Shape{1});
    out.data[0] = static_cast<T>(acc / static_cast<double>(pv.size()));
    return t.record(std::move(out), rg, [pred, target](Tape<T>& tp, Value out_v) {
        const T g = tp.grad(out_v).data[0];
        const TensorT<T>& pvv = tp.val(pred);
        const TensorT<T>& tvv = tp.val(target);
        const T inv_n = T(1) / static_cast<T>(pvv.size());
        const bool gp = tp.requires_grad(pred);
        const bool gt = tp.requires_grad(target);
        TensorT<T>* dp = gp ? &tp.grad_accum(pred) : nullptr;
        TensorT<T>* dt = gt ? &tp.grad_accum(target) : nullptr;
        for (std::int64_t i = 0; i < pvv.size(); ++i) {
            const T d = pvv.data[static_cast<std::size_t>(i)] - tvv.data[static_cast<std::size_t>(i)];
            const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
            if (dp) dp->data[static_cast<std::size_t>(i)] += s * inv_n * g;
            if (dt) dt->data[static_cast<std::size_t>(i)] -= s * inv_n * g;
        }
    });
}

} // namespace nlmf
