#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "eseg/common.hpp"
#include "eseg/tensor.hpp"

// Dense reference kernels. All accumulations run in a fixed row-major order so
// results are bit-reproducible; parallel paths split work per output element
// and never change a reduction order.

namespace eseg {

enum class PoolKind { Avg, Max };
enum class ActKind { Relu, Silu, Sigmoid };
enum class ResizeMode { Bilinear, Nearest };
enum class FuseMode { FastNorm, Softmax, Fixed };

inline const char* pool_kind_name(PoolKind k) { return k == PoolKind::Avg ? "avg" : "max"; }

inline PoolKind pool_kind_from_name(const std::string& s) {
    if (s == "avg") return PoolKind::Avg;
    if (s == "max") return PoolKind::Max;
    fail("unknown pool kind '", s, "'");
}

inline const char* act_kind_name(ActKind k) {
    switch (k) {
        case ActKind::Relu: return "relu";
        case ActKind::Silu: return "silu";
        default: return "sigmoid";
    }
}

inline ActKind act_kind_from_name(const std::string& s) {
    if (s == "relu") return ActKind::Relu;
    if (s == "silu") return ActKind::Silu;
    if (s == "sigmoid") return ActKind::Sigmoid;
    fail("unknown activation '", s, "'");
}

inline const char* resize_mode_name(ResizeMode m) {
    return m == ResizeMode::Bilinear ? "bilinear" : "nearest";
}

inline ResizeMode resize_mode_from_name(const std::string& s) {
    if (s == "bilinear") return ResizeMode::Bilinear;
    if (s == "nearest") return ResizeMode::Nearest;
    fail("unknown resize mode '", s, "'");
}

inline const char* fuse_mode_name(FuseMode m) {
    switch (m) {
        case FuseMode::FastNorm: return "fast_norm";
        case FuseMode::Softmax: return "softmax";
        default: return "fixed";
    }
}

inline FuseMode fuse_mode_from_name(const std::string& s) {
    if (s == "fast_norm") return FuseMode::FastNorm;
    if (s == "softmax") return FuseMode::Softmax;
    if (s == "fixed") return FuseMode::Fixed;
    fail("unknown fusion mode '", s, "'");
}

inline std::int64_t conv_out_extent(std::int64_t in, int k, int stride, int padding) {
    const std::int64_t out = (in + 2 * padding - k) / stride + 1;
    if (in + 2 * padding < k || out < 1)
        fail_shape("window k=", k, " s=", stride, " p=", padding, " does not fit extent ", in);
    return out;
}

namespace detail {

template <typename T>
Tensor conv2d_impl(const Tensor& x, const Tensor& w, int stride, int padding) {
    const Shape xs = x.shape(), ws = w.shape();
    const int k = static_cast<int>(ws.h);
    const Shape os{xs.n, ws.n, conv_out_extent(xs.h, k, stride, padding),
                   conv_out_extent(xs.w, k, stride, padding)};
    auto xd = x.data<T>();
    auto wd = w.data<T>();
    std::vector<T> out(static_cast<std::size_t>(os.elems()));
    parallel_for(0, os.n * os.c, [&](std::int64_t nc) {
        const std::int64_t n = nc / os.c, oc = nc % os.c;
        for (std::int64_t oh = 0; oh < os.h; ++oh)
            for (std::int64_t ow = 0; ow < os.w; ++ow) {
                T acc = 0;
                for (std::int64_t ic = 0; ic < xs.c; ++ic)
                    for (int kh = 0; kh < k; ++kh) {
                        const std::int64_t ih = oh * stride - padding + kh;
                        if (ih < 0 || ih >= xs.h) continue;
                        for (int kw = 0; kw < k; ++kw) {
                            const std::int64_t iw = ow * stride - padding + kw;
                            if (iw < 0 || iw >= xs.w) continue;
                            acc += xd[((n * xs.c + ic) * xs.h + ih) * xs.w + iw] *
                                   wd[((oc * ws.c + ic) * k + kh) * k + kw];
                        }
                    }
                out[((n * os.c + oc) * os.h + oh) * os.w + ow] = acc;
            }
    });
    return Tensor::from<T>(os, std::move(out));
}

template <typename T>
std::pair<Tensor, Tensor> conv2d_backward_impl(const Tensor& x, const Tensor& w, int stride,
                                               int padding, const Tensor& gout) {
    const Shape xs = x.shape(), ws = w.shape(), os = gout.shape();
    const int k = static_cast<int>(ws.h);
    auto xd = x.data<T>();
    auto wd = w.data<T>();
    auto gd = gout.data<T>();
    std::vector<T> dx(static_cast<std::size_t>(xs.elems()), T(0));
    std::vector<T> dw(static_cast<std::size_t>(ws.elems()), T(0));
    // dx: gather contributions per input element so parallel chunks never collide
    parallel_for(0, xs.n * xs.c, [&](std::int64_t nc) {
        const std::int64_t n = nc / xs.c, ic = nc % xs.c;
        for (std::int64_t ih = 0; ih < xs.h; ++ih)
            for (std::int64_t iw = 0; iw < xs.w; ++iw) {
                T acc = 0;
                for (std::int64_t oc = 0; oc < os.c; ++oc)
                    for (int kh = 0; kh < k; ++kh) {
                        const std::int64_t num_h = ih + padding - kh;
                        if (num_h < 0 || num_h % stride) continue;
                        const std::int64_t oh = num_h / stride;
                        if (oh >= os.h) continue;
                        for (int kw = 0; kw < k; ++kw) {
                            const std::int64_t num_w = iw + padding - kw;
                            if (num_w < 0 || num_w % stride) continue;
                            const std::int64_t ow = num_w / stride;
                            if (ow >= os.w) continue;
                            acc += gd[((n * os.c + oc) * os.h + oh) * os.w + ow] *
                                   wd[((oc * ws.c + ic) * k + kh) * k + kw];
                        }
                    }
                dx[((n * xs.c + ic) * xs.h + ih) * xs.w + iw] = acc;
            }
    });
    parallel_for(0, ws.n, [&](std::int64_t oc) {
        for (std::int64_t ic = 0; ic < ws.c; ++ic)
            for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw) {
                    T acc = 0;
                    for (std::int64_t n = 0; n < os.n; ++n)
                        for (std::int64_t oh = 0; oh < os.h; ++oh) {
                            const std::int64_t ih = oh * stride - padding + kh;
                            if (ih < 0 || ih >= xs.h) continue;
                            for (std::int64_t ow = 0; ow < os.w; ++ow) {
                                const std::int64_t iw = ow * stride - padding + kw;
                                if (iw < 0 || iw >= xs.w) continue;
                                acc += gd[((n * os.c + oc) * os.h + oh) * os.w + ow] *
                                       xd[((n * xs.c + ic) * xs.h + ih) * xs.w + iw];
                            }
                        }
                    dw[((oc * ws.c + ic) * k + kh) * k + kw] = acc;
                }
    });
    return {Tensor::from<T>(xs, std::move(dx)), Tensor::from<T>(ws, std::move(dw))};
}

template <typename T>
Tensor depthwise_conv2d_impl(const Tensor& x, const Tensor& w, int stride, int padding) {
    const Shape xs = x.shape(), ws = w.shape();
    const int k = static_cast<int>(ws.h);
    const Shape os{xs.n, xs.c, conv_out_extent(xs.h, k, stride, padding),
                   conv_out_extent(xs.w, k, stride, padding)};
    auto xd = x.data<T>();
    auto wd = w.data<T>();
    std::vector<T> out(static_cast<std::size_t>(os.elems()));
    parallel_for(0, os.n * os.c, [&](std::int64_t nc) {
        const std::int64_t n = nc / os.c, c = nc % os.c;
        for (std::int64_t oh = 0; oh < os.h; ++oh)
            for (std::int64_t ow = 0; ow < os.w; ++ow) {
                T acc = 0;
                for (int kh = 0; kh < k; ++kh) {
                    const std::int64_t ih = oh * stride - padding + kh;
                    if (ih < 0 || ih >= xs.h) continue;
                    for (int kw = 0; kw < k; ++kw) {
                        const std::int64_t iw = ow * stride - padding + kw;
                        if (iw < 0 || iw >= xs.w) continue;
                        acc += xd[((n * xs.c + c) * xs.h + ih) * xs.w + iw] *
                               wd[(c * k + kh) * k + kw];
                    }
                }
                out[((n * os.c + c) * os.h + oh) * os.w + ow] = acc;
            }
    });
    return Tensor::from<T>(os, std::move(out));
}

template <typename T>
std::pair<Tensor, Tensor> depthwise_conv2d_backward_impl(const Tensor& x, const Tensor& w,
                                                         int stride, int padding,
                                                         const Tensor& gout) {
    const Shape xs = x.shape(), ws = w.shape(), os = gout.shape();
    const int k = static_cast<int>(ws.h);
    auto xd = x.data<T>();
    auto wd = w.data<T>();
    auto gd = gout.data<T>();
    std::vector<T> dx(static_cast<std::size_t>(xs.elems()), T(0));
    std::vector<T> dw(static_cast<std::size_t>(ws.elems()), T(0));
    parallel_for(0, xs.n * xs.c, [&](std::int64_t nc) {
        const std::int64_t n = nc / xs.c, c = nc % xs.c;
        for (std::int64_t ih = 0; ih < xs.h; ++ih)
            for (std::int64_t iw = 0; iw < xs.w; ++iw) {
                T acc = 0;
                for (int kh = 0; kh < k; ++kh) {
                    const std::int64_t num_h = ih + padding - kh;
                    if (num_h < 0 || num_h % stride) continue;
                    const std::int64_t oh = num_h / stride;
                    if (oh >= os.h) continue;
                    for (int kw = 0; kw < k; ++kw) {
                        const std::int64_t num_w = iw + padding - kw;
                        if (num_w < 0 || num_w % stride) continue;
                        const std::int64_t ow = num_w / stride;
                        if (ow >= os.w) continue;
                        acc += gd[((n * os.c + c) * os.h + oh) * os.w + ow] *
                               wd[(c * k + kh) * k + kw];
                    }
                }
                dx[((n * xs.c + c) * xs.h + ih) * xs.w + iw] = acc;
            }
    });
    parallel_for(0, ws.n, [&](std::int64_t c) {
        for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw) {
                T acc = 0;
                for (std::int64_t n = 0; n < os.n; ++n)
                    for (std::int64_t oh = 0; oh < os.h; ++oh) {
                        const std::int64_t ih = oh * stride - padding + kh;
                        if (ih < 0 || ih >= xs.h) continue;
                        for (std::int64_t ow = 0; ow < os.w; ++ow) {
                            const std::int64_t iw = ow * stride - padding + kw;
                            if (iw < 0 || iw >= xs.w) continue;
                            acc += gd[((n * os.c + c) * os.h + oh) * os.w + ow] *
                                   xd[((n * xs.c + c) * xs.h + ih) * xs.w + iw];
                        }
                    }
                dw[(c * k + kh) * k + kw] = acc;
            }
    });
    return {Tensor::from<T>(xs, std::move(dx)), Tensor::from<T>(ws, std::move(dw))};
}

template <typename T>
Tensor pool2d_impl(const Tensor& x, PoolKind kind, int k, int stride, int padding) {
    const Shape xs = x.shape();
    const Shape os{xs.n, xs.c, conv_out_extent(xs.h, k, stride, padding),
                   conv_out_extent(xs.w, k, stride, padding)};
    auto xd = x.data<T>();
    std::vector<T> out(static_cast<std::size_t>(os.elems()));
    parallel_for(0, os.n * os.c, [&](std::int64_t nc) {
        const std::int64_t n = nc / os.c, c = nc % os.c;
        for (std::int64_t oh = 0; oh < os.h; ++oh)
            for (std::int64_t ow = 0; ow < os.w; ++ow) {
                T acc = 0;
                bool seen = false;
                int count = 0;
                for (int kh = 0; kh < k; ++kh) {
                    const std::int64_t ih = oh * stride - padding + kh;
                    if (ih < 0 || ih >= xs.h) continue;
                    for (int kw = 0; kw < k; ++kw) {
                        const std::int64_t iw = ow * stride - padding + kw;
                        if (iw < 0 || iw >= xs.w) continue;
                        const T v = xd[((n * xs.c + c) * xs.h + ih) * xs.w + iw];
                        if (kind == PoolKind::Avg) {
                            acc += v;
                            ++count;
                        } else if (!seen || v > acc) {
                            acc = v;
                            seen = true;
                        }
                    }
                }
                if (kind == PoolKind::Avg) {
                    if (count == 0) fail("pool window fully out of bounds");
                    acc /= static_cast<T>(count);
                } else if (!seen) {
                    fail("pool window fully out of bounds");
                }
                out[((n * os.c + c) * os.h + oh) * os.w + ow] = acc;
            }
    });
    return Tensor::from<T>(os, std::move(out));
}

template <typename T>
Tensor pool2d_backward_impl(const Tensor& x, PoolKind kind, int k, int stride, int padding,
                            const Tensor& gout) {
    const Shape xs = x.shape(), os = gout.shape();
    auto xd = x.data<T>();
    auto gd = gout.data<T>();
    std::vector<T> dx(static_cast<std::size_t>(xs.elems()), T(0));
    parallel_for(0, os.n * os.c, [&](std::int64_t nc) {
        const std::int64_t n = nc / os.c, c = nc % os.c;
        for (std::int64_t oh = 0; oh < os.h; ++oh)
            for (std::int64_t ow = 0; ow < os.w; ++ow) {
                const T g = gd[((n * os.c + c) * os.h + oh) * os.w + ow];
                if (kind == PoolKind::Avg) {
                    int count = 0;
                    for (int kh = 0; kh < k; ++kh) {
                        const std::int64_t ih = oh * stride - padding + kh;
                        if (ih < 0 || ih >= xs.h) continue;
                        for (int kw = 0; kw < k; ++kw) {
                            const std::int64_t iw = ow * stride - padding + kw;
                            if (iw >= 0 && iw < xs.w) ++count;
                        }
                    }
                    const T share = g / static_cast<T>(count);
                    for (int kh = 0; kh < k; ++kh) {
                        const std::int64_t ih = oh * stride - padding + kh;
                        if (ih < 0 || ih >= xs.h) continue;
                        for (int kw = 0; kw < k; ++kw) {
                            const std::int64_t iw = ow * stride - padding + kw;
                            if (iw < 0 || iw >= xs.w) continue;
                            dx[((n * xs.c + c) * xs.h + ih) * xs.w + iw] += share;
                        }
                    }
                } else {
                    // first max tap in row-major window order receives the gradient
                    std::int64_t best = -1;
                    T bv = 0;
                    for (int kh = 0; kh < k; ++kh) {
                        const std::int64_t ih = oh * stride - padding + kh;
                        if (ih < 0 || ih >= xs.h) continue;
                        for (int kw = 0; kw < k; ++kw) {
                            const std::int64_t iw = ow * stride - padding + kw;
                            if (iw < 0 || iw >= xs.w) continue;
                            const std::int64_t idx = ((n * xs.c + c) * xs.h + ih) * xs.w + iw;
                            if (best < 0 || xd[idx] > bv) {
                                best = idx;
                                bv = xd[idx];
                            }
                        }
                    }
                    if (best >= 0) dx[best] += g;
                }
            }
    });
    return Tensor::from<T>(xs, std::move(dx));
}

// Note: stride-1 overlapping windows can revisit an input element from several
// output positions within the same (n, c) slice, which a single worker owns,
// so the += above never races.

template <typename T>
Tensor global_avg_pool_impl(const Tensor& x) {
    const Shape xs = x.shape();
    auto xd = x.data<T>();
    std::vector<T> out(static_cast<std::size_t>(xs.n * xs.c));
    const T inv = T(1) / static_cast<T>(xs.h * xs.w);
    for (std::int64_t nc = 0; nc < xs.n * xs.c; ++nc) {
        T acc = 0;
        const T* base = xd.data() + nc * xs.h * xs.w;
        for (std::int64_t i = 0; i < xs.h * xs.w; ++i) acc += base[i];
        out[static_cast<std::size_t>(nc)] = acc * inv;
    }
    return Tensor::from<T>(Shape{xs.n, xs.c, 1, 1}, std::move(out));
}

template <typename T>
Tensor global_avg_pool_backward_impl(const Tensor& x, const Tensor& gout) {
    const Shape xs = x.shape();
    auto gd = gout.data<T>();
    std::vector<T> dx(static_cast<std::size_t>(xs.elems()));
    const T inv = T(1) / static_cast<T>(xs.h * xs.w);
    for (std::int64_t nc = 0; nc < xs.n * xs.c; ++nc) {
        const T share = gd[static_cast<std::size_t>(nc)] * inv;
        T* base = dx.data() + nc * xs.h * xs.w;
        for (std::int64_t i = 0; i < xs.h * xs.w; ++i) base[i] = share;
    }
    return Tensor::from<T>(xs, std::move(dx));
}

// lerp keeps results inside [min(a,b), max(a,b)] even in floating point
template <typename T>
inline T lerp1(T a, T b, T t) {
    return a + t * (b - a);
}

struct ResizeTap {
    std::int64_t lo;
    std::int64_t hi;
    double frac;
};

inline ResizeTap resize_tap(std::int64_t dst, std::int64_t in, std::int64_t out) {
    const double src = (static_cast<double>(dst) + 0.5) *
                           (static_cast<double>(in) / static_cast<double>(out)) -
                       0.5;
    double f = std::floor(src);
    std::int64_t lo = static_cast<std::int64_t>(f);
    double frac = src - f;
    if (lo < 0) {
        lo = 0;
        frac = 0.0;
    }
    std::int64_t hi = lo + 1;
    if (hi > in - 1) {
        hi = in - 1;
        if (lo > hi) lo = hi;
        if (lo == hi) frac = 0.0;
    }
    return {lo, hi, frac};
}

template <typename T>
Tensor resize_bilinear_impl(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
    const Shape xs = x.shape();
    if (out_h == xs.h && out_w == xs.w) return x;
    const Shape os{xs.n, xs.c, out_h, out_w};
    auto xd = x.data<T>();
    std::vector<T> out(static_cast<std::size_t>(os.elems()));
    std::vector<ResizeTap> rows(static_cast<std::size_t>(out_h)), cols(static_cast<std::size_t>(out_w));
    for (std::int64_t i = 0; i < out_h; ++i) rows[static_cast<std::size_t>(i)] = resize_tap(i, xs.h, out_h);
    for (std::int64_t i = 0; i < out_w; ++i) cols[static_cast<std::size_t>(i)] = resize_tap(i, xs.w, out_w);
    parallel_for(0, xs.n * xs.c, [&](std::int64_t nc) {
        const T* base = xd.data() + nc * xs.h * xs.w;
        T* obase = out.data() + nc * out_h * out_w;
        for (std::int64_t oh = 0; oh < out_h; ++oh) {
            const auto& r = rows[static_cast<std::size_t>(oh)];
            for (std::int64_t ow = 0; ow < out_w; ++ow) {
                const auto& c = cols[static_cast<std::size_t>(ow)];
                const T x00 = base[r.lo * xs.w + c.lo], x01 = base[r.lo * xs.w + c.hi];
                const T x10 = base[r.hi * xs.w + c.lo], x11 = base[r.hi * xs.w + c.hi];
                const T top = lerp1(x00, x01, static_cast<T>(c.frac));
                const T bot = lerp1(x10, x11, static_cast<T>(c.frac));
                obase[oh * out_w + ow] = lerp1(top, bot, static_cast<T>(r.frac));
            }
        }
    });
    return Tensor::from<T>(os, std::move(out));
}

template <typename T>
Tensor resize_nearest_impl(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
    const Shape xs = x.shape();
    if (out_h == xs.h && out_w == xs.w) return x;
    const Shape os{xs.n, xs.c, out_h, out_w};
    auto xd = x.data<T>();
    std::vector<T> out(static_cast<std::size_t>(os.elems()));
    parallel_for(0, xs.n * xs.c, [&](std::int64_t nc) {
        const T* base = xd.data() + nc * xs.h * xs.w;
        T* obase = out.data() + nc * out_h * out_w;
        for (std::int64_t oh = 0; oh < out_h; ++oh) {
            const std::int64_t ih = std::min(xs.h - 1, oh * xs.h / out_h);
            for (std::int64_t ow = 0; ow < out_w; ++ow) {
                const std::int64_t iw = std::min(xs.w - 1, ow * xs.w / out_w);
                obase[oh * out_w + ow] = base[ih * xs.w + iw];
            }
        }
    });
    return Tensor::from<T>(os, std::move(out));
}

template <typename T>
Tensor resize_backward_impl(const Tensor& x, ResizeMode mode, const Tensor& gout) {
    const Shape xs = x.shape(), os = gout.shape();
    auto gd = gout.data<T>();
    std::vector<T> dx(static_cast<std::size_t>(xs.elems()), T(0));
    if (os.h == xs.h && os.w == xs.w) {
        auto g = gout.data<T>();
        std::copy(g.begin(), g.end(), dx.begin());
        return Tensor::from<T>(xs, std::move(dx));
    }
    std::vector<ResizeTap> rows(static_cast<std::size_t>(os.h)), cols(static_cast<std::size_t>(os.w));
    for (std::int64_t i = 0; i < os.h; ++i) rows[static_cast<std::size_t>(i)] = resize_tap(i, xs.h, os.h);
    for (std::int64_t i = 0; i < os.w; ++i) cols[static_cast<std::size_t>(i)] = resize_tap(i, xs.w, os.w);
    parallel_for(0, xs.n * xs.c, [&](std::int64_t nc) {
        const T* gbase = gd.data() + nc * os.h * os.w;
        T* dbase = dx.data() + nc * xs.h * xs.w;
        for (std::int64_t oh = 0; oh < os.h; ++oh) {
            for (std::int64_t ow = 0; ow < os.w; ++ow) {
                const T g = gbase[oh * os.w + ow];
                if (mode == ResizeMode::Nearest) {
                    const std::int64_t ih = std::min(xs.h - 1, oh * xs.h / os.h);
                    const std::int64_t iw = std::min(xs.w - 1, ow * xs.w / os.w);
                    dbase[ih * xs.w + iw] += g;
                } else {
                    const auto& r = rows[static_cast<std::size_t>(oh)];
                    const auto& c = cols[static_cast<std::size_t>(ow)];
                    const T ty = static_cast<T>(r.frac), tx = static_cast<T>(c.frac);
                    dbase[r.lo * xs.w + c.lo] += g * (1 - ty) * (1 - tx);
                    dbase[r.lo * xs.w + c.hi] += g * (1 - ty) * tx;
                    dbase[r.hi * xs.w + c.lo] += g * ty * (1 - tx);
                    dbase[r.hi * xs.w + c.hi] += g * ty * tx;
                }
            }
        }
    });
    return Tensor::from<T>(xs, std::move(dx));
}

template <typename T>
Tensor activate_impl(const Tensor& x, ActKind kind) {
    auto xd = x.data<T>();
    std::vector<T> out(static_cast<std::size_t>(x.elems()));
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = xd[i];
        switch (kind) {
            case ActKind::Relu: out[i] = v > 0 ? v : T(0); break;
            case ActKind::Silu: out[i] = v / (T(1) + std::exp(-v)); break;
            case ActKind::Sigmoid: out[i] = T(1) / (T(1) + std::exp(-v)); break;
        }
    }
    return Tensor::from<T>(x.shape(), std::move(out));
}

template <typename T>
Tensor activate_backward_impl(const Tensor& x, ActKind kind, const Tensor& gout) {
    auto xd = x.data<T>();
    auto gd = gout.data<T>();
    std::vector<T> dx(static_cast<std::size_t>(x.elems()));
    for (std::size_t i = 0; i < dx.size(); ++i) {
        const T v = xd[i];
        T d;
        switch (kind) {
            case ActKind::Relu: d = v > 0 ? T(1) : T(0); break;
            case ActKind::Silu: {
                const T s = T(1) / (T(1) + std::exp(-v));
                d = s * (T(1) + v * (T(1) - s));
                break;
            }
            default: {
                const T s = T(1) / (T(1) + std::exp(-v));
                d = s * (T(1) - s);
                break;
            }
        }
        dx[i] = gd[i] * d;
    }
    return Tensor::from<T>(x.shape(), std::move(dx));
}

}  // namespace detail

inline void check_conv_padding(int k, int padding) {
    if (padding != 0 && padding != k / 2)
        fail_shape("conv padding must be 0 or ", k / 2, " for k=", k, ", got ", padding);
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
    check_same_dtype(x, w, "conv2d");
    const Shape xs = x.shape(), ws = w.shape();
    if (ws.h != ws.w) fail_shape("conv2d kernel must be square, got ", ws.str());
    if (xs.c != ws.c)
        fail_shape("conv2d input channels ", xs.c, " != weight in-channels ", ws.c, " (input ",
                   xs.str(), ", weight ", ws.str(), ")");
    check_conv_padding(static_cast<int>(ws.h), padding);
    return x.dtype() == DType::F32 ? detail::conv2d_impl<float>(x, w, stride, padding)
                                   : detail::conv2d_impl<double>(x, w, stride, padding);
}

inline std::pair<Tensor, Tensor> conv2d_backward(const Tensor& x, const Tensor& w, int stride,
                                                 int padding, const Tensor& gout) {
    return x.dtype() == DType::F32
               ? detail::conv2d_backward_impl<float>(x, w, stride, padding, gout)
               : detail::conv2d_backward_impl<double>(x, w, stride, padding, gout);
}

inline Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
    check_same_dtype(x, w, "depthwise_conv2d");
    const Shape xs = x.shape(), ws = w.shape();
    if (ws.h != ws.w) fail_shape("depthwise kernel must be square, got ", ws.str());
    if (ws.c != 1) fail_shape("depthwise weight must be (c,1,k,k), got ", ws.str());
    if (xs.c != ws.n)
        fail_shape("depthwise weight channels ", ws.n, " != input channels ", xs.c);
    check_conv_padding(static_cast<int>(ws.h), padding);
    return x.dtype() == DType::F32 ? detail::depthwise_conv2d_impl<float>(x, w, stride, padding)
                                   : detail::depthwise_conv2d_impl<double>(x, w, stride, padding);
}

inline std::pair<Tensor, Tensor> depthwise_conv2d_backward(const Tensor& x, const Tensor& w,
                                                           int stride, int padding,
                                                           const Tensor& gout) {
    return x.dtype() == DType::F32
               ? detail::depthwise_conv2d_backward_impl<float>(x, w, stride, padding, gout)
               : detail::depthwise_conv2d_backward_impl<double>(x, w, stride, padding, gout);
}

inline Tensor pool2d(const Tensor& x, PoolKind kind, int k, int stride, int padding) {
    if (k < 1) fail_shape("pool kernel must be >= 1, got ", k);
    return x.dtype() == DType::F32 ? detail::pool2d_impl<float>(x, kind, k, stride, padding)
                                   : detail::pool2d_impl<double>(x, kind, k, stride, padding);
}

inline Tensor pool2d_backward(const Tensor& x, PoolKind kind, int k, int stride, int padding,
                              const Tensor& gout) {
    return x.dtype() == DType::F32
               ? detail::pool2d_backward_impl<float>(x, kind, k, stride, padding, gout)
               : detail::pool2d_backward_impl<double>(x, kind, k, stride, padding, gout);
}

inline Tensor global_avg_pool(const Tensor& x) {
    return x.dtype() == DType::F32 ? detail::global_avg_pool_impl<float>(x)
                                   : detail::global_avg_pool_impl<double>(x);
}

inline Tensor global_avg_pool_backward(const Tensor& x, const Tensor& gout) {
    return x.dtype() == DType::F32 ? detail::global_avg_pool_backward_impl<float>(x, gout)
                                   : detail::global_avg_pool_backward_impl<double>(x, gout);
}

inline Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
    if (out_h < 1 || out_w < 1) fail_shape("resize target must be positive, got ", out_h, "x", out_w);
    return x.dtype() == DType::F32 ? detail::resize_bilinear_impl<float>(x, out_h, out_w)
                                   : detail::resize_bilinear_impl<double>(x, out_h, out_w);
}

inline Tensor nearest_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
    if (out_h < 1 || out_w < 1) fail_shape("resize target must be positive, got ", out_h, "x", out_w);
    return x.dtype() == DType::F32 ? detail::resize_nearest_impl<float>(x, out_h, out_w)
                                   : detail::resize_nearest_impl<double>(x, out_h, out_w);
}

inline Tensor resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w, ResizeMode mode) {
    return mode == ResizeMode::Bilinear ? bilinear_resize(x, out_h, out_w)
                                        : nearest_resize(x, out_h, out_w);
}

inline Tensor resize_backward(const Tensor& x, ResizeMode mode, const Tensor& gout) {
    return x.dtype() == DType::F32 ? detail::resize_backward_impl<float>(x, mode, gout)
                                   : detail::resize_backward_impl<double>(x, mode, gout);
}

struct BatchNormResult {
    Tensor y;
    Tensor batch_mean;  // (1,c,1,1)
    Tensor batch_var;   // biased
    Tensor new_running_mean;
    Tensor new_running_var;
};

namespace detail {

template <typename T>
BatchNormResult batch_norm_train_impl(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                      const Tensor& running_mean, const Tensor& running_var,
                                      double eps, double momentum) {
    const Shape xs = x.shape();
    const std::int64_t per = xs.n * xs.h * xs.w;
    auto xd = x.data<T>();
    auto gm = gamma.data<T>();
    auto bt = beta.data<T>();
    std::vector<T> mean(static_cast<std::size_t>(xs.c), T(0));
    std::vector<T> var(static_cast<std::size_t>(xs.c), T(0));
    for (std::int64_t c = 0; c < xs.c; ++c) {
        T acc = 0;
        for (std::int64_t n = 0; n < xs.n; ++n) {
            const T* base = xd.data() + (n * xs.c + c) * xs.h * xs.w;
            for (std::int64_t i = 0; i < xs.h * xs.w; ++i) acc += base[i];
        }
        const T mu = acc / static_cast<T>(per);
        T vacc = 0;
        for (std::int64_t n = 0; n < xs.n; ++n) {
            const T* base = xd.data() + (n * xs.c + c) * xs.h * xs.w;
            for (std::int64_t i = 0; i < xs.h * xs.w; ++i) {
                const T d = base[i] - mu;
                vacc += d * d;
            }
        }
        mean[static_cast<std::size_t>(c)] = mu;
        var[static_cast<std::size_t>(c)] = vacc / static_cast<T>(per);
    }
    std::vector<T> out(static_cast<std::size_t>(xs.elems()));
    for (std::int64_t c = 0; c < xs.c; ++c) {
        const T inv = T(1) / std::sqrt(var[static_cast<std::size_t>(c)] + static_cast<T>(eps));
        const T g = gm[static_cast<std::size_t>(c)], b = bt[static_cast<std::size_t>(c)];
        const T mu = mean[static_cast<std::size_t>(c)];
        for (std::int64_t n = 0; n < xs.n; ++n) {
            const T* base = xd.data() + (n * xs.c + c) * xs.h * xs.w;
            T* obase = out.data() + (n * xs.c + c) * xs.h * xs.w;
            for (std::int64_t i = 0; i < xs.h * xs.w; ++i)
                obase[i] = g * (base[i] - mu) * inv + b;
        }
    }
    auto rm = running_mean.data<T>();
    auto rv = running_var.data<T>();
    std::vector<T> nrm(static_cast<std::size_t>(xs.c)), nrv(static_cast<std::size_t>(xs.c));
    for (std::size_t c = 0; c < nrm.size(); ++c) {
        nrm[c] = static_cast<T>((1.0 - momentum) * rm[c] + momentum * mean[c]);
        nrv[c] = static_cast<T>((1.0 - momentum) * rv[c] + momentum * var[c]);
    }
    const Shape cs{1, xs.c, 1, 1};
    return {Tensor::from<T>(xs, std::move(out)), Tensor::from<T>(cs, std::move(mean)),
            Tensor::from<T>(cs, std::move(var)), Tensor::from<T>(cs, std::move(nrm)),
            Tensor::from<T>(cs, std::move(nrv))};
}

template <typename T>
Tensor batch_norm_infer_impl(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                             const Tensor& running_mean, const Tensor& running_var, double eps) {
    const Shape xs = x.shape();
    auto xd = x.data<T>();
    auto gm = gamma.data<T>();
    auto bt = beta.data<T>();
    auto rm = running_mean.data<T>();
    auto rv = running_var.data<T>();
    std::vector<T> out(static_cast<std::size_t>(xs.elems()));
    for (std::int64_t c = 0; c < xs.c; ++c) {
        const T inv = T(1) / std::sqrt(rv[static_cast<std::size_t>(c)] + static_cast<T>(eps));
        const T g = gm[static_cast<std::size_t>(c)], b = bt[static_cast<std::size_t>(c)];
        const T mu = rm[static_cast<std::size_t>(c)];
        for (std::int64_t n = 0; n < xs.n; ++n) {
            const T* base = xd.data() + (n * xs.c + c) * xs.h * xs.w;
            T* obase = out.data() + (n * xs.c + c) * xs.h * xs.w;
            for (std::int64_t i = 0; i < xs.h * xs.w; ++i)
                obase[i] = g * (base[i] - mu) * inv + b;
        }
    }
    return Tensor::from<T>(xs, std::move(out));
}

template <typename T>
std::array<Tensor, 3> batch_norm_backward_train_impl(const Tensor& x, const Tensor& gamma,
                                                     const Tensor& mean, const Tensor& var,
                                                     double eps, const Tensor& gout) {
    const Shape xs = x.shape();
    const std::int64_t per = xs.n * xs.h * xs.w;
    auto xd = x.data<T>();
    auto gm = gamma.data<T>();
    auto mu = mean.data<T>();
    auto vr = var.data<T>();
    auto gd = gout.data<T>();
    std::vector<T> dx(static_cast<std::size_t>(xs.elems()));
    std::vector<T> dgamma(static_cast<std::size_t>(xs.c), T(0));
    std::vector<T> dbeta(static_cast<std::size_t>(xs.c), T(0));
    for (std::int64_t c = 0; c < xs.c; ++c) {
        const T inv = T(1) / std::sqrt(vr[static_cast<std::size_t>(c)] + static_cast<T>(eps));
        const T m = mu[static_cast<std::size_t>(c)];
        T sum_g = 0, sum_gx = 0;
        for (std::int64_t n = 0; n < xs.n; ++n) {
            const T* gb = gd.data() + (n * xs.c + c) * xs.h * xs.w;
            const T* xb = xd.data() + (n * xs.c + c) * xs.h * xs.w;
            for (std::int64_t i = 0; i < xs.h * xs.w; ++i) {
                sum_g += gb[i];
                sum_gx += gb[i] * (xb[i] - m) * inv;
            }
        }
        dgamma[static_cast<std::size_t>(c)] = sum_gx;
        dbeta[static_cast<std::size_t>(c)] = sum_g;
        const T g = gm[static_cast<std::size_t>(c)];
        const T invm = T(1) / static_cast<T>(per);
        for (std::int64_t n = 0; n < xs.n; ++n) {
            const T* gb = gd.data() + (n * xs.c + c) * xs.h * xs.w;
            const T* xb = xd.data() + (n * xs.c + c) * xs.h * xs.w;
            T* db = dx.data() + (n * xs.c + c) * xs.h * xs.w;
            for (std::int64_t i = 0; i < xs.h * xs.w; ++i) {
                const T xhat = (xb[i] - m) * inv;
                db[i] = g * inv * (gb[i] - invm * sum_g - invm * xhat * sum_gx);
            }
        }
    }
    const Shape cs{1, xs.c, 1, 1};
    return {Tensor::from<T>(xs, std::move(dx)), Tensor::from<T>(cs, std::move(dgamma)),
            Tensor::from<T>(cs, std::move(dbeta))};
}

template <typename T>
std::array<Tensor, 3> batch_norm_backward_infer_impl(const Tensor& x, const Tensor& gamma,
                                                     const Tensor& running_mean,
                                                     const Tensor& running_var, double eps,
                                                     const Tensor& gout) {
    const Shape xs = x.shape();
    auto xd = x.data<T>();
    auto gm = gamma.data<T>();
    auto rm = running_mean.data<T>();
    auto rv = running_var.data<T>();
    auto gd = gout.data<T>();
    std::vector<T> dx(static_cast<std::size_t>(xs.elems()));
    std::vector<T> dgamma(static_cast<std::size_t>(xs.c), T(0));
    std::vector<T> dbeta(static_cast<std::size_t>(xs.c), T(0));
    for (std::int64_t c = 0; c < xs.c; ++c) {
        const T inv = T(1) / std::sqrt(rv[static_cast<std::size_t>(c)] + static_cast<T>(eps));
        const T m = rm[static_cast<std::size_t>(c)];
        const T g = gm[static_cast<std::size_t>(c)];
        T sum_g = 0, sum_gx = 0;
        for (std::int64_t n = 0; n < xs.n; ++n) {
            const T* gb = gd.data() + (n * xs.c + c) * xs.h * xs.w;
            const T* xb = xd.data() + (n * xs.c + c) * xs.h * xs.w;
            T* db = dx.data() + (n * xs.c + c) * xs.h * xs.w;
            for (std::int64_t i = 0; i < xs.h * xs.w; ++i) {
                sum_g += gb[i];
                sum_gx += gb[i] * (xb[i] - m) * inv;
                db[i] = gb[i] * g * inv;
            }
        }
        dgamma[static_cast<std::size_t>(c)] = sum_gx;
        dbeta[static_cast<std::size_t>(c)] = sum_g;
    }
    const Shape cs{1, xs.c, 1, 1};
    return {Tensor::from<T>(xs, std::move(dx)), Tensor::from<T>(cs, std::move(dgamma)),
            Tensor::from<T>(cs, std::move(dbeta))};
}

}  // namespace detail

inline void check_bn_args(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    if (gamma.elems() != x.shape().c || beta.elems() != x.shape().c)
        fail_shape("batch_norm gamma/beta length ", gamma.elems(), "/", beta.elems(),
                   " != channels ", x.shape().c);
    if (x.shape().n * x.shape().h * x.shape().w == 0) fail("batch_norm: empty channel");
}

inline BatchNormResult batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                        const Tensor& running_mean, const Tensor& running_var,
                                        double eps, double momentum) {
    check_bn_args(x, gamma, beta);
    return x.dtype() == DType::F32
               ? detail::batch_norm_train_impl<float>(x, gamma, beta, running_mean, running_var,
                                                      eps, momentum)
               : detail::batch_norm_train_impl<double>(x, gamma, beta, running_mean, running_var,
                                                       eps, momentum);
}

inline Tensor batch_norm_infer(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                               const Tensor& running_mean, const Tensor& running_var, double eps) {
    check_bn_args(x, gamma, beta);
    return x.dtype() == DType::F32
               ? detail::batch_norm_infer_impl<float>(x, gamma, beta, running_mean, running_var, eps)
               : detail::batch_norm_infer_impl<double>(x, gamma, beta, running_mean, running_var,
                                                       eps);
}

inline std::array<Tensor, 3> batch_norm_backward_train(const Tensor& x, const Tensor& gamma,
                                                       const Tensor& mean, const Tensor& var,
                                                       double eps, const Tensor& gout) {
    return x.dtype() == DType::F32
               ? detail::batch_norm_backward_train_impl<float>(x, gamma, mean, var, eps, gout)
               : detail::batch_norm_backward_train_impl<double>(x, gamma, mean, var, eps, gout);
}

inline std::array<Tensor, 3> batch_norm_backward_infer(const Tensor& x, const Tensor& gamma,
                                                       const Tensor& running_mean,
                                                       const Tensor& running_var, double eps,
                                                       const Tensor& gout) {
    return x.dtype() == DType::F32
               ? detail::batch_norm_backward_infer_impl<float>(x, gamma, running_mean, running_var,
                                                               eps, gout)
               : detail::batch_norm_backward_infer_impl<double>(x, gamma, running_mean,
                                                                running_var, eps, gout);
}

inline Tensor activate(const Tensor& x, ActKind kind) {
    return x.dtype() == DType::F32 ? detail::activate_impl<float>(x, kind)
                                   : detail::activate_impl<double>(x, kind);
}

inline Tensor activate_backward(const Tensor& x, ActKind kind, const Tensor& gout) {
    return x.dtype() == DType::F32 ? detail::activate_backward_impl<float>(x, kind, gout)
                                   : detail::activate_backward_impl<double>(x, kind, gout);
}

namespace detail {

template <typename T>
Tensor bias_add_impl(const Tensor& x, const Tensor& b) {
    const Shape xs = x.shape();
    auto xd = x.data<T>();
    auto bd = b.data<T>();
    std::vector<T> out(static_cast<std::size_t>(xs.elems()));
    for (std::int64_t n = 0; n < xs.n; ++n)
        for (std::int64_t c = 0; c < xs.c; ++c) {
            const T bias = bd[static_cast<std::size_t>(c)];
            const T* base = xd.data() + (n * xs.c + c) * xs.h * xs.w;
            T* obase = out.data() + (n * xs.c + c) * xs.h * xs.w;
            for (std::int64_t i = 0; i < xs.h * xs.w; ++i) obase[i] = base[i] + bias;
        }
    return Tensor::from<T>(xs, std::move(out));
}

template <typename T>
std::pair<Tensor, Tensor> bias_add_backward_impl(const Tensor& x, const Tensor& gout) {
    const Shape xs = x.shape();
    auto gd = gout.data<T>();
    std::vector<T> db(static_cast<std::size_t>(xs.c), T(0));
    for (std::int64_t n = 0; n < xs.n; ++n)
        for (std::int64_t c = 0; c < xs.c; ++c) {
            const T* base = gd.data() + (n * xs.c + c) * xs.h * xs.w;
            T acc = 0;
            for (std::int64_t i = 0; i < xs.h * xs.w; ++i) acc += base[i];
            db[static_cast<std::size_t>(c)] += acc;
        }
    return {gout, Tensor::from<T>(Shape{1, xs.c, 1, 1}, std::move(db))};
}

template <typename T>
Tensor add_impl(const std::vector<Tensor>& xs) {
    const Shape s = xs.front().shape();
    std::vector<T> out(static_cast<std::size_t>(s.elems()), T(0));
    for (const auto& x : xs) {
        auto xd = x.data<T>();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += xd[i];
    }
    return Tensor::from<T>(s, std::move(out));
}

template <typename T>
Tensor mul_impl(const Tensor& a, const Tensor& b) {
    const Shape as = a.shape(), bs = b.shape();
    auto ad = a.data<T>();
    auto bd = b.data<T>();
    std::vector<T> out(static_cast<std::size_t>(as.elems()));
    if (as == bs) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    } else {
        for (std::int64_t n = 0; n < as.n; ++n)
            for (std::int64_t c = 0; c < as.c; ++c) {
                const T g = bd[static_cast<std::size_t>(n * as.c + c)];
                const T* base = ad.data() + (n * as.c + c) * as.h * as.w;
                T* obase = out.data() + (n * as.c + c) * as.h * as.w;
                for (std::int64_t i = 0; i < as.h * as.w; ++i) obase[i] = base[i] * g;
            }
    }
    return Tensor::from<T>(as, std::move(out));
}

template <typename T>
std::pair<Tensor, Tensor> mul_backward_impl(const Tensor& a, const Tensor& b, const Tensor& gout) {
    const Shape as = a.shape(), bs = b.shape();
    auto ad = a.data<T>();
    auto bd = b.data<T>();
    auto gd = gout.data<T>();
    std::vector<T> da(static_cast<std::size_t>(as.elems()));
    std::vector<T> db(static_cast<std::size_t>(bs.elems()), T(0));
    if (as == bs) {
        for (std::size_t i = 0; i < da.size(); ++i) {
            da[i] = gd[i] * bd[i];
            db[i] = gd[i] * ad[i];
        }
    } else {
        for (std::int64_t n = 0; n < as.n; ++n)
            for (std::int64_t c = 0; c < as.c; ++c) {
                const T g = bd[static_cast<std::size_t>(n * as.c + c)];
                const std::int64_t off = (n * as.c + c) * as.h * as.w;
                T acc = 0;
                for (std::int64_t i = 0; i < as.h * as.w; ++i) {
                    da[static_cast<std::size_t>(off + i)] = gd[off + i] * g;
                    acc += gd[off + i] * ad[off + i];
                }
                db[static_cast<std::size_t>(n * as.c + c)] = acc;
            }
    }
    return {Tensor::from<T>(as, std::move(da)), Tensor::from<T>(bs, std::move(db))};
}

template <typename T>
Tensor fuse_weighted_impl(const std::vector<Tensor>& xs, const std::vector<double>& coeffs) {
    const Shape s = xs.front().shape();
    std::vector<T> out(static_cast<std::size_t>(s.elems()), T(0));
    for (std::size_t m = 0; m < xs.size(); ++m) {
        auto xd = xs[m].data<T>();
        const T c = static_cast<T>(coeffs[m]);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * xd[i];
    }
    return Tensor::from<T>(s, std::move(out));
}

template <typename T>
Tensor reduce_sum_impl(const Tensor& x) {
    auto xd = x.data<T>();
    T acc = 0;
    for (std::size_t i = 0; i < xd.size(); ++i) acc += xd[i];
    return Tensor::from<T>(Shape{1, 1, 1, 1}, std::vector<T>{acc});
}

}  // namespace detail

inline Tensor bias_add(const Tensor& x, const Tensor& b) {
    check_same_dtype(x, b, "bias_add");
    if (b.elems() != x.shape().c)
        fail_shape("bias length ", b.elems(), " != channels ", x.shape().c);
    return x.dtype() == DType::F32 ? detail::bias_add_impl<float>(x, b)
                                   : detail::bias_add_impl<double>(x, b);
}

// returns (dx, dbias)
inline std::pair<Tensor, Tensor> bias_add_backward(const Tensor& x, const Tensor& gout) {
    return x.dtype() == DType::F32 ? detail::bias_add_backward_impl<float>(x, gout)
                                   : detail::bias_add_backward_impl<double>(x, gout);
}

inline Tensor add(const std::vector<Tensor>& xs) {
    if (xs.empty()) fail("add: no operands");
    for (const auto& x : xs) {
        check_same_dtype(xs.front(), x, "add");
        if (!(x.shape() == xs.front().shape()))
            fail_shape("add operand shapes differ: ", xs.front().shape().str(), " vs ",
                       x.shape().str());
    }
    return xs.front().dtype() == DType::F32 ? detail::add_impl<float>(xs)
                                            : detail::add_impl<double>(xs);
}

// b must match a's shape exactly or be a per-channel gate (n, c, 1, 1)
inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_dtype(a, b, "mul");
    const Shape as = a.shape(), bs = b.shape();
    if (!(as == bs) && !(bs.n == as.n && bs.c == as.c && bs.h == 1 && bs.w == 1))
        fail_shape("mul operands ", as.str(), " and ", bs.str(), " are not compatible");
    return a.dtype() == DType::F32 ? detail::mul_impl<float>(a, b) : detail::mul_impl<double>(a, b);
}

inline std::pair<Tensor, Tensor> mul_backward(const Tensor& a, const Tensor& b,
                                              const Tensor& gout) {
    return a.dtype() == DType::F32 ? detail::mul_backward_impl<float>(a, b, gout)
                                   : detail::mul_backward_impl<double>(a, b, gout);
}

inline std::vector<double> softmax_vec(const std::vector<double>& w) {
    if (w.empty()) fail("softmax_vec: empty input");
    const double m = *std::max_element(w.begin(), w.end());
    std::vector<double> out(w.size());
    double denom = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        out[i] = std::exp(w[i] - m);
        denom += out[i];
    }
    for (auto& v : out) v /= denom;
    return out;
}

// fast-normalized fusion: relu(w)_i / (sum relu(w) + eps)
inline std::vector<double> fast_norm_coeffs(const std::vector<double>& w, double eps) {
    std::vector<double> out(w.size());
    double denom = eps;
    for (std::size_t i = 0; i < w.size(); ++i) {
        out[i] = w[i] > 0.0 ? w[i] : 0.0;
        denom += out[i];
    }
    for (auto& v : out) v /= denom;
    return out;
}

inline std::vector<double> fuse_coeffs(FuseMode mode, const std::vector<double>& w, double eps) {
    switch (mode) {
        case FuseMode::FastNorm: return fast_norm_coeffs(w, eps);
        case FuseMode::Softmax: return softmax_vec(w);
        default: return w;  // already coefficients
    }
}

inline Tensor fuse_weighted(const std::vector<Tensor>& xs, const std::vector<double>& coeffs) {
    if (xs.empty()) fail("fuse_weighted: no inputs");
    if (xs.size() != coeffs.size())
        fail_shape("fuse_weighted: ", xs.size(), " inputs vs ", coeffs.size(), " coefficients");
    for (const auto& x : xs) {
        check_same_dtype(xs.front(), x, "fuse_weighted");
        if (!(x.shape() == xs.front().shape()))
            fail_shape("fuse_weighted input shapes differ: ", xs.front().shape().str(), " vs ",
                       x.shape().str());
    }
    return xs.front().dtype() == DType::F32 ? detail::fuse_weighted_impl<float>(xs, coeffs)
                                            : detail::fuse_weighted_impl<double>(xs, coeffs);
}

struct FuseBackward {
    std::vector<Tensor> dinputs;
    std::vector<double> dweights;  // empty for Fixed mode
};

// Gradients flow through both the mix and, for learnable modes, the
// normalization of the raw weights.
inline FuseBackward fuse_weighted_backward(const std::vector<Tensor>& xs,
                                           const std::vector<double>& w, FuseMode mode, double eps,
                                           const Tensor& gout) {
    const auto coeffs = fuse_coeffs(mode, w, eps);
    FuseBackward out;
    out.dinputs.reserve(xs.size());
    std::vector<double> gdotx(xs.size(), 0.0);
    for (std::size_t m = 0; m < xs.size(); ++m) {
        out.dinputs.push_back(fuse_weighted({gout}, {coeffs[m]}));
        double acc = 0.0;
        for (std::int64_t i = 0; i < gout.elems(); ++i) acc += gout.item(i) * xs[m].item(i);
        gdotx[m] = acc;
    }
    if (mode == FuseMode::Softmax) {
        double mix = 0.0;
        for (std::size_t m = 0; m < xs.size(); ++m) mix += coeffs[m] * gdotx[m];
        out.dweights.resize(xs.size());
        for (std::size_t m = 0; m < xs.size(); ++m)
            out.dweights[m] = coeffs[m] * (gdotx[m] - mix);
    } else if (mode == FuseMode::FastNorm) {
        double denom = eps, sdotx = 0.0;
        std::vector<double> r(xs.size());
        for (std::size_t m = 0; m < xs.size(); ++m) {
            r[m] = w[m] > 0.0 ? w[m] : 0.0;
            denom += r[m];
            sdotx += r[m] * gdotx[m];
        }
        out.dweights.resize(xs.size());
        for (std::size_t m = 0; m < xs.size(); ++m) {
            const double dr = (gdotx[m] - sdotx / denom) / denom;
            out.dweights[m] = w[m] > 0.0 ? dr : 0.0;
        }
    }
    return out;
}

inline Tensor reduce_sum(const Tensor& x) {
    return x.dtype() == DType::F32 ? detail::reduce_sum_impl<float>(x)
                                   : detail::reduce_sum_impl<double>(x);
}

inline Tensor reduce_sum_backward(const Tensor& x, const Tensor& gout) {
    return Tensor::filled(x.shape(), x.dtype(), gout.scalar_value());
}

// per-pixel softmax over the channel axis
inline Tensor softmax_channels(const Tensor& x) {
    const Shape xs = x.shape();
    std::vector<double> out(static_cast<std::size_t>(xs.elems()));
    for (std::int64_t n = 0; n < xs.n; ++n)
        for (std::int64_t h = 0; h < xs.h; ++h)
            for (std::int64_t w = 0; w < xs.w; ++w) {
                double m = -std::numeric_limits<double>::infinity();
                for (std::int64_t c = 0; c < xs.c; ++c) m = std::max(m, x.item(x.index(n, c, h, w)));
                double denom = 0.0;
                for (std::int64_t c = 0; c < xs.c; ++c) {
                    const double e = std::exp(x.item(x.index(n, c, h, w)) - m);
                    out[static_cast<std::size_t>(x.index(n, c, h, w))] = e;
                    denom += e;
                }
                for (std::int64_t c = 0; c < xs.c; ++c)
                    out[static_cast<std::size_t>(x.index(n, c, h, w))] /= denom;
            }
    if (x.dtype() == DType::F64) return Tensor::from_f64(xs, std::move(out));
    std::vector<float> of(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) of[i] = static_cast<float>(out[i]);
    return Tensor::from_f32(xs, std::move(of));
}

}  // namespace eseg
