// Copyright 2026 The hdrvam Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "hdrvam/core.hpp"

namespace hdrvam {

enum class Padding { kSame, kValid };
enum class BnMode { kTrain, kInfer };

// ---------------------------------------------------------------------------
// Define-by-run computation graph with reverse-mode differentiation.
//
// Ops append nodes in evaluation order, so the tape itself is a topological
// order; backward() sweeps it in reverse. Values are dense rank-4 tensors
// [batch, channels, height, width] except reduction results (rank-1 [1]) and
// per-channel vectors. Single-threaded and deterministic: identical inputs
// produce bit-identical values and gradients.
// ---------------------------------------------------------------------------

template <typename T>
class Graph {
public:
    struct ValueRef {
        int32_t id = -1;
        bool valid() const { return id >= 0; }
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    size_t num_nodes() const { return nodes_.size(); }

    const Tensor<T>& value(ValueRef v) const { return node(v.id).value; }

    // Gradient of the last backward() root w.r.t. this node. Zero-filled for
    // nodes the root does not reach.
    const Tensor<T>& grad(ValueRef v) const {
        const Node& n = node(v.id);
        if (n.grad.empty()) throw ValidationError("gradient not computed; run backward() first");
        return n.grad;
    }

    bool requires_grad(ValueRef v) const { return node(v.id).requires_grad; }

    ValueRef leaf(Tensor<T> value, bool requires_grad = false) {
        return push(std::move(value), requires_grad, {}, nullptr);
    }

    // -- element-wise -------------------------------------------------------

    ValueRef relu(ValueRef x) {
        const Tensor<T>& xv = value(x);
        Tensor<T> out(xv.shape());
        for (int64_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
        return push(std::move(out), node(x.id).requires_grad, {x.id},
                    [x](Graph& g, int32_t self) {
                        const Tensor<T>& xv = g.node(x.id).value;
                        const Tensor<T>& dy = g.node(self).grad;
                        if (!g.node(x.id).requires_grad) return;
                        Tensor<T>& dx = g.grad_buf(x.id);
                        for (int64_t i = 0; i < xv.size(); ++i)
                            if (xv[i] > T(0)) dx[i] += dy[i];
                    });
    }

    // Logistic, nudged to stay strictly inside (0,1) even when the closest
    // representable value would round to an endpoint.
    ValueRef sigmoid(ValueRef x) {
        const Tensor<T>& xv = value(x);
        Tensor<T> out(xv.shape());
        const T hi = std::nextafter(T(1), T(0));
        const T lo = std::numeric_limits<T>::min();
        for (int64_t i = 0; i < xv.size(); ++i) {
            T s = stable_sigmoid(xv[i]);
            out[i] = std::clamp(s, lo, hi);
        }
        return push(std::move(out), node(x.id).requires_grad, {x.id},
                    [x](Graph& g, int32_t self) {
                        if (!g.node(x.id).requires_grad) return;
                        const Tensor<T>& s = g.node(self).value;
                        const Tensor<T>& dy = g.node(self).grad;
                        Tensor<T>& dx = g.grad_buf(x.id);
                        for (int64_t i = 0; i < s.size(); ++i) dx[i] += dy[i] * s[i] * (T(1) - s[i]);
                    });
    }

    ValueRef abs(ValueRef x) {
        const Tensor<T>& xv = value(x);
        Tensor<T> out(xv.shape());
        for (int64_t i = 0; i < xv.size(); ++i) out[i] = xv[i] < T(0) ? -xv[i] : xv[i];
        return push(std::move(out), node(x.id).requires_grad, {x.id},
                    [x](Graph& g, int32_t self) {
                        if (!g.node(x.id).requires_grad) return;
                        const Tensor<T>& xv = g.node(x.id).value;
                        const Tensor<T>& dy = g.node(self).grad;
                        Tensor<T>& dx = g.grad_buf(x.id);
                        for (int64_t i = 0; i < xv.size(); ++i) {
                            if (xv[i] > T(0)) dx[i] += dy[i];
                            else if (xv[i] < T(0)) dx[i] -= dy[i];
                        }
                    });
    }

    ValueRef scale(ValueRef x, T a) {
        const Tensor<T>& xv = value(x);
        Tensor<T> out(xv.shape());
        for (int64_t i = 0; i < xv.size(); ++i) out[i] = a * xv[i];
        return push(std::move(out), node(x.id).requires_grad, {x.id},
                    [x, a](Graph& g, int32_t self) {
                        if (!g.node(x.id).requires_grad) return;
                        const Tensor<T>& dy = g.node(self).grad;
                        Tensor<T>& dx = g.grad_buf(x.id);
                        for (int64_t i = 0; i < dy.size(); ++i) dx[i] += a * dy[i];
                    });
    }

    // log(x/(1-x)) with x clamped to [eps, 1-eps]; gradient is zero in the
    // clamped region.
    ValueRef logit(ValueRef x, T eps) {
        const Tensor<T>& xv = value(x);
        Tensor<T> out(xv.shape());
        for (int64_t i = 0; i < xv.size(); ++i) {
            T c = std::clamp(xv[i], eps, T(1) - eps);
            out[i] = std::log(c / (T(1) - c));
        }
        return push(std::move(out), node(x.id).requires_grad, {x.id},
                    [x, eps](Graph& g, int32_t self) {
                        if (!g.node(x.id).requires_grad) return;
                        const Tensor<T>& xv = g.node(x.id).value;
                        const Tensor<T>& dy = g.node(self).grad;
                        Tensor<T>& dx = g.grad_buf(x.id);
                        for (int64_t i = 0; i < xv.size(); ++i) {
                            if (xv[i] > eps && xv[i] < T(1) - eps)
                                dx[i] += dy[i] / (xv[i] * (T(1) - xv[i]));
                        }
                    });
    }

    // -- binary with single-channel broadcast --------------------------------

    ValueRef add(ValueRef a, ValueRef b) { return binary(a, b, /*is_add=*/true); }
    ValueRef multiply(ValueRef a, ValueRef b) { return binary(a, b, /*is_add=*/false); }

    ValueRef sub(ValueRef a, ValueRef b) {
        const Tensor<T>& av = value(a);
        const Tensor<T>& bv = value(b);
        require_same_shape(av, bv, "sub");
        Tensor<T> out(av.shape());
        for (int64_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
        bool rg = node(a.id).requires_grad || node(b.id).requires_grad;
        return push(std::move(out), rg, {a.id, b.id},
                    [a, b](Graph& g, int32_t self) {
                        const Tensor<T>& dy = g.node(self).grad;
                        if (g.node(a.id).requires_grad) {
                            Tensor<T>& da = g.grad_buf(a.id);
                            for (int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
                        }
                        if (g.node(b.id).requires_grad) {
                            Tensor<T>& db = g.grad_buf(b.id);
                            for (int64_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
                        }
                    });
    }

    // -- shape ops ------------------------------------------------------------

    ValueRef concat_channels(const std::vector<ValueRef>& xs) {
        if (xs.empty()) throw ValidationError("concat_channels: no inputs");
        const Tensor<T>& first = value(xs[0]);
        if (first.rank() != 4) throw ShapeError("concat_channels expects rank-4 inputs");
        int64_t n = first.extent(0), h = first.extent(2), w = first.extent(3);
        int64_t c_total = 0;
        bool rg = false;
        std::vector<int32_t> ids;
        for (ValueRef x : xs) {
            const Tensor<T>& xv = value(x);
            if (xv.rank() != 4 || xv.extent(0) != n || xv.extent(2) != h || xv.extent(3) != w)
                throw ShapeError("concat_channels: input " + xv.shape().str() +
                                 " disagrees with " + first.shape().str() +
                                 " on a non-channel axis");
            c_total += xv.extent(1);
            rg = rg || node(x.id).requires_grad;
            ids.push_back(x.id);
        }
        Tensor<T> out(Shape{n, c_total, h, w});
        int64_t plane = h * w;
        int64_t c_off = 0;
        for (ValueRef x : xs) {
            const Tensor<T>& xv = value(x);
            int64_t c = xv.extent(1);
            for (int64_t ni = 0; ni < n; ++ni)
                std::copy_n(xv.data() + ni * c * plane, c * plane,
                            out.data() + (ni * c_total + c_off) * plane);
            c_off += c;
        }
        auto inputs = ids;
        return push(std::move(out), rg, std::move(ids),
                    [inputs, n, plane, c_total](Graph& g, int32_t self) {
                        const Tensor<T>& dy = g.node(self).grad;
                        int64_t c_off = 0;
                        for (int32_t id : inputs) {
                            const Tensor<T>& xv = g.node(id).value;
                            int64_t c = xv.extent(1);
                            if (g.node(id).requires_grad) {
                                Tensor<T>& dx = g.grad_buf(id);
                                for (int64_t ni = 0; ni < n; ++ni) {
                                    const T* src = dy.data() + (ni * c_total + c_off) * plane;
                                    T* dst = dx.data() + ni * c * plane;
                                    for (int64_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                                }
                            }
                            c_off += c;
                        }
                    });
    }

    // -- pooling / resampling -------------------------------------------------

    ValueRef maxpool2(ValueRef x) {
        const Tensor<T>& xv = value(x);
        check_rank4(xv, "maxpool2");
        int64_t n = xv.extent(0), c = xv.extent(1), h = xv.extent(2), w = xv.extent(3);
        if (h % 2 != 0) throw ShapeError("maxpool2: height " + std::to_string(h) + " not divisible by 2");
        if (w % 2 != 0) throw ShapeError("maxpool2: width " + std::to_string(w) + " not divisible by 2");
        int64_t ho = h / 2, wo = w / 2;
        Tensor<T> out(Shape{n, c, ho, wo});
        std::vector<int64_t> argmax(static_cast<size_t>(out.size()));
        int64_t o = 0;
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t ci = 0; ci < c; ++ci)
                for (int64_t y = 0; y < ho; ++y)
                    for (int64_t z = 0; z < wo; ++z, ++o) {
                        int64_t base = ((ni * c + ci) * h + 2 * y) * w + 2 * z;
                        // Row-major scan; ties keep the first maximum.
                        int64_t best = base;
                        T bv = xv[base];
                        for (int64_t dy = 0; dy < 2; ++dy)
                            for (int64_t dx = 0; dx < 2; ++dx) {
                                int64_t idx = base + dy * w + dx;
                                if (xv[idx] > bv) {
                                    bv = xv[idx];
                                    best = idx;
                                }
                            }
                        out[o] = bv;
                        argmax[static_cast<size_t>(o)] = best;
                    }
        return push(std::move(out), node(x.id).requires_grad, {x.id},
                    [x, argmax = std::move(argmax)](Graph& g, int32_t self) {
                        if (!g.node(x.id).requires_grad) return;
                        const Tensor<T>& dy = g.node(self).grad;
                        Tensor<T>& dx = g.grad_buf(x.id);
                        for (int64_t i = 0; i < dy.size(); ++i)
                            dx[argmax[static_cast<size_t>(i)]] += dy[i];
                    });
    }

    ValueRef avgpool2(ValueRef x, int factor) {
        const Tensor<T>& xv = value(x);
        check_rank4(xv, "avgpool2");
        if (factor < 1) throw ValidationError("avgpool2: factor must be >= 1");
        int64_t f = factor;
        int64_t n = xv.extent(0), c = xv.extent(1), h = xv.extent(2), w = xv.extent(3);
        if (h % f != 0) throw ShapeError("avgpool2: height " + std::to_string(h) + " not divisible by " + std::to_string(f));
        if (w % f != 0) throw ShapeError("avgpool2: width " + std::to_string(w) + " not divisible by " + std::to_string(f));
        int64_t ho = h / f, wo = w / f;
        Tensor<T> out(Shape{n, c, ho, wo});
        const T inv = T(1) / static_cast<T>(f * f);
        int64_t o = 0;
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t ci = 0; ci < c; ++ci)
                for (int64_t y = 0; y < ho; ++y)
                    for (int64_t z = 0; z < wo; ++z, ++o) {
                        T acc = T(0);
                        for (int64_t dy = 0; dy < f; ++dy) {
                            const T* row = xv.data() + ((ni * c + ci) * h + y * f + dy) * w + z * f;
                            for (int64_t dx = 0; dx < f; ++dx) acc += row[dx];
                        }
                        out[o] = acc * inv;
                    }
        return push(std::move(out), node(x.id).requires_grad, {x.id},
                    [x, f, inv](Graph& g, int32_t self) {
                        if (!g.node(x.id).requires_grad) return;
                        const Tensor<T>& dy = g.node(self).grad;
                        Tensor<T>& dx = g.grad_buf(x.id);
                        int64_t n = dx.extent(0), c = dx.extent(1), h = dx.extent(2), w = dx.extent(3);
                        int64_t ho = h / f, wo = w / f;
                        int64_t o = 0;
                        for (int64_t ni = 0; ni < n; ++ni)
                            for (int64_t ci = 0; ci < c; ++ci)
                                for (int64_t y = 0; y < ho; ++y)
                                    for (int64_t z = 0; z < wo; ++z, ++o) {
                                        T g_in = dy[o] * inv;
                                        for (int64_t dyy = 0; dyy < f; ++dyy) {
                                            T* row = dx.data() + ((ni * c + ci) * h + y * f + dyy) * w + z * f;
                                            for (int64_t dxx = 0; dxx < f; ++dxx) row[dxx] += g_in;
                                        }
                                    }
                    });
    }

    // Bilinear 2x upsampling, half-pixel convention: output cell o samples the
    // input at (o+0.5)/2 - 0.5, clamped.
    ValueRef upsample2(ValueRef x) {
        const Tensor<T>& xv = value(x);
        check_rank4(xv, "upsample2");
        int64_t n = xv.extent(0), c = xv.extent(1), h = xv.extent(2), w = xv.extent(3);
        int64_t ho = 2 * h, wo = 2 * w;
        struct Tap {
            int64_t i0, i1;
            T w0, w1;
        };
        auto taps = [](int64_t out_extent, int64_t in_extent) {
            std::vector<Tap> v(static_cast<size_t>(out_extent));
            for (int64_t o = 0; o < out_extent; ++o) {
                double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
                src = std::clamp(src, 0.0, static_cast<double>(in_extent - 1));
                int64_t i0 = static_cast<int64_t>(std::floor(src));
                int64_t i1 = std::min(i0 + 1, in_extent - 1);
                double f = src - static_cast<double>(i0);
                v[static_cast<size_t>(o)] = {i0, i1, static_cast<T>(1.0 - f), static_cast<T>(f)};
            }
            return v;
        };
        std::vector<Tap> ty = taps(ho, h), tx = taps(wo, w);
        Tensor<T> out(Shape{n, c, ho, wo});
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t ci = 0; ci < c; ++ci) {
                const T* plane = xv.data() + (ni * c + ci) * h * w;
                T* op = out.data() + (ni * c + ci) * ho * wo;
                for (int64_t y = 0; y < ho; ++y) {
                    const Tap& a = ty[static_cast<size_t>(y)];
                    const T* r0 = plane + a.i0 * w;
                    const T* r1 = plane + a.i1 * w;
                    for (int64_t z = 0; z < wo; ++z) {
                        const Tap& b = tx[static_cast<size_t>(z)];
                        op[y * wo + z] = a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1]) +
                                         a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
                    }
                }
            }
        return push(std::move(out), node(x.id).requires_grad, {x.id},
                    [x, ty = std::move(ty), tx = std::move(tx)](Graph& g, int32_t self) {
                        if (!g.node(x.id).requires_grad) return;
                        const Tensor<T>& dy = g.node(self).grad;
                        Tensor<T>& dx = g.grad_buf(x.id);
                        int64_t n = dx.extent(0), c = dx.extent(1), h = dx.extent(2), w = dx.extent(3);
                        int64_t ho = 2 * h, wo = 2 * w;
                        for (int64_t ni = 0; ni < n; ++ni)
                            for (int64_t ci = 0; ci < c; ++ci) {
                                T* plane = dx.data() + (ni * c + ci) * h * w;
                                const T* gp = dy.data() + (ni * c + ci) * ho * wo;
                                for (int64_t y = 0; y < ho; ++y) {
                                    const auto& a = ty[static_cast<size_t>(y)];
                                    for (int64_t z = 0; z < wo; ++z) {
                                        const auto& b = tx[static_cast<size_t>(z)];
                                        T gv = gp[y * wo + z];
                                        plane[a.i0 * w + b.i0] += a.w0 * b.w0 * gv;
                                        plane[a.i0 * w + b.i1] += a.w0 * b.w1 * gv;
                                        plane[a.i1 * w + b.i0] += a.w1 * b.w0 * gv;
                                        plane[a.i1 * w + b.i1] += a.w1 * b.w1 * gv;
                                    }
                                }
                            }
                    });
    }

    // -- convolutions ---------------------------------------------------------

    ValueRef conv2d(ValueRef x, ValueRef w, ValueRef b, int stride, Padding padding) {
        const Tensor<T>& xv = value(x);
        const Tensor<T>& wv = value(w);
        const Tensor<T>& bv = value(b);
        check_rank4(xv, "conv2d input");
        if (wv.rank() != 4) throw ShapeError("conv2d kernel must be rank 4, got " + wv.shape().str());
        if (stride < 1) throw ValidationError("conv2d: stride must be >= 1");
        int64_t cin = xv.extent(1), kh = wv.extent(2), kw = wv.extent(3);
        if (wv.extent(1) != cin)
            throw ShapeError("conv2d: channel axis mismatch, input has " + std::to_string(cin) +
                             " channels but kernel expects " + std::to_string(wv.extent(1)));
        int64_t cout = wv.extent(0);
        if (bv.rank() != 1 || bv.extent(0) != cout)
            throw ShapeError("conv2d: bias axis 0 must equal out channels " + std::to_string(cout) +
                             ", got " + bv.shape().str());
        if (padding == Padding::kSame && (kh % 2 == 0 || kw % 2 == 0))
            throw ValidationError("conv2d: same padding requires odd kernel extents");
        ConvGeom geom = conv_geometry(xv.extent(2), xv.extent(3), kh, kw, stride, padding);
        Tensor<T> out(Shape{xv.extent(0), cout, geom.ho, geom.wo});
        conv2d_forward(xv, wv, bv, out, geom);
        bool rg = node(x.id).requires_grad || node(w.id).requires_grad || node(b.id).requires_grad;
        return push(std::move(out), rg, {x.id, w.id, b.id},
                    [x, w, b, geom](Graph& g, int32_t self) {
                        conv2d_backward(g.node(x.id).value, g.node(w.id).value, g.node(self).grad,
                                        g.node(x.id).requires_grad ? &g.grad_buf(x.id) : nullptr,
                                        g.node(w.id).requires_grad ? &g.grad_buf(w.id) : nullptr,
                                        g.node(b.id).requires_grad ? &g.grad_buf(b.id) : nullptr,
                                        geom);
                    });
    }

    // Depthwise stage of a separable convolution: stride 1, same padding, no
    // bias, one [1,kh,kw] filter per channel.
    ValueRef depthwise_conv2d(ValueRef x, ValueRef w) {
        const Tensor<T>& xv = value(x);
        const Tensor<T>& wv = value(w);
        check_rank4(xv, "depthwise_conv2d input");
        int64_t c = xv.extent(1);
        if (wv.rank() != 4 || wv.extent(0) != c || wv.extent(1) != 1)
            throw ShapeError("depthwise_conv2d: kernel must be [" + std::to_string(c) +
                             ",1,kh,kw], got " + wv.shape().str());
        int64_t kh = wv.extent(2), kw = wv.extent(3);
        if (kh % 2 == 0 || kw % 2 == 0)
            throw ValidationError("depthwise_conv2d: same padding requires odd kernel extents");
        ConvGeom geom = conv_geometry(xv.extent(2), xv.extent(3), kh, kw, 1, Padding::kSame);
        Tensor<T> out(Shape{xv.extent(0), c, geom.ho, geom.wo});
        depthwise_forward(xv, wv, out, geom);
        bool rg = node(x.id).requires_grad || node(w.id).requires_grad;
        return push(std::move(out), rg, {x.id, w.id},
                    [x, w, geom](Graph& g, int32_t self) {
                        depthwise_backward(g.node(x.id).value, g.node(w.id).value, g.node(self).grad,
                                           g.node(x.id).requires_grad ? &g.grad_buf(x.id) : nullptr,
                                           g.node(w.id).requires_grad ? &g.grad_buf(w.id) : nullptr,
                                           geom);
                    });
    }

    // Depthwise-then-pointwise separable convolution, same padding, stride 1.
    ValueRef sepconv2d(ValueRef x, ValueRef w_dw, ValueRef w_pw, ValueRef b) {
        const Tensor<T>& pw = value(w_pw);
        if (pw.rank() != 4 || pw.extent(2) != 1 || pw.extent(3) != 1)
            throw ShapeError("sepconv2d: pointwise kernel must be [Cout,C,1,1], got " + pw.shape().str());
        ValueRef mid = depthwise_conv2d(x, w_dw);
        return conv2d(mid, w_pw, b, 1, Padding::kValid);
    }

    // -- batch normalization ----------------------------------------------------

    // Per-channel batch normalization over (N,H,W). Train mode normalizes with
    // batch statistics and, when update_running is set, folds them into the
    // running estimates as r = momentum*r + (1-momentum)*batch. Infer mode uses
    // the running estimates. Variance is biased (divides by N*H*W).
    ValueRef batchnorm(ValueRef x, ValueRef gamma, ValueRef beta, Tensor<T>* running_mean,
                       Tensor<T>* running_var, BnMode mode, bool update_running, T eps, T momentum) {
        const Tensor<T>& xv = value(x);
        check_rank4(xv, "batchnorm input");
        int64_t n = xv.extent(0), c = xv.extent(1), h = xv.extent(2), w = xv.extent(3);
        const Tensor<T>& gv = value(gamma);
        const Tensor<T>& bv = value(beta);
        if (gv.rank() != 1 || gv.extent(0) != c || bv.rank() != 1 || bv.extent(0) != c)
            throw ShapeError("batchnorm: gamma/beta must be [" + std::to_string(c) + "] to match channels");
        if (running_mean->rank() != 1 || running_mean->extent(0) != c ||
            running_var->rank() != 1 || running_var->extent(0) != c)
            throw ShapeError("batchnorm: running stats must be per-channel [" + std::to_string(c) + "]");

        int64_t plane = h * w;
        int64_t m = n * plane;
        std::vector<T> mean(static_cast<size_t>(c)), inv_std(static_cast<size_t>(c));
        if (mode == BnMode::kTrain) {
            for (int64_t ci = 0; ci < c; ++ci) {
                T mu = T(0);
                for (int64_t ni = 0; ni < n; ++ni) {
                    const T* p = xv.data() + (ni * c + ci) * plane;
                    for (int64_t i = 0; i < plane; ++i) mu += p[i];
                }
                mu /= static_cast<T>(m);
                T var = T(0);
                for (int64_t ni = 0; ni < n; ++ni) {
                    const T* p = xv.data() + (ni * c + ci) * plane;
                    for (int64_t i = 0; i < plane; ++i) {
                        T d = p[i] - mu;
                        var += d * d;
                    }
                }
                var /= static_cast<T>(m);
                mean[static_cast<size_t>(ci)] = mu;
                inv_std[static_cast<size_t>(ci)] = T(1) / std::sqrt(var + eps);
                if (update_running) {
                    (*running_mean)[ci] = momentum * (*running_mean)[ci] + (T(1) - momentum) * mu;
                    (*running_var)[ci] = momentum * (*running_var)[ci] + (T(1) - momentum) * var;
                }
            }
        } else {
            for (int64_t ci = 0; ci < c; ++ci) {
                mean[static_cast<size_t>(ci)] = (*running_mean)[ci];
                inv_std[static_cast<size_t>(ci)] = T(1) / std::sqrt((*running_var)[ci] + eps);
            }
        }

        Tensor<T> out(xv.shape());
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t ci = 0; ci < c; ++ci) {
                const T* p = xv.data() + (ni * c + ci) * plane;
                T* q = out.data() + (ni * c + ci) * plane;
                T mu = mean[static_cast<size_t>(ci)], is = inv_std[static_cast<size_t>(ci)];
                T ga = gv[ci], be = bv[ci];
                for (int64_t i = 0; i < plane; ++i) q[i] = (p[i] - mu) * is * ga + be;
            }

        bool rg = node(x.id).requires_grad || node(gamma.id).requires_grad || node(beta.id).requires_grad;
        bool train = mode == BnMode::kTrain;
        return push(std::move(out), rg, {x.id, gamma.id, beta.id},
                    [x, gamma, beta, mean = std::move(mean), inv_std = std::move(inv_std),
                     train](Graph& g, int32_t self) {
                        bn_backward(g, self, x.id, gamma.id, beta.id, mean, inv_std, train);
                    });
    }

    // -- reductions ---------------------------------------------------------

    // Mean over all elements; result is a rank-1 [1] scalar.
    ValueRef mean_all(ValueRef x) {
        const Tensor<T>& xv = value(x);
        T acc = T(0);
        for (int64_t i = 0; i < xv.size(); ++i) acc += xv[i];
        Tensor<T> out(Shape{1});
        out[0] = acc / static_cast<T>(xv.size());
        return push(std::move(out), node(x.id).requires_grad, {x.id},
                    [x](Graph& g, int32_t self) {
                        if (!g.node(x.id).requires_grad) return;
                        const Tensor<T>& dy = g.node(self).grad;
                        Tensor<T>& dx = g.grad_buf(x.id);
                        T gv = dy[0] / static_cast<T>(dx.size());
                        for (int64_t i = 0; i < dx.size(); ++i) dx[i] += gv;
                    });
    }

    // -- reverse sweep --------------------------------------------------------

    // Accumulates d(root)/d(node) for every node the scalar root reaches.
    // Leaves with requires_grad that the root does not reach get zero grad.
    void backward(ValueRef root) {
        Node& r = node(root.id);
        if (r.value.size() != 1)
            throw ShapeError("backward: root must be scalar-valued, got " + r.value.shape().str());

        std::vector<bool> reachable(nodes_.size(), false);
        std::vector<int32_t> stack{root.id};
        reachable[static_cast<size_t>(root.id)] = true;
        while (!stack.empty()) {
            int32_t id = stack.back();
            stack.pop_back();
            for (int32_t in : nodes_[static_cast<size_t>(id)].inputs) {
                if (!reachable[static_cast<size_t>(in)] && nodes_[static_cast<size_t>(in)].requires_grad) {
                    reachable[static_cast<size_t>(in)] = true;
                    stack.push_back(in);
                }
            }
        }
        for (size_t i = 0; i < nodes_.size(); ++i) {
            Node& nd = nodes_[i];
            if (reachable[i] || (nd.requires_grad && nd.inputs.empty()))
                nd.grad = Tensor<T>::zeros(nd.value.shape());
        }
        r.grad[0] = T(1);
        for (int32_t i = root.id; i >= 0; --i) {
            Node& nd = nodes_[static_cast<size_t>(i)];
            if (reachable[static_cast<size_t>(i)] && nd.requires_grad && nd.backward_fn)
                nd.backward_fn(*this, i);
        }
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        std::vector<int32_t> inputs;
        std::function<void(Graph&, int32_t)> backward_fn;
    };

    struct ConvGeom {
        int64_t h, w, kh, kw, ho, wo, pad_h, pad_w;
        int stride;
    };

    Node& node(int32_t id) {
        if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
            throw ValidationError("invalid graph value reference");
        return nodes_[static_cast<size_t>(id)];
    }
    const Node& node(int32_t id) const {
        if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
            throw ValidationError("invalid graph value reference");
        return nodes_[static_cast<size_t>(id)];
    }

    Tensor<T>& grad_buf(int32_t id) {
        Node& n = node(id);
        if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
        return n.grad;
    }

    ValueRef push(Tensor<T> value, bool requires_grad, std::vector<int32_t> inputs,
                  std::function<void(Graph&, int32_t)> backward_fn) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.inputs = std::move(inputs);
        n.backward_fn = std::move(backward_fn);
        nodes_.push_back(std::move(n));
        return ValueRef{static_cast<int32_t>(nodes_.size() - 1)};
    }

    static T stable_sigmoid(T v) {
        if (v >= T(0)) {
            T e = std::exp(-v);
            return T(1) / (T(1) + e);
        }
        T e = std::exp(v);
        return e / (T(1) + e);
    }

    static void check_rank4(const Tensor<T>& t, const char* what) {
        if (t.rank() != 4)
            throw ShapeError(std::string(what) + " must be rank 4 [N,C,H,W], got " + t.shape().str());
    }

    ValueRef binary(ValueRef a, ValueRef b, bool is_add) {
        const Tensor<T>& av = value(a);
        const Tensor<T>& bv = value(b);
        // Either identical shapes, or one side is [N,1,H,W] broadcast over the
        // other's channel axis (the mask-over-RGB case).
        bool bcast_a = false, bcast_b = false;
        if (av.shape() != bv.shape()) {
            auto broadcastable = [](const Tensor<T>& one, const Tensor<T>& full) {
                return one.rank() == 4 && full.rank() == 4 && one.extent(1) == 1 &&
                       one.extent(0) == full.extent(0) && one.extent(2) == full.extent(2) &&
                       one.extent(3) == full.extent(3);
            };
            if (broadcastable(av, bv)) bcast_a = true;
            else if (broadcastable(bv, av)) bcast_b = true;
            else
                throw ShapeError(std::string(is_add ? "add" : "multiply") + ": incompatible shapes " +
                                 av.shape().str() + " vs " + bv.shape().str());
        }
        const Tensor<T>& full = bcast_a ? bv : av;
        int64_t n = full.extent(0), c = full.extent(1), plane = full.extent(2) * full.extent(3);
        Tensor<T> out(full.shape());
        auto at_bcast = [&](const Tensor<T>& t, bool bc, int64_t ni, int64_t ci, int64_t i) {
            return bc ? t[ni * plane + i] : t[(ni * c + ci) * plane + i];
        };
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t ci = 0; ci < c; ++ci)
                for (int64_t i = 0; i < plane; ++i) {
                    T va = at_bcast(av, bcast_a, ni, ci, i);
                    T vb = at_bcast(bv, bcast_b, ni, ci, i);
                    out[(ni * c + ci) * plane + i] = is_add ? va + vb : va * vb;
                }
        bool rg = node(a.id).requires_grad || node(b.id).requires_grad;
        return push(std::move(out), rg, {a.id, b.id},
                    [a, b, is_add, bcast_a, bcast_b, n, c, plane](Graph& g, int32_t self) {
                        const Tensor<T>& dy = g.node(self).grad;
                        const Tensor<T>& av = g.node(a.id).value;
                        const Tensor<T>& bv = g.node(b.id).value;
                        auto accumulate = [&](int32_t id, bool bc, const Tensor<T>& other, bool other_bc) {
                            Tensor<T>& dst = g.grad_buf(id);
                            for (int64_t ni = 0; ni < n; ++ni)
                                for (int64_t ci = 0; ci < c; ++ci)
                                    for (int64_t i = 0; i < plane; ++i) {
                                        T gv = dy[(ni * c + ci) * plane + i];
                                        if (!is_add) {
                                            T ov = other_bc ? other[ni * plane + i]
                                                            : other[(ni * c + ci) * plane + i];
                                            gv *= ov;
                                        }
                                        if (bc) dst[ni * plane + i] += gv;
                                        else dst[(ni * c + ci) * plane + i] += gv;
                                    }
                        };
                        if (g.node(a.id).requires_grad) accumulate(a.id, bcast_a, bv, bcast_b);
                        if (g.node(b.id).requires_grad) accumulate(b.id, bcast_b, av, bcast_a);
                    });
    }

    static ConvGeom conv_geometry(int64_t h, int64_t w, int64_t kh, int64_t kw, int stride,
                                  Padding padding) {
        ConvGeom ge{};
        ge.h = h;
        ge.w = w;
        ge.kh = kh;
        ge.kw = kw;
        ge.stride = stride;
        if (padding == Padding::kSame) {
            ge.ho = (h + stride - 1) / stride;
            ge.wo = (w + stride - 1) / stride;
            ge.pad_h = std::max<int64_t>((ge.ho - 1) * stride + kh - h, 0) / 2;
            ge.pad_w = std::max<int64_t>((ge.wo - 1) * stride + kw - w, 0) / 2;
        } else {
            if (h < kh || w < kw)
                throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                 " larger than input " + std::to_string(h) + "x" + std::to_string(w) +
                                 " with valid padding");
            ge.ho = (h - kh) / stride + 1;
            ge.wo = (w - kw) / stride + 1;
            ge.pad_h = 0;
            ge.pad_w = 0;
        }
        return ge;
    }

    // Valid output range along one spatial axis for a given kernel offset k:
    // all o with 0 <= o*stride - pad + k < in_extent.
    static std::pair<int64_t, int64_t> tap_range(int64_t out_extent, int64_t in_extent, int64_t pad,
                                                 int64_t k, int stride) {
        int64_t lo = 0;
        int64_t shift = pad - k;
        if (shift > 0) lo = (shift + stride - 1) / stride;
        int64_t hi = out_extent - 1;
        int64_t max_src = in_extent - 1 + pad - k;
        if (max_src < 0) return {1, 0};
        hi = std::min(hi, max_src / stride);
        return {lo, hi};
    }

    static void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                               Tensor<T>& out, const ConvGeom& ge) {
        int64_t n = x.extent(0), cin = x.extent(1), cout = w.extent(0);
        int64_t plane_in = ge.h * ge.w, plane_out = ge.ho * ge.wo;
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t co = 0; co < cout; ++co) {
                T* op = out.data() + (ni * cout + co) * plane_out;
                std::fill_n(op, plane_out, b[co]);
                for (int64_t ci = 0; ci < cin; ++ci) {
                    const T* ip = x.data() + (ni * cin + ci) * plane_in;
                    const T* wp = w.data() + (co * cin + ci) * ge.kh * ge.kw;
                    accumulate_taps(ip, wp, op, ge);
                }
            }
    }

    static void depthwise_forward(const Tensor<T>& x, const Tensor<T>& w, Tensor<T>& out,
                                  const ConvGeom& ge) {
        int64_t n = x.extent(0), c = x.extent(1);
        int64_t plane_in = ge.h * ge.w, plane_out = ge.ho * ge.wo;
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t ci = 0; ci < c; ++ci) {
                T* op = out.data() + (ni * c + ci) * plane_out;
                std::fill_n(op, plane_out, T(0));
                accumulate_taps(x.data() + (ni * c + ci) * plane_in,
                                w.data() + ci * ge.kh * ge.kw, op, ge);
            }
    }

    // out += sum over kernel taps of w[k] * shifted input. The inner loop runs
    // along the output row so it stays contiguous in both buffers.
    static void accumulate_taps(const T* ip, const T* wp, T* op, const ConvGeom& ge) {
        for (int64_t ki = 0; ki < ge.kh; ++ki) {
            auto [ho_lo, ho_hi] = tap_range(ge.ho, ge.h, ge.pad_h, ki, ge.stride);
            for (int64_t kj = 0; kj < ge.kw; ++kj) {
                T wv = wp[ki * ge.kw + kj];
                auto [wo_lo, wo_hi] = tap_range(ge.wo, ge.w, ge.pad_w, kj, ge.stride);
                int64_t off = kj - ge.pad_w;
                for (int64_t ho = ho_lo; ho <= ho_hi; ++ho) {
                    int64_t hi = ho * ge.stride - ge.pad_h + ki;
                    const T* irow = ip + hi * ge.w;
                    T* orow = op + ho * ge.wo;
                    if (ge.stride == 1) {
                        for (int64_t wo = wo_lo; wo <= wo_hi; ++wo) orow[wo] += wv * irow[wo + off];
                    } else {
                        for (int64_t wo = wo_lo; wo <= wo_hi; ++wo)
                            orow[wo] += wv * irow[wo * ge.stride + off];
                    }
                }
            }
        }
    }

    static void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                                Tensor<T>* dx, Tensor<T>* dw, Tensor<T>* db, const ConvGeom& ge) {
        int64_t n = x.extent(0), cin = x.extent(1), cout = w.extent(0);
        int64_t plane_in = ge.h * ge.w, plane_out = ge.ho * ge.wo;
        if (db) {
            for (int64_t ni = 0; ni < n; ++ni)
                for (int64_t co = 0; co < cout; ++co) {
                    const T* gp = dy.data() + (ni * cout + co) * plane_out;
                    T acc = T(0);
                    for (int64_t i = 0; i < plane_out; ++i) acc += gp[i];
                    (*db)[co] += acc;
                }
        }
        if (!dx && !dw) return;
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t co = 0; co < cout; ++co) {
                const T* gp = dy.data() + (ni * cout + co) * plane_out;
                for (int64_t ci = 0; ci < cin; ++ci) {
                    const T* ip = x.data() + (ni * cin + ci) * plane_in;
                    const T* wp = w.data() + (co * cin + ci) * ge.kh * ge.kw;
                    T* dxp = dx ? dx->data() + (ni * cin + ci) * plane_in : nullptr;
                    T* dwp = dw ? dw->data() + (co * cin + ci) * ge.kh * ge.kw : nullptr;
                    backprop_taps(ip, wp, gp, dxp, dwp, ge);
                }
            }
    }

    static void depthwise_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                                   Tensor<T>* dx, Tensor<T>* dw, const ConvGeom& ge) {
        int64_t n = x.extent(0), c = x.extent(1);
        int64_t plane_in = ge.h * ge.w, plane_out = ge.ho * ge.wo;
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t ci = 0; ci < c; ++ci) {
                backprop_taps(x.data() + (ni * c + ci) * plane_in, w.data() + ci * ge.kh * ge.kw,
                              dy.data() + (ni * c + ci) * plane_out,
                              dx ? dx->data() + (ni * c + ci) * plane_in : nullptr,
                              dw ? dw->data() + ci * ge.kh * ge.kw : nullptr, ge);
            }
    }

    static void backprop_taps(const T* ip, const T* wp, const T* gp, T* dxp, T* dwp,
                              const ConvGeom& ge) {
        for (int64_t ki = 0; ki < ge.kh; ++ki) {
            auto [ho_lo, ho_hi] = tap_range(ge.ho, ge.h, ge.pad_h, ki, ge.stride);
            for (int64_t kj = 0; kj < ge.kw; ++kj) {
                auto [wo_lo, wo_hi] = tap_range(ge.wo, ge.w, ge.pad_w, kj, ge.stride);
                int64_t off = kj - ge.pad_w;
                T wv = wp[ki * ge.kw + kj];
                T dwv = T(0);
                for (int64_t ho = ho_lo; ho <= ho_hi; ++ho) {
                    int64_t hi = ho * ge.stride - ge.pad_h + ki;
                    const T* irow = ip + hi * ge.w;
                    T* dxrow = dxp ? dxp + hi * ge.w : nullptr;
                    const T* grow = gp + ho * ge.wo;
                    if (dxp && dwp) {
                        for (int64_t wo = wo_lo; wo <= wo_hi; ++wo) {
                            T gv = grow[wo];
                            dxrow[wo * ge.stride + off] += wv * gv;
                            dwv += irow[wo * ge.stride + off] * gv;
                        }
                    } else if (dxp) {
                        for (int64_t wo = wo_lo; wo <= wo_hi; ++wo)
                            dxrow[wo * ge.stride + off] += wv * grow[wo];
                    } else if (dwp) {
                        for (int64_t wo = wo_lo; wo <= wo_hi; ++wo)
                            dwv += irow[wo * ge.stride + off] * grow[wo];
                    }
                }
                if (dwp) dwp[ki * ge.kw + kj] += dwv;
            }
        }
    }

    static void bn_backward(Graph& g, int32_t self, int32_t x_id, int32_t gamma_id, int32_t beta_id,
                            const std::vector<T>& mean, const std::vector<T>& inv_std, bool train) {
        const Tensor<T>& dy = g.node(self).grad;
        const Tensor<T>& xv = g.node(x_id).value;
        const Tensor<T>& gv = g.node(gamma_id).value;
        int64_t n = xv.extent(0), c = xv.extent(1), plane = xv.extent(2) * xv.extent(3);
        int64_t m = n * plane;
        for (int64_t ci = 0; ci < c; ++ci) {
            T mu = mean[static_cast<size_t>(ci)], is = inv_std[static_cast<size_t>(ci)];
            T sum_dy = T(0), sum_dy_xhat = T(0);
            for (int64_t ni = 0; ni < n; ++ni) {
                const T* gp = dy.data() + (ni * c + ci) * plane;
                const T* xp = xv.data() + (ni * c + ci) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    sum_dy += gp[i];
                    sum_dy_xhat += gp[i] * (xp[i] - mu) * is;
                }
            }
            if (g.node(beta_id).requires_grad) g.grad_buf(beta_id)[ci] += sum_dy;
            if (g.node(gamma_id).requires_grad) g.grad_buf(gamma_id)[ci] += sum_dy_xhat;
            if (g.node(x_id).requires_grad) {
                Tensor<T>& dx = g.grad_buf(x_id);
                T ga = gv[ci];
                if (train) {
                    T mean_dy = sum_dy / static_cast<T>(m);
                    T mean_dy_xhat = sum_dy_xhat / static_cast<T>(m);
                    for (int64_t ni = 0; ni < n; ++ni) {
                        const T* gp = dy.data() + (ni * c + ci) * plane;
                        const T* xp = xv.data() + (ni * c + ci) * plane;
                        T* dp = dx.data() + (ni * c + ci) * plane;
                        for (int64_t i = 0; i < plane; ++i) {
                            T xhat = (xp[i] - mu) * is;
                            dp[i] += ga * is * (gp[i] - mean_dy - xhat * mean_dy_xhat);
                        }
                    }
                } else {
                    for (int64_t ni = 0; ni < n; ++ni) {
                        const T* gp = dy.data() + (ni * c + ci) * plane;
                        T* dp = dx.data() + (ni * c + ci) * plane;
                        for (int64_t i = 0; i < plane; ++i) dp[i] += ga * is * gp[i];
                    }
                }
            }
        }
    }

    std::vector<Node> nodes_;
};

}  // namespace hdrvam
