// Copyright 2026 The hdrvam Authors
// SPDX-License-Identifier: Apache-2.0
//
// Test-side oracles. Everything here is deliberately written as direct
// transcriptions (quadruple loops, exhaustive searches, big-integer
// fractions) so it stays independent of the library's implementation paths.

#pragma once

#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>
#include <functional>
#include <vector>

#include "hdrvam/autodiff.hpp"
#include "hdrvam/core.hpp"
#include "hdrvam/segmentation.hpp"

namespace oracles {

using hdrvam::Graph;
using hdrvam::Padding;
using hdrvam::Shape;
using hdrvam::Tensor;

// -- convolutions -------------------------------------------------------------

inline Tensor<double> naive_conv2d(const Tensor<double>& x, const Tensor<double>& w,
                                   const Tensor<double>& b, int stride, Padding padding) {
    int64_t n = x.extent(0), cin = x.extent(1), h = x.extent(2), wd = x.extent(3);
    int64_t cout = w.extent(0), kh = w.extent(2), kw = w.extent(3);
    int64_t ho, wo, pad_h, pad_w;
    if (padding == Padding::kSame) {
        ho = (h + stride - 1) / stride;
        wo = (wd + stride - 1) / stride;
        pad_h = std::max<int64_t>((ho - 1) * stride + kh - h, 0) / 2;
        pad_w = std::max<int64_t>((wo - 1) * stride + kw - wd, 0) / 2;
    } else {
        ho = (h - kh) / stride + 1;
        wo = (wd - kw) / stride + 1;
        pad_h = pad_w = 0;
    }
    Tensor<double> out(Shape{n, cout, ho, wo});
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t co = 0; co < cout; ++co)
            for (int64_t oy = 0; oy < ho; ++oy)
                for (int64_t ox = 0; ox < wo; ++ox) {
                    double acc = b[co];
                    for (int64_t ci = 0; ci < cin; ++ci)
                        for (int64_t ky = 0; ky < kh; ++ky)
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                int64_t iy = oy * stride - pad_h + ky;
                                int64_t ix = ox * stride - pad_w + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                                acc += x.at(ni, ci, iy, ix) * w.at(co, ci, ky, kx);
                            }
                    out.at(ni, co, oy, ox) = acc;
                }
    return out;
}

inline Tensor<double> naive_depthwise(const Tensor<double>& x, const Tensor<double>& w) {
    int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), wd = x.extent(3);
    int64_t kh = w.extent(2), kw = w.extent(3);
    int64_t pad_h = (kh - 1) / 2, pad_w = (kw - 1) / 2;
    Tensor<double> out(Shape{n, c, h, wd});
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t oy = 0; oy < h; ++oy)
                for (int64_t ox = 0; ox < wd; ++ox) {
                    double acc = 0;
                    for (int64_t ky = 0; ky < kh; ++ky)
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            int64_t iy = oy - pad_h + ky, ix = ox - pad_w + kx;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                            acc += x.at(ni, ci, iy, ix) * w.at(ci, 0, ky, kx);
                        }
                    out.at(ni, ci, oy, ox) = acc;
                }
    return out;
}

// -- pooling / upsampling ------------------------------------------------------

inline Tensor<double> naive_maxpool2(const Tensor<double>& x) {
    int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    Tensor<double> out(Shape{n, c, h / 2, w / 2});
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t y = 0; y < h / 2; ++y)
                for (int64_t z = 0; z < w / 2; ++z) {
                    double m = x.at(ni, ci, 2 * y, 2 * z);
                    for (int64_t dy = 0; dy < 2; ++dy)
                        for (int64_t dx = 0; dx < 2; ++dx)
                            m = std::max(m, x.at(ni, ci, 2 * y + dy, 2 * z + dx));
                    out.at(ni, ci, y, z) = m;
                }
    return out;
}

inline Tensor<double> naive_avgpool(const Tensor<double>& x, int64_t f) {
    int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    Tensor<double> out(Shape{n, c, h / f, w / f});
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t y = 0; y < h / f; ++y)
                for (int64_t z = 0; z < w / f; ++z) {
                    double acc = 0;
                    for (int64_t dy = 0; dy < f; ++dy)
                        for (int64_t dx = 0; dx < f; ++dx) acc += x.at(ni, ci, y * f + dy, z * f + dx);
                    out.at(ni, ci, y, z) = acc / static_cast<double>(f * f);
                }
    return out;
}

// Direct interpolation formula: src = (o + 0.5)/2 - 0.5, clamped.
inline Tensor<double> naive_upsample2(const Tensor<double>& x) {
    int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    Tensor<double> out(Shape{n, c, 2 * h, 2 * w});
    auto sample = [](int64_t o, int64_t extent, int64_t* i0, int64_t* i1, double* f) {
        double s = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(extent - 1));
        *i0 = static_cast<int64_t>(std::floor(s));
        *i1 = std::min(*i0 + 1, extent - 1);
        *f = s - static_cast<double>(*i0);
    };
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t y = 0; y < 2 * h; ++y)
                for (int64_t z = 0; z < 2 * w; ++z) {
                    int64_t y0, y1, x0, x1;
                    double fy, fx;
                    sample(y, h, &y0, &y1, &fy);
                    sample(z, w, &x0, &x1, &fx);
                    out.at(ni, ci, y, z) = (1 - fy) * ((1 - fx) * x.at(ni, ci, y0, x0) +
                                                       fx * x.at(ni, ci, y0, x1)) +
                                           fy * ((1 - fx) * x.at(ni, ci, y1, x0) +
                                                 fx * x.at(ni, ci, y1, x1));
                }
    return out;
}

// -- Otsu ----------------------------------------------------------------------

// Exhaustive maximizer of sigma_B^2(t) = w0*w1*(mu0-mu1)^2 over t in [1,255]
// as exact big-integer fractions: sigma_B^2(t) ~ (s0*W - S*w0)^2 / (w0*w1).
// Smallest-t tie break; degenerate when no candidate separates two classes.
struct OtsuOracleResult {
    int threshold = 0;
    bool degenerate = false;
};

inline OtsuOracleResult otsu_oracle(const hdrvam::Histogram256& h) {
    using boost::multiprecision::int256_t;
    int256_t W = h.total, S = 0;
    for (int b = 0; b < 256; ++b) S += int256_t(h.counts[static_cast<size_t>(b)]) * b;
    bool found = false;
    int best_t = 0;
    int256_t best_num = 0, best_den = 1;
    for (int t = 1; t <= 255; ++t) {
        int256_t w0 = 0, s0 = 0;
        for (int b = 0; b < t; ++b) {
            w0 += h.counts[static_cast<size_t>(b)];
            s0 += int256_t(h.counts[static_cast<size_t>(b)]) * b;
        }
        int256_t w1 = W - w0;
        if (w0 == 0 || w1 == 0) continue;
        int256_t a = s0 * W - S * w0;
        int256_t num = a * a, den = w0 * w1;
        if (!found || num * best_den > best_num * den) {
            found = true;
            best_num = num;
            best_den = den;
            best_t = t;
        }
    }
    if (!found) {
        int bin = 0;
        for (int b = 0; b < 256; ++b)
            if (h.counts[static_cast<size_t>(b)] > 0) bin = b;
        return {std::clamp(bin + 1, 1, 255), true};
    }
    return {best_t, false};
}

// -- finite differences ----------------------------------------------------------

// Central-difference gradient check. build() assembles a graph from the given
// leaf tensors and returns a scalar root; the leaf at check_index is both
// differentiated analytically and perturbed numerically.
struct GradStats {
    double median_rel = 0;
    double max_rel = 0;
};

// Collects relative errors across elements and seeds.
class RelErrors {
public:
    void add(double analytic, double numeric) {
        double denom = std::max(std::abs(analytic), std::abs(numeric));
        if (denom < 1e-7) return; // both effectively zero
        errors_.push_back(std::abs(analytic - numeric) / std::max(denom, 1e-6));
    }
    GradStats stats() const {
        if (errors_.empty()) return {0, 0};
        std::vector<double> v = errors_;
        std::sort(v.begin(), v.end());
        return {v[v.size() / 2], v.back()};
    }
    size_t count() const { return errors_.size(); }

private:
    std::vector<double> errors_;
};

// f: maps input tensors to (graph, root, leaf refs). Checks d(root)/d(inputs[i])
// for every i in check against central differences with step h.
struct GradCheckProblem {
    std::vector<Tensor<double>> inputs;
    std::vector<size_t> check; // indices into inputs
    std::function<Graph<double>::ValueRef(Graph<double>&,
                                          std::vector<Graph<double>::ValueRef>&)> assemble;
};

inline void finite_diff_check(const GradCheckProblem& prob, RelErrors& errors, double h = 1e-6) {
    auto run = [&](const std::vector<Tensor<double>>& inputs, bool with_grads,
                   std::vector<Tensor<double>>* grads_out) {
        Graph<double> g;
        std::vector<Graph<double>::ValueRef> leaves;
        leaves.reserve(inputs.size());
        for (size_t i = 0; i < inputs.size(); ++i) {
            bool rg = with_grads &&
                      std::find(prob.check.begin(), prob.check.end(), i) != prob.check.end();
            leaves.push_back(g.leaf(inputs[i], rg));
        }
        auto root = prob.assemble(g, leaves);
        double value = g.value(root)[0];
        if (grads_out) {
            g.backward(root);
            grads_out->clear();
            for (size_t i : prob.check) grads_out->push_back(g.grad(leaves[i]));
        }
        return value;
    };

    std::vector<Tensor<double>> analytic;
    run(prob.inputs, true, &analytic);

    for (size_t ci = 0; ci < prob.check.size(); ++ci) {
        size_t input_idx = prob.check[ci];
        std::vector<Tensor<double>> perturbed = prob.inputs;
        for (int64_t e = 0; e < perturbed[input_idx].size(); ++e) {
            double orig = perturbed[input_idx][e];
            perturbed[input_idx][e] = orig + h;
            double fp = run(perturbed, false, nullptr);
            perturbed[input_idx][e] = orig - h;
            double fm = run(perturbed, false, nullptr);
            perturbed[input_idx][e] = orig;
            errors.add(analytic[ci][e], (fp - fm) / (2 * h));
        }
    }
}

// -- misc -----------------------------------------------------------------------

inline Tensor<double> random_tensor(const Shape& shape, hdrvam::Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
    Tensor<double> t(shape);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace oracles
