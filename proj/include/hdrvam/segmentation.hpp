// Copyright 2026 The hdrvam Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "hdrvam/image.hpp"

namespace hdrvam {

// ---------------------------------------------------------------------------
// 256-bin luminance histogram over [0,1], round-half-up binning.
// ---------------------------------------------------------------------------

struct Histogram256 {
    std::array<int64_t, 256> counts{};
    int64_t total = 0;
};

// bin = floor(y*255 + 0.5), clamped to [0,255].
inline int luma_bin(double y) {
    double b = std::floor(y * 255.0 + 0.5);
    if (b < 0) return 0;
    if (b > 255) return 255;
    return static_cast<int>(b);
}

template <typename T>
Histogram256 histogram256(const Tensor<T>& y) {
    Histogram256 h;
    for (int64_t i = 0; i < y.size(); ++i) ++h.counts[static_cast<size_t>(luma_bin(static_cast<double>(y[i])))];
    h.total = y.size();
    return h;
}

// ---------------------------------------------------------------------------
// Otsu threshold: maximize the between-class variance
//   sigma_B^2(t) = w0*w1*(mu0 - mu1)^2,  class 0 = bins [0,t), class 1 = [t,255]
// over t in [1,255]. Candidates with an empty class are excluded; ties break
// to the smallest t. All comparisons are exact integer arithmetic, so tie
// handling does not depend on floating-point rounding.
// ---------------------------------------------------------------------------

struct OtsuResult {
    int threshold = 1;       // in [1,255]
    bool degenerate = false; // all mass in one bin; threshold is bin+1 clamped
};

namespace detail {

// sigma_B^2(t) is proportional to a^2/b with a = s0*W - S*w0 and b = w0*w1,
// where w0,s0 are the zeroth/first moments of class 0 and W,S the totals.
// Exact fraction comparison via quotient/remainder in 128-bit arithmetic
// (valid for histograms of up to ~2^24 samples).
struct OtsuScore {
    __int128 a2; // a^2
    __int128 b;  // w0*w1 > 0
};

inline int compare_scores(const OtsuScore& x, const OtsuScore& y) {
    __int128 qx = x.a2 / x.b, rx = x.a2 % x.b;
    __int128 qy = y.a2 / y.b, ry = y.a2 % y.b;
    if (qx != qy) return qx < qy ? -1 : 1;
    __int128 lhs = rx * y.b, rhs = ry * x.b;
    if (lhs != rhs) return lhs < rhs ? -1 : 1;
    return 0;
}

}  // namespace detail

inline OtsuResult otsu_threshold(const Histogram256& h) {
    if (h.total < 1) throw ValidationError("otsu_threshold: histogram is empty");
    const int64_t W = h.total;
    __int128 S = 0;
    for (int t = 0; t < 256; ++t) S += static_cast<__int128>(h.counts[static_cast<size_t>(t)]) * t;

    bool found = false;
    detail::OtsuScore best{};
    int best_t = 0;
    int64_t w0 = 0;
    __int128 s0 = 0;
    for (int t = 1; t <= 255; ++t) {
        w0 += h.counts[static_cast<size_t>(t - 1)];
        s0 += static_cast<__int128>(h.counts[static_cast<size_t>(t - 1)]) * (t - 1);
        int64_t w1 = W - w0;
        if (w0 == 0 || w1 == 0) continue;
        __int128 a = s0 * W - S * w0;
        detail::OtsuScore score{a * a, static_cast<__int128>(w0) * w1};
        if (!found || detail::compare_scores(score, best) > 0) {
            found = true;
            best = score;
            best_t = t;
        }
    }
    if (!found) {
        // All mass in a single bin: no candidate separates two non-empty
        // classes. Report bin+1 clamped to [1,255] and flag it.
        int bin = 0;
        for (int t = 0; t < 256; ++t)
            if (h.counts[static_cast<size_t>(t)] > 0) bin = t;
        return OtsuResult{std::clamp(bin + 1, 1, 255), true};
    }
    return OtsuResult{best_t, false};
}

// Between-class variance at a candidate threshold, for reports and tests.
inline double otsu_sigma_b(const Histogram256& h, int t) {
    int64_t w0 = 0, w1 = 0;
    double s0 = 0, s1 = 0;
    for (int b = 0; b < 256; ++b) {
        if (b < t) {
            w0 += h.counts[static_cast<size_t>(b)];
            s0 += static_cast<double>(h.counts[static_cast<size_t>(b)]) * b;
        } else {
            w1 += h.counts[static_cast<size_t>(b)];
            s1 += static_cast<double>(h.counts[static_cast<size_t>(b)]) * b;
        }
    }
    if (w0 == 0 || w1 == 0) return 0.0;
    double total = static_cast<double>(h.total);
    double om0 = static_cast<double>(w0) / total, om1 = static_cast<double>(w1) / total;
    double mu0 = s0 / static_cast<double>(w0), mu1 = s1 / static_cast<double>(w1);
    return om0 * om1 * (mu0 - mu1) * (mu0 - mu1);
}

// ---------------------------------------------------------------------------
// Visibility masks. Short-exposure keeps bright (well-exposed) pixels,
// long-exposure keeps dark ones; with a shared threshold they are exact
// complements.
// ---------------------------------------------------------------------------

template <typename T>
struct MaskPair {
    Tensor<T> mask_short; // [1,H,W] in {0,1}
    Tensor<T> mask_long;  // [1,H,W] in {0,1}
    int thresh_short = 1;
    int thresh_long = 1;
};

template <typename T>
Tensor<T> short_mask(const Tensor<T>& y, int t) {
    if (t < 1 || t > 255) throw ValidationError("short_mask: threshold out of [1,255]");
    Tensor<T> m(y.shape());
    for (int64_t i = 0; i < y.size(); ++i)
        m[i] = luma_bin(static_cast<double>(y[i])) >= t ? T(1) : T(0);
    return m;
}

template <typename T>
Tensor<T> long_mask(const Tensor<T>& y, int t) {
    if (t < 1 || t > 255) throw ValidationError("long_mask: threshold out of [1,255]");
    Tensor<T> m(y.shape());
    for (int64_t i = 0; i < y.size(); ++i)
        m[i] = luma_bin(static_cast<double>(y[i])) < t ? T(1) : T(0);
    return m;
}

// Otsu runs independently on the short and long luminance; the medium
// (reference) exposure is not segmented.
template <typename T>
MaskPair<T> segment_stack(const ExposureStack<T>& stack) {
    Tensor<T> y_short = luma(stack.short_exp);
    Tensor<T> y_long = luma(stack.long_exp);
    OtsuResult ts = otsu_threshold(histogram256(y_short));
    OtsuResult tl = otsu_threshold(histogram256(y_long));
    MaskPair<T> masks;
    masks.thresh_short = ts.threshold;
    masks.thresh_long = tl.threshold;
    masks.mask_short = short_mask(y_short, ts.threshold);
    masks.mask_long = long_mask(y_long, tl.threshold);
    return masks;
}

}  // namespace hdrvam
