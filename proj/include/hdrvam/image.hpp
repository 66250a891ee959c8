// Copyright 2026 The hdrvam Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "hdrvam/core.hpp"

namespace hdrvam {

inline constexpr double kDefaultGamma = 2.24;

// LDR frame: [3,H,W] pixels in [0,1] plus its exposure time in seconds.
template <typename T>
struct LdrImage {
    Tensor<T> pixels;
    double exposure_time = 1.0;

    int64_t height() const { return pixels.extent(1); }
    int64_t width() const { return pixels.extent(2); }

    void validate(const std::string& name) const {
        if (pixels.rank() != 3 || pixels.extent(0) != 3)
            throw ValidationError(name + ": LDR pixels must be [3,H,W], got " + pixels.shape().str());
        if (!(exposure_time > 0))
            throw ValidationError(name + ": exposure_time must be positive");
        for (int64_t i = 0; i < pixels.size(); ++i) {
            T v = pixels[i];
            if (!(v >= T(0) && v <= T(1)))
                throw ValidationError(name + ": pixel value " + std::to_string(static_cast<double>(v)) +
                                      " outside [0,1]");
        }
    }
};

// Linear-radiance frame: [3,H,W], non-negative, unbounded above.
template <typename T>
struct HdrImage {
    Tensor<T> pixels;

    int64_t height() const { return pixels.extent(1); }
    int64_t width() const { return pixels.extent(2); }

    void validate(const std::string& name) const {
        if (pixels.rank() != 3 || pixels.extent(0) != 3)
            throw ValidationError(name + ": HDR pixels must be [3,H,W], got " + pixels.shape().str());
        for (int64_t i = 0; i < pixels.size(); ++i) {
            T v = pixels[i];
            if (!(std::isfinite(v) && v >= T(0)))
                throw ValidationError(name + ": HDR value must be finite and >= 0");
        }
    }
};

// One bracketed scene; medium is the reference exposure.
template <typename T>
struct ExposureStack {
    LdrImage<T> short_exp;
    LdrImage<T> medium_exp;
    LdrImage<T> long_exp;
    std::optional<HdrImage<T>> gt;
    std::string scene_id;

    int64_t height() const { return medium_exp.height(); }
    int64_t width() const { return medium_exp.width(); }

    void validate() const {
        short_exp.validate(scene_id + "/short");
        medium_exp.validate(scene_id + "/medium");
        long_exp.validate(scene_id + "/long");
        if (short_exp.pixels.shape() != medium_exp.pixels.shape() ||
            medium_exp.pixels.shape() != long_exp.pixels.shape())
            throw ValidationError(scene_id + ": exposure images disagree on H,W");
        if (!(short_exp.exposure_time < medium_exp.exposure_time &&
              medium_exp.exposure_time < long_exp.exposure_time))
            throw ValidationError(scene_id + ": exposure times must be strictly ascending");
        if (gt) {
            gt->validate(scene_id + "/gt");
            if (gt->pixels.shape() != medium_exp.pixels.shape())
                throw ValidationError(scene_id + ": gt shape differs from LDR shape");
        }
    }
};

// I_hat = I^gamma / t. Strictly monotone on (0,1] for fixed t.
template <typename T>
HdrImage<T> gamma_map(const LdrImage<T>& img, double gamma) {
    if (!(gamma > 0)) throw ValidationError("gamma must be positive");
    Tensor<T> out(img.pixels.shape());
    const double inv_t = 1.0 / img.exposure_time;
    for (int64_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>(std::pow(static_cast<double>(img.pixels[i]), gamma) * inv_t);
    return HdrImage<T>{std::move(out)};
}

// Channels 0-2: LDR pixels; channels 3-5: the gamma-mapped image.
template <typename T>
Tensor<T> six_channel(const LdrImage<T>& img, double gamma) {
    HdrImage<T> mapped = gamma_map(img, gamma);
    int64_t h = img.height(), w = img.width();
    Tensor<T> out(Shape{6, h, w});
    int64_t plane = h * w;
    std::copy_n(img.pixels.data(), 3 * plane, out.data());
    std::copy_n(mapped.pixels.data(), 3 * plane, out.data() + 3 * plane);
    return out;
}

// BT.601 luma of an LDR frame, clamped to [0,1].
template <typename T>
Tensor<T> luma(const LdrImage<T>& img) {
    int64_t h = img.height(), w = img.width();
    Tensor<T> out(Shape{1, h, w});
    const T* r = img.pixels.data();
    const T* g = r + h * w;
    const T* b = g + h * w;
    for (int64_t i = 0; i < h * w; ++i) {
        T y = static_cast<T>(0.299) * r[i] + static_cast<T>(0.587) * g[i] + static_cast<T>(0.114) * b[i];
        out[i] = std::clamp(y, T(0), T(1));
    }
    return out;
}

namespace detail {

// Sample coordinates for bilinear scaling with the half-pixel (corner-aligned
// false) convention: src = (dst + 0.5) * in/out - 0.5, clamped.
struct LerpIndex {
    int64_t i0, i1;
    double w0, w1;
};

inline LerpIndex lerp_index(int64_t dst, int64_t in_extent, int64_t out_extent) {
    double src = (static_cast<double>(dst) + 0.5) * static_cast<double>(in_extent) /
                     static_cast<double>(out_extent) -
                 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_extent - 1));
    int64_t i0 = static_cast<int64_t>(std::floor(src));
    int64_t i1 = std::min(i0 + 1, in_extent - 1);
    double f = src - static_cast<double>(i0);
    return {i0, i1, 1.0 - f, f};
}

}  // namespace detail

// Bilinear resize of a [C,H,W] tensor to [C,H2,W2]. Resizing to the same size
// is bit-exact identity.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& t, int64_t h2, int64_t w2) {
    if (t.rank() != 3) throw ShapeError("resize_bilinear expects [C,H,W], got " + t.shape().str());
    if (h2 < 1 || w2 < 1) throw ValidationError("resize target extents must be >= 1");
    int64_t c = t.extent(0), h = t.extent(1), w = t.extent(2);
    if (h2 == h && w2 == w) return t;
    std::vector<detail::LerpIndex> rows(static_cast<size_t>(h2)), cols(static_cast<size_t>(w2));
    for (int64_t y = 0; y < h2; ++y) rows[static_cast<size_t>(y)] = detail::lerp_index(y, h, h2);
    for (int64_t x = 0; x < w2; ++x) cols[static_cast<size_t>(x)] = detail::lerp_index(x, w, w2);
    Tensor<T> out(Shape{c, h2, w2});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < h2; ++y) {
            const auto& ry = rows[static_cast<size_t>(y)];
            for (int64_t x = 0; x < w2; ++x) {
                const auto& cx = cols[static_cast<size_t>(x)];
                double v = ry.w0 * (cx.w0 * t.at(ch, ry.i0, cx.i0) + cx.w1 * t.at(ch, ry.i0, cx.i1)) +
                           ry.w1 * (cx.w0 * t.at(ch, ry.i1, cx.i0) + cx.w1 * t.at(ch, ry.i1, cx.i1));
                out.at(ch, y, x) = static_cast<T>(v);
            }
        }
    return out;
}

// Edge-replication padding of a [C,H,W] tensor, split evenly with the extra
// row/column on the bottom/right.
template <typename T>
Tensor<T> pad_to(const Tensor<T>& t, int64_t h2, int64_t w2) {
    if (t.rank() != 3) throw ShapeError("pad_to expects [C,H,W], got " + t.shape().str());
    int64_t c = t.extent(0), h = t.extent(1), w = t.extent(2);
    if (h2 < h || w2 < w)
        throw ValidationError("pad_to target " + std::to_string(h2) + "x" + std::to_string(w2) +
                              " smaller than source " + std::to_string(h) + "x" + std::to_string(w));
    int64_t top = (h2 - h) / 2, left = (w2 - w) / 2;
    Tensor<T> out(Shape{c, h2, w2});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < h2; ++y) {
            int64_t sy = std::clamp(y - top, int64_t(0), h - 1);
            for (int64_t x = 0; x < w2; ++x) {
                int64_t sx = std::clamp(x - left, int64_t(0), w - 1);
                out.at(ch, y, x) = t.at(ch, sy, sx);
            }
        }
    return out;
}

// Inverse of pad_to's placement: crop the centered HxW window back out.
template <typename T>
Tensor<T> crop_center(const Tensor<T>& t, int64_t h, int64_t w) {
    if (t.rank() != 3) throw ShapeError("crop_center expects [C,H,W], got " + t.shape().str());
    int64_t c = t.extent(0), h2 = t.extent(1), w2 = t.extent(2);
    if (h > h2 || w > w2)
        throw ValidationError("crop target larger than source");
    int64_t top = (h2 - h) / 2, left = (w2 - w) / 2;
    Tensor<T> out(Shape{c, h, w});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) out.at(ch, y, x) = t.at(ch, y + top, x + left);
    return out;
}

// Next multiple of 16; network inputs must divide by 16 (four 2x poolings).
inline int64_t round_up16(int64_t v) { return (v + 15) / 16 * 16; }

}  // namespace hdrvam
