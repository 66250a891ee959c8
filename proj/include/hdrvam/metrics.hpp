// Copyright 2026 The hdrvam Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "hdrvam/image.hpp"

namespace hdrvam {

inline constexpr double kDefaultMu = 5000.0;
inline constexpr double kPsnrCapDb = 100.0;

template <typename T>
struct EvalReport {
    double psnr_db = 0;
    double mu_psnr_db = 0;
    double mse = 0;
    double peak = 0; // linear-domain peak used for both metrics
    std::string scene_id;
};

template <typename T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mse");
    double acc = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

// 10*log10(peak^2 / MSE), capped at 100 dB.
template <typename T>
double psnr(const Tensor<T>& pred, const Tensor<T>& gt, double peak) {
    if (!(peak > 0)) throw ValidationError("psnr: peak must be positive");
    double e = mse(pred, gt);
    if (e < 1e-20) return kPsnrCapDb;
    return std::min(kPsnrCapDb, 10.0 * std::log10(peak * peak / e));
}

// T(x) = log(1 + mu*clip(x,0,1)) / log(1 + mu); T(0)=0, T(1)=1.
template <typename T>
Tensor<T> mu_tonemap(const Tensor<T>& x, double mu) {
    if (!(mu > 0)) throw ValidationError("mu_tonemap: mu must be positive");
    Tensor<T> out(x.shape());
    const double norm = std::log1p(mu);
    for (int64_t i = 0; i < x.size(); ++i) {
        double c = std::clamp(static_cast<double>(x[i]), 0.0, 1.0);
        out[i] = static_cast<T>(std::log1p(mu * c) / norm);
    }
    return out;
}

// Tone-mapped PSNR: inputs are scaled by the linear peak, mu-law compressed,
// and compared at peak 1.
template <typename T>
double mu_psnr(const Tensor<T>& pred, const Tensor<T>& gt, double mu, double peak) {
    require_same_shape(pred, gt, "mu_psnr");
    if (!(peak > 0)) throw ValidationError("mu_psnr: peak must be positive");
    Tensor<T> p(pred.shape()), g(gt.shape());
    for (int64_t i = 0; i < pred.size(); ++i) {
        p[i] = static_cast<T>(static_cast<double>(pred[i]) / peak);
        g[i] = static_cast<T>(static_cast<double>(gt[i]) / peak);
    }
    return psnr(mu_tonemap(p, mu), mu_tonemap(g, mu), 1.0);
}

template <typename T>
double max_value(const Tensor<T>& t) {
    double m = 0;
    for (int64_t i = 0; i < t.size(); ++i) m = std::max(m, static_cast<double>(t[i]));
    return m;
}

// Trivial comparator: the exposure-mapped medium frame as an HDR estimate.
template <typename T>
HdrImage<T> baseline_medium(const ExposureStack<T>& stack, double gamma = kDefaultGamma) {
    return gamma_map(stack.medium_exp, gamma);
}

// Scores a prediction against ground truth. The peak defaults to the per-scene
// ground-truth maximum and is recorded in the report.
template <typename T>
EvalReport<T> evaluate(const Tensor<T>& pred, const Tensor<T>& gt, double mu,
                       const std::string& scene_id) {
    EvalReport<T> report;
    report.scene_id = scene_id;
    report.mse = mse(pred, gt);
    report.peak = max_value(gt);
    if (report.peak <= 0) report.peak = 1.0;
    report.psnr_db = psnr(pred, gt, report.peak);
    report.mu_psnr_db = mu_psnr(pred, gt, mu, report.peak);
    return report;
}

}  // namespace hdrvam
