// Copyright 2026 The hdrvam Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "hdrvam/network.hpp"
#include "hdrvam/segmentation.hpp"

namespace hdrvam {

inline constexpr double kLogitEps = 1e-7;

enum class LossSpace { kSigmoid, kHdr };

struct TrainConfig {
    double lr = 0.001;
    double lr_decay_factor = 0.1;
    int plateau_patience = 10;
    int batch_size = 2;
    int epochs = 50;
    uint64_t seed = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    LossSpace loss_space = LossSpace::kSigmoid;
    bool augment_flips = true;
    // Reference mode keeps the metrics log byte-reproducible; opt in to wall
    //-clock timings when comparing runs by hand.
    bool log_wall_time = false;

    void validate() const {
        if (!(lr > 0)) throw ConfigError("lr must be positive");
        if (!(lr_decay_factor > 0 && lr_decay_factor < 1))
            throw ConfigError("lr_decay_factor must be in (0,1)");
        if (plateau_patience < 1) throw ConfigError("plateau_patience must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (!(adam_beta1 >= 0 && adam_beta1 < 1)) throw ConfigError("adam_beta1 must be in [0,1)");
        if (!(adam_beta2 >= 0 && adam_beta2 < 1)) throw ConfigError("adam_beta2 must be in [0,1)");
        if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
    }
};

// ---------------------------------------------------------------------------
// Domain mapping (the loss lives in sigmoid space; Eq.-17-style logit maps
// predictions back to linear radiance).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sigmoid_map(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) {
        T v = x[i];
        if (v >= T(0)) {
            T e = std::exp(-v);
            out[i] = T(1) / (T(1) + e);
        } else {
            T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid_map(const HdrImage<T>& gt) {
    return sigmoid_map(gt.pixels);
}

// logit with inputs clamped to [eps, 1-eps]; always finite.
template <typename T>
Tensor<T> inverse_sigmoid(const Tensor<T>& y, T eps = static_cast<T>(kLogitEps)) {
    Tensor<T> out(y.shape());
    for (int64_t i = 0; i < y.size(); ++i) {
        T c = std::clamp(y[i], eps, T(1) - eps);
        out[i] = std::log(c / (T(1) - c));
    }
    return out;
}

template <typename T>
double mae(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mae");
    double acc = 0;
    for (int64_t i = 0; i < a.size(); ++i)
        acc += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
    return acc / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Adam with bias correction, plus the plateau learning-rate schedule.
// ---------------------------------------------------------------------------

template <typename T>
struct TrainState {
    std::unordered_map<std::string, Tensor<T>> m; // first moments
    std::unordered_map<std::string, Tensor<T>> v; // second moments
    int64_t step = 0;
    double lr = 0.001;
    double best_val = std::numeric_limits<double>::infinity();
    int epochs_since_improvement = 0;

    static TrainState init(const ModelWeights<T>& weights, const TrainConfig& cfg) {
        TrainState s;
        s.lr = cfg.lr;
        for (const auto& p : weights.params())
            if (p.trainable) {
                s.m.emplace(p.name, Tensor<T>::zeros(p.tensor.shape()));
                s.v.emplace(p.name, Tensor<T>::zeros(p.tensor.shape()));
            }
        return s;
    }
};

template <typename T>
void adam_step(TrainState<T>& state, ModelWeights<T>& weights,
               const std::unordered_map<std::string, Tensor<T>>& grads, const TrainConfig& cfg) {
    state.step += 1;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (auto& p : weights.params()) {
        if (!p.trainable) continue;
        auto git = grads.find(p.name);
        if (git == grads.end())
            throw ValidationError("adam_step: missing gradient for trainable parameter " + p.name);
        const Tensor<T>& g = git->second;
        if (g.shape() != p.tensor.shape())
            throw ShapeError("adam_step: gradient shape mismatch for " + p.name);
        Tensor<T>& m = state.m.at(p.name);
        Tensor<T>& v = state.v.at(p.name);
        for (int64_t i = 0; i < g.size(); ++i) {
            double gi = static_cast<double>(g[i]);
            double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
            double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            double mhat = mi / corr1;
            double vhat = vi / corr2;
            p.tensor[i] = static_cast<T>(static_cast<double>(p.tensor[i]) -
                                         state.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
        }
    }
}

// Decay lr by lr_decay_factor after plateau_patience consecutive epochs
// without improvement (absolute tolerance 1e-8).
template <typename T>
void plateau_schedule(TrainState<T>& state, double val_loss, const TrainConfig& cfg) {
    if (val_loss < state.best_val - 1e-8) {
        state.best_val = val_loss;
        state.epochs_since_improvement = 0;
        return;
    }
    state.epochs_since_improvement += 1;
    if (state.epochs_since_improvement >= cfg.plateau_patience) {
        state.lr *= cfg.lr_decay_factor;
        state.epochs_since_improvement = 0;
    }
}

// ---------------------------------------------------------------------------
// Flip augmentation. The same flip applies to every frame, both masks, and the
// ground truth so the scene stays geometrically consistent.
// ---------------------------------------------------------------------------

enum class Flip { kNone = 0, kHorizontal = 1, kVertical = 2, kBoth = 3 };

template <typename T>
Tensor<T> apply_flip(const Tensor<T>& t, Flip flip) {
    if (t.rank() != 3) throw ShapeError("apply_flip expects [C,H,W], got " + t.shape().str());
    if (flip == Flip::kNone) return t;
    int64_t c = t.extent(0), h = t.extent(1), w = t.extent(2);
    bool fh = flip == Flip::kHorizontal || flip == Flip::kBoth;
    bool fv = flip == Flip::kVertical || flip == Flip::kBoth;
    Tensor<T> out(t.shape());
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t y = 0; y < h; ++y) {
            int64_t sy = fv ? h - 1 - y : y;
            for (int64_t x = 0; x < w; ++x) out.at(ci, y, x) = t.at(ci, sy, fh ? w - 1 - x : x);
        }
    return out;
}

template <typename T>
struct AugmentedScene {
    ExposureStack<T> stack;
    MaskPair<T> masks;
    Flip flip = Flip::kNone;
};

template <typename T>
AugmentedScene<T> augment_flip(const ExposureStack<T>& stack, const MaskPair<T>& masks, Rng& rng) {
    Flip flip = static_cast<Flip>(rng.uniform_int(4));
    AugmentedScene<T> out;
    out.flip = flip;
    out.stack = stack;
    out.stack.short_exp.pixels = apply_flip(stack.short_exp.pixels, flip);
    out.stack.medium_exp.pixels = apply_flip(stack.medium_exp.pixels, flip);
    out.stack.long_exp.pixels = apply_flip(stack.long_exp.pixels, flip);
    if (stack.gt) out.stack.gt = HdrImage<T>{apply_flip(stack.gt->pixels, flip)};
    out.masks = masks;
    out.masks.mask_short = apply_flip(masks.mask_short, flip);
    out.masks.mask_long = apply_flip(masks.mask_long, flip);
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic bracketed scenes: a clamped sum of seeded Gaussian radiance blobs
// over a smooth ramp, exposed at t = {0.25, 1, 4}, gamma-encoded and quantized
// to 1/255 steps. Ground truth is the radiance itself (medium-referenced).
// ---------------------------------------------------------------------------

template <typename T>
ExposureStack<T> synth_scene(uint64_t seed, int64_t h, int64_t w) {
    if (h % 16 != 0 || w % 16 != 0)
        throw ValidationError("synth_scene: extents must divide by 16, got " + std::to_string(h) +
                              "x" + std::to_string(w));
    Rng rng(seed);
    struct Blob {
        double cx, cy, sigma, amp;
    };
    int n_blobs = 3 + static_cast<int>(rng.uniform_int(6)); // 3..8
    std::vector<Blob> blobs(static_cast<size_t>(n_blobs));
    double min_dim = static_cast<double>(std::min(h, w));
    for (auto& b : blobs) {
        b.cx = rng.uniform(0.0, static_cast<double>(w - 1));
        b.cy = rng.uniform(0.0, static_cast<double>(h - 1));
        b.sigma = rng.uniform(0.06, 0.25) * min_dim;
        b.amp = rng.uniform(0.3, 2.8);
    }
    double base = rng.uniform(0.02, 0.15);
    double gx = rng.uniform(0.0, 0.5), gy = rng.uniform(0.0, 0.5);

    Tensor<T> radiance(Shape{3, h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            double v = base + gx * static_cast<double>(x) / static_cast<double>(w - 1) +
                       gy * static_cast<double>(y) / static_cast<double>(h - 1);
            for (const auto& b : blobs) {
                double dx = (static_cast<double>(x) - b.cx) / b.sigma;
                double dy = (static_cast<double>(y) - b.cy) / b.sigma;
                v += b.amp * std::exp(-0.5 * (dx * dx + dy * dy));
            }
            v = std::clamp(v, 0.0, 4.0);
            // Mild fixed channel tinting keeps the scene chromatic.
            radiance.at(0, y, x) = static_cast<T>(v);
            radiance.at(1, y, x) = static_cast<T>(v * 0.9);
            radiance.at(2, y, x) = static_cast<T>(v * 0.8);
        }

    const double exposures[3] = {0.25, 1.0, 4.0};
    auto expose = [&](double t) {
        Tensor<T> img(radiance.shape());
        for (int64_t i = 0; i < img.size(); ++i) {
            double lin = std::clamp(static_cast<double>(radiance[i]) * t, 0.0, 1.0);
            double enc = std::pow(lin, 1.0 / kDefaultGamma);
            img[i] = static_cast<T>(std::floor(enc * 255.0 + 0.5) / 255.0);
        }
        return LdrImage<T>{std::move(img), t};
    };

    ExposureStack<T> stack;
    stack.scene_id = "synth_" + std::to_string(seed);
    stack.short_exp = expose(exposures[0]);
    stack.medium_exp = expose(exposures[1]);
    stack.long_exp = expose(exposures[2]);
    stack.gt = HdrImage<T>{std::move(radiance)};
    stack.validate();
    return stack;
}

// ---------------------------------------------------------------------------
// Training loop: sigmoid-space (or linear-HDR) MAE, Adam, plateau decay,
// joint flip augmentation. Fully deterministic for a fixed (seed, config,
// data) in reference mode.
// ---------------------------------------------------------------------------

struct EpochRecord {
    int epoch = 0;
    double lr = 0;
    double train_mae = 0;
    double val_mae = 0;
    double seconds = 0;
};

template <typename T>
struct TrainResult {
    ModelWeights<T> weights;
    std::vector<EpochRecord> history;    // [0] is the pre-training evaluation
    std::vector<double> step_losses;     // per-step batch loss, in step order
    double initial_loss = 0;
    double final_val = 0;
};

namespace detail {

// Pre-rendered network inputs and targets for the four flip variants of one
// scene; avoids re-encoding the gamma stream every step.
template <typename T>
struct PreparedScene {
    std::array<SceneInputs<T>, 4> variants;
    std::array<Tensor<T>, 4> targets; // [3,H,W] in the configured loss space
};

template <typename T>
PreparedScene<T> prepare_scene(const ExposureStack<T>& stack, const ModelConfig& mcfg,
                               LossSpace space) {
    if (!stack.gt) throw ValidationError(stack.scene_id + ": training scene lacks gt.pfm");
    if (stack.height() % 16 != 0 || stack.width() % 16 != 0)
        throw ValidationError(stack.scene_id + ": training extents must divide by 16");
    MaskPair<T> masks = segment_stack(stack);
    PreparedScene<T> prep;
    for (int f = 0; f < 4; ++f) {
        Flip flip = static_cast<Flip>(f);
        ExposureStack<T> flipped = stack;
        flipped.short_exp.pixels = apply_flip(stack.short_exp.pixels, flip);
        flipped.medium_exp.pixels = apply_flip(stack.medium_exp.pixels, flip);
        flipped.long_exp.pixels = apply_flip(stack.long_exp.pixels, flip);
        MaskPair<T> fm = masks;
        fm.mask_short = apply_flip(masks.mask_short, flip);
        fm.mask_long = apply_flip(masks.mask_long, flip);
        prep.variants[static_cast<size_t>(f)] = make_scene_inputs(flipped, fm, mcfg.gamma);
        Tensor<T> gt = apply_flip(stack.gt->pixels, flip);
        prep.targets[static_cast<size_t>(f)] =
            space == LossSpace::kSigmoid ? sigmoid_map(gt) : gt;
    }
    return prep;
}

}  // namespace detail

template <typename T>
TrainResult<T> train(const std::vector<ExposureStack<T>>& scenes, const ModelConfig& mcfg,
                     const TrainConfig& tcfg) {
    mcfg.validate();
    tcfg.validate();
    if (scenes.empty()) throw ValidationError("train: empty dataset");

    std::vector<detail::PreparedScene<T>> prepared;
    prepared.reserve(scenes.size());
    for (const auto& s : scenes) prepared.push_back(detail::prepare_scene<T>(s, mcfg, tcfg.loss_space));

    TrainResult<T> result;
    result.weights = init_weights<T>(mcfg, tcfg.seed);
    TrainState<T> state = TrainState<T>::init(result.weights, tcfg);
    Rng rng(tcfg.seed + 0x517cc1b727220a95ULL);

    // One forward pass over a batch; the graph, network, and loss node live
    // together so gradients can be pulled afterwards.
    struct BatchRun {
        Graph<T> g;
        std::optional<Network<T>> net;
        typename Graph<T>::ValueRef loss;
        double loss_value = 0;
    };
    auto run_batch = [&](const std::vector<std::pair<size_t, int>>& items, bool train_mode,
                         bool with_grads) {
        std::vector<SceneInputs<T>> inputs;
        std::vector<const Tensor<T>*> targets;
        inputs.reserve(items.size());
        for (auto [idx, flip] : items) {
            inputs.push_back(prepared[idx].variants[static_cast<size_t>(flip)]);
            targets.push_back(&prepared[idx].targets[static_cast<size_t>(flip)]);
        }
        ForwardOptions opt;
        opt.bn_mode = train_mode ? BnMode::kTrain : BnMode::kInfer;
        opt.update_running = train_mode;
        opt.with_grads = with_grads;
        auto run = std::make_unique<BatchRun>();
        run->net.emplace(run->g, result.weights, mcfg, opt);
        auto y = run->net->forward(make_batch(inputs));
        auto pred = tcfg.loss_space == LossSpace::kHdr
                        ? run->g.logit(y, static_cast<T>(kLogitEps))
                        : y;
        auto target = run->g.leaf(stack_batch(targets));
        run->loss = run->g.mean_all(run->g.abs(run->g.sub(pred, target)));
        run->loss_value = static_cast<double>(run->g.value(run->loss)[0]);
        return run;
    };

    auto dataset_loss = [&]() {
        double acc = 0;
        for (size_t i = 0; i < prepared.size(); ++i)
            acc += run_batch({{i, 0}}, /*train_mode=*/false, /*with_grads=*/false)->loss_value;
        return acc / static_cast<double>(prepared.size());
    };

    result.initial_loss = dataset_loss();
    result.history.push_back({0, state.lr, result.initial_loss, result.initial_loss, 0.0});

    std::vector<size_t> order(prepared.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= tcfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        // Fisher-Yates with the portable rng.
        for (size_t i = order.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(rng.uniform_int(i));
            std::swap(order[i - 1], order[j]);
        }
        double epoch_loss = 0;
        int64_t seen = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(tcfg.batch_size)) {
            size_t end = std::min(order.size(), start + static_cast<size_t>(tcfg.batch_size));
            std::vector<std::pair<size_t, int>> items;
            for (size_t i = start; i < end; ++i) {
                int flip = tcfg.augment_flips ? static_cast<int>(rng.uniform_int(4)) : 0;
                items.emplace_back(order[i], flip);
            }
            auto run = run_batch(items, /*train_mode=*/true, /*with_grads=*/true);
            if (!std::isfinite(run->loss_value))
                throw NumericError("non-finite training loss at step " +
                                   std::to_string(state.step + 1));
            result.step_losses.push_back(run->loss_value);
            run->g.backward(run->loss);
            adam_step(state, result.weights, run->net->gradients(), tcfg);
            epoch_loss += run->loss_value * static_cast<double>(items.size());
            seen += static_cast<int64_t>(items.size());
        }
        double train_mae = epoch_loss / static_cast<double>(seen);
        double val_mae = dataset_loss();
        plateau_schedule(state, val_mae, tcfg);
        double seconds = 0.0;
        if (tcfg.log_wall_time) {
            seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        }
        result.history.push_back({epoch, state.lr, train_mae, val_mae, seconds});
        result.final_val = val_mae;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Metrics log: JSON-lines, one object per epoch. Numbers use shortest
// round-trip formatting so logs are byte-reproducible.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, p);
}

inline void write_metrics_jsonl(const std::string& path, const std::vector<EpochRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    for (const auto& r : records) {
        out << "{\"epoch\":" << r.epoch << ",\"lr\":" << format_double(r.lr)
            << ",\"train_mae\":" << format_double(r.train_mae)
            << ",\"val_mae\":" << format_double(r.val_mae)
            << ",\"seconds\":" << format_double(r.seconds) << "}\n";
    }
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace hdrvam
