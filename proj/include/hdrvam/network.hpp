// Copyright 2026 The hdrvam Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "hdrvam/autodiff.hpp"
#include "hdrvam/image.hpp"
#include "hdrvam/model.hpp"
#include "hdrvam/segmentation.hpp"

namespace hdrvam {

// ---------------------------------------------------------------------------
// Host-side network inputs for one scene. The gamma stream carries the LDR
// pixels concatenated with their exposure-mapped image; the alignment and VAM
// streams consume the raw LDR pixels.
// ---------------------------------------------------------------------------

template <typename T>
struct SceneInputs {
    Tensor<T> six_short, six_medium, six_long; // [6,H,W]
    Tensor<T> raw_short, raw_medium, raw_long; // [3,H,W]
    Tensor<T> mask_short, mask_long;           // [1,H,W]
};

template <typename T>
SceneInputs<T> make_scene_inputs(const ExposureStack<T>& stack, const MaskPair<T>& masks,
                                 double gamma) {
    SceneInputs<T> in;
    in.six_short = six_channel(stack.short_exp, gamma);
    in.six_medium = six_channel(stack.medium_exp, gamma);
    in.six_long = six_channel(stack.long_exp, gamma);
    in.raw_short = stack.short_exp.pixels;
    in.raw_medium = stack.medium_exp.pixels;
    in.raw_long = stack.long_exp.pixels;
    in.mask_short = masks.mask_short;
    in.mask_long = masks.mask_long;
    return in;
}

// Replication-pad every plane of a scene's inputs to the network grid.
template <typename T>
SceneInputs<T> pad_scene_inputs(const SceneInputs<T>& in, int64_t h2, int64_t w2) {
    SceneInputs<T> out;
    out.six_short = pad_to(in.six_short, h2, w2);
    out.six_medium = pad_to(in.six_medium, h2, w2);
    out.six_long = pad_to(in.six_long, h2, w2);
    out.raw_short = pad_to(in.raw_short, h2, w2);
    out.raw_medium = pad_to(in.raw_medium, h2, w2);
    out.raw_long = pad_to(in.raw_long, h2, w2);
    out.mask_short = pad_to(in.mask_short, h2, w2);
    out.mask_long = pad_to(in.mask_long, h2, w2);
    return out;
}

// [C,H,W] scenes -> one [N,C,H,W] batch tensor.
template <typename T>
Tensor<T> stack_batch(const std::vector<const Tensor<T>*>& items) {
    if (items.empty()) throw ValidationError("stack_batch: empty batch");
    const Shape& s = items[0]->shape();
    if (s.rank() != 3) throw ShapeError("stack_batch expects [C,H,W] items, got " + s.str());
    int64_t n = static_cast<int64_t>(items.size());
    Tensor<T> out(Shape{n, s[0], s[1], s[2]});
    int64_t step = s.count();
    for (int64_t i = 0; i < n; ++i) {
        if (items[static_cast<size_t>(i)]->shape() != s)
            throw ShapeError("stack_batch: item " + std::to_string(i) + " has shape " +
                             items[static_cast<size_t>(i)]->shape().str() + ", want " + s.str());
        std::copy_n(items[static_cast<size_t>(i)]->data(), step, out.data() + i * step);
    }
    return out;
}

template <typename T>
struct BatchInputs {
    Tensor<T> six_short, six_medium, six_long; // [N,6,H,W]
    Tensor<T> raw_short, raw_medium, raw_long; // [N,3,H,W]
    Tensor<T> mask_short, mask_long;           // [N,1,H,W]
};

template <typename T>
BatchInputs<T> make_batch(const std::vector<SceneInputs<T>>& scenes) {
    auto gather = [&](Tensor<T> SceneInputs<T>::*member) {
        std::vector<const Tensor<T>*> items;
        items.reserve(scenes.size());
        for (const auto& s : scenes) items.push_back(&(s.*member));
        return stack_batch(items);
    };
    BatchInputs<T> b;
    b.six_short = gather(&SceneInputs<T>::six_short);
    b.six_medium = gather(&SceneInputs<T>::six_medium);
    b.six_long = gather(&SceneInputs<T>::six_long);
    b.raw_short = gather(&SceneInputs<T>::raw_short);
    b.raw_medium = gather(&SceneInputs<T>::raw_medium);
    b.raw_long = gather(&SceneInputs<T>::raw_long);
    b.mask_short = gather(&SceneInputs<T>::mask_short);
    b.mask_long = gather(&SceneInputs<T>::mask_long);
    return b;
}

// ---------------------------------------------------------------------------
// Network assembly. A Network binds a graph to a weight store and builds the
// pipeline: feature extraction -> {spatial alignment, attention, VAM} ->
// reconstruction -> refinement. Parameter leaves are created lazily and
// cached, so each parameter appears exactly once per graph.
// ---------------------------------------------------------------------------

struct ForwardOptions {
    BnMode bn_mode = BnMode::kInfer;
    bool update_running = false; // fold batch statistics into running stats
    bool with_grads = false;     // request gradients for trainable parameters
    std::vector<std::pair<std::string, Shape>>* trace = nullptr;
};

template <typename T>
class Network {
public:
    using ValueRef = typename Graph<T>::ValueRef;

    Network(Graph<T>& graph, ModelWeights<T>& weights, const ModelConfig& cfg,
            const ForwardOptions& opt = {})
        : g_(graph), weights_(weights), cfg_(cfg), opt_(opt) {
        cfg_.validate();
    }

    Graph<T>& graph() { return g_; }

    // Parameter leaf (cached per graph).
    ValueRef param(const std::string& name) {
        auto it = param_refs_.find(name);
        if (it != param_refs_.end()) return it->second;
        Parameter<T>& p = weights_.at(name);
        ValueRef ref = g_.leaf(p.tensor, opt_.with_grads && p.trainable);
        param_refs_.emplace(name, ref);
        return ref;
    }

    // d(loss)/d(parameter) for every trainable parameter used by this graph.
    std::unordered_map<std::string, Tensor<T>> gradients() const {
        std::unordered_map<std::string, Tensor<T>> out;
        for (const auto& [name, ref] : param_refs_)
            if (g_.requires_grad(ref)) out.emplace(name, g_.grad(ref));
        return out;
    }

    ValueRef sepconv(const std::string& prefix, ValueRef x) {
        return g_.sepconv2d(x, param(prefix + ".dw"), param(prefix + ".pw"), param(prefix + ".b"));
    }
    ValueRef conv(const std::string& prefix, ValueRef x) {
        return g_.conv2d(x, param(prefix + ".w"), param(prefix + ".b"), 1, Padding::kSame);
    }

    // SepConv -> {max-pool || avg-pool} -> concat -> SepConv+ReLU -> 2x upsample.
    ValueRef feature_extract(const std::string& prefix, ValueRef x) {
        const Shape& s = g_.value(x).shape();
        if (s[2] % 2 != 0 || s[3] % 2 != 0)
            throw ShapeError("feature_extract: spatial extents must be even, got " + s.str());
        ValueRef maps = sepconv(prefix + ".conv1", x);
        ValueRef pooled = g_.concat_channels({g_.maxpool2(maps), g_.avgpool2(maps, 2)});
        ValueRef reduced = g_.relu(sepconv(prefix + ".conv2", pooled));
        return g_.upsample2(reduced);
    }

    // V = F(mask_short * I_short) + F(mask_long * I_long) with the VAM-specific
    // extractor; masks broadcast over the RGB channels.
    ValueRef vam(ValueRef raw_short, ValueRef raw_long, ValueRef mask_short, ValueRef mask_long) {
        ValueRef fs = feature_extract("fe_vam", g_.multiply(mask_short, raw_short));
        ValueRef fl = feature_extract("fe_vam", g_.multiply(mask_long, raw_long));
        return g_.add(fs, fl);
    }

    // Ref1 = ReLU(Conv(ref)); out = ReLU(Conv(Ref1)) + ReLU(Conv(Ref1)) * inp.
    ValueRef spatial_align(ValueRef ref_feat, ValueRef inp_feat) {
        ValueRef ref1 = g_.relu(conv("align.ref", ref_feat));
        ValueRef gated = g_.multiply(g_.relu(conv("align.gate", ref1)), inp_feat);
        return g_.add(g_.relu(conv("align.res", ref1)), gated);
    }

    // S_i = Sigmoid(SepConv(ReLU(SepConv(concat(f_i, f_r))))).
    ValueRef attention(ValueRef f_i, ValueRef f_r) {
        ValueRef r = g_.relu(sepconv("attn.conv1", g_.concat_channels({f_i, f_r})));
        return g_.sigmoid(sepconv("attn.conv2", r));
    }

    // Four encoder blocks (SepConv+BN+ReLU, dual pooling) and four decoder
    // blocks fed by pooled reference/VAM skips, then SepConv+ReLU at full
    // resolution.
    ValueRef reconstruct(ValueRef fused_in, ValueRef ref_feat, ValueRef vam_feat) {
        const Shape& s = g_.value(fused_in).shape();
        if (s[2] % 16 != 0 || s[3] % 16 != 0)
            throw ShapeError("reconstruct: spatial extents must divide by 16, got " + s.str());
        ValueRef x = fused_in;
        for (int k = 0; k < 4; ++k) {
            std::string prefix = "recon.enc" + std::to_string(k);
            x = sepconv(prefix + ".conv", x);
            x = g_.batchnorm(x, param(prefix + ".bn.gamma"), param(prefix + ".bn.beta"),
                             &weights_.at(prefix + ".bn.running_mean").tensor,
                             &weights_.at(prefix + ".bn.running_var").tensor, opt_.bn_mode,
                             opt_.update_running, static_cast<T>(cfg_.bn_epsilon),
                             static_cast<T>(cfg_.bn_momentum));
            x = g_.relu(x);
            x = g_.concat_channels({g_.maxpool2(x), g_.avgpool2(x, 2)});
            trace("enc" + std::to_string(k) + ".out", x);
        }
        for (int k = 0; k < 4; ++k) {
            int factor = 1 << (4 - k);
            ValueRef ref_k = g_.avgpool2(ref_feat, factor);
            ValueRef vam_k = g_.avgpool2(vam_feat, factor);
            trace("dec" + std::to_string(k) + ".skip", ref_k);
            x = g_.concat_channels({x, ref_k, vam_k});
            x = g_.relu(sepconv("recon.dec" + std::to_string(k) + ".conv", x));
            x = g_.upsample2(x);
            trace("dec" + std::to_string(k) + ".out", x);
        }
        return g_.relu(sepconv("recon.final", x));
    }

    // Reduce reference features once, then refine_iters rounds of
    // concat -> SepConv -> SepConv+ReLU, finally Conv+Sigmoid to 3 channels.
    ValueRef refine(ValueRef recon_out, ValueRef ref_feat) {
        ValueRef fr_hat = g_.relu(sepconv("refine.reduce", ref_feat));
        ValueRef x = recon_out;
        for (int i = 0; i < cfg_.refine_iters; ++i) {
            std::string prefix = "refine.iter" + std::to_string(i);
            ValueRef c = g_.concat_channels({x, fr_hat});
            x = g_.relu(sepconv(prefix + ".conv2", sepconv(prefix + ".conv1", c)));
        }
        return g_.sigmoid(conv("refine.out", x));
    }

    // Full pipeline to the sigmoid-space prediction [N,3,H,W].
    ValueRef forward(const BatchInputs<T>& in) {
        ValueRef f1 = feature_extract("fe_gamma", g_.leaf(in.six_short));
        ValueRef fr = feature_extract("fe_gamma", g_.leaf(in.six_medium));
        ValueRef f3 = feature_extract("fe_gamma", g_.leaf(in.six_long));

        ValueRef raw_s = g_.leaf(in.raw_short);
        ValueRef raw_m = g_.leaf(in.raw_medium);
        ValueRef raw_l = g_.leaf(in.raw_long);
        ValueRef a1 = feature_extract("fe_align", raw_s);
        ValueRef ar = feature_extract("fe_align", raw_m);
        ValueRef a3 = feature_extract("fe_align", raw_l);

        ValueRef v = vam(raw_s, raw_l, g_.leaf(in.mask_short), g_.leaf(in.mask_long));

        ValueRef out1 = spatial_align(ar, a1);
        ValueRef out3 = spatial_align(ar, a3);

        ValueRef s1 = attention(f1, fr);
        ValueRef s3 = attention(f3, fr);
        ValueRef att1 = cfg_.gate_attention ? g_.multiply(s1, f1) : s1;
        ValueRef att3 = cfg_.gate_attention ? g_.multiply(s3, f3) : s3;

        std::vector<ValueRef> fused{out1, out3, att1, att3, fr};
        if (cfg_.vam_in_fusion) fused.push_back(v);
        ValueRef fused_in = g_.concat_channels(fused);
        trace("fused_in", fused_in);

        ValueRef recon = reconstruct(fused_in, fr, v);
        trace("recon.out", recon);
        return refine(recon, fr);
    }

private:
    void trace(const std::string& name, ValueRef v) {
        if (opt_.trace) opt_.trace->emplace_back(name, g_.value(v).shape());
    }

    Graph<T>& g_;
    ModelWeights<T>& weights_;
    ModelConfig cfg_;
    ForwardOptions opt_;
    std::unordered_map<std::string, ValueRef> param_refs_;
};

// ---------------------------------------------------------------------------
// Whole-scene inference:: pad to the network grid, run in infer mode, crop
// back, and return the sigmoid-space prediction [3,H,W].
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> infer_scene(const ExposureStack<T>& stack, const MaskPair<T>& masks,
                      ModelWeights<T>& weights, const ModelConfig& cfg) {
    int64_t h = stack.height(), w = stack.width();
    int64_t h2 = round_up16(h), w2 = round_up16(w);
    SceneInputs<T> inputs = make_scene_inputs(stack, masks, cfg.gamma);
    if (h2 != h || w2 != w) inputs = pad_scene_inputs(inputs, h2, w2);
    BatchInputs<T> batch = make_batch<T>({inputs});
    Graph<T> g;
    Network<T> net(g, weights, cfg);
    auto y = net.forward(batch);
    const Tensor<T>& out = g.value(y);
    Tensor<T> chw(Shape{3, h2, w2});
    std::copy_n(out.data(), chw.size(), chw.data());
    if (h2 != h || w2 != w) return crop_center(chw, h, w);
    return chw;
}

}  // namespace hdrvam
