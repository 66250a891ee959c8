// Copyright 2026 The hdrvam Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "hdrvam/core.hpp"
#include "hdrvam/formats.hpp"
#include "hdrvam/image.hpp"

namespace hdrvam {

// ---------------------------------------------------------------------------
// Architecture hyper-parameters. Defaults follow the reference configuration;
// everything is recorded here so individual choices can be ablated.
// ---------------------------------------------------------------------------

struct ModelConfig {
    int base_channels = 32;                            // feature maps per extractor
    std::vector<int> encoder_channels = {32, 64, 64, 64};
    int kernel_size = 3;
    double bn_epsilon = 1e-3;
    double bn_momentum = 0.99;
    int refine_iters = 3;
    std::string align_stream = "ldr_only";             // alignment input selection
    bool gate_attention = true;                        // multiply S_i into features vs concat raw
    bool vam_in_fusion = false;                        // also feed VAM into the fused input
    int refine_channels = 16;                          // reduced reference maps in refinement
    double gamma = kDefaultGamma;                      // exposure-domain mapping exponent

    void validate() const {
        if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
        if (encoder_channels.size() != 4)
            throw ConfigError("encoder_channels must list exactly 4 blocks, got " +
                              std::to_string(encoder_channels.size()));
        for (int c : encoder_channels)
            if (c < 1) throw ConfigError("encoder_channels entries must be >= 1");
        if (kernel_size < 1 || kernel_size % 2 == 0)
            throw ConfigError("kernel_size must be odd and >= 1, got " + std::to_string(kernel_size));
        if (!(bn_epsilon > 0)) throw ConfigError("bn_epsilon must be positive");
        if (!(bn_momentum >= 0 && bn_momentum < 1)) throw ConfigError("bn_momentum must be in [0,1)");
        if (refine_iters < 1) throw ConfigError("refine_iters must be >= 1");
        if (refine_channels < 1) throw ConfigError("refine_channels must be >= 1");
        if (align_stream != "ldr_only")
            throw ConfigError("align_stream must be 'ldr_only', got '" + align_stream + "'");
        if (!(gamma > 0)) throw ConfigError("gamma must be positive");
    }

    // Channels entering the reconstruction stage:
    // [aligned short, aligned long, attended short, attended long, reference].
    int fused_channels() const {
        return 5 * base_channels + (vam_in_fusion ? base_channels : 0);
    }
    // Decoder widths mirror the encoder.
    std::vector<int> decoder_channels() const {
        return {encoder_channels[3], encoder_channels[2], encoder_channels[1], encoder_channels[0]};
    }
};

// ---------------------------------------------------------------------------
// Named parameters.
// ---------------------------------------------------------------------------

inline void validate_param_name(const std::string& name) {
    if (name.empty()) throw ValidationError("parameter name must be non-empty");
    for (char c : name) {
        bool ok = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') ||
                  c == '_' || c == '.' || c == '/';
        if (!ok) throw ValidationError("parameter name '" + name + "' has invalid character");
    }
}

template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;
};

struct ParamSpec {
    std::string name;
    Shape shape;
    bool trainable = true;
};

// Enumerates every parameter the architecture owns, in a fixed order. This is
// the single source of truth for initialization and weight-file validation.
inline std::vector<ParamSpec> expected_parameters(const ModelConfig& cfg) {
    cfg.validate();
    std::vector<ParamSpec> specs;
    int64_t k = cfg.kernel_size;
    int64_t base = cfg.base_channels;

    auto sepconv = [&](const std::string& prefix, int64_t cin, int64_t cout) {
        specs.push_back({prefix + ".dw", Shape{cin, 1, k, k}, true});
        specs.push_back({prefix + ".pw", Shape{cout, cin, 1, 1}, true});
        specs.push_back({prefix + ".b", Shape{cout}, true});
    };
    auto conv = [&](const std::string& prefix, int64_t cin, int64_t cout) {
        specs.push_back({prefix + ".w", Shape{cout, cin, k, k}, true});
        specs.push_back({prefix + ".b", Shape{cout}, true});
    };
    auto feature_extractor = [&](const std::string& prefix, int64_t cin) {
        sepconv(prefix + ".conv1", cin, base);
        sepconv(prefix + ".conv2", 2 * base, base);
    };

    feature_extractor("fe_gamma", 6);   // gamma stream: LDR + mapped image
    feature_extractor("fe_align", 3);   // alignment stream: raw LDR
    feature_extractor("fe_vam", 3);     // VAM stream: mask-gated LDR

    conv("align.ref", base, base);
    conv("align.gate", base, base);
    conv("align.res", base, base);

    sepconv("attn.conv1", 2 * base, base);
    sepconv("attn.conv2", base, base);

    int64_t in_ch = cfg.fused_channels();
    for (int i = 0; i < 4; ++i) {
        std::string prefix = "recon.enc" + std::to_string(i);
        int64_t out_ch = cfg.encoder_channels[static_cast<size_t>(i)];
        sepconv(prefix + ".conv", in_ch, out_ch);
        specs.push_back({prefix + ".bn.gamma", Shape{out_ch}, true});
        specs.push_back({prefix + ".bn.beta", Shape{out_ch}, true});
        specs.push_back({prefix + ".bn.running_mean", Shape{out_ch}, false});
        specs.push_back({prefix + ".bn.running_var", Shape{out_ch}, false});
        in_ch = 2 * out_ch; // max-pool and avg-pool branches concatenated
    }
    std::vector<int> dec = cfg.decoder_channels();
    for (int i = 0; i < 4; ++i) {
        // previous output plus pooled reference and VAM features
        sepconv("recon.dec" + std::to_string(i) + ".conv", in_ch + 2 * base,
                dec[static_cast<size_t>(i)]);
        in_ch = dec[static_cast<size_t>(i)];
    }
    sepconv("recon.final", in_ch, base);

    sepconv("refine.reduce", base, cfg.refine_channels);
    for (int i = 0; i < cfg.refine_iters; ++i) {
        std::string prefix = "refine.iter" + std::to_string(i);
        sepconv(prefix + ".conv1", base + cfg.refine_channels, base);
        sepconv(prefix + ".conv2", base, base);
    }
    conv("refine.out", base, 3);
    return specs;
}

// ---------------------------------------------------------------------------
// Weight store. Ordered; order is the enumeration order of expected_parameters.
// ---------------------------------------------------------------------------

template <typename T>
class ModelWeights {
public:
    void add(Parameter<T> p) {
        validate_param_name(p.name);
        if (index_.count(p.name)) throw ValidationError("duplicate parameter name " + p.name);
        index_[p.name] = params_.size();
        params_.push_back(std::move(p));
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Parameter<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("unknown parameter " + name);
        return params_[it->second];
    }
    const Parameter<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("unknown parameter " + name);
        return params_[it->second];
    }

    std::vector<Parameter<T>>& params() { return params_; }
    const std::vector<Parameter<T>>& params() const { return params_; }
    size_t size() const { return params_.size(); }

private:
    std::vector<Parameter<T>> params_;
    std::unordered_map<std::string, size_t> index_;
};

// Fan-based uniform (Glorot-style) initialization for convolution kernels;
// biases start at zero, BN at identity.
template <typename T>
ModelWeights<T> init_weights(const ModelConfig& cfg, uint64_t seed) {
    ModelWeights<T> weights;
    Rng rng(seed);
    for (const ParamSpec& spec : expected_parameters(cfg)) {
        Tensor<T> t(spec.shape);
        bool is_kernel = spec.shape.rank() == 4;
        if (is_kernel) {
            int64_t fan_in = spec.shape[1] * spec.shape[2] * spec.shape[3];
            int64_t fan_out = spec.shape[0] * spec.shape[2] * spec.shape[3];
            double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
            for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(-a, a));
        } else if (spec.name.ends_with(".bn.gamma") || spec.name.ends_with(".bn.running_var")) {
            for (int64_t i = 0; i < t.size(); ++i) t[i] = T(1);
        }
        // biases, bn.beta and bn.running_mean stay zero
        weights.add(Parameter<T>{spec.name, std::move(t), spec.trainable});
    }
    return weights;
}

// ---------------------------------------------------------------------------
// Weight file:
//   magic "VAMW" | version u8 = 1 | count u32le |
//   per parameter: name length u16le | UTF-8 name | TNS-encoded tensor
// ---------------------------------------------------------------------------

inline constexpr char kWeightMagic[4] = {'V', 'A', 'M', 'W'};
inline constexpr uint8_t kWeightVersion = 1;

template <typename T>
void write_weights(const std::string& path, const ModelWeights<T>& weights) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kWeightMagic, kWeightMagic + 4);
    out.push_back(kWeightVersion);
    put_u32le(out, static_cast<uint32_t>(weights.size()));
    for (const auto& p : weights.params()) {
        if (p.name.size() > 0xffff) throw ValidationError("parameter name too long: " + p.name);
        put_u16le(out, static_cast<uint16_t>(p.name.size()));
        out.insert(out.end(), p.name.begin(), p.name.end());
        std::vector<uint8_t> tns = encode_tns(p.tensor.template cast<float>());
        out.insert(out.end(), tns.begin(), tns.end());
    }
    write_file_bytes(path, out);
}

// Loads and validates against the architecture: missing, extra, and mis-shaped
// names are all reported.
template <typename T>
ModelWeights<T> read_weights(const std::string& path, const ModelConfig& cfg) {
    std::vector<uint8_t> bytes = read_file_bytes(path);
    ByteReader r(bytes.data(), bytes.size(), path);
    char magic[4];
    r.read(magic, 4, "magic");
    if (std::memcmp(magic, kWeightMagic, 4) != 0) throw FormatError(path + ": bad weight-file magic");
    uint8_t version = r.u8("version");
    if (version != kWeightVersion)
        throw FormatError(path + ": unsupported weight-file version " + std::to_string(version));
    uint32_t count = r.u32le("count");
    std::unordered_map<std::string, Tensor<float>> loaded;
    std::vector<std::string> order;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t len = r.u16le("name length");
        std::string name(len, '\0');
        r.read(name.data(), len, "name");
        if (loaded.count(name)) throw FormatError(path + ": duplicate parameter " + name);
        loaded.emplace(name, decode_tns(r));
        order.push_back(name);
    }
    if (r.remaining() != 0)
        throw FormatError(path + ": " + std::to_string(r.remaining()) + " trailing bytes");

    std::vector<ParamSpec> specs = expected_parameters(cfg);
    std::string missing, extra, bad_shape;
    for (const auto& spec : specs) {
        auto it = loaded.find(spec.name);
        if (it == loaded.end()) missing += (missing.empty() ? "" : ", ") + spec.name;
        else if (it->second.shape() != spec.shape)
            bad_shape += (bad_shape.empty() ? "" : ", ") + spec.name + " (got " +
                         it->second.shape().str() + ", want " + spec.shape.str() + ")";
    }
    std::unordered_map<std::string, const ParamSpec*> by_name;
    for (const auto& spec : specs) by_name[spec.name] = &spec;
    for (const auto& name : order)
        if (!by_name.count(name)) extra += (extra.empty() ? "" : ", ") + name;
    if (!missing.empty() || !extra.empty() || !bad_shape.empty()) {
        std::string msg = path + ": weights do not match model config.";
        if (!missing.empty()) msg += " missing: [" + missing + "]";
        if (!extra.empty()) msg += " extra: [" + extra + "]";
        if (!bad_shape.empty()) msg += " mis-shaped: [" + bad_shape + "]";
        throw ValidationError(msg);
    }
    ModelWeights<T> weights;
    for (const auto& spec : specs)
        weights.add(Parameter<T>{spec.name, loaded.at(spec.name).template cast<T>(), spec.trainable});
    return weights;
}

}  // namespace hdrvam
