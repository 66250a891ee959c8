// Copyright 2026 The hdrvam Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hdrvam/formats.hpp"
#include "hdrvam/image.hpp"

namespace hdrvam {

namespace fs = std::filesystem;

// Scene directory layout:
//   short.tns, medium.tns, long.tns   [3,H,W] real32 in [0,1]
//   exposures.txt                     three ascending decimal lines (seconds)
//   gt.pfm                            optional ground-truth radiance

inline std::vector<double> read_exposures(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("missing file " + path);
    std::vector<double> times;
    std::string line;
    while (std::getline(in, line)) {
        // Trim whitespace; skip blank trailing lines.
        auto begin = line.find_first_not_of(" \t\r");
        if (begin == std::string::npos) continue;
        auto end = line.find_last_not_of(" \t\r");
        std::string tok = line.substr(begin, end - begin + 1);
        try {
            size_t used = 0;
            double v = std::stod(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            times.push_back(v);
        } catch (const std::exception&) {
            throw FormatError(path + ": malformed exposure line '" + tok + "'");
        }
    }
    if (times.size() != 3)
        throw FormatError(path + ": expected 3 exposure lines, got " + std::to_string(times.size()));
    if (!(times[0] > 0 && times[0] < times[1] && times[1] < times[2]))
        throw ValidationError(path + ": exposure times must be positive and strictly ascending");
    return times;
}

template <typename T>
LdrImage<T> load_ldr(const std::string& path, double exposure_time) {
    if (!fs::exists(path)) throw ValidationError("missing file " + path);
    Tensor<float> raw = read_tns(path);
    if (raw.rank() != 3 || raw.extent(0) != 3)
        throw ValidationError(path + ": expected [3,H,W] tensor, got " + raw.shape().str());
    LdrImage<T> img{raw.template cast<T>(), exposure_time};
    img.validate(path);
    return img;
}

template <typename T>
ExposureStack<T> load_scene(const std::string& dir) {
    if (!fs::is_directory(dir)) throw ValidationError("missing scene directory " + dir);
    std::vector<double> times = read_exposures((fs::path(dir) / "exposures.txt").string());
    ExposureStack<T> stack;
    stack.scene_id = fs::path(dir).filename().string();
    stack.short_exp = load_ldr<T>((fs::path(dir) / "short.tns").string(), times[0]);
    stack.medium_exp = load_ldr<T>((fs::path(dir) / "medium.tns").string(), times[1]);
    stack.long_exp = load_ldr<T>((fs::path(dir) / "long.tns").string(), times[2]);
    fs::path gt_path = fs::path(dir) / "gt.pfm";
    if (fs::exists(gt_path)) {
        Tensor<float> gt = read_pfm_tensor(gt_path.string());
        stack.gt = HdrImage<T>{gt.template cast<T>()};
    }
    stack.validate();
    return stack;
}

template <typename T>
void save_scene(const std::string& dir, const ExposureStack<T>& stack) {
    fs::create_directories(dir);
    write_tns((fs::path(dir) / "short.tns").string(), stack.short_exp.pixels);
    write_tns((fs::path(dir) / "medium.tns").string(), stack.medium_exp.pixels);
    write_tns((fs::path(dir) / "long.tns").string(), stack.long_exp.pixels);
    {
        std::ofstream out(fs::path(dir) / "exposures.txt");
        if (!out) throw IoError("cannot write exposures.txt in " + dir);
        auto line = [&](double t) {
            std::ostringstream os;
            os << t;
            out << os.str() << "\n";
        };
        line(stack.short_exp.exposure_time);
        line(stack.medium_exp.exposure_time);
        line(stack.long_exp.exposure_time);
    }
    if (stack.gt) write_pfm_tensor((fs::path(dir) / "gt.pfm").string(), stack.gt->pixels);
}

// Scene directories under a dataset root, sorted by name for determinism.
inline std::vector<std::string> list_scene_dirs(const std::string& root) {
    if (!fs::is_directory(root)) throw ValidationError("missing data directory " + root);
    std::vector<std::string> dirs;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory() && fs::exists(entry.path() / "exposures.txt"))
            dirs.push_back(entry.path().string());
    std::sort(dirs.begin(), dirs.end());
    return dirs;
}

}  // namespace hdrvam
