// Copyright 2026 The hdrvam Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace hdrvam {

// ---------------------------------------------------------------------------
// Errors. what() always starts with a stable "<kind>:" prefix so callers
// (and the CLI) can match on it.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& msg)
        : std::runtime_error(kind + ": " + msg), kind_(std::move(kind)) {}
    const std::string& kind() const { return kind_; }

private:
    std::string kind_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error("shape-mismatch", msg) {}
};
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error("format-error", msg) {}
};
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io-error", msg) {}
};
struct ValidationError : Error {
    explicit ValidationError(const std::string& msg) : Error("validation-error", msg) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config-error", msg) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error("numeric-error", msg) {}
};

// ---------------------------------------------------------------------------
// Shape: rank 1..4, dense row-major, last axis fastest. Rank-4 tensors are
// interpreted as [batch, channels, height, width].
// ---------------------------------------------------------------------------

class Shape {
public:
    Shape() : rank_(0), ext_{0, 0, 0, 0} {}
    Shape(std::initializer_list<int64_t> ext) {
        if (ext.size() < 1 || ext.size() > 4)
            throw ShapeError("rank must be in [1,4], got " + std::to_string(ext.size()));
        rank_ = static_cast<int>(ext.size());
        int i = 0;
        for (int64_t e : ext) {
            if (e <= 0) throw ShapeError("extent of axis " + std::to_string(i) + " must be positive");
            ext_[i++] = e;
        }
        for (; i < 4; ++i) ext_[i] = 1;
    }
    static Shape of(const std::vector<int64_t>& ext) {
        if (ext.size() < 1 || ext.size() > 4)
            throw ShapeError("rank must be in [1,4], got " + std::to_string(ext.size()));
        Shape s;
        s.rank_ = static_cast<int>(ext.size());
        for (int i = 0; i < s.rank_; ++i) {
            if (ext[i] <= 0) throw ShapeError("extent of axis " + std::to_string(i) + " must be positive");
            s.ext_[i] = ext[i];
        }
        for (int i = s.rank_; i < 4; ++i) s.ext_[i] = 1;
        return s;
    }

    int rank() const { return rank_; }
    int64_t extent(int axis) const { return ext_[axis]; }
    int64_t operator[](int axis) const { return ext_[axis]; }
    int64_t count() const {
        int64_t n = 1;
        for (int i = 0; i < rank_; ++i) n *= ext_[i];
        return n;
    }
    bool operator==(const Shape& o) const { return rank_ == o.rank_ && ext_ == o.ext_; }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::ostringstream os;
        os << '[';
        for (int i = 0; i < rank_; ++i) os << (i ? "," : "") << ext_[i];
        os << ']';
        return os.str();
    }

private:
    int rank_;
    std::array<int64_t, 4> ext_;
};

// ---------------------------------------------------------------------------
// Tensor: contiguous dense array of real32 or real64 values.
// ---------------------------------------------------------------------------

template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>);

public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(const Shape& shape) : shape_(shape), data_(static_cast<size_t>(shape.count()), T(0)) {}
    Tensor(const Shape& shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != shape_.count())
            throw ShapeError("data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_.str());
    }

    static Tensor zeros(const Shape& shape) { return Tensor(shape); }
    static Tensor full(const Shape& shape, T v) {
        Tensor t(shape);
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return shape_.rank(); }
    int64_t extent(int axis) const { return shape_.extent(axis); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // Rank-4 [n,c,h,w] accessor; lower ranks use the flat operator[].
    T& at(int64_t n, int64_t c, int64_t h, int64_t w) {
        return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    const T& at(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    // Rank-3 [c,h,w] accessor.
    T& at(int64_t c, int64_t h, int64_t w) {
        return data_[static_cast<size_t>((c * shape_[1] + h) * shape_[2] + w)];
    }
    const T& at(int64_t c, int64_t h, int64_t w) const {
        return data_[static_cast<size_t>((c * shape_[1] + h) * shape_[2] + w)];
    }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": " + a.shape().str() + " vs " + b.shape().str());
}

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 output is fully specified by the standard;
// the distribution helpers below are hand-rolled because the std::*
// distributions are not bit-reproducible across library implementations.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0,n). Modulo bias is below 2^-32 for the small n
    // used here.
    uint64_t uniform_int(uint64_t n) { return eng_() % n; }

private:
    std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// Minimal fork-join helper for the optional data-parallel mode. threads <= 1
// runs inline (reference mode).
// ---------------------------------------------------------------------------

template <typename Fn>
void parallel_for(int64_t n, int threads, Fn&& fn) {
    if (threads <= 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    int workers = static_cast<int>(std::min<int64_t>(threads, n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    std::atomic<int64_t> next{0};
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                int64_t i = next.fetch_add(1);
                if (i >= n) return;
                fn(i);
            }
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace hdrvam
