#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "qtypemix/common.hpp"
#include "qtypemix/rng.hpp"

namespace qtm {

// Dense row-major tensor. Arbitrary rank is stored in `shape`, but all
// operations treat the data as a (rows x cols) matrix where cols is the
// trailing dimension and rows is everything else flattened. That is enough
// for every network in this project and keeps the engine small.
template <class T>
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), T(0));
    }
    Tensor(std::int64_t r, std::int64_t c) : Tensor(std::vector<std::int64_t>{r, c}) {}

    static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
        std::int64_t n = 1;
        for (auto d : s) {
            require<ShapeError>(d >= 0, "negative dimension in shape");
            n *= d;
        }
        return n;
    }

    static Tensor scalar(T v) {
        Tensor t(std::vector<std::int64_t>{1});
        t.data[0] = v;
        return t;
    }
    static Tensor row(std::initializer_list<T> vals) {
        Tensor t(std::vector<std::int64_t>{1, static_cast<std::int64_t>(vals.size())});
        std::size_t i = 0;
        for (T v : vals) t.data[i++] = v;
        return t;
    }
    static Tensor from_rows(std::int64_t r, std::int64_t c, std::initializer_list<T> vals) {
        Tensor t(r, c);
        require<ShapeError>(static_cast<std::int64_t>(vals.size()) == r * c,
                            "from_rows: got ", vals.size(), " values for ", r, "x", c);
        std::size_t i = 0;
        for (T v : vals) t.data[i++] = v;
        return t;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t cols() const { return shape.empty() ? 1 : shape.back(); }
    std::int64_t rows() const {
        std::int64_t c = cols();
        return c == 0 ? 0 : numel() / c;
    }

    T& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * cols() + c)]; }
    const T& at(std::int64_t r, std::int64_t c) const {
        return data[static_cast<std::size_t>(r * cols() + c)];
    }
    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(T(0)); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    // uniform in [-bound, bound]; draws are made in double for stream
    // compatibility across precisions
    void init_uniform(RngStream& rng, double bound) {
        for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

template <class T>
Tensor<T> from_vector(const std::vector<T>& v) {
    Tensor<T> t(std::vector<std::int64_t>{1, static_cast<std::int64_t>(v.size())});
    t.data = v;
    return t;
}

}  // namespace qtm
