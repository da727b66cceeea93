// Copyright (c) 2026 spprobe contributors.
// Licensed under the Apache License 2.0.

#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "spprobe/errors.hpp"

namespace spprobe {

/// Dense n-dimensional array of 64-bit floats in row-major order, with an
/// optional gradient buffer of the same shape. The gradient buffer is
/// allocated lazily the first time a backward rule touches the tensor.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad; // empty means "no gradient yet"

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(numel_of(shape), 0.0);
    }

    Tensor(std::vector<int> s, std::vector<double> values)
        : shape(std::move(s)), data(std::move(values)) {
        if (numel_of(shape) != data.size())
            throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape product " +
                             std::to_string(numel_of(shape)));
    }

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d < 0) throw ShapeError("tensor: negative extent");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::size_t numel() const { return data.size(); }

    int dim(std::size_t i) const { return shape.at(i); }

    bool has_grad() const { return grad.size() == data.size() && !data.empty(); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

} // namespace spprobe
