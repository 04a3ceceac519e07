#pragma once

#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "bmlm/errors.hpp"

namespace bmlm {

// Dense row-major tensor. Rank 0 (empty shape) is a scalar with one element;
// the library otherwise uses rank 1 (vectors) and rank 2 (matrices).
template <class S>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<S> data;

    Tensor() : data(1, S(0)) {}

    explicit Tensor(std::vector<std::size_t> shape_in)
        : shape(std::move(shape_in)), data(count(shape), S(0)) {}

    Tensor(std::vector<std::size_t> shape_in, std::vector<S> data_in)
        : shape(std::move(shape_in)), data(std::move(data_in)) {
        if (data.size() != count(shape)) {
            throw ShapeError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape element count " + std::to_string(count(shape)));
        }
    }

    static Tensor scalar(S v) {
        Tensor t;
        t.data[0] = v;
        return t;
    }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               [](std::size_t a, std::size_t b) { return a * b; });
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    std::size_t rows() const {
        if (rank() != 2) throw ShapeError("rows() requires a rank-2 tensor");
        return shape[0];
    }
    std::size_t cols() const {
        if (rank() != 2) throw ShapeError("cols() requires a rank-2 tensor");
        return shape[1];
    }

    S& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    const S& at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    S item() const {
        if (numel() != 1) throw ShapeError("item() requires a single-element tensor");
        return data[0];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

template <class S>
std::string shape_string(const Tensor<S>& t) {
    std::string s = "[";
    for (std::size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.shape[i]);
    }
    return s + "]";
}

}  // namespace bmlm
