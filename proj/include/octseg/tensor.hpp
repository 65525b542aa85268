#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace octseg {

// Dense row-major tensor of doubles. Shapes are small (rank <= 5), data can be large.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        v.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            if (d < 0) throw std::invalid_argument("tensor dimension must be non-negative");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    double& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

    double& at2(int64_t i, int64_t j) { return v[static_cast<size_t>(i * shape[1] + j)]; }
    double at2(int64_t i, int64_t j) const { return v[static_cast<size_t>(i * shape[1] + j)]; }

    double& at3(int64_t i, int64_t j, int64_t k) {
        return v[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    double at3(int64_t i, int64_t j, int64_t k) const {
        return v[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }

    double& at4(int64_t i, int64_t j, int64_t k, int64_t l) {
        return v[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }
    double at4(int64_t i, int64_t j, int64_t k, int64_t l) const {
        return v[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
    }

    double& at5(int64_t i, int64_t j, int64_t k, int64_t l, int64_t m) {
        return v[static_cast<size_t>((((i * shape[1] + j) * shape[2] + k) * shape[3] + l) * shape[4] + m)];
    }
    double at5(int64_t i, int64_t j, int64_t k, int64_t l, int64_t m) const {
        return v[static_cast<size_t>((((i * shape[1] + j) * shape[2] + k) * shape[3] + l) * shape[4] + m)];
    }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

} // namespace octseg
