#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "keytailor/rng.hpp"

namespace kt {

using Shape = std::vector<size_t>;

std::string shape_str(const Shape& s);
size_t shape_numel(const Shape& s);

/// Dense row-major tensor. Values are held in f64 internally; persistence
/// (KTSR) stores f32, and `quantize_f32` rounds in-memory data to that grid.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0) {}
    Tensor(Shape s, std::vector<double> d);

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double v);
    static Tensor scalar(double v);
    static Tensor gaussian(Shape s, SeededRng& rng, double sigma = 1.0);
    static Tensor uniform(Shape s, SeededRng& rng, double lo = 0.0, double hi = 1.0);

    size_t size() const { return data.size(); }
    size_t ndim() const { return shape.size(); }
    size_t extent(size_t i) const { return shape[i]; }

    double& operator[](size_t i) { return data[i]; }
    double operator[](size_t i) const { return data[i]; }

    // Convenience indexers for the common ranks.
    double& at2(size_t i, size_t j) { return data[i * shape[1] + j]; }
    double at2(size_t i, size_t j) const { return data[i * shape[1] + j]; }
    double& at3(size_t c, size_t y, size_t x) { return data[(c * shape[1] + y) * shape[2] + x]; }
    double at3(size_t c, size_t y, size_t x) const { return data[(c * shape[1] + y) * shape[2] + x]; }
    double& at4(size_t c, size_t t, size_t y, size_t x) {
        return data[((c * shape[1] + t) * shape[2] + y) * shape[3] + x];
    }
    double at4(size_t c, size_t t, size_t y, size_t x) const {
        return data[((c * shape[1] + t) * shape[2] + y) * shape[3] + x];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;

    /// Round every value through IEEE f32, so memory matches KTSR exactly.
    void quantize_f32();

    double sum() const;
    double min() const;
    double max() const;
};

bool bit_equal(const Tensor& a, const Tensor& b);
void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

/// FNV-1a over the f32 image of the tensor; used for freeze checks.
uint64_t checksum_f32(const Tensor& t);

}  // namespace kt
