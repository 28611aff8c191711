#include "keytailor/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "keytailor/errors.hpp"

namespace kt {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t e : s) n *= e;
    return n;
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != data.size())
        throw shape_error("tensor: shape " + shape_str(shape) + " does not match data length " +
                          std::to_string(data.size()));
}

Tensor Tensor::full(Shape s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

Tensor Tensor::scalar(double v) {
    Tensor t(Shape{1});
    t.data[0] = v;
    return t;
}

Tensor Tensor::gaussian(Shape s, SeededRng& rng, double sigma) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = rng.gaussian() * sigma;
    return t;
}

Tensor Tensor::uniform(Shape s, SeededRng& rng, double lo, double hi) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = rng.uniform(lo, hi);
    return t;
}

bool Tensor::all_finite() const {
    for (double x : data)
        if (!std::isfinite(x)) return false;
    return true;
}

void Tensor::quantize_f32() {
    for (double& x : data) x = static_cast<double>(static_cast<float>(x));
}

double Tensor::sum() const {
    double s = 0.0;
    for (double x : data) s += x;
    return s;
}

double Tensor::min() const {
    double m = std::numeric_limits<double>::infinity();
    for (double x : data) m = std::min(m, x);
    return m;
}

double Tensor::max() const {
    double m = -std::numeric_limits<double>::infinity();
    for (double x : data) m = std::max(m, x);
    return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (size_t i = 0; i < a.data.size(); ++i)
        if (a.data[i] != b.data[i]) return false;
    return true;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape)
        throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                          shape_str(b.shape));
}

uint64_t checksum_f32(const Tensor& t) {
    uint64_t h = 14695981039346656037ull;
    for (double d : t.data) {
        float f = static_cast<float>(d);
        uint32_t bits;
        static_assert(sizeof(bits) == sizeof(f));
        std::memcpy(&bits, &f, sizeof(bits));
        for (int i = 0; i < 4; ++i) {
            h ^= (bits >> (8 * i)) & 0xffu;
            h *= 1099511628211ull;
        }
    }
    return h;
}

}  // namespace kt
