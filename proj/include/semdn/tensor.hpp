#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace semdn {

// Error taxonomy used across the library. Shape/config errors are caller
// mistakes; RuntimeError covers failures that appear mid-computation.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ValueError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class RuntimeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dense row-major tensor of doubles. Rank is dynamic; most of the code uses
// {C,H,W} feature maps, {M,N} matrices, {N} vectors and {1} scalars.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(checked_numel(shape), 0.0) {}
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (checked_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("Tensor: data size does not match shape");
    }

    static int64_t checked_numel(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d <= 0) throw ShapeError("Tensor: non-positive dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor reshaped(std::vector<int> s) const {
        if (checked_numel(s) != numel()) throw ShapeError("reshape: element count mismatch");
        Tensor t;
        t.shape = std::move(s);
        t.data = data;
        return t;
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double min() const {
        double m = data.empty() ? 0.0 : data[0];
        for (double v : data) m = std::min(m, v);
        return m;
    }
    double max() const {
        double m = data.empty() ? 0.0 : data[0];
        for (double v : data) m = std::max(m, v);
        return m;
    }

    double sum() const { return std::accumulate(data.begin(), data.end(), 0.0); }

    double dot(const Tensor& o) const {
        if (!same_shape(o)) throw ShapeError("dot: shape mismatch");
        double s = 0.0;
        for (size_t i = 0; i < data.size(); ++i) s += data[i] * o.data[i];
        return s;
    }

    double norm() const { return std::sqrt(dot(*this)); }

    std::string shape_str() const {
        std::ostringstream os;
        os << "{";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "}";
        return os.str();
    }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(who) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
}

}  // namespace semdn
