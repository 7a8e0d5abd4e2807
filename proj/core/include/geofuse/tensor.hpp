#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace geofuse {

/// Dense row-major tensor of 64-bit floats. Shapes are lists of positive
/// extents; rank 0 is not used, scalars are shape {1}.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);  // zero-filled
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double value);
    static Tensor ones(std::vector<int> shape) { return full(std::move(shape), 1.0); }
    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    int rank() const { return static_cast<int>(shape_.size()); }
    int extent(int axis) const { return shape_[static_cast<size_t>(axis)]; }
    int size() const { return static_cast<int>(data_.size()); }
    const std::vector<int>& shape() const { return shape_; }

    // rank-2 helpers
    int rows() const { return shape_[0]; }
    int cols() const { return shape_[1]; }

    double& at(int flat) { return data_[static_cast<size_t>(flat)]; }
    double at(int flat) const { return data_[static_cast<size_t>(flat)]; }
    double& at2(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
    double at2(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    double* ptr() { return data_.data(); }
    const double* ptr() const { return data_.data(); }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    bool bit_equal(const Tensor& other) const;

    void fill(double value);

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

std::string shape_str(const std::vector<int>& shape);

/// Dimension mismatch; message names both shapes.
[[noreturn]] void throw_dim_error(const std::string& op, const std::vector<int>& a,
                                  const std::vector<int>& b);
[[noreturn]] void throw_contract_error(const std::string& what);

/// Stability and gradient-check constants shared across the pipelines.
struct NumericsConfig {
    double epsilon = 1e-6;     // additive guard in min-max score normalization
    double ln_epsilon = 1e-5;  // variance guard in layer norm
    double fd_step = 1e-4;     // central finite-difference step
};

// Tensor snapshot format: rank as u32 LE, extents as u32 LE each, then
// IEEE f64 LE values row-major.
void save_tensor(const Tensor& t, std::ostream& out);
Tensor load_tensor(std::istream& in);
void save_tensor_file(const Tensor& t, const std::string& path);
Tensor load_tensor_file(const std::string& path);

}  // namespace geofuse
