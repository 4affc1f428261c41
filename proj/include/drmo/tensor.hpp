#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace drmo {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Raised for any operand-shape incompatibility. Message names the operation and shapes.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

ShapeError shape_error(const std::string& op, const Shape& a, const Shape& b);

// Dense row-major array of doubles.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Row-major multi-index access; bounds are checked.
    double at(std::initializer_list<std::size_t> index) const;
    double& at(std::initializer_list<std::size_t> index);

    double item() const;

    Tensor reshape(Shape shape) const;
    void fill(double v);
    bool all_finite() const noexcept;

    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(double s);
    // this += s * other
    void add_scaled(const Tensor& other, double s);

    double sum() const noexcept;
    double abs_sum() const noexcept;
    double max_abs_diff(const Tensor& other) const;

    bool operator==(const Tensor& other) const = default;

private:
    std::size_t flat_index(std::initializer_list<std::size_t> index) const;

    Shape shape_;
    std::vector<double> data_;
};

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, double s);

// Dense matrix product for rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);

// General matrix multiply on raw row-major buffers:
//   C[M,N] = alpha * op(A) * op(B) + beta * C
// op(A) is M x K, op(B) is K x N.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c);

// Keeps large buffers on the heap instead of fresh memory mappings (glibc only; a
// no-op elsewhere). Allocation-heavy loops over N x N matrices otherwise pay a page
// fault for every touched page. Call once at program start.
void tune_allocator();

// --- DRT1 tensor files -------------------------------------------------------
//   "DRT1" | u8 dtype (0 = f64) | u8 rank | rank x u32 LE dims | LE payload
void write_drt(std::ostream& os, const Tensor& t);
Tensor read_drt(std::istream& is);
void save_drt(const Tensor& t, const std::filesystem::path& path);
Tensor load_drt(const std::filesystem::path& path);

}  // namespace drmo
