#include "drmo/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <cstring>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace drmo {

std::size_t shape_numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

ShapeError shape_error(const std::string& op, const Shape& a, const Shape& b)
{
    return ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values))
{
    if (data_.size() != shape_numel(shape_)) {
        throw ShapeError("Tensor: " + std::to_string(data_.size()) + " values for shape " + shape_str(shape_));
    }
}

std::size_t Tensor::dim(std::size_t axis) const
{
    if (axis >= shape_.size()) {
        throw ShapeError("Tensor::dim: axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    }
    return shape_[axis];
}

std::size_t Tensor::flat_index(std::initializer_list<std::size_t> index) const
{
    if (index.size() != shape_.size()) {
        throw ShapeError("Tensor::at: index rank " + std::to_string(index.size()) + " for shape " + shape_str(shape_));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
        if (i >= shape_[axis]) throw std::out_of_range("Tensor::at: index out of range");
        flat = flat * shape_[axis] + i;
        ++axis;
    }
    return flat;
}

double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[flat_index(index)]; }
double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[flat_index(index)]; }

double Tensor::item() const
{
    if (data_.size() != 1) throw ShapeError("Tensor::item: tensor of shape " + shape_str(shape_) + " is not a scalar");
    return data_[0];
}

Tensor Tensor::reshape(Shape shape) const
{
    if (shape_numel(shape) != data_.size()) throw shape_error("reshape", shape_, shape);
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept
{
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor& Tensor::operator+=(const Tensor& other)
{
    if (other.shape_ != shape_) throw shape_error("add", shape_, other.shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& other)
{
    if (other.shape_ != shape_) throw shape_error("sub", shape_, other.shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double s)
{
    for (double& v : data_) v *= s;
    return *this;
}

void Tensor::add_scaled(const Tensor& other, double s)
{
    if (other.shape_ != shape_) throw shape_error("add_scaled", shape_, other.shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * other.data_[i];
}

double Tensor::sum() const noexcept
{
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

double Tensor::abs_sum() const noexcept
{
    double s = 0.0;
    for (double v : data_) s += std::abs(v);
    return s;
}

double Tensor::max_abs_diff(const Tensor& other) const
{
    if (other.shape_ != shape_) throw shape_error("max_abs_diff", shape_, other.shape_);
    double m = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i) m = std::max(m, std::abs(data_[i] - other.data_[i]));
    return m;
}

Tensor operator+(const Tensor& a, const Tensor& b)
{
    Tensor out = a;
    out += b;
    return out;
}

Tensor operator-(const Tensor& a, const Tensor& b)
{
    Tensor out = a;
    out -= b;
    return out;
}

Tensor operator*(const Tensor& a, double s)
{
    Tensor out = a;
    out *= s;
    return out;
}

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c)
{
    const auto M = static_cast<Eigen::Index>(m);
    const auto N = static_cast<Eigen::Index>(n);
    const auto K = static_cast<Eigen::Index>(k);
    Map C(c, M, N);
    if (beta == 0.0) {
        C.setZero();
    } else if (beta != 1.0) {
        C *= beta;
    }
    if (m == 0 || n == 0 || k == 0) return;
    // op(A) is M x K; stored as K x M when transposed.
    ConstMap A(a, trans_a ? K : M, trans_a ? M : K);
    ConstMap B(b, trans_b ? N : K, trans_b ? K : N);
    if (!trans_a && !trans_b) {
        C.noalias() += alpha * A * B;
    } else if (trans_a && !trans_b) {
        C.noalias() += alpha * A.transpose() * B;
    } else if (!trans_a && trans_b) {
        C.noalias() += alpha * A * B.transpose();
    } else {
        C.noalias() += alpha * A.transpose() * B.transpose();
    }
}

Tensor matmul(const Tensor& a, const Tensor& b)
{
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) throw shape_error("matmul", a.shape(), b.shape());
    Tensor out({a.dim(0), b.dim(1)});
    gemm(false, false, a.dim(0), b.dim(1), a.dim(1), 1.0, a.data(), b.data(), 0.0, out.data());
    return out;
}

Tensor transpose2d(const Tensor& a)
{
    if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
    const std::size_t r = a.dim(0);
    const std::size_t c = a.dim(1);
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
    return out;
}

// --- DRT1 -------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'R', 'T', '1'};

template <typename T>
void write_le(std::ostream& os, T value)
{
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& is)
{
    unsigned char bytes[sizeof(T)];
    is.read(reinterpret_cast<char*>(bytes), sizeof(T));
    if (!is) throw std::runtime_error("DRT1: truncated stream");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

}  // namespace

void write_drt(std::ostream& os, const Tensor& t)
{
    if (t.rank() > 255) throw ShapeError("DRT1: rank too large");
    os.write(kMagic, 4);
    write_le<std::uint8_t>(os, 0);
    write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) {
        if (d > 0xffffffffu) throw ShapeError("DRT1: dimension exceeds u32");
        write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    }
    for (double v : t.values()) write_le<double>(os, v);
}

Tensor read_drt(std::istream& is)
{
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("DRT1: bad magic");
    const auto dtype = read_le<std::uint8_t>(is);
    if (dtype != 0) throw std::runtime_error("DRT1: unsupported dtype code " + std::to_string(dtype));
    const auto rank = read_le<std::uint8_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = read_le<std::uint32_t>(is);
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = read_le<double>(is);
    return Tensor(std::move(shape), std::move(values));
}

void save_drt(const Tensor& t, const std::filesystem::path& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_drt(os, t);
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

Tensor load_drt(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    return read_drt(is);
}

void tune_allocator()
{
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace drmo
