#include "drmo/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

using namespace drmo;

TEST(Tensor, ElementCountIsProductOfDims)
{
    for (const Shape& s : {Shape{}, Shape{3}, Shape{2, 3}, Shape{2, 3, 4}, Shape{1, 1, 5, 1}}) {
        const Tensor t(s, 1.5);
        EXPECT_EQ(t.size(), shape_numel(s));
        EXPECT_EQ(t.rank(), s.size());
    }
}

TEST(Tensor, ValueCountMustMatchShape)
{
    EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1.0, 2.0, 3.0}), ShapeError);
}

TEST(Tensor, MultiIndexIsRowMajor)
{
    Tensor t({2, 3}, {0, 1, 2, 3, 4, 5});
    EXPECT_EQ(t.at({1, 2}), 5.0);
    EXPECT_EQ(t.at({0, 1}), 1.0);
    t.at({1, 0}) = 9.0;
    EXPECT_EQ(t[3], 9.0);
    EXPECT_THROW(t.at({2, 0}), std::out_of_range);
}

TEST(Tensor, ArithmeticRejectsShapeMismatchNamingBothShapes)
{
    const Tensor a({2, 3}), b({3, 2});
    try {
        (void)(a + b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[3,2]"), std::string::npos) << msg;
    }
}

TEST(Tensor, MatmulByIdentity)
{
    const Tensor a({2, 2}, {1, 2, 3, 4});
    const Tensor eye({2, 2}, {1, 0, 0, 1});
    EXPECT_EQ(matmul(a, eye), a);
}

TEST(Tensor, MatmulMatchesNaiveProduct)
{
    Tensor a({3, 4}), b({4, 5});
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::sin(1.0 + i);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = std::cos(2.0 * i);
    const Tensor c = matmul(a, b);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 4; ++k) s += a.at({i, k}) * b.at({k, j});
            EXPECT_NEAR(c.at({i, j}), s, 1e-14);
        }
    }
    EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Tensor, GemmTransposeFlags)
{
    const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    const Tensor at = transpose2d(a);
    const Tensor expect = matmul(a, transpose2d(a));
    Tensor c({2, 2});
    gemm(false, true, 2, 2, 3, 1.0, a.data(), a.data(), 0.0, c.data());
    EXPECT_EQ(c, expect);
    gemm(true, false, 2, 2, 3, 1.0, at.data(), at.data(), 0.0, c.data());
    EXPECT_EQ(c, expect);
    gemm(true, false, 2, 2, 3, 2.0, at.data(), at.data(), -1.0, c.data());
    EXPECT_EQ(c, expect);
}

TEST(Tensor, FiniteCheck)
{
    Tensor t({3}, 1.0);
    EXPECT_TRUE(t.all_finite());
    t[1] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_FALSE(t.all_finite());
}

TEST(Drt, RoundTripIsBitExact)
{
    Tensor t({2, 3, 4});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::exp(0.1 * i) - 3.0;
    std::stringstream ss;
    write_drt(ss, t);
    const std::string bytes = ss.str();
    ASSERT_EQ(bytes.substr(0, 4), "DRT1");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 0u);
    EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 3u);
    EXPECT_EQ(bytes.size(), 6 + 3 * 4 + t.size() * 8);
    // dims are little-endian u32
    EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 2u);
    EXPECT_EQ(static_cast<unsigned char>(bytes[10]), 3u);
    EXPECT_EQ(read_drt(ss), t);
}

TEST(Drt, ScalarAndFileRoundTrip)
{
    const auto path = std::filesystem::temp_directory_path() / "drmo_unit_scalar.drt";
    save_drt(Tensor::scalar(-2.5), path);
    EXPECT_EQ(load_drt(path).item(), -2.5);
    std::filesystem::remove(path);
}

TEST(Drt, RejectsBadMagic)
{
    std::stringstream ss("DRT2\0\0", std::ios::in | std::ios::out | std::ios::binary);
    EXPECT_THROW(read_drt(ss), std::runtime_error);
}
