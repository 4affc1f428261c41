#include "checks.hpp"

#include "drmo/autodiff.hpp"
#include "drmo/nn.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace drmo;
using ad::Var;

namespace {

Tensor tensor(Shape s, std::vector<double> v) { return Tensor(std::move(s), std::move(v)); }

}  // namespace

// --- gradient checks, one test per primitive -------------------------------------------------

class PrimitiveGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences)
{
    const auto cases = checks::primitive_cases();
    const auto& pc = cases.at(GetParam());
    for (int s = 0; s < 20; ++s) {
        nn::Rng rng = nn::Rng::derive(0x756e6974, static_cast<std::uint64_t>(s));
        const auto inputs = pc.inputs(rng);
        EXPECT_LT(checks::gradient_rel_error(pc.fn, inputs, rng), 1e-4) << pc.name << " seed " << s;
    }
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient,
                         ::testing::Range<std::size_t>(0, checks::primitive_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                             return checks::primitive_cases()[info.param].name;
                         });

// --- forward values ------------------------------------------------------------------------

TEST(Primitives, MatmulIdentity)
{
    const Var a = Var::constant(tensor({2, 2}, {1, 2, 3, 4}));
    const Var eye = Var::constant(tensor({2, 2}, {1, 0, 0, 1}));
    EXPECT_EQ(ad::matmul(a, eye).value(), a.value());
}

TEST(Primitives, ConvOfConstantImageWithOnesKernel)
{
    const double c = 0.37;
    const Var x = Var::constant(Tensor({1, 1, 5, 5}, c));
    const Var w = Var::constant(Tensor({1, 1, 3, 3}, 1.0));
    const Tensor y = ad::conv2d(x, w, Var(), 1, 0).value();
    ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
    for (double v : y.values()) EXPECT_NEAR(v, 9.0 * c, 1e-15);
}

TEST(Primitives, SoftmaxOfZeros)
{
    const Tensor y = ad::softmax(Var::constant(Tensor({1, 2})), 1).value();
    EXPECT_EQ(y[0], 0.5);
    EXPECT_EQ(y[1], 0.5);
}

TEST(Primitives, ConvAndUpsampleShapeFormula)
{
    for (std::size_t kernel : {1, 3}) {
        for (std::size_t stride : {1, 2}) {
            for (std::size_t pad : {0, 1}) {
                for (std::size_t in = kernel; in <= 9; ++in) {
                    const std::size_t expect = (in + 2 * pad - kernel) / stride + 1;
                    EXPECT_EQ(ad::conv_out_size(in, kernel, stride, pad), expect);
                    const Var x = Var::constant(Tensor({1, 2, in, in + 1}, 1.0));
                    const Var w = Var::constant(Tensor({3, 2, kernel, kernel}, 1.0));
                    const Tensor y = ad::conv2d(x, w, Var(), stride, pad).value();
                    EXPECT_EQ(y.shape(), (Shape{1, 3, expect, (in + 1 + 2 * pad - kernel) / stride + 1}));
                }
            }
        }
    }
    for (std::size_t f = 1; f <= 3; ++f) {
        const Tensor y = ad::upsample_nearest(Var::constant(Tensor({2, 3, 4, 5}, 1.0)), f).value();
        EXPECT_EQ(y.shape(), (Shape{2, 3, 4 * f, 5 * f}));
    }
}

TEST(Primitives, ShapeMismatchNamesOperationAndShapes)
{
    const Var a = Var::constant(Tensor({2, 3}));
    const Var b = Var::constant(Tensor({4, 3}));
    try {
        (void)ad::add(a, b);
        FAIL();
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("add"), std::string::npos);
        EXPECT_NE(msg.find("[2,3]"), std::string::npos);
        EXPECT_NE(msg.find("[4,3]"), std::string::npos);
    }
    EXPECT_THROW(ad::matmul(a, b), ShapeError);
    EXPECT_THROW(ad::conv2d(Var::constant(Tensor({1, 2, 4, 4})), Var::constant(Tensor({1, 3, 3, 3})), Var(), 1, 0),
                 ShapeError);
}

TEST(Primitives, BroadcastShape)
{
    EXPECT_EQ(ad::broadcast_shape("t", {2, 3, 4}, {3, 1}), (Shape{2, 3, 4}));
    EXPECT_EQ(ad::broadcast_shape("t", {4, 1}, {1, 5}), (Shape{4, 5}));
    EXPECT_THROW(ad::broadcast_shape("t", {2, 3}, {4}), ShapeError);
}

// --- backward ----------------------------------------------------------------------------

TEST(Backward, SumOfSquares)
{
    const Var x = Var::leaf(tensor({3}, {1, 2, 3}));
    ad::Tape tape;
    {
        ad::RecordScope scope(tape);
        tape.backward(ad::sum(ad::square(x)));
    }
    EXPECT_EQ(x.grad(), tensor({3}, {2, 4, 6}));
}

TEST(Backward, SumOfProductWrtLeftFactor)
{
    // d/dA sum(A B) = 1 B^T: every row equals the row sums of B.
    nn::Rng rng(5);
    const Tensor a = rng.normal_tensor({3, 4}), b = rng.normal_tensor({4, 2});
    const Var va = Var::leaf(a);
    ad::Tape tape;
    {
        ad::RecordScope scope(tape);
        tape.backward(ad::sum(ad::matmul(va, Var::constant(b))));
    }
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(va.grad().at({i, k}), b.at({k, 0}) + b.at({k, 1}), 1e-15);

    // Independent central-difference oracle, step 1e-5.
    const double h = 1e-5;
    for (std::size_t i = 0; i < a.size(); ++i) {
        Tensor up = a, down = a;
        up[i] += h;
        down[i] -= h;
        const double fd = (matmul(up, b).sum() - matmul(down, b).sum()) / (2.0 * h);
        EXPECT_LT(std::abs(fd - va.grad()[i]) / std::abs(va.grad()[i]), 1e-6);
    }
}

TEST(Backward, DetachedParameterGetsZeroGradient)
{
    const auto p = ad::make_param("p", Tensor({2}, 1.0));
    const auto q = ad::make_param("q", Tensor({2}, 2.0));
    ad::Tape tape;
    {
        ad::RecordScope scope(tape);
        (void)ad::mul(Var::of(p), Var::of(p));
        tape.backward(ad::sum(ad::square(Var::of(q))));
    }
    EXPECT_EQ(p->grad(), Tensor({2}, 0.0));
    EXPECT_EQ(q->grad(), Tensor({2}, 4.0));
}

TEST(Backward, RejectsNonScalarLossAndSecondCall)
{
    const Var x = Var::leaf(Tensor({2}, 1.0));
    ad::Tape tape;
    ad::RecordScope scope(tape);
    const Var y = ad::square(x);
    EXPECT_THROW(tape.backward(y), ShapeError);
    tape.backward(ad::sum(y));
    EXPECT_TRUE(tape.consumed());
    EXPECT_THROW(tape.backward(ad::sum(y)), std::logic_error);
}

TEST(Backward, VisitsEachRecordOnceNewestFirst)
{
    std::vector<int> order;
    const Var x = Var::leaf(Tensor({1}, 1.0));
    ad::Tape tape;
    {
        ad::RecordScope scope(tape);
        Var y = x;
        for (int k = 0; k < 5; ++k) {
            y = ad::make_result(y.value(), {y.node()}, [k, &order](ad::Node& n) {
                order.push_back(k);
                ad::grad_buffer(*n.inputs[0]) += n.grad;
            });
        }
        EXPECT_EQ(tape.size(), 5u);
        tape.backward(ad::sum(y));
    }
    EXPECT_EQ(order, (std::vector<int>{4, 3, 2, 1, 0}));
    EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Backward, NothingRecordedOutsideScope)
{
    ad::Tape tape;
    const Var x = Var::leaf(Tensor({2}, 1.0));
    (void)ad::square(x);
    EXPECT_EQ(tape.size(), 0u);
    EXPECT_EQ(ad::active_tape(), nullptr);
    {
        ad::RecordScope scope(tape);
        EXPECT_EQ(ad::active_tape(), &tape);
    }
    EXPECT_EQ(ad::active_tape(), nullptr);
}

TEST(Backward, FrozenParameterReceivesNoGradient)
{
    const auto p = ad::make_param("p", Tensor({2}, 3.0));
    p->set_frozen(true);
    ad::Tape tape;
    {
        ad::RecordScope scope(tape);
        const Var x = Var::leaf(Tensor({2}, 1.0));
        tape.backward(ad::sum(ad::mul(Var::of(p), x)));
    }
    EXPECT_EQ(p->grad(), Tensor({2}, 0.0));
}

TEST(Parameter, GradientShapeAndReset)
{
    const auto p = ad::make_param("w", Tensor({3, 2}, 1.0));
    EXPECT_EQ(p->grad().shape(), p->value().shape());
    p->grad().fill(5.0);
    p->zero_grad();
    EXPECT_EQ(p->grad(), Tensor({3, 2}, 0.0));
    EXPECT_NE(p->id(), ad::make_param("w", Tensor({1}))->id());
}

TEST(Primitives, DeterministicAcrossRuns)
{
    auto run = [] {
        nn::Rng rng(11);
        const Var x = Var::leaf(rng.normal_tensor({2, 3, 6, 6}));
        const Var w = Var::leaf(rng.normal_tensor({4, 3, 3, 3}));
        ad::Tape tape;
        ad::RecordScope scope(tape);
        const Var y = ad::silu(ad::conv2d(x, w, Var(), 1, 1));
        tape.backward(ad::mean(ad::softmax(y, 1)));
        return std::make_pair(y.value(), w.grad());
    };
    EXPECT_EQ(run(), run());
}
