#include "drmo/metrics.hpp"
#include "drmo/video.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace drmo;
using namespace drmo::video;

namespace fs = std::filesystem;

namespace {

double consecutive_ssim(const VideoClip& clip)
{
    double s = 0.0;
    for (std::size_t k = 1; k < clip.frames.size(); ++k) s += metrics::ssim(clip.frames[k - 1], clip.frames[k]);
    return s / static_cast<double>(clip.frames.size() - 1);
}

MotionSpec single_square()
{
    MotionSpec spec;
    ObjectSpec o;
    o.size = 8;
    o.vx = 1.0;
    spec.objects.push_back(o);
    return spec;
}

}  // namespace

TEST(Clip, ConstantVelocitySquare)
{
    const VideoClip clip = generate_clip(single_square(), 5, 1);
    ASSERT_EQ(clip.frames.size(), 5u);
    for (int k = 0; k < 5; ++k) {
        EXPECT_EQ(clip.positions[k][0][0], k);
        EXPECT_EQ(clip.positions[k][0][1], 0);
        // the square's red channel covers columns k..k+7 of row 0
        EXPECT_EQ(clip.frames[k].at({0, 0, static_cast<std::size_t>(k)}), 1.0);
        EXPECT_EQ(clip.frames[k].at({1, 0, static_cast<std::size_t>(k)}), 0.0);
    }
}

TEST(Clip, ZeroJitterDisplacementIsConstant)
{
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const MotionSpec spec = random_spec(seed, 0.0);
        const VideoClip clip = generate_clip(spec, 6, seed);
        for (std::size_t o = 0; o < spec.objects.size(); ++o) {
            const auto& ob = spec.objects[o];
            // Only check objects that stay clear of the boundary (no reflection).
            const double x_end = ob.x + 5 * ob.vx, y_end = ob.y + 5 * ob.vy;
            if (x_end < 0 || y_end < 0 || x_end + ob.size > spec.width || y_end + ob.size > spec.height) continue;
            for (int k = 2; k < 6; ++k) {
                for (int axis = 0; axis < 2; ++axis) {
                    const int d1 = clip.positions[k][o][axis] - clip.positions[k - 1][o][axis];
                    const int d0 = clip.positions[k - 1][o][axis] - clip.positions[k - 2][o][axis];
                    EXPECT_LE(std::abs(d1 - d0), 1) << "rounding of a constant velocity";
                }
            }
        }
    }
}

TEST(Clip, ValuesInRangeAndObjectsInsideCanvas)
{
    for (double jitter : {0.0, 3.0, 25.0}) {
        const MotionSpec spec = random_spec(4, jitter);
        const VideoClip clip = generate_clip(spec, 16, 4);
        for (const auto& f : clip.frames) {
            for (double v : f.values()) {
                EXPECT_GE(v, 0.0);
                EXPECT_LE(v, 1.0);
            }
        }
        for (const auto& frame_pos : clip.positions) {
            for (std::size_t o = 0; o < frame_pos.size(); ++o) {
                EXPECT_GE(frame_pos[o][0], 0);
                EXPECT_GE(frame_pos[o][1], 0);
                EXPECT_LE(frame_pos[o][0] + spec.objects[o].size, spec.width);
                EXPECT_LE(frame_pos[o][1] + spec.objects[o].size, spec.height);
            }
        }
    }
}

TEST(Clip, DeterministicUnderSeed)
{
    const MotionSpec spec = random_spec(9, 2.0);
    EXPECT_EQ(generate_clip(spec, 8, 3).frames, generate_clip(spec, 8, 3).frames);
    EXPECT_NE(generate_clip(spec, 8, 3).frames, generate_clip(spec, 8, 4).frames);
    // jitter does not change the scene drawn from the seed
    EXPECT_EQ(random_spec(9, 0.0).objects.size(), spec.objects.size());
    EXPECT_EQ(random_spec(9, 0.0).objects[0].x, spec.objects[0].x);
}

TEST(Clip, RejectsBadArguments)
{
    MotionSpec spec = single_square();
    EXPECT_THROW(generate_clip(spec, 1, 0), std::invalid_argument);
    spec.objects[0].size = 80;
    EXPECT_THROW(generate_clip(spec, 4, 0), std::invalid_argument);
    spec.objects[0].size = 8;
    spec.jitter = -1.0;
    EXPECT_THROW(generate_clip(spec, 4, 0), std::invalid_argument);
}

TEST(Clip, JitterLowersConsecutiveSimilarity)
{
    const std::uint64_t seed = 5;
    const VideoClip calm = generate_clip(random_spec(seed, 0.0), 16, seed);
    const VideoClip shaky = generate_clip(random_spec(seed, 3.0), 16, seed);
    EXPECT_LT(consecutive_ssim(shaky), consecutive_ssim(calm));
}

TEST(Clip, ConsistencyKnobIsMonotone)
{
    std::vector<double> mean;
    for (double jitter : {0.0, 1.0, 2.0, 3.0}) {
        double s = 0.0;
        for (std::uint64_t seed = 0; seed < 12; ++seed) s += consecutive_ssim(generate_clip(random_spec(seed, jitter), 16, seed));
        mean.push_back(s / 12.0);
    }
    for (std::size_t k = 1; k < mean.size(); ++k) EXPECT_LE(mean[k], mean[k - 1]) << "jitter level " << k;
}

// --- codec --------------------------------------------------------------------------

TEST(Codec, LiftHasOrthonormalColumns)
{
    const auto& q = LatentCodec::lift();
    for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) {
            double dot = 0.0;
            for (int r = 0; r < 4; ++r) dot += q[r][a] * q[r][b];
            EXPECT_NEAR(dot, a == b ? 1.0 : 0.0, 1e-15);
        }
    }
}

TEST(Codec, ConstantWhiteRoundTrip)
{
    const LatentCodec codec(4);
    const Tensor white({3, 16, 16}, 1.0);
    const Tensor lat = codec.encode_frame(white);
    EXPECT_EQ(lat.shape(), (Shape{4, 4, 4}));
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t i = 1; i < 16; ++i) EXPECT_EQ(lat[c * 16 + i], lat[c * 16]);
    EXPECT_LE(codec.decode_frame(lat).max_abs_diff(white), 1e-12);
}

TEST(Codec, BlockConstantCheckerboardRoundTrip)
{
    const LatentCodec codec(4);
    Tensor img({3, 32, 32});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < 32; ++y)
            for (std::size_t x = 0; x < 32; ++x)
                img.at({c, y, x}) = ((y / 4 + x / 4) % 2 == 0) ? 0.1 + 0.3 * c : 0.9 - 0.2 * c;
    EXPECT_LE(codec.decode_frame(codec.encode_frame(img)).max_abs_diff(img), 1e-12);
}

TEST(Codec, NaturalClipPsnrFiniteAndRangePreserved)
{
    const LatentCodec codec(4);
    const VideoClip clip = generate_clip(random_spec(2, 1.0), 4, 2);
    const auto back = codec.decode(codec.encode(clip));
    for (std::size_t k = 0; k < clip.frames.size(); ++k) {
        const double p = psnr(clip.frames[k], back[k]);
        EXPECT_TRUE(std::isfinite(p) || p == std::numeric_limits<double>::infinity());
        EXPECT_GT(p, 10.0);
        for (double v : back[k].values()) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
    // out-of-range latents are clamped on decode
    for (double v : codec.decode_frame(Tensor({4, 2, 2}, 5.0)).values()) EXPECT_LE(v, 1.0);
}

TEST(Codec, RejectsIndivisibleImages)
{
    const LatentCodec codec(4);
    EXPECT_THROW(codec.encode_frame(Tensor({3, 10, 16})), ShapeError);
    EXPECT_THROW(codec.decode_frame(Tensor({3, 4, 4})), ShapeError);
}

TEST(Persistence, ClipRoundTrip)
{
    const fs::path dir = fs::temp_directory_path() / "drmo_unit_clip";
    fs::remove_all(dir);
    const VideoClip clip = generate_clip(random_spec(3, 2.0), 5, 3);
    save_clip(clip, dir);
    const VideoClip back = load_clip(dir);
    EXPECT_EQ(back.frames, clip.frames);
    EXPECT_EQ(back.seed, clip.seed);
    EXPECT_EQ(back.positions, clip.positions);
    EXPECT_EQ(back.spec.jitter, clip.spec.jitter);
    fs::remove_all(dir);
}
