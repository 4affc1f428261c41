#pragma once

#include "drmo/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace drmo::video {

enum class ShapeKind { square, disk };

using Color = std::array<double, 3>;

struct ObjectSpec {
    ShapeKind shape = ShapeKind::square;
    int size = 8;  // side length or diameter, pixels
    Color color{1.0, 0.0, 0.0};
    double x = 0.0;  // top-left corner at frame 0
    double y = 0.0;
    double vx = 0.0;  // pixels per frame
    double vy = 0.0;
};

struct MotionSpec {
    int width = 64;
    int height = 64;
    // Background is a bilinear blend of four corner colors.
    std::array<Color, 4> corners{Color{0.2, 0.2, 0.3}, Color{0.3, 0.2, 0.2}, Color{0.2, 0.3, 0.2}, Color{0.3, 0.3, 0.3}};
    std::vector<ObjectSpec> objects;
    double jitter = 0.0;  // per-frame positional noise stddev, pixels
    bool reverse_at_bounds = true;
};

struct VideoClip {
    std::vector<Tensor> frames;  // each 3 x H x W in [0, 1]
    MotionSpec spec;
    std::uint64_t seed = 0;
    // positions[k][o] = integer top-left corner of object o in frame k
    std::vector<std::vector<std::array<int, 2>>> positions;
};

// Frame k places each object at its constant-velocity (reflected) position plus
// jitter * n_k, with n_k standard normal draws that depend only on the seed; the
// result is rounded to whole pixels and clamped inside the canvas.
VideoClip generate_clip(const MotionSpec& spec, int frames, std::uint64_t seed);

struct RandomSpecOptions {
    int width = 64;
    int height = 64;
    int min_objects = 1;
    int max_objects = 2;
    int min_size = 12;
    int max_size = 20;
    double max_speed = 3.0;
    double min_speed = 1.0;
};

// Random scene drawn from the seed alone; jitter is set afterwards so that the same
// seed yields the same objects for every jitter level.
MotionSpec random_spec(std::uint64_t seed, double jitter, const RandomSpecOptions& options = {});

Tensor render_frame(const MotionSpec& spec, const std::vector<std::array<int, 2>>& positions);

// --- codec --------------------------------------------------------------------------

// encode: s x s average pooling, then latent = 2 Q (rgb - 0.5) with Q a fixed 4 x 3
// matrix of orthonormal columns. decode: rgb = Q^T latent / 2 + 0.5, clamped to [0, 1],
// then nearest-neighbour upsampling.
class LatentCodec {
public:
    explicit LatentCodec(std::size_t factor = 4);

    std::size_t factor() const noexcept { return factor_; }
    std::size_t channels() const noexcept { return 4; }

    Tensor encode_frame(const Tensor& rgb) const;
    Tensor decode_frame(const Tensor& latent) const;
    std::vector<Tensor> encode(const VideoClip& clip) const;
    std::vector<Tensor> decode(const std::vector<Tensor>& latents) const;

    static const std::array<std::array<double, 3>, 4>& lift();

private:
    std::size_t factor_;
};

double psnr(const Tensor& a, const Tensor& b);

// --- persistence --------------------------------------------------------------------

void save_clip(const VideoClip& clip, const std::filesystem::path& dir);
VideoClip load_clip(const std::filesystem::path& dir);

}  // namespace drmo::video
