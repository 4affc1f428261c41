#include "drmo/video.hpp"

#include "drmo/nn.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace drmo::video {

namespace {

std::string shape_name(ShapeKind k) { return k == ShapeKind::square ? "square" : "disk"; }

ShapeKind shape_from_name(const std::string& s)
{
    if (s == "square") return ShapeKind::square;
    if (s == "disk") return ShapeKind::disk;
    throw std::invalid_argument("unknown object shape '" + s + "'");
}

// Folds a coordinate moving past either wall back into [0, hi].
double reflect(double p, double hi)
{
    if (hi <= 0.0) return 0.0;
    const double period = 2.0 * hi;
    double m = std::fmod(p, period);
    if (m < 0) m += period;
    return m <= hi ? m : period - m;
}

}  // namespace

VideoClip generate_clip(const MotionSpec& spec, int frames, std::uint64_t seed)
{
    if (frames < 2) throw std::invalid_argument("generate_clip: need at least 2 frames, got " + std::to_string(frames));
    if (spec.jitter < 0.0) throw std::invalid_argument("generate_clip: jitter must be >= 0");
    if (spec.width <= 0 || spec.height <= 0) throw std::invalid_argument("generate_clip: empty canvas");
    for (const auto& o : spec.objects) {
        if (o.size <= 0 || o.size > spec.width || o.size > spec.height) {
            throw std::invalid_argument("generate_clip: object of size " + std::to_string(o.size) + " does not fit a " +
                                        std::to_string(spec.width) + "x" + std::to_string(spec.height) + " canvas");
        }
    }
    nn::Rng rng = nn::Rng::derive(seed, 0x6a6974);
    VideoClip clip;
    clip.spec = spec;
    clip.seed = seed;
    for (int k = 0; k < frames; ++k) {
        std::vector<std::array<int, 2>> pos;
        for (const auto& o : spec.objects) {
            const double hx = spec.width - o.size;
            const double hy = spec.height - o.size;
            double bx = o.x + o.vx * k;
            double by = o.y + o.vy * k;
            if (spec.reverse_at_bounds) {
                bx = reflect(bx, hx);
                by = reflect(by, hy);
            }
            // draws are made for every frame so they do not depend on jitter
            const double nx = rng.normal();
            const double ny = rng.normal();
            const double px = std::clamp(std::round(bx + spec.jitter * nx), 0.0, hx);
            const double py = std::clamp(std::round(by + spec.jitter * ny), 0.0, hy);
            pos.push_back({static_cast<int>(px), static_cast<int>(py)});
        }
        clip.frames.push_back(render_frame(spec, pos));
        clip.positions.push_back(std::move(pos));
    }
    return clip;
}

Tensor render_frame(const MotionSpec& spec, const std::vector<std::array<int, 2>>& positions)
{
    if (positions.size() != spec.objects.size()) throw std::invalid_argument("render_frame: position count mismatch");
    const auto W = static_cast<std::size_t>(spec.width);
    const auto H = static_cast<std::size_t>(spec.height);
    Tensor img({3, H, W});
    for (std::size_t y = 0; y < H; ++y) {
        const double v = H > 1 ? static_cast<double>(y) / (H - 1) : 0.0;
        for (std::size_t x = 0; x < W; ++x) {
            const double u = W > 1 ? static_cast<double>(x) / (W - 1) : 0.0;
            for (std::size_t c = 0; c < 3; ++c) {
                const double top = (1 - u) * spec.corners[0][c] + u * spec.corners[1][c];
                const double bottom = (1 - u) * spec.corners[2][c] + u * spec.corners[3][c];
                img[(c * H + y) * W + x] = (1 - v) * top + v * bottom;
            }
        }
    }
    for (std::size_t i = 0; i < spec.objects.size(); ++i) {
        const auto& o = spec.objects[i];
        const int x0 = positions[i][0];
        const int y0 = positions[i][1];
        const double r = o.size / 2.0;
        for (int dy = 0; dy < o.size; ++dy) {
            for (int dx = 0; dx < o.size; ++dx) {
                const int x = x0 + dx, y = y0 + dy;
                if (x < 0 || y < 0 || x >= spec.width || y >= spec.height) continue;
                if (o.shape == ShapeKind::disk) {
                    const double ex = dx + 0.5 - r, ey = dy + 0.5 - r;
                    if (ex * ex + ey * ey > r * r) continue;
                }
                for (std::size_t c = 0; c < 3; ++c) img[(c * H + y) * W + x] = o.color[c];
            }
        }
    }
    return img;
}

MotionSpec random_spec(std::uint64_t seed, double jitter, const RandomSpecOptions& opt)
{
    if (opt.max_size > std::min(opt.width, opt.height)) throw std::invalid_argument("random_spec: objects larger than canvas");
    nn::Rng rng = nn::Rng::derive(seed, 0x73636e);
    MotionSpec spec;
    spec.width = opt.width;
    spec.height = opt.height;
    spec.jitter = jitter;
    for (auto& c : spec.corners) {
        for (double& v : c) v = rng.uniform(0.15, 0.45);
    }
    const int n = opt.min_objects + static_cast<int>(rng.index(static_cast<std::size_t>(opt.max_objects - opt.min_objects + 1)));
    for (int i = 0; i < n; ++i) {
        ObjectSpec o;
        o.shape = rng.uniform() < 0.5 ? ShapeKind::square : ShapeKind::disk;
        o.size = opt.min_size + static_cast<int>(rng.index(static_cast<std::size_t>(opt.max_size - opt.min_size + 1)));
        // bright saturated colours, away from the background range
        const std::size_t hi = rng.index(3);
        for (std::size_t c = 0; c < 3; ++c) o.color[c] = c == hi ? rng.uniform(0.85, 1.0) : rng.uniform(0.0, 0.6);
        o.x = rng.uniform(0.0, opt.width - o.size);
        o.y = rng.uniform(0.0, opt.height - o.size);
        const double speed = rng.uniform(opt.min_speed, opt.max_speed);
        const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        o.vx = speed * std::cos(angle);
        o.vy = speed * std::sin(angle);
        spec.objects.push_back(o);
    }
    return spec;
}

// --- codec ------------------------------------------------------------------------------

LatentCodec::LatentCodec(std::size_t factor) : factor_(factor)
{
    if (factor == 0) throw std::invalid_argument("LatentCodec: factor must be positive");
}

const std::array<std::array<double, 3>, 4>& LatentCodec::lift()
{
    // first three columns of the 4x4 Hadamard matrix scaled by 1/2
    static const std::array<std::array<double, 3>, 4> q{{
        {0.5, 0.5, 0.5},
        {0.5, -0.5, 0.5},
        {0.5, 0.5, -0.5},
        {0.5, -0.5, -0.5},
    }};
    return q;
}

Tensor LatentCodec::encode_frame(const Tensor& rgb) const
{
    if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("encode: expected 3 x H x W image, got " + shape_str(rgb.shape()));
    const std::size_t H = rgb.dim(1), W = rgb.dim(2), s = factor_;
    if (H % s != 0 || W % s != 0) {
        throw ShapeError("encode: image " + shape_str(rgb.shape()) + " not divisible by factor " + std::to_string(s));
    }
    const std::size_t h = H / s, w = W / s;
    const auto& q = lift();
    Tensor lat({4, h, w});
    const double inv = 1.0 / static_cast<double>(s * s);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double pooled[3] = {0, 0, 0};
            for (std::size_t c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (std::size_t dy = 0; dy < s; ++dy)
                    for (std::size_t dx = 0; dx < s; ++dx) acc += rgb[(c * H + y * s + dy) * W + x * s + dx];
                pooled[c] = acc * inv;
            }
            for (std::size_t l = 0; l < 4; ++l) {
                double v = 0.0;
                for (std::size_t c = 0; c < 3; ++c) v += q[l][c] * (pooled[c] - 0.5);
                lat[(l * h + y) * w + x] = 2.0 * v;
            }
        }
    }
    return lat;
}

Tensor LatentCodec::decode_frame(const Tensor& lat) const
{
    if (lat.rank() != 3 || lat.dim(0) != 4) throw ShapeError("decode: expected 4 x h x w latent, got " + shape_str(lat.shape()));
    const std::size_t h = lat.dim(1), w = lat.dim(2), s = factor_;
    const std::size_t H = h * s, W = w * s;
    const auto& q = lift();
    Tensor rgb({3, H, W});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                double v = 0.0;
                for (std::size_t l = 0; l < 4; ++l) v += q[l][c] * lat[(l * h + y) * w + x];
                const double px = std::clamp(v / 2.0 + 0.5, 0.0, 1.0);
                for (std::size_t dy = 0; dy < s; ++dy)
                    for (std::size_t dx = 0; dx < s; ++dx) rgb[(c * H + y * s + dy) * W + x * s + dx] = px;
            }
        }
    }
    return rgb;
}

std::vector<Tensor> LatentCodec::encode(const VideoClip& clip) const
{
    std::vector<Tensor> out;
    out.reserve(clip.frames.size());
    for (const auto& f : clip.frames) out.push_back(encode_frame(f));
    return out;
}

std::vector<Tensor> LatentCodec::decode(const std::vector<Tensor>& latents) const
{
    std::vector<Tensor> out;
    out.reserve(latents.size());
    for (const auto& l : latents) out.push_back(decode_frame(l));
    return out;
}

double psnr(const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape()) throw shape_error("psnr", a.shape(), b.shape());
    double mse = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
    mse /= static_cast<double>(a.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

// --- persistence ----------------------------------------------------------------------------

void save_clip(const VideoClip& clip, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    for (std::size_t k = 0; k < clip.frames.size(); ++k) save_drt(clip.frames[k], dir / ("frame_" + std::to_string(k) + ".drt"));
    nlohmann::json objects = nlohmann::json::array();
    for (const auto& o : clip.spec.objects) {
        objects.push_back({{"shape", shape_name(o.shape)}, {"size", o.size}, {"color", o.color}, {"x", o.x}, {"y", o.y},
                           {"vx", o.vx}, {"vy", o.vy}});
    }
    nlohmann::json m = {
        {"frames", clip.frames.size()},
        {"seed", clip.seed},
        {"width", clip.spec.width},
        {"height", clip.spec.height},
        {"corners", clip.spec.corners},
        {"jitter", clip.spec.jitter},
        {"reverse_at_bounds", clip.spec.reverse_at_bounds},
        {"objects", objects},
        {"positions", clip.positions},
    };
    std::ofstream os(dir / "manifest.json");
    os << m.dump(2) << '\n';
}

VideoClip load_clip(const std::filesystem::path& dir)
{
    std::ifstream is(dir / "manifest.json");
    if (!is) throw std::runtime_error("missing clip manifest in " + dir.string());
    const auto m = nlohmann::json::parse(is);
    VideoClip clip;
    clip.seed = m.at("seed").get<std::uint64_t>();
    clip.spec.width = m.at("width").get<int>();
    clip.spec.height = m.at("height").get<int>();
    clip.spec.corners = m.at("corners").get<std::array<Color, 4>>();
    clip.spec.jitter = m.at("jitter").get<double>();
    clip.spec.reverse_at_bounds = m.at("reverse_at_bounds").get<bool>();
    for (const auto& o : m.at("objects")) {
        ObjectSpec spec;
        spec.shape = shape_from_name(o.at("shape").get<std::string>());
        spec.size = o.at("size").get<int>();
        spec.color = o.at("color").get<Color>();
        spec.x = o.at("x").get<double>();
        spec.y = o.at("y").get<double>();
        spec.vx = o.at("vx").get<double>();
        spec.vy = o.at("vy").get<double>();
        clip.spec.objects.push_back(spec);
    }
    clip.positions = m.at("positions").get<std::vector<std::vector<std::array<int, 2>>>>();
    const auto n = m.at("frames").get<std::size_t>();
    for (std::size_t k = 0; k < n; ++k) clip.frames.push_back(load_drt(dir / ("frame_" + std::to_string(k) + ".drt")));
    return clip;
}

}  // namespace drmo::video
