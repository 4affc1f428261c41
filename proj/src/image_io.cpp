#include "drmo/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <stdexcept>

namespace drmo::io {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};

void write_rgb8(const std::filesystem::path& path, const std::vector<unsigned char>& pixels, std::size_t width,
                std::size_t height)
{
    std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, info ? &info : nullptr);
        throw std::runtime_error("failed writing PNG " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < height; ++y) {
        png_write_row(png, const_cast<png_bytep>(pixels.data() + y * width * 3));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

class Canvas {
public:
    Canvas(std::size_t w, std::size_t h) : w_(w), h_(h), px_(w * h * 3, 255) {}

    void set(long x, long y, std::array<unsigned char, 3> c)
    {
        if (x < 0 || y < 0 || x >= static_cast<long>(w_) || y >= static_cast<long>(h_)) return;
        auto* p = &px_[(static_cast<std::size_t>(y) * w_ + static_cast<std::size_t>(x)) * 3];
        p[0] = c[0];
        p[1] = c[1];
        p[2] = c[2];
    }

    // Bresenham
    void line(long x0, long y0, long x1, long y1, std::array<unsigned char, 3> c)
    {
        const long dx = std::labs(x1 - x0), sx = x0 < x1 ? 1 : -1;
        const long dy = -std::labs(y1 - y0), sy = y0 < y1 ? 1 : -1;
        long err = dx + dy;
        while (true) {
            set(x0, y0, c);
            if (x0 == x1 && y0 == y1) break;
            const long e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += sy;
            }
        }
    }

    const std::vector<unsigned char>& pixels() const { return px_; }

private:
    std::size_t w_, h_;
    std::vector<unsigned char> px_;
};

}  // namespace

void write_png(const std::filesystem::path& path, const Tensor& rgb, std::size_t scale)
{
    if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("write_png: expected 3 x H x W, got " + shape_str(rgb.shape()));
    if (scale == 0) scale = 1;
    const std::size_t H = rgb.dim(1), W = rgb.dim(2);
    const std::size_t oh = H * scale, ow = W * scale;
    std::vector<unsigned char> px(oh * ow * 3);
    for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::clamp(rgb[(c * H + y / scale) * W + x / scale], 0.0, 1.0);
                px[(y * ow + x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
            }
        }
    }
    write_rgb8(path, px, ow, oh);
}

void write_line_plot(const std::filesystem::path& path, const std::vector<PlotSeries>& series, std::size_t width,
                     std::size_t height, bool separate_axes)
{
    Canvas canvas(width, height);
    const long left = 40, right = static_cast<long>(width) - 20, top = 20, bottom = static_cast<long>(height) - 30;
    const std::array<unsigned char, 3> grid{225, 225, 225}, axis{60, 60, 60};
    for (int k = 1; k < 4; ++k) {
        const long gx = left + (right - left) * k / 4;
        const long gy = top + (bottom - top) * k / 4;
        canvas.line(gx, top, gx, bottom, grid);
        canvas.line(left, gy, right, gy, grid);
    }
    canvas.line(left, top, right, top, axis);
    canvas.line(left, bottom, right, bottom, axis);
    canvas.line(left, top, left, bottom, axis);
    canvas.line(right, top, right, bottom, axis);

    auto range = [](const std::vector<double>& v) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (double a : v) {
            if (!std::isfinite(a)) continue;
            lo = std::min(lo, a);
            hi = std::max(hi, a);
        }
        if (!(lo < hi)) {
            lo -= 0.5;
            hi += 0.5;
        }
        return std::pair{lo, hi};
    };
    std::vector<double> all_x, all_y;
    for (const auto& s : series) {
        all_x.insert(all_x.end(), s.x.begin(), s.x.end());
        all_y.insert(all_y.end(), s.y.begin(), s.y.end());
    }
    const auto [x_lo, x_hi] = range(all_x);
    const auto shared_y = range(all_y);
    for (const auto& s : series) {
        const auto [y_lo, y_hi] = separate_axes ? range(s.y) : shared_y;
        long px = 0, py = 0;
        bool have = false;
        for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
            if (!std::isfinite(s.y[i])) {
                have = false;
                continue;
            }
            const long cx = left + std::lround((s.x[i] - x_lo) / (x_hi - x_lo) * (right - left));
            const long cy = bottom - std::lround((s.y[i] - y_lo) / (y_hi - y_lo) * (bottom - top));
            if (have) canvas.line(px, py, cx, cy, s.color);
            px = cx;
            py = cy;
            have = true;
        }
    }
    write_rgb8(path, canvas.pixels(), width, height);
}

}  // namespace drmo::io
