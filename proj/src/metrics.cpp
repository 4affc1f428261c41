#include "drmo/metrics.hpp"

#include "drmo/image_io.hpp"
#include "drmo/motion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>

namespace drmo::metrics {

std::size_t quantize(double v, const HistogramSpec& spec)
{
    const double u = (v - spec.lo) / (spec.hi - spec.lo);
    const double b = std::floor(u * static_cast<double>(spec.bins));
    if (!(b >= 0.0)) return 0;
    return std::min(static_cast<std::size_t>(b), spec.bins - 1);
}

namespace {

// Entropy of a count table, summed over sorted counts so that the result does not
// depend on the table's layout.
double entropy(std::vector<std::size_t> counts, std::size_t total)
{
    std::sort(counts.begin(), counts.end());
    double h = 0.0;
    const double n = static_cast<double>(total);
    for (std::size_t c : counts) {
        if (c == 0) continue;
        const double p = static_cast<double>(c) / n;
        h -= p * std::log(p);
    }
    return h;
}

}  // namespace

double nmi(const Tensor& a, const Tensor& b, const HistogramSpec& spec)
{
    if (a.shape() != b.shape()) throw shape_error("nmi", a.shape(), b.shape());
    if (spec.bins < 2) throw std::invalid_argument("nmi: need at least 2 bins");
    if (a.empty()) throw std::invalid_argument("nmi: empty matrices");
    const std::size_t B = spec.bins;
    std::vector<std::size_t> ca(B, 0), cb(B, 0), joint(B * B, 0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const std::size_t qa = quantize(a[i], spec);
        const std::size_t qb = quantize(b[i], spec);
        ++ca[qa];
        ++cb[qb];
        ++joint[qa * B + qb];
    }
    const std::size_t n = a.size();
    const double ha = entropy(ca, n);
    const double hb = entropy(cb, n);
    if (ha == 0.0 || hb == 0.0) {
        if (ha == 0.0 && hb == 0.0) {
            const auto ia = std::find_if(ca.begin(), ca.end(), [](std::size_t c) { return c > 0; }) - ca.begin();
            const auto ib = std::find_if(cb.begin(), cb.end(), [](std::size_t c) { return c > 0; }) - cb.begin();
            return ia == ib ? 1.0 : 0.0;
        }
        return 0.0;
    }
    const double hab = entropy(joint, n);
    const double mi = (ha + hb) - hab;
    return std::clamp(mi / std::sqrt(ha * hb), 0.0, 1.0);
}

double transformation_error(const Tensor& source_chw, const Tensor& target_chw, const Tensor& normalized)
{
    if (source_chw.shape() != target_chw.shape()) throw shape_error("transformation_error", source_chw.shape(), target_chw.shape());
    const Tensor moved = motion::apply_motion(motion::to_locations(source_chw), normalized);
    return motion::mean_l1(moved, motion::to_locations(target_chw));
}

double ssim(const Tensor& a, const Tensor& b, const SsimOptions& o)
{
    if (a.shape() != b.shape()) throw shape_error("ssim", a.shape(), b.shape());
    if (a.rank() != 3) throw ShapeError("ssim: expected C x H x W, got " + shape_str(a.shape()));
    const std::size_t C = a.dim(0), H = a.dim(1), W = a.dim(2), w = o.window;
    if (H < w || W < w) throw ShapeError("ssim: image smaller than window");
    const double inv = 1.0 / static_cast<double>(w * w);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t c = 0; c < C; ++c) {
        const double* pa = a.data() + c * H * W;
        const double* pb = b.data() + c * H * W;
        for (std::size_t y = 0; y + w <= H; ++y) {
            for (std::size_t x = 0; x + w <= W; ++x) {
                double sa = 0, sb = 0;
                for (std::size_t dy = 0; dy < w; ++dy)
                    for (std::size_t dx = 0; dx < w; ++dx) {
                        sa += pa[(y + dy) * W + x + dx];
                        sb += pb[(y + dy) * W + x + dx];
                    }
                const double ma = sa * inv, mb = sb * inv;
                double va = 0, vb = 0, cov = 0;
                for (std::size_t dy = 0; dy < w; ++dy)
                    for (std::size_t dx = 0; dx < w; ++dx) {
                        const double da = pa[(y + dy) * W + x + dx] - ma;
                        const double db = pb[(y + dy) * W + x + dx] - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                va *= inv;
                vb *= inv;
                cov *= inv;
                total += ((2 * ma * mb + o.c1) * (2 * cov + o.c2)) / ((ma * ma + mb * mb + o.c1) * (va + vb + o.c2));
                ++count;
            }
        }
    }
    return total / static_cast<double>(count);
}

// --- profile -----------------------------------------------------------------------------

std::string to_string(ProfileSource s)
{
    switch (s) {
    case ProfileSource::fused: return "fused";
    case ProfileSource::coarse: return "coarse";
    case ProfileSource::fine: return "fine";
    }
    return "fused";
}

ProfileSource profile_source_from_string(const std::string& s)
{
    if (s == "fused") return ProfileSource::fused;
    if (s == "coarse") return ProfileSource::coarse;
    if (s == "fine") return ProfileSource::fine;
    throw std::invalid_argument("unknown profile source '" + s + "'");
}

ConsistencyProfile profile(const diffusion::Trajectory& ti, const diffusion::Trajectory& tj,
                           const motion::MotionNets& nets, const HistogramSpec& spec, ProfileSource source)
{
    const int T = ti.T;
    if (tj.T != T || ti.start != T || tj.start != T) throw std::invalid_argument("profile: trajectories must cover steps T..0");
    ConsistencyProfile p;
    p.frame_i = ti.frame;
    p.frame_j = tj.frame;
    p.T = T;
    p.spec = spec;
    p.source = source;
    std::vector<Tensor> raw(static_cast<std::size_t>(T) + 1);
    for (int t = 1; t <= T; ++t) {
        const auto& ai = ti.taps_at(t);
        const auto& aj = tj.taps_at(t);
        if (source == ProfileSource::fused) {
            raw[t] = motion::motion_matrix(motion::project_taps(ai, nets), motion::project_taps(aj, nets), nets);
        } else {
            const auto per = motion::per_tap_motion(ai, aj, nets);
            const diffusion::Tap want = source == ProfileSource::coarse ? diffusion::Tap::coarse : diffusion::Tap::fine;
            const auto& taps = nets.config.taps;
            const auto it = std::find(taps.begin(), taps.end(), want);
            if (it == taps.end()) throw std::invalid_argument("profile: tap " + to_string(source) + " not configured");
            raw[t] = per[static_cast<std::size_t>(it - taps.begin())];
        }
    }
    for (int t = 1; t < T; ++t) p.nmi.push_back(nmi(raw[t], raw[t + 1], spec));
    for (int t = 1; t <= T; ++t) {
        const Tensor norm = motion::normalize_motion(raw[t], nets.config.tau);
        p.error.push_back(transformation_error(ti.latent(t), tj.latent(t), norm));
    }
    return p;
}

double mean_nmi(const ConsistencyProfile& p, int lo, int hi)
{
    double s = 0.0;
    int n = 0;
    for (int t = std::max(lo, 1); t <= std::min(hi, p.T - 1); ++t) {
        s += p.nmi[t - 1];
        ++n;
    }
    if (n == 0) throw std::invalid_argument("mean_nmi: empty step range");
    return s / n;
}

void write_profile_csv(const std::filesystem::path& path, const ConsistencyProfile& p)
{
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "t,nmi,e_t\n" << std::setprecision(10);
    for (int t = 1; t <= p.T; ++t) {
        os << t << ',';
        if (t < p.T) os << p.nmi[t - 1];
        os << ',' << p.error[t - 1] << '\n';
    }
}

void write_profile_plot(const std::filesystem::path& path, const ConsistencyProfile& p)
{
    io::PlotSeries nmi_series, err_series;
    nmi_series.color = {30, 90, 200};
    err_series.color = {210, 60, 40};
    for (int t = 1; t <= p.T; ++t) {
        if (t < p.T) {
            nmi_series.x.push_back(t);
            nmi_series.y.push_back(p.nmi[t - 1]);
        }
        err_series.x.push_back(t);
        err_series.y.push_back(p.error[t - 1]);
    }
    io::write_line_plot(path, {nmi_series, err_series}, 640, 360, true);
}

}  // namespace drmo::metrics
