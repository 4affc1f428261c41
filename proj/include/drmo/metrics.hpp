#pragma once

#include "drmo/diffusion.hpp"
#include "drmo/tensor.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace drmo::motion {
struct MotionNets;
}

namespace drmo::metrics {

struct HistogramSpec {
    std::size_t bins = 32;
    double lo = -1.0;
    double hi = 1.0;
};

// Bin index of v: uniform bins over [lo, hi], values outside clamped to the end bins.
std::size_t quantize(double v, const HistogramSpec& spec);

// Normalized mutual information I / sqrt(Ha Hb) (natural log) of the entry-wise
// quantized matrices. Both constant in the same bin -> 1; any other zero-entropy case -> 0.
double nmi(const Tensor& a, const Tensor& b, const HistogramSpec& spec = {});

// Mean-per-element L1 of apply_motion(source, M) - target for C x H x W latents and a
// normalized N x N matrix.
double transformation_error(const Tensor& source_chw, const Tensor& target_chw, const Tensor& normalized);

struct SsimOptions {
    std::size_t window = 8;
    double c1 = 0.01 * 0.01;
    double c2 = 0.03 * 0.03;
};

// Mean SSIM over all window positions (stride 1) and channels of C x H x W images.
double ssim(const Tensor& a, const Tensor& b, const SsimOptions& options = {});

// --- consistency profile ------------------------------------------------------------

enum class ProfileSource { fused, coarse, fine };
std::string to_string(ProfileSource s);
ProfileSource profile_source_from_string(const std::string& s);

struct ConsistencyProfile {
    int frame_i = 0;
    int frame_j = 0;
    int T = 0;
    HistogramSpec spec;
    ProfileSource source = ProfileSource::fused;
    std::vector<double> nmi;    // nmi[t - 1] = NMI(M_t, M_{t+1}), t = 1..T-1
    std::vector<double> error;  // error[t - 1] = e_t, t = 1..T
};

// Raw motion matrices at every step between two fully recorded trajectories, NMI of
// consecutive steps, and the per-step transformation error of z_t under the
// normalized step matrix.
ConsistencyProfile profile(const diffusion::Trajectory& ti, const diffusion::Trajectory& tj,
                           const motion::MotionNets& nets, const HistogramSpec& spec = {},
                           ProfileSource source = ProfileSource::fused);

// Mean NMI over steps t with lo <= t <= hi.
double mean_nmi(const ConsistencyProfile& p, int lo, int hi);

void write_profile_csv(const std::filesystem::path& path, const ConsistencyProfile& p);
void write_profile_plot(const std::filesystem::path& path, const ConsistencyProfile& p);

}  // namespace drmo::metrics
