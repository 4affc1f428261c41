#pragma once

#include "drmo/nn.hpp"
#include "drmo/tensor.hpp"

#include <atomic>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace drmo::diffusion {

enum class ScheduleKind { linear, cosine };

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& s);

// Arrays are indexed by step t in 0..T; index 0 holds the t = 0 convention
// (beta = 0, alpha_bar = 1).
struct NoiseSchedule {
    int T = 0;
    ScheduleKind kind = ScheduleKind::linear;
    double beta_min = 0.0;
    double beta_max = 0.0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    double beta(int t) const { return betas.at(static_cast<std::size_t>(t)); }
    double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t)); }
    double alpha_bar(int t) const { return alpha_bars.at(static_cast<std::size_t>(t)); }
    // Variance of q(z_{t-1} | z_t, z_0); zero at t = 1.
    double posterior_variance(int t) const;
};

NoiseSchedule make_schedule(int T, ScheduleKind kind, double beta_min, double beta_max);

struct LatentFrame {
    int frame = 0;
    int step = 0;
    Tensor data;  // C x H x W
};

struct ResidualLatent {
    int frame = 0;
    int step = 0;  // delta z_t = z_{t-1} - z_t
    Tensor data;
};

// sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; t = 0 returns z0.
LatentFrame forward_noise(const LatentFrame& z0, int t, const Tensor& eps, const NoiseSchedule& schedule);

ResidualLatent residual(const LatentFrame& z_prev, const LatentFrame& z_cur);
// z_t = z_T + sum_{k=t+1..T} delta z_k, summed from k = T downward.
LatentFrame reconstruct(const LatentFrame& zT, const std::vector<ResidualLatent>& residuals, int t);

// --- denoiser interface ----------------------------------------------------------

// Decoder features captured during one denoiser evaluation.
struct TapFeatures {
    Tensor coarse;  // Cc x H/2 x W/2
    Tensor fine;    // Cf x H x W
};

enum class Tap { coarse, fine };
std::string to_string(Tap tap);
Tap tap_from_string(const std::string& s);
const Tensor& tap_tensor(const TapFeatures& taps, Tap tap);

class Denoiser {
public:
    virtual ~Denoiser() = default;
    // Noise prediction for one latent C x H x W at step t; fills taps when requested.
    virtual Tensor predict_noise(const Tensor& zt, int t, TapFeatures* taps) const = 0;
};

// Global count of denoiser evaluations performed through reverse_step.
std::uint64_t denoiser_evals() noexcept;
void reset_denoiser_evals() noexcept;

struct StepOutput {
    LatentFrame z_prev;
    Tensor mean;  // posterior mean part of z_prev (before step noise)
    TapFeatures taps;
};

// One DDPM ancestral update z_t -> z_{t-1} using the posterior mean from the model's
// noise prediction. `noise` is ignored at t = 1.
StepOutput reverse_step(const LatentFrame& zt, int t, const Denoiser& model, const Tensor& noise,
                        const NoiseSchedule& schedule);

// Posterior mean of q(z_{t-1} | z_t, z_0).
Tensor posterior_mean(const Tensor& zt, const Tensor& z0, int t, const NoiseSchedule& schedule);

// --- trajectories -----------------------------------------------------------------

struct Trajectory {
    int frame = 0;
    int T = 0;
    int start = 0;                  // step the sampling started from
    std::vector<Tensor> z;          // z[t] for t = 0..start (empty above start)
    std::vector<Tensor> dz;         // dz[t] = z[t-1] - z[t] for t = 1..start
    std::vector<Tensor> dz_mean;    // noise-free part of dz[t]: posterior mean - z[t]
    std::vector<TapFeatures> taps;  // taps[t] from the evaluation at step t

    const Tensor& latent(int t) const;
    const Tensor& residual_at(int t) const;
    const Tensor& mean_residual_at(int t) const;
    const TapFeatures& taps_at(int t) const;
    bool has_taps() const;
};

struct SampleOptions {
    bool record_latents = true;  // keep z_t and dz_t for every step
    bool record_taps = false;
    std::vector<int> keep_steps;  // when not recording, latents kept only at these steps (and 0)
};

// Runs reverse steps from `start` down to 1, drawing step noise from rng.
Trajectory sample(const Denoiser& model, const NoiseSchedule& schedule, const Tensor& z_start, int start, int frame,
                  nn::Rng& rng, const SampleOptions& options = {});

void save_trajectory_archive(const std::filesystem::path& dir, const std::vector<Trajectory>& trajectories,
                             const NoiseSchedule& schedule, std::uint64_t seed);
std::vector<Trajectory> load_trajectory_archive(const std::filesystem::path& dir, NoiseSchedule* schedule = nullptr);

}  // namespace drmo::diffusion
