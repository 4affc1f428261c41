#pragma once

#include "drmo/diffusion.hpp"
#include "drmo/nn.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace drmo::diffusion {

struct UNetConfig {
    std::size_t latent_channels = 4;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t fine_channels = 16;    // channels at full resolution (fine tap)
    std::size_t coarse_channels = 32;  // channels at half resolution (coarse tap)
    std::size_t time_dim = 32;
    int T = 100;  // time embedding is fed t / T scaled to [0, 1000]
};

// Two-level encoder/decoder with one skip connection. Decoder blocks expose two taps:
// the coarse block output (coarse_channels x H/2 x W/2) and the last fine block output
// (fine_channels x H x W).
class UNet final : public Denoiser {
public:
    struct Output {
        ad::Var eps;
        ad::Var coarse;
        ad::Var fine;
    };

    UNet(const UNetConfig& config, std::uint64_t seed);

    // z: [N, C, H, W], one step per sample.
    Output forward(const ad::Var& z, const std::vector<int>& steps) const;

    Tensor predict_noise(const Tensor& zt, int t, TapFeatures* taps) const override;

    const UNetConfig& config() const noexcept { return config_; }
    ad::ParamList parameters() const;

    void save(const std::filesystem::path& dir) const;
    static UNet load(const std::filesystem::path& dir);

private:
    UNetConfig config_;
    nn::Linear time1_, time2_;
    nn::Conv2d conv_in_, enc_conv_;
    nn::Linear enc_time_;
    nn::Conv2d down_, mid1_, mid2_;
    nn::Linear mid_time_;
    nn::Conv2d dec_coarse_, dec_fine1_, dec_fine2_, conv_out_;
};

struct DenoiserTrainConfig {
    int epochs = 30;
    std::size_t batch_size = 32;
    double lr = 2e-3;
    double holdout_fraction = 0.1;
    std::uint64_t seed = 0;
};

struct DenoiserTrainReport {
    std::vector<double> train_loss;  // per epoch
    std::vector<double> holdout_loss;
    double initial_holdout_loss = 0.0;
};

// Noise-prediction MSE on a fixed seeded set of (latent, t, eps) draws.
double denoiser_loss(const UNet& model, const std::vector<Tensor>& latents, const NoiseSchedule& schedule,
                     std::uint64_t seed);

// Trains on latents (each C x H x W). Writes "epoch,train_loss,holdout_loss" rows to
// csv_path when non-empty. Aborts with std::runtime_error if the loss becomes NaN.
UNet train_denoiser(const std::vector<Tensor>& latents, const NoiseSchedule& schedule, const UNetConfig& model_config,
                    const DenoiserTrainConfig& config, const std::filesystem::path& csv_path = {},
                    DenoiserTrainReport* report = nullptr);

}  // namespace drmo::diffusion
