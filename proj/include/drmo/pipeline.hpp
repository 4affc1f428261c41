#pragma once

#include "drmo/diffusion.hpp"
#include "drmo/dss.hpp"
#include "drmo/metrics.hpp"
#include "drmo/motion.hpp"
#include "drmo/unet.hpp"
#include "drmo/video.hpp"

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace drmo::pipeline {

// Invalid configuration or arguments (CLI exit code 1).
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct PipelineConfig {
    std::uint64_t seed = 0;

    // diffusion
    int T = 100;
    diffusion::ScheduleKind schedule = diffusion::ScheduleKind::linear;
    double beta_min = 1e-4;
    double beta_max = 0.02;
    std::size_t fine_channels = 16;
    std::size_t coarse_channels = 32;

    // video
    int frames = 16;
    std::vector<double> jitter_levels{0.0, 1.0, 2.0, 3.0};  // cycled over training clips

    // generation
    int reference_frames = 4;
    int candidate_stride = 5;
    double beta = 0.0;  // 0 selects 2 e / min(candidates)
    double tau = 0.07;
    double mask_rate = 0.5;
    bool shared_noise = false;

    // training
    std::size_t denoiser_clips = 64;
    int denoiser_epochs = 30;
    std::size_t denoiser_batch = 32;
    double denoiser_lr = 2e-3;
    std::size_t mtn_clips = 16;
    std::size_t mtn_heldout_clips = 2;
    int mtn_epochs_stage1 = 4;
    int mtn_epochs_stage2 = 3;
    int mtn_epochs_stage3 = 40;
    std::size_t mtn_steps_per_clip = 16;
    double mtn_lr = 3e-3;
    motion::ResidualSource residual_source = motion::ResidualSource::posterior_mean;
    std::size_t dss_clips = 200;
    std::size_t dss_heldout_clips = 50;
    int dss_epochs = 60;
    double dss_lr = 3e-3;
    std::size_t dss_hidden = 32;

    // checkpoints
    std::filesystem::path denoiser_dir = "checkpoints/denoiser";
    std::filesystem::path mtn_dir = "checkpoints/mtn";
    std::filesystem::path selector_dir = "checkpoints/selector";

    int horizon() const { return frames - reference_frames; }
    dss::CandidateSet candidates() const { return dss::CandidateSet::uniform(candidate_stride, T); }
    double effective_beta() const;
    diffusion::NoiseSchedule make_schedule() const;
    diffusion::UNetConfig unet_config() const;
    motion::MotionConfig motion_config() const;

    // Throws ValidationError when an invariant fails (checkpoint existence excluded).
    void validate() const;
};

// Reads a JSON config; every key is optional, unknown keys are rejected.
PipelineConfig load_config(const std::filesystem::path& path);
PipelineConfig config_from_json(const std::string& text);
std::string config_to_json(const PipelineConfig& config);

// --- data --------------------------------------------------------------------------------

// Data splits, each with its own stream of clip seeds.
enum class Split : std::uint64_t { denoiser = 1, mtn_train = 2, mtn_heldout = 3, dss_train = 4, dss_heldout = 5, eval = 6 };

std::uint64_t clip_seed(std::uint64_t base, Split split, std::size_t index);
video::VideoClip make_clip(std::uint64_t seed, double jitter, int frames);
// Jitter of clip `index` in a training split (cycles through config.jitter_levels).
double split_jitter(const PipelineConfig& config, std::size_t index);

// --- models -------------------------------------------------------------------------------

struct Models {
    diffusion::UNet denoiser;
    std::optional<motion::MotionNets> mtn;
    std::optional<dss::SelectorNet> selector;
};

// Loads the checkpoints the configuration names; missing ones raise ValidationError.
Models load_models(const PipelineConfig& config, bool need_mtn, bool need_selector);

// --- generation ------------------------------------------------------------------------------

// Guide-conditioned sampling of one frame: z_T = forward_noise(encode(frame), T, eps)
// and a full reverse pass. The noise stream depends on (seed, frame), or on seed
// alone when noise is shared across frames.
nn::Rng frame_rng(const PipelineConfig& config, std::uint64_t seed, int frame);
diffusion::Trajectory sample_frame(const PipelineConfig& config, const diffusion::Denoiser& model,
                                   const diffusion::NoiseSchedule& schedule, const Tensor& guide_latent, int frame,
                                   std::uint64_t seed, const diffusion::SampleOptions& options);

// Every latent, residual and tap of the trajectory.
inline diffusion::SampleOptions record_all()
{
    diffusion::SampleOptions o;
    o.record_taps = true;
    return o;
}

// Only the final latent.
inline diffusion::SampleOptions record_none()
{
    diffusion::SampleOptions o;
    o.record_latents = false;
    return o;
}
// Denoises z_start from `start` to 1. Each frame gets a fresh noise stream; with shared
// noise the shared stream is used with the draws above `start` skipped, so the step
// noise matches the reference frames step for step.
diffusion::Trajectory denoise_from(const PipelineConfig& config, const diffusion::Denoiser& model,
                                   const diffusion::NoiseSchedule& schedule, const Tensor& z_start, int start,
                                   int frame, std::uint64_t seed);

// Selector decision on one recorded frame pair: statistics over the candidates, the
// seeded observation mask and the predicted switch step.
struct SwitchDecision {
    int t_hat = 0;
    dss::PairStats stats;
    std::vector<bool> mask;
};
SwitchDecision select_switch(const PipelineConfig& config, const Models& models, const diffusion::Trajectory& ti,
                             const diffusion::Trajectory& tj, std::uint64_t seed);

enum class Provenance { reference, propagated };

struct GenerationResult {
    std::vector<Tensor> frames;   // decoded RGB, 3 x H x W
    std::vector<Tensor> latents;  // final z_0
    std::vector<Provenance> provenance;
    std::vector<Tensor> switch_latents;  // z at t_hat for propagated frames (empty for references)
    int t_hat = 0;
    std::uint64_t evals = 0;
    double seconds = 0.0;
};

struct DrmoOptions {
    std::optional<int> forced_t;  // bypasses the selector
};

struct DrmoResult {
    GenerationResult generation;
    dss::PairStats stats;  // selector input (last reference pair); empty when forced
    std::vector<bool> mask;
};

GenerationResult generate_baseline(const PipelineConfig& config, const Models& models, const video::VideoClip& guide,
                                   std::uint64_t seed);
DrmoResult generate_drmo(const PipelineConfig& config, const Models& models, const video::VideoClip& guide,
                         std::uint64_t seed, const DrmoOptions& options = {});

struct BenchReport {
    std::uint64_t baseline_evals = 0;
    std::uint64_t drmo_evals = 0;
    std::uint64_t expected_drmo_evals = 0;  // R T + (F - R) t_hat
    double baseline_seconds = 0.0;
    double drmo_seconds = 0.0;
    double eval_speedup = 0.0;
    double wall_speedup = 0.0;
    int t_hat = 0;
    std::vector<double> frame_ssim;  // drmo frame vs baseline frame
    std::vector<Provenance> provenance;
    double propagated_ssim = 0.0;  // mean over propagated frames
};

BenchReport bench(const PipelineConfig& config, const Models& models, const video::VideoClip& guide, std::uint64_t seed,
                  const DrmoOptions& options = {}, GenerationResult* baseline_out = nullptr,
                  GenerationResult* drmo_out = nullptr);

// Mean SSIM of the propagated frames against the matched baseline frames.
double propagated_quality(const GenerationResult& drmo, const GenerationResult& baseline);
// Mean SSIM of propagated frames against a fixed derangement of the baseline frames.
double shuffled_quality(const GenerationResult& drmo, const GenerationResult& baseline);

struct AblationRow {
    int t = 0;
    std::uint64_t evals = 0;
    double ssim = 0.0;
};

// Forces each t (bypassing the selector) on one clip; baseline computed once.
std::vector<AblationRow> ablation_sweep(const PipelineConfig& config, const Models& models, const video::VideoClip& guide,
                                        std::uint64_t seed, const std::vector<int>& t_values);

struct ConsistencyAblation {
    int t_high = 0;  // selector choice on the high-consistency clip
    int t_low = 0;   // selector choice on the low-consistency clip
    metrics::ConsistencyProfile profile_high;
    metrics::ConsistencyProfile profile_low;
    bool ordered() const { return t_low >= t_high; }
};

ConsistencyAblation consistency_ablation(const PipelineConfig& config, const Models& models,
                                         const video::VideoClip& high, const video::VideoClip& low, std::uint64_t seed);

// Toy restyling applied to a frame.
enum class Restyle { identity, swap_rb, invert };
std::string to_string(Restyle r);
Restyle restyle_from_string(const std::string& s);
Tensor restyle(const Tensor& rgb, Restyle r);

// Propagates the reference clip's motion to a restyled first frame.
GenerationResult edit_video(const PipelineConfig& config, const Models& models, const video::VideoClip& reference,
                            const Tensor& restyled_first, std::uint64_t seed, std::optional<int> forced_t = {});

// --- training drivers ---------------------------------------------------------------------------

motion::TrajectorySource trajectory_source(const PipelineConfig& config, const diffusion::UNet& denoiser, Split split);

// Labels for one clip: reference frames sampled, stats and t* of the last reference pair.
dss::DssSample label_clip(const PipelineConfig& config, const Models& models, const video::VideoClip& clip,
                          std::uint64_t seed, const std::string& clip_id);

// --- reports ---------------------------------------------------------------------------------------

void write_frames_png(const std::filesystem::path& dir, const std::string& prefix, const std::vector<Tensor>& frames);
void write_bench_csv(const std::filesystem::path& path, const BenchReport& report);
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

// --- command line -------------------------------------------------------------------------------------

// Comma-separated integers ("90,60,40,20,1"); malformed items raise ValidationError.
std::vector<int> parse_step_list(const std::string& text);

// Subcommands: gen-data, train-diffusion, train-mtn, train-dss, profile, bench, ablate, edit.
// Returns 0 on success, 1 on validation errors, 2 on runtime failures.
int cli_main(int argc, const char* const* argv);

}  // namespace drmo::pipeline
