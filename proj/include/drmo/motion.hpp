#pragma once

#include "drmo/diffusion.hpp"
#include "drmo/nn.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace drmo::motion {

using ad::Var;
using diffusion::Tap;
using diffusion::TapFeatures;
using diffusion::Trajectory;

// C x H x W -> (H*W) x C (locations by channels) and back.
Tensor to_locations(const Tensor& chw);
Tensor from_locations(const Tensor& nc, std::size_t height, std::size_t width);
Var to_locations(const Var& chw);

// M[p, q] = cos(a_p, b_q); zero-norm rows give zero rows.
Tensor raw_motion(const Tensor& a, const Tensor& b);
Var raw_motion(const Var& a, const Var& b);

// Column-wise softmax of M / tau.
Tensor normalize_motion(const Tensor& m, double tau);
Var normalize_motion(const Var& m, double tau);

// out_q = sum_p x_p M[p, q]; x: N x C, M: N x N.
Tensor apply_motion(const Tensor& x, const Tensor& m);
Var apply_motion(const Var& x, const Var& m);

// Replicates a coarse-grid (h x w) matrix onto the grid refined by `factor` in each
// spatial dimension: result[p, q] = m[parent(p), parent(q)].
Tensor upsample_motion(const Tensor& m, std::size_t h, std::size_t w, std::size_t factor);
Var upsample_motion(const Var& m, std::size_t h, std::size_t w, std::size_t factor);

// Mean-per-element L1 between two tensors of equal shape.
double mean_l1(const Tensor& a, const Tensor& b);

// --- networks ------------------------------------------------------------------------

struct MotionConfig {
    std::vector<Tap> taps{Tap::coarse, Tap::fine};
    std::size_t coarse_channels = 32;
    std::size_t fine_channels = 16;
    std::size_t fine_height = 16;
    std::size_t fine_width = 16;
    double tau = 0.07;
    int T = 100;
    std::size_t fusion_hidden = 8;
    std::size_t surrogate_hidden = 16;
    std::size_t step_embedding = 8;
    std::size_t window = 2;  // predictor displacement radius, fine-grid cells
    std::size_t predictor_hidden = 16;

    std::size_t fine_locations() const { return fine_height * fine_width; }
    std::size_t channels(Tap tap) const { return tap == Tap::coarse ? coarse_channels : fine_channels; }
    std::size_t height(Tap tap) const { return tap == Tap::coarse ? fine_height / 2 : fine_height; }
    std::size_t width(Tap tap) const { return tap == Tap::coarse ? fine_width / 2 : fine_width; }
};

// phi_1: one 3x3 convolution per tap, initialised to the identity.
class FeatureProjector {
public:
    FeatureProjector() = default;
    FeatureProjector(const MotionConfig& config, nn::Rng& rng);

    // tap feature C x h x W -> projected C x h x w
    Var forward(std::size_t tap_index, const Var& feature) const;
    // Same projection without recording, laid out as (h w) x C locations.
    Tensor locations(std::size_t tap_index, const Tensor& feature) const;
    ad::ParamList parameters() const;

private:
    std::vector<nn::Conv2d> convs_;
};

// phi_2: per-entry mixing of the stacked per-tap matrices. A small ReLU MLP over the S
// entry values produces S logits; the fused entry is the softmax-weighted
// combination. The output layer starts at zero so the initial fusion is the mean
// (and a single tap passes through unchanged).
class FusionNet {
public:
    FusionNet() = default;
    FusionNet(const MotionConfig& config, nn::Rng& rng);

    Var forward(const std::vector<Var>& matrices) const;
    // Same result as forward, computed entry by entry without recording.
    Tensor fuse(const std::vector<Tensor>& matrices) const;
    ad::ParamList parameters() const;

private:
    nn::Linear hidden_;
    nn::Linear out_;
    std::size_t scales_ = 0;
};

// phi_3: weighted aggregation of the step matrices M_{t*}..M_T. Weights are a softmax
// over steps of logits computed from (position embedding of k, learned embedding of
// t*, matrix statistics of M_k); the logit layer starts at zero so the initial output
// is the exact mean. A learned gain (initially 1) scales the result.
class SurrogateNet {
public:
    SurrogateNet() = default;
    SurrogateNet(const MotionConfig& config, nn::Rng& rng);

    // step_matrices[k] = M_{t* + k}; the range must end at T.
    Var forward(const std::vector<Var>& step_matrices, int t_star) const;
    // Same result as forward, without recording the matrices.
    Tensor evaluate(const std::vector<Tensor>& step_matrices, int t_star) const;
    // Softmax logit of one step's matrix, and the output gain.
    double step_logit(const Tensor& matrix, int step, int t_star) const;
    double gain() const;
    ad::ParamList parameters() const;

private:
    Tensor step_features(const std::vector<const Tensor*>& step_matrices, int t_star) const;
    Var step_weights(const std::vector<const Tensor*>& step_matrices, int t_star) const;

    MotionConfig config_;
    ad::ParamPtr step_table_;  // (T + 1) x step_embedding
    nn::Linear hidden_;
    nn::Linear logit_;
    ad::ParamPtr gain_;
};

// phi_4: recurrent roll-out in displacement space. Each matrix is read as, for every
// target location q, the (2r+1)^2 entries M[q + d, q]; a 3x3 convolution embeds these
// and a gated recurrent cell (shared over locations) consumes the history. Each
// prediction is the previous matrix, rescaled and shifted by two scalars read from the
// location-averaged state, plus a window correction. Both heads start at zero, so the
// untrained predictor repeats the last observed matrix.
class MotionPredictor {
public:
    MotionPredictor() = default;
    MotionPredictor(const MotionConfig& config, nn::Rng& rng);

    std::vector<Var> forward(const std::vector<Var>& history, std::size_t horizon) const;
    ad::ParamList parameters() const;

    std::size_t window_size() const { return (2 * config_.window + 1) * (2 * config_.window + 1); }

private:
    Var encode(const Var& m) const;             // N x N -> [1, D, H, W]
    Var decode_add(const Var& base, const Var& delta) const;  // base + scatter(delta [N, D])

    MotionConfig config_;
    std::vector<std::size_t> gather_index_;  // N*D flat indices into N x N, or npos
    std::vector<double> valid_;              // N*D mask (1 inside the grid)
    nn::Conv2d embed_;
    nn::GruCell cell_;
    nn::Linear head_;
    nn::Linear global_;
};

struct MotionNets {
    MotionConfig config;
    FeatureProjector phi1;
    FusionNet phi2;
    SurrogateNet phi3;
    MotionPredictor phi4;

    MotionNets() = default;
    MotionNets(const MotionConfig& config, std::uint64_t seed);

    ad::ParamList parameters() const;
    ad::ParamList stage_parameters(int stage) const;  // 1: phi1+phi2, 2: phi3, 3: phi4

    void save(const std::filesystem::path& dir) const;
    static MotionNets load(const std::filesystem::path& dir);
};

// Projected, row-normalized tap features of one frame at one step (one N_s x C block
// per configured tap). Computing them once per frame lets every pair reuse them.
struct ProjectedTaps {
    std::vector<Tensor> features;
};
ProjectedTaps project_taps(const TapFeatures& taps, const MotionNets& nets);
// Fused raw matrix from projected taps, without recording; equals multi_scale_motion.
Tensor motion_matrix(const ProjectedTaps& a, const ProjectedTaps& b, const MotionNets& nets);

// Fused raw matrix for one step from the taps of frames i and j.
Var multi_scale_motion(const TapFeatures& taps_i, const TapFeatures& taps_j, const MotionNets& nets);
Var multi_scale_motion(const std::vector<Var>& taps_i, const std::vector<Var>& taps_j, const MotionNets& nets);
// Per-tap raw matrices upsampled to the fine grid (before fusion).
std::vector<Tensor> per_tap_motion(const TapFeatures& taps_i, const TapFeatures& taps_j, const MotionNets& nets);

// Streaming phi_3: step matrices are added one at a time (any order) and not kept; the
// softmax over steps is accumulated online. Equals surrogate() once every step
// t*..T has been added exactly once.
class SurrogateAccumulator {
public:
    SurrogateAccumulator(const MotionNets& nets, int t_star);

    void add(int step, const Tensor& matrix);
    Tensor result() const;

private:
    const MotionNets* nets_;
    int t_star_;
    std::vector<bool> seen_;
    Tensor acc_;
    double max_logit_;
    double norm_ = 0.0;
};

Var surrogate(const std::vector<Var>& step_matrices, int t_star, const MotionNets& nets);
Tensor surrogate(const std::vector<Tensor>& step_matrices, int t_star, const MotionNets& nets);

std::vector<Var> predict_motion(const std::vector<Var>& history, std::size_t horizon, const MotionNets& nets);
std::vector<Tensor> predict_motion(const std::vector<Tensor>& history, std::size_t horizon, const MotionNets& nets);

// --- losses ------------------------------------------------------------------------------

// Which residual the step-wise loss transports: the sampled dz_t (includes the step
// noise) or its noise-free posterior-mean part.
enum class ResidualSource { sampled, posterior_mean };
std::string to_string(ResidualSource s);
ResidualSource residual_source_from_string(const std::string& s);

// Mean-per-element L1 of apply_motion(source, normalize(M)) - target, x as C x H x W.
Var transport_l1(const Var& source_chw, const Var& target_chw, const Var& raw_matrix, double tau);

// Averages over the given steps of transport_l1 on residuals with the step matrices.
Var loss_visual_residual(const Trajectory& ti, const Trajectory& tj, const std::vector<int>& steps,
                         const MotionNets& nets, ResidualSource source = ResidualSource::posterior_mean);
Var loss_visual_latent(const Tensor& zi, const Tensor& zj, const Var& surrogate_raw, double tau);
Var loss_motion(const std::vector<Var>& predicted, const std::vector<Var>& truth);
double loss_motion(const std::vector<Tensor>& predicted, const std::vector<Tensor>& truth);

// Fused raw step matrices M_t for t = from_step..T (index t; lower indices empty), no gradient.
std::vector<Tensor> step_motions(const Trajectory& ti, const Trajectory& tj, const MotionNets& nets, int from_step = 1);

// Surrogate at t* for one frame pair, computed from the pair's step matrices without gradient.
Tensor pair_surrogate(const Trajectory& ti, const Trajectory& tj, int t_star, const MotionNets& nets);

// --- training ---------------------------------------------------------------------------

// Fully recorded trajectories (latents and taps at every step) of the first `frames`
// frames of clip `index`. Must be deterministic: the MTN trainer regenerates clips
// instead of holding every trajectory in memory.
using TrajectorySource = std::function<std::vector<Trajectory>(std::size_t index, std::size_t frames)>;

struct MtnTrainConfig {
    int epochs_stage1 = 4;
    int epochs_stage2 = 4;
    int epochs_stage3 = 40;
    std::size_t steps_per_clip = 16;  // residual steps subsampled per clip per epoch
    double lr = 3e-3;
    std::size_t reference_frames = 4;
    std::size_t frames = 16;
    std::vector<int> t_star_values;      // sampled for stages 2 and 3
    std::vector<double> t_star_weights;  // sampling weights (empty = uniform)
    ResidualSource residual_source = ResidualSource::posterior_mean;
    std::uint64_t seed = 0;
};

// Held-out loss split into its three terms.
struct TransLoss {
    double residual = 0.0;  // L_dz
    double latent = 0.0;    // L_z
    double motion = 0.0;    // L_motion
    double total() const { return residual + latent + motion; }
};

struct MtnTrainReport {
    std::vector<double> stage1, stage2, stage3;  // per-epoch mean losses
    TransLoss heldout_initial;
    TransLoss heldout_final;
    double seconds[3] = {0.0, 0.0, 0.0};  // wall-clock per stage
};

// Held-out total loss L_dz + L_z + L_motion over clips [0, count) of the source, with
// residual steps and t* draws fixed by the seed.
TransLoss total_loss(const TrajectorySource& source, std::size_t count, const MotionNets& nets,
                  const MtnTrainConfig& config, std::uint64_t seed);

// Staged training: stage 1 fits phi_1 and phi_2 on residual transport between the
// reference frames, stage 2 fits phi_3 on latent transport at sampled t*, stage 3 fits
// phi_4 on the surrogate sequences of whole clips. Other stages' parameters are frozen
// while a stage trains. Writes stage{1,2,3}.csv into csv_dir when non-empty.
MotionNets train_mtn(const TrajectorySource& train, std::size_t train_count, const TrajectorySource& heldout,
                     std::size_t heldout_count, const MotionConfig& model_config, const MtnTrainConfig& config,
                     const std::filesystem::path& csv_dir = {}, MtnTrainReport* report = nullptr);

}  // namespace drmo::motion
