#pragma once

#include "drmo/metrics.hpp"
#include "drmo/motion.hpp"
#include "drmo/nn.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace drmo::dss {

// Ordered candidate switch steps.
class CandidateSet {
public:
    CandidateSet() = default;
    explicit CandidateSet(std::vector<int> steps);
    // {stride, 2 stride, ..., T}
    static CandidateSet uniform(int stride, int T);

    const std::vector<int>& steps() const noexcept { return steps_; }
    std::size_t size() const noexcept { return steps_.size(); }
    int operator[](std::size_t k) const { return steps_.at(k); }
    int min() const { return steps_.front(); }
    int max() const { return steps_.back(); }
    std::size_t index_of(int step) const;  // throws when absent
    bool contains(int step) const;

private:
    std::vector<int> steps_;
};

// 2 e / min(candidates): the smallest candidate gets weight log(2 e).
double default_beta(const CandidateSet& candidates);

// e_t over the candidates: transformation error of z_t^i -> z_t^j under the column
// softmax of the mean raw step matrix over steps t..T. `step_matrices[t]` must hold
// the fused raw matrix for every t >= min(candidates).
std::vector<double> error_curve(const std::vector<Tensor>& step_matrices, const diffusion::Trajectory& ti,
                                const diffusion::Trajectory& tj, double tau, const CandidateSet& candidates);
std::vector<double> error_curve(const diffusion::Trajectory& ti, const diffusion::Trajectory& tj,
                                const motion::MotionNets& nets, const CandidateSet& candidates);

// log(beta t) e_t for one candidate.
double weighted_error(int t, double e, double beta);

// argmin over the candidates of log(beta t) e_t; ties go to the smaller step.
int gt_switch_step(const std::vector<double>& errors, const CandidateSet& candidates, double beta);

// --- selector -------------------------------------------------------------------------

// Per-candidate statistics of one frame pair: NMI of consecutive raw step matrices
// (NMI(M_t, M_t+1), or NMI(M_T-1, M_T) at t = T) and the error curve.
struct PairStats {
    std::vector<double> nmi;
    std::vector<double> error;
};

PairStats pair_stats(const std::vector<Tensor>& step_matrices, const diffusion::Trajectory& ti,
                     const diffusion::Trajectory& tj, double tau, const CandidateSet& candidates,
                     const metrics::HistogramSpec& spec = {});

struct DssSample {
    std::string clip;
    int frame_i = 0;
    int frame_j = 0;
    PairStats stats;
    int t_star = 0;
    std::size_t label = 0;  // index of t_star in the candidate set
};

// Selector input rows (t / T, NMI, log e_t, observed bit); masked rows are zero apart
// from the step position. mask[k] = true marks step k as observed.
Tensor selector_features(const PairStats& stats, const CandidateSet& candidates, int T, const std::vector<bool>& mask);

// Random observation mask: each step hidden with probability `rate`; an all-hidden
// draw is redrawn.
std::vector<bool> draw_mask(std::size_t length, double rate, nn::Rng& rng);

struct SelectorConfig {
    std::size_t hidden = 32;
    int T = 100;
};

// Gated recurrent cell over the per-step rows (from T down to the smallest candidate),
// then a linear head over the candidates.
class SelectorNet {
public:
    SelectorNet() = default;
    SelectorNet(const SelectorConfig& config, const CandidateSet& candidates, std::uint64_t seed);

    // features: B sequences of L rows each, as a [L, B, 4] tensor; returns logits [B, |T|].
    ad::Var logits(const ad::Var& features) const;
    // Class probabilities for one sequence ([L, 4] rows).
    std::vector<double> probabilities(const Tensor& features) const;

    const SelectorConfig& config() const noexcept { return config_; }
    const CandidateSet& candidates() const noexcept { return candidates_; }
    ad::ParamList parameters() const;

    void save(const std::filesystem::path& dir) const;
    static SelectorNet load(const std::filesystem::path& dir);

private:
    SelectorConfig config_;
    CandidateSet candidates_;
    nn::GruCell cell_;
    nn::Linear head_;
};

// argmax class (ties to the smaller step) mapped to its candidate step.
int predict_switch(const SelectorNet& net, const PairStats& stats, const std::vector<bool>& mask);

struct DssTrainConfig {
    int epochs = 60;
    std::size_t batch_size = 16;
    double lr = 3e-3;
    double mask_rate = 0.5;
    std::uint64_t seed = 0;
};

struct DssTrainReport {
    std::vector<double> train_loss;        // per epoch mean cross-entropy
    std::vector<double> heldout_accuracy;  // top-1 with every step observed
    std::vector<double> heldout_masked_accuracy;  // top-1 under fixed seeded masks
};

// Top-1 accuracy; when mask_rate > 0 the masks are drawn from `seed`.
double accuracy(const SelectorNet& net, const std::vector<DssSample>& samples, double mask_rate, std::uint64_t seed);

// Mean cross-entropy of the selector on fully observed samples.
double cross_entropy(const SelectorNet& net, const std::vector<DssSample>& samples);

// Writes "epoch,train_loss,heldout_accuracy,heldout_masked_accuracy" rows when csv_path is set.
SelectorNet train_dss(const std::vector<DssSample>& train, const std::vector<DssSample>& heldout,
                      const CandidateSet& candidates, const SelectorConfig& model_config, const DssTrainConfig& config,
                      const std::filesystem::path& csv_path = {}, DssTrainReport* report = nullptr);

// dss_labels.csv: clip,frame_i,frame_j,t_star,beta,e_<t>... for each candidate.
void write_labels_csv(const std::filesystem::path& path, const std::vector<DssSample>& samples,
                      const CandidateSet& candidates, double beta);
std::vector<DssSample> read_labels_csv(const std::filesystem::path& path, const CandidateSet& candidates);

}  // namespace drmo::dss
