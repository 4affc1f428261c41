#include "drmo/pipeline.hpp"

#include "drmo/image_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace drmo::pipeline {

namespace {

using nlohmann::json;

// Rejects keys outside `allowed` so that typos in a config file do not pass silently.
void check_keys(const json& j, const std::string& group, const std::set<std::string>& allowed)
{
    if (!j.is_object()) throw ValidationError("config: '" + group + "' must be an object");
    for (const auto& item : j.items()) {
        if (!allowed.count(item.key())) {
            throw ValidationError("config: unknown key '" + (group.empty() ? "" : group + ".") + item.key() + "'");
        }
    }
}

template <typename T>
void read(const json& j, const char* key, T& out)
{
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

void read_path(const json& j, const char* key, std::filesystem::path& out)
{
    std::string s = out.string();
    read(j, key, s);
    out = s;
}

double seconds_since(std::chrono::steady_clock::time_point start)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

Tensor decode(const Tensor& latent)
{
    static const video::LatentCodec codec;
    return codec.decode_frame(latent);
}

Tensor encode(const Tensor& rgb)
{
    static const video::LatentCodec codec;
    return codec.encode_frame(rgb);
}

void check_guide(const PipelineConfig& config, const video::VideoClip& guide)
{
    if (static_cast<int>(guide.frames.size()) < config.frames) {
        throw ValidationError("guide clip has " + std::to_string(guide.frames.size()) + " frames, need " +
                              std::to_string(config.frames));
    }
}

const motion::MotionNets& require_mtn(const Models& models)
{
    if (!models.mtn) throw ValidationError("motion networks are not loaded");
    return *models.mtn;
}

// Fused step matrices between recorded reference frames, with the projected taps of
// each frame computed once per step and shared by the two pairs a frame belongs to.
class ReferenceMotion {
public:
    ReferenceMotion(const std::vector<diffusion::Trajectory>& refs, const motion::MotionNets& nets)
        : refs_(refs), nets_(nets), projected_(refs.size())
    {
    }

    // Matrices M_t of pair (f, f + 1) for t = lo..T (index t).
    std::vector<Tensor> pair(std::size_t f, int lo)
    {
        const int T = nets_.config.T;
        std::vector<Tensor> out(static_cast<std::size_t>(T) + 1);
        for (int t = lo; t <= T; ++t) {
            out[t] = motion::motion_matrix(projected(f, t), projected(f + 1, t), nets_);
        }
        return out;
    }

    // Surrogate of pair (f, f + 1) at t, streamed over the steps without keeping them.
    Tensor surrogate(std::size_t f, int t)
    {
        motion::SurrogateAccumulator acc(nets_, t);
        for (int k = nets_.config.T; k >= t; --k) {
            acc.add(k, motion::motion_matrix(projected(f, k), projected(f + 1, k), nets_));
        }
        return acc.result();
    }

private:
    const motion::ProjectedTaps& projected(std::size_t f, int t)
    {
        auto& frame = projected_[f];
        if (frame.empty()) frame.resize(static_cast<std::size_t>(nets_.config.T) + 1);
        auto& slot = frame[t];
        if (slot.features.empty()) slot = motion::project_taps(refs_[f].taps_at(t), nets_);
        return slot;
    }

    const std::vector<diffusion::Trajectory>& refs_;
    const motion::MotionNets& nets_;
    std::vector<std::vector<motion::ProjectedTaps>> projected_;
};

std::vector<Tensor> tail_from(const std::vector<Tensor>& matrices, int t)
{
    return {matrices.begin() + t, matrices.end()};
}

Tensor propagate(const Tensor& z, const Tensor& raw, double tau)
{
    const Tensor moved = motion::apply_motion(motion::to_locations(z), motion::normalize_motion(raw, tau));
    return motion::from_locations(moved, z.dim(1), z.dim(2));
}

// Surrogates of consecutive reference pairs at t, then the predicted continuation.
std::vector<Tensor> motion_sequence(ReferenceMotion& motion_cache, std::size_t references, int t, std::size_t horizon,
                                    const motion::MotionNets& nets, std::vector<Tensor> last_pair = {})
{
    std::vector<Tensor> history;
    for (std::size_t f = 0; f + 1 < references; ++f) {
        if (f + 2 == references && !last_pair.empty()) {
            history.push_back(motion::surrogate(tail_from(last_pair, t), t, nets));
        } else {
            history.push_back(motion_cache.surrogate(f, t));
        }
    }
    std::vector<Tensor> sequence = history;
    if (horizon > 0) {
        auto predicted = motion::predict_motion(history, horizon, nets);
        sequence.insert(sequence.end(), predicted.begin(), predicted.end());
    }
    return sequence;
}

void check_forced(const PipelineConfig& config, int t)
{
    if (t < 1 || t > config.T) {
        throw ValidationError("forced switch step " + std::to_string(t) + " outside [1, " + std::to_string(config.T) +
                              "]");
    }
}

std::string csv_number(double v)
{
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

std::ofstream open_csv(const std::filesystem::path& path)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    return os;
}

}  // namespace

// --- configuration -------------------------------------------------------------------

double PipelineConfig::effective_beta() const
{
    return beta > 0.0 ? beta : dss::default_beta(candidates());
}

diffusion::NoiseSchedule PipelineConfig::make_schedule() const
{
    return diffusion::make_schedule(T, schedule, beta_min, beta_max);
}

diffusion::UNetConfig PipelineConfig::unet_config() const
{
    diffusion::UNetConfig c;
    c.fine_channels = fine_channels;
    c.coarse_channels = coarse_channels;
    c.T = T;
    return c;
}

motion::MotionConfig PipelineConfig::motion_config() const
{
    motion::MotionConfig c;
    c.fine_channels = fine_channels;
    c.coarse_channels = coarse_channels;
    c.tau = tau;
    c.T = T;
    return c;
}

void PipelineConfig::validate() const
{
    auto fail = [](const std::string& msg) { throw ValidationError("config: " + msg); };
    if (T < 2) fail("T must be at least 2");
    if (!(beta_min > 0.0) || !(beta_max > beta_min) || !(beta_max < 1.0)) fail("need 0 < beta_min < beta_max < 1");
    if (fine_channels == 0 || coarse_channels == 0) fail("channel counts must be positive");
    if (reference_frames < 2) fail("reference_frames must be at least 2");
    if (frames < reference_frames) fail("frames must be at least reference_frames");
    if (candidate_stride < 1 || candidate_stride > T) fail("candidate_stride must lie in [1, T]");
    if (T % candidate_stride != 0) fail("candidate_stride must divide T");
    if (beta < 0.0) fail("beta must be non-negative (0 selects the default)");
    if (beta > 0.0 && beta * candidate_stride <= 1.0) fail("beta * min(candidates) must exceed 1");
    if (!(tau > 0.0)) fail("tau must be positive");
    if (!(mask_rate >= 0.0 && mask_rate < 1.0)) fail("mask_rate must lie in [0, 1)");
    if (jitter_levels.empty()) fail("jitter_levels must not be empty");
    for (double j : jitter_levels) {
        if (!(j >= 0.0)) fail("jitter levels must be non-negative");
    }
    if (denoiser_clips == 0 || denoiser_batch == 0 || denoiser_epochs < 1) fail("denoiser training sizes must be positive");
    if (mtn_clips == 0 || mtn_heldout_clips == 0) fail("mtn clip counts must be positive");
    if (mtn_epochs_stage1 < 0 || mtn_epochs_stage2 < 0 || mtn_epochs_stage3 < 0) fail("mtn epochs must be >= 0");
    if (mtn_steps_per_clip == 0) fail("mtn_steps_per_clip must be positive");
    if (dss_clips == 0 || dss_heldout_clips == 0 || dss_epochs < 1 || dss_hidden == 0) fail("dss sizes must be positive");
    if (!(denoiser_lr > 0.0) || !(mtn_lr > 0.0) || !(dss_lr > 0.0)) fail("learning rates must be positive");
}

PipelineConfig config_from_json(const std::string& text)
{
    json root;
    try {
        root = json::parse(text);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config: invalid JSON: ") + e.what());
    }
    check_keys(root, "", {"seed", "diffusion", "video", "pipeline", "training", "checkpoints"});
    PipelineConfig c;
    read(root, "seed", c.seed);
    if (root.contains("diffusion")) {
        const auto& d = root["diffusion"];
        check_keys(d, "diffusion", {"T", "schedule", "beta_min", "beta_max", "fine_channels", "coarse_channels"});
        read(d, "T", c.T);
        if (d.contains("schedule")) {
            try {
                c.schedule = diffusion::schedule_kind_from_string(d["schedule"].get<std::string>());
            } catch (const std::exception& e) {
                throw ValidationError(std::string("config: diffusion.schedule: ") + e.what());
            }
        }
        read(d, "beta_min", c.beta_min);
        read(d, "beta_max", c.beta_max);
        read(d, "fine_channels", c.fine_channels);
        read(d, "coarse_channels", c.coarse_channels);
    }
    if (root.contains("video")) {
        const auto& v = root["video"];
        check_keys(v, "video", {"frames", "jitter_levels"});
        read(v, "frames", c.frames);
        read(v, "jitter_levels", c.jitter_levels);
    }
    if (root.contains("pipeline")) {
        const auto& p = root["pipeline"];
        check_keys(p, "pipeline",
                   {"reference_frames", "candidate_stride", "beta", "tau", "mask_rate", "shared_noise"});
        read(p, "reference_frames", c.reference_frames);
        read(p, "candidate_stride", c.candidate_stride);
        read(p, "beta", c.beta);
        read(p, "tau", c.tau);
        read(p, "mask_rate", c.mask_rate);
        read(p, "shared_noise", c.shared_noise);
    }
    if (root.contains("training")) {
        const auto& t = root["training"];
        check_keys(t, "training", {"denoiser", "mtn", "dss"});
        if (t.contains("denoiser")) {
            const auto& d = t["denoiser"];
            check_keys(d, "training.denoiser", {"clips", "epochs", "batch", "lr"});
            read(d, "clips", c.denoiser_clips);
            read(d, "epochs", c.denoiser_epochs);
            read(d, "batch", c.denoiser_batch);
            read(d, "lr", c.denoiser_lr);
        }
        if (t.contains("mtn")) {
            const auto& m = t["mtn"];
            check_keys(m, "training.mtn",
                       {"clips", "heldout_clips", "epochs_stage1", "epochs_stage2", "epochs_stage3", "steps_per_clip",
                        "lr", "residual_source"});
            read(m, "clips", c.mtn_clips);
            read(m, "heldout_clips", c.mtn_heldout_clips);
            read(m, "epochs_stage1", c.mtn_epochs_stage1);
            read(m, "epochs_stage2", c.mtn_epochs_stage2);
            read(m, "epochs_stage3", c.mtn_epochs_stage3);
            read(m, "steps_per_clip", c.mtn_steps_per_clip);
            read(m, "lr", c.mtn_lr);
            if (m.contains("residual_source")) {
                try {
                    c.residual_source = motion::residual_source_from_string(m["residual_source"].get<std::string>());
                } catch (const std::exception& e) {
                    throw ValidationError(std::string("config: training.mtn.residual_source: ") + e.what());
                }
            }
        }
        if (t.contains("dss")) {
            const auto& d = t["dss"];
            check_keys(d, "training.dss", {"clips", "heldout_clips", "epochs", "lr", "hidden"});
            read(d, "clips", c.dss_clips);
            read(d, "heldout_clips", c.dss_heldout_clips);
            read(d, "epochs", c.dss_epochs);
            read(d, "lr", c.dss_lr);
            read(d, "hidden", c.dss_hidden);
        }
    }
    if (root.contains("checkpoints")) {
        const auto& k = root["checkpoints"];
        check_keys(k, "checkpoints", {"denoiser", "mtn", "selector"});
        read_path(k, "denoiser", c.denoiser_dir);
        read_path(k, "mtn", c.mtn_dir);
        read_path(k, "selector", c.selector_dir);
    }
    c.validate();
    return c;
}

PipelineConfig load_config(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is) throw ValidationError("config file not found: " + path.string());
    std::stringstream buffer;
    buffer << is.rdbuf();
    PipelineConfig c = config_from_json(buffer.str());
    // Relative checkpoint paths are resolved against the config file's directory.
    const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    for (auto* p : {&c.denoiser_dir, &c.mtn_dir, &c.selector_dir}) {
        if (p->is_relative()) *p = base / *p;
    }
    return c;
}

std::string config_to_json(const PipelineConfig& c)
{
    json root = {
        {"seed", c.seed},
        {"diffusion",
         {{"T", c.T},
          {"schedule", diffusion::to_string(c.schedule)},
          {"beta_min", c.beta_min},
          {"beta_max", c.beta_max},
          {"fine_channels", c.fine_channels},
          {"coarse_channels", c.coarse_channels}}},
        {"video", {{"frames", c.frames}, {"jitter_levels", c.jitter_levels}}},
        {"pipeline",
         {{"reference_frames", c.reference_frames},
          {"candidate_stride", c.candidate_stride},
          {"beta", c.beta},
          {"tau", c.tau},
          {"mask_rate", c.mask_rate},
          {"shared_noise", c.shared_noise}}},
        {"training",
         {{"denoiser",
           {{"clips", c.denoiser_clips}, {"epochs", c.denoiser_epochs}, {"batch", c.denoiser_batch}, {"lr", c.denoiser_lr}}},
          {"mtn",
           {{"clips", c.mtn_clips},
            {"heldout_clips", c.mtn_heldout_clips},
            {"epochs_stage1", c.mtn_epochs_stage1},
            {"epochs_stage2", c.mtn_epochs_stage2},
            {"epochs_stage3", c.mtn_epochs_stage3},
            {"steps_per_clip", c.mtn_steps_per_clip},
            {"lr", c.mtn_lr},
            {"residual_source", motion::to_string(c.residual_source)}}},
          {"dss",
           {{"clips", c.dss_clips},
            {"heldout_clips", c.dss_heldout_clips},
            {"epochs", c.dss_epochs},
            {"lr", c.dss_lr},
            {"hidden", c.dss_hidden}}}}},
        {"checkpoints",
         {{"denoiser", c.denoiser_dir.generic_string()},
          {"mtn", c.mtn_dir.generic_string()},
          {"selector", c.selector_dir.generic_string()}}},
    };
    return root.dump(2);
}

// --- data --------------------------------------------------------------------------------

std::uint64_t clip_seed(std::uint64_t base, Split split, std::size_t index)
{
    return nn::Rng::derive(base, (static_cast<std::uint64_t>(split) << 32) | index).next();
}

video::VideoClip make_clip(std::uint64_t seed, double jitter, int frames)
{
    return video::generate_clip(video::random_spec(seed, jitter), frames, seed);
}

double split_jitter(const PipelineConfig& config, std::size_t index)
{
    return config.jitter_levels[index % config.jitter_levels.size()];
}

// --- models -------------------------------------------------------------------------------

Models load_models(const PipelineConfig& config, bool need_mtn, bool need_selector)
{
    auto require = [](const std::filesystem::path& dir, const char* what) {
        if (!std::filesystem::is_directory(dir)) {
            throw ValidationError(std::string(what) + " checkpoint not found: " + dir.string());
        }
    };
    require(config.denoiser_dir, "denoiser");
    Models models{diffusion::UNet::load(config.denoiser_dir), std::nullopt, std::nullopt};
    if (models.denoiser.config().T != config.T) throw ValidationError("denoiser checkpoint was trained for another T");
    if (need_mtn) {
        require(config.mtn_dir, "mtn");
        models.mtn = motion::MotionNets::load(config.mtn_dir);
        if (models.mtn->config.T != config.T) throw ValidationError("mtn checkpoint was trained for another T");
    }
    if (need_selector) {
        require(config.selector_dir, "selector");
        models.selector = dss::SelectorNet::load(config.selector_dir);
        if (models.selector->candidates().steps() != config.candidates().steps()) {
            throw ValidationError("selector checkpoint uses another candidate set");
        }
    }
    return models;
}

// --- generation ------------------------------------------------------------------------------

nn::Rng frame_rng(const PipelineConfig& config, std::uint64_t seed, int frame)
{
    return nn::Rng::derive(seed, config.shared_noise ? 100 : 100 + static_cast<std::uint64_t>(frame));
}

diffusion::Trajectory sample_frame(const PipelineConfig& config, const diffusion::Denoiser& model,
                                   const diffusion::NoiseSchedule& schedule, const Tensor& guide_latent, int frame,
                                   std::uint64_t seed, const diffusion::SampleOptions& options)
{
    nn::Rng rng = frame_rng(config, seed, frame);
    const Tensor eps = rng.normal_tensor(guide_latent.shape());
    const auto zT = diffusion::forward_noise({frame, 0, guide_latent}, schedule.T, eps, schedule);
    return diffusion::sample(model, schedule, zT.data, schedule.T, frame, rng, options);
}

diffusion::Trajectory denoise_from(const PipelineConfig& config, const diffusion::Denoiser& model,
                                   const diffusion::NoiseSchedule& schedule, const Tensor& z_start, int start,
                                   int frame, std::uint64_t seed)
{
    nn::Rng rng = config.shared_noise ? frame_rng(config, seed, frame)
                                      : nn::Rng::derive(seed, 0x70726f70 + static_cast<std::uint64_t>(frame));
    if (config.shared_noise) {
        // Line the shared stream up with the reference frames: skip the initial draw
        // and the steps above `start`.
        rng.normal_tensor(z_start.shape());
        for (int t = schedule.T; t > start; --t) rng.normal_tensor(z_start.shape());
    }
    diffusion::SampleOptions options;
    options.record_latents = false;
    return diffusion::sample(model, schedule, z_start, start, frame, rng, options);
}

SwitchDecision select_switch(const PipelineConfig& config, const Models& models, const diffusion::Trajectory& ti,
                             const diffusion::Trajectory& tj, std::uint64_t seed)
{
    const auto& nets = require_mtn(models);
    if (!models.selector) throw ValidationError("selector is not loaded");
    const auto candidates = config.candidates();
    const auto steps = motion::step_motions(ti, tj, nets, candidates.min());
    SwitchDecision d;
    d.stats = dss::pair_stats(steps, ti, tj, config.tau, candidates);
    nn::Rng rng = nn::Rng::derive(seed, 0x6d61736b);
    d.mask = dss::draw_mask(candidates.size(), config.mask_rate, rng);
    d.t_hat = dss::predict_switch(*models.selector, d.stats, d.mask);
    if (!candidates.contains(d.t_hat)) throw std::logic_error("selector returned a step outside the candidate set");
    return d;
}

GenerationResult generate_baseline(const PipelineConfig& config, const Models& models, const video::VideoClip& guide,
                                   std::uint64_t seed)
{
    check_guide(config, guide);
    const auto schedule = config.make_schedule();
    GenerationResult result;
    const auto start = std::chrono::steady_clock::now();
    const auto evals_before = diffusion::denoiser_evals();
    for (int f = 0; f < config.frames; ++f) {
        const auto traj = sample_frame(config, models.denoiser, schedule, encode(guide.frames[f]), f, seed, record_none());
        result.latents.push_back(traj.latent(0));
        result.frames.push_back(decode(traj.latent(0)));
        result.provenance.push_back(Provenance::reference);
        result.switch_latents.emplace_back();
    }
    result.evals = diffusion::denoiser_evals() - evals_before;
    result.seconds = seconds_since(start);
    result.t_hat = config.T;
    return result;
}

DrmoResult generate_drmo(const PipelineConfig& config, const Models& models, const video::VideoClip& guide,
                         std::uint64_t seed, const DrmoOptions& options)
{
    check_guide(config, guide);
    if (options.forced_t) check_forced(config, *options.forced_t);
    const auto schedule = config.make_schedule();
    const auto R = static_cast<std::size_t>(config.reference_frames);
    const auto K = static_cast<std::size_t>(config.horizon());

    DrmoResult out;
    GenerationResult& result = out.generation;
    const auto start = std::chrono::steady_clock::now();
    const auto evals_before = diffusion::denoiser_evals();

    // References keep their taps and the latents at the steps a switch may happen.
    diffusion::SampleOptions ref_options = record_none();
    if (K > 0) {
        ref_options.record_taps = true;
        ref_options.keep_steps = options.forced_t ? std::vector<int>{*options.forced_t} : config.candidates().steps();
    }
    std::vector<diffusion::Trajectory> refs;
    for (std::size_t f = 0; f < R; ++f) {
        const int frame = static_cast<int>(f);
        refs.push_back(sample_frame(config, models.denoiser, schedule, encode(guide.frames[f]), frame, seed, ref_options));
        result.latents.push_back(refs.back().latent(0));
        result.frames.push_back(decode(refs.back().latent(0)));
        result.provenance.push_back(Provenance::reference);
        result.switch_latents.emplace_back();
    }

    if (K > 0) {
        const auto& nets = require_mtn(models);
        ReferenceMotion motion_cache(refs, nets);
        std::vector<Tensor> last_pair;
        int t_hat = 0;
        if (options.forced_t) {
            t_hat = *options.forced_t;
        } else {
            if (!models.selector) throw ValidationError("selector is not loaded");
            const auto candidates = config.candidates();
            last_pair = motion_cache.pair(R - 2, candidates.min());
            out.stats = dss::pair_stats(last_pair, refs[R - 2], refs[R - 1], config.tau, candidates);
            nn::Rng rng = nn::Rng::derive(seed, 0x6d61736b);
            out.mask = dss::draw_mask(candidates.size(), config.mask_rate, rng);
            t_hat = dss::predict_switch(*models.selector, out.stats, out.mask);
            if (!candidates.contains(t_hat)) throw std::logic_error("selector returned a step outside the candidate set");
        }
        result.t_hat = t_hat;

        const auto sequence = motion_sequence(motion_cache, R, t_hat, K, nets, std::move(last_pair));
        Tensor z = refs[R - 1].latent(t_hat);
        for (std::size_t j = 0; j < K; ++j) {
            const int frame = static_cast<int>(R + j);
            z = propagate(z, sequence[R - 1 + j], config.tau);
            const auto traj = denoise_from(config, models.denoiser, schedule, z, t_hat, frame, seed);
            result.switch_latents.push_back(z);
            result.latents.push_back(traj.latent(0));
            result.frames.push_back(decode(traj.latent(0)));
            result.provenance.push_back(Provenance::propagated);
        }
    }
    result.evals = diffusion::denoiser_evals() - evals_before;
    result.seconds = seconds_since(start);
    return out;
}

BenchReport bench(const PipelineConfig& config, const Models& models, const video::VideoClip& guide, std::uint64_t seed,
                  const DrmoOptions& options, GenerationResult* baseline_out, GenerationResult* drmo_out)
{
    GenerationResult baseline = generate_baseline(config, models, guide, seed);
    GenerationResult drmo = generate_drmo(config, models, guide, seed, options).generation;

    BenchReport r;
    r.baseline_evals = baseline.evals;
    r.drmo_evals = drmo.evals;
    r.t_hat = drmo.t_hat;
    r.expected_drmo_evals = static_cast<std::uint64_t>(config.reference_frames) * config.T +
                            static_cast<std::uint64_t>(config.horizon()) * static_cast<std::uint64_t>(drmo.t_hat);
    r.baseline_seconds = baseline.seconds;
    r.drmo_seconds = drmo.seconds;
    r.eval_speedup = static_cast<double>(r.baseline_evals) / static_cast<double>(r.drmo_evals);
    r.wall_speedup = r.baseline_seconds / r.drmo_seconds;
    r.provenance = drmo.provenance;
    for (std::size_t f = 0; f < drmo.frames.size(); ++f) {
        r.frame_ssim.push_back(metrics::ssim(drmo.frames[f], baseline.frames[f]));
    }
    r.propagated_ssim = config.horizon() > 0 ? propagated_quality(drmo, baseline) : 1.0;
    if (baseline_out) *baseline_out = std::move(baseline);
    if (drmo_out) *drmo_out = std::move(drmo);
    return r;
}

double propagated_quality(const GenerationResult& drmo, const GenerationResult& baseline)
{
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t f = 0; f < drmo.frames.size(); ++f) {
        if (drmo.provenance[f] != Provenance::propagated) continue;
        sum += metrics::ssim(drmo.frames[f], baseline.frames.at(f));
        ++n;
    }
    if (n == 0) throw std::invalid_argument("propagated_quality: no propagated frames");
    return sum / static_cast<double>(n);
}

double shuffled_quality(const GenerationResult& drmo, const GenerationResult& baseline)
{
    const std::size_t F = baseline.frames.size();
    if (F < 2) throw std::invalid_argument("shuffled_quality: need at least two frames");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t f = 0; f < drmo.frames.size(); ++f) {
        if (drmo.provenance[f] != Provenance::propagated) continue;
        sum += metrics::ssim(drmo.frames[f], baseline.frames[(f + F / 2) % F]);
        ++n;
    }
    if (n == 0) throw std::invalid_argument("shuffled_quality: no propagated frames");
    return sum / static_cast<double>(n);
}

std::vector<AblationRow> ablation_sweep(const PipelineConfig& config, const Models& models, const video::VideoClip& guide,
                                        std::uint64_t seed, const std::vector<int>& t_values)
{
    if (t_values.empty()) throw ValidationError("ablation: no switch steps given");
    for (int t : t_values) check_forced(config, t);
    if (config.horizon() == 0) throw ValidationError("ablation: no frames to propagate (frames == reference_frames)");
    const auto baseline = generate_baseline(config, models, guide, seed);
    std::vector<AblationRow> rows;
    for (int t : t_values) {
        DrmoOptions options;
        options.forced_t = t;
        const auto drmo = generate_drmo(config, models, guide, seed, options).generation;
        rows.push_back({t, drmo.evals, propagated_quality(drmo, baseline)});
    }
    return rows;
}

ConsistencyAblation consistency_ablation(const PipelineConfig& config, const Models& models,
                                         const video::VideoClip& high, const video::VideoClip& low, std::uint64_t seed)
{
    check_guide(config, high);
    check_guide(config, low);
    const auto& nets = require_mtn(models);
    const auto schedule = config.make_schedule();
    const int i = config.reference_frames - 2;
    const int j = config.reference_frames - 1;
    auto run = [&](const video::VideoClip& clip, int& t_hat, metrics::ConsistencyProfile& profile) {
        const auto ti = sample_frame(config, models.denoiser, schedule, encode(clip.frames[i]), i, seed, record_all());
        const auto tj = sample_frame(config, models.denoiser, schedule, encode(clip.frames[j]), j, seed, record_all());
        t_hat = select_switch(config, models, ti, tj, seed).t_hat;
        profile = metrics::profile(ti, tj, nets);
    };
    ConsistencyAblation r;
    run(high, r.t_high, r.profile_high);
    run(low, r.t_low, r.profile_low);
    return r;
}

std::string to_string(Restyle r)
{
    switch (r) {
    case Restyle::identity: return "identity";
    case Restyle::swap_rb: return "swap_rb";
    case Restyle::invert: return "invert";
    }
    throw std::invalid_argument("unknown restyle");
}

Restyle restyle_from_string(const std::string& s)
{
    if (s == "identity") return Restyle::identity;
    if (s == "swap_rb") return Restyle::swap_rb;
    if (s == "invert") return Restyle::invert;
    throw ValidationError("unknown restyle '" + s + "' (expected identity, swap_rb or invert)");
}

Tensor restyle(const Tensor& rgb, Restyle r)
{
    if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("restyle: expected 3 x H x W, got " + shape_str(rgb.shape()));
    if (r == Restyle::identity) return rgb;
    Tensor out(rgb.shape());
    const std::size_t plane = rgb.dim(1) * rgb.dim(2);
    for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src = r == Restyle::swap_rb ? 2 - c : c;
        for (std::size_t k = 0; k < plane; ++k) {
            const double v = rgb[src * plane + k];
            out[c * plane + k] = r == Restyle::invert ? 1.0 - v : v;
        }
    }
    return out;
}

GenerationResult edit_video(const PipelineConfig& config, const Models& models, const video::VideoClip& reference,
                            const Tensor& restyled_first, std::uint64_t seed, std::optional<int> forced_t)
{
    check_guide(config, reference);
    if (restyled_first.shape() != reference.frames.front().shape()) {
        throw ValidationError("edit: restyled frame is " + shape_str(restyled_first.shape()) + ", clip frames are " +
                              shape_str(reference.frames.front().shape()));
    }
    if (forced_t) check_forced(config, *forced_t);
    const auto& nets = require_mtn(models);
    const auto schedule = config.make_schedule();
    const auto R = static_cast<std::size_t>(config.reference_frames);
    const auto F = static_cast<std::size_t>(config.frames);

    GenerationResult result;
    const auto start = std::chrono::steady_clock::now();
    const auto evals_before = diffusion::denoiser_evals();

    std::vector<diffusion::Trajectory> refs;
    for (std::size_t f = 0; f < R; ++f) {
        refs.push_back(
            sample_frame(config, models.denoiser, schedule, encode(reference.frames[f]), static_cast<int>(f), seed, record_all()));
    }
    int t_hat = forced_t ? *forced_t : select_switch(config, models, refs[R - 2], refs[R - 1], seed).t_hat;
    result.t_hat = t_hat;

    ReferenceMotion motion_cache(refs, nets);
    const auto sequence = motion_sequence(motion_cache, R, t_hat, F - R, nets);

    const auto first = sample_frame(config, models.denoiser, schedule, encode(restyled_first), 0, seed, record_all());
    result.latents.push_back(first.latent(0));
    result.frames.push_back(decode(first.latent(0)));
    result.provenance.push_back(Provenance::reference);
    result.switch_latents.emplace_back();

    Tensor z = first.latent(t_hat);
    for (std::size_t f = 1; f < F; ++f) {
        z = propagate(z, sequence[f - 1], config.tau);
        const auto traj = denoise_from(config, models.denoiser, schedule, z, t_hat, static_cast<int>(f), seed);
        result.switch_latents.push_back(z);
        result.latents.push_back(traj.latent(0));
        result.frames.push_back(decode(traj.latent(0)));
        result.provenance.push_back(Provenance::propagated);
    }
    result.evals = diffusion::denoiser_evals() - evals_before;
    result.seconds = seconds_since(start);
    return result;
}

// --- training drivers ---------------------------------------------------------------------------

motion::TrajectorySource trajectory_source(const PipelineConfig& config, const diffusion::UNet& denoiser, Split split)
{
    const auto schedule = config.make_schedule();
    return [config, schedule, &denoiser, split](std::size_t index, std::size_t frames) {
        const std::uint64_t seed = clip_seed(config.seed, split, index);
        const auto clip = make_clip(seed, split_jitter(config, index), config.frames);
        if (frames > clip.frames.size()) throw std::out_of_range("trajectory source: too many frames requested");
        std::vector<diffusion::Trajectory> out;
        for (std::size_t f = 0; f < frames; ++f) {
            out.push_back(
                sample_frame(config, denoiser, schedule, encode(clip.frames[f]), static_cast<int>(f), seed, record_all()));
        }
        return out;
    };
}

dss::DssSample label_clip(const PipelineConfig& config, const Models& models, const video::VideoClip& clip,
                          std::uint64_t seed, const std::string& clip_id)
{
    check_guide(config, clip);
    const auto& nets = require_mtn(models);
    const auto schedule = config.make_schedule();
    const auto candidates = config.candidates();
    const int i = config.reference_frames - 2;
    const int j = config.reference_frames - 1;
    const auto ti = sample_frame(config, models.denoiser, schedule, encode(clip.frames[i]), i, seed, record_all());
    const auto tj = sample_frame(config, models.denoiser, schedule, encode(clip.frames[j]), j, seed, record_all());
    const auto steps = motion::step_motions(ti, tj, nets, candidates.min());
    dss::DssSample s;
    s.clip = clip_id;
    s.frame_i = i;
    s.frame_j = j;
    s.stats = dss::pair_stats(steps, ti, tj, config.tau, candidates);
    s.t_star = dss::gt_switch_step(s.stats.error, candidates, config.effective_beta());
    s.label = candidates.index_of(s.t_star);
    return s;
}

// --- reports ---------------------------------------------------------------------------------------

void write_frames_png(const std::filesystem::path& dir, const std::string& prefix, const std::vector<Tensor>& frames)
{
    std::filesystem::create_directories(dir);
    for (std::size_t f = 0; f < frames.size(); ++f) {
        std::ostringstream name;
        name << prefix << '_' << std::setw(2) << std::setfill('0') << f << ".png";
        io::write_png(dir / name.str(), frames[f], 2);
    }
}

void write_bench_csv(const std::filesystem::path& path, const BenchReport& r)
{
    auto os = open_csv(path);
    os << "baseline_evals,drmo_evals,expected_drmo_evals,eval_speedup,t_hat,propagated_ssim\n";
    os << r.baseline_evals << ',' << r.drmo_evals << ',' << r.expected_drmo_evals << ',' << csv_number(r.eval_speedup)
       << ',' << r.t_hat << ',' << csv_number(r.propagated_ssim) << '\n';
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows)
{
    auto os = open_csv(path);
    os << "t,evals,ssim\n";
    for (const auto& row : rows) os << row.t << ',' << row.evals << ',' << csv_number(row.ssim) << '\n';
}

}  // namespace drmo::pipeline
