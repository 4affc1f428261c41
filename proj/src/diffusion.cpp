#include "drmo/diffusion.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace drmo::diffusion {

namespace {

std::atomic<std::uint64_t> g_evals{0};

}  // namespace

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::linear ? "linear" : "cosine"; }

ScheduleKind schedule_kind_from_string(const std::string& s)
{
    if (s == "linear") return ScheduleKind::linear;
    if (s == "cosine") return ScheduleKind::cosine;
    throw std::invalid_argument("unknown schedule kind '" + s + "'");
}

double NoiseSchedule::posterior_variance(int t) const
{
    if (t <= 1) return 0.0;
    return beta(t) * (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t));
}

NoiseSchedule make_schedule(int T, ScheduleKind kind, double beta_min, double beta_max)
{
    if (T < 2) throw std::invalid_argument("make_schedule: T must be >= 2, got " + std::to_string(T));
    if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
        throw std::invalid_argument("make_schedule: need 0 < beta_min <= beta_max < 1");
    }
    NoiseSchedule s;
    s.T = T;
    s.kind = kind;
    s.beta_min = beta_min;
    s.beta_max = beta_max;
    s.betas.assign(static_cast<std::size_t>(T) + 1, 0.0);
    if (kind == ScheduleKind::linear) {
        for (int t = 1; t <= T; ++t) {
            s.betas[t] = beta_min + (beta_max - beta_min) * static_cast<double>(t - 1) / static_cast<double>(T - 1);
        }
    } else {
        // squared-cosine alpha_bar with offset 0.008, betas clipped into [beta_min, beta_max]
        constexpr double offset = 0.008;
        auto f = [&](int t) {
            const double x = (static_cast<double>(t) / T + offset) / (1.0 + offset) * std::numbers::pi / 2.0;
            return std::cos(x) * std::cos(x);
        };
        for (int t = 1; t <= T; ++t) {
            const double b = 1.0 - f(t) / f(t - 1);
            s.betas[t] = std::clamp(b, beta_min, beta_max);
        }
    }
    s.alphas.assign(static_cast<std::size_t>(T) + 1, 1.0);
    s.alpha_bars.assign(static_cast<std::size_t>(T) + 1, 1.0);
    for (int t = 1; t <= T; ++t) {
        s.alphas[t] = 1.0 - s.betas[t];
        s.alpha_bars[t] = s.alpha_bars[t - 1] * s.alphas[t];
    }
    return s;
}

LatentFrame forward_noise(const LatentFrame& z0, int t, const Tensor& eps, const NoiseSchedule& schedule)
{
    if (eps.shape() != z0.data.shape()) throw shape_error("forward_noise", z0.data.shape(), eps.shape());
    if (t < 0 || t > schedule.T) throw std::out_of_range("forward_noise: step " + std::to_string(t) + " out of range");
    const double ab = schedule.alpha_bar(t);
    const double a = std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    LatentFrame out{z0.frame, t, Tensor(z0.data.shape())};
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * z0.data[i] + b * eps[i];
    return out;
}

ResidualLatent residual(const LatentFrame& z_prev, const LatentFrame& z_cur)
{
    if (z_prev.frame != z_cur.frame) throw std::invalid_argument("residual: latents belong to different frames");
    if (z_prev.step != z_cur.step - 1) {
        throw std::invalid_argument("residual: steps " + std::to_string(z_prev.step) + " and " +
                                    std::to_string(z_cur.step) + " are not consecutive");
    }
    return ResidualLatent{z_cur.frame, z_cur.step, z_prev.data - z_cur.data};
}

LatentFrame reconstruct(const LatentFrame& zT, const std::vector<ResidualLatent>& residuals, int t)
{
    if (t < 0 || t > zT.step) throw std::out_of_range("reconstruct: step out of range");
    std::vector<const ResidualLatent*> by_step(static_cast<std::size_t>(zT.step) + 1, nullptr);
    for (const auto& r : residuals) {
        if (r.step >= 1 && r.step <= zT.step) by_step[r.step] = &r;
    }
    LatentFrame out{zT.frame, t, zT.data};
    for (int k = zT.step; k > t; --k) {
        if (!by_step[k]) throw std::invalid_argument("reconstruct: missing residual for step " + std::to_string(k));
        out.data += by_step[k]->data;
    }
    return out;
}

std::string to_string(Tap tap) { return tap == Tap::coarse ? "coarse" : "fine"; }

Tap tap_from_string(const std::string& s)
{
    if (s == "coarse") return Tap::coarse;
    if (s == "fine") return Tap::fine;
    throw std::invalid_argument("unknown tap '" + s + "'");
}

const Tensor& tap_tensor(const TapFeatures& taps, Tap tap) { return tap == Tap::coarse ? taps.coarse : taps.fine; }

std::uint64_t denoiser_evals() noexcept { return g_evals.load(); }
void reset_denoiser_evals() noexcept { g_evals.store(0); }

Tensor posterior_mean(const Tensor& zt, const Tensor& z0, int t, const NoiseSchedule& s)
{
    const double ab = s.alpha_bar(t);
    const double ab_prev = s.alpha_bar(t - 1);
    const double c0 = std::sqrt(ab_prev) * s.beta(t) / (1.0 - ab);
    const double ct = std::sqrt(s.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
    Tensor out(zt.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c0 * z0[i] + ct * zt[i];
    return out;
}

StepOutput reverse_step(const LatentFrame& zt, int t, const Denoiser& model, const Tensor& noise,
                        const NoiseSchedule& schedule)
{
    if (t < 1 || t > schedule.T) throw std::out_of_range("reverse_step: step " + std::to_string(t) + " out of range");
    if (t > 1 && noise.shape() != zt.data.shape()) throw shape_error("reverse_step noise", zt.data.shape(), noise.shape());
    StepOutput out;
    Tensor eps = model.predict_noise(zt.data, t, &out.taps);
    ++g_evals;
    if (eps.shape() != zt.data.shape()) throw shape_error("reverse_step prediction", zt.data.shape(), eps.shape());
    const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
    const double coef = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
    const double sigma = std::sqrt(schedule.posterior_variance(t));
    out.z_prev = LatentFrame{zt.frame, t - 1, Tensor(zt.data.shape())};
    Tensor& z = out.z_prev.data;
    out.mean = Tensor(zt.data.shape());
    for (std::size_t i = 0; i < z.size(); ++i) {
        out.mean[i] = inv_sqrt_alpha * (zt.data[i] - coef * eps[i]);
        z[i] = out.mean[i];
        if (t > 1) z[i] += sigma * noise[i];
    }
    if (!z.all_finite()) throw std::domain_error("reverse_step: non-finite latent at step " + std::to_string(t));
    return out;
}

// --- trajectories ----------------------------------------------------------------------

const Tensor& Trajectory::latent(int t) const
{
    if (t < 0 || t >= static_cast<int>(z.size()) || z[t].empty()) {
        throw std::out_of_range("trajectory of frame " + std::to_string(frame) + " has no latent at step " + std::to_string(t));
    }
    return z[t];
}

const Tensor& Trajectory::residual_at(int t) const
{
    if (t < 1 || t >= static_cast<int>(dz.size()) || dz[t].empty()) {
        throw std::out_of_range("trajectory of frame " + std::to_string(frame) + " has no residual at step " + std::to_string(t));
    }
    return dz[t];
}

const Tensor& Trajectory::mean_residual_at(int t) const
{
    if (t < 1 || t >= static_cast<int>(dz_mean.size()) || dz_mean[t].empty()) {
        throw std::out_of_range("trajectory of frame " + std::to_string(frame) + " has no mean residual at step " + std::to_string(t));
    }
    return dz_mean[t];
}

const TapFeatures& Trajectory::taps_at(int t) const
{
    if (t < 1 || t >= static_cast<int>(taps.size()) || taps[t].fine.empty()) {
        throw std::out_of_range("trajectory of frame " + std::to_string(frame) + " has no taps at step " + std::to_string(t));
    }
    return taps[t];
}

bool Trajectory::has_taps() const { return taps.size() > 1 && !taps[1].fine.empty(); }

Trajectory sample(const Denoiser& model, const NoiseSchedule& schedule, const Tensor& z_start, int start, int frame,
                  nn::Rng& rng, const SampleOptions& options)
{
    if (start < 1 || start > schedule.T) throw std::out_of_range("sample: start step out of range");
    Trajectory traj;
    traj.frame = frame;
    traj.T = schedule.T;
    traj.start = start;
    const auto n = static_cast<std::size_t>(start) + 1;
    traj.z.resize(n);
    traj.dz.resize(n);
    if (options.record_latents) traj.dz_mean.resize(n);
    if (options.record_taps) traj.taps.resize(n);
    auto keep = [&](int t) {
        if (options.record_latents || t == 0 || t == start) return true;
        return std::find(options.keep_steps.begin(), options.keep_steps.end(), t) != options.keep_steps.end();
    };
    LatentFrame cur{frame, start, z_start};
    traj.z[start] = z_start;
    for (int t = start; t >= 1; --t) {
        Tensor noise = rng.normal_tensor(z_start.shape());
        StepOutput step = reverse_step(cur, t, model, noise, schedule);
        if (options.record_latents) {
            traj.dz[t] = residual(step.z_prev, cur).data;
            traj.dz_mean[t] = step.mean - cur.data;
        }
        if (options.record_taps) traj.taps[t] = std::move(step.taps);
        cur = std::move(step.z_prev);
        if (keep(t - 1)) traj.z[t - 1] = cur.data;
    }
    return traj;
}

void save_trajectory_archive(const std::filesystem::path& dir, const std::vector<Trajectory>& trajectories,
                             const NoiseSchedule& schedule, std::uint64_t seed)
{
    std::filesystem::create_directories(dir);
    nlohmann::json frames = nlohmann::json::array();
    Shape shape;
    for (const auto& tr : trajectories) {
        for (int t = 0; t < static_cast<int>(tr.z.size()); ++t) {
            if (tr.z[t].empty()) continue;
            shape = tr.z[t].shape();
            save_drt(tr.z[t], dir / ("z_f" + std::to_string(tr.frame) + "_t" + std::to_string(t) + ".drt"));
        }
        for (int t = 1; t < static_cast<int>(tr.dz.size()); ++t) {
            if (tr.dz[t].empty()) continue;
            save_drt(tr.dz[t], dir / ("dz_f" + std::to_string(tr.frame) + "_t" + std::to_string(t) + ".drt"));
        }
        frames.push_back({{"frame", tr.frame}, {"start", tr.start}});
    }
    nlohmann::json manifest = {
        {"T", schedule.T},
        {"shape", shape},
        {"schedule", {{"kind", to_string(schedule.kind)}, {"beta_min", schedule.beta_min}, {"beta_max", schedule.beta_max}}},
        {"seed", seed},
        {"frames", frames},
    };
    std::ofstream os(dir / "manifest.json");
    os << manifest.dump(2) << '\n';
}

std::vector<Trajectory> load_trajectory_archive(const std::filesystem::path& dir, NoiseSchedule* schedule)
{
    std::ifstream is(dir / "manifest.json");
    if (!is) throw std::runtime_error("missing trajectory manifest in " + dir.string());
    const auto manifest = nlohmann::json::parse(is);
    const int T = manifest.at("T").get<int>();
    if (schedule) {
        const auto& s = manifest.at("schedule");
        *schedule = make_schedule(T, schedule_kind_from_string(s.at("kind").get<std::string>()),
                                  s.at("beta_min").get<double>(), s.at("beta_max").get<double>());
    }
    std::vector<Trajectory> out;
    for (const auto& f : manifest.at("frames")) {
        Trajectory tr;
        tr.frame = f.at("frame").get<int>();
        tr.start = f.at("start").get<int>();
        tr.T = T;
        tr.z.resize(static_cast<std::size_t>(tr.start) + 1);
        tr.dz.resize(static_cast<std::size_t>(tr.start) + 1);
        for (int t = 0; t <= tr.start; ++t) {
            const auto zp = dir / ("z_f" + std::to_string(tr.frame) + "_t" + std::to_string(t) + ".drt");
            if (std::filesystem::exists(zp)) tr.z[t] = load_drt(zp);
            const auto dp = dir / ("dz_f" + std::to_string(tr.frame) + "_t" + std::to_string(t) + ".drt");
            if (t >= 1 && std::filesystem::exists(dp)) tr.dz[t] = load_drt(dp);
        }
        out.push_back(std::move(tr));
    }
    return out;
}

}  // namespace drmo::diffusion
