#include "drmo/image_io.hpp"
#include "drmo/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

namespace drmo::pipeline {

namespace {

using nlohmann::json;

constexpr const char* version_string = "drmo 0.1.0";

struct CommonOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string run_id;
    std::string runs_dir = "runs";
    bool shared_noise = false;
};

struct Options {
    CommonOptions common;
    // gen-data
    std::size_t clips = 4;
    std::optional<double> jitter;
    bool trajectories = false;
    // profile, bench, ablate, edit
    std::size_t clip_index = 0;
    std::optional<int> frame_i;
    std::string source = "fused";
    std::optional<int> forced_t;
    std::string t_values = "90,60,40,20,1";
    double low_jitter = 3.0;
    bool no_consistency = false;
    std::string restyle = "swap_rb";
};

std::uint64_t fnv1a(const std::string& s)
{
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string hex(std::uint64_t v)
{
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

std::string number(double v)
{
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

// Run directory plus the bookkeeping every subcommand shares.
class Run {
public:
    Run(const std::string& command, const Options& options, PipelineConfig config)
        : command_(command), config_(std::move(config))
    {
        const std::string id =
            options.common.run_id.empty() ? command + "_s" + std::to_string(config_.seed) : options.common.run_id;
        dir_ = std::filesystem::path(options.common.runs_dir) / id;
        std::filesystem::create_directories(dir_);
        const std::string config_json = config_to_json(config_);
        json manifest = {
            {"command", command},
            {"version", version_string},
            {"config_hash", hex(fnv1a(config_json))},
            {"seed", config_.seed},
            {"config", json::parse(config_json)},
        };
        std::ofstream os(dir_ / "run_manifest.json");
        os << manifest.dump(2) << '\n';
    }

    const std::filesystem::path& dir() const { return dir_; }
    const PipelineConfig& config() const { return config_; }

    void timing(const std::string& key, double seconds) { timing_[key] = seconds; }

    // Wall-clock numbers stay out of the CSV reports so that those are reproducible.
    void finish() const
    {
        json t = json::object();
        for (const auto& [k, v] : timing_) t[k] = v;
        std::ofstream os(dir_ / (command_ + "_timing.json"));
        os << t.dump(2) << '\n';
    }

private:
    std::string command_;
    PipelineConfig config_;
    std::filesystem::path dir_;
    std::map<std::string, double> timing_;
};

double elapsed(std::chrono::steady_clock::time_point start)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

video::VideoClip eval_clip(const PipelineConfig& config, std::size_t index, double jitter)
{
    return make_clip(clip_seed(config.seed, Split::eval, index), jitter, config.frames);
}

std::string provenance_name(Provenance p)
{
    return p == Provenance::reference ? "reference" : "propagated";
}

// --- subcommands ------------------------------------------------------------------------------

void cmd_gen_data(Run& run, const Options& o)
{
    const auto& config = run.config();
    const video::LatentCodec codec;
    std::optional<Models> models;
    if (o.trajectories) models = load_models(config, false, false);
    const auto schedule = config.make_schedule();
    std::ofstream index(run.dir() / "data_index.csv");
    index << "clip,seed,jitter,frames,objects\n";
    for (std::size_t c = 0; c < o.clips; ++c) {
        const std::uint64_t seed = clip_seed(config.seed, Split::eval, c);
        const double jitter = o.jitter ? *o.jitter : split_jitter(config, c);
        const auto clip = make_clip(seed, jitter, config.frames);
        std::ostringstream name;
        name << "clip_" << std::setw(4) << std::setfill('0') << c;
        const auto dir = run.dir() / "data" / name.str();
        video::save_clip(clip, dir);
        write_frames_png(dir / "png", "frame", clip.frames);
        const auto latents = codec.encode(clip);
        std::filesystem::create_directories(dir / "latents");
        for (std::size_t f = 0; f < latents.size(); ++f) {
            save_drt(latents[f], dir / "latents" / ("latent_f" + std::to_string(f) + ".drt"));
        }
        if (models) {
            std::vector<diffusion::Trajectory> trajs;
            for (int f = 0; f < config.reference_frames; ++f) {
                trajs.push_back(sample_frame(config, models->denoiser, schedule, latents[f], f, seed, record_all()));
            }
            diffusion::save_trajectory_archive(dir / "trajectories", trajs, schedule, seed);
        }
        index << name.str() << ',' << seed << ',' << number(jitter) << ',' << config.frames << ','
              << clip.spec.objects.size() << '\n';
    }
}

void cmd_train_diffusion(Run& run, const Options&)
{
    const auto& config = run.config();
    const video::LatentCodec codec;
    std::vector<Tensor> latents;
    for (std::size_t c = 0; c < config.denoiser_clips; ++c) {
        const auto clip = make_clip(clip_seed(config.seed, Split::denoiser, c), split_jitter(config, c), config.frames);
        for (auto& l : codec.encode(clip)) latents.push_back(std::move(l));
    }
    diffusion::DenoiserTrainConfig tc;
    tc.epochs = config.denoiser_epochs;
    tc.batch_size = config.denoiser_batch;
    tc.lr = config.denoiser_lr;
    tc.seed = config.seed;
    const auto start = std::chrono::steady_clock::now();
    const auto net = diffusion::train_denoiser(latents, config.make_schedule(), config.unet_config(), tc,
                                               run.dir() / "denoiser_loss.csv");
    run.timing("train_seconds", elapsed(start));
    net.save(config.denoiser_dir);
}

motion::MtnTrainConfig mtn_train_config(const PipelineConfig& config)
{
    motion::MtnTrainConfig tc;
    tc.epochs_stage1 = config.mtn_epochs_stage1;
    tc.epochs_stage2 = config.mtn_epochs_stage2;
    tc.epochs_stage3 = config.mtn_epochs_stage3;
    tc.steps_per_clip = config.mtn_steps_per_clip;
    tc.lr = config.mtn_lr;
    tc.reference_frames = static_cast<std::size_t>(config.reference_frames);
    tc.frames = static_cast<std::size_t>(config.frames);
    tc.t_star_values = config.candidates().steps();
    tc.residual_source = config.residual_source;
    tc.seed = config.seed;
    return tc;
}

void cmd_train_mtn(Run& run, const Options&)
{
    const auto& config = run.config();
    const auto models = load_models(config, false, false);
    const auto train = trajectory_source(config, models.denoiser, Split::mtn_train);
    const auto heldout = trajectory_source(config, models.denoiser, Split::mtn_heldout);
    motion::MtnTrainReport report;
    const auto nets = motion::train_mtn(train, config.mtn_clips, heldout, config.mtn_heldout_clips,
                                        config.motion_config(), mtn_train_config(config), run.dir(), &report);
    std::ofstream os(run.dir() / "mtn_heldout.csv");
    os << "checkpoint,residual,latent,motion,total\n";
    for (const auto& [name, l] : {std::pair{"initial", report.heldout_initial}, std::pair{"final", report.heldout_final}}) {
        os << name << ',' << number(l.residual) << ',' << number(l.latent) << ',' << number(l.motion) << ','
           << number(l.total()) << '\n';
    }
    for (int s = 0; s < 3; ++s) run.timing("stage" + std::to_string(s + 1) + "_seconds", report.seconds[s]);
    nets.save(config.mtn_dir);
}

std::vector<dss::DssSample> make_labels(const PipelineConfig& config, const Models& models, Split split,
                                        std::size_t count, const std::string& prefix)
{
    std::vector<dss::DssSample> samples;
    for (std::size_t c = 0; c < count; ++c) {
        const std::uint64_t seed = clip_seed(config.seed, split, c);
        const auto clip = make_clip(seed, split_jitter(config, c), config.frames);
        std::ostringstream id;
        id << prefix << '_' << std::setw(4) << std::setfill('0') << c;
        samples.push_back(label_clip(config, models, clip, seed, id.str()));
    }
    return samples;
}

void cmd_train_dss(Run& run, const Options&)
{
    const auto& config = run.config();
    const auto models = load_models(config, true, false);
    const auto candidates = config.candidates();
    const double beta = config.effective_beta();
    auto start = std::chrono::steady_clock::now();
    const auto train = make_labels(config, models, Split::dss_train, config.dss_clips, "train");
    const auto heldout = make_labels(config, models, Split::dss_heldout, config.dss_heldout_clips, "heldout");
    run.timing("label_seconds", elapsed(start));
    dss::write_labels_csv(run.dir() / "dss_labels.csv", train, candidates, beta);
    dss::write_labels_csv(run.dir() / "dss_labels_heldout.csv", heldout, candidates, beta);
    {
        std::ofstream os(run.dir() / "label_histogram.csv");
        os << "t,train,heldout\n";
        for (std::size_t k = 0; k < candidates.size(); ++k) {
            auto count = [k](const std::vector<dss::DssSample>& s) {
                return std::count_if(s.begin(), s.end(), [k](const dss::DssSample& x) { return x.label == k; });
            };
            os << candidates[k] << ',' << count(train) << ',' << count(heldout) << '\n';
        }
    }
    dss::SelectorConfig sc;
    sc.hidden = config.dss_hidden;
    sc.T = config.T;
    dss::DssTrainConfig tc;
    tc.epochs = config.dss_epochs;
    tc.lr = config.dss_lr;
    tc.mask_rate = config.mask_rate;
    tc.seed = config.seed;
    start = std::chrono::steady_clock::now();
    dss::DssTrainReport report;
    const auto net = dss::train_dss(train, heldout, candidates, sc, tc, run.dir() / "dss_train.csv", &report);
    run.timing("train_seconds", elapsed(start));
    std::ofstream os(run.dir() / "dss_summary.csv");
    os << "train_samples,heldout_samples,heldout_accuracy,heldout_masked_accuracy,chance\n";
    os << train.size() << ',' << heldout.size() << ',' << number(report.heldout_accuracy.back()) << ','
       << number(report.heldout_masked_accuracy.back()) << ',' << number(1.0 / static_cast<double>(candidates.size()))
       << '\n';
    net.save(config.selector_dir);
}

void cmd_profile(Run& run, const Options& o)
{
    const auto& config = run.config();
    const auto models = load_models(config, true, false);
    const auto source = metrics::profile_source_from_string(o.source);
    const int i = o.frame_i ? *o.frame_i : config.reference_frames - 2;
    if (i < 0 || i + 1 >= config.frames) throw ValidationError("--frame-i out of range");
    const std::uint64_t seed = config.seed;
    const auto clip = eval_clip(config, o.clip_index, o.jitter ? *o.jitter : 0.0);
    const auto schedule = config.make_schedule();
    const video::LatentCodec codec;
    const auto ti = sample_frame(config, models.denoiser, schedule, codec.encode_frame(clip.frames[i]), i, seed, record_all());
    const auto tj =
        sample_frame(config, models.denoiser, schedule, codec.encode_frame(clip.frames[i + 1]), i + 1, seed, record_all());
    const auto p = metrics::profile(ti, tj, *models.mtn, {}, source);
    metrics::write_profile_csv(run.dir() / "profile.csv", p);
    metrics::write_profile_plot(run.dir() / "profile.png", p);
}

void cmd_bench(Run& run, const Options& o)
{
    const auto& config = run.config();
    const auto models = load_models(config, true, !o.forced_t && config.horizon() > 0);
    const auto clip = eval_clip(config, o.clip_index, o.jitter ? *o.jitter : 0.0);
    DrmoOptions options;
    options.forced_t = o.forced_t;
    GenerationResult baseline, drmo;
    const auto report = bench(config, models, clip, config.seed, options, &baseline, &drmo);
    write_bench_csv(run.dir() / "bench_report.csv", report);
    {
        std::ofstream os(run.dir() / "bench_frames.csv");
        os << "frame,provenance,t_hat,ssim_vs_baseline\n";
        for (std::size_t f = 0; f < report.frame_ssim.size(); ++f) {
            const bool propagated = report.provenance[f] == Provenance::propagated;
            os << f << ',' << provenance_name(report.provenance[f]) << ',' << (propagated ? report.t_hat : config.T)
               << ',' << number(report.frame_ssim[f]) << '\n';
        }
    }
    write_frames_png(run.dir() / "frames", "baseline", baseline.frames);
    write_frames_png(run.dir() / "frames", "drmo", drmo.frames);
    std::filesystem::create_directories(run.dir() / "latents");
    for (std::size_t f = 0; f < drmo.latents.size(); ++f) {
        save_drt(drmo.latents[f], run.dir() / "latents" / ("z0_f" + std::to_string(f) + ".drt"));
        if (!drmo.switch_latents[f].empty()) {
            save_drt(drmo.switch_latents[f],
                     run.dir() / "latents" / ("z" + std::to_string(drmo.t_hat) + "_f" + std::to_string(f) + ".drt"));
        }
    }
    run.timing("baseline_seconds", report.baseline_seconds);
    run.timing("drmo_seconds", report.drmo_seconds);
    run.timing("wall_speedup", report.wall_speedup);
    std::cout << "t_hat " << report.t_hat << "  evals " << report.baseline_evals << " -> " << report.drmo_evals
              << "  eval speedup " << number(report.eval_speedup) << "  wall speedup " << number(report.wall_speedup)
              << "  propagated ssim " << number(report.propagated_ssim) << '\n';
}

void cmd_ablate(Run& run, const Options& o)
{
    const auto& config = run.config();
    const auto t_values = parse_step_list(o.t_values);
    for (int t : t_values) {
        if (t < 1 || t > config.T) throw ValidationError("--t-values: " + std::to_string(t) + " outside [1, T]");
    }
    const auto models = load_models(config, true, !o.no_consistency);
    const double jitter = o.jitter ? *o.jitter : 0.0;
    const auto clip = eval_clip(config, o.clip_index, jitter);
    const auto rows = ablation_sweep(config, models, clip, config.seed, t_values);
    write_ablation_csv(run.dir() / "ablation.csv", rows);
    io::PlotSeries series;
    series.color = {30, 90, 200};
    auto sorted = rows;
    std::sort(sorted.begin(), sorted.end(), [](const AblationRow& a, const AblationRow& b) { return a.t < b.t; });
    for (const auto& r : sorted) {
        series.x.push_back(r.t);
        series.y.push_back(r.ssim);
    }
    io::write_line_plot(run.dir() / "ablation.png", {series});
    if (o.no_consistency) return;
    const auto low = eval_clip(config, o.clip_index, o.low_jitter);
    const auto c = consistency_ablation(config, models, clip, low, config.seed);
    std::ofstream os(run.dir() / "consistency.csv");
    os << "clip,jitter,t_hat,mean_nmi_low_steps,mean_nmi_mid_steps\n";
    const int split = std::max(1, config.T / 5);
    auto row = [&](const char* name, double j, int t, const metrics::ConsistencyProfile& p) {
        os << name << ',' << number(j) << ',' << t << ',' << number(metrics::mean_nmi(p, 1, split - 1)) << ','
           << number(metrics::mean_nmi(p, split, config.T - split)) << '\n';
    };
    row("high", jitter, c.t_high, c.profile_high);
    row("low", o.low_jitter, c.t_low, c.profile_low);
    metrics::write_profile_csv(run.dir() / "profile_high.csv", c.profile_high);
    metrics::write_profile_csv(run.dir() / "profile_low.csv", c.profile_low);
}

void cmd_edit(Run& run, const Options& o)
{
    const auto& config = run.config();
    const auto style = restyle_from_string(o.restyle);
    const auto models = load_models(config, true, !o.forced_t);
    const auto clip = eval_clip(config, o.clip_index, o.jitter ? *o.jitter : 0.0);
    const Tensor first = restyle(clip.frames.front(), style);
    const auto result = edit_video(config, models, clip, first, config.seed, o.forced_t);
    std::ofstream os(run.dir() / "edit_report.csv");
    os << "frame,provenance,t_hat,mean_r,mean_g,mean_b,source_mean_r,source_mean_g,source_mean_b\n";
    auto means = [](const Tensor& rgb) {
        std::array<double, 3> m{};
        const std::size_t plane = rgb.dim(1) * rgb.dim(2);
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t k = 0; k < plane; ++k) m[c] += rgb[c * plane + k];
            m[c] /= static_cast<double>(plane);
        }
        return m;
    };
    for (std::size_t f = 0; f < result.frames.size(); ++f) {
        const auto m = means(result.frames[f]);
        const auto s = means(clip.frames[f]);
        const bool propagated = result.provenance[f] == Provenance::propagated;
        os << f << ',' << provenance_name(result.provenance[f]) << ',' << (propagated ? result.t_hat : config.T);
        for (double v : m) os << ',' << number(v);
        for (double v : s) os << ',' << number(v);
        os << '\n';
    }
    write_frames_png(run.dir() / "frames", "edit", result.frames);
    run.timing("edit_seconds", result.seconds);
}

void add_common(CLI::App* sub, CommonOptions& c)
{
    sub->add_option("--config", c.config_path, "JSON configuration file")->required();
    sub->add_option("--seed", c.seed, "Overrides the configuration seed");
    sub->add_option("--run-id", c.run_id, "Run directory name (default <command>_s<seed>)");
    sub->add_option("--runs-dir", c.runs_dir, "Parent directory of run directories");
    sub->add_flag("--shared-noise", c.shared_noise, "Share one noise stream across frames");
}

}  // namespace

std::vector<int> parse_step_list(const std::string& text)
{
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        int v = 0;
        try {
            v = std::stoi(item, &used);
        } catch (const std::exception&) {
            throw ValidationError("bad integer '" + item + "' in list '" + text + "'");
        }
        if (used != item.size()) throw ValidationError("bad integer '" + item + "' in list '" + text + "'");
        out.push_back(v);
    }
    if (out.empty()) throw ValidationError("empty integer list");
    return out;
}

int cli_main(int argc, const char* const* argv)
{
    CLI::App app{"Motion-reuse accelerated video diffusion toolkit", "drmo"};
    app.set_version_flag("--version", version_string);
    app.require_subcommand(1, 1);
    Options o;

    auto* gen = app.add_subcommand("gen-data", "Generate synthetic clips (and optionally reference trajectories)");
    add_common(gen, o.common);
    gen->add_option("--clips", o.clips, "Number of clips")->check(CLI::PositiveNumber);
    gen->add_option("--jitter", o.jitter, "Jitter for every clip (default: cycle the configured levels)");
    gen->add_flag("--trajectories", o.trajectories, "Also archive reference trajectories (needs the denoiser)");

    auto* td = app.add_subcommand("train-diffusion", "Train the denoiser");
    add_common(td, o.common);
    auto* tm = app.add_subcommand("train-mtn", "Train the motion networks");
    add_common(tm, o.common);
    auto* ts = app.add_subcommand("train-dss", "Label clips and train the switch-step selector");
    add_common(ts, o.common);

    auto* prof = app.add_subcommand("profile", "Step-wise motion consistency of one frame pair");
    add_common(prof, o.common);
    prof->add_option("--clip-index", o.clip_index, "Evaluation clip index");
    prof->add_option("--jitter", o.jitter, "Clip jitter (default 0)");
    prof->add_option("--frame-i", o.frame_i, "First frame of the pair (default R - 2)");
    prof->add_option("--source", o.source, "fused, coarse or fine")->check(CLI::IsMember({"fused", "coarse", "fine"}));

    auto* b = app.add_subcommand("bench", "Baseline vs accelerated generation on one clip");
    add_common(b, o.common);
    b->add_option("--clip-index", o.clip_index, "Evaluation clip index");
    b->add_option("--jitter", o.jitter, "Clip jitter (default 0)");
    b->add_option("--forced-t", o.forced_t, "Switch step used instead of the selector");

    auto* ab = app.add_subcommand("ablate", "Forced switch-step sweep and consistency ordering");
    add_common(ab, o.common);
    ab->add_option("--t-values", o.t_values, "Comma-separated switch steps");
    ab->add_option("--clip-index", o.clip_index, "Evaluation clip index");
    ab->add_option("--jitter", o.jitter, "Jitter of the sweep (high-consistency) clip (default 0)");
    ab->add_option("--low-jitter", o.low_jitter, "Jitter of the low-consistency clip");
    ab->add_flag("--no-consistency", o.no_consistency, "Skip the consistency ordering run");

    auto* ed = app.add_subcommand("edit", "Propagate a clip's motion to a restyled first frame");
    add_common(ed, o.common);
    ed->add_option("--clip-index", o.clip_index, "Evaluation clip index");
    ed->add_option("--jitter", o.jitter, "Clip jitter (default 0)");
    ed->add_option("--restyle", o.restyle, "identity, swap_rb or invert");
    ed->add_option("--forced-t", o.forced_t, "Switch step used instead of the selector");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e, std::cerr, std::cerr);
        return 1;
    }

    CLI::App* sub = app.get_subcommands().front();
    const std::string command = sub->get_name();
    try {
        PipelineConfig config = load_config(o.common.config_path);
        if (o.common.seed) config.seed = *o.common.seed;
        if (o.common.shared_noise) config.shared_noise = true;
        Run run(command, o, config);
        const auto start = std::chrono::steady_clock::now();
        if (command == "gen-data") cmd_gen_data(run, o);
        else if (command == "train-diffusion") cmd_train_diffusion(run, o);
        else if (command == "train-mtn") cmd_train_mtn(run, o);
        else if (command == "train-dss") cmd_train_dss(run, o);
        else if (command == "profile") cmd_profile(run, o);
        else if (command == "bench") cmd_bench(run, o);
        else if (command == "ablate") cmd_ablate(run, o);
        else if (command == "edit") cmd_edit(run, o);
        run.timing("total_seconds", elapsed(start));
        run.finish();
        std::cout << command << ": wrote " << run.dir().string() << '\n';
        return 0;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << sub->help();
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}

}  // namespace drmo::pipeline
