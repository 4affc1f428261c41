#include "drmo/pipeline.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace drmo;
using namespace drmo::pipeline;

namespace fs = std::filesystem;

namespace {

PipelineConfig tiny_config()
{
    PipelineConfig c;
    c.seed = 11;
    c.T = 10;
    c.candidate_stride = 5;
    c.fine_channels = 4;
    c.coarse_channels = 6;
    c.frames = 4;
    c.reference_frames = 2;
    c.dss_hidden = 8;
    return c;
}

Models tiny_models(const PipelineConfig& c)
{
    dss::SelectorConfig sc;
    sc.hidden = c.dss_hidden;
    sc.T = c.T;
    return Models{diffusion::UNet(c.unet_config(), 1), motion::MotionNets(c.motion_config(), 2),
                  dss::SelectorNet(sc, c.candidates(), 3)};
}

video::VideoClip tiny_clip(const PipelineConfig& c, double jitter = 0.0)
{
    return make_clip(clip_seed(c.seed, Split::eval, 0), jitter, c.frames);
}

std::string read_file(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& text)
{
    std::ofstream os(p);
    os << text;
}

int run_cli(const std::vector<std::string>& args)
{
    std::vector<const char*> argv{"drmo"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return cli_main(static_cast<int>(argv.size()), argv.data());
}

class TempDir {
public:
    explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / name)
    {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

}  // namespace

// --- configuration -------------------------------------------------------------------

TEST(Config, JsonRoundTrip)
{
    PipelineConfig c = tiny_config();
    c.shared_noise = true;
    c.jitter_levels = {0.0, 2.5};
    c.residual_source = motion::ResidualSource::sampled;
    c.mtn_dir = "elsewhere/mtn";
    const PipelineConfig back = config_from_json(config_to_json(c));
    EXPECT_EQ(config_to_json(back), config_to_json(c));
    EXPECT_EQ(back.T, 10);
    EXPECT_TRUE(back.shared_noise);
    EXPECT_EQ(back.jitter_levels, c.jitter_levels);
    EXPECT_EQ(back.mtn_dir, fs::path("elsewhere/mtn"));
}

TEST(Config, DefaultsAndEffectiveBeta)
{
    const PipelineConfig c = config_from_json("{}");
    EXPECT_EQ(c.T, 100);
    EXPECT_EQ(c.candidates().steps().size(), 20u);
    EXPECT_NEAR(c.effective_beta(), 2.0 * std::exp(1.0) / 5.0, 1e-15);
    EXPECT_GT(c.effective_beta() * 5.0, 1.0);
    EXPECT_EQ(c.horizon(), 12);
}

TEST(Config, RejectsUnknownKeysAndBadJson)
{
    EXPECT_THROW(config_from_json(R"({"sede": 1})"), ValidationError);
    EXPECT_THROW(config_from_json(R"({"pipeline": {"tau": 0.1, "taus": 1}})"), ValidationError);
    EXPECT_THROW(config_from_json(R"({"training": {"mtn": {"lr": 0.1, "rate": 2}}})"), ValidationError);
    EXPECT_THROW(config_from_json("{ not json"), ValidationError);
    EXPECT_THROW(config_from_json(R"({"diffusion": {"schedule": "quadratic"}})"), ValidationError);
}

TEST(Config, ValidateRejectsBrokenInvariants)
{
    auto expect_invalid = [](auto mutate) {
        PipelineConfig c = tiny_config();
        mutate(c);
        EXPECT_THROW(c.validate(), ValidationError);
    };
    EXPECT_NO_THROW(tiny_config().validate());
    expect_invalid([](PipelineConfig& c) { c.T = 1; });
    expect_invalid([](PipelineConfig& c) { c.candidate_stride = 3; });
    expect_invalid([](PipelineConfig& c) { c.candidate_stride = 0; });
    expect_invalid([](PipelineConfig& c) { c.reference_frames = 1; });
    expect_invalid([](PipelineConfig& c) { c.frames = 1; });
    expect_invalid([](PipelineConfig& c) { c.beta = 0.1; });
    expect_invalid([](PipelineConfig& c) { c.tau = 0.0; });
    expect_invalid([](PipelineConfig& c) { c.mask_rate = 1.0; });
    expect_invalid([](PipelineConfig& c) { c.beta_max = c.beta_min; });
    expect_invalid([](PipelineConfig& c) { c.jitter_levels.clear(); });
    expect_invalid([](PipelineConfig& c) { c.jitter_levels = {-1.0}; });
}

TEST(Config, LoadNamesMissingPathAndResolvesCheckpoints)
{
    TempDir dir("drmo_unit_config");
    try {
        load_config(dir.path() / "absent.json");
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("absent.json"), std::string::npos);
    }
    write_file(dir.path() / "c.json", R"({"checkpoints": {"denoiser": "ck/den", "mtn": "/abs/mtn"}})");
    const PipelineConfig c = load_config(dir.path() / "c.json");
    EXPECT_EQ(c.denoiser_dir, dir.path() / "ck/den");
    EXPECT_EQ(c.mtn_dir, fs::path("/abs/mtn"));
}

TEST(Config, ParseStepList)
{
    EXPECT_EQ(parse_step_list("90,60,40,20,1"), (std::vector<int>{90, 60, 40, 20, 1}));
    EXPECT_EQ(parse_step_list("7"), (std::vector<int>{7}));
    EXPECT_THROW(parse_step_list("90,,1"), ValidationError);
    EXPECT_THROW(parse_step_list("9a"), ValidationError);
    EXPECT_THROW(parse_step_list(""), ValidationError);
}

// --- data --------------------------------------------------------------------------------

TEST(Data, ClipSeedsDifferAcrossSplitsAndIndices)
{
    EXPECT_NE(clip_seed(1, Split::mtn_train, 0), clip_seed(1, Split::mtn_heldout, 0));
    EXPECT_NE(clip_seed(1, Split::eval, 0), clip_seed(1, Split::eval, 1));
    EXPECT_EQ(clip_seed(1, Split::eval, 3), clip_seed(1, Split::eval, 3));
    PipelineConfig c = tiny_config();
    c.jitter_levels = {0.0, 1.0, 2.0};
    EXPECT_EQ(split_jitter(c, 4), 1.0);
}

// --- generation ------------------------------------------------------------------------------

TEST(Generation, BaselineEvalsAndDeterminism)
{
    const auto c = tiny_config();
    const auto models = tiny_models(c);
    const auto clip = tiny_clip(c);
    const auto a = generate_baseline(c, models, clip, 5);
    const auto b = generate_baseline(c, models, clip, 5);
    EXPECT_EQ(a.evals, static_cast<std::uint64_t>(c.frames * c.T));
    ASSERT_EQ(a.frames.size(), 4u);
    EXPECT_EQ(a.frames, b.frames);
    EXPECT_NE(generate_baseline(c, models, clip, 6).frames, a.frames);
    for (auto p : a.provenance) EXPECT_EQ(p, Provenance::reference);
}

TEST(Generation, DrmoEvalCountForForcedSteps)
{
    const auto c = tiny_config();
    const auto models = tiny_models(c);
    const auto clip = tiny_clip(c);
    const std::uint64_t R = 2, K = 2;
    for (int t : {1, 3, 5, 10}) {
        DrmoOptions o;
        o.forced_t = t;
        const auto r = generate_drmo(c, models, clip, 5, o).generation;
        EXPECT_EQ(r.evals, R * 10 + K * static_cast<std::uint64_t>(t)) << t;
        EXPECT_EQ(r.t_hat, t);
        ASSERT_EQ(r.frames.size(), 4u);
        EXPECT_EQ(r.provenance[1], Provenance::reference);
        EXPECT_EQ(r.provenance[2], Provenance::propagated);
        EXPECT_TRUE(r.switch_latents[0].empty());
        EXPECT_EQ(r.switch_latents[3].shape(), (Shape{4, 16, 16}));
        for (const auto& f : r.frames) EXPECT_TRUE(f.all_finite());
    }
}

TEST(Generation, DrmoWithSelectorIsDeterministicAndPicksCandidate)
{
    const auto c = tiny_config();
    const auto models = tiny_models(c);
    const auto clip = tiny_clip(c);
    const auto a = generate_drmo(c, models, clip, 5);
    const auto b = generate_drmo(c, models, clip, 5);
    EXPECT_TRUE(c.candidates().contains(a.generation.t_hat));
    EXPECT_EQ(a.generation.frames, b.generation.frames);
    EXPECT_EQ(a.generation.evals, 20u + 2u * static_cast<std::uint64_t>(a.generation.t_hat));
    EXPECT_EQ(a.mask.size(), 2u);
    EXPECT_EQ(a.stats.nmi.size(), a.stats.error.size());
}

TEST(Generation, ReferencesMatchBaselineAndNoHorizonIsBaseline)
{
    auto c = tiny_config();
    const auto clip = tiny_clip(c);
    const auto models = tiny_models(c);
    const auto baseline = generate_baseline(c, models, clip, 5);
    DrmoOptions o;
    o.forced_t = 5;
    const auto drmo = generate_drmo(c, models, clip, 5, o).generation;
    EXPECT_EQ(drmo.frames[0], baseline.frames[0]);
    EXPECT_EQ(drmo.frames[1], baseline.frames[1]);

    c.frames = 2;
    Models bare{diffusion::UNet(c.unet_config(), 1), std::nullopt, std::nullopt};
    const auto only_refs = generate_drmo(c, bare, clip, 5).generation;
    const auto base2 = generate_baseline(c, bare, clip, 5);
    EXPECT_EQ(only_refs.frames, base2.frames);
    EXPECT_EQ(only_refs.evals, base2.evals);
    const auto report = bench(c, bare, clip, 5);
    EXPECT_EQ(report.propagated_ssim, 1.0);
    EXPECT_EQ(report.eval_speedup, 1.0);
}

TEST(Generation, ForcedFullStepCostsTheSameAsBaseline)
{
    const auto c = tiny_config();
    const auto models = tiny_models(c);
    DrmoOptions o;
    o.forced_t = c.T;
    const auto r = bench(c, models, tiny_clip(c), 5, o);
    EXPECT_EQ(r.drmo_evals, r.baseline_evals);
    EXPECT_EQ(r.expected_drmo_evals, r.drmo_evals);
    EXPECT_DOUBLE_EQ(r.eval_speedup, 1.0);
}

TEST(Generation, BenchReportsExpectedEvals)
{
    const auto c = tiny_config();
    const auto models = tiny_models(c);
    DrmoOptions o;
    o.forced_t = 5;
    const auto r = bench(c, models, tiny_clip(c), 5, o);
    EXPECT_EQ(r.baseline_evals, 40u);
    EXPECT_EQ(r.drmo_evals, 30u);
    EXPECT_EQ(r.expected_drmo_evals, 30u);
    EXPECT_DOUBLE_EQ(r.eval_speedup, 40.0 / 30.0);
    ASSERT_EQ(r.frame_ssim.size(), 4u);
    EXPECT_NEAR(r.frame_ssim[0], 1.0, 1e-12);
    EXPECT_GE(r.propagated_ssim, -1.0);
    EXPECT_LE(r.propagated_ssim, 1.0);
}

TEST(Generation, RejectsBadArguments)
{
    const auto c = tiny_config();
    const auto models = tiny_models(c);
    const auto clip = tiny_clip(c);
    for (int t : {0, -1, 11}) {
        DrmoOptions o;
        o.forced_t = t;
        EXPECT_THROW(generate_drmo(c, models, clip, 5, o), ValidationError) << t;
    }
    const auto short_clip = make_clip(1, 0.0, 3);
    EXPECT_THROW(generate_baseline(c, models, short_clip, 5), ValidationError);
    Models no_selector{diffusion::UNet(c.unet_config(), 1), motion::MotionNets(c.motion_config(), 2), std::nullopt};
    EXPECT_THROW(generate_drmo(c, no_selector, clip, 5), ValidationError);
    EXPECT_THROW(ablation_sweep(c, models, clip, 5, {}), ValidationError);
    EXPECT_THROW(ablation_sweep(c, models, clip, 5, {12}), ValidationError);
}

TEST(Generation, AblationRowsFollowForcedSteps)
{
    const auto c = tiny_config();
    const auto models = tiny_models(c);
    const auto rows = ablation_sweep(c, models, tiny_clip(c), 5, {10, 5, 1});
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0].evals, 40u);
    EXPECT_EQ(rows[1].evals, 30u);
    EXPECT_EQ(rows[2].evals, 22u);
    for (const auto& r : rows) {
        EXPECT_GE(r.ssim, -1.0);
        EXPECT_LE(r.ssim, 1.0);
    }
}

TEST(Generation, SharedNoiseUsesOneStream)
{
    auto c = tiny_config();
    c.shared_noise = true;
    const Tensor a = frame_rng(c, 3, 0).normal_tensor({4});
    const Tensor b = frame_rng(c, 3, 2).normal_tensor({4});
    EXPECT_EQ(a, b);
    c.shared_noise = false;
    EXPECT_NE(frame_rng(c, 3, 0).normal_tensor({4}), frame_rng(c, 3, 2).normal_tensor({4}));
}

// --- editing ----------------------------------------------------------------------------------------

TEST(Edit, RestyleFunctions)
{
    Tensor img({3, 2, 2});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = 0.05 * static_cast<double>(i);
    EXPECT_EQ(restyle(img, Restyle::identity), img);
    const Tensor swapped = restyle(img, Restyle::swap_rb);
    EXPECT_EQ(swapped.at({0, 1, 1}), img.at({2, 1, 1}));
    EXPECT_EQ(swapped.at({1, 0, 1}), img.at({1, 0, 1}));
    EXPECT_EQ(restyle(swapped, Restyle::swap_rb), img);
    const Tensor inv = restyle(img, Restyle::invert);
    EXPECT_DOUBLE_EQ(inv.at({1, 1, 0}), 1.0 - img.at({1, 1, 0}));
    for (auto r : {Restyle::identity, Restyle::swap_rb, Restyle::invert}) EXPECT_EQ(restyle_from_string(to_string(r)), r);
    EXPECT_THROW(restyle_from_string("sepia"), ValidationError);
    EXPECT_THROW(restyle(Tensor({1, 2, 2}), Restyle::invert), ShapeError);
}

TEST(Edit, ProducesEveryFrameAtForcedStep)
{
    const auto c = tiny_config();
    const auto models = tiny_models(c);
    const auto clip = tiny_clip(c);
    const auto r = edit_video(c, models, clip, restyle(clip.frames[0], Restyle::swap_rb), 5, 5);
    ASSERT_EQ(r.frames.size(), 4u);
    EXPECT_EQ(r.t_hat, 5);
    EXPECT_EQ(r.provenance[0], Provenance::reference);
    for (std::size_t f = 1; f < 4; ++f) EXPECT_EQ(r.provenance[f], Provenance::propagated);
    EXPECT_THROW(edit_video(c, models, clip, Tensor({3, 8, 8}), 5, 5), ValidationError);
}

// --- checkpoints and command line ------------------------------------------------------------------

class CliTest : public ::testing::Test {
protected:
    void SetUp() override
    {
        dir_ = std::make_unique<TempDir>("drmo_unit_cli");
        const auto c = tiny_config();
        const auto models = tiny_models(c);
        models.denoiser.save(dir_->path() / "ck" / "denoiser");
        models.mtn->save(dir_->path() / "ck" / "mtn");
        models.selector->save(dir_->path() / "ck" / "selector");
        PipelineConfig written = c;
        written.denoiser_dir = "ck/denoiser";
        written.mtn_dir = "ck/mtn";
        written.selector_dir = "ck/selector";
        config_path_ = (dir_->path() / "config.json").string();
        write_file(config_path_, config_to_json(written));
        runs_ = (dir_->path() / "runs").string();
    }

    std::unique_ptr<TempDir> dir_;
    std::string config_path_;
    std::string runs_;
};

TEST_F(CliTest, LoadModelsFromCheckpoints)
{
    const auto c = load_config(config_path_);
    const auto models = load_models(c, true, true);
    EXPECT_TRUE(models.mtn.has_value());
    EXPECT_TRUE(models.selector.has_value());
    auto other = c;
    other.T = 20;
    EXPECT_THROW(load_models(other, false, false), ValidationError);
    other = c;
    other.mtn_dir = dir_->path() / "missing";
    EXPECT_THROW(load_models(other, true, false), ValidationError);
    EXPECT_NO_THROW(load_models(other, false, false));
    other = c;
    other.candidate_stride = 2;
    EXPECT_THROW(load_models(other, false, true), ValidationError);
}

TEST_F(CliTest, ExitCodes)
{
    testing::internal::CaptureStderr();
    EXPECT_EQ(run_cli({"bench", "--config", (dir_->path() / "nope.json").string()}), 1);
    const std::string err = testing::internal::GetCapturedStderr();
    EXPECT_NE(err.find("nope.json"), std::string::npos);

    testing::internal::CaptureStderr();
    EXPECT_EQ(run_cli({"bench", "--config", config_path_, "--bogus"}), 1);
    EXPECT_EQ(run_cli({"frobnicate"}), 1);
    EXPECT_EQ(run_cli({"ablate", "--config", config_path_, "--runs-dir", runs_, "--t-values", "5,x"}), 1);
    EXPECT_EQ(run_cli({"ablate", "--config", config_path_, "--runs-dir", runs_, "--t-values", "5,11"}), 1);
    testing::internal::GetCapturedStderr();
}

TEST_F(CliTest, BenchCsvIsReproducible)
{
    testing::internal::CaptureStdout();
    ASSERT_EQ(run_cli({"bench", "--config", config_path_, "--runs-dir", runs_, "--run-id", "a"}), 0);
    ASSERT_EQ(run_cli({"bench", "--config", config_path_, "--runs-dir", runs_, "--run-id", "b"}), 0);
    testing::internal::GetCapturedStdout();
    const fs::path a = fs::path(runs_) / "a", b = fs::path(runs_) / "b";
    for (const char* name : {"bench_report.csv", "bench_frames.csv", "run_manifest.json"}) {
        ASSERT_TRUE(fs::exists(a / name)) << name;
        EXPECT_EQ(read_file(a / name), read_file(b / name)) << name;
    }
    EXPECT_TRUE(fs::exists(a / "bench_timing.json"));
    EXPECT_TRUE(fs::exists(a / "frames"));
}
