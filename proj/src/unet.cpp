#include "drmo/unet.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace drmo::diffusion {

using ad::Var;

namespace {

constexpr std::size_t kTimeHidden = 64;

Var channel_bias(const Var& v, std::size_t n, std::size_t c) { return ad::reshape(v, {n, c, 1, 1}); }

}  // namespace

UNet::UNet(const UNetConfig& config, std::uint64_t seed) : config_(config)
{
    if (config.height % 2 != 0 || config.width % 2 != 0) throw std::invalid_argument("UNet: latent dims must be even");
    nn::Rng rng(seed);
    const std::size_t C = config.latent_channels, cf = config.fine_channels, cc = config.coarse_channels;
    time1_ = nn::Linear("unet.time1", config.time_dim, kTimeHidden, rng);
    time2_ = nn::Linear("unet.time2", kTimeHidden, kTimeHidden, rng);
    conv_in_ = nn::Conv2d("unet.conv_in", C, cf, 3, 1, 1, rng);
    enc_conv_ = nn::Conv2d("unet.enc_conv", cf, cf, 3, 1, 1, rng);
    enc_time_ = nn::Linear("unet.enc_time", kTimeHidden, cf, rng);
    down_ = nn::Conv2d("unet.down", cf, cc, 3, 2, 1, rng);
    mid1_ = nn::Conv2d("unet.mid1", cc, cc, 3, 1, 1, rng);
    mid2_ = nn::Conv2d("unet.mid2", cc, cc, 3, 1, 1, rng);
    mid_time_ = nn::Linear("unet.mid_time", kTimeHidden, cc, rng);
    dec_coarse_ = nn::Conv2d("unet.dec_coarse", cc, cc, 3, 1, 1, rng);
    dec_fine1_ = nn::Conv2d("unet.dec_fine1", cc + cf, cf, 3, 1, 1, rng);
    dec_fine2_ = nn::Conv2d("unet.dec_fine2", cf, cf, 3, 1, 1, rng);
    conv_out_ = nn::Conv2d("unet.conv_out", cf, C, 3, 1, 1, rng);
}

ad::ParamList UNet::parameters() const
{
    ad::ParamList out;
    auto add = [&](const ad::ParamList& ps) { out.insert(out.end(), ps.begin(), ps.end()); };
    add(time1_.parameters());
    add(time2_.parameters());
    add(conv_in_.parameters());
    add(enc_conv_.parameters());
    add(enc_time_.parameters());
    add(down_.parameters());
    add(mid1_.parameters());
    add(mid2_.parameters());
    add(mid_time_.parameters());
    add(dec_coarse_.parameters());
    add(dec_fine1_.parameters());
    add(dec_fine2_.parameters());
    add(conv_out_.parameters());
    return out;
}

UNet::Output UNet::forward(const Var& z, const std::vector<int>& steps) const
{
    const Shape& s = z.shape();
    if (s.size() != 4 || s[1] != config_.latent_channels || s[2] != config_.height || s[3] != config_.width) {
        throw shape_error("unet", s, {0, config_.latent_channels, config_.height, config_.width});
    }
    const std::size_t n = s[0];
    if (steps.size() != n) throw std::invalid_argument("unet: one step per sample required");
    Tensor emb({n, config_.time_dim});
    for (std::size_t i = 0; i < n; ++i) {
        const Tensor e = nn::sinusoidal_embedding(1000.0 * steps[i] / config_.T, config_.time_dim);
        std::copy(e.data(), e.data() + e.size(), emb.data() + i * config_.time_dim);
    }
    const Var te = ad::silu(time2_.forward(ad::silu(time1_.forward(Var::constant(std::move(emb))))));
    const std::size_t cf = config_.fine_channels, cc = config_.coarse_channels;

    Var h = ad::silu(conv_in_.forward(z));
    h = h + ad::silu(enc_conv_.forward(h + channel_bias(enc_time_.forward(te), n, cf)));
    const Var d = ad::silu(down_.forward(h));
    Var m = ad::silu(mid1_.forward(d + channel_bias(mid_time_.forward(te), n, cc)));
    m = d + ad::silu(mid2_.forward(m));
    const Var coarse = ad::silu(dec_coarse_.forward(m));
    Var f = ad::silu(dec_fine1_.forward(ad::concat({ad::upsample_nearest(coarse, 2), h}, 1)));
    f = f + ad::silu(dec_fine2_.forward(f));
    return {conv_out_.forward(f), coarse, f};
}

Tensor UNet::predict_noise(const Tensor& zt, int t, TapFeatures* taps) const
{
    const Shape& s = zt.shape();
    Output out = forward(Var::constant(zt.reshape({1, s.at(0), s.at(1), s.at(2)})), {t});
    if (taps) {
        const Shape& cs = out.coarse.shape();
        const Shape& fs = out.fine.shape();
        taps->coarse = out.coarse.value().reshape({cs[1], cs[2], cs[3]});
        taps->fine = out.fine.value().reshape({fs[1], fs[2], fs[3]});
    }
    return out.eps.value().reshape(s);
}

void UNet::save(const std::filesystem::path& dir) const
{
    nn::save_parameters(parameters(), dir);
    nlohmann::json manifest = {
        {"latent_channels", config_.latent_channels},
        {"height", config_.height},
        {"width", config_.width},
        {"fine_channels", config_.fine_channels},
        {"coarse_channels", config_.coarse_channels},
        {"time_dim", config_.time_dim},
        {"T", config_.T},
        {"parameter_count", nn::parameter_count(parameters())},
    };
    std::ofstream os(dir / "unet_manifest.json");
    os << manifest.dump(2) << '\n';
}

UNet UNet::load(const std::filesystem::path& dir)
{
    std::ifstream is(dir / "unet_manifest.json");
    if (!is) throw std::runtime_error("missing denoiser checkpoint " + (dir / "unet_manifest.json").string());
    const auto j = nlohmann::json::parse(is);
    UNetConfig c;
    c.latent_channels = j.at("latent_channels").get<std::size_t>();
    c.height = j.at("height").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.fine_channels = j.at("fine_channels").get<std::size_t>();
    c.coarse_channels = j.at("coarse_channels").get<std::size_t>();
    c.time_dim = j.at("time_dim").get<std::size_t>();
    c.T = j.at("T").get<int>();
    UNet net(c, 0);
    nn::load_parameters(net.parameters(), dir);
    return net;
}

// --- training --------------------------------------------------------------------

namespace {

struct NoisedBatch {
    Tensor z;  // [n, C, H, W]
    Tensor eps;
    std::vector<int> steps;
};

NoisedBatch make_batch(const std::vector<Tensor>& latents, const std::vector<std::size_t>& idx, std::size_t begin,
                       std::size_t end, const NoiseSchedule& schedule, nn::Rng& rng)
{
    const Shape& s = latents.at(idx[begin]).shape();
    const std::size_t per = latents[idx[begin]].size();
    const std::size_t n = end - begin;
    NoisedBatch b{Tensor({n, s[0], s[1], s[2]}), Tensor({n, s[0], s[1], s[2]}), {}};
    for (std::size_t k = 0; k < n; ++k) {
        const Tensor& z0 = latents[idx[begin + k]];
        if (z0.shape() != s) throw shape_error("train_denoiser", s, z0.shape());
        const int t = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(schedule.T)));
        const double a = std::sqrt(schedule.alpha_bar(t));
        const double c = std::sqrt(1.0 - schedule.alpha_bar(t));
        for (std::size_t i = 0; i < per; ++i) {
            const double e = rng.normal();
            b.eps[k * per + i] = e;
            b.z[k * per + i] = a * z0[i] + c * e;
        }
        b.steps.push_back(t);
    }
    return b;
}

}  // namespace

double denoiser_loss(const UNet& model, const std::vector<Tensor>& latents, const NoiseSchedule& schedule,
                     std::uint64_t seed)
{
    if (latents.empty()) throw std::invalid_argument("denoiser_loss: empty dataset");
    nn::Rng rng(seed);
    std::vector<std::size_t> idx(latents.size());
    std::iota(idx.begin(), idx.end(), 0);
    double total = 0.0;
    std::size_t count = 0;
    constexpr std::size_t chunk = 32;
    for (std::size_t b = 0; b < idx.size(); b += chunk) {
        const std::size_t e = std::min(idx.size(), b + chunk);
        NoisedBatch batch = make_batch(latents, idx, b, e, schedule, rng);
        UNet::Output out = model.forward(Var::constant(std::move(batch.z)), batch.steps);
        const Tensor& pred = out.eps.value();
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double d = pred[i] - batch.eps[i];
            total += d * d;
        }
        count += pred.size();
    }
    return total / static_cast<double>(count);
}

UNet train_denoiser(const std::vector<Tensor>& latents, const NoiseSchedule& schedule, const UNetConfig& model_config,
                    const DenoiserTrainConfig& config, const std::filesystem::path& csv_path,
                    DenoiserTrainReport* report)
{
    if (latents.empty()) throw std::invalid_argument("train_denoiser: empty dataset");
    if (model_config.T != schedule.T) throw std::invalid_argument("train_denoiser: model T differs from schedule T");
    nn::Rng rng = nn::Rng::derive(config.seed, 0x756e6574);
    UNet model(model_config, rng.next());

    // deterministic split: shuffled, last fraction held out
    std::vector<std::size_t> order(latents.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    std::size_t n_hold = static_cast<std::size_t>(std::round(config.holdout_fraction * static_cast<double>(latents.size())));
    if (latents.size() > 1) n_hold = std::clamp<std::size_t>(n_hold, 1, latents.size() - 1);
    else n_hold = 0;
    std::vector<Tensor> train, hold;
    for (std::size_t i = 0; i < order.size(); ++i) {
        (i < order.size() - n_hold ? train : hold).push_back(latents[order[i]]);
    }
    const std::vector<Tensor>& eval_set = hold.empty() ? train : hold;
    const std::uint64_t eval_seed = rng.next();

    DenoiserTrainReport rep;
    rep.initial_holdout_loss = denoiser_loss(model, eval_set, schedule, eval_seed);

    std::ofstream csv;
    if (!csv_path.empty()) {
        csv.open(csv_path);
        if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
        csv << "epoch,train_loss,holdout_loss\n";
        csv << "0,," << rep.initial_holdout_loss << '\n';
    }

    nn::Adam opt(model.parameters(), {config.lr, 0.9, 0.999, 1e-8, 1.0});
    const std::size_t bs = std::max<std::size_t>(1, config.batch_size);
    const std::size_t steps_per_epoch = (train.size() + bs - 1) / bs;
    const double total_steps = static_cast<double>(steps_per_epoch) * config.epochs;
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::size_t global = 0;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);
        double sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t b = 0; b < idx.size(); b += bs) {
            const double progress = static_cast<double>(global++) / total_steps;
            opt.set_lr(config.lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress))));
            NoisedBatch batch = make_batch(train, idx, b, std::min(idx.size(), b + bs), schedule, rng);
            ad::Tape tape;
            Var loss;
            {
                ad::RecordScope scope(tape);
                UNet::Output out = model.forward(Var::constant(std::move(batch.z)), batch.steps);
                loss = ad::mean(ad::square(out.eps - Var::constant(std::move(batch.eps))));
            }
            const double lv = loss.value().item();
            if (!std::isfinite(lv)) throw std::runtime_error("train_denoiser: loss diverged at epoch " + std::to_string(epoch));
            tape.backward(loss);
            opt.step();
            sum += lv;
            ++batches;
        }
        const double train_loss = sum / static_cast<double>(batches);
        const double hold_loss = denoiser_loss(model, eval_set, schedule, eval_seed);
        if (!std::isfinite(hold_loss)) throw std::runtime_error("train_denoiser: held-out loss is not finite");
        rep.train_loss.push_back(train_loss);
        rep.holdout_loss.push_back(hold_loss);
        if (csv) csv << epoch << ',' << train_loss << ',' << hold_loss << '\n';
    }
    if (report) *report = std::move(rep);
    return model;
}

}  // namespace drmo::diffusion
