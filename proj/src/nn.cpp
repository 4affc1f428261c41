#include "drmo/nn.hpp"

#include <cmath>
#include <numbers>
#include <set>
#include <stdexcept>

namespace drmo::nn {

double Rng::uniform()
{
    // 53 random mantissa bits
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal()
{
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

std::size_t Rng::index(std::size_t n)
{
    if (n == 0) throw std::invalid_argument("Rng::index: empty range");
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
}

Tensor Rng::normal_tensor(Shape shape, double stddev)
{
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = stddev * normal();
    return t;
}

Rng Rng::derive(std::uint64_t seed, std::uint64_t tag)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32), 0x6d6f7469u};
    std::uint64_t s = 0;
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    s = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
    return Rng(s);
}

// --- Adam ----------------------------------------------------------------------

Adam::Adam(ParamList params, AdamConfig config) : params_(std::move(params)), config_(config)
{
    for (const auto& p : params_) {
        m_.emplace_back(p->value().shape());
        v_.emplace_back(p->value().shape());
    }
}

void Adam::zero_grad()
{
    for (const auto& p : params_) p->zero_grad();
}

void Adam::step()
{
    ++step_;
    double scale = 1.0;
    if (config_.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& p : params_) {
            if (p->frozen()) continue;
            for (double g : p->grad().values()) sq += g * g;
        }
        const double norm = std::sqrt(sq);
        if (norm > config_.clip_norm) scale = config_.clip_norm / norm;
    }
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = *params_[i];
        if (p.frozen()) continue;
        Tensor& w = p.value();
        const Tensor& g = p.grad();
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = g[k] * scale;
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            const double mh = m[k] / c1;
            const double vh = v[k] / c2;
            w[k] -= config_.lr * mh / (std::sqrt(vh) + config_.eps);
        }
    }
    zero_grad();
}

// --- layers ----------------------------------------------------------------------

std::size_t parameter_count(const ParamList& params)
{
    std::size_t n = 0;
    for (const auto& p : params) n += p->value().size();
    return n;
}

void set_frozen(const ParamList& params, bool frozen)
{
    for (const auto& p : params) p->set_frozen(frozen);
}

void zero_grad(const ParamList& params)
{
    for (const auto& p : params) p->zero_grad();
}

namespace {

Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng)
{
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = rng.uniform(-bound, bound);
    return t;
}

}  // namespace

Linear::Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool bias)
{
    weight_ = ad::make_param(name + ".weight", uniform_init({out, in}, in, rng));
    if (bias) bias_ = ad::make_param(name + ".bias", uniform_init({out}, in, rng));
}

Var Linear::forward(const Var& x) const
{
    Var y = ad::matmul(x, ad::transpose(Var::of(weight_)));
    if (bias_) y = y + Var::of(bias_);
    return y;
}

ParamList Linear::parameters() const
{
    ParamList out{weight_};
    if (bias_) out.push_back(bias_);
    return out;
}

Conv2d::Conv2d(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
               std::size_t padding, Rng& rng, bool bias)
    : stride_(stride), padding_(padding)
{
    const std::size_t fan_in = in * kernel * kernel;
    weight_ = ad::make_param(name + ".weight", uniform_init({out, in, kernel, kernel}, fan_in, rng));
    if (bias) bias_ = ad::make_param(name + ".bias", uniform_init({out}, fan_in, rng));
}

Var Conv2d::forward(const Var& x) const
{
    return ad::conv2d(x, Var::of(weight_), bias_ ? Var::of(bias_) : Var(), stride_, padding_);
}

ParamList Conv2d::parameters() const
{
    ParamList out{weight_};
    if (bias_) out.push_back(bias_);
    return out;
}

GruCell::GruCell(const std::string& name, std::size_t in, std::size_t hidden, Rng& rng) : hidden_(hidden)
{
    w_ih_ = ad::make_param(name + ".w_ih", uniform_init({3 * hidden, in}, hidden, rng));
    w_hh_ = ad::make_param(name + ".w_hh", uniform_init({3 * hidden, hidden}, hidden, rng));
    b_ih_ = ad::make_param(name + ".b_ih", uniform_init({3 * hidden}, hidden, rng));
    b_hh_ = ad::make_param(name + ".b_hh", uniform_init({3 * hidden}, hidden, rng));
}

Var GruCell::forward(const Var& x, const Var& h) const
{
    return ad::gru_cell(x, h, Var::of(w_ih_), Var::of(w_hh_), Var::of(b_ih_), Var::of(b_hh_));
}

ParamList GruCell::parameters() const { return {w_ih_, w_hh_, b_ih_, b_hh_}; }

Tensor sinusoidal_embedding(double position, std::size_t dim, double max_period)
{
    if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: dim must be even and >= 2");
    const std::size_t half = dim / 2;
    Tensor out({dim});
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(max_period) * static_cast<double>(i) / static_cast<double>(half));
        out[i] = std::sin(position * freq);
        out[half + i] = std::cos(position * freq);
    }
    return out;
}

// --- checkpoints -----------------------------------------------------------------

void save_parameters(const ParamList& params, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    std::set<std::string> seen;
    for (const auto& p : params) {
        if (!seen.insert(p->name()).second) throw std::invalid_argument("save_parameters: duplicate name " + p->name());
        save_drt(p->value(), dir / (p->name() + ".drt"));
    }
}

void load_parameters(const ParamList& params, const std::filesystem::path& dir)
{
    for (const auto& p : params) {
        const auto path = dir / (p->name() + ".drt");
        if (!std::filesystem::exists(path)) throw std::runtime_error("missing checkpoint tensor " + path.string());
        Tensor t = load_drt(path);
        if (t.shape() != p->value().shape()) throw shape_error("load " + p->name(), p->value().shape(), t.shape());
        p->value() = std::move(t);
        p->zero_grad();
    }
}

}  // namespace drmo::nn
