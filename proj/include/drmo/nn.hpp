#pragma once

#include "drmo/autodiff.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

namespace drmo::nn {

using ad::ParamList;
using ad::ParamPtr;
using ad::Var;

// Seeded generator. Distributions are computed here (not via <random> distributions)
// so that draws are identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    double uniform();  // [0, 1)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal();
    std::size_t index(std::size_t n);
    Tensor normal_tensor(Shape shape, double stddev = 1.0);

    // Independent stream derived from this generator's seed material and a tag.
    static Rng derive(std::uint64_t seed, std::uint64_t tag);

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// --- optimizer ---------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // global gradient-norm clip, 0 disables
};

class Adam {
public:
    Adam(ParamList params, AdamConfig config = {});

    // Bias-corrected update of every non-frozen parameter, then gradients are zeroed.
    void step();
    void zero_grad();

    std::uint64_t step_count() const noexcept { return step_; }
    double lr() const noexcept { return config_.lr; }
    void set_lr(double lr) noexcept { config_.lr = lr; }
    const Tensor& first_moment(std::size_t i) const { return m_.at(i); }
    const Tensor& second_moment(std::size_t i) const { return v_.at(i); }

private:
    ParamList params_;
    AdamConfig config_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::uint64_t step_ = 0;
};

// --- layers --------------------------------------------------------------------

std::size_t parameter_count(const ParamList& params);
void set_frozen(const ParamList& params, bool frozen);
void zero_grad(const ParamList& params);

// y = x W^T + b; x: [B, in]
class Linear {
public:
    Linear() = default;
    Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool bias = true);

    Var forward(const Var& x) const;
    ParamList parameters() const;
    const ParamPtr& weight() const { return weight_; }
    const ParamPtr& bias() const { return bias_; }

private:
    ParamPtr weight_;
    ParamPtr bias_;
};

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
           std::size_t padding, Rng& rng, bool bias = true);

    Var forward(const Var& x) const;
    ParamList parameters() const;
    const ParamPtr& weight() const { return weight_; }
    const ParamPtr& bias() const { return bias_; }

private:
    ParamPtr weight_;
    ParamPtr bias_;
    std::size_t stride_ = 1;
    std::size_t padding_ = 0;
};

class GruCell {
public:
    GruCell() = default;
    GruCell(const std::string& name, std::size_t in, std::size_t hidden, Rng& rng);

    Var forward(const Var& x, const Var& h) const;
    ParamList parameters() const;
    std::size_t hidden() const noexcept { return hidden_; }

private:
    ParamPtr w_ih_, w_hh_, b_ih_, b_hh_;
    std::size_t hidden_ = 0;
};

// Sinusoidal embedding of a scalar position into `dim` features (sin half, cos half).
Tensor sinusoidal_embedding(double position, std::size_t dim, double max_period = 10000.0);

// --- checkpoints ---------------------------------------------------------------

// One DRT1 file per parameter, named "<parameter name>.drt".
void save_parameters(const ParamList& params, const std::filesystem::path& dir);
// Loads every parameter by name; shape mismatches and missing files raise.
void load_parameters(const ParamList& params, const std::filesystem::path& dir);

}  // namespace drmo::nn
