#pragma once

// Independent oracles and property suites shared by the unit tests and the acceptance
// binary. Nothing here calls the library routine it checks.

#include "drmo/autodiff.hpp"
#include "drmo/dss.hpp"
#include "drmo/metrics.hpp"
#include "drmo/nn.hpp"

#include <functional>
#include <string>
#include <vector>

namespace drmo::checks {

// --- gradient checking ---------------------------------------------------------------

using VarFn = std::function<ad::Var(const std::vector<ad::Var>&)>;

// Relative error ||g_ad - g_fd|| / max(||g_ad||, ||g_fd||) of the loss sum(w * f(x)) for
// a seeded random weight w, maximised over the inputs. Central differences, step h.
double gradient_rel_error(const VarFn& f, const std::vector<Tensor>& inputs, nn::Rng& rng, double h = 1e-5);

struct PrimitiveCase {
    std::string name;
    VarFn fn;
    std::function<std::vector<Tensor>(nn::Rng&)> inputs;
};

// One case per differentiable primitive (several for the broadcasting and convolution
// variants). Inputs avoid kinks and singularities.
std::vector<PrimitiveCase> primitive_cases();

struct GradCheckRow {
    std::string name;
    int seeds = 0;
    double max_rel_error = 0.0;
};

std::vector<GradCheckRow> check_primitive_gradients(int seeds);

// --- motion algebra --------------------------------------------------------------------

struct PropertyRow {
    std::string name;
    std::size_t cases = 0;
    std::size_t failures = 0;
    double worst = 0.0;  // largest violation seen
};

// Cosine bounds, zero rows, column sums, mass preservation, convex combination,
// identity and permutation recovery at tau = 1e-3 and block upsampling, for every N in
// 1..max_n.
std::vector<PropertyRow> motion_algebra_suite(std::size_t max_n, int seeds_per_n);

// --- NMI ---------------------------------------------------------------------------------

// Joint-histogram mutual information normalised by sqrt(Ha Hb), built from its own
// binning with the documented degenerate-entropy conventions.
double oracle_nmi(const Tensor& a, const Tensor& b, std::size_t bins, double lo, double hi);

struct NmiReport {
    std::size_t pairs = 0;
    double max_oracle_diff = 0.0;
    double max_self_diff = 0.0;   // |NMI(A, A) - 1|
    double independent_mean = 0.0;
    int independent_seeds = 0;
};

NmiReport nmi_suite(std::size_t pairs, int independent_seeds);

// --- switch rule --------------------------------------------------------------------------

// argmin over candidates of log(beta t) e_t by exhaustive evaluation; the smallest t
// among equal minima.
int brute_force_switch(const std::vector<double>& errors, const std::vector<int>& steps, double beta);

struct SwitchReport {
    std::size_t curves = 0;
    std::size_t mismatches = 0;
    std::size_t tie_curves = 0;
    std::size_t tie_mismatches = 0;
};

// Random curves (a share of them with planted exact ties) over the default candidates.
SwitchReport switch_rule_suite(std::size_t curves, std::uint64_t seed);

}  // namespace drmo::checks
