#include "drmo/dss.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace drmo::dss {

using ad::Var;

// --- candidates ---------------------------------------------------------------------------

CandidateSet::CandidateSet(std::vector<int> steps) : steps_(std::move(steps))
{
    if (steps_.empty()) throw std::invalid_argument("candidate set is empty");
    for (std::size_t k = 0; k < steps_.size(); ++k) {
        if (steps_[k] < 1) throw std::invalid_argument("candidate step " + std::to_string(steps_[k]) + " < 1");
        if (k > 0 && steps_[k] <= steps_[k - 1]) throw std::invalid_argument("candidate steps must be strictly increasing");
    }
}

CandidateSet CandidateSet::uniform(int stride, int T)
{
    if (stride < 1 || T < stride) throw std::invalid_argument("uniform candidates: need 1 <= stride <= T");
    std::vector<int> steps;
    for (int t = stride; t <= T; t += stride) steps.push_back(t);
    return CandidateSet(std::move(steps));
}

std::size_t CandidateSet::index_of(int step) const
{
    const auto it = std::lower_bound(steps_.begin(), steps_.end(), step);
    if (it == steps_.end() || *it != step) throw std::invalid_argument("step " + std::to_string(step) + " is not a candidate");
    return static_cast<std::size_t>(it - steps_.begin());
}

bool CandidateSet::contains(int step) const { return std::binary_search(steps_.begin(), steps_.end(), step); }

double default_beta(const CandidateSet& candidates) { return 2.0 * std::numbers::e / candidates.min(); }

// --- labels -----------------------------------------------------------------------------------

std::vector<double> error_curve(const std::vector<Tensor>& step_matrices, const diffusion::Trajectory& ti,
                                const diffusion::Trajectory& tj, double tau, const CandidateSet& candidates)
{
    if (candidates.size() == 0) throw std::invalid_argument("error_curve: empty candidate set");
    const int T = static_cast<int>(step_matrices.size()) - 1;
    if (candidates.max() > T) throw std::invalid_argument("error_curve: candidate beyond T");
    std::vector<double> out(candidates.size());
    Tensor acc;
    std::size_t k = candidates.size();
    for (int t = T; t >= candidates.min(); --t) {
        const Tensor& m = step_matrices[static_cast<std::size_t>(t)];
        if (m.empty()) throw std::invalid_argument("error_curve: missing step matrix at t = " + std::to_string(t));
        if (acc.empty()) {
            acc = m;
        } else {
            for (std::size_t e = 0; e < acc.size(); ++e) acc[e] += m[e];
        }
        if (k > 0 && candidates[k - 1] == t) {
            --k;
            Tensor mean = acc;
            const double inv = 1.0 / static_cast<double>(T - t + 1);
            for (std::size_t e = 0; e < mean.size(); ++e) mean[e] *= inv;
            out[k] = metrics::transformation_error(ti.latent(t), tj.latent(t), motion::normalize_motion(mean, tau));
        }
    }
    return out;
}

std::vector<double> error_curve(const diffusion::Trajectory& ti, const diffusion::Trajectory& tj,
                                const motion::MotionNets& nets, const CandidateSet& candidates)
{
    return error_curve(motion::step_motions(ti, tj, nets, candidates.min()), ti, tj, nets.config.tau, candidates);
}

double weighted_error(int t, double e, double beta) { return std::log(beta * t) * e; }

int gt_switch_step(const std::vector<double>& errors, const CandidateSet& candidates, double beta)
{
    if (errors.size() != candidates.size()) {
        throw std::invalid_argument("gt_switch_step: " + std::to_string(errors.size()) + " errors for " +
                                    std::to_string(candidates.size()) + " candidates");
    }
    if (!(beta * candidates.min() > 1.0)) {
        throw std::invalid_argument("gt_switch_step: beta * min(candidates) must exceed 1 (got " +
                                    std::to_string(beta * candidates.min()) + ")");
    }
    std::size_t best = 0;
    double best_value = 0.0;
    for (std::size_t k = 0; k < errors.size(); ++k) {
        if (!std::isfinite(errors[k]) || errors[k] < 0.0) throw std::invalid_argument("gt_switch_step: errors must be finite and >= 0");
        const double v = weighted_error(candidates[k], errors[k], beta);
        if (k == 0 || v < best_value) {
            best = k;
            best_value = v;
        }
    }
    return candidates[best];
}

PairStats pair_stats(const std::vector<Tensor>& step_matrices, const diffusion::Trajectory& ti,
                     const diffusion::Trajectory& tj, double tau, const CandidateSet& candidates,
                     const metrics::HistogramSpec& spec)
{
    const int T = static_cast<int>(step_matrices.size()) - 1;
    PairStats out;
    out.error = error_curve(step_matrices, ti, tj, tau, candidates);
    for (int t : candidates.steps()) {
        const int a = t < T ? t : T - 1;
        out.nmi.push_back(metrics::nmi(step_matrices[static_cast<std::size_t>(a)], step_matrices[static_cast<std::size_t>(a + 1)], spec));
    }
    return out;
}

// --- selector -----------------------------------------------------------------------------------

namespace {

constexpr std::size_t kFeatures = 4;

}  // namespace

Tensor selector_features(const PairStats& stats, const CandidateSet& candidates, int T, const std::vector<bool>& mask)
{
    const std::size_t L = candidates.size();
    if (stats.nmi.size() != L || stats.error.size() != L || mask.size() != L) {
        throw std::invalid_argument("selector_features: statistics do not match the candidate set");
    }
    if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) {
        throw std::invalid_argument("selector_features: every step is masked");
    }
    // rows run from the largest candidate down, following the denoising order
    Tensor out({L, kFeatures});
    for (std::size_t r = 0; r < L; ++r) {
        const std::size_t k = L - 1 - r;
        double* row = out.data() + r * kFeatures;
        row[0] = static_cast<double>(candidates[k]) / T;
        if (!mask[k]) continue;
        row[1] = stats.nmi[k];
        row[2] = std::log(stats.error[k] + 1e-8);
        row[3] = 1.0;
    }
    return out;
}

std::vector<bool> draw_mask(std::size_t length, double rate, nn::Rng& rng)
{
    if (length == 0) throw std::invalid_argument("draw_mask: empty sequence");
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("draw_mask: rate must be in [0, 1)");
    std::vector<bool> mask(length);
    do {
        for (std::size_t k = 0; k < length; ++k) mask[k] = rng.uniform() >= rate;
    } while (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; }));
    return mask;
}

SelectorNet::SelectorNet(const SelectorConfig& config, const CandidateSet& candidates, std::uint64_t seed)
    : config_(config), candidates_(candidates)
{
    if (candidates.max() > config.T) throw std::invalid_argument("selector: candidate beyond T");
    nn::Rng rng = nn::Rng::derive(seed, 0x647373);
    cell_ = nn::GruCell("dss.gru", kFeatures, config.hidden, rng);
    head_ = nn::Linear("dss.head", config.hidden, candidates.size(), rng);
}

Var SelectorNet::logits(const Var& features) const
{
    const Shape& s = features.shape();
    if (s.size() != 3 || s[2] != kFeatures || s[0] != candidates_.size()) {
        throw shape_error("selector", s, {candidates_.size(), 0, kFeatures});
    }
    const std::size_t L = s[0], B = s[1];
    Var h = Var::constant(Tensor({B, config_.hidden}));
    for (std::size_t l = 0; l < L; ++l) h = cell_.forward(ad::reshape(ad::slice(features, 0, l, l + 1), {B, kFeatures}), h);
    return head_.forward(h);
}

std::vector<double> SelectorNet::probabilities(const Tensor& features) const
{
    if (features.rank() != 2) throw ShapeError("selector: expected L x 4 features, got " + shape_str(features.shape()));
    const Tensor batch = features.reshape({features.dim(0), 1, features.dim(1)});
    const Tensor p = ad::softmax(logits(Var::constant(batch)), 1).value();
    return std::vector<double>(p.data(), p.data() + p.size());
}

ad::ParamList SelectorNet::parameters() const
{
    ad::ParamList out = cell_.parameters();
    for (const auto& p : head_.parameters()) out.push_back(p);
    return out;
}

void SelectorNet::save(const std::filesystem::path& dir) const
{
    nn::save_parameters(parameters(), dir);
    nlohmann::json m = {{"hidden", config_.hidden}, {"T", config_.T}, {"candidates", candidates_.steps()}};
    std::ofstream os(dir / "dss_manifest.json");
    os << m.dump(2) << '\n';
}

SelectorNet SelectorNet::load(const std::filesystem::path& dir)
{
    std::ifstream is(dir / "dss_manifest.json");
    if (!is) throw std::runtime_error("missing selector checkpoint " + (dir / "dss_manifest.json").string());
    const auto m = nlohmann::json::parse(is);
    SelectorConfig c;
    c.hidden = m.at("hidden").get<std::size_t>();
    c.T = m.at("T").get<int>();
    SelectorNet net(c, CandidateSet(m.at("candidates").get<std::vector<int>>()), 0);
    nn::load_parameters(net.parameters(), dir);
    return net;
}

int predict_switch(const SelectorNet& net, const PairStats& stats, const std::vector<bool>& mask)
{
    const auto p = net.probabilities(selector_features(stats, net.candidates(), net.config().T, mask));
    const auto best = std::max_element(p.begin(), p.end());  // first maximum: smaller step
    return net.candidates()[static_cast<std::size_t>(best - p.begin())];
}

namespace {

Var batch_features(const std::vector<const DssSample*>& batch, const CandidateSet& candidates, int T,
                   const std::vector<std::vector<bool>>& masks)
{
    const std::size_t L = candidates.size(), B = batch.size();
    Tensor out({L, B, kFeatures});
    for (std::size_t b = 0; b < B; ++b) {
        const Tensor f = selector_features(batch[b]->stats, candidates, T, masks[b]);
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t c = 0; c < kFeatures; ++c) out[(l * B + b) * kFeatures + c] = f[l * kFeatures + c];
    }
    return Var::constant(std::move(out));
}

Var batch_cross_entropy(const Var& logits, const std::vector<const DssSample*>& batch)
{
    const std::size_t B = batch.size(), K = logits.dim(1);
    Tensor onehot({B, K});
    for (std::size_t b = 0; b < B; ++b) {
        if (batch[b]->label >= K) throw std::invalid_argument("selector: label out of range");
        onehot[b * K + batch[b]->label] = 1.0;
    }
    return ad::mul_scalar(ad::sum(ad::log_softmax(logits, 1) * Var::constant(std::move(onehot))), -1.0 / static_cast<double>(B));
}

std::vector<const DssSample*> pointers(const std::vector<DssSample>& samples)
{
    std::vector<const DssSample*> out;
    for (const auto& s : samples) out.push_back(&s);
    return out;
}

}  // namespace

double accuracy(const SelectorNet& net, const std::vector<DssSample>& samples, double mask_rate, std::uint64_t seed)
{
    if (samples.empty()) throw std::invalid_argument("accuracy: no samples");
    nn::Rng rng = nn::Rng::derive(seed, 0x616363);
    std::size_t hits = 0;
    for (const auto& s : samples) {
        const auto mask = mask_rate > 0.0 ? draw_mask(net.candidates().size(), mask_rate, rng)
                                          : std::vector<bool>(net.candidates().size(), true);
        if (predict_switch(net, s.stats, mask) == net.candidates()[s.label]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

double cross_entropy(const SelectorNet& net, const std::vector<DssSample>& samples)
{
    const auto batch = pointers(samples);
    const std::vector<std::vector<bool>> masks(batch.size(), std::vector<bool>(net.candidates().size(), true));
    return batch_cross_entropy(net.logits(batch_features(batch, net.candidates(), net.config().T, masks)), batch).value().item();
}

SelectorNet train_dss(const std::vector<DssSample>& train, const std::vector<DssSample>& heldout,
                      const CandidateSet& candidates, const SelectorConfig& model_config, const DssTrainConfig& config,
                      const std::filesystem::path& csv_path, DssTrainReport* report)
{
    if (train.empty()) throw std::invalid_argument("train_dss: no training samples");
    if (config.batch_size == 0) throw std::invalid_argument("train_dss: batch size must be positive");
    SelectorNet net(model_config, candidates, config.seed);
    nn::AdamConfig ac;
    ac.lr = config.lr;
    ac.clip_norm = 1.0;
    nn::Adam opt(net.parameters(), ac);
    DssTrainReport rep;
    std::ofstream csv;
    if (!csv_path.empty()) {
        csv.open(csv_path);
        if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
        csv << "epoch,train_loss,heldout_accuracy,heldout_masked_accuracy\n" << std::setprecision(10);
    }
    const auto all = pointers(train);
    for (int e = 0; e < config.epochs; ++e) {
        nn::Rng rng = nn::Rng::derive(config.seed, 0x747200 + static_cast<std::uint64_t>(e));
        std::vector<std::size_t> order(all.size());
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        double sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            std::vector<const DssSample*> batch;
            std::vector<std::vector<bool>> masks;
            for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
                batch.push_back(all[order[i]]);
                masks.push_back(draw_mask(candidates.size(), config.mask_rate, rng));
            }
            ad::Tape tape;
            ad::RecordScope scope(tape);
            const Var loss = batch_cross_entropy(net.logits(batch_features(batch, candidates, model_config.T, masks)), batch);
            tape.backward(loss);
            opt.step();
            sum += loss.value().item() * static_cast<double>(batch.size());
        }
        const double mean = sum / static_cast<double>(all.size());
        if (!std::isfinite(mean)) throw std::runtime_error("train_dss: non-finite loss");
        rep.train_loss.push_back(mean);
        if (!heldout.empty()) {
            rep.heldout_accuracy.push_back(accuracy(net, heldout, 0.0, config.seed));
            rep.heldout_masked_accuracy.push_back(accuracy(net, heldout, config.mask_rate, config.seed));
        } else {
            rep.heldout_accuracy.push_back(0.0);
            rep.heldout_masked_accuracy.push_back(0.0);
        }
        if (csv) csv << e + 1 << ',' << mean << ',' << rep.heldout_accuracy.back() << ',' << rep.heldout_masked_accuracy.back() << '\n';
    }
    if (report) *report = rep;
    return net;
}

// --- label files ------------------------------------------------------------------------------

void write_labels_csv(const std::filesystem::path& path, const std::vector<DssSample>& samples,
                      const CandidateSet& candidates, double beta)
{
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "clip,frame_i,frame_j,t_star,beta";
    for (int t : candidates.steps()) os << ",e_" << t;
    for (int t : candidates.steps()) os << ",nmi_" << t;
    os << '\n' << std::setprecision(17);
    for (const auto& s : samples) {
        os << s.clip << ',' << s.frame_i << ',' << s.frame_j << ',' << s.t_star << ',' << beta;
        for (double v : s.stats.error) os << ',' << v;
        for (double v : s.stats.nmi) os << ',' << v;
        os << '\n';
    }
}

std::vector<DssSample> read_labels_csv(const std::filesystem::path& path, const CandidateSet& candidates)
{
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    std::getline(is, line);
    std::vector<DssSample> out;
    const std::size_t L = candidates.size();
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
        if (cells.size() != 5 + 2 * L) throw std::runtime_error("malformed label row in " + path.string());
        DssSample s;
        s.clip = cells[0];
        s.frame_i = std::stoi(cells[1]);
        s.frame_j = std::stoi(cells[2]);
        s.t_star = std::stoi(cells[3]);
        s.label = candidates.index_of(s.t_star);
        for (std::size_t k = 0; k < L; ++k) s.stats.error.push_back(std::stod(cells[5 + k]));
        for (std::size_t k = 0; k < L; ++k) s.stats.nmi.push_back(std::stod(cells[5 + L + k]));
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace drmo::dss
