#include "drmo/motion.hpp"

#include <Eigen/Core>

#include <json.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace drmo::motion {

// --- matrix algebra -----------------------------------------------------------------

Tensor to_locations(const Tensor& chw)
{
    if (chw.rank() != 3) throw ShapeError("to_locations: expected C x H x W, got " + shape_str(chw.shape()));
    const std::size_t C = chw.dim(0), N = chw.dim(1) * chw.dim(2);
    Tensor out({N, C});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < N; ++p) out[p * C + c] = chw[c * N + p];
    return out;
}

Tensor from_locations(const Tensor& nc, std::size_t height, std::size_t width)
{
    if (nc.rank() != 2 || nc.dim(0) != height * width) throw shape_error("from_locations", nc.shape(), {height * width, 0});
    const std::size_t C = nc.dim(1), N = nc.dim(0);
    Tensor out({C, height, width});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < N; ++p) out[c * N + p] = nc[p * C + c];
    return out;
}

Var to_locations(const Var& chw)
{
    const Shape& s = chw.shape();
    if (s.size() != 3) throw ShapeError("to_locations: expected C x H x W, got " + shape_str(s));
    return ad::transpose(ad::reshape(chw, {s[0], s[1] * s[2]}));
}

namespace {

Tensor unit_rows(const Tensor& x)
{
    const std::size_t n = x.dim(0), c = x.dim(1);
    Tensor out(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const double* r = x.data() + i * c;
        double ss = 0.0;
        for (std::size_t k = 0; k < c; ++k) ss += r[k] * r[k];
        if (ss == 0.0) continue;
        const double inv = 1.0 / std::sqrt(ss);
        for (std::size_t k = 0; k < c; ++k) out[i * c + k] = r[k] * inv;
    }
    return out;
}

// ua ub^T for row-normalized operands.
Tensor cosine_matrix(const Tensor& ua, const Tensor& ub)
{
    const std::size_t n = ua.dim(0), c = ua.dim(1);
    Tensor out({n, ub.dim(0)});
    gemm(false, true, n, ub.dim(0), c, 1.0, ua.data(), ub.data(), 0.0, out.data());
    return out;
}

void check_motion_operands(const char* op, const Shape& a, const Shape& b)
{
    if (a.size() != 2 || b.size() != 2 || a != b) throw shape_error(op, a, b);
    if (a[1] == 0) throw ShapeError(std::string(op) + ": zero feature channels");
}

}  // namespace

Tensor raw_motion(const Tensor& a, const Tensor& b)
{
    check_motion_operands("raw_motion", a.shape(), b.shape());
    return cosine_matrix(unit_rows(a), unit_rows(b));
}

Var raw_motion(const Var& a, const Var& b)
{
    check_motion_operands("raw_motion", a.shape(), b.shape());
    return ad::matmul(ad::normalize_rows(a), ad::transpose(ad::normalize_rows(b)));
}

Tensor normalize_motion(const Tensor& m, double tau) { return normalize_motion(Var::constant(m), tau).value(); }

Var normalize_motion(const Var& m, double tau)
{
    if (!(tau > 0.0)) throw std::invalid_argument("normalize_motion: temperature must be positive");
    if (m.shape().size() != 2 || m.dim(0) != m.dim(1)) throw ShapeError("normalize_motion: expected square matrix, got " + shape_str(m.shape()));
    return ad::softmax(ad::mul_scalar(m, 1.0 / tau), 0);
}

Tensor apply_motion(const Tensor& x, const Tensor& m) { return apply_motion(Var::constant(x), Var::constant(m)).value(); }

Var apply_motion(const Var& x, const Var& m)
{
    const Shape& xs = x.shape();
    const Shape& ms = m.shape();
    if (xs.size() != 2 || ms.size() != 2 || ms[0] != ms[1] || ms[0] != xs[0]) throw shape_error("apply_motion", xs, ms);
    return ad::matmul(ad::transpose(m), x);
}

namespace {

std::vector<std::size_t> parent_index(std::size_t h, std::size_t w, std::size_t factor)
{
    const std::size_t H = h * factor, W = w * factor;
    std::vector<std::size_t> idx(H * W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) idx[y * W + x] = (y / factor) * w + x / factor;
    return idx;
}

}  // namespace

Tensor upsample_motion(const Tensor& m, std::size_t h, std::size_t w, std::size_t factor)
{
    if (m.shape() != Shape{h * w, h * w}) throw shape_error("upsample_motion", m.shape(), {h * w, h * w});
    const auto idx = parent_index(h, w, factor);
    const std::size_t n = idx.size(), src = h * w;
    Tensor out({n, n});
    for (std::size_t p = 0; p < n; ++p) {
        const double* row = m.data() + idx[p] * src;
        double* o = out.data() + p * n;
        for (std::size_t q = 0; q < n; ++q) o[q] = row[idx[q]];
    }
    return out;
}

Var upsample_motion(const Var& m, std::size_t h, std::size_t w, std::size_t factor)
{
    if (m.shape() != Shape{h * w, h * w}) throw shape_error("upsample_motion", m.shape(), {h * w, h * w});
    const auto idx = parent_index(h, w, factor);
    return ad::index_select(ad::index_select(m, 0, idx), 1, idx);
}

double mean_l1(const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape()) throw shape_error("mean_l1", a.shape(), b.shape());
    if (a.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

// --- phi_1 -----------------------------------------------------------------------------

FeatureProjector::FeatureProjector(const MotionConfig& config, nn::Rng& rng)
{
    for (std::size_t s = 0; s < config.taps.size(); ++s) {
        const Tap tap = config.taps[s];
        const std::size_t c = config.channels(tap);
        nn::Conv2d conv("mtn.phi1." + diffusion::to_string(tap), c, c, 3, 1, 1, rng);
        Tensor& w = conv.weight()->value();
        w.fill(0.0);
        for (std::size_t i = 0; i < c; ++i) w.at({i, i, 1, 1}) = 1.0;
        conv.bias()->value().fill(0.0);
        convs_.push_back(std::move(conv));
    }
}

Var FeatureProjector::forward(std::size_t tap_index, const Var& feature) const
{
    const Shape& s = feature.shape();
    if (s.size() != 3) throw ShapeError("phi1: expected C x H x W feature, got " + shape_str(s));
    const Var y = convs_.at(tap_index).forward(ad::reshape(feature, {1, s[0], s[1], s[2]}));
    return ad::reshape(y, s);
}

Tensor FeatureProjector::locations(std::size_t tap_index, const Tensor& feature) const
{
    const Shape& s = feature.shape();
    if (s.size() != 3) throw ShapeError("phi1: expected C x H x W feature, got " + shape_str(s));
    const auto& conv = convs_.at(tap_index);
    const Tensor& w = conv.weight()->value();  // C x C x 3 x 3, stride 1, padding 1
    const Tensor& b = conv.bias()->value();
    const std::size_t c = s[0], h = s[1], wd = s[2], n = h * wd, kk = c * 9;
    if (w.dim(1) != c) throw shape_error("phi1", w.shape(), s);
    // cols[p, (ci, dy, dx)] = x[ci, y + dy - 1, x + dx - 1] (zero outside)
    Tensor cols({n, kk});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < wd; ++x) {
            double* row = cols.data() + (y * wd + x) * kk;
            for (std::size_t ci = 0; ci < c; ++ci) {
                for (std::size_t dy = 0; dy < 3; ++dy) {
                    const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y + dy) - 1;
                    for (std::size_t dx = 0; dx < 3; ++dx) {
                        const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x + dx) - 1;
                        const bool inside = yy >= 0 && xx >= 0 && yy < static_cast<std::ptrdiff_t>(h) &&
                                            xx < static_cast<std::ptrdiff_t>(wd);
                        row[ci * 9 + dy * 3 + dx] = inside ? feature[(ci * h + yy) * wd + xx] : 0.0;
                    }
                }
            }
        }
    }
    Tensor out({n, w.dim(0)});
    for (std::size_t p = 0; p < n; ++p) std::copy(b.data(), b.data() + b.size(), out.data() + p * w.dim(0));
    gemm(false, true, n, w.dim(0), kk, 1.0, cols.data(), w.data(), 1.0, out.data());
    return out;
}

ad::ParamList FeatureProjector::parameters() const
{
    ad::ParamList out;
    for (const auto& c : convs_) {
        auto p = c.parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

// --- phi_2 -----------------------------------------------------------------------------

FusionNet::FusionNet(const MotionConfig& config, nn::Rng& rng) : scales_(config.taps.size())
{
    hidden_ = nn::Linear("mtn.phi2.hidden", scales_, config.fusion_hidden, rng);
    out_ = nn::Linear("mtn.phi2.out", config.fusion_hidden, scales_, rng);
    out_.weight()->value().fill(0.0);
    out_.bias()->value().fill(0.0);
}

Var FusionNet::forward(const std::vector<Var>& matrices) const
{
    if (matrices.size() != scales_ || matrices.empty()) {
        throw std::invalid_argument("phi2: expected " + std::to_string(scales_) + " matrices, got " + std::to_string(matrices.size()));
    }
    const Shape shape = matrices[0].shape();
    const std::size_t n = shape_numel(shape);
    std::vector<Var> cols;
    for (const auto& m : matrices) {
        if (m.shape() != shape) throw shape_error("phi2", shape, m.shape());
        cols.push_back(ad::reshape(m, {n, 1}));
    }
    const Var x = scales_ == 1 ? cols[0] : ad::concat(cols, 1);
    const Var h = ad::relu(hidden_.forward(x));
    const Var w = ad::softmax(out_.forward(h), 1);
    return ad::reshape(ad::sum_axis(w * x, 1), shape);
}

Tensor FusionNet::fuse(const std::vector<Tensor>& matrices) const
{
    if (matrices.size() != scales_ || matrices.empty()) {
        throw std::invalid_argument("phi2: expected " + std::to_string(scales_) + " matrices, got " + std::to_string(matrices.size()));
    }
    const Shape shape = matrices[0].shape();
    for (const auto& m : matrices) {
        if (m.shape() != shape) throw shape_error("phi2", shape, m.shape());
    }
    const std::size_t S = scales_, Hd = hidden_.weight()->value().dim(0), n = shape_numel(shape);
    const Tensor& w1 = hidden_.weight()->value();
    const Tensor& b1 = hidden_.bias()->value();
    const Tensor& w2 = out_.weight()->value();
    const Tensor& b2 = out_.bias()->value();
    Tensor out(shape);
    double* o = out.data();
    if (S == 1) {
        std::copy(matrices[0].data(), matrices[0].data() + n, o);
        return out;
    }
    if (S == 2) {
        // two-way softmax: out = x0 + sigmoid(l1 - l0) (x1 - x0)
        std::vector<double> v(Hd);
        for (std::size_t k = 0; k < Hd; ++k) v[k] = w2[Hd + k] - w2[k];
        const double d = b2[1] - b2[0];
        // Blocked so that the running logit stays in L1 across the hidden units.
        using Array = Eigen::Array<double, Eigen::Dynamic, 1>;
        constexpr std::size_t block = 512;
        Array g(static_cast<Eigen::Index>(block));
        for (std::size_t begin = 0; begin < n; begin += block) {
            const auto len = static_cast<Eigen::Index>(std::min(block, n - begin));
            const Eigen::Map<const Array> x0(matrices[0].data() + begin, len);
            const Eigen::Map<const Array> x1(matrices[1].data() + begin, len);
            auto gb = g.head(len);
            gb.setConstant(d);
            for (std::size_t k = 0; k < Hd; ++k) {
                const double bk = b1[k], u0 = w1[2 * k], u1 = w1[2 * k + 1];
                gb += v[k] * (bk + u0 * x0 + u1 * x1).max(0.0);
            }
            Eigen::Map<Array>(o + begin, len) = x0 + (x1 - x0) / (1.0 + (-gb).exp());
        }
        return out;
    }
    std::vector<double> x(S), h(Hd), l(S);
    for (std::size_t e = 0; e < n; ++e) {
        for (std::size_t s = 0; s < S; ++s) x[s] = matrices[s][e];
        for (std::size_t k = 0; k < Hd; ++k) {
            double a = b1[k];
            for (std::size_t s = 0; s < S; ++s) a += w1[k * S + s] * x[s];
            h[k] = a > 0.0 ? a : 0.0;
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < S; ++s) {
            double a = b2[s];
            for (std::size_t k = 0; k < Hd; ++k) a += w2[s * Hd + k] * h[k];
            l[s] = a;
            mx = std::max(mx, a);
        }
        double z = 0.0, acc = 0.0;
        for (std::size_t s = 0; s < S; ++s) {
            const double p = std::exp(l[s] - mx);
            z += p;
            acc += p * x[s];
        }
        out[e] = acc / z;
    }
    return out;
}

ad::ParamList FusionNet::parameters() const
{
    auto a = hidden_.parameters();
    auto b = out_.parameters();
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

// --- phi_3 -----------------------------------------------------------------------------

namespace {

constexpr std::size_t kStepPosDim = 8;
constexpr std::size_t kStatDim = 4;

// mean, standard deviation, mean diagonal, mean column maximum
std::array<double, kStatDim> matrix_stats(const Tensor& m)
{
    const std::size_t n = m.dim(0);
    double s = 0, s2 = 0, diag = 0, colmax = 0;
    std::vector<double> mx(n, -std::numeric_limits<double>::infinity());
    for (std::size_t p = 0; p < n; ++p) {
        const double* row = m.data() + p * n;
        for (std::size_t q = 0; q < n; ++q) {
            s += row[q];
            s2 += row[q] * row[q];
            mx[q] = std::max(mx[q], row[q]);
        }
        diag += row[p];
    }
    for (double v : mx) colmax += v;
    const double cnt = static_cast<double>(m.size());
    const double mean = s / cnt;
    return {mean, std::sqrt(std::max(0.0, s2 / cnt - mean * mean)), diag / n, colmax / n};
}

}  // namespace

SurrogateNet::SurrogateNet(const MotionConfig& config, nn::Rng& rng) : config_(config)
{
    step_table_ = ad::make_param("mtn.phi3.step_embedding",
                                 rng.normal_tensor({static_cast<std::size_t>(config.T) + 1, config.step_embedding}, 0.5));
    hidden_ = nn::Linear("mtn.phi3.hidden", kStepPosDim + kStatDim + config.step_embedding, config.surrogate_hidden, rng);
    logit_ = nn::Linear("mtn.phi3.logit", config.surrogate_hidden, 1, rng);
    logit_.weight()->value().fill(0.0);
    logit_.bias()->value().fill(0.0);
    gain_ = ad::make_param("mtn.phi3.gain", Tensor({1}, 1.0));
}

Tensor SurrogateNet::step_features(const std::vector<const Tensor*>& mats, int t_star) const
{
    const std::size_t n = mats.size();
    Tensor f({n, kStepPosDim + kStatDim});
    for (std::size_t k = 0; k < n; ++k) {
        const int step = t_star + static_cast<int>(k);
        const Tensor pos = nn::sinusoidal_embedding(1000.0 * step / config_.T, kStepPosDim);
        const auto st = matrix_stats(*mats[k]);
        double* row = f.data() + k * (kStepPosDim + kStatDim);
        std::copy(pos.data(), pos.data() + kStepPosDim, row);
        std::copy(st.begin(), st.end(), row + kStepPosDim);
    }
    return f;
}

Var SurrogateNet::step_weights(const std::vector<const Tensor*>& mats, int t_star) const
{
    if (mats.empty()) throw std::invalid_argument("surrogate: empty step range");
    if (t_star < 1 || t_star + static_cast<int>(mats.size()) - 1 != config_.T) {
        throw std::invalid_argument("surrogate: steps " + std::to_string(t_star) + ".." +
                                    std::to_string(t_star + static_cast<int>(mats.size()) - 1) + " do not end at T=" +
                                    std::to_string(config_.T));
    }
    const Shape& shape = mats[0]->shape();
    for (const auto* m : mats) {
        if (m->shape() != shape) throw shape_error("surrogate", shape, m->shape());
    }
    const std::size_t n = mats.size();
    const Var emb = ad::index_select(Var::of(step_table_), 0, std::vector<std::size_t>(n, static_cast<std::size_t>(t_star)));
    const Var x = ad::concat({Var::constant(step_features(mats, t_star)), emb}, 1);
    const Var logits = ad::reshape(logit_.forward(ad::silu(hidden_.forward(x))), {1, n});
    return ad::softmax(logits, 1);
}

Var SurrogateNet::forward(const std::vector<Var>& mats, int t_star) const
{
    std::vector<const Tensor*> values;
    values.reserve(mats.size());
    for (const auto& m : mats) values.push_back(&m.value());
    const Var w = step_weights(values, t_star);
    const Shape shape = mats[0].shape();
    const std::size_t n = mats.size(), cells = shape_numel(shape);
    std::vector<Var> rows;
    rows.reserve(n);
    for (const auto& m : mats) rows.push_back(ad::reshape(m, {1, cells}));
    const Var stacked = n == 1 ? rows[0] : ad::concat(rows, 0);
    const Var mixed = ad::reshape(ad::matmul(w, stacked), shape);
    return mixed * Var::of(gain_);
}

double SurrogateNet::step_logit(const Tensor& matrix, int step, int t_star) const
{
    if (t_star < 1 || t_star > config_.T || step < t_star || step > config_.T) {
        throw std::invalid_argument("surrogate: step " + std::to_string(step) + " outside " + std::to_string(t_star) +
                                    ".." + std::to_string(config_.T));
    }
    // Plain evaluation of the per-step MLP of step_weights for one row.
    const std::size_t E = config_.step_embedding, D = kStepPosDim + kStatDim + E;
    std::vector<double> x(D);
    const Tensor pos = nn::sinusoidal_embedding(1000.0 * step / config_.T, kStepPosDim);
    const auto st = matrix_stats(matrix);
    std::copy(pos.data(), pos.data() + kStepPosDim, x.begin());
    std::copy(st.begin(), st.end(), x.begin() + kStepPosDim);
    const double* emb = step_table_->value().data() + static_cast<std::size_t>(t_star) * E;
    std::copy(emb, emb + E, x.begin() + kStepPosDim + kStatDim);
    const Tensor& w1 = hidden_.weight()->value();
    const Tensor& b1 = hidden_.bias()->value();
    const Tensor& w2 = logit_.weight()->value();
    double logit = logit_.bias()->value()[0];
    for (std::size_t h = 0; h < w1.dim(0); ++h) {
        double a = b1[h];
        for (std::size_t d = 0; d < D; ++d) a += w1[h * D + d] * x[d];
        logit += w2[h] * (a / (1.0 + std::exp(-a)));
    }
    return logit;
}

double SurrogateNet::gain() const
{
    return gain_->value()[0];
}

Tensor SurrogateNet::evaluate(const std::vector<Tensor>& mats, int t_star) const
{
    std::vector<const Tensor*> values;
    values.reserve(mats.size());
    for (const auto& m : mats) values.push_back(&m);
    const Tensor w = step_weights(values, t_star).value();
    const double gain = gain_->value()[0];
    Tensor out(mats[0].shape());
    for (std::size_t k = 0; k < mats.size(); ++k) out.add_scaled(mats[k], w[k] * gain);
    return out;
}

ad::ParamList SurrogateNet::parameters() const
{
    ad::ParamList out{step_table_};
    auto h = hidden_.parameters();
    auto l = logit_.parameters();
    out.insert(out.end(), h.begin(), h.end());
    out.insert(out.end(), l.begin(), l.end());
    out.push_back(gain_);
    return out;
}

// --- phi_4 -----------------------------------------------------------------------------

MotionPredictor::MotionPredictor(const MotionConfig& config, nn::Rng& rng) : config_(config)
{
    const std::size_t H = config.fine_height, W = config.fine_width, N = H * W;
    const auto r = static_cast<long>(config.window);
    const std::size_t D = window_size();
    gather_index_.assign(N * D, 0);
    valid_.assign(N * D, 0.0);
    for (std::size_t q = 0; q < N; ++q) {
        const long qy = static_cast<long>(q / W), qx = static_cast<long>(q % W);
        std::size_t d = 0;
        for (long dy = -r; dy <= r; ++dy) {
            for (long dx = -r; dx <= r; ++dx, ++d) {
                const long py = qy + dy, px = qx + dx;
                if (py < 0 || px < 0 || py >= static_cast<long>(H) || px >= static_cast<long>(W)) continue;
                const std::size_t p = static_cast<std::size_t>(py) * W + static_cast<std::size_t>(px);
                gather_index_[q * D + d] = p * N + q;
                valid_[q * D + d] = 1.0;
            }
        }
    }
    embed_ = nn::Conv2d("mtn.phi4.embed", D, config.predictor_hidden, 3, 1, 1, rng);
    cell_ = nn::GruCell("mtn.phi4.gru", config.predictor_hidden, config.predictor_hidden, rng);
    head_ = nn::Linear("mtn.phi4.head", config.predictor_hidden, D, rng);
    head_.weight()->value().fill(0.0);
    head_.bias()->value().fill(0.0);
    global_ = nn::Linear("mtn.phi4.global", config.predictor_hidden, 2, rng);
    global_.weight()->value().fill(0.0);
    global_.bias()->value().fill(0.0);
}

Var MotionPredictor::encode(const Var& m) const
{
    const std::size_t H = config_.fine_height, W = config_.fine_width, N = H * W, D = window_size();
    if (m.shape() != Shape{N, N}) throw shape_error("phi4", m.shape(), {N, N});
    const Var flat = ad::reshape(m, {N * N});
    const Var gathered = ad::index_select(flat, 0, gather_index_);
    // entries outside the grid read as -1, the minimum cosine
    Tensor mask({N * D}, valid_);
    Tensor fill({N * D});
    for (std::size_t i = 0; i < fill.size(); ++i) fill[i] = valid_[i] - 1.0;
    const Var windowed = gathered * Var::constant(std::move(mask)) + Var::constant(std::move(fill));
    return ad::reshape(ad::transpose(ad::reshape(windowed, {N, D})), {1, D, H, W});
}

Var MotionPredictor::decode_add(const Var& base, const Var& delta) const
{
    const std::size_t N = config_.fine_locations(), D = window_size();
    std::vector<std::size_t> scatter(N * N, N * D);  // default: the appended zero slot
    for (std::size_t i = 0; i < N * D; ++i) {
        if (valid_[i] > 0.0) scatter[gather_index_[i]] = i;
    }
    const Var ext = ad::concat({ad::reshape(delta, {N * D}), Var::constant(Tensor({1}))}, 0);
    return base + ad::reshape(ad::index_select(ext, 0, scatter), {N, N});
}

std::vector<Var> MotionPredictor::forward(const std::vector<Var>& history, std::size_t horizon) const
{
    if (history.empty()) throw std::invalid_argument("predict_motion: need at least two reference frames");
    if (horizon == 0) throw std::invalid_argument("predict_motion: horizon must be >= 1");
    const std::size_t N = config_.fine_locations(), Hd = config_.predictor_hidden;
    auto step_input = [&](const Var& m) {
        const Var e = ad::silu(embed_.forward(encode(m)));  // [1, Hd, H, W]
        return ad::transpose(ad::reshape(e, {Hd, N}));       // [N, Hd]
    };
    Var h = Var::constant(Tensor({N, Hd}));
    for (const auto& m : history) h = cell_.forward(step_input(m), h);
    std::vector<Var> out;
    Var prev = history.back();
    for (std::size_t j = 0; j < horizon; ++j) {
        // global log-scale and shift from the location-averaged state
        const Var g = global_.forward(ad::mul_scalar(ad::sum_axis(h, 0), 1.0 / static_cast<double>(N)));
        const Var base = prev * ad::exp(ad::slice(g, 1, 0, 1)) + ad::slice(g, 1, 1, 2);
        const Var pred = decode_add(base, head_.forward(h));
        out.push_back(pred);
        prev = pred;
        if (j + 1 < horizon) h = cell_.forward(step_input(pred), h);
    }
    return out;
}

ad::ParamList MotionPredictor::parameters() const
{
    ad::ParamList out = embed_.parameters();
    for (const auto& p : cell_.parameters()) out.push_back(p);
    for (const auto& p : head_.parameters()) out.push_back(p);
    for (const auto& p : global_.parameters()) out.push_back(p);
    return out;
}

// --- MotionNets -----------------------------------------------------------------------

MotionNets::MotionNets(const MotionConfig& c, std::uint64_t seed) : config(c)
{
    if (c.taps.empty()) throw std::invalid_argument("MotionNets: at least one tap required");
    if (c.fine_height % 2 != 0 || c.fine_width % 2 != 0) throw std::invalid_argument("MotionNets: fine grid must be even");
    nn::Rng rng = nn::Rng::derive(seed, 0x6d746e);
    phi1 = FeatureProjector(c, rng);
    phi2 = FusionNet(c, rng);
    phi3 = SurrogateNet(c, rng);
    phi4 = MotionPredictor(c, rng);
}

ad::ParamList MotionNets::stage_parameters(int stage) const
{
    switch (stage) {
    case 1: {
        auto a = phi1.parameters();
        auto b = phi2.parameters();
        a.insert(a.end(), b.begin(), b.end());
        return a;
    }
    case 2: return phi3.parameters();
    case 3: return phi4.parameters();
    default: throw std::invalid_argument("MotionNets: unknown stage " + std::to_string(stage));
    }
}

ad::ParamList MotionNets::parameters() const
{
    ad::ParamList out;
    for (int s = 1; s <= 3; ++s) {
        auto p = stage_parameters(s);
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

void MotionNets::save(const std::filesystem::path& dir) const
{
    nn::save_parameters(parameters(), dir);
    std::vector<std::string> taps;
    for (Tap t : config.taps) taps.push_back(diffusion::to_string(t));
    nlohmann::json m = {
        {"taps", taps},
        {"coarse_channels", config.coarse_channels},
        {"fine_channels", config.fine_channels},
        {"fine_height", config.fine_height},
        {"fine_width", config.fine_width},
        {"tau", config.tau},
        {"T", config.T},
        {"fusion_hidden", config.fusion_hidden},
        {"surrogate_hidden", config.surrogate_hidden},
        {"step_embedding", config.step_embedding},
        {"window", config.window},
        {"predictor_hidden", config.predictor_hidden},
        {"parameter_counts",
         {{"phi1", nn::parameter_count(phi1.parameters())},
          {"phi2", nn::parameter_count(phi2.parameters())},
          {"phi3", nn::parameter_count(phi3.parameters())},
          {"phi4", nn::parameter_count(phi4.parameters())}}},
    };
    std::ofstream os(dir / "mtn_manifest.json");
    os << m.dump(2) << '\n';
}

MotionNets MotionNets::load(const std::filesystem::path& dir)
{
    std::ifstream is(dir / "mtn_manifest.json");
    if (!is) throw std::runtime_error("missing motion checkpoint " + (dir / "mtn_manifest.json").string());
    const auto m = nlohmann::json::parse(is);
    MotionConfig c;
    c.taps.clear();
    for (const auto& t : m.at("taps")) c.taps.push_back(diffusion::tap_from_string(t.get<std::string>()));
    c.coarse_channels = m.at("coarse_channels").get<std::size_t>();
    c.fine_channels = m.at("fine_channels").get<std::size_t>();
    c.fine_height = m.at("fine_height").get<std::size_t>();
    c.fine_width = m.at("fine_width").get<std::size_t>();
    c.tau = m.at("tau").get<double>();
    c.T = m.at("T").get<int>();
    c.fusion_hidden = m.at("fusion_hidden").get<std::size_t>();
    c.surrogate_hidden = m.at("surrogate_hidden").get<std::size_t>();
    c.step_embedding = m.at("step_embedding").get<std::size_t>();
    c.window = m.at("window").get<std::size_t>();
    c.predictor_hidden = m.at("predictor_hidden").get<std::size_t>();
    MotionNets nets(c, 0);
    nn::load_parameters(nets.parameters(), dir);
    return nets;
}

// --- composite operations ----------------------------------------------------------------

Var multi_scale_motion(const std::vector<Var>& taps_i, const std::vector<Var>& taps_j, const MotionNets& nets)
{
    const auto& cfg = nets.config;
    if (taps_i.size() != cfg.taps.size() || taps_j.size() != cfg.taps.size()) {
        throw std::invalid_argument("multi_scale_motion: expected " + std::to_string(cfg.taps.size()) + " taps per frame");
    }
    std::vector<Var> mats;
    for (std::size_t s = 0; s < cfg.taps.size(); ++s) {
        const Var fi = to_locations(nets.phi1.forward(s, taps_i[s]));
        const Var fj = to_locations(nets.phi1.forward(s, taps_j[s]));
        Var m = raw_motion(fi, fj);
        if (cfg.taps[s] == Tap::coarse) m = upsample_motion(m, cfg.height(Tap::coarse), cfg.width(Tap::coarse), 2);
        mats.push_back(m);
    }
    return nets.phi2.forward(mats);
}

namespace {

std::vector<Var> tap_vars(const TapFeatures& taps, const MotionConfig& cfg)
{
    std::vector<Var> out;
    for (Tap t : cfg.taps) {
        const Tensor& f = diffusion::tap_tensor(taps, t);
        if (f.empty()) throw std::invalid_argument("multi_scale_motion: missing " + diffusion::to_string(t) + " tap");
        const Shape want{cfg.channels(t), cfg.height(t), cfg.width(t)};
        if (f.shape() != want) throw shape_error("multi_scale_motion " + diffusion::to_string(t) + " tap", f.shape(), want);
        out.push_back(Var::constant(f));
    }
    return out;
}

}  // namespace

ProjectedTaps project_taps(const TapFeatures& taps, const MotionNets& nets)
{
    const auto& cfg = nets.config;
    ProjectedTaps out;
    for (std::size_t s = 0; s < cfg.taps.size(); ++s) {
        const Tap t = cfg.taps[s];
        const Tensor& f = diffusion::tap_tensor(taps, t);
        if (f.empty()) throw std::invalid_argument("project_taps: missing " + diffusion::to_string(t) + " tap");
        const Shape want{cfg.channels(t), cfg.height(t), cfg.width(t)};
        if (f.shape() != want) throw shape_error("project_taps " + diffusion::to_string(t) + " tap", f.shape(), want);
        out.features.push_back(unit_rows(nets.phi1.locations(s, f)));
    }
    return out;
}

Tensor motion_matrix(const ProjectedTaps& a, const ProjectedTaps& b, const MotionNets& nets)
{
    const auto& cfg = nets.config;
    if (a.features.size() != cfg.taps.size() || b.features.size() != cfg.taps.size()) {
        throw std::invalid_argument("motion_matrix: expected " + std::to_string(cfg.taps.size()) + " projected taps");
    }
    std::vector<Tensor> mats;
    for (std::size_t s = 0; s < cfg.taps.size(); ++s) {
        if (a.features[s].shape() != b.features[s].shape()) throw shape_error("motion_matrix", a.features[s].shape(), b.features[s].shape());
        Tensor m = cosine_matrix(a.features[s], b.features[s]);
        if (cfg.taps[s] == Tap::coarse) m = upsample_motion(m, cfg.height(Tap::coarse), cfg.width(Tap::coarse), 2);
        mats.push_back(std::move(m));
    }
    return nets.phi2.fuse(mats);
}

Var multi_scale_motion(const TapFeatures& taps_i, const TapFeatures& taps_j, const MotionNets& nets)
{
    return multi_scale_motion(tap_vars(taps_i, nets.config), tap_vars(taps_j, nets.config), nets);
}

std::vector<Tensor> per_tap_motion(const TapFeatures& taps_i, const TapFeatures& taps_j, const MotionNets& nets)
{
    const auto& cfg = nets.config;
    const auto vi = tap_vars(taps_i, cfg);
    const auto vj = tap_vars(taps_j, cfg);
    std::vector<Tensor> out;
    for (std::size_t s = 0; s < cfg.taps.size(); ++s) {
        Var m = raw_motion(to_locations(nets.phi1.forward(s, vi[s])), to_locations(nets.phi1.forward(s, vj[s])));
        if (cfg.taps[s] == Tap::coarse) m = upsample_motion(m, cfg.height(Tap::coarse), cfg.width(Tap::coarse), 2);
        out.push_back(m.value());
    }
    return out;
}

Var surrogate(const std::vector<Var>& step_matrices, int t_star, const MotionNets& nets)
{
    return nets.phi3.forward(step_matrices, t_star);
}

Tensor surrogate(const std::vector<Tensor>& step_matrices, int t_star, const MotionNets& nets)
{
    return nets.phi3.evaluate(step_matrices, t_star);
}

SurrogateAccumulator::SurrogateAccumulator(const MotionNets& nets, int t_star)
    : nets_(&nets), t_star_(t_star), max_logit_(-std::numeric_limits<double>::infinity())
{
    if (t_star < 1 || t_star > nets.config.T) throw std::invalid_argument("surrogate: t* outside [1, T]");
    seen_.assign(static_cast<std::size_t>(nets.config.T - t_star + 1), false);
}

void SurrogateAccumulator::add(int step, const Tensor& matrix)
{
    const double l = nets_->phi3.step_logit(matrix, step, t_star_);
    auto&& seen = seen_.at(static_cast<std::size_t>(step - t_star_));
    if (seen) throw std::invalid_argument("surrogate: step " + std::to_string(step) + " added twice");
    seen = true;
    if (acc_.empty()) {
        acc_ = Tensor(matrix.shape());
    } else if (matrix.shape() != acc_.shape()) {
        throw shape_error("surrogate", acc_.shape(), matrix.shape());
    }
    if (l > max_logit_) {
        const double rescale = std::exp(max_logit_ - l);
        acc_ *= rescale;
        norm_ *= rescale;
        max_logit_ = l;
    }
    const double w = std::exp(l - max_logit_);
    acc_.add_scaled(matrix, w);
    norm_ += w;
}

Tensor SurrogateAccumulator::result() const
{
    if (std::find(seen_.begin(), seen_.end(), false) != seen_.end()) {
        throw std::logic_error("surrogate: not every step in t*..T was added");
    }
    Tensor out = acc_;
    out *= nets_->phi3.gain() / norm_;
    return out;
}

std::vector<Var> predict_motion(const std::vector<Var>& history, std::size_t horizon, const MotionNets& nets)
{
    if (history.empty()) throw std::invalid_argument("predict_motion: R must be >= 2 (got an empty history)");
    return nets.phi4.forward(history, horizon);
}

std::vector<Tensor> predict_motion(const std::vector<Tensor>& history, std::size_t horizon, const MotionNets& nets)
{
    std::vector<Var> vars;
    for (const auto& m : history) vars.push_back(Var::constant(m));
    std::vector<Tensor> out;
    for (const auto& v : nets.phi4.forward(vars, horizon)) out.push_back(v.value());
    return out;
}

// --- losses --------------------------------------------------------------------------------

Var transport_l1(const Var& source_chw, const Var& target_chw, const Var& raw_matrix, double tau)
{
    if (source_chw.shape() != target_chw.shape()) throw shape_error("transport_l1", source_chw.shape(), target_chw.shape());
    const Var moved = apply_motion(to_locations(source_chw), normalize_motion(raw_matrix, tau));
    return ad::mean_abs(moved - to_locations(target_chw));
}

std::string to_string(ResidualSource s)
{
    return s == ResidualSource::sampled ? "sampled" : "posterior_mean";
}

ResidualSource residual_source_from_string(const std::string& s)
{
    if (s == "sampled") return ResidualSource::sampled;
    if (s == "posterior_mean") return ResidualSource::posterior_mean;
    throw std::invalid_argument("unknown residual source '" + s + "'");
}

Var loss_visual_residual(const Trajectory& ti, const Trajectory& tj, const std::vector<int>& steps, const MotionNets& nets,
                         ResidualSource source)
{
    if (steps.empty()) throw std::invalid_argument("loss_visual_residual: no steps");
    const auto pick = [source](const Trajectory& tr, int t) -> const Tensor& {
        return source == ResidualSource::sampled ? tr.residual_at(t) : tr.mean_residual_at(t);
    };
    Var total;
    for (int t : steps) {
        const Var m = multi_scale_motion(ti.taps_at(t), tj.taps_at(t), nets);
        const Var l = transport_l1(Var::constant(pick(ti, t)), Var::constant(pick(tj, t)), m, nets.config.tau);
        total = total.valid() ? total + l : l;
    }
    return ad::mul_scalar(total, 1.0 / static_cast<double>(steps.size()));
}

Var loss_visual_latent(const Tensor& zi, const Tensor& zj, const Var& surrogate_raw, double tau)
{
    return transport_l1(Var::constant(zi), Var::constant(zj), surrogate_raw, tau);
}

Var loss_motion(const std::vector<Var>& predicted, const std::vector<Var>& truth)
{
    if (predicted.size() != truth.size() || predicted.empty()) {
        throw std::invalid_argument("loss_motion: " + std::to_string(predicted.size()) + " predictions for " +
                                    std::to_string(truth.size()) + " targets");
    }
    Var total;
    for (std::size_t k = 0; k < predicted.size(); ++k) {
        const Var l = ad::mean_abs(predicted[k] - truth[k]);
        total = total.valid() ? total + l : l;
    }
    return ad::mul_scalar(total, 1.0 / static_cast<double>(predicted.size()));
}

double loss_motion(const std::vector<Tensor>& predicted, const std::vector<Tensor>& truth)
{
    std::vector<Var> p, t;
    for (const auto& m : predicted) p.push_back(Var::constant(m));
    for (const auto& m : truth) t.push_back(Var::constant(m));
    return loss_motion(p, t).value().item();
}

std::vector<Tensor> step_motions(const Trajectory& ti, const Trajectory& tj, const MotionNets& nets, int from_step)
{
    const int T = nets.config.T;
    std::vector<Tensor> out(static_cast<std::size_t>(T) + 1);
    for (int t = std::max(1, from_step); t <= T; ++t) {
        out[t] = motion_matrix(project_taps(ti.taps_at(t), nets), project_taps(tj.taps_at(t), nets), nets);
    }
    return out;
}

Tensor pair_surrogate(const Trajectory& ti, const Trajectory& tj, int t_star, const MotionNets& nets)
{
    const int T = nets.config.T;
    if (t_star < 1 || t_star > T) throw std::invalid_argument("pair_surrogate: t* = " + std::to_string(t_star) + " outside [1, T]");
    const auto steps = step_motions(ti, tj, nets, t_star);
    return surrogate(std::vector<Tensor>(steps.begin() + t_star, steps.end()), t_star, nets);
}

// --- training ------------------------------------------------------------------------------

namespace {

std::vector<int> draw_steps(nn::Rng& rng, int T, std::size_t count)
{
    std::vector<int> all(static_cast<std::size_t>(T));
    std::iota(all.begin(), all.end(), 1);
    count = std::min(count, all.size());
    for (std::size_t i = 0; i < count; ++i) std::swap(all[i], all[i + rng.index(all.size() - i)]);
    all.resize(count);
    std::sort(all.begin(), all.end());
    return all;
}

int draw_t_star(nn::Rng& rng, const MtnTrainConfig& config)
{
    const auto& v = config.t_star_values;
    if (v.empty()) throw std::invalid_argument("train_mtn: no t* values configured");
    const auto& w = config.t_star_weights;
    if (w.empty()) return v[rng.index(v.size())];
    if (w.size() != v.size()) throw std::invalid_argument("train_mtn: t* weights do not match t* values");
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    if (!(total > 0.0)) throw std::invalid_argument("train_mtn: t* weights must have positive sum");
    double u = rng.uniform() * total;
    for (std::size_t k = 0; k < v.size(); ++k) {
        u -= w[k];
        if (u < 0.0) return v[k];
    }
    return v.back();
}

std::vector<std::size_t> shuffled(std::size_t n, nn::Rng& rng)
{
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    return order;
}

void check_loss(double v, const char* stage)
{
    if (!std::isfinite(v)) throw std::runtime_error(std::string("train_mtn: non-finite loss in ") + stage);
}

// Backward of one scalar term scaled by `weight`; returns the unscaled value.
double accumulate(const std::function<Var()>& build, double weight)
{
    ad::Tape tape;
    ad::RecordScope scope(tape);
    const Var loss = build();
    tape.backward(ad::mul_scalar(loss, weight));
    return loss.value().item();
}

std::vector<Tensor> clip_surrogates(const std::vector<Trajectory>& trajs, int t_star, const MotionNets& nets)
{
    std::vector<Tensor> out;
    for (std::size_t k = 0; k + 1 < trajs.size(); ++k) out.push_back(pair_surrogate(trajs[k], trajs[k + 1], t_star, nets));
    return out;
}

double motion_term(const std::vector<Tensor>& surrogates, std::size_t reference_frames, const MotionNets& nets)
{
    const std::size_t hist = reference_frames - 1;
    std::vector<Tensor> history(surrogates.begin(), surrogates.begin() + static_cast<long>(hist));
    std::vector<Tensor> truth(surrogates.begin() + static_cast<long>(hist), surrogates.end());
    return loss_motion(predict_motion(history, truth.size(), nets), truth);
}

void validate(const MtnTrainConfig& config, const MotionNets& nets)
{
    if (config.reference_frames < 2) throw std::invalid_argument("train_mtn: need at least two reference frames");
    if (config.frames <= config.reference_frames) throw std::invalid_argument("train_mtn: clips must be longer than the reference window");
    for (int t : config.t_star_values) {
        if (t < 1 || t > nets.config.T) throw std::invalid_argument("train_mtn: t* = " + std::to_string(t) + " outside [1, T]");
    }
}

void write_curve(const std::filesystem::path& path, const std::vector<double>& losses)
{
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "epoch,loss\n" << std::setprecision(10);
    for (std::size_t e = 0; e < losses.size(); ++e) os << e + 1 << ',' << losses[e] << '\n';
}

}  // namespace

TransLoss total_loss(const TrajectorySource& source, std::size_t count, const MotionNets& nets, const MtnTrainConfig& config,
                     std::uint64_t seed)
{
    validate(config, nets);
    if (count == 0) throw std::invalid_argument("total_loss: no clips");
    double l_dz = 0.0, l_z = 0.0, l_m = 0.0;
    const std::size_t pairs = config.reference_frames - 1;
    for (std::size_t c = 0; c < count; ++c) {
        nn::Rng rng = nn::Rng::derive(seed, 0x100000 + c);
        const auto steps = draw_steps(rng, nets.config.T, config.steps_per_clip);
        const int t_star = draw_t_star(rng, config);
        const auto trajs = source(c, config.frames);
        for (std::size_t k = 0; k < pairs; ++k) {
            l_dz += loss_visual_residual(trajs[k], trajs[k + 1], steps, nets, config.residual_source).value().item();
        }
        const auto surr = clip_surrogates(trajs, t_star, nets);
        for (std::size_t k = 0; k < pairs; ++k) {
            l_z += loss_visual_latent(trajs[k].latent(t_star), trajs[k + 1].latent(t_star), Var::constant(surr[k]),
                                      nets.config.tau)
                       .value()
                       .item();
        }
        l_m += motion_term(surr, config.reference_frames, nets);
    }
    const double n = static_cast<double>(count);
    TransLoss out;
    out.residual = l_dz / (n * static_cast<double>(pairs));
    out.latent = l_z / (n * static_cast<double>(pairs));
    out.motion = l_m / n;
    return out;
}

MotionNets train_mtn(const TrajectorySource& train, std::size_t train_count, const TrajectorySource& heldout,
                     std::size_t heldout_count, const MotionConfig& model_config, const MtnTrainConfig& config,
                     const std::filesystem::path& csv_dir, MtnTrainReport* report)
{
    if (train_count == 0) throw std::invalid_argument("train_mtn: empty training set");
    MotionNets nets(model_config, config.seed);
    validate(config, nets);
    MtnTrainReport rep;
    const std::uint64_t eval_seed = config.seed ^ 0x65766131ULL;
    if (heldout_count > 0) rep.heldout_initial = total_loss(heldout, heldout_count, nets, config, eval_seed);

    const std::size_t pairs = config.reference_frames - 1;
    nn::AdamConfig adam_config;
    adam_config.lr = config.lr;
    adam_config.clip_norm = 1.0;
    const auto all = nets.parameters();

    const auto run_stage = [&](int stage, int epochs, const std::function<double(std::size_t, nn::Rng&)>& clip_step) {
        const auto start = std::chrono::steady_clock::now();
        nn::set_frozen(all, true);
        const auto params = nets.stage_parameters(stage);
        nn::set_frozen(params, false);
        nn::Adam opt(params, adam_config);
        std::vector<double> curve;
        for (int e = 0; e < epochs; ++e) {
            nn::Rng rng = nn::Rng::derive(config.seed, static_cast<std::uint64_t>(stage) * 100000 + static_cast<std::uint64_t>(e));
            double sum = 0.0;
            for (std::size_t c : shuffled(train_count, rng)) {
                sum += clip_step(c, rng);
                opt.step();
            }
            const double mean = sum / static_cast<double>(train_count);
            check_loss(mean, stage == 1 ? "stage 1" : stage == 2 ? "stage 2" : "stage 3");
            curve.push_back(mean);
        }
        nn::set_frozen(all, false);
        rep.seconds[stage - 1] += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        return curve;
    };

    // stage 1: phi_1, phi_2 on residual transport between reference frames
    rep.stage1 = run_stage(1, config.epochs_stage1, [&](std::size_t c, nn::Rng& rng) {
        const auto steps = draw_steps(rng, nets.config.T, config.steps_per_clip);
        const auto trajs = train(c, config.reference_frames);
        const double w = 1.0 / static_cast<double>(pairs * steps.size());
        double sum = 0.0;
        for (std::size_t k = 0; k < pairs; ++k) {
            for (int t : steps) {
                sum += w * accumulate([&] { return loss_visual_residual(trajs[k], trajs[k + 1], {t}, nets, config.residual_source); }, w);
            }
        }
        return sum;
    });

    // stage 2: phi_3 on latent transport at sampled t*
    rep.stage2 = run_stage(2, config.epochs_stage2, [&](std::size_t c, nn::Rng& rng) {
        const auto trajs = train(c, config.reference_frames);
        const double w = 1.0 / static_cast<double>(pairs);
        double sum = 0.0;
        for (std::size_t k = 0; k < pairs; ++k) {
            const int t_star = draw_t_star(rng, config);
            const auto steps = step_motions(trajs[k], trajs[k + 1], nets, t_star);
            std::vector<Var> mats;
            for (int t = t_star; t <= nets.config.T; ++t) mats.push_back(Var::constant(steps[static_cast<std::size_t>(t)]));
            sum += w * accumulate(
                           [&] {
                               return loss_visual_latent(trajs[k].latent(t_star), trajs[k + 1].latent(t_star),
                                                         surrogate(mats, t_star, nets), nets.config.tau);
                           },
                           w);
        }
        return sum;
    });

    // stage 3: phi_4 on whole-clip surrogate sequences, one t* per clip
    std::vector<std::vector<Tensor>> cache(train_count);
    {
        const auto start = std::chrono::steady_clock::now();
        nn::Rng rng = nn::Rng::derive(config.seed, 0x737572);
        for (std::size_t c = 0; c < train_count; ++c) {
            const int t_star = draw_t_star(rng, config);
            cache[c] = clip_surrogates(train(c, config.frames), t_star, nets);
        }
        rep.seconds[2] += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    const std::size_t hist = config.reference_frames - 1;
    rep.stage3 = run_stage(3, config.epochs_stage3, [&](std::size_t c, nn::Rng&) {
        return accumulate(
            [&] {
                std::vector<Var> history, truth;
                for (std::size_t k = 0; k < cache[c].size(); ++k) {
                    (k < hist ? history : truth).push_back(Var::constant(cache[c][k]));
                }
                return loss_motion(predict_motion(history, truth.size(), nets), truth);
            },
            1.0);
    });

    if (heldout_count > 0) rep.heldout_final = total_loss(heldout, heldout_count, nets, config, eval_seed);
    if (!csv_dir.empty()) {
        std::filesystem::create_directories(csv_dir);
        write_curve(csv_dir / "stage1.csv", rep.stage1);
        write_curve(csv_dir / "stage2.csv", rep.stage2);
        write_curve(csv_dir / "stage3.csv", rep.stage3);
    }
    if (report) *report = rep;
    return nets;
}

}  // namespace drmo::motion
