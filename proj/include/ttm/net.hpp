#pragma once

// Small dense networks for the toy experiments: the eps-prediction MLP
// trained by denoising score matching, the three-channel distillation head
// with the mixed parameterization, and the optional AD-free objective for
// the spatial JVP.
//
// One parameter layout serves two evaluation paths. A generic single-sample
// forward over any scalar (double or nested duals) backs the EpsField and
// the AD targets; an Eigen batched forward/backward/JVP drives training.

#include <Eigen/Dense>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "fields.hpp"
#include "fwdad.hpp"
#include "gmm.hpp"
#include "schedule.hpp"
#include "vec.hpp"

namespace ttm {

enum class Activation { silu, tanh };

inline const char* to_string(Activation a) { return a == Activation::silu ? "silu" : "tanh"; }

inline Activation parse_activation(const std::string& s) {
    if (s == "silu") return Activation::silu;
    if (s == "tanh") return Activation::tanh;
    throw ConfigError("unknown activation '" + s + "'");
}

/// Time features: raw t, or (sin, cos)(w_k t) with geometric w_k in [w_min, w_max].
struct TimeEmbedding {
    enum class Kind { raw, fourier };
    Kind kind = Kind::fourier;
    int n_freq = 8;
    double w_min = 1.0;
    double w_max = 100.0;

    int dim() const { return kind == Kind::raw ? 1 : 2 * n_freq; }

    double freq(int k) const {
        if (n_freq == 1) return w_min;
        return w_min * std::pow(w_max / w_min, static_cast<double>(k) / (n_freq - 1));
    }

    template <class S>
    void write(const S& t, S* out) const {
        using std::cos;
        using std::sin;
        if (kind == Kind::raw) {
            out[0] = t;
            return;
        }
        for (int k = 0; k < n_freq; ++k) {
            const double w = freq(k);
            out[2 * k] = sin(w * t);
            out[2 * k + 1] = cos(w * t);
        }
    }

    /// d(features)/dt.
    void write_dt(double t, double* out) const {
        if (kind == Kind::raw) {
            out[0] = 1.0;
            return;
        }
        for (int k = 0; k < n_freq; ++k) {
            const double w = freq(k);
            out[2 * k] = w * std::cos(w * t);
            out[2 * k + 1] = -w * std::sin(w * t);
        }
    }

    std::string describe() const {
        std::ostringstream os;
        os.precision(17);
        if (kind == Kind::raw)
            os << "raw";
        else
            os << "fourier " << n_freq << ' ' << w_min << ' ' << w_max;
        return os.str();
    }

    void validate() const {
        if (kind == Kind::fourier && (n_freq < 1 || !(w_min > 0.0) || !(w_max >= w_min)))
            throw ConfigError("TimeEmbedding: need n_freq >= 1 and 0 < w_min <= w_max");
    }
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense MLP on inputs (x1, x2, embed(t), extra...). Parameters are stored
/// flat, per layer W (out x in, row-major) followed by b.
class Mlp {
public:
    Mlp() = default;

    Mlp(std::vector<int> dims, Activation act = Activation::silu, TimeEmbedding embed = {}, int extra_inputs = 0)
        : dims_(std::move(dims)), act_(act), embed_(embed), extra_(extra_inputs) {
        embed_.validate();
        if (dims_.size() < 2) throw ShapeError("Mlp: need at least input and output dims");
        for (int d : dims_)
            if (d < 1) throw ShapeError("Mlp: layer widths must be positive");
        if (extra_ < 0) throw ShapeError("Mlp: negative extra input count");
        if (dims_.front() != 2 + embed_.dim() + extra_)
            throw ShapeError("Mlp: input width " + std::to_string(dims_.front()) + " != 2 + embed " +
                             std::to_string(embed_.dim()) + " + extra " + std::to_string(extra_));
        params_.assign(count_params(dims_), 0.0);
    }

    /// eps network: (x, embed(t)) -> 2 through the given hidden widths.
    static Mlp score_net(std::vector<int> hidden = {64, 64, 64}, Activation act = Activation::silu,
                         TimeEmbedding embed = {}, std::uint64_t seed = 0) {
        std::vector<int> dims{2 + embed.dim()};
        dims.insert(dims.end(), hidden.begin(), hidden.end());
        dims.push_back(2);
        Mlp m(dims, act, embed, 0);
        m.init(seed);
        return m;
    }

    static std::size_t count_params(const std::vector<int>& dims) {
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < dims.size(); ++l)
            n += static_cast<std::size_t>(dims[l] + 1) * static_cast<std::size_t>(dims[l + 1]);
        return n;
    }

    /// W ~ N(0, 1/fan_in), b = 0; the final layer is scaled by `final_scale`.
    void init(std::uint64_t seed, double final_scale = 1.0) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal;
        std::size_t off = 0;
        for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
            const int in = dims_[l], out = dims_[l + 1];
            const double scale = (l + 2 == dims_.size() ? final_scale : 1.0) / std::sqrt(static_cast<double>(in));
            for (int i = 0; i < in * out; ++i) params_[off++] = scale * normal(rng);
            for (int i = 0; i < out; ++i) params_[off++] = 0.0;
        }
    }

    const std::vector<int>& dims() const { return dims_; }
    Activation activation() const { return act_; }
    const TimeEmbedding& embedding() const { return embed_; }
    int extra_inputs() const { return extra_; }
    int input_dim() const { return dims_.front(); }
    int output_dim() const { return dims_.back(); }
    std::size_t num_layers() const { return dims_.size() - 1; }
    std::size_t num_params() const { return params_.size(); }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }

    void set_params(std::vector<double> p) {
        if (p.size() != params_.size()) throw ShapeError("Mlp: parameter count mismatch");
        params_ = std::move(p);
    }

    // -- generic single-sample path -----------------------------------------

    template <class S>
    static S activate(Activation a, const S& z) {
        using std::tanh;
        return a == Activation::silu ? silu(z) : tanh(z);
    }

    /// Raw forward on a full input vector of length input_dim().
    template <class S>
    std::vector<S> forward(const std::vector<S>& in) const {
        if (static_cast<int>(in.size()) != input_dim()) throw ShapeError("Mlp::forward: input width mismatch");
        std::vector<S> a = in, z;
        std::size_t off = 0;
        for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
            const int n_in = dims_[l], n_out = dims_[l + 1];
            const double* W = params_.data() + off;
            const double* b = W + static_cast<std::size_t>(n_in) * n_out;
            z.assign(static_cast<std::size_t>(n_out), S(0.0));
            for (int o = 0; o < n_out; ++o) {
                S acc(b[o]);
                const double* row = W + static_cast<std::size_t>(o) * n_in;
                for (int i = 0; i < n_in; ++i) acc = acc + a[static_cast<std::size_t>(i)] * row[i];
                z[static_cast<std::size_t>(o)] = acc;
            }
            off += static_cast<std::size_t>(n_in + 1) * n_out;
            const bool last = (l + 2 == dims_.size());
            if (!last)
                for (auto& v : z) v = activate(act_, v);
            a.swap(z);
        }
        return a;
    }

    template <class S>
    std::vector<S> make_input(const Vec2<S>& x, const S& t, const S* extra = nullptr) const {
        std::vector<S> in(static_cast<std::size_t>(input_dim()));
        in[0] = x[0];
        in[1] = x[1];
        embed_.write(t, in.data() + 2);
        for (int k = 0; k < extra_; ++k) in[static_cast<std::size_t>(2 + embed_.dim() + k)] = extra[k];
        return in;
    }

    /// eps_theta(x, t) for a score network (2 outputs, no extra inputs).
    template <class S>
    Vec2<S> eps(const Vec2<S>& x, const S& t) const {
        if (extra_ != 0 || output_dim() != 2) throw ShapeError("Mlp::eps: not an eps network");
        std::vector<S> y = forward(make_input(x, t));
        return Vec2<S>{{y[0], y[1]}};
    }

    // -- batched path -------------------------------------------------------

    struct Cache {
        std::vector<Eigen::MatrixXd> inputs; // layer inputs A_l
        std::vector<Eigen::MatrixXd> pre;    // pre-activations Z_l
    };

    /// Forward on a batch, one sample per column (input_dim x B).
    Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& in, Cache* cache = nullptr) const {
        if (in.rows() != input_dim()) throw ShapeError("Mlp::forward_batch: input rows mismatch");
        Eigen::MatrixXd a = in;
        if (cache) {
            cache->inputs.clear();
            cache->pre.clear();
        }
        std::size_t off = 0;
        for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
            auto [W, b] = layer(l, off);
            Eigen::MatrixXd z = W * a;
            z.colwise() += b;
            if (cache) {
                cache->inputs.push_back(a);
                cache->pre.push_back(z);
            }
            a = (l + 2 == dims_.size()) ? z : apply_act(z);
        }
        return a;
    }

    /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(output).
    void backward_batch(const Cache& cache, const Eigen::MatrixXd& dout, std::vector<double>& grad) const {
        if (grad.size() != params_.size()) grad.assign(params_.size(), 0.0);
        std::vector<std::size_t> offs = layer_offsets();
        Eigen::MatrixXd g = dout;
        for (std::size_t l = num_layers(); l-- > 0;) {
            const int n_in = dims_[l], n_out = dims_[l + 1];
            std::size_t off = offs[l];
            auto [W, b] = layer(l, off);
            Eigen::Map<RowMat> gW(grad.data() + offs[l], n_out, n_in);
            Eigen::Map<Eigen::VectorXd> gb(grad.data() + offs[l] + static_cast<std::size_t>(n_in) * n_out, n_out);
            gW.noalias() += g * cache.inputs[l].transpose();
            gb += g.rowwise().sum();
            if (l > 0) {
                Eigen::MatrixXd ga = W.transpose() * g;
                g = ga.cwiseProduct(act_grad(cache.pre[l - 1]));
            }
        }
    }

    /// Forward-mode JVP of the batch map: returns d(output) for input tangent `din`.
    Eigen::MatrixXd jvp_batch(const Eigen::MatrixXd& in, const Eigen::MatrixXd& din, Eigen::MatrixXd* out = nullptr) const {
        if (in.rows() != input_dim() || din.rows() != input_dim() || din.cols() != in.cols())
            throw ShapeError("Mlp::jvp_batch: shape mismatch");
        Eigen::MatrixXd a = in, da = din;
        std::size_t off = 0;
        for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
            auto [W, b] = layer(l, off);
            Eigen::MatrixXd z = W * a;
            z.colwise() += b;
            Eigen::MatrixXd dz = W * da;
            if (l + 2 == dims_.size()) {
                a = z;
                da = dz;
            } else {
                a = apply_act(z);
                da = dz.cwiseProduct(act_grad(z));
            }
        }
        if (out) *out = a;
        return da;
    }

    /// Input matrix for points xs, times ts and optional extra rows.
    Eigen::MatrixXd make_batch_input(const std::vector<Vec2d>& xs, const std::vector<double>& ts,
                                     const Eigen::MatrixXd* extra = nullptr) const {
        const Eigen::Index B = static_cast<Eigen::Index>(xs.size());
        if (ts.size() != xs.size()) throw ShapeError("Mlp::make_batch_input: xs/ts size mismatch");
        if (extra_ > 0 && (!extra || extra->rows() != extra_ || extra->cols() != B))
            throw ShapeError("Mlp::make_batch_input: extra input shape mismatch");
        Eigen::MatrixXd in(input_dim(), B);
        std::vector<double> feat(static_cast<std::size_t>(embed_.dim()));
        for (Eigen::Index j = 0; j < B; ++j) {
            in(0, j) = xs[static_cast<std::size_t>(j)][0];
            in(1, j) = xs[static_cast<std::size_t>(j)][1];
            embed_.write(ts[static_cast<std::size_t>(j)], feat.data());
            for (int k = 0; k < embed_.dim(); ++k) in(2 + k, j) = feat[static_cast<std::size_t>(k)];
            for (int k = 0; k < extra_; ++k) in(2 + embed_.dim() + k, j) = (*extra)(k, j);
        }
        return in;
    }

    // -- checkpoints --------------------------------------------------------

    void save(std::ostream& os) const {
        os << "ttm-mlp 1\n";
        os << "dims";
        for (int d : dims_) os << ' ' << d;
        os << "\nactivation " << to_string(act_) << "\nembed " << embed_.describe() << "\nextra " << extra_
           << "\nparams " << params_.size() << "\nend\n";
        for (double v : params_) {
            std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
            char bytes[8];
            for (int k = 0; k < 8; ++k) bytes[k] = static_cast<char>((bits >> (8 * k)) & 0xffu);
            os.write(bytes, 8);
        }
        if (!os) throw std::runtime_error("Mlp::save: write failed");
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("Mlp::save: cannot open '" + path + "'");
        save(os);
    }

    /// Reads a checkpoint; if `expected_dims` is non-empty the stored dims must match.
    static Mlp load(std::istream& is, const std::vector<int>& expected_dims = {}) {
        std::string line;
        auto next = [&](const char* key) {
            if (!std::getline(is, line)) throw ConfigError("checkpoint: truncated header");
            std::istringstream ls(line);
            std::string k;
            ls >> k;
            if (k != key) throw ConfigError(std::string("checkpoint: expected '") + key + "', got '" + k + "'");
            std::string rest;
            std::getline(ls, rest);
            return rest;
        };
        {
            std::string magic = next("ttm-mlp");
            if (std::stoi(magic) != 1) throw ConfigError("checkpoint: unsupported version");
        }
        std::vector<int> dims;
        {
            std::istringstream ls(next("dims"));
            int d;
            while (ls >> d) dims.push_back(d);
        }
        if (!expected_dims.empty() && dims != expected_dims) throw ShapeError("checkpoint: layer dims do not match");
        Activation act = parse_activation(std::string(trim_left(next("activation"))));
        TimeEmbedding emb;
        {
            std::istringstream ls(next("embed"));
            std::string kind;
            ls >> kind;
            if (kind == "raw")
                emb.kind = TimeEmbedding::Kind::raw;
            else if (kind == "fourier") {
                emb.kind = TimeEmbedding::Kind::fourier;
                if (!(ls >> emb.n_freq >> emb.w_min >> emb.w_max)) throw ConfigError("checkpoint: bad embed line");
            } else
                throw ConfigError("checkpoint: unknown embed '" + kind + "'");
        }
        int extra = std::stoi(next("extra"));
        std::size_t count = std::stoull(next("params"));
        next("end");
        Mlp m(dims, act, emb, extra);
        if (count != m.num_params()) throw ShapeError("checkpoint: parameter count does not match dims");
        for (std::size_t i = 0; i < count; ++i) {
            unsigned char bytes[8];
            if (!is.read(reinterpret_cast<char*>(bytes), 8)) throw ConfigError("checkpoint: truncated parameters");
            std::uint64_t bits = 0;
            for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(bytes[k]) << (8 * k);
            m.params_[i] = std::bit_cast<double>(bits);
        }
        return m;
    }

    static Mlp load(const std::string& path, const std::vector<int>& expected_dims = {}) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw ConfigError("cannot open checkpoint '" + path + "'");
        return load(is, expected_dims);
    }

private:
    static std::string_view trim_left(const std::string& s) {
        std::string_view v(s);
        while (!v.empty() && v.front() == ' ') v.remove_prefix(1);
        return v;
    }

    std::pair<Eigen::Map<const RowMat>, Eigen::Map<const Eigen::VectorXd>> layer(std::size_t l, std::size_t& off) const {
        const int n_in = dims_[l], n_out = dims_[l + 1];
        Eigen::Map<const RowMat> W(params_.data() + off, n_out, n_in);
        Eigen::Map<const Eigen::VectorXd> b(params_.data() + off + static_cast<std::size_t>(n_in) * n_out, n_out);
        off += static_cast<std::size_t>(n_in + 1) * n_out;
        return {W, b};
    }

    std::vector<std::size_t> layer_offsets() const {
        std::vector<std::size_t> offs;
        std::size_t off = 0;
        for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
            offs.push_back(off);
            off += static_cast<std::size_t>(dims_[l] + 1) * dims_[l + 1];
        }
        return offs;
    }

    Eigen::MatrixXd apply_act(const Eigen::MatrixXd& z) const {
        if (act_ == Activation::tanh) return z.array().tanh().matrix();
        Eigen::ArrayXXd s = 1.0 / (1.0 + (-z.array()).exp());
        return (z.array() * s).matrix();
    }

    Eigen::MatrixXd act_grad(const Eigen::MatrixXd& z) const {
        if (act_ == Activation::tanh) {
            Eigen::ArrayXXd th = z.array().tanh();
            return (1.0 - th * th).matrix();
        }
        Eigen::ArrayXXd s = 1.0 / (1.0 + (-z.array()).exp());
        return (s * (1.0 + z.array() * (1.0 - s))).matrix();
    }

    std::vector<int> dims_;
    Activation act_ = Activation::silu;
    TimeEmbedding embed_{};
    int extra_ = 0;
    std::vector<double> params_;
};

/// EpsField backed by a (shared, immutable) score network; derivatives by AD.
inline EpsField mlp_field(std::shared_ptr<const Mlp> net, VpSchedule sched) {
    if (!net || net->extra_inputs() != 0 || net->output_dim() != 2) throw ShapeError("mlp_field: not an eps network");
    return EpsField::from_generic([net](const auto& x, const auto& t) { return net->eps(x, t); }, sched, "mlp");
}

inline EpsField mlp_field(const Mlp& net, VpSchedule sched) { return mlp_field(std::make_shared<const Mlp>(net), sched); }

// ---------------------------------------------------------------------------
// Training configuration and optimizer.

enum class LrSchedule { constant, linear_decay, warmup };

inline LrSchedule parse_lr_schedule(const std::string& s) {
    if (s == "constant") return LrSchedule::constant;
    if (s == "linear_decay" || s == "decay") return LrSchedule::linear_decay;
    if (s == "warmup") return LrSchedule::warmup;
    throw ConfigError("unknown lr schedule '" + s + "'");
}

struct TrainConfig {
    int iters = 20000;
    int batch = 256;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    LrSchedule lr_schedule = LrSchedule::constant;
    int warmup_iters = 0;
    double t_cutoff = 1e-3; // t ~ U[t_cutoff, t_max]
    double t_max = 1.0;
    double clip = 1.0;      // gradient-norm clip; <= 0 disables
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int log_every = 100;

    void validate() const {
        if (iters < 0) throw ConfigError("TrainConfig: iters must be >= 0");
        if (batch < 1) throw ConfigError("TrainConfig: batch must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("TrainConfig: lr must be > 0");
        if (!(t_cutoff > 0.0 && t_cutoff < t_max && t_max <= 1.0)) throw ConfigError("TrainConfig: need 0 < t_cutoff < t_max <= 1");
        if (lr_schedule == LrSchedule::warmup && warmup_iters < 1) throw ConfigError("TrainConfig: warmup needs warmup_iters >= 1");
    }

    double lr_at(int it) const {
        switch (lr_schedule) {
        case LrSchedule::constant: return lr;
        case LrSchedule::linear_decay: return lr * (1.0 - static_cast<double>(it) / std::max(iters, 1));
        case LrSchedule::warmup: return lr * std::min(1.0, static_cast<double>(it + 1) / warmup_iters);
        }
        return lr;
    }
};

/// Loss curve, averaged over windows of `log_every` iterations.
struct TrainLog {
    std::vector<int> iter;
    std::vector<double> loss;
    std::function<void(int, double)> on_log;
};

class Adam {
public:
    Adam(std::size_t n, double b1, double b2, double eps) : m_(n, 0.0), v_(n, 0.0), b1_(b1), b2_(b2), eps_(eps) {}

    void step(std::vector<double>& p, const std::vector<double>& g, double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, t_);
        const double c2 = 1.0 - std::pow(b2_, t_);
        for (std::size_t i = 0; i < p.size(); ++i) {
            m_[i] = b1_ * m_[i] + (1.0 - b1_) * g[i];
            v_[i] = b2_ * v_[i] + (1.0 - b2_) * g[i] * g[i];
            p[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
        }
    }

private:
    std::vector<double> m_, v_;
    double b1_, b2_, eps_;
    int t_ = 0;
};

namespace detail {

inline void clip_grad(std::vector<double>& g, double clip) {
    if (!(clip > 0.0)) return;
    double n2 = 0.0;
    for (double v : g) n2 += v * v;
    const double n = std::sqrt(n2);
    if (n > clip)
        for (double& v : g) v *= clip / n;
}

/// One batch of diffused training points x_t = alpha x0 + sigma eps.
struct DiffusedBatch {
    std::vector<Vec2d> x0, xt, noise;
    std::vector<double> t;
};

inline DiffusedBatch draw_batch(const GaussianMixture& gmm, const VpSchedule& sched, const TrainConfig& cfg,
                                std::mt19937_64& rng) {
    DiffusedBatch b;
    const std::size_t n = static_cast<std::size_t>(cfg.batch);
    b.x0 = gmm.sample(n, rng);
    std::uniform_real_distribution<double> ut(cfg.t_cutoff, cfg.t_max);
    std::normal_distribution<double> normal;
    b.t.resize(n);
    b.noise.resize(n);
    b.xt.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        b.t[i] = ut(rng);
        b.noise[i] = Vec2d{{normal(rng), normal(rng)}};
        b.xt[i] = b.x0[i] * sched.alpha(b.t[i]) + b.noise[i] * sched.sigma(b.t[i]);
    }
    return b;
}

inline void record(TrainLog* log, int it, double& acc, int& count, int every, bool force) {
    if (!log || count == 0) return;
    if (count >= every || force) {
        const double mean = acc / count;
        log->iter.push_back(it);
        log->loss.push_back(mean);
        if (log->on_log) log->on_log(it, mean);
        acc = 0.0;
        count = 0;
    }
}

inline void check_loss(double loss, int it, const char* what) {
    if (!std::isfinite(loss))
        throw TrainingError(std::string(what) + ": non-finite loss at iteration " + std::to_string(it));
}

} // namespace detail

/// Denoising score matching: minimizes E ||eps - eps_theta(alpha x0 + sigma eps, t)||^2.
inline Mlp train_dsm(const GaussianMixture& gmm, const VpSchedule& sched, const TrainConfig& cfg, Mlp net,
                     TrainLog* log = nullptr) {
    cfg.validate();
    if (net.extra_inputs() != 0 || net.output_dim() != 2) throw ShapeError("train_dsm: not an eps network");
    std::mt19937_64 rng(cfg.seed);
    Adam opt(net.num_params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    std::vector<double> grad(net.num_params());
    Mlp::Cache cache;
    double acc = 0.0;
    int count = 0;
    const double B = cfg.batch;
    for (int it = 0; it < cfg.iters; ++it) {
        detail::DiffusedBatch b = detail::draw_batch(gmm, sched, cfg, rng);
        Eigen::MatrixXd in = net.make_batch_input(b.xt, b.t);
        Eigen::MatrixXd out = net.forward_batch(in, &cache);
        Eigen::MatrixXd r(2, cfg.batch);
        for (int j = 0; j < cfg.batch; ++j) {
            r(0, j) = out(0, j) - b.noise[static_cast<std::size_t>(j)][0];
            r(1, j) = out(1, j) - b.noise[static_cast<std::size_t>(j)][1];
        }
        const double loss = r.squaredNorm() / B;
        detail::check_loss(loss, it, "train_dsm");
        std::fill(grad.begin(), grad.end(), 0.0);
        net.backward_batch(cache, r * (2.0 / B), grad);
        detail::clip_grad(grad, cfg.clip);
        opt.step(net.params(), grad, cfg.lr_at(it));
        acc += loss;
        ++count;
        detail::record(log, it + 1, acc, count, cfg.log_every, it + 1 == cfg.iters);
    }
    return net;
}

/// DSM loss of `net` on a fresh batch (for tests and diagnostics).
inline double dsm_loss(const Mlp& net, const GaussianMixture& gmm, const VpSchedule& sched, const TrainConfig& cfg,
                       std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    detail::DiffusedBatch b = detail::draw_batch(gmm, sched, cfg, rng);
    Eigen::MatrixXd out = net.forward_batch(net.make_batch_input(b.xt, b.t));
    double s = 0.0;
    for (int j = 0; j < cfg.batch; ++j) {
        const auto& e = b.noise[static_cast<std::size_t>(j)];
        s += std::pow(out(0, j) - e[0], 2) + std::pow(out(1, j) - e[1], 2);
    }
    return s / cfg.batch;
}

// ---------------------------------------------------------------------------
// AD targets for the head.

/// d eps_theta / d gamma at (x, t) via forward-mode AD: the JVP along
/// eps_theta / sqrt(g^2+1) - g x / (1+g^2) plus the time partial times dt/dgamma.
inline Vec2d ad_target(const EpsField& field, const Vec2d& x, double t) {
    const VpSchedule& s = field.schedule();
    if (t < s.t_cutoff() * (1.0 - 1e-12) || t > 1.0) throw DomainError("ad_target: t outside [t_cutoff, 1]");
    if (!field.value1()) throw CapabilityError("ad_target: field has no dual evaluator");
    const Vec2d e = field.raw_eps(x, t);
    return EpsField::ad_d_gamma(field.value1(), s, x, t, e);
}

inline Vec2d ad_target(const Mlp& net, const Vec2d& x, double t, const VpSchedule& sched) {
    if (t < sched.t_cutoff() * (1.0 - 1e-12) || t > 1.0) throw DomainError("ad_target: t outside [t_cutoff, 1]");
    const Vec2d e = net.eps(x, t);
    const Vec2d u = sched.flow_velocity(x, t, e);
    return tangent(net.eps(seed(x, u), Dual1(t, sched.dt_dgamma(t))));
}

/// Batched eps_theta and AD target; eps (2 x B) and d1 (2 x B).
struct BatchTargets {
    Eigen::MatrixXd eps;
    Eigen::MatrixXd d1;
};

inline BatchTargets ad_target_batch(const Mlp& net, const std::vector<Vec2d>& xs, const std::vector<double>& ts,
                                    const VpSchedule& sched) {
    Eigen::MatrixXd in = net.make_batch_input(xs, ts);
    BatchTargets r;
    r.eps = net.forward_batch(in);
    Eigen::MatrixXd din = Eigen::MatrixXd::Zero(in.rows(), in.cols());
    const int ed = net.embedding().dim();
    std::vector<double> dfeat(static_cast<std::size_t>(ed));
    for (Eigen::Index j = 0; j < in.cols(); ++j) {
        const double t = ts[static_cast<std::size_t>(j)];
        const Vec2d e{{r.eps(0, j), r.eps(1, j)}};
        const Vec2d u = sched.flow_velocity(xs[static_cast<std::size_t>(j)], t, e);
        const double tau = sched.dt_dgamma(t);
        din(0, j) = u[0];
        din(1, j) = u[1];
        net.embedding().write_dt(t, dfeat.data());
        for (int k = 0; k < ed; ++k) din(2 + k, j) = dfeat[static_cast<std::size_t>(k)] * tau;
    }
    r.d1 = net.jvp_batch(in, din);
    return r;
}

// ---------------------------------------------------------------------------
// Distillation head with the mixed parameterization.

/// Coefficients (c1, c2, c3) of k = c1 k1 + c2 k2 + c3 k3:
/// -1/g, g/(1+g^2), 1/(g(1+g^2)).
inline std::array<double, 3> head_coefficients(double g) {
    if (!(g > 0.0)) throw DomainError("head_combine: gamma must be > 0");
    const double g2p1 = 1.0 + g * g;
    return {-1.0 / g, g / g2p1, 1.0 / (g * g2p1)};
}

inline Vec2d head_combine(const std::array<Vec2d, 3>& k, double t, const VpSchedule& sched) {
    if (!(t > 0.0)) throw DomainError("head_combine: gamma must be > 0");
    const auto c = head_coefficients(sched.gamma(t));
    return k[0] * c[0] + k[1] * c[1] + k[2] * c[2];
}

/// Head network on (x, embed(t), eps_theta) with six outputs (k1, k2, k3).
struct DistillHead {
    Mlp net;

    static DistillHead make(std::vector<int> hidden = {64, 64}, Activation act = Activation::silu,
                            TimeEmbedding embed = {}, std::uint64_t seed = 0) {
        std::vector<int> dims{2 + embed.dim() + 2};
        dims.insert(dims.end(), hidden.begin(), hidden.end());
        dims.push_back(6);
        DistillHead h{Mlp(dims, act, embed, 2)};
        // Zero final layer: an untrained head predicts k = 0.
        h.net.init(seed, 0.0);
        return h;
    }

    std::array<Vec2d, 3> raw(const Vec2d& x, double t, const Vec2d& eps) const {
        const double e[2] = {eps[0], eps[1]};
        std::vector<double> y = net.forward(net.make_input(x, t, e));
        return {Vec2d{{y[0], y[1]}}, Vec2d{{y[2], y[3]}}, Vec2d{{y[4], y[5]}}};
    }

    Vec2d predict(const Vec2d& x, double t, const Vec2d& eps, const VpSchedule& sched) const {
        return head_combine(raw(x, t, eps), t, sched);
    }

    void validate() const {
        if (net.output_dim() != 6 || net.extra_inputs() != 2) throw ShapeError("DistillHead: expected 6 outputs and eps inputs");
    }
};

/// Score network plus distilled head: eps from the network, d eps/d gamma from
/// the head (which ignores the drive; it only knows the network's own flow).
inline EpsField distilled_field(std::shared_ptr<const Mlp> net, std::shared_ptr<const DistillHead> head,
                                VpSchedule sched) {
    head->validate();
    EpsField f = mlp_field(net, sched).renamed("mlp+head");
    return f.with_derivative(DerivativeKind::distilled,
                             [head, sched](const Vec2d& x, double t, const Vec2d& eps, const Vec2d&) {
                                 return head->predict(x, t, eps, sched);
                             });
}

inline EpsField distilled_field(const Mlp& net, const DistillHead& head, VpSchedule sched) {
    return distilled_field(std::make_shared<const Mlp>(net), std::make_shared<const DistillHead>(head), sched);
}

namespace detail {

/// Weighted head residual and its gradient w.r.t. raw outputs for one batch.
/// Returns sum_j g_j^2 ||k_j - d_j||^2 / B; dout filled if non-null.
inline double head_loss(const Eigen::MatrixXd& raw, const Eigen::MatrixXd& target, const std::vector<double>& ts,
                        const VpSchedule& sched, Eigen::MatrixXd* dout) {
    const Eigen::Index B = raw.cols();
    double loss = 0.0;
    if (dout) dout->resize(6, B);
    for (Eigen::Index j = 0; j < B; ++j) {
        const double g = sched.gamma(ts[static_cast<std::size_t>(j)]);
        const auto c = head_coefficients(g);
        const double w = g * g;
        for (int d = 0; d < 2; ++d) {
            const double k = c[0] * raw(d, j) + c[1] * raw(2 + d, j) + c[2] * raw(4 + d, j);
            const double r = k - target(d, j);
            loss += w * r * r;
            if (dout)
                for (int ch = 0; ch < 3; ++ch) (*dout)(2 * ch + d, j) = 2.0 * w * r * c[static_cast<std::size_t>(ch)] / B;
        }
    }
    return loss / B;
}

} // namespace detail

/// Trains the head on AD targets of the frozen score network:
/// minimizes E[g^2 ||k_psi - d eps_theta/d gamma||^2].
inline DistillHead train_distill(const Mlp& score, const GaussianMixture& gmm, const VpSchedule& sched,
                                 const TrainConfig& cfg, DistillHead head, TrainLog* log = nullptr) {
    cfg.validate();
    head.validate();
    if (cfg.t_cutoff < sched.t_cutoff() * (1.0 - 1e-12)) throw ConfigError("train_distill: t range below schedule cutoff");
    std::mt19937_64 rng(cfg.seed);
    Adam opt(head.net.num_params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    std::vector<double> grad(head.net.num_params());
    Mlp::Cache cache;
    double acc = 0.0;
    int count = 0;
    for (int it = 0; it < cfg.iters; ++it) {
        detail::DiffusedBatch b = detail::draw_batch(gmm, sched, cfg, rng);
        BatchTargets tg = ad_target_batch(score, b.xt, b.t, sched);
        Eigen::MatrixXd in = head.net.make_batch_input(b.xt, b.t, &tg.eps);
        Eigen::MatrixXd raw = head.net.forward_batch(in, &cache);
        Eigen::MatrixXd dout;
        const double loss = detail::head_loss(raw, tg.d1, b.t, sched, &dout);
        detail::check_loss(loss, it, "train_distill");
        std::fill(grad.begin(), grad.end(), 0.0);
        head.net.backward_batch(cache, dout, grad);
        detail::clip_grad(grad, cfg.clip);
        opt.step(head.net.params(), grad, cfg.lr_at(it));
        acc += loss;
        ++count;
        detail::record(log, it + 1, acc, count, cfg.log_every, it + 1 == cfg.iters);
    }
    return head;
}

/// Held-out weighted residual E[g^2 ||k - d||^2] and the zero-predictor
/// baseline E[g^2 ||d||^2] on n diffused data points.
struct DistillResidual {
    double residual = 0.0;
    double baseline = 0.0;
    double ratio() const { return residual / baseline; }
};

inline DistillResidual distill_residual(const Mlp& score, const DistillHead& head, const GaussianMixture& gmm,
                                        const VpSchedule& sched, int n, std::uint64_t seed, double t_cutoff = -1.0) {
    TrainConfig cfg;
    cfg.batch = n;
    cfg.t_cutoff = t_cutoff > 0.0 ? t_cutoff : sched.t_cutoff();
    std::mt19937_64 rng(seed);
    detail::DiffusedBatch b = detail::draw_batch(gmm, sched, cfg, rng);
    BatchTargets tg = ad_target_batch(score, b.xt, b.t, sched);
    Eigen::MatrixXd raw = head.net.forward_batch(head.net.make_batch_input(b.xt, b.t, &tg.eps));
    DistillResidual r;
    r.residual = detail::head_loss(raw, tg.d1, b.t, sched, nullptr);
    r.baseline = detail::head_loss(Eigen::MatrixXd::Zero(6, n), tg.d1, b.t, sched, nullptr);
    return r;
}

// ---------------------------------------------------------------------------
// AD-free objective for the spatial JVP o ~ S2 v (experimental).
//
// With s = -eps_theta / sigma and the true noise eps, E[eps eps^T v | x_t] =
// sigma^2 S2 v + sigma^2 s s^T v + v, so o = S2 v minimizes
//   E g(t) || o + s s^T v + v / sigma^2 - eps eps^T v / sigma^2 ||^2.

enum class NoAdWeighting { one, sigma4 };

inline NoAdWeighting parse_noad_weighting(const std::string& s) {
    if (s == "one" || s == "1") return NoAdWeighting::one;
    if (s == "sigma4") return NoAdWeighting::sigma4;
    throw ConfigError("unknown no-AD weighting '" + s + "'");
}

/// The direction v = -sigma (eps / sqrt(g^2+1) - g x / (1+g^2)).
inline Vec2d noad_direction(const Vec2d& x, double t, const Vec2d& eps, const VpSchedule& sched) {
    return sched.flow_velocity(x, t, eps) * (-sched.sigma(t));
}

/// Per-sample regression target whose conditional mean is S2 v.
inline Vec2d noad_target(const Vec2d& x, double t, const Vec2d& model_eps, const Vec2d& noise, const VpSchedule& sched) {
    const double s2 = sched.sigma2(t);
    const Vec2d v = noad_direction(x, t, model_eps, sched);
    const Vec2d s = model_eps / (-sched.sigma(t));
    return (noise * dot(noise, v) - v) / s2 - s * dot(s, v);
}

/// Trains o(x, embed(t), eps_model) -> R^2 with the AD-free objective. The
/// score model is any EpsField; only its values are used.
inline Mlp train_spatial_jvp_noad(const EpsField& model, const GaussianMixture& gmm, const TrainConfig& cfg, Mlp onet,
                                  NoAdWeighting weighting = NoAdWeighting::one, TrainLog* log = nullptr) {
    cfg.validate();
    if (onet.output_dim() != 2 || onet.extra_inputs() != 2) throw ShapeError("train_spatial_jvp_noad: expected 2 outputs and eps inputs");
    const VpSchedule& sched = model.schedule();
    std::mt19937_64 rng(cfg.seed);
    Adam opt(onet.num_params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    std::vector<double> grad(onet.num_params());
    Mlp::Cache cache;
    double acc = 0.0;
    int count = 0;
    const double B = cfg.batch;
    for (int it = 0; it < cfg.iters; ++it) {
        detail::DiffusedBatch b = detail::draw_batch(gmm, sched, cfg, rng);
        Eigen::MatrixXd extra(2, cfg.batch), target(2, cfg.batch);
        std::vector<double> w(static_cast<std::size_t>(cfg.batch));
        for (int j = 0; j < cfg.batch; ++j) {
            const std::size_t k = static_cast<std::size_t>(j);
            const Vec2d e = model.raw_eps(b.xt[k], b.t[k]);
            extra(0, j) = e[0];
            extra(1, j) = e[1];
            const Vec2d y = noad_target(b.xt[k], b.t[k], e, b.noise[k], sched);
            target(0, j) = y[0];
            target(1, j) = y[1];
            w[k] = weighting == NoAdWeighting::one ? 1.0 : std::pow(sched.sigma2(b.t[k]), 2);
        }
        Eigen::MatrixXd out = onet.forward_batch(onet.make_batch_input(b.xt, b.t, &extra), &cache);
        Eigen::MatrixXd r = out - target;
        double loss = 0.0;
        for (int j = 0; j < cfg.batch; ++j) {
            loss += w[static_cast<std::size_t>(j)] * r.col(j).squaredNorm();
            r.col(j) *= 2.0 * w[static_cast<std::size_t>(j)] / B;
        }
        loss /= B;
        detail::check_loss(loss, it, "train_spatial_jvp_noad");
        std::fill(grad.begin(), grad.end(), 0.0);
        onet.backward_batch(cache, r, grad);
        detail::clip_grad(grad, cfg.clip);
        opt.step(onet.params(), grad, cfg.lr_at(it));
        acc += loss;
        ++count;
        detail::record(log, it + 1, acc, count, cfg.log_every, it + 1 == cfg.iters);
    }
    return onet;
}

/// o-network of matching shape for the AD-free objective.
inline Mlp make_noad_net(std::vector<int> hidden = {64, 64}, Activation act = Activation::silu, TimeEmbedding embed = {},
                         std::uint64_t seed = 0) {
    std::vector<int> dims{2 + embed.dim() + 2};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(2);
    Mlp m(dims, act, embed, 2);
    m.init(seed);
    return m;
}

inline Vec2d noad_predict(const Mlp& onet, const Vec2d& x, double t, const Vec2d& eps) {
    const double e[2] = {eps[0], eps[1]};
    std::vector<double> y = onet.forward(onet.make_input(x, t, e));
    return Vec2d{{y[0], y[1]}};
}

} // namespace ttm
