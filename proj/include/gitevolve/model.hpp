// Multi-task sequential network.
//
// Two stacked LSTM layers encode the last N encoded events; the final hidden
// state of the second layer feeds three branches (event type, time delay,
// user group), each dense -> ReLU -> dropout -> dense -> ReLU -> dropout ->
// output. Classification outputs are per-class sigmoids, the delay output is
// linear (log-normalized hours).
//
// Loss = w_e * sum_k mean_b BCE(type) + w_t * mean_b logcosh(delay error)
//      + w_c * sum_k mean_b BCE(group),
// with probabilities clamped to [1e-7, 1 - 1e-7] before the logs.
//
// All parameters live in one flat vector; tensors are Eigen::Map views into
// it, which keeps Adam, finite differences and checkpoints trivial.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "gitevolve/core_types.hpp"
#include "gitevolve/encoder.hpp"
#include "gitevolve/io_util.hpp"
#include "gitevolve/random.hpp"

namespace gitevolve {

struct LossWeights {
    double type = 1.0;
    double delay = 1.0;
    double group = 1.0;
};

struct MtsConfig {
    int input_dim = 398;
    int num_types = kNumEventTypes;
    int num_groups = 101;
    int lstm_hidden1 = 250;
    int lstm_hidden2 = 150;
    int branch_hidden1 = 128;
    int branch_hidden2 = 64;
    double dropout = 0.5;
    int window = 20;
    int batch_size = 256;
    int epochs = 150;
    LossWeights weights;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 1;

    void validate() const {
        if (input_dim < 1 || num_types < 1 || num_groups < 1 || lstm_hidden1 < 1 || lstm_hidden2 < 1 ||
            branch_hidden1 < 1 || branch_hidden2 < 1 || window < 1 || batch_size < 1 || epochs < 0) {
            throw ValidationError("model config: all sizes must be positive");
        }
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("model config: dropout must be in [0, 1)");
        if (!(weights.type >= 0.0 && weights.delay >= 0.0 && weights.group >= 0.0)) {
            throw ValidationError("model config: loss weights must be non-negative");
        }
        if (!(learning_rate > 0.0)) throw ValidationError("model config: learning_rate must be positive");
    }
};

enum class Branch : int { Type = 0, Delay = 1, Group = 2 };
inline constexpr int kNumBranches = 3;

struct MtsOutput {
    Eigen::MatrixXd type_probs;   // bs x num_types
    Eigen::VectorXd delay;        // bs, log-normalized
    Eigen::MatrixXd group_probs;  // bs x num_groups
};

struct LossBreakdown {
    double total = 0.0;  // weighted
    double type = 0.0;
    double delay = 0.0;
    double group = 0.0;
};

inline constexpr double kProbClamp = 1e-7;

inline double log_cosh(double x) {
    const double a = std::abs(x);
    return a + std::log1p(std::exp(-2.0 * a)) - std::log(2.0);
}

/// Summed-over-classes, mean-over-batch binary cross-entropy. `probs` is
/// classes x batch; optional `grad_logits` receives d(loss)/d(logit).
inline double multilabel_bce(const Eigen::MatrixXd& probs, const std::vector<int>& targets,
                             Eigen::MatrixXd* grad_logits = nullptr, double scale = 1.0) {
    const Eigen::Index k = probs.rows();
    const Eigen::Index bs = probs.cols();
    double total = 0.0;
    if (grad_logits) grad_logits->resize(k, bs);
    for (Eigen::Index b = 0; b < bs; ++b) {
        for (Eigen::Index c = 0; c < k; ++c) {
            const double t = targets[static_cast<std::size_t>(b)] == c ? 1.0 : 0.0;
            const double p = probs(c, b);
            const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
            total -= t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc);
            if (grad_logits) {
                // Clamped entries are flat in p.
                const bool clamped = p < kProbClamp || p > 1.0 - kProbClamp;
                (*grad_logits)(c, b) = clamped ? 0.0 : scale * (p - t) / static_cast<double>(bs);
            }
        }
    }
    return total / static_cast<double>(bs);
}

/// Loss of a prediction against one-hot/real targets (outputs row-per-sample).
inline LossBreakdown mts_loss(const MtsOutput& pred, const BatchTargets& targets, const LossWeights& w) {
    if (!pred.type_probs.allFinite() || !pred.delay.allFinite() || !pred.group_probs.allFinite()) {
        throw NumericError("loss: non-finite prediction");
    }
    LossBreakdown l;
    l.type = multilabel_bce(pred.type_probs.transpose(), targets.type);
    l.group = multilabel_bce(pred.group_probs.transpose(), targets.group);
    for (Eigen::Index b = 0; b < pred.delay.size(); ++b) l.delay += log_cosh(pred.delay(b) - targets.delay(b));
    l.delay /= static_cast<double>(std::max<Eigen::Index>(1, pred.delay.size()));
    l.total = w.type * l.type + w.delay * l.delay + w.group * l.group;
    return l;
}

namespace detail {

struct TensorSpec {
    std::string name;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    Eigen::Index offset = 0;
};

inline Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& x) { return (1.0 + (-x.array()).exp()).inverse().matrix(); }

struct LstmCache {
    Eigen::MatrixXd gates;  // 4H x TB, post-activation (i, f, g, o)
    Eigen::MatrixXd c;      // H x TB
    Eigen::MatrixXd tanh_c;
    Eigen::MatrixXd h;
};

struct BranchCache {
    Eigen::MatrixXd a1, m1, d1, a2, m2, d2, out;
};

struct ForwardCache {
    LstmCache l1, l2;
    Eigen::MatrixXd encoding;  // H2 x B
    std::array<BranchCache, kNumBranches> branch;
};

}  // namespace detail

class MtsModel {
public:
    enum TensorId : int {
        L1Wx, L1Wh, L1b, L2Wx, L2Wh, L2b,
        // per branch: W1, b1, W2, b2, Wo, bo
        BranchBase,
    };
    static constexpr int kTensorsPerBranch = 6;

    MtsModel() : MtsModel(MtsConfig{}) {}

    explicit MtsModel(MtsConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        build_layout();
        params_ = Eigen::VectorXd::Zero(total_);
        initialize(cfg_.seed);
    }

    const MtsConfig& config() const { return cfg_; }
    Eigen::VectorXd& parameters() { return params_; }
    const Eigen::VectorXd& parameters() const { return params_; }
    Eigen::Index parameter_count() const { return total_; }
    const std::vector<detail::TensorSpec>& tensors() const { return specs_; }

    static int branch_tensor(Branch b, int k) { return BranchBase + static_cast<int>(b) * kTensorsPerBranch + k; }

    int branch_out(Branch b) const {
        switch (b) {
            case Branch::Type: return cfg_.num_types;
            case Branch::Delay: return 1;
            case Branch::Group: return cfg_.num_groups;
        }
        return 0;
    }

    Eigen::Map<const Eigen::MatrixXd> view(const Eigen::VectorXd& flat, int id) const {
        const auto& s = specs_[static_cast<std::size_t>(id)];
        return {flat.data() + s.offset, s.rows, s.cols};
    }
    Eigen::Map<Eigen::MatrixXd> view(Eigen::VectorXd& flat, int id) const {
        const auto& s = specs_[static_cast<std::size_t>(id)];
        return {flat.data() + s.offset, s.rows, s.cols};
    }
    Eigen::Map<const Eigen::MatrixXd> tensor(int id) const { return view(params_, id); }

    /// Weights uniform in +-1/sqrt(fan_in); biases zero except LSTM forget
    /// gates, which start at 1.
    void initialize(std::uint64_t seed) {
        Rng rng(seed);
        params_.setZero();
        for (std::size_t id = 0; id < specs_.size(); ++id) {
            const auto& s = specs_[id];
            if (s.cols == 1) continue;  // bias
            const double bound = 1.0 / std::sqrt(static_cast<double>(s.cols));
            for (Eigen::Index i = 0; i < s.rows * s.cols; ++i) params_(s.offset + i) = uniform_real(rng, -bound, bound);
        }
        for (int id : {L1b, L2b}) {
            auto b = view(params_, id);
            const Eigen::Index h = b.rows() / 4;
            b.middleRows(h, h).setOnes();
        }
    }

    /// Inference (no dropout).
    MtsOutput forward(const SequenceBatch& batch) const {
        detail::ForwardCache cache;
        return run_forward(params_, batch, nullptr, cache);
    }

    /// Loss in inference mode.
    LossBreakdown evaluate(const SequenceBatch& batch, const BatchTargets& targets) const {
        return mts_loss(forward(batch), targets, cfg_.weights);
    }

    /// Loss and its gradient w.r.t. the flat parameter vector. Dropout is
    /// applied when `dropout_rng` is non-null and the configured rate > 0.
    LossBreakdown loss_and_gradient(const SequenceBatch& batch, const BatchTargets& targets, const LossWeights& w,
                                    Rng* dropout_rng, Eigen::VectorXd& grad) const {
        return loss_and_gradient_at(params_, batch, targets, w, dropout_rng, grad);
    }

    LossBreakdown loss_and_gradient_at(const Eigen::VectorXd& params, const SequenceBatch& batch,
                                       const BatchTargets& targets, const LossWeights& w, Rng* dropout_rng,
                                       Eigen::VectorXd& grad) const {
        detail::ForwardCache cache;
        const MtsOutput out = run_forward(params, batch, dropout_rng, cache);
        const LossBreakdown loss = mts_loss(out, targets, w);
        grad = Eigen::VectorXd::Zero(total_);
        run_backward(params, batch, targets, w, cache, grad);
        return loss;
    }

    LossBreakdown loss_at(const Eigen::VectorXd& params, const SequenceBatch& batch, const BatchTargets& targets,
                          const LossWeights& w) const {
        detail::ForwardCache cache;
        return mts_loss(run_forward(params, batch, nullptr, cache), targets, w);
    }

    void save(std::ostream& out) const;
    static MtsModel load(std::istream& in);

private:
    void add_tensor(std::string name, Eigen::Index rows, Eigen::Index cols) {
        specs_.push_back({std::move(name), rows, cols, total_});
        total_ += rows * cols;
    }

    void build_layout() {
        const int h1 = cfg_.lstm_hidden1, h2 = cfg_.lstm_hidden2;
        add_tensor("lstm1.wx", 4 * h1, cfg_.input_dim);
        add_tensor("lstm1.wh", 4 * h1, h1);
        add_tensor("lstm1.b", 4 * h1, 1);
        add_tensor("lstm2.wx", 4 * h2, h1);
        add_tensor("lstm2.wh", 4 * h2, h2);
        add_tensor("lstm2.b", 4 * h2, 1);
        for (const auto& [b, name] : {std::pair{Branch::Type, "type"}, std::pair{Branch::Delay, "delay"},
                                      std::pair{Branch::Group, "group"}}) {
            const std::string p = std::string(name) + ".";
            add_tensor(p + "w1", cfg_.branch_hidden1, h2);
            add_tensor(p + "b1", cfg_.branch_hidden1, 1);
            add_tensor(p + "w2", cfg_.branch_hidden2, cfg_.branch_hidden1);
            add_tensor(p + "b2", cfg_.branch_hidden2, 1);
            add_tensor(p + "wo", branch_out(b), cfg_.branch_hidden2);
            add_tensor(p + "bo", branch_out(b), 1);
        }
    }

    void lstm_forward(const Eigen::VectorXd& params, const Eigen::MatrixXd& x, int steps, int bs, int base,
                      detail::LstmCache& c) const {
        const auto wx = view(params, base);
        const auto wh = view(params, base + 1);
        const auto b = view(params, base + 2);
        const Eigen::Index h = wh.cols();
        c.gates.noalias() = wx * x;
        c.gates.colwise() += b.col(0);
        c.c.resize(h, x.cols());
        c.tanh_c.resize(h, x.cols());
        c.h.resize(h, x.cols());
        for (int t = 0; t < steps; ++t) {
            auto g = c.gates.middleCols(static_cast<Eigen::Index>(t) * bs, bs);
            if (t > 0) g.noalias() += wh * c.h.middleCols(static_cast<Eigen::Index>(t - 1) * bs, bs);
            g.topRows(2 * h) = detail::sigmoid(g.topRows(2 * h));
            g.middleRows(2 * h, h) = g.middleRows(2 * h, h).array().tanh().matrix();
            g.bottomRows(h) = detail::sigmoid(g.bottomRows(h));
            auto ct = c.c.middleCols(static_cast<Eigen::Index>(t) * bs, bs);
            ct = g.topRows(h).cwiseProduct(g.middleRows(2 * h, h));
            if (t > 0) ct += g.middleRows(h, h).cwiseProduct(c.c.middleCols(static_cast<Eigen::Index>(t - 1) * bs, bs));
            auto tc = c.tanh_c.middleCols(static_cast<Eigen::Index>(t) * bs, bs);
            tc = ct.array().tanh().matrix();
            c.h.middleCols(static_cast<Eigen::Index>(t) * bs, bs) = g.bottomRows(h).cwiseProduct(tc);
        }
    }

    /// BPTT; `dh` holds the upstream gradient for every h_t. Returns dX
    /// when requested.
    Eigen::MatrixXd lstm_backward(const Eigen::VectorXd& params, const Eigen::MatrixXd& x, int steps, int bs, int base,
                                  const detail::LstmCache& c, const Eigen::MatrixXd& dh, Eigen::VectorXd& grad,
                                  bool need_dx) const {
        const auto wx = view(params, base);
        const auto wh = view(params, base + 1);
        const Eigen::Index h = wh.cols();
        Eigen::MatrixXd dgates(4 * h, x.cols());
        Eigen::MatrixXd dh_next = Eigen::MatrixXd::Zero(h, bs);
        Eigen::MatrixXd dc_next = Eigen::MatrixXd::Zero(h, bs);
        auto dwh = view(grad, base + 1);
        for (int t = steps - 1; t >= 0; --t) {
            const Eigen::Index col = static_cast<Eigen::Index>(t) * bs;
            const auto g = c.gates.middleCols(col, bs);
            const auto i = g.topRows(h).array();
            const auto f = g.middleRows(h, h).array();
            const auto gg = g.middleRows(2 * h, h).array();
            const auto o = g.bottomRows(h).array();
            const auto tc = c.tanh_c.middleCols(col, bs).array();
            const Eigen::ArrayXXd dht = (dh.middleCols(col, bs) + dh_next).array();
            const Eigen::ArrayXXd dc = dht * o * (1.0 - tc.square()) + dc_next.array();
            auto dg = dgates.middleCols(col, bs);
            dg.topRows(h) = (dc * gg * i * (1.0 - i)).matrix();
            if (t > 0) {
                dg.middleRows(h, h) =
                    (dc * c.c.middleCols(col - bs, bs).array() * f * (1.0 - f)).matrix();
            } else {
                dg.middleRows(h, h).setZero();
            }
            dg.middleRows(2 * h, h) = (dc * i * (1.0 - gg.square())).matrix();
            dg.bottomRows(h) = (dht * tc * o * (1.0 - o)).matrix();
            dc_next = (dc * f).matrix();
            if (t > 0) {
                dwh.noalias() += dg * c.h.middleCols(col - bs, bs).transpose();
                dh_next.noalias() = wh.transpose() * dg;
            }
        }
        view(grad, base).noalias() += dgates * x.transpose();
        view(grad, base + 2).col(0) += dgates.rowwise().sum();
        if (!need_dx) return {};
        return wx.transpose() * dgates;
    }

    void branch_forward(const Eigen::VectorXd& params, Branch br, const Eigen::MatrixXd& enc, Rng* rng,
                        detail::BranchCache& c) const {
        const int base = branch_tensor(br, 0);
        const double keep = 1.0 - cfg_.dropout;
        auto mask = [&](Eigen::Index rows, Eigen::Index cols) {
            Eigen::MatrixXd m(rows, cols);
            for (Eigen::Index j = 0; j < cols; ++j)
                for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = uniform01(*rng) < keep ? 1.0 / keep : 0.0;
            return m;
        };
        const bool drop = rng != nullptr && cfg_.dropout > 0.0;
        c.a1.noalias() = view(params, base) * enc;
        c.a1.colwise() += view(params, base + 1).col(0);
        c.d1 = c.a1.cwiseMax(0.0);
        if (drop) {
            c.m1 = mask(c.d1.rows(), c.d1.cols());
            c.d1.array() *= c.m1.array();
        }
        c.a2.noalias() = view(params, base + 2) * c.d1;
        c.a2.colwise() += view(params, base + 3).col(0);
        c.d2 = c.a2.cwiseMax(0.0);
        if (drop) {
            c.m2 = mask(c.d2.rows(), c.d2.cols());
            c.d2.array() *= c.m2.array();
        } else {
            c.m1.resize(0, 0);
            c.m2.resize(0, 0);
        }
        c.out.noalias() = view(params, base + 4) * c.d2;
        c.out.colwise() += view(params, base + 5).col(0);
    }

    /// Returns d(loss)/d(encoding) contribution of one branch.
    Eigen::MatrixXd branch_backward(const Eigen::VectorXd& params, Branch br, const Eigen::MatrixXd& enc,
                                    const detail::BranchCache& c, const Eigen::MatrixXd& dout,
                                    Eigen::VectorXd& grad) const {
        const int base = branch_tensor(br, 0);
        view(grad, base + 4).noalias() += dout * c.d2.transpose();
        view(grad, base + 5).col(0) += dout.rowwise().sum();
        Eigen::MatrixXd dd2 = view(params, base + 4).transpose() * dout;
        if (c.m2.size() > 0) dd2.array() *= c.m2.array();
        const Eigen::MatrixXd da2 = (c.a2.array() > 0.0).select(dd2.array(), 0.0).matrix();
        view(grad, base + 2).noalias() += da2 * c.d1.transpose();
        view(grad, base + 3).col(0) += da2.rowwise().sum();
        Eigen::MatrixXd dd1 = view(params, base + 2).transpose() * da2;
        if (c.m1.size() > 0) dd1.array() *= c.m1.array();
        const Eigen::MatrixXd da1 = (c.a1.array() > 0.0).select(dd1.array(), 0.0).matrix();
        view(grad, base).noalias() += da1 * enc.transpose();
        view(grad, base + 1).col(0) += da1.rowwise().sum();
        return view(params, base).transpose() * da1;
    }

    MtsOutput run_forward(const Eigen::VectorXd& params, const SequenceBatch& batch, Rng* rng,
                          detail::ForwardCache& cache) const {
        if (batch.x.rows() != cfg_.input_dim) {
            throw ValidationError("forward: input dimension " + std::to_string(batch.x.rows()) + " != model input " +
                                  std::to_string(cfg_.input_dim));
        }
        if (batch.steps < 1 || batch.batch < 1 ||
            batch.x.cols() != static_cast<Eigen::Index>(batch.steps) * batch.batch) {
            throw ValidationError("forward: batch shape mismatch");
        }
        const int t = batch.steps, bs = batch.batch;
        lstm_forward(params, batch.x, t, bs, L1Wx, cache.l1);
        lstm_forward(params, cache.l1.h, t, bs, L2Wx, cache.l2);
        cache.encoding = cache.l2.h.rightCols(bs);
        for (int b = 0; b < kNumBranches; ++b) {
            branch_forward(params, static_cast<Branch>(b), cache.encoding, rng,
                           cache.branch[static_cast<std::size_t>(b)]);
        }
        MtsOutput out;
        out.type_probs = detail::sigmoid(cache.branch[0].out).transpose();
        out.delay = cache.branch[1].out.row(0).transpose();
        out.group_probs = detail::sigmoid(cache.branch[2].out).transpose();
        return out;
    }

    void run_backward(const Eigen::VectorXd& params, const SequenceBatch& batch, const BatchTargets& targets,
                      const LossWeights& w, const detail::ForwardCache& cache, Eigen::VectorXd& grad) const {
        const int t = batch.steps, bs = batch.batch;
        const Eigen::Index h2 = cfg_.lstm_hidden2;
        Eigen::MatrixXd denc = Eigen::MatrixXd::Zero(h2, bs);

        Eigen::MatrixXd dtype;
        multilabel_bce(detail::sigmoid(cache.branch[0].out), targets.type, &dtype, w.type);
        denc += branch_backward(params, Branch::Type, cache.encoding, cache.branch[0], dtype, grad);

        Eigen::MatrixXd ddelay(1, bs);
        for (int b = 0; b < bs; ++b) {
            ddelay(0, b) = w.delay * std::tanh(cache.branch[1].out(0, b) - targets.delay(b)) / static_cast<double>(bs);
        }
        denc += branch_backward(params, Branch::Delay, cache.encoding, cache.branch[1], ddelay, grad);

        Eigen::MatrixXd dgroup;
        multilabel_bce(detail::sigmoid(cache.branch[2].out), targets.group, &dgroup, w.group);
        denc += branch_backward(params, Branch::Group, cache.encoding, cache.branch[2], dgroup, grad);

        Eigen::MatrixXd dh2 = Eigen::MatrixXd::Zero(h2, static_cast<Eigen::Index>(t) * bs);
        dh2.rightCols(bs) = denc;
        const Eigen::MatrixXd dh1 = lstm_backward(params, cache.l1.h, t, bs, L2Wx, cache.l2, dh2, grad, true);
        lstm_backward(params, batch.x, t, bs, L1Wx, cache.l1, dh1, grad, false);
    }

    MtsConfig cfg_;
    std::vector<detail::TensorSpec> specs_;
    Eigen::Index total_ = 0;
    Eigen::VectorXd params_;
};

// ---------------------------------------------------------------------------
// Checkpoints

inline void MtsModel::save(std::ostream& out) const {
    out << "gitevolve-mts v1\n";
    out << "input_dim\t" << cfg_.input_dim << "\nnum_types\t" << cfg_.num_types << "\nnum_groups\t" << cfg_.num_groups
        << "\nlstm_hidden1\t" << cfg_.lstm_hidden1 << "\nlstm_hidden2\t" << cfg_.lstm_hidden2 << "\nbranch_hidden1\t"
        << cfg_.branch_hidden1 << "\nbranch_hidden2\t" << cfg_.branch_hidden2 << "\ndropout\t"
        << io::hexfloat(cfg_.dropout) << "\nwindow\t" << cfg_.window << "\nbatch_size\t" << cfg_.batch_size
        << "\nepochs\t" << cfg_.epochs << "\nw_type\t" << io::hexfloat(cfg_.weights.type) << "\nw_delay\t"
        << io::hexfloat(cfg_.weights.delay) << "\nw_group\t" << io::hexfloat(cfg_.weights.group)
        << "\nlearning_rate\t" << io::hexfloat(cfg_.learning_rate) << "\nbeta1\t" << io::hexfloat(cfg_.beta1)
        << "\nbeta2\t" << io::hexfloat(cfg_.beta2) << "\nepsilon\t" << io::hexfloat(cfg_.epsilon) << "\nseed\t"
        << cfg_.seed << '\n';
    for (const auto& s : specs_) {
        out << "tensor\t" << s.name << '\t' << s.rows << '\t' << s.cols;
        for (Eigen::Index i = 0; i < s.rows * s.cols; ++i) out << '\t' << io::hexfloat(params_(s.offset + i));
        out << '\n';
    }
}

inline MtsModel MtsModel::load(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || io::strip_cr(line) != "gitevolve-mts v1") {
        throw DataError("not a model checkpoint (bad header)");
    }
    MtsConfig cfg;
    std::vector<std::pair<std::string, std::vector<double>>> tensors;
    std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
    while (std::getline(in, line)) {
        const auto f = io::split(io::strip_cr(line));
        if (f.empty() || f[0].empty()) continue;
        const auto key = f[0];
        if (key == "tensor") {
            if (f.size() < 4) throw DataError("checkpoint: truncated tensor record");
            const auto rows = io::parse_int_or_throw(f[2], "rows");
            const auto cols = io::parse_int_or_throw(f[3], "cols");
            std::vector<double> values;
            values.reserve(f.size() - 4);
            for (std::size_t i = 4; i < f.size(); ++i) values.push_back(io::parse_double_or_throw(f[i], "tensor value"));
            if (static_cast<std::int64_t>(values.size()) != rows * cols) throw DataError("checkpoint: tensor size mismatch");
            tensors.emplace_back(std::string(f[1]), std::move(values));
            shapes.emplace_back(rows, cols);
            continue;
        }
        if (f.size() != 2) throw DataError("checkpoint: malformed config line");
        const auto v = f[1];
        auto as_int = [&] { return static_cast<int>(io::parse_int_or_throw(v, key)); };
        auto as_double = [&] { return io::parse_double_or_throw(v, key); };
        if (key == "input_dim") cfg.input_dim = as_int();
        else if (key == "num_types") cfg.num_types = as_int();
        else if (key == "num_groups") cfg.num_groups = as_int();
        else if (key == "lstm_hidden1") cfg.lstm_hidden1 = as_int();
        else if (key == "lstm_hidden2") cfg.lstm_hidden2 = as_int();
        else if (key == "branch_hidden1") cfg.branch_hidden1 = as_int();
        else if (key == "branch_hidden2") cfg.branch_hidden2 = as_int();
        else if (key == "dropout") cfg.dropout = as_double();
        else if (key == "window") cfg.window = as_int();
        else if (key == "batch_size") cfg.batch_size = as_int();
        else if (key == "epochs") cfg.epochs = as_int();
        else if (key == "w_type") cfg.weights.type = as_double();
        else if (key == "w_delay") cfg.weights.delay = as_double();
        else if (key == "w_group") cfg.weights.group = as_double();
        else if (key == "learning_rate") cfg.learning_rate = as_double();
        else if (key == "beta1") cfg.beta1 = as_double();
        else if (key == "beta2") cfg.beta2 = as_double();
        else if (key == "epsilon") cfg.epsilon = as_double();
        else if (key == "seed") cfg.seed = std::stoull(std::string(v));
        else throw DataError("checkpoint: unknown key '" + std::string(key) + "'");
    }
    MtsModel model(cfg);
    if (tensors.size() != model.specs_.size()) throw DataError("checkpoint: tensor count mismatch");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& s = model.specs_[i];
        if (tensors[i].first != s.name || shapes[i].first != s.rows || shapes[i].second != s.cols) {
            throw DataError("checkpoint: tensor '" + tensors[i].first + "' does not match architecture");
        }
        std::copy(tensors[i].second.begin(), tensors[i].second.end(), model.params_.data() + s.offset);
    }
    return model;
}

// ---------------------------------------------------------------------------
// Optimizer and training

class AdamOptimizer {
public:
    AdamOptimizer(Eigen::Index n, double lr, double beta1, double beta2, double eps)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(Eigen::VectorXd::Zero(n)), v_(Eigen::VectorXd::Zero(n)) {}

    void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
        ++t_;
        m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
        v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
    }

private:
    double lr_, beta1_, beta2_, eps_;
    Eigen::VectorXd m_, v_;
    long t_ = 0;
};

struct EpochRecord {
    int epoch = 0;
    LossBreakdown train;
    LossBreakdown val;
};

struct TrainResult {
    MtsModel model;
    std::vector<EpochRecord> history;
    int best_epoch = -1;
};

/// Inference-mode loss over a whole dataset (sample-weighted mean of batches).
inline LossBreakdown dataset_loss(const MtsModel& model, const SequenceDataset& data, int batch_size) {
    LossBreakdown sum;
    SequenceBatch batch;
    BatchTargets targets;
    std::vector<std::size_t> ids;
    for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
        ids.resize(end - start);
        std::iota(ids.begin(), ids.end(), start);
        data.gather(ids, batch, targets);
        const auto l = model.evaluate(batch, targets);
        const double w = static_cast<double>(end - start);
        sum.total += w * l.total;
        sum.type += w * l.type;
        sum.delay += w * l.delay;
        sum.group += w * l.group;
    }
    if (!data.empty()) {
        const double n = static_cast<double>(data.size());
        sum.total /= n;
        sum.type /= n;
        sum.delay /= n;
        sum.group /= n;
    }
    return sum;
}

/// Adam over seeded shuffles; returns the snapshot with the lowest
/// validation loss (training loss when no validation samples exist).
inline TrainResult train(const SequenceDataset& train_set, const SequenceDataset& val_set, const MtsConfig& cfg,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    if (train_set.empty()) throw ValidationError("train: empty training set");
    if (train_set.dim() != cfg.input_dim) throw ValidationError("train: dataset width does not match model input");
    MtsModel model(cfg);
    TrainResult result{model, {}, -1};
    AdamOptimizer adam(model.parameter_count(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    Rng shuffle_rng(derive_seed(cfg.seed, 1));
    Rng dropout_rng(derive_seed(cfg.seed, 2));
    std::vector<std::size_t> order(train_set.size());
    SequenceBatch batch;
    BatchTargets targets;
    Eigen::VectorXd grad;
    double best = std::numeric_limits<double>::infinity();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(shuffle_rng, i)]);
        EpochRecord rec;
        rec.epoch = epoch;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            train_set.gather(std::span<const std::size_t>(order.data() + start, end - start), batch, targets);
            const auto l = model.loss_and_gradient(batch, targets, cfg.weights, &dropout_rng, grad);
            if (!std::isfinite(l.total) || !grad.allFinite()) {
                throw NumericError("training diverged at epoch " + std::to_string(epoch));
            }
            adam.step(model.parameters(), grad);
            const double w = static_cast<double>(end - start);
            rec.train.total += w * l.total;
            rec.train.type += w * l.type;
            rec.train.delay += w * l.delay;
            rec.train.group += w * l.group;
        }
        const double n = static_cast<double>(train_set.size());
        rec.train.total /= n;
        rec.train.type /= n;
        rec.train.delay /= n;
        rec.train.group /= n;
        rec.val = val_set.empty() ? rec.train : dataset_loss(model, val_set, cfg.batch_size);
        if (!std::isfinite(rec.val.total)) throw NumericError("training diverged at epoch " + std::to_string(epoch));
        if (rec.val.total < best) {
            best = rec.val.total;
            result.model = model;
            result.best_epoch = epoch;
        }
        result.history.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    if (result.best_epoch < 0) result.model = model;
    return result;
}

inline void write_history(std::ostream& out, const std::vector<EpochRecord>& history) {
    out << "epoch\ttrain_loss\tval_loss\ttrain_type\ttrain_delay\ttrain_group\tval_type\tval_delay\tval_group\n";
    for (const auto& r : history) {
        out << r.epoch << '\t' << io::exact_decimal(r.train.total) << '\t' << io::exact_decimal(r.val.total) << '\t'
            << io::exact_decimal(r.train.type) << '\t' << io::exact_decimal(r.train.delay) << '\t'
            << io::exact_decimal(r.train.group) << '\t' << io::exact_decimal(r.val.type) << '\t'
            << io::exact_decimal(r.val.delay) << '\t' << io::exact_decimal(r.val.group) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckReport {
    double max_rel_error = 0.0;
    Eigen::Index worst_index = -1;
    std::string worst_tensor;
    Eigen::Index parameters = 0;
};

inline MtsConfig tiny_config(int input_dim = 398, int num_groups = 101) {
    MtsConfig cfg;
    cfg.input_dim = input_dim;
    cfg.num_groups = num_groups;
    cfg.lstm_hidden1 = 8;
    cfg.lstm_hidden2 = 6;
    cfg.branch_hidden1 = 8;
    cfg.branch_hidden2 = 4;
    cfg.dropout = 0.0;
    return cfg;
}

/// Relative error |a - n| / max(|a|, |n|), with entries where both sides
/// are below `abs_floor` compared absolutely.
inline double relative_error(double analytic, double numeric, double abs_floor = 1e-8) {
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    const double diff = std::abs(analytic - numeric);
    return scale < abs_floor ? diff / abs_floor : diff / scale;
}

namespace detail {

/// Straight-loop forward pass and per-branch losses in long double, kept
/// separate from the Eigen implementation. Finite differences of a summed
/// 100-class loss lose about 1e-8 absolute to double rounding at a 1e-5
/// step; the 64-bit mantissa pushes that below 1e-11. The first-layer input
/// projection is cached so a single-parameter shift only replays the
/// recurrences and branches.
class ExtendedLoss {
public:
    using Real = long double;
    using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;

    ExtendedLoss(const MtsModel& model, const SequenceBatch& batch, const BatchTargets& targets)
        : model_(model), steps_(batch.steps), bs_(batch.batch), targets_(targets) {
        params_ = model.parameters().cast<Real>();
        x_ = batch.x.cast<Real>();
        const auto& s = spec(MtsModel::L1Wx);
        const auto& b = spec(MtsModel::L1b);
        proj_ = Mat::Zero(s.rows, x_.cols());
        for (Eigen::Index j = 0; j < x_.cols(); ++j)
            for (Eigen::Index r = 0; r < s.rows; ++r) {
                Real acc = params_(b.offset + r);
                for (Eigen::Index c = 0; c < s.cols; ++c) acc += params_(s.offset + r + c * s.rows) * x_(c, j);
                proj_(r, j) = acc;
            }
    }

    /// Per-branch central differences L(p_i + h) - L(p_i - h), unweighted.
    /// Terms are differenced before summation so rounding scales with each
    /// term, not with the total loss.
    std::array<Real, 3> difference(Eigen::Index i, Real h) {
        const auto up = shifted_terms(i, h);
        const auto down = shifted_terms(i, -h);
        std::array<Real, 3> d{};
        for (std::size_t k = 0; k < 3; ++k)
            for (std::size_t j = 0; j < up[k].size(); ++j) d[k] += up[k][j] - down[k][j];
        return d;
    }

    /// Unweighted (type, delay, group) losses at the unshifted parameters.
    std::array<Real, 3> losses() const {
        const auto terms = loss_terms();
        std::array<Real, 3> l{};
        for (std::size_t k = 0; k < 3; ++k)
            for (const Real v : terms[k]) l[k] += v;
        return l;
    }

    using Terms = std::array<std::vector<Real>, 3>;

    /// Loss as per-sample, per-class terms, already divided by batch size.
    Terms loss_terms() const {
        const Mat h1 = recur(proj_, MtsModel::L1Wh);
        const auto& wx2 = spec(MtsModel::L2Wx);
        const auto& b2 = spec(MtsModel::L2b);
        Mat proj2(wx2.rows, h1.cols());
        for (Eigen::Index j = 0; j < h1.cols(); ++j)
            for (Eigen::Index r = 0; r < wx2.rows; ++r) {
                Real acc = params_(b2.offset + r);
                for (Eigen::Index c = 0; c < wx2.cols; ++c) acc += params_(wx2.offset + r + c * wx2.rows) * h1(c, j);
                proj2(r, j) = acc;
            }
        const Mat h2 = recur(proj2, MtsModel::L2Wh);
        const Mat enc = h2.rightCols(bs_);
        Terms terms;
        bce_terms(branch(Branch::Type, enc), targets_.type, terms[0]);
        const Mat delay = branch(Branch::Delay, enc);
        for (int b = 0; b < bs_; ++b) {
            const Real e = std::abs(delay(0, b) - static_cast<Real>(targets_.delay(b)));
            terms[1].push_back((e + std::log1p(std::exp(-2 * e)) - std::log(Real{2})) / bs_);
        }
        bce_terms(branch(Branch::Group, enc), targets_.group, terms[2]);
        return terms;
    }

private:
    const TensorSpec& spec(int id) const { return model_.tensors()[static_cast<std::size_t>(id)]; }
    Real p(const TensorSpec& s, Eigen::Index r, Eigen::Index c) const { return params_(s.offset + r + c * s.rows); }
    static Real sig(Real v) { return 1 / (1 + std::exp(-v)); }

    Mat recur(const Mat& proj, int wh_id) const {
        const auto& wh = spec(wh_id);
        const Eigen::Index h = wh.cols;
        Mat hs = Mat::Zero(h, proj.cols());
        Mat cell = Mat::Zero(h, bs_);
        for (int t = 0; t < steps_; ++t) {
            for (int b = 0; b < bs_; ++b) {
                const Eigen::Index col = static_cast<Eigen::Index>(t) * bs_ + b;
                for (Eigen::Index u = 0; u < h; ++u) {
                    Real z[4];
                    for (int g = 0; g < 4; ++g) {
                        const Eigen::Index r = g * h + u;
                        Real acc = proj(r, col);
                        if (t > 0)
                            for (Eigen::Index k = 0; k < h; ++k) acc += p(wh, r, k) * hs(k, col - bs_);
                        z[g] = acc;
                    }
                    const Real c_prev = t > 0 ? cell(u, b) : Real{0};
                    const Real c_new = sig(z[0]) * std::tanh(z[2]) + sig(z[1]) * c_prev;
                    hs(u, col) = sig(z[3]) * std::tanh(c_new);
                    cell(u, b) = c_new;
                }
            }
        }
        return hs;
    }

    Mat dense(const Mat& in, int w_id, bool relu) const {
        const auto& w = spec(w_id);
        const auto& bias = spec(w_id + 1);
        Mat out(w.rows, in.cols());
        for (Eigen::Index j = 0; j < in.cols(); ++j)
            for (Eigen::Index r = 0; r < w.rows; ++r) {
                Real acc = params_(bias.offset + r);
                for (Eigen::Index c = 0; c < w.cols; ++c) acc += p(w, r, c) * in(c, j);
                out(r, j) = relu && acc < 0 ? Real{0} : acc;
            }
        return out;
    }

    Mat branch(Branch br, const Mat& enc) const {
        const int base = MtsModel::branch_tensor(br, 0);
        return dense(dense(dense(enc, base, true), base + 2, true), base + 4, false);
    }

    void bce_terms(const Mat& logits, const std::vector<int>& targets, std::vector<Real>& out) const {
        const Real lo = kProbClamp, hi = 1 - static_cast<Real>(kProbClamp);
        for (Eigen::Index b = 0; b < logits.cols(); ++b)
            for (Eigen::Index c = 0; c < logits.rows(); ++c) {
                const Real pc = std::clamp(sig(logits(c, b)), lo, hi);
                const Real v = targets[static_cast<std::size_t>(b)] == c ? std::log(pc) : std::log1p(-pc);
                out.push_back(-v / static_cast<Real>(logits.cols()));
            }
    }

    Terms shifted_terms(Eigen::Index i, Real delta) {
        const auto& wx = spec(MtsModel::L1Wx);
        const auto& b1 = spec(MtsModel::L1b);
        Terms out;
        if (i >= wx.offset && i < wx.offset + wx.rows * wx.cols) {
            const Eigen::Index r = (i - wx.offset) % wx.rows, c = (i - wx.offset) / wx.rows;
            const Mat saved = proj_.row(r);
            proj_.row(r) += delta * x_.row(c);
            out = loss_terms();
            proj_.row(r) = saved;
        } else if (i >= b1.offset && i < b1.offset + b1.rows) {
            const Eigen::Index r = i - b1.offset;
            const Mat saved = proj_.row(r);
            proj_.row(r).array() += delta;
            out = loss_terms();
            proj_.row(r) = saved;
        } else {
            const Real orig = params_(i);
            params_(i) = orig + delta;
            out = loss_terms();
            params_(i) = orig;
        }
        return out;
    }

    const MtsModel& model_;
    int steps_, bs_;
    const BatchTargets& targets_;
    Eigen::Matrix<Real, Eigen::Dynamic, 1> params_;
    Mat x_, proj_;
};

}  // namespace detail

/// Central finite differences (step `h`) against the analytic gradient over
/// every parameter, one report per weight setting. The perturbed losses are
/// evaluated once and shared by all settings.
inline std::vector<GradCheckReport> grad_check(const MtsModel& model, const SequenceBatch& batch,
                                               const BatchTargets& targets, const std::vector<LossWeights>& settings,
                                               double h = 1e-5) {
    if (model.config().dropout > 0.0) throw ValidationError("grad_check: dropout must be 0");
    std::vector<Eigen::VectorXd> analytic(settings.size());
    for (std::size_t k = 0; k < settings.size(); ++k)
        model.loss_and_gradient(batch, targets, settings[k], nullptr, analytic[k]);
    detail::ExtendedLoss ext(model, batch, targets);
    std::vector<GradCheckReport> reps(settings.size());
    const Eigen::Index n = model.parameter_count();
    for (auto& r : reps) r.parameters = n;
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto d = ext.difference(i, h);
        for (std::size_t k = 0; k < settings.size(); ++k) {
            const auto& w = settings[k];
            const long double diff = w.type * d[0] + w.delay * d[1] + w.group * d[2];
            const double numeric = static_cast<double>(diff / (2.0L * h));
            const double err = relative_error(analytic[k](i), numeric);
            if (err > reps[k].max_rel_error) {
                reps[k].max_rel_error = err;
                reps[k].worst_index = i;
            }
        }
    }
    for (auto& r : reps) {
        if (r.worst_index < 0) continue;
        for (const auto& s : model.tensors())
            if (r.worst_index >= s.offset && r.worst_index < s.offset + s.rows * s.cols) r.worst_tensor = s.name;
    }
    return reps;
}

inline GradCheckReport grad_check(const MtsModel& model, const SequenceBatch& batch, const BatchTargets& targets,
                                  const LossWeights& w, double h = 1e-5) {
    return grad_check(model, batch, targets, std::vector<LossWeights>{w}, h).front();
}

/// Random dense batch for gradient checks.
inline std::pair<SequenceBatch, BatchTargets> random_batch(const MtsConfig& cfg, int steps, int bs, std::uint64_t seed) {
    Rng rng(seed);
    SequenceBatch batch{steps, bs, Eigen::MatrixXd(cfg.input_dim, static_cast<Eigen::Index>(steps) * bs)};
    for (Eigen::Index j = 0; j < batch.x.cols(); ++j)
        for (Eigen::Index i = 0; i < batch.x.rows(); ++i) batch.x(i, j) = standard_normal(rng);
    BatchTargets t;
    t.delay.resize(bs);
    for (int b = 0; b < bs; ++b) {
        t.type.push_back(static_cast<int>(uniform_index(rng, static_cast<std::size_t>(cfg.num_types))));
        t.group.push_back(static_cast<int>(uniform_index(rng, static_cast<std::size_t>(cfg.num_groups))));
        t.delay(b) = uniform_real(rng, 0.0, 30.0);
    }
    return {std::move(batch), std::move(t)};
}

}  // namespace gitevolve
