#pragma once

// Residual feed-forward multi-label classifier.
//
//   h_0     = x W_in' + b_in
//   h_{l+1} = LayerNorm(h_l + Dropout(W2 ReLU(W1 h_l + b1) + b2))   (n_blocks times)
//   logits  = h_L W_o' + b_o
//
// Trained with mean binary cross-entropy and Adam; an output is active when
// sigmoid(logit) > threshold. All parameters (and the Adam moments) live in
// one flat float64 buffer; ResFfnLayout maps named tensors onto it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "nilm/decomp.hpp"
#include "nilm/error.hpp"
#include "nilm/eval.hpp"
#include "nilm/io.hpp"
#include "nilm/rng.hpp"

namespace nilm {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::size_t resffn_parameter_count(std::size_t input_dim, std::size_t hidden, std::size_t n_blocks,
                                          std::size_t n_classes) {
    const std::size_t block = 2 * (hidden * hidden + hidden) + 2 * hidden;
    return input_dim * hidden + hidden + n_blocks * block + hidden * n_classes + n_classes;
}

/// Width whose total parameter count lands closest to `target`
/// (smaller width on ties).
inline int derive_hidden_dim(int input_dim, int n_blocks, int n_classes, std::size_t target = 65000) {
    int best = 1;
    std::size_t best_gap = std::numeric_limits<std::size_t>::max();
    for (int h = 1; h <= 4096; ++h) {
        const std::size_t c = resffn_parameter_count(static_cast<std::size_t>(input_dim), static_cast<std::size_t>(h),
                                                     static_cast<std::size_t>(n_blocks), static_cast<std::size_t>(n_classes));
        const std::size_t gap = c > target ? c - target : target - c;
        if (gap < best_gap) {
            best_gap = gap;
            best = h;
        }
        if (c > target) break;
    }
    return best;
}

struct ResFfnConfig {
    int input_dim = 80;
    int hidden_dim = 0;  // 0: derive from target_params
    int n_blocks = 18;
    int n_classes = 15;
    double dropout_p = 0.1;
    double threshold = 0.5;
    std::size_t target_params = 65000;

    int hidden() const { return hidden_dim > 0 ? hidden_dim : derive_hidden_dim(input_dim, n_blocks, n_classes, target_params); }

    void validate() const {
        detail::require<InvalidArgument>(input_dim >= 1, "ResFfnConfig.input_dim must be >= 1");
        detail::require<InvalidArgument>(hidden_dim >= 0, "ResFfnConfig.hidden_dim must be >= 0");
        detail::require<InvalidArgument>(n_blocks >= 1, "ResFfnConfig.n_blocks must be >= 1");
        detail::require<InvalidArgument>(n_classes >= 1, "ResFfnConfig.n_classes must be >= 1");
        detail::require<InvalidArgument>(dropout_p >= 0.0 && dropout_p < 1.0, "ResFfnConfig.dropout_p must be in [0, 1)");
        detail::require<InvalidArgument>(threshold > 0.0 && threshold < 1.0, "ResFfnConfig.threshold must be in (0, 1)");
    }

    nlohmann::json to_json() const {
        return {{"input_dim", input_dim}, {"hidden_dim", hidden()}, {"n_blocks", n_blocks}, {"n_classes", n_classes},
                {"dropout_p", dropout_p}, {"threshold", threshold}, {"target_params", target_params}};
    }

    static ResFfnConfig from_json(const nlohmann::json& j) {
        ResFfnConfig c;
        c.input_dim = j.at("input_dim").get<int>();
        c.hidden_dim = j.at("hidden_dim").get<int>();
        c.n_blocks = j.at("n_blocks").get<int>();
        c.n_classes = j.at("n_classes").get<int>();
        c.dropout_p = j.at("dropout_p").get<double>();
        c.threshold = j.at("threshold").get<double>();
        c.target_params = j.value("target_params", std::size_t{65000});
        return c;
    }
};

/// Named tensors in the flat parameter buffer. Order: input.weight,
/// input.bias, then per block fc1.weight, fc1.bias, fc2.weight, fc2.bias,
/// norm.gain, norm.bias, then head.weight, head.bias. Weights are stored
/// row-major as (out x in).
class ResFfnLayout {
public:
    struct Tensor {
        std::string name;
        Eigen::Index rows = 0;
        Eigen::Index cols = 0;
        std::size_t offset = 0;
        std::size_t size() const { return static_cast<std::size_t>(rows * cols); }
    };

    enum Part : std::size_t { fc1_w = 0, fc1_b, fc2_w, fc2_b, norm_gain, norm_bias, n_parts };

    ResFfnLayout() = default;

    explicit ResFfnLayout(const ResFfnConfig& cfg) {
        const Eigen::Index h = cfg.hidden(), in = cfg.input_dim, c = cfg.n_classes;
        add("input.weight", h, in);
        add("input.bias", 1, h);
        for (int b = 0; b < cfg.n_blocks; ++b) {
            const std::string p = "blocks." + std::to_string(b) + ".";
            add(p + "fc1.weight", h, h);
            add(p + "fc1.bias", 1, h);
            add(p + "fc2.weight", h, h);
            add(p + "fc2.bias", 1, h);
            add(p + "norm.gain", 1, h);
            add(p + "norm.bias", 1, h);
        }
        add("head.weight", c, h);
        add("head.bias", 1, c);
        n_blocks_ = static_cast<std::size_t>(cfg.n_blocks);
    }

    const std::vector<Tensor>& tensors() const { return tensors_; }
    std::size_t total() const { return total_; }
    std::size_t n_blocks() const { return n_blocks_; }

    static constexpr std::size_t input_w = 0, input_b = 1;
    std::size_t block(std::size_t b, Part part) const { return 2 + b * n_parts + part; }
    std::size_t head_w() const { return 2 + n_blocks_ * n_parts; }
    std::size_t head_b() const { return head_w() + 1; }

private:
    void add(std::string name, Eigen::Index rows, Eigen::Index cols) {
        tensors_.push_back({std::move(name), rows, cols, total_});
        total_ += static_cast<std::size_t>(rows * cols);
    }

    std::vector<Tensor> tensors_;
    std::size_t total_ = 0;
    std::size_t n_blocks_ = 0;
};

/// A flat buffer interpreted through a layout.
struct TensorBuffer {
    std::vector<double> values;

    Eigen::Map<RowMatrix> view(const ResFfnLayout& layout, std::size_t t) {
        const auto& d = layout.tensors()[t];
        return {values.data() + d.offset, d.rows, d.cols};
    }
    Eigen::Map<const RowMatrix> view(const ResFfnLayout& layout, std::size_t t) const {
        const auto& d = layout.tensors()[t];
        return {values.data() + d.offset, d.rows, d.cols};
    }
    Eigen::Map<RowVector> row(const ResFfnLayout& layout, std::size_t t) {
        const auto& d = layout.tensors()[t];
        return {values.data() + d.offset, static_cast<Eigen::Index>(d.size())};
    }
    Eigen::Map<const RowVector> row(const ResFfnLayout& layout, std::size_t t) const {
        const auto& d = layout.tensors()[t];
        return {values.data() + d.offset, static_cast<Eigen::Index>(d.size())};
    }
};

struct ClassifierParams {
    ResFfnConfig config;
    ResFfnLayout layout;
    TensorBuffer weights;
    TensorBuffer adam_m;
    TensorBuffer adam_v;
    std::uint64_t step = 0;

    std::size_t parameter_count() const { return layout.total(); }
};

/// Uniform fan-in initialisation U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for
/// dense weights and biases; layer-norm gain 1, bias 0.
inline ClassifierParams init_params(ResFfnConfig cfg, std::uint64_t seed) {
    cfg.validate();
    cfg.hidden_dim = cfg.hidden();
    ClassifierParams p;
    p.config = cfg;
    p.layout = ResFfnLayout(cfg);
    p.weights.values.assign(p.layout.total(), 0.0);
    p.adam_m.values.assign(p.layout.total(), 0.0);
    p.adam_v.values.assign(p.layout.total(), 0.0);
    Rng rng(seed);
    auto fill = [&](std::size_t w, std::size_t b) {
        const auto fan_in = static_cast<double>(p.layout.tensors()[w].cols);
        std::uniform_real_distribution<double> u(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
        for (auto t : {w, b}) {
            auto v = p.weights.row(p.layout, t);
            for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = u(rng);
        }
    };
    fill(ResFfnLayout::input_w, ResFfnLayout::input_b);
    for (std::size_t b = 0; b < p.layout.n_blocks(); ++b) {
        fill(p.layout.block(b, ResFfnLayout::fc1_w), p.layout.block(b, ResFfnLayout::fc1_b));
        fill(p.layout.block(b, ResFfnLayout::fc2_w), p.layout.block(b, ResFfnLayout::fc2_b));
        p.weights.row(p.layout, p.layout.block(b, ResFfnLayout::norm_gain)).setOnes();
        p.weights.row(p.layout, p.layout.block(b, ResFfnLayout::norm_bias)).setZero();
    }
    fill(p.layout.head_w(), p.layout.head_b());
    return p;
}

enum class Mode { train, eval };

inline constexpr double kLayerNormEps = 1e-5;

struct BlockCache {
    Matrix input;    // h_l
    Matrix pre_act;  // W1 h + b1
    Matrix act;      // ReLU(pre_act)
    Matrix mask;     // inverted-dropout scale per element; empty when inactive
    Matrix normed;   // x-hat of the layer norm
    Vector inv_std;  // per row
};

struct ForwardCache {
    Matrix input;
    std::vector<BlockCache> blocks;
    Matrix last_hidden;
    std::uint64_t step = 0;
    Mode mode = Mode::eval;
    bool valid = false;
};

struct ForwardResult {
    Matrix logits;
    ForwardCache cache;
};

/// Forward pass. Dropout is applied only in train mode, drawing masks from
/// `rng`, or taken from `fixed_masks` (one per block) when given.
inline ForwardResult forward(const ClassifierParams& p, const Matrix& x, Mode mode, Rng* rng = nullptr,
                             const std::vector<Matrix>* fixed_masks = nullptr) {
    const auto& L = p.layout;
    const auto& W = p.weights;
    if (x.cols() != p.config.input_dim)
        throw InvalidArgument("forward: input width " + std::to_string(x.cols()) + " != input_dim " +
                              std::to_string(p.config.input_dim));
    const bool dropout = mode == Mode::train && p.config.dropout_p > 0.0;
    if (dropout && !rng && !fixed_masks) throw InvalidArgument("forward: train mode with dropout needs an rng");

    ForwardResult r;
    r.cache.input = x;
    Matrix h = (x * W.view(L, ResFfnLayout::input_w).transpose()).rowwise() + W.row(L, ResFfnLayout::input_b);
    std::bernoulli_distribution keep(1.0 - p.config.dropout_p);
    const double scale = 1.0 / (1.0 - p.config.dropout_p);
    const double n = static_cast<double>(p.config.hidden());
    r.cache.blocks.resize(L.n_blocks());
    for (std::size_t b = 0; b < L.n_blocks(); ++b) {
        auto& c = r.cache.blocks[b];
        c.input = h;
        c.pre_act = (h * W.view(L, L.block(b, ResFfnLayout::fc1_w)).transpose()).rowwise() +
                    W.row(L, L.block(b, ResFfnLayout::fc1_b));
        c.act = c.pre_act.cwiseMax(0.0);
        Matrix d = (c.act * W.view(L, L.block(b, ResFfnLayout::fc2_w)).transpose()).rowwise() +
                   W.row(L, L.block(b, ResFfnLayout::fc2_b));
        if (dropout) {
            if (fixed_masks) {
                c.mask = (*fixed_masks)[b];
            } else {
                c.mask.resize(d.rows(), d.cols());
                for (Eigen::Index j = 0; j < d.cols(); ++j)
                    for (Eigen::Index i = 0; i < d.rows(); ++i) c.mask(i, j) = keep(*rng) ? scale : 0.0;
            }
            d = d.cwiseProduct(c.mask);
        }
        const Matrix s = h + d;
        const Vector mu = s.rowwise().mean();
        const Matrix centered = s.colwise() - mu;
        c.inv_std = ((centered.rowwise().squaredNorm() / n).array() + kLayerNormEps).rsqrt().matrix();
        c.normed = centered.array().colwise() * c.inv_std.array();
        h = (c.normed.array().rowwise() * W.row(L, L.block(b, ResFfnLayout::norm_gain)).array()).matrix().rowwise() +
            W.row(L, L.block(b, ResFfnLayout::norm_bias));
    }
    r.cache.last_hidden = h;
    r.logits = (h * W.view(L, L.head_w()).transpose()).rowwise() + W.row(L, L.head_b());
    if (!r.logits.allFinite()) throw NumericError("forward: non-finite logits");
    r.cache.step = p.step;
    r.cache.mode = mode;
    r.cache.valid = true;
    return r;
}

inline double sigmoid(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

inline void check_binary(const Matrix& targets) {
    if (!(targets.array() == 0.0 || targets.array() == 1.0).all()) throw InvalidArgument("targets must be 0 or 1");
}

/// Mean BCE over all N x C entries using max(z,0) - z*y + log1p(exp(-|z|)).
inline double bce_loss(const Matrix& logits, const Matrix& targets) {
    if (logits.rows() != targets.rows() || logits.cols() != targets.cols())
        throw InvalidArgument("bce_loss: shape mismatch");
    check_binary(targets);
    double acc = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j)
        for (Eigen::Index i = 0; i < logits.rows(); ++i) {
            const double z = logits(i, j);
            acc += std::max(z, 0.0) - z * targets(i, j) + std::log1p(std::exp(-std::abs(z)));
        }
    return acc / static_cast<double>(logits.size());
}

/// Analytic gradient of bce_loss(forward(x), targets) with respect to every
/// parameter, in the same flat layout as the weights.
inline TensorBuffer backward(const ClassifierParams& p, const ForwardCache& cache, const Matrix& targets) {
    const auto& L = p.layout;
    const auto& W = p.weights;
    if (!cache.valid) throw InvalidState("backward: cache is empty");
    if (cache.step != p.step) throw InvalidState("backward: cache was produced before the last parameter update");
    if (cache.blocks.size() != L.n_blocks() || cache.input.cols() != p.config.input_dim)
        throw InvalidState("backward: cache does not match this network");
    if (targets.rows() != cache.input.rows() || targets.cols() != p.config.n_classes)
        throw InvalidArgument("backward: targets shape mismatch");
    check_binary(targets);

    TensorBuffer g;
    g.values.assign(L.total(), 0.0);
    const Matrix& hl = cache.last_hidden;
    const Matrix logits = (hl * W.view(L, L.head_w()).transpose()).rowwise() + W.row(L, L.head_b());
    Matrix dz = logits.unaryExpr([](double z) { return sigmoid(z); }) - targets;
    dz /= static_cast<double>(targets.size());

    g.view(L, L.head_w()) = dz.transpose() * hl;
    g.row(L, L.head_b()) = dz.colwise().sum();
    Matrix dh = dz * W.view(L, L.head_w());

    const double n = static_cast<double>(p.config.hidden());
    for (std::size_t bi = L.n_blocks(); bi-- > 0;) {
        const auto& c = cache.blocks[bi];
        g.row(L, L.block(bi, ResFfnLayout::norm_gain)) = dh.cwiseProduct(c.normed).colwise().sum();
        g.row(L, L.block(bi, ResFfnLayout::norm_bias)) = dh.colwise().sum();
        const Matrix dxhat = dh.array().rowwise() * W.row(L, L.block(bi, ResFfnLayout::norm_gain)).array();
        const Vector mean_d = dxhat.rowwise().sum() / n;
        const Vector mean_dx = dxhat.cwiseProduct(c.normed).rowwise().sum() / n;
        Matrix ds = (dxhat.colwise() - mean_d) - (c.normed.array().colwise() * mean_dx.array()).matrix();
        ds = ds.array().colwise() * c.inv_std.array();

        Matrix da2 = c.mask.size() ? Matrix(ds.cwiseProduct(c.mask)) : ds;
        g.view(L, L.block(bi, ResFfnLayout::fc2_w)) = da2.transpose() * c.act;
        g.row(L, L.block(bi, ResFfnLayout::fc2_b)) = da2.colwise().sum();
        Matrix da1 = (da2 * W.view(L, L.block(bi, ResFfnLayout::fc2_w))).cwiseProduct(
            (c.pre_act.array() > 0.0).cast<double>().matrix());
        g.view(L, L.block(bi, ResFfnLayout::fc1_w)) = da1.transpose() * c.input;
        g.row(L, L.block(bi, ResFfnLayout::fc1_b)) = da1.colwise().sum();
        dh = ds + da1 * W.view(L, L.block(bi, ResFfnLayout::fc1_w));
    }
    g.view(L, ResFfnLayout::input_w) = dh.transpose() * cache.input;
    g.row(L, ResFfnLayout::input_b) = dh.colwise().sum();
    return g;
}

struct AdamOptions {
    double lr = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected Adam update in place; increments the step counter.
inline void adam_step(ClassifierParams& p, const TensorBuffer& grads, const AdamOptions& opt = {}) {
    if (grads.values.size() != p.weights.values.size()) throw InvalidArgument("adam_step: gradient size mismatch");
    detail::require<InvalidArgument>(opt.lr >= 0.0, "adam_step: lr must be >= 0");
    for (std::size_t i = 0; i < grads.values.size(); ++i)
        if (!std::isfinite(grads.values[i]))
            throw NumericError("adam_step: non-finite gradient at flat index " + std::to_string(i) + " (step " +
                               std::to_string(p.step) + ")");
    ++p.step;
    const double t = static_cast<double>(p.step);
    const double c1 = 1.0 - std::pow(opt.beta1, t);
    const double c2 = 1.0 - std::pow(opt.beta2, t);
    auto& w = p.weights.values;
    auto& m = p.adam_m.values;
    auto& v = p.adam_v.values;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = grads.values[i];
        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
        w[i] -= opt.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt.eps);
    }
}

struct Prediction {
    Matrix probabilities;
    LabelMatrix labels;
};

/// Eval-mode forward; label = 1 iff sigmoid(logit) > threshold.
inline Prediction predict(const ClassifierParams& p, const Matrix& x, std::optional<double> threshold = std::nullopt) {
    const double tau = threshold.value_or(p.config.threshold);
    const Matrix logits = forward(p, x, Mode::eval).logits;
    Prediction out;
    out.probabilities = logits.unaryExpr([](double z) { return sigmoid(z); });
    out.labels.assign(static_cast<std::size_t>(logits.rows()), LabelRow(static_cast<std::size_t>(logits.cols()), 0));
    for (Eigen::Index i = 0; i < logits.rows(); ++i)
        for (Eigen::Index j = 0; j < logits.cols(); ++j)
            out.labels[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = out.probabilities(i, j) > tau ? 1 : 0;
    return out;
}

inline LabelMatrix to_label_matrix(const Matrix& y) {
    LabelMatrix out(static_cast<std::size_t>(y.rows()), LabelRow(static_cast<std::size_t>(y.cols()), 0));
    for (Eigen::Index i = 0; i < y.rows(); ++i)
        for (Eigen::Index j = 0; j < y.cols(); ++j) out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = y(i, j) != 0.0;
    return out;
}

// ---- training -------------------------------------------------------------

struct TrainOptions {
    int epochs = 150;
    int batch_size = 128;
    AdamOptions adam{};
    std::uint64_t seed = 0;
    int stop_after_epoch = 0;  // > 0: return after this many completed epochs (resumable)
};

struct EpochRecord {
    int epoch = 0;
    double train_bce = 0.0, train_f1 = 0.0;
    double val_bce = 0.0, val_f1 = 0.0;
};

struct TrainState {
    ClassifierParams params;
    ClassifierParams best;
    double best_val_f1 = -1.0;
    int best_epoch = 0;
    int epochs_done = 0;
    std::vector<EpochRecord> history;
};

struct LabeledMatrix {
    Matrix x;
    Matrix y;
};

inline std::pair<double, double> evaluate_split(const ClassifierParams& p, const LabeledMatrix& split) {
    const Matrix logits = forward(p, split.x, Mode::eval).logits;
    LabelMatrix pred(static_cast<std::size_t>(logits.rows()), LabelRow(static_cast<std::size_t>(logits.cols())));
    for (Eigen::Index i = 0; i < logits.rows(); ++i)
        for (Eigen::Index j = 0; j < logits.cols(); ++j)
            pred[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = sigmoid(logits(i, j)) > p.config.threshold;
    return {bce_loss(logits, split.y), f1_mean(pred, to_label_matrix(split.y))};
}

inline TrainState start_training(const ClassifierParams& initial) {
    TrainState s;
    s.params = initial;
    s.best = initial;
    return s;
}

/// Runs epochs `state.epochs_done+1 .. opt.epochs`. Each epoch shuffles
/// with a stream seeded by (seed, epoch) and draws dropout masks from a
/// second stream seeded by (seed, epoch, 1), so a run resumed at an epoch
/// boundary reproduces an uninterrupted one exactly. After each epoch the
/// full train and validation splits are scored in eval mode; the
/// parameters with the best validation F1 are kept in `state.best`.
inline void train(TrainState& state, const LabeledMatrix& train_set, const LabeledMatrix& val_set,
                  const TrainOptions& opt, const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    detail::require<InvalidArgument>(train_set.x.rows() > 0, "train: empty training split");
    detail::require<InvalidArgument>(val_set.x.rows() > 0, "train: empty validation split");
    detail::require<InvalidArgument>(opt.batch_size >= 1, "train: batch_size must be >= 1");
    detail::require<InvalidArgument>(train_set.x.rows() == train_set.y.rows(), "train: x/y row mismatch");
    if (train_set.x.cols() != state.params.config.input_dim)
        throw InvalidArgument("train: feature width " + std::to_string(train_set.x.cols()) + " != input_dim " +
                              std::to_string(state.params.config.input_dim));
    auto& p = state.params;
    const auto m = static_cast<std::size_t>(train_set.x.rows());
    std::vector<Eigen::Index> order(m);
    for (int epoch = state.epochs_done + 1; epoch <= opt.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), Eigen::Index{0});
        Rng shuffle_rng(derive_seed(opt.seed, {static_cast<std::uint64_t>(epoch)}));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        Rng dropout_rng(derive_seed(opt.seed, {static_cast<std::uint64_t>(epoch), 1}));
        for (std::size_t start = 0; start < m; start += static_cast<std::size_t>(opt.batch_size)) {
            const std::size_t end = std::min(m, start + static_cast<std::size_t>(opt.batch_size));
            const std::vector<Eigen::Index> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                order.begin() + static_cast<std::ptrdiff_t>(end));
            const Matrix xb = train_set.x(idx, Eigen::all);
            const Matrix yb = train_set.y(idx, Eigen::all);
            const ForwardResult fr = forward(p, xb, Mode::train, &dropout_rng);
            adam_step(p, backward(p, fr.cache, yb), opt.adam);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        std::tie(rec.train_bce, rec.train_f1) = evaluate_split(p, train_set);
        std::tie(rec.val_bce, rec.val_f1) = evaluate_split(p, val_set);
        if (!std::isfinite(rec.train_bce)) throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
        if (rec.val_f1 > state.best_val_f1) {
            state.best_val_f1 = rec.val_f1;
            state.best_epoch = epoch;
            state.best = p;
        }
        state.history.push_back(rec);
        state.epochs_done = epoch;
        if (on_epoch) on_epoch(rec);
        if (opt.stop_after_epoch > 0 && epoch >= opt.stop_after_epoch) break;
    }
}

// ---- checkpoint -----------------------------------------------------------
//
// Layout (all integers and floats little-endian):
//   8 bytes  magic "NILMCKPT"
//   u32      format version
//   u64      length L of the JSON header
//   L bytes  JSON header: config, step, tensor table, caller metadata
//   f64[P]   weights, then Adam first moments, then Adam second moments,
//            then (if header.has_best) the best-validation weights;
//            each array follows the tensor table order.

inline constexpr char kCheckpointMagic[8] = {'N', 'I', 'L', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json tensor_table(const ResFfnLayout& layout) {
    nlohmann::json t = nlohmann::json::array();
    for (const auto& d : layout.tensors()) t.push_back({{"name", d.name}, {"shape", {d.rows, d.cols}}});
    return t;
}

inline void write_checkpoint(const std::filesystem::path& path, const ClassifierParams& p,
                             const ClassifierParams* best = nullptr, nlohmann::json meta = nlohmann::json::object()) {
    meta["config"] = p.config.to_json();
    meta["step"] = p.step;
    meta["parameter_count"] = p.parameter_count();
    meta["tensors"] = tensor_table(p.layout);
    meta["has_best"] = best != nullptr;
    const std::string header = meta.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, 8);
    io::write_u32_le(out, kCheckpointVersion);
    io::write_u64_le(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    io::write_f64_le(out, p.weights.values);
    io::write_f64_le(out, p.adam_m.values);
    io::write_f64_le(out, p.adam_v.values);
    if (best) io::write_f64_le(out, best->weights.values);
}

struct Checkpoint {
    ClassifierParams params;
    std::optional<ClassifierParams> best;
    nlohmann::json meta;
};

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw DataError(path.string() + ": not a checkpoint");
    const auto version = io::read_u32_le(in);
    if (version != kCheckpointVersion) throw DataError(path.string() + ": unsupported checkpoint version");
    const auto len = io::read_u64_le(in);
    std::string header(len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(len));
    Checkpoint ck;
    try {
        ck.meta = nlohmann::json::parse(header);
        auto& p = ck.params;
        p.config = ResFfnConfig::from_json(ck.meta.at("config"));
        p.layout = ResFfnLayout(p.config);
        p.step = ck.meta.at("step").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": bad checkpoint header: " + e.what());
    }
    auto& p = ck.params;
    for (auto* buf : {&p.weights, &p.adam_m, &p.adam_v}) {
        buf->values.resize(p.layout.total());
        io::read_f64_le(in, buf->values);
    }
    if (ck.meta.value("has_best", false)) {
        ClassifierParams b = p;
        io::read_f64_le(in, b.weights.values);
        ck.best = std::move(b);
    }
    return ck;
}

}  // namespace nilm
