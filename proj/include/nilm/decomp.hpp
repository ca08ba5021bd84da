#pragma once

// PCA, FastICA and the fused PCA+ICA ("ICPC") feature transform.
//
// Data matrices are m x n with one observation per row. PCA diagonalises
// the sample covariance S = X~'X~ / (m-1). FastICA runs on PCA-whitened
// data with the fixed-point update
//
//     u <- E{ x g(u'x) } - E{ g'(u'x) } u,   u <- u / |u|
//
// applied to all components in parallel, followed by symmetric
// decorrelation U <- U (U'U)^(-1/2). The fused transform concatenates
// PCA scores with the ICA components ranked by ascending excess kurtosis
// and standardises every column with training statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "nilm/error.hpp"
#include "nilm/rng.hpp"

namespace nilm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

struct CenteredData {
    Matrix data;
    RowVector mean;
};

inline CenteredData mean_center(const Matrix& x) {
    detail::require<InvalidArgument>(x.rows() >= 2, "mean_center: need at least 2 rows");
    CenteredData out;
    out.mean = x.colwise().mean();
    out.data = x.rowwise() - out.mean;
    return out;
}

/// Eigen-decomposition of a sample covariance, eigenvalues descending.
struct CovarianceSpectrum {
    Vector eigenvalues;
    Matrix eigenvectors;  // columns match eigenvalues
    Eigen::Index n_rows = 0;
};

inline CovarianceSpectrum covariance_spectrum(const Matrix& centered) {
    detail::require<InvalidArgument>(centered.rows() >= 2, "covariance: need at least 2 rows");
    const Matrix s = (centered.transpose() * centered) / static_cast<double>(centered.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Matrix> solver(s);
    if (solver.info() != Eigen::Success) throw NumericError("covariance eigensolver did not converge");
    CovarianceSpectrum spec;
    const auto n = s.rows();
    spec.eigenvalues = solver.eigenvalues().reverse();
    spec.eigenvectors = solver.eigenvectors().rowwise().reverse();
    // fix each eigenvector's sign so its largest-magnitude entry is positive
    for (Eigen::Index j = 0; j < n; ++j) {
        Eigen::Index arg = 0;
        spec.eigenvectors.col(j).cwiseAbs().maxCoeff(&arg);
        if (spec.eigenvectors(arg, j) < 0.0) spec.eigenvectors.col(j) *= -1.0;
    }
    spec.n_rows = centered.rows();
    return spec;
}

/// Smallest component count whose eigenvalues explain `fraction` of the
/// total variance, clamped to [1, cap].
inline int components_for_variance(const Vector& eigenvalues, double fraction, int cap) {
    const double total = eigenvalues.cwiseMax(0.0).sum();
    int k = 0;
    double acc = 0.0;
    if (total > 0.0) {
        while (k < eigenvalues.size()) {
            acc += std::max(eigenvalues[k], 0.0);
            ++k;
            if (acc >= fraction * total) break;
        }
    }
    return std::clamp(k, 1, std::max(1, cap));
}

struct PcaModel {
    RowVector mean;
    Matrix basis;        // n x k_pca, orthonormal columns
    Vector eigenvalues;  // k_pca, descending

    Eigen::Index n_features() const { return basis.rows(); }
    Eigen::Index n_components() const { return basis.cols(); }
};

inline PcaModel pca_fit(const CovarianceSpectrum& spec, int k_pca) {
    const auto n = spec.eigenvectors.rows();
    const auto limit = std::min<Eigen::Index>(spec.n_rows - 1, n);
    if (k_pca < 1 || k_pca > limit)
        throw InvalidArgument("pca_fit: k_pca=" + std::to_string(k_pca) + " outside [1, " + std::to_string(limit) + "]");
    PcaModel m;
    m.mean = RowVector::Zero(n);
    m.basis = spec.eigenvectors.leftCols(k_pca);
    m.eigenvalues = spec.eigenvalues.head(k_pca).cwiseMax(0.0);
    return m;
}

/// Fits PCA on already-centred data; the returned mean is zero and the
/// caller keeps the real one.
inline PcaModel pca_fit(const Matrix& centered, int k_pca) {
    const auto limit = std::min<Eigen::Index>(centered.rows() - 1, centered.cols());
    if (k_pca < 1 || k_pca > limit)
        throw InvalidArgument("pca_fit: k_pca=" + std::to_string(k_pca) + " outside [1, " + std::to_string(limit) + "]");
    return pca_fit(covariance_spectrum(centered), k_pca);
}

inline Matrix pca_transform(const PcaModel& model, const Matrix& centered) {
    if (centered.cols() != model.n_features())
        throw InvalidArgument("pca_transform: expected " + std::to_string(model.n_features()) + " columns, got " +
                              std::to_string(centered.cols()));
    return centered * model.basis;
}

enum class Nonlinearity { logcosh, cubic };

inline std::string to_string(Nonlinearity g) { return g == Nonlinearity::logcosh ? "logcosh" : "cubic"; }

inline Nonlinearity nonlinearity_from_string(const std::string& s) {
    if (s == "logcosh") return Nonlinearity::logcosh;
    if (s == "cubic") return Nonlinearity::cubic;
    throw InvalidArgument("unknown ICA nonlinearity '" + s + "' (expected logcosh|cubic)");
}

struct IcaOptions {
    int k_ica = 1;
    Nonlinearity nonlinearity = Nonlinearity::logcosh;
    int max_iter = 400;
    double tol = 1e-5;
    std::uint64_t seed = 0;
};

struct IcaModel {
    Matrix whitening;  // n x k_ica, PCA whitening restricted to the retained directions
    Matrix unmixing;   // k_ica x k_ica, unit-norm columns u_i in whitened space
    int n_components = 0;
    int iterations = 0;

    /// Combined n x k_ica map from centred data to component scores.
    Matrix projection() const { return whitening * unmixing; }
};

namespace detail {

inline void symmetric_decorrelate(Matrix& w) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(w.transpose() * w);
    if (es.info() != Eigen::Success) throw NumericError("FastICA: decorrelation eigensolver failed");
    const Vector inv_sqrt = es.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
    w = w * (es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose());
}

inline void contrast(Nonlinearity g, const Matrix& y, Matrix& gy, RowVector& mean_dg) {
    if (g == Nonlinearity::logcosh) {
        gy = y.array().tanh().matrix();
        mean_dg = (1.0 - gy.array().square()).matrix().colwise().mean();
    } else {
        gy = y.array().cube().matrix();
        mean_dg = (3.0 * y.array().square()).matrix().colwise().mean();
    }
}

}  // namespace detail

inline IcaModel ica_fit(const Matrix& centered, const CovarianceSpectrum& spec, const IcaOptions& opt) {
    const auto limit = std::min<Eigen::Index>(centered.rows() - 1, centered.cols());
    if (opt.k_ica < 1 || opt.k_ica > limit)
        throw InvalidArgument("ica_fit: k_ica=" + std::to_string(opt.k_ica) + " outside [1, " + std::to_string(limit) + "]");
    detail::require<InvalidArgument>(opt.tol > 0.0, "ica_fit: tol must be > 0");
    detail::require<InvalidArgument>(opt.max_iter >= 1, "ica_fit: max_iter must be >= 1");
    const int k = opt.k_ica;

    IcaModel model;
    model.n_components = k;
    const Vector lambda = spec.eigenvalues.head(k).cwiseMax(1e-10);
    model.whitening = spec.eigenvectors.leftCols(k) * lambda.cwiseSqrt().cwiseInverse().asDiagonal();
    const Matrix xw = centered * model.whitening;
    const double m = static_cast<double>(centered.rows());

    Rng rng(opt.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix u(k, k);
    for (Eigen::Index j = 0; j < k; ++j)
        for (Eigen::Index i = 0; i < k; ++i) u(i, j) = normal(rng);
    detail::symmetric_decorrelate(u);

    Matrix gy;
    RowVector mean_dg;
    double worst = 0.0;
    for (int it = 1; it <= opt.max_iter; ++it) {
        detail::contrast(opt.nonlinearity, xw * u, gy, mean_dg);
        Matrix next = (xw.transpose() * gy) / m - u * mean_dg.asDiagonal();
        next.colwise().normalize();
        detail::symmetric_decorrelate(next);
        worst = (1.0 - (next.transpose() * u).diagonal().cwiseAbs().array()).abs().maxCoeff();
        u = std::move(next);
        if (!u.allFinite()) throw NumericError("FastICA: non-finite unmixing matrix at iteration " + std::to_string(it));
        if (worst < opt.tol) {
            model.iterations = it;
            break;
        }
    }
    if (model.iterations == 0) {
        std::ostringstream msg;
        msg << "FastICA did not converge after " << opt.max_iter << " iterations (max 1-|<u_new,u_old>| = " << worst
            << ", tol = " << opt.tol << ")";
        throw NumericError(msg.str());
    }
    for (Eigen::Index j = 0; j < k; ++j) {
        Eigen::Index arg = 0;
        u.col(j).cwiseAbs().maxCoeff(&arg);
        if (u(arg, j) < 0.0) u.col(j) *= -1.0;
    }
    model.unmixing = std::move(u);
    return model;
}

inline IcaModel ica_fit(const Matrix& centered, const IcaOptions& opt) {
    const auto limit = std::min<Eigen::Index>(centered.rows() - 1, centered.cols());
    if (opt.k_ica < 1 || opt.k_ica > limit)
        throw InvalidArgument("ica_fit: k_ica=" + std::to_string(opt.k_ica) + " outside [1, " + std::to_string(limit) + "]");
    return ica_fit(centered, covariance_spectrum(centered), opt);
}

inline Matrix ica_transform(const IcaModel& model, const Matrix& centered) {
    if (centered.cols() != model.whitening.rows())
        throw InvalidArgument("ica_transform: expected " + std::to_string(model.whitening.rows()) +
                              " columns, got " + std::to_string(centered.cols()));
    return (centered * model.whitening) * model.unmixing;
}

/// Excess kurtosis with population moments: E[(z-mu)^4]/sigma^4 - 3.
inline double kurtosis(std::span<const double> z) {
    detail::require<InvalidArgument>(z.size() >= 4, "kurtosis: need at least 4 values");
    const double n = static_cast<double>(z.size());
    const double mu = std::accumulate(z.begin(), z.end(), 0.0) / n;
    double m2 = 0.0, m4 = 0.0;
    for (double v : z) {
        const double d2 = (v - mu) * (v - mu);
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    if (!(m2 > 0.0)) throw InvalidArgument("kurtosis: zero variance");
    return m4 / (m2 * m2) - 3.0;
}

struct KurtosisSelection {
    Matrix selected;                  // m x r, columns in ascending-kurtosis order
    std::vector<std::size_t> order;   // full permutation of component indices
    std::vector<double> kurtosis;     // kurtosis of order[j], ascending
};

/// Orders components by ascending excess kurtosis (ties by index) and keeps
/// the first r.
inline KurtosisSelection rank_select_ica(const Matrix& z, int r) {
    if (r < 1 || r > z.cols())
        throw InvalidArgument("rank_select_ica: r=" + std::to_string(r) + " outside [1, " + std::to_string(z.cols()) + "]");
    std::vector<double> kappa(static_cast<std::size_t>(z.cols()));
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
        const Vector col = z.col(j);
        kappa[static_cast<std::size_t>(j)] = kurtosis(std::span<const double>(col.data(), static_cast<std::size_t>(col.size())));
    }
    KurtosisSelection sel;
    sel.order.resize(kappa.size());
    std::iota(sel.order.begin(), sel.order.end(), std::size_t{0});
    std::stable_sort(sel.order.begin(), sel.order.end(), [&](std::size_t a, std::size_t b) { return kappa[a] < kappa[b]; });
    for (auto i : sel.order) sel.kurtosis.push_back(kappa[i]);
    sel.selected.resize(z.rows(), r);
    for (int j = 0; j < r; ++j) sel.selected.col(j) = z.col(static_cast<Eigen::Index>(sel.order[static_cast<std::size_t>(j)]));
    return sel;
}

struct Standardized {
    Matrix data;
    RowVector mean;
    RowVector std;  // population standard deviation
};

inline Standardized standardize(const Matrix& x) {
    detail::require<InvalidArgument>(x.rows() >= 1, "standardize: empty matrix");
    Standardized out;
    out.mean = x.colwise().mean();
    const Matrix c = x.rowwise() - out.mean;
    out.std = (c.colwise().squaredNorm() / static_cast<double>(x.rows())).cwiseSqrt();
    for (Eigen::Index j = 0; j < x.cols(); ++j)
        if (!(out.std[j] > 1e-12 * std::max(1.0, std::abs(out.mean[j]))))
            throw InvalidArgument("feature column " + std::to_string(j) + " has zero variance");
    out.data = c.array().rowwise() / out.std.array();
    return out;
}

/// [X_pca | X_ica], standardised column-wise.
inline Standardized fuse_and_normalize(const Matrix& x_pca, const Matrix& x_ica) {
    if (x_pca.size() && x_ica.size() && x_pca.rows() != x_ica.rows())
        throw InvalidArgument("fuse_and_normalize: row count mismatch");
    Matrix fused(std::max(x_pca.rows(), x_ica.rows()), x_pca.cols() + x_ica.cols());
    if (x_pca.cols()) fused.leftCols(x_pca.cols()) = x_pca;
    if (x_ica.cols()) fused.rightCols(x_ica.cols()) = x_ica;
    return standardize(fused);
}

enum class FusionMode { icpc, pca, ica };

inline std::string to_string(FusionMode m) {
    switch (m) {
        case FusionMode::icpc: return "icpc";
        case FusionMode::pca: return "pca";
        case FusionMode::ica: return "ica";
    }
    return "icpc";
}

inline FusionMode fusion_mode_from_string(const std::string& s) {
    if (s == "icpc") return FusionMode::icpc;
    if (s == "pca") return FusionMode::pca;
    if (s == "ica") return FusionMode::ica;
    throw InvalidArgument("unknown fusion mode '" + s + "'");
}

/// Zero for k_pca / k_ica / r means "derive": k_pca from the explained
/// variance target (capped), k_ica = k_pca, r = k_ica.
struct FusionParams {
    FusionMode mode = FusionMode::icpc;
    int k_pca = 0;
    int k_ica = 0;
    int r = 0;
    double explained_variance = 0.95;
    int max_components = 40;
    Nonlinearity nonlinearity = Nonlinearity::logcosh;
    int max_iter = 400;
    double tol = 1e-5;
    std::uint64_t seed = 0;
};

struct FusionTransform {
    FusionParams params;  // with derived dimensions filled in
    PcaModel pca;
    IcaModel ica;
    std::vector<std::size_t> kurtosis_order;
    std::vector<double> kurtosis_values;
    int r = 0;
    RowVector feature_mean;
    RowVector feature_std;

    bool uses_pca() const { return params.mode != FusionMode::ica; }
    bool uses_ica() const { return params.mode != FusionMode::pca; }
    Eigen::Index output_dim() const { return feature_mean.size(); }
    Eigen::Index input_dim() const { return pca.mean.size(); }
};

namespace detail {

inline Matrix select_columns(const Matrix& z, const std::vector<std::size_t>& order, int r) {
    Matrix out(z.rows(), r);
    for (int j = 0; j < r; ++j) out.col(j) = z.col(static_cast<Eigen::Index>(order[static_cast<std::size_t>(j)]));
    return out;
}

}  // namespace detail

/// Fits the fused transform on raw training rows. When `features` is
/// non-null it receives the standardised training features.
inline FusionTransform fit_fusion(const Matrix& x_raw, FusionParams params, Matrix* features = nullptr) {
    const CenteredData centered = mean_center(x_raw);
    const CovarianceSpectrum spec = covariance_spectrum(centered.data);
    const int limit = static_cast<int>(std::min<Eigen::Index>(x_raw.rows() - 1, x_raw.cols()));
    const int auto_k =
        std::min(components_for_variance(spec.eigenvalues, params.explained_variance, params.max_components), limit);
    if (params.k_pca == 0) params.k_pca = auto_k;
    if (params.k_ica == 0) params.k_ica = params.mode == FusionMode::icpc ? params.k_pca : auto_k;
    if (params.r == 0) params.r = params.k_ica;

    FusionTransform t;
    t.params = params;
    Matrix x_pca, x_ica;
    if (t.uses_pca()) {
        t.pca = pca_fit(spec, params.k_pca);
        x_pca = pca_transform(t.pca, centered.data);
    } else {
        t.pca.basis.resize(x_raw.cols(), 0);
        t.pca.eigenvalues.resize(0);
    }
    t.pca.mean = centered.mean;
    if (t.uses_ica()) {
        IcaOptions io{params.k_ica, params.nonlinearity, params.max_iter, params.tol, params.seed};
        t.ica = ica_fit(centered.data, spec, io);
        const Matrix z = ica_transform(t.ica, centered.data);
        KurtosisSelection sel = rank_select_ica(z, params.r);
        t.kurtosis_order = std::move(sel.order);
        t.kurtosis_values = std::move(sel.kurtosis);
        t.r = params.r;
        x_ica = std::move(sel.selected);
    }
    Standardized st = fuse_and_normalize(x_pca, x_ica);
    t.feature_mean = st.mean;
    t.feature_std = st.std;
    if (features) *features = std::move(st.data);
    return t;
}

/// Applies a fitted transform to new rows without refitting anything.
inline Matrix apply_fusion(const FusionTransform& t, const Matrix& x_raw) {
    if (x_raw.cols() != t.input_dim())
        throw InvalidArgument("apply_fusion: expected " + std::to_string(t.input_dim()) + " columns, got " +
                              std::to_string(x_raw.cols()));
    const Matrix centered = x_raw.rowwise() - t.pca.mean;
    Matrix fused(x_raw.rows(), t.output_dim());
    if (t.uses_pca()) fused.leftCols(t.pca.n_components()) = pca_transform(t.pca, centered);
    if (t.uses_ica()) fused.rightCols(t.r) = detail::select_columns(ica_transform(t.ica, centered), t.kurtosis_order, t.r);
    return (fused.rowwise() - t.feature_mean).array().rowwise() / t.feature_std.array();
}

// ---- serialisation --------------------------------------------------------

inline nlohmann::json matrix_to_json(const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
    Matrix m(j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
    const auto& data = j.at("data");
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index k = 0; k < m.cols(); ++k) m(i, k) = data.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(k)).get<double>();
    return m;
}

template <class V>
nlohmann::json vector_to_json(const V& v) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline constexpr int kFusionFormatVersion = 1;

inline nlohmann::json fusion_to_json(const FusionTransform& t) {
    const auto& p = t.params;
    return {
        {"format", "nilm-fusion-transform"},
        {"version", kFusionFormatVersion},
        {"mode", to_string(p.mode)},
        {"k_pca", p.k_pca},
        {"k_ica", p.k_ica},
        {"r", t.r},
        {"explained_variance", p.explained_variance},
        {"max_components", p.max_components},
        {"nonlinearity", to_string(p.nonlinearity)},
        {"max_iter", p.max_iter},
        {"tol", p.tol},
        {"seed", p.seed},
        {"pca", {{"mean", vector_to_json(t.pca.mean)}, {"basis", matrix_to_json(t.pca.basis)}, {"eigenvalues", vector_to_json(t.pca.eigenvalues)}}},
        {"ica", {{"whitening", matrix_to_json(t.ica.whitening)}, {"unmixing", matrix_to_json(t.ica.unmixing)}, {"iterations", t.ica.iterations}}},
        {"kurtosis_order", t.kurtosis_order},
        {"kurtosis_values", t.kurtosis_values},
        {"feature_mean", vector_to_json(t.feature_mean)},
        {"feature_std", vector_to_json(t.feature_std)},
    };
}

inline FusionTransform fusion_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "nilm-fusion-transform") throw DataError("not a fusion transform file");
    if (j.at("version").get<int>() != kFusionFormatVersion)
        throw DataError("unsupported fusion transform version " + j.at("version").dump());
    auto row_vector = [](const nlohmann::json& a) {
        const auto v = a.get<std::vector<double>>();
        return RowVector(Eigen::Map<const RowVector>(v.data(), static_cast<Eigen::Index>(v.size())));
    };
    FusionTransform t;
    auto& p = t.params;
    p.mode = fusion_mode_from_string(j.at("mode").get<std::string>());
    p.k_pca = j.at("k_pca").get<int>();
    p.k_ica = j.at("k_ica").get<int>();
    p.r = j.at("r").get<int>();
    p.explained_variance = j.at("explained_variance").get<double>();
    p.max_components = j.at("max_components").get<int>();
    p.nonlinearity = nonlinearity_from_string(j.at("nonlinearity").get<std::string>());
    p.max_iter = j.at("max_iter").get<int>();
    p.tol = j.at("tol").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    t.pca.mean = row_vector(j.at("pca").at("mean"));
    t.pca.basis = matrix_from_json(j.at("pca").at("basis"));
    t.pca.eigenvalues = row_vector(j.at("pca").at("eigenvalues")).transpose();
    t.ica.whitening = matrix_from_json(j.at("ica").at("whitening"));
    t.ica.unmixing = matrix_from_json(j.at("ica").at("unmixing"));
    t.ica.iterations = j.at("ica").at("iterations").get<int>();
    t.ica.n_components = static_cast<int>(t.ica.unmixing.cols());
    t.kurtosis_order = j.at("kurtosis_order").get<std::vector<std::size_t>>();
    t.kurtosis_values = j.at("kurtosis_values").get<std::vector<double>>();
    t.r = j.at("r").get<int>();
    t.feature_mean = row_vector(j.at("feature_mean"));
    t.feature_std = row_vector(j.at("feature_std"));
    return t;
}

}  // namespace nilm
