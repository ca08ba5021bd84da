#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "nilm/decomp.hpp"
#include "support/oracles.hpp"

using namespace nilm;
using oracle::abs_corr;
using oracle::matched_abs_corr;

namespace {

Matrix random_matrix(Eigen::Index m, Eigen::Index n, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Matrix x(m, n);
    for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index i = 0; i < m; ++i) x(i, j) = g(rng) * (1.0 + static_cast<double>(j));
    return x;
}

Matrix sub_super_sources(Eigen::Index m, Eigen::Index n, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-std::sqrt(3.0), std::sqrt(3.0));
    std::exponential_distribution<double> e(1.0);
    std::bernoulli_distribution sign(0.5);
    Matrix s(m, n);
    for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index i = 0; i < m; ++i)
            s(i, j) = j % 2 == 0 ? u(rng) : (sign(rng) ? 1.0 : -1.0) * e(rng) / std::sqrt(2.0);
    return s;
}

Matrix well_conditioned_mixing(Eigen::Index n, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    Matrix a = Matrix::Identity(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) a(i, j) += u(rng);
    return a;
}

}  // namespace

TEST(MeanCenter, Examples) {
    Matrix x(2, 2);
    x << 1, 2, 3, 4;
    const auto c = mean_center(x);
    EXPECT_TRUE(c.mean.isApprox(RowVector{{2.0, 3.0}}));
    Matrix expected(2, 2);
    expected << -1, -1, 1, 1;
    EXPECT_EQ(c.data, expected);

    const auto again = mean_center(c.data);
    EXPECT_EQ(again.data, c.data);
    EXPECT_EQ(again.mean, RowVector::Zero(2));

    Matrix k = random_matrix(5, 3, 1);
    k.col(1).setConstant(7.5);
    EXPECT_EQ(mean_center(k).data.col(1), Vector::Zero(5));
    EXPECT_LT(mean_center(random_matrix(40, 6, 2)).data.colwise().mean().cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_THROW(mean_center(Matrix(1, 3)), InvalidArgument);
}

TEST(PcaFit, PointsOnDiagonalLine) {
    Matrix x(5, 2);
    for (int i = 0; i < 5; ++i) x.row(i) << i - 2.0, i - 2.0;
    const auto full = pca_fit(x, 2);
    const auto m = pca_fit(x, 1);
    EXPECT_NEAR(m.basis(0, 0), 1.0 / std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(m.basis(1, 0), 1.0 / std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(full.eigenvalues[1], 0.0, 1e-12);
    EXPECT_NEAR(m.eigenvalues[0], 5.0, 1e-12);  // 2 * var(t) = 2 * 2.5
}

TEST(PcaFit, DiagonalCovariance) {
    const double s = std::sqrt(3.0 / 4.0);
    Matrix x(4, 2);
    x << 2 * s, s, 2 * s, -s, -2 * s, s, -2 * s, -s;
    const auto m = pca_fit(x, 2);
    EXPECT_NEAR(m.eigenvalues[0], 4.0, 1e-12);
    EXPECT_NEAR(m.eigenvalues[1], 1.0, 1e-12);
    EXPECT_TRUE(m.basis.isApprox(Matrix::Identity(2, 2), 1e-12));
}

TEST(PcaFit, TraceIdentityAndIndependentEigenvalues) {
    const Matrix x = mean_center(random_matrix(60, 8, 3)).data;
    const auto m = pca_fit(x, 8);
    const Matrix s = x.transpose() * x / 59.0;
    EXPECT_NEAR(m.eigenvalues.sum(), s.trace(), 1e-10);
    const auto expected = oracle::jacobi_eigenvalues(s);
    for (int i = 0; i < 8; ++i) EXPECT_NEAR(m.eigenvalues[i], expected[static_cast<std::size_t>(i)], 1e-10 * expected[0]);
}

TEST(PcaFit, RangeChecked) {
    const Matrix x = mean_center(random_matrix(5, 8, 4)).data;
    EXPECT_THROW(pca_fit(x, 0), InvalidArgument);
    EXPECT_THROW(pca_fit(x, 5), InvalidArgument);  // min(m-1, n) = 4
    EXPECT_NO_THROW(pca_fit(x, 4));
}

TEST(PcaFit, SignConventionLargestEntryPositive) {
    const auto m = pca_fit(mean_center(random_matrix(50, 6, 5)).data, 6);
    for (Eigen::Index j = 0; j < 6; ++j) {
        Eigen::Index arg;
        m.basis.col(j).cwiseAbs().maxCoeff(&arg);
        EXPECT_GT(m.basis(arg, j), 0.0);
    }
}

TEST(PcaTransform, ProjectionProperties) {
    const Matrix x = mean_center(random_matrix(80, 6, 6)).data;
    const auto m = pca_fit(x, 6);
    const RowVector v1 = m.basis.col(0).transpose();
    const Matrix p = pca_transform(m, v1);
    EXPECT_NEAR(p(0, 0), 1.0, 1e-12);
    EXPECT_LT(p.rightCols(5).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(pca_transform(m, Matrix::Zero(1, 6)), Matrix::Zero(1, 6));
    const Matrix xp = pca_transform(m, x);
    EXPECT_LT((xp * m.basis.transpose() - x).cwiseAbs().maxCoeff(), 1e-10);
    const Matrix cov = xp.transpose() * xp / 79.0;
    for (Eigen::Index i = 0; i < 6; ++i) {
        EXPECT_NEAR(cov(i, i), m.eigenvalues[i], 1e-8 * m.eigenvalues[i]);
        for (Eigen::Index j = 0; j < 6; ++j)
            if (i != j) EXPECT_LT(std::abs(cov(i, j)), 1e-8 * m.eigenvalues[0]);
    }
    EXPECT_THROW(pca_transform(m, Matrix::Zero(2, 5)), InvalidArgument);
}

TEST(PcaFit, OrthonormalBasis) {
    for (std::uint64_t seed : {10u, 11u, 12u}) {
        const auto m = pca_fit(mean_center(random_matrix(100, 12, seed)).data, 7);
        EXPECT_LT((m.basis.transpose() * m.basis - Matrix::Identity(7, 7)).cwiseAbs().maxCoeff(), 1e-8);
        for (Eigen::Index i = 1; i < 7; ++i) EXPECT_GE(m.eigenvalues[i - 1], m.eigenvalues[i]);
    }
}

TEST(IcaFit, RecoversTwoUniformSources) {
    Rng rng(21);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Matrix src(5000, 2);
    for (Eigen::Index i = 0; i < 5000; ++i) src.row(i) << u(rng), u(rng);
    Matrix a(2, 2);
    a << 1.0, 0.6, 0.3, 1.0;
    const Matrix x = mean_center(src * a.transpose()).data;
    IcaOptions opt;
    opt.k_ica = 2;
    opt.seed = 3;
    const auto model = ica_fit(x, opt);
    const Matrix z = ica_transform(model, x);
    for (Eigen::Index j = 0; j < 2; ++j) {
        const double c0 = abs_corr(z.col(j), src.col(0)), c1 = abs_corr(z.col(j), src.col(1));
        EXPECT_GE(std::max(c0, c1), 0.99);
    }
}

TEST(IcaFit, IndependentInputGivesSignedPermutation) {
    Matrix s = sub_super_sources(8000, 3, 22);
    s = mean_center(s).data;
    // make the sources exactly white so whitening is the identity map
    const auto spec = covariance_spectrum(s);
    s = s * spec.eigenvectors * spec.eigenvalues.cwiseSqrt().cwiseInverse().asDiagonal() * spec.eigenvectors.transpose();
    IcaOptions opt;
    opt.k_ica = 3;
    opt.seed = 8;
    const auto model = ica_fit(s, opt);
    const Matrix p = model.projection();
    for (Eigen::Index j = 0; j < 3; ++j) {
        const Vector col = p.col(j).cwiseAbs();
        Eigen::Index arg;
        col.maxCoeff(&arg);
        EXPECT_GT(col[arg], 0.98);
        EXPECT_LT((col.sum() - col[arg]), 0.2);
    }
}

TEST(IcaFit, GaussianDataHitsNonConvergencePath) {
    const Matrix g = mean_center(random_matrix(3000, 4, 31)).data;
    IcaOptions opt;
    opt.k_ica = 4;
    opt.max_iter = 3;
    opt.tol = 1e-12;
    try {
        ica_fit(g, opt);
        FAIL() << "expected non-convergence";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("did not converge after 3 iterations"), std::string::npos);
    }
}

TEST(IcaFit, RejectsBadArguments) {
    const Matrix x = mean_center(random_matrix(10, 3, 1)).data;
    IcaOptions opt;
    opt.k_ica = 4;
    EXPECT_THROW(ica_fit(x, opt), InvalidArgument);
    opt.k_ica = 2;
    opt.tol = 0.0;
    EXPECT_THROW(ica_fit(x, opt), InvalidArgument);
}

TEST(IcaFit, UnitNormDecorrelatedUnmixingAndUnitVariance) {
    const Matrix x = mean_center(sub_super_sources(6000, 5, 40) * well_conditioned_mixing(5, 41)).data;
    IcaOptions opt;
    opt.k_ica = 5;
    opt.seed = 2;
    const auto m = ica_fit(x, opt);
    for (Eigen::Index j = 0; j < 5; ++j) EXPECT_NEAR(m.unmixing.col(j).norm(), 1.0, 1e-12);
    EXPECT_LT((m.unmixing.transpose() * m.unmixing - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff(), 1e-6);
    const Matrix z = ica_transform(m, x);
    const Matrix cz = mean_center(z).data;
    for (Eigen::Index j = 0; j < 5; ++j) EXPECT_NEAR(cz.col(j).squaredNorm() / (z.rows() - 1.0), 1.0, 1e-6);
    EXPECT_EQ(ica_transform(m, Matrix::Zero(3, 5)), Matrix::Zero(3, 5));
    EXPECT_EQ(ica_transform(m, x.topRows(1)).cols(), 5);
    EXPECT_THROW(ica_transform(m, Matrix::Zero(1, 4)), InvalidArgument);
}

TEST(IcaFit, SourceRecoveryProperty) {
    for (Eigen::Index n : {3, 6}) {
        const Matrix s = sub_super_sources(5000, n, 50 + static_cast<std::uint64_t>(n));
        const Matrix x = mean_center(s * well_conditioned_mixing(n, 60 + static_cast<std::uint64_t>(n)).transpose()).data;
        IcaOptions opt;
        opt.k_ica = static_cast<int>(n);
        opt.seed = 9;
        const auto m = ica_fit(x, opt);
        EXPECT_GE(matched_abs_corr(ica_transform(m, x), s), 0.95) << "n=" << n;
    }
}

TEST(IcaFit, CubicNonlinearityAlsoSeparates) {
    Rng rng(70);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Matrix src(6000, 2);
    for (Eigen::Index i = 0; i < 6000; ++i) src.row(i) << u(rng), u(rng);
    const Matrix x = mean_center(src * well_conditioned_mixing(2, 71)).data;
    IcaOptions opt;
    opt.k_ica = 2;
    opt.nonlinearity = Nonlinearity::cubic;
    const auto m = ica_fit(x, opt);
    EXPECT_GE(matched_abs_corr(ica_transform(m, x), src), 0.99);
}

TEST(IcaFit, DeterministicForFixedSeed) {
    const Matrix x = mean_center(sub_super_sources(3000, 3, 80) * well_conditioned_mixing(3, 81)).data;
    IcaOptions opt;
    opt.k_ica = 3;
    opt.seed = 5;
    EXPECT_EQ(ica_fit(x, opt).unmixing, ica_fit(x, opt).unmixing);
}

TEST(Kurtosis, Examples) {
    Rng rng(90);
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> gs(200000), us(200000), two(1000);
    for (auto& v : gs) v = g(rng);
    for (auto& v : us) v = u(rng);
    for (std::size_t i = 0; i < two.size(); ++i) two[i] = i % 2 ? 1.0 : -1.0;
    EXPECT_NEAR(kurtosis(gs), 0.0, 0.1);
    EXPECT_NEAR(kurtosis(us), -1.2, 0.05);
    EXPECT_NEAR(kurtosis(two), -2.0, 1e-12);
    EXPECT_THROW(kurtosis(std::vector<double>(10, 3.0)), InvalidArgument);
    EXPECT_THROW(kurtosis(std::vector<double>{1, 2, 3}), InvalidArgument);
}

TEST(RankSelectIca, OrdersByAscendingKurtosis) {
    Rng rng(91);
    std::exponential_distribution<double> e(1.0);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Matrix z(4000, 3);
    for (Eigen::Index i = 0; i < z.rows(); ++i)
        z.row(i) << (i % 2 ? 1.0 : -1.0) * e(rng), (i % 2 ? 1.0 : -1.0), u(rng);  // ~+3, -2, -1.2
    const auto sel = rank_select_ica(z, 2);
    EXPECT_EQ(sel.order, (std::vector<std::size_t>{1, 2, 0}));
    EXPECT_EQ(sel.selected.col(0), z.col(1));
    EXPECT_EQ(sel.selected.col(1), z.col(2));
    EXPECT_TRUE(std::is_sorted(sel.kurtosis.begin(), sel.kurtosis.end()));
    EXPECT_EQ(rank_select_ica(z, 3).selected.cols(), 3);
    EXPECT_THROW(rank_select_ica(z, 0), InvalidArgument);
    EXPECT_THROW(rank_select_ica(z, 4), InvalidArgument);
}

TEST(RankSelectIca, TiesKeepIndexOrder) {
    Matrix z(100, 3);
    for (Eigen::Index i = 0; i < 100; ++i) z.row(i).setConstant(static_cast<double>(i % 7));
    EXPECT_EQ(rank_select_ica(z, 3).order, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(FuseAndNormalize, ShapeMomentsAndConstantColumn) {
    const Matrix a = random_matrix(50, 3, 92), b = random_matrix(50, 2, 93);
    const auto f = fuse_and_normalize(a, b);
    EXPECT_EQ(f.data.cols(), 5);
    EXPECT_LT(f.data.colwise().mean().cwiseAbs().maxCoeff(), 1e-10);
    const RowVector sd = (f.data.colwise().squaredNorm() / 50.0).cwiseSqrt();
    EXPECT_LT((sd.array() - 1.0).abs().maxCoeff(), 1e-10);
    Matrix c = b;
    c.col(1).setConstant(2.0);
    try {
        fuse_and_normalize(a, c);
        FAIL();
    } catch (const InvalidArgument& e) {
        EXPECT_NE(std::string(e.what()).find("column 4"), std::string::npos) << e.what();
    }
    EXPECT_THROW(fuse_and_normalize(a, random_matrix(49, 2, 1)), InvalidArgument);
}

namespace {

Matrix mixture_rows(Eigen::Index m, std::uint64_t seed) {
    const Matrix s = sub_super_sources(m, 4, seed);
    Rng rng(seed + 1);
    std::normal_distribution<double> g(0.0, 1.0);
    Matrix patterns(4, 30);
    for (Eigen::Index i = 0; i < patterns.size(); ++i) patterns.data()[i] = g(rng);
    Matrix x = s * patterns;
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] += 0.01 * g(rng) + 3.0;
    return x;
}

}  // namespace

TEST(Fusion, ApplyReproducesFitFeatures) {
    const Matrix x = mixture_rows(600, 100);
    FusionParams p;
    p.seed = 4;
    Matrix fitted;
    const auto t = fit_fusion(x, p, &fitted);
    EXPECT_EQ(t.params.k_ica, t.params.k_pca);
    EXPECT_EQ(t.r, t.params.k_ica);
    EXPECT_EQ(fitted.cols(), t.params.k_pca + t.r);
    EXPECT_LT((apply_fusion(t, x) - fitted).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_EQ(apply_fusion(t, x.topRows(1)).cols(), t.output_dim());
    EXPECT_TRUE(std::is_sorted(t.kurtosis_values.begin(), t.kurtosis_values.end()));
    for (double sd : t.feature_std) EXPECT_GT(sd, 0.0);
}

TEST(Fusion, HeldOutHalfIsStandardScale) {
    const Matrix x = mixture_rows(2000, 101);
    FusionParams p;
    p.k_pca = 4;
    const auto t = fit_fusion(x.topRows(1000), p);
    const Matrix f = apply_fusion(t, x.bottomRows(1000));
    EXPECT_TRUE(f.allFinite());
    EXPECT_LT(f.colwise().mean().cwiseAbs().maxCoeff(), 0.5);
}

TEST(Fusion, RowPermutationEquivariance) {
    const Matrix x = mixture_rows(500, 102);
    FusionParams p;
    p.k_pca = 3;
    const auto t = fit_fusion(x, p);
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(x.rows());
    perm.setIdentity();
    Rng rng(3);
    std::shuffle(perm.indices().data(), perm.indices().data() + perm.indices().size(), rng);
    EXPECT_EQ(apply_fusion(t, perm * x), perm * apply_fusion(t, x));
}

TEST(Fusion, ModesAndExplicitDimensions) {
    const Matrix x = mixture_rows(500, 103);
    FusionParams p;
    p.k_pca = 4;
    p.k_ica = 3;
    p.r = 2;
    EXPECT_EQ(fit_fusion(x, p).output_dim(), 6);
    p.mode = FusionMode::pca;
    EXPECT_EQ(fit_fusion(x, p).output_dim(), 4);
    p.mode = FusionMode::ica;
    EXPECT_EQ(fit_fusion(x, p).output_dim(), 2);
    p.r = 5;
    EXPECT_THROW(fit_fusion(x, p), InvalidArgument);
}

TEST(Fusion, AutoDimensionFollowsExplainedVariance) {
    Vector ev(5);
    ev << 50, 30, 15, 4, 1;
    EXPECT_EQ(components_for_variance(ev, 0.95, 40), 3);
    EXPECT_EQ(components_for_variance(ev, 0.96, 40), 4);
    EXPECT_EQ(components_for_variance(ev, 0.99, 2), 2);
}

TEST(Fusion, JsonRoundTripIsBitExact) {
    const Matrix x = mixture_rows(400, 104);
    const auto t = fit_fusion(x, FusionParams{});
    const std::string text = fusion_to_json(t).dump();
    const auto back = fusion_from_json(nlohmann::json::parse(text));
    EXPECT_EQ(fusion_to_json(back).dump(), text);
    EXPECT_EQ(apply_fusion(back, x), apply_fusion(t, x));
}
