#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "koopsos/edmd.hpp"
#include "koopsos/polycore.hpp"
#include "koopsos/simkit.hpp"

using namespace koopsos;

namespace {

Polynomial x(int i) { return Polynomial::variable(3, i); }

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double e : v) out[i++] = e;
  return out;
}

Polynomial random_poly(std::mt19937_64& gen, int dim, int degree) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const Dictionary d = monomials_up_to(dim, degree);
  Eigen::VectorXd c(static_cast<Eigen::Index>(d.size()));
  for (Eigen::Index i = 0; i < c.size(); ++i) c[i] = normal(gen);
  return d.combine(c);
}

// xdot = -x, optionally with xdot = -x + u held constant over each step.
SnapshotDataset decay_dataset(int n, double tau, bool with_input) {
  SnapshotDataset d;
  d.state_dim = 1;
  d.input_dim = with_input ? 1 : 0;
  d.tau = tau;
  d.x.resize(1, n);
  d.u.resize(d.input_dim, n);
  d.y.resize(1, n);
  const double e = std::exp(-tau);
  for (int k = 0; k < n; ++k) {
    const double xk = -1.0 + 2.0 * (k + 0.5) / n;
    const double uk = with_input ? std::sin(3.0 * k) : 0.0;
    d.x(0, k) = xk;
    if (with_input) d.u(0, k) = uk;
    d.y(0, k) = e * xk + (1.0 - e) * uk;
  }
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// polycore

TEST(Polycore, AdditionMergesLikeTerms) {
  const Polynomial p = 2.0 * (x(0) * x(1)) + x(2);
  const Polynomial q = 3.0 * (x(0) * x(1));
  EXPECT_EQ(p + q, 5.0 * (x(0) * x(1)) + x(2));
}

TEST(Polycore, SquareOfSum) {
  const Polynomial s = x(0) + x(1);
  EXPECT_EQ(s * s, x(0) * x(0) + 2.0 * (x(0) * x(1)) + x(1) * x(1));
}

TEST(Polycore, Evaluate) {
  const Polynomial p = 2.0 * (x(0) * x(1)) + x(2);
  EXPECT_DOUBLE_EQ(p.evaluate(vec({1.0, 2.0, -1.0})), 3.0);
}

TEST(Polycore, CancellationRemovesTerms) {
  const Polynomial p = x(0) * x(1) - x(1) * x(0);
  EXPECT_TRUE(p.is_zero());
}

TEST(Polycore, GradientOfPendulumLyapunov) {
  PendulumParams params;
  const auto grad = pendulum_lyapunov(params).gradient();
  ASSERT_EQ(grad.size(), 3u);
  EXPECT_EQ(grad[0], Polynomial::constant(3, -1.0) - 3.0 * params.alpha * (x(0) * x(0)));
  EXPECT_TRUE(grad[1].is_zero());
  EXPECT_EQ(grad[2], x(2));
}

TEST(Polycore, RingLaws) {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    const Polynomial a = random_poly(gen, 3, 2);
    const Polynomial b = random_poly(gen, 3, 2);
    const Polynomial c = random_poly(gen, 3, 2);
    const Eigen::VectorXd pt = vec({uni(gen), uni(gen), uni(gen)});
    EXPECT_NEAR(((a + b) * c).evaluate(pt), (a * c + b * c).evaluate(pt), 1e-12);
    EXPECT_NEAR((a * b).evaluate(pt), (b * a).evaluate(pt), 1e-12);
    EXPECT_NEAR(((a * b) * c).evaluate(pt), (a * (b * c)).evaluate(pt), 1e-11);
    EXPECT_NEAR((a * b).evaluate(pt), a.evaluate(pt) * b.evaluate(pt), 1e-12);
  }
}

TEST(Polycore, GradientMatchesFiniteDifferences) {
  std::mt19937_64 gen(5);
  const Polynomial p = random_poly(gen, 3, 4);
  const Eigen::VectorXd pt = vec({0.3, -0.7, 0.2});
  const auto grad = p.gradient();
  const double h = 1e-6;
  for (int i = 0; i < 3; ++i) {
    Eigen::VectorXd up = pt, dn = pt;
    up[i] += h;
    dn[i] -= h;
    EXPECT_NEAR(grad[static_cast<std::size_t>(i)].evaluate(pt), (p.evaluate(up) - p.evaluate(dn)) / (2 * h), 1e-7);
  }
}

TEST(Polycore, DimensionMismatchThrows) {
  EXPECT_THROW(x(0) + Polynomial::variable(2, 0), InputError);
  EXPECT_THROW(Monomial(std::vector<int>{1, -1}), InputError);
}

TEST(Polycore, DictionarySizes) {
  EXPECT_EQ(build_dictionary(3, {3, 1, 3}).size(), 32u);
  EXPECT_EQ(build_dictionary(3, {4, 1, 4}).size(), 50u);
  EXPECT_EQ(monomials_up_to(2, 2).size(), 6u);
  EXPECT_EQ(monomials_up_to(1, 3).size(), 4u);
}

TEST(Polycore, DictionaryAtUprightIsPureCosinePowers) {
  const Dictionary phi = build_dictionary(3, {3, 1, 3});
  const Eigen::VectorXd v = phi.evaluate(vec({1.0, 0.0, 0.0}));
  for (std::size_t i = 0; i < phi.size(); ++i) {
    const bool pure = phi[i][1] == 0 && phi[i][2] == 0;
    EXPECT_EQ(v[static_cast<Eigen::Index>(i)], pure ? 1.0 : 0.0) << phi[i].to_string();
  }
}

TEST(Polycore, LyapunovLiesInPhiSpan) {
  const PendulumParams params;
  const Polynomial v = pendulum_lyapunov(params);
  const Dictionary phi = build_dictionary(3, {3, 1, 3});
  const Eigen::VectorXd c = phi.coefficients_of(v);
  EXPECT_EQ(linear_combination(c, phi), v);
  EXPECT_DOUBLE_EQ(c[static_cast<Eigen::Index>(*phi.index_of(Monomial::constant(3)))], 1.0 + params.alpha);
}

TEST(Polycore, CoefficientsOutsideDictionaryThrow) {
  const Dictionary d = monomials_up_to(3, 1);
  EXPECT_THROW(d.coefficients_of(x(0) * x(1)), InputError);
}

TEST(Polycore, CombineAndEvaluateAreDual) {
  std::mt19937_64 gen(11);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Dictionary d = build_dictionary(3, {2, 1, 2});
  Eigen::VectorXd c(static_cast<Eigen::Index>(d.size()));
  for (Eigen::Index i = 0; i < c.size(); ++i) c[i] = normal(gen);
  const Eigen::VectorXd pt = vec({0.4, -0.1, 1.3});
  EXPECT_NEAR(linear_combination(c, d).evaluate(pt), c.dot(dict_eval(d, pt)), 1e-12);
}

TEST(Polycore, JsonRoundTrip) {
  const Polynomial p = 212.5755 * (x(0) * x(1)) + 54.1296 * (x(0) * x(2)) - 1e-300 * x(2);
  EXPECT_EQ(polynomial_from_json(to_json(p)), p);
  const Dictionary d = build_dictionary(3, {3, 1, 3});
  EXPECT_EQ(dictionary_from_json(to_json(d)).entries(), d.entries());
  const SemialgebraicSet s = pendulum_domain(PendulumParams{}, 4.0);
  const SemialgebraicSet back = semialgebraic_set_from_json(to_json(s));
  EXPECT_EQ(back.inequalities, s.inequalities);
  EXPECT_EQ(back.equalities, s.equalities);
}

TEST(Polycore, SetMembership) {
  const SemialgebraicSet d = pendulum_domain(PendulumParams{});
  EXPECT_TRUE(d.contains(lift(0.0, 0.0)));
  EXPECT_TRUE(d.contains(lift(std::numbers::pi, 3.0)));
  EXPECT_FALSE(d.contains(lift(std::numbers::pi / 2, 0.0)));
  EXPECT_FALSE(d.contains(vec({0.5, 0.0, 0.0})));
}

// ---------------------------------------------------------------------------
// edmd

TEST(Edmd, LiftedInputColumn) {
  SnapshotDataset d;
  d.state_dim = 1;
  d.input_dim = 1;
  d.tau = 0.1;
  d.x = Eigen::MatrixXd::Constant(1, 1, 2.0);
  d.u = Eigen::MatrixXd::Constant(1, 1, 3.0);
  d.y = Eigen::MatrixXd::Constant(1, 1, 1.0);
  const Eigen::MatrixXd psi = assemble_psi(d, monomials_up_to(1, 1));
  ASSERT_EQ(psi.rows(), 4);
  EXPECT_EQ(Eigen::VectorXd(psi.col(0)), vec({1.0, 2.0, 3.0, 6.0}));
}

TEST(Edmd, LinearFixtureIsExact) {
  const double tau = 0.01;
  const Dictionary d = monomials_up_to(1, 3);
  const KoopmanModel m = fit_koopman(decay_dataset(500, tau, false), d, d);
  EXPECT_TRUE(m.full_rank());
  for (int k = 0; k <= 3; ++k) {
    for (int j = 0; j <= 3; ++j) EXPECT_NEAR(m.a(k, j), k == j ? std::exp(-k * tau) : 0.0, 1e-9);
  }
}

TEST(Edmd, ReplicatedDataGivesSameOperator) {
  const Dictionary d = monomials_up_to(1, 3);
  SnapshotDataset data = decay_dataset(200, 0.05, false);
  const KoopmanModel once = fit_koopman(data, d, d);
  data.append(decay_dataset(200, 0.05, false));
  const KoopmanModel twice = fit_koopman(data, d, d);
  EXPECT_LE((once.a - twice.a).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Edmd, ApplyKoopmanAdvancesObservable) {
  const double tau = 0.02;
  const Dictionary d = monomials_up_to(1, 2);
  const KoopmanModel m = fit_koopman(decay_dataset(100, tau, false), d, d);
  const Polynomial out = apply_koopman(m, vec({0.0, 1.0, 0.0}), Eigen::VectorXd(0));
  EXPECT_NEAR(out.coefficient(Monomial({1})), std::exp(-tau), 1e-12);
  EXPECT_NEAR(out.coefficient(Monomial({2})), 0.0, 1e-12);
}

TEST(Edmd, LieCoefficientOfSquare) {
  for (double tau : {0.1, 0.01, 0.001}) {
    const Dictionary d = monomials_up_to(1, 3);
    const LieModel lie(fit_koopman(decay_dataset(500, tau, false), d, d));
    const Polynomial l = lie_apply(lie, vec({0.0, 0.0, 1.0, 0.0}), Eigen::VectorXd(0));
    EXPECT_NEAR(l.coefficient(Monomial({2})), (std::exp(-2 * tau) - 1) / tau, 1e-8) << tau;
  }
  // frozen value at tau = 0.01
  EXPECT_NEAR((std::exp(-0.02) - 1) / 0.01, -1.98013, 1e-5);
}

TEST(Edmd, InputMatrixRecoversZeroOrderHoldGain) {
  const double tau = 0.05;
  const Dictionary d = monomials_up_to(1, 1);
  const KoopmanModel m = fit_koopman(decay_dataset(300, tau, true), d, d);
  ASSERT_EQ(m.input_dim(), 1);
  EXPECT_NEAR(m.a(1, 1), std::exp(-tau), 1e-10);
  EXPECT_NEAR(m.b[0](1, 0), 1.0 - std::exp(-tau), 1e-10);
  const LieDecomposition dec = lie_affine_decomposition(LieModel(m), vec({0.0, 1.0}));
  EXPECT_NEAR(dec.inputs[0].coefficient(Monomial({0})), (1.0 - std::exp(-tau)) / tau, 1e-8);
}

TEST(Edmd, DecompositionMatchesDirectApplication) {
  const Dictionary d = monomials_up_to(1, 1);
  const LieModel lie(fit_koopman(decay_dataset(300, 0.05, true), d, d));
  const Eigen::VectorXd c = vec({0.3, -1.2});
  const LieDecomposition dec = lie_affine_decomposition(lie, c);
  for (double u : {-1.0, 0.0, 0.7}) {
    const Eigen::VectorXd uv = vec({u});
    const Polynomial diff = dec.at(uv) - lie_apply(lie, c, uv);
    EXPECT_LE(diff.max_abs_coefficient(), 1e-10);
  }
}

TEST(Edmd, LieOperatorIsLinear) {
  const Dictionary d = monomials_up_to(1, 3);
  const LieModel lie(fit_koopman(decay_dataset(300, 0.02, false), d, d));
  const Eigen::VectorXd c1 = vec({1.0, 0.0, 2.0, 0.0});
  const Eigen::VectorXd c2 = vec({0.0, -1.0, 0.5, 3.0});
  const Eigen::VectorXd u(0);
  const Polynomial lhs = lie_apply(lie, 2.0 * c1 + c2, u);
  const Polynomial rhs = 2.0 * lie_apply(lie, c1, u) + lie_apply(lie, c2, u);
  EXPECT_LE((lhs - rhs).max_abs_coefficient(), 1e-9);
}

TEST(Edmd, FitMinimizesResidual) {
  std::mt19937_64 gen(17);
  std::normal_distribution<double> noise(0.0, 0.01);
  SnapshotDataset data = decay_dataset(200, 0.05, true);
  for (Eigen::Index k = 0; k < data.size(); ++k) data.y(0, k) += noise(gen);
  const Dictionary d = monomials_up_to(1, 2);
  const KoopmanModel m = fit_koopman(data, d, d);
  const Eigen::MatrixXd phi = assemble_phi(data, d);
  const Eigen::MatrixXd psi = assemble_psi(data, d);
  const Eigen::MatrixXd k = stacked_k(m);
  const double best = (phi - k * psi).norm();
  EXPECT_NEAR(best, m.fit_residual, 1e-12);
  std::normal_distribution<double> step(0.0, 1e-3);
  for (int trial = 0; trial < 5; ++trial) {
    Eigen::MatrixXd kp = k;
    for (Eigen::Index i = 0; i < kp.size(); ++i) kp.data()[i] += step(gen);
    EXPECT_GT((phi - kp * psi).norm(), best);
  }
}

TEST(Edmd, LengthMismatchThrows) {
  const Dictionary d = monomials_up_to(1, 1);
  const LieModel lie(fit_koopman(decay_dataset(50, 0.05, true), d, d));
  EXPECT_THROW(lie_apply(lie, vec({1.0}), vec({0.0})), InputError);
  EXPECT_THROW(lie_apply(lie, vec({1.0, 0.0}), Eigen::VectorXd(0)), InputError);
}

TEST(Edmd, DegenerateDataThrows) {
  SnapshotDataset data = decay_dataset(10, 0.1, false);
  data.x.setZero();
  data.y.setZero();
  const Dictionary odd(1, {Monomial({1})});
  EXPECT_THROW(fit_koopman(data, odd, odd), NumericalError);
}

TEST(Edmd, RankDeficiencyIsReported) {
  SnapshotDataset data = decay_dataset(10, 0.1, false);
  data.x.setConstant(0.5);
  const Dictionary d = monomials_up_to(1, 2);
  const KoopmanModel m = fit_koopman(data, d, d);
  EXPECT_FALSE(m.full_rank());
  EXPECT_EQ(m.svd_rank, 1);
}

TEST(Edmd, CsvRoundTripIsExact) {
  std::mt19937_64 gen(23);
  std::normal_distribution<double> normal(0.0, 1.0);
  SnapshotDataset data = decay_dataset(40, 0.01, true);
  for (Eigen::Index k = 0; k < data.size(); ++k) data.x(0, k) = normal(gen);
  const SnapshotDataset back = dataset_from_csv(dataset_to_csv(data), dataset_metadata(data));
  EXPECT_EQ(back.x, data.x);
  EXPECT_EQ(back.u, data.u);
  EXPECT_EQ(back.y, data.y);
  EXPECT_EQ(back.tau, data.tau);
  EXPECT_EQ(dataset_to_csv(data).substr(0, 12), "x_1,u_1,y_1\n");
}

TEST(Edmd, MalformedCsvThrows) {
  const nlohmann::json meta = {{"state_dim", 1}, {"input_dim", 0}, {"tau", 0.1}};
  EXPECT_THROW(dataset_from_csv("x_1,y_1\n1,abc\n", meta), InputError);
  EXPECT_THROW(dataset_from_csv("x_1,y_1\n1,2,3\n", meta), InputError);
}

TEST(Edmd, ModelJsonRoundTrip) {
  const Dictionary d = monomials_up_to(1, 2);
  const KoopmanModel m = fit_koopman(decay_dataset(100, 0.05, true), d, d);
  const KoopmanModel back = koopman_from_json(nlohmann::json::parse(to_json(m).dump()));
  EXPECT_EQ(back.a, m.a);
  ASSERT_EQ(back.b.size(), 1u);
  EXPECT_EQ(back.b[0], m.b[0]);
  EXPECT_EQ(back.tau, m.tau);
  EXPECT_EQ(back.svd_rank, m.svd_rank);
  EXPECT_EQ(back.psi.entries(), m.psi.entries());
}
