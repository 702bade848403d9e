#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mixedray/transforms.hpp"

using namespace mixedray;

namespace {

Vec v3(double a, double b, double c) {
    Vec v(3);
    v << a, b, c;
    return v;
}

SymTensor random_sym(std::mt19937_64& rng, int k, int l) {
    std::normal_distribution<double> N;
    RawTensor<double> r(3, k, l);
    for (auto& v : r.c) v = N(rng);
    return SymTensor::from_raw(r);
}

AnalyticField constant(const SymTensor& f) {
    return {3, f.k(), f.l(), [f](const Vec&) { return f; }};
}

AnalyticField varying() {
    return {3, 2, 0, [](const Vec& z) {
                SymTensor f(3, 2, 0);
                f.set({0, 0}, z[0] * z[0]);
                f.set({0, 1}, std::sin(z[1]));
                f.set({1, 2}, z[2] + 0.3);
                f.set({2, 2}, std::exp(-z[1] * z[1]));
                return f;
            }};
}

ChartMetric unit_box(const std::string& spec) { return make_metric(spec, v3(0.05, -1, -1), v3(1, 1, 1), 2.0); }

}  // namespace

TEST(Projection, AnnihilatesAndFixes) {
    Vec w = v3(0.3, 1.0, -0.2), v = v3(0.0, 0.8, 0.6);
    Mat p = proj_p(w, v);
    EXPECT_LT((p * w).norm(), 1e-15);
    EXPECT_LT((p.transpose() * v).norm(), 1e-15);
    EXPECT_LT((p * p - p).norm(), 1e-15);
    Vec u = v3(1, 0, 0);  // ⟨u, v⟩ = 0 so u is fixed
    EXPECT_LT((p * u - u).norm(), 1e-15);
}

TEST(Projection, DegeneratePairingThrows) {
    EXPECT_THROW(proj_p(v3(1, 0, 0), v3(0, 1, 0)), DegeneratePairingError);
    EXPECT_THROW(proj_p(v3(1, 0, 0), v3(1e-7, 1, 0)), DegeneratePairingError);
    EXPECT_NO_THROW(proj_p(v3(1, 0, 0), v3(2e-6, 1, 0)));
    EXPECT_THROW(proj_P(v3(1, 1, 0), v3(0, 1, 0), SymTensor(3, 2, 2)), ValenceError);
}

TEST(Projection, TensorPMatchesIndexForm) {
    std::mt19937_64 rng(1);
    SymTensor f = random_sym(rng, 2, 0);
    Vec w = v3(0.3, 1.0, -0.2), v = v3(0.1, 0.8, 0.6);
    Mat p = proj_p(w, v);
    SymTensor Pf = proj_P(w, v, f);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) s += p(i, a) * p(j, b) * f({a, b});
            EXPECT_NEAR(Pf({i, j}), s, 1e-14);
        }
}

TEST(Lambda, ContractsLowerSlots) {
    std::mt19937_64 rng(2);
    SymTensor f = random_sym(rng, 2, 2);
    Vec w = v3(0.5, -1, 2);
    SymTensor g = lambda_contract(f, w);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) s += f({i, j, a, b}) * w[a] * w[b];
            EXPECT_NEAR(g({i, j}), s, 1e-13);
        }
}

TEST(Forward, ConstantFieldEuclideanOracle) {
    auto m = unit_box("euclidean");
    std::mt19937_64 rng(3);
    for (int l : {0, 2}) {
        SymTensor f = random_sym(rng, 2, l);
        auto field = constant(f);
        Ray r = make_ray(m, v3(0.5, 0.1, -0.2), 0.3, (Vec(2) << 0.6, 0.8).finished());
        Vec zeta = r.zeta();
        Geodesic g = shoot_ray(m, r.base, zeta, 0.01);
        SymTensor got = forward_mixed(m, field, r, 0.01, l);
        Vec th = conormal_covector(m, r.base, zeta);
        SymTensor expect = g.length() * proj_P(zeta, th, lambda_contract(f, zeta));
        EXPECT_LT((got - expect).max_abs(), 1e-12 * (1 + expect.max_abs()));
    }
}

TEST(Forward, Linearity) {
    auto m = unit_box("conformal:0.4");
    auto a = varying();
    std::mt19937_64 rng(4);
    SymTensor c = random_sym(rng, 2, 0);
    auto b = constant(c);
    AnalyticField sum{3, 2, 0, [&](const Vec& z) { return 2.0 * a.sample(z) - 3.0 * b.sample(z); }};
    Ray r = make_ray(m, v3(0.4, 0.0, 0.3), -0.2, (Vec(2) << 1.0, 0.4).finished());
    SymTensor lhs = forward_mixed(m, sum, r, 0.01, 0);
    SymTensor rhs = 2.0 * forward_mixed(m, a, r, 0.01, 0) - 3.0 * forward_mixed(m, b, r, 0.01, 0);
    EXPECT_LT((lhs - rhs).max_abs(), 1e-12);
}

TEST(Forward, VelocityScaling) {
    // Rescaling the initial velocity by c leaves the transverse value scaled by 1/c and the mixed value by c.
    auto m = unit_box("conformal:0.4");
    std::mt19937_64 rng(5);
    const double c = 2.0;
    Vec z0 = v3(0.4, 0.0, 0.3), zeta = v3(0.1, 0.7, 0.5);
    Vec th = conormal_covector(m, z0, zeta);
    for (int l : {0, 2}) {
        SymTensor f = random_sym(rng, 2, l);
        AnalyticField fld{3, 2, l, [&](const Vec& z) { return (1 + z[0] * z[1]) * f; }};
        const double h = 0.002;
        SymTensor a = forward_mixed_on(m, fld, shoot_ray(m, z0, zeta, h), th, l);
        SymTensor b = forward_mixed_on(m, fld, shoot_ray(m, z0, c * zeta, h / c), th, l);
        const double k = l == 0 ? 1 / c : c;
        EXPECT_LT((b - k * a).max_abs(), 1e-8 * a.max_abs());
    }
}

TEST(Forward, ConormalContractionVanishes) {
    auto m = unit_box("perturbed-halfspace:5");
    auto field = varying();
    Ray r = make_ray(m, v3(0.3, 0.2, -0.1), 0.15, (Vec(2) << 0.3, 1.0).finished());
    Vec th = conormal_covector(m, r.base, r.zeta());
    Mat M = to_matrix(forward_mixed(m, field, r, 0.01, 0));
    EXPECT_LT((M * th).norm(), 1e-12 * (1 + M.norm()));
}

TEST(Forward, ValenceMismatchThrows) {
    auto m = unit_box("euclidean");
    auto field = varying();
    Ray r = make_ray(m, v3(0.3, 0.2, -0.1), 0.15, (Vec(2) << 0.3, 1.0).finished());
    EXPECT_THROW(forward_mixed(m, field, r, 0.01, 2), ValenceError);
}

TEST(Forward, TrapezoidConvergence) {
    auto m = unit_box("conformal:0.3");
    auto field = varying();
    Ray r = make_ray(m, v3(0.5, 0.0, 0.0), 0.1, (Vec(2) << 1.0, 0.2).finished());
    SymTensor ref = forward_mixed(m, field, r, 0.0005, 0);
    const double e1 = (forward_mixed(m, field, r, 0.02, 0) - ref).max_abs();
    const double e2 = (forward_mixed(m, field, r, 0.01, 0) - ref).max_abs();
    EXPECT_GT(e1 / e2, 1.8);
}

TEST(Sampling, ChiAndRays) {
    auto chi = gaussian_chi(0.5, 4.0);
    EXPECT_DOUBLE_EQ(chi.nu, 0.125);
    EXPECT_DOUBLE_EQ(chi(0), 1.0);
    EXPECT_EQ(chi(chi.support() * 1.01), 0.0);
    auto m = make_euclidean(v3(0.5, -0.25, -0.25), v3(1, 0.25, 0.25), 1.1);
    auto rays = sample_rays(m, chi, {8, 3, 4});
    EXPECT_EQ(rays.size(), 8u * 3 * 4);
    EXPECT_NEAR(rays[0].base[0], 0.75, 1e-15);
    for (const auto& r : rays) {
        EXPECT_NEAR(r.omega.norm(), 1.0, 1e-14);
        EXPECT_LE(std::abs(r.lambda / r.base[0]), chi.support());
    }
    EXPECT_THROW(sample_rays(m, chi, {0, 1, 1}), DomainError);
}

TEST(Dataset, WriteReadRoundTrip) {
    auto m = make_euclidean(v3(0.5, -0.25, -0.25), v3(1, 0.25, 0.25), 1.1);
    auto rays = sample_rays(m, gaussian_chi(0.5, 4.0), {4, 2, 2});
    ForwardReport rep;
    auto ds = forward_dataset(m, varying(), rays, 0, 0.02, 4.0, &rep);
    EXPECT_EQ(rep.dropped + ds.records.size(), rays.size());
    const std::string path = "/tmp/mx_ds.csv";
    write_dataset(ds, path);
    auto back = read_dataset(path);
    ASSERT_EQ(back.records.size(), ds.records.size());
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        EXPECT_EQ(back.records[i].ray.lambda, ds.records[i].ray.lambda);
        for (std::size_t q = 0; q < 6; ++q) ASSERT_EQ(back.records[i].value[q], ds.records[i].value[q]);
    }
    EXPECT_EQ(back.meta["valence"], "2,0");
}

TEST(Dataset, ConjugationWeight) {
    auto m = make_euclidean(v3(0.5, -0.25, -0.25), v3(1, 0.25, 0.25), 1.1);
    auto rays = sample_rays(m, gaussian_chi(0.5, 4.0), {1, 1, 1});
    SymTensor one(3, 2, 0);
    one.set({2, 2}, 1.0);
    auto a = forward_dataset(m, constant(one), rays, 0, 0.01, 0.0);
    auto b = forward_dataset(m, constant(one), rays, 0, 0.01, 2.0);
    // A ray at constant x = 0.75 with λ = 0 carries the weight e^{F/x} exactly.
    EXPECT_NEAR(b.records[0].value[5] / a.records[0].value[5], std::exp(2.0 / 0.75), 1e-9);
}
