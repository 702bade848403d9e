#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mixedray/geodesic.hpp"

using namespace mixedray;

namespace {

Vec v3(double a, double b, double c) {
    Vec v(3);
    v << a, b, c;
    return v;
}

Vec v2(double a, double b) {
    Vec v(2);
    v << a, b;
    return v;
}

ChartMetric box_metric(const std::string& spec) {
    return make_metric(spec, v3(0.05, -1, -1), v3(1.0, 1, 1), 2.0);
}

double energy(const ChartMetric& m, const GeodesicState& s) { return s.v.dot(m.g(s.z) * s.v); }

}  // namespace

TEST(Christoffel, EuclideanVanishes) {
    auto m = box_metric("euclidean");
    auto G = christoffel(m, v3(0.5, 0.1, 0.2));
    for (int i = 0; i < 3; ++i) EXPECT_EQ(G[i].norm(), 0.0);
}

TEST(Christoffel, ConformalClosedForm) {
    const double amp = 0.4;
    auto m = box_metric("conformal:0.4");
    Vec a = conformal_direction(3) * amp;
    Vec z = v3(0.3, -0.2, 0.5);
    auto G = christoffel(m, z);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) {
                const double hand = (i == j) * a[k] + (i == k) * a[j] - (j == k) * a[i];
                EXPECT_NEAR(G[i](j, k), hand, 1e-13);
            }
}

TEST(Christoffel, FiniteDifferenceAgrees) {
    for (const char* spec : {"conformal:0.7", "perturbed-halfspace:3"}) {
        auto m = box_metric(spec);
        auto fd = m;
        fd.dg = nullptr;
        Vec z = v3(0.4, 0.3, -0.1);
        auto A = christoffel(m, z), B = christoffel(fd, z);
        for (int i = 0; i < 3; ++i) {
            EXPECT_LT((A[i] - B[i]).cwiseAbs().maxCoeff(), 1e-8);
            EXPECT_LT((A[i] - A[i].transpose()).norm(), 1e-15);
        }
    }
}

TEST(Christoffel, OutsidePatchRejected) {
    auto m = box_metric("euclidean");
    EXPECT_THROW(christoffel(m, v3(2.0, 0, 0)), DomainError);
}

TEST(Shoot, EuclideanStraightLine) {
    auto m = box_metric("euclidean");
    Vec z0 = v3(0.5, 0.1, -0.2), v0 = v3(0.1, 0.8, 0.3);
    auto g = shoot_geodesic(m, z0, v0, 0.01);
    for (const auto& s : g.nodes) EXPECT_LT((s.z - (z0 + s.t * v0)).norm(), 1e-12);
    EXPECT_TRUE(g.exited_end);
    // Exit located on the y1 = 1 face.
    EXPECT_NEAR(g.nodes.back().z[1], 1.0, 1e-9);
}

TEST(Shoot, SphereGreatCirclePeriod) {
    Vec lo = v2(0.3, -20), hi = v2(M_PI - 0.3, 20);
    auto m = make_round_sphere(lo, hi);
    const double inc = 0.5;
    Vec z0 = v2(M_PI / 2, 0.0), v0 = v2(std::sin(inc), std::cos(inc));
    double prev = 0;
    for (int N : {64, 128}) {
        const double h = 2 * M_PI / N;
        auto g = shoot_geodesic(m, z0, v0, h);
        ASSERT_GT(g.size(), std::size_t(N));
        const auto& s = g.nodes[N];
        EXPECT_NEAR(s.t, 2 * M_PI, 1e-12);
        const double err = std::hypot(s.z[0] - z0[0], s.z[1] - 2 * M_PI);
        EXPECT_LT(err, 1e-4);
        if (prev > 0) EXPECT_GT(prev / err, 14.0);
        prev = err;
    }
}

TEST(Shoot, ConformalFourthOrder) {
    auto m = box_metric("conformal:0.5");
    Vec z0 = v3(0.3, -0.5, 0.0), v0 = v3(0.2, 1.0, 0.1);
    auto endpoint = [&](double h) {
        auto g = shoot_geodesic(m, z0, v0, h);
        return g.nodes[static_cast<std::size_t>(std::lround(0.5 / h))].z;
    };
    Vec ref = endpoint(0.5 / 400);
    const double e1 = (endpoint(0.5 / 10) - ref).norm(), e2 = (endpoint(0.5 / 20) - ref).norm();
    EXPECT_GT(e1 / e2, 14.0);
}

TEST(Shoot, EnergyDrift) {
    auto m = box_metric("conformal:0.5");
    Vec z0 = v3(0.3, -0.5, 0.0), v0 = v3(0.2, 1.0, 0.1);
    for (double h : {0.02, 0.01}) {
        auto g = shoot_geodesic(m, z0, v0, h);
        const double e0 = energy(m, g.nodes.front());
        double drift = 0;
        for (const auto& s : g.nodes) drift = std::max(drift, std::abs(energy(m, s) - e0));
        EXPECT_LT(drift, 10 * std::pow(h, 4) * g.length() + 1e-13);
    }
}

TEST(Shoot, TrappedRayCap) {
    auto m = box_metric("euclidean");
    ShootOptions opt;
    opt.max_steps = 10;
    EXPECT_THROW(shoot_geodesic(m, v3(0.5, 0, 0), v3(0, 1, 0), 1e-4, opt), TrappedRayError);
}

TEST(Shoot, ReverseReturnsToStart) {
    auto m = box_metric("perturbed-halfspace:7");
    Vec z0 = v3(0.2, -0.3, 0.1), v0 = v3(0.05, 0.9, 0.2);
    const double h = 0.01;
    auto g = shoot_geodesic(m, z0, v0, h);
    // Take an interior node and shoot back with reversed velocity for the same number of steps.
    const std::size_t j = g.size() / 2;
    auto back = shoot_geodesic(m, g.nodes[j].z, -g.nodes[j].v, h);
    ASSERT_GT(back.size(), j);
    EXPECT_LT((back.nodes[j].z - z0).norm(), 1e-8);
    EXPECT_LT((back.nodes[j].v + v0).norm(), 1e-8);
}

TEST(Transport, EuclideanIdentity) {
    auto m = box_metric("euclidean");
    auto g = shoot_geodesic(m, v3(0.5, 0, 0), v3(0.1, 0.7, 0.2), 0.05);
    Mat T = vector_transport_matrix(g, 0, g.size() - 1);
    EXPECT_LT((T - Mat::Identity(3, 3)).norm(), 1e-14);
}

TEST(Transport, IsometryAndRoundTrip) {
    auto m = box_metric("conformal:0.5");
    Vec z0 = v3(0.3, -0.5, 0.0), v0 = v3(0.2, 1.0, 0.1);
    v0 /= std::sqrt(v0.dot(m.g(z0) * v0));
    const double h = 1e-3;
    auto g = shoot_geodesic(m, z0, v0, h);
    Vec a = v3(0.3, -1.0, 0.4), b = v3(1.0, 0.2, -0.5);
    const double p0 = a.dot(m.g(z0).inverse() * b);
    double drift = 0;
    for (std::size_t i = 0; i < g.size(); i += 50) {
        Vec ai = transport_covector(g, a, 0, i), bi = transport_covector(g, b, 0, i);
        drift = std::max(drift, std::abs(ai.dot(m.g(g.nodes[i].z).inverse() * bi) - p0));
    }
    EXPECT_LT(drift, 1e-8);

    // Transport to an interior node, then back along the reversed geodesic.
    const std::size_t j = g.size() / 2;
    Vec aj = transport_covector(g, a, 0, j);
    auto back = shoot_geodesic(m, g.nodes[j].z, -g.nodes[j].v, h);
    Vec a0 = back.nodes[j].E.transpose() * aj;
    EXPECT_LT((a0 - a).norm(), 1e-8);
}

TEST(Transport, TensorSlotsAndBadIndex) {
    auto m = box_metric("conformal:0.3");
    auto g = shoot_geodesic(m, v3(0.3, 0, 0), v3(0.1, 1, 0), 0.01);
    SymTensor f(3, 2, 0);
    f.set({0, 1}, 1.0);
    f.set({2, 2}, 0.5);
    SymTensor ft = parallel_transport(g, f, 0, g.size() - 1);
    SymTensor back = parallel_transport(g, ft, g.size() - 1, 0);
    EXPECT_LT((back - f).max_abs(), 1e-13);
    EXPECT_THROW(parallel_transport(g, f, 0, g.size() + 3), DomainError);
}

TEST(Conormal, EuclideanAndPairing) {
    auto m = box_metric("euclidean");
    Vec th = conormal_covector(m, v3(0.5, 0, 0), v3(0.3, 0.6, 0.8));
    EXPECT_LT((th - v3(0, 0.6, 0.8)).norm(), 1e-15);
    auto p = box_metric("perturbed-halfspace:11");
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> U(-1, 1);
    for (int i = 0; i < 100; ++i) {
        Vec z = v3(0.1 + 0.8 * (U(rng) + 1) / 2, U(rng), U(rng));
        Vec zeta = v3(U(rng), U(rng), U(rng));
        Vec t = conormal_covector(p, z, zeta);
        EXPECT_EQ(t[0], 0.0);
        EXPECT_GT(t.dot(zeta), 0.0);
    }
    EXPECT_THROW(conormal_covector(m, v3(0.5, 0, 0), v3(1, 0, 0)), RejectedRayError);
}

TEST(Patch, Membership) {
    auto m = make_euclidean(v3(0, -1, -1), v3(1, 1, 1), 0.5);
    EXPECT_TRUE(in_patch_Op(m, v3(0, 0, 0)));
    EXPECT_FALSE(in_patch_Op(m, v3(1.0, 0, 0)));  // x̃ = -2c
    EXPECT_FALSE(in_patch_Op(m, v3(-0.1, 0, 0)));
    EXPECT_TRUE(in_patch_Op(m, v3(0.49, 0.9, -0.9)));
}

TEST(Patch, ConsistentWithExit) {
    auto m = make_euclidean(v3(0, -1, -1), v3(1, 1, 1), 0.5);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> U(-1, 1);
    for (int i = 0; i < 100; ++i) {
        Vec z = v3(0.25 + 0.2 * U(rng), 0.5 * U(rng), 0.5 * U(rng));
        Vec v = v3(U(rng), U(rng), U(rng));
        auto g = shoot_geodesic(m, z, v, 0.05);
        for (const auto& s : g.nodes) ASSERT_TRUE(in_patch_Op(m, s.z));
        // One more step along the straight line leaves the patch.
        Vec beyond = g.nodes.back().z + 1e-8 * v;
        EXPECT_FALSE(in_patch_Op(m, beyond));
    }
}
