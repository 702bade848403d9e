#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "mixedray/error.hpp"

namespace mixedray {

using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 3, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 3, 3>;

// Gamma[i](j,k) = Γ^i_{jk}
using Christoffel = std::array<Mat, 3>;
// dG[m](i,j) = ∂_m g_{ij}
using MetricDerivative = std::array<Mat, 3>;

struct ChartMetric {
    int n = 3;
    std::string name = "euclidean";
    std::function<Mat(const Vec&)> g;
    std::function<MetricDerivative(const Vec&)> dg;  // optional
    Vec lo, hi;      // chart box
    double c = 1.0;  // lens parameter of O_p = {x̃ > -c}

    // Boundary defining function; the boundary is {z_0 = 0}.
    double x(const Vec& z) const { return z[0]; }
    // Lens coordinate; vanishes on the boundary and decreases inward.
    double x_tilde(const Vec& z) const { return -z[0]; }
    bool in_box(const Vec& z) const {
        for (int i = 0; i < n; ++i)
            if (!(z[i] >= lo[i] && z[i] <= hi[i])) return false;
        return true;
    }
    double diameter() const { return (hi - lo).norm(); }
};

// Pure predicate for membership in O_p ∩ chart box.
inline bool in_patch_Op(const ChartMetric& m, const Vec& z) {
    return m.x(z) >= 0.0 && m.x_tilde(z) > -m.c && m.in_box(z);
}

inline MetricDerivative fd_metric_derivative(const ChartMetric& m, const Vec& z) {
    MetricDerivative d;
    const double h = 1e-5 * m.diameter();
    for (int k = 0; k < m.n; ++k) {
        Vec zp = z, zm = z;
        zp[k] += h;
        zm[k] -= h;
        d[k] = (m.g(zp) - m.g(zm)) / (2 * h);
    }
    return d;
}

inline Christoffel christoffel(const ChartMetric& m, const Vec& z, bool check_domain = true) {
    if (check_domain && !m.in_box(z)) throw DomainError("christoffel: point outside patch");
    const int n = m.n;
    Mat g = m.g(z);
    Eigen::LLT<Mat> llt(g);
    if (llt.info() != Eigen::Success) throw NumericalError("christoffel: metric not positive definite");
    Mat gi = llt.solve(Mat::Identity(n, n));
    MetricDerivative d = m.dg ? m.dg(z) : fd_metric_derivative(m, z);
    Christoffel G;
    for (int i = 0; i < n; ++i) {
        G[i] = Mat::Zero(n, n);
        for (int j = 0; j < n; ++j)
            for (int k = j; k < n; ++k) {
                double s = 0;
                for (int q = 0; q < n; ++q) s += gi(i, q) * (d[j](q, k) + d[k](q, j) - d[q](j, k));
                G[i](j, k) = G[i](k, j) = 0.5 * s;
            }
    }
    return G;
}

inline ChartMetric make_euclidean(const Vec& lo, const Vec& hi, double c) {
    ChartMetric m;
    m.n = static_cast<int>(lo.size());
    m.name = "euclidean";
    m.lo = lo;
    m.hi = hi;
    m.c = c;
    const int n = m.n;
    m.g = [n](const Vec&) { return Mat(Mat::Identity(n, n)); };
    m.dg = [n](const Vec&) {
        MetricDerivative d;
        for (auto& a : d) a = Mat::Zero(n, n);
        return d;
    };
    return m;
}

// e^{2φ}δ with φ(z) = amp·⟨a, z⟩, a = (1, 1/2, -3/10).
inline Vec conformal_direction(int n) {
    Vec a(n);
    const double base[3] = {1.0, 0.5, -0.3};
    for (int i = 0; i < n; ++i) a[i] = base[i];
    return a;
}

inline ChartMetric make_conformal(double amp, const Vec& lo, const Vec& hi, double c) {
    ChartMetric m = make_euclidean(lo, hi, c);
    m.name = "conformal:" + std::to_string(amp);
    const int n = m.n;
    const Vec a = conformal_direction(n);
    m.g = [=](const Vec& z) { return Mat(std::exp(2 * amp * a.dot(z)) * Mat::Identity(n, n)); };
    m.dg = [=](const Vec& z) {
        MetricDerivative d;
        const double e = std::exp(2 * amp * a.dot(z));
        for (int k = 0; k < 3; ++k) d[k] = Mat::Zero(n, n);
        for (int k = 0; k < n; ++k) d[k] = 2 * amp * a[k] * e * Mat::Identity(n, n);
        return d;
    };
    return m;
}

// dx² + k(x,y) dy² with k = I + x·K1(y) + x²·K2; K1(y) = A + Σ_b y_b C_b.
struct HalfspacePerturbation {
    Mat A, K2;
    std::array<Mat, 2> C;
};

inline HalfspacePerturbation halfspace_perturbation(unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    auto sym = [&](double s) {
        Mat M(2, 2);
        M(0, 0) = s * u(rng);
        M(1, 1) = s * u(rng);
        M(0, 1) = M(1, 0) = 0.5 * s * u(rng);
        return M;
    };
    HalfspacePerturbation p;
    p.A = sym(0.3);
    p.C[0] = sym(0.1);
    p.C[1] = sym(0.1);
    p.K2 = sym(0.1);
    return p;
}

inline ChartMetric make_perturbed_halfspace(unsigned seed, const Vec& lo, const Vec& hi, double c) {
    ChartMetric m = make_euclidean(lo, hi, c);
    if (m.n != 3) throw DomainError("perturbed-halfspace metric needs n = 3");
    m.name = "perturbed-halfspace:" + std::to_string(seed);
    const HalfspacePerturbation p = halfspace_perturbation(seed);
    auto K1 = [p](const Vec& z) { return Mat(p.A + z[1] * p.C[0] + z[2] * p.C[1]); };
    m.g = [=](const Vec& z) {
        Mat g = Mat::Identity(3, 3);
        const double x = z[0];
        g.block(1, 1, 2, 2) += x * K1(z) + x * x * p.K2;
        return g;
    };
    m.dg = [=](const Vec& z) {
        MetricDerivative d;
        for (auto& a : d) a = Mat::Zero(3, 3);
        const double x = z[0];
        d[0].block(1, 1, 2, 2) = K1(z) + 2 * x * p.K2;
        d[1].block(1, 1, 2, 2) = x * p.C[0];
        d[2].block(1, 1, 2, 2) = x * p.C[1];
        return d;
    };
    return m;
}

// H_{ij} = -½ g^{xx} ∂_x k_{ij} at x = 0.
inline Mat halfspace_H(unsigned seed, const Vec& y) {
    const HalfspacePerturbation p = halfspace_perturbation(seed);
    return -0.5 * (p.A + y[0] * p.C[0] + y[1] * p.C[1]);
}

// Round unit sphere in (θ, φ): dθ² + sin²θ dφ². Two-dimensional test metric.
inline ChartMetric make_round_sphere(const Vec& lo, const Vec& hi) {
    ChartMetric m;
    m.n = 2;
    m.name = "sphere";
    m.lo = lo;
    m.hi = hi;
    m.c = 1e9;
    m.g = [](const Vec& z) {
        Mat g = Mat::Zero(2, 2);
        g(0, 0) = 1.0;
        g(1, 1) = std::sin(z[0]) * std::sin(z[0]);
        return g;
    };
    m.dg = [](const Vec& z) {
        MetricDerivative d;
        for (auto& a : d) a = Mat::Zero(2, 2);
        d[0](1, 1) = 2 * std::sin(z[0]) * std::cos(z[0]);
        return d;
    };
    return m;
}

// Metric zoo lookup: "euclidean", "conformal:<amp>", "perturbed-halfspace:<seed>".
inline ChartMetric make_metric(const std::string& spec, const Vec& lo, const Vec& hi, double c) {
    auto colon = spec.find(':');
    const std::string head = spec.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
    try {
        if (head == "euclidean" && arg.empty()) return make_euclidean(lo, hi, c);
        if (head == "conformal" && !arg.empty()) return make_conformal(std::stod(arg), lo, hi, c);
        if (head == "perturbed-halfspace" && !arg.empty())
            return make_perturbed_halfspace(static_cast<unsigned>(std::stoul(arg)), lo, hi, c);
    } catch (const std::logic_error&) {
        throw ConfigError("bad metric parameter in '" + spec + "'");
    }
    throw ConfigError("unknown metric '" + spec + "'");
}

}  // namespace mixedray
