#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mixedray/metric.hpp"
#include "mixedray/tensor.hpp"

namespace mixedray {

// Row r of E is the covector that started as dz^r at t = 0, transported along the curve.
struct GeodesicState {
    double t = 0;
    Vec z, v;
    Mat E;
};

struct Geodesic {
    std::vector<GeodesicState> nodes;  // ascending t
    std::size_t origin = 0;            // index of the t = 0 node
    double h_step = 0;
    bool exited_start = false, exited_end = false;
    const GeodesicState& at(std::size_t i) const { return nodes[i]; }
    std::size_t size() const { return nodes.size(); }
    double length() const { return nodes.back().t - nodes.front().t; }
};

struct ShootOptions {
    std::size_t max_steps = 100000;
    double bisect_tol = 1e-10;
};

using InsidePredicate = std::function<bool(const Vec&)>;

namespace detail {

struct Deriv {
    Vec dz, dv;
    Mat dE;
};

inline Deriv geodesic_rhs(const ChartMetric& m, const Vec& z, const Vec& v, const Mat& E) {
    const int n = m.n;
    Christoffel G = christoffel(m, z, false);
    Deriv d;
    d.dz = v;
    d.dv = Vec::Zero(n);
    Mat C = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        d.dv[i] = -v.dot(G[i] * v);
        C.row(i) = (G[i] * v).transpose();
    }
    d.dE = E * C;
    return d;
}

inline GeodesicState rk4_step(const ChartMetric& m, const GeodesicState& s, double h) {
    Deriv k1 = geodesic_rhs(m, s.z, s.v, s.E);
    Deriv k2 = geodesic_rhs(m, s.z + 0.5 * h * k1.dz, s.v + 0.5 * h * k1.dv, s.E + 0.5 * h * k1.dE);
    Deriv k3 = geodesic_rhs(m, s.z + 0.5 * h * k2.dz, s.v + 0.5 * h * k2.dv, s.E + 0.5 * h * k2.dE);
    Deriv k4 = geodesic_rhs(m, s.z + h * k3.dz, s.v + h * k3.dv, s.E + h * k3.dE);
    GeodesicState o;
    o.t = s.t + h;
    o.z = s.z + h / 6 * (k1.dz + 2 * k2.dz + 2 * k3.dz + k4.dz);
    o.v = s.v + h / 6 * (k1.dv + 2 * k2.dv + 2 * k3.dv + k4.dv);
    o.E = s.E + h / 6 * (k1.dE + 2 * k2.dE + 2 * k3.dE + k4.dE);
    return o;
}

// March in direction sign (±1) until the predicate fails; the last node sits on the exit to bisect_tol.
inline std::vector<GeodesicState> march(const ChartMetric& m, const GeodesicState& s0, double h, double sign,
                                        const InsidePredicate& inside, const ShootOptions& opt, bool& exited) {
    std::vector<GeodesicState> out{s0};
    exited = false;
    GeodesicState s = s0;
    for (std::size_t step = 0; step < opt.max_steps; ++step) {
        GeodesicState nx = rk4_step(m, s, sign * h);
        if (inside(nx.z)) {
            out.push_back(nx);
            s = nx;
            continue;
        }
        double a = 0, b = h;
        while (b - a > opt.bisect_tol) {
            const double mid = 0.5 * (a + b);
            if (inside(rk4_step(m, s, sign * mid).z))
                a = mid;
            else
                b = mid;
        }
        if (a > 0) out.push_back(rk4_step(m, s, sign * a));
        exited = true;
        return out;
    }
    throw TrappedRayError("geodesic did not leave the patch within the step cap");
}

}  // namespace detail

inline InsidePredicate patch_predicate(const ChartMetric& m) {
    return [&m](const Vec& z) { return in_patch_Op(m, z); };
}

// One-sided shooting from t = 0 forward.
inline Geodesic shoot_geodesic(const ChartMetric& m, const Vec& z0, const Vec& v0, double h_step,
                               const ShootOptions& opt = {}, InsidePredicate inside = nullptr) {
    if (!(h_step > 0)) throw DomainError("h_step must be positive");
    if (v0.norm() == 0) throw DomainError("zero initial velocity");
    if (!inside) inside = patch_predicate(m);
    if (!inside(z0)) throw DomainError("initial point outside patch");
    GeodesicState s0{0.0, z0, v0, Mat::Identity(m.n, m.n)};
    Geodesic g;
    g.h_step = h_step;
    g.nodes = detail::march(m, s0, h_step, 1.0, inside, opt, g.exited_end);
    return g;
}

// Two-sided shooting; t runs over both signs with the base point at g.origin.
inline Geodesic shoot_ray(const ChartMetric& m, const Vec& z0, const Vec& v0, double h_step,
                          const ShootOptions& opt = {}, InsidePredicate inside = nullptr) {
    if (!(h_step > 0)) throw DomainError("h_step must be positive");
    if (v0.norm() == 0) throw DomainError("zero initial velocity");
    if (!inside) inside = patch_predicate(m);
    if (!inside(z0)) throw DomainError("initial point outside patch");
    GeodesicState s0{0.0, z0, v0, Mat::Identity(m.n, m.n)};
    Geodesic g;
    g.h_step = h_step;
    auto fwd = detail::march(m, s0, h_step, 1.0, inside, opt, g.exited_end);
    auto bwd = detail::march(m, s0, h_step, -1.0, inside, opt, g.exited_start);
    g.nodes.assign(bwd.rbegin(), bwd.rend());
    g.origin = g.nodes.size() - 1;
    g.nodes.insert(g.nodes.end(), fwd.begin() + 1, fwd.end());
    return g;
}

inline std::size_t node_at(const Geodesic& g, double t) {
    for (std::size_t i = 0; i < g.size(); ++i)
        if (std::abs(g.nodes[i].t - t) <= 1e-12 * (1 + std::abs(t))) return i;
    throw DomainError("parameter value is not a node of the geodesic");
}

// Matrix taking vector components at node a to those of the parallel vector at node b.
inline Mat vector_transport_matrix(const Geodesic& g, std::size_t a, std::size_t b) {
    if (a >= g.size() || b >= g.size()) throw DomainError("transport index outside geodesic");
    return g.nodes[b].E.partialPivLu().solve(g.nodes[a].E);
}

// Matrix taking covector components at node a to node b.
inline Mat covector_transport_matrix(const Geodesic& g, std::size_t a, std::size_t b) {
    if (a >= g.size() || b >= g.size()) throw DomainError("transport index outside geodesic");
    return g.nodes[b].E.transpose() * g.nodes[a].E.transpose().inverse();
}

inline Vec transport_covector(const Geodesic& g, const Vec& alpha, std::size_t a, std::size_t b) {
    return covector_transport_matrix(g, a, b) * alpha;
}

inline Vec transport_vector(const Geodesic& g, const Vec& u, std::size_t a, std::size_t b) {
    return vector_transport_matrix(g, a, b) * u;
}

// Applies U to every upper slot and L to every lower slot.
template <class T>
BasicSymTensor<T> transform_slots(const BasicSymTensor<T>& f, const Mat& U, const Mat& L) {
    const int n = f.n(), r = f.rank();
    RawTensor<T> out(n, f.k(), f.l());
    for (std::size_t a = 0; a < out.c.size(); ++a) {
        MultiIndex m = unflatten(a, n, r);
        T acc{};
        for (std::size_t b = 0; b < f.size(); ++b) {
            MultiIndex q = unflatten(b, n, r);
            double w = 1;
            for (int s = 0; s < f.k(); ++s) w *= U(m[s], q[s]);
            for (int s = f.k(); s < r; ++s) w *= L(m[s], q[s]);
            if (w != 0) acc += w * f[b];
        }
        out.c[a] = acc;
    }
    BasicSymTensor<T> res(n, f.k(), f.l());
    for (std::size_t a = 0; a < out.c.size(); ++a) res.set(unflatten(a, n, r), out.c[a]);
    return res;
}

inline SymTensor parallel_transport(const Geodesic& g, const SymTensor& f, std::size_t a, std::size_t b) {
    if (f.n() != g.nodes[0].z.size()) throw ShapeError("tensor dimension differs from geodesic dimension");
    return transform_slots(f, vector_transport_matrix(g, a, b), covector_transport_matrix(g, a, b));
}

// ϑ = h(ω) dy for ζ = λ∂x + ω∂y.
inline Vec conormal_covector(const ChartMetric& m, const Vec& z, const Vec& zeta) {
    Vec w = zeta;
    w[0] = 0;
    Mat h = m.g(z);
    h.row(0).setZero();
    h.col(0).setZero();
    Vec th = h * w;
    if (!(w.dot(th) > 1e-14 * std::max(1.0, zeta.squaredNorm())))
        throw RejectedRayError("ray has no tangential component");
    return th;
}

}  // namespace mixedray
