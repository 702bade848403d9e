#pragma once

#include <array>
#include <cmath>
#include <random>
#include <utility>

#include "mixedray/field.hpp"
#include "mixedray/metric.hpp"
#include "mixedray/parallel.hpp"
#include "mixedray/tensor.hpp"

namespace mixedray {

// Scattering-frame components (x²∂x, x∂y, dx/x², dy/x) from coordinate components: each upper x slot
// scales by x^-2, upper y by x^-1, lower x by x^2, lower y by x.
inline SymTensor to_scattering(const SymTensor& f, double x) {
    const int rank = f.k() + f.l();
    RawTensor<double> r(f.n(), f.k(), f.l());
    for (std::size_t a = 0; a < f.size(); ++a) {
        MultiIndex m = unflatten(a, f.n(), rank);
        double s = 1;
        for (int p = 0; p < rank; ++p) {
            const double w = m[p] == 0 ? x * x : x;
            s *= p < f.k() ? 1 / w : w;
        }
        r.c[a] = s * f[a];
    }
    return SymTensor::from_raw(r);
}

inline SymTensor from_scattering(const SymTensor& f, double x) {
    const int rank = f.k() + f.l();
    RawTensor<double> r(f.n(), f.k(), f.l());
    for (std::size_t a = 0; a < f.size(); ++a) {
        MultiIndex m = unflatten(a, f.n(), rank);
        double s = 1;
        for (int p = 0; p < rank; ++p) {
            const double w = m[p] == 0 ? x * x : x;
            s *= p < f.k() ? w : 1 / w;
        }
        r.c[a] = s * f[a];
    }
    return SymTensor::from_raw(r);
}

// d′ at a point: covariant derivative appended as a new lower slot, lower slots symmetrized.
// dv[c] holds ∂_c of the components of v.
inline SymTensor d_prime_point(const SymTensor& v, const std::array<SymTensor, 3>& dv, const Christoffel& G) {
    if (v.k() != 2 || v.l() > 1 || v.n() != 3) throw ValenceError("d' acts on (2,0) and (2,1) fields at n = 3");
    const int l0 = v.l();
    RawTensor<double> r(3, 2, l0 + 1);
    auto V = [&](int i, int j, int k) { return v[l0 ? (i * 3 + j) * 3 + k : i * 3 + j]; };
    for (std::size_t a = 0; a < r.c.size(); ++a) {
        MultiIndex m = unflatten(a, 3, 3 + l0);
        const int i = m[0], j = m[1], k = l0 ? m[2] : 0, c = m[2 + l0];
        double s = dv[c][l0 ? (i * 3 + j) * 3 + k : i * 3 + j];
        for (int p = 0; p < 3; ++p) {
            s += G[i](c, p) * V(p, j, k) + G[j](c, p) * V(i, p, k);
            if (l0) s -= G[p](c, k) * V(i, j, p);
        }
        r.c[a] = s;
    }
    return SymTensor::from_raw(r);
}

// δ at a point: divergence over the last lower slot, the negative of the adjoint of d′ for the
// component inner product and the chart Lebesgue measure.
inline SymTensor delta_point(const SymTensor& f, const std::array<SymTensor, 3>& df, const Christoffel& G) {
    if (f.k() != 2 || f.l() < 1 || f.l() > 2 || f.n() != 3) throw ValenceError("δ acts on (2,1) and (2,2) fields at n = 3");
    const int l1 = f.l() - 1;
    RawTensor<double> r(3, 2, l1);
    auto idx = [&](int i, int j, int k, int c) { return l1 ? ((i * 3 + j) * 3 + k) * 3 + c : (i * 3 + j) * 3 + c; };
    for (std::size_t a = 0; a < r.c.size(); ++a) {
        MultiIndex m = unflatten(a, 3, 2 + l1);
        const int i = m[0], j = m[1], k = l1 ? m[2] : 0;
        double s = 0;
        for (int c = 0; c < 3; ++c) {
            s += df[c][idx(i, j, k, c)];
            for (int p = 0; p < 3; ++p) {
                s -= G[p](c, i) * f[idx(p, j, k, c)] + G[p](c, j) * f[idx(i, p, k, c)];
                if (l1) s += G[k](c, p) * f[idx(i, j, p, c)];
            }
        }
        r.c[a] = s;
    }
    return SymTensor::from_raw(r);
}

// Componentwise ∂_c on the grid: central differences inside, one-sided second order at the edges.
inline std::array<TensorField, 3> grid_gradient(const TensorField& f) {
    const auto& g = f.grid();
    for (int a = 0; a < 3; ++a)
        if (g.dims[a] < 3) throw DomainError("differentiation needs at least three nodes per axis");
    std::array<TensorField, 3> out{TensorField(g, f.n(), f.k(), f.l()), TensorField(g, f.n(), f.k(), f.l()),
                                   TensorField(g, f.n(), f.k(), f.l())};
    const std::size_t nc = f.ncomp();
    parallel_for(g.nodes(), [&](std::size_t idx) {
        auto p = g.ijk(idx);
        for (int a = 0; a < 3; ++a) {
            const int N = g.dims[a];
            const double h = g.spacing[a];
            auto at = [&](int shift) {
                auto q = p;
                q[a] += shift;
                return f.node(g.index(q[0], q[1], q[2]));
            };
            double* o = out[a].node(idx);
            if (p[a] == 0) {
                const double *f0 = at(0), *f1 = at(1), *f2 = at(2);
                for (std::size_t c = 0; c < nc; ++c) o[c] = (-3 * f0[c] + 4 * f1[c] - f2[c]) / (2 * h);
            } else if (p[a] == N - 1) {
                const double *f0 = at(0), *f1 = at(-1), *f2 = at(-2);
                for (std::size_t c = 0; c < nc; ++c) o[c] = (3 * f0[c] - 4 * f1[c] + f2[c]) / (2 * h);
            } else {
                const double *fp = at(1), *fm = at(-1);
                for (std::size_t c = 0; c < nc; ++c) o[c] = (fp[c] - fm[c]) / (2 * h);
            }
        }
    });
    return out;
}

// Transpose of grid_gradient: returns Σ_a D_aᵀ parts[a], component by component.
inline TensorField grid_gradient_transpose(const std::array<TensorField, 3>& parts) {
    const auto& g = parts[0].grid();
    TensorField out(g, parts[0].n(), parts[0].k(), parts[0].l());
    const std::size_t nc = out.ncomp();
    for (std::size_t idx = 0; idx < g.nodes(); ++idx) {
        auto p = g.ijk(idx);
        for (int a = 0; a < 3; ++a) {
            const int N = g.dims[a];
            const double h = g.spacing[a];
            const double* w = parts[a].node(idx);
            auto add = [&](int shift, double c) {
                auto q = p;
                q[a] += shift;
                double* o = out.node(g.index(q[0], q[1], q[2]));
                for (std::size_t k = 0; k < nc; ++k) o[k] += c * w[k];
            };
            if (p[a] == 0) {
                add(0, -3 / (2 * h));
                add(1, 4 / (2 * h));
                add(2, -1 / (2 * h));
            } else if (p[a] == N - 1) {
                add(0, 3 / (2 * h));
                add(-1, -4 / (2 * h));
                add(-2, 1 / (2 * h));
            } else {
                add(1, 1 / (2 * h));
                add(-1, -1 / (2 * h));
            }
        }
    }
    return out;
}

inline Christoffel christoffel_or_zero(const ChartMetric& m, const Vec& z) {
    if (m.name == "euclidean") {
        Christoffel G;
        for (auto& x : G) x = Mat::Zero(3, 3);
        return G;
    }
    return christoffel(m, z, false);
}

inline TensorField d_prime(const ChartMetric& m, const TensorField& v) {
    if (v.k() != 2 || v.l() > 1) throw ValenceError("d' acts on (2,0) and (2,1) fields");
    const auto dv = grid_gradient(v);
    TensorField out(v.grid(), 3, 2, v.l() + 1);
    parallel_for(v.grid().nodes(), [&](std::size_t i) {
        std::array<SymTensor, 3> d{dv[0].at(i), dv[1].at(i), dv[2].at(i)};
        out.set(i, d_prime_point(v.at(i), d, christoffel_or_zero(m, v.grid().point(i))));
    });
    return out;
}

inline TensorField delta(const ChartMetric& m, const TensorField& f) {
    if (f.k() != 2 || f.l() < 1 || f.l() > 2) throw ValenceError("δ acts on (2,1) and (2,2) fields");
    const auto df = grid_gradient(f);
    TensorField out(f.grid(), 3, 2, f.l() - 1);
    parallel_for(f.grid().nodes(), [&](std::size_t i) {
        std::array<SymTensor, 3> d{df[0].at(i), df[1].at(i), df[2].at(i)};
        out.set(i, delta_point(f.at(i), d, christoffel_or_zero(m, f.grid().point(i))));
    });
    return out;
}

inline double max_trace(const TensorField& f) {
    double t = 0;
    for (std::size_t i = 0; i < f.grid().nodes(); ++i) t = std::max(t, trace_mu(f.at(i)).max_abs());
    return t;
}

inline void require_trace_free(const TensorField& v) {
    if (v.l() < 1) return;
    if (max_trace(v) > 1e-10 * std::max(1.0, v.max_abs())) throw DomainError("input field is not trace-free");
}

inline TensorField apply_B(const TensorField& f) {
    TensorField out(f.grid(), f.n(), f.k(), f.l());
    parallel_for(f.grid().nodes(), [&](std::size_t i) { out.set(i, projector_B(f.at(i))); });
    return out;
}

// d^B = B d′ on trace-free (2,1) fields.
inline TensorField d_B(const ChartMetric& m, const TensorField& v) {
    if (v.k() != 2 || v.l() != 1) throw ValenceError("d^B acts on (2,1) fields");
    require_trace_free(v);
    return apply_B(d_prime(m, v));
}

// δ^B coincides with δ on trace-free (2,2) fields.
inline TensorField delta_B(const ChartMetric& m, const TensorField& f) {
    if (f.k() != 2 || f.l() != 2) throw ValenceError("δ^B acts on (2,2) fields");
    require_trace_free(f);
    return delta(m, f);
}

// e^{sign·F/x} with x clamped from below.
struct ConjugationWeight {
    double F = 0;
    double x_min = 0;
    double operator()(double x, double sign) const { return F == 0 ? 1.0 : std::exp(sign * F / std::max(x, x_min)); }
};

inline ConjugationWeight conjugation_weight(double F, const GridSpec& g) {
    if (F < 0) throw DomainError("F must be non-negative");
    return {F, 0.5 * g.spacing[0]};
}

// Pointwise multiplication by e^{sign·F/x}; `clamped` counts nodes below the clamp.
inline TensorField scale_weight(const TensorField& f, const ConjugationWeight& w, double sign,
                                std::size_t* clamped = nullptr) {
    TensorField out = f;
    if (w.F == 0) return out;
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < f.grid().nodes(); ++i) {
        const double x = f.grid().point(i)[0];
        if (x < w.x_min) ++cnt;
        const double s = w(x, sign);
        double* p = out.node(i);
        for (std::size_t c = 0; c < out.ncomp(); ++c) p[c] *= s;
    }
    if (clamped) *clamped += cnt;
    return out;
}

inline TensorField d_prime_F(const ChartMetric& m, const TensorField& v, double F, std::size_t* clamped = nullptr) {
    auto w = conjugation_weight(F, v.grid());
    return scale_weight(d_prime(m, scale_weight(v, w, +1, clamped)), w, -1);
}

inline TensorField d_B_F(const ChartMetric& m, const TensorField& v, double F, std::size_t* clamped = nullptr) {
    require_trace_free(v);
    return apply_B(d_prime_F(m, v, F, clamped));
}

inline TensorField delta_F(const ChartMetric& m, const TensorField& f, double F, std::size_t* clamped = nullptr) {
    auto w = conjugation_weight(F, f.grid());
    return scale_weight(delta(m, scale_weight(f, w, -1, clamped)), w, +1);
}

// Random trace-free (2,1) potential v = b(s)·(C₀ + Σ_a s_a C_a) on the grid box, with s ∈ [-1,1]³ the
// box coordinates and b = Π(1 - s_a²)², so v and ∇v vanish on the box boundary. The closed form of v
// and of its derivative gives d^B v without differencing.
struct Potential {
    std::array<double, 3> lo{}, hi{};
    std::array<SymTensor, 4> C;

    std::array<double, 3> box_coords(const Vec& z) const {
        return {2 * (z[0] - lo[0]) / (hi[0] - lo[0]) - 1, 2 * (z[1] - lo[1]) / (hi[1] - lo[1]) - 1,
                2 * (z[2] - lo[2]) / (hi[2] - lo[2]) - 1};
    }
    SymTensor value_at(const std::array<double, 3>& s) const {
        double b = 1;
        for (double u : s) b *= (1 - u * u) * (1 - u * u);
        SymTensor out = C[0];
        for (int a = 0; a < 3; ++a) out += s[a] * C[a + 1];
        return b * out;
    }
    SymTensor value(const Vec& z) const { return value_at(box_coords(z)); }
    std::array<SymTensor, 3> gradient(const Vec& z) const {
        const auto s = box_coords(z);
        std::array<double, 3> q{}, dq{};
        for (int a = 0; a < 3; ++a) {
            q[a] = (1 - s[a] * s[a]) * (1 - s[a] * s[a]);
            dq[a] = -4 * s[a] * (1 - s[a] * s[a]) * 2 / (hi[a] - lo[a]);
        }
        SymTensor poly = C[0];
        for (int a = 0; a < 3; ++a) poly += s[a] * C[a + 1];
        const double b = q[0] * q[1] * q[2];
        std::array<SymTensor, 3> d;
        for (int c = 0; c < 3; ++c) {
            double db = dq[c];
            for (int a = 0; a < 3; ++a)
                if (a != c) db *= q[a];
            d[c] = db * poly + (b * 2 / (hi[c] - lo[c])) * C[c + 1];
        }
        return d;
    }
};

inline Potential make_potential_closed_form(std::uint64_t seed, const GridSpec& g) {
    Potential p;
    const Vec lo = g.lo(), hi = g.hi();
    for (int a = 0; a < 3; ++a) {
        p.lo[a] = lo[a];
        p.hi[a] = hi[a];
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> N;
    for (auto& c : p.C) {
        RawTensor<double> r(3, 2, 1);
        for (auto& x : r.c) x = N(rng);
        c = projector_B(SymTensor::from_raw(r));
    }
    return p;
}

// d^B v of a closed-form potential, evaluated pointwise.
struct GaugeField {
    const ChartMetric* m;
    const Potential* v;
    SymTensor sample(const Vec& z) const {
        return projector_B(d_prime_point(v->value(z), v->gradient(z), christoffel_or_zero(*m, z)));
    }
};

struct PotentialPair {
    Potential closed_form;
    TensorField v;    // sampled on the grid, exactly zero on boundary nodes
    TensorField dBv;  // discrete d^B of the sampled v
};

inline PotentialPair make_potential(const ChartMetric& m, std::uint64_t seed, const GridSpec& g) {
    PotentialPair out{make_potential_closed_form(seed, g), TensorField(g, 3, 2, 1), TensorField()};
    for (std::size_t i = 0; i < g.nodes(); ++i) {
        auto p = g.ijk(i);
        std::array<double, 3> s;
        for (int a = 0; a < 3; ++a) s[a] = g.dims[a] > 1 ? 2.0 * p[a] / (g.dims[a] - 1) - 1 : 0.0;
        out.v.set(i, out.closed_form.value_at(s));
    }
    out.dBv = d_B(m, out.v);
    return out;
}

}  // namespace mixedray
