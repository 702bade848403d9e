#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "json.hpp"
#include "mixedray/field.hpp"
#include "mixedray/gauge.hpp"
#include "mixedray/geodesic.hpp"
#include "mixedray/parallel.hpp"
#include "mixedray/transforms.hpp"

namespace mixedray {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;

// Fan of rays based at every grid node: ω at the midpoints of n_ω arcs of a half circle (the other
// half gives the same geodesics reversed), λ/x at midpoints of n_λ cells over the support of χ.
struct FanSpec {
    std::size_t omega = 6;
    std::size_t lambda = 2;
};

struct SolverOptions {
    int max_iters = 300;
    double tol_rel = 1e-6;  // stop once ‖r‖ ≤ tol_rel·‖b‖
    double beta = 0.0;      // δ-penalty weight, (2,2) only
    int restart = 300;      // GCR directions kept before a restart
};

struct NormalConfig {
    double F = 8.0;
    ChiProfile chi;
    FanSpec fan;
    double h_step = 0.02;
    int l = 0;  // 0: T₂ on (2,0) fields, 2: L₂,₂ on (2,2) fields
    Interp interp = Interp::linear;
    bool sharpen = true;  // remove the mean h²/12·f'' bias of linear interpolation
    SolverOptions solver;
};

namespace detail {

inline constexpr int kIdx20[3][3] = {{0, 1, 2}, {1, 3, 4}, {2, 4, 5}};

inline Mat3 sym_from6(const double* a) {
    Mat3 M;
    M << a[0], a[1], a[2], a[1], a[3], a[4], a[2], a[4], a[5];
    return M;
}

inline void sym_to6(const Mat3& M, double* a) {
    a[0] = M(0, 0);
    a[1] = 0.5 * (M(0, 1) + M(1, 0));
    a[2] = 0.5 * (M(0, 2) + M(2, 0));
    a[3] = M(1, 1);
    a[4] = 0.5 * (M(1, 2) + M(2, 1));
    a[5] = M(2, 2);
}

// Lookup for (2,2) ordering coordinates: upper pair, lower pair and lower multiplicity per entry.
struct Table22 {
    std::array<std::array<int, 4>, 36> rep;
    std::array<double, 36> mult_lower;
    std::array<double, 36> weight;
    Eigen::Matrix<double, 36, 36> B;  // trace-free projector in ordering coordinates
};

inline const Table22& table22() {
    static const Table22 T = [] {
        Table22 t;
        auto ord = make_ordering(3, 2, 2);
        for (int q = 0; q < 36; ++q) {
            const auto& e = ord.entries[static_cast<std::size_t>(q)];
            for (int a = 0; a < 4; ++a) t.rep[q][a] = e.rep[a];
            t.mult_lower[q] = e.rep[2] == e.rep[3] ? 1.0 : 2.0;
            t.weight[q] = e.weight;
        }
        for (int q = 0; q < 36; ++q) {
            std::vector<double> u(36, 0.0);
            u[static_cast<std::size_t>(q)] = 1.0;
            auto b = vectorize(projector_B(devectorize(u, ord)), ord);
            for (int p = 0; p < 36; ++p) t.B(p, q) = b[static_cast<std::size_t>(p)];
        }
        return t;
    }();
    return T;
}

// Λ_v on ordering coordinates: (2,2) -> (2,0).
inline void lambda22(const double* f, const Vec3& v, double* out6) {
    const auto& T = table22();
    for (int p = 0; p < 6; ++p) out6[p] = 0;
    for (int q = 0; q < 36; ++q) {
        const auto& r = T.rep[q];
        out6[kIdx20[r[0]][r[1]]] += T.mult_lower[q] * f[q] * v[r[2]] * v[r[3]];
    }
}

// Weighted adjoint of Λ_v, accumulated: out^{ij}_{kl} += s·G^{ij} v_k v_l.
inline void lambda22_adjoint_add(const Mat3& G, const Vec3& v, double s, double* out36) {
    const auto& T = table22();
    for (int q = 0; q < 36; ++q) {
        const auto& r = T.rep[q];
        out36[q] += s * G(r[0], r[1]) * v[r[2]] * v[r[3]];
    }
}

// Interpolate / scatter nc-component node data through a tensor-product stencil.
inline void gather(const GridSpec& g, const Stencil3& st, const double* u, std::size_t nc, double* out) {
    for (std::size_t q = 0; q < nc; ++q) out[q] = 0;
    for (int a = 0; a < st.ax[0].count; ++a)
        for (int b = 0; b < st.ax[1].count; ++b)
            for (int c = 0; c < st.ax[2].count; ++c) {
                const double w = st.ax[0].w[a] * st.ax[1].w[b] * st.ax[2].w[c];
                if (w == 0) continue;
                const double* p = u + g.index(st.ax[0].idx[a], st.ax[1].idx[b], st.ax[2].idx[c]) * nc;
                for (std::size_t q = 0; q < nc; ++q) out[q] += w * p[q];
            }
}

inline void scatter(const GridSpec& g, const Stencil3& st, const double* v, std::size_t nc, double* u) {
    for (int a = 0; a < st.ax[0].count; ++a)
        for (int b = 0; b < st.ax[1].count; ++b)
            for (int c = 0; c < st.ax[2].count; ++c) {
                const double w = st.ax[0].w[a] * st.ax[1].w[b] * st.ax[2].w[c];
                if (w == 0) continue;
                double* p = u + g.index(st.ax[0].idx[a], st.ax[1].idx[b], st.ax[2].idx[c]) * nc;
                for (std::size_t q = 0; q < nc; ++q) p[q] += w * v[q];
            }
}

// S = Π_a (I - h_a²/12 Δ_a) with Δ_a the second difference along axis a; boundary nodes are kept.
// Linear interpolation of S u then matches the cell averages of a smooth u to fourth order, and the
// Fourier multiplier of S lies in [1, 4/3], so positivity of the ray model is untouched.
inline std::vector<double> sharpen(const GridSpec& g, std::vector<double> u, std::size_t nc, bool transpose) {
    for (int a = 0; a < 3; ++a) {
        if (g.dims[a] < 3) continue;
        std::vector<double> out = u;
        const double c = 1.0 / 12.0;
        for (std::size_t n = 0; n < g.nodes(); ++n) {
            auto p = g.ijk(n);
            if (p[a] == 0 || p[a] == g.dims[a] - 1) continue;
            auto q = p, r = p;
            q[a] -= 1;
            r[a] += 1;
            const std::size_t nm = g.index(q[0], q[1], q[2]), np = g.index(r[0], r[1], r[2]);
            for (std::size_t k = 0; k < nc; ++k) {
                const double v = u[n * nc + k];
                if (!transpose) {
                    out[n * nc + k] += c * (2 * v - u[nm * nc + k] - u[np * nc + k]);
                } else {
                    out[n * nc + k] += 2 * c * v;
                    out[nm * nc + k] -= c * v;
                    out[np * nc + k] -= c * v;
                }
            }
        }
        u = std::move(out);
    }
    return u;
}

}  // namespace detail

// Discretized ray family with everything needed to apply T₂/L₂,₂, their backprojections, and the
// exact transposes of both.
class RaySystem {
public:
    struct Sample {
        Vec3 z, v;
        Mat3 A;  // sqrt(trapezoid weight) · E(t) p_{γ̇,ϑ}
    };
    struct Entry {
        std::size_t node;
        double weight;  // fan quadrature weight with χ and the x-power prefactor folded in
        Mat3 Q;         // Id - ω∂y ⊗ g(ζ)/h(ω,ω)
        Vec3 gz;        // g(ζ)
        std::uint32_t begin, end;
        Ray ray;
    };

    RaySystem(const ChartMetric& m, const GridSpec& g, const NormalConfig& cfg)
        : grid_(g), l_(cfg.l), interp_(cfg.interp), sharpen_(cfg.sharpen) {
        if (cfg.l != 0 && cfg.l != 2) throw ValenceError("normal operator for (2,0) or (2,2) only");
        if (cfg.fan.omega == 0 || cfg.fan.lambda == 0) throw ConfigError("fan counts must be positive");
        const double smax = cfg.chi.support();
        const double ds = 2 * smax / static_cast<double>(cfg.fan.lambda);
        const double dw = 2 * M_PI / static_cast<double>(cfg.fan.omega);  // half circle, counted twice
        struct Pending {
            Entry e;
            std::vector<Sample> s;
        };
        std::vector<Pending> pend(g.nodes() * cfg.fan.omega * cfg.fan.lambda);
        std::vector<char> ok(pend.size(), 0);
        parallel_for(g.nodes(), [&](std::size_t n) {
            const Vec z = g.point(n);
            if (!in_patch_Op(m, z)) return;
            const double x = z[0];
            const double xpow = cfg.l == 0 ? 1.0 / (x * x) : x * x;
            for (std::size_t o = 0; o < cfg.fan.omega; ++o) {
                const double phi = M_PI * (static_cast<double>(o) + 0.5) / static_cast<double>(cfg.fan.omega);
                Vec om(2);
                om << std::cos(phi), std::sin(phi);
                for (std::size_t q = 0; q < cfg.fan.lambda; ++q) {
                    const double s = -smax + (static_cast<double>(q) + 0.5) * ds;
                    const std::size_t slot = (n * cfg.fan.omega + o) * cfg.fan.lambda + q;
                    try {
                        Ray r = make_ray(m, z, s * x, om);
                        const Vec zeta = r.zeta();
                        const Vec th = conormal_covector(m, z, zeta);
                        Geodesic geo = shoot_ray(m, z, zeta, cfg.h_step);
                        const auto ops = projection_transport_ops(m, geo, th);
                        const auto tw = trapezoid_weights(geo);
                        Pending& P = pend[slot];
                        for (std::size_t i = 0; i < geo.size(); ++i) {
                            if (tw[i] == 0) continue;
                            Sample sm;
                            sm.z = geo.nodes[i].z;
                            sm.v = geo.nodes[i].v;
                            sm.A = std::sqrt(tw[i]) * ops[i];
                            P.s.push_back(sm);
                        }
                        const Mat G = m.g(z);
                        Vec3 e_om(0, om[0], om[1]);
                        const double hww = om.dot(G.block(1, 1, 2, 2) * om);
                        P.e.gz = G * zeta;
                        P.e.Q = Mat3::Identity() - e_om * P.e.gz.transpose() / hww;
                        P.e.node = n;
                        P.e.weight = xpow * cfg.chi(s) * ds * x * dw;
                        P.e.ray = r;
                        ok[slot] = 1;
                    } catch (const DegeneratePairingError&) {
                    } catch (const RejectedRayError&) {
                    } catch (const TrappedRayError&) {
                    }
                }
            }
        });
        for (std::size_t i = 0; i < pend.size(); ++i) {
            if (!ok[i]) {
                ++dropped_;
                continue;
            }
            Entry e = pend[i].e;
            e.begin = static_cast<std::uint32_t>(samples_.size());
            samples_.insert(samples_.end(), pend[i].s.begin(), pend[i].s.end());
            e.end = static_cast<std::uint32_t>(samples_.size());
            entries_.push_back(e);
        }
        node_begin_.assign(g.nodes() + 1, 0);
        for (const auto& e : entries_) node_begin_[e.node + 1]++;
        for (std::size_t n = 0; n < g.nodes(); ++n) node_begin_[n + 1] += node_begin_[n];
        sten_.resize(samples_.size());
        parallel_for(samples_.size(), [&](std::size_t i) { sten_[i] = make_stencil(grid_, samples_[i].z, cfg.interp); });
    }

    const GridSpec& grid() const { return grid_; }
    int l() const { return l_; }
    std::size_t ncomp() const { return l_ == 0 ? 6 : 36; }
    std::size_t rays() const { return entries_.size(); }
    std::size_t dropped() const { return dropped_; }
    std::size_t samples() const { return samples_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }
    Interp interp() const { return interp_; }

    // Node values of the field the model represents by u (identity unless u holds spline coefficients).
    std::vector<double> nodal(const std::vector<double>& u) const {
        if (interp_ != Interp::bspline) return u;
        const std::size_t nc = ncomp();
        std::vector<double> out(u.size());
        parallel_for(grid_.nodes(), [&](std::size_t n) {
            detail::gather(grid_, make_stencil(grid_, grid_.point(n), interp_), u.data(), nc, out.data() + n * nc);
        });
        return out;
    }

    // Ray data (6 per ray) from a grid field in ordering coordinates.
    std::vector<double> forward(const std::vector<double>& u0) const {
        const std::size_t nc = ncomp();
        const std::vector<double> u = sharpen_ ? detail::sharpen(grid_, u0, nc, false) : u0;
        std::vector<double> out(6 * entries_.size(), 0.0);
        parallel_for(entries_.size(), [&](std::size_t r) {
            const auto& e = entries_[r];
            Mat3 acc = Mat3::Zero();
            double f[36], c6[6];
            for (std::uint32_t i = e.begin; i < e.end; ++i) {
                const auto& s = samples_[i];
                detail::gather(grid_, sten_[i], u.data(), nc, f);
                if (l_ == 2) {
                    detail::lambda22(f, s.v, c6);
                    acc += s.A * detail::sym_from6(c6) * s.A.transpose();
                } else {
                    acc += s.A * detail::sym_from6(f) * s.A.transpose();
                }
            }
            detail::sym_to6(acc, out.data() + 6 * r);
        });
        return out;
    }

    // Exact weighted adjoint of forward.
    std::vector<double> forward_adjoint(const std::vector<double>& data) const {
        const std::size_t nc = ncomp();
        const std::size_t nt = std::max<std::size_t>(1, std::min<std::size_t>(thread_cap().load(), entries_.size()));
        std::vector<std::vector<double>> part(nt, std::vector<double>(grid_.nodes() * nc, 0.0));
        parallel_for(nt, [&](std::size_t t) {
            auto& out = part[t];
            const std::size_t a = entries_.size() * t / nt, b = entries_.size() * (t + 1) / nt;
            double g[36];
            for (std::size_t r = a; r < b; ++r) {
                const auto& e = entries_[r];
                const Mat3 G = detail::sym_from6(data.data() + 6 * r);
                for (std::uint32_t i = e.begin; i < e.end; ++i) {
                    const auto& s = samples_[i];
                    const Mat3 H = s.A.transpose() * G * s.A;
                    if (l_ == 2) {
                        for (int q = 0; q < 36; ++q) g[q] = 0;
                        detail::lambda22_adjoint_add(H, s.v, 1.0, g);
                    } else {
                        detail::sym_to6(H, g);
                    }
                    detail::scatter(grid_, sten_[i], g, nc, out.data());
                }
            }
        });
        for (std::size_t t = 1; t < nt; ++t)
            for (std::size_t i = 0; i < part[0].size(); ++i) part[0][i] += part[t][i];
        return sharpen_ ? detail::sharpen(grid_, std::move(part[0]), nc, true) : part[0];
    }

    // T₂′ (l = 0) or L₂₂′ followed by B (l = 2).
    std::vector<double> backproject(const std::vector<double>& data) const {
        const std::size_t nc = ncomp();
        const auto& T = detail::table22();
        std::vector<double> out(grid_.nodes() * nc, 0.0);
        parallel_for(grid_.nodes(), [&](std::size_t n) {
            Mat3 acc = Mat3::Zero();
            if (l_ == 0) {
                for (std::size_t r = node_begin_[n]; r < node_begin_[n + 1]; ++r) {
                    const auto& e = entries_[r];
                    acc += e.weight * e.Q * detail::sym_from6(data.data() + 6 * r) * e.Q.transpose();
                }
                detail::sym_to6(acc, out.data() + n * nc);
                return;
            }
            double raw[36] = {0};
            for (std::size_t r = node_begin_[n]; r < node_begin_[n + 1]; ++r) {
                const auto& e = entries_[r];
                const Mat3 U = e.Q * detail::sym_from6(data.data() + 6 * r) * e.Q.transpose();
                detail::lambda22_adjoint_add(U, e.gz, e.weight, raw);
            }
            Eigen::Map<Eigen::Matrix<double, 36, 1>> o(out.data() + n * nc);
            o = T.B * Eigen::Map<Eigen::Matrix<double, 36, 1>>(raw);
        });
        return out;
    }

    std::vector<double> backproject_adjoint(const std::vector<double>& u) const {
        const std::size_t nc = ncomp();
        const auto& T = detail::table22();
        std::vector<double> out(6 * entries_.size(), 0.0);
        parallel_for(entries_.size(), [&](std::size_t r) {
            const auto& e = entries_[r];
            const double* p = u.data() + e.node * nc;
            Mat3 U;
            if (l_ == 0) {
                U = detail::sym_from6(p);
            } else {
                Eigen::Matrix<double, 36, 1> bu = T.B * Eigen::Map<const Eigen::Matrix<double, 36, 1>>(p);
                double c6[6];
                detail::lambda22(bu.data(), e.gz, c6);
                U = detail::sym_from6(c6);
            }
            detail::sym_to6(e.weight * e.Q.transpose() * U * e.Q, out.data() + 6 * r);
        });
        return out;
    }

private:
    GridSpec grid_;
    int l_ = 0;
    Interp interp_ = Interp::linear;
    bool sharpen_ = true;
    std::vector<Entry> entries_;
    std::vector<Sample> samples_;
    std::vector<Stencil3> sten_;
    std::vector<std::size_t> node_begin_;
    std::size_t dropped_ = 0;
};

// Weighted inner product on flat arrays of ordering coordinates.
inline double weighted_dot(const std::vector<double>& a, const std::vector<double>& b, const InnerWeights& W) {
    const std::size_t nc = W.size();
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += W.w[i % nc] * a[i] * b[i];
    return s;
}

// Grid-level operators around the ray system: conjugation, N_F, its adjoint, and the δ penalty.
class NormalOperator {
public:
    NormalOperator(const ChartMetric& m, const RaySystem& rs, double F)
        : m_(&m), rs_(&rs), F_(F), wu_(inner_weights(make_ordering(3, 2, rs.l()))) {
        if (F < 0) throw DomainError("F must be non-negative");
        const auto& g = rs.grid();
        ep_.resize(g.nodes());
        em_.resize(g.nodes());
        const ConjugationWeight cw = conjugation_weight(F, g);
        for (std::size_t i = 0; i < g.nodes(); ++i) {
            const double x = g.point(i)[0];
            if (x < cw.x_min) ++clamped_;
            ep_[i] = cw(x, +1);
            em_[i] = cw(x, -1);
        }
        if (rs.l() == 2) build_delta();
    }

    const RaySystem& rays() const { return *rs_; }
    const InnerWeights& weights() const { return wu_; }
    double F() const { return F_; }
    std::size_t clamped() const { return clamped_; }
    std::size_t size() const { return rs_->grid().nodes() * rs_->ncomp(); }

    std::vector<double> scale(std::vector<double> u, const std::vector<double>& e) const {
        const std::size_t nc = rs_->ncomp();
        for (std::size_t i = 0; i < u.size(); ++i) u[i] *= e[i / nc];
        return u;
    }
    std::vector<double> conj_up(const std::vector<double>& u) const { return scale(u, ep_); }
    std::vector<double> conj_down(const std::vector<double>& u) const { return scale(u, em_); }

    std::vector<double> project_B(std::vector<double> u) const {
        if (rs_->l() != 2) return u;
        const auto& T = detail::table22();
        for (std::size_t n = 0; n < rs_->grid().nodes(); ++n) {
            Eigen::Map<Eigen::Matrix<double, 36, 1>> p(u.data() + n * 36);
            Eigen::Matrix<double, 36, 1> b = T.B * p;
            p = b;
        }
        return u;
    }

    // N_F u = e^{-F/x} backproject(forward(e^{F/x} u)); B applied on input for (2,2).
    std::vector<double> apply(const std::vector<double>& u) const {
        return conj_down(rs_->backproject(rs_->forward(conj_up(project_B(u)))));
    }
    std::vector<double> apply_adjoint(const std::vector<double>& v) const {
        return project_B(conj_up(rs_->forward_adjoint(rs_->backproject_adjoint(conj_down(v)))));
    }

    // δ_F = e^{F/x} δ e^{-F/x} on (2,2) grid arrays -> (2,1) grid arrays, and its weighted adjoint.
    std::vector<double> delta_F(const std::vector<double>& u) const {
        const auto& g = rs_->grid();
        TensorField f(g, 3, 2, 2);
        f.data() = conj_down(u);
        const auto df = grid_gradient(f);
        std::vector<double> out(g.nodes() * 18, 0.0);
        for (std::size_t n = 0; n < g.nodes(); ++n) {
            Eigen::Map<Eigen::Matrix<double, 18, 1>> o(out.data() + n * 18);
            for (int c = 0; c < 3; ++c) o += Lc_[c] * Eigen::Map<const Eigen::Matrix<double, 36, 1>>(df[c].node(n));
            if (!LG_.empty()) o += LG_[n] * Eigen::Map<const Eigen::Matrix<double, 36, 1>>(f.node(n));
            o *= ep_[n];
        }
        return out;
    }
    std::vector<double> delta_F_adjoint(const std::vector<double>& w) const {
        const auto& g = rs_->grid();
        std::array<TensorField, 3> parts{TensorField(g, 3, 2, 2), TensorField(g, 3, 2, 2), TensorField(g, 3, 2, 2)};
        std::vector<double> direct(g.nodes() * 36, 0.0);
        for (std::size_t n = 0; n < g.nodes(); ++n) {
            Eigen::Matrix<double, 18, 1> wn = ep_[n] * Eigen::Map<const Eigen::Matrix<double, 18, 1>>(w.data() + n * 18);
            for (int c = 0; c < 3; ++c) Eigen::Map<Eigen::Matrix<double, 36, 1>>(parts[c].node(n)) = LcT_[c] * wn;
            if (!LG_.empty()) Eigen::Map<Eigen::Matrix<double, 36, 1>>(direct.data() + n * 36) = LGT_[n] * wn;
        }
        TensorField acc = grid_gradient_transpose(parts);
        for (std::size_t i = 0; i < direct.size(); ++i) acc.data()[i] += direct[i];
        return conj_down(acc.data());
    }

private:
    using M1836 = Eigen::Matrix<double, 18, 36>;
    using M3618 = Eigen::Matrix<double, 36, 18>;

    void build_delta() {
        const auto o22 = make_ordering(3, 2, 2), o21 = make_ordering(3, 2, 1);
        const auto W22 = inner_weights(o22), W21 = inner_weights(o21);
        auto weighted_T = [&](const M1836& L) {
            M3618 A;
            for (int i = 0; i < 36; ++i)
                for (int j = 0; j < 18; ++j) A(i, j) = L(j, i) * W21.w[static_cast<std::size_t>(j)] / W22.w[static_cast<std::size_t>(i)];
            return A;
        };
        Christoffel G0;
        for (auto& x : G0) x = Mat::Zero(3, 3);
        SymTensor zero(3, 2, 2);
        for (int c = 0; c < 3; ++c) {
            for (int q = 0; q < 36; ++q) {
                std::vector<double> e(36, 0.0);
                e[static_cast<std::size_t>(q)] = 1.0;
                std::array<SymTensor, 3> d{zero, zero, zero};
                d[c] = devectorize(e, o22);
                auto col = vectorize(delta_point(zero, d, G0), o21);
                for (int p = 0; p < 18; ++p) Lc_[c](p, q) = col[static_cast<std::size_t>(p)];
            }
            LcT_[c] = weighted_T(Lc_[c]);
        }
        if (m_->name == "euclidean") return;
        const auto& g = rs_->grid();
        LG_.resize(g.nodes());
        LGT_.resize(g.nodes());
        parallel_for(g.nodes(), [&](std::size_t n) {
            const Christoffel G = christoffel(*m_, g.point(n), false);
            std::array<SymTensor, 3> d{zero, zero, zero};
            for (int q = 0; q < 36; ++q) {
                std::vector<double> e(36, 0.0);
                e[static_cast<std::size_t>(q)] = 1.0;
                auto col = vectorize(delta_point(devectorize(e, o22), d, G), o21);
                for (int p = 0; p < 18; ++p) LG_[n](p, q) = col[static_cast<std::size_t>(p)];
            }
            LGT_[n] = weighted_T(LG_[n]);
        });
    }

    const ChartMetric* m_;
    const RaySystem* rs_;
    double F_;
    InnerWeights wu_;
    std::vector<double> ep_, em_;
    std::size_t clamped_ = 0;
    std::array<M1836, 3> Lc_;
    std::array<M3618, 3> LcT_;
    std::vector<M1836, Eigen::aligned_allocator<M1836>> LG_;
    std::vector<M3618, Eigen::aligned_allocator<M3618>> LGT_;
};

struct SolveResult {
    std::vector<double> u;              // solution of the conjugated system
    std::vector<double> residual;  // ‖r_k‖, k = 0..iters
    int iters = 0;
    bool converged = false;
    bool monotone = true;
};

// Generalized conjugate residual on K = [N_F; √β δ_F] against [b; 0]. New directions are the N_F
// block of the residual; their images are kept mutually orthogonal, so each step minimizes
// ‖N_F u - b‖² + β‖δ_F u‖² over all directions so far and the residual never grows. At β = 0 this
// is plain GCR on N_F, which only sees κ(N_F) where the normal equations of N_F would see κ².
inline SolveResult gcr(const NormalOperator& N, const std::vector<double>& b, const SolverOptions& opt,
                       const std::function<void(int, double)>& progress = nullptr) {
    if (!(opt.tol_rel > 0 && opt.tol_rel < 1)) throw ConfigError("tol_rel must lie in (0,1)");
    if (opt.max_iters < 1) throw ConfigError("max_iters must be positive");
    if (opt.restart < 1) throw ConfigError("restart must be positive");
    if (opt.beta < 0) throw ConfigError("beta must be non-negative");
    if (opt.beta > 0 && N.rays().l() != 2) throw ConfigError("the δ penalty applies to (2,2) only");
    const bool pen = opt.beta > 0;
    const auto& W = N.weights();
    const auto W21 = inner_weights(make_ordering(3, 2, 1));
    const double sb = std::sqrt(opt.beta);
    struct Stacked {
        std::vector<double> a, d;
    };
    auto dot = [&](const Stacked& x, const Stacked& y) {
        return weighted_dot(x.a, y.a, W) + (pen ? weighted_dot(x.d, y.d, W21) : 0.0);
    };
    auto K = [&](const std::vector<double>& p) {
        Stacked q{N.apply(p), {}};
        if (pen) {
            q.d = N.delta_F(p);
            for (auto& v : q.d) v *= sb;
        }
        return q;
    };
    SolveResult R;
    R.u.assign(b.size(), 0.0);
    Stacked r{b, std::vector<double>(pen ? N.rays().grid().nodes() * 18 : 0, 0.0)};
    std::vector<std::vector<double>> P;
    std::vector<Stacked> KP;
    const double r0 = std::sqrt(dot(r, r));
    R.residual.push_back(r0);
    if (r0 == 0) {
        R.converged = true;
        return R;
    }
    for (int k = 0; k < opt.max_iters; ++k) {
        if (static_cast<int>(P.size()) >= opt.restart) {
            P.clear();
            KP.clear();
        }
        std::vector<double> p = N.project_B(r.a);
        Stacked q = K(p);
        for (int pass = 0; pass < 2; ++pass)  // twice for orthogonality in floating point
            for (std::size_t j = 0; j < P.size(); ++j) {
                const double c = dot(q, KP[j]);
                for (std::size_t i = 0; i < p.size(); ++i) p[i] -= c * P[j][i];
                for (std::size_t i = 0; i < q.a.size(); ++i) q.a[i] -= c * KP[j].a[i];
                for (std::size_t i = 0; i < q.d.size(); ++i) q.d[i] -= c * KP[j].d[i];
            }
        const double nq = std::sqrt(dot(q, q));
        if (!(nq > 1e-14 * r0)) break;  // Krylov space exhausted
        for (auto& v : p) v /= nq;
        for (auto& v : q.a) v /= nq;
        for (auto& v : q.d) v /= nq;
        const double alpha = dot(r, q);
        for (std::size_t i = 0; i < p.size(); ++i) R.u[i] += alpha * p[i];
        for (std::size_t i = 0; i < r.a.size(); ++i) r.a[i] -= alpha * q.a[i];
        for (std::size_t i = 0; i < r.d.size(); ++i) r.d[i] -= alpha * q.d[i];
        P.push_back(std::move(p));
        KP.push_back(std::move(q));
        R.iters = k + 1;
        R.residual.push_back(std::sqrt(dot(r, r)));
        if (R.residual.back() > R.residual[R.residual.size() - 2] * (1 + 1e-12)) R.monotone = false;
        if (progress) progress(R.iters, R.residual.back());
        if (R.residual.back() <= opt.tol_rel * r0) {
            R.converged = true;
            break;
        }
    }
    return R;
}

// Largest eigenvalue of a weighted-self-adjoint PSD map, by power iteration from a fixed start.
inline double power_norm(const std::function<std::vector<double>(const std::vector<double>&)>& op, std::size_t n,
                         const InnerWeights& W, int iters = 12) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
    double lam = 0;
    for (int k = 0; k < iters; ++k) {
        const double nv = std::sqrt(weighted_dot(v, v, W));
        for (auto& x : v) x /= nv;
        auto w = op(v);
        lam = weighted_dot(v, w, W);
        v = std::move(w);
    }
    return lam;
}

// β = rel · ‖N_F‖² / ‖δ_F*δ_F‖: the penalty then weighs `rel` against the data term at the grid
// scale, whatever the overall size of N_F (which shrinks like e^{-F/x}).
inline double default_beta(const NormalOperator& N, double rel = 1e-2) {
    if (N.rays().l() != 2) return 0.0;
    const auto& W = N.weights();
    const double nn = power_norm([&](const std::vector<double>& v) { return N.apply_adjoint(N.apply(v)); }, N.size(), W);
    const double dd = power_norm([&](const std::vector<double>& v) { return N.project_B(N.delta_F_adjoint(N.delta_F(v))); },
                                 N.size(), W);
    return dd > 0 ? rel * nn / dd : 0.0;
}

struct InversionResult {
    TensorField field;  // e^{F/x}·u, the reconstructed tensor field
    SolveResult solve;
    std::size_t rays = 0;
    std::size_t clamped = 0;
};

// b = e^{-F/x}·backproject(data), solve N_F u ≈ b, return e^{F/x} u.
inline InversionResult invert(const NormalOperator& N, const std::vector<double>& data, const SolverOptions& opt,
                              const std::function<void(int, double)>& progress = nullptr) {
    const auto& rs = N.rays();
    if (data.size() != 6 * rs.rays()) throw ShapeError("data length does not match the ray system");
    std::vector<double> b = N.conj_down(rs.backproject(data));
    InversionResult out;
    out.solve = gcr(N, b, opt, progress);
    out.field = TensorField(rs.grid(), 3, 2, rs.l());
    out.field.data() = N.conj_up(N.project_B(rs.nodal(out.solve.u)));
    out.rays = rs.rays();
    out.clamped = N.clamped();
    return out;
}

// Data for a point-evaluable field along the system's rays (finer quadrature than the model).
template <FieldLike Field>
std::vector<double> ray_data(const ChartMetric& m, const RaySystem& rs, const Field& f, double h_step) {
    std::vector<double> out(6 * rs.rays(), 0.0);
    const auto ord = make_ordering(3, 2, 0);
    parallel_for(rs.rays(), [&](std::size_t r) {
        auto v = vectorize(forward_mixed(m, f, rs.entries()[r].ray, h_step, rs.l()), ord);
        std::copy(v.begin(), v.end(), out.begin() + 6 * static_cast<std::ptrdiff_t>(r));
    });
    return out;
}

inline double relative_l2(const TensorField& a, const TensorField& ref) {
    const double d = (a - ref).norm(), n = ref.norm();
    return n > 0 ? d / n : d;
}

// Relative asymmetry |⟨N f, g⟩ - ⟨f, N g⟩| / (‖N f‖‖g‖).
inline double asymmetry(const NormalOperator& N, const std::vector<double>& f, const std::vector<double>& g) {
    const auto& W = N.weights();
    const auto Nf = N.apply(f), Ng = N.apply(g);
    const double a = weighted_dot(Nf, g, W), b = weighted_dot(f, Ng, W);
    return std::abs(a - b) / std::sqrt(weighted_dot(Nf, Nf, W) * weighted_dot(g, g, W));
}

inline nlohmann::json to_json(const SolveResult& s) {
    nlohmann::json j;
    j["iters"] = s.iters;
    j["converged"] = s.converged;
    j["monotone"] = s.monotone;
    j["residual"] = s.residual;
    return j;
}

}  // namespace mixedray
