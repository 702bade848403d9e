#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixedray/error.hpp"
#include "mixedray/parallel.hpp"
#include "mixedray/tensor.hpp"

namespace mixedray {

using cd = std::complex<double>;
using CMat = Eigen::MatrixXcd;
using CVec = Eigen::VectorXcd;
using RMat = Eigen::MatrixXd;
using Vec2 = Eigen::Vector2d;
using Vec3c = Eigen::Vector3cd;
using Mat3c = Eigen::Matrix3cd;

// Symmetric (k,l) tensors at n = 3 seen three ways: redundant component arrays (length 3^(k+l)),
// ordering coordinates (one entry per BasisOrdering label), and congruence coordinates W^{1/2}v.
struct RedundantSpace {
    int k = 0, l = 0;
    Eigen::Index N = 0, d = 0;
    BasisOrdering ord;
    RMat E;       // N×d, ordering -> redundant
    RMat S;       // d×N, redundant -> ordering (picks the representative)
    RMat P;       // N×N symmetrizer
    RMat Wsqrt;   // d×d
    RMat Wisqrt;  // d×d
    CMat Ec() const { return E.cast<cd>(); }
    CMat Sc() const { return S.cast<cd>(); }
    CMat Pc() const { return P.cast<cd>(); }
};

namespace detail {

inline RedundantSpace build_space(int k, int l) {
    RedundantSpace sp;
    sp.k = k;
    sp.l = l;
    sp.ord = make_ordering(3, k, l);
    sp.N = static_cast<Eigen::Index>(ipow(3, k + l));
    sp.d = static_cast<Eigen::Index>(sp.ord.size());
    sp.E = RMat::Zero(sp.N, sp.d);
    sp.S = RMat::Zero(sp.d, sp.N);
    sp.P = RMat::Zero(sp.N, sp.N);
    sp.Wsqrt = RMat::Zero(sp.d, sp.d);
    sp.Wisqrt = RMat::Zero(sp.d, sp.d);
    for (Eigen::Index q = 0; q < sp.d; ++q) {
        const auto& e = sp.ord.entries[static_cast<std::size_t>(q)];
        SymTensor f(3, k, l);
        f.set(e.rep, 1.0);
        for (Eigen::Index a = 0; a < sp.N; ++a) sp.E(a, q) = f[static_cast<std::size_t>(a)];
        sp.S(q, static_cast<Eigen::Index>(flatten(e.rep, 3))) = 1.0;
        sp.Wsqrt(q, q) = std::sqrt(e.weight);
        sp.Wisqrt(q, q) = 1.0 / std::sqrt(e.weight);
    }
    for (Eigen::Index j = 0; j < sp.N; ++j) {
        RawTensor<double> r(3, k, l);
        r.c[static_cast<std::size_t>(j)] = 1.0;
        auto s = symmetrize(r, Slots::both);
        for (Eigen::Index a = 0; a < sp.N; ++a) sp.P(a, j) = s.c[static_cast<std::size_t>(a)];
    }
    return sp;
}

inline Eigen::Index f2(int i, int j) { return i * 3 + j; }
inline Eigen::Index f3(int i, int j, int k) { return (i * 3 + j) * 3 + k; }
inline Eigen::Index f4(int i, int j, int k, int l) { return ((i * 3 + j) * 3 + k) * 3 + l; }

}  // namespace detail

inline const RedundantSpace& redundant_space(int k, int l) {
    static const std::array<RedundantSpace, 5> spaces = {detail::build_space(1, 0), detail::build_space(1, 1),
                                                         detail::build_space(2, 0), detail::build_space(2, 1),
                                                         detail::build_space(2, 2)};
    if (k == 1 && l == 0) return spaces[0];
    if (k == 1 && l == 1) return spaces[1];
    if (k == 2 && l == 0) return spaces[2];
    if (k == 2 && l == 1) return spaces[3];
    if (k == 2 && l == 2) return spaces[4];
    throw ValenceError("no redundant space for this valence");
}

// Redundant-coordinate operator to ordering coordinates.
inline CMat to_ordering(const CMat& Mr, const RedundantSpace& out, const RedundantSpace& in) {
    return out.Sc() * Mr * in.Ec();
}

// Adjoint with respect to the weighted inner products of the two spaces.
inline CMat weighted_adjoint(const CMat& A, const RedundantSpace& out, const RedundantSpace& in) {
    RMat Wout = out.Wsqrt * out.Wsqrt, Win_inv = in.Wisqrt * in.Wisqrt;
    return Win_inv.cast<cd>() * A.adjoint() * Wout.cast<cd>();
}

// Matrix of an operator on (2,0) tensors given as a map on symmetric 3×3 component matrices.
inline CMat matrix_from_block_fn(const std::function<Mat3c(const Mat3c&)>& fn) {
    const auto& sp = redundant_space(2, 0);
    CMat M(sp.d, sp.d);
    for (Eigen::Index q = 0; q < sp.d; ++q) {
        Mat3c G;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) G(i, j) = sp.E(detail::f2(i, j), q);
        Mat3c O = fn(G);
        for (Eigen::Index p = 0; p < sp.d; ++p) {
            const auto& rep = sp.ord.entries[static_cast<std::size_t>(p)].rep;
            M(p, q) = O(rep[0], rep[1]);
        }
    }
    return M;
}

namespace detail {

struct Blocks20 {
    cd xx;
    Eigen::Vector2cd xy;
    Eigen::Matrix2cd yy;
};

inline Blocks20 split(const Mat3c& G) {
    return {G(0, 0), Eigen::Vector2cd(G(0, 1), G(0, 2)), G.block<2, 2>(1, 1)};
}

inline Mat3c join(const Blocks20& b) {
    Mat3c O;
    O(0, 0) = b.xx;
    O(0, 1) = O(1, 0) = b.xy[0];
    O(0, 2) = O(2, 0) = b.xy[1];
    O.block<2, 2>(1, 1) = b.yy;
    return O;
}

inline Eigen::Matrix2cd sym_outer(const Eigen::Vector2cd& a, const Eigen::Vector2cd& b) {
    return 0.5 * (a * b.transpose() + b * a.transpose());
}

}  // namespace detail

// Left factor of the fiber-infinity (2,0) integrand, entry by entry as displayed.
inline CMat fiber_left_displayed_20(double S, const Vec2& Yr) {
    const Eigen::Vector2cd Y = Yr.cast<cd>();
    const Eigen::Matrix2cd YY = Y * Y.transpose(), I = Eigen::Matrix2cd::Identity();
    return matrix_from_block_fn([&](const Mat3c& G) {
        auto g = detail::split(G);
        detail::Blocks20 o;
        o.xx = g.xx;
        o.xy = -S * Y * g.xx + (I - YY) * g.xy;
        const cd Yg = (Y.transpose() * g.xy)(0);
        o.yy = S * S * YY * g.xx - 2.0 * S * detail::sym_outer(Y, g.xy) + 2.0 * S * YY * Yg + g.yy -
               2.0 * detail::sym_outer(Y, g.yy * Y) + YY * (Y.transpose() * g.yy * Y)(0);
        return detail::join(o);
    });
}

// Right factor of the fiber-infinity (2,0) integrand as displayed.
inline CMat fiber_right_displayed_20(double S, const Vec2& Yr) {
    const Eigen::Vector2cd Y = Yr.cast<cd>();
    const Eigen::Matrix2cd YY = Y * Y.transpose(), I = Eigen::Matrix2cd::Identity();
    return matrix_from_block_fn([&](const Mat3c& G) {
        auto g = detail::split(G);
        const cd yyy = (Y.transpose() * g.yy * Y)(0);
        detail::Blocks20 o;
        o.xx = g.xx - 2.0 * S * (Y.transpose() * g.xy)(0) + S * S * yyy;
        o.xy = (I - YY) * g.xy - S * g.yy * Y + S * Y * yyy;
        o.yy = g.yy - 2.0 * detail::sym_outer(Y, g.yy * Y) + YY * yyy;
        return detail::join(o);
    });
}

// Base-infinity factors as displayed, with c = (Ŷ·η_F)/(ξ_F²+1).
inline CMat base_left_displayed_20(double xiF, const Vec2& etaF, const Vec2& Yr) {
    const Eigen::Vector2cd Y = Yr.cast<cd>();
    const Eigen::Matrix2cd YY = Y * Y.transpose(), I = Eigen::Matrix2cd::Identity();
    const cd zp(xiF, 1.0);
    const double c = Yr.dot(etaF) / (xiF * xiF + 1);
    return matrix_from_block_fn([&](const Mat3c& G) {
        auto g = detail::split(G);
        detail::Blocks20 o;
        o.xx = g.xx;
        o.xy = 2.0 * zp * c * Y * g.xx + (I - YY) * g.xy;
        o.yy = zp * zp * c * c * YY * g.xx +
               zp * c * (detail::sym_outer(Y, g.xy) - YY * (Y.transpose() * g.xy)(0)) + g.yy -
               2.0 * detail::sym_outer(Y, g.yy * Y) + YY * (Y.transpose() * g.yy * Y)(0);
        return detail::join(o);
    });
}

inline CMat base_right_displayed_20(double xiF, const Vec2& etaF, const Vec2& Yr) {
    const Eigen::Vector2cd Y = Yr.cast<cd>();
    const Eigen::Matrix2cd YY = Y * Y.transpose(), I = Eigen::Matrix2cd::Identity();
    const cd zm(xiF, -1.0);
    const double c = Yr.dot(etaF) / (xiF * xiF + 1);
    return matrix_from_block_fn([&](const Mat3c& G) {
        auto g = detail::split(G);
        const cd yyy = (Y.transpose() * g.yy * Y)(0);
        detail::Blocks20 o;
        o.xx = g.xx + 2.0 * zm * c * (Y.transpose() * g.xy)(0) + zm * zm * c * c * yyy;
        o.xy = (I - YY) * g.xy + zm * c * (g.yy * Y - Y * yyy);
        o.yy = g.yy - 2.0 * detail::sym_outer(Y, g.yy * Y) + YY * yyy;
        return detail::join(o);
    });
}

// Slot-pair action out^{ij} = Q^i_a Q^j_b f^{ab} on redundant (2,0) components.
inline CMat slot_pair_map(const Mat3c& Q) {
    CMat M = CMat::Zero(9, 9);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) M(detail::f2(i, j), detail::f2(a, b)) += Q(i, a) * Q(j, b);
    return M;
}

// R(s) = P_{w,v} with w = (s, Ŷ), v = (0, Ŷ); s may be complex.
inline Mat3c projection_q(cd s, const Vec2& Y) {
    Vec3c w(s, Y[0], Y[1]), v(0.0, Y[0], Y[1]);
    return Mat3c::Identity() - w * v.transpose();
}

inline CMat R20(cd s, const Vec2& Y) {
    const auto& sp = redundant_space(2, 0);
    return to_ordering(slot_pair_map(projection_q(s, Y)), sp, sp);
}

// Λ_w on redundant (2,2) components: out^{ij} = f^{ij}_{kl} w^k w^l.
inline CMat lambda_map(const Vec3c& w) {
    CMat M = CMat::Zero(9, 81);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k)
                for (int l = 0; l < 3; ++l) M(detail::f2(i, j), detail::f4(i, j, k, l)) += w[k] * w[l];
    return M;
}

// (2,2) -> (2,0) factor R(s)∘Λ_{(s,Ŷ)} in ordering coordinates (6×36).
inline CMat A22(cd s, const Vec2& Y) {
    const auto& s20 = redundant_space(2, 0);
    const auto& s22 = redundant_space(2, 2);
    Vec3c w(s, Y[0], Y[1]);
    return s20.Sc() * slot_pair_map(projection_q(s, Y)) * lambda_map(w) * s22.Ec();
}

// Front-face kernel of the (2,0) normal operator with the transport factors for H Ŷ = α Ŷ,
// without the scalar prefactor e^{-FX}|Y|^{-n+1}χ(S).
inline CMat kernel_matrix_20(double S, const Vec2& Y, double alpha, double absY);

// Fiber-infinity (2,0) integrand without χ(S̃): displayed left factor times displayed right factor.
inline CMat fiber_matrix_20(double S, const Vec2& Y) { return fiber_left_displayed_20(S, Y) * fiber_right_displayed_20(S, Y); }

inline cd base_shift(double xiF, const Vec2& etaF, const Vec2& Y) {
    return -cd(xiF, -1.0) * (Y.dot(etaF) / (xiF * xiF + 1));
}

inline double base_weight(double xiF, const Vec2& etaF, const Vec2& Y, double F) {
    const double p = Y.dot(etaF);
    return std::exp(-p * p * F / 2) / std::sqrt(xiF * xiF + 1);
}

// Base-infinity (2,0) integrand: weight · R(σ)^† R(σ). The displayed left factor is not the
// weighted adjoint of the displayed right factor, so the adjoint is formed explicitly.
inline CMat base_matrix_20(double xiF, const Vec2& etaF, const Vec2& Y, double F) {
    const auto& sp = redundant_space(2, 0);
    CMat R = R20(base_shift(xiF, etaF, Y), Y);
    return base_weight(xiF, etaF, Y, F) * weighted_adjoint(R, sp, sp) * R;
}

inline CMat fiber_matrix_22(double S, const Vec2& Y) {
    const auto& s20 = redundant_space(2, 0);
    const auto& s22 = redundant_space(2, 2);
    CMat A = A22(S, Y);
    return weighted_adjoint(A, s20, s22) * A;
}

inline CMat base_matrix_22(double xiF, const Vec2& etaF, const Vec2& Y, double F) {
    const auto& s20 = redundant_space(2, 0);
    const auto& s22 = redundant_space(2, 2);
    CMat A = A22(base_shift(xiF, etaF, Y), Y);
    return base_weight(xiF, etaF, Y, F) * weighted_adjoint(A, s20, s22) * A;
}

// Parallel-transport factor at the front face in scattering components (xx, xy, yy):
// printed form [[1, -2⟨a,·⟩, 0], [0, 1, -a⟨·⟩], [0, 0, 1]] with a = |Y| H Ŷ.
// `corrected` adds the second-order xx <- yy term ⟨a⊗a, ·⟩ of the exact solution.
inline CMat transport_unipotent(const Eigen::Vector2d& a, bool corrected = false) {
    const Eigen::Vector2cd ac = a.cast<cd>();
    return matrix_from_block_fn([&](const Mat3c& G) {
        auto g = detail::split(G);
        detail::Blocks20 o;
        o.xx = g.xx - 2.0 * (ac.transpose() * g.xy)(0);
        if (corrected) o.xx += (ac.transpose() * g.yy * ac)(0);
        o.xy = g.xy - g.yy * ac;
        o.yy = g.yy;
        return detail::join(o);
    });
}

// The two displayed factors whose product is the inverse of the transport factor for H Ŷ = α Ŷ.
inline CMat transport_inverse_factors(double alpha, double absY, const Vec2& Yr) {
    const Eigen::Vector2cd Y = Yr.cast<cd>();
    const double a = alpha * absY;
    CMat first = matrix_from_block_fn([&](const Mat3c& G) {
        auto g = detail::split(G);
        detail::Blocks20 o = g;
        o.xx = g.xx + 2 * a * a * (Y.transpose() * g.yy * Y)(0);
        return detail::join(o);
    });
    CMat second = matrix_from_block_fn([&](const Mat3c& G) {
        auto g = detail::split(G);
        detail::Blocks20 o = g;
        o.xx = g.xx + 2 * a * (Y.transpose() * g.xy)(0);
        o.xy = g.xy + a * g.yy * Y;
        return detail::join(o);
    });
    return first * second;
}

inline CMat kernel_matrix_20(double S, const Vec2& Y, double alpha, double absY) {
    const double Ss = S + 2 * alpha * absY;
    return fiber_left_displayed_20(S, Y) * transport_inverse_factors(alpha, absY, Y) * fiber_right_displayed_20(Ss, Y);
}

struct TransportFactorCheck {
    double product_residual = 0;  // ‖factors · U − Id‖_max
    double alpha = 0, absY = 0;
};

inline TransportFactorCheck transport_factor_check(double alpha, double absY, const Vec2& Y) {
    CMat U = transport_unipotent(alpha * absY * Y);
    CMat P = transport_inverse_factors(alpha, absY, Y);
    TransportFactorCheck r;
    r.alpha = alpha;
    r.absY = absY;
    r.product_residual = (P * U - CMat::Identity(6, 6)).cwiseAbs().maxCoeff();
    return r;
}

// ---------------------------------------------------------------------------------------------
// Quadrature over the (ξ,η)-equatorial set {ξS̃ + η·Ŷ = 0, |Ŷ| = 1}, n = 3.
// The measure is δ(ξS̃ + η·Ŷ) dS̃ dθ: dθ/|ξ| in the angle chart, dS̃/(|η||sin φ|) per branch in the
// S̃ chart (φ the angle between Ŷ and η̂). The angle chart is used while |η|/|ξ| stays below the
// width where the Gaussian χ is negligible, so both charts only see smooth integrands.

using FiberBuilder = std::function<CMat(double S, const Vec2& Y)>;

struct EquatorialOptions {
    int n_quad = 64;
    double nu = 1.0;  // χ(s) = exp(-s²/(2ν)), not truncated
};

inline double equatorial_switch(double nu) { return std::sqrt(2 * nu * 40.0); }

inline CMat integrate_equatorial(const FiberBuilder& b, double xi, const Vec2& eta, const EquatorialOptions& opt = {}) {
    const double en = eta.norm();
    if (xi == 0 && en == 0) throw DomainError("equatorial set undefined at (ξ,η) = 0");
    if (opt.n_quad < 2) throw DomainError("n_quad must be at least 2");
    auto chi = [&](double s) { return std::exp(-s * s / (2 * opt.nu)); };
    const double Rs = equatorial_switch(opt.nu);
    CMat acc;
    auto add = [&](const CMat& M, double w) {
        if (acc.size() == 0) acc = CMat::Zero(M.rows(), M.cols());
        acc += w * M;
    };
    const int n = opt.n_quad;
    if (xi != 0 && en <= Rs * std::abs(xi)) {
        for (int j = 0; j < n; ++j) {
            const double th = 2 * M_PI * j / n;
            Vec2 Y(std::cos(th), std::sin(th));
            const double S = -eta.dot(Y) / xi;
            add(b(S, Y), chi(S) * (2 * M_PI / n) / std::abs(xi));
        }
        return acc;
    }
    const double th_eta = std::atan2(eta[1], eta[0]);
    const double h = 2 * Rs / n;
    for (int j = 0; j < n; ++j) {
        const double S = -Rs + (j + 0.5) * h;
        const double c = -xi * S / en;
        if (std::abs(c) >= 1) continue;
        const double phi = std::acos(c), sn = std::sqrt(1 - c * c);
        for (double sg : {1.0, -1.0}) {
            const double th = th_eta + sg * phi;
            Vec2 Y(std::cos(th), std::sin(th));
            add(b(S, Y), chi(S) * h / (en * sn));
        }
    }
    return acc;
}

using BaseBuilder = std::function<CMat(const Vec2& Y)>;

inline CMat integrate_circle(const BaseBuilder& b, int n_quad) {
    if (n_quad < 2) throw DomainError("n_quad must be at least 2");
    CMat acc;
    for (int j = 0; j < n_quad; ++j) {
        const double th = 2 * M_PI * j / n_quad;
        CMat M = b(Vec2(std::cos(th), std::sin(th)));
        if (acc.size() == 0) acc = CMat::Zero(M.rows(), M.cols());
        acc += (2 * M_PI / n_quad) * M;
    }
    return acc;
}

inline CMat base_integral_20(double xiF, const Vec2& etaF, double F, int n_quad = 64) {
    return integrate_circle([&](const Vec2& Y) { return base_matrix_20(xiF, etaF, Y, F); }, n_quad);
}

inline CMat base_integral_22(double xiF, const Vec2& etaF, double F, int n_quad = 64) {
    return integrate_circle([&](const Vec2& Y) { return base_matrix_22(xiF, etaF, Y, F); }, n_quad);
}

// ---------------------------------------------------------------------------------------------
// Subspaces and weighted spectra.

// Weighted-orthonormal basis, stored in congruence coordinates (columns orthonormal).
struct SubspaceBasis {
    CMat Z;
    int dim = 0;
    double constraint_residual = 0;
    CMat ordering_coords(const RedundantSpace& sp) const { return sp.Wisqrt.cast<cd>() * Z; }
};

// Trace rows (μ f = 0) for (2,2) in ordering coordinates.
inline CMat trace_constraints22() {
    const auto& sp = redundant_space(2, 2);
    CMat C = CMat::Zero(9, sp.N);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) C(detail::f2(i, j), detail::f4(i, k, j, k)) += 1.0;
    return C * sp.Ec();
}

// Gauge rows Σ_l ζ_l f^{ij}_{kl} = 0 for i ≤ j and every k, in ordering coordinates.
inline CMat gauge_constraints22(const Vec3c& zeta) {
    const auto& sp = redundant_space(2, 2);
    CMat C = CMat::Zero(18, sp.N);
    int r = 0;
    for (int i = 0; i < 3; ++i)
        for (int j = i; j < 3; ++j)
            for (int k = 0; k < 3; ++k, ++r)
                for (int l = 0; l < 3; ++l) C(r, detail::f4(i, j, k, l)) = zeta[l];
    return C * sp.Ec();
}

inline SubspaceBasis null_space(const CMat& C_ord, const RedundantSpace& sp, double rel_tol = 1e-10) {
    CMat Cu = C_ord * sp.Wisqrt.cast<cd>();
    Eigen::JacobiSVD<CMat> svd(Cu, Eigen::ComputeFullV);
    const auto& s = svd.singularValues();
    const double smax = s.size() ? s.maxCoeff() : 0.0;
    Eigen::Index rank = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i)
        if (s[i] > rel_tol * smax) ++rank;
    SubspaceBasis B;
    B.dim = static_cast<int>(sp.d - rank);
    B.Z = svd.matrixV().rightCols(B.dim);
    B.constraint_residual = B.dim ? (Cu * B.Z).cwiseAbs().maxCoeff() : 0.0;
    return B;
}

inline SubspaceBasis trace_free_basis22() { return null_space(trace_constraints22(), redundant_space(2, 2)); }

enum class GaugeFlavor { fiber, base };

// Kernel of the gauge symbol intersected with the trace-free subspace. Fiber flavor uses ζ = (ξ, η),
// base flavor ζ = (ξ_F − i, η_F).
inline SubspaceBasis gauge_kernel_basis(double xi, const Vec2& eta, GaugeFlavor flavor) {
    if (xi == 0 && eta.norm() == 0 && flavor == GaugeFlavor::fiber) throw DomainError("gauge kernel at ζ = 0");
    Vec3c z(flavor == GaugeFlavor::fiber ? cd(xi, 0) : cd(xi, -1), eta[0], eta[1]);
    CMat G = gauge_constraints22(z), T = trace_constraints22();
    CMat C(G.rows() + T.rows(), G.cols());
    C << G, T;
    return null_space(C, redundant_space(2, 2));
}

struct Spectrum {
    double min_eig = 0, max_eig = 0;
    double hermitian_residual = 0;
    int dim = 0;
    Eigen::VectorXd eigs;
};

// Eigenvalues of M with respect to the weighted inner product, optionally restricted to a subspace.
inline Spectrum weighted_spectrum(const CMat& M, const RedundantSpace& sp, const SubspaceBasis* sub = nullptr) {
    CMat H = sp.Wsqrt.cast<cd>() * M * sp.Wisqrt.cast<cd>();
    if (sub) H = sub->Z.adjoint() * H * sub->Z;
    Spectrum r;
    r.dim = static_cast<int>(H.rows());
    const double nh = std::max(H.norm(), 1e-300);
    r.hermitian_residual = (H - H.adjoint()).norm() / nh;
    Eigen::SelfAdjointEigenSolver<CMat> es(0.5 * (H + H.adjoint()), Eigen::EigenvaluesOnly);
    r.eigs = es.eigenvalues();
    r.min_eig = r.eigs.size() ? r.eigs.minCoeff() : 0.0;
    r.max_eig = r.eigs.size() ? r.eigs.maxCoeff() : 0.0;
    return r;
}

// ---------------------------------------------------------------------------------------------
// Certificates.

enum class SymbolFlavor { fiber20, base20, fiber22, base22 };

inline const char* flavor_name(SymbolFlavor f) {
    switch (f) {
        case SymbolFlavor::fiber20: return "20-fiber";
        case SymbolFlavor::base20: return "20-base";
        case SymbolFlavor::fiber22: return "22-fiber";
        case SymbolFlavor::base22: return "22-base";
    }
    return "?";
}

// Deterministic spherical Fibonacci points for unit (ξ, η).
inline std::vector<Eigen::Vector3d> unit_samples(int count) {
    if (count <= 0) throw ConfigError("empty sample grid");
    std::vector<Eigen::Vector3d> out;
    const double ga = M_PI * (3 - std::sqrt(5.0));
    for (int i = 0; i < count; ++i) {
        const double z = 1 - (2.0 * i + 1) / count;
        const double r = std::sqrt(std::max(0.0, 1 - z * z));
        out.emplace_back(z, r * std::cos(ga * i), r * std::sin(ga * i));
    }
    return out;
}

struct CertificateOptions {
    int samples = 64;
    std::vector<double> alphas{0.0, 0.5, -0.5, 1.0, -1.0};
    int n_quad = 64;
    double nu = 1.0;
    double F = 8.0;
    double eig_floor = 1e-9;     // restricted / full minimum must exceed this
    double kernel_tol = 1e-9;    // (2,2) full-space minimum must fall below this (relative to max)
    double psd_tol = 1e-11;
};

struct CertificateSample {
    Eigen::Vector3d zeta;
    double alpha = 0;
    double min_eig = 0;       // on the certified subspace
    double min_eig_full = 0;  // (2,2): on the trace-free space
    double max_eig = 0;
    double hermitian_residual = 0;
    int dim = 0;
};

struct Certificate {
    SymbolFlavor flavor = SymbolFlavor::fiber20;
    std::vector<CertificateSample> samples;
    double min_eig = 0, min_eig_full = 0;
    bool pass = false;
    std::string reason;
};

// Builders are injectable so that a deliberately broken one can be shown to fail.
struct SymbolBuilders {
    std::function<CMat(double S, const Vec2& Y, double alpha)> fiber20 = [](double S, const Vec2& Y, double alpha) {
        return kernel_matrix_20(S, Y, alpha, 0.0);
    };
    std::function<CMat(double, const Vec2&, const Vec2&, double)> base20 = base_matrix_20;
    std::function<CMat(double, const Vec2&)> fiber22 = fiber_matrix_22;
    std::function<CMat(double, const Vec2&, const Vec2&, double)> base22 = base_matrix_22;
};

inline Certificate ellipticity_certificate(SymbolFlavor flavor, const CertificateOptions& opt = {},
                                           const SymbolBuilders& B = {}) {
    const auto pts = unit_samples(opt.samples);
    const bool is22 = flavor == SymbolFlavor::fiber22 || flavor == SymbolFlavor::base22;
    const auto& sp = redundant_space(2, is22 ? 2 : 0);
    const bool uses_alpha = flavor == SymbolFlavor::fiber20;
    std::vector<double> alphas = uses_alpha ? opt.alphas : std::vector<double>{0.0};
    if (alphas.empty()) alphas = {0.0};
    Certificate cert;
    cert.flavor = flavor;
    cert.samples.resize(pts.size() * alphas.size());
    const SubspaceBasis tf = trace_free_basis22();
    EquatorialOptions eo{opt.n_quad, opt.nu};
    parallel_for(cert.samples.size(), [&](std::size_t idx) {
        const auto& z = pts[idx / alphas.size()];
        const double alpha = alphas[idx % alphas.size()];
        const double xi = z[0];
        const Vec2 eta(z[1], z[2]);
        CMat M;
        switch (flavor) {
            case SymbolFlavor::fiber20:
                M = integrate_equatorial([&](double S, const Vec2& Y) { return B.fiber20(S, Y, alpha); }, xi, eta, eo);
                break;
            case SymbolFlavor::base20:
                M = integrate_circle([&](const Vec2& Y) { return B.base20(xi, eta, Y, opt.F); }, opt.n_quad);
                break;
            case SymbolFlavor::fiber22:
                M = integrate_equatorial([&](double S, const Vec2& Y) { return B.fiber22(S, Y); }, xi, eta, eo);
                break;
            case SymbolFlavor::base22:
                M = integrate_circle([&](const Vec2& Y) { return B.base22(xi, eta, Y, opt.F); }, opt.n_quad);
                break;
        }
        CertificateSample s;
        s.zeta = z;
        s.alpha = alpha;
        if (is22) {
            SubspaceBasis g = gauge_kernel_basis(
                xi, eta, flavor == SymbolFlavor::fiber22 ? GaugeFlavor::fiber : GaugeFlavor::base);
            Spectrum r = weighted_spectrum(M, sp, &g), f = weighted_spectrum(M, sp, &tf);
            s.min_eig = r.min_eig;
            s.max_eig = f.max_eig;
            s.min_eig_full = f.min_eig;
            s.hermitian_residual = f.hermitian_residual;
            s.dim = r.dim;
        } else {
            Spectrum r = weighted_spectrum(M, sp);
            s.min_eig = r.min_eig;
            s.min_eig_full = r.min_eig;
            s.max_eig = r.max_eig;
            s.hermitian_residual = r.hermitian_residual;
            s.dim = r.dim;
        }
        cert.samples[idx] = s;
    });
    cert.min_eig = cert.min_eig_full = std::numeric_limits<double>::infinity();
    bool ok = true;
    for (const auto& s : cert.samples) {
        cert.min_eig = std::min(cert.min_eig, s.min_eig);
        cert.min_eig_full = std::min(cert.min_eig_full, s.min_eig_full);
        if (s.hermitian_residual > 1e-10) {
            ok = false;
            cert.reason = "non-Hermitian integral";
        }
        if (!(s.min_eig > opt.eig_floor)) {
            ok = false;
            cert.reason = "eigenvalue at or below floor";
        }
        if (is22 && !(std::abs(s.min_eig_full) <= opt.kernel_tol * std::max(1.0, s.max_eig))) {
            ok = false;
            cert.reason = "no kernel on the full trace-free space";
        }
    }
    cert.pass = ok;
    return cert;
}

inline nlohmann::json to_json(const Certificate& c) {
    nlohmann::json j;
    j["flavor"] = flavor_name(c.flavor);
    j["pass"] = c.pass;
    j["min_eig"] = c.min_eig;
    j["min_eig_full"] = c.min_eig_full;
    if (!c.reason.empty()) j["reason"] = c.reason;
    j["samples"] = c.samples.size();
    return j;
}

// ---------------------------------------------------------------------------------------------
// The 5×5 system in r = |η|/ξ. `printed` uses the fourth row as displayed; otherwise the fourth row
// is rebuilt from the trace-free identity it is meant to encode (last entry 0).

using Poly = std::vector<double>;  // coefficients, lowest degree first

inline Poly poly_mul(const Poly& a, const Poly& b) {
    Poly r(a.size() + b.size() - 1, 0.0);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) r[i + j] += a[i] * b[j];
    return r;
}

inline double poly_eval(const Poly& p, double r) {
    double s = 0;
    for (std::size_t i = p.size(); i-- > 0;) s = s * r + p[i];
    return s;
}

inline std::array<std::array<Poly, 5>, 5> system_5x5_poly(bool printed = true) {
    std::array<std::array<Poly, 5>, 5> M;
    const Poly z{0}, one{1};
    const Poly q4{1, 0, 2, 0, 1};  // r⁴ + 2r² + 1
    const Poly q2{1, 0, 1};        // r² + 1
    M[0] = {z, z, q4, q2, one};
    M[1] = {q4, Poly{-2, 0, -2}, z, Poly{0, 0, 2, 0, 2}, Poly{0, 0, 1}};
    M[2] = {z, z, Poly{0, -1, 0, -2, 0, -1}, Poly{0, 4, 0, 4}, Poly{0, -1}};
    M[3] = {one, z, one, one, printed ? one : z};
    M[4] = {z, one, z, one, one};
    return M;
}

inline RMat system_5x5(double r, bool printed = true) {
    if (!(r > 0)) throw DomainError("r must be positive");
    auto P = system_5x5_poly(printed);
    RMat M(5, 5);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) M(i, j) = poly_eval(P[i][j], r);
    return M;
}

inline double det_5x5(double r, bool printed = true) { return system_5x5(r, printed).partialPivLu().determinant(); }

// Determinant polynomial by permutation expansion over polynomial entries.
inline Poly det_5x5_poly(bool printed = true) {
    auto P = system_5x5_poly(printed);
    std::array<int, 5> p{0, 1, 2, 3, 4};
    Poly acc(1, 0.0);
    do {
        int inv = 0;
        for (int i = 0; i < 5; ++i)
            for (int j = i + 1; j < 5; ++j) inv += p[i] > p[j];
        Poly term{inv % 2 ? -1.0 : 1.0};
        for (int i = 0; i < 5; ++i) term = poly_mul(term, P[i][p[i]]);
        if (term.size() > acc.size()) acc.resize(term.size(), 0.0);
        for (std::size_t i = 0; i < term.size(); ++i) acc[i] += term[i];
    } while (std::next_permutation(p.begin(), p.end()));
    while (acc.size() > 1 && acc.back() == 0.0) acc.pop_back();
    return acc;
}

// ---------------------------------------------------------------------------------------------
// Symbols on (2,1) tensors for the decomposition of the trace-free Laplacian. Redundant coordinates
// (27 components), so Euclidean adjoints are the weighted ones.

struct TensorSymbols {
    CMat P20, P21, P22;
    CMat MU21, MU22, LAM21, LAM22;  // μ and λ between (2,l) and (1,l-1)
    CMat B21, B22, B22_printed;
    CMat TF21;                      // orthonormal basis of trace-free (2,1), 27×15
};

inline const TensorSymbols& tensor_symbols() {
    static const TensorSymbols T = [] {
        TensorSymbols t;
        const auto& s20 = redundant_space(2, 0);
        const auto& s21 = redundant_space(2, 1);
        const auto& s22 = redundant_space(2, 2);
        t.P20 = s20.Pc();
        t.P21 = s21.Pc();
        t.P22 = s22.Pc();
        auto unit_sym = [](int k, int l, Eigen::Index j) {
            RawTensor<double> r(3, k, l);
            r.c[static_cast<std::size_t>(j)] = 1.0;
            return SymTensor::from_raw(r);
        };
        auto fill = [](CMat& M, Eigen::Index col, const SymTensor& f) {
            for (std::size_t a = 0; a < f.size(); ++a) M(static_cast<Eigen::Index>(a), col) = f[a];
        };
        t.MU21 = CMat::Zero(3, 27);
        t.B21 = CMat::Zero(27, 27);
        for (Eigen::Index j = 0; j < 27; ++j) {
            SymTensor f = unit_sym(2, 1, j);
            fill(t.MU21, j, trace_mu(f));
            fill(t.B21, j, projector_B(f));
        }
        t.MU22 = CMat::Zero(9, 81);
        t.B22 = CMat::Zero(81, 81);
        t.B22_printed = CMat::Zero(81, 81);
        for (Eigen::Index j = 0; j < 81; ++j) {
            SymTensor f = unit_sym(2, 2, j);
            fill(t.MU22, j, trace_mu(f));
            fill(t.B22, j, projector_B(f));
            fill(t.B22_printed, j, projector_B_printed(f));
        }
        t.LAM21 = CMat::Zero(27, 3);
        for (Eigen::Index j = 0; j < 3; ++j) {
            SymTensor w(3, 1, 0);
            w.set({static_cast<int>(j)}, 1.0);
            fill(t.LAM21, j, dual_lambda(w));
        }
        t.LAM22 = CMat::Zero(81, 9);
        for (Eigen::Index j = 0; j < 9; ++j) {
            RawTensor<double> r(3, 1, 1);
            r.c[static_cast<std::size_t>(j)] = 1.0;
            fill(t.LAM22, j, dual_lambda(SymTensor::from_raw(r)));
        }
        Eigen::SelfAdjointEigenSolver<CMat> es(0.5 * (t.B21 + t.B21.adjoint()));
        int cnt = 0;
        for (Eigen::Index i = 0; i < 27; ++i) cnt += es.eigenvalues()[i] > 0.5;
        t.TF21 = es.eigenvectors().rightCols(cnt);
        return t;
    }();
    return T;
}

// σ(d′): (2,1) -> (2,2), v ↦ Sym_lower(v ⊗ ζ).
inline CMat d_symbol21(const Vec3c& z) {
    const auto& T = tensor_symbols();
    CMat M = CMat::Zero(81, 27);
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k)
            for (int j = 0; j < 3; ++j)
                for (int l = 0; l < 3; ++l) M(detail::f4(i, k, j, l), detail::f3(i, k, j)) += z[l];
    return T.P22 * M * T.P21;
}

// σ(d): (2,0) -> (2,1), v ↦ v ⊗ ζ.
inline CMat d_symbol20(const Vec3c& z) {
    const auto& T = tensor_symbols();
    CMat M = CMat::Zero(27, 9);
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k)
            for (int l = 0; l < 3; ++l) M(detail::f3(i, k, l), detail::f2(i, k)) += z[l];
    return T.P21 * M * T.P20;
}

// The factor of 𝔇₁ as displayed: (f)^i_k ↦ Σ_j z_j f^{ij}_k with z = (ξ+iF, −η).
inline CMat d1_symbol(const Vec3c& zp) {
    const auto& T = tensor_symbols();
    CMat M = CMat::Zero(9, 27);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) M(detail::f2(i, k), detail::f3(i, j, k)) += zp[j];
    return M * T.P21;
}

// Block operators on (2,1): blocks (U, K) with U = number of y's among the upper slots and K = 0 (x)
// or 1 (y) for the lower slot.
enum class BlockKind {
    scalar,         // (U,K) <- (U,K)
    lower_contract, // (U,x) <- (U,y): ⟨η, f_y⟩
    lower_raise,    // (U,y) <- (U,x): η f_x
    lower_outer,    // (U,y) <- (U,y): η⟨η, f_y⟩
    upper_outer,    // (U,K) <- (U,K): η ⊗^s ⟨η, upper y⟩
    upper_div,      // (U,K) <- (U+1,K): contract one upper y with η
    upper_raise     // (U+1,K) <- (U,K): η ⊗^s
};

struct BlockTerm {
    int U = 0, K = 0;  // destination block
    BlockKind kind = BlockKind::scalar;
    cd c = 0.0;
};

inline CMat block_operator(const std::vector<BlockTerm>& terms, const Vec2& eta2) {
    const auto& T = tensor_symbols();
    const double et[3] = {0.0, eta2[0], eta2[1]};
    CMat M = CMat::Zero(27, 27);
    for (const auto& tm : terms) {
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b)
                for (int k = 0; k < 3; ++k) {
                    const int U = (a > 0) + (b > 0), K = k > 0;
                    if (U != tm.U || K != tm.K) continue;
                    const Eigen::Index row = detail::f3(a, b, k);
                    auto add = [&](int p, int q, int r, double w) { M(row, detail::f3(p, q, r)) += tm.c * w; };
                    const int m = a > 0 ? a : b;  // the y slot when U = 1
                    switch (tm.kind) {
                        case BlockKind::scalar: add(a, b, k, 1.0); break;
                        case BlockKind::lower_contract:
                            for (int l = 1; l < 3; ++l) add(a, b, l, et[l]);
                            break;
                        case BlockKind::lower_raise: add(a, b, 0, et[k]); break;
                        case BlockKind::lower_outer:
                            for (int l = 1; l < 3; ++l) add(a, b, l, et[k] * et[l]);
                            break;
                        case BlockKind::upper_outer:
                            if (U == 1) {
                                for (int p = 1; p < 3; ++p) add(0, p, k, et[m] * et[p]);
                            } else if (U == 2) {
                                for (int p = 1; p < 3; ++p) {
                                    add(p, b, k, 0.5 * et[a] * et[p]);
                                    add(a, p, k, 0.5 * et[b] * et[p]);
                                }
                            }
                            break;
                        case BlockKind::upper_div:
                            if (U == 0) {
                                for (int p = 1; p < 3; ++p) add(0, p, k, et[p]);
                            } else if (U == 1) {
                                for (int p = 1; p < 3; ++p) add(m, p, k, et[p]);
                            }
                            break;
                        case BlockKind::upper_raise:
                            if (U == 1) {
                                add(0, 0, k, et[m]);
                            } else if (U == 2) {
                                add(0, b, k, 0.5 * et[a]);
                                add(0, a, k, 0.5 * et[b]);
                            }
                            break;
                    }
                }
    }
    return T.P21 * M * T.P21;
}

// σ(𝔇₁*𝔇₁) as displayed (the displayed product, with |η|² in the xy and yy diagonal blocks).
inline CMat d1d1_displayed(double xi, const Vec2& eta, double F) {
    const double q = xi * xi + F * F, e2 = eta.squaredNorm();
    const cd zp(xi, F), zm(xi, -F);
    std::vector<BlockTerm> t;
    for (int K = 0; K < 2; ++K) {
        t.push_back({0, K, BlockKind::scalar, q});
        t.push_back({1, K, BlockKind::scalar, 0.5 * (q + e2)});
        t.push_back({2, K, BlockKind::scalar, e2});
        t.push_back({0, K, BlockKind::upper_div, -zm});
        t.push_back({1, K, BlockKind::upper_raise, -0.5 * zp});
        t.push_back({1, K, BlockKind::upper_div, -0.5 * zm});
        t.push_back({2, K, BlockKind::upper_raise, -zp});
    }
    return block_operator(t, eta);
}

// The displayed A₁, A₂, A₃ blocks.
inline CMat a_blocks_displayed(double xi, const Vec2& eta, double F) {
    const double q = xi * xi + F * F, e2 = eta.squaredNorm();
    const cd zp(xi, F), zm(xi, -F);
    const double d[3][2] = {{q, 0.5 * q}, {0.75 * q + e2 / 8, 0.25 * q + e2 / 8}, {0.5 * q + e2 / 4, e2 / 4}};
    const double e1[3] = {0.0, 1.0 / 8, 1.0 / 4};
    std::vector<BlockTerm> t;
    for (int U = 0; U < 3; ++U) {
        t.push_back({U, 0, BlockKind::scalar, d[U][0]});
        t.push_back({U, 1, BlockKind::scalar, d[U][1]});
        t.push_back({U, 0, BlockKind::lower_contract, 0.5 * zp});
        t.push_back({U, 1, BlockKind::lower_raise, 0.5 * zm});
        t.push_back({U, 1, BlockKind::lower_outer, 0.5});
        if (U > 0) {
            t.push_back({U, 0, BlockKind::upper_outer, e1[U]});
            t.push_back({U, 1, BlockKind::upper_outer, e1[U]});
        }
    }
    return block_operator(t, eta);
}

// σ(𝔇₂*𝔇₂), σ(𝔇₃*𝔇₃), σ(𝔇₄*𝔇₄) from the displayed diagonal operators.
inline CMat d2d2_symbol(double xi, const Vec2& eta, double F) {
    const double q = xi * xi + F * F, e2 = eta.squaredNorm();
    const double d[3] = {0.4 * e2, 0.2 * (q + e2), 0.4 * q};
    std::vector<BlockTerm> t;
    for (int U = 0; U < 3; ++U)
        for (int K = 0; K < 2; ++K) t.push_back({U, K, BlockKind::scalar, d[U]});
    return block_operator(t, eta);
}

inline CMat d3d3_symbol(const Vec2& eta) {
    const double e2 = eta.squaredNorm();
    std::vector<BlockTerm> t;
    for (int K = 0; K < 2; ++K) {
        t.push_back({1, K, BlockKind::scalar, 0.1 * e2});
        t.push_back({2, K, BlockKind::scalar, 0.2 * e2});
    }
    return block_operator(t, eta);
}

inline CMat d4d4_symbol(const Vec2& eta) {
    std::vector<BlockTerm> t;
    for (int K = 0; K < 2; ++K) {
        t.push_back({1, K, BlockKind::upper_outer, 0.1});
        t.push_back({2, K, BlockKind::upper_outer, 0.2});
    }
    return block_operator(t, eta);
}

struct DecompositionCheck {
    double deviation = 0;          // displayed pieces, printed projector: the certified quantity
    double deviation_exact_B = 0;  // left side with the exact trace-free projector
    double deviation_product_d1 = 0;  // 𝔇₁*𝔇₁ formed as the product of its displayed factors
    double a_block_deviation = 0;  // A-block identity applied to trace-free inputs
    double d3_minus_d4_min_eig = 0;
};

inline DecompositionCheck delta_decomposition_check(double xi, const Vec2& eta, double F) {
    const auto& T = tensor_symbols();
    const Vec3c zF(cd(xi, F), eta[0], eta[1]);
    const Vec3c zp(cd(xi, F), -eta[0], -eta[1]);
    const double q = xi * xi + F * F, e2 = eta.squaredNorm();
    const CMat D = d_symbol21(zF), D0 = d_symbol20(zF), D1 = d1_symbol(zp);
    const CMat& TF = T.TF21;

    const CMat lhs = D.adjoint() * T.B22_printed * D;
    const CMat lhs_exact = D.adjoint() * T.B22 * D;
    const CMat dd = T.B21 * D0 * D0.adjoint();
    const CMat d1d1 = d1d1_displayed(xi, eta, F);
    const CMat d1d1_prod = D1.adjoint() * D1;
    const CMat rest = d2d2_symbol(xi, eta, F) + d3d3_symbol(eta) - d4d4_symbol(eta);
    const CMat rhs = 0.1 * (q + e2) * T.P21 + 0.5 * dd + 0.2 * d1d1 + rest;
    const CMat rhs_prod = 0.1 * (q + e2) * T.P21 + 0.5 * dd + 0.2 * d1d1_prod + rest;

    auto proj_dev = [&](const CMat& A, const CMat& B) { return (TF.adjoint() * (A - B) * TF).cwiseAbs().maxCoeff(); };
    DecompositionCheck r;
    r.deviation = proj_dev(lhs, rhs);
    r.deviation_exact_B = proj_dev(lhs_exact, rhs);
    r.deviation_product_d1 = proj_dev(lhs, rhs_prod);
    const CMat X = D.adjoint() * T.LAM22 * T.MU22 * D;
    const CMat Aside = X + 0.5 * dd + 0.25 * d1d1;
    r.a_block_deviation = ((Aside - a_blocks_displayed(xi, eta, F)) * TF).cwiseAbs().maxCoeff();
    const CMat d34 = TF.adjoint() * (d3d3_symbol(eta) - d4d4_symbol(eta)) * TF;
    Eigen::SelfAdjointEigenSolver<CMat> es(0.5 * (d34 + d34.adjoint()), Eigen::EigenvaluesOnly);
    r.d3_minus_d4_min_eig = es.eigenvalues().minCoeff();
    return r;
}

}  // namespace mixedray
