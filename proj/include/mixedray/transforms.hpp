#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixedray/field.hpp"
#include "mixedray/geodesic.hpp"
#include "mixedray/parallel.hpp"

namespace mixedray {

// (Λ_w f)^{i..} = f^{i..}_{j..} w^{j..}
inline SymTensor lambda_contract(const SymTensor& f, const Vec& w) {
    if (w.size() != f.n()) throw ShapeError("lambda_contract: dimension mismatch");
    if (f.l() == 0) return f;
    const int n = f.n(), k = f.k(), l = f.l();
    SymTensor out(n, k, 0);
    RawTensor<double> r(n, k, 0);
    for (std::size_t a = 0; a < f.size(); ++a) {
        MultiIndex m = unflatten(a, n, k + l);
        double w_l = 1;
        for (int s = 0; s < l; ++s) w_l *= w[m[k + s]];
        MultiIndex u;
        u.size = k;
        for (int s = 0; s < k; ++s) u[s] = m[s];
        r.at(u) += w_l * f[a];
    }
    return SymTensor::from_raw(r);
}

inline Mat to_matrix(const SymTensor& f) {
    if (f.k() != 2 || f.l() != 0) throw ValenceError("to_matrix needs a (2,0) tensor");
    Mat M(f.n(), f.n());
    for (int i = 0; i < f.n(); ++i)
        for (int j = 0; j < f.n(); ++j) M(i, j) = f({i, j});
    return M;
}

inline SymTensor from_matrix(const Mat& M) {
    const int n = static_cast<int>(M.rows());
    SymTensor f(n, 2, 0);
    for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j) f.set({i, j}, 0.5 * (M(i, j) + M(j, i)));
    return f;
}

inline double pairing_threshold(const Vec& w, const Vec& v) { return 1e-6 * w.norm() * v.norm(); }

// p_{w,v} = Id - w ⊗ v / ⟨w, v⟩ as a matrix acting on vector components.
inline Mat proj_p(const Vec& w, const Vec& v) {
    if (w.size() != v.size()) throw ShapeError("proj_p: dimension mismatch");
    const double pr = w.dot(v);
    if (!(std::abs(pr) >= pairing_threshold(w, v)) || pr == 0)
        throw DegeneratePairingError("proj_p: pairing below threshold");
    return Mat::Identity(w.size(), w.size()) - w * v.transpose() / pr;
}

inline SymTensor proj_P(const Vec& w, const Vec& v, const SymTensor& f) {
    if (f.k() != 2 || f.l() != 0) throw ValenceError("proj_P acts on (2,0) tensors");
    const Mat p = proj_p(w, v);
    return from_matrix(p * to_matrix(f) * p.transpose());
}

struct ChiProfile {
    enum class Shape { gaussian, bump } shape = Shape::gaussian;
    double nu = 1.0;          // Gaussian variance
    double radius = 1.0;      // bump support radius
    double truncation = 4.0;  // Gaussian cut-off in standard deviations
    double support() const { return shape == Shape::gaussian ? truncation * std::sqrt(nu) : radius; }
    double operator()(double s) const {
        if (shape == Shape::gaussian) {
            if (std::abs(s) > support()) return 0.0;
            return std::exp(-s * s / (2 * nu));
        }
        const double q = s / radius;
        if (std::abs(q) >= 1) return 0.0;
        return std::exp(1.0 - 1.0 / (1.0 - q * q));
    }
};

inline ChiProfile gaussian_chi(double alpha, double F) {
    ChiProfile c;
    c.shape = ChiProfile::Shape::gaussian;
    c.nu = F > 0 ? alpha / F : alpha;
    return c;
}

// γ(0) = base, γ̇(0) = λ∂x + ω∂y with |ω|_h = 1.
struct Ray {
    Vec base;
    double lambda = 0;
    Vec omega;  // n-1 tangential components
    Vec zeta() const {
        Vec v(base.size());
        v[0] = lambda;
        for (int i = 1; i < base.size(); ++i) v[i] = omega[i - 1];
        return v;
    }
};

inline Ray make_ray(const ChartMetric& m, const Vec& base, double lambda, Vec omega) {
    Mat g = m.g(base);
    const int n = m.n;
    Mat h = g.block(1, 1, n - 1, n - 1);
    const double nrm = std::sqrt(omega.dot(h * omega));
    if (!(nrm > 0)) throw RejectedRayError("zero tangential direction");
    return Ray{base, lambda, Vec(omega / nrm)};
}

// Composite trapezoid weights on the nodes of a geodesic.
inline std::vector<double> trapezoid_weights(const Geodesic& g) {
    std::vector<double> w(g.size(), 0.0);
    for (std::size_t i = 0; i + 1 < g.size(); ++i) {
        const double dt = g.nodes[i + 1].t - g.nodes[i].t;
        w[i] += 0.5 * dt;
        w[i + 1] += 0.5 * dt;
    }
    return w;
}

// Per-node operator A = E(t) p_{γ̇(t), ϑ(t)} mapping vectors at γ(t) to vectors at γ(0) after projection.
inline std::vector<Mat> projection_transport_ops(const ChartMetric& m, const Geodesic& g, const Vec& theta0) {
    std::vector<Mat> ops;
    ops.reserve(g.size());
    const Mat E0inv = g.nodes[g.origin].E.inverse();
    for (const auto& s : g.nodes) {
        const Vec th = s.E.transpose() * (g.nodes[g.origin].E.transpose().inverse() * theta0);
        ops.push_back(E0inv * s.E * proj_p(s.v, th));
    }
    (void)m;
    return ops;
}

template <FieldLike Field>
SymTensor forward_mixed_on(const ChartMetric& m, const Field& field, const Geodesic& g, const Vec& theta0,
                           int l) {
    const auto ops = projection_transport_ops(m, g, theta0);
    const auto w = trapezoid_weights(g);
    Mat acc = Mat::Zero(m.n, m.n);
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (w[i] == 0) continue;
        SymTensor f = field.sample(g.nodes[i].z);
        if (f.k() != 2 || f.l() != l) throw ValenceError("field valence does not match transform");
        if (l > 0) f = lambda_contract(f, g.nodes[i].v);
        acc += w[i] * ops[i] * to_matrix(f) * ops[i].transpose();
    }
    return from_matrix(acc);
}

// Transverse (l = 0) or mixed (l = 2) ray transform of `field` along `ray`.
template <FieldLike Field>
SymTensor forward_mixed(const ChartMetric& m, const Field& field, const Ray& ray, double h_step, int l) {
    const Vec zeta = ray.zeta();
    const Vec theta0 = conormal_covector(m, ray.base, zeta);
    Geodesic g = shoot_ray(m, ray.base, zeta, h_step);
    return forward_mixed_on(m, field, g, theta0, l);
}

inline double halton(std::size_t i, int base) {
    double f = 1, r = 0;
    while (i > 0) {
        f /= base;
        r += f * static_cast<double>(i % base);
        i /= base;
    }
    return r;
}

struct RayCounts {
    std::size_t base = 1, omega = 1, lambda = 1;
};

// Deterministic ray family: Halton base points centred in the box, ω on a half circle of the h-sphere,
// λ/x at midpoints of a uniform partition of the χ support.
inline std::vector<Ray> sample_rays(const ChartMetric& m, const ChiProfile& chi, const RayCounts& counts) {
    if (counts.base == 0 || counts.omega == 0 || counts.lambda == 0) throw DomainError("ray counts must be positive");
    if (m.n != 3) throw DomainError("sample_rays expects n = 3");
    std::vector<Ray> rays;
    const double smax = chi.support();
    for (std::size_t b = 0; b < counts.base; ++b) {
        Vec z(3);
        const int primes[3] = {2, 3, 5};
        for (int a = 0; a < 3; ++a) {
            double u = halton(b, primes[a]) + 0.5;
            u -= std::floor(u);
            z[a] = m.lo[a] + u * (m.hi[a] - m.lo[a]);
        }
        if (!in_patch_Op(m, z)) continue;
        for (std::size_t o = 0; o < counts.omega; ++o) {
            const double phi = M_PI * static_cast<double>(o) / static_cast<double>(counts.omega);
            Vec om(2);
            om << std::cos(phi), std::sin(phi);
            for (std::size_t q = 0; q < counts.lambda; ++q) {
                const double s = -smax + (2 * q + 1) * smax / static_cast<double>(counts.lambda);
                rays.push_back(make_ray(m, z, s * m.x(z), om));
            }
        }
    }
    if (rays.empty()) throw DomainError("empty patch: no admissible base points");
    return rays;
}

struct RayRecord {
    Ray ray;
    std::vector<double> value;  // (2,0) components in BasisOrdering order
};

struct RayDataSet {
    int valence_l = 0;  // 0: transverse (2,0) data, 2: mixed (2,2) data
    std::vector<RayRecord> records;
    nlohmann::json meta = nlohmann::json::object();
};

struct ForwardReport {
    std::size_t dropped = 0;
    std::vector<std::size_t> dropped_index;
};

template <FieldLike Field>
struct ConjugatedField {
    const Field* inner;
    double F = 0;
    double x_min = 0;
    SymTensor sample(const Vec& z) const {
        SymTensor f = inner->sample(z);
        if (F == 0) return f;
        return std::exp(F / std::max(z[0], x_min)) * f;
    }
};

// Per-ray transform of e^{F/x}·field; rays with a degenerate pairing are dropped and reported.
template <FieldLike Field>
RayDataSet forward_dataset(const ChartMetric& m, const Field& field, const std::vector<Ray>& rays, int l,
                           double h_step, double F, ForwardReport* report = nullptr, double x_min = 0) {
    ConjugatedField<Field> cf{&field, F, x_min};
    const auto ord = make_ordering(m.n, 2, 0);
    std::vector<std::vector<double>> vals(rays.size());
    std::vector<char> ok(rays.size(), 1);
    parallel_for(rays.size(), [&](std::size_t i) {
        try {
            vals[i] = vectorize(forward_mixed(m, cf, rays[i], h_step, l), ord);
        } catch (const DegeneratePairingError&) {
            ok[i] = 0;
        } catch (const RejectedRayError&) {
            ok[i] = 0;
        }
    });
    RayDataSet ds;
    ds.valence_l = l;
    for (std::size_t i = 0; i < rays.size(); ++i) {
        if (!ok[i]) {
            if (report) {
                report->dropped++;
                report->dropped_index.push_back(i);
            }
            continue;
        }
        ds.records.push_back({rays[i], vals[i]});
    }
    ds.meta["metric"] = m.name;
    ds.meta["h_step"] = h_step;
    ds.meta["F"] = F;
    ds.meta["valence"] = l == 0 ? "2,0" : "2,2";
    ds.meta["rays"] = ds.records.size();
    return ds;
}

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_dataset(const RayDataSet& ds, const std::string& csv_path) {
    const auto ord = make_ordering(3, 2, 0);
    std::ofstream os(csv_path);
    if (!os) throw FormatError("cannot open " + csv_path);
    os << "x,y1,y2,lambda,omega1,omega2";
    for (const auto& e : ord.entries) os << ",v_" << e.label;
    os << "\n";
    for (const auto& r : ds.records) {
        os << fmt_double(r.ray.base[0]) << ',' << fmt_double(r.ray.base[1]) << ',' << fmt_double(r.ray.base[2])
           << ',' << fmt_double(r.ray.lambda) << ',' << fmt_double(r.ray.omega[0]) << ','
           << fmt_double(r.ray.omega[1]);
        for (double v : r.value) os << ',' << fmt_double(v);
        os << "\n";
    }
    nlohmann::json meta = ds.meta;
    meta["rays"] = ds.records.size();
    meta["valence_l"] = ds.valence_l;
    std::vector<std::string> labels;
    for (const auto& e : ord.entries) labels.push_back(e.label);
    meta["ordering"] = labels;
    std::ofstream(csv_path + ".json") << meta.dump(2) << "\n";
}

inline RayDataSet read_dataset(const std::string& csv_path) {
    std::ifstream is(csv_path);
    if (!is) throw FormatError("cannot open " + csv_path);
    RayDataSet ds;
    std::ifstream js(csv_path + ".json");
    if (js) {
        ds.meta = nlohmann::json::parse(js);
        ds.valence_l = ds.meta.value("valence_l", 0);
    }
    std::string line;
    std::getline(is, line);
    if (line.rfind("x,y1,y2,lambda,omega1,omega2", 0) != 0) throw FormatError("bad dataset header");
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<double> v;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) v.push_back(std::strtod(cell.c_str(), nullptr));
        if (v.size() != 12) throw FormatError("dataset row has wrong column count");
        RayRecord r;
        r.ray.base = Vec(3);
        r.ray.base << v[0], v[1], v[2];
        r.ray.lambda = v[3];
        r.ray.omega = Vec(2);
        r.ray.omega << v[4], v[5];
        r.value.assign(v.begin() + 6, v.end());
        ds.records.push_back(r);
    }
    if (ds.meta.contains("rays") && ds.meta["rays"].get<std::size_t>() != ds.records.size())
        throw FormatError("dataset sidecar ray count does not match CSV rows");
    return ds;
}

}  // namespace mixedray
