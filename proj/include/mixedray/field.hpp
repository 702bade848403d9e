#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixedray/metric.hpp"
#include "mixedray/tensor.hpp"

namespace mixedray {

struct GridSpec {
    std::array<double, 3> origin{0, 0, 0};
    std::array<double, 3> spacing{1, 1, 1};
    std::array<int, 3> dims{1, 1, 1};

    std::size_t nodes() const { return std::size_t(dims[0]) * dims[1] * dims[2]; }
    // First index most significant.
    std::size_t index(int i, int j, int k) const { return (std::size_t(i) * dims[1] + j) * dims[2] + k; }
    std::array<int, 3> ijk(std::size_t idx) const {
        const int k = static_cast<int>(idx % dims[2]);
        idx /= dims[2];
        const int j = static_cast<int>(idx % dims[1]);
        return {static_cast<int>(idx / dims[1]), j, k};
    }
    Vec point(int i, int j, int k) const {
        Vec z(3);
        z << origin[0] + i * spacing[0], origin[1] + j * spacing[1], origin[2] + k * spacing[2];
        return z;
    }
    Vec point(std::size_t idx) const {
        auto a = ijk(idx);
        return point(a[0], a[1], a[2]);
    }
    Vec lo() const { return point(0, 0, 0); }
    Vec hi() const { return point(dims[0] - 1, dims[1] - 1, dims[2] - 1); }
    bool operator==(const GridSpec& o) const { return origin == o.origin && spacing == o.spacing && dims == o.dims; }
};

// Box grid with `dims` nodes spanning [lo, hi].
inline GridSpec make_grid(const Vec& lo, const Vec& hi, std::array<int, 3> dims) {
    GridSpec g;
    g.dims = dims;
    for (int a = 0; a < 3; ++a) {
        g.origin[a] = lo[a];
        g.spacing[a] = dims[a] > 1 ? (hi[a] - lo[a]) / (dims[a] - 1) : 1.0;
    }
    return g;
}

// bspline reads node values as cubic B-spline coefficients, so it does not reproduce them at the nodes.
enum class Interp { linear, cubic, bspline };

// Per-axis stencil: node indices and weights.
struct AxisStencil {
    std::array<int, 4> idx{};
    std::array<double, 4> w{};
    int count = 0;
};

inline AxisStencil axis_stencil(double u, int N, Interp mode) {
    AxisStencil s;
    if (N == 1) {
        s.count = 1;
        s.idx[0] = 0;
        s.w[0] = 1;
        return s;
    }
    int i0 = static_cast<int>(std::floor(u));
    if (i0 < 0) i0 = 0;
    if (i0 > N - 2) i0 = N - 2;
    const double t = u - i0;
    if (mode == Interp::linear) {
        s.count = 2;
        s.idx = {i0, i0 + 1, 0, 0};
        s.w = {1 - t, t, 0, 0};
        return s;
    }
    const double t2 = t * t, t3 = t2 * t;
    s.count = 4;
    if (mode == Interp::cubic)
        s.w = {0.5 * (-t3 + 2 * t2 - t), 0.5 * (3 * t3 - 5 * t2 + 2), 0.5 * (-3 * t3 + 4 * t2 + t), 0.5 * (t3 - t2)};
    else
        s.w = {(1 - t) * (1 - t) * (1 - t) / 6, (3 * t3 - 6 * t2 + 4) / 6, (-3 * t3 + 3 * t2 + 3 * t + 1) / 6, t3 / 6};
    s.idx = {i0 - 1, i0, i0 + 1, i0 + 2};
    // Ghost nodes past either end are linear extrapolations, so linear data stays exact at the edges.
    if (N == 2) {
        s.count = 2;
        s.idx = {0, 1, 0, 0};
        s.w = {1 - t, t, 0, 0};
        return s;
    }
    if (s.idx[0] < 0) {
        s.w[1] += 2 * s.w[0];
        s.w[2] -= s.w[0];
        s.idx[0] = s.idx[1];
        s.w[0] = 0;
    }
    if (s.idx[3] > N - 1) {
        s.w[2] += 2 * s.w[3];
        s.w[1] -= s.w[3];
        s.idx[3] = s.idx[2];
        s.w[3] = 0;
    }
    return s;
}

struct Stencil3 {
    std::array<AxisStencil, 3> ax;
};

inline Stencil3 make_stencil(const GridSpec& g, const Vec& z, Interp mode) {
    Stencil3 s;
    for (int a = 0; a < 3; ++a) {
        const double u = (z[a] - g.origin[a]) / g.spacing[a];
        const double tol = 1e-9;
        if (u < -tol || u > g.dims[a] - 1 + tol) throw DomainError("point outside the interpolation grid");
        s.ax[a] = axis_stencil(u, g.dims[a], mode);
    }
    return s;
}

// Grid-sampled symmetric tensor field; node values stored in BasisOrdering order.
class TensorField {
public:
    TensorField() = default;
    TensorField(const GridSpec& g, int n, int k, int l)
        : grid_(g), ord_(make_ordering(n, k, l)), data_(g.nodes() * ord_.size(), 0.0) {}

    const GridSpec& grid() const { return grid_; }
    const BasisOrdering& ordering() const { return ord_; }
    int n() const { return ord_.n; }
    int k() const { return ord_.k; }
    int l() const { return ord_.l; }
    std::size_t ncomp() const { return ord_.size(); }
    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }
    double* node(std::size_t i) { return data_.data() + i * ncomp(); }
    const double* node(std::size_t i) const { return data_.data() + i * ncomp(); }

    SymTensor at(std::size_t i) const {
        return devectorize(std::vector<double>(node(i), node(i) + ncomp()), ord_);
    }
    void set(std::size_t i, const SymTensor& f) {
        auto v = vectorize(f, ord_);
        std::copy(v.begin(), v.end(), node(i));
    }

    SymTensor sample(const Vec& z, Interp mode = Interp::cubic) const {
        Stencil3 s = make_stencil(grid_, z, mode);
        std::vector<double> acc(ncomp(), 0.0);
        for (int a = 0; a < s.ax[0].count; ++a)
            for (int b = 0; b < s.ax[1].count; ++b)
                for (int c = 0; c < s.ax[2].count; ++c) {
                    const double w = s.ax[0].w[a] * s.ax[1].w[b] * s.ax[2].w[c];
                    if (w == 0) continue;
                    const double* p = node(grid_.index(s.ax[0].idx[a], s.ax[1].idx[b], s.ax[2].idx[c]));
                    for (std::size_t q = 0; q < acc.size(); ++q) acc[q] += w * p[q];
                }
        return devectorize(acc, ord_);
    }

    // Weighted Euclidean norm over all nodes (each node counted with the redundant-component sum).
    double norm() const { return std::sqrt(dot(*this)); }
    double dot(const TensorField& o) const {
        if (!(o.grid_ == grid_) || !(o.ord_ == ord_)) throw ShapeError("fields on different grids or valences");
        const auto W = inner_weights(ord_);
        double s = 0;
        for (std::size_t i = 0; i < grid_.nodes(); ++i)
            for (std::size_t q = 0; q < ncomp(); ++q) s += W.w[q] * node(i)[q] * o.node(i)[q];
        return s;
    }
    double max_abs() const {
        double m = 0;
        for (double v : data_) m = std::max(m, std::abs(v));
        return m;
    }
    TensorField& operator+=(const TensorField& o) {
        if (o.data_.size() != data_.size()) throw ShapeError("field size mismatch");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    TensorField& operator-=(const TensorField& o) {
        if (o.data_.size() != data_.size()) throw ShapeError("field size mismatch");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    TensorField& operator*=(double s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

private:
    GridSpec grid_;
    BasisOrdering ord_;
    std::vector<double> data_;
};

inline TensorField operator+(TensorField a, const TensorField& b) { return a += b; }
inline TensorField operator-(TensorField a, const TensorField& b) { return a -= b; }
inline TensorField operator*(double s, TensorField a) { return a *= s; }

// Point-evaluable tensor field given in closed form.
struct AnalyticField {
    int n = 3, k = 2, l = 0;
    std::function<SymTensor(const Vec&)> fn;
    SymTensor sample(const Vec& z) const { return fn(z); }
};

// Field sampled with a fixed interpolation mode.
struct InterpolatedField {
    const TensorField* field;
    Interp mode = Interp::cubic;
    SymTensor sample(const Vec& z) const { return field->sample(z, mode); }
};

template <class F>
concept FieldLike = requires(const F& f, const Vec& z) {
    { f.sample(z) } -> std::convertible_to<SymTensor>;
};

inline TensorField sample_on_grid(const AnalyticField& f, const GridSpec& g) {
    TensorField out(g, f.n, f.k, f.l);
    for (std::size_t i = 0; i < g.nodes(); ++i) out.set(i, f.sample(g.point(i)));
    return out;
}

// Binary layout: 8-byte magic, int32 n,k,l, int32 dims[3], float64 spacing[3], float64 origin[3],
// then float64 node values (node-major, component-minor), all little-endian.
inline constexpr char kFieldMagic[9] = "MXRFLD01";

inline void write_field(const TensorField& f, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os.write(kFieldMagic, 8);
    const std::int32_t hdr[6] = {f.n(), f.k(), f.l(), f.grid().dims[0], f.grid().dims[1], f.grid().dims[2]};
    os.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
    os.write(reinterpret_cast<const char*>(f.grid().spacing.data()), 3 * sizeof(double));
    os.write(reinterpret_cast<const char*>(f.grid().origin.data()), 3 * sizeof(double));
    os.write(reinterpret_cast<const char*>(f.data().data()), std::streamsize(f.data().size() * sizeof(double)));
    if (!os) throw FormatError("write failed for " + path);

    nlohmann::json j;
    j["n"] = f.n();
    j["k"] = f.k();
    j["l"] = f.l();
    j["dims"] = f.grid().dims;
    j["spacing"] = f.grid().spacing;
    j["origin"] = f.grid().origin;
    std::vector<std::string> labels;
    for (const auto& e : f.ordering().entries) labels.push_back(e.label);
    j["ordering"] = labels;
    std::ofstream(path + ".json") << j.dump(2) << "\n";
}

inline TensorField read_field(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kFieldMagic, 8) != 0) throw FormatError("bad field magic in " + path);
    std::int32_t hdr[6];
    is.read(reinterpret_cast<char*>(hdr), sizeof hdr);
    GridSpec g;
    g.dims = {hdr[3], hdr[4], hdr[5]};
    is.read(reinterpret_cast<char*>(g.spacing.data()), 3 * sizeof(double));
    is.read(reinterpret_cast<char*>(g.origin.data()), 3 * sizeof(double));
    if (!is) throw FormatError("truncated field header in " + path);
    TensorField f(g, hdr[0], hdr[1], hdr[2]);
    is.read(reinterpret_cast<char*>(f.data().data()), std::streamsize(f.data().size() * sizeof(double)));
    if (!is) throw FormatError("truncated field data in " + path);
    return f;
}

}  // namespace mixedray
