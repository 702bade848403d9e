#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <string>
#include <type_traits>
#include <vector>

#include "mixedray/error.hpp"

namespace mixedray {

enum class Slots { upper, lower, both };

namespace detail {

inline std::size_t ipow(int n, int p) {
    std::size_t r = 1;
    for (int i = 0; i < p; ++i) r *= static_cast<std::size_t>(n);
    return r;
}

template <class T>
inline T conj_if(const T& v) {
    if constexpr (std::is_same_v<T, std::complex<double>>)
        return std::conj(v);
    else
        return v;
}

inline void check_valence(int n, int k, int l) {
    if (n != 2 && n != 3) throw ValenceError("dimension must be 2 or 3, got " + std::to_string(n));
    const bool ok = (k == 1 && l == 0) || (k == 1 && l == 1) || (k == 2 && l == 0) ||
                    (k == 2 && l == 1) || (k == 2 && l == 2);
    if (!ok)
        throw ValenceError("unsupported valence (" + std::to_string(k) + "," + std::to_string(l) + ")");
}

}  // namespace detail

// Multi-index (upper slots first, then lower slots), at most 4 entries.
struct MultiIndex {
    std::array<int, 4> i{};
    int size = 0;
    int operator[](int a) const { return i[a]; }
    int& operator[](int a) { return i[a]; }
};

inline MultiIndex unflatten(std::size_t flat, int n, int rank) {
    MultiIndex m;
    m.size = rank;
    for (int a = rank - 1; a >= 0; --a) {
        m[a] = static_cast<int>(flat % n);
        flat /= n;
    }
    return m;
}

inline std::size_t flatten(const MultiIndex& m, int n) {
    std::size_t f = 0;
    for (int a = 0; a < m.size; ++a) f = f * n + m[a];
    return f;
}

// Tensor with declared valence and no symmetry guarantee.
template <class T>
struct RawTensor {
    int n = 3, k = 0, l = 0;
    std::vector<T> c;

    RawTensor() = default;
    RawTensor(int n_, int k_, int l_) : n(n_), k(k_), l(l_), c(detail::ipow(n_, k_ + l_), T{}) {}
    RawTensor(int n_, int k_, int l_, std::vector<T> data) : n(n_), k(k_), l(l_), c(std::move(data)) {
        if (c.size() != detail::ipow(n, k + l)) throw ShapeError("raw tensor data has wrong length");
    }
    T& at(const MultiIndex& m) { return c[flatten(m, n)]; }
    const T& at(const MultiIndex& m) const { return c[flatten(m, n)]; }
};

template <class T>
RawTensor<T> symmetrize(const RawTensor<T>& t, Slots which) {
    if (t.k > 2 || t.l > 2) throw ValenceError("symmetrize supports at most two slots per group");
    RawTensor<T> out(t.n, t.k, t.l);
    const int rank = t.k + t.l;
    const bool up = (which != Slots::lower) && t.k == 2;
    const bool lo = (which != Slots::upper) && t.l == 2;
    for (std::size_t f = 0; f < t.c.size(); ++f) {
        MultiIndex m = unflatten(f, t.n, rank);
        // Sum in a canonical order so every permuted copy gets a bitwise identical value.
        std::array<std::size_t, 4> idx{};
        int cnt = 0;
        for (int su = 0; su < (up ? 2 : 1); ++su) {
            for (int sl = 0; sl < (lo ? 2 : 1); ++sl) {
                MultiIndex p = m;
                if (su) std::swap(p[0], p[1]);
                if (sl) std::swap(p[t.k], p[t.k + 1]);
                idx[cnt++] = flatten(p, t.n);
            }
        }
        std::sort(idx.begin(), idx.begin() + cnt);
        if (cnt == 1)
            out.c[f] = t.c[idx[0]];
        else if (cnt == 2)
            out.c[f] = (t.c[idx[0]] + t.c[idx[1]]) / 2.0;
        else
            out.c[f] = ((t.c[idx[0]] + t.c[idx[1]]) + (t.c[idx[2]] + t.c[idx[3]])) / 4.0;
    }
    return out;
}

// Dense symmetric (k,l)-tensor; symmetric in the upper slots and in the lower slots.
template <class T>
class BasicSymTensor {
public:
    using value_type = T;

    BasicSymTensor() : BasicSymTensor(3, 2, 0) {}
    BasicSymTensor(int n, int k, int l) : n_(n), k_(k), l_(l) {
        detail::check_valence(n, k, l);
        c_.assign(detail::ipow(n, k + l), T{});
    }
    // Symmetrizes the given components.
    static BasicSymTensor from_raw(const RawTensor<T>& raw) {
        BasicSymTensor s(raw.n, raw.k, raw.l);
        s.c_ = symmetrize(raw, Slots::both).c;
        return s;
    }
    static BasicSymTensor from_raw(int n, int k, int l, std::vector<T> data) {
        return from_raw(RawTensor<T>(n, k, l, std::move(data)));
    }

    int n() const { return n_; }
    int k() const { return k_; }
    int l() const { return l_; }
    int rank() const { return k_ + l_; }
    std::size_t size() const { return c_.size(); }
    const std::vector<T>& data() const { return c_; }

    const T& operator[](std::size_t flat) const { return c_[flat]; }
    T operator()(const MultiIndex& m) const { return c_[flatten(m, n_)]; }
    T operator()(std::initializer_list<int> idx) const { return c_[flatten(make_index(idx), n_)]; }

    // Writes v into every slot-permuted copy of the index.
    void set(const MultiIndex& m, T v) {
        for (int su = 0; su < (k_ == 2 ? 2 : 1); ++su)
            for (int sl = 0; sl < (l_ == 2 ? 2 : 1); ++sl) {
                MultiIndex p = m;
                if (su) std::swap(p[0], p[1]);
                if (sl) std::swap(p[k_], p[k_ + 1]);
                c_[flatten(p, n_)] = v;
            }
    }
    void set(std::initializer_list<int> idx, T v) { set(make_index(idx), v); }

    RawTensor<T> raw() const { return RawTensor<T>(n_, k_, l_, c_); }

    BasicSymTensor& operator+=(const BasicSymTensor& o) {
        check_same(o);
        for (std::size_t i = 0; i < c_.size(); ++i) c_[i] += o.c_[i];
        return *this;
    }
    BasicSymTensor& operator-=(const BasicSymTensor& o) {
        check_same(o);
        for (std::size_t i = 0; i < c_.size(); ++i) c_[i] -= o.c_[i];
        return *this;
    }
    BasicSymTensor& operator*=(T s) {
        for (auto& v : c_) v *= s;
        return *this;
    }
    friend BasicSymTensor operator+(BasicSymTensor a, const BasicSymTensor& b) { return a += b; }
    friend BasicSymTensor operator-(BasicSymTensor a, const BasicSymTensor& b) { return a -= b; }
    friend BasicSymTensor operator*(T s, BasicSymTensor a) { return a *= s; }
    friend BasicSymTensor operator*(BasicSymTensor a, T s) { return a *= s; }

    double max_abs() const {
        double m = 0;
        for (const auto& v : c_) m = std::max(m, static_cast<double>(std::abs(v)));
        return m;
    }
    bool same_shape(const BasicSymTensor& o) const { return n_ == o.n_ && k_ == o.k_ && l_ == o.l_; }

private:
    MultiIndex make_index(std::initializer_list<int> idx) const {
        if (static_cast<int>(idx.size()) != k_ + l_) throw ShapeError("index arity does not match valence");
        MultiIndex m;
        m.size = k_ + l_;
        int a = 0;
        for (int v : idx) {
            if (v < 0 || v >= n_) throw ShapeError("index out of range");
            m[a++] = v;
        }
        return m;
    }
    void check_same(const BasicSymTensor& o) const {
        if (!same_shape(o)) throw ValenceError("tensor shapes differ");
    }

    int n_, k_, l_;
    std::vector<T> c_;
};

using SymTensor = BasicSymTensor<double>;
using CSymTensor = BasicSymTensor<std::complex<double>>;

// Euclidean sum over all redundant components, conjugating the first argument.
template <class T>
T inner_redundant(const BasicSymTensor<T>& f, const BasicSymTensor<T>& g) {
    if (!f.same_shape(g)) throw ValenceError("inner product of tensors with different shapes");
    T s{};
    for (std::size_t i = 0; i < f.size(); ++i) s += detail::conj_if(f[i]) * g[i];
    return s;
}

// (mu f)^i_j = f^{ik}_{jk}; contracts the second upper slot with the last lower slot.
template <class T>
BasicSymTensor<T> trace_mu(const BasicSymTensor<T>& f) {
    if (f.k() != 2 || (f.l() != 1 && f.l() != 2)) throw ValenceError("trace_mu needs a (2,1) or (2,2) tensor");
    const int n = f.n();
    BasicSymTensor<T> out(n, 1, f.l() - 1);
    RawTensor<T> r(n, 1, f.l() - 1);
    for (std::size_t a = 0; a < r.c.size(); ++a) {
        MultiIndex m = unflatten(a, n, f.l());
        T acc{};
        for (int q = 0; q < n; ++q) {
            MultiIndex p;
            p.size = 2 + f.l();
            p[0] = m[0];
            p[1] = q;
            if (f.l() == 2) {
                p[2] = m[1];
                p[3] = q;
            } else {
                p[2] = q;
            }
            acc += f(p);
        }
        r.c[a] = acc;
    }
    return BasicSymTensor<T>::from_raw(r);
}

// (lambda w) = Sym(w^i_j delta^k_l); the adjoint of trace_mu for the redundant inner product.
template <class T>
BasicSymTensor<T> dual_lambda(const BasicSymTensor<T>& w) {
    if (w.k() != 1 || (w.l() != 0 && w.l() != 1)) throw ValenceError("dual_lambda needs a (1,0) or (1,1) tensor");
    const int n = w.n();
    const int l = w.l() + 1;
    RawTensor<T> r(n, 2, l);
    for (std::size_t a = 0; a < r.c.size(); ++a) {
        MultiIndex m = unflatten(a, n, 2 + l);
        if (l == 2) {
            if (m[1] == m[3]) r.c[a] = w({m[0], m[2]});
        } else {
            if (m[1] == m[2]) r.c[a] = w({m[0]});
        }
    }
    return BasicSymTensor<T>::from_raw(r);
}

template <class T>
BasicSymTensor<T> identity11(int n) {
    BasicSymTensor<T> id(n, 1, 1);
    for (int i = 0; i < n; ++i) id.set({i, i}, T{1});
    return id;
}

// Orthogonal projection onto ker(mu) for n = 3: Id - lambda (mu lambda)^{-1} mu.
// On (2,1) this is Id - (1/2) lambda mu. On (2,2) it equals Id - (4/5) lambda mu
// whenever mu f is trace-free; the extra term removes the double trace.
template <class T>
BasicSymTensor<T> projector_B(const BasicSymTensor<T>& f) {
    if (f.n() != 3 || f.k() != 2 || (f.l() != 1 && f.l() != 2))
        throw ValenceError("projector_B is defined for n=3 (2,1) and (2,2) tensors");
    const int n = 3;
    BasicSymTensor<T> w = trace_mu(f);
    if (f.l() == 1) return f - (T{2.0} / T{double(n + 1)}) * dual_lambda(w);
    T tr{};
    for (int i = 0; i < n; ++i) tr += w({i, i});
    const double a = (n + 2) / 4.0, b = 0.25;
    BasicSymTensor<T> u = w - (T{b / (a + n * b)} * tr) * identity11<T>(n);
    u *= T{1.0 / a};
    return f - dual_lambda(u);
}

// Id - (4/5) lambda mu on (2,2), n=3, as printed; kept for comparison with projector_B.
template <class T>
BasicSymTensor<T> projector_B_printed(const BasicSymTensor<T>& f) {
    if (f.n() != 3 || f.k() != 2 || f.l() != 2) throw ValenceError("printed projector is (2,2), n=3 only");
    return f - T{0.8} * dual_lambda(trace_mu(f));
}

// Basis ordering: upper groups with more x-slots first (xx, xy, yy), lower groups
// likewise; upper group major. Index 0 is x, indices 1..n-1 are y.
struct BasisEntry {
    std::string label;
    MultiIndex rep;
    double weight;
};

struct BasisOrdering {
    int n = 3, k = 2, l = 0;
    std::vector<BasisEntry> entries;
    std::size_t size() const { return entries.size(); }
    bool operator==(const BasisOrdering& o) const {
        if (n != o.n || k != o.k || l != o.l || entries.size() != o.entries.size()) return false;
        for (std::size_t i = 0; i < entries.size(); ++i)
            if (entries[i].label != o.entries[i].label) return false;
        return true;
    }
};

namespace detail {

struct Group {
    std::vector<int> idx;  // sorted
    double mult;
    int nx;
};

inline std::vector<Group> sorted_groups(int n, int r) {
    std::vector<Group> g;
    if (r == 0) {
        g.push_back({{}, 1.0, 0});
        return g;
    }
    if (r == 1) {
        for (int i = 0; i < n; ++i) g.push_back({{i}, 1.0, i == 0 ? 1 : 0});
    } else {
        for (int i = 0; i < n; ++i)
            for (int j = i; j < n; ++j)
                g.push_back({{i, j}, i == j ? 1.0 : 2.0, (i == 0) + (j == 0)});
    }
    std::stable_sort(g.begin(), g.end(), [](const Group& a, const Group& b) { return a.nx > b.nx; });
    return g;
}

inline std::string slot_name(int i) { return i == 0 ? "x" : "y" + std::to_string(i); }

}  // namespace detail

inline BasisOrdering make_ordering(int n, int k, int l) {
    detail::check_valence(n, k, l);
    BasisOrdering o;
    o.n = n;
    o.k = k;
    o.l = l;
    auto up = detail::sorted_groups(n, k);
    auto lo = detail::sorted_groups(n, l);
    for (const auto& gu : up)
        for (const auto& gl : lo) {
            BasisEntry e;
            e.rep.size = k + l;
            std::string lab;
            int a = 0;
            for (int i : gu.idx) {
                e.rep[a++] = i;
                lab += detail::slot_name(i);
            }
            if (l > 0) lab += "_";
            for (int i : gl.idx) {
                e.rep[a++] = i;
                lab += detail::slot_name(i);
            }
            e.label = lab;
            e.weight = gu.mult * gl.mult;
            o.entries.push_back(e);
        }
    return o;
}

struct InnerWeights {
    std::vector<double> w;
    std::size_t size() const { return w.size(); }
};

inline InnerWeights inner_weights(const BasisOrdering& o) {
    InnerWeights W;
    for (const auto& e : o.entries) W.w.push_back(e.weight);
    return W;
}

template <class T>
std::vector<T> vectorize(const BasicSymTensor<T>& f, const BasisOrdering& o) {
    if (f.n() != o.n || f.k() != o.k || f.l() != o.l) throw ShapeError("ordering does not match tensor valence");
    std::vector<T> v;
    v.reserve(o.size());
    for (const auto& e : o.entries) v.push_back(f(e.rep));
    return v;
}

template <class T>
BasicSymTensor<T> devectorize(const std::vector<T>& v, const BasisOrdering& o) {
    if (v.size() != o.size()) throw ShapeError("vector length does not match ordering");
    BasicSymTensor<T> f(o.n, o.k, o.l);
    for (std::size_t i = 0; i < v.size(); ++i) f.set(o.entries[i].rep, v[i]);
    return f;
}

template <class T>
T weighted_inner(const std::vector<T>& f, const std::vector<T>& g, const InnerWeights& W) {
    if (f.size() != W.size() || g.size() != W.size()) throw ShapeError("weights do not match vector length");
    T s{};
    for (std::size_t i = 0; i < f.size(); ++i) s += W.w[i] * detail::conj_if(f[i]) * g[i];
    return s;
}

template <class T>
T weighted_inner(const BasicSymTensor<T>& f, const BasicSymTensor<T>& g, const BasisOrdering& o) {
    return weighted_inner(vectorize(f, o), vectorize(g, o), inner_weights(o));
}

// Complexified copy.
inline CSymTensor complexify(const SymTensor& f) {
    CSymTensor c(f.n(), f.k(), f.l());
    std::vector<std::complex<double>> d(f.data().begin(), f.data().end());
    return CSymTensor::from_raw(f.n(), f.k(), f.l(), d);
}

// Tensor product a ⊗ b of raw tensors; valences add.
template <class T>
RawTensor<T> outer(const RawTensor<T>& a, const RawTensor<T>& b, bool b_upper_first = true) {
    if (a.n != b.n) throw ShapeError("dimension mismatch in outer product");
    const int n = a.n;
    RawTensor<T> r(n, a.k + b.k, a.l + b.l);
    const int ra = a.k + a.l, rb = b.k + b.l;
    for (std::size_t fa = 0; fa < a.c.size(); ++fa) {
        MultiIndex ma = unflatten(fa, n, ra);
        for (std::size_t fb = 0; fb < b.c.size(); ++fb) {
            MultiIndex mb = unflatten(fb, n, rb);
            MultiIndex m;
            m.size = ra + rb;
            int p = 0;
            for (int i = 0; i < a.k; ++i) m[p++] = ma[i];
            for (int i = 0; i < b.k; ++i) m[p++] = mb[i];
            for (int i = 0; i < a.l; ++i) m[p++] = ma[a.k + i];
            for (int i = 0; i < b.l; ++i) m[p++] = mb[b.k + i];
            r.at(m) = a.c[fa] * b.c[fb];
        }
    }
    (void)b_upper_first;
    return r;
}

}  // namespace mixedray
