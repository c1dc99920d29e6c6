#pragma once

#include <cmath>

namespace ledmerge {

/// s + e == a + b exactly, with s = fl(a + b).
template <class T>
inline void two_sum(T a, T b, T& s, T& e) {
    s = a + b;
    const T bb = s - a;
    e = (a - (s - bb)) + (b - bb);
}

/// A value carried as an unevaluated sum hi + lo.
template <class T>
struct Compensated {
    T hi{0};
    T lo{0};

    /// this += scale * (x_hi + x_lo), keeping the rounding error of the
    /// leading term in `lo`.
    void add_scaled(T x_hi, T x_lo, T scale) {
        const T p = scale * x_hi;
        const T pe = std::fma(scale, x_hi, -p);
        T s, e;
        two_sum(hi, p, s, e);
        hi = s;
        lo += e + pe + scale * x_lo;
    }
    void add(T x_hi, T x_lo) { add_scaled(x_hi, x_lo, T{1}); }

    T value() const { return hi + lo; }
};

} // namespace ledmerge
