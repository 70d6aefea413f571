#pragma once

// Forward-mode derivatives with four tangent directions (x, y, z, t).
//
// Dual4 is a plain struct-of-doubles dual number: cheap, used by analytic
// fields and by inference-time Jacobian queries. DualTensor carries the same
// four tangents but each slot is a graph tensor, so expressions built from it
// keep their Jacobian entries differentiable with respect to parameters —
// that composition is what lets physics residuals train the network.

#include <array>
#include <cmath>
#include <functional>

#include "splatflow/core.hpp"
#include "splatflow/graph.hpp"

namespace splatflow::ad {

struct Dual4 {
    double v = 0.0;
    std::array<double, 4> d{0, 0, 0, 0};

    Dual4() = default;
    Dual4(double value) : v(value) {}
    static Dual4 seeded(double value, int dir) {
        Dual4 r(value);
        r.d[dir] = 1.0;
        return r;
    }

    Dual4 operator-() const { return {-v, {-d[0], -d[1], -d[2], -d[3]}}; }
    Dual4 operator+(const Dual4 &o) const {
        return {v + o.v, {d[0] + o.d[0], d[1] + o.d[1], d[2] + o.d[2], d[3] + o.d[3]}};
    }
    Dual4 operator-(const Dual4 &o) const {
        return {v - o.v, {d[0] - o.d[0], d[1] - o.d[1], d[2] - o.d[2], d[3] - o.d[3]}};
    }
    Dual4 operator*(const Dual4 &o) const {
        return {v * o.v,
                {d[0] * o.v + v * o.d[0], d[1] * o.v + v * o.d[1],
                 d[2] * o.v + v * o.d[2], d[3] * o.v + v * o.d[3]}};
    }
    Dual4 operator/(const Dual4 &o) const {
        const double inv = 1.0 / o.v;
        // True division for the primal so dual evaluation of a formula
        // reproduces its plain-double value bit for bit.
        const double q = v / o.v;
        return {q,
                {(d[0] - q * o.d[0]) * inv, (d[1] - q * o.d[1]) * inv,
                 (d[2] - q * o.d[2]) * inv, (d[3] - q * o.d[3]) * inv}};
    }
    Dual4 &operator+=(const Dual4 &o) { return *this = *this + o; }
    Dual4 &operator-=(const Dual4 &o) { return *this = *this - o; }
    Dual4 &operator*=(const Dual4 &o) { return *this = *this * o; }

  private:
    Dual4(double value, std::array<double, 4> tan) : v(value), d(tan) {}
    friend Dual4 sin(const Dual4 &);
    friend Dual4 cos(const Dual4 &);
    friend Dual4 sqrt(const Dual4 &);
    friend Dual4 exp(const Dual4 &);
    friend Dual4 tanh(const Dual4 &);
    friend Dual4 relu(const Dual4 &);
    friend Dual4 max_const(const Dual4 &, double);
};

inline Dual4 operator+(double a, const Dual4 &b) { return Dual4(a) + b; }
inline Dual4 operator-(double a, const Dual4 &b) { return Dual4(a) - b; }
inline Dual4 operator*(double a, const Dual4 &b) { return Dual4(a) * b; }
inline Dual4 operator/(double a, const Dual4 &b) { return Dual4(a) / b; }

inline Dual4 sin(const Dual4 &x) {
    const double c = std::cos(x.v);
    return {std::sin(x.v), {c * x.d[0], c * x.d[1], c * x.d[2], c * x.d[3]}};
}
inline Dual4 cos(const Dual4 &x) {
    const double s = -std::sin(x.v);
    return {std::cos(x.v), {s * x.d[0], s * x.d[1], s * x.d[2], s * x.d[3]}};
}
inline Dual4 sqrt(const Dual4 &x) {
    const double r = std::sqrt(x.v);
    const double k = r > 0 ? 0.5 / r : 0.0;
    return {r, {k * x.d[0], k * x.d[1], k * x.d[2], k * x.d[3]}};
}
inline Dual4 exp(const Dual4 &x) {
    const double e = std::exp(x.v);
    return {e, {e * x.d[0], e * x.d[1], e * x.d[2], e * x.d[3]}};
}
inline Dual4 tanh(const Dual4 &x) {
    const double t = std::tanh(x.v);
    const double k = 1.0 - t * t;
    return {t, {k * x.d[0], k * x.d[1], k * x.d[2], k * x.d[3]}};
}
inline Dual4 relu(const Dual4 &x) {
    if (x.v > 0) return x;
    return {0.0, {0, 0, 0, 0}};
}
inline Dual4 max_const(const Dual4 &x, double c) {
    if (x.v > c) return x;
    return {c, {0, 0, 0, 0}};
}

// Evaluates an R^4 -> R^3 map once with seeded dual inputs and returns the
// value together with the full 3x4 Jacobian (columns: x, y, z, t).
struct JetResult {
    Vec3 value;
    Mat3x4 jacobian;
};

template <class F>
JetResult forward_jacobian(F &&f, const Vec4 &x) {
    std::array<Dual4, 4> in;
    for (int i = 0; i < 4; ++i) in[i] = Dual4::seeded(x[i], i);
    std::array<Dual4, 3> out = f(in);
    JetResult r;
    for (int i = 0; i < 3; ++i) {
        check_finite(out[i].v, "forward_jacobian", "value");
        r.value[i] = out[i].v;
        for (int j = 0; j < 4; ++j) {
            check_finite(out[i].d[j], "forward_jacobian", "tangent");
            r.jacobian(i, j) = out[i].d[j];
        }
    }
    return r;
}

// Graph-valued dual: a value tensor plus one tangent tensor per seeded input
// direction. All four tangents always exist (zero tensors when unseeded).
struct DualTensor {
    Tensor v;
    std::array<Tensor, 4> d;

    static DualTensor constant(Graph &g, int rows, int cols,
                               std::span<const double> data) {
        DualTensor r;
        r.v = g.constant(rows, cols, data);
        for (auto &t : r.d) t = g.constant(rows, cols, 0.0);
        return r;
    }
};

inline DualTensor dt_add(Graph &g, const DualTensor &a, const DualTensor &b) {
    DualTensor r;
    r.v = g.add(a.v, b.v);
    for (int k = 0; k < 4; ++k) r.d[k] = g.add(a.d[k], b.d[k]);
    return r;
}

inline DualTensor dt_sub(Graph &g, const DualTensor &a, const DualTensor &b) {
    DualTensor r;
    r.v = g.sub(a.v, b.v);
    for (int k = 0; k < 4; ++k) r.d[k] = g.sub(a.d[k], b.d[k]);
    return r;
}

inline DualTensor dt_emul(Graph &g, const DualTensor &a, const DualTensor &b) {
    DualTensor r;
    r.v = g.emul(a.v, b.v);
    for (int k = 0; k < 4; ++k)
        r.d[k] = g.add(g.emul(a.d[k], b.v), g.emul(a.v, b.d[k]));
    return r;
}

inline DualTensor dt_ediv(Graph &g, const DualTensor &a, const DualTensor &b) {
    DualTensor r;
    r.v = g.ediv(a.v, b.v);
    // (a'/b) - (a/b) * (b'/b)
    for (int k = 0; k < 4; ++k)
        r.d[k] = g.sub(g.ediv(a.d[k], b.v), g.emul(r.v, g.ediv(b.d[k], b.v)));
    return r;
}

// W has no tangent (parameters are constant along input directions).
inline DualTensor dt_matmul(Graph &g, Tensor w, const DualTensor &x) {
    DualTensor r;
    r.v = g.matmul(w, x.v);
    for (int k = 0; k < 4; ++k) r.d[k] = g.matmul(w, x.d[k]);
    return r;
}

inline DualTensor dt_add_colvec(Graph &g, const DualTensor &x, Tensor bias) {
    DualTensor r = x;
    r.v = g.add_colvec(x.v, bias);
    return r;
}

inline DualTensor dt_affine(Graph &g, const DualTensor &x, double a, double b) {
    DualTensor r;
    r.v = g.affine(x.v, a, b);
    for (int k = 0; k < 4; ++k) r.d[k] = g.affine(x.d[k], a, 0.0);
    return r;
}

inline DualTensor dt_relu(Graph &g, const DualTensor &x) {
    DualTensor r;
    r.v = g.relu(x.v);
    for (int k = 0; k < 4; ++k) r.d[k] = g.gate(x.d[k], x.v, 1.0, 0.0);
    return r;
}

inline DualTensor dt_cmax(Graph &g, const DualTensor &x, double c) {
    DualTensor r;
    r.v = g.cmax(x.v, c);
    Tensor shifted = g.affine(x.v, 1.0, -c);
    for (int k = 0; k < 4; ++k) r.d[k] = g.gate(x.d[k], shifted, 1.0, 0.0);
    return r;
}

inline DualTensor dt_sin(Graph &g, const DualTensor &x) {
    DualTensor r;
    r.v = g.sin(x.v);
    Tensor c = g.cos(x.v);
    for (int k = 0; k < 4; ++k) r.d[k] = g.emul(c, x.d[k]);
    return r;
}

inline DualTensor dt_cos(Graph &g, const DualTensor &x) {
    DualTensor r;
    r.v = g.cos(x.v);
    Tensor s = g.neg(g.sin(x.v));
    for (int k = 0; k < 4; ++k) r.d[k] = g.emul(s, x.d[k]);
    return r;
}

inline DualTensor dt_slice_rows(Graph &g, const DualTensor &x, int r0, int nr) {
    DualTensor r;
    r.v = g.slice_rows(x.v, r0, nr);
    for (int k = 0; k < 4; ++k) r.d[k] = g.slice_rows(x.d[k], r0, nr);
    return r;
}

inline DualTensor dt_concat_rows(Graph &g, const DualTensor &a,
                                 const DualTensor &b) {
    DualTensor r;
    r.v = g.concat_rows(a.v, b.v);
    for (int k = 0; k < 4; ++k) r.d[k] = g.concat_rows(a.d[k], b.d[k]);
    return r;
}

inline DualTensor dt_mul_rowvec(Graph &g, const DualTensor &m,
                                const DualTensor &row) {
    DualTensor r;
    r.v = g.mul_rowvec(m.v, row.v);
    for (int k = 0; k < 4; ++k)
        r.d[k] = g.add(g.mul_rowvec(m.d[k], row.v), g.mul_rowvec(m.v, row.d[k]));
    return r;
}

// Runs reverse mode from a scalar loss and leaves gradients in `params`.
// Works identically whether the loss touches plain values or Jacobian
// entries produced through DualTensor arithmetic.
inline void backprop(Tensor loss, ParameterSet &params) {
    params.zero_grads();
    loss.graph->backward(loss);
}

// Same mechanics; named separately where the loss is built from input
// derivatives so call sites read as what they are.
inline void nested_grad(Tensor residual_loss, ParameterSet &params) {
    backprop(residual_loss, params);
}

}  // namespace splatflow::ad
