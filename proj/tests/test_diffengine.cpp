#include <cstring>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "splatflow/dual.hpp"
#include "splatflow/graph.hpp"

using namespace splatflow;
using namespace splatflow::ad;

namespace {

// Small tanh MLP on plain duals: smooth everywhere so finite differences
// converge cleanly.
struct TinyMlp {
    int in = 4, hidden = 8, out = 3;
    std::vector<double> w1, b1, w2, b2;

    explicit TinyMlp(uint64_t seed) {
        Rng rng(seed);
        auto fill = [&](std::vector<double> &v, size_t n) {
            v.resize(n);
            for (auto &x : v) x = rng.normal() * 0.5;
        };
        fill(w1, size_t(hidden) * in);
        fill(b1, hidden);
        fill(w2, size_t(out) * hidden);
        fill(b2, out);
    }

    template <class S>
    std::array<S, 3> eval(const std::array<S, 4> &x) const {
        std::vector<S> h(hidden);
        for (int i = 0; i < hidden; ++i) {
            S s = b1[i];
            for (int j = 0; j < in; ++j) s += w1[size_t(i) * in + j] * x[j];
            h[i] = tanh(s);
        }
        std::array<S, 3> y;
        for (int i = 0; i < out; ++i) {
            S s = b2[i];
            for (int j = 0; j < hidden; ++j) s += w2[size_t(i) * hidden + j] * h[j];
            y[i] = s;
        }
        return y;
    }
};

}  // namespace

TEST_CASE("forward_jacobian: identity map") {
    auto f = [](const std::array<Dual4, 4> &x) {
        return std::array<Dual4, 3>{x[0], x[1], x[2]};
    };
    auto r = forward_jacobian(f, Vec4{1, 2, 3, 0});
    CHECK(r.value.x == 1.0);
    CHECK(r.value.y == 2.0);
    CHECK(r.value.z == 3.0);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j)
            CHECK(r.jacobian(i, j) == (i == j ? 1.0 : 0.0));
}

TEST_CASE("forward_jacobian: rigid rotation field (-y, x, 0)") {
    auto f = [](const std::array<Dual4, 4> &x) {
        return std::array<Dual4, 3>{-x[1], x[0], Dual4(0.0)};
    };
    auto r = forward_jacobian(f, Vec4{1, 2, 0, 0.5});
    CHECK(r.value.x == -2.0);
    CHECK(r.value.y == 1.0);
    CHECK(r.jacobian(0, 1) == -1.0);
    CHECK(r.jacobian(1, 0) == 1.0);
    CHECK(r.jacobian(0, 0) == 0.0);
    CHECK(r.jacobian(2, 2) == 0.0);
    CHECK(r.jacobian(0, 3) == 0.0);
}

TEST_CASE("forward_jacobian: random MLP matches central differences") {
    TinyMlp mlp(17);
    auto f_dual = [&](const std::array<Dual4, 4> &x) { return mlp.eval(x); };
    auto f_plain = [&](const Vec4 &x) {
        std::array<double, 4> in{x.x, x.y, x.z, x.w};
        auto y = mlp.eval(in);
        return Vec3{y[0], y[1], y[2]};
    };
    const Vec4 probes[] = {{0.3, -0.2, 0.7, 0.1}, {-1.1, 0.4, 0.0, 0.9}};
    for (const auto &p : probes) {
        auto ad_jet = forward_jacobian(f_dual, p);
        auto fd_jac = fd::jacobian(f_plain, p, 1e-5);
        double worst = 0;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 4; ++j)
                worst = std::max(worst,
                                 fd::rel_err(ad_jet.jacobian(i, j), fd_jac(i, j)));
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("forward_jacobian: chain rule on composed maps") {
    // g: R4 -> R4 (smooth), f: R4 -> R3; J(f.g) must equal Jf(g(x)) * Jg(x).
    TinyMlp mlp(23);
    auto g = [](const std::array<Dual4, 4> &x) {
        return std::array<Dual4, 4>{sin(x[0]) + x[3], x[1] * x[2],
                                    cos(x[2]), x[0] - 0.5 * x[1]};
    };
    auto fg = [&](const std::array<Dual4, 4> &x) { return mlp.eval(g(x)); };
    const Vec4 x0{0.4, -0.7, 1.2, 0.3};
    auto full = forward_jacobian(fg, x0);

    // Inner Jacobian, 4x4, from a separately seeded evaluation of g alone.
    std::array<Dual4, 4> seeded;
    for (int i = 0; i < 4; ++i) seeded[i] = Dual4::seeded(x0[i], i);
    auto gx = g(seeded);
    // Outer Jacobian evaluated at g(x0).
    auto outer = forward_jacobian(
        [&](const std::array<Dual4, 4> &y) { return mlp.eval(y); },
        Vec4{gx[0].v, gx[1].v, gx[2].v, gx[3].v});

    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) {
            double prod = 0;
            for (int k = 0; k < 4; ++k)
                prod += outer.jacobian(i, k) * gx[k].d[j];
            CHECK(fd::rel_err(full.jacobian(i, j), prod) < 1e-12);
        }
}

TEST_CASE("backprop: sum of squares gives 2*theta") {
    ParameterSet ps;
    auto &e = ps.add("theta", 1, 5);
    for (int i = 0; i < 5; ++i) e.value[i] = 0.5 * i - 1.0;

    Graph g;
    Tensor th = g.param(ps, "theta");
    backprop(g.sumsq(th), ps);
    for (int i = 0; i < 5; ++i) CHECK(e.grad[i] == doctest::Approx(2 * e.value[i]));
}

TEST_CASE("backprop: loss constant in parameters gives zero gradient") {
    ParameterSet ps;
    ps.add("unused", 2, 2).value = {1, 2, 3, 4};
    Graph g;
    g.param(ps, "unused");
    Tensor c = g.scalar(3.0);
    backprop(g.sumsq(c), ps);
    for (double v : ps.entry("unused").grad) CHECK(v == 0.0);
}

TEST_CASE("backprop: every op kind matches finite differences") {
    Rng rng(99);
    ParameterSet ps;
    auto &a = ps.add("a", 4, 6);
    auto &b = ps.add("b", 6, 5);
    auto &v = ps.add("v", 4, 1);
    auto &r = ps.add("r", 1, 5);
    for (auto *e : {&a, &b, &v, &r})
        for (auto &x : e->value) x = rng.normal();

    auto loss = [&](bool grad = false) {
        Graph g;
        Tensor A = g.param(ps, "a");
        Tensor B = g.param(ps, "b");
        Tensor M = g.matmul(A, B);                     // 4x5
        M = g.add_colvec(M, g.param(ps, "v"));
        M = g.mul_rowvec(M, g.param(ps, "r"));
        Tensor s = g.sin(M);
        Tensor c = g.cos(M);
        Tensor mix = g.add(g.emul(s, c), g.affine(M, 0.3, 0.1));
        mix = g.lrelu(mix, 0.2);
        Tensor den = g.cmax(g.colsumsq(mix), 0.5);     // 1x5, positive
        Tensor ratio = g.ediv(g.colsumsq(g.relu(M)), den);
        Tensor top = g.concat_rows(g.slice_rows(mix, 0, 2), ratio);  // 3x5
        std::array<int, 4> idx{4, 0, 2, 2};
        Tensor gth = g.gather_cols(top, idx);
        Tensor red = g.add(g.sumsq(gth), g.sum(g.rowmean(g.sqrt(g.cmax(top, 0.01)))));
        if (grad) backprop(red, ps);
        return red.item();
    };

    loss(true);
    std::vector<std::vector<double>> got;
    for (auto &e : ps.entries()) got.push_back(e.grad);
    auto want = fd::param_gradient(ps, [&] { return loss(false); });
    for (size_t i = 0; i < got.size(); ++i)
        CHECK(fd::max_rel_err(got[i], want[i]) < 1e-5);
}

TEST_CASE("backprop: conv2d matches finite differences") {
    Rng rng(7);
    ParameterSet ps;
    auto &x = ps.add("x", 2, 5 * 4);  // 2 channels, 5x4 image
    auto &k = ps.add("k", 3, 2 * 3 * 3);
    for (auto *e : {&x, &k})
        for (auto &w : e->value) w = rng.normal() * 0.3;

    ConvSpec spec;
    spec.in_ch = 2;
    spec.height = 5;
    spec.width = 4;
    spec.out_ch = 3;
    spec.ksize = 3;
    spec.stride = 2;
    spec.pad = 1;

    auto loss = [&](bool grad = false) {
        Graph g;
        Tensor out = g.conv2d(g.param(ps, "x"), g.param(ps, "k"), spec);
        Tensor red = g.sumsq(g.relu(out));
        if (grad) backprop(red, ps);
        return red.item();
    };

    loss(true);
    std::vector<std::vector<double>> got;
    for (auto &e : ps.entries()) got.push_back(e.grad);
    auto want = fd::param_gradient(ps, [&] { return loss(false); });
    for (size_t i = 0; i < got.size(); ++i)
        CHECK(fd::max_rel_err(got[i], want[i]) < 1e-5);
}

TEST_CASE("nested gradient: closed form for a linear velocity field") {
    // u = A * (x,y,z,t). The divergence is A00 + A11 + A22, so the gradient
    // of div^2 with respect to A is 2*div on those三 entries, zero elsewhere.
    ParameterSet ps;
    auto &A = ps.add("A", 3, 4);
    Rng rng(31);
    for (auto &w : A.value) w = rng.normal();

    Graph g;
    Tensor W = g.param(ps, "A");
    DualTensor in;
    const double pv[4] = {0.7, -0.3, 0.2, 0.9};
    in.v = g.constant(4, 1, std::span<const double>(pv, 4));
    for (int k = 0; k < 4; ++k) {
        double seed[4] = {0, 0, 0, 0};
        seed[k] = 1.0;
        in.d[k] = g.constant(4, 1, std::span<const double>(seed, 4));
    }
    DualTensor u = dt_matmul(g, W, in);
    Tensor div = g.add(g.add(g.slice_rows(u.d[0], 0, 1), g.slice_rows(u.d[1], 1, 1)),
                       g.slice_rows(u.d[2], 2, 1));
    Tensor loss = g.sumsq(div);
    nested_grad(loss, ps);

    const double divv = A.value[0] + A.value[5] + A.value[10];
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) {
            const double want = (i == j) ? 2.0 * divv : 0.0;
            CHECK(A.grad[size_t(i) * 4 + j] == doctest::Approx(want).epsilon(1e-12));
        }
}

TEST_CASE("nested gradient: dual-tensor tangents match plain duals and FD") {
    // A two-layer network evaluated through graph duals. The tangent values
    // must agree with Dual4 forward mode, and the gradient of a tangent-based
    // loss must agree with finite differences over the weights.
    Rng rng(55);
    ParameterSet ps;
    auto &w1 = ps.add("w1", 6, 4);
    auto &w2 = ps.add("w2", 3, 6);
    for (auto *e : {&w1, &w2})
        for (auto &w : e->value) w = rng.normal() * 0.6;

    const double pv[4] = {0.37, -0.41, 0.83, 0.29};

    auto build = [&](Graph &g, DualTensor &u_out) {
        DualTensor in;
        in.v = g.constant(4, 1, std::span<const double>(pv, 4));
        for (int k = 0; k < 4; ++k) {
            double seed[4] = {0, 0, 0, 0};
            seed[k] = 1.0;
            in.d[k] = g.constant(4, 1, std::span<const double>(seed, 4));
        }
        DualTensor h = dt_relu(g, dt_matmul(g, g.param(ps, "w1"), in));
        u_out = dt_matmul(g, g.param(ps, "w2"), h);
        Tensor acc = g.sumsq(u_out.d[0]);
        for (int k = 1; k < 4; ++k) acc = g.add(acc, g.sumsq(u_out.d[k]));
        return acc;
    };

    // Tangents vs plain duals.
    {
        Graph g;
        DualTensor u;
        build(g, u);
        for (int k = 0; k < 4; ++k) {
            std::array<Dual4, 4> in;
            for (int i = 0; i < 4; ++i)
                in[i] = (i == k) ? Dual4::seeded(pv[i], k) : Dual4(pv[i]);
            std::array<Dual4, 3> y;
            for (int i = 0; i < 3; ++i) {
                Dual4 s = 0.0;
                for (int j = 0; j < 6; ++j) {
                    Dual4 hj = 0.0;
                    for (int m = 0; m < 4; ++m)
                        hj += w1.value[size_t(j) * 4 + m] * in[m];
                    s += w2.value[size_t(i) * 6 + j] * relu(hj);
                }
                y[i] = s;
            }
            for (int i = 0; i < 3; ++i) {
                CHECK(u.v.value()[i] == doctest::Approx(y[i].v).epsilon(1e-12));
                CHECK(u.d[k].value()[i] == doctest::Approx(y[i].d[k]).epsilon(1e-12));
            }
        }
    }

    // Parameter gradients of the Jacobian-magnitude loss vs FD.
    {
        Graph g;
        DualTensor u;
        Tensor loss = build(g, u);
        nested_grad(loss, ps);
        std::vector<std::vector<double>> got;
        for (auto &e : ps.entries()) got.push_back(e.grad);
        auto want = fd::param_gradient(ps, [&] {
            Graph g2;
            DualTensor u2;
            return build(g2, u2).item();
        });
        for (size_t i = 0; i < got.size(); ++i)
            CHECK(fd::max_rel_err(got[i], want[i], 1e-4) < 1e-4);
    }
}

TEST_CASE("backprop determinism: identical builds give bit-identical grads") {
    Rng rng(5);
    ParameterSet ps;
    auto &w = ps.add("w", 8, 8);
    for (auto &x : w.value) x = rng.normal();

    auto run = [&]() {
        Graph g;
        Tensor W = g.param(ps, "w");
        Tensor y = g.relu(g.matmul(W, g.sin(W)));
        backprop(g.sumsq(y), ps);
        return ps.entry("w").grad;
    };
    auto g1 = run();
    auto g2 = run();
    CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("graph reuse: reset keeps results identical") {
    ParameterSet ps;
    ps.add("w", 3, 3).value = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    Graph g;
    auto build = [&]() {
        Tensor W = g.param(ps, "w");
        Tensor y = g.sumsq(g.matmul(W, W));
        backprop(y, ps);
        return std::make_pair(y.item(), ps.entry("w").grad);
    };
    auto [v1, g1] = build();
    g.reset();
    auto [v2, g2] = build();
    CHECK(v1 == v2);
    CHECK(g1 == g2);
}

TEST_CASE("non-finite values fail fast naming the op") {
    Graph g;
    Tensor one = g.scalar(1.0);
    Tensor zero = g.scalar(0.0);
    CHECK_THROWS_AS(g.ediv(one, zero), NumericError);
    try {
        g.ediv(one, zero);
    } catch (const NumericError &e) {
        CHECK(e.op_name == "ediv");
    }
}

TEST_CASE("structural errors") {
    Graph g1, g2;
    Tensor a = g1.scalar(1.0);
    Tensor b = g2.scalar(2.0);
    CHECK_THROWS_AS(g1.add(a, b), StructureError);

    // Gradients are not readable before backward has run.
    Tensor c = g1.scalar(4.0);
    CHECK_THROWS_AS((void)c.grad(), StructureError);

    // Backward needs a scalar.
    Tensor m = g1.constant(2, 2, 1.0);
    CHECK_THROWS_AS(g1.backward(m), ShapeError);
}

TEST_CASE("parameter set basics") {
    ParameterSet ps;
    ps.add("b", 1, 2);
    ps.add("a", 2, 2);
    CHECK_THROWS_AS(ps.add("a", 1, 1), ArgumentError);
    CHECK_THROWS_AS(ps.entry("missing"), ArgumentError);
    CHECK_THROWS_AS(ps.add("bad", 0, 3), ShapeError);
    // Deterministic insertion order, not alphabetical.
    CHECK(ps.entries()[0].name == "b");
    CHECK(ps.entries()[1].name == "a");
    CHECK(ps.total_values() == 6);
}
