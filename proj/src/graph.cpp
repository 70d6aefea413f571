#include "splatflow/graph.hpp"

#include <cmath>
#include <cstring>

namespace splatflow::ad {

const char *op_name(Graph::Op op) {
    switch (op) {
        case Graph::Op::Const: return "const";
        case Graph::Op::Param: return "param";
        case Graph::Op::MatMul: return "matmul";
        case Graph::Op::Add: return "add";
        case Graph::Op::Sub: return "sub";
        case Graph::Op::EMul: return "emul";
        case Graph::Op::EDiv: return "ediv";
        case Graph::Op::Affine: return "affine";
        case Graph::Op::AddColVec: return "add_colvec";
        case Graph::Op::MulRowVec: return "mul_rowvec";
        case Graph::Op::Relu: return "relu";
        case Graph::Op::LRelu: return "lrelu";
        case Graph::Op::Gate: return "gate";
        case Graph::Op::CMax: return "cmax";
        case Graph::Op::Sin: return "sin";
        case Graph::Op::Cos: return "cos";
        case Graph::Op::Sqrt: return "sqrt";
        case Graph::Op::SliceRows: return "slice_rows";
        case Graph::Op::ConcatRows: return "concat_rows";
        case Graph::Op::GatherCols: return "gather_cols";
        case Graph::Op::ColSumSq: return "colsumsq";
        case Graph::Op::RowMean: return "rowmean";
        case Graph::Op::Sum: return "sum";
        case Graph::Op::SumSq: return "sumsq";
        case Graph::Op::Conv2d: return "conv2d";
    }
    return "?";
}

int Tensor::rows() const { return graph->nodes_[id].rows; }
int Tensor::cols() const { return graph->nodes_[id].cols; }

std::span<const double> Tensor::value() const {
    const auto &n = graph->nodes_[id];
    return {graph->vals_.data() + n.off, size_t(n.rows) * n.cols};
}

std::span<const double> Tensor::grad() const {
    if (!graph->has_grads_)
        throw StructureError("gradient requested before backward()");
    const auto &n = graph->nodes_[id];
    return {graph->grads_.data() + n.off, size_t(n.rows) * n.cols};
}

double Tensor::item() const {
    if (rows() != 1 || cols() != 1)
        throw ShapeError("item() needs a 1x1 tensor");
    return value()[0];
}

Tensor Graph::require(Tensor t, const char *what) const {
    if (!t.valid() || t.graph != this)
        throw StructureError(std::string(what) +
                             ": tensor does not belong to this graph");
    return t;
}

Tensor Graph::make(Op op, int rows, int cols, int a, int b, int aux) {
    if (rows <= 0 || cols <= 0)
        throw ShapeError(std::string(op_name(op)) + ": empty result shape");
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.rows = rows;
    n.cols = cols;
    n.aux = aux;
    n.off = vals_.size();
    vals_.resize(vals_.size() + size_t(rows) * cols, 0.0);
    nodes_.push_back(n);
    has_grads_ = false;
    return Tensor{this, int(nodes_.size()) - 1};
}

void Graph::check(Tensor t, const char *name) {
    for (double v : t.value())
        if (!std::isfinite(v)) throw NumericError(name, "output check");
}

void Graph::reset() {
    nodes_.clear();
    vals_.clear();
    grads_.clear();
    fconst_.clear();
    index_sets_.clear();
    islice_.clear();
    convs_.clear();
    param_nodes_.clear();
    has_grads_ = false;
}

// ---------------------------------------------------------------- leaves

Tensor Graph::constant(int rows, int cols, std::span<const double> data) {
    if (data.size() != size_t(rows) * cols)
        throw ShapeError("constant: data length does not match shape");
    Tensor t = make(Op::Const, rows, cols);
    std::memcpy(ptr(t.id), data.data(), data.size() * sizeof(double));
    check(t, "const");
    return t;
}

Tensor Graph::constant(int rows, int cols, double fill) {
    Tensor t = make(Op::Const, rows, cols);
    std::fill_n(ptr(t.id), size_t(rows) * cols, fill);
    check(t, "const");
    return t;
}

Tensor Graph::param(ParameterSet &ps, const std::string &name) {
    auto &e = ps.entry(name);
    for (const auto &[entry, node] : param_nodes_)
        if (entry == &e) return Tensor{this, node};
    Tensor t = make(Op::Param, e.rows, e.cols);
    std::memcpy(ptr(t.id), e.value.data(), e.value.size() * sizeof(double));
    nodes_[t.id].param = &e;
    param_nodes_.emplace_back(&e, t.id);
    check(t, "param");
    return t;
}

// ------------------------------------------------------------- forward ops

Tensor Graph::matmul(Tensor a, Tensor b) {
    require(a, "matmul");
    require(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dims disagree");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor t = make(Op::MatMul, m, n, a.id, b.id);
    const double *A = ptr(a.id), *B = ptr(b.id);
    double *C = ptr(t.id);
    for (int i = 0; i < m; ++i) {
        double *crow = C + size_t(i) * n;
        const double *arow = A + size_t(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double *brow = B + size_t(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    check(t, "matmul");
    return t;
}

Tensor Graph::add(Tensor a, Tensor b) {
    require(a, "add");
    require(b, "add");
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("add: shape mismatch");
    Tensor t = make(Op::Add, a.rows(), a.cols(), a.id, b.id);
    const double *A = ptr(a.id), *B = ptr(b.id);
    double *C = ptr(t.id);
    for (size_t i = 0; i < t.size(); ++i) C[i] = A[i] + B[i];
    check(t, "add");
    return t;
}

Tensor Graph::sub(Tensor a, Tensor b) {
    require(a, "sub");
    require(b, "sub");
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("sub: shape mismatch");
    Tensor t = make(Op::Sub, a.rows(), a.cols(), a.id, b.id);
    const double *A = ptr(a.id), *B = ptr(b.id);
    double *C = ptr(t.id);
    for (size_t i = 0; i < t.size(); ++i) C[i] = A[i] - B[i];
    check(t, "sub");
    return t;
}

Tensor Graph::emul(Tensor a, Tensor b) {
    require(a, "emul");
    require(b, "emul");
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("emul: shape mismatch");
    Tensor t = make(Op::EMul, a.rows(), a.cols(), a.id, b.id);
    const double *A = ptr(a.id), *B = ptr(b.id);
    double *C = ptr(t.id);
    for (size_t i = 0; i < t.size(); ++i) C[i] = A[i] * B[i];
    check(t, "emul");
    return t;
}

Tensor Graph::ediv(Tensor a, Tensor b) {
    require(a, "ediv");
    require(b, "ediv");
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("ediv: shape mismatch");
    Tensor t = make(Op::EDiv, a.rows(), a.cols(), a.id, b.id);
    const double *A = ptr(a.id), *B = ptr(b.id);
    double *C = ptr(t.id);
    for (size_t i = 0; i < t.size(); ++i) C[i] = A[i] / B[i];
    check(t, "ediv");
    return t;
}

Tensor Graph::affine(Tensor x, double a, double b) {
    require(x, "affine");
    fconst_.push_back({a, b});
    Tensor t = make(Op::Affine, x.rows(), x.cols(), x.id, -1,
                    int(fconst_.size()) - 1);
    const double *X = ptr(x.id);
    double *C = ptr(t.id);
    for (size_t i = 0; i < t.size(); ++i) C[i] = a * X[i] + b;
    check(t, "affine");
    return t;
}

Tensor Graph::add_colvec(Tensor m, Tensor v) {
    require(m, "add_colvec");
    require(v, "add_colvec");
    if (v.cols() != 1 || v.rows() != m.rows())
        throw ShapeError("add_colvec: vector must be [rows x 1]");
    Tensor t = make(Op::AddColVec, m.rows(), m.cols(), m.id, v.id);
    const double *M = ptr(m.id), *V = ptr(v.id);
    double *C = ptr(t.id);
    const int rows = m.rows(), cols = m.cols();
    for (int i = 0; i < rows; ++i) {
        const double b = V[i];
        const double *mrow = M + size_t(i) * cols;
        double *crow = C + size_t(i) * cols;
        for (int j = 0; j < cols; ++j) crow[j] = mrow[j] + b;
    }
    check(t, "add_colvec");
    return t;
}

Tensor Graph::mul_rowvec(Tensor m, Tensor r) {
    require(m, "mul_rowvec");
    require(r, "mul_rowvec");
    if (r.rows() != 1 || r.cols() != m.cols())
        throw ShapeError("mul_rowvec: vector must be [1 x cols]");
    Tensor t = make(Op::MulRowVec, m.rows(), m.cols(), m.id, r.id);
    const double *M = ptr(m.id), *R = ptr(r.id);
    double *C = ptr(t.id);
    const int rows = m.rows(), cols = m.cols();
    for (int i = 0; i < rows; ++i) {
        const double *mrow = M + size_t(i) * cols;
        double *crow = C + size_t(i) * cols;
        for (int j = 0; j < cols; ++j) crow[j] = mrow[j] * R[j];
    }
    check(t, "mul_rowvec");
    return t;
}

Tensor Graph::relu(Tensor x) {
    require(x, "relu");
    Tensor t = make(Op::Relu, x.rows(), x.cols(), x.id);
    const double *X = ptr(x.id);
    double *C = ptr(t.id);
    for (size_t i = 0; i < t.size(); ++i) C[i] = X[i] > 0 ? X[i] : 0.0;
    check(t, "relu");
    return t;
}

Tensor Graph::lrelu(Tensor x, double slope) {
    require(x, "lrelu");
    fconst_.push_back({slope, 0.0});
    Tensor t = make(Op::LRelu, x.rows(), x.cols(), x.id, -1,
                    int(fconst_.size()) - 1);
    const double *X = ptr(x.id);
    double *C = ptr(t.id);
    for (size_t i = 0; i < t.size(); ++i) C[i] = X[i] > 0 ? X[i] : slope * X[i];
    check(t, "lrelu");
    return t;
}

Tensor Graph::gate(Tensor x, Tensor ref, double hi, double lo) {
    require(x, "gate");
    require(ref, "gate");
    if (x.rows() != ref.rows() || x.cols() != ref.cols())
        throw ShapeError("gate: shape mismatch");
    fconst_.push_back({hi, lo});
    Tensor t = make(Op::Gate, x.rows(), x.cols(), x.id, ref.id,
                    int(fconst_.size()) - 1);
    const double *X = ptr(x.id), *R = ptr(ref.id);
    double *C = ptr(t.id);
    for (size_t i = 0; i < t.size(); ++i) C[i] = X[i] * (R[i] > 0 ? hi : lo);
    check(t, "gate");
    return t;
}

Tensor Graph::cmax(Tensor x, double c) {
    require(x, "cmax");
    fconst_.push_back({c, 0.0});
    Tensor t = make(Op::CMax, x.rows(), x.cols(), x.id, -1,
                    int(fconst_.size()) - 1);
    const double *X = ptr(x.id);
    double *C = ptr(t.id);
    for (size_t i = 0; i < t.size(); ++i) C[i] = X[i] > c ? X[i] : c;
    check(t, "cmax");
    return t;
}

Tensor Graph::sin(Tensor x) {
    require(x, "sin");
    Tensor t = make(Op::Sin, x.rows(), x.cols(), x.id);
    const double *X = ptr(x.id);
    double *C = ptr(t.id);
    for (size_t i = 0; i < t.size(); ++i) C[i] = std::sin(X[i]);
    check(t, "sin");
    return t;
}

Tensor Graph::cos(Tensor x) {
    require(x, "cos");
    Tensor t = make(Op::Cos, x.rows(), x.cols(), x.id);
    const double *X = ptr(x.id);
    double *C = ptr(t.id);
    for (size_t i = 0; i < t.size(); ++i) C[i] = std::cos(X[i]);
    check(t, "cos");
    return t;
}

Tensor Graph::sqrt(Tensor x) {
    require(x, "sqrt");
    Tensor t = make(Op::Sqrt, x.rows(), x.cols(), x.id);
    const double *X = ptr(x.id);
    double *C = ptr(t.id);
    for (size_t i = 0; i < t.size(); ++i) C[i] = std::sqrt(X[i]);
    check(t, "sqrt");
    return t;
}

Tensor Graph::slice_rows(Tensor m, int row0, int nrows) {
    require(m, "slice_rows");
    if (row0 < 0 || nrows <= 0 || row0 + nrows > m.rows())
        throw ShapeError("slice_rows: range out of bounds");
    islice_.push_back({row0, nrows});
    Tensor t = make(Op::SliceRows, nrows, m.cols(), m.id, -1,
                    int(islice_.size()) - 1);
    const int cols = m.cols();
    std::memcpy(ptr(t.id), ptr(m.id) + size_t(row0) * cols,
                size_t(nrows) * cols * sizeof(double));
    return t;
}

Tensor Graph::concat_rows(Tensor a, Tensor b) {
    require(a, "concat_rows");
    require(b, "concat_rows");
    if (a.cols() != b.cols())
        throw ShapeError("concat_rows: column counts disagree");
    Tensor t = make(Op::ConcatRows, a.rows() + b.rows(), a.cols(), a.id, b.id);
    std::memcpy(ptr(t.id), ptr(a.id), a.size() * sizeof(double));
    std::memcpy(ptr(t.id) + a.size(), ptr(b.id), b.size() * sizeof(double));
    return t;
}

Tensor Graph::gather_cols(Tensor m, std::span<const int> idx) {
    require(m, "gather_cols");
    if (idx.empty()) throw ShapeError("gather_cols: empty index set");
    for (int i : idx)
        if (i < 0 || i >= m.cols())
            throw ShapeError("gather_cols: index out of range");
    index_sets_.emplace_back(idx.begin(), idx.end());
    Tensor t = make(Op::GatherCols, m.rows(), int(idx.size()), m.id, -1,
                    int(index_sets_.size()) - 1);
    const double *M = ptr(m.id);
    double *C = ptr(t.id);
    const int rows = m.rows(), mc = m.cols(), n = int(idx.size());
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < n; ++j)
            C[size_t(i) * n + j] = M[size_t(i) * mc + idx[j]];
    return t;
}

Tensor Graph::colsumsq(Tensor m) {
    require(m, "colsumsq");
    Tensor t = make(Op::ColSumSq, 1, m.cols(), m.id);
    const double *M = ptr(m.id);
    double *C = ptr(t.id);
    const int rows = m.rows(), cols = m.cols();
    for (int i = 0; i < rows; ++i) {
        const double *mrow = M + size_t(i) * cols;
        for (int j = 0; j < cols; ++j) C[j] += mrow[j] * mrow[j];
    }
    check(t, "colsumsq");
    return t;
}

Tensor Graph::rowmean(Tensor m) {
    require(m, "rowmean");
    Tensor t = make(Op::RowMean, m.rows(), 1, m.id);
    const double *M = ptr(m.id);
    double *C = ptr(t.id);
    const int rows = m.rows(), cols = m.cols();
    for (int i = 0; i < rows; ++i) {
        double s = 0;
        const double *mrow = M + size_t(i) * cols;
        for (int j = 0; j < cols; ++j) s += mrow[j];
        C[i] = s / cols;
    }
    check(t, "rowmean");
    return t;
}

Tensor Graph::sum(Tensor m) {
    require(m, "sum");
    Tensor t = make(Op::Sum, 1, 1, m.id);
    const double *M = ptr(m.id);
    double s = 0;
    for (size_t i = 0; i < m.size(); ++i) s += M[i];
    *ptr(t.id) = s;
    check(t, "sum");
    return t;
}

Tensor Graph::sumsq(Tensor m) {
    require(m, "sumsq");
    Tensor t = make(Op::SumSq, 1, 1, m.id);
    const double *M = ptr(m.id);
    double s = 0;
    for (size_t i = 0; i < m.size(); ++i) s += M[i] * M[i];
    *ptr(t.id) = s;
    check(t, "sumsq");
    return t;
}

Tensor Graph::conv2d(Tensor x, Tensor kernel, const ConvSpec &spec) {
    require(x, "conv2d");
    require(kernel, "conv2d");
    if (x.rows() != spec.in_ch || x.cols() != spec.height * spec.width)
        throw ShapeError("conv2d: input plane shape mismatch");
    if (kernel.rows() != spec.out_ch ||
        kernel.cols() != spec.in_ch * spec.ksize * spec.ksize)
        throw ShapeError("conv2d: kernel shape mismatch");
    const int oh = spec.out_h(), ow = spec.out_w();
    if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: empty output");
    convs_.push_back(spec);
    Tensor t = make(Op::Conv2d, spec.out_ch, oh * ow, x.id, kernel.id,
                    int(convs_.size()) - 1);
    const double *X = ptr(x.id), *K = ptr(kernel.id);
    double *C = ptr(t.id);
    const int H = spec.height, W = spec.width, ks = spec.ksize;
    for (int co = 0; co < spec.out_ch; ++co) {
        double *orow = C + size_t(co) * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double s = 0;
                for (int ci = 0; ci < spec.in_ch; ++ci) {
                    const double *plane = X + size_t(ci) * H * W;
                    const double *krow =
                        K + size_t(co) * kernel.cols() + size_t(ci) * ks * ks;
                    for (int ky = 0; ky < ks; ++ky) {
                        const int y = oy * spec.stride - spec.pad + ky;
                        if (y < 0 || y >= H) continue;
                        for (int kx = 0; kx < ks; ++kx) {
                            const int xx = ox * spec.stride - spec.pad + kx;
                            if (xx < 0 || xx >= W) continue;
                            s += plane[size_t(y) * W + xx] * krow[ky * ks + kx];
                        }
                    }
                }
                orow[size_t(oy) * ow + ox] = s;
            }
    }
    check(t, "conv2d");
    return t;
}

// -------------------------------------------------------------- backward

void Graph::backward(Tensor loss) {
    require(loss, "backward");
    if (loss.rows() != 1 || loss.cols() != 1)
        throw ShapeError("backward: loss must be a 1x1 tensor");
    check_finite(loss.item(), "backward", "loss value");
    grads_.assign(vals_.size(), 0.0);
    has_grads_ = true;
    grads_[nodes_[loss.id].off] = 1.0;
    for (int id = loss.id; id >= 0; --id) backward_node(id);
    for (const auto &[entry, node] : param_nodes_) {
        auto *e = const_cast<ParameterSet::Entry *>(entry);
        const double *g = gptr(node);
        for (size_t i = 0; i < e->grad.size(); ++i) e->grad[i] += g[i];
    }
}

void Graph::backward_node(int id) {
    const Node &n = nodes_[id];
    const double *G = gptr(id);
    switch (n.op) {
        case Op::Const:
        case Op::Param:
            return;
        case Op::MatMul: {
            const Node &na = nodes_[n.a], &nb = nodes_[n.b];
            const int m = na.rows, k = na.cols, cols = nb.cols;
            const double *A = ptr(n.a), *B = ptr(n.b);
            double *gA = gptr(n.a), *gB = gptr(n.b);
            for (int i = 0; i < m; ++i) {
                const double *grow = G + size_t(i) * cols;
                const double *arow = A + size_t(i) * k;
                double *garow = gA + size_t(i) * k;
                for (int kk = 0; kk < k; ++kk) {
                    const double *brow = B + size_t(kk) * cols;
                    double s = 0;
                    for (int j = 0; j < cols; ++j) s += grow[j] * brow[j];
                    garow[kk] += s;
                    const double av = arow[kk];
                    if (av == 0.0) continue;
                    double *gbrow = gB + size_t(kk) * cols;
                    for (int j = 0; j < cols; ++j) gbrow[j] += av * grow[j];
                }
            }
            return;
        }
        case Op::Add: {
            double *gA = gptr(n.a), *gB = gptr(n.b);
            const size_t sz = size_t(n.rows) * n.cols;
            for (size_t i = 0; i < sz; ++i) {
                gA[i] += G[i];
                gB[i] += G[i];
            }
            return;
        }
        case Op::Sub: {
            double *gA = gptr(n.a), *gB = gptr(n.b);
            const size_t sz = size_t(n.rows) * n.cols;
            for (size_t i = 0; i < sz; ++i) {
                gA[i] += G[i];
                gB[i] -= G[i];
            }
            return;
        }
        case Op::EMul: {
            const double *A = ptr(n.a), *B = ptr(n.b);
            double *gA = gptr(n.a), *gB = gptr(n.b);
            const size_t sz = size_t(n.rows) * n.cols;
            for (size_t i = 0; i < sz; ++i) {
                gA[i] += G[i] * B[i];
                gB[i] += G[i] * A[i];
            }
            return;
        }
        case Op::EDiv: {
            const double *A = ptr(n.a), *B = ptr(n.b);
            double *gA = gptr(n.a), *gB = gptr(n.b);
            const size_t sz = size_t(n.rows) * n.cols;
            for (size_t i = 0; i < sz; ++i) {
                const double inv = 1.0 / B[i];
                gA[i] += G[i] * inv;
                gB[i] -= G[i] * A[i] * inv * inv;
            }
            return;
        }
        case Op::Affine: {
            const double a = fconst_[n.aux][0];
            double *gA = gptr(n.a);
            const size_t sz = size_t(n.rows) * n.cols;
            for (size_t i = 0; i < sz; ++i) gA[i] += a * G[i];
            return;
        }
        case Op::AddColVec: {
            double *gM = gptr(n.a), *gV = gptr(n.b);
            for (int i = 0; i < n.rows; ++i) {
                const double *grow = G + size_t(i) * n.cols;
                double *gmrow = gM + size_t(i) * n.cols;
                double s = 0;
                for (int j = 0; j < n.cols; ++j) {
                    gmrow[j] += grow[j];
                    s += grow[j];
                }
                gV[i] += s;
            }
            return;
        }
        case Op::MulRowVec: {
            const double *M = ptr(n.a), *R = ptr(n.b);
            double *gM = gptr(n.a), *gR = gptr(n.b);
            for (int i = 0; i < n.rows; ++i) {
                const double *grow = G + size_t(i) * n.cols;
                const double *mrow = M + size_t(i) * n.cols;
                double *gmrow = gM + size_t(i) * n.cols;
                for (int j = 0; j < n.cols; ++j) {
                    gmrow[j] += grow[j] * R[j];
                    gR[j] += grow[j] * mrow[j];
                }
            }
            return;
        }
        case Op::Relu: {
            const double *X = ptr(n.a);
            double *gX = gptr(n.a);
            const size_t sz = size_t(n.rows) * n.cols;
            for (size_t i = 0; i < sz; ++i)
                if (X[i] > 0) gX[i] += G[i];
            return;
        }
        case Op::LRelu: {
            const double slope = fconst_[n.aux][0];
            const double *X = ptr(n.a);
            double *gX = gptr(n.a);
            const size_t sz = size_t(n.rows) * n.cols;
            for (size_t i = 0; i < sz; ++i)
                gX[i] += G[i] * (X[i] > 0 ? 1.0 : slope);
            return;
        }
        case Op::Gate: {
            const double hi = fconst_[n.aux][0], lo = fconst_[n.aux][1];
            const double *R = ptr(n.b);
            double *gX = gptr(n.a);
            const size_t sz = size_t(n.rows) * n.cols;
            for (size_t i = 0; i < sz; ++i)
                gX[i] += G[i] * (R[i] > 0 ? hi : lo);
            return;
        }
        case Op::CMax: {
            const double c = fconst_[n.aux][0];
            const double *X = ptr(n.a);
            double *gX = gptr(n.a);
            const size_t sz = size_t(n.rows) * n.cols;
            for (size_t i = 0; i < sz; ++i)
                if (X[i] > c) gX[i] += G[i];
            return;
        }
        case Op::Sin: {
            const double *X = ptr(n.a);
            double *gX = gptr(n.a);
            const size_t sz = size_t(n.rows) * n.cols;
            for (size_t i = 0; i < sz; ++i) gX[i] += G[i] * std::cos(X[i]);
            return;
        }
        case Op::Cos: {
            const double *X = ptr(n.a);
            double *gX = gptr(n.a);
            const size_t sz = size_t(n.rows) * n.cols;
            for (size_t i = 0; i < sz; ++i) gX[i] -= G[i] * std::sin(X[i]);
            return;
        }
        case Op::Sqrt: {
            const double *Y = ptr(id);
            double *gX = gptr(n.a);
            const size_t sz = size_t(n.rows) * n.cols;
            for (size_t i = 0; i < sz; ++i)
                if (Y[i] > 0) gX[i] += G[i] * 0.5 / Y[i];
            return;
        }
        case Op::SliceRows: {
            const int row0 = islice_[n.aux][0];
            double *gM = gptr(n.a) + size_t(row0) * n.cols;
            const size_t sz = size_t(n.rows) * n.cols;
            for (size_t i = 0; i < sz; ++i) gM[i] += G[i];
            return;
        }
        case Op::ConcatRows: {
            double *gA = gptr(n.a), *gB = gptr(n.b);
            const size_t sa = size_t(nodes_[n.a].rows) * n.cols;
            const size_t sb = size_t(nodes_[n.b].rows) * n.cols;
            for (size_t i = 0; i < sa; ++i) gA[i] += G[i];
            for (size_t i = 0; i < sb; ++i) gB[i] += G[sa + i];
            return;
        }
        case Op::GatherCols: {
            const auto &idx = index_sets_[n.aux];
            double *gM = gptr(n.a);
            const int mc = nodes_[n.a].cols;
            for (int i = 0; i < n.rows; ++i)
                for (size_t j = 0; j < idx.size(); ++j)
                    gM[size_t(i) * mc + idx[j]] += G[size_t(i) * idx.size() + j];
            return;
        }
        case Op::ColSumSq: {
            const double *M = ptr(n.a);
            double *gM = gptr(n.a);
            const int rows = nodes_[n.a].rows;
            for (int i = 0; i < rows; ++i) {
                const double *mrow = M + size_t(i) * n.cols;
                double *gmrow = gM + size_t(i) * n.cols;
                for (int j = 0; j < n.cols; ++j)
                    gmrow[j] += 2.0 * mrow[j] * G[j];
            }
            return;
        }
        case Op::RowMean: {
            double *gM = gptr(n.a);
            const int cols = nodes_[n.a].cols;
            const double inv = 1.0 / cols;
            for (int i = 0; i < n.rows; ++i) {
                const double gi = G[i] * inv;
                double *gmrow = gM + size_t(i) * cols;
                for (int j = 0; j < cols; ++j) gmrow[j] += gi;
            }
            return;
        }
        case Op::Sum: {
            double *gM = gptr(n.a);
            const size_t sz = size_t(nodes_[n.a].rows) * nodes_[n.a].cols;
            for (size_t i = 0; i < sz; ++i) gM[i] += G[0];
            return;
        }
        case Op::SumSq: {
            const double *M = ptr(n.a);
            double *gM = gptr(n.a);
            const size_t sz = size_t(nodes_[n.a].rows) * nodes_[n.a].cols;
            for (size_t i = 0; i < sz; ++i) gM[i] += 2.0 * M[i] * G[0];
            return;
        }
        case Op::Conv2d: {
            const ConvSpec &c = convs_[n.aux];
            const int oh = c.out_h(), ow = c.out_w();
            const int H = c.height, W = c.width, ks = c.ksize;
            const int kcols = c.in_ch * ks * ks;
            const double *X = ptr(n.a), *K = ptr(n.b);
            double *gX = gptr(n.a), *gK = gptr(n.b);
            for (int co = 0; co < c.out_ch; ++co) {
                const double *grow = G + size_t(co) * oh * ow;
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        const double g = grow[size_t(oy) * ow + ox];
                        if (g == 0.0) continue;
                        for (int ci = 0; ci < c.in_ch; ++ci) {
                            const double *plane = X + size_t(ci) * H * W;
                            double *gplane = gX + size_t(ci) * H * W;
                            const size_t kb =
                                size_t(co) * kcols + size_t(ci) * ks * ks;
                            for (int ky = 0; ky < ks; ++ky) {
                                const int y = oy * c.stride - c.pad + ky;
                                if (y < 0 || y >= H) continue;
                                for (int kx = 0; kx < ks; ++kx) {
                                    const int xx = ox * c.stride - c.pad + kx;
                                    if (xx < 0 || xx >= W) continue;
                                    gplane[size_t(y) * W + xx] +=
                                        g * K[kb + ky * ks + kx];
                                    gK[kb + ky * ks + kx] +=
                                        g * plane[size_t(y) * W + xx];
                                }
                            }
                        }
                    }
            }
            return;
        }
    }
}

}  // namespace splatflow::ad
