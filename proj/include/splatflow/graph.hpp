#pragma once

// Reverse-mode automatic differentiation over small dense matrices.
//
// A Graph is a define-by-run tape: every operation computes its value
// immediately and records enough to run the chain rule backwards. Matrices
// are row-major f64 blocks living in one arena, so a training iteration
// allocates nothing after warm-up (call reset() and rebuild).
//
// Input derivatives (the velocity Jacobians the physics losses need) are not
// handled here; they are carried by dual numbers whose components are graph
// tensors (see dual.hpp), which keeps those Jacobian entries themselves
// differentiable with respect to parameters.
//
// Every op validates its output for non-finite values and fails fast naming
// the operation. Single-threaded by design: identical graphs replay to
// bit-identical values and gradients.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "splatflow/core.hpp"
#include "splatflow/params.hpp"

namespace splatflow::ad {

class Graph;

struct Tensor {
    Graph *graph = nullptr;
    int id = -1;

    bool valid() const { return graph != nullptr && id >= 0; }
    int rows() const;
    int cols() const;
    size_t size() const { return size_t(rows()) * cols(); }
    std::span<const double> value() const;
    std::span<const double> grad() const;
    // Scalar convenience: the value of a 1x1 tensor.
    double item() const;
};

// Geometry of a conv2d node. Tensors hold image planes as [channels x H*W].
struct ConvSpec {
    int in_ch = 0, height = 0, width = 0;
    int out_ch = 0, ksize = 3, stride = 1, pad = 1;
    int out_h() const { return (height + 2 * pad - ksize) / stride + 1; }
    int out_w() const { return (width + 2 * pad - ksize) / stride + 1; }
};

class Graph {
  public:
    enum class Op : uint8_t {
        Const, Param, MatMul, Add, Sub, EMul, EDiv, Affine, AddColVec,
        MulRowVec, Relu, LRelu, Gate, CMax, Sin, Cos, Sqrt, SliceRows,
        ConcatRows, GatherCols, ColSumSq, RowMean, Sum, SumSq, Conv2d,
    };

    // Leaves ------------------------------------------------------------
    Tensor constant(int rows, int cols, std::span<const double> data);
    Tensor constant(int rows, int cols, double fill);
    Tensor scalar(double v) { return constant(1, 1, v); }
    // Copies the parameter's current value in; backward() accumulates into
    // the entry's grad buffer. Repeated calls for the same entry share one
    // node so a parameter appears once per graph.
    Tensor param(ParameterSet &ps, const std::string &name);

    // Elementwise and linear algebra -------------------------------------
    Tensor matmul(Tensor a, Tensor b);
    Tensor add(Tensor a, Tensor b);
    Tensor sub(Tensor a, Tensor b);
    Tensor emul(Tensor a, Tensor b);
    Tensor ediv(Tensor a, Tensor b);
    // a*x + b with scalar constants.
    Tensor affine(Tensor x, double a, double b);
    Tensor neg(Tensor x) { return affine(x, -1.0, 0.0); }
    // M + column vector broadcast across columns (bias add).
    Tensor add_colvec(Tensor m, Tensor v);
    // M * row vector broadcast down rows (per-column scaling).
    Tensor mul_rowvec(Tensor m, Tensor r);
    Tensor relu(Tensor x);
    Tensor lrelu(Tensor x, double slope);
    // x * (ref > 0 ? hi : lo) elementwise; gradient flows only into x.
    // This is the derivative gate for piecewise-linear activations.
    Tensor gate(Tensor x, Tensor ref, double hi, double lo);
    // max(x, c) elementwise; gradient passes only where x > c.
    Tensor cmax(Tensor x, double c);
    Tensor sin(Tensor x);
    Tensor cos(Tensor x);
    // Elementwise sqrt; the subgradient at zero is taken as zero, so norms
    // of exactly-zero vectors backpropagate zeros instead of infinities.
    Tensor sqrt(Tensor x);

    // Shape plumbing ------------------------------------------------------
    Tensor slice_rows(Tensor m, int row0, int nrows);
    Tensor concat_rows(Tensor a, Tensor b);
    // out[:,t] = m[:, idx[t]]; backward scatter-adds.
    Tensor gather_cols(Tensor m, std::span<const int> idx);

    // Reductions ----------------------------------------------------------
    Tensor colsumsq(Tensor m);  // [1 x c], sum of squares per column
    Tensor rowmean(Tensor m);   // [r x 1]
    Tensor sum(Tensor m);       // [1 x 1]
    Tensor sumsq(Tensor m);     // [1 x 1]
    Tensor mean(Tensor m) { return affine(sum(m), 1.0 / double(m.size()), 0.0); }

    Tensor conv2d(Tensor x, Tensor kernel, const ConvSpec &spec);

    // Runs the chain rule from a scalar loss back to every reachable node
    // and scatter-adds parameter gradients into their ParameterSet entries.
    void backward(Tensor loss);

    // Drops all nodes but keeps arena capacity for the next iteration.
    void reset();

    int node_count() const { return int(nodes_.size()); }
    size_t arena_size() const { return vals_.size(); }

  private:
    friend struct Tensor;

    struct Node {
        Op op;
        int a = -1, b = -1;       // parent ids
        int rows = 0, cols = 0;
        size_t off = 0;           // offset into vals_/grads_
        int aux = -1;             // index into op-specific payload tables
        const ParameterSet::Entry *param = nullptr;
    };

    Tensor make(Op op, int rows, int cols, int a = -1, int b = -1, int aux = -1);
    void check(Tensor t, const char *op_name);
    Tensor require(Tensor t, const char *what) const;
    double *ptr(int id) { return vals_.data() + nodes_[id].off; }
    const double *ptr(int id) const { return vals_.data() + nodes_[id].off; }
    double *gptr(int id) { return grads_.data() + nodes_[id].off; }

    void backward_node(int id);

    std::vector<Node> nodes_;
    std::vector<double> vals_;
    std::vector<double> grads_;
    std::vector<std::array<double, 2>> fconst_;       // affine/gate/cmax payloads
    std::vector<std::vector<int>> index_sets_;        // gather payloads
    std::vector<std::array<int, 2>> islice_;          // slice payloads
    std::vector<ConvSpec> convs_;
    std::vector<std::pair<const ParameterSet::Entry *, int>> param_nodes_;
    bool has_grads_ = false;
};

const char *op_name(Graph::Op op);

}  // namespace splatflow::ad
