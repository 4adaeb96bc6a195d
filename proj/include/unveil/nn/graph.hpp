#pragma once

#include <functional>
#include <vector>

#include "unveil/nn/tensor.hpp"

namespace unveil::nn {

// Dynamic reverse-mode autodiff tape. A Graph is built per forward pass;
// backward() walks the tape in reverse creation order. Nodes created from
// constants do not allocate gradients and are skipped during backward.
//
// The op set is deliberately small; every op has a hand-derived backward
// that is covered by finite-difference tests.
class Graph {
public:
    using Var = int32_t;

    Var input(Tensor t);                  // constant, no gradient
    Var param(Parameter& p);              // leaf; backward accumulates into p.grad

    // elementwise
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double s);
    Var add_scalar(Var a, double s);
    Var relu(Var a);
    Var gelu(Var a);
    Var sigmoid(Var a);
    Var exp_(Var a);
    Var log_(Var a);
    Var abs_(Var a);
    Var clamp01(Var a);

    // matrix ops ([m,k] x [k,n], row-major)
    Var matmul(Var a, Var b);
    Var matmul_nt(Var a, Var b);          // a[m,k] * b[n,k]^T -> [m,n]
    Var transpose(Var a);
    Var linear(Var x, Var w, Var b);      // x[n,d] * w[dout,d]^T + b[dout]
    Var softmax_rows(Var a);
    Var l2norm_rows(Var a, double eps = 1e-12);
    Var layernorm_rows(Var x, Var gamma, Var beta, double eps = 1e-6);
    Var row_sums(Var a);                  // [m,n] -> [m,1]
    Var slice_rows(Var a, int r0, int r1);
    Var slice_cols(Var a, int c0, int c1);
    Var concat_rows(const std::vector<Var>& parts);
    Var concat_cols(const std::vector<Var>& parts);

    // conv / spatial ops on [C,H,W]
    Var conv2d(Var x, Var w, Var b, int stride, int pad);  // zero padding
    Var upsample2x(Var x);
    Var pad_reflect(Var x, int top, int bottom, int left, int right);
    Var crop(Var x, int top, int left, int h, int w);
    Var concat_ch(Var a, Var b);
    Var mul_bcast_ch(Var x, Var m);       // x[C,H,W] * m[1,H,W]
    Var norm2d(Var x, Var gamma, Var beta, double eps = 1e-5);  // per-channel over HxW
    Var chw_to_rows(Var x);               // [C,H,W] -> [H*W, C]
    Var rows_to_chw(Var x, int c, int h, int w);
    Var patchify(Var x, int p);           // [C,H,W] -> [(H/p)*(W/p), C*p*p]
    Var unpatchify(Var x, int c, int h, int w, int p);

    // reductions / misc
    Var mean_all(Var a);                  // -> [1]
    Var sum_all(Var a);                   // -> [1]
    Var mean_hw(Var x);                   // [C,H,W] -> [C]
    Var mul_scalar_var(Var x, Var s);     // s is a [1] tensor
    Var reshape(Var a, std::vector<int> shape);
    Var bce_with_logits(Var z, Tensor target);  // -> [1], mean over elements

    void backward(Var root);

    const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v)].val; }
    const Tensor& grad_of(Var v) const { return nodes_[static_cast<size_t>(v)].grad; }
    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor val;
        Tensor grad;                       // allocated lazily
        bool requires_grad = false;
        Parameter* leaf = nullptr;
        std::function<void()> back;        // may be empty
    };

    std::vector<Node> nodes_;

    Var emit(Tensor val, bool requires_grad);
    Tensor& grad(Var v);
    void add_grad(Var v, const Tensor& g);
    bool wants(Var v) const { return nodes_[static_cast<size_t>(v)].requires_grad; }
};

// Convenience: run f on a fresh graph and return the value of the result.
Tensor eval_graph(const std::function<Graph::Var(Graph&)>& f);

}  // namespace unveil::nn
