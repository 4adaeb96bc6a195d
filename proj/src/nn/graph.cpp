#include "unveil/nn/graph.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <memory>

namespace unveil::nn {

namespace {

using RM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RM>;
using MapCRM = Eigen::Map<const RM>;

void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

double sigmoid_stable(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

int reflect_index(int i, int n) {
    // mirror across the edge pixel (no edge repeat), valid for |overhang| < n
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return i;
}

}  // namespace

Graph::Var Graph::emit(Tensor val, bool requires_grad) {
    Node n;
    n.val = std::move(val);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
}

Tensor& Graph::grad(Var v) {
    Node& n = nodes_[static_cast<size_t>(v)];
    if (n.grad.numel() == 0) n.grad = Tensor::zeros(n.val.shape);
    return n.grad;
}

void Graph::add_grad(Var v, const Tensor& g) {
    if (!wants(v)) return;
    Tensor& dst = grad(v);
    for (int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
}

Graph::Var Graph::input(Tensor t) { return emit(std::move(t), false); }

Graph::Var Graph::param(Parameter& p) {
    Var v = emit(p.value, true);
    Parameter* leaf = &p;
    nodes_.back().leaf = leaf;
    nodes_.back().back = [this, v, leaf]() {
        const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
        for (int64_t i = 0; i < g.numel(); ++i) leaf->grad[i] += g[i];
    };
    return v;
}

Graph::Var Graph::add(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.same_shape(tb), "add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out = ta;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += tb[i];
    bool rg = wants(a) || wants(b);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a, b]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            add_grad(a, g);
            add_grad(b, g);
        };
    return v;
}

Graph::Var Graph::sub(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.same_shape(tb), "sub: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    Tensor out = ta;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= tb[i];
    bool rg = wants(a) || wants(b);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a, b]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            add_grad(a, g);
            if (wants(b)) {
                Tensor& db = grad(b);
                for (int64_t i = 0; i < g.numel(); ++i) db[i] -= g[i];
            }
        };
    return v;
}

Graph::Var Graph::mul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.same_shape(tb), "mul: shape mismatch");
    Tensor out = ta;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= tb[i];
    bool rg = wants(a) || wants(b);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a, b]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            const Tensor& ta2 = val(a);
            const Tensor& tb2 = val(b);
            if (wants(a)) {
                Tensor& da = grad(a);
                for (int64_t i = 0; i < g.numel(); ++i) da[i] += g[i] * tb2[i];
            }
            if (wants(b)) {
                Tensor& db = grad(b);
                for (int64_t i = 0; i < g.numel(); ++i) db[i] += g[i] * ta2[i];
            }
        };
    return v;
}

Graph::Var Graph::scale(Var a, double s) {
    Tensor out = val(a);
    for (double& x : out.data) x *= s;
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a, s]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            Tensor& da = grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) da[i] += g[i] * s;
        };
    return v;
}

Graph::Var Graph::add_scalar(Var a, double s) {
    Tensor out = val(a);
    for (double& x : out.data) x += s;
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a]() { add_grad(a, nodes_[static_cast<size_t>(v)].grad); };
    return v;
}

Graph::Var Graph::relu(Var a) {
    Tensor out = val(a);
    for (double& x : out.data) x = x > 0.0 ? x : 0.0;
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            const Tensor& x = val(a);
            Tensor& da = grad(a);
            for (int64_t i = 0; i < g.numel(); ++i)
                if (x[i] > 0.0) da[i] += g[i];
        };
    return v;
}

Graph::Var Graph::gelu(Var a) {
    static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
    Tensor out = val(a);
    for (double& x : out.data) x = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            const Tensor& x = val(a);
            Tensor& da = grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) {
                double cdf = 0.5 * (1.0 + std::erf(x[i] * inv_sqrt2));
                double pdf = std::exp(-0.5 * x[i] * x[i]) * inv_sqrt2pi;
                da[i] += g[i] * (cdf + x[i] * pdf);
            }
        };
    return v;
}

Graph::Var Graph::sigmoid(Var a) {
    Tensor out = val(a);
    for (double& x : out.data) x = sigmoid_stable(x);
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            const Tensor& y = val(v);
            Tensor& da = grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) da[i] += g[i] * y[i] * (1.0 - y[i]);
        };
    return v;
}

Graph::Var Graph::exp_(Var a) {
    Tensor out = val(a);
    for (double& x : out.data) x = std::exp(x);
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            const Tensor& y = val(v);
            Tensor& da = grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) da[i] += g[i] * y[i];
        };
    return v;
}

Graph::Var Graph::log_(Var a) {
    Tensor out = val(a);
    for (double& x : out.data) x = std::log(x);
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            const Tensor& x = val(a);
            Tensor& da = grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) da[i] += g[i] / x[i];
        };
    return v;
}

Graph::Var Graph::abs_(Var a) {
    Tensor out = val(a);
    for (double& x : out.data) x = std::fabs(x);
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            const Tensor& x = val(a);
            Tensor& da = grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) {
                if (x[i] > 0.0)
                    da[i] += g[i];
                else if (x[i] < 0.0)
                    da[i] -= g[i];
            }
        };
    return v;
}

Graph::Var Graph::clamp01(Var a) {
    Tensor out = val(a);
    for (double& x : out.data) x = x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x);
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            const Tensor& x = val(a);
            Tensor& da = grad(a);
            // inclusive boundaries keep the gradient alive at exactly 0 and 1
            for (int64_t i = 0; i < g.numel(); ++i)
                if (x[i] >= 0.0 && x[i] <= 1.0) da[i] += g[i];
        };
    return v;
}

Graph::Var Graph::matmul(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.ndim() == 2 && tb.ndim() == 2, "matmul: need 2-D operands");
    require(ta.dim(1) == tb.dim(0), "matmul: inner dims " + ta.shape_str() + " x " + tb.shape_str());
    int m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
    Tensor out = Tensor::zeros({m, n});
    MapCRM A(ta.data.data(), m, k), B(tb.data.data(), k, n);
    MapRM C(out.data.data(), m, n);
    C.noalias() = A * B;
    bool rg = wants(a) || wants(b);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a, b, m, k, n]() {
            MapCRM G(nodes_[static_cast<size_t>(v)].grad.data.data(), m, n);
            MapCRM A2(val(a).data.data(), m, k), B2(val(b).data.data(), k, n);
            if (wants(a)) {
                MapRM dA(grad(a).data.data(), m, k);
                dA.noalias() += G * B2.transpose();
            }
            if (wants(b)) {
                MapRM dB(grad(b).data.data(), k, n);
                dB.noalias() += A2.transpose() * G;
            }
        };
    return v;
}

Graph::Var Graph::matmul_nt(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.ndim() == 2 && tb.ndim() == 2, "matmul_nt: need 2-D operands");
    require(ta.dim(1) == tb.dim(1), "matmul_nt: inner dims " + ta.shape_str() + " x " + tb.shape_str());
    int m = ta.dim(0), k = ta.dim(1), n = tb.dim(0);
    Tensor out = Tensor::zeros({m, n});
    MapCRM A(ta.data.data(), m, k), B(tb.data.data(), n, k);
    MapRM C(out.data.data(), m, n);
    C.noalias() = A * B.transpose();
    bool rg = wants(a) || wants(b);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a, b, m, k, n]() {
            MapCRM G(nodes_[static_cast<size_t>(v)].grad.data.data(), m, n);
            MapCRM A2(val(a).data.data(), m, k), B2(val(b).data.data(), n, k);
            if (wants(a)) {
                MapRM dA(grad(a).data.data(), m, k);
                dA.noalias() += G * B2;
            }
            if (wants(b)) {
                MapRM dB(grad(b).data.data(), n, k);
                dB.noalias() += G.transpose() * A2;
            }
        };
    return v;
}

Graph::Var Graph::transpose(Var a) {
    const Tensor& ta = val(a);
    require(ta.ndim() == 2, "transpose: need 2-D");
    int m = ta.dim(0), n = ta.dim(1);
    Tensor out = Tensor::zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at2(j, i) = ta.at2(i, j);
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a, m, n]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            Tensor& da = grad(a);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) da.data[static_cast<size_t>(i) * n + j] += g.at2(j, i);
        };
    return v;
}

Graph::Var Graph::linear(Var x, Var w, Var b) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    const Tensor& tb = val(b);
    require(tx.ndim() == 2 && tw.ndim() == 2, "linear: need 2-D x and w");
    require(tx.dim(1) == tw.dim(1), "linear: x " + tx.shape_str() + " vs w " + tw.shape_str());
    require(tb.numel() == tw.dim(0), "linear: bias size");
    int n = tx.dim(0), d = tx.dim(1), dout = tw.dim(0);
    Tensor out = Tensor::zeros({n, dout});
    MapCRM X(tx.data.data(), n, d), W(tw.data.data(), dout, d);
    MapRM Y(out.data.data(), n, dout);
    Y.noalias() = X * W.transpose();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < dout; ++j) out.at2(i, j) += tb[j];
    bool rg = wants(x) || wants(w) || wants(b);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, x, w, b, n, d, dout]() {
            MapCRM G(nodes_[static_cast<size_t>(v)].grad.data.data(), n, dout);
            MapCRM X2(val(x).data.data(), n, d), W2(val(w).data.data(), dout, d);
            if (wants(x)) {
                MapRM dX(grad(x).data.data(), n, d);
                dX.noalias() += G * W2;
            }
            if (wants(w)) {
                MapRM dW(grad(w).data.data(), dout, d);
                dW.noalias() += G.transpose() * X2;
            }
            if (wants(b)) {
                Tensor& db = grad(b);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < dout; ++j) db[j] += G(i, j);
            }
        };
    return v;
}

Graph::Var Graph::softmax_rows(Var a) {
    const Tensor& ta = val(a);
    require(ta.ndim() == 2, "softmax_rows: need 2-D");
    int m = ta.dim(0), n = ta.dim(1);
    Tensor out = Tensor::zeros({m, n});
    for (int i = 0; i < m; ++i) {
        double mx = -1e300;
        for (int j = 0; j < n; ++j) mx = std::max(mx, ta.at2(i, j));
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            double e = std::exp(ta.at2(i, j) - mx);
            out.at2(i, j) = e;
            s += e;
        }
        for (int j = 0; j < n; ++j) out.at2(i, j) /= s;
    }
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a, m, n]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            const Tensor& y = val(v);
            Tensor& da = grad(a);
            for (int i = 0; i < m; ++i) {
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += g.at2(i, j) * y.at2(i, j);
                for (int j = 0; j < n; ++j)
                    da.data[static_cast<size_t>(i) * n + j] += y.at2(i, j) * (g.at2(i, j) - dot);
            }
        };
    return v;
}

Graph::Var Graph::l2norm_rows(Var a, double eps) {
    const Tensor& ta = val(a);
    require(ta.ndim() == 2, "l2norm_rows: need 2-D");
    int m = ta.dim(0), n = ta.dim(1);
    Tensor out = Tensor::zeros({m, n});
    std::vector<double> rnorm(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += ta.at2(i, j) * ta.at2(i, j);
        double r = std::sqrt(s + eps);
        rnorm[static_cast<size_t>(i)] = r;
        for (int j = 0; j < n; ++j) out.at2(i, j) = ta.at2(i, j) / r;
    }
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg) {
        auto rn = std::make_shared<std::vector<double>>(std::move(rnorm));
        nodes_.back().back = [this, v, a, m, n, rn]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            const Tensor& y = val(v);
            Tensor& da = grad(a);
            for (int i = 0; i < m; ++i) {
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += g.at2(i, j) * y.at2(i, j);
                double r = (*rn)[static_cast<size_t>(i)];
                for (int j = 0; j < n; ++j)
                    da.data[static_cast<size_t>(i) * n + j] += (g.at2(i, j) - y.at2(i, j) * dot) / r;
            }
        };
    }
    return v;
}

Graph::Var Graph::layernorm_rows(Var x, Var gamma, Var beta, double eps) {
    const Tensor& tx = val(x);
    const Tensor& tg = val(gamma);
    const Tensor& tb = val(beta);
    require(tx.ndim() == 2, "layernorm_rows: need 2-D x");
    int n = tx.dim(0), d = tx.dim(1);
    require(tg.numel() == d && tb.numel() == d, "layernorm_rows: affine size");
    Tensor out = Tensor::zeros({n, d});
    Tensor xhat = Tensor::zeros({n, d});
    std::vector<double> inv_sigma(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += tx.at2(i, j);
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double c = tx.at2(i, j) - mu;
            var += c * c;
        }
        var /= d;
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[static_cast<size_t>(i)] = is;
        for (int j = 0; j < d; ++j) {
            double xh = (tx.at2(i, j) - mu) * is;
            xhat.at2(i, j) = xh;
            out.at2(i, j) = tg[j] * xh + tb[j];
        }
    }
    bool rg = wants(x) || wants(gamma) || wants(beta);
    Var v = emit(std::move(out), rg);
    if (rg) {
        auto xh = std::make_shared<Tensor>(std::move(xhat));
        auto is = std::make_shared<std::vector<double>>(std::move(inv_sigma));
        nodes_.back().back = [this, v, x, gamma, beta, n, d, xh, is]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            const Tensor& tg2 = val(gamma);
            if (wants(gamma)) {
                Tensor& dg = grad(gamma);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j) dg[j] += g.at2(i, j) * xh->at2(i, j);
            }
            if (wants(beta)) {
                Tensor& db = grad(beta);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j) db[j] += g.at2(i, j);
            }
            if (wants(x)) {
                Tensor& dx = grad(x);
                for (int i = 0; i < n; ++i) {
                    double mean_gh = 0.0, mean_ghx = 0.0;
                    for (int j = 0; j < d; ++j) {
                        double gh = g.at2(i, j) * tg2[j];
                        mean_gh += gh;
                        mean_ghx += gh * xh->at2(i, j);
                    }
                    mean_gh /= d;
                    mean_ghx /= d;
                    double isg = (*is)[static_cast<size_t>(i)];
                    for (int j = 0; j < d; ++j) {
                        double gh = g.at2(i, j) * tg2[j];
                        dx.data[static_cast<size_t>(i) * d + j] +=
                            isg * (gh - mean_gh - xh->at2(i, j) * mean_ghx);
                    }
                }
            }
        };
    }
    return v;
}

Graph::Var Graph::row_sums(Var a) {
    const Tensor& ta = val(a);
    require(ta.ndim() == 2, "row_sums: need 2-D");
    int m = ta.dim(0), n = ta.dim(1);
    Tensor out = Tensor::zeros({m, 1});
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += ta.at2(i, j);
        out[i] = s;
    }
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a, m, n]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            Tensor& da = grad(a);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) da.data[static_cast<size_t>(i) * n + j] += g[i];
        };
    return v;
}

Graph::Var Graph::slice_rows(Var a, int r0, int r1) {
    const Tensor& ta = val(a);
    require(ta.ndim() == 2, "slice_rows: need 2-D");
    require(0 <= r0 && r0 < r1 && r1 <= ta.dim(0), "slice_rows: bad range");
    int n = ta.dim(1), rows = r1 - r0;
    Tensor out = Tensor::zeros({rows, n});
    std::copy(ta.data.begin() + static_cast<size_t>(r0) * n,
              ta.data.begin() + static_cast<size_t>(r1) * n, out.data.begin());
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a, r0, rows, n]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            Tensor& da = grad(a);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < n; ++j)
                    da.data[static_cast<size_t>(i + r0) * n + j] += g.at2(i, j);
        };
    return v;
}

Graph::Var Graph::slice_cols(Var a, int c0, int c1) {
    const Tensor& ta = val(a);
    require(ta.ndim() == 2, "slice_cols: need 2-D");
    require(0 <= c0 && c0 < c1 && c1 <= ta.dim(1), "slice_cols: bad range");
    int m = ta.dim(0), n = ta.dim(1), cols = c1 - c0;
    Tensor out = Tensor::zeros({m, cols});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < cols; ++j) out.at2(i, j) = ta.at2(i, c0 + j);
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a, c0, m, n, cols]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            Tensor& da = grad(a);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < cols; ++j)
                    da.data[static_cast<size_t>(i) * n + c0 + j] += g.at2(i, j);
        };
    return v;
}

Graph::Var Graph::concat_rows(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_rows: empty");
    int n = val(parts[0]).dim(1);
    int total = 0;
    bool rg = false;
    for (Var p : parts) {
        const Tensor& t = val(p);
        require(t.ndim() == 2 && t.dim(1) == n, "concat_rows: width mismatch");
        total += t.dim(0);
        rg = rg || wants(p);
    }
    Tensor out = Tensor::zeros({total, n});
    int row = 0;
    std::vector<int> offsets;
    for (Var p : parts) {
        const Tensor& t = val(p);
        offsets.push_back(row);
        std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<size_t>(row) * n);
        row += t.dim(0);
    }
    Var v = emit(std::move(out), rg);
    if (rg) {
        auto ps = std::make_shared<std::vector<Var>>(parts);
        auto off = std::make_shared<std::vector<int>>(std::move(offsets));
        nodes_.back().back = [this, v, ps, off, n]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            for (size_t k = 0; k < ps->size(); ++k) {
                Var p = (*ps)[k];
                if (!wants(p)) continue;
                Tensor& dp = grad(p);
                int rows = val(p).dim(0), r0 = (*off)[k];
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < n; ++j) dp.at2(i, j) += g.at2(r0 + i, j);
            }
        };
    }
    return v;
}

Graph::Var Graph::concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols: empty");
    int m = val(parts[0]).dim(0);
    int total = 0;
    bool rg = false;
    for (Var p : parts) {
        const Tensor& t = val(p);
        require(t.ndim() == 2 && t.dim(0) == m, "concat_cols: height mismatch");
        total += t.dim(1);
        rg = rg || wants(p);
    }
    Tensor out = Tensor::zeros({m, total});
    int col = 0;
    std::vector<int> offsets;
    for (Var p : parts) {
        const Tensor& t = val(p);
        offsets.push_back(col);
        int n = t.dim(1);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.at2(i, col + j) = t.at2(i, j);
        col += n;
    }
    Var v = emit(std::move(out), rg);
    if (rg) {
        auto ps = std::make_shared<std::vector<Var>>(parts);
        auto off = std::make_shared<std::vector<int>>(std::move(offsets));
        nodes_.back().back = [this, v, ps, off, m]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            for (size_t k = 0; k < ps->size(); ++k) {
                Var p = (*ps)[k];
                if (!wants(p)) continue;
                Tensor& dp = grad(p);
                int n = val(p).dim(1), c0 = (*off)[k];
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) dp.at2(i, j) += g.at2(i, c0 + j);
            }
        };
    }
    return v;
}

Graph::Var Graph::conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    const Tensor& tb = val(b);
    require(tx.ndim() == 3 && tw.ndim() == 4, "conv2d: need [C,H,W] x and [K,C,kh,kw] w");
    int c = tx.dim(0), h = tx.dim(1), wd = tx.dim(2);
    int k = tw.dim(0), kc = tw.dim(1), kh = tw.dim(2), kw = tw.dim(3);
    require(kc == c, "conv2d: channel mismatch");
    require(tb.numel() == k, "conv2d: bias size");
    require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    int ho = (h + 2 * pad - kh) / stride + 1;
    int wo = (wd + 2 * pad - kw) / stride + 1;
    require(ho >= 1 && wo >= 1, "conv2d: output would be empty");

    int ck = c * kh * kw;
    auto cols = std::make_shared<Tensor>(Tensor::zeros({ck, ho * wo}));
    for (int ch = 0; ch < c; ++ch)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                int row = (ch * kh + ky) * kw + kx;
                double* dst = cols->data.data() + static_cast<size_t>(row) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    const double* src = tx.data.data() + (static_cast<size_t>(ch) * h + iy) * wd;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < wd) dst[oy * wo + ox] = src[ix];
                    }
                }
            }

    Tensor out = Tensor::zeros({k, ho, wo});
    {
        MapCRM W(tw.data.data(), k, ck);
        MapCRM Cm(cols->data.data(), ck, ho * wo);
        MapRM Y(out.data.data(), k, ho * wo);
        Y.noalias() = W * Cm;
        for (int kk = 0; kk < k; ++kk) {
            double bias = tb[kk];
            double* row = out.data.data() + static_cast<size_t>(kk) * ho * wo;
            for (int i = 0; i < ho * wo; ++i) row[i] += bias;
        }
    }
    bool rg = wants(x) || wants(w) || wants(b);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, x, w, b, cols, c, h, wd, k, kh, kw, stride, pad, ho, wo, ck]() {
            MapCRM G(nodes_[static_cast<size_t>(v)].grad.data.data(), k, ho * wo);
            if (wants(w)) {
                MapRM dW(grad(w).data.data(), k, ck);
                MapCRM Cm(cols->data.data(), ck, ho * wo);
                dW.noalias() += G * Cm.transpose();
            }
            if (wants(b)) {
                Tensor& db = grad(b);
                for (int kk = 0; kk < k; ++kk) {
                    double s = 0.0;
                    for (int i = 0; i < ho * wo; ++i) s += G(kk, i);
                    db[kk] += s;
                }
            }
            if (wants(x)) {
                Tensor dcols = Tensor::zeros({ck, ho * wo});
                MapCRM W2(val(w).data.data(), k, ck);
                MapRM dC(dcols.data.data(), ck, ho * wo);
                dC.noalias() = W2.transpose() * G;
                Tensor& dx = grad(x);
                for (int ch = 0; ch < c; ++ch)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            int row = (ch * kh + ky) * kw + kx;
                            const double* src = dcols.data.data() + static_cast<size_t>(row) * ho * wo;
                            for (int oy = 0; oy < ho; ++oy) {
                                int iy = oy * stride + ky - pad;
                                if (iy < 0 || iy >= h) continue;
                                double* dst = dx.data.data() + (static_cast<size_t>(ch) * h + iy) * wd;
                                for (int ox = 0; ox < wo; ++ox) {
                                    int ix = ox * stride + kx - pad;
                                    if (ix >= 0 && ix < wd) dst[ix] += src[oy * wo + ox];
                                }
                            }
                        }
            }
        };
    return v;
}

Graph::Var Graph::upsample2x(Var x) {
    const Tensor& tx = val(x);
    require(tx.ndim() == 3, "upsample2x: need [C,H,W]");
    int c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
    Tensor out = Tensor::zeros({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx) out.at3(ch, y, xx) = tx.at3(ch, y / 2, xx / 2);
    bool rg = wants(x);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, x, c, h, w]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            Tensor& dx = grad(x);
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < 2 * h; ++y)
                    for (int xx = 0; xx < 2 * w; ++xx)
                        dx.at3(ch, y / 2, xx / 2) += g.at3(ch, y, xx);
        };
    return v;
}

Graph::Var Graph::pad_reflect(Var x, int top, int bottom, int left, int right) {
    const Tensor& tx = val(x);
    require(tx.ndim() == 3, "pad_reflect: need [C,H,W]");
    int c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
    require(top < h && bottom < h && left < w && right < w, "pad_reflect: pad exceeds size");
    require(top >= 0 && bottom >= 0 && left >= 0 && right >= 0, "pad_reflect: negative pad");
    int nh = h + top + bottom, nw = w + left + right;
    Tensor out = Tensor::zeros({c, nh, nw});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < nh; ++y) {
            int sy = reflect_index(y - top, h);
            for (int xx = 0; xx < nw; ++xx)
                out.at3(ch, y, xx) = tx.at3(ch, sy, reflect_index(xx - left, w));
        }
    bool rg = wants(x);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, x, c, h, w, top, left, nh, nw]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            Tensor& dx = grad(x);
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < nh; ++y) {
                    int sy = reflect_index(y - top, h);
                    for (int xx = 0; xx < nw; ++xx)
                        dx.at3(ch, sy, reflect_index(xx - left, w)) += g.at3(ch, y, xx);
                }
        };
    return v;
}

Graph::Var Graph::crop(Var x, int top, int left, int h, int w) {
    const Tensor& tx = val(x);
    require(tx.ndim() == 3, "crop: need [C,H,W]");
    int c = tx.dim(0), ih = tx.dim(1), iw = tx.dim(2);
    require(top >= 0 && left >= 0 && top + h <= ih && left + w <= iw, "crop: out of range");
    Tensor out = Tensor::zeros({c, h, w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) out.at3(ch, y, xx) = tx.at3(ch, top + y, left + xx);
    bool rg = wants(x);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, x, c, h, w, top, left]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            Tensor& dx = grad(x);
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) dx.at3(ch, top + y, left + xx) += g.at3(ch, y, xx);
        };
    return v;
}

Graph::Var Graph::concat_ch(Var a, Var b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    require(ta.ndim() == 3 && tb.ndim() == 3, "concat_ch: need [C,H,W]");
    require(ta.dim(1) == tb.dim(1) && ta.dim(2) == tb.dim(2), "concat_ch: spatial mismatch");
    int ca = ta.dim(0), cb = tb.dim(0), h = ta.dim(1), w = ta.dim(2);
    Tensor out = Tensor::zeros({ca + cb, h, w});
    std::copy(ta.data.begin(), ta.data.end(), out.data.begin());
    std::copy(tb.data.begin(), tb.data.end(), out.data.begin() + ta.data.size());
    bool rg = wants(a) || wants(b);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a, b]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            size_t na = val(a).data.size();
            if (wants(a)) {
                Tensor& da = grad(a);
                for (size_t i = 0; i < na; ++i) da.data[i] += g.data[i];
            }
            if (wants(b)) {
                Tensor& db = grad(b);
                for (size_t i = 0; i < db.data.size(); ++i) db.data[i] += g.data[na + i];
            }
        };
    return v;
}

Graph::Var Graph::mul_bcast_ch(Var x, Var m) {
    const Tensor& tx = val(x);
    const Tensor& tm = val(m);
    require(tx.ndim() == 3 && tm.ndim() == 3 && tm.dim(0) == 1, "mul_bcast_ch: need [C,H,W] and [1,H,W]");
    require(tx.dim(1) == tm.dim(1) && tx.dim(2) == tm.dim(2), "mul_bcast_ch: spatial mismatch");
    int c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
    Tensor out = tx;
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h * w; ++i)
            out.data[static_cast<size_t>(ch) * h * w + i] *= tm.data[static_cast<size_t>(i)];
    bool rg = wants(x) || wants(m);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, x, m, c, h, w]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            const Tensor& tx2 = val(x);
            const Tensor& tm2 = val(m);
            if (wants(x)) {
                Tensor& dx = grad(x);
                for (int ch = 0; ch < c; ++ch)
                    for (int i = 0; i < h * w; ++i)
                        dx.data[static_cast<size_t>(ch) * h * w + i] +=
                            g.data[static_cast<size_t>(ch) * h * w + i] * tm2.data[static_cast<size_t>(i)];
            }
            if (wants(m)) {
                Tensor& dm = grad(m);
                for (int ch = 0; ch < c; ++ch)
                    for (int i = 0; i < h * w; ++i)
                        dm.data[static_cast<size_t>(i)] +=
                            g.data[static_cast<size_t>(ch) * h * w + i] *
                            tx2.data[static_cast<size_t>(ch) * h * w + i];
            }
        };
    return v;
}

Graph::Var Graph::norm2d(Var x, Var gamma, Var beta, double eps) {
    const Tensor& tx = val(x);
    require(tx.ndim() == 3, "norm2d: need [C,H,W]");
    int c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
    require(val(gamma).numel() == c && val(beta).numel() == c, "norm2d: affine size");
    const Tensor& tg = val(gamma);
    const Tensor& tb = val(beta);
    int hw = h * w;
    Tensor out = Tensor::zeros({c, h, w});
    Tensor xhat = Tensor::zeros({c, h, w});
    std::vector<double> inv_sigma(static_cast<size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        const double* xp = tx.data.data() + static_cast<size_t>(ch) * hw;
        double mu = 0.0;
        for (int i = 0; i < hw; ++i) mu += xp[i];
        mu /= hw;
        double var = 0.0;
        for (int i = 0; i < hw; ++i) {
            double d = xp[i] - mu;
            var += d * d;
        }
        var /= hw;
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[static_cast<size_t>(ch)] = is;
        double* xhp = xhat.data.data() + static_cast<size_t>(ch) * hw;
        double* op = out.data.data() + static_cast<size_t>(ch) * hw;
        for (int i = 0; i < hw; ++i) {
            xhp[i] = (xp[i] - mu) * is;
            op[i] = tg[ch] * xhp[i] + tb[ch];
        }
    }
    bool rg = wants(x) || wants(gamma) || wants(beta);
    Var v = emit(std::move(out), rg);
    if (rg) {
        auto xh = std::make_shared<Tensor>(std::move(xhat));
        auto is = std::make_shared<std::vector<double>>(std::move(inv_sigma));
        nodes_.back().back = [this, v, x, gamma, beta, c, hw, xh, is]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            const Tensor& tg2 = val(gamma);
            for (int ch = 0; ch < c; ++ch) {
                const double* gp = g.data.data() + static_cast<size_t>(ch) * hw;
                const double* xhp = xh->data.data() + static_cast<size_t>(ch) * hw;
                if (wants(gamma)) {
                    double s = 0.0;
                    for (int i = 0; i < hw; ++i) s += gp[i] * xhp[i];
                    grad(gamma)[ch] += s;
                }
                if (wants(beta)) {
                    double s = 0.0;
                    for (int i = 0; i < hw; ++i) s += gp[i];
                    grad(beta)[ch] += s;
                }
                if (wants(x)) {
                    double mean_gh = 0.0, mean_ghx = 0.0;
                    double gm = tg2[ch];
                    for (int i = 0; i < hw; ++i) {
                        mean_gh += gp[i] * gm;
                        mean_ghx += gp[i] * gm * xhp[i];
                    }
                    mean_gh /= hw;
                    mean_ghx /= hw;
                    double isg = (*is)[static_cast<size_t>(ch)];
                    double* dxp = grad(x).data.data() + static_cast<size_t>(ch) * hw;
                    for (int i = 0; i < hw; ++i)
                        dxp[i] += isg * (gp[i] * gm - mean_gh - xhp[i] * mean_ghx);
                }
            }
        };
    }
    return v;
}

Graph::Var Graph::chw_to_rows(Var x) {
    const Tensor& tx = val(x);
    require(tx.ndim() == 3, "chw_to_rows: need [C,H,W]");
    int c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
    Tensor out = Tensor::zeros({h * w, c});
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h * w; ++i)
            out.at2(i, ch) = tx.data[static_cast<size_t>(ch) * h * w + i];
    bool rg = wants(x);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, x, c, h, w]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            Tensor& dx = grad(x);
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < h * w; ++i)
                    dx.data[static_cast<size_t>(ch) * h * w + i] += g.at2(i, ch);
        };
    return v;
}

Graph::Var Graph::rows_to_chw(Var x, int c, int h, int w) {
    const Tensor& tx = val(x);
    require(tx.ndim() == 2 && tx.dim(0) == h * w && tx.dim(1) == c, "rows_to_chw: shape mismatch");
    Tensor out = Tensor::zeros({c, h, w});
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h * w; ++i)
            out.data[static_cast<size_t>(ch) * h * w + i] = tx.at2(i, ch);
    bool rg = wants(x);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, x, c, h, w]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            Tensor& dx = grad(x);
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < h * w; ++i)
                    dx.data[static_cast<size_t>(i) * c + ch] += g.data[static_cast<size_t>(ch) * h * w + i];
        };
    return v;
}

Graph::Var Graph::patchify(Var x, int p) {
    const Tensor& tx = val(x);
    require(tx.ndim() == 3, "patchify: need [C,H,W]");
    int c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
    require(p >= 1 && h % p == 0 && w % p == 0, "patchify: dims not divisible by patch size");
    int gh = h / p, gw = w / p;
    Tensor out = Tensor::zeros({gh * gw, c * p * p});
    for (int by = 0; by < gh; ++by)
        for (int bx = 0; bx < gw; ++bx) {
            int row = by * gw + bx;
            for (int ch = 0; ch < c; ++ch)
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        out.at2(row, (ch * p + dy) * p + dx) = tx.at3(ch, by * p + dy, bx * p + dx);
        }
    bool rg = wants(x);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, x, c, p, gh, gw]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            Tensor& dx = grad(x);
            for (int by = 0; by < gh; ++by)
                for (int bx = 0; bx < gw; ++bx) {
                    int row = by * gw + bx;
                    for (int ch = 0; ch < c; ++ch)
                        for (int dy = 0; dy < p; ++dy)
                            for (int dxp = 0; dxp < p; ++dxp)
                                dx.at3(ch, by * p + dy, bx * p + dxp) +=
                                    g.at2(row, (ch * p + dy) * p + dxp);
                }
        };
    return v;
}

Graph::Var Graph::unpatchify(Var x, int c, int h, int w, int p) {
    const Tensor& tx = val(x);
    require(h % p == 0 && w % p == 0, "unpatchify: dims not divisible");
    int gh = h / p, gw = w / p;
    require(tx.ndim() == 2 && tx.dim(0) == gh * gw && tx.dim(1) == c * p * p,
            "unpatchify: shape mismatch");
    Tensor out = Tensor::zeros({c, h, w});
    for (int by = 0; by < gh; ++by)
        for (int bx = 0; bx < gw; ++bx) {
            int row = by * gw + bx;
            for (int ch = 0; ch < c; ++ch)
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        out.at3(ch, by * p + dy, bx * p + dx) = tx.at2(row, (ch * p + dy) * p + dx);
        }
    bool rg = wants(x);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, x, c, p, gh, gw]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            Tensor& dx = grad(x);
            for (int by = 0; by < gh; ++by)
                for (int bx = 0; bx < gw; ++bx) {
                    int row = by * gw + bx;
                    for (int ch = 0; ch < c; ++ch)
                        for (int dy = 0; dy < p; ++dy)
                            for (int dxp = 0; dxp < p; ++dxp)
                                dx.at2(row, (ch * p + dy) * p + dxp) +=
                                    g.at3(ch, by * p + dy, bx * p + dxp);
                }
        };
    return v;
}

Graph::Var Graph::mean_all(Var a) {
    const Tensor& ta = val(a);
    double s = 0.0;
    for (double x : ta.data) s += x;
    int64_t n = ta.numel();
    Tensor out = Tensor::scalar(s / static_cast<double>(n));
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a, n]() {
            double g = nodes_[static_cast<size_t>(v)].grad[0] / static_cast<double>(n);
            Tensor& da = grad(a);
            for (int64_t i = 0; i < da.numel(); ++i) da[i] += g;
        };
    return v;
}

Graph::Var Graph::sum_all(Var a) {
    const Tensor& ta = val(a);
    double s = 0.0;
    for (double x : ta.data) s += x;
    Tensor out = Tensor::scalar(s);
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a]() {
            double g = nodes_[static_cast<size_t>(v)].grad[0];
            Tensor& da = grad(a);
            for (int64_t i = 0; i < da.numel(); ++i) da[i] += g;
        };
    return v;
}

Graph::Var Graph::mean_hw(Var x) {
    const Tensor& tx = val(x);
    require(tx.ndim() == 3, "mean_hw: need [C,H,W]");
    int c = tx.dim(0), hw = tx.dim(1) * tx.dim(2);
    Tensor out = Tensor::zeros({c});
    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        const double* p = tx.data.data() + static_cast<size_t>(ch) * hw;
        for (int i = 0; i < hw; ++i) s += p[i];
        out[ch] = s / hw;
    }
    bool rg = wants(x);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, x, c, hw]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            Tensor& dx = grad(x);
            for (int ch = 0; ch < c; ++ch) {
                double gi = g[ch] / hw;
                double* p = dx.data.data() + static_cast<size_t>(ch) * hw;
                for (int i = 0; i < hw; ++i) p[i] += gi;
            }
        };
    return v;
}

Graph::Var Graph::mul_scalar_var(Var x, Var s) {
    const Tensor& tx = val(x);
    const Tensor& ts = val(s);
    require(ts.numel() == 1, "mul_scalar_var: scalar operand must have 1 element");
    Tensor out = tx;
    double sv = ts[0];
    for (double& v2 : out.data) v2 *= sv;
    bool rg = wants(x) || wants(s);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, x, s]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            const Tensor& tx2 = val(x);
            double sv2 = val(s)[0];
            if (wants(x)) {
                Tensor& dx = grad(x);
                for (int64_t i = 0; i < g.numel(); ++i) dx[i] += g[i] * sv2;
            }
            if (wants(s)) {
                double acc = 0.0;
                for (int64_t i = 0; i < g.numel(); ++i) acc += g[i] * tx2[i];
                grad(s)[0] += acc;
            }
        };
    return v;
}

Graph::Var Graph::reshape(Var a, std::vector<int> shape) {
    const Tensor& ta = val(a);
    require(Tensor::count(shape) == ta.numel(), "reshape: element count mismatch");
    Tensor out(std::move(shape), ta.data);
    bool rg = wants(a);
    Var v = emit(std::move(out), rg);
    if (rg)
        nodes_.back().back = [this, v, a]() {
            const Tensor& g = nodes_[static_cast<size_t>(v)].grad;
            Tensor& da = grad(a);
            for (int64_t i = 0; i < g.numel(); ++i) da[i] += g[i];
        };
    return v;
}

Graph::Var Graph::bce_with_logits(Var z, Tensor target) {
    const Tensor& tz = val(z);
    require(tz.same_shape(target), "bce_with_logits: shape mismatch");
    int64_t n = tz.numel();
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double zi = tz[i], ti = target[i];
        loss += std::max(zi, 0.0) - zi * ti + std::log1p(std::exp(-std::fabs(zi)));
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(n));
    bool rg = wants(z);
    Var v = emit(std::move(out), rg);
    if (rg) {
        auto tgt = std::make_shared<Tensor>(std::move(target));
        nodes_.back().back = [this, v, z, tgt, n]() {
            double g = nodes_[static_cast<size_t>(v)].grad[0] / static_cast<double>(n);
            const Tensor& tz2 = val(z);
            Tensor& dz = grad(z);
            for (int64_t i = 0; i < n; ++i) dz[i] += g * (sigmoid_stable(tz2[i]) - (*tgt)[i]);
        };
    }
    return v;
}

void Graph::backward(Var root) {
    Node& r = nodes_[static_cast<size_t>(root)];
    if (r.val.numel() != 1) throw ShapeError("backward: root must be scalar");
    if (!r.requires_grad) return;
    grad(root)[0] = 1.0;
    for (int32_t i = root; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.requires_grad && n.grad.numel() > 0 && n.back) n.back();
    }
}

Tensor eval_graph(const std::function<Graph::Var(Graph&)>& f) {
    Graph g;
    Graph::Var v = f(g);
    return g.val(v);
}

}  // namespace unveil::nn
