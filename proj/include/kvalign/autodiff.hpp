#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <utility>
#include <vector>

#include "kvalign/tensor.hpp"

namespace kvalign {

// Trainable tensor with persistent gradient and Adam moment state.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    // Adam state, lazily sized on first step.
    Tensor adam_m, adam_v;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        grad = Tensor::zeros(value.shape);
    }

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0f); }
};

struct Var {
    int id = -1;
};

// Reverse-mode tape. Rebuilt every forward pass; backward() may run once
// per tape and accumulates into Parameter::grad (callers zero grads first).
class Tape {
  public:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated lazily during backward
        Parameter* param = nullptr;
        std::function<void(Tape&)> back;
    };

    Var input(Tensor v) {
        nodes_.push_back(Node{std::move(v), {}, nullptr, nullptr});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var param(Parameter& p) {
        nodes_.push_back(Node{p.value, {}, &p, nullptr});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
    const Tensor& grad_of(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad; }
    size_t size() const { return nodes_.size(); }

    void backward(Var loss) {
        if (consumed_)
            throw contract_error("backward: tape already consumed; rebuild the forward pass");
        consumed_ = true;
        if (val(loss).numel() != 1)
            throw contract_error("backward: loss must be scalar, got shape " +
                                 shape_str(val(loss).shape));
        grad_buf(loss.id).data[0] = 1.0f;
        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; id--) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.grad.data.empty()) continue;  // not reachable from the loss
            if (n.back) n.back(*this);
            if (n.param && n.param->trainable) {
                float* g = n.param->grad.data.data();
                const float* s = n.grad.data.data();
                for (int64_t i = 0; i < n.grad.numel(); i++) g[i] += s[i];
            }
        }
    }

    // -- elementwise ---------------------------------------------------------

    Var add(Var a, Var b) {
        require_same_shape(val(a), val(b), "add");
        Tensor out = val(a);
        const float* pb = val(b).data.data();
        for (int64_t i = 0; i < out.numel(); i++) out.data[i] += pb[i];
        return make(std::move(out), [a, b](Tape& t) {
            const Tensor& dy = t.node_grad();
            t.acc(a, dy.data.data());
            t.acc(b, dy.data.data());
        });
    }

    Var mul(Var a, Var b) {
        require_same_shape(val(a), val(b), "mul");
        Tensor out = val(a);
        const float* pb = val(b).data.data();
        for (int64_t i = 0; i < out.numel(); i++) out.data[i] *= pb[i];
        return make(std::move(out), [a, b](Tape& t) {
            const Tensor& dy = t.node_grad();
            const Tensor& va = t.val(a);
            const Tensor& vb = t.val(b);
            Tensor& ga = t.grad_buf(a.id);
            Tensor& gb = t.grad_buf(b.id);
            for (int64_t i = 0; i < dy.numel(); i++) {
                ga.data[i] += dy.data[i] * vb.data[i];
                gb.data[i] += dy.data[i] * va.data[i];
            }
        });
    }

    Var scale(Var a, float s) {
        Tensor out = val(a);
        for (float& v : out.data) v *= s;
        return make(std::move(out), [a, s](Tape& t) {
            const Tensor& dy = t.node_grad();
            Tensor& ga = t.grad_buf(a.id);
            for (int64_t i = 0; i < dy.numel(); i++) ga.data[i] += s * dy.data[i];
        });
    }

    Var add_scalar(Var a, float s) {
        Tensor out = val(a);
        for (float& v : out.data) v += s;
        return make(std::move(out),
                    [a](Tape& t) { t.acc(a, t.node_grad().data.data()); });
    }

    Var gelu(Var a) {
        Tensor out = val(a);
        for (float& v : out.data)
            v = 0.5f * v * (1.0f + std::erf(v * 0.7071067811865475f));
        return make(std::move(out), [a](Tape& t) {
            const Tensor& dy = t.node_grad();
            const Tensor& x = t.val(a);
            Tensor& ga = t.grad_buf(a.id);
            for (int64_t i = 0; i < dy.numel(); i++) {
                float xi = x.data[i];
                float cdf = 0.5f * (1.0f + std::erf(xi * 0.7071067811865475f));
                float pdf = 0.3989422804014327f * std::exp(-0.5f * xi * xi);
                ga.data[i] += dy.data[i] * (cdf + xi * pdf);
            }
        });
    }

    Var silu(Var a) {
        Tensor out = val(a);
        for (float& v : out.data) v = v / (1.0f + std::exp(-v));
        return make(std::move(out), [a](Tape& t) {
            const Tensor& dy = t.node_grad();
            const Tensor& x = t.val(a);
            Tensor& ga = t.grad_buf(a.id);
            for (int64_t i = 0; i < dy.numel(); i++) {
                float s = 1.0f / (1.0f + std::exp(-x.data[i]));
                ga.data[i] += dy.data[i] * s * (1.0f + x.data[i] * (1.0f - s));
            }
        });
    }

    // -- matrix ops ----------------------------------------------------------

    Var matmul(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0])
            throw dim_error("matmul: incompatible shapes " + shape_str(ta.shape) + " x " +
                            shape_str(tb.shape));
        int m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
        Tensor out = Tensor::zeros({m, n});
        sgemm_nn(m, k, n, ta.data.data(), tb.data.data(), out.data.data(), false);
        return make(std::move(out), [a, b, m, k, n](Tape& t) {
            const Tensor& dy = t.node_grad();
            // dA += dY·Bᵀ ; dB += Aᵀ·dY
            sgemm_nt(m, n, k, dy.data.data(), t.val(b).data.data(),
                     t.grad_buf(a.id).data.data(), true);
            sgemm_tn(k, m, n, t.val(a).data.data(), dy.data.data(),
                     t.grad_buf(b.id).data.data(), true);
        });
    }

    // a[m×k] · b[n×k]ᵀ
    Var matmul_nt(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[1])
            throw dim_error("matmul_nt: incompatible shapes " + shape_str(ta.shape) + " x " +
                            shape_str(tb.shape) + "T");
        int m = ta.shape[0], k = ta.shape[1], n = tb.shape[0];
        Tensor out = Tensor::zeros({m, n});
        sgemm_nt(m, k, n, ta.data.data(), tb.data.data(), out.data.data(), false);
        return make(std::move(out), [a, b, m, k, n](Tape& t) {
            const Tensor& dy = t.node_grad();
            // dA += dY·B ; dB += dYᵀ·A
            sgemm_nn(m, n, k, dy.data.data(), t.val(b).data.data(),
                     t.grad_buf(a.id).data.data(), true);
            sgemm_tn(n, m, k, dy.data.data(), t.val(a).data.data(),
                     t.grad_buf(b.id).data.data(), true);
        });
    }

    Var transpose2d(Var a) {
        const Tensor& ta = val(a);
        if (ta.rank() != 2) throw dim_error("transpose2d: need rank 2, got " + shape_str(ta.shape));
        int m = ta.shape[0], n = ta.shape[1];
        Tensor out = Tensor::zeros({n, m});
        for (int i = 0; i < m; i++)
            for (int j = 0; j < n; j++) out.data[static_cast<size_t>(j) * m + i] = ta.at(i, j);
        return make(std::move(out), [a, m, n](Tape& t) {
            const Tensor& dy = t.node_grad();
            Tensor& ga = t.grad_buf(a.id);
            for (int j = 0; j < n; j++)
                for (int i = 0; i < m; i++)
                    ga.data[static_cast<size_t>(i) * n + j] += dy.data[static_cast<size_t>(j) * m + i];
        });
    }

    Var reshape(Var a, std::vector<int> s) {
        if (Tensor::numel_of(s) != val(a).numel())
            throw dim_error("reshape: numel mismatch " + shape_str(val(a).shape) + " -> " +
                            shape_str(s));
        Tensor out(std::move(s), val(a).data);
        return make(std::move(out),
                    [a](Tape& t) { t.acc(a, t.node_grad().data.data()); });
    }

    Var slice_cols(Var a, int c0, int c1) {
        const Tensor& ta = val(a);
        if (ta.rank() != 2 || c0 < 0 || c1 > ta.shape[1] || c0 >= c1)
            throw dim_error("slice_cols: bad range [" + std::to_string(c0) + "," +
                            std::to_string(c1) + ") for " + shape_str(ta.shape));
        int m = ta.shape[0], n = ta.shape[1], w = c1 - c0;
        Tensor out = Tensor::zeros({m, w});
        for (int i = 0; i < m; i++)
            std::memcpy(&out.data[static_cast<size_t>(i) * w], &ta.data[static_cast<size_t>(i) * n + c0],
                        sizeof(float) * static_cast<size_t>(w));
        return make(std::move(out), [a, c0, m, n, w](Tape& t) {
            const Tensor& dy = t.node_grad();
            Tensor& ga = t.grad_buf(a.id);
            for (int i = 0; i < m; i++)
                for (int j = 0; j < w; j++)
                    ga.data[static_cast<size_t>(i) * n + c0 + j] += dy.data[static_cast<size_t>(i) * w + j];
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw contract_error("concat_cols: empty input");
        int m = val(parts[0]).shape[0];
        int n = 0;
        for (Var p : parts) {
            const Tensor& tp = val(p);
            if (tp.rank() != 2 || tp.shape[0] != m)
                throw dim_error("concat_cols: row mismatch at " + shape_str(tp.shape));
            n += tp.shape[1];
        }
        Tensor out = Tensor::zeros({m, n});
        int off = 0;
        for (Var p : parts) {
            const Tensor& tp = val(p);
            int w = tp.shape[1];
            for (int i = 0; i < m; i++)
                std::memcpy(&out.data[static_cast<size_t>(i) * n + off],
                            &tp.data[static_cast<size_t>(i) * w], sizeof(float) * static_cast<size_t>(w));
            off += w;
        }
        std::vector<Var> ps = parts;
        return make(std::move(out), [ps, m, n](Tape& t) {
            const Tensor& dy = t.node_grad();
            int off = 0;
            for (Var p : ps) {
                int w = t.val(p).shape[1];
                Tensor& gp = t.grad_buf(p.id);
                for (int i = 0; i < m; i++)
                    for (int j = 0; j < w; j++)
                        gp.data[static_cast<size_t>(i) * w + j] += dy.data[static_cast<size_t>(i) * n + off + j];
                off += w;
            }
        });
    }

    Var add_bias_rows(Var x, Var b) {
        const Tensor& tx = val(x);
        const Tensor& tb = val(b);
        if (tx.rank() != 2 || tb.numel() != tx.shape[1])
            throw dim_error("add_bias_rows: " + shape_str(tx.shape) + " + " + shape_str(tb.shape));
        int m = tx.shape[0], n = tx.shape[1];
        Tensor out = tx;
        for (int i = 0; i < m; i++)
            for (int j = 0; j < n; j++) out.data[static_cast<size_t>(i) * n + j] += tb.data[static_cast<size_t>(j)];
        return make(std::move(out), [x, b, m, n](Tape& t) {
            const Tensor& dy = t.node_grad();
            t.acc(x, dy.data.data());
            Tensor& gb = t.grad_buf(b.id);
            for (int i = 0; i < m; i++)
                for (int j = 0; j < n; j++) gb.data[static_cast<size_t>(j)] += dy.data[static_cast<size_t>(i) * n + j];
        });
    }

    // x [C,H,W] + b[C] broadcast over the spatial grid
    Var add_channel_bias(Var x, Var b) {
        const Tensor& tx = val(x);
        const Tensor& tb = val(b);
        if (tx.rank() != 3 || tb.numel() != tx.shape[0])
            throw dim_error("add_channel_bias: " + shape_str(tx.shape) + " + " + shape_str(tb.shape));
        int C = tx.shape[0];
        int hw = tx.shape[1] * tx.shape[2];
        Tensor out = tx;
        for (int c = 0; c < C; c++) {
            float bc = tb.data[static_cast<size_t>(c)];
            float* o = &out.data[static_cast<size_t>(c) * hw];
            for (int i = 0; i < hw; i++) o[i] += bc;
        }
        return make(std::move(out), [x, b, C, hw](Tape& t) {
            const Tensor& dy = t.node_grad();
            t.acc(x, dy.data.data());
            Tensor& gb = t.grad_buf(b.id);
            for (int c = 0; c < C; c++) {
                const float* d = &dy.data[static_cast<size_t>(c) * hw];
                double s = 0.0;
                for (int i = 0; i < hw; i++) s += d[i];
                gb.data[static_cast<size_t>(c)] += static_cast<float>(s);
            }
        });
    }

    // -- reductions ----------------------------------------------------------

    Var sum_all(Var a) {
        double s = 0.0;
        for (float v : val(a).data) s += v;
        return make(Tensor::scalar(static_cast<float>(s)), [a](Tape& t) {
            float d = t.node_grad().data[0];
            Tensor& ga = t.grad_buf(a.id);
            for (float& g : ga.data) g += d;
        });
    }

    Var mean_all(Var a) {
        double s = 0.0;
        for (float v : val(a).data) s += v;
        int64_t n = val(a).numel();
        return make(Tensor::scalar(static_cast<float>(s / static_cast<double>(n))), [a, n](Tape& t) {
            float d = t.node_grad().data[0] / static_cast<float>(n);
            Tensor& ga = t.grad_buf(a.id);
            for (float& g : ga.data) g += d;
        });
    }

    Var mse(Var a, Var b) {
        require_same_shape(val(a), val(b), "mse");
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        double s = 0.0;
        for (int64_t i = 0; i < ta.numel(); i++) {
            double d = static_cast<double>(ta.data[i]) - static_cast<double>(tb.data[i]);
            s += d * d;
        }
        int64_t n = ta.numel();
        return make(Tensor::scalar(static_cast<float>(s / static_cast<double>(n))), [a, b, n](Tape& t) {
            float d = t.node_grad().data[0] * 2.0f / static_cast<float>(n);
            const Tensor& va = t.val(a);
            const Tensor& vb = t.val(b);
            Tensor& ga = t.grad_buf(a.id);
            Tensor& gb = t.grad_buf(b.id);
            for (int64_t i = 0; i < va.numel(); i++) {
                float e = d * (va.data[i] - vb.data[i]);
                ga.data[i] += e;
                gb.data[i] -= e;
            }
        });
    }

    // -- softmax / normalization ---------------------------------------------

    // Row softmax for 2D input, numerically stabilized by max-subtraction.
    // forbid (optional, same shape, nonzero = forbidden) pins weights to
    // exactly zero at forbidden positions.
    Var softmax_rows(Var a, const Tensor* forbid = nullptr) {
        const Tensor& ta = val(a);
        if (ta.rank() != 2) throw dim_error("softmax_rows: need rank 2, got " + shape_str(ta.shape));
        if (forbid && !forbid->same_shape(ta))
            throw dim_error("softmax_rows: mask shape " + shape_str(forbid->shape) + " vs " +
                            shape_str(ta.shape));
        int m = ta.shape[0], n = ta.shape[1];
        Tensor out = Tensor::zeros({m, n});
        for (int i = 0; i < m; i++) {
            const float* xi = &ta.data[static_cast<size_t>(i) * n];
            const float* fi = forbid ? &forbid->data[static_cast<size_t>(i) * n] : nullptr;
            float mx = -std::numeric_limits<float>::infinity();
            int allowed = 0;
            for (int j = 0; j < n; j++) {
                if (fi && fi[j] != 0.0f) continue;
                allowed++;
                if (xi[j] > mx) mx = xi[j];
            }
            if (allowed == 0) throw contract_error("softmax_rows: fully forbidden row");
            double denom = 0.0;
            float* oi = &out.data[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; j++) {
                if (fi && fi[j] != 0.0f) {
                    oi[j] = 0.0f;
                    continue;
                }
                oi[j] = std::exp(xi[j] - mx);
                denom += oi[j];
            }
            float inv = static_cast<float>(1.0 / denom);
            for (int j = 0; j < n; j++) oi[j] *= inv;
        }
        return make(std::move(out), [a, m, n](Tape& t) {
            const Tensor& dy = t.node_grad();
            const Tensor& y = t.node_val();
            Tensor& ga = t.grad_buf(a.id);
            for (int i = 0; i < m; i++) {
                const float* yi = &y.data[static_cast<size_t>(i) * n];
                const float* di = &dy.data[static_cast<size_t>(i) * n];
                double dot = 0.0;
                for (int j = 0; j < n; j++) dot += static_cast<double>(di[j]) * yi[j];
                float dotf = static_cast<float>(dot);
                float* gi = &ga.data[static_cast<size_t>(i) * n];
                for (int j = 0; j < n; j++) gi[j] += yi[j] * (di[j] - dotf);
            }
        });
    }

    // LayerNorm over the last dim of a 2D input with per-column scale/shift.
    Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-5f) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2) throw dim_error("layer_norm: need rank 2, got " + shape_str(tx.shape));
        int m = tx.shape[0], n = tx.shape[1];
        if (val(gamma).numel() != n || val(beta).numel() != n)
            throw dim_error("layer_norm: gamma/beta must have " + std::to_string(n) + " entries");
        Tensor out = Tensor::zeros({m, n});
        auto istd = std::make_shared<std::vector<float>>(m);
        auto mean = std::make_shared<std::vector<float>>(m);
        const float* g = val(gamma).data.data();
        const float* bt = val(beta).data.data();
        for (int i = 0; i < m; i++) {
            const float* xi = &tx.data[static_cast<size_t>(i) * n];
            double mu = 0.0;
            for (int j = 0; j < n; j++) mu += xi[j];
            mu /= n;
            double var = 0.0;
            for (int j = 0; j < n; j++) {
                double d = xi[j] - mu;
                var += d * d;
            }
            var /= n;
            float is = static_cast<float>(1.0 / std::sqrt(var + eps));
            (*mean)[static_cast<size_t>(i)] = static_cast<float>(mu);
            (*istd)[static_cast<size_t>(i)] = is;
            float* oi = &out.data[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; j++)
                oi[j] = (xi[j] - static_cast<float>(mu)) * is * g[j] + bt[j];
        }
        return make(std::move(out), [x, gamma, beta, m, n, istd, mean](Tape& t) {
            const Tensor& dy = t.node_grad();
            const Tensor& tx2 = t.val(x);
            const float* g = t.val(gamma).data.data();
            Tensor& gx = t.grad_buf(x.id);
            Tensor& gg = t.grad_buf(gamma.id);
            Tensor& gb = t.grad_buf(beta.id);
            for (int i = 0; i < m; i++) {
                const float* xi = &tx2.data[static_cast<size_t>(i) * n];
                const float* di = &dy.data[static_cast<size_t>(i) * n];
                float mu = (*mean)[static_cast<size_t>(i)];
                float is = (*istd)[static_cast<size_t>(i)];
                double s1 = 0.0, s2 = 0.0;
                for (int j = 0; j < n; j++) {
                    float xh = (xi[j] - mu) * is;
                    float dxh = di[j] * g[j];
                    s1 += dxh;
                    s2 += static_cast<double>(dxh) * xh;
                    gg.data[static_cast<size_t>(j)] += di[j] * xh;
                    gb.data[static_cast<size_t>(j)] += di[j];
                }
                float m1 = static_cast<float>(s1 / n);
                float m2 = static_cast<float>(s2 / n);
                float* gxi = &gx.data[static_cast<size_t>(i) * n];
                for (int j = 0; j < n; j++) {
                    float xh = (xi[j] - mu) * is;
                    float dxh = di[j] * g[j];
                    gxi[j] += is * (dxh - m1 - xh * m2);
                }
            }
        });
    }

    // GroupNorm over channel groups of a [C,H,W] input, per-channel affine.
    Var group_norm(Var x, Var gamma, Var beta, int groups, float eps = 1e-5f) {
        const Tensor& tx = val(x);
        if (tx.rank() != 3) throw dim_error("group_norm: need [C,H,W], got " + shape_str(tx.shape));
        int C = tx.shape[0], hw = tx.shape[1] * tx.shape[2];
        if (groups <= 0 || C % groups != 0)
            throw dim_error("group_norm: " + std::to_string(groups) + " groups for " +
                            std::to_string(C) + " channels");
        if (val(gamma).numel() != C || val(beta).numel() != C)
            throw dim_error("group_norm: gamma/beta must have " + std::to_string(C) + " entries");
        int cg = C / groups;
        int64_t gn = static_cast<int64_t>(cg) * hw;
        Tensor out = Tensor::zeros(tx.shape);
        auto istd = std::make_shared<std::vector<float>>(groups);
        auto mean = std::make_shared<std::vector<float>>(groups);
        const float* g = val(gamma).data.data();
        const float* bt = val(beta).data.data();
        for (int gi = 0; gi < groups; gi++) {
            const float* xg = &tx.data[static_cast<size_t>(gi) * gn];
            double mu = 0.0;
            for (int64_t i = 0; i < gn; i++) mu += xg[i];
            mu /= static_cast<double>(gn);
            double var = 0.0;
            for (int64_t i = 0; i < gn; i++) {
                double d = xg[i] - mu;
                var += d * d;
            }
            var /= static_cast<double>(gn);
            float is = static_cast<float>(1.0 / std::sqrt(var + eps));
            (*mean)[static_cast<size_t>(gi)] = static_cast<float>(mu);
            (*istd)[static_cast<size_t>(gi)] = is;
            float* og = &out.data[static_cast<size_t>(gi) * gn];
            for (int c = 0; c < cg; c++) {
                int ch = gi * cg + c;
                for (int i = 0; i < hw; i++) {
                    float xh = (xg[static_cast<size_t>(c) * hw + i] - static_cast<float>(mu)) * is;
                    og[static_cast<size_t>(c) * hw + i] = xh * g[ch] + bt[ch];
                }
            }
        }
        return make(std::move(out), [x, gamma, beta, groups, cg, hw, gn, istd, mean](Tape& t) {
            const Tensor& dy = t.node_grad();
            const Tensor& tx2 = t.val(x);
            const float* g = t.val(gamma).data.data();
            Tensor& gx = t.grad_buf(x.id);
            Tensor& gg = t.grad_buf(gamma.id);
            Tensor& gb = t.grad_buf(beta.id);
            for (int gi = 0; gi < groups; gi++) {
                const float* xg = &tx2.data[static_cast<size_t>(gi) * gn];
                const float* dg = &dy.data[static_cast<size_t>(gi) * gn];
                float mu = (*mean)[static_cast<size_t>(gi)];
                float is = (*istd)[static_cast<size_t>(gi)];
                double s1 = 0.0, s2 = 0.0;
                for (int c = 0; c < cg; c++) {
                    int ch = gi * cg + c;
                    double dgg = 0.0, dgb = 0.0;
                    for (int i = 0; i < hw; i++) {
                        float xh = (xg[static_cast<size_t>(c) * hw + i] - mu) * is;
                        float d = dg[static_cast<size_t>(c) * hw + i];
                        float dxh = d * g[ch];
                        s1 += dxh;
                        s2 += static_cast<double>(dxh) * xh;
                        dgg += static_cast<double>(d) * xh;
                        dgb += d;
                    }
                    gg.data[static_cast<size_t>(ch)] += static_cast<float>(dgg);
                    gb.data[static_cast<size_t>(ch)] += static_cast<float>(dgb);
                }
                float m1 = static_cast<float>(s1 / static_cast<double>(gn));
                float m2 = static_cast<float>(s2 / static_cast<double>(gn));
                float* gxg = &gx.data[static_cast<size_t>(gi) * gn];
                for (int c = 0; c < cg; c++) {
                    int ch = gi * cg + c;
                    for (int i = 0; i < hw; i++) {
                        float xh = (xg[static_cast<size_t>(c) * hw + i] - mu) * is;
                        float dxh = dg[static_cast<size_t>(c) * hw + i] * g[ch];
                        gxg[static_cast<size_t>(c) * hw + i] += is * (dxh - m1 - xh * m2);
                    }
                }
            }
        });
    }

    // -- conv / resampling ---------------------------------------------------

    // 3x3 convolution with zero padding 1, stride 1 or 2.
    // x [Cin,H,W], w [Cout,Cin,3,3], b [Cout] -> [Cout,Ho,Wo]
    Var conv2d(Var x, Var w, Var b, int stride) {
        const Tensor& tx = val(x);
        const Tensor& tw = val(w);
        if (tx.rank() != 3 || tw.rank() != 4 || tw.shape[2] != 3 || tw.shape[3] != 3)
            throw dim_error("conv2d: want x[C,H,W], w[Co,Ci,3,3]; got " + shape_str(tx.shape) +
                            ", " + shape_str(tw.shape));
        if (tw.shape[1] != tx.shape[0])
            throw dim_error("conv2d: channel mismatch " + shape_str(tx.shape) + " vs " +
                            shape_str(tw.shape));
        if (stride != 1 && stride != 2) throw contract_error("conv2d: stride must be 1 or 2");
        int ci = tx.shape[0], h = tx.shape[1], wd = tx.shape[2];
        int co = tw.shape[0];
        if (val(b).numel() != co) throw dim_error("conv2d: bias size mismatch");
        int ho = (h + 2 - 3) / stride + 1;
        int wo = (wd + 2 - 3) / stride + 1;
        int k9 = ci * 9;
        int ohw = ho * wo;

        auto cols = std::make_shared<Tensor>(Tensor::zeros({k9, ohw}));
        im2col(tx.data.data(), ci, h, wd, stride, ho, wo, cols->data.data());

        Tensor out = Tensor::zeros({co, ho, wo});
        sgemm_nn(co, k9, ohw, tw.data.data(), cols->data.data(), out.data.data(), false);
        const float* bp = val(b).data.data();
        for (int c = 0; c < co; c++) {
            float* o = &out.data[static_cast<size_t>(c) * ohw];
            for (int i = 0; i < ohw; i++) o[i] += bp[c];
        }
        return make(std::move(out), [x, w, b, stride, ci, h, wd, co, ho, wo, k9, ohw, cols](Tape& t) {
            const Tensor& dy = t.node_grad();
            // dW += dY · colsᵀ
            sgemm_nt(co, ohw, k9, dy.data.data(), cols->data.data(),
                     t.grad_buf(w.id).data.data(), true);
            // db += row sums of dY
            Tensor& gb = t.grad_buf(b.id);
            for (int c = 0; c < co; c++) {
                const float* d = &dy.data[static_cast<size_t>(c) * ohw];
                double s = 0.0;
                for (int i = 0; i < ohw; i++) s += d[i];
                gb.data[static_cast<size_t>(c)] += static_cast<float>(s);
            }
            // dcols = Wᵀ · dY, then scatter back to dx
            Tensor dcols = Tensor::zeros({k9, ohw});
            sgemm_tn(k9, co, ohw, t.val(w).data.data(), dy.data.data(), dcols.data.data(), false);
            col2im(dcols.data.data(), ci, h, wd, stride, ho, wo, t.grad_buf(x.id).data.data());
        });
    }

    // Nearest-neighbor 2x upsample of [C,H,W].
    Var upsample_nearest2x(Var x) {
        const Tensor& tx = val(x);
        if (tx.rank() != 3) throw dim_error("upsample_nearest2x: need [C,H,W], got " + shape_str(tx.shape));
        int C = tx.shape[0], h = tx.shape[1], w = tx.shape[2];
        Tensor out = Tensor::zeros({C, h * 2, w * 2});
        for (int c = 0; c < C; c++)
            for (int y = 0; y < h; y++)
                for (int xx = 0; xx < w; xx++) {
                    float v = tx.data[(static_cast<size_t>(c) * h + y) * w + xx];
                    size_t base = (static_cast<size_t>(c) * h * 2 + y * 2) * (w * 2) + xx * 2;
                    out.data[base] = v;
                    out.data[base + 1] = v;
                    out.data[base + static_cast<size_t>(w) * 2] = v;
                    out.data[base + static_cast<size_t>(w) * 2 + 1] = v;
                }
        return make(std::move(out), [x, C, h, w](Tape& t) {
            const Tensor& dy = t.node_grad();
            Tensor& gx = t.grad_buf(x.id);
            for (int c = 0; c < C; c++)
                for (int y = 0; y < h; y++)
                    for (int xx = 0; xx < w; xx++) {
                        size_t base = (static_cast<size_t>(c) * h * 2 + y * 2) * (w * 2) + xx * 2;
                        gx.data[(static_cast<size_t>(c) * h + y) * w + xx] +=
                            dy.data[base] + dy.data[base + 1] +
                            dy.data[base + static_cast<size_t>(w) * 2] +
                            dy.data[base + static_cast<size_t>(w) * 2 + 1];
                    }
        });
    }

    // [C1,H,W] ++ [C2,H,W] -> [C1+C2,H,W]
    Var concat_channels(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (ta.rank() != 3 || tb.rank() != 3 || ta.shape[1] != tb.shape[1] ||
            ta.shape[2] != tb.shape[2])
            throw dim_error("concat_channels: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
        Tensor out = Tensor::zeros({ta.shape[0] + tb.shape[0], ta.shape[1], ta.shape[2]});
        std::memcpy(out.data.data(), ta.data.data(), sizeof(float) * ta.data.size());
        std::memcpy(out.data.data() + ta.numel(), tb.data.data(), sizeof(float) * tb.data.size());
        int64_t na = ta.numel();
        return make(std::move(out), [a, b, na](Tape& t) {
            const Tensor& dy = t.node_grad();
            Tensor& ga = t.grad_buf(a.id);
            Tensor& gb = t.grad_buf(b.id);
            for (int64_t i = 0; i < na; i++) ga.data[i] += dy.data[i];
            for (int64_t i = na; i < dy.numel(); i++) gb.data[i - na] += dy.data[i];
        });
    }

    // Gather rows of an embedding table. Backward scatter-adds into the table.
    Var embedding_rows(Var table, const std::vector<int>& ids) {
        const Tensor& tt = val(table);
        if (tt.rank() != 2) throw dim_error("embedding_rows: table must be 2D");
        int v = tt.shape[0], d = tt.shape[1];
        for (int id : ids)
            if (id < 0 || id >= v)
                throw contract_error("embedding_rows: id " + std::to_string(id) + " out of range " +
                                     std::to_string(v));
        int n = static_cast<int>(ids.size());
        Tensor out = Tensor::zeros({n, d});
        for (int i = 0; i < n; i++)
            std::memcpy(&out.data[static_cast<size_t>(i) * d], &tt.data[static_cast<size_t>(ids[static_cast<size_t>(i)]) * d],
                        sizeof(float) * static_cast<size_t>(d));
        std::vector<int> ids_copy = ids;
        return make(std::move(out), [table, ids_copy, d](Tape& t) {
            const Tensor& dy = t.node_grad();
            Tensor& gt = t.grad_buf(table.id);
            for (size_t i = 0; i < ids_copy.size(); i++) {
                float* row = &gt.data[static_cast<size_t>(ids_copy[i]) * d];
                const float* src = &dy.data[i * static_cast<size_t>(d)];
                for (int j = 0; j < d; j++) row[j] += src[j];
            }
        });
    }

  private:
    std::vector<Node> nodes_;
    bool consumed_ = false;
    int current_ = -1;  // node whose backward fn is running

    Var make(Tensor value, std::function<void(Tape&)> back) {
        nodes_.push_back(Node{std::move(value), {}, nullptr, std::move(back)});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    friend struct TapeBackdoor;

  public:
    // Accessors used by backward lambdas.
    Tensor& grad_buf(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
        return n.grad;
    }

    const Tensor& node_grad() const { return nodes_[static_cast<size_t>(current_)].grad; }
    const Tensor& node_val() const { return nodes_[static_cast<size_t>(current_)].value; }

    void acc(Var v, const float* src) {
        Tensor& g = grad_buf(v.id);
        for (int64_t i = 0; i < g.numel(); i++) g.data[i] += src[i];
    }

  private:
    static void im2col(const float* x, int ci, int h, int w, int stride, int ho, int wo,
                       float* cols) {
        int ohw = ho * wo;
        for (int c = 0; c < ci; c++) {
            for (int ky = 0; ky < 3; ky++) {
                for (int kx = 0; kx < 3; kx++) {
                    float* dst = cols + (static_cast<size_t>(c) * 9 + ky * 3 + kx) * ohw;
                    for (int oy = 0; oy < ho; oy++) {
                        int iy = oy * stride + ky - 1;
                        if (iy < 0 || iy >= h) {
                            std::memset(dst + static_cast<size_t>(oy) * wo, 0, sizeof(float) * static_cast<size_t>(wo));
                            continue;
                        }
                        const float* src = x + (static_cast<size_t>(c) * h + iy) * w;
                        float* drow = dst + static_cast<size_t>(oy) * wo;
                        for (int ox = 0; ox < wo; ox++) {
                            int ix = ox * stride + kx - 1;
                            drow[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
                        }
                    }
                }
            }
        }
    }

    static void col2im(const float* cols, int ci, int h, int w, int stride, int ho, int wo,
                       float* dx) {
        int ohw = ho * wo;
        for (int c = 0; c < ci; c++) {
            for (int ky = 0; ky < 3; ky++) {
                for (int kx = 0; kx < 3; kx++) {
                    const float* src = cols + (static_cast<size_t>(c) * 9 + ky * 3 + kx) * ohw;
                    for (int oy = 0; oy < ho; oy++) {
                        int iy = oy * stride + ky - 1;
                        if (iy < 0 || iy >= h) continue;
                        float* drow = dx + (static_cast<size_t>(c) * h + iy) * w;
                        const float* srow = src + static_cast<size_t>(oy) * wo;
                        for (int ox = 0; ox < wo; ox++) {
                            int ix = ox * stride + kx - 1;
                            if (ix >= 0 && ix < w) drow[ix] += srow[ox];
                        }
                    }
                }
            }
        }
    }

    // backward() drives node lambdas; they read node_grad()/node_val() of the
    // node being processed, so backward sets current_ before each call.
    friend class TapeRunner;

  public:
    // internal: used by backward loop
    void set_current(int id) { current_ = id; }
};

}  // namespace kvalign
