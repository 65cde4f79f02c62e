#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <clab/rng.hpp>

namespace clab {

// Reverse-mode autodiff over dense 2D matrices. Scalar type is a template
// parameter: training runs in float, gradient checks in double.

namespace detail {

// C(m x n) += A(m x k) * B(k x n)
template <class S>
void gemm_nn(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const S* ai = a + static_cast<std::size_t>(i) * k;
        S* ci = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const S ap = ai[p];
            if (ap == S(0)) { continue; }
            const S* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) { ci[j] += ap * bp[j]; }
        }
    }
}

// C(m x k) += A(m x n) * B(k x n)^T
template <class S>
void gemm_nt(const S* a, const S* b, S* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const S* ai = a + static_cast<std::size_t>(i) * n;
        S* ci = c + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const S* bp = b + static_cast<std::size_t>(p) * n;
            S acc = 0;
            for (int j = 0; j < n; ++j) { acc += ai[j] * bp[j]; }
            ci[p] += acc;
        }
    }
}

// C(k x n) += A(m x k)^T * B(m x n)
template <class S>
void gemm_tn(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const S* ai = a + static_cast<std::size_t>(i) * k;
        const S* bi = b + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const S ap = ai[p];
            if (ap == S(0)) { continue; }
            S* cp = c + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) { cp[j] += ap * bi[j]; }
        }
    }
}

}  // namespace detail

template <class S>
struct Node {
    int rows{0};
    int cols{0};
    std::vector<S> v;
    std::vector<S> g;
    bool requires_grad{false};
    bool backward_done{false};
    std::vector<std::shared_ptr<Node<S>>> parents;
    // backward_fn must capture this node by raw pointer: an owning capture
    // would form a cycle and leak the whole graph. Parents may be captured
    // owning; they never point back at the output.
    std::function<void()> backward_fn;

    std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
    void ensure_grad() {
        if (g.size() != size()) { g.assign(size(), S(0)); }
    }
};

template <class S>
class Tensor {
  public:
    Tensor() = default;
    Tensor(int rows, int cols, bool requires_grad = false) {
        if (rows < 0 || cols < 0) { throw std::invalid_argument("negative tensor shape"); }
        node_ = std::make_shared<Node<S>>();
        node_->rows = rows;
        node_->cols = cols;
        node_->v.assign(static_cast<std::size_t>(rows) * cols, S(0));
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(S value) {
        Tensor t(1, 1);
        t.node_->v[0] = value;
        return t;
    }

    int rows() const { return node_->rows; }
    int cols() const { return node_->cols; }
    std::size_t size() const { return node_->size(); }
    bool defined() const { return node_ != nullptr; }

    S& at(int i, int j) { return node_->v[static_cast<std::size_t>(i) * cols() + j]; }
    S at(int i, int j) const { return node_->v[static_cast<std::size_t>(i) * cols() + j]; }
    std::vector<S>& values() { return node_->v; }
    const std::vector<S>& values() const { return node_->v; }
    std::vector<S>& grad() {
        node_->ensure_grad();
        return node_->g;
    }
    const std::vector<S>& grad() const { return node_->g; }

    S item() const {
        if (size() != 1) { throw std::invalid_argument("item() on non-scalar tensor"); }
        return node_->v[0];
    }

    // copies share the underlying node; clone() makes independent storage
    Tensor clone() const {
        Tensor t(rows(), cols(), requires_grad());
        t.node_->v = node_->v;
        return t;
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    void zero_grad() { node_->g.assign(node_->size(), S(0)); }

    std::shared_ptr<Node<S>> node() const { return node_; }

  private:
    std::shared_ptr<Node<S>> node_;
};

namespace detail {

template <class S>
Tensor<S> make_op(int rows, int cols, std::vector<std::shared_ptr<Node<S>>> parents) {
    Tensor<S> out(rows, cols);
    out.node()->parents = std::move(parents);
    out.node()->requires_grad = false;
    for (const auto& p : out.node()->parents) {
        if (p->requires_grad) { out.node()->requires_grad = true; }
    }
    return out;
}

template <class S>
void require_shape(const Tensor<S>& t, int rows, int cols, const char* what) {
    if (t.rows() != rows || t.cols() != cols) {
        throw std::invalid_argument(std::string("shape mismatch in ") + what);
    }
}

}  // namespace detail

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.cols() != b.rows()) { throw std::invalid_argument("shape mismatch in matmul"); }
    auto out = detail::make_op<S>(a.rows(), b.cols(), {a.node(), b.node()});
    detail::gemm_nn(a.values().data(), b.values().data(), out.values().data(), a.rows(), a.cols(),
                    b.cols());
    auto an = a.node();
    auto bn = b.node();
    Node<S>* on = out.node().get();
    out.node()->backward_fn = [an, bn, on] {
        an->ensure_grad();
        bn->ensure_grad();
        detail::gemm_nt(on->g.data(), bn->v.data(), an->g.data(), on->rows, on->cols, an->cols);
        detail::gemm_tn(an->v.data(), on->g.data(), bn->g.data(), an->rows, an->cols, on->cols);
    };
    return out;
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_shape(b, a.rows(), a.cols(), "add");
    auto out = detail::make_op<S>(a.rows(), a.cols(), {a.node(), b.node()});
    for (std::size_t i = 0; i < a.size(); ++i) { out.values()[i] = a.values()[i] + b.values()[i]; }
    auto an = a.node();
    auto bn = b.node();
    Node<S>* on = out.node().get();
    out.node()->backward_fn = [an, bn, on] {
        an->ensure_grad();
        bn->ensure_grad();
        for (std::size_t i = 0; i < on->size(); ++i) {
            an->g[i] += on->g[i];
            bn->g[i] += on->g[i];
        }
    };
    return out;
}

// Broadcast a (1 x c) row vector over every row of a.
template <class S>
Tensor<S> add_rowvec(const Tensor<S>& a, const Tensor<S>& row) {
    detail::require_shape(row, 1, a.cols(), "add_rowvec");
    auto out = detail::make_op<S>(a.rows(), a.cols(), {a.node(), row.node()});
    const int c = a.cols();
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < c; ++j) { out.at(i, j) = a.at(i, j) + row.at(0, j); }
    }
    auto an = a.node();
    auto rn = row.node();
    Node<S>* on = out.node().get();
    out.node()->backward_fn = [an, rn, on] {
        an->ensure_grad();
        rn->ensure_grad();
        const int c = on->cols;
        for (int i = 0; i < on->rows; ++i) {
            for (int j = 0; j < c; ++j) {
                const S gij = on->g[static_cast<std::size_t>(i) * c + j];
                an->g[static_cast<std::size_t>(i) * c + j] += gij;
                rn->g[j] += gij;
            }
        }
    };
    return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::require_shape(b, a.rows(), a.cols(), "mul");
    auto out = detail::make_op<S>(a.rows(), a.cols(), {a.node(), b.node()});
    for (std::size_t i = 0; i < a.size(); ++i) { out.values()[i] = a.values()[i] * b.values()[i]; }
    auto an = a.node();
    auto bn = b.node();
    Node<S>* on = out.node().get();
    out.node()->backward_fn = [an, bn, on] {
        an->ensure_grad();
        bn->ensure_grad();
        for (std::size_t i = 0; i < on->size(); ++i) {
            an->g[i] += on->g[i] * bn->v[i];
            bn->g[i] += on->g[i] * an->v[i];
        }
    };
    return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S s) {
    auto out = detail::make_op<S>(a.rows(), a.cols(), {a.node()});
    for (std::size_t i = 0; i < a.size(); ++i) { out.values()[i] = a.values()[i] * s; }
    auto an = a.node();
    Node<S>* on = out.node().get();
    out.node()->backward_fn = [an, on, s] {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->size(); ++i) { an->g[i] += on->g[i] * s; }
    };
    return out;
}

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
    auto out = detail::make_op<S>(1, 1, {a.node()});
    S acc = 0;
    for (S x : a.values()) { acc += x; }
    out.values()[0] = acc;
    auto an = a.node();
    Node<S>* on = out.node().get();
    out.node()->backward_fn = [an, on] {
        an->ensure_grad();
        for (std::size_t i = 0; i < an->size(); ++i) { an->g[i] += on->g[0]; }
    };
    return out;
}

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
    auto out = detail::make_op<S>(a.rows(), a.cols(), {a.node()});
    for (std::size_t i = 0; i < a.size(); ++i) {
        out.values()[i] = a.values()[i] > S(0) ? a.values()[i] : S(0);
    }
    auto an = a.node();
    Node<S>* on = out.node().get();
    out.node()->backward_fn = [an, on] {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->size(); ++i) {
            if (an->v[i] > S(0)) { an->g[i] += on->g[i]; }
        }
    };
    return out;
}

// Exact (erf) GELU.
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
    auto out = detail::make_op<S>(a.rows(), a.cols(), {a.node()});
    const S inv_sqrt2 = S(0.70710678118654752440);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const S x = a.values()[i];
        out.values()[i] = S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2));
    }
    auto an = a.node();
    Node<S>* on = out.node().get();
    out.node()->backward_fn = [an, on, inv_sqrt2] {
        an->ensure_grad();
        const S inv_sqrt2pi = S(0.39894228040143267794);
        for (std::size_t i = 0; i < on->size(); ++i) {
            const S x = an->v[i];
            const S cdf = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
            const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * x * x);
            an->g[i] += on->g[i] * (cdf + x * pdf);
        }
    };
    return out;
}

// Row-wise softmax with max-subtraction.
template <class S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
    auto out = detail::make_op<S>(a.rows(), a.cols(), {a.node()});
    const int c = a.cols();
    for (int i = 0; i < a.rows(); ++i) {
        S mx = a.at(i, 0);
        for (int j = 1; j < c; ++j) { mx = std::max(mx, a.at(i, j)); }
        S z = 0;
        for (int j = 0; j < c; ++j) {
            const S e = std::exp(a.at(i, j) - mx);
            out.at(i, j) = e;
            z += e;
        }
        for (int j = 0; j < c; ++j) { out.at(i, j) /= z; }
    }
    auto an = a.node();
    Node<S>* on = out.node().get();
    out.node()->backward_fn = [an, on] {
        an->ensure_grad();
        const int c = on->cols;
        for (int i = 0; i < on->rows; ++i) {
            const S* p = on->v.data() + static_cast<std::size_t>(i) * c;
            const S* gp = on->g.data() + static_cast<std::size_t>(i) * c;
            S dot = 0;
            for (int j = 0; j < c; ++j) { dot += p[j] * gp[j]; }
            S* ga = an->g.data() + static_cast<std::size_t>(i) * c;
            for (int j = 0; j < c; ++j) { ga[j] += p[j] * (gp[j] - dot); }
        }
    };
    return out;
}

// Row-wise layer norm with affine gain/bias (each 1 x c). A constant row
// maps to zero pre-affine (epsilon guards the zero-variance case).
template <class S>
Tensor<S> layer_norm_rows(const Tensor<S>& a, const Tensor<S>& gain, const Tensor<S>& bias,
                          S eps = S(1e-5)) {
    detail::require_shape(gain, 1, a.cols(), "layer_norm gain");
    detail::require_shape(bias, 1, a.cols(), "layer_norm bias");
    auto out = detail::make_op<S>(a.rows(), a.cols(), {a.node(), gain.node(), bias.node()});
    const int c = a.cols();
    std::vector<S> inv_std(a.rows());
    std::vector<S> means(a.rows());
    for (int i = 0; i < a.rows(); ++i) {
        S mu = 0;
        for (int j = 0; j < c; ++j) { mu += a.at(i, j); }
        mu /= S(c);
        S var = 0;
        for (int j = 0; j < c; ++j) {
            const S d = a.at(i, j) - mu;
            var += d * d;
        }
        var /= S(c);
        const S is = S(1) / std::sqrt(var + eps);
        means[i] = mu;
        inv_std[i] = is;
        for (int j = 0; j < c; ++j) {
            out.at(i, j) = (a.at(i, j) - mu) * is * gain.at(0, j) + bias.at(0, j);
        }
    }
    auto an = a.node();
    auto gn = gain.node();
    auto bn = bias.node();
    Node<S>* on = out.node().get();
    out.node()->backward_fn = [an, gn, bn, on, inv_std, means] {
        an->ensure_grad();
        gn->ensure_grad();
        bn->ensure_grad();
        const int c = on->cols;
        for (int i = 0; i < on->rows; ++i) {
            const S mu = means[i];
            const S is = inv_std[i];
            const S* av = an->v.data() + static_cast<std::size_t>(i) * c;
            const S* gout = on->g.data() + static_cast<std::size_t>(i) * c;
            S* ga = an->g.data() + static_cast<std::size_t>(i) * c;
            // dxhat_j = gout_j * gain_j; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * is
            S mean_dxhat = 0;
            S mean_dxhat_xhat = 0;
            for (int j = 0; j < c; ++j) {
                const S xhat = (av[j] - mu) * is;
                const S dxhat = gout[j] * gn->v[j];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
                gn->g[j] += gout[j] * xhat;
                bn->g[j] += gout[j];
            }
            mean_dxhat /= S(c);
            mean_dxhat_xhat /= S(c);
            for (int j = 0; j < c; ++j) {
                const S xhat = (av[j] - mu) * is;
                ga[j] += (gout[j] * gn->v[j] - mean_dxhat - xhat * mean_dxhat_xhat) * is;
            }
        }
    };
    return out;
}

// Gather rows of table by token index.
template <class S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int>& indices) {
    const int c = table.cols();
    auto out = detail::make_op<S>(static_cast<int>(indices.size()), c, {table.node()});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const int idx = indices[i];
        if (idx < 0 || idx >= table.rows()) { throw std::invalid_argument("embedding index out of range"); }
        std::copy_n(table.values().data() + static_cast<std::size_t>(idx) * c, c,
                    out.values().data() + i * c);
    }
    auto tn = table.node();
    Node<S>* on = out.node().get();
    out.node()->backward_fn = [tn, on, indices] {
        tn->ensure_grad();
        const int c = on->cols;
        for (std::size_t i = 0; i < indices.size(); ++i) {
            S* dst = tn->g.data() + static_cast<std::size_t>(indices[i]) * c;
            const S* src = on->g.data() + i * c;
            for (int j = 0; j < c; ++j) { dst[j] += src[j]; }
        }
    };
    return out;
}

template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) { throw std::invalid_argument("concat_rows of nothing"); }
    const int c = parts[0].cols();
    int r = 0;
    std::vector<std::shared_ptr<Node<S>>> parents;
    for (const auto& p : parts) {
        if (p.cols() != c) { throw std::invalid_argument("shape mismatch in concat_rows"); }
        r += p.rows();
        parents.push_back(p.node());
    }
    auto out = detail::make_op<S>(r, c, parents);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.values().begin(), p.values().end(), out.values().begin() + off);
        off += p.size();
    }
    Node<S>* on = out.node().get();
    auto ps = parents;
    out.node()->backward_fn = [on, ps] {
        std::size_t off = 0;
        for (const auto& p : ps) {
            p->ensure_grad();
            for (std::size_t i = 0; i < p->size(); ++i) { p->g[i] += on->g[off + i]; }
            off += p->size();
        }
    };
    return out;
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& a, int r0, int r1) {
    if (r0 < 0 || r1 > a.rows() || r0 >= r1) { throw std::invalid_argument("bad slice_rows range"); }
    const int c = a.cols();
    auto out = detail::make_op<S>(r1 - r0, c, {a.node()});
    std::copy_n(a.values().data() + static_cast<std::size_t>(r0) * c,
                static_cast<std::size_t>(r1 - r0) * c, out.values().data());
    auto an = a.node();
    Node<S>* on = out.node().get();
    out.node()->backward_fn = [an, on, r0] {
        an->ensure_grad();
        const std::size_t base = static_cast<std::size_t>(r0) * on->cols;
        for (std::size_t i = 0; i < on->size(); ++i) { an->g[base + i] += on->g[i]; }
    };
    return out;
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, int c0, int c1) {
    if (c0 < 0 || c1 > a.cols() || c0 >= c1) { throw std::invalid_argument("bad slice_cols range"); }
    auto out = detail::make_op<S>(a.rows(), c1 - c0, {a.node()});
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = c0; j < c1; ++j) { out.at(i, j - c0) = a.at(i, j); }
    }
    auto an = a.node();
    Node<S>* on = out.node().get();
    out.node()->backward_fn = [an, on, c0] {
        an->ensure_grad();
        const int ac = an->cols;
        for (int i = 0; i < on->rows; ++i) {
            for (int j = 0; j < on->cols; ++j) {
                an->g[static_cast<std::size_t>(i) * ac + c0 + j] +=
                    on->g[static_cast<std::size_t>(i) * on->cols + j];
            }
        }
    };
    return out;
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
    auto out = detail::make_op<S>(a.cols(), a.rows(), {a.node()});
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < a.cols(); ++j) { out.at(j, i) = a.at(i, j); }
    }
    auto an = a.node();
    Node<S>* on = out.node().get();
    out.node()->backward_fn = [an, on] {
        an->ensure_grad();
        const int c = an->cols;
        for (int i = 0; i < on->rows; ++i) {
            for (int j = 0; j < on->cols; ++j) {
                an->g[static_cast<std::size_t>(j) * c + i] +=
                    on->g[static_cast<std::size_t>(i) * on->cols + j];
            }
        }
    };
    return out;
}

// Mean negative log-likelihood over rows whose label != ignore_index.
// Ignored rows contribute exactly zero loss and zero gradient.
template <class S>
Tensor<S> cross_entropy_rows(const Tensor<S>& logits, const std::vector<int>& labels,
                             int ignore_index = -1) {
    if (static_cast<int>(labels.size()) != logits.rows()) {
        throw std::invalid_argument("cross_entropy: label count != logit rows");
    }
    const int c = logits.cols();
    auto out = detail::make_op<S>(1, 1, {logits.node()});
    int valid = 0;
    S loss = 0;
    std::vector<S> probs(logits.size(), S(0));
    for (int i = 0; i < logits.rows(); ++i) {
        if (labels[i] == ignore_index) { continue; }
        if (labels[i] < 0 || labels[i] >= c) { throw std::invalid_argument("cross_entropy: label out of range"); }
        const S* row = logits.values().data() + static_cast<std::size_t>(i) * c;
        S mx = row[0];
        for (int j = 1; j < c; ++j) { mx = std::max(mx, row[j]); }
        S z = 0;
        for (int j = 0; j < c; ++j) { z += std::exp(row[j] - mx); }
        const S logz = std::log(z) + mx;
        loss += logz - row[labels[i]];
        S* prow = probs.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) { prow[j] = std::exp(row[j] - logz); }
        ++valid;
    }
    if (valid == 0) { throw std::invalid_argument("cross_entropy: no non-ignored labels"); }
    out.values()[0] = loss / S(valid);
    auto ln = logits.node();
    Node<S>* on = out.node().get();
    out.node()->backward_fn = [ln, on, labels, probs, valid, ignore_index] {
        ln->ensure_grad();
        const int c = ln->cols;
        const S gs = on->g[0] / S(valid);
        for (int i = 0; i < ln->rows; ++i) {
            if (labels[i] == ignore_index) { continue; }
            const S* prow = probs.data() + static_cast<std::size_t>(i) * c;
            S* grow = ln->g.data() + static_cast<std::size_t>(i) * c;
            for (int j = 0; j < c; ++j) {
                grow[j] += gs * (prow[j] - (j == labels[i] ? S(1) : S(0)));
            }
        }
    };
    return out;
}

// Fused multi-head scaled dot-product attention for one sequence.
// q: (Lq x d), k/v: (Lk x d); d divisible by n_heads. key_valid marks which
// key positions participate (PAD masking); causal restricts row i to keys
// j <= i (self-attention framing, requires Lq == Lk).
template <class S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, int n_heads,
                    const std::vector<char>& key_valid, bool causal) {
    const int d = q.cols();
    if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
        throw std::invalid_argument("shape mismatch in attention");
    }
    if (d % n_heads != 0) { throw std::invalid_argument("attention: d not divisible by heads"); }
    if (!key_valid.empty() && static_cast<int>(key_valid.size()) != k.rows()) {
        throw std::invalid_argument("attention: key mask length mismatch");
    }
    if (causal && q.rows() != k.rows()) {
        throw std::invalid_argument("attention: causal requires Lq == Lk");
    }
    const int lq = q.rows();
    const int lk = k.rows();
    const int dh = d / n_heads;
    const S sc = S(1) / std::sqrt(S(dh));
    auto out = detail::make_op<S>(lq, d, {q.node(), k.node(), v.node()});
    // probabilities saved per head for backward: n_heads * lq * lk
    auto probs = std::make_shared<std::vector<S>>(
        static_cast<std::size_t>(n_heads) * lq * lk, S(0));
    for (int h = 0; h < n_heads; ++h) {
        const int co = h * dh;
        for (int i = 0; i < lq; ++i) {
            S* prow = probs->data() + (static_cast<std::size_t>(h) * lq + i) * lk;
            S mx = -std::numeric_limits<S>::infinity();
            for (int j = 0; j < lk; ++j) {
                if (causal && j > i) { continue; }
                if (!key_valid.empty() && !key_valid[j]) { continue; }
                S s = 0;
                for (int t = 0; t < dh; ++t) { s += q.at(i, co + t) * k.at(j, co + t); }
                s *= sc;
                prow[j] = s;
                mx = std::max(mx, s);
            }
            if (mx == -std::numeric_limits<S>::infinity()) {
                throw std::invalid_argument("attention: row with no valid keys");
            }
            S z = 0;
            for (int j = 0; j < lk; ++j) {
                const bool masked = (causal && j > i) || (!key_valid.empty() && !key_valid[j]);
                prow[j] = masked ? S(0) : std::exp(prow[j] - mx);
                z += prow[j];
            }
            for (int j = 0; j < lk; ++j) { prow[j] /= z; }
            for (int t = 0; t < dh; ++t) {
                S acc = 0;
                for (int j = 0; j < lk; ++j) { acc += prow[j] * v.at(j, co + t); }
                out.at(i, co + t) = acc;
            }
        }
    }
    auto qn = q.node();
    auto kn = k.node();
    auto vn = v.node();
    Node<S>* on = out.node().get();
    out.node()->backward_fn = [qn, kn, vn, on, probs, n_heads, sc] {
        qn->ensure_grad();
        kn->ensure_grad();
        vn->ensure_grad();
        const int d = qn->cols;
        const int dh = d / n_heads;
        const int lq = qn->rows;
        const int lk = kn->rows;
        std::vector<S> ds(lk);
        for (int h = 0; h < n_heads; ++h) {
            const int co = h * dh;
            for (int i = 0; i < lq; ++i) {
                const S* prow = probs->data() + (static_cast<std::size_t>(h) * lq + i) * lk;
                const S* go = on->g.data() + static_cast<std::size_t>(i) * d + co;
                // dV and dA
                S dot = 0;
                for (int j = 0; j < lk; ++j) {
                    if (prow[j] == S(0)) { ds[j] = 0; continue; }
                    S da = 0;
                    const S* vj = vn->v.data() + static_cast<std::size_t>(j) * d + co;
                    S* gvj = vn->g.data() + static_cast<std::size_t>(j) * d + co;
                    for (int t = 0; t < dh; ++t) {
                        da += go[t] * vj[t];
                        gvj[t] += prow[j] * go[t];
                    }
                    ds[j] = da;
                    dot += prow[j] * da;
                }
                for (int j = 0; j < lk; ++j) {
                    if (prow[j] == S(0)) { continue; }
                    const S dscore = prow[j] * (ds[j] - dot) * sc;
                    const S* kj = kn->v.data() + static_cast<std::size_t>(j) * d + co;
                    const S* qi = qn->v.data() + static_cast<std::size_t>(i) * d + co;
                    S* gq = qn->g.data() + static_cast<std::size_t>(i) * d + co;
                    S* gk = kn->g.data() + static_cast<std::size_t>(j) * d + co;
                    for (int t = 0; t < dh; ++t) {
                        gq[t] += dscore * kj[t];
                        gk[t] += dscore * qi[t];
                    }
                }
            }
        }
    };
    return out;
}

// X - (X u) u^T for a unit row vector u (1 x d). The projection itself is
// treated as constant: gradients flow to X only.
template <class S>
Tensor<S> project_out(const Tensor<S>& x, const Tensor<S>& u) {
    detail::require_shape(u, 1, x.cols(), "project_out direction");
    const int d = x.cols();
    auto out = detail::make_op<S>(x.rows(), d, {x.node()});
    for (int i = 0; i < x.rows(); ++i) {
        S dot = 0;
        for (int j = 0; j < d; ++j) { dot += x.at(i, j) * u.at(0, j); }
        for (int j = 0; j < d; ++j) { out.at(i, j) = x.at(i, j) - dot * u.at(0, j); }
    }
    auto xn = x.node();
    Node<S>* on = out.node().get();
    const std::vector<S> uv = u.values();
    out.node()->backward_fn = [xn, on, uv] {
        xn->ensure_grad();
        const int d = xn->cols;
        for (int i = 0; i < xn->rows; ++i) {
            const S* go = on->g.data() + static_cast<std::size_t>(i) * d;
            S dot = 0;
            for (int j = 0; j < d; ++j) { dot += go[j] * uv[j]; }
            S* gx = xn->g.data() + static_cast<std::size_t>(i) * d;
            for (int j = 0; j < d; ++j) { gx[j] += go[j] - dot * uv[j]; }
        }
    };
    return out;
}

// Reverse-mode sweep from a scalar loss. Visits each recorded node exactly
// once in reverse topological order. A second sweep on the same loss without
// rebuilding the graph is rejected.
template <class S>
void backward(const Tensor<S>& loss) {
    if (loss.size() != 1) { throw std::invalid_argument("backward requires a scalar loss"); }
    auto root = loss.node();
    if (root->backward_done) { throw std::logic_error("backward already run on this graph"); }
    root->backward_done = true;

    std::vector<Node<S>*> order;
    std::vector<std::pair<Node<S>*, std::size_t>> stack;
    std::vector<Node<S>*> visited;
    auto is_visited = [&](Node<S>* n) {
        return std::find(visited.begin(), visited.end(), n) != visited.end();
    };
    // iterative DFS; visited tracked in a flat vector (graphs are small)
    stack.emplace_back(root.get(), 0);
    visited.push_back(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<S>* p = node->parents[idx].get();
            ++idx;
            if (!is_visited(p)) {
                visited.push_back(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->g[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn && (*it)->requires_grad) {
            (*it)->ensure_grad();
            (*it)->backward_fn();
        }
    }
}

// Finite-difference gradient verification report.
struct GradCheckReport {
    double max_rel_err{0.0};
    int checked{0};
    bool ok(double tol) const { return checked == 0 || max_rel_err < tol; }
};

// Compares analytic gradients of loss_builder() against central differences
// on a random subsample of parameter coordinates. loss_builder must be
// deterministic and re-runnable (it is invoked twice per sampled coordinate).
template <class S, class F>
GradCheckReport finite_diff_check(F&& loss_builder, const std::vector<Tensor<S>>& params, Rng& rng,
                                  int coords_to_check, S step = S(1e-3)) {
    GradCheckReport report;
    if (params.empty()) { return report; }
    for (auto& p : params) {
        const_cast<Tensor<S>&>(p).zero_grad();
    }
    Tensor<S> loss = loss_builder();
    backward(loss);
    std::vector<std::vector<S>> analytic;
    for (const auto& p : params) { analytic.push_back(p.grad()); }

    std::size_t total = 0;
    for (const auto& p : params) { total += p.size(); }
    if (total == 0) { return report; }
    for (int c = 0; c < coords_to_check; ++c) {
        std::size_t flat = rng.below(total);
        std::size_t pi = 0;
        while (flat >= params[pi].size()) {
            flat -= params[pi].size();
            ++pi;
        }
        auto& vals = const_cast<Tensor<S>&>(params[pi]).values();
        const S saved = vals[flat];
        vals[flat] = saved + step;
        const S fp = loss_builder().item();
        vals[flat] = saved - step;
        const S fm = loss_builder().item();
        vals[flat] = saved;
        const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) /
                               (2.0 * static_cast<double>(step));
        const double a = static_cast<double>(analytic[pi][flat]);
        const double denom = std::max(std::abs(a) + std::abs(numeric), 1e-3);
        const double rel = std::abs(a - numeric) / denom;
        report.max_rel_err = std::max(report.max_rel_err, rel);
        ++report.checked;
    }
    return report;
}

}  // namespace clab
