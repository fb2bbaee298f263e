// Differentiable primitives over Tensor<T>.
//
// Conventions:
//  - every op copies its inputs into a fresh result buffer (no views),
//  - backward closures accumulate additively into parent grads,
//  - parallel loops partition disjoint output ranges so results are
//    bitwise identical for any thread count,
//  - reductions always run in a fixed index order.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "rvernet/tensor.hpp"
#include "rvernet/threadpool.hpp"

namespace rvernet {

namespace detail {

inline int64_t prod(const std::vector<int64_t>& v, size_t from, size_t to) {
    int64_t p = 1;
    for (size_t i = from; i < to; ++i) p *= v[i];
    return p;
}

// Dot product with four independent accumulation chains (fixed order).
template <typename T>
T dot4(const T* a, const T* b, int64_t n) {
    T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    int64_t k = 0;
    for (; k + 4 <= n; k += 4) {
        s0 += a[k] * b[k];
        s1 += a[k + 1] * b[k + 1];
        s2 += a[k + 2] * b[k + 2];
        s3 += a[k + 3] * b[k + 3];
    }
    for (; k < n; ++k) s0 += a[k] * b[k];
    return (s0 + s1) + (s2 + s3);
}

template <typename T>
void axpy(T* y, T a, const T* x, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

}  // namespace detail

// ---- elementwise ----

// b's shape must equal a trailing suffix of a's shape (bias-style broadcast).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    auto an = a.node();
    auto bn = b.node();
    size_t ad = an->shape.size(), bd = bn->shape.size();
    RV_CHECK_DIM(bd <= ad, "add: rhs rank ", bd, " exceeds lhs rank ", ad);
    for (size_t i = 0; i < bd; ++i)
        RV_CHECK_DIM(bn->shape[i] == an->shape[ad - bd + i], "add: rhs ", shape_str(bn->shape),
                     " is not a suffix of lhs ", shape_str(an->shape));
    int64_t nb = bn->numel();
    int64_t rep = an->numel() / nb;
    std::vector<T> out(an->data.size());
    for (int64_t r = 0; r < rep; ++r) {
        const T* pa = an->data.data() + r * nb;
        T* po = out.data() + r * nb;
        const T* pb = bn->data.data();
        for (int64_t i = 0; i < nb; ++i) po[i] = pa[i] + pb[i];
    }
    return detail::make_op_result<T>(
        "add", an->shape, std::move(out), {an, bn}, [an, bn, rep, nb](TensorNode<T>& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t r = 0; r < rep; ++r) {
                    const T* pg = self.grad.data() + r * nb;
                    for (int64_t i = 0; i < nb; ++i) bn->grad[i] += pg[i];
                }
            }
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    auto an = a.node();
    auto bn = b.node();
    RV_CHECK_DIM(an->shape == bn->shape, "mul: shape mismatch ", shape_str(an->shape), " vs ",
                 shape_str(bn->shape));
    std::vector<T> out(an->data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = an->data[i] * bn->data[i];
    return detail::make_op_result<T>(
        "mul", an->shape, std::move(out), {an, bn}, [an, bn](TensorNode<T>& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    an->grad[i] += self.grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    bn->grad[i] += self.grad[i] * an->data[i];
            }
        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    auto an = a.node();
    std::vector<T> out(an->data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = an->data[i] * s;
    return detail::make_op_result<T>("scale", an->shape, std::move(out), {an},
                                     [an, s](TensorNode<T>& self) {
                                         if (!an->requires_grad) return;
                                         an->ensure_grad();
                                         for (size_t i = 0; i < self.grad.size(); ++i)
                                             an->grad[i] += self.grad[i] * s;
                                     });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return scale(a, T(-1));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    auto an = a.node();
    std::vector<T> out(an->data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = an->data[i] > T(0) ? an->data[i] : T(0);
    return detail::make_op_result<T>("relu", an->shape, std::move(out), {an},
                                     [an](TensorNode<T>& self) {
                                         if (!an->requires_grad) return;
                                         an->ensure_grad();
                                         for (size_t i = 0; i < self.grad.size(); ++i)
                                             if (an->data[i] > T(0)) an->grad[i] += self.grad[i];
                                     });
}

// Exact form: 0.5 x (1 + erf(x / sqrt(2))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    auto an = a.node();
    const T inv_sqrt2 = T(0.7071067811865475244L);
    std::vector<T> out(an->data.size());
    for (size_t i = 0; i < out.size(); ++i) {
        T x = an->data[i];
        out[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
    }
    return detail::make_op_result<T>(
        "gelu", an->shape, std::move(out), {an}, [an, inv_sqrt2](TensorNode<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            const T inv_sqrt2pi = T(0.3989422804014326779L);
            for (size_t i = 0; i < self.grad.size(); ++i) {
                T x = an->data[i];
                T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
                T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
                an->grad[i] += self.grad[i] * (cdf + x * pdf);
            }
        });
}

// ---- shape ----

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int64_t> new_shape) {
    auto an = a.node();
    int64_t n = detail::prod(new_shape, 0, new_shape.size());
    RV_CHECK_DIM(n == an->numel(), "reshape: ", shape_str(an->shape), " has ", an->numel(),
                 " elements, target ", shape_str(new_shape), " has ", n);
    std::vector<T> out = an->data;
    return detail::make_op_result<T>("reshape", std::move(new_shape), std::move(out), {an},
                                     [an](TensorNode<T>& self) {
                                         if (!an->requires_grad) return;
                                         an->ensure_grad();
                                         for (size_t i = 0; i < self.grad.size(); ++i)
                                             an->grad[i] += self.grad[i];
                                     });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, std::vector<int> perm) {
    auto an = a.node();
    int nd = (int)an->shape.size();
    RV_CHECK_DIM((int)perm.size() == nd, "permute: got ", perm.size(), " axes for rank ", nd);
    std::vector<bool> seen(nd, false);
    std::vector<int64_t> out_shape(nd);
    for (int i = 0; i < nd; ++i) {
        RV_CHECK_DIM(perm[i] >= 0 && perm[i] < nd && !seen[perm[i]],
                     "permute: invalid axis list");
        seen[perm[i]] = true;
        out_shape[i] = an->shape[perm[i]];
    }
    std::vector<int64_t> in_strides(nd, 1), out_strides(nd, 1);
    for (int i = nd - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * an->shape[i + 1];
    for (int i = nd - 2; i >= 0; --i) out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    // step[i]: input stride of output axis i.
    std::vector<int64_t> step(nd);
    for (int i = 0; i < nd; ++i) step[i] = in_strides[perm[i]];

    int64_t n = an->numel();
    std::vector<T> out((size_t)n);
    std::vector<int64_t> idx(nd, 0);
    int64_t src = 0;
    for (int64_t o = 0; o < n; ++o) {
        out[(size_t)o] = an->data[(size_t)src];
        for (int ax = nd - 1; ax >= 0; --ax) {
            src += step[ax];
            if (++idx[ax] < out_shape[ax]) break;
            idx[ax] = 0;
            src -= step[ax] * out_shape[ax];
        }
    }
    return detail::make_op_result<T>(
        "permute", std::move(out_shape), std::move(out), {an},
        [an, step, shp = an->shape, nd](TensorNode<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            std::vector<int64_t> idx(nd, 0);
            int64_t src = 0;
            int64_t n = (int64_t)self.grad.size();
            for (int64_t o = 0; o < n; ++o) {
                an->grad[(size_t)src] += self.grad[(size_t)o];
                for (int ax = nd - 1; ax >= 0; --ax) {
                    src += step[ax];
                    if (++idx[ax] < self.shape[ax]) break;
                    idx[ax] = 0;
                    src -= step[ax] * self.shape[ax];
                }
            }
        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    RV_CHECK_DIM(!parts.empty(), "concat: no inputs");
    auto& shape0 = parts[0].shape();
    int nd = (int)shape0.size();
    if (axis < 0) axis += nd;
    RV_CHECK_DIM(axis >= 0 && axis < nd, "concat: axis out of range");
    std::vector<int64_t> out_shape = shape0;
    out_shape[axis] = 0;
    for (auto& p : parts) {
        RV_CHECK_DIM((int)p.shape().size() == nd, "concat: rank mismatch");
        for (int i = 0; i < nd; ++i)
            RV_CHECK_DIM(i == axis || p.shape()[i] == shape0[i], "concat: shape mismatch ",
                         shape_str(p.shape()), " vs ", shape_str(shape0));
        out_shape[axis] += p.shape()[axis];
    }
    int64_t pre = detail::prod(out_shape, 0, (size_t)axis);
    int64_t post = detail::prod(out_shape, (size_t)axis + 1, out_shape.size());
    int64_t out_row = out_shape[axis] * post;

    std::vector<T> out((size_t)(pre * out_row));
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    std::vector<int64_t> blocks;
    for (auto& p : parts) {
        nodes.push_back(p.node());
        blocks.push_back(p.shape()[axis] * post);
    }
    for (int64_t r = 0; r < pre; ++r) {
        int64_t off = r * out_row;
        for (size_t pi = 0; pi < nodes.size(); ++pi) {
            const T* src = nodes[pi]->data.data() + r * blocks[pi];
            std::copy(src, src + blocks[pi], out.data() + off);
            off += blocks[pi];
        }
    }
    return detail::make_op_result<T>(
        "concat", std::move(out_shape), std::move(out), nodes,
        [nodes, blocks, pre, out_row](TensorNode<T>& self) {
            for (size_t pi = 0; pi < nodes.size(); ++pi) {
                if (!nodes[pi]->requires_grad) continue;
                nodes[pi]->ensure_grad();
            }
            for (int64_t r = 0; r < pre; ++r) {
                int64_t off = r * out_row;
                for (size_t pi = 0; pi < nodes.size(); ++pi) {
                    if (nodes[pi]->requires_grad) {
                        T* dst = nodes[pi]->grad.data() + r * blocks[pi];
                        const T* src = self.grad.data() + off;
                        for (int64_t i = 0; i < blocks[pi]; ++i) dst[i] += src[i];
                    }
                    off += blocks[pi];
                }
            }
        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int64_t start, int64_t len) {
    auto an = a.node();
    int nd = (int)an->shape.size();
    if (axis < 0) axis += nd;
    RV_CHECK_DIM(axis >= 0 && axis < nd, "slice: axis out of range");
    RV_CHECK_DIM(start >= 0 && len > 0 && start + len <= an->shape[axis], "slice: range [",
                 start, ", ", start + len, ") outside axis of size ", an->shape[axis]);
    int64_t pre = detail::prod(an->shape, 0, (size_t)axis);
    int64_t post = detail::prod(an->shape, (size_t)axis + 1, an->shape.size());
    int64_t in_row = an->shape[axis] * post;
    int64_t out_row = len * post;

    std::vector<int64_t> out_shape = an->shape;
    out_shape[axis] = len;
    std::vector<T> out((size_t)(pre * out_row));
    for (int64_t r = 0; r < pre; ++r) {
        const T* src = an->data.data() + r * in_row + start * post;
        std::copy(src, src + out_row, out.data() + r * out_row);
    }
    return detail::make_op_result<T>(
        "slice", std::move(out_shape), std::move(out), {an},
        [an, pre, post, in_row, out_row, start](TensorNode<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (int64_t r = 0; r < pre; ++r) {
                T* dst = an->grad.data() + r * in_row + start * post;
                const T* src = self.grad.data() + r * out_row;
                for (int64_t i = 0; i < out_row; ++i) dst[i] += src[i];
            }
        });
}

// Prepends a new leading axis of size n holding n copies of a.
template <typename T>
Tensor<T> broadcast_axis0(const Tensor<T>& a, int64_t n) {
    auto an = a.node();
    RV_CHECK_DIM(n > 0, "broadcast_axis0: n must be positive");
    int64_t m = an->numel();
    std::vector<int64_t> out_shape;
    out_shape.push_back(n);
    for (int64_t d : an->shape) out_shape.push_back(d);
    std::vector<T> out((size_t)(n * m));
    for (int64_t r = 0; r < n; ++r)
        std::copy(an->data.begin(), an->data.end(), out.begin() + r * m);
    return detail::make_op_result<T>("broadcast_axis0", std::move(out_shape), std::move(out),
                                     {an}, [an, n, m](TensorNode<T>& self) {
                                         if (!an->requires_grad) return;
                                         an->ensure_grad();
                                         for (int64_t r = 0; r < n; ++r) {
                                             const T* src = self.grad.data() + r * m;
                                             for (int64_t i = 0; i < m; ++i)
                                                 an->grad[i] += src[i];
                                         }
                                     });
}

// ---- reductions ----

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a, int axis) {
    auto an = a.node();
    int nd = (int)an->shape.size();
    if (axis < 0) axis += nd;
    RV_CHECK_DIM(axis >= 0 && axis < nd, "reduce_mean: axis out of range");
    int64_t pre = detail::prod(an->shape, 0, (size_t)axis);
    int64_t n = an->shape[axis];
    int64_t post = detail::prod(an->shape, (size_t)axis + 1, an->shape.size());

    std::vector<int64_t> out_shape;
    for (int i = 0; i < nd; ++i)
        if (i != axis) out_shape.push_back(an->shape[i]);
    if (out_shape.empty()) out_shape.push_back(1);

    std::vector<T> out((size_t)(pre * post), T(0));
    const T inv_n = T(1) / T(n);
    for (int64_t r = 0; r < pre; ++r) {
        const T* src = an->data.data() + r * n * post;
        T* dst = out.data() + r * post;
        for (int64_t k = 0; k < n; ++k)
            for (int64_t i = 0; i < post; ++i) dst[i] += src[k * post + i];
        for (int64_t i = 0; i < post; ++i) dst[i] *= inv_n;
    }
    return detail::make_op_result<T>(
        "reduce_mean", std::move(out_shape), std::move(out), {an},
        [an, pre, n, post, inv_n](TensorNode<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (int64_t r = 0; r < pre; ++r) {
                const T* src = self.grad.data() + r * post;
                T* dst = an->grad.data() + r * n * post;
                for (int64_t k = 0; k < n; ++k)
                    for (int64_t i = 0; i < post; ++i) dst[k * post + i] += src[i] * inv_n;
            }
        });
}

template <typename T>
Tensor<T> reduce_sum_all(const Tensor<T>& a) {
    auto an = a.node();
    T s0 = 0;
    for (T v : an->data) s0 += v;
    return detail::make_op_result<T>("reduce_sum_all", {1}, {s0}, {an},
                                     [an](TensorNode<T>& self) {
                                         if (!an->requires_grad) return;
                                         an->ensure_grad();
                                         T g = self.grad[0];
                                         for (size_t i = 0; i < an->grad.size(); ++i)
                                             an->grad[i] += g;
                                     });
}

// ---- normalization and attention pieces ----

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
    auto an = a.node();
    RV_CHECK_DIM(!an->shape.empty(), "softmax: rank-0 input");
    int64_t d = an->shape.back();
    int64_t rows = an->numel() / d;
    std::vector<T> out(an->data.size());
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = an->data.data() + r * d;
        T* y = out.data() + r * d;
        T m = x[0];
        for (int64_t i = 1; i < d; ++i) m = std::max(m, x[i]);
        T z = 0;
        for (int64_t i = 0; i < d; ++i) {
            y[i] = std::exp(x[i] - m);
            z += y[i];
        }
        T inv = T(1) / z;
        for (int64_t i = 0; i < d; ++i) y[i] *= inv;
    }
    return detail::make_op_result<T>(
        "softmax", an->shape, std::move(out), {an}, [an, rows, d](TensorNode<T>& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const T* s = self.data.data() + r * d;
                const T* g = self.grad.data() + r * d;
                T* dst = an->grad.data() + r * d;
                T inner = 0;
                for (int64_t i = 0; i < d; ++i) inner += g[i] * s[i];
                for (int64_t i = 0; i < d; ++i) dst[i] += s[i] * (g[i] - inner);
            }
        });
}

// Normalizes over the last axis; gain/bias have that axis's length.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
    auto xn = x.node();
    auto gn = gain.node();
    auto bn = bias.node();
    RV_CHECK_DIM(!xn->shape.empty(), "layer_norm: rank-0 input");
    int64_t d = xn->shape.back();
    RV_CHECK_DIM(gn->shape == std::vector<int64_t>{d} && bn->shape == std::vector<int64_t>{d},
                 "layer_norm: gain/bias must have shape [", d, "]");
    int64_t rows = xn->numel() / d;
    std::vector<T> out(xn->data.size());
    std::vector<T> rstd((size_t)rows), mean((size_t)rows);
    const T inv_d = T(1) / T(d);
    for (int64_t r = 0; r < rows; ++r) {
        const T* px = xn->data.data() + r * d;
        T mu = 0;
        for (int64_t i = 0; i < d; ++i) mu += px[i];
        mu *= inv_d;
        T var = 0;
        for (int64_t i = 0; i < d; ++i) {
            T c = px[i] - mu;
            var += c * c;
        }
        var *= inv_d;
        T rs = T(1) / std::sqrt(var + eps);
        mean[(size_t)r] = mu;
        rstd[(size_t)r] = rs;
        T* py = out.data() + r * d;
        for (int64_t i = 0; i < d; ++i)
            py[i] = (px[i] - mu) * rs * gn->data[(size_t)i] + bn->data[(size_t)i];
    }
    return detail::make_op_result<T>(
        "layer_norm", xn->shape, std::move(out), {xn, gn, bn},
        [xn, gn, bn, rows, d, inv_d, mean = std::move(mean),
         rstd = std::move(rstd)](TensorNode<T>& self) {
            if (xn->requires_grad) xn->ensure_grad();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const T* px = xn->data.data() + r * d;
                const T* g = self.grad.data() + r * d;
                T mu = mean[(size_t)r], rs = rstd[(size_t)r];
                if (gn->requires_grad || bn->requires_grad) {
                    for (int64_t i = 0; i < d; ++i) {
                        T xhat = (px[i] - mu) * rs;
                        if (gn->requires_grad) gn->grad[(size_t)i] += g[i] * xhat;
                        if (bn->requires_grad) bn->grad[(size_t)i] += g[i];
                    }
                }
                if (xn->requires_grad) {
                    T sum_gg = 0, sum_ggx = 0;
                    for (int64_t i = 0; i < d; ++i) {
                        T gg = g[i] * gn->data[(size_t)i];
                        T xhat = (px[i] - mu) * rs;
                        sum_gg += gg;
                        sum_ggx += gg * xhat;
                    }
                    sum_gg *= inv_d;
                    sum_ggx *= inv_d;
                    T* dst = xn->grad.data() + r * d;
                    for (int64_t i = 0; i < d; ++i) {
                        T gg = g[i] * gn->data[(size_t)i];
                        T xhat = (px[i] - mu) * rs;
                        dst[i] += rs * (gg - sum_gg - xhat * sum_ggx);
                    }
                }
            }
        });
}

// ---- dense / matmul ----

// x: [..., Din], weight: [Dout, Din], bias: [Dout] or undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    auto xn = x.node();
    auto wn = weight.node();
    RV_CHECK_DIM(wn->shape.size() == 2, "linear: weight must be rank 2, got ",
                 shape_str(wn->shape));
    int64_t dout = wn->shape[0], din = wn->shape[1];
    RV_CHECK_DIM(!xn->shape.empty() && xn->shape.back() == din, "linear: input ",
                 shape_str(xn->shape), " does not end in ", din);
    std::shared_ptr<TensorNode<T>> bnode;
    if (bias.defined()) {
        bnode = bias.node();
        RV_CHECK_DIM(bnode->shape == std::vector<int64_t>{dout},
                     "linear: bias must have shape [", dout, "]");
    }
    int64_t m = xn->numel() / din;
    std::vector<int64_t> out_shape(xn->shape.begin(), xn->shape.end() - 1);
    out_shape.push_back(dout);

    std::vector<T> out((size_t)(m * dout));
    {
        const T* px = xn->data.data();
        const T* pw = wn->data.data();
        const T* pb = bnode ? bnode->data.data() : nullptr;
        T* po = out.data();
        parallel_for(m, [&](int64_t r0, int64_t r1) {
            for (int64_t r = r0; r < r1; ++r) {
                const T* xr = px + r * din;
                T* yr = po + r * dout;
                for (int64_t o = 0; o < dout; ++o)
                    yr[o] = detail::dot4(xr, pw + o * din, din) + (pb ? pb[o] : T(0));
            }
        });
    }
    std::vector<std::shared_ptr<TensorNode<T>>> parents{xn, wn};
    if (bnode) parents.push_back(bnode);
    return detail::make_op_result<T>(
        "linear", std::move(out_shape), std::move(out), std::move(parents),
        [xn, wn, bnode, m, din, dout](TensorNode<T>& self) {
            const T* g = self.grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                T* gx = xn->grad.data();
                const T* pw = wn->data.data();
                parallel_for(m, [&](int64_t r0, int64_t r1) {
                    for (int64_t r = r0; r < r1; ++r) {
                        const T* gr = g + r * dout;
                        T* dst = gx + r * din;
                        for (int64_t o = 0; o < dout; ++o)
                            detail::axpy(dst, gr[o], pw + o * din, din);
                    }
                });
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                T* gw = wn->grad.data();
                const T* px = xn->data.data();
                parallel_for(dout, [&](int64_t o0, int64_t o1) {
                    for (int64_t o = o0; o < o1; ++o) {
                        T* dst = gw + o * din;
                        for (int64_t r = 0; r < m; ++r)
                            detail::axpy(dst, g[r * dout + o], px + r * din, din);
                    }
                });
            }
            if (bnode && bnode->requires_grad) {
                bnode->ensure_grad();
                for (int64_t r = 0; r < m; ++r)
                    for (int64_t o = 0; o < dout; ++o) bnode->grad[(size_t)o] += g[r * dout + o];
            }
        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight) {
    return linear(x, weight, Tensor<T>());
}

// a: [B, M, K], b: [B, K, N] -> [B, M, N].
template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b) {
    auto an = a.node();
    auto bn = b.node();
    RV_CHECK_DIM(an->shape.size() == 3 && bn->shape.size() == 3,
                 "batched_matmul: need rank-3 inputs, got ", shape_str(an->shape), " and ",
                 shape_str(bn->shape));
    int64_t B = an->shape[0], M = an->shape[1], K = an->shape[2], N = bn->shape[2];
    RV_CHECK_DIM(bn->shape[0] == B && bn->shape[1] == K, "batched_matmul: ",
                 shape_str(an->shape), " x ", shape_str(bn->shape), " do not chain");
    std::vector<T> out((size_t)(B * M * N), T(0));
    {
        const T* pa = an->data.data();
        const T* pb = bn->data.data();
        T* po = out.data();
        parallel_for(B * M, [&](int64_t r0, int64_t r1) {
            for (int64_t r = r0; r < r1; ++r) {
                int64_t bi = r / M, mi = r % M;
                const T* ar = pa + (bi * M + mi) * K;
                const T* bb = pb + bi * K * N;
                T* yr = po + r * N;
                for (int64_t k = 0; k < K; ++k) detail::axpy(yr, ar[k], bb + k * N, N);
            }
        });
    }
    return detail::make_op_result<T>(
        "batched_matmul", {B, M, N}, std::move(out), {an, bn},
        [an, bn, B, M, K, N](TensorNode<T>& self) {
            const T* g = self.grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                T* ga = an->grad.data();
                const T* pb = bn->data.data();
                parallel_for(B * M, [&](int64_t r0, int64_t r1) {
                    for (int64_t r = r0; r < r1; ++r) {
                        int64_t bi = r / M;
                        const T* gr = g + r * N;
                        const T* bb = pb + bi * K * N;
                        T* dst = ga + r * K;
                        for (int64_t k = 0; k < K; ++k)
                            dst[k] += detail::dot4(gr, bb + k * N, N);
                    }
                });
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                T* gb = bn->grad.data();
                const T* pa = an->data.data();
                parallel_for(B, [&](int64_t b0, int64_t b1) {
                    for (int64_t bi = b0; bi < b1; ++bi) {
                        const T* ab = pa + bi * M * K;
                        const T* gbatch = g + bi * M * N;
                        T* dst = gb + bi * K * N;
                        for (int64_t mi = 0; mi < M; ++mi)
                            for (int64_t k = 0; k < K; ++k)
                                detail::axpy(dst + k * N, ab[mi * K + k], gbatch + mi * N, N);
                    }
                });
            }
        });
}

// ---- convolution ----

enum class PadMode { Zero, Circular };

// x: [B, Cin, H, W], w: [Cout, Cin/groups, KH, KW], bias: [Cout] or undefined.
// Output spatial size: (H + 2 pad - KH) / stride + 1 (floor).
// Circular mode wraps indices instead of reading zeros.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int pad, PadMode mode = PadMode::Zero, int groups = 1) {
    auto xn = x.node();
    auto wn = w.node();
    RV_CHECK_DIM(xn->shape.size() == 4 && wn->shape.size() == 4,
                 "conv2d: need rank-4 input and weight, got ", shape_str(xn->shape), " and ",
                 shape_str(wn->shape));
    int64_t B = xn->shape[0], Cin = xn->shape[1], H = xn->shape[2], W = xn->shape[3];
    int64_t Cout = wn->shape[0], Cg = wn->shape[1], KH = wn->shape[2], KW = wn->shape[3];
    RV_CHECK_DIM(stride >= 1 && pad >= 0 && groups >= 1, "conv2d: bad stride/pad/groups");
    RV_CHECK_DIM(Cin % groups == 0 && Cout % groups == 0 && Cg == Cin / groups,
                 "conv2d: channels ", Cin, "->", Cout, " incompatible with groups=", groups,
                 " and weight ", shape_str(wn->shape));
    int64_t OH = (H + 2 * pad - KH) / stride + 1;
    int64_t OW = (W + 2 * pad - KW) / stride + 1;
    RV_CHECK_DIM(OH > 0 && OW > 0, "conv2d: kernel ", KH, "x", KW, " too large for input ",
                 shape_str(xn->shape), " with pad ", pad);
    std::shared_ptr<TensorNode<T>> bnode;
    if (bias.defined()) {
        bnode = bias.node();
        RV_CHECK_DIM(bnode->shape == std::vector<int64_t>{Cout},
                     "conv2d: bias must have shape [", Cout, "]");
    }
    const bool circ = mode == PadMode::Circular;
    const int64_t cpg = Cout / groups;

    std::vector<T> out((size_t)(B * Cout * OH * OW));
    {
        const T* px = xn->data.data();
        const T* pw = wn->data.data();
        const T* pb = bnode ? bnode->data.data() : nullptr;
        T* po = out.data();
        parallel_for(B * Cout, [&](int64_t p0, int64_t p1) {
            for (int64_t p = p0; p < p1; ++p) {
                int64_t b = p / Cout, co = p % Cout;
                int64_t g = co / cpg;
                T* plane = po + p * OH * OW;
                std::fill(plane, plane + OH * OW, pb ? pb[co] : T(0));
                for (int64_t cg = 0; cg < Cg; ++cg) {
                    int64_t ci = g * Cg + cg;
                    const T* xch = px + (b * Cin + ci) * H * W;
                    const T* wch = pw + (co * Cg + cg) * KH * KW;
                    for (int64_t kh = 0; kh < KH; ++kh)
                        for (int64_t kw = 0; kw < KW; ++kw) {
                            T wv = wch[kh * KW + kw];
                            for (int64_t oh = 0; oh < OH; ++oh) {
                                int64_t ih = oh * stride + kh - pad;
                                if (circ) ih = ((ih % H) + H) % H;
                                else if (ih < 0 || ih >= H) continue;
                                const T* xrow = xch + ih * W;
                                T* orow = plane + oh * OW;
                                if (stride == 1) {
                                    int64_t shift = kw - pad;
                                    int64_t lo = std::max<int64_t>(0, -shift);
                                    int64_t hi = std::min<int64_t>(OW, W - shift);
                                    if (circ) {
                                        for (int64_t ow = 0; ow < lo; ++ow)
                                            orow[ow] += wv * xrow[(((ow + shift) % W) + W) % W];
                                        for (int64_t ow = std::max<int64_t>(lo, hi); ow < OW;
                                             ++ow)
                                            orow[ow] += wv * xrow[(((ow + shift) % W) + W) % W];
                                    }
                                    for (int64_t ow = lo; ow < hi; ++ow)
                                        orow[ow] += wv * xrow[ow + shift];
                                } else {
                                    for (int64_t ow = 0; ow < OW; ++ow) {
                                        int64_t iw = ow * stride + kw - pad;
                                        if (circ) iw = ((iw % W) + W) % W;
                                        else if (iw < 0 || iw >= W) continue;
                                        orow[ow] += wv * xrow[iw];
                                    }
                                }
                            }
                        }
                }
            }
        });
    }
    std::vector<std::shared_ptr<TensorNode<T>>> parents{xn, wn};
    if (bnode) parents.push_back(bnode);
    return detail::make_op_result<T>(
        "conv2d", {B, Cout, OH, OW}, std::move(out), std::move(parents),
        [xn, wn, bnode, B, Cin, H, W, Cout, Cg, KH, KW, OH, OW, stride, pad, circ,
         cpg](TensorNode<T>& self) {
            const T* g = self.grad.data();
            const T* px = xn->data.data();
            const T* pw = wn->data.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                T* gx = xn->grad.data();
                parallel_for(B, [&](int64_t b0, int64_t b1) {
                    for (int64_t b = b0; b < b1; ++b)
                        for (int64_t co = 0; co < Cout; ++co) {
                            int64_t grp = co / cpg;
                            const T* gplane = g + (b * Cout + co) * OH * OW;
                            for (int64_t cg = 0; cg < Cg; ++cg) {
                                int64_t ci = grp * Cg + cg;
                                T* gxch = gx + (b * Cin + ci) * H * W;
                                const T* wch = pw + (co * Cg + cg) * KH * KW;
                                for (int64_t kh = 0; kh < KH; ++kh)
                                    for (int64_t kw = 0; kw < KW; ++kw) {
                                        T wv = wch[kh * KW + kw];
                                        for (int64_t oh = 0; oh < OH; ++oh) {
                                            int64_t ih = oh * stride + kh - pad;
                                            if (circ) ih = ((ih % H) + H) % H;
                                            else if (ih < 0 || ih >= H) continue;
                                            T* gxrow = gxch + ih * W;
                                            const T* grow = gplane + oh * OW;
                                            if (stride == 1 && !circ) {
                                                int64_t shift = kw - pad;
                                                int64_t lo = std::max<int64_t>(0, -shift);
                                                int64_t hi = std::min<int64_t>(OW, W - shift);
                                                for (int64_t ow = lo; ow < hi; ++ow)
                                                    gxrow[ow + shift] += wv * grow[ow];
                                            } else {
                                                for (int64_t ow = 0; ow < OW; ++ow) {
                                                    int64_t iw = ow * stride + kw - pad;
                                                    if (circ) iw = ((iw % W) + W) % W;
                                                    else if (iw < 0 || iw >= W) continue;
                                                    gxrow[iw] += wv * grow[ow];
                                                }
                                            }
                                        }
                                    }
                            }
                        }
                });
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                T* gw = wn->grad.data();
                parallel_for(Cout, [&](int64_t c0, int64_t c1) {
                    for (int64_t co = c0; co < c1; ++co) {
                        int64_t grp = co / cpg;
                        for (int64_t cg = 0; cg < Cg; ++cg) {
                            int64_t ci = grp * Cg + cg;
                            T* gwch = gw + (co * Cg + cg) * KH * KW;
                            for (int64_t kh = 0; kh < KH; ++kh)
                                for (int64_t kw = 0; kw < KW; ++kw) {
                                    T acc = 0;
                                    for (int64_t b = 0; b < B; ++b) {
                                        const T* gplane = g + (b * Cout + co) * OH * OW;
                                        const T* xch = px + (b * Cin + ci) * H * W;
                                        for (int64_t oh = 0; oh < OH; ++oh) {
                                            int64_t ih = oh * stride + kh - pad;
                                            if (circ) ih = ((ih % H) + H) % H;
                                            else if (ih < 0 || ih >= H) continue;
                                            const T* xrow = xch + ih * W;
                                            const T* grow = gplane + oh * OW;
                                            if (stride == 1 && !circ) {
                                                int64_t shift = kw - pad;
                                                int64_t lo = std::max<int64_t>(0, -shift);
                                                int64_t hi = std::min<int64_t>(OW, W - shift);
                                                for (int64_t ow = lo; ow < hi; ++ow)
                                                    acc += grow[ow] * xrow[ow + shift];
                                            } else {
                                                for (int64_t ow = 0; ow < OW; ++ow) {
                                                    int64_t iw = ow * stride + kw - pad;
                                                    if (circ) iw = ((iw % W) + W) % W;
                                                    else if (iw < 0 || iw >= W) continue;
                                                    acc += grow[ow] * xrow[iw];
                                                }
                                            }
                                        }
                                    }
                                    gwch[kh * KW + kw] += acc;
                                }
                        }
                    }
                });
            }
            if (bnode && bnode->requires_grad) {
                bnode->ensure_grad();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t co = 0; co < Cout; ++co) {
                        const T* gplane = g + (b * Cout + co) * OH * OW;
                        T acc = 0;
                        for (int64_t i = 0; i < OH * OW; ++i) acc += gplane[i];
                        bnode->grad[(size_t)co] += acc;
                    }
            }
        });
}

// ---- attention ----

// Scaled dot-product self-attention over tokens [N, T, D], composed from the
// primitives above so every gradient path is already covered.
// wqkv: [3D, D] (query, key, value blocks stacked), wproj: [D, D].
// With no positional information added upstream, permuting the T axis of the
// input permutes the output identically.
template <typename T>
Tensor<T> multi_head_self_attention(const Tensor<T>& tokens, const Tensor<T>& wqkv,
                                    const Tensor<T>& bqkv, const Tensor<T>& wproj,
                                    const Tensor<T>& bproj, int heads) {
    RV_CHECK_DIM(tokens.ndim() == 3, "attention: tokens must be [batch, tokens, dim], got ",
                 shape_str(tokens.shape()));
    int64_t N = tokens.dim(0), Tk = tokens.dim(1), D = tokens.dim(2);
    RV_CHECK_CFG(heads >= 1 && D % heads == 0, "attention: dim ", D,
                 " not divisible by heads ", heads);
    RV_CHECK_DIM((wqkv.shape() == std::vector<int64_t>{3 * D, D}),
                 "attention: qkv weight must be [", 3 * D, ", ", D, "], got ",
                 shape_str(wqkv.shape()));
    int64_t Dh = D / heads;

    auto qkv = linear(tokens, wqkv, bqkv);  // [N, T, 3D]
    auto split_heads = [&](Tensor<T> t) {
        t = reshape(t, {N, Tk, heads, Dh});
        t = permute(t, {0, 2, 1, 3});
        return reshape(t, {N * heads, Tk, Dh});
    };
    auto q = split_heads(slice(qkv, 2, 0, D));
    auto k = split_heads(slice(qkv, 2, D, D));
    auto v = split_heads(slice(qkv, 2, 2 * D, D));

    auto att = batched_matmul(q, permute(k, {0, 2, 1}));
    att = scale(att, T(1) / std::sqrt(T(Dh)));
    att = softmax_lastdim(att);
    auto out = batched_matmul(att, v);  // [N*heads, T, Dh]
    out = reshape(out, {N, heads, Tk, Dh});
    out = permute(out, {0, 2, 1, 3});
    out = reshape(out, {N, Tk, D});
    return linear(out, wproj, bproj);
}

// ---- losses ----

// Mean over the batch of cross-entropy against smoothed one-hot targets:
// the true class gets 1 - eps, each other class eps / (K - 1).
// eps = 0 reduces to plain cross-entropy.
template <typename T>
Tensor<T> cross_entropy_label_smoothing(const Tensor<T>& logits,
                                        const std::vector<int>& targets, T eps) {
    auto ln = logits.node();
    RV_CHECK_DIM(ln->shape.size() == 2, "cross_entropy: logits must be [batch, classes], got ",
                 shape_str(ln->shape));
    int64_t B = ln->shape[0], K = ln->shape[1];
    RV_CHECK_DIM((int64_t)targets.size() == B, "cross_entropy: ", targets.size(),
                 " targets for batch ", B);
    RV_CHECK_DIM(eps >= T(0) && eps < T(1), "cross_entropy: eps out of [0, 1)");
    RV_CHECK_DIM(K >= 2 || eps == T(0), "cross_entropy: smoothing needs at least 2 classes");
    for (int t : targets)
        RV_CHECK_DIM(t >= 0 && t < K, "cross_entropy: target ", t, " outside [0, ", K, ")");

    const T off = K >= 2 ? eps / T(K - 1) : T(0);
    const T on = T(1) - eps;
    std::vector<T> probs(ln->data.size());
    T loss = 0;
    for (int64_t b = 0; b < B; ++b) {
        const T* x = ln->data.data() + b * K;
        T* p = probs.data() + b * K;
        T m = x[0];
        for (int64_t k = 1; k < K; ++k) m = std::max(m, x[k]);
        T z = 0;
        for (int64_t k = 0; k < K; ++k) {
            p[k] = std::exp(x[k] - m);
            z += p[k];
        }
        T log_z = std::log(z) + m;
        T inv_z = T(1) / z;
        T row = 0;
        for (int64_t k = 0; k < K; ++k) {
            T q = k == targets[(size_t)b] ? on : off;
            if (q != T(0)) row -= q * (x[k] - log_z);
            p[k] *= inv_z;
        }
        loss += row;
    }
    loss /= T(B);
    return detail::make_op_result<T>(
        "cross_entropy", {1}, {loss}, {ln},
        [ln, targets, B, K, on, off, probs = std::move(probs)](TensorNode<T>& self) {
            if (!ln->requires_grad) return;
            ln->ensure_grad();
            T gscale = self.grad[0] / T(B);
            for (int64_t b = 0; b < B; ++b) {
                const T* p = probs.data() + b * K;
                T* dst = ln->grad.data() + b * K;
                for (int64_t k = 0; k < K; ++k) {
                    T q = k == targets[(size_t)b] ? on : off;
                    dst[k] += gscale * (p[k] - q);
                }
            }
        });
}

// ---- non-differentiable helpers ----

// Row-wise argmax of a [rows, d] view (last axis). Ties resolve to the
// lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& a) {
    const auto& shape = a.shape();
    RV_CHECK_DIM(!shape.empty(), "argmax_rows: rank-0 input");
    int64_t d = shape.back();
    int64_t rows = a.numel() / d;
    std::vector<int> out((size_t)rows);
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = a.data().data() + r * d;
        int best = 0;
        for (int64_t k = 1; k < d; ++k)
            if (x[k] > x[best]) best = (int)k;
        out[(size_t)r] = best;
    }
    return out;
}

}  // namespace rvernet
