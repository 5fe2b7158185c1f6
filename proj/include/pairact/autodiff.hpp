#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pairact/tensor.hpp"

namespace pairact {

// Reverse-mode tape. Ops append nodes holding the forward value plus a
// closure that scatters this node's gradient into its parents. Node ids are
// already a topological order, so backward() is a single reverse sweep.
//
// Every op checks its output for NaN/Inf and aborts the step if found.
template <typename T>
class Tape {
 public:
  int constant(Tensor<T> v, const char* op = "constant") { return push(std::move(v), false, op, {}); }

  int leaf(const Tensor<T>& v, const char* op = "leaf") { return push(v, true, op, {}); }

  const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  const Tensor<T>& grad(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) grad_missing_ = Tensor<T>(n.value.shape);  // zeros for disconnected nodes
    return n.grad.empty() ? grad_missing_ : n.grad;
  }

  bool wants_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  std::size_t node_count() const { return nodes_.size(); }

  void backward(int root) {
    Node& r = nodes_[static_cast<std::size_t>(root)];
    if (r.value.size() != 1) config_error("backward: root must be a scalar");
    grad_buf(root).fill(T(1));
    for (int i = root; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.back && !n.grad.empty()) n.back();
    }
  }

  void reset() { nodes_.clear(); }

  // -------------------------------------------------------------------------
  // Elementwise and shape ops
  // -------------------------------------------------------------------------

  int add(int a, int b) {
    require_same_shape(a, b, "add");
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    return push(std::move(out), needs(a) || needs(b), "add", [this, a, b, id = next_id()] {
      const Tensor<T>& g = grad_of(id);
      if (wants_grad(a)) accumulate(a, g);
      if (wants_grad(b)) accumulate(b, g);
    });
  }

  int sub(int a, int b) {
    require_same_shape(a, b, "sub");
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    return push(std::move(out), needs(a) || needs(b), "sub", [this, a, b, id = next_id()] {
      const Tensor<T>& g = grad_of(id);
      if (wants_grad(a)) accumulate(a, g);
      if (wants_grad(b)) {
        Tensor<T>& gb = grad_buf(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }

  int mul(int a, int b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out = value(a);
    const Tensor<T>& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    return push(std::move(out), needs(a) || needs(b), "mul", [this, a, b, id = next_id()] {
      const Tensor<T>& g = grad_of(id);
      if (wants_grad(a)) {
        Tensor<T>& ga = grad_buf(a);
        const Tensor<T>& vb = value(b);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
      }
      if (wants_grad(b)) {
        Tensor<T>& gb = grad_buf(b);
        const Tensor<T>& va = value(a);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
      }
    });
  }

  int scale(int a, T s) {
    Tensor<T> out = value(a);
    for (T& v : out.data) v *= s;
    return push(std::move(out), needs(a), "scale", [this, a, s, id = next_id()] {
      if (!wants_grad(a)) return;
      const Tensor<T>& g = grad_of(id);
      Tensor<T>& ga = grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
  }

  int add_scalar(int a, T s) {
    Tensor<T> out = value(a);
    for (T& v : out.data) v += s;
    return push(std::move(out), needs(a), "add_scalar", [this, a, id = next_id()] {
      if (wants_grad(a)) accumulate(a, grad_of(id));
    });
  }

  // b (shape [n]) broadcast-added over the trailing axis of a (shape [..., n]).
  int add_bias(int a, int b) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    const std::size_t n = vb.size();
    if (vb.rank() != 1 || va.rank() < 1 || va.shape.back() != n)
      config_error("add_bias: bias " + shape_str(vb.shape) + " incompatible with " + shape_str(va.shape));
    Tensor<T> out = va;
    const std::size_t rows = out.size() / n;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) out[r * n + j] += vb[j];
    return push(std::move(out), needs(a) || needs(b), "add_bias", [this, a, b, rows, n, id = next_id()] {
      const Tensor<T>& g = grad_of(id);
      if (wants_grad(a)) accumulate(a, g);
      if (wants_grad(b)) {
        Tensor<T>& gb = grad_buf(b);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
      }
    });
  }

  int sigmoid(int a) {
    Tensor<T> out = value(a);
    for (T& v : out.data) {
      if (v >= T(0)) {
        v = T(1) / (T(1) + std::exp(-v));
      } else {
        const T e = std::exp(v);
        v = e / (T(1) + e);
      }
    }
    return push(std::move(out), needs(a), "sigmoid", [this, a, id = next_id()] {
      if (!wants_grad(a)) return;
      const Tensor<T>& g = grad_of(id);
      const Tensor<T>& y = value(id);
      Tensor<T>& ga = grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  }

  int tanh_op(int a) {
    Tensor<T> out = value(a);
    for (T& v : out.data) v = std::tanh(v);
    return push(std::move(out), needs(a), "tanh", [this, a, id = next_id()] {
      if (!wants_grad(a)) return;
      const Tensor<T>& g = grad_of(id);
      const Tensor<T>& y = value(id);
      Tensor<T>& ga = grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
    });
  }

  int relu(int a) {
    Tensor<T> out = value(a);
    for (T& v : out.data) v = v > T(0) ? v : T(0);
    return push(std::move(out), needs(a), "relu", [this, a, id = next_id()] {
      if (!wants_grad(a)) return;
      const Tensor<T>& g = grad_of(id);
      const Tensor<T>& x = value(a);
      Tensor<T>& ga = grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > T(0)) ga[i] += g[i];
    });
  }

  int exp_op(int a) {
    Tensor<T> out = value(a);
    for (T& v : out.data) v = std::exp(v);
    return push(std::move(out), needs(a), "exp", [this, a, id = next_id()] {
      if (!wants_grad(a))) return;
      const Tensor<T>& g = grad_of(id);
      const Tensor<T>& y = value(id);
      Tensor<T>& ga = grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    });
  }

  int reshape(int a, Shape new_shape) {
    const Tensor<T>& va = value(a);
    if (shape_numel(new_shape) != va.size())
      config_error("reshape: cannot view " + shape_str(va.shape) + " as " + shape_str(new_shape));
    Tensor<T> out;
    out.shape = std::move(new_shape);
    out.data = va.data;
    return push(std::move(out), needs(a), "reshape", [this, a, id = next_id()] {
      if (wants_grad(a)) accumulate(a, grad_of(id));
    });
  }

  int concat_cols(int a, int b) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.dim(0) != vb.dim(0))
      config_error("concat_cols: incompatible shapes " + shape_str(va.shape) + " and " + shape_str(vb.shape));
    const std::size_t m = va.dim(0), p = va.dim(1), q = vb.dim(1);
    Tensor<T> out(Shape{m, p + q});
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < p; ++j) out[i * (p + q) + j] = va[i * p + j];
      for (std::size_t j = 0; j < q; ++j) out[i * (p + q) + p + j] = vb[i * q + j];
    }
    return push(std::move(out), needs(a) || needs(b), "concat_cols", [this, a, b, m, p, q, id = next_id()] {
      const Tensor<T>& g = grad_of(id);
      if (wants_grad(a)) {
        Tensor<T>& ga = grad_buf(a);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < p; ++j) ga[i * p + j] += g[i * (p + q) + j];
      }
      if (wants_grad(b)) {
        Tensor<T>& gb = grad_buf(b);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < q; ++j) gb[i * q + j] += g[i * (p + q) + p + j];
      }
    });
  }

  int slice_cols(int a, std::size_t c0, std::size_t c1) {
    const Tensor<T>& va = value(a);
    if (va.rank() != 2 || c0 >= c1 || c1 > va.dim(1))
      config_error("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) + ") for " +
                   shape_str(va.shape));
    const std::size_t m = va.dim(0), n = va.dim(1), w = c1 - c0;
    Tensor<T> out(Shape{m, w});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * w + j] = va[i * n + c0 + j];
    return push(std::move(out), needs(a), "slice_cols", [this, a, m, n, w, c0, id = next_id()] {
      if (!wants_grad(a)) return;
      const Tensor<T>& g = grad_of(id);
      Tensor<T>& ga = grad_buf(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) ga[i * n + c0 + j] += g[i * w + j];
    });
  }

  // Mean over one axis; the axis is removed from the shape.
  int mean_over_axis(int a, std::size_t axis) {
    const Tensor<T>& va = value(a);
    if (axis >= va.rank()) config_error("mean_over_axis: axis out of range");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= va.dim(i);
    for (std::size_t i = axis + 1; i < va.rank(); ++i) inner *= va.dim(i);
    const std::size_t n = va.dim(axis);
    Shape out_shape;
    for (std::size_t i = 0; i < va.rank(); ++i)
      if (i != axis) out_shape.push_back(va.dim(i));
    if (out_shape.empty()) out_shape.push_back(1);
    Tensor<T> out(out_shape);
    const T inv = T(1) / static_cast<T>(n);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t t = 0; t < n; ++t) {
        const T* src = va.ptr() + (o * n + t) * inner;
        T* dst = out.ptr() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
      }
    return push(std::move(out), needs(a), "mean_over_axis", [this, a, outer, n, inner, inv, id = next_id()] {
      if (!wants_grad(a)) return;
      const Tensor<T>& g = grad_of(id);
      Tensor<T>& ga = grad_buf(a);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t t = 0; t < n; ++t) {
          T* dst = ga.ptr() + (o * n + t) * inner;
          const T* src = g.ptr() + o * inner;
          for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
        }
    });
  }

  // Inserts a new axis of size `count` at position `axis`, repeating values.
  int repeat_axis(int a, std::size_t axis, std::size_t count) {
    const Tensor<T>& va = value(a);
    if (axis > va.rank()) config_error("repeat_axis: axis out of range");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= va.dim(i);
    for (std::size_t i = axis; i < va.rank(); ++i) inner *= va.dim(i);
    Shape out_shape;
    for (std::size_t i = 0; i < axis; ++i) out_shape.push_back(va.dim(i));
    out_shape.push_back(count);
    for (std::size_t i = axis; i < va.rank(); ++i) out_shape.push_back(va.dim(i));
    Tensor<T> out(out_shape);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t t = 0; t < count; ++t)
        std::copy(va.ptr() + o * inner, va.ptr() + (o + 1) * inner, out.ptr() + (o * count + t) * inner);
    return push(std::move(out), needs(a), "repeat_axis", [this, a, outer, count, inner, id = next_id()] {
      if (!wants_grad(a)) return;
      const Tensor<T>& g = grad_of(id);
      Tensor<T>& ga = grad_buf(a);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t t = 0; t < count; ++t) {
          const T* src = g.ptr() + (o * count + t) * inner;
          T* dst = ga.ptr() + o * inner;
          for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
  }

  int sum_all(int a) {
    const Tensor<T>& va = value(a);
    T s = T(0);
    for (const T& v : va.data) s += v;
    return push(Tensor<T>::scalar(s), needs(a), "sum_all", [this, a, id = next_id()] {
      if (!wants_grad(a)) return;
      const T g = grad_of(id)[0];
      Tensor<T>& ga = grad_buf(a);
      for (T& v : ga.data) v += g;
    });
  }

  int mean_all(int a) { return scale(sum_all(a), T(1) / static_cast<T>(value(a).size())); }

  // -------------------------------------------------------------------------
  // Linear algebra
  // -------------------------------------------------------------------------

  int matmul(int a, int b) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0))
      config_error("matmul: incompatible shapes " + shape_str(va.shape) + " and " + shape_str(vb.shape));
    const std::size_t m = va.dim(0), k = va.dim(1), n = vb.dim(1);
    Tensor<T> out(Shape{m, n});
    gemm_nn_acc(va.ptr(), vb.ptr(), out.ptr(), m, k, n);
    return push(std::move(out), needs(a) || needs(b), "matmul", [this, a, b, m, k, n, id = next_id()] {
      const Tensor<T>& g = grad_of(id);
      if (wants_grad(a)) gemm_nt_acc(g.ptr(), value(b).ptr(), grad_buf(a).ptr(), m, n, k);
      if (wants_grad(b)) gemm_tn_acc(value(a).ptr(), g.ptr(), grad_buf(b).ptr(), m, k, n);
    });
  }

  // Spatial graph step: out[b,t] = adj * x[b,t] * w for every (b,t) slice.
  // adj is a fixed (non-differentiated) V x V matrix.
  int graph_conv(int x, const Tensor<T>& adj, int w) {
    const Tensor<T>& vx = value(x);
    const Tensor<T>& vw = value(w);
    if (vx.rank() != 4) config_error("graph_conv: input must be [B,T,V,C], got " + shape_str(vx.shape));
    const std::size_t B = vx.dim(0), Tn = vx.dim(1), V = vx.dim(2), Ci = vx.dim(3);
    if (adj.rank() != 2 || adj.dim(0) != V || adj.dim(1) != V)
      config_error("graph_conv: adjacency " + shape_str(adj.shape) + " does not match V=" + std::to_string(V));
    if (vw.rank() != 2 || vw.dim(0) != Ci)
      config_error("graph_conv: weight " + shape_str(vw.shape) + " does not match C_in=" + std::to_string(Ci));
    const std::size_t Co = vw.dim(1);
    const std::size_t slices = B * Tn;

    // XW first (single big GEMM), then the small V x V adjacency GEMM per slice.
    Tensor<T> xw(Shape{slices * V, Co});
    gemm_nn_acc(vx.ptr(), vw.ptr(), xw.ptr(), slices * V, Ci, Co);
    Tensor<T> out(Shape{B, Tn, V, Co});
    for (std::size_t s = 0; s < slices; ++s)
      gemm_nn_acc(adj.ptr(), xw.ptr() + s * V * Co, out.ptr() + s * V * Co, V, V, Co);

    return push(std::move(out), needs(x) || needs(w), "graph_conv",
                [this, x, w, adj, slices, V, Ci, Co, id = next_id()] {
                  const Tensor<T>& g = grad_of(id);
                  const Tensor<T>& vx = value(x);
                  const Tensor<T>& vw = value(w);
                  const bool wx = wants_grad(x), ww = wants_grad(w);
                  Tensor<T> h(Shape{V, Co});
                  for (std::size_t s = 0; s < slices; ++s) {
                    h.fill(T(0));
                    // h = adj^T * g_slice
                    gemm_tn_acc(adj.ptr(), g.ptr() + s * V * Co, h.ptr(), V, V, Co);
                    if (wx) gemm_nt_acc(h.ptr(), vw.ptr(), grad_buf(x).ptr() + s * V * Ci, V, Co, Ci);
                    if (ww) gemm_tn_acc(vx.ptr() + s * V * Ci, h.ptr(), grad_buf(w).ptr(), V, Ci, Co);
                  }
                });
  }

  // Per-node temporal convolution with same-padding over the frame axis.
  // x: [B,T,V,Ci], kernel: [K,Ci,Co] (K odd), bias: [Co] -> [B,T,V,Co]
  int temporal_conv(int x, int kernel, int bias) {
    const Tensor<T>& vx = value(x);
    const Tensor<T>& vk = value(kernel);
    const Tensor<T>& vb = value(bias);
    if (vx.rank() != 4) config_error("temporal_conv: input must be [B,T,V,C], got " + shape_str(vx.shape));
    if (vk.rank() != 3 || vk.dim(1) != vx.dim(3))
      config_error("temporal_conv: kernel " + shape_str(vk.shape) + " does not match input " + shape_str(vx.shape));
    if (vk.dim(0) % 2 == 0) config_error("temporal_conv: kernel width must be odd for same-padding");
    const std::size_t B = vx.dim(0), Tn = vx.dim(1), V = vx.dim(2), Ci = vx.dim(3);
    const std::size_t K = vk.dim(0), Co = vk.dim(2);
    if (vb.rank() != 1 || vb.dim(0) != Co) config_error("temporal_conv: bias shape mismatch");

    Tensor<T> cols = im2col(vx, B, Tn, V, Ci, K);
    const std::size_t rows = B * Tn * V;
    Tensor<T> out(Shape{B, Tn, V, Co});
    gemm_nn_acc(cols.ptr(), vk.ptr(), out.ptr(), rows, K * Ci, Co);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < Co; ++o) out[r * Co + o] += vb[o];

    return push(std::move(out), needs(x) || needs(kernel) || needs(bias), "temporal_conv",
                [this, x, kernel, bias, B, Tn, V, Ci, K, Co, id = next_id()] {
                  const Tensor<T>& g = grad_of(id);
                  const std::size_t rows = B * Tn * V;
                  if (wants_grad(bias)) {
                    Tensor<T>& gb = grad_buf(bias);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t o = 0; o < Co; ++o) gb[o] += g[r * Co + o];
                  }
                  if (wants_grad(kernel)) {
                    Tensor<T> cols = im2col(value(x), B, Tn, V, Ci, K);
                    gemm_tn_acc(cols.ptr(), g.ptr(), grad_buf(kernel).ptr(), rows, K * Ci, Co);
                  }
                  if (wants_grad(x)) {
                    Tensor<T> dcols(Shape{rows, K * Ci});
                    gemm_nt_acc(g.ptr(), value(kernel).ptr(), dcols.ptr(), rows, Co, K * Ci);
                    col2im_acc(dcols, grad_buf(x), B, Tn, V, Ci, K);
                  }
                });
  }

  // -------------------------------------------------------------------------
  // Heads and losses
  // -------------------------------------------------------------------------

  int softmax_rows(int a) {
    const Tensor<T>& va = value(a);
    if (va.rank() != 2) config_error("softmax_rows: expected [m,n], got " + shape_str(va.shape));
    const std::size_t m = va.dim(0), n = va.dim(1);
    Tensor<T> out(va.shape);
    for (std::size_t i = 0; i < m; ++i) {
      const T* row = va.ptr() + i * n;
      T mx = row[0];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      T sum = T(0);
      T* orow = out.ptr() + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        orow[j] = std::exp(row[j] - mx);
        sum += orow[j];
      }
      for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
    }
    return push(std::move(out), needs(a), "softmax", [this, a, m, n, id = next_id()] {
      if (!wants_grad(a)) return;
      const Tensor<T>& g = grad_of(id);
      const Tensor<T>& p = value(id);
      Tensor<T>& ga = grad_buf(a);
      for (std::size_t i = 0; i < m; ++i) {
        const T* gi = g.ptr() + i * n;
        const T* pi = p.ptr() + i * n;
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += gi[j] * pi[j];
        T* gai = ga.ptr() + i * n;
        for (std::size_t j = 0; j < n; ++j) gai[j] += pi[j] * (gi[j] - dot);
      }
    });
  }

  // Mean over rows of -sum_j y[i,j] * log p[i,j]; y is a constant node.
  int cross_entropy_mean(int p, int y) {
    require_same_shape(p, y, "cross_entropy");
    const Tensor<T>& vp = value(p);
    const Tensor<T>& vy = value(y);
    const std::size_t m = vp.rank() == 2 ? vp.dim(0) : 1;
    T loss = T(0);
    for (std::size_t i = 0; i < vp.size(); ++i)
      if (vy[i] != T(0)) loss -= vy[i] * std::log(std::max(vp[i], T(1e-30)));
    loss /= static_cast<T>(m);
    return push(Tensor<T>::scalar(loss), needs(p), "cross_entropy", [this, p, y, m, id = next_id()] {
      if (!wants_grad(p)) return;
      const T g = grad_of(id)[0] / static_cast<T>(m);
      const Tensor<T>& vp = value(p);
      const Tensor<T>& vy = value(y);
      Tensor<T>& gp = grad_buf(p);
      for (std::size_t i = 0; i < vp.size(); ++i)
        if (vy[i] != T(0)) gp[i] -= g * vy[i] / std::max(vp[i], T(1e-30));
    });
  }

  // Numerically stable fused softmax + cross-entropy (mean over rows).
  int softmax_ce_logits(int z, int y) {
    require_same_shape(z, y, "softmax_ce_logits");
    const Tensor<T>& vz = value(z);
    const Tensor<T>& vy = value(y);
    if (vz.rank() != 2) config_error("softmax_ce_logits: expected [m,n]");
    const std::size_t m = vz.dim(0), n = vz.dim(1);
    T loss = T(0);
    for (std::size_t i = 0; i < m; ++i) {
      const T* row = vz.ptr() + i * n;
      T mx = row[0];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      T sum = T(0), dot = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        sum += std::exp(row[j] - mx);
        dot += vy[i * n + j] * row[j];
      }
      loss += mx + std::log(sum) - dot;
    }
    loss /= static_cast<T>(m);
    return push(Tensor<T>::scalar(loss), needs(z), "softmax_ce_logits", [this, z, y, m, n, id = next_id()] {
      if (!wants_grad(z)) return;
      const T g = grad_of(id)[0] / static_cast<T>(m);
      const Tensor<T>& vz = value(z);
      const Tensor<T>& vy = value(y);
      Tensor<T>& gz = grad_buf(z);
      for (std::size_t i = 0; i < m; ++i) {
        const T* row = vz.ptr() + i * n;
        T mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
        for (std::size_t j = 0; j < n; ++j)
          gz[i * n + j] += g * (std::exp(row[j] - mx) / sum - vy[i * n + j]);
      }
    });
  }

  // sum_d 1/2 (mu^2 + exp(logvar) - 1 - logvar) over all elements.
  int kl_gaussian(int mu, int logvar) {
    require_same_shape(mu, logvar, "kl_gaussian");
    const Tensor<T>& vm = value(mu);
    const Tensor<T>& vl = value(logvar);
    T kl = T(0);
    for (std::size_t i = 0; i < vm.size(); ++i)
      kl += T(0.5) * (vm[i] * vm[i] + std::exp(vl[i]) - T(1) - vl[i]);
    return push(Tensor<T>::scalar(kl), needs(mu) || needs(logvar), "kl_gaussian",
                [this, mu, logvar, id = next_id()] {
                  const T g = grad_of(id)[0];
                  const Tensor<T>& vm = value(mu);
                  const Tensor<T>& vl = value(logvar);
                  if (wants_grad(mu)) {
                    Tensor<T>& gm = grad_buf(mu);
                    for (std::size_t i = 0; i < vm.size(); ++i) gm[i] += g * vm[i];
                  }
                  if (wants_grad(logvar)) {
                    Tensor<T>& gl = grad_buf(logvar);
                    for (std::size_t i = 0; i < vl.size(); ++i)
                      gl[i] += g * T(0.5) * (std::exp(vl[i]) - T(1));
                  }
                });
  }

  // z = mu + exp(logvar / 2) * noise; noise is a constant node, so gradient
  // flows to mu and logvar only.
  int reparameterize(int mu, int logvar, int noise) {
    require_same_shape(mu, logvar, "reparameterize");
    require_same_shape(mu, noise, "reparameterize");
    const Tensor<T>& vm = value(mu);
    const Tensor<T>& vl = value(logvar);
    const Tensor<T>& vn = value(noise);
    Tensor<T> out(vm.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = vm[i] + std::exp(vl[i] / T(2)) * vn[i];
    return push(std::move(out), needs(mu) || needs(logvar), "reparameterize",
                [this, mu, logvar, noise, id = next_id()] {
                  const Tensor<T>& g = grad_of(id);
                  if (wants_grad(mu)) accumulate(mu, g);
                  if (wants_grad(logvar)) {
                    const Tensor<T>& vl = value(logvar);
                    const Tensor<T>& vn = value(noise);
                    Tensor<T>& gl = grad_buf(logvar);
                    for (std::size_t i = 0; i < g.size(); ++i)
                      gl[i] += g[i] * T(0.5) * std::exp(vl[i] / T(2)) * vn[i];
                  }
                });
  }

  // 1/2 sum (pred - target)^2, the unit-variance Gaussian NLL up to a constant.
  int half_sse(int pred, int target) {
    require_same_shape(pred, target, "half_sse");
    const Tensor<T>& vp = value(pred);
    const Tensor<T>& vt = value(target);
    T s = T(0);
    for (std::size_t i = 0; i < vp.size(); ++i) {
      const T d = vp[i] - vt[i];
      s += d * d;
    }
    return push(Tensor<T>::scalar(s / T(2)), needs(pred) || needs(target), "half_sse",
                [this, pred, target, id = next_id()] {
                  const T g = grad_of(id)[0];
                  const Tensor<T>& vp = value(pred);
                  const Tensor<T>& vt = value(target);
                  if (wants_grad(pred)) {
                    Tensor<T>& gp = grad_buf(pred);
                    for (std::size_t i = 0; i < vp.size(); ++i) gp[i] += g * (vp[i] - vt[i]);
                  }
                  if (wants_grad(target)) {
                    Tensor<T>& gt = grad_buf(target);
                    for (std::size_t i = 0; i < vp.size(); ++i) gt[i] -= g * (vp[i] - vt[i]);
                  }
                });
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void()> back;
    const char* op;
    bool needs_grad;
  };

  std::vector<Node> nodes_;
  mutable Tensor<T> grad_missing_;

  bool needs(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  int next_id() const { return static_cast<int>(nodes_.size()); }

  const Tensor<T>& grad_of(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }

  Tensor<T>& grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape);
    return n.grad;
  }

  void accumulate(int id, const Tensor<T>& g) {
    Tensor<T>& dst = grad_buf(id);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  void require_same_shape(int a, int b, const char* op) {
    if (!same_shape(value(a), value(b)))
      config_error(std::string(op) + ": shape mismatch " + shape_str(value(a).shape) + " vs " +
                   shape_str(value(b).shape));
  }

  int push(Tensor<T> v, bool needs_grad, const char* op, std::function<void()> back) {
    if (!v.all_finite())
      training_error(std::string("non-finite value produced by op '") + op + "'; aborting step");
    nodes_.push_back(Node{std::move(v), Tensor<T>{}, std::move(back), op, needs_grad});
    return static_cast<int>(nodes_.size() - 1);
  }

  static Tensor<T> im2col(const Tensor<T>& x, std::size_t B, std::size_t Tn, std::size_t V, std::size_t Ci,
                          std::size_t K) {
    const std::size_t pad = K / 2;
    Tensor<T> cols(Shape{B * Tn * V, K * Ci});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < Tn; ++t)
        for (std::size_t tau = 0; tau < K; ++tau) {
          const std::ptrdiff_t ts = static_cast<std::ptrdiff_t>(t + tau) - static_cast<std::ptrdiff_t>(pad);
          if (ts < 0 || ts >= static_cast<std::ptrdiff_t>(Tn)) continue;
          for (std::size_t v = 0; v < V; ++v) {
            const T* src = x.ptr() + ((b * Tn + static_cast<std::size_t>(ts)) * V + v) * Ci;
            T* dst = cols.ptr() + ((b * Tn + t) * V + v) * K * Ci + tau * Ci;
            std::copy(src, src + Ci, dst);
          }
        }
    return cols;
  }

  static void col2im_acc(const Tensor<T>& dcols, Tensor<T>& dx, std::size_t B, std::size_t Tn, std::size_t V,
                         std::size_t Ci, std::size_t K) {
    const std::size_t pad = K / 2;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < Tn; ++t)
        for (std::size_t tau = 0; tau < K; ++tau) {
          const std::ptrdiff_t ts = static_cast<std::ptrdiff_t>(t + tau) - static_cast<std::ptrdiff_t>(pad);
          if (ts < 0 || ts >= static_cast<std::ptrdiff_t>(Tn)) continue;
          for (std::size_t v = 0; v < V; ++v) {
            const T* src = dcols.ptr() + ((b * Tn + t) * V + v) * K * Ci + tau * Ci;
            T* dst = dx.ptr() + ((b * Tn + static_cast<std::size_t>(ts)) * V + v) * Ci;
            for (std::size_t c = 0; c < Ci; ++c) dst[c] += src[c];
          }
        }
  }
};

}  // namespace pairact
