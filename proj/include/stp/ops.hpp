#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "stp/tensor.hpp"

// Differentiable primitives. Every op validates shapes up front, computes the
// forward value with Eigen, rejects non-finite outputs, and (when recording)
// attaches a backward closure that accumulates parent gradients in a fixed
// left-to-right order.

namespace stp {

namespace detail {

// Sequential reductions: Eigen's horizontal .sum()/.maxCoeff() vectorize with
// alignment-dependent peeling, which rounds differently across allocations.
// These loops keep every reduction order fixed.
template <typename S>
S seq_sum(const S* p, int64_t n) {
  S acc = S(0);
  for (int64_t i = 0; i < n; ++i) acc += p[i];
  return acc;
}
template <typename S>
S seq_dot(const S* a, const S* b, int64_t n) {
  S acc = S(0);
  for (int64_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}
template <typename S>
S seq_max(const S* p, int64_t n) {
  S m = p[0];
  for (int64_t i = 1; i < n; ++i) m = std::max(m, p[i]);
  return m;
}

template <typename S>
void check_finite(const char* op, const std::vector<S>& v) {
  if (ConstArrMap<S>(v.data(), static_cast<Eigen::Index>(v.size())).isFinite().all()) return;
  throw ValueError(std::string("op '") + op + "' produced non-finite values");
}

template <typename S>
Tensor<S> make_result(const char* op, Shape shape, std::vector<S> data,
                      std::vector<Tensor<S>> inputs,
                      std::function<void(const std::vector<S>&, GradStore<S>&)> backward_fn) {
  check_finite(op, data);
  Tensor<S> out = Tensor<S>::from_data(std::move(shape), std::move(data));
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  if (needs_grad && grad_enabled()) {
    auto node = out.node();
    node->op = op;
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward_fn);
  }
  return out;
}

template <typename S>
MatMap<S> grad_mat(GradStore<S>& store, const std::shared_ptr<TensorNode<S>>& n, int rows, int cols) {
  return MatMap<S>(store.buffer(n.get()).data(), rows, cols);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename S>
void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape("add", a, b);
  const auto n = static_cast<Eigen::Index>(a.size());
  std::vector<S> out(a.size());
  ArrMap<S>(out.data(), n) = ConstArrMap<S>(a.data(), n) + ConstArrMap<S>(b.data(), n);
  auto an = a.node(), bn = b.node();
  return detail::make_result<S>(
      "add", a.shape(), std::move(out), {a, b},
      [an, bn, n](const std::vector<S>& g, GradStore<S>& st) {
        ConstArrMap<S> gm(g.data(), n);
        if (an->requires_grad) ArrMap<S>(st.buffer(an.get()).data(), n) += gm;
        if (bn->requires_grad) ArrMap<S>(st.buffer(bn.get()).data(), n) += gm;
      });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape("sub", a, b);
  const auto n = static_cast<Eigen::Index>(a.size());
  std::vector<S> out(a.size());
  ArrMap<S>(out.data(), n) = ConstArrMap<S>(a.data(), n) - ConstArrMap<S>(b.data(), n);
  auto an = a.node(), bn = b.node();
  return detail::make_result<S>(
      "sub", a.shape(), std::move(out), {a, b},
      [an, bn, n](const std::vector<S>& g, GradStore<S>& st) {
        ConstArrMap<S> gm(g.data(), n);
        if (an->requires_grad) ArrMap<S>(st.buffer(an.get()).data(), n) += gm;
        if (bn->requires_grad) ArrMap<S>(st.buffer(bn.get()).data(), n) -= gm;
      });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape("mul", a, b);
  const auto n = static_cast<Eigen::Index>(a.size());
  std::vector<S> out(a.size());
  ArrMap<S>(out.data(), n) = ConstArrMap<S>(a.data(), n) * ConstArrMap<S>(b.data(), n);
  auto an = a.node(), bn = b.node();
  return detail::make_result<S>(
      "mul", a.shape(), std::move(out), {a, b},
      [an, bn, n](const std::vector<S>& g, GradStore<S>& st) {
        ConstArrMap<S> gm(g.data(), n);
        if (an->requires_grad)
          ArrMap<S>(st.buffer(an.get()).data(), n) += gm * ConstArrMap<S>(bn->data.data(), n);
        if (bn->requires_grad)
          ArrMap<S>(st.buffer(bn.get()).data(), n) += gm * ConstArrMap<S>(an->data.data(), n);
      });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  const auto n = static_cast<Eigen::Index>(a.size());
  std::vector<S> out(a.size());
  ArrMap<S>(out.data(), n) = ConstArrMap<S>(a.data(), n) * c;
  auto an = a.node();
  return detail::make_result<S>("scale", a.shape(), std::move(out), {a},
                                [an, c, n](const std::vector<S>& g, GradStore<S>& st) {
                                  if (an->requires_grad)
                                    ArrMap<S>(st.buffer(an.get()).data(), n) +=
                                        ConstArrMap<S>(g.data(), n) * c;
                                });
}

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const auto n = static_cast<Eigen::Index>(x.size());
  std::vector<S> out(x.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double v = static_cast<double>(x.data()[i]);
    out[static_cast<size_t>(i)] =
        static_cast<S>(0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))));
  }
  auto xn = x.node();
  return detail::make_result<S>(
      "gelu", x.shape(), std::move(out), {x},
      [xn, n](const std::vector<S>& g, GradStore<S>& st) {
        if (!xn->requires_grad) return;
        auto gx = ArrMap<S>(st.buffer(xn.get()).data(), n);
        for (Eigen::Index i = 0; i < n; ++i) {
          const double v = static_cast<double>(xn->data[static_cast<size_t>(i)]);
          const double t = std::tanh(kC * (v + kA * v * v * v));
          const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
          gx[i] += static_cast<S>(static_cast<double>(g[static_cast<size_t>(i)]) * d);
        }
      });
}

// ---------------------------------------------------------------------------
// matmul / row ops

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> out(static_cast<size_t>(m) * n);
  MatMap<S>(out.data(), m, n).noalias() = a.mat() * b.mat();
  auto an = a.node(), bn = b.node();
  return detail::make_result<S>(
      "matmul", {m, n}, std::move(out), {a, b},
      [an, bn, m, k, n](const std::vector<S>& g, GradStore<S>& st) {
        ConstMatMap<S> gm(g.data(), m, n);
        if (an->requires_grad)
          detail::grad_mat(st, an, m, k).noalias() += gm * ConstMatMap<S>(bn->data.data(), k, n).transpose();
        if (bn->requires_grad)
          detail::grad_mat(st, bn, k, n).noalias() += ConstMatMap<S>(an->data.data(), m, k).transpose() * gm;
      });
}

template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  if (x.rank() != 2 || v.rank() != 1 || v.dim(0) != x.dim(1)) {
    throw ShapeError("add_rowvec: shapes " + shape_str(x.shape()) + " and " + shape_str(v.shape()));
  }
  const int r = x.dim(0), c = x.dim(1);
  std::vector<S> out(x.size());
  MatMap<S>(out.data(), r, c) = x.mat().rowwise() + ConstMatMap<S>(v.data(), 1, c).row(0);
  auto xn = x.node(), vn = v.node();
  return detail::make_result<S>(
      "add_rowvec", x.shape(), std::move(out), {x, v},
      [xn, vn, r, c](const std::vector<S>& g, GradStore<S>& st) {
        ConstMatMap<S> gm(g.data(), r, c);
        if (xn->requires_grad) detail::grad_mat(st, xn, r, c) += gm;
        if (vn->requires_grad) {
          MatMap<S> gv(st.buffer(vn.get()).data(), 1, c);
          for (int i = 0; i < r; ++i) gv.row(0) += gm.row(i);  // fixed row order
        }
      });
}

// x @ W + b
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  return add_rowvec(matmul(x, weight), bias);
}

template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, std::vector<int> indices) {
  if (x.rank() != 2) throw ShapeError("gather_rows: rank != 2, shape " + shape_str(x.shape()));
  const int r = x.dim(0), c = x.dim(1);
  for (int i : indices) {
    if (i < 0 || i >= r)
      throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range [0," +
                       std::to_string(r) + ")");
  }
  const int m = static_cast<int>(indices.size());
  std::vector<S> out(static_cast<size_t>(m) * c);
  ConstMatMap<S> xm = x.mat();
  MatMap<S> om(out.data(), m, c);
  for (int i = 0; i < m; ++i) om.row(i) = xm.row(indices[static_cast<size_t>(i)]);
  auto xn = x.node();
  return detail::make_result<S>(
      "gather_rows", {m, c}, std::move(out), {x},
      [xn, idx = std::move(indices), r, c, m](const std::vector<S>& g, GradStore<S>& st) {
        if (!xn->requires_grad) return;
        ConstMatMap<S> gm(g.data(), m, c);
        auto gx = detail::grad_mat(st, xn, r, c);
        for (int i = 0; i < m; ++i) gx.row(idx[static_cast<size_t>(i)]) += gm.row(i);
      });
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int c = parts[0].dim(1);
  int rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != c)
      throw ShapeError("concat_rows: column mismatch, " + shape_str(p.shape()) + " vs cols=" +
                       std::to_string(c));
    rows += p.dim(0);
  }
  std::vector<S> out(static_cast<size_t>(rows) * c);
  MatMap<S> om(out.data(), rows, c);
  std::vector<std::shared_ptr<TensorNode<S>>> nodes;
  std::vector<int> offsets;
  int at = 0;
  for (const auto& p : parts) {
    om.middleRows(at, p.dim(0)) = p.mat();
    nodes.push_back(p.node());
    offsets.push_back(at);
    at += p.dim(0);
  }
  return detail::make_result<S>(
      "concat_rows", {rows, c}, std::move(out), parts,
      [nodes, offsets, rows, c](const std::vector<S>& g, GradStore<S>& st) {
        ConstMatMap<S> gm(g.data(), rows, c);
        for (size_t i = 0; i < nodes.size(); ++i) {
          if (!nodes[i]->requires_grad) continue;
          const int nr = static_cast<int>(nodes[i]->data.size()) / c;
          detail::grad_mat(st, nodes[i], nr, c) += gm.middleRows(offsets[i], nr);
        }
      });
}

template <typename S>
Tensor<S> concat_rows(const Tensor<S>& a, const Tensor<S>& b) {
  return concat_rows(std::vector<Tensor<S>>{a, b});
}

// Broadcast a single row to n rows.
template <typename S>
Tensor<S> repeat_row(const Tensor<S>& v, int n) {
  if (!((v.rank() == 1) || (v.rank() == 2 && v.dim(0) == 1))) {
    throw ShapeError("repeat_row: expected a single row, got " + shape_str(v.shape()));
  }
  const int c = v.rank() == 1 ? v.dim(0) : v.dim(1);
  std::vector<S> out(static_cast<size_t>(n) * c);
  MatMap<S> om(out.data(), n, c);
  om.rowwise() = ConstMatMap<S>(v.data(), 1, c).row(0);
  auto vn = v.node();
  return detail::make_result<S>(
      "repeat_row", {n, c}, std::move(out), {v},
      [vn, n, c](const std::vector<S>& g, GradStore<S>& st) {
        if (!vn->requires_grad) return;
        MatMap<S> gv(st.buffer(vn.get()).data(), 1, c);
        ConstMatMap<S> gm(g.data(), n, c);
        for (int i = 0; i < n; ++i) gv.row(0) += gm.row(i);  // fixed row order
      });
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& x, int start, int len) {
  std::vector<int> idx(static_cast<size_t>(len));
  for (int i = 0; i < len; ++i) idx[static_cast<size_t>(i)] = start + i;
  return gather_rows(x, std::move(idx));
}

// ---------------------------------------------------------------------------
// normalization / softmax

// Normalizes the last axis to zero mean / unit variance (biased variance),
// then applies the per-channel affine (gamma, beta).
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: rank 0 input");
  const int d = x.dim(x.rank() - 1);
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d) {
    throw ShapeError("layer_norm: affine shape " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " vs feature dim " + std::to_string(d));
  }
  if (!(eps > S(0))) throw ValueError("layer_norm: eps must be > 0");
  const int rows = static_cast<int>(x.size() / d);
  std::vector<S> out(x.size());
  auto xhat = std::make_shared<std::vector<S>>(x.size());
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
  ConstMatMap<S> xm(x.data(), rows, d);
  MatMap<S> om(out.data(), rows, d);
  MatMap<S> hm(xhat->data(), rows, d);
  ConstMatMap<S> gm(gamma.data(), 1, d);
  ConstMatMap<S> bm(beta.data(), 1, d);
  for (int i = 0; i < rows; ++i) {
    const S* xr = x.data() + static_cast<int64_t>(i) * d;
    const S mu = detail::seq_sum(xr, d) / static_cast<S>(d);
    S var = S(0);
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<S>(d);
    const S inv = S(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = inv;
    hm.row(i) = (xm.row(i).array() - mu) * inv;
    om.row(i) = hm.row(i).cwiseProduct(gm.row(0)) + bm.row(0);
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_result<S>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, xhat, inv_std, rows, d](const std::vector<S>& g, GradStore<S>& st) {
        ConstMatMap<S> gm_(g.data(), rows, d);
        ConstMatMap<S> hm_(xhat->data(), rows, d);
        ConstMatMap<S> gamma_(gn->data.data(), 1, d);
        if (xn->requires_grad) {
          auto gx = detail::grad_mat(st, xn, rows, d);
          for (int i = 0; i < rows; ++i) {
            // dL/dxhat for this row
            Eigen::Array<S, 1, Eigen::Dynamic> dxh = gm_.row(i).array() * gamma_.row(0).array();
            const S m1 = detail::seq_sum(dxh.data(), d) / static_cast<S>(d);
            S m2 = S(0);
            const S* hr = xhat->data() + static_cast<int64_t>(i) * d;
            for (int j = 0; j < d; ++j) m2 += dxh[j] * hr[j];
            m2 /= static_cast<S>(d);
            gx.row(i).array() +=
                (*inv_std)[static_cast<size_t>(i)] * (dxh - m1 - hm_.row(i).array() * m2);
          }
        }
        if (gn->requires_grad) {
          MatMap<S> gg(st.buffer(gn.get()).data(), 1, d);
          for (int i = 0; i < rows; ++i) gg.array() += gm_.row(i).array() * hm_.row(i).array();
        }
        if (bn->requires_grad) {
          MatMap<S> gb(st.buffer(bn.get()).data(), 1, d);
          for (int i = 0; i < rows; ++i) gb += gm_.row(i);
        }
      });
}

// Max-subtracted softmax along `axis` (negative axis counts from the back).
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis = -1) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  const int n = x.dim(axis);
  int64_t inner = 1, outer = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  std::vector<S> out(x.size());
  auto probs = std::make_shared<std::vector<S>>();  // saved for backward
  const S* xd = x.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * n * inner + in;
      S mx = xd[base];
      for (int i = 1; i < n; ++i) mx = std::max(mx, xd[base + i * inner]);
      S sum = S(0);
      for (int i = 0; i < n; ++i) {
        const S e = std::exp(xd[base + i * inner] - mx);
        out[static_cast<size_t>(base + i * inner)] = e;
        sum += e;
      }
      for (int i = 0; i < n; ++i) out[static_cast<size_t>(base + i * inner)] /= sum;
    }
  }
  *probs = out;
  auto xn = x.node();
  return detail::make_result<S>(
      "softmax", x.shape(), std::move(out), {x},
      [xn, probs, n, inner, outer](const std::vector<S>& g, GradStore<S>& st) {
        if (!xn->requires_grad) return;
        auto& gx = st.buffer(xn.get());
        const std::vector<S>& y = *probs;
        for (int64_t o = 0; o < outer; ++o) {
          for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            S dot = S(0);
            for (int i = 0; i < n; ++i) {
              const auto k = static_cast<size_t>(base + i * inner);
              dot += g[k] * y[k];
            }
            for (int i = 0; i < n; ++i) {
              const auto k = static_cast<size_t>(base + i * inner);
              gx[k] += y[k] * (g[k] - dot);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// attention

template <typename S>
struct AttentionCapture {
  int heads = 0, q_len = 0, k_len = 0;
  std::vector<S> probs;  // heads x q_len x k_len, post-softmax
};

// Scaled dot-product attention over (heads, len, head_dim) stacks; scale is
// 1/sqrt(head_dim), bidirectional (no mask).
template <typename S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                    AttentionCapture<S>* capture = nullptr) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || q.dim(0) != k.dim(0) ||
      q.dim(0) != v.dim(0) || q.dim(2) != k.dim(2) || k.dim(1) != v.dim(1) ||
      k.dim(2) != v.dim(2)) {
    throw ShapeError("attention: incompatible shapes q" + shape_str(q.shape()) + " k" +
                     shape_str(k.shape()) + " v" + shape_str(v.shape()));
  }
  const int h = q.dim(0), lq = q.dim(1), lk = k.dim(1), d = q.dim(2);
  const S sc = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));
  std::vector<S> out(q.size());
  auto probs = std::make_shared<std::vector<S>>(static_cast<size_t>(h) * lq * lk);
  for (int hd = 0; hd < h; ++hd) {
    ConstMatMap<S> qm(q.data() + static_cast<int64_t>(hd) * lq * d, lq, d);
    ConstMatMap<S> km(k.data() + static_cast<int64_t>(hd) * lk * d, lk, d);
    ConstMatMap<S> vm(v.data() + static_cast<int64_t>(hd) * lk * d, lk, d);
    MatMap<S> pm(probs->data() + static_cast<int64_t>(hd) * lq * lk, lq, lk);
    pm.noalias() = qm * km.transpose() * sc;
    for (int i = 0; i < lq; ++i) {
      S* row = pm.data() + static_cast<int64_t>(i) * lk;
      const S mx = detail::seq_max(row, lk);
      S z = S(0);
      for (int j = 0; j < lk; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      for (int j = 0; j < lk; ++j) row[j] /= z;
    }
    MatMap<S>(out.data() + static_cast<int64_t>(hd) * lq * d, lq, d).noalias() = pm * vm;
  }
  if (capture) {
    capture->heads = h;
    capture->q_len = lq;
    capture->k_len = lk;
    capture->probs = *probs;
  }
  auto qn = q.node(), kn = k.node(), vn = v.node();
  return detail::make_result<S>(
      "attention", q.shape(), std::move(out), {q, k, v},
      [qn, kn, vn, probs, h, lq, lk, d, sc](const std::vector<S>& g, GradStore<S>& st) {
        for (int hd = 0; hd < h; ++hd) {
          ConstMatMap<S> gm(g.data() + static_cast<int64_t>(hd) * lq * d, lq, d);
          ConstMatMap<S> pm(probs->data() + static_cast<int64_t>(hd) * lq * lk, lq, lk);
          ConstMatMap<S> qm(qn->data.data() + static_cast<int64_t>(hd) * lq * d, lq, d);
          ConstMatMap<S> km(kn->data.data() + static_cast<int64_t>(hd) * lk * d, lk, d);
          ConstMatMap<S> vm(vn->data.data() + static_cast<int64_t>(hd) * lk * d, lk, d);
          MatX<S> dp = gm * vm.transpose();                      // lq x lk
          MatX<S> ds(lq, lk);                                    // softmax backward
          for (int i = 0; i < lq; ++i) {
            const S dot = detail::seq_dot(dp.data() + static_cast<int64_t>(i) * lk,
                                          probs->data() + (static_cast<int64_t>(hd) * lq + i) * lk, lk);
            ds.row(i) = pm.row(i).array() * (dp.row(i).array() - dot);
          }
          if (qn->requires_grad) {
            MatMap<S> gq(st.buffer(qn.get()).data() + static_cast<int64_t>(hd) * lq * d, lq, d);
            gq.noalias() += sc * ds * km;
          }
          if (kn->requires_grad) {
            MatMap<S> gk(st.buffer(kn.get()).data() + static_cast<int64_t>(hd) * lk * d, lk, d);
            gk.noalias() += sc * ds.transpose() * qm;
          }
          if (vn->requires_grad) {
            MatMap<S> gv(st.buffer(vn.get()).data() + static_cast<int64_t>(hd) * lk * d, lk, d);
            gv.noalias() += pm.transpose() * gm;
          }
        }
      });
}

// (len, dim) -> (heads, len, dim/heads)
template <typename S>
Tensor<S> split_heads(const Tensor<S>& x, int heads) {
  if (x.rank() != 2 || x.dim(1) % heads != 0) {
    throw ShapeError("split_heads: shape " + shape_str(x.shape()) + " with heads=" +
                     std::to_string(heads));
  }
  const int l = x.dim(0), d = x.dim(1), hd = d / heads;
  std::vector<S> out(x.size());
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < l; ++i)
      for (int j = 0; j < hd; ++j)
        out[(static_cast<size_t>(h) * l + i) * hd + j] = x.data()[static_cast<size_t>(i) * d + h * hd + j];
  auto xn = x.node();
  return detail::make_result<S>(
      "split_heads", {heads, l, hd}, std::move(out), {x},
      [xn, heads, l, d, hd](const std::vector<S>& g, GradStore<S>& st) {
        if (!xn->requires_grad) return;
        auto& gx = st.buffer(xn.get());
        for (int h = 0; h < heads; ++h)
          for (int i = 0; i < l; ++i)
            for (int j = 0; j < hd; ++j)
              gx[static_cast<size_t>(i) * d + h * hd + j] += g[(static_cast<size_t>(h) * l + i) * hd + j];
      });
}

// (heads, len, head_dim) -> (len, heads*head_dim)
template <typename S>
Tensor<S> merge_heads(const Tensor<S>& x) {
  if (x.rank() != 3) throw ShapeError("merge_heads: shape " + shape_str(x.shape()));
  const int heads = x.dim(0), l = x.dim(1), hd = x.dim(2), d = heads * hd;
  std::vector<S> out(x.size());
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < l; ++i)
      for (int j = 0; j < hd; ++j)
        out[static_cast<size_t>(i) * d + h * hd + j] = x.data()[(static_cast<size_t>(h) * l + i) * hd + j];
  auto xn = x.node();
  return detail::make_result<S>(
      "merge_heads", {l, d}, std::move(out), {x},
      [xn, heads, l, d, hd](const std::vector<S>& g, GradStore<S>& st) {
        if (!xn->requires_grad) return;
        auto& gx = st.buffer(xn.get());
        for (int h = 0; h < heads; ++h)
          for (int i = 0; i < l; ++i)
            for (int j = 0; j < hd; ++j)
              gx[(static_cast<size_t>(h) * l + i) * hd + j] += g[static_cast<size_t>(i) * d + h * hd + j];
      });
}

// Same buffer, new dims.
template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                     " changes element count");
  }
  std::vector<S> out(x.values());
  auto xn = x.node();
  const auto n = static_cast<Eigen::Index>(x.size());
  return detail::make_result<S>("reshape", std::move(shape), std::move(out), {x},
                                [xn, n](const std::vector<S>& g, GradStore<S>& st) {
                                  if (!xn->requires_grad) return;
                                  ArrMap<S>(st.buffer(xn.get()).data(), n) +=
                                      ConstArrMap<S>(g.data(), n);
                                });
}

// ---------------------------------------------------------------------------
// reductions / losses

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  const auto n = static_cast<Eigen::Index>(x.size());
  std::vector<S> out{detail::seq_sum(x.data(), n)};
  auto xn = x.node();
  return detail::make_result<S>("sum", {}, std::move(out), {x},
                                [xn, n](const std::vector<S>& g, GradStore<S>& st) {
                                  if (!xn->requires_grad) return;
                                  ArrMap<S>(st.buffer(xn.get()).data(), n) += g[0];
                                });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  const auto n = static_cast<Eigen::Index>(x.size());
  std::vector<S> out{detail::seq_sum(x.data(), n) / static_cast<S>(n)};
  auto xn = x.node();
  return detail::make_result<S>("mean", {}, std::move(out), {x},
                                [xn, n](const std::vector<S>& g, GradStore<S>& st) {
                                  if (!xn->requires_grad) return;
                                  ArrMap<S>(st.buffer(xn.get()).data(), n) += g[0] / static_cast<S>(n);
                                });
}

// Mean over every element of (a-b)^2.
template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> d = sub(a, b);
  return mean(mul(d, d));
}

// Mean cross-entropy between rows of `logits` and integer labels; softmax
// and the label pick are fused for a clean backward.
template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<int>(labels.size())) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const int b = logits.dim(0), k = logits.dim(1);
  auto probs = std::make_shared<std::vector<S>>(logits.values());
  MatMap<S> pm(probs->data(), b, k);
  double total = 0.0;
  for (int i = 0; i < b; ++i) {
    if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= k)
      throw ValueError("softmax_cross_entropy: label out of range");
    S* row = probs->data() + static_cast<int64_t>(i) * k;
    const S mx = detail::seq_max(row, k);
    S z = S(0);
    for (int j = 0; j < k; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (int j = 0; j < k; ++j) row[j] /= z;
    total -= std::log(static_cast<double>(pm(i, labels[static_cast<size_t>(i)])));
  }
  std::vector<S> out{static_cast<S>(total / b)};
  auto ln = logits.node();
  return detail::make_result<S>(
      "softmax_cross_entropy", {}, std::move(out), {logits},
      [ln, probs, labels, b, k](const std::vector<S>& g, GradStore<S>& st) {
        if (!ln->requires_grad) return;
        MatMap<S> gl(st.buffer(ln.get()).data(), b, k);
        ConstMatMap<S> pm_(probs->data(), b, k);
        const S s = g[0] / static_cast<S>(b);
        for (int i = 0; i < b; ++i) {
          gl.row(i) += s * pm_.row(i);
          gl(i, labels[static_cast<size_t>(i)]) -= s;
        }
      });
}

}  // namespace stp
