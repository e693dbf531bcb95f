#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "klctl/error.hpp"
#include "klctl/parameters.hpp"
#include "klctl/tensor.hpp"

namespace klctl {

// Handle to a node of a Graph.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

struct AttentionSpec {
  std::size_t batch = 1;
  std::size_t query_len = 1;
  std::size_t key_len = 1;
  std::size_t heads = 1;
  bool causal = false;
  // batch * key_len flags, 1 = attend; empty means every key is valid.
  std::vector<std::uint8_t> key_mask;
};

// Define-by-run reverse-mode recorder. Each op evaluates eagerly, appends a
// node holding its value and a closure that pushes the output gradient back
// to its inputs. Nodes are stored in creation order, so the node list is
// topologically sorted by construction.
template <class T>
class Graph {
 public:
  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<RowMat>;
  using CMap = Eigen::Map<const RowMat>;
  using SMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
  using CSMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

  // With record=false no backward closures are kept (inference only).
  explicit Graph(bool record = true) : record_(record) { nodes_.reserve(512); }

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t size() const { return nodes_.size(); }
  const Tensor<T>& value(Var v) const { return node(v).value; }
  Shape shape(Var v) const { return node(v).value.shape; }
  const char* op_name(Var v) const { return node(v).op; }
  T item(Var v) const {
    const auto& t = value(v);
    if (t.size() != 1) throw StructuralError("item() on non-scalar " + to_string(t.shape));
    return t.data[0];
  }

  Var input(Tensor<T> t) { return push("input", std::move(t), {}, false, nullptr); }

  Var param(Parameter<T>& p) {
    Var v = push("param", p.value, {}, record_, nullptr);
    nodes_[v.id].param = &p;
    return v;
  }

  // --- elementwise -------------------------------------------------------

  // a + b; b may also be a 1xC row broadcast over the rows of a.
  Var add(Var a, Var b) {
    const Shape sa = shape(a), sb = shape(b);
    if (sa == sb) {
      Tensor<T> out(sa.rows, sa.cols);
      const auto& x = value(a).data;
      const auto& y = value(b).data;
      for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = x[i] + y[i];
      return push("add", std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
        const auto& go = g.nodes_[self].grad;
        g.accumulate(a, go);
        g.accumulate(b, go);
      });
    }
    if (sb.rows == 1 && sb.cols == sa.cols) {
      Tensor<T> out = value(a);
      const auto& y = value(b).data;
      for (std::size_t r = 0; r < sa.rows; ++r)
        for (std::size_t c = 0; c < sa.cols; ++c) out.data[r * sa.cols + c] += y[c];
      return push("add_row", std::move(out), {a, b}, [a, b, sa](Graph& g, std::size_t self) {
        const auto& go = g.nodes_[self].grad;
        g.accumulate(a, go);
        if (g.wants_grad(b)) {
          auto& gb = g.grad_of(b);
          for (std::size_t r = 0; r < sa.rows; ++r)
            for (std::size_t c = 0; c < sa.cols; ++c) gb[c] += go[r * sa.cols + c];
        }
      });
    }
    throw StructuralError("add: incompatible shapes " + to_string(sa) + " and " + to_string(sb));
  }

  Var sub(Var a, Var b) {
    require_same(a, b, "sub");
    Tensor<T> out = value(a);
    const auto& y = value(b).data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= y[i];
    return push("sub", std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
      const auto& go = g.nodes_[self].grad;
      g.accumulate(a, go);
      if (g.wants_grad(b)) {
        auto& gb = g.grad_of(b);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    require_same(a, b, "mul");
    Tensor<T> out = value(a);
    const auto& y = value(b).data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= y[i];
    return push("mul", std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
      const auto& go = g.nodes_[self].grad;
      const auto& x = g.value(a).data;
      const auto& y = g.value(b).data;
      if (g.wants_grad(a)) {
        auto& ga = g.grad_of(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i];
      }
      if (g.wants_grad(b)) {
        auto& gb = g.grad_of(b);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * x[i];
      }
    });
  }

  Var scale(Var a, T s) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v *= s;
    return push("scale", std::move(out), {a}, [a, s](Graph& g, std::size_t self) {
      if (!g.wants_grad(a)) return;
      const auto& go = g.nodes_[self].grad;
      auto& ga = g.grad_of(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += s * go[i];
    });
  }

  Var add_scalar(Var a, T s) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v += s;
    return push("add_scalar", std::move(out), {a}, [a](Graph& g, std::size_t self) {
      g.accumulate(a, g.nodes_[self].grad);
    });
  }

  Var exp(Var a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = std::exp(v);
    return push("exp", std::move(out), {a}, [a](Graph& g, std::size_t self) {
      if (!g.wants_grad(a)) return;
      const auto& n = g.nodes_[self];
      auto& ga = g.grad_of(a);
      for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * n.value.data[i];
    });
  }

  Var log(Var a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = std::log(v);
    return push("log", std::move(out), {a}, [a](Graph& g, std::size_t self) {
      if (!g.wants_grad(a)) return;
      const auto& go = g.nodes_[self].grad;
      const auto& x = g.value(a).data;
      auto& ga = g.grad_of(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / x[i];
    });
  }

  Var tanh(Var a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = std::tanh(v);
    return push("tanh", std::move(out), {a}, [a](Graph& g, std::size_t self) {
      if (!g.wants_grad(a)) return;
      const auto& n = g.nodes_[self];
      auto& ga = g.grad_of(a);
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        const T y = n.value.data[i];
        ga[i] += n.grad[i] * (T(1) - y * y);
      }
    });
  }

  Var relu(Var a) {
    Tensor<T> out = value(a);
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    return push("relu", std::move(out), {a}, [a](Graph& g, std::size_t self) {
      if (!g.wants_grad(a)) return;
      const auto& n = g.nodes_[self];
      auto& ga = g.grad_of(a);
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        if (n.value.data[i] > T(0)) ga[i] += n.grad[i];
    });
  }

  // --- linear algebra ----------------------------------------------------

  // a * b, or a * b^T when transpose_b is set.
  Var matmul(Var a, Var b, bool transpose_b = false) {
    const Shape sa = shape(a), sb = shape(b);
    const std::size_t inner = transpose_b ? sb.cols : sb.rows;
    const std::size_t out_cols = transpose_b ? sb.rows : sb.cols;
    if (sa.cols != inner) {
      throw StructuralError("matmul: " + to_string(sa) + " x " + to_string(sb) + (transpose_b ? "^T" : ""));
    }
    Tensor<T> out(sa.rows, out_cols);
    CMap A(value(a).data.data(), sa.rows, sa.cols);
    CMap B(value(b).data.data(), sb.rows, sb.cols);
    Map C(out.data.data(), sa.rows, out_cols);
    if (transpose_b) {
      C.noalias() = A * B.transpose();
    } else {
      C.noalias() = A * B;
    }
    return push("matmul", std::move(out), {a, b}, [a, b, sa, sb, transpose_b, out_cols](Graph& g, std::size_t self) {
      CMap G(g.nodes_[self].grad.data(), sa.rows, out_cols);
      CMap A(g.value(a).data.data(), sa.rows, sa.cols);
      CMap B(g.value(b).data.data(), sb.rows, sb.cols);
      if (g.wants_grad(a)) {
        Map GA(g.grad_of(a).data(), sa.rows, sa.cols);
        if (transpose_b) {
          GA.noalias() += G * B;
        } else {
          GA.noalias() += G * B.transpose();
        }
      }
      if (g.wants_grad(b)) {
        Map GB(g.grad_of(b).data(), sb.rows, sb.cols);
        if (transpose_b) {
          GB.noalias() += G.transpose() * A;
        } else {
          GB.noalias() += A.transpose() * G;
        }
      }
    });
  }

  // Row gather: out[i] = table[indices[i]]. Embedding lookup, CLS selection
  // and row broadcasting all go through here.
  Var gather_rows(Var table, std::vector<std::size_t> indices, const char* op = "gather_rows") {
    const Shape st = shape(table);
    Tensor<T> out(indices.size(), st.cols);
    const auto& src = value(table).data;
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= st.rows) {
        throw StructuralError(std::string(op) + ": row " + std::to_string(indices[i]) + " out of " +
                              to_string(st));
      }
      std::copy_n(src.begin() + indices[i] * st.cols, st.cols, out.data.begin() + i * st.cols);
    }
    return push(op, std::move(out), {table}, [table, idx = std::move(indices), cols = st.cols](Graph& g, std::size_t self) {
      if (!g.wants_grad(table)) return;
      const auto& go = g.nodes_[self].grad;
      auto& gt = g.grad_of(table);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t c = 0; c < cols; ++c) gt[idx[i] * cols + c] += go[i * cols + c];
    });
  }

  Var embedding(Var table, const std::vector<int>& ids) {
    std::vector<std::size_t> idx(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0) throw StructuralError("embedding: negative id");
      idx[i] = static_cast<std::size_t>(ids[i]);
    }
    return gather_rows(table, std::move(idx), "embedding");
  }

  Var concat_cols(Var a, Var b) {
    const Shape sa = shape(a), sb = shape(b);
    if (sa.rows != sb.rows) throw StructuralError("concat_cols: " + to_string(sa) + " with " + to_string(sb));
    const std::size_t cols = sa.cols + sb.cols;
    Tensor<T> out(sa.rows, cols);
    for (std::size_t r = 0; r < sa.rows; ++r) {
      std::copy_n(value(a).data.begin() + r * sa.cols, sa.cols, out.data.begin() + r * cols);
      std::copy_n(value(b).data.begin() + r * sb.cols, sb.cols, out.data.begin() + r * cols + sa.cols);
    }
    return push("concat_cols", std::move(out), {a, b}, [a, b, sa, sb, cols](Graph& g, std::size_t self) {
      const auto& go = g.nodes_[self].grad;
      if (g.wants_grad(a)) {
        auto& ga = g.grad_of(a);
        for (std::size_t r = 0; r < sa.rows; ++r)
          for (std::size_t c = 0; c < sa.cols; ++c) ga[r * sa.cols + c] += go[r * cols + c];
      }
      if (g.wants_grad(b)) {
        auto& gb = g.grad_of(b);
        for (std::size_t r = 0; r < sb.rows; ++r)
          for (std::size_t c = 0; c < sb.cols; ++c) gb[r * sb.cols + c] += go[r * cols + sa.cols + c];
      }
    });
  }

  Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    const Shape sa = shape(a);
    if (count == 0 || begin + count > sa.cols) {
      throw StructuralError("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " +
                            to_string(sa));
    }
    Tensor<T> out(sa.rows, count);
    for (std::size_t r = 0; r < sa.rows; ++r)
      std::copy_n(value(a).data.begin() + r * sa.cols + begin, count, out.data.begin() + r * count);
    return push("slice_cols", std::move(out), {a}, [a, sa, begin, count](Graph& g, std::size_t self) {
      if (!g.wants_grad(a)) return;
      const auto& go = g.nodes_[self].grad;
      auto& ga = g.grad_of(a);
      for (std::size_t r = 0; r < sa.rows; ++r)
        for (std::size_t c = 0; c < count; ++c) ga[r * sa.cols + begin + c] += go[r * count + c];
    });
  }

  // --- reductions --------------------------------------------------------

  Var sum_all(Var a) {
    double acc = 0.0;
    for (T v : value(a).data) acc += v;
    return push("sum_all", Tensor<T>::scalar(static_cast<T>(acc)), {a}, [a](Graph& g, std::size_t self) {
      if (!g.wants_grad(a)) return;
      const T go = g.nodes_[self].grad[0];
      for (auto& v : g.grad_of(a)) v += go;
    });
  }

  Var mean_all(Var a) {
    const std::size_t n = value(a).size();
    double acc = 0.0;
    for (T v : value(a).data) acc += v;
    return push("mean_all", Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n))), {a},
                [a, n](Graph& g, std::size_t self) {
                  if (!g.wants_grad(a)) return;
                  const T go = g.nodes_[self].grad[0] / static_cast<T>(n);
                  for (auto& v : g.grad_of(a)) v += go;
                });
  }

  // Per-row sum: [R x C] -> [R x 1].
  Var sum_rows(Var a) {
    const Shape sa = shape(a);
    Tensor<T> out(sa.rows, 1);
    for (std::size_t r = 0; r < sa.rows; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < sa.cols; ++c) acc += value(a).data[r * sa.cols + c];
      out.data[r] = static_cast<T>(acc);
    }
    return push("sum_rows", std::move(out), {a}, [a, sa](Graph& g, std::size_t self) {
      if (!g.wants_grad(a)) return;
      const auto& go = g.nodes_[self].grad;
      auto& ga = g.grad_of(a);
      for (std::size_t r = 0; r < sa.rows; ++r)
        for (std::size_t c = 0; c < sa.cols; ++c) ga[r * sa.cols + c] += go[r];
    });
  }

  // --- normalization / attention / loss ----------------------------------

  // Row softmax with max subtraction.
  Var softmax_rows(Var a) {
    const Shape sa = shape(a);
    Tensor<T> out = value(a);
    for (std::size_t r = 0; r < sa.rows; ++r) softmax_inplace(out.data.data() + r * sa.cols, sa.cols);
    return push("softmax", std::move(out), {a}, [a, sa](Graph& g, std::size_t self) {
      if (!g.wants_grad(a)) return;
      const auto& n = g.nodes_[self];
      auto& ga = g.grad_of(a);
      for (std::size_t r = 0; r < sa.rows; ++r) {
        const T* y = n.value.data.data() + r * sa.cols;
        const T* gy = n.grad.data() + r * sa.cols;
        T dot = 0;
        for (std::size_t c = 0; c < sa.cols; ++c) dot += gy[c] * y[c];
        for (std::size_t c = 0; c < sa.cols; ++c) ga[r * sa.cols + c] += y[c] * (gy[c] - dot);
      }
    });
  }

  // Row-wise layer normalization with 1xC gain and bias.
  Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5)) {
    const Shape sx = shape(x);
    if (shape(gain) != Shape{1, sx.cols} || shape(bias) != Shape{1, sx.cols}) {
      throw StructuralError("layer_norm: gain/bias must be 1x" + std::to_string(sx.cols));
    }
    const std::size_t R = sx.rows, C = sx.cols;
    auto xhat = std::make_shared<std::vector<T>>(R * C);
    auto rstd = std::make_shared<std::vector<T>>(R);
    Tensor<T> out(R, C);
    const auto& xv = value(x).data;
    const auto& gv = value(gain).data;
    const auto& bv = value(bias).data;
    for (std::size_t r = 0; r < R; ++r) {
      const T* row = xv.data() + r * C;
      T mean = 0;
      for (std::size_t c = 0; c < C; ++c) mean += row[c];
      mean /= static_cast<T>(C);
      T var = 0;
      for (std::size_t c = 0; c < C; ++c) var += (row[c] - mean) * (row[c] - mean);
      var /= static_cast<T>(C);
      const T rs = T(1) / std::sqrt(var + eps);
      (*rstd)[r] = rs;
      for (std::size_t c = 0; c < C; ++c) {
        const T h = (row[c] - mean) * rs;
        (*xhat)[r * C + c] = h;
        out.data[r * C + c] = h * gv[c] + bv[c];
      }
    }
    return push("layer_norm", std::move(out), {x, gain, bias}, [x, gain, bias, R, C, xhat, rstd](Graph& g, std::size_t self) {
      const auto& go = g.nodes_[self].grad;
      const auto& gv = g.value(gain).data;
      if (g.wants_grad(gain) || g.wants_grad(bias)) {
        const bool wg = g.wants_grad(gain), wb = g.wants_grad(bias);
        std::vector<T>* gg = wg ? &g.grad_of(gain) : nullptr;
        std::vector<T>* gb = wb ? &g.grad_of(bias) : nullptr;
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) {
            if (gg) (*gg)[c] += go[r * C + c] * (*xhat)[r * C + c];
            if (gb) (*gb)[c] += go[r * C + c];
          }
      }
      if (!g.wants_grad(x)) return;
      auto& gx = g.grad_of(x);
      std::vector<T> dh(C);
      for (std::size_t r = 0; r < R; ++r) {
        T mean_dh = 0, mean_dh_h = 0;
        for (std::size_t c = 0; c < C; ++c) {
          dh[c] = go[r * C + c] * gv[c];
          mean_dh += dh[c];
          mean_dh_h += dh[c] * (*xhat)[r * C + c];
        }
        mean_dh /= static_cast<T>(C);
        mean_dh_h /= static_cast<T>(C);
        for (std::size_t c = 0; c < C; ++c) {
          gx[r * C + c] += (*rstd)[r] * (dh[c] - mean_dh - (*xhat)[r * C + c] * mean_dh_h);
        }
      }
    });
  }

  // Multi-head scaled dot-product attention. q is [batch*query_len, d],
  // k and v are [batch*key_len, d]; heads split the d columns evenly.
  Var attention(Var q, Var k, Var v, AttentionSpec spec) {
    const Shape sq = shape(q), sk = shape(k), sv = shape(v);
    const std::size_t B = spec.batch, Lq = spec.query_len, Lk = spec.key_len, H = spec.heads;
    const std::size_t d = sq.cols;
    if (H == 0 || d % H != 0) throw StructuralError("attention: width " + std::to_string(d) + " not divisible by heads");
    if (sq.rows != B * Lq || sk != Shape{B * Lk, d} || sv != Shape{B * Lk, d}) {
      throw StructuralError("attention: q " + to_string(sq) + ", k " + to_string(sk) + ", v " + to_string(sv));
    }
    if (!spec.key_mask.empty() && spec.key_mask.size() != B * Lk) {
      throw StructuralError("attention: key mask has " + std::to_string(spec.key_mask.size()) + " entries");
    }
    const std::size_t dh = d / H;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    auto probs = std::make_shared<std::vector<T>>(B * H * Lq * Lk);
    Tensor<T> out(B * Lq, d);
    const T* qd = value(q).data.data();
    const T* kd = value(k).data.data();
    const T* vd = value(v).data.data();
    RowMat S(Lq, Lk);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < H; ++h) {
        CSMap Q(qd + b * Lq * d + h * dh, Lq, dh, Eigen::OuterStride<>(d));
        CSMap K(kd + b * Lk * d + h * dh, Lk, dh, Eigen::OuterStride<>(d));
        CSMap V(vd + b * Lk * d + h * dh, Lk, dh, Eigen::OuterStride<>(d));
        S.noalias() = (Q * K.transpose()) * scale;
        Map P(probs->data() + ((b * H + h) * Lq) * Lk, Lq, Lk);
        for (std::size_t i = 0; i < Lq; ++i) {
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j < Lk; ++j) {
            if (allowed(spec, b, i, j)) mx = std::max(mx, S(i, j));
          }
          T total = 0;
          for (std::size_t j = 0; j < Lk; ++j) {
            const T e = allowed(spec, b, i, j) ? std::exp(S(i, j) - mx) : T(0);
            P(i, j) = e;
            total += e;
          }
          for (std::size_t j = 0; j < Lk; ++j) P(i, j) = total > 0 ? P(i, j) / total : T(0);
        }
        SMap O(out.data.data() + b * Lq * d + h * dh, Lq, dh, Eigen::OuterStride<>(d));
        O.noalias() = P * V;
      }
    }
    return push("attention", std::move(out), {q, k, v}, [q, k, v, B, Lq, Lk, H, d, dh, scale, probs](Graph& g, std::size_t self) {
      const T* go = g.nodes_[self].grad.data();
      const T* qd = g.value(q).data.data();
      const T* kd = g.value(k).data.data();
      const T* vd = g.value(v).data.data();
      const bool wq = g.wants_grad(q), wk = g.wants_grad(k), wv = g.wants_grad(v);
      T* gq = wq ? g.grad_of(q).data() : nullptr;
      T* gk = wk ? g.grad_of(k).data() : nullptr;
      T* gv = wv ? g.grad_of(v).data() : nullptr;
      RowMat dP(Lq, Lk), dS(Lq, Lk);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          const std::size_t qo = b * Lq * d + h * dh, ko = b * Lk * d + h * dh;
          CSMap dO(go + qo, Lq, dh, Eigen::OuterStride<>(d));
          CSMap Q(qd + qo, Lq, dh, Eigen::OuterStride<>(d));
          CSMap K(kd + ko, Lk, dh, Eigen::OuterStride<>(d));
          CSMap V(vd + ko, Lk, dh, Eigen::OuterStride<>(d));
          CMap P(probs->data() + ((b * H + h) * Lq) * Lk, Lq, Lk);
          if (wv) {
            SMap dV(gv + ko, Lk, dh, Eigen::OuterStride<>(d));
            dV.noalias() += P.transpose() * dO;
          }
          if (!wq && !wk) continue;
          dP.noalias() = dO * V.transpose();
          for (std::size_t i = 0; i < Lq; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j < Lk; ++j) dot += dP(i, j) * P(i, j);
            for (std::size_t j = 0; j < Lk; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * scale;
          }
          if (wq) {
            SMap dQ(gq + qo, Lq, dh, Eigen::OuterStride<>(d));
            dQ.noalias() += dS * K;
          }
          if (wk) {
            SMap dK(gk + ko, Lk, dh, Eigen::OuterStride<>(d));
            dK.noalias() += dS.transpose() * Q;
          }
        }
      }
    });
  }

  // Summed token negative log-likelihood over rows whose mask is set:
  // sum_i mask_i * (logsumexp(logits_i) - logits_i[target_i]).
  Var cross_entropy(Var logits, const std::vector<int>& targets, const std::vector<std::uint8_t>& mask) {
    const Shape sl = shape(logits);
    if (targets.size() != sl.rows || mask.size() != sl.rows) {
      throw StructuralError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + to_string(sl));
    }
    for (std::size_t r = 0; r < sl.rows; ++r) {
      if (mask[r] && (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= sl.cols)) {
        throw InputError("cross_entropy: target id " + std::to_string(targets[r]) + " outside vocabulary of " +
                         std::to_string(sl.cols));
      }
    }
    const std::size_t V = sl.cols;
    auto probs = std::make_shared<std::vector<T>>(value(logits).data);
    double total = 0.0;
    for (std::size_t r = 0; r < sl.rows; ++r) {
      if (!mask[r]) continue;
      T* row = probs->data() + r * V;
      const T target_logit = row[targets[r]];
      T mx = row[0];
      for (std::size_t c = 1; c < V; ++c) mx = std::max(mx, row[c]);
      double sum = 0.0;
      for (std::size_t c = 0; c < V; ++c) sum += std::exp(static_cast<double>(row[c] - mx));
      total += static_cast<double>(mx) + std::log(sum) - static_cast<double>(target_logit);
      softmax_inplace(row, V);
    }
    return push("cross_entropy", Tensor<T>::scalar(static_cast<T>(total)), {logits},
                [logits, targets, mask, probs, V](Graph& g, std::size_t self) {
                  if (!g.wants_grad(logits)) return;
                  const T go = g.nodes_[self].grad[0];
                  auto& gl = g.grad_of(logits);
                  for (std::size_t r = 0; r < mask.size(); ++r) {
                    if (!mask[r]) continue;
                    for (std::size_t c = 0; c < V; ++c) gl[r * V + c] += go * (*probs)[r * V + c];
                    gl[r * V + targets[r]] -= go;
                  }
                });
  }

  // --- backward ----------------------------------------------------------

  // Reverse sweep from a scalar loss. Parameter gradients are added into
  // Parameter::grad, so callers zero them between steps.
  void backward(Var loss) {
    if (!record_) throw StructuralError("backward on a graph built without recording");
    if (value(loss).size() != 1) throw StructuralError("backward: loss must be scalar, got " + to_string(shape(loss)));
    for (auto& n : nodes_) n.grad.clear();
    grad_of(loss)[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.param != nullptr) {
        auto& pg = n.param->grad.data;
        for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += n.grad[j];
      } else if (n.back) {
        n.back(*this, i);
      }
    }
  }

  // Gradient w.r.t. an intermediate node after backward(); zeros if none flowed.
  Tensor<T> gradient(Var v) const {
    const Node& n = node(v);
    Tensor<T> t(n.value.rows(), n.value.cols());
    if (!n.grad.empty()) t.data = n.grad;
    return t;
  }

 private:
  using Backward = std::function<void(Graph&, std::size_t)>;

  struct Node {
    const char* op = "";
    Tensor<T> value;
    std::vector<T> grad;
    Backward back;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
  };

  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw StructuralError("unknown graph node");
    return nodes_[v.id];
  }

  static bool allowed(const AttentionSpec& s, std::size_t b, std::size_t i, std::size_t j) {
    if (s.causal && j > i) return false;
    return s.key_mask.empty() || s.key_mask[b * s.key_len + j] != 0;
  }

  static void softmax_inplace(T* row, std::size_t n) {
    T mx = row[0];
    for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, row[c]);
    T total = 0;
    for (std::size_t c = 0; c < n; ++c) {
      row[c] = std::exp(row[c] - mx);
      total += row[c];
    }
    for (std::size_t c = 0; c < n; ++c) row[c] /= total;
  }

  void require_same(Var a, Var b, const char* op) const {
    if (shape(a) != shape(b)) {
      throw StructuralError(std::string(op) + ": shape " + to_string(shape(a)) + " vs " + to_string(shape(b)));
    }
  }

  bool wants_grad(Var v) const { return nodes_[v.id].needs_grad; }

  std::vector<T>& grad_of(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }

  void accumulate(Var v, const std::vector<T>& g) {
    if (!wants_grad(v)) return;
    Node& n = nodes_[v.id];
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    auto& dst = n.grad;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  Var push(const char* op, Tensor<T> value, std::initializer_list<Var> inputs, Backward back) {
    bool needs = false;
    for (Var in : inputs) needs = needs || nodes_[in.id].needs_grad;
    return push(op, std::move(value), inputs, record_ && needs, needs ? std::move(back) : Backward{});
  }

  Var push(const char* op, Tensor<T> value, std::initializer_list<Var>, bool needs_grad, Backward back) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op + " (node " + std::to_string(nodes_.size()) +
                         ")");
    }
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace klctl
