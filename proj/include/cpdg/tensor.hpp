#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cpdg/common.hpp"

namespace cpdg {

// Dense row-major tensor of rank 0 (scalar), 1, or 2.
template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), T{0});
  }
  Tensor(std::vector<std::size_t> s, std::vector<T> d)
      : shape(std::move(s)), data(std::move(d)) {
    CPDG_REQUIRE(data.size() == numel_of(shape), "tensor data/shape mismatch");
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  static Tensor scalar(T v) { return Tensor({}, {v}); }
  static Tensor vec(std::vector<T> d) {
    auto n = d.size();
    return Tensor({n}, std::move(d));
  }
  static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape.back(); }

  T& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

// Reverse-mode tape. One tape per batch per thread; nodes are appended in
// topological order by construction, so backward is a single reverse sweep.
template <typename T>
class Tape {
 public:
  Tape() {
    static std::uint64_t next_uid = 0;
    uid_ = ++next_uid;
  }

  // Distinguishes tape instances across reuse of the same storage.
  std::uint64_t uid() const { return uid_; }

  Var leaf(Tensor<T> t, bool needs_grad) {
    return push(std::move(t.shape), std::move(t.data), needs_grad, "leaf", {});
  }
  Var constant(Tensor<T> t) { return leaf(std::move(t), false); }
  Var scalar_const(T v) { return constant(Tensor<T>::scalar(v)); }

  const std::vector<T>& value(Var v) const { return nodes_[v.id].value; }
  const std::vector<std::size_t>& shape(Var v) const { return nodes_[v.id].shape; }
  const std::vector<T>& grad(Var v) const { return nodes_[v.id].grad; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  T scalar_value(Var v) const {
    CPDG_REQUIRE(nodes_[v.id].value.size() == 1, "expected scalar");
    return nodes_[v.id].value[0];
  }
  std::size_t size() const { return nodes_.size(); }

  Tensor<T> tensor_of(Var v) const {
    return Tensor<T>(nodes_[v.id].shape, nodes_[v.id].value);
  }

  // ---- arithmetic ----------------------------------------------------------

  Var add(Var a, Var b) {
    const Node& na = nodes_[a.id];
    const Node& nb = nodes_[b.id];
    if (na.shape == nb.shape) {
      std::vector<T> out(na.value.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] + nb.value[i];
      return push_op(na.shape, std::move(out), "add", {a, b},
                     [a, b](Tape& t, Var o) {
                       t.accumulate(a, t.nodes_[o.id].grad);
                       t.accumulate(b, t.nodes_[o.id].grad);
                     });
    }
    // (m,n) + (n): broadcast the vector across rows
    if (na.shape.size() == 2 && nb.shape.size() == 1 && na.shape[1] == nb.shape[0]) {
      std::size_t m = na.shape[0], n = na.shape[1];
      std::vector<T> out(na.value.size());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          out[i * n + j] = na.value[i * n + j] + nb.value[j];
      return push_op(na.shape, std::move(out), "add", {a, b},
                     [a, b, m, n](Tape& t, Var o) {
                       const auto& g = t.nodes_[o.id].grad;
                       t.accumulate(a, g);
                       std::vector<T> gb(n, T{0});
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                       t.accumulate(b, gb);
                     });
    }
    fail("add: incompatible shapes ", shape_str(na.shape), " vs ", shape_str(nb.shape));
  }

  Var sub(Var a, Var b) {
    const Node& na = nodes_[a.id];
    const Node& nb = nodes_[b.id];
    CPDG_REQUIRE(na.shape == nb.shape, "sub: shape mismatch ", shape_str(na.shape),
                 " vs ", shape_str(nb.shape));
    std::vector<T> out(na.value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] - nb.value[i];
    return push_op(na.shape, std::move(out), "sub", {a, b}, [a, b](Tape& t, Var o) {
      const auto& g = t.nodes_[o.id].grad;
      t.accumulate(a, g);
      std::vector<T> neg(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
      t.accumulate(b, neg);
    });
  }

  Var mul(Var a, Var b) {
    const Node& na = nodes_[a.id];
    const Node& nb = nodes_[b.id];
    CPDG_REQUIRE(na.shape == nb.shape, "mul: shape mismatch ", shape_str(na.shape),
                 " vs ", shape_str(nb.shape));
    std::vector<T> out(na.value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] * nb.value[i];
    return push_op(na.shape, std::move(out), "mul", {a, b}, [a, b](Tape& t, Var o) {
      const auto& g = t.nodes_[o.id].grad;
      const auto& va = t.nodes_[a.id].value;
      const auto& vb = t.nodes_[b.id].value;
      std::vector<T> ga(g.size()), gb(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] = g[i] * vb[i];
        gb[i] = g[i] * va[i];
      }
      t.accumulate(a, ga);
      t.accumulate(b, gb);
    });
  }

  Var scale(Var a, T c) {
    const Node& na = nodes_[a.id];
    std::vector<T> out(na.value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] * c;
    return push_op(na.shape, std::move(out), "scale", {a}, [a, c](Tape& t, Var o) {
      const auto& g = t.nodes_[o.id].grad;
      std::vector<T> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * c;
      t.accumulate(a, ga);
    });
  }

  Var add_const(Var a, T c) {
    const Node& na = nodes_[a.id];
    std::vector<T> out(na.value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.value[i] + c;
    return push_op(na.shape, std::move(out), "add_const", {a}, [a](Tape& t, Var o) {
      t.accumulate(a, t.nodes_[o.id].grad);
    });
  }

  // (m,k)x(k,n) -> (m,n); (m,k)x(k) -> (m); (k)x(k,n) -> (n)
  Var matmul(Var a, Var b) {
    const Node& na = nodes_[a.id];
    const Node& nb = nodes_[b.id];
    if (na.shape.size() == 2 && nb.shape.size() == 2) {
      std::size_t m = na.shape[0], k = na.shape[1], n = nb.shape[1];
      CPDG_REQUIRE(nb.shape[0] == k, "matmul: ", shape_str(na.shape), " x ",
                   shape_str(nb.shape));
      std::vector<T> out(m * n, T{0});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T av = na.value[i * k + p];
          if (av == T{0}) continue;
          const T* brow = nb.value.data() + p * n;
          T* orow = out.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
      return push_op({m, n}, std::move(out), "matmul", {a, b},
                     [a, b, m, k, n](Tape& t, Var o) {
                       const auto& g = t.nodes_[o.id].grad;
                       const auto& va = t.nodes_[a.id].value;
                       const auto& vb = t.nodes_[b.id].value;
                       std::vector<T> ga(m * k, T{0}), gb(k * n, T{0});
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t p = 0; p < k; ++p) {
                           T acc{0};
                           for (std::size_t j = 0; j < n; ++j)
                             acc += g[i * n + j] * vb[p * n + j];
                           ga[i * k + p] = acc;
                         }
                       for (std::size_t p = 0; p < k; ++p)
                         for (std::size_t j = 0; j < n; ++j) {
                           T acc{0};
                           for (std::size_t i = 0; i < m; ++i)
                             acc += va[i * k + p] * g[i * n + j];
                           gb[p * n + j] = acc;
                         }
                       t.accumulate(a, ga);
                       t.accumulate(b, gb);
                     });
    }
    if (na.shape.size() == 2 && nb.shape.size() == 1) {
      std::size_t m = na.shape[0], k = na.shape[1];
      CPDG_REQUIRE(nb.shape[0] == k, "matmul: ", shape_str(na.shape), " x ",
                   shape_str(nb.shape));
      std::vector<T> out(m, T{0});
      for (std::size_t i = 0; i < m; ++i) {
        T acc{0};
        for (std::size_t p = 0; p < k; ++p) acc += na.value[i * k + p] * nb.value[p];
        out[i] = acc;
      }
      return push_op({m}, std::move(out), "matvec", {a, b},
                     [a, b, m, k](Tape& t, Var o) {
                       const auto& g = t.nodes_[o.id].grad;
                       const auto& va = t.nodes_[a.id].value;
                       const auto& vb = t.nodes_[b.id].value;
                       std::vector<T> ga(m * k), gb(k, T{0});
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t p = 0; p < k; ++p) {
                           ga[i * k + p] = g[i] * vb[p];
                           gb[p] += g[i] * va[i * k + p];
                         }
                       t.accumulate(a, ga);
                       t.accumulate(b, gb);
                     });
    }
    if (na.shape.size() == 1 && nb.shape.size() == 2) {
      std::size_t k = na.shape[0], n = nb.shape[1];
      CPDG_REQUIRE(nb.shape[0] == k, "matmul: ", shape_str(na.shape), " x ",
                   shape_str(nb.shape));
      std::vector<T> out(n, T{0});
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) out[j] += na.value[p] * nb.value[p * n + j];
      return push_op({n}, std::move(out), "vecmat", {a, b},
                     [a, b, k, n](Tape& t, Var o) {
                       const auto& g = t.nodes_[o.id].grad;
                       const auto& va = t.nodes_[a.id].value;
                       const auto& vb = t.nodes_[b.id].value;
                       std::vector<T> ga(k, T{0}), gb(k * n);
                       for (std::size_t p = 0; p < k; ++p)
                         for (std::size_t j = 0; j < n; ++j) {
                           ga[p] += g[j] * vb[p * n + j];
                           gb[p * n + j] = va[p] * g[j];
                         }
                       t.accumulate(a, ga);
                       t.accumulate(b, gb);
                     });
    }
    fail("matmul: unsupported ranks ", shape_str(na.shape), " x ", shape_str(nb.shape));
  }

  Var transpose(Var a) {
    const Node& na = nodes_[a.id];
    CPDG_REQUIRE(na.shape.size() == 2, "transpose needs rank 2");
    std::size_t m = na.shape[0], n = na.shape[1];
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j * m + i] = na.value[i * n + j];
    return push_op({n, m}, std::move(out), "transpose", {a},
                   [a, m, n](Tape& t, Var o) {
                     const auto& g = t.nodes_[o.id].grad;
                     std::vector<T> ga(m * n);
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = g[j * m + i];
                     t.accumulate(a, ga);
                   });
  }

  Var dot(Var a, Var b) {
    const Node& na = nodes_[a.id];
    const Node& nb = nodes_[b.id];
    CPDG_REQUIRE(na.shape.size() == 1 && na.shape == nb.shape, "dot: need equal vectors");
    T acc{0};
    for (std::size_t i = 0; i < na.value.size(); ++i) acc += na.value[i] * nb.value[i];
    return push_op({}, {acc}, "dot", {a, b}, [a, b](Tape& t, Var o) {
      T g = t.nodes_[o.id].grad[0];
      const auto& va = t.nodes_[a.id].value;
      const auto& vb = t.nodes_[b.id].value;
      std::vector<T> ga(va.size()), gb(va.size());
      for (std::size_t i = 0; i < va.size(); ++i) {
        ga[i] = g * vb[i];
        gb[i] = g * va[i];
      }
      t.accumulate(a, ga);
      t.accumulate(b, gb);
    });
  }

  // ---- structure -----------------------------------------------------------

  // rank-1 inputs -> one longer vector
  Var concat(const std::vector<Var>& parts) {
    CPDG_REQUIRE(!parts.empty(), "concat: empty input");
    std::size_t total = 0;
    for (Var p : parts) {
      CPDG_REQUIRE(nodes_[p.id].shape.size() == 1, "concat: rank-1 inputs only");
      total += nodes_[p.id].value.size();
    }
    std::vector<T> out;
    out.reserve(total);
    for (Var p : parts)
      out.insert(out.end(), nodes_[p.id].value.begin(), nodes_[p.id].value.end());
    auto parts_copy = parts;
    return push_op({total}, std::move(out), "concat", parts,
                   [parts_copy](Tape& t, Var o) {
                     const auto& g = t.nodes_[o.id].grad;
                     std::size_t off = 0;
                     for (Var p : parts_copy) {
                       std::size_t n = t.nodes_[p.id].value.size();
                       std::vector<T> gp(g.begin() + off, g.begin() + off + n);
                       t.accumulate(p, gp);
                       off += n;
                     }
                   });
  }

  // m rank-1 n-vectors -> (m,n)
  Var stack_rows(const std::vector<Var>& rows) {
    CPDG_REQUIRE(!rows.empty(), "stack_rows: empty input");
    std::size_t n = nodes_[rows[0].id].value.size();
    std::vector<T> out;
    out.reserve(rows.size() * n);
    for (Var r : rows) {
      CPDG_REQUIRE(nodes_[r.id].shape.size() == 1 && nodes_[r.id].value.size() == n,
                   "stack_rows: inconsistent row sizes");
      out.insert(out.end(), nodes_[r.id].value.begin(), nodes_[r.id].value.end());
    }
    auto rows_copy = rows;
    return push_op({rows.size(), n}, std::move(out), "stack_rows", rows,
                   [rows_copy, n](Tape& t, Var o) {
                     const auto& g = t.nodes_[o.id].grad;
                     for (std::size_t i = 0; i < rows_copy.size(); ++i) {
                       std::vector<T> gr(g.begin() + i * n, g.begin() + (i + 1) * n);
                       t.accumulate(rows_copy[i], gr);
                     }
                   });
  }

  // contiguous slice of a rank-1 vector
  Var slice(Var a, std::size_t begin, std::size_t end) {
    const Node& na = nodes_[a.id];
    CPDG_REQUIRE(na.shape.size() == 1 && begin < end && end <= na.value.size(),
                 "slice: bad range [", begin, ",", end, ") on ", shape_str(na.shape));
    std::vector<T> out(na.value.begin() + begin, na.value.begin() + end);
    return push_op({end - begin}, std::move(out), "slice", {a},
                   [a, begin, end](Tape& t, Var o) {
                     const auto& g = t.nodes_[o.id].grad;
                     std::vector<T> ga(t.nodes_[a.id].value.size(), T{0});
                     std::copy(g.begin(), g.end(), ga.begin() + begin);
                     t.accumulate(a, ga);
                   });
  }

  Var row(Var a, std::size_t i) {
    const Node& na = nodes_[a.id];
    CPDG_REQUIRE(na.shape.size() == 2 && i < na.shape[0], "row: bad index");
    std::size_t n = na.shape[1];
    std::vector<T> out(na.value.begin() + i * n, na.value.begin() + (i + 1) * n);
    return push_op({n}, std::move(out), "row", {a}, [a, i, n](Tape& t, Var o) {
      const auto& g = t.nodes_[o.id].grad;
      std::vector<T> ga(t.nodes_[a.id].value.size(), T{0});
      std::copy(g.begin(), g.end(), ga.begin() + i * n);
      t.accumulate(a, ga);
    });
  }

  Var mean_rows(Var a) {
    const Node& na = nodes_[a.id];
    CPDG_REQUIRE(na.shape.size() == 2, "mean_rows needs rank 2");
    std::size_t m = na.shape[0], n = na.shape[1];
    std::vector<T> out(n, T{0});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j] += na.value[i * n + j];
    for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<T>(m);
    return push_op({n}, std::move(out), "mean_rows", {a}, [a, m, n](Tape& t, Var o) {
      const auto& g = t.nodes_[o.id].grad;
      std::vector<T> ga(m * n);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = g[j] / static_cast<T>(m);
      t.accumulate(a, ga);
    });
  }

  Var sum(Var a) {
    const Node& na = nodes_[a.id];
    T acc{0};
    for (T v : na.value) acc += v;
    return push_op({}, {acc}, "sum", {a}, [a](Tape& t, Var o) {
      T g = t.nodes_[o.id].grad[0];
      std::vector<T> ga(t.nodes_[a.id].value.size(), g);
      t.accumulate(a, ga);
    });
  }

  Var mean(Var a) {
    const Node& na = nodes_[a.id];
    CPDG_REQUIRE(!na.value.empty(), "mean of empty tensor");
    return scale(sum(a), T{1} / static_cast<T>(na.value.size()));
  }

  // ---- elementwise nonlinearities -------------------------------------------

  Var sigmoid(Var a) {
    return unary(a, "sigmoid",
                 [](T x) { return x >= 0 ? T{1} / (T{1} + std::exp(-x))
                                         : std::exp(x) / (T{1} + std::exp(x)); },
                 [](T, T y) { return y * (T{1} - y); });
  }
  Var tanh_(Var a) {
    return unary(a, "tanh", [](T x) { return std::tanh(x); },
                 [](T, T y) { return T{1} - y * y; });
  }
  Var relu(Var a) {
    return unary(a, "relu", [](T x) { return x > 0 ? x : T{0}; },
                 [](T x, T) { return x > 0 ? T{1} : T{0}; });
  }
  Var cos_(Var a) {
    return unary(a, "cos", [](T x) { return std::cos(x); },
                 [](T x, T) { return -std::sin(x); });
  }

  // rank-1: softmax over the vector; rank-2: softmax per row
  Var softmax(Var a) {
    const Node& na = nodes_[a.id];
    std::size_t n = na.shape.empty() ? 1 : na.shape.back();
    std::size_t m = na.value.size() / n;
    std::vector<T> out(na.value.size());
    for (std::size_t i = 0; i < m; ++i) {
      const T* x = na.value.data() + i * n;
      T* y = out.data() + i * n;
      T mx = *std::max_element(x, x + n);
      T sum{0};
      for (std::size_t j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
      }
      for (std::size_t j = 0; j < n; ++j) y[j] /= sum;
    }
    return push_op(na.shape, std::move(out), "softmax", {a},
                   [a, m, n](Tape& t, Var o) {
                     const auto& g = t.nodes_[o.id].grad;
                     const auto& y = t.nodes_[o.id].value;
                     std::vector<T> ga(g.size());
                     for (std::size_t i = 0; i < m; ++i) {
                       T dot{0};
                       for (std::size_t j = 0; j < n; ++j)
                         dot += g[i * n + j] * y[i * n + j];
                       for (std::size_t j = 0; j < n; ++j)
                         ga[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
                     }
                     t.accumulate(a, ga);
                   });
  }

  // ---- losses / distances ----------------------------------------------------

  // Euclidean distance of two rank-1 vectors; gradient 0 at d = 0 by convention.
  Var euclidean_distance(Var a, Var b) {
    const Node& na = nodes_[a.id];
    const Node& nb = nodes_[b.id];
    CPDG_REQUIRE(na.shape.size() == 1 && na.shape == nb.shape,
                 "euclidean_distance: need equal-length vectors, got ",
                 shape_str(na.shape), " vs ", shape_str(nb.shape));
    T acc{0};
    for (std::size_t i = 0; i < na.value.size(); ++i) {
      T d = na.value[i] - nb.value[i];
      acc += d * d;
    }
    T dist = std::sqrt(acc);
    return push_op({}, {dist}, "euclidean_distance", {a, b},
                   [a, b](Tape& t, Var o) {
                     T d = t.nodes_[o.id].value[0];
                     if (d == T{0}) return;  // subgradient 0 at coincident points
                     T g = t.nodes_[o.id].grad[0] / d;
                     const auto& va = t.nodes_[a.id].value;
                     const auto& vb = t.nodes_[b.id].value;
                     std::vector<T> ga(va.size()), gb(va.size());
                     for (std::size_t i = 0; i < va.size(); ++i) {
                       T diff = (va[i] - vb[i]) * g;
                       ga[i] = diff;
                       gb[i] = -diff;
                     }
                     t.accumulate(a, ga);
                     t.accumulate(b, gb);
                   });
  }

  // max(d_pos - d_neg + margin, 0); subgradient 0 on the flat side.
  Var triplet_margin(Var d_pos, Var d_neg, T margin) {
    T v = scalar_value(d_pos) - scalar_value(d_neg) + margin;
    T out = v > 0 ? v : T{0};
    return push_op({}, {out}, "triplet_margin", {d_pos, d_neg},
                   [d_pos, d_neg](Tape& t, Var o) {
                     if (t.nodes_[o.id].value[0] <= T{0}) return;
                     T g = t.nodes_[o.id].grad[0];
                     t.accumulate(d_pos, {g});
                     t.accumulate(d_neg, {-g});
                   });
  }

  // Numerically stable binary cross-entropy on logits; target is a constant.
  Var bce_with_logits(Var logit, T target) {
    T x = scalar_value(logit);
    T loss = std::max(x, T{0}) - x * target + std::log1p(std::exp(-std::abs(x)));
    return push_op({}, {loss}, "bce_with_logits", {logit},
                   [logit, target](Tape& t, Var o) {
                     T x2 = t.nodes_[logit.id].value[0];
                     T sig = x2 >= 0 ? T{1} / (T{1} + std::exp(-x2))
                                     : std::exp(x2) / (T{1} + std::exp(x2));
                     T g = t.nodes_[o.id].grad[0] * (sig - target);
                     t.accumulate(logit, {g});
                   });
  }

  // ---- backward ---------------------------------------------------------------

  void backward(Var root) {
    CPDG_REQUIRE(nodes_[root.id].value.size() == 1, "backward root must be scalar");
    for (Node& n : nodes_) n.grad.assign(n.grad.size(), T{0});
    nodes_[root.id].grad.assign(1, T{1});
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward_fn || n.grad.empty()) continue;
      if (!n.needs_grad) continue;
      n.backward_fn(*this, Var{static_cast<std::uint32_t>(i)});
    }
  }

  void accumulate(Var v, const std::vector<T>& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    CPDG_REQUIRE(g.size() == n.grad.size(), "gradient size mismatch on ", n.op);
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

 private:
  struct Node {
    std::vector<std::size_t> shape;
    std::vector<T> value;
    std::vector<T> grad;
    std::string op;
    std::function<void(Tape&, Var)> backward_fn;
    bool needs_grad = false;
  };

  Var push(std::vector<std::size_t> shape, std::vector<T> value, bool needs_grad,
           const char* op, std::function<void(Tape&, Var)> fn) {
    for (T v : value)
      if (!std::isfinite(static_cast<double>(v)))
        fail("non-finite output of op '", op, "' (node ", nodes_.size(), ")");
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.op = op;
    n.backward_fn = std::move(fn);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var push_op(std::vector<std::size_t> shape, std::vector<T> value, const char* op,
              const std::vector<Var>& parents, std::function<void(Tape&, Var)> fn) {
    bool needs = false;
    for (Var p : parents) needs = needs || nodes_[p.id].needs_grad;
    if (needs) {
      for (Var p : parents) {
        Node& pn = nodes_[p.id];
        if (pn.needs_grad && pn.grad.empty()) pn.grad.assign(pn.value.size(), T{0});
      }
    }
    return push(std::move(shape), std::move(value), needs, op,
                needs ? std::move(fn) : nullptr);
  }

  template <typename FwdFn, typename BwdFn>
  Var unary(Var a, const char* op, FwdFn fwd, BwdFn bwd) {
    const Node& na = nodes_[a.id];
    std::vector<T> out(na.value.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(na.value[i]);
    return push_op(na.shape, std::move(out), op, {a}, [a, bwd](Tape& t, Var o) {
      const auto& g = t.nodes_[o.id].grad;
      const auto& x = t.nodes_[a.id].value;
      const auto& y = t.nodes_[o.id].value;
      std::vector<T> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bwd(x[i], y[i]);
      t.accumulate(a, ga);
    });
  }

  std::vector<Node> nodes_;
  std::uint64_t uid_ = 0;
};

// ---- recurrent cells and attention (composed from primitives) -----------------

template <typename T>
struct GruParamVars {
  // gates stacked: W* act on the input, U* on the hidden state
  Var w_r, u_r, b_r;
  Var w_z, u_z, b_z;
  Var w_n, u_n, b_n;
};

// h' = (1-z) * n + z * h  with  r = sig(xW_r + hU_r + b_r),
// z = sig(xW_z + hU_z + b_z),  n = tanh(xW_n + r*(hU_n) + b_n).
// Accepts rank-1 (single row) or rank-2 (batch of rows) x and h.
template <typename T>
Var gru_cell(Tape<T>& t, Var x, Var h, const GruParamVars<T>& p) {
  auto r = t.sigmoid(t.add(t.add(t.matmul(x, p.w_r), t.matmul(h, p.u_r)), p.b_r));
  auto z = t.sigmoid(t.add(t.add(t.matmul(x, p.w_z), t.matmul(h, p.u_z)), p.b_z));
  auto n = t.tanh_(t.add(t.add(t.matmul(x, p.w_n), t.mul(r, t.matmul(h, p.u_n))), p.b_n));
  auto one_minus_z = t.add_const(t.scale(z, T{-1}), T{1});
  return t.add(t.mul(one_minus_z, n), t.mul(z, h));
}

template <typename T>
struct RnnParamVars {
  Var w, u, b;
};

// h' = tanh(xW + hU + b)
template <typename T>
Var rnn_cell(Tape<T>& t, Var x, Var h, const RnnParamVars<T>& p) {
  return t.tanh_(t.add(t.add(t.matmul(x, p.w), t.matmul(h, p.u)), p.b));
}

// softmax(q . K^T / sqrt(d_k)) V  for a single rank-1 query.
template <typename T>
Var scaled_dot_attention(Tape<T>& t, Var q, Var keys, Var values) {
  std::size_t dk = t.shape(q)[0];
  auto scores = t.scale(t.matmul(keys, q), T{1} / std::sqrt(static_cast<T>(dk)));
  auto w = t.softmax(scores);
  return t.matmul(w, values);
}

}  // namespace cpdg
