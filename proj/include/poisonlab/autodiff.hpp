#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "poisonlab/errors.hpp"
#include "poisonlab/tensor.hpp"

// Reverse-mode automatic differentiation on an eagerly built graph.
//
// The one property everything downstream leans on: each op's backward rule
// is written in terms of these same ops, so the nodes produced by backward()
// form a differentiable graph themselves. Calling backward() on a scalar
// built from first-order gradients yields exact second-order derivatives.
// That is how the poison crafting objective (a function of parameter
// gradients) gets differentiated with respect to pixels.
//
// Conventions:
//  - Nodes hold strong references to parents; backward closures may also
//    capture the node itself, but only weakly, so graphs never cycle.
//  - A backward rule returns one contribution per parent; a null entry means
//    "derivative is identically zero", which is also how relu's second
//    derivative is pinned to zero almost everywhere (the step mask is a
//    gradient dead end by construction).
//  - An op without a backward rule is fine to evaluate; asking backward()
//    to differentiate through it raises a capability error naming the op.

namespace poisonlab::ad {

template <class T>
struct Node;

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
struct Node {
  Tensor<T> value;
  std::vector<Var<T>> parents;
  // Maps the gradient at this node to gradient contributions for each
  // parent (as graph nodes, see above). Null for leaves and for ops that
  // cannot be differentiated through.
  std::function<std::vector<Var<T>>(const Var<T>&)> vjp;
  bool requires_grad = false;
  const char* op = "leaf";
};

template <class T>
Var<T> make_node(const char* op, Tensor<T> value, std::vector<Var<T>> parents,
                 std::function<std::vector<Var<T>>(const Var<T>&)> vjp) {
  auto n = std::make_shared<Node<T>>();
  n->op = op;
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->vjp = std::move(vjp);
  for (const auto& p : n->parents)
    if (p && p->requires_grad) n->requires_grad = true;
  return n;
}

template <class T>
Var<T> constant(Tensor<T> value) {
  return make_node<T>("const", std::move(value), {}, nullptr);
}

template <class T>
Var<T> constant_scalar(T value) {
  return constant(Tensor<T>::scalar(value));
}

template <class T>
Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
  auto n = make_node<T>("leaf", std::move(value), {}, nullptr);
  n->requires_grad = requires_grad;
  return n;
}

template <class T>
Var<T> detach(const Var<T>& x) {
  return constant(Tensor<T>(x->value));
}

// ---- elementwise arithmetic -------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value, b->value, "add");
  Tensor<T> out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
  return make_node<T>("add", std::move(out), {a, b},
                      [](const Var<T>& g) { return std::vector<Var<T>>{g, g}; });
}

template <class T>
Var<T> neg(const Var<T>& a) {
  Tensor<T> out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = -a->value[i];
  return make_node<T>("neg", std::move(out), {a},
                      [](const Var<T>& g) { return std::vector<Var<T>>{neg(g)}; });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value, b->value, "sub");
  Tensor<T> out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
  return make_node<T>("sub", std::move(out), {a, b}, [](const Var<T>& g) {
    return std::vector<Var<T>>{g, neg(g)};
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value, b->value, "mul");
  Tensor<T> out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
  return make_node<T>("mul", std::move(out), {a, b}, [a, b](const Var<T>& g) {
    return std::vector<Var<T>>{mul(g, b), mul(g, a)};
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * c;
  return make_node<T>("scale", std::move(out), {a}, [c](const Var<T>& g) {
    return std::vector<Var<T>>{scale(g, c)};
  });
}

template <class T>
Var<T> recip(const Var<T>& a) {
  Tensor<T> out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = T(1) / a->value[i];
  auto n = make_node<T>("recip", std::move(out), {a}, nullptr);
  std::weak_ptr<Node<T>> self = n;
  n->vjp = [self](const Var<T>& g) {
    auto y = self.lock();
    check_internal(bool(y), "recip backward outlived its node");
    // d(1/x)/dx = -1/x^2 = -y^2
    return std::vector<Var<T>>{neg(mul(g, mul(y, y)))};
  };
  return n;
}

template <class T>
Var<T> exp(const Var<T>& a) {
  Tensor<T> out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = std::exp(a->value[i]);
  auto n = make_node<T>("exp", std::move(out), {a}, nullptr);
  std::weak_ptr<Node<T>> self = n;
  n->vjp = [self](const Var<T>& g) {
    auto y = self.lock();
    check_internal(bool(y), "exp backward outlived its node");
    return std::vector<Var<T>>{mul(g, y)};
  };
  return n;
}

template <class T>
Var<T> log(const Var<T>& a) {
  Tensor<T> out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = std::log(a->value[i]);
  return make_node<T>("log", std::move(out), {a}, [a](const Var<T>& g) {
    return std::vector<Var<T>>{mul(g, recip(a))};
  });
}

template <class T>
Var<T> sqrt(const Var<T>& a) {
  Tensor<T> out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = std::sqrt(a->value[i]);
  auto n = make_node<T>("sqrt", std::move(out), {a}, nullptr);
  std::weak_ptr<Node<T>> self = n;
  n->vjp = [self](const Var<T>& g) {
    auto y = self.lock();
    check_internal(bool(y), "sqrt backward outlived its node");
    return std::vector<Var<T>>{scale(mul(g, recip(y)), T(0.5))};
  };
  return n;
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  Tensor<T> out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = std::tanh(a->value[i]);
  auto n = make_node<T>("tanh", std::move(out), {a}, nullptr);
  std::weak_ptr<Node<T>> self = n;
  n->vjp = [self](const Var<T>& g) {
    auto y = self.lock();
    check_internal(bool(y), "tanh backward outlived its node");
    auto ones = constant(Tensor<T>::full(y->value.shape, T(1)));
    return std::vector<Var<T>>{mul(g, sub(ones, mul(y, y)))};
  };
  return n;
}

// a * [ref > 0], the building block for relu's gradient. The mask source is
// deliberately a gradient dead end (null contribution): the step function's
// derivative is zero almost everywhere, so relu contributes nothing to
// second-order terms. Sitting exactly on the kink is measure-zero and the
// finite-difference tests resample away from it.
template <class T>
Var<T> mask_pos_mul(const Var<T>& a, const Var<T>& ref) {
  require_same_shape(a->value, ref->value, "mask_pos_mul");
  Tensor<T> out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = ref->value[i] > T(0) ? a->value[i] : T(0);
  return make_node<T>("mask_pos_mul", std::move(out), {a, ref},
                      [ref](const Var<T>& g) {
                        return std::vector<Var<T>>{mask_pos_mul(g, ref), nullptr};
                      });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a->value.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = a->value[i] > T(0) ? a->value[i] : T(0);
  return make_node<T>("relu", std::move(out), {a}, [a](const Var<T>& g) {
    return std::vector<Var<T>>{mask_pos_mul(g, a)};
  });
}

// ---- shape & reduction ops --------------------------------------------------

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> out = a->value.reshaped(s);
  Shape back = a->value.shape;
  return make_node<T>("reshape", std::move(out), {a},
                      [back](const Var<T>& g) {
                        return std::vector<Var<T>>{reshape(g, back)};
                      });
}

template <class T>
Var<T> bcast(const Var<T>& s, Shape shape);

template <class T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (std::int64_t i = 0; i < a->value.numel(); ++i) acc += a->value[i];
  Shape back = a->value.shape;
  return make_node<T>("sum", Tensor<T>::scalar(acc), {a},
                      [back](const Var<T>& g) {
                        return std::vector<Var<T>>{bcast(g, back)};
                      });
}

template <class T>
Var<T> bcast(const Var<T>& s, Shape shape) {
  if (s->value.numel() != 1) fail(ErrorKind::usage, "bcast wants a scalar");
  Tensor<T> out = Tensor<T>::full(shape, s->value[0]);
  return make_node<T>("bcast", std::move(out), {s}, [](const Var<T>& g) {
    return std::vector<Var<T>>{sum(g)};
  });
}

template <class T>
Var<T> tile_cols(const Var<T>& v, int m);

// Row sums: [n,m] -> [n].
template <class T>
Var<T> rowsum(const Var<T>& a) {
  if (a->value.rank() != 2) fail(ErrorKind::usage, "rowsum wants rank 2");
  int n = a->value.dim(0), m = a->value.dim(1);
  Tensor<T> out({n});
  for (int i = 0; i < n; ++i) {
    T acc = 0;
    for (int j = 0; j < m; ++j) acc += a->value.at2(i, j);
    out[i] = acc;
  }
  return make_node<T>("rowsum", std::move(out), {a}, [m](const Var<T>& g) {
    return std::vector<Var<T>>{tile_cols(g, m)};
  });
}

// Repeat a length-n vector across m columns: [n] -> [n,m].
template <class T>
Var<T> tile_cols(const Var<T>& v, int m) {
  if (v->value.rank() != 1) fail(ErrorKind::usage, "tile_cols wants rank 1");
  int n = v->value.dim(0);
  Tensor<T> out({n, m});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.at2(i, j) = v->value[i];
  return make_node<T>("tile_cols", std::move(out), {v}, [](const Var<T>& g) {
    return std::vector<Var<T>>{rowsum(g)};
  });
}

template <class T>
Var<T> tile_rows(const Var<T>& v, int n);

// Column sums: [n,m] -> [m].
template <class T>
Var<T> colsum(const Var<T>& a) {
  if (a->value.rank() != 2) fail(ErrorKind::usage, "colsum wants rank 2");
  int n = a->value.dim(0), m = a->value.dim(1);
  Tensor<T> out({m});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out[j] += a->value.at2(i, j);
  return make_node<T>("colsum", std::move(out), {a}, [n](const Var<T>& g) {
    return std::vector<Var<T>>{tile_rows(g, n)};
  });
}

// Repeat a length-m vector across n rows: [m] -> [n,m].
template <class T>
Var<T> tile_rows(const Var<T>& v, int n) {
  if (v->value.rank() != 1) fail(ErrorKind::usage, "tile_rows wants rank 1");
  int m = v->value.dim(0);
  Tensor<T> out({n, m});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.at2(i, j) = v->value[j];
  return make_node<T>("tile_rows", std::move(out), {v}, [](const Var<T>& g) {
    return std::vector<Var<T>>{colsum(g)};
  });
}

template <class T>
Var<T> tile_chan(const Var<T>& v, int n, int h, int w);

// Per-channel sums: [n,c,h,w] -> [c]. Pairs with tile_chan for conv biases.
template <class T>
Var<T> chan_sums(const Var<T>& a) {
  if (a->value.rank() != 4) fail(ErrorKind::usage, "chan_sums wants rank 4");
  int n = a->value.dim(0), c = a->value.dim(1), h = a->value.dim(2), w = a->value.dim(3);
  Tensor<T> out({c});
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out[ic] += a->value.at4(in, ic, y, x);
  return make_node<T>("chan_sums", std::move(out), {a},
                      [n, h, w](const Var<T>& g) {
                        return std::vector<Var<T>>{tile_chan(g, n, h, w)};
                      });
}

template <class T>
Var<T> tile_chan(const Var<T>& v, int n, int h, int w) {
  if (v->value.rank() != 1) fail(ErrorKind::usage, "tile_chan wants rank 1");
  int c = v->value.dim(0);
  Tensor<T> out({n, c, h, w});
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at4(in, ic, y, x) = v->value[ic];
  return make_node<T>("tile_chan", std::move(out), {v}, [](const Var<T>& g) {
    return std::vector<Var<T>>{chan_sums(g)};
  });
}

// Gather one entry per row: [n,C] with labels[n] -> [n].
template <class T>
Var<T> scatter_rows(const Var<T>& v, std::vector<int> labels, int cols);

template <class T>
Var<T> pick(const Var<T>& a, std::vector<int> labels) {
  if (a->value.rank() != 2) fail(ErrorKind::usage, "pick wants rank 2");
  int n = a->value.dim(0), c = a->value.dim(1);
  if (static_cast<int>(labels.size()) != n)
    fail(ErrorKind::usage, "pick: one label per row required");
  Tensor<T> out({n});
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= c)
      fail(ErrorKind::usage, "pick: label out of range");
    out[i] = a->value.at2(i, labels[i]);
  }
  return make_node<T>("pick", std::move(out), {a},
                      [labels, c](const Var<T>& g) {
                        return std::vector<Var<T>>{scatter_rows(g, labels, c)};
                      });
}

// Inverse of pick: spread a length-n vector into an [n,cols] tensor that is
// zero except at each row's label.
template <class T>
Var<T> scatter_rows(const Var<T>& v, std::vector<int> labels, int cols) {
  if (v->value.rank() != 1) fail(ErrorKind::usage, "scatter_rows wants rank 1");
  int n = v->value.dim(0);
  Tensor<T> out({n, cols});
  for (int i = 0; i < n; ++i) out.at2(i, labels[i]) = v->value[i];
  return make_node<T>("scatter_rows", std::move(out), {v},
                      [labels](const Var<T>& g) {
                        return std::vector<Var<T>>{pick(g, labels)};
                      });
}

// ---- linear algebra ---------------------------------------------------------

template <class T>
Var<T> transpose(const Var<T>& a) {
  if (a->value.rank() != 2) fail(ErrorKind::usage, "transpose wants rank 2");
  int n = a->value.dim(0), m = a->value.dim(1);
  Tensor<T> out({m, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.at2(j, i) = a->value.at2(i, j);
  return make_node<T>("transpose", std::move(out), {a}, [](const Var<T>& g) {
    return std::vector<Var<T>>{transpose(g)};
  });
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a->value.rank() != 2 || b->value.rank() != 2)
    fail(ErrorKind::usage, "matmul wants rank 2");
  int n = a->value.dim(0), k = a->value.dim(1);
  int k2 = b->value.dim(0), m = b->value.dim(1);
  if (k != k2)
    fail(ErrorKind::usage, "matmul: inner dims " + std::to_string(k) + " vs " +
                               std::to_string(k2));
  Tensor<T> out({n, m});
  const T* pa = a->value.data();
  const T* pb = b->value.data();
  T* po = out.data();
  for (int i = 0; i < n; ++i)
    for (int kk = 0; kk < k; ++kk) {
      T aik = pa[static_cast<std::size_t>(i) * k + kk];
      const T* brow = pb + static_cast<std::size_t>(kk) * m;
      T* orow = po + static_cast<std::size_t>(i) * m;
      for (int j = 0; j < m; ++j) orow[j] += aik * brow[j];
    }
  return make_node<T>("matmul", std::move(out), {a, b}, [a, b](const Var<T>& g) {
    return std::vector<Var<T>>{matmul(g, transpose(b)), matmul(transpose(a), g)};
  });
}

// Bias add over the last axis of a matrix: [n,m] + [m].
template <class T>
Var<T> add_rowvec(const Var<T>& a, const Var<T>& b) {
  if (a->value.rank() != 2 || b->value.rank() != 1 || a->value.dim(1) != b->value.dim(0))
    fail(ErrorKind::usage, "add_rowvec: want [n,m] + [m]");
  int n = a->value.dim(0), m = a->value.dim(1);
  Tensor<T> out({n, m});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out.at2(i, j) = a->value.at2(i, j) + b->value[j];
  return make_node<T>("add_rowvec", std::move(out), {a, b}, [](const Var<T>& g) {
    return std::vector<Var<T>>{g, colsum(g)};
  });
}

// Bias add over channels of an image batch: [n,c,h,w] + [c].
template <class T>
Var<T> add_chan_bias(const Var<T>& a, const Var<T>& b) {
  if (a->value.rank() != 4 || b->value.rank() != 1 || a->value.dim(1) != b->value.dim(0))
    fail(ErrorKind::usage, "add_chan_bias: want [n,c,h,w] + [c]");
  int n = a->value.dim(0), c = a->value.dim(1), h = a->value.dim(2), w = a->value.dim(3);
  Tensor<T> out({n, c, h, w});
  for (int in = 0; in < n; ++in)
    for (int ic = 0; ic < c; ++ic) {
      T bias = b->value[ic];
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          out.at4(in, ic, y, x) = a->value.at4(in, ic, y, x) + bias;
    }
  return make_node<T>("add_chan_bias", std::move(out), {a, b}, [](const Var<T>& g) {
    return std::vector<Var<T>>{g, chan_sums(g)};
  });
}

// ---- convolution trio -------------------------------------------------------
//
// conv2d and its two adjoints form a closed family: each one's backward rule
// is expressed with the other two, which is what keeps convolutions
// differentiable to arbitrary order.
//
//   out[n,oc,oy,ox] = sum_{ic,ky,kx} x[n,ic,oy+ky-p,ox+kx-p] * k[oc,ic,ky,kx]

template <class T>
Tensor<T> conv2d_value(const Tensor<T>& x, const Tensor<T>& k, int pad) {
  int n = x.dim(0), ic = x.dim(1), h = x.dim(2), w = x.dim(3);
  int oc = k.dim(0), kic = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  if (ic != kic) fail(ErrorKind::usage, "conv2d: channel mismatch");
  int oh = h + 2 * pad - kh + 1, ow = w + 2 * pad - kw + 1;
  if (oh <= 0 || ow <= 0) fail(ErrorKind::usage, "conv2d: kernel larger than padded input");
  Tensor<T> out({n, oc, oh, ow});
  for (int in = 0; in < n; ++in)
    for (int o = 0; o < oc; ++o)
      for (int c = 0; c < ic; ++c)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            T kv = k.at4(o, c, ky, kx);
            if (kv == T(0)) continue;
            for (int oy = 0; oy < oh; ++oy) {
              int iy = oy + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (int ox = 0; ox < ow; ++ox) {
                int ix = ox + kx - pad;
                if (ix < 0 || ix >= w) continue;
                out.at4(in, o, oy, ox) += x.at4(in, c, iy, ix) * kv;
              }
            }
          }
  return out;
}

// Adjoint of conv2d with respect to the input: scatter output-space gradient
// g back to input space of size [n,ic,h,w].
template <class T>
Tensor<T> conv2d_dback_value(const Tensor<T>& g, const Tensor<T>& k, int pad,
                             int h, int w) {
  int n = g.dim(0), oc = g.dim(1), oh = g.dim(2), ow = g.dim(3);
  int koc = k.dim(0), ic = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  if (oc != koc) fail(ErrorKind::usage, "conv2d_dback: channel mismatch");
  Tensor<T> out({n, ic, h, w});
  for (int in = 0; in < n; ++in)
    for (int o = 0; o < oc; ++o)
      for (int c = 0; c < ic; ++c)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            T kv = k.at4(o, c, ky, kx);
            if (kv == T(0)) continue;
            for (int oy = 0; oy < oh; ++oy) {
              int iy = oy + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (int ox = 0; ox < ow; ++ox) {
                int ix = ox + kx - pad;
                if (ix < 0 || ix >= w) continue;
                out.at4(in, c, iy, ix) += g.at4(in, o, oy, ox) * kv;
              }
            }
          }
  return out;
}

// Adjoint of conv2d with respect to the kernel.
template <class T>
Tensor<T> conv2d_kback_value(const Tensor<T>& x, const Tensor<T>& g, int pad,
                             int kh, int kw) {
  int n = x.dim(0), ic = x.dim(1), h = x.dim(2), w = x.dim(3);
  int gn = g.dim(0), oc = g.dim(1), oh = g.dim(2), ow = g.dim(3);
  if (gn != n) fail(ErrorKind::usage, "conv2d_kback: batch mismatch");
  Tensor<T> out({oc, ic, kh, kw});
  for (int in = 0; in < n; ++in)
    for (int o = 0; o < oc; ++o)
      for (int c = 0; c < ic; ++c)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            T acc = 0;
            for (int oy = 0; oy < oh; ++oy) {
              int iy = oy + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (int ox = 0; ox < ow; ++ox) {
                int ix = ox + kx - pad;
                if (ix < 0 || ix >= w) continue;
                acc += x.at4(in, c, iy, ix) * g.at4(in, o, oy, ox);
              }
            }
            out.at4(o, c, ky, kx) += acc;
          }
  return out;
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& k, int pad);
template <class T>
Var<T> conv2d_dback(const Var<T>& g, const Var<T>& k, int pad, int h, int w);
template <class T>
Var<T> conv2d_kback(const Var<T>& x, const Var<T>& g, int pad, int kh, int kw);

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& k, int pad) {
  Tensor<T> out = conv2d_value(x->value, k->value, pad);
  int h = x->value.dim(2), w = x->value.dim(3);
  int kh = k->value.dim(2), kw = k->value.dim(3);
  return make_node<T>("conv2d", std::move(out), {x, k},
                      [x, k, pad, h, w, kh, kw](const Var<T>& g) {
                        return std::vector<Var<T>>{
                            conv2d_dback(g, k, pad, h, w),
                            conv2d_kback(x, g, pad, kh, kw)};
                      });
}

template <class T>
Var<T> conv2d_dback(const Var<T>& g, const Var<T>& k, int pad, int h, int w) {
  Tensor<T> out = conv2d_dback_value(g->value, k->value, pad, h, w);
  int kh = k->value.dim(2), kw = k->value.dim(3);
  return make_node<T>("conv2d_dback", std::move(out), {g, k},
                      [g, k, pad, kh, kw](const Var<T>& u) {
                        return std::vector<Var<T>>{
                            conv2d(u, k, pad), conv2d_kback(u, g, pad, kh, kw)};
                      });
}

template <class T>
Var<T> conv2d_kback(const Var<T>& x, const Var<T>& g, int pad, int kh, int kw) {
  Tensor<T> out = conv2d_kback_value(x->value, g->value, pad, kh, kw);
  int h = x->value.dim(2), w = x->value.dim(3);
  return make_node<T>("conv2d_kback", std::move(out), {x, g},
                      [x, g, pad, h, w](const Var<T>& u) {
                        return std::vector<Var<T>>{
                            conv2d_dback(g, u, pad, h, w), conv2d(x, u, pad)};
                      });
}

// ---- composites -------------------------------------------------------------

// Inner product of two same-shape tensors, as a scalar node.
template <class T>
Var<T> dot(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value, b->value, "dot");
  return sum(mul(a, b));
}

// Mean softmax cross-entropy over a batch of logits [n,C].
// The per-row max is subtracted as a detached constant: the true gradient of
// max cancels exactly in log-sum-exp, so detaching changes no derivative of
// any order while keeping exp() in a safe range.
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  if (logits->value.rank() != 2) fail(ErrorKind::usage, "cross entropy wants [n,C] logits");
  int n = logits->value.dim(0), c = logits->value.dim(1);
  if (static_cast<int>(labels.size()) != n)
    fail(ErrorKind::usage, "cross entropy: one label per row required");
  Tensor<T> rowmax({n});
  for (int i = 0; i < n; ++i) {
    T m = logits->value.at2(i, 0);
    for (int j = 1; j < c; ++j) m = std::max(m, logits->value.at2(i, j));
    rowmax[i] = m;
  }
  auto mconst = constant(std::move(rowmax));
  auto shifted = sub(logits, tile_cols(mconst, c));
  auto lse = add(log(rowsum(exp(shifted))), mconst);   // [n]
  auto picked = pick(logits, labels);                  // [n]
  auto losses = sub(lse, picked);                      // [n]
  return scale(sum(losses), T(1) / T(n));
}

// Per-example cross-entropy values (no graph), for attack bookkeeping.
template <class T>
std::vector<T> cross_entropy_rows(const Tensor<T>& logits, const std::vector<int>& labels) {
  int n = logits.dim(0), c = logits.dim(1);
  std::vector<T> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    T m = logits.at2(i, 0);
    for (int j = 1; j < c; ++j) m = std::max(m, logits.at2(i, j));
    T s = 0;
    for (int j = 0; j < c; ++j) s += std::exp(logits.at2(i, j) - m);
    out[static_cast<std::size_t>(i)] = std::log(s) + m - logits.at2(i, labels[i]);
  }
  return out;
}

// ---- backward ---------------------------------------------------------------

template <class T>
class GradMap {
 public:
  explicit GradMap(std::unordered_map<const Node<T>*, Var<T>> m) : m_(std::move(m)) {}

  // Gradient node for x, or null when the root does not depend on it.
  Var<T> get(const Var<T>& x) const {
    auto it = m_.find(x.get());
    return it == m_.end() ? nullptr : it->second;
  }

  Var<T> get_or_zero(const Var<T>& x) const {
    auto g = get(x);
    return g ? g : constant(Tensor<T>::zeros(x->value.shape));
  }

 private:
  std::unordered_map<const Node<T>*, Var<T>> m_;
};

// Reverse-mode sweep from a scalar root. The returned gradients are graph
// nodes, so they can be combined into a new scalar and swept again for
// higher-order derivatives.
template <class T>
GradMap<T> backward(const Var<T>& root) {
  if (!root) fail(ErrorKind::usage, "backward on null node");
  if (root->value.numel() != 1) fail(ErrorKind::usage, "backward wants a scalar root");

  std::unordered_map<const Node<T>*, Var<T>> grads;
  if (!root->requires_grad) return GradMap<T>(std::move(grads));

  // Post-order DFS over the requires_grad subgraph; parent order is fixed by
  // construction, so the resulting schedule is deterministic.
  std::vector<Node<T>*> order;
  std::unordered_set<const Node<T>*> seen{root.get()};
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  grads[root.get()] = constant(Tensor<T>::scalar(T(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    auto git = grads.find(n);
    if (git == grads.end()) continue;  // dead branch
    if (n->parents.empty()) continue;  // leaf or constant
    bool needed = false;
    for (const auto& p : n->parents)
      if (p && p->requires_grad) needed = true;
    if (!needed) continue;
    if (!n->vjp)
      fail(ErrorKind::capability,
           std::string("op '") + n->op + "' has no differentiation rule");
    std::vector<Var<T>> contribs = n->vjp(git->second);
    check_internal(contribs.size() == n->parents.size(),
                   std::string("op '") + n->op + "' backward arity");
    for (std::size_t i = 0; i < contribs.size(); ++i) {
      const auto& p = n->parents[i];
      const auto& c = contribs[i];
      if (!p || !c || !p->requires_grad) continue;
      require_same_shape(c->value, p->value, "gradient accumulation");
      auto pit = grads.find(p.get());
      if (pit == grads.end())
        grads.emplace(p.get(), c);
      else
        pit->second = add(pit->second, c);
    }
  }
  return GradMap<T>(std::move(grads));
}

}  // namespace poisonlab::ad
