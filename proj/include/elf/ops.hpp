#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "elf/tensor.hpp"

namespace elf {

template <typename S>
using EigenMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<EigenMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const EigenMat<S>>;

namespace detail {

// -- broadcasting -------------------------------------------------------------
//
// Allowed binary forms: identical shapes; either operand scalar (one element);
// a 1-D length-C vector against a 4-D [N,C,H,W] tensor (per-channel, broadcast
// over N,H,W); same-rank shapes where every dim matches or is 1.

struct BinaryPlan {
  Shape out;
  std::vector<Index> sa, sb;  // strides into a/b per out dim; 0 where broadcast
  bool same = false;
};

inline BinaryPlan make_binary_plan(const Shape& a, const Shape& b, const char* op) {
  BinaryPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  Shape ea = a, eb = b;
  auto promote = [](Shape& self, const Shape& other) {
    if (numel(self) == 1 && self.size() != other.size())
      self.assign(std::max<std::size_t>(other.size(), 1), 1);
    else if (self.size() == 1 && other.size() == 4 && self[0] == other[1])
      self = Shape{1, self[0], 1, 1};
  };
  promote(ea, eb);
  promote(eb, ea);
  if (ea.size() != eb.size())
    fail(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
         " are not broadcast-compatible");
  const std::size_t r = ea.size();
  plan.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    require(ea[i] == eb[i] || ea[i] == 1 || eb[i] == 1,
            std::string(op) + ": dim " + std::to_string(i) + " mismatch between " +
                shape_str(a) + " and " + shape_str(b));
    plan.out[i] = std::max(ea[i], eb[i]);
  }
  plan.sa = row_major_strides(ea);
  plan.sb = row_major_strides(eb);
  for (std::size_t i = 0; i < r; ++i) {
    if (ea[i] == 1 && plan.out[i] > 1) plan.sa[i] = 0;
    if (eb[i] == 1 && plan.out[i] > 1) plan.sb[i] = 0;
  }
  return plan;
}

/// Visit every element of `out_shape`; body receives (flat_out, off_a, off_b).
template <typename Body>
void for_each_bcast(const Shape& out_shape, const std::vector<Index>& sa,
                    const std::vector<Index>& sb, Body&& body) {
  const int r = static_cast<int>(out_shape.size());
  const Index n = numel(out_shape);
  if (r == 0) {
    if (n > 0) body(0, 0, 0);
    return;
  }
  std::vector<Index> c(static_cast<std::size_t>(r), 0);
  Index oa = 0, ob = 0;
  for (Index i = 0; i < n; ++i) {
    body(i, oa, ob);
    for (int d = r - 1; d >= 0; --d) {
      ++c[static_cast<std::size_t>(d)];
      oa += sa[static_cast<std::size_t>(d)];
      ob += sb[static_cast<std::size_t>(d)];
      if (c[static_cast<std::size_t>(d)] < out_shape[static_cast<std::size_t>(d)]) break;
      c[static_cast<std::size_t>(d)] = 0;
      oa -= sa[static_cast<std::size_t>(d)] * out_shape[static_cast<std::size_t>(d)];
      ob -= sb[static_cast<std::size_t>(d)] * out_shape[static_cast<std::size_t>(d)];
    }
  }
}

/// Generic binary elementwise op with broadcasting.
/// f(a,b) -> out; dfa(a,b,g) and dfb(a,b,g) give the input-gradient terms.
template <typename S, typename F, typename DA, typename DB>
Tensor<S> binary_elementwise(const char* name, const Tensor<S>& a, const Tensor<S>& b, F f,
                             DA dfa, DB dfb) {
  BinaryPlan plan = make_binary_plan(a.shape(), b.shape(), name);
  auto out = std::make_shared<std::vector<S>>(static_cast<std::size_t>(numel(plan.out)));
  const S* ad = a.data();
  const S* bd = b.data();
  S* od = out->data();
  if (plan.same) {
    const Index n = a.size();
    for (Index i = 0; i < n; ++i) od[i] = f(ad[i], bd[i]);
  } else {
    for_each_bcast(plan.out, plan.sa, plan.sb,
                   [&](Index i, Index oa, Index ob) { od[i] = f(ad[oa], bd[ob]); });
  }
  ensure_finite(*out, name);

  Tape<S>* tape = common_tape<S>({&a, &b});
  if (!tape) return Tensor<S>(plan.out, std::move(out));
  auto as = a.storage();
  auto bs = b.storage();
  const int an = a.tracked() ? a.node() : -1;
  const int bn = b.tracked() ? b.node() : -1;
  const Index asz = a.size(), bsz = b.size();
  Shape out_shape = plan.out;  // keep valid: `plan` is moved into the closure
  return tape->emit(std::move(out_shape), out,
                    [=, plan = std::move(plan)](Tape<S>& t, const std::vector<S>& g) {
                      const S* av = as->data();
                      const S* bv = bs->data();
                      S* ga = an >= 0 ? t.grad_buf(an, asz).data() : nullptr;
                      S* gb = bn >= 0 ? t.grad_buf(bn, bsz).data() : nullptr;
                      if (plan.same) {
                        const Index n = static_cast<Index>(g.size());
                        for (Index i = 0; i < n; ++i) {
                          if (ga) ga[i] += dfa(av[i], bv[i], g[i]);
                          if (gb) gb[i] += dfb(av[i], bv[i], g[i]);
                        }
                      } else {
                        for_each_bcast(plan.out, plan.sa, plan.sb, [&](Index i, Index oa, Index ob) {
                          if (ga) ga[oa] += dfa(av[oa], bv[ob], g[i]);
                          if (gb) gb[ob] += dfb(av[oa], bv[ob], g[i]);
                        });
                      }
                    });
}

/// Generic unary elementwise op. df(x,y,g) returns the input-gradient term.
template <typename S, typename F, typename DF>
Tensor<S> unary_elementwise(const char* name, const Tensor<S>& x, F f, DF df) {
  auto out = std::make_shared<std::vector<S>>(static_cast<std::size_t>(x.size()));
  const S* xd = x.data();
  S* od = out->data();
  const Index n = x.size();
  for (Index i = 0; i < n; ++i) od[i] = f(xd[i]);
  ensure_finite(*out, name);
  if (!x.tracked()) return Tensor<S>(x.shape(), std::move(out));
  auto xs = x.storage();
  const int xn = x.node();
  return x.tape()->emit(x.shape(), out, [=](Tape<S>& t, const std::vector<S>& g) {
    S* gx = t.grad_buf(xn, static_cast<Index>(xs->size())).data();
    const S* xv = xs->data();
    const S* yv = out->data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += df(xv[i], yv[i], g[i]);
  });
}

}  // namespace detail

// -- elementwise --------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_elementwise(
      "add", a, b, [](S x, S y) { return x + y; }, [](S, S, S g) { return g; },
      [](S, S, S g) { return g; });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_elementwise(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S, S, S g) { return g; },
      [](S, S, S g) { return -g; });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_elementwise(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y, S g) { return g * y; },
      [](S x, S, S g) { return g * x; });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_elementwise(
      "div", a, b, [](S x, S y) { return x / y; }, [](S, S y, S g) { return g / y; },
      [](S x, S y, S g) { return -g * x / (y * y); });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  return detail::unary_elementwise(
      "scale", x, [c](S v) { return c * v; }, [c](S, S, S g) { return c * g; });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& x, S c) {
  return detail::unary_elementwise(
      "add_scalar", x, [c](S v) { return v + c; }, [](S, S, S g) { return g; });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return detail::unary_elementwise(
      "relu", x, [](S v) { return v > S(0) ? v : S(0); },
      [](S v, S, S g) { return v > S(0) ? g : S(0); });
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  return detail::unary_elementwise(
      "gelu", x,
      [](S v) {
        return S(0.5) * v * (S(1) + static_cast<S>(std::erf(static_cast<double>(v) * M_SQRT1_2)));
      },
      [](S v, S, S g) {
        const double xd = static_cast<double>(v);
        const double cdf = 0.5 * (1.0 + std::erf(xd * M_SQRT1_2));
        const double pdf = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * M_PI);
        return g * static_cast<S>(cdf + xd * pdf);
      });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return detail::unary_elementwise(
      "sigmoid", x,
      [](S v) {
        // evaluate on the non-overflowing side
        if (v >= S(0)) return S(1) / (S(1) + static_cast<S>(std::exp(-static_cast<double>(v))));
        const S e = static_cast<S>(std::exp(static_cast<double>(v)));
        return e / (S(1) + e);
      },
      [](S, S y, S g) { return g * y * (S(1) - y); });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& x) {
  for (Index i = 0; i < x.size(); ++i)
    require(x.at(i) >= S(0), "sqrt: negative input");
  return detail::unary_elementwise(
      "sqrt", x, [](S v) { return static_cast<S>(std::sqrt(static_cast<double>(v))); },
      [](S, S y, S g) { return g / (S(2) * y); });
}

template <typename S>
Tensor<S> square(const Tensor<S>& x) {
  return detail::unary_elementwise(
      "square", x, [](S v) { return v * v; }, [](S v, S, S g) { return S(2) * v * g; });
}

// -- shape ops ----------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  require(numel(shape) == x.size(), "reshape: element count mismatch, " + shape_str(x.shape()) +
                                        " -> " + shape_str(shape));
  if (!x.tracked()) return Tensor<S>(std::move(shape), x.storage());
  const int xn = x.node();
  const Index sz = x.size();
  return x.tape()->emit(std::move(shape), x.storage(), [=](Tape<S>& t, const std::vector<S>& g) {
    S* gx = t.grad_buf(xn, sz).data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& x) {
  require(x.rank() >= 2, "transpose_last2: rank must be >= 2");
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  const Index rows = x.dim(x.rank() - 2), cols = x.dim(x.rank() - 1);
  const Index batch = x.size() / (rows * cols);
  auto transpose_into = [rows, cols, batch](const S* src, S* dst) {
    for (Index b = 0; b < batch; ++b) {
      const S* s = src + b * rows * cols;
      S* d = dst + b * rows * cols;
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) d[c * rows + r] = s[r * cols + c];
    }
  };
  auto out = std::make_shared<std::vector<S>>(static_cast<std::size_t>(x.size()));
  transpose_into(x.data(), out->data());
  if (!x.tracked()) return Tensor<S>(std::move(out_shape), std::move(out));
  const int xn = x.node();
  const Index sz = x.size();
  return x.tape()->emit(std::move(out_shape), out, [=](Tape<S>& t, const std::vector<S>& g) {
    S* gx = t.grad_buf(xn, sz).data();
    // transpose of the gradient, accumulated
    for (Index b = 0; b < batch; ++b) {
      const S* gs = g.data() + b * rows * cols;
      S* gd = gx + b * rows * cols;
      for (Index c = 0; c < cols; ++c)
        for (Index r = 0; r < rows; ++r) gd[r * cols + c] += gs[c * rows + r];
    }
  });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  if (parts.size() == 1) return parts[0];
  const int rank = parts[0].rank();
  require(axis >= 0 && axis < rank, "concat: axis out of range");
  Shape out_shape = parts[0].shape();
  Index axis_total = 0;
  for (const Tensor<S>& p : parts) {
    require(p.rank() == rank, "concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      require(d == axis || p.dim(d) == out_shape[static_cast<std::size_t>(d)],
              "concat: incompatible shape " + shape_str(p.shape()));
    axis_total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = axis_total;

  Index outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= out_shape[static_cast<std::size_t>(d)];

  auto out = std::make_shared<std::vector<S>>(static_cast<std::size_t>(numel(out_shape)));
  S* od = out->data();
  Index offset = 0;
  for (const Tensor<S>& p : parts) {
    const Index block = p.dim(axis) * inner;
    const S* pd = p.data();
    for (Index o = 0; o < outer; ++o)
      std::copy(pd + o * block, pd + (o + 1) * block, od + o * axis_total * inner + offset);
    offset += block;
  }

  Tape<S>* tape = nullptr;
  for (const Tensor<S>& p : parts) {
    if (!p.tracked()) continue;
    if (!tape) tape = p.tape();
    else require(tape == p.tape(), "concat: inputs belong to different graphs");
  }
  if (!tape) return Tensor<S>(std::move(out_shape), std::move(out));

  struct Piece {
    int node;
    Index block;
    Index offset;
    Index size;
  };
  std::vector<Piece> pieces;
  for (Index off = 0; const Tensor<S>& p : parts) {
    pieces.push_back({p.tracked() ? p.node() : -1, p.dim(axis) * inner, off, p.size()});
    off += p.dim(axis) * inner;
  }
  return tape->emit(out_shape, out, [=](Tape<S>& t, const std::vector<S>& g) {
    for (const Piece& pc : pieces) {
      if (pc.node < 0) continue;
      S* gp = t.grad_buf(pc.node, pc.size).data();
      for (Index o = 0; o < outer; ++o) {
        const S* gs = g.data() + o * axis_total * inner + pc.offset;
        S* gd = gp + o * pc.block;
        for (Index i = 0; i < pc.block; ++i) gd[i] += gs[i];
      }
    }
  });
}

template <typename S>
std::vector<Tensor<S>> split(const Tensor<S>& x, int axis, const std::vector<Index>& sizes) {
  require(axis >= 0 && axis < x.rank(), "split: axis out of range");
  Index total = 0;
  for (Index s : sizes) total += s;
  require(total == x.dim(axis), "split: sizes do not cover axis");
  Index outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const Index axis_total = x.dim(axis);

  std::vector<Tensor<S>> parts;
  Index offset = 0;
  for (Index s : sizes) {
    Shape shape = x.shape();
    shape[static_cast<std::size_t>(axis)] = s;
    auto out = std::make_shared<std::vector<S>>(static_cast<std::size_t>(numel(shape)));
    const Index block = s * inner;
    const S* xd = x.data();
    for (Index o = 0; o < outer; ++o)
      std::copy(xd + o * axis_total * inner + offset, xd + o * axis_total * inner + offset + block,
                out->data() + o * block);
    if (!x.tracked()) {
      parts.emplace_back(std::move(shape), std::move(out));
    } else {
      const int xn = x.node();
      const Index xsz = x.size();
      const Index off = offset;
      parts.push_back(
          x.tape()->emit(std::move(shape), out, [=](Tape<S>& t, const std::vector<S>& g) {
            S* gx = t.grad_buf(xn, xsz).data();
            for (Index o = 0; o < outer; ++o) {
              S* gd = gx + o * axis_total * inner + off;
              const S* gs = g.data() + o * block;
              for (Index i = 0; i < block; ++i) gd[i] += gs[i];
            }
          }));
    }
    offset += s * inner;
  }
  return parts;
}

// -- matmul ---------------------------------------------------------------------

/// Batched matrix product [..,M,K] x [..,K,P] -> [..,M,P]; leading dims equal.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.rank() >= 2 && b.rank() >= 2, "matmul: inputs must have rank >= 2");
  require(a.rank() == b.rank(), "matmul: rank mismatch");
  for (int d = 0; d < a.rank() - 2; ++d)
    require(a.dim(d) == b.dim(d), "matmul: batch dim mismatch");
  const Index m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const Index k2 = b.dim(b.rank() - 2), p = b.dim(b.rank() - 1);
  require(k == k2, "matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  const Index batch = a.size() / (m * k);
  Shape out_shape = a.shape();
  out_shape[out_shape.size() - 1] = p;

  auto out = std::make_shared<std::vector<S>>(static_cast<std::size_t>(batch * m * p));
  for (Index i = 0; i < batch; ++i) {
    ConstMatMap<S> A(a.data() + i * m * k, m, k);
    ConstMatMap<S> B(b.data() + i * k * p, k, p);
    MatMap<S> Y(out->data() + i * m * p, m, p);
    Y.noalias() = A * B;
  }
  ensure_finite(*out, "matmul");

  Tape<S>* tape = detail::common_tape<S>({&a, &b});
  if (!tape) return Tensor<S>(std::move(out_shape), std::move(out));
  auto as = a.storage();
  auto bs = b.storage();
  const int an = a.tracked() ? a.node() : -1;
  const int bn = b.tracked() ? b.node() : -1;
  return tape->emit(std::move(out_shape), out, [=](Tape<S>& t, const std::vector<S>& g) {
    for (Index i = 0; i < batch; ++i) {
      ConstMatMap<S> A(as->data() + i * m * k, m, k);
      ConstMatMap<S> B(bs->data() + i * k * p, k, p);
      ConstMatMap<S> G(g.data() + i * m * p, m, p);
      if (an >= 0) {
        MatMap<S> GA(t.grad_buf(an, batch * m * k).data() + i * m * k, m, k);
        GA.noalias() += G * B.transpose();
      }
      if (bn >= 0) {
        MatMap<S> GB(t.grad_buf(bn, batch * k * p).data() + i * k * p, k, p);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

// -- convolution ----------------------------------------------------------------

namespace detail {

inline void conv_geometry(Index h, Index w, Index k, Index stride, Index pad, const char* op,
                          Index& ho, Index& wo) {
  require(k >= 1 && (k % 2) == 1, std::string(op) + ": kernel size must be odd");
  require(stride >= 1, std::string(op) + ": stride must be >= 1");
  require(pad >= 0, std::string(op) + ": padding must be >= 0");
  const Index eh = h + 2 * pad - k, ew = w + 2 * pad - k;
  require(eh >= 0 && ew >= 0 && eh % stride == 0 && ew % stride == 0,
          std::string(op) + ": non-integral output size for input " + std::to_string(h) + "x" +
              std::to_string(w) + ", k=" + std::to_string(k) + ", stride=" +
              std::to_string(stride) + ", pad=" + std::to_string(pad));
  ho = eh / stride + 1;
  wo = ew / stride + 1;
}

template <typename S>
void im2col(const S* x, Index cin, Index h, Index w, Index k, Index stride, Index pad, Index ho,
            Index wo, S* cols) {
  // cols is [cin*k*k, ho*wo]
  for (Index c = 0; c < cin; ++c) {
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        S* row = cols + ((c * k + ki) * k + kj) * (ho * wo);
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) {
            std::fill(row + oy * wo, row + (oy + 1) * wo, S(0));
            continue;
          }
          const S* src = x + (c * h + iy) * w;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * stride + kj - pad;
            row[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_accum(const S* cols, Index cin, Index h, Index w, Index k, Index stride, Index pad,
                  Index ho, Index wo, S* gx) {
  for (Index c = 0; c < cin; ++c) {
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        const S* row = cols + ((c * k + ki) * k + kj) * (ho * wo);
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) continue;
          S* dst = gx + (c * h + iy) * w;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * stride + kj - pad;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D convolution (cross-correlation convention), zero padding.
/// x [N,Cin,H,W], w [Cout,Cin,k,k], bias [Cout] (undefined tensor = no bias).
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, Index stride = 1,
                 Index pad = 0) {
  require(x.rank() == 4 && w.rank() == 4, "conv2d: x must be [N,C,H,W] and w [Cout,Cin,k,k]");
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index cout = w.dim(0), k = w.dim(2);
  require(w.dim(1) == cin, "conv2d: channel mismatch, x " + shape_str(x.shape()) + " vs w " +
                               shape_str(w.shape()));
  require(w.dim(2) == w.dim(3), "conv2d: kernel must be square");
  if (bias.defined()) require(bias.size() == cout, "conv2d: bias size mismatch");
  Index ho = 0, wo = 0;
  detail::conv_geometry(h, wd, k, stride, pad, "conv2d", ho, wo);

  const Index ckk = cin * k * k, hw = ho * wo;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);  // im2col is the identity
  auto out = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n * cout * hw));
  std::vector<S> cols(pointwise ? 0 : static_cast<std::size_t>(ckk * hw));
  for (Index i = 0; i < n; ++i) {
    const S* col_data = x.data() + i * cin * h * wd;
    if (!pointwise) {
      detail::im2col(col_data, cin, h, wd, k, stride, pad, ho, wo, cols.data());
      col_data = cols.data();
    }
    ConstMatMap<S> W(w.data(), cout, ckk);
    ConstMatMap<S> C(col_data, ckk, hw);
    MatMap<S> Y(out->data() + i * cout * hw, cout, hw);
    Y.noalias() = W * C;
    if (bias.defined())
      for (Index co = 0; co < cout; ++co) Y.row(co).array() += bias.at(co);
  }
  ensure_finite(*out, "conv2d");

  Tape<S>* tape = detail::common_tape<S>({&x, &w, &bias});
  if (!tape) return Tensor<S>(Shape{n, cout, ho, wo}, std::move(out));
  auto xs = x.storage();
  auto ws = w.storage();
  const int xn = x.tracked() ? x.node() : -1;
  const int wn = w.tracked() ? w.node() : -1;
  const int bn = bias.defined() && bias.tracked() ? bias.node() : -1;
  return tape->emit(Shape{n, cout, ho, wo}, out, [=](Tape<S>& t, const std::vector<S>& g) {
    std::vector<S> cols(pointwise ? 0 : static_cast<std::size_t>(ckk * hw));
    std::vector<S> gcols(pointwise ? 0 : static_cast<std::size_t>(ckk * hw));
    for (Index i = 0; i < n; ++i) {
      ConstMatMap<S> G(g.data() + i * cout * hw, cout, hw);
      if (bn >= 0) {
        S* gb = t.grad_buf(bn, cout).data();
        for (Index co = 0; co < cout; ++co) gb[co] += G.row(co).sum();
      }
      const S* col_data = xs->data() + i * cin * h * wd;
      if (!pointwise && (wn >= 0 || xn >= 0)) {
        detail::im2col(col_data, cin, h, wd, k, stride, pad, ho, wo, cols.data());
        col_data = cols.data();
      }
      if (wn >= 0) {
        MatMap<S> GW(t.grad_buf(wn, cout * ckk).data(), cout, ckk);
        ConstMatMap<S> C(col_data, ckk, hw);
        GW.noalias() += G * C.transpose();
      }
      if (xn >= 0) {
        ConstMatMap<S> W(ws->data(), cout, ckk);
        S* gx = t.grad_buf(xn, n * cin * h * wd).data() + i * cin * h * wd;
        if (pointwise) {
          MatMap<S> GX(gx, ckk, hw);
          GX.noalias() += W.transpose() * G;
        } else {
          MatMap<S> GC(gcols.data(), ckk, hw);
          GC.noalias() = W.transpose() * G;
          detail::col2im_accum(gcols.data(), cin, h, wd, k, stride, pad, ho, wo, gx);
        }
      }
    }
  });
}

/// Depthwise 2-D convolution: one k-by-k filter per channel.
/// x [N,C,H,W], w [C,1,k,k], bias [C] (undefined tensor = no bias).
template <typename S>
Tensor<S> depthwise_conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                           Index stride = 1, Index pad = 0) {
  require(x.rank() == 4 && w.rank() == 4, "depthwise_conv2d: bad ranks");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index k = w.dim(2);
  require(w.dim(0) == c && w.dim(1) == 1 && w.dim(3) == k,
          "depthwise_conv2d: w must be [C,1,k,k] with C=" + std::to_string(c) + ", got " +
              shape_str(w.shape()));
  if (bias.defined()) require(bias.size() == c, "depthwise_conv2d: bias size mismatch");
  Index ho = 0, wo = 0;
  detail::conv_geometry(h, wd, k, stride, pad, "depthwise_conv2d", ho, wo);

  auto out = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n * c * ho * wo));
  const S* xd = x.data();
  const S* wv = w.data();
  S* od = out->data();
  for (Index i = 0; i < n; ++i) {
    for (Index ch = 0; ch < c; ++ch) {
      const S* xc = xd + (i * c + ch) * h * wd;
      const S* wc = wv + ch * k * k;
      const S b = bias.defined() ? bias.at(ch) : S(0);
      S* oc = od + (i * c + ch) * ho * wo;
      for (Index oy = 0; oy < ho; ++oy) {
        for (Index ox = 0; ox < wo; ++ox) {
          S acc = b;
          for (Index ki = 0; ki < k; ++ki) {
            const Index iy = oy * stride + ki - pad;
            if (iy < 0 || iy >= h) continue;
            for (Index kj = 0; kj < k; ++kj) {
              const Index ix = ox * stride + kj - pad;
              if (ix < 0 || ix >= wd) continue;
              acc += xc[iy * wd + ix] * wc[ki * k + kj];
            }
          }
          oc[oy * wo + ox] = acc;
        }
      }
    }
  }
  ensure_finite(*out, "depthwise_conv2d");

  Tape<S>* tape = detail::common_tape<S>({&x, &w, &bias});
  if (!tape) return Tensor<S>(Shape{n, c, ho, wo}, std::move(out));
  auto xs = x.storage();
  auto ws = w.storage();
  const int xn = x.tracked() ? x.node() : -1;
  const int wn = w.tracked() ? w.node() : -1;
  const int bn = bias.defined() && bias.tracked() ? bias.node() : -1;
  return tape->emit(Shape{n, c, ho, wo}, out, [=](Tape<S>& t, const std::vector<S>& g) {
    const S* xv = xs->data();
    const S* wvv = ws->data();
    S* gx = xn >= 0 ? t.grad_buf(xn, n * c * h * wd).data() : nullptr;
    S* gw = wn >= 0 ? t.grad_buf(wn, c * k * k).data() : nullptr;
    S* gb = bn >= 0 ? t.grad_buf(bn, c).data() : nullptr;
    for (Index i = 0; i < n; ++i) {
      for (Index ch = 0; ch < c; ++ch) {
        const S* xc = xv + (i * c + ch) * h * wd;
        const S* wc = wvv + ch * k * k;
        const S* gout = g.data() + (i * c + ch) * ho * wo;
        for (Index oy = 0; oy < ho; ++oy) {
          for (Index ox = 0; ox < wo; ++ox) {
            const S gv = gout[oy * wo + ox];
            if (gb) gb[ch] += gv;
            for (Index ki = 0; ki < k; ++ki) {
              const Index iy = oy * stride + ki - pad;
              if (iy < 0 || iy >= h) continue;
              for (Index kj = 0; kj < k; ++kj) {
                const Index ix = ox * stride + kj - pad;
                if (ix < 0 || ix >= wd) continue;
                if (gw) gw[ch * k * k + ki * k + kj] += gv * xc[iy * wd + ix];
                if (gx) gx[(i * c + ch) * h * wd + iy * wd + ix] += gv * wc[ki * k + kj];
              }
            }
          }
        }
      }
    }
  });
}

// -- resampling -----------------------------------------------------------------

namespace detail {

struct LerpTap {
  Index lo, hi;
  double w_hi;  // weight of hi tap; lo gets 1-w_hi
};

inline std::vector<LerpTap> bilinear_taps(Index in, Index out) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (Index i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const Index lo = static_cast<Index>(std::floor(src));
    taps[static_cast<std::size_t>(i)] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize with half-pixel centers and edge clamping. Linear in x,
/// so the backward pass is the transpose scatter of the same taps.
template <typename S>
Tensor<S> bilinear_resize(const Tensor<S>& x, Index out_h, Index out_w) {
  require(x.rank() == 4, "bilinear_resize: x must be [N,C,H,W]");
  require(out_h >= 1 && out_w >= 1, "bilinear_resize: output size must be >= 1");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = detail::bilinear_taps(h, out_h);
  const auto tx = detail::bilinear_taps(w, out_w);

  auto out = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n * c * out_h * out_w));
  const S* xd = x.data();
  S* od = out->data();
  for (Index img = 0; img < n * c; ++img) {
    const S* src = xd + img * h * w;
    S* dst = od + img * out_h * out_w;
    for (Index oy = 0; oy < out_h; ++oy) {
      const auto& yy = ty[static_cast<std::size_t>(oy)];
      for (Index ox = 0; ox < out_w; ++ox) {
        const auto& xxp = tx[static_cast<std::size_t>(ox)];
        const double v00 = src[yy.lo * w + xxp.lo], v01 = src[yy.lo * w + xxp.hi];
        const double v10 = src[yy.hi * w + xxp.lo], v11 = src[yy.hi * w + xxp.hi];
        const double top = v00 + (v01 - v00) * xxp.w_hi;
        const double bot = v10 + (v11 - v10) * xxp.w_hi;
        dst[oy * out_w + ox] = static_cast<S>(top + (bot - top) * yy.w_hi);
      }
    }
  }
  ensure_finite(*out, "bilinear_resize");

  if (!x.tracked()) return Tensor<S>(Shape{n, c, out_h, out_w}, std::move(out));
  const int xn = x.node();
  return x.tape()->emit(Shape{n, c, out_h, out_w}, out, [=](Tape<S>& t, const std::vector<S>& g) {
    S* gx = t.grad_buf(xn, n * c * h * w).data();
    for (Index img = 0; img < n * c; ++img) {
      const S* gs = g.data() + img * out_h * out_w;
      S* gd = gx + img * h * w;
      for (Index oy = 0; oy < out_h; ++oy) {
        const auto& yy = ty[static_cast<std::size_t>(oy)];
        for (Index ox = 0; ox < out_w; ++ox) {
          const auto& xxp = tx[static_cast<std::size_t>(ox)];
          const double gv = gs[oy * out_w + ox];
          gd[yy.lo * w + xxp.lo] += static_cast<S>(gv * (1 - yy.w_hi) * (1 - xxp.w_hi));
          gd[yy.lo * w + xxp.hi] += static_cast<S>(gv * (1 - yy.w_hi) * xxp.w_hi);
          gd[yy.hi * w + xxp.lo] += static_cast<S>(gv * yy.w_hi * (1 - xxp.w_hi));
          gd[yy.hi * w + xxp.hi] += static_cast<S>(gv * yy.w_hi * xxp.w_hi);
        }
      }
    }
  });
}

// -- normalization / softmax ------------------------------------------------------

/// Numerically stable softmax along `axis`.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  if (axis < 0) axis += x.rank();
  require(axis >= 0 && axis < x.rank(), "softmax: axis out of range");
  const Index n = x.dim(axis);
  Index outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);

  auto out = std::make_shared<std::vector<S>>(static_cast<std::size_t>(x.size()));
  const S* xd = x.data();
  S* od = out->data();
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * n * inner + in;
      S mx = xd[base];
      for (Index j = 1; j < n; ++j) mx = std::max(mx, xd[base + j * inner]);
      double sum = 0;
      for (Index j = 0; j < n; ++j) {
        const double e = std::exp(static_cast<double>(xd[base + j * inner] - mx));
        od[base + j * inner] = static_cast<S>(e);
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (Index j = 0; j < n; ++j)
        od[base + j * inner] = static_cast<S>(static_cast<double>(od[base + j * inner]) * inv);
    }
  }
  ensure_finite(*out, "softmax");

  if (!x.tracked()) return Tensor<S>(x.shape(), std::move(out));
  const int xn = x.node();
  const Index sz = x.size();
  return x.tape()->emit(x.shape(), out, [=](Tape<S>& t, const std::vector<S>& g) {
    S* gx = t.grad_buf(xn, sz).data();
    const S* y = out->data();
    for (Index o = 0; o < outer; ++o) {
      for (Index in = 0; in < inner; ++in) {
        const Index base = o * n * inner + in;
        double dot = 0;
        for (Index j = 0; j < n; ++j)
          dot += static_cast<double>(g[base + j * inner]) * static_cast<double>(y[base + j * inner]);
        for (Index j = 0; j < n; ++j) {
          const Index idx = base + j * inner;
          gx[idx] += static_cast<S>((static_cast<double>(g[idx]) - dot) * static_cast<double>(y[idx]));
        }
      }
    }
  });
}

/// Layer normalization over the channel dimension at each (n,h,w) position.
/// x [N,C,H,W], gamma/beta [C]; biased variance.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps) {
  require(x.rank() == 4, "layer_norm: x must be [N,C,H,W]");
  require(eps > S(0), "layer_norm: eps must be > 0");
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(gamma.size() == c && beta.size() == c, "layer_norm: gamma/beta must be [C]");
  const Index hw = h * w, pos_count = n * hw;

  auto out = std::make_shared<std::vector<S>>(static_cast<std::size_t>(x.size()));
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(pos_count));
  auto mean = std::make_shared<std::vector<S>>(static_cast<std::size_t>(pos_count));
  const S* xd = x.data();
  const S* gm = gamma.data();
  const S* bt = beta.data();
  S* od = out->data();
  for (Index img = 0; img < n; ++img) {
    for (Index p = 0; p < hw; ++p) {
      const Index base = img * c * hw + p;
      double mu = 0;
      for (Index ch = 0; ch < c; ++ch) mu += xd[base + ch * hw];
      mu /= static_cast<double>(c);
      double var = 0;
      for (Index ch = 0; ch < c; ++ch) {
        const double d = xd[base + ch * hw] - mu;
        var += d * d;
      }
      var /= static_cast<double>(c);
      const double istd = 1.0 / std::sqrt(var + static_cast<double>(eps));
      (*mean)[static_cast<std::size_t>(img * hw + p)] = static_cast<S>(mu);
      (*inv_std)[static_cast<std::size_t>(img * hw + p)] = static_cast<S>(istd);
      for (Index ch = 0; ch < c; ++ch)
        od[base + ch * hw] =
            static_cast<S>((xd[base + ch * hw] - mu) * istd * gm[ch] + static_cast<double>(bt[ch]));
    }
  }
  ensure_finite(*out, "layer_norm");

  Tape<S>* tape = detail::common_tape<S>({&x, &gamma, &beta});
  if (!tape) return Tensor<S>(x.shape(), std::move(out));
  auto xs = x.storage();
  auto gs = gamma.storage();
  const int xn = x.tracked() ? x.node() : -1;
  const int gn = gamma.tracked() ? gamma.node() : -1;
  const int bn = beta.tracked() ? beta.node() : -1;
  return tape->emit(x.shape(), out, [=](Tape<S>& t, const std::vector<S>& g) {
    const S* xv = xs->data();
    const S* gmv = gs->data();
    S* gx = xn >= 0 ? t.grad_buf(xn, n * c * hw).data() : nullptr;
    S* gg = gn >= 0 ? t.grad_buf(gn, c).data() : nullptr;
    S* gb = bn >= 0 ? t.grad_buf(bn, c).data() : nullptr;
    for (Index img = 0; img < n; ++img) {
      for (Index p = 0; p < hw; ++p) {
        const Index base = img * c * hw + p;
        const double mu = (*mean)[static_cast<std::size_t>(img * hw + p)];
        const double istd = (*inv_std)[static_cast<std::size_t>(img * hw + p)];
        double sum_gg = 0, sum_ggx = 0;
        for (Index ch = 0; ch < c; ++ch) {
          const double xhat = (xv[base + ch * hw] - mu) * istd;
          const double gy = g[base + ch * hw];
          if (gg) gg[ch] += static_cast<S>(gy * xhat);
          if (gb) gb[ch] += static_cast<S>(gy);
          const double gyg = gy * gmv[ch];
          sum_gg += gyg;
          sum_ggx += gyg * xhat;
        }
        if (gx) {
          const double invc = 1.0 / static_cast<double>(c);
          for (Index ch = 0; ch < c; ++ch) {
            const double xhat = (xv[base + ch * hw] - mu) * istd;
            const double gyg = static_cast<double>(g[base + ch * hw]) * gmv[ch];
            gx[base + ch * hw] +=
                static_cast<S>(istd * (gyg - invc * sum_gg - xhat * invc * sum_ggx));
          }
        }
      }
    }
  });
}

// -- reductions -----------------------------------------------------------------

namespace detail {

enum class ReduceKind { sum, mean };

template <typename S>
Tensor<S> reduce_impl(const Tensor<S>& x, std::vector<int> axes, bool keepdims, ReduceKind kind,
                      const char* name) {
  const int rank = x.rank();
  std::vector<bool> reduced(static_cast<std::size_t>(rank), false);
  if (axes.empty())
    for (int d = 0; d < rank; ++d) axes.push_back(d);
  for (int a : axes) {
    if (a < 0) a += rank;
    require(a >= 0 && a < rank, std::string(name) + ": axis out of range");
    require(!reduced[static_cast<std::size_t>(a)], std::string(name) + ": duplicate axis");
    reduced[static_cast<std::size_t>(a)] = true;
  }
  Shape out_shape;
  Index count = 1;
  for (int d = 0; d < rank; ++d) {
    if (reduced[static_cast<std::size_t>(d)]) {
      count *= x.dim(d);
      if (keepdims) out_shape.push_back(1);
    } else {
      out_shape.push_back(x.dim(d));
    }
  }

  // stride of each input dim into the output buffer (0 when reduced)
  std::vector<Index> out_stride_of(static_cast<std::size_t>(rank), 0);
  {
    Index stride = 1;
    for (int d = rank - 1; d >= 0; --d) {
      if (!reduced[static_cast<std::size_t>(d)]) {
        out_stride_of[static_cast<std::size_t>(d)] = stride;
        stride *= x.dim(d);
      }
    }
  }

  auto out = std::make_shared<std::vector<S>>(static_cast<std::size_t>(numel(out_shape)), S(0));
  const S* xd = x.data();
  S* od = out->data();
  {
    std::vector<Index> c(static_cast<std::size_t>(rank), 0);
    Index oidx = 0;
    const Index nel = x.size();
    for (Index i = 0; i < nel; ++i) {
      od[oidx] += xd[i];
      for (int d = rank - 1; d >= 0; --d) {
        ++c[static_cast<std::size_t>(d)];
        oidx += out_stride_of[static_cast<std::size_t>(d)];
        if (c[static_cast<std::size_t>(d)] < x.dim(d)) break;
        c[static_cast<std::size_t>(d)] = 0;
        oidx -= out_stride_of[static_cast<std::size_t>(d)] * x.dim(d);
      }
    }
  }
  if (kind == ReduceKind::mean) {
    const S inv = S(1) / static_cast<S>(count);
    for (S& v : *out) v *= inv;
  }
  ensure_finite(*out, name);

  if (!x.tracked()) return Tensor<S>(std::move(out_shape), std::move(out));
  const int xn = x.node();
  const Index xsz = x.size();
  const Shape xshape = x.shape();
  const S factor = kind == ReduceKind::mean ? S(1) / static_cast<S>(count) : S(1);
  return x.tape()->emit(std::move(out_shape), out, [=](Tape<S>& t, const std::vector<S>& g) {
    S* gx = t.grad_buf(xn, xsz).data();
    const int r = static_cast<int>(xshape.size());
    std::vector<Index> c(static_cast<std::size_t>(r), 0);
    Index oidx = 0;
    for (Index i = 0; i < xsz; ++i) {
      gx[i] += g[static_cast<std::size_t>(oidx)] * factor;
      for (int d = r - 1; d >= 0; --d) {
        ++c[static_cast<std::size_t>(d)];
        oidx += out_stride_of[static_cast<std::size_t>(d)];
        if (c[static_cast<std::size_t>(d)] < xshape[static_cast<std::size_t>(d)]) break;
        c[static_cast<std::size_t>(d)] = 0;
        oidx -= out_stride_of[static_cast<std::size_t>(d)] * xshape[static_cast<std::size_t>(d)];
      }
    }
  });
}

}  // namespace detail

template <typename S>
Tensor<S> reduce_sum(const Tensor<S>& x, std::vector<int> axes = {}, bool keepdims = false) {
  return detail::reduce_impl(x, std::move(axes), keepdims, detail::ReduceKind::sum, "reduce_sum");
}

template <typename S>
Tensor<S> reduce_mean(const Tensor<S>& x, std::vector<int> axes = {}, bool keepdims = false) {
  return detail::reduce_impl(x, std::move(axes), keepdims, detail::ReduceKind::mean, "reduce_mean");
}

/// Mean over spatial dims: [N,C,H,W] -> [N,C,1,1].
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  require(x.rank() == 4, "global_avg_pool: x must be [N,C,H,W]");
  return reduce_mean(x, {2, 3}, true);
}

}  // namespace elf
