#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "gmsgi/autodiff.hpp"
#include "gmsgi/tensor.hpp"

// Pointwise ops, reductions, matmul, softmax, shape ops.
//
// Reduction order convention: every sum over a reduced axis accumulates in
// ascending index order, one scalar chain per output element. Oracles in the
// test suite rely on this being bit-reproducible.

namespace gmsgi {
namespace ops {

template <typename S>
void check_same_shape(OpKind k, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape)
    throw ShapeError(std::string("op '") + op_name(k) + "' shape mismatch: " + shape_str(a.shape) +
                     " vs " + shape_str(b.shape));
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  check_same_shape(OpKind::add, a.value(), b.value());
  Tensor<S> out(a.value().shape);
  const S* pa = a.value().ptr();
  const S* pb = b.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = pa[i] + pb[i];
  return make_op(OpKind::add, std::move(out), {a, b}, [a, b](Node<S>& self) {
    if (a.requires_grad()) a.node()->add_grad(self.grad);
    if (b.requires_grad()) b.node()->add_grad(self.grad);
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  check_same_shape(OpKind::sub, a.value(), b.value());
  Tensor<S> out(a.value().shape);
  const S* pa = a.value().ptr();
  const S* pb = b.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = pa[i] - pb[i];
  return make_op(OpKind::sub, std::move(out), {a, b}, [a, b](Node<S>& self) {
    if (a.requires_grad()) a.node()->add_grad(self.grad);
    if (b.requires_grad()) {
      auto& g = b.grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] -= self.grad.data[i];
    }
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  check_same_shape(OpKind::mul, a.value(), b.value());
  Tensor<S> out(a.value().shape);
  const S* pa = a.value().ptr();
  const S* pb = b.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = pa[i] * pb[i];
  return make_op(OpKind::mul, std::move(out), {a, b}, [a, b](Node<S>& self) {
    const S* dy = self.grad.ptr();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      const S* pb = b.value().ptr();
      for (std::size_t i = 0; i < ga.numel(); ++i) ga.data[i] += dy[i] * pb[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      const S* pa = a.value().ptr();
      for (std::size_t i = 0; i < gb.numel(); ++i) gb.data[i] += dy[i] * pa[i];
    }
  });
}

template <typename S>
Var<S> divide(const Var<S>& a, const Var<S>& b) {
  check_same_shape(OpKind::divide, a.value(), b.value());
  Tensor<S> out(a.value().shape);
  const S* pa = a.value().ptr();
  const S* pb = b.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = pa[i] / pb[i];
  return make_op(OpKind::divide, std::move(out), {a, b}, [a, b](Node<S>& self) {
    const S* dy = self.grad.ptr();
    const S* pb = b.value().ptr();
    if (a.requires_grad()) {
      auto& ga = a.grad();
      for (std::size_t i = 0; i < ga.numel(); ++i) ga.data[i] += dy[i] / pb[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad();
      const S* y = self.value.ptr();
      for (std::size_t i = 0; i < gb.numel(); ++i) gb.data[i] -= dy[i] * y[i] / pb[i];
    }
  });
}

template <typename S>
Var<S> scalar_scale(const Var<S>& x, S c) {
  Tensor<S> out(x.value().shape);
  const S* px = x.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = c * px[i];
  return make_op(OpKind::scalar_scale, std::move(out), {x}, [x, c](Node<S>& self) {
    if (!x.requires_grad()) return;
    auto& g = x.grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += c * self.grad.data[i];
  });
}

template <typename S>
Var<S> scalar_add(const Var<S>& x, S c) {
  Tensor<S> out(x.value().shape);
  const S* px = x.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = px[i] + c;
  return make_op(OpKind::scalar_add, std::move(out), {x}, [x](Node<S>& self) {
    if (x.requires_grad()) x.node()->add_grad(self.grad);
  });
}

template <typename S>
Var<S> pow_scalar(const Var<S>& x, S e) {
  Tensor<S> out(x.value().shape);
  const S* px = x.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = std::pow(px[i], e);
  return make_op(OpKind::pow_scalar, std::move(out), {x}, [x, e](Node<S>& self) {
    if (!x.requires_grad()) return;
    auto& g = x.grad();
    const S* px = x.value().ptr();
    for (std::size_t i = 0; i < g.numel(); ++i)
      g.data[i] += self.grad.data[i] * e * std::pow(px[i], e - S(1));
  });
}

template <typename S>
Var<S> exp_op(const Var<S>& x) {
  Tensor<S> out(x.value().shape);
  const S* px = x.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = std::exp(px[i]);
  return make_op(OpKind::exp, std::move(out), {x}, [x](Node<S>& self) {
    if (!x.requires_grad()) return;
    auto& g = x.grad();
    const S* y = self.value.ptr();
    for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += self.grad.data[i] * y[i];
  });
}

template <typename S>
Var<S> log_op(const Var<S>& x) {
  Tensor<S> out(x.value().shape);
  const S* px = x.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = std::log(px[i]);
  return make_op(OpKind::log, std::move(out), {x}, [x](Node<S>& self) {
    if (!x.requires_grad()) return;
    auto& g = x.grad();
    const S* px = x.value().ptr();
    for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += self.grad.data[i] / px[i];
  });
}

template <typename S>
Var<S> sqrt_op(const Var<S>& x) {
  Tensor<S> out(x.value().shape);
  const S* px = x.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = std::sqrt(px[i]);
  return make_op(OpKind::sqrt, std::move(out), {x}, [x](Node<S>& self) {
    if (!x.requires_grad()) return;
    auto& g = x.grad();
    const S* y = self.value.ptr();
    for (std::size_t i = 0; i < g.numel(); ++i)
      g.data[i] += self.grad.data[i] / (S(2) * y[i]);
  });
}

template <typename S>
Var<S> relu(const Var<S>& x) {
  Tensor<S> out(x.value().shape);
  const S* px = x.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = px[i] > S(0) ? px[i] : S(0);
  return make_op(OpKind::relu, std::move(out), {x}, [x](Node<S>& self) {
    if (!x.requires_grad()) return;
    auto& g = x.grad();
    const S* px = x.value().ptr();
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (px[i] > S(0)) g.data[i] += self.grad.data[i];
  });
}

template <typename S>
Var<S> sigmoid(const Var<S>& x) {
  Tensor<S> out(x.value().shape);
  const S* px = x.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    S v = px[i];
    out.data[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                            : std::exp(v) / (S(1) + std::exp(v));
  }
  return make_op(OpKind::sigmoid, std::move(out), {x}, [x](Node<S>& self) {
    if (!x.requires_grad()) return;
    auto& g = x.grad();
    const S* y = self.value.ptr();
    for (std::size_t i = 0; i < g.numel(); ++i)
      g.data[i] += self.grad.data[i] * y[i] * (S(1) - y[i]);
  });
}

namespace detail {

// C(m,n) = sum_k A(m,k) * B(k,n), k ascending per output element.
template <typename S>
void gemm_ordered(const S* A, const S* B, S* C, int M, int K, int N) {
  for (int m = 0; m < M; ++m) {
    S* crow = C + static_cast<std::size_t>(m) * N;
    for (int n = 0; n < N; ++n) crow[n] = S(0);
    const S* arow = A + static_cast<std::size_t>(m) * K;
    for (int k = 0; k < K; ++k) {
      const S a = arow[k];
      const S* brow = B + static_cast<std::size_t>(k) * N;
      for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
    }
  }
}

// dA += dC * B^T, dB += A^T * dC
template <typename S>
void gemm_backward(const S* A, const S* B, const S* dC, S* dA, S* dB, int M, int K, int N) {
  if (dA) {
    for (int m = 0; m < M; ++m) {
      const S* dcrow = dC + static_cast<std::size_t>(m) * N;
      S* darow = dA + static_cast<std::size_t>(m) * K;
      for (int k = 0; k < K; ++k) {
        const S* brow = B + static_cast<std::size_t>(k) * N;
        S s = S(0);
        for (int n = 0; n < N; ++n) s += dcrow[n] * brow[n];
        darow[k] += s;
      }
    }
  }
  if (dB) {
    for (int m = 0; m < M; ++m) {
      const S* arow = A + static_cast<std::size_t>(m) * K;
      const S* dcrow = dC + static_cast<std::size_t>(m) * N;
      for (int k = 0; k < K; ++k) {
        const S a = arow[k];
        S* dbrow = dB + static_cast<std::size_t>(k) * N;
        for (int n = 0; n < N; ++n) dbrow[n] += a * dcrow[n];
      }
    }
  }
}

}  // namespace detail

// (M,K)x(K,N) or batched (B,M,K)x(B,K,N).
template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  const Tensor<S>& A = a.value();
  const Tensor<S>& B = b.value();
  if (A.rank() != B.rank() || (A.rank() != 2 && A.rank() != 3))
    throw ShapeError("matmul expects two 2-d or two 3-d tensors, got " + shape_str(A.shape) +
                     " and " + shape_str(B.shape));
  int nb = A.rank() == 3 ? A.shape[0] : 1;
  int M = A.shape[A.rank() - 2], K = A.shape[A.rank() - 1];
  int K2 = B.shape[B.rank() - 2], N = B.shape[B.rank() - 1];
  if (K != K2 || (B.rank() == 3 && B.shape[0] != nb))
    throw ShapeError("matmul shape mismatch: " + shape_str(A.shape) + " x " + shape_str(B.shape));
  Shape osh = A.rank() == 3 ? Shape{nb, M, N} : Shape{M, N};
  Tensor<S> out(osh);
  for (int i = 0; i < nb; ++i)
    detail::gemm_ordered(A.ptr() + static_cast<std::size_t>(i) * M * K,
                         B.ptr() + static_cast<std::size_t>(i) * K * N,
                         out.ptr() + static_cast<std::size_t>(i) * M * N, M, K, N);
  return make_op(OpKind::matmul, std::move(out), {a, b}, [a, b, nb, M, K, N](Node<S>& self) {
    S* dA = nullptr;
    S* dB = nullptr;
    if (a.requires_grad()) dA = a.grad().ptr();
    if (b.requires_grad()) dB = b.grad().ptr();
    for (int i = 0; i < nb; ++i)
      detail::gemm_backward(a.value().ptr() + static_cast<std::size_t>(i) * M * K,
                            b.value().ptr() + static_cast<std::size_t>(i) * K * N,
                            self.grad.ptr() + static_cast<std::size_t>(i) * M * N,
                            dA ? dA + static_cast<std::size_t>(i) * M * K : nullptr,
                            dB ? dB + static_cast<std::size_t>(i) * K * N : nullptr, M, K, N);
  });
}

namespace detail {

template <typename S>
void axis_extents(const Tensor<S>& x, int axis, std::size_t& outer, int& len, std::size_t& inner) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("axis out of range for shape " + shape_str(x.shape));
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape[i];
  len = x.shape[axis];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape[i];
}

}  // namespace detail

// Numerically stable softmax along one axis.
template <typename S>
Var<S> softmax(const Var<S>& x, int axis) {
  std::size_t outer, inner;
  int len;
  detail::axis_extents(x.value(), axis, outer, len, inner);
  Tensor<S> out(x.value().shape);
  const S* px = x.value().ptr();
  S* po = out.ptr();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      S mx = px[base];
      for (int l = 1; l < len; ++l) mx = std::max(mx, px[base + l * inner]);
      S sum = S(0);
      for (int l = 0; l < len; ++l) {
        S e = std::exp(px[base + l * inner] - mx);
        po[base + l * inner] = e;
        sum += e;
      }
      for (int l = 0; l < len; ++l) po[base + l * inner] /= sum;
    }
  return make_op(OpKind::softmax, std::move(out), {x}, [x, outer, len, inner](Node<S>& self) {
    if (!x.requires_grad()) return;
    auto& g = x.grad();
    const S* y = self.value.ptr();
    const S* dy = self.grad.ptr();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        S dot = S(0);
        for (int l = 0; l < len; ++l) dot += y[base + l * inner] * dy[base + l * inner];
        for (int l = 0; l < len; ++l) {
          const std::size_t idx = base + l * inner;
          g.data[idx] += y[idx] * (dy[idx] - dot);
        }
      }
  });
}

// Mean along one axis; the reduced axis is removed from the shape.
template <typename S>
Var<S> mean_axis(const Var<S>& x, int axis) {
  if (axis < 0) axis += x.value().rank();
  std::size_t outer, inner;
  int len;
  detail::axis_extents(x.value(), axis, outer, len, inner);
  if (x.value().rank() == 1)
    throw ShapeError("mean_axis on rank-1 tensor: use sum_all/scalar ops instead");
  Shape osh;
  for (int i = 0; i < x.value().rank(); ++i)
    if (i != axis) osh.push_back(x.value().shape[i]);
  Tensor<S> out(osh);
  const S* px = x.value().ptr();
  const S invn = S(1) / S(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      S s = S(0);
      for (int l = 0; l < len; ++l) s += px[base + l * inner];
      out.data[o * inner + in] = s * invn;
    }
  return make_op(OpKind::mean_axis, std::move(out), {x},
                 [x, outer, len, inner, invn](Node<S>& self) {
                   if (!x.requires_grad()) return;
                   auto& g = x.grad();
                   const S* dy = self.grad.ptr();
                   for (std::size_t o = 0; o < outer; ++o)
                     for (std::size_t in = 0; in < inner; ++in) {
                       const S d = dy[o * inner + in] * invn;
                       const std::size_t base = o * len * inner + in;
                       for (int l = 0; l < len; ++l) g.data[base + l * inner] += d;
                     }
                 });
}

// Sum of all elements in flat ascending order -> shape {1}.
template <typename S>
Var<S> sum_all(const Var<S>& x) {
  S s = S(0);
  const S* px = x.value().ptr();
  for (std::size_t i = 0; i < x.value().numel(); ++i) s += px[i];
  Tensor<S> out(Shape{1}, s);
  return make_op(OpKind::sum_all, std::move(out), {x}, [x](Node<S>& self) {
    if (!x.requires_grad()) return;
    auto& g = x.grad();
    const S d = self.grad.data[0];
    for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += d;
  });
}

template <typename S>
Var<S> reshape(const Var<S>& x, Shape sh) {
  Tensor<S> out = x.value().reshaped(std::move(sh));
  Shape orig = x.value().shape;
  return make_op(OpKind::reshape, std::move(out), {x}, [x, orig](Node<S>& self) {
    if (!x.requires_grad()) return;
    auto& g = x.grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += self.grad.data[i];
  });
}

namespace detail {

template <typename S>
Tensor<S> permute_tensor(const Tensor<S>& x, const std::vector<int>& axes) {
  int r = x.rank();
  if (static_cast<int>(axes.size()) != r) throw ShapeError("permute axes rank mismatch");
  Shape osh(r);
  std::vector<std::size_t> istr(r, 1), ostr(r, 1);
  for (int i = r - 2; i >= 0; --i) istr[i] = istr[i + 1] * x.shape[i + 1];
  for (int i = 0; i < r; ++i) osh[i] = x.shape[axes[i]];
  Tensor<S> out(osh);
  for (int i = r - 2; i >= 0; --i) ostr[i] = ostr[i + 1] * osh[i + 1];
  std::vector<int> idx(r, 0);
  const std::size_t n = x.numel();
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (int i = 0; i < r; ++i) src += idx[i] * istr[axes[i]];
    out.data[flat] = x.data[src];
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[i] < osh[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

}  // namespace detail

template <typename S>
Var<S> permute(const Var<S>& x, std::vector<int> axes) {
  Tensor<S> out = detail::permute_tensor(x.value(), axes);
  return make_op(OpKind::permute, std::move(out), {x}, [x, axes](Node<S>& self) {
    if (!x.requires_grad()) return;
    std::vector<int> inv(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = static_cast<int>(i);
    Tensor<S> gx = detail::permute_tensor(self.grad, inv);
    x.node()->add_grad(gx);
  });
}

// y = s * x where s is a learnable scalar (shape {1}).
template <typename S>
Var<S> scale_by(const Var<S>& x, const Var<S>& s) {
  if (s.value().numel() != 1)
    throw ShapeError("scale_by expects a scalar multiplier, got " + shape_str(s.value().shape));
  const S c = s.value().data[0];
  Tensor<S> out(x.value().shape);
  const S* px = x.value().ptr();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = c * px[i];
  return make_op(OpKind::scale_by, std::move(out), {x, s}, [x, s, c](Node<S>& self) {
    const S* dy = self.grad.ptr();
    if (x.requires_grad()) {
      auto& g = x.grad();
      for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += c * dy[i];
    }
    if (s.requires_grad()) {
      S acc = S(0);
      const S* px = x.value().ptr();
      for (std::size_t i = 0; i < x.value().numel(); ++i) acc += px[i] * dy[i];
      s.grad().data[0] += acc;
    }
  });
}

}  // namespace ops
}  // namespace gmsgi
