#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "gmsgi/ops.hpp"
#include "gmsgi/rng.hpp"

// Spatial network ops. Convolution-style reductions accumulate in ascending
// (channel, kernel-row, kernel-col) order per output element, with any bias
// added after the sum; the loop oracles in the tests assume exactly this.

namespace gmsgi {
namespace ops {

template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, int stride, int padding) {
  const Tensor<S>& X = x.value();
  const Tensor<S>& W = w.value();
  if (X.rank() != 4 || W.rank() != 4)
    throw ShapeError("conv2d expects BCHW input and OIKK weight, got " + shape_str(X.shape) +
                     " and " + shape_str(W.shape));
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1, padding >= 0");
  const int B = X.shape[0], Cin = X.shape[1], H = X.shape[2], Wd = X.shape[3];
  const int Cout = W.shape[0], k = W.shape[2];
  if (W.shape[1] != Cin)
    throw ShapeError("conv2d channel mismatch: input " + shape_str(X.shape) + " vs weight " +
                     shape_str(W.shape));
  if (W.shape[3] != k) throw ShapeError("conv2d expects square kernels");
  if (b.defined() && (b.value().rank() != 1 || b.value().shape[0] != Cout))
    throw ShapeError("conv2d bias shape mismatch");
  const int Ho = (H + 2 * padding - k) / stride + 1;
  const int Wo = (Wd + 2 * padding - k) / stride + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("conv2d output would be empty for " + shape_str(X.shape));

  Tensor<S> out(Shape{B, Cout, Ho, Wo});
  const S* px = X.ptr();
  const S* pw = W.ptr();
  S* po = out.ptr();
  const std::size_t xcs = static_cast<std::size_t>(H) * Wd;     // per input channel
  const std::size_t ocs = static_cast<std::size_t>(Ho) * Wo;    // per output channel
  for (int bb = 0; bb < B; ++bb)
    for (int co = 0; co < Cout; ++co) {
      S* oc = po + (static_cast<std::size_t>(bb) * Cout + co) * ocs;
      for (int ci = 0; ci < Cin; ++ci) {
        const S* xc = px + (static_cast<std::size_t>(bb) * Cin + ci) * xcs;
        const S* wc = pw + (static_cast<std::size_t>(co) * Cin + ci) * k * k;
        for (int u = 0; u < k; ++u)
          for (int v = 0; v < k; ++v) {
            const S wv = wc[u * k + v];
            for (int oi = 0; oi < Ho; ++oi) {
              const int ii = oi * stride - padding + u;
              if (ii < 0 || ii >= H) continue;
              S* orow = oc + static_cast<std::size_t>(oi) * Wo;
              const S* xrow = xc + static_cast<std::size_t>(ii) * Wd;
              for (int oj = 0; oj < Wo; ++oj) {
                const int jj = oj * stride - padding + v;
                if (jj < 0 || jj >= Wd) continue;
                orow[oj] += wv * xrow[jj];
              }
            }
          }
      }
      if (b.defined()) {
        const S bv = b.value().data[co];
        for (std::size_t i = 0; i < ocs; ++i) oc[i] += bv;
      }
    }

  return make_op(OpKind::conv2d, std::move(out), {x, w, b},
                 [x, w, b, stride, padding, B, Cin, Cout, H, Wd, k, Ho, Wo](Node<S>& self) {
    const S* dy = self.grad.ptr();
    const std::size_t xcs = static_cast<std::size_t>(H) * Wd;
    const std::size_t ocs = static_cast<std::size_t>(Ho) * Wo;
    if (w.requires_grad()) {
      S* dw = w.grad().ptr();
      const S* px = x.value().ptr();
      for (int co = 0; co < Cout; ++co)
        for (int ci = 0; ci < Cin; ++ci)
          for (int u = 0; u < k; ++u)
            for (int v = 0; v < k; ++v) {
              S acc = S(0);
              for (int bb = 0; bb < B; ++bb) {
                const S* xc = px + (static_cast<std::size_t>(bb) * Cin + ci) * xcs;
                const S* dyc = dy + (static_cast<std::size_t>(bb) * Cout + co) * ocs;
                for (int oi = 0; oi < Ho; ++oi) {
                  const int ii = oi * stride - padding + u;
                  if (ii < 0 || ii >= H) continue;
                  const S* xrow = xc + static_cast<std::size_t>(ii) * Wd;
                  const S* dyrow = dyc + static_cast<std::size_t>(oi) * Wo;
                  for (int oj = 0; oj < Wo; ++oj) {
                    const int jj = oj * stride - padding + v;
                    if (jj < 0 || jj >= Wd) continue;
                    acc += xrow[jj] * dyrow[oj];
                  }
                }
              }
              dw[((static_cast<std::size_t>(co) * Cin + ci) * k + u) * k + v] += acc;
            }
    }
    if (x.requires_grad()) {
      S* dx = x.grad().ptr();
      const S* pw = w.value().ptr();
      for (int bb = 0; bb < B; ++bb)
        for (int co = 0; co < Cout; ++co) {
          const S* dyc = dy + (static_cast<std::size_t>(bb) * Cout + co) * ocs;
          for (int ci = 0; ci < Cin; ++ci) {
            S* dxc = dx + (static_cast<std::size_t>(bb) * Cin + ci) * xcs;
            const S* wc = pw + (static_cast<std::size_t>(co) * Cin + ci) * k * k;
            for (int u = 0; u < k; ++u)
              for (int v = 0; v < k; ++v) {
                const S wv = wc[u * k + v];
                for (int oi = 0; oi < Ho; ++oi) {
                  const int ii = oi * stride - padding + u;
                  if (ii < 0 || ii >= H) continue;
                  S* dxrow = dxc + static_cast<std::size_t>(ii) * Wd;
                  const S* dyrow = dyc + static_cast<std::size_t>(oi) * Wo;
                  for (int oj = 0; oj < Wo; ++oj) {
                    const int jj = oj * stride - padding + v;
                    if (jj < 0 || jj >= Wd) continue;
                    dxrow[jj] += wv * dyrow[oj];
                  }
                }
              }
          }
        }
    }
    if (b.defined() && b.requires_grad()) {
      S* db = b.grad().ptr();
      for (int bb = 0; bb < B; ++bb)
        for (int co = 0; co < Cout; ++co) {
          const S* dyc = dy + (static_cast<std::size_t>(bb) * Cout + co) * ocs;
          S acc = S(0);
          for (std::size_t i = 0; i < ocs; ++i) acc += dyc[i];
          db[co] += acc;
        }
    }
  });
}

template <typename S>
Var<S> avgpool2d(const Var<S>& x, int k, int stride) {
  const Tensor<S>& X = x.value();
  if (X.rank() != 4) throw ShapeError("avgpool2d expects BCHW, got " + shape_str(X.shape));
  if (k < 1 || stride < 1) throw ShapeError("avgpool2d: kernel and stride must be >= 1");
  const int B = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  const int Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("avgpool2d window larger than input");
  Tensor<S> out(Shape{B, C, Ho, Wo});
  const S inv = S(1) / S(k * k);
  const S* px = X.ptr();
  S* po = out.ptr();
  for (int bc = 0; bc < B * C; ++bc) {
    const S* xc = px + static_cast<std::size_t>(bc) * H * W;
    S* oc = po + static_cast<std::size_t>(bc) * Ho * Wo;
    for (int oi = 0; oi < Ho; ++oi)
      for (int oj = 0; oj < Wo; ++oj) {
        S s = S(0);
        for (int u = 0; u < k; ++u)
          for (int v = 0; v < k; ++v)
            s += xc[static_cast<std::size_t>(oi * stride + u) * W + oj * stride + v];
        oc[static_cast<std::size_t>(oi) * Wo + oj] = s * inv;
      }
  }
  return make_op(OpKind::avgpool2d, std::move(out), {x},
                 [x, k, stride, B, C, H, W, Ho, Wo, inv](Node<S>& self) {
                   if (!x.requires_grad()) return;
                   S* dx = x.grad().ptr();
                   const S* dy = self.grad.ptr();
                   for (int bc = 0; bc < B * C; ++bc) {
                     S* dxc = dx + static_cast<std::size_t>(bc) * H * W;
                     const S* dyc = dy + static_cast<std::size_t>(bc) * Ho * Wo;
                     for (int oi = 0; oi < Ho; ++oi)
                       for (int oj = 0; oj < Wo; ++oj) {
                         const S d = dyc[static_cast<std::size_t>(oi) * Wo + oj] * inv;
                         for (int u = 0; u < k; ++u)
                           for (int v = 0; v < k; ++v)
                             dxc[static_cast<std::size_t>(oi * stride + u) * W + oj * stride + v] +=
                                 d;
                       }
                   }
                 });
}

// Max pooling; ties keep the first element in (row, col) scan order.
template <typename S>
Var<S> maxpool2d(const Var<S>& x, int k, int stride) {
  const Tensor<S>& X = x.value();
  if (X.rank() != 4) throw ShapeError("maxpool2d expects BCHW, got " + shape_str(X.shape));
  const int B = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  const int Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
  if (Ho < 1 || Wo < 1) throw ShapeError("maxpool2d window larger than input");
  Tensor<S> out(Shape{B, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  const S* px = X.ptr();
  S* po = out.ptr();
  std::size_t oidx = 0;
  for (int bc = 0; bc < B * C; ++bc) {
    const std::size_t xoff = static_cast<std::size_t>(bc) * H * W;
    for (int oi = 0; oi < Ho; ++oi)
      for (int oj = 0; oj < Wo; ++oj, ++oidx) {
        std::size_t best = xoff + static_cast<std::size_t>(oi * stride) * W + oj * stride;
        S bv = px[best];
        for (int u = 0; u < k; ++u)
          for (int v = 0; v < k; ++v) {
            const std::size_t idx =
                xoff + static_cast<std::size_t>(oi * stride + u) * W + oj * stride + v;
            if (px[idx] > bv) {
              bv = px[idx];
              best = idx;
            }
          }
        po[oidx] = bv;
        (*argmax)[oidx] = best;
      }
  }
  return make_op(OpKind::maxpool2d, std::move(out), {x}, [x, argmax](Node<S>& self) {
    if (!x.requires_grad()) return;
    S* dx = x.grad().ptr();
    const S* dy = self.grad.ptr();
    for (std::size_t i = 0; i < argmax->size(); ++i) dx[(*argmax)[i]] += dy[i];
  });
}

// Batch statistics in train mode (biased variance, running update with the
// given momentum); running statistics in eval mode.
template <typename S>
Var<S> batchnorm2d(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta,
                   std::shared_ptr<Tensor<S>> run_mean, std::shared_ptr<Tensor<S>> run_var, S eps,
                   S momentum, bool training) {
  const Tensor<S>& X = x.value();
  if (X.rank() != 4) throw ShapeError("batchnorm2d expects BCHW, got " + shape_str(X.shape));
  const int B = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  if (B < 1) throw ShapeError("batchnorm2d: zero-size batch");
  if (gamma.value().numel() != static_cast<std::size_t>(C) ||
      beta.value().numel() != static_cast<std::size_t>(C))
    throw ShapeError("batchnorm2d affine params must have shape (C)");
  if (!(eps > S(0))) throw ShapeError("batchnorm2d: eps must be > 0");
  const std::size_t cs = static_cast<std::size_t>(H) * W;
  const std::size_t n = static_cast<std::size_t>(B) * cs;

  std::vector<S> mean(C), invstd(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      S m = S(0);
      for (int bb = 0; bb < B; ++bb) {
        const S* xc = X.ptr() + (static_cast<std::size_t>(bb) * C + c) * cs;
        for (std::size_t i = 0; i < cs; ++i) m += xc[i];
      }
      m /= S(n);
      S v = S(0);
      for (int bb = 0; bb < B; ++bb) {
        const S* xc = X.ptr() + (static_cast<std::size_t>(bb) * C + c) * cs;
        for (std::size_t i = 0; i < cs; ++i) {
          const S d = xc[i] - m;
          v += d * d;
        }
      }
      v /= S(n);
      mean[c] = m;
      invstd[c] = S(1) / std::sqrt(v + eps);
      run_mean->data[c] = (S(1) - momentum) * run_mean->data[c] + momentum * m;
      run_var->data[c] = (S(1) - momentum) * run_var->data[c] + momentum * v;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = run_mean->data[c];
      invstd[c] = S(1) / std::sqrt(run_var->data[c] + eps);
    }
  }

  Tensor<S> out(X.shape);
  auto xhat = std::make_shared<Tensor<S>>(X.shape);
  const S* px = X.ptr();
  S* po = out.ptr();
  S* ph = xhat->ptr();
  for (int bb = 0; bb < B; ++bb)
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(bb) * C + c) * cs;
      const S m = mean[c], is = invstd[c];
      const S g = gamma.value().data[c], be = beta.value().data[c];
      for (std::size_t i = 0; i < cs; ++i) {
        const S h = (px[off + i] - m) * is;
        ph[off + i] = h;
        po[off + i] = g * h + be;
      }
    }

  auto istd = std::make_shared<std::vector<S>>(std::move(invstd));
  return make_op(OpKind::batchnorm2d, std::move(out), {x, gamma, beta},
                 [x, gamma, beta, xhat, istd, training, B, C, cs, n](Node<S>& self) {
    const S* dy = self.grad.ptr();
    const S* ph = xhat->ptr();
    std::vector<S> dg(C, S(0)), db(C, S(0));
    for (int bb = 0; bb < B; ++bb)
      for (int c = 0; c < C; ++c) {
        const std::size_t off = (static_cast<std::size_t>(bb) * C + c) * cs;
        S sg = S(0), sb = S(0);
        for (std::size_t i = 0; i < cs; ++i) {
          sg += dy[off + i] * ph[off + i];
          sb += dy[off + i];
        }
        dg[c] += sg;
        db[c] += sb;
      }
    if (gamma.requires_grad()) {
      auto& g = gamma.grad();
      for (int c = 0; c < C; ++c) g.data[c] += dg[c];
    }
    if (beta.requires_grad()) {
      auto& g = beta.grad();
      for (int c = 0; c < C; ++c) g.data[c] += db[c];
    }
    if (x.requires_grad()) {
      S* dx = x.grad().ptr();
      const S invn = S(1) / S(n);
      for (int bb = 0; bb < B; ++bb)
        for (int c = 0; c < C; ++c) {
          const std::size_t off = (static_cast<std::size_t>(bb) * C + c) * cs;
          const S gis = gamma.value().data[c] * (*istd)[c];
          if (training) {
            const S mdb = db[c] * invn, mdg = dg[c] * invn;
            for (std::size_t i = 0; i < cs; ++i)
              dx[off + i] += gis * (dy[off + i] - mdb - ph[off + i] * mdg);
          } else {
            for (std::size_t i = 0; i < cs; ++i) dx[off + i] += gis * dy[off + i];
          }
        }
    }
  });
}

// Inverted dropout; identity (no tape node) in eval mode or at rate 0.
template <typename S>
Var<S> dropout(const Var<S>& x, S rate, Rng& rng, bool training) {
  if (!training || rate <= S(0)) return x;
  if (rate >= S(1)) throw ShapeError("dropout rate must be < 1");
  const S keep = S(1) - rate;
  auto mask = std::make_shared<Tensor<S>>(x.value().shape);
  Tensor<S> out(x.value().shape);
  const S* px = x.value().ptr();
  const S scale = S(1) / keep;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const S m = rng.uniform() < static_cast<double>(keep) ? scale : S(0);
    mask->data[i] = m;
    out.data[i] = px[i] * m;
  }
  return make_op(OpKind::dropout, std::move(out), {x}, [x, mask](Node<S>& self) {
    if (!x.requires_grad()) return;
    auto& g = x.grad();
    for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += self.grad.data[i] * mask->data[i];
  });
}

// Non-overlapping g x g patches -> (B, N, C*g*g); feature index is
// channel-major: f = c*g*g + di*g + dj, node index row-major over the grid.
template <typename S>
Var<S> unfold(const Var<S>& x, int g) {
  const Tensor<S>& X = x.value();
  if (X.rank() != 4) throw ShapeError("unfold expects BCHW, got " + shape_str(X.shape));
  const int B = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  if (g < 1 || H % g || W % g)
    throw ShapeError("unfold: spatial dims " + shape_str(X.shape) + " not divisible by g=" +
                     std::to_string(g));
  const int Hg = H / g, Wg = W / g, N = Hg * Wg, F = C * g * g;
  Tensor<S> out(Shape{B, N, F});
  const S* px = X.ptr();
  S* po = out.ptr();
  for (int bb = 0; bb < B; ++bb)
    for (int bi = 0; bi < Hg; ++bi)
      for (int bj = 0; bj < Wg; ++bj) {
        S* node = po + (static_cast<std::size_t>(bb) * N + bi * Wg + bj) * F;
        for (int c = 0; c < C; ++c)
          for (int di = 0; di < g; ++di)
            for (int dj = 0; dj < g; ++dj)
              node[(c * g + di) * g + dj] =
                  px[((static_cast<std::size_t>(bb) * C + c) * H + bi * g + di) * W + bj * g + dj];
      }
  return make_op(OpKind::unfold, std::move(out), {x}, [x, B, C, H, W, g, Hg, Wg, N, F](Node<S>& self) {
    if (!x.requires_grad()) return;
    S* dx = x.grad().ptr();
    const S* dy = self.grad.ptr();
    for (int bb = 0; bb < B; ++bb)
      for (int bi = 0; bi < Hg; ++bi)
        for (int bj = 0; bj < Wg; ++bj) {
          const S* node = dy + (static_cast<std::size_t>(bb) * N + bi * Wg + bj) * F;
          for (int c = 0; c < C; ++c)
            for (int di = 0; di < g; ++di)
              for (int dj = 0; dj < g; ++dj)
                dx[((static_cast<std::size_t>(bb) * C + c) * H + bi * g + di) * W + bj * g + dj] +=
                    node[(c * g + di) * g + dj];
        }
  });
}

// Inverse of unfold for the same (C,H,W,g).
template <typename S>
Var<S> fold(const Var<S>& nodes, int C, int H, int W, int g) {
  const Tensor<S>& Xn = nodes.value();
  if (Xn.rank() != 3) throw ShapeError("fold expects (B,N,F), got " + shape_str(Xn.shape));
  const int B = Xn.shape[0], Hg = H / g, Wg = W / g, N = Hg * Wg, F = C * g * g;
  if (g < 1 || H % g || W % g || Xn.shape[1] != N || Xn.shape[2] != F)
    throw ShapeError("fold: node tensor " + shape_str(Xn.shape) + " does not match C=" +
                     std::to_string(C) + " H=" + std::to_string(H) + " W=" + std::to_string(W) +
                     " g=" + std::to_string(g));
  Tensor<S> out(Shape{B, C, H, W});
  const S* pn = Xn.ptr();
  S* po = out.ptr();
  for (int bb = 0; bb < B; ++bb)
    for (int bi = 0; bi < Hg; ++bi)
      for (int bj = 0; bj < Wg; ++bj) {
        const S* node = pn + (static_cast<std::size_t>(bb) * N + bi * Wg + bj) * F;
        for (int c = 0; c < C; ++c)
          for (int di = 0; di < g; ++di)
            for (int dj = 0; dj < g; ++dj)
              po[((static_cast<std::size_t>(bb) * C + c) * H + bi * g + di) * W + bj * g + dj] =
                  node[(c * g + di) * g + dj];
      }
  return make_op(OpKind::fold, std::move(out), {nodes},
                 [nodes, B, C, H, W, g, Hg, Wg, N, F](Node<S>& self) {
    if (!nodes.requires_grad()) return;
    S* dn = nodes.grad().ptr();
    const S* dy = self.grad.ptr();
    for (int bb = 0; bb < B; ++bb)
      for (int bi = 0; bi < Hg; ++bi)
        for (int bj = 0; bj < Wg; ++bj) {
          S* node = dn + (static_cast<std::size_t>(bb) * N + bi * Wg + bj) * F;
          for (int c = 0; c < C; ++c)
            for (int di = 0; di < g; ++di)
              for (int dj = 0; dj < g; ++dj)
                node[(c * g + di) * g + dj] +=
                    dy[((static_cast<std::size_t>(bb) * C + c) * H + bi * g + di) * W + bj * g +
                       dj];
        }
  });
}

template <typename S>
Var<S> global_avg_pool(const Var<S>& x) {
  const Tensor<S>& X = x.value();
  if (X.rank() != 4) throw ShapeError("global_avg_pool expects BCHW, got " + shape_str(X.shape));
  const int B = X.shape[0], C = X.shape[1];
  const std::size_t cs = static_cast<std::size_t>(X.shape[2]) * X.shape[3];
  Tensor<S> out(Shape{B, C});
  const S inv = S(1) / S(cs);
  for (int bc = 0; bc < B * C; ++bc) {
    const S* xc = X.ptr() + static_cast<std::size_t>(bc) * cs;
    S s = S(0);
    for (std::size_t i = 0; i < cs; ++i) s += xc[i];
    out.data[bc] = s * inv;
  }
  return make_op(OpKind::global_avg_pool, std::move(out), {x}, [x, B, C, cs, inv](Node<S>& self) {
    if (!x.requires_grad()) return;
    S* dx = x.grad().ptr();
    const S* dy = self.grad.ptr();
    for (int bc = 0; bc < B * C; ++bc) {
      const S d = dy[bc] * inv;
      S* dxc = dx + static_cast<std::size_t>(bc) * cs;
      for (std::size_t i = 0; i < cs; ++i) dxc[i] += d;
    }
  });
}

// y = x * W^T + b with weight (out, in).
template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  const Tensor<S>& X = x.value();
  const Tensor<S>& W = w.value();
  if (X.rank() != 2 || W.rank() != 2 || X.shape[1] != W.shape[1])
    throw ShapeError("linear shape mismatch: " + shape_str(X.shape) + " x " + shape_str(W.shape));
  const int B = X.shape[0], In = X.shape[1], Out = W.shape[0];
  if (b.defined() && b.value().numel() != static_cast<std::size_t>(Out))
    throw ShapeError("linear bias shape mismatch");
  Tensor<S> out(Shape{B, Out});
  for (int bb = 0; bb < B; ++bb) {
    const S* xr = X.ptr() + static_cast<std::size_t>(bb) * In;
    S* orow = out.ptr() + static_cast<std::size_t>(bb) * Out;
    for (int o = 0; o < Out; ++o) {
      const S* wr = W.ptr() + static_cast<std::size_t>(o) * In;
      S s = S(0);
      for (int i = 0; i < In; ++i) s += xr[i] * wr[i];
      orow[o] = b.defined() ? s + b.value().data[o] : s;
    }
  }
  return make_op(OpKind::linear, std::move(out), {x, w, b}, [x, w, b, B, In, Out](Node<S>& self) {
    const S* dy = self.grad.ptr();
    if (x.requires_grad()) {
      S* dx = x.grad().ptr();
      const S* pw = w.value().ptr();
      for (int bb = 0; bb < B; ++bb)
        for (int o = 0; o < Out; ++o) {
          const S d = dy[static_cast<std::size_t>(bb) * Out + o];
          const S* wr = pw + static_cast<std::size_t>(o) * In;
          S* dxr = dx + static_cast<std::size_t>(bb) * In;
          for (int i = 0; i < In; ++i) dxr[i] += d * wr[i];
        }
    }
    if (w.requires_grad()) {
      S* dw = w.grad().ptr();
      const S* px = x.value().ptr();
      for (int bb = 0; bb < B; ++bb)
        for (int o = 0; o < Out; ++o) {
          const S d = dy[static_cast<std::size_t>(bb) * Out + o];
          const S* xr = px + static_cast<std::size_t>(bb) * In;
          S* dwr = dw + static_cast<std::size_t>(o) * In;
          for (int i = 0; i < In; ++i) dwr[i] += d * xr[i];
        }
    }
    if (b.defined() && b.requires_grad()) {
      S* db = b.grad().ptr();
      for (int bb = 0; bb < B; ++bb)
        for (int o = 0; o < Out; ++o) db[o] += dy[static_cast<std::size_t>(bb) * Out + o];
    }
  });
}

// Nearest-neighbour upsampling of the trailing two axes by an integer factor.
// Also serves as the kernel block-expansion: out(..., i, j) = in(..., i/f, j/f).
template <typename S>
Var<S> upsample_nearest(const Var<S>& x, int f) {
  const Tensor<S>& X = x.value();
  if (X.rank() < 2) throw ShapeError("upsample_nearest needs at least 2 axes");
  if (f < 1) throw ShapeError("upsample_nearest factor must be >= 1");
  const int H = X.shape[X.rank() - 2], W = X.shape[X.rank() - 1];
  std::size_t lead = 1;
  for (int i = 0; i + 2 < X.rank(); ++i) lead *= X.shape[i];
  Shape osh = X.shape;
  osh[X.rank() - 2] = H * f;
  osh[X.rank() - 1] = W * f;
  Tensor<S> out(osh);
  const int Ho = H * f, Wo = W * f;
  const S* px = X.ptr();
  S* po = out.ptr();
  for (std::size_t l = 0; l < lead; ++l) {
    const S* xi = px + l * H * W;
    S* oi = po + static_cast<std::size_t>(l) * Ho * Wo;
    for (int i = 0; i < Ho; ++i) {
      const S* xrow = xi + static_cast<std::size_t>(i / f) * W;
      S* orow = oi + static_cast<std::size_t>(i) * Wo;
      for (int j = 0; j < Wo; ++j) orow[j] = xrow[j / f];
    }
  }
  return make_op(OpKind::upsample_nearest, std::move(out), {x},
                 [x, f, H, W, Ho, Wo, lead](Node<S>& self) {
                   if (!x.requires_grad()) return;
                   S* dx = x.grad().ptr();
                   const S* dy = self.grad.ptr();
                   for (std::size_t l = 0; l < lead; ++l) {
                     S* dxi = dx + l * H * W;
                     const S* dyi = dy + static_cast<std::size_t>(l) * Ho * Wo;
                     for (int i = 0; i < Ho; ++i) {
                       S* dxrow = dxi + static_cast<std::size_t>(i / f) * W;
                       const S* dyrow = dyi + static_cast<std::size_t>(i) * Wo;
                       for (int j = 0; j < Wo; ++j) dxrow[j / f] += dyrow[j];
                     }
                   }
                 });
}

// Row-wise L2 normalization of (B, D); norms are guarded at 1e-12.
template <typename S>
Var<S> l2_normalize_rows(const Var<S>& x) {
  const Tensor<S>& X = x.value();
  if (X.rank() != 2) throw ShapeError("l2_normalize_rows expects (B,D), got " + shape_str(X.shape));
  const int B = X.shape[0], D = X.shape[1];
  Tensor<S> out(X.shape);
  auto norms = std::make_shared<std::vector<S>>(B);
  for (int bb = 0; bb < B; ++bb) {
    const S* xr = X.ptr() + static_cast<std::size_t>(bb) * D;
    S s = S(0);
    for (int i = 0; i < D; ++i) s += xr[i] * xr[i];
    const S nrm = std::max(std::sqrt(s), S(1e-12));
    (*norms)[bb] = nrm;
    S* orow = out.ptr() + static_cast<std::size_t>(bb) * D;
    for (int i = 0; i < D; ++i) orow[i] = xr[i] / nrm;
  }
  return make_op(OpKind::l2_normalize_rows, std::move(out), {x}, [x, norms, B, D](Node<S>& self) {
    if (!x.requires_grad()) return;
    S* dx = x.grad().ptr();
    const S* y = self.value.ptr();
    const S* dy = self.grad.ptr();
    for (int bb = 0; bb < B; ++bb) {
      const S* yr = y + static_cast<std::size_t>(bb) * D;
      const S* dyr = dy + static_cast<std::size_t>(bb) * D;
      S dot = S(0);
      for (int i = 0; i < D; ++i) dot += yr[i] * dyr[i];
      S* dxr = dx + static_cast<std::size_t>(bb) * D;
      const S inv = S(1) / (*norms)[bb];
      for (int i = 0; i < D; ++i) dxr[i] += (dyr[i] - yr[i] * dot) * inv;
    }
  });
}

// Mean over the batch of (logsumexp(logits_b) - logits_b[label_b]).
template <typename S>
Var<S> cross_entropy_logits(const Var<S>& logits, const std::vector<int>& labels) {
  const Tensor<S>& L = logits.value();
  if (L.rank() != 2) throw ShapeError("cross_entropy_logits expects (B,C)");
  const int B = L.shape[0], C = L.shape[1];
  if (static_cast<int>(labels.size()) != B)
    throw ShapeError("cross_entropy_logits: label count does not match batch");
  for (int l : labels)
    if (l < 0 || l >= C)
      throw ShapeError("cross_entropy_logits: label " + std::to_string(l) + " out of range [0," +
                       std::to_string(C) + ")");
  auto soft = std::make_shared<Tensor<S>>(L.shape);
  S loss = S(0);
  for (int bb = 0; bb < B; ++bb) {
    const S* lr = L.ptr() + static_cast<std::size_t>(bb) * C;
    S mx = lr[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, lr[c]);
    S sum = S(0);
    S* sr = soft->ptr() + static_cast<std::size_t>(bb) * C;
    for (int c = 0; c < C; ++c) {
      sr[c] = std::exp(lr[c] - mx);
      sum += sr[c];
    }
    for (int c = 0; c < C; ++c) sr[c] /= sum;
    loss += mx + std::log(sum) - lr[labels[bb]];
  }
  loss /= S(B);
  Tensor<S> out(Shape{1}, loss);
  return make_op(OpKind::cross_entropy_logits, std::move(out), {logits},
                 [logits, soft, labels, B, C](Node<S>& self) {
                   if (!logits.requires_grad()) return;
                   S* dl = logits.grad().ptr();
                   const S d = self.grad.data[0] / S(B);
                   for (int bb = 0; bb < B; ++bb) {
                     const S* sr = soft->ptr() + static_cast<std::size_t>(bb) * C;
                     S* dr = dl + static_cast<std::size_t>(bb) * C;
                     for (int c = 0; c < C; ++c)
                       dr[c] += d * (sr[c] - (c == labels[bb] ? S(1) : S(0)));
                   }
                 });
}

}  // namespace ops
}  // namespace gmsgi
