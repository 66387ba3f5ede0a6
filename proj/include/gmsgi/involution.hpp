#pragma once

#include <utility>
#include <vector>

#include "gmsgi/modules.hpp"

// Grouped pixel-level involution with multi-scale dynamic kernels.
//
// Kernel layout convention: the K*K axis is row-major over the centered
// offsets (dk1, dk2) starting at (-K/2, -K/2); checkpoints depend on it.

namespace gmsgi {

struct InvolutionConfig {
  int channels = 0;                // C
  int group_size = 8;              // g, spatial block edge
  int channel_groups = 4;          // G
  std::vector<int> kernel_sizes;   // KS
  int reduction = 4;               // r
  int stride = 1;                  // s, honored by average-pool downsampling
  int dilation = 1;
  int proj_kernel = 5;             // p

  int reduced_channels() const { return std::max(1, channels / reduction); }

  void validate() const {
    if (channels < 1) throw ShapeError("involution: channels must be positive");
    if (channel_groups < 1 || channels % channel_groups)
      throw ShapeError("involution: G=" + std::to_string(channel_groups) +
                       " does not divide C=" + std::to_string(channels));
    if (kernel_sizes.empty()) throw ShapeError("involution: empty kernel size set");
    for (int k : kernel_sizes)
      if (k < 1 || k % 2 == 0)
        throw ShapeError("involution: kernel size " + std::to_string(k) + " must be odd and >= 1");
    if (proj_kernel < 1 || proj_kernel % 2 == 0)
      throw ShapeError("involution: projected kernel size must be odd and >= 1");
    if (group_size < 1 || stride < 1 || dilation < 1)
      throw ShapeError("involution: g, stride, dilation must be >= 1");
  }
};

template <typename S>
struct KernelStack {
  std::vector<int> sizes;        // one entry per K in KS
  std::vector<Var<S>> kernels;   // each (B, G, K*K, H/g, W/g), values in (0,1)
};

// Block mean over non-overlapping g x g cells.
template <typename S>
Var<S> group_pool(const Var<S>& x, int g) {
  const Tensor<S>& X = x.value();
  if (X.rank() != 4) throw ShapeError("group_pool expects BCHW, got " + shape_str(X.shape));
  if (g < 1 || X.shape[2] % g || X.shape[3] % g)
    throw ShapeError("group_pool: spatial dims " + shape_str(X.shape) +
                     " not divisible by g=" + std::to_string(g));
  if (g == 1) return x;
  return ops::avgpool2d(x, g, g);
}

// expanded(..., i, j) = k(..., i/g, j/g)
template <typename S>
Var<S> expand_kernels(const Var<S>& k, int g) {
  if (k.value().rank() != 5)
    throw ShapeError("expand_kernels expects (B,G,K2,h,w), got " + shape_str(k.value().shape));
  if (g == 1) return k;
  return ops::upsample_nearest(k, g);
}

// y(b,c,i,j) = sum_k expanded(b, c/(C/G), k, i, j) * x(b, c, i+dk1*dil, j+dk2*dil)
// with zero padding of (K/2)*dil so spatial dims are preserved.
template <typename S>
Var<S> apply_involution(const Var<S>& x, const Var<S>& expanded, int K, int G, int dilation) {
  const Tensor<S>& X = x.value();
  const Tensor<S>& E = expanded.value();
  if (X.rank() != 4 || E.rank() != 5)
    throw ShapeError("apply_involution expects BCHW input and (B,G,K2,H,W) kernels");
  const int B = X.shape[0], C = X.shape[1], H = X.shape[2], W = X.shape[3];
  if (G < 1 || C % G)
    throw ShapeError("apply_involution: G=" + std::to_string(G) +
                     " does not divide C=" + std::to_string(C));
  if (E.shape[0] != B || E.shape[1] != G || E.shape[2] != K * K || E.shape[3] != H ||
      E.shape[4] != W)
    throw ShapeError("apply_involution: kernel tensor " + shape_str(E.shape) +
                     " does not match input " + shape_str(X.shape) + " with K=" +
                     std::to_string(K) + " G=" + std::to_string(G));
  const int cpg = C / G, half = K / 2;

  Tensor<S> out(X.shape);
  const S* px = X.ptr();
  const S* pe = E.ptr();
  S* po = out.ptr();
  const std::size_t cs = static_cast<std::size_t>(H) * W;
  for (int bb = 0; bb < B; ++bb)
    for (int c = 0; c < C; ++c) {
      const int gi = c / cpg;
      const S* xc = px + (static_cast<std::size_t>(bb) * C + c) * cs;
      S* oc = po + (static_cast<std::size_t>(bb) * C + c) * cs;
      for (int k = 0; k < K * K; ++k) {
        const int d1 = (k / K - half) * dilation;
        const int d2 = (k % K - half) * dilation;
        const S* kc = pe + ((static_cast<std::size_t>(bb) * G + gi) * K * K + k) * cs;
        for (int i = 0; i < H; ++i) {
          const int ii = i + d1;
          if (ii < 0 || ii >= H) continue;
          const S* krow = kc + static_cast<std::size_t>(i) * W;
          const S* xrow = xc + static_cast<std::size_t>(ii) * W;
          S* orow = oc + static_cast<std::size_t>(i) * W;
          const int j0 = std::max(0, -d2), j1 = std::min(W, W - d2);
          for (int j = j0; j < j1; ++j) orow[j] += krow[j] * xrow[j + d2];
        }
      }
    }

  return make_op(OpKind::involution, std::move(out), {x, expanded},
                 [x, expanded, K, G, dilation, B, C, H, W, cpg, half](Node<S>& self) {
    const S* dy = self.grad.ptr();
    const std::size_t cs = static_cast<std::size_t>(H) * W;
    if (x.requires_grad()) {
      S* dx = x.grad().ptr();
      const S* pe = expanded.value().ptr();
      for (int bb = 0; bb < B; ++bb)
        for (int c = 0; c < C; ++c) {
          const int gi = c / cpg;
          S* dxc = dx + (static_cast<std::size_t>(bb) * C + c) * cs;
          const S* dyc = dy + (static_cast<std::size_t>(bb) * C + c) * cs;
          for (int k = 0; k < K * K; ++k) {
            const int d1 = (k / K - half) * dilation;
            const int d2 = (k % K - half) * dilation;
            const S* kc = pe + ((static_cast<std::size_t>(bb) * G + gi) * K * K + k) * cs;
            for (int i = 0; i < H; ++i) {
              const int ii = i + d1;
              if (ii < 0 || ii >= H) continue;
              const S* krow = kc + static_cast<std::size_t>(i) * W;
              const S* dyrow = dyc + static_cast<std::size_t>(i) * W;
              S* dxrow = dxc + static_cast<std::size_t>(ii) * W;
              const int j0 = std::max(0, -d2), j1 = std::min(W, W - d2);
              for (int j = j0; j < j1; ++j) dxrow[j + d2] += krow[j] * dyrow[j];
            }
          }
        }
    }
    if (expanded.requires_grad()) {
      S* de = expanded.grad().ptr();
      const S* px = x.value().ptr();
      for (int bb = 0; bb < B; ++bb)
        for (int c = 0; c < C; ++c) {
          const int gi = c / cpg;
          const S* xc = px + (static_cast<std::size_t>(bb) * C + c) * cs;
          const S* dyc = dy + (static_cast<std::size_t>(bb) * C + c) * cs;
          for (int k = 0; k < K * K; ++k) {
            const int d1 = (k / K - half) * dilation;
            const int d2 = (k % K - half) * dilation;
            S* dkc = de + ((static_cast<std::size_t>(bb) * G + gi) * K * K + k) * cs;
            for (int i = 0; i < H; ++i) {
              const int ii = i + d1;
              if (ii < 0 || ii >= H) continue;
              S* dkrow = dkc + static_cast<std::size_t>(i) * W;
              const S* xrow = xc + static_cast<std::size_t>(ii) * W;
              const S* dyrow = dyc + static_cast<std::size_t>(i) * W;
              const int j0 = std::max(0, -d2), j1 = std::min(W, W - d2);
              for (int j = j0; j < j1; ++j) dkrow[j] += xrow[j + d2] * dyrow[j];
            }
          }
        }
    }
  });
}

// Brute-force oracle for apply_involution: direct nested loops, no tricks.
template <typename S>
Tensor<S> involution_naive(const Tensor<S>& x, const Tensor<S>& kexp, int K, int G, int dilation) {
  const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int cpg = C / G, half = K / 2;
  Tensor<S> y(x.shape);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const int g = c / cpg;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          S acc = S(0);
          for (int k = 0; k < K * K; ++k) {
            const int ii = i + (k / K - half) * dilation;
            const int jj = j + (k % K - half) * dilation;
            if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
            acc += kexp.at5(b, g, k, i, j) * x.at4(b, c, ii, jj);
          }
          y.at4(b, c, i, j) = acc;
        }
    }
  return y;
}

// phi_K: sigmoid(w_span * relu(BN(w_red * x_g))), both convs 1x1 and biasless.
template <typename S>
struct KernelGenerator {
  int K = 0, G = 0;
  Conv2dLayer<S> w_red;
  BatchNorm2dLayer<S> bn;
  Conv2dLayer<S> w_span;

  KernelGenerator() = default;
  KernelGenerator(ParameterStore<S>& store, const std::string& prefix, const InvolutionConfig& cfg,
                  int k, Rng& rng)
      : K(k), G(cfg.channel_groups) {
    const int cred = cfg.reduced_channels();
    w_red = Conv2dLayer<S>(store, prefix + ".w_red", cfg.channels, cred, 1, false, 1, 0, rng);
    bn = BatchNorm2dLayer<S>(store, prefix + ".bn", cred);
    w_span = Conv2dLayer<S>(store, prefix + ".w_span", cred, G * k * k, 1, false, 1, 0, rng);
  }

  // x_g: (B, C, h, w) -> (B, G, K*K, h, w)
  Var<S> forward(const Var<S>& x_g, bool training) const {
    Var<S> z = ops::relu(bn.forward(w_red.forward(x_g), training));
    Var<S> flat = ops::sigmoid(w_span.forward(z));
    const Shape& s = flat.value().shape;
    return ops::reshape(flat, Shape{s[0], G, K * K, s[2], s[3]});
  }
};

template <typename S>
KernelStack<S> generate_kernels(const Var<S>& x_g, const std::vector<KernelGenerator<S>>& gens,
                                bool training) {
  KernelStack<S> ks;
  for (const auto& g : gens) {
    ks.sizes.push_back(g.K);
    ks.kernels.push_back(g.forward(x_g, training));
  }
  return ks;
}

// y_inv = mean over KS of the per-scale involutions; kernels are returned for
// the downstream graph construction.
template <typename S>
std::pair<Var<S>, KernelStack<S>> multiscale_involution(const Var<S>& x,
                                                        const std::vector<KernelGenerator<S>>& gens,
                                                        const InvolutionConfig& cfg,
                                                        bool training) {
  cfg.validate();
  if (gens.empty()) throw ShapeError("multiscale_involution: empty kernel size set");
  Var<S> x_g = group_pool(x, cfg.group_size);
  KernelStack<S> ks = generate_kernels(x_g, gens, training);
  Var<S> acc;
  for (std::size_t i = 0; i < ks.kernels.size(); ++i) {
    Var<S> expanded = expand_kernels(ks.kernels[i], cfg.group_size);
    Var<S> y = apply_involution(x, expanded, ks.sizes[i], cfg.channel_groups, cfg.dilation);
    acc = acc.defined() ? ops::add(acc, y) : y;
  }
  if (ks.kernels.size() > 1)
    acc = ops::scalar_scale(acc, S(1) / S(static_cast<double>(ks.kernels.size())));
  return {acc, std::move(ks)};
}

}  // namespace gmsgi
