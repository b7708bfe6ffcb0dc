#pragma once

#include <algorithm>
#include <cmath>

#include "fbdiff/tensor.hpp"

namespace fbdiff {

// All kernels here parallelize over independent output planes; every element
// is produced by one fixed-order reduction, so results do not depend on the
// thread count.

// ---------------------------------------------------------------------------
// 2D spatial convolution, applied independently per frame
// ---------------------------------------------------------------------------

namespace detail {

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

/// Dot product with four independent accumulator chains. The summation order
/// is fixed by the code, so results are reproducible; the split only breaks
/// the latency chain that blocks scalar FP throughput.
template <typename T>
T dot_strided(const T* a, const T* b, int64_t n, int64_t b_stride) {
  T a0 = T(0), a1 = T(0), a2 = T(0), a3 = T(0);
  int64_t i = 0;
  if (b_stride == 1) {
    for (; i + 4 <= n; i += 4) {
      a0 += a[i] * b[i];
      a1 += a[i + 1] * b[i + 1];
      a2 += a[i + 2] * b[i + 2];
      a3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) a0 += a[i] * b[i];
  } else {
    for (; i + 4 <= n; i += 4) {
      a0 += a[i] * b[i * b_stride];
      a1 += a[i + 1] * b[(i + 1) * b_stride];
      a2 += a[i + 2] * b[(i + 2) * b_stride];
      a3 += a[i + 3] * b[(i + 3) * b_stride];
    }
    for (; i < n; ++i) a0 += a[i] * b[i * b_stride];
  }
  return (a0 + a1) + (a2 + a3);
}

/// Gathers one frame's receptive fields into rows of length Cin*kh*kw,
/// zero-filled outside the image.
template <typename T>
void im2col_frame(const T* frame, int64_t Cin, int64_t H, int64_t W, int64_t kh, int64_t kw,
                  int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* cols) {
  const int64_t row_len = Cin * kh * kw;
  for (int64_t yo = 0; yo < Ho; ++yo) {
    for (int64_t xo = 0; xo < Wo; ++xo) {
      T* crow = cols + (yo * Wo + xo) * row_len;
      int64_t idx = 0;
      for (int64_t ci = 0; ci < Cin; ++ci) {
        const T* ip = frame + ci * H * W;
        for (int64_t ky = 0; ky < kh; ++ky) {
          const int64_t iy = yo * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            for (int64_t kx = 0; kx < kw; ++kx) crow[idx++] = T(0);
            continue;
          }
          const T* irow = ip + iy * W;
          for (int64_t kx = 0; kx < kw; ++kx) {
            const int64_t ix = xo * stride - pad + kx;
            crow[idx++] = (ix < 0 || ix >= W) ? T(0) : irow[ix];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> conv_spatial_gemm(const Tensor<T>& input, const Tensor<T>& kernel,
                            const Tensor<T>& bias, int stride, int pad, int64_t Ho, int64_t Wo) {
  const int64_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t Cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  const int64_t row_len = Cin * kh * kw;
  const int64_t positions = Ho * Wo;

  Tensor<T> out({N, Cout, Ho, Wo});
  {
    const T* pin = input.ptr();
    const T* pk = kernel.ptr();  // row co is the contiguous [Cin*kh*kw] filter
    const T* pb = bias.defined() ? bias.ptr() : nullptr;
    T* po = out.ptr();
    parallel_for(N, [&](int64_t n) {
      std::vector<T> cols(positions * row_len);
      im2col_frame(pin + n * Cin * H * W, Cin, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
      int64_t co = 0;
      for (; co + 4 <= Cout; co += 4) {
        const T* k0 = pk + co * row_len;
        const T* k1 = k0 + row_len;
        const T* k2 = k1 + row_len;
        const T* k3 = k2 + row_len;
        for (int64_t p = 0; p < positions; ++p) {
          const T* crow = cols.data() + p * row_len;
          T a0 = T(0), a1 = T(0), a2 = T(0), a3 = T(0);
          for (int64_t i = 0; i < row_len; ++i) {
            const T cv = crow[i];
            a0 += k0[i] * cv;
            a1 += k1[i] * cv;
            a2 += k2[i] * cv;
            a3 += k3[i] * cv;
          }
          po[(n * Cout + co) * positions + p] = (pb ? pb[co] : T(0)) + a0;
          po[(n * Cout + co + 1) * positions + p] = (pb ? pb[co + 1] : T(0)) + a1;
          po[(n * Cout + co + 2) * positions + p] = (pb ? pb[co + 2] : T(0)) + a2;
          po[(n * Cout + co + 3) * positions + p] = (pb ? pb[co + 3] : T(0)) + a3;
        }
      }
      for (; co < Cout; ++co) {
        const T* krow = pk + co * row_len;
        T* orow = po + (n * Cout + co) * positions;
        const T bv = pb ? pb[co] : T(0);
        for (int64_t p = 0; p < positions; ++p)
          orow[p] = bv + dot_strided(krow, cols.data() + p * row_len, row_len, int64_t(1));
      }
    });
  }
  check_finite(out, "conv_spatial");

  Tape<T>* tp = merge_tapes(input, kernel);
  if (!tp && bias.tracked()) tp = bias.tape();
  if (tp) {
    const int xi = input.node(), ki = kernel.node(), bi = bias.defined() ? bias.node() : -1;
    Tensor<T> sx = input.detached(), sk = kernel.detached();
    out.attach(tp, tp->record(out.numel(), [=](Tape<T>& t, const std::vector<T>& g) {
      const T* pg = g.data();
      const T* pk = sk.ptr();
      const T* pin = sx.ptr();
      if (ki >= 0 || bi >= 0) {
        auto* gkbuf = ki >= 0 ? &t.grad_buf(ki) : nullptr;
        auto* gbbuf = bi >= 0 ? &t.grad_buf(bi) : nullptr;
        // frames accumulate in index order regardless of threads: each co row
        // is owned by one task
        T* pgk = gkbuf ? gkbuf->data() : nullptr;
        T* pgb = gbbuf ? gbbuf->data() : nullptr;
        std::vector<T> cols(positions * row_len);
        for (int64_t n = 0; n < N; ++n) {
          im2col_frame(pin + n * Cin * H * W, Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                       cols.data());
          parallel_for(Cout, [&](int64_t co) {
            const T* grow = pg + (n * Cout + co) * positions;
            if (pgk) {
              T* krow = pgk + co * row_len;
              for (int64_t p = 0; p < positions; ++p) {
                const T gv = grow[p];
                if (gv == T(0)) continue;
                const T* crow = cols.data() + p * row_len;
                for (int64_t i = 0; i < row_len; ++i) krow[i] += gv * crow[i];
              }
            }
            if (pgb) {
              T acc = T(0);
              for (int64_t p = 0; p < positions; ++p) acc += grow[p];
              pgb[co] += acc;
            }
          });
        }
      }
      if (xi >= 0) {
        auto& gx = t.grad_buf(xi);
        T* pgx = gx.data();
        parallel_for(N, [&](int64_t n) {
          std::vector<T> tmp(row_len);
          T* gframe = pgx + n * Cin * H * W;
          for (int64_t p = 0; p < positions; ++p) {
            std::fill(tmp.begin(), tmp.end(), T(0));
            const int64_t yo = p / Wo, xo = p % Wo;
            for (int64_t co = 0; co < Cout; ++co) {
              const T gv = pg[(n * Cout + co) * positions + p];
              if (gv == T(0)) continue;
              const T* krow = pk + co * row_len;
              for (int64_t i = 0; i < row_len; ++i) tmp[i] += gv * krow[i];
            }
            // scatter the receptive-field gradient back into the frame
            int64_t idx = 0;
            for (int64_t ci = 0; ci < Cin; ++ci) {
              T* ip = gframe + ci * H * W;
              for (int64_t ky = 0; ky < kh; ++ky) {
                const int64_t iy = yo * stride - pad + ky;
                if (iy < 0 || iy >= H) {
                  idx += kw;
                  continue;
                }
                T* irow = ip + iy * W;
                for (int64_t kx = 0; kx < kw; ++kx) {
                  const int64_t ix = xo * stride - pad + kx;
                  if (ix >= 0 && ix < W) irow[ix] += tmp[idx];
                  ++idx;
                }
              }
            }
          }
        });
      }
    }));
  }
  return out;
}

}  // namespace detail

/// input [N,Cin,H,W], kernel [Cout,Cin,kh,kw], optional bias [Cout].
/// stride in {1,2}, zero padding `pad` on both spatial borders.
template <typename T>
Tensor<T> conv_spatial(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                       int stride, int pad) {
  require(input.ndim() == 4, ErrorCode::ShapeMismatch,
          "conv_spatial: input must be [N,C,H,W], got " + shape_str(input.shape()));
  require(kernel.ndim() == 4, ErrorCode::ShapeMismatch,
          "conv_spatial: kernel must be [Cout,Cin,kh,kw], got " + shape_str(kernel.shape()));
  const int64_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t Cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  require(kernel.dim(1) == Cin, ErrorCode::ShapeMismatch,
          "conv_spatial: kernel input-channel dim " + std::to_string(kernel.dim(1)) +
              " != input channel dim " + std::to_string(Cin));
  require(kh >= 1 && kw >= 1, ErrorCode::InvalidArgument,
          "conv_spatial: kernel extents must be positive");
  require(stride == 1 || stride == 2, ErrorCode::InvalidArgument,
          "conv_spatial: stride must be 1 or 2");
  require(pad >= 0, ErrorCode::InvalidArgument, "conv_spatial: pad must be >= 0");
  if (bias.defined())
    require(bias.numel() == Cout, ErrorCode::ShapeMismatch,
            "conv_spatial: bias dim " + std::to_string(bias.numel()) + " != Cout");
  const int64_t Ho = detail::conv_out_extent(H, kh, stride, pad);
  const int64_t Wo = detail::conv_out_extent(W, kw, stride, pad);
  require(Ho >= 1 && Wo >= 1, ErrorCode::ShapeMismatch, "conv_spatial: output would be empty");

  // Narrow outputs (latent-grid convs) go through an im2col layout whose
  // long contiguous dot products vectorize well; wide maps use shifted-row
  // saxpy loops directly. The choice depends only on shapes, so results are
  // reproducible per shape.
  if (Wo <= 16) return detail::conv_spatial_gemm(input, kernel, bias, stride, pad, Ho, Wo);

  Tensor<T> out({N, Cout, Ho, Wo});
  {
    const T* pin = input.ptr();
    const T* pk = kernel.ptr();
    const T* pb = bias.defined() ? bias.ptr() : nullptr;
    T* po = out.ptr();
    parallel_for(N * Cout, [&](int64_t plane) {
      const int64_t n = plane / Cout, co = plane % Cout;
      T* op = po + (n * Cout + co) * Ho * Wo;
      const T bv = pb ? pb[co] : T(0);
      for (int64_t i = 0; i < Ho * Wo; ++i) op[i] = bv;
      for (int64_t ci = 0; ci < Cin; ++ci) {
        const T* ip = pin + (n * Cin + ci) * H * W;
        const T* kp = pk + (co * Cin + ci) * kh * kw;
        for (int64_t ky = 0; ky < kh; ++ky) {
          for (int64_t kx = 0; kx < kw; ++kx) {
            const T wv = kp[ky * kw + kx];
            if (wv == T(0)) continue;
            for (int64_t yo = 0; yo < Ho; ++yo) {
              const int64_t iy = yo * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              const T* irow = ip + iy * W;
              T* orow = op + yo * Wo;
              // valid xo range so that ix = xo*stride - pad + kx lies in [0, W)
              int64_t lo = 0, hi = Wo - 1;
              if (stride == 1) {
                lo = std::max<int64_t>(0, pad - kx);
                hi = std::min<int64_t>(Wo - 1, W - 1 + pad - kx);
              } else {
                lo = std::max<int64_t>(0, (pad - kx + 1) / 2);
                while (lo * stride - pad + kx < 0) ++lo;
                hi = std::min<int64_t>(Wo - 1, (W - 1 + pad - kx) / 2);
              }
              const int64_t ix0 = lo * stride - pad + kx;
              const T* irp = irow + ix0;
              if (stride == 1) {
                for (int64_t xo = lo; xo <= hi; ++xo) orow[xo] += wv * irp[xo - lo];
              } else {
                for (int64_t xo = lo; xo <= hi; ++xo) orow[xo] += wv * irp[(xo - lo) * 2];
              }
            }
          }
        }
      }
    });
  }
  detail::check_finite(out, "conv_spatial");

  Tape<T>* tp = detail::merge_tapes(input, kernel);
  if (!tp && bias.tracked()) tp = bias.tape();
  if (tp) {
    const int xi = input.node(), ki = kernel.node(), bi = bias.defined() ? bias.node() : -1;
    Tensor<T> sx = input.detached(), sk = kernel.detached();
    out.attach(tp, tp->record(out.numel(), [=](Tape<T>& t, const std::vector<T>& g) {
      const T* pg = g.data();
      const T* pk = sk.ptr();
      const T* pin = sx.ptr();
      // valid output-column window for a given kernel column kx:
      // ix = xo*stride - pad + kx must land in [0, W)
      const auto xo_window = [&](int64_t kx, int64_t& lo, int64_t& hi) {
        lo = 0;
        while (lo * stride - pad + kx < 0) ++lo;
        hi = std::min<int64_t>(Wo - 1, (W - 1 + pad - kx) / stride);
      };
      if (xi >= 0) {
        auto& gx = t.grad_buf(xi);
        T* pgx = gx.data();
        // each (n, ci) plane is owned by one task, so in-plane accumulation
        // order is fixed regardless of thread count
        parallel_for(N * Cin, [&](int64_t plane) {
          const int64_t n = plane / Cin, ci = plane % Cin;
          T* gp = pgx + (n * Cin + ci) * H * W;
          for (int64_t co = 0; co < Cout; ++co) {
            const T* gop = pg + (n * Cout + co) * Ho * Wo;
            const T* kp = pk + (co * Cin + ci) * kh * kw;
            for (int64_t ky = 0; ky < kh; ++ky) {
              for (int64_t kx = 0; kx < kw; ++kx) {
                const T wv = kp[ky * kw + kx];
                if (wv == T(0)) continue;
                int64_t lo, hi;
                xo_window(kx, lo, hi);
                for (int64_t yo = 0; yo < Ho; ++yo) {
                  const int64_t iy = yo * stride - pad + ky;
                  if (iy < 0 || iy >= H) continue;
                  T* grow = gp + iy * W + (lo * stride - pad + kx);
                  const T* gorow = gop + yo * Wo;
                  if (stride == 1) {
                    for (int64_t xo = lo; xo <= hi; ++xo) grow[xo - lo] += wv * gorow[xo];
                  } else {
                    for (int64_t xo = lo; xo <= hi; ++xo) grow[(xo - lo) * 2] += wv * gorow[xo];
                  }
                }
              }
            }
          }
        });
      }
      if (ki >= 0) {
        auto& gk = t.grad_buf(ki);
        T* pgk = gk.data();
        parallel_for(Cout * Cin, [&](int64_t pair) {
          const int64_t co = pair / Cin, ci = pair % Cin;
          T* kp = pgk + (co * Cin + ci) * kh * kw;
          for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
              int64_t lo, hi;
              xo_window(kx, lo, hi);
              T acc = T(0);
              for (int64_t n = 0; n < N; ++n) {
                const T* gop = pg + (n * Cout + co) * Ho * Wo;
                const T* ip = pin + (n * Cin + ci) * H * W;
                for (int64_t yo = 0; yo < Ho; ++yo) {
                  const int64_t iy = yo * stride - pad + ky;
                  if (iy < 0 || iy >= H) continue;
                  const T* irow = ip + iy * W + (lo * stride - pad + kx);
                  acc += detail::dot_strided(gop + yo * Wo + lo, irow, hi - lo + 1, stride);
                }
              }
              kp[ky * kw + kx] += acc;
            }
          }
        });
      }
      if (bi >= 0) {
        auto& gb = t.grad_buf(bi);
        for (int64_t co = 0; co < Cout; ++co) {
          T acc = T(0);
          for (int64_t n = 0; n < N; ++n) {
            const T* gop = pg + (n * Cout + co) * Ho * Wo;
            for (int64_t i = 0; i < Ho * Wo; ++i) acc += gop[i];
          }
          gb[co] += acc;
        }
      }
    }));
  }
  return out;
}

template <typename T>
Tensor<T> conv_spatial(const Tensor<T>& input, const Tensor<T>& kernel, int stride, int pad) {
  return conv_spatial(input, kernel, Tensor<T>(), stride, pad);
}

// ---------------------------------------------------------------------------
// 1D temporal convolution along the frame axis
// ---------------------------------------------------------------------------

/// input [N,Cin,H,W], kernel [Cout,Cin,kt], optional bias [Cout]. Zero padding
/// (kt-1)/2 at the temporal boundaries keeps the frame count.
template <typename T>
Tensor<T> conv_temporal(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias) {
  require(input.ndim() == 4, ErrorCode::ShapeMismatch,
          "conv_temporal: input must be [N,C,H,W], got " + shape_str(input.shape()));
  require(kernel.ndim() == 3, ErrorCode::ShapeMismatch,
          "conv_temporal: kernel must be [Cout,Cin,kt], got " + shape_str(kernel.shape()));
  const int64_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t Cout = kernel.dim(0), kt = kernel.dim(2);
  require(N >= 1, ErrorCode::InvalidArgument, "conv_temporal: empty frame axis");
  require(kernel.dim(1) == Cin, ErrorCode::ShapeMismatch,
          "conv_temporal: kernel input-channel dim " + std::to_string(kernel.dim(1)) +
              " != input channel dim " + std::to_string(Cin));
  require(kt % 2 == 1, ErrorCode::InvalidArgument, "conv_temporal: kt must be odd");
  if (bias.defined())
    require(bias.numel() == Cout, ErrorCode::ShapeMismatch, "conv_temporal: bad bias dim");
  const int64_t pad = (kt - 1) / 2;
  const int64_t hw = H * W;

  Tensor<T> out({N, Cout, H, W});
  {
    const T* pin = input.ptr();
    const T* pk = kernel.ptr();
    const T* pb = bias.defined() ? bias.ptr() : nullptr;
    T* po = out.ptr();
    parallel_for(N * Cout, [&](int64_t plane) {
      const int64_t n = plane / Cout, co = plane % Cout;
      T* op = po + (n * Cout + co) * hw;
      const T bv = pb ? pb[co] : T(0);
      for (int64_t i = 0; i < hw; ++i) op[i] = bv;
      for (int64_t ci = 0; ci < Cin; ++ci) {
        for (int64_t dt = 0; dt < kt; ++dt) {
          const int64_t m = n - pad + dt;
          if (m < 0 || m >= N) continue;
          const T wv = pk[(co * Cin + ci) * kt + dt];
          const T* ip = pin + (m * Cin + ci) * hw;
          for (int64_t i = 0; i < hw; ++i) op[i] += wv * ip[i];
        }
      }
    });
  }
  detail::check_finite(out, "conv_temporal");

  Tape<T>* tp = detail::merge_tapes(input, kernel);
  if (!tp && bias.tracked()) tp = bias.tape();
  if (tp) {
    const int xi = input.node(), ki = kernel.node(), bi = bias.defined() ? bias.node() : -1;
    Tensor<T> sx = input.detached(), sk = kernel.detached();
    out.attach(tp, tp->record(out.numel(), [=](Tape<T>& t, const std::vector<T>& g) {
      const T* pg = g.data();
      const T* pk = sk.ptr();
      const T* pin = sx.ptr();
      if (xi >= 0) {
        auto& gx = t.grad_buf(xi);
        T* pgx = gx.data();
        parallel_for(N * Cin, [&](int64_t plane) {
          const int64_t m = plane / Cin, ci = plane % Cin;
          T* gp = pgx + (m * Cin + ci) * hw;
          for (int64_t co = 0; co < Cout; ++co) {
            for (int64_t dt = 0; dt < kt; ++dt) {
              const int64_t n = m + pad - dt;
              if (n < 0 || n >= N) continue;
              const T wv = pk[(co * Cin + ci) * kt + dt];
              const T* gop = pg + (n * Cout + co) * hw;
              for (int64_t i = 0; i < hw; ++i) gp[i] += wv * gop[i];
            }
          }
        });
      }
      if (ki >= 0) {
        auto& gk = t.grad_buf(ki);
        T* pgk = gk.data();
        parallel_for(Cout * Cin, [&](int64_t pair) {
          const int64_t co = pair / Cin, ci = pair % Cin;
          for (int64_t dt = 0; dt < kt; ++dt) {
            T acc = T(0);
            for (int64_t n = 0; n < N; ++n) {
              const int64_t m = n - pad + dt;
              if (m < 0 || m >= N) continue;
              acc += detail::dot_strided(pg + (n * Cout + co) * hw, pin + (m * Cin + ci) * hw, hw,
                                         int64_t(1));
            }
            pgk[(co * Cin + ci) * kt + dt] += acc;
          }
        });
      }
      if (bi >= 0) {
        auto& gb = t.grad_buf(bi);
        for (int64_t co = 0; co < Cout; ++co) {
          T acc = T(0);
          for (int64_t n = 0; n < N; ++n) {
            const T* gop = pg + (n * Cout + co) * hw;
            for (int64_t i = 0; i < hw; ++i) acc += gop[i];
          }
          gb[co] += acc;
        }
      }
    }));
  }
  return out;
}

template <typename T>
Tensor<T> conv_temporal(const Tensor<T>& input, const Tensor<T>& kernel) {
  return conv_temporal(input, kernel, Tensor<T>());
}

// ---------------------------------------------------------------------------
// Group normalization (per frame, per channel group)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> group_norm(const Tensor<T>& input, int64_t groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  require(input.ndim() == 4, ErrorCode::ShapeMismatch, "group_norm: input must be [N,C,H,W]");
  const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  require(groups >= 1 && C % groups == 0, ErrorCode::InvalidArgument,
          "group_norm: channel count " + std::to_string(C) + " not divisible by groups " +
              std::to_string(groups));
  require(gamma.numel() == C && beta.numel() == C, ErrorCode::ShapeMismatch,
          "group_norm: gamma/beta must have C entries");
  require(eps > T(0), ErrorCode::InvalidArgument, "group_norm: eps must be positive");
  const int64_t cg = C / groups;      // channels per group
  const int64_t gsz = cg * H * W;     // elements per (frame, group)

  Tensor<T> out(input.shape());
  // saved statistics for the pullback
  auto mean_sav = std::make_shared<std::vector<T>>(N * groups);
  auto inv_sav = std::make_shared<std::vector<T>>(N * groups);
  {
    const T* pin = input.ptr();
    const T* pgm = gamma.ptr();
    const T* pbt = beta.ptr();
    T* po = out.ptr();
    T* pm = mean_sav->data();
    T* pv = inv_sav->data();
    parallel_for(N * groups, [&](int64_t idx) {
      const int64_t n = idx / groups, g = idx % groups;
      const T* ip = pin + (n * C + g * cg) * H * W;
      T m = T(0);
      for (int64_t i = 0; i < gsz; ++i) m += ip[i];
      m /= static_cast<T>(gsz);
      T v = T(0);
      for (int64_t i = 0; i < gsz; ++i) {
        const T d = ip[i] - m;
        v += d * d;
      }
      v /= static_cast<T>(gsz);
      const T inv = T(1) / std::sqrt(v + eps);
      pm[idx] = m;
      pv[idx] = inv;
      T* op = po + (n * C + g * cg) * H * W;
      for (int64_t c = 0; c < cg; ++c) {
        const T gm = pgm[g * cg + c];
        const T bt = pbt[g * cg + c];
        const T* irow = ip + c * H * W;
        T* orow = op + c * H * W;
        for (int64_t i = 0; i < H * W; ++i) orow[i] = gm * (irow[i] - m) * inv + bt;
      }
    });
  }
  detail::check_finite(out, "group_norm");

  Tape<T>* tp = detail::merge_tapes(input, gamma);
  if (!tp && beta.tracked()) tp = beta.tape();
  if (tp) {
    const int xi = input.node(), gi = gamma.node(), bi = beta.node();
    Tensor<T> sx = input.detached(), sg = gamma.detached();
    out.attach(tp, tp->record(out.numel(), [=](Tape<T>& t, const std::vector<T>& g) {
      const T* pg = g.data();
      const T* pin = sx.ptr();
      const T* pgm = sg.ptr();
      const T* pm = mean_sav->data();
      const T* pv = inv_sav->data();
      if (xi >= 0) {
        auto& gx = t.grad_buf(xi);
        T* pgx = gx.data();
        parallel_for(N * groups, [&](int64_t idx) {
          const int64_t n = idx / groups, grp = idx % groups;
          const T m = pm[idx], inv = pv[idx];
          const T* ip = pin + (n * C + grp * cg) * H * W;
          const T* gop = pg + (n * C + grp * cg) * H * W;
          // sums of dxhat and dxhat*xhat over the group
          T s1 = T(0), s2 = T(0);
          for (int64_t c = 0; c < cg; ++c) {
            const T gm = pgm[grp * cg + c];
            const T* irow = ip + c * H * W;
            const T* grow = gop + c * H * W;
            for (int64_t i = 0; i < H * W; ++i) {
              const T dxh = grow[i] * gm;
              s1 += dxh;
              s2 += dxh * (irow[i] - m) * inv;
            }
          }
          s1 /= static_cast<T>(gsz);
          s2 /= static_cast<T>(gsz);
          T* gxp = pgx + (n * C + grp * cg) * H * W;
          for (int64_t c = 0; c < cg; ++c) {
            const T gm = pgm[grp * cg + c];
            const T* irow = ip + c * H * W;
            const T* grow = gop + c * H * W;
            T* gxr = gxp + c * H * W;
            for (int64_t i = 0; i < H * W; ++i) {
              const T xh = (irow[i] - m) * inv;
              gxr[i] += inv * (grow[i] * gm - s1 - xh * s2);
            }
          }
        });
      }
      if (gi >= 0 || bi >= 0) {
        T* pgg = gi >= 0 ? t.grad_buf(gi).data() : nullptr;
        T* pgb = bi >= 0 ? t.grad_buf(bi).data() : nullptr;
        parallel_for(C, [&](int64_t c) {
          const int64_t grp = c / cg;
          T accg = T(0), accb = T(0);
          for (int64_t n = 0; n < N; ++n) {
            const int64_t idx = n * groups + grp;
            const T m = pm[idx], inv = pv[idx];
            const T* irow = pin + (n * C + c) * H * W;
            const T* grow = pg + (n * C + c) * H * W;
            for (int64_t i = 0; i < H * W; ++i) {
              accg += grow[i] * (irow[i] - m) * inv;
              accb += grow[i];
            }
          }
          if (pgg) pgg[c] += accg;
          if (pgb) pgb[c] += accb;
        });
      }
    }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fully connected map over the last axis of a [M,K] tensor
// ---------------------------------------------------------------------------

/// x [M,K], weight [O,K], optional bias [O] -> [M,O].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require(x.ndim() == 2 && weight.ndim() == 2, ErrorCode::ShapeMismatch,
          "linear: expected [M,K] x [O,K]");
  const int64_t M = x.dim(0), K = x.dim(1), O = weight.dim(0);
  require(weight.dim(1) == K, ErrorCode::ShapeMismatch,
          "linear: weight K dim " + std::to_string(weight.dim(1)) + " != input K " +
              std::to_string(K));
  if (bias.defined())
    require(bias.numel() == O, ErrorCode::ShapeMismatch, "linear: bad bias dim");

  Tensor<T> out({M, O});
  {
    const T* px = x.ptr();
    const T* pw = weight.ptr();
    const T* pb = bias.defined() ? bias.ptr() : nullptr;
    T* po = out.ptr();
    for (int64_t m = 0; m < M; ++m) {
      for (int64_t o = 0; o < O; ++o) {
        T acc = pb ? pb[o] : T(0);
        const T* xr = px + m * K;
        const T* wr = pw + o * K;
        for (int64_t k = 0; k < K; ++k) acc += xr[k] * wr[k];
        po[m * O + o] = acc;
      }
    }
  }
  Tape<T>* tp = detail::merge_tapes(x, weight);
  if (!tp && bias.tracked()) tp = bias.tape();
  if (tp) {
    const int xi = x.node(), wi = weight.node(), bi = bias.defined() ? bias.node() : -1;
    Tensor<T> sx = x.detached(), sw = weight.detached();
    out.attach(tp, tp->record(out.numel(), [=](Tape<T>& t, const std::vector<T>& g) {
      const T* pg = g.data();
      if (xi >= 0) {
        auto& gx = t.grad_buf(xi);
        const T* pw = sw.ptr();
        for (int64_t m = 0; m < M; ++m)
          for (int64_t k = 0; k < K; ++k) {
            T acc = T(0);
            for (int64_t o = 0; o < O; ++o) acc += pg[m * O + o] * pw[o * K + k];
            gx[m * K + k] += acc;
          }
      }
      if (wi >= 0) {
        auto& gw = t.grad_buf(wi);
        const T* px = sx.ptr();
        for (int64_t o = 0; o < O; ++o)
          for (int64_t k = 0; k < K; ++k) {
            T acc = T(0);
            for (int64_t m = 0; m < M; ++m) acc += pg[m * O + o] * px[m * K + k];
            gw[o * K + k] += acc;
          }
      }
      if (bi >= 0) {
        auto& gb = t.grad_buf(bi);
        for (int64_t o = 0; o < O; ++o) {
          T acc = T(0);
          for (int64_t m = 0; m < M; ++m) acc += pg[m * O + o];
          gb[o] += acc;
        }
      }
    }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

/// Nearest-neighbor 2x spatial upsampling of [N,C,H,W].
template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x) {
  require(x.ndim() == 4, ErrorCode::ShapeMismatch, "upsample_nearest2: input must be [N,C,H,W]");
  const int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> out({x.dim(0), x.dim(1), 2 * H, 2 * W});
  {
    const T* pi = x.ptr();
    T* po = out.ptr();
    parallel_for(NC, [&](int64_t p) {
      const T* ip = pi + p * H * W;
      T* op = po + p * 4 * H * W;
      for (int64_t y = 0; y < 2 * H; ++y) {
        const T* irow = ip + (y / 2) * W;
        T* orow = op + y * 2 * W;
        for (int64_t xo = 0; xo < 2 * W; ++xo) orow[xo] = irow[xo / 2];
      }
    });
  }
  if (x.tracked()) {
    Tape<T>* tp = x.tape();
    const int xi = x.node();
    out.attach(tp, tp->record(out.numel(), [=](Tape<T>& t, const std::vector<T>& g) {
      auto& gx = t.grad_buf(xi);
      T* pgx = gx.data();
      const T* pg = g.data();
      parallel_for(NC, [&](int64_t p) {
        T* gp = pgx + p * H * W;
        const T* gop = pg + p * 4 * H * W;
        for (int64_t y = 0; y < H; ++y)
          for (int64_t xx = 0; xx < W; ++xx) {
            const int64_t r0 = (2 * y) * 2 * W, r1 = (2 * y + 1) * 2 * W;
            gp[y * W + xx] += gop[r0 + 2 * xx] + gop[r0 + 2 * xx + 1] + gop[r1 + 2 * xx] +
                              gop[r1 + 2 * xx + 1];
          }
      });
    }));
  }
  return out;
}

/// Concatenates two [N,*,H,W] tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.ndim() == 4 && b.ndim() == 4, ErrorCode::ShapeMismatch, "concat_channels: rank 4 only");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          ErrorCode::ShapeMismatch,
          "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<T> out({N, Ca + Cb, a.dim(2), a.dim(3)});
  {
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    for (int64_t n = 0; n < N; ++n) {
      std::memcpy(po + n * (Ca + Cb) * hw, pa + n * Ca * hw, sizeof(T) * Ca * hw);
      std::memcpy(po + (n * (Ca + Cb) + Ca) * hw, pb + n * Cb * hw, sizeof(T) * Cb * hw);
    }
  }
  if (Tape<T>* tp = detail::merge_tapes(a, b)) {
    const int ai = a.node(), bi = b.node();
    out.attach(tp, tp->record(out.numel(), [=](Tape<T>& t, const std::vector<T>& g) {
      if (ai >= 0) {
        auto& ga = t.grad_buf(ai);
        for (int64_t n = 0; n < N; ++n)
          for (int64_t i = 0; i < Ca * hw; ++i) ga[n * Ca * hw + i] += g[n * (Ca + Cb) * hw + i];
      }
      if (bi >= 0) {
        auto& gb = t.grad_buf(bi);
        for (int64_t n = 0; n < N; ++n)
          for (int64_t i = 0; i < Cb * hw; ++i)
            gb[n * Cb * hw + i] += g[(n * (Ca + Cb) + Ca) * hw + i];
      }
    }));
  }
  return out;
}

/// Per-channel scale-and-shift: out = x * (1 + sv[0,c]) + sv[0,C+c].
/// sv is a [1,2C] row, typically a timestep-embedding head output.
template <typename T>
Tensor<T> film(const Tensor<T>& x, const Tensor<T>& sv) {
  require(x.ndim() == 4, ErrorCode::ShapeMismatch, "film: x must be [N,C,H,W]");
  const int64_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(sv.ndim() == 2 && sv.dim(0) == 1 && sv.dim(1) == 2 * C, ErrorCode::ShapeMismatch,
          "film: modulation must be [1,2C]");
  Tensor<T> out(x.shape());
  {
    const T* px = x.ptr();
    const T* ps = sv.ptr();
    T* po = out.ptr();
    parallel_for(N * C, [&](int64_t p) {
      const int64_t c = p % C;
      const T s = T(1) + ps[c], b = ps[C + c];
      const T* ip = px + p * hw;
      T* op = po + p * hw;
      for (int64_t i = 0; i < hw; ++i) op[i] = ip[i] * s + b;
    });
  }
  if (Tape<T>* tp = detail::merge_tapes(x, sv)) {
    const int xi = x.node(), si = sv.node();
    Tensor<T> sx = x.detached(), ss = sv.detached();
    out.attach(tp, tp->record(out.numel(), [=](Tape<T>& t, const std::vector<T>& g) {
      const T* pg = g.data();
      if (xi >= 0) {
        auto& gx = t.grad_buf(xi);
        T* pgx = gx.data();
        const T* ps = ss.ptr();
        parallel_for(N * C, [&](int64_t p) {
          const T s = T(1) + ps[p % C];
          const T* grow = pg + p * hw;
          T* gxr = pgx + p * hw;
          for (int64_t i = 0; i < hw; ++i) gxr[i] += grow[i] * s;
        });
      }
      if (si >= 0) {
        auto& gs = t.grad_buf(si);
        const T* px = sx.ptr();
        for (int64_t c = 0; c < C; ++c) {
          T accs = T(0), accb = T(0);
          for (int64_t n = 0; n < N; ++n) {
            const T* grow = pg + (n * C + c) * hw;
            const T* irow = px + (n * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) {
              accs += grow[i] * irow[i];
              accb += grow[i];
            }
          }
          gs[c] += accs;
          gs[C + c] += accb;
        }
      }
    }));
  }
  return out;
}

/// Broadcasts a [N,C] table over an (H,W) grid -> [N,C,H,W].
template <typename T>
Tensor<T> broadcast_spatial(const Tensor<T>& v, int64_t H, int64_t W) {
  require(v.ndim() == 2, ErrorCode::ShapeMismatch, "broadcast_spatial: input must be [N,C]");
  const int64_t N = v.dim(0), C = v.dim(1);
  Tensor<T> out({N, C, H, W});
  {
    const T* pv = v.ptr();
    T* po = out.ptr();
    for (int64_t p = 0; p < N * C; ++p) {
      const T val = pv[p];
      T* op = po + p * H * W;
      for (int64_t i = 0; i < H * W; ++i) op[i] = val;
    }
  }
  if (v.tracked()) {
    Tape<T>* tp = v.tape();
    const int vi = v.node();
    out.attach(tp, tp->record(out.numel(), [=](Tape<T>& t, const std::vector<T>& g) {
      auto& gv = t.grad_buf(vi);
      for (int64_t p = 0; p < N * C; ++p) {
        T acc = T(0);
        const T* grow = g.data() + p * H * W;
        for (int64_t i = 0; i < H * W; ++i) acc += grow[i];
        gv[p] += acc;
      }
    }));
  }
  return out;
}

/// Elementwise complex modulus sqrt(re^2 + im^2). The derivative is guarded
/// at the origin, where the modulus is not differentiable.
template <typename T>
Tensor<T> complex_modulus(const Tensor<T>& re, const Tensor<T>& im) {
  require(re.shape() == im.shape(), ErrorCode::ShapeMismatch,
          "complex_modulus: real/imag shapes differ");
  Tensor<T> out(re.shape());
  {
    const T* pr = re.ptr();
    const T* pi = im.ptr();
    T* po = out.ptr();
    for (int64_t i = 0; i < out.numel(); ++i)
      po[i] = std::sqrt(pr[i] * pr[i] + pi[i] * pi[i]);
  }
  if (Tape<T>* tp = detail::merge_tapes(re, im)) {
    const int ri = re.node(), ii = im.node();
    Tensor<T> sr = re.detached(), si = im.detached(), so = out.detached();
    out.attach(tp, tp->record(out.numel(), [=](Tape<T>& t, const std::vector<T>& g) {
      const T* pr = sr.ptr();
      const T* pi = si.ptr();
      const T* po = so.ptr();
      const T tiny = static_cast<T>(1e-30);
      if (ri >= 0) {
        auto& gr = t.grad_buf(ri);
        for (size_t i = 0; i < g.size(); ++i) gr[i] += po[i] > tiny ? g[i] * pr[i] / po[i] : T(0);
      }
      if (ii >= 0) {
        auto& gi = t.grad_buf(ii);
        for (size_t i = 0; i < g.size(); ++i) gi[i] += po[i] > tiny ? g[i] * pi[i] / po[i] : T(0);
      }
    }));
  }
  return out;
}

}  // namespace fbdiff
