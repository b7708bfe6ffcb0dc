#pragma once

#include <cmath>

#include "fbdiff/tensor.hpp"

namespace fbdiff {

/// Complex spectrum over the temporal axis, stored as separate real and
/// imaginary tensors of shape [K, C, h, w]. `n_full` remembers the frame
/// count N of the sequence the spectrum came from, so truncated spectra
/// (K < N) can be zero-padded back before inversion.
template <typename T>
struct ComplexSpectrum {
  Tensor<T> re;
  Tensor<T> im;
  int64_t n_full = 0;

  int64_t frequency_count() const { return re.defined() ? re.dim(0) : 0; }
};

namespace detail {

// cos/sin of 2*pi*k*n/N via (k*n mod N), which keeps angles in one period and
// makes the table exactly symmetric in k and n.
template <typename T>
void trig_tables(int64_t N, std::vector<T>& cosv, std::vector<T>& sinv) {
  cosv.resize(N * N);
  sinv.resize(N * N);
  for (int64_t k = 0; k < N; ++k) {
    for (int64_t n = 0; n < N; ++n) {
      const double ang = 2.0 * M_PI * static_cast<double>((k * n) % N) / static_cast<double>(N);
      cosv[k * N + n] = static_cast<T>(std::cos(ang));
      sinv[k * N + n] = static_cast<T>(std::sin(ang));
    }
  }
}

}  // namespace detail

/// Direct N-point DFT along the frame axis of [N,C,h,w]:
///   B_k = sum_n x_n exp(-i 2 pi k n / N).
/// Computed as the O(N^2) sum; differentiable through both parts.
template <typename T>
ComplexSpectrum<T> dft_time(const Tensor<T>& x) {
  require(x.ndim() >= 1, ErrorCode::ShapeMismatch, "dft_time: rank-0 input");
  const int64_t N = x.dim(0);
  require(N >= 1, ErrorCode::InvalidArgument, "dft_time: need at least one frame");
  const int64_t S = x.numel() / N;  // elements per frame

  std::vector<T> cosv, sinv;
  detail::trig_tables<T>(N, cosv, sinv);

  Tensor<T> re(x.shape()), im(x.shape());
  {
    const T* px = x.ptr();
    T* pr = re.ptr();
    T* pi = im.ptr();
    parallel_for(N, [&](int64_t k) {
      T* rrow = pr + k * S;
      T* irow = pi + k * S;
      for (int64_t j = 0; j < S; ++j) {
        rrow[j] = T(0);
        irow[j] = T(0);
      }
      for (int64_t n = 0; n < N; ++n) {
        const T c = cosv[k * N + n];
        const T s = sinv[k * N + n];
        const T* xrow = px + n * S;
        for (int64_t j = 0; j < S; ++j) {
          rrow[j] += c * xrow[j];
          irow[j] -= s * xrow[j];
        }
      }
    });
  }
  if (x.tracked()) {
    Tape<T>* tp = x.tape();
    const int xi = x.node();
    auto ct = std::make_shared<std::vector<T>>(cosv);
    auto st = std::make_shared<std::vector<T>>(sinv);
    re.attach(tp, tp->record(re.numel(), [=](Tape<T>& t, const std::vector<T>& g) {
      auto& gx = t.grad_buf(xi);
      T* pgx = gx.data();
      const T* pg = g.data();
      parallel_for(N, [&](int64_t n) {
        T* grow = pgx + n * S;
        for (int64_t k = 0; k < N; ++k) {
          const T c = (*ct)[k * N + n];
          const T* gr = pg + k * S;
          for (int64_t j = 0; j < S; ++j) grow[j] += c * gr[j];
        }
      });
    }));
    im.attach(tp, tp->record(im.numel(), [=](Tape<T>& t, const std::vector<T>& g) {
      auto& gx = t.grad_buf(xi);
      T* pgx = gx.data();
      const T* pg = g.data();
      parallel_for(N, [&](int64_t n) {
        T* grow = pgx + n * S;
        for (int64_t k = 0; k < N; ++k) {
          const T s = (*st)[k * N + n];
          const T* gr = pg + k * S;
          for (int64_t j = 0; j < S; ++j) grow[j] -= s * gr[j];
        }
      });
    }));
  }
  return ComplexSpectrum<T>{re, im, N};
}

/// Real part of the inverse DFT, x_n = (1/N) sum_k B_k exp(+i 2 pi n k / N),
/// as a differentiable op on the two spectrum parts. Requires an untruncated
/// spectrum (K == N).
template <typename T>
Tensor<T> idft_real(const Tensor<T>& re, const Tensor<T>& im, int64_t n_full) {
  require(re.shape() == im.shape(), ErrorCode::ShapeMismatch, "idft_real: part shapes differ");
  const int64_t K = re.dim(0);
  require(K == n_full, ErrorCode::InvalidArgument,
          "idft_real: truncated spectrum (K=" + std::to_string(K) + ", N=" +
              std::to_string(n_full) + "); zero-pad the dropped bins first");
  const int64_t N = K;
  const int64_t S = re.numel() / N;
  const T invn = T(1) / static_cast<T>(N);

  std::vector<T> cosv, sinv;
  detail::trig_tables<T>(N, cosv, sinv);

  Tensor<T> out(re.shape());
  {
    const T* pr = re.ptr();
    const T* pi = im.ptr();
    T* po = out.ptr();
    parallel_for(N, [&](int64_t n) {
      T* orow = po + n * S;
      for (int64_t j = 0; j < S; ++j) orow[j] = T(0);
      for (int64_t k = 0; k < N; ++k) {
        const T c = cosv[n * N + k];
        const T s = sinv[n * N + k];
        const T* rrow = pr + k * S;
        const T* irow = pi + k * S;
        for (int64_t j = 0; j < S; ++j) orow[j] += c * rrow[j] - s * irow[j];
      }
      for (int64_t j = 0; j < S; ++j) orow[j] *= invn;
    });
  }
  if (Tape<T>* tp = detail::merge_tapes(re, im)) {
    const int ri = re.node(), ii = im.node();
    auto ct = std::make_shared<std::vector<T>>(cosv);
    auto st = std::make_shared<std::vector<T>>(sinv);
    out.attach(tp, tp->record(out.numel(), [=](Tape<T>& t, const std::vector<T>& g) {
      const T* pg = g.data();
      if (ri >= 0) {
        auto& gr = t.grad_buf(ri);
        T* pgr = gr.data();
        parallel_for(N, [&](int64_t k) {
          T* grow = pgr + k * S;
          for (int64_t n = 0; n < N; ++n) {
            const T c = (*ct)[n * N + k] * invn;
            const T* gn = pg + n * S;
            for (int64_t j = 0; j < S; ++j) grow[j] += c * gn[j];
          }
        });
      }
      if (ii >= 0) {
        auto& gi = t.grad_buf(ii);
        T* pgi = gi.data();
        parallel_for(N, [&](int64_t k) {
          T* grow = pgi + k * S;
          for (int64_t n = 0; n < N; ++n) {
            const T s = (*st)[n * N + k] * invn;
            const T* gn = pg + n * S;
            for (int64_t j = 0; j < S; ++j) grow[j] -= s * gn[j];
          }
        });
      }
    }));
  }
  return out;
}

/// Inverse-DFT result: the real part plus the largest imaginary residual,
/// which is ~0 for Hermitian-symmetric spectra.
template <typename T>
struct IdftResult {
  Tensor<T> real;
  double max_imag_residual = 0.0;
};

template <typename T>
IdftResult<T> idft_time(const ComplexSpectrum<T>& spec) {
  Tensor<T> real = idft_real(spec.re, spec.im, spec.n_full);
  // imaginary residual, diagnostic only (not on the tape)
  const int64_t N = spec.re.dim(0);
  const int64_t S = spec.re.numel() / N;
  std::vector<T> cosv, sinv;
  detail::trig_tables<T>(N, cosv, sinv);
  const T* pr = spec.re.ptr();
  const T* pi = spec.im.ptr();
  double worst = 0.0;
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t j = 0; j < S; ++j) {
      double acc = 0.0;
      for (int64_t k = 0; k < N; ++k)
        acc += static_cast<double>(sinv[n * N + k]) * pr[k * S + j] +
               static_cast<double>(cosv[n * N + k]) * pi[k * S + j];
      worst = std::max(worst, std::abs(acc) / static_cast<double>(N));
    }
  }
  return IdftResult<T>{real, worst};
}

/// Keeps the lowest n_fb frequency bins (k = 0 .. n_fb-1). Hermitian partners
/// of dropped bins are dropped too; reconstructions take the real part.
template <typename T>
ComplexSpectrum<T> truncate_bases(const ComplexSpectrum<T>& spec, int64_t n_fb) {
  const int64_t K = spec.frequency_count();
  require(n_fb >= 1 && n_fb <= K, ErrorCode::InvalidArgument,
          "truncate_bases: n_fb " + std::to_string(n_fb) + " out of range [1," +
              std::to_string(K) + "]");
  if (n_fb == K) return spec;
  return ComplexSpectrum<T>{slice_rows(spec.re, 0, n_fb), slice_rows(spec.im, 0, n_fb),
                            spec.n_full};
}

namespace detail {

/// Pads rows along axis 0 with zeros up to `total` rows.
template <typename T>
Tensor<T> pad_rows(const Tensor<T>& a, int64_t total) {
  const int64_t K = a.dim(0);
  require(total >= K, ErrorCode::InvalidArgument, "pad_rows: target smaller than input");
  if (total == K) return a;
  const int64_t row = a.numel() / K;
  Shape os = a.shape();
  os[0] = total;
  Tensor<T> out(os);
  std::memcpy(out.ptr(), a.ptr(), sizeof(T) * K * row);
  if (a.tracked()) {
    Tape<T>* tp = a.tape();
    const int ai = a.node();
    out.attach(tp, tp->record(out.numel(), [=](Tape<T>& t, const std::vector<T>& g) {
      auto& ga = t.grad_buf(ai);
      for (int64_t i = 0; i < K * row; ++i) ga[i] += g[i];
    }));
  }
  return out;
}

}  // namespace detail

/// Restores a truncated spectrum to its full [N,...] shape with zeros in the
/// dropped bins, so it can be inverted. Left-inverse of truncate_bases.
template <typename T>
ComplexSpectrum<T> zero_pad_back(const ComplexSpectrum<T>& spec) {
  return ComplexSpectrum<T>{detail::pad_rows(spec.re, spec.n_full),
                            detail::pad_rows(spec.im, spec.n_full), spec.n_full};
}

}  // namespace fbdiff
