#pragma once

#include <cstddef>
#include <span>

#include "freqexit/autodiff.hpp"
#include "freqexit/tensor.hpp"

namespace freqexit {

class Rng;

/// Discrete Fourier transforms.
///
/// Convention used everywhere in this library: the forward transform is
/// unnormalised, X[u] = sum_n x[n] exp(-2 pi i u n / N); the inverse carries the
/// full 1/N factor (1/(H W) in 2D). Under this convention
/// sum |x|^2 = (1 / (H W)) sum |X|^2.
///
/// Power-of-two lengths use an iterative radix-2 transform; any other length
/// falls back to the O(N^2) direct sum.
namespace dft {

/// In-place 1D transform. The inverse applies the 1/N factor.
void fft(std::span<Complex> x, bool inverse = false);

TensorC fft2(const TensorR& x);
TensorC fft2(const TensorC& x);
TensorC ifft2(const TensorC& spectrum);

/// Half spectrum of a real [H, W] signal: columns 0..W/2 of fft2(x).
TensorC rfft2(const TensorR& x);
/// Inverse of rfft2 for a real signal of width `width`. Columns 0 and W/2
/// (W even) contribute only their Hermitian-consistent part, matching the usual
/// complex-to-real semantics, so the result is real by construction.
TensorR irfft2(const TensorC& half, std::size_t width);

/// Number of stored frequency columns for a real signal of width `width`.
constexpr std::size_t half_width(std::size_t width) { return width / 2 + 1; }

}  // namespace dft

/// Learnable global filter over an [H, W, D] token grid.
///
/// Weights are kept as a half spectrum of shape [H, W/2+1, D]. The full filter
/// is its Hermitian completion, so a real grid always maps to a real grid.
struct GlobalFilter {
  ParameterC k_half;
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t d = 0;

  GlobalFilter() = default;
  GlobalFilter(std::size_t h, std::size_t w, std::size_t d, Complex fill);

  /// Complex normal entries with standard deviation `stddev` per component;
  /// self-conjugate bins are projected onto the real axis.
  static GlobalFilter random(std::size_t h, std::size_t w, std::size_t d, double stddev,
                             Rng& rng);

  /// Zeroes the imaginary part of bins that are their own conjugate partner
  /// (DC, and Nyquist rows/columns when the extent is even).
  void project_self_conjugate();

  Complex& at(std::size_t u, std::size_t v, std::size_t c) {
    return k_half.value[(u * dft::half_width(w) + v) * d + c];
  }
  const Complex& at(std::size_t u, std::size_t v, std::size_t c) const {
    return k_half.value[(u * dft::half_width(w) + v) * d + c];
  }
};

/// Full [H, W] spectrum for channel `c`: interior columns are copied with their
/// conjugate mirror, the self-paired columns (0 and W/2 when W is even) take the
/// Hermitian part (k[u] + conj(k[-u])) / 2.
TensorC hermitian_complete(const GlobalFilter& f, std::size_t c);

/// Real [H, W] spatial kernel of channel `c`: ifft2 of its Hermitian completion.
TensorR spatial_kernel(const GlobalFilter& f, std::size_t c);

/// Spectra of the forward input, kept for the backward pass.
struct FilterCache {
  TensorC input_spectrum;  // [B, H, W/2+1, D]
  std::size_t batch = 0;
  bool valid = false;
};

/// y[:,:,c] = irfft2(k_half[:,:,c] * rfft2(x[:,:,c])) for every channel.
/// `grid` is [H, W, D] or [B, H, W, D]; the output has the same shape.
TensorR global_filter_apply(const TensorR& grid, const GlobalFilter& f,
                            FilterCache* cache = nullptr);

struct FilterGrads {
  TensorR input;   // same shape as the forward grid
  TensorC k_half;  // (dL/dRe, dL/dIm) per half-spectrum bin
};

/// Exact gradients of the real-in/real-out filter map. Throws StateError when
/// `cache` was not filled by a forward call.
FilterGrads global_filter_backward(const TensorR& upstream, const GlobalFilter& f,
                                   const FilterCache& cache);

/// y[a,b] = sum_{u,v} x[(a-u) mod H, (b-v) mod W] * kernel[u,v], by direct summation.
TensorR circular_conv_oracle(const TensorR& x, const TensorR& kernel);

/// Tape primitive. `x` is [batch*H*W, D]; gradients for the filter accumulate
/// into `f.k_half.grad` when the filter is trainable.
Var global_filter(Tape& t, Var x, const GlobalFilter& f, std::size_t batch);

}  // namespace freqexit
