#include "freqexit/spectral.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <memory>
#include <numbers>
#include <vector>

#include "freqexit/rng.hpp"

namespace freqexit {
namespace dft {
namespace {

// All transforms here run on split (re, im) buffers where every element is a
// contiguous vector of `lanes` doubles, so one call transforms all channels of
// a token grid at once. Element j starts at offset j * stride.

struct Radix2Plan {
  std::vector<std::size_t> bitrev;
  std::vector<double> cos_k;  // cos(2 pi k / n), k < n/2
  std::vector<double> sin_k;  // -sin(2 pi k / n)
};

Radix2Plan make_plan(std::size_t n) {
  Radix2Plan p;
  const int bits = std::countr_zero(n);
  p.bitrev.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t r = 0;
    for (int b = 0; b < bits; ++b) r |= ((i >> b) & 1u) << (bits - 1 - b);
    p.bitrev[i] = r;
  }
  p.cos_k.resize(n / 2);
  p.sin_k.resize(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    const double ang = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    p.cos_k[k] = std::cos(ang);
    p.sin_k[k] = -std::sin(ang);
  }
  return p;
}

// Indexed by log2(n); plans are built once per thread.
const Radix2Plan& plan_for(std::size_t n) {
  thread_local std::array<std::unique_ptr<Radix2Plan>, 64> cache;
  auto& slot = cache[static_cast<std::size_t>(std::countr_zero(n))];
  if (!slot) slot = std::make_unique<Radix2Plan>(make_plan(n));
  return *slot;
}

void swap_lanes(double* a, double* b, std::size_t lanes) {
  for (std::size_t l = 0; l < lanes; ++l) std::swap(a[l], b[l]);
}

void radix2_lanes(double* re, double* im, std::size_t n, std::size_t stride,
                  std::size_t lanes, bool inverse) {
  const auto& plan = plan_for(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = plan.bitrev[i];
    if (i < r) {
      swap_lanes(re + i * stride, re + r * stride, lanes);
      swap_lanes(im + i * stride, im + r * stride, lanes);
    }
  }
  const double sign = inverse ? -1.0 : 1.0;
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2, step = n / len;
    for (std::size_t start = 0; start < n; start += len) {
      for (std::size_t k = 0; k < half; ++k) {
        const double wr = plan.cos_k[k * step];
        const double wi = sign * plan.sin_k[k * step];
        double* ar = re + (start + k) * stride;
        double* ai = im + (start + k) * stride;
        double* br = re + (start + k + half) * stride;
        double* bi = im + (start + k + half) * stride;
        for (std::size_t l = 0; l < lanes; ++l) {
          const double tr = br[l] * wr - bi[l] * wi;
          const double ti = br[l] * wi + bi[l] * wr;
          br[l] = ar[l] - tr;
          bi[l] = ai[l] - ti;
          ar[l] += tr;
          ai[l] += ti;
        }
      }
    }
  }
}

void direct_lanes(double* re, double* im, std::size_t n, std::size_t stride,
                  std::size_t lanes, bool inverse) {
  std::vector<double> out_re(n * lanes, 0.0), out_im(n * lanes, 0.0);
  const double sign = inverse ? 1.0 : -1.0;
  for (std::size_t u = 0; u < n; ++u) {
    for (std::size_t j = 0; j < n; ++j) {
      const double ang = sign * 2.0 * std::numbers::pi *
                         static_cast<double>((u * j) % n) / static_cast<double>(n);
      const double wr = std::cos(ang), wi = std::sin(ang);
      const double* xr = re + j * stride;
      const double* xi = im + j * stride;
      for (std::size_t l = 0; l < lanes; ++l) {
        out_re[u * lanes + l] += xr[l] * wr - xi[l] * wi;
        out_im[u * lanes + l] += xr[l] * wi + xi[l] * wr;
      }
    }
  }
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t l = 0; l < lanes; ++l) {
      re[u * stride + l] = out_re[u * lanes + l];
      im[u * stride + l] = out_im[u * lanes + l];
    }
}

// 1D transform of n lane-vectors; the inverse applies 1/n.
void fft_lanes(double* re, double* im, std::size_t n, std::size_t stride, std::size_t lanes,
               bool inverse) {
  if (n <= 1) return;
  if (std::has_single_bit(n)) {
    radix2_lanes(re, im, n, stride, lanes, inverse);
  } else {
    direct_lanes(re, im, n, stride, lanes, inverse);
  }
  if (inverse) {
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t l = 0; l < lanes; ++l) {
        re[j * stride + l] *= inv;
        im[j * stride + l] *= inv;
      }
  }
}

void require_rank2(const Shape& s, const char* what) {
  if (s.size() != 2 || s[0] == 0 || s[1] == 0) {
    throw DimensionError(std::string(what) + ": expected a non-empty [H, W] tensor, got " +
                         shape_string(s));
  }
}

// Full-width split workspace for one [h, w, lanes] grid.
struct Workspace {
  std::vector<double> re, im;
  void resize(std::size_t n) {
    re.assign(n, 0.0);
    im.assign(n, 0.0);
  }
};

// Real grid x[h][w][lanes] -> half spectrum in columns 0..w/2 of `ws`.
void rfft2_lanes(const double* x, std::size_t h, std::size_t w, std::size_t lanes,
                 Workspace& ws) {
  const std::size_t row = w * lanes, hw = half_width(w);
  ws.resize(h * row);
  std::copy(x, x + h * row, ws.re.begin());
  for (std::size_t r = 0; r < h; ++r) {
    fft_lanes(ws.re.data() + r * row, ws.im.data() + r * row, w, lanes, lanes, false);
  }
  for (std::size_t v = 0; v < hw; ++v) {
    fft_lanes(ws.re.data() + v * lanes, ws.im.data() + v * lanes, h, row, lanes, false);
  }
}

// Half spectrum held in columns 0..w/2 of `ws` -> real grid y[h][w][lanes]
// (added into y when `accumulate`). Columns beyond w/2 are overwritten with the
// conjugate mirror; taking the real part of the inverse keeps only the
// Hermitian-consistent part of the self-paired columns.
void irfft2_lanes(Workspace& ws, std::size_t h, std::size_t w, std::size_t lanes, double* y,
                  bool accumulate) {
  const std::size_t row = w * lanes, hw = half_width(w);
  for (std::size_t v = 0; v < hw; ++v) {
    fft_lanes(ws.re.data() + v * lanes, ws.im.data() + v * lanes, h, row, lanes, true);
  }
  for (std::size_t r = 0; r < h; ++r) {
    double* re = ws.re.data() + r * row;
    double* im = ws.im.data() + r * row;
    for (std::size_t v = hw; v < w; ++v)
      for (std::size_t l = 0; l < lanes; ++l) {
        re[v * lanes + l] = re[(w - v) * lanes + l];
        im[v * lanes + l] = -im[(w - v) * lanes + l];
      }
    fft_lanes(re, im, w, lanes, lanes, true);
    double* out = y + r * row;
    if (accumulate) {
      for (std::size_t i = 0; i < row; ++i) out[i] += re[i];
    } else {
      std::copy(re, re + row, out);
    }
  }
}

}  // namespace

void fft(std::span<Complex> x, bool inverse) {
  std::vector<double> re(x.size()), im(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    re[i] = x[i].real();
    im[i] = x[i].imag();
  }
  fft_lanes(re.data(), im.data(), x.size(), 1, 1, inverse);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = Complex(re[i], im[i]);
}

namespace {

TensorC transform2(const TensorC& x, bool inverse) {
  const std::size_t h = x.extent(0), w = x.extent(1);
  Workspace ws;
  ws.resize(h * w);
  for (std::size_t i = 0; i < x.size(); ++i) {
    ws.re[i] = x[i].real();
    ws.im[i] = x[i].imag();
  }
  for (std::size_t r = 0; r < h; ++r) {
    fft_lanes(ws.re.data() + r * w, ws.im.data() + r * w, w, 1, 1, inverse);
  }
  for (std::size_t c = 0; c < w; ++c) {
    fft_lanes(ws.re.data() + c, ws.im.data() + c, h, w, 1, inverse);
  }
  TensorC out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = Complex(ws.re[i], ws.im[i]);
  return out;
}

}  // namespace

TensorC fft2(const TensorC& x) {
  require_rank2(x.shape(), "fft2");
  return transform2(x, false);
}

TensorC fft2(const TensorR& x) {
  require_rank2(x.shape(), "fft2");
  std::vector<Complex> c(x.data().begin(), x.data().end());
  return transform2(TensorC(x.shape(), std::move(c)), false);
}

TensorC ifft2(const TensorC& spectrum) {
  require_rank2(spectrum.shape(), "ifft2");
  return transform2(spectrum, true);
}

TensorC rfft2(const TensorR& x) {
  require_rank2(x.shape(), "rfft2");
  const std::size_t h = x.extent(0), w = x.extent(1), hw = half_width(w);
  Workspace ws;
  rfft2_lanes(x.data().data(), h, w, 1, ws);
  TensorC out({h, hw});
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < hw; ++v) out.at(u, v) = Complex(ws.re[u * w + v], ws.im[u * w + v]);
  return out;
}

TensorR irfft2(const TensorC& half, std::size_t width) {
  require_rank2(half.shape(), "irfft2");
  if (width == 0 || half.extent(1) != half_width(width)) {
    throw DimensionError("irfft2: " + std::to_string(half.extent(1)) +
                         " columns do not describe width " + std::to_string(width));
  }
  const std::size_t h = half.extent(0), hw = half.extent(1);
  Workspace ws;
  ws.resize(h * width);
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < hw; ++v) {
      ws.re[u * width + v] = half.at(u, v).real();
      ws.im[u * width + v] = half.at(u, v).imag();
    }
  TensorR out({h, width});
  irfft2_lanes(ws, h, width, 1, out.data().data(), false);
  return out;
}

}  // namespace dft

// ---------------------------------------------------------------------------
// GlobalFilter

GlobalFilter::GlobalFilter(std::size_t h_, std::size_t w_, std::size_t d_, Complex fill)
    : k_half(TensorC({h_, dft::half_width(w_), d_}, fill)), h(h_), w(w_), d(d_) {
  if (h == 0 || w == 0 || d == 0) throw DimensionError("global filter extents must be positive");
}

GlobalFilter GlobalFilter::random(std::size_t h, std::size_t w, std::size_t d, double stddev,
                                  Rng& rng) {
  GlobalFilter f(h, w, d, Complex{});
  for (auto& v : f.k_half.value.data()) {
    const double re = stddev * rng.normal();
    const double im = stddev * rng.normal();
    v = Complex(re, im);
  }
  f.project_self_conjugate();
  return f;
}

void GlobalFilter::project_self_conjugate() {
  const std::size_t hw = dft::half_width(w);
  auto self_paired = [](std::size_t i, std::size_t n) { return (2 * i) % n == 0; };
  for (std::size_t u = 0; u < h; ++u) {
    if (!self_paired(u, h)) continue;
    for (std::size_t v = 0; v < hw; ++v) {
      if (!self_paired(v, w)) continue;
      for (std::size_t c = 0; c < d; ++c) at(u, v, c).imag(0.0);
    }
  }
}

TensorC hermitian_complete(const GlobalFilter& f, std::size_t c) {
  if (c >= f.d) throw IndexError("channel " + std::to_string(c) + " out of range");
  const std::size_t h = f.h, w = f.w, hw = dft::half_width(w);
  TensorC full({h, w});
  for (std::size_t u = 0; u < h; ++u) {
    const std::size_t nu = (h - u) % h;
    for (std::size_t v = 0; v < hw; ++v) {
      const bool edge = (2 * v) % w == 0;
      if (edge) {
        full.at(u, v) = 0.5 * (f.at(u, v, c) + std::conj(f.at(nu, v, c)));
      } else {
        full.at(u, v) = f.at(u, v, c);
        full.at(nu, w - v) = std::conj(f.at(u, v, c));
      }
    }
  }
  return full;
}

TensorR spatial_kernel(const GlobalFilter& f, std::size_t c) {
  const TensorC k = dft::ifft2(hermitian_complete(f, c));
  TensorR out(k.shape());
  for (std::size_t i = 0; i < k.size(); ++i) out[i] = k[i].real();
  return out;
}

namespace {

struct GridDims {
  std::size_t batch, h, w, d;
};

GridDims grid_dims(const TensorR& grid, const GlobalFilter& f) {
  GridDims g{};
  if (grid.rank() == 3) {
    g = {1, grid.extent(0), grid.extent(1), grid.extent(2)};
  } else if (grid.rank() == 4) {
    g = {grid.extent(0), grid.extent(1), grid.extent(2), grid.extent(3)};
  } else {
    throw DimensionError("global filter: grid must be [H,W,D] or [B,H,W,D], got " +
                         shape_string(grid.shape()));
  }
  if (g.h != f.h || g.w != f.w || g.d != f.d) {
    throw DimensionError("global filter: grid " + shape_string(grid.shape()) +
                         " does not match filter " + shape_string(f.k_half.value.shape()));
  }
  return g;
}

void filter_forward(const double* x, double* y, std::size_t batch, const GlobalFilter& f,
                    FilterCache* cache) {
  const std::size_t h = f.h, w = f.w, d = f.d, hw = dft::half_width(w);
  const std::size_t grid = h * w * d, row = w * d;
  if (cache != nullptr) {
    cache->input_spectrum = TensorC({batch, h, hw, d});
    cache->batch = batch;
    cache->valid = true;
  }
  const Complex* k = f.k_half.value.data().data();
  dft::Workspace ws;
  for (std::size_t b = 0; b < batch; ++b) {
    dft::rfft2_lanes(x + b * grid, h, w, d, ws);
    for (std::size_t u = 0; u < h; ++u)
      for (std::size_t v = 0; v < hw; ++v) {
        double* re = ws.re.data() + u * row + v * d;
        double* im = ws.im.data() + u * row + v * d;
        const Complex* kk = k + (u * hw + v) * d;
        if (cache != nullptr) {
          Complex* xs = cache->input_spectrum.data().data() + ((b * h + u) * hw + v) * d;
          for (std::size_t c = 0; c < d; ++c) xs[c] = Complex(re[c], im[c]);
        }
        for (std::size_t c = 0; c < d; ++c) {
          const double kr = kk[c].real(), ki = kk[c].imag();
          const double r = re[c] * kr - im[c] * ki;
          im[c] = re[c] * ki + im[c] * kr;
          re[c] = r;
        }
      }
    dft::irfft2_lanes(ws, h, w, d, y + b * grid, false);
  }
}

void filter_backward(const double* g, std::size_t batch, const GlobalFilter& f,
                     const FilterCache& cache, double* gx, Complex* gk) {
  const std::size_t h = f.h, w = f.w, d = f.d, hw = dft::half_width(w);
  const std::size_t grid = h * w * d, row = w * d;
  const double inv_s = 1.0 / static_cast<double>(h * w);
  const Complex* k = f.k_half.value.data().data();
  dft::Workspace ws;
  for (std::size_t b = 0; b < batch; ++b) {
    dft::rfft2_lanes(g + b * grid, h, w, d, ws);
    for (std::size_t u = 0; u < h; ++u)
      for (std::size_t v = 0; v < hw; ++v) {
        double* re = ws.re.data() + u * row + v * d;
        double* im = ws.im.data() + u * row + v * d;
        const std::size_t off = (u * hw + v) * d;
        if (gk != nullptr) {
          // dL/dk = weight * conj(X) * G; interior columns stand for a bin and
          // its conjugate mirror, hence the factor of two.
          const double weight = ((2 * v) % w == 0) ? inv_s : 2.0 * inv_s;
          const Complex* xs = cache.input_spectrum.data().data() + b * h * hw * d + off;
          for (std::size_t c = 0; c < d; ++c) {
            const double xr = xs[c].real(), xi = -xs[c].imag();
            gk[off + c] += Complex(weight * (xr * re[c] - xi * im[c]),
                                   weight * (xr * im[c] + xi * re[c]));
          }
        }
        if (gx != nullptr) {
          const Complex* kk = k + off;
          for (std::size_t c = 0; c < d; ++c) {
            const double kr = kk[c].real(), ki = -kk[c].imag();
            const double r = re[c] * kr - im[c] * ki;
            im[c] = re[c] * ki + im[c] * kr;
            re[c] = r;
          }
        }
      }
    if (gx != nullptr) dft::irfft2_lanes(ws, h, w, d, gx + b * grid, true);
  }
}

}  // namespace

TensorR global_filter_apply(const TensorR& grid, const GlobalFilter& f, FilterCache* cache) {
  const GridDims g = grid_dims(grid, f);
  TensorR out(grid.shape());
  filter_forward(grid.data().data(), out.data().data(), g.batch, f, cache);
  return out;
}

FilterGrads global_filter_backward(const TensorR& upstream, const GlobalFilter& f,
                                   const FilterCache& cache) {
  if (!cache.valid) throw StateError("global filter backward without a cached forward pass");
  const GridDims g = grid_dims(upstream, f);
  if (g.batch != cache.batch) {
    throw DimensionError("global filter backward: upstream batch does not match cache");
  }
  FilterGrads out{TensorR(upstream.shape()), TensorC(f.k_half.value.shape())};
  filter_backward(upstream.data().data(), g.batch, f, cache, out.input.data().data(),
                  out.k_half.data().data());
  return out;
}

TensorR circular_conv_oracle(const TensorR& x, const TensorR& kernel) {
  require_same_shape(x, kernel, "circular_conv_oracle");
  if (x.rank() != 2) throw DimensionError("circular_conv_oracle expects [H, W]");
  const std::size_t h = x.extent(0), w = x.extent(1);
  TensorR y({h, w});
  for (std::size_t a = 0; a < h; ++a)
    for (std::size_t b = 0; b < w; ++b) {
      double acc = 0.0;
      for (std::size_t u = 0; u < h; ++u)
        for (std::size_t v = 0; v < w; ++v)
          acc += x.at((a + h - u) % h, (b + w - v) % w) * kernel.at(u, v);
      y.at(a, b) = acc;
    }
  return y;
}

Var global_filter(Tape& t, Var x, const GlobalFilter& f, std::size_t batch) {
  const TensorR& xv = t.value(x);
  const std::size_t s = f.h * f.w;
  if (xv.rank() != 2 || xv.extent(1) != f.d || xv.extent(0) != batch * s) {
    throw DimensionError("global_filter: input " + shape_string(xv.shape()) +
                         " does not match batch of " + std::to_string(batch) + " grids " +
                         shape_string(f.k_half.value.shape()));
  }
  const bool filter_grad = f.k_half.trainable;
  const bool rg = t.recording() && (t.requires_grad(x) || filter_grad);
  TensorR out(xv.shape());
  if (!rg) {
    filter_forward(xv.data().data(), out.data().data(), batch, f, nullptr);
    return t.push(std::move(out), false, nullptr);
  }
  auto cache = std::make_shared<FilterCache>();
  filter_forward(xv.data().data(), out.data().data(), batch, f, cache.get());
  Var o{t.size()};
  return t.push(std::move(out), true, [x, o, &f, batch, cache, filter_grad](Tape& tp) {
    const TensorR& g = tp.node(o).grad;
    double* gx = tp.requires_grad(x) ? tp.grad_buffer(x).data().data() : nullptr;
    Complex* gk = nullptr;
    if (filter_grad) {
      f.k_half.ensure_grad();
      gk = f.k_half.grad.data().data();
    }
    filter_backward(g.data().data(), batch, f, *cache, gx, gk);
  });
}

}  // namespace freqexit
