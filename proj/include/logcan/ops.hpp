#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "logcan/tensor.hpp"

// Forward primitives and their gradient rules. Every op is a pure function;
// inner products and reductions accumulate in 64-bit and round to the storage
// scalar once at the end, so f32 results agree with f64 oracles to ~1e-7.

namespace logcan {

inline constexpr int kIgnoreIndex = 255;

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

template <class S>
MatD to_matd(const S* p, index_t rows, index_t cols) {
  MatD m(rows, cols);
  double* d = m.data();
  const index_t n = rows * cols;
  for (index_t i = 0; i < n; ++i) d[i] = static_cast<double>(p[i]);
  return m;
}

template <class S>
void store_matd(const MatD& m, S* p) {
  const double* d = m.data();
  const index_t n = m.rows() * m.cols();
  for (index_t i = 0; i < n; ++i) p[i] = static_cast<S>(d[i]);
}

template <class S>
void add_matd(const MatD& m, S* p) {
  const double* d = m.data();
  const index_t n = m.rows() * m.cols();
  for (index_t i = 0; i < n; ++i) p[i] += static_cast<S>(d[i]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul_batched: [B,M,P] x [B,P,Q] -> [B,M,Q]. Rank-2 inputs are accepted as
// the unbatched case and produce a rank-2 result.

template <class S>
Tensor<S> matmul_batched(const Tensor<S>& a, const Tensor<S>& b) {
  const bool batched = a.rank() == 3;
  if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3))
    throw ShapeError("matmul shape mismatch: " + format_shape(a.shape) + " vs " +
                     format_shape(b.shape));
  const index_t B = batched ? a.shape[0] : 1;
  const index_t M = a.shape[batched ? 1 : 0];
  const index_t P = a.shape[batched ? 2 : 1];
  const index_t Q = b.shape[batched ? 2 : 1];
  if ((batched && b.shape[0] != B) || b.shape[batched ? 1 : 0] != P)
    throw ShapeError("matmul shape mismatch: " + format_shape(a.shape) + " vs " +
                     format_shape(b.shape));
  Tensor<S> out(batched ? std::vector<index_t>{B, M, Q} : std::vector<index_t>{M, Q});
  parallel_for(B, [&](index_t i) {
    const MatD am = detail::to_matd(a.data.data() + i * M * P, M, P);
    const MatD bm = detail::to_matd(b.data.data() + i * P * Q, P, Q);
    MatD cm = am * bm;
    detail::store_matd(cm, out.data.data() + i * M * Q);
  });
  return out;
}

template <class S>
void matmul_batched_backward(const Tensor<S>& a, const Tensor<S>& b, const Tensor<S>& gout,
                             Tensor<S>* ga, Tensor<S>* gb) {
  const bool batched = a.rank() == 3;
  const index_t B = batched ? a.shape[0] : 1;
  const index_t M = a.shape[batched ? 1 : 0];
  const index_t P = a.shape[batched ? 2 : 1];
  const index_t Q = b.shape[batched ? 2 : 1];
  for (index_t i = 0; i < B; ++i) {
    const MatD gm = detail::to_matd(gout.data.data() + i * M * Q, M, Q);
    if (ga) {
      const MatD bm = detail::to_matd(b.data.data() + i * P * Q, P, Q);
      MatD gam = gm * bm.transpose();
      detail::add_matd(gam, ga->data.data() + i * M * P);
    }
    if (gb) {
      const MatD am = detail::to_matd(a.data.data() + i * M * P, M, P);
      MatD gbm = am.transpose() * gm;
      detail::add_matd(gbm, gb->data.data() + i * P * Q);
    }
  }
}

// ---------------------------------------------------------------------------
// linear: [B,M,Cin] x [Cin,Cout] + bias[Cout] -> [B,M,Cout]. The 1x1 mapping
// applied along the channel axis of each row vector, shared across the batch.

template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (x.rank() != 3 || w.rank() != 2 || b.rank() != 1 || x.shape[2] != w.shape[0] ||
      w.shape[1] != b.shape[0])
    throw ShapeError("linear shape mismatch: x " + format_shape(x.shape) + ", w " +
                     format_shape(w.shape) + ", b " + format_shape(b.shape));
  const index_t B = x.shape[0], M = x.shape[1], Cin = x.shape[2], Cout = w.shape[1];
  const MatD wm = detail::to_matd(w.data.data(), Cin, Cout);
  Tensor<S> out({B, M, Cout});
  parallel_for(B, [&](index_t i) {
    const MatD xm = detail::to_matd(x.data.data() + i * M * Cin, M, Cin);
    MatD ym = xm * wm;
    for (index_t r = 0; r < M; ++r)
      for (index_t c = 0; c < Cout; ++c) ym(r, c) += static_cast<double>(b.data[c]);
    detail::store_matd(ym, out.data.data() + i * M * Cout);
  });
  return out;
}

template <class S>
void linear_backward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& gout, Tensor<S>* gx,
                     Tensor<S>* gw, Tensor<S>* gb) {
  const index_t B = x.shape[0], M = x.shape[1], Cin = x.shape[2], Cout = w.shape[1];
  const MatD wm = detail::to_matd(w.data.data(), Cin, Cout);
  MatD gwm = MatD::Zero(Cin, Cout);
  Eigen::VectorXd gbv = Eigen::VectorXd::Zero(Cout);
  for (index_t i = 0; i < B; ++i) {
    const MatD gm = detail::to_matd(gout.data.data() + i * M * Cout, M, Cout);
    if (gx) {
      MatD gxm = gm * wm.transpose();
      detail::add_matd(gxm, gx->data.data() + i * M * Cin);
    }
    if (gw) {
      const MatD xm = detail::to_matd(x.data.data() + i * M * Cin, M, Cin);
      gwm.noalias() += xm.transpose() * gm;
    }
    if (gb) gbv += gm.colwise().sum().transpose();
  }
  if (gw) detail::add_matd(gwm, gw->data.data());
  if (gb)
    for (index_t c = 0; c < Cout; ++c) gb->data[c] += static_cast<S>(gbv(c));
}

// ---------------------------------------------------------------------------
// softmax along one axis, max-subtracted for stability.

template <class S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("softmax axis " + std::to_string(axis) + " out of range for shape " +
                     format_shape(x.shape));
  const index_t len = x.shape[axis];
  index_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape[i];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape[i];
  Tensor<S> out(x.shape);
  std::vector<double> buf(static_cast<std::size_t>(len));
  for (index_t o = 0; o < outer; ++o) {
    for (index_t in = 0; in < inner; ++in) {
      const index_t base = o * len * inner + in;
      double m = -std::numeric_limits<double>::infinity();
      for (index_t k = 0; k < len; ++k)
        m = std::max(m, static_cast<double>(x.data[base + k * inner]));
      double sum = 0;
      for (index_t k = 0; k < len; ++k) {
        buf[k] = std::exp(static_cast<double>(x.data[base + k * inner]) - m);
        sum += buf[k];
      }
      for (index_t k = 0; k < len; ++k) out.data[base + k * inner] = static_cast<S>(buf[k] / sum);
    }
  }
  return out;
}

template <class S>
void softmax_backward(const Tensor<S>& y, int axis, const Tensor<S>& gout, Tensor<S>* gx) {
  const index_t len = y.shape[axis];
  index_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= y.shape[i];
  for (int i = axis + 1; i < y.rank(); ++i) inner *= y.shape[i];
  for (index_t o = 0; o < outer; ++o) {
    for (index_t in = 0; in < inner; ++in) {
      const index_t base = o * len * inner + in;
      double dot = 0;
      for (index_t k = 0; k < len; ++k)
        dot += static_cast<double>(y.data[base + k * inner]) *
               static_cast<double>(gout.data[base + k * inner]);
      for (index_t k = 0; k < len; ++k) {
        const double yi = static_cast<double>(y.data[base + k * inner]);
        const double gi = static_cast<double>(gout.data[base + k * inner]);
        gx->data[base + k * inner] += static_cast<S>(yi * (gi - dot));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, kernel 1 or 3, stride 1 or 2, zero "same" padding
// ((k-1)/2 per side). x [N,Cin,H,W], w [Cout,Cin,k,k], b [Cout].

inline index_t conv_out_extent(index_t in, int kernel, int stride) {
  return (in + (kernel - 1) - kernel) / stride + 1;
}

namespace detail {

template <class S>
void im2col(const S* x, index_t cin, index_t h, index_t w, int k, int stride, index_t ho,
            index_t wo, MatD& col) {
  const int pad = (k - 1) / 2;
  for (index_t c = 0; c < cin; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const index_t row = (c * k + ky) * k + kx;
        for (index_t oy = 0; oy < ho; ++oy) {
          const index_t iy = oy * stride + ky - pad;
          for (index_t ox = 0; ox < wo; ++ox) {
            const index_t ix = ox * stride + kx - pad;
            col(row, oy * wo + ox) = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                         ? static_cast<double>(x[(c * h + iy) * w + ix])
                                         : 0.0;
          }
        }
      }
    }
  }
}

}  // namespace detail

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride = 1) {
  if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1)
    throw ShapeError("conv2d expects x rank 4, w rank 4, b rank 1; got x " +
                     format_shape(x.shape) + ", w " + format_shape(w.shape));
  const index_t k = w.shape[2];
  if ((k != 1 && k != 3) || w.shape[3] != k)
    throw ShapeError("conv2d kernel must be 1x1 or 3x3, got w " + format_shape(w.shape));
  if (stride != 1 && stride != 2)
    throw ShapeError("conv2d stride must be 1 or 2, got " + std::to_string(stride));
  if (x.shape[1] != w.shape[1])
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(x.shape[1]) +
                     " channels, weights expect " + std::to_string(w.shape[1]));
  if (w.shape[0] != b.shape[0])
    throw ShapeError("conv2d channel mismatch: weights produce " + std::to_string(w.shape[0]) +
                     " channels, bias has " + std::to_string(b.shape[0]));
  const index_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3];
  const index_t cout = w.shape[0];
  const index_t ho = conv_out_extent(h, static_cast<int>(k), stride);
  const index_t wo = conv_out_extent(wd, static_cast<int>(k), stride);
  const MatD wm = detail::to_matd(w.data.data(), cout, cin * k * k);
  Tensor<S> out({n, cout, ho, wo});
  parallel_for(n, [&](index_t i) {
    MatD col(cin * k * k, ho * wo);
    detail::im2col(x.data.data() + i * cin * h * wd, cin, h, wd, static_cast<int>(k), stride, ho,
                   wo, col);
    MatD y = wm * col;
    for (index_t c = 0; c < cout; ++c) y.row(c).array() += static_cast<double>(b.data[c]);
    detail::store_matd(y, out.data.data() + i * cout * ho * wo);
  });
  return out;
}

template <class S>
void conv2d_backward(const Tensor<S>& x, const Tensor<S>& w, int stride, const Tensor<S>& gout,
                     Tensor<S>* gx, Tensor<S>* gw, Tensor<S>* gb) {
  const index_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3];
  const index_t cout = w.shape[0], k = w.shape[2];
  const index_t ho = gout.shape[2], wo = gout.shape[3];
  const int pad = (static_cast<int>(k) - 1) / 2;
  const MatD wm = detail::to_matd(w.data.data(), cout, cin * k * k);
  MatD gwm = MatD::Zero(cout, cin * k * k);
  Eigen::VectorXd gbv = Eigen::VectorXd::Zero(cout);
  std::vector<double> gxbuf;
  for (index_t i = 0; i < n; ++i) {
    const MatD gm = detail::to_matd(gout.data.data() + i * cout * ho * wo, cout, ho * wo);
    MatD col(cin * k * k, ho * wo);
    detail::im2col(x.data.data() + i * cin * h * wd, cin, h, wd, static_cast<int>(k), stride, ho,
                   wo, col);
    if (gw) gwm.noalias() += gm * col.transpose();
    if (gb) gbv += gm.rowwise().sum();
    if (gx) {
      MatD gcol = wm.transpose() * gm;
      gxbuf.assign(static_cast<std::size_t>(cin * h * wd), 0.0);
      for (index_t c = 0; c < cin; ++c)
        for (index_t ky = 0; ky < k; ++ky)
          for (index_t kx = 0; kx < k; ++kx) {
            const index_t row = (c * k + ky) * k + kx;
            for (index_t oy = 0; oy < ho; ++oy) {
              const index_t iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (index_t ox = 0; ox < wo; ++ox) {
                const index_t ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= wd) continue;
                gxbuf[static_cast<std::size_t>((c * h + iy) * wd + ix)] += gcol(row, oy * wo + ox);
              }
            }
          }
      S* gxd = gx->data.data() + i * cin * h * wd;
      for (std::size_t j = 0; j < gxbuf.size(); ++j) gxd[j] += static_cast<S>(gxbuf[j]);
    }
  }
  if (gw) detail::add_matd(gwm, gw->data.data());
  if (gb)
    for (index_t c = 0; c < cout; ++c) gb->data[c] += static_cast<S>(gbv(c));
}

// ---------------------------------------------------------------------------
// Bilinear upsampling by 2 or 4, align-corners=false: source coordinates are
// (dst + 0.5)/factor - 0.5 with border clamping, the usual half-pixel rule.

namespace detail {

struct BilinearTap {
  index_t lo, hi;
  double frac;
};

inline std::vector<BilinearTap> bilinear_taps(index_t out_len, index_t in_len, int factor) {
  std::vector<BilinearTap> taps(static_cast<std::size_t>(out_len));
  for (index_t o = 0; o < out_len; ++o) {
    const double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    double flo = std::floor(src);
    double frac = src - flo;
    index_t lo = static_cast<index_t>(flo);
    index_t hi = lo + 1;
    if (lo < 0) lo = 0;
    if (hi > in_len - 1) hi = in_len - 1;
    if (lo > in_len - 1) lo = in_len - 1;
    taps[static_cast<std::size_t>(o)] = {lo, hi, frac};
  }
  return taps;
}

}  // namespace detail

template <class S>
Tensor<S> upsample_bilinear(const Tensor<S>& x, int factor) {
  if (x.rank() != 4) throw ShapeError("upsample_bilinear expects rank 4, got " + format_shape(x.shape));
  if (factor != 2 && factor != 4)
    throw ShapeError("upsample factor must be 2 or 4, got " + std::to_string(factor));
  const index_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  const index_t ho = h * factor, wo = w * factor;
  const auto ty = detail::bilinear_taps(ho, h, factor);
  const auto tx = detail::bilinear_taps(wo, w, factor);
  Tensor<S> out({n, c, ho, wo});
  parallel_for(n * c, [&](index_t plane) {
    const S* src = x.data.data() + plane * h * w;
    S* dst = out.data.data() + plane * ho * wo;
    for (index_t oy = 0; oy < ho; ++oy) {
      const auto& [y0, y1, fy] = ty[static_cast<std::size_t>(oy)];
      for (index_t ox = 0; ox < wo; ++ox) {
        const auto& [x0, x1, fx] = tx[static_cast<std::size_t>(ox)];
        const double v = (1 - fy) * ((1 - fx) * static_cast<double>(src[y0 * w + x0]) +
                                     fx * static_cast<double>(src[y0 * w + x1])) +
                         fy * ((1 - fx) * static_cast<double>(src[y1 * w + x0]) +
                               fx * static_cast<double>(src[y1 * w + x1]));
        dst[oy * wo + ox] = static_cast<S>(v);
      }
    }
  });
  return out;
}

template <class S>
void upsample_bilinear_backward(const Tensor<S>& x, int factor, const Tensor<S>& gout,
                                Tensor<S>* gx) {
  const index_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  const index_t ho = h * factor, wo = w * factor;
  const auto ty = detail::bilinear_taps(ho, h, factor);
  const auto tx = detail::bilinear_taps(wo, w, factor);
  std::vector<double> buf(static_cast<std::size_t>(h * w));
  for (index_t plane = 0; plane < n * c; ++plane) {
    const S* g = gout.data.data() + plane * ho * wo;
    S* dst = gx->data.data() + plane * h * w;
    std::fill(buf.begin(), buf.end(), 0.0);
    for (index_t oy = 0; oy < ho; ++oy) {
      const auto& [y0, y1, fy] = ty[static_cast<std::size_t>(oy)];
      for (index_t ox = 0; ox < wo; ++ox) {
        const auto& [x0, x1, fx] = tx[static_cast<std::size_t>(ox)];
        const double gv = static_cast<double>(g[oy * wo + ox]);
        buf[static_cast<std::size_t>(y0 * w + x0)] += (1 - fy) * (1 - fx) * gv;
        buf[static_cast<std::size_t>(y0 * w + x1)] += (1 - fy) * fx * gv;
        buf[static_cast<std::size_t>(y1 * w + x0)] += fy * (1 - fx) * gv;
        buf[static_cast<std::size_t>(y1 * w + x1)] += fy * fx * gv;
      }
    }
    for (index_t j = 0; j < h * w; ++j) dst[j] += static_cast<S>(buf[static_cast<std::size_t>(j)]);
  }
}

// ---------------------------------------------------------------------------
// patch_split / patch_merge: fold an (nh, nw) spatial grid into the batch axis.
// Patch (i, j) of sample s lands in slot s*nh*nw + i*nw + j. Values are copied
// bitwise; merge is the exact inverse.

template <class S>
Tensor<S> patch_split(const Tensor<S>& x, Grid g) {
  if (x.rank() != 4) throw ShapeError("patch_split expects rank 4, got " + format_shape(x.shape));
  if (g.nh < 1 || g.nw < 1) throw ShapeError("patch grid must be positive");
  const index_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  if (h % g.nh != 0 || w % g.nw != 0)
    throw ShapeError("patch_split: extents " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by grid " + std::to_string(g.nh) + "x" +
                     std::to_string(g.nw));
  const index_t ph = h / g.nh, pw = w / g.nw;
  Tensor<S> out({n * g.nh * g.nw, c, ph, pw});
  for (index_t s = 0; s < n; ++s)
    for (index_t i = 0; i < g.nh; ++i)
      for (index_t j = 0; j < g.nw; ++j) {
        const index_t slot = (s * g.nh + i) * g.nw + j;
        for (index_t ch = 0; ch < c; ++ch)
          for (index_t y = 0; y < ph; ++y) {
            const S* src = x.data.data() + ((s * c + ch) * h + i * ph + y) * w + j * pw;
            S* dst = out.data.data() + ((slot * c + ch) * ph + y) * pw;
            std::memcpy(dst, src, static_cast<std::size_t>(pw) * sizeof(S));
          }
      }
  return out;
}

template <class S>
Tensor<S> patch_merge(const Tensor<S>& x, Grid g) {
  if (x.rank() != 4) throw ShapeError("patch_merge expects rank 4, got " + format_shape(x.shape));
  if (g.nh < 1 || g.nw < 1) throw ShapeError("patch grid must be positive");
  const index_t slots = x.shape[0], c = x.shape[1], ph = x.shape[2], pw = x.shape[3];
  if (slots % (static_cast<index_t>(g.nh) * g.nw) != 0)
    throw ShapeError("patch_merge: batch " + std::to_string(slots) + " not divisible by grid " +
                     std::to_string(g.nh) + "x" + std::to_string(g.nw));
  const index_t n = slots / (static_cast<index_t>(g.nh) * g.nw);
  const index_t h = ph * g.nh, w = pw * g.nw;
  Tensor<S> out({n, c, h, w});
  for (index_t s = 0; s < n; ++s)
    for (index_t i = 0; i < g.nh; ++i)
      for (index_t j = 0; j < g.nw; ++j) {
        const index_t slot = (s * g.nh + i) * g.nw + j;
        for (index_t ch = 0; ch < c; ++ch)
          for (index_t y = 0; y < ph; ++y) {
            const S* src = x.data.data() + ((slot * c + ch) * ph + y) * pw;
            S* dst = out.data.data() + ((s * c + ch) * h + i * ph + y) * w + j * pw;
            std::memcpy(dst, src, static_cast<std::size_t>(pw) * sizeof(S));
          }
      }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise and layout ops.

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> out(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = x.data[i] > S(0) ? x.data[i] : S(0);
  return out;
}

// n-ary sum, accumulated in 64-bit and rounded once: summand order cannot
// perturb the result for generic magnitudes.
template <class S>
Tensor<S> add_n(const std::vector<const Tensor<S>*>& xs) {
  if (xs.empty()) throw ShapeError("add_n needs at least one input");
  for (const auto* t : xs)
    if (t->shape != xs[0]->shape)
      throw ShapeError("add_n shape mismatch: " + format_shape(xs[0]->shape) + " vs " +
                       format_shape(t->shape));
  Tensor<S> out(xs[0]->shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    double acc = 0;
    for (const auto* t : xs) acc += static_cast<double>(t->data[i]);
    out.data[i] = static_cast<S>(acc);
  }
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape)
    throw ShapeError("mul shape mismatch: " + format_shape(a.shape) + " vs " +
                     format_shape(b.shape));
  Tensor<S> out(a.shape);
  for (std::size_t i = 0; i < a.data.size(); ++i)
    out.data[i] = static_cast<S>(static_cast<double>(a.data[i]) * static_cast<double>(b.data[i]));
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, double alpha) {
  Tensor<S> out(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i)
    out.data[i] = static_cast<S>(static_cast<double>(x.data[i]) * alpha);
  return out;
}

// Concatenate along the channel axis of [N,C,H,W] tensors.
template <class S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] ||
      a.shape[3] != b.shape[3])
    throw ShapeError("concat_channels shape mismatch: " + format_shape(a.shape) + " vs " +
                     format_shape(b.shape));
  const index_t n = a.shape[0], ca = a.shape[1], cb = b.shape[1], h = a.shape[2], w = a.shape[3];
  Tensor<S> out({n, ca + cb, h, w});
  const index_t plane = h * w;
  for (index_t i = 0; i < n; ++i) {
    std::memcpy(out.data.data() + i * (ca + cb) * plane, a.data.data() + i * ca * plane,
                static_cast<std::size_t>(ca * plane) * sizeof(S));
    std::memcpy(out.data.data() + (i * (ca + cb) + ca) * plane, b.data.data() + i * cb * plane,
                static_cast<std::size_t>(cb * plane) * sizeof(S));
  }
  return out;
}

template <class S>
Tensor<S> transpose_last2(const Tensor<S>& x) {
  if (x.rank() != 3) throw ShapeError("transpose_last2 expects rank 3, got " + format_shape(x.shape));
  const index_t b = x.shape[0], m = x.shape[1], n = x.shape[2];
  Tensor<S> out({b, n, m});
  for (index_t i = 0; i < b; ++i) {
    const S* src = x.data.data() + i * m * n;
    S* dst = out.data.data() + i * m * n;
    for (index_t r = 0; r < m; ++r)
      for (index_t c = 0; c < n; ++c) dst[c * m + r] = src[r * n + c];
  }
  return out;
}

template <class S>
Tensor<S> reshape(const Tensor<S>& x, std::vector<index_t> shape) {
  Tensor<S>::check_shape(shape);
  if (numel_of(shape) != x.numel())
    throw ShapeError("reshape from " + format_shape(x.shape) + " to " + format_shape(shape) +
                     " changes element count");
  Tensor<S> out;
  out.shape = std::move(shape);
  out.data = x.data;
  return out;
}

// Repeat each batch entry `times` consecutive times: out[b] = x[b / times].
// Matches the patch layout of patch_split, so per-sample tensors can be
// broadcast across that sample's patches.
template <class S>
Tensor<S> repeat_batch(const Tensor<S>& x, int times) {
  if (times < 1) throw ShapeError("repeat_batch times must be >= 1");
  std::vector<index_t> shape = x.shape;
  shape[0] *= times;
  const index_t stride = x.numel() / x.shape[0];
  Tensor<S> out(shape);
  for (index_t b = 0; b < shape[0]; ++b)
    std::memcpy(out.data.data() + b * stride, x.data.data() + (b / times) * stride,
                static_cast<std::size_t>(stride) * sizeof(S));
  return out;
}

template <class S>
void repeat_batch_backward(const Tensor<S>& x, int times, const Tensor<S>& gout, Tensor<S>* gx) {
  const index_t stride = x.numel() / x.shape[0];
  for (index_t b = 0; b < x.shape[0]; ++b) {
    for (index_t j = 0; j < stride; ++j) {
      double acc = 0;
      for (int t = 0; t < times; ++t)
        acc += static_cast<double>(gout.data[(b * times + t) * stride + j]);
      gx->data[b * stride + j] += static_cast<S>(acc);
    }
  }
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
  double acc = 0;
  for (S v : x.data) acc += static_cast<double>(v);
  Tensor<S> out({1});
  out.data[0] = static_cast<S>(acc);
  return out;
}

// ---------------------------------------------------------------------------
// Mean cross-entropy over non-ignored pixels, log-sum-exp evaluated in 64-bit.
// logits [N,K,H,W], labels row-major [N*H*W] with values in [0,K) or the
// ignore index.

template <class S>
double cross_entropy_value(const Tensor<S>& logits, const std::vector<std::int32_t>& labels,
                           int ignore_index = kIgnoreIndex) {
  if (logits.rank() != 4)
    throw ShapeError("cross_entropy expects rank-4 logits, got " + format_shape(logits.shape));
  const index_t n = logits.shape[0], k = logits.shape[1], h = logits.shape[2], w = logits.shape[3];
  if (static_cast<index_t>(labels.size()) != n * h * w)
    throw ShapeError("cross_entropy label count " + std::to_string(labels.size()) +
                     " does not match logits " + format_shape(logits.shape));
  const index_t plane = h * w;
  double total = 0;
  index_t count = 0;
  for (index_t i = 0; i < n; ++i)
    for (index_t p = 0; p < plane; ++p) {
      const std::int32_t t = labels[static_cast<std::size_t>(i * plane + p)];
      if (t == ignore_index) continue;
      if (t < 0 || t >= k)
        throw ShapeError("cross_entropy label " + std::to_string(t) + " out of range for " +
                         std::to_string(k) + " classes");
      const S* base = logits.data.data() + i * k * plane + p;
      double m = -std::numeric_limits<double>::infinity();
      for (index_t c = 0; c < k; ++c) m = std::max(m, static_cast<double>(base[c * plane]));
      double lse = 0;
      for (index_t c = 0; c < k; ++c) lse += std::exp(static_cast<double>(base[c * plane]) - m);
      total += m + std::log(lse) - static_cast<double>(base[t * plane]);
      ++count;
    }
  return count > 0 ? total / static_cast<double>(count) : 0.0;
}

template <class S>
void cross_entropy_backward(const Tensor<S>& logits, const std::vector<std::int32_t>& labels,
                            int ignore_index, double gout, Tensor<S>* glogits) {
  const index_t n = logits.shape[0], k = logits.shape[1], h = logits.shape[2], w = logits.shape[3];
  const index_t plane = h * w;
  index_t count = 0;
  for (std::int32_t t : labels)
    if (t != ignore_index) ++count;
  if (count == 0) return;
  const double inv = gout / static_cast<double>(count);
  for (index_t i = 0; i < n; ++i)
    for (index_t p = 0; p < plane; ++p) {
      const std::int32_t t = labels[static_cast<std::size_t>(i * plane + p)];
      if (t == ignore_index) continue;
      const S* base = logits.data.data() + i * k * plane + p;
      S* gbase = glogits->data.data() + i * k * plane + p;
      double m = -std::numeric_limits<double>::infinity();
      for (index_t c = 0; c < k; ++c) m = std::max(m, static_cast<double>(base[c * plane]));
      double lse = 0;
      for (index_t c = 0; c < k; ++c) lse += std::exp(static_cast<double>(base[c * plane]) - m);
      for (index_t c = 0; c < k; ++c) {
        const double soft = std::exp(static_cast<double>(base[c * plane]) - m) / lse;
        gbase[c * plane] += static_cast<S>((soft - (c == t ? 1.0 : 0.0)) * inv);
      }
    }
}

// Per-pixel argmax over the class axis of [N,K,H,W] logits.
template <class S>
std::vector<std::int32_t> argmax_classes(const Tensor<S>& logits) {
  if (logits.rank() != 4)
    throw ShapeError("argmax_classes expects rank-4 logits, got " + format_shape(logits.shape));
  const index_t n = logits.shape[0], k = logits.shape[1], plane = logits.shape[2] * logits.shape[3];
  std::vector<std::int32_t> out(static_cast<std::size_t>(n * plane));
  for (index_t i = 0; i < n; ++i)
    for (index_t p = 0; p < plane; ++p) {
      const S* base = logits.data.data() + i * k * plane + p;
      index_t best = 0;
      for (index_t c = 1; c < k; ++c)
        if (base[c * plane] > base[best * plane]) best = c;
      out[static_cast<std::size_t>(i * plane + p)] = static_cast<std::int32_t>(best);
    }
  return out;
}

}  // namespace logcan
