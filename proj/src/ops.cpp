#include "iekd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>

namespace iekd::ops {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  require(a.same_shape(b), ErrorKind::ShapeMismatch,
          std::string(what) + ": " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

// Binary elementwise with scalar broadcast on either side. dfa/dfb map
// (a_elem, b_elem, out_grad) to the contribution added to the operand adjoint.
template <typename F, typename DA, typename DB>
NodeId binary_op(Tape& t, NodeId a, NodeId b, F f, DA dfa, DB dfb, const char* what) {
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  const bool a_scalar = av.is_scalar();
  const bool b_scalar = bv.is_scalar();
  if (!a_scalar && !b_scalar) require_same_shape(av, bv, what);

  const Tensor& big = a_scalar ? bv : av;
  Tensor out = Tensor::zeros(big.shape);
  const std::size_t n = out.data.size();
  for (std::size_t i = 0; i < n; ++i)
    out.data[i] = f(av.data[a_scalar ? 0 : i], bv.data[b_scalar ? 0 : i]);

  return t.emplace(std::move(out), [a, b, a_scalar, b_scalar, dfa, dfb](Tape& tp, NodeId self) {
    const auto& g = tp.adj(self);
    const auto& avd = tp.val(a).data;
    const auto& bvd = tp.val(b).data;
    auto& ga = tp.adj(a);
    auto& gb = tp.adj(b);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = avd[a_scalar ? 0 : i];
      const double y = bvd[b_scalar ? 0 : i];
      ga[a_scalar ? 0 : i] += dfa(x, y, g[i]);
      gb[b_scalar ? 0 : i] += dfb(x, y, g[i]);
    }
  });
}

template <typename F, typename DF>
NodeId unary_op(Tape& t, NodeId a, F f, DF df) {
  const Tensor& av = t.val(a);
  Tensor out = Tensor::zeros(av.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = f(av.data[i]);
  return t.emplace(std::move(out), [a, df](Tape& tp, NodeId self) {
    const auto& g = tp.adj(self);
    const auto& x = tp.val(a).data;
    auto& ga = tp.adj(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += df(x[i], g[i]);
  });
}

}  // namespace

NodeId add(Tape& t, NodeId a, NodeId b) {
  return binary_op(
      t, a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return g; },
      "add");
}

NodeId sub(Tape& t, NodeId a, NodeId b) {
  return binary_op(
      t, a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return g; }, [](double, double, double g) { return -g; },
      "sub");
}

NodeId mul(Tape& t, NodeId a, NodeId b) {
  return binary_op(
      t, a, b, [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; }, "mul");
}

NodeId div(Tape& t, NodeId a, NodeId b) {
  return binary_op(
      t, a, b, [](double x, double y) { return x / y; },
      [](double, double y, double g) { return g / y; },
      [](double x, double y, double g) { return -g * x / (y * y); }, "div");
}

NodeId scalar_mul(Tape& t, NodeId a, double c) {
  return unary_op(
      t, a, [c](double x) { return c * x; }, [c](double, double g) { return c * g; });
}

NodeId neg(Tape& t, NodeId a) { return scalar_mul(t, a, -1.0); }

NodeId abs(Tape& t, NodeId a) {
  return unary_op(
      t, a, [](double x) { return std::abs(x); },
      [](double x, double g) { return x > 0.0 ? g : (x < 0.0 ? -g : 0.0); });
}

NodeId relu(Tape& t, NodeId a) {
  return unary_op(
      t, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double g) { return x > 0.0 ? g : 0.0; });
}

NodeId leaky_relu(Tape& t, NodeId a, double slope) {
  return unary_op(
      t, a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double g) { return x > 0.0 ? g : slope * g; });
}

NodeId sqrt(Tape& t, NodeId a) {
  return unary_op(
      t, a, [](double x) { return std::sqrt(x); },
      [](double x, double g) { return x > 0.0 ? 0.5 * g / std::sqrt(x) : 0.0; });
}

// ---- matmul ------------------------------------------------------------------

NodeId matmul(Tape& t, NodeId a, NodeId b) {
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  require(av.rank() == 2 && bv.rank() == 2, ErrorKind::ShapeMismatch, "matmul needs rank-2 operands");
  const std::int64_t m = av.extent(0), k = av.extent(1), k2 = bv.extent(0), n = bv.extent(1);
  require(k == k2, ErrorKind::ShapeMismatch,
          "matmul inner extents " + shape_str(av.shape) + " x " + shape_str(bv.shape));

  Tensor out = Tensor::zeros({m, n});
  {
    const double* A = av.data.data();
    const double* B = bv.data.data();
    double* C = out.data.data();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        const double* Brow = B + p * n;
        double* Crow = C + i * n;
        for (std::int64_t j = 0; j < n; ++j) Crow[j] += aip * Brow[j];
      }
  }

  return t.emplace(std::move(out), [a, b, m, k, n](Tape& tp, NodeId self) {
    const double* G = tp.adj(self).data();
    const double* A = tp.val(a).data.data();
    const double* B = tp.val(b).data.data();
    double* dA = tp.adj(a).data();
    double* dB = tp.adj(b).data();
    // dA = G B^T
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t p = 0; p < k; ++p) {
        double acc = 0.0;
        const double* Grow = G + i * n;
        const double* Brow = B + p * n;
        for (std::int64_t j = 0; j < n; ++j) acc += Grow[j] * Brow[j];
        dA[i * k + p] += acc;
      }
    // dB = A^T G
    for (std::int64_t p = 0; p < k; ++p)
      for (std::int64_t i = 0; i < m; ++i) {
        const double aip = A[i * k + p];
        const double* Grow = G + i * n;
        double* dBrow = dB + p * n;
        for (std::int64_t j = 0; j < n; ++j) dBrow[j] += aip * Grow[j];
      }
  });
}

NodeId transpose2d(Tape& t, NodeId a) {
  const Tensor& av = t.val(a);
  require(av.rank() == 2, ErrorKind::ShapeMismatch, "transpose2d needs rank 2");
  const std::int64_t m = av.extent(0), n = av.extent(1);
  Tensor out = Tensor::zeros({n, m});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out.data[static_cast<std::size_t>(j * m + i)] = av.data[static_cast<std::size_t>(i * n + j)];
  return t.emplace(std::move(out), [a, m, n](Tape& tp, NodeId self) {
    const auto& g = tp.adj(self);
    auto& ga = tp.adj(a);
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t i = 0; i < m; ++i) ga[static_cast<std::size_t>(i * n + j)] += g[static_cast<std::size_t>(j * m + i)];
  });
}

NodeId add_row_bias(Tape& t, NodeId x, NodeId bias) {
  const Tensor& xv = t.val(x);
  const Tensor& bv = t.val(bias);
  require(xv.rank() == 2 && bv.rank() == 1 && bv.extent(0) == xv.extent(1), ErrorKind::ShapeMismatch,
          "add_row_bias " + shape_str(xv.shape) + " + " + shape_str(bv.shape));
  const std::int64_t n = xv.extent(0), d = xv.extent(1);
  Tensor out = xv;
  out.grad.clear();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) out.data[static_cast<std::size_t>(i * d + j)] += bv.data[static_cast<std::size_t>(j)];
  return t.emplace(std::move(out), [x, bias, n, d](Tape& tp, NodeId self) {
    const auto& g = tp.adj(self);
    auto& gx = tp.adj(x);
    auto& gb = tp.adj(bias);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    for (std::int64_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < n; ++i) acc += g[static_cast<std::size_t>(i * d + j)];
      gb[static_cast<std::size_t>(j)] += acc;
    }
  });
}

// ---- convolution kernels -------------------------------------------------------
// Layouts: x[N,Ci,H,W], w[Co,Ci,K,K], y[N,Co,H,W]; stride 1, pad = K/2.

namespace {

struct ConvDims {
  std::int64_t n, ci, co, h, w, k, pad;
};

// Scratch holding one zero-padded channel plane [(H+2p) x (W+2p)]; removes all
// boundary branches from the hot loops below.
class PaddedPlane {
 public:
  PaddedPlane(std::int64_t h, std::int64_t w, std::int64_t pad)
      : h_(h), w_(w), pad_(pad), pw_(w + 2 * pad), buf_(static_cast<std::size_t>((h + 2 * pad) * pw_), 0.0) {}

  void load(const double* plane) {
    for (std::int64_t y = 0; y < h_; ++y)
      std::memcpy(buf_.data() + (y + pad_) * pw_ + pad_, plane + y * w_,
                  static_cast<std::size_t>(w_) * sizeof(double));
  }

  // row y of the padded image, already offset so index 0 is column -pad
  const double* row(std::int64_t y) const { return buf_.data() + (y + pad_) * pw_; }

 private:
  std::int64_t h_, w_, pad_, pw_;
  std::vector<double> buf_;
};

// single-pass 3x3 row kernel over a padded plane; 9 FMAs per output element
void conv3_rows(const double* __restrict r_base, std::int64_t pw, const double* __restrict wk,
                double* __restrict y, std::int64_t h, std::int64_t w) {
  const double w00 = wk[0], w01 = wk[1], w02 = wk[2];
  const double w10 = wk[3], w11 = wk[4], w12 = wk[5];
  const double w20 = wk[6], w21 = wk[7], w22 = wk[8];
  for (std::int64_t oy = 0; oy < h; ++oy) {
    const double* r0 = r_base + oy * pw;
    const double* r1 = r0 + pw;
    const double* r2 = r1 + pw;
    double* yr = y + oy * w;
    for (std::int64_t ox = 0; ox < w; ++ox) {
      yr[ox] += w00 * r0[ox] + w01 * r0[ox + 1] + w02 * r0[ox + 2] +
                w10 * r1[ox] + w11 * r1[ox + 1] + w12 * r1[ox + 2] +
                w20 * r2[ox] + w21 * r2[ox + 1] + w22 * r2[ox + 2];
    }
  }
}

void conv_fwd(const double* __restrict x, const double* __restrict w, double* __restrict y,
              const ConvDims& d) {
  const std::int64_t hw = d.h * d.w;
  const std::int64_t kk = d.k * d.k;
  PaddedPlane xp(d.h, d.w, d.pad);
  std::vector<double> acc(static_cast<std::size_t>(d.w));
  for (std::int64_t nn = 0; nn < d.n; ++nn)
    for (std::int64_t ic = 0; ic < d.ci; ++ic) {
      xp.load(x + (nn * d.ci + ic) * hw);
      for (std::int64_t oc = 0; oc < d.co; ++oc) {
        double* ydst = y + (nn * d.co + oc) * hw;
        const double* wk = w + (oc * d.ci + ic) * kk;
        if (d.k == 3) {
          conv3_rows(xp.row(-1), d.w + 2, wk, ydst, d.h, d.w);
          continue;
        }
        for (std::int64_t oy = 0; oy < d.h; ++oy) {
          double* __restrict a = acc.data();
          for (std::int64_t ox = 0; ox < d.w; ++ox) a[ox] = 0.0;
          for (std::int64_t ky = 0; ky < d.k; ++ky) {
            const double* xr = xp.row(oy + ky - d.pad);
            for (std::int64_t kx = 0; kx < d.k; ++kx) {
              const double wv = wk[ky * d.k + kx];
              const double* xs = xr + kx;
              for (std::int64_t ox = 0; ox < d.w; ++ox) a[ox] += wv * xs[ox];
            }
          }
          double* yr = ydst + oy * d.w;
          for (std::int64_t ox = 0; ox < d.w; ++ox) yr[ox] += a[ox];
        }
      }
    }
}

// dx[n,ci] += sum_co,k g[n,co,·-ky+p,·-kx+p] * w[co,ci,ky,kx]
// Same structure as conv_fwd with a flipped kernel and swapped channel roles.
void conv_dx(const double* __restrict g, const double* __restrict w, double* __restrict dx,
             const ConvDims& d) {
  const std::int64_t hw = d.h * d.w;
  const std::int64_t kk = d.k * d.k;
  PaddedPlane gp(d.h, d.w, d.pad);
  std::vector<double> acc(static_cast<std::size_t>(d.w));
  std::vector<double> wflip(static_cast<std::size_t>(kk));
  for (std::int64_t nn = 0; nn < d.n; ++nn)
    for (std::int64_t oc = 0; oc < d.co; ++oc) {
      gp.load(g + (nn * d.co + oc) * hw);
      for (std::int64_t ic = 0; ic < d.ci; ++ic) {
        double* dst = dx + (nn * d.ci + ic) * hw;
        const double* wk = w + (oc * d.ci + ic) * kk;
        if (d.k == 3) {
          // correlation with the 180-degree rotated kernel
          for (std::int64_t i = 0; i < 9; ++i) wflip[static_cast<std::size_t>(i)] = wk[8 - i];
          conv3_rows(gp.row(-1), d.w + 2, wflip.data(), dst, d.h, d.w);
          continue;
        }
        for (std::int64_t iy = 0; iy < d.h; ++iy) {
          double* __restrict a = acc.data();
          for (std::int64_t ix = 0; ix < d.w; ++ix) a[ix] = 0.0;
          for (std::int64_t ky = 0; ky < d.k; ++ky) {
            const double* gr = gp.row(iy + d.pad - ky);  // note reversed offset
            for (std::int64_t kx = 0; kx < d.k; ++kx) {
              const double wv = wk[ky * d.k + kx];
              const double* gs = gr + (d.k - 1 - kx);
              for (std::int64_t ix = 0; ix < d.w; ++ix) a[ix] += wv * gs[ix];
            }
          }
          double* dr = dst + iy * d.w;
          for (std::int64_t ix = 0; ix < d.w; ++ix) dr[ix] += a[ix];
        }
      }
    }
}

// dw[co,ci,ky,kx] += sum_n,oy,ox g[n,co,oy,ox] * x[n,ci,oy+ky-p,ox+kx-p]
void conv_dw(const double* __restrict g, const double* __restrict x, double* __restrict dw,
             const ConvDims& d) {
  const std::int64_t hw = d.h * d.w;
  const std::int64_t kk = d.k * d.k;
  PaddedPlane xp(d.h, d.w, d.pad);
  std::vector<double> acc(static_cast<std::size_t>(kk));
  for (std::int64_t nn = 0; nn < d.n; ++nn)
    for (std::int64_t ic = 0; ic < d.ci; ++ic) {
      xp.load(x + (nn * d.ci + ic) * hw);
      for (std::int64_t oc = 0; oc < d.co; ++oc) {
        const double* gsrc = g + (nn * d.co + oc) * hw;
        double* __restrict a = acc.data();
        for (std::int64_t i = 0; i < kk; ++i) a[i] = 0.0;
        if (d.k == 3) {
          const std::int64_t pw = d.w + 2;
          double s00 = 0, s01 = 0, s02 = 0, s10 = 0, s11 = 0, s12 = 0, s20 = 0, s21 = 0, s22 = 0;
          for (std::int64_t oy = 0; oy < d.h; ++oy) {
            const double* gr = gsrc + oy * d.w;
            const double* r0 = xp.row(oy - 1);
            const double* r1 = r0 + pw;
            const double* r2 = r1 + pw;
            for (std::int64_t ox = 0; ox < d.w; ++ox) {
              const double gv = gr[ox];
              s00 += gv * r0[ox]; s01 += gv * r0[ox + 1]; s02 += gv * r0[ox + 2];
              s10 += gv * r1[ox]; s11 += gv * r1[ox + 1]; s12 += gv * r1[ox + 2];
              s20 += gv * r2[ox]; s21 += gv * r2[ox + 1]; s22 += gv * r2[ox + 2];
            }
          }
          a[0] = s00; a[1] = s01; a[2] = s02;
          a[3] = s10; a[4] = s11; a[5] = s12;
          a[6] = s20; a[7] = s21; a[8] = s22;
        } else {
          for (std::int64_t oy = 0; oy < d.h; ++oy) {
            const double* gr = gsrc + oy * d.w;
            for (std::int64_t ky = 0; ky < d.k; ++ky) {
              const double* xr = xp.row(oy + ky - d.pad);
              for (std::int64_t kx = 0; kx < d.k; ++kx) {
                const double* xs = xr + kx;
                double s = 0.0;
                for (std::int64_t ox = 0; ox < d.w; ++ox) s += gr[ox] * xs[ox];
                a[ky * d.k + kx] += s;
              }
            }
          }
        }
        double* wk = dw + (oc * d.ci + ic) * kk;
        for (std::int64_t i = 0; i < kk; ++i) wk[i] += a[i];
      }
    }
}

ConvDims conv_check(const Tensor& x, const Tensor& w, bool transpose) {
  require(x.rank() == 4 && w.rank() == 4, ErrorKind::ShapeMismatch, "conv needs rank-4 input and kernel");
  const std::int64_t k = w.extent(2);
  require(k == w.extent(3) && k % 2 == 1, ErrorKind::ShapeMismatch, "conv kernel must be square with odd size");
  ConvDims d;
  d.n = x.extent(0);
  d.h = x.extent(2);
  d.w = x.extent(3);
  d.k = k;
  d.pad = k / 2;
  if (!transpose) {
    require(w.extent(1) == x.extent(1), ErrorKind::ShapeMismatch,
            "conv2d channels: input " + shape_str(x.shape) + " kernel " + shape_str(w.shape));
    d.co = w.extent(0);
    d.ci = x.extent(1);
  } else {
    require(w.extent(0) == x.extent(1), ErrorKind::ShapeMismatch,
            "conv2d_transpose channels: input " + shape_str(x.shape) + " kernel " + shape_str(w.shape));
    d.co = x.extent(1);   // kernel's leading extent
    d.ci = w.extent(1);   // output channels of the transpose
  }
  return d;
}

}  // namespace

NodeId conv2d(Tape& t, NodeId input, NodeId kernel) {
  const Tensor& x = t.val(input);
  const Tensor& w = t.val(kernel);
  const ConvDims d = conv_check(x, w, false);
  Tensor out = Tensor::zeros({d.n, d.co, d.h, d.w});
  conv_fwd(x.data.data(), w.data.data(), out.data.data(), d);
  return t.emplace(std::move(out), [input, kernel, d](Tape& tp, NodeId self) {
    const double* g = tp.adj(self).data();
    conv_dx(g, tp.val(kernel).data.data(), tp.adj(input).data(), d);
    conv_dw(g, tp.val(input).data.data(), tp.adj(kernel).data(), d);
  });
}

// Adjoint of conv2d: kernel laid out [Ci,Co,K,K]; maps Ci-channel input to
// Co-channel output so that <conv2d(x,k), y> == <x, conv2d_transpose(y,k)>.
NodeId conv2d_transpose(Tape& t, NodeId input, NodeId kernel) {
  const Tensor& x = t.val(input);
  const Tensor& w = t.val(kernel);
  const ConvDims d = conv_check(x, w, true);
  Tensor out = Tensor::zeros({d.n, d.ci, d.h, d.w});
  conv_dx(x.data.data(), w.data.data(), out.data.data(), d);
  return t.emplace(std::move(out), [input, kernel, d](Tape& tp, NodeId self) {
    const double* g = tp.adj(self).data();
    conv_fwd(g, tp.val(kernel).data.data(), tp.adj(input).data(), d);
    conv_dw(tp.val(input).data.data(), g, tp.adj(kernel).data(), d);
  });
}

// ---- batch normalization --------------------------------------------------------

NodeId batch_norm(Tape& t, NodeId x, NodeId gamma, NodeId beta, BatchNormState& state, bool train,
                  double momentum, double eps) {
  const Tensor& xv = t.val(x);
  const Tensor& gv = t.val(gamma);
  const Tensor& bv = t.val(beta);
  require(xv.rank() == 4, ErrorKind::ShapeMismatch, "batch_norm expects [N,C,H,W]");
  const std::int64_t n = xv.extent(0), c = xv.extent(1), h = xv.extent(2), w = xv.extent(3);
  require(gv.rank() == 1 && gv.extent(0) == c && bv.rank() == 1 && bv.extent(0) == c,
          ErrorKind::ShapeMismatch, "batch_norm gamma/beta must have length C");
  require(state.running_mean.numel() == c && state.running_var.numel() == c,
          ErrorKind::ShapeMismatch, "batch_norm running stats must have length C");

  const std::int64_t hw = h * w;
  const std::int64_t m = n * hw;  // elements per channel
  if (train) require(m >= 2, ErrorKind::DegenerateBatch, "train-mode batch_norm needs N*H*W >= 2");

  std::vector<double> mean(static_cast<std::size_t>(c)), invstd(static_cast<std::size_t>(c));
  if (train) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double sum = 0.0;
      for (std::int64_t nn = 0; nn < n; ++nn) {
        const double* p = xv.data.data() + (nn * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) sum += p[i];
      }
      const double mu = sum / static_cast<double>(m);
      double var = 0.0;
      for (std::int64_t nn = 0; nn < n; ++nn) {
        const double* p = xv.data.data() + (nn * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const double dv = p[i] - mu;
          var += dv * dv;
        }
      }
      var /= static_cast<double>(m);
      require(std::isfinite(var) && var >= 0.0 && var + eps > 0.0, ErrorKind::DegenerateBatch,
              "batch_norm variance degenerate in channel " + std::to_string(ch));
      mean[static_cast<std::size_t>(ch)] = mu;
      invstd[static_cast<std::size_t>(ch)] = 1.0 / std::sqrt(var + eps);
      state.running_mean.data[static_cast<std::size_t>(ch)] =
          momentum * state.running_mean.data[static_cast<std::size_t>(ch)] + (1.0 - momentum) * mu;
      state.running_var.data[static_cast<std::size_t>(ch)] =
          momentum * state.running_var.data[static_cast<std::size_t>(ch)] + (1.0 - momentum) * var;
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean[static_cast<std::size_t>(ch)] = state.running_mean.data[static_cast<std::size_t>(ch)];
      const double var = state.running_var.data[static_cast<std::size_t>(ch)];
      require(std::isfinite(var) && var + eps > 0.0, ErrorKind::DegenerateBatch,
              "batch_norm running variance degenerate in channel " + std::to_string(ch));
      invstd[static_cast<std::size_t>(ch)] = 1.0 / std::sqrt(var + eps);
    }
  }

  Tensor out = Tensor::zeros(xv.shape);
  auto xhat = std::make_shared<std::vector<double>>(xv.data.size());
  for (std::int64_t nn = 0; nn < n; ++nn)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double mu = mean[static_cast<std::size_t>(ch)];
      const double is = invstd[static_cast<std::size_t>(ch)];
      const double ga = gv.data[static_cast<std::size_t>(ch)];
      const double be = bv.data[static_cast<std::size_t>(ch)];
      const std::int64_t base = (nn * c + ch) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        const double xh = (xv.data[static_cast<std::size_t>(base + i)] - mu) * is;
        (*xhat)[static_cast<std::size_t>(base + i)] = xh;
        out.data[static_cast<std::size_t>(base + i)] = ga * xh + be;
      }
    }

  auto invstd_sp = std::make_shared<std::vector<double>>(std::move(invstd));
  return t.emplace(std::move(out), [x, gamma, beta, xhat, invstd_sp, train, n, c, hw](Tape& tp, NodeId self) {
    const auto& g = tp.adj(self);
    const auto& gv2 = tp.val(gamma).data;
    auto& gx = tp.adj(x);
    auto& gg = tp.adj(gamma);
    auto& gb = tp.adj(beta);
    const double mcount = static_cast<double>(n * hw);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::int64_t nn = 0; nn < n; ++nn) {
        const std::int64_t base = (nn * c + ch) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const double gi = g[static_cast<std::size_t>(base + i)];
          sum_g += gi;
          sum_gx += gi * (*xhat)[static_cast<std::size_t>(base + i)];
        }
      }
      gb[static_cast<std::size_t>(ch)] += sum_g;
      gg[static_cast<std::size_t>(ch)] += sum_gx;
      const double ga = gv2[static_cast<std::size_t>(ch)];
      const double is = (*invstd_sp)[static_cast<std::size_t>(ch)];
      if (train) {
        const double mg = sum_g / mcount;
        const double mgx = sum_gx / mcount;
        for (std::int64_t nn = 0; nn < n; ++nn) {
          const std::int64_t base = (nn * c + ch) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            const double gi = g[static_cast<std::size_t>(base + i)];
            const double xh = (*xhat)[static_cast<std::size_t>(base + i)];
            gx[static_cast<std::size_t>(base + i)] += ga * is * (gi - mg - xh * mgx);
          }
        }
      } else {
        for (std::int64_t nn = 0; nn < n; ++nn) {
          const std::int64_t base = (nn * c + ch) * hw;
          for (std::int64_t i = 0; i < hw; ++i)
            gx[static_cast<std::size_t>(base + i)] += ga * is * g[static_cast<std::size_t>(base + i)];
        }
      }
    }
  });
}

// ---- reductions -------------------------------------------------------------------

NodeId reduce(Tape& t, ReduceKind kind, NodeId x, std::vector<std::int64_t> axes) {
  const Tensor& xv = t.val(x);
  const std::int64_t rank = xv.rank();
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (auto a : axes)
    require(a >= 0 && a < rank, ErrorKind::IndexOutOfRange, "reduce axis out of range");

  if (axes.empty()) {  // identity reduction
    Tensor out = xv;
    out.grad.clear();
    return t.emplace(std::move(out), [x](Tape& tp, NodeId self) {
      const auto& g = tp.adj(self);
      auto& gx = tp.adj(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }

  std::vector<bool> reduced(static_cast<std::size_t>(rank), false);
  for (auto a : axes) reduced[static_cast<std::size_t>(a)] = true;

  Shape out_shape;
  std::int64_t count = 1;
  for (std::int64_t d = 0; d < rank; ++d) {
    if (reduced[static_cast<std::size_t>(d)]) count *= xv.extent(d);
    else out_shape.push_back(xv.extent(d));
  }
  if (out_shape.empty()) out_shape = {1};

  // out_stride[d]: stride of dim d inside the output index (0 when reduced).
  std::vector<std::int64_t> out_stride(static_cast<std::size_t>(rank), 0);
  {
    std::int64_t s = 1;
    for (std::int64_t d = rank - 1; d >= 0; --d) {
      if (!reduced[static_cast<std::size_t>(d)]) {
        out_stride[static_cast<std::size_t>(d)] = s;
        s *= xv.extent(d);
      }
    }
  }

  const std::size_t in_n = xv.data.size();
  // Precompute the output index for every input element via an odometer walk.
  auto out_index = std::make_shared<std::vector<std::int64_t>>(in_n);
  {
    std::vector<std::int64_t> coord(static_cast<std::size_t>(rank), 0);
    std::int64_t oi = 0;
    for (std::size_t i = 0; i < in_n; ++i) {
      (*out_index)[i] = oi;
      for (std::int64_t d = rank - 1; d >= 0; --d) {
        auto& cd = coord[static_cast<std::size_t>(d)];
        oi += out_stride[static_cast<std::size_t>(d)];
        if (++cd < xv.extent(d)) break;
        oi -= out_stride[static_cast<std::size_t>(d)] * xv.extent(d);
        cd = 0;
      }
    }
  }

  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t i = 0; i < in_n; ++i) {
    const double v = xv.data[i];
    double& o = out.data[static_cast<std::size_t>((*out_index)[i])];
    switch (kind) {
      case ReduceKind::Sum:
      case ReduceKind::Mean: o += v; break;
      case ReduceKind::L1Norm: o += std::abs(v); break;
      case ReduceKind::L2Norm: o += v * v; break;
    }
  }
  if (kind == ReduceKind::Mean)
    for (auto& o : out.data) o /= static_cast<double>(count);
  if (kind == ReduceKind::L2Norm)
    for (auto& o : out.data) o = std::sqrt(o);

  auto out_vals = std::make_shared<std::vector<double>>(out.data);
  return t.emplace(std::move(out), [x, kind, out_index, out_vals, count](Tape& tp, NodeId self) {
    const auto& g = tp.adj(self);
    const auto& xd = tp.val(x).data;
    auto& gx = tp.adj(x);
    for (std::size_t i = 0; i < xd.size(); ++i) {
      const double go = g[static_cast<std::size_t>((*out_index)[i])];
      switch (kind) {
        case ReduceKind::Sum: gx[i] += go; break;
        case ReduceKind::Mean: gx[i] += go / static_cast<double>(count); break;
        case ReduceKind::L1Norm:
          gx[i] += xd[i] > 0.0 ? go : (xd[i] < 0.0 ? -go : 0.0);
          break;
        case ReduceKind::L2Norm: {
          const double norm = (*out_vals)[static_cast<std::size_t>((*out_index)[i])];
          if (norm > 0.0) gx[i] += go * xd[i] / norm;
          break;
        }
      }
    }
  });
}

NodeId reduce_all(Tape& t, ReduceKind kind, NodeId x) {
  std::vector<std::int64_t> axes(static_cast<std::size_t>(t.val(x).rank()));
  std::iota(axes.begin(), axes.end(), 0);
  return reduce(t, kind, x, std::move(axes));
}

NodeId global_avg_pool(Tape& t, NodeId x) {
  require(t.val(x).rank() == 4, ErrorKind::ShapeMismatch, "global_avg_pool expects [N,C,H,W]");
  return reduce(t, ReduceKind::Mean, x, {2, 3});
}

NodeId reshape(Tape& t, NodeId x, Shape shape) {
  Tensor out = t.val(x).reshaped(std::move(shape));
  return t.emplace(std::move(out), [x](Tape& tp, NodeId self) {
    const auto& g = tp.adj(self);
    auto& gx = tp.adj(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// ---- rows ----------------------------------------------------------------------

NodeId row_l2_normalize(Tape& t, NodeId x, double eps) {
  const Tensor& xv = t.val(x);
  require(xv.rank() == 2, ErrorKind::ShapeMismatch, "row_l2_normalize expects [n,d]");
  const std::int64_t n = xv.extent(0), d = xv.extent(1);
  Tensor out = Tensor::zeros(xv.shape);
  auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const double* row = xv.data.data() + i * d;
    double sq = 0.0;
    for (std::int64_t j = 0; j < d; ++j) sq += row[j] * row[j];
    const double norm = std::sqrt(sq);
    require(eps > 0.0 || norm > 1e-300, ErrorKind::ZeroNormFactor,
            "zero-norm row " + std::to_string(i) + " cannot be normalized");
    (*norms)[static_cast<std::size_t>(i)] = norm;
    const double denom = norm + eps;
    double* orow = out.data.data() + i * d;
    for (std::int64_t j = 0; j < d; ++j) orow[j] = row[j] / denom;
  }
  return t.emplace(std::move(out), [x, norms, eps, n, d](Tape& tp, NodeId self) {
    const auto& g = tp.adj(self);
    const auto& xd = tp.val(x).data;
    auto& gx = tp.adj(x);
    for (std::int64_t i = 0; i < n; ++i) {
      const double norm = (*norms)[static_cast<std::size_t>(i)];
      const double denom = norm + eps;
      const double* row = xd.data() + i * d;
      const double* grow = g.data() + i * d;
      double dot = 0.0;
      for (std::int64_t j = 0; j < d; ++j) dot += grow[j] * row[j];
      const double coef = (norm > 0.0) ? dot / (norm * denom * denom) : 0.0;
      double* dst = gx.data() + i * d;
      for (std::int64_t j = 0; j < d; ++j) dst[j] += grow[j] / denom - row[j] * coef;
    }
  });
}

// ---- channel gather ----------------------------------------------------------------

NodeId gather_channels(Tape& t, NodeId x, std::span<const std::int64_t> channels) {
  const Tensor& xv = t.val(x);
  require(xv.rank() == 4, ErrorKind::ShapeMismatch, "gather_channels expects [N,C,H,W]");
  const std::int64_t n = xv.extent(0), c = xv.extent(1), hw = xv.extent(2) * xv.extent(3);
  require(!channels.empty(), ErrorKind::IndexOutOfRange, "empty channel selection");
  for (auto ch : channels)
    require(ch >= 0 && ch < c, ErrorKind::IndexOutOfRange,
            "channel " + std::to_string(ch) + " out of range [0," + std::to_string(c) + ")");
  const std::int64_t cs = static_cast<std::int64_t>(channels.size());
  auto idx = std::make_shared<std::vector<std::int64_t>>(channels.begin(), channels.end());

  Tensor out = Tensor::zeros({n, cs, xv.extent(2), xv.extent(3)});
  for (std::int64_t nn = 0; nn < n; ++nn)
    for (std::int64_t j = 0; j < cs; ++j)
      std::memcpy(out.data.data() + (nn * cs + j) * hw,
                  xv.data.data() + (nn * c + (*idx)[static_cast<std::size_t>(j)]) * hw,
                  static_cast<std::size_t>(hw) * sizeof(double));

  return t.emplace(std::move(out), [x, idx, n, c, cs, hw](Tape& tp, NodeId self) {
    const auto& g = tp.adj(self);
    auto& gx = tp.adj(x);
    for (std::int64_t nn = 0; nn < n; ++nn)
      for (std::int64_t j = 0; j < cs; ++j) {
        const double* src = g.data() + (nn * cs + j) * hw;
        double* dst = gx.data() + (nn * c + (*idx)[static_cast<std::size_t>(j)]) * hw;
        for (std::int64_t i = 0; i < hw; ++i) dst[i] += src[i];
      }
  });
}

// ---- softmax cross entropy -----------------------------------------------------------

NodeId softmax_cross_entropy(Tape& t, NodeId logits, std::span<const int> labels) {
  const Tensor& lv = t.val(logits);
  require(lv.rank() == 2, ErrorKind::ShapeMismatch, "softmax_cross_entropy expects [N,K] logits");
  const std::int64_t n = lv.extent(0), k = lv.extent(1);
  require(static_cast<std::int64_t>(labels.size()) == n, ErrorKind::ShapeMismatch,
          "label count does not match batch size");
  for (auto lab : labels)
    require(lab >= 0 && lab < k, ErrorKind::LabelOutOfRange,
            "label " + std::to_string(lab) + " outside [0," + std::to_string(k) + ")");

  auto probs = std::make_shared<std::vector<double>>(lv.data.size());
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double* row = lv.data.data() + i * k;
    double mx = row[0];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    for (std::int64_t j = 0; j < k; ++j)
      (*probs)[static_cast<std::size_t>(i * k + j)] = std::exp(row[j] - lse);
    total += lse - row[labels[static_cast<std::size_t>(i)]];
  }

  auto labels_copy = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  return t.emplace(Tensor::scalar(total / static_cast<double>(n)),
                   [logits, probs, labels_copy, n, k](Tape& tp, NodeId self) {
                     const double g = tp.adj(self)[0];
                     auto& gx = tp.adj(logits);
                     const double scale = g / static_cast<double>(n);
                     for (std::int64_t i = 0; i < n; ++i)
                       for (std::int64_t j = 0; j < k; ++j) {
                         double p = (*probs)[static_cast<std::size_t>(i * k + j)];
                         if (j == (*labels_copy)[static_cast<std::size_t>(i)]) p -= 1.0;
                         gx[static_cast<std::size_t>(i * k + j)] += scale * p;
                       }
                   });
}

// ---- column centering -------------------------------------------------------------

NodeId center_columns(Tape& t, NodeId x) {
  const Tensor& xv = t.val(x);
  require(xv.rank() == 2, ErrorKind::ShapeMismatch, "center_columns expects [n,d]");
  const std::int64_t n = xv.extent(0), d = xv.extent(1);
  Tensor out = Tensor::zeros(xv.shape);
  for (std::int64_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::int64_t i = 0; i < n; ++i) mean += xv.data[static_cast<std::size_t>(i * d + j)];
    mean /= static_cast<double>(n);
    for (std::int64_t i = 0; i < n; ++i)
      out.data[static_cast<std::size_t>(i * d + j)] = xv.data[static_cast<std::size_t>(i * d + j)] - mean;
  }
  return t.emplace(std::move(out), [x, n, d](Tape& tp, NodeId self) {
    const auto& g = tp.adj(self);
    auto& gx = tp.adj(x);
    for (std::int64_t j = 0; j < d; ++j) {
      double mean = 0.0;
      for (std::int64_t i = 0; i < n; ++i) mean += g[static_cast<std::size_t>(i * d + j)];
      mean /= static_cast<double>(n);
      for (std::int64_t i = 0; i < n; ++i)
        gx[static_cast<std::size_t>(i * d + j)] += g[static_cast<std::size_t>(i * d + j)] - mean;
    }
  });
}

}  // namespace iekd::ops
