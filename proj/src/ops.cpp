#include "fedmenu/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <string>

#include "fedmenu/errors.hpp"

namespace fedmenu::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, oh, ow;
  std::size_t k() const { return cin * kh * kw; }
  std::size_t n() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  /// Stride 1 with "same" padding: the input gradient is itself such a convolution.
  bool same_size() const { return stride == 1 && kh == kw && 2 * pad + 1 == kh; }
};

// Unfolds one image [cin,h,w] into a [cin*kh*kw, oh*ow] column matrix.
void im2col(const double* x, const ConvGeometry& g, double* col) {
  const std::size_t n = g.n();
  const long pad = static_cast<long>(g.pad);
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const double* plane = x + ci * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((ci * g.kh + ki) * g.kw + kj) * n;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          double* dst = row + oy * g.ow;
          const long iy = static_cast<long>(oy * g.stride) - pad + static_cast<long>(ki);
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = plane + iy * g.w;
          if (g.stride == 1) {
            // ix = ox - pad + kj must lie in [0, w)
            const long shift = static_cast<long>(kj) - pad;
            const long lo = std::clamp<long>(-shift, 0, static_cast<long>(g.ow));
            const long hi = std::clamp<long>(static_cast<long>(g.w) - shift, lo, static_cast<long>(g.ow));
            std::fill(dst, dst + lo, 0.0);
            std::memcpy(dst + lo, src + lo + shift, static_cast<std::size_t>(hi - lo) * sizeof(double));
            std::fill(dst + hi, dst + g.ow, 0.0);
          } else {
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const long ix = static_cast<long>(ox * g.stride) - pad + static_cast<long>(kj);
              dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters a column matrix back into an image, accumulating.
void col2im(const double* col, const ConvGeometry& g, double* x) {
  const std::size_t n = g.n();
  const long pad = static_cast<long>(g.pad);
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    double* plane = x + ci * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((ci * g.kh + ki) * g.kw + kj) * n;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride) - pad + static_cast<long>(ki);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          const double* src = row + oy * g.ow;
          double* dst = plane + iy * g.w;
          if (g.stride == 1) {
            const long shift = static_cast<long>(kj) - pad;
            const long lo = std::clamp<long>(-shift, 0, static_cast<long>(g.ow));
            const long hi = std::clamp<long>(static_cast<long>(g.w) - shift, lo, static_cast<long>(g.ow));
            for (long ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
            continue;
          }
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride) - pad + static_cast<long>(kj);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw DimensionError(std::string(what) + ": shape " + shape_string(a) + " vs " + shape_string(b));
}


using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

// Layout for stride-1 "same" convolutions computed as kh*kw shifted GEMMs over a zero-padded
// image. Outputs live on a grid of width wp; the last kw-1 columns of each row are scratch.
struct ShiftPlan {
  std::size_t h, w, k, pad, hp, wp;
  explicit ShiftPlan(const ConvGeometry& g)
      : h(g.h), w(g.w), k(g.kh), pad(g.pad), hp(g.h + 2 * g.pad), wp(g.w + 2 * g.pad) {}
  std::size_t plane() const { return hp * wp; }
  std::size_t span() const { return h * wp; }
  std::size_t buffer(std::size_t channels) const { return channels * plane() + k; }
  std::size_t offset(std::size_t ki, std::size_t kj) const { return ki * wp + kj; }
};

void pad_planes(const double* src, std::size_t channels, const ShiftPlan& p, double* dst) {
  std::fill(dst, dst + p.buffer(channels), 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < p.h; ++y) {
      std::memcpy(dst + c * p.plane() + (y + p.pad) * p.wp + p.pad, src + (c * p.h + y) * p.w, p.w * sizeof(double));
    }
  }
}

// Per-offset weight slices: slices[ki*k+kj](co, ci) = w[co, ci, ki, kj], optionally flipped and transposed.
std::vector<RowMat> weight_slices(const Tensor& wt, bool flip_transpose) {
  const std::size_t cout = wt.dim(0), cin = wt.dim(1), k = wt.dim(2);
  std::vector<RowMat> out(k * k);
  for (std::size_t ki = 0; ki < k; ++ki) {
    for (std::size_t kj = 0; kj < k; ++kj) {
      RowMat& m = out[ki * k + kj];
      if (flip_transpose) {
        m.resize(static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(cout));
      } else {
        m.resize(static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin));
      }
      for (std::size_t co = 0; co < cout; ++co) {
        for (std::size_t ci = 0; ci < cin; ++ci) {
          if (flip_transpose) {
            m(static_cast<Eigen::Index>(ci), static_cast<Eigen::Index>(co)) =
                wt[((co * cin + ci) * k + (k - 1 - ki)) * k + (k - 1 - kj)];
          } else {
            m(static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(ci)) = wt[((co * cin + ci) * k + ki) * k + kj];
          }
        }
      }
    }
  }
  return out;
}

// acc[cout, span] = sum over offsets of slices * shifted padded input.
void shifted_gemm(const std::vector<RowMat>& slices, const double* padded, std::size_t cin, const ShiftPlan& p,
                  double* acc, std::size_t cout) {
  StridedMap o(acc, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(p.span()),
               Eigen::OuterStride<>(static_cast<Eigen::Index>(p.span())));
  o.setZero();
  for (std::size_t ki = 0; ki < p.k; ++ki) {
    for (std::size_t kj = 0; kj < p.k; ++kj) {
      ConstStridedMap in(padded + p.offset(ki, kj), static_cast<Eigen::Index>(cin),
                         static_cast<Eigen::Index>(p.span()), Eigen::OuterStride<>(static_cast<Eigen::Index>(p.plane())));
      o.noalias() += slices[ki * p.k + kj] * in;
    }
  }
}

Var conv_same(const Var& input, const Var& kernel, const Var& bias, const ConvGeometry& g) {
  const Tensor& x = input.value();
  const Tensor& bt = bias.value();
  const ShiftPlan p(g);
  const std::size_t n = g.h * g.w;
  Tensor out({g.batch, g.cout, g.h, g.w});
  const auto slices = weight_slices(kernel.value(), false);
  std::vector<double> padded(p.buffer(g.cin)), acc(g.cout * p.span());
  for (std::size_t b = 0; b < g.batch; ++b) {
    pad_planes(x.data().data() + b * g.cin * n, g.cin, p, padded.data());
    shifted_gemm(slices, padded.data(), g.cin, p, acc.data(), g.cout);
    double* ob = out.data().data() + b * g.cout * n;
    for (std::size_t co = 0; co < g.cout; ++co) {
      for (std::size_t y = 0; y < g.h; ++y) {
        const double* src = acc.data() + co * p.span() + y * p.wp;
        double* dst = ob + (co * g.h + y) * g.w;
        for (std::size_t xx = 0; xx < g.w; ++xx) dst[xx] = src[xx] + bt[co];
      }
    }
  }
  return input.tape().record(
      "conv2d", std::move(out), {input, kernel, bias}, [input, kernel, bias, g](Tape& tape, std::size_t self) {
        const ShiftPlan p(g);
        const std::size_t n = g.h * g.w;
        const Tensor& gout = tape.grad(self);
        const Tensor& x = tape.value(input.id());
        const bool need_x = tape.requires_grad(input.id());
        const bool need_w = tape.requires_grad(kernel.id());
        const bool need_b = tape.requires_grad(bias.id());
        std::vector<RowMat> flipped;
        if (need_x) flipped = weight_slices(tape.value(kernel.id()), true);
        std::vector<RowMat> dslices;
        if (need_w) dslices.assign(g.kh * g.kw, RowMat::Zero(static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.cin)));
        std::vector<double> padded_x(need_w ? p.buffer(g.cin) : 0), gspan(need_w ? g.cout * p.span() : 0);
        std::vector<double> padded_g(need_x ? p.buffer(g.cout) : 0), acc(need_x ? g.cin * p.span() : 0);
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* gb = gout.data().data() + b * g.cout * n;
          if (need_b) {
            Tensor& db = tape.grad(bias.id());
            for (std::size_t co = 0; co < g.cout; ++co) {
              double s = 0.0;
              for (std::size_t i = 0; i < n; ++i) s += gb[co * n + i];
              db[co] += s;
            }
          }
          if (need_w) {
            pad_planes(x.data().data() + b * g.cin * n, g.cin, p, padded_x.data());
            std::fill(gspan.begin(), gspan.end(), 0.0);
            for (std::size_t co = 0; co < g.cout; ++co) {
              for (std::size_t y = 0; y < g.h; ++y) {
                std::memcpy(gspan.data() + co * p.span() + y * p.wp, gb + (co * g.h + y) * g.w, g.w * sizeof(double));
              }
            }
            ConstStridedMap gm(gspan.data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(p.span()),
                               Eigen::OuterStride<>(static_cast<Eigen::Index>(p.span())));
            for (std::size_t ki = 0; ki < g.kh; ++ki) {
              for (std::size_t kj = 0; kj < g.kw; ++kj) {
                ConstStridedMap in(padded_x.data() + p.offset(ki, kj), static_cast<Eigen::Index>(g.cin),
                                   static_cast<Eigen::Index>(p.span()),
                                   Eigen::OuterStride<>(static_cast<Eigen::Index>(p.plane())));
                dslices[ki * g.kw + kj].noalias() += gm * in.transpose();
              }
            }
          }
          if (need_x) {
            pad_planes(gb, g.cout, p, padded_g.data());
            shifted_gemm(flipped, padded_g.data(), g.cout, p, acc.data(), g.cin);
            double* dxb = tape.grad(input.id()).data().data() + b * g.cin * n;
            for (std::size_t ci = 0; ci < g.cin; ++ci) {
              for (std::size_t y = 0; y < g.h; ++y) {
                const double* src = acc.data() + ci * p.span() + y * p.wp;
                double* dst = dxb + (ci * g.h + y) * g.w;
                for (std::size_t xx = 0; xx < g.w; ++xx) dst[xx] += src[xx];
              }
            }
          }
        }
        if (need_w) {
          Tensor& dw = tape.grad(kernel.id());
          for (std::size_t co = 0; co < g.cout; ++co) {
            for (std::size_t ci = 0; ci < g.cin; ++ci) {
              for (std::size_t kk = 0; kk < g.kh * g.kw; ++kk) {
                dw[(co * g.cin + ci) * g.kh * g.kw + kk] +=
                    dslices[kk](static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(ci));
              }
            }
          }
        }
      });
}

}  // namespace

Var conv2d(const Var& input, const Var& kernel, const Var& bias, int stride, int padding) {
  const Tensor& x = input.value();
  const Tensor& wt = kernel.value();
  const Tensor& bt = bias.value();
  require_rank4(x, "conv2d input");
  require_rank4(wt, "conv2d kernel");
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1, got " + std::to_string(stride));
  if (padding < 0) throw ConfigError("conv2d: padding must be >= 0, got " + std::to_string(padding));
  if (wt.dim(2) % 2 == 0 || wt.dim(3) % 2 == 0) {
    throw ConfigError("conv2d: kernel extent must be odd, got " + shape_string(wt.shape()));
  }
  if (wt.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(wt.dim(1)) + " input channels, input " +
                         shape_string(x.shape()) + " has " + std::to_string(x.dim(1)));
  }
  if (bt.rank() != 1 || bt.dim(0) != wt.dim(0)) {
    throw DimensionError("conv2d: bias " + shape_string(bt.shape()) + " does not match " +
                         std::to_string(wt.dim(0)) + " output channels");
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), wt.dim(0), wt.dim(2), wt.dim(3),
                 static_cast<std::size_t>(stride), static_cast<std::size_t>(padding), 0, 0};
  const long span_h = static_cast<long>(g.h + 2 * g.pad) - static_cast<long>(g.kh);
  const long span_w = static_cast<long>(g.w + 2 * g.pad) - static_cast<long>(g.kw);
  if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0) {
    throw ConfigError("conv2d: input " + shape_string(x.shape()) + " with kernel " + shape_string(wt.shape()) +
                      ", stride " + std::to_string(stride) + ", padding " + std::to_string(padding) +
                      " gives a non-integer output size");
  }
  g.oh = static_cast<std::size_t>(span_h / stride) + 1;
  g.ow = static_cast<std::size_t>(span_w / stride) + 1;
  if (g.same_size() && !g.pointwise()) return conv_same(input, kernel, bias, g);

  const std::size_t k = g.k();
  const std::size_t n = g.n();
  Tensor out({g.batch, g.cout, g.oh, g.ow});
  ConstMatMap wmat(wt.data().data(), g.cout, k);
  std::vector<double> col(g.pointwise() ? 0 : k * n);
  for (std::size_t b = 0; b < g.batch; ++b) {
    const double* xb = x.data().data() + b * g.cin * g.h * g.w;
    const double* colp = xb;
    if (!g.pointwise()) {
      im2col(xb, g, col.data());
      colp = col.data();
    }
    MatMap ob(out.data().data() + b * g.cout * n, g.cout, n);
    ob.noalias() = wmat * ConstMatMap(colp, k, n);
    for (std::size_t co = 0; co < g.cout; ++co) ob.row(co).array() += bt[co];
  }

  return input.tape().record(
      "conv2d", std::move(out), {input, kernel, bias}, [input, kernel, bias, g](Tape& tape, std::size_t self) {
        const std::size_t k = g.k();
        const std::size_t n = g.n();
        const Tensor& gout = tape.grad(self);
        const Tensor& x = tape.value(input.id());
        const Tensor& wt = tape.value(kernel.id());
        ConstMatMap wmat(wt.data().data(), g.cout, k);
        const bool need_x = tape.requires_grad(input.id());
        const bool need_w = tape.requires_grad(kernel.id());
        const bool need_b = tape.requires_grad(bias.id());
        std::vector<double> col(g.pointwise() ? 0 : k * n);
        std::vector<double> dcol(g.pointwise() || !need_x ? 0 : k * n);
        for (std::size_t b = 0; b < g.batch; ++b) {
          ConstMatMap gb(gout.data().data() + b * g.cout * n, g.cout, n);
          const double* xb = x.data().data() + b * g.cin * g.h * g.w;
          if (need_w) {
            const double* colp = xb;
            if (!g.pointwise()) {
              im2col(xb, g, col.data());
              colp = col.data();
            }
            MatMap dw(tape.grad(kernel.id()).data().data(), g.cout, k);
            dw.noalias() += gb * ConstMatMap(colp, k, n).transpose();
          }
          if (need_b) {
            Tensor& db = tape.grad(bias.id());
            for (std::size_t co = 0; co < g.cout; ++co) {
              const double* row = gb.data() + co * n;
              db[co] += std::accumulate(row, row + n, 0.0);
            }
          }
          if (need_x) {
            double* dxb = tape.grad(input.id()).data().data() + b * g.cin * g.h * g.w;
            if (g.pointwise()) {
              MatMap(dxb, k, n).noalias() += wmat.transpose() * gb;
            } else {
              MatMap(dcol.data(), k, n).noalias() = wmat.transpose() * gb;
              col2im(dcol.data(), g, dxb);
            }
          }
        }
      });
}

Var instance_norm(const Var& input, double eps) {
  const Tensor& x = input.value();
  require_rank4(x, "instance_norm");
  if (!(eps > 0.0)) throw ConfigError("instance_norm: eps must be positive");
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t hw = x.dim(2) * x.dim(3);
  if (hw < 2) throw ConfigError("instance_norm: plane size must be >= 2, got " + shape_string(x.shape()));
  Tensor out(x.shape());
  std::vector<double> inv_std(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data().data() + p * hw;
    double* dst = out.data().data() + p * hw;
    double mean = 0.0;
    for (std::size_t i = 0; i < hw; ++i) mean += src[i];
    mean /= static_cast<double>(hw);
    double var = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      const double d = src[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(hw);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[p] = is;
    for (std::size_t i = 0; i < hw; ++i) dst[i] = (src[i] - mean) * is;
  }
  return input.tape().record("instance_norm", std::move(out), {input},
                             [input, inv_std = std::move(inv_std), planes, hw](Tape& tape, std::size_t self) {
                               const Tensor& gout = tape.grad(self);
                               const Tensor& y = tape.value(self);
                               Tensor& gx = tape.grad(input.id());
                               const double inv_n = 1.0 / static_cast<double>(hw);
                               for (std::size_t p = 0; p < planes; ++p) {
                                 const double* g = gout.data().data() + p * hw;
                                 const double* yp = y.data().data() + p * hw;
                                 double* dx = gx.data().data() + p * hw;
                                 double mg = 0.0, mgy = 0.0;
                                 for (std::size_t i = 0; i < hw; ++i) {
                                   mg += g[i];
                                   mgy += g[i] * yp[i];
                                 }
                                 mg *= inv_n;
                                 mgy *= inv_n;
                                 for (std::size_t i = 0; i < hw; ++i) dx[i] += inv_std[p] * (g[i] - mg - yp[i] * mgy);
                               }
                             });
}

Var leaky_relu(const Var& input, double slope) {
  if (!(slope >= 0.0 && slope < 1.0)) throw ConfigError("leaky_relu: slope must lie in [0, 1)");
  const Tensor& x = input.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] >= 0.0 ? x[i] : slope * x[i];
  return input.tape().record("leaky_relu", std::move(out), {input}, [input, slope](Tape& tape, std::size_t self) {
    const Tensor& g = tape.grad(self);
    const Tensor& x = tape.value(input.id());
    Tensor& gx = tape.grad(input.id());
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += x[i] >= 0.0 ? g[i] : slope * g[i];
  });
}

Var softmax_channels(const Var& input) {
  const Tensor& x = input.value();
  require_rank4(x, "softmax_channels");
  const std::size_t batch = x.dim(0), channels = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (channels < 2) throw ConfigError("softmax_channels: needs at least 2 channels");
  Tensor out(x.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = x.data().data() + b * channels * hw;
    double* dst = out.data().data() + b * channels * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      double m = src[i];
      for (std::size_t c = 1; c < channels; ++c) m = std::max(m, src[c * hw + i]);
      double s = 0.0;
      for (std::size_t c = 0; c < channels; ++c) {
        const double e = std::exp(src[c * hw + i] - m);
        dst[c * hw + i] = e;
        s += e;
      }
      const double inv = 1.0 / s;
      for (std::size_t c = 0; c < channels; ++c) dst[c * hw + i] *= inv;
    }
  }
  return input.tape().record("softmax_channels", std::move(out), {input},
                             [input, batch, channels, hw](Tape& tape, std::size_t self) {
                               const Tensor& g = tape.grad(self);
                               const Tensor& p = tape.value(self);
                               Tensor& gx = tape.grad(input.id());
                               for (std::size_t b = 0; b < batch; ++b) {
                                 const std::size_t off = b * channels * hw;
                                 for (std::size_t i = 0; i < hw; ++i) {
                                   double dot = 0.0;
                                   for (std::size_t c = 0; c < channels; ++c) {
                                     dot += g[off + c * hw + i] * p[off + c * hw + i];
                                   }
                                   for (std::size_t c = 0; c < channels; ++c) {
                                     const std::size_t j = off + c * hw + i;
                                     gx[j] += p[j] * (g[j] - dot);
                                   }
                                 }
                               }
                             });
}

Var maxpool2(const Var& input) {
  const Tensor& x = input.value();
  require_rank4(x, "maxpool2");
  const std::size_t h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ConfigError("maxpool2: spatial dims must be even, got " + shape_string(x.shape()));
  }
  const std::size_t planes = x.dim(0) * x.dim(1), oh = h / 2, ow = w / 2;
  Tensor out({x.dim(0), x.dim(1), oh, ow});
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t base = p * h * w + (2 * oy) * w + 2 * ox;
        const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cand[0];
        for (int c = 1; c < 4; ++c) {
          if (x[cand[c]] > x[best]) best = cand[c];
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  return input.tape().record("maxpool2", std::move(out), {input},
                             [input, argmax = std::move(argmax)](Tape& tape, std::size_t self) {
                               const Tensor& g = tape.grad(self);
                               Tensor& gx = tape.grad(input.id());
                               for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += g[o];
                             });
}

Var upsample2(const Var& input) {
  const Tensor& x = input.value();
  require_rank4(x, "upsample2");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({x.dim(0), x.dim(1), 2 * h, 2 * w});
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      const double* src = x.data().data() + (p * h + y / 2) * w;
      double* dst = out.data().data() + (p * 2 * h + y) * 2 * w;
      for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[xx] = src[xx / 2];
    }
  }
  return input.tape().record("upsample2", std::move(out), {input},
                             [input, planes, h, w](Tape& tape, std::size_t self) {
                               const Tensor& g = tape.grad(self);
                               Tensor& gx = tape.grad(input.id());
                               for (std::size_t p = 0; p < planes; ++p) {
                                 for (std::size_t y = 0; y < 2 * h; ++y) {
                                   const double* src = g.data().data() + (p * 2 * h + y) * 2 * w;
                                   double* dst = gx.data().data() + (p * h + y / 2) * w;
                                   for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[xx / 2] += src[xx];
                                 }
                               }
                             });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no inputs");
  const Tensor& first = parts.front().value();
  require_rank4(first, "concat_channels");
  std::size_t total_c = 0;
  for (const auto& p : parts) {
    const Tensor& t = p.value();
    require_rank4(t, "concat_channels");
    if (t.dim(0) != first.dim(0) || t.dim(2) != first.dim(2) || t.dim(3) != first.dim(3)) {
      throw DimensionError("concat_channels: part " + shape_string(t.shape()) + " does not match " +
                           shape_string(first.shape()) + " in batch/spatial dims");
    }
    total_c += t.dim(1);
  }
  const std::size_t batch = first.dim(0), hw = first.dim(2) * first.dim(3);
  Tensor out({batch, total_c, first.dim(2), first.dim(3)});
  for (std::size_t b = 0; b < batch; ++b) {
    double* dst = out.data().data() + b * total_c * hw;
    for (const auto& p : parts) {
      const Tensor& t = p.value();
      const std::size_t chunk = t.dim(1) * hw;
      std::memcpy(dst, t.data().data() + b * chunk, chunk * sizeof(double));
      dst += chunk;
    }
  }
  return parts.front().tape().record(
      "concat_channels", std::move(out), parts, [parts, batch, total_c, hw](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad(self);
        for (std::size_t b = 0; b < batch; ++b) {
          std::size_t offset = b * total_c * hw;
          for (const auto& p : parts) {
            const std::size_t chunk = tape.value(p.id()).dim(1) * hw;
            if (tape.requires_grad(p.id())) {
              double* dst = tape.grad(p.id()).data().data() + b * chunk;
              const double* src = g.data().data() + offset;
              for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
            }
            offset += chunk;
          }
        }
      });
}

Var channel_sum(const Var& input, const std::vector<std::size_t>& channels) {
  const Tensor& x = input.value();
  require_rank4(x, "channel_sum");
  if (channels.empty()) throw DimensionError("channel_sum: empty channel list");
  const std::size_t batch = x.dim(0), nc = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (auto c : channels) {
    if (c >= nc) throw DimensionError("channel_sum: channel " + std::to_string(c) + " out of range");
  }
  Tensor out({batch, 1, x.dim(2), x.dim(3)});
  for (std::size_t b = 0; b < batch; ++b) {
    double* dst = out.data().data() + b * hw;
    for (auto c : channels) {
      const double* src = x.data().data() + (b * nc + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] += src[i];
    }
  }
  return input.tape().record("channel_sum", std::move(out), {input},
                             [input, channels, batch, nc, hw](Tape& tape, std::size_t self) {
                               const Tensor& g = tape.grad(self);
                               Tensor& gx = tape.grad(input.id());
                               for (std::size_t b = 0; b < batch; ++b) {
                                 const double* src = g.data().data() + b * hw;
                                 for (auto c : channels) {
                                   double* dst = gx.data().data() + (b * nc + c) * hw;
                                   for (std::size_t i = 0; i < hw; ++i) dst[i] += src[i];
                                 }
                               }
                             });
}

Var binary_pair(const Var& input) {
  const Tensor& x = input.value();
  require_rank4(x, "binary_pair");
  if (x.dim(1) != 1) throw DimensionError("binary_pair: expects one channel, got " + shape_string(x.shape()));
  const std::size_t batch = x.dim(0), hw = x.dim(2) * x.dim(3);
  Tensor out({batch, 2, x.dim(2), x.dim(3)});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < hw; ++i) {
      const double v = x[b * hw + i];
      out[(b * 2) * hw + i] = 1.0 - v;
      out[(b * 2 + 1) * hw + i] = v;
    }
  }
  return input.tape().record("binary_pair", std::move(out), {input}, [input, batch, hw](Tape& tape, std::size_t self) {
    const Tensor& g = tape.grad(self);
    Tensor& gx = tape.grad(input.id());
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < hw; ++i) gx[b * hw + i] += g[(b * 2 + 1) * hw + i] - g[(b * 2) * hw + i];
    }
  });
}

Var clamp(const Var& input, double lo, double hi) {
  if (!(lo <= hi)) throw ConfigError("clamp: lo must not exceed hi");
  const Tensor& x = input.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i], lo, hi);
  return input.tape().record("clamp", std::move(out), {input}, [input, lo, hi](Tape& tape, std::size_t self) {
    const Tensor& g = tape.grad(self);
    const Tensor& x = tape.value(input.id());
    Tensor& gx = tape.grad(input.id());
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] >= lo && x[i] <= hi) gx[i] += g[i];
    }
  });
}

Var batch_select(const Var& input, const std::vector<std::size_t>& indices) {
  const Tensor& x = input.value();
  if (x.rank() < 1 || indices.empty()) throw DimensionError("batch_select: empty selection");
  const std::size_t stride = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = indices.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.dim(0)) throw DimensionError("batch_select: index out of range");
    std::memcpy(out.data().data() + i * stride, x.data().data() + indices[i] * stride, stride * sizeof(double));
  }
  return input.tape().record("batch_select", std::move(out), {input},
                             [input, indices, stride](Tape& tape, std::size_t self) {
                               const Tensor& g = tape.grad(self);
                               Tensor& gx = tape.grad(input.id());
                               for (std::size_t i = 0; i < indices.size(); ++i) {
                                 const double* src = g.data().data() + i * stride;
                                 double* dst = gx.data().data() + indices[i] * stride;
                                 for (std::size_t j = 0; j < stride; ++j) dst[j] += src[j];
                               }
                             });
}

Var cross_entropy(const Var& probs, const Tensor& onehot, double clamp_eps) {
  const Tensor& p = probs.value();
  require_rank4(p, "cross_entropy");
  require_same_shape(p.shape(), onehot.shape(), "cross_entropy");
  if (!(clamp_eps > 0.0 && clamp_eps <= 1e-3)) throw ConfigError("cross_entropy: clamp_eps must lie in (0, 1e-3]");
  const double pixels = static_cast<double>(p.dim(0) * p.dim(2) * p.dim(3));
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (onehot[i] != 0.0) total -= onehot[i] * std::log(std::max(p[i], clamp_eps));
  }
  return probs.tape().record("cross_entropy", Tensor::scalar(total / pixels), {probs},
                             [probs, onehot, clamp_eps, pixels](Tape& tape, std::size_t self) {
                               const double g = tape.grad(self)[0];
                               const Tensor& p = tape.value(probs.id());
                               Tensor& gp = tape.grad(probs.id());
                               for (std::size_t i = 0; i < p.size(); ++i) {
                                 if (onehot[i] != 0.0 && p[i] >= clamp_eps) gp[i] -= g * onehot[i] / (p[i] * pixels);
                               }
                             });
}

Var dice(const Var& probs, const Tensor& onehot, double smooth) {
  const Tensor& p = probs.value();
  require_rank4(p, "dice");
  require_same_shape(p.shape(), onehot.shape(), "dice");
  if (!(smooth > 0.0)) throw ConfigError("dice: smoothing constant must be positive");
  const std::size_t planes = p.dim(0) * p.dim(1), hw = p.dim(2) * p.dim(3);
  std::vector<double> inter(planes), denom(planes);
  double total = 0.0;
  for (std::size_t q = 0; q < planes; ++q) {
    double i_sum = 0.0, p_sum = 0.0, y_sum = 0.0;
    for (std::size_t i = q * hw; i < (q + 1) * hw; ++i) {
      i_sum += p[i] * onehot[i];
      p_sum += p[i];
      y_sum += onehot[i];
    }
    inter[q] = 2.0 * i_sum + smooth;
    denom[q] = p_sum + y_sum + smooth;
    total += 1.0 - inter[q] / denom[q];
  }
  const double inv_planes = 1.0 / static_cast<double>(planes);
  return probs.tape().record(
      "dice", Tensor::scalar(total * inv_planes), {probs},
      [probs, onehot, inter = std::move(inter), denom = std::move(denom), planes, hw, inv_planes](
          Tape& tape, std::size_t self) {
        const double g = tape.grad(self)[0] * inv_planes;
        Tensor& gp = tape.grad(probs.id());
        for (std::size_t q = 0; q < planes; ++q) {
          const double d2 = denom[q] * denom[q];
          for (std::size_t i = q * hw; i < (q + 1) * hw; ++i) {
            gp[i] -= g * (2.0 * onehot[i] * denom[q] - inter[q]) / d2;
          }
        }
      });
}

Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw DimensionError("weighted_sum: need one weight per term");
  }
  const Shape& shape = terms.front().shape();
  Tensor out(shape, 0.0);
  for (std::size_t t = 0; t < terms.size(); ++t) {
    const Tensor& v = terms[t].value();
    require_same_shape(shape, v.shape(), "weighted_sum");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += weights[t] * v[i];
  }
  return terms.front().tape().record("weighted_sum", std::move(out), terms,
                                     [terms, weights](Tape& tape, std::size_t self) {
                                       const Tensor& g = tape.grad(self);
                                       for (std::size_t t = 0; t < terms.size(); ++t) {
                                         if (!tape.requires_grad(terms[t].id())) continue;
                                         Tensor& gt = tape.grad(terms[t].id());
                                         for (std::size_t i = 0; i < g.size(); ++i) gt[i] += weights[t] * g[i];
                                       }
                                     });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return a.tape().record("mul", std::move(out), {a, b}, [a, b](Tape& tape, std::size_t self) {
    const Tensor& g = tape.grad(self);
    const Tensor& x = tape.value(a.id());
    const Tensor& y = tape.value(b.id());
    // Read both operands before touching accumulators: a and b may be the same node.
    Tensor ga(g.shape()), gb(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] = g[i] * y[i];
      gb[i] = g[i] * x[i];
    }
    if (tape.requires_grad(a.id())) {
      Tensor& acc = tape.grad(a.id());
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += ga[i];
    }
    if (tape.requires_grad(b.id())) {
      Tensor& acc = tape.grad(b.id());
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += gb[i];
    }
  });
}

Var sum(const Var& input) {
  const Tensor& x = input.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  return input.tape().record("sum", Tensor::scalar(s), {input}, [input](Tape& tape, std::size_t self) {
    const double g = tape.grad(self)[0];
    Tensor& gx = tape.grad(input.id());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

}  // namespace fedmenu::ops
