#include "fcan/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "fcan/parallel.hpp"

namespace fcan {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

Tensor record(const char* op, Tensor out, std::vector<Tensor> inputs, Tape::BackwardFn fn) {
    if (Tape* tape = Tape::active()) return tape->record(op, std::move(out), std::move(inputs), std::move(fn));
    return out;
}

// View of a rank-3 or rank-4 image tensor as [N,C,H,W].
struct Nchw {
    std::size_t n, c, h, w;
    bool batched;
};

Nchw as_nchw(const Tensor& x, const char* op) {
    if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2), false};
    if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), true};
    throw ShapeError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + shape_str(x.shape()));
}

Shape image_shape(const Nchw& v, std::size_t c, std::size_t h, std::size_t w) {
    if (v.batched) return {v.n, c, h, w};
    return {c, h, w};
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

struct ConvGeometry {
    std::size_t cin, h, w, cout, kh, kw, oh, ow;
    Conv2dParams p;
    std::size_t rows() const { return cin * kh * kw; }
    std::size_t cols() const { return oh * ow; }
    bool pointwise() const { return kh == 1 && kw == 1 && p.stride == 1 && p.pad == 0; }
};

void im2col(const double* img, const ConvGeometry& g, double* cols) {
    const auto P = g.cols();
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                double* row = cols + ((c * g.kh + ki) * g.kw + kj) * P;
                const long dy = static_cast<long>(ki * g.p.dilation) - static_cast<long>(g.p.pad);
                const long dx = static_cast<long>(kj * g.p.dilation) - static_cast<long>(g.p.pad);
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = static_cast<long>(oy * g.p.stride) + dy;
                    double* dst = row + oy * g.ow;
                    if (iy < 0 || iy >= static_cast<long>(g.h)) {
                        std::fill(dst, dst + g.ow, 0.0);
                        continue;
                    }
                    const double* src = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const long ix = static_cast<long>(ox * g.p.stride) + dx;
                        dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
                    }
                }
            }
        }
    }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* img) {
    const auto P = g.cols();
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * P;
                const long dy = static_cast<long>(ki * g.p.dilation) - static_cast<long>(g.p.pad);
                const long dx = static_cast<long>(kj * g.p.dilation) - static_cast<long>(g.p.pad);
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = static_cast<long>(oy * g.p.stride) + dy;
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    double* dst = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
                    const double* src = row + oy * g.ow;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const long ix = static_cast<long>(ox * g.p.stride) + dx;
                        if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

// Interpolation taps along one axis for align_corners = false.
struct Taps {
    std::vector<std::size_t> lo, hi;
    std::vector<double> frac;
};

Taps bilinear_taps(std::size_t in, std::size_t out) {
    Taps t;
    t.lo.resize(out);
    t.hi.resize(out);
    t.frac.resize(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        auto lo = static_cast<std::size_t>(std::floor(src));
        t.lo[o] = lo;
        t.hi[o] = std::min(lo + 1, in - 1);
        t.frac[o] = src - static_cast<double>(lo);
    }
    return t;
}

Tensor unary(const char* op, const Tensor& x, double (*f)(double), double (*df)(double x, double y)) {
    std::vector<double> out(x.numel());
    auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
    Tensor y(x.shape(), std::move(out));
    auto yi = y.impl();
    return record(op, y, {x}, [xi = x.impl(), yi, df](std::span<const double> g, std::span<double* const> gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * df(xi->data[i], yi->data[i]);
    });
}

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, const Conv2dParams& p) {
    if (p.stride < 1 || p.dilation < 1) {
        throw ShapeError("conv2d: stride and dilation must be >= 1 (stride=" + std::to_string(p.stride) +
                         ", dilation=" + std::to_string(p.dilation) + ")");
    }
    const std::size_t span = p.dilation * (kernel - 1) + 1;
    const std::size_t padded = in + 2 * p.pad;
    if (span > padded) {
        throw ShapeError("conv2d: dilated kernel extent " + std::to_string(span) + " exceeds padded input " +
                         std::to_string(padded));
    }
    return (padded - span) / p.stride + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Conv2dParams& params) {
    return conv2d(input, kernel, Tensor(), params);
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, const Conv2dParams& params) {
    const Nchw v = as_nchw(input, "conv2d");
    if (kernel.rank() != 4 || kernel.dim(1) != v.c) {
        throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " incompatible with input " +
                         shape_str(input.shape()));
    }
    // A default-constructed Tensor (single zero, rank 0) means "no bias".
    const bool has_bias = bias.rank() != 0;
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))) {
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " incompatible with kernel " +
                         shape_str(kernel.shape()));
    }
    ConvGeometry g{v.c, v.h, v.w, kernel.dim(0), kernel.dim(2), kernel.dim(3), 0, 0, params};
    g.oh = conv_out_extent(v.h, g.kh, params);
    g.ow = conv_out_extent(v.w, g.kw, params);

    const std::size_t K = g.rows(), P = g.cols();
    const std::size_t in_stride = v.c * v.h * v.w, out_stride = g.cout * P;
    std::vector<double> out(v.n * out_stride);
    const bool keep_cols = Tape::active() && (input.tracked() || kernel.tracked());
    auto cols_all = std::make_shared<std::vector<double>>(g.pointwise() || !keep_cols ? 0 : v.n * K * P);

    const double* x = input.data().data();
    const double* w = kernel.data().data();
    parallel_for(v.n, [&](std::size_t n) {
        std::vector<double> scratch;
        const double* cols;
        if (g.pointwise()) {
            cols = x + n * in_stride;
        } else if (keep_cols) {
            double* dst = cols_all->data() + n * K * P;
            im2col(x + n * in_stride, g, dst);
            cols = dst;
        } else {
            scratch.resize(K * P);
            im2col(x + n * in_stride, g, scratch.data());
            cols = scratch.data();
        }
        MapMat o(out.data() + n * out_stride, g.cout, P);
        o.noalias() = ConstMapMat(w, g.cout, K) * ConstMapMat(cols, K, P);
        if (has_bias) {
            for (std::size_t c = 0; c < g.cout; ++c) o.row(c).array() += bias[c];
        }
    });

    Tensor y(image_shape(v, g.cout, g.oh, g.ow), std::move(out));
    std::vector<Tensor> inputs{input, kernel};
    if (has_bias) inputs.push_back(bias);
    return record("conv2d", y, std::move(inputs),
                  [xi = input.impl(), wi = kernel.impl(), g, n_img = v.n, cols_all, has_bias](
                      std::span<const double> gout, std::span<double* const> gin) {
                      const std::size_t K = g.rows(), P = g.cols();
                      const std::size_t in_stride = g.cin * g.h * g.w, out_stride = g.cout * P;
                      ConstMapMat W(wi->data.data(), g.cout, K);
                      // Per-image kernel gradients are summed in image order.
                      std::vector<double> dw_parts(gin[1] ? n_img * g.cout * K : 0);
                      parallel_for(n_img, [&](std::size_t n) {
                          ConstMapMat dout(gout.data() + n * out_stride, g.cout, P);
                          const double* cols = g.pointwise() ? xi->data.data() + n * in_stride
                                                             : cols_all->data() + n * K * P;
                          if (gin[1]) {
                              MapMat dw(dw_parts.data() + n * g.cout * K, g.cout, K);
                              dw.noalias() = dout * ConstMapMat(cols, K, P).transpose();
                          }
                          if (gin[0]) {
                              if (g.pointwise()) {
                                  MapMat dx(gin[0] + n * in_stride, K, P);
                                  dx.noalias() += W.transpose() * dout;
                              } else {
                                  std::vector<double> dcols(K * P);
                                  MapMat(dcols.data(), K, P).noalias() = W.transpose() * dout;
                                  col2im_add(dcols.data(), g, gin[0] + n * in_stride);
                              }
                          }
                      });
                      if (gin[1]) {
                          for (std::size_t n = 0; n < n_img; ++n) {
                              const double* part = dw_parts.data() + n * g.cout * K;
                              for (std::size_t i = 0; i < g.cout * K; ++i) gin[1][i] += part[i];
                          }
                      }
                      if (has_bias && gin[2]) {
                          for (std::size_t n = 0; n < n_img; ++n) {
                              for (std::size_t c = 0; c < g.cout; ++c) {
                                  const double* row = gout.data() + n * out_stride + c * P;
                                  double s = 0.0;
                                  for (std::size_t p = 0; p < P; ++p) s += row[p];
                                  gin[2][c] += s;
                              }
                          }
                      }
                  });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats, BnMode mode,
                  bool update_stats) {
    const Nchw v = as_nchw(x, "batch_norm");
    if (gamma.numel() != v.c || beta.numel() != v.c || stats.mean.size() != v.c || stats.var.size() != v.c) {
        throw ShapeError("batch_norm: parameters for " + std::to_string(gamma.numel()) + " channels vs input " +
                         shape_str(x.shape()));
    }
    const std::size_t plane = v.h * v.w;
    const std::size_t count = v.n * plane;
    const double* in = x.data().data();

    std::vector<double> mu(v.c), inv_std(v.c);
    if (mode == BnMode::Train) {
        for (std::size_t c = 0; c < v.c; ++c) {
            double s = 0.0;
            for (std::size_t n = 0; n < v.n; ++n) {
                const double* p = in + (n * v.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) s += p[i];
            }
            const double m = s / static_cast<double>(count);
            double ss = 0.0;
            for (std::size_t n = 0; n < v.n; ++n) {
                const double* p = in + (n * v.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - m) * (p[i] - m);
            }
            const double var = ss / static_cast<double>(count);
            mu[c] = m;
            inv_std[c] = 1.0 / std::sqrt(var + kBatchNormEps);
            if (update_stats) {
                stats.mean[c] = kBatchNormMomentum * stats.mean[c] + (1.0 - kBatchNormMomentum) * m;
                stats.var[c] = kBatchNormMomentum * stats.var[c] + (1.0 - kBatchNormMomentum) * var;
            }
        }
    } else {
        for (std::size_t c = 0; c < v.c; ++c) {
            if (!(stats.var[c] >= 0.0) || !std::isfinite(stats.mean[c])) {
                throw NumericalError("batch_norm: invalid stored statistics for channel " + std::to_string(c));
            }
            mu[c] = stats.mean[c];
            inv_std[c] = 1.0 / std::sqrt(stats.var[c] + kBatchNormEps);
        }
    }

    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    std::vector<double> out(x.numel());
    for (std::size_t n = 0; n < v.n; ++n) {
        for (std::size_t c = 0; c < v.c; ++c) {
            const std::size_t off = (n * v.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const double h = (in[off + i] - mu[c]) * inv_std[c];
                (*xhat)[off + i] = h;
                out[off + i] = gamma[c] * h + beta[c];
            }
        }
    }
    Tensor y(x.shape(), std::move(out));
    return record("batch_norm", y, {x, gamma, beta},
                  [v, plane, count, xhat, inv_std, gi = gamma.impl(), train = mode == BnMode::Train](
                      std::span<const double> g, std::span<double* const> gin) {
                      for (std::size_t c = 0; c < v.c; ++c) {
                          double sum_g = 0.0, sum_gh = 0.0;
                          for (std::size_t n = 0; n < v.n; ++n) {
                              const std::size_t off = (n * v.c + c) * plane;
                              for (std::size_t i = 0; i < plane; ++i) {
                                  sum_g += g[off + i];
                                  sum_gh += g[off + i] * (*xhat)[off + i];
                              }
                          }
                          if (gin[1]) gin[1][c] += sum_gh;
                          if (gin[2]) gin[2][c] += sum_g;
                          if (!gin[0]) continue;
                          const double gamma_c = gi->data[c];
                          const double k = gamma_c * inv_std[c];
                          const double m = static_cast<double>(count);
                          for (std::size_t n = 0; n < v.n; ++n) {
                              const std::size_t off = (n * v.c + c) * plane;
                              for (std::size_t i = 0; i < plane; ++i) {
                                  if (train) {
                                      gin[0][off + i] +=
                                          k * (g[off + i] - sum_g / m - (*xhat)[off + i] * sum_gh / m);
                                  } else {
                                      gin[0][off + i] += k * g[off + i];
                                  }
                              }
                          }
                      }
                  });
}

Tensor relu(const Tensor& x) {
    return unary(
        "relu", x, [](double a) { return a > 0.0 ? a : 0.0; },
        [](double a, double) { return a > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        "sigmoid", x,
        [](double a) {
            if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
            const double e = std::exp(a);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
    if (x.rank() < 2) throw ShapeError("bilinear_resize: need rank >= 2, got " + shape_str(x.shape()));
    if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: output size must be positive");
    const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
    const std::size_t planes = x.numel() / (h * w);
    auto ty = std::make_shared<Taps>(bilinear_taps(h, out_h));
    auto tx = std::make_shared<Taps>(bilinear_taps(w, out_w));
    Shape shape = x.shape();
    shape[shape.size() - 2] = out_h;
    shape[shape.size() - 1] = out_w;
    std::vector<double> out(planes * out_h * out_w);
    const double* in = x.data().data();
    for (std::size_t p = 0; p < planes; ++p) {
        const double* src = in + p * h * w;
        double* dst = out.data() + p * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            const double fy = ty->frac[oy];
            const double* r0 = src + ty->lo[oy] * w;
            const double* r1 = src + ty->hi[oy] * w;
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const double fx = tx->frac[ox];
                const std::size_t a = tx->lo[ox], b = tx->hi[ox];
                const double top = r0[a] + fx * (r0[b] - r0[a]);
                const double bot = r1[a] + fx * (r1[b] - r1[a]);
                dst[oy * out_w + ox] = top + fy * (bot - top);
            }
        }
    }
    Tensor y(std::move(shape), std::move(out));
    return record("bilinear_resize", y, {x},
                  [ty, tx, planes, h, w, out_h, out_w](std::span<const double> g, std::span<double* const> gin) {
                      if (!gin[0]) return;
                      for (std::size_t p = 0; p < planes; ++p) {
                          const double* gsrc = g.data() + p * out_h * out_w;
                          double* dst = gin[0] + p * h * w;
                          for (std::size_t oy = 0; oy < out_h; ++oy) {
                              const double fy = ty->frac[oy];
                              double* r0 = dst + ty->lo[oy] * w;
                              double* r1 = dst + ty->hi[oy] * w;
                              for (std::size_t ox = 0; ox < out_w; ++ox) {
                                  const double fx = tx->frac[ox];
                                  const double gv = gsrc[oy * out_w + ox];
                                  const std::size_t a = tx->lo[ox], b = tx->hi[ox];
                                  r0[a] += gv * (1 - fy) * (1 - fx);
                                  r0[b] += gv * (1 - fy) * fx;
                                  r1[a] += gv * fy * (1 - fx);
                                  r1[b] += gv * fy * fx;
                              }
                          }
                      }
                  });
}

Tensor bilinear_upsample(const Tensor& x, std::size_t factor) {
    if (factor < 1) throw ShapeError("bilinear_upsample: factor must be >= 1");
    if (x.rank() < 2) throw ShapeError("bilinear_upsample: need rank >= 2, got " + shape_str(x.shape()));
    if (factor == 1) return x;
    return bilinear_resize(x, x.dim(x.rank() - 2) * factor, x.dim(x.rank() - 1) * factor);
}

Tensor adaptive_avg_pool(const Tensor& x, std::size_t bins) {
    if (x.rank() < 2 || bins < 1) throw ShapeError("adaptive_avg_pool: bad input " + shape_str(x.shape()));
    const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
    if (bins > h || bins > w) {
        throw ShapeError("adaptive_avg_pool: " + std::to_string(bins) + " bins exceed map " + shape_str(x.shape()));
    }
    const std::size_t planes = x.numel() / (h * w);
    auto lo = [](std::size_t i, std::size_t n, std::size_t b) { return i * n / b; };
    auto hi = [](std::size_t i, std::size_t n, std::size_t b) { return ((i + 1) * n + b - 1) / b; };
    Shape shape = x.shape();
    shape[shape.size() - 2] = bins;
    shape[shape.size() - 1] = bins;
    std::vector<double> out(planes * bins * bins);
    const double* in = x.data().data();
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t by = 0; by < bins; ++by) {
            for (std::size_t bx = 0; bx < bins; ++bx) {
                double s = 0.0;
                const std::size_t y0 = lo(by, h, bins), y1 = hi(by, h, bins);
                const std::size_t x0 = lo(bx, w, bins), x1 = hi(bx, w, bins);
                for (std::size_t yy = y0; yy < y1; ++yy)
                    for (std::size_t xx = x0; xx < x1; ++xx) s += in[p * h * w + yy * w + xx];
                out[(p * bins + by) * bins + bx] = s / static_cast<double>((y1 - y0) * (x1 - x0));
            }
        }
    }
    Tensor y(std::move(shape), std::move(out));
    return record("adaptive_avg_pool", y, {x},
                  [planes, h, w, bins, lo, hi](std::span<const double> g, std::span<double* const> gin) {
                      if (!gin[0]) return;
                      for (std::size_t p = 0; p < planes; ++p) {
                          for (std::size_t by = 0; by < bins; ++by) {
                              for (std::size_t bx = 0; bx < bins; ++bx) {
                                  const std::size_t y0 = lo(by, h, bins), y1 = hi(by, h, bins);
                                  const std::size_t x0 = lo(bx, w, bins), x1 = hi(bx, w, bins);
                                  const double share =
                                      g[(p * bins + by) * bins + bx] / static_cast<double>((y1 - y0) * (x1 - x0));
                                  for (std::size_t yy = y0; yy < y1; ++yy)
                                      for (std::size_t xx = x0; xx < x1; ++xx) gin[0][p * h * w + yy * w + xx] += share;
                              }
                          }
                      }
                  });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    const Nchw first = as_nchw(parts[0], "concat_channels");
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& t : parts) {
        const Nchw v = as_nchw(t, "concat_channels");
        if (v.n != first.n || v.h != first.h || v.w != first.w || v.batched != first.batched) {
            throw ShapeError("concat_channels: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(t.shape()));
        }
        widths.push_back(v.c);
        total += v.c;
    }
    const std::size_t plane = first.h * first.w;
    std::vector<double> out(first.n * total * plane);
    for (std::size_t n = 0; n < first.n; ++n) {
        std::size_t c0 = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            const double* src = parts[k].data().data() + n * widths[k] * plane;
            std::copy(src, src + widths[k] * plane, out.data() + (n * total + c0) * plane);
            c0 += widths[k];
        }
    }
    Tensor y(image_shape(first, total, first.h, first.w), std::move(out));
    return record("concat_channels", y, parts,
                  [widths, total, plane, n_img = first.n](std::span<const double> g, std::span<double* const> gin) {
                      for (std::size_t n = 0; n < n_img; ++n) {
                          std::size_t c0 = 0;
                          for (std::size_t k = 0; k < widths.size(); ++k) {
                              if (gin[k]) {
                                  const double* src = g.data() + (n * total + c0) * plane;
                                  double* dst = gin[k] + n * widths[k] * plane;
                                  for (std::size_t i = 0; i < widths[k] * plane; ++i) dst[i] += src[i];
                              }
                              c0 += widths[k];
                          }
                      }
                  });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    Tensor y(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
    return record("reshape", y, {x}, [](std::span<const double> g, std::span<double* const> gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
    });
}

Tensor select(const Tensor& x, std::size_t n) {
    if (x.rank() < 2 || n >= x.dim(0)) {
        throw ShapeError("select: index " + std::to_string(n) + " invalid for " + shape_str(x.shape()));
    }
    Shape shape(x.shape().begin() + 1, x.shape().end());
    const std::size_t block = shape_numel(shape);
    auto src = x.data().subspan(n * block, block);
    Tensor y(std::move(shape), std::vector<double>(src.begin(), src.end()));
    return record("select", y, {x}, [n, block](std::span<const double> g, std::span<double* const> gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < block; ++i) gin[0][n * block + i] += g[i];
    });
}

Tensor stack(const std::vector<Tensor>& items) {
    if (items.empty()) throw ShapeError("stack: no inputs");
    const std::size_t block = items[0].numel();
    Shape shape{items.size()};
    shape.insert(shape.end(), items[0].shape().begin(), items[0].shape().end());
    std::vector<double> out;
    out.reserve(items.size() * block);
    for (const auto& t : items) {
        require_same_shape(items[0], t, "stack");
        out.insert(out.end(), t.data().begin(), t.data().end());
    }
    Tensor y(std::move(shape), std::move(out));
    return record("stack", y, items, [block](std::span<const double> g, std::span<double* const> gin) {
        for (std::size_t k = 0; k < gin.size(); ++k) {
            if (!gin[k]) continue;
            for (std::size_t i = 0; i < block; ++i) gin[k][i] += g[k * block + i];
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return record("add", Tensor(a.shape(), std::move(out)), {a, b},
                  [](std::span<const double> g, std::span<double* const> gin) {
                      for (std::size_t k = 0; k < 2; ++k)
                          if (gin[k])
                              for (std::size_t i = 0; i < g.size(); ++i) gin[k][i] += g[i];
                  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return record("sub", Tensor(a.shape(), std::move(out)), {a, b},
                  [](std::span<const double> g, std::span<double* const> gin) {
                      if (gin[0])
                          for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                      if (gin[1])
                          for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] -= g[i];
                  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return record("mul", Tensor(a.shape(), std::move(out)), {a, b},
                  [ai = a.impl(), bi = b.impl()](std::span<const double> g, std::span<double* const> gin) {
                      if (gin[0])
                          for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * bi->data[i];
                      if (gin[1])
                          for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] += g[i] * ai->data[i];
                  });
}

Tensor scale(const Tensor& x, double factor) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
    return record("scale", Tensor(x.shape(), std::move(out)), {x},
                  [factor](std::span<const double> g, std::span<double* const> gin) {
                      if (!gin[0]) return;
                      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * factor;
                  });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return record("sum", Tensor::scalar(s), {x},
                  [count = x.numel()](std::span<const double> g, std::span<double* const> gin) {
                      if (!gin[0]) return;
                      for (std::size_t i = 0; i < count; ++i) gin[0][i] += g[0];
                  });
}

Tensor mean(const Tensor& x) {
    const double n = static_cast<double>(x.numel());
    double s = 0.0;
    for (double v : x.data()) s += v;
    return record("mean", Tensor::scalar(s / n), {x},
                  [count = x.numel(), n](std::span<const double> g, std::span<double* const> gin) {
                      if (!gin[0]) return;
                      for (std::size_t i = 0; i < count; ++i) gin[0][i] += g[0] / n;
                  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    const double n = static_cast<double>(a.numel());
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return record("mse", Tensor::scalar(s / n), {a, b},
                  [ai = a.impl(), bi = b.impl(), n](std::span<const double> g, std::span<double* const> gin) {
                      const double k = 2.0 * g[0] / n;
                      for (std::size_t i = 0; i < ai->data.size(); ++i) {
                          const double d = k * (ai->data[i] - bi->data[i]);
                          if (gin[0]) gin[0][i] += d;
                          if (gin[1]) gin[1][i] -= d;
                      }
                  });
}

namespace {
Tensor mean_log_impl(const char* op, const Tensor& x, double eps, std::size_t* clamped, bool complement) {
    const double n = static_cast<double>(x.numel());
    std::size_t hits = 0;
    double s = 0.0;
    for (double v : x.data()) {
        double c = v;
        if (c < eps || c > 1.0 - eps) {
            ++hits;
            c = std::clamp(c, eps, 1.0 - eps);
        }
        s += std::log(complement ? 1.0 - c : c);
    }
    if (clamped) *clamped = hits;
    return record(op, Tensor::scalar(s / n), {x},
                  [xi = x.impl(), eps, n, complement](std::span<const double> g, std::span<double* const> gin) {
                      if (!gin[0]) return;
                      for (std::size_t i = 0; i < xi->data.size(); ++i) {
                          const double v = xi->data[i];
                          if (v < eps || v > 1.0 - eps) continue;
                          gin[0][i] += g[0] / n * (complement ? -1.0 / (1.0 - v) : 1.0 / v);
                      }
                  });
}
}  // namespace

Tensor mean_log(const Tensor& x, double eps, std::size_t* clamped) {
    return mean_log_impl("mean_log", x, eps, clamped, false);
}

Tensor mean_log1m(const Tensor& x, double eps, std::size_t* clamped) {
    return mean_log_impl("mean_log1m", x, eps, clamped, true);
}

Tensor gram_matrix(const Tensor& features) {
    if (features.rank() != 3) throw ShapeError("gram: expected [N,H,W], got " + shape_str(features.shape()));
    const std::size_t n = features.dim(0), p = features.dim(1) * features.dim(2);
    std::vector<double> out(n * n);
    ConstMapMat m(features.data().data(), n, p);
    MapMat(out.data(), n, n).noalias() = m * m.transpose() / static_cast<double>(p);
    return record("gram", Tensor({n, n}, std::move(out)), {features},
                  [fi = features.impl(), n, p](std::span<const double> g, std::span<double* const> gin) {
                      if (!gin[0]) return;
                      ConstMapMat dg(g.data(), n, n);
                      ConstMapMat m(fi->data.data(), n, p);
                      MapMat(gin[0], n, p).noalias() += (dg + dg.transpose()) * m / static_cast<double>(p);
                  });
}

CrossEntropy softmax_ce_loss(const Tensor& logits, std::span<const std::int32_t> labels, std::int32_t ignore_index) {
    const Nchw v = as_nchw(logits, "softmax_ce_loss");
    const std::size_t plane = v.h * v.w;
    if (labels.size() != v.n * plane) {
        throw ShapeError("softmax_ce_loss: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
    }
    const std::size_t K = v.c;
    auto probs = std::make_shared<std::vector<double>>(logits.numel());
    const double* z = logits.data().data();
    std::size_t counted = 0;
    double total = 0.0;
    for (std::size_t n = 0; n < v.n; ++n) {
        for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t base = n * K * plane + i;
            double mx = z[base];
            for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, z[base + k * plane]);
            double se = 0.0;
            for (std::size_t k = 0; k < K; ++k) se += std::exp(z[base + k * plane] - mx);
            for (std::size_t k = 0; k < K; ++k) (*probs)[base + k * plane] = std::exp(z[base + k * plane] - mx) / se;
            const std::int32_t lbl = labels[n * plane + i];
            if (lbl == ignore_index) continue;
            if (lbl < 0 || static_cast<std::size_t>(lbl) >= K) {
                throw ShapeError("softmax_ce_loss: label " + std::to_string(lbl) + " outside [0," +
                                 std::to_string(K) + ")");
            }
            total += mx + std::log(se) - z[base + static_cast<std::size_t>(lbl) * plane];
            ++counted;
        }
    }
    CrossEntropy result;
    result.counted = counted;
    result.all_ignored = counted == 0;
    const double denom = counted ? static_cast<double>(counted) : 1.0;
    std::vector<std::int32_t> lbl_copy(labels.begin(), labels.end());
    result.loss = record("softmax_ce_loss", Tensor::scalar(total / denom), {logits},
                         [probs, lbl = std::move(lbl_copy), v, K, plane, denom, ignore_index, counted](
                             std::span<const double> g, std::span<double* const> gin) {
                             if (!gin[0] || counted == 0) return;
                             const double k = g[0] / denom;
                             for (std::size_t n = 0; n < v.n; ++n) {
                                 for (std::size_t i = 0; i < plane; ++i) {
                                     const std::int32_t y = lbl[n * plane + i];
                                     if (y == ignore_index) continue;
                                     const std::size_t base = n * K * plane + i;
                                     for (std::size_t c = 0; c < K; ++c) {
                                         const double onehot = static_cast<std::int32_t>(c) == y ? 1.0 : 0.0;
                                         gin[0][base + c * plane] += k * ((*probs)[base + c * plane] - onehot);
                                     }
                                 }
                             }
                         });
    return result;
}

Tensor softmax_channels(const Tensor& logits) {
    const Nchw v = as_nchw(logits, "softmax_channels");
    const std::size_t plane = v.h * v.w, K = v.c;
    std::vector<double> out(logits.numel());
    const double* z = logits.data().data();
    for (std::size_t n = 0; n < v.n; ++n) {
        for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t base = n * K * plane + i;
            double mx = z[base];
            for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, z[base + k * plane]);
            double se = 0.0;
            for (std::size_t k = 0; k < K; ++k) se += std::exp(z[base + k * plane] - mx);
            for (std::size_t k = 0; k < K; ++k) out[base + k * plane] = std::exp(z[base + k * plane] - mx) / se;
        }
    }
    return Tensor(logits.shape(), std::move(out));
}

std::vector<std::int32_t> argmax_channels(const Tensor& scores) {
    if (scores.rank() != 3) throw ShapeError("argmax_channels: expected [K,H,W], got " + shape_str(scores.shape()));
    const std::size_t K = scores.dim(0), plane = scores.dim(1) * scores.dim(2);
    std::vector<std::int32_t> out(plane, 0);
    const double* s = scores.data().data();
    for (std::size_t i = 0; i < plane; ++i) {
        double best = s[i];
        for (std::size_t k = 1; k < K; ++k) {
            if (s[k * plane + i] > best) {
                best = s[k * plane + i];
                out[i] = static_cast<std::int32_t>(k);
            }
        }
    }
    return out;
}

void check_finite(const Tensor& t, const char* where) {
    for (double v : t.data()) {
        if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value in ") + where);
    }
}

}  // namespace fcan
