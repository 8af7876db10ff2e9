#include "mvapad/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kernels.hpp"

namespace mvapad {

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const long long span = static_cast<long long>(in + 2 * pad) - static_cast<long long>(kernel);
  if (span < 0) {
    throw DimensionError("conv2d: kernel " + std::to_string(kernel) + " does not fit input " + std::to_string(in) +
                         " with padding " + std::to_string(pad));
  }
  return static_cast<std::size_t>(span) / stride + 1;
}

std::size_t pool_output_size(std::size_t in, std::size_t kernel, std::size_t stride) {
  if (stride == 0 || kernel == 0) throw DimensionError("pool: kernel and stride must be positive");
  if (kernel > in) {
    throw DimensionError("pool: window " + std::to_string(kernel) + " larger than input " + std::to_string(in));
  }
  return (in - kernel) / stride + 1;
}

namespace {

void require_rank(const Var& x, std::size_t rank, const char* op) {
  if (x.shape().size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(x.shape()));
  }
}

void require_dtype(const Var& a, const Var& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw DimensionError(std::string(op) + ": dtype mismatch " + to_string(a.dtype()) + " vs " +
                         to_string(b.dtype()));
  }
}

struct ConvGeom {
  std::size_t batch, in_c, h, w, out_c, k, stride, pad, oh, ow;
  std::size_t col_rows() const { return in_c * k * k; }
  std::size_t col_cols() const { return oh * ow; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.in_c; ++c) {
    const T* plane = x + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * cols;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.pad);
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long long>(g.h)) {
            std::fill_n(dst, g.ow, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long long ix = static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long long>(g.w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.in_c; ++c) {
    T* plane = x + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * cols;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.pad);
          if (iy < 0 || iy >= static_cast<long long>(g.h)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.w;
          const T* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long long ix = static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.pad);
            if (ix >= 0 && ix < static_cast<long long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Per-channel layout helper for [B,C] and [B,C,H,W].
struct ChannelLayout {
  std::size_t batch, channels, spatial;
  std::size_t count() const { return batch * spatial; }
  std::size_t index(std::size_t b, std::size_t c, std::size_t s) const { return (b * channels + c) * spatial + s; }
};

ChannelLayout channel_layout(const Var& x, const char* op) {
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 4) {
    throw DimensionError(std::string(op) + ": expected [B,C] or [B,C,H,W], got " + shape_string(s));
  }
  return {s[0], s[1], s.size() == 4 ? s[2] * s[3] : 1};
}

void require_channel_vector(const Var& v, std::size_t channels, const char* op, const char* what) {
  if (v.shape() != Shape{channels}) {
    throw DimensionError(std::string(op) + ": " + what + " shape " + shape_string(v.shape()) + " does not match " +
                         std::to_string(channels) + " channels");
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t pad) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  require_dtype(x, weight, "conv2d");
  require_dtype(x, bias, "conv2d");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws[1] != xs[1]) {
    throw DimensionError("conv2d: input has " + std::to_string(xs[1]) + " channels, weight " + shape_string(ws) +
                         " expects " + std::to_string(ws[1]));
  }
  if (ws[2] != ws[3]) throw DimensionError("conv2d: non-square kernel " + shape_string(ws));
  if (bias.shape() != Shape{ws[0]}) {
    throw DimensionError("conv2d: bias " + shape_string(bias.shape()) + " vs weight " + shape_string(ws));
  }
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad, 0, 0};
  g.oh = conv_output_size(g.h, g.k, stride, pad);
  g.ow = conv_output_size(g.w, g.k, stride, pad);

  Tensor out({g.batch, g.out_c, g.oh, g.ow}, x.dtype());
  detail::dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.value().data<T>().data();
    const T* wv = weight.value().data<T>().data();
    const T* bv = bias.value().data<T>().data();
    T* ov = out.data<T>().data();
    const std::size_t rows = g.col_rows(), cols = g.col_cols();
    std::vector<T> col(rows * cols);
    for (std::size_t b = 0; b < g.batch; ++b) {
      im2col(xv + b * g.in_c * g.h * g.w, g, col.data());
      T* ob = ov + b * g.out_c * cols;
      for (std::size_t oc = 0; oc < g.out_c; ++oc) std::fill_n(ob + oc * cols, cols, bv[oc]);
      kernels::gemm_nn<T>(g.out_c, cols, rows, wv, col.data(), ob);
    }
  });

  return make_op(std::move(out), "conv2d", {x, weight, bias}, [g](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Node& pb = *self.parents[2];
    detail::dispatch(self.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* gout = self.grad().data<T>().data();
      const T* xv = px.value.data<T>().data();
      const T* wv = pw.value.data<T>().data();
      const std::size_t rows = g.col_rows(), cols = g.col_cols();
      std::vector<T> col(rows * cols);
      Tensor gx, gw, gb;
      if (px.requires_grad) gx = Tensor(px.value.shape(), px.value.dtype());
      if (pw.requires_grad) gw = Tensor(pw.value.shape(), pw.value.dtype());
      if (pb.requires_grad) gb = Tensor(pb.value.shape(), pb.value.dtype());
      for (std::size_t b = 0; b < g.batch; ++b) {
        const T* gb_out = gout + b * g.out_c * cols;
        if (pw.requires_grad) {
          im2col(xv + b * g.in_c * g.h * g.w, g, col.data());
          kernels::gemm_nt<T>(g.out_c, rows, cols, gb_out, col.data(), gw.data<T>().data());
        }
        if (pb.requires_grad) {
          auto gbv = gb.data<T>();
          for (std::size_t oc = 0; oc < g.out_c; ++oc) {
            T acc = T(0);
            for (std::size_t j = 0; j < cols; ++j) acc += gb_out[oc * cols + j];
            gbv[oc] += acc;
          }
        }
        if (px.requires_grad) {
          std::fill(col.begin(), col.end(), T(0));
          kernels::gemm_tn<T>(rows, cols, g.out_c, wv, gb_out, col.data());
          col2im(col.data(), g, gx.data<T>().data() + b * g.in_c * g.h * g.w);
        }
      }
      if (px.requires_grad) px.accumulate(gx);
      if (pw.requires_grad) pw.accumulate(gw);
      if (pb.requires_grad) pb.accumulate(gb);
    });
  });
}

Var maxpool2d(const Var& x, std::size_t kernel, std::size_t stride) {
  require_rank(x, 4, "maxpool2d");
  const Shape& s = x.shape();
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  const std::size_t oh = pool_output_size(h, kernel, stride);
  const std::size_t ow = pool_output_size(w, kernel, stride);
  Tensor out({s[0], s[1], oh, ow}, x.dtype());
  std::vector<std::size_t> argmax(planes * oh * ow);
  detail::dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xv = x.value().data<T>();
    auto ov = out.data<T>();
    std::size_t o = 0;
    for (std::size_t p = 0; p < planes; ++p) {
      const std::size_t base = p * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
          std::size_t best = base + oy * stride * w + ox * stride;
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const std::size_t i = base + (oy * stride + ky) * w + ox * stride + kx;
              if (xv[i] > xv[best]) best = i;
            }
          }
          argmax[o] = best;
          ov[o] = xv[best];
        }
      }
    }
  });
  return make_op(std::move(out), "maxpool2d", {x}, [argmax = std::move(argmax)](Node& self) {
    Node& px = *self.parents[0];
    Tensor gx(px.value.shape(), px.value.dtype());
    gx.visit([&](auto dst) {
      using T = typename decltype(dst)::value_type;
      auto g = self.grad().data<T>();
      for (std::size_t o = 0; o < argmax.size(); ++o) dst[argmax[o]] += g[o];
    });
    px.accumulate(gx);
  });
}

Var avgpool2d(const Var& x, std::size_t kernel, std::size_t stride) {
  require_rank(x, 4, "avgpool2d");
  const Shape& s = x.shape();
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  const std::size_t oh = pool_output_size(h, kernel, stride);
  const std::size_t ow = pool_output_size(w, kernel, stride);
  Tensor out({s[0], s[1], oh, ow}, x.dtype());
  detail::dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xv = x.value().data<T>();
    auto ov = out.data<T>();
    const T scale = T(1) / static_cast<T>(kernel * kernel);
    std::size_t o = 0;
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
          T acc = T(0);
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              acc += xv[p * h * w + (oy * stride + ky) * w + ox * stride + kx];
            }
          }
          ov[o] = acc * scale;
        }
      }
    }
  });
  return make_op(std::move(out), "avgpool2d", {x}, [planes, h, w, oh, ow, kernel, stride](Node& self) {
    Node& px = *self.parents[0];
    Tensor gx(px.value.shape(), px.value.dtype());
    gx.visit([&](auto dst) {
      using T = typename decltype(dst)::value_type;
      auto g = self.grad().data<T>();
      const T scale = T(1) / static_cast<T>(kernel * kernel);
      std::size_t o = 0;
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
            const T share = g[o] * scale;
            for (std::size_t ky = 0; ky < kernel; ++ky) {
              for (std::size_t kx = 0; kx < kernel; ++kx) {
                dst[p * h * w + (oy * stride + ky) * w + ox * stride + kx] += share;
              }
            }
          }
        }
      }
    });
    px.accumulate(gx);
  });
}

Var batchnorm_train(const Var& x, const Var& gamma, const Var& beta, double eps, BatchStats* stats) {
  const ChannelLayout L = channel_layout(x, "batchnorm");
  require_channel_vector(gamma, L.channels, "batchnorm", "gamma");
  require_channel_vector(beta, L.channels, "batchnorm", "beta");
  require_dtype(x, gamma, "batchnorm");
  require_dtype(x, beta, "batchnorm");
  if (L.count() < 2) {
    throw ContractError("batchnorm: train mode needs at least 2 values per channel, got " +
                        std::to_string(L.count()) + " for input " + shape_string(x.shape()));
  }

  const std::size_t n = L.count();
  std::vector<double> mean(L.channels), var(L.channels), inv_std(L.channels);
  Tensor out(x.shape(), x.dtype());
  Tensor xhat(x.shape(), x.dtype());
  detail::dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xv = x.value().data<T>();
    auto gv = gamma.value().data<T>();
    auto bv = beta.value().data<T>();
    auto ov = out.data<T>();
    auto hv = xhat.data<T>();
    for (std::size_t c = 0; c < L.channels; ++c) {
      double acc = 0.0;
      for (std::size_t b = 0; b < L.batch; ++b) {
        for (std::size_t s = 0; s < L.spatial; ++s) acc += xv[L.index(b, c, s)];
      }
      const double m = acc / static_cast<double>(n);
      double sq = 0.0;
      for (std::size_t b = 0; b < L.batch; ++b) {
        for (std::size_t s = 0; s < L.spatial; ++s) {
          const double d = xv[L.index(b, c, s)] - m;
          sq += d * d;
        }
      }
      mean[c] = m;
      var[c] = sq / static_cast<double>(n);
      inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
      for (std::size_t b = 0; b < L.batch; ++b) {
        for (std::size_t s = 0; s < L.spatial; ++s) {
          const std::size_t i = L.index(b, c, s);
          const T h = static_cast<T>((xv[i] - m) * inv_std[c]);
          hv[i] = h;
          ov[i] = gv[c] * h + bv[c];
        }
      }
    }
  });
  if (stats) {
    stats->mean = mean;
    stats->biased_var = var;
    stats->count = n;
  }

  return make_op(std::move(out), "batchnorm_train", {x, gamma, beta},
                 [L, inv_std = std::move(inv_std), xhat = std::move(xhat)](Node& self) {
                   Node& px = *self.parents[0];
                   Node& pg = *self.parents[1];
                   Node& pb = *self.parents[2];
                   detail::dispatch(self.value.dtype(), [&](auto tag) {
                     using T = decltype(tag);
                     auto g = self.grad().data<T>();
                     auto hv = xhat.data<T>();
                     auto gamma_v = pg.value.data<T>();
                     Tensor gx(px.value.shape(), px.value.dtype());
                     Tensor gg(pg.value.shape(), pg.value.dtype());
                     Tensor gbeta(pb.value.shape(), pb.value.dtype());
                     auto gxv = gx.data<T>();
                     const double n = static_cast<double>(L.count());
                     for (std::size_t c = 0; c < L.channels; ++c) {
                       double sum_g = 0.0, sum_gh = 0.0;
                       for (std::size_t b = 0; b < L.batch; ++b) {
                         for (std::size_t s = 0; s < L.spatial; ++s) {
                           const std::size_t i = L.index(b, c, s);
                           sum_g += g[i];
                           sum_gh += static_cast<double>(g[i]) * hv[i];
                         }
                       }
                       gg.data<T>()[c] = static_cast<T>(sum_gh);
                       gbeta.data<T>()[c] = static_cast<T>(sum_g);
                       // dx = gamma * inv_std / n * (n g - sum(g) - xhat sum(g xhat))
                       const double k = static_cast<double>(gamma_v[c]) * inv_std[c] / n;
                       for (std::size_t b = 0; b < L.batch; ++b) {
                         for (std::size_t s = 0; s < L.spatial; ++s) {
                           const std::size_t i = L.index(b, c, s);
                           gxv[i] = static_cast<T>(k * (n * g[i] - sum_g - hv[i] * sum_gh));
                         }
                       }
                     }
                     if (px.requires_grad) px.accumulate(gx);
                     if (pg.requires_grad) pg.accumulate(gg);
                     if (pb.requires_grad) pb.accumulate(gbeta);
                   });
                 });
}

Var batchnorm_eval(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
                   const Tensor& running_var, double eps) {
  const ChannelLayout L = channel_layout(x, "batchnorm");
  require_channel_vector(gamma, L.channels, "batchnorm", "gamma");
  require_channel_vector(beta, L.channels, "batchnorm", "beta");
  require_dtype(x, gamma, "batchnorm");
  require_dtype(x, beta, "batchnorm");
  if (running_mean.shape() != Shape{L.channels} || running_var.shape() != Shape{L.channels}) {
    throw DimensionError("batchnorm: running statistics do not match " + std::to_string(L.channels) + " channels");
  }
  std::vector<double> inv_std(L.channels), mean(L.channels);
  for (std::size_t c = 0; c < L.channels; ++c) {
    mean[c] = running_mean.at(c);
    inv_std[c] = 1.0 / std::sqrt(running_var.at(c) + eps);
  }
  Tensor out(x.shape(), x.dtype());
  Tensor xhat(x.shape(), x.dtype());
  detail::dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xv = x.value().data<T>();
    auto gv = gamma.value().data<T>();
    auto bv = beta.value().data<T>();
    auto ov = out.data<T>();
    auto hv = xhat.data<T>();
    for (std::size_t b = 0; b < L.batch; ++b) {
      for (std::size_t c = 0; c < L.channels; ++c) {
        for (std::size_t s = 0; s < L.spatial; ++s) {
          const std::size_t i = L.index(b, c, s);
          const T h = static_cast<T>((xv[i] - mean[c]) * inv_std[c]);
          hv[i] = h;
          ov[i] = gv[c] * h + bv[c];
        }
      }
    }
  });
  return make_op(std::move(out), "batchnorm_eval", {x, gamma, beta},
                 [L, inv_std = std::move(inv_std), xhat = std::move(xhat)](Node& self) {
                   Node& px = *self.parents[0];
                   Node& pg = *self.parents[1];
                   Node& pb = *self.parents[2];
                   detail::dispatch(self.value.dtype(), [&](auto tag) {
                     using T = decltype(tag);
                     auto g = self.grad().data<T>();
                     auto hv = xhat.data<T>();
                     auto gamma_v = pg.value.data<T>();
                     Tensor gx(px.value.shape(), px.value.dtype());
                     Tensor gg(pg.value.shape(), pg.value.dtype());
                     Tensor gbeta(pb.value.shape(), pb.value.dtype());
                     auto gxv = gx.data<T>();
                     auto ggv = gg.data<T>();
                     auto gbv = gbeta.data<T>();
                     for (std::size_t b = 0; b < L.batch; ++b) {
                       for (std::size_t c = 0; c < L.channels; ++c) {
                         for (std::size_t s = 0; s < L.spatial; ++s) {
                           const std::size_t i = L.index(b, c, s);
                           gxv[i] = static_cast<T>(g[i] * gamma_v[c] * inv_std[c]);
                           ggv[c] += g[i] * hv[i];
                           gbv[c] += g[i];
                         }
                       }
                     }
                     if (px.requires_grad) px.accumulate(gx);
                     if (pg.requires_grad) pg.accumulate(gg);
                     if (pb.requires_grad) pb.accumulate(gbeta);
                   });
                 });
}

Var apply_mask(const Var& x, const Tensor& mask) {
  require_same_shape(x.value(), mask, "dropout mask");
  Tensor out = x.value();
  out.visit([&](auto ov) {
    using T = typename decltype(ov)::value_type;
    auto mv = mask.data<T>();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= mv[i];
  });
  return make_op(std::move(out), "dropout", {x}, [mask](Node& self) {
    Tensor gx = self.grad();
    gx.visit([&](auto gv) {
      using T = typename decltype(gv)::value_type;
      auto mv = mask.data<T>();
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= mv[i];
    });
    self.parents[0]->accumulate(gx);
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear weight");
  require_dtype(x, weight, "linear");
  require_dtype(x, bias, "linear");
  const std::size_t batch = x.shape()[0], in = x.shape()[1], out_f = weight.shape()[0];
  if (weight.shape()[1] != in) {
    throw DimensionError("linear: input width " + std::to_string(in) + " does not match weight " +
                         shape_string(weight.shape()));
  }
  if (bias.shape() != Shape{out_f}) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " vs weight " + shape_string(weight.shape()));
  }
  Tensor out({batch, out_f}, x.dtype());
  detail::dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto ov = out.data<T>();
    auto bv = bias.value().data<T>();
    for (std::size_t b = 0; b < batch; ++b) std::copy(bv.begin(), bv.end(), ov.begin() + b * out_f);
    kernels::gemm_nt<T>(batch, out_f, in, x.value().data<T>().data(), weight.value().data<T>().data(), ov.data());
  });
  return make_op(std::move(out), "linear", {x, weight, bias}, [batch, in, out_f](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Node& pb = *self.parents[2];
    detail::dispatch(self.value.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* g = self.grad().data<T>().data();
      if (px.requires_grad) {
        Tensor gx({batch, in}, px.value.dtype());
        kernels::gemm_nn<T>(batch, in, out_f, g, pw.value.data<T>().data(), gx.data<T>().data());
        px.accumulate(gx);
      }
      if (pw.requires_grad) {
        Tensor gw({out_f, in}, pw.value.dtype());
        kernels::gemm_tn<T>(out_f, in, batch, g, px.value.data<T>().data(), gw.data<T>().data());
        pw.accumulate(gw);
      }
      if (pb.requires_grad) {
        Tensor gb({out_f}, pb.value.dtype());
        auto gbv = gb.data<T>();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t o = 0; o < out_f; ++o) gbv[o] += g[b * out_f + o];
        }
        pb.accumulate(gb);
      }
    });
  });
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax: expected [B,K], got " + shape_string(logits.shape()));
  const std::size_t batch = logits.shape()[0], k = logits.shape()[1];
  Tensor out(logits.shape(), logits.dtype());
  out.visit([&](auto ov) {
    using T = typename decltype(ov)::value_type;
    auto lv = logits.data<T>();
    for (std::size_t b = 0; b < batch; ++b) {
      const T* row = lv.data() + b * k;
      const T mx = *std::max_element(row, row + k);
      T total = T(0);
      for (std::size_t j = 0; j < k; ++j) {
        ov[b * k + j] = std::exp(row[j] - mx);
        total += ov[b * k + j];
      }
      for (std::size_t j = 0; j < k; ++j) ov[b * k + j] /= total;
    }
  });
  return out;
}

Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  if (logits.shape().size() != 2) {
    throw DimensionError("softmax_cross_entropy: expected [B,K] logits, got " + shape_string(logits.shape()));
  }
  const std::size_t batch = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != batch) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  }
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= k) {
      throw ContractError("softmax_cross_entropy: label " + std::to_string(labels[b]) + " at row " +
                          std::to_string(b) + " outside [0," + std::to_string(k) + ")");
    }
  }
  const Tensor probs = softmax(logits.value());
  const double loss = logits.value().visit([&](auto lv) {
    using T = typename decltype(lv)::value_type;
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const T* row = lv.data() + b * k;
      const T mx = *std::max_element(row, row + k);
      T z = T(0);
      for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
      total += static_cast<double>(mx + std::log(z) - row[labels[b]]);
    }
    return total / static_cast<double>(batch);
  });
  std::vector<int> targets(labels.begin(), labels.end());
  return make_op(Tensor::scalar(loss, logits.dtype()), "softmax_cross_entropy", {logits},
                 [probs, targets = std::move(targets), batch, k](Node& self) {
                   Node& pl = *self.parents[0];
                   Tensor gl = probs;
                   const double upstream = self.grad().item();
                   gl.visit([&](auto gv) {
                     using T = typename decltype(gv)::value_type;
                     const T scale = static_cast<T>(upstream / static_cast<double>(batch));
                     for (std::size_t b = 0; b < batch; ++b) {
                       gv[b * k + static_cast<std::size_t>(targets[b])] -= T(1);
                       for (std::size_t j = 0; j < k; ++j) gv[b * k + j] *= scale;
                     }
                   });
                   pl.accumulate(gl);
                 });
}

// ---------------------------------------------------------------------------

double kaiming_uniform_bound(std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }

Tensor kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng, DType dtype) {
  const double bound = kaiming_uniform_bound(fan_in);
  Tensor t(shape, dtype);
  t.visit([&](auto s) {
    using T = typename decltype(s)::value_type;
    for (auto& v : s) v = static_cast<T>(rng.uniform(-bound, bound));
  });
  return t;
}

Conv2dLayer::Conv2dLayer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride_,
                         std::size_t pad_, Rng& rng, DType dtype)
    : weight(kaiming_uniform({out_channels, in_channels, kernel, kernel}, in_channels * kernel * kernel, rng, dtype),
             true),
      bias(Tensor({out_channels}, dtype), true),
      stride(stride_),
      pad(pad_) {}

void Conv2dLayer::collect(const std::string& prefix, NamedParameters& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

BatchNormLayer::BatchNormLayer(std::size_t channels, DType dtype)
    : gamma(Tensor::full({channels}, 1.0, dtype), true),
      beta(Tensor({channels}, dtype), true),
      running_mean(Tensor({channels}, dtype)),
      running_var(Tensor::full({channels}, 1.0, dtype)) {}

Var BatchNormLayer::forward(const Var& x, Mode mode) {
  if (mode == Mode::eval) return batchnorm_eval(x, gamma, beta, running_mean, running_var, eps);
  BatchStats stats;
  Var y = batchnorm_train(x, gamma, beta, eps, &stats);
  const double n = static_cast<double>(stats.count);
  for (std::size_t c = 0; c < stats.mean.size(); ++c) {
    const double unbiased = stats.biased_var[c] * n / (n - 1.0);
    running_mean.set(c, (1.0 - momentum) * running_mean.at(c) + momentum * stats.mean[c]);
    running_var.set(c, (1.0 - momentum) * running_var.at(c) + momentum * unbiased);
  }
  return y;
}

void BatchNormLayer::collect(const std::string& prefix, NamedParameters& out) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

DropoutLayer::DropoutLayer(double rate_, Rng rng_) : rate(rate_), rng(rng_) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ContractError("dropout: rate " + std::to_string(rate) + " not in [0,1)");
}

Tensor DropoutLayer::draw_mask(const Shape& shape, DType dtype) {
  const double keep = 1.0 - rate;
  const double scale = 1.0 / keep;
  Tensor mask(shape, dtype);
  mask.visit([&](auto s) {
    using T = typename decltype(s)::value_type;
    for (auto& v : s) v = rng.uniform() < keep ? static_cast<T>(scale) : T(0);
  });
  return mask;
}

Var DropoutLayer::forward(const Var& x, Mode mode) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ContractError("dropout: rate " + std::to_string(rate) + " not in [0,1)");
  if (mode == Mode::eval || rate == 0.0) return x;
  return apply_mask(x, draw_mask(x.shape(), x.dtype()));
}

LinearLayer::LinearLayer(std::size_t in_features, std::size_t out_features, Rng& rng, DType dtype)
    : weight(kaiming_uniform({out_features, in_features}, in_features, rng, dtype), true),
      bias(Tensor({out_features}, dtype), true) {}

void LinearLayer::collect(const std::string& prefix, NamedParameters& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

}  // namespace mvapad
