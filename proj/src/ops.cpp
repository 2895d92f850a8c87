#include "hpnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace hpnet {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
  }
}

struct ConvGeometry {
  std::size_t channels, height, width, kh, kw, stride, padding, out_h, out_w;
};

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t out_hw = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * out_hw;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.padding);
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + j) - static_cast<long>(g.padding);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<long>(g.height) &&
                                iw < static_cast<long>(g.width);
            row[oh * g.out_w + ow] =
                inside ? x[(c * g.height + static_cast<std::size_t>(ih)) * g.width +
                           static_cast<std::size_t>(iw)]
                       : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* dx) {
  const std::size_t out_hw = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * out_hw;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + i) - static_cast<long>(g.padding);
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + j) - static_cast<long>(g.padding);
            if (iw < 0 || iw >= static_cast<long>(g.width)) continue;
            dx[(c * g.height + static_cast<std::size_t>(ih)) * g.width +
               static_cast<std::size_t>(iw)] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

template <typename Fn>
Tensor unary(const Tensor& x, Fn&& fn, std::vector<double> derivative) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(x[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x},
                             [d = std::move(derivative)](detail::Node& self) {
                               auto& gx = self.parents[0]->grad;
                               if (gx.empty()) return;
                               for (std::size_t i = 0; i < d.size(); ++i) gx[i] += self.grad[i] * d[i];
                             });
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t f = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != c) {
    throw DimensionError("conv2d: input axis 1 (channels) = " + std::to_string(c) +
                         " but kernel axis 1 (channels) = " + std::to_string(kernel.dim(1)));
  }
  if (kh > h + 2 * padding || kw > w + 2 * padding) {
    throw DimensionError("conv2d: kernel axes 2,3 (" + std::to_string(kh) + "x" +
                         std::to_string(kw) + ") exceed padded input axes 2,3 (" +
                         std::to_string(h + 2 * padding) + "x" + std::to_string(w + 2 * padding) +
                         ")");
  }
  const ConvGeometry g{c, h, w, kh, kw, stride, padding, (h + 2 * padding - kh) / stride + 1,
                       (w + 2 * padding - kw) / stride + 1};
  const std::size_t ckk = c * kh * kw, out_hw = g.out_h * g.out_w;
  const bool identity_cols = kh == 1 && kw == 1 && stride == 1 && padding == 0;

  std::vector<double> out(n * f * out_hw);
  std::vector<double> cols(identity_cols ? 0 : ckk * out_hw);
  ConstMapMat k(kernel.data().data(), f, ckk);
  for (std::size_t b = 0; b < n; ++b) {
    const double* x = input.data().data() + b * c * h * w;
    const double* col_ptr = x;
    if (!identity_cols) {
      im2col(x, g, cols.data());
      col_ptr = cols.data();
    }
    MapMat(out.data() + b * f * out_hw, f, out_hw).noalias() = k * ConstMapMat(col_ptr, ckk, out_hw);
  }

  return Tensor::make_result(
      {n, f, g.out_h, g.out_w}, std::move(out), {input, kernel},
      [g, n, f, ckk, out_hw, identity_cols](detail::Node& self) {
        detail::Node& in = *self.parents[0];
        detail::Node& ker = *self.parents[1];
        const std::size_t in_size = g.channels * g.height * g.width;
        std::vector<double> cols(identity_cols ? 0 : ckk * out_hw);
        std::vector<double> dcols(ckk * out_hw);
        ConstMapMat k(ker.data.data(), f, ckk);
        for (std::size_t b = 0; b < n; ++b) {
          ConstMapMat dout(self.grad.data() + b * f * out_hw, f, out_hw);
          const double* x = in.data.data() + b * in_size;
          if (!ker.grad.empty()) {
            const double* col_ptr = x;
            if (!identity_cols) {
              im2col(x, g, cols.data());
              col_ptr = cols.data();
            }
            MapMat(ker.grad.data(), f, ckk).noalias() +=
                dout * ConstMapMat(col_ptr, ckk, out_hw).transpose();
          }
          if (!in.grad.empty()) {
            double* dx = in.grad.data() + b * in_size;
            if (identity_cols) {
              MapMat(dx, ckk, out_hw).noalias() += k.transpose() * dout;
            } else {
              MapMat(dcols.data(), ckk, out_hw).noalias() = k.transpose() * dout;
              col2im_add(dcols.data(), g, dx);
            }
          }
        }
      });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw DimensionError("add_channel_bias: input axis 1 of " + shape_str(x.shape()) +
                         " must equal bias axis 0 of " + shape_str(bias.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
  std::vector<double> out(x.values());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < inner; ++i) out[(b * c + ch) * inner + i] += bias[ch];
  return Tensor::make_result(x.shape(), std::move(out), {x, bias},
                             [n, c, inner](detail::Node& self) {
                               auto& gx = self.parents[0]->grad;
                               auto& gb = self.parents[1]->grad;
                               if (!gx.empty())
                                 for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                               if (!gb.empty())
                                 for (std::size_t b = 0; b < n; ++b)
                                   for (std::size_t ch = 0; ch < c; ++ch)
                                     for (std::size_t i = 0; i < inner; ++i)
                                       gb[ch] += self.grad[(b * c + ch) * inner + i];
                             });
}

Tensor relu(const Tensor& x) {
  std::vector<double> d(x.numel());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = x[i] > 0.0 ? 1.0 : 0.0;
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, std::move(d));
}

Tensor sigmoid(const Tensor& x) {
  auto sig = [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  };
  std::vector<double> d(x.numel());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double s = sig(x[i]);
    d[i] = s * (1.0 - s);
  }
  return unary(x, sig, std::move(d));
}

Tensor max_pool2d(const Tensor& x, std::size_t window) {
  require_rank(x, 4, "max_pool2d");
  if (window == 0 || window > x.dim(2) || window > x.dim(3)) {
    throw DimensionError("max_pool2d: window " + std::to_string(window) +
                         " does not fit spatial axes 2,3 of " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / window, ow = w / window;
  std::vector<double> out(n * c * oh * ow);
  std::vector<std::size_t> src(out.size());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* in = x.data().data() + plane * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = (i * window) * w + j * window;
        for (std::size_t a = 0; a < window; ++a)
          for (std::size_t b = 0; b < window; ++b) {
            const std::size_t idx = (i * window + a) * w + j * window + b;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (plane * oh + i) * ow + j;
        out[o] = in[best];
        src[o] = plane * h * w + best;
      }
    }
  }
  return Tensor::make_result({n, c, oh, ow}, std::move(out), {x},
                             [src = std::move(src)](detail::Node& self) {
                               auto& gx = self.parents[0]->grad;
                               if (gx.empty()) return;
                               for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += self.grad[o];
                             });
}

SpatialMax spatial_max(const Tensor& maps) {
  require_rank(maps, 4, "spatial_max");
  const std::size_t n = maps.dim(0), m = maps.dim(1), h = maps.dim(2), w = maps.dim(3);
  if (h == 0 || w == 0) throw DimensionError("spatial_max: empty spatial axes 2,3");
  std::vector<double> out(n * m);
  std::vector<std::size_t> src(n * m);
  std::vector<GridPos> pos(n * m);
  for (std::size_t plane = 0; plane < n * m; ++plane) {
    const double* in = maps.data().data() + plane * h * w;
    std::size_t best = 0;
    for (std::size_t i = 1; i < h * w; ++i)
      if (in[i] > in[best]) best = i;
    out[plane] = in[best];
    src[plane] = plane * h * w + best;
    pos[plane] = GridPos{best / w, best % w};
  }
  Tensor values = Tensor::make_result({n, m}, std::move(out), {maps},
                                      [src = std::move(src)](detail::Node& self) {
                                        auto& gx = self.parents[0]->grad;
                                        if (gx.empty()) return;
                                        for (std::size_t o = 0; o < src.size(); ++o)
                                          gx[src[o]] += self.grad[o];
                                      });
  return {std::move(values), std::move(pos)};
}

Tensor squared_distances(const Tensor& z, const Tensor& prototypes) {
  require_rank(z, 4, "squared_distances latent");
  require_rank(prototypes, 2, "squared_distances prototypes");
  const std::size_t n = z.dim(0), d = z.dim(1), h = z.dim(2), w = z.dim(3);
  const std::size_t m = prototypes.dim(0), hw = h * w;
  if (prototypes.dim(1) != d) {
    throw DimensionError("squared_distances: latent axis 1 (depth) = " + std::to_string(d) +
                         " but prototype axis 1 = " + std::to_string(prototypes.dim(1)));
  }
  std::vector<double> out(n * m * hw, 0.0);
  const double* zp = z.data().data();
  const double* pp = prototypes.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t j = 0; j < m; ++j) {
      double* o = out.data() + (b * m + j) * hw;
      for (std::size_t k = 0; k < d; ++k) {
        const double p = pp[j * d + k];
        const double* zk = zp + (b * d + k) * hw;
        for (std::size_t s = 0; s < hw; ++s) {
          const double diff = zk[s] - p;
          o[s] += diff * diff;
        }
      }
    }
  }
  return Tensor::make_result(
      {n, m, h, w}, std::move(out), {z, prototypes}, [n, d, m, hw](detail::Node& self) {
        detail::Node& zn = *self.parents[0];
        detail::Node& pn = *self.parents[1];
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t j = 0; j < m; ++j) {
            const double* g = self.grad.data() + (b * m + j) * hw;
            for (std::size_t k = 0; k < d; ++k) {
              const double p = pn.data[j * d + k];
              const double* zk = zn.data.data() + (b * d + k) * hw;
              double gp = 0.0;
              if (!zn.grad.empty()) {
                double* gz = zn.grad.data() + (b * d + k) * hw;
                for (std::size_t s = 0; s < hw; ++s) {
                  const double t = 2.0 * g[s] * (zk[s] - p);
                  gz[s] += t;
                  gp -= t;
                }
              } else {
                for (std::size_t s = 0; s < hw; ++s) gp -= 2.0 * g[s] * (zk[s] - p);
              }
              if (!pn.grad.empty()) pn.grad[j * d + k] += gp;
            }
          }
        }
      });
}

Tensor log_similarity(const Tensor& squared_distance, double eps) {
  std::vector<double> d(squared_distance.numel());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double u = squared_distance[i] + eps;
    // d/du log(1 + 1/u) = -1 / (u (u + 1))
    d[i] = -1.0 / (u * (u + 1.0));
  }
  return unary(
      squared_distance, [eps](double v) { return std::log1p(1.0 / (v + eps)); }, std::move(d));
}

Tensor linear(const Tensor& x, const Tensor& weight) {
  require_rank(x, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  const std::size_t n = x.dim(0), k = x.dim(1), c = weight.dim(0);
  if (weight.dim(1) != k) {
    throw DimensionError("linear: input axis 1 = " + std::to_string(k) + " but weight axis 1 = " +
                         std::to_string(weight.dim(1)));
  }
  std::vector<double> out(n * c);
  MapMat(out.data(), n, c).noalias() =
      ConstMapMat(x.data().data(), n, k) * ConstMapMat(weight.data().data(), c, k).transpose();
  return Tensor::make_result({n, c}, std::move(out), {x, weight}, [n, k, c](detail::Node& self) {
    detail::Node& xn = *self.parents[0];
    detail::Node& wn = *self.parents[1];
    ConstMapMat g(self.grad.data(), n, c);
    if (!xn.grad.empty())
      MapMat(xn.grad.data(), n, k).noalias() += g * ConstMapMat(wn.data.data(), c, k);
    if (!wn.grad.empty())
      MapMat(wn.grad.data(), c, k).noalias() += g.transpose() * ConstMapMat(xn.data.data(), n, k);
  });
}

Tensor log_softmax(const Tensor& x) {
  require_rank(x, 2, "log_softmax");
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<double> out(n * c);
  for (std::size_t b = 0; b < n; ++b) {
    const double* row = x.data().data() + b * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) out[b * c + j] = row[j] - lse;
  }
  return Tensor::make_result({n, c}, out, {x}, [n, c, out](detail::Node& self) {
    auto& gx = self.parents[0]->grad;
    if (gx.empty()) return;
    for (std::size_t b = 0; b < n; ++b) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += self.grad[b * c + j];
      for (std::size_t j = 0; j < c; ++j)
        gx[b * c + j] += self.grad[b * c + j] - std::exp(out[b * c + j]) * gs;
    }
  });
}

Tensor pick(const Tensor& x, const std::vector<std::size_t>& index) {
  require_rank(x, 2, "pick");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (index.size() != n) {
    throw DimensionError("pick: " + std::to_string(index.size()) + " indices for axis 0 of size " +
                         std::to_string(n));
  }
  std::vector<double> out(n, 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    if (index[b] == kNoIndex) continue;
    if (index[b] >= c) throw DimensionError("pick: index out of range on axis 1");
    out[b] = x[b * c + index[b]];
  }
  return Tensor::make_result({n}, std::move(out), {x}, [c, index](detail::Node& self) {
    auto& gx = self.parents[0]->grad;
    if (gx.empty()) return;
    for (std::size_t b = 0; b < index.size(); ++b)
      if (index[b] != kNoIndex) gx[b * c + index[b]] += self.grad[b];
  });
}

Tensor min_over_allowed(const Tensor& d, const std::vector<std::vector<std::size_t>>& allowed) {
  require_rank(d, 4, "min_over_allowed");
  const std::size_t n = d.dim(0), m = d.dim(1), hw = d.dim(2) * d.dim(3);
  if (allowed.size() != n) throw DimensionError("min_over_allowed: allowed list size != axis 0");
  std::vector<double> out(n, 0.0);
  std::vector<std::size_t> src(n, kNoIndex);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t j : allowed[b]) {
      if (j >= m) throw DimensionError("min_over_allowed: prototype index out of range on axis 1");
      const double* plane = d.data().data() + (b * m + j) * hw;
      for (std::size_t s = 0; s < hw; ++s) {
        const std::size_t idx = (b * m + j) * hw + s;
        if (src[b] == kNoIndex || plane[s] < d[src[b]]) src[b] = idx;
      }
    }
    if (src[b] != kNoIndex) out[b] = d[src[b]];
  }
  return Tensor::make_result({n}, std::move(out), {d}, [src = std::move(src)](detail::Node& self) {
    auto& gx = self.parents[0]->grad;
    if (gx.empty()) return;
    for (std::size_t b = 0; b < src.size(); ++b)
      if (src[b] != kNoIndex) gx[src[b]] += self.grad[b];
  });
}

Tensor path_sum(const std::vector<Tensor>& parts,
                const std::vector<std::vector<std::pair<std::size_t, std::size_t>>>& paths) {
  if (parts.empty()) throw DimensionError("path_sum: no parts");
  const std::size_t n = parts.front().dim(0), l = paths.size();
  for (const auto& p : parts) {
    require_rank(p, 2, "path_sum part");
    if (p.dim(0) != n) throw DimensionError("path_sum: parts disagree on axis 0");
  }
  std::vector<double> out(n * l, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t leaf = 0; leaf < l; ++leaf)
      for (auto [part, col] : paths[leaf]) {
        const Tensor& t = parts.at(part);
        if (col >= t.dim(1)) throw DimensionError("path_sum: column out of range on axis 1");
        out[b * l + leaf] += t[b * t.dim(1) + col];
      }
  return Tensor::make_result({n, l}, std::move(out), parts, [n, l, paths](detail::Node& self) {
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t leaf = 0; leaf < l; ++leaf)
        for (auto [part, col] : paths[leaf]) {
          detail::Node& p = *self.parents[part];
          if (p.grad.empty()) continue;
          p.grad[b * p.shape[1] + col] += self.grad[b * l + leaf];
        }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_result({1}, {s}, {x}, [](detail::Node& self) {
    auto& gx = self.parents[0]->grad;
    for (double& g : gx) g += self.grad[0];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                         " changes the element count");
  }
  return Tensor::make_result(std::move(shape), x.values(), {x}, [](detail::Node& self) {
    auto& gx = self.parents[0]->grad;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.values());
  for (double& v : out) v *= factor;
  return Tensor::make_result(x.shape(), std::move(out), {x}, [factor](detail::Node& self) {
    auto& gx = self.parents[0]->grad;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * self.grad[i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
  std::vector<double> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (int k = 0; k < 2; ++k) {
      auto& g = self.parents[k]->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor mixed_l2_l1(const Tensor& w, const std::vector<bool>& own_mask) {
  if (own_mask.size() != w.numel()) throw DimensionError("mixed_l2_l1: mask size != numel");
  double s = 0.0;
  for (std::size_t i = 0; i < w.numel(); ++i) s += own_mask[i] ? w[i] * w[i] : std::abs(w[i]);
  return Tensor::make_result({1}, {s}, {w}, [own_mask](detail::Node& self) {
    detail::Node& wn = *self.parents[0];
    if (wn.grad.empty()) return;
    for (std::size_t i = 0; i < wn.data.size(); ++i) {
      const double v = wn.data[i];
      const double g = own_mask[i] ? 2.0 * v : (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
      wn.grad[i] += self.grad[0] * g;
    }
  });
}

}  // namespace hpnet
