#include "casdiff/ops.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <string>

namespace casdiff::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MutStridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
bool wants(const Var<T>& v) {
  return v && v->requires_grad;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw InvalidArgument(msg);
}

struct ConvGeom {
  int n, cin, h, w, cout, k, stride, pad, ho, wo;
  int rows() const { return cin * k * k; }
  long cols() const { return static_cast<long>(n) * ho * wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const long cols = g.cols();
  const long plane = static_cast<long>(g.ho) * g.wo;
  for (int c = 0; c < g.cin; ++c) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        T* dst = col + ((static_cast<long>(c) * g.k + ki) * g.k + kj) * cols;
        for (int n = 0; n < g.n; ++n) {
          const T* src = x + (static_cast<long>(n) * g.cin + c) * g.h * g.w;
          for (int oy = 0; oy < g.ho; ++oy) {
            T* d = dst + n * plane + static_cast<long>(oy) * g.wo;
            const int iy = oy * g.stride - g.pad + ki;
            if (iy < 0 || iy >= g.h) {
              std::fill(d, d + g.wo, T(0));
              continue;
            }
            const T* row = src + static_cast<long>(iy) * g.w;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kj;
              d[ox] = (ix >= 0 && ix < g.w) ? row[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  const long cols = g.cols();
  const long plane = static_cast<long>(g.ho) * g.wo;
  for (int c = 0; c < g.cin; ++c) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const T* src = col + ((static_cast<long>(c) * g.k + ki) * g.k + kj) * cols;
        for (int n = 0; n < g.n; ++n) {
          T* dst = x + (static_cast<long>(n) * g.cin + c) * g.h * g.w;
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ki;
            if (iy < 0 || iy >= g.h) continue;
            const T* s = src + n * plane + static_cast<long>(oy) * g.wo;
            T* row = dst + static_cast<long>(iy) * g.w;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kj;
              if (ix >= 0 && ix < g.w) row[ix] += s[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a->value, b->value, "add");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!wants(p)) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a->value;
  for (auto& v : out.values()) v *= s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <typename T>
Var<T> add_channel(const Var<T>& x, const Var<T>& e) {
  const auto& xs = x->value.shape();
  require(xs.size() == 4 && e->value.rank() == 2 && e->value.dim(0) == xs[0] && e->value.dim(1) == xs[1],
          "add_channel: expected x (N,C,H,W) and e (N,C)");
  const int nc = xs[0] * xs[1];
  const int plane = xs[2] * xs[3];
  Tensor<T> out = x->value;
  for (int i = 0; i < nc; ++i) {
    const T v = e->value[static_cast<std::size_t>(i)];
    T* p = out.data() + static_cast<long>(i) * plane;
    for (int j = 0; j < plane; ++j) p[j] += v;
  }
  return make_result<T>(std::move(out), {x, e}, [nc, plane](Node<T>& self) {
    if (wants(self.parents[0])) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self.parents[1])) {
      auto& g = self.parents[1]->grad_buffer();
      for (int i = 0; i < nc; ++i) {
        const T* p = self.grad.data() + static_cast<long>(i) * plane;
        T acc = 0;
        for (int j = 0; j < plane; ++j) acc += p[j];
        g[static_cast<std::size_t>(i)] += acc;
      }
    }
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out(x->value.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x->value[i];
    out[i] = v / (T(1) + std::exp(-v));
  }
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& in = self.parents[0];
    auto& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = in->value[i];
      const T s = T(1) / (T(1) + std::exp(-v));
      g[i] += self.grad[i] * s * (T(1) + v * (T(1) - s));
    }
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int pad) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  require(xs.size() == 4 && ws.size() == 4, "conv2d: expected 4-D input and weight");
  require(ws[1] == xs[1], "conv2d: weight expects " + std::to_string(ws[1]) + " input channels, got " +
                              std::to_string(xs[1]));
  require(ws[2] == ws[3] && stride >= 1 && pad >= 0, "conv2d: square kernel and positive stride required");
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  require(g.ho > 0 && g.wo > 0, "conv2d: kernel larger than padded input");
  if (bias) require(bias->value.size() == static_cast<std::size_t>(g.cout), "conv2d: bias size");

  const long cols = g.cols();
  const long plane = static_cast<long>(g.ho) * g.wo;
  RowMat<T> col(g.rows(), cols);
  im2col(x->value.data(), g, col.data());
  RowMat<T> prod(g.cout, cols);
  prod.noalias() = ConstMatMap<T>(w->value.data(), g.cout, g.rows()) * col;

  Tensor<T> out({g.n, g.cout, g.ho, g.wo});
  for (int n = 0; n < g.n; ++n) {
    for (int co = 0; co < g.cout; ++co) {
      const T b = bias ? bias->value[static_cast<std::size_t>(co)] : T(0);
      const T* src = prod.data() + co * cols + n * plane;
      T* dst = out.data() + (static_cast<long>(n) * g.cout + co) * plane;
      for (long i = 0; i < plane; ++i) dst[i] = src[i] + b;
    }
  }
  std::vector<Var<T>> parents{x, w};
  if (bias) parents.push_back(bias);
  return make_result<T>(std::move(out), std::move(parents), [g, cols, plane](Node<T>& self) {
    const auto& xin = self.parents[0];
    const auto& wt = self.parents[1];
    RowMat<T> dout(g.cout, cols);
    for (int n = 0; n < g.n; ++n) {
      for (int co = 0; co < g.cout; ++co) {
        const T* src = self.grad.data() + (static_cast<long>(n) * g.cout + co) * plane;
        std::copy(src, src + plane, dout.data() + co * cols + n * plane);
      }
    }
    if (self.parents.size() > 2 && wants(self.parents[2])) {
      auto& gb = self.parents[2]->grad_buffer();
      for (int co = 0; co < g.cout; ++co) gb[static_cast<std::size_t>(co)] += dout.row(co).sum();
    }
    if (wants(wt)) {
      RowMat<T> col(g.rows(), cols);
      im2col(xin->value.data(), g, col.data());
      MatMap<T>(wt->grad_buffer().data(), g.cout, g.rows()).noalias() += dout * col.transpose();
    }
    if (wants(xin)) {
      RowMat<T> dcol(g.rows(), cols);
      dcol.noalias() = ConstMatMap<T>(wt->value.data(), g.cout, g.rows()).transpose() * dout;
      col2im(dcol.data(), g, xin->grad_buffer().data());
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  require(w->value.rank() == 2, "linear: weight must be 2-D");
  const int din = w->value.dim(1);
  const int dout = w->value.dim(0);
  require(x->value.rank() >= 1 && x->value.dim(-1) == din,
          "linear: input last axis " + std::to_string(x->value.dim(-1)) + " != " + std::to_string(din));
  if (bias) require(bias->value.size() == static_cast<std::size_t>(dout), "linear: bias size");
  const long m = static_cast<long>(x->value.size() / static_cast<std::size_t>(din));
  std::vector<int> shape = x->value.shape();
  shape.back() = dout;
  Tensor<T> out(shape);
  MatMap<T> o(out.data(), m, dout);
  o.noalias() = ConstMatMap<T>(x->value.data(), m, din) * ConstMatMap<T>(w->value.data(), dout, din).transpose();
  if (bias) o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->value.data(), dout);
  std::vector<Var<T>> parents{x, w};
  if (bias) parents.push_back(bias);
  return make_result<T>(std::move(out), std::move(parents), [m, din, dout](Node<T>& self) {
    ConstMatMap<T> go(self.grad.data(), m, dout);
    const auto& xin = self.parents[0];
    const auto& wt = self.parents[1];
    if (wants(xin)) {
      MatMap<T>(xin->grad_buffer().data(), m, din).noalias() += go * ConstMatMap<T>(wt->value.data(), dout, din);
    }
    if (wants(wt)) {
      MatMap<T>(wt->grad_buffer().data(), dout, din).noalias() +=
          go.transpose() * ConstMatMap<T>(xin->value.data(), m, din);
    }
    if (self.parents.size() > 2 && wants(self.parents[2])) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(self.parents[2]->grad_buffer().data(), dout) +=
          go.colwise().sum();
    }
  });
}

namespace {

// Shared normalization kernel: `count` independent segments of `len`
// elements; element j of a segment uses affine index chan(j).
template <typename T, typename ChanFn>
Var<T> normalize(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, long count, long len, T eps,
                 ChanFn chan) {
  Tensor<T> out(x->value.shape());
  auto xhat = std::make_shared<std::vector<T>>(x->value.size());
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(count));
  for (long s = 0; s < count; ++s) {
    const T* src = x->value.data() + s * len;
    double mean = 0;
    for (long j = 0; j < len; ++j) mean += src[j];
    mean /= static_cast<double>(len);
    double var = 0;
    for (long j = 0; j < len; ++j) {
      const double d = src[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(len);
    const T r = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    (*rstd)[static_cast<std::size_t>(s)] = r;
    T* xh = xhat->data() + s * len;
    T* dst = out.data() + s * len;
    for (long j = 0; j < len; ++j) {
      xh[j] = static_cast<T>(src[j] - mean) * r;
      const auto c = static_cast<std::size_t>(chan(s, j));
      dst[j] = xh[j] * gamma->value[c] + beta->value[c];
    }
  }
  return make_result<T>(std::move(out), {x, gamma, beta}, [xhat, rstd, count, len, chan](Node<T>& self) {
    const auto& xin = self.parents[0];
    const auto& gamma = self.parents[1];
    const bool gx = wants(xin), gg = wants(gamma), gb = wants(self.parents[2]);
    T* dx = gx ? xin->grad_buffer().data() : nullptr;
    T* dgamma = gg ? gamma->grad_buffer().data() : nullptr;
    T* dbeta = gb ? self.parents[2]->grad_buffer().data() : nullptr;
    std::vector<T> dxhat(static_cast<std::size_t>(len));
    for (long s = 0; s < count; ++s) {
      const T* dy = self.grad.data() + s * len;
      const T* xh = xhat->data() + s * len;
      double m1 = 0, m2 = 0;
      for (long j = 0; j < len; ++j) {
        const auto c = static_cast<std::size_t>(chan(s, j));
        if (dgamma) dgamma[c] += dy[j] * xh[j];
        if (dbeta) dbeta[c] += dy[j];
        dxhat[static_cast<std::size_t>(j)] = dy[j] * gamma->value[c];
        m1 += dxhat[static_cast<std::size_t>(j)];
        m2 += static_cast<double>(dxhat[static_cast<std::size_t>(j)]) * xh[j];
      }
      if (!dx) continue;
      m1 /= static_cast<double>(len);
      m2 /= static_cast<double>(len);
      const T r = (*rstd)[static_cast<std::size_t>(s)];
      T* d = dx + s * len;
      for (long j = 0; j < len; ++j) {
        d[j] += r * static_cast<T>(dxhat[static_cast<std::size_t>(j)] - m1 - xh[j] * m2);
      }
    }
  });
}

}  // namespace

template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps) {
  const auto& xs = x->value.shape();
  require(xs.size() == 4, "group_norm: expected (N,C,H,W)");
  const int channels = xs[1];
  require(groups > 0 && channels % groups == 0, "group_norm: channels not divisible by groups");
  require(gamma->value.size() == static_cast<std::size_t>(channels) && beta->value.size() == gamma->value.size(),
          "group_norm: affine size");
  const int per_group = channels / groups;
  const long plane = static_cast<long>(xs[2]) * xs[3];
  const long len = per_group * plane;
  return normalize<T>(x, gamma, beta, static_cast<long>(xs[0]) * groups, len, eps,
                      [groups, per_group, plane](long s, long j) { return (s % groups) * per_group + j / plane; });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const int d = x->value.dim(-1);
  require(gamma->value.size() == static_cast<std::size_t>(d) && beta->value.size() == gamma->value.size(),
          "layer_norm: affine size");
  const long count = static_cast<long>(x->value.size() / static_cast<std::size_t>(d));
  return normalize<T>(x, gamma, beta, count, d, eps, [](long, long j) { return j; });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  const auto& xs = x->value.shape();
  require(xs.size() == 4, "upsample: expected (N,C,H,W)");
  const int h = xs[2], w = xs[3];
  const long planes = static_cast<long>(xs[0]) * xs[1];
  Tensor<T> out({xs[0], xs[1], 2 * h, 2 * w});
  for (long p = 0; p < planes; ++p) {
    const T* src = x->value.data() + p * h * w;
    T* dst = out.data() + p * 4 * h * w;
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
  }
  return make_result<T>(std::move(out), {x}, [planes, h, w](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (long p = 0; p < planes; ++p) {
      const T* src = self.grad.data() + p * 4 * h * w;
      T* dst = g.data() + p * h * w;
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
    }
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto& as = a->value.shape();
  const auto& bs = b->value.shape();
  require(as.size() == 4 && bs.size() == 4 && as[0] == bs[0] && as[2] == bs[2] && as[3] == bs[3],
          "concat_channels: incompatible shapes " + Tensor<T>::shape_string(as) + " and " +
              Tensor<T>::shape_string(bs));
  const long plane = static_cast<long>(as[2]) * as[3];
  const long la = as[1] * plane, lb = bs[1] * plane;
  Tensor<T> out({as[0], as[1] + bs[1], as[2], as[3]});
  for (int n = 0; n < as[0]; ++n) {
    std::copy_n(a->value.data() + n * la, la, out.data() + n * (la + lb));
    std::copy_n(b->value.data() + n * lb, lb, out.data() + n * (la + lb) + la);
  }
  return make_result<T>(std::move(out), {a, b}, [la, lb, batch = as[0]](Node<T>& self) {
    for (int which = 0; which < 2; ++which) {
      if (!wants(self.parents[static_cast<std::size_t>(which)])) continue;
      auto& g = self.parents[static_cast<std::size_t>(which)]->grad_buffer();
      const long len = which == 0 ? la : lb;
      const long off = which == 0 ? 0 : la;
      for (int n = 0; n < batch; ++n) {
        const T* src = self.grad.data() + n * (la + lb) + off;
        T* dst = g.data() + n * len;
        for (long i = 0; i < len; ++i) dst[i] += src[i];
      }
    }
  });
}

namespace {

// (N,A,B) -> (N,B,A) for contiguous per-batch blocks.
template <typename T>
void transpose_blocks(const T* src, T* dst, int batch, int a, int b, bool accumulate) {
  for (int n = 0; n < batch; ++n) {
    ConstMatMap<T> s(src + static_cast<long>(n) * a * b, a, b);
    MatMap<T> d(dst + static_cast<long>(n) * a * b, b, a);
    if (accumulate)
      d += s.transpose();
    else
      d = s.transpose();
  }
}

}  // namespace

template <typename T>
Var<T> to_tokens(const Var<T>& x) {
  const auto& xs = x->value.shape();
  require(xs.size() == 4, "to_tokens: expected (N,C,H,W)");
  const int n = xs[0], c = xs[1], hw = xs[2] * xs[3];
  Tensor<T> out({n, hw, c});
  transpose_blocks(x->value.data(), out.data(), n, c, hw, false);
  return make_result<T>(std::move(out), {x}, [n, c, hw](Node<T>& self) {
    transpose_blocks(self.grad.data(), self.parents[0]->grad_buffer().data(), n, hw, c, true);
  });
}

template <typename T>
Var<T> from_tokens(const Var<T>& x, int height, int width) {
  const auto& xs = x->value.shape();
  require(xs.size() == 3 && xs[1] == height * width, "from_tokens: token count does not match spatial size");
  const int n = xs[0], hw = xs[1], c = xs[2];
  Tensor<T> out({n, c, height, width});
  transpose_blocks(x->value.data(), out.data(), n, hw, c, false);
  return make_result<T>(std::move(out), {x}, [n, c, hw](Node<T>& self) {
    transpose_blocks(self.grad.data(), self.parents[0]->grad_buffer().data(), n, c, hw, true);
  });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                 const std::vector<std::vector<int>>& valid_keys) {
  const auto& qs = q->value.shape();
  const auto& ks = k->value.shape();
  require(qs.size() == 3 && ks.size() == 3 && k->value.shape() == v->value.shape(), "attention: expected 3-D q, k, v");
  require(qs[0] == ks[0] && qs[2] == ks[2], "attention: batch or width mismatch");
  const int batch = qs[0], lq = qs[1], lk = ks[1], width = qs[2];
  require(heads >= 1 && width % heads == 0, "attention: width not divisible by head count");
  require(valid_keys.empty() || valid_keys.size() == static_cast<std::size_t>(batch), "attention: mask batch size");
  const int d = width / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(d));

  // Per batch item: the key rows taking part.
  auto keys = std::make_shared<std::vector<std::vector<int>>>(static_cast<std::size_t>(batch));
  for (int n = 0; n < batch; ++n) {
    auto& list = (*keys)[static_cast<std::size_t>(n)];
    if (valid_keys.empty()) {
      list.resize(static_cast<std::size_t>(lk));
      std::iota(list.begin(), list.end(), 0);
    } else {
      list = valid_keys[static_cast<std::size_t>(n)];
      for (int idx : list) require(idx >= 0 && idx < lk, "attention: key index out of range");
      require(!list.empty(), "attention: no valid keys for batch item " + std::to_string(n));
    }
  }

  auto probs = std::make_shared<std::vector<RowMat<T>>>(static_cast<std::size_t>(batch * heads));
  Tensor<T> out({batch, lq, width});
  for (int n = 0; n < batch; ++n) {
    const auto& list = (*keys)[static_cast<std::size_t>(n)];
    const int lv = static_cast<int>(list.size());
    for (int h = 0; h < heads; ++h) {
      const long qoff = static_cast<long>(n) * lq * width + h * d;
      const long koff = static_cast<long>(n) * lk * width + h * d;
      StridedMap<T> qh(q->value.data() + qoff, lq, d, Eigen::OuterStride<>(width));
      RowMat<T> kh(lv, d), vh(lv, d);
      for (int j = 0; j < lv; ++j) {
        const long row = koff + static_cast<long>(list[static_cast<std::size_t>(j)]) * width;
        for (int e = 0; e < d; ++e) {
          kh(j, e) = k->value[static_cast<std::size_t>(row + e)];
          vh(j, e) = v->value[static_cast<std::size_t>(row + e)];
        }
      }
      RowMat<T> s = (qh * kh.transpose()) * scale;
      for (int i = 0; i < lq; ++i) {
        const T mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
      }
      MutStridedMap<T>(out.data() + qoff, lq, d, Eigen::OuterStride<>(width)).noalias() = s * vh;
      (*probs)[static_cast<std::size_t>(n * heads + h)] = std::move(s);
    }
  }

  return make_result<T>(
      std::move(out), {q, k, v}, [keys, probs, batch, lq, lk, width, heads, d, scale](Node<T>& self) {
        const auto& qn = self.parents[0];
        const auto& kn = self.parents[1];
        const auto& vn = self.parents[2];
        T* dq = wants(qn) ? qn->grad_buffer().data() : nullptr;
        T* dk = wants(kn) ? kn->grad_buffer().data() : nullptr;
        T* dv = wants(vn) ? vn->grad_buffer().data() : nullptr;
        for (int n = 0; n < batch; ++n) {
          const auto& list = (*keys)[static_cast<std::size_t>(n)];
          const int lv = static_cast<int>(list.size());
          for (int h = 0; h < heads; ++h) {
            const long qoff = static_cast<long>(n) * lq * width + h * d;
            const long koff = static_cast<long>(n) * lk * width + h * d;
            const RowMat<T>& p = (*probs)[static_cast<std::size_t>(n * heads + h)];
            StridedMap<T> qh(qn->value.data() + qoff, lq, d, Eigen::OuterStride<>(width));
            StridedMap<T> go(self.grad.data() + qoff, lq, d, Eigen::OuterStride<>(width));
            RowMat<T> kh(lv, d), vh(lv, d);
            for (int j = 0; j < lv; ++j) {
              const long row = koff + static_cast<long>(list[static_cast<std::size_t>(j)]) * width;
              for (int e = 0; e < d; ++e) {
                kh(j, e) = kn->value[static_cast<std::size_t>(row + e)];
                vh(j, e) = vn->value[static_cast<std::size_t>(row + e)];
              }
            }
            if (dv) {
              RowMat<T> gv = p.transpose() * go;
              for (int j = 0; j < lv; ++j) {
                T* dst = dv + koff + static_cast<long>(list[static_cast<std::size_t>(j)]) * width;
                for (int e = 0; e < d; ++e) dst[e] += gv(j, e);
              }
            }
            if (!dq && !dk) continue;
            RowMat<T> dp = go * vh.transpose();
            RowMat<T> ds(lq, lv);
            for (int i = 0; i < lq; ++i) {
              const T dot = (dp.row(i).array() * p.row(i).array()).sum();
              ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
            }
            if (dq) MutStridedMap<T>(dq + qoff, lq, d, Eigen::OuterStride<>(width)) += (ds * kh) * scale;
            if (dk) {
              RowMat<T> gk = (ds.transpose() * qh) * scale;
              for (int j = 0; j < lv; ++j) {
                T* dst = dk + koff + static_cast<long>(list[static_cast<std::size_t>(j)]) * width;
                for (int e = 0; e < d; ++e) dst[e] += gk(j, e);
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const auto& xs = x->value.shape();
  require(xs.size() == 4, "global_avg_pool: expected (N,C,H,W)");
  const long planes = static_cast<long>(xs[0]) * xs[1];
  const long plane = static_cast<long>(xs[2]) * xs[3];
  Tensor<T> out({xs[0], xs[1]});
  for (long p = 0; p < planes; ++p) {
    const T* src = x->value.data() + p * plane;
    T acc = 0;
    for (long i = 0; i < plane; ++i) acc += src[i];
    out[static_cast<std::size_t>(p)] = acc / static_cast<T>(plane);
  }
  return make_result<T>(std::move(out), {x}, [planes, plane](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (long p = 0; p < planes; ++p) {
      const T v = self.grad[static_cast<std::size_t>(p)] / static_cast<T>(plane);
      T* dst = g.data() + p * plane;
      for (long i = 0; i < plane; ++i) dst[i] += v;
    }
  });
}

template <typename T>
Var<T> weighted_mse(const Var<T>& pred, const Tensor<T>& target, const std::vector<double>& weight) {
  require_same_shape(pred->value, target, "weighted_mse");
  const int batch = pred->value.dim(0);
  require(weight.size() == static_cast<std::size_t>(batch), "weighted_mse: one weight per batch item");
  const std::size_t per = pred->value.size() / static_cast<std::size_t>(batch);
  double total = 0;
  for (int n = 0; n < batch; ++n) {
    double acc = 0;
    const std::size_t off = per * static_cast<std::size_t>(n);
    for (std::size_t i = 0; i < per; ++i) {
      const double diff = static_cast<double>(pred->value[off + i]) - static_cast<double>(target[off + i]);
      acc += diff * diff;
    }
    total += weight[static_cast<std::size_t>(n)] * acc / static_cast<double>(per);
  }
  Tensor<T> out({1}, static_cast<T>(total / batch));
  return make_result<T>(std::move(out), {pred}, [target, weight, batch, per](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double up = static_cast<double>(self.grad[0]);
    for (int n = 0; n < batch; ++n) {
      const double c = 2.0 * up * weight[static_cast<std::size_t>(n)] / (static_cast<double>(per) * batch);
      const std::size_t off = per * static_cast<std::size_t>(n);
      for (std::size_t i = 0; i < per; ++i) {
        g[off + i] += static_cast<T>(c * (static_cast<double>(self.parents[0]->value[off + i]) -
                                          static_cast<double>(target[off + i])));
      }
    }
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  require(logits.rank() == 2, "softmax_rows: expected (N,K)");
  const int n = logits.dim(0), k = logits.dim(1);
  Tensor<T> out(logits.shape());
  for (int i = 0; i < n; ++i) {
    const T* src = logits.data() + static_cast<long>(i) * k;
    T* dst = out.data() + static_cast<long>(i) * k;
    const T mx = *std::max_element(src, src + k);
    double sum = 0;
    for (int j = 0; j < k; ++j) sum += std::exp(static_cast<double>(src[j] - mx));
    for (int j = 0; j < k; ++j) dst[j] = static_cast<T>(std::exp(static_cast<double>(src[j] - mx)) / sum);
  }
  return out;
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const Tensor<T> probs = softmax_rows(logits->value);
  const int n = probs.dim(0), k = probs.dim(1);
  require(labels.size() == static_cast<std::size_t>(n), "softmax_cross_entropy: one label per row");
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    require(l >= 0 && l < k, "softmax_cross_entropy: label out of range");
    loss -= std::log(std::max(static_cast<double>(probs[static_cast<std::size_t>(i * k + l)]), 1e-300));
  }
  Tensor<T> out({1}, static_cast<T>(loss / n));
  return make_result<T>(std::move(out), {logits}, [probs, labels, n, k](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const T up = self.grad[0] / static_cast<T>(n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < k; ++j) {
        const auto idx = static_cast<std::size_t>(i * k + j);
        g[idx] += up * (probs[idx] - (j == labels[static_cast<std::size_t>(i)] ? T(1) : T(0)));
      }
    }
  });
}

template <typename T>
Var<T> dot_constant(const Var<T>& x, const Tensor<T>& c) {
  require_same_shape(x->value, c, "dot_constant");
  double acc = 0;
  for (std::size_t i = 0; i < c.size(); ++i) acc += static_cast<double>(x->value[i]) * c[i];
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc)), {x}, [c](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * c[i];
  });
}

#define CASDIFF_INSTANTIATE_OPS(T)                                                                               \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                          \
  template Var<T> scale<T>(const Var<T>&, T);                                                                    \
  template Var<T> add_channel<T>(const Var<T>&, const Var<T>&);                                                  \
  template Var<T> silu<T>(const Var<T>&);                                                                        \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                              \
  template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                        \
  template Var<T> group_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, T);                            \
  template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                                 \
  template Var<T> upsample_nearest2x<T>(const Var<T>&);                                                          \
  template Var<T> concat_channels<T>(const Var<T>&, const Var<T>&);                                              \
  template Var<T> to_tokens<T>(const Var<T>&);                                                                   \
  template Var<T> from_tokens<T>(const Var<T>&, int, int);                                                       \
  template Var<T> attention<T>(const Var<T>&, const Var<T>&, const Var<T>&, int,                                 \
                               const std::vector<std::vector<int>>&);                                            \
  template Var<T> global_avg_pool<T>(const Var<T>&);                                                             \
  template Var<T> weighted_mse<T>(const Var<T>&, const Tensor<T>&, const std::vector<double>&);                  \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                                          \
  template Var<T> softmax_cross_entropy<T>(const Var<T>&, const std::vector<int>&);                              \
  template Var<T> dot_constant<T>(const Var<T>&, const Tensor<T>&);

CASDIFF_INSTANTIATE_OPS(float)
CASDIFF_INSTANTIATE_OPS(double)

}  // namespace casdiff::ops
