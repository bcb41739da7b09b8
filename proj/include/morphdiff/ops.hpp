// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

// Differentiable tensor operations used by every network in the library.
// Layout conventions:
//   images / frustum grids   channels-first  [B, C, spatial...]
//   sparse sites / vertices  rows-first      [rows, C]

#pragma once

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <limits>
#include <memory>

#include "morphdiff/autograd.hpp"

namespace morphdiff::ad {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ConfigError(what);
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  auto out = make_result<T>(a.shape(), {&a, &b});
  const Index n = a.size();
  for (Index i = 0; i < n; ++i) out->value[i] = a.data()[i] + b.data()[i];
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* pa = a.node();
    Node<T>* pb = b.node();
    out->backward_fn = [o, pa, pb, n] {
      for (Node<T>* p : {pa, pb}) {
        if (!p->requires_grad) continue;
        T* g = p->grad_data();
        for (Index i = 0; i < n; ++i) g[i] += o->grad[i];
      }
    };
  }
  return Var<T>(out);
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  auto out = make_result<T>(a.shape(), {&a, &b});
  const Index n = a.size();
  for (Index i = 0; i < n; ++i) out->value[i] = a.data()[i] - b.data()[i];
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* pa = a.node();
    Node<T>* pb = b.node();
    out->backward_fn = [o, pa, pb, n] {
      if (pa->requires_grad) {
        T* g = pa->grad_data();
        for (Index i = 0; i < n; ++i) g[i] += o->grad[i];
      }
      if (pb->requires_grad) {
        T* g = pb->grad_data();
        for (Index i = 0; i < n; ++i) g[i] -= o->grad[i];
      }
    };
  }
  return Var<T>(out);
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  auto out = make_result<T>(a.shape(), {&a, &b});
  const Index n = a.size();
  for (Index i = 0; i < n; ++i) out->value[i] = a.data()[i] * b.data()[i];
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* pa = a.node();
    Node<T>* pb = b.node();
    out->backward_fn = [o, pa, pb, n] {
      if (pa->requires_grad) {
        T* g = pa->grad_data();
        for (Index i = 0; i < n; ++i) g[i] += o->grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        T* g = pb->grad_data();
        for (Index i = 0; i < n; ++i) g[i] += o->grad[i] * pa->value[i];
      }
    };
  }
  return Var<T>(out);
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  auto out = make_result<T>(a.shape(), {&a});
  const Index n = a.size();
  for (Index i = 0; i < n; ++i) out->value[i] = a.data()[i] * s;
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* pa = a.node();
    out->backward_fn = [o, pa, n, s] {
      T* g = pa->grad_data();
      for (Index i = 0; i < n; ++i) g[i] += o->grad[i] * s;
    };
  }
  return Var<T>(out);
}

/// x: [B, C, rest...], bias: C values. Adds bias[c] to every element of channel c.
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias) {
  detail::require(x.shape().size() >= 2, "add_channel_bias: rank must be >= 2");
  const Index batch = x.dim(0);
  const Index channels = x.dim(1);
  const Index inner = x.size() / (batch * channels);
  detail::require(bias.size() == channels, "add_channel_bias: bias has " + std::to_string(bias.size()) +
                                               " values for " + std::to_string(channels) + " channels");
  auto out = make_result<T>(x.shape(), {&x, &bias});
  const T* xv = x.data();
  const T* bv = bias.data();
  T* ov = out->value.data.data();
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < channels; ++c) {
      const Index base = (b * channels + c) * inner;
      for (Index i = 0; i < inner; ++i) ov[base + i] = xv[base + i] + bv[c];
    }
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* px = x.node();
    Node<T>* pb = bias.node();
    out->backward_fn = [o, px, pb, batch, channels, inner] {
      if (px->requires_grad) {
        T* g = px->grad_data();
        for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i];
      }
      if (pb->requires_grad) {
        T* g = pb->grad_data();
        for (Index b = 0; b < batch; ++b) {
          for (Index c = 0; c < channels; ++c) {
            const Index base = (b * channels + c) * inner;
            T acc{0};
            for (Index i = 0; i < inner; ++i) acc += o->grad[base + i];
            g[c] += acc;
          }
        }
      }
    };
  }
  return Var<T>(out);
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  auto out = make_result<T>(x.shape(), {&x});
  const Index n = x.size();
  for (Index i = 0; i < n; ++i) {
    const T v = x.data()[i];
    out->value[i] = v / (T{1} + std::exp(-v));
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* px = x.node();
    out->backward_fn = [o, px, n] {
      T* g = px->grad_data();
      for (Index i = 0; i < n; ++i) {
        const T v = px->value[i];
        const T sig = T{1} / (T{1} + std::exp(-v));
        g[i] += o->grad[i] * sig * (T{1} + v * (T{1} - sig));
      }
    };
  }
  return Var<T>(out);
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  detail::require(numel(shape) == x.size(), "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto out = make_result<T>(std::move(shape), {&x});
  out->value.data = x.value().data;
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* px = x.node();
    out->backward_fn = [o, px] {
      T* g = px->grad_data();
      for (std::size_t i = 0; i < o->grad.size(); ++i) g[i] += o->grad[i];
    };
  }
  return Var<T>(out);
}

/// Generic axis permutation: out.dim(i) = x.dim(perm[i]).
template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<int>& perm) {
  const int rank = static_cast<int>(x.shape().size());
  detail::require(static_cast<int>(perm.size()) == rank, "permute: rank mismatch");
  Shape out_shape(rank);
  std::vector<Index> in_strides(rank, 1);
  for (int i = rank - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * x.dim(i + 1);
  for (int i = 0; i < rank; ++i) out_shape[i] = x.dim(perm[i]);
  // Stride in the input for each output axis.
  std::vector<Index> src_strides(rank);
  for (int i = 0; i < rank; ++i) src_strides[i] = in_strides[perm[i]];

  auto out = make_result<T>(out_shape, {&x});
  const Index n = x.size();
  // Precompute the source offset of every output element once; reused by backward.
  auto src = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n));
  {
    std::vector<Index> idx(rank, 0);
    Index offset = 0;
    for (Index i = 0; i < n; ++i) {
      (*src)[i] = offset;
      for (int d = rank - 1; d >= 0; --d) {
        ++idx[d];
        offset += src_strides[d];
        if (idx[d] < out_shape[d]) break;
        offset -= src_strides[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  const T* xv = x.data();
  for (Index i = 0; i < n; ++i) out->value[i] = xv[(*src)[i]];
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* px = x.node();
    out->backward_fn = [o, px, src, n] {
      T* g = px->grad_data();
      for (Index i = 0; i < n; ++i) g[(*src)[i]] += o->grad[i];
    };
  }
  return Var<T>(out);
}

/// Concatenates along axis 1: [B, Ca, rest...] ++ [B, Cb, rest...].
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape().size() >= 2 && a.shape().size() == b.shape().size(), "concat_channels: rank");
  for (std::size_t i = 0; i < a.shape().size(); ++i) {
    if (i != 1) detail::require(a.dim(static_cast<int>(i)) == b.dim(static_cast<int>(i)), "concat_channels: dims");
  }
  const Index batch = a.dim(0);
  const Index ca = a.dim(1);
  const Index cb = b.dim(1);
  const Index inner = a.size() / (batch * ca);
  Shape shape = a.shape();
  shape[1] = ca + cb;
  auto out = make_result<T>(shape, {&a, &b});
  T* ov = out->value.data.data();
  for (Index n = 0; n < batch; ++n) {
    std::copy_n(a.data() + n * ca * inner, ca * inner, ov + n * (ca + cb) * inner);
    std::copy_n(b.data() + n * cb * inner, cb * inner, ov + n * (ca + cb) * inner + ca * inner);
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* pa = a.node();
    Node<T>* pb = b.node();
    out->backward_fn = [o, pa, pb, batch, ca, cb, inner] {
      for (Index n = 0; n < batch; ++n) {
        const T* g = o->grad.data() + n * (ca + cb) * inner;
        if (pa->requires_grad) {
          T* ga = pa->grad_data() + n * ca * inner;
          for (Index i = 0; i < ca * inner; ++i) ga[i] += g[i];
        }
        if (pb->requires_grad) {
          T* gb = pb->grad_data() + n * cb * inner;
          for (Index i = 0; i < cb * inner; ++i) gb[i] += g[ca * inner + i];
        }
      }
    };
  }
  return Var<T>(out);
}

/// x: [M, in], weight: [out, in], bias: [out] or undefined. Returns [M, out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias = {}) {
  detail::require(x.shape().size() == 2 && weight.shape().size() == 2 && x.dim(1) == weight.dim(1),
                  "linear: " + shape_str(x.shape()) + " x " + shape_str(weight.shape()));
  const Index m = x.dim(0);
  const Index in = x.dim(1);
  const Index outw = weight.dim(0);
  auto out = make_result<T>({m, outw}, {&x, &weight, bias.defined() ? &bias : nullptr});
  MatMap<T> y(out->value.data.data(), m, outw);
  CMatMap<T> xm(x.data(), m, in);
  CMatMap<T> wm(weight.data(), outw, in);
  y.noalias() = xm * wm.transpose();
  if (bias.defined()) {
    for (Index r = 0; r < m; ++r) {
      for (Index c = 0; c < outw; ++c) y(r, c) += bias.data()[c];
    }
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* px = x.node();
    Node<T>* pw = weight.node();
    Node<T>* pb = bias.defined() ? bias.node() : nullptr;
    out->backward_fn = [o, px, pw, pb, m, in, outw] {
      CMatMap<T> gy(o->grad.data(), m, outw);
      if (px->requires_grad) {
        MatMap<T> gx(px->grad_data(), m, in);
        gx.noalias() += gy * CMatMap<T>(pw->value.data.data(), outw, in);
      }
      if (pw->requires_grad) {
        MatMap<T> gw(pw->grad_data(), outw, in);
        gw.noalias() += gy.transpose() * CMatMap<T>(px->value.data.data(), m, in);
      }
      if (pb && pb->requires_grad) {
        T* g = pb->grad_data();
        for (Index r = 0; r < m; ++r) {
          for (Index c = 0; c < outw; ++c) g[c] += gy(r, c);
        }
      }
    };
  }
  return Var<T>(out);
}

/// Per-position channel mixing. x: [B, Cin, rest...], weight: [Cout, Cin], bias: [Cout] or undefined.
template <typename T>
Var<T> channel_linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias = {}) {
  detail::require(x.shape().size() >= 2 && weight.shape().size() == 2 && weight.dim(1) == x.dim(1),
                  "channel_linear: " + shape_str(x.shape()) + " x " + shape_str(weight.shape()));
  const Index batch = x.dim(0);
  const Index cin = x.dim(1);
  const Index cout = weight.dim(0);
  const Index inner = x.size() / (batch * cin);
  Shape shape = x.shape();
  shape[1] = cout;
  auto out = make_result<T>(shape, {&x, &weight, bias.defined() ? &bias : nullptr});
  CMatMap<T> wm(weight.data(), cout, cin);
  for (Index b = 0; b < batch; ++b) {
    MatMap<T> y(out->value.data.data() + b * cout * inner, cout, inner);
    y.noalias() = wm * CMatMap<T>(x.data() + b * cin * inner, cin, inner);
    if (bias.defined()) {
      for (Index c = 0; c < cout; ++c) y.row(c).array() += bias.data()[c];
    }
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* px = x.node();
    Node<T>* pw = weight.node();
    Node<T>* pb = bias.defined() ? bias.node() : nullptr;
    out->backward_fn = [o, px, pw, pb, batch, cin, cout, inner] {
      for (Index b = 0; b < batch; ++b) {
        CMatMap<T> gy(o->grad.data() + b * cout * inner, cout, inner);
        if (px->requires_grad) {
          MatMap<T> gx(px->grad_data() + b * cin * inner, cin, inner);
          gx.noalias() += CMatMap<T>(pw->value.data.data(), cout, cin).transpose() * gy;
        }
        if (pw->requires_grad) {
          MatMap<T> gw(pw->grad_data(), cout, cin);
          gw.noalias() += gy * CMatMap<T>(px->value.data.data() + b * cin * inner, cin, inner).transpose();
        }
        if (pb && pb->requires_grad) {
          T* g = pb->grad_data();
          for (Index c = 0; c < cout; ++c) g[c] += gy.row(c).sum();
        }
      }
    };
  }
  return Var<T>(out);
}

namespace detail {

/// Geometry of a cubic-kernel convolution over R spatial axes.
template <int R>
struct ConvGeometry {
  std::array<Index, R> in{};
  std::array<Index, R> out{};
  Index kernel = 3;
  Index stride = 1;
  Index pad = 1;

  Index in_count() const {
    Index n = 1;
    for (Index v : in) n *= v;
    return n;
  }
  Index out_count() const {
    Index n = 1;
    for (Index v : out) n *= v;
    return n;
  }
  Index taps() const {
    Index n = 1;
    for (int i = 0; i < R; ++i) n *= kernel;
    return n;
  }
};

/// For each output position in [p0, p1) and each kernel tap, the flat input
/// offset or -1 when the tap falls in the zero padding. Layout [taps, p1 - p0].
template <int R>
std::vector<Index> conv_gather_table(const ConvGeometry<R>& g, Index p0, Index p1) {
  const Index taps = g.taps();
  const Index count = p1 - p0;
  std::vector<Index> table(static_cast<std::size_t>(taps * count));
  std::array<Index, R> in_strides{};
  in_strides[R - 1] = 1;
  for (int d = R - 2; d >= 0; --d) in_strides[d] = in_strides[d + 1] * g.in[d + 1];
  for (Index p = p0; p < p1; ++p) {
    std::array<Index, R> oc{};
    Index rem = p;
    for (int d = R - 1; d >= 0; --d) {
      oc[d] = rem % g.out[d];
      rem /= g.out[d];
    }
    for (Index t = 0; t < taps; ++t) {
      Index trem = t;
      Index offset = 0;
      bool inside = true;
      for (int d = R - 1; d >= 0; --d) {
        const Index k = trem % g.kernel;
        trem /= g.kernel;
        const Index ic = oc[d] * g.stride - g.pad + k;
        if (ic < 0 || ic >= g.in[d]) {
          inside = false;
          break;
        }
        offset += ic * in_strides[d];
      }
      table[static_cast<std::size_t>(t * count + (p - p0))] = inside ? offset : -1;
    }
  }
  return table;
}

}  // namespace detail

/// Cubic-kernel convolution over R spatial axes, zero padding.
/// x: [B, Cin, spatial...], weight: [Cout, Cin, k...], bias: [Cout] or undefined.
template <typename T, int R>
Var<T> convnd(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, Index stride, Index pad) {
  detail::require(static_cast<int>(x.shape().size()) == R + 2 && static_cast<int>(weight.shape().size()) == R + 2,
                  "conv: expected rank " + std::to_string(R + 2) + " input and weight, got " + shape_str(x.shape()) +
                      " and " + shape_str(weight.shape()));
  detail::require(weight.dim(1) == x.dim(1), "conv: channel mismatch " + shape_str(x.shape()) + " vs weight " +
                                                  shape_str(weight.shape()));
  detail::ConvGeometry<R> g;
  g.kernel = weight.dim(2);
  g.stride = stride;
  g.pad = pad;
  for (int d = 0; d < R; ++d) {
    g.in[d] = x.dim(2 + d);
    g.out[d] = (g.in[d] + 2 * pad - g.kernel) / stride + 1;
    detail::require(g.out[d] > 0, "conv: empty output");
  }
  const Index batch = x.dim(0);
  const Index cin = x.dim(1);
  const Index cout = weight.dim(0);
  const Index taps = g.taps();
  const Index rows = cin * taps;
  const Index in_count = g.in_count();
  const Index out_count = g.out_count();
  const Index chunk = std::max<Index>(1, (Index{1} << 21) / rows);

  Shape out_shape{batch, cout};
  for (int d = 0; d < R; ++d) out_shape.push_back(g.out[d]);
  auto out = make_result<T>(out_shape, {&x, &weight, bias.defined() ? &bias : nullptr});

  using Strided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
  using CStrided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

  auto fill_columns = [cin, taps, in_count](const T* xb, const std::vector<Index>& table, Index count, T* col) {
    for (Index c = 0; c < cin; ++c) {
      const T* xc = xb + c * in_count;
      for (Index t = 0; t < taps; ++t) {
        const Index* tt = table.data() + t * count;
        T* dst = col + (c * taps + t) * count;
        for (Index p = 0; p < count; ++p) dst[p] = tt[p] >= 0 ? xc[tt[p]] : T{0};
      }
    }
  };

  {
    std::vector<T> col;
    CMatMap<T> wm(weight.data(), cout, rows);
    for (Index p0 = 0; p0 < out_count; p0 += chunk) {
      const Index p1 = std::min(out_count, p0 + chunk);
      const Index count = p1 - p0;
      const auto table = detail::conv_gather_table<R>(g, p0, p1);
      col.resize(static_cast<std::size_t>(rows * count));
      for (Index b = 0; b < batch; ++b) {
        fill_columns(x.data() + b * cin * in_count, table, count, col.data());
        Strided y(out->value.data.data() + b * cout * out_count + p0, cout, count, Eigen::OuterStride<>(out_count));
        y.noalias() = wm * CMatMap<T>(col.data(), rows, count);
      }
    }
    if (bias.defined()) {
      for (Index b = 0; b < batch; ++b) {
        for (Index c = 0; c < cout; ++c) {
          T* row = out->value.data.data() + (b * cout + c) * out_count;
          const T bv = bias.data()[c];
          for (Index p = 0; p < out_count; ++p) row[p] += bv;
        }
      }
    }
  }

  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* px = x.node();
    Node<T>* pw = weight.node();
    Node<T>* pb = bias.defined() ? bias.node() : nullptr;
    out->backward_fn = [=] {
      std::vector<T> col;
      std::vector<T> dcol;
      CMatMap<T> wm(pw->value.data.data(), cout, rows);
      for (Index p0 = 0; p0 < out_count; p0 += chunk) {
        const Index p1 = std::min(out_count, p0 + chunk);
        const Index count = p1 - p0;
        const auto table = detail::conv_gather_table<R>(g, p0, p1);
        for (Index b = 0; b < batch; ++b) {
          CStrided gy(o->grad.data() + b * cout * out_count + p0, cout, count, Eigen::OuterStride<>(out_count));
          if (pw->requires_grad) {
            col.resize(static_cast<std::size_t>(rows * count));
            fill_columns(px->value.data.data() + b * cin * in_count, table, count, col.data());
            MatMap<T> gw(pw->grad_data(), cout, rows);
            gw.noalias() += gy * CMatMap<T>(col.data(), rows, count).transpose();
          }
          if (px->requires_grad) {
            dcol.resize(static_cast<std::size_t>(rows * count));
            MatMap<T> dc(dcol.data(), rows, count);
            dc.noalias() = wm.transpose() * gy;
            T* gxb = px->grad_data() + b * cin * in_count;
            for (Index c = 0; c < cin; ++c) {
              T* gxc = gxb + c * in_count;
              for (Index t = 0; t < taps; ++t) {
                const Index* tt = table.data() + t * count;
                const T* src = dcol.data() + (c * taps + t) * count;
                for (Index p = 0; p < count; ++p) {
                  if (tt[p] >= 0) gxc[tt[p]] += src[p];
                }
              }
            }
          }
        }
      }
      if (pb && pb->requires_grad) {
        T* gb = pb->grad_data();
        for (Index b = 0; b < batch; ++b) {
          for (Index c = 0; c < cout; ++c) {
            const T* row = o->grad.data() + (b * cout + c) * out_count;
            T acc{0};
            for (Index p = 0; p < out_count; ++p) acc += row[p];
            gb[c] += acc;
          }
        }
      }
    };
  }
  return Var<T>(out);
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias = {}, Index stride = 1, Index pad = 1) {
  return convnd<T, 2>(x, weight, bias, stride, pad);
}

template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias = {}, Index stride = 1, Index pad = 1) {
  return convnd<T, 3>(x, weight, bias, stride, pad);
}

/// Nearest-neighbour 2x upsampling of [B, C, H, W].
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
  detail::require(x.shape().size() == 4, "upsample2x: expected [B, C, H, W]");
  const Index bc = x.dim(0) * x.dim(1);
  const Index h = x.dim(2);
  const Index w = x.dim(3);
  auto out = make_result<T>({x.dim(0), x.dim(1), 2 * h, 2 * w}, {&x});
  T* ov = out->value.data.data();
  for (Index p = 0; p < bc; ++p) {
    for (Index i = 0; i < 2 * h; ++i) {
      for (Index j = 0; j < 2 * w; ++j) ov[(p * 2 * h + i) * 2 * w + j] = x.data()[(p * h + i / 2) * w + j / 2];
    }
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* px = x.node();
    out->backward_fn = [o, px, bc, h, w] {
      T* g = px->grad_data();
      for (Index p = 0; p < bc; ++p) {
        for (Index i = 0; i < 2 * h; ++i) {
          for (Index j = 0; j < 2 * w; ++j) g[(p * h + i / 2) * w + j / 2] += o->grad[(p * 2 * h + i) * 2 * w + j];
        }
      }
    };
  }
  return Var<T>(out);
}

/// [B, C, spatial...] -> [B, C], mean over all spatial positions.
template <typename T>
Var<T> mean_spatial(const Var<T>& x) {
  detail::require(x.shape().size() >= 2, "mean_spatial: rank must be >= 2");
  const Index bc = x.dim(0) * x.dim(1);
  const Index inner = x.size() / bc;
  auto out = make_result<T>({x.dim(0), x.dim(1)}, {&x});
  for (Index p = 0; p < bc; ++p) {
    T acc{0};
    for (Index i = 0; i < inner; ++i) acc += x.data()[p * inner + i];
    out->value[p] = acc / static_cast<T>(inner);
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* px = x.node();
    out->backward_fn = [o, px, bc, inner] {
      T* g = px->grad_data();
      for (Index p = 0; p < bc; ++p) {
        const T v = o->grad[p] / static_cast<T>(inner);
        for (Index i = 0; i < inner; ++i) g[p * inner + i] += v;
      }
    };
  }
  return Var<T>(out);
}

/// x: [B, C, spatial...]. Normalizes each sample over groups of C / groups
/// channels and all positions, then applies per-channel gamma and beta.
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Index groups, T eps = T(1e-5)) {
  detail::require(x.shape().size() >= 2, "group_norm: rank must be >= 2");
  const Index batch = x.dim(0);
  const Index channels = x.dim(1);
  detail::require(groups >= 1 && channels % groups == 0, "group_norm: " + std::to_string(groups) +
                                                             " groups do not divide " + std::to_string(channels) +
                                                             " channels");
  detail::require(gamma.size() == channels && beta.size() == channels, "group_norm: affine size mismatch");
  const Index inner = x.size() / (batch * channels);
  const Index per_group = channels / groups * inner;
  auto out = make_result<T>(x.shape(), {&x, &gamma, &beta});
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.size()));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(batch * groups));
  const T* xv = x.data();
  for (Index bg = 0; bg < batch * groups; ++bg) {
    const Index base = bg * per_group;
    double mean = 0;
    for (Index i = 0; i < per_group; ++i) mean += static_cast<double>(xv[base + i]);
    mean /= static_cast<double>(per_group);
    double var = 0;
    for (Index i = 0; i < per_group; ++i) {
      const double d = static_cast<double>(xv[base + i]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(per_group);
    const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
    (*inv_std)[static_cast<std::size_t>(bg)] = static_cast<T>(is);
    for (Index i = 0; i < per_group; ++i) {
      (*xhat)[static_cast<std::size_t>(base + i)] = static_cast<T>((static_cast<double>(xv[base + i]) - mean) * is);
    }
  }
  const T* gv = gamma.data();
  const T* bv = beta.data();
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < channels; ++c) {
      const Index base = (b * channels + c) * inner;
      for (Index i = 0; i < inner; ++i) out->value[base + i] = gv[c] * (*xhat)[static_cast<std::size_t>(base + i)] + bv[c];
    }
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* px = x.node();
    Node<T>* pg = gamma.node();
    Node<T>* pb = beta.node();
    out->backward_fn = [o, px, pg, pb, xhat, inv_std, batch, channels, groups, inner, per_group] {
      const T* dy = o->grad.data();
      const T* xh = xhat->data();
      if (pg->requires_grad || pb->requires_grad) {
        T* gg = pg->requires_grad ? pg->grad_data() : nullptr;
        T* gb = pb->requires_grad ? pb->grad_data() : nullptr;
        for (Index b = 0; b < batch; ++b) {
          for (Index c = 0; c < channels; ++c) {
            const Index base = (b * channels + c) * inner;
            T sg{0}, sb{0};
            for (Index i = 0; i < inner; ++i) {
              sg += dy[base + i] * xh[base + i];
              sb += dy[base + i];
            }
            if (gg) gg[c] += sg;
            if (gb) gb[c] += sb;
          }
        }
      }
      if (!px->requires_grad) return;
      T* gx = px->grad_data();
      const T* gamma_v = pg->value.data.data();
      const Index cpg = channels / groups;
      std::vector<T> dxhat(static_cast<std::size_t>(per_group));
      for (Index bg = 0; bg < batch * groups; ++bg) {
        const Index base = bg * per_group;
        const Index c0 = (bg % groups) * cpg;
        double m1 = 0, m2 = 0;
        for (Index i = 0; i < per_group; ++i) {
          const T d = dy[base + i] * gamma_v[c0 + i / inner];
          dxhat[static_cast<std::size_t>(i)] = d;
          m1 += static_cast<double>(d);
          m2 += static_cast<double>(d) * static_cast<double>(xh[base + i]);
        }
        m1 /= static_cast<double>(per_group);
        m2 /= static_cast<double>(per_group);
        const double is = static_cast<double>((*inv_std)[static_cast<std::size_t>(bg)]);
        for (Index i = 0; i < per_group; ++i) {
          gx[base + i] += static_cast<T>(
              is * (static_cast<double>(dxhat[static_cast<std::size_t>(i)]) - m1 - static_cast<double>(xh[base + i]) * m2));
        }
      }
    };
  }
  return Var<T>(out);
}

/// Constant sparse matrix in compressed-row form.
template <typename T>
struct SparseMatrix {
  Index rows = 0;
  Index cols = 0;
  std::vector<Index> row_ptr{0};
  std::vector<Index> col_idx;
  std::vector<T> values;

  /// Appends one row given as (column, weight) pairs.
  void push_row(const std::vector<std::pair<Index, T>>& entries) {
    for (const auto& [c, v] : entries) {
      col_idx.push_back(c);
      values.push_back(v);
    }
    row_ptr.push_back(static_cast<Index>(col_idx.size()));
    ++rows;
  }

  template <typename U>
  SparseMatrix<U> cast() const {
    SparseMatrix<U> m;
    m.rows = rows;
    m.cols = cols;
    m.row_ptr = row_ptr;
    m.col_idx = col_idx;
    m.values.assign(values.begin(), values.end());
    return m;
  }
};

/// out[r, ...] = sum_j M[r, j] * x[j, ...]. Mixes the leading axis; trailing axes are carried.
template <typename T>
Var<T> sparse_apply(const SparseMatrix<T>& m, const Var<T>& x) {
  detail::require(!x.shape().empty() && x.dim(0) == m.cols, "sparse_apply: matrix has " + std::to_string(m.cols) +
                                                               " columns, input " + shape_str(x.shape()));
  const Index inner = x.size() / std::max<Index>(1, x.dim(0));
  Shape shape = x.shape();
  shape[0] = m.rows;
  auto out = make_result<T>(shape, {&x});
  T* ov = out->value.data.data();
  for (Index r = 0; r < m.rows; ++r) {
    T* dst = ov + r * inner;
    for (Index k = m.row_ptr[r]; k < m.row_ptr[r + 1]; ++k) {
      const T w = m.values[k];
      const T* src = x.data() + m.col_idx[k] * inner;
      for (Index i = 0; i < inner; ++i) dst[i] += w * src[i];
    }
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* px = x.node();
    // The matrix outlives the graph only by value; copy the arrays needed by backward.
    auto mat = std::make_shared<SparseMatrix<T>>(m);
    out->backward_fn = [o, px, mat, inner] {
      T* g = px->grad_data();
      for (Index r = 0; r < mat->rows; ++r) {
        const T* src = o->grad.data() + r * inner;
        for (Index k = mat->row_ptr[r]; k < mat->row_ptr[r + 1]; ++k) {
          const T w = mat->values[k];
          T* dst = g + mat->col_idx[k] * inner;
          for (Index i = 0; i < inner; ++i) dst[i] += w * src[i];
        }
      }
    };
  }
  return Var<T>(out);
}

/// Input/output site pairs of a sparse convolution, one list per kernel tap.
struct Rulebook {
  Index in_sites = 0;
  Index out_sites = 0;
  std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> pairs;
};

/// Gather-GEMM-scatter sparse convolution. x: [in_sites, Cin], weight: [taps, Cin, Cout].
template <typename T>
Var<T> sparse_conv(const Var<T>& x, const Var<T>& weight, std::shared_ptr<const Rulebook> rules) {
  detail::require(x.shape().size() == 2 && x.dim(0) == rules->in_sites, "sparse_conv: input " + shape_str(x.shape()) +
                                                                             " vs " + std::to_string(rules->in_sites) +
                                                                             " sites");
  detail::require(weight.shape().size() == 3 && weight.dim(0) == static_cast<Index>(rules->pairs.size()) &&
                      weight.dim(1) == x.dim(1),
                  "sparse_conv: weight " + shape_str(weight.shape()));
  const Index cin = weight.dim(1);
  const Index cout = weight.dim(2);
  auto out = make_result<T>({rules->out_sites, cout}, {&x, &weight});
  std::vector<T> gathered;
  std::vector<T> product;
  for (std::size_t t = 0; t < rules->pairs.size(); ++t) {
    const auto& pairs = rules->pairs[t];
    const Index m = static_cast<Index>(pairs.size());
    if (m == 0) continue;
    gathered.resize(static_cast<std::size_t>(m * cin));
    for (Index i = 0; i < m; ++i) std::copy_n(x.data() + pairs[i].first * cin, cin, gathered.data() + i * cin);
    product.resize(static_cast<std::size_t>(m * cout));
    MatMap<T>(product.data(), m, cout).noalias() =
        CMatMap<T>(gathered.data(), m, cin) * CMatMap<T>(weight.data() + t * cin * cout, cin, cout);
    for (Index i = 0; i < m; ++i) {
      T* dst = out->value.data.data() + pairs[i].second * cout;
      const T* src = product.data() + i * cout;
      for (Index c = 0; c < cout; ++c) dst[c] += src[c];
    }
  }
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* px = x.node();
    Node<T>* pw = weight.node();
    out->backward_fn = [o, px, pw, rules, cin, cout] {
      std::vector<T> gx_rows;
      std::vector<T> gy_rows;
      std::vector<T> x_rows;
      for (std::size_t t = 0; t < rules->pairs.size(); ++t) {
        const auto& pairs = rules->pairs[t];
        const Index m = static_cast<Index>(pairs.size());
        if (m == 0) continue;
        gy_rows.resize(static_cast<std::size_t>(m * cout));
        for (Index i = 0; i < m; ++i) std::copy_n(o->grad.data() + pairs[i].second * cout, cout, gy_rows.data() + i * cout);
        CMatMap<T> gy(gy_rows.data(), m, cout);
        if (pw->requires_grad) {
          x_rows.resize(static_cast<std::size_t>(m * cin));
          for (Index i = 0; i < m; ++i) {
            std::copy_n(px->value.data.data() + pairs[i].first * cin, cin, x_rows.data() + i * cin);
          }
          MatMap<T>(pw->grad_data() + t * cin * cout, cin, cout).noalias() +=
              CMatMap<T>(x_rows.data(), m, cin).transpose() * gy;
        }
        if (px->requires_grad) {
          gx_rows.resize(static_cast<std::size_t>(m * cin));
          MatMap<T>(gx_rows.data(), m, cin).noalias() =
              gy * CMatMap<T>(pw->value.data.data() + t * cin * cout, cin, cout).transpose();
          T* g = px->grad_data();
          for (Index i = 0; i < m; ++i) {
            T* dst = g + pairs[i].first * cin;
            const T* src = gx_rows.data() + i * cin;
            for (Index c = 0; c < cin; ++c) dst[c] += src[c];
          }
        }
      }
    };
  }
  return Var<T>(out);
}

/// Softmax attention restricted to the depth axis of each ray.
/// query: [B, d, S], key: [B, d, D, S], value: [B, dv, D, S] -> [B, dv, S].
/// For every batch entry and position s the query attends over the D samples at s only.
template <typename T>
Var<T> depth_attention(const Var<T>& query, const Var<T>& key, const Var<T>& value, T logit_scale) {
  detail::require(query.shape().size() == 3 && key.shape().size() == 4 && value.shape().size() == 4,
                  "depth_attention: expected query [B,d,S], key/value [B,c,D,S]");
  const Index batch = query.dim(0);
  const Index d = query.dim(1);
  const Index s_count = query.dim(2);
  const Index depth = key.dim(2);
  const Index dv = value.dim(1);
  detail::require(key.dim(0) == batch && key.dim(1) == d && key.dim(3) == s_count, "depth_attention: key shape " +
                                                                                       shape_str(key.shape()));
  detail::require(value.dim(0) == batch && value.dim(2) == depth && value.dim(3) == s_count,
                  "depth_attention: value shape " + shape_str(value.shape()));

  auto out = make_result<T>({batch, dv, s_count}, {&query, &key, &value});
  auto weights = std::make_shared<std::vector<T>>(static_cast<std::size_t>(batch * depth * s_count));
  const T* q = query.data();
  const T* k = key.data();
  const T* v = value.data();
  T* a = weights->data();
  T* o = out->value.data.data();
  std::vector<T> logits(static_cast<std::size_t>(depth));
  for (Index b = 0; b < batch; ++b) {
    for (Index s = 0; s < s_count; ++s) {
      T max_logit = -std::numeric_limits<T>::infinity();
      for (Index j = 0; j < depth; ++j) {
        T acc{0};
        for (Index c = 0; c < d; ++c) acc += q[(b * d + c) * s_count + s] * k[((b * d + c) * depth + j) * s_count + s];
        logits[j] = acc * logit_scale;
        max_logit = std::max(max_logit, logits[j]);
      }
      T total{0};
      for (Index j = 0; j < depth; ++j) {
        logits[j] = std::exp(logits[j] - max_logit);
        total += logits[j];
      }
      for (Index j = 0; j < depth; ++j) a[(b * depth + j) * s_count + s] = logits[j] / total;
      for (Index c = 0; c < dv; ++c) {
        T acc{0};
        for (Index j = 0; j < depth; ++j) {
          acc += a[(b * depth + j) * s_count + s] * v[((b * dv + c) * depth + j) * s_count + s];
        }
        o[(b * dv + c) * s_count + s] = acc;
      }
    }
  }
  if (out->requires_grad) {
    Node<T>* on = out.get();
    Node<T>* pq = query.node();
    Node<T>* pk = key.node();
    Node<T>* pv = value.node();
    out->backward_fn = [=] {
      const T* gq_out = on->grad.data();
      const T* qv = pq->value.data.data();
      const T* kv = pk->value.data.data();
      const T* vv = pv->value.data.data();
      const T* aw = weights->data();
      T* gq = pq->requires_grad ? pq->grad_data() : nullptr;
      T* gk = pk->requires_grad ? pk->grad_data() : nullptr;
      T* gv = pv->requires_grad ? pv->grad_data() : nullptr;
      std::vector<T> da(static_cast<std::size_t>(depth));
      for (Index b = 0; b < batch; ++b) {
        for (Index s = 0; s < s_count; ++s) {
          T weighted{0};
          for (Index j = 0; j < depth; ++j) {
            T acc{0};
            for (Index c = 0; c < dv; ++c) {
              acc += gq_out[(b * dv + c) * s_count + s] * vv[((b * dv + c) * depth + j) * s_count + s];
            }
            da[j] = acc;
            weighted += aw[(b * depth + j) * s_count + s] * acc;
          }
          for (Index j = 0; j < depth; ++j) {
            const T aj = aw[(b * depth + j) * s_count + s];
            if (gv) {
              for (Index c = 0; c < dv; ++c) {
                gv[((b * dv + c) * depth + j) * s_count + s] += aj * gq_out[(b * dv + c) * s_count + s];
              }
            }
            const T dlogit = aj * (da[j] - weighted) * logit_scale;
            for (Index c = 0; c < d; ++c) {
              if (gq) gq[(b * d + c) * s_count + s] += dlogit * kv[((b * d + c) * depth + j) * s_count + s];
              if (gk) gk[((b * d + c) * depth + j) * s_count + s] += dlogit * qv[(b * d + c) * s_count + s];
            }
          }
        }
      }
    };
  }
  return Var<T>(out);
}

/// Depth attention weights [B, D, S] for inspection; same arithmetic as depth_attention.
template <typename T>
Tensor<T> depth_attention_weights(const Tensor<T>& query, const Tensor<T>& key, T logit_scale) {
  const Index batch = query.dim(0);
  const Index d = query.dim(1);
  const Index s_count = query.dim(2);
  const Index depth = key.dim(2);
  Tensor<T> a({batch, depth, s_count});
  std::vector<T> logits(static_cast<std::size_t>(depth));
  for (Index b = 0; b < batch; ++b) {
    for (Index s = 0; s < s_count; ++s) {
      T max_logit = -std::numeric_limits<T>::infinity();
      for (Index j = 0; j < depth; ++j) {
        T acc{0};
        for (Index c = 0; c < d; ++c) acc += query[(b * d + c) * s_count + s] * key[((b * d + c) * depth + j) * s_count + s];
        logits[j] = acc * logit_scale;
        max_logit = std::max(max_logit, logits[j]);
      }
      T total{0};
      for (Index j = 0; j < depth; ++j) {
        logits[j] = std::exp(logits[j] - max_logit);
        total += logits[j];
      }
      for (Index j = 0; j < depth; ++j) a[(b * depth + j) * s_count + s] = logits[j] / total;
    }
  }
  return a;
}

/// Mean squared difference, a scalar of shape [1].
template <typename T>
Var<T> mse(const Var<T>& pred, const Var<T>& target) {
  detail::require_same(pred.shape(), target.shape(), "mse");
  auto out = make_result<T>({1}, {&pred, &target});
  const Index n = pred.size();
  T acc{0};
  for (Index i = 0; i < n; ++i) {
    const T diff = pred.data()[i] - target.data()[i];
    acc += diff * diff;
  }
  out->value[0] = acc / static_cast<T>(n);
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* pp = pred.node();
    Node<T>* pt = target.node();
    out->backward_fn = [o, pp, pt, n] {
      const T scale_factor = T{2} * o->grad[0] / static_cast<T>(n);
      for (Index i = 0; i < n; ++i) {
        const T diff = (pp->value[i] - pt->value[i]) * scale_factor;
        if (pp->requires_grad) pp->grad_data()[i] += diff;
        if (pt->requires_grad) pt->grad_data()[i] -= diff;
      }
    };
  }
  return Var<T>(out);
}

/// sum_i weights[i] * x[i] with constant weights; handy for projecting to a scalar.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  detail::require(weights.size() == x.size(), "weighted_sum: size mismatch");
  auto out = make_result<T>({1}, {&x});
  T acc{0};
  for (Index i = 0; i < x.size(); ++i) acc += weights[i] * x.data()[i];
  out->value[0] = acc;
  if (out->requires_grad) {
    Node<T>* o = out.get();
    Node<T>* px = x.node();
    auto w = std::make_shared<Tensor<T>>(weights);
    out->backward_fn = [o, px, w] {
      T* g = px->grad_data();
      for (Index i = 0; i < w->size(); ++i) g[i] += o->grad[0] * (*w)[i];
    };
  }
  return Var<T>(out);
}

}  // namespace morphdiff::ad
