#pragma once

// Minimal reverse-mode differentiation over rank-4 tensors.
//
// A Tape owns every value produced while building a graph. Nodes are appended
// in creation order, so the tape is already topologically sorted and backward
// is a single reverse sweep. A tape is single-owner; independent graphs (MC
// passes, batch shards) each get their own.

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "tfm/error.hpp"
#include "tfm/lognormal.hpp"
#include "tfm/parallel.hpp"
#include "tfm/random.hpp"
#include "tfm/tensor.hpp"

namespace tfm {

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(BasicTensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}, false});
    return {this, nodes_.size() - 1};
  }

  /// Appends an operation node. `fn` is kept only if some parent needs a gradient.
  Var<T> record(BasicTensor<T> value, std::initializer_list<Var<T>> parents, Backward fn) {
    return record(std::move(value), std::span<const Var<T>>(parents.begin(), parents.size()),
                  std::move(fn));
  }

  Var<T> record(BasicTensor<T> value, std::span<const Var<T>> parents, Backward fn) {
    bool needs = false;
    for (const auto& p : parents) {
      check_owner(p);
      needs = needs || nodes_[p.id].requires_grad;
    }
#ifndef NDEBUG
    for (T v : value.values())
      if (!std::isfinite(v)) throw Error(ErrorCode::non_finite_loss, "non-finite value in graph");
#endif
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : Backward{}, false});
    return {this, nodes_.size() - 1};
  }

  const BasicTensor<T>& value(Var<T> v) const {
    check_owner(v);
    return nodes_[v.id].value;
  }
  const BasicTensor<T>& value(std::size_t id) const { return nodes_[id].value; }

  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient accumulator for node `id`, allocated as zeros on first use.
  BasicTensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = BasicTensor<T>(n.value.shape(), T(0));
      n.has_grad = true;
    }
    return n.grad;
  }

  /// d(loss)/d(v) after backward(); zeros if v did not influence the loss.
  const BasicTensor<T>& grad(Var<T> v) {
    check_owner(v);
    return grad_buffer(v.id);
  }

  void backward(Var<T> loss) {
    check_owner(loss);
    if (nodes_[loss.id].value.numel() != 1)
      throw Error(ErrorCode::non_scalar_loss,
                  "backward needs a scalar, got " + nodes_[loss.id].value.shape().str());
    for (auto& n : nodes_) {
      if (n.has_grad) n.grad.fill(T(0));
    }
    grad_buffer(loss.id)[0] = T(1);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.backward && n.has_grad) n.backward(*this, id);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    bool requires_grad = false;
    Backward backward;
    bool has_grad = false;
  };

  void check_owner(Var<T> v) const {
    if (v.tape != this || v.id >= nodes_.size())
      throw Error(ErrorCode::shape_mismatch, "variable belongs to a different tape");
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Dense kernels shared by the convolution forward and backward passes
// ---------------------------------------------------------------------------

namespace kernels {

inline constexpr std::size_t kTile = 128;

/// C[m x n] += A[m x k] * B[k x n], row-major, parallel over column tiles.
/// Each output element sums over k in ascending order.
template <class T>
void gemm_accumulate(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  const std::size_t tiles = (n + kTile - 1) / kTile;
  parallel_for(tiles, [&](std::size_t tile) {
    const std::size_t j0 = tile * kTile;
    const std::size_t len = std::min(kTile, n - j0);
    T acc[kTile];
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * n + j0;
      for (std::size_t j = 0; j < len; ++j) acc[j] = crow[j];
      const T* arow = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = arow[p];
        if (av == T(0)) continue;
        const T* brow = b + p * n + j0;
        for (std::size_t j = 0; j < len; ++j) acc[j] += av * brow[j];
      }
      for (std::size_t j = 0; j < len; ++j) crow[j] = acc[j];
    }
  });
}

/// C[m x k] += A[m x n] * B[k x n]^T; every entry is a length-n dot product
/// accumulated in eight fixed lanes.
template <class T>
void gemm_nt_accumulate(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  constexpr std::size_t kRows = 4;
  const std::size_t blocks = (m + kRows - 1) / kRows;
  parallel_for(blocks, [&](std::size_t blk) {
    const std::size_t i0 = blk * kRows;
    const std::size_t rows = std::min(kRows, m - i0);
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc[kRows][8] = {};
      std::size_t j = 0;
      for (; j + 8 <= n; j += 8) {
        for (std::size_t r = 0; r < rows; ++r) {
          const T* arow = a + (i0 + r) * n + j;
          for (std::size_t l = 0; l < 8; ++l) acc[r][l] += arow[l] * brow[j + l];
        }
      }
      for (std::size_t r = 0; r < rows; ++r) {
        T tail = T(0);
        const T* arow = a + (i0 + r) * n;
        for (std::size_t jj = j; jj < n; ++jj) tail += arow[jj] * brow[jj];
        const T* x = acc[r];
        const T sum = ((x[0] + x[1]) + (x[2] + x[3])) + ((x[4] + x[5]) + (x[6] + x[7])) + tail;
        c[(i0 + r) * k + p] += sum;
      }
    }
  });
}

struct ConvGeometry {
  std::size_t in_c, in_h, in_w;
  std::size_t out_c, k_h, k_w;
  std::size_t pad;
  std::size_t out_h, out_w;

  std::size_t rows() const { return in_c * k_h * k_w; }
  std::size_t out_plane() const { return out_h * out_w; }
  bool is_pointwise() const { return k_h == 1 && k_w == 1 && pad == 0; }
};

/// Unfolds one sample (in_c planes) into cols[rows x out_plane].
template <class T>
void im2col(const ConvGeometry& g, const T* in, T* cols) {
  parallel_for(g.in_c, [&](std::size_t ci) {
    const T* plane = in + ci * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.k_h; ++ky) {
      for (std::size_t kx = 0; kx < g.k_w; ++kx) {
        T* row = cols + ((ci * g.k_h + ky) * g.k_w + kx) * g.out_plane();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          T* dst = row + oy * g.out_w;
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) ? T(0) : src[ix];
          }
        }
      }
    }
  });
}

/// Adjoint of im2col: scatters cols back into one sample's input planes.
template <class T>
void col2im_accumulate(const ConvGeometry& g, const T* cols, T* in) {
  parallel_for(g.in_c, [&](std::size_t ci) {
    T* plane = in + ci * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.k_h; ++ky) {
      for (std::size_t kx = 0; kx < g.k_w; ++kx) {
        const T* row = cols + ((ci * g.k_h + ky) * g.k_w + kx) * g.out_plane();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.in_w;
          const T* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.in_w)) dst[ix] += src[ox];
          }
        }
      }
    }
  });
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
Tape<T>& same_tape(std::initializer_list<Var<T>> vars) {
  Tape<T>* tape = vars.begin()->tape;
  for (const auto& v : vars) {
    if (v.tape != tape) throw Error(ErrorCode::shape_mismatch, "operands live on different tapes");
  }
  return *tape;
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw Error(ErrorCode::shape_mismatch,
                std::string(op) + ": " + a.shape().str() + " vs " + b.shape().str());
}

template <class T, class F, class G>
Var<T> unary(Var<T> x, F&& forward, G&& derivative) {
  Tape<T>& tape = *x.tape;
  const BasicTensor<T>& in = x.value();
  BasicTensor<T> out(in.shape());
  for (std::size_t i = 0; i < in.numel(); ++i) out[i] = forward(in[i]);
  const std::size_t xid = x.id;
  return tape.record(std::move(out), {x}, [xid, derivative](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad_buffer(self);
    const auto& xv = t.value(xid);
    auto& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += gy[i] * derivative(xv[i]);
  });
}

}  // namespace detail

enum class Padding { same, valid };

/// Cross-correlation, stride 1. kernel (out_c, in_c, kh, kw), bias with out_c
/// elements; `same` zero-pads by (k-1)/2.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias, Padding padding = Padding::same) {
  Tape<T>& tape = detail::same_tape({x, kernel, bias});
  const Shape xs = x.shape();
  const Shape ks = kernel.shape();
  if (ks.c != xs.c)
    throw Error(ErrorCode::shape_mismatch,
                "conv2d: input has " + std::to_string(xs.c) + " channels, kernel expects " + std::to_string(ks.c));
  if (bias.value().numel() != ks.n)
    throw Error(ErrorCode::shape_mismatch, "conv2d: bias length must equal output channels");
  if (ks.h % 2 == 0 || ks.w % 2 == 0)
    throw Error(ErrorCode::shape_mismatch, "conv2d: kernel spatial dims must be odd");
  const std::size_t pad = padding == Padding::same ? (ks.h - 1) / 2 : 0;
  if (padding == Padding::same && ks.h != ks.w)
    throw Error(ErrorCode::shape_mismatch, "conv2d: same padding needs a square kernel");
  if (padding == Padding::valid && (xs.h < ks.h || xs.w < ks.w))
    throw Error(ErrorCode::shape_mismatch, "conv2d: input smaller than kernel");

  const kernels::ConvGeometry g{xs.c, xs.h, xs.w, ks.n, ks.h, ks.w, pad,
                                xs.h + 2 * pad - ks.h + 1, xs.w + 2 * pad - ks.w + 1};
  BasicTensor<T> out(Shape{xs.n, g.out_c, g.out_h, g.out_w});
  const BasicTensor<T>& in = x.value();
  const BasicTensor<T>& kv = kernel.value();
  const BasicTensor<T>& bv = bias.value();
  std::vector<T> cols(g.is_pointwise() ? 0 : g.rows() * g.out_plane());
  for (std::size_t n = 0; n < xs.n; ++n) {
    const T* sample = in.plane(n, 0);
    const T* b = sample;
    if (!g.is_pointwise()) {
      kernels::im2col(g, sample, cols.data());
      b = cols.data();
    }
    T* o = out.plane(n, 0);
    for (std::size_t co = 0; co < g.out_c; ++co)
      std::fill(o + co * g.out_plane(), o + (co + 1) * g.out_plane(), bv[co]);
    kernels::gemm_accumulate(g.out_c, g.out_plane(), g.rows(), kv.data(), b, o);
  }

  const std::size_t xid = x.id, kid = kernel.id, bid = bias.id;
  return tape.record(std::move(out), {x, kernel, bias}, [g, xid, kid, bid](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad_buffer(self);
    const auto& in = t.value(xid);
    const auto& kv = t.value(kid);
    const std::size_t batch = in.shape().n;
    const std::size_t plane = g.out_plane();
    std::vector<T> cols(g.is_pointwise() ? 0 : g.rows() * plane);

    if (t.requires_grad(bid)) {
      auto& gb = t.grad_buffer(bid);
      for (std::size_t co = 0; co < g.out_c; ++co) {
        T sum = T(0);
        for (std::size_t n = 0; n < batch; ++n) {
          const T* row = gy.plane(n, co);
          for (std::size_t j = 0; j < plane; ++j) sum += row[j];
        }
        gb[co] += sum;
      }
    }
    if (t.requires_grad(kid)) {
      auto& gk = t.grad_buffer(kid);
      for (std::size_t n = 0; n < batch; ++n) {
        const T* b = in.plane(n, 0);
        if (!g.is_pointwise()) {
          kernels::im2col(g, b, cols.data());
          b = cols.data();
        }
        kernels::gemm_nt_accumulate(g.out_c, g.rows(), plane, gy.plane(n, 0), b, gk.data());
      }
    }
    if (t.requires_grad(xid)) {
      auto& gx = t.grad_buffer(xid);
      std::vector<T> kt(g.rows() * g.out_c);
      for (std::size_t co = 0; co < g.out_c; ++co)
        for (std::size_t r = 0; r < g.rows(); ++r) kt[r * g.out_c + co] = kv[co * g.rows() + r];
      for (std::size_t n = 0; n < batch; ++n) {
        if (g.is_pointwise()) {
          kernels::gemm_accumulate(g.rows(), plane, g.out_c, kt.data(), gy.plane(n, 0), gx.plane(n, 0));
        } else {
          std::fill(cols.begin(), cols.end(), T(0));
          kernels::gemm_accumulate(g.rows(), plane, g.out_c, kt.data(), gy.plane(n, 0), cols.data());
          kernels::col2im_accumulate(g, cols.data(), gx.plane(n, 0));
        }
      }
    }
  });
}

/// Subgradient at 0 is 0.
template <class T>
Var<T> relu(Var<T> x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); },
                       [](T v) { return v > T(0) ? T(1) : T(0); });
}

/// ln(1 + exp(x)); linear above 30.
template <class T>
Var<T> softplus(Var<T> x) {
  return detail::unary(
      x,
      [](T v) {
        if (v > T(30)) return v;
        return static_cast<T>(std::log1p(std::exp(static_cast<double>(v))));
      },
      [](T v) { return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v)))); });
}

template <class T>
Var<T> square(Var<T> x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v) { return T(2) * v; });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tape = detail::same_tape({a, b});
  detail::require_same_shape(a, b, "add");
  BasicTensor<T> out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return tape.record(std::move(out), {a, b}, [aid, bid](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad_buffer(self);
    for (std::size_t id : {aid, bid}) {
      if (!t.requires_grad(id)) continue;
      auto& g = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += gy[i];
    }
  });
}

/// Concatenation along the channel axis, in argument order.
template <class T>
Var<T> concat_channels(std::span<const Var<T>> parts) {
  if (parts.empty()) throw Error(ErrorCode::shape_mismatch, "concat_channels of nothing");
  Tape<T>& tape = *parts.front().tape;
  const Shape first = parts.front().shape();
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    if (p.tape != &tape || s.n != first.n || s.h != first.h || s.w != first.w)
      throw Error(ErrorCode::shape_mismatch, "concat_channels: " + first.str() + " vs " + s.str());
    channels += s.c;
  }
  BasicTensor<T> out(Shape{first.n, channels, first.h, first.w});
  const std::size_t plane = first.plane();
  std::vector<std::size_t> ids;
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    for (std::size_t n = 0; n < first.n; ++n)
      std::copy(v.plane(n, 0), v.plane(n, 0) + v.shape().c * plane, out.plane(n, c0));
    c0 += v.shape().c;
    ids.push_back(p.id);
  }
  return tape.record(std::move(out), parts, [ids](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad_buffer(self);
    const std::size_t plane = gy.shape().plane();
    std::size_t c0 = 0;
    for (std::size_t id : ids) {
      const std::size_t c = t.value(id).shape().c;
      if (t.requires_grad(id)) {
        auto& g = t.grad_buffer(id);
        for (std::size_t n = 0; n < gy.shape().n; ++n) {
          const T* src = gy.plane(n, c0);
          T* dst = g.plane(n, 0);
          for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
        }
      }
      c0 += c;
    }
  });
}

template <class T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  const Var<T> parts[] = {a, b};
  return concat_channels<T>(std::span<const Var<T>>(parts));
}

/// Mean over every element; returns a (1,1,1,1) tensor.
template <class T>
Var<T> mean_all(Var<T> x) {
  const auto& v = x.value();
  if (v.numel() == 0) throw Error(ErrorCode::shape_mismatch, "mean_all of empty tensor");
  double sum = 0.0;
  for (T e : v.values()) sum += static_cast<double>(e);
  BasicTensor<T> out(Shape{1, 1, 1, 1}, static_cast<T>(sum / static_cast<double>(v.numel())));
  const std::size_t xid = x.id;
  return x.tape->record(std::move(out), {x}, [xid](Tape<T>& t, std::size_t self) {
    auto& gx = t.grad_buffer(xid);
    const T g = static_cast<T>(static_cast<double>(t.grad_buffer(self)[0]) / static_cast<double>(gx.numel()));
    for (auto& e : gx.values()) e += g;
  });
}

/// 2x2 max pooling, stride 2. Ties route to the first element in row-major
/// window order.
template <class T>
Var<T> max_pool2(Var<T> x) {
  const Shape s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0)
    throw Error(ErrorCode::odd_spatial_dims, "max_pool2 needs even spatial dims, got " + s.str());
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  BasicTensor<T> out(os);
  std::vector<std::size_t> argmax(os.numel());
  const auto& v = x.value();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t oy = 0; oy < os.h; ++oy) {
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          std::size_t best = v.offset(n, c, 2 * oy, 2 * ox);
          for (std::size_t d : {v.offset(n, c, 2 * oy, 2 * ox + 1), v.offset(n, c, 2 * oy + 1, 2 * ox),
                                v.offset(n, c, 2 * oy + 1, 2 * ox + 1)}) {
            if (v[d] > v[best]) best = d;
          }
          const std::size_t o = out.offset(n, c, oy, ox);
          out[o] = v[best];
          argmax[o] = best;
        }
      }
    }
  }
  const std::size_t xid = x.id;
  return x.tape->record(std::move(out), {x}, [xid, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad_buffer(self);
    auto& gx = t.grad_buffer(xid);
    for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += gy[o];
  });
}

/// Nearest-neighbour 2x upsampling; each pixel becomes a 2x2 block.
template <class T>
Var<T> upsample_nn2(Var<T> x) {
  const Shape s = x.shape();
  const Shape os{s.n, s.c, s.h * 2, s.w * 2};
  BasicTensor<T> out(os);
  const auto& v = x.value();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < os.h; ++y)
        for (std::size_t xx = 0; xx < os.w; ++xx) out.at(n, c, y, xx) = v.at(n, c, y / 2, xx / 2);
  const std::size_t xid = x.id;
  return x.tape->record(std::move(out), {x}, [xid](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad_buffer(self);
    auto& gx = t.grad_buffer(xid);
    const Shape s = gx.shape();
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t y = 0; y < s.h; ++y)
          for (std::size_t xx = 0; xx < s.w; ++xx)
            gx.at(n, c, y, xx) += (gy.at(n, c, 2 * y, 2 * xx) + gy.at(n, c, 2 * y, 2 * xx + 1)) +
                                  (gy.at(n, c, 2 * y + 1, 2 * xx) + gy.at(n, c, 2 * y + 1, 2 * xx + 1));
  });
}

/// Inverted dropout. One uniform draw per element in storage order; identical
/// stream state gives an identical mask. rate == 0 returns x unchanged.
template <class T>
Var<T> dropout(Var<T> x, double rate, RandomStream& stream) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw Error(ErrorCode::invalid_rate, "dropout rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const auto& v = x.value();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(v.numel());
  BasicTensor<T> out(v.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) {
    mask[i] = stream.uniform() < rate ? T(0) : keep_scale;
    out[i] = v[i] * mask[i];
  }
  const std::size_t xid = x.id;
  return x.tape->record(std::move(out), {x}, [xid, mask = std::move(mask)](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad_buffer(self);
    auto& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += gy[i] * mask[i];
  });
}

/// Heteroscedastic log-domain loss of predicted (mu, sigma2) maps against
/// log-force targets; scalar output.
template <class T>
Var<T> kl_lognormal_loss(Var<T> mu, Var<T> sigma2, const BasicTensor<T>& target) {
  Tape<T>& tape = detail::same_tape({mu, sigma2});
  detail::require_same_shape(mu, sigma2, "kl_lognormal_loss");
  if (target.shape() != mu.shape())
    throw Error(ErrorCode::shape_mismatch, "kl_lognormal_loss target " + target.shape().str());
  const LossInput<T> in{target.values(), mu.value().values(), sigma2.value().values()};
  const double loss = kl_lognormal_loss(in);
  const std::size_t mid = mu.id, sid = sigma2.id;
  return tape.record(BasicTensor<T>(Shape{1, 1, 1, 1}, static_cast<T>(loss)), {mu, sigma2},
                     [mid, sid, target](Tape<T>& t, std::size_t self) {
                       const double up = static_cast<double>(t.grad_buffer(self)[0]);
                       const LossInput<T> in{target.values(), t.value(mid).values(), t.value(sid).values()};
                       std::vector<T> dmu(in.size()), ds2(in.size());
                       kl_lognormal_loss_gradient<T>(in, dmu, ds2, up);
                       for (auto [id, d] : {std::pair{mid, &dmu}, std::pair{sid, &ds2}}) {
                         if (!t.requires_grad(id)) continue;
                         auto& g = t.grad_buffer(id);
                         for (std::size_t i = 0; i < g.numel(); ++i) g[i] += (*d)[i];
                       }
                     });
}

}  // namespace tfm
