#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "visforce/autodiff.hpp"
#include "visforce/error.hpp"
#include "visforce/tensor.hpp"

namespace visforce {

enum class Padding { same, valid };

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

inline void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

/// Broadcast pattern of a binary elementwise op.
enum class Broadcast {
  none,          // equal shapes
  a_spatial,     // a is H x W x 1, b is H x W x C
  b_spatial,     // b is H x W x 1
  a_channel,     // a is 1 x 1 x C, b is H x W x C
  b_channel,
};

inline Broadcast resolve_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::none;
  if (a.size() == 3 && b.size() == 3) {
    if (a[0] == b[0] && a[1] == b[1]) {
      if (a[2] == 1) return Broadcast::a_spatial;
      if (b[2] == 1) return Broadcast::b_spatial;
    }
    if (a[2] == b[2]) {
      if (a[0] == 1 && a[1] == 1) return Broadcast::a_channel;
      if (b[0] == 1 && b[1] == 1) return Broadcast::b_channel;
    }
  }
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
}

/// Flat index into the operand that is broadcast, given the flat index into the full tensor.
inline std::size_t broadcast_index(Broadcast mode, std::size_t flat, std::size_t channels) {
  switch (mode) {
    case Broadcast::a_spatial:
    case Broadcast::b_spatial:
      return flat / channels;
    case Broadcast::a_channel:
    case Broadcast::b_channel:
      return flat % channels;
    case Broadcast::none:
      break;
  }
  return flat;
}

template <class Fn>
Var unary(Var x, Fn&& f, Tape::BackwardFn back) {
  const Tensor& in = x.value();
  Tensor out(in.shape());
  auto o = out.data();
  auto v = in.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(v[i]);
  return x.tape().record(std::move(out), {x}, std::move(back));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Var sigmoid(Var x) {
  const std::size_t xi = x.index();
  return detail::unary(x, [](double v) { return sigmoid(v); }, [xi](Tape& t, std::size_t self) {
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < y.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

inline Var relu(Var x) {
  const std::size_t xi = x.index();
  return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [xi](Tape& t, std::size_t self) {
    const Tensor& in = t.value(xi);
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (in[i] > 0.0) gx[i] += g[i];
    }
  });
}

inline Var tanh(Var x) {
  const std::size_t xi = x.index();
  return detail::unary(x, [](double v) { return std::tanh(v); }, [xi](Tape& t, std::size_t self) {
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < y.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

inline Var scale(Var x, double factor) {
  const std::size_t xi = x.index();
  return detail::unary(x, [factor](double v) { return factor * v; }, [xi, factor](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

/// a + b with equal shapes, or one operand broadcast as H x W x 1 or 1 x 1 x C.
inline Var add(Var a, Var b) {
  using detail::Broadcast;
  const Broadcast mode = detail::resolve_broadcast(a.shape(), b.shape(), "add");
  const bool a_small = mode == Broadcast::a_spatial || mode == Broadcast::a_channel;
  const Tensor& big = a_small ? b.value() : a.value();
  const Tensor& small = a_small ? a.value() : b.value();
  const std::size_t channels = big.shape().back();
  Tensor out = big;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += small[detail::broadcast_index(mode, i, channels)];

  const std::size_t ai = a.index(), bi = b.index();
  return a.tape().record(std::move(out), {a, b}, [ai, bi, mode, a_small, channels](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const std::size_t big_i = a_small ? bi : ai;
    const std::size_t small_i = a_small ? ai : bi;
    if (t.requires_grad(big_i)) detail::add_into(t.grad(big_i), g);
    if (t.requires_grad(small_i)) {
      Tensor& gs = t.grad(small_i);
      for (std::size_t i = 0; i < g.size(); ++i) gs[detail::broadcast_index(mode, i, channels)] += g[i];
    }
  });
}

/// Elementwise product with the same broadcast rules as add().
inline Var mul(Var a, Var b) {
  using detail::Broadcast;
  const Broadcast mode = detail::resolve_broadcast(a.shape(), b.shape(), "mul");
  const bool a_small = mode == Broadcast::a_spatial || mode == Broadcast::a_channel;
  const Tensor& big = a_small ? b.value() : a.value();
  const Tensor& small = a_small ? a.value() : b.value();
  const std::size_t channels = big.shape().back();
  Tensor out = big;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= small[detail::broadcast_index(mode, i, channels)];

  const std::size_t ai = a.index(), bi = b.index();
  return a.tape().record(std::move(out), {a, b}, [ai, bi, mode, a_small, channels](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const std::size_t big_i = a_small ? bi : ai;
    const std::size_t small_i = a_small ? ai : bi;
    const Tensor& big_v = t.value(big_i);
    const Tensor& small_v = t.value(small_i);
    if (t.requires_grad(big_i)) {
      Tensor& gb = t.grad(big_i);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * small_v[detail::broadcast_index(mode, i, channels)];
    }
    if (t.requires_grad(small_i)) {
      Tensor& gs = t.grad(small_i);
      for (std::size_t i = 0; i < g.size(); ++i) gs[detail::broadcast_index(mode, i, channels)] += g[i] * big_v[i];
    }
  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

/// Adds a bias vector along the last axis: x[..., c] + bias[c].
inline Var add_bias(Var x, Var bias) {
  const Tensor& in = x.value();
  const std::size_t n = in.shape().back();
  if (bias.value().rank() != 1 || bias.value().size() != n) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match last axis of " +
                     shape_str(in.shape()));
  }
  Tensor out = in;
  const Tensor& b = bias.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % n];
  const std::size_t xi = x.index(), bi = bias.index();
  return x.tape().record(std::move(out), {x, bias}, [xi, bi, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(xi)) detail::add_into(t.grad(xi), g);
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.index();
  return x.tape().record(std::move(out), {x}, [xi](Tape& t, std::size_t self) {
    detail::add_into(t.grad(xi), t.grad(self));
  });
}

/// Concatenates tensors along the last axis. All leading dimensions must agree.
inline Var concat_last(std::span<const Var> parts) {
  if (parts.empty()) throw ContractViolation("concat_last: no inputs");
  const Shape& first = parts[0].shape();
  const Shape lead(first.begin(), first.end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(lead.begin(), lead.end(), s.begin())) {
      throw ShapeError("concat_last: incompatible shapes " + shape_str(first) + " and " + shape_str(s));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  const std::size_t rows = shape_size(out_shape) / total;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data().data() + r * widths[k], widths[k], out.data().data() + r * total + offset);
    }
    offset += widths[k];
  }
  std::vector<std::size_t> indices;
  for (const Var& p : parts) indices.push_back(p.index());
  return parts[0].tape().record(std::move(out), parts, [indices, widths, rows, total](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < indices.size(); ++k) {
      if (t.requires_grad(indices[k])) {
        Tensor& gk = t.grad(indices[k]);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < widths[k]; ++c) gk[r * widths[k] + c] += g[r * total + off + c];
        }
      }
      off += widths[k];
    }
  });
}

inline Var concat_last(std::initializer_list<Var> parts) {
  return concat_last(std::span<const Var>(parts.begin(), parts.size()));
}

/// Slice [begin, begin + count) of the last axis.
inline Var slice_last(Var x, std::size_t begin, std::size_t count) {
  const Tensor& in = x.value();
  const std::size_t width = in.shape().back();
  if (count == 0 || begin + count > width) {
    throw ShapeError("slice_last: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside last axis of " + shape_str(in.shape()));
  }
  Shape out_shape = in.shape();
  out_shape.back() = count;
  Tensor out(out_shape);
  const std::size_t rows = in.size() / width;
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(in.data().data() + r * width + begin, count, out.data().data() + r * count);
  }
  const std::size_t xi = x.index();
  return x.tape().record(std::move(out), {x}, [xi, begin, count, width, rows](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < count; ++c) gx[r * width + begin + c] += g[r * count + c];
    }
  });
}

/// Stacks equally sized tensors as rows of an N x D matrix (D = element count of each).
inline Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw ContractViolation("stack_rows: no inputs");
  const std::size_t d = rows[0].value().size();
  Tensor out({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Tensor& v = rows[r].value();
    if (v.size() != d) throw ShapeError("stack_rows: rows of unequal length");
    std::copy_n(v.data().data(), d, out.data().data() + r * d);
  }
  std::vector<std::size_t> indices;
  for (const Var& v : rows) indices.push_back(v.index());
  return rows[0].tape().record(std::move(out), rows, [indices, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t r = 0; r < indices.size(); ++r) {
      if (!t.requires_grad(indices[r])) continue;
      Tensor& gr = t.grad(indices[r]);
      for (std::size_t c = 0; c < d; ++c) gr[c] += g[r * d + c];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank(av, 2, "matmul");
  detail::require_rank(bv, 2, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data().data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av[i * k + p];
      const double* brow = bv.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += s * brow[j];
    }
  }
  const std::size_t ai = a.index(), bi = b.index();
  return a.tape().record(std::move(out), {a, b}, [ai, bi, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad(ai);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += s;
        }
      }
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double s = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += s * g[i * n + j];
        }
      }
    }
  });
}

namespace detail {

inline Var linear_impl(Var x, Var weight, const Var* bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  detail::require_rank(xv, 2, "linear");
  detail::require_rank(wv, 2, "linear");
  const std::size_t m = xv.dim(0), in = xv.dim(1), out_n = wv.dim(0);
  if (wv.dim(1) != in) {
    throw ShapeError("linear: input " + shape_str(xv.shape()) + " does not match weight " + shape_str(wv.shape()));
  }
  if (bias != nullptr && (bias->value().rank() != 1 || bias->value().size() != out_n)) {
    throw ShapeError("linear: bias " + shape_str(bias->shape()) + " does not match " + std::to_string(out_n) +
                     " outputs");
  }
  Tensor out({m, out_n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = xv.data().data() + i * in;
    for (std::size_t o = 0; o < out_n; ++o) {
      const double* wr = wv.data().data() + o * in;
      double s = bias != nullptr ? bias->value()[o] : 0.0;
      for (std::size_t p = 0; p < in; ++p) s += xr[p] * wr[p];
      out[i * out_n + o] = s;
    }
  }
  const std::size_t xi = x.index(), wi = weight.index();
  const bool has_bias = bias != nullptr;
  const std::size_t bi = has_bias ? bias->index() : 0;
  auto back = [xi, wi, bi, has_bias, m, in, out_n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& wv = t.value(wi);
    if (t.requires_grad(xi)) {
      Tensor& gx = t.grad(xi);
      for (std::size_t i = 0; i < m; ++i) {
        double* gxr = gx.data().data() + i * in;
        for (std::size_t o = 0; o < out_n; ++o) {
          const double go = g[i * out_n + o];
          if (go == 0.0) continue;
          const double* wr = wv.data().data() + o * in;
          for (std::size_t p = 0; p < in; ++p) gxr[p] += go * wr[p];
        }
      }
    }
    if (t.requires_grad(wi)) {
      Tensor& gw = t.grad(wi);
      for (std::size_t i = 0; i < m; ++i) {
        const double* xr = xv.data().data() + i * in;
        for (std::size_t o = 0; o < out_n; ++o) {
          const double go = g[i * out_n + o];
          if (go == 0.0) continue;
          double* gwr = gw.data().data() + o * in;
          for (std::size_t p = 0; p < in; ++p) gwr[p] += go * xr[p];
        }
      }
    }
    if (has_bias && t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t o = 0; o < out_n; ++o) gb[o] += g[i * out_n + o];
      }
    }
  };
  if (has_bias) return x.tape().record(std::move(out), {x, weight, *bias}, std::move(back));
  return x.tape().record(std::move(out), {x, weight}, std::move(back));
}

}  // namespace detail

/// Fully connected layer: x (m x in) times weight^T (weight is out x in) plus bias (out).
inline Var linear(Var x, Var weight, Var bias) { return detail::linear_impl(x, weight, &bias); }

/// x (m x in) times weight^T without bias.
inline Var linear(Var x, Var weight) { return detail::linear_impl(x, weight, nullptr); }

namespace detail {

struct ConvGeometry {
  std::size_t h, w, cin, kh, kw, cout, stride, pad_top, pad_left, oh, ow;

  /// Input coordinate of output row/column `o` at kernel offset `d`, or -1 when it falls in the padding.
  std::ptrdiff_t in_row(std::size_t o, std::size_t d) const { return in_coord(o, d, pad_top, h); }
  std::ptrdiff_t in_col(std::size_t o, std::size_t d) const { return in_coord(o, d, pad_left, w); }

  std::ptrdiff_t in_coord(std::size_t o, std::size_t d, std::size_t pad, std::size_t extent) const {
    const std::size_t pos = o * stride + d;
    return pos < pad || pos - pad >= extent ? -1 : static_cast<std::ptrdiff_t>(pos - pad);
  }

  /// Outputs [lo, hi) whose kernel offset d lands inside the input along one axis.
  std::pair<std::size_t, std::size_t> valid(std::size_t d, std::size_t pad, std::size_t extent, std::size_t n) const {
    const std::size_t lo = d >= pad ? 0 : (pad - d + stride - 1) / stride;
    const std::size_t limit = extent + pad;
    const std::size_t hi = limit <= d ? 0 : std::min(n, (limit - d + stride - 1) / stride);
    return {std::min(lo, hi), hi};
  }

  /// Outputs [lo, hi) for which every kernel offset lands inside the input.
  std::pair<std::size_t, std::size_t> interior(std::size_t k, std::size_t pad, std::size_t extent, std::size_t n) const {
    const auto first = valid(0, pad, extent, n);
    const auto last = valid(k - 1, pad, extent, n);
    const std::size_t lo = std::max(first.first, last.first);
    const std::size_t hi = std::min(first.second, last.second);
    return {std::min(lo, hi), hi};
  }
};

/// Calls fn(std::integral_constant<W>, first) over [0, n) in blocks of at most 8 channels.
template <class Fn>
void blocked(std::size_t n, Fn&& fn) {
  std::size_t col = 0;
  for (; col + 8 <= n; col += 8) fn(std::integral_constant<std::size_t, 8>{}, col);
  switch (n - col) {
    case 7: fn(std::integral_constant<std::size_t, 7>{}, col); break;
    case 6: fn(std::integral_constant<std::size_t, 6>{}, col); break;
    case 5: fn(std::integral_constant<std::size_t, 5>{}, col); break;
    case 4: fn(std::integral_constant<std::size_t, 4>{}, col); break;
    case 3: fn(std::integral_constant<std::size_t, 3>{}, col); break;
    case 2: fn(std::integral_constant<std::size_t, 2>{}, col); break;
    case 1: fn(std::integral_constant<std::size_t, 1>{}, col); break;
    default: break;
  }
}

/// out[o, col..col+W) = sum over taps and input channels of x * kernel.
template <std::size_t W>
void conv_forward(const ConvGeometry& g, const double* __restrict x, const double* __restrict ker,
                  double* __restrict out, std::size_t col) {
  const auto rows = g.interior(g.kh, g.pad_top, g.h, g.oh);
  const auto cols = g.interior(g.kw, g.pad_left, g.w, g.ow);
  const std::size_t row_stride = g.w * g.cin;
  for (std::size_t oi = 0; oi < g.oh; ++oi) {
    const bool row_inside = oi >= rows.first && oi < rows.second;
    for (std::size_t oj = 0; oj < g.ow; ++oj) {
      double acc[W] = {};
      if (row_inside && oj >= cols.first && oj < cols.second) {
        const double* base = x + ((oi * g.stride - g.pad_top) * g.w + (oj * g.stride - g.pad_left)) * g.cin;
        const double* kp = ker + col;
        for (std::size_t di = 0; di < g.kh; ++di) {
          for (std::size_t dj = 0; dj < g.kw; ++dj) {
            const double* px = base + di * row_stride + dj * g.cin;
            for (std::size_t ci = 0; ci < g.cin; ++ci, kp += g.cout) {
              const double a = px[ci];
              for (std::size_t j = 0; j < W; ++j) acc[j] += a * kp[j];
            }
          }
        }
      } else {
        for (std::size_t di = 0; di < g.kh; ++di) {
          const std::ptrdiff_t ii = g.in_row(oi, di);
          if (ii < 0) continue;
          for (std::size_t dj = 0; dj < g.kw; ++dj) {
            const std::ptrdiff_t jj = g.in_col(oj, dj);
            if (jj < 0) continue;
            const double* px = x + (static_cast<std::size_t>(ii) * g.w + static_cast<std::size_t>(jj)) * g.cin;
            const double* kp = ker + (di * g.kw + dj) * g.cin * g.cout + col;
            for (std::size_t ci = 0; ci < g.cin; ++ci) {
              const double a = px[ci];
              const double* kr = kp + ci * g.cout;
              for (std::size_t j = 0; j < W; ++j) acc[j] += a * kr[j];
            }
          }
        }
      }
      double* o = out + (oi * g.ow + oj) * g.cout + col;
      for (std::size_t j = 0; j < W; ++j) o[j] = acc[j];
    }
  }
}

/// gk[tap, ci, col..col+W) += sum over output positions of x * grad.
template <std::size_t W>
void conv_kernel_grad(const ConvGeometry& g, const double* __restrict x, const double* __restrict grad,
                      double* __restrict gk, std::size_t col) {
  for (std::size_t di = 0; di < g.kh; ++di) {
    const auto [oi_lo, oi_hi] = g.valid(di, g.pad_top, g.h, g.oh);
    for (std::size_t dj = 0; dj < g.kw; ++dj) {
      const auto [oj_lo, oj_hi] = g.valid(dj, g.pad_left, g.w, g.ow);
      for (std::size_t ci = 0; ci < g.cin; ++ci) {
        double acc[W] = {};
        for (std::size_t oi = oi_lo; oi < oi_hi; ++oi) {
          const std::size_t ii = oi * g.stride + di - g.pad_top;
          const double* xp = x + (ii * g.w + oj_lo * g.stride + dj - g.pad_left) * g.cin + ci;
          const double* gp = grad + (oi * g.ow + oj_lo) * g.cout + col;
          for (std::size_t oj = oj_lo; oj < oj_hi; ++oj, xp += g.stride * g.cin, gp += g.cout) {
            const double a = *xp;
            for (std::size_t j = 0; j < W; ++j) acc[j] += a * gp[j];
          }
        }
        double* dst = gk + ((di * g.kw + dj) * g.cin + ci) * g.cout + col;
        for (std::size_t j = 0; j < W; ++j) dst[j] += acc[j];
      }
    }
  }
}

/// gin[p, col..col+W) += sum over the outputs reading p of grad * kernel, using the
/// channel-swapped kernel (kh x kw x Cout x Cin).
template <std::size_t W>
void conv_input_grad(const ConvGeometry& g, const double* __restrict grad, const double* __restrict swapped,
                     double* __restrict gin, std::size_t col) {
  const auto rows = g.interior(g.kh, g.pad_top, g.h, g.oh);
  const auto cols = g.interior(g.kw, g.pad_left, g.w, g.ow);
  for (std::size_t oi = 0; oi < g.oh; ++oi) {
    const bool row_inside = oi >= rows.first && oi < rows.second;
    for (std::size_t oj = 0; oj < g.ow; ++oj) {
      const double* go = grad + (oi * g.ow + oj) * g.cout;
      bool any = false;
      for (std::size_t co = 0; co < g.cout && !any; ++co) any = go[co] != 0.0;
      if (!any) continue;
      const bool inside = row_inside && oj >= cols.first && oj < cols.second;
      for (std::size_t di = 0; di < g.kh; ++di) {
        const std::ptrdiff_t ii = inside ? static_cast<std::ptrdiff_t>(oi * g.stride + di - g.pad_top) : g.in_row(oi, di);
        if (ii < 0) continue;
        for (std::size_t dj = 0; dj < g.kw; ++dj) {
          const std::ptrdiff_t jj =
              inside ? static_cast<std::ptrdiff_t>(oj * g.stride + dj - g.pad_left) : g.in_col(oj, dj);
          if (jj < 0) continue;
          const double* kp = swapped + (di * g.kw + dj) * g.cout * g.cin + col;
          double acc[W] = {};
          for (std::size_t co = 0; co < g.cout; ++co) {
            const double v = go[co];
            const double* kr = kp + co * g.cin;
            for (std::size_t j = 0; j < W; ++j) acc[j] += v * kr[j];
          }
          double* dst = gin + (static_cast<std::size_t>(ii) * g.w + static_cast<std::size_t>(jj)) * g.cin + col;
          for (std::size_t j = 0; j < W; ++j) dst[j] += acc[j];
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution and pooling on H x W x C maps
// ---------------------------------------------------------------------------

/// 2-D cross-correlation. kernel is kh x kw x Cin x Cout.
inline Var conv2d(Var x, Var kernel, std::size_t stride = 1, Padding padding = Padding::same) {
  const Tensor& in = x.value();
  const Tensor& k = kernel.value();
  detail::require_rank(in, 3, "conv2d input");
  detail::require_rank(k, 4, "conv2d kernel");
  if (stride == 0) throw ShapeError("conv2d: stride must be at least 1");
  const std::size_t h = in.dim(0), w = in.dim(1), cin = in.dim(2);
  const std::size_t kh = k.dim(0), kw = k.dim(1), cout = k.dim(3);
  if (k.dim(2) != cin) {
    throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, kernel expects " +
                     std::to_string(k.dim(2)));
  }
  std::size_t oh, ow, pad_top = 0, pad_left = 0;
  if (padding == Padding::same) {
    oh = (h + stride - 1) / stride;
    ow = (w + stride - 1) / stride;
    const std::size_t need_h = (oh - 1) * stride + kh;
    const std::size_t need_w = (ow - 1) * stride + kw;
    const std::size_t pad_h = need_h > h ? need_h - h : 0;
    const std::size_t pad_w = need_w > w ? need_w - w : 0;
    pad_top = pad_h / 2;
    pad_left = pad_w / 2;
    if (kh > h + pad_h || kw > w + pad_w) throw ShapeError("conv2d: kernel larger than padded input");
  } else {
    if (kh > h || kw > w) {
      throw ShapeError("conv2d: kernel " + shape_str(k.shape()) + " larger than input " + shape_str(in.shape()));
    }
    oh = (h - kh) / stride + 1;
    ow = (w - kw) / stride + 1;
  }

  const detail::ConvGeometry geo{h, w, cin, kh, kw, cout, stride, pad_top, pad_left, oh, ow};
  Tensor out({oh, ow, cout});
  detail::blocked(cout, [&](auto width, std::size_t col) {
    detail::conv_forward<decltype(width)::value>(geo, in.data().data(), k.data().data(), out.data().data(), col);
  });

  const std::size_t xi = x.index(), ki = kernel.index();
  return x.tape().record(std::move(out), {x, kernel}, [=](Tape& t, std::size_t self) {
    const double* g = t.grad(self).data().data();
    if (t.requires_grad(ki)) {
      const double* src = t.value(xi).data().data();
      double* gk = t.grad(ki).data().data();
      detail::blocked(geo.cout, [&](auto width, std::size_t col) {
        detail::conv_kernel_grad<decltype(width)::value>(geo, src, g, gk, col);
      });
    }
    if (t.requires_grad(xi)) {
      // kernel with the two channel axes swapped: kh x kw x Cout x Cin
      const double* ker = t.value(ki).data().data();
      std::vector<double> swapped(geo.kh * geo.kw * geo.cin * geo.cout);
      for (std::size_t tap = 0; tap < geo.kh * geo.kw; ++tap) {
        for (std::size_t ci = 0; ci < geo.cin; ++ci) {
          for (std::size_t co = 0; co < geo.cout; ++co) {
            swapped[(tap * geo.cout + co) * geo.cin + ci] = ker[(tap * geo.cin + ci) * geo.cout + co];
          }
        }
      }
      double* gin = t.grad(xi).data().data();
      detail::blocked(geo.cin, [&](auto width, std::size_t col) {
        detail::conv_input_grad<decltype(width)::value>(geo, g, swapped.data(), gin, col);
      });
    }
  });
}

/// 2x2 max pooling with stride 2. Ties route the gradient to the first maximum in row-major order.
inline Var maxpool2(Var x) {
  const Tensor& in = x.value();
  detail::require_rank(in, 3, "maxpool2");
  const std::size_t h = in.dim(0), w = in.dim(1), c = in.dim(2);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("maxpool2: spatial size must be even, got " + shape_str(in.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out({oh, ow, c});
  std::vector<std::uint32_t> argmax(out.size());
  for (std::size_t i = 0; i < oh; ++i) {
    for (std::size_t j = 0; j < ow; ++j) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        std::size_t best = ((2 * i) * w + 2 * j) * c + ch;
        for (std::size_t di = 0; di < 2; ++di) {
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = ((2 * i + di) * w + 2 * j + dj) * c + ch;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (i * ow + j) * c + ch;
        out[o] = in[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  const std::size_t xi = x.index();
  return x.tape().record(std::move(out), {x}, [xi, argmax = std::move(argmax)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
  });
}

/// H x W x C -> C, mean over positions.
inline Var global_average_pool(Var x) {
  const Tensor& in = x.value();
  detail::require_rank(in, 3, "global_average_pool");
  const std::size_t positions = in.dim(0) * in.dim(1), c = in.dim(2);
  Tensor out({c});
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t ch = 0; ch < c; ++ch) out[ch] += in[p * c + ch];
  }
  const double inv = 1.0 / static_cast<double>(positions);
  for (std::size_t ch = 0; ch < c; ++ch) out[ch] *= inv;
  const std::size_t xi = x.index();
  return x.tape().record(std::move(out), {x}, [xi, positions, c, inv](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t p = 0; p < positions; ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) gx[p * c + ch] += g[ch] * inv;
    }
  });
}

/// H x W x C -> C, max over positions.
inline Var global_max_pool(Var x) {
  const Tensor& in = x.value();
  detail::require_rank(in, 3, "global_max_pool");
  const std::size_t positions = in.dim(0) * in.dim(1), c = in.dim(2);
  Tensor out({c});
  std::vector<std::uint32_t> argmax(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::size_t best = ch;
    for (std::size_t p = 1; p < positions; ++p) {
      if (in[p * c + ch] > in[best]) best = p * c + ch;
    }
    out[ch] = in[best];
    argmax[ch] = static_cast<std::uint32_t>(best);
  }
  const std::size_t xi = x.index();
  return x.tape().record(std::move(out), {x}, [xi, argmax = std::move(argmax)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t ch = 0; ch < g.size(); ++ch) gx[argmax[ch]] += g[ch];
  });
}

/// H x W x C -> H x W x 1, mean over channels.
inline Var channel_mean(Var x) {
  const Tensor& in = x.value();
  detail::require_rank(in, 3, "channel_mean");
  const std::size_t positions = in.dim(0) * in.dim(1), c = in.dim(2);
  Tensor out({in.dim(0), in.dim(1), 1});
  const double inv = 1.0 / static_cast<double>(c);
  for (std::size_t p = 0; p < positions; ++p) {
    double s = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) s += in[p * c + ch];
    out[p] = s * inv;
  }
  const std::size_t xi = x.index();
  return x.tape().record(std::move(out), {x}, [xi, positions, c, inv](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t p = 0; p < positions; ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) gx[p * c + ch] += g[p] * inv;
    }
  });
}

/// H x W x C -> H x W x 1, max over channels.
inline Var channel_max(Var x) {
  const Tensor& in = x.value();
  detail::require_rank(in, 3, "channel_max");
  const std::size_t positions = in.dim(0) * in.dim(1), c = in.dim(2);
  Tensor out({in.dim(0), in.dim(1), 1});
  std::vector<std::uint32_t> argmax(positions);
  for (std::size_t p = 0; p < positions; ++p) {
    std::size_t best = p * c;
    for (std::size_t ch = 1; ch < c; ++ch) {
      if (in[p * c + ch] > in[best]) best = p * c + ch;
    }
    out[p] = in[best];
    argmax[p] = static_cast<std::uint32_t>(best);
  }
  const std::size_t xi = x.index();
  return x.tape().record(std::move(out), {x}, [xi, argmax = std::move(argmax)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t p = 0; p < g.size(); ++p) gx[argmax[p]] += g[p];
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t xi = x.index();
  return x.tape().record(Tensor::scalar(s), {x}, [xi](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& v : t.grad(xi).data()) v += g;
  });
}

/// Mean squared error between equally sized prediction and target tensors.
inline Var mse_loss(Var pred, Var target) {
  const Tensor& p = pred.value();
  const Tensor& y = target.value();
  if (p.size() != y.size()) {
    throw ShapeError("mse_loss: prediction " + shape_str(p.shape()) + " vs target " + shape_str(y.shape()));
  }
  const double n = static_cast<double>(p.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - y[i]) * (p[i] - y[i]);
  const std::size_t pi = pred.index(), yi = target.index();
  return pred.tape().record(Tensor::scalar(s / n), {pred, target}, [pi, yi, n](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const Tensor& p = t.value(pi);
    const Tensor& y = t.value(yi);
    if (t.requires_grad(pi)) {
      Tensor& gp = t.grad(pi);
      for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g * 2.0 * (p[i] - y[i]) / n;
    }
    if (t.requires_grad(yi)) {
      Tensor& gy = t.grad(yi);
      for (std::size_t i = 0; i < p.size(); ++i) gy[i] -= g * 2.0 * (p[i] - y[i]) / n;
    }
  });
}

}  // namespace visforce
