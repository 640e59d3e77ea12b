#include "msdet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace msdet {

using detail::make_result;
using detail::Node;

namespace {

Shape strip_leading_ones(const Shape& s) {
  std::size_t i = 0;
  while (i + 1 < s.size() && s[i] == 1) ++i;
  Shape out(s.begin() + static_cast<std::ptrdiff_t>(i), s.end());
  if (out.size() == 1 && out[0] == 1) out.clear();
  return out;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return a;
  if (is_suffix(strip_leading_ones(b), a) && numel(b) <= numel(a)) return a;
  if (is_suffix(strip_leading_ones(a), b) && numel(a) <= numel(b)) return b;
  throw TensorError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                    " are not broadcast-compatible");
}

// Folds a gradient of the broadcast shape back onto an operand of n elements.
void accumulate_tiled(Node& target, std::span<const double> g) {
  auto& dst = target.ensure_grad();
  const std::size_t n = dst.size();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i % n] += g[i];
}

enum class Binary { add, sub, mul };

Tensor binary(Binary kind, const Tensor& a, const Tensor& b) {
  static constexpr const char* names[] = {"add", "sub", "mul"};
  const char* name = names[static_cast<int>(kind)];
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  const auto av = a.values();
  const auto bv = b.values();
  const std::size_t n = numel(out_shape);
  const std::size_t na = av.size();
  const std::size_t nb = bv.size();
  std::vector<double> out(n);
  switch (kind) {
    case Binary::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i % na] + bv[i % nb];
      break;
    case Binary::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i % na] - bv[i % nb];
      break;
    case Binary::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i % na] * bv[i % nb];
      break;
  }
  return make_result(name, std::move(out_shape), std::move(out), {a, b}, [kind](Node& self) {
    Node& na_ = *self.inputs[0];
    Node& nb_ = *self.inputs[1];
    const auto& g = self.grad;
    if (kind == Binary::mul) {
      if (na_.requires_grad) {
        std::vector<double> ga(g.size());
        const std::size_t m = nb_.values.size();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * nb_.values[i % m];
        accumulate_tiled(na_, ga);
      }
      if (nb_.requires_grad) {
        std::vector<double> gb(g.size());
        const std::size_t m = na_.values.size();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * na_.values[i % m];
        accumulate_tiled(nb_, gb);
      }
      return;
    }
    if (na_.requires_grad) accumulate_tiled(na_, g);
    if (nb_.requires_grad) {
      if (kind == Binary::add) {
        accumulate_tiled(nb_, g);
      } else {
        std::vector<double> gb(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] = -g[i];
        accumulate_tiled(nb_, gb);
      }
    }
  });
}

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Unary op given value and derivative functions of the input.
template <typename F, typename D>
Tensor unary(const char* name, const Tensor& a, F f, D df) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_result(name, a.shape(), std::move(out), {a}, [df](Node& self) {
    Node& in = *self.inputs[0];
    auto& dst = in.ensure_grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += self.grad[i] * df(in.values[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(Binary::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Binary::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Binary::mul, a, b); }

Tensor silu(const Tensor& a) {
  return unary(
      "silu", a, [](double x) { return x * sigmoid_value(x); },
      [](double x) {
        const double s = sigmoid_value(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary(
      "leaky_relu", a, [slope](double x) { return x > 0 ? x : slope * x; },
      [slope](double x) { return x > 0 ? 1.0 : slope; });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, sigmoid_value, [](double x) {
    const double s = sigmoid_value(x);
    return s * (1.0 - s);
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return x * factor; }, [factor](double) { return factor; });
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, const std::optional<Tensor>& b) {
  auto need_b = [&]() -> const Tensor& {
    if (!b || !b->defined()) throw TensorError("binary elementwise op requires a second operand");
    return *b;
  };
  switch (op) {
    case ElementwiseOp::add: return add(a, need_b());
    case ElementwiseOp::sub: return sub(a, need_b());
    case ElementwiseOp::mul: return mul(a, need_b());
    case ElementwiseOp::silu: return silu(a);
    case ElementwiseOp::leaky_relu: return leaky_relu(a);
    case ElementwiseOp::sigmoid: return sigmoid(a);
  }
  throw TensorError("unknown elementwise op");
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_result("sum", {1}, {s}, {a}, [](Node& self) {
    auto& dst = self.inputs[0]->ensure_grad();
    for (auto& d : dst) d += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw TensorError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto v = a.values();
  return make_result("reshape", std::move(shape), {v.begin(), v.end()}, {a},
                     [](Node& self) { self.inputs[0]->accumulate_grad(self.grad); });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw TensorError("transpose expects rank 2, got " + shape_str(a.shape()));
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  const auto v = a.values();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = v[i * cols + j];
  return make_result("transpose", {cols, rows}, std::move(out), {a}, [rows, cols](Node& self) {
    auto& dst = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) dst[i * cols + j] += self.grad[j * rows + i];
  });
}

namespace {

// c[M×N] += a[M×K] · b[K×N]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw TensorError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  gemm_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const double* g = self.grad.data();
    if (na.requires_grad) {
      // dA[i,p] += sum_j g[i,j] * B[p,j]
      auto& da = na.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* brow = nb.values.data() + p * n;
          const double* grow = g + i * n;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          da[i * k + p] += s;
        }
    }
    if (nb.requires_grad) {
      // dB[p,j] += sum_i A[i,p] * g[i,j]
      auto& db = nb.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = na.values[i * k + p];
          const double* grow = g + i * n;
          double* drow = db.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
        }
    }
  });
}

Tensor softmax_rows(const Tensor& a) {
  if (a.rank() != 2) throw TensorError("softmax_rows expects rank 2, got " + shape_str(a.shape()));
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  const auto v = a.values();
  std::vector<double> out(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = v.data() + r * cols;
    double* o = out.data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (std::isnan(in[c])) throw TensorError("softmax_rows: NaN input in row " + std::to_string(r));
      mx = std::max(mx, in[c]);
    }
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
  }
  auto saved = std::make_shared<std::vector<double>>(out);
  return make_result("softmax_rows", a.shape(), std::move(out), {a}, [rows, cols, saved](Node& self) {
    auto& dst = self.inputs[0]->ensure_grad();
    const auto& y = *saved;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.data() + r * cols;
      const double* gr = self.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
      for (std::size_t c = 0; c < cols; ++c) dst[r * cols + c] += yr[c] * (gr[c] - dot);
    }
  });
}

Tensor select(const Tensor& a, std::size_t index) {
  if (a.rank() < 2) throw TensorError("select needs rank >= 2, got " + shape_str(a.shape()));
  if (index >= a.dim(0)) throw TensorError("select index out of range for " + shape_str(a.shape()));
  Shape sub(a.shape().begin() + 1, a.shape().end());
  const std::size_t block = numel(sub);
  const auto v = a.values();
  std::vector<double> out(v.begin() + static_cast<std::ptrdiff_t>(index * block),
                          v.begin() + static_cast<std::ptrdiff_t>((index + 1) * block));
  return make_result("select", std::move(sub), std::move(out), {a}, [index, block](Node& self) {
    auto& dst = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < block; ++i) dst[index * block + i] += self.grad[i];
  });
}

Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw TensorError("stack of zero tensors");
  const Shape& sub = parts[0].shape();
  for (const auto& p : parts) {
    if (p.shape() != sub) {
      throw TensorError("stack: shape " + shape_str(p.shape()) + " differs from " + shape_str(sub));
    }
  }
  const std::size_t block = numel(sub);
  std::vector<double> out;
  out.reserve(block * parts.size());
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  Shape shape{parts.size()};
  shape.insert(shape.end(), sub.begin(), sub.end());
  return make_result("stack", std::move(shape), std::move(out), parts, [block](Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      Node& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      in.accumulate_grad(std::span<const double>(self.grad.data() + k * block, block));
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial ops. All accept [C,H,W] (treated as N=1) or [N,C,H,W].

namespace {

struct Dims4 {
  std::size_t n, c, h, w;
};

Dims4 spatial_dims(const Tensor& x, const char* op) {
  const auto& s = x.shape();
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  throw TensorError(std::string(op) + " expects [C,H,W] or [N,C,H,W], got " + shape_str(s));
}

Shape spatial_shape(const Tensor& like, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  if (like.rank() == 3) return {c, h, w};
  return {n, c, h, w};
}

// Range of output indices o with 0 <= s*o + offset < extent.
std::pair<std::size_t, std::size_t> valid_range(std::ptrdiff_t offset, std::size_t stride, std::size_t extent,
                                                 std::size_t out_extent) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = 0;
  if (offset < 0) lo = (-offset + s - 1) / s;
  std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(extent) - 1 - offset;
  if (hi < 0) return {0, 0};
  hi = hi / s + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out_extent));
  if (lo >= hi) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace

std::size_t conv_output_size(std::size_t h, std::size_t kernel, const Conv2dOptions& opts) {
  if (kernel == 0 || opts.stride == 0 || opts.dilation == 0) {
    throw TensorError("conv: kernel, stride and dilation must be positive");
  }
  const std::size_t rf = (opts.dilation - 1) * (kernel - 1) + kernel;
  const std::size_t span = h + 2 * opts.padding;
  if (span < rf) {
    throw TensorError("conv: receptive field " + std::to_string(rf) + " exceeds padded extent " +
                      std::to_string(span));
  }
  return (span - rf) / opts.stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, const Conv2dOptions& opts) {
  const Dims4 d = spatial_dims(x, "conv2d");
  if (w.rank() != 4) throw TensorError("conv2d weight must be rank 4, got " + shape_str(w.shape()));
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != d.c) {
    throw TensorError("conv2d: input has " + std::to_string(d.c) + " channels but weight " +
                      shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw TensorError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " +
                      std::to_string(cout) + " output channels");
  }
  const std::size_t ho = conv_output_size(d.h, kh, opts);
  const std::size_t wo = conv_output_size(d.w, kw, opts);
  const std::size_t s = opts.stride, r = opts.dilation;
  const auto p = static_cast<std::ptrdiff_t>(opts.padding);
  const std::size_t cin = d.c, H = d.h, W = d.w;

  const double* xv = x.values().data();
  const double* wv = w.values().data();
  std::vector<double> out(d.n * cout * ho * wo, 0.0);

  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t co = 0; co < cout; ++co) {
      double* op = out.data() + (n * cout + co) * ho * wo;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* xp = xv + (n * cin + ci) * H * W;
        for (std::size_t i = 0; i < kh; ++i) {
          const std::ptrdiff_t yoff = static_cast<std::ptrdiff_t>(r * i) - p;
          const auto [m0, m1] = valid_range(yoff, s, H, ho);
          for (std::size_t j = 0; j < kw; ++j) {
            const double wt = wv[((co * cin + ci) * kh + i) * kw + j];
            const std::ptrdiff_t xoff = static_cast<std::ptrdiff_t>(r * j) - p;
            const auto [n0, n1] = valid_range(xoff, s, W, wo);
            for (std::size_t m = m0; m < m1; ++m) {
              const double* xrow = xp + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(s * m) + yoff) * W;
              double* orow = op + m * wo;
              if (s == 1) {
                const double* xs = xrow + xoff;
                for (std::size_t q = n0; q < n1; ++q) orow[q] += wt * xs[q];
              } else {
                for (std::size_t q = n0; q < n1; ++q)
                  orow[q] += wt * xrow[static_cast<std::ptrdiff_t>(s * q) + xoff];
              }
            }
          }
        }
      }
      if (bias.defined()) {
        const double b = bias.values()[co];
        for (std::size_t q = 0; q < ho * wo; ++q) op[q] += b;
      }
    }
  }

  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_result(
      "conv2d", spatial_shape(x, d.n, cout, ho, wo), std::move(out), std::move(inputs),
      [d, cout, kh, kw, ho, wo, s, r, p, has_bias](Node& self) {
        Node& nx = *self.inputs[0];
        Node& nw = *self.inputs[1];
        const std::size_t cin = d.c, H = d.h, W = d.w;
        const double* g = self.grad.data();
        double* dx = nx.requires_grad ? nx.ensure_grad().data() : nullptr;
        double* dw = nw.requires_grad ? nw.ensure_grad().data() : nullptr;
        const double* xv = nx.values.data();
        const double* wv = nw.values.data();
        for (std::size_t n = 0; n < d.n; ++n) {
          for (std::size_t co = 0; co < cout; ++co) {
            const double* gp = g + (n * cout + co) * ho * wo;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const std::size_t xbase = (n * cin + ci) * H * W;
              for (std::size_t i = 0; i < kh; ++i) {
                const std::ptrdiff_t yoff = static_cast<std::ptrdiff_t>(r * i) - p;
                const auto [m0, m1] = valid_range(yoff, s, H, ho);
                for (std::size_t j = 0; j < kw; ++j) {
                  const std::size_t widx = ((co * cin + ci) * kh + i) * kw + j;
                  const std::ptrdiff_t xoff = static_cast<std::ptrdiff_t>(r * j) - p;
                  const auto [n0, n1] = valid_range(xoff, s, W, wo);
                  const double wt = wv[widx];
                  double acc = 0.0;
                  for (std::size_t m = m0; m < m1; ++m) {
                    const std::size_t row =
                        xbase + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(s * m) + yoff) * W;
                    const double* grow = gp + m * wo;
                    for (std::size_t q = n0; q < n1; ++q) {
                      const std::size_t xi = row + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(s * q) + xoff);
                      if (dx) dx[xi] += wt * grow[q];
                      acc += xv[xi] * grow[q];
                    }
                  }
                  if (dw) dw[widx] += acc;
                }
              }
            }
          }
        }
        if (has_bias) {
          Node& nb = *self.inputs[2];
          if (nb.requires_grad) {
            auto& db = nb.ensure_grad();
            for (std::size_t n = 0; n < d.n; ++n)
              for (std::size_t co = 0; co < cout; ++co) {
                const double* gp = g + (n * cout + co) * ho * wo;
                double acc = 0.0;
                for (std::size_t q = 0; q < ho * wo; ++q) acc += gp[q];
                db[co] += acc;
              }
          }
        }
      });
}

Tensor maxpool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t padding) {
  const Dims4 d = spatial_dims(x, "maxpool2d");
  if (kernel == 0 || stride == 0) throw TensorError("maxpool2d: kernel and stride must be positive");
  if (2 * padding > kernel) {
    throw TensorError("maxpool2d: padding " + std::to_string(padding) + " exceeds half of kernel " +
                      std::to_string(kernel));
  }
  const Conv2dOptions o{stride, padding, 1};
  const std::size_t ho = conv_output_size(d.h, kernel, o);
  const std::size_t wo = conv_output_size(d.w, kernel, o);
  const auto p = static_cast<std::ptrdiff_t>(padding);
  const auto H = static_cast<std::ptrdiff_t>(d.h), W = static_cast<std::ptrdiff_t>(d.w);
  const double* xv = x.values().data();
  const std::size_t planes = d.n * d.c;
  std::vector<double> out(planes * ho * wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* xp = xv + pl * d.h * d.w;
    for (std::size_t m = 0; m < ho; ++m) {
      for (std::size_t q = 0; q < wo; ++q) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        bool found = false;
        for (std::size_t i = 0; i < kernel; ++i) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(m * stride + i) - p;
          if (y < 0 || y >= H) continue;
          for (std::size_t j = 0; j < kernel; ++j) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(q * stride + j) - p;
            if (xx < 0 || xx >= W) continue;
            const double v = xp[y * W + xx];
            if (!found || v > best) {
              best = v;
              best_idx = static_cast<std::size_t>(y * W + xx);
              found = true;
            }
          }
        }
        const std::size_t oi = (pl * ho + m) * wo + q;
        out[oi] = best;
        (*argmax)[oi] = pl * d.h * d.w + best_idx;
      }
    }
  }
  return make_result("maxpool2d", spatial_shape(x, d.n, d.c, ho, wo), std::move(out), {x}, [argmax](Node& self) {
    auto& dst = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) dst[(*argmax)[i]] += self.grad[i];
  });
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  const Dims4 d = spatial_dims(x, "upsample_nearest");
  if (factor == 0) throw TensorError("upsample_nearest: factor must be positive");
  const std::size_t ho = d.h * factor, wo = d.w * factor;
  const std::size_t planes = d.n * d.c;
  const double* xv = x.values().data();
  std::vector<double> out(planes * ho * wo);
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx)
        out[(pl * ho + y) * wo + xx] = xv[(pl * d.h + y / factor) * d.w + xx / factor];
  return make_result("upsample_nearest", spatial_shape(x, d.n, d.c, ho, wo), std::move(out), {x},
                     [d, factor, ho, wo, planes](Node& self) {
                       auto& dst = self.inputs[0]->ensure_grad();
                       for (std::size_t pl = 0; pl < planes; ++pl)
                         for (std::size_t y = 0; y < ho; ++y)
                           for (std::size_t xx = 0; xx < wo; ++xx)
                             dst[(pl * d.h + y / factor) * d.w + xx / factor] +=
                                 self.grad[(pl * ho + y) * wo + xx];
                     });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw TensorError("concat_channels of zero tensors");
  const Dims4 d0 = spatial_dims(parts[0], "concat_channels");
  std::vector<std::size_t> chans;
  std::size_t total = 0;
  for (const auto& t : parts) {
    const Dims4 d = spatial_dims(t, "concat_channels");
    if (t.rank() != parts[0].rank() || d.n != d0.n || d.h != d0.h || d.w != d0.w) {
      throw TensorError("concat_channels: shape " + shape_str(t.shape()) + " incompatible with " +
                        shape_str(parts[0].shape()));
    }
    chans.push_back(d.c);
    total += d.c;
  }
  const std::size_t plane = d0.h * d0.w;
  std::vector<double> out(d0.n * total * plane);
  for (std::size_t n = 0; n < d0.n; ++n) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const double* src = parts[k].values().data() + n * chans[k] * plane;
      std::copy(src, src + chans[k] * plane, out.data() + (n * total + offset) * plane);
      offset += chans[k];
    }
  }
  return make_result("concat_channels", spatial_shape(parts[0], d0.n, total, d0.h, d0.w), std::move(out), parts,
                     [d0, chans, total, plane](Node& self) {
                       for (std::size_t n = 0; n < d0.n; ++n) {
                         std::size_t offset = 0;
                         for (std::size_t k = 0; k < chans.size(); ++k) {
                           Node& in = *self.inputs[k];
                           if (in.requires_grad) {
                             auto& dst = in.ensure_grad();
                             const double* g = self.grad.data() + (n * total + offset) * plane;
                             double* dp = dst.data() + n * chans[k] * plane;
                             for (std::size_t i = 0; i < chans[k] * plane; ++i) dp[i] += g[i];
                           }
                           offset += chans[k];
                         }
                       }
                     });
}

BatchNormParams BatchNormParams::identity(std::size_t channels) {
  BatchNormParams p;
  p.weight = Tensor::full({channels}, 1.0, true);
  p.bias = Tensor::zeros({channels}, true);
  p.running_mean = Tensor::zeros({channels});
  p.running_var = Tensor::full({channels}, 1.0);
  return p;
}

Tensor batchnorm2d(const Tensor& x, BatchNormParams& params, Mode mode) {
  const Dims4 d = spatial_dims(x, "batchnorm2d");
  if (params.weight.numel() != d.c || params.bias.numel() != d.c || params.running_mean.numel() != d.c ||
      params.running_var.numel() != d.c) {
    throw TensorError("batchnorm2d: parameters do not match " + std::to_string(d.c) + " channels of " +
                      shape_str(x.shape()));
  }
  const std::size_t plane = d.h * d.w;
  const std::size_t count = d.n * plane;
  const double* xv = x.values().data();
  const auto wv = params.weight.values();
  const auto bv = params.bias.values();
  std::vector<double> mean_c(d.c), invstd(d.c);

  if (mode == Mode::train) {
    auto rm = params.running_mean.mutable_values();
    auto rv = params.running_var.mutable_values();
    for (std::size_t c = 0; c < d.c; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < d.n; ++n) {
        const double* xp = xv + (n * d.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += xp[i];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t n = 0; n < d.n; ++n) {
        const double* xp = xv + (n * d.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) ss += (xp[i] - mu) * (xp[i] - mu);
      }
      const double var = ss / static_cast<double>(count);
      mean_c[c] = mu;
      invstd[c] = 1.0 / std::sqrt(var + params.eps);
      const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
      rm[c] = (1.0 - params.momentum) * rm[c] + params.momentum * mu;
      rv[c] = (1.0 - params.momentum) * rv[c] + params.momentum * unbiased;
    }
  } else {
    const auto rm = params.running_mean.values();
    const auto rv = params.running_var.values();
    for (std::size_t c = 0; c < d.c; ++c) {
      mean_c[c] = rm[c];
      invstd[c] = 1.0 / std::sqrt(rv[c] + params.eps);
    }
  }

  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out(x.numel());
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c) {
      const std::size_t base = (n * d.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double h = (xv[base + i] - mean_c[c]) * invstd[c];
        (*xhat)[base + i] = h;
        out[base + i] = wv[c] * h + bv[c];
      }
    }

  const bool training = mode == Mode::train;
  return make_result(
      "batchnorm2d", x.shape(), std::move(out), {x, params.weight, params.bias},
      [d, plane, count, xhat, invstd, training](Node& self) {
        Node& nx = *self.inputs[0];
        Node& nw = *self.inputs[1];
        Node& nb = *self.inputs[2];
        const double* g = self.grad.data();
        std::vector<double> sum_g(d.c, 0.0), sum_gh(d.c, 0.0);
        for (std::size_t n = 0; n < d.n; ++n)
          for (std::size_t c = 0; c < d.c; ++c) {
            const std::size_t base = (n * d.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_g[c] += g[base + i];
              sum_gh[c] += g[base + i] * (*xhat)[base + i];
            }
          }
        if (nw.requires_grad) {
          auto& dw = nw.ensure_grad();
          for (std::size_t c = 0; c < d.c; ++c) dw[c] += sum_gh[c];
        }
        if (nb.requires_grad) {
          auto& db = nb.ensure_grad();
          for (std::size_t c = 0; c < d.c; ++c) db[c] += sum_g[c];
        }
        if (!nx.requires_grad) return;
        auto& dx = nx.ensure_grad();
        const double inv_count = 1.0 / static_cast<double>(count);
        for (std::size_t n = 0; n < d.n; ++n)
          for (std::size_t c = 0; c < d.c; ++c) {
            const double wc = nw.values[c];
            const std::size_t base = (n * d.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              if (training) {
                // d/dx of w * (x - mu) / sigma with batch statistics.
                dx[base + i] += wc * invstd[c] *
                                (g[base + i] - inv_count * sum_g[c] - (*xhat)[base + i] * inv_count * sum_gh[c]);
              } else {
                dx[base + i] += wc * invstd[c] * g[base + i];
              }
            }
          }
      });
}

}  // namespace msdet
