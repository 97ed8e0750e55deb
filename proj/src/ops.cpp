#include "picnn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "picnn/error.hpp"

namespace picnn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// dst (+)= a * b with a summation order that does not depend on buffer alignment.
template <class Dst, class A, class B>
void product(Dst&& dst, const A& a, const B& b, bool accumulate = false) {
  const Eigen::Index m = a.rows(), k = a.cols(), n = b.cols();
  if (m >= 8 && k >= 8 && n >= 8) {
    if (accumulate) {
      dst.noalias() += a * b;
    } else {
      dst.noalias() = a * b;
    }
    return;
  }
  if (!accumulate) dst.setZero();
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index l = 0; l < k; ++l) {
      const double x = a(i, l);
      for (Eigen::Index j = 0; j < n; ++j) dst(i, j) += x * b(l, j);
    }
}

[[noreturn]] void shape_fail(const std::string& op, const std::string& what) {
  throw ShapeError(op + ": " + what);
}

void require_ndim(const Tensor& t, std::size_t n, const char* op, const char* name) {
  if (t.ndim() != n) {
    shape_fail(op, std::string(name) + " must be " + std::to_string(n) + "-D, got " +
                       shape_str(t.shape()));
  }
}

// ---------------------------------------------------------------------------
// elementwise helpers

Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (a.numel() == 1) return b.shape();
  if (b.numel() == 1) return a.shape();
  shape_fail(op, "operand shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ and neither is a scalar");
}

template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA da, DB db) {
  Shape shape = broadcast_shape(a, b, op);
  const std::size_t n = numel(shape);
  const bool sa = a.numel() == 1 && n != 1, sb = b.numel() == 1 && n != 1;
  auto ad = a.data(), bd = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[sa ? 0 : i], bd[sb ? 0 : i]);
  return make_result(
      std::move(shape), std::move(out), op, {a, b}, [a, b, n, sa, sb, da, db](auto g) {
        auto ad = a.data(), bd = b.data();
        if (a.requires_grad()) {
          std::vector<double> ga(a.numel(), 0.0);
          for (std::size_t i = 0; i < n; ++i)
            ga[sa ? 0 : i] += g[i] * da(ad[sa ? 0 : i], bd[sb ? 0 : i]);
          accumulate_grad(a, ga);
        }
        if (b.requires_grad()) {
          std::vector<double> gb(b.numel(), 0.0);
          for (std::size_t i = 0; i < n; ++i)
            gb[sb ? 0 : i] += g[i] * db(ad[sa ? 0 : i], bd[sb ? 0 : i]);
          accumulate_grad(b, gb);
        }
      });
}

// df receives (x, f(x)).
template <class F, class DF>
Tensor unary(const Tensor& a, const char* op, F f, DF df) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = f(ad[i]);
  Shape shape = a.shape();
  auto saved = std::make_shared<std::vector<double>>(out);
  return make_result(std::move(shape), std::move(out), op, {a}, [a, saved, df](auto g) {
    auto ad = a.data();
    std::vector<double> ga(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) ga[i] = g[i] * df(ad[i], (*saved)[i]);
    accumulate_grad(a, ga);
  });
}

// ---------------------------------------------------------------------------
// spatial index tables

struct Geometry {
  std::size_t n, c, h, w, kh, kw, stride, oh, ow;
  // row_src[ki * oh + oy] is the source row or -1 for a zero pad
  std::vector<std::int64_t> row_src, col_src;
  // per kj, outputs [run_lo, run_hi) read consecutive source columns
  std::vector<std::size_t> run_lo, run_hi;
};

std::vector<std::int64_t> axis_table(std::size_t in, std::size_t k, std::size_t out,
                                     std::size_t stride, std::size_t before, PadMode mode) {
  std::vector<std::int64_t> table(k * out);
  const auto len = static_cast<std::int64_t>(in);
  for (std::size_t ki = 0; ki < k; ++ki) {
    for (std::size_t o = 0; o < out; ++o) {
      std::int64_t pos = static_cast<std::int64_t>(o * stride + ki) -
                         static_cast<std::int64_t>(before);
      if (pos < 0 || pos >= len) {
        pos = mode == PadMode::circular ? ((pos % len) + len) % len : -1;
      }
      table[ki * out + o] = pos;
    }
  }
  return table;
}

Geometry make_geometry(const Tensor& input, std::size_t kh, std::size_t kw, std::size_t stride,
                       const PaddingSpec& pad, const char* op) {
  require_ndim(input, 4, op, "input");
  if (stride == 0) shape_fail(op, "stride must be >= 1");
  Geometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.kh = kh;
  g.kw = kw;
  g.stride = stride;
  const std::size_t ph = g.h + pad.top + pad.bottom, pw = g.w + pad.left + pad.right;
  if (kh == 0 || kw == 0 || ph < kh || pw < kw) {
    shape_fail(op, "window " + std::to_string(kh) + "x" + std::to_string(kw) +
                       " does not fit padded input " + std::to_string(ph) + "x" +
                       std::to_string(pw));
  }
  g.oh = (ph - kh) / stride + 1;
  g.ow = (pw - kw) / stride + 1;
  g.row_src = axis_table(g.h, kh, g.oh, stride, pad.top, pad.rows);
  g.col_src = axis_table(g.w, kw, g.ow, stride, pad.left, pad.cols);
  g.run_lo.assign(kw, 0);
  g.run_hi.assign(kw, 0);
  if (stride == 1) {
    for (std::size_t kj = 0; kj < kw; ++kj) {
      const std::int64_t* cs = g.col_src.data() + kj * g.ow;
      const auto direct = [&](std::size_t o) {
        return cs[o] >= 0 && cs[o] == static_cast<std::int64_t>(o + kj) - static_cast<std::int64_t>(pad.left);
      };
      std::size_t lo = 0;
      while (lo < g.ow && !direct(lo)) ++lo;
      std::size_t hi = lo;
      while (hi < g.ow && direct(hi)) ++hi;
      g.run_lo[kj] = lo;
      g.run_hi[kj] = hi;
    }
  }
  return g;
}

// cols has shape [c*kh*kw, oh*ow] for one sample.
void im2col(const double* x, const Geometry& g, double* cols) {
  const std::size_t p = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    const double* xc = x + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t sy = g.row_src[ki * g.oh + oy];
          double* dst = row + oy * g.ow;
          if (sy < 0) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = xc + sy * g.w;
          const std::int64_t* cs = g.col_src.data() + kj * g.ow;
          const std::size_t lo = g.run_lo[kj], hi = g.run_hi[kj];
          for (std::size_t ox = 0; ox < lo; ++ox) dst[ox] = cs[ox] < 0 ? 0.0 : src[cs[ox]];
          if (hi > lo) std::copy(src + cs[lo], src + cs[lo] + (hi - lo), dst + lo);
          for (std::size_t ox = hi; ox < g.ow; ++ox) dst[ox] = cs[ox] < 0 ? 0.0 : src[cs[ox]];
        }
      }
    }
  }
}

void col2im(const double* cols, const Geometry& g, double* dx) {
  const std::size_t p = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    double* xc = dx + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t sy = g.row_src[ki * g.oh + oy];
          if (sy < 0) continue;
          double* dst = xc + sy * g.w;
          const double* src = row + oy * g.ow;
          const std::int64_t* cs = g.col_src.data() + kj * g.ow;
          const std::size_t lo = g.run_lo[kj], hi = g.run_hi[kj];
          for (std::size_t ox = 0; ox < lo; ++ox)
            if (cs[ox] >= 0) dst[cs[ox]] += src[ox];
          if (hi > lo) {
            double* d = dst + cs[lo];
            for (std::size_t ox = lo; ox < hi; ++ox) d[ox - lo] += src[ox];
          }
          for (std::size_t ox = hi; ox < g.ow; ++ox)
            if (cs[ox] >= 0) dst[cs[ox]] += src[ox];
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise algebra

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0) throw std::domain_error("div: division by zero");
  }
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor add_scalar(const Tensor& a, double c) {
  return unary(
      a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary(
      a, "mul_scalar", [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor pow2(const Tensor& a) {
  return unary(
      a, "pow2", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, "abs", [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  auto ad = a.data();
  std::vector<double> out(ad.size());
  auto slope = std::make_shared<std::vector<double>>(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const double x = ad[i];
    const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
    out[i] = x * cdf;
    (*slope)[i] = cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
  }
  return make_result(a.shape(), std::move(out), "gelu", {a}, [a, slope](auto g) {
    std::vector<double> ga(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * (*slope)[i];
    accumulate_grad(a, ga);
  });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({1}, {s}, "sum", {a}, [a](auto g) {
    std::vector<double> ga(a.numel(), g[0]);
    accumulate_grad(a, ga);
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) shape_fail("mean", "empty tensor");
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double n = static_cast<double>(a.numel());
  return make_result({1}, {s / n}, "mean", {a}, [a, n](auto g) {
    std::vector<double> ga(a.numel(), g[0] / n);
    accumulate_grad(a, ga);
  });
}

Tensor max_reduce(const Tensor& a) {
  if (a.numel() == 0) shape_fail("max_reduce", "empty tensor");
  auto d = a.data();
  const std::size_t arg = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
  return make_result({1}, {d[arg]}, "max_reduce", {a}, [a, arg](auto g) {
    std::vector<double> ga(a.numel(), 0.0);
    ga[arg] = g[0];
    accumulate_grad(a, ga);
  });
}

// ---------------------------------------------------------------------------
// shape and indexing

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    shape_fail("reshape", "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), "reshape", {a},
                     [a](auto g) { accumulate_grad(a, g); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_ndim(a, 2, "matmul", "lhs");
  require_ndim(b, 2, "matmul", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    shape_fail("matmul", "inner dimensions differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  product(MapMat(out.data(), m, n), CMapMat(a.data().data(), m, k), CMapMat(b.data().data(), k, n));
  return make_result({m, n}, std::move(out), "matmul", {a, b}, [a, b, m, k, n](auto g) {
    CMapMat gm(g.data(), m, n);
    if (a.requires_grad()) {
      std::vector<double> ga(m * k);
      product(MapMat(ga.data(), m, k), gm, CMapMat(b.data().data(), k, n).transpose());
      accumulate_grad(a, ga);
    }
    if (b.requires_grad()) {
      std::vector<double> gb(k * n);
      product(MapMat(gb.data(), k, n), CMapMat(a.data().data(), m, k).transpose(), gm);
      accumulate_grad(b, gb);
    }
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_ndim(a, 2, "slice_cols", "input");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (begin >= end || end > cols) {
    shape_fail("slice_cols", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                 ") invalid for " + std::to_string(cols) + " columns");
  }
  const std::size_t w = end - begin;
  std::vector<double> out(rows * w);
  auto d = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(d.begin() + r * cols + begin, w, out.begin() + r * w);
  return make_result({rows, w}, std::move(out), "slice_cols", {a},
                     [a, rows, cols, begin, w](auto g) {
                       std::vector<double> ga(rows * cols, 0.0);
                       for (std::size_t r = 0; r < rows; ++r)
                         std::copy_n(g.begin() + r * w, w, ga.begin() + r * cols + begin);
                       accumulate_grad(a, ga);
                     });
}

Tensor select_row(const Tensor& a, std::size_t row) {
  require_ndim(a, 2, "select_row", "input");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (row >= rows) shape_fail("select_row", "row " + std::to_string(row) + " out of range");
  std::vector<double> out(a.data().begin() + row * cols, a.data().begin() + (row + 1) * cols);
  return make_result({1, cols}, std::move(out), "select_row", {a}, [a, row, cols](auto g) {
    std::vector<double> ga(a.numel(), 0.0);
    std::copy(g.begin(), g.end(), ga.begin() + row * cols);
    accumulate_grad(a, ga);
  });
}

Tensor select(const Tensor& a, std::size_t index) {
  if (index >= a.numel()) shape_fail("select", "index " + std::to_string(index) + " out of range");
  return make_result({1}, {a.data()[index]}, "select", {a}, [a, index](auto g) {
    std::vector<double> ga(a.numel(), 0.0);
    ga[index] = g[0];
    accumulate_grad(a, ga);
  });
}

Tensor softmax(const Tensor& logits) {
  auto d = logits.data();
  if (d.empty()) shape_fail("softmax", "empty tensor");
  const double mx = *std::max_element(d.begin(), d.end());
  std::vector<double> p(d.size());
  double z = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) z += (p[i] = std::exp(d[i] - mx));
  for (double& v : p) v /= z;
  auto saved = std::make_shared<std::vector<double>>(p);
  return make_result(logits.shape(), std::move(p), "softmax", {logits}, [logits, saved](auto g) {
    const auto& p = *saved;
    double dot = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) dot += g[i] * p[i];
    std::vector<double> ga(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) ga[i] = p[i] * (g[i] - dot);
    accumulate_grad(logits, ga);
  });
}

Tensor log_softmax(const Tensor& logits) {
  auto d = logits.data();
  if (d.empty()) shape_fail("log_softmax", "empty tensor");
  const double mx = *std::max_element(d.begin(), d.end());
  double z = 0.0;
  for (double v : d) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = d[i] - lse;
  auto saved = std::make_shared<std::vector<double>>(out);
  return make_result(logits.shape(), std::move(out), "log_softmax", {logits},
                     [logits, saved](auto g) {
                       double gs = 0.0;
                       for (double v : g) gs += v;
                       std::vector<double> ga(saved->size());
                       for (std::size_t i = 0; i < ga.size(); ++i)
                         ga[i] = g[i] - std::exp((*saved)[i]) * gs;
                       accumulate_grad(logits, ga);
                     });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_ndim(a, 4, "concat_channels", "lhs");
  require_ndim(b, 4, "concat_channels", "rhs");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    shape_fail("concat_channels", "batch/spatial dims differ: " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<double> out(n * (ca + cb) * hw);
  auto ad = a.data(), bd = b.data();
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(ad.begin() + s * ca * hw, ca * hw, out.begin() + s * (ca + cb) * hw);
    std::copy_n(bd.begin() + s * cb * hw, cb * hw, out.begin() + (s * (ca + cb) + ca) * hw);
  }
  return make_result({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), "concat_channels", {a, b},
                     [a, b, n, ca, cb, hw](auto g) {
                       if (a.requires_grad()) {
                         std::vector<double> ga(n * ca * hw);
                         for (std::size_t s = 0; s < n; ++s)
                           std::copy_n(g.begin() + s * (ca + cb) * hw, ca * hw,
                                       ga.begin() + s * ca * hw);
                         accumulate_grad(a, ga);
                       }
                       if (b.requires_grad()) {
                         std::vector<double> gb(n * cb * hw);
                         for (std::size_t s = 0; s < n; ++s)
                           std::copy_n(g.begin() + (s * (ca + cb) + ca) * hw, cb * hw,
                                       gb.begin() + s * cb * hw);
                         accumulate_grad(b, gb);
                       }
                     });
}

Tensor slice_batch(const Tensor& a, std::size_t index) {
  if (a.ndim() < 1 || index >= a.dim(0)) {
    shape_fail("slice_batch", "index " + std::to_string(index) + " out of range for " +
                                  shape_str(a.shape()));
  }
  const std::size_t per = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = 1;
  std::vector<double> out(a.data().begin() + index * per, a.data().begin() + (index + 1) * per);
  return make_result(std::move(shape), std::move(out), "slice_batch", {a},
                     [a, index, per](auto g) {
                       std::vector<double> ga(a.numel(), 0.0);
                       std::copy(g.begin(), g.end(), ga.begin() + index * per);
                       accumulate_grad(a, ga);
                     });
}

Tensor stack_batch(const std::vector<Tensor>& items) {
  if (items.empty()) shape_fail("stack_batch", "no tensors");
  Shape inner(items[0].shape().begin() + 1, items[0].shape().end());
  std::size_t total = 0;
  std::vector<double> out;
  for (const Tensor& t : items) {
    if (Shape(t.shape().begin() + 1, t.shape().end()) != inner) {
      shape_fail("stack_batch", "item shape " + shape_str(t.shape()) + " differs from " +
                                    shape_str(items[0].shape()));
    }
    total += t.dim(0);
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  Shape shape = items[0].shape();
  shape[0] = total;
  return make_result(std::move(shape), std::move(out), "stack_batch", items, [items](auto g) {
    std::size_t offset = 0;
    for (const Tensor& t : items) {
      if (t.requires_grad()) accumulate_grad(t, g.subspan(offset, t.numel()));
      offset += t.numel();
    }
  });
}

Tensor gather_affine(const Tensor& a, Shape out_shape, std::vector<AffineGather> plan) {
  if (plan.size() != numel(out_shape)) {
    shape_fail("gather_affine", "plan length " + std::to_string(plan.size()) +
                                    " does not match " + shape_str(out_shape));
  }
  auto d = a.data();
  std::vector<double> out(plan.size());
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const auto& e = plan[i];
    if (e.source >= static_cast<std::int64_t>(d.size())) {
      shape_fail("gather_affine", "source index out of range");
    }
    out[i] = e.offset + (e.source >= 0 ? e.scale * d[e.source] : 0.0);
  }
  auto saved = std::make_shared<std::vector<AffineGather>>(std::move(plan));
  return make_result(std::move(out_shape), std::move(out), "gather_affine", {a},
                     [a, saved](auto g) {
                       std::vector<double> ga(a.numel(), 0.0);
                       const auto& p = *saved;
                       for (std::size_t i = 0; i < p.size(); ++i)
                         if (p[i].source >= 0) ga[p[i].source] += p[i].scale * g[i];
                       accumulate_grad(a, ga);
                     });
}

// ---------------------------------------------------------------------------
// convolution

Tensor conv2d(const Tensor& input, const Tensor& weight, const std::optional<Tensor>& bias,
              std::size_t stride, const PaddingSpec& padding) {
  require_ndim(weight, 4, "conv2d", "weight");
  Geometry g = make_geometry(input, weight.dim(2), weight.dim(3), stride, padding, "conv2d");
  const std::size_t co = weight.dim(0);
  if (weight.dim(1) != g.c) {
    shape_fail("conv2d", "weight expects " + std::to_string(weight.dim(1)) +
                             " input channels (Ci) but input has C=" + std::to_string(g.c));
  }
  if (bias && (bias->numel() != co)) {
    shape_fail("conv2d", "bias length " + std::to_string(bias->numel()) +
                             " does not match Co=" + std::to_string(co));
  }
  const std::size_t k = g.c * g.kh * g.kw, p = g.oh * g.ow;
  std::vector<double> out(g.n * co * p);
  std::vector<double> cols(k * p);
  CMapMat wm(weight.data().data(), co, k);
  for (std::size_t s = 0; s < g.n; ++s) {
    im2col(input.data().data() + s * g.c * g.h * g.w, g, cols.data());
    MapMat om(out.data() + s * co * p, co, p);
    product(om, wm, CMapMat(cols.data(), k, p));
    if (bias) {
      for (std::size_t o = 0; o < co; ++o) om.row(o).array() += bias->data()[o];
    }
  }
  std::vector<Tensor> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  auto geo = std::make_shared<Geometry>(std::move(g));
  return make_result(
      {geo->n, co, geo->oh, geo->ow}, std::move(out), "conv2d", inputs,
      [input, weight, bias, geo, co, k, p](auto gout) {
        const Geometry& g = *geo;
        CMapMat wm(weight.data().data(), co, k);
        std::vector<double> cols(k * p), dcols;
        std::vector<double> dx, dw, db;
        if (input.requires_grad()) {
          dx.assign(input.numel(), 0.0);
          dcols.resize(k * p);
        }
        if (weight.requires_grad()) dw.assign(weight.numel(), 0.0);
        if (bias && bias->requires_grad()) db.assign(co, 0.0);
        for (std::size_t s = 0; s < g.n; ++s) {
          CMapMat gm(gout.data() + s * co * p, co, p);
          if (!dw.empty()) {
            im2col(input.data().data() + s * g.c * g.h * g.w, g, cols.data());
            product(MapMat(dw.data(), co, k), gm, CMapMat(cols.data(), k, p).transpose(), true);
          }
          if (!dx.empty()) {
            product(MapMat(dcols.data(), k, p), wm.transpose(), gm);
            col2im(dcols.data(), g, dx.data() + s * g.c * g.h * g.w);
          }
          if (!db.empty()) {
            for (std::size_t o = 0; o < co; ++o) {
              for (std::size_t q = 0; q < p; ++q) db[o] += gm(o, q);
            }
          }
        }
        if (!dx.empty()) accumulate_grad(input, dx);
        if (!dw.empty()) accumulate_grad(weight, dw);
        if (!db.empty()) accumulate_grad(*bias, db);
      });
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& weight,
                        const std::optional<Tensor>& bias, std::size_t stride,
                        const PaddingSpec& padding) {
  require_ndim(weight, 4, "depthwise_conv2d", "weight");
  Geometry g = make_geometry(input, weight.dim(2), weight.dim(3), stride, padding,
                             "depthwise_conv2d");
  if (weight.dim(0) != g.c || weight.dim(1) != 1) {
    shape_fail("depthwise_conv2d", "weight " + shape_str(weight.shape()) +
                                       " incompatible with C=" + std::to_string(g.c) +
                                       " (expected [C,1,kh,kw])");
  }
  if (bias && bias->numel() != g.c) shape_fail("depthwise_conv2d", "bias length mismatch");
  auto geo = std::make_shared<Geometry>(std::move(g));
  const Geometry& G = *geo;
  const std::size_t p = G.oh * G.ow;
  std::vector<double> out(G.n * G.c * p, 0.0);
  auto x = input.data();
  auto w = weight.data();
  for (std::size_t s = 0; s < G.n; ++s) {
    for (std::size_t c = 0; c < G.c; ++c) {
      const double* xc = x.data() + (s * G.c + c) * G.h * G.w;
      double* oc = out.data() + (s * G.c + c) * p;
      const double b0 = bias ? bias->data()[c] : 0.0;
      std::fill(oc, oc + p, b0);
      for (std::size_t ki = 0; ki < G.kh; ++ki) {
        for (std::size_t kj = 0; kj < G.kw; ++kj) {
          const double wv = w[(c * G.kh + ki) * G.kw + kj];
          const std::int64_t* cs = G.col_src.data() + kj * G.ow;
          for (std::size_t oy = 0; oy < G.oh; ++oy) {
            const std::int64_t sy = G.row_src[ki * G.oh + oy];
            if (sy < 0) continue;
            const double* src = xc + sy * G.w;
            double* dst = oc + oy * G.ow;
            for (std::size_t ox = 0; ox < G.ow; ++ox)
              if (cs[ox] >= 0) dst[ox] += wv * src[cs[ox]];
          }
        }
      }
    }
  }
  std::vector<Tensor> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  return make_result(
      {G.n, G.c, G.oh, G.ow}, std::move(out), "depthwise_conv2d", inputs,
      [input, weight, bias, geo, p](auto gout) {
        const Geometry& G = *geo;
        auto x = input.data();
        auto w = weight.data();
        std::vector<double> dx, dw, db;
        if (input.requires_grad()) dx.assign(input.numel(), 0.0);
        if (weight.requires_grad()) dw.assign(weight.numel(), 0.0);
        if (bias && bias->requires_grad()) db.assign(G.c, 0.0);
        for (std::size_t s = 0; s < G.n; ++s) {
          for (std::size_t c = 0; c < G.c; ++c) {
            const std::size_t xoff = (s * G.c + c) * G.h * G.w;
            const double* gc = gout.data() + (s * G.c + c) * p;
            if (!db.empty())
              for (std::size_t i = 0; i < p; ++i) db[c] += gc[i];
            for (std::size_t ki = 0; ki < G.kh; ++ki) {
              for (std::size_t kj = 0; kj < G.kw; ++kj) {
                const std::size_t widx = (c * G.kh + ki) * G.kw + kj;
                const std::int64_t* cs = G.col_src.data() + kj * G.ow;
                double acc = 0.0;
                for (std::size_t oy = 0; oy < G.oh; ++oy) {
                  const std::int64_t sy = G.row_src[ki * G.oh + oy];
                  if (sy < 0) continue;
                  const std::size_t rowoff = xoff + sy * G.w;
                  const double* go = gc + oy * G.ow;
                  for (std::size_t ox = 0; ox < G.ow; ++ox) {
                    if (cs[ox] < 0) continue;
                    acc += go[ox] * x[rowoff + cs[ox]];
                    if (!dx.empty()) dx[rowoff + cs[ox]] += go[ox] * w[widx];
                  }
                }
                if (!dw.empty()) dw[widx] += acc;
              }
            }
          }
        }
        if (!dx.empty()) accumulate_grad(input, dx);
        if (!dw.empty()) accumulate_grad(weight, dw);
        if (!db.empty()) accumulate_grad(*bias, db);
      });
}

Tensor depthwise_separable_conv2d(const Tensor& input, const Tensor& depthwise_weight,
                                  const Tensor& pointwise_weight,
                                  const std::optional<Tensor>& bias, std::size_t stride,
                                  const PaddingSpec& padding) {
  require_ndim(pointwise_weight, 4, "depthwise_separable_conv2d", "pointwise weight");
  if (pointwise_weight.dim(2) != 1 || pointwise_weight.dim(3) != 1) {
    shape_fail("depthwise_separable_conv2d",
               "pointwise weight must be [Co,C,1,1], got " + shape_str(pointwise_weight.shape()));
  }
  Tensor mid = depthwise_conv2d(input, depthwise_weight, std::nullopt, stride, padding);
  return conv2d(mid, pointwise_weight, bias, 1, PaddingSpec::none());
}

// ---------------------------------------------------------------------------
// pooling

Tensor maxpool2d(const Tensor& input, std::size_t size, std::size_t stride,
                 const PaddingSpec& padding) {
  if (size == 0) shape_fail("maxpool2d", "size must be >= 1");
  Geometry g = make_geometry(input, size, size, stride, padding, "maxpool2d");
  const std::size_t p = g.oh * g.ow;
  std::vector<double> out(g.n * g.c * p);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  auto x = input.data();
  for (std::size_t plane = 0; plane < g.n * g.c; ++plane) {
    const std::size_t off = plane * g.h * g.w;
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_i = std::numeric_limits<std::size_t>::max();
        for (std::size_t ki = 0; ki < size; ++ki) {
          const std::int64_t sy = g.row_src[ki * g.oh + oy];
          if (sy < 0) continue;
          for (std::size_t kj = 0; kj < size; ++kj) {
            const std::int64_t sx = g.col_src[kj * g.ow + ox];
            if (sx < 0) continue;
            const std::size_t idx = off + sy * g.w + sx;
            if (x[idx] > best) {
              best = x[idx];
              best_i = idx;
            }
          }
        }
        if (best_i == std::numeric_limits<std::size_t>::max()) {
          shape_fail("maxpool2d", "window lies entirely in padding");
        }
        out[plane * p + oy * g.ow + ox] = best;
        (*arg)[plane * p + oy * g.ow + ox] = best_i;
      }
    }
  }
  return make_result({g.n, g.c, g.oh, g.ow}, std::move(out), "maxpool2d", {input},
                     [input, arg](auto gout) {
                       std::vector<double> dx(input.numel(), 0.0);
                       for (std::size_t i = 0; i < arg->size(); ++i) dx[(*arg)[i]] += gout[i];
                       accumulate_grad(input, dx);
                     });
}

Tensor avgpool2d(const Tensor& input, std::size_t size, std::size_t stride,
                 const PaddingSpec& padding) {
  if (size == 0) shape_fail("avgpool2d", "size must be >= 1");
  auto geo = std::make_shared<Geometry>(
      make_geometry(input, size, size, stride, padding, "avgpool2d"));
  const Geometry& g = *geo;
  const std::size_t p = g.oh * g.ow;
  std::vector<double> out(g.n * g.c * p, 0.0);
  auto counts = std::make_shared<std::vector<double>>(p, 0.0);
  for (std::size_t oy = 0; oy < g.oh; ++oy)
    for (std::size_t ox = 0; ox < g.ow; ++ox)
      for (std::size_t ki = 0; ki < size; ++ki)
        for (std::size_t kj = 0; kj < size; ++kj)
          if (g.row_src[ki * g.oh + oy] >= 0 && g.col_src[kj * g.ow + ox] >= 0)
            (*counts)[oy * g.ow + ox] += 1.0;
  auto x = input.data();
  for (std::size_t plane = 0; plane < g.n * g.c; ++plane) {
    const std::size_t off = plane * g.h * g.w;
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        double s = 0.0;
        for (std::size_t ki = 0; ki < size; ++ki) {
          const std::int64_t sy = g.row_src[ki * g.oh + oy];
          if (sy < 0) continue;
          for (std::size_t kj = 0; kj < size; ++kj) {
            const std::int64_t sx = g.col_src[kj * g.ow + ox];
            if (sx >= 0) s += x[off + sy * g.w + sx];
          }
        }
        out[plane * p + oy * g.ow + ox] = s / (*counts)[oy * g.ow + ox];
      }
    }
  }
  return make_result({g.n, g.c, g.oh, g.ow}, std::move(out), "avgpool2d", {input},
                     [input, geo, counts, size](auto gout) {
                       const Geometry& g = *geo;
                       const std::size_t p = g.oh * g.ow;
                       std::vector<double> dx(input.numel(), 0.0);
                       for (std::size_t plane = 0; plane < g.n * g.c; ++plane) {
                         const std::size_t off = plane * g.h * g.w;
                         for (std::size_t oy = 0; oy < g.oh; ++oy) {
                           for (std::size_t ox = 0; ox < g.ow; ++ox) {
                             const double v = gout[plane * p + oy * g.ow + ox] /
                                              (*counts)[oy * g.ow + ox];
                             for (std::size_t ki = 0; ki < size; ++ki) {
                               const std::int64_t sy = g.row_src[ki * g.oh + oy];
                               if (sy < 0) continue;
                               for (std::size_t kj = 0; kj < size; ++kj) {
                                 const std::int64_t sx = g.col_src[kj * g.ow + ox];
                                 if (sx >= 0) dx[off + sy * g.w + sx] += v;
                               }
                             }
                           }
                         }
                       }
                       accumulate_grad(input, dx);
                     });
}

// ---------------------------------------------------------------------------
// resampling

namespace {

struct Tap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> resample_axis(std::size_t in, std::size_t out, UpsampleMode mode) {
  std::vector<Tap> taps(out);
  for (std::size_t o = 0; o < out; ++o) {
    if (mode == UpsampleMode::nearest) {
      const std::size_t s = std::min(in - 1, (o * in) / out);
      taps[o] = {s, s, 0.0};
      continue;
    }
    const double pos = out > 1 ? static_cast<double>(o) * static_cast<double>(in - 1) /
                                     static_cast<double>(out - 1)
                               : 0.0;
    std::size_t i0 = std::min(in - 1, static_cast<std::size_t>(std::floor(pos)));
    const std::size_t i1 = std::min(in - 1, i0 + 1);
    taps[o] = {i0, i1, pos - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor upsample_to(const Tensor& input, UpsampleMode mode, std::size_t out_h,
                   std::size_t out_w) {
  require_ndim(input, 4, "upsample", "input");
  if (out_h == 0 || out_w == 0) shape_fail("upsample", "output size must be positive");
  const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  auto ty = std::make_shared<std::vector<Tap>>(resample_axis(h, out_h, mode));
  auto tx = std::make_shared<std::vector<Tap>>(resample_axis(w, out_w, mode));
  std::vector<double> out(planes * out_h * out_w);
  auto x = input.data();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* xp = x.data() + pl * h * w;
    double* op = out.data() + pl * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const Tap& a = (*ty)[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const Tap& b = (*tx)[ox];
        op[oy * out_w + ox] = (1 - a.w1) * ((1 - b.w1) * xp[a.i0 * w + b.i0] + b.w1 * xp[a.i0 * w + b.i1]) +
                              a.w1 * ((1 - b.w1) * xp[a.i1 * w + b.i0] + b.w1 * xp[a.i1 * w + b.i1]);
      }
    }
  }
  return make_result(
      {input.dim(0), input.dim(1), out_h, out_w}, std::move(out), "upsample", {input},
      [input, ty, tx, planes, h, w, out_h, out_w](auto gout) {
        std::vector<double> dx(input.numel(), 0.0);
        for (std::size_t pl = 0; pl < planes; ++pl) {
          double* dp = dx.data() + pl * h * w;
          const double* gp = gout.data() + pl * out_h * out_w;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const Tap& a = (*ty)[oy];
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const Tap& b = (*tx)[ox];
              const double gv = gp[oy * out_w + ox];
              dp[a.i0 * w + b.i0] += gv * (1 - a.w1) * (1 - b.w1);
              dp[a.i0 * w + b.i1] += gv * (1 - a.w1) * b.w1;
              dp[a.i1 * w + b.i0] += gv * a.w1 * (1 - b.w1);
              dp[a.i1 * w + b.i1] += gv * a.w1 * b.w1;
            }
          }
        }
        accumulate_grad(input, dx);
      });
}

Tensor upsample(const Tensor& input, UpsampleMode mode, std::size_t scale) {
  if (scale < 1) shape_fail("upsample", "scale must be >= 1");
  require_ndim(input, 4, "upsample", "input");
  return upsample_to(input, mode, input.dim(2) * scale, input.dim(3) * scale);
}

// ---------------------------------------------------------------------------
// normalization

Tensor group_norm(const Tensor& input, std::size_t groups, const Tensor& gamma,
                  const Tensor& beta, double eps) {
  require_ndim(input, 4, "group_norm", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (groups == 0 || c % groups != 0) {
    shape_fail("group_norm", "channels C=" + std::to_string(c) + " not divisible by groups=" +
                                 std::to_string(groups));
  }
  if (gamma.numel() != c || beta.numel() != c) {
    shape_fail("group_norm", "gamma/beta length must equal C=" + std::to_string(c));
  }
  const std::size_t cg = c / groups, m = cg * hw;
  auto x = input.data();
  auto normed = std::make_shared<std::vector<double>>(input.numel());
  auto inv_std = std::make_shared<std::vector<double>>(n * groups);
  std::vector<double> out(input.numel());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t off = (s * c + gi * cg) * hw;
      double mu = 0.0;
      for (std::size_t i = 0; i < m; ++i) mu += x[off + i];
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t i = 0; i < m; ++i) var += (x[off + i] - mu) * (x[off + i] - mu);
      var /= static_cast<double>(m);
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[s * groups + gi] = is;
      for (std::size_t cc = 0; cc < cg; ++cc) {
        const std::size_t ch = gi * cg + cc;
        const double ga = gamma.data()[ch], be = beta.data()[ch];
        for (std::size_t i = off + cc * hw; i < off + (cc + 1) * hw; ++i) {
          const double y = (x[i] - mu) * is;
          (*normed)[i] = y;
          out[i] = ga * y + be;
        }
      }
    }
  }
  return make_result(
      input.shape(), std::move(out), "group_norm", {input, gamma, beta},
      [input, gamma, beta, normed, inv_std, n, c, hw, groups, cg, m](auto gout) {
        const auto& y = *normed;
        std::vector<double> dx, dgamma(c, 0.0), dbeta(c, 0.0);
        if (input.requires_grad()) dx.assign(input.numel(), 0.0);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t off = (s * c + gi * cg) * hw;
            double mean_dy = 0.0, mean_dyy = 0.0;
            for (std::size_t cc = 0; cc < cg; ++cc) {
              const std::size_t ch = gi * cg + cc;
              double sg = 0.0, sgy = 0.0;
              for (std::size_t i = off + cc * hw; i < off + (cc + 1) * hw; ++i) {
                sg += gout[i];
                sgy += gout[i] * y[i];
              }
              dgamma[ch] += sgy;
              dbeta[ch] += sg;
              mean_dy += sg * gamma.data()[ch];
              mean_dyy += sgy * gamma.data()[ch];
            }
            if (dx.empty()) continue;
            mean_dy /= static_cast<double>(m);
            mean_dyy /= static_cast<double>(m);
            const double is = (*inv_std)[s * groups + gi];
            for (std::size_t cc = 0; cc < cg; ++cc) {
              const double ga = gamma.data()[gi * cg + cc];
              for (std::size_t i = off + cc * hw; i < off + (cc + 1) * hw; ++i) {
                dx[i] = is * (gout[i] * ga - mean_dy - y[i] * mean_dyy);
              }
            }
          }
        }
        if (!dx.empty()) accumulate_grad(input, dx);
        accumulate_grad(gamma, dgamma);
        accumulate_grad(beta, dbeta);
      });
}

}  // namespace picnn
