#include "picnn/stencil.hpp"

#include <algorithm>

#include "picnn/error.hpp"
#include "picnn/ops.hpp"

namespace picnn {

namespace {

std::vector<double> outer(const std::vector<double>& col, const std::vector<double>& row) {
  std::vector<double> out;
  out.reserve(col.size() * row.size());
  for (double c : col)
    for (double r : row) out.push_back(c * r);
  return out;
}

// Full 2-D convolution of two kernels: correlating with the result equals
// correlating with `a` and then with `b`.
StencilKernel compose(const StencilKernel& a, const StencilKernel& b) {
  StencilKernel out = a;
  out.rows = a.rows + b.rows - 1;
  out.cols = a.cols + b.cols - 1;
  out.coefficients.assign(out.rows * out.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j)
      for (std::size_t k = 0; k < b.rows; ++k)
        for (std::size_t l = 0; l < b.cols; ++l)
          out.coefficients[(i + k) * out.cols + (j + l)] +=
              a.coefficients[i * a.cols + j] * b.coefficients[k * b.cols + l];
  return out;
}

StencilKernel transpose(StencilKernel k) {
  std::vector<double> t(k.coefficients.size());
  for (std::size_t i = 0; i < k.rows; ++i)
    for (std::size_t j = 0; j < k.cols; ++j) t[j * k.rows + i] = k.coefficients[i * k.cols + j];
  std::swap(k.rows, k.cols);
  k.coefficients = std::move(t);
  return k;
}

StencilKernel first_dx(KernelFamily family, double h) {
  StencilKernel k;
  k.family = family;
  k.derivative = Derivative::dx;
  k.h = h;
  switch (family) {
    case KernelFamily::sobel3:
      k.rows = k.cols = 3;
      k.coefficients = outer({1, 2, 1}, {-1, 0, 1});
      for (double& c : k.coefficients) c /= 8.0 * h;
      break;
    case KernelFamily::sobel5:
      k.rows = k.cols = 5;
      k.coefficients = outer({1, 4, 6, 4, 1}, {-1, -2, 0, 2, 1});
      for (double& c : k.coefficients) c /= 128.0 * h;
      break;
    case KernelFamily::central2:
      k.rows = 1;
      k.cols = 3;
      k.coefficients = {-0.5 / h, 0.0, 0.5 / h};
      break;
    case KernelFamily::central4:
      k.rows = 1;
      k.cols = 5;
      k.coefficients = {1.0 / (12 * h), -8.0 / (12 * h), 0.0, 8.0 / (12 * h), -1.0 / (12 * h)};
      break;
  }
  return k;
}

StencilKernel second_dxx(KernelFamily family, double h, bool composed) {
  if (composed || family == KernelFamily::sobel3 || family == KernelFamily::sobel5) {
    StencilKernel d = first_dx(family, h);
    StencilKernel k = compose(d, d);
    k.derivative = Derivative::dxx;
    return k;
  }
  StencilKernel k;
  k.family = family;
  k.derivative = Derivative::dxx;
  k.h = h;
  k.rows = 1;
  const double h2 = h * h;
  if (family == KernelFamily::central2) {
    k.cols = 3;
    k.coefficients = {1.0 / h2, -2.0 / h2, 1.0 / h2};
  } else {
    k.cols = 5;
    k.coefficients = {-1.0 / (12 * h2), 4.0 / (3 * h2), -5.0 / (2 * h2), 4.0 / (3 * h2),
                      -1.0 / (12 * h2)};
  }
  return k;
}

}  // namespace

std::string_view to_string(KernelFamily family) {
  switch (family) {
    case KernelFamily::sobel3: return "sobel3";
    case KernelFamily::sobel5: return "sobel5";
    case KernelFamily::central2: return "central2";
    case KernelFamily::central4: return "central4";
  }
  return "?";
}

KernelFamily kernel_family_from_string(std::string_view name) {
  for (auto f : {KernelFamily::sobel3, KernelFamily::sobel5, KernelFamily::central2,
                 KernelFamily::central4}) {
    if (to_string(f) == name) return f;
  }
  throw std::invalid_argument("unknown kernel family '" + std::string(name) + "'");
}

Tensor StencilKernel::weight() const { return Tensor::from({1, 1, rows, cols}, coefficients); }

StencilKernel StencilKernel::embedded(std::size_t r) const {
  if (r < radius_y() || r < radius_x()) throw ShapeError("stencil: embedding radius too small");
  StencilKernel out = *this;
  out.rows = out.cols = 2 * r + 1;
  out.coefficients.assign(out.rows * out.cols, 0.0);
  const std::size_t oy = r - radius_y(), ox = r - radius_x();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      out.coefficients[(i + oy) * out.cols + j + ox] = coefficients[i * cols + j];
  return out;
}

StencilKernel make_stencil(KernelFamily family, Derivative derivative, double h, bool composed) {
  if (!(h > 0.0)) throw std::invalid_argument("stencil: grid spacing must be positive");
  switch (derivative) {
    case Derivative::dx: return first_dx(family, h);
    case Derivative::dy: {
      StencilKernel k = transpose(first_dx(family, h));
      k.derivative = Derivative::dy;
      return k;
    }
    case Derivative::dxx: return second_dxx(family, h, composed);
    case Derivative::dyy: {
      StencilKernel k = transpose(second_dxx(family, h, composed));
      k.derivative = Derivative::dyy;
      return k;
    }
  }
  throw std::logic_error("unreachable");
}

Tensor apply_stencil(const Tensor& field, const StencilKernel& kernel) {
  if (field.ndim() != 4 || field.dim(1) != 1) {
    throw ShapeError("apply_stencil: field must be [N,1,H,W], got " + shape_str(field.shape()));
  }
  const std::size_t h = field.dim(2), w = field.dim(3);
  if (h < kernel.rows || w < kernel.cols) {
    throw ShapeError("apply_stencil: field " + std::to_string(h) + "x" + std::to_string(w) +
                     " smaller than kernel " + std::to_string(kernel.rows) + "x" +
                     std::to_string(kernel.cols));
  }
  Tensor valid = conv2d(field, kernel.weight(), std::nullopt);
  const std::size_t vh = valid.dim(2), vw = valid.dim(3), n = field.dim(0);
  const std::size_t ry = kernel.radius_y(), rx = kernel.radius_x();
  std::vector<AffineGather> plan(n * h * w);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        if (i < ry || i >= ry + vh || j < rx || j >= rx + vw) continue;
        plan[(s * h + i) * w + j] = {static_cast<std::int64_t>((s * vh + i - ry) * vw + j - rx), 1.0, 0.0};
      }
  return gather_affine(valid, field.shape(), std::move(plan));
}

Tensor stencil_valid_mask(std::size_t h, std::size_t w, const StencilKernel& kernel) {
  Tensor mask = Tensor::zeros({1, 1, h, w});
  const std::size_t ry = kernel.radius_y(), rx = kernel.radius_x();
  auto d = mask.mutable_data();
  for (std::size_t i = ry; i + ry < h; ++i)
    for (std::size_t j = rx; j + rx < w; ++j) d[i * w + j] = 1.0;
  return mask;
}

Tensor apply_stencil_padded(const Tensor& padded, const StencilKernel& kernel, std::size_t halo) {
  if (padded.ndim() != 4 || padded.dim(1) != 1 || padded.dim(2) < 2 * halo + 1 ||
      padded.dim(3) < 2 * halo + 1) {
    throw ShapeError("apply_stencil_padded: field " + shape_str(padded.shape()) +
                     " incompatible with halo " + std::to_string(halo));
  }
  return conv2d(padded, kernel.embedded(halo).weight(), std::nullopt);
}

}  // namespace picnn
