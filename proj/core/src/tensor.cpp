#include "tsrq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "tsrq/errors.hpp"
#include "tsrq/quant.hpp"
#include "tsrq/threads.hpp"

namespace tsrq {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw DimensionError("shape dimensions must be positive");
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

std::shared_ptr<TensorImpl> make_impl(Shape shape) {
  auto impl = std::make_shared<TensorImpl>();
  int64_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->values.assign(static_cast<size_t>(n), 0.0f);
  return impl;
}

void ensure_grad(TensorImpl& impl) {
  if (impl.grad.size() != impl.values.size()) {
    impl.grad.assign(impl.values.size(), 0.0f);
  }
}

}  // namespace

float stable_sigmoid(float x) {
  // split by sign so large magnitudes saturate to exact 0/1 instead of
  // overflowing exp
  if (x >= 0.0f) {
    return 1.0f / (1.0f + std::exp(-x));
  }
  float e = std::exp(x);
  return e / (1.0f + e);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t(make_impl(std::move(shape)));
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

Tensor Tensor::full(Shape shape, float value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.span().begin(), t.span().end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size())) {
    throw DimensionError("Tensor::from: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  Tensor t(std::move(impl));
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

Tensor Tensor::scalar(float value) { return from({1}, {value}); }

const Shape& Tensor::shape() const { return impl_->shape; }

int64_t Tensor::numel() const {
  return static_cast<int64_t>(impl_->values.size());
}

int64_t Tensor::rows() const {
  if (impl_->shape.size() != 2) {
    throw DimensionError("rows(): tensor is not 2-d: " + shape_str(impl_->shape));
  }
  return impl_->shape[0];
}

int64_t Tensor::cols() const {
  if (impl_->shape.size() != 2) {
    throw DimensionError("cols(): tensor is not 2-d: " + shape_str(impl_->shape));
  }
  return impl_->shape[1];
}

float* Tensor::data() { return impl_->values.data(); }
const float* Tensor::data() const { return impl_->values.data(); }
std::span<float> Tensor::span() { return impl_->values; }
std::span<const float> Tensor::cspan() const { return impl_->values; }

float Tensor::at(int64_t i) const {
  if (i < 0 || i >= numel()) throw DimensionError("Tensor::at out of range");
  return impl_->values[static_cast<size_t>(i)];
}

float Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item(): tensor has " + std::to_string(numel()) +
                         " elements");
  }
  return impl_->values[0];
}

double Tensor::item_hi() const {
  if (impl_->scalar_hi) return *impl_->scalar_hi;
  return static_cast<double>(item());
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
  impl_->requires_grad = rg;
  if (rg) ensure_grad(*impl_);
}

float* Tensor::grad() {
  ensure_grad(*impl_);
  return impl_->grad.data();
}

const float* Tensor::grad() const {
  ensure_grad(*impl_);
  return impl_->grad.data();
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
  }
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->values = impl_->values;
  return Tensor(std::move(impl));
}

namespace kernels {

void mm_nn(const float* a, const float* b, float* c, int64_t m, int64_t k,
           int64_t n, bool accumulate) {
  const int nthreads = max_threads();
#ifdef TSRQ_OPENMP
#pragma omp parallel for num_threads(nthreads) schedule(static) \
    if (nthreads > 1 && m > 1 && m * k * n > 262144)
#endif
  for (int64_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0f);
    const float* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void mm_nt(const float* a, const float* b, float* c, int64_t m, int64_t k,
           int64_t n, bool accumulate) {
  // materialize B^T so the inner loop stays contiguous and vectorizable
  std::vector<float> bt(static_cast<size_t>(k) * n);
  for (int64_t j = 0; j < n; ++j) {
    for (int64_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  mm_nn(a, bt.data(), c, m, k, n, accumulate);
}

void mm_tn(const float* a, const float* b, float* c, int64_t m, int64_t k,
           int64_t n, bool accumulate) {
  const int nthreads = max_threads();
#ifdef TSRQ_OPENMP
#pragma omp parallel for num_threads(nthreads) schedule(static) \
    if (nthreads > 1 && m > 1 && m * k * n > 262144)
#endif
  for (int64_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0f);
    for (int64_t p = 0; p < k; ++p) {
      const float av = a[p * m + i];
      const float* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernels

void Tape::reset() { ops_.clear(); }

bool Tape::should_record(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  const int64_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  kernels::mm_nn(a.data(), b.data(), out.data(), m, k, n, false);
  if (should_record({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record([ai, bi, oi, m, k, n] {
      const float* g = oi->grad.data();
      if (ai->requires_grad) {
        ensure_grad(*ai);
        kernels::mm_nt(g, bi->values.data(), ai->grad.data(), m, n, k, true);
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        kernels::mm_tn(ai->values.data(), g, bi->grad.data(), k, m, n, true);
      }
    });
  }
  return out;
}

Tensor Tape::transpose(const Tensor& x) {
  const int64_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::zeros({n, m});
  const float* xv = x.data();
  float* ov = out.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) ov[j * m + i] = xv[i * n + j];
  }
  if (should_record({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, m, n] {
      ensure_grad(*xi);
      const float* g = oi->grad.data();
      float* xg = xi->grad.data();
      for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) xg[i * n + j] += g[j * m + i];
      }
    });
  }
  return out;
}

Tensor Tape::reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " +
                         shape_str(shape) + " changes element count");
  }
  Tensor out = Tensor::from(std::move(shape), std::vector<float>(
                                x.cspan().begin(), x.cspan().end()));
  if (should_record({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi] {
      ensure_grad(*xi);
      for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
    });
  }
  return out;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const float* av = a.data();
  const float* bv = b.data();
  float* ov = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
  if (n == 1 && a.impl()->scalar_hi && b.impl()->scalar_hi) {
    out.impl()->scalar_hi = *a.impl()->scalar_hi + *b.impl()->scalar_hi;
  }
  if (should_record({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record([ai, bi, oi, n] {
      const float* g = oi->grad.data();
      if (ai->requires_grad) {
        ensure_grad(*ai);
        for (int64_t i = 0; i < n; ++i) ai->grad[i] += g[i];
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        for (int64_t i = 0; i < n; ++i) bi->grad[i] += g[i];
      }
    });
  }
  return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const float* av = a.data();
  const float* bv = b.data();
  float* ov = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i];
  if (should_record({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record([ai, bi, oi, n] {
      const float* g = oi->grad.data();
      if (ai->requires_grad) {
        ensure_grad(*ai);
        for (int64_t i = 0; i < n; ++i) ai->grad[i] += g[i];
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        for (int64_t i = 0; i < n; ++i) bi->grad[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const float* av = a.data();
  const float* bv = b.data();
  float* ov = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
  if (should_record({&a, &b})) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record([ai, bi, oi, n] {
      const float* g = oi->grad.data();
      if (ai->requires_grad) {
        ensure_grad(*ai);
        for (int64_t i = 0; i < n; ++i) ai->grad[i] += g[i] * bi->values[i];
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        for (int64_t i = 0; i < n; ++i) bi->grad[i] += g[i] * ai->values[i];
      }
    });
  }
  return out;
}

Tensor Tape::add_scalar(const Tensor& x, float c) {
  Tensor out = Tensor::zeros(x.shape());
  const float* xv = x.data();
  float* ov = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] + c;
  if (should_record({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, n] {
      ensure_grad(*xi);
      for (int64_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor Tape::mul_scalar(const Tensor& x, float c) {
  Tensor out = Tensor::zeros(x.shape());
  const float* xv = x.data();
  float* ov = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] * c;
  if (x.numel() == 1 && x.impl()->scalar_hi) {
    out.impl()->scalar_hi = *x.impl()->scalar_hi * static_cast<double>(c);
  }
  if (should_record({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, n, c] {
      ensure_grad(*xi);
      for (int64_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i] * c;
    });
  }
  return out;
}

Tensor Tape::sigmoid(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const float* xv = x.data();
  float* ov = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = stable_sigmoid(xv[i]);
  if (should_record({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, n] {
      ensure_grad(*xi);
      for (int64_t i = 0; i < n; ++i) {
        const float y = oi->values[i];
        xi->grad[i] += oi->grad[i] * y * (1.0f - y);
      }
    });
  }
  return out;
}

Tensor Tape::silu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const float* xv = x.data();
  float* ov = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = xv[i] * stable_sigmoid(xv[i]);
  if (should_record({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, n] {
      ensure_grad(*xi);
      for (int64_t i = 0; i < n; ++i) {
        const float xvv = xi->values[i];
        const float s = stable_sigmoid(xvv);
        xi->grad[i] += oi->grad[i] * s * (1.0f + xvv * (1.0f - s));
      }
    });
  }
  return out;
}

Tensor Tape::rotate_pairs(const Tensor& x) {
  const int64_t n = x.numel();
  if (n % 2 != 0) {
    throw DimensionError("rotate_pairs: element count must be even");
  }
  Tensor out = Tensor::zeros(x.shape());
  const float* xv = x.data();
  float* ov = out.data();
  for (int64_t i = 0; i < n; i += 2) {
    ov[i] = -xv[i + 1];
    ov[i + 1] = xv[i];
  }
  if (should_record({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, n] {
      ensure_grad(*xi);
      for (int64_t i = 0; i < n; i += 2) {
        xi->grad[i] += oi->grad[i + 1];
        xi->grad[i + 1] -= oi->grad[i];
      }
    });
  }
  return out;
}

Tensor Tape::clamp(const Tensor& x, float lo, float hi) {
  if (lo > hi) throw ArgumentError("clamp: lo > hi");
  Tensor out = Tensor::zeros(x.shape());
  const float* xv = x.data();
  float* ov = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) ov[i] = std::min(std::max(xv[i], lo), hi);
  if (should_record({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, n, lo, hi] {
      ensure_grad(*xi);
      for (int64_t i = 0; i < n; ++i) {
        const float xvv = xi->values[i];
        if (xvv >= lo && xvv <= hi) xi->grad[i] += oi->grad[i];
      }
    });
  }
  return out;
}

Tensor Tape::softmax_rows(const Tensor& x) {
  const int64_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::zeros(x.shape());
  const float* xv = x.data();
  float* ov = out.data();
  for (int64_t i = 0; i < m; ++i) {
    const float* row = xv + i * n;
    float mx = row[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      denom += std::exp(static_cast<double>(row[j]) - mx);
    }
    for (int64_t j = 0; j < n; ++j) {
      ov[i * n + j] = static_cast<float>(
          std::exp(static_cast<double>(row[j]) - mx) / denom);
    }
  }
  if (should_record({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, m, n] {
      ensure_grad(*xi);
      const float* y = oi->values.data();
      const float* g = oi->grad.data();
      float* xg = xi->grad.data();
      for (int64_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j) {
          dot += static_cast<double>(g[i * n + j]) * y[i * n + j];
        }
        const float dotf = static_cast<float>(dot);
        for (int64_t j = 0; j < n; ++j) {
          xg[i * n + j] += y[i * n + j] * (g[i * n + j] - dotf);
        }
      }
    });
  }
  return out;
}

Tensor Tape::rmsnorm(const Tensor& x, const Tensor& weight) {
  const int64_t m = x.rows(), n = x.cols();
  if (weight.shape().size() != 1 || weight.numel() != n) {
    throw DimensionError("rmsnorm: weight must be 1-d of size " +
                         std::to_string(n) + ", got " +
                         shape_str(weight.shape()));
  }
  constexpr float kEps = 1e-6f;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<float> inv(static_cast<size_t>(m));
  const float* xv = x.data();
  const float* wv = weight.data();
  float* ov = out.data();
  for (int64_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      const double v = xv[i * n + j];
      ss += v * v;
    }
    const float r = static_cast<float>(
        1.0 / std::sqrt(ss / static_cast<double>(n) + kEps));
    inv[static_cast<size_t>(i)] = r;
    for (int64_t j = 0; j < n; ++j) ov[i * n + j] = xv[i * n + j] * r * wv[j];
  }
  if (should_record({&x, &weight})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), wi = weight.impl(), oi = out.impl();
    record([xi, wi, oi, inv = std::move(inv), m, n] {
      const float* g = oi->grad.data();
      const float* xv2 = xi->values.data();
      const float* wv2 = wi->values.data();
      if (xi->requires_grad) {
        ensure_grad(*xi);
        float* xg = xi->grad.data();
        for (int64_t i = 0; i < m; ++i) {
          const float r = inv[static_cast<size_t>(i)];
          double dot = 0.0;
          for (int64_t j = 0; j < n; ++j) {
            dot += static_cast<double>(g[i * n + j]) * wv2[j] * xv2[i * n + j];
          }
          const float coef =
              r * r * r * static_cast<float>(dot) / static_cast<float>(n);
          for (int64_t j = 0; j < n; ++j) {
            xg[i * n + j] += r * wv2[j] * g[i * n + j] - coef * xv2[i * n + j];
          }
        }
      }
      if (wi->requires_grad) {
        ensure_grad(*wi);
        float* wg = wi->grad.data();
        for (int64_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (int64_t i = 0; i < m; ++i) {
            acc += static_cast<double>(g[i * n + j]) * xv2[i * n + j] *
                   inv[static_cast<size_t>(i)];
          }
          wg[j] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

Tensor Tape::mean(const Tensor& x) {
  const int64_t n = x.numel();
  double acc = 0.0;
  const float* xv = x.data();
  for (int64_t i = 0; i < n; ++i) acc += xv[i];
  acc /= static_cast<double>(n);
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  out.impl()->scalar_hi = acc;
  if (should_record({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, n] {
      ensure_grad(*xi);
      const float g = oi->grad[0] / static_cast<float>(n);
      for (int64_t i = 0; i < n; ++i) xi->grad[i] += g;
    });
  }
  return out;
}

Tensor Tape::sum(const Tensor& x) {
  const int64_t n = x.numel();
  double acc = 0.0;
  const float* xv = x.data();
  for (int64_t i = 0; i < n; ++i) acc += xv[i];
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  out.impl()->scalar_hi = acc;
  if (should_record({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, n] {
      ensure_grad(*xi);
      const float g = oi->grad[0];
      for (int64_t i = 0; i < n; ++i) xi->grad[i] += g;
    });
  }
  return out;
}

Tensor Tape::sum_sq(const Tensor& x) {
  const int64_t n = x.numel();
  double acc = 0.0;
  const float* xv = x.data();
  for (int64_t i = 0; i < n; ++i) {
    acc += static_cast<double>(xv[i]) * xv[i];
  }
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  out.impl()->scalar_hi = acc;
  if (should_record({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, n] {
      ensure_grad(*xi);
      const float g = oi->grad[0];
      for (int64_t i = 0; i < n; ++i) {
        xi->grad[i] += 2.0f * xi->values[i] * g;
      }
    });
  }
  return out;
}

Tensor Tape::slice_rows(const Tensor& x, int64_t r0, int64_t r1) {
  const int64_t m = x.rows(), n = x.cols();
  if (r0 < 0 || r1 > m || r0 >= r1) {
    throw DimensionError("slice_rows: range [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") of " + shape_str(x.shape()));
  }
  Tensor out = Tensor::zeros({r1 - r0, n});
  std::memcpy(out.data(), x.data() + r0 * n,
              static_cast<size_t>((r1 - r0) * n) * sizeof(float));
  if (should_record({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, r0, n] {
      ensure_grad(*xi);
      const int64_t cnt = static_cast<int64_t>(oi->grad.size());
      for (int64_t i = 0; i < cnt; ++i) xi->grad[r0 * n + i] += oi->grad[i];
    });
  }
  return out;
}

Tensor Tape::slice_cols(const Tensor& x, int64_t c0, int64_t c1) {
  const int64_t m = x.rows(), n = x.cols();
  if (c0 < 0 || c1 > n || c0 >= c1) {
    throw DimensionError("slice_cols: range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") of " + shape_str(x.shape()));
  }
  const int64_t w = c1 - c0;
  Tensor out = Tensor::zeros({m, w});
  const float* xv = x.data();
  float* ov = out.data();
  for (int64_t i = 0; i < m; ++i) {
    std::memcpy(ov + i * w, xv + i * n + c0,
                static_cast<size_t>(w) * sizeof(float));
  }
  if (should_record({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, m, n, c0, w] {
      ensure_grad(*xi);
      for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < w; ++j) {
          xi->grad[i * n + c0 + j] += oi->grad[i * w + j];
        }
      }
    });
  }
  return out;
}

Tensor Tape::concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ArgumentError("concat_cols: no inputs");
  const int64_t m = parts[0].rows();
  int64_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != m) {
      throw DimensionError("concat_cols: row mismatch " +
                           shape_str(p.shape()));
    }
    total += p.cols();
  }
  Tensor out = Tensor::zeros({m, total});
  float* ov = out.data();
  int64_t off = 0;
  for (const Tensor& p : parts) {
    const int64_t w = p.cols();
    const float* pv = p.data();
    for (int64_t i = 0; i < m; ++i) {
      std::memcpy(ov + i * total + off, pv + i * w,
                  static_cast<size_t>(w) * sizeof(float));
    }
    off += w;
  }
  bool rec = false;
  for (const Tensor& p : parts) rec = rec || p.requires_grad();
  if (recording_ && rec) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(parts.size());
    for (const Tensor& p : parts) impls.push_back(p.impl());
    auto oi = out.impl();
    record([impls = std::move(impls), oi, m, total] {
      int64_t off2 = 0;
      for (const auto& pi : impls) {
        const int64_t w = pi->shape[1];
        if (pi->requires_grad) {
          ensure_grad(*pi);
          for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < w; ++j) {
              pi->grad[i * w + j] += oi->grad[i * total + off2 + j];
            }
          }
        }
        off2 += w;
      }
    });
  }
  return out;
}

Tensor Tape::repeat_cols(const Tensor& x, int64_t times) {
  if (times <= 0) throw ArgumentError("repeat_cols: times must be positive");
  const int64_t m = x.rows(), g = x.cols();
  Tensor out = Tensor::zeros({m, g * times});
  const float* xv = x.data();
  float* ov = out.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < g; ++j) {
      const float v = xv[i * g + j];
      float* dst = ov + i * g * times + j * times;
      for (int64_t u = 0; u < times; ++u) dst[u] = v;
    }
  }
  if (should_record({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, m, g, times] {
      ensure_grad(*xi);
      for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < g; ++j) {
          double acc = 0.0;
          const float* src = oi->grad.data() + i * g * times + j * times;
          for (int64_t u = 0; u < times; ++u) acc += src[u];
          xi->grad[i * g + j] += static_cast<float>(acc);
        }
      }
    });
  }
  return out;
}

Tensor Tape::gather_rows(const Tensor& table, std::span<const int32_t> ids) {
  const int64_t v = table.rows(), d = table.cols();
  if (ids.empty()) throw ArgumentError("gather_rows: empty id list");
  for (int32_t id : ids) {
    if (id < 0 || id >= v) {
      throw ArgumentError("gather_rows: id " + std::to_string(id) +
                          " out of range [0," + std::to_string(v) + ")");
    }
  }
  const int64_t n = static_cast<int64_t>(ids.size());
  Tensor out = Tensor::zeros({n, d});
  const float* tv = table.data();
  float* ov = out.data();
  for (int64_t r = 0; r < n; ++r) {
    std::memcpy(ov + r * d, tv + static_cast<int64_t>(ids[r]) * d,
                static_cast<size_t>(d) * sizeof(float));
  }
  if (should_record({&table})) {
    out.set_requires_grad(true);
    auto ti = table.impl(), oi = out.impl();
    std::vector<int32_t> idv(ids.begin(), ids.end());
    record([ti, oi, idv = std::move(idv), n, d] {
      ensure_grad(*ti);
      float* tg = ti->grad.data();
      const float* g = oi->grad.data();
      // column-partitioned scatter: each column walks rows in order, so
      // repeated ids accumulate deterministically
      for (int64_t c = 0; c < d; ++c) {
        for (int64_t r = 0; r < n; ++r) {
          tg[static_cast<int64_t>(idv[static_cast<size_t>(r)]) * d + c] +=
              g[r * d + c];
        }
      }
    });
  }
  return out;
}

Tensor Tape::cross_entropy_rows(const Tensor& logits,
                                std::span<const int32_t> targets) {
  const int64_t m = logits.rows(), n = logits.cols();
  if (static_cast<int64_t>(targets.size()) != m) {
    throw DimensionError("cross_entropy_rows: " +
                         std::to_string(targets.size()) + " targets for " +
                         std::to_string(m) + " rows");
  }
  for (int32_t t : targets) {
    if (t < 0 || t >= n) {
      throw ArgumentError("cross_entropy_rows: target out of range");
    }
  }
  const float* xv = logits.data();
  std::vector<double> logz(static_cast<size_t>(m));
  double total = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    const float* row = xv + i * n;
    float mx = row[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      denom += std::exp(static_cast<double>(row[j]) - mx);
    }
    logz[static_cast<size_t>(i)] = static_cast<double>(mx) + std::log(denom);
    total += logz[static_cast<size_t>(i)] -
             static_cast<double>(row[targets[static_cast<size_t>(i)]]);
  }
  total /= static_cast<double>(m);
  Tensor out = Tensor::scalar(static_cast<float>(total));
  out.impl()->scalar_hi = total;
  if (should_record({&logits})) {
    out.set_requires_grad(true);
    auto xi = logits.impl(), oi = out.impl();
    std::vector<int32_t> tgt(targets.begin(), targets.end());
    record([xi, oi, logz = std::move(logz), tgt = std::move(tgt), m, n] {
      ensure_grad(*xi);
      const float up = oi->grad[0] / static_cast<float>(m);
      float* xg = xi->grad.data();
      const float* xv2 = xi->values.data();
      for (int64_t i = 0; i < m; ++i) {
        const double lz = logz[static_cast<size_t>(i)];
        for (int64_t j = 0; j < n; ++j) {
          float p = static_cast<float>(
              std::exp(static_cast<double>(xv2[i * n + j]) - lz));
          if (j == tgt[static_cast<size_t>(i)]) p -= 1.0f;
          xg[i * n + j] += up * p;
        }
      }
    });
  }
  return out;
}

Tensor Tape::fake_quant_rows(const Tensor& x, int bits) {
  const int64_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::zeros(x.shape());
  fake_quant_rows_raw(x.data(), out.data(), m, n, bits);
  if (should_record({&x})) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi] {
      // straight-through estimator
      ensure_grad(*xi);
      for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
    });
  }
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ArgumentError("backward: loss must be a single-element tensor");
  }
  if (ops_.empty()) {
    throw StateError(
        "backward: tape is empty or already consumed; record a new forward "
        "pass first");
  }
  if (!loss.requires_grad()) {
    throw StateError("backward: loss does not depend on any tracked input");
  }
  loss.impl()->grad[0] = 1.0f;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

}  // namespace tsrq
