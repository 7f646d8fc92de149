#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tsrq {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// 1/(1+exp(-x)) computed without overflow; saturates to exactly 0 and 1 at
// the infinities. Shared by the autodiff op and the dequantization path.
float stable_sigmoid(float x);

// Dense row-major float32 storage. `grad` is allocated (zero-filled) as soon
// as requires_grad is set, so untouched leaves read back zero gradients.
// Scalar outputs of reduction ops additionally keep the double-precision
// accumulator in `scalar_hi`; finite-difference tests read it to keep the
// difference quotient out of float32 rounding noise.
struct TensorImpl {
  Shape shape;
  std::vector<float> values;
  bool requires_grad = false;
  std::vector<float> grad;
  std::optional<double> scalar_hi;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value);
  static Tensor from(Shape shape, std::vector<float> values,
                     bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  int64_t rows() const;  // 2-d tensors
  int64_t cols() const;

  float* data();
  const float* data() const;
  std::span<float> span();
  std::span<const float> cspan() const;

  float at(int64_t i) const;
  float item() const;      // single-element tensors
  double item_hi() const;  // double accumulator when available, else item()

  bool requires_grad() const;
  void set_requires_grad(bool rg);
  float* grad();
  const float* grad() const;
  void zero_grad();

  Tensor clone() const;  // deep copy, detached from any gradient history

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

// Reverse-mode autodiff tape. Forward ops compute eagerly and, when recording
// and some input requires a gradient, push a backward closure. backward()
// replays the closures in exact reverse order, then clears the tape; calling
// it again without recording a new forward throws StateError. Construct with
// recording=false for inference-only forwards (nothing is retained).
//
// No broadcasting beyond what the listed signatures state, no implicit type
// promotion, no second-order gradients.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  size_t op_count() const { return ops_.size(); }
  void reset();  // drop recorded ops without running backward

  // [m,k] x [k,n] -> [m,n]
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& x);
  Tensor reshape(const Tensor& x, Shape shape);

  // elementwise, exact shape match
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor add_scalar(const Tensor& x, float c);
  Tensor mul_scalar(const Tensor& x, float c);

  // sigmoid saturates exactly: sigmoid(+inf)=1, sigmoid(-inf)=0, and the
  // backward factor y*(1-y) is then exactly zero.
  Tensor sigmoid(const Tensor& x);
  Tensor silu(const Tensor& x);
  // quarter-turn per adjacent pair: y[2i] = -x[2i+1], y[2i+1] = x[2i];
  // building block for rotary position mixing. cols must be even.
  Tensor rotate_pairs(const Tensor& x);
  // clamp treats boundary points as interior: subgradient 1 at lo and hi
  Tensor clamp(const Tensor& x, float lo, float hi);

  // row-wise ops on 2-d tensors
  Tensor softmax_rows(const Tensor& x);  // max-subtracted
  // x / sqrt(mean_row(x^2) + 1e-6) * weight, weight is 1-d of size cols
  Tensor rmsnorm(const Tensor& x, const Tensor& weight);

  // reductions to a single-element tensor
  Tensor mean(const Tensor& x);
  Tensor sum(const Tensor& x);
  Tensor sum_sq(const Tensor& x);

  Tensor slice_rows(const Tensor& x, int64_t r0, int64_t r1);
  Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1);
  Tensor concat_cols(std::span<const Tensor> parts);
  // [m,g] -> [m,g*times]; column j fills columns [j*times, (j+1)*times)
  Tensor repeat_cols(const Tensor& x, int64_t times);

  // table [v,d], ids in [0,v) -> [ids.size,d]; backward scatter-adds
  Tensor gather_rows(const Tensor& table, std::span<const int32_t> ids);

  // mean over rows of -log softmax(logits)[target]; scalar output
  Tensor cross_entropy_rows(const Tensor& logits,
                            std::span<const int32_t> targets);

  // per-row dynamic quantize-dequantize with straight-through gradient
  Tensor fake_quant_rows(const Tensor& x, int bits);

  // loss must be a single-element tensor produced by this tape's recording
  void backward(const Tensor& loss);

 private:
  friend struct TapeOps;
  bool should_record(std::initializer_list<const Tensor*> inputs) const;
  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

  std::vector<std::function<void()>> ops_;
  bool recording_;
};

// Raw matmul kernels shared by forward and backward paths. Each output
// element is a dot product accumulated in ascending k order regardless of
// thread count, which keeps results bit-deterministic.
namespace kernels {
// C [m,n] (+)= A [m,k] . B [k,n]
void mm_nn(const float* a, const float* b, float* c, int64_t m, int64_t k,
           int64_t n, bool accumulate);
// C [m,n] (+)= A [m,k] . B^T where B is [n,k]
void mm_nt(const float* a, const float* b, float* c, int64_t m, int64_t k,
           int64_t n, bool accumulate);
// C [m,n] (+)= A^T . B where A is [k,m], B is [k,n]
void mm_tn(const float* a, const float* b, float* c, int64_t m, int64_t k,
           int64_t n, bool accumulate);
}  // namespace kernels

}  // namespace tsrq
