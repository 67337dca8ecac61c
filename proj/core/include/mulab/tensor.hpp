#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mulab {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);

// Dense single-precision tensor participating in a reverse-mode graph.
// Values are row-major. The gradient buffer is allocated lazily the first
// time backward touches it; `precise` carries the double-accumulated value
// of scalar reduction outputs (loss, sum) for oracle-grade consumers.
struct Tensor {
  Shape shape;
  std::vector<float> v;
  bool requires_grad = false;
  std::vector<float> g;
  double precise = 0.0;
  bool has_precise = false;

  Tensor() = default;
  Tensor(Shape s, bool rg = false);
  Tensor(Shape s, std::vector<float> vals, bool rg = false);

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int64_t rank() const { return static_cast<int64_t>(shape.size()); }
  int64_t dim(int64_t i) const { return shape[static_cast<size_t>(i)]; }
  // Row/column view of the trailing matrix: all leading extents fold into rows.
  int64_t cols() const { return shape.empty() ? 1 : shape.back(); }
  int64_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  float& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols() + c)]; }
  float at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols() + c)]; }

  // Gradient buffer, zero-initialized on first use.
  std::vector<float>& grad();
  void zero_grad();
  bool has_grad() const { return !g.empty(); }
};

using TensorPtr = std::shared_ptr<Tensor>;

TensorPtr make_tensor(Shape shape, bool requires_grad = false);
TensorPtr make_tensor(Shape shape, std::vector<float> vals, bool requires_grad = false);

enum class ActKind { kRelu, kSquaredRelu, kSilu };

// Precomputed rotary-embedding angles for a (context, head_dim, base) triple.
// Pair p of a row at position t is rotated by t * base^(-2p/head_dim).
struct RopeTable {
  int64_t context = 0;
  int64_t head_dim = 0;
  double base = 0.0;
  std::vector<double> cos_v;  // [context * head_dim/2]
  std::vector<double> sin_v;

  static RopeTable make(int64_t context, int64_t head_dim, double base);
};

// Reverse-mode tape. Operations execute eagerly and append a backward rule;
// construction order is the topological order, and backward() replays the
// tape exactly once in reverse. All elementwise arithmetic is performed in
// double and rounded once to storage; reductions accumulate in double in a
// fixed index order, so evaluation is bitwise reproducible.
class Graph {
 public:
  TensorPtr constant(Shape shape, std::vector<float> vals);

  // out[.., m, n] = a[.., m, k] * b[k, n]
  TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
  // out[m, n] = a[m, k] * b[n, k]^T
  TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b);
  TensorPtr add(const TensorPtr& a, const TensorPtr& b);
  TensorPtr add_rowvec(const TensorPtr& x, const TensorPtr& bias);
  TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
  TensorPtr scale(const TensorPtr& a, double c);
  TensorPtr slice_cols(const TensorPtr& x, int64_t col0, int64_t width);
  TensorPtr concat_cols(std::span<const TensorPtr> parts);
  TensorPtr row_softmax(const TensorPtr& s);
  TensorPtr add_causal_mask(const TensorPtr& s);
  TensorPtr rms_normalize(const TensorPtr& x, const TensorPtr& gain = nullptr);
  TensorPtr activation(ActKind kind, const TensorPtr& x);
  TensorPtr rope(const TensorPtr& x, const RopeTable* table);
  TensorPtr embedding_rows(const TensorPtr& table, std::span<const uint16_t> ids);
  // Mean over valid rows of -log softmax(logits)[target]. `valid` may be
  // empty (all rows valid). Scalar output; `precise` holds the double value.
  TensorPtr cross_entropy(const TensorPtr& logits, std::span<const uint16_t> targets,
                          std::span<const uint8_t> valid = {});
  TensorPtr sum(const TensorPtr& x);
  // Elementwise y = f(x) with user-supplied derivative; test/oracle hook.
  TensorPtr custom_unary(const TensorPtr& x, double (*f)(double), double (*df)(double));

  void backward(const TensorPtr& loss);
  void reset();

  bool backward_done() const { return backward_done_; }
  size_t op_count() const { return ops_.size(); }

  static constexpr double kRmsEps = 1e-6;

 private:
  struct Op {
    std::function<void()> backward;
  };
  TensorPtr record(TensorPtr out, std::function<void()> bwd, bool any_grad);

  std::vector<Op> ops_;
  bool backward_done_ = false;
};

struct GradCheckOptions {
  // Coordinates sampled per tensor: half largest-|grad|, half strided.
  int64_t max_coords_per_tensor = 16;
  // Coordinates where |analytic| + |central difference| falls below this are
  // reported but excluded from the max: below it a first-order difference of
  // a single-precision forward pass carries no signal.
  double resolvable_floor = 0.0;
  uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_coord;
  int64_t coords_checked = 0;
  int64_t coords_skipped = 0;
};

// Compares reverse-mode gradients of `build` (a deterministic graph builder
// over `params`) against central finite differences of step `h`, evaluated on
// the double-accumulated loss. Relative error uses
// |analytic - cd| / (|analytic| + |cd| + 1e-12).
GradCheckResult grad_check(const std::function<TensorPtr(Graph&)>& build,
                           std::span<const TensorPtr> params, double h,
                           const GradCheckOptions& opts = {});

namespace blas {
// C[m,n] (+)= A[m,k] * B[k,n]; f32 storage, f64 accumulation, per-output
// strictly sequential in k.
void gemm_nn(const float* a, const float* b, float* c, int64_t m, int64_t k,
             int64_t n, bool accumulate);
// C[m,n] (+)= A[m,k] * B[n,k]^T
void gemm_nt(const float* a, const float* b, float* c, int64_t m, int64_t k,
             int64_t n, bool accumulate);
// C[k,n] (+)= A[m,k]^T * B[m,n]
void gemm_tn(const float* a, const float* b, float* c, int64_t m, int64_t k,
             int64_t n, bool accumulate);
double dot(const float* a, const float* b, int64_t n);
}  // namespace blas

}  // namespace mulab
