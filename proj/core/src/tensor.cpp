#include "mulab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mulab {

namespace {

int64_t checked_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) {
    if (e <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(s));
    n *= e;
  }
  return n;
}

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape s, bool rg) : shape(std::move(s)), requires_grad(rg) {
  v.assign(static_cast<size_t>(checked_numel(shape)), 0.0f);
}

Tensor::Tensor(Shape s, std::vector<float> vals, bool rg)
    : shape(std::move(s)), v(std::move(vals)), requires_grad(rg) {
  if (checked_numel(shape) != numel())
    throw std::invalid_argument("value count does not match shape " + shape_str(shape));
}

std::vector<float>& Tensor::grad() {
  if (g.empty()) g.assign(v.size(), 0.0f);
  return g;
}

void Tensor::zero_grad() { g.assign(v.size(), 0.0f); }

TensorPtr make_tensor(Shape shape, bool requires_grad) {
  return std::make_shared<Tensor>(std::move(shape), requires_grad);
}

TensorPtr make_tensor(Shape shape, std::vector<float> vals, bool requires_grad) {
  return std::make_shared<Tensor>(std::move(shape), std::move(vals), requires_grad);
}

// ---------------------------------------------------------------------------
// GEMM kernels. Inputs are packed to double once, then every output element
// accumulates strictly in k order; the row-blocked loop only reorders
// independent outputs, never the summation itself.
// ---------------------------------------------------------------------------
namespace blas {
namespace {

thread_local std::vector<double> tl_pack_a;
thread_local std::vector<double> tl_pack_b;
thread_local std::vector<double> tl_acc;

void pack(const float* src, std::vector<double>& dst, int64_t n) {
  dst.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) dst[static_cast<size_t>(i)] = src[i];
}

void pack_transpose(const float* src, std::vector<double>& dst, int64_t r, int64_t c) {
  dst.resize(static_cast<size_t>(r * c));
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) dst[static_cast<size_t>(j * r + i)] = src[i * c + j];
}

void gemm_core(const double* a, const double* b, float* c, int64_t m, int64_t k,
               int64_t n, bool accumulate) {
  constexpr int64_t kRowBlock = 4;
  tl_acc.resize(static_cast<size_t>(kRowBlock * n));
  double* acc = tl_acc.data();
  for (int64_t i0 = 0; i0 < m; i0 += kRowBlock) {
    const int64_t ib = std::min(kRowBlock, m - i0);
    std::fill(acc, acc + ib * n, 0.0);
    for (int64_t l = 0; l < k; ++l) {
      const double* brow = b + l * n;
      for (int64_t ii = 0; ii < ib; ++ii) {
        const double av = a[(i0 + ii) * k + l];
        double* out = acc + ii * n;
        for (int64_t j = 0; j < n; ++j) out[j] += av * brow[j];
      }
    }
    for (int64_t ii = 0; ii < ib; ++ii) {
      float* crow = c + (i0 + ii) * n;
      const double* arow = acc + ii * n;
      if (accumulate) {
        for (int64_t j = 0; j < n; ++j)
          crow[j] = static_cast<float>(static_cast<double>(crow[j]) + arow[j]);
      } else {
        for (int64_t j = 0; j < n; ++j) crow[j] = static_cast<float>(arow[j]);
      }
    }
  }
}

}  // namespace

void gemm_nn(const float* a, const float* b, float* c, int64_t m, int64_t k,
             int64_t n, bool accumulate) {
  pack(a, tl_pack_a, m * k);
  pack(b, tl_pack_b, k * n);
  gemm_core(tl_pack_a.data(), tl_pack_b.data(), c, m, k, n, accumulate);
}

void gemm_nt(const float* a, const float* b, float* c, int64_t m, int64_t k,
             int64_t n, bool accumulate) {
  pack(a, tl_pack_a, m * k);
  pack_transpose(b, tl_pack_b, n, k);  // [n,k] -> [k,n]
  gemm_core(tl_pack_a.data(), tl_pack_b.data(), c, m, k, n, accumulate);
}

void gemm_tn(const float* a, const float* b, float* c, int64_t m, int64_t k,
             int64_t n, bool accumulate) {
  pack_transpose(a, tl_pack_a, m, k);  // [m,k] -> [k,m]
  pack(b, tl_pack_b, m * n);
  gemm_core(tl_pack_a.data(), tl_pack_b.data(), c, k, m, n, accumulate);
}

double dot(const float* a, const float* b, int64_t n) {
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

}  // namespace blas

// ---------------------------------------------------------------------------
// RopeTable
// ---------------------------------------------------------------------------

RopeTable RopeTable::make(int64_t context, int64_t head_dim, double base) {
  if (head_dim % 2 != 0)
    throw std::invalid_argument("rope requires an even head width, got " + std::to_string(head_dim));
  if (context < 1 || base <= 0.0) throw std::invalid_argument("rope: bad context or base");
  RopeTable t;
  t.context = context;
  t.head_dim = head_dim;
  t.base = base;
  const int64_t pairs = head_dim / 2;
  t.cos_v.resize(static_cast<size_t>(context * pairs));
  t.sin_v.resize(static_cast<size_t>(context * pairs));
  for (int64_t pos = 0; pos < context; ++pos) {
    for (int64_t p = 0; p < pairs; ++p) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(head_dim));
      const double ang = static_cast<double>(pos) * freq;
      t.cos_v[static_cast<size_t>(pos * pairs + p)] = std::cos(ang);
      t.sin_v[static_cast<size_t>(pos * pairs + p)] = std::sin(ang);
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Graph ops
// ---------------------------------------------------------------------------

TensorPtr Graph::record(TensorPtr out, std::function<void()> bwd, bool any_grad) {
  if (any_grad) {
    out->requires_grad = true;
    ops_.push_back({std::move(bwd)});
  }
  return out;
}

TensorPtr Graph::constant(Shape shape, std::vector<float> vals) {
  return make_tensor(std::move(shape), std::move(vals), false);
}

TensorPtr Graph::matmul(const TensorPtr& a, const TensorPtr& b) {
  if (a->rank() < 2 || b->rank() != 2 || a->cols() != b->dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a->shape) + " x " +
                                shape_str(b->shape));
  const int64_t rows = a->rows(), k = a->cols(), n = b->dim(1);
  Shape out_shape = a->shape;
  out_shape.back() = n;
  auto out = make_tensor(std::move(out_shape));
  blas::gemm_nn(a->v.data(), b->v.data(), out->v.data(), rows, k, n, false);
  auto bwd = [a, b, out, rows, k, n] {
    if (!out->has_grad()) return;
    const float* g = out->g.data();
    if (a->requires_grad)
      blas::gemm_nt(g, b->v.data(), a->grad().data(), rows, n, k, true);
    if (b->requires_grad)
      blas::gemm_tn(a->v.data(), g, b->grad().data(), rows, k, n, true);
  };
  return record(std::move(out), std::move(bwd), a->requires_grad || b->requires_grad);
}

TensorPtr Graph::matmul_nt(const TensorPtr& a, const TensorPtr& b) {
  if (a->rank() != 2 || b->rank() != 2 || a->dim(1) != b->dim(1))
    throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(a->shape) + " x " +
                                shape_str(b->shape));
  const int64_t m = a->dim(0), k = a->dim(1), n = b->dim(0);
  auto out = make_tensor({m, n});
  blas::gemm_nt(a->v.data(), b->v.data(), out->v.data(), m, k, n, false);
  auto bwd = [a, b, out, m, k, n] {
    if (!out->has_grad()) return;
    const float* g = out->g.data();
    if (a->requires_grad) blas::gemm_nn(g, b->v.data(), a->grad().data(), m, n, k, true);
    if (b->requires_grad) blas::gemm_tn(g, a->v.data(), b->grad().data(), m, n, k, true);
  };
  return record(std::move(out), std::move(bwd), a->requires_grad || b->requires_grad);
}

TensorPtr Graph::add(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape)
    throw std::invalid_argument("add: shape mismatch " + shape_str(a->shape) + " vs " +
                                shape_str(b->shape));
  auto out = make_tensor(a->shape);
  const int64_t n = a->numel();
  for (int64_t i = 0; i < n; ++i)
    out->v[i] = static_cast<float>(static_cast<double>(a->v[i]) + static_cast<double>(b->v[i]));
  auto bwd = [a, b, out, n] {
    if (!out->has_grad()) return;
    const float* g = out->g.data();
    if (a->requires_grad) {
      float* ga = a->grad().data();
      for (int64_t i = 0; i < n; ++i)
        ga[i] = static_cast<float>(static_cast<double>(ga[i]) + g[i]);
    }
    if (b->requires_grad) {
      float* gb = b->grad().data();
      for (int64_t i = 0; i < n; ++i)
        gb[i] = static_cast<float>(static_cast<double>(gb[i]) + g[i]);
    }
  };
  return record(std::move(out), std::move(bwd), a->requires_grad || b->requires_grad);
}

TensorPtr Graph::add_rowvec(const TensorPtr& x, const TensorPtr& bias) {
  if (bias->rank() != 1 || bias->dim(0) != x->cols())
    throw std::invalid_argument("add_rowvec: bias " + shape_str(bias->shape) +
                                " does not match row width of " + shape_str(x->shape));
  const int64_t rows = x->rows(), n = x->cols();
  auto out = make_tensor(x->shape);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < n; ++j)
      out->v[r * n + j] = static_cast<float>(static_cast<double>(x->v[r * n + j]) +
                                             static_cast<double>(bias->v[j]));
  auto bwd = [x, bias, out, rows, n] {
    if (!out->has_grad()) return;
    const float* g = out->g.data();
    if (x->requires_grad) {
      float* gx = x->grad().data();
      for (int64_t i = 0; i < rows * n; ++i)
        gx[i] = static_cast<float>(static_cast<double>(gx[i]) + g[i]);
    }
    if (bias->requires_grad) {
      float* gb = bias->grad().data();
      for (int64_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int64_t r = 0; r < rows; ++r) acc += g[r * n + j];
        gb[j] = static_cast<float>(static_cast<double>(gb[j]) + acc);
      }
    }
  };
  return record(std::move(out), std::move(bwd), x->requires_grad || bias->requires_grad);
}

TensorPtr Graph::mul(const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape)
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a->shape) + " vs " +
                                shape_str(b->shape));
  const int64_t n = a->numel();
  auto out = make_tensor(a->shape);
  for (int64_t i = 0; i < n; ++i)
    out->v[i] = static_cast<float>(static_cast<double>(a->v[i]) * static_cast<double>(b->v[i]));
  auto bwd = [a, b, out, n] {
    if (!out->has_grad()) return;
    const float* g = out->g.data();
    if (a->requires_grad) {
      float* ga = a->grad().data();
      for (int64_t i = 0; i < n; ++i)
        ga[i] = static_cast<float>(static_cast<double>(ga[i]) +
                                   static_cast<double>(g[i]) * static_cast<double>(b->v[i]));
    }
    if (b->requires_grad) {
      float* gb = b->grad().data();
      for (int64_t i = 0; i < n; ++i)
        gb[i] = static_cast<float>(static_cast<double>(gb[i]) +
                                   static_cast<double>(g[i]) * static_cast<double>(a->v[i]));
    }
  };
  return record(std::move(out), std::move(bwd), a->requires_grad || b->requires_grad);
}

TensorPtr Graph::scale(const TensorPtr& a, double c) {
  const int64_t n = a->numel();
  auto out = make_tensor(a->shape);
  for (int64_t i = 0; i < n; ++i)
    out->v[i] = static_cast<float>(static_cast<double>(a->v[i]) * c);
  auto bwd = [a, out, c, n] {
    if (!out->has_grad() || !a->requires_grad) return;
    const float* g = out->g.data();
    float* ga = a->grad().data();
    for (int64_t i = 0; i < n; ++i)
      ga[i] = static_cast<float>(static_cast<double>(ga[i]) + static_cast<double>(g[i]) * c);
  };
  return record(std::move(out), std::move(bwd), a->requires_grad);
}

TensorPtr Graph::slice_cols(const TensorPtr& x, int64_t col0, int64_t width) {
  const int64_t n = x->cols();
  if (col0 < 0 || width < 1 || col0 + width > n)
    throw std::invalid_argument("slice_cols: range [" + std::to_string(col0) + ", " +
                                std::to_string(col0 + width) + ") outside " + shape_str(x->shape));
  const int64_t rows = x->rows();
  Shape out_shape = x->shape;
  out_shape.back() = width;
  auto out = make_tensor(std::move(out_shape));
  for (int64_t r = 0; r < rows; ++r)
    std::copy_n(x->v.data() + r * n + col0, width, out->v.data() + r * width);
  auto bwd = [x, out, col0, width, rows, n] {
    if (!out->has_grad() || !x->requires_grad) return;
    const float* g = out->g.data();
    float* gx = x->grad().data();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < width; ++j) {
        float& dst = gx[r * n + col0 + j];
        dst = static_cast<float>(static_cast<double>(dst) + g[r * width + j]);
      }
  };
  return record(std::move(out), std::move(bwd), x->requires_grad);
}

TensorPtr Graph::concat_cols(std::span<const TensorPtr> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int64_t rows = parts[0]->rows();
  Shape lead = parts[0]->shape;
  int64_t total = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    Shape plead = p->shape;
    plead.back() = 1;
    Shape llead = lead;
    llead.back() = 1;
    if (plead != llead)
      throw std::invalid_argument("concat_cols: leading shape mismatch " + shape_str(p->shape));
    total += p->cols();
    any_grad = any_grad || p->requires_grad;
  }
  Shape out_shape = lead;
  out_shape.back() = total;
  auto out = make_tensor(std::move(out_shape));
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t w = p->cols();
    for (int64_t r = 0; r < rows; ++r)
      std::copy_n(p->v.data() + r * w, w, out->v.data() + r * total + off);
    off += w;
  }
  std::vector<TensorPtr> held(parts.begin(), parts.end());
  auto bwd = [held = std::move(held), out, rows, total] {
    if (!out->has_grad()) return;
    const float* g = out->g.data();
    int64_t off = 0;
    for (const auto& p : held) {
      const int64_t w = p->cols();
      if (p->requires_grad) {
        float* gp = p->grad().data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < w; ++j)
            gp[r * w + j] = static_cast<float>(static_cast<double>(gp[r * w + j]) +
                                               g[r * total + off + j]);
      }
      off += w;
    }
  };
  return record(std::move(out), std::move(bwd), any_grad);
}

TensorPtr Graph::row_softmax(const TensorPtr& s) {
  const int64_t rows = s->rows(), n = s->cols();
  auto out = make_tensor(s->shape);
  for (int64_t r = 0; r < rows; ++r) {
    const float* x = s->v.data() + r * n;
    double mx = kNegInf;
    for (int64_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(x[j]));
    if (mx == kNegInf)
      throw std::invalid_argument("row_softmax: row " + std::to_string(r) + " is fully masked");
    double denom = 0.0;
    for (int64_t j = 0; j < n; ++j) denom += std::exp(static_cast<double>(x[j]) - mx);
    float* y = out->v.data() + r * n;
    for (int64_t j = 0; j < n; ++j)
      y[j] = static_cast<float>(std::exp(static_cast<double>(x[j]) - mx) / denom);
  }
  auto bwd = [s, out, rows, n] {
    if (!out->has_grad() || !s->requires_grad) return;
    const float* g = out->g.data();
    const float* p = out->v.data();
    float* gs = s->grad().data();
    for (int64_t r = 0; r < rows; ++r) {
      double gdotp = 0.0;
      for (int64_t j = 0; j < n; ++j)
        gdotp += static_cast<double>(g[r * n + j]) * static_cast<double>(p[r * n + j]);
      for (int64_t j = 0; j < n; ++j) {
        const double d = static_cast<double>(p[r * n + j]) *
                         (static_cast<double>(g[r * n + j]) - gdotp);
        gs[r * n + j] = static_cast<float>(static_cast<double>(gs[r * n + j]) + d);
      }
    }
  };
  return record(std::move(out), std::move(bwd), s->requires_grad);
}

TensorPtr Graph::add_causal_mask(const TensorPtr& s) {
  if (s->rank() != 2 || s->dim(0) != s->dim(1))
    throw std::invalid_argument("add_causal_mask: expected square scores, got " + shape_str(s->shape));
  const int64_t n = s->dim(0);
  auto out = make_tensor(s->shape);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      out->v[i * n + j] = j > i ? -std::numeric_limits<float>::infinity() : s->v[i * n + j];
  auto bwd = [s, out, n] {
    if (!out->has_grad() || !s->requires_grad) return;
    const float* g = out->g.data();
    float* gs = s->grad().data();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j <= i; ++j)
        gs[i * n + j] = static_cast<float>(static_cast<double>(gs[i * n + j]) + g[i * n + j]);
  };
  return record(std::move(out), std::move(bwd), s->requires_grad);
}

TensorPtr Graph::rms_normalize(const TensorPtr& x, const TensorPtr& gain) {
  const int64_t rows = x->rows(), n = x->cols();
  bool scalar_gain = false;
  if (gain) {
    if (gain->shape == Shape{1})
      scalar_gain = true;
    else if (gain->shape != Shape{n})
      throw std::invalid_argument("rms_normalize: gain must be absent, [" + std::to_string(n) +
                                  "] or [1], got " + shape_str(gain->shape));
  }
  auto out = make_tensor(x->shape);
  auto rinv = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x->v.data() + r * n;
    double ms = 0.0;
    for (int64_t j = 0; j < n; ++j) ms += static_cast<double>(xr[j]) * static_cast<double>(xr[j]);
    ms /= static_cast<double>(n);
    const double rk = 1.0 / std::sqrt(ms + kRmsEps);
    (*rinv)[static_cast<size_t>(r)] = rk;
    float* y = out->v.data() + r * n;
    for (int64_t j = 0; j < n; ++j) {
      const double gj = gain ? static_cast<double>(gain->v[scalar_gain ? 0 : j]) : 1.0;
      y[j] = static_cast<float>(static_cast<double>(xr[j]) * rk * gj);
    }
  }
  auto bwd = [x, gain, out, rinv, rows, n, scalar_gain] {
    if (!out->has_grad()) return;
    const float* g = out->g.data();
    for (int64_t r = 0; r < rows; ++r) {
      const float* xr = x->v.data() + r * n;
      const double rk = (*rinv)[static_cast<size_t>(r)];
      if (x->requires_grad) {
        float* gx = x->grad().data() + r * n;
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j) {
          const double gj = gain ? static_cast<double>(gain->v[scalar_gain ? 0 : j]) : 1.0;
          dot += static_cast<double>(g[r * n + j]) * gj * static_cast<double>(xr[j]);
        }
        const double k3 = rk * rk * rk * dot / static_cast<double>(n);
        for (int64_t j = 0; j < n; ++j) {
          const double gj = gain ? static_cast<double>(gain->v[scalar_gain ? 0 : j]) : 1.0;
          const double d = static_cast<double>(g[r * n + j]) * gj * rk -
                           static_cast<double>(xr[j]) * k3;
          gx[j] = static_cast<float>(static_cast<double>(gx[j]) + d);
        }
      }
      if (gain && gain->requires_grad) {
        float* gg = gain->grad().data();
        if (scalar_gain) {
          double acc = 0.0;
          for (int64_t j = 0; j < n; ++j)
            acc += static_cast<double>(g[r * n + j]) * static_cast<double>(xr[j]) * rk;
          gg[0] = static_cast<float>(static_cast<double>(gg[0]) + acc);
        } else {
          for (int64_t j = 0; j < n; ++j)
            gg[j] = static_cast<float>(static_cast<double>(gg[j]) +
                                       static_cast<double>(g[r * n + j]) *
                                           static_cast<double>(xr[j]) * rk);
        }
      }
    }
  };
  return record(std::move(out), std::move(bwd),
                x->requires_grad || (gain && gain->requires_grad));
}

TensorPtr Graph::activation(ActKind kind, const TensorPtr& x) {
  const int64_t n = x->numel();
  auto out = make_tensor(x->shape);
  switch (kind) {
    case ActKind::kRelu:
      for (int64_t i = 0; i < n; ++i) out->v[i] = x->v[i] > 0.0f ? x->v[i] : 0.0f;
      break;
    case ActKind::kSquaredRelu:
      for (int64_t i = 0; i < n; ++i) {
        const double m = x->v[i] > 0.0f ? static_cast<double>(x->v[i]) : 0.0;
        out->v[i] = static_cast<float>(m * m);
      }
      break;
    case ActKind::kSilu:
      for (int64_t i = 0; i < n; ++i) {
        const double xv = x->v[i];
        out->v[i] = static_cast<float>(xv / (1.0 + std::exp(-xv)));
      }
      break;
  }
  auto bwd = [x, out, kind, n] {
    if (!out->has_grad() || !x->requires_grad) return;
    const float* g = out->g.data();
    float* gx = x->grad().data();
    for (int64_t i = 0; i < n; ++i) {
      const double xv = x->v[i];
      double d = 0.0;
      switch (kind) {
        case ActKind::kRelu:
          d = xv > 0.0 ? 1.0 : 0.0;
          break;
        case ActKind::kSquaredRelu:
          d = xv > 0.0 ? 2.0 * xv : 0.0;
          break;
        case ActKind::kSilu: {
          const double s = 1.0 / (1.0 + std::exp(-xv));
          d = s * (1.0 + xv * (1.0 - s));
          break;
        }
      }
      gx[i] = static_cast<float>(static_cast<double>(gx[i]) + static_cast<double>(g[i]) * d);
    }
  };
  return record(std::move(out), std::move(bwd), x->requires_grad);
}

TensorPtr Graph::rope(const TensorPtr& x, const RopeTable* table) {
  if (x->rank() != 2 || x->dim(1) != table->head_dim || x->dim(0) > table->context)
    throw std::invalid_argument("rope: input " + shape_str(x->shape) +
                                " does not fit table (context " + std::to_string(table->context) +
                                ", head width " + std::to_string(table->head_dim) + ")");
  const int64_t rows = x->dim(0), d = table->head_dim, pairs = d / 2;
  auto out = make_tensor(x->shape);
  for (int64_t t = 0; t < rows; ++t) {
    const float* xr = x->v.data() + t * d;
    float* y = out->v.data() + t * d;
    for (int64_t p = 0; p < pairs; ++p) {
      const double c = table->cos_v[static_cast<size_t>(t * pairs + p)];
      const double s = table->sin_v[static_cast<size_t>(t * pairs + p)];
      const double x0 = xr[2 * p], x1 = xr[2 * p + 1];
      y[2 * p] = static_cast<float>(x0 * c - x1 * s);
      y[2 * p + 1] = static_cast<float>(x0 * s + x1 * c);
    }
  }
  auto bwd = [x, out, table, rows, d, pairs] {
    if (!out->has_grad() || !x->requires_grad) return;
    const float* g = out->g.data();
    float* gx = x->grad().data();
    for (int64_t t = 0; t < rows; ++t) {
      for (int64_t p = 0; p < pairs; ++p) {
        const double c = table->cos_v[static_cast<size_t>(t * pairs + p)];
        const double s = table->sin_v[static_cast<size_t>(t * pairs + p)];
        const double g0 = g[t * d + 2 * p], g1 = g[t * d + 2 * p + 1];
        float& d0 = gx[t * d + 2 * p];
        float& d1 = gx[t * d + 2 * p + 1];
        d0 = static_cast<float>(static_cast<double>(d0) + g0 * c + g1 * s);
        d1 = static_cast<float>(static_cast<double>(d1) - g0 * s + g1 * c);
      }
    }
  };
  return record(std::move(out), std::move(bwd), x->requires_grad);
}

TensorPtr Graph::embedding_rows(const TensorPtr& table, std::span<const uint16_t> ids) {
  if (table->rank() != 2) throw std::invalid_argument("embedding_rows: table must be 2-D");
  const int64_t v = table->dim(0), m = table->dim(1);
  const int64_t c = static_cast<int64_t>(ids.size());
  if (c < 1) throw std::invalid_argument("embedding_rows: empty id list");
  for (int64_t i = 0; i < c; ++i)
    if (ids[static_cast<size_t>(i)] >= v)
      throw std::invalid_argument("embedding_rows: id " + std::to_string(ids[static_cast<size_t>(i)]) +
                                  " out of range for vocab " + std::to_string(v));
  auto out = make_tensor({c, m});
  for (int64_t i = 0; i < c; ++i)
    std::copy_n(table->v.data() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * m, m,
                out->v.data() + i * m);
  std::vector<uint16_t> idv(ids.begin(), ids.end());
  auto bwd = [table, out, idv = std::move(idv), m] {
    if (!out->has_grad() || !table->requires_grad) return;
    const float* g = out->g.data();
    float* gt = table->grad().data();
    for (size_t i = 0; i < idv.size(); ++i) {
      float* row = gt + static_cast<int64_t>(idv[i]) * m;
      const float* gr = g + static_cast<int64_t>(i) * m;
      for (int64_t j = 0; j < m; ++j)
        row[j] = static_cast<float>(static_cast<double>(row[j]) + gr[j]);
    }
  };
  return record(std::move(out), std::move(bwd), table->requires_grad);
}

TensorPtr Graph::cross_entropy(const TensorPtr& logits, std::span<const uint16_t> targets,
                               std::span<const uint8_t> valid) {
  const int64_t rows = logits->rows(), vdim = logits->cols();
  if (static_cast<int64_t>(targets.size()) != rows)
    throw std::invalid_argument("cross_entropy: got " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(rows) + " rows");
  if (!valid.empty() && static_cast<int64_t>(valid.size()) != rows)
    throw std::invalid_argument("cross_entropy: valid mask length mismatch");
  int64_t n_valid = 0;
  for (int64_t r = 0; r < rows; ++r) {
    const bool ok = valid.empty() || valid[static_cast<size_t>(r)];
    if (!ok) continue;
    ++n_valid;
    if (targets[static_cast<size_t>(r)] >= vdim)
      throw std::invalid_argument("cross_entropy: target " +
                                  std::to_string(targets[static_cast<size_t>(r)]) +
                                  " out of range for vocab " + std::to_string(vdim));
  }
  if (n_valid == 0) throw std::invalid_argument("cross_entropy: no valid positions");

  auto mx = std::make_shared<std::vector<double>>(static_cast<size_t>(rows), 0.0);
  auto denom = std::make_shared<std::vector<double>>(static_cast<size_t>(rows), 0.0);
  double acc = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    if (!valid.empty() && !valid[static_cast<size_t>(r)]) continue;
    const float* x = logits->v.data() + r * vdim;
    double m = kNegInf;
    for (int64_t j = 0; j < vdim; ++j) m = std::max(m, static_cast<double>(x[j]));
    double den = 0.0;
    for (int64_t j = 0; j < vdim; ++j) den += std::exp(static_cast<double>(x[j]) - m);
    (*mx)[static_cast<size_t>(r)] = m;
    (*denom)[static_cast<size_t>(r)] = den;
    acc += m + std::log(den) - static_cast<double>(x[targets[static_cast<size_t>(r)]]);
  }
  const double loss = acc / static_cast<double>(n_valid);
  auto out = make_tensor({1}, {static_cast<float>(loss)});
  out->precise = loss;
  out->has_precise = true;

  std::vector<uint16_t> tv(targets.begin(), targets.end());
  std::vector<uint8_t> vv(valid.begin(), valid.end());
  auto bwd = [logits, out, mx, denom, tv = std::move(tv), vv = std::move(vv), rows, vdim,
              n_valid] {
    if (!out->has_grad() || !logits->requires_grad) return;
    const double gscale = static_cast<double>(out->g[0]) / static_cast<double>(n_valid);
    float* gl = logits->grad().data();
    for (int64_t r = 0; r < rows; ++r) {
      if (!vv.empty() && !vv[static_cast<size_t>(r)]) continue;
      const float* x = logits->v.data() + r * vdim;
      const double m = (*mx)[static_cast<size_t>(r)];
      const double den = (*denom)[static_cast<size_t>(r)];
      for (int64_t j = 0; j < vdim; ++j) {
        const double p = std::exp(static_cast<double>(x[j]) - m) / den;
        const double onehot = (j == static_cast<int64_t>(tv[static_cast<size_t>(r)])) ? 1.0 : 0.0;
        gl[r * vdim + j] = static_cast<float>(static_cast<double>(gl[r * vdim + j]) +
                                              gscale * (p - onehot));
      }
    }
  };
  return record(std::move(out), std::move(bwd), logits->requires_grad);
}

TensorPtr Graph::sum(const TensorPtr& x) {
  double acc = 0.0;
  const int64_t n = x->numel();
  for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(x->v[i]);
  auto out = make_tensor({1}, {static_cast<float>(acc)});
  out->precise = acc;
  out->has_precise = true;
  auto bwd = [x, out, n] {
    if (!out->has_grad() || !x->requires_grad) return;
    const double g = out->g[0];
    float* gx = x->grad().data();
    for (int64_t i = 0; i < n; ++i)
      gx[i] = static_cast<float>(static_cast<double>(gx[i]) + g);
  };
  return record(std::move(out), std::move(bwd), x->requires_grad);
}

TensorPtr Graph::custom_unary(const TensorPtr& x, double (*f)(double), double (*df)(double)) {
  const int64_t n = x->numel();
  auto out = make_tensor(x->shape);
  for (int64_t i = 0; i < n; ++i)
    out->v[i] = static_cast<float>(f(static_cast<double>(x->v[i])));
  auto bwd = [x, out, df, n] {
    if (!out->has_grad() || !x->requires_grad) return;
    const float* g = out->g.data();
    float* gx = x->grad().data();
    for (int64_t i = 0; i < n; ++i)
      gx[i] = static_cast<float>(static_cast<double>(gx[i]) +
                                 static_cast<double>(g[i]) * df(static_cast<double>(x->v[i])));
  };
  return record(std::move(out), std::move(bwd), x->requires_grad);
}

void Graph::backward(const TensorPtr& loss) {
  if (backward_done_)
    throw std::logic_error("backward: already run on this graph; call reset() first");
  if (loss->numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss->shape));
  loss->grad()[0] = 1.0f;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->backward();
  backward_done_ = true;
}

void Graph::reset() {
  ops_.clear();
  backward_done_ = false;
}

// ---------------------------------------------------------------------------
// grad_check
// ---------------------------------------------------------------------------

namespace {

double eval_loss(const std::function<TensorPtr(Graph&)>& build) {
  Graph g;
  TensorPtr loss = build(g);
  if (loss->numel() != 1) throw std::invalid_argument("grad_check: builder must return a scalar");
  return loss->has_precise ? loss->precise : static_cast<double>(loss->v[0]);
}

}  // namespace

GradCheckResult grad_check(const std::function<TensorPtr(Graph&)>& build,
                           std::span<const TensorPtr> params, double h,
                           const GradCheckOptions& opts) {
  if (h <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
  Graph g;
  TensorPtr loss = build(g);
  if (loss->numel() != 1) throw std::invalid_argument("grad_check: builder must return a scalar");
  const double base = loss->has_precise ? loss->precise : static_cast<double>(loss->v[0]);
  if (!std::isfinite(base)) throw std::runtime_error("grad_check: non-finite loss");
  g.backward(loss);

  GradCheckResult res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const TensorPtr& p = params[pi];
    const int64_t n = p->numel();
    std::vector<double> analytic(static_cast<size_t>(n), 0.0);
    if (p->has_grad())
      for (int64_t i = 0; i < n; ++i) {
        analytic[static_cast<size_t>(i)] = p->g[i];
        if (!std::isfinite(analytic[static_cast<size_t>(i)]))
          throw std::runtime_error("grad_check: non-finite gradient at p" + std::to_string(pi) +
                                   "[" + std::to_string(i) + "]");
      }

    std::vector<int64_t> coords;
    if (n <= opts.max_coords_per_tensor) {
      coords.resize(static_cast<size_t>(n));
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      const int64_t half = opts.max_coords_per_tensor / 2;
      std::vector<int64_t> order(static_cast<size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      std::partial_sort(order.begin(), order.begin() + half, order.end(),
                        [&](int64_t a, int64_t b) {
                          return std::abs(analytic[static_cast<size_t>(a)]) >
                                 std::abs(analytic[static_cast<size_t>(b)]);
                        });
      coords.assign(order.begin(), order.begin() + half);
      const int64_t stride = std::max<int64_t>(1, n / half);
      for (int64_t i = 0; i < n && static_cast<int64_t>(coords.size()) < opts.max_coords_per_tensor;
           i += stride)
        if (std::find(coords.begin(), coords.end(), i) == coords.end()) coords.push_back(i);
    }

    for (int64_t c : coords) {
      const float orig = p->v[c];
      const float up = static_cast<float>(static_cast<double>(orig) + h);
      const float dn = static_cast<float>(static_cast<double>(orig) - h);
      p->v[c] = up;
      const double lp = eval_loss(build);
      p->v[c] = dn;
      const double lm = eval_loss(build);
      p->v[c] = orig;
      if (!std::isfinite(lp) || !std::isfinite(lm))
        throw std::runtime_error("grad_check: non-finite loss while perturbing p" +
                                 std::to_string(pi) + "[" + std::to_string(c) + "]");
      const double span = static_cast<double>(up) - static_cast<double>(dn);
      const double cd = (lp - lm) / span;
      const double a = analytic[static_cast<size_t>(c)];
      const double mag = std::abs(a) + std::abs(cd);
      if (mag < opts.resolvable_floor) {
        ++res.coords_skipped;
        continue;
      }
      const double rel = std::abs(a - cd) / (mag + 1e-12);
      ++res.coords_checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_coord = "p" + std::to_string(pi) + "[" + std::to_string(c) + "]";
      }
    }
  }
  return res;
}

}  // namespace mulab
