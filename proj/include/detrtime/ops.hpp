#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "detrtime/rng.hpp"
#include "detrtime/tensor.hpp"

namespace detrtime {

namespace detail {

// Elementwise broadcast: operands must have equal shapes, or the smaller one
// must be a scalar or a trailing suffix of the larger one's shape. The
// smaller operand is indexed modulo its length.
enum class BSide { none, left, right };

struct BPlan {
  BSide side = BSide::none;  // which operand is the broadcast (smaller) one
  std::int64_t chunk = 0;    // numel of the smaller operand
};

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline BPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
  BPlan plan;
  if (a == b) {
    plan.side = BSide::none;
    return plan;
  }
  const std::int64_t an = shape_numel(a), bn = shape_numel(b);
  if (bn == 1 || (bn < an && is_suffix(b, a))) {
    plan.side = BSide::right;
    plan.chunk = bn;
    return plan;
  }
  if (an == 1 || (an < bn && is_suffix(a, b))) {
    plan.side = BSide::left;
    plan.chunk = an;
    return plan;
  }
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

struct AxisView {
  std::int64_t outer = 1, n = 1, inner = 1;
};

inline int normalize_axis(int axis, std::size_t rank, const char* op) {
  int ax = axis < 0 ? axis + static_cast<int>(rank) : axis;
  if (ax < 0 || ax >= static_cast<int>(rank)) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  }
  return ax;
}

inline AxisView axis_view(const Shape& s, int axis) {
  AxisView v;
  for (int d = 0; d < axis; ++d) v.outer *= s[static_cast<std::size_t>(d)];
  v.n = s[static_cast<std::size_t>(axis)];
  for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < s.size(); ++d) v.inner *= s[d];
  return v;
}

// ---- raw GEMM kernels (row-major, accumulate into C) ----

inline void gemm_nn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                    std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::int64_t l = 0; l < k; ++l) {
      const double al = arow[l];
      if (al == 0.0) continue;
      const double* brow = b + l * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += al * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                    std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::int64_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] += acc;
    }
  }
}

// c[m,n] += a[k,m]^T * b[k,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                    std::int64_t n) {
  for (std::int64_t l = 0; l < k; ++l) {
    const double* arow = a + l * m;
    const double* brow = b + l * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double ali = arow[i];
      if (ali == 0.0) continue;
      double* crow = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += ali * brow[j];
    }
  }
}

// Copies `in` (row-major, in_shape) into `out` where output dim d draws from
// input dim perm[d]. Odometer walk: no per-element division.
inline void permute_copy(const Shape& in_shape, const std::vector<double>& in,
                         const std::vector<int>& perm, Shape& out_shape,
                         std::vector<double>& out) {
  const auto rank = in_shape.size();
  std::vector<std::int64_t> in_strides(rank, 1);
  for (std::size_t d = rank - 1; d > 0; --d) {
    in_strides[d - 1] = in_strides[d] * in_shape[d];
  }
  out_shape.resize(rank);
  std::vector<std::int64_t> step(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    out_shape[d] = in_shape[static_cast<std::size_t>(perm[d])];
    step[d] = in_strides[static_cast<std::size_t>(perm[d])];
  }
  out.assign(in.size(), 0.0);
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t in_off = 0;
  const std::int64_t total = static_cast<std::int64_t>(in.size());
  for (std::int64_t o = 0; o < total; ++o) {
    out[static_cast<std::size_t>(o)] = in[static_cast<std::size_t>(in_off)];
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        in_off += step[d];
        break;
      }
      idx[d] = 0;
      in_off -= step[d] * (out_shape[d] - 1);
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  const auto plan = detail::broadcast_plan(a.shape(), b.shape(), "add");
  const auto& big = plan.side == detail::BSide::left ? b : a;
  const auto& small = plan.side == detail::BSide::left ? a : b;
  std::vector<double> out(big.values());
  if (plan.side == detail::BSide::none) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
  } else {
    const auto& sv = small.values();
    const std::size_t chunk = sv.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += sv[i % chunk];
  }
  auto an = a.node().get();
  auto bn = b.node().get();
  const auto side = plan.side;
  return Tensor(detail::make_op(
      big.shape(), std::move(out), {a.node(), b.node()}, [an, bn, side](TensorNode& self) {
        TensorNode* bign = side == detail::BSide::left ? bn : an;
        TensorNode* smalln = side == detail::BSide::left ? an : bn;
        if (side == detail::BSide::none) {
          if (an->requires_grad) detail::add_into(an, self.grad);
          if (bn->requires_grad) detail::add_into(bn, self.grad);
          return;
        }
        if (bign->requires_grad) detail::add_into(bign, self.grad);
        if (smalln->requires_grad) {
          smalln->ensure_grad();
          const std::size_t chunk = smalln->value.size();
          for (std::size_t i = 0; i < self.grad.size(); ++i) {
            smalln->grad[i % chunk] += self.grad[i];
          }
        }
      }));
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  const auto plan = detail::broadcast_plan(a.shape(), b.shape(), "mul");
  const bool b_small = plan.side != detail::BSide::left;
  const auto& big = b_small ? a : b;
  const auto& small = b_small ? b : a;
  std::vector<double> out(big.values().size());
  if (plan.side == detail::BSide::none) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  } else {
    const auto& bv = big.values();
    const auto& sv = small.values();
    const std::size_t chunk = sv.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = bv[i] * sv[i % chunk];
  }
  auto an = a.node().get();
  auto bn = b.node().get();
  const auto side = plan.side;
  return Tensor(detail::make_op(
      big.shape(), std::move(out), {a.node(), b.node()}, [an, bn, side](TensorNode& self) {
        TensorNode* bign = side == detail::BSide::left ? bn : an;
        TensorNode* smalln = side == detail::BSide::left ? an : bn;
        if (side == detail::BSide::none) {
          if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
              an->grad[i] += self.grad[i] * bn->value[i];
            }
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
              bn->grad[i] += self.grad[i] * an->value[i];
            }
          }
          return;
        }
        const std::size_t chunk = smalln->value.size();
        if (bign->requires_grad) {
          bign->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) {
            bign->grad[i] += self.grad[i] * smalln->value[i % chunk];
          }
        }
        if (smalln->requires_grad) {
          smalln->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) {
            smalln->grad[i % chunk] += self.grad[i] * bign->value[i];
          }
        }
      }));
}

// a / b elementwise; b must be same-shape, suffix or scalar.
inline Tensor divide(const Tensor& a, const Tensor& b) {
  const auto plan = detail::broadcast_plan(a.shape(), b.shape(), "divide");
  if (plan.side == detail::BSide::left) {
    throw ShapeError("divide: numerator shape " + shape_str(a.shape()) +
                     " may not broadcast against denominator " + shape_str(b.shape()));
  }
  std::vector<double> out(a.values().size());
  const auto& av = a.values();
  const auto& bv = b.values();
  const std::size_t chunk = plan.side == detail::BSide::none ? bv.size() : bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i % chunk];
  auto an = a.node().get();
  auto bn = b.node().get();
  return Tensor(detail::make_op(
      a.shape(), std::move(out), {a.node(), b.node()}, [an, bn](TensorNode& self) {
        const std::size_t chunk = bn->value.size();
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) {
            an->grad[i] += self.grad[i] / bn->value[i % chunk];
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double bvv = bn->value[i % chunk];
            bn->grad[i % chunk] -= self.grad[i] * an->value[i] / (bvv * bvv);
          }
        }
      }));
}

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.values());
  for (double& v : out) v *= c;
  auto xn = x.node().get();
  return Tensor(detail::make_op(x.shape(), std::move(out), {x.node()}, [xn, c](TensorNode& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += c * self.grad[i];
  }));
}

inline Tensor shift(const Tensor& x, double c) {
  std::vector<double> out(x.values());
  for (double& v : out) v += c;
  auto xn = x.node().get();
  return Tensor(detail::make_op(x.shape(), std::move(out), {x.node()}, [xn](TensorNode& self) {
    detail::add_into(xn, self.grad);
  }));
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

// ---------------------------------------------------------------------------
// Matrix multiplication: (2D,2D), batched (3D,3D) and (3D,2D)
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  auto bad = [&] {
    return ShapeError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  };
  if (as.size() == 2 && bs.size() == 2) {
    if (as[1] != bs[0]) throw bad();
    const std::int64_t m = as[0], k = as[1], n = bs[1];
    std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
    detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
    auto an = a.node().get();
    auto bn = b.node().get();
    return Tensor(detail::make_op(
        {m, n}, std::move(out), {a.node(), b.node()}, [an, bn, m, k, n](TensorNode& self) {
          if (an->requires_grad) {
            an->ensure_grad();
            detail::gemm_nt(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k);
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            detail::gemm_tn(an->value.data(), self.grad.data(), bn->grad.data(), k, m, n);
          }
        }));
  }
  if (as.size() == 3 && bs.size() == 2) {
    if (as[2] != bs[0]) throw bad();
    const std::int64_t bsz = as[0], m = as[1], k = as[2], n = bs[1];
    std::vector<double> out(static_cast<std::size_t>(bsz * m * n), 0.0);
    detail::gemm_nn(a.values().data(), b.values().data(), out.data(), bsz * m, k, n);
    auto an = a.node().get();
    auto bn = b.node().get();
    return Tensor(detail::make_op({bsz, m, n}, std::move(out), {a.node(), b.node()},
                                  [an, bn, bsz, m, k, n](TensorNode& self) {
                                    if (an->requires_grad) {
                                      an->ensure_grad();
                                      detail::gemm_nt(self.grad.data(), bn->value.data(),
                                                      an->grad.data(), bsz * m, n, k);
                                    }
                                    if (bn->requires_grad) {
                                      bn->ensure_grad();
                                      detail::gemm_tn(an->value.data(), self.grad.data(),
                                                      bn->grad.data(), k, bsz * m, n);
                                    }
                                  }));
  }
  if (as.size() == 3 && bs.size() == 3) {
    if (as[0] != bs[0] || as[2] != bs[1]) throw bad();
    const std::int64_t bsz = as[0], m = as[1], k = as[2], n = bs[2];
    std::vector<double> out(static_cast<std::size_t>(bsz * m * n), 0.0);
    for (std::int64_t i = 0; i < bsz; ++i) {
      detail::gemm_nn(a.values().data() + i * m * k, b.values().data() + i * k * n,
                      out.data() + i * m * n, m, k, n);
    }
    auto an = a.node().get();
    auto bn = b.node().get();
    return Tensor(detail::make_op(
        {bsz, m, n}, std::move(out), {a.node(), b.node()}, [an, bn, bsz, m, k, n](TensorNode& self) {
          for (std::int64_t i = 0; i < bsz; ++i) {
            if (an->requires_grad) {
              an->ensure_grad();
              detail::gemm_nt(self.grad.data() + i * m * n, bn->value.data() + i * k * n,
                              an->grad.data() + i * m * k, m, n, k);
            }
            if (bn->requires_grad) {
              bn->ensure_grad();
              detail::gemm_tn(an->value.data() + i * m * k, self.grad.data() + i * m * n,
                              bn->grad.data() + i * k * n, k, m, n);
            }
          }
        }));
  }
  throw bad();
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.values());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  auto xn = x.node().get();
  return Tensor(detail::make_op(x.shape(), std::move(out), {x.node()}, [xn](TensorNode& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (xn->value[i] > 0.0) xn->grad[i] += self.grad[i];
    }
  }));
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.values()[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  auto xn = x.node().get();
  return Tensor(detail::make_op(x.shape(), std::move(out), {x.node()}, [xn](TensorNode& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double y = self.value[i];
      xn->grad[i] += self.grad[i] * y * (1.0 - y);
    }
  }));
}

inline Tensor softmax(const Tensor& x, int axis) {
  const int ax = detail::normalize_axis(axis, x.rank(), "softmax");
  const auto view = detail::axis_view(x.shape(), ax);
  std::vector<double> out(x.values().size());
  const auto& xv = x.values();
  for (std::int64_t o = 0; o < view.outer; ++o) {
    for (std::int64_t in = 0; in < view.inner; ++in) {
      const std::int64_t base = o * view.n * view.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t t = 0; t < view.n; ++t) {
        mx = std::max(mx, xv[static_cast<std::size_t>(base + t * view.inner)]);
      }
      double total = 0.0;
      for (std::int64_t t = 0; t < view.n; ++t) {
        const double e = std::exp(xv[static_cast<std::size_t>(base + t * view.inner)] - mx);
        out[static_cast<std::size_t>(base + t * view.inner)] = e;
        total += e;
      }
      for (std::int64_t t = 0; t < view.n; ++t) {
        out[static_cast<std::size_t>(base + t * view.inner)] /= total;
      }
    }
  }
  auto xn = x.node().get();
  return Tensor(detail::make_op(
      x.shape(), std::move(out), {x.node()}, [xn, view](TensorNode& self) {
        xn->ensure_grad();
        for (std::int64_t o = 0; o < view.outer; ++o) {
          for (std::int64_t in = 0; in < view.inner; ++in) {
            const std::int64_t base = o * view.n * view.inner + in;
            double dot = 0.0;
            for (std::int64_t t = 0; t < view.n; ++t) {
              const auto i = static_cast<std::size_t>(base + t * view.inner);
              dot += self.grad[i] * self.value[i];
            }
            for (std::int64_t t = 0; t < view.n; ++t) {
              const auto i = static_cast<std::size_t>(base + t * view.inner);
              xn->grad[i] += self.value[i] * (self.grad[i] - dot);
            }
          }
        }
      }));
}

inline Tensor log_softmax(const Tensor& x, int axis) {
  const int ax = detail::normalize_axis(axis, x.rank(), "log_softmax");
  const auto view = detail::axis_view(x.shape(), ax);
  std::vector<double> out(x.values().size());
  const auto& xv = x.values();
  for (std::int64_t o = 0; o < view.outer; ++o) {
    for (std::int64_t in = 0; in < view.inner; ++in) {
      const std::int64_t base = o * view.n * view.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t t = 0; t < view.n; ++t) {
        mx = std::max(mx, xv[static_cast<std::size_t>(base + t * view.inner)]);
      }
      double total = 0.0;
      for (std::int64_t t = 0; t < view.n; ++t) {
        total += std::exp(xv[static_cast<std::size_t>(base + t * view.inner)] - mx);
      }
      const double lse = mx + std::log(total);
      for (std::int64_t t = 0; t < view.n; ++t) {
        const auto i = static_cast<std::size_t>(base + t * view.inner);
        out[i] = xv[i] - lse;
      }
    }
  }
  auto xn = x.node().get();
  return Tensor(detail::make_op(
      x.shape(), std::move(out), {x.node()}, [xn, view](TensorNode& self) {
        xn->ensure_grad();
        for (std::int64_t o = 0; o < view.outer; ++o) {
          for (std::int64_t in = 0; in < view.inner; ++in) {
            const std::int64_t base = o * view.n * view.inner + in;
            double gsum = 0.0;
            for (std::int64_t t = 0; t < view.n; ++t) {
              gsum += self.grad[static_cast<std::size_t>(base + t * view.inner)];
            }
            for (std::int64_t t = 0; t < view.n; ++t) {
              const auto i = static_cast<std::size_t>(base + t * view.inner);
              xn->grad[i] += self.grad[i] - std::exp(self.value[i]) * gsum;
            }
          }
        }
      }));
}

// ---------------------------------------------------------------------------
// Normalization and regularization
// ---------------------------------------------------------------------------

// Normalizes over the last dimension with learned affine parameters.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  const std::int64_t n = x.shape().back();
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw ShapeError("layer_norm: affine shapes " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match feature size [" +
                     std::to_string(n) + "]");
  }
  const std::int64_t rows = x.numel() / n;
  std::vector<double> out(x.values().size());
  const auto& xv = x.values();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::int64_t i = 0; i < n; ++i) mu += row[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::int64_t i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    double* orow = out.data() + r * n;
    for (std::int64_t i = 0; i < n; ++i) {
      orow[i] = (row[i] - mu) * inv * gamma.values()[static_cast<std::size_t>(i)] +
                beta.values()[static_cast<std::size_t>(i)];
    }
  }
  auto xn = x.node().get();
  auto gn = gamma.node().get();
  auto bn = beta.node().get();
  return Tensor(detail::make_op(
      x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [xn, gn, bn, n, rows, eps](TensorNode& self) {
        std::vector<double> xhat(static_cast<std::size_t>(n));
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* row = xn->value.data() + r * n;
          const double* grow = self.grad.data() + r * n;
          double mu = 0.0;
          for (std::int64_t i = 0; i < n; ++i) mu += row[i];
          mu /= static_cast<double>(n);
          double var = 0.0;
          for (std::int64_t i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
          var /= static_cast<double>(n);
          const double inv = 1.0 / std::sqrt(var + eps);
          for (std::int64_t i = 0; i < n; ++i) xhat[static_cast<std::size_t>(i)] = (row[i] - mu) * inv;
          if (gn->requires_grad) {
            gn->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
              gn->grad[static_cast<std::size_t>(i)] += grow[i] * xhat[static_cast<std::size_t>(i)];
            }
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) bn->grad[static_cast<std::size_t>(i)] += grow[i];
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            double mean_dy = 0.0, mean_dy_xhat = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
              const double dy = grow[i] * gn->value[static_cast<std::size_t>(i)];
              mean_dy += dy;
              mean_dy_xhat += dy * xhat[static_cast<std::size_t>(i)];
            }
            mean_dy /= static_cast<double>(n);
            mean_dy_xhat /= static_cast<double>(n);
            double* dxrow = xn->grad.data() + r * n;
            for (std::int64_t i = 0; i < n; ++i) {
              const double dy = grow[i] * gn->value[static_cast<std::size_t>(i)];
              dxrow[i] += inv * (dy - mean_dy - xhat[static_cast<std::size_t>(i)] * mean_dy_xhat);
            }
          }
        }
      }));
}

// Inverted dropout: activations are scaled by 1/(1-p) at train time so
// inference needs no rescale. The identity when train is false.
inline Tensor dropout(const Tensor& x, double p, bool train, Rng& rng) {
  if (!train || p <= 0.0) {
    std::vector<double> out(x.values());
    auto xn = x.node().get();
    return Tensor(detail::make_op(x.shape(), std::move(out), {x.node()}, [xn](TensorNode& self) {
      detail::add_into(xn, self.grad);
    }));
  }
  const double keep = 1.0 - p;
  auto mask = std::make_shared<std::vector<double>>(x.values().size());
  std::vector<double> out(x.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = rng.uniform() < p ? 0.0 : 1.0 / keep;
    (*mask)[i] = m;
    out[i] = x.values()[i] * m;
  }
  auto xn = x.node().get();
  return Tensor(detail::make_op(x.shape(), std::move(out), {x.node()}, [xn, mask](TensorNode& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * (*mask)[i];
  }));
}

// Running statistics owned by the layer; updated in train mode only.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  explicit BatchNormState(std::int64_t channels)
      : running_mean(static_cast<std::size_t>(channels), 0.0),
        running_var(static_cast<std::size_t>(channels), 1.0) {}
};

// x: [B, C, T]; per-channel normalization over batch and time.
inline Tensor batch_norm1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           const std::shared_ptr<BatchNormState>& state, double momentum,
                           double eps, bool train) {
  if (x.rank() != 3) {
    throw ShapeError("batch_norm1d: expected [batch, channels, time], got " +
                     shape_str(x.shape()));
  }
  const std::int64_t bsz = x.dim(0), ch = x.dim(1), t_len = x.dim(2);
  if (gamma.numel() != ch || beta.numel() != ch ||
      static_cast<std::int64_t>(state->running_mean.size()) != ch) {
    throw ShapeError("batch_norm1d: channel mismatch between input " + shape_str(x.shape()) +
                     " and affine [" + std::to_string(gamma.numel()) + "]");
  }
  const double count = static_cast<double>(bsz * t_len);
  std::vector<double> mean(static_cast<std::size_t>(ch), 0.0);
  std::vector<double> var(static_cast<std::size_t>(ch), 0.0);
  const auto& xv = x.values();
  if (train) {
    for (std::int64_t c = 0; c < ch; ++c) {
      double acc = 0.0;
      for (std::int64_t b = 0; b < bsz; ++b) {
        const double* row = xv.data() + (b * ch + c) * t_len;
        for (std::int64_t t = 0; t < t_len; ++t) acc += row[t];
      }
      mean[static_cast<std::size_t>(c)] = acc / count;
      double vacc = 0.0;
      for (std::int64_t b = 0; b < bsz; ++b) {
        const double* row = xv.data() + (b * ch + c) * t_len;
        for (std::int64_t t = 0; t < t_len; ++t) {
          const double d = row[t] - mean[static_cast<std::size_t>(c)];
          vacc += d * d;
        }
      }
      var[static_cast<std::size_t>(c)] = vacc / count;
      // unbiased variance feeds the running estimate
      const double unbiased = count > 1.0 ? vacc / (count - 1.0) : vacc;
      state->running_mean[static_cast<std::size_t>(c)] =
          (1.0 - momentum) * state->running_mean[static_cast<std::size_t>(c)] +
          momentum * mean[static_cast<std::size_t>(c)];
      state->running_var[static_cast<std::size_t>(c)] =
          (1.0 - momentum) * state->running_var[static_cast<std::size_t>(c)] + momentum * unbiased;
    }
  } else {
    mean = state->running_mean;
    var = state->running_var;
  }
  std::vector<double> out(xv.size());
  for (std::int64_t b = 0; b < bsz; ++b) {
    for (std::int64_t c = 0; c < ch; ++c) {
      const double inv = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
      const double g = gamma.values()[static_cast<std::size_t>(c)];
      const double be = beta.values()[static_cast<std::size_t>(c)];
      const double mu = mean[static_cast<std::size_t>(c)];
      const double* row = xv.data() + (b * ch + c) * t_len;
      double* orow = out.data() + (b * ch + c) * t_len;
      for (std::int64_t t = 0; t < t_len; ++t) orow[t] = (row[t] - mu) * inv * g + be;
    }
  }
  auto xn = x.node().get();
  auto gn = gamma.node().get();
  auto bn = beta.node().get();
  auto mean_sh = std::make_shared<std::vector<double>>(std::move(mean));
  auto var_sh = std::make_shared<std::vector<double>>(std::move(var));
  return Tensor(detail::make_op(
      x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [xn, gn, bn, bsz, ch, t_len, eps, train, mean_sh, var_sh](TensorNode& self) {
        const double count = static_cast<double>(bsz * t_len);
        for (std::int64_t c = 0; c < ch; ++c) {
          const double mu = (*mean_sh)[static_cast<std::size_t>(c)];
          const double inv = 1.0 / std::sqrt((*var_sh)[static_cast<std::size_t>(c)] + eps);
          const double g = gn->value[static_cast<std::size_t>(c)];
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::int64_t b = 0; b < bsz; ++b) {
            const double* xrow = xn->value.data() + (b * ch + c) * t_len;
            const double* grow = self.grad.data() + (b * ch + c) * t_len;
            for (std::int64_t t = 0; t < t_len; ++t) {
              sum_dy += grow[t];
              sum_dy_xhat += grow[t] * (xrow[t] - mu) * inv;
            }
          }
          if (gn->requires_grad) {
            gn->ensure_grad();
            gn->grad[static_cast<std::size_t>(c)] += sum_dy_xhat;
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            bn->grad[static_cast<std::size_t>(c)] += sum_dy;
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            for (std::int64_t b = 0; b < bsz; ++b) {
              const double* xrow = xn->value.data() + (b * ch + c) * t_len;
              const double* grow = self.grad.data() + (b * ch + c) * t_len;
              double* dxrow = xn->grad.data() + (b * ch + c) * t_len;
              for (std::int64_t t = 0; t < t_len; ++t) {
                if (train) {
                  const double xhat = (xrow[t] - mu) * inv;
                  dxrow[t] += g * inv *
                              (grow[t] - sum_dy / count - xhat * sum_dy_xhat / count);
                } else {
                  dxrow[t] += g * inv * grow[t];
                }
              }
            }
          }
        }
      }));
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

// Cross-correlation (no kernel flip): x [B, Cin, T], w [Cout, Cin, K],
// optional bias [Cout]. Output length (T + pad_left + pad_right - K)/stride + 1.
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, std::int64_t stride,
                     std::int64_t pad_left, std::int64_t pad_right) {
  if (x.rank() != 3 || w.rank() != 3 || x.dim(1) != w.dim(1)) {
    throw ShapeError("conv1d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                     shape_str(w.shape()));
  }
  const std::int64_t bsz = x.dim(0), cin = x.dim(1), t_in = x.dim(2);
  const std::int64_t cout = w.dim(0), kk = w.dim(2);
  const std::int64_t t_out = (t_in + pad_left + pad_right - kk) / stride + 1;
  if (t_out <= 0) {
    throw ShapeError("conv1d: kernel " + shape_str(w.shape()) + " longer than padded input " +
                     shape_str(x.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != cout) {
    throw ShapeError("conv1d: bias [" + std::to_string(bias.numel()) + "] vs " +
                     std::to_string(cout) + " output channels");
  }
  std::vector<double> out(static_cast<std::size_t>(bsz * cout * t_out), 0.0);
  const auto& xv = x.values();
  const auto& wv = w.values();
  for (std::int64_t b = 0; b < bsz; ++b) {
    for (std::int64_t co = 0; co < cout; ++co) {
      double* orow = out.data() + (b * cout + co) * t_out;
      if (has_bias) {
        const double bv = bias.values()[static_cast<std::size_t>(co)];
        for (std::int64_t t = 0; t < t_out; ++t) orow[t] = bv;
      }
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        const double* xrow = xv.data() + (b * cin + ci) * t_in;
        const double* wrow = wv.data() + (co * cin + ci) * kk;
        for (std::int64_t k = 0; k < kk; ++k) {
          const double wk = wrow[k];
          if (wk == 0.0) continue;
          const std::int64_t off = k - pad_left;
          // valid t: 0 <= t*stride + off < t_in
          std::int64_t t0 = off < 0 ? (-off + stride - 1) / stride : 0;
          std::int64_t t1 = std::min(t_out, off < t_in ? (t_in - off + stride - 1) / stride
                                                       : std::int64_t{0});
          for (std::int64_t t = t0; t < t1; ++t) orow[t] += wk * xrow[t * stride + off];
        }
      }
    }
  }
  auto xn = x.node().get();
  auto wn = w.node().get();
  auto bnode = has_bias ? bias.node() : NodePtr{};
  std::vector<NodePtr> parents{x.node(), w.node()};
  if (has_bias) parents.push_back(bnode);
  auto bn = bnode.get();
  return Tensor(detail::make_op(
      {bsz, cout, t_out}, std::move(out), std::move(parents),
      [xn, wn, bn, bsz, cin, cout, t_in, t_out, kk, stride, pad_left](TensorNode& self) {
        if (xn->requires_grad) xn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (bn && bn->requires_grad) bn->ensure_grad();
        for (std::int64_t b = 0; b < bsz; ++b) {
          for (std::int64_t co = 0; co < cout; ++co) {
            const double* grow = self.grad.data() + (b * cout + co) * t_out;
            if (bn && bn->requires_grad) {
              double acc = 0.0;
              for (std::int64_t t = 0; t < t_out; ++t) acc += grow[t];
              bn->grad[static_cast<std::size_t>(co)] += acc;
            }
            for (std::int64_t ci = 0; ci < cin; ++ci) {
              const double* xrow = xn->value.data() + (b * cin + ci) * t_in;
              double* dxrow = xn->requires_grad ? xn->grad.data() + (b * cin + ci) * t_in : nullptr;
              const double* wrow = wn->value.data() + (co * cin + ci) * kk;
              double* dwrow = wn->requires_grad ? wn->grad.data() + (co * cin + ci) * kk : nullptr;
              for (std::int64_t k = 0; k < kk; ++k) {
                const std::int64_t off = k - pad_left;
                std::int64_t t0 = off < 0 ? (-off + stride - 1) / stride : 0;
                std::int64_t t1 = std::min(t_out, off < t_in
                                                      ? (t_in - off + stride - 1) / stride
                                                      : std::int64_t{0});
                if (dxrow) {
                  const double wk = wrow[k];
                  for (std::int64_t t = t0; t < t1; ++t) dxrow[t * stride + off] += grow[t] * wk;
                }
                if (dwrow) {
                  double acc = 0.0;
                  for (std::int64_t t = t0; t < t1; ++t) acc += grow[t] * xrow[t * stride + off];
                  dwrow[k] += acc;
                }
              }
            }
          }
        }
      }));
}

// Max pooling over time; out-of-range positions read as -inf. Ties go to the
// earliest position so backward routing is deterministic.
inline Tensor max_pool1d(const Tensor& x, std::int64_t kernel, std::int64_t stride,
                         std::int64_t pad_left, std::int64_t pad_right) {
  if (x.rank() != 3) {
    throw ShapeError("max_pool1d: expected [batch, channels, time], got " + shape_str(x.shape()));
  }
  const std::int64_t bsz = x.dim(0), ch = x.dim(1), t_in = x.dim(2);
  const std::int64_t t_out = (t_in + pad_left + pad_right - kernel) / stride + 1;
  if (t_out <= 0) {
    throw ShapeError("max_pool1d: window " + std::to_string(kernel) + " longer than padded input " +
                     shape_str(x.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(bsz * ch * t_out));
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());
  const auto& xv = x.values();
  for (std::int64_t b = 0; b < bsz; ++b) {
    for (std::int64_t c = 0; c < ch; ++c) {
      const double* xrow = xv.data() + (b * ch + c) * t_in;
      for (std::int64_t t = 0; t < t_out; ++t) {
        double best = -std::numeric_limits<double>::infinity();
        std::int64_t best_i = -1;
        for (std::int64_t k = 0; k < kernel; ++k) {
          const std::int64_t xi = t * stride - pad_left + k;
          if (xi < 0 || xi >= t_in) continue;
          if (xrow[xi] > best) {
            best = xrow[xi];
            best_i = xi;
          }
        }
        const auto oi = static_cast<std::size_t>((b * ch + c) * t_out + t);
        out[oi] = best;
        (*argmax)[oi] = (b * ch + c) * t_in + best_i;
      }
    }
  }
  auto xn = x.node().get();
  return Tensor(detail::make_op({bsz, ch, t_out}, std::move(out), {x.node()},
                                [xn, argmax](TensorNode& self) {
                                  xn->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    xn->grad[static_cast<std::size_t>((*argmax)[i])] +=
                                        self.grad[i];
                                  }
                                }));
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.values());
  auto xn = x.node().get();
  return Tensor(detail::make_op(std::move(shape), std::move(out), {x.node()},
                                [xn](TensorNode& self) { detail::add_into(xn, self.grad); }));
}

inline Tensor transpose(const Tensor& x, int axis0, int axis1) {
  const int a0 = detail::normalize_axis(axis0, x.rank(), "transpose");
  const int a1 = detail::normalize_axis(axis1, x.rank(), "transpose");
  std::vector<int> perm(x.rank());
  for (std::size_t d = 0; d < x.rank(); ++d) perm[d] = static_cast<int>(d);
  std::swap(perm[static_cast<std::size_t>(a0)], perm[static_cast<std::size_t>(a1)]);
  Shape out_shape;
  std::vector<double> out;
  detail::permute_copy(x.shape(), x.values(), perm, out_shape, out);
  auto xn = x.node().get();
  auto in_shape = x.shape();
  return Tensor(detail::make_op(
      std::move(out_shape), std::move(out), {x.node()}, [xn, perm, in_shape](TensorNode& self) {
        // the same swap inverts itself
        Shape back_shape;
        std::vector<double> back;
        detail::permute_copy(self.shape, self.grad, perm, back_shape, back);
        detail::add_into(xn, back);
      }));
}

inline Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t stop) {
  const int ax = detail::normalize_axis(axis, x.rank(), "slice");
  const std::int64_t dim = x.dim(static_cast<std::size_t>(ax));
  if (start < 0 || stop > dim || start >= stop) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(stop) +
                     ") invalid for axis of size " + std::to_string(dim));
  }
  const auto view = detail::axis_view(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(ax)] = stop - start;
  const std::int64_t span = stop - start;
  std::vector<double> out(static_cast<std::size_t>(view.outer * span * view.inner));
  const auto& xv = x.values();
  for (std::int64_t o = 0; o < view.outer; ++o) {
    const double* src = xv.data() + (o * view.n + start) * view.inner;
    double* dst = out.data() + o * span * view.inner;
    std::copy(src, src + span * view.inner, dst);
  }
  auto xn = x.node().get();
  return Tensor(detail::make_op(
      std::move(out_shape), std::move(out), {x.node()}, [xn, view, start, span](TensorNode& self) {
        xn->ensure_grad();
        for (std::int64_t o = 0; o < view.outer; ++o) {
          const double* g = self.grad.data() + o * span * view.inner;
          double* dst = xn->grad.data() + (o * view.n + start) * view.inner;
          for (std::int64_t i = 0; i < span * view.inner; ++i) dst[i] += g[i];
        }
      }));
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int ax = detail::normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  std::int64_t total_axis = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) {
      throw ShapeError("concat: rank mismatch " + shape_str(out_shape) + " vs " + shape_str(s));
    }
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (static_cast<int>(d) != ax && s[d] != out_shape[d]) {
        throw ShapeError("concat: shapes " + shape_str(out_shape) + " and " + shape_str(s) +
                         " differ off-axis");
      }
    }
    total_axis += s[static_cast<std::size_t>(ax)];
  }
  out_shape[static_cast<std::size_t>(ax)] = total_axis;
  const auto view = detail::axis_view(out_shape, ax);
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> spans;
  for (const auto& p : parts) spans.push_back(p.dim(static_cast<std::size_t>(ax)));
  for (std::int64_t o = 0; o < view.outer; ++o) {
    std::int64_t at = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const std::int64_t span = spans[pi];
      const double* src = parts[pi].values().data() + o * span * view.inner;
      double* dst = out.data() + (o * view.n + at) * view.inner;
      std::copy(src, src + span * view.inner, dst);
      at += span;
    }
  }
  std::vector<NodePtr> parents;
  for (const auto& p : parts) parents.push_back(p.node());
  return Tensor(detail::make_op(
      std::move(out_shape), std::move(out), std::move(parents),
      [view, spans](TensorNode& self) {
        for (std::int64_t o = 0; o < view.outer; ++o) {
          std::int64_t at = 0;
          for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
            TensorNode* p = self.parents[pi].get();
            const std::int64_t span = spans[pi];
            if (p->requires_grad) {
              p->ensure_grad();
              const double* g = self.grad.data() + (o * view.n + at) * view.inner;
              double* dst = p->grad.data() + o * span * view.inner;
              for (std::int64_t i = 0; i < span * view.inner; ++i) dst[i] += g[i];
            }
            at += span;
          }
        }
      }));
}

// table [V, d] indexed by rows -> [n, d]; backward scatter-adds.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::int64_t>& indices) {
  if (table.rank() != 2) {
    throw ShapeError("embedding_lookup: table must be 2D, got " + shape_str(table.shape()));
  }
  const std::int64_t v = table.dim(0), d = table.dim(1);
  std::vector<double> out(indices.size() * static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::int64_t row = indices[i];
    if (row < 0 || row >= v) {
      throw ShapeError("embedding_lookup: index " + std::to_string(row) + " outside table " +
                       shape_str(table.shape()));
    }
    std::copy(table.values().data() + row * d, table.values().data() + (row + 1) * d,
              out.data() + static_cast<std::int64_t>(i) * d);
  }
  auto tn = table.node().get();
  auto idx = indices;
  return Tensor(detail::make_op({static_cast<std::int64_t>(indices.size()), d}, std::move(out),
                                {table.node()}, [tn, idx, d](TensorNode& self) {
                                  tn->ensure_grad();
                                  for (std::size_t i = 0; i < idx.size(); ++i) {
                                    const double* g =
                                        self.grad.data() + static_cast<std::int64_t>(i) * d;
                                    double* dst = tn->grad.data() + idx[i] * d;
                                    for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
                                  }
                                }));
}

// x -> [copies, x...]; backward sums over the new leading axis.
inline Tensor stack_batch(const Tensor& x, std::int64_t copies) {
  Shape out_shape;
  out_shape.push_back(copies);
  for (auto d : x.shape()) out_shape.push_back(d);
  const std::size_t n = x.values().size();
  std::vector<double> out(n * static_cast<std::size_t>(copies));
  for (std::int64_t b = 0; b < copies; ++b) {
    std::copy(x.values().begin(), x.values().end(), out.begin() + static_cast<std::int64_t>(n) * b);
  }
  auto xn = x.node().get();
  return Tensor(detail::make_op(std::move(out_shape), std::move(out), {x.node()},
                                [xn, copies, n](TensorNode& self) {
                                  xn->ensure_grad();
                                  for (std::int64_t b = 0; b < copies; ++b) {
                                    const double* g = self.grad.data() + static_cast<std::int64_t>(n) * b;
                                    for (std::size_t i = 0; i < n; ++i) xn->grad[i] += g[i];
                                  }
                                }));
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  auto xn = x.node().get();
  return Tensor(detail::make_op({1}, {acc}, {x.node()}, [xn](TensorNode& self) {
    xn->ensure_grad();
    const double g = self.grad[0];
    for (double& d : xn->grad) d += g;
  }));
}

inline Tensor sum(const Tensor& x, int axis) {
  const int ax = detail::normalize_axis(axis, x.rank(), "sum");
  const auto view = detail::axis_view(x.shape(), ax);
  Shape out_shape;
  for (std::size_t d = 0; d < x.rank(); ++d) {
    if (static_cast<int>(d) != ax) out_shape.push_back(x.shape()[d]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> out(static_cast<std::size_t>(view.outer * view.inner), 0.0);
  const auto& xv = x.values();
  for (std::int64_t o = 0; o < view.outer; ++o) {
    for (std::int64_t t = 0; t < view.n; ++t) {
      const double* src = xv.data() + (o * view.n + t) * view.inner;
      double* dst = out.data() + o * view.inner;
      for (std::int64_t i = 0; i < view.inner; ++i) dst[i] += src[i];
    }
  }
  auto xn = x.node().get();
  return Tensor(detail::make_op(std::move(out_shape), std::move(out), {x.node()},
                                [xn, view](TensorNode& self) {
                                  xn->ensure_grad();
                                  for (std::int64_t o = 0; o < view.outer; ++o) {
                                    const double* g = self.grad.data() + o * view.inner;
                                    for (std::int64_t t = 0; t < view.n; ++t) {
                                      double* dst = xn->grad.data() + (o * view.n + t) * view.inner;
                                      for (std::int64_t i = 0; i < view.inner; ++i) dst[i] += g[i];
                                    }
                                  }
                                }));
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

inline Tensor mean(const Tensor& x, int axis) {
  const int ax = detail::normalize_axis(axis, x.rank(), "mean");
  return scale(sum(x, ax), 1.0 / static_cast<double>(x.dim(static_cast<std::size_t>(ax))));
}

// ---------------------------------------------------------------------------

inline void check_all_finite(const Tensor& t, const char* what) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string(what) + ": non-finite value in tensor of shape " +
                           shape_str(t.shape()));
    }
  }
}

}  // namespace detrtime
