#include "vipa/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "vipa/numerics/kernels.hpp"

namespace vipa::ops {

namespace {

template <typename T>
using Node = TensorNode<T>;

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (T x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

template <typename T>
Tensor<T> record(Shape shape, std::vector<T> value, std::initializer_list<const Tensor<T>*> inputs,
                 typename Node<T>::BackwardFn fn, const char* op) {
  check_finite(value, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto* t : inputs) any = any || (t->defined() && t->requires_grad());
    if (any) {
      node->requires_grad = true;
      for (const auto* t : inputs) {
        if (t->defined()) node->parents.push_back(t->node());
      }
      node->backward_fn = std::move(fn);
    }
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

template <typename T>
void require_matrix(const Tensor<T>& a, const char* op) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
}

template <typename T>
void require_scalar(const Tensor<T>& s, const char* op) {
  if (s.numel() != 1) throw DimensionError(std::string(op) + ": expected a scalar, got " + shape_string(s.shape()));
}

// Elementwise op with derivative expressed via input x and output y.
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, F f, D df, const char* op) {
  std::vector<T> out(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return record<T>(x.shape(), std::move(out), {&x}, [df](Node<T>& self) {
    auto g = grad_target(*self.parents[0]);
    if (g.empty()) return;
    const auto& xin = self.parents[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(xin[i], self.value[i]);
  }, op);
}

template <typename T>
kernels::GemmArgs gemm_args(bool ta, bool tb, bool acc, std::size_t m, std::size_t n, std::size_t k) {
  kernels::GemmArgs g;
  g.trans_a = ta;
  g.trans_b = tb;
  g.accumulate = acc;
  g.m = m;
  g.n = n;
  g.k = k;
  return g;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return record<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      auto g = grad_target(*p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  }, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return record<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    auto ga = grad_target(*self.parents[0]);
    auto gb = grad_target(*self.parents[1]);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
  }, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return record<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    auto ga = grad_target(pa);
    auto gb = grad_target(pb);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * pb.value[i];
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * pa.value[i];
  }, "mul");
}

template <typename T>
Tensor<T> add_row_broadcast(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t r = x.rows(), c = x.cols();
  if (bias.numel() != c) {
    throw DimensionError("add_row_broadcast: bias " + shape_string(bias.shape()) + " vs columns of " +
                         shape_string(x.shape()));
  }
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.values()[i * c + j] + bias.values()[j];
  return record<T>(x.shape(), std::move(out), {&x, &bias}, [r, c](Node<T>& self) {
    auto gx = grad_target(*self.parents[0]);
    auto gb = grad_target(*self.parents[1]);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    if (!gb.empty())
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gb[j] += self.grad[i * c + j];
  }, "add_row_broadcast");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary(a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; }, "scale");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  return unary(a, [offset](T x) { return x + offset; }, [](T, T) { return T(1); }, "add_scalar");
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s) {
  require_scalar(s, "mul_scalar");
  const T sv = s.item();
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * sv;
  return record<T>(a.shape(), std::move(out), {&a, &s}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& ps = *self.parents[1];
    auto ga = grad_target(pa);
    auto gs = grad_target(ps);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * ps.value[0];
    if (!gs.empty()) {
      T acc = 0;
      for (std::size_t i = 0; i < pa.value.size(); ++i) acc += self.grad[i] * pa.value[i];
      gs[0] += acc;
    }
  }, "mul_scalar");
}

template <typename T>
Tensor<T> div_scalar(const Tensor<T>& a, const Tensor<T>& s) {
  require_scalar(s, "div_scalar");
  const T sv = s.item();
  if (sv == T(0)) throw NumericError("div_scalar: division by zero");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] / sv;
  return record<T>(a.shape(), std::move(out), {&a, &s}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& ps = *self.parents[1];
    const T sv = ps.value[0];
    auto ga = grad_target(pa);
    auto gs = grad_target(ps);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] / sv;
    if (!gs.empty()) {
      T acc = 0;
      for (std::size_t i = 0; i < pa.value.size(); ++i) acc += self.grad[i] * pa.value[i];
      gs[0] -= acc / (sv * sv);
    }
  }, "div_scalar");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.values()) total += v;
  return record<T>(Shape{}, {total}, {&a}, [](Node<T>& self) {
    auto g = grad_target(*self.parents[0]);
    for (auto& x : g) x += self.grad[0];
  }, "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<T> out(m * n);
  kernels::parallel::gemm(gemm_args<T>(false, false, false, m, n, k), a.values().data(), b.values().data(),
                          out.data());
  return record<T>(Shape{m, n}, std::move(out), {&a, &b}, [m, n, k](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    auto ga = grad_target(pa);
    auto gb = grad_target(pb);
    // dA = dC * B^T, dB = A^T * dC
    if (!ga.empty())
      kernels::parallel::gemm(gemm_args<T>(false, true, true, m, k, n), self.grad.data(), pb.value.data(),
                              ga.data());
    if (!gb.empty())
      kernels::parallel::gemm(gemm_args<T>(true, false, true, k, n, m), pa.value.data(), self.grad.data(),
                              gb.data());
  }, "matmul");
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()) + "^T");
  }
  std::vector<T> out(m * n);
  kernels::parallel::gemm(gemm_args<T>(false, true, false, m, n, k), a.values().data(), b.values().data(),
                          out.data());
  return record<T>(Shape{m, n}, std::move(out), {&a, &b}, [m, n, k](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    auto ga = grad_target(pa);
    auto gb = grad_target(pb);
    // dA = dC * B, dB = dC^T * A
    if (!ga.empty())
      kernels::parallel::gemm(gemm_args<T>(false, false, true, m, k, n), self.grad.data(), pb.value.data(),
                              ga.data());
    if (!gb.empty())
      kernels::parallel::gemm(gemm_args<T>(true, false, true, n, k, m), self.grad.data(), pa.value.data(),
                              gb.data());
  }, "matmul_nt");
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_matrix(weight, "linear");
  const std::size_t n = x.rows(), in = x.cols(), out_dim = weight.shape()[0];
  if (weight.shape()[1] != in) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(weight.shape()));
  }
  if (bias.defined() && bias.numel() != out_dim) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " vs weight " + shape_string(weight.shape()));
  }
  std::vector<T> out(n * out_dim);
  kernels::parallel::gemm(gemm_args<T>(false, true, false, n, out_dim, in), x.values().data(),
                          weight.values().data(), out.data());
  if (bias.defined()) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < out_dim; ++j) out[i * out_dim + j] += bias.values()[j];
  }
  Shape shape = x.shape();
  if (shape.empty()) shape = {1};
  shape.back() = out_dim;
  const bool has_bias = bias.defined();
  return record<T>(std::move(shape), std::move(out), {&x, &weight, &bias},
                   [n, in, out_dim, has_bias](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto gx = grad_target(px);
    auto gw = grad_target(pw);
    if (!gx.empty())
      kernels::parallel::gemm(gemm_args<T>(false, false, true, n, in, out_dim), self.grad.data(), pw.value.data(),
                              gx.data());
    if (!gw.empty())
      kernels::parallel::gemm(gemm_args<T>(true, false, true, out_dim, in, n), self.grad.data(), px.value.data(),
                              gw.data());
    if (has_bias) {
      auto gb = grad_target(*self.parents[2]);
      if (!gb.empty())
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < out_dim; ++j) gb[j] += self.grad[i * out_dim + j];
    }
  }, "linear");
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  if (x.rank() > 2) throw DimensionError("softmax supports rank <= 2, got " + shape_string(x.shape()));
  const int rank = static_cast<int>(x.rank());
  if (axis < 0) axis += std::max(rank, 1);
  if (axis < 0 || axis >= std::max(rank, 1)) throw DimensionError("softmax: axis out of range");
  const std::size_t r = x.rows(), c = x.cols();
  // Slices are either rows (axis = last) or columns (axis 0 of a matrix).
  const bool along_cols = rank == 2 && axis == 0;
  const std::size_t slices = along_cols ? c : r, len = along_cols ? r : c;
  const std::size_t stride = along_cols ? c : 1, step = along_cols ? 1 : c;
  std::vector<T> out(x.numel());
  auto xv = x.values();
  for (std::size_t s = 0; s < slices; ++s) {
    const std::size_t base = s * step;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, xv[base + t * stride]);
    T total = 0;
    for (std::size_t t = 0; t < len; ++t) {
      T e = std::exp(xv[base + t * stride] - mx);
      out[base + t * stride] = e;
      total += e;
    }
    for (std::size_t t = 0; t < len; ++t) out[base + t * stride] /= total;
  }
  return record<T>(x.shape(), std::move(out), {&x}, [slices, len, stride, step](Node<T>& self) {
    auto g = grad_target(*self.parents[0]);
    if (g.empty()) return;
    for (std::size_t s = 0; s < slices; ++s) {
      const std::size_t base = s * step;
      T dot = 0;
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t i = base + t * stride;
        dot += self.grad[i] * self.value[i];
      }
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t i = base + t * stride;
        g[i] += self.value[i] * (self.grad[i] - dot);
      }
    }
  }, "softmax");
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; }, "exp");
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; }, "log");
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(
      x,
      [](T v) {
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](T v, T) {
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      "softplus");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); }, "relu");
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  static constexpr T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T kA = static_cast<T>(0.044715);
  return unary(
      x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v))); },
      [](T v, T) {
        const T u = kC * (v + kA * v * v * v);
        const T t = std::tanh(u);
        const T du = kC * (T(1) + T(3) * kA * v * v);
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
      },
      "gelu");
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.numel() != c || beta.numel() != c) throw DimensionError("layer_norm: affine size vs " + shape_string(x.shape()));
  std::vector<T> out(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(r);
  auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i) {
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += xv[i * c + j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const T d = xv[i * c + j] - mu;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (xv[i * c + j] - mu) * is;
      (*xhat)[i * c + j] = h;
      out[i * c + j] = h * gamma.values()[j] + beta.values()[j];
    }
  }
  return record<T>(x.shape(), std::move(out), {&x, &gamma, &beta}, [r, c, xhat, inv_std](Node<T>& self) {
    auto gx = grad_target(*self.parents[0]);
    auto& pg = *self.parents[1];
    auto gg = grad_target(pg);
    auto gb = grad_target(*self.parents[2]);
    for (std::size_t i = 0; i < r; ++i) {
      const T* dy = self.grad.data() + i * c;
      const T* h = xhat->data() + i * c;
      if (!gg.empty())
        for (std::size_t j = 0; j < c; ++j) gg[j] += dy[j] * h[j];
      if (!gb.empty())
        for (std::size_t j = 0; j < c; ++j) gb[j] += dy[j];
      if (gx.empty()) continue;
      T mean_dh = 0, mean_dh_h = 0;
      for (std::size_t j = 0; j < c; ++j) {
        const T dh = dy[j] * pg.value[j];
        mean_dh += dh;
        mean_dh_h += dh * h[j];
      }
      mean_dh /= static_cast<T>(c);
      mean_dh_h /= static_cast<T>(c);
      for (std::size_t j = 0; j < c; ++j) {
        const T dh = dy[j] * pg.value[j];
        gx[i * c + j] += (*inv_std)[i] * (dh - mean_dh - h[j] * mean_dh_h);
      }
    }
  }, "layer_norm");
}

template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x) {
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<T> out(x.numel(), T(0));
  auto norms = std::make_shared<std::vector<T>>(r, T(0));
  auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += xv[i * c + j] * xv[i * c + j];
    const T nrm = std::sqrt(s);
    (*norms)[i] = nrm;
    if (nrm == T(0)) continue;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] / nrm;
  }
  return record<T>(x.shape(), std::move(out), {&x}, [r, c, norms](Node<T>& self) {
    auto g = grad_target(*self.parents[0]);
    if (g.empty()) return;
    for (std::size_t i = 0; i < r; ++i) {
      const T nrm = (*norms)[i];
      if (nrm == T(0)) continue;
      const T* y = self.value.data() + i * c;
      const T* dy = self.grad.data() + i * c;
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += (dy[j] - y[j] * dot) / nrm;
    }
  }, "normalize_rows");
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<T> out(r * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].values();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(v.data() + i * widths[k], widths[k], out.data() + i * total + off);
    off += widths[k];
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = {r, total};
  node->value = std::move(out);
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (grad_enabled() && any) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backward_fn = [r, total, widths](Node<T>& self) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        auto g = grad_target(*self.parents[k]);
        if (!g.empty())
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += self.grad[i * total + off + j];
        off += widths[k];
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column counts differ");
    total += p.rows();
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = {total, c};
  node->value = std::move(out);
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (grad_enabled() && any) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backward_fn = [](Node<T>& self) {
      std::size_t off = 0;
      for (auto& p : self.parents) {
        auto g = grad_target(*p);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
        off += p->value.size();
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t r = x.rows(), c = x.cols();
  if (begin > end || end > c) throw DimensionError("slice_cols: range out of bounds");
  const std::size_t w = end - begin;
  std::vector<T> out(r * w);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(x.values().data() + i * c + begin, w, out.data() + i * w);
  return record<T>(Shape{r, w}, std::move(out), {&x}, [r, c, w, begin](Node<T>& self) {
    auto g = grad_target(*self.parents[0]);
    if (g.empty()) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += self.grad[i * w + j];
  }, "slice_cols");
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<T> out(idx.size() * c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= r) throw DimensionError("gather_rows: index " + std::to_string(idx[i]) + " out of range");
    std::copy_n(x.values().data() + idx[i] * c, c, out.data() + i * c);
  }
  return record<T>(Shape{idx.size(), c}, std::move(out), {&x}, [c, idx](Node<T>& self) {
    auto g = grad_target(*self.parents[0]);
    if (g.empty()) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
  }, "gather_rows");
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape, std::span<const std::size_t> index) {
  if (shape_numel(out_shape) != index.size()) throw DimensionError("gather: index size vs output shape");
  auto idx = std::make_shared<std::vector<std::size_t>>(index.begin(), index.end());
  std::vector<T> out(idx->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if ((*idx)[i] >= x.numel()) throw DimensionError("gather: index out of range");
    out[i] = x.values()[(*idx)[i]];
  }
  return record<T>(std::move(out_shape), std::move(out), {&x}, [idx](Node<T>& self) {
    auto g = grad_target(*self.parents[0]);
    if (g.empty()) return;
    for (std::size_t i = 0; i < idx->size(); ++i) g[(*idx)[i]] += self.grad[i];
  }, "gather");
}

template <typename T>
Tensor<T> mask_rows(const Tensor<T>& x, const std::vector<std::uint8_t>& keep) {
  const std::size_t r = x.rows(), c = x.cols();
  if (keep.size() != r) throw DimensionError("mask_rows: flag count vs rows");
  std::vector<T> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < r; ++i)
    if (!keep[i]) std::fill_n(out.data() + i * c, c, T(0));
  return record<T>(x.shape(), std::move(out), {&x}, [r, c, keep](Node<T>& self) {
    auto g = grad_target(*self.parents[0]);
    if (g.empty()) return;
    for (std::size_t i = 0; i < r; ++i)
      if (keep[i])
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * c + j];
  }, "mask_rows");
}

template <typename T>
Tensor<T> straight_through(const Tensor<T>& hard, const Tensor<T>& soft) {
  require_same_shape(hard, soft, "straight_through");
  std::vector<T> out(hard.values().begin(), hard.values().end());
  return record<T>(hard.shape(), std::move(out), {&hard, &soft}, [](Node<T>& self) {
    auto& ph = *self.parents[0];
    auto gs = grad_target(*self.parents[1]);
    for (std::size_t i = 0; i < gs.size(); ++i)
      if (ph.value[i] != T(0)) gs[i] += self.grad[i];
  }, "straight_through");
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t h, std::size_t w, std::size_t out_h, std::size_t out_w) {
  if (x.rows() != h * w) throw DimensionError("bilinear_resize: rows vs grid " + std::to_string(h) + "x" + std::to_string(w));
  const std::size_t c = x.cols();
  struct Tap {
    std::size_t y0, y1, x0, x1;
    T wy, wx;
  };
  auto src_coord = [](std::size_t dst, std::size_t in, std::size_t out, std::size_t& lo, std::size_t& hi, T& frac) {
    T s = (static_cast<T>(dst) + T(0.5)) * static_cast<T>(in) / static_cast<T>(out) - T(0.5);
    if (s < 0) s = 0;
    lo = std::min(static_cast<std::size_t>(s), in - 1);
    hi = std::min(lo + 1, in - 1);
    frac = s - static_cast<T>(lo);
  };
  auto taps = std::make_shared<std::vector<Tap>>(out_h * out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy)
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      Tap t{};
      src_coord(oy, h, out_h, t.y0, t.y1, t.wy);
      src_coord(ox, w, out_w, t.x0, t.x1, t.wx);
      (*taps)[oy * out_w + ox] = t;
    }
  std::vector<T> out(out_h * out_w * c);
  auto xv = x.values();
  for (std::size_t o = 0; o < taps->size(); ++o) {
    const Tap& t = (*taps)[o];
    const T w00 = (1 - t.wy) * (1 - t.wx), w01 = (1 - t.wy) * t.wx, w10 = t.wy * (1 - t.wx), w11 = t.wy * t.wx;
    for (std::size_t k = 0; k < c; ++k) {
      out[o * c + k] = w00 * xv[(t.y0 * w + t.x0) * c + k] + w01 * xv[(t.y0 * w + t.x1) * c + k] +
                       w10 * xv[(t.y1 * w + t.x0) * c + k] + w11 * xv[(t.y1 * w + t.x1) * c + k];
    }
  }
  return record<T>(Shape{out_h * out_w, c}, std::move(out), {&x}, [taps, c, w](Node<T>& self) {
    auto g = grad_target(*self.parents[0]);
    if (g.empty()) return;
    for (std::size_t o = 0; o < taps->size(); ++o) {
      const Tap& t = (*taps)[o];
      const T w00 = (1 - t.wy) * (1 - t.wx), w01 = (1 - t.wy) * t.wx, w10 = t.wy * (1 - t.wx), w11 = t.wy * t.wx;
      for (std::size_t k = 0; k < c; ++k) {
        const T d = self.grad[o * c + k];
        g[(t.y0 * w + t.x0) * c + k] += w00 * d;
        g[(t.y0 * w + t.x1) * c + k] += w01 * d;
        g[(t.y1 * w + t.x0) * c + k] += w10 * d;
        g[(t.y1 * w + t.x1) * c + k] += w11 * d;
      }
    }
  }, "bilinear_resize");
}

template <typename T>
std::vector<T> AttentionProbs<T>::head_mean() const {
  std::vector<T> out(nq * nk, T(0));
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < nq * nk; ++i) out[i] += values[h * nq * nk + i];
  for (auto& v : out) v /= static_cast<T>(heads);
  return out;
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    const std::vector<T>& mask_bias, AttentionProbs<T>* probs_out) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const std::size_t nq = q.shape()[0], nk = k.shape()[0], dim = q.shape()[1];
  if (k.shape()[1] != dim || v.shape() != k.shape()) throw DimensionError("attention: q/k/v widths differ");
  if (heads == 0 || dim % heads != 0) throw DimensionError("attention: width not divisible by head count");
  if (!mask_bias.empty() && mask_bias.size() != nq * nk) throw DimensionError("attention: mask shape");
  kernels::AttentionArgs args;
  args.nq = nq;
  args.nk = nk;
  args.dim = dim;
  args.heads = heads;
  args.scale = 1.0 / std::sqrt(static_cast<double>(dim / heads));
  auto probs = std::make_shared<std::vector<T>>(heads * nq * nk);
  std::vector<T> out(nq * dim);
  kernels::parallel::attention_forward(args, q.values().data(), k.values().data(), v.values().data(),
                                       mask_bias.empty() ? nullptr : mask_bias.data(), probs->data(), out.data());
  if (probs_out) {
    probs_out->heads = heads;
    probs_out->nq = nq;
    probs_out->nk = nk;
    probs_out->values = *probs;
  }
  return record<T>(Shape{nq, dim}, std::move(out), {&q, &k, &v}, [args, probs](Node<T>& self) {
    auto& pq = *self.parents[0];
    auto& pk = *self.parents[1];
    auto& pv = *self.parents[2];
    auto gq = grad_target(pq);
    auto gk = grad_target(pk);
    auto gv = grad_target(pv);
    kernels::parallel::attention_backward(args, pq.value.data(), pk.value.data(), pv.value.data(), probs->data(),
                                          self.grad.data(), gq.empty() ? nullptr : gq.data(),
                                          gk.empty() ? nullptr : gk.data(), gv.empty() ? nullptr : gv.data());
  }, "attention");
}

#define VIPA_INSTANTIATE_OPS(T)                                                                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> add_row_broadcast(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> scale(const Tensor<T>&, T);                                                         \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                    \
  template Tensor<T> mul_scalar(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> div_scalar(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sum(const Tensor<T>&);                                                              \
  template Tensor<T> mean(const Tensor<T>&);                                                             \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> softmax(const Tensor<T>&, int);                                                     \
  template Tensor<T> exp(const Tensor<T>&);                                                              \
  template Tensor<T> log(const Tensor<T>&);                                                              \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                          \
  template Tensor<T> softplus(const Tensor<T>&);                                                         \
  template Tensor<T> relu(const Tensor<T>&);                                                             \
  template Tensor<T> gelu(const Tensor<T>&);                                                             \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                \
  template Tensor<T> normalize_rows(const Tensor<T>&);                                                   \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                                         \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                         \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                             \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                        \
  template Tensor<T> gather(const Tensor<T>&, Shape, std::span<const std::size_t>);                      \
  template Tensor<T> mask_rows(const Tensor<T>&, const std::vector<std::uint8_t>&);                      \
  template Tensor<T> straight_through(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> bilinear_resize(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t); \
  template struct AttentionProbs<T>;                                                                     \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,        \
                               const std::vector<T>&, AttentionProbs<T>*);

VIPA_INSTANTIATE_OPS(float)
VIPA_INSTANTIATE_OPS(double)

#undef VIPA_INSTANTIATE_OPS

}  // namespace vipa::ops
