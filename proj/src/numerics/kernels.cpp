#include "vipa/numerics/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vipa::kernels {

namespace {

template <typename T>
inline void gemm_row(const GemmArgs& g, const T* a, const T* b, T* c, std::size_t i) {
  const std::size_t m = g.m, n = g.n, k = g.k;
  T* ci = c + i * n;
  if (!g.trans_b) {
    if (!g.accumulate) std::fill(ci, ci + n, T(0));
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = g.trans_a ? a[p * m + i] : a[i * k + p];
      if (aip == T(0)) continue;
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
    return;
  }
  for (std::size_t j = 0; j < n; ++j) {
    const T* bj = b + j * k;
    T sum = 0;
    if (g.trans_a) {
      for (std::size_t p = 0; p < k; ++p) sum += a[p * m + i] * bj[p];
    } else {
      const T* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) sum += ai[p] * bj[p];
    }
    ci[j] = g.accumulate ? ci[j] + sum : sum;
  }
}

template <typename T>
inline void attention_row(const AttentionArgs& at, const T* q, const T* k, const T* v, const T* mask_bias,
                          T* probs, T* out, std::size_t h, std::size_t i) {
  const std::size_t hd = at.dim / at.heads, off = h * hd, nk = at.nk, dim = at.dim;
  T* p = probs + (h * at.nq + i) * nk;
  const T* qi = q + i * dim + off;
  const T scale = static_cast<T>(at.scale);
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < nk; ++j) {
    const T* kj = k + j * dim + off;
    T s = 0;
    for (std::size_t d = 0; d < hd; ++d) s += qi[d] * kj[d];
    s *= scale;
    if (mask_bias) s += mask_bias[i * nk + j];
    p[j] = s;
    mx = std::max(mx, s);
  }
  T total = 0;
  for (std::size_t j = 0; j < nk; ++j) {
    p[j] = std::exp(p[j] - mx);
    total += p[j];
  }
  for (std::size_t j = 0; j < nk; ++j) p[j] /= total;
  T* oi = out + i * dim + off;
  std::fill(oi, oi + hd, T(0));
  for (std::size_t j = 0; j < nk; ++j) {
    if (p[j] == T(0)) continue;
    const T* vj = v + j * dim + off;
    for (std::size_t d = 0; d < hd; ++d) oi[d] += p[j] * vj[d];
  }
}

template <typename T>
inline void attention_head_backward(const AttentionArgs& at, const T* q, const T* k, const T* v, const T* probs,
                                    const T* dout, T* dq, T* dk, T* dv, std::size_t h) {
  const std::size_t hd = at.dim / at.heads, off = h * hd, nk = at.nk, dim = at.dim;
  const T scale = static_cast<T>(at.scale);
  std::vector<T> ds(nk);
  for (std::size_t i = 0; i < at.nq; ++i) {
    const T* p = probs + (h * at.nq + i) * nk;
    const T* doi = dout + i * dim + off;
    T dot = 0;
    for (std::size_t j = 0; j < nk; ++j) {
      const T* vj = v + j * dim + off;
      T dp = 0;
      for (std::size_t d = 0; d < hd; ++d) dp += doi[d] * vj[d];
      ds[j] = dp;
      dot += p[j] * dp;
    }
    for (std::size_t j = 0; j < nk; ++j) ds[j] = p[j] * (ds[j] - dot) * scale;
    const T* qi = q + i * dim + off;
    for (std::size_t j = 0; j < nk; ++j) {
      if (p[j] == T(0)) continue;
      const T* kj = k + j * dim + off;
      if (dq) {
        T* dqi = dq + i * dim + off;
        for (std::size_t d = 0; d < hd; ++d) dqi[d] += ds[j] * kj[d];
      }
      if (dk) {
        T* dkj = dk + j * dim + off;
        for (std::size_t d = 0; d < hd; ++d) dkj[d] += ds[j] * qi[d];
      }
      if (dv) {
        T* dvj = dv + j * dim + off;
        for (std::size_t d = 0; d < hd; ++d) dvj[d] += p[j] * doi[d];
      }
    }
  }
}

}  // namespace

namespace serial {

template <typename T>
void gemm(const GemmArgs& args, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < args.m; ++i) gemm_row(args, a, b, c, i);
}

template <typename T>
void attention_forward(const AttentionArgs& args, const T* q, const T* k, const T* v, const T* mask_bias,
                       T* probs, T* out) {
  for (std::size_t h = 0; h < args.heads; ++h)
    for (std::size_t i = 0; i < args.nq; ++i) attention_row(args, q, k, v, mask_bias, probs, out, h, i);
}

template <typename T>
void attention_backward(const AttentionArgs& args, const T* q, const T* k, const T* v, const T* probs,
                        const T* dout, T* dq, T* dk, T* dv) {
  for (std::size_t h = 0; h < args.heads; ++h) attention_head_backward(args, q, k, v, probs, dout, dq, dk, dv, h);
}

template void gemm<float>(const GemmArgs&, const float*, const float*, float*);
template void gemm<double>(const GemmArgs&, const double*, const double*, double*);
template void attention_forward<float>(const AttentionArgs&, const float*, const float*, const float*,
                                       const float*, float*, float*);
template void attention_forward<double>(const AttentionArgs&, const double*, const double*, const double*,
                                        const double*, double*, double*);
template void attention_backward<float>(const AttentionArgs&, const float*, const float*, const float*,
                                        const float*, const float*, float*, float*, float*);
template void attention_backward<double>(const AttentionArgs&, const double*, const double*, const double*,
                                         const double*, const double*, double*, double*, double*);

}  // namespace serial

namespace parallel {

// Small problems stay on the calling thread; the fork/join cost dominates.
constexpr std::size_t kParallelWork = 1 << 15;

template <typename T>
void gemm(const GemmArgs& args, const T* a, const T* b, T* c) {
  const auto rows = static_cast<std::ptrdiff_t>(args.m);
  [[maybe_unused]] const bool big = args.m * args.n * args.k >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
  for (std::ptrdiff_t i = 0; i < rows; ++i) gemm_row(args, a, b, c, static_cast<std::size_t>(i));
}

template <typename T>
void attention_forward(const AttentionArgs& args, const T* q, const T* k, const T* v, const T* mask_bias,
                       T* probs, T* out) {
  const auto total = static_cast<std::ptrdiff_t>(args.heads * args.nq);
  [[maybe_unused]] const bool big = args.nq * args.nk * args.dim >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
  for (std::ptrdiff_t t = 0; t < total; ++t) {
    const auto h = static_cast<std::size_t>(t) / args.nq;
    const auto i = static_cast<std::size_t>(t) % args.nq;
    attention_row(args, q, k, v, mask_bias, probs, out, h, i);
  }
}

template <typename T>
void attention_backward(const AttentionArgs& args, const T* q, const T* k, const T* v, const T* probs,
                        const T* dout, T* dq, T* dk, T* dv) {
  const auto heads = static_cast<std::ptrdiff_t>(args.heads);
  [[maybe_unused]] const bool big = args.nq * args.nk * args.dim >= kParallelWork;
#pragma omp parallel for schedule(static) if (big)
  for (std::ptrdiff_t h = 0; h < heads; ++h)
    attention_head_backward(args, q, k, v, probs, dout, dq, dk, dv, static_cast<std::size_t>(h));
}

template void gemm<float>(const GemmArgs&, const float*, const float*, float*);
template void gemm<double>(const GemmArgs&, const double*, const double*, double*);
template void attention_forward<float>(const AttentionArgs&, const float*, const float*, const float*,
                                       const float*, float*, float*);
template void attention_forward<double>(const AttentionArgs&, const double*, const double*, const double*,
                                        const double*, double*, double*);
template void attention_backward<float>(const AttentionArgs&, const float*, const float*, const float*,
                                        const float*, const float*, float*, float*, float*);
template void attention_backward<double>(const AttentionArgs&, const double*, const double*, const double*,
                                         const double*, const double*, double*, double*, double*);

}  // namespace parallel

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace vipa::kernels
