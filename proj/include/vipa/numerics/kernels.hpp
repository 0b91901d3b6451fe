#pragma once

#include <cstddef>

// Dense compute kernels. Each kernel exists twice: a plain serial reference in
// `serial` and an OpenMP version in `parallel` that partitions work so every
// output element is produced by one thread with the serial accumulation order.
// The two are therefore bit-identical, which the kernel tests rely on.

namespace vipa::kernels {

/// C[m x n] (+)= op(A) * op(B), row-major. op(A) is m x k, op(B) is k x n.
/// When `accumulate` is false C is overwritten.
struct GemmArgs {
  bool trans_a = false;
  bool trans_b = false;
  bool accumulate = false;
  std::size_t m = 0, n = 0, k = 0;
};

/// Scaled dot-product attention over `heads` column groups of width
/// dim / heads. `mask_bias`, when non-null, is an additive [nq x nk] term
/// shared by every head. `probs` receives [heads x nq x nk].
struct AttentionArgs {
  std::size_t nq = 0, nk = 0, dim = 0, heads = 1;
  double scale = 1.0;
};

namespace serial {
template <typename T>
void gemm(const GemmArgs& args, const T* a, const T* b, T* c);
template <typename T>
void attention_forward(const AttentionArgs& args, const T* q, const T* k, const T* v, const T* mask_bias,
                       T* probs, T* out);
/// Accumulates into dq/dk/dv (any may be null).
template <typename T>
void attention_backward(const AttentionArgs& args, const T* q, const T* k, const T* v, const T* probs,
                        const T* dout, T* dq, T* dk, T* dv);
}  // namespace serial

namespace parallel {
template <typename T>
void gemm(const GemmArgs& args, const T* a, const T* b, T* c);
template <typename T>
void attention_forward(const AttentionArgs& args, const T* q, const T* k, const T* v, const T* mask_bias,
                       T* probs, T* out);
template <typename T>
void attention_backward(const AttentionArgs& args, const T* q, const T* k, const T* v, const T* probs,
                        const T* dout, T* dq, T* dk, T* dv);
}  // namespace parallel

/// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace vipa::kernels
