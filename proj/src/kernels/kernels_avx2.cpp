#include "unembed/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

namespace unembed::kernels {
namespace {

double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

double dot_f64_avx2(const double* a, const double* b, size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

float dot_f32_avx2(const float* a, const float* b, size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8)
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
  float acc = hsum(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void matvec_f64_avx2(const double* m, size_t rows, size_t cols, const double* v, double* out) {
  for (size_t r = 0; r < rows; ++r) out[r] = dot_f64_avx2(m + r * cols, v, cols);
}

void matvec_f32_avx2(const float* m, size_t rows, size_t cols, const float* v, float* out) {
  for (size_t r = 0; r < rows; ++r) out[r] = dot_f32_avx2(m + r * cols, v, cols);
}

size_t argmax_avx2(const double* x, size_t n) {
  // Exact: find the maximum value, then the first index holding it.
  if (n == 0) return 0;
  size_t i = 0;
  __m256d best = _mm256_set1_pd(x[0]);
  for (; i + 4 <= n; i += 4) best = _mm256_max_pd(best, _mm256_loadu_pd(x + i));
  double m4[4];
  _mm256_storeu_pd(m4, best);
  double m = m4[0];
  for (int k = 1; k < 4; ++k)
    if (m4[k] > m) m = m4[k];
  for (; i < n; ++i)
    if (x[i] > m) m = x[i];
  for (size_t j = 0; j < n; ++j)
    if (x[j] == m) return j;
  return 0;
}

void round_fp16_avx2(const double* in, double* out, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m128 f = _mm256_cvtpd_ps(_mm256_loadu_pd(in + i));
    __m128i h = _mm_cvtps_ph(f, _MM_FROUND_TO_NEAREST_INT);
    __m128 g = _mm_cvtph_ps(h);
    _mm256_storeu_pd(out + i, _mm256_cvtps_pd(g));
  }
  for (; i < n; ++i) {
    __m128 f = _mm_set_ss(static_cast<float>(in[i]));
    __m128i h = _mm_cvtps_ph(f, _MM_FROUND_TO_NEAREST_INT);
    out[i] = static_cast<double>(_mm_cvtss_f32(_mm_cvtph_ps(h)));
  }
}

void round_fp32_avx2(const double* in, double* out, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m128 f = _mm256_cvtpd_ps(_mm256_loadu_pd(in + i));
    _mm256_storeu_pd(out + i, _mm256_cvtps_pd(f));
  }
  for (; i < n; ++i) out[i] = static_cast<double>(static_cast<float>(in[i]));
}

}  // namespace

const Ops* avx2_ops() {
  static const bool supported = __builtin_cpu_supports("avx2") &&
                                __builtin_cpu_supports("fma") &&
                                __builtin_cpu_supports("f16c");
  if (!supported) return nullptr;
  static const Ops ops{"avx2",          dot_f64_avx2,   dot_f32_avx2,
                       matvec_f64_avx2, matvec_f32_avx2, argmax_avx2,
                       round_fp16_avx2, round_fp32_avx2};
  return &ops;
}

}  // namespace unembed::kernels

#else

namespace unembed::kernels {
const Ops* avx2_ops() { return nullptr; }
}  // namespace unembed::kernels

#endif
