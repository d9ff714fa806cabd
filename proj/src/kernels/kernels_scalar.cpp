#include "unembed/fp16.hpp"
#include "unembed/kernels.hpp"

namespace unembed::kernels {
namespace {

double dot_f64_scalar(const double* a, const double* b, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

float dot_f32_scalar(const float* a, const float* b, size_t n) {
  float acc = 0.0f;
  for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void matvec_f64_scalar(const double* m, size_t rows, size_t cols, const double* v, double* out) {
  for (size_t r = 0; r < rows; ++r) out[r] = dot_f64_scalar(m + r * cols, v, cols);
}

void matvec_f32_scalar(const float* m, size_t rows, size_t cols, const float* v, float* out) {
  for (size_t r = 0; r < rows; ++r) out[r] = dot_f32_scalar(m + r * cols, v, cols);
}

size_t argmax_scalar(const double* x, size_t n) {
  size_t best = 0;
  for (size_t i = 1; i < n; ++i)
    if (x[i] > x[best]) best = i;
  return best;
}

void round_fp16_scalar(const double* in, double* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = round_to_half(in[i]);
}

void round_fp32_scalar(const double* in, double* out, size_t n) {
  for (size_t i = 0; i < n; ++i) out[i] = round_to_float(in[i]);
}

}  // namespace

const Ops& scalar_ops() {
  static const Ops ops{"scalar",          dot_f64_scalar,   dot_f32_scalar,
                       matvec_f64_scalar, matvec_f32_scalar, argmax_scalar,
                       round_fp16_scalar, round_fp32_scalar};
  return ops;
}

}  // namespace unembed::kernels
