#pragma once

#include <cstddef>
#include <vector>

namespace unembed::kernels {

// Inner-loop kernels behind the victim evaluation and attack hot paths.
// A scalar reference implementation always exists; an AVX2/FMA/F16C variant
// is selected at runtime when the CPU supports it. The two rounding kernels
// are bit-exact across variants; dot/matvec may differ by accumulation order
// and are equivalence-tested to tight relative tolerances. argmax is exact
// (ties resolve to the lowest index in every variant).
struct Ops {
  const char* name;
  double (*dot_f64)(const double* a, const double* b, size_t n);
  float (*dot_f32)(const float* a, const float* b, size_t n);
  // m is rows x cols, row-major
  void (*matvec_f64)(const double* m, size_t rows, size_t cols, const double* v, double* out);
  void (*matvec_f32)(const float* m, size_t rows, size_t cols, const float* v, float* out);
  size_t (*argmax)(const double* x, size_t n);
  void (*round_fp16)(const double* in, double* out, size_t n);
  void (*round_fp32)(const double* in, double* out, size_t n);
};

const Ops& scalar_ops();

// nullptr when the CPU lacks AVX2/FMA/F16C (or on non-x86 builds).
const Ops* avx2_ops();

// Runtime-selected kernel set. UNEMBED_KERNELS=scalar|avx2 overrides.
const Ops& active_ops();

std::vector<const Ops*> available_ops();

}  // namespace unembed::kernels
