#include <cstdlib>
#include <string_view>

#include "unembed/kernels.hpp"

namespace unembed::kernels {

const Ops& active_ops() {
  static const Ops* selected = [] {
    const char* env = std::getenv("UNEMBED_KERNELS");
    const Ops* avx2 = avx2_ops();
    if (env) {
      std::string_view want(env);
      if (want == "scalar") return &scalar_ops();
      if (want == "avx2" && avx2) return avx2;
    }
    return avx2 ? avx2 : &scalar_ops();
  }();
  return *selected;
}

std::vector<const Ops*> available_ops() {
  std::vector<const Ops*> all{&scalar_ops()};
  if (const Ops* v = avx2_ops()) all.push_back(v);
  return all;
}

}  // namespace unembed::kernels
