#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "unembed/errors.hpp"
#include "unembed/linalg.hpp"
#include "unembed/rng.hpp"
#include "unembed/victim.hpp"

using namespace unembed;

namespace {

// Independent numerical-rank oracle: singular values above 1e-10 * sigma_1.
int rank_oracle(const MatrixXd& m) {
  const VectorXd s = singular_values(m);
  int r = 0;
  while (r < s.size() && s[r] > s[0] * 1e-10) ++r;
  return r;
}

VictimSpec small_spec(int32_t l, int32_t h, uint64_t seed) {
  VictimSpec s;
  s.vocab_size = l;
  s.hidden_dim = h;
  s.seed = seed;
  return s;
}

TokenSeq prompt_of(uint64_t i) {
  return TokenSeq{static_cast<int32_t>(i % 7), static_cast<int32_t>((i * 13 + 1) % 50),
                  static_cast<int32_t>((i * 31 + 2) % 97)};
}

}  // namespace

TEST_CASE("construction forces the planted rank") {
  const Victim full = Victim::build(small_spec(100, 8, 1));
  CHECK(rank_oracle(MatrixXd(full.projection())) == 8);

  VictimSpec deficit = small_spec(100, 8, 1);
  deficit.planted_rank_deficit = 3;
  const Victim low = Victim::build(deficit);
  CHECK(rank_oracle(MatrixXd(low.projection())) == 5);
}

TEST_CASE("identical specs produce bit-identical victims") {
  const VictimSpec spec = small_spec(100, 8, 1);
  const Victim a = Victim::build(spec);
  const Victim b = Victim::build(spec);
  CHECK(MatrixXd(a.projection()) == MatrixXd(b.projection()));
  const TokenSeq p{1, 2, 3};
  const VectorXd za = a.logits(p), zb = b.logits(p);
  for (Eigen::Index i = 0; i < za.size(); ++i) CHECK(za[i] == zb[i]);
}

TEST_CASE("invalid specs are rejected") {
  CHECK_THROWS_AS(Victim::build(small_spec(8, 100, 1)), ConfigError);  // h >= l
  VictimSpec bad = small_spec(100, 8, 1);
  bad.planted_rank_deficit = 8;
  CHECK_THROWS_AS(Victim::build(bad), ConfigError);
  VictimSpec badq = small_spec(100, 8, 1);
  badq.weight_quantization_bits = 6;
  CHECK_THROWS_AS(Victim::build(badq), ConfigError);
  VictimSpec bads = small_spec(100, 8, 1);
  bads.spoof_target_dim = 8;
  CHECK_THROWS_AS(Victim::build(bads), ConfigError);
}

TEST_CASE("prompt validation") {
  const Victim v = Victim::build(small_spec(100, 8, 1));
  CHECK_THROWS_AS(v.logits(TokenSeq{}), InputError);
  CHECK_THROWS_AS(v.logits(TokenSeq{100}), InputError);
  CHECK_THROWS_AS(v.logits(TokenSeq{-1}), InputError);
}

TEST_CASE("200 distinct prompts give a rank-h logit matrix") {
  const int l = 100, h = 8, n = 200;
  const Victim v = Victim::build(small_spec(l, h, 3));
  MatrixXd q(n, l);
  for (int i = 0; i < n; ++i) q.row(i) = v.logits(prompt_of(i)).transpose();
  CHECK(rank_oracle(q) == h);
}

TEST_CASE("logits equal W * hidden at fp64") {
  for (NormKind norm : {NormKind::None, NormKind::RMSNorm, NormKind::LayerNorm}) {
    VictimSpec spec = small_spec(120, 16, 9);
    spec.norm_kind = norm;
    const Victim v = Victim::build(spec);
    const TokenSeq p{5, 9, 77};
    const VectorXd z = v.logits(p);
    const VectorXd ref = MatrixXd(v.projection()) * v.hidden(p);
    CHECK((z - ref).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("rmsnorm hidden states live on a sphere") {
  VictimSpec spec = small_spec(100, 16, 4);
  spec.norm_kind = NormKind::RMSNorm;
  spec.norm_bias_enabled = false;  // identity scale, no bias
  const Victim v = Victim::build(spec);
  const double r0 = v.hidden(prompt_of(0)).norm();
  for (uint64_t i = 1; i < 20; ++i)
    CHECK(std::abs(v.hidden(prompt_of(i)).norm() - r0) < 1e-9);
}

TEST_CASE("layernorm centering invariant") {
  VictimSpec spec = small_spec(100, 16, 4);
  spec.norm_kind = NormKind::LayerNorm;
  spec.norm_scale_randomized = true;

  SUBCASE("bias off") {
    spec.norm_bias_enabled = false;
    const Victim v = Victim::build(spec);
    for (uint64_t i = 0; i < 10; ++i) {
      const VectorXd g = v.hidden(prompt_of(i));
      const VectorXd unscaled = g.cwiseQuotient(v.norm_scale());
      CHECK(std::abs(unscaled.sum()) < 1e-9);
    }
  }
  SUBCASE("bias on") {
    spec.norm_bias_enabled = true;
    const Victim v = Victim::build(spec);
    for (uint64_t i = 0; i < 10; ++i) {
      const VectorXd g = v.hidden(prompt_of(i));
      const VectorXd unscaled = (g - v.norm_bias()).cwiseQuotient(v.norm_scale());
      CHECK(std::abs(unscaled.sum()) < 1e-9);
    }
  }
}

TEST_CASE("softmax of logits sums to one") {
  const Victim v = Victim::build(small_spec(500, 32, 8));
  const VectorXd z = v.logits({1, 2, 3});
  const double m = z.maxCoeff();
  const double sum = (z.array() - m).exp().sum();
  const double total = ((z.array() - m - std::log(sum)).exp()).sum();
  CHECK(std::abs(total - 1.0) < 1e-12);
}

TEST_CASE("prompt-keyed noise is deterministic per prompt") {
  VictimSpec spec = small_spec(100, 8, 2);
  spec.logit_noise_sigma = 0.1;
  const Victim v = Victim::build(spec);
  const TokenSeq p{4, 5};
  const VectorXd a = v.logits(p), b = v.logits(p);
  for (Eigen::Index i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  // and the noise is actually there
  CHECK((a - v.true_logits(p)).norm() > 1e-3);

  VictimSpec per_query = spec;
  per_query.noise_mode = NoiseMode::PerQuery;
  const Victim vq = Victim::build(per_query);
  const VectorXd c = vq.logits(p), d = vq.logits(p);
  CHECK((c - d).norm() > 1e-6);
}

TEST_CASE("reduced precision paths are deterministic and close to fp64") {
  VictimSpec spec = small_spec(256, 64, 5);
  const Victim v64 = Victim::build(spec);
  spec.precision = Precision::Fp32;
  const Victim v32 = Victim::build(spec);
  spec.precision = Precision::Fp16Emulated;
  const Victim v16 = Victim::build(spec);

  const TokenSeq p{10, 20, 30};
  const VectorXd z64 = v64.logits(p), z32 = v32.logits(p), z16 = v16.logits(p);
  const VectorXd again = v16.logits(p);
  for (Eigen::Index i = 0; i < z16.size(); ++i) CHECK(z16[i] == again[i]);

  const double scale = z64.cwiseAbs().maxCoeff();
  CHECK((z32 - z64).cwiseAbs().maxCoeff() < 1e-5 * scale + 1e-6);
  CHECK((z16 - z64).cwiseAbs().maxCoeff() < 3e-2 * scale + 1e-3);
  CHECK((z16 - z64).cwiseAbs().maxCoeff() > 0.0);  // quantization visible
}

TEST_CASE("weight quantization snaps columns to a symmetric grid") {
  VictimSpec spec = small_spec(100, 8, 6);
  spec.weight_quantization_bits = 8;
  const Victim v = Victim::build(spec);
  // quantized serving matrix reproduces through logits: z = Wq * g
  const TokenSeq p{3, 4};
  const VectorXd z = v.logits(p);
  const VectorXd ztrue = v.true_logits(p);
  CHECK((z - ztrue).cwiseAbs().maxCoeff() > 0.0);
  CHECK((z - ztrue).cwiseAbs().maxCoeff() < 0.1);
}

TEST_CASE("spoofing: orthogonal extra columns, preserved argmax, zeroed noise recovers") {
  VictimSpec spec = small_spec(400, 32, 7);
  const Victim base = Victim::build(spec);

  SUBCASE("target h+1 adds one orthogonal column") {
    const Victim sp = apply_spoofing(base, 33);
    CHECK(sp.serving_dim() == 33);
    const MatrixXd w = MatrixXd(sp.projection());
    const MatrixXd delta = w.rightCols(1);
    CHECK((MatrixXd(base.projection()).transpose() * delta).norm() < 1e-10);
    CHECK(sp.spoof_argmax_agreement() >= 0.99);
  }

  SUBCASE("noise dimensions zeroed reproduce the original logits") {
    const Victim sp = apply_spoofing(base, 48);
    const TokenSeq p{1, 2, 3};
    VectorXd g = sp.hidden(p);
    g.tail(48 - 32).setZero();
    const VectorXd z = MatrixXd(sp.projection()) * g;
    const VectorXd z0 = base.true_logits(p);
    CHECK((z - z0).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("spoofing a spoofed victim is rejected") {
    const Victim sp = apply_spoofing(base, 40);
    CHECK_THROWS_AS(apply_spoofing(sp, 64), ConfigError);
    CHECK_THROWS_AS(apply_spoofing(base, 32), ConfigError);
  }
}

TEST_CASE("config round trip") {
  VictimSpec spec = small_spec(1000, 16, 42);
  spec.norm_kind = NormKind::LayerNorm;
  spec.precision = Precision::Fp16Emulated;
  spec.planted_rank_deficit = 3;
  spec.logit_noise_sigma = 0.25;
  spec.weight_quantization_bits = 4;
  spec.spoof_target_dim = 24;
  const VictimSpec back = VictimSpec::from_config(spec.to_config());
  CHECK(back.vocab_size == spec.vocab_size);
  CHECK(back.hidden_dim == spec.hidden_dim);
  CHECK(back.seed == spec.seed);
  CHECK(back.norm_kind == spec.norm_kind);
  CHECK(back.precision == spec.precision);
  CHECK(back.planted_rank_deficit == spec.planted_rank_deficit);
  CHECK(back.logit_noise_sigma == spec.logit_noise_sigma);
  CHECK(back.weight_quantization_bits == spec.weight_quantization_bits);
  CHECK(back.spoof_target_dim == spec.spoof_target_dim);

  KvConfig bad;
  bad.set_int("vocab_size", 10);
  bad.set_int("hidden_dim", 4);
  bad.set("norm_kinds", "rmsnorm");  // typo
  CHECK_THROWS_AS(VictimSpec::from_config(bad), ConfigError);
}
