#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "unembed/api.hpp"
#include "unembed/errors.hpp"
#include "unembed/extract.hpp"
#include "unembed/rng.hpp"
#include "unembed/victim.hpp"

using namespace unembed;

namespace {

VictimSpec spec_of(int32_t l, int32_t h, uint64_t seed) {
  VictimSpec s;
  s.vocab_size = l;
  s.hidden_dim = h;
  s.seed = seed;
  return s;
}

int rank_oracle(const MatrixXd& m) {
  const VectorXd s = singular_values(m);
  int r = 0;
  while (r < s.size() && s[r] > s[0] * 1e-10) ++r;
  return r;
}

}  // namespace

TEST_CASE("collect_query_matrix: rank oracle, subsets, single row") {
  const Victim victim = Victim::build(spec_of(300, 64, 1));
  ApiSession s(victim, {ApiModeKind::AllLogits, 1});

  const QueryMatrix q = collect_query_matrix(s, 2 * 64 + 16, 7);
  CHECK(rank_oracle(q.rows) == 64);
  CHECK(extract_hidden_dim(q).dim == 64);

  // cheaper extraction: h + 8 token columns suffice
  std::vector<int32_t> subset(64 + 8);
  for (size_t i = 0; i < subset.size(); ++i) subset[i] = static_cast<int32_t>(2 * i);
  const QueryMatrix qs = collect_query_matrix(s, 2 * 64 + 16, 7, subset);
  CHECK(extract_hidden_dim(qs).dim == 64);

  const QueryMatrix q1 = collect_query_matrix(s, 1, 9);
  CHECK(rank_oracle(q1.rows) == 1);
  const DimResult d1 = extract_hidden_dim(q1);
  CHECK(d1.dim == 1);
  CHECK(d1.needs_more_queries);
}

TEST_CASE("hidden-dimension extraction at h = 256") {
  const Victim victim = Victim::build(spec_of(1024, 256, 2));
  ApiSession s(victim, {ApiModeKind::AllLogits, 1});
  const QueryMatrix q = collect_query_matrix(s, 320, 3);
  const DimResult r = extract_hidden_dim(q);
  CHECK(r.dim == 256);
}

TEST_CASE("planted deficit shifts the extracted dimension") {
  VictimSpec spec = spec_of(300, 64, 3);
  spec.planted_rank_deficit = 11;
  const Victim victim = Victim::build(spec);
  ApiSession s(victim, {ApiModeKind::AllLogits, 1});
  const AutoDimResult r = extract_hidden_dim_auto(s, 64);
  CHECK(r.dim == 53);
}

TEST_CASE("fp16 victims extract within +/- 2") {
  VictimSpec spec = spec_of(256, 64, 4);
  spec.precision = Precision::Fp16Emulated;
  const Victim victim = Victim::build(spec);
  ApiSession s(victim, {ApiModeKind::AllLogits, 1});
  const AutoDimResult r = extract_hidden_dim_auto(s, 64);
  CHECK(std::abs(r.dim - 64) <= 2);
}

TEST_CASE("auto escalation doubles n until the gap settles") {
  const Victim victim = Victim::build(spec_of(300, 64, 5));
  ApiSession s(victim, {ApiModeKind::AllLogits, 1});
  const AutoDimResult r = extract_hidden_dim_auto(s, 4);  // bad hint, still lands
  CHECK(r.dim == 64);
  CHECK(r.n_used >= 2 * 64);
}

TEST_CASE("rank monotonicity: more rows never shrink the dimension") {
  const Victim victim = Victim::build(spec_of(200, 32, 6));
  ApiSession s(victim, {ApiModeKind::AllLogits, 1});
  int prev = 0;
  for (int n : {16, 32, 80, 160}) {
    const QueryMatrix q = collect_query_matrix(s, n, 11);
    const DimResult r = extract_hidden_dim(q);
    CHECK(r.dim >= prev);
    CHECK(r.dim <= std::min<int>(n, 200));
    prev = r.dim;
  }
}

TEST_CASE("layer extraction fidelity and the random baseline") {
  const int l = 1000, h = 64, n = 2000;
  const Victim victim = Victim::build(spec_of(l, h, 7));
  const MatrixXd truth = MatrixXd(victim.projection());

  SUBCASE("fp64 logits align below 1e-10") {
    ApiSession s(victim, {ApiModeKind::AllLogits, 1});
    const QueryMatrix q = collect_query_matrix(s, n, 13);
    const StolenLayer layer = extract_layer(q, h);
    const AffineAlignment align = align_affine(layer.w, truth);
    CHECK(align.rms < 1e-10);

    // column spaces coincide to well under a microradian
    CHECK(max_principal_angle(layer.w, truth) < 1e-6);

    // a random same-shape matrix is two orders of magnitude worse
    const Victim other = Victim::build(spec_of(l, h, 9999));
    const AffineAlignment base = align_affine(MatrixXd(other.projection()), truth);
    CHECK(base.rms >= 100.0 * std::max(align.rms, 1e-12));
  }

  SUBCASE("fp16 emission keeps rms under 5e-4") {
    ApiPolicy policy;
    policy.emission = EmitPrecision::Fp16;
    ApiSession s(victim, {ApiModeKind::AllLogits, 1}, policy);
    const QueryMatrix q = collect_query_matrix(s, n, 13, {}, 8, EmitPrecision::Fp16);
    const StolenLayer layer = extract_layer(q, h);
    const AffineAlignment align = align_affine(layer.w, truth);
    CHECK(align.rms < 5e-4);
    CHECK(align.rms > 1e-9);
    const Victim other = Victim::build(spec_of(l, h, 9999));
    const AffineAlignment base = align_affine(MatrixXd(other.projection()), truth);
    CHECK(base.rms >= 100.0 * align.rms);
  }

  SUBCASE("requesting more than the numerical rank fails") {
    ApiSession s(victim, {ApiModeKind::AllLogits, 1});
    const QueryMatrix q = collect_query_matrix(s, 2 * h + 16, 13);
    CHECK_THROWS_AS(extract_layer(q, h + 4), NumericalError);
  }
}

TEST_CASE("affine alignment: identity, planted symmetry, perturbation scale") {
  Rng rng(8);
  const int l = 400, h = 16;
  MatrixXd w(l, h);
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < h; ++j) w(i, j) = rng.gaussian() / std::sqrt(double(h));

  SUBCASE("exact input gives the identity") {
    const AffineAlignment align = align_affine(w, w);
    CHECK((align.g - MatrixXd::Identity(h, h)).norm() < 1e-10);
    CHECK(align.rms < 1e-14);
  }

  SUBCASE("any invertible right factor aligns away") {
    MatrixXd g0(h, h);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < h; ++j) g0(i, j) = rng.gaussian();
    const AffineAlignment align = align_affine(w * g0, w);
    CHECK(align.rms < 1e-10);
  }

  SUBCASE("entrywise noise passes straight through to the rms") {
    MatrixXd noisy = w;
    for (int i = 0; i < l; ++i)
      for (int j = 0; j < h; ++j) noisy(i, j) += 1e-4 * rng.gaussian();
    const AffineAlignment align = align_affine(noisy, w);
    CHECK(align.rms > 0.5e-4);
    CHECK(align.rms < 1.5e-4);
  }
}

TEST_CASE("extraction rms is invariant to re-parameterizing the hidden factor") {
  Rng rng(12);
  const int l = 300, h = 8, n = 64;
  MatrixXd w(l, h), hidden(h, n), g0(h, h);
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < h; ++j) w(i, j) = rng.gaussian() / std::sqrt(double(h));
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < n; ++j) hidden(i, j) = rng.gaussian();
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < h; ++j) g0(i, j) = rng.gaussian();

  auto rms_of = [&](const MatrixXd& hidden_factor) {
    QueryMatrix q;
    q.rows = (w * hidden_factor).transpose();
    q.token_ids.resize(l);
    for (int32_t t = 0; t < l; ++t) q.token_ids[t] = t;
    return align_affine(extract_layer(q, h).w, w).rms;
  };

  const double rms_plain = rms_of(hidden);
  const double rms_mixed = rms_of(g0 * hidden);
  CHECK(rms_plain < 1e-10);
  CHECK(rms_mixed < 1e-10);
}

TEST_CASE("norm fingerprinting: layernorm drops exactly one dimension") {
  const int h = 64;
  auto detect = [&](NormKind kind, bool bias, uint64_t seed) {
    VictimSpec spec = spec_of(300, h, seed);
    spec.norm_kind = kind;
    spec.norm_bias_enabled = bias;
    const Victim victim = Victim::build(spec);
    ApiSession s(victim, {ApiModeKind::AllLogits, 1});
    const QueryMatrix q = collect_query_matrix(s, 2 * h + 48, seed + 3);
    return detect_norm_layer(q);
  };

  for (uint64_t seed : {11, 12, 13}) {
    const NormDetectResult ln = detect(NormKind::LayerNorm, true, seed);
    CHECK(ln.kind == NormDetect::LayerNorm);
    CHECK(ln.dim_raw == h);
    CHECK(ln.dim_centered == h - 1);

    const NormDetectResult rms = detect(NormKind::RMSNorm, false, seed);
    CHECK(rms.kind == NormDetect::RMSNorm);
    CHECK(rms.dim_raw == h);
    CHECK(rms.dim_centered == h);

    // RMSNorm with a bias must not read as LayerNorm
    const NormDetectResult rms_bias = detect(NormKind::RMSNorm, true, seed);
    CHECK(rms_bias.kind == NormDetect::RMSNorm);
  }
}

TEST_CASE("orthogonal recovery via the ellipsoid fit") {
  SUBCASE("residual symmetry is orthogonal; points sit on the unit sphere") {
    VictimSpec spec = spec_of(200, 16, 21);
    spec.norm_kind = NormKind::RMSNorm;
    spec.norm_bias_enabled = false;
    spec.norm_scale_randomized = true;  // folded into the effective projection
    const Victim victim = Victim::build(spec);
    ApiSession s(victim, {ApiModeKind::AllLogits, 1});
    const QueryMatrix q = collect_query_matrix(s, 200, 31);
    const StolenLayer layer = extract_layer_orthogonal(q, 16);
    REQUIRE(layer.symmetry == Symmetry::Orthogonal);
    REQUIRE(layer.ellipsoid.has_value());

    const MatrixXd truth = victim.effective_projection();
    const MatrixXd residual = layer.w.completeOrthogonalDecomposition().pseudoInverse() * truth;
    CHECK((residual.transpose() * residual - MatrixXd::Identity(16, 16)).norm() < 1e-6);

    const auto& e = *layer.ellipsoid;
    for (Eigen::Index j = 0; j < e.points.cols(); ++j) {
      const double r = (e.m * (e.points.col(j) - e.center)).norm();
      CHECK(std::abs(r - 1.0) < 1e-8);
    }
  }

  SUBCASE("a hand-built axis-aligned victim recovers up to a signed permutation") {
    const int l = 64, h = 4;
    MatrixXd w = MatrixXd::Zero(l, h);
    w(0, 0) = 1.0;
    w(1, 1) = 2.0;
    w(2, 2) = 3.0;
    w(3, 3) = 4.0;
    VictimSpec spec = spec_of(l, h, 22);
    spec.norm_kind = NormKind::RMSNorm;
    spec.norm_bias_enabled = false;
    const Victim victim = Victim::with_projection(spec, w);
    ApiSession s(victim, {ApiModeKind::AllLogits, 1});
    const QueryMatrix q = collect_query_matrix(s, 64, 41);
    const StolenLayer layer = extract_layer_orthogonal(q, h);

    const MatrixXd o = layer.w.completeOrthogonalDecomposition().pseudoInverse() * w;
    // exhaustive search over signed permutations
    double best = std::numeric_limits<double>::infinity();
    std::array<int, 4> perm{0, 1, 2, 3};
    std::sort(perm.begin(), perm.end());
    do {
      for (int signs = 0; signs < 16; ++signs) {
        MatrixXd sp = MatrixXd::Zero(h, h);
        for (int i = 0; i < h; ++i) sp(i, perm[i]) = (signs >> i) & 1 ? -1.0 : 1.0;
        best = std::min(best, (o - sp).norm());
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(best < 1e-6);
  }

  SUBCASE("error paths: too few rows; degenerate geometry") {
    VictimSpec spec = spec_of(120, 8, 23);
    spec.norm_kind = NormKind::RMSNorm;
    spec.norm_bias_enabled = false;
    const Victim victim = Victim::build(spec);
    ApiSession s(victim, {ApiModeKind::AllLogits, 1});
    const QueryMatrix small = collect_query_matrix(s, 20, 5);
    CHECK_THROWS_AS(extract_layer_orthogonal(small, 8), InputError);

    // LayerNorm hidden states are not on a sphere in the full h dimensions:
    // the fit must refuse rather than answer
    VictimSpec ln = spec_of(120, 8, 24);
    ln.norm_kind = NormKind::LayerNorm;
    const Victim lv = Victim::build(ln);
    ApiSession s2(lv, {ApiModeKind::AllLogits, 1});
    const QueryMatrix q2 = collect_query_matrix(s2, 100, 6);
    CHECK_THROWS_AS(extract_layer_orthogonal(q2, 8), NumericalError);
  }
}

TEST_CASE("spectrum plot data mirrors the report") {
  const Victim victim = Victim::build(spec_of(120, 8, 31));
  ApiSession s(victim, {ApiModeKind::AllLogits, 1});
  const QueryMatrix q = collect_query_matrix(s, 32, 3);
  const DimResult r = extract_hidden_dim(q);
  const auto rows = spectrum_plot_data(r.spectrum);
  REQUIRE(rows.size() == static_cast<size_t>(r.spectrum.values.size()));
  CHECK(rows.front().index == 1);
  CHECK(rows.front().value == r.spectrum.values[0]);
  CHECK(rows[0].log_gap == r.spectrum.log_gaps[0]);
}
