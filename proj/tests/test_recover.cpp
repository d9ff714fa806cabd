#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "unembed/api.hpp"
#include "unembed/errors.hpp"
#include "unembed/fp16.hpp"
#include "unembed/numeric.hpp"
#include "unembed/recover.hpp"
#include "unembed/rng.hpp"
#include "unembed/transcript.hpp"
#include "unembed/victim.hpp"

#include "oracles.hpp"

using namespace unembed;

namespace {

const TokenSeq kPrompt{2, 3, 5, 7};

VictimSpec spec_of(int32_t l, int32_t h, uint64_t seed) {
  VictimSpec s;
  s.vocab_size = l;
  s.hidden_dim = h;
  s.seed = seed;
  return s;
}

// Shift-invariant comparison: both sides centered on their own means over the
// compared coordinates.
double max_err_vs_truth(const VectorXd& truth, const RecoveredLogits& rec) {
  std::vector<double> diffs;
  for (Eigen::Index i = 0; i < truth.size(); ++i)
    if (rec.status[static_cast<size_t>(i)] != EntryStatus::Missing)
      diffs.push_back(rec.values[i] - truth[i]);
  REQUIRE(!diffs.empty());
  double mean = 0;
  for (double d : diffs) mean += d;
  mean /= static_cast<double>(diffs.size());
  double worst = 0;
  for (double d : diffs) worst = std::max(worst, std::abs(d - mean));
  return worst;
}

// An h = 1 victim whose logit vector is exactly +/- w; returns one with a
// prompt that lands on the +1 side of the sphere.
std::pair<Victim, TokenSeq> planted_logits_victim(const VectorXd& w, uint64_t seed) {
  VictimSpec spec = spec_of(static_cast<int32_t>(w.size()), 1, seed);
  spec.norm_kind = NormKind::RMSNorm;
  spec.norm_bias_enabled = false;
  Victim v = Victim::with_projection(spec, w);
  for (int32_t t = 0; t < spec.vocab_size; ++t) {
    const TokenSeq p{t};
    if (v.hidden(p)[0] > 0) return {std::move(v), p};
  }
  FAIL("no +1 prompt found");
  return {std::move(v), TokenSeq{0}};
}

}  // namespace

TEST_CASE("reference-token recovery: cost and exactness") {
  const int l = 1001;
  const Victim victim = Victim::build(spec_of(l, 16, 1));
  ApiSession s(victim, {ApiModeKind::TopKLogprobsWithBias, 5});

  const RecoveredLogits rec = recover_reference_token(s, kPrompt, 100.0);
  CHECK(s.ledger().queries == 250);  // ceil((l-1)/4)
  CHECK(rec.informative_count() == 1000);
  CHECK(rec.normalization == RecoveredLogits::Norm::ReferenceTokenZero);
  CHECK(rec.values[rec.reference_token] == 0.0);

  const VectorXd truth = victim.true_logits(kPrompt);
  CHECK(max_err_vs_truth(truth, rec) < 0x1.0p-20);
}

TEST_CASE("reference-token recovery survives the argmax landing in the first batch") {
  // find a prompt whose natural argmax is one of tokens {0..3}
  const Victim victim = Victim::build(spec_of(101, 8, 5));
  TokenSeq prompt;
  for (uint32_t i = 0; i < 4000; ++i) {
    const TokenSeq p{static_cast<int32_t>(i % 101), static_cast<int32_t>((i / 101) % 101)};
    int top = 0;
    victim.true_logits(p).maxCoeff(&top);
    if (top < 4) {
      prompt = p;
      break;
    }
  }
  REQUIRE(!prompt.empty());
  ApiSession s(victim, {ApiModeKind::TopKLogprobsWithBias, 5});
  const RecoveredLogits rec = recover_reference_token(s, prompt, 100.0);
  CHECK(s.ledger().queries == 25);  // ceil(100/4), unchanged by the collision
  CHECK(max_err_vs_truth(victim.true_logits(prompt), rec) < 0x1.0p-20);
}

TEST_CASE("reference-token recovery of an all-equal-logits victim is all zeros") {
  VictimSpec spec = spec_of(64, 1, 3);
  spec.norm_kind = NormKind::RMSNorm;
  spec.norm_bias_enabled = false;
  const Victim victim = Victim::with_projection(spec, MatrixXd::Zero(64, 1));
  ApiSession s(victim, {ApiModeKind::TopKLogprobsWithBias, 5});
  const RecoveredLogits rec = recover_reference_token(s, kPrompt, 100.0);
  for (Eigen::Index i = 0; i < rec.values.size(); ++i) CHECK(rec.values[i] == 0.0);
}

TEST_CASE("k-logprob recovery: cost, accuracy, unit normalizer") {
  const int l = 1000;
  const Victim victim = Victim::build(spec_of(l, 16, 2));
  ApiSession s(victim, {ApiModeKind::TopKLogprobsWithBias, 5});

  const RecoveredLogits rec = recover_k_logprob(s, kPrompt, 10.0);
  CHECK(s.ledger().queries == 200);  // l / K, no retries at this bias
  CHECK(rec.informative_count() == l);
  CHECK(rec.normalization == RecoveredLogits::Norm::UnitNormalizer);
  CHECK(std::abs(logsumexp(rec.values)) < 1e-9);

  const VectorXd truth = victim.true_logits(kPrompt);
  CHECK(max_err_vs_truth(truth, rec) < 0x1.0p-10);
}

TEST_CASE("k-logprob conditioning guard re-queries oversized biases") {
  const Victim victim = Victim::build(spec_of(500, 16, 4));
  ApiSession s(victim, {ApiModeKind::TopKLogprobsWithBias, 5});
  const RecoveredLogits rec = recover_k_logprob(s, kPrompt, 100.0);
  // retries happened (bias had to come down), each one metered
  CHECK(s.ledger().queries > 100);
  CHECK(rec.informative_count() == 500);
  CHECK(max_err_vs_truth(victim.true_logits(kPrompt), rec) < 0x1.0p-10);
}

TEST_CASE("single-logprob closed form") {
  SUBCASE("uniform logits recover -log l") {
    VictimSpec spec = spec_of(100, 1, 6);
    spec.norm_kind = NormKind::RMSNorm;
    spec.norm_bias_enabled = false;
    const Victim victim = Victim::with_projection(spec, MatrixXd::Zero(100, 1));
    ApiSession s(victim, {ApiModeKind::TopKLogprobsWithBias, 1});
    const RecoveredLogits rec = recover_single_logprob(s, kPrompt, 40.0);
    for (Eigen::Index i = 0; i < rec.values.size(); ++i)
      CHECK(rec.values[i] == doctest::Approx(-std::log(100.0)).epsilon(1e-9));
  }

  SUBCASE("h=16 victim at B=40 stays under 1e-6") {
    const Victim victim = Victim::build(spec_of(200, 16, 7));
    ApiSession s(victim, {ApiModeKind::TopKLogprobsWithBias, 1});
    const RecoveredLogits rec = recover_single_logprob(s, kPrompt, 40.0);
    const VectorXd truth = victim.true_logits(kPrompt);
    CHECK(max_err_vs_truth(truth, rec) < 1e-6);
    CHECK(rec.informative_count() == 200);
  }

  SUBCASE("huge bias: guard engages; without it the error inflects") {
    const Victim victim = Victim::build(spec_of(100, 8, 8));
    const VectorXd truth = victim.true_logits(kPrompt);

    // default guard at B=80: accuracy preserved through retries
    ApiSession s(victim, {ApiModeKind::TopKLogprobsWithBias, 1});
    const RecoveredLogits guarded = recover_single_logprob(s, kPrompt, 80.0);
    CHECK(s.ledger().queries > 100);  // retries metered
    CHECK(max_err_vs_truth(truth, guarded) < 1e-6);

    // guard disabled, quantized emission: sweeping B shows the inflection
    ApiPolicy fp16;
    fp16.emission = EmitPrecision::Fp16;
    GuardConfig off;
    off.threshold = 0.0;
    off.max_retries = 0;
    ApiSession s10(victim, {ApiModeKind::TopKLogprobsWithBias, 1}, fp16);
    ApiSession s25(victim, {ApiModeKind::TopKLogprobsWithBias, 1}, fp16);
    const double err10 = max_err_vs_truth(truth, recover_single_logprob(s10, kPrompt, 10.0, off));
    const double err25 = max_err_vs_truth(truth, recover_single_logprob(s25, kPrompt, 25.0, off));
    CHECK(err25 > 10.0 * err10);
  }
}

TEST_CASE("k=1 recovery equals single-logprob bit for bit on the same transcript") {
  const Victim victim = Victim::build(spec_of(120, 8, 9));
  const std::string path = "replay_single.jsonl";

  ApiSession base(victim, {ApiModeKind::TopKLogprobsWithBias, 1});
  RecoveredLogits direct;
  {
    TranscriptingSession rec_session(base, path);
    direct = recover_single_logprob(rec_session, kPrompt, 30.0);
  }
  ReplaySession replay(path);
  const RecoveredLogits replayed = recover_k_logprob(replay, kPrompt, 30.0);
  CHECK(replay.exhausted());
  for (Eigen::Index i = 0; i < direct.values.size(); ++i)
    CHECK(direct.values[i] == replayed.values[i]);
  std::filesystem::remove(path);
}

TEST_CASE("least-squares recovery") {
  // observations synthesized directly from a known logit vector
  const int l = 60;
  Rng rng(17);
  VectorXd z(l);
  for (int i = 0; i < l; ++i) z[i] = 0.5 * rng.gaussian();

  auto observe = [&](int32_t token, double b) {
    VectorXd zb = z;
    zb[token] += b;
    const double lse = logsumexp(zb);
    LogprobObservation ob;
    ob.bias.set(token, b);
    ob.token = token;
    ob.logprob = zb[token] - lse;
    return ob;
  };

  SUBCASE("exactly determined system recovers z") {
    std::vector<LogprobObservation> obs;
    for (int32_t t = 1; t < l; ++t) obs.push_back(observe(t, 8.0));
    const RecoveredLogits rec = recover_least_squares(obs, l);
    const VectorXd expect = z.array() - z[0];  // pinned at token 0
    CHECK((rec.values - expect).cwiseAbs().maxCoeff() < 1e-8);
  }

  SUBCASE("overdetermined beats exactly-determined under quantized logprobs") {
    auto quantize = [](std::vector<LogprobObservation> obs) {
      for (auto& ob : obs) ob.logprob = round_to_half(ob.logprob);
      return obs;
    };
    std::vector<LogprobObservation> exact_n, twice_n;
    for (int32_t t = 1; t < l; ++t) {
      exact_n.push_back(observe(t, 8.0));
      twice_n.push_back(observe(t, 8.0));
      twice_n.push_back(observe(t, 6.0));
    }
    const RecoveredLogits a = recover_least_squares(quantize(exact_n), l);
    const RecoveredLogits b = recover_least_squares(quantize(twice_n), l);
    const VectorXd expect = z.array() - z[0];
    const double err_a = (a.values - expect).cwiseAbs().mean();
    const double err_b = (b.values - expect).cwiseAbs().mean();
    CHECK(err_b < err_a);
  }

  SUBCASE("a coordinate with no constraint is flagged") {
    std::vector<LogprobObservation> obs;
    for (int32_t t = 1; t < l; ++t)
      if (t != 37) obs.push_back(observe(t, 8.0));
    obs.push_back(observe(1, 6.0));  // keep the count at l-1
    try {
      recover_least_squares(obs, l);
      FAIL("expected a diagnostic");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("37") != std::string::npos);
    }
  }
}

TEST_CASE("binarized recovery") {
  SUBCASE("two-token victim recovers p = 0.25") {
    VectorXd w(2);
    w << std::log(0.75), std::log(0.25);
    auto [victim, prompt] = planted_logits_victim(w, 21);
    ApiSession s(victim, {ApiModeKind::Top1BinaryBias, 1});
    const RecoveredLogits rec = recover_binarized(s, prompt);
    CHECK(std::exp(rec.values[1]) == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(std::exp(rec.values[0]) == doctest::Approx(0.75).epsilon(1e-9));
    CHECK(s.ledger().queries == 2);  // baseline + one probe
  }

  SUBCASE("invisible probability clamps to the floor and is flagged") {
    VectorXd w(3);
    w << 0.0, -1.0, -60.0;
    auto [victim, prompt] = planted_logits_victim(w, 22);
    ApiSession s(victim, {ApiModeKind::Top1BinaryBias, 1});
    const RecoveredLogits rec = recover_binarized(s, prompt);
    CHECK(rec.values[2] == std::log(1e-12));
    CHECK(rec.low_confidence[2] == 1);
    CHECK(rec.low_confidence[1] == 0);
  }

  SUBCASE("cost is one query per logit and exp sums to one") {
    const int l = 100;
    const Victim victim = Victim::build(spec_of(l, 8, 23));
    ApiSession s(victim, {ApiModeKind::Top1BinaryBias, 1});
    const RecoveredLogits rec = recover_binarized(s, kPrompt);
    CHECK(s.ledger().queries == static_cast<uint64_t>(l));
    CHECK(rec.informative_count() == l);
    CHECK(std::abs(logsumexp(rec.values)) < 1e-9);
    CHECK(max_err_vs_truth(victim.true_logits(kPrompt), rec) < 1e-7);
  }
}

TEST_CASE("binary search: exact query count and containment") {
  const int l = 120;
  const Victim victim = Victim::build(spec_of(l, 8, 31));
  ApiSession s(victim, {ApiModeKind::ArgmaxOnlyWithBias, 1});

  const double b = 100.0, eps = 100.0 / 1024.0;
  const IntervalBounds bounds = recover_binary_search(s, kPrompt, eps, b);
  // 1 discovery query + exactly ceil(log2(B/eps)) = 10 per non-reference token
  CHECK(s.ledger().queries == 1 + 10 * static_cast<uint64_t>(l - 1));

  const VectorXd z = victim.true_logits(kPrompt);
  for (size_t i = 0; i < bounds.tokens.size(); ++i) {
    const double gap = z[bounds.tokens[i]] - z[bounds.reference_token];
    CHECK(gap >= bounds.alpha[i] - 1e-12);
    CHECK(gap <= bounds.beta[i] + 1e-12);
    CHECK(bounds.beta[i] - bounds.alpha[i] <= eps + 1e-12);
    CHECK(!bounds.unreachable[i]);
  }
}

TEST_CASE("shortest-path bounds: hand cases, oracle, infeasibility") {
  SUBCASE("single constraint") {
    ConstraintGraph g(3, 50.0);
    g.add_constraint(0, 1, 2.5);  // z_1 - z_0 <= 2.5 (tighter than the prior 0? no: min kept)
    const IntervalBounds b = shortest_path_bounds(g);
    CHECK(b.beta[0] == 0.0);  // prior z_1 - z_0 <= 0 still binds
    g.add_constraint(0, 1, -2.5);
    const IntervalBounds b2 = shortest_path_bounds(g);
    CHECK(b2.beta[0] == -2.5);
    CHECK(b2.alpha[0] == -50.0);
  }

  SUBCASE("chain composes") {
    ConstraintGraph g(2, 100.0);
    g.add_constraint(0, 1, -1.0);  // z_a - z_0 <= -1
    g.add_constraint(1, 2, 2.0);   // z_b - z_a <= 2
    const IntervalBounds b = shortest_path_bounds(g);
    CHECK(b.beta[1] == doctest::Approx(1.0));  // composed path 0 -> a -> b
  }

  SUBCASE("bounds equal vertex-enumerated LP on random instances") {
    Rng rng(99);
    for (int trial = 0; trial < 30; ++trial) {
      const int n = 2 + static_cast<int>(rng.below(5));
      ConstraintGraph g = testing::random_instance(rng, n, 50.0, 2);
      const IntervalBounds fast = shortest_path_bounds(g);
      VectorXd lo, hi;
      testing::lp_vertex_bounds(testing::lp_rows(g), n, lo, hi);
      for (int i = 0; i < n; ++i) {
        CHECK(fast.beta[i] == doctest::Approx(hi[i]).epsilon(1e-9));
        CHECK(fast.alpha[i] == doctest::Approx(lo[i]).epsilon(1e-9));
      }
    }
  }

  SUBCASE("inconsistent constraints raise") {
    ConstraintGraph g(2, 50.0);
    g.add_constraint(0, 1, -5.0);
    g.add_constraint(1, 0, -5.0);  // z_0 - z_1 <= -5 completes a negative cycle
    CHECK_THROWS_AS(shortest_path_bounds(g), NumericalError);
  }
}

TEST_CASE("hyperrectangle attack: priors, containment, monotone widths") {
  const int l = 200;
  const Victim victim = Victim::build(spec_of(l, 8, 41));
  const VectorXd z = victim.true_logits(kPrompt);

  SUBCASE("zero rounds returns the prior box") {
    ApiSession s(victim, {ApiModeKind::ArgmaxOnlyWithBias, 1});
    HyperrectangleOptions o;
    o.rounds = 0;
    o.batch_size = 40;
    const IntervalBounds b = recover_hyperrectangle(s, kPrompt, o);
    for (Eigen::Index i = 0; i < b.alpha.size(); ++i) {
      CHECK(b.alpha[i] == -100.0);
      CHECK(b.beta[i] == 0.0);
    }
  }

  SUBCASE("truth stays inside the bounds at every round; widths never grow") {
    ApiSession s(victim, {ApiModeKind::ArgmaxOnlyWithBias, 1});
    HyperrectangleOptions o;
    o.rounds = 300;
    o.batch_size = 40;
    o.centering = Centering::OneOfN;
    double prev_total_width = std::numeric_limits<double>::infinity();
    int checked_rounds = 0;
    o.on_round = [&](int, const IntervalBounds& b) {
      double total = 0;
      for (size_t i = 0; i < b.tokens.size(); ++i) {
        if (b.beta[i] < b.alpha[i] - 1e-12) FAIL("inverted interval");
        if (b.tokens[i] >= 40 + 1) continue;  // later batches still at prior
        const double gap = z[b.tokens[i]] - z[b.reference_token];
        CHECK(gap >= b.alpha[i] - 1e-9);
        CHECK(gap <= b.beta[i] + 1e-9);
        total += b.beta[i] - b.alpha[i];
      }
      CHECK(total <= prev_total_width + 1e-9);
      prev_total_width = total;
      ++checked_rounds;
    };
    recover_hyperrectangle(s, kPrompt, o);
    CHECK(checked_rounds > 0);
  }
}

TEST_CASE("one-of-n centering gives the reference a 1/(n+1) win probability") {
  Rng rng(7);
  for (int n : {3, 7}) {
    const double c = std::exp(-std::log(n + 1.0) / n);
    std::vector<double> alpha(n), beta(n), bias(n);
    for (int i = 0; i < n; ++i) {
      alpha[i] = -rng.uniform(10.0, 40.0);
      beta[i] = alpha[i] + rng.uniform(1.0, std::min(10.0, -alpha[i]));
      bias[i] = -(1.0 - c) * alpha[i] - c * beta[i];
    }
    const int trials = 400000;
    int ref_wins = 0;
    for (int t = 0; t < trials; ++t) {
      double best = 0.0;  // reference: z = 0, bias = 0
      bool ref_best = true;
      for (int i = 0; i < n; ++i) {
        const double zi = rng.uniform(alpha[i], beta[i]);
        if (zi + bias[i] > best) {
          best = zi + bias[i];
          ref_best = false;
        }
      }
      if (ref_best) ++ref_wins;
    }
    const double p = static_cast<double>(ref_wins) / trials;
    const double expect = 1.0 / (n + 1);
    const double sigma = std::sqrt(expect * (1 - expect) / trials);
    CHECK(std::abs(p - expect) < 5 * sigma);
  }
}

TEST_CASE("one-of-n reaches the target mean width with fewer queries than midpoint") {
  const int l = 1000;
  const Victim victim = Victim::build(spec_of(l, 16, 51));
  const double target = 100.0 * 0x1.0p-15;

  // restrict to one 300-token batch (plus reference discovery)
  ApiSession probe(victim, {ApiModeKind::ArgmaxOnlyWithBias, 1});
  const int32_t ref = probe.argmax(kPrompt, {});
  std::vector<int32_t> batch;
  for (int32_t t = 0; t < l && static_cast<int>(batch.size()) < 300; ++t)
    if (t != ref) batch.push_back(t);

  auto run_batch = [&](Centering c) {
    ApiSession s(victim, {ApiModeKind::ArgmaxOnlyWithBias, 1});
    HyperrectangleOptions o;
    o.rounds = 1 << 20;
    o.batch_size = 300;
    o.centering = c;
    o.stop_mean_width = target;
    o.tokens = batch;
    const IntervalBounds b = recover_hyperrectangle(s, kPrompt, o);
    CHECK(b.mean_width() <= target);
    return s.ledger().queries;
  };

  const uint64_t q_one_of_n = run_batch(Centering::OneOfN);
  const uint64_t q_midpoint = run_batch(Centering::Midpoint);
  CHECK(q_one_of_n < q_midpoint);
}

TEST_CASE("query lower bound values") {
  CHECK(query_lower_bound_per_logit(100.0, 100.0, 300.0) == 0.0);
  // the stated endpoints: about 1.53 queries/logit at the 6-bit target and
  // about 3.57 at the 23-bit target (B = 100, N = 300)
  CHECK(query_lower_bound_per_logit(100.0, 0x1.0p-6, 300.0) ==
        doctest::Approx(1.53).epsilon(0.01));
  CHECK(query_lower_bound_per_logit(100.0, 0x1.0p-23, 300.0) ==
        doctest::Approx(3.57).epsilon(0.015));
  CHECK(query_lower_bound(1000.0, 100.0, 0x1.0p-6, 300.0) ==
        doctest::Approx(1000.0 * query_lower_bound_per_logit(100.0, 0x1.0p-6, 300.0)));
}

TEST_CASE("multi-token expansion probe") {
  const Victim victim = Victim::build(spec_of(150, 8, 61));
  ApiPolicy policy;
  policy.overhead_tokens = 7;
  ApiSession s(victim, {ApiModeKind::GenerationLogprobs, 5}, policy);

  const int32_t pivot = 42;
  const std::vector<int32_t> batch{50, 51, 52, 53};
  const int m = 5;
  const auto recs = recover_reference_token_expanded(s, kPrompt, pivot, batch, 30.0, 10.0, m);
  REQUIRE(recs.size() == m);
  CHECK(s.ledger().queries == 1);
  CHECK(s.ledger().total_tokens() == kPrompt.size() + m + 7);

  // every position exposes the batch logits for its own (grown) prompt
  TokenSeq grown = kPrompt;
  for (int j = 0; j < m; ++j) {
    const VectorXd truth = victim.true_logits(grown);
    for (int32_t t : batch) {
      CHECK(recs[j].status[t] == EntryStatus::ExactIsh);
      const double expect = truth[t] - truth[pivot];
      CHECK(recs[j].values[t] == doctest::Approx(expect).epsilon(1e-9));
    }
    grown.push_back(pivot);
  }
}

TEST_CASE("transcripts replay rejections and results faithfully") {
  const Victim victim = Victim::build(spec_of(80, 8, 71));
  const std::string path = "replay_binarized.jsonl";
  RecoveredLogits direct;
  {
    ApiSession base(victim, {ApiModeKind::Top1BinaryBias, 1});
    TranscriptingSession t(base, path);
    direct = recover_binarized(t, kPrompt);
    // record a rejection too
    LogitBias bad;
    bad.set(0, -0.25);
    CHECK_THROWS_AS(t.topk(kPrompt, bad), ApiError);
  }
  ReplaySession replay(path);
  const RecoveredLogits again = recover_binarized(replay, kPrompt);
  for (Eigen::Index i = 0; i < direct.values.size(); ++i)
    CHECK(direct.values[i] == again.values[i]);
  LogitBias bad;
  bad.set(0, -0.25);
  CHECK_THROWS_AS(replay.topk(kPrompt, bad), ApiError);
  CHECK(replay.exhausted());
  std::filesystem::remove(path);
}
