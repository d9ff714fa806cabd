#pragma once

#include <functional>
#include <optional>

#include "unembed/api.hpp"

namespace unembed {

enum class EntryStatus : uint8_t { ExactIsh, Interval, Missing };

// A reconstructed logit vector. The softmax only ever exposes logits up to an
// additive shift, so every recovery pins that freedom one of two ways:
// ReferenceTokenZero sets z[reference] = 0, UnitNormalizer scales so that
// sum_i exp(z_i) = 1.
struct RecoveredLogits {
  enum class Norm { ReferenceTokenZero, UnitNormalizer };

  VectorXd values;
  Norm normalization = Norm::ReferenceTokenZero;
  int32_t reference_token = -1;  // meaningful for ReferenceTokenZero
  std::vector<EntryStatus> status;
  std::vector<uint8_t> low_confidence;  // clamped or otherwise degraded entries

  // Coordinates that carry information: non-missing entries, minus the pinned
  // reference (its zero is a convention, not a measurement).
  int informative_count() const;
};

// Conditioning guard for the closed-form logprob recoveries: when
// 1 - (1 - e^-B) * sum_j exp(a_j) falls below `threshold` the batch is
// re-queried with the bias reduced by `b_step`. The adjusted bias is kept for
// later batches so retries stay amortized.
struct GuardConfig {
  double threshold = 1e-6;
  double b_step = 5.0;
  int max_retries = 32;
};

// Reference-token recovery (top-K logprobs, K >= 2): one unbiased token per
// response cancels the softmax normalizer; K-1 fresh logits per query,
// ceil((l-1)/(K-1)) queries total.
RecoveredLogits recover_reference_token(QuerySession& session, const TokenSeq& prompt, double B);

// Closed-form recovery of K logits per query under UnitNormalizer:
//   z_{i_k} = a_{i_k} - B - log(1 - (1 - e^-B) sum_j exp(a_{i_j})).
RecoveredLogits recover_k_logprob(QuerySession& session, const TokenSeq& prompt, double B,
                                  const GuardConfig& guard = {});

// K = 1 special case; identical output to recover_k_logprob on the same
// transcript by construction.
RecoveredLogits recover_single_logprob(QuerySession& session, const TokenSeq& prompt, double B,
                                       const GuardConfig& guard = {});

// One observed (bias vector, token, logprob) triple.
struct LogprobObservation {
  LogitBias bias;
  int32_t token;
  double logprob;
};

// General linear-algebraic recovery from arbitrary biased logprob
// observations: solve the least-squares system for exp(z) with exp(z_0)
// pinned to 1. Needs >= l-1 observations touching every coordinate.
RecoveredLogits recover_least_squares(const std::vector<LogprobObservation>& observations,
                                      int32_t vocab_size);

// Top-1 logprob, bias restricted to {-1, 0}: two-query probability probe
//   p_t = (exp(y_top - y'_top) - 1) / (1/e - 1),
// then z_t = log p_t under UnitNormalizer. Non-positive probes clamp to
// `prob_floor` and are flagged low-confidence.
RecoveredLogits recover_binarized(QuerySession& session, const TokenSeq& prompt,
                                  double prob_floor = 1e-12);

// Per-token interval enclosures of z_i - z_ref maintained by the
// logprob-free attacks.
struct IntervalBounds {
  std::vector<int32_t> tokens;  // tracked tokens; the reference is implicit [0,0]
  int32_t reference_token = -1;
  VectorXd alpha, beta;  // alpha <= z_token - z_ref <= beta
  std::vector<uint8_t> unreachable;

  double max_width() const;
  double mean_width() const;
  // Midpoint estimates as a RecoveredLogits (Interval status; reference exact).
  RecoveredLogits to_logits(int32_t vocab_size) const;
};

// Per-token bisection on the bias (argmax-only API): exactly
// ceil(log2(B/epsilon)) queries per token, interval width <= epsilon.
// on_step, when set, sees every intermediate interval.
IntervalBounds recover_binary_search(
    QuerySession& session, const TokenSeq& prompt, double epsilon, double B,
    const std::function<void(int32_t token, double alpha, double beta)>& on_step = {});

// Difference-constraint system z_i - z_j <= c over nodes {0..n}; node 0 is the
// reference. Bounds on z_i - z_0 are exact single-source shortest paths from
// node 0 (upper) and in the edge-reversed graph (lower), maintained
// incrementally Bellman-Ford style.
class ConstraintGraph {
 public:
  explicit ConstraintGraph(int n_tracked);
  // Seeds the attack prior -B <= z_i - z_0 <= 0 for every tracked node.
  ConstraintGraph(int n_tracked, double prior_bound);

  // z_i - z_j <= c (kept as the min over all added constraints)
  void add_constraint(int j, int i, double c);

  // Re-solves after constraint additions; throws NumericalError when the
  // system has a negative cycle (inconsistent observations).
  void refresh();

  double upper(int i) const;  // max feasible z_i - z_0
  double lower(int i) const;  // min feasible z_i - z_0
  int tracked() const { return n_; }

  struct Edge {
    int from, to;
    double weight;  // z_to - z_from <= weight
  };
  std::vector<Edge> edges() const;

 private:
  void relax(const std::vector<double>& w, std::vector<double>& d) const;

  int n_;
  double prior_bound_;
  std::vector<double> w_, wt_;  // dense (n+1)^2 weights, forward and transposed
  std::vector<double> dist_fwd_, dist_rev_;
  bool dirty_ = true;
};

// Exact tightest interval bounds implied by a constraint set.
IntervalBounds shortest_path_bounds(ConstraintGraph& graph);

enum class Centering { Midpoint, OneOfN };

struct HyperrectangleOptions {
  int rounds = 1000;  // T, per batch
  Centering centering = Centering::OneOfN;
  int batch_size = 300;          // biased tokens per query (reference rides at zero bias)
  double bias_bound = 100.0;     // prior: z_i - z_ref in [-B, 0]
  std::vector<int32_t> tokens;   // targets; empty = every non-reference token
  double stop_max_width = 0.0;   // early stop once every width <= this (0 = off)
  double stop_mean_width = 0.0;  // early stop on the mean width (0 = off)
  // Test/measurement hook, called after each round with the live bounds.
  std::function<void(int round, const IntervalBounds&)> on_round;
};

// Multi-token parallel bisection (argmax-only API): each round biases a whole
// batch, the winning token yields n linear constraints, and shortest paths
// re-tighten every interval. OneOfN centering equalizes the win probability
// of the zero-width reference to 1/(n+1) under a uniform prior.
IntervalBounds recover_hyperrectangle(QuerySession& session, const TokenSeq& prompt,
                                      const HyperrectangleOptions& opts);

// Information-theoretic minimum query counts for logprob-free recovery to
// within epsilon on biases bounded by B, N biased tokens per query.
double query_lower_bound_per_logit(double B, double epsilon, double N);
double query_lower_bound(double l, double B, double epsilon, double N);

// Multi-token expansion probe: force `pivot` to generate m times with bias B
// while four (or so) batch tokens ride at B - b_separation; every generated
// position exposes one response worth of logits for a fresh prompt.
std::vector<RecoveredLogits> recover_reference_token_expanded(
    QuerySession& session, const TokenSeq& p0, int32_t pivot, const std::vector<int32_t>& batch,
    double B, double b_separation, int m);

}  // namespace unembed
