#include "unembed/recover.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>

#include "unembed/errors.hpp"

namespace unembed {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

int RecoveredLogits::informative_count() const {
  int n = 0;
  for (const auto s : status)
    if (s != EntryStatus::Missing) ++n;
  if (normalization == Norm::ReferenceTokenZero && reference_token >= 0 &&
      status[reference_token] != EntryStatus::Missing)
    --n;
  return n;
}

RecoveredLogits recover_reference_token(QuerySession& session, const TokenSeq& prompt, double B) {
  const int32_t l = session.vocab_size();
  const int k = session.mode().k;
  if (k < 2) throw InputError("reference-token recovery needs top-K logprobs with K >= 2");
  const int per = k - 1;

  RecoveredLogits out;
  out.values = VectorXd::Zero(l);
  out.normalization = RecoveredLogits::Norm::ReferenceTokenZero;
  out.status.assign(l, EntryStatus::Missing);
  out.low_confidence.assign(l, 0);

  // Round 0 doubles as reference discovery: bias the first K-1 tokens and the
  // response's unbiased slot names the reference.
  std::vector<int32_t> first;
  for (int32_t t = 0; t < l && static_cast<int>(first.size()) < per; ++t) first.push_back(t);
  LogitBias bias0;
  for (int32_t t : first) bias0.set(t, B);
  const TopKResponse r0 = session.topk(prompt, bias0);

  int32_t ref = -1;
  for (const auto& it : r0.items) {
    if (std::find(first.begin(), first.end(), it.token) == first.end()) {
      ref = it.token;
      break;
    }
  }
  if (ref < 0) throw NumericalError("no unbiased token surfaced in the first response");
  out.reference_token = ref;
  out.status[ref] = EntryStatus::ExactIsh;

  const double y_ref0 = *r0.find(ref);
  for (int32_t t : first) {
    if (auto y = r0.find(t)) {
      out.values[t] = *y - y_ref0 - B;
      out.status[t] = EntryStatus::ExactIsh;
    }
  }

  // Later rounds bias the reference too (same B), so it stays in the top K no
  // matter where the natural argmax lives; the bias cancels in the difference.
  std::vector<int32_t> rest;
  rest.reserve(l);
  for (int32_t t = 0; t < l; ++t)
    if (t != ref && std::find(first.begin(), first.end(), t) == first.end()) rest.push_back(t);

  for (size_t at = 0; at < rest.size(); at += per) {
    const size_t end = std::min(rest.size(), at + per);
    LogitBias bias;
    bias.set(ref, B);
    for (size_t i = at; i < end; ++i) bias.set(rest[i], B);
    const TopKResponse r = session.topk(prompt, bias);
    const auto y_ref = r.find(ref);
    if (!y_ref) continue;  // B too small to keep the reference visible
    for (size_t i = at; i < end; ++i) {
      if (auto y = r.find(rest[i])) {
        out.values[rest[i]] = *y - *y_ref;
        out.status[rest[i]] = EntryStatus::ExactIsh;
      }
    }
  }
  return out;
}

RecoveredLogits recover_k_logprob(QuerySession& session, const TokenSeq& prompt, double B,
                                  const GuardConfig& guard) {
  const int32_t l = session.vocab_size();
  const int k = session.mode().k;
  if (k < 1) throw InputError("k-logprob recovery needs top-K logprobs");

  RecoveredLogits out;
  out.values = VectorXd::Zero(l);
  out.normalization = RecoveredLogits::Norm::UnitNormalizer;
  out.status.assign(l, EntryStatus::Missing);
  out.low_confidence.assign(l, 0);

  double cur_b = B;  // adapted bias survives across batches
  std::vector<double> a(k);

  for (int32_t start = 0; start < l; start += k) {
    const int32_t end = std::min<int32_t>(l, start + k);
    const int batch = end - start;
    int tries = 0;
    for (;;) {
      LogitBias bias;
      for (int32_t t = start; t < end; ++t) bias.set(t, cur_b);
      const TopKResponse r = session.topk(prompt, bias);

      bool all_present = true;
      for (int32_t t = start; t < end; ++t) {
        const auto y = r.find(t);
        if (!y) {
          all_present = false;
          break;
        }
        a[t - start] = *y;
      }

      if (all_present) {
        double sum = 0.0;
        for (int i = 0; i < batch; ++i) sum += std::exp(a[i]);
        // 1 - (1 - e^-B) * sum, grouped to keep the cancellation mild
        const double g = (1.0 - sum) + std::exp(-cur_b) * sum;
        if (g >= guard.threshold) {
          const double log_g = std::log(g);
          for (int i = 0; i < batch; ++i) {
            out.values[start + i] = a[i] - cur_b - log_g;
            out.status[start + i] = EntryStatus::ExactIsh;
          }
          break;
        }
        // Cancellation too severe: re-query with a smaller bias.
      } else {
        break;  // bias too small to force the batch into the top K
      }

      if (++tries > guard.max_retries || cur_b - guard.b_step <= 0.0) break;
      cur_b -= guard.b_step;
    }
  }
  return out;
}

RecoveredLogits recover_single_logprob(QuerySession& session, const TokenSeq& prompt, double B,
                                       const GuardConfig& guard) {
  if (session.mode().k != 1) throw InputError("single-logprob recovery needs K = 1");
  return recover_k_logprob(session, prompt, B, guard);
}

RecoveredLogits recover_least_squares(const std::vector<LogprobObservation>& observations,
                                      int32_t vocab_size) {
  const int32_t l = vocab_size;
  const auto m = static_cast<Eigen::Index>(observations.size());
  if (m < l - 1) throw InputError("need at least l-1 observations");

  // Every coordinate must be touched by some observation, else its column is
  // indistinguishable from any other untouched one.
  std::vector<uint8_t> constrained(l, 0);
  for (const auto& ob : observations) {
    if (ob.token < 0 || ob.token >= l) throw InputError("observation token out of range");
    constrained[ob.token] = 1;
    for (const auto& [t, v] : ob.bias.entries)
      if (v != 0.0) constrained[t] = 1;
  }
  constrained[0] = 1;  // pinned below
  for (int32_t j = 0; j < l; ++j)
    if (!constrained[j])
      throw NumericalError("unconstrained coordinate: token " + std::to_string(j));

  // Rows: sum_j exp(b_j)(1 - I[j=i_k] exp(-a_k)) exp(z_j) = 0, plus the pin
  // exp(z_0) = 1 as the first row.
  MatrixXd a(m + 1, l);
  a.setZero();
  a(0, 0) = 1.0;
  for (Eigen::Index r = 0; r < m; ++r) {
    const auto& ob = observations[static_cast<size_t>(r)];
    for (int32_t j = 0; j < l; ++j) a(r + 1, j) = 1.0;
    for (const auto& [t, v] : ob.bias.entries) a(r + 1, t) = std::exp(v);
    a(r + 1, ob.token) *= 1.0 - std::exp(-ob.logprob);
  }
  VectorXd rhs = VectorXd::Zero(m + 1);
  rhs[0] = 1.0;

  Eigen::ColPivHouseholderQR<MatrixXd> qr(a);
  if (qr.rank() < l) {
    const auto& qrr = qr.matrixR();
    const double cond = std::abs(qrr(0, 0)) /
                        std::max(std::abs(qrr(l - 1, l - 1)), 1e-300);
    throw NumericalError("singular recovery system (condition ~" + std::to_string(cond) + ")");
  }
  const VectorXd x = qr.solve(rhs);
  for (int32_t j = 0; j < l; ++j)
    if (!(x[j] > 0.0))
      throw NumericalError("recovered exp(z) is non-positive at token " + std::to_string(j));

  RecoveredLogits out;
  out.values = x.array().log();
  out.normalization = RecoveredLogits::Norm::ReferenceTokenZero;
  out.reference_token = 0;
  out.status.assign(l, EntryStatus::ExactIsh);
  out.low_confidence.assign(l, 0);
  return out;
}

RecoveredLogits recover_binarized(QuerySession& session, const TokenSeq& prompt,
                                  double prob_floor) {
  const int32_t l = session.vocab_size();
  const TopKResponse base = session.topk(prompt, {});
  const int32_t top = base.items.front().token;
  const double y_top = base.items.front().logprob;

  RecoveredLogits out;
  out.values = VectorXd::Zero(l);
  out.normalization = RecoveredLogits::Norm::UnitNormalizer;
  out.status.assign(l, EntryStatus::Missing);
  out.low_confidence.assign(l, 0);

  // The top token's logprob is its logit under the unit normalizer.
  out.values[top] = y_top;
  out.status[top] = EntryStatus::ExactIsh;

  const double denom = std::expm1(-1.0);  // 1/e - 1
  for (int32_t t = 0; t < l; ++t) {
    if (t == top) continue;
    LogitBias bias;
    bias.set(t, -1.0);
    const TopKResponse r = session.topk(prompt, bias);
    if (r.items.front().token != top) continue;  // demoting t changed the argmax: no probe
    const double y2 = r.items.front().logprob;
    double p = std::expm1(y_top - y2) / denom;
    out.status[t] = EntryStatus::ExactIsh;
    if (!(p > prob_floor)) {
      p = prob_floor;
      out.low_confidence[t] = 1;
    }
    out.values[t] = std::log(p);
  }
  return out;
}

double IntervalBounds::max_width() const {
  return tokens.empty() ? 0.0 : (beta - alpha).maxCoeff();
}

double IntervalBounds::mean_width() const {
  return tokens.empty() ? 0.0 : (beta - alpha).mean();
}

RecoveredLogits IntervalBounds::to_logits(int32_t vocab_size) const {
  RecoveredLogits out;
  out.values = VectorXd::Zero(vocab_size);
  out.normalization = RecoveredLogits::Norm::ReferenceTokenZero;
  out.reference_token = reference_token;
  out.status.assign(vocab_size, EntryStatus::Missing);
  out.low_confidence.assign(vocab_size, 0);
  if (reference_token >= 0) out.status[reference_token] = EntryStatus::ExactIsh;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (!unreachable.empty() && unreachable[i]) continue;
    out.values[tokens[i]] = 0.5 * (alpha[i] + beta[i]);
    out.status[tokens[i]] = EntryStatus::Interval;
  }
  return out;
}

IntervalBounds recover_binary_search(
    QuerySession& session, const TokenSeq& prompt, double epsilon, double B,
    const std::function<void(int32_t token, double alpha, double beta)>& on_step) {
  if (!(epsilon > 0) || !(B > 0) || epsilon >= B) throw InputError("need 0 < epsilon < B");
  const int32_t l = session.vocab_size();
  const int32_t ref = session.argmax(prompt, {});

  IntervalBounds out;
  out.reference_token = ref;
  out.tokens.reserve(l - 1);
  std::vector<double> alphas, betas;
  std::vector<uint8_t> unreachable;

  for (int32_t t = 0; t < l; ++t) {
    if (t == ref) continue;
    double alpha = -B, beta = 0.0;
    bool won = false;
    while (beta - alpha > epsilon) {
      const double mid = 0.5 * (alpha + beta);
      LogitBias bias;
      bias.set(t, -mid);
      if (session.argmax(prompt, bias) == t) {
        alpha = mid;
        won = true;
      } else {
        beta = mid;
      }
      if (on_step) on_step(t, alpha, beta);
    }
    out.tokens.push_back(t);
    alphas.push_back(alpha);
    betas.push_back(beta);
    unreachable.push_back(!won && alpha == -B);
  }
  out.alpha = Eigen::Map<VectorXd>(alphas.data(), static_cast<Eigen::Index>(alphas.size()));
  out.beta = Eigen::Map<VectorXd>(betas.data(), static_cast<Eigen::Index>(betas.size()));
  out.unreachable = std::move(unreachable);
  return out;
}

ConstraintGraph::ConstraintGraph(int n_tracked, double prior_bound)
    : n_(n_tracked), prior_bound_(prior_bound) {
  const int m = n_ + 1;
  w_.assign(static_cast<size_t>(m) * m, kInf);
  wt_.assign(static_cast<size_t>(m) * m, kInf);
  dist_fwd_.assign(m, kInf);
  dist_rev_.assign(m, kInf);
  dist_fwd_[0] = 0.0;
  dist_rev_[0] = 0.0;
  for (int i = 1; i < m; ++i) {
    // prior: z_i - z_0 <= 0 and z_0 - z_i <= B
    w_[static_cast<size_t>(0) * m + i] = 0.0;
    wt_[static_cast<size_t>(i) * m + 0] = 0.0;
    w_[static_cast<size_t>(i) * m + 0] = prior_bound_;
    wt_[static_cast<size_t>(0) * m + i] = prior_bound_;
  }
}

void ConstraintGraph::add_constraint(int j, int i, double c) {
  const int m = n_ + 1;
  if (i < 0 || i >= m || j < 0 || j >= m || i == j) throw InputError("bad constraint nodes");
  auto& w = w_[static_cast<size_t>(j) * m + i];
  if (c < w) {
    w = c;
    wt_[static_cast<size_t>(i) * m + j] = c;
    dirty_ = true;
  }
}

void ConstraintGraph::relax(const std::vector<double>& w, std::vector<double>& d) const {
  const int m = n_ + 1;
  // Warm-started Bellman-Ford: d only ever decreases toward the true
  // distances; a pass past |V| still changing means a negative cycle.
  for (int pass = 0; pass <= m; ++pass) {
    bool changed = false;
    for (int j = 0; j < m; ++j) {
      const double dj = d[j];
      if (dj == kInf) continue;
      const double* row = w.data() + static_cast<size_t>(j) * m;
      for (int i = 0; i < m; ++i) {
        const double cand = dj + row[i];
        if (cand < d[i]) {
          d[i] = cand;
          changed = true;
        }
      }
    }
    if (!changed) return;
  }
  throw NumericalError("negative cycle: inconsistent constraints");
}

void ConstraintGraph::refresh() {
  if (!dirty_) return;
  relax(w_, dist_fwd_);
  relax(wt_, dist_rev_);
  dirty_ = false;
  if (dist_fwd_[0] < 0 || dist_rev_[0] < 0)
    throw NumericalError("negative cycle: inconsistent constraints");
}

double ConstraintGraph::upper(int i) const { return dist_fwd_[i]; }
double ConstraintGraph::lower(int i) const { return -dist_rev_[i]; }

std::vector<ConstraintGraph::Edge> ConstraintGraph::edges() const {
  std::vector<Edge> out;
  const int m = n_ + 1;
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < m; ++i) {
      const double c = w_[static_cast<size_t>(j) * m + i];
      if (c != kInf && i != j) out.push_back({j, i, c});
    }
  return out;
}

IntervalBounds shortest_path_bounds(ConstraintGraph& graph) {
  graph.refresh();
  IntervalBounds out;
  out.reference_token = 0;
  const int n = graph.tracked();
  out.tokens.resize(n);
  out.alpha.resize(n);
  out.beta.resize(n);
  out.unreachable.assign(n, 0);
  for (int i = 1; i <= n; ++i) {
    out.tokens[i - 1] = i;
    out.alpha[i - 1] = graph.lower(i);
    out.beta[i - 1] = graph.upper(i);
  }
  return out;
}

namespace {

// One batch of the multi-token attack. Bounds land in `out` at [offset..).
void hyperrectangle_batch(QuerySession& session, const TokenSeq& prompt,
                          const std::vector<int32_t>& batch, int32_t ref,
                          const HyperrectangleOptions& opts, IntervalBounds& out, size_t offset) {
  const int n = static_cast<int>(batch.size());
  const double b_bound = opts.bias_bound;
  ConstraintGraph graph(n, b_bound);
  graph.refresh();

  std::unordered_map<int32_t, int> node_of;
  node_of.reserve(batch.size() + 1);
  node_of[ref] = 0;
  for (int i = 0; i < n; ++i) node_of[batch[i]] = i + 1;

  const double c =
      opts.centering == Centering::OneOfN ? std::exp(-std::log(n + 1.0) / n) : 0.5;

  std::vector<double> bias_node(n + 1, 0.0);
  auto snapshot = [&](IntervalBounds& dst) {
    for (int i = 0; i < n; ++i) {
      dst.alpha[offset + i] = graph.lower(i + 1);
      dst.beta[offset + i] = graph.upper(i + 1);
    }
  };
  snapshot(out);

  for (int round = 1; round <= opts.rounds; ++round) {
    if (opts.stop_max_width > 0 || opts.stop_mean_width > 0) {
      double wmax = 0, wsum = 0;
      for (int i = 0; i < n; ++i) {
        const double w = graph.upper(i + 1) - graph.lower(i + 1);
        wmax = std::max(wmax, w);
        wsum += w;
      }
      if (opts.stop_max_width > 0 && wmax <= opts.stop_max_width) break;
      if (opts.stop_mean_width > 0 && wsum / n <= opts.stop_mean_width) break;
    }

    LogitBias bias;
    bias_node[0] = 0.0;
    for (int i = 1; i <= n; ++i) {
      const double a = graph.lower(i), b = graph.upper(i);
      const double v = -(1.0 - c) * a - c * b;
      bias_node[i] = v;
      if (v != 0.0) bias.set(batch[i - 1], v);
    }

    const int32_t winner = session.argmax(prompt, bias);
    const auto it = node_of.find(winner);
    if (it == node_of.end())
      throw NumericalError("argmax returned a token outside the tracked set");
    const int k = it->second;
    for (int j = 0; j <= n; ++j) {
      if (j == k) continue;
      // winner k: z_k + b_k >= z_j + b_j, i.e. z_j - z_k <= b_k - b_j
      graph.add_constraint(k, j, bias_node[k] - bias_node[j]);
    }
    graph.refresh();

    if (opts.on_round) {
      snapshot(out);
      opts.on_round(round, out);
    }
  }
  snapshot(out);
}

}  // namespace

IntervalBounds recover_hyperrectangle(QuerySession& session, const TokenSeq& prompt,
                                      const HyperrectangleOptions& opts) {
  if (opts.batch_size < 1) throw InputError("batch_size must be >= 1");
  const int32_t l = session.vocab_size();
  const int32_t ref = session.argmax(prompt, {});

  std::vector<int32_t> targets;
  if (opts.tokens.empty()) {
    targets.reserve(l - 1);
    for (int32_t t = 0; t < l; ++t)
      if (t != ref) targets.push_back(t);
  } else {
    targets = opts.tokens;
    for (int32_t t : targets)
      if (t == ref) throw InputError("target list contains the reference token");
  }

  IntervalBounds out;
  out.reference_token = ref;
  out.tokens = targets;
  out.alpha.resize(static_cast<Eigen::Index>(targets.size()));
  out.beta.resize(static_cast<Eigen::Index>(targets.size()));
  out.unreachable.assign(targets.size(), 0);

  for (size_t at = 0; at < targets.size(); at += static_cast<size_t>(opts.batch_size)) {
    const size_t end = std::min(targets.size(), at + static_cast<size_t>(opts.batch_size));
    const std::vector<int32_t> batch(targets.begin() + static_cast<long>(at),
                                     targets.begin() + static_cast<long>(end));
    hyperrectangle_batch(session, prompt, batch, ref, opts, out, at);
  }
  return out;
}

double query_lower_bound_per_logit(double B, double epsilon, double N) {
  if (!(B > 0) || !(epsilon > 0) || !(N > 1)) throw InputError("need B, epsilon > 0 and N > 1");
  if (epsilon >= B) return 0.0;
  return std::log2(B / epsilon) / std::log2(N);
}

double query_lower_bound(double l, double B, double epsilon, double N) {
  return l * query_lower_bound_per_logit(B, epsilon, N);
}

std::vector<RecoveredLogits> recover_reference_token_expanded(
    QuerySession& session, const TokenSeq& p0, int32_t pivot, const std::vector<int32_t>& batch,
    double B, double b_separation, int m) {
  if (b_separation <= 0) throw InputError("b_separation must be positive");
  const int32_t l = session.vocab_size();

  LogitBias bias;
  bias.set(pivot, B);
  for (int32_t t : batch) bias.set(t, B - b_separation);
  const auto positions = session.generate(p0, bias, m);

  std::vector<RecoveredLogits> out;
  out.reserve(positions.size());
  for (const auto& r : positions) {
    RecoveredLogits rec;
    rec.values = VectorXd::Zero(l);
    rec.normalization = RecoveredLogits::Norm::ReferenceTokenZero;
    rec.reference_token = pivot;
    rec.status.assign(l, EntryStatus::Missing);
    rec.low_confidence.assign(l, 0);
    // The pivot must have been emitted, else this position's prompt drifted.
    if (r.items.front().token == pivot) {
      rec.status[pivot] = EntryStatus::ExactIsh;
      const double y_pivot = r.items.front().logprob;
      for (int32_t t : batch) {
        if (auto y = r.find(t)) {
          rec.values[t] = *y - y_pivot + b_separation;
          rec.status[t] = EntryStatus::ExactIsh;
        }
      }
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace unembed
