#include "unembed/extract.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <unordered_set>

#include "unembed/errors.hpp"
#include "unembed/rng.hpp"

namespace unembed {

namespace {

TokenSeq draw_distinct_prompt(Rng& rng, int32_t vocab, int len,
                              std::unordered_set<uint64_t>& seen) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    TokenSeq p(len);
    for (int i = 0; i < len; ++i) p[i] = static_cast<int32_t>(rng.below(static_cast<uint32_t>(vocab)));
    const uint64_t h = hash_tokens(0x9e37, p);
    if (seen.insert(h).second) return p;
  }
  throw NumericalError("could not draw a fresh prompt");
}

}  // namespace

QueryMatrix collect_query_matrix(QuerySession& session, int n, uint64_t prompt_seed,
                                 const std::vector<int32_t>& token_subset, int prompt_len,
                                 EmitPrecision source_precision) {
  if (n < 1) throw InputError("n must be >= 1");
  QueryMatrix q;
  q.source_precision = source_precision;
  if (token_subset.empty()) {
    q.token_ids.resize(session.vocab_size());
    for (int32_t t = 0; t < session.vocab_size(); ++t) q.token_ids[t] = t;
  } else {
    q.token_ids = token_subset;
  }
  q.rows.resize(0, static_cast<Eigen::Index>(q.token_ids.size()));
  collect_more(q, session, n, prompt_seed, prompt_len);
  return q;
}

void collect_more(QueryMatrix& q, QuerySession& session, int extra, uint64_t prompt_seed,
                  int prompt_len) {
  Rng rng(hash_mix(prompt_seed, 0x636f6c6c656374ull));
  std::unordered_set<uint64_t> seen;
  // re-derive the stream so appended prompts stay distinct from earlier ones
  const int have = static_cast<int>(q.rows.rows());
  for (int i = 0; i < have; ++i)
    draw_distinct_prompt(rng, session.vocab_size(), prompt_len, seen);

  q.rows.conservativeResize(have + extra, Eigen::NoChange);
  q.prompt_ids.reserve(have + extra);
  for (int i = 0; i < extra; ++i) {
    const TokenSeq p = draw_distinct_prompt(rng, session.vocab_size(), prompt_len, seen);
    const VectorXd z = session.all_logits(p);
    for (size_t c = 0; c < q.token_ids.size(); ++c)
      q.rows(have + i, static_cast<Eigen::Index>(c)) = z[q.token_ids[c]];
    q.prompt_ids.push_back(hash_tokens(prompt_seed, p));
  }
}

namespace {

SpectrumReport spectrum_from_values(const VectorXd& s) {
  SpectrumReport rep;
  rep.values = s;
  const Eigen::Index m = s.size();
  rep.log_gaps = VectorXd::Zero(std::max<Eigen::Index>(m - 1, 0));
  const double tiny = std::numeric_limits<double>::min();
  for (Eigen::Index i = 0; i + 1 < m; ++i) {
    const double hi = std::max(s[i], tiny);
    const double lo = std::max(s[i + 1], tiny);
    rep.log_gaps[i] = std::log(hi) - std::log(lo);
  }
  // Gaps are indexed 0..m-2 (candidate dim = gap index + 1); the final gap is
  // excluded from the search.
  Eigen::Index best_gap = 0;
  for (Eigen::Index i = 1; i <= m - 3; ++i)
    if (rep.log_gaps[i] > rep.log_gaps[best_gap]) best_gap = i;
  rep.gap_index = m >= 2 ? static_cast<int>(best_gap) + 1 : 1;
  return rep;
}

}  // namespace

DimResult extract_hidden_dim(const QueryMatrix& q) {
  DimResult out;
  const Eigen::Index m = std::min(q.rows.rows(), q.rows.cols());
  if (m < 1) throw InputError("empty query matrix");
  const VectorXd s = singular_values(q.rows);
  if (m <= 2) {
    out.dim = 1;
    out.needs_more_queries = true;
    out.spectrum = spectrum_from_values(s);
    return out;
  }
  out.spectrum = spectrum_from_values(s);
  out.dim = out.spectrum.gap_index;
  out.needs_more_queries = out.dim >= static_cast<int>(m) - 1;
  return out;
}

AutoDimResult extract_hidden_dim_auto(QuerySession& session, int expected_hint,
                                      const AutoDimOptions& opts) {
  int n = std::max(8, 2 * std::max(1, expected_hint));
  QueryMatrix q = collect_query_matrix(session, n, opts.prompt_seed, opts.token_subset,
                                       opts.prompt_len);
  for (;;) {
    const DimResult r = extract_hidden_dim(q);
    if (!r.needs_more_queries && r.dim < n / 2)
      return AutoDimResult{r.dim, n, r.spectrum};
    if (n >= opts.max_n)
      throw NumericalError("no stable singular-value gap by n = " + std::to_string(n));
    const int extra = n;
    collect_more(q, session, extra, opts.prompt_seed, opts.prompt_len);
    n *= 2;
  }
}

StolenLayer extract_layer(const QueryMatrix& q, int dim) {
  const Eigen::Index m = std::min(q.rows.rows(), q.rows.cols());
  if (dim < 1 || dim > m) throw InputError("dim out of range for the query matrix");
  const ThinSvd svd = thin_svd(q.rows.transpose());
  if (svd.s[dim - 1] <= svd.s[0] * 1e-13)
    throw NumericalError("requested dim exceeds the numerical rank");
  StolenLayer out;
  out.w = svd.u.leftCols(dim) * svd.s.head(dim).asDiagonal();
  out.symmetry = Symmetry::Affine;
  return out;
}

AffineAlignment align_affine(const MatrixXd& stolen, const MatrixXd& truth) {
  if (stolen.rows() != truth.rows()) throw InputError("row count mismatch");
  AffineAlignment out;
  out.g = solve_lstsq(stolen, truth);
  const MatrixXd resid = stolen * out.g - truth;
  out.rms = std::sqrt(resid.squaredNorm() / static_cast<double>(resid.size()));
  return out;
}

NormDetectResult detect_norm_layer(const QueryMatrix& q) {
  NormDetectResult out;
  QueryMatrix work;
  work.token_ids = q.token_ids;
  work.rows = center_rows_vocab(q.rows);

  const DimResult raw = extract_hidden_dim(work);
  out.dim_raw = raw.dim;

  // Query-mean in source precision, spectrum in fp64.
  VectorXd mu = work.rows.colwise().mean();
  if (q.source_precision != EmitPrecision::Fp64)
    for (Eigen::Index i = 0; i < mu.size(); ++i) mu[i] = emit_round(mu[i], q.source_precision);
  QueryMatrix centered;
  centered.token_ids = q.token_ids;
  centered.rows = work.rows.rowwise() - mu.transpose();
  const DimResult cen = extract_hidden_dim(centered);
  out.dim_centered = cen.dim;

  if (raw.needs_more_queries || cen.needs_more_queries) {
    out.kind = NormDetect::Inconclusive;
    return out;
  }
  const int drop = out.dim_raw - out.dim_centered;
  if (drop == 1) out.kind = NormDetect::LayerNorm;
  else if (drop == 0) out.kind = NormDetect::RMSNorm;
  else out.kind = NormDetect::Inconclusive;
  return out;
}

StolenLayer extract_layer_orthogonal(const QueryMatrix& q, int dim) {
  const int h = dim;
  const Eigen::Index n = q.rows.rows();
  const Eigen::Index need = static_cast<Eigen::Index>(h) * (h + 1) / 2 + h + 1;
  if (n < need)
    throw InputError("need at least " + std::to_string(need) + " query vectors for h = " +
                     std::to_string(h));

  // Shift so the ellipsoid passes through the origin, then project to rank h.
  MatrixXd cols = q.rows.transpose();  // l x n
  const VectorXd x0 = cols.col(0);
  cols.colwise() -= x0;
  const ThinSvd svd = thin_svd(cols);
  if (svd.s[h - 1] <= svd.s[0] * 1e-12)
    throw NumericalError("query vectors do not span the requested dimension");
  const MatrixXd u = svd.u.leftCols(h);
  const MatrixXd x = u.transpose() * cols;  // h x n

  // Homogeneous system x^T A x - 2 d^T x = 0 in vech(A) and d.
  const Eigen::Index na = static_cast<Eigen::Index>(h) * (h + 1) / 2;
  MatrixXd design(n, na + h);
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::Index idx = 0;
    for (int a = 0; a < h; ++a)
      for (int b = a; b < h; ++b)
        design(j, idx++) = (a == b) ? x(a, j) * x(a, j) : 2.0 * x(a, j) * x(b, j);
    for (int a = 0; a < h; ++a) design(j, na + a) = -2.0 * x(a, j);
  }

  const ThinSvd ds = thin_svd(design);
  const Eigen::Index ncol = na + h;
  const double s_last = ds.s[ncol - 1];
  const double s_prev = ds.s[ncol - 2];
  if (!(s_prev >= 1e3 * s_last))
    throw NumericalError("nullspace dimension != 1: insufficient or degenerate queries");
  const VectorXd v = ds.vt.row(ncol - 1).transpose();

  MatrixXd a_form(h, h);
  Eigen::Index idx = 0;
  for (int a = 0; a < h; ++a)
    for (int b = a; b < h; ++b) {
      a_form(a, b) = v[idx];
      a_form(b, a) = v[idx];
      ++idx;
    }
  const VectorXd d = v.tail(h);

  const VectorXd center = a_form.fullPivLu().solve(d);
  const double t = center.dot(a_form * center);
  if (!std::isfinite(t) || t == 0.0)
    throw NumericalError("degenerate ellipsoid fit (c^T A c = 0)");
  a_form /= t;  // now c^T A c = 1, and A flips to positive definite if needed

  Eigen::LLT<MatrixXd> chol(a_form);
  if (chol.info() != Eigen::Success)
    throw NumericalError("quadratic form is not positive definite");
  const MatrixXd m_factor = MatrixXd(chol.matrixU());  // m^T m = A

  StolenLayer out;
  // w = U * M^{-1}
  out.w = m_factor.transpose()
              .triangularView<Eigen::Lower>()
              .solve(u.transpose())
              .transpose();
  out.symmetry = Symmetry::Orthogonal;
  out.ellipsoid = EllipsoidDiagnostics{m_factor, center, x};
  return out;
}

std::vector<SpectrumRow> spectrum_plot_data(const SpectrumReport& report) {
  std::vector<SpectrumRow> rows;
  rows.reserve(static_cast<size_t>(report.values.size()));
  for (Eigen::Index i = 0; i < report.values.size(); ++i) {
    const double gap = i < report.log_gaps.size() ? report.log_gaps[i] : 0.0;
    rows.push_back({static_cast<int>(i) + 1, report.values[i], gap});
  }
  return rows;
}

void write_spectrum_csv(const std::string& path, const SpectrumReport& report) {
  std::ofstream f(path);
  if (!f) throw InputError("cannot open for writing: " + path);
  f << "index,singular_value,log_gap\n";
  char buf[96];
  for (const auto& row : spectrum_plot_data(report)) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", row.index, row.value, row.log_gap);
    f << buf;
  }
}

MatrixXd center_rows_vocab(const MatrixXd& m) {
  return m.colwise() - m.rowwise().mean();
}

double max_principal_angle(const MatrixXd& a, const MatrixXd& b) {
  const ThinSvd sa = thin_svd(a);
  const ThinSvd sb = thin_svd(b);
  // keep numerically meaningful directions only
  auto rank_of = [](const ThinSvd& s) {
    Eigen::Index r = 0;
    while (r < s.s.size() && s.s[r] > s.s[0] * 1e-12) ++r;
    return r;
  };
  const MatrixXd ua = sa.u.leftCols(rank_of(sa));
  const MatrixXd ub = sb.u.leftCols(rank_of(sb));
  const VectorXd c = singular_values(MatrixXd(ua.transpose() * ub));
  const double cmin = std::clamp(c[c.size() - 1], -1.0, 1.0);
  return std::acos(cmin);
}

}  // namespace unembed
