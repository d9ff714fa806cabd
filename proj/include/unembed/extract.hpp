#pragma once

#include <optional>

#include "unembed/api.hpp"
#include "unembed/linalg.hpp"

namespace unembed {

// Stacked logit responses, one prompt per row, columns restricted to
// token_ids when a subset was requested.
struct QueryMatrix {
  MatrixXd rows;                   // n x l'
  std::vector<int32_t> token_ids;  // column -> token id
  EmitPrecision source_precision = EmitPrecision::Fp64;
  std::vector<uint64_t> prompt_ids;
};

// n random distinct prompts against the full-logits surface.
QueryMatrix collect_query_matrix(QuerySession& session, int n, uint64_t prompt_seed,
                                 const std::vector<int32_t>& token_subset = {},
                                 int prompt_len = 8,
                                 EmitPrecision source_precision = EmitPrecision::Fp64);

// Appends `extra` fresh rows, continuing the prompt stream.
void collect_more(QueryMatrix& q, QuerySession& session, int extra, uint64_t prompt_seed,
                  int prompt_len = 8);

struct SpectrumReport {
  VectorXd values;    // descending
  VectorXd log_gaps;  // log_gaps[i] = log values[i] - log values[i+1], guarded
  int gap_index = 0;  // 1-based dimension estimate
};

struct DimResult {
  int dim = 0;
  bool needs_more_queries = false;  // no usable interior gap at this n
  SpectrumReport spectrum;
};

// Numerical rank via the largest multiplicative gap between consecutive
// singular values. The final gap is excluded from the search and exact zeros
// are clamped to the smallest positive double before taking logs.
DimResult extract_hidden_dim(const QueryMatrix& q);

struct AutoDimOptions {
  int max_n = 1 << 14;
  uint64_t prompt_seed = 1;
  int prompt_len = 8;
  std::vector<int32_t> token_subset;
};

struct AutoDimResult {
  int dim = 0;
  int n_used = 0;
  SpectrumReport spectrum;
};

// Doubles n from 2x the expected dimension until the gap index settles below
// n/2. Throws NumericalError when max_n is hit without a stable gap.
AutoDimResult extract_hidden_dim_auto(QuerySession& session, int expected_hint,
                                      const AutoDimOptions& opts = {});

enum class Symmetry { Affine, Orthogonal };

// Diagnostics from the ellipsoid fit (orthogonal recovery path).
struct EllipsoidDiagnostics {
  MatrixXd m;        // Cholesky factor, m^T m = A
  VectorXd center;   // ellipsoid center in the projected basis
  MatrixXd points;   // h x n projected, origin-shifted query points
};

struct StolenLayer {
  MatrixXd w;  // l x dim
  Symmetry symmetry = Symmetry::Affine;
  std::optional<EllipsoidDiagnostics> ellipsoid;
};

// U * Sigma from the compact SVD of Q^T, truncated to `dim`: equals the true
// layer up to an invertible dim x dim factor.
StolenLayer extract_layer(const QueryMatrix& q, int dim);

struct AffineAlignment {
  MatrixXd g;
  double rms;  // per-entry RMS of stolen*g - truth
};

// Solve the least-squares system stolen * G ~ truth (one solve per column).
AffineAlignment align_affine(const MatrixXd& stolen, const MatrixXd& truth);

enum class NormDetect { LayerNorm, RMSNorm, Inconclusive };

struct NormDetectResult {
  NormDetect kind = NormDetect::Inconclusive;
  int dim_raw = 0;       // gap index before query-mean subtraction
  int dim_centered = 0;  // and after
};

// LayerNorm's centering costs one dimension once the per-query mean is
// subtracted; RMSNorm loses nothing. The mean is formed in the matrix's
// source precision, spectra in fp64.
NormDetectResult detect_norm_layer(const QueryMatrix& q);

// Ellipsoid-fitting recovery: exact up to an orthogonal factor when hidden
// states lie on a sphere (norm scale folded into W). Needs
// n >= h(h+1)/2 + h + 1 rows; practical for h <= ~48.
StolenLayer extract_layer_orthogonal(const QueryMatrix& q, int dim);

struct SpectrumRow {
  int index;
  double value;
  double log_gap;
};

std::vector<SpectrumRow> spectrum_plot_data(const SpectrumReport& report);
void write_spectrum_csv(const std::string& path, const SpectrumReport& report);

// Row-centers each logit vector across the vocab dimension (the
// logprob-to-centered-logit convention).
MatrixXd center_rows_vocab(const MatrixXd& m);

// Largest principal angle between the column spaces, radians.
double max_principal_angle(const MatrixXd& a, const MatrixXd& b);

}  // namespace unembed
