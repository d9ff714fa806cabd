#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "unembed/config.hpp"
#include "unembed/numeric.hpp"

namespace unembed {

enum class NormKind { None, RMSNorm, LayerNorm };
enum class Precision { Fp64, Fp32, Fp16Emulated };
enum class NoiseMode { PromptKeyed, PerQuery };

using TokenSeq = std::vector<int32_t>;

// Everything needed to rebuild the secret final layer and its defenses.
// Identical specs produce bit-identical victims.
struct VictimSpec {
  int32_t vocab_size = 0;
  int32_t hidden_dim = 0;
  uint64_t seed = 0;
  NormKind norm_kind = NormKind::RMSNorm;
  bool norm_bias_enabled = true;          // only meaningful with a norm layer
  bool norm_scale_randomized = false;     // identity scale by default
  Precision precision = Precision::Fp64;
  int32_t planted_rank_deficit = 0;
  double logit_noise_sigma = 0.0;
  NoiseMode noise_mode = NoiseMode::PromptKeyed;
  std::optional<int> weight_quantization_bits;  // 4 or 8
  std::optional<int32_t> spoof_target_dim;
  double spoof_sv_fraction = 0.5;   // extra singular values vs smallest genuine
  double spoof_noise_std = 0.01;    // x mean per-dimension hidden std

  void validate() const;  // throws ConfigError

  static VictimSpec from_config(const KvConfig& cfg);
  static VictimSpec from_config_file(const std::string& path);
  KvConfig to_config() const;
};

std::string to_string(NormKind k);
std::string to_string(Precision p);

// The secret model under attack: final projection W (l x h), a deterministic
// prompt -> hidden-state generator, and the configured defenses. Read-only
// and safe for concurrent queries after construction.
class Victim {
 public:
  static Victim build(const VictimSpec& spec);

  // Test-only: replace the generated projection with an explicit matrix
  // (row count must be vocab_size, column count hidden_dim).
  static Victim with_projection(const VictimSpec& spec, const MatrixXd& w);

  // Defended, precision-faithful forward pass: what the API serves.
  VectorXd logits(const TokenSeq& prompt) const;

  // Ground-truth oracle for tests only; never exposed through the query API.
  // Returns g(p) exactly (fp64), including spoof noise dimensions if any.
  VectorXd hidden(const TokenSeq& prompt) const;

  // fp64 forward pass on the unquantized projection with no noise. Equals
  // logits() bit-for-bit when the victim has no defenses and fp64 precision.
  VectorXd true_logits(const TokenSeq& prompt) const;

  // Post-hoc architecture spoofing: widen to target_dim > h with orthogonal
  // low-singular-value columns and noise-padded hidden states.
  Victim spoofed(int32_t target_dim) const;

  const VictimSpec& spec() const { return spec_; }
  int32_t vocab_size() const { return spec_.vocab_size; }
  int32_t hidden_dim() const { return spec_.hidden_dim; }
  // Width of the projection actually serving queries (> h when spoofed).
  int32_t serving_dim() const { return static_cast<int32_t>(w_.cols()); }
  bool is_spoofed() const { return serving_dim() > spec_.hidden_dim; }

  const RowMatrixXd& projection() const { return w_; }
  // W with the norm scale folded in (base columns only).
  MatrixXd effective_projection() const;
  const VectorXd& norm_scale() const { return scale_; }
  const VectorXd& norm_bias() const { return bias_; }

  // Fraction of a 1000-prompt sample whose argmax survived spoofing; 1.0 for
  // unspoofed victims.
  double spoof_argmax_agreement() const { return spoof_agreement_; }

 private:
  Victim() = default;
  void finalize_serving_matrices();
  VectorXd base_hidden(const TokenSeq& prompt, uint64_t prompt_hash) const;
  void validate_prompt(const TokenSeq& prompt) const;

  VictimSpec spec_;
  RowMatrixXd w_;            // serving projection, unquantized (l x h or l x t)
  RowMatrixXd w_serving_;    // quantized when the defense is on, else == w_
  RowMatrixXf w_serving32_;  // fp32 cache
  RowMatrixXf w_serving16_;  // fp16-grid cache (held as floats)
  VectorXd scale_, bias_;    // norm parameters (bias empty when disabled)
  RowMatrixXd a1_, a2_;      // hidden generator layers
  VectorXd c1_, c2_;
  double spoof_noise_scale_ = 0.0;  // absolute std of the padded dimensions
  double spoof_agreement_ = 1.0;
  // per-query noise mode only; shared so Victim stays copyable
  std::shared_ptr<std::atomic<uint64_t>> query_counter_ =
      std::make_shared<std::atomic<uint64_t>>(0);
};

// Spec operation aliases.
Victim build_victim(const VictimSpec& spec);
Victim apply_spoofing(const Victim& victim, int32_t target_dim);

}  // namespace unembed
