#include "unembed/victim.hpp"

#include <cmath>

#include "unembed/errors.hpp"
#include "unembed/fp16.hpp"
#include "unembed/linalg.hpp"
#include "unembed/rng.hpp"

namespace unembed {

namespace {

// Seed-stream domains. New streams must get fresh tags.
constexpr uint64_t kDomainW = 0x01;
constexpr uint64_t kDomainFactorL = 0x02;
constexpr uint64_t kDomainFactorR = 0x03;
constexpr uint64_t kDomainScale = 0x04;
constexpr uint64_t kDomainBias = 0x05;
constexpr uint64_t kDomainA1 = 0x06;
constexpr uint64_t kDomainC1 = 0x07;
constexpr uint64_t kDomainA2 = 0x08;
constexpr uint64_t kDomainC2 = 0x09;
constexpr uint64_t kDomainNoise = 0x0a;
constexpr uint64_t kDomainSpoofBasis = 0x0b;
constexpr uint64_t kDomainSpoofPad = 0x0c;
constexpr uint64_t kDomainSpoofEst = 0x0d;
constexpr uint64_t kDomainSpoofCheck = 0x0e;

void fill_gaussian(Rng& rng, double scale, double* data, size_t n) {
  for (size_t i = 0; i < n; ++i) data[i] = scale * rng.gaussian();
}

TokenSeq sample_prompt(Rng& rng, int32_t vocab, int len) {
  TokenSeq p(len);
  for (int i = 0; i < len; ++i) p[i] = static_cast<int32_t>(rng.below(static_cast<uint32_t>(vocab)));
  return p;
}

}  // namespace

std::string to_string(NormKind k) {
  switch (k) {
    case NormKind::None: return "none";
    case NormKind::RMSNorm: return "rmsnorm";
    case NormKind::LayerNorm: return "layernorm";
  }
  return "?";
}

std::string to_string(Precision p) {
  switch (p) {
    case Precision::Fp64: return "fp64";
    case Precision::Fp32: return "fp32";
    case Precision::Fp16Emulated: return "fp16";
  }
  return "?";
}

void VictimSpec::validate() const {
  if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
  if (hidden_dim <= 0) throw ConfigError("hidden_dim must be positive");
  if (hidden_dim >= vocab_size) throw ConfigError("hidden_dim must be < vocab_size");
  if (planted_rank_deficit < 0 || planted_rank_deficit >= hidden_dim)
    throw ConfigError("planted_rank_deficit must be in [0, hidden_dim)");
  if (logit_noise_sigma < 0) throw ConfigError("logit_noise_sigma must be >= 0");
  if (weight_quantization_bits && *weight_quantization_bits != 4 && *weight_quantization_bits != 8)
    throw ConfigError("weight_quantization_bits must be 4 or 8");
  if (spoof_target_dim && *spoof_target_dim <= hidden_dim)
    throw ConfigError("spoof_target_dim must exceed hidden_dim");
  if (spoof_sv_fraction <= 0) throw ConfigError("spoof_sv_fraction must be positive");
  if (spoof_noise_std <= 0) throw ConfigError("spoof_noise_std must be positive");
}

VictimSpec VictimSpec::from_config(const KvConfig& cfg) {
  cfg.require_known({"vocab_size", "hidden_dim", "seed", "norm_kind", "norm_bias",
                     "norm_scale_randomized", "precision", "planted_rank_deficit",
                     "logit_noise_sigma", "noise_mode", "weight_quantization_bits",
                     "spoof_target_dim", "spoof_sv_fraction", "spoof_noise_std"});
  VictimSpec s;
  s.vocab_size = static_cast<int32_t>(cfg.get_int("vocab_size"));
  s.hidden_dim = static_cast<int32_t>(cfg.get_int("hidden_dim"));
  s.seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
  const std::string norm = cfg.get_str("norm_kind", "rmsnorm");
  if (norm == "none") s.norm_kind = NormKind::None;
  else if (norm == "rmsnorm") s.norm_kind = NormKind::RMSNorm;
  else if (norm == "layernorm") s.norm_kind = NormKind::LayerNorm;
  else throw ConfigError("norm_kind must be none|rmsnorm|layernorm");
  s.norm_bias_enabled = cfg.get_bool("norm_bias", true);
  s.norm_scale_randomized = cfg.get_bool("norm_scale_randomized", false);
  const std::string prec = cfg.get_str("precision", "fp64");
  if (prec == "fp64") s.precision = Precision::Fp64;
  else if (prec == "fp32") s.precision = Precision::Fp32;
  else if (prec == "fp16") s.precision = Precision::Fp16Emulated;
  else throw ConfigError("precision must be fp64|fp32|fp16");
  s.planted_rank_deficit = static_cast<int32_t>(cfg.get_int("planted_rank_deficit", 0));
  s.logit_noise_sigma = cfg.get_real("logit_noise_sigma", 0.0);
  const std::string nm = cfg.get_str("noise_mode", "prompt_keyed");
  if (nm == "prompt_keyed") s.noise_mode = NoiseMode::PromptKeyed;
  else if (nm == "per_query") s.noise_mode = NoiseMode::PerQuery;
  else throw ConfigError("noise_mode must be prompt_keyed|per_query");
  if (auto bits = cfg.get_opt_int("weight_quantization_bits"))
    s.weight_quantization_bits = static_cast<int>(*bits);
  if (auto dim = cfg.get_opt_int("spoof_target_dim"))
    s.spoof_target_dim = static_cast<int32_t>(*dim);
  s.spoof_sv_fraction = cfg.get_real("spoof_sv_fraction", 0.5);
  s.spoof_noise_std = cfg.get_real("spoof_noise_std", 0.01);
  s.validate();
  return s;
}

VictimSpec VictimSpec::from_config_file(const std::string& path) {
  return from_config(KvConfig::parse_file(path));
}

KvConfig VictimSpec::to_config() const {
  KvConfig cfg;
  cfg.set_int("vocab_size", vocab_size);
  cfg.set_int("hidden_dim", hidden_dim);
  cfg.set_int("seed", static_cast<int64_t>(seed));
  cfg.set("norm_kind", to_string(norm_kind));
  cfg.set_bool("norm_bias", norm_bias_enabled);
  cfg.set_bool("norm_scale_randomized", norm_scale_randomized);
  cfg.set("precision", to_string(precision));
  cfg.set_int("planted_rank_deficit", planted_rank_deficit);
  cfg.set_real("logit_noise_sigma", logit_noise_sigma);
  cfg.set("noise_mode", noise_mode == NoiseMode::PromptKeyed ? "prompt_keyed" : "per_query");
  if (weight_quantization_bits) cfg.set_int("weight_quantization_bits", *weight_quantization_bits);
  if (spoof_target_dim) cfg.set_int("spoof_target_dim", *spoof_target_dim);
  cfg.set_real("spoof_sv_fraction", spoof_sv_fraction);
  cfg.set_real("spoof_noise_std", spoof_noise_std);
  return cfg;
}

Victim Victim::build(const VictimSpec& spec) {
  spec.validate();
  Victim v;
  v.spec_ = spec;
  v.spec_.spoof_target_dim.reset();  // applied below so caches build once
  const int32_t l = spec.vocab_size;
  const int32_t h = spec.hidden_dim;

  if (spec.planted_rank_deficit == 0) {
    Rng rng(hash_mix(spec.seed, kDomainW));
    v.w_.resize(l, h);
    fill_gaussian(rng, 1.0 / std::sqrt(static_cast<double>(h)), v.w_.data(),
                  static_cast<size_t>(l) * h);
  } else {
    // Low-rank factorization keeps entry scale ~1/sqrt(h) while forcing
    // rank(W) = h - d: the right factor has orthonormal rows.
    const int32_t r = h - spec.planted_rank_deficit;
    MatrixXd left(l, r);
    Rng rl(hash_mix(spec.seed, kDomainFactorL));
    fill_gaussian(rl, 1.0 / std::sqrt(static_cast<double>(r)), left.data(),
                  static_cast<size_t>(l) * r);
    MatrixXd right_raw(r, h);
    Rng rr(hash_mix(spec.seed, kDomainFactorR));
    fill_gaussian(rr, 1.0, right_raw.data(), static_cast<size_t>(r) * h);
    Eigen::HouseholderQR<MatrixXd> qr(right_raw.transpose());
    MatrixXd q = qr.householderQ() * MatrixXd::Identity(h, r);
    v.w_ = left * q.transpose();
  }

  v.scale_ = VectorXd::Ones(h);
  if (spec.norm_scale_randomized) {
    Rng rs(hash_mix(spec.seed, kDomainScale));
    for (int32_t i = 0; i < h; ++i)
      v.scale_[i] = std::max(0.2, 1.0 + 0.1 * rs.gaussian());
  }
  if (spec.norm_kind != NormKind::None && spec.norm_bias_enabled) {
    Rng rb(hash_mix(spec.seed, kDomainBias));
    v.bias_.resize(h);
    fill_gaussian(rb, 0.5 / std::sqrt(static_cast<double>(h)), v.bias_.data(), h);
  }

  v.a1_.resize(h, h);
  v.a2_.resize(h, h);
  v.c1_.resize(h);
  v.c2_.resize(h);
  const double wscale = 1.0 / std::sqrt(static_cast<double>(h));
  Rng ra1(hash_mix(spec.seed, kDomainA1));
  fill_gaussian(ra1, wscale, v.a1_.data(), static_cast<size_t>(h) * h);
  Rng rc1(hash_mix(spec.seed, kDomainC1));
  fill_gaussian(rc1, 0.3, v.c1_.data(), h);
  Rng ra2(hash_mix(spec.seed, kDomainA2));
  fill_gaussian(ra2, wscale, v.a2_.data(), static_cast<size_t>(h) * h);
  Rng rc2(hash_mix(spec.seed, kDomainC2));
  fill_gaussian(rc2, 0.3, v.c2_.data(), h);

  v.finalize_serving_matrices();
  if (spec.spoof_target_dim) return v.spoofed(*spec.spoof_target_dim);
  return v;
}

Victim Victim::with_projection(const VictimSpec& spec, const MatrixXd& w) {
  Victim v = build(spec);
  if (w.rows() != spec.vocab_size || w.cols() != spec.hidden_dim)
    throw ConfigError("with_projection: shape mismatch");
  v.w_ = w;
  v.finalize_serving_matrices();
  return v;
}

void Victim::finalize_serving_matrices() {
  if (spec_.weight_quantization_bits) {
    // Symmetric per-column quantization onto 2^bits - 1 signed levels.
    const int bits = *spec_.weight_quantization_bits;
    const double levels = static_cast<double>((1 << (bits - 1)) - 1);
    w_serving_ = w_;
    for (Eigen::Index c = 0; c < w_serving_.cols(); ++c) {
      const double m = w_serving_.col(c).cwiseAbs().maxCoeff();
      if (m == 0.0) continue;
      const double q = m / levels;
      for (Eigen::Index r = 0; r < w_serving_.rows(); ++r)
        w_serving_(r, c) = std::round(w_serving_(r, c) / q) * q;
    }
  } else {
    w_serving_ = w_;
  }
  w_serving32_ = w_serving_.cast<float>();
  w_serving16_.resize(w_serving_.rows(), w_serving_.cols());
  for (Eigen::Index r = 0; r < w_serving_.rows(); ++r)
    for (Eigen::Index c = 0; c < w_serving_.cols(); ++c)
      w_serving16_(r, c) = round_to_half(static_cast<float>(w_serving_(r, c)));
}

void Victim::validate_prompt(const TokenSeq& prompt) const {
  if (prompt.empty()) throw InputError("prompt must be non-empty");
  for (int32_t t : prompt)
    if (t < 0 || t >= spec_.vocab_size) throw InputError("token id out of range");
}

VectorXd Victim::base_hidden(const TokenSeq&, uint64_t prompt_hash) const {
  const int32_t h = spec_.hidden_dim;
  const auto& ops = kernels::active_ops();

  VectorXd x0(h);
  Rng rng(prompt_hash);
  fill_gaussian(rng, 1.0, x0.data(), h);

  VectorXd x1(h);
  ops.matvec_f64(a1_.data(), h, h, x0.data(), x1.data());
  for (int32_t i = 0; i < h; ++i) x1[i] = std::tanh(x1[i] + c1_[i]);
  VectorXd x2(h);
  ops.matvec_f64(a2_.data(), h, h, x1.data(), x2.data());
  x2 += c2_;

  switch (spec_.norm_kind) {
    case NormKind::None:
      return x2;
    case NormKind::RMSNorm: {
      VectorXd g = scale_.cwiseProduct(x2 / x2.norm());
      if (bias_.size()) g += bias_;
      return g;
    }
    case NormKind::LayerNorm: {
      VectorXd centered = x2.array() - x2.mean();
      VectorXd g = scale_.cwiseProduct(centered / centered.norm());
      if (bias_.size()) g += bias_;
      return g;
    }
  }
  return x2;
}

VectorXd Victim::hidden(const TokenSeq& prompt) const {
  validate_prompt(prompt);
  const uint64_t ph = hash_tokens(spec_.seed, prompt);
  VectorXd g = base_hidden(prompt, ph);
  if (!is_spoofed()) return g;
  const Eigen::Index pad = serving_dim() - spec_.hidden_dim;
  VectorXd full(serving_dim());
  full.head(spec_.hidden_dim) = g;
  Rng rng(hash_mix(ph, kDomainSpoofPad));
  fill_gaussian(rng, spoof_noise_scale_, full.data() + spec_.hidden_dim, pad);
  return full;
}

VectorXd Victim::logits(const TokenSeq& prompt) const {
  const VectorXd g = hidden(prompt);
  const Eigen::Index l = w_serving_.rows();
  const Eigen::Index dim = w_serving_.cols();
  const auto& ops = kernels::active_ops();
  VectorXd z(l);

  switch (spec_.precision) {
    case Precision::Fp64:
      ops.matvec_f64(w_serving_.data(), l, dim, g.data(), z.data());
      break;
    case Precision::Fp32: {
      Eigen::VectorXf g32 = g.cast<float>();
      Eigen::VectorXf z32(l);
      ops.matvec_f32(w_serving32_.data(), l, dim, g32.data(), z32.data());
      z = z32.cast<double>();
      break;
    }
    case Precision::Fp16Emulated: {
      // Products round to the half grid, the accumulator stays fp32, the
      // stored logit rounds to the half grid again.
      Eigen::VectorXf g16(dim);
      for (Eigen::Index j = 0; j < dim; ++j)
        g16[j] = round_to_half(static_cast<float>(g[j]));
      for (Eigen::Index r = 0; r < l; ++r) {
        const float* row = w_serving16_.data() + r * dim;
        float acc = 0.0f;
        for (Eigen::Index j = 0; j < dim; ++j) acc += round_to_half(row[j] * g16[j]);
        z[r] = static_cast<double>(round_to_half(acc));
      }
      break;
    }
  }

  if (spec_.logit_noise_sigma > 0.0) {
    uint64_t key;
    if (spec_.noise_mode == NoiseMode::PromptKeyed) {
      key = hash_mix(hash_tokens(spec_.seed, prompt), kDomainNoise);
    } else {
      const uint64_t n = query_counter_->fetch_add(1, std::memory_order_relaxed);
      key = hash_mix(hash_mix(spec_.seed, kDomainNoise), n);
    }
    Rng rng(key);
    for (Eigen::Index i = 0; i < l; ++i) z[i] += spec_.logit_noise_sigma * rng.gaussian();
  }
  return z;
}

VectorXd Victim::true_logits(const TokenSeq& prompt) const {
  const VectorXd g = hidden(prompt);
  VectorXd z(w_.rows());
  kernels::active_ops().matvec_f64(w_.data(), w_.rows(), w_.cols(), g.data(), z.data());
  return z;
}

MatrixXd Victim::effective_projection() const {
  return MatrixXd(w_.leftCols(spec_.hidden_dim)) * scale_.asDiagonal();
}

Victim Victim::spoofed(int32_t target_dim) const {
  if (is_spoofed()) throw ConfigError("victim is already spoofed");
  if (target_dim <= spec_.hidden_dim) throw ConfigError("spoof target_dim must exceed hidden_dim");
  const int32_t l = spec_.vocab_size;
  const int32_t h = spec_.hidden_dim;
  const int32_t pad = target_dim - h;

  const ThinSvd svd = thin_svd(MatrixXd(w_));
  const int32_t rank = h - spec_.planted_rank_deficit;
  const double sigma_min = svd.s[rank - 1];

  // Random directions, projected off the genuine column space, orthonormalized.
  MatrixXd d(l, pad);
  Rng rb(hash_mix(spec_.seed, kDomainSpoofBasis));
  fill_gaussian(rb, 1.0, d.data(), static_cast<size_t>(l) * pad);
  const MatrixXd u = svd.u.leftCols(rank);
  d -= u * (u.transpose() * d);
  Eigen::HouseholderQR<MatrixXd> qr(d);
  MatrixXd q = qr.householderQ() * MatrixXd::Identity(l, pad);
  const MatrixXd extra = q * (spec_.spoof_sv_fraction * sigma_min);

  Victim v = *this;
  v.spec_.spoof_target_dim = target_dim;
  v.w_.resize(l, target_dim);
  v.w_.leftCols(h) = w_;
  v.w_.rightCols(pad) = extra;

  // Pad dimensions carry noise scaled relative to genuine activations.
  Rng re(hash_mix(spec_.seed, kDomainSpoofEst));
  const int est_samples = 128;
  VectorXd mean = VectorXd::Zero(h), m2 = VectorXd::Zero(h);
  for (int i = 0; i < est_samples; ++i) {
    const TokenSeq p = sample_prompt(re, l, 4);
    const VectorXd g = base_hidden(p, hash_tokens(spec_.seed, p));
    mean += g;
    m2 += g.cwiseProduct(g);
  }
  mean /= est_samples;
  const VectorXd var = (m2 / est_samples - mean.cwiseProduct(mean)).cwiseMax(0.0);
  const double mean_std = var.cwiseSqrt().mean();
  v.spoof_noise_scale_ = spec_.spoof_noise_std * mean_std;

  v.finalize_serving_matrices();

  // Utility preservation: the spoofed model must keep the original argmax on
  // at least 99% of sampled prompts.
  Rng rc(hash_mix(spec_.seed, kDomainSpoofCheck));
  const int check_samples = 1000;
  int agree = 0;
  const auto& ops = kernels::active_ops();
  for (int i = 0; i < check_samples; ++i) {
    const TokenSeq p = sample_prompt(rc, l, 4);
    const VectorXd z0 = true_logits(p);
    const VectorXd z1 = v.true_logits(p);
    if (ops.argmax(z0.data(), z0.size()) == ops.argmax(z1.data(), z1.size())) ++agree;
  }
  v.spoof_agreement_ = static_cast<double>(agree) / check_samples;
  if (v.spoof_agreement_ < 0.99)
    throw ConfigError("spoofing broke argmax agreement: " + std::to_string(v.spoof_agreement_));
  return v;
}

Victim build_victim(const VictimSpec& spec) { return Victim::build(spec); }

Victim apply_spoofing(const Victim& victim, int32_t target_dim) {
  return victim.spoofed(target_dim);
}

}  // namespace unembed
