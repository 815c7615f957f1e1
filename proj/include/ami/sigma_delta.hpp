// Patch-wise Sigma-Delta sensing: per-patch temporal deltas, an activity
// score, thresholded skipping with a bounded skip horizon, and token emission
// that reuses the running sum for skipped patches.
//
// The design is window-local: patch 1 differences against a zero baseline and
// is always emitted, so the accumulation chain is anchored per window and
// windows can be shuffled freely during training.
#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "ami/tensor.hpp"

namespace ami {

struct SigmaDeltaConfig {
  bool enabled = true;
  int k_skip = 2;                  // max consecutive skipped patches
  double theta_init = 0.1;         // initial threshold, shared across modalities
  bool learn_thresholds = false;   // frozen thresholds are the reproduction default
  double tau_theta = 0.1;          // surrogate temperature for the threshold gradient
};

// theta >= 0 is enforced by softplus on a free parameter. theta == 0 maps the
// free value far enough negative that softplus underflows to exactly zero.
inline double softplus_inverse(double y) {
  if (y <= 0.0) return -800.0;
  return std::log(std::expm1(y));
}

struct SigmaDeltaParams {
  SigmaDeltaConfig cfg;
  Tensor theta_raw;  // [M]

  static SigmaDeltaParams init(int modalities, const SigmaDeltaConfig& cfg) {
    SigmaDeltaParams p;
    p.cfg = cfg;
    p.theta_raw = Tensor::full({modalities}, softplus_inverse(cfg.theta_init),
                               cfg.learn_thresholds);
    return p;
  }
  Tensor thresholds() const { return softplus(theta_raw); }
  double threshold_value(int m) const {
    double x = theta_raw.val(m);
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
  }
};

// One window of one modality, cut into L = T/P non-overlapping patches with
// each patch flattened to a [C*P] row. A single previous-patch buffer per
// modality is implicit in the delta below (zero at the window start).
struct PatchSeries {
  int modality = 0;
  int64_t channels = 0;
  int64_t patch_size = 0;
  int64_t patch_count = 0;
  Tensor patches;  // [B, L, C*P]
};

inline PatchSeries partition_patches(int modality, const Tensor& window, int64_t P) {
  if (window.ndim() != 3) op_error("partition_patches", "window must be [B, C, T]");
  int64_t T = window.dim(-1);
  if (P <= 0 || T % P != 0)
    throw std::invalid_argument("partition_patches: modality " + std::to_string(modality) +
                                ": window length " + std::to_string(T) +
                                " not divisible by patch size " + std::to_string(P));
  PatchSeries s;
  s.modality = modality;
  s.channels = window.dim(-2);
  s.patch_size = P;
  s.patch_count = T / P;
  s.patches = extract_patches(window, P);
  return s;
}

// delta_1 = x_1 (zero baseline), delta_l = x_l - x_{l-1} for l >= 2
inline Tensor patch_delta(const PatchSeries& s) {
  int64_t L = s.patch_count;
  if (L == 1) return s.patches;
  Tensor prev = concat({Tensor::zeros({s.patches.dim(0), 1, s.patches.dim(2)}),
                        slice(s.patches, 1, 0, L - 1)},
                       1);
  return sub(s.patches, prev);
}

// a_l = mean |delta| over channels and samples -> [B, L]
inline Tensor activity_score(const Tensor& delta) { return mean(abs(delta), -1); }

struct ActivityMask {
  std::vector<uint8_t> active;   // [L]; active[0] is always true
  std::vector<double> activity;  // [L]
};

// A patch is skipped iff its activity is below theta and the current skip run
// is shorter than k_skip; the run counter resets on every active patch.
inline ActivityMask skip_policy(const std::vector<double>& activity, double theta, int k_skip) {
  ActivityMask m;
  m.activity = activity;
  m.active.resize(activity.size(), 1);
  int run = 0;
  for (size_t l = 0; l < activity.size(); ++l) {
    if (l == 0) {
      m.active[l] = 1;  // first patch anchors the window
      run = 0;
      continue;
    }
    if (activity[l] < theta && run < k_skip) {
      m.active[l] = 0;
      ++run;
    } else {
      m.active[l] = 1;
      run = 0;
    }
  }
  return m;
}

// sigma((a - theta) / tau): the straight-through surrogate that gives the
// hard threshold decision a gradient
inline Tensor threshold_surrogate(const Tensor& activity, const Tensor& theta, double tau) {
  return sigmoid(mul_scalar(sub(activity, theta), 1.0 / tau));
}

struct SdTokens {
  Tensor tokens;                    // [B, L, D]
  std::vector<ActivityMask> masks;  // per batch element
  int64_t invocations = 0;          // total tokenizer invocations across the batch
};

// Emit tokens with reuse. Active patch l adds tokenizer(delta_l) to the
// running token; skipped patches carry the running token forward and cost no
// tokenizer invocation (their embedding rows are multiplied by an exact 0 and
// receive no gradient). theta_for_modality must already be evaluated for the
// hard decisions; when params.cfg.learn_thresholds is set, gradients reach
// theta through the surrogate on active patches only.
inline SdTokens tokenize_with_reuse(const Tensor& delta, const Tensor& activity,
                                    const SigmaDeltaParams& params, int modality,
                                    const Tensor& tokenizer_weight) {
  int64_t B = delta.dim(0), L = delta.dim(1);
  double theta = params.threshold_value(modality);
  SdTokens out;
  out.masks.reserve(B);
  std::vector<double> hard(B * L);
  for (int64_t b = 0; b < B; ++b) {
    std::vector<double> a(L);
    for (int64_t l = 0; l < L; ++l) a[l] = activity.val(b * L + l);
    ActivityMask m = skip_policy(a, theta, params.cfg.k_skip);
    for (int64_t l = 0; l < L; ++l) hard[b * L + l] = m.active[l] ? 1.0 : 0.0;
    for (uint8_t v : m.active) out.invocations += v;
    out.masks.push_back(std::move(m));
  }

  Tensor gates;  // [B, L] forward-hard patch gates
  if (params.cfg.learn_thresholds) {
    Tensor theta_m = slice(params.thresholds(), 0, modality, 1);
    Tensor surrogate = threshold_surrogate(activity, theta_m, params.cfg.tau_theta);
    Tensor st = straight_through(surrogate, hard);
    // zero the skipped entries with a constant so no gradient flows through them
    gates = mul(st, Tensor::from_data({B, L}, hard));
  } else {
    gates = Tensor::from_data({B, L}, hard);
  }

  Tensor embeddings = matmul(delta, tokenizer_weight);  // [B, L, D]
  // running token = lower-triangular accumulation of gated delta embeddings
  std::vector<double> tril(L * L, 0.0);
  for (int64_t i = 0; i < L; ++i)
    for (int64_t j = 0; j <= i; ++j) tril[i * L + j] = 1.0;
  Tensor accum = mul(Tensor::from_data({L, L}, std::move(tril)), reshape(gates, {B, 1, L}));
  out.tokens = matmul(accum, embeddings);
  return out;
}

// dense tokenization of raw patches (sigma-delta disabled)
inline Tensor dense_tokenize(const PatchSeries& s, const Tensor& tokenizer_weight) {
  return matmul(s.patches, tokenizer_weight);
}

}  // namespace ami
