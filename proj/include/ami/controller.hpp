// Agentic modality controller: aggregates the current representation into
// per-modality gate logits, samples Gumbel-Sigmoid gates with a
// straight-through estimator during training, and emits deterministic hard
// gates at inference.
#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "ami/tensor.hpp"

namespace ami {

constexpr double kGumbelEps = 1e-10;

// mean over each modality's patch block: [B, M*L, D] -> [B, M, D]
inline Tensor aggregate_features(const Tensor& tokens, int modalities) {
  if (tokens.ndim() != 3) op_error("aggregate_features", "expected [B, M*L, D]");
  int64_t B = tokens.dim(0), n = tokens.dim(1), D = tokens.dim(2);
  if (n % modalities != 0)
    op_error("aggregate_features", "token count " + std::to_string(n) +
                                       " not divisible by M=" + std::to_string(modalities));
  int64_t L = n / modalities;
  return mean(reshape(tokens, {B, modalities, L, D}), 2);
}

// shared two-layer MLP producing one pre-sigmoid logit per modality
struct GateNet {
  Tensor w1, b1, w2, b2;

  static GateNet init(int embed_dim, int hidden, double logit_bias_init, std::mt19937_64& rng) {
    GateNet g;
    double s1 = std::sqrt(6.0 / (embed_dim + hidden));
    double s2 = std::sqrt(6.0 / (hidden + 1));
    g.w1 = Tensor::uniform({embed_dim, hidden}, rng, -s1, s1, true);
    g.b1 = Tensor::zeros({hidden}, true);
    g.w2 = Tensor::uniform({hidden, 1}, rng, -s2, s2, true);
    g.b2 = Tensor::full({1}, logit_bias_init, true);
    return g;
  }

  // [B, M, D] -> [B, M]
  Tensor logits(const Tensor& modality_means) const {
    Tensor h = tanh(add(matmul(modality_means, w1), b1));
    Tensor out = add(matmul(h, w2), b2);
    return reshape(out, {modality_means.dim(0), modality_means.dim(1)});
  }
};

struct GateDecision {
  Tensor logits;              // [B, M]; undefined for the cold-start decision
  Tensor p_soft;              // [B, M]; undefined for the cold-start decision
  Tensor gate;                // [B, M] value applied in the forward
  std::vector<uint8_t> hard;  // row-major [B*M]
  double tau = 1.0;
  bool sampled = false;

  bool open(int64_t b, int64_t m, int64_t M) const { return hard[b * M + m] != 0; }
};

// cold start: every modality on, nothing to regularize
inline GateDecision all_open_gates(int64_t B, int64_t M) {
  GateDecision d;
  d.gate = Tensor::full({B, M}, 1.0);
  d.hard.assign(B * M, 1);
  return d;
}

inline std::vector<uint8_t> hard_from_soft(const Tensor& p_soft) {
  std::vector<uint8_t> h(p_soft.size());
  for (int64_t i = 0; i < p_soft.size(); ++i) h[i] = p_soft.val(i) > 0.5 ? 1 : 0;
  return h;
}

// Training-time sampling: u ~ U(0,1), g = -log(-log(u+eps)+eps),
// p_soft = sigmoid((l+g)/tau), p_hard = 1{p_soft > 0.5}. The forward value is
// p_hard with the straight-through surrogate unless hard_forward is false, in
// which case the continuous relaxation itself is applied (used by gradient
// checks; the ST contract makes the two routes agree).
inline GateDecision gumbel_sigmoid_sample(const Tensor& logits, double tau, std::mt19937_64& rng,
                                          bool hard_forward = true) {
  if (tau <= 0) op_error("gumbel_sigmoid_sample", "tau must be positive");
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<double> noise(logits.size());
  for (auto& v : noise) v = -std::log(-std::log(uni(rng) + kGumbelEps) + kGumbelEps);
  GateDecision d;
  d.tau = tau;
  d.sampled = true;
  d.logits = logits;
  d.p_soft = sigmoid(mul_scalar(add(logits, Tensor::from_data(logits.shape(), std::move(noise))),
                                1.0 / tau));
  d.hard = hard_from_soft(d.p_soft);
  if (hard_forward) {
    std::vector<double> hv(d.hard.begin(), d.hard.end());
    d.gate = straight_through(d.p_soft, hv);
  } else {
    d.gate = d.p_soft;
  }
  return d;
}

// Inference: no noise, p_soft = sigmoid(l), gates are plain constants.
inline GateDecision deterministic_gates(const Tensor& logits) {
  GateDecision d;
  d.logits = logits;
  d.p_soft = sigmoid(logits);
  d.hard = hard_from_soft(d.p_soft);
  std::vector<double> hv(d.hard.begin(), d.hard.end());
  d.gate = Tensor::from_data(d.p_soft.shape(), std::move(hv));
  d.sampled = false;
  return d;
}

}  // namespace ami
