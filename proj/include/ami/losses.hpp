// The four training objectives and their weighted combination, plus the
// memory bank of past detached embeddings that supplies contrastive
// negatives.
#pragma once

#include <cmath>
#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "ami/tensor.hpp"

namespace ami {

struct LossWeights {
  double task = 1.0;         // lambda1
  double gating = 0.1;       // lambda2
  double contrastive = 0.05; // lambda3
  double predictive = 0.2;   // lambda4
};

struct MemoryBank {
  struct Entry {
    std::vector<double> vec;
    int64_t window_id = 0;
    int modality = 0;
  };
  size_t capacity = 512;
  std::deque<Entry> entries;

  bool empty() const { return entries.empty(); }
  size_t size() const { return entries.size(); }
  void clear() { entries.clear(); }
  void push(std::vector<double> vec, int64_t window_id, int modality) {
    entries.push_back({std::move(vec), window_id, modality});
    while (entries.size() > capacity) entries.pop_front();
  }
  // detached constant [N, D]
  Tensor stacked() const {
    int64_t n = static_cast<int64_t>(entries.size());
    int64_t d = static_cast<int64_t>(entries.front().vec.size());
    std::vector<double> flat;
    flat.reserve(n * d);
    for (const auto& e : entries) flat.insert(flat.end(), e.vec.begin(), e.vec.end());
    return Tensor::from_data({n, d}, std::move(flat));
  }
};

inline Tensor task_loss(const Tensor& logits, const std::vector<int>& labels) {
  return cross_entropy(logits, labels);
}

// mean of the continuous gate probabilities over batch and modalities
inline Tensor gating_loss(const Tensor& p_soft) { return mean(p_soft); }

struct ContrastiveResult {
  Tensor loss;            // scalar
  bool degenerate = false;  // no positive pair was available
  int64_t anchors = 0;
  int64_t negatives = 0;
};

// InfoNCE over modality-mean embeddings of one window. Anchors are the open
// (batch, modality) embeddings; the positives for an anchor are the other
// open modalities of the same batch element; negatives are memory-bank
// entries plus open embeddings of other batch elements. Each (anchor,
// positive) pair contributes -log(exp(s+)/ (exp(s+) + sum_neg exp(s-))).
inline ContrastiveResult contrastive_loss(const Tensor& embeds /*[B, M, D]*/,
                                          const std::vector<uint8_t>& open /*[B*M]*/,
                                          const MemoryBank& bank, double tau_c) {
  int64_t B = embeds.dim(0), M = embeds.dim(1);
  ContrastiveResult res;
  std::vector<int64_t> anchor_rows;  // indices into [B*M]
  std::vector<int64_t> anchor_batch;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t m = 0; m < M; ++m)
      if (open[b * M + m]) {
        anchor_rows.push_back(b * M + m);
        anchor_batch.push_back(b);
      }
  int64_t A = static_cast<int64_t>(anchor_rows.size());
  int64_t pairs = 0;
  for (int64_t i = 0; i < A; ++i)
    for (int64_t j = 0; j < A; ++j)
      if (i != j && anchor_batch[i] == anchor_batch[j]) ++pairs;
  if (pairs == 0) {
    res.loss = Tensor::scalar(0.0);
    res.degenerate = true;
    return res;
  }

  Tensor anchors = row_normalize(embedding_lookup(reshape(embeds, {B * M, embeds.dim(2)}), anchor_rows));
  Tensor cands = anchors;
  int64_t nb = 0;
  if (!bank.empty()) {
    nb = static_cast<int64_t>(bank.size());
    cands = concat({anchors, row_normalize(bank.stacked())}, 0);
  }
  int64_t C = A + nb;
  Tensor sims = mul_scalar(matmul(anchors, transpose(cands, 0, 1)), 1.0 / tau_c);  // [A, C]
  Tensor expo = exp(sims);

  std::vector<double> neg_mask(A * C, 0.0), pos_mask(A * C, 0.0);
  for (int64_t i = 0; i < A; ++i) {
    for (int64_t j = 0; j < A; ++j) {
      if (i == j) continue;
      if (anchor_batch[i] == anchor_batch[j])
        pos_mask[i * C + j] = 1.0;  // synchronized modalities of the same window
      else
        neg_mask[i * C + j] = 1.0;  // other windows in the batch
    }
    for (int64_t j = A; j < C; ++j) neg_mask[i * C + j] = 1.0;  // bank history
  }
  Tensor neg_sum = sum(mul(expo, Tensor::from_data({A, C}, std::move(neg_mask))), 1, true);
  Tensor pair_losses = sub(log_eps(add(expo, neg_sum)), sims);  // [A, C], -log softmax per pair
  Tensor masked = mul(pair_losses, Tensor::from_data({A, C}, std::move(pos_mask)));
  res.loss = mul_scalar(sum(masked), 1.0 / static_cast<double>(pairs));
  res.anchors = A;
  res.negatives = nb;
  return res;
}

// || predictor(h_t) - stop_grad(h_{t+delta}) ||^2 as a mean over batch and
// dimensions; the target is detached so the representation cannot collapse
// toward the predictor.
inline Tensor predictive_loss(const Tensor& predicted, const Tensor& future_target_detached) {
  Tensor d = sub(predicted, future_target_detached);
  return mean(mul(d, d));
}

struct LossParts {
  Tensor task;
  Tensor gating;
  Tensor contrastive;
  Tensor predictive;

  double value(const Tensor& t) const { return t.defined() ? t.item() : 0.0; }
  double task_v() const { return value(task); }
  double gating_v() const { return value(gating); }
  double contrastive_v() const { return value(contrastive); }
  double predictive_v() const { return value(predictive); }
};

inline Tensor total_loss(const LossParts& parts, const LossWeights& w) {
  auto check = [](const Tensor& t, const char* name) {
    if (t.defined() && !std::isfinite(t.item()))
      throw std::runtime_error(std::string("total_loss: part '") + name + "' is non-finite");
  };
  check(parts.task, "task");
  check(parts.gating, "gating");
  check(parts.contrastive, "contrastive");
  check(parts.predictive, "predictive");
  Tensor total = Tensor::scalar(0.0);
  if (parts.task.defined()) total = add(total, mul_scalar(parts.task, w.task));
  if (parts.gating.defined()) total = add(total, mul_scalar(parts.gating, w.gating));
  if (parts.contrastive.defined()) total = add(total, mul_scalar(parts.contrastive, w.contrastive));
  if (parts.predictive.defined()) total = add(total, mul_scalar(parts.predictive, w.predictive));
  return total;
}

}  // namespace ami
