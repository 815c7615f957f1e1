#include <catch2/catch_amalgamated.hpp>

#include "ami/losses.hpp"

#include <cmath>
#include <random>

using namespace ami;

TEST_CASE("task loss") {
  SECTION("uniform logits give ln C") {
    REQUIRE(task_loss(Tensor::zeros({4, 6}), {0, 1, 2, 3}).item() ==
            Catch::Approx(std::log(6.0)));
  }
  SECTION("confident correct prediction approaches zero") {
    Tensor logits = Tensor::from_data({1, 2}, {25.0, 0.0});
    REQUIRE(task_loss(logits, {0}).item() < 1e-10);
  }
}

TEST_CASE("gating loss") {
  SECTION("all-open probabilities cost 1") {
    REQUIRE(gating_loss(Tensor::full({3, 4}, 1.0)).item() == 1.0);
  }
  SECTION("half-open probabilities cost 0.5") {
    REQUIRE(gating_loss(Tensor::full({3, 4}, 0.5)).item() == 0.5);
  }
  SECTION("gradient wrt logits is strictly positive") {
    std::mt19937_64 rng(3);
    Tensor l = Tensor::uniform({2, 5}, rng, -3, 3, true);
    backward(gating_loss(sigmoid(l)));
    for (double g : l.grad()) REQUIRE(g > 0.0);
    auto f = [&] { return gating_loss(sigmoid(l)); };
    REQUIRE(finite_diff_check(f, {l}) <= 1e-4);
  }
  SECTION("duplicating a modality column leaves the mean unchanged") {
    Tensor p = Tensor::from_data({2, 2}, {0.2, 0.8, 0.4, 0.6});
    Tensor p_dup = Tensor::from_data({2, 4}, {0.2, 0.8, 0.2, 0.8, 0.4, 0.6, 0.4, 0.6});
    REQUIRE(gating_loss(p).item() == Catch::Approx(gating_loss(p_dup).item()).margin(1e-15));
  }
}

TEST_CASE("contrastive loss") {
  SECTION("hand-computed instance: aligned pair vs 8 orthogonal negatives") {
    // anchors: two modalities sharing the unit vector e0 -> sim(pos) = 1;
    // bank: 8 unit vectors orthogonal to e0 -> sim(neg) = 0
    int D = 12;
    std::vector<double> emb(2 * D, 0.0);
    emb[0] = 1.0;      // modality 0 -> e0
    emb[D] = 1.0;      // modality 1 -> e0
    Tensor embeds = Tensor::from_data({1, 2, D}, emb);
    MemoryBank bank;
    for (int k = 0; k < 8; ++k) {
      std::vector<double> v(D, 0.0);
      v[k + 1] = 1.0;
      bank.push(v, k, 0);
    }
    ContrastiveResult r = contrastive_loss(embeds, {1, 1}, bank, 0.1);
    double expect = std::log1p(8.0 * std::exp(-10.0));  // -log(e^10/(e^10+8))
    REQUIRE_FALSE(r.degenerate);
    REQUIRE(r.loss.item() == Catch::Approx(expect).margin(1e-9));
  }
  SECTION("permuting the negatives leaves the loss unchanged") {
    std::mt19937_64 rng(5);
    Tensor embeds = Tensor::uniform({2, 3, 6}, rng, -1, 1);
    std::vector<std::vector<double>> negs;
    for (int k = 0; k < 6; ++k) {
      std::vector<double> v(6);
      for (auto& x : v) x = std::uniform_real_distribution<double>(-1, 1)(rng);
      negs.push_back(v);
    }
    MemoryBank b1, b2;
    for (int k = 0; k < 6; ++k) b1.push(negs[k], k, 0);
    for (int k = 5; k >= 0; --k) b2.push(negs[k], k, 0);
    std::vector<uint8_t> open(6, 1);
    double v1 = contrastive_loss(embeds, open, b1, 0.1).loss.item();
    double v2 = contrastive_loss(embeds, open, b2, 0.1).loss.item();
    REQUIRE(v1 == Catch::Approx(v2).margin(1e-12));
  }
  SECTION("identical pair with no negatives costs zero") {
    std::vector<double> emb = {0.6, 0.8, 0.6, 0.8};
    Tensor embeds = Tensor::from_data({1, 2, 2}, emb);
    MemoryBank bank;
    ContrastiveResult r = contrastive_loss(embeds, {1, 1}, bank, 0.1);
    REQUIRE(r.loss.item() == Catch::Approx(0.0).margin(1e-9));
  }
  SECTION("single open modality and empty bank degenerates to zero with notice") {
    Tensor embeds = Tensor::from_data({1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
    MemoryBank bank;
    ContrastiveResult r = contrastive_loss(embeds, {1, 0}, bank, 0.1);
    REQUIRE(r.degenerate);
    REQUIRE(r.loss.item() == 0.0);
  }
  SECTION("never negative") {
    std::mt19937_64 rng(7);
    for (int it = 0; it < 30; ++it) {
      Tensor embeds = Tensor::uniform({3, 2, 5}, rng, -2, 2);
      MemoryBank bank;
      int nb = static_cast<int>(rng() % 5);
      for (int k = 0; k < nb; ++k) {
        std::vector<double> v(5);
        for (auto& x : v) x = std::uniform_real_distribution<double>(-2, 2)(rng);
        bank.push(v, k, 0);
      }
      std::vector<uint8_t> open(6);
      for (auto& o : open) o = rng() % 2;
      ContrastiveResult r = contrastive_loss(embeds, open, bank, 0.1);
      REQUIRE(r.loss.item() >= -1e-10);
    }
  }
  SECTION("gradient flows into the embeddings") {
    std::mt19937_64 rng(9);
    Tensor embeds = Tensor::uniform({2, 2, 4}, rng, -1, 1, true);
    MemoryBank bank;
    ContrastiveResult r = contrastive_loss(embeds, {1, 1, 1, 1}, bank, 0.1);
    backward(r.loss);
    bool nonzero = false;
    for (double g : embeds.grad()) nonzero = nonzero || g != 0.0;
    REQUIRE(nonzero);
  }
}

TEST_CASE("predictive loss") {
  SECTION("matching prediction costs zero") {
    Tensor h = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    REQUIRE(predictive_loss(h, h.detach()).item() == 0.0);
  }
  SECTION("unit difference over D=4 costs 1 (mean of squares)") {
    Tensor p = Tensor::from_data({1, 4}, {1, 1, 1, 1});
    Tensor t = Tensor::zeros({1, 4});
    REQUIRE(predictive_loss(p, t).item() == 1.0);
  }
  SECTION("stop-gradient: target receives no gradient") {
    std::mt19937_64 rng(11);
    Tensor w = Tensor::uniform({3, 3}, rng, -1, 1, true);
    Tensor target_param = Tensor::uniform({2, 3}, rng, -1, 1, true);
    Tensor x = Tensor::uniform({2, 3}, rng, -1, 1);
    Tensor predicted = matmul(x, w);
    backward(predictive_loss(predicted, target_param.detach()));
    for (double g : target_param.grad()) REQUIRE(g == 0.0);
    bool nonzero = false;
    for (double g : w.grad()) nonzero = nonzero || g != 0.0;
    REQUIRE(nonzero);
  }
}

TEST_CASE("total loss") {
  std::mt19937_64 rng(13);
  LossParts parts;
  parts.task = Tensor::scalar(1.3);
  parts.gating = Tensor::scalar(0.7);
  parts.contrastive = Tensor::scalar(2.1);
  parts.predictive = Tensor::scalar(0.4);

  SECTION("zeroed extra weights reduce to the task loss") {
    LossWeights w{1.0, 0.0, 0.0, 0.0};
    REQUIRE(total_loss(parts, w).item() == Catch::Approx(1.3).margin(1e-15));
  }
  SECTION("defaults match the hand-computed weighted sum") {
    LossWeights w;  // 1.0 / 0.1 / 0.05 / 0.2
    double expect = 1.0 * 1.3 + 0.1 * 0.7 + 0.05 * 2.1 + 0.2 * 0.4;
    REQUIRE(total_loss(parts, w).item() == Catch::Approx(expect).margin(1e-12));
  }
  SECTION("doubling every weight doubles the total") {
    LossWeights w{1.0, 0.1, 0.05, 0.2};
    LossWeights w2{2.0, 0.2, 0.1, 0.4};
    REQUIRE(total_loss(parts, w2).item() ==
            Catch::Approx(2.0 * total_loss(parts, w).item()).margin(1e-12));
  }
  SECTION("decomposition recombines to the total within 1e-10") {
    LossWeights w;
    double recombined = w.task * parts.task_v() + w.gating * parts.gating_v() +
                        w.contrastive * parts.contrastive_v() + w.predictive * parts.predictive_v();
    REQUIRE(std::fabs(total_loss(parts, w).item() - recombined) <= 1e-10);
  }
  SECTION("NaN in a part aborts naming the part") {
    LossParts bad = parts;
    bad.contrastive = Tensor::scalar(std::nan(""));
    REQUIRE_THROWS_WITH(total_loss(bad, LossWeights{}),
                        Catch::Matchers::ContainsSubstring("contrastive"));
  }
  SECTION("undefined parts are treated as inactive") {
    LossParts only_task;
    only_task.task = Tensor::scalar(0.9);
    REQUIRE(total_loss(only_task, LossWeights{}).item() == Catch::Approx(0.9).margin(1e-15));
  }
}

TEST_CASE("memory bank ring semantics") {
  MemoryBank bank;
  bank.capacity = 3;
  for (int i = 0; i < 5; ++i) bank.push({double(i)}, i, 0);
  REQUIRE(bank.size() == 3);
  REQUIRE(bank.entries.front().vec[0] == 2.0);  // oldest evicted first
  Tensor s = bank.stacked();
  REQUIRE(s.shape() == Shape{3, 1});
}
