#include <catch2/catch_amalgamated.hpp>

#include "ami/sigma_delta.hpp"

#include <cmath>
#include <random>

using namespace ami;

TEST_CASE("partition_patches") {
  std::mt19937_64 rng(1);
  SECTION("T=100 P=10 gives L=10") {
    Tensor w = Tensor::uniform({1, 2, 100}, rng, -1, 1);
    PatchSeries s = partition_patches(0, w, 10);
    REQUIRE(s.patch_count == 10);
    REQUIRE(s.patches.shape() == Shape{1, 10, 20});
  }
  SECTION("T == P gives a single patch identical to the window") {
    Tensor w = Tensor::uniform({1, 1, 8}, rng, -1, 1);
    PatchSeries s = partition_patches(2, w, 8);
    REQUIRE(s.patch_count == 1);
    REQUIRE(s.patches.data() == w.data());
  }
  SECTION("round-trip reconstruction") {
    Tensor w = Tensor::uniform({3, 4, 24}, rng, -1, 1);
    PatchSeries s = partition_patches(1, w, 6);
    REQUIRE(merge_patches(s.patches, 4).data() == w.data());
  }
  SECTION("indivisible window rejected with modality named") {
    Tensor w = Tensor::zeros({1, 1, 10});
    REQUIRE_THROWS_WITH(partition_patches(3, w, 3),
                        Catch::Matchers::ContainsSubstring("modality 3") &&
                            Catch::Matchers::ContainsSubstring("10"));
  }
}

TEST_CASE("patch_delta") {
  SECTION("constant signal: first delta is the patch, rest are zero") {
    Tensor w = Tensor::full({1, 1, 12}, 3.0);
    PatchSeries s = partition_patches(0, w, 4);
    Tensor d = patch_delta(s);
    for (int i = 0; i < 4; ++i) REQUIRE(d.val(i) == 3.0);
    for (int i = 4; i < 12; ++i) REQUIRE(d.val(i) == 0.0);
  }
  SECTION("ramp in patch index gives unit deltas") {
    std::vector<double> v(12);
    for (int l = 0; l < 3; ++l)
      for (int p = 0; p < 4; ++p) v[l * 4 + p] = l + 1;
    PatchSeries s = partition_patches(0, Tensor::from_data({1, 1, 12}, v), 4);
    Tensor d = patch_delta(s);
    for (int i = 0; i < 12; ++i) REQUIRE(d.val(i) == 1.0);
  }
  SECTION("cumulative sum of deltas reproduces the patches") {
    // identity is exact in real arithmetic; summation rounding leaves ~1 ulp
    std::mt19937_64 rng(5);
    Tensor w = Tensor::uniform({2, 3, 30}, rng, -2, 2);
    PatchSeries s = partition_patches(0, w, 5);
    Tensor d = patch_delta(s);
    int64_t B = 2, L = 6, CP = 15;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t i = 0; i < CP; ++i) {
        double acc = 0;
        for (int64_t l = 0; l < L; ++l) {
          acc += d.val((b * L + l) * CP + i);
          REQUIRE(acc == Catch::Approx(s.patches.val((b * L + l) * CP + i)).margin(1e-12));
        }
      }
  }
}

TEST_CASE("activity_score") {
  SECTION("zero delta gives zero activity") {
    Tensor a = activity_score(Tensor::zeros({1, 3, 8}));
    for (double v : a.data()) REQUIRE(v == 0.0);
  }
  SECTION("C=1 P=2 delta [3,-1] scores 2") {
    Tensor a = activity_score(Tensor::from_data({1, 1, 2}, {3.0, -1.0}));
    REQUIRE(a.val(0) == 2.0);
  }
  SECTION("random delta matches independent mean-abs") {
    std::mt19937_64 rng(7);
    Tensor d = Tensor::uniform({2, 4, 6}, rng, -3, 3);
    Tensor a = activity_score(d);
    for (int64_t b = 0; b < 2; ++b)
      for (int64_t l = 0; l < 4; ++l) {
        double s = 0;
        for (int64_t i = 0; i < 6; ++i) s += std::fabs(d.val((b * 4 + l) * 6 + i));
        REQUIRE(a.val(b * 4 + l) == Catch::Approx(s / 6).margin(1e-14));
      }
  }
}

TEST_CASE("skip_policy") {
  SECTION("theta = 0 keeps everything active") {
    ActivityMask m = skip_policy({0.0, 0.0, 0.0, 0.0}, 0.0, 2);
    REQUIRE(m.active == std::vector<uint8_t>{1, 1, 1, 1});
  }
  SECTION("hand-simulated counter") {
    // active, skip, skip, forced refresh, skip
    ActivityMask m = skip_policy({5, 0, 0, 0, 0}, 0.1, 2);
    REQUIRE(m.active == std::vector<uint8_t>{1, 0, 0, 1, 0});
  }
  SECTION("theta = inf forces period k_skip+1") {
    double inf = std::numeric_limits<double>::infinity();
    ActivityMask m = skip_policy(std::vector<double>(9, 0.0), inf, 2);
    REQUIRE(m.active == std::vector<uint8_t>{1, 0, 0, 1, 0, 0, 1, 0, 0});
  }
  SECTION("skip-horizon bound holds over random activity sequences") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> au(0.0, 1.0);
    std::uniform_int_distribution<int> ku(0, 4);
    std::uniform_int_distribution<int> lu(1, 24);
    for (int it = 0; it < 20000; ++it) {
      int k = ku(rng);
      int L = lu(rng);
      std::vector<double> a(L);
      for (auto& v : a) v = au(rng);
      ActivityMask m = skip_policy(a, au(rng), k);
      REQUIRE(m.active[0] == 1);
      int run = 0;
      for (uint8_t v : m.active) {
        run = v ? 0 : run + 1;
        REQUIRE(run <= k);
      }
    }
  }
  SECTION("raising theta never increases the active count") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> au(0.0, 1.0);
    for (int it = 0; it < 500; ++it) {
      std::vector<double> a(16);
      for (auto& v : a) v = au(rng);
      int64_t prev = 17;
      for (double theta : {0.0, 0.2, 0.4, 0.6, 0.8, 1.01}) {
        ActivityMask m = skip_policy(a, theta, 2);
        int64_t n = 0;
        for (uint8_t v : m.active) n += v;
        REQUIRE(n <= prev);
        prev = n;
      }
    }
  }
}

TEST_CASE("tokenize_with_reuse") {
  std::mt19937_64 rng(17);
  SigmaDeltaConfig cfg;
  cfg.k_skip = 2;

  SECTION("theta = 0 matches dense tokenization of raw patches (linearity)") {
    cfg.theta_init = 0.0;
    SigmaDeltaParams params = SigmaDeltaParams::init(1, cfg);
    REQUIRE(params.threshold_value(0) == 0.0);
    for (int it = 0; it < 50; ++it) {
      Tensor w = Tensor::uniform({2, 2, 32}, rng, -2, 2);
      Tensor wt = Tensor::uniform({16, 6}, rng, -1, 1);
      PatchSeries s = partition_patches(0, w, 8);
      Tensor delta = patch_delta(s);
      SdTokens t = tokenize_with_reuse(delta, activity_score(delta), params, 0, wt);
      Tensor dense = dense_tokenize(s, wt);
      REQUIRE(t.invocations == 2 * 4);
      for (int64_t i = 0; i < dense.size(); ++i)
        REQUIRE(std::fabs(t.tokens.val(i) - dense.val(i)) <= 1e-10);
    }
  }
  SECTION("everything after the first patch skipped reuses the first token") {
    cfg.theta_init = 100.0;
    cfg.k_skip = 16;
    SigmaDeltaParams params = SigmaDeltaParams::init(1, cfg);
    Tensor w = Tensor::uniform({1, 1, 40}, rng, -1, 1);
    Tensor wt = Tensor::uniform({8, 4}, rng, -1, 1);
    PatchSeries s = partition_patches(0, w, 8);
    Tensor delta = patch_delta(s);
    SdTokens t = tokenize_with_reuse(delta, activity_score(delta), params, 0, wt);
    REQUIRE(t.invocations == 1);
    for (int64_t l = 1; l < 5; ++l)
      for (int64_t d = 0; d < 4; ++d) REQUIRE(t.tokens.val(l * 4 + d) == t.tokens.val(d));
  }
  SECTION("invocations equal the number of active entries") {
    cfg.theta_init = 0.3;
    SigmaDeltaParams params = SigmaDeltaParams::init(1, cfg);
    Tensor w = Tensor::uniform({3, 1, 48}, rng, -0.4, 0.4);
    Tensor wt = Tensor::uniform({8, 4}, rng, -1, 1);
    PatchSeries s = partition_patches(0, w, 8);
    Tensor delta = patch_delta(s);
    SdTokens t = tokenize_with_reuse(delta, activity_score(delta), params, 0, wt);
    int64_t expect = 0;
    for (const auto& m : t.masks)
      for (uint8_t v : m.active) expect += v;
    REQUIRE(t.invocations == expect);
    REQUIRE(t.invocations < 3 * 6);  // the redundancy actually triggered skips
  }
}

TEST_CASE("threshold gradient surrogate") {
  SECTION("surrogate is 0.5 at the threshold") {
    Tensor a = Tensor::from_data({1}, {0.3});
    Tensor theta = Tensor::from_data({1}, {0.3});
    REQUIRE(threshold_surrogate(a, theta, 0.1).item() == Catch::Approx(0.5));
  }
  SECTION("small temperature approaches a step") {
    Tensor a = Tensor::from_data({2}, {0.31, 0.29});
    Tensor theta = Tensor::from_data({1}, {0.3});
    Tensor s = threshold_surrogate(a, theta, 1e-4);
    REQUIRE(s.val(0) > 1.0 - 1e-12);
    REQUIRE(s.val(1) < 1e-12);
  }
  SECTION("finite differences on the surrogate match the analytic theta gradient") {
    std::mt19937_64 rng(19);
    Tensor a = Tensor::uniform({4}, rng, 0.0, 1.0);
    Tensor theta = Tensor::from_data({1}, {0.4}, true);
    auto f = [&] { return sum(threshold_surrogate(a, theta, 0.1)); };
    REQUIRE(finite_diff_check(f, {theta}) <= 1e-4);
  }
  SECTION("learned thresholds receive gradient through active patches") {
    std::mt19937_64 rng(23);
    SigmaDeltaConfig cfg;
    cfg.learn_thresholds = true;
    cfg.theta_init = 0.1;
    SigmaDeltaParams params = SigmaDeltaParams::init(1, cfg);
    Tensor w = Tensor::uniform({2, 1, 24}, rng, -1, 1);
    Tensor wt = Tensor::uniform({6, 3}, rng, -1, 1);
    PatchSeries s = partition_patches(0, w, 6);
    Tensor delta = patch_delta(s);
    SdTokens t = tokenize_with_reuse(delta, activity_score(delta), params, 0, wt);
    backward(squared_l2(t.tokens));
    bool nonzero = false;
    for (double g : params.theta_raw.grad()) nonzero = nonzero || g != 0.0;
    REQUIRE(nonzero);
  }
}
