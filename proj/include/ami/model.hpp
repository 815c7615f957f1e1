// The multimodal prediction model: per-modality linear patch tokenizers fed
// through sigma-delta sensing, all-to-all cross-modal attention fusion,
// sinusoidal positional encoding, cross-attention over a short history
// memory, a small pre-norm transformer backbone, and a CLS classification
// head. A gate controller MLP and a predictive-coding head share the same
// parameter registry.
#pragma once

#include <deque>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ami/controller.hpp"
#include "ami/sigma_delta.hpp"
#include "ami/tensor.hpp"
#include "ami/trace.hpp"

namespace ami {

struct ModelConfig {
  int modalities = 4;
  std::vector<int> channels;        // per modality
  std::vector<int> window_samples;  // per modality T_m
  std::vector<int> patch_size;      // per modality P_m; all T_m/P_m must agree
  int embed_dim = 256;
  int layers = 4;
  int heads = 8;
  int ff_dim = 1024;
  int history = 10;  // K past windows held in memory; 0 disables context
  int num_classes = 12;
  int gate_hidden = 256;
  int predictor_hidden = 256;
  double gate_logit_bias_init = 2.0;  // start near-open: cold-start-safe default
  double dropout = 0.0;
  bool fusion_on = true;
  bool context_on = true;
  bool sigma_delta_on = true;
  SigmaDeltaConfig sigma_delta;

  int tokens_per_modality() const { return window_samples.at(0) / patch_size.at(0); }

  void validate() const {
    if (modalities < 1) throw std::invalid_argument("model config: modalities must be >= 1");
    if (static_cast<int>(channels.size()) != modalities ||
        static_cast<int>(window_samples.size()) != modalities ||
        static_cast<int>(patch_size.size()) != modalities)
      throw std::invalid_argument(
          "model config: channels/window_samples/patch_size must list every modality");
    if (embed_dim % heads != 0)
      throw std::invalid_argument("model config: embed_dim " + std::to_string(embed_dim) +
                                  " not divisible by heads " + std::to_string(heads));
    if (history < 0) throw std::invalid_argument("model config: history must be >= 0");
    int L = -1;
    for (int m = 0; m < modalities; ++m) {
      if (patch_size[m] <= 0 || window_samples[m] % patch_size[m] != 0)
        throw std::invalid_argument("model config: modality " + std::to_string(m) +
                                    ": window " + std::to_string(window_samples[m]) +
                                    " not divisible by patch " + std::to_string(patch_size[m]));
      int l = window_samples[m] / patch_size[m];
      if (L >= 0 && l != L)
        throw std::invalid_argument("model config: modalities disagree on tokens per window");
      L = l;
    }
  }
};

struct Linear {
  Tensor w, b;
  static Linear init(int in, int out, std::mt19937_64& rng) {
    double s = std::sqrt(6.0 / (in + out));
    Linear l;
    l.w = Tensor::uniform({in, out}, rng, -s, s, true);
    l.b = Tensor::zeros({out}, true);
    return l;
  }
  Tensor operator()(const Tensor& x) const { return add(matmul(x, w), b); }
};

// Pre-norm multi-head attention with a feed-forward block, both residual.
struct AttnBlock {
  Tensor ln1_g, ln1_b;    // query norm
  Tensor lnkv_g, lnkv_b;  // key/value norm for cross-attention
  Linear wq, wk, wv, wo;
  Tensor ln2_g, ln2_b;
  Linear ff1, ff2;
  int heads = 1;

  // cross-attention blocks carry a separate key/value norm; self-attention
  // blocks reuse the query norm
  static AttnBlock init(int dim, int heads, int ff_dim, std::mt19937_64& rng, bool cross = true) {
    AttnBlock blk;
    blk.heads = heads;
    blk.ln1_g = Tensor::full({dim}, 1.0, true);
    blk.ln1_b = Tensor::zeros({dim}, true);
    if (cross) {
      blk.lnkv_g = Tensor::full({dim}, 1.0, true);
      blk.lnkv_b = Tensor::zeros({dim}, true);
    }
    blk.wq = Linear::init(dim, dim, rng);
    blk.wk = Linear::init(dim, dim, rng);
    blk.wv = Linear::init(dim, dim, rng);
    blk.wo = Linear::init(dim, dim, rng);
    blk.ln2_g = Tensor::full({dim}, 1.0, true);
    blk.ln2_b = Tensor::zeros({dim}, true);
    blk.ff1 = Linear::init(dim, ff_dim, rng);
    blk.ff2 = Linear::init(ff_dim, dim, rng);
    return blk;
  }

  Tensor split_heads(const Tensor& x) const {
    int64_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
    return transpose(reshape(x, {B, L, heads, D / heads}), 1, 2);
  }
  Tensor merge_heads(const Tensor& x) const {
    int64_t B = x.dim(0), L = x.dim(2), D = x.dim(1) * x.dim(3);
    return reshape(transpose(x, 1, 2), {B, L, D});
  }

  // self-attention when kv is the same tensor as q
  Tensor forward(const Tensor& q_in, const Tensor& kv_in, bool self_attn, double drop,
                 std::mt19937_64& rng, bool train) const {
    Tensor qn = layer_norm_lastdim(q_in, ln1_g, ln1_b);
    Tensor kn = self_attn ? qn : layer_norm_lastdim(kv_in, lnkv_g, lnkv_b);
    Tensor q = split_heads(wq(qn));
    Tensor k = split_heads(wk(kn));
    Tensor v = split_heads(wv(kn));
    Tensor att = merge_heads(scaled_dot_product_attention(q, k, v));
    Tensor x = add(q_in, dropout(wo(att), drop, rng, train));
    Tensor h = ff2(gelu(ff1(layer_norm_lastdim(x, ln2_g, ln2_b))));
    return add(x, dropout(h, drop, rng, train));
  }
};

// ring of the last K mean-aggregated post-context representations
struct HistoryMemory {
  int capacity = 0;
  std::deque<Tensor> entries;  // each [B, D]

  explicit HistoryMemory(int k = 0) : capacity(k) {}
  bool empty() const { return entries.empty(); }
  void clear() { entries.clear(); }
  void push(const Tensor& e) {
    if (capacity <= 0) return;
    entries.push_back(e);
    while (static_cast<int>(entries.size()) > capacity) entries.pop_front();
  }
  Tensor stacked() const {  // [B, K', D]
    std::vector<Tensor> rows;
    rows.reserve(entries.size());
    for (const auto& e : entries) rows.push_back(reshape(e, {e.dim(0), 1, e.dim(1)}));
    return concat(rows, 1);
  }
};

struct WindowInput {
  std::vector<Tensor> modality;  // per modality [B, C_m, T_m]
  std::vector<int> labels;       // [B]
};

struct WindowResult {
  Tensor logits;        // [B, num_classes]
  Tensor tokens;        // [B, M*L, D] backbone output without CLS (fed to the AMC)
  Tensor h_cls;         // [B, D]
  Tensor context_mean;  // [B, D] mean over tokens of the post-context representation
  std::vector<WindowTrace> traces;  // per batch element
};

class Model {
 public:
  ModelConfig cfg;
  std::vector<Tensor> tokenizer;  // per modality [C_m*P_m, D], bias-free
  Tensor mask_embed;              // [M, D] learned "sensor absent" tokens
  AttnBlock fusion;               // shared across modalities
  AttnBlock context;
  std::vector<AttnBlock> backbone;
  Tensor final_ln_g, final_ln_b;
  Tensor cls;  // [D]
  Linear classifier;
  GateNet gate_net;
  Linear pred_in, pred_out;  // predictive-coding head
  SigmaDeltaParams sd;
  Tensor pos_enc;  // [M*L, D] fixed sinusoidal table

  static Model init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    std::mt19937_64 rng(seed);
    int D = cfg.embed_dim;
    for (int i = 0; i < cfg.modalities; ++i) {
      int in = cfg.channels[i] * cfg.patch_size[i];
      double s = std::sqrt(6.0 / (in + D));
      m.tokenizer.push_back(Tensor::uniform({in, D}, rng, -s, s, true));
    }
    m.mask_embed = Tensor::randn({cfg.modalities, D}, rng, 0.02, true);
    m.fusion = AttnBlock::init(D, cfg.heads, cfg.ff_dim, rng);
    m.context = AttnBlock::init(D, cfg.heads, cfg.ff_dim, rng);
    for (int l = 0; l < cfg.layers; ++l)
      m.backbone.push_back(AttnBlock::init(D, cfg.heads, cfg.ff_dim, rng, /*cross=*/false));
    m.final_ln_g = Tensor::full({D}, 1.0, true);
    m.final_ln_b = Tensor::zeros({D}, true);
    m.cls = Tensor::randn({D}, rng, 0.02, true);
    m.classifier = Linear::init(D, cfg.num_classes, rng);
    m.gate_net = GateNet::init(D, cfg.gate_hidden, cfg.gate_logit_bias_init, rng);
    m.pred_in = Linear::init(D, cfg.predictor_hidden, rng);
    m.pred_out = Linear::init(cfg.predictor_hidden, D, rng);
    m.sd = SigmaDeltaParams::init(cfg.modalities, cfg.sigma_delta);
    m.pos_enc = sinusoidal_encoding(cfg.modalities * cfg.tokens_per_modality(), D);
    return m;
  }

  static Tensor sinusoidal_encoding(int64_t positions, int64_t dim) {
    std::vector<double> pe(positions * dim);
    for (int64_t p = 0; p < positions; ++p)
      for (int64_t i = 0; i < dim; i += 2) {
        double angle = p / std::pow(10000.0, static_cast<double>(i) / dim);
        pe[p * dim + i] = std::sin(angle);
        if (i + 1 < dim) pe[p * dim + i + 1] = std::cos(angle);
      }
    return Tensor::from_data({positions, dim}, std::move(pe));
  }

  // named parameters in a fixed order; the order defines checkpoint layout
  std::vector<std::pair<std::string, Tensor>> parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    auto block = [&out](const std::string& prefix, AttnBlock& blk) {
      out.emplace_back(prefix + ".ln1.g", blk.ln1_g);
      out.emplace_back(prefix + ".ln1.b", blk.ln1_b);
      if (blk.lnkv_g.defined()) {
        out.emplace_back(prefix + ".lnkv.g", blk.lnkv_g);
        out.emplace_back(prefix + ".lnkv.b", blk.lnkv_b);
      }
      out.emplace_back(prefix + ".wq.w", blk.wq.w);
      out.emplace_back(prefix + ".wq.b", blk.wq.b);
      out.emplace_back(prefix + ".wk.w", blk.wk.w);
      out.emplace_back(prefix + ".wk.b", blk.wk.b);
      out.emplace_back(prefix + ".wv.w", blk.wv.w);
      out.emplace_back(prefix + ".wv.b", blk.wv.b);
      out.emplace_back(prefix + ".wo.w", blk.wo.w);
      out.emplace_back(prefix + ".wo.b", blk.wo.b);
      out.emplace_back(prefix + ".ln2.g", blk.ln2_g);
      out.emplace_back(prefix + ".ln2.b", blk.ln2_b);
      out.emplace_back(prefix + ".ff1.w", blk.ff1.w);
      out.emplace_back(prefix + ".ff1.b", blk.ff1.b);
      out.emplace_back(prefix + ".ff2.w", blk.ff2.w);
      out.emplace_back(prefix + ".ff2.b", blk.ff2.b);
    };
    for (size_t i = 0; i < tokenizer.size(); ++i)
      out.emplace_back("tokenizer." + std::to_string(i), tokenizer[i]);
    out.emplace_back("mask_embed", mask_embed);
    block("fusion", fusion);
    block("context", context);
    for (size_t l = 0; l < backbone.size(); ++l) block("backbone." + std::to_string(l), backbone[l]);
    out.emplace_back("final_ln.g", final_ln_g);
    out.emplace_back("final_ln.b", final_ln_b);
    out.emplace_back("cls", cls);
    out.emplace_back("classifier.w", classifier.w);
    out.emplace_back("classifier.b", classifier.b);
    out.emplace_back("gate.w1", gate_net.w1);
    out.emplace_back("gate.b1", gate_net.b1);
    out.emplace_back("gate.w2", gate_net.w2);
    out.emplace_back("gate.b2", gate_net.b2);
    out.emplace_back("predictor.in.w", pred_in.w);
    out.emplace_back("predictor.in.b", pred_in.b);
    out.emplace_back("predictor.out.w", pred_out.w);
    out.emplace_back("predictor.out.b", pred_out.b);
    out.emplace_back("sigma_delta.theta_raw", sd.theta_raw);
    return out;
  }

  // Tokenize one modality under its gate column. Gated-on elements run the
  // sigma-delta path; gated-off elements contribute the learned mask token.
  // During training both branches stay in the graph blended by the ST gate;
  // at inference a fully closed batch never touches the raw signal.
  Tensor tokenize_modality(int m, const Tensor& window, const GateDecision& gates, bool train,
                           std::vector<WindowTrace>* traces) const {
    int64_t B = window.dim(0);
    int L = cfg.tokens_per_modality();
    int D = cfg.embed_dim;
    bool any_open = false;
    for (int64_t b = 0; b < B; ++b) any_open = any_open || gates.open(b, m, cfg.modalities);

    Tensor mask_tokens = reshape(embedding_lookup(mask_embed, std::vector<int64_t>(B, m)), {B, 1, D});

    std::vector<std::vector<uint8_t>> patch_masks(B);
    Tensor tokens;
    if (any_open || train) {
      PatchSeries series = partition_patches(m, window, cfg.patch_size[m]);
      Tensor real;
      if (cfg.sigma_delta_on) {
        Tensor delta = patch_delta(series);
        SdTokens sdt = tokenize_with_reuse(delta, activity_score(delta), sd, m, tokenizer[m]);
        real = sdt.tokens;
        for (int64_t b = 0; b < B; ++b) patch_masks[b] = sdt.masks[b].active;
      } else {
        real = dense_tokenize(series, tokenizer[m]);
        for (int64_t b = 0; b < B; ++b) patch_masks[b].assign(L, 1);
      }
      Tensor g = reshape(slice(gates.gate, 1, m, 1), {B, 1, 1});
      tokens = add(mul(g, real), mul(sub(Tensor::full({B, 1, 1}, 1.0), g), mask_tokens));
    } else {
      // sensor never read
      tokens = add(Tensor::zeros({B, L, D}), mask_tokens);
    }

    if (traces) {
      for (int64_t b = 0; b < B; ++b) {
        ModalityWindowTrace t;
        t.modality = m;
        t.gate = gates.open(b, m, cfg.modalities);
        t.patches = L;
        if (t.gate) {
          t.patch_active = patch_masks[b];
          t.invocations = t.active_count();
        }
        (*traces)[b].modalities.push_back(t);
      }
    }
    return tokens;
  }

  // All-to-all fusion per Eq-style KV^i = concat_{j != i} T^j. Degenerates to
  // a pass-through for a single modality.
  Tensor cross_modal_fuse(const std::vector<Tensor>& blocks, double drop, std::mt19937_64& rng,
                          bool train) const {
    if (blocks.size() == 1 || !cfg.fusion_on) return concat(blocks, 1);
    std::vector<Tensor> fused;
    fused.reserve(blocks.size());
    for (size_t i = 0; i < blocks.size(); ++i) {
      std::vector<Tensor> others;
      for (size_t j = 0; j < blocks.size(); ++j)
        if (j != i) others.push_back(blocks[j]);
      Tensor kv = others.size() == 1 ? others[0] : concat(others, 1);
      fused.push_back(fusion.forward(blocks[i], kv, /*self_attn=*/false, drop, rng, train));
    }
    return concat(fused, 1);
  }

  // cross-attention of the current tokens over memory; exact identity when
  // the memory is empty (cold start)
  Tensor temporal_context(const Tensor& h, const HistoryMemory& mem, double drop,
                          std::mt19937_64& rng, bool train) const {
    if (!cfg.context_on || mem.empty()) return h;
    return context.forward(h, mem.stacked(), /*self_attn=*/false, drop, rng, train);
  }

  WindowResult forward_window(const WindowInput& in, const GateDecision& gates,
                              const HistoryMemory& mem, bool train, std::mt19937_64& rng) const {
    if (static_cast<int>(in.modality.size()) != cfg.modalities)
      throw std::invalid_argument("forward_window: expected " + std::to_string(cfg.modalities) +
                                  " modalities, got " + std::to_string(in.modality.size()));
    int64_t B = in.modality[0].dim(0);
    int L = cfg.tokens_per_modality();
    int D = cfg.embed_dim;
    WindowResult res;
    res.traces.assign(B, WindowTrace{});

    std::vector<Tensor> blocks;
    blocks.reserve(cfg.modalities);
    for (int m = 0; m < cfg.modalities; ++m)
      blocks.push_back(tokenize_modality(m, in.modality[m], gates, train, &res.traces));

    Tensor h = cross_modal_fuse(blocks, cfg.dropout, rng, train);
    h = add(h, pos_enc);
    h = temporal_context(h, mem, cfg.dropout, rng, train);
    res.context_mean = mean(h, 1);

    Tensor cls_row = add(Tensor::zeros({B, 1, D}), reshape(cls, {1, 1, D}));
    Tensor x = concat({cls_row, h}, 1);
    for (const auto& blk : backbone)
      x = blk.forward(x, x, /*self_attn=*/true, cfg.dropout, rng, train);
    x = layer_norm_lastdim(x, final_ln_g, final_ln_b);

    res.h_cls = reshape(slice(x, 1, 0, 1), {B, D});
    res.tokens = slice(x, 1, 1, cfg.modalities * L);
    res.logits = classifier(res.h_cls);
    return res;
  }

  // controller decision for the next window from the current representation
  GateDecision decide_next_gates(const Tensor& tokens, double tau, bool train,
                                 std::mt19937_64& rng, bool hard_forward = true) const {
    Tensor logits = gate_net.logits(aggregate_features(tokens, cfg.modalities));
    if (train) return gumbel_sigmoid_sample(logits, tau, rng, hard_forward);
    return deterministic_gates(logits);
  }

  // predictive-coding head forecast of a future fused embedding
  Tensor predict_future(const Tensor& h) const { return pred_out(tanh(pred_in(h))); }
};

}  // namespace ami
