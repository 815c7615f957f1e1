// Sensing traces: the ground truth consumed by metrics, heatmaps and the
// energy model.
#pragma once

#include <cstdint>
#include <vector>

namespace ami {

struct ModalityWindowTrace {
  int modality = 0;
  bool gate = true;                    // hard modality gate applied this window
  std::vector<uint8_t> patch_active;   // length L when gated on, empty when off
  int64_t patches = 0;                 // L
  int64_t invocations = 0;             // tokenizer invocations this window

  int64_t active_count() const {
    int64_t n = 0;
    for (uint8_t v : patch_active) n += v;
    return n;
  }
  // fraction of the window actually sampled: 0 when the gate is closed
  double active_fraction() const {
    if (!gate || patches == 0) return 0.0;
    return static_cast<double>(active_count()) / static_cast<double>(patches);
  }
};

// one evaluated window of one stream
struct WindowTrace {
  std::vector<ModalityWindowTrace> modalities;
};

}  // namespace ami
