#pragma once

#include <vector>

#include "draglab/ddim.hpp"
#include "draglab/drag.hpp"

namespace draglab {

struct GuidanceConfig {
  bool enabled = true;
  /// Keys/values are substituted from this DDIM step down to step 1.
  int start_step = 35;
  /// Decoder self-attention slots to control, bit i = decoder block i + 1.
  unsigned layers = 0x3;

  void validate(int ddim_steps) const;
};

/// Denoises the edit branch from the largest optimised step while a
/// reconstruction branch runs in lockstep from the inverted latent at that
/// step. When the edit branch reaches another optimised step it continues
/// from that step's optimised latent. With guidance on, the controlled edit
/// layers read keys/values recorded by the reconstruction branch.
/// `reference` must be ddim_invert output covering the largest step.
Tensor synthesize_edited(const LatentSet& optimized, const std::vector<LatentState>& reference,
                         const ModelContext& ctx, const GuidanceConfig& guidance,
                         Tensor* reconstruction = nullptr);
Tensor synthesize_edited(const LatentState& optimized, const std::vector<LatentState>& reference,
                         const ModelContext& ctx, const GuidanceConfig& guidance,
                         Tensor* reconstruction = nullptr);

}  // namespace draglab
