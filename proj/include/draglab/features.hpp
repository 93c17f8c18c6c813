#pragma once

#include <span>
#include <vector>

#include "draglab/autograd.hpp"
#include "draglab/ddim.hpp"

namespace draglab {

/// Decoder-block activations resized to latent resolution.
struct FeatureMap {
  ag::Var data;  // [C, H, W], differentiable w.r.t. the latent it came from
  int block_index = 0;
  int step_index = 0;

  const Tensor& values() const { return data->value; }
  int channels() const { return data->value.dim(0); }
  int height() const { return data->value.dim(1); }
  int width() const { return data->value.dim(2); }
};

FeatureMap extract_features(const ag::Var& latent, int step_index, const ModelContext& ctx,
                            int block_index);
FeatureMap extract_features(const LatentState& latent, const ModelContext& ctx, int block_index);

/// Several blocks from a single forward pass.
std::vector<FeatureMap> extract_feature_blocks(const ag::Var& latent, int step_index,
                                               const ModelContext& ctx, std::span<const int> blocks);

/// Bilinear read of the feature vector at a subpixel (x, y); exact on lattice
/// points. Throws BoundsError outside [0, W-1] x [0, H-1].
std::vector<float> sample_feature_at(const FeatureMap& fmap, double x, double y);
void sample_feature_at(const Tensor& fmap, double x, double y, std::span<float> out);

}  // namespace draglab
