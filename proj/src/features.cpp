#include "draglab/features.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "draglab/errors.hpp"

namespace draglab {
namespace {

void check_block(int block_index) {
  if (block_index < 1 || block_index > 4) {
    throw IndexError("decoder block index " + std::to_string(block_index) + " outside [1, 4]");
  }
}

}  // namespace

std::vector<FeatureMap> extract_feature_blocks(const ag::Var& latent, int step_index,
                                               const ModelContext& ctx, std::span<const int> blocks) {
  int deepest = 0;
  for (int b : blocks) {
    check_block(b);
    deepest = std::max(deepest, b);
  }
  check_image_shape(*ctx.model, latent->value);
  ForwardOptions opts;
  opts.train_t = ctx.schedule->train_t(step_index);
  opts.label = ctx.label;
  opts.adapters = ctx.adapters;
  opts.stop_after_block = deepest;
  ForwardResult res = ctx.model->forward(latent, opts);
  const int h = latent->value.dim(1);
  const int w = latent->value.dim(2);
  std::vector<FeatureMap> out;
  for (int b : blocks) {
    out.push_back({ag::resize_bilinear(res.features[static_cast<std::size_t>(b - 1)], h, w), b, step_index});
  }
  return out;
}

FeatureMap extract_features(const ag::Var& latent, int step_index, const ModelContext& ctx,
                            int block_index) {
  const int blocks[1] = {block_index};
  return std::move(extract_feature_blocks(latent, step_index, ctx, blocks).front());
}

FeatureMap extract_features(const LatentState& latent, const ModelContext& ctx, int block_index) {
  return extract_features(ag::constant(latent.data), latent.step_index, ctx, block_index);
}

void sample_feature_at(const Tensor& fmap, double x, double y, std::span<float> out) {
  const int c = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2);
  if (!(x >= 0.0 && x <= w - 1 && y >= 0.0 && y <= h - 1)) {
    throw BoundsError("point (" + std::to_string(x) + ", " + std::to_string(y) + ") outside " +
                      std::to_string(w) + "x" + std::to_string(h) + " feature map");
  }
  if (out.size() != static_cast<std::size_t>(c)) throw ShapeError("sample_feature_at: output size");
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const auto fx = static_cast<float>(x - x0);
  const auto fy = static_cast<float>(y - y0);
  for (int ch = 0; ch < c; ++ch) {
    const float top = fmap.at(ch, y0, x0) * (1.0f - fx) + fmap.at(ch, y0, x1) * fx;
    const float bot = fmap.at(ch, y1, x0) * (1.0f - fx) + fmap.at(ch, y1, x1) * fx;
    out[static_cast<std::size_t>(ch)] = top * (1.0f - fy) + bot * fy;
  }
}

std::vector<float> sample_feature_at(const FeatureMap& fmap, double x, double y) {
  std::vector<float> v(static_cast<std::size_t>(fmap.channels()));
  sample_feature_at(fmap.values(), x, y, v);
  return v;
}

}  // namespace draglab
