#include "draglab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "draglab/ddim.hpp"
#include "draglab/drag.hpp"
#include "draglab/errors.hpp"
#include "draglab/features.hpp"

namespace draglab {
namespace {

std::vector<FeatureMap> metric_features(const Checkpoint& ck, const Tensor& image, std::span<const int> blocks) {
  const ModelContext ctx = ModelContext::of(ck);
  return extract_feature_blocks(ag::constant(image), kMetricStep, ctx, blocks);
}

void normalise_columns(Tensor& f) {
  const int c = f.dim(0);
  const std::size_t hw = static_cast<std::size_t>(f.dim(1)) * f.dim(2);
  for (std::size_t i = 0; i < hw; ++i) {
    double n = 0.0;
    for (int ch = 0; ch < c; ++ch) n += static_cast<double>(f[ch * hw + i]) * f[ch * hw + i];
    const double inv = 1.0 / (std::sqrt(n) + 1e-10);
    for (int ch = 0; ch < c; ++ch) f[ch * hw + i] = static_cast<float>(f[ch * hw + i] * inv);
  }
}

}  // namespace

std::vector<Point> locate_handles(const Checkpoint& ck, const Tensor& source, const Tensor& edited,
                                  std::span<const Point> handles) {
  const int blocks[1] = {kMatcherBlock};
  const FeatureMap src = std::move(metric_features(ck, source, blocks).front());
  const FeatureMap dst = std::move(metric_features(ck, edited, blocks).front());
  std::vector<std::vector<float>> anchors;
  for (const Point& p : handles) anchors.push_back(sample_feature_at(src, p.x, p.y));
  const int radius = std::max(dst.width(), dst.height());
  return track_points(dst.values(), handles, anchors, radius);
}

double mean_distance(std::span<const Point> positions, std::span<const Point> targets) {
  if (positions.size() != targets.size() || positions.empty()) {
    throw ShapeError("mean_distance: positions/targets must be non-empty and equal length");
  }
  std::vector<double> d;
  for (std::size_t i = 0; i < positions.size(); ++i) d.push_back(distance(positions[i], targets[i]));
  return aggregate_mean(d);
}

double mean_distance(const Tensor& source, const Tensor& edited, const DragInstruction& instruction,
                     const Checkpoint& ck) {
  if (!source.same_shape(edited)) throw ShapeError("mean_distance: images differ in size");
  const std::vector<Point> found = locate_handles(ck, source, edited, instruction.handles);
  return mean_distance(found, instruction.targets);
}

double feature_distance(const Checkpoint& ck, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("image_fidelity: images differ in size");
  std::vector<FeatureMap> fa = metric_features(ck, a, kFidelityBlocks);
  std::vector<FeatureMap> fb = metric_features(ck, b, kFidelityBlocks);
  double total = 0.0;
  for (std::size_t k = 0; k < fa.size(); ++k) {
    Tensor x = fa[k].values();
    Tensor y = fb[k].values();
    normalise_columns(x);
    normalise_columns(y);
    const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = static_cast<double>(x[i]) - y[i];
      s += d * d;
    }
    total += s / static_cast<double>(hw);
  }
  return total / static_cast<double>(fa.size());
}

double fidelity_from_distance(double raw, double calibration) {
  if (raw <= 0.0) return 1.0;
  return std::clamp(1.0 - raw / (raw + calibration), 0.0, 1.0);
}

double image_fidelity(const Tensor& source, const Tensor& edited, const Checkpoint& ck) {
  return fidelity_from_distance(feature_distance(ck, source, edited), ck.if_calibration);
}

double calibration_from_median(std::vector<double> raw) {
  if (raw.empty()) throw ShapeError("calibration needs at least one distance");
  std::sort(raw.begin(), raw.end());
  const std::size_t n = raw.size();
  const double median = n % 2 ? raw[n / 2] : 0.5 * (raw[n / 2 - 1] + raw[n / 2]);
  // D(median) = median / (median + 9 median) = 0.1
  return std::max(9.0 * median, 1e-12);
}

double aggregate_mean(std::span<const double> values) {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

}  // namespace draglab
