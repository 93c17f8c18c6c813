#pragma once

#include <span>
#include <vector>

#include "draglab/checkpoint.hpp"
#include "draglab/instruction.hpp"
#include "draglab/tensor.hpp"

namespace draglab {

/// Features for both metrics come from the frozen base model, unconditional,
/// evaluated on the clean image at the least noisy DDIM step.
inline constexpr int kMetricStep = 1;
inline constexpr int kMatcherBlock = 3;
inline constexpr int kFidelityBlocks[] = {2, 3};

/// Final semantic handle positions in `edited`: each source anchor is matched
/// over the whole frame with the tracking rule.
std::vector<Point> locate_handles(const Checkpoint& ck, const Tensor& source, const Tensor& edited,
                                  std::span<const Point> handles);

/// Mean Euclidean distance between positions and targets.
double mean_distance(std::span<const Point> positions, std::span<const Point> targets);
double mean_distance(const Tensor& source, const Tensor& edited, const DragInstruction& instruction,
                     const Checkpoint& ck);

/// Mean over the fidelity blocks of the mean squared difference between
/// unit-normalised feature vectors. Symmetric, zero for identical inputs.
double feature_distance(const Checkpoint& ck, const Tensor& a, const Tensor& b);

/// 1 - D with D = raw / (raw + c), c the checkpoint's calibration constant.
double image_fidelity(const Tensor& source, const Tensor& edited, const Checkpoint& ck);
double fidelity_from_distance(double raw, double calibration);

/// Calibration constant that maps the median raw distance to IF 0.9.
double calibration_from_median(std::vector<double> raw_distances);

double aggregate_mean(std::span<const double> values);

}  // namespace draglab
