#pragma once

#include <vector>

#include "draglab/checkpoint.hpp"
#include "draglab/denoiser.hpp"
#include "draglab/schedule.hpp"
#include "draglab/tensor.hpp"

namespace draglab {

/// Everything a denoiser call needs besides the input.
struct ModelContext {
  const Denoiser* model = nullptr;
  const NoiseSchedule* schedule = nullptr;
  const AdapterMap* adapters = nullptr;
  int label = -1;

  static ModelContext of(const Checkpoint& ck, const AdapterMap* adapters = nullptr, int label = -1) {
    return {&ck.model, &ck.schedule, adapters, label};
  }
};

enum class LatentOrigin { inverted, optimized, sampled };

struct LatentState {
  Tensor data;
  int step_index = 0;
  LatentOrigin origin = LatentOrigin::inverted;

  void validate(const NoiseSchedule& schedule) const;
};

void check_image_shape(const Denoiser& model, const Tensor& image);

Tensor predict_noise(const ModelContext& ctx, const Tensor& x, int step,
                     AttentionControl* attention = nullptr);

/// Deterministic DDIM move of x from one step to another given eps.
Tensor ddim_step(const NoiseSchedule& schedule, const Tensor& x, const Tensor& eps, int from_step,
                 int to_step);

/// Latents for steps 1..stop_step. The model is evaluated at the target
/// step's timestep on the previous latent.
std::vector<LatentState> ddim_invert(const Tensor& image, const ModelContext& ctx, int stop_step);

/// Runs from start.step_index down to the clean image, clamped to [-1, 1].
Tensor ddim_denoise(const LatentState& start, const ModelContext& ctx);

}  // namespace draglab
