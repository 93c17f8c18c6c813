#pragma once

#include <vector>

namespace draglab {

/// Diffusion coefficients plus the DDIM step-index mapping.
///
/// DDIM step indices run 0..ddim_steps, where step 0 is the clean image
/// (alpha_bar = 1) and step s >= 1 maps to training timestep
/// step_to_train_t[s - 1]. "t = 35" in an editing config means step 35.
struct NoiseSchedule {
  int num_train_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int ddim_steps = 50;
  std::vector<double> betas;
  std::vector<double> alpha_bars;
  std::vector<int> step_to_train_t;

  static NoiseSchedule linear(int num_train_steps = 1000, double beta_start = 1e-4,
                              double beta_end = 0.02, int ddim_steps = 50);

  int train_t(int step) const;
  /// alpha_bar at a DDIM step; step 0 returns exactly 1.
  double alpha_bar_at_step(int step) const;
  void validate() const;

  friend bool operator==(const NoiseSchedule&, const NoiseSchedule&) = default;
};

}  // namespace draglab
