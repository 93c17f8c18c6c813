#include "draglab/schedule.hpp"

#include <string>

#include "draglab/errors.hpp"

namespace draglab {

NoiseSchedule NoiseSchedule::linear(int num_train_steps, double beta_start, double beta_end,
                                    int ddim_steps) {
  if (num_train_steps < 2 || ddim_steps < 1 || ddim_steps > num_train_steps) {
    throw Error("invalid schedule sizes");
  }
  NoiseSchedule s;
  s.num_train_steps = num_train_steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.ddim_steps = ddim_steps;
  s.betas.resize(static_cast<std::size_t>(num_train_steps));
  s.alpha_bars.resize(static_cast<std::size_t>(num_train_steps));
  double prod = 1.0;
  for (int t = 0; t < num_train_steps; ++t) {
    const double beta = beta_start + (beta_end - beta_start) * t / (num_train_steps - 1);
    s.betas[static_cast<std::size_t>(t)] = beta;
    prod *= 1.0 - beta;
    s.alpha_bars[static_cast<std::size_t>(t)] = prod;
  }
  // Uniform spacing with a +1 offset: 1, 21, ..., 981 for 1000/50.
  const int stride = num_train_steps / ddim_steps;
  for (int step = 1; step <= ddim_steps; ++step) {
    s.step_to_train_t.push_back((step - 1) * stride + 1);
  }
  s.validate();
  return s;
}

int NoiseSchedule::train_t(int step) const {
  if (step < 1 || step > ddim_steps) {
    throw IndexError("DDIM step " + std::to_string(step) + " outside [1, " +
                     std::to_string(ddim_steps) + "]");
  }
  return step_to_train_t[static_cast<std::size_t>(step - 1)];
}

double NoiseSchedule::alpha_bar_at_step(int step) const {
  if (step == 0) return 1.0;
  return alpha_bars[static_cast<std::size_t>(train_t(step))];
}

void NoiseSchedule::validate() const {
  if (alpha_bars.size() != static_cast<std::size_t>(num_train_steps) ||
      betas.size() != alpha_bars.size()) {
    throw Error("schedule arrays do not match num_train_steps");
  }
  if (!(alpha_bars[0] > 0.0 && alpha_bars[0] <= 1.0)) throw Error("alpha_bars[0] out of (0, 1]");
  for (std::size_t t = 1; t < alpha_bars.size(); ++t) {
    if (!(alpha_bars[t] < alpha_bars[t - 1]) || !(alpha_bars[t] > 0.0)) {
      throw Error("alpha_bars not strictly decreasing at t=" + std::to_string(t));
    }
  }
  if (step_to_train_t.size() != static_cast<std::size_t>(ddim_steps)) {
    throw Error("step_to_train_t length differs from ddim_steps");
  }
  for (std::size_t i = 0; i < step_to_train_t.size(); ++i) {
    const int t = step_to_train_t[i];
    if (t < 0 || t >= num_train_steps) throw Error("step_to_train_t entry out of range");
    if (i > 0 && t <= step_to_train_t[i - 1]) throw Error("step_to_train_t not strictly increasing");
  }
}

}  // namespace draglab
