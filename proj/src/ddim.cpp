#include "draglab/ddim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "draglab/errors.hpp"

namespace draglab {

void LatentState::validate(const NoiseSchedule& schedule) const {
  if (step_index < 0 || step_index > schedule.ddim_steps) {
    throw IndexError("latent step_index " + std::to_string(step_index) + " outside [0, " +
                     std::to_string(schedule.ddim_steps) + "]");
  }
  if (!all_finite(data)) throw Error("latent contains non-finite values");
}

void check_image_shape(const Denoiser& model, const Tensor& image) {
  const int c = model.config().image_channels;
  if (image.rank() != 3 || image.dim(0) != c || image.dim(1) % 8 != 0 || image.dim(2) % 8 != 0 ||
      image.dim(1) == 0 || image.dim(2) == 0) {
    throw ShapeError("image shape " + shape_string(image.shape()) + " does not match model [" +
                     std::to_string(c) + ", 8k, 8k]");
  }
}

Tensor predict_noise(const ModelContext& ctx, const Tensor& x, int step, AttentionControl* attention) {
  ForwardOptions opts;
  opts.train_t = ctx.schedule->train_t(step);
  opts.label = ctx.label;
  opts.adapters = ctx.adapters;
  opts.attention = attention;
  return ctx.model->forward(ag::constant(x), opts).eps->value;
}

Tensor ddim_step(const NoiseSchedule& schedule, const Tensor& x, const Tensor& eps, int from_step,
                 int to_step) {
  const double a_from = schedule.alpha_bar_at_step(from_step);
  const double a_to = schedule.alpha_bar_at_step(to_step);
  // x_to = sqrt(a_to) * x0_hat + sqrt(1 - a_to) * eps, x0_hat from x_from.
  const auto c_x = static_cast<float>(std::sqrt(a_to / a_from));
  const auto c_eps =
      static_cast<float>(std::sqrt(1.0 - a_to) - std::sqrt(a_to) * std::sqrt(1.0 - a_from) / std::sqrt(a_from));
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = c_x * x[i] + c_eps * eps[i];
  return out;
}

std::vector<LatentState> ddim_invert(const Tensor& image, const ModelContext& ctx, int stop_step) {
  check_image_shape(*ctx.model, image);
  if (stop_step < 1 || stop_step > ctx.schedule->ddim_steps) {
    throw IndexError("stop_step " + std::to_string(stop_step) + " outside [1, " +
                     std::to_string(ctx.schedule->ddim_steps) + "]");
  }
  std::vector<LatentState> out;
  out.reserve(static_cast<std::size_t>(stop_step));
  Tensor x = image;
  for (int step = 1; step <= stop_step; ++step) {
    const Tensor eps = predict_noise(ctx, x, step);
    x = ddim_step(*ctx.schedule, x, eps, step - 1, step);
    out.push_back({x, step, LatentOrigin::inverted});
  }
  return out;
}

Tensor ddim_denoise(const LatentState& start, const ModelContext& ctx) {
  check_image_shape(*ctx.model, start.data);
  if (start.step_index < 1) throw IndexError("ddim_denoise needs step_index >= 1");
  start.validate(*ctx.schedule);
  Tensor x = start.data;
  for (int step = start.step_index; step >= 1; --step) {
    const Tensor eps = predict_noise(ctx, x, step);
    x = ddim_step(*ctx.schedule, x, eps, step, step - 1);
  }
  for (float& v : x.vec()) v = std::clamp(v, -1.0f, 1.0f);
  return x;
}

}  // namespace draglab
