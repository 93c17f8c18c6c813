#include "draglab/synthesis.hpp"

#include <algorithm>
#include <string>

#include "draglab/errors.hpp"

namespace draglab {
namespace {

void clamp_image(Tensor& x) {
  for (float& v : x.vec()) v = std::clamp(v, -1.0f, 1.0f);
}

}  // namespace

void GuidanceConfig::validate(int ddim_steps) const {
  if (start_step < 0 || start_step > ddim_steps) {
    throw GuidanceError("guidance start_step " + std::to_string(start_step) + " outside [0, " +
                        std::to_string(ddim_steps) + "]");
  }
}

Tensor synthesize_edited(const LatentSet& optimized, const std::vector<LatentState>& reference,
                         const ModelContext& ctx, const GuidanceConfig& guidance, Tensor* reconstruction) {
  if (optimized.empty()) throw GuidanceError("no optimised latent to synthesise from");
  guidance.validate(ctx.schedule->ddim_steps);
  const int top = optimized.rbegin()->first;
  for (const auto& [step, s] : optimized) {
    if (s.step_index != step) throw GuidanceError("optimised latent keyed by the wrong step");
    check_image_shape(*ctx.model, s.data);
    s.validate(*ctx.schedule);
  }
  if (top < 1) throw GuidanceError("optimised latent must be at step >= 1");
  if (reference.size() < static_cast<std::size_t>(top)) {
    throw GuidanceError("reference trajectory has " + std::to_string(reference.size()) +
                        " steps, edit starts at step " + std::to_string(top));
  }
  for (std::size_t i = 0; i < static_cast<std::size_t>(top); ++i) {
    if (reference[i].step_index != static_cast<int>(i) + 1) {
      throw GuidanceError("reference trajectory step mismatch at position " + std::to_string(i));
    }
    if (!reference[i].data.same_shape(optimized.rbegin()->second.data)) {
      throw GuidanceError("reference trajectory shape differs from the optimised latent");
    }
  }

  const bool run_reference = guidance.enabled || reconstruction;
  Tensor x = optimized.rbegin()->second.data;
  Tensor r = reference[static_cast<std::size_t>(top - 1)].data;
  for (int step = top; step >= 1; --step) {
    if (step != top) {
      auto it = optimized.find(step);
      if (it != optimized.end()) x = it->second.data;
    }
    Tensor eps_x;
    if (run_reference) {
      const bool control = guidance.enabled && step <= guidance.start_step;
      AttentionControl rec;
      rec.mode = control ? AttentionControl::Mode::record : AttentionControl::Mode::off;
      rec.slots = guidance.layers;
      Tensor eps_r = predict_noise(ctx, r, step, control ? &rec : nullptr);
      if (control) {
        rec.mode = AttentionControl::Mode::inject;
        eps_x = predict_noise(ctx, x, step, &rec);
      } else {
        eps_x = predict_noise(ctx, x, step);
      }
      r = ddim_step(*ctx.schedule, r, eps_r, step, step - 1);
    } else {
      eps_x = predict_noise(ctx, x, step);
    }
    x = ddim_step(*ctx.schedule, x, eps_x, step, step - 1);
  }
  clamp_image(x);
  if (reconstruction) {
    clamp_image(r);
    *reconstruction = std::move(r);
  }
  return x;
}

Tensor synthesize_edited(const LatentState& optimized, const std::vector<LatentState>& reference,
                         const ModelContext& ctx, const GuidanceConfig& guidance, Tensor* reconstruction) {
  LatentSet set;
  set.emplace(optimized.step_index, optimized);
  return synthesize_edited(set, reference, ctx, guidance, reconstruction);
}

}  // namespace draglab
