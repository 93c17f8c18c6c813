#include "draglab/drag.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

namespace draglab {
namespace {

struct Bilinear {
  int x0, x1, y0, y1;
  float fx, fy;
};

Bilinear bilinear_at(double x, double y, int h, int w) {
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  Bilinear b{};
  b.x0 = static_cast<int>(std::floor(x));
  b.y0 = static_cast<int>(std::floor(y));
  b.x1 = std::min(b.x0 + 1, w - 1);
  b.y1 = std::min(b.y0 + 1, h - 1);
  b.fx = static_cast<float>(x - b.x0);
  b.fy = static_cast<float>(y - b.y0);
  return b;
}

float sample(const Tensor& f, int c, const Bilinear& b) {
  const float top = f.at(c, b.y0, b.x0) * (1.0f - b.fx) + f.at(c, b.y0, b.x1) * b.fx;
  const float bot = f.at(c, b.y1, b.x0) * (1.0f - b.fx) + f.at(c, b.y1, b.x1) * b.fx;
  return top * (1.0f - b.fy) + bot * b.fy;
}

void scatter(Tensor& g, int c, const Bilinear& b, float v) {
  g.at(c, b.y0, b.x0) += v * (1.0f - b.fx) * (1.0f - b.fy);
  g.at(c, b.y0, b.x1) += v * b.fx * (1.0f - b.fy);
  g.at(c, b.y1, b.x0) += v * (1.0f - b.fx) * b.fy;
  g.at(c, b.y1, b.x1) += v * b.fx * b.fy;
}

struct PatchTerm {
  Bilinear src;  // q, read from the detached map
  Bilinear dst;  // q + d, read from the live map
};

bool all_within(std::span<const Point> handles, std::span<const Point> targets, double eps) {
  for (std::size_t i = 0; i < handles.size(); ++i) {
    if (distance(handles[i], targets[i]) >= eps) return false;
  }
  return true;
}

void check_latent_set(const LatentSet& latents, const OptimizerConfig& config) {
  if (latents.size() != config.timesteps.size()) {
    throw IndexError("drag_optimize: latents do not cover the configured timesteps");
  }
  for (int t : config.timesteps) {
    auto it = latents.find(t);
    if (it == latents.end() || it->second.step_index != t) {
      throw IndexError("drag_optimize: missing latent for step " + std::to_string(t));
    }
  }
}

struct StepGraph {
  ag::Var latent;
  FeatureMap fmap;
};

StepGraph forward_step(const Tensor& z, int step, const OptimizerConfig& config, const ModelContext& ctx) {
  ag::Var latent = ag::parameter(z);
  FeatureMap fmap = extract_features(latent, step, ctx, config.block_index);
  return {latent, std::move(fmap)};
}

}  // namespace

void OptimizerConfig::validate(int ddim_steps) const {
  if (timesteps.empty()) throw ValidationError("timesteps: must not be empty");
  for (std::size_t i = 0; i < timesteps.size(); ++i) {
    if (timesteps[i] < 1 || timesteps[i] > ddim_steps) {
      throw ValidationError("timesteps[" + std::to_string(i) + "]: outside [1, " + std::to_string(ddim_steps) + "]");
    }
    if (i > 0 && timesteps[i] <= timesteps[i - 1]) {
      throw ValidationError("timesteps: must be sorted and unique");
    }
  }
  if (!std::isfinite(lambda_reg) || lambda_reg < 0.0) throw ValidationError("lambda: must be finite and >= 0");
  if (block_index < 1 || block_index > 4) throw ValidationError("block: must be in [1, 4]");
  if (!(step_size > 0.0) || !std::isfinite(step_size)) throw ValidationError("step_size: must be > 0");
  if (max_iters < 1) throw ValidationError("max_iters: must be >= 1");
  if (patch_radius < 0) throw ValidationError("patch_radius: must be >= 0");
  if (track_radius < 0) throw ValidationError("track_radius: must be >= 0");
  if (!(stop_epsilon >= 0.0)) throw ValidationError("stop_epsilon: must be >= 0");
}

nlohmann::json to_json(const OptimizerConfig& c) {
  return {{"timesteps", c.timesteps},       {"lambda", c.lambda_reg},
          {"block", c.block_index},         {"step_size", c.step_size},
          {"max_iters", c.max_iters},       {"patch_radius", c.patch_radius},
          {"track_radius", c.track_radius}, {"stop_epsilon", c.stop_epsilon},
          {"seed", c.seed}};
}

OptimizerConfig optimizer_config_from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  if (!j.is_object()) throw ValidationError("config: expected an object");
  try {
    if (j.contains("timesteps")) {
      const auto& ts = j.at("timesteps");
      c.timesteps = ts.is_array() ? ts.get<std::vector<int>>() : std::vector<int>{ts.get<int>()};
    }
    c.lambda_reg = j.value("lambda", c.lambda_reg);
    c.block_index = j.value("block", c.block_index);
    c.step_size = j.value("step_size", c.step_size);
    c.max_iters = j.value("max_iters", c.max_iters);
    c.patch_radius = j.value("patch_radius", c.patch_radius);
    c.track_radius = j.value("track_radius", c.track_radius);
    c.stop_epsilon = j.value("stop_epsilon", c.stop_epsilon);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  return c;
}

nlohmann::json to_json(const DragRecord& r) {
  nlohmann::json hs = nlohmann::json::array();
  for (const Point& p : r.handles) hs.push_back({p.x, p.y});
  return {{"iter", r.iter},
          {"handles", hs},
          {"loss_motion", r.loss_motion},
          {"loss_reg", r.loss_reg},
          {"loss_total", r.loss_total}};
}

std::string trace_to_jsonl(const DragTrace& trace) {
  std::ostringstream out;
  for (const DragRecord& r : trace.records) out << to_json(r).dump() << '\n';
  return out.str();
}

const char* to_string(Termination t) { return t == Termination::converged ? "converged" : "max_iters"; }

ag::Var motion_loss(const FeatureMap& fmap, const Tensor& fmap_detached, std::span<const Point> handles,
                    std::span<const Point> targets, int r1, double min_distance) {
  const Tensor& live = fmap.values();
  if (!live.same_shape(fmap_detached)) throw ShapeError("motion_loss: feature maps differ in shape");
  if (handles.size() != targets.size()) throw ShapeError("motion_loss: handles/targets length mismatch");
  const int c = live.dim(0), h = live.dim(1), w = live.dim(2);

  std::vector<PatchTerm> terms;
  for (std::size_t i = 0; i < handles.size(); ++i) {
    const double dx = targets[i].x - handles[i].x;
    const double dy = targets[i].y - handles[i].y;
    const double len = std::hypot(dx, dy);
    if (len < 1e-9 || len < min_distance) continue;
    const double ux = dx / len, uy = dy / len;
    for (int oy = -r1; oy <= r1; ++oy) {
      for (int ox = -r1; ox <= r1; ++ox) {
        const double qx = std::clamp(handles[i].x + ox, 0.0, static_cast<double>(w - 1));
        const double qy = std::clamp(handles[i].y + oy, 0.0, static_cast<double>(h - 1));
        terms.push_back({bilinear_at(qx, qy, h, w), bilinear_at(qx + ux, qy + uy, h, w)});
      }
    }
  }

  double total = 0.0;
  for (const PatchTerm& t : terms) {
    double acc = 0.0;
    for (int ch = 0; ch < c; ++ch) acc += std::fabs(sample(fmap_detached, ch, t.src) - sample(live, ch, t.dst));
    total += acc / c;
  }
  Tensor out({1}, static_cast<float>(total));
  if (terms.empty()) return ag::make_result(std::move(out), {}, nullptr);

  Tensor detached = fmap_detached;
  return ag::make_result(std::move(out), {fmap.data},
                         [terms = std::move(terms), detached = std::move(detached), c](ag::Node& self) {
                           const ag::Var& f = self.inputs[0];
                           Tensor& g = f->ensure_grad();
                           const float k = self.grad[0] / static_cast<float>(c);
                           for (const PatchTerm& t : terms) {
                             for (int ch = 0; ch < c; ++ch) {
                               const float diff = sample(detached, ch, t.src) - sample(f->value, ch, t.dst);
                               // d|a - f| / df = -sign(a - f)
                               const float s = diff > 0.0f ? -1.0f : (diff < 0.0f ? 1.0f : 0.0f);
                               if (s != 0.0f) scatter(g, ch, t.dst, k * s);
                             }
                           }
                         });
}

ag::Var mask_regularizer(const ag::Var& latent, const Tensor& latent_init, const Tensor& mask,
                         double lambda_reg) {
  const Tensor& z = latent->value;
  if (!z.same_shape(latent_init)) throw ShapeError("mask_regularizer: latent shapes differ");
  if (z.rank() != 3 || mask.rank() != 2 || mask.dim(0) != z.dim(1) || mask.dim(1) != z.dim(2)) {
    throw ShapeError("mask_regularizer: mask " + shape_string(mask.shape()) + " vs latent " +
                     shape_string(z.shape()));
  }
  const std::size_t hw = mask.size();
  const int channels = z.dim(0);
  double acc = 0.0;
  for (int c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < hw; ++i) {
      const std::size_t j = c * hw + i;
      acc += std::fabs(static_cast<double>(z[j]) - latent_init[j]) * (1.0 - mask[i]);
    }
  }
  Tensor out({1}, static_cast<float>(lambda_reg * acc));
  return ag::make_result(std::move(out), {latent},
                         [init = latent_init, mask, lambda_reg, hw, channels](ag::Node& self) {
                           const ag::Var& x = self.inputs[0];
                           Tensor& g = x->ensure_grad();
                           const auto k = static_cast<float>(lambda_reg) * self.grad[0];
                           for (int c = 0; c < channels; ++c) {
                             for (std::size_t i = 0; i < hw; ++i) {
                               const std::size_t j = c * hw + i;
                               const float d = x->value[j] - init[j];
                               const float s = d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f);
                               g[j] += k * s * (1.0f - mask[i]);
                             }
                           }
                         });
}

std::vector<Point> track_points(const Tensor& fmap_cur, std::span<const Point> handles,
                                const std::vector<std::vector<float>>& anchors, int r2) {
  if (anchors.size() != handles.size()) throw ShapeError("track_points: one anchor per handle required");
  const int c = fmap_cur.dim(0), h = fmap_cur.dim(1), w = fmap_cur.dim(2);
  std::vector<Point> out;
  out.reserve(handles.size());
  for (std::size_t i = 0; i < handles.size(); ++i) {
    if (anchors[i].size() != static_cast<std::size_t>(c)) throw ShapeError("track_points: anchor width");
    const int cx = std::clamp(static_cast<int>(std::lround(handles[i].x)), 0, w - 1);
    const int cy = std::clamp(static_cast<int>(std::lround(handles[i].y)), 0, h - 1);
    const int x0 = std::max(0, cx - r2), x1 = std::min(w - 1, cx + r2);
    const int y0 = std::max(0, cy - r2), y1 = std::min(h - 1, cy + r2);
    double best = std::numeric_limits<double>::infinity();
    Point best_p{static_cast<double>(cx), static_cast<double>(cy)};
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        double d = 0.0;
        for (int ch = 0; ch < c; ++ch) d += std::fabs(static_cast<double>(fmap_cur.at(ch, y, x)) - anchors[i][ch]);
        if (d < best) {
          best = d;
          best_p = {static_cast<double>(x), static_cast<double>(y)};
        }
      }
    }
    out.push_back(best_p);
  }
  return out;
}

std::map<int, Tensor> drag_gradients(const LatentSet& latents, const LatentSet& initial,
                                     std::span<const Point> handles, const DragInstruction& instruction,
                                     const OptimizerConfig& config, const ModelContext& ctx) {
  check_latent_set(latents, config);
  std::vector<ag::Var> zs;
  ag::Var total;
  for (int t : config.timesteps) {
    StepGraph sg = forward_step(latents.at(t).data, t, config, ctx);
    ag::Var lm = motion_loss(sg.fmap, sg.fmap.values(), handles, instruction.targets, config.patch_radius,
                             config.stop_epsilon);
    ag::Var lr = mask_regularizer(sg.latent, initial.at(t).data, instruction.mask, config.lambda_reg);
    ag::Var l = ag::add(lm, lr);
    total = total ? ag::add(total, l) : l;
    zs.push_back(sg.latent);
  }
  ag::backward(total);
  std::map<int, Tensor> out;
  for (std::size_t i = 0; i < zs.size(); ++i) {
    out[config.timesteps[i]] = zs[i]->grad.empty() ? Tensor(zs[i]->value.shape(), 0.0f) : zs[i]->grad;
  }
  return out;
}

DragResult drag_optimize(const LatentSet& latents, const DragInstruction& instruction,
                         const OptimizerConfig& config, const ModelContext& ctx, const RecordCallback& on_record) {
  const auto start = std::chrono::steady_clock::now();
  config.validate(ctx.schedule->ddim_steps);
  check_latent_set(latents, config);
  const Tensor& first = latents.begin()->second.data;
  instruction.validate(first.dim(1), first.dim(2));

  DragResult result;
  result.latents = latents;
  std::vector<Point> handles = instruction.handles;
  std::vector<std::vector<float>> anchors;
  const std::size_t n_steps = config.timesteps.size();

  auto finish = [&](Termination reason) {
    result.trace.reason = reason;
    result.trace.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    for (auto& [t, s] : result.latents) s.origin = LatentOrigin::optimized;
  };

  for (int iter = 0; iter < config.max_iters; ++iter) {
    std::vector<StepGraph> graphs;
    graphs.reserve(n_steps);
    for (int t : config.timesteps) graphs.push_back(forward_step(result.latents.at(t).data, t, config, ctx));

    const Tensor& primary = graphs.front().fmap.values();
    if (iter == 0) {
      for (const Point& p : handles) anchors.push_back(sample_feature_at(graphs.front().fmap, p.x, p.y));
    } else {
      handles = track_points(primary, handles, anchors, config.track_radius);
    }

    ag::Var motion;
    DragRecord rec;
    rec.iter = iter;
    rec.handles = handles;
    for (std::size_t k = 0; k < n_steps; ++k) {
      const int t = config.timesteps[k];
      ag::Var lm = motion_loss(graphs[k].fmap, graphs[k].fmap.values(), handles, instruction.targets,
                               config.patch_radius, config.stop_epsilon);
      rec.loss_motion += lm->value[0];
      rec.loss_reg += mask_regularizer(ag::constant(result.latents.at(t).data), latents.at(t).data,
                                       instruction.mask, config.lambda_reg)->value[0];
      motion = motion ? ag::add(motion, lm) : lm;
    }
    rec.loss_total = rec.loss_motion + rec.loss_reg;
    if (!std::isfinite(rec.loss_total)) {
      finish(Termination::max_iters);
      throw DragDivergence("drag loss became non-finite at iteration " + std::to_string(iter), result.trace);
    }
    result.trace.records.push_back(rec);
    if (on_record) on_record(rec);
    if (all_within(handles, instruction.targets, config.stop_epsilon)) {
      finish(Termination::converged);
      return result;
    }

    // Normalised gradient step on the motion term, then the proximal step of
    // the L1 mask term: protected deviations from the initial latent shrink
    // by step * lambda towards zero.
    ag::backward(motion);
    const auto shrink = static_cast<float>(config.step_size * config.lambda_reg);
    const std::size_t hw = instruction.mask.size();
    for (std::size_t k = 0; k < n_steps; ++k) {
      const int t = config.timesteps[k];
      const ag::Var& z = graphs[k].latent;
      Tensor& data = result.latents.at(t).data;
      const Tensor& init = latents.at(t).data;
      if (!z->grad.empty()) {
        // Unit-RMS direction: raw motion gradients are tiny and their scale
        // varies by block and timestep.
        double ss = 0.0;
        for (float g : z->grad.vec()) ss += static_cast<double>(g) * g;
        const double rms = std::sqrt(ss / static_cast<double>(data.size()));
        if (rms > 0.0) {
          const auto scale = static_cast<float>(config.step_size / rms);
          for (std::size_t j = 0; j < data.size(); ++j) data[j] -= scale * z->grad[j];
        }
      }
      if (shrink > 0.0f) {
        for (std::size_t j = 0; j < data.size(); ++j) {
          const float thr = shrink * (1.0f - instruction.mask[j % hw]);
          if (thr <= 0.0f) continue;
          const float d = data[j] - init[j];
          const float m = std::max(std::fabs(d) - thr, 0.0f);
          data[j] = init[j] + std::copysign(m, d);
        }
      }
    }
  }
  finish(Termination::max_iters);
  return result;
}

}  // namespace draglab
