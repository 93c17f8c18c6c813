#include "draglab/pipeline.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <fstream>

#include "draglab/ddim.hpp"
#include "draglab/errors.hpp"
#include "draglab/hashing.hpp"
#include "draglab/image_io.hpp"
#include "draglab/metrics.hpp"
#include "draglab/synthesis.hpp"

namespace draglab {
namespace {

namespace fs = std::filesystem;

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
}

void mark(Tensor& img, const Point& p, int radius, std::array<float, 3> rgb, bool hollow) {
  const int h = img.dim(1), w = img.dim(2);
  const int cx = static_cast<int>(std::lround(p.x)), cy = static_cast<int>(std::lround(p.y));
  for (int y = cy - radius; y <= cy + radius; ++y) {
    for (int x = cx - radius; x <= cx + radius; ++x) {
      if (x < 0 || y < 0 || x >= w || y >= h) continue;
      const bool edge = std::abs(x - cx) == radius || std::abs(y - cy) == radius;
      if (hollow && !edge) continue;
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb[static_cast<std::size_t>(c)];
    }
  }
}

}  // namespace

void EditConfig::validate(int ddim_steps) const {
  optimizer.validate(ddim_steps);
  lora().validate();
}

LoraConfig EditConfig::lora() const {
  LoraConfig c;
  c.rank = lora_rank;
  c.learning_rate = lora_learning_rate;
  c.steps = lora_steps;
  c.seed = optimizer.seed;
  return c;
}

nlohmann::json to_json(const EditConfig& c) {
  return {{"optimizer", to_json(c.optimizer)},
          {"lora_steps", c.lora_steps},
          {"lora_rank", c.lora_rank},
          {"lora_lr", c.lora_learning_rate},
          {"attention_control", c.attention_control}};
}

EditConfig edit_config_from_json(const nlohmann::json& j) {
  EditConfig c;
  if (j.is_null()) return c;
  if (!j.is_object()) throw ValidationError("config: expected an object");
  // Optimizer fields may sit at the top level or under "optimizer".
  c.optimizer = optimizer_config_from_json(j.contains("optimizer") ? j.at("optimizer") : j);
  try {
    c.lora_steps = j.value("lora_steps", c.lora_steps);
    c.lora_rank = j.value("lora_rank", c.lora_rank);
    c.lora_learning_rate = j.value("lora_lr", c.lora_learning_rate);
    c.attention_control = j.value("attention_control", c.attention_control);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  return c;
}

std::string edit_config_hash(const EditConfig& c) { return sha256_hex(to_json(c).dump()); }

nlohmann::json result_summary(const EditResult& r) {
  nlohmann::json located = nlohmann::json::array();
  for (const Point& p : r.located) located.push_back({p.x, p.y});
  return {{"md", r.md},
          {"if", r.if_score},
          {"runtime_s", r.runtime_s},
          {"iterations", r.trace.records.size()},
          {"termination", to_string(r.trace.reason)},
          {"located", located},
          {"lora_cached", r.lora_cached},
          {"lora_initial_loss", r.lora_initial_loss},
          {"lora_final_loss", r.lora_final_loss}};
}

EditResult run_edit(const BenchSample& sample, const EditConfig& config, const Checkpoint& ck,
                    const fs::path& lora_cache, const RecordCallback& on_record) {
  config.validate(ck.schedule.ddim_steps);
  check_image_shape(ck.model, sample.image);
  sample.instruction.validate(sample.image.dim(1), sample.image.dim(2));

  EditResult result;
  LoraWeights lora;
  if (config.lora_steps > 0) {
    lora = obtain_lora(sample.id, sample.image, sample.label, ck, config.lora(), lora_cache, &result.lora_cached);
    result.lora_initial_loss = lora.initial_loss;
    result.lora_final_loss = lora.final_loss;
  }
  const ModelContext ctx = ModelContext::of(ck, lora.map(), sample.label);

  const auto start = std::chrono::steady_clock::now();
  const std::vector<int>& steps = config.optimizer.timesteps;
  const std::vector<LatentState> trajectory = ddim_invert(sample.image, ctx, steps.back());
  LatentSet latents;
  for (int t : steps) latents.emplace(t, trajectory[static_cast<std::size_t>(t - 1)]);

  DragResult drag = drag_optimize(latents, sample.instruction, config.optimizer, ctx, on_record);

  GuidanceConfig guidance;
  guidance.enabled = config.attention_control;
  guidance.start_step = steps.front();
  result.edited = synthesize_edited(drag.latents, trajectory, ctx, guidance);
  result.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  result.trace = std::move(drag.trace);

  // Scores use what would be written to disk.
  result.edited = quantize_rgb(result.edited);
  result.located = locate_handles(ck, sample.image, result.edited, sample.instruction.handles);
  result.md = mean_distance(result.located, sample.instruction.targets);
  result.if_score = image_fidelity(sample.image, result.edited, ck);
  return result;
}

Tensor make_overlay(const Tensor& image, const DragInstruction& ins, const std::vector<Point>& located) {
  Tensor out = image;
  // Dim the protected region so the mask is visible.
  const int h = out.dim(1), w = out.dim(2);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (ins.mask.rank() == 2 && ins.mask[static_cast<std::size_t>(y) * w + x] < 0.5f) out.at(c, y, x) = 0.5f * out.at(c, y, x) - 0.5f;
  for (const Point& p : ins.handles) mark(out, p, 1, {1.0f, -1.0f, -1.0f}, false);
  for (const Point& p : ins.targets) mark(out, p, 1, {-1.0f, -1.0f, 1.0f}, false);
  for (const Point& p : located) mark(out, p, 2, {-1.0f, 1.0f, -1.0f}, true);
  return out;
}

void write_edit_outputs(const EditResult& r, const BenchSample& sample, const EditConfig& config,
                        const Checkpoint& ck, const fs::path& dir) {
  fs::create_directories(dir);
  write_png_rgb((dir / "edited.png").string(), r.edited);
  write_png_rgb((dir / "overlay.png").string(), make_overlay(r.edited, sample.instruction, r.located));
  write_text(dir / "trace.jsonl", trace_to_jsonl(r.trace));
  nlohmann::json j = result_summary(r);
  j["sample_id"] = sample.id;
  j["config"] = to_json(config);
  j["checkpoint_hash"] = ck.hash;
  write_text(dir / "result.json", j.dump(2) + "\n");
}

}  // namespace draglab
