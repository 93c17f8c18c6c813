#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "draglab/checkpoint.hpp"
#include "draglab/corpus.hpp"
#include "draglab/drag.hpp"
#include "draglab/lora.hpp"

namespace draglab {

/// Everything that defines one edit besides the sample and the checkpoint.
struct EditConfig {
  OptimizerConfig optimizer;
  int lora_steps = 80;
  int lora_rank = 16;
  double lora_learning_rate = 5e-4;
  bool attention_control = true;

  void validate(int ddim_steps) const;
  LoraConfig lora() const;
  friend bool operator==(const EditConfig&, const EditConfig&) = default;
};

nlohmann::json to_json(const EditConfig& c);
/// Missing fields keep their defaults; bad values throw ValidationError.
EditConfig edit_config_from_json(const nlohmann::json& j);
/// SHA-256 over the serialised config.
std::string edit_config_hash(const EditConfig& c);

struct EditResult {
  Tensor edited;
  DragTrace trace;
  std::vector<Point> located;  // final semantic handle positions used by MD
  double md = 0.0;
  double if_score = 0.0;
  double runtime_s = 0.0;      // inversion + drag + synthesis
  bool lora_cached = false;
  double lora_initial_loss = 0.0;
  double lora_final_loss = 0.0;
};

nlohmann::json result_summary(const EditResult& r);

/// Full edit of one sample: optional LoRA (through the cache), inversion to
/// the largest configured step, drag optimisation, guided synthesis and the
/// MD/IF scores against the source. Shared by the CLI, the service and the
/// bench so their outputs agree bit for bit.
EditResult run_edit(const BenchSample& sample, const EditConfig& config, const Checkpoint& ck,
                    const std::filesystem::path& lora_cache, const RecordCallback& on_record = {});

/// edited.png, overlay.png, trace.jsonl and result.json in `dir`.
void write_edit_outputs(const EditResult& r, const BenchSample& sample, const EditConfig& config,
                        const Checkpoint& ck, const std::filesystem::path& dir);

/// Source image with handles, targets and located points marked.
Tensor make_overlay(const Tensor& image, const DragInstruction& ins, const std::vector<Point>& located);

}  // namespace draglab
