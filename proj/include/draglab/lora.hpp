#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "draglab/checkpoint.hpp"
#include "draglab/denoiser.hpp"
#include "draglab/tensor.hpp"

namespace draglab {

inline constexpr int kMaxLoraSteps = 120;

struct LoraConfig {
  int rank = 16;
  double learning_rate = 5e-4;
  int steps = 80;
  /// Projection names to adapt; empty selects every attention projection.
  std::vector<std::string> target_layers;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const LoraConfig&, const LoraConfig&) = default;
};

nlohmann::json to_json(const LoraConfig& c);

/// Adapter deltas plus where they came from.
struct LoraWeights {
  AdapterMap adapters;
  std::string sample_id;
  std::string config_hash;
  LoraConfig config;
  double initial_loss = 0.0;  // probe loss before the first update
  double final_loss = 0.0;    // probe loss after the last update

  const AdapterMap* map() const { return adapters.empty() ? nullptr : &adapters; }
  bool identical_to(const LoraWeights& other) const;
};

/// Zero up-projections, uniform(+-1/sqrt(in)) down-projections.
AdapterMap init_adapters(const Denoiser& model, const LoraConfig& config);

/// Mean noise-prediction MSE over a fixed set of (timestep, noise) probes.
double lora_probe_loss(const Tensor& image, int label, const Checkpoint& ck, const AdapterMap* adapters,
                       std::uint64_t seed);

using LoraStepCallback = std::function<void(int step, double loss)>;

/// Adapts the attention projections to one image; base weights stay frozen.
/// Throws DivergenceError on a non-finite loss.
LoraWeights finetune_lora(const Tensor& image, int label, const Checkpoint& ck, const LoraConfig& config,
                          const LoraStepCallback& on_step = {});

/// Number of finetune_lora calls in this process.
long lora_training_count();

/// SHA-256 of the image bytes, the config fields and the checkpoint hash.
std::string lora_config_hash(const Tensor& image, const LoraConfig& config, const std::string& checkpoint_hash);

/// Weights stored for (sample_id, config_hash), or nothing. A corrupt
/// artifact throws CacheError naming the file.
std::optional<LoraWeights> cache_lookup(const std::string& sample_id, const std::string& config_hash,
                                        const std::filesystem::path& cache_dir);
/// Atomic write of the binary artifact and its JSON sidecar.
void cache_store(const LoraWeights& weights, const std::string& checkpoint_hash,
                 const std::filesystem::path& cache_dir);

/// Cache hit or fresh fine-tune (then stored). `cached` reports which.
LoraWeights obtain_lora(const std::string& sample_id, const Tensor& image, int label, const Checkpoint& ck,
                        const LoraConfig& config, const std::filesystem::path& cache_dir, bool* cached = nullptr,
                        const LoraStepCallback& on_step = {});

}  // namespace draglab
