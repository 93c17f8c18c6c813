#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "draglab/ddim.hpp"
#include "draglab/errors.hpp"
#include "draglab/features.hpp"
#include "draglab/instruction.hpp"

namespace draglab {

struct OptimizerConfig {
  std::vector<int> timesteps{35};
  double lambda_reg = 0.1;
  int block_index = 3;
  double step_size = 0.01;  // RMS of each latent update
  int max_iters = 80;
  int patch_radius = 1;   // r1
  int track_radius = 3;   // r2
  double stop_epsilon = 1.0;
  std::uint64_t seed = 0;

  void validate(int ddim_steps) const;
  int primary_step() const { return timesteps.front(); }
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

nlohmann::json to_json(const OptimizerConfig& c);
/// Missing fields keep their defaults.
OptimizerConfig optimizer_config_from_json(const nlohmann::json& j);

struct DragRecord {
  int iter = 0;
  std::vector<Point> handles;
  double loss_motion = 0.0;
  double loss_reg = 0.0;
  double loss_total = 0.0;
};

enum class Termination { converged, max_iters };

struct DragTrace {
  std::vector<DragRecord> records;
  double wall_seconds = 0.0;
  Termination reason = Termination::max_iters;
};

nlohmann::json to_json(const DragRecord& r);
std::string trace_to_jsonl(const DragTrace& trace);
const char* to_string(Termination t);

/// Raised when a loss turns non-finite; carries the records gathered so far.
class DragDivergence : public DivergenceError {
 public:
  DragDivergence(const std::string& what, DragTrace trace)
      : DivergenceError(what), trace_(std::move(trace)) {}
  const DragTrace& trace() const { return trace_; }

 private:
  DragTrace trace_;
};

/// Sum over handles and patch cells q (radius r1) of the channel-mean L1
/// between detached F(q) and F(q + d), d the unit vector towards the target.
/// Points closer than `min_distance` to their target contribute nothing.
ag::Var motion_loss(const FeatureMap& fmap, const Tensor& fmap_detached, std::span<const Point> handles,
                    std::span<const Point> targets, int r1, double min_distance = 0.0);

/// lambda * sum |(latent - latent_init) * (1 - mask)|, mask broadcast over channels.
ag::Var mask_regularizer(const ag::Var& latent, const Tensor& latent_init, const Tensor& mask,
                         double lambda_reg);

/// Moves each handle to the lattice point of the (2 r2 + 1)^2 window around it
/// (clipped to the image) whose features are closest in L1 to its anchor.
/// Ties go to the smallest row-major index.
std::vector<Point> track_points(const Tensor& fmap_cur, std::span<const Point> handles,
                                const std::vector<std::vector<float>>& anchors, int r2);

using LatentSet = std::map<int, LatentState>;

struct DragResult {
  LatentSet latents;
  DragTrace trace;
};

using RecordCallback = std::function<void(const DragRecord&)>;

/// Latent optimisation by motion supervision and mask regularisation with
/// point tracking. `latents` must cover exactly config.timesteps.
DragResult drag_optimize(const LatentSet& latents, const DragInstruction& instruction,
                         const OptimizerConfig& config, const ModelContext& ctx,
                         const RecordCallback& on_record = {});

/// Gradient of the summed per-timestep objective w.r.t. every latent, for
/// fixed handle positions. Exposed for testing the accumulation rule.
std::map<int, Tensor> drag_gradients(const LatentSet& latents, const LatentSet& initial,
                                     std::span<const Point> handles, const DragInstruction& instruction,
                                     const OptimizerConfig& config, const ModelContext& ctx);

}  // namespace draglab
