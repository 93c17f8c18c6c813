#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "draglab/denoiser.hpp"
#include "draglab/schedule.hpp"
#include "draglab/tensor.hpp"

namespace draglab {

struct TrainOptions {
  int epochs = 30;
  int batch_size = 8;
  double learning_rate = 1e-3;
  std::uint64_t data_seed = 0;
  std::function<void(int epoch, double mean_loss)> on_epoch;
};

struct TrainExample {
  Tensor image;
  int label = -1;
};

struct TrainResult {
  std::vector<double> epoch_losses;
};

/// Noise-prediction MSE training in place on `model`. Deterministic given the
/// model's parameter seed, the data seed and the example order. Throws
/// DivergenceError naming the epoch if the loss becomes non-finite.
TrainResult train_denoiser(Denoiser& model, const NoiseSchedule& schedule,
                           const std::vector<TrainExample>& data, const TrainOptions& opts);

/// Trains on a corpus directory (>= 256 samples) and writes a checkpoint with
/// the IF calibration constant in its manifest. Returns the loss curve.
TrainResult train_toy_model(const std::filesystem::path& corpus_dir, const DenoiserConfig& config,
                            const NoiseSchedule& schedule, const TrainOptions& opts,
                            const std::filesystem::path& checkpoint_out);

inline constexpr int kMinTrainingCorpus = 256;
/// IF calibration uses reconstructions from this inversion depth.
inline constexpr int kCalibrationStep = 35;
inline constexpr int kCalibrationImages = 16;

struct Checkpoint;
/// Calibration constant from invert/denoise reconstructions of `images`.
double calibrate_fidelity(const Checkpoint& ck, const std::vector<TrainExample>& images, int count);

}  // namespace draglab
