#include "draglab/training.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "draglab/checkpoint.hpp"
#include "draglab/corpus.hpp"
#include "draglab/ddim.hpp"
#include "draglab/errors.hpp"
#include "draglab/metrics.hpp"
#include "draglab/optimizer.hpp"
#include "draglab/rng.hpp"

namespace draglab {

TrainResult train_denoiser(Denoiser& model, const NoiseSchedule& schedule,
                           const std::vector<TrainExample>& data, const TrainOptions& opts) {
  if (data.empty()) throw CorpusError("training set is empty");
  TrainResult result;
  if (opts.epochs <= 0) return result;

  std::vector<ag::Var> trainable;
  for (const auto& [name, p] : model.params()) trainable.push_back(p);
  model.set_trainable(true);
  Adam adam(trainable, opts.learning_rate);
  const int batch = std::max(1, opts.batch_size);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    // Fixed, seed-derived visiting order.
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    CounterRng shuffle(opts.data_seed, 0x5100000000ULL + static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.next_u64() % i)]);
    }
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch));
      const float weight = 1.0f / static_cast<float>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const TrainExample& ex = data[order[i]];
        CounterRng rng(opts.data_seed, (static_cast<std::uint64_t>(epoch) << 32) + i);
        // Timesteps are drawn from the DDIM grid the sampler actually visits.
        const int step = rng.uniform_int(1, schedule.ddim_steps);
        const int t = schedule.train_t(step);
        const double ab = schedule.alpha_bars[static_cast<std::size_t>(t)];
        Tensor noise = rng.normal_tensor(ex.image.shape());
        Tensor xt(ex.image.shape());
        const auto sa = static_cast<float>(std::sqrt(ab));
        const auto sb = static_cast<float>(std::sqrt(1.0 - ab));
        for (std::size_t j = 0; j < xt.size(); ++j) xt[j] = sa * ex.image[j] + sb * noise[j];
        // Labels are dropped 10% of the time so the null class stays trained.
        const int label = rng.uniform() < 0.1 ? -1 : ex.label;
        ForwardOptions fo;
        fo.train_t = t;
        fo.label = label;
        ForwardResult res = model.forward(ag::constant(std::move(xt)), fo);
        ag::Var loss = ag::mse(res.eps, noise);
        const double lv = loss->value[0];
        if (!std::isfinite(lv)) {
          model.set_trainable(false);
          throw DivergenceError("training loss became non-finite at epoch " + std::to_string(epoch));
        }
        total += lv;
        ag::backward(ag::scale(loss, weight));
      }
      adam.step();
    }
    const double mean = total / static_cast<double>(data.size());
    result.epoch_losses.push_back(mean);
    if (opts.on_epoch) opts.on_epoch(epoch, mean);
  }
  model.set_trainable(false);
  model.zero_grad();
  return result;
}

double calibrate_fidelity(const Checkpoint& ck, const std::vector<TrainExample>& images, int count) {
  std::vector<double> raw;
  const int n = std::min<int>(count, static_cast<int>(images.size()));
  for (int i = 0; i < n; ++i) {
    const TrainExample& ex = images[static_cast<std::size_t>(i)];
    const ModelContext ctx = ModelContext::of(ck, nullptr, ex.label);
    const std::vector<LatentState> traj = ddim_invert(ex.image, ctx, kCalibrationStep);
    const Tensor recon = ddim_denoise(traj.back(), ctx);
    raw.push_back(feature_distance(ck, ex.image, recon));
  }
  return calibration_from_median(std::move(raw));
}

TrainResult train_toy_model(const std::filesystem::path& corpus_dir, const DenoiserConfig& config,
                            const NoiseSchedule& schedule, const TrainOptions& opts,
                            const std::filesystem::path& checkpoint_out) {
  config.validate();
  schedule.validate();
  const std::vector<BenchSample> corpus = load_corpus(corpus_dir);
  if (corpus.empty()) throw CorpusError("corpus " + corpus_dir.string() + " is empty");
  if (corpus.size() < static_cast<std::size_t>(kMinTrainingCorpus)) {
    throw CorpusError("corpus " + corpus_dir.string() + " has " + std::to_string(corpus.size()) +
                      " samples, need at least " + std::to_string(kMinTrainingCorpus));
  }
  std::vector<TrainExample> data;
  data.reserve(corpus.size());
  for (const BenchSample& s : corpus) {
    data.push_back({s.image, config.conditioning == Conditioning::class_label ? s.label : -1});
  }

  Denoiser model(config);
  TrainResult result = train_denoiser(model, schedule, data, opts);

  Checkpoint trained(model.clone(), schedule);
  const double calibration = calibrate_fidelity(trained, data, kCalibrationImages);

  nlohmann::json manifest;
  manifest["format"] = "draglab-checkpoint";
  manifest["epochs"] = opts.epochs;
  manifest["batch_size"] = opts.batch_size;
  manifest["learning_rate"] = opts.learning_rate;
  manifest["data_seed"] = opts.data_seed;
  manifest["parameter_seed"] = config.parameter_seed;
  manifest["corpus_hash"] = corpus_hash(corpus_dir);
  manifest["corpus_size"] = corpus.size();
  manifest["image_size"] = data.front().image.dim(1);
  manifest["epoch_losses"] = result.epoch_losses;
  manifest["if_calibration"] = calibration;
  save_checkpoint(checkpoint_out.string(), model, schedule, std::move(manifest));
  return result;
}

}  // namespace draglab
