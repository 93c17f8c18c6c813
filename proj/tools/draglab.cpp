// draglab command line: corpus generation, training, inversion, LoRA,
// single drag edits, ablation benches and the HTTP service.

#include <csignal>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <pthread.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "draglab/bench.hpp"
#include "draglab/checkpoint.hpp"
#include "draglab/corpus.hpp"
#include "draglab/ddim.hpp"
#include "draglab/errors.hpp"
#include "draglab/image_io.hpp"
#include "draglab/lora.hpp"
#include "draglab/pipeline.hpp"
#include "draglab/service.hpp"
#include "draglab/training.hpp"

namespace fs = std::filesystem;
using namespace draglab;

namespace {

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(std::stoi(part));
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, sep)) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

fs::path default_cache() {
  if (const char* env = std::getenv("DRAGLAB_CACHE"); env && *env) return env;
  return "draglab-cache";
}

double psnr(const Tensor& a, const Tensor& b) {
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = (static_cast<double>(a[i]) - b[i]) / 2.0;  // [-1, 1] -> unit range
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  return mse == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"draglab: point-based drag editing on a toy pixel diffusion model"};
  app.require_subcommand(1);
  std::string checkpoint;
  app.add_option("--checkpoint", checkpoint, "Checkpoint file (default $DRAGLAB_CHECKPOINT or the shipped model)");

  // corpus
  auto* corpus_cmd = app.add_subcommand("corpus", "Generate a procedural shape corpus");
  int corpus_n = 20, corpus_size = 64;
  std::uint64_t corpus_seed = 0;
  std::string corpus_out;
  corpus_cmd->add_option("--n", corpus_n, "Number of samples")->check(CLI::PositiveNumber);
  corpus_cmd->add_option("--seed", corpus_seed, "Generator seed");
  corpus_cmd->add_option("--size", corpus_size, "Image side in pixels");
  corpus_cmd->add_option("--out", corpus_out, "Output directory")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the toy denoiser on a corpus");
  std::string train_corpus, train_out = "model.ckpt";
  TrainOptions train_opts;
  std::uint64_t train_seed = 0;
  train_cmd->add_option("--corpus", train_corpus, "Corpus directory (>= 256 samples)")->required();
  train_cmd->add_option("--epochs", train_opts.epochs, "Epochs");
  train_cmd->add_option("--seed", train_seed, "Parameter and data-order seed");
  train_cmd->add_option("--batch", train_opts.batch_size, "Batch size");
  train_cmd->add_option("--lr", train_opts.learning_rate, "Adam learning rate");
  train_cmd->add_option("--out", train_out, "Checkpoint to write");

  // invert
  auto* invert_cmd = app.add_subcommand("invert", "DDIM-invert an image and report the round trip");
  std::string invert_image, invert_out;
  int invert_stop = 35, invert_label = -1;
  invert_cmd->add_option("--image", invert_image, "PNG image")->required();
  invert_cmd->add_option("--stop-step", invert_stop, "Last DDIM step of the inversion");
  invert_cmd->add_option("--label", invert_label, "Class label (-1 = unconditional)");
  invert_cmd->add_option("--out", invert_out, "Directory for latent.bin and reconstruction.png");

  // lora
  auto* lora_cmd = app.add_subcommand("lora", "Fine-tune (or fetch cached) LoRA adapters for a sample");
  std::string lora_sample, lora_cache;
  LoraConfig lora_cfg;
  lora_cmd->add_option("--sample", lora_sample, "Sample directory")->required();
  lora_cmd->add_option("--steps", lora_cfg.steps, "Fine-tuning steps")->check(CLI::Range(0, kMaxLoraSteps));
  lora_cmd->add_option("--rank", lora_cfg.rank, "Adapter rank");
  lora_cmd->add_option("--lr", lora_cfg.learning_rate, "Learning rate");
  lora_cmd->add_option("--seed", lora_cfg.seed, "Noise seed");
  lora_cmd->add_option("--cache", lora_cache, "Adapter cache directory");

  // drag
  auto* drag_cmd = app.add_subcommand("drag", "Run one drag edit");
  std::string drag_sample, drag_out, drag_timesteps = "35", drag_cache;
  EditConfig edit;
  bool no_attn = false;
  drag_cmd->add_option("--sample", drag_sample, "Sample directory")->required();
  drag_cmd->add_option("--timesteps", drag_timesteps, "Comma-separated DDIM steps");
  drag_cmd->add_option("--lambda", edit.optimizer.lambda_reg, "Mask regularisation weight");
  drag_cmd->add_option("--block", edit.optimizer.block_index, "Decoder block for motion supervision");
  drag_cmd->add_option("--lora-steps", edit.lora_steps, "LoRA steps (0 disables)")->check(CLI::Range(0, kMaxLoraSteps));
  drag_cmd->add_option("--seed", edit.optimizer.seed, "Seed");
  drag_cmd->add_option("--max-iters", edit.optimizer.max_iters, "Optimisation iterations");
  drag_cmd->add_option("--step-size", edit.optimizer.step_size, "RMS of each latent update");
  drag_cmd->add_option("--lora-cache", drag_cache, "Adapter cache directory");
  drag_cmd->add_option("--out", drag_out, "Output directory")->required();
  drag_cmd->add_flag("--no-attn-control", no_attn, "Disable key/value injection during synthesis");

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "Run one ablation axis over a corpus");
  std::string bench_corpus, bench_axis, bench_values, bench_out, bench_cache;
  int bench_samples = 0;
  bool bench_no_images = false;
  bench_cmd->add_option("--corpus", bench_corpus, "Corpus directory")->required();
  bench_cmd->add_option("--axis", bench_axis, "timestep|lora_steps|lambda|block|multi_timestep|lora_on_off")
      ->required();
  bench_cmd->add_option("--values", bench_values, "Comma-separated cell values (default: the standard grid)");
  bench_cmd->add_option("--out", bench_out, "Output directory")->required();
  bench_cmd->add_option("--samples", bench_samples, "Use only the first N samples");
  bench_cmd->add_option("--cache", bench_cache, "Cache directory for adapters and finished runs");
  bench_cmd->add_flag("--no-images", bench_no_images, "Skip the per-sample PNG triplets");

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "Serve the HTTP API");
  int serve_port = 8080, serve_jobs = 2;
  std::string serve_host = "0.0.0.0", serve_data = "draglab-data";
  serve_cmd->add_option("--port", serve_port, "Port");
  serve_cmd->add_option("--host", serve_host, "Bind address");
  serve_cmd->add_option("--data", serve_data, "Data directory");
  serve_cmd->add_option("--jobs", serve_jobs, "Concurrent jobs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*corpus_cmd) {
      generate_corpus(corpus_n, corpus_seed, corpus_out, corpus_size);
      std::cout << nlohmann::json{{"corpus", corpus_out}, {"samples", corpus_n}, {"hash", corpus_hash(corpus_out)}}.dump()
                << "\n";
      return 0;
    }
    if (*train_cmd) {
      DenoiserConfig cfg;
      cfg.parameter_seed = train_seed;
      train_opts.data_seed = train_seed;
      train_opts.on_epoch = [](int epoch, double loss) {
        std::cerr << "epoch " << epoch << " loss " << loss << "\n";
      };
      const TrainResult r = train_toy_model(train_corpus, cfg, NoiseSchedule::linear(), train_opts, train_out);
      const CheckpointPtr ck = load_checkpoint(train_out);
      std::cout << nlohmann::json{{"checkpoint", train_out},
                                  {"hash", ck->hash},
                                  {"epoch_losses", r.epoch_losses},
                                  {"if_calibration", ck->if_calibration}}
                       .dump()
                << "\n";
      return 0;
    }

    const CheckpointPtr ck = load_checkpoint(resolve_checkpoint_path(checkpoint));

    if (*invert_cmd) {
      const Tensor image = read_png_rgb(invert_image);
      const ModelContext ctx = ModelContext::of(*ck, nullptr, invert_label);
      const std::vector<LatentState> traj = ddim_invert(image, ctx, invert_stop);
      const Tensor recon = ddim_denoise(traj.back(), ctx);
      const double p = psnr(image, quantize_rgb(recon));
      if (!invert_out.empty()) {
        fs::create_directories(invert_out);
        std::ofstream lat(fs::path(invert_out) / "latent.bin", std::ios::binary);
        lat.write(reinterpret_cast<const char*>(traj.back().data.data()),
                  static_cast<std::streamsize>(traj.back().data.size() * sizeof(float)));
        write_png_rgb((fs::path(invert_out) / "reconstruction.png").string(), recon);
      }
      std::cout << nlohmann::json{{"stop_step", invert_stop},
                                  {"latents", traj.size()},
                                  {"shape", traj.back().data.shape()},
                                  {"reconstruction_psnr_db", p}}
                       .dump()
                << "\n";
      return 0;
    }
    if (*lora_cmd) {
      const BenchSample s = load_sample(lora_sample);
      bool cached = false;
      const fs::path cache = lora_cache.empty() ? default_cache() / "lora" : fs::path(lora_cache);
      const LoraWeights w = obtain_lora(s.id, s.image, s.label, *ck, lora_cfg, cache, &cached);
      std::cout << nlohmann::json{{"sample_id", s.id},
                                  {"cached", cached},
                                  {"config_hash", w.config_hash},
                                  {"initial_loss", w.initial_loss},
                                  {"final_loss", w.final_loss}}
                       .dump()
                << "\n";
      return 0;
    }
    if (*drag_cmd) {
      const BenchSample s = load_sample(drag_sample);
      edit.optimizer.timesteps = parse_int_list(drag_timesteps);
      edit.attention_control = !no_attn;
      const fs::path cache = drag_cache.empty() ? default_cache() / "lora" : fs::path(drag_cache);
      const EditResult r = run_edit(s, edit, *ck, cache);
      write_edit_outputs(r, s, edit, *ck, drag_out);
      std::cout << result_summary(r).dump() << "\n";
      return 0;
    }
    if (*bench_cmd) {
      const Axis axis = parse_axis(bench_axis);
      std::vector<BenchSample> corpus = load_corpus(bench_corpus);
      if (bench_samples > 0 && static_cast<std::size_t>(bench_samples) < corpus.size()) corpus.resize(bench_samples);
      const std::vector<std::string> values = bench_values.empty() ? default_axis_values(axis) : split(bench_values, ',');
      BenchOptions opts;
      const fs::path cache = bench_cache.empty() ? default_cache() : fs::path(bench_cache);
      opts.lora_cache = cache / "lora";
      opts.run_cache = cache / "runs";
      opts.write_images = !bench_no_images;
      opts.log = [](const std::string& m) { std::cerr << m << "\n"; };
      const auto reports = run_ablation(axis, make_cells(axis, values), corpus, *ck, bench_out, opts);
      std::cout << table_csv(reports);
      return 0;
    }
    if (*serve_cmd) {
      ServiceOptions opts;
      opts.data_dir = serve_data;
      opts.max_concurrent_jobs = serve_jobs;
      // Signals are taken synchronously by a watcher thread; workers inherit the mask.
      sigset_t signals;
      sigemptyset(&signals);
      sigaddset(&signals, SIGINT);
      sigaddset(&signals, SIGTERM);
      pthread_sigmask(SIG_BLOCK, &signals, nullptr);
      DragService service(ck, opts);
      const int port = service.bind(serve_host, serve_port);
      std::thread([&service, signals] {
        int sig = 0;
        sigwait(&signals, &sig);
        service.stop();
      }).detach();
      std::cerr << "listening on " << serve_host << ":" << port << "\n";
      service.run();
      return 0;
    }
  } catch (const ValidationError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
