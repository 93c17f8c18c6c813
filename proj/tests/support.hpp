#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include <unistd.h>

#include "draglab/checkpoint.hpp"
#include "draglab/corpus.hpp"
#include "draglab/denoiser.hpp"
#include "draglab/rng.hpp"
#include "draglab/schedule.hpp"
#include "draglab/tensor.hpp"

namespace testing {

using namespace draglab;

inline DenoiserConfig small_config(std::uint64_t seed = 0) {
  DenoiserConfig c;
  c.base_channels = 8;
  c.parameter_seed = seed;
  return c;
}

/// Untrained model, every parameter (including the zero-initialised ones)
/// jittered so outputs and gradients are non-trivial.
inline std::shared_ptr<Checkpoint> random_checkpoint(std::uint64_t seed = 7, float scale = 0.05f,
                                                     int base_channels = 8) {
  DenoiserConfig cfg = small_config(seed);
  cfg.base_channels = base_channels;
  auto ck = std::make_shared<Checkpoint>(Denoiser(cfg), NoiseSchedule::linear());
  CounterRng rng(seed, 0xBEEF);
  for (auto& [name, p] : ck->model.params()) {
    for (float& v : p->value.vec()) v += scale * static_cast<float>(rng.normal());
  }
  ck->manifest = {{"epochs", 0}, {"test", true}};
  ck->hash = "test-" + std::to_string(seed);
  ck->if_calibration = 0.01;
  return ck;
}

inline Tensor random_image(std::uint64_t seed, int size = 16, float amp = 0.8f) {
  CounterRng rng(seed, 0x1111);
  Tensor t({3, size, size});
  for (float& v : t.vec()) v = static_cast<float>(rng.uniform(-amp, amp));
  return t;
}

inline Tensor random_tensor(std::uint64_t seed, std::vector<int> shape, float amp = 1.0f) {
  CounterRng rng(seed, 0x2222);
  Tensor t(std::move(shape));
  for (float& v : t.vec()) v = static_cast<float>(rng.uniform(-amp, amp));
  return t;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("draglab-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline bool reference_available() { return std::filesystem::exists(reference_checkpoint_path()); }

}  // namespace testing
