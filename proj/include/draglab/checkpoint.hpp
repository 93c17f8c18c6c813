#pragma once

#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "draglab/denoiser.hpp"
#include "draglab/schedule.hpp"

namespace draglab {

/// Immutable model bundle: denoiser weights, noise schedule and the manifest
/// recorded at training time. Safe to share across threads once loaded.
struct Checkpoint {
  Denoiser model;
  NoiseSchedule schedule;
  nlohmann::json manifest;
  std::string hash;           // SHA-256 of the parameter bytes and manifest
  double if_calibration = 1.0;  // IF squashing constant, see metrics

  Checkpoint(Denoiser m, NoiseSchedule s) : model(std::move(m)), schedule(std::move(s)) {}
};

using CheckpointPtr = std::shared_ptr<const Checkpoint>;

/// Binary layout: "DRAGLAB1", u64 manifest length, manifest JSON, u64 tensor
/// count, then per tensor: u32 name length, name, u32 rank, i32 dims, f32 data.
void save_checkpoint(const std::string& path, const Denoiser& model, const NoiseSchedule& schedule,
                     nlohmann::json manifest);
CheckpointPtr load_checkpoint(const std::string& path);

/// Fresh (untrained) checkpoint kept in memory; it predicts zero noise.
CheckpointPtr make_initial_checkpoint(const DenoiserConfig& config, const NoiseSchedule& schedule);

std::string parameter_checksum(const Denoiser& model);

/// `explicit_path` if set, else $DRAGLAB_CHECKPOINT, else the shipped
/// reference checkpoint.
std::string resolve_checkpoint_path(const std::string& explicit_path = {});
std::string reference_checkpoint_path();

nlohmann::json to_json(const DenoiserConfig& c);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const NoiseSchedule& s);

}  // namespace draglab
