#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "draglab/checkpoint.hpp"
#include "draglab/corpus.hpp"
#include "draglab/pipeline.hpp"

namespace draglab {

enum class Axis { timestep, lora_steps, lambda, block, multi_timestep, lora_on_off };

Axis parse_axis(const std::string& name);
std::string to_string(Axis axis);

struct Cell {
  std::string name;
  EditConfig config;
};

/// One cell per value, every other field pinned to `defaults`.
///   timestep        20,35,50
///   lora_steps      0,20,80,120
///   lambda          0.0,0.1,0.5,1.0
///   block           1,2,3,4
///   multi_timestep  35,30+35+40     (a '+'-joined set per cell)
///   lora_on_off     off,on          (on = defaults.lora_steps, or 80 if that is 0)
std::vector<Cell> make_cells(Axis axis, const std::vector<std::string>& values,
                             const EditConfig& defaults = {});
std::vector<std::string> default_axis_values(Axis axis);

struct SampleOutcome {
  std::string sample_id;
  bool ok = false;
  std::string error;
  double md = 0.0;
  double if_score = 0.0;
  double runtime_s = 0.0;
  int iterations = 0;
  std::string termination;
};

struct CellReport {
  std::string cell;
  EditConfig config;
  std::vector<SampleOutcome> samples;
  double md = 0.0;
  double if_score = 0.0;
  double runtime_s = 0.0;
  bool complete = true;
};

struct BenchOptions {
  std::filesystem::path lora_cache;
  /// Per-(sample, config) result cache shared between axes; empty disables.
  std::filesystem::path run_cache;
  bool write_images = true;
  std::function<void(const std::string&)> log;
};

/// Runs every cell on every sample, then writes report.json,
/// table_<axis>.csv and per-sample PNG triplets under out_dir. A failing
/// sample is recorded and the run continues.
std::vector<CellReport> run_ablation(Axis axis, const std::vector<Cell>& cells,
                                     const std::vector<BenchSample>& corpus, const Checkpoint& ck,
                                     const std::filesystem::path& out_dir, const BenchOptions& opts);

/// Aggregates the per-sample values of successful samples.
void finalize_cell(CellReport& cell);

nlohmann::json report_to_json(Axis axis, const std::vector<CellReport>& cells, const Checkpoint& ck);
std::string table_csv(const std::vector<CellReport>& cells);

}  // namespace draglab
