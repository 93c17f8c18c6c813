#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "draglab/checkpoint.hpp"

namespace draglab {

struct ServiceOptions {
  std::filesystem::path data_dir = "draglab-data";
  int max_concurrent_jobs = 2;
};

/// HTTP front end for the drag studio.
///
///   POST /samples                 multipart image, mask, points[, label] -> 201 {sample_id}
///   GET  /samples, /samples/{id}  sample listing and detail
///   GET  /samples/{id}/image.png, /samples/{id}/mask.png
///   POST /drag {sample_id, config} -> 202 {job_id}
///   POST /lora {sample_id, steps}  -> 202 {job_id}
///   GET  /jobs/{id}                job state
///   GET  /drag/{id}/events, /lora/{id}/events   server-sent events
///   GET  /results/{id}/image.png, /trace.jsonl, /result.json
///
/// Jobs run on a bounded worker pool; every job is single-producer for its
/// event stream and ends in exactly one terminal event.
class DragService {
 public:
  DragService(CheckpointPtr ck, ServiceOptions opts);
  ~DragService();
  DragService(const DragService&) = delete;
  DragService& operator=(const DragService&) = delete;

  /// Binds the listening socket; port 0 picks a free port. Returns the port.
  int bind(const std::string& host, int port);
  /// Serves until stop(). Requires bind().
  void run();
  /// Stops the server and the workers; running jobs are cancelled.
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace draglab
