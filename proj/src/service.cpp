#include "draglab/service.hpp"

#include <atomic>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "draglab/corpus.hpp"
#include "draglab/errors.hpp"
#include "draglab/hashing.hpp"
#include "draglab/image_io.hpp"
#include "draglab/lora.hpp"
#include "draglab/pipeline.hpp"

namespace draglab {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Cancelled : Error {
  Cancelled() : Error("job cancelled: service shutting down") {}
};

enum class JobKind { drag, lora };

struct Job {
  std::string id;
  JobKind kind = JobKind::drag;
  std::string sample_id;
  EditConfig config;
  int lora_steps = 0;

  std::mutex m;
  std::condition_variable cv;
  std::string state = "queued";
  std::vector<std::string> events;
  bool terminal = false;

  void publish(const json& event, const char* new_state = nullptr) {
    {
      std::lock_guard<std::mutex> lk(m);
      if (terminal) return;
      if (new_state) state = new_state;
      events.push_back(event.dump());
      if (state == "done" || state == "failed") terminal = true;
    }
    cv.notify_all();
  }
  void set_state(const char* s) {
    std::lock_guard<std::mutex> lk(m);
    state = s;
  }
  json status() {
    std::lock_guard<std::mutex> lk(m);
    return {{"job_id", id},
            {"kind", kind == JobKind::drag ? "drag" : "lora"},
            {"sample_id", sample_id},
            {"state", state},
            {"trace_cursor", events.size()}};
  }
};

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, int status, const std::string& msg) {
  reply(res, status, {{"error", msg}});
}

struct FieldError {
  std::string field;
  std::string message;
};

std::string field_of(const std::string& message) {
  const auto colon = message.find(':');
  const auto bracket = message.find('[');
  const auto end = std::min(colon, bracket);
  return end == std::string::npos ? "points" : message.substr(0, end);
}

}  // namespace

struct DragService::Impl {
  CheckpointPtr ck;
  ServiceOptions opts;
  httplib::Server server;
  std::atomic<bool> stopping{false};

  std::mutex state_m;
  std::map<std::string, BenchSample> samples;
  std::map<std::string, std::shared_ptr<Job>> jobs;
  std::set<std::string> adapter_locks;
  long next_job = 1;

  std::mutex queue_m;
  std::condition_variable queue_cv;
  std::deque<std::shared_ptr<Job>> queue;
  std::vector<std::thread> workers;

  Impl(CheckpointPtr c, ServiceOptions o) : ck(std::move(c)), opts(std::move(o)) {
    fs::create_directories(samples_dir());
    fs::create_directories(results_dir());
    fs::create_directories(lora_cache());
    for (const auto& entry : fs::directory_iterator(samples_dir())) {
      if (!entry.is_directory()) continue;
      try {
        BenchSample s = load_sample(entry.path());
        samples[s.id] = std::move(s);
      } catch (const std::exception&) {
        // Partially written sample directories are skipped.
      }
    }
    routes();
    const int n = std::max(1, opts.max_concurrent_jobs);
    for (int i = 0; i < n; ++i) workers.emplace_back([this] { worker(); });
  }

  fs::path samples_dir() const { return opts.data_dir / "samples"; }
  fs::path results_dir() const { return opts.data_dir / "results"; }
  fs::path lora_cache() const { return opts.data_dir / "lora_cache"; }

  void shutdown() {
    if (stopping.exchange(true)) return;
    queue_cv.notify_all();
    for (auto& w : workers) {
      if (w.joinable()) w.join();
    }
    {
      std::lock_guard<std::mutex> lk(state_m);
      for (auto& [id, job] : jobs) {
        job->publish({{"state", "failed"}, {"error", "service stopped"}}, "failed");
      }
    }
    // Open streams flush their terminal event before the sockets close.
    server.stop();
  }

  std::shared_ptr<Job> find_job(const std::string& id) {
    std::lock_guard<std::mutex> lk(state_m);
    auto it = jobs.find(id);
    return it == jobs.end() ? nullptr : it->second;
  }

  std::shared_ptr<Job> enqueue(std::shared_ptr<Job> job) {
    {
      std::lock_guard<std::mutex> lk(state_m);
      job->id = "job-" + std::to_string(next_job++);
      jobs[job->id] = job;
    }
    {
      std::lock_guard<std::mutex> lk(queue_m);
      queue.push_back(job);
    }
    queue_cv.notify_one();
    return job;
  }

  void worker() {
    for (;;) {
      std::shared_ptr<Job> job;
      {
        std::unique_lock<std::mutex> lk(queue_m);
        queue_cv.wait(lk, [&] { return stopping || !queue.empty(); });
        if (stopping) return;
        job = queue.front();
        queue.pop_front();
      }
      job->set_state("running");
      if (job->kind == JobKind::drag) {
        run_drag(*job);
      } else {
        run_lora(*job);
      }
    }
  }

  BenchSample sample_copy(const std::string& id) {
    std::lock_guard<std::mutex> lk(state_m);
    return samples.at(id);
  }

  void run_drag(Job& job) {
    try {
      const BenchSample sample = sample_copy(job.sample_id);
      auto on_record = [&](const DragRecord& r) {
        if (stopping) throw Cancelled();
        json hs = json::array();
        for (const Point& p : r.handles) hs.push_back({p.x, p.y});
        job.publish({{"iter", r.iter}, {"handles", hs}, {"loss_total", r.loss_total}});
      };
      const EditResult r = run_edit(sample, job.config, *ck, lora_cache(), on_record);
      write_edit_outputs(r, sample, job.config, *ck, results_dir() / job.id);
      json done = result_summary(r);
      done["state"] = "done";
      done["result_url"] = "/results/" + job.id + "/image.png";
      done["trace_url"] = "/results/" + job.id + "/trace.jsonl";
      job.publish(done, "done");
    } catch (const std::exception& e) {
      job.publish({{"state", "failed"}, {"error", e.what()}}, "failed");
    }
  }

  void run_lora(Job& job) {
    try {
      const BenchSample sample = sample_copy(job.sample_id);
      EditConfig defaults;
      LoraConfig cfg = defaults.lora();
      cfg.steps = job.lora_steps;
      bool cached = false;
      const LoraWeights w = obtain_lora(sample.id, sample.image, sample.label, *ck, cfg, lora_cache(), &cached,
                                        [&](int step, double loss) {
                                          if (stopping) throw Cancelled();
                                          job.publish({{"step", step}, {"loss", loss}});
                                        });
      json done = {{"state", "done"},
                   {"cached", cached},
                   {"steps", cfg.steps},
                   {"config_hash", w.config_hash},
                   {"initial_loss", w.initial_loss},
                   {"final_loss", w.final_loss}};
      release_lock(job.sample_id);
      job.publish(done, "done");
    } catch (const std::exception& e) {
      release_lock(job.sample_id);
      job.publish({{"state", "failed"}, {"error", e.what()}}, "failed");
    }
  }

  void release_lock(const std::string& sample_id) {
    std::lock_guard<std::mutex> lk(state_m);
    adapter_locks.erase(sample_id);
  }

  // ---- handlers ----

  void post_sample(const httplib::Request& req, httplib::Response& res) {
    std::vector<FieldError> errors;
    auto file = [&](const char* key) -> std::string {
      if (req.has_file(key)) return req.get_file_value(key).content;
      return {};
    };
    const std::string image_bytes = file("image");
    const std::string mask_bytes = file("mask");
    const std::string points_text = file("points");
    Tensor image, mask;
    if (image_bytes.empty()) {
      errors.push_back({"image", "required"});
    } else {
      try {
        image = decode_png_rgb(image_bytes);
        check_image_shape(ck->model, image);
        if (ck->manifest.contains("image_size")) {
          const int size = ck->manifest["image_size"].get<int>();
          if (image.dim(1) != size || image.dim(2) != size) {
            throw ShapeError("image must be " + std::to_string(size) + "x" + std::to_string(size));
          }
        }
      } catch (const std::exception& e) {
        errors.push_back({"image", e.what()});
        image = Tensor();
      }
    }
    if (mask_bytes.empty()) {
      errors.push_back({"mask", "required"});
    } else {
      try {
        mask = decode_png_mask(mask_bytes);
      } catch (const std::exception& e) {
        errors.push_back({"mask", e.what()});
      }
    }
    if (!image.empty() && !mask.empty() && (mask.dim(0) != image.dim(1) || mask.dim(1) != image.dim(2))) {
      errors.push_back({"mask", "mask/image size mismatch"});
    }
    DragInstruction ins;
    ins.mask = mask;
    if (points_text.empty()) {
      errors.push_back({"points", "required"});
    } else {
      try {
        points_from_json(json::parse(points_text), ins);
        if (!image.empty()) {
          const int h = image.dim(1), w = image.dim(2);
          DragInstruction probe = ins;
          probe.mask = Tensor({h, w}, 1.0f);  // mask problems are reported above
          probe.validate(h, w);
        }
      } catch (const json::exception& e) {
        errors.push_back({"points", std::string("invalid JSON: ") + e.what()});
      } catch (const ValidationError& e) {
        errors.push_back({field_of(e.what()), e.what()});
      }
    }
    int label = -1;
    if (req.has_file("label")) {
      try {
        label = std::stoi(req.get_file_value("label").content);
        if (label < -1 || label >= ck->model.config().num_classes) throw std::out_of_range("label");
      } catch (const std::exception&) {
        errors.push_back({"label", "must be -1 or a class id below " + std::to_string(ck->model.config().num_classes)});
      }
    }
    if (!errors.empty()) {
      json errs = json::array();
      for (const FieldError& e : errors) errs.push_back({{"field", e.field}, {"message", e.message}});
      reply(res, 400, {{"error", errors.front().message}, {"errors", errs}});
      return;
    }

    Sha256 h;
    h.update(image_bytes).update(mask_bytes).update(points_to_json(ins).dump()).update(std::to_string(label));
    BenchSample s;
    s.id = "s-" + h.hex().substr(0, 12);
    s.label = label;
    s.image = image;
    s.instruction = std::move(ins);
    {
      std::lock_guard<std::mutex> lk(state_m);
      if (!samples.count(s.id)) {
        const fs::path tmp = samples_dir() / (s.id + ".tmp");
        fs::remove_all(tmp);
        save_sample(s, tmp);
        fs::remove_all(samples_dir() / s.id);
        fs::rename(tmp, samples_dir() / s.id);
        samples[s.id] = load_sample(samples_dir() / s.id);
      }
    }
    reply(res, 201, {{"sample_id", s.id}});
  }

  json sample_json(const BenchSample& s) {
    return {{"sample_id", s.id},
            {"label", s.label},
            {"width", s.image.dim(2)},
            {"height", s.image.dim(1)},
            {"points", points_to_json(s.instruction)},
            {"image_url", "/samples/" + s.id + "/image.png"},
            {"mask_url", "/samples/" + s.id + "/mask.png"}};
  }

  void post_drag(const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception& e) {
      return reply_error(res, 400, std::string("invalid JSON: ") + e.what());
    }
    if (!body.is_object() || !body.contains("sample_id") || !body["sample_id"].is_string()) {
      return reply_error(res, 400, "sample_id: required");
    }
    auto job = std::make_shared<Job>();
    job->kind = JobKind::drag;
    job->sample_id = body["sample_id"].get<std::string>();
    try {
      job->config = edit_config_from_json(body.value("config", json::object()));
      job->config.validate(ck->schedule.ddim_steps);
    } catch (const ValidationError& e) {
      return reply_error(res, 400, e.what());
    }
    {
      std::lock_guard<std::mutex> lk(state_m);
      if (!samples.count(job->sample_id)) return reply_error(res, 404, "unknown sample " + job->sample_id);
      if (adapter_locks.count(job->sample_id)) {
        return reply_error(res, 409, "adapter training in progress for sample " + job->sample_id);
      }
    }
    enqueue(job);
    reply(res, 202, {{"job_id", job->id}, {"events_url", "/drag/" + job->id + "/events"}});
  }

  void post_lora(const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception& e) {
      return reply_error(res, 400, std::string("invalid JSON: ") + e.what());
    }
    if (!body.is_object() || !body.contains("sample_id") || !body["sample_id"].is_string()) {
      return reply_error(res, 400, "sample_id: required");
    }
    if (!body.contains("steps") || !body["steps"].is_number_integer()) {
      return reply_error(res, 422, "steps: integer in [0, " + std::to_string(kMaxLoraSteps) + "] required");
    }
    const auto steps = body["steps"].get<long long>();
    if (steps < 0 || steps > kMaxLoraSteps) {
      return reply_error(res, 422, "steps: must be in [0, " + std::to_string(kMaxLoraSteps) + "]");
    }
    auto job = std::make_shared<Job>();
    job->kind = JobKind::lora;
    job->sample_id = body["sample_id"].get<std::string>();
    job->lora_steps = static_cast<int>(steps);
    {
      std::lock_guard<std::mutex> lk(state_m);
      if (!samples.count(job->sample_id)) return reply_error(res, 404, "unknown sample " + job->sample_id);
      if (!adapter_locks.insert(job->sample_id).second) {
        return reply_error(res, 409, "adapter training already in progress for sample " + job->sample_id);
      }
    }
    enqueue(job);
    reply(res, 202, {{"job_id", job->id}, {"events_url", "/lora/" + job->id + "/events"}});
  }

  void stream_events(const httplib::Request& req, httplib::Response& res, JobKind kind) {
    auto job = find_job(req.matches[1]);
    if (!job || job->kind != kind) return reply_error(res, 404, "unknown job " + std::string(req.matches[1]));
    std::size_t cursor = 0;
    try {
      if (req.has_param("cursor")) cursor = std::stoul(req.get_param_value("cursor"));
      if (req.has_header("Last-Event-ID")) cursor = std::stoul(req.get_header_value("Last-Event-ID")) + 1;
    } catch (const std::exception&) {
      return reply_error(res, 400, "cursor: must be a non-negative integer");
    }
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider("text/event-stream", [this, job, cursor](std::size_t, httplib::DataSink& sink) mutable {
      std::vector<std::string> batch;
      bool finished = false;
      {
        std::unique_lock<std::mutex> lk(job->m);
        job->cv.wait_for(lk, std::chrono::milliseconds(500),
                         [&] { return job->events.size() > cursor || job->terminal || stopping; });
        for (std::size_t i = cursor; i < job->events.size(); ++i) batch.push_back(job->events[i]);
        finished = job->terminal;
      }
      for (const std::string& e : batch) {
        const std::string msg = "id: " + std::to_string(cursor) + "\ndata: " + e + "\n\n";
        if (!sink.write(msg.data(), msg.size())) return false;
        ++cursor;
      }
      if (finished || stopping) {
        sink.done();
      }
      return true;
    });
  }

  void send_file(httplib::Response& res, const fs::path& p, const char* type) {
    std::ifstream in(p, std::ios::binary);
    if (!in) return reply_error(res, 404, "not found");
    std::ostringstream s;
    s << in.rdbuf();
    res.set_content(s.str(), type);
  }

  void routes() {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type, Last-Event-ID");
      res.status = 204;
    });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string msg = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        msg = e.what();
      } catch (...) {
      }
      reply_error(res, 500, msg);
    });

    server.Post("/samples", [this](const httplib::Request& req, httplib::Response& res) { post_sample(req, res); });
    server.Get("/samples", [this](const httplib::Request&, httplib::Response& res) {
      json arr = json::array();
      std::lock_guard<std::mutex> lk(state_m);
      for (const auto& [id, s] : samples) arr.push_back(sample_json(s));
      reply(res, 200, {{"samples", arr}});
    });
    server.Get(R"(/samples/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard<std::mutex> lk(state_m);
      auto it = samples.find(req.matches[1]);
      if (it == samples.end()) return reply_error(res, 404, "unknown sample " + std::string(req.matches[1]));
      reply(res, 200, sample_json(it->second));
    });
    server.Get(R"(/samples/([^/]+)/(image|mask)\.png)", [this](const httplib::Request& req, httplib::Response& res) {
      {
        std::lock_guard<std::mutex> lk(state_m);
        if (!samples.count(req.matches[1])) return reply_error(res, 404, "unknown sample");
      }
      send_file(res, samples_dir() / std::string(req.matches[1]) / (std::string(req.matches[2]) + ".png"), "image/png");
    });
    server.Post("/drag", [this](const httplib::Request& req, httplib::Response& res) { post_drag(req, res); });
    server.Post("/lora", [this](const httplib::Request& req, httplib::Response& res) { post_lora(req, res); });
    server.Get(R"(/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      auto job = find_job(req.matches[1]);
      if (!job) return reply_error(res, 404, "unknown job");
      reply(res, 200, job->status());
    });
    server.Get(R"(/drag/([^/]+)/events)",
               [this](const httplib::Request& req, httplib::Response& res) { stream_events(req, res, JobKind::drag); });
    server.Get(R"(/lora/([^/]+)/events)",
               [this](const httplib::Request& req, httplib::Response& res) { stream_events(req, res, JobKind::lora); });
    server.Get(R"(/results/([^/]+)/(image\.png|trace\.jsonl|result\.json|overlay\.png))",
               [this](const httplib::Request& req, httplib::Response& res) {
                 auto job = find_job(req.matches[1]);
                 if (!job || job->kind != JobKind::drag) return reply_error(res, 404, "unknown job");
                 if (job->status()["state"] != "done") return reply_error(res, 404, "result not ready");
                 const std::string name = req.matches[2];
                 const fs::path dir = results_dir() / job->id;
                 if (name == "image.png") return send_file(res, dir / "edited.png", "image/png");
                 if (name == "overlay.png") return send_file(res, dir / "overlay.png", "image/png");
                 if (name == "trace.jsonl") return send_file(res, dir / "trace.jsonl", "application/x-ndjson");
                 send_file(res, dir / "result.json", "application/json");
               });
  }
};

DragService::DragService(CheckpointPtr ck, ServiceOptions opts)
    : impl_(std::make_unique<Impl>(std::move(ck), std::move(opts))) {}

DragService::~DragService() { impl_->shutdown(); }

int DragService::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  if (!impl_->server.bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void DragService::run() { impl_->server.listen_after_bind(); }

void DragService::stop() { impl_->shutdown(); }

}  // namespace draglab
