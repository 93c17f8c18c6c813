#include "draglab/lora.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include "draglab/errors.hpp"
#include "draglab/hashing.hpp"
#include "draglab/optimizer.hpp"
#include "draglab/rng.hpp"

namespace draglab {
namespace {

namespace fs = std::filesystem;

constexpr char kMagic[8] = {'D', 'R', 'A', 'G', 'L', 'O', 'R', 'A'};
constexpr int kProbeCount = 8;
constexpr std::uint64_t kProbeStream = 0x10B0000000ULL;
constexpr std::uint64_t kTrainStream = 0x10A0000000ULL;
constexpr std::uint64_t kInitStream = 0x10C0000000ULL;

std::atomic<long> g_training_count{0};

bool selected(const LoraConfig& c, const std::string& name) {
  if (c.target_layers.empty()) return true;
  for (const std::string& t : c.target_layers) {
    if (t == name || name.rfind(t + ".", 0) == 0) return true;
  }
  return false;
}

Tensor noisy(const Tensor& image, const Tensor& noise, double ab) {
  Tensor xt(image.shape());
  const auto sa = static_cast<float>(std::sqrt(ab));
  const auto sb = static_cast<float>(std::sqrt(1.0 - ab));
  for (std::size_t j = 0; j < xt.size(); ++j) xt[j] = sa * image[j] + sb * noise[j];
  return xt;
}

std::string artifact_stem(const std::string& sample_id, const std::string& config_hash) {
  std::string safe;
  for (char ch : sample_id) safe += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_') ? ch : '_';
  return safe + "." + config_hash;
}

std::string tmp_suffix() {
  std::ostringstream s;
  s << ".tmp." << std::hash<std::thread::id>{}(std::this_thread::get_id());
  return s.str();
}

void write_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + tmp_suffix();
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

template <class T>
void put(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_tensor(std::string& out, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim(0)));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim(1)));
  out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
}

std::string serialise(const AdapterMap& adapters) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(adapters.size()));
  for (const auto& [name, a] : adapters) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_tensor(out, a.down->value);
    put_tensor(out, a.up->value);
  }
  return out;
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& file) : bytes_(bytes), file_(file) {}
  template <class T>
  T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Tensor tensor() {
    const auto rows = get<std::uint32_t>();
    const auto cols = get<std::uint32_t>();
    if (rows == 0 || cols == 0 || rows > 65536 || cols > 65536) throw CacheError(file_, "bad tensor dims");
    Tensor t({static_cast<int>(rows), static_cast<int>(cols)});
    need(t.size() * sizeof(float));
    std::memcpy(t.data(), bytes_.data() + pos_, t.size() * sizeof(float));
    pos_ += t.size() * sizeof(float);
    return t;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw CacheError(file_, "truncated");
  }
  const std::string& bytes_;
  std::string file_;
  std::size_t pos_ = 0;
};

AdapterMap deserialise(const std::string& bytes, const std::string& file) {
  Reader r(bytes, file);
  if (r.str(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) throw CacheError(file, "bad magic");
  const auto count = r.get<std::uint32_t>();
  AdapterMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    const std::string name = r.str(len);
    Tensor down = r.tensor();
    Tensor up = r.tensor();
    out[name] = {ag::constant(std::move(down)), ag::constant(std::move(up))};
  }
  if (!r.done()) throw CacheError(file, "trailing bytes");
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CacheError(p.string(), "unreadable");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

void LoraConfig::validate() const {
  if (rank < 1) throw ValidationError("rank: must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValidationError("learning_rate: must be > 0");
  if (steps < 0 || steps > kMaxLoraSteps) {
    throw ValidationError("steps: must be in [0, " + std::to_string(kMaxLoraSteps) + "]");
  }
}

nlohmann::json to_json(const LoraConfig& c) {
  return {{"rank", c.rank},
          {"lr", c.learning_rate},
          {"steps", c.steps},
          {"target_layers", c.target_layers},
          {"seed", c.seed}};
}

bool LoraWeights::identical_to(const LoraWeights& other) const {
  if (adapters.size() != other.adapters.size()) return false;
  for (const auto& [name, a] : adapters) {
    auto it = other.adapters.find(name);
    if (it == other.adapters.end()) return false;
    if (!(a.down->value == it->second.down->value) || !(a.up->value == it->second.up->value)) return false;
  }
  return true;
}

AdapterMap init_adapters(const Denoiser& model, const LoraConfig& config) {
  config.validate();
  AdapterMap out;
  std::uint64_t index = 0;
  for (const AttentionProjection& p : model.attention_projections()) {
    ++index;
    if (!selected(config, p.name)) continue;
    CounterRng rng(config.seed, kInitStream + index);
    Tensor down({config.rank, p.in_dim});
    const double bound = 1.0 / std::sqrt(static_cast<double>(p.in_dim));
    for (float& v : down.vec()) v = static_cast<float>(rng.uniform(-bound, bound));
    out[p.name] = {ag::constant(std::move(down)), ag::constant(Tensor({p.out_dim, config.rank}, 0.0f))};
  }
  if (out.empty()) throw AdapterError("target_layers select no attention projection");
  return out;
}

double lora_probe_loss(const Tensor& image, int label, const Checkpoint& ck, const AdapterMap* adapters,
                       std::uint64_t seed) {
  double total = 0.0;
  for (int i = 0; i < kProbeCount; ++i) {
    CounterRng rng(seed, kProbeStream + static_cast<std::uint64_t>(i));
    // Probes cover the DDIM grid evenly.
    const int step = 1 + (i * ck.schedule.ddim_steps) / kProbeCount;
    const int t = ck.schedule.train_t(step);
    const Tensor noise = rng.normal_tensor(image.shape());
    ForwardOptions fo;
    fo.train_t = t;
    fo.label = label;
    fo.adapters = adapters;
    ForwardResult res = ck.model.forward(ag::constant(noisy(image, noise, ck.schedule.alpha_bars[t])), fo);
    total += ag::mse(res.eps, noise)->value[0];
  }
  return total / kProbeCount;
}

LoraWeights finetune_lora(const Tensor& image, int label, const Checkpoint& ck, const LoraConfig& config,
                          const LoraStepCallback& on_step) {
  config.validate();
  ++g_training_count;
  LoraWeights w;
  w.config = config;
  w.adapters = init_adapters(ck.model, config);
  w.initial_loss = lora_probe_loss(image, label, ck, &w.adapters, config.seed);

  std::vector<ag::Var> params;
  for (auto& [name, a] : w.adapters) {
    a.down->requires_grad = true;
    a.up->requires_grad = true;
    params.push_back(a.down);
    params.push_back(a.up);
  }
  Adam adam(params, config.learning_rate);
  for (int s = 0; s < config.steps; ++s) {
    CounterRng rng(config.seed, kTrainStream + static_cast<std::uint64_t>(s));
    const int step = rng.uniform_int(1, ck.schedule.ddim_steps);
    const int t = ck.schedule.train_t(step);
    const Tensor noise = rng.normal_tensor(image.shape());
    ForwardOptions fo;
    fo.train_t = t;
    fo.label = label;
    fo.adapters = &w.adapters;
    ForwardResult res = ck.model.forward(ag::constant(noisy(image, noise, ck.schedule.alpha_bars[t])), fo);
    ag::Var loss = ag::mse(res.eps, noise);
    const double lv = loss->value[0];
    if (!std::isfinite(lv)) {
      throw DivergenceError("LoRA loss became non-finite at step " + std::to_string(s));
    }
    ag::backward(loss);
    adam.step();
    if (on_step) on_step(s, lv);
  }
  for (auto& [name, a] : w.adapters) {
    a.down->requires_grad = false;
    a.up->requires_grad = false;
    a.down->grad = Tensor();
    a.up->grad = Tensor();
  }
  w.final_loss = config.steps == 0 ? w.initial_loss : lora_probe_loss(image, label, ck, &w.adapters, config.seed);
  return w;
}

long lora_training_count() { return g_training_count.load(); }

std::string lora_config_hash(const Tensor& image, const LoraConfig& config, const std::string& checkpoint_hash) {
  Sha256 h;
  h.update_floats(image.span());
  h.update(to_json(config).dump());
  h.update(checkpoint_hash);
  return h.hex();
}

std::optional<LoraWeights> cache_lookup(const std::string& sample_id, const std::string& config_hash,
                                        const fs::path& cache_dir) {
  if (!fs::is_directory(cache_dir)) throw IoError("cache directory " + cache_dir.string() + " does not exist");
  const std::string stem = artifact_stem(sample_id, config_hash);
  const fs::path sidecar = cache_dir / (stem + ".json");
  const fs::path artifact = cache_dir / (stem + ".lora");
  if (!fs::exists(sidecar)) return std::nullopt;

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(sidecar));
  } catch (const nlohmann::json::exception& e) {
    throw CacheError(sidecar.string(), e.what());
  }
  if (meta.value("sample_id", std::string()) != sample_id || meta.value("config_hash", std::string()) != config_hash) {
    return std::nullopt;
  }
  if (!fs::exists(artifact)) throw CacheError(artifact.string(), "missing artifact for sidecar");
  const std::string bytes = read_file(artifact);
  if (sha256_hex(bytes) != meta.value("payload_sha256", std::string())) {
    throw CacheError(artifact.string(), "checksum mismatch");
  }
  LoraWeights w;
  w.adapters = deserialise(bytes, artifact.string());
  w.sample_id = sample_id;
  w.config_hash = config_hash;
  try {
    w.config.rank = meta.at("rank").get<int>();
    w.config.learning_rate = meta.at("lr").get<double>();
    w.config.steps = meta.at("steps").get<int>();
    w.config.seed = meta.value("seed", std::uint64_t{0});
    w.config.target_layers = meta.value("target_layers", std::vector<std::string>{});
    w.initial_loss = meta.value("initial_loss", 0.0);
    w.final_loss = meta.value("final_loss", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw CacheError(sidecar.string(), e.what());
  }
  return w;
}

void cache_store(const LoraWeights& w, const std::string& checkpoint_hash, const fs::path& cache_dir) {
  fs::create_directories(cache_dir);
  const std::string stem = artifact_stem(w.sample_id, w.config_hash);
  const std::string bytes = serialise(w.adapters);
  nlohmann::json meta = {{"sample_id", w.sample_id},
                         {"rank", w.config.rank},
                         {"lr", w.config.learning_rate},
                         {"steps", w.config.steps},
                         {"checkpoint_hash", checkpoint_hash},
                         {"config_hash", w.config_hash},
                         {"seed", w.config.seed},
                         {"target_layers", w.config.target_layers},
                         {"initial_loss", w.initial_loss},
                         {"final_loss", w.final_loss},
                         {"payload_sha256", sha256_hex(bytes)}};
  // The sidecar goes last: its presence marks a complete artifact.
  write_atomic(cache_dir / (stem + ".lora"), bytes);
  write_atomic(cache_dir / (stem + ".json"), meta.dump(2));
}

LoraWeights obtain_lora(const std::string& sample_id, const Tensor& image, int label, const Checkpoint& ck,
                        const LoraConfig& config, const fs::path& cache_dir, bool* cached,
                        const LoraStepCallback& on_step) {
  const std::string key = lora_config_hash(image, config, ck.hash);
  fs::create_directories(cache_dir);
  if (auto hit = cache_lookup(sample_id, key, cache_dir)) {
    if (cached) *cached = true;
    return std::move(*hit);
  }
  LoraWeights w = finetune_lora(image, label, ck, config, on_step);
  w.sample_id = sample_id;
  w.config_hash = key;
  cache_store(w, ck.hash, cache_dir);
  if (cached) *cached = false;
  return w;
}

}  // namespace draglab
