#include "draglab/checkpoint.hpp"

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "draglab/errors.hpp"
#include "draglab/hashing.hpp"

namespace draglab {
namespace {

constexpr char kMagic[8] = {'D', 'R', 'A', 'G', 'L', 'A', 'B', '1'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("truncated checkpoint " + path);
  return v;
}

std::string compute_hash(const Denoiser& model, const nlohmann::json& manifest) {
  Sha256 h;
  nlohmann::json m = manifest;
  m.erase("checkpoint_hash");
  h.update(m.dump());
  for (const auto& [name, p] : model.params()) {
    h.update(name);
    h.update_floats(p->value.span());
  }
  return h.hex();
}

}  // namespace

nlohmann::json to_json(const DenoiserConfig& c) {
  return {{"base_channels", c.base_channels},
          {"decoder_blocks", c.decoder_blocks},
          {"conditioning", c.conditioning == Conditioning::class_label ? "class_label" : "none"},
          {"num_classes", c.num_classes},
          {"image_channels", c.image_channels},
          {"parameter_seed", c.parameter_seed}};
}

DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.base_channels = j.at("base_channels").get<int>();
  c.decoder_blocks = j.at("decoder_blocks").get<int>();
  c.conditioning = j.at("conditioning").get<std::string>() == "class_label" ? Conditioning::class_label
                                                                             : Conditioning::none;
  c.num_classes = j.at("num_classes").get<int>();
  c.image_channels = j.at("image_channels").get<int>();
  c.parameter_seed = j.at("parameter_seed").get<std::uint64_t>();
  c.validate();
  return c;
}

nlohmann::json to_json(const NoiseSchedule& s) {
  return {{"kind", "linear"},
          {"num_train_steps", s.num_train_steps},
          {"beta_start", s.beta_start},
          {"beta_end", s.beta_end},
          {"ddim_steps", s.ddim_steps}};
}

std::string parameter_checksum(const Denoiser& model) {
  Sha256 h;
  for (const auto& [name, p] : model.params()) h.update_floats(p->value.span());
  return h.hex();
}

void save_checkpoint(const std::string& path, const Denoiser& model, const NoiseSchedule& schedule,
                     nlohmann::json manifest) {
  manifest["model"] = to_json(model.config());
  manifest["schedule"] = to_json(schedule);
  manifest["parameter_checksum"] = parameter_checksum(model);
  manifest["checkpoint_hash"] = compute_hash(model, manifest);
  const std::string text = manifest.dump(2);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint " + tmp);
    os.write(kMagic, sizeof(kMagic));
    put<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    put<std::uint64_t>(os, model.params().size());
    for (const auto& [name, p] : model.params()) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(p->value.rank()));
      for (int d : p->value.shape()) put<std::int32_t>(os, d);
      os.write(reinterpret_cast<const char*>(p->value.data()),
               static_cast<std::streamsize>(p->value.size() * sizeof(float)));
    }
    if (!os) throw IoError("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

CheckpointPtr load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(magic, magic + 8, kMagic)) throw IoError("not a draglab checkpoint: " + path);
  const auto mlen = get<std::uint64_t>(is, path);
  std::string text(mlen, '\0');
  is.read(text.data(), static_cast<std::streamsize>(mlen));
  nlohmann::json manifest = nlohmann::json::parse(text);

  DenoiserConfig config = denoiser_config_from_json(manifest.at("model"));
  const auto& sj = manifest.at("schedule");
  NoiseSchedule schedule = NoiseSchedule::linear(sj.at("num_train_steps"), sj.at("beta_start"),
                                                 sj.at("beta_end"), sj.at("ddim_steps"));
  Denoiser model(config);
  const auto count = get<std::uint64_t>(is, path);
  if (count != model.params().size()) throw IoError("parameter count mismatch in " + path);
  for (const auto& [name, p] : model.params()) {
    const auto nlen = get<std::uint32_t>(is, path);
    std::string stored(nlen, '\0');
    is.read(stored.data(), nlen);
    if (stored != name) throw IoError("unexpected tensor '" + stored + "' in " + path);
    const auto rank = get<std::uint32_t>(is, path);
    std::vector<int> shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(get<std::int32_t>(is, path));
    if (shape != p->value.shape()) throw IoError("shape mismatch for '" + name + "' in " + path);
    is.read(reinterpret_cast<char*>(p->value.data()),
            static_cast<std::streamsize>(p->value.size() * sizeof(float)));
    if (!is) throw IoError("truncated checkpoint " + path);
  }
  auto ck = std::make_shared<Checkpoint>(std::move(model), std::move(schedule));
  ck->hash = compute_hash(ck->model, manifest);
  if (manifest.contains("checkpoint_hash") && manifest["checkpoint_hash"] != ck->hash) {
    throw IoError("checkpoint hash mismatch in " + path);
  }
  ck->if_calibration = manifest.value("if_calibration", 1.0);
  ck->manifest = std::move(manifest);
  return ck;
}

CheckpointPtr make_initial_checkpoint(const DenoiserConfig& config, const NoiseSchedule& schedule) {
  auto ck = std::make_shared<Checkpoint>(Denoiser(config), schedule);
  ck->manifest = {{"model", to_json(config)}, {"schedule", to_json(schedule)}, {"epochs", 0}};
  ck->hash = compute_hash(ck->model, ck->manifest);
  return ck;
}

std::string reference_checkpoint_path() { return DRAGLAB_REFERENCE_CHECKPOINT; }

std::string resolve_checkpoint_path(const std::string& explicit_path) {
  if (!explicit_path.empty()) return explicit_path;
  if (const char* env = std::getenv("DRAGLAB_CHECKPOINT"); env && *env) return env;
  return reference_checkpoint_path();
}

}  // namespace draglab
