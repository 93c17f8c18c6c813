#include <doctest.h>

#include <fstream>

#include "draglab/ddim.hpp"
#include "draglab/errors.hpp"
#include "draglab/lora.hpp"
#include "support.hpp"

using namespace draglab;
using testing::random_checkpoint;
using testing::random_image;

namespace {

LoraConfig quick(int steps, std::uint64_t seed = 0) {
  LoraConfig c;
  c.steps = steps;
  c.seed = seed;
  return c;
}

Tensor eps_with(const Checkpoint& ck, const Tensor& x, const AdapterMap* adapters) {
  return predict_noise(ModelContext::of(ck, adapters, 1), x, 35);
}

}  // namespace

TEST_SUITE("lora") {
  TEST_CASE("fresh adapters have zero up-projections and change nothing") {
    const auto ck = random_checkpoint(31);
    const AdapterMap a = init_adapters(ck->model, quick(0));
    CHECK(a.size() == ck->model.attention_projections().size());
    for (const auto& [name, p] : a) {
      CAPTURE(name);
      CHECK(p.down->value.dim(0) == 16);
      for (float v : p.up->value.vec()) CHECK(v == 0.0f);
    }
    const Tensor x = random_image(32);
    CHECK(eps_with(*ck, x, &a).vec() == eps_with(*ck, x, nullptr).vec());

    const LoraWeights w = finetune_lora(x, 1, *ck, quick(0));
    CHECK(eps_with(*ck, x, w.map()).vec() == eps_with(*ck, x, nullptr).vec());
  }

  TEST_CASE("fine-tuning leaves the base weights untouched and lowers the probe loss") {
    const auto ck = random_checkpoint(33);
    const std::string before = parameter_checksum(ck->model);
    const Tensor x = random_image(34);
    const LoraWeights w = finetune_lora(x, 0, *ck, quick(80));
    CHECK(parameter_checksum(ck->model) == before);
    CHECK(w.final_loss < w.initial_loss);
    CHECK(w.initial_loss == doctest::Approx(lora_probe_loss(x, 0, *ck, nullptr, 0)).epsilon(1e-12));
    CHECK(w.final_loss == doctest::Approx(lora_probe_loss(x, 0, *ck, w.map(), 0)).epsilon(1e-12));
    bool moved = false;
    for (const auto& [name, p] : w.adapters)
      for (float v : p.up->value.vec()) moved = moved || v != 0.0f;
    CHECK(moved);
  }

  TEST_CASE("fine-tuning is deterministic in image, seed and config") {
    const auto ck = random_checkpoint(35);
    const Tensor x = random_image(36);
    const LoraWeights a = finetune_lora(x, 2, *ck, quick(10, 4));
    const LoraWeights b = finetune_lora(x, 2, *ck, quick(10, 4));
    CHECK(a.identical_to(b));
    const LoraWeights c = finetune_lora(x, 2, *ck, quick(10, 5));
    CHECK_FALSE(a.identical_to(c));
  }

  TEST_CASE("a target selector restricts which projections adapt") {
    const auto ck = random_checkpoint(37);
    LoraConfig c = quick(2);
    c.target_layers = {"dec1.attn.q"};
    const LoraWeights w = finetune_lora(random_image(38), 0, *ck, c);
    REQUIRE(w.adapters.size() == 1);
    CHECK(w.adapters.begin()->first == "dec1.attn.q");
  }

  TEST_CASE("config validation") {
    CHECK_NOTHROW(quick(80).validate());
    CHECK_THROWS_AS(quick(121).validate(), ValidationError);
    CHECK_THROWS_AS(quick(-1).validate(), ValidationError);
    LoraConfig c;
    c.rank = 0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = {};
    c.learning_rate = 0.0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    CHECK(LoraConfig{}.rank == 16);
    CHECK(LoraConfig{}.learning_rate == 5e-4);
    CHECK(LoraConfig{}.steps == 80);
  }

  TEST_CASE("cache round trip and misses") {
    testing::TempDir dir("lora-cache");
    const auto ck = random_checkpoint(39);
    const Tensor x = random_image(40);
    LoraWeights w = finetune_lora(x, 0, *ck, quick(3));
    w.sample_id = "s0";
    w.config_hash = lora_config_hash(x, quick(3), ck->hash);
    cache_store(w, ck->hash, dir.path());

    const auto hit = cache_lookup("s0", w.config_hash, dir.path());
    REQUIRE(hit.has_value());
    CHECK(hit->identical_to(w));
    CHECK(hit->config == w.config);

    const std::string other = lora_config_hash(x, quick(4), ck->hash);
    CHECK(other != w.config_hash);
    CHECK_FALSE(cache_lookup("s0", other, dir.path()).has_value());
    CHECK_FALSE(cache_lookup("s1", w.config_hash, dir.path()).has_value());
    CHECK(lora_config_hash(x, quick(3), "another-model") != w.config_hash);

    nlohmann::json meta;
    for (const auto& e : std::filesystem::directory_iterator(dir.path()))
      if (e.path().extension() == ".json") meta = nlohmann::json::parse(std::ifstream(e.path()));
    CHECK(meta["sample_id"] == "s0");
    CHECK(meta["rank"] == 16);
    CHECK(meta["lr"] == 5e-4);
    CHECK(meta["steps"] == 3);
    CHECK(meta["checkpoint_hash"] == ck->hash);

    CHECK_THROWS_AS(cache_lookup("s0", w.config_hash, dir / "absent"), IoError);
  }

  TEST_CASE("a corrupt artifact raises a cache error naming the file") {
    testing::TempDir dir("lora-corrupt");
    const auto ck = random_checkpoint(41);
    const Tensor x = random_image(42);
    bool cached = true;
    obtain_lora("s0", x, 0, *ck, quick(1), dir.path(), &cached);
    CHECK_FALSE(cached);
    std::filesystem::path artifact;
    for (const auto& e : std::filesystem::directory_iterator(dir.path()))
      if (e.path().extension() == ".lora") artifact = e.path();
    REQUIRE_FALSE(artifact.empty());
    {
      std::fstream f(artifact, std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(40);
      f.put('\x7f');
    }
    try {
      obtain_lora("s0", x, 0, *ck, quick(1), dir.path());
      FAIL("expected CacheError");
    } catch (const CacheError& e) {
      CHECK(e.file() == artifact.string());
    }
  }

  TEST_CASE("a batch with one cached sample retrains exactly once") {
    testing::TempDir dir("lora-batch");
    const auto ck = random_checkpoint(43);
    const Tensor a = random_image(44), b = random_image(45);
    obtain_lora("a", a, 0, *ck, quick(2), dir.path());
    const long before = lora_training_count();
    bool hit_a = false, hit_b = true;
    const LoraWeights wa = obtain_lora("a", a, 0, *ck, quick(2), dir.path(), &hit_a);
    obtain_lora("b", b, 0, *ck, quick(2), dir.path(), &hit_b);
    CHECK(lora_training_count() - before == 1);
    CHECK(hit_a);
    CHECK_FALSE(hit_b);
    CHECK(wa.identical_to(finetune_lora(a, 0, *ck, quick(2))));
  }
}
