#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "draglab/bench.hpp"
#include "draglab/corpus.hpp"
#include "draglab/errors.hpp"
#include "draglab/image_io.hpp"
#include "draglab/metrics.hpp"
#include "draglab/synthesis.hpp"
#include "draglab/training.hpp"
#include "support.hpp"

using namespace draglab;
using testing::random_checkpoint;
using testing::random_image;
using testing::TempDir;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Every file below `dir`, relative path -> bytes.
std::map<std::string, std::string> tree(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[std::filesystem::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}


EditConfig fast_edit() {
  EditConfig c;
  c.lora_steps = 0;
  c.optimizer.max_iters = 3;
  return c;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("mean distance on a 3-4-5 triangle and aggregate means") {
    const std::vector<Point> pos{{0.0, 0.0}}, tgt{{3.0, 4.0}};
    CHECK(mean_distance(pos, tgt) == 5.0);
    const std::vector<double> d{5.0, 3.0};
    CHECK(aggregate_mean(d) == 4.0);
    const std::vector<double> e{0.1, 0.2, 0.7, 1e-3};
    CHECK(aggregate_mean(e) == doctest::Approx((0.1 + 0.2 + 0.7 + 1e-3) / 4.0).epsilon(1e-15));
    CHECK_THROWS_AS(mean_distance(pos, std::vector<Point>{}), ShapeError);
  }

  TEST_CASE("fidelity is one on identical images and symmetric") {
    const auto ck = random_checkpoint(51);
    const Tensor a = random_image(52), b = random_image(53);
    CHECK(image_fidelity(a, a, *ck) == 1.0);
    const double ab = image_fidelity(a, b, *ck), ba = image_fidelity(b, a, *ck);
    CHECK(std::fabs(ab - ba) <= 1e-9);
    CHECK(ab >= 0.0);
    CHECK(ab < 1.0);
    CHECK_THROWS_AS(image_fidelity(a, random_image(54, 8), *ck), ShapeError);
  }

  TEST_CASE("fidelity squashing and calibration") {
    CHECK(fidelity_from_distance(0.0, 0.3) == 1.0);
    CHECK(fidelity_from_distance(0.3, 0.3) == doctest::Approx(0.5));
    CHECK(fidelity_from_distance(1e12, 0.3) >= 0.0);
    const double c = calibration_from_median({0.4, 0.1, 0.2});
    CHECK(c == doctest::Approx(1.8));
    CHECK(fidelity_from_distance(0.2, c) == doctest::Approx(0.9));
    CHECK(calibration_from_median({0.1, 0.3}) == doctest::Approx(1.8));
  }

  TEST_CASE("unmoved handles on an unedited image have zero distance") {
    const auto ck = random_checkpoint(55);
    TempDir dir("md-zero");
    generate_corpus(3, 5, dir.path(), 16);
    for (const BenchSample& s : load_corpus(dir.path())) {
      DragInstruction ins = s.instruction;
      ins.targets = ins.handles;
      CHECK(mean_distance(s.image, s.image, ins, *ck) == 0.0);
    }
  }
}

TEST_SUITE("corpus") {
  TEST_CASE("generation is byte-identical for the same seed") {
    TempDir a("corpus-a"), b("corpus-b"), c("corpus-c");
    generate_corpus(20, 0, a.path());
    generate_corpus(20, 0, b.path());
    generate_corpus(20, 1, c.path());
    CHECK(tree(a.path()) == tree(b.path()));
    CHECK(tree(a.path()) != tree(c.path()));
    CHECK(corpus_hash(a.path()) == corpus_hash(b.path()));
    CHECK(load_corpus(a.path()).size() == 20);
  }

  TEST_CASE("mask is the union bounding box dilated by four pixels") {
    for (std::uint64_t i = 0; i < 30; ++i) {
      const ShapeParams p = random_shape(3, i, 64);
      const Tensor m = mask_from_params(p, 64);
      // Independent box: sample the exact shape regions on a fine grid.
      double x0 = 1e9, y0 = 1e9, x1 = -1e9, y1 = -1e9;
      const Tensor src = render_shape(p, p.geometry, 64), dst = render_shape(p, p.dragged_geometry, 64);
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
          bool covered = false;
          for (int ch = 0; ch < 3; ++ch) {
            const float bg = p.background[static_cast<std::size_t>(ch)];
            covered = covered || src.at(ch, y, x) != bg || dst.at(ch, y, x) != bg;
          }
          if (!covered) continue;
          x0 = std::min<double>(x0, x), y0 = std::min<double>(y0, y);
          x1 = std::max<double>(x1, x), y1 = std::max<double>(y1, y);
        }
      CAPTURE(i);
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
          const bool must = x >= x0 - 4 && x <= x1 + 4 && y >= y0 - 4 && y <= y1 + 4;
          // Box corners round outwards, so the mask may exceed the pixel box by one.
          const bool may = x >= x0 - 5 && x <= x1 + 5 && y >= y0 - 5 && y <= y1 + 5;
          const float v = m[static_cast<std::size_t>(y * 64 + x)];
          if (must) CHECK(v == 1.0f);
          if (!may) CHECK(v == 0.0f);
        }
    }
  }

  TEST_CASE("the dragged rendering differs only inside the mask") {
    TempDir dir("corpus-gt");
    generate_corpus(12, 2, dir.path());
    for (const BenchSample& s : load_corpus(dir.path())) {
      REQUIRE(s.gt_dragged.has_value());
      REQUIRE(s.shape.has_value());
      const Tensor again = quantize_rgb(render_shape(*s.shape, s.shape->dragged_geometry, 64));
      CHECK(again.vec() == s.gt_dragged->vec());
      const std::size_t hw = 64 * 64;
      bool differs = false;
      for (std::size_t i = 0; i < s.image.size(); ++i) {
        if (s.image[i] == (*s.gt_dragged)[i]) continue;
        differs = true;
        CHECK(s.instruction.mask[i % hw] == 1.0f);
      }
      CHECK(differs);
      CHECK_NOTHROW(s.instruction.validate(64, 64));
      CHECK(s.instruction.handles != s.instruction.targets);
    }
  }

  TEST_CASE("sample round trip and errors") {
    TempDir dir("corpus-io");
    generate_corpus(2, 4, dir.path(), 32);
    const auto samples = load_corpus(dir.path());
    save_sample(samples[1], dir / "copy");
    const BenchSample back = load_sample(dir / "copy");
    CHECK(back.id == samples[1].id);
    CHECK(back.image.vec() == samples[1].image.vec());
    CHECK(back.instruction.mask.vec() == samples[1].instruction.mask.vec());
    CHECK(back.instruction.handles == samples[1].instruction.handles);
    CHECK_THROWS_AS(generate_corpus(0, 0, dir / "none"), CorpusError);
    CHECK_THROWS_AS(generate_corpus(1, 0, dir / "tiny", 8), CorpusError);
    TempDir empty("corpus-empty");
    CHECK_THROWS_AS(load_corpus(empty.path()), CorpusError);
    CHECK_THROWS_AS(generate_corpus(1, 0, "/proc/draglab-no-such-dir"), IoError);
  }
}

TEST_SUITE("synthesis") {
  TEST_CASE("disabled guidance is plain denoising") {
    const auto ck = random_checkpoint(61);
    const ModelContext ctx = ModelContext::of(*ck, nullptr, 0);
    const auto traj = ddim_invert(random_image(62), ctx, 30);
    LatentState opt = traj.back();
    opt.data = random_image(63, 16, 0.5f);
    opt.origin = LatentOrigin::optimized;
    GuidanceConfig g;
    g.enabled = false;
    CHECK(synthesize_edited(opt, traj, ctx, g).vec() == ddim_denoise(opt, ctx).vec());
  }

  TEST_CASE("identical branches reproduce the reconstruction") {
    const auto ck = random_checkpoint(64);
    const ModelContext ctx = ModelContext::of(*ck, nullptr, 1);
    const auto traj = ddim_invert(random_image(65), ctx, 35);
    Tensor recon;
    const Tensor out = synthesize_edited(traj.back(), traj, ctx, GuidanceConfig{}, &recon);
    CHECK(max_abs_diff(out, recon) <= 1e-4);
    CHECK(max_abs_diff(recon, ddim_denoise(traj.back(), ctx)) == 0.0);
  }

  TEST_CASE("guidance never changes the reconstruction branch") {
    const auto ck = random_checkpoint(66);
    const ModelContext ctx = ModelContext::of(*ck, nullptr, 2);
    const auto traj = ddim_invert(random_image(67), ctx, 35);
    LatentState opt = traj.back();
    opt.data = random_image(68, 16, 0.5f);
    Tensor r_on, r_off;
    GuidanceConfig off;
    off.enabled = false;
    const Tensor e_on = synthesize_edited(opt, traj, ctx, GuidanceConfig{}, &r_on);
    const Tensor e_off = synthesize_edited(opt, traj, ctx, off, &r_off);
    CHECK(r_on.vec() == r_off.vec());
    CHECK(e_on.vec() != e_off.vec());
  }

  TEST_CASE("multi-step latents continue from each optimised step") {
    const auto ck = random_checkpoint(69);
    const ModelContext ctx = ModelContext::of(*ck, nullptr, 0);
    const auto traj = ddim_invert(random_image(70), ctx, 40);
    LatentSet set;
    for (int t : {30, 35, 40}) set[t] = traj[static_cast<std::size_t>(t - 1)];
    GuidanceConfig off;
    off.enabled = false;
    // The last jump decides the output.
    CHECK(synthesize_edited(set, traj, ctx, off).vec() == ddim_denoise(traj[29], ctx).vec());
    // A changed lower latent is what the output follows.
    LatentSet moved = set;
    moved[30].data = random_image(71, 16, 0.3f);
    LatentState from30 = moved[30];
    CHECK(synthesize_edited(moved, traj, ctx, off).vec() == ddim_denoise(from30, ctx).vec());
  }

  TEST_CASE("trajectory mismatches are rejected") {
    const auto ck = random_checkpoint(72);
    const ModelContext ctx = ModelContext::of(*ck);
    const auto traj = ddim_invert(random_image(73), ctx, 20);
    LatentState opt = traj.back();
    opt.step_index = 35;
    CHECK_THROWS_AS(synthesize_edited(opt, traj, ctx, GuidanceConfig{}), GuidanceError);
    auto broken = traj;
    broken[4].step_index = 9;
    CHECK_THROWS_AS(synthesize_edited(traj.back(), broken, ctx, GuidanceConfig{}), GuidanceError);
    GuidanceConfig g;
    g.start_step = 60;
    CHECK_THROWS_AS(g.validate(50), GuidanceError);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("save and load reproduce parameters bit for bit") {
    TempDir dir("ckpt");
    const auto ck = random_checkpoint(81);
    save_checkpoint((dir / "m.ckpt").string(), ck->model, ck->schedule, {{"if_calibration", 0.25}, {"note", "x"}});
    const CheckpointPtr back = load_checkpoint((dir / "m.ckpt").string());
    CHECK(parameter_checksum(back->model) == parameter_checksum(ck->model));
    CHECK(back->model.config() == ck->model.config());
    CHECK(back->if_calibration == 0.25);
    CHECK(back->manifest["note"] == "x");
    CHECK(back->schedule.alpha_bars == ck->schedule.alpha_bars);
    CHECK(load_checkpoint((dir / "m.ckpt").string())->hash == back->hash);
  }

  TEST_CASE("unreadable or truncated files are rejected") {
    TempDir dir("ckpt-bad");
    CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), IoError);
    const auto ck = random_checkpoint(82);
    save_checkpoint((dir / "m.ckpt").string(), ck->model, ck->schedule, {});
    const std::string bytes = slurp(dir / "m.ckpt");
    std::ofstream(dir / "cut.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(load_checkpoint((dir / "cut.ckpt").string()), IoError);
  }

  TEST_CASE("checkpoint path resolution") {
    CHECK(resolve_checkpoint_path("/x/y.ckpt") == "/x/y.ckpt");
    ::setenv("DRAGLAB_CHECKPOINT", "/from/env.ckpt", 1);
    CHECK(resolve_checkpoint_path() == "/from/env.ckpt");
    ::unsetenv("DRAGLAB_CHECKPOINT");
    CHECK(resolve_checkpoint_path() == reference_checkpoint_path());
  }
}

TEST_SUITE("training") {
  TEST_CASE("zero epochs leave the initialisation and reload bit for bit") {
    TempDir dir("train0");
    generate_corpus(kMinTrainingCorpus, 9, dir / "corpus", 16);
    DenoiserConfig cfg = testing::small_config(3);
    TrainOptions opts;
    opts.epochs = 0;
    train_toy_model(dir / "corpus", cfg, NoiseSchedule::linear(), opts, dir / "m.ckpt");
    const CheckpointPtr a = load_checkpoint((dir / "m.ckpt").string());
    CHECK(parameter_checksum(a->model) == parameter_checksum(Denoiser(cfg)));
    CHECK(parameter_checksum(load_checkpoint((dir / "m.ckpt").string())->model) == parameter_checksum(a->model));
    CHECK(a->manifest.contains("corpus_hash"));
    CHECK(a->manifest.contains("if_calibration"));
  }

  TEST_CASE("loss decreases and two runs agree") {
    TempDir dir("train");
    generate_corpus(24, 10, dir.path(), 16);
    std::vector<TrainExample> data;
    for (const BenchSample& s : load_corpus(dir.path())) data.push_back({s.image, s.label});
    TrainOptions opts;
    opts.epochs = 6;
    opts.batch_size = 4;
    opts.data_seed = 2;
    Denoiser a(testing::small_config(4)), b(testing::small_config(4));
    const TrainResult ra = train_denoiser(a, NoiseSchedule::linear(), data, opts);
    const TrainResult rb = train_denoiser(b, NoiseSchedule::linear(), data, opts);
    REQUIRE(ra.epoch_losses.size() == 6);
    CHECK(ra.epoch_losses.back() < ra.epoch_losses.front());
    CHECK(ra.epoch_losses == rb.epoch_losses);
    CHECK(parameter_checksum(a) == parameter_checksum(b));
  }

  TEST_CASE("corpus errors and divergence") {
    TempDir dir("train-bad");
    Denoiser m(testing::small_config());
    CHECK_THROWS_AS(train_denoiser(m, NoiseSchedule::linear(), {}, TrainOptions{}), CorpusError);
    generate_corpus(5, 0, dir / "small", 16);
    CHECK_THROWS_AS(train_toy_model(dir / "small", testing::small_config(), NoiseSchedule::linear(), {}, dir / "m"),
                    CorpusError);
    std::filesystem::create_directories(dir / "empty");
    CHECK_THROWS_AS(train_toy_model(dir / "empty", testing::small_config(), NoiseSchedule::linear(), {}, dir / "m"),
                    CorpusError);

    TrainOptions hot;
    hot.epochs = 3;
    hot.learning_rate = 1e30;
    Tensor img({3, 8, 8}, 0.5f);
    try {
      train_denoiser(m, NoiseSchedule::linear(), {{img, 0}, {img, 1}}, hot);
      FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
      CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
  }
}

TEST_SUITE("bench") {
  TEST_CASE("cells differ only in their axis field") {
    for (Axis axis : {Axis::timestep, Axis::lora_steps, Axis::lambda, Axis::block, Axis::multi_timestep,
                      Axis::lora_on_off}) {
      CAPTURE(to_string(axis));
      const auto cells = make_cells(axis, default_axis_values(axis));
      REQUIRE(cells.size() >= 2);
      const nlohmann::json base = to_json(cells.front().config);
      for (const Cell& c : cells) {
        const nlohmann::json j = to_json(c.config);
        std::set<std::string> changed;
        for (auto it = j.begin(); it != j.end(); ++it) {
          if (it->is_object()) {
            for (auto jt = it->begin(); jt != it->end(); ++jt)
              if (base[it.key()][jt.key()] != *jt) changed.insert(jt.key());
          } else if (base[it.key()] != *it) {
            changed.insert(it.key());
          }
        }
        CHECK(changed.size() <= 1);
      }
      const nlohmann::json second = to_json(cells[1].config);
      CHECK(second != base);
    }
    CHECK(make_cells(Axis::timestep, {"20", "35", "50"})[2].config.optimizer.timesteps == std::vector<int>{50});
    CHECK(make_cells(Axis::multi_timestep, {"30+35+40"})[0].config.optimizer.timesteps ==
          std::vector<int>{30, 35, 40});
    CHECK(make_cells(Axis::lora_on_off, {"off", "on"})[1].config.lora_steps == 80);
    CHECK(make_cells(Axis::lambda, {"0.5"})[0].config.optimizer.lambda_reg == 0.5);
    CHECK(make_cells(Axis::block, {"4"})[0].config.optimizer.block_index == 4);
    CHECK_THROWS_AS(parse_axis("colour"), ValidationError);
    CHECK_THROWS_AS(make_cells(Axis::block, {"deep"}), ValidationError);
  }

  TEST_CASE("a one-element step set is the single-step edit") {
    TempDir dir("bench-singleton");
    generate_corpus(1, 4, dir / "corpus", 16);
    const auto corpus = load_corpus(dir / "corpus");
    const auto ck = random_checkpoint(94);
    const EditConfig single = make_cells(Axis::timestep, {"35"}, fast_edit())[0].config;
    const EditConfig set = make_cells(Axis::multi_timestep, {"35"}, fast_edit())[0].config;
    CHECK(single == set);
    const EditResult a = run_edit(corpus[0], single, *ck, dir / "lora");
    const EditResult b = run_edit(corpus[0], set, *ck, dir / "lora");
    CHECK(a.edited.vec() == b.edited.vec());
    CHECK(trace_to_jsonl(a.trace) == trace_to_jsonl(b.trace));
    CHECK(a.md == b.md);
    CHECK(a.if_score == b.if_score);
  }

  TEST_CASE("an ablation writes the table and report and repeats exactly") {
    TempDir dir("bench");
    generate_corpus(2, 0, dir / "corpus", 16);
    const auto corpus = load_corpus(dir / "corpus");
    const auto ck = random_checkpoint(91);
    const auto cells = make_cells(Axis::lambda, {"0.0", "1.0"}, fast_edit());
    BenchOptions opts;
    opts.lora_cache = dir / "lora";
    const auto r1 = run_ablation(Axis::lambda, cells, corpus, *ck, dir / "out1", opts);
    const auto r2 = run_ablation(Axis::lambda, cells, corpus, *ck, dir / "out2", opts);

    const std::string csv = slurp(dir / "out1" / "table_lambda.csv");
    CHECK(csv.substr(0, csv.find('\n')) == "cell,md,if,runtime_s");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    REQUIRE(r1.size() == 2);
    for (std::size_t i = 0; i < r1.size(); ++i) {
      CHECK(r1[i].complete);
      REQUIRE(r1[i].samples.size() == 2);
      CHECK(r1[i].md == r2[i].md);
      CHECK(r1[i].if_score == r2[i].if_score);
      std::vector<double> md, fid;
      for (const auto& s : r1[i].samples) {
        CHECK(s.ok);
        CHECK(s.if_score >= 0.0);
        CHECK(s.if_score <= 1.0);
        CHECK(s.md == r2[i].samples[&s - r1[i].samples.data()].md);
        md.push_back(s.md);
        fid.push_back(s.if_score);
      }
      CHECK(std::fabs(r1[i].md - aggregate_mean(md)) <= 1e-9);
      CHECK(std::fabs(r1[i].if_score - aggregate_mean(fid)) <= 1e-9);
    }
    const auto report = nlohmann::json::parse(slurp(dir / "out1" / "report.json"));
    CHECK(report["axis"] == "lambda");
    CHECK(report["checkpoint_hash"] == ck->hash);
    CHECK(report["cells"].size() == 2);
    for (const char* f : {"_source.png", "_edited.png", "_overlay.png"})
      CHECK(std::filesystem::exists(dir / "out1" / "images" / cells[0].name / (corpus[0].id + f)));
  }

  TEST_CASE("a failing sample is recorded and the cell flagged") {
    TempDir dir("bench-fail");
    generate_corpus(2, 1, dir / "corpus", 16);
    auto corpus = load_corpus(dir / "corpus");
    corpus[1].image = Tensor({3, 8, 8});
    const auto ck = random_checkpoint(92);
    BenchOptions opts;
    opts.lora_cache = dir / "lora";
    opts.write_images = false;
    const auto r = run_ablation(Axis::block, make_cells(Axis::block, {"3"}, fast_edit()), corpus, *ck, dir / "out", opts);
    REQUIRE(r[0].samples.size() == 2);
    CHECK(r[0].samples[0].ok);
    CHECK_FALSE(r[0].samples[1].ok);
    CHECK_FALSE(r[0].samples[1].error.empty());
    CHECK_FALSE(r[0].complete);
    CHECK(r[0].md == r[0].samples[0].md);
  }

  TEST_CASE("the run cache returns the stored outcome") {
    TempDir dir("bench-cache");
    generate_corpus(1, 3, dir / "corpus", 16);
    const auto corpus = load_corpus(dir / "corpus");
    const auto ck = random_checkpoint(93);
    BenchOptions opts;
    opts.lora_cache = dir / "lora";
    opts.run_cache = dir / "runs";
    opts.write_images = false;
    const auto cells = make_cells(Axis::timestep, {"35"}, fast_edit());
    const auto a = run_ablation(Axis::timestep, cells, corpus, *ck, dir / "a", opts);
    const auto b = run_ablation(Axis::timestep, cells, corpus, *ck, dir / "b", opts);
    CHECK(a[0].samples[0].md == b[0].samples[0].md);
    CHECK(a[0].samples[0].if_score == b[0].samples[0].if_score);
    CHECK(a[0].samples[0].runtime_s == b[0].samples[0].runtime_s);
    CHECK_FALSE(std::filesystem::is_empty(dir / "runs"));
  }
}
