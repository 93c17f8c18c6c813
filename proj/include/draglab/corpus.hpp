#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "draglab/instruction.hpp"
#include "draglab/tensor.hpp"

namespace draglab {

enum class ShapeKind { disk = 0, rectangle = 1, triangle = 2 };
inline constexpr int kNumShapeKinds = 3;
inline constexpr int kMinImageSize = 16;

/// Generator parameters for one sample. Coordinates are in pixel-centre
/// units: pixel (i, j) covers [i - 0.5, i + 0.5] x [j - 0.5, j + 0.5].
///   disk:      {cx, cy, r}
///   rectangle: {x0, y0, x1, y1}
///   triangle:  {ax, ay, bx, by, cx, cy}
struct ShapeParams {
  ShapeKind kind = ShapeKind::disk;
  std::array<float, 3> foreground{};
  std::array<float, 3> background{};
  std::vector<double> geometry;
  std::vector<double> dragged_geometry;
  Point handle;
  Point target;
};

struct BenchSample {
  std::string id;
  int label = 0;
  Tensor image;  // [3, H, W] in [-1, 1]
  DragInstruction instruction;
  std::optional<ShapeParams> shape;
  std::optional<Tensor> gt_dragged;
};

Tensor render_shape(const ShapeParams& p, const std::vector<double>& geometry, int size);
/// Union bounding box of the source and dragged shapes, dilated and clipped.
Tensor mask_from_params(const ShapeParams& p, int size, int dilation = 4);
ShapeParams random_shape(std::uint64_t seed, std::uint64_t index, int size);

/// Writes n samples plus corpus.json. Deterministic in (n, seed, size).
std::filesystem::path generate_corpus(int n, std::uint64_t seed, const std::filesystem::path& out_dir,
                                      int size = 64);

void save_sample(const BenchSample& s, const std::filesystem::path& dir);
BenchSample load_sample(const std::filesystem::path& dir);
/// Loads every sample listed in corpus.json (or every subdirectory with meta.json).
std::vector<BenchSample> load_corpus(const std::filesystem::path& dir);
std::string corpus_hash(const std::filesystem::path& dir);

nlohmann::json to_json(const ShapeParams& p);
ShapeParams shape_params_from_json(const nlohmann::json& j);

}  // namespace draglab
