#include "draglab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "draglab/errors.hpp"
#include "draglab/hashing.hpp"
#include "draglab/image_io.hpp"
#include "draglab/rng.hpp"

namespace fs = std::filesystem;

namespace draglab {
namespace {

constexpr int kSuper = 4;

bool inside(const ShapeParams& p, const std::vector<double>& g, double x, double y) {
  switch (p.kind) {
    case ShapeKind::disk:
      return (x - g[0]) * (x - g[0]) + (y - g[1]) * (y - g[1]) <= g[2] * g[2];
    case ShapeKind::rectangle:
      return x >= std::min(g[0], g[2]) && x <= std::max(g[0], g[2]) && y >= std::min(g[1], g[3]) &&
             y <= std::max(g[1], g[3]);
    case ShapeKind::triangle: {
      auto edge = [&](int a, int b) {
        return (g[2 * b] - g[2 * a]) * (y - g[2 * a + 1]) - (g[2 * b + 1] - g[2 * a + 1]) * (x - g[2 * a]);
      };
      const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
  return false;
}

struct Box {
  double x0, y0, x1, y1;
};

Box bounds(ShapeKind kind, const std::vector<double>& g) {
  switch (kind) {
    case ShapeKind::disk:
      return {g[0] - g[2], g[1] - g[2], g[0] + g[2], g[1] + g[2]};
    case ShapeKind::rectangle:
      return {std::min(g[0], g[2]), std::min(g[1], g[3]), std::max(g[0], g[2]), std::max(g[1], g[3])};
    case ShapeKind::triangle:
      return {std::min({g[0], g[2], g[4]}), std::min({g[1], g[3], g[5]}), std::max({g[0], g[2], g[4]}),
              std::max({g[1], g[3], g[5]})};
  }
  return {};
}

double triangle_area(const std::vector<double>& g) {
  return 0.5 * std::abs((g[2] - g[0]) * (g[5] - g[1]) - (g[4] - g[0]) * (g[3] - g[1]));
}

double min_edge(const std::vector<double>& g) {
  double m = 1e9;
  for (int i = 0; i < 3; ++i) {
    const int j = (i + 1) % 3;
    m = std::min(m, std::hypot(g[2 * j] - g[2 * i], g[2 * j + 1] - g[2 * i + 1]));
  }
  return m;
}

bool within(const Box& b, int size, double margin) {
  return b.x0 >= margin && b.y0 >= margin && b.x1 <= size - 1 - margin && b.y1 <= size - 1 - margin;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("failed writing " + p.string());
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  return nlohmann::json::parse(in);
}

}  // namespace

Tensor render_shape(const ShapeParams& p, const std::vector<double>& geometry, int size) {
  Tensor img = Tensor::chw(3, size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = x + (sx + 0.5) / kSuper - 0.5;
          const double py = y + (sy + 0.5) / kSuper - 0.5;
          hits += inside(p, geometry, px, py) ? 1 : 0;
        }
      const float cov = static_cast<float>(hits) / (kSuper * kSuper);
      for (int c = 0; c < 3; ++c) {
        img.at(c, y, x) = p.background[static_cast<std::size_t>(c)] * (1.0f - cov) +
                          p.foreground[static_cast<std::size_t>(c)] * cov;
      }
    }
  return img;
}

Tensor mask_from_params(const ShapeParams& p, int size, int dilation) {
  const Box a = bounds(p.kind, p.geometry);
  const Box b = bounds(p.kind, p.dragged_geometry);
  const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x0, b.x0))) - dilation);
  const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y0, b.y0))) - dilation);
  const int x1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(a.x1, b.x1))) + dilation);
  const int y1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(a.y1, b.y1))) + dilation);
  Tensor m({size, size});
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) m[static_cast<std::size_t>(y) * size + x] = 1.0f;
  return m;
}

ShapeParams random_shape(std::uint64_t seed, std::uint64_t index, int size) {
  CounterRng rng(seed, index);
  ShapeParams p;
  p.kind = static_cast<ShapeKind>(index % kNumShapeKinds);
  for (auto& c : p.background) c = static_cast<float>(rng.uniform(-0.8, 0.8));
  for (;;) {
    double d2 = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      p.foreground[c] = static_cast<float>(rng.uniform(-0.9, 0.9));
      d2 += (p.foreground[c] - p.background[c]) * (p.foreground[c] - p.background[c]);
    }
    if (d2 >= 0.9 * 0.9) break;
  }
  const double s = size / 64.0;
  for (;;) {
    // Integer drag vector of length 5..10 (scaled with image size).
    const double len = rng.uniform(5.0, 10.0) * s;
    const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double dx = std::round(len * std::cos(ang));
    const double dy = std::round(len * std::sin(ang));
    if (std::hypot(dx, dy) < 4.0 * s) continue;
    std::vector<double> g, dg;
    Point handle;
    switch (p.kind) {
      case ShapeKind::disk: {
        const double r = rng.uniform_int(static_cast<int>(6 * s), static_cast<int>(11 * s));
        const double cx = rng.uniform_int(static_cast<int>(r + 4), static_cast<int>(size - 5 - r));
        const double cy = rng.uniform_int(static_cast<int>(r + 4), static_cast<int>(size - 5 - r));
        g = {cx, cy, r};
        dg = {cx + dx, cy + dy, r};
        handle = {cx, cy};
        break;
      }
      case ShapeKind::rectangle: {
        const int w = rng.uniform_int(static_cast<int>(12 * s), static_cast<int>(26 * s));
        const int h = rng.uniform_int(static_cast<int>(12 * s), static_cast<int>(26 * s));
        const double x0 = rng.uniform_int(4, size - 5 - w);
        const double y0 = rng.uniform_int(4, size - 5 - h);
        g = {x0, y0, x0 + w, y0 + h};
        const int corner = rng.uniform_int(0, 3);
        const int xi = (corner == 1 || corner == 2) ? 2 : 0;
        const int yi = (corner >= 2) ? 3 : 1;
        handle = {g[static_cast<std::size_t>(xi)], g[static_cast<std::size_t>(yi)]};
        dg = g;
        dg[static_cast<std::size_t>(xi)] += dx;
        dg[static_cast<std::size_t>(yi)] += dy;
        if (std::abs(dg[2] - dg[0]) < 8 * s || std::abs(dg[3] - dg[1]) < 8 * s) continue;
        // The dragged corner must stay the same corner.
        if ((xi == 0) != (dg[0] < dg[2]) || (yi == 1) != (dg[1] < dg[3])) continue;
        break;
      }
      case ShapeKind::triangle: {
        g.resize(6);
        for (auto& v : g) v = rng.uniform_int(4, size - 5);
        if (triangle_area(g) < 120.0 * s * s || min_edge(g) < 12.0 * s) continue;
        const int v = rng.uniform_int(0, 2);
        handle = {g[static_cast<std::size_t>(2 * v)], g[static_cast<std::size_t>(2 * v + 1)]};
        dg = g;
        dg[static_cast<std::size_t>(2 * v)] += dx;
        dg[static_cast<std::size_t>(2 * v + 1)] += dy;
        if (triangle_area(dg) < 120.0 * s * s || min_edge(dg) < 10.0 * s) continue;
        break;
      }
    }
    if (!within(bounds(p.kind, g), size, 3.0) || !within(bounds(p.kind, dg), size, 3.0)) continue;
    p.geometry = std::move(g);
    p.dragged_geometry = std::move(dg);
    p.handle = handle;
    p.target = {handle.x + dx, handle.y + dy};
    return p;
  }
}

nlohmann::json to_json(const ShapeParams& p) {
  static const char* names[] = {"disk", "rectangle", "triangle"};
  return {{"kind", names[static_cast<int>(p.kind)]},
          {"foreground", p.foreground},
          {"background", p.background},
          {"geometry", p.geometry},
          {"dragged_geometry", p.dragged_geometry},
          {"handle", {p.handle.x, p.handle.y}},
          {"target", {p.target.x, p.target.y}}};
}

ShapeParams shape_params_from_json(const nlohmann::json& j) {
  ShapeParams p;
  const std::string kind = j.at("kind");
  p.kind = kind == "disk" ? ShapeKind::disk : kind == "rectangle" ? ShapeKind::rectangle : ShapeKind::triangle;
  p.foreground = j.at("foreground").get<std::array<float, 3>>();
  p.background = j.at("background").get<std::array<float, 3>>();
  p.geometry = j.at("geometry").get<std::vector<double>>();
  p.dragged_geometry = j.at("dragged_geometry").get<std::vector<double>>();
  p.handle = {j.at("handle")[0], j.at("handle")[1]};
  p.target = {j.at("target")[0], j.at("target")[1]};
  return p;
}

void save_sample(const BenchSample& s, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_png_rgb((dir / "image.png").string(), s.image);
  write_png_mask((dir / "mask.png").string(), s.instruction.mask);
  nlohmann::json meta = {{"id", s.id}, {"label", s.label}, {"points", points_to_json(s.instruction)}};
  if (s.shape) meta["shape_params"] = to_json(*s.shape);
  if (s.gt_dragged) {
    write_png_rgb((dir / "gt_dragged.png").string(), *s.gt_dragged);
    meta["gt_dragged"] = "gt_dragged.png";
  }
  write_text(dir / "meta.json", meta.dump(2) + "\n");
}

BenchSample load_sample(const fs::path& dir) {
  const nlohmann::json meta = read_json(dir / "meta.json");
  BenchSample s;
  s.id = meta.at("id");
  s.label = meta.value("label", -1);
  s.image = read_png_rgb((dir / "image.png").string());
  s.instruction.mask = read_png_mask((dir / "mask.png").string());
  points_from_json(meta.at("points"), s.instruction);
  if (meta.contains("shape_params")) s.shape = shape_params_from_json(meta["shape_params"]);
  if (meta.contains("gt_dragged")) {
    s.gt_dragged = read_png_rgb((dir / meta["gt_dragged"].get<std::string>()).string());
  }
  s.instruction.validate(s.image.dim(1), s.image.dim(2));
  return s;
}

fs::path generate_corpus(int n, std::uint64_t seed, const fs::path& out_dir, int size) {
  if (n < 1) throw CorpusError("corpus size must be >= 1");
  if (size < kMinImageSize) throw CorpusError("image size must be >= " + std::to_string(kMinImageSize));
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create corpus directory " + out_dir.string() + ": " + ec.message());
  nlohmann::json index = {{"n", n}, {"seed", seed}, {"size", size}, {"samples", nlohmann::json::array()}};
  for (int i = 0; i < n; ++i) {
    ShapeParams p = random_shape(seed, static_cast<std::uint64_t>(i), size);
    BenchSample s;
    char id[32];
    std::snprintf(id, sizeof(id), "sample_%04d", i);
    s.id = id;
    s.label = static_cast<int>(p.kind);
    s.image = quantize_rgb(render_shape(p, p.geometry, size));
    s.gt_dragged = quantize_rgb(render_shape(p, p.dragged_geometry, size));
    s.instruction.handles = {p.handle};
    s.instruction.targets = {p.target};
    s.instruction.mask = mask_from_params(p, size);
    s.shape = p;
    save_sample(s, out_dir / s.id);
    index["samples"].push_back(s.id);
  }
  write_text(out_dir / "corpus.json", index.dump(2) + "\n");
  return out_dir;
}

std::vector<BenchSample> load_corpus(const fs::path& dir) {
  std::vector<std::string> ids;
  if (fs::exists(dir / "corpus.json")) {
    ids = read_json(dir / "corpus.json").at("samples").get<std::vector<std::string>>();
  } else if (fs::is_directory(dir)) {
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_directory() && fs::exists(e.path() / "meta.json")) ids.push_back(e.path().filename().string());
    }
    std::sort(ids.begin(), ids.end());
  }
  if (ids.empty()) throw CorpusError("corpus at " + dir.string() + " is empty");
  std::vector<BenchSample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(load_sample(dir / id));
  return out;
}

std::string corpus_hash(const fs::path& dir) {
  Sha256 h;
  for (const auto& s : load_corpus(dir)) {
    h.update(s.id);
    h.update_floats(s.image.span());
  }
  return h.hex();
}

}  // namespace draglab
