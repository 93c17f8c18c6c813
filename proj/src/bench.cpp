#include "draglab/bench.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "draglab/errors.hpp"
#include "draglab/hashing.hpp"
#include "draglab/image_io.hpp"
#include "draglab/metrics.hpp"

namespace draglab {
namespace {

namespace fs = std::filesystem;

std::vector<int> parse_step_set(const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, '+')) out.push_back(std::stoi(part));
  return out;
}

std::string safe_name(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-') ? c : '_';
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, p);
}

std::string run_key(const BenchSample& s, const EditConfig& c, const Checkpoint& ck) {
  Sha256 h;
  h.update(s.id);
  h.update_floats(s.image.span());
  h.update(points_to_json(s.instruction).dump());
  h.update_floats(s.instruction.mask.span());
  h.update(to_json(c).dump());
  h.update(ck.hash);
  return h.hex();
}

nlohmann::json outcome_json(const SampleOutcome& o) {
  nlohmann::json j = {{"sample_id", o.sample_id}, {"ok", o.ok}};
  if (o.ok) {
    j["md"] = o.md;
    j["if"] = o.if_score;
    j["runtime_s"] = o.runtime_s;
    j["iterations"] = o.iterations;
    j["termination"] = o.termination;
  } else {
    j["error"] = o.error;
  }
  return j;
}

SampleOutcome outcome_from_json(const nlohmann::json& j) {
  SampleOutcome o;
  o.sample_id = j.at("sample_id").get<std::string>();
  o.ok = j.at("ok").get<bool>();
  if (o.ok) {
    o.md = j.at("md").get<double>();
    o.if_score = j.at("if").get<double>();
    o.runtime_s = j.at("runtime_s").get<double>();
    o.iterations = j.at("iterations").get<int>();
    o.termination = j.at("termination").get<std::string>();
  } else {
    o.error = j.value("error", std::string());
  }
  return o;
}

}  // namespace

Axis parse_axis(const std::string& name) {
  if (name == "timestep") return Axis::timestep;
  if (name == "lora_steps") return Axis::lora_steps;
  if (name == "lambda") return Axis::lambda;
  if (name == "block") return Axis::block;
  if (name == "multi_timestep") return Axis::multi_timestep;
  if (name == "lora_on_off") return Axis::lora_on_off;
  throw ValidationError("axis: unknown axis '" + name + "'");
}

std::string to_string(Axis axis) {
  switch (axis) {
    case Axis::timestep: return "timestep";
    case Axis::lora_steps: return "lora_steps";
    case Axis::lambda: return "lambda";
    case Axis::block: return "block";
    case Axis::multi_timestep: return "multi_timestep";
    case Axis::lora_on_off: return "lora_on_off";
  }
  return "unknown";
}

std::vector<std::string> default_axis_values(Axis axis) {
  switch (axis) {
    case Axis::timestep: return {"20", "35", "50"};
    case Axis::lora_steps: return {"0", "20", "80", "120"};
    case Axis::lambda: return {"0.0", "0.1", "0.5", "1.0"};
    case Axis::block: return {"1", "2", "3", "4"};
    case Axis::multi_timestep: return {"35", "30+35+40"};
    case Axis::lora_on_off: return {"off", "on"};
  }
  return {};
}

std::vector<Cell> make_cells(Axis axis, const std::vector<std::string>& values, const EditConfig& defaults) {
  if (values.empty()) throw ValidationError("values: at least one cell required");
  std::vector<Cell> cells;
  for (const std::string& v : values) {
    EditConfig c = defaults;
    try {
      switch (axis) {
        case Axis::timestep: c.optimizer.timesteps = {std::stoi(v)}; break;
        case Axis::lora_steps: c.lora_steps = std::stoi(v); break;
        case Axis::lambda: c.optimizer.lambda_reg = std::stod(v); break;
        case Axis::block: c.optimizer.block_index = std::stoi(v); break;
        case Axis::multi_timestep: c.optimizer.timesteps = parse_step_set(v); break;
        case Axis::lora_on_off:
          if (v == "off") {
            c.lora_steps = 0;
          } else if (v == "on") {
            c.lora_steps = defaults.lora_steps > 0 ? defaults.lora_steps : 80;
          } else {
            throw ValidationError("values: lora_on_off takes 'off' or 'on'");
          }
          break;
      }
    } catch (const std::logic_error&) {
      throw ValidationError("values: cannot parse '" + v + "' for axis " + to_string(axis));
    }
    cells.push_back({v, c});
  }
  return cells;
}

void finalize_cell(CellReport& cell) {
  std::vector<double> md, fid, rt;
  cell.complete = true;
  for (const SampleOutcome& s : cell.samples) {
    if (!s.ok) {
      cell.complete = false;
      continue;
    }
    md.push_back(s.md);
    fid.push_back(s.if_score);
    rt.push_back(s.runtime_s);
  }
  cell.md = aggregate_mean(md);
  cell.if_score = aggregate_mean(fid);
  cell.runtime_s = aggregate_mean(rt);
}

nlohmann::json report_to_json(Axis axis, const std::vector<CellReport>& cells, const Checkpoint& ck) {
  nlohmann::json out = {{"axis", to_string(axis)}, {"checkpoint_hash", ck.hash}};
  out["seed"] = cells.empty() ? 0 : cells.front().config.optimizer.seed;
  nlohmann::json arr = nlohmann::json::array();
  for (const CellReport& c : cells) {
    nlohmann::json samples = nlohmann::json::array();
    for (const SampleOutcome& s : c.samples) samples.push_back(outcome_json(s));
    arr.push_back({{"cell", c.cell},
                   {"config", to_json(c.config)},
                   {"md", c.md},
                   {"if", c.if_score},
                   {"runtime_s", c.runtime_s},
                   {"complete", c.complete},
                   {"samples", samples}});
  }
  out["cells"] = arr;
  return out;
}

std::string table_csv(const std::vector<CellReport>& cells) {
  std::string out = "cell,md,if,runtime_s\n";
  char buf[256];
  for (const CellReport& c : cells) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f\n", c.cell.c_str(), c.md, c.if_score, c.runtime_s);
    out += buf;
  }
  return out;
}

std::vector<CellReport> run_ablation(Axis axis, const std::vector<Cell>& cells,
                                     const std::vector<BenchSample>& corpus, const Checkpoint& ck,
                                     const fs::path& out_dir, const BenchOptions& opts) {
  if (corpus.empty()) throw CorpusError("bench corpus is empty");
  fs::create_directories(out_dir);
  const fs::path lora_cache = opts.lora_cache.empty() ? out_dir / "lora_cache" : opts.lora_cache;
  if (!opts.run_cache.empty()) fs::create_directories(opts.run_cache);
  auto log = [&](const std::string& m) {
    if (opts.log) opts.log(m);
  };

  std::vector<CellReport> reports;
  for (const Cell& cell : cells) {
    CellReport rep;
    rep.cell = cell.name;
    rep.config = cell.config;
    const fs::path image_dir = out_dir / "images" / safe_name(cell.name);
    if (opts.write_images) fs::create_directories(image_dir);
    for (const BenchSample& s : corpus) {
      SampleOutcome o;
      o.sample_id = s.id;
      Tensor edited;
      std::vector<Point> located;
      const std::string key = run_key(s, cell.config, ck);
      const fs::path cached_json = opts.run_cache / (key + ".json");
      const fs::path cached_png = opts.run_cache / (key + ".png");
      bool hit = false;
      if (!opts.run_cache.empty() && fs::exists(cached_json) && fs::exists(cached_png)) {
        try {
          std::ifstream in(cached_json);
          const nlohmann::json j = nlohmann::json::parse(in);
          o = outcome_from_json(j.at("outcome"));
          for (const auto& p : j.at("located")) located.push_back({p[0].get<double>(), p[1].get<double>()});
          edited = read_png_rgb(cached_png.string());
          hit = true;
        } catch (const std::exception& e) {
          log("ignoring unreadable run cache entry " + cached_json.string() + ": " + e.what());
        }
      }
      if (!hit) {
        try {
          const EditResult r = run_edit(s, cell.config, ck, lora_cache);
          o.ok = true;
          o.md = r.md;
          o.if_score = r.if_score;
          o.runtime_s = r.runtime_s;
          o.iterations = static_cast<int>(r.trace.records.size());
          o.termination = to_string(r.trace.reason);
          edited = r.edited;
          located = r.located;
        } catch (const std::exception& e) {
          o.ok = false;
          o.error = e.what();
        }
        if (!opts.run_cache.empty() && o.ok) {
          nlohmann::json pts = nlohmann::json::array();
          for (const Point& p : located) pts.push_back({p.x, p.y});
          write_png_rgb(cached_png.string(), edited);
          write_text(cached_json, nlohmann::json{{"outcome", outcome_json(o)}, {"located", pts}}.dump());
        }
      }
      if (o.ok && opts.write_images) {
        const std::string stem = safe_name(s.id);
        write_png_rgb((image_dir / (stem + "_source.png")).string(), s.image);
        write_png_rgb((image_dir / (stem + "_edited.png")).string(), edited);
        write_png_rgb((image_dir / (stem + "_overlay.png")).string(),
                      make_overlay(edited, s.instruction, located));
      }
      log(to_string(axis) + " cell " + cell.name + " sample " + s.id +
          (o.ok ? " md " + std::to_string(o.md) + " if " + std::to_string(o.if_score) + " runtime " +
                      std::to_string(o.runtime_s) + (hit ? " (cached)" : "")
                : " failed: " + o.error));
      rep.samples.push_back(std::move(o));
    }
    finalize_cell(rep);
    reports.push_back(std::move(rep));
  }

  write_text(out_dir / "report.json", report_to_json(axis, reports, ck).dump(2) + "\n");
  write_text(out_dir / ("table_" + to_string(axis) + ".csv"), table_csv(reports));
  return reports;
}

}  // namespace draglab
