#include "draglab/instruction.hpp"

#include <cmath>
#include <string>

#include "draglab/errors.hpp"

namespace draglab {

double distance(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

namespace {

void check_point(const Point& p, const char* field, std::size_t i, int height, int width) {
  if (!(std::isfinite(p.x) && std::isfinite(p.y) && p.x >= 0.0 && p.y >= 0.0 && p.x <= width - 1 &&
        p.y <= height - 1)) {
    throw ValidationError(std::string(field) + "[" + std::to_string(i) + "] out of bounds");
  }
}

}  // namespace

void DragInstruction::validate(int height, int width) const {
  if (handles.empty()) throw ValidationError("points: at least one handle/target pair required");
  if (handles.size() != targets.size()) throw ValidationError("points: handles and targets differ in length");
  for (std::size_t i = 0; i < handles.size(); ++i) {
    check_point(handles[i], "handles", i, height, width);
    check_point(targets[i], "targets", i, height, width);
  }
  if (mask.rank() != 2 || mask.dim(0) != height || mask.dim(1) != width) {
    throw ValidationError("mask/image size mismatch");
  }
  for (float v : mask.vec()) {
    if (v != 0.0f && v != 1.0f) throw ValidationError("mask: values must be 0 or 1");
  }
}

nlohmann::json points_to_json(const DragInstruction& ins) {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t i = 0; i < ins.handles.size(); ++i) {
    arr.push_back({{"handle", {ins.handles[i].x, ins.handles[i].y}},
                   {"target", {ins.targets[i].x, ins.targets[i].y}}});
  }
  return arr;
}

void points_from_json(const nlohmann::json& j, DragInstruction& ins) {
  if (!j.is_array()) throw ValidationError("points: expected an array of {handle, target}");
  ins.handles.clear();
  ins.targets.clear();
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    auto read = [&](const char* key) {
      if (!e.is_object() || !e.contains(key) || !e[key].is_array() || e[key].size() != 2 ||
          !e[key][0].is_number() || !e[key][1].is_number()) {
        throw ValidationError("points[" + std::to_string(i) + "]." + key + ": expected [x, y]");
      }
      return Point{e[key][0].get<double>(), e[key][1].get<double>()};
    };
    ins.handles.push_back(read("handle"));
    ins.targets.push_back(read("target"));
  }
}

}  // namespace draglab
