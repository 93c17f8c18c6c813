#pragma once

#include <vector>

#include <nlohmann/json.hpp>

#include "draglab/tensor.hpp"

namespace draglab {

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

double distance(const Point& a, const Point& b);

/// Handle/target pairs plus the editable-region mask (1 = editable).
struct DragInstruction {
  std::vector<Point> handles;
  std::vector<Point> targets;
  Tensor mask;  // [H, W]

  /// Throws ValidationError naming the offending field/index.
  void validate(int height, int width) const;
};

nlohmann::json points_to_json(const DragInstruction& ins);
/// Parses [{"handle": [x, y], "target": [x, y]}, ...] into handles/targets.
void points_from_json(const nlohmann::json& j, DragInstruction& ins);

}  // namespace draglab
