#include "draglab/rng.hpp"

#include <cmath>
#include <numbers>

namespace draglab {

double CounterRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double th = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(th);
  has_spare_ = true;
  return r * std::cos(th);
}

Tensor CounterRng::normal_tensor(std::vector<int> shape, float stddev) {
  Tensor t(std::move(shape));
  for (float& v : t.vec()) v = static_cast<float>(normal()) * stddev;
  return t;
}

}  // namespace draglab
