#pragma once

#include <vector>

#include "draglab/autograd.hpp"

namespace draglab {

/// Adam over a fixed set of leaf Vars; consumes and clears their grads.
class Adam {
 public:
  Adam(std::vector<ag::Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  void step();
  void zero_grad();
  int steps_taken() const { return t_; }

 private:
  std::vector<ag::Var> params_;
  std::vector<std::vector<float>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
};

}  // namespace draglab
