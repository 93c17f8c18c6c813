#include "draglab/optimizer.hpp"

#include <cmath>

namespace draglab {

Adam::Adam(std::vector<ag::Var> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p->value.size(), 0.0f);
    v_.emplace_back(p->value.size(), 0.0f);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p->grad.empty()) continue;
    auto& m = m_[i];
    auto& v = v_[i];
    float* w = p->value.data();
    const float* g = p->grad.data();
    for (std::size_t j = 0; j < m.size(); ++j) {
      m[j] = static_cast<float>(beta1_ * m[j] + (1.0 - beta1_) * g[j]);
      v[j] = static_cast<float>(beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j]);
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      w[j] -= static_cast<float>(lr_ * mh / (std::sqrt(vh) + eps_));
    }
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& p : params_) p->grad = Tensor();
}

}  // namespace draglab
