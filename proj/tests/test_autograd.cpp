#include <doctest.h>

#include <functional>
#include <vector>

#include "draglab/autograd.hpp"
#include "draglab/errors.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace draglab;
using testing::random_tensor;

namespace {

using Builder = std::function<ag::Var(const std::vector<ag::Var>&)>;

// Checks d mse(f(inputs), target) / d input_k against central differences
// for every input.
void check_op(const Builder& f, const std::vector<Tensor>& inputs, double tol = 2e-3, double h = 1e-2) {
  std::vector<ag::Var> vars;
  for (const Tensor& t : inputs) vars.push_back(ag::parameter(t));
  const Tensor target = random_tensor(99, f(vars)->value.shape(), 0.5f);
  ag::backward(ag::mse(f(vars), target));

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto loss = [&](const Tensor& probe) {
      std::vector<ag::Var> cs;
      for (std::size_t j = 0; j < inputs.size(); ++j) cs.push_back(ag::constant(j == k ? probe : inputs[j]));
      return static_cast<double>(ag::mse(f(cs), target)->value[0]);
    };
    CAPTURE(k);
    CHECK(oracles::fd_relative_error(loss, inputs[k], vars[k]->grad, h) < tol);
  }
}

}  // namespace

TEST_SUITE("autograd") {
  TEST_CASE("conv2d gradients") {
    check_op([](const auto& v) { return ag::conv2d(v[0], v[1], v[2]); },
             {random_tensor(1, {3, 6, 5}), random_tensor(2, {4, 3, 3, 3}, 0.5f), random_tensor(3, {4})});
    check_op([](const auto& v) { return ag::conv2d(v[0], v[1], nullptr); },
             {random_tensor(4, {2, 4, 4}), random_tensor(5, {3, 2, 1, 1})});
  }

  TEST_CASE("group_norm gradients") {
    check_op([](const auto& v) { return ag::group_norm(v[0], v[1], v[2], 2); },
             {random_tensor(6, {4, 3, 3}), random_tensor(7, {4}), random_tensor(8, {4})});
  }

  TEST_CASE("pointwise and shape op gradients") {
    check_op([](const auto& v) { return ag::silu(v[0]); }, {random_tensor(9, {2, 3, 3}, 2.0f)});
    check_op([](const auto& v) { return ag::add(v[0], v[1]); }, {random_tensor(10, {5}), random_tensor(11, {5})});
    check_op([](const auto& v) { return ag::add_channel_bias(v[0], v[1]); },
             {random_tensor(12, {3, 2, 2}), random_tensor(13, {3})});
    check_op([](const auto& v) { return ag::scale(v[0], -1.7f); }, {random_tensor(14, {4})});
    check_op([](const auto& v) { return ag::avg_pool2(v[0]); }, {random_tensor(15, {2, 4, 6})});
    check_op([](const auto& v) { return ag::upsample_nearest2(v[0]); }, {random_tensor(16, {2, 3, 2})});
    check_op([](const auto& v) { return ag::concat_channels(v[0], v[1]); },
             {random_tensor(17, {2, 3, 3}), random_tensor(18, {1, 3, 3})});
    check_op([](const auto& v) { return ag::from_tokens(ag::to_tokens(v[0]), 3, 2); }, {random_tensor(19, {4, 3, 2})});
    check_op([](const auto& v) { return ag::resize_bilinear(v[0], 7, 5); }, {random_tensor(20, {2, 3, 4})});
    check_op([](const auto& v) { return ag::resize_bilinear(v[0], 2, 3); }, {random_tensor(21, {2, 5, 6})});
    check_op([](const auto& v) { return ag::sum(v[0]); }, {random_tensor(22, {3, 2})});
  }

  TEST_CASE("linear, matmul and softmax gradients") {
    check_op([](const auto& v) { return ag::linear(v[0], v[1], v[2]); },
             {random_tensor(23, {4, 3}), random_tensor(24, {5, 3}), random_tensor(25, {5})});
    check_op([](const auto& v) { return ag::linear(v[0], v[1], nullptr); }, {random_tensor(26, {3}), random_tensor(27, {2, 3})});
    for (bool ta : {false, true}) {
      for (bool tb : {false, true}) {
        CAPTURE(ta);
        CAPTURE(tb);
        check_op([=](const auto& v) { return ag::matmul(v[0], v[1], ta, tb); },
                 {random_tensor(28, ta ? std::vector<int>{3, 4} : std::vector<int>{4, 3}),
                  random_tensor(29, tb ? std::vector<int>{2, 3} : std::vector<int>{3, 2})});
      }
    }
    check_op([](const auto& v) { return ag::softmax_rows(v[0]); }, {random_tensor(30, {3, 5}, 2.0f)});
  }

  TEST_CASE("gradients accumulate across backward calls") {
    ag::Var x = ag::parameter(Tensor({2}, std::vector<float>{1.0f, -2.0f}));
    ag::backward(ag::sum(ag::scale(x, 3.0f)));
    ag::backward(ag::sum(ag::scale(x, 3.0f)));
    CHECK(x->grad[0] == doctest::Approx(6.0));
    CHECK(x->grad[1] == doctest::Approx(6.0));
  }

  TEST_CASE("constants carry no graph") {
    ag::Var a = ag::constant(random_tensor(31, {3}));
    ag::Var y = ag::silu(ag::add(a, a));
    CHECK_FALSE(y->requires_grad);
    CHECK(y->inputs.empty());
    CHECK_FALSE(static_cast<bool>(y->backward));
  }

  TEST_CASE("shape mismatches are reported") {
    CHECK_THROWS_AS(ag::add(ag::constant(Tensor({3})), ag::constant(Tensor({4}))), ShapeError);
    CHECK_THROWS_AS(ag::matmul(ag::constant(Tensor({2, 3})), ag::constant(Tensor({2, 3}))), ShapeError);
    CHECK_THROWS_AS(ag::conv2d(ag::constant(Tensor({2, 4, 4})), ag::constant(Tensor({3, 5, 3, 3})), nullptr),
                    ShapeError);
    CHECK_THROWS_AS(ag::backward(ag::parameter(Tensor({2}))), ShapeError);
  }
}
