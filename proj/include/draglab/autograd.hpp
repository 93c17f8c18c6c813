#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "draglab/tensor.hpp"

/// Minimal reverse-mode autodiff over Tensor values.
///
/// A Var is a shared node in a dynamically built graph. Nodes that do not
/// depend on any trainable leaf carry no backward closure and no parents, so
/// inference through the same ops costs nothing extra.
namespace draglab::ag {

struct Node;
using Var = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> inputs;
  BackwardFn backward;

  Tensor& ensure_grad() {
    if (grad.empty()) grad = Tensor(value.shape(), 0.0f);
    return grad;
  }
};

Var constant(Tensor value);
Var parameter(Tensor value);

/// Builds an op result. The closure is kept only if an input needs grad.
Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn fn);

inline bool needs_grad(const Var& v) { return v && v->requires_grad; }

/// Back-propagates from a single-element root. Gradients accumulate.
void backward(const Var& root);

// ---- ops ----
Var conv2d(const Var& x, const Var& weight, const Var& bias);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps = 1e-5f);
Var silu(const Var& x);
Var add(const Var& a, const Var& b);
Var add_channel_bias(const Var& x, const Var& bias);
/// x: [n, in] (or [in]), weight: [out, in], bias: [out] or null -> [n, out]
Var linear(const Var& x, const Var& weight, const Var& bias);
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var scale(const Var& x, float s);
Var softmax_rows(const Var& x);
Var avg_pool2(const Var& x);
Var upsample_nearest2(const Var& x);
Var concat_channels(const Var& a, const Var& b);
Var to_tokens(const Var& x);
Var from_tokens(const Var& x, int height, int width);
/// Half-pixel-centre bilinear resize of a [C, H, W] tensor.
Var resize_bilinear(const Var& x, int out_h, int out_w);
Var mse(const Var& x, const Tensor& target);
Var sum(const Var& x);

}  // namespace draglab::ag
