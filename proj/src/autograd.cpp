#include "draglab/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <type_traits>
#include <unordered_set>

#include "draglab/errors.hpp"
#include "draglab/kernels.hpp"

namespace draglab::ag {
namespace {

using std::size_t;

// `detail` is either text or a callable producing it, so messages are only
// built on failure.
template <class Detail>
void require(bool ok, const char* op, Detail&& detail) {
  if (ok) return;
  if constexpr (std::is_invocable_v<Detail>) {
    throw ShapeError(std::string(op) + ": " + detail());
  } else {
    throw ShapeError(std::string(op) + ": " + detail);
  }
}

void accumulate(Tensor& dst, const Tensor& src) {
  float* d = dst.data();
  const float* s = src.data();
  for (size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

// Bilinear source coordinate (half-pixel centres, clamped to the grid).
struct Lerp {
  int i0;
  int i1;
  float w1;
};

std::vector<Lerp> lerp_table(int in, int out) {
  std::vector<Lerp> t(static_cast<size_t>(out));
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    int i0 = static_cast<int>(std::floor(src));
    int i1 = std::min(i0 + 1, in - 1);
    t[static_cast<size_t>(o)] = {i0, i1, static_cast<float>(src - i0)};
  }
  return t;
}

}  // namespace

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

Var parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Var& v) { return needs_grad(v); });
  if (any) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::move(fn);
  }
  return n;
}

void backward(const Var& root) {
  require(root->value.size() == 1, "backward", "root must be a scalar");
  if (!root->requires_grad) return;
  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Var conv2d(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x->value;
  const Tensor& wv = weight->value;
  require(xv.rank() == 3 && wv.rank() == 4, "conv2d", "expects [C,H,W] input and [O,I,k,k] weight");
  require(wv.dim(1) == xv.dim(0), "conv2d", [&] {
    return "input channels " + std::to_string(xv.dim(0)) + " vs weight " + shape_string(wv.shape());
  });
  require(wv.dim(2) == wv.dim(3) && wv.dim(2) % 2 == 1, "conv2d", "kernel must be odd square");
  const kernels::ConvShape s{xv.dim(0), wv.dim(0), xv.dim(1), xv.dim(2), wv.dim(2)};
  Tensor out = Tensor::chw(s.cout, s.height, s.width);
  kernels::conv2d_forward(xv.data(), wv.data(), bias ? bias->value.data() : nullptr, out.data(), s);
  return make_result(std::move(out), {x, weight, bias}, [s](Node& self) {
    const Var& x = self.inputs[0];
    const Var& w = self.inputs[1];
    const Var& b = self.inputs[2];
    if (needs_grad(x)) {
      kernels::conv2d_backward_input(self.grad.data(), w->value.data(), x->ensure_grad().data(), s);
    }
    if (needs_grad(w)) {
      kernels::conv2d_backward_weight(self.grad.data(), x->value.data(), w->ensure_grad().data(),
                                      needs_grad(b) ? b->ensure_grad().data() : nullptr, s);
    } else if (needs_grad(b)) {
      const size_t hw = static_cast<size_t>(s.height) * s.width;
      float* gb = b->ensure_grad().data();
      for (int c = 0; c < s.cout; ++c)
        for (size_t i = 0; i < hw; ++i) gb[c] += self.grad[c * hw + i];
    }
  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps) {
  const Tensor& xv = x->value;
  require(xv.rank() == 3, "group_norm", "expects [C,H,W]");
  const int c = xv.dim(0);
  require(c % groups == 0, "group_norm", "channels not divisible by groups");
  const int cpg = c / groups;
  const size_t hw = static_cast<size_t>(xv.dim(1)) * xv.dim(2);
  const size_t gsize = hw * cpg;
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<float> rstd(static_cast<size_t>(groups));
#pragma omp parallel for schedule(static)
  for (int g = 0; g < groups; ++g) {
    const float* src = xv.data() + g * gsize;
    double mean = 0.0;
    for (size_t i = 0; i < gsize; ++i) mean += src[i];
    mean /= static_cast<double>(gsize);
    double var = 0.0;
    for (size_t i = 0; i < gsize; ++i) {
      const double d = src[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(gsize);
    const float r = static_cast<float>(1.0 / std::sqrt(var + eps));
    rstd[static_cast<size_t>(g)] = r;
    for (int cc = 0; cc < cpg; ++cc) {
      const int ch = g * cpg + cc;
      const float ga = gamma->value[static_cast<size_t>(ch)];
      const float be = beta->value[static_cast<size_t>(ch)];
      for (size_t i = 0; i < hw; ++i) {
        const size_t idx = static_cast<size_t>(ch) * hw + i;
        const float xh = static_cast<float>(xv[idx] - mean) * r;
        xhat[idx] = xh;
        out[idx] = ga * xh + be;
      }
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), rstd = std::move(rstd), groups, cpg, hw,
                      gsize](Node& self) {
    const Var& x = self.inputs[0];
    const Var& gamma = self.inputs[1];
    const Var& beta = self.inputs[2];
    const Tensor& dy = self.grad;
    const int c = groups * cpg;
    if (needs_grad(gamma) || needs_grad(beta)) {
      for (int ch = 0; ch < c; ++ch) {
        double sg = 0.0, sb = 0.0;
        for (size_t i = 0; i < hw; ++i) {
          const size_t idx = static_cast<size_t>(ch) * hw + i;
          sg += dy[idx] * xhat[idx];
          sb += dy[idx];
        }
        if (needs_grad(gamma)) gamma->ensure_grad()[static_cast<size_t>(ch)] += static_cast<float>(sg);
        if (needs_grad(beta)) beta->ensure_grad()[static_cast<size_t>(ch)] += static_cast<float>(sb);
      }
    }
    if (!needs_grad(x)) return;
    Tensor& dx = x->ensure_grad();
#pragma omp parallel for schedule(static)
    for (int g = 0; g < groups; ++g) {
      double m1 = 0.0, m2 = 0.0;
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = g * cpg + cc;
        const float ga = gamma->value[static_cast<size_t>(ch)];
        for (size_t i = 0; i < hw; ++i) {
          const size_t idx = static_cast<size_t>(ch) * hw + i;
          const double dxh = static_cast<double>(dy[idx]) * ga;
          m1 += dxh;
          m2 += dxh * xhat[idx];
        }
      }
      m1 /= static_cast<double>(gsize);
      m2 /= static_cast<double>(gsize);
      const float r = rstd[static_cast<size_t>(g)];
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = g * cpg + cc;
        const float ga = gamma->value[static_cast<size_t>(ch)];
        for (size_t i = 0; i < hw; ++i) {
          const size_t idx = static_cast<size_t>(ch) * hw + i;
          const double dxh = static_cast<double>(dy[idx]) * ga;
          dx[idx] += static_cast<float>(r * (dxh - m1 - xhat[idx] * m2));
        }
      }
    }
  });
}

Var silu(const Var& x) {
  const Tensor& xv = x->value;
  Tensor out(xv.shape());
  for (size_t i = 0; i < xv.size(); ++i) {
    const float s = 1.0f / (1.0f + std::exp(-xv[i]));
    out[i] = xv[i] * s;
  }
  return make_result(std::move(out), {x}, [](Node& self) {
    const Var& x = self.inputs[0];
    Tensor& dx = x->ensure_grad();
    const Tensor& xv = x->value;
    for (size_t i = 0; i < xv.size(); ++i) {
      const float s = 1.0f / (1.0f + std::exp(-xv[i]));
      dx[i] += self.grad[i] * s * (1.0f + xv[i] * (1.0f - s));
    }
  });
}

Var add(const Var& a, const Var& b) {
  require(a->value.same_shape(b->value), "add",
          [&] { return shape_string(a->value.shape()) + " vs " + shape_string(b->value.shape()); });
  Tensor out = a->value;
  accumulate(out, b->value);
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (const Var& in : self.inputs)
      if (needs_grad(in)) accumulate(in->ensure_grad(), self.grad);
  });
}

Var add_channel_bias(const Var& x, const Var& bias) {
  const Tensor& xv = x->value;
  require(xv.rank() == 3 && bias->value.size() == static_cast<size_t>(xv.dim(0)), "add_channel_bias",
          [&] { return shape_string(xv.shape()) + " + " + shape_string(bias->value.shape()); });
  const size_t hw = static_cast<size_t>(xv.dim(1)) * xv.dim(2);
  Tensor out = xv;
  for (int c = 0; c < xv.dim(0); ++c)
    for (size_t i = 0; i < hw; ++i) out[c * hw + i] += bias->value[static_cast<size_t>(c)];
  return make_result(std::move(out), {x, bias}, [hw](Node& self) {
    const Var& x = self.inputs[0];
    const Var& b = self.inputs[1];
    if (needs_grad(x)) accumulate(x->ensure_grad(), self.grad);
    if (needs_grad(b)) {
      Tensor& gb = b->ensure_grad();
      for (size_t c = 0; c < gb.size(); ++c) {
        double s = 0.0;
        for (size_t i = 0; i < hw; ++i) s += self.grad[c * hw + i];
        gb[c] += static_cast<float>(s);
      }
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x->value;
  const Tensor& wv = weight->value;
  require(wv.rank() == 2, "linear", "weight must be [out, in]");
  const int in = wv.dim(1);
  const int out_dim = wv.dim(0);
  const bool vector_input = xv.rank() == 1;
  const int n = vector_input ? 1 : xv.dim(0);
  require(static_cast<size_t>(n) * in == xv.size(), "linear",
          [&] { return "input " + shape_string(xv.shape()) + " vs weight " + shape_string(wv.shape()); });
  Tensor out(vector_input ? std::vector<int>{out_dim} : std::vector<int>{n, out_dim});
  kernels::gemm(false, true, n, out_dim, in, xv.data(), wv.data(), out.data(), false);
  if (bias) {
    for (int r = 0; r < n; ++r)
      for (int o = 0; o < out_dim; ++o) out[static_cast<size_t>(r) * out_dim + o] += bias->value[static_cast<size_t>(o)];
  }
  return make_result(std::move(out), {x, weight, bias}, [n, in, out_dim](Node& self) {
    const Var& x = self.inputs[0];
    const Var& w = self.inputs[1];
    const Var& b = self.inputs[2];
    if (needs_grad(x))
      kernels::gemm(false, false, n, in, out_dim, self.grad.data(), w->value.data(),
                    x->ensure_grad().data(), true);
    if (needs_grad(w))
      kernels::gemm(true, false, out_dim, in, n, self.grad.data(), x->value.data(),
                    w->ensure_grad().data(), true);
    if (needs_grad(b)) {
      Tensor& gb = b->ensure_grad();
      for (int r = 0; r < n; ++r)
        for (int o = 0; o < out_dim; ++o) gb[static_cast<size_t>(o)] += self.grad[static_cast<size_t>(r) * out_dim + o];
    }
  });
}

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  require(av.rank() == 2 && bv.rank() == 2, "matmul", "expects 2-D operands");
  const int m = trans_a ? av.dim(1) : av.dim(0);
  const int k = trans_a ? av.dim(0) : av.dim(1);
  const int kb = trans_b ? bv.dim(1) : bv.dim(0);
  const int n = trans_b ? bv.dim(0) : bv.dim(1);
  require(k == kb, "matmul", [&] { return shape_string(av.shape()) + " x " + shape_string(bv.shape()); });
  Tensor out({m, n});
  kernels::gemm(trans_a, trans_b, m, n, k, av.data(), bv.data(), out.data(), false);
  return make_result(std::move(out), {a, b}, [m, n, k, trans_a, trans_b](Node& self) {
    const Var& a = self.inputs[0];
    const Var& b = self.inputs[1];
    const float* dc = self.grad.data();
    if (needs_grad(a)) {
      float* da = a->ensure_grad().data();
      if (!trans_a)
        kernels::gemm(false, !trans_b, m, k, n, dc, b->value.data(), da, true);
      else
        kernels::gemm(trans_b, true, k, m, n, b->value.data(), dc, da, true);
    }
    if (needs_grad(b)) {
      float* db = b->ensure_grad().data();
      if (!trans_b)
        kernels::gemm(!trans_a, false, k, n, m, a->value.data(), dc, db, true);
      else
        kernels::gemm(true, trans_a, n, k, m, dc, a->value.data(), db, true);
    }
  });
}

Var scale(const Var& x, float s) {
  Tensor out = x->value;
  for (float& v : out.vec()) v *= s;
  return make_result(std::move(out), {x}, [s](Node& self) {
    Tensor& dx = self.inputs[0]->ensure_grad();
    for (size_t i = 0; i < dx.size(); ++i) dx[i] += s * self.grad[i];
  });
}

Var softmax_rows(const Var& x) {
  const Tensor& xv = x->value;
  require(xv.rank() == 2, "softmax_rows", "expects 2-D input");
  const int rows = xv.dim(0);
  const int cols = xv.dim(1);
  Tensor out(xv.shape());
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const float* src = xv.data() + static_cast<size_t>(r) * cols;
    float* dst = out.data() + static_cast<size_t>(r) * cols;
    float mx = src[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, src[j]);
    double z = 0.0;
    for (int j = 0; j < cols; ++j) {
      dst[j] = std::exp(src[j] - mx);
      z += dst[j];
    }
    const float inv = static_cast<float>(1.0 / z);
    for (int j = 0; j < cols; ++j) dst[j] *= inv;
  }
  return make_result(std::move(out), {x}, [rows, cols](Node& self) {
    Tensor& dx = self.inputs[0]->ensure_grad();
    const Tensor& y = self.value;
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
      const size_t off = static_cast<size_t>(r) * cols;
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += static_cast<double>(self.grad[off + j]) * y[off + j];
      for (int j = 0; j < cols; ++j)
        dx[off + j] += y[off + j] * (self.grad[off + j] - static_cast<float>(dot));
    }
  });
}

Var avg_pool2(const Var& x) {
  const Tensor& xv = x->value;
  require(xv.rank() == 3 && xv.dim(1) % 2 == 0 && xv.dim(2) % 2 == 0, "avg_pool2",
          "needs even spatial dims, got " + shape_string(xv.shape()));
  const int c = xv.dim(0), h = xv.dim(1) / 2, w = xv.dim(2) / 2;
  Tensor out = Tensor::chw(c, h, w);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out.at(ch, y, xx) = 0.25f * (xv.at(ch, 2 * y, 2 * xx) + xv.at(ch, 2 * y, 2 * xx + 1) +
                                     xv.at(ch, 2 * y + 1, 2 * xx) + xv.at(ch, 2 * y + 1, 2 * xx + 1));
  return make_result(std::move(out), {x}, [c, h, w](Node& self) {
    Tensor& dx = self.inputs[0]->ensure_grad();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const float g = 0.25f * self.grad.at(ch, y, xx);
          dx.at(ch, 2 * y, 2 * xx) += g;
          dx.at(ch, 2 * y, 2 * xx + 1) += g;
          dx.at(ch, 2 * y + 1, 2 * xx) += g;
          dx.at(ch, 2 * y + 1, 2 * xx + 1) += g;
        }
  });
}

Var upsample_nearest2(const Var& x) {
  const Tensor& xv = x->value;
  require(xv.rank() == 3, "upsample_nearest2", "expects [C,H,W]");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor out = Tensor::chw(c, 2 * h, 2 * w);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx) out.at(ch, y, xx) = xv.at(ch, y / 2, xx / 2);
  return make_result(std::move(out), {x}, [c, h, w](Node& self) {
    Tensor& dx = self.inputs[0]->ensure_grad();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) dx.at(ch, y / 2, xx / 2) += self.grad.at(ch, y, xx);
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  require(av.rank() == 3 && bv.rank() == 3 && av.dim(1) == bv.dim(1) && av.dim(2) == bv.dim(2),
          "concat_channels", [&] { return shape_string(av.shape()) + " ++ " + shape_string(bv.shape()); });
  Tensor out = Tensor::chw(av.dim(0) + bv.dim(0), av.dim(1), av.dim(2));
  std::copy(av.vec().begin(), av.vec().end(), out.vec().begin());
  std::copy(bv.vec().begin(), bv.vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(av.size()));
  const size_t split = av.size();
  return make_result(std::move(out), {a, b}, [split](Node& self) {
    const Var& a = self.inputs[0];
    const Var& b = self.inputs[1];
    if (needs_grad(a)) {
      Tensor& g = a->ensure_grad();
      for (size_t i = 0; i < split; ++i) g[i] += self.grad[i];
    }
    if (needs_grad(b)) {
      Tensor& g = b->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[split + i];
    }
  });
}

Var to_tokens(const Var& x) {
  const Tensor& xv = x->value;
  require(xv.rank() == 3, "to_tokens", "expects [C,H,W]");
  const int c = xv.dim(0);
  const int n = xv.dim(1) * xv.dim(2);
  Tensor out({n, c});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < n; ++i) out[static_cast<size_t>(i) * c + ch] = xv[static_cast<size_t>(ch) * n + i];
  return make_result(std::move(out), {x}, [c, n](Node& self) {
    Tensor& dx = self.inputs[0]->ensure_grad();
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < n; ++i) dx[static_cast<size_t>(ch) * n + i] += self.grad[static_cast<size_t>(i) * c + ch];
  });
}

Var from_tokens(const Var& x, int height, int width) {
  const Tensor& xv = x->value;
  require(xv.rank() == 2 && xv.dim(0) == height * width, "from_tokens", [&] {
    return shape_string(xv.shape()) + " to " + std::to_string(height) + "x" + std::to_string(width);
  });
  const int n = xv.dim(0);
  const int c = xv.dim(1);
  Tensor out = Tensor::chw(c, height, width);
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < n; ++i) out[static_cast<size_t>(ch) * n + i] = xv[static_cast<size_t>(i) * c + ch];
  return make_result(std::move(out), {x}, [c, n](Node& self) {
    Tensor& dx = self.inputs[0]->ensure_grad();
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < n; ++i) dx[static_cast<size_t>(i) * c + ch] += self.grad[static_cast<size_t>(ch) * n + i];
  });
}

Var resize_bilinear(const Var& x, int out_h, int out_w) {
  const Tensor& xv = x->value;
  require(xv.rank() == 3, "resize_bilinear", "expects [C,H,W]");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  if (h == out_h && w == out_w) return x;
  auto ty = lerp_table(h, out_h);
  auto tx = lerp_table(w, out_w);
  Tensor out = Tensor::chw(c, out_h, out_w);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < out_h; ++y) {
      const Lerp& ly = ty[static_cast<size_t>(y)];
      for (int xx = 0; xx < out_w; ++xx) {
        const Lerp& lx = tx[static_cast<size_t>(xx)];
        const float top = xv.at(ch, ly.i0, lx.i0) * (1 - lx.w1) + xv.at(ch, ly.i0, lx.i1) * lx.w1;
        const float bot = xv.at(ch, ly.i1, lx.i0) * (1 - lx.w1) + xv.at(ch, ly.i1, lx.i1) * lx.w1;
        out.at(ch, y, xx) = top * (1 - ly.w1) + bot * ly.w1;
      }
    }
  return make_result(std::move(out), {x}, [c, out_h, out_w, ty = std::move(ty), tx = std::move(tx)](Node& self) {
    Tensor& dx = self.inputs[0]->ensure_grad();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < out_h; ++y) {
        const Lerp& ly = ty[static_cast<size_t>(y)];
        for (int xx = 0; xx < out_w; ++xx) {
          const Lerp& lx = tx[static_cast<size_t>(xx)];
          const float g = self.grad.at(ch, y, xx);
          dx.at(ch, ly.i0, lx.i0) += g * (1 - ly.w1) * (1 - lx.w1);
          dx.at(ch, ly.i0, lx.i1) += g * (1 - ly.w1) * lx.w1;
          dx.at(ch, ly.i1, lx.i0) += g * ly.w1 * (1 - lx.w1);
          dx.at(ch, ly.i1, lx.i1) += g * ly.w1 * lx.w1;
        }
      }
  });
}

Var mse(const Var& x, const Tensor& target) {
  require(x->value.same_shape(target), "mse",
          [&] { return shape_string(x->value.shape()) + " vs " + shape_string(target.shape()); });
  double s = 0.0;
  for (size_t i = 0; i < target.size(); ++i) {
    const double d = static_cast<double>(x->value[i]) - target[i];
    s += d * d;
  }
  const size_t n = target.size();
  Tensor out({1}, static_cast<float>(s / static_cast<double>(n)));
  return make_result(std::move(out), {x}, [target, n](Node& self) {
    const Var& x = self.inputs[0];
    Tensor& dx = x->ensure_grad();
    const float k = 2.0f * self.grad[0] / static_cast<float>(n);
    for (size_t i = 0; i < n; ++i) dx[i] += k * (x->value[i] - target[i]);
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (float v : x->value.vec()) s += v;
  Tensor out({1}, static_cast<float>(s));
  return make_result(std::move(out), {x}, [](Node& self) {
    Tensor& dx = self.inputs[0]->ensure_grad();
    for (size_t i = 0; i < dx.size(); ++i) dx[i] += self.grad[0];
  });
}

}  // namespace draglab::ag
