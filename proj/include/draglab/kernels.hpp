#pragma once

// Dense compute kernels behind the autograd ops. Every kernel exists twice:
// the OpenMP version used by the model, and a naive serial version in
// `reference` that the tests and the benchmark compare against.
//
// Parallel kernels partition work over output rows/channels only, so each
// output element is produced by exactly one thread with a fixed summation
// order. Results are therefore identical for any thread count.

namespace draglab::kernels {

/// Stride-1 "same" convolution with an odd square kernel.
struct ConvShape {
  int cin;
  int cout;
  int height;
  int width;
  int ksize;
};

// out = conv(in, weight) + bias. bias may be null.
void conv2d_forward(const float* in, const float* weight, const float* bias, float* out,
                    const ConvShape& s);
// grad_in += d(out)/d(in)^T grad_out
void conv2d_backward_input(const float* grad_out, const float* weight, float* grad_in,
                           const ConvShape& s);
// grad_w += ..., grad_b += ... (grad_b may be null)
void conv2d_backward_weight(const float* grad_out, const float* in, float* grad_w,
                            float* grad_b, const ConvShape& s);

/// c[m x n] (+)= op(a) * op(b), op(a) is m x k, op(b) is k x n.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const float* a, const float* b,
          float* c, bool accumulate);

int max_threads();

namespace reference {

void conv2d_forward(const float* in, const float* weight, const float* bias, float* out,
                    const ConvShape& s);
void conv2d_backward_input(const float* grad_out, const float* weight, float* grad_in,
                           const ConvShape& s);
void conv2d_backward_weight(const float* grad_out, const float* in, float* grad_w,
                            float* grad_b, const ConvShape& s);
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const float* a, const float* b,
          float* c, bool accumulate);

}  // namespace reference
}  // namespace draglab::kernels
