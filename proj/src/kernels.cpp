#include "draglab/kernels.hpp"

#include <algorithm>
#include <cstddef>
#include <vector>

#include <omp.h>

namespace draglab::kernels {
namespace {

using std::size_t;

// GCC/Clang vector extensions; lowered to AVX-512/AVX2/SSE as available.
typedef float v16 __attribute__((vector_size(64)));
typedef float v16u __attribute__((vector_size(64), aligned(4)));

inline v16 load(const float* p) { return *reinterpret_cast<const v16u*>(p); }
inline void store(float* p, v16 v) { *reinterpret_cast<v16u*>(p) = v; }

// C[MR x 16*NV] (+)= A[MR x K] * B[K x 16*NV]. Accumulators stay in registers;
// each C element sums over k in ascending order.
template <int MR, int NV>
inline void micro_kernel(int k, const float* a, int lda, const float* b, int ldb, float* c, int ldc,
                         bool accumulate) {
  v16 acc[MR][NV];
  for (int i = 0; i < MR; ++i)
    for (int v = 0; v < NV; ++v) acc[i][v] = accumulate ? load(c + static_cast<size_t>(i) * ldc + 16 * v) : v16{};
  for (int p = 0; p < k; ++p) {
    const float* brow = b + static_cast<size_t>(p) * ldb;
    v16 bv[NV];
    for (int v = 0; v < NV; ++v) bv[v] = load(brow + 16 * v);
    for (int i = 0; i < MR; ++i) {
      const float av = a[static_cast<size_t>(i) * lda + p];
      for (int v = 0; v < NV; ++v) acc[i][v] += bv[v] * av;
    }
  }
  for (int i = 0; i < MR; ++i)
    for (int v = 0; v < NV; ++v) store(c + static_cast<size_t>(i) * ldc + 16 * v, acc[i][v]);
}

template <int MR>
inline void scalar_tail(int k, int cols, const float* a, int lda, const float* b, int ldb, float* c,
                        int ldc, bool accumulate) {
  for (int i = 0; i < MR; ++i)
    for (int j = 0; j < cols; ++j) {
      float acc = accumulate ? c[static_cast<size_t>(i) * ldc + j] : 0.0f;
      for (int p = 0; p < k; ++p) acc += a[static_cast<size_t>(i) * lda + p] * b[static_cast<size_t>(p) * ldb + j];
      c[static_cast<size_t>(i) * ldc + j] = acc;
    }
}

template <int MR>
void row_panel(int n, int k, const float* a, int lda, const float* b, int ldb, float* c, int ldc,
               bool accumulate) {
  int j = 0;
  for (; j + 64 <= n; j += 64) micro_kernel<MR, 4>(k, a, lda, b + j, ldb, c + j, ldc, accumulate);
  for (; j + 16 <= n; j += 16) micro_kernel<MR, 1>(k, a, lda, b + j, ldb, c + j, ldc, accumulate);
  if (j < n) scalar_tail<MR>(k, n - j, a, lda, b + j, ldb, c + j, ldc, accumulate);
}

// Row-major C[m x n] (+)= A[m x k] * B[k x n].
void gemm_nn(int m, int n, int k, const float* a, int lda, const float* b, int ldb, float* c, int ldc,
             bool accumulate) {
  constexpr int kMR = 4;
  constexpr int kNB = 128;
  const int row_blocks = (m + kMR - 1) / kMR;
  const int col_blocks = (n + kNB - 1) / kNB;
#pragma omp parallel for collapse(2) schedule(static)
  for (int cb = 0; cb < col_blocks; ++cb) {
    for (int rb = 0; rb < row_blocks; ++rb) {
      const int i = rb * kMR;
      const int j = cb * kNB;
      const int cols = std::min(kNB, n - j);
      const float* ap = a + static_cast<size_t>(i) * lda;
      const float* bp = b + j;
      float* cp = c + static_cast<size_t>(i) * ldc + j;
      if (i + kMR <= m) {
        row_panel<kMR>(cols, k, ap, lda, bp, ldb, cp, ldc, accumulate);
      } else {
        for (int r = i; r < m; ++r)
          row_panel<1>(cols, k, ap + static_cast<size_t>(r - i) * lda, lda, bp, ldb,
                       cp + static_cast<size_t>(r - i) * ldc, ldc, accumulate);
      }
    }
  }
}

std::vector<float> transpose(const float* src, int rows, int cols) {
  std::vector<float> t(static_cast<size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) t[static_cast<size_t>(c) * rows + r] = src[static_cast<size_t>(r) * cols + c];
  return t;
}

// col[(ci*k + ky)*k + kx][y*w + x] = in[ci][y + ky - p][x + kx - p] (zero padded)
void im2col(const float* in, const ConvShape& s, float* col) {
  const int k = s.ksize, p = k / 2, h = s.height, w = s.width;
  const size_t hw = static_cast<size_t>(h) * w;
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < s.cin; ++ci) {
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        float* dst = col + (static_cast<size_t>(ci) * k * k + ky * k + kx) * hw;
        const int dy = ky - p, dx = kx - p;
        for (int y = 0; y < h; ++y) {
          float* drow = dst + static_cast<size_t>(y) * w;
          const int yy = y + dy;
          if (yy < 0 || yy >= h) {
            std::fill(drow, drow + w, 0.0f);
            continue;
          }
          const float* srow = in + (static_cast<size_t>(ci) * h + yy) * w;
          for (int x = 0; x < w; ++x) {
            const int xx = x + dx;
            drow[x] = (xx >= 0 && xx < w) ? srow[xx] : 0.0f;
          }
        }
      }
  }
}

void col2im_add(const float* col, const ConvShape& s, float* out) {
  const int k = s.ksize, p = k / 2, h = s.height, w = s.width;
  const size_t hw = static_cast<size_t>(h) * w;
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < s.cin; ++ci) {
    float* o = out + ci * hw;
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const float* src = col + (static_cast<size_t>(ci) * k * k + ky * k + kx) * hw;
        const int dy = ky - p, dx = kx - p;
        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = y0; y < y1; ++y) {
          const float* srow = src + static_cast<size_t>(y) * w;
          float* orow = o + static_cast<size_t>(y + dy) * w + dx;
          for (int x = x0; x < x1; ++x) orow[x] += srow[x];
        }
      }
  }
}

}  // namespace

int max_threads() { return omp_get_max_threads(); }

void conv2d_forward(const float* in, const float* weight, const float* bias, float* out,
                    const ConvShape& s) {
  const int hw = s.height * s.width;
  const int kdim = s.cin * s.ksize * s.ksize;
  std::vector<float> col;
  const float* b = in;
  if (s.ksize > 1) {
    col.resize(static_cast<size_t>(kdim) * hw);
    im2col(in, s, col.data());
    b = col.data();
  }
  for (int co = 0; co < s.cout; ++co)
    std::fill(out + static_cast<size_t>(co) * hw, out + static_cast<size_t>(co + 1) * hw, bias ? bias[co] : 0.0f);
  gemm_nn(s.cout, hw, kdim, weight, kdim, b, hw, out, hw, true);
}

void conv2d_backward_input(const float* grad_out, const float* weight, float* grad_in,
                           const ConvShape& s) {
  const int hw = s.height * s.width;
  const int kdim = s.cin * s.ksize * s.ksize;
  const std::vector<float> wt = transpose(weight, s.cout, kdim);
  if (s.ksize == 1) {
    gemm_nn(kdim, hw, s.cout, wt.data(), s.cout, grad_out, hw, grad_in, hw, true);
    return;
  }
  std::vector<float> dcol(static_cast<size_t>(kdim) * hw);
  gemm_nn(kdim, hw, s.cout, wt.data(), s.cout, grad_out, hw, dcol.data(), hw, false);
  col2im_add(dcol.data(), s, grad_in);
}

void conv2d_backward_weight(const float* grad_out, const float* in, float* grad_w,
                            float* grad_b, const ConvShape& s) {
  const int hw = s.height * s.width;
  const int kdim = s.cin * s.ksize * s.ksize;
  std::vector<float> col(static_cast<size_t>(kdim) * hw);
  if (s.ksize > 1) {
    im2col(in, s, col.data());
  } else {
    std::copy(in, in + col.size(), col.begin());
  }
  const std::vector<float> colt = transpose(col.data(), kdim, hw);
  gemm_nn(s.cout, kdim, hw, grad_out, hw, colt.data(), kdim, grad_w, kdim, true);
  if (grad_b) {
    for (int co = 0; co < s.cout; ++co) {
      const float* g = grad_out + static_cast<size_t>(co) * hw;
      float acc = 0.0f;
      for (int i = 0; i < hw; ++i) acc += g[i];
      grad_b[co] += acc;
    }
  }
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const float* a, const float* b,
          float* c, bool accumulate) {
  std::vector<float> at, bt;
  if (trans_a) {
    at = transpose(a, k, m);
    a = at.data();
  }
  if (trans_b) {
    bt = transpose(b, n, k);
    b = bt.data();
  }
  gemm_nn(m, n, k, a, k, b, n, c, n, accumulate);
}

namespace reference {

void conv2d_forward(const float* in, const float* weight, const float* bias, float* out,
                    const ConvShape& s) {
  const int p = s.ksize / 2;
  for (int co = 0; co < s.cout; ++co)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        double acc = bias ? bias[co] : 0.0;
        for (int ci = 0; ci < s.cin; ++ci)
          for (int ky = 0; ky < s.ksize; ++ky)
            for (int kx = 0; kx < s.ksize; ++kx) {
              const int yy = y + ky - p;
              const int xx = x + kx - p;
              if (yy < 0 || yy >= s.height || xx < 0 || xx >= s.width) continue;
              acc += static_cast<double>(
                         weight[((static_cast<size_t>(co) * s.cin + ci) * s.ksize + ky) * s.ksize + kx]) *
                     in[(static_cast<size_t>(ci) * s.height + yy) * s.width + xx];
            }
        out[(static_cast<size_t>(co) * s.height + y) * s.width + x] = static_cast<float>(acc);
      }
}

void conv2d_backward_input(const float* grad_out, const float* weight, float* grad_in,
                           const ConvShape& s) {
  const int p = s.ksize / 2;
  for (int co = 0; co < s.cout; ++co)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        const float g = grad_out[(static_cast<size_t>(co) * s.height + y) * s.width + x];
        for (int ci = 0; ci < s.cin; ++ci)
          for (int ky = 0; ky < s.ksize; ++ky)
            for (int kx = 0; kx < s.ksize; ++kx) {
              const int yy = y + ky - p;
              const int xx = x + kx - p;
              if (yy < 0 || yy >= s.height || xx < 0 || xx >= s.width) continue;
              grad_in[(static_cast<size_t>(ci) * s.height + yy) * s.width + xx] +=
                  g * weight[((static_cast<size_t>(co) * s.cin + ci) * s.ksize + ky) * s.ksize + kx];
            }
      }
}

void conv2d_backward_weight(const float* grad_out, const float* in, float* grad_w,
                            float* grad_b, const ConvShape& s) {
  const int p = s.ksize / 2;
  for (int co = 0; co < s.cout; ++co)
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        const float g = grad_out[(static_cast<size_t>(co) * s.height + y) * s.width + x];
        if (grad_b) grad_b[co] += g;
        for (int ci = 0; ci < s.cin; ++ci)
          for (int ky = 0; ky < s.ksize; ++ky)
            for (int kx = 0; kx < s.ksize; ++kx) {
              const int yy = y + ky - p;
              const int xx = x + kx - p;
              if (yy < 0 || yy >= s.height || xx < 0 || xx >= s.width) continue;
              grad_w[((static_cast<size_t>(co) * s.cin + ci) * s.ksize + ky) * s.ksize + kx] +=
                  g * in[(static_cast<size_t>(ci) * s.height + yy) * s.width + xx];
            }
      }
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const float* a, const float* b,
          float* c, bool accumulate) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = accumulate ? c[static_cast<size_t>(i) * n + j] : 0.0;
      for (int p = 0; p < k; ++p) {
        const float av = trans_a ? a[static_cast<size_t>(p) * m + i] : a[static_cast<size_t>(i) * k + p];
        const float bv = trans_b ? b[static_cast<size_t>(j) * k + p] : b[static_cast<size_t>(p) * n + j];
        acc += static_cast<double>(av) * bv;
      }
      c[static_cast<size_t>(i) * n + j] = static_cast<float>(acc);
    }
}

}  // namespace reference
}  // namespace draglab::kernels
