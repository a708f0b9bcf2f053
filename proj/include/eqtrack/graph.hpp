#pragma once

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <vector>

#include "eqtrack/dual.hpp"
#include "eqtrack/error.hpp"
#include "eqtrack/geometry.hpp"
#include "eqtrack/tensor.hpp"

namespace eqtrack::diff {

namespace gemm_detail {

// The vendor sgemm runs an order of magnitude under memory bandwidth for the
// very skinny shapes this model produces (few batch rows through wide FC
// layers, few output channels in the decoder). These tiled loops stream the
// large operand exactly once for those cases.

// C(M x N) = alpha * A(M x K) * B(K x N) + beta * C, M small. Four k-slices
// per sweep keep each C row pass worth four fused multiplies.
inline void sgemm_nn_small_m(int m, int n, int k, float alpha, const float* a, int lda,
                             const float* b, int ldb, float beta, float* c, int ldc) {
  constexpr int kTile = 2048;
  for (int j0 = 0; j0 < n; j0 += kTile) {
    const int jn = std::min(n - j0, kTile);
    for (int i = 0; i < m; ++i) {
      float* crow = c + static_cast<std::size_t>(i) * ldc + j0;
      if (beta == 0.0f)
        std::fill(crow, crow + jn, 0.0f);
      else if (beta != 1.0f)
        for (int j = 0; j < jn; ++j) crow[j] *= beta;
    }
    int p = 0;
    for (; p + 4 <= k; p += 4) {
      const float* __restrict b0 = b + static_cast<std::size_t>(p) * ldb + j0;
      const float* __restrict b1 = b0 + ldb;
      const float* __restrict b2 = b1 + ldb;
      const float* __restrict b3 = b2 + ldb;
      for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<std::size_t>(i) * lda + p;
        const float a0 = alpha * arow[0], a1 = alpha * arow[1];
        const float a2 = alpha * arow[2], a3 = alpha * arow[3];
        float* __restrict crow = c + static_cast<std::size_t>(i) * ldc + j0;
        for (int j = 0; j < jn; ++j)
          crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
      }
    }
    for (; p < k; ++p) {
      const float* __restrict brow = b + static_cast<std::size_t>(p) * ldb + j0;
      for (int i = 0; i < m; ++i) {
        const float av = alpha * a[static_cast<std::size_t>(i) * lda + p];
        float* __restrict crow = c + static_cast<std::size_t>(i) * ldc + j0;
        for (int j = 0; j < jn; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

// C(M x N) = alpha * A(M x K) * B(N x K)^T + beta * C, M small
inline void sgemm_nt_small_m(int m, int n, int k, float alpha, const float* a, int lda,
                             const float* b, int ldb, float beta, float* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<std::size_t>(i) * ldc;
    if (beta == 0.0f)
      std::fill(crow, crow + n, 0.0f);
    else if (beta != 1.0f)
      for (int j = 0; j < n; ++j) crow[j] *= beta;
  }
  constexpr int kTile = 4096;
  constexpr int kLanes = 16;  // independent accumulators so the dots vectorize
  for (int p0 = 0; p0 < k; p0 += kTile) {
    const int pn = std::min(k - p0, kTile);
    for (int j = 0; j < n; ++j) {
      const float* __restrict brow = b + static_cast<std::size_t>(j) * ldb + p0;
      int i = 0;
      for (; i + 2 <= m; i += 2) {
        const float* __restrict a0 = a + static_cast<std::size_t>(i) * lda + p0;
        const float* __restrict a1 = a0 + lda;
        float l0[kLanes] = {}, l1[kLanes] = {};
        int p = 0;
        for (; p + kLanes <= pn; p += kLanes)
          for (int u = 0; u < kLanes; ++u) {
            l0[u] += a0[p + u] * brow[p + u];
            l1[u] += a1[p + u] * brow[p + u];
          }
        float acc0 = 0, acc1 = 0;
        for (int u = 0; u < kLanes; ++u) {
          acc0 += l0[u];
          acc1 += l1[u];
        }
        for (; p < pn; ++p) {
          acc0 += a0[p] * brow[p];
          acc1 += a1[p] * brow[p];
        }
        c[static_cast<std::size_t>(i) * ldc + j] += alpha * acc0;
        c[static_cast<std::size_t>(i + 1) * ldc + j] += alpha * acc1;
      }
      for (; i < m; ++i) {
        const float* __restrict arow = a + static_cast<std::size_t>(i) * lda + p0;
        float lanes[kLanes] = {};
        int p = 0;
        for (; p + kLanes <= pn; p += kLanes)
          for (int u = 0; u < kLanes; ++u) lanes[u] += arow[p + u] * brow[p + u];
        float acc = 0;
        for (int u = 0; u < kLanes; ++u) acc += lanes[u];
        for (; p < pn; ++p) acc += arow[p] * brow[p];
        c[static_cast<std::size_t>(i) * ldc + j] += alpha * acc;
      }
    }
  }
}

// C(M x N) = alpha * A(K x M)^T * B(K x N) + beta * C, K small
inline void sgemm_tn_small_k(int m, int n, int k, float alpha, const float* a, int lda,
                             const float* b, int ldb, float beta, float* c, int ldc) {
  constexpr int kTile = 2048;
  for (int j0 = 0; j0 < n; j0 += kTile) {
    const int jn = std::min(n - j0, kTile);
    for (int i = 0; i < m; ++i) {
      float* __restrict crow = c + static_cast<std::size_t>(i) * ldc + j0;
      if (beta == 0.0f)
        std::fill(crow, crow + jn, 0.0f);
      else if (beta != 1.0f)
        for (int j = 0; j < jn; ++j) crow[j] *= beta;
      int p = 0;
      for (; p + 4 <= k; p += 4) {
        const float a0 = alpha * a[static_cast<std::size_t>(p) * lda + i];
        const float a1 = alpha * a[static_cast<std::size_t>(p + 1) * lda + i];
        const float a2 = alpha * a[static_cast<std::size_t>(p + 2) * lda + i];
        const float a3 = alpha * a[static_cast<std::size_t>(p + 3) * lda + i];
        const float* __restrict b0 = b + static_cast<std::size_t>(p) * ldb + j0;
        const float* __restrict b1 = b0 + ldb;
        const float* __restrict b2 = b1 + ldb;
        const float* __restrict b3 = b2 + ldb;
        for (int j = 0; j < jn; ++j)
          crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
      }
      for (; p < k; ++p) {
        const float av = alpha * a[static_cast<std::size_t>(p) * lda + i];
        const float* __restrict brow = b + static_cast<std::size_t>(p) * ldb + j0;
        for (int j = 0; j < jn; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

}  // namespace gemm_detail

inline void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta, float* c,
                 int ldc) {
  // dispatch thresholds picked by measurement on the layer shapes this model
  // produces; the vendor kernels win everywhere else
  if (ta == CblasNoTrans && tb == CblasNoTrans && (m <= 8 || (m <= 16 && n >= 32768)))
    return gemm_detail::sgemm_nn_small_m(m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  if (ta == CblasNoTrans && tb == CblasTrans && m == 1)
    return gemm_detail::sgemm_nt_small_m(m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  if (ta == CblasTrans && tb == CblasNoTrans && k <= 8)
    return gemm_detail::sgemm_tn_small_k(m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

// Row-major double GEMM with plain vectorizable loops. The system dgemm
// returns wrong results for a range of shapes on some AVX-512 builds (the
// float kernels are fine; see the blas consistency test), and the double path
// only serves gradient-check mode, so a local kernel is used instead.
inline void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb, double beta, double* c,
                 int ldc) {
  for (int i = 0; i < m; ++i) {
    double* crow = c + static_cast<std::size_t>(i) * ldc;
    if (beta == 0.0)
      std::fill(crow, crow + n, 0.0);
    else if (beta != 1.0)
      for (int j = 0; j < n; ++j) crow[j] *= beta;
  }
  if (tb == CblasNoTrans && (ta == CblasNoTrans || ta == CblasTrans)) {
    // both saxpy-style forms walk B rows contiguously; process four k-slices
    // per pass so each C row is streamed once per group
    auto a_at = [&](int i, int p) {
      return ta == CblasNoTrans ? a[static_cast<std::size_t>(i) * lda + p]
                                : a[static_cast<std::size_t>(p) * lda + i];
    };
    for (int i = 0; i < m; ++i) {
      double* __restrict crow = c + static_cast<std::size_t>(i) * ldc;
      int p = 0;
      for (; p + 4 <= k; p += 4) {
        const double a0 = alpha * a_at(i, p), a1 = alpha * a_at(i, p + 1);
        const double a2 = alpha * a_at(i, p + 2), a3 = alpha * a_at(i, p + 3);
        const double* __restrict b0 = b + static_cast<std::size_t>(p) * ldb;
        const double* __restrict b1 = b0 + ldb;
        const double* __restrict b2 = b1 + ldb;
        const double* __restrict b3 = b2 + ldb;
        for (int j = 0; j < n; ++j) crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
      }
      for (; p < k; ++p) {
        const double av = alpha * a_at(i, p);
        const double* __restrict brow = b + static_cast<std::size_t>(p) * ldb;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (ta == CblasNoTrans && tb == CblasTrans) {
    for (int i = 0; i < m; ++i) {
      const double* arow = a + static_cast<std::size_t>(i) * lda;
      double* crow = c + static_cast<std::size_t>(i) * ldc;
      for (int j = 0; j < n; ++j) {
        const double* brow = b + static_cast<std::size_t>(j) * ldb;
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] += alpha * acc;
      }
    }
  } else {
    for (int i = 0; i < m; ++i) {
      double* crow = c + static_cast<std::size_t>(i) * ldc;
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int p = 0; p < k; ++p)
          acc += a[static_cast<std::size_t>(p) * lda + i] * b[static_cast<std::size_t>(j) * ldb + p];
        crow[j] += alpha * acc;
      }
    }
  }
}

// Rectangle in crop coordinates covered by coordinate channels.
struct Region {
  double x0 = 0, y0 = 0, x1 = 1, y1 = 1;
};

inline constexpr double kBatchNormEps = 1e-5;

// Define-by-run reverse-mode graph over Pool-backed tensors. Nodes are
// created in topological order; backward walks them in reverse. Parameter
// leaves alias their Param's storage, so gradients accumulate straight into
// Param::grad until ParamStore::zero_grad.
template <class T>
class Graph {
 public:
  using Var = int;

  struct Node {
    Shape shape;
    T* v = nullptr;
    T* g = nullptr;
    bool requires_grad = false;
    bool owns_grad = true;  // false for param leaves (grad lives in the Param)
    std::function<void(Graph&)> backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void reset() {
    nodes_.clear();
    pool_.release_all();
  }

  int size() const { return static_cast<int>(nodes_.size()); }
  Shape shape(Var id) const { return nodes_[static_cast<std::size_t>(id)].shape; }
  const T* value(Var id) const { return nodes_[static_cast<std::size_t>(id)].v; }
  T* mutable_value(Var id) { return nodes_[static_cast<std::size_t>(id)].v; }
  const T* grad(Var id) const { return nodes_[static_cast<std::size_t>(id)].g; }
  T scalar_value(Var id) const {
    if (!shape(id).scalar()) throw NotScalar("scalar_value on " + shape(id).str());
    return nodes_[static_cast<std::size_t>(id)].v[0];
  }

  Var constant(const Shape& s, const T* data = nullptr) {
    Var id = new_node(s, false);
    if (data) std::memcpy(node(id).v, data, sizeof(T) * s.size());
    return id;
  }

  Var param(Param<T>& p) {
    Var id = static_cast<Var>(nodes_.size());
    Node nd;
    nd.shape = p.shape;
    nd.v = p.value.data();
    nd.g = p.trainable ? p.grad.data() : nullptr;
    nd.requires_grad = p.trainable;
    nd.owns_grad = false;
    nodes_.push_back(std::move(nd));
    return id;
  }

  // --- convolution -------------------------------------------------------

  // Stride-1 cross-correlation with zero 'same' padding and square dilation.
  // x: (C, N, H, W), w: (Co, C, kh, kw), bias: (1, Co).
  Var conv2d(Var x, Var w, Var bias, int dilation) {
    const Shape& xs = shape(x);
    const Shape& ws = shape(w);
    require(xs.kind == Shape::Kind::P4 && ws.kind == Shape::Kind::P4, "conv2d layout");
    require(ws.d1 == xs.d0, "conv2d channel mismatch: x " + xs.str() + " w " + ws.str());
    require(shape(bias) == Shape::mat(1, ws.d0), "conv2d bias shape");
    require(ws.d2 % 2 == 1 && ws.d3 % 2 == 1, "conv2d kernels must be odd");
    const int C = xs.d0, N = xs.d1, H = xs.d2, W = xs.d3;
    const int Co = ws.d0, kh = ws.d2, kw = ws.d3;
    const int R = C * kh * kw;
    const std::size_t ncol = static_cast<std::size_t>(N) * H * W;
    const bool pointwise = kh == 1 && kw == 1;  // the lowered matrix is x itself

    T* col;
    if (pointwise) {
      col = const_cast<T*>(value(x));
    } else {
      col = pool_.get(static_cast<std::size_t>(R) * ncol);
      im2col(value(x), col, C, N, H, W, kh, kw, dilation);
    }

    Var out = new_node(Shape::p4(Co, N, H, W), needs_grad(x) || needs_grad(w) || needs_grad(bias));
    gemm(CblasNoTrans, CblasNoTrans, Co, static_cast<int>(ncol), R, T(1), value(w), R, col,
         static_cast<int>(ncol), T(0), node(out).v, static_cast<int>(ncol));
    for (int co = 0; co < Co; ++co) {
      const T bv = value(bias)[co];
      T* row = node(out).v + static_cast<std::size_t>(co) * ncol;
      for (std::size_t j = 0; j < ncol; ++j) row[j] += bv;
    }

    node(out).backward = [x, w, bias, out, col, C, N, H, W, Co, kh, kw, R, ncol, dilation,
                          pointwise](Graph& g) {
      const T* dy = g.node(out).g;
      if (g.needs_grad(w)) {
        g.ensure_grad(w);
        gemm(CblasNoTrans, CblasTrans, Co, R, static_cast<int>(ncol), T(1), dy,
             static_cast<int>(ncol), col, static_cast<int>(ncol), T(1), g.node(w).g, R);
      }
      if (g.needs_grad(bias)) {
        g.ensure_grad(bias);
        for (int co = 0; co < Co; ++co) {
          T acc = 0;
          const T* row = dy + static_cast<std::size_t>(co) * ncol;
          for (std::size_t j = 0; j < ncol; ++j) acc += row[j];
          g.node(bias).g[co] += acc;
        }
      }
      if (g.needs_grad(x)) {
        if (pointwise) {
          bool fresh = false;
          T* dx = g.grad_sink(x, &fresh);
          gemm(CblasTrans, CblasNoTrans, R, static_cast<int>(ncol), Co, T(1), g.value(w), R, dy,
               static_cast<int>(ncol), fresh ? T(0) : T(1), dx, static_cast<int>(ncol));
        } else {
          g.ensure_grad(x);
          T* gcol = g.pool_.get(static_cast<std::size_t>(R) * ncol);
          gemm(CblasTrans, CblasNoTrans, R, static_cast<int>(ncol), Co, T(1), g.value(w), R, dy,
               static_cast<int>(ncol), T(0), gcol, static_cast<int>(ncol));
          g.col2im_add(gcol, g.node(x).g, C, N, H, W, kh, kw, dilation);
        }
      }
    };
    return out;
  }

  // 2x2 mean pooling, stride 2
  Var avg_pool2(Var x) {
    const Shape& xs = shape(x);
    require(xs.kind == Shape::Kind::P4, "avg_pool2 layout");
    require(xs.d2 % 2 == 0 && xs.d3 % 2 == 0, "avg_pool2 needs even spatial dims");
    const int C = xs.d0, N = xs.d1, H = xs.d2, W = xs.d3;
    const int Ho = H / 2, Wo = W / 2;
    Var out = new_node(Shape::p4(C, N, Ho, Wo), needs_grad(x));
    const T* xv = value(x);
    T* yv = node(out).v;
    for (int p = 0; p < C * N; ++p)
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          const T* r0 = xv + ((static_cast<std::size_t>(p) * H) + 2 * i) * W + 2 * j;
          const T* r1 = r0 + W;
          yv[((static_cast<std::size_t>(p) * Ho) + i) * Wo + j] =
              (r0[0] + r0[1] + r1[0] + r1[1]) * T(0.25);
        }
    node(out).backward = [x, out, C, N, H, W, Ho, Wo](Graph& g) {
      if (!g.needs_grad(x)) return;
      const T* dy = g.node(out).g;
      bool fresh = false;
      T* dx = g.grad_sink(x, &fresh);
      for (int p = 0; p < C * N; ++p)
        for (int i = 0; i < Ho; ++i)
          for (int j = 0; j < Wo; ++j) {
            const T v = dy[((static_cast<std::size_t>(p) * Ho) + i) * Wo + j] * T(0.25);
            T* r0 = dx + ((static_cast<std::size_t>(p) * H) + 2 * i) * W + 2 * j;
            T* r1 = r0 + W;
            if (fresh) {
              r0[0] = v; r0[1] = v; r1[0] = v; r1[1] = v;
            } else {
              r0[0] += v; r0[1] += v; r1[0] += v; r1[1] += v;
            }
          }
    };
    return out;
  }

  // x: (N, Fin), w: (Fin, Fout), bias: (1, Fout)
  Var dense(Var x, Var w, Var bias) {
    const Shape& xs = shape(x);
    const Shape& ws = shape(w);
    require(xs.kind == Shape::Kind::Mat && ws.kind == Shape::Kind::Mat, "dense layout");
    require(xs.d1 == ws.d0, "dense inner dims: x " + xs.str() + " w " + ws.str());
    require(shape(bias) == Shape::mat(1, ws.d1), "dense bias shape");
    const int N = xs.d0, Fin = xs.d1, Fout = ws.d1;
    Var out = new_node(Shape::mat(N, Fout), needs_grad(x) || needs_grad(w) || needs_grad(bias));
    gemm(CblasNoTrans, CblasNoTrans, N, Fout, Fin, T(1), value(x), Fin, value(w), Fout, T(0),
         node(out).v, Fout);
    for (int r = 0; r < N; ++r) {
      T* row = node(out).v + static_cast<std::size_t>(r) * Fout;
      const T* b = value(bias);
      for (int j = 0; j < Fout; ++j) row[j] += b[j];
    }
    node(out).backward = [x, w, bias, out, N, Fin, Fout](Graph& g) {
      const T* dy = g.node(out).g;
      if (g.needs_grad(w)) {
        g.ensure_grad(w);
        gemm(CblasTrans, CblasNoTrans, Fin, Fout, N, T(1), g.value(x), Fin, dy, Fout, T(1),
             g.node(w).g, Fout);
      }
      if (g.needs_grad(bias)) {
        g.ensure_grad(bias);
        T* db = g.node(bias).g;
        for (int r = 0; r < N; ++r) {
          const T* row = dy + static_cast<std::size_t>(r) * Fout;
          for (int j = 0; j < Fout; ++j) db[j] += row[j];
        }
      }
      if (g.needs_grad(x)) {
        bool fresh = false;
        T* dx = g.grad_sink(x, &fresh);
        gemm(CblasNoTrans, CblasTrans, N, Fin, Fout, T(1), dy, Fout, g.value(w), Fout,
             fresh ? T(0) : T(1), dx, Fin);
      }
    };
    return out;
  }

  // Per-channel normalization by minibatch statistics (train) or running
  // statistics (infer). Running stats are updated in place in train mode.
  Var batch_norm(Var x, Var gamma, Var beta, Param<T>& run_mean, Param<T>& run_var, bool train,
                 double momentum = 0.99) {
    const Shape& xs = shape(x);
    const int C = xs.kind == Shape::Kind::Mat ? xs.d1 : xs.d0;
    const int batch = xs.kind == Shape::Kind::Mat ? xs.d0 : xs.d1;
    require(shape(gamma) == Shape::mat(1, C) && shape(beta) == Shape::mat(1, C),
            "batch_norm scale/shift shape");
    require(static_cast<int>(run_mean.value.size()) == C &&
                static_cast<int>(run_var.value.size()) == C,
            "batch_norm running stats shape");
    if (train && batch < 2) throw DegenerateBatch("batch_norm needs batch >= 2 in train mode");

    Var out = new_node(xs, needs_grad(x) || needs_grad(gamma) || needs_grad(beta));
    T* xhat = pool_.get(xs.size());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(C));

    const T* xv = value(x);
    T* yv = node(out).v;
    const T* gv = value(gamma);
    const T* bv = value(beta);

    for (int c = 0; c < C; ++c) {
      T mu, var;
      if (train) {
        accumulate_stats(xv, xs, c, &mu, &var);
        run_mean.value[static_cast<std::size_t>(c)] =
            T(momentum) * run_mean.value[static_cast<std::size_t>(c)] + T(1 - momentum) * mu;
        run_var.value[static_cast<std::size_t>(c)] =
            T(momentum) * run_var.value[static_cast<std::size_t>(c)] + T(1 - momentum) * var;
      } else {
        mu = run_mean.value[static_cast<std::size_t>(c)];
        var = run_var.value[static_cast<std::size_t>(c)];
      }
      const T inv = T(1) / std::sqrt(var + T(kBatchNormEps));
      (*inv_std)[static_cast<std::size_t>(c)] = inv;
      for_channel(xs, c, [&](std::size_t k) {
        const T xh = (xv[k] - mu) * inv;
        xhat[k] = xh;
        yv[k] = gv[c] * xh + bv[c];
      });
    }

    node(out).backward = [x, gamma, beta, out, xhat, inv_std, C, train](Graph& g) {
      const Shape xs2 = g.shape(x);
      const T* dy = g.node(out).g;
      const double m = static_cast<double>(xs2.size()) / C;
      T* dx = nullptr;
      bool fresh = false;
      if (g.needs_grad(x)) dx = g.grad_sink(x, &fresh);
      for (int c = 0; c < C; ++c) {
        T s1 = 0, s2 = 0;
        g.for_channel(xs2, c, [&](std::size_t k) {
          s1 += dy[k];
          s2 += dy[k] * xhat[k];
        });
        if (g.needs_grad(gamma)) {
          g.ensure_grad(gamma);
          g.node(gamma).g[c] += s2;
        }
        if (g.needs_grad(beta)) {
          g.ensure_grad(beta);
          g.node(beta).g[c] += s1;
        }
        if (dx) {
          const T gm = g.value(gamma)[c];
          const T inv = (*inv_std)[static_cast<std::size_t>(c)];
          if (train) {
            const T a = s1 / T(m), b = s2 / T(m);
            if (fresh)
              g.for_channel(xs2, c,
                            [&](std::size_t k) { dx[k] = gm * inv * (dy[k] - a - xhat[k] * b); });
            else
              g.for_channel(xs2, c,
                            [&](std::size_t k) { dx[k] += gm * inv * (dy[k] - a - xhat[k] * b); });
          } else {
            if (fresh)
              g.for_channel(xs2, c, [&](std::size_t k) { dx[k] = gm * inv * dy[k]; });
            else
              g.for_channel(xs2, c, [&](std::size_t k) { dx[k] += gm * inv * dy[k]; });
          }
        }
      }
    };
    return out;
  }

  // --- elementwise activations -------------------------------------------

  Var relu(Var x) {
    Var out = unary(x, [](T v) { return v > T(0) ? v : T(0); });
    node(out).backward = [x, out](Graph& g) {
      if (!g.needs_grad(x)) return;
      const T* xv = g.value(x);
      const T* dy = g.node(out).g;
      bool fresh = false;
      T* dx = g.grad_sink(x, &fresh);
      const std::size_t n = g.shape(x).size();
      if (fresh)
        for (std::size_t k = 0; k < n; ++k) dx[k] = xv[k] > T(0) ? dy[k] : T(0);
      else
        for (std::size_t k = 0; k < n; ++k) dx[k] += xv[k] > T(0) ? dy[k] : T(0);
    };
    return out;
  }

  Var tanh_(Var x) {
    Var out = unary(x, [](T v) { return std::tanh(v); });
    node(out).backward = [x, out](Graph& g) {
      if (!g.needs_grad(x)) return;
      const T* yv = g.value(out);
      const T* dy = g.node(out).g;
      bool fresh = false;
      T* dx = g.grad_sink(x, &fresh);
      const std::size_t n = g.shape(x).size();
      if (fresh)
        for (std::size_t k = 0; k < n; ++k) dx[k] = dy[k] * (T(1) - yv[k] * yv[k]);
      else
        for (std::size_t k = 0; k < n; ++k) dx[k] += dy[k] * (T(1) - yv[k] * yv[k]);
    };
    return out;
  }

  Var sigmoid(Var x) {
    Var out = unary(x, [](T v) {
      return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
    });
    node(out).backward = [x, out](Graph& g) {
      if (!g.needs_grad(x)) return;
      const T* yv = g.value(out);
      const T* dy = g.node(out).g;
      bool fresh = false;
      T* dx = g.grad_sink(x, &fresh);
      const std::size_t n = g.shape(x).size();
      if (fresh)
        for (std::size_t k = 0; k < n; ++k) dx[k] = dy[k] * yv[k] * (T(1) - yv[k]);
      else
        for (std::size_t k = 0; k < n; ++k) dx[k] += dy[k] * yv[k] * (T(1) - yv[k]);
    };
    return out;
  }

  // --- structural ops ------------------------------------------------------

  // Appends two constant channels holding the x and y crop coordinates of
  // pixel centers, spanning `region`. No gradient flows into them.
  Var coord_concat(Var x, const Region& region) {
    const Shape& xs = shape(x);
    require(xs.kind == Shape::Kind::P4, "coord_concat layout");
    const int C = xs.d0, N = xs.d1, H = xs.d2, W = xs.d3;
    Var out = new_node(Shape::p4(C + 2, N, H, W), needs_grad(x));
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t chunk = static_cast<std::size_t>(N) * plane;
    std::memcpy(node(out).v, value(x), sizeof(T) * xs.size());
    T* xc = node(out).v + static_cast<std::size_t>(C) * chunk;
    T* yc = xc + chunk;
    for (int r = 0; r < H; ++r)
      for (int j = 0; j < W; ++j) {
        // storage row 0 is the top row; math y counts from the bottom
        xc[static_cast<std::size_t>(r) * W + j] =
            T(region.x0 + (j + 0.5) * (region.x1 - region.x0) / W);
        yc[static_cast<std::size_t>(r) * W + j] =
            T(region.y0 + (H - 1 - r + 0.5) * (region.y1 - region.y0) / H);
      }
    for (int n = 1; n < N; ++n) {
      std::memcpy(xc + static_cast<std::size_t>(n) * plane, xc, sizeof(T) * plane);
      std::memcpy(yc + static_cast<std::size_t>(n) * plane, yc, sizeof(T) * plane);
    }
    node(out).backward = [x, out](Graph& g) {
      // the first C channel chunks of the output alias the input layout
      if (!g.needs_grad(x)) return;
      const T* dy = g.node(out).g;
      bool fresh = false;
      T* dx = g.grad_sink(x, &fresh);
      const std::size_t n = g.shape(x).size();
      if (fresh)
        std::memcpy(dx, dy, sizeof(T) * n);
      else
        for (std::size_t k = 0; k < n; ++k) dx[k] += dy[k];
    };
    return out;
  }

  // Broadcast a feature vector to a square spatial map: (N, F) -> (F, N, s, s).
  Var tile_latent(Var x, int size) {
    const Shape& xs = shape(x);
    require(xs.kind == Shape::Kind::Mat, "tile_latent layout");
    const int N = xs.d0, F = xs.d1;
    Var out = new_node(Shape::p4(F, N, size, size), needs_grad(x));
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    const T* xv = value(x);
    T* yv = node(out).v;
    for (int f = 0; f < F; ++f)
      for (int n = 0; n < N; ++n) {
        T* dst = yv + (static_cast<std::size_t>(f) * N + n) * plane;
        const T v = xv[static_cast<std::size_t>(n) * F + f];
        for (std::size_t k = 0; k < plane; ++k) dst[k] = v;
      }
    node(out).backward = [x, out, N, F, plane](Graph& g) {
      if (!g.needs_grad(x)) return;
      const T* dy = g.node(out).g;
      bool fresh = false;
      T* dx = g.grad_sink(x, &fresh);
      for (int f = 0; f < F; ++f)
        for (int n = 0; n < N; ++n) {
          const T* src = dy + (static_cast<std::size_t>(f) * N + n) * plane;
          T acc = 0;
          for (std::size_t k = 0; k < plane; ++k) acc += src[k];
          if (fresh)
            dx[static_cast<std::size_t>(n) * F + f] = acc;
          else
            dx[static_cast<std::size_t>(n) * F + f] += acc;
        }
    };
    return out;
  }

  // (C, N, h, w) -> (N, C*h*w), channel-major row-major feature order
  Var flatten(Var x) {
    const Shape& xs = shape(x);
    require(xs.kind == Shape::Kind::P4, "flatten layout");
    const int C = xs.d0, N = xs.d1;
    const std::size_t plane = static_cast<std::size_t>(xs.d2) * xs.d3;
    const int F = static_cast<int>(C * plane);
    Var out = new_node(Shape::mat(N, F), needs_grad(x));
    const T* xv = value(x);
    T* yv = node(out).v;
    for (int c = 0; c < C; ++c)
      for (int n = 0; n < N; ++n)
        std::memcpy(yv + static_cast<std::size_t>(n) * F + c * plane,
                    xv + (static_cast<std::size_t>(c) * N + n) * plane, sizeof(T) * plane);
    node(out).backward = [x, out, C, N, F, plane](Graph& g) {
      if (!g.needs_grad(x)) return;
      const T* dy = g.node(out).g;
      bool fresh = false;
      T* dx = g.grad_sink(x, &fresh);
      for (int c = 0; c < C; ++c)
        for (int n = 0; n < N; ++n) {
          const T* src = dy + static_cast<std::size_t>(n) * F + c * plane;
          T* dst = dx + (static_cast<std::size_t>(c) * N + n) * plane;
          if (fresh)
            std::memcpy(dst, src, sizeof(T) * plane);
          else
            for (std::size_t k = 0; k < plane; ++k) dst[k] += src[k];
        }
    };
    return out;
  }

  // (B, n*np) -> (n*B, np): container i of sample b lands in row i*B + b, so
  // each container's rows form one contiguous block.
  Var fold_containers(Var z, int n) {
    const Shape& zs = shape(z);
    require(zs.kind == Shape::Kind::Mat && zs.d1 % n == 0, "fold_containers layout");
    const int B = zs.d0, np = zs.d1 / n;
    Var out = new_node(Shape::mat(n * B, np), needs_grad(z));
    const T* zv = value(z);
    T* yv = node(out).v;
    for (int i = 0; i < n; ++i)
      for (int b = 0; b < B; ++b)
        std::memcpy(yv + (static_cast<std::size_t>(i) * B + b) * np,
                    zv + static_cast<std::size_t>(b) * (n * np) + i * np, sizeof(T) * np);
    node(out).backward = [z, out, n, B, np](Graph& g) {
      if (!g.needs_grad(z)) return;
      const T* dy = g.node(out).g;
      bool fresh = false;
      T* dz = g.grad_sink(z, &fresh);
      for (int i = 0; i < n; ++i)
        for (int b = 0; b < B; ++b) {
          const T* src = dy + (static_cast<std::size_t>(i) * B + b) * np;
          T* dst = dz + static_cast<std::size_t>(b) * (n * np) + i * np;
          if (fresh)
            for (int k = 0; k < np; ++k) dst[k] = src[k];
          else
            for (int k = 0; k < np; ++k) dst[k] += src[k];
        }
    };
    return out;
  }

  // Batch-range view copy: (C, N, H, W) -> (C, count, H, W)
  Var slice_batch(Var x, int start, int count) {
    const Shape& xs = shape(x);
    require(xs.kind == Shape::Kind::P4 && start >= 0 && start + count <= xs.d1,
            "slice_batch range");
    const int C = xs.d0, N = xs.d1;
    const std::size_t plane = static_cast<std::size_t>(xs.d2) * xs.d3;
    Var out = new_node(Shape::p4(C, count, xs.d2, xs.d3), needs_grad(x));
    for (int c = 0; c < C; ++c)
      std::memcpy(node(out).v + static_cast<std::size_t>(c) * count * plane,
                  value(x) + (static_cast<std::size_t>(c) * N + start) * plane,
                  sizeof(T) * count * plane);
    node(out).backward = [x, out, C, N, start, count, plane](Graph& g) {
      if (!g.needs_grad(x)) return;
      g.ensure_grad(x);
      const T* dy = g.node(out).g;
      T* dx = g.node(x).g;
      for (int c = 0; c < C; ++c) {
        const T* src = dy + static_cast<std::size_t>(c) * count * plane;
        T* dst = dx + (static_cast<std::size_t>(c) * N + start) * plane;
        for (std::size_t k = 0; k < static_cast<std::size_t>(count) * plane; ++k)
          dst[k] += src[k];
      }
    };
    return out;
  }

  // Elementwise maximum over equally shaped blocks; ties route the gradient
  // to the lowest block index.
  Var max_merge(const std::vector<Var>& blocks) {
    if (blocks.empty()) throw EmptyList("max_merge needs at least one block");
    const Shape s = shape(blocks[0]);
    bool any_grad = false;
    for (Var b : blocks) {
      require(shape(b) == s, "max_merge block shapes differ");
      any_grad = any_grad || needs_grad(b);
    }
    Var out = new_node(s, any_grad);
    const std::size_t n = s.size();
    auto arg = std::make_shared<std::vector<unsigned char>>(n, 0);
    std::memcpy(node(out).v, value(blocks[0]), sizeof(T) * n);
    for (std::size_t bi = 1; bi < blocks.size(); ++bi) {
      const T* bv = value(blocks[static_cast<int>(bi)]);
      T* yv = node(out).v;
      for (std::size_t k = 0; k < n; ++k)
        if (bv[k] > yv[k]) {
          yv[k] = bv[k];
          (*arg)[k] = static_cast<unsigned char>(bi);
        }
    }
    auto blocks_copy = blocks;
    node(out).backward = [blocks_copy, out, arg, n](Graph& g) {
      const T* dy = g.node(out).g;
      for (std::size_t bi = 0; bi < blocks_copy.size(); ++bi) {
        const Var b = blocks_copy[bi];
        if (!g.needs_grad(b)) continue;
        bool fresh = false;
        T* db = g.grad_sink(b, &fresh);
        if (fresh)
          for (std::size_t k = 0; k < n; ++k) db[k] = (*arg)[k] == bi ? dy[k] : T(0);
        else
          for (std::size_t k = 0; k < n; ++k)
            if ((*arg)[k] == bi) db[k] += dy[k];
      }
    };
    return out;
  }

  Var gather_cols(Var x, std::vector<int> cols) {
    const Shape& xs = shape(x);
    require(xs.kind == Shape::Kind::Mat, "gather_cols layout");
    for (int c : cols) require(c >= 0 && c < xs.d1, "gather_cols index");
    const int N = xs.d0, F = xs.d1, K = static_cast<int>(cols.size());
    Var out = new_node(Shape::mat(N, K), needs_grad(x));
    const T* xv = value(x);
    T* yv = node(out).v;
    for (int r = 0; r < N; ++r)
      for (int k = 0; k < K; ++k)
        yv[static_cast<std::size_t>(r) * K + k] =
            xv[static_cast<std::size_t>(r) * F + cols[static_cast<std::size_t>(k)]];
    node(out).backward = [x, out, cols, N, F, K](Graph& g) {
      if (!g.needs_grad(x)) return;
      g.ensure_grad(x);
      const T* dy = g.node(out).g;
      T* dx = g.node(x).g;
      for (int r = 0; r < N; ++r)
        for (int k = 0; k < K; ++k)
          dx[static_cast<std::size_t>(r) * F + cols[static_cast<std::size_t>(k)]] +=
              dy[static_cast<std::size_t>(r) * K + k];
    };
    return out;
  }

  // Coherent latent-space transformation of all containers, one xi per
  // sample. rand4 feeds the disabled-container randomization (activation
  // models; may be empty otherwise). The Jacobian of each container map is
  // taken with dual numbers in the backward pass.
  Var latent_transform(Var z, const geometry::ModelConfig& cfg,
                       std::vector<geometry::TransformParams> xi, std::vector<double> rand4) {
    const Shape& zs = shape(z);
    const int np = cfg.n_p();
    require(zs.kind == Shape::Kind::Mat && zs.d1 == cfg.n * np, "latent_transform layout");
    const int B = zs.d0, n = cfg.n;
    require(static_cast<int>(xi.size()) == B, "latent_transform xi count");
    if (cfg.has_activation())
      require(static_cast<int>(rand4.size()) == B * n * 4, "latent_transform rand4 size");

    Var out = new_node(zs, needs_grad(z));
    static const double zeros[4] = {0, 0, 0, 0};
    auto xi_ptr = std::make_shared<std::vector<geometry::TransformParams>>(std::move(xi));
    auto rand_ptr = std::make_shared<std::vector<double>>(std::move(rand4));
    const T* zv = value(z);
    T* yv = node(out).v;
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < n; ++i) {
        double in[5], outv[5];
        for (int k = 0; k < np; ++k)
          in[k] = static_cast<double>(zv[static_cast<std::size_t>(b) * (n * np) + i * np + k]);
        const double* r4 =
            rand_ptr->empty() ? zeros : rand_ptr->data() + (static_cast<std::size_t>(b) * n + i) * 4;
        geometry::detail::transform_container(cfg, (*xi_ptr)[static_cast<std::size_t>(b)], i, in,
                                              outv, r4);
        for (int k = 0; k < np; ++k)
          yv[static_cast<std::size_t>(b) * (n * np) + i * np + k] = static_cast<T>(outv[k]);
      }

    node(out).backward = [z, out, xi_ptr, rand_ptr, B, n, np, cfg](Graph& g) {
      if (!g.needs_grad(z)) return;
      const T* zv2 = g.value(z);
      const T* dy = g.node(out).g;
      bool fresh = false;
      T* dz = g.grad_sink(z, &fresh);
      if (fresh) std::fill(dz, dz + g.shape(z).size(), T(0));
      static const double zeroes[4] = {0, 0, 0, 0};
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < n; ++i) {
          Dual<5> din[5], dout[5];
          const std::size_t base = static_cast<std::size_t>(b) * (n * np) + i * np;
          for (int k = 0; k < np; ++k)
            din[k] = Dual<5>::seeded(static_cast<double>(zv2[base + k]), k);
          const double* r4 = rand_ptr->empty()
                                 ? zeroes
                                 : rand_ptr->data() + (static_cast<std::size_t>(b) * n + i) * 4;
          geometry::detail::transform_container(cfg, (*xi_ptr)[static_cast<std::size_t>(b)], i,
                                                din, dout, r4);
          for (int k = 0; k < np; ++k) {
            double acc = 0;
            for (int j = 0; j < np; ++j)
              acc += static_cast<double>(dy[base + j]) * dout[j].d[k];
            dz[base + k] += static_cast<T>(acc);
          }
        }
    };
    return out;
  }

  // --- losses ---------------------------------------------------------------

  // mean over elements of (lam*a_sig*(c0+t)^2 + (1-lam)*a_l2) * (y-t)^2
  Var loss_image(Var y, Var target, double lam, double c0, double a_sig, double a_l2) {
    const Shape& ys = shape(y);
    require(ys == shape(target), "loss_image shapes: y " + ys.str() + " t " + shape(target).str());
    Var out = new_node(Shape::mat(1, 1), needs_grad(y));
    const std::size_t n = ys.size();
    const T* yv = value(y);
    const T* tv = value(target);
    double acc = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const double t = static_cast<double>(tv[k]);
      const double w = lam * a_sig * (c0 + t) * (c0 + t) + (1.0 - lam) * a_l2;
      const double e = static_cast<double>(yv[k]) - t;
      acc += w * e * e;
    }
    node(out).v[0] = static_cast<T>(acc / static_cast<double>(n));
    node(out).backward = [y, target, out, lam, c0, a_sig, a_l2, n](Graph& g) {
      if (!g.needs_grad(y)) return;
      g.ensure_grad(y);
      const T go = g.node(out).g[0];
      const T* yv2 = g.value(y);
      const T* tv2 = g.value(target);
      T* dyv = g.node(y).g;
      const double inv = 1.0 / static_cast<double>(n);
      for (std::size_t k = 0; k < n; ++k) {
        const double t = static_cast<double>(tv2[k]);
        const double w = lam * a_sig * (c0 + t) * (c0 + t) + (1.0 - lam) * a_l2;
        dyv[k] += static_cast<T>(2.0 * w * (static_cast<double>(yv2[k]) - t) * inv *
                                 static_cast<double>(go));
      }
    };
    return out;
  }

  // alpha * mean_i((abar_i - abar)^2) over per-container minibatch means
  Var loss_unif(Var a, double alpha) {
    const Shape& as = shape(a);
    require(as.kind == Shape::Kind::Mat, "loss_unif layout");
    const int B = as.d0, n = as.d1;
    Var out = new_node(Shape::mat(1, 1), needs_grad(a));
    const T* av = value(a);
    std::vector<double> abar(static_cast<std::size_t>(n), 0.0);
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < n; ++i) abar[static_cast<std::size_t>(i)] += av[static_cast<std::size_t>(b) * n + i];
    double mean = 0;
    for (auto& v : abar) {
      v /= B;
      mean += v;
    }
    mean /= n;
    double acc = 0;
    for (double v : abar) acc += (v - mean) * (v - mean);
    node(out).v[0] = static_cast<T>(alpha * acc / n);
    node(out).backward = [a, out, alpha, B, n, abar, mean](Graph& g) {
      if (!g.needs_grad(a)) return;
      g.ensure_grad(a);
      const T go = g.node(out).g[0];
      T* da = g.node(a).g;
      for (int i = 0; i < n; ++i) {
        const double d = alpha * 2.0 * (abar[static_cast<std::size_t>(i)] - mean) /
                         (static_cast<double>(n) * B);
        for (int b = 0; b < B; ++b)
          da[static_cast<std::size_t>(b) * n + i] += static_cast<T>(d * static_cast<double>(go));
      }
    };
    return out;
  }

  // alpha * mean(1 - a^2)
  Var loss_bin(Var a, double alpha) {
    Var out = new_node(Shape::mat(1, 1), needs_grad(a));
    const std::size_t n = shape(a).size();
    const T* av = value(a);
    double acc = 0;
    for (std::size_t k = 0; k < n; ++k)
      acc += 1.0 - static_cast<double>(av[k]) * static_cast<double>(av[k]);
    node(out).v[0] = static_cast<T>(alpha * acc / static_cast<double>(n));
    node(out).backward = [a, out, alpha, n](Graph& g) {
      if (!g.needs_grad(a)) return;
      g.ensure_grad(a);
      const T go = g.node(out).g[0];
      const T* av2 = g.value(a);
      T* da = g.node(a).g;
      const double c = -2.0 * alpha / static_cast<double>(n);
      for (std::size_t k = 0; k < n; ++k)
        da[k] += static_cast<T>(c * static_cast<double>(av2[k]) * static_cast<double>(go));
    };
    return out;
  }

  // --- small generic ops (losses sum, tests) --------------------------------

  Var add(Var x, Var y) {
    require(shape(x) == shape(y), "add shapes");
    Var out = new_node(shape(x), needs_grad(x) || needs_grad(y));
    const std::size_t n = shape(x).size();
    for (std::size_t k = 0; k < n; ++k) node(out).v[k] = value(x)[k] + value(y)[k];
    node(out).backward = [x, y, out, n](Graph& g) {
      const T* dy = g.node(out).g;
      for (Var v : {x, y}) {
        if (!g.needs_grad(v)) continue;
        g.ensure_grad(v);
        T* d = g.node(v).g;
        for (std::size_t k = 0; k < n; ++k) d[k] += dy[k];
      }
    };
    return out;
  }

  Var mul(Var x, Var y) {
    require(shape(x) == shape(y), "mul shapes");
    Var out = new_node(shape(x), needs_grad(x) || needs_grad(y));
    const std::size_t n = shape(x).size();
    for (std::size_t k = 0; k < n; ++k) node(out).v[k] = value(x)[k] * value(y)[k];
    node(out).backward = [x, y, out, n](Graph& g) {
      const T* dy = g.node(out).g;
      if (g.needs_grad(x)) {
        g.ensure_grad(x);
        for (std::size_t k = 0; k < n; ++k) g.node(x).g[k] += dy[k] * g.value(y)[k];
      }
      if (g.needs_grad(y)) {
        g.ensure_grad(y);
        for (std::size_t k = 0; k < n; ++k) g.node(y).g[k] += dy[k] * g.value(x)[k];
      }
    };
    return out;
  }

  Var sum(Var x) {
    Var out = new_node(Shape::mat(1, 1), needs_grad(x));
    const std::size_t n = shape(x).size();
    T acc = 0;
    for (std::size_t k = 0; k < n; ++k) acc += value(x)[k];
    node(out).v[0] = acc;
    node(out).backward = [x, out, n](Graph& g) {
      if (!g.needs_grad(x)) return;
      g.ensure_grad(x);
      const T go = g.node(out).g[0];
      T* dx = g.node(x).g;
      for (std::size_t k = 0; k < n; ++k) dx[k] += go;
    };
    return out;
  }

  // --- reverse sweep ---------------------------------------------------------

  void backward(Var loss) {
    Node& ln = node(loss);
    if (!ln.shape.scalar()) throw NotScalar("backward needs a scalar loss, got " + ln.shape.str());
    // fresh sweep: interior grads restart at zero, parameter grads accumulate
    for (auto& nd : nodes_)
      if (nd.g && nd.owns_grad) std::fill(nd.g, nd.g + nd.shape.size(), T(0));
    ensure_grad(loss);
    node(loss).g[0] = T(1);
    for (int id = loss; id >= 0; --id) {
      Node& nd = nodes_[static_cast<std::size_t>(id)];
      if (nd.backward && nd.g) nd.backward(*this);
    }
  }

  bool needs_grad(Var id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  void ensure_grad(Var id) {
    Node& nd = node(id);
    if (nd.g) return;
    nd.g = pool_.get(nd.shape.size());
    std::fill(nd.g, nd.g + nd.shape.size(), T(0));
  }

  // Gradient buffer for accumulation; *fresh reports an uninitialized buffer
  // the caller promises to fully overwrite (first consumer skips a zero-fill
  // pass). Parameter leaves always accumulate.
  T* grad_sink(Var id, bool* fresh) {
    Node& nd = node(id);
    if (nd.g) {
      *fresh = false;
      return nd.g;
    }
    if (!nd.owns_grad) {  // unreachable: param leaves bind g at creation
      ensure_grad(id);
      *fresh = false;
      return nd.g;
    }
    nd.g = pool_.get(nd.shape.size());
    *fresh = true;
    return nd.g;
  }

 private:
  Node& node(Var id) { return nodes_[static_cast<std::size_t>(id)]; }

  Var new_node(const Shape& s, bool req) {
    Node nd;
    nd.shape = s;
    nd.v = pool_.get(s.size());
    nd.requires_grad = req;
    nodes_.push_back(std::move(nd));
    return static_cast<Var>(nodes_.size() - 1);
  }

  template <class F>
  Var unary(Var x, F&& f) {
    Var out = new_node(shape(x), needs_grad(x));
    const std::size_t n = shape(x).size();
    const T* xv = value(x);
    T* yv = node(out).v;
    for (std::size_t k = 0; k < n; ++k) yv[k] = f(xv[k]);
    return out;
  }

  static void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeMismatch(what);
  }

  template <class F>
  void for_channel(const Shape& s, int c, F&& f) {
    if (s.kind == Shape::Kind::P4) {
      const std::size_t chunk = static_cast<std::size_t>(s.d1) * s.d2 * s.d3;
      const std::size_t base = static_cast<std::size_t>(c) * chunk;
      for (std::size_t k = 0; k < chunk; ++k) f(base + k);
    } else {
      for (int r = 0; r < s.d0; ++r) f(static_cast<std::size_t>(r) * s.d1 + c);
    }
  }

  void accumulate_stats(const T* xv, const Shape& s, int c, T* mu, T* var) {
    double sum = 0, sq = 0;
    std::size_t count = 0;
    if (s.kind == Shape::Kind::P4) {
      const std::size_t chunk = static_cast<std::size_t>(s.d1) * s.d2 * s.d3;
      const T* __restrict p = xv + static_cast<std::size_t>(c) * chunk;
      for (std::size_t k = 0; k < chunk; ++k) {
        const double v = static_cast<double>(p[k]);
        sum += v;
        sq += v * v;
      }
      count = chunk;
    } else {
      for (int r = 0; r < s.d0; ++r) {
        const double v = static_cast<double>(xv[static_cast<std::size_t>(r) * s.d1 + c]);
        sum += v;
        sq += v * v;
      }
      count = static_cast<std::size_t>(s.d0);
    }
    const double m = sum / static_cast<double>(count);
    *mu = static_cast<T>(m);
    *var = static_cast<T>(std::max(0.0, sq / static_cast<double>(count) - m * m));
  }

  void im2col(const T* x, T* col, int C, int N, int H, int W, int kh, int kw, int d) {
    const int ch = (kh - 1) / 2, cw = (kw - 1) / 2;
    const std::size_t ncol = static_cast<std::size_t>(N) * H * W;
    for (int c = 0; c < C; ++c)
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) {
          const int r = (c * kh + ky) * kw + kx;
          const int dy = d * (ky - ch), dx = d * (kx - cw);
          T* dst_row = col + static_cast<std::size_t>(r) * ncol;
          for (int n = 0; n < N; ++n)
            for (int y = 0; y < H; ++y) {
              T* dst = dst_row + (static_cast<std::size_t>(n) * H + y) * W;
              const int yin = y + dy;
              if (yin < 0 || yin >= H) {
                std::memset(dst, 0, sizeof(T) * static_cast<std::size_t>(W));
                continue;
              }
              const T* __restrict src = x + ((static_cast<std::size_t>(c) * N + n) * H + yin) * W;
              const int lo = std::max(0, -dx), hi = std::min(W, W - dx);
              // rows are short; inline loops beat memcpy calls here
              for (int j = 0; j < lo; ++j) dst[j] = T(0);
              for (int j = lo; j < hi; ++j) dst[j] = src[j + dx];
              for (int j = std::max(hi, 0); j < W; ++j) dst[j] = T(0);
            }
        }
  }

  void col2im_add(const T* col, T* dx, int C, int N, int H, int W, int kh, int kw, int d) {
    const int ch = (kh - 1) / 2, cw = (kw - 1) / 2;
    const std::size_t ncol = static_cast<std::size_t>(N) * H * W;
    for (int c = 0; c < C; ++c)
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) {
          const int r = (c * kh + ky) * kw + kx;
          const int dy = d * (ky - ch), dxo = d * (kx - cw);
          const T* src_row = col + static_cast<std::size_t>(r) * ncol;
          for (int n = 0; n < N; ++n)
            for (int y = 0; y < H; ++y) {
              const int yin = y + dy;
              if (yin < 0 || yin >= H) continue;
              const T* src = src_row + (static_cast<std::size_t>(n) * H + y) * W;
              T* dst = dx + ((static_cast<std::size_t>(c) * N + n) * H + yin) * W;
              const int lo = std::max(0, -dxo), hi = std::min(W, W - dxo);
              for (int j = lo; j < hi; ++j) dst[j + dxo] += src[j];
            }
        }
  }

  std::vector<Node> nodes_;
  Pool<T> pool_;
};

}  // namespace eqtrack::diff
