#pragma once

// Numeric kernels used by the network. The default implementations are
// OpenMP-parallel (GEMM goes through BLAS); the `serial` namespace holds
// straightforward single-threaded versions that tests and benchmarks compare
// against.

#include "refcut/nn/matrix.hpp"

namespace refcut::nn::kernels {

enum class Trans { No, Yes };

/// C = alpha * op(A) * op(B) + beta * C, all row-major.
template <typename T>
void gemm(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc);

/// Pins BLAS to one thread per call; outer loops provide the parallelism and
/// results stay independent of the worker count.
void configure_blas_threads();

/// y = x * W^T + b with W stored out x in.
template <typename T>
Matrix<T> linear(const Matrix<T>& x, const Matrix<T>& weight, const std::vector<T>& bias);

/// Accumulates dW, db; returns dX unless `need_dx` is false.
template <typename T>
Matrix<T> linear_backward(const Matrix<T>& x, const Matrix<T>& weight, const Matrix<T>& dy,
                          Matrix<T>& dweight, std::vector<T>& dbias, bool need_dx = true);

template <typename T>
struct LayerNormStats {
  std::vector<T> mean;
  std::vector<T> rstd;
};

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const std::vector<T>& gamma, const std::vector<T>& beta,
                     T eps, LayerNormStats<T>* stats);

template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& x, const LayerNormStats<T>& stats,
                              const std::vector<T>& gamma, const Matrix<T>& dy,
                              std::vector<T>& dgamma, std::vector<T>& dbeta);

template <typename T>
Matrix<T> gelu(const Matrix<T>& x);
template <typename T>
Matrix<T> gelu_backward(const Matrix<T>& x, const Matrix<T>& dy);

template <typename T>
Matrix<T> relu(const Matrix<T>& x);
/// Gradient through relu given the relu input.
template <typename T>
Matrix<T> relu_backward(const Matrix<T>& x, const Matrix<T>& dy);

template <typename T>
void softmax_rows(Matrix<T>& x);

/// Multi-head self-attention core on packed [q | k | v] rows (L x 3C).
/// `probs` receives heads x (L x L) attention weights for the backward pass.
template <typename T>
Matrix<T> attention(const Matrix<T>& qkv, int heads, std::vector<Matrix<T>>* probs);

template <typename T>
Matrix<T> attention_backward(const Matrix<T>& qkv, const std::vector<Matrix<T>>& probs,
                             const Matrix<T>& dout, int heads);

/// Bilinear resampling (half-pixel centres) of a channel-last feature map.
template <typename T>
Matrix<T> resize_bilinear(const Matrix<T>& x, int h, int w, int out_h, int out_w);
template <typename T>
Matrix<T> resize_bilinear_backward(const Matrix<T>& dy, int h, int w, int out_h, int out_w);

/// 2x2 average pooling, ceil mode (partial windows average what they cover).
template <typename T>
Matrix<T> avg_pool2(const Matrix<T>& x, int h, int w);
template <typename T>
Matrix<T> avg_pool2_backward(const Matrix<T>& dy, int h, int w);

/// Rows of (h*w) x (4*c) laid out [dy][dx][c] become a (2h*2w) x c map.
template <typename T>
Matrix<T> pixel_shuffle2(const Matrix<T>& x, int h, int w);
template <typename T>
Matrix<T> pixel_unshuffle2(const Matrix<T>& y, int h, int w);

/// 3x3 zero-padded patches: (h*w) x (9*c), laid out [ky][kx][c].
template <typename T>
Matrix<T> im2col3x3(const Matrix<T>& x, int h, int w);
template <typename T>
Matrix<T> col2im3x3(const Matrix<T>& cols, int h, int w, int c);

template <typename T>
void add_row_broadcast(Matrix<T>& x, const std::vector<T>& v);
template <typename T>
std::vector<T> column_sums(const Matrix<T>& x);

namespace serial {

template <typename T>
void gemm(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc);

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const std::vector<T>& gamma, const std::vector<T>& beta,
                     T eps);

template <typename T>
Matrix<T> attention(const Matrix<T>& qkv, int heads);

template <typename T>
Matrix<T> resize_bilinear(const Matrix<T>& x, int h, int w, int out_h, int out_w);

template <typename T>
Matrix<T> im2col3x3(const Matrix<T>& x, int h, int w);

}  // namespace serial
}  // namespace refcut::nn::kernels
