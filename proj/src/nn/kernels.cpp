#include "refcut/nn/kernels.hpp"

#include <cblas.h>

#include <cmath>
#include <numbers>

namespace refcut::nn::kernels {

namespace {

CBLAS_TRANSPOSE to_cblas(Trans t) { return t == Trans::Yes ? CblasTrans : CblasNoTrans; }

void blas_gemm(Trans ta, Trans tb, int m, int n, int k, float alpha, const float* a, int lda,
               const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, to_cblas(ta), to_cblas(tb), m, n, k, alpha, a, lda, b, ldb, beta, c,
              ldc);
}

void blas_gemm(Trans ta, Trans tb, int m, int n, int k, double alpha, const double* a, int lda,
               const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, to_cblas(ta), to_cblas(tb), m, n, k, alpha, a, lda, b, ldb, beta, c,
              ldc);
}

template <typename T>
inline T erf_t(T x) {
  return std::erf(x);
}

}  // namespace

void configure_blas_threads() { openblas_set_num_threads(1); }

template <typename T>
void gemm(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) c[static_cast<std::size_t>(i) * ldc + j] *= beta;
    return;
  }
  blas_gemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <typename T>
Matrix<T> linear(const Matrix<T>& x, const Matrix<T>& weight, const std::vector<T>& bias) {
  require(x.cols == weight.cols, "linear: input width " + std::to_string(x.cols) +
                                     " != weight in-features " + std::to_string(weight.cols));
  require(static_cast<int>(bias.size()) == weight.rows, "linear: bias size mismatch");
  Matrix<T> y(x.rows, weight.rows);
  for (int r = 0; r < y.rows; ++r) std::copy(bias.begin(), bias.end(), y.row(r));
  gemm<T>(Trans::No, Trans::Yes, x.rows, weight.rows, x.cols, T(1), x.data.data(), x.cols,
          weight.data.data(), weight.cols, T(1), y.data.data(), y.cols);
  return y;
}

template <typename T>
Matrix<T> linear_backward(const Matrix<T>& x, const Matrix<T>& weight, const Matrix<T>& dy,
                          Matrix<T>& dweight, std::vector<T>& dbias, bool need_dx) {
  require(dy.rows == x.rows && dy.cols == weight.rows, "linear_backward: dy shape mismatch");
  gemm<T>(Trans::Yes, Trans::No, weight.rows, weight.cols, x.rows, T(1), dy.data.data(), dy.cols,
          x.data.data(), x.cols, T(1), dweight.data.data(), dweight.cols);
  for (int r = 0; r < dy.rows; ++r) {
    const T* row = dy.row(r);
    for (int c = 0; c < dy.cols; ++c) dbias[static_cast<std::size_t>(c)] += row[c];
  }
  if (!need_dx) return {};
  Matrix<T> dx(x.rows, x.cols);
  gemm<T>(Trans::No, Trans::No, dy.rows, weight.cols, dy.cols, T(1), dy.data.data(), dy.cols,
          weight.data.data(), weight.cols, T(0), dx.data.data(), dx.cols);
  return dx;
}

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const std::vector<T>& gamma, const std::vector<T>& beta,
                     T eps, LayerNormStats<T>* stats) {
  require(static_cast<int>(gamma.size()) == x.cols && static_cast<int>(beta.size()) == x.cols,
          "layer_norm: parameter size mismatch");
  Matrix<T> y(x.rows, x.cols);
  if (stats) {
    stats->mean.assign(static_cast<std::size_t>(x.rows), T(0));
    stats->rstd.assign(static_cast<std::size_t>(x.rows), T(0));
  }
#pragma omp parallel for schedule(static)
  for (int r = 0; r < x.rows; ++r) {
    const T* in = x.row(r);
    T mean = 0;
    for (int c = 0; c < x.cols; ++c) mean += in[c];
    mean /= x.cols;
    T var = 0;
    for (int c = 0; c < x.cols; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= x.cols;
    const T rstd = T(1) / std::sqrt(var + eps);
    T* out = y.row(r);
    for (int c = 0; c < x.cols; ++c) out[c] = (in[c] - mean) * rstd * gamma[c] + beta[c];
    if (stats) {
      stats->mean[static_cast<std::size_t>(r)] = mean;
      stats->rstd[static_cast<std::size_t>(r)] = rstd;
    }
  }
  return y;
}

template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& x, const LayerNormStats<T>& stats,
                              const std::vector<T>& gamma, const Matrix<T>& dy,
                              std::vector<T>& dgamma, std::vector<T>& dbeta) {
  Matrix<T> dx(x.rows, x.cols);
  const int n = x.cols;
  std::vector<T> xhat(static_cast<std::size_t>(n)), dxhat(static_cast<std::size_t>(n));
  for (int r = 0; r < x.rows; ++r) {
    const T mean = stats.mean[static_cast<std::size_t>(r)];
    const T rstd = stats.rstd[static_cast<std::size_t>(r)];
    const T* in = x.row(r);
    const T* g = dy.row(r);
    T sum_dxhat = 0, sum_dxhat_xhat = 0;
    for (int c = 0; c < n; ++c) {
      xhat[c] = (in[c] - mean) * rstd;
      dxhat[c] = g[c] * gamma[c];
      dgamma[c] += g[c] * xhat[c];
      dbeta[c] += g[c];
      sum_dxhat += dxhat[c];
      sum_dxhat_xhat += dxhat[c] * xhat[c];
    }
    T* out = dx.row(r);
    for (int c = 0; c < n; ++c) {
      out[c] = rstd * (dxhat[c] - sum_dxhat / n - xhat[c] * sum_dxhat_xhat / n);
    }
  }
  return dx;
}

template <typename T>
Matrix<T> gelu(const Matrix<T>& x) {
  Matrix<T> y(x.rows, x.cols);
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  const std::size_t n = x.size();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x.data[i];
    y.data[i] = T(0.5) * v * (T(1) + erf_t(v * inv_sqrt2));
  }
  return y;
}

template <typename T>
Matrix<T> gelu_backward(const Matrix<T>& x, const Matrix<T>& dy) {
  Matrix<T> dx(x.rows, x.cols);
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  const std::size_t n = x.size();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x.data[i];
    const T cdf = T(0.5) * (T(1) + erf_t(v * inv_sqrt2));
    const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
    dx.data[i] = dy.data[i] * (cdf + v * pdf);
  }
  return dx;
}

template <typename T>
Matrix<T> relu(const Matrix<T>& x) {
  Matrix<T> y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
  return y;
}

template <typename T>
Matrix<T> relu_backward(const Matrix<T>& x, const Matrix<T>& dy) {
  Matrix<T> dx(x.rows, x.cols);
  for (std::size_t i = 0; i < x.size(); ++i) dx.data[i] = x.data[i] > T(0) ? dy.data[i] : T(0);
  return dx;
}

template <typename T>
void softmax_rows(Matrix<T>& x) {
  for (int r = 0; r < x.rows; ++r) {
    T* row = x.row(r);
    const T mx = *std::max_element(row, row + x.cols);
    T sum = 0;
    for (int c = 0; c < x.cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    const T inv = T(1) / sum;
    for (int c = 0; c < x.cols; ++c) row[c] *= inv;
  }
}

template <typename T>
Matrix<T> attention(const Matrix<T>& qkv, int heads, std::vector<Matrix<T>>* probs) {
  require(qkv.cols % 3 == 0, "attention: packed qkv width must be a multiple of 3");
  const int len = qkv.rows;
  const int dim = qkv.cols / 3;
  require(dim % heads == 0, "attention: embed dim not divisible by heads");
  const int head_dim = dim / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  Matrix<T> out(len, dim);
  if (probs) probs->assign(static_cast<std::size_t>(heads), Matrix<T>());
#pragma omp parallel for schedule(static)
  for (int h = 0; h < heads; ++h) {
    const T* q = qkv.data.data() + h * head_dim;
    const T* k = qkv.data.data() + dim + h * head_dim;
    const T* v = qkv.data.data() + 2 * dim + h * head_dim;
    Matrix<T> p(len, len);
    gemm<T>(Trans::No, Trans::Yes, len, len, head_dim, scale, q, qkv.cols, k, qkv.cols, T(0),
            p.data.data(), len);
    softmax_rows(p);
    gemm<T>(Trans::No, Trans::No, len, head_dim, len, T(1), p.data.data(), len, v, qkv.cols, T(0),
            out.data.data() + h * head_dim, dim);
    if (probs) (*probs)[static_cast<std::size_t>(h)] = std::move(p);
  }
  return out;
}

template <typename T>
Matrix<T> attention_backward(const Matrix<T>& qkv, const std::vector<Matrix<T>>& probs,
                             const Matrix<T>& dout, int heads) {
  const int len = qkv.rows;
  const int dim = qkv.cols / 3;
  const int head_dim = dim / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  Matrix<T> dqkv(len, qkv.cols);
#pragma omp parallel for schedule(static)
  for (int h = 0; h < heads; ++h) {
    const Matrix<T>& p = probs[static_cast<std::size_t>(h)];
    const T* q = qkv.data.data() + h * head_dim;
    const T* k = qkv.data.data() + dim + h * head_dim;
    const T* v = qkv.data.data() + 2 * dim + h * head_dim;
    const T* dout_h = dout.data.data() + h * head_dim;
    T* dq = dqkv.data.data() + h * head_dim;
    T* dk = dqkv.data.data() + dim + h * head_dim;
    T* dv = dqkv.data.data() + 2 * dim + h * head_dim;

    gemm<T>(Trans::Yes, Trans::No, len, head_dim, len, T(1), p.data.data(), len, dout_h, dim, T(0),
            dv, qkv.cols);
    Matrix<T> ds(len, len);
    gemm<T>(Trans::No, Trans::Yes, len, len, head_dim, T(1), dout_h, dim, v, qkv.cols, T(0),
            ds.data.data(), len);
    for (int r = 0; r < len; ++r) {
      const T* prow = p.row(r);
      T* srow = ds.row(r);
      T dot = 0;
      for (int c = 0; c < len; ++c) dot += prow[c] * srow[c];
      for (int c = 0; c < len; ++c) srow[c] = prow[c] * (srow[c] - dot);
    }
    gemm<T>(Trans::No, Trans::No, len, head_dim, len, scale, ds.data.data(), len, k, qkv.cols, T(0),
            dq, qkv.cols);
    gemm<T>(Trans::Yes, Trans::No, len, head_dim, len, scale, ds.data.data(), len, q, qkv.cols,
            T(0), dk, qkv.cols);
  }
  return dqkv;
}

namespace {

struct Tap {
  int i0 = 0;
  int i1 = 0;
  double w1 = 0.0;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(int in, int out) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = Tap{i0, i1, src - i0};
  }
  return taps;
}

}  // namespace

template <typename T>
Matrix<T> resize_bilinear(const Matrix<T>& x, int h, int w, int out_h, int out_w) {
  require(x.rows == h * w, "resize_bilinear: grid does not match rows");
  const int c = x.cols;
  if (h == out_h && w == out_w) return x;
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  Matrix<T> y(out_h * out_w, c);
#pragma omp parallel for schedule(static)
  for (int oy = 0; oy < out_h; ++oy) {
    const Tap& a = ty[static_cast<std::size_t>(oy)];
    const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
    for (int ox = 0; ox < out_w; ++ox) {
      const Tap& b = tx[static_cast<std::size_t>(ox)];
      const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
      const T* p00 = x.row(a.i0 * w + b.i0);
      const T* p01 = x.row(a.i0 * w + b.i1);
      const T* p10 = x.row(a.i1 * w + b.i0);
      const T* p11 = x.row(a.i1 * w + b.i1);
      T* out = y.row(oy * out_w + ox);
      for (int ch = 0; ch < c; ++ch) {
        out[ch] = wy0 * (wx0 * p00[ch] + wx1 * p01[ch]) + wy1 * (wx0 * p10[ch] + wx1 * p11[ch]);
      }
    }
  }
  return y;
}

template <typename T>
Matrix<T> resize_bilinear_backward(const Matrix<T>& dy, int h, int w, int out_h, int out_w) {
  if (h == out_h && w == out_w) return dy;
  const int c = dy.cols;
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  Matrix<T> dx(h * w, c);
  // Scatter form; contributions from different outputs collide, so this one stays serial.
  for (int oy = 0; oy < out_h; ++oy) {
    const Tap& a = ty[static_cast<std::size_t>(oy)];
    const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
    for (int ox = 0; ox < out_w; ++ox) {
      const Tap& b = tx[static_cast<std::size_t>(ox)];
      const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
      const T* g = dy.row(oy * out_w + ox);
      T* p00 = dx.row(a.i0 * w + b.i0);
      T* p01 = dx.row(a.i0 * w + b.i1);
      T* p10 = dx.row(a.i1 * w + b.i0);
      T* p11 = dx.row(a.i1 * w + b.i1);
      for (int ch = 0; ch < c; ++ch) {
        p00[ch] += wy0 * wx0 * g[ch];
        p01[ch] += wy0 * wx1 * g[ch];
        p10[ch] += wy1 * wx0 * g[ch];
        p11[ch] += wy1 * wx1 * g[ch];
      }
    }
  }
  return dx;
}

template <typename T>
Matrix<T> avg_pool2(const Matrix<T>& x, int h, int w) {
  require(x.rows == h * w, "avg_pool2: grid does not match rows");
  const int oh = (h + 1) / 2, ow = (w + 1) / 2, c = x.cols;
  Matrix<T> y(oh * ow, c);
#pragma omp parallel for schedule(static)
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      T* out = y.row(oy * ow + ox);
      int n = 0;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          const int iy = 2 * oy + dy, ix = 2 * ox + dx;
          if (iy >= h || ix >= w) continue;
          ++n;
          const T* in = x.row(iy * w + ix);
          for (int ch = 0; ch < c; ++ch) out[ch] += in[ch];
        }
      }
      for (int ch = 0; ch < c; ++ch) out[ch] /= static_cast<T>(n);
    }
  }
  return y;
}

template <typename T>
Matrix<T> avg_pool2_backward(const Matrix<T>& dy, int h, int w) {
  const int ow = (w + 1) / 2, c = dy.cols;
  Matrix<T> dx(h * w, c);
#pragma omp parallel for schedule(static)
  for (int iy = 0; iy < h; ++iy) {
    for (int ix = 0; ix < w; ++ix) {
      const int oy = iy / 2, ox = ix / 2;
      const int n = (std::min(h, 2 * oy + 2) - 2 * oy) * (std::min(w, 2 * ox + 2) - 2 * ox);
      const T* g = dy.row(oy * ow + ox);
      T* out = dx.row(iy * w + ix);
      for (int ch = 0; ch < c; ++ch) out[ch] = g[ch] / static_cast<T>(n);
    }
  }
  return dx;
}

template <typename T>
Matrix<T> pixel_shuffle2(const Matrix<T>& x, int h, int w) {
  require(x.rows == h * w && x.cols % 4 == 0, "pixel_shuffle2: bad input shape");
  const int c = x.cols / 4, ow = 2 * w;
  Matrix<T> y(4 * h * w, c);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const T* in = x.row(i * w + j);
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          std::copy(in + (dy * 2 + dx) * c, in + (dy * 2 + dx + 1) * c,
                    y.row((2 * i + dy) * ow + 2 * j + dx));
    }
  }
  return y;
}

template <typename T>
Matrix<T> pixel_unshuffle2(const Matrix<T>& y, int h, int w) {
  const int c = y.cols, ow = 2 * w;
  Matrix<T> x(h * w, 4 * c);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      T* out = x.row(i * w + j);
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const T* in = y.row((2 * i + dy) * ow + 2 * j + dx);
          std::copy(in, in + c, out + (dy * 2 + dx) * c);
        }
    }
  }
  return x;
}

template <typename T>
Matrix<T> im2col3x3(const Matrix<T>& x, int h, int w) {
  require(x.rows == h * w, "im2col3x3: grid does not match rows");
  const int c = x.cols;
  Matrix<T> cols(h * w, 9 * c);
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      T* out = cols.row(y * w + xx);
      for (int ky = 0; ky < 3; ++ky) {
        const int sy = y + ky - 1;
        for (int kx = 0; kx < 3; ++kx) {
          const int sx = xx + kx - 1;
          if (sy < 0 || sx < 0 || sy >= h || sx >= w) continue;
          const T* in = x.row(sy * w + sx);
          std::copy(in, in + c, out + (ky * 3 + kx) * c);
        }
      }
    }
  }
  return cols;
}

template <typename T>
Matrix<T> col2im3x3(const Matrix<T>& cols, int h, int w, int c) {
  Matrix<T> x(h * w, c);
#pragma omp parallel for schedule(static)
  for (int sy = 0; sy < h; ++sy) {
    for (int sx = 0; sx < w; ++sx) {
      T* out = x.row(sy * w + sx);
      for (int ky = 0; ky < 3; ++ky) {
        const int y = sy - ky + 1;
        for (int kx = 0; kx < 3; ++kx) {
          const int xx = sx - kx + 1;
          if (y < 0 || xx < 0 || y >= h || xx >= w) continue;
          const T* in = cols.row(y * w + xx) + (ky * 3 + kx) * c;
          for (int ch = 0; ch < c; ++ch) out[ch] += in[ch];
        }
      }
    }
  }
  return x;
}

template <typename T>
void add_row_broadcast(Matrix<T>& x, const std::vector<T>& v) {
  require(static_cast<int>(v.size()) == x.cols, "add_row_broadcast: vector length mismatch");
  for (int r = 0; r < x.rows; ++r) {
    T* row = x.row(r);
    for (int c = 0; c < x.cols; ++c) row[c] += v[static_cast<std::size_t>(c)];
  }
}

template <typename T>
std::vector<T> column_sums(const Matrix<T>& x) {
  std::vector<T> s(static_cast<std::size_t>(x.cols), T(0));
  for (int r = 0; r < x.rows; ++r) {
    const T* row = x.row(r);
    for (int c = 0; c < x.cols; ++c) s[static_cast<std::size_t>(c)] += row[c];
  }
  return s;
}

namespace serial {

template <typename T>
void gemm(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T acc = 0;
      for (int p = 0; p < k; ++p) {
        const T av = ta == Trans::No ? a[static_cast<std::size_t>(i) * lda + p]
                                     : a[static_cast<std::size_t>(p) * lda + i];
        const T bv = tb == Trans::No ? b[static_cast<std::size_t>(p) * ldb + j]
                                     : b[static_cast<std::size_t>(j) * ldb + p];
        acc += av * bv;
      }
      T& out = c[static_cast<std::size_t>(i) * ldc + j];
      out = alpha * acc + (beta == T(0) ? T(0) : beta * out);
    }
  }
}

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const std::vector<T>& gamma, const std::vector<T>& beta,
                     T eps) {
  Matrix<T> y(x.rows, x.cols);
  for (int r = 0; r < x.rows; ++r) {
    double mean = 0, var = 0;
    for (int c = 0; c < x.cols; ++c) mean += x(r, c);
    mean /= x.cols;
    for (int c = 0; c < x.cols; ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= x.cols;
    for (int c = 0; c < x.cols; ++c) {
      y(r, c) = static_cast<T>((x(r, c) - mean) / std::sqrt(var + eps) * gamma[c] + beta[c]);
    }
  }
  return y;
}

template <typename T>
Matrix<T> attention(const Matrix<T>& qkv, int heads) {
  const int len = qkv.rows, dim = qkv.cols / 3, hd = dim / heads;
  Matrix<T> out(len, dim);
  std::vector<double> scores(static_cast<std::size_t>(len));
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < len; ++i) {
      double mx = -1e300;
      for (int j = 0; j < len; ++j) {
        double s = 0;
        for (int d = 0; d < hd; ++d) s += qkv(i, h * hd + d) * qkv(j, dim + h * hd + d);
        s /= std::sqrt(static_cast<double>(hd));
        scores[j] = s;
        mx = std::max(mx, s);
      }
      double z = 0;
      for (int j = 0; j < len; ++j) z += (scores[j] = std::exp(scores[j] - mx));
      for (int d = 0; d < hd; ++d) {
        double acc = 0;
        for (int j = 0; j < len; ++j) acc += scores[j] / z * qkv(j, 2 * dim + h * hd + d);
        out(i, h * hd + d) = static_cast<T>(acc);
      }
    }
  }
  return out;
}

template <typename T>
Matrix<T> resize_bilinear(const Matrix<T>& x, int h, int w, int out_h, int out_w) {
  Matrix<T> y(out_h * out_w, x.cols);
  auto coord = [](int o, int in, int out) {
    double s = (o + 0.5) * in / out - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  for (int oy = 0; oy < out_h; ++oy) {
    const double sy = coord(oy, h, out_h);
    const int y0 = static_cast<int>(std::floor(sy)), y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - y0;
    for (int ox = 0; ox < out_w; ++ox) {
      const double sx = coord(ox, w, out_w);
      const int x0 = static_cast<int>(std::floor(sx)), x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - x0;
      for (int c = 0; c < x.cols; ++c) {
        const double v = (1 - fy) * ((1 - fx) * x(y0 * w + x0, c) + fx * x(y0 * w + x1, c)) +
                         fy * ((1 - fx) * x(y1 * w + x0, c) + fx * x(y1 * w + x1, c));
        y(oy * out_w + ox, c) = static_cast<T>(v);
      }
    }
  }
  return y;
}

template <typename T>
Matrix<T> im2col3x3(const Matrix<T>& x, int h, int w) {
  Matrix<T> cols(h * w, 9 * x.cols);
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx)
      for (int ky = -1; ky <= 1; ++ky)
        for (int kx = -1; kx <= 1; ++kx)
          for (int c = 0; c < x.cols; ++c) {
            const int sy = y + ky, sx = xx + kx;
            const bool inside = sy >= 0 && sx >= 0 && sy < h && sx < w;
            cols(y * w + xx, ((ky + 1) * 3 + kx + 1) * x.cols + c) =
                inside ? x(sy * w + sx, c) : T(0);
          }
  return cols;
}

}  // namespace serial

#define REFCUT_INSTANTIATE_KERNELS(T)                                                            \
  template void gemm<T>(Trans, Trans, int, int, int, T, const T*, int, const T*, int, T, T*,    \
                        int);                                                                    \
  template Matrix<T> linear<T>(const Matrix<T>&, const Matrix<T>&, const std::vector<T>&);      \
  template Matrix<T> linear_backward<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&,   \
                                        Matrix<T>&, std::vector<T>&, bool);                      \
  template Matrix<T> layer_norm<T>(const Matrix<T>&, const std::vector<T>&,                     \
                                   const std::vector<T>&, T, LayerNormStats<T>*);               \
  template Matrix<T> layer_norm_backward<T>(const Matrix<T>&, const LayerNormStats<T>&,         \
                                            const std::vector<T>&, const Matrix<T>&,            \
                                            std::vector<T>&, std::vector<T>&);                  \
  template Matrix<T> gelu<T>(const Matrix<T>&);                                                  \
  template Matrix<T> gelu_backward<T>(const Matrix<T>&, const Matrix<T>&);                      \
  template Matrix<T> relu<T>(const Matrix<T>&);                                                  \
  template Matrix<T> relu_backward<T>(const Matrix<T>&, const Matrix<T>&);                      \
  template void softmax_rows<T>(Matrix<T>&);                                                     \
  template Matrix<T> attention<T>(const Matrix<T>&, int, std::vector<Matrix<T>>*);              \
  template Matrix<T> attention_backward<T>(const Matrix<T>&, const std::vector<Matrix<T>>&,     \
                                           const Matrix<T>&, int);                              \
  template Matrix<T> resize_bilinear<T>(const Matrix<T>&, int, int, int, int);                  \
  template Matrix<T> resize_bilinear_backward<T>(const Matrix<T>&, int, int, int, int);         \
  template Matrix<T> avg_pool2<T>(const Matrix<T>&, int, int);                                   \
  template Matrix<T> avg_pool2_backward<T>(const Matrix<T>&, int, int);                          \
  template Matrix<T> pixel_shuffle2<T>(const Matrix<T>&, int, int);                              \
  template Matrix<T> pixel_unshuffle2<T>(const Matrix<T>&, int, int);                            \
  template Matrix<T> im2col3x3<T>(const Matrix<T>&, int, int);                                   \
  template Matrix<T> col2im3x3<T>(const Matrix<T>&, int, int, int);                              \
  template void add_row_broadcast<T>(Matrix<T>&, const std::vector<T>&);                         \
  template std::vector<T> column_sums<T>(const Matrix<T>&);                                      \
  template void serial::gemm<T>(Trans, Trans, int, int, int, T, const T*, int, const T*, int, T, \
                                T*, int);                                                        \
  template Matrix<T> serial::layer_norm<T>(const Matrix<T>&, const std::vector<T>&,             \
                                           const std::vector<T>&, T);                           \
  template Matrix<T> serial::attention<T>(const Matrix<T>&, int);                               \
  template Matrix<T> serial::resize_bilinear<T>(const Matrix<T>&, int, int, int, int);          \
  template Matrix<T> serial::im2col3x3<T>(const Matrix<T>&, int, int);

REFCUT_INSTANTIATE_KERNELS(float)
REFCUT_INSTANTIATE_KERNELS(double)

}  // namespace refcut::nn::kernels
