#pragma once

// Test-only reference implementations: plain loops over std::vector, written
// independently of the library kernels they check.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

// C[N,M] = A[N,K] * B[K,M], naive triple loop.
inline std::vector<double> matmul2d(const std::vector<double>& a, std::size_t n, std::size_t k,
                                    const std::vector<double>& b, std::size_t m) {
  std::vector<double> c(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * m + j];
      c[i * m + j] = acc;
    }
  }
  return c;
}

// Direct 6-nested-loop 3D cross-correlation with zero padding and groups.
inline std::vector<double> conv3d(const std::vector<double>& in, std::size_t B, std::size_t Cin,
                                  std::size_t D, std::size_t H, std::size_t W,
                                  const std::vector<double>& weight, std::size_t Cout,
                                  std::size_t kd, std::size_t kh, std::size_t kw, std::size_t sd,
                                  std::size_t sh, std::size_t sw, long pd, long ph, long pw,
                                  std::size_t groups, const std::vector<double>& bias) {
  std::size_t Do = (D + 2 * pd - kd) / sd + 1;
  std::size_t Ho = (H + 2 * ph - kh) / sh + 1;
  std::size_t Wo = (W + 2 * pw - kw) / sw + 1;
  std::size_t icpg = Cin / groups, ocpg = Cout / groups;
  std::vector<double> out(B * Cout * Do * Ho * Wo, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oc = 0; oc < Cout; ++oc)
      for (std::size_t od = 0; od < Do; ++od)
        for (std::size_t oh = 0; oh < Ho; ++oh)
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            double acc = bias.empty() ? 0.0 : bias[oc];
            std::size_t g = oc / ocpg;
            for (std::size_t ic = 0; ic < icpg; ++ic)
              for (std::size_t z = 0; z < kd; ++z)
                for (std::size_t y = 0; y < kh; ++y)
                  for (std::size_t x = 0; x < kw; ++x) {
                    long id = static_cast<long>(od * sd + z) - pd;
                    long ih = static_cast<long>(oh * sh + y) - ph;
                    long iw = static_cast<long>(ow * sw + x) - pw;
                    if (id < 0 || id >= static_cast<long>(D) || ih < 0 ||
                        ih >= static_cast<long>(H) || iw < 0 || iw >= static_cast<long>(W))
                      continue;
                    acc += in[(((b * Cin + g * icpg + ic) * D + id) * H + ih) * W + iw] *
                           weight[(((oc * icpg + ic) * kd + z) * kh + y) * kw + x];
                  }
            out[(((b * Cout + oc) * Do + od) * Ho + oh) * Wo + ow] = acc;
          }
  return out;
}

inline std::vector<double> softmax_vec(const std::vector<double>& v) {
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  std::vector<double> out(v.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    denom += out[i];
  }
  for (double& x : out) x /= denom;
  return out;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Fully unrolled per-head, per-query cross-attention.
// q [B,N,Dq], kv [B,M,Dkv]; wq [Dq,Dq], wk/wv [Dkv,Dq]; returns [B,N,Dq].
// When `weights` is non-null it receives the softmaxed scores [B,H,N,M].
inline std::vector<double> cross_attention(const std::vector<double>& q,
                                           const std::vector<double>& kv, std::size_t B,
                                           std::size_t N, std::size_t M, std::size_t Dq,
                                           std::size_t Dkv, const std::vector<double>& wq,
                                           const std::vector<double>& wk,
                                           const std::vector<double>& wv, std::size_t H,
                                           std::vector<double>* weights = nullptr) {
  std::size_t C = Dq / H;
  std::vector<double> qp(B * N * Dq, 0.0), kp(B * M * Dq, 0.0), vp(B * M * Dq, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t d = 0; d < Dq; ++d) {
        double acc = 0.0;
        for (std::size_t t = 0; t < Dq; ++t) acc += q[(b * N + n) * Dq + t] * wq[t * Dq + d];
        qp[(b * N + n) * Dq + d] = acc;
      }
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t d = 0; d < Dq; ++d) {
        double ak = 0.0, av = 0.0;
        for (std::size_t t = 0; t < Dkv; ++t) {
          ak += kv[(b * M + m) * Dkv + t] * wk[t * Dq + d];
          av += kv[(b * M + m) * Dkv + t] * wv[t * Dq + d];
        }
        kp[(b * M + m) * Dq + d] = ak;
        vp[(b * M + m) * Dq + d] = av;
      }
  }
  if (weights) weights->assign(B * H * N * M, 0.0);
  std::vector<double> out(B * N * Dq, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t n = 0; n < N; ++n) {
        std::vector<double> logits(M, 0.0);
        for (std::size_t m = 0; m < M; ++m) {
          double dot = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            dot += qp[(b * N + n) * Dq + h * C + c] * kp[(b * M + m) * Dq + h * C + c];
          }
          logits[m] = dot / std::sqrt(static_cast<double>(C));
        }
        std::vector<double> w = softmax_vec(logits);
        if (weights) {
          for (std::size_t m = 0; m < M; ++m) (*weights)[((b * H + h) * N + n) * M + m] = w[m];
        }
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (std::size_t m = 0; m < M; ++m) acc += w[m] * vp[(b * M + m) * Dq + h * C + c];
          out[(b * N + n) * Dq + h * C + c] = acc;
        }
      }
  return out;
}

// de Boor's algorithm: evaluates S(x) = sum_i c_i B_{i,k}(x) by repeated
// convex combination of control points (no basis functions involved).
inline double deboor(const std::vector<double>& knots, std::size_t degree,
                     const std::vector<double>& coeffs, double x) {
  // span s with knots[s] <= x < knots[s+1], restricted to valid spans
  std::size_t lo = degree, hi = knots.size() - degree - 2;
  std::size_t s = lo;
  while (s < hi && !(x < knots[s + 1])) ++s;
  std::vector<double> d(degree + 1);
  for (std::size_t j = 0; j <= degree; ++j) d[j] = coeffs[j + s - degree];
  for (std::size_t r = 1; r <= degree; ++r) {
    for (std::size_t j = degree; j >= r; --j) {
      double denom = knots[j + 1 + s - r] - knots[j + s - degree];
      double alpha = denom == 0.0 ? 0.0 : (x - knots[j + s - degree]) / denom;
      d[j] = (1.0 - alpha) * d[j - 1] + alpha * d[j];
    }
  }
  return d[degree];
}

// All-pairs rank statistic with half-credit ties.
inline double auroc_pairs(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) {
        wins += 1.0;
      } else if (scores[i] == scores[j]) {
        wins += 0.5;
      }
    }
  }
  return wins / static_cast<double>(pairs);
}

// Same-size 2D convolution with zero padding (kernel given row-major, odd side).
inline std::vector<double> conv2d_same(const std::vector<double>& img, std::size_t H,
                                       std::size_t W, const std::vector<double>& kernel,
                                       std::size_t side) {
  long r = static_cast<long>(side) / 2;
  std::vector<double> out(H * W, 0.0);
  for (long y = 0; y < static_cast<long>(H); ++y)
    for (long x = 0; x < static_cast<long>(W); ++x) {
      double acc = 0.0;
      for (long ky = -r; ky <= r; ++ky)
        for (long kx = -r; kx <= r; ++kx) {
          long yy = y + ky, xx = x + kx;
          if (yy < 0 || yy >= static_cast<long>(H) || xx < 0 || xx >= static_cast<long>(W)) continue;
          acc += kernel[(ky + r) * side + (kx + r)] * img[yy * W + xx];
        }
      out[y * W + x] = acc;
    }
  return out;
}

}  // namespace oracle
