#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dpnet/common.hpp"
#include "dpnet/tensor.hpp"

namespace dpnet {

// Accumulates the number of multiply/adds actually executed by the forward
// ops. Conventions (multiply-add = 2 flops): conv 2*K*K*Cin per output
// element plus 1 per bias add, normalization 2 per element (eval-mode scale
// and shift), activations 1 per element, bilinear resize 8 per output
// element, elementwise add 1 per element. The closed-form layer walks in
// backbone/dfp must agree with this counter exactly.
struct OpCounter {
    uint64_t flops = 0;
};

inline void count_flops(OpCounter* oc, uint64_t n) {
    if (oc) oc->flops += n;
}

// ---------------------------------------------------------------------------
// GEMM: C[M x N] (+)= A[M x K] * B[K x N], all row-major contiguous.
// Parallel over column ranges; every C element is accumulated by exactly one
// thread in ascending-k order, so results do not depend on the thread count.
// The kernel works on 4-row by 64-column register tiles with k innermost,
// which the vectorizer turns into broadcast-FMA streams over B.
// ---------------------------------------------------------------------------
namespace detail {

// Fallback: 4 C rows per pass so each B row is streamed once per row group,
// k in quads, contiguous inner loop over the thread's column range.
template <typename S>
void gemm_chunk_generic(int M, int N, int K, const S* A, const S* B, S* C, bool accumulate,
                        int64_t n0, int nw) {
    for (int m = 0; m < M; ++m) {
        S* crow = C + static_cast<size_t>(m) * N + n0;
        if (!accumulate) std::fill(crow, crow + nw, S(0));
        const S* arow = A + static_cast<size_t>(m) * K;
        int k = 0;
        for (; k + 4 <= K; k += 4) {
            const S a0 = arow[k], a1 = arow[k + 1];
            const S a2 = arow[k + 2], a3 = arow[k + 3];
            const S* b0 = B + static_cast<size_t>(k) * N + n0;
            const S* b1 = b0 + N;
            const S* b2 = b1 + N;
            const S* b3 = b2 + N;
            for (int i = 0; i < nw; ++i) {
                crow[i] += a0 * b0[i] + a1 * b1[i] + a2 * b2[i] + a3 * b3[i];
            }
        }
        for (; k < K; ++k) {
            const S a = arow[k];
            const S* b = B + static_cast<size_t>(k) * N + n0;
            for (int i = 0; i < nw; ++i) crow[i] += a * b[i];
        }
    }
}

}  // namespace detail
}  // namespace dpnet

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>

namespace dpnet::detail {

// Four C rows updated per pass (each B row loaded once per row group), k in
// quads, 8-wide FMA inner loop. Every C element accumulates in ascending-k
// order, so results are independent of the threading split.
inline void gemm_chunk_f32(int M, int N, int K, const float* A, const float* B, float* C,
                           bool accumulate, int64_t n0, int nw) {
    const int vw = nw & ~7;
    int m = 0;
    for (; m + 2 <= M; m += 2) {
        float* c0 = C + static_cast<size_t>(m) * N + n0;
        float* c1 = c0 + N;
        if (!accumulate) {
            std::fill(c0, c0 + nw, 0.0f);
            std::fill(c1, c1 + nw, 0.0f);
        }
        const float* a0 = A + static_cast<size_t>(m) * K;
        const float* a1 = a0 + K;
        int k = 0;
        for (; k + 4 <= K; k += 4) {
            const float* b0 = B + static_cast<size_t>(k) * N + n0;
            const float* b1 = b0 + N;
            const float* b2 = b1 + N;
            const float* b3 = b2 + N;
            const __m256 a00 = _mm256_set1_ps(a0[k]), a01 = _mm256_set1_ps(a0[k + 1]);
            const __m256 a02 = _mm256_set1_ps(a0[k + 2]), a03 = _mm256_set1_ps(a0[k + 3]);
            const __m256 a10 = _mm256_set1_ps(a1[k]), a11 = _mm256_set1_ps(a1[k + 1]);
            const __m256 a12 = _mm256_set1_ps(a1[k + 2]), a13 = _mm256_set1_ps(a1[k + 3]);
            for (int i = 0; i < vw; i += 8) {
                const __m256 vb0 = _mm256_loadu_ps(b0 + i);
                const __m256 vb1 = _mm256_loadu_ps(b1 + i);
                const __m256 vb2 = _mm256_loadu_ps(b2 + i);
                const __m256 vb3 = _mm256_loadu_ps(b3 + i);
                __m256 v0 = _mm256_loadu_ps(c0 + i);
                v0 = _mm256_fmadd_ps(a00, vb0, v0);
                v0 = _mm256_fmadd_ps(a01, vb1, v0);
                v0 = _mm256_fmadd_ps(a02, vb2, v0);
                v0 = _mm256_fmadd_ps(a03, vb3, v0);
                _mm256_storeu_ps(c0 + i, v0);
                __m256 v1 = _mm256_loadu_ps(c1 + i);
                v1 = _mm256_fmadd_ps(a10, vb0, v1);
                v1 = _mm256_fmadd_ps(a11, vb1, v1);
                v1 = _mm256_fmadd_ps(a12, vb2, v1);
                v1 = _mm256_fmadd_ps(a13, vb3, v1);
                _mm256_storeu_ps(c1 + i, v1);
            }
            for (int i = vw; i < nw; ++i) {
                c0[i] += a0[k] * b0[i] + a0[k + 1] * b1[i] + a0[k + 2] * b2[i] + a0[k + 3] * b3[i];
                c1[i] += a1[k] * b0[i] + a1[k + 1] * b1[i] + a1[k + 2] * b2[i] + a1[k + 3] * b3[i];
            }
        }
        for (; k < K; ++k) {
            const float* b = B + static_cast<size_t>(k) * N + n0;
            for (int i = 0; i < nw; ++i) {
                c0[i] += a0[k] * b[i];
                c1[i] += a1[k] * b[i];
            }
        }
    }
    if (m < M) gemm_chunk_generic(M - m, N, K, A + static_cast<size_t>(m) * K, B,
                                  C + static_cast<size_t>(m) * N, accumulate, n0, nw);
}

}  // namespace dpnet::detail
#endif  // __AVX2__ && __FMA__

namespace dpnet {

template <typename S>
void gemm(int M, int N, int K, const S* A, const S* B, S* C, bool accumulate) {
    parallel_ranges(N, [&](int64_t n0, int64_t n1) {
        const int nw = static_cast<int>(n1 - n0);
        if (nw <= 0) return;
#if defined(__AVX2__) && defined(__FMA__)
        if constexpr (std::is_same_v<S, float>) {
            detail::gemm_chunk_f32(M, N, K, A, B, C, accumulate, n0, nw);
            return;
        }
#endif
        detail::gemm_chunk_generic(M, N, K, A, B, C, accumulate, n0, nw);
    });
}

inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// col has Cin*K*K rows of Hout*Wout columns; row order matches the (Cin,K,K)
// flattening of the weight tensor. Out-of-bounds taps are zero-filled.
template <typename S>
void im2col(const TensorT<S>& x, int img, int k, int stride, int pad, int hout, int wout,
            std::vector<S>& col) {
    const int cin = x.c(), hin = x.h(), win = x.w();
    const size_t ncols = static_cast<size_t>(hout) * wout;
    col.resize(static_cast<size_t>(cin) * k * k * ncols);
    parallel_for(static_cast<int64_t>(cin) * k * k, [&](int64_t row) {
        const int c = static_cast<int>(row / (k * k));
        const int ky = static_cast<int>((row / k) % k);
        const int kx = static_cast<int>(row % k);
        S* dst = col.data() + static_cast<size_t>(row) * ncols;
        const S* src = x.data.data() + x.index(img, c, 0, 0);
        for (int oy = 0; oy < hout; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= hin) {
                std::fill(dst, dst + wout, S(0));
                dst += wout;
                continue;
            }
            const S* srow = src + static_cast<size_t>(iy) * win;
            for (int ox = 0; ox < wout; ++ox) {
                const int ix = ox * stride - pad + kx;
                *dst++ = (ix < 0 || ix >= win) ? S(0) : srow[ix];
            }
        }
    });
}

// Transposed im2col: rows are output pixels, columns the (Cin,K,K) taps.
// Lets the dW and dcol products run through the vectorized gemm kernel.
template <typename S>
void im2col_t(const TensorT<S>& x, int img, int k, int stride, int pad, int hout, int wout,
              std::vector<S>& colt) {
    const int cin = x.c(), hin = x.h(), win = x.w();
    const size_t ncols = static_cast<size_t>(hout) * wout;
    const int kdim = cin * k * k;
    colt.resize(ncols * kdim);
    parallel_ranges(static_cast<int64_t>(ncols), [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            const int oy = static_cast<int>(i) / wout;
            const int ox = static_cast<int>(i) % wout;
            S* dst = colt.data() + static_cast<size_t>(i) * kdim;
            for (int c = 0; c < cin; ++c) {
                const S* src = x.data.data() + x.index(img, c, 0, 0);
                for (int ky = 0; ky < k; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= hin) {
                        std::fill(dst, dst + k, S(0));
                        dst += k;
                        continue;
                    }
                    const S* srow = src + static_cast<size_t>(iy) * win;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        *dst++ = (ix < 0 || ix >= win) ? S(0) : srow[ix];
                    }
                }
            }
        }
    });
}

// Scatters column-space gradients back onto x.grad. One thread owns one
// input channel, so the accumulation order is fixed.
template <typename S>
void col2im_accum(TensorT<S>& x, int img, int k, int stride, int pad, int hout, int wout,
                  const std::vector<S>& col) {
    const int cin = x.c(), hin = x.h(), win = x.w();
    const size_t ncols = static_cast<size_t>(hout) * wout;
    parallel_for(cin, [&](int64_t c) {
        S* gx = x.grad.data() + x.index(img, static_cast<int>(c), 0, 0);
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const size_t row = (static_cast<size_t>(c) * k + ky) * k + kx;
                const S* src = col.data() + row * ncols;
                for (int oy = 0; oy < hout; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= hin) continue;
                    for (int ox = 0; ox < wout; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= win) continue;
                        gx[static_cast<size_t>(iy) * win + ix] +=
                            src[static_cast<size_t>(oy) * wout + ox];
                    }
                }
            }
        }
    });
}

}  // namespace detail

// w is (Cout, Cin, K, K), bias is (1, Cout, 1, 1) and may be empty.
template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias, int stride,
                  int pad, OpCounter* oc = nullptr) {
    const int k = w.h();
    DPNET_CHECK(w.w() == k, "conv2d: kernel must be square, got ", w.h(), "x", w.w());
    DPNET_CHECK(k % 2 == 1, "conv2d: kernel size must be odd, got ", k);
    DPNET_CHECK(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2, got ", stride);
    DPNET_CHECK(pad >= 0, "conv2d: pad must be >= 0, got ", pad);
    DPNET_CHECK(w.c() == x.c(), "conv2d: input has ", x.c(), " channels but weight expects ",
                w.c());
    const bool has_bias = bias.numel() > 0;
    if (has_bias) {
        DPNET_CHECK(bias.c() == w.n(), "conv2d: bias has ", bias.c(), " channels, want ", w.n());
    }
    const int hout = conv_out_dim(x.h(), k, stride, pad);
    const int wout = conv_out_dim(x.w(), k, stride, pad);
    DPNET_CHECK(hout >= 1 && wout >= 1, "conv2d: output would be ", hout, "x", wout,
                " for input ", x.shape_str());

    const int cout = w.n();
    const int kdim = x.c() * k * k;
    const size_t plane = static_cast<size_t>(hout) * wout;
    TensorT<S> out(x.n(), cout, hout, wout);
    std::vector<S> col;
    for (int img = 0; img < x.n(); ++img) {
        detail::im2col(x, img, k, stride, pad, hout, wout, col);
        S* optr = out.data.data() + out.index(img, 0, 0, 0);
        gemm(cout, static_cast<int>(plane), kdim, w.data.data(), col.data(), optr, false);
        if (has_bias) {
            parallel_for(cout, [&](int64_t c) {
                const S b = bias.data[c];
                S* row = optr + static_cast<size_t>(c) * plane;
                for (size_t i = 0; i < plane; ++i) row[i] += b;
            });
        }
    }
    count_flops(oc, 2ull * k * k * x.c() * cout * plane * x.n());
    if (has_bias) count_flops(oc, static_cast<uint64_t>(cout) * plane * x.n());
    return out;
}

// Accumulates into x.grad (unless skipped), w.grad and bias.grad.
template <typename S>
void conv2d_backward(TensorT<S>& x, TensorT<S>& w, TensorT<S>& bias, const TensorT<S>& out_grad,
                     int stride, int pad, bool input_grad = true) {
    const int k = w.h();
    const int hout = out_grad.h(), wout = out_grad.w();
    const int cout = w.n();
    const int kdim = x.c() * k * k;
    const size_t plane = static_cast<size_t>(hout) * wout;

    std::vector<S> wt;  // W^T, (kdim x cout)
    if (input_grad) {
        wt.resize(static_cast<size_t>(kdim) * cout);
        for (int m = 0; m < cout; ++m) {
            for (int kk = 0; kk < kdim; ++kk) {
                wt[static_cast<size_t>(kk) * cout + m] =
                    w.data[static_cast<size_t>(m) * kdim + kk];
            }
        }
    }

    std::vector<S> colt, dcol;
    for (int img = 0; img < x.n(); ++img) {
        const S* go = out_grad.data.data() + out_grad.index(img, 0, 0, 0);
        // dW += go * col^T
        detail::im2col_t(x, img, k, stride, pad, hout, wout, colt);
        gemm(cout, kdim, static_cast<int>(plane), go, colt.data(), w.grad.data(), true);
        if (bias.numel() > 0) {
            for (int c = 0; c < cout; ++c) {
                const S* grow = go + static_cast<size_t>(c) * plane;
                double acc = 0.0;
                for (size_t i = 0; i < plane; ++i) acc += static_cast<double>(grow[i]);
                bias.grad[c] += static_cast<S>(acc);
            }
        }
        if (input_grad) {
            // dcol = W^T * go, then scatter back.
            dcol.resize(static_cast<size_t>(kdim) * plane);
            gemm(kdim, static_cast<int>(plane), cout, wt.data(), go, dcol.data(), false);
            detail::col2im_accum(x, img, k, stride, pad, hout, wout, dcol);
        }
    }
}

// ---------------------------------------------------------------------------
// Bilinear resize by an exact rational factor df in (0, 1]. Output dims are
// round-half-away-from-zero of dim*df with a floor of 1; sampling uses
// half-pixel centers with edge clamping.
// ---------------------------------------------------------------------------
struct ResizeTap {
    int lo = 0;
    int hi = 0;
    double frac = 0.0;
};

namespace detail {
inline std::vector<ResizeTap> resize_taps(int in, int out) {
    std::vector<ResizeTap> taps(out);
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double s = (o + 0.5) * scale - 0.5;
        if (s < 0.0) s = 0.0;
        const int lo = std::min(static_cast<int>(s), in - 1);
        taps[o] = {lo, std::min(lo + 1, in - 1), s - lo};
    }
    return taps;
}
}  // namespace detail

inline void check_df(Rational df) {
    DPNET_CHECK(df.num > 0 && df.den > 0 && df.num <= df.den,
                "bilinear_resize: factor must be in (0, 1], got ", df.num, "/", df.den);
}

template <typename S>
TensorT<S> bilinear_resize(const TensorT<S>& x, Rational df, OpCounter* oc = nullptr) {
    check_df(df);
    DPNET_CHECK(x.h() >= 1 && x.w() >= 1, "bilinear_resize: empty input ", x.shape_str());
    const int hout = df.scale_dim(x.h());
    const int wout = df.scale_dim(x.w());
    TensorT<S> out(x.n(), x.c(), hout, wout);
    const auto ty = detail::resize_taps(x.h(), hout);
    const auto tx = detail::resize_taps(x.w(), wout);
    parallel_for(static_cast<int64_t>(x.n()) * x.c(), [&](int64_t nc) {
        const int img = static_cast<int>(nc / x.c());
        const int c = static_cast<int>(nc % x.c());
        const S* src = x.data.data() + x.index(img, c, 0, 0);
        S* dst = out.data.data() + out.index(img, c, 0, 0);
        const int win = x.w();
        for (int oy = 0; oy < hout; ++oy) {
            const ResizeTap& ry = ty[oy];
            const S wy1 = static_cast<S>(ry.frac), wy0 = S(1) - wy1;
            const S* r0 = src + static_cast<size_t>(ry.lo) * win;
            const S* r1 = src + static_cast<size_t>(ry.hi) * win;
            for (int ox = 0; ox < wout; ++ox) {
                const ResizeTap& rx = tx[ox];
                const S wx1 = static_cast<S>(rx.frac), wx0 = S(1) - wx1;
                S acc = S(0);
                acc += wy0 * wx0 * r0[rx.lo];
                acc += wy0 * wx1 * r0[rx.hi];
                acc += wy1 * wx0 * r1[rx.lo];
                acc += wy1 * wx1 * r1[rx.hi];
                *dst++ = acc;
            }
        }
    });
    count_flops(oc, 8ull * out.numel());
    return out;
}

template <typename S>
void bilinear_resize_backward(TensorT<S>& x, const TensorT<S>& out_grad, Rational df) {
    const int hout = out_grad.h(), wout = out_grad.w();
    const auto ty = detail::resize_taps(x.h(), hout);
    const auto tx = detail::resize_taps(x.w(), wout);
    parallel_for(static_cast<int64_t>(x.n()) * x.c(), [&](int64_t nc) {
        const int img = static_cast<int>(nc / x.c());
        const int c = static_cast<int>(nc % x.c());
        S* gx = x.grad.data() + x.index(img, c, 0, 0);
        const S* go = out_grad.data.data() + out_grad.index(img, c, 0, 0);
        const int win = x.w();
        for (int oy = 0; oy < hout; ++oy) {
            const ResizeTap& ry = ty[oy];
            const S wy1 = static_cast<S>(ry.frac), wy0 = S(1) - wy1;
            for (int ox = 0; ox < wout; ++ox) {
                const ResizeTap& rx = tx[ox];
                const S g = go[static_cast<size_t>(oy) * wout + ox];
                const S wx1 = static_cast<S>(rx.frac), wx0 = S(1) - wx1;
                gx[static_cast<size_t>(ry.lo) * win + rx.lo] += wy0 * wx0 * g;
                gx[static_cast<size_t>(ry.lo) * win + rx.hi] += wy0 * wx1 * g;
                gx[static_cast<size_t>(ry.hi) * win + rx.lo] += wy1 * wx0 * g;
                gx[static_cast<size_t>(ry.hi) * win + rx.hi] += wy1 * wx1 * g;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Elementwise ops and reductions.
// ---------------------------------------------------------------------------
template <typename S>
TensorT<S> relu(const TensorT<S>& x, OpCounter* oc = nullptr) {
    TensorT<S> out = x;
    out.zero_grad();
    for (auto& v : out.data) v = v > S(0) ? v : S(0);
    count_flops(oc, out.numel());
    return out;
}

template <typename S>
void relu_backward(TensorT<S>& x, const TensorT<S>& out_grad) {
    for (size_t i = 0; i < x.numel(); ++i) {
        if (x.data[i] > S(0)) x.grad[i] += out_grad.data[i];
    }
}

template <typename S>
S sigmoid_scalar(S z) {
    return S(1) / (S(1) + std::exp(-z));
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& x, OpCounter* oc = nullptr) {
    TensorT<S> out = x;
    out.zero_grad();
    for (auto& v : out.data) v = sigmoid_scalar(v);
    count_flops(oc, out.numel());
    return out;
}

// out must be the forward result for this x.
template <typename S>
void sigmoid_backward(TensorT<S>& x, const TensorT<S>& out, const TensorT<S>& out_grad) {
    for (size_t i = 0; i < x.numel(); ++i) {
        const S s = out.data[i];
        x.grad[i] += out_grad.data[i] * s * (S(1) - s);
    }
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b, OpCounter* oc = nullptr) {
    DPNET_CHECK(a.same_shape(b), "add: shape mismatch ", a.shape_str(), " vs ", b.shape_str());
    TensorT<S> out = a;
    out.zero_grad();
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] += b.data[i];
    count_flops(oc, out.numel());
    return out;
}

template <typename S>
TensorT<S> global_avg_pool(const TensorT<S>& x, OpCounter* oc = nullptr) {
    TensorT<S> out(x.n(), x.c(), 1, 1);
    const size_t plane = static_cast<size_t>(x.h()) * x.w();
    DPNET_CHECK(plane > 0, "global_avg_pool: empty spatial dims ", x.shape_str());
    for (int n = 0; n < x.n(); ++n) {
        for (int c = 0; c < x.c(); ++c) {
            const S* src = x.data.data() + x.index(n, c, 0, 0);
            double acc = 0.0;
            for (size_t i = 0; i < plane; ++i) acc += static_cast<double>(src[i]);
            out.at(n, c, 0, 0) = static_cast<S>(acc / static_cast<double>(plane));
        }
    }
    count_flops(oc, x.numel() + static_cast<uint64_t>(x.n()) * x.c());
    return out;
}

template <typename S>
void global_avg_pool_backward(TensorT<S>& x, const TensorT<S>& out_grad) {
    const size_t plane = static_cast<size_t>(x.h()) * x.w();
    const S inv = S(1) / static_cast<S>(plane);
    for (int n = 0; n < x.n(); ++n) {
        for (int c = 0; c < x.c(); ++c) {
            const S g = out_grad.at(n, c, 0, 0) * inv;
            S* gx = x.grad.data() + x.index(n, c, 0, 0);
            for (size_t i = 0; i < plane; ++i) gx[i] += g;
        }
    }
}

// 2x2 stride-2 average pool; odd trailing rows/cols are dropped.
template <typename S>
TensorT<S> avg_pool2(const TensorT<S>& x, OpCounter* oc = nullptr) {
    DPNET_CHECK(x.h() >= 2 && x.w() >= 2, "avg_pool2: input too small ", x.shape_str());
    const int hout = x.h() / 2;
    const int wout = x.w() / 2;
    TensorT<S> out(x.n(), x.c(), hout, wout);
    for (int n = 0; n < x.n(); ++n) {
        for (int c = 0; c < x.c(); ++c) {
            const S* src = x.data.data() + x.index(n, c, 0, 0);
            S* dst = out.data.data() + out.index(n, c, 0, 0);
            for (int oy = 0; oy < hout; ++oy) {
                const S* r0 = src + static_cast<size_t>(2 * oy) * x.w();
                const S* r1 = r0 + x.w();
                for (int ox = 0; ox < wout; ++ox) {
                    dst[static_cast<size_t>(oy) * wout + ox] =
                        (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * S(0.25);
                }
            }
        }
    }
    count_flops(oc, 4ull * out.numel());
    return out;
}

template <typename S>
void avg_pool2_backward(TensorT<S>& x, const TensorT<S>& out_grad) {
    const int hout = out_grad.h(), wout = out_grad.w();
    for (int n = 0; n < x.n(); ++n) {
        for (int c = 0; c < x.c(); ++c) {
            S* gx = x.grad.data() + x.index(n, c, 0, 0);
            const S* go = out_grad.data.data() + out_grad.index(n, c, 0, 0);
            for (int oy = 0; oy < hout; ++oy) {
                for (int ox = 0; ox < wout; ++ox) {
                    const S g = go[static_cast<size_t>(oy) * wout + ox] * S(0.25);
                    gx[static_cast<size_t>(2 * oy) * x.w() + 2 * ox] += g;
                    gx[static_cast<size_t>(2 * oy) * x.w() + 2 * ox + 1] += g;
                    gx[static_cast<size_t>(2 * oy + 1) * x.w() + 2 * ox] += g;
                    gx[static_cast<size_t>(2 * oy + 1) * x.w() + 2 * ox + 1] += g;
                }
            }
        }
    }
}

// x is treated as (N, F) with F = C*H*W; w is (out, F, 1, 1), b is (1, out, 1, 1).
template <typename S>
TensorT<S> fully_connected(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b,
                           OpCounter* oc = nullptr) {
    const size_t feat = x.numel() / std::max(1, x.n());
    DPNET_CHECK(static_cast<size_t>(w.c()) == feat, "fully_connected: weight expects ", w.c(),
                " features, input has ", feat);
    DPNET_CHECK(b.numel() == 0 || b.c() == w.n(), "fully_connected: bias mismatch");
    TensorT<S> out(x.n(), w.n(), 1, 1);
    for (int n = 0; n < x.n(); ++n) {
        const S* xin = x.data.data() + static_cast<size_t>(n) * feat;
        for (int o = 0; o < w.n(); ++o) {
            const S* wrow = w.data.data() + static_cast<size_t>(o) * feat;
            double acc = b.numel() > 0 ? static_cast<double>(b.data[o]) : 0.0;
            for (size_t i = 0; i < feat; ++i)
                acc += static_cast<double>(wrow[i]) * static_cast<double>(xin[i]);
            out.at(n, o, 0, 0) = static_cast<S>(acc);
        }
    }
    count_flops(oc, 2ull * x.n() * w.n() * feat);
    if (b.numel() > 0) count_flops(oc, static_cast<uint64_t>(x.n()) * w.n());
    return out;
}

template <typename S>
void fully_connected_backward(TensorT<S>& x, TensorT<S>& w, TensorT<S>& b,
                              const TensorT<S>& out_grad) {
    const size_t feat = x.numel() / std::max(1, x.n());
    for (int n = 0; n < x.n(); ++n) {
        const S* xin = x.data.data() + static_cast<size_t>(n) * feat;
        S* gx = x.grad.data() + static_cast<size_t>(n) * feat;
        for (int o = 0; o < w.n(); ++o) {
            const S g = out_grad.at(n, o, 0, 0);
            const S* wrow = w.data.data() + static_cast<size_t>(o) * feat;
            S* gw = w.grad.data() + static_cast<size_t>(o) * feat;
            for (size_t i = 0; i < feat; ++i) {
                gw[i] += g * xin[i];
                gx[i] += g * wrow[i];
            }
            if (b.numel() > 0) b.grad[o] += g;
        }
    }
}

// ---------------------------------------------------------------------------
// Losses. Scalar values are accumulated in double.
// ---------------------------------------------------------------------------
constexpr double kProbClamp = 1e-7;

template <typename S>
double bce_loss(const std::vector<S>& p, const std::vector<S>& y) {
    DPNET_CHECK(p.size() == y.size(), "bce_loss: length mismatch ", p.size(), " vs ", y.size());
    double loss = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        const double pc =
            std::min(1.0 - kProbClamp, std::max(kProbClamp, static_cast<double>(p[i])));
        loss += -static_cast<double>(y[i]) * std::log(pc) -
                (1.0 - static_cast<double>(y[i])) * std::log(1.0 - pc);
    }
    return loss;
}

// Sum-reduced BCE evaluated from logits; d(loss)/d(logit) = sigmoid(z) - y.
template <typename S>
double bce_with_logits(const std::vector<S>& z, const std::vector<S>& y,
                       std::vector<S>* dz = nullptr) {
    DPNET_CHECK(z.size() == y.size(), "bce_with_logits: length mismatch");
    if (dz) dz->resize(z.size());
    double loss = 0.0;
    for (size_t i = 0; i < z.size(); ++i) {
        const double zd = static_cast<double>(z[i]);
        // log(1 + exp(-|z|)) + max(z, 0) - z*y, the overflow-safe form.
        loss += std::log1p(std::exp(-std::abs(zd))) + std::max(zd, 0.0) -
                zd * static_cast<double>(y[i]);
        if (dz) (*dz)[i] = static_cast<S>(1.0 / (1.0 + std::exp(-zd)) - y[i]);
    }
    return loss;
}

// Mean-reduced smooth L1 with threshold beta.
template <typename S>
double smooth_l1(const std::vector<S>& pred, const std::vector<S>& target, double beta,
                 std::vector<S>* dpred = nullptr) {
    DPNET_CHECK(beta > 0.0, "smooth_l1: beta must be > 0, got ", beta);
    DPNET_CHECK(pred.size() == target.size(), "smooth_l1: length mismatch ", pred.size(),
                " vs ", target.size());
    if (pred.empty()) return 0.0;
    if (dpred) dpred->assign(pred.size(), S(0));
    const double inv_n = 1.0 / static_cast<double>(pred.size());
    double loss = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
        if (std::abs(d) <= beta) {
            loss += 0.5 * d * d / beta;
            if (dpred) (*dpred)[i] = static_cast<S>(d / beta * inv_n);
        } else {
            loss += std::abs(d) - 0.5 * beta;
            if (dpred) (*dpred)[i] = static_cast<S>((d > 0 ? 1.0 : -1.0) * inv_n);
        }
    }
    return loss * inv_n;
}

}  // namespace dpnet
