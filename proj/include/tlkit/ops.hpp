#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "tlkit/tensor.hpp"

// Differentiable primitives. Every op here has a backward rule that
// accumulates (never overwrites) into its inputs' gradient slots, so a
// tensor used twice receives both contributions.

namespace tlkit {

namespace detail {

// c[m x n] += a[m x k] * b[k x n]
inline void mm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// da[m x k] += g[m x n] * b^T   (b stored [k x n])
inline void mm_nt_acc(const double* g, const double* b, double* da, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const double* gi = g + static_cast<std::size_t>(i) * n;
        double* dai = da + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double* bp = b + static_cast<std::size_t>(p) * n;
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += gi[j] * bp[j];
            dai[p] += s;
        }
    }
}

// db[k x n] += a^T * g   (a stored [m x k], g [m x n])
inline void mm_tn_acc(const double* a, const double* g, double* db, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        const double* gi = g + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* dbp = db + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) dbp[j] += av * gi[j];
        }
    }
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
    }
}

inline double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

constexpr double kInvSqrt2 = 0.70710678118654752440084436210485;
constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::tracing({&a, &b})) {
        detail::mark_output(out);
        Tape::current()->record([an = a.node(), bn = b.node(), on = out.node()] {
            const std::size_t m = on->value.size();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

// Hadamard product of Eq. 1 style elementwise weighting.
inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "hadamard");
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::tracing({&a, &b})) {
        detail::mark_output(out);
        Tape::current()->record([an = a.node(), bn = b.node(), on = out.node()] {
            const std::size_t m = on->value.size();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) an->grad[i] += on->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) bn->grad[i] += on->grad[i] * an->value[i];
            }
        });
    }
    return out;
}

// Scalar broadcast multiply.
inline Tensor scale(const Tensor& x, double s) {
    Tensor out(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * s;
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tape::current()->record([xn = x.node(), on = out.node(), s] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const std::size_t m = on->value.size();
            for (std::size_t i = 0; i < m; ++i) xn->grad[i] += s * on->grad[i];
        });
    }
    return out;
}

inline Tensor sigmoid(const Tensor& x) {
    Tensor out(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = detail::sigmoid_scalar(x.data()[i]);
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tape::current()->record([xn = x.node(), on = out.node()] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const std::size_t m = on->value.size();
            for (std::size_t i = 0; i < m; ++i) {
                const double y = on->value[i];
                xn->grad[i] += on->grad[i] * y * (1.0 - y);
            }
        });
    }
    return out;
}

// Exact erf form, not the tanh approximation.
inline Tensor gelu(const Tensor& x) {
    Tensor out(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        out.data()[i] = 0.5 * v * (1.0 + std::erf(v * detail::kInvSqrt2));
    }
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tape::current()->record([xn = x.node(), on = out.node()] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const std::size_t m = on->value.size();
            for (std::size_t i = 0; i < m; ++i) {
                const double v = xn->value[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * detail::kInvSqrt2));
                const double pdf = detail::kInvSqrt2Pi * std::exp(-0.5 * v * v);
                xn->grad[i] += on->grad[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    detail::mm_acc(a.data(), b.data(), out.data(), m, k, n);
    if (detail::tracing({&a, &b})) {
        detail::mark_output(out);
        Tape::current()->record([an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
            if (an->requires_grad) {
                an->ensure_grad();
                detail::mm_nt_acc(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::mm_tn_acc(an->value.data(), on->grad.data(), bn->grad.data(), m, k, n);
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("transpose: rank-2 required, got " + shape_str(x.shape()));
    const int m = x.dim(0), n = x.dim(1);
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out(j, i) = x(i, j);
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tape::current()->record([xn = x.node(), on = out.node(), m, n] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    xn->grad[static_cast<std::size_t>(i) * n + j] +=
                        on->grad[static_cast<std::size_t>(j) * m + i];
        });
    }
    return out;
}

// Copying reshape; gradients flow back through the flat index map.
inline Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel()) {
        throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(new_shape) +
                             " changes element count");
    }
    Tensor out(std::move(new_shape));
    std::copy(x.data(), x.data() + x.numel(), out.data());
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tape::current()->record([xn = x.node(), on = out.node()] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const std::size_t m = on->value.size();
            for (std::size_t i = 0; i < m; ++i) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

// x [N x C] + b [C] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0)) {
        throw DimensionError("add_bias: shapes " + shape_str(x.shape()) + " and " +
                             shape_str(b.shape()) + " incompatible");
    }
    const int rows = x.dim(0), cols = x.dim(1);
    Tensor out({rows, cols});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out(i, j) = x(i, j) + b(j);
    if (detail::tracing({&x, &b})) {
        detail::mark_output(out);
        Tape::current()->record([xn = x.node(), bn = b.node(), on = out.node(), rows, cols] {
            if (xn->requires_grad) {
                xn->ensure_grad();
                const std::size_t m = on->value.size();
                for (std::size_t i = 0; i < m; ++i) xn->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                        bn->grad[j] += on->grad[static_cast<std::size_t>(i) * cols + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

// 3x3 cross-correlation, stride 1, zero same-padding. x [H x W x Cin],
// kernel [3 x 3 x Cin x Cout], bias [Cout] -> [H x W x Cout].
inline Tensor conv2d_3x3(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    if (x.rank() != 3) throw DimensionError("conv2d_3x3: input rank 3 required, got " + shape_str(x.shape()));
    if (kernel.rank() != 4 || kernel.dim(0) != 3 || kernel.dim(1) != 3) {
        throw DimensionError("conv2d_3x3: kernel must be [3x3xCinxCout], got " + shape_str(kernel.shape()));
    }
    const int h = x.dim(0), w = x.dim(1), cin = x.dim(2), cout = kernel.dim(3);
    if (kernel.dim(2) != cin) {
        throw DimensionError("conv2d_3x3: input channels " + std::to_string(cin) +
                             " vs kernel channels " + std::to_string(kernel.dim(2)));
    }
    if (bias.rank() != 1 || bias.dim(0) != cout) {
        throw DimensionError("conv2d_3x3: bias shape " + shape_str(bias.shape()) +
                             " vs Cout " + std::to_string(cout));
    }
    Tensor out({h, w, cout});
    for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
            for (int co = 0; co < cout; ++co) out(y, xx, co) = bias(co);
            for (int ky = 0; ky < 3; ++ky) {
                const int sy = y + ky - 1;
                if (sy < 0 || sy >= h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int sx = xx + kx - 1;
                    if (sx < 0 || sx >= w) continue;
                    for (int ci = 0; ci < cin; ++ci) {
                        const double xv = x(sy, sx, ci);
                        for (int co = 0; co < cout; ++co)
                            out(y, xx, co) += xv * kernel(ky, kx, ci, co);
                    }
                }
            }
        }
    }
    if (detail::tracing({&x, &kernel, &bias})) {
        detail::mark_output(out);
        Tape::current()->record(
            [xn = x.node(), kn = kernel.node(), bn = bias.node(), on = out.node(), h, w, cin, cout] {
                const bool gx = xn->requires_grad, gk = kn->requires_grad, gb = bn->requires_grad;
                if (gx) xn->ensure_grad();
                if (gk) kn->ensure_grad();
                if (gb) bn->ensure_grad();
                auto oidx = [&](int y, int xx, int co) {
                    return (static_cast<std::size_t>(y) * w + xx) * cout + co;
                };
                auto xidx = [&](int y, int xx, int ci) {
                    return (static_cast<std::size_t>(y) * w + xx) * cin + ci;
                };
                auto kidx = [&](int ky, int kx, int ci, int co) {
                    return ((static_cast<std::size_t>(ky) * 3 + kx) * cin + ci) * cout + co;
                };
                for (int y = 0; y < h; ++y) {
                    for (int xx = 0; xx < w; ++xx) {
                        for (int co = 0; co < cout; ++co) {
                            const double g = on->grad[oidx(y, xx, co)];
                            if (g == 0.0) continue;
                            if (gb) bn->grad[co] += g;
                            for (int ky = 0; ky < 3; ++ky) {
                                const int sy = y + ky - 1;
                                if (sy < 0 || sy >= h) continue;
                                for (int kx = 0; kx < 3; ++kx) {
                                    const int sx = xx + kx - 1;
                                    if (sx < 0 || sx >= w) continue;
                                    for (int ci = 0; ci < cin; ++ci) {
                                        if (gk)
                                            kn->grad[kidx(ky, kx, ci, co)] +=
                                                g * xn->value[xidx(sy, sx, ci)];
                                        if (gx)
                                            xn->grad[xidx(sy, sx, ci)] +=
                                                g * kn->value[kidx(ky, kx, ci, co)];
                                    }
                                }
                            }
                        }
                    }
                }
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

// Softmax over the trailing axis; rows of the result sum to 1.
inline Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() < 1) throw DimensionError("softmax_lastdim: rank >= 1 required");
    const int cols = x.dim(x.rank() - 1);
    const std::size_t rows = x.numel() / static_cast<std::size_t>(cols);
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = x.data() + r * cols;
        double* oi = out.data() + r * cols;
        double mx = xi[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
        double sum = 0.0;
        for (int j = 0; j < cols; ++j) {
            oi[j] = std::exp(xi[j] - mx);
            sum += oi[j];
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < cols; ++j) oi[j] *= inv;
    }
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tape::current()->record([xn = x.node(), on = out.node(), rows, cols] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = on->value.data() + r * cols;
                const double* dy = on->grad.data() + r * cols;
                double dot = 0.0;
                for (int j = 0; j < cols; ++j) dot += dy[j] * y[j];
                double* dx = xn->grad.data() + r * cols;
                for (int j = 0; j < cols; ++j) dx[j] += y[j] * (dy[j] - dot);
            }
        });
    }
    return out;
}

// Global average pooling over all leading axes, keeping the channel axis.
// rho of Eq. 1 when applied to an H x W x C map.
inline Tensor spatial_mean(const Tensor& x) {
    if (x.rank() < 3) {
        throw DimensionError("spatial_mean: rank >= 3 with trailing channels required, got " +
                             shape_str(x.shape()));
    }
    const int c = x.dim(x.rank() - 1);
    const std::size_t m = x.numel() / static_cast<std::size_t>(c);
    Tensor out({c});
    for (std::size_t p = 0; p < m; ++p)
        for (int j = 0; j < c; ++j) out(j) += x.data()[p * c + j];
    const double inv = 1.0 / static_cast<double>(m);
    for (int j = 0; j < c; ++j) out(j) *= inv;
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tape::current()->record([xn = x.node(), on = out.node(), m, c, inv] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t p = 0; p < m; ++p)
                for (int j = 0; j < c; ++j) xn->grad[p * c + j] += on->grad[j] * inv;
        });
    }
    return out;
}

// Column means of a [N x C] matrix.
inline Tensor mean_rows(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("mean_rows: rank-2 required, got " + shape_str(x.shape()));
    const int rows = x.dim(0), cols = x.dim(1);
    Tensor out({cols});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out(j) += x(i, j);
    const double inv = 1.0 / rows;
    for (int j = 0; j < cols; ++j) out(j) *= inv;
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tape::current()->record([xn = x.node(), on = out.node(), rows, cols, inv] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j)
                    xn->grad[static_cast<std::size_t>(i) * cols + j] += on->grad[j] * inv;
        });
    }
    return out;
}

inline Tensor sum_all(const Tensor& x) {
    Tensor out({1});
    double s = 0.0;
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) s += x.data()[i];
    out(0) = s;
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tape::current()->record([xn = x.node(), on = out.node()] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const double g = on->grad[0];
            for (double& d : xn->grad) d += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

// Per-row layer norm of a [N x C] matrix with learned gain/shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-6) {
    if (x.rank() != 2) throw DimensionError("layer_norm: rank-2 required, got " + shape_str(x.shape()));
    const int rows = x.dim(0), cols = x.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != cols || beta.rank() != 1 || beta.dim(0) != cols) {
        throw DimensionError("layer_norm: gamma/beta shape mismatch for width " + std::to_string(cols));
    }
    Tensor out({rows, cols});
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    std::vector<double> xhat(x.numel());
    for (int i = 0; i < rows; ++i) {
        const double* xi = x.data() + static_cast<std::size_t>(i) * cols;
        double mean = 0.0;
        for (int j = 0; j < cols; ++j) mean += xi[j];
        mean /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double d = xi[j] - mean;
            var += d * d;
        }
        var /= cols;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = is;
        for (int j = 0; j < cols; ++j) {
            const double xh = (xi[j] - mean) * is;
            xhat[static_cast<std::size_t>(i) * cols + j] = xh;
            out(i, j) = gamma(j) * xh + beta(j);
        }
    }
    if (detail::tracing({&x, &gamma, &beta})) {
        detail::mark_output(out);
        Tape::current()->record([xn = x.node(), gn = gamma.node(), bn = beta.node(),
                                 on = out.node(), rows, cols, inv_std = std::move(inv_std),
                                 xhat = std::move(xhat)] {
            const bool gx = xn->requires_grad, gg = gn->requires_grad, gb = bn->requires_grad;
            if (gx) xn->ensure_grad();
            if (gg) gn->ensure_grad();
            if (gb) bn->ensure_grad();
            for (int i = 0; i < rows; ++i) {
                const std::size_t base = static_cast<std::size_t>(i) * cols;
                const double* dy = on->grad.data() + base;
                const double* xh = xhat.data() + base;
                if (gg || gb) {
                    for (int j = 0; j < cols; ++j) {
                        if (gg) gn->grad[j] += dy[j] * xh[j];
                        if (gb) bn->grad[j] += dy[j];
                    }
                }
                if (gx) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (int j = 0; j < cols; ++j) {
                        const double dxh = dy[j] * gn->value[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= cols;
                    mean_dxhat_xhat /= cols;
                    const double is = inv_std[static_cast<std::size_t>(i)];
                    for (int j = 0; j < cols; ++j) {
                        const double dxh = dy[j] * gn->value[j];
                        xn->grad[base + j] += is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// slicing / stacking
// ---------------------------------------------------------------------------

inline Tensor slice_rows(const Tensor& x, int start, int count) {
    if (x.rank() != 2) throw DimensionError("slice_rows: rank-2 required, got " + shape_str(x.shape()));
    if (start < 0 || count < 1 || start + count > x.dim(0)) {
        throw DimensionError("slice_rows: range [" + std::to_string(start) + ", " +
                             std::to_string(start + count) + ") out of " + std::to_string(x.dim(0)));
    }
    const int cols = x.dim(1);
    Tensor out({count, cols});
    std::copy(x.data() + static_cast<std::size_t>(start) * cols,
              x.data() + static_cast<std::size_t>(start + count) * cols, out.data());
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tape::current()->record([xn = x.node(), on = out.node(), start, count, cols] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            const std::size_t n = static_cast<std::size_t>(count) * cols;
            const std::size_t off = static_cast<std::size_t>(start) * cols;
            for (std::size_t i = 0; i < n; ++i) xn->grad[off + i] += on->grad[i];
        });
    }
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ContractError("concat_rows: empty input list");
    const int cols = xs[0].dim(1);
    int rows = 0;
    for (const Tensor& t : xs) {
        if (t.rank() != 2 || t.dim(1) != cols) {
            throw DimensionError("concat_rows: inconsistent shape " + shape_str(t.shape()));
        }
        rows += t.dim(0);
    }
    Tensor out({rows, cols});
    std::size_t off = 0;
    for (const Tensor& t : xs) {
        std::copy(t.data(), t.data() + t.numel(), out.data() + off);
        off += t.numel();
    }
    bool rec = false;
    for (const Tensor& t : xs) rec = rec || detail::tracing({&t});
    if (rec) {
        detail::mark_output(out);
        std::vector<std::shared_ptr<TensorNode>> nodes;
        nodes.reserve(xs.size());
        for (const Tensor& t : xs) nodes.push_back(t.node());
        Tape::current()->record([nodes = std::move(nodes), on = out.node()] {
            std::size_t off2 = 0;
            for (const auto& nd : nodes) {
                const std::size_t n = nd->value.size();
                if (nd->requires_grad) {
                    nd->ensure_grad();
                    for (std::size_t i = 0; i < n; ++i) nd->grad[i] += on->grad[off2 + i];
                }
                off2 += n;
            }
        });
    }
    return out;
}

inline Tensor slice_cols(const Tensor& x, int start, int count) {
    if (x.rank() != 2) throw DimensionError("slice_cols: rank-2 required, got " + shape_str(x.shape()));
    if (start < 0 || count < 1 || start + count > x.dim(1)) {
        throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " +
                             std::to_string(start + count) + ") out of " + std::to_string(x.dim(1)));
    }
    const int rows = x.dim(0), cols = x.dim(1);
    Tensor out({rows, count});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < count; ++j) out(i, j) = x(i, start + j);
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tape::current()->record([xn = x.node(), on = out.node(), rows, cols, start, count] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < count; ++j)
                    xn->grad[static_cast<std::size_t>(i) * cols + start + j] +=
                        on->grad[static_cast<std::size_t>(i) * count + j];
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ContractError("concat_cols: empty input list");
    const int rows = xs[0].dim(0);
    int cols = 0;
    for (const Tensor& t : xs) {
        if (t.rank() != 2 || t.dim(0) != rows) {
            throw DimensionError("concat_cols: inconsistent shape " + shape_str(t.shape()));
        }
        cols += t.dim(1);
    }
    Tensor out({rows, cols});
    int coff = 0;
    for (const Tensor& t : xs) {
        const int tc = t.dim(1);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < tc; ++j) out(i, coff + j) = t(i, j);
        coff += tc;
    }
    bool rec = false;
    for (const Tensor& t : xs) rec = rec || detail::tracing({&t});
    if (rec) {
        detail::mark_output(out);
        std::vector<std::shared_ptr<TensorNode>> nodes;
        std::vector<int> widths;
        for (const Tensor& t : xs) {
            nodes.push_back(t.node());
            widths.push_back(t.dim(1));
        }
        Tape::current()->record([nodes = std::move(nodes), widths = std::move(widths),
                                 on = out.node(), rows, cols] {
            int coff2 = 0;
            for (std::size_t s = 0; s < nodes.size(); ++s) {
                const auto& nd = nodes[s];
                const int tc = widths[s];
                if (nd->requires_grad) {
                    nd->ensure_grad();
                    for (int i = 0; i < rows; ++i)
                        for (int j = 0; j < tc; ++j)
                            nd->grad[static_cast<std::size_t>(i) * tc + j] +=
                                on->grad[static_cast<std::size_t>(i) * cols + coff2 + j];
                }
                coff2 += tc;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// patch extraction & grid pooling
// ---------------------------------------------------------------------------

// Flattens p x p (x tubelet_depth) patches of an [H x W x C] image or
// [T x H x W x C] video into rows, frame-major then row-major over the grid.
// Row layout: (dt, dy, dx, c).
inline Tensor patchify(const Tensor& x, int p, int tubelet_depth = 1) {
    const bool video = x.rank() == 4;
    if (!video && x.rank() != 3) {
        throw DimensionError("patchify: rank 3 or 4 required, got " + shape_str(x.shape()));
    }
    const int t = video ? x.dim(0) : 1;
    const int h = x.dim(video ? 1 : 0), w = x.dim(video ? 2 : 1), c = x.dim(video ? 3 : 2);
    if (p < 1 || h % p != 0 || w % p != 0) {
        throw ConfigError("patchify: spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                          " not divisible by patch size " + std::to_string(p));
    }
    if (tubelet_depth < 1 || t % tubelet_depth != 0) {
        throw ConfigError("patchify: frames " + std::to_string(t) + " not divisible by tubelet depth " +
                          std::to_string(tubelet_depth));
    }
    const int gt = t / tubelet_depth, gh = h / p, gw = w / p;
    const int rows = gt * gh * gw;
    const int row_len = tubelet_depth * p * p * c;
    auto src_index = [&](int ft, int fy, int fx, int fc) {
        return ((static_cast<std::size_t>(ft) * h + fy) * w + fx) * c + fc;
    };
    Tensor out({rows, row_len});
    std::size_t o = 0;
    for (int bt = 0; bt < gt; ++bt)
        for (int by = 0; by < gh; ++by)
            for (int bx = 0; bx < gw; ++bx)
                for (int dt = 0; dt < tubelet_depth; ++dt)
                    for (int dy = 0; dy < p; ++dy)
                        for (int dx = 0; dx < p; ++dx)
                            for (int fc = 0; fc < c; ++fc)
                                out.data()[o++] = x.data()[src_index(
                                    bt * tubelet_depth + dt, by * p + dy, bx * p + dx, fc)];
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tape::current()->record([xn = x.node(), on = out.node(), gt, gh, gw, tubelet_depth, p, c, h,
                                 w] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            auto src_index2 = [&](int ft, int fy, int fx, int fc) {
                return ((static_cast<std::size_t>(ft) * h + fy) * w + fx) * c + fc;
            };
            std::size_t o2 = 0;
            for (int bt = 0; bt < gt; ++bt)
                for (int by = 0; by < gh; ++by)
                    for (int bx = 0; bx < gw; ++bx)
                        for (int dt = 0; dt < tubelet_depth; ++dt)
                            for (int dy = 0; dy < p; ++dy)
                                for (int dx = 0; dx < p; ++dx)
                                    for (int fc = 0; fc < c; ++fc)
                                        xn->grad[src_index2(bt * tubelet_depth + dt, by * p + dy,
                                                            bx * p + dx, fc)] += on->grad[o2++];
        });
    }
    return out;
}

// Mean over each cell of a cells_h x cells_w partition of an [H x W x C]
// map; cells are row-major in the output. Backs both the fixed-grid
// tokenizer and the pooling-based token reduction.
inline Tensor cell_mean(const Tensor& x, int cells_h, int cells_w) {
    if (x.rank() != 3) throw DimensionError("cell_mean: rank-3 required, got " + shape_str(x.shape()));
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (cells_h < 1 || cells_w < 1 || h % cells_h != 0 || w % cells_w != 0) {
        throw ConfigError("cell_mean: grid " + std::to_string(h) + "x" + std::to_string(w) +
                          " not divisible into " + std::to_string(cells_h) + "x" +
                          std::to_string(cells_w) + " cells");
    }
    const int ch = h / cells_h, cw = w / cells_w;
    const double inv = 1.0 / (static_cast<double>(ch) * cw);
    Tensor out({cells_h * cells_w, c});
    for (int cy = 0; cy < cells_h; ++cy)
        for (int cx = 0; cx < cells_w; ++cx) {
            const int row = cy * cells_w + cx;
            for (int dy = 0; dy < ch; ++dy)
                for (int dx = 0; dx < cw; ++dx)
                    for (int j = 0; j < c; ++j)
                        out(row, j) += x(cy * ch + dy, cx * cw + dx, j) * inv;
        }
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tape::current()->record([xn = x.node(), on = out.node(), cells_h, cells_w, ch, cw, c, w,
                                 inv] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (int cy = 0; cy < cells_h; ++cy)
                for (int cx = 0; cx < cells_w; ++cx) {
                    const int row = cy * cells_w + cx;
                    for (int dy = 0; dy < ch; ++dy)
                        for (int dx = 0; dx < cw; ++dx)
                            for (int j = 0; j < c; ++j)
                                xn->grad[(static_cast<std::size_t>(cy * ch + dy) * w +
                                          (cx * cw + dx)) * c + j] +=
                                    on->grad[static_cast<std::size_t>(row) * c + j] * inv;
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// vector-attention primitives
// ---------------------------------------------------------------------------

// E[(i*N + j), :] = q_i (elementwise) k_j for all pairs.
inline Tensor outer_rows_mul(const Tensor& q, const Tensor& k) {
    detail::check_same_shape(q, k, "outer_rows_mul");
    if (q.rank() != 2) throw DimensionError("outer_rows_mul: rank-2 required");
    const int n = q.dim(0), d = q.dim(1);
    Tensor out({n * n, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int c = 0; c < d; ++c) out(i * n + j, c) = q(i, c) * k(j, c);
    if (detail::tracing({&q, &k})) {
        detail::mark_output(out);
        Tape::current()->record([qn = q.node(), kn = k.node(), on = out.node(), n, d] {
            const bool gq = qn->requires_grad, gk = kn->requires_grad;
            if (gq) qn->ensure_grad();
            if (gk) kn->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    const std::size_t row = static_cast<std::size_t>(i) * n + j;
                    for (int c = 0; c < d; ++c) {
                        const double g = on->grad[row * d + c];
                        if (gq) qn->grad[static_cast<std::size_t>(i) * d + c] +=
                            g * kn->value[static_cast<std::size_t>(j) * d + c];
                        if (gk) kn->grad[static_cast<std::size_t>(j) * d + c] +=
                            g * qn->value[static_cast<std::size_t>(i) * d + c];
                    }
                }
        });
    }
    return out;
}

// Softmax down the rows of each group of `group` consecutive rows,
// independently per column. For [N*N x d] with group = N this normalizes
// over j for every (i, channel) pair.
inline Tensor softmax_grouped_rows(const Tensor& x, int group) {
    if (x.rank() != 2) throw DimensionError("softmax_grouped_rows: rank-2 required");
    const int rows = x.dim(0), d = x.dim(1);
    if (group < 1 || rows % group != 0) {
        throw DimensionError("softmax_grouped_rows: rows " + std::to_string(rows) +
                             " not divisible by group " + std::to_string(group));
    }
    const int ngroups = rows / group;
    Tensor out(x.shape());
    for (int g = 0; g < ngroups; ++g) {
        const std::size_t base = static_cast<std::size_t>(g) * group * d;
        for (int c = 0; c < d; ++c) {
            double mx = x.data()[base + c];
            for (int j = 1; j < group; ++j)
                mx = std::max(mx, x.data()[base + static_cast<std::size_t>(j) * d + c]);
            double sum = 0.0;
            for (int j = 0; j < group; ++j) {
                const std::size_t idx = base + static_cast<std::size_t>(j) * d + c;
                out.data()[idx] = std::exp(x.data()[idx] - mx);
                sum += out.data()[idx];
            }
            const double inv = 1.0 / sum;
            for (int j = 0; j < group; ++j) out.data()[base + static_cast<std::size_t>(j) * d + c] *= inv;
        }
    }
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tape::current()->record([xn = x.node(), on = out.node(), ngroups, group, d] {
            if (!xn->requires_grad) return;
            xn->ensure_grad();
            for (int g = 0; g < ngroups; ++g) {
                const std::size_t base = static_cast<std::size_t>(g) * group * d;
                for (int c = 0; c < d; ++c) {
                    double dot = 0.0;
                    for (int j = 0; j < group; ++j) {
                        const std::size_t idx = base + static_cast<std::size_t>(j) * d + c;
                        dot += on->grad[idx] * on->value[idx];
                    }
                    for (int j = 0; j < group; ++j) {
                        const std::size_t idx = base + static_cast<std::size_t>(j) * d + c;
                        xn->grad[idx] += on->value[idx] * (on->grad[idx] - dot);
                    }
                }
            }
        });
    }
    return out;
}

// y_i = sum_j a[(i*N + j), :] (elementwise) v_j.
inline Tensor attend_rows(const Tensor& a, const Tensor& v) {
    if (a.rank() != 2 || v.rank() != 2) throw DimensionError("attend_rows: rank-2 required");
    const int n = v.dim(0), d = v.dim(1);
    if (a.dim(0) != n * n || a.dim(1) != d) {
        throw DimensionError("attend_rows: attention " + shape_str(a.shape()) +
                             " incompatible with values " + shape_str(v.shape()));
    }
    Tensor out({n, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const std::size_t row = static_cast<std::size_t>(i) * n + j;
            for (int c = 0; c < d; ++c) out(i, c) += a.data()[row * d + c] * v(j, c);
        }
    if (detail::tracing({&a, &v})) {
        detail::mark_output(out);
        Tape::current()->record([an = a.node(), vn = v.node(), on = out.node(), n, d] {
            const bool ga = an->requires_grad, gv = vn->requires_grad;
            if (ga) an->ensure_grad();
            if (gv) vn->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    const std::size_t row = static_cast<std::size_t>(i) * n + j;
                    for (int c = 0; c < d; ++c) {
                        const double g = on->grad[static_cast<std::size_t>(i) * d + c];
                        if (ga) an->grad[row * d + c] += g * vn->value[static_cast<std::size_t>(j) * d + c];
                        if (gv) vn->grad[static_cast<std::size_t>(j) * d + c] +=
                            g * an->value[row * d + c];
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

// Mean softmax cross-entropy over the batch. Labels are class indices.
inline Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw DimensionError("cross_entropy_logits: rank-2 logits required");
    const int b = logits.dim(0), k = logits.dim(1);
    if (static_cast<int>(labels.size()) != b) {
        throw DimensionError("cross_entropy_logits: " + std::to_string(labels.size()) +
                             " labels for batch " + std::to_string(b));
    }
    for (int i = 0; i < b; ++i) {
        if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= k) {
            throw ContractError("cross_entropy_logits: label out of range");
        }
    }
    Tensor out({1});
    std::vector<double> probs(logits.numel());
    double loss = 0.0;
    for (int i = 0; i < b; ++i) {
        const double* row = logits.data() + static_cast<std::size_t>(i) * k;
        double mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < k; ++j) {
            probs[static_cast<std::size_t>(i) * k + j] = std::exp(row[j] - mx);
            sum += probs[static_cast<std::size_t>(i) * k + j];
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < k; ++j) probs[static_cast<std::size_t>(i) * k + j] *= inv;
        loss += mx + std::log(sum) - row[labels[static_cast<std::size_t>(i)]];
    }
    out(0) = loss / b;
    if (detail::tracing({&logits})) {
        detail::mark_output(out);
        Tape::current()->record([ln = logits.node(), on = out.node(), probs = std::move(probs),
                                 labels, b, k] {
            if (!ln->requires_grad) return;
            ln->ensure_grad();
            const double g = on->grad[0] / b;
            for (int i = 0; i < b; ++i)
                for (int j = 0; j < k; ++j) {
                    const std::size_t idx = static_cast<std::size_t>(i) * k + j;
                    const double onehot = (labels[static_cast<std::size_t>(i)] == j) ? 1.0 : 0.0;
                    ln->grad[idx] += g * (probs[idx] - onehot);
                }
        });
    }
    return out;
}

}  // namespace tlkit
