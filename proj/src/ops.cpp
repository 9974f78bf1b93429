#include "fedseg/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <utility>

namespace fedseg {

namespace {

using detail::TensorImpl;
using Impl = std::shared_ptr<TensorImpl>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRowMat = Eigen::Map<RowMat>;
using MapConstRowMat = Eigen::Map<const RowMat>;

void check_finite(const Tensor& t, const char* op) {
    if (!t.array().allFinite())
        throw TensorError(std::string(op) + ": non-finite value in output");
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (!GradMode::enabled()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

void attach(Tensor& out, std::vector<Impl> parents,
            std::function<void(const Eigen::ArrayXd&)> backward) {
    out.impl()->parents = std::move(parents);
    out.impl()->backward = std::move(backward);
    out.impl()->requires_grad = true;
}

struct Dims4 {
    std::int64_t n, c, h, w;
};

Dims4 dims4(const Tensor& t, const char* op, const char* what) {
    if (t.rank() != 4)
        throw TensorError(std::string(op) + ": " + what + " must be rank 4, got " +
                          shape_str(t.shape()));
    return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

// Gathers conv patches for one sample into an (Ho*Wo) x (C*kh*kw)
// column-major matrix: column r = (c, ky, kx) holds that tap for every
// output position, so stride-1 fills are contiguous row spans of the input.
// Out-of-image taps are zero or the clamped edge pixel.
void im2col(const double* src, std::int64_t c_in, std::int64_t h, std::int64_t w,
            std::int64_t kh, std::int64_t kw, std::int64_t pad, std::int64_t stride,
            PadMode pm, std::int64_t ho, std::int64_t wo, Eigen::MatrixXd& cols) {
    for (std::int64_t c = 0; c < c_in; ++c) {
        const double* plane = src + c * h * w;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
            for (std::int64_t kx = 0; kx < kw; ++kx) {
                double* col = cols.col(c * kh * kw + ky * kw + kx).data();
                for (std::int64_t oy = 0; oy < ho; ++oy, col += wo) {
                    std::int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) {
                        if (pm == PadMode::Zero) {
                            std::fill_n(col, wo, 0.0);
                            continue;
                        }
                        iy = std::clamp<std::int64_t>(iy, 0, h - 1);
                    }
                    const double* row = plane + iy * w;
                    if (stride == 1) {
                        // ix = ox + kx - pad; valid ox span copies contiguously
                        const std::int64_t lo = std::max<std::int64_t>(0, pad - kx);
                        const std::int64_t hi =
                            std::min<std::int64_t>(wo - 1, w - 1 - kx + pad);
                        if (pm == PadMode::Zero) {
                            for (std::int64_t ox = 0; ox < std::min(lo, wo); ++ox) col[ox] = 0.0;
                            for (std::int64_t ox = std::max<std::int64_t>(hi + 1, 0); ox < wo; ++ox)
                                col[ox] = 0.0;
                        } else {
                            for (std::int64_t ox = 0; ox < std::min(lo, wo); ++ox)
                                col[ox] = row[0];
                            for (std::int64_t ox = std::max<std::int64_t>(hi + 1, 0); ox < wo; ++ox)
                                col[ox] = row[w - 1];
                        }
                        if (lo <= hi) std::copy_n(row + lo + kx - pad, hi - lo + 1, col + lo);
                    } else {
                        for (std::int64_t ox = 0; ox < wo; ++ox) {
                            std::int64_t ix = ox * stride + kx - pad;
                            if (ix >= 0 && ix < w) {
                                col[ox] = row[ix];
                            } else if (pm == PadMode::Replicate) {
                                col[ox] = row[std::clamp<std::int64_t>(ix, 0, w - 1)];
                            } else {
                                col[ox] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add of a patch-gradient matrix back onto the input plane; the
// adjoint of im2col (replicate taps accumulate onto the edge pixel).
void col2im_add(const Eigen::MatrixXd& cols, std::int64_t c_in, std::int64_t h, std::int64_t w,
                std::int64_t kh, std::int64_t kw, std::int64_t pad, std::int64_t stride,
                PadMode pm, std::int64_t ho, std::int64_t wo, double* dst) {
    for (std::int64_t c = 0; c < c_in; ++c) {
        double* plane = dst + c * h * w;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
            for (std::int64_t kx = 0; kx < kw; ++kx) {
                const double* col = cols.col(c * kh * kw + ky * kw + kx).data();
                for (std::int64_t oy = 0; oy < ho; ++oy, col += wo) {
                    std::int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) {
                        if (pm == PadMode::Zero) continue;
                        iy = std::clamp<std::int64_t>(iy, 0, h - 1);
                    }
                    double* row = plane + iy * w;
                    if (stride == 1) {
                        const std::int64_t lo = std::max<std::int64_t>(0, pad - kx);
                        const std::int64_t hi =
                            std::min<std::int64_t>(wo - 1, w - 1 - kx + pad);
                        if (pm == PadMode::Replicate) {
                            for (std::int64_t ox = 0; ox < std::min(lo, wo); ++ox)
                                row[0] += col[ox];
                            for (std::int64_t ox = std::max<std::int64_t>(hi + 1, 0); ox < wo; ++ox)
                                row[w - 1] += col[ox];
                        }
                        const double* c2 = col + lo;
                        double* r2 = row + lo + kx - pad;
                        for (std::int64_t i = 0; i <= hi - lo; ++i) r2[i] += c2[i];
                    } else {
                        for (std::int64_t ox = 0; ox < wo; ++ox) {
                            std::int64_t ix = ox * stride + kx - pad;
                            if (ix >= 0 && ix < w) {
                                row[ix] += col[ox];
                            } else if (pm == PadMode::Replicate) {
                                row[std::clamp<std::int64_t>(ix, 0, w - 1)] += col[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int padding, int stride, PadMode pad_mode) {
    const Dims4 in = dims4(input, "conv2d", "input");
    const Dims4 wt = dims4(weight, "conv2d", "weight");
    if (wt.c != in.c)
        throw TensorError("conv2d: weight expects " + std::to_string(wt.c) +
                          " input channels, input has " + std::to_string(in.c));
    if (!((wt.h == 1 && wt.w == 1) || (wt.h == 3 && wt.w == 3)))
        throw TensorError("conv2d: kernel must be 1x1 or 3x3, got " + shape_str(weight.shape()));
    if (bias.rank() != 1 || bias.dim(0) != wt.n)
        throw TensorError("conv2d: bias must have shape [" + std::to_string(wt.n) + "], got " +
                          shape_str(bias.shape()));
    if (padding < 0 || stride < 1) throw TensorError("conv2d: bad padding/stride");

    const std::int64_t kh = wt.h, kw = wt.w, pad = padding, st = stride;
    const std::int64_t ho = (in.h + 2 * pad - kh) / st + 1;
    const std::int64_t wo = (in.w + 2 * pad - kw) / st + 1;
    if (in.h + 2 * pad < kh || in.w + 2 * pad < kw || ho < 1 || wo < 1)
        throw TensorError("conv2d: input " + shape_str(input.shape()) +
                          " too small for kernel " + shape_str(weight.shape()) + " with padding " +
                          std::to_string(padding));

    const std::int64_t k = in.c * kh * kw;  // patch rows
    const std::int64_t s = ho * wo;         // output positions

    Tensor out({in.n, wt.n, ho, wo});
    Eigen::MatrixXd cols(s, k);
    MapConstRowMat wmat(weight.data(), wt.n, k);
    for (std::int64_t n = 0; n < in.n; ++n) {
        im2col(input.data() + n * in.c * in.h * in.w, in.c, in.h, in.w, kh, kw, pad, st,
               pad_mode, ho, wo, cols);
        // the NCHW output slab viewed column-major is (S, O): column o is plane o
        Eigen::Map<Eigen::MatrixXd> omat(out.data() + n * wt.n * s, s, wt.n);
        omat.noalias() = cols * wmat.transpose();
        for (std::int64_t o = 0; o < wt.n; ++o) omat.col(o).array() += bias.data()[o];
    }
    check_finite(out, "conv2d");

    if (tracking({&input, &weight, &bias})) {
        Impl in_i = input.impl(), w_i = weight.impl(), b_i = bias.impl();
        const bool need_in = input.requires_grad();
        const bool need_w = weight.requires_grad();
        const bool need_b = bias.requires_grad();
        const Dims4 ind = in, wtd = wt;
        attach(out, {in_i, w_i, b_i},
               [=](const Eigen::ArrayXd& go) {
                   MapConstRowMat wm(w_i->data.data(), wtd.n, k);
                   Eigen::ArrayXd din;
                   Eigen::MatrixXd dw;
                   Eigen::VectorXd db;
                   if (need_in) din = Eigen::ArrayXd::Zero(in_i->data.size());
                   if (need_w) dw = Eigen::MatrixXd::Zero(k, wtd.n);  // transposed accumulator
                   if (need_b) db = Eigen::VectorXd::Zero(wtd.n);
                   Eigen::MatrixXd cols_b(s, k);
                   Eigen::MatrixXd dcols(s, k);
                   for (std::int64_t n = 0; n < ind.n; ++n) {
                       Eigen::Map<const Eigen::MatrixXd> gom(go.data() + n * wtd.n * s, s, wtd.n);
                       if (need_w || need_in)
                           im2col(in_i->data.data() + n * ind.c * ind.h * ind.w, ind.c, ind.h,
                                  ind.w, kh, kw, pad, st, pad_mode, ho, wo, cols_b);
                       if (need_w) dw.noalias() += cols_b.transpose() * gom;
                       if (need_b) db.noalias() += gom.colwise().sum().transpose();
                       if (need_in) {
                           dcols.noalias() = gom * wm;
                           col2im_add(dcols, ind.c, ind.h, ind.w, kh, kw, pad, st, pad_mode,
                                      ho, wo, din.data() + n * ind.c * ind.h * ind.w);
                       }
                   }
                   if (need_in) in_i->accumulate(std::move(din));
                   if (need_w) {
                       Eigen::ArrayXd dwa(w_i->data.size());
                       MapRowMat(dwa.data(), wtd.n, k) = dw.transpose();
                       w_i->accumulate(std::move(dwa));
                   }
                   if (need_b) b_i->accumulate(db.array());
               });
    }
    return out;
}

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, Tensor& tracked,
                  bool train, double momentum, double epsilon) {
    const Dims4 in = dims4(input, "batch_norm", "input");
    const std::int64_t c = in.c;
    for (const Tensor* t : {&gamma, &beta, const_cast<const Tensor*>(&running_mean),
                            const_cast<const Tensor*>(&running_var)}) {
        if (t->rank() != 1 || t->dim(0) != c)
            throw TensorError("batch_norm: per-channel tensor must have shape [" +
                              std::to_string(c) + "], got " + shape_str(t->shape()));
    }
    if (tracked.numel() != 1) throw TensorError("batch_norm: tracked must be a scalar");
    const std::int64_t hw = in.h * in.w;
    const std::int64_t m = in.n * hw;  // elements per channel
    if (train && m < 2)
        throw TensorError("batch_norm: train mode needs at least 2 elements per channel");
    if (!train && tracked.item() <= 0.0)
        throw TensorError(
            "batch_norm: eval mode before any train-mode update (running stats uninitialized)");

    Eigen::ArrayXd mean(c), inv_std(c);
    if (train) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            double sum = 0.0;
            for (std::int64_t n = 0; n < in.n; ++n) {
                const double* x = input.data() + (n * c + ch) * hw;
                for (std::int64_t j = 0; j < hw; ++j) sum += x[j];
            }
            double mu = sum / static_cast<double>(m);
            // corrected two-pass mean: keeps a constant channel exactly constant
            double residual = 0.0;
            for (std::int64_t n = 0; n < in.n; ++n) {
                const double* x = input.data() + (n * c + ch) * hw;
                for (std::int64_t j = 0; j < hw; ++j) residual += x[j] - mu;
            }
            mu += residual / static_cast<double>(m);
            double ss = 0.0;
            for (std::int64_t n = 0; n < in.n; ++n) {
                const double* x = input.data() + (n * c + ch) * hw;
                for (std::int64_t j = 0; j < hw; ++j) ss += (x[j] - mu) * (x[j] - mu);
            }
            const double var = ss / static_cast<double>(m);  // biased
            mean[ch] = mu;
            inv_std[ch] = 1.0 / std::sqrt(var + epsilon);
            running_mean.array()[ch] = (1.0 - momentum) * running_mean.array()[ch] + momentum * mu;
            running_var.array()[ch] = (1.0 - momentum) * running_var.array()[ch] + momentum * var;
        }
        tracked.array()[0] += 1.0;
    } else {
        mean = running_mean.array();
        inv_std = (running_var.array() + epsilon).sqrt().inverse();
    }

    Tensor out({in.n, c, in.h, in.w});
    for (std::int64_t n = 0; n < in.n; ++n) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::int64_t off = (n * c + ch) * hw;
            const double a = gamma.array()[ch] * inv_std[ch];
            const double b = beta.array()[ch] - mean[ch] * a;
            const double* x = input.data() + off;
            double* y = out.data() + off;
            for (std::int64_t j = 0; j < hw; ++j) y[j] = x[j] * a + b;
        }
    }
    check_finite(out, "batch_norm");

    if (tracking({&input, &gamma, &beta})) {
        Impl in_i = input.impl(), g_i = gamma.impl(), b_i = beta.impl();
        const bool need_in = input.requires_grad();
        const bool need_g = gamma.impl()->requires_grad;
        const bool need_b = beta.impl()->requires_grad;
        const Dims4 ind = in;
        // mean/inv_std captured by value: the batch stats in train mode,
        // a snapshot of the running stats in eval mode
        attach(out, {in_i, g_i, b_i},
               [=](const Eigen::ArrayXd& go) {
                   const std::int64_t chw = ind.c * hw;
                   Eigen::ArrayXd sum_go = Eigen::ArrayXd::Zero(ind.c);
                   Eigen::ArrayXd sum_go_xhat = Eigen::ArrayXd::Zero(ind.c);
                   for (std::int64_t n = 0; n < ind.n; ++n) {
                       for (std::int64_t ch = 0; ch < ind.c; ++ch) {
                           const std::int64_t off = n * chw + ch * hw;
                           const double* g = go.data() + off;
                           const double* x = in_i->data.data() + off;
                           double sg = 0.0, sgx = 0.0;
                           for (std::int64_t j = 0; j < hw; ++j) {
                               sg += g[j];
                               sgx += g[j] * (x[j] - mean[ch]);
                           }
                           sum_go[ch] += sg;
                           sum_go_xhat[ch] += sgx * inv_std[ch];
                       }
                   }
                   if (need_g) g_i->accumulate(sum_go_xhat);
                   if (need_b) b_i->accumulate(sum_go);
                   if (need_in) {
                       Eigen::ArrayXd din(in_i->data.size());
                       const double inv_m = 1.0 / static_cast<double>(m);
                       for (std::int64_t n = 0; n < ind.n; ++n) {
                           for (std::int64_t ch = 0; ch < ind.c; ++ch) {
                               const std::int64_t off = n * chw + ch * hw;
                               const double* g = go.data() + off;
                               const double* x = in_i->data.data() + off;
                               double* d = din.data() + off;
                               const double a = g_i->data[ch] * inv_std[ch];
                               if (train) {
                                   const double c1 = a * sum_go[ch] * inv_m;
                                   const double c2 =
                                       a * inv_std[ch] * sum_go_xhat[ch] * inv_m;
                                   const double mu = mean[ch];
                                   for (std::int64_t j = 0; j < hw; ++j)
                                       d[j] = a * g[j] - c1 - c2 * (x[j] - mu);
                               } else {
                                   for (std::int64_t j = 0; j < hw; ++j) d[j] = a * g[j];
                               }
                           }
                       }
                       in_i->accumulate(std::move(din));
                   }
               });
    }
    return out;
}

Tensor instance_norm(const Tensor& input, double epsilon) {
    const Dims4 in = dims4(input, "instance_norm", "input");
    const std::int64_t hw = in.h * in.w;
    if (hw < 2) throw TensorError("instance_norm: needs at least 2 spatial elements");

    const std::int64_t groups = in.n * in.c;
    Eigen::ArrayXd mean(groups), inv_std(groups);
    Tensor out({in.n, in.c, in.h, in.w});
    for (std::int64_t g = 0; g < groups; ++g) {
        const double* x = input.data() + g * hw;
        double sum = 0.0;
        for (std::int64_t j = 0; j < hw; ++j) sum += x[j];
        double mu = sum / static_cast<double>(hw);
        double residual = 0.0;
        for (std::int64_t j = 0; j < hw; ++j) residual += x[j] - mu;
        mu += residual / static_cast<double>(hw);  // constant channels stay exact
        double ss = 0.0;
        for (std::int64_t j = 0; j < hw; ++j) ss += (x[j] - mu) * (x[j] - mu);
        mean[g] = mu;
        inv_std[g] = 1.0 / std::sqrt(ss / static_cast<double>(hw) + epsilon);
        double* y = out.data() + g * hw;
        const double a = inv_std[g];
        for (std::int64_t j = 0; j < hw; ++j) y[j] = (x[j] - mu) * a;
    }
    check_finite(out, "instance_norm");

    if (tracking({&input})) {
        Impl in_i = input.impl();
        attach(out, {in_i},
               [=](const Eigen::ArrayXd& go) {
                   Eigen::ArrayXd din(in_i->data.size());
                   const double inv_m = 1.0 / static_cast<double>(hw);
                   for (std::int64_t g = 0; g < groups; ++g) {
                       const double* gd = go.data() + g * hw;
                       const double* x = in_i->data.data() + g * hw;
                       double* d = din.data() + g * hw;
                       const double a = inv_std[g], mu = mean[g];
                       double sg = 0.0, sgx = 0.0;
                       for (std::int64_t j = 0; j < hw; ++j) {
                           sg += gd[j];
                           sgx += gd[j] * (x[j] - mu);
                       }
                       const double c1 = sg * inv_m;
                       const double c2 = sgx * a * a * inv_m;
                       for (std::int64_t j = 0; j < hw; ++j)
                           d[j] = a * (gd[j] - c1 - c2 * (x[j] - mu));
                   }
                   in_i->accumulate(std::move(din));
               });
    }
    return out;
}

Tensor relu(const Tensor& input) {
    Tensor out(input.shape());
    out.array() = input.array().max(0.0);
    check_finite(out, "relu");
    if (tracking({&input})) {
        Impl in_i = input.impl();
        attach(out, {in_i}, [=](const Eigen::ArrayXd& go) {
            Eigen::ArrayXd din(go.size());
            const double* x = in_i->data.data();
            for (Eigen::Index j = 0; j < go.size(); ++j) din[j] = x[j] > 0.0 ? go[j] : 0.0;
            in_i->accumulate(std::move(din));
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& input) {
    Tensor out(input.shape());
    out.array() = 1.0 / (1.0 + (-input.array()).exp());
    check_finite(out, "sigmoid");
    if (tracking({&input})) {
        Impl in_i = input.impl();
        Eigen::ArrayXd y = out.array();  // saved output, copied to avoid a graph cycle
        attach(out, {in_i}, [=](const Eigen::ArrayXd& go) {
            in_i->accumulate(go * y * (1.0 - y));
        });
    }
    return out;
}

Tensor max_pool2x2(const Tensor& input) {
    const Dims4 in = dims4(input, "max_pool2x2", "input");
    if (in.h % 2 != 0 || in.w % 2 != 0)
        throw TensorError("max_pool2x2: spatial extents must be even, got " +
                          shape_str(input.shape()));
    const std::int64_t ho = in.h / 2, wo = in.w / 2;
    Tensor out({in.n, in.c, ho, wo});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
    const double* src = input.data();
    double* dst = out.data();
    std::int64_t oi = 0;
    for (std::int64_t nc = 0; nc < in.n * in.c; ++nc) {
        const double* plane = src + nc * in.h * in.w;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                // scan in row-major window order; strict > keeps the first max
                std::int64_t best = (2 * oy) * in.w + 2 * ox;
                double bv = plane[best];
                const std::int64_t cand[3] = {(2 * oy) * in.w + 2 * ox + 1,
                                              (2 * oy + 1) * in.w + 2 * ox,
                                              (2 * oy + 1) * in.w + 2 * ox + 1};
                for (std::int64_t idx : cand) {
                    if (plane[idx] > bv) {
                        bv = plane[idx];
                        best = idx;
                    }
                }
                dst[oi] = bv;
                argmax[static_cast<std::size_t>(oi)] = nc * in.h * in.w + best;
                ++oi;
            }
        }
    }
    check_finite(out, "max_pool2x2");
    if (tracking({&input})) {
        Impl in_i = input.impl();
        attach(out, {in_i}, [=, am = std::move(argmax)](const Eigen::ArrayXd& go) {
            Eigen::ArrayXd din = Eigen::ArrayXd::Zero(in_i->data.size());
            for (std::int64_t i = 0; i < go.size(); ++i)
                din[am[static_cast<std::size_t>(i)]] += go[i];
            in_i->accumulate(std::move(din));
        });
    }
    return out;
}

Tensor upsample_nearest2x(const Tensor& input) {
    const Dims4 in = dims4(input, "upsample_nearest2x", "input");
    const std::int64_t ho = in.h * 2, wo = in.w * 2;
    Tensor out({in.n, in.c, ho, wo});
    const double* src = input.data();
    double* dst = out.data();
    for (std::int64_t nc = 0; nc < in.n * in.c; ++nc) {
        const double* sp = src + nc * in.h * in.w;
        double* dp = dst + nc * ho * wo;
        for (std::int64_t y = 0; y < in.h; ++y) {
            for (std::int64_t x = 0; x < in.w; ++x) {
                const double v = sp[y * in.w + x];
                dp[(2 * y) * wo + 2 * x] = v;
                dp[(2 * y) * wo + 2 * x + 1] = v;
                dp[(2 * y + 1) * wo + 2 * x] = v;
                dp[(2 * y + 1) * wo + 2 * x + 1] = v;
            }
        }
    }
    if (tracking({&input})) {
        Impl in_i = input.impl();
        const Dims4 ind = in;
        attach(out, {in_i}, [=](const Eigen::ArrayXd& go) {
            Eigen::ArrayXd din(in_i->data.size());
            for (std::int64_t nc = 0; nc < ind.n * ind.c; ++nc) {
                const double* gp = go.data() + nc * ho * wo;
                double* dp = din.data() + nc * ind.h * ind.w;
                for (std::int64_t y = 0; y < ind.h; ++y)
                    for (std::int64_t x = 0; x < ind.w; ++x)
                        dp[y * ind.w + x] = gp[(2 * y) * wo + 2 * x] +
                                            gp[(2 * y) * wo + 2 * x + 1] +
                                            gp[(2 * y + 1) * wo + 2 * x] +
                                            gp[(2 * y + 1) * wo + 2 * x + 1];
            }
            in_i->accumulate(std::move(din));
        });
    }
    return out;
}

Tensor global_avg_pool(const Tensor& input) {
    const Dims4 in = dims4(input, "global_avg_pool", "input");
    const std::int64_t hw = in.h * in.w;
    Tensor out({in.n, in.c});
    for (std::int64_t nc = 0; nc < in.n * in.c; ++nc)
        out.data()[nc] = Eigen::Map<const Eigen::ArrayXd>(input.data() + nc * hw, hw).mean();
    check_finite(out, "global_avg_pool");
    if (tracking({&input})) {
        Impl in_i = input.impl();
        attach(out, {in_i}, [=](const Eigen::ArrayXd& go) {
            Eigen::ArrayXd din(in_i->data.size());
            const double inv = 1.0 / static_cast<double>(hw);
            for (std::int64_t nc = 0; nc < go.size(); ++nc)
                Eigen::Map<Eigen::ArrayXd>(din.data() + nc * hw, hw).setConstant(go[nc] * inv);
            in_i->accumulate(std::move(din));
        });
    }
    return out;
}

Tensor fully_connected(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.rank() != 2)
        throw TensorError("fully_connected: input must be rank 2, got " + shape_str(input.shape()));
    const std::int64_t n = input.dim(0), f = input.dim(1);
    if (weight.rank() != 2 || weight.dim(1) != f)
        throw TensorError("fully_connected: weight must be [out, " + std::to_string(f) +
                          "], got " + shape_str(weight.shape()));
    const std::int64_t o = weight.dim(0);
    if (bias.rank() != 1 || bias.dim(0) != o)
        throw TensorError("fully_connected: bias must be [" + std::to_string(o) + "], got " +
                          shape_str(bias.shape()));

    Tensor out({n, o});
    MapConstRowMat x(input.data(), n, f), w(weight.data(), o, f);
    MapRowMat y(out.data(), n, o);
    y.noalias() = x * w.transpose();
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data(), o);
    check_finite(out, "fully_connected");

    if (tracking({&input, &weight, &bias})) {
        Impl in_i = input.impl(), w_i = weight.impl(), b_i = bias.impl();
        const bool need_in = input.requires_grad();
        const bool need_w = weight.requires_grad();
        const bool need_b = bias.requires_grad();
        attach(out, {in_i, w_i, b_i}, [=](const Eigen::ArrayXd& go) {
            MapConstRowMat g(go.data(), n, o);
            if (need_in) {
                Eigen::ArrayXd din(in_i->data.size());
                MapConstRowMat wm(w_i->data.data(), o, f);
                MapRowMat(din.data(), n, f).noalias() = g * wm;
                in_i->accumulate(din);
            }
            if (need_w) {
                Eigen::ArrayXd dw(w_i->data.size());
                MapConstRowMat xm(in_i->data.data(), n, f);
                MapRowMat(dw.data(), o, f).noalias() = g.transpose() * xm;
                w_i->accumulate(dw);
            }
            if (need_b) b_i->accumulate(g.colwise().sum().array().transpose());
        });
    }
    return out;
}

Tensor softmax(const Tensor& input) {
    if (input.rank() != 2)
        throw TensorError("softmax: input must be rank 2, got " + shape_str(input.shape()));
    const std::int64_t n = input.dim(0), c = input.dim(1);
    Tensor out({n, c});
    for (std::int64_t r = 0; r < n; ++r) {
        auto x = Eigen::Map<const Eigen::ArrayXd>(input.data() + r * c, c);
        auto y = Eigen::Map<Eigen::ArrayXd>(out.data() + r * c, c);
        y = (x - x.maxCoeff()).exp();
        y /= y.sum();
    }
    check_finite(out, "softmax");
    if (tracking({&input})) {
        Impl in_i = input.impl();
        Eigen::ArrayXd y = out.array();
        attach(out, {in_i}, [=](const Eigen::ArrayXd& go) {
            Eigen::ArrayXd din(in_i->data.size());
            for (std::int64_t r = 0; r < n; ++r) {
                auto yr = Eigen::Map<const Eigen::ArrayXd>(y.data() + r * c, c);
                auto gr = Eigen::Map<const Eigen::ArrayXd>(go.data() + r * c, c);
                const double dot = (gr * yr).sum();
                Eigen::Map<Eigen::ArrayXd>(din.data() + r * c, c) = yr * (gr - dot);
            }
            in_i->accumulate(din);
        });
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const Dims4 da = dims4(a, "concat_channels", "first input");
    const Dims4 db = dims4(b, "concat_channels", "second input");
    if (da.n != db.n || da.h != db.h || da.w != db.w)
        throw TensorError("concat_channels: incompatible shapes " + shape_str(a.shape()) +
                          " and " + shape_str(b.shape()));
    const std::int64_t hw = da.h * da.w;
    Tensor out({da.n, da.c + db.c, da.h, da.w});
    for (std::int64_t n = 0; n < da.n; ++n) {
        std::copy_n(a.data() + n * da.c * hw, da.c * hw, out.data() + n * (da.c + db.c) * hw);
        std::copy_n(b.data() + n * db.c * hw, db.c * hw,
                    out.data() + n * (da.c + db.c) * hw + da.c * hw);
    }
    if (tracking({&a, &b})) {
        Impl a_i = a.impl(), b_i = b.impl();
        const bool need_a = a.requires_grad(), need_b = b.requires_grad();
        attach(out, {a_i, b_i}, [=](const Eigen::ArrayXd& go) {
            if (need_a) {
                Eigen::ArrayXd dda(a_i->data.size());
                for (std::int64_t n = 0; n < da.n; ++n)
                    std::copy_n(go.data() + n * (da.c + db.c) * hw, da.c * hw,
                                dda.data() + n * da.c * hw);
                a_i->accumulate(dda);
            }
            if (need_b) {
                Eigen::ArrayXd ddb(b_i->data.size());
                for (std::int64_t n = 0; n < da.n; ++n)
                    std::copy_n(go.data() + n * (da.c + db.c) * hw + da.c * hw, db.c * hw,
                                ddb.data() + n * db.c * hw);
                b_i->accumulate(ddb);
            }
        });
    }
    return out;
}

Tensor slice_channels(const Tensor& input, std::int64_t c_begin, std::int64_t c_end) {
    const Dims4 in = dims4(input, "slice_channels", "input");
    if (c_begin < 0 || c_end <= c_begin || c_end > in.c)
        throw TensorError("slice_channels: range [" + std::to_string(c_begin) + ", " +
                          std::to_string(c_end) + ") invalid for " + shape_str(input.shape()));
    const std::int64_t cs = c_end - c_begin;
    const std::int64_t hw = in.h * in.w;
    Tensor out({in.n, cs, in.h, in.w});
    for (std::int64_t n = 0; n < in.n; ++n)
        std::copy_n(input.data() + (n * in.c + c_begin) * hw, cs * hw, out.data() + n * cs * hw);
    if (tracking({&input})) {
        Impl in_i = input.impl();
        attach(out, {in_i}, [=](const Eigen::ArrayXd& go) {
            Eigen::ArrayXd din = Eigen::ArrayXd::Zero(in_i->data.size());
            for (std::int64_t n = 0; n < in.n; ++n)
                Eigen::Map<Eigen::ArrayXd>(din.data() + (n * in.c + c_begin) * hw, cs * hw) =
                    Eigen::Map<const Eigen::ArrayXd>(go.data() + n * cs * hw, cs * hw);
            in_i->accumulate(din);
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw TensorError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    Tensor out(a.shape());
    out.array() = a.array() + b.array();
    check_finite(out, "add");
    if (tracking({&a, &b})) {
        Impl a_i = a.impl(), b_i = b.impl();
        const bool need_a = a.requires_grad(), need_b = b.requires_grad();
        attach(out, {a_i, b_i}, [=](const Eigen::ArrayXd& go) {
            if (need_a) a_i->accumulate(go);
            if (need_b) b_i->accumulate(go);
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw TensorError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    Tensor out(a.shape());
    out.array() = a.array() * b.array();
    check_finite(out, "mul");
    if (tracking({&a, &b})) {
        Impl a_i = a.impl(), b_i = b.impl();
        const bool need_a = a.requires_grad(), need_b = b.requires_grad();
        attach(out, {a_i, b_i}, [=](const Eigen::ArrayXd& go) {
            if (need_a) a_i->accumulate(go * b_i->data);
            if (need_b) b_i->accumulate(go * a_i->data);
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double factor) {
    Tensor out(a.shape());
    out.array() = a.array() * factor;
    check_finite(out, "scale");
    if (tracking({&a})) {
        Impl a_i = a.impl();
        attach(out, {a_i},
               [=](const Eigen::ArrayXd& go) { a_i->accumulate(go * factor); });
    }
    return out;
}

Tensor reshape(const Tensor& input, Shape shape) {
    if (shape_numel(shape) != input.numel())
        throw TensorError("reshape: cannot view " + shape_str(input.shape()) + " as " +
                          shape_str(shape));
    Tensor out(std::move(shape));
    out.array() = input.array();
    if (tracking({&input})) {
        Impl in_i = input.impl();
        attach(out, {in_i}, [=](const Eigen::ArrayXd& go) { in_i->accumulate(go); });
    }
    return out;
}

Tensor dice_loss(const Tensor& pred, const Tensor& target, double epsilon) {
    if (!pred.same_shape(target))
        throw TensorError("dice_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                          shape_str(target.shape()));
    const auto& g = target.array();
    if (((g != 0.0) && (g != 1.0)).any())
        throw TensorError("dice_loss: target must be exactly binary");

    const double inter = (pred.array() * g).sum();
    const double denom = pred.array().sum() + g.sum() + epsilon;
    const double loss = 1.0 - (2.0 * inter + epsilon) / denom;
    Tensor out = Tensor::scalar(loss);
    check_finite(out, "dice_loss");
    if (tracking({&pred})) {
        Impl p_i = pred.impl(), t_i = target.impl();
        const double num = 2.0 * inter + epsilon;
        attach(out, {p_i, t_i}, [=](const Eigen::ArrayXd& go) {
            // d/dp of -(2*sum(p*g)+eps)/D with dD/dp = 1
            p_i->accumulate(go[0] * (num - 2.0 * t_i->data * denom) / (denom * denom));
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& probs, const std::vector<std::int64_t>& labels) {
    if (probs.rank() != 2)
        throw TensorError("cross_entropy: probs must be rank 2, got " + shape_str(probs.shape()));
    const std::int64_t n = probs.dim(0), c = probs.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw TensorError("cross_entropy: got " + std::to_string(labels.size()) +
                          " labels for " + std::to_string(n) + " rows");
    constexpr double kClamp = 1e-12;
    double total = 0.0;
    for (std::int64_t r = 0; r < n; ++r) {
        const std::int64_t l = labels[static_cast<std::size_t>(r)];
        if (l < 0 || l >= c)
            throw TensorError("cross_entropy: label " + std::to_string(l) +
                              " out of range for " + std::to_string(c) + " classes");
        total += -std::log(std::max(probs.array()[r * c + l], kClamp));
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(n));
    check_finite(out, "cross_entropy");
    if (tracking({&probs})) {
        Impl p_i = probs.impl();
        auto lab = labels;
        attach(out, {p_i}, [=](const Eigen::ArrayXd& go) {
            Eigen::ArrayXd din = Eigen::ArrayXd::Zero(p_i->data.size());
            const double w = go[0] / static_cast<double>(n);
            for (std::int64_t r = 0; r < n; ++r) {
                const std::int64_t idx = r * c + lab[static_cast<std::size_t>(r)];
                const double p = p_i->data[idx];
                if (p > kClamp) din[idx] = -w / p;
            }
            p_i->accumulate(din);
        });
    }
    return out;
}

}  // namespace fedseg
