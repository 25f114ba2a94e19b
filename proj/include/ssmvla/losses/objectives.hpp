// Copyright 2026 The ssmvla Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "ssmvla/core/autodiff.hpp"
#include "ssmvla/core/hash.hpp"
#include "ssmvla/core/rng.hpp"
#include "ssmvla/core/tensor.hpp"

namespace ssmvla::losses {

struct LossWeights {
    double lambda_lpips = 1.0;
    double lambda_d = 0.01;
    double lambda_vision = 0.1;
    double lambda_latent = 0.01;

    void validate() const {
        if (lambda_lpips < 0 || lambda_d < 0 || lambda_vision < 0 || lambda_latent < 0) {
            throw std::invalid_argument("LossWeights: weights must be non-negative");
        }
    }
};

/// Pluggable perceptual metric: scalar node measuring pred-vs-gt distance in
/// some feature space, differentiable with respect to pred.
template <typename T>
using PerceptualFn =
    std::function<ag::NodePtr<T>(const ag::NodePtr<T>&, const ag::NodePtr<T>&)>;

/// Default perceptual proxy: L1 distance between frozen random-conv feature
/// maps of the two images (a pretrained perceptual network is out of scope;
/// a fixed random projection preserves the "compare in a feature space, not
/// pixels" role). Images are H x W x 3.
template <typename T>
PerceptualFn<T> default_perceptual(std::uint64_t seed = 7, int patch_size = 8,
                                   int feature_dim = 32) {
    const std::int64_t in_dim = static_cast<std::int64_t>(patch_size) * patch_size * 3;
    Tensor<T> w({in_dim, feature_dim});
    Rng rng(mix_seed(seed, fnv1a("losses.perceptual")));
    rng.fill_normal(w, 1.0 / std::sqrt(static_cast<double>(in_dim)));
    auto wn = ag::constant(std::move(w));
    const int ps = patch_size;
    return [wn, ps](const ag::NodePtr<T>& pred, const ag::NodePtr<T>& gt) {
        auto fp = ag::matmul(ag::patchify(pred, ps), wn);
        auto fg = ag::matmul(ag::patchify(gt, ps), wn);
        return ag::l1(fp, fg);
    };
}

/// Photometric loss: mean squared error plus a weighted perceptual term.
/// The squared-error norm is mean-reduced (documented convention).
template <typename T>
ag::NodePtr<T> rgb_loss(const ag::NodePtr<T>& pred, const Tensor<T>& gt,
                        const LossWeights& w, const PerceptualFn<T>& perceptual = {}) {
    if (!pred->value.same_shape(gt)) {
        throw std::invalid_argument("rgb_loss: shape mismatch " + pred->value.shape_str() +
                                    " vs " + gt.shape_str());
    }
    for (std::int64_t i = 0; i < gt.numel(); ++i) {
        if (!(gt[i] >= T(0) && gt[i] <= T(1))) {
            throw std::invalid_argument("rgb_loss: gt values must lie in [0,1]");
        }
    }
    auto gtn = ag::constant(gt);
    auto loss = ag::mse(pred, gtn);
    if (w.lambda_lpips > 0 && perceptual) {
        loss = ag::add(loss, ag::scale(perceptual(pred, gtn), static_cast<T>(w.lambda_lpips)));
    }
    return loss;
}

/// Per-pixel magnitude of the spatial gradient of an H x W x 3 image: forward
/// differences per channel, channel-mean of sqrt(gx^2 + gy^2).
template <typename T>
Tensor<T> gradient_magnitude(const Tensor<T>& rgb) {
    if (rgb.ndim() != 3) throw std::invalid_argument("gradient_magnitude: want HxWxC");
    const std::int64_t H = rgb.dim(0), W = rgb.dim(1), C = rgb.dim(2);
    Tensor<T> mag = Tensor<T>::zeros({H, W});
    for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x) {
            T acc = T(0);
            for (std::int64_t c = 0; c < C; ++c) {
                const T v = rgb.at(y, x, c);
                const T gx = (x + 1 < W) ? rgb.at(y, x + 1, c) - v : T(0);
                const T gy = (y + 1 < H) ? rgb.at(y + 1, x, c) - v : T(0);
                acc += std::sqrt(gx * gx + gy * gy);
            }
            mag.at(y, x) = acc / static_cast<T>(C);
        }
    }
    return mag;
}

enum class GradientWeighting {
    kPerPixel,  // default: exp(-grad) weights each pixel inside the mean
    kGlobal,    // literal reading: one exp(-mean grad) factor outside the mean
};

/// Gradient-aware logarithmic depth loss. The edge-aware weight exp(-grad) is
/// applied per pixel inside the sum by default: an image-valued gradient
/// cannot scale the summed loss as a single factor, and per-pixel weighting
/// matches the edge-aware intent. The literal outside-the-sum reading stays
/// available behind the flag.
template <typename T>
ag::NodePtr<T> depth_loss(const ag::NodePtr<T>& pred, const Tensor<T>& gt,
                          const Tensor<T>& gt_rgb,
                          GradientWeighting mode = GradientWeighting::kPerPixel) {
    if (!pred->value.same_shape(gt)) {
        throw std::invalid_argument("depth_loss: shape mismatch");
    }
    if (gt_rgb.ndim() != 3 || gt_rgb.dim(0) != gt.dim(0) || gt_rgb.dim(1) != gt.dim(1)) {
        throw std::invalid_argument("depth_loss: rgb/depth geometry mismatch");
    }
    auto abs_err = ag::unary_elementwise(
        ag::sub(pred, ag::constant(gt)), [](T v) { return std::abs(v); },
        [](T in, T) { return in > T(0) ? T(1) : (in < T(0) ? T(-1) : T(0)); });
    auto log_term = ag::unary_elementwise(
        abs_err, [](T v) { return std::log1p(v); },
        [](T in, T) { return T(1) / (T(1) + in); });

    Tensor<T> mag = gradient_magnitude(gt_rgb);
    if (mode == GradientWeighting::kPerPixel) {
        Tensor<T> weight = mag;
        for (std::int64_t i = 0; i < weight.numel(); ++i) weight[i] = std::exp(-weight[i]);
        return ag::mean_all(ag::mul(ag::constant(std::move(weight)), log_term));
    }
    T mean_mag = T(0);
    for (std::int64_t i = 0; i < mag.numel(); ++i) mean_mag += mag[i];
    mean_mag /= static_cast<T>(mag.numel());
    return ag::scale(ag::mean_all(log_term), std::exp(-mean_mag));
}

template <typename T>
struct FramePrediction {
    ag::NodePtr<T> rgb;    // H x W x 3
    ag::NodePtr<T> depth;  // H x W
};

template <typename T>
struct FrameTarget {
    Tensor<T> rgb;
    Tensor<T> depth;
};

template <typename T>
struct ReconBreakdown {
    ag::NodePtr<T> total;
    std::vector<double> rgb_terms;
    std::vector<double> depth_terms;
};

/// Composite reconstruction objective: sum over the predicted key frames of
/// rgb_loss + lambda_d * depth_loss, with per-term values for logging.
template <typename T>
ReconBreakdown<T> recon_loss(const std::vector<FramePrediction<T>>& pred,
                             const std::vector<FrameTarget<T>>& gt, const LossWeights& w,
                             const PerceptualFn<T>& perceptual = {},
                             GradientWeighting mode = GradientWeighting::kPerPixel) {
    if (pred.size() != gt.size() || pred.empty()) {
        throw std::invalid_argument("recon_loss: frame count mismatch");
    }
    ReconBreakdown<T> out;
    ag::NodePtr<T> total;
    for (std::size_t k = 0; k < pred.size(); ++k) {
        auto lr = rgb_loss(pred[k].rgb, gt[k].rgb, w, perceptual);
        auto ld = depth_loss(pred[k].depth, gt[k].depth, gt[k].rgb, mode);
        out.rgb_terms.push_back(static_cast<double>(lr->value[0]));
        out.depth_terms.push_back(static_cast<double>(ld->value[0]));
        auto term = ag::add(lr, ag::scale(ld, static_cast<T>(w.lambda_d)));
        total = total ? ag::add(total, term) : term;
    }
    out.total = total;
    return out;
}

struct AlignmentFit {
    double a = 0.0;
    double b = 0.0;
    double residual = 0.0;
};

/// Closed-form least squares for d_sparse ~ a*d_mono + b via the 2x2 normal
/// equations, in double precision.
inline AlignmentFit align_depth(const std::vector<double>& d_mono,
                                const std::vector<double>& d_sparse) {
    const std::size_t n = d_mono.size();
    if (n != d_sparse.size()) throw std::invalid_argument("align_depth: size mismatch");
    if (n < 2) throw std::invalid_argument("align_depth: need at least 2 points");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sx += d_mono[i];
        sy += d_sparse[i];
        sxx += d_mono[i] * d_mono[i];
        sxy += d_mono[i] * d_sparse[i];
    }
    const double nn = static_cast<double>(n);
    const double det = nn * sxx - sx * sx;
    // det = n * sum((x - mean)^2): vanishes iff the design is constant.
    if (!(det > 1e-12 * (1.0 + sxx * nn))) {
        throw std::invalid_argument("align_depth: singular fit (constant d_mono)");
    }
    AlignmentFit fit;
    fit.a = (nn * sxy - sx * sy) / det;
    fit.b = (sy - fit.a * sx) / nn;
    for (std::size_t i = 0; i < n; ++i) {
        const double r = fit.a * d_mono[i] + fit.b - d_sparse[i];
        fit.residual += r * r;
    }
    if (!std::isfinite(fit.a) || !std::isfinite(fit.b)) {
        throw std::invalid_argument("align_depth: non-finite fit");
    }
    return fit;
}

/// Applies a fit to a full depth map to obtain the pseudo-target a*D + b.
template <typename T>
Tensor<T> apply_alignment(const Tensor<T>& d_mono, const AlignmentFit& fit) {
    Tensor<T> out = d_mono;
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        out[i] = static_cast<T>(fit.a * static_cast<double>(out[i]) + fit.b);
    }
    return out;
}

/// Token-mean cross entropy over latent-action logits. Accepts [M,K] or
/// [N,T_z,K] logits with M = N*T_z flattened targets.
template <typename T>
ag::NodePtr<T> latent_ce(const ag::NodePtr<T>& logits, const std::vector<std::int64_t>& ids) {
    ag::NodePtr<T> flat = logits;
    if (logits->value.ndim() == 3) {
        flat = ag::reshape(logits, {logits->value.dim(0) * logits->value.dim(1),
                                    logits->value.dim(2)});
    }
    const std::int64_t K = flat->value.dim(1);
    for (const std::int64_t id : ids) {
        if (id < 0 || id >= K) {
            throw std::invalid_argument("latent_ce: index out of range [0," +
                                        std::to_string(K) + ")");
        }
    }
    return ag::cross_entropy_mean(flat, ids);
}

/// Velocity field interface for flow matching: x and the conditioning are
/// bound by the caller; tau is the interpolation time.
template <typename T>
using VelocityFn = std::function<ag::NodePtr<T>(const ag::NodePtr<T>&, T
                                                /*tau*/)>;

/// Conditional flow-matching regression: the network evaluated at the
/// interpolant tau*a + (1-tau)*eps must match the target eps - a. Summed
/// squared error (the norm in the objective is a true squared L2 norm).
template <typename T>
ag::NodePtr<T> fm_loss(const VelocityFn<T>& velocity, const Tensor<T>& action,
                       const Tensor<T>& eps, T tau) {
    if (!action.same_shape(eps)) {
        throw std::invalid_argument("fm_loss: action/noise dimension mismatch");
    }
    if (!(tau >= T(0) && tau <= T(1))) throw std::invalid_argument("fm_loss: tau in [0,1]");
    Tensor<T> x = action;
    Tensor<T> target = eps;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        x[i] = tau * action[i] + (T(1) - tau) * eps[i];
        target[i] = eps[i] - action[i];
    }
    auto v = velocity(ag::constant(std::move(x)), tau);
    return ag::sum_squares(ag::sub(v, ag::constant(std::move(target))));
}

/// Plain (inference-time) velocity field over tensors.
template <typename T>
using SampleVelocityFn = std::function<Tensor<T>(const Tensor<T>&, T /*tau*/)>;

/// Euler sampler: from x_0 = eps, x_{m+1} = x_m - (1/steps) * sign * V(x_m,
/// tau_m) with tau_m = m/steps. The minus sign undoes the eps - a target
/// orientation of the training objective (the regressed field is the negative
/// of the interpolant's time derivative); velocity_sign = -1 flips it for
/// fields trained under the opposite convention.
template <typename T>
Tensor<T> fm_sample(const SampleVelocityFn<T>& velocity, const Tensor<T>& eps, int steps,
                    int velocity_sign = +1) {
    if (steps < 1) throw std::invalid_argument("fm_sample: steps must be >= 1");
    if (velocity_sign != 1 && velocity_sign != -1) {
        throw std::invalid_argument("fm_sample: velocity_sign must be +1 or -1");
    }
    Tensor<T> x = eps;
    const T h = T(1) / static_cast<T>(steps);
    for (int m = 0; m < steps; ++m) {
        const T tau = static_cast<T>(m) * h;
        const Tensor<T> v = velocity(x, tau);
        if (!v.same_shape(x)) throw std::invalid_argument("fm_sample: velocity shape");
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            x[i] -= h * static_cast<T>(velocity_sign) * v[i];
        }
    }
    return x;
}

/// Composite policy objective: L_action + lambda_latent*L_latent +
/// lambda_vision*L_vision.
template <typename T>
ag::NodePtr<T> vla_loss(const ag::NodePtr<T>& action, const ag::NodePtr<T>& latent,
                        const ag::NodePtr<T>& vision, const LossWeights& w) {
    return ag::add(action, ag::add(ag::scale(latent, static_cast<T>(w.lambda_latent)),
                                   ag::scale(vision, static_cast<T>(w.lambda_vision))));
}

inline double vla_loss_value(double action, double latent, double vision,
                             const LossWeights& w) {
    if (!std::isfinite(action) || !std::isfinite(latent) || !std::isfinite(vision)) {
        throw std::invalid_argument("vla_loss: non-finite stage loss");
    }
    return action + w.lambda_latent * latent + w.lambda_vision * vision;
}

}  // namespace ssmvla::losses
