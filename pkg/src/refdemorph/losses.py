"""Training objectives for the dual-pass demorpher.

Every term is the mini-batch mean of a per-sample value, so the pass weight
tables stay resolution- and batch-independent.  The image-level terms compare
the restored image against the ground-truth contributor; the inverse identity
hinge pushes the restoration away from the reference identity and only fires
on the morphed pass (its bona-fide weight is zero).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import torch
import torch.nn.functional as tf

from .core import (DocumentPair, LossWeights, MissingGroundTruth, PassType,
                   RangeError, ShapeMismatch, TooSmallForScales)
from .backends import DTYPE

# Standard multi-scale structural-similarity weights; the first `scales` are
# renormalized to sum to one when fewer scales are used.
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _batch(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.ndim == 3 else x


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(
            f"{what} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def l2_loss(out: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean squared pixel difference."""
    _same_shape(out, gt, "l2")
    return ((out - gt) ** 2).mean()


def _gaussian_window(size: int, sigma: float, channels: int) -> torch.Tensor:
    t = torch.arange(size, dtype=DTYPE) - (size - 1) / 2
    g = torch.exp(-0.5 * (t / sigma) ** 2)
    g = g / g.sum()
    return (g[:, None] * g[None, :]).expand(channels, 1, size, size).contiguous()


def _ssim_parts(x: torch.Tensor, y: torch.Tensor, win: torch.Tensor,
                channels: int) -> tuple[torch.Tensor, torch.Tensor]:
    # data range is 2 (pixels live in [-1, 1])
    c1, c2 = (0.01 * 2.0) ** 2, (0.03 * 2.0) ** 2
    mu_x = tf.conv2d(x, win, groups=channels)
    mu_y = tf.conv2d(y, win, groups=channels)
    var_x = tf.conv2d(x * x, win, groups=channels) - mu_x ** 2
    var_y = tf.conv2d(y * y, win, groups=channels) - mu_y ** 2
    cov = tf.conv2d(x * y, win, groups=channels) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    cs = (2 * cov + c2) / (var_x + var_y + c2)
    return lum.mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


def ms_ssim(out: torch.Tensor, gt: torch.Tensor, scales: int = 3,
            window_size: int = 3, sigma: float = 1.0) -> torch.Tensor:
    """Per-sample multi-scale structural similarity in [-1, 1]-range images.

    Contrast-structure terms from the coarser scales multiply the luminance
    term from the final scale; negative contrast terms are clamped so the
    weighted geometric mean stays real.
    """
    out, gt = _batch(out), _batch(gt)
    _same_shape(out, gt, "ms-ssim")
    size = min(out.shape[-2], out.shape[-1])
    if size < window_size * 2 ** (scales - 1):
        raise TooSmallForScales(
            f"size {size} below {window_size} * 2**{scales - 1}")
    channels = out.shape[1]
    win = _gaussian_window(window_size, sigma, channels)
    weights = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=DTYPE)
    weights = weights / weights.sum()
    value = torch.ones(out.shape[0], dtype=DTYPE)
    x, y = out, gt
    for i in range(scales):
        lum, cs = _ssim_parts(x, y, win, channels)
        v = lum * cs if i == scales - 1 else cs
        value = value * v.clamp_min(0.0) ** weights[i]
        if i < scales - 1:
            x, y = tf.avg_pool2d(x, 2), tf.avg_pool2d(y, 2)
    return value


def ms_ssim_loss(out: torch.Tensor, gt: torch.Tensor, scales: int = 3,
                 window_size: int = 3, sigma: float = 1.0) -> torch.Tensor:
    """1 - MS-SSIM, averaged over the batch."""
    return (1.0 - ms_ssim(out, gt, scales, window_size, sigma)).mean()


def lpips_loss(out: torch.Tensor, gt: torch.Tensor, perceptual) -> torch.Tensor:
    """Sum over perceptual stages of mean squared feature differences."""
    out, gt = _batch(out), _batch(gt)
    _same_shape(out, gt, "lpips")
    total = torch.zeros((), dtype=DTYPE)
    for fo, fg in zip(perceptual.features(out), perceptual.features(gt)):
        total = total + ((fo - fg) ** 2).mean()
    return total


def id_loss(out: torch.Tensor, gt: torch.Tensor, frs) -> torch.Tensor:
    """1 - cosine similarity between recognizer embeddings."""
    return (1.0 - frs.similarity(_batch(out), _batch(gt))).mean()


def inverse_id_loss(out: torch.Tensor, ref: torch.Tensor, margin_m: float,
                    frs) -> torch.Tensor:
    """Hinge on similarity to the reference: penalize S(out, ref) above margin."""
    s = frs.similarity(_batch(out), _batch(ref))
    return (s - margin_m).clamp_min(0.0).mean()


def feature_loss(f_out: torch.Tensor, f_gt: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between fused and ground-truth feature maps."""
    _same_shape(f_out, f_gt, "feature")
    return ((f_out - f_gt) ** 2).mean()


def adversarial_generator_loss(i_out: torch.Tensor, discriminator) -> torch.Tensor:
    """Non-saturating realism term -log(sigmoid(D(out))), softplus-stabilized."""
    return tf.softplus(-discriminator(_batch(i_out))).mean()


def discriminator_loss(i_gt: torch.Tensor, i_out: torch.Tensor, gamma: float,
                       discriminator) -> torch.Tensor:
    """Logistic real/fake loss with the gradient penalty on real samples.

    The fake branch sees a detached restoration, so this loss never moves the
    demorpher.  The penalty gradient is built with create_graph so the
    discriminator optimizer can differentiate through it.
    """
    real = _batch(i_gt).detach().requires_grad_(True)
    d_real = discriminator(real)
    d_fake = discriminator(_batch(i_out).detach())
    loss = tf.softplus(-d_real).mean() + tf.softplus(d_fake).mean()
    if gamma > 0:
        grad, = torch.autograd.grad(d_real.sum(), real, create_graph=True)
        r1 = grad.reshape(grad.shape[0], -1).pow(2).sum(dim=1).mean()
        loss = loss + 0.5 * gamma * r1
    return loss


@dataclass(frozen=True)
class LossReport:
    """All scalar loss terms of one training step, after batch averaging."""

    l2: float
    ms_ssim: float
    lpips: float
    id: float
    inv_id: float
    feat: float
    adv: float
    im_composite: float
    total: float
    disc: float = math.nan        # filled in once the discriminator step ran

    def with_disc(self, value: float) -> "LossReport":
        return replace(self, disc=value)


def compose_losses(i_out: torch.Tensor, f_out: torch.Tensor, i_gt: torch.Tensor,
                   i_ref: torch.Tensor, weights: LossWeights, backends,
                   discriminator,
                   scales: int = 3) -> tuple[torch.Tensor, LossReport]:
    """Evaluate every weighted term on one batch.

    Returns the differentiable total for the backward pass plus a detached
    report.  The inverse identity hinge is skipped entirely at weight zero so
    the bona fide pass builds no graph through it.
    """
    terms = {
        "l2": l2_loss(i_out, i_gt),
        "ms_ssim": ms_ssim_loss(i_out, i_gt, scales=scales),
        "lpips": lpips_loss(i_out, i_gt, backends.perceptual),
        "id": id_loss(i_out, i_gt, backends.frs),
        "feat": feature_loss(f_out, backends.encoder.encode(_batch(i_gt))[1]),
        "adv": adversarial_generator_loss(i_out, discriminator),
    }
    if weights.lambda_inv_id > 0:
        terms["inv_id"] = inverse_id_loss(i_out, i_ref, weights.margin_m,
                                          backends.frs)
    else:
        terms["inv_id"] = torch.zeros((), dtype=DTYPE)
    im = (weights.lambda_l2 * terms["l2"]
          + weights.lambda_lpips * terms["lpips"]
          + weights.lambda_ms_ssim * terms["ms_ssim"]
          + weights.lambda_id * terms["id"])
    total = (im + weights.lambda_inv_id * terms["inv_id"]
             + weights.lambda_feat * terms["feat"]
             + weights.lambda_adv * terms["adv"])
    vals = {k: float(v.detach()) for k, v in terms.items()}
    report = LossReport(
        l2=vals["l2"], ms_ssim=vals["ms_ssim"], lpips=vals["lpips"],
        id=vals["id"], inv_id=vals["inv_id"], feat=vals["feat"],
        adv=vals["adv"], im_composite=float(im.detach()),
        total=float(total.detach()))
    return total, report


def total_loss(pair: DocumentPair, outputs, pass_type: PassType,
               weights: LossWeights, backends, discriminator,
               scales: int = 3) -> LossReport:
    """Loss report for a single validated pair (inference-style entry point).

    `outputs` is the demorpher's (image, fused features, styles) triple.
    """
    if pair.ground_truth is None:
        raise MissingGroundTruth(f"pair {pair.pair_id} has no ground truth")
    if pass_type is PassType.BONA_FIDE_PASS and weights.lambda_inv_id != 0.0:
        raise RangeError("bona fide pass requires a zero inverse-identity weight")
    i_out, f_out = outputs[0], outputs[1]
    i_out = i_out.data if hasattr(i_out, "data") and not torch.is_tensor(i_out) else i_out
    f_out = f_out.data if hasattr(f_out, "data") and not torch.is_tensor(f_out) else f_out
    _, report = compose_losses(
        _batch(i_out), _batch(f_out), _batch(pair.ground_truth.data),
        _batch(pair.reference.data), weights, backends, discriminator,
        scales=scales)
    return report
