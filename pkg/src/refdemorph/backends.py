"""Frozen backends: synthesis generator, its inverse encoder, face recognizer,
perceptual feature extractor, plus the one trainable piece (the discriminator).

The toy backends form an analytically invertible world.  The generator is a
linear per-scale decoder: feature-map channels are bilinearly upsampled and
channel-mixed, later style layers paint coarser smooth basis images on top.
Because the whole map is linear with a controlled spectrum, the encoder is its
Moore-Penrose pseudo-inverse and recovers feature map and style tail exactly
for any image in the generator's range.

At reference scale these roles are played by a StyleGAN-family synthesis
network (1024-level, 18 style layers of dim 512, features injected at layer 9
as 512x64x64) with a GAN-inversion encoder, a deep face recognizer, and a
deep perceptual stack.  Those adapters plug in through the protocols at the
bottom of this module; only the toy implementations ship here.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as tf

from .core import DecodeError, ShapeMismatch

DTYPE = torch.float64


@dataclass(frozen=True)
class BackendConfig:
    """Geometry of the synthesis world and its fixed random seed.

    Defaults are the toy scale.  The reference scale would be
    image_size=256, latent_layers=18, latent_dim=512, feat_channels=512,
    feat_size=64, injection_layer=9, frs_dim=512.
    """

    image_size: int = 16
    latent_layers: int = 4         # style depth N
    latent_dim: int = 8
    feat_channels: int = 8
    feat_size: int = 8             # spatial side of the injected feature map
    injection_layer: int = 2       # k: features replace synthesis up to this layer
    frs_dim: int = 16
    seed: int = 1234

    def __post_init__(self):
        if self.image_size < 4 or self.feat_size < 2:
            raise ShapeMismatch("image_size/feat_size too small")
        if not (1 <= self.injection_layer < self.latent_layers):
            raise ShapeMismatch("injection_layer must lie in [1, latent_layers)")
        for name in ("latent_layers", "latent_dim", "feat_channels", "frs_dim"):
            if getattr(self, name) < 1:
                raise ShapeMismatch(f"{name} must be positive")

    @property
    def tail_layers(self) -> int:
        """Style layers consumed by synthesis after the injection point."""
        return self.latent_layers - self.injection_layer

    @property
    def feat_numel(self) -> int:
        return self.feat_channels * self.feat_size * self.feat_size

    @property
    def image_numel(self) -> int:
        return 3 * self.image_size * self.image_size


# --------------------------------------------------------------------------
# fixed random smooth weight helpers
# --------------------------------------------------------------------------

def _smooth_stack(rng: np.random.Generator, count: int, ch: int, h: int, w: int,
                  blur: float, white: float) -> np.ndarray:
    """Stack of random images, Gaussian-smoothed with a small white-noise part.

    The white component keeps the stack full rank; wrap-around smoothing keeps
    it stationary.
    """
    x = rng.standard_normal((count, ch, h, w))
    r = max(1, int(3 * blur))
    taps = np.arange(-r, r + 1)
    g = np.exp(-0.5 * (taps / blur) ** 2)
    g /= g.sum()
    s = np.zeros_like(x)
    for k, gk in zip(taps, g):
        s += gk * np.roll(x, int(k), axis=2)
    out = np.zeros_like(s)
    for k, gk in zip(taps, g):
        out += gk * np.roll(s, int(k), axis=3)
    out /= out.std()
    return (1.0 - white) * out + white * x


def _bilinear_matrix(src: int, dst: int) -> torch.Tensor:
    """(dst*dst, src*src) matrix applying bilinear resize to one channel."""
    eye = torch.eye(src * src, dtype=DTYPE).reshape(src * src, 1, src, src)
    up = tf.interpolate(eye, size=(dst, dst), mode="bilinear", align_corners=False)
    return up.reshape(src * src, dst * dst).T.contiguous()


def _as_batch(x: torch.Tensor, rank: int) -> tuple[torch.Tensor, bool]:
    if x.ndim == rank:
        return x.unsqueeze(0), True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeMismatch(f"expected rank {rank} or {rank + 1}, got {x.ndim}")


# --------------------------------------------------------------------------
# generator / encoder
# --------------------------------------------------------------------------

class ToyGenerator:
    """Linear decoder from (feature map, style tail) to an image.

    Construction: bilinear upsampling of each feature channel followed by a
    random channel mix produces the base image; each tail style layer adds a
    linear combination of progressively smoother fixed basis images.  The
    assembled matrix is re-conditioned to a [0.5, 1] singular spectrum so the
    pseudo-inverse stays numerically benign.
    """

    def __init__(self, cfg: BackendConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        s, fs = cfg.image_size, cfg.feat_size
        n_pix, n_feat = cfg.image_numel, cfg.feat_numel
        n_tail = cfg.tail_layers * cfg.latent_dim

        up = _bilinear_matrix(fs, s).numpy()                 # (s*s, fs*fs)
        # each feature channel paints through its own smooth modulation field;
        # a unit of coordinate (channel c, cell q) contributes the upsampled
        # q-th cell times channel c's field
        fields = _smooth_stack(rng, cfg.feat_channels, 3, s, s, blur=1.2, white=0.2)
        fields = fields.reshape(cfg.feat_channels, 3, s * s)
        cols_f = np.einsum("pq,cop->cqop", up, fields).reshape(n_feat, n_pix)
        # per-scale style bases: deeper layers get coarser smoothing
        blurs = np.linspace(2.0, 1.2, cfg.tail_layers)
        cols_w = np.concatenate([
            _smooth_stack(rng, cfg.latent_dim, 3, s, s, blur=float(b), white=0.15)
            .reshape(cfg.latent_dim, n_pix)
            for b in blurs
        ], axis=0)
        m = np.concatenate([cols_f, cols_w], axis=0).T       # (n_pix, n_feat+n_tail)
        u, sv, vt = np.linalg.svd(m, full_matrices=False)
        m = u @ np.diag(np.linspace(1.0, 0.5, sv.size)) @ vt
        self.matrix = torch.tensor(m, dtype=DTYPE)

    def synthesize(self, feat: torch.Tensor, w_tail: torch.Tensor) -> torch.Tensor:
        """Decode (B, C, h, h) features and (B, tail, dim) styles to images."""
        feat, single = _as_batch(feat, 3)
        w_tail, _ = _as_batch(w_tail, 2)
        cfg = self.cfg
        if feat.shape[1:] != (cfg.feat_channels, cfg.feat_size, cfg.feat_size):
            raise ShapeMismatch(f"feature map shape {tuple(feat.shape[1:])} wrong")
        if w_tail.shape[1:] != (cfg.tail_layers, cfg.latent_dim):
            raise ShapeMismatch(f"style tail shape {tuple(w_tail.shape[1:])} wrong")
        x = torch.cat([feat.reshape(feat.shape[0], -1),
                       w_tail.reshape(w_tail.shape[0], -1)], dim=1)
        img = (x @ self.matrix.T).reshape(-1, 3, cfg.image_size, cfg.image_size)
        return img[0] if single else img

    def parameters_for_digest(self) -> list[tuple[str, np.ndarray]]:
        return [("generator.matrix", self.matrix.numpy())]


class ToyEncoder:
    """Exact inverse of the toy generator on its range.

    The style/feature part is the Moore-Penrose pseudo-inverse (computed once
    at construction); style layers before the injection point are not used by
    synthesis, so they come from a fixed random projection of the image.
    """

    def __init__(self, cfg: BackendConfig, generator: ToyGenerator):
        self.cfg = cfg
        pinv = np.linalg.pinv(generator.matrix.numpy())
        self.pinv = torch.tensor(pinv, dtype=DTYPE)
        rng = np.random.default_rng(cfg.seed + 1)
        head = rng.standard_normal(
            (cfg.injection_layer * cfg.latent_dim, cfg.image_numel))
        self.head_proj = torch.tensor(head / np.sqrt(cfg.image_numel), dtype=DTYPE)

    def encode(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (w, feat): (B, N, dim) full style stack and (B, C, h, h)."""
        image, single = _as_batch(image, 3)
        cfg = self.cfg
        if image.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise ShapeMismatch(f"image shape {tuple(image.shape[1:])} wrong for encoder")
        flat = image.reshape(image.shape[0], -1)
        x = flat @ self.pinv.T
        feat = x[:, :cfg.feat_numel].reshape(-1, cfg.feat_channels,
                                             cfg.feat_size, cfg.feat_size)
        tail = x[:, cfg.feat_numel:].reshape(-1, cfg.tail_layers, cfg.latent_dim)
        head = (flat @ self.head_proj.T).reshape(-1, cfg.injection_layer, cfg.latent_dim)
        w = torch.cat([head, tail], dim=1)
        if single:
            return w[0], feat[0]
        return w, feat

    def parameters_for_digest(self) -> list[tuple[str, np.ndarray]]:
        return [("encoder.pinv", self.pinv.numpy()),
                ("encoder.head_proj", self.head_proj.numpy())]


# --------------------------------------------------------------------------
# face recognizer
# --------------------------------------------------------------------------

class ToyFaceRecognizer:
    """Fixed linear embedding with spatially smoothed projection rows.

    Per-channel mean removal makes the embedding invariant to global
    illumination shifts; smoothing attenuates white capture noise.  Two
    captures of the same identity land above `mated_threshold`, distinct
    identities below it (measured over 1,000 toy identity pairs).
    """

    mated_threshold = 0.90

    def __init__(self, cfg: BackendConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed + 2)
        rows = _smooth_stack(rng, cfg.frs_dim, 3, cfg.image_size, cfg.image_size,
                             blur=1.5, white=0.05)
        self.proj = torch.tensor(rows.reshape(cfg.frs_dim, cfg.image_numel),
                                 dtype=DTYPE)

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        image, single = _as_batch(image, 3)
        s = self.cfg.image_size
        if image.shape[1:] != (3, s, s):
            raise ShapeMismatch(f"image shape {tuple(image.shape[1:])} wrong for FRS")
        im = image.reshape(image.shape[0], 3, -1)
        im = im - im.mean(dim=2, keepdim=True)
        e = im.reshape(im.shape[0], -1) @ self.proj.T
        e = e / e.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return e[0] if single else e

    def similarity(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Cosine similarity between the embeddings of two image batches."""
        ea, eb = self.embed(a), self.embed(b)
        return (ea * eb).sum(dim=-1)

    def parameters_for_digest(self) -> list[tuple[str, np.ndarray]]:
        return [("frs.proj", self.proj.numpy())]


# --------------------------------------------------------------------------
# perceptual stack
# --------------------------------------------------------------------------

class ToyPerceptual:
    """Three-stage strided random conv stack with channel normalization."""

    def __init__(self, cfg: BackendConfig):
        self.cfg = cfg
        g = torch.Generator().manual_seed(cfg.seed + 3)
        def w(co, ci, scale):
            return torch.randn(co, ci, 3, 3, generator=g, dtype=DTYPE) * scale
        self.weights = [w(8, 3, 0.3), w(16, 8, 0.2), w(16, 16, 0.2)]

    def features(self, image: torch.Tensor) -> list[torch.Tensor]:
        image, single = _as_batch(image, 3)
        s = self.cfg.image_size
        if image.shape[1:] != (3, s, s):
            raise ShapeMismatch(f"image shape {tuple(image.shape[1:])} wrong for perceptual")
        out = []
        h = image
        for wgt in self.weights:
            h = tf.leaky_relu(tf.conv2d(h, wgt, stride=2, padding=1), 0.2)
            out.append(h / (h.norm(dim=1, keepdim=True) + 1e-8))
        if single:
            return [f[0] for f in out]
        return out

    def parameters_for_digest(self) -> list[tuple[str, np.ndarray]]:
        return [(f"perceptual.conv{i}", w.numpy()) for i, w in enumerate(self.weights)]


# --------------------------------------------------------------------------
# discriminator (trainable)
# --------------------------------------------------------------------------

class Discriminator(nn.Module):
    """Small strided conv classifier emitting one realism logit per image.

    No normalization layers: the gradient penalty differentiates through the
    forward pass twice, which plain convs and leaky relus handle cleanly.
    """

    def __init__(self, image_size: int, width: int = 8):
        super().__init__()
        s = image_size // 4
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.LeakyReLU(0.2),
            nn.Flatten(), nn.Linear(2 * width * s * s, 1))
        self.to(DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(1)


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

def preprocess(image: torch.Tensor, image_size: int) -> torch.Tensor:
    """Resize a raw (3, H, W) image to the working size and clamp to [-1, 1].

    An already conforming image is returned unchanged.  Raises DecodeError for
    malformed input (wrong rank/channels or non-finite values).
    """
    if not isinstance(image, torch.Tensor):
        image = torch.as_tensor(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DecodeError(f"expected (3, H, W) image, got {tuple(image.shape)}")
    if not torch.isfinite(image).all():
        raise DecodeError("image contains non-finite values")
    image = image.to(DTYPE)
    if image.shape[1] == image_size and image.shape[2] == image_size \
            and float(image.abs().max()) <= 1.0:
        return image
    out = tf.interpolate(image.unsqueeze(0), size=(image_size, image_size),
                         mode="bilinear", align_corners=False)[0]
    return out.clamp(-1.0, 1.0)


# --------------------------------------------------------------------------
# digests and bundle
# --------------------------------------------------------------------------

def parameter_digest(named: Iterable[tuple[str, np.ndarray]]) -> str:
    """Stable hex digest over named parameter arrays (order-sensitive)."""
    h = hashlib.sha256()
    for name, arr in named:
        h.update(name.encode())
        a = np.ascontiguousarray(arr, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def state_dict_digest(module: nn.Module) -> str:
    return parameter_digest(
        (k, v.detach().cpu().numpy()) for k, v in module.state_dict().items())


@dataclass
class ToyBackends:
    """The frozen toy world handed to the demorpher and the evaluation code."""

    cfg: BackendConfig
    generator: ToyGenerator
    encoder: ToyEncoder
    frs: ToyFaceRecognizer
    perceptual: ToyPerceptual

    def digest(self) -> str:
        named = []
        for part in (self.generator, self.encoder, self.frs, self.perceptual):
            named.extend(part.parameters_for_digest())
        return parameter_digest(named)


def build_toy_backends(cfg: BackendConfig | None = None) -> ToyBackends:
    cfg = cfg or BackendConfig()
    gen = ToyGenerator(cfg)
    return ToyBackends(cfg=cfg, generator=gen, encoder=ToyEncoder(cfg, gen),
                       frs=ToyFaceRecognizer(cfg), perceptual=ToyPerceptual(cfg))


# --------------------------------------------------------------------------
# adapter protocols for reference-scale backends
# --------------------------------------------------------------------------

class GeneratorBackend(Protocol):
    def synthesize(self, feat: torch.Tensor, w_tail: torch.Tensor) -> torch.Tensor: ...


class EncoderBackend(Protocol):
    def encode(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]: ...


class FaceRecognizerBackend(Protocol):
    mated_threshold: float
    def embed(self, image: torch.Tensor) -> torch.Tensor: ...


class PerceptualBackend(Protocol):
    def features(self, image: torch.Tensor) -> list[torch.Tensor]: ...
