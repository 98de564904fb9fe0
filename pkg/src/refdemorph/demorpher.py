"""The trainable restoration network and its forward pass.

Three small modules sit between the frozen encoder and generator:

* a feature-space module that subtracts the reference identity from the
  document's injection-scale feature map,
* an image-space module that looks at both raw images and predicts the full
  style stack plus its own feature-map estimate, and
* a fusion module that merges the two feature-map estimates.

The generator then synthesizes the restored image from the fused features and
the predicted style tail.  Checkpoints store all trainable state in one
versioned container so a run can resume or be evaluated elsewhere.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from .core import (DocumentPair, FeatureMap, ImageTensor, LatentCode,
                   ShapeMismatch, StateMismatch, validate_pair)
from .backends import BackendConfig, DTYPE, Discriminator
from .ioutil import write_atomic

CHECKPOINT_FORMAT = "RDEM1"


class ResNetIRBlock(nn.Module):
    """Pre-normalized residual unit: BN, 3x3 conv, BN, PReLU, strided 3x3 conv, BN.

    The shortcut is the identity when shape allows, else a learned strided 1x1
    projection with its own normalization.  A PReLU slope of 1.0 makes the
    block exactly linear at initialization, which keeps the early training
    signal of a near-linear task intact.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1,
                 prelu_init: float = 1.0):
        super().__init__()
        self.bn0 = nn.BatchNorm2d(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.act = nn.PReLU(out_channels, init=prelu_init)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                nn.BatchNorm2d(out_channels))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.bn2(self.conv2(self.act(self.bn1(self.conv1(self.bn0(x))))))
        return y + self.shortcut(x)


class FeatureDemorph(nn.Module):
    """Feature-space pathway: concatenated (document, reference) feature maps in,
    one cleaned feature map out, all at the injection scale."""

    def __init__(self, channels: int, prelu_init: float = 1.0):
        super().__init__()
        c = channels
        self.body = nn.Sequential(
            ResNetIRBlock(2 * c, 2 * c, prelu_init=prelu_init),
            ResNetIRBlock(2 * c, c, prelu_init=prelu_init),
            ResNetIRBlock(c, c, prelu_init=prelu_init),
            ResNetIRBlock(c, c, prelu_init=prelu_init))
        self.channels = c

    def forward(self, f_doc: torch.Tensor, f_ref: torch.Tensor) -> torch.Tensor:
        if f_doc.shape != f_ref.shape or f_doc.shape[1] != self.channels:
            raise ShapeMismatch(
                f"feature inputs {tuple(f_doc.shape)} / {tuple(f_ref.shape)}")
        return self.body(torch.cat([f_doc, f_ref], dim=1))


class ImageDemorph(nn.Module):
    """Pixel-space pathway: both images stacked to six channels in, the full
    style stack and an injection-scale feature estimate out."""

    def __init__(self, cfg: BackendConfig, width: int = 16,
                 prelu_init: float = 1.0):
        super().__init__()
        self.cfg = cfg
        n_down = int(math.log2(cfg.image_size // cfg.feat_size))
        self.stem = nn.Conv2d(6, width, 3, 1, 1)
        self.down = nn.Sequential(*[
            ResNetIRBlock(width, width, stride=2, prelu_init=prelu_init)
            for _ in range(n_down)])
        self.lateral = nn.Conv2d(width, cfg.feat_channels, 3, 1, 1)
        self.tail = ResNetIRBlock(width, 2 * width, stride=2,
                                  prelu_init=prelu_init)
        self.fc = nn.Linear(2 * width, cfg.latent_layers * cfg.latent_dim)

    def forward(self, i_doc: torch.Tensor,
                i_ref: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        s = self.cfg.image_size
        if i_doc.shape[1:] != (3, s, s) or i_ref.shape[1:] != (3, s, s):
            raise ShapeMismatch(
                f"image inputs {tuple(i_doc.shape)} / {tuple(i_ref.shape)}")
        h = self.down(self.stem(torch.cat([i_doc, i_ref], dim=1)))
        f_est = self.lateral(h)
        pooled = self.tail(h).mean(dim=(2, 3))
        w = self.fc(pooled).reshape(-1, self.cfg.latent_layers,
                                    self.cfg.latent_dim)
        return w, f_est


class FeatureFusion(nn.Module):
    """Merge the two feature-map estimates into the generator's input."""

    def __init__(self, channels: int, prelu_init: float = 1.0):
        super().__init__()
        c = channels
        self.body = nn.Sequential(
            ResNetIRBlock(2 * c, c, prelu_init=prelu_init),
            ResNetIRBlock(c, c, prelu_init=prelu_init))
        self.channels = c

    def forward(self, f_a: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
        if f_a.shape != f_b.shape or f_a.shape[1] != self.channels:
            raise ShapeMismatch(
                f"fusion inputs {tuple(f_a.shape)} / {tuple(f_b.shape)}")
        return self.body(torch.cat([f_a, f_b], dim=1))


class DemorpherModel(nn.Module):
    """The three trainable modules plus the geometry they were built for."""

    def __init__(self, cfg: BackendConfig, idm_width: int = 16,
                 prelu_init: float = 1.0):
        super().__init__()
        self.cfg = cfg
        self.fdm = FeatureDemorph(cfg.feat_channels, prelu_init)
        self.idm = ImageDemorph(cfg, idm_width, prelu_init)
        self.ffm = FeatureFusion(cfg.feat_channels, prelu_init)
        self.to(DTYPE)

    def fdm_forward(self, f_doc, f_ref):
        return self.fdm(f_doc, f_ref)

    def idm_forward(self, i_doc, i_ref):
        return self.idm(i_doc, i_ref)

    def ffm_forward(self, f_a, f_b):
        return self.ffm(f_a, f_b)


def demorph_batch(model: DemorpherModel, backends, i_doc: torch.Tensor,
                  i_ref: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor,
                                                torch.Tensor]:
    """Full restoration forward pass on image batches.

    Returns (restored images, fused feature maps, full style stacks); the
    generator consumes only the styles below the injection layer.
    """
    cfg = model.cfg
    _, f_doc = backends.encoder.encode(i_doc)
    _, f_ref = backends.encoder.encode(i_ref)
    f_fdm = model.fdm(f_doc, f_ref)
    w_out, f_idm = model.idm(i_doc, i_ref)
    f_out = model.ffm(f_fdm, f_idm)
    i_out = backends.generator.synthesize(f_out, w_out[:, cfg.injection_layer:])
    return i_out, f_out, w_out


def demorph(pair: DocumentPair, model: DemorpherModel,
            backends) -> tuple[ImageTensor, FeatureMap, LatentCode]:
    """Restore the identity hidden from the reference in a single pair."""
    validate_pair(pair, model.cfg.image_size)
    with torch.no_grad():
        i_out, f_out, w_out = demorph_batch(
            model, backends, pair.document.data.unsqueeze(0),
            pair.reference.data.unsqueeze(0))
    return (ImageTensor(i_out[0].clamp(-1.0, 1.0)), FeatureMap(f_out[0]),
            LatentCode(w_out[0]))


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

@dataclass
class CheckpointState:
    step: int
    config_digest: str
    config: dict
    model_state: dict
    disc_state: dict
    opt_modules_state: Optional[dict]
    opt_disc_state: Optional[dict]


def save_checkpoint(path: str | Path, *, model: DemorpherModel,
                    discriminator: Discriminator, step: int,
                    config_digest: str, config: dict,
                    opt_modules_state: Optional[dict] = None,
                    opt_disc_state: Optional[dict] = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "step": int(step),
        "config_digest": config_digest,
        "config": dict(config),
        "model_state": model.state_dict(),
        "disc_state": discriminator.state_dict(),
        "opt_modules_state": opt_modules_state,
        "opt_disc_state": opt_disc_state,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    write_atomic(path, buf.getvalue())


def load_checkpoint(path: str | Path) -> CheckpointState:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise StateMismatch(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise StateMismatch(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    return CheckpointState(
        step=payload["step"], config_digest=payload["config_digest"],
        config=payload["config"], model_state=payload["model_state"],
        disc_state=payload["disc_state"],
        opt_modules_state=payload.get("opt_modules_state"),
        opt_disc_state=payload.get("opt_disc_state"))
