"""Shared vocabulary for the demorphing pipeline.

Images travel through the system as channels-first float tensors in [-1, 1]
(after preprocessing), latent codes as per-layer style vectors, and feature
maps as channels-first spatial grids.  Every wrapper type validates finiteness
and shape at construction so downstream code can assume well-formed inputs.

The restoration scenarios mirror the border-control setting: a trusted live
capture is compared against a presented document.  For a morphed document the
identity restored from the pair depends on who is standing at the gate:

  accomplice scenario  -> the criminal presents; the accomplice is restored
  criminal scenario    -> the accomplice presents; the criminal is restored
  bona fide scenario   -> same identity on both sides; output should preserve it
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import torch


# --------------------------------------------------------------------------
# errors
# --------------------------------------------------------------------------

class DemorphError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(DemorphError):
    """A tensor had the wrong rank, channel count, or spatial size."""


class RangeError(DemorphError):
    """Pixel values fell outside the expected [-1, 1] range."""


class MissingGroundTruth(DemorphError):
    """An operation required the ground-truth identity image and none was set."""


class MissingLiveCapture(DemorphError):
    """A document pair lacked the trusted live reference capture."""


class TooSmallForScales(DemorphError):
    """Image too small for the requested number of multi-scale levels."""


class EmptyScoreSet(DemorphError):
    """A metric was asked to summarize zero scores."""


class ScenarioNotApplicable(DemorphError):
    """The metric is undefined for the given restoration scenario."""


class DivisionDomain(DemorphError):
    """A blend coefficient of zero makes the inversion undefined."""


class InsufficientIdentities(DemorphError):
    """Corpus generation needs more identities than were requested."""


class UnknownKind(DemorphError):
    """An unrecognized corruption kind or enum string."""


class DecodeError(DemorphError):
    """Malformed raw image input (wrong channels, non-finite values, bad file)."""


class EmptyDataset(DemorphError):
    """Training demanded samples from an empty corpus split."""


class StateMismatch(DemorphError):
    """Checkpoint or manifest belongs to a different configuration."""


def _require_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise RangeError(f"{what} contains non-finite values")


# --------------------------------------------------------------------------
# tensor wrappers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageTensor:
    """A single channels-first image, shape (3, H, W), finite values."""

    data: torch.Tensor

    def __post_init__(self):
        t = self.data
        if not isinstance(t, torch.Tensor):
            object.__setattr__(self, "data", torch.as_tensor(t))
            t = self.data
        if t.ndim != 3:
            raise ShapeMismatch(f"image must be (C,H,W), got rank {t.ndim}")
        if t.shape[0] != 3:
            raise ShapeMismatch(f"image must have 3 channels, got {t.shape[0]}")
        if t.shape[1] < 1 or t.shape[2] < 1:
            raise ShapeMismatch("image spatial dims must be positive")
        _require_finite(t, "image")

    @property
    def size(self) -> int:
        return int(self.data.shape[-1])


@dataclass(frozen=True)
class LatentCode:
    """Per-layer style vectors, shape (num_layers, dim)."""

    data: torch.Tensor

    def __post_init__(self):
        t = self.data
        if not isinstance(t, torch.Tensor):
            object.__setattr__(self, "data", torch.as_tensor(t))
            t = self.data
        if t.ndim != 2:
            raise ShapeMismatch(f"latent code must be (layers, dim), got rank {t.ndim}")
        _require_finite(t, "latent code")

    @property
    def num_layers(self) -> int:
        return int(self.data.shape[0])


@dataclass(frozen=True)
class FeatureMap:
    """Intermediate synthesis features, shape (C, H, W)."""

    data: torch.Tensor

    def __post_init__(self):
        t = self.data
        if not isinstance(t, torch.Tensor):
            object.__setattr__(self, "data", torch.as_tensor(t))
            t = self.data
        if t.ndim != 3:
            raise ShapeMismatch(f"feature map must be (C,H,W), got rank {t.ndim}")
        _require_finite(t, "feature map")


# --------------------------------------------------------------------------
# scenarios and pairs
# --------------------------------------------------------------------------

class RestorationScenario(enum.Enum):
    ACCOMPLICE = "accomplice"
    CRIMINAL = "criminal"
    BONA_FIDE = "bonafide"

    @classmethod
    def from_string(cls, s: str) -> "RestorationScenario":
        for member in cls:
            if member.value == s:
                return member
        raise UnknownKind(f"unknown scenario {s!r}")

    def __str__(self) -> str:
        return self.value


class IdentityRole(enum.Enum):
    """Which of the pair's contributors a scenario points at."""

    ACCOMPLICE = "accomplice"
    CRIMINAL = "criminal"
    DOCUMENT_HOLDER = "document_holder"


class PassType(enum.Enum):
    """Which half of the alternating training schedule a step belongs to.

    The bona fide pass reconstructs a genuine document from (document, mated
    live capture); the morphed pass restores the hidden contributor from
    (morph, other contributor's reference).
    """

    BONA_FIDE_PASS = "bona_fide"
    MORPHED_PASS = "morphed"

    def __str__(self) -> str:
        return self.value


def target_and_nontarget(
    scenario: RestorationScenario,
) -> tuple[IdentityRole, Optional[IdentityRole]]:
    """Return (restoration target, non-target) roles for a scenario.

    The target is the identity the demorpher should reconstruct; the
    non-target is the identity present in the trusted reference.  A bona fide
    pair has a single identity and no non-target.
    """
    if scenario is RestorationScenario.ACCOMPLICE:
        return IdentityRole.ACCOMPLICE, IdentityRole.CRIMINAL
    if scenario is RestorationScenario.CRIMINAL:
        return IdentityRole.CRIMINAL, IdentityRole.ACCOMPLICE
    return IdentityRole.DOCUMENT_HOLDER, None


@dataclass
class DocumentPair:
    """One evaluation unit: suspected document plus trusted live reference."""

    pair_id: str
    document: ImageTensor          # the presented (possibly morphed) document photo
    reference: Optional[ImageTensor]  # trusted live capture; None = not captured
    scenario: RestorationScenario
    ground_truth: Optional[ImageTensor] = None  # target identity document, if known
    morph_method: str = ""         # "" for bona fide pairs


def validate_pair(pair: DocumentPair, image_size: int) -> None:
    """Check a pair against the configured geometry before inference.

    Raises ShapeMismatch for wrong sizes, RangeError for out-of-range pixels,
    MissingLiveCapture when the trusted reference is absent.
    """
    if pair.reference is None:
        raise MissingLiveCapture(f"pair {pair.pair_id} has no live reference capture")
    for name, img in (("document", pair.document), ("reference", pair.reference)):
        t = img.data
        if t.shape[1] != image_size or t.shape[2] != image_size:
            raise ShapeMismatch(
                f"pair {pair.pair_id}: {name} is {tuple(t.shape[1:])}, "
                f"expected {(image_size, image_size)}"
            )
        if float(t.abs().max()) > 1.0 + 1e-9:
            raise RangeError(f"pair {pair.pair_id}: {name} pixels outside [-1, 1]")


# --------------------------------------------------------------------------
# scores and loss weights
# --------------------------------------------------------------------------

LABEL_BONA_FIDE = "bona_fide"
LABEL_MORPH = "morph"


@dataclass(frozen=True)
class ScoreRecord:
    """One detection score for one evaluated pair."""

    pair_id: str
    label: str                     # LABEL_BONA_FIDE or LABEL_MORPH
    scenario: RestorationScenario
    morph_method: str              # "" for bona fide
    method: str                    # detector / demorpher name
    score: float                   # similarity of reference vs restored output
    score_gt: Optional[float] = None  # similarity of output vs ground truth, morphs only

    def __post_init__(self):
        if self.label not in (LABEL_BONA_FIDE, LABEL_MORPH):
            raise UnknownKind(f"unknown label {self.label!r}")
        if not (-1.0 - 1e-9 <= self.score <= 1.0 + 1e-9):
            raise RangeError(f"score {self.score} outside [-1, 1]")
        if self.score_gt is not None and not (-1.0 - 1e-9 <= self.score_gt <= 1.0 + 1e-9):
            raise RangeError(f"score_gt {self.score_gt} outside [-1, 1]")


@dataclass(frozen=True)
class LossWeights:
    """Coefficients for the composite training objective of one pass."""

    lambda_id: float
    lambda_l2: float
    lambda_lpips: float
    lambda_ms_ssim: float
    lambda_feat: float
    lambda_inv_id: float
    lambda_adv: float
    margin_m: float = -0.5         # hinge margin for the inverse-identity term
    gamma_r1: float = 10.0         # gradient-penalty coefficient (discriminator)

    def __post_init__(self):
        for name in ("lambda_id", "lambda_l2", "lambda_lpips", "lambda_ms_ssim",
                     "lambda_feat", "lambda_inv_id", "lambda_adv"):
            if getattr(self, name) < 0:
                raise RangeError(f"{name} must be non-negative")
        if self.gamma_r1 < 0:
            raise RangeError("gamma_r1 must be non-negative")

    @classmethod
    def bona_fide(cls) -> "LossWeights":
        """Weights used when the document is a genuine photo of the traveler."""
        return cls(lambda_id=0.1, lambda_l2=0.1, lambda_lpips=0.08,
                   lambda_ms_ssim=0.04, lambda_feat=0.01, lambda_inv_id=0.0,
                   lambda_adv=0.01)

    @classmethod
    def morphed(cls) -> "LossWeights":
        """Weights used when the document is a morph and an identity is restored."""
        return cls(lambda_id=1.0, lambda_l2=1.0, lambda_lpips=0.8,
                   lambda_ms_ssim=0.4, lambda_feat=0.1, lambda_inv_id=0.6,
                   lambda_adv=0.01)
