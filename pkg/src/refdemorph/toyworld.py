"""An analytically invertible miniature world for end-to-end testing.

Identities are unit-energy latent vectors; fixed smooth linear maps turn them
into feature maps and style stacks, and the linear toy generator turns those
into images.  Because every stage is linear, a pixel blend of two document
renders is exactly the render of the blended latents, and the encoder recovers
the blended feature map exactly — which is what makes the analytic demorph
oracle possible.

The corpus builder writes a small dataset to disk: per identity a document and
a live capture, plus blend and splice morphs for random and look-alike
pairings, each checked against both contributors at a threshold calibrated on
the corpus itself.  All images are stored as lossless 8-bit PNGs; every
similarity recorded in the manifest is computed on the quantized pixels, so
reloading the corpus reproduces the manifest numbers bit for bit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .core import (DivisionDomain, EmptyDataset, FeatureMap, ImageTensor,
                   InsufficientIdentities, RangeError, ShapeMismatch, UnknownKind)
from .backends import DTYPE, BackendConfig, ToyBackends, _smooth_stack
from .dmad import Threshold, calibrate_threshold
from .ioutil import (load_image_png, requantize, save_image_png, sha256_file,
                     write_atomic)

MANIFEST_NAME = "manifest.json"
PIXEL_BOUND = 0.70   # hard |pixel| bound for document renders, margin under 1.0

SPLIT_TRAIN = "train"
SPLIT_EVAL = "eval"


@dataclass(frozen=True)
class CaptureParams:
    """Live-capture degradation: white pixel noise plus a global illumination shift."""

    noise_sigma: float = 0.02
    illum_range: float = 0.06

    def __post_init__(self):
        if self.noise_sigma < 0 or self.illum_range < 0:
            raise RangeError("capture parameters must be non-negative")


@dataclass(frozen=True)
class CorpusConfig:
    """Knobs for toy corpus generation."""

    n_identities: int = 50
    alpha: float = 0.5             # blend coefficient toward the subject
    methods: tuple[str, ...] = ("blend", "splice")
    capture: CaptureParams = field(default_factory=CaptureParams)
    splice_area: float = 0.44      # fraction of image area the inner square covers
    target_fmr: float = 0.25       # calibration target for the corpus threshold
    holdout_fraction: float = 0.2  # identities reserved for the eval split
    random_pairs: int = 3          # random-pairing morphs per identity and method
    lookalike_pairs: int = 3       # look-alike morphs per identity and method
    lookalike_pool: int = 5        # pool size of near-threshold candidates
    seed: int = 77


@dataclass(frozen=True)
class ToyIdentity:
    ident: str
    z: torch.Tensor                # latent identity vector, fixed norm

    def __post_init__(self):
        if self.z.ndim != 1:
            raise ShapeMismatch("identity vector must be 1-D")


def sample_identities(rng: np.random.Generator, n: int, dim: int) -> torch.Tensor:
    """Draw n identity vectors uniformly on the sphere of radius sqrt(dim).

    The fixed norm keeps every identity at the same render energy, so capture
    noise affects all identities equally.
    """
    z = rng.standard_normal((n, dim))
    z = z / np.linalg.norm(z, axis=1, keepdims=True) * np.sqrt(dim)
    return torch.tensor(z, dtype=DTYPE)


class ToyWorld:
    """Identity-to-image rendering on top of the frozen toy backends."""

    def __init__(self, backends: ToyBackends, pixel_bound: float = PIXEL_BOUND):
        self.backends = backends
        cfg = backends.cfg
        self.id_dim = cfg.latent_dim
        rng = np.random.default_rng(cfg.seed + 10)
        phi = _smooth_stack(rng, self.id_dim, cfg.feat_channels,
                            cfg.feat_size, cfg.feat_size, blur=0.8, white=0.15)
        phi = phi.reshape(self.id_dim, cfg.feat_numel).T          # (n_feat, id_dim)
        psi = rng.standard_normal((cfg.latent_layers * cfg.latent_dim, self.id_dim))
        # scale so |pixel| of a document render can never exceed pixel_bound
        tail = psi[cfg.injection_layer * cfg.latent_dim:]
        composite = backends.generator.matrix.numpy() @ np.vstack([phi, tail])
        row_max = np.sqrt((composite ** 2).sum(axis=1)).max()
        scale = pixel_bound / (row_max * np.sqrt(self.id_dim))
        self.phi = torch.tensor(phi * scale, dtype=DTYPE)
        self.psi = torch.tensor(psi * scale, dtype=DTYPE)

    def feature_of(self, z: torch.Tensor) -> torch.Tensor:
        cfg = self.backends.cfg
        single = z.ndim == 1
        zb = z.unsqueeze(0) if single else z
        f = (zb @ self.phi.T).reshape(-1, cfg.feat_channels, cfg.feat_size, cfg.feat_size)
        return f[0] if single else f

    def styles_of(self, z: torch.Tensor) -> torch.Tensor:
        cfg = self.backends.cfg
        single = z.ndim == 1
        zb = z.unsqueeze(0) if single else z
        w = (zb @ self.psi.T).reshape(-1, cfg.latent_layers, cfg.latent_dim)
        return w[0] if single else w

    def render_document(self, z: torch.Tensor) -> torch.Tensor:
        """Noise-free render straight out of the generator (exactly in range)."""
        cfg = self.backends.cfg
        w = self.styles_of(z)
        tail = w[..., cfg.injection_layer:, :]
        return self.backends.generator.synthesize(self.feature_of(z), tail)

    def render_live(self, z: torch.Tensor, params: CaptureParams,
                    rng: np.random.Generator) -> torch.Tensor:
        """Document render degraded by capture noise and an illumination shift."""
        doc = self.render_document(z)
        noise = torch.tensor(rng.standard_normal(tuple(doc.shape)), dtype=DTYPE)
        shift = float(rng.uniform(-params.illum_range, params.illum_range))
        return (doc + params.noise_sigma * noise + shift).clamp(-1.0, 1.0)


# --------------------------------------------------------------------------
# morph generation and the analytic inverse
# --------------------------------------------------------------------------

def _unwrap(img):
    return img.data if isinstance(img, ImageTensor) else img


def morph_blend(img_a: torch.Tensor | ImageTensor, img_c: torch.Tensor | ImageTensor,
                alpha: float = 0.5) -> torch.Tensor:
    """Pixel blend alpha*a + (1-alpha)*c, clipped to the valid range."""
    a, c = _unwrap(img_a), _unwrap(img_c)
    if a.shape != c.shape:
        raise ShapeMismatch(f"blend inputs differ: {tuple(a.shape)} vs {tuple(c.shape)}")
    if not (0.0 <= alpha <= 1.0):
        raise RangeError(f"alpha {alpha} outside [0, 1]")
    return (alpha * a + (1.0 - alpha) * c).clamp(-1.0, 1.0)


def splice_mask(size: int, area: float = 0.44) -> torch.Tensor:
    """Centered square mask of roughly `area` fraction, shape (1, size, size)."""
    if not (0.0 < area <= 1.0):
        raise RangeError(f"mask area {area} outside (0, 1]")
    side = max(1, int(round(size * float(np.sqrt(area)))))
    side = min(side, size)
    off = (size - side) // 2
    m = torch.zeros(1, size, size, dtype=DTYPE)
    m[:, off:off + side, off:off + side] = 1.0
    return m


def morph_splice(img_a: torch.Tensor | ImageTensor, img_c: torch.Tensor | ImageTensor,
                 alpha: float = 0.5, area: float = 0.44) -> torch.Tensor:
    """Blend only the inner facial region; keep subject a's outer region.

    The result inherits a's pixels exactly outside the mask, which is what
    makes restoring the partner from such a morph ill-posed: their outer
    region never entered the document.
    """
    a, c = _unwrap(img_a), _unwrap(img_c)
    inner = morph_blend(a, c, alpha)
    m = splice_mask(a.shape[-1], area)
    return a * (1.0 - m) + inner * m


def analytic_demorph_oracle(f_morph, f_ref, alpha: float = 0.5):
    """Invert a feature-space blend: recover the hidden contributor's features.

    For a blend morph with coefficient alpha toward the subject,
    F_morph = alpha*F_subject + (1-alpha)*F_ref, so the subject's features are
    (F_morph - (1-alpha)*F_ref) / alpha.  Exact for toy blend morphs because
    encoding is linear; meaningless for splice morphs.
    """
    if alpha == 0.0:
        raise DivisionDomain("alpha = 0 leaves no trace of the hidden contributor")
    wrap = isinstance(f_morph, FeatureMap)
    m = f_morph.data if wrap else f_morph
    r = f_ref.data if isinstance(f_ref, FeatureMap) else f_ref
    out = (m - (1.0 - alpha) * r) / alpha
    return FeatureMap(out) if wrap else out


# --------------------------------------------------------------------------
# corruptions
# --------------------------------------------------------------------------

CORRUPTION_KINDS = ("brightness", "gaussian_noise", "downsample")


def corrupt(image: torch.Tensor | ImageTensor, kind: str, severity: int,
            seed: int = 0) -> torch.Tensor:
    """Apply a deterministic quality degradation; severity 0 is the identity.

    brightness      adds 0.1 * severity to every pixel
    gaussian_noise  adds white noise with sigma 0.05 * severity (seeded)
    downsample      halves each spatial dimension, then resizes back up
    """
    x = _unwrap(image)
    if severity < 0:
        raise RangeError(f"severity {severity} must be >= 0")
    if kind not in CORRUPTION_KINDS:
        raise UnknownKind(f"unknown corruption kind {kind!r}")
    if severity == 0:
        return x.clone()
    if kind == "brightness":
        return (x + 0.1 * severity).clamp(-1.0, 1.0)
    if kind == "gaussian_noise":
        rng = np.random.default_rng(seed)
        noise = torch.tensor(rng.standard_normal(tuple(x.shape)), dtype=x.dtype)
        return (x + 0.05 * severity * noise).clamp(-1.0, 1.0)
    import torch.nn.functional as tf
    h, w = x.shape[-2], x.shape[-1]
    small = tf.interpolate(x.unsqueeze(0), size=(h // 2, w // 2), mode="area")
    back = tf.interpolate(small, size=(h, w), mode="bilinear", align_corners=False)
    return back[0].clamp(-1.0, 1.0)


# --------------------------------------------------------------------------
# corpus on disk
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class IdentityEntry:
    ident: str
    split: str                     # "train" or "eval"
    z: list[float]


@dataclass(frozen=True)
class BonaFideEntry:
    identity: str
    document: str                  # path relative to the corpus root
    live: str


@dataclass(frozen=True)
class MorphEntry:
    morph_id: str
    method: str                    # "blend" or "splice"
    pairing: str                   # "random" or "lookalike"
    subject: str                   # contributor whose document role this entry takes
    partner: str                   # the other contributor
    alpha: float
    path: str
    accepted: bool                 # verified against both contributors at tau
    verify_subject: float
    verify_partner: float


@dataclass
class ToyCorpusManifest:
    config: dict
    identities: list[IdentityEntry]
    bonafide_entries: list[BonaFideEntry]
    morph_entries: list[MorphEntry]

    def to_json(self) -> str:
        doc = {
            "config": self.config,
            "identities": [asdict(e) for e in self.identities],
            "bonafide_entries": [asdict(e) for e in self.bonafide_entries],
            "morph_entries": [asdict(e) for e in self.morph_entries],
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ToyCorpusManifest":
        doc = json.loads(text)
        return cls(
            config=doc["config"],
            identities=[IdentityEntry(**e) for e in doc["identities"]],
            bonafide_entries=[BonaFideEntry(**e) for e in doc["bonafide_entries"]],
            morph_entries=[MorphEntry(**e) for e in doc["morph_entries"]],
        )

    def save(self, root: str | Path) -> Path:
        path = Path(root) / MANIFEST_NAME
        write_atomic(path, self.to_json())
        return path

    @classmethod
    def load(cls, root: str | Path) -> "ToyCorpusManifest":
        return cls.from_json((Path(root) / MANIFEST_NAME).read_text())

    @property
    def tau(self) -> float:
        return float(self.config["tau"])

    def idents(self, split: Optional[str] = None) -> list[str]:
        return [e.ident for e in self.identities if split in (None, e.split)]

    def accepted_morphs(self, split: Optional[str] = None) -> list[MorphEntry]:
        by_split = set(self.idents(split))
        return [m for m in self.morph_entries
                if m.accepted and m.subject in by_split]


def corpus_digest(root: str | Path) -> str:
    return sha256_file(Path(root) / MANIFEST_NAME)


class CorpusData:
    """Manifest plus image access with a small cache."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.manifest = ToyCorpusManifest.load(self.root)
        self._bona = {e.identity: e for e in self.manifest.bonafide_entries}
        self._cache: dict[str, torch.Tensor] = {}

    def _img(self, rel: str) -> torch.Tensor:
        if rel not in self._cache:
            self._cache[rel] = load_image_png(self.root / rel)
        return self._cache[rel]

    def document(self, ident: str) -> torch.Tensor:
        return self._img(self._bona[ident].document)

    def live(self, ident: str) -> torch.Tensor:
        return self._img(self._bona[ident].live)

    def morph_image(self, entry: MorphEntry) -> torch.Tensor:
        return self._img(entry.path)


def build_corpus(backends: ToyBackends, cfg: CorpusConfig,
                 out_dir: str | Path) -> ToyCorpusManifest:
    """Generate identities, renders, and verified morphs under `out_dir`.

    All recorded similarities are computed on 8-bit-quantized pixels, matching
    exactly what a reader of the stored PNGs will recompute.
    """
    if cfg.n_identities < 10:
        raise InsufficientIdentities(
            f"need at least 10 identities, got {cfg.n_identities}")
    out_dir = Path(out_dir)
    world = ToyWorld(backends)
    frs = backends.frs
    rng = np.random.default_rng(cfg.seed)

    n = cfg.n_identities
    zs = sample_identities(rng, n, world.id_dim)
    idents = [f"id{i:04d}" for i in range(n)]
    n_eval = int(round(cfg.holdout_fraction * n))
    splits = [SPLIT_TRAIN] * (n - n_eval) + [SPLIT_EVAL] * n_eval

    docs = torch.stack([requantize(world.render_document(zs[i])) for i in range(n)])
    lives = torch.stack([
        requantize(world.render_live(zs[i], cfg.capture, rng)) for i in range(n)])
    e_doc = frs.embed(docs)
    e_live = frs.embed(lives)

    mated = [float((e_doc[i] * e_live[i]).sum()) for i in range(n)]
    nonmated = [float((e_doc[i] * e_live[j]).sum())
                for i in range(n) for j in range(n) if i != j]
    thr = calibrate_threshold(mated, nonmated, cfg.target_fmr)
    tau = thr.tau

    identities = []
    bona_entries = []
    for i, ident in enumerate(idents):
        identities.append(IdentityEntry(
            ident=ident, split=splits[i], z=[float(v) for v in zs[i]]))
        doc_rel = f"images/{ident}_doc.png"
        live_rel = f"images/{ident}_live.png"
        save_image_png(out_dir / doc_rel, docs[i])
        save_image_png(out_dir / live_rel, lives[i])
        bona_entries.append(BonaFideEntry(identity=ident, document=doc_rel,
                                          live=live_rel))

    sims = e_doc @ e_doc.T
    morph_entries = []
    for i, ident in enumerate(idents):
        peers = [j for j in range(n) if j != i and splits[j] == splits[i]]
        if not peers:
            continue
        k_rand = min(cfg.random_pairs, len(peers))
        rand_partners = list(rng.choice(peers, size=k_rand, replace=False))
        order = sorted(peers, key=lambda j: abs(float(sims[i, j]) - tau))
        pool = order[:min(cfg.lookalike_pool, len(order))]
        la_partners = list(rng.choice(pool, size=cfg.lookalike_pairs, replace=True))
        partners = [(int(j), "random") for j in rand_partners] + \
                   [(int(j), "lookalike") for j in la_partners]
        for idx, (j, pairing) in enumerate(partners):
            for method in cfg.methods:
                if method == "blend":
                    img = morph_blend(docs[i], docs[j], cfg.alpha)
                elif method == "splice":
                    img = morph_splice(docs[i], docs[j], cfg.alpha, cfg.splice_area)
                else:
                    raise UnknownKind(f"unknown morph method {method!r}")
                img = requantize(img)
                e_m = frs.embed(img)
                v_subj = float((e_m * e_doc[i]).sum())
                v_part = float((e_m * e_doc[j]).sum())
                morph_id = f"{method}_{ident}_{idents[j]}_{idx}"
                rel = f"images/morph_{morph_id}.png"
                save_image_png(out_dir / rel, img)
                morph_entries.append(MorphEntry(
                    morph_id=morph_id, method=method, pairing=pairing,
                    subject=ident, partner=idents[j], alpha=cfg.alpha, path=rel,
                    accepted=bool(v_subj >= tau and v_part >= tau),
                    verify_subject=v_subj, verify_partner=v_part))

    config = {
        "backend": asdict(backends.cfg),
        "backend_digest": backends.digest(),
        "n_identities": n,
        "alpha": cfg.alpha,
        "methods": list(cfg.methods),
        "noise_sigma": cfg.capture.noise_sigma,
        "illum_range": cfg.capture.illum_range,
        "splice_area": cfg.splice_area,
        "target_fmr": cfg.target_fmr,
        "holdout_fraction": cfg.holdout_fraction,
        "random_pairs": cfg.random_pairs,
        "lookalike_pairs": cfg.lookalike_pairs,
        "lookalike_pool": cfg.lookalike_pool,
        "seed": cfg.seed,
        "tau": tau,
        "achieved_tmr": thr.achieved_tmr,
        "pixel_bound": PIXEL_BOUND,
    }
    manifest = ToyCorpusManifest(config=config, identities=identities,
                                 bonafide_entries=bona_entries,
                                 morph_entries=morph_entries)
    manifest.save(out_dir)
    return manifest
