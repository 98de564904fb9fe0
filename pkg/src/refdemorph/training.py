"""Alternating dual-pass optimization with curriculum reference sampling.

Even steps reconstruct bona fide documents from (document, mated live
capture); odd steps restore the hidden contributor from (morph, partner
reference).  Early morphed steps see the partner's exact document render as
the reference; the probability of drawing the harder live capture instead
rises linearly until it caps.  Each step draws its randomness from a
stateless per-step generator, so an interrupted run resumed from a checkpoint
replays the identical batch sequence.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .core import (EmptyDataset, LossWeights, MissingLiveCapture, PassType,
                   RangeError, StateMismatch)
from .backends import DTYPE, Discriminator, ToyBackends
from .demorpher import (CheckpointState, DemorpherModel, demorph_batch,
                        load_checkpoint, save_checkpoint)
from .losses import LossReport, compose_losses, discriminator_loss
from .ioutil import write_atomic
from .toyworld import CorpusData

TRAIN_LOG_HEADER = ["step", "pass", "l2", "ms_ssim", "lpips", "id", "inv_id",
                    "feat", "adv", "im", "total", "disc", "curriculum_p"]


@dataclass(frozen=True)
class TrainConfig:
    """Loop hyperparameters; defaults are the full-scale reference recipe."""

    total_steps: int = 68000
    batch_size: int = 2
    lr_modules: float = 5e-5
    lr_disc: float = 1e-4
    curriculum_cap_step: int = 40000
    curriculum_p_max: float = 0.8
    seed: int = 1
    checkpoint_every: int = 5000
    optimizer: str = "ranger"      # "ranger" (lookahead + rectified) or "adam"
    lr_decay: str = "none"         # "none" or "cosine" (kicks in after 25%)
    idm_width: int = 16
    disc_width: int = 8
    prelu_init: float = 1.0
    ms_ssim_scales: int = 3

    def __post_init__(self):
        if self.total_steps <= 0 or self.batch_size <= 0:
            raise RangeError("steps and batch size must be positive")
        if not (0.0 <= self.curriculum_p_max <= 1.0):
            raise RangeError("curriculum cap probability outside [0, 1]")
        if self.curriculum_cap_step <= 0:
            raise RangeError("curriculum cap step must be positive")
        if self.optimizer not in ("ranger", "adam"):
            raise RangeError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_decay not in ("none", "cosine"):
            raise RangeError(f"unknown lr decay {self.lr_decay!r}")


def curriculum_probability(step: int, cfg: TrainConfig) -> float:
    """Probability of drawing the live-capture reference on a morphed step."""
    if step < 0:
        raise RangeError("step must be >= 0")
    return cfg.curriculum_p_max * min(1.0, step / cfg.curriculum_cap_step)


def next_pass(step: int) -> PassType:
    """Strict alternation, starting with the bona fide pass at step 0."""
    return PassType.BONA_FIDE_PASS if step % 2 == 0 else PassType.MORPHED_PASS


@dataclass
class MorphTrainEntry:
    """One morphed-pass sample: the morph, its restoration target, and the
    partner's two reference domains."""

    morph: torch.Tensor
    subject_document: torch.Tensor
    partner_document: torch.Tensor
    partner_live: Optional[torch.Tensor]


def sample_reference(entry: MorphTrainEntry, step: int, cfg: TrainConfig,
                     rng: np.random.Generator) -> torch.Tensor:
    """Curriculum draw between the partner's document render and live capture."""
    if entry.partner_live is None:
        raise MissingLiveCapture("morph entry lacks a partner live capture")
    p = curriculum_probability(step, cfg)
    return entry.partner_live if rng.uniform() < p else entry.partner_document


@dataclass
class TrainingData:
    """In-memory tensors for one corpus split."""

    documents: torch.Tensor        # (n, 3, s, s) bona fide documents
    lives: torch.Tensor            # (n, 3, s, s) mated live captures
    morphs: list[MorphTrainEntry]

    @classmethod
    def from_corpus(cls, data: CorpusData, split: str = "train") -> "TrainingData":
        idents = data.manifest.idents(split)
        if not idents:
            raise EmptyDataset(f"corpus has no {split!r} identities")
        index = {ident: i for i, ident in enumerate(idents)}
        docs = torch.stack([data.document(i) for i in idents])
        lives = torch.stack([data.live(i) for i in idents])
        entries = []
        for m in data.manifest.accepted_morphs(split):
            entries.append(MorphTrainEntry(
                morph=data.morph_image(m),
                subject_document=docs[index[m.subject]],
                partner_document=docs[index[m.partner]],
                partner_live=lives[index[m.partner]]))
        if not entries:
            raise EmptyDataset(f"corpus has no accepted {split!r} morphs")
        return cls(documents=docs, lives=lives, morphs=entries)


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------

class Lookahead:
    """Slow/fast weight averaging around an inner optimizer.

    Every k fast steps the slow weights move a fraction alpha toward the fast
    weights and the fast weights snap back onto them.
    """

    def __init__(self, inner: torch.optim.Optimizer, k: int = 6,
                 alpha: float = 0.5):
        self.inner = inner
        self.k = k
        self.alpha = alpha
        self.step_count = 0
        self.slow = [[p.detach().clone() for p in group["params"]]
                     for group in inner.param_groups]

    @property
    def param_groups(self):
        return self.inner.param_groups

    def zero_grad(self, set_to_none: bool = True):
        self.inner.zero_grad(set_to_none=set_to_none)

    def step(self):
        self.inner.step()
        self.step_count += 1
        if self.step_count % self.k == 0:
            for group, slows in zip(self.inner.param_groups, self.slow):
                for p, q in zip(group["params"], slows):
                    q += self.alpha * (p.detach() - q)
                    p.detach().copy_(q)

    def state_dict(self) -> dict:
        return {"inner": self.inner.state_dict(),
                "step_count": self.step_count,
                "slow": [[q.clone() for q in group] for group in self.slow]}

    def load_state_dict(self, state: dict) -> None:
        self.inner.load_state_dict(state["inner"])
        self.step_count = state["step_count"]
        for group, saved in zip(self.slow, state["slow"]):
            for q, s in zip(group, saved):
                q.copy_(s)


def make_module_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "ranger":
        inner = torch.optim.RAdam(params, lr=cfg.lr_modules, betas=(0.95, 0.999))
        return Lookahead(inner)
    return torch.optim.Adam(params, lr=cfg.lr_modules)


def make_disc_optimizer(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr_disc)


def _lr_scale(step: int, cfg: TrainConfig) -> float:
    if cfg.lr_decay != "cosine":
        return 1.0
    frac = step / cfg.total_steps
    return 1.0 if frac <= 0.25 else 0.5 * (1.0 + math.cos(math.pi * frac))


# --------------------------------------------------------------------------
# steps and the loop
# --------------------------------------------------------------------------

def train_step(model: DemorpherModel, discriminator: Discriminator,
               batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
               pass_type: PassType, weights: LossWeights, opt_modules,
               opt_disc, backends: ToyBackends,
               ms_ssim_scales: int = 3,
               gamma_r1: Optional[float] = None) -> LossReport:
    """One generator update followed by one discriminator update."""
    i_doc, i_ref, i_gt = batch
    i_out, f_out, _ = demorph_batch(model, backends, i_doc, i_ref)
    total, report = compose_losses(i_out, f_out, i_gt, i_ref, weights,
                                   backends, discriminator,
                                   scales=ms_ssim_scales)
    opt_modules.zero_grad()
    total.backward()
    opt_modules.step()

    gamma = weights.gamma_r1 if gamma_r1 is None else gamma_r1
    d_loss = discriminator_loss(i_gt, i_out, gamma, discriminator)
    opt_disc.zero_grad()
    d_loss.backward()
    opt_disc.step()
    return report.with_disc(float(d_loss.detach()))


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng((seed << 20) + step)


def _make_batch(data: TrainingData, pass_type: PassType, step: int,
                cfg: TrainConfig,
                rng: np.random.Generator) -> tuple[torch.Tensor, ...]:
    if pass_type is PassType.BONA_FIDE_PASS:
        ids = rng.choice(len(data.documents), size=cfg.batch_size)
        return (data.documents[ids], data.lives[ids], data.documents[ids])
    picks = rng.choice(len(data.morphs), size=cfg.batch_size)
    entries = [data.morphs[int(p)] for p in picks]
    refs = [sample_reference(e, step, cfg, rng) for e in entries]
    return (torch.stack([e.morph for e in entries]), torch.stack(refs),
            torch.stack([e.subject_document for e in entries]))


def _format_row(step: int, pass_type: PassType, report: LossReport,
                p: float) -> list[str]:
    return [str(step), str(pass_type), repr(report.l2), repr(report.ms_ssim),
            repr(report.lpips), repr(report.id), repr(report.inv_id),
            repr(report.feat), repr(report.adv), repr(report.im_composite),
            repr(report.total), repr(report.disc), repr(p)]


def _prepare_log(path: Path, start_step: int) -> None:
    """Fresh header, or truncate any rows at/after the resume point."""
    if start_step > 0 and path.exists():
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        kept = [r for r in rows[1:] if r and int(r[0]) < start_step]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAIN_LOG_HEADER)
        w.writerows(kept)
        write_atomic(path, buf.getvalue())
    else:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(TRAIN_LOG_HEADER)
        write_atomic(path, buf.getvalue())


def train(data: TrainingData, cfg: TrainConfig, backends: ToyBackends,
          out_dir: str | Path,
          weights: Optional[dict[PassType, LossWeights]] = None,
          config_digest: str = "", config: Optional[dict] = None,
          resume_from: Optional[str | Path] = None) -> Path:
    """Run the alternating loop, logging every step and checkpointing.

    Returns the path of the final checkpoint.  With `resume_from`, the saved
    optimizer and parameter state continue exactly where they stopped; the
    stored config digest must match or the run refuses to start.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if weights is None:
        weights = {PassType.BONA_FIDE_PASS: LossWeights.bona_fide(),
                   PassType.MORPHED_PASS: LossWeights.morphed()}

    torch.manual_seed(cfg.seed)
    model = DemorpherModel(backends.cfg, idm_width=cfg.idm_width,
                           prelu_init=cfg.prelu_init)
    discriminator = Discriminator(backends.cfg.image_size,
                                  width=cfg.disc_width)
    opt_modules = make_module_optimizer(list(model.parameters()), cfg)
    opt_disc = make_disc_optimizer(list(discriminator.parameters()), cfg)

    start_step = 0
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if config_digest and state.config_digest != config_digest:
            raise StateMismatch(
                f"checkpoint digest {state.config_digest} != current "
                f"{config_digest}")
        model.load_state_dict(state.model_state)
        discriminator.load_state_dict(state.disc_state)
        if state.opt_modules_state is not None:
            opt_modules.load_state_dict(state.opt_modules_state)
        if state.opt_disc_state is not None:
            opt_disc.load_state_dict(state.opt_disc_state)
        start_step = state.step

    log_path = out_dir / "train_log.csv"
    _prepare_log(log_path, start_step)
    config = config or {}

    def checkpoint(path: Path, step: int) -> None:
        save_checkpoint(path, model=model, discriminator=discriminator,
                        step=step, config_digest=config_digest, config=config,
                        opt_modules_state=opt_modules.state_dict(),
                        opt_disc_state=opt_disc.state_dict())

    with open(log_path, "a", newline="") as log:
        writer = csv.writer(log, lineterminator="\n")
        for step in range(start_step, cfg.total_steps):
            rng = _step_rng(cfg.seed, step)
            pass_type = next_pass(step)
            p = curriculum_probability(step, cfg)
            scale = _lr_scale(step, cfg)
            for group in opt_modules.param_groups:
                group["lr"] = cfg.lr_modules * scale
            batch = _make_batch(data, pass_type, step, cfg, rng)
            report = train_step(model, discriminator, batch, pass_type,
                                weights[pass_type], opt_modules, opt_disc,
                                backends, ms_ssim_scales=cfg.ms_ssim_scales)
            writer.writerow(_format_row(step, pass_type, report, p))
            done = step + 1
            if cfg.checkpoint_every > 0 and done % cfg.checkpoint_every == 0 \
                    and done < cfg.total_steps:
                checkpoint(out_dir / f"checkpoint_{done:06d}.pt", done)

    final = out_dir / "checkpoint_final.pt"
    checkpoint(final, cfg.total_steps)
    return final
