"""Differential morph detection on top of the demorpher.

A pair is scored by the face-recognizer similarity between the trusted live
reference and the demorphed output.  For a bona fide pair the output preserves
the document identity, which matches the reference, so the score is high; for
a morphed document the restored identity is the hidden contributor, so the
score collapses.  Classification is a single threshold: bona fide iff the
score is at least tau.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch

from .core import (DocumentPair, EmptyScoreSet, ImageTensor, RangeError,
                   LABEL_BONA_FIDE, LABEL_MORPH)
from .backends import FaceRecognizerBackend
from .ioutil import write_atomic

THRESHOLD_HEADER = ["tau", "target_fmr", "mated_n", "nonmated_n", "achieved_tmr"]


@dataclass(frozen=True)
class Threshold:
    """A calibrated decision threshold and the evidence behind it."""

    tau: float
    target_fmr: float
    mated_n: int
    nonmated_n: int
    achieved_tmr: float

    def save(self, path: str | Path) -> None:
        lines = ",".join(THRESHOLD_HEADER) + "\n" + \
            f"{self.tau!r},{self.target_fmr!r},{self.mated_n},{self.nonmated_n}," \
            f"{self.achieved_tmr!r}\n"
        write_atomic(Path(path), lines.encode())

    @classmethod
    def load(cls, path: str | Path) -> "Threshold":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if len(rows) != 1:
            raise RangeError(f"threshold file {path} must have exactly one row")
        r = rows[0]
        return cls(tau=float(r["tau"]), target_fmr=float(r["target_fmr"]),
                   mated_n=int(r["mated_n"]), nonmated_n=int(r["nonmated_n"]),
                   achieved_tmr=float(r["achieved_tmr"]))


def similarity_score(output: ImageTensor | torch.Tensor,
                     reference: ImageTensor | torch.Tensor,
                     frs: FaceRecognizerBackend) -> float:
    """Recognizer similarity between a restored output and the live reference."""
    out = output.data if isinstance(output, ImageTensor) else output
    ref = reference.data if isinstance(reference, ImageTensor) else reference
    e_out = frs.embed(out)
    e_ref = frs.embed(ref)
    return float((e_out * e_ref).sum(dim=-1))


def score_pair(pair: DocumentPair,
               demorph_fn: Callable[[DocumentPair], ImageTensor],
               frs: FaceRecognizerBackend) -> float:
    """Run the demorpher on a pair and score the output against the reference."""
    output = demorph_fn(pair)
    return similarity_score(output, pair.reference, frs)


def classify(score: float, tau: float) -> str:
    """Decide bona fide (score >= tau) versus morph."""
    return LABEL_BONA_FIDE if score >= tau else LABEL_MORPH


def calibrate_threshold(mated: Sequence[float], nonmated: Sequence[float],
                        target_fmr: float) -> Threshold:
    """Pick the lowest threshold whose false-match rate meets the target.

    Candidates are the sorted unique observed scores plus a sentinel above the
    maximum (the sentinel always achieves FMR 0, so calibration cannot fail).
    FMR counts non-mated scores >= tau; TMR counts mated scores >= tau.
    """
    mated = list(mated)
    nonmated = list(nonmated)
    if not mated or not nonmated:
        raise EmptyScoreSet("calibration needs both mated and non-mated scores")
    if not (0.0 <= target_fmr <= 1.0):
        raise RangeError(f"target_fmr {target_fmr} outside [0, 1]")
    scores = sorted(set(mated) | set(nonmated))
    candidates = scores + [scores[-1] + 1.0]
    n_nm = len(nonmated)
    tau = candidates[-1]
    for cand in candidates:
        fmr = sum(1 for s in nonmated if s >= cand) / n_nm
        if fmr <= target_fmr:
            tau = cand
            break
    tmr = sum(1 for s in mated if s >= tau) / len(mated)
    return Threshold(tau=float(tau), target_fmr=float(target_fmr),
                     mated_n=len(mated), nonmated_n=n_nm,
                     achieved_tmr=float(tmr))
