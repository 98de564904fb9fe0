"""Detection and restoration metrics over similarity-score collections.

Classification metrics (macer, bscer, eer, DET) treat a similarity score as a
bona-fide vote: a pair counts as bona fide when its score reaches the decision
threshold.  Restoration metrics (dti, dnti, bms) measure how far score
distributions sit from the threshold and from each other.  Everything here is
pure numpy on plain float sequences; the CSV helpers at the bottom define the
on-disk evaluation formats.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (EmptyScoreSet, LABEL_BONA_FIDE, LABEL_MORPH, RangeError,
                   RestorationScenario, ScenarioNotApplicable, ScoreRecord)
from .ioutil import write_atomic


def _scores(values: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise EmptyScoreSet(f"{name} score set is empty")
    return arr


# --------------------------------------------------------------------------
# score collections
# --------------------------------------------------------------------------

@dataclass
class ScoreSet:
    """A labeled score collection with bona-fide / morph partitioned views."""

    records: list[ScoreRecord]

    def filtered(self, label: Optional[str] = None,
                 scenario: Optional[RestorationScenario] = None,
                 morph_method: Optional[str] = None,
                 method: Optional[str] = None) -> list[ScoreRecord]:
        out = self.records
        if label is not None:
            out = [r for r in out if r.label == label]
        if scenario is not None:
            out = [r for r in out if r.scenario == scenario]
        if morph_method is not None:
            out = [r for r in out if r.morph_method == morph_method]
        if method is not None:
            out = [r for r in out if r.method == method]
        return out

    def bona_fide_scores(self, **kw) -> list[float]:
        return [r.score for r in self.filtered(label=LABEL_BONA_FIDE, **kw)]

    def morph_scores(self, **kw) -> list[float]:
        return [r.score for r in self.filtered(label=LABEL_MORPH, **kw)]

    def morph_methods(self) -> list[str]:
        return sorted({r.morph_method for r in self.records
                       if r.label == LABEL_MORPH and r.morph_method})


def build_dd(records: Iterable[ScoreRecord]) -> list[float]:
    """Collect output-vs-ground-truth similarities, one per morph pair.

    This is the restored-identity score distribution: how closely the
    restoration resembles the contributor the document hid.  Bona fide records
    carry no ground-truth similarity and are skipped.
    """
    return [r.score_gt for r in records
            if r.label == LABEL_MORPH and r.score_gt is not None]


# --------------------------------------------------------------------------
# threshold-relative means
# --------------------------------------------------------------------------

def dti(similarities_to_target: Sequence[float], tau: float) -> float:
    """Mean similarity to the intended identity, measured from the threshold.

    Positive means the restorations verify as the target on average.
    """
    return float(_scores(similarities_to_target, "target").mean() - tau)


def dnti(similarities_to_nontarget: Sequence[float], tau: float,
         scenario: RestorationScenario | str) -> float:
    """Mean similarity to the identity that should have been removed.

    Lower is better: residual traces of the other contributor push it up.
    Only morph scenarios have a non-target identity, so the scenario must be
    accomplice or criminal.
    """
    sc = RestorationScenario.from_string(scenario) if isinstance(scenario, str) \
        else scenario
    if sc is RestorationScenario.BONA_FIDE:
        raise ScenarioNotApplicable(
            "bona fide documents have no non-target identity")
    return float(_scores(similarities_to_nontarget, "non-target").mean() - tau)


# --------------------------------------------------------------------------
# error rates and their trade-off
# --------------------------------------------------------------------------

def macer(morph_scores: Sequence[float], tau: float) -> float:
    """Fraction of morphs misclassified as bona fide (score >= tau)."""
    s = _scores(morph_scores, "morph")
    return float((s >= tau).mean())


def bscer(bona_scores: Sequence[float], tau: float) -> float:
    """Fraction of bona fide pairs misclassified as morphs (score < tau)."""
    s = _scores(bona_scores, "bona fide")
    return float((s < tau).mean())


def _candidate_thresholds(bona: np.ndarray, morph: np.ndarray) -> np.ndarray:
    pooled = np.concatenate([bona, morph])
    cands = np.unique(pooled)
    return np.concatenate([[cands[0] - 1.0], cands, [cands[-1] + 1.0]])


@dataclass(frozen=True)
class DetCurve:
    """Detection error trade-off sampled at every candidate threshold."""

    taus: np.ndarray
    macer: np.ndarray
    bscer: np.ndarray

    @property
    def points(self) -> list[tuple[float, float]]:
        return [(float(m), float(b)) for m, b in zip(self.macer, self.bscer)]


def det_curve(bona: Sequence[float], morph: Sequence[float]) -> DetCurve:
    """Both error rates at every threshold where either one can change.

    Candidates are the sorted unique scores plus a sentinel on each side, so
    the curve always reaches (macer=1, bscer=0) and (macer=0, bscer=1).
    """
    b = _scores(bona, "bona fide")
    m = _scores(morph, "morph")
    taus = _candidate_thresholds(b, m)
    mac = np.array([(m >= t).mean() for t in taus])
    bsc = np.array([(b < t).mean() for t in taus])
    return DetCurve(taus=taus, macer=mac, bscer=bsc)


def eer(bona: Sequence[float], morph: Sequence[float]) -> float:
    """Error rate where the two error curves cross.

    macer - bscer falls monotonically in tau from +1 to -1 over the candidate
    grid, so a crossing always exists; between adjacent candidates both curves
    are linearly interpolated and the value at the first crossing is returned.
    """
    curve = det_curve(bona, morph)
    diff = curve.macer - curve.bscer
    idx = int(np.argmax(diff <= 0.0))      # first candidate at or past the crossing
    if diff[idx] == 0.0:
        return float(curve.macer[idx])
    m0, m1 = curve.macer[idx - 1], curve.macer[idx]
    d0, d1 = diff[idx - 1], diff[idx]
    t = d0 / (d0 - d1)
    return float(m0 + (m1 - m0) * t)


def bscer_at_macer(bona: Sequence[float], morph: Sequence[float],
                   target_macer: float) -> float:
    """Bona fide error at the most permissive threshold meeting a morph-error budget.

    Scans candidate thresholds upward and reports bscer at the first (smallest)
    tau whose macer is within the target; smaller tau can only lower bscer, so
    this is the operating point the budget actually buys.
    """
    if not (0.0 < target_macer <= 1.0):
        raise RangeError(f"target macer {target_macer} outside (0, 1]")
    curve = det_curve(bona, morph)
    ok = np.nonzero(curve.macer <= target_macer)[0]
    return float(curve.bscer[ok[0]])


# --------------------------------------------------------------------------
# distribution separability
# --------------------------------------------------------------------------

def bms(bona: Sequence[float], morph: Sequence[float]) -> float:
    """1-Wasserstein distance between two empirical score distributions.

    Computed as the exact integral of |CDF difference| over the pooled support,
    which handles unequal sample sizes without any pairing convention.
    """
    b = np.sort(_scores(bona, "bona fide"))
    m = np.sort(_scores(morph, "morph"))
    xs = np.unique(np.concatenate([b, m]))
    if xs.size == 1:
        return 0.0
    cdf_b = np.searchsorted(b, xs, side="right") / b.size
    cdf_m = np.searchsorted(m, xs, side="right") / m.size
    return float(np.sum(np.abs(cdf_b - cdf_m)[:-1] * np.diff(xs)))


# --------------------------------------------------------------------------
# morphing attack potential
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MapTable:
    """Fractions of morphs fooling at least r attempts on at least c recognizers.

    `outcomes[i]` is a boolean (attempts, recognizers) array for one morph:
    True where that attempt verified against BOTH contributors on that
    recognizer.  matrix[r-1][c-1] holds the fraction for (r, c).
    """

    morph_ids: tuple[str, ...]
    outcomes: tuple[np.ndarray, ...]
    matrix: np.ndarray

    def value(self, r: int, c: int) -> float:
        return float(self.matrix[r - 1, c - 1])


def map_matrix(outcomes: dict[str, np.ndarray] | Sequence[np.ndarray],
               max_r: Optional[int] = None,
               max_c: Optional[int] = None) -> MapTable:
    """Count, for each (r, c), the morphs with >= c recognizers fooled >= r times.

    A recognizer counts as fooled at level r when at least r attempts verified
    the morph against both contributors on it.  Values are non-increasing in
    both indices by construction.
    """
    if isinstance(outcomes, dict):
        ids = tuple(sorted(outcomes))
        mats = tuple(np.asarray(outcomes[k], dtype=bool) for k in ids)
    else:
        mats = tuple(np.asarray(o, dtype=bool) for o in outcomes)
        ids = tuple(f"morph{i:04d}" for i in range(len(mats)))
    if not mats:
        raise EmptyScoreSet("no morph outcomes given")
    for o in mats:
        if o.ndim != 2 or o.shape != mats[0].shape:
            raise RangeError("every outcome table needs the same (attempts, frs) shape")
    n_r, n_c = mats[0].shape
    max_r = n_r if max_r is None else max_r
    max_c = n_c if max_c is None else max_c
    matrix = np.zeros((max_r, max_c))
    per_frs = np.stack([o.sum(axis=0) for o in mats])      # (n_morph, n_frs)
    for r in range(1, max_r + 1):
        frs_ok = (per_frs >= r).sum(axis=1)                # recognizers fooled >= r times
        for c in range(1, max_c + 1):
            matrix[r - 1, c - 1] = (frs_ok >= c).mean()
    return MapTable(morph_ids=ids, outcomes=mats, matrix=matrix)


# --------------------------------------------------------------------------
# on-disk formats
# --------------------------------------------------------------------------

SCORES_HEADER = ["pair_id", "label", "scenario", "morph_method", "method",
                 "score", "score_gt"]
METRICS_HEADER = ["dataset", "scenario", "method", "metric", "value"]
DET_HEADER = ["tau", "macer", "bscer"]
MAP_HEADER = ["r", "c", "value"]


def _csv_text(header: list[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_scores_csv(path: str | Path, records: Iterable[ScoreRecord]) -> None:
    rows = [[r.pair_id, r.label, str(r.scenario), r.morph_method, r.method,
             repr(float(r.score)),
             "" if r.score_gt is None else repr(float(r.score_gt))]
            for r in records]
    write_atomic(path, _csv_text(SCORES_HEADER, rows))


def read_scores_csv(path: str | Path) -> ScoreSet:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SCORES_HEADER:
            raise RangeError(f"unexpected scores header {reader.fieldnames}")
        for row in reader:
            records.append(ScoreRecord(
                pair_id=row["pair_id"], label=row["label"],
                scenario=RestorationScenario.from_string(row["scenario"]),
                morph_method=row["morph_method"], method=row["method"],
                score=float(row["score"]),
                score_gt=float(row["score_gt"]) if row["score_gt"] else None))
    return ScoreSet(records)


def write_metrics_csv(path: str | Path,
                      rows: Iterable[tuple[str, str, str, str, float]]) -> None:
    write_atomic(path, _csv_text(
        METRICS_HEADER,
        [[d, s, m, k, repr(float(v))] for d, s, m, k, v in rows]))


def write_det_csv(path: str | Path, curve: DetCurve) -> None:
    rows = [[repr(float(t)), repr(float(m)), repr(float(b))]
            for t, m, b in zip(curve.taus, curve.macer, curve.bscer)]
    write_atomic(path, _csv_text(DET_HEADER, rows))


def write_map_csv(path: str | Path, table: MapTable) -> None:
    rows = [[r + 1, c + 1, repr(float(table.matrix[r, c]))]
            for r in range(table.matrix.shape[0])
            for c in range(table.matrix.shape[1])]
    write_atomic(path, _csv_text(MAP_HEADER, rows))
