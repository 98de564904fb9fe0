"""Command-line front end: corpus generation, training, evaluation, reports.

Every command is deterministic for a fixed seed and writes its outputs
atomically.  Exit codes: 0 success, 2 configuration or usage problem, 3 I/O
failure, 4 checkpoint/corpus state mismatch.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .core import (DemorphError, LABEL_BONA_FIDE, LABEL_MORPH, PassType,
                   RestorationScenario, ScoreRecord, StateMismatch)
from .backends import ToyFaceRecognizer, build_toy_backends
from .config import (RunConfig, apply_overrides, load_config, parse_config,
                     to_lines)
from .demorpher import DemorpherModel, demorph_batch, load_checkpoint
from .dmad import Threshold, calibrate_threshold
from .ioutil import write_atomic
from .toyworld import CaptureParams, CorpusData, ToyWorld, build_corpus
from .training import TrainingData, train
from . import metrics

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_STATE = 4

POOLED = "pooled"
METHOD_DEMORPH = "demorph"
METHOD_BASELINE = "frs_baseline"


def _apply_thread_cap() -> None:
    raw = os.environ.get("REFDEMORPH_NUM_THREADS", "1")
    try:
        torch.set_num_threads(max(1, int(raw)))
    except ValueError:
        torch.set_num_threads(1)


# --------------------------------------------------------------------------
# scoring and report assembly
# --------------------------------------------------------------------------

def _restore(model: DemorpherModel, backends, docs: torch.Tensor,
             refs: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        out, _, _ = demorph_batch(model, backends, docs, refs)
    return out.clamp(-1.0, 1.0)


def score_corpus(model: DemorpherModel, backends, corpus: CorpusData,
                 scenario: str, split: str = "eval") -> list[ScoreRecord]:
    """Similarity records for the demorpher and the no-restoration baseline.

    Bona fide pairs are always scored (they anchor the error-rate metrics);
    morph pairs are scored under the requested restoration scenario(s).
    """
    frs = backends.frs
    man = corpus.manifest
    model.eval()
    records: list[ScoreRecord] = []

    idents = man.idents(split)
    docs = torch.stack([corpus.document(i) for i in idents])
    lives = torch.stack([corpus.live(i) for i in idents])
    out = _restore(model, backends, docs, lives)
    s_model = frs.similarity(out, lives)
    s_base = frs.similarity(docs, lives)
    for i, ident in enumerate(idents):
        for method, s in ((METHOD_DEMORPH, s_model), (METHOD_BASELINE, s_base)):
            records.append(ScoreRecord(
                pair_id=f"bona_{ident}", label=LABEL_BONA_FIDE,
                scenario=RestorationScenario.BONA_FIDE, morph_method="",
                method=method, score=float(s[i])))
    if scenario == "bonafide":
        return records

    wanted = [RestorationScenario.ACCOMPLICE, RestorationScenario.CRIMINAL] \
        if scenario == "all" else [RestorationScenario.from_string(scenario)]
    morphs = man.accepted_morphs(split)
    if not morphs:
        return records
    morph_imgs = torch.stack([corpus.morph_image(m) for m in morphs])
    for sc in wanted:
        if sc is RestorationScenario.ACCOMPLICE:
            refs = torch.stack([corpus.live(m.partner) for m in morphs])
            gts = torch.stack([corpus.document(m.subject) for m in morphs])
            tag = "acc"
        else:
            refs = torch.stack([corpus.live(m.subject) for m in morphs])
            gts = torch.stack([corpus.document(m.partner) for m in morphs])
            tag = "cri"
        out = _restore(model, backends, morph_imgs, refs)
        pairs = ((METHOD_DEMORPH, out), (METHOD_BASELINE, morph_imgs))
        for method, imgs in pairs:
            s_ref = frs.similarity(imgs, refs)
            s_gt = frs.similarity(imgs, gts)
            for i, m in enumerate(morphs):
                records.append(ScoreRecord(
                    pair_id=f"{m.morph_id}_{tag}", label=LABEL_MORPH,
                    scenario=sc, morph_method=m.method, method=method,
                    score=float(s_ref[i]), score_gt=float(s_gt[i])))
    return records


def metrics_rows(scores: metrics.ScoreSet, tau: float,
                 dataset: str) -> list[tuple[str, str, str, str, float]]:
    """Flatten a score set into report rows, per morph method and pooled."""
    rows: list[tuple[str, str, str, str, float]] = []
    for method, prefix in ((METHOD_DEMORPH, ""), (METHOD_BASELINE, "baseline_")):
        bona = scores.bona_fide_scores(method=method)
        if bona:
            rows.append((dataset, "bonafide", POOLED, prefix + "dti",
                         metrics.dti(bona, tau)))
            rows.append((dataset, "bonafide", POOLED, prefix + "bscer",
                         metrics.bscer(bona, tau)))
        for sc in (RestorationScenario.ACCOMPLICE, RestorationScenario.CRIMINAL):
            all_morph = scores.filtered(label=LABEL_MORPH, scenario=sc,
                                        method=method)
            if not all_morph:
                continue
            for mm in scores.morph_methods() + [POOLED]:
                recs = all_morph if mm == POOLED else \
                    [r for r in all_morph if r.morph_method == mm]
                if not recs:
                    continue
                s_ref = [r.score for r in recs]
                s_gt = [r.score_gt for r in recs if r.score_gt is not None]
                rows.append((dataset, str(sc), mm, prefix + "dti",
                             metrics.dti(s_gt, tau)))
                rows.append((dataset, str(sc), mm, prefix + "dnti",
                             metrics.dnti(s_ref, tau, sc)))
                rows.append((dataset, str(sc), mm, prefix + "macer",
                             metrics.macer(s_ref, tau)))
                if bona:
                    rows.append((dataset, str(sc), mm, prefix + "eer",
                                 metrics.eer(bona, s_ref)))
                    rows.append((dataset, str(sc), mm, prefix + "bms",
                                 metrics.bms(bona, s_ref)))
    return rows


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _load_run(args) -> RunConfig:
    run = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        run = apply_overrides(run, {"corpus.seed": str(args.seed),
                                    "train.seed": str(args.seed)})
    return run


def cmd_gen_corpus(args) -> int:
    run = _load_run(args)
    backends = build_toy_backends(run.backend)
    manifest = build_corpus(backends, run.corpus, args.out)
    print(f"wrote corpus with {len(manifest.identities)} identities, "
          f"{len(manifest.morph_entries)} morphs "
          f"({len(manifest.accepted_morphs())} accepted) to {args.out}")
    return EXIT_OK


def _config_payload(run: RunConfig) -> dict:
    return dict(parse_config("\n".join(to_lines(run))))


def _run_from_payload(payload: dict) -> RunConfig:
    return apply_overrides(RunConfig(), {str(k): str(v)
                                         for k, v in payload.items()})


def _check_corpus_backends(corpus: CorpusData, backends) -> None:
    recorded = corpus.manifest.config.get("backend_digest")
    if recorded != backends.digest():
        raise StateMismatch("corpus was generated with different backends "
                            f"({recorded} != {backends.digest()})")


def cmd_train(args) -> int:
    run = _load_run(args)
    backends = build_toy_backends(run.backend)
    corpus = CorpusData(args.corpus)
    _check_corpus_backends(corpus, backends)
    data = TrainingData.from_corpus(corpus, split="train")
    weights = {PassType.BONA_FIDE_PASS: run.weights_bona,
               PassType.MORPHED_PASS: run.weights_morphed}
    final = train(data, run.train, backends, args.out, weights=weights,
                  config_digest=run.digest(), config=_config_payload(run),
                  resume_from=args.resume)
    print(f"finished {run.train.total_steps} steps; final checkpoint {final}")
    return EXIT_OK


def _resolve_tau(args, corpus: CorpusData) -> float:
    if getattr(args, "tau", None) is not None:
        return float(args.tau)
    if getattr(args, "threshold", None):
        return Threshold.load(args.threshold).tau
    return corpus.manifest.tau


def cmd_evaluate(args) -> int:
    state = load_checkpoint(args.checkpoint)
    run = _run_from_payload(state.config)
    backends = build_toy_backends(run.backend)
    corpus = CorpusData(args.corpus)
    _check_corpus_backends(corpus, backends)
    model = DemorpherModel(run.backend, idm_width=run.train.idm_width,
                           prelu_init=run.train.prelu_init)
    model.load_state_dict(state.model_state)

    tau = _resolve_tau(args, corpus)
    records = score_corpus(model, backends, corpus, args.scenario)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_scores_csv(out_dir / "scores.csv", records)
    scores = metrics.ScoreSet(records)
    dataset = Path(args.corpus).name or "corpus"
    metrics.write_metrics_csv(out_dir / "metrics.csv",
                              metrics_rows(scores, tau, dataset))
    bona = scores.bona_fide_scores(method=METHOD_DEMORPH)
    morph = scores.morph_scores(method=METHOD_DEMORPH)
    if bona and morph:
        metrics.write_det_csv(out_dir / "det.csv",
                              metrics.det_curve(bona, morph))
    print(f"evaluated {len(records)} records (scenario {args.scenario}, "
          f"tau {tau:.4f}) into {out_dir}")
    return EXIT_OK


def _corpus_backends(corpus: CorpusData):
    cfg = corpus.manifest.config["backend"]
    run = _run_from_payload({f"backend.{k}": v for k, v in cfg.items()})
    return build_toy_backends(run.backend), run


def cmd_calibrate(args) -> int:
    corpus = CorpusData(args.corpus)
    backends, _ = _corpus_backends(corpus)
    _check_corpus_backends(corpus, backends)
    idents = corpus.manifest.idents()
    docs = torch.stack([corpus.document(i) for i in idents])
    lives = torch.stack([corpus.live(i) for i in idents])
    e_doc = backends.frs.embed(docs)
    e_live = backends.frs.embed(lives)
    mated = [float((e_doc[i] * e_live[i]).sum()) for i in range(len(idents))]
    nonmated = [float((e_doc[i] * e_live[j]).sum())
                for i in range(len(idents)) for j in range(len(idents))
                if i != j]
    thr = calibrate_threshold(mated, nonmated, args.target_fmr)
    out = Path(args.out)
    path = out / "threshold.csv" if not out.suffix else out
    thr.save(path)
    print(f"tau {thr.tau:.6f} (target FMR {args.target_fmr}, achieved TMR "
          f"{thr.achieved_tmr:.4f}) -> {path}")
    return EXIT_OK


def cmd_map(args) -> int:
    corpus = CorpusData(args.corpus)
    backends, base = _corpus_backends(corpus)
    _check_corpus_backends(corpus, backends)
    world = ToyWorld(backends)
    man = corpus.manifest
    capture = CaptureParams(noise_sigma=float(man.config["noise_sigma"]),
                            illum_range=float(man.config["illum_range"]))
    target_fmr = float(man.config["target_fmr"])

    seeds = [base.backend.seed] + [int(s) for s in
                                   (args.frs_seeds.split(",") if args.frs_seeds
                                    else []) if s.strip()]
    idents = man.idents()
    zs = {e.ident: torch.tensor(e.z, dtype=torch.float64)
          for e in man.identities}
    morphs = man.accepted_morphs()
    if not morphs:
        raise DemorphError("corpus has no accepted morphs")
    morph_imgs = torch.stack([corpus.morph_image(m) for m in morphs])

    outcomes = {m.morph_id: np.zeros((args.attempts, len(seeds)), dtype=bool)
                for m in morphs}
    for f_idx, seed in enumerate(seeds):
        frs = ToyFaceRecognizer(replace(base.backend, seed=seed))
        docs = torch.stack([corpus.document(i) for i in idents])
        rng = np.random.default_rng(seed * 1009)
        lives0 = torch.stack([world.render_live(zs[i], capture, rng)
                              for i in idents])
        e_doc = frs.embed(docs)
        e_live = frs.embed(lives0)
        mated = [float((e_doc[i] * e_live[i]).sum()) for i in range(len(idents))]
        nonmated = [float((e_doc[i] * e_live[j]).sum())
                    for i in range(len(idents)) for j in range(len(idents))
                    if i != j]
        tau_f = calibrate_threshold(mated, nonmated, target_fmr).tau
        e_morph = frs.embed(morph_imgs)
        col = {ident: i for i, ident in enumerate(idents)}
        for a in range(args.attempts):
            arng = np.random.default_rng(seed * 1009 + 7919 * (a + 1))
            live_a = torch.stack([world.render_live(zs[i], capture, arng)
                                  for i in idents])
            e_a = frs.embed(live_a)
            for k, m in enumerate(morphs):
                s_subj = float((e_morph[k] * e_a[col[m.subject]]).sum())
                s_part = float((e_morph[k] * e_a[col[m.partner]]).sum())
                outcomes[m.morph_id][a, f_idx] = (s_subj >= tau_f
                                                  and s_part >= tau_f)
    table = metrics.map_matrix(outcomes)
    out = Path(args.out)
    path = out / "map.csv" if not out.suffix else out
    metrics.write_map_csv(path, table)
    print(f"MAP over {len(morphs)} morphs, {args.attempts} attempt(s), "
          f"{len(seeds)} recognizer(s) -> {path}")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    scores = metrics.read_scores_csv(args.scores)
    bona = scores.bona_fide_scores(method=METHOD_DEMORPH)
    morph = scores.morph_scores(method=METHOD_DEMORPH)
    restored = metrics.build_dd(scores.filtered(method=METHOD_DEMORPH))
    fig, ax = plt.subplots(figsize=(6, 4))
    if args.kind == "histogram":
        bins = np.linspace(-1.0, 1.0, 41)
        if bona:
            ax.hist(bona, bins=bins, color="tab:green", alpha=0.55,
                    label="bona fide vs reference")
        if morph:
            ax.hist(morph, bins=bins, color="tab:purple", alpha=0.55,
                    label="morph vs reference")
        if restored:
            ax.hist(restored, bins=bins, color="tab:blue", alpha=0.55,
                    label="restored vs target")
        tau = _plot_tau(args)
        if tau is not None:
            ax.axvline(tau, color="red", linestyle=":", label=f"tau {tau:.3f}")
        ax.set_xlabel("cosine similarity")
        ax.set_ylabel("count")
        ax.legend(fontsize=8)
    else:
        curve = metrics.det_curve(bona, morph)
        ax.plot(curve.macer, curve.bscer, drawstyle="steps-post")
        ax.set_xlabel("fraction of morphs accepted")
        ax.set_ylabel("fraction of bona fide rejected")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    plt.close(fig)
    print(f"wrote {args.kind} plot to {args.out}")
    return EXIT_OK


def _plot_tau(args) -> Optional[float]:
    if args.tau is not None:
        return float(args.tau)
    if args.threshold:
        return Threshold.load(args.threshold).tau
    return None


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refdemorph",
        description="Face demorphing toolkit: corpus generation, training, "
                    "and differential morphing-attack evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed")

    p = sub.add_parser("gen-corpus", help="generate a toy corpus")
    common(p)
    p.add_argument("--out", required=True, help="corpus output directory")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train the demorpher on a corpus")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a corpus with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--scenario", default="all",
                   choices=["accomplice", "criminal", "bonafide", "all"])
    p.add_argument("--tau", type=float, help="decision threshold override")
    p.add_argument("--threshold", help="threshold sidecar file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("calibrate", help="calibrate the decision threshold")
    p.add_argument("--corpus", required=True)
    p.add_argument("--target-fmr", type=float, required=True)
    p.add_argument("--out", required=True,
                   help="sidecar file or directory for threshold.csv")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("map", help="morphing-attack-potential table")
    p.add_argument("--corpus", required=True)
    p.add_argument("--attempts", type=int, default=1)
    p.add_argument("--frs-seeds", default="",
                   help="comma-separated extra recognizer seeds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("plot", help="score histogram or DET curve image")
    p.add_argument("--scores", required=True, help="scores CSV path")
    p.add_argument("--kind", default="histogram", choices=["histogram", "det"])
    p.add_argument("--tau", type=float)
    p.add_argument("--threshold", help="threshold sidecar file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except StateMismatch as exc:
        print(f"state mismatch: {exc}", file=sys.stderr)
        return EXIT_STATE
    except DemorphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
