"""Plain-text run configuration: dotted keys, one assignment per line.

The format is deliberately tiny::

    # toy training run
    backend.image_size = 16
    train.total_steps = 2000
    corpus.methods = blend,splice

Unknown keys are rejected rather than ignored, so a typo cannot silently fall
back to a default.  The digest hashes the fully resolved configuration in
canonical key order, making it independent of line order and usable as a
compatibility stamp in checkpoints and manifests.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, get_type_hints

from .core import DecodeError, LossWeights, RangeError, UnknownKind
from .backends import BackendConfig
from .toyworld import CaptureParams, CorpusConfig
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    """Resolved view of every tunable: geometry, corpus, loop, loss weights."""

    backend: BackendConfig = field(default_factory=BackendConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights_bona: LossWeights = field(default_factory=LossWeights.bona_fide)
    weights_morphed: LossWeights = field(default_factory=LossWeights.morphed)

    def digest(self) -> str:
        text = "\n".join(sorted(to_lines(self)))
        return hashlib.sha256(text.encode()).hexdigest()


def toy_train_config(seed: int = 3) -> TrainConfig:
    """The 2,000-step recipe that trains the 16x16 world in under a minute."""
    return TrainConfig(total_steps=2000, batch_size=2, lr_modules=4e-3,
                       lr_disc=8e-3, curriculum_cap_step=1000,
                       curriculum_p_max=0.8, seed=seed, checkpoint_every=1000,
                       optimizer="ranger", lr_decay="cosine")


# The flattened key space: section prefix -> attribute on RunConfig.  The
# corpus capture parameters are flattened into the corpus section.
_SECTIONS = {"backend": "backend", "corpus": "corpus", "train": "train",
             "weights.bona_fide": "weights_bona",
             "weights.morphed": "weights_morphed"}
_CAPTURE_KEYS = {"noise_sigma", "illum_range"}


def _parse_value(raw: str, typ, key: str):
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise RangeError(f"{key}: {raw!r} is not a boolean")
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError as exc:
        raise RangeError(f"{key}: {raw!r} is not a {typ.__name__}") from exc
    if typ is str:
        return raw
    # remaining case: tuple of strings (comma separated)
    return tuple(part.strip() for part in raw.split(",") if part.strip())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def _section_fields(obj) -> dict[str, type]:
    hints = get_type_hints(type(obj))
    return {f.name: hints[f.name] for f in fields(obj)}


def parse_config(text: str) -> dict[str, str]:
    """Raw `key = value` pairs from config text; comments and blanks skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise DecodeError(f"line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not key:
            raise DecodeError(f"line {lineno}: empty key")
        if key in out:
            raise DecodeError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def apply_overrides(run: RunConfig, pairs: dict[str, str]) -> RunConfig:
    """Set dotted keys onto a RunConfig, rejecting anything unrecognized."""
    staged: dict[str, dict] = {name: {} for name in _SECTIONS.values()}
    capture: dict[str, float] = {}
    for key, raw in pairs.items():
        section, _, attr = key.rpartition(".")
        if section not in _SECTIONS or not attr:
            raise UnknownKind(f"unknown config key {key!r}")
        target = _SECTIONS[section]
        obj = getattr(run, target)
        if target == "corpus" and attr in _CAPTURE_KEYS:
            capture[attr] = _parse_value(raw, float, key)
            continue
        types = _section_fields(obj)
        if attr not in types or attr == "capture":
            raise UnknownKind(f"unknown config key {key!r}")
        staged[target][attr] = _parse_value(raw, types[attr], key)
    if capture:
        staged["corpus"]["capture"] = replace(run.corpus.capture, **capture)
    updated = {}
    for target, kw in staged.items():
        if kw:
            updated[target] = replace(getattr(run, target), **kw)
    return replace(run, **updated)


def load_config(path: Optional[str | Path]) -> RunConfig:
    """RunConfig from a config file, or all defaults when no path is given."""
    run = RunConfig()
    if path is None:
        return run
    text = Path(path).read_text(encoding="utf-8")
    return apply_overrides(run, parse_config(text))


def config_from_lines(lines: list[str]) -> RunConfig:
    return apply_overrides(RunConfig(), parse_config("\n".join(lines)))


def to_lines(run: RunConfig) -> list[str]:
    """Canonical full dump, one `key = value` line per resolved field."""
    lines: list[str] = []
    for section, target in _SECTIONS.items():
        obj = getattr(run, target)
        for name in _section_fields(obj):
            value = getattr(obj, name)
            if isinstance(value, CaptureParams):
                lines.append(f"{section}.noise_sigma = "
                             f"{_format_value(value.noise_sigma)}")
                lines.append(f"{section}.illum_range = "
                             f"{_format_value(value.illum_range)}")
            else:
                lines.append(f"{section}.{name} = {_format_value(value)}")
    return lines
