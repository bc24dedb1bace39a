"""Gumbel-perturbed top-K selection over inferred scores."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ocds.corpus import write_token_file
from ocds.errors import ConfigError
from ocds.model import Dataset


@dataclass(frozen=True)
class SelectionConfig:
    """``tau`` is the Gumbel noise strength (also accepted as ``delta``).

    With ``standardize`` the scores are z-scored first, so ``tau`` is measured
    in units of the score standard deviation.
    """

    ratio: float = 0.4
    tau: float = 0.1
    seed: int = 0
    standardize: bool = False

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise ConfigError("selection ratio must be in (0, 1]")
        if self.tau < 0:
            raise ConfigError("tau must be >= 0")

    @classmethod
    def create(cls, ratio=0.4, tau=None, delta=None, seed=0, standardize=False) -> "SelectionConfig":
        if tau is not None and delta is not None and tau != delta:
            raise ConfigError("tau and delta name the same parameter; give one")
        strength = tau if tau is not None else (delta if delta is not None else 0.1)
        return cls(ratio, strength, seed, standardize)

    def k(self, n: int) -> int:
        return max(1, math.floor(self.ratio * n))


@dataclass
class SelectionResult:
    ids: np.ndarray
    keys: np.ndarray
    config: SelectionConfig

    @property
    def k(self) -> int:
        return int(self.ids.size)


def uniform_open(rng: np.random.Generator, n: int) -> np.ndarray:
    """Draws from the open interval (0, 1); exact zeros are redrawn."""
    u = rng.random(n)
    while True:
        bad = u == 0.0
        if not bad.any():
            return u
        u[bad] = rng.random(int(bad.sum()))


def standardize(scores) -> np.ndarray:
    """Z-scores; a constant vector maps to zeros."""
    scores = np.asarray(scores, dtype=np.float64)
    sd = scores.std()
    return np.zeros_like(scores) if sd == 0.0 else (scores - scores.mean()) / sd


def gumbel_topk(scores, config: SelectionConfig) -> SelectionResult:
    """Keep the K largest ``score - tau * log(-log u)``; ties go to the lower id."""
    scores = np.asarray(scores, dtype=np.float64)
    if config.standardize:
        scores = standardize(scores)
    n = scores.size
    k = config.k(n)
    if k > n or n == 0:
        raise ConfigError(f"cannot select {k} of {n} instances")
    u = uniform_open(np.random.default_rng(config.seed), n)
    keys = scores - config.tau * np.log(-np.log(u)) if config.tau > 0 else scores.copy()
    order = np.lexsort((np.arange(n), -keys))
    return SelectionResult(np.sort(order[:k]), keys, config)


def write_selection(path, result: SelectionResult, with_keys: bool = False, ids=None) -> None:
    """TSV of selected ids; ``ids`` maps positions to external instance ids."""
    ext = result.ids if ids is None else np.asarray(ids)[result.ids]
    lines = ["instance_id\tkey" if with_keys else "instance_id"]
    for pos, iid in zip(result.ids, ext):
        lines.append(f"{int(iid)}\t{float(result.keys[pos])!r}" if with_keys else f"{int(iid)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest = {**asdict(result.config), "k": result.k, "n": int(result.keys.size)}
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def materialize(corpus: Dataset, result: SelectionResult, path, vocab_size: int) -> None:
    """Write the selected instances as a token file plus an id mapping sidecar."""
    write_token_file(path, [corpus[i].payload for i in result.ids], vocab_size)
    lines = ["new_id\toriginal_id"] + [f"{j}\t{int(corpus.origin[i])}" for j, i in enumerate(result.ids)]
    Path(str(path) + ".ids.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
