"""Normality scores from a pair of flow models.

The posterior score is ``log p(x|normal) - log p(x) + log p(normal)``; the
prior term is a constant (0 by default) that shifts every score equally and
so never changes a ranking or ROC curve.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import dequantize, zero_pixel_fraction
from .errors import DimensionError
from .model import FlowModel

SCORE_FIELDS = ("id", "loglik_normal", "loglik_all", "posterior_score", "zero_pixel_fraction", "label")


@dataclass
class ScoreRecord:
    id: str
    loglik_normal: float
    loglik_all: float
    posterior_score: float
    zero_pixel_fraction: float
    label: str | None = None

    @property
    def likelihood_score(self) -> float:
        return self.loglik_normal


def _loglik(model: FlowModel, images: np.ndarray, batch_size: int, threads: int) -> np.ndarray:
    chunks = [images[i : i + batch_size] for i in range(0, len(images), batch_size)]

    def run(chunk):
        x = dequantize(chunk, model.n_bits)
        return np.atleast_1d(model.log_prob(x).data)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros(0)


class DualScorer:
    """Holds the normal-only model ``m0`` and the mixture model ``m1``."""

    def __init__(self, m0: FlowModel, m1: FlowModel, log_prior: float = 0.0):
        if m0.input_shape != m1.input_shape:
            raise DimensionError(f"input shapes differ: m0 {m0.input_shape} vs m1 {m1.input_shape}")
        if m0.n_bits != m1.n_bits:
            raise DimensionError(f"n_bits differ: m0 {m0.n_bits} vs m1 {m1.n_bits}")
        self.m0 = m0
        self.m1 = m1
        self.log_prior = float(log_prior)

    @property
    def n_bits(self) -> int:
        return self.m0.n_bits

    def _check(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        if images.shape == self.m0.input_shape:
            images = images[None]
        if images.shape[1:] != self.m0.input_shape:
            raise DimensionError(f"image shape {images.shape[1:]} does not match models {self.m0.input_shape}")
        return images

    def logliks(self, images, batch_size: int = 256, threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Deterministically dequantized ``(log p(x|normal), log p(x))`` per image."""
        images = self._check(images)
        return (
            _loglik(self.m0, images, batch_size, threads),
            _loglik(self.m1, images, batch_size, threads),
        )

    def posterior_scores(self, images, **kw) -> np.ndarray:
        ln, la = self.logliks(images, **kw)
        return ln - la + self.log_prior

    def posterior_score(self, image) -> float:
        return float(self.posterior_scores(image)[0])

    def score(self, images, ids=None, labels=None, batch_size: int = 256, threads: int = 1) -> list[ScoreRecord]:
        images = self._check(images)
        ln, la = self.logliks(images, batch_size=batch_size, threads=threads)
        ids = ids if ids is not None else [str(i) for i in range(len(images))]
        labels = labels if labels is not None else [None] * len(images)
        return [
            ScoreRecord(
                id=str(ids[i]),
                loglik_normal=float(ln[i]),
                loglik_all=float(la[i]),
                posterior_score=float(ln[i] - la[i] + self.log_prior),
                zero_pixel_fraction=zero_pixel_fraction(images[i]),
                label=labels[i],
            )
            for i in range(len(images))
        ]


def posterior_score(scorer: DualScorer, x) -> float:
    return scorer.posterior_score(x)


def likelihood_score(m0: FlowModel, x):
    """``log p(x|normal)`` alone, with deterministic dequantization.

    A single image gives a float, a batch gives an array.
    """
    x = np.asarray(x)
    single = x.shape == m0.input_shape
    values = _loglik(m0, x[None] if single else x, 256, 1)
    return float(values[0]) if single else values


def rank_by_score(records: list[ScoreRecord], k: int, direction: str = "abnormal", field: str = "posterior_score"):
    """Top-``k`` records, most abnormal (ascending score) or most normal (descending).

    Ties keep id order. Returns ``(records, truncated)`` where ``truncated``
    flags that ``k`` exceeded the number of records.
    """
    if direction not in ("abnormal", "normal"):
        raise ValueError("direction must be 'abnormal' or 'normal'")
    sign = 1.0 if direction == "abnormal" else -1.0
    ordered = sorted(records, key=lambda r: (sign * getattr(r, field), r.id))
    return ordered[:k], k > len(records)


def write_scores(path: str | os.PathLike, records: list[ScoreRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for r in records:
            w.writerow(
                [
                    r.id,
                    repr(r.loglik_normal),
                    repr(r.loglik_all),
                    repr(r.posterior_score),
                    repr(r.zero_pixel_fraction),
                    r.label or "",
                ]
            )


def read_scores(path: str | os.PathLike) -> list[ScoreRecord]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [
            ScoreRecord(
                id=row["id"],
                loglik_normal=float(row["loglik_normal"]),
                loglik_all=float(row["loglik_all"]),
                posterior_score=float(row["posterior_score"]),
                zero_pixel_fraction=float(row["zero_pixel_fraction"]),
                label=row.get("label") or None,
            )
            for row in reader
        ]
