"""Shared backend plumbing: the labeled logit vector both scorers emit,
the training configuration, and instance encoding over a fixed CCS
vocabulary."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ehr import PredictionInstance


class BackendError(ValueError):
    """Raised for shape mismatches, unknown codes, or bad backend kinds."""


@dataclass(frozen=True)
class LogitVector:
    """Per-CCS scores aligned to a sorted vocabulary."""

    vocab: tuple[str, ...]
    scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        scores = np.asarray(self.scores, dtype=float)
        object.__setattr__(self, "scores", scores)
        if scores.shape != (len(self.vocab),):
            raise BackendError(
                f"scores shape {scores.shape} does not match vocabulary "
                f"size {len(self.vocab)}"
            )
        if not np.all(np.isfinite(scores)):
            raise BackendError("non-finite logit")

    def score(self, code: str) -> float:
        try:
            return float(self.scores[self.vocab.index(code)])
        except ValueError:
            raise BackendError(f"CCS code {code!r} not in logit vector") from None

    def as_dict(self) -> dict[str, float]:
        return {c: float(s) for c, s in zip(self.vocab, self.scores)}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 1e-2
    batch_size: int = 16
    seed: int = 0
    d: int = 16
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise BackendError("epochs must be non-negative")
        if self.learning_rate < 0:
            raise BackendError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.d < 1:
            raise BackendError("batch_size and d must be positive")


@dataclass(frozen=True)
class EncodedInstance:
    """One prediction instance as vocabulary indices: per-visit code index
    arrays plus a multi-hot target over the full vocabulary."""

    visit_idx: tuple[np.ndarray, ...]
    target: np.ndarray


def code_index(vocab: tuple[str, ...]) -> dict[str, int]:
    return {c: i for i, c in enumerate(vocab)}


def encode_instance(
    instance: PredictionInstance, index: dict[str, int]
) -> EncodedInstance:
    try:
        visit_idx = tuple(
            np.array([index[c] for c in v.ccs], dtype=np.intp)
            for v in instance.input_visits
        )
        target = np.zeros(len(index))
        target[[index[c] for c in sorted(instance.target_overall)]] = 1.0
    except KeyError as exc:
        raise BackendError(
            f"CCS code {exc.args[0]!r} has no trained parameters"
        ) from None
    return EncodedInstance(visit_idx=visit_idx, target=target)
