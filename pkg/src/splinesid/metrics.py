"""Scoring of discovered coefficient vectors against ground truth.

A discovered model and the truth are compared on the same canonical library
ordering, with exact zeros for absent terms.  Alignment is by descriptor
key, never by position in a pruned active set, because pruning reorders
support indices.  A coefficient counts as nonzero exactly when it survived
pruning; no epsilon thresholding happens here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = ["ScoreCard", "score"]


@dataclass(frozen=True)
class ScoreCard:
    """Coefficient error and structural agreement of one discovered model.

    ``rmse`` is the relative coefficient error ``|C_disc - C_true| /
    |C_true|`` in the Euclidean norm over all (term, state) entries.
    ``precision`` is the fraction of discovered nonzeros that are truly
    nonzero, ``recall`` the fraction of true nonzeros that were discovered.
    ``per_term`` lists one row per (term, state) entry where either vector
    is nonzero: (descriptor label, state index, true value, discovered
    mean, discovered std).
    """

    rmse: float
    precision: float
    recall: float
    per_term: tuple = field(default_factory=tuple)

    def as_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "precision": self.precision,
            "recall": self.recall,
            "per_term": [
                {
                    "term": label,
                    "state": state,
                    "true": true,
                    "mean": mean,
                    "std": std,
                }
                for label, state, true, mean, std in self.per_term
            ],
        }


def _as_matrix(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ConfigError(f"{name} must be a vector or matrix, got ndim {arr.ndim}")
    return arr


def score(discovered, truth, stds=None, labels=None) -> ScoreCard:
    """Score a discovered coefficient set against the true one.

    Both arguments are (num_terms,) vectors or (num_terms, num_states)
    matrices on the same canonical ordering.  ``stds`` optionally supplies
    posterior standard deviations of the same shape; ``labels`` optionally
    names the terms for the per-term table.  An all-zero truth leaves every
    metric undefined and is rejected.  An empty discovery scores zero
    precision by convention so that downstream comparisons fail closed.
    """
    C_disc = _as_matrix(discovered, "discovered")
    C_true = _as_matrix(truth, "truth")
    if C_disc.shape != C_true.shape:
        raise ConfigError(
            f"shape mismatch: discovered {C_disc.shape} vs truth {C_true.shape}")
    true_nnz = C_true != 0
    if not true_nnz.any():
        raise ConfigError("truth coefficients are all zero; metrics undefined")
    disc_nnz = C_disc != 0
    overlap = int((disc_nnz & true_nnz).sum())
    num_disc = int(disc_nnz.sum())
    precision = overlap / num_disc if num_disc else 0.0
    recall = overlap / int(true_nnz.sum())
    rmse = float(np.linalg.norm(C_disc - C_true) / np.linalg.norm(C_true))

    S = _as_matrix(stds, "stds") if stds is not None else np.zeros_like(C_true)
    if S.shape != C_true.shape:
        raise ConfigError(f"stds shape {S.shape} does not match {C_true.shape}")
    rows = []
    for term, state in zip(*np.nonzero(disc_nnz | true_nnz)):
        label = str(labels[term]) if labels is not None else f"term_{term}"
        rows.append((label, int(state), float(C_true[term, state]),
                     float(C_disc[term, state]), float(S[term, state])))
    return ScoreCard(rmse, float(precision), float(recall), tuple(rows))
