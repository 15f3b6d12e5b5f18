"""Gram matrix accumulation and diagonal damping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_store import LayerRecord, TensorBundle

SYMMETRY_TOL = 1e-6
PSD_TOL = 1e-8


class CalibrationError(ValueError):
    pass


class GramAccumulator:
    """Running ``X^T X`` over row batches of activations, kept in float64."""

    def __init__(self, m: int):
        if m < 1:
            raise CalibrationError(f"m must be >= 1, got {m}")
        self.m = m
        self.sum = np.zeros((m, m))
        self.sample_rows = 0

    def accumulate(self, batch) -> "GramAccumulator":
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.m:
            raise CalibrationError(f"expected a (rows, {self.m}) batch, got shape {batch.shape}")
        if not np.all(np.isfinite(batch)):
            raise CalibrationError("activation batch contains NaN or Inf")
        self.sum += batch.T @ batch
        self.sample_rows += batch.shape[0]
        return self

    @classmethod
    def from_gram(cls, H, sample_rows: int = 0) -> "GramAccumulator":
        """Wrap a precomputed Gram after symmetrizing and checking PSD."""
        H = np.asarray(H, dtype=np.float64)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise CalibrationError(f"Gram must be square, got shape {H.shape}")
        if not np.all(np.isfinite(H)):
            raise CalibrationError("Gram contains NaN or Inf")
        norm = np.linalg.norm(H)
        if np.linalg.norm(H - H.T) > SYMMETRY_TOL * norm:
            raise CalibrationError(
                "precomputed Gram is not symmetric within tolerance "
                f"(relative asymmetry {np.linalg.norm(H - H.T) / norm:.3g})"
            )
        H = 0.5 * (H + H.T)
        if norm > 0:
            lo = np.linalg.eigvalsh(H)[0]
            if lo < -PSD_TOL * np.linalg.norm(H, 2):
                raise CalibrationError(f"precomputed Gram is not PSD (min eigenvalue {lo:.3g})")
        acc = cls(H.shape[0])
        acc.sum = H
        acc.sample_rows = sample_rows
        return acc


@dataclass(frozen=True)
class DampedGram:
    """``H + lam * I`` together with the damping bookkeeping."""

    H: np.ndarray
    lam: float
    trace_pre: float
    degenerate: bool = False

    @property
    def m(self) -> int:
        return self.H.shape[0]


def damp(gram, ratio: float = 0.01) -> DampedGram:
    """Add ``lam = ratio * Tr(H) / m`` to the diagonal.

    An all-zero Gram yields ``lam = 0`` and ``degenerate=True``; the low-rank
    step then falls back to the pseudo-inverse.
    """
    if ratio < 0:
        raise CalibrationError(f"damp ratio must be >= 0, got {ratio}")
    H = gram.sum if isinstance(gram, GramAccumulator) else np.asarray(gram, dtype=np.float64)
    m = H.shape[0]
    trace = float(np.trace(H))
    lam = ratio * trace / m
    damped = H.copy()
    damped[np.diag_indices(m)] += lam
    return DampedGram(H=damped, lam=lam, trace_pre=trace, degenerate=trace == 0.0)


def gram_from_bundle(bundle: TensorBundle, record: LayerRecord, block_rows: int = 4096) -> GramAccumulator:
    if record.gram_name is not None:
        H = bundle[record.gram_name]
        if H.shape != (record.m, record.m):
            raise CalibrationError(
                f"layer {record.layer_id}: gram shape {H.shape} does not match m={record.m}"
            )
        return GramAccumulator.from_gram(H)
    if record.activation_name is not None:
        X = bundle[record.activation_name]
        if X.ndim != 2 or X.shape[1] != record.m:
            raise CalibrationError(
                f"layer {record.layer_id}: activations shape {X.shape} do not have m={record.m} columns"
            )
        acc = GramAccumulator(record.m)
        for start in range(0, X.shape[0], block_rows):
            acc.accumulate(X[start : start + block_rows])
        return acc
    raise CalibrationError(f"layer {record.layer_id}: no '/gram' or '/acts' entry in bundle")
