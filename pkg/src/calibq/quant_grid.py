"""Uniform asymmetric b-bit integer quantizer.

A grid is a scale ``delta`` and an integer zero-point ``zero``; its points are
``(k - zero) * delta`` for codes ``k = 0 .. 2**bits - 1``. Weights are mapped to
codes by ``clip(round(w / delta) + zero, 0, 2**bits - 1)``.

For a weight matrix ``W`` of shape ``(m, n)`` the rows index input features.
Groups partition the rows; every (row-group, column) pair owns one grid, so
matrix grids are stored as ``(n_groups, n)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRANULARITIES = ("per_tensor", "per_channel", "per_group")
ROUNDING = ("half_away", "half_even")


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    granularity: str = "per_group"
    group_size: int = 64
    rounding: str = "half_away"

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be an integer in [2, 8], got {self.bits!r}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")
        if self.group_size < 2:
            raise ValueError(f"group_size must be >= 2, got {self.group_size}")
        if self.rounding not in ROUNDING:
            raise ValueError(f"rounding must be one of {ROUNDING}, got {self.rounding!r}")

    @property
    def maxq(self) -> int:
        return 2**self.bits - 1


@dataclass(frozen=True)
class QuantGrid:
    """Scale and zero-point, scalar or broadcast over columns/groups."""

    delta: np.ndarray
    zero: np.ndarray
    bits: int

    @property
    def maxq(self) -> int:
        return 2**self.bits - 1

    def points(self) -> np.ndarray:
        """All grid values of a scalar grid, ascending."""
        k = np.arange(self.maxq + 1, dtype=np.float64)
        return (k - float(self.zero)) * float(self.delta)


@dataclass(frozen=True)
class QuantizedGroup:
    codes: np.ndarray
    grid: QuantGrid

    def dequantize(self) -> np.ndarray:
        return dequantize(self.codes, self.grid)


def round_nearest(x: np.ndarray, rounding: str = "half_away") -> np.ndarray:
    if rounding == "half_away":
        return np.copysign(np.floor(np.abs(x) + 0.5), x)
    if rounding == "half_even":
        return np.rint(x)
    raise ValueError(f"unknown rounding rule {rounding!r}")


def fit_grid(w, cfg: QuantConfig) -> QuantGrid:
    """Fit min/max grids, reducing over axis 0.

    A vector gives a scalar grid; an ``(k, n)`` block gives ``n`` grids.
    Constant inputs get ``delta = 1`` and ``zero = -round(c)`` so the constant
    lands on the nearest integer grid point.

    The zero-point is left unclamped: for one-signed groups it falls outside
    ``[0, 2**bits - 1]`` and the grid still spans ``[min, max]``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot fit a grid to an empty array")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights contain NaN or Inf")
    lo = w.min(axis=0)
    hi = w.max(axis=0)
    degenerate = hi <= lo
    delta = np.where(degenerate, 1.0, (hi - lo) / cfg.maxq)
    zero = np.where(
        degenerate,
        -round_nearest(lo, cfg.rounding),
        -round_nearest(lo / delta, cfg.rounding),
    )
    return QuantGrid(delta=delta, zero=zero, bits=cfg.bits)


def quantize_codes(w, grid: QuantGrid, rounding: str = "half_away") -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    k = round_nearest(w / grid.delta, rounding) + grid.zero
    return np.clip(k, 0, grid.maxq).astype(np.uint8)


def dequantize(codes, grid: QuantGrid) -> np.ndarray:
    return grid.delta * (np.asarray(codes, dtype=np.float64) - grid.zero)


def quantize_rtn(w, grid: QuantGrid, rounding: str = "half_away") -> QuantizedGroup:
    return QuantizedGroup(codes=quantize_codes(w, grid, rounding), grid=grid)


def partition_rows(m: int, cfg: QuantConfig) -> list[range]:
    """Row ranges that share grids.

    ``per_channel`` and ``per_tensor`` use one range covering all rows: a
    per-channel grid spans a whole output column. ``per_group`` yields
    ``ceil(m / group_size)`` ranges, the last possibly short.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if cfg.granularity != "per_group":
        return [range(0, m)]
    g = cfg.group_size
    return [range(s, min(s + g, m)) for s in range(0, m, g)]


@dataclass(frozen=True)
class MatrixGrid:
    """Grids for a whole ``(m, n)`` matrix: ``delta``/``zero`` are ``(groups, n)``."""

    delta: np.ndarray
    zero: np.ndarray
    bits: int
    groups: tuple[range, ...]

    def row_group(self) -> np.ndarray:
        """Group index of every row."""
        idx = np.empty(self.groups[-1].stop, dtype=np.intp)
        for g, rows in enumerate(self.groups):
            idx[rows.start : rows.stop] = g
        return idx

    def for_rows(self, rows) -> QuantGrid:
        g = self.row_group()[rows]
        return QuantGrid(self.delta[g], self.zero[g], self.bits)


def fit_matrix_grid(W, cfg: QuantConfig) -> MatrixGrid:
    W = np.asarray(W, dtype=np.float64)
    m, n = W.shape
    groups = partition_rows(m, cfg)
    if cfg.granularity == "per_tensor":
        g = fit_grid(W.ravel(), cfg)
        delta = np.full((1, n), float(g.delta))
        zero = np.full((1, n), float(g.zero))
    else:
        fitted = [fit_grid(W[rows.start : rows.stop], cfg) for rows in groups]
        delta = np.stack([f.delta for f in fitted])
        zero = np.stack([f.zero for f in fitted])
    return MatrixGrid(delta=delta, zero=zero, bits=cfg.bits, groups=tuple(groups))


def quantize_matrix(W, grid: MatrixGrid, rounding: str = "half_away") -> tuple[np.ndarray, np.ndarray]:
    """Round every entry of ``W`` on its own grid; returns ``(Q, codes)``."""
    full = grid.for_rows(slice(None))
    codes = quantize_codes(W, full, rounding)
    return dequantize(codes, full), codes
