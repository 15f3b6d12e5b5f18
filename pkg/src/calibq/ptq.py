"""Layer-wise post-training quantization: RTN, OPTQ and MagR preprocessing.

All solvers minimize ``||X (Q - W)||_F`` over grid-constrained ``Q`` where
``H = X^T X`` (possibly damped) stands in for the activations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .calibration import DampedGram
from .quant_grid import (
    MatrixGrid,
    QuantConfig,
    QuantGrid,
    dequantize,
    fit_matrix_grid,
    quantize_codes,
    quantize_matrix,
)

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class MagrConfig:
    """``alpha=None`` resolves to ``1e-3 * mean|W|`` at call time."""

    alpha: float | None = None
    iters: int = 50
    tol: float = 1e-6

    def __post_init__(self):
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError(f"magr alpha must be > 0, got {self.alpha}")
        if self.iters < 1:
            raise ValueError(f"magr iters must be >= 1, got {self.iters}")


@dataclass(frozen=True)
class PtqConfig:
    method: str = "optq"
    quant: QuantConfig = field(default_factory=QuantConfig)
    magr: MagrConfig | None = None
    damp_ratio: float = 0.01

    def __post_init__(self):
        if self.method not in ("rtn", "optq"):
            raise ValueError(f"method must be 'rtn' or 'optq', got {self.method!r}")
        if self.damp_ratio < 0:
            raise ValueError(f"damp_ratio must be >= 0, got {self.damp_ratio}")


@dataclass
class PtqResult:
    Q: np.ndarray
    codes: np.ndarray
    grid: MatrixGrid
    obj_weighted: float
    obj_plain: float
    W_pre: np.ndarray


def _gram(H) -> np.ndarray:
    return H.H if isinstance(H, DampedGram) else np.asarray(H, dtype=np.float64)


def weighted_objective(M, H) -> float:
    """``sqrt(Tr(M^T H M))``, i.e. ``||X M||_F`` when ``H = X^T X``."""
    M = np.asarray(M, dtype=np.float64)
    H = _gram(H)
    if H.shape[0] != M.shape[0]:
        raise ValueError(f"H is {H.shape} but M has {M.shape[0]} rows")
    val = float(np.sum(M * (H @ M)))
    return float(np.sqrt(max(val, 0.0)))


def _result(W, W_pre, Q, codes, grid, H) -> PtqResult:
    D = Q - W
    return PtqResult(
        Q=Q,
        codes=codes,
        grid=grid,
        obj_weighted=weighted_objective(D, H) if H is not None else float("nan"),
        obj_plain=float(np.linalg.norm(D)),
        W_pre=W_pre,
    )


def ptq_rtn(W, cfg: PtqConfig, H=None) -> PtqResult:
    """Round to nearest on per-group grids; ``H`` only feeds the diagnostics and MagR."""
    W = np.asarray(W, dtype=np.float64)
    W_pre = _maybe_magr(W, H, cfg)
    grid = fit_matrix_grid(W_pre, cfg.quant)
    Q, codes = quantize_matrix(W_pre, grid, cfg.quant.rounding)
    return _result(W, W_pre, Q, codes, grid, H)


def _inverse_cholesky(H: np.ndarray) -> np.ndarray:
    """Upper factor ``U`` with ``H^{-1} = U^T U``."""
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("Hessian is not positive definite; increase the damp ratio") from exc
    Linv = np.linalg.inv(L)
    Hinv = Linv.T @ Linv
    try:
        return np.linalg.cholesky(Hinv).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError("inverse Hessian factorization failed; increase the damp ratio") from exc


def ptq_optq(W, H, cfg: PtqConfig) -> PtqResult:
    """Greedy row sweep with inverse-Hessian error compensation.

    Rows (input features) are quantized in natural order. Grids are fit once
    on the preprocessed weights and stay fixed while later rows absorb the
    rounding error of earlier ones.
    """
    W = np.asarray(W, dtype=np.float64)
    Hm = _gram(H)
    m, n = W.shape
    if Hm.shape != (m, m):
        raise ValueError(f"H is {Hm.shape}, expected ({m}, {m})")
    W_pre = _maybe_magr(W, H, cfg)
    grid = fit_matrix_grid(W_pre, cfg.quant)
    U = _inverse_cholesky(Hm)

    rows_grid = grid.row_group()
    rounding = cfg.quant.rounding
    work = W_pre.copy()
    Q = np.empty_like(work)
    codes = np.empty((m, n), dtype=np.uint8)
    for i in range(m):
        g = rows_grid[i]
        gi = QuantGrid(grid.delta[g], grid.zero[g], grid.bits)
        codes[i] = quantize_codes(work[i], gi, rounding)
        Q[i] = dequantize(codes[i], gi)
        err = (work[i] - Q[i]) / U[i, i]
        if i + 1 < m:
            work[i + 1 :] -= np.outer(U[i, i + 1 :], err)
    return _result(W, W_pre, Q, codes, grid, H)


def quantize_layer(W, H, cfg: PtqConfig) -> PtqResult:
    if cfg.method == "rtn":
        return ptq_rtn(W, cfg, H)
    if H is None:
        raise ValueError("optq needs a Gram matrix")
    return ptq_optq(W, H, cfg)


# --- MagR ------------------------------------------------------------------


def project_l1_ball(V, radius) -> np.ndarray:
    """Euclidean projection of every column of ``V`` onto ``{x : ||x||_1 <= radius}``."""
    V = np.asarray(V, dtype=np.float64)
    squeeze = V.ndim == 1
    if squeeze:
        V = V[:, None]
    radius = np.broadcast_to(np.asarray(radius, dtype=np.float64), (V.shape[1],))
    A = np.abs(V)
    inside = A.sum(axis=0) <= radius
    srt = -np.sort(-A, axis=0)
    css = np.cumsum(srt, axis=0) - radius
    ks = np.arange(1, V.shape[0] + 1)[:, None]
    cond = srt - css / ks > 0
    rho = V.shape[0] - 1 - np.argmax(cond[::-1], axis=0)
    theta = css[rho, np.arange(V.shape[1])] / (rho + 1)
    theta = np.where(inside, 0.0, np.maximum(theta, 0.0))
    out = np.sign(V) * np.maximum(A - theta, 0.0)
    return out[:, 0] if squeeze else out


def prox_linf(V, t) -> np.ndarray:
    """Column-wise prox of ``t * ||.||_inf`` via the Moreau decomposition."""
    return V - project_l1_ball(V, t)


def magr_objective(Wt, W, H, alpha) -> np.ndarray:
    """Per-column ``||X(wt - w)||^2 + alpha ||wt||_inf``."""
    D = Wt - W
    return np.sum(D * (H @ D), axis=0) + alpha * np.max(np.abs(Wt), axis=0)


@dataclass
class MagrResult:
    W: np.ndarray
    history: np.ndarray
    converged: bool


def magr_preprocess(W, H, alpha: float, iters: int = 50, tol: float = 1e-6) -> MagrResult:
    """Shrink column-wise peak magnitudes with proximal gradient steps.

    Minimizes ``||X(wt - w)||^2 + alpha * ||wt||_inf`` for every column with
    step ``1 / (2 * lambda_max(H))``, which makes each column's objective
    non-increasing. ``history`` has one row of per-column objectives per
    iterate; row 0 is the input.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    W = np.asarray(W, dtype=np.float64)
    Hm = _gram(H)
    lmax = float(np.linalg.eigvalsh(Hm)[-1])
    if lmax <= 0:
        return MagrResult(W.copy(), np.zeros((1, W.shape[1])), True)
    step = 1.0 / (2.0 * lmax)

    Wt = W.copy()
    obj = magr_objective(Wt, W, Hm, alpha)
    history = [obj]
    converged = False
    for _ in range(iters):
        grad = 2.0 * Hm @ (Wt - W)
        cand = prox_linf(Wt - step * grad, step * alpha)
        new_obj = magr_objective(cand, W, Hm, alpha)
        # guard against round-off reversing a tiny decrease
        keep = new_obj <= obj
        Wt = np.where(keep, cand, Wt)
        new_obj = np.where(keep, new_obj, obj)
        history.append(new_obj)
        change = np.abs(obj.sum() - new_obj.sum()) / max(abs(obj.sum()), 1e-300)
        obj = new_obj
        if change <= tol:
            converged = True
            break
    if not converged:
        log.warning("MagR stopped after %d iterations without reaching tol=%g", iters, tol)
    return MagrResult(Wt, np.array(history), converged)


def _maybe_magr(W, H, cfg: PtqConfig) -> np.ndarray:
    if cfg.magr is None:
        return W
    if H is None:
        raise ValueError("MagR needs a Gram matrix")
    alpha = cfg.magr.alpha if cfg.magr.alpha is not None else 1e-3 * float(np.mean(np.abs(W)))
    if alpha <= 0:
        return W
    return magr_preprocess(W, H, alpha, cfg.magr.iters, cfg.magr.tol).W
