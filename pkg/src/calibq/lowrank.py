"""Closed-form low-rank adapter initialization under a calibration metric.

The problem ``min_{A,B} ||X (A B^T - dW)||_F`` becomes an ordinary best rank-r
approximation after mapping through a root ``R`` of ``H = X^T X``
(``R^T R = H``)::

    A B^T = R^{-1} LR_r(R dW)

Only two decompositions are needed (one of ``H``, one of ``R dW``) and neither
depends on the number of calibration rows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .calibration import DampedGram, damp
from .ptq import NumericalError, PtqConfig, PtqResult, ptq_rtn, quantize_layer, weighted_objective

log = logging.getLogger(__name__)

VARIANTS = ("a-sigma", "b-sigma", "split-sqrt")


@dataclass(frozen=True)
class InitConfig:
    """Adapter settings.

    ``variant`` picks where the singular values go:
    ``a-sigma`` gives ``(R^-1 U S, V)``, ``b-sigma`` gives ``(R^-1 U, V S)``
    and ``split-sqrt`` gives ``(R^-1 U S^1/2, V S^1/2)``.
    """

    rank: int = 64
    variant: str = "a-sigma"
    altmin_iters: int = 1
    eig_floor_ratio: float = 1e-12

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.altmin_iters < 1:
            raise ValueError(f"altmin_iters must be >= 1, got {self.altmin_iters}")
        if self.eig_floor_ratio < 0:
            raise ValueError(f"eig_floor_ratio must be >= 0, got {self.eig_floor_ratio}")


@dataclass(frozen=True)
class RootTransform:
    """``R = S^1/2 U^T`` from ``H = U S U^T`` and its (pseudo-)inverse."""

    R: np.ndarray
    R_inv: np.ndarray
    rank: int
    eig_floor: float
    eigvals: np.ndarray

    @property
    def full_rank(self) -> bool:
        return self.rank == self.R.shape[0]


def _gram(H) -> np.ndarray:
    return H.H if isinstance(H, DampedGram) else np.asarray(H, dtype=np.float64)


def build_root(H, eig_floor_ratio: float = 1e-12) -> RootTransform:
    """Non-symmetric square root of a PSD Gram matrix.

    Eigenvalues at or below ``eig_floor_ratio * max_eig`` (and negative
    round-off) are treated as exact zeros in both ``R`` and its inverse, so
    ``R_inv`` is the Moore-Penrose pseudo-inverse of ``R``.
    """
    H = _gram(H)
    H = 0.5 * (H + H.T)
    try:
        s, U = np.linalg.eigh(H)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("eigendecomposition of the Gram matrix failed") from exc
    s, U = s[::-1], U[:, ::-1]
    s = np.maximum(s, 0.0)
    floor = eig_floor_ratio * s[0] if s.size else 0.0
    keep = s > floor
    s = np.where(keep, s, 0.0)
    root = np.sqrt(s)
    R = root[:, None] * U.T
    inv_root = np.divide(1.0, root, out=np.zeros_like(root), where=keep)
    R_inv = U * inv_root[None, :]
    return RootTransform(R=R, R_inv=R_inv, rank=int(keep.sum()), eig_floor=float(floor), eigvals=s)


def _canonical_signs(U: np.ndarray, Vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Make the largest-magnitude entry of every right singular vector non-negative."""
    idx = np.argmax(np.abs(Vt), axis=1)
    signs = np.sign(Vt[np.arange(Vt.shape[0]), idx])
    signs[signs == 0] = 1.0
    return U * signs[None, :], Vt * signs[:, None]


def _svd(M: np.ndarray):
    try:
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("SVD did not converge") from exc
    U, Vt = _canonical_signs(U, Vt)
    return U, s, Vt


def truncated_lr(M, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-r singular triplets ``(U_r, s_r, V_r)`` of ``M``.

    ``U_r @ diag(s_r) @ V_r.T`` is a best rank-r approximation in Frobenius
    norm. ``s_r`` is a 1-D array in non-increasing order.
    """
    M = np.asarray(M, dtype=np.float64)
    if not 1 <= r <= min(M.shape):
        raise ValueError(f"rank {r} outside [1, {min(M.shape)}] for a {M.shape} matrix")
    U, s, Vt = _svd(M)
    return U[:, :r], s[:r], Vt[:r].T


def lr_approx(M, r: int) -> np.ndarray:
    U, s, V = truncated_lr(M, r)
    return (U * s) @ V.T


def tail_energy(M, r: int) -> float:
    """Squared Frobenius error of the best rank-r approximation."""
    s = np.linalg.svd(np.asarray(M, dtype=np.float64), compute_uv=False)
    return float(np.sum(s[r:] ** 2))


@dataclass
class AdapterPair:
    A: np.ndarray
    B: np.ndarray
    variant: str
    rank: int
    sigma: np.ndarray = field(repr=False)

    @property
    def product(self) -> np.ndarray:
        return self.A @ self.B.T


def split_factors(R_inv: np.ndarray, U: np.ndarray, s: np.ndarray, V: np.ndarray, variant: str):
    if variant == "a-sigma":
        return R_inv @ (U * s), V.copy()
    if variant == "b-sigma":
        return R_inv @ U, V * s
    if variant == "split-sqrt":
        h = np.sqrt(s)
        return R_inv @ (U * h), V * h
    raise ValueError(f"unknown variant {variant!r}")


def cloq_init(DeltaW, root: RootTransform, cfg: InitConfig) -> AdapterPair:
    """Optimal rank-r ``(A, B)`` for ``min ||X (A B^T - DeltaW)||_F``.

    ``sigma`` on the result holds every singular value of ``R @ DeltaW``; the
    achieved squared objective equals ``sum(sigma[rank:] ** 2)`` when the Gram
    matrix has full rank.
    """
    DeltaW = np.asarray(DeltaW, dtype=np.float64)
    m, n = DeltaW.shape
    if root.R.shape != (m, m):
        raise ValueError(f"root is {root.R.shape} but DeltaW has {m} rows")
    r = cfg.rank
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} exceeds min(m, n) = {min(m, n)}")
    U, s, Vt = _svd(root.R @ DeltaW)
    A, B = split_factors(root.R_inv, U[:, :r], s[:r], Vt[:r].T, cfg.variant)
    return AdapterPair(A=A, B=B, variant=cfg.variant, rank=r, sigma=s)


@dataclass
class LayerInitResult:
    """Quantized weight, adapters and discrepancy diagnostics for one layer.

    Discrepancies are Frobenius/spectral norms of ``X M`` computed from the
    damped Gram; ``lam`` records the damping used.
    """

    layer_id: str
    Q: np.ndarray
    A: np.ndarray
    B: np.ndarray
    ptq: PtqResult
    ptq_config: PtqConfig
    init_config: InitConfig
    lam: float
    frob_q_only: float = float("nan")
    frob_disc: float = float("nan")
    spec_disc: float = float("nan")
    frob_baseline_loftq: float = float("nan")
    plain_q_only: float = float("nan")
    plain_disc: float = float("nan")
    history: list = field(default_factory=list)

    @property
    def bits(self) -> int:
        return self.ptq_config.quant.bits

    @property
    def rank(self) -> int:
        return self.init_config.rank


def _objective(W, Q, AB, H) -> float:
    return weighted_objective(Q + AB - W, H)


def altmin_refine(W, H, cfg_ptq: PtqConfig, cfg_init: InitConfig, root: RootTransform | None = None,
                  layer_id: str = "layer") -> LayerInitResult:
    """Alternate between quantizing ``W - A B^T`` and refitting the adapters.

    Starts from ``A B^T = 0``; one iteration is the plain quantize-then-init
    pipeline. ``history`` records ``(step, objective)`` after every Q-step and
    every adapter step. Each adapter step is a global minimizer given ``Q``,
    so the objective never increases across it.
    """
    W = np.asarray(W, dtype=np.float64)
    m, n = W.shape
    Hm = _gram(H)
    if Hm.shape != (m, m):
        raise ValueError(f"Gram is {Hm.shape}, expected ({m}, {m})")
    if root is None:
        root = build_root(Hm, cfg_init.eig_floor_ratio)
    degenerate = isinstance(H, DampedGram) and H.degenerate
    if degenerate and cfg_ptq.method == "optq":
        log.warning("%s: all-zero Gram, falling back to RTN", layer_id)

    AB = np.zeros_like(W)
    history = []
    ptq = pair = None
    for t in range(cfg_init.altmin_iters):
        target = W - AB
        if degenerate:
            ptq = ptq_rtn(target, cfg_ptq, Hm)
        else:
            ptq = quantize_layer(target, Hm, cfg_ptq)
        history.append((f"q{t + 1}", _objective(W, ptq.Q, AB, Hm)))
        pair = cloq_init(W - ptq.Q, root, cfg_init)
        AB = pair.product
        history.append((f"lr{t + 1}", _objective(W, ptq.Q, AB, Hm)))

    lam = H.lam if isinstance(H, DampedGram) else 0.0
    return LayerInitResult(
        layer_id=layer_id,
        Q=ptq.Q,
        A=pair.A,
        B=pair.B,
        ptq=ptq,
        ptq_config=cfg_ptq,
        init_config=cfg_init,
        lam=lam,
        history=history,
    )


def layer_pipeline(W, gram, cfg_ptq: PtqConfig, cfg_init: InitConfig, layer_id: str = "layer") -> LayerInitResult:
    """Quantize one layer, initialize its adapters and fill in diagnostics.

    ``gram`` may be a ``DampedGram`` (used as is) or a raw ``X^T X`` that is
    damped with ``cfg_ptq.damp_ratio``.
    """
    W = np.asarray(W, dtype=np.float64)
    H = gram if isinstance(gram, DampedGram) else damp(gram, cfg_ptq.damp_ratio)
    root = build_root(H, cfg_init.eig_floor_ratio)
    res = altmin_refine(W, H, cfg_ptq, cfg_init, root=root, layer_id=layer_id)

    AB = res.A @ res.B.T
    dW = W - res.Q
    res.frob_q_only = weighted_objective(-dW, H)
    res.frob_disc = weighted_objective(AB - dW, H)
    res.spec_disc = float(np.linalg.norm(root.R @ (AB - dW), 2))
    res.frob_baseline_loftq = weighted_objective(lr_approx(dW, cfg_init.rank) - dW, H)
    res.plain_q_only = float(np.linalg.norm(dW))
    res.plain_disc = float(np.linalg.norm(AB - dW))
    return res
