"""Discrepancy metrics and per-layer quality reports.

Norms are "damped discrepancies": they use ``H = X^T X + lam I`` rather than
the raw activations, and each row records ``lam``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .lowrank import LayerInitResult, build_root
from .ptq import weighted_objective

REPORT_SCHEMA_VERSION = 1


def discrepancy(W, Q, A, B, H, norm: str = "frobenius", root=None) -> float:
    """``||X (Q + A B^T - W)||`` measured through the Gram ``H``.

    The spectral path takes the largest singular value of ``R M`` with
    ``R^T R = H``; the ``b*l``-row activation matrix is never formed.
    """
    W = np.asarray(W, dtype=np.float64)
    M = np.asarray(Q, dtype=np.float64) + np.asarray(A, dtype=np.float64) @ np.asarray(B, dtype=np.float64).T - W
    if norm == "frobenius":
        return weighted_objective(M, H)
    if norm == "spectral":
        if root is None:
            root = build_root(H)
        if root.R.shape[1] != M.shape[0]:
            raise ValueError(f"root is {root.R.shape} but the weight has {M.shape[0]} rows")
        return float(np.linalg.norm(root.R @ M, 2))
    raise ValueError(f"norm must be 'frobenius' or 'spectral', got {norm!r}")


@dataclass(frozen=True)
class LayerReport:
    layer_id: str
    frob_disc: float
    spec_disc: float
    frob_q_only: float
    frob_baseline_loftq: float
    bits: int
    rank: int
    group_size: int
    variant: str
    lam: float

    @classmethod
    def from_result(cls, res: LayerInitResult) -> "LayerReport":
        q = res.ptq_config.quant
        return cls(
            layer_id=res.layer_id,
            frob_disc=res.frob_disc,
            spec_disc=res.spec_disc,
            frob_q_only=res.frob_q_only,
            frob_baseline_loftq=res.frob_baseline_loftq,
            bits=q.bits,
            rank=res.init_config.rank,
            group_size=q.group_size if q.granularity == "per_group" else 0,
            variant=res.init_config.variant,
            lam=res.lam,
        )

    def check(self, rtol: float = 1e-9) -> list[str]:
        """Violated orderings, empty when the row is consistent."""
        slack = lambda x: rtol * max(abs(x), 1e-300)  # noqa: E731
        problems = []
        if self.frob_disc > self.frob_q_only + slack(self.frob_q_only):
            problems.append("frob_disc > frob_q_only")
        if self.frob_disc > self.frob_baseline_loftq + slack(self.frob_baseline_loftq):
            problems.append("frob_disc > frob_baseline_loftq")
        if self.spec_disc > self.frob_disc + slack(self.frob_disc):
            problems.append("spec_disc > frob_disc")
        return problems


COLUMNS = tuple(f.name for f in fields(LayerReport))
_NORMS = ("frob_disc", "spec_disc", "frob_q_only", "frob_baseline_loftq")


@dataclass
class RunReport:
    layers: list[LayerReport]
    config: dict = field(default_factory=dict)
    version: str = __version__

    def aggregates(self) -> dict:
        out = {}
        for name in _NORMS:
            vals = np.array([getattr(r, name) for r in self.layers], dtype=np.float64)
            out[name] = {"mean": float(vals.mean()), "max": float(vals.max())}
        return out

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "toolkit_version": self.version,
            "metric": "damped discrepancy ||X(Q + A B^T - W)|| via H = X^T X + lam I",
            "config": self.config,
            "layers": [asdict(r) for r in self.layers],
            "aggregates": self.aggregates(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        layers = [LayerReport(**row) for row in d["layers"]]
        return cls(layers=layers, config=d.get("config", {}), version=d.get("toolkit_version", ""))


def _rows(results) -> list[LayerReport]:
    rows = []
    for r in results:
        rows.append(r if isinstance(r, LayerReport) else LayerReport.from_result(r))
    return rows


def emit_report(results, fmt: str = "json", config: dict | None = None) -> bytes:
    """Render results (``LayerInitResult`` or ``LayerReport`` items) as bytes.

    Output is deterministic: fixed column order, sorted JSON keys, ``repr``
    float formatting.
    """
    if isinstance(results, RunReport):
        report = results
    else:
        results = list(results)
        if not results:
            raise ValueError("cannot emit a report for zero layers")
        report = RunReport(layers=_rows(results), config=config or {})
    if not report.layers:
        raise ValueError("cannot emit a report for zero layers")

    if fmt == "json":
        return (json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n").encode("utf-8")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in report.layers:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in astuple_ordered(row)])
        return buf.getvalue().encode("utf-8")
    if fmt == "table":
        return _table(report).encode("utf-8")
    raise ValueError(f"format must be json, csv or table, got {fmt!r}")


def astuple_ordered(row: LayerReport) -> tuple:
    return tuple(getattr(row, c) for c in COLUMNS)


def _table(report: RunReport) -> str:
    header = ["layer", "frob", "spectral", "q-only", "loftq", "bits", "rank", "group", "variant", "lambda"]
    body = []
    for r in report.layers:
        body.append([
            r.layer_id,
            f"{r.frob_disc:.6g}",
            f"{r.spec_disc:.6g}",
            f"{r.frob_q_only:.6g}",
            f"{r.frob_baseline_loftq:.6g}",
            str(r.bits),
            str(r.rank),
            str(r.group_size),
            r.variant,
            f"{r.lam:.4g}",
        ])
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    agg = report.aggregates()
    lines.append("")
    for name in _NORMS:
        lines.append(f"{name}: mean={agg[name]['mean']:.6g} max={agg[name]['max']:.6g}")
    return "\n".join(lines) + "\n"
