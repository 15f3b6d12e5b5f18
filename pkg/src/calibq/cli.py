"""Command-line pipeline: gram -> quantize -> low-rank init -> report.

Settings are resolved in this order, later entries winning: built-in
defaults, the JSON config file (``--config``), the ``CLOQ_WORKERS``
environment variable (worker count only), explicit command-line flags.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import fnmatch
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import __version__
from .calibration import CalibrationError, GramAccumulator, damp, gram_from_bundle
from .diagnostics import LayerReport, RunReport, emit_report
from .lowrank import VARIANTS, InitConfig, layer_pipeline
from .ptq import MagrConfig, NumericalError, PtqConfig, quantize_layer
from .quant_grid import GRANULARITIES, ROUNDING, QuantConfig
from .tensor_store import BundleError, LayerRecord, TensorBundle, layer_records, read_bundle, write_bundle

log = logging.getLogger("calibq")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# fields that change how a run executes but not what it computes
RUNTIME_ONLY = ("output", "workers", "keep_going")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


@dataclass
class RunConfig:
    input: str = ""
    output: str = ""
    layers: list[str] | None = None
    method: str = "optq"
    bits: int = 4
    granularity: str = "per_group"
    group_size: int = 64
    rounding: str = "half_away"
    magr_alpha: float | str = 0.0
    magr_iters: int = 50
    magr_tol: float = 1e-6
    rank: int = 64
    variant: str = "a-sigma"
    altmin_iters: int = 1
    eig_floor: float = 1e-12
    damp_ratio: float = 0.01
    workers: int = 1
    seed: int = 0
    keep_going: bool = False
    save_codes: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**d)

    def echo(self) -> dict:
        return {k: v for k, v in self.to_dict().items() if k not in RUNTIME_ONLY}

    def check(self) -> list[str]:
        """Field-level problems, one message per offending field."""
        out = []
        if not self.input:
            out.append("input: path must be non-empty")
        if not self.output:
            out.append("output: path must be non-empty")
        if self.method not in ("rtn", "optq"):
            out.append(f"method: must be 'rtn' or 'optq', got {self.method!r}")
        if not _is_int(self.bits) or not 2 <= self.bits <= 8:
            out.append(f"bits: must be an integer in [2, 8], got {self.bits!r}")
        if self.granularity not in GRANULARITIES:
            out.append(f"granularity: must be one of {GRANULARITIES}, got {self.granularity!r}")
        if not _is_int(self.group_size) or self.group_size < 2:
            out.append(f"group_size: must be an integer >= 2, got {self.group_size!r}")
        if self.rounding not in ROUNDING:
            out.append(f"rounding: must be one of {ROUNDING}, got {self.rounding!r}")
        if not (self.magr_alpha == "auto" or (_is_num(self.magr_alpha) and self.magr_alpha >= 0)):
            out.append(f"magr_alpha: must be >= 0 or 'auto', got {self.magr_alpha!r}")
        if not _is_int(self.magr_iters) or self.magr_iters < 1:
            out.append(f"magr_iters: must be an integer >= 1, got {self.magr_iters!r}")
        if not _is_int(self.rank) or self.rank < 1:
            out.append(f"rank: must be an integer >= 1, got {self.rank!r}")
        if self.variant not in VARIANTS:
            out.append(f"variant: must be one of {VARIANTS}, got {self.variant!r}")
        if not _is_int(self.altmin_iters) or self.altmin_iters < 1:
            out.append(f"altmin_iters: must be an integer >= 1, got {self.altmin_iters!r}")
        if not _is_num(self.eig_floor) or self.eig_floor < 0:
            out.append(f"eig_floor: must be >= 0, got {self.eig_floor!r}")
        if not _is_num(self.damp_ratio) or self.damp_ratio < 0:
            out.append(f"damp_ratio: must be >= 0, got {self.damp_ratio!r}")
        if not _is_int(self.workers) or self.workers < 1:
            out.append(f"workers: must be an integer >= 1, got {self.workers!r}")
        if self.layers is not None and not (
            isinstance(self.layers, list) and all(isinstance(x, str) for x in self.layers)
        ):
            out.append("layers: must be a list of names or glob patterns")
        return out

    def ptq_config(self) -> PtqConfig:
        magr = None
        if self.magr_alpha == "auto":
            magr = MagrConfig(None, self.magr_iters, self.magr_tol)
        elif self.magr_alpha > 0:
            magr = MagrConfig(float(self.magr_alpha), self.magr_iters, self.magr_tol)
        quant = QuantConfig(self.bits, self.granularity, self.group_size, self.rounding)
        return PtqConfig(self.method, quant, magr, self.damp_ratio)

    def init_config(self) -> InitConfig:
        return InitConfig(self.rank, self.variant, self.altmin_iters, self.eig_floor)


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return RunConfig.from_dict(data)


def save_config(config: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def select_layers(records: list[LayerRecord], patterns: list[str] | None) -> list[LayerRecord]:
    if patterns is None:
        return records
    for p in patterns:
        if not any(fnmatch.fnmatchcase(r.layer_id, p) for r in records):
            raise DataError(f"layer selection {p!r} matches no layer in the input bundle")
    return [r for r in records if any(fnmatch.fnmatchcase(r.layer_id, p) for p in patterns)]


def validate(config_path: str) -> list[str]:
    """Check a config file without running it; returns diagnostics (empty if clean).

    When the input bundle is readable, per-layer checks run too (rank versus
    layer dimensions, calibration data present for optq).
    """
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        return [str(exc)]
    diags = config.check()
    if not config.input:
        return diags
    if not os.path.exists(config.input):
        return diags + [f"input: bundle {config.input!r} not found"]
    try:
        records = select_layers(layer_records(read_bundle(config.input)), config.layers)
    except (BundleError, DataError) as exc:
        return diags + [f"input: {exc}"]
    for rec in records:
        if _is_int(config.rank) and config.rank > min(rec.m, rec.n):
            diags.append(f"rank: {config.rank} exceeds min(m, n) = {min(rec.m, rec.n)} for layer {rec.layer_id}")
        if config.method == "optq" and rec.gram_name is None and rec.activation_name is None:
            diags.append(f"layer {rec.layer_id}: method optq needs '{rec.layer_id}/gram' or '{rec.layer_id}/acts'")
    return diags


def _layer_gram(bundle: TensorBundle, rec: LayerRecord, config: RunConfig):
    if rec.gram_name is None and rec.activation_name is None:
        if config.method == "optq":
            raise DataError(
                f"layer {rec.layer_id}: missing entry '{rec.layer_id}/gram' (or '{rec.layer_id}/acts') "
                "required by method optq"
            )
        # no calibration data: identity metric, adapters reduce to a plain truncated SVD
        return damp(np.eye(rec.m), 0.0)
    return damp(gram_from_bundle(bundle, rec), config.damp_ratio)


def _run_layer(bundle: TensorBundle, rec: LayerRecord, config: RunConfig, mode: str):
    if mode == "init" and config.rank > min(rec.m, rec.n):
        raise ConfigError(f"rank {config.rank} exceeds min(m, n) = {min(rec.m, rec.n)}")
    W = bundle[rec.weight_name].astype(np.float64)
    H = _layer_gram(bundle, rec, config)
    if mode == "quantize":
        return quantize_layer(W, H, config.ptq_config())
    return layer_pipeline(W, H, config.ptq_config(), config.init_config(), layer_id=rec.layer_id)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    return EXIT_DATA


def _relabel(exc: BaseException, layer_id: str) -> BaseException:
    msg = f"layer {layer_id}: {exc}"
    if isinstance(exc, ConfigError):
        return ConfigError(msg)
    if isinstance(exc, NumericalError):
        return NumericalError(msg)
    return DataError(msg)


def run(config: RunConfig, mode: str = "init") -> tuple[int, RunReport | None]:
    """Process every selected layer and write the output bundle.

    ``mode="init"`` runs quantization plus adapter initialization and writes
    ``L/Q``, ``L/A`` (f16), ``L/B`` (f16), ``L/scales`` and ``L/zeros``;
    ``mode="quantize"`` stops after quantization. Layers are processed by a
    thread pool; outputs are assembled in layer order so the bytes do not
    depend on the worker count.

    The first failing layer (in layer order) aborts the run unless
    ``config.keep_going`` is set, in which case failures are recorded in the
    output metadata and reflected in the returned exit status.
    """
    if mode not in ("init", "quantize"):
        raise ValueError(f"mode must be 'init' or 'quantize', got {mode!r}")
    problems = config.check()
    if problems:
        raise ConfigError("; ".join(problems))
    try:
        bundle = read_bundle(config.input)
    except OSError as exc:
        raise DataError(f"cannot read input bundle {config.input}: {exc}") from exc
    records = select_layers(layer_records(bundle), config.layers)
    if not records:
        raise DataError(f"no layers ('<name>/W' entries) selected in {config.input}")

    def job(rec):
        try:
            return rec, _run_layer(bundle, rec, config, mode), None
        except (ValueError, NumericalError) as exc:
            return rec, None, exc

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        outcomes = list(pool.map(job, records))

    out = TensorBundle()
    rows = []
    failures = {}
    status = EXIT_OK
    for rec, res, exc in outcomes:
        if exc is not None:
            if not config.keep_going:
                raise _relabel(exc, rec.layer_id) from exc
            log.error("layer %s: %s", rec.layer_id, exc)
            failures[rec.layer_id] = str(exc)
            status = max(status, _exit_code(exc))
            continue
        L = rec.layer_id
        ptq = res.ptq if mode == "init" else res
        out.add(f"{L}/Q", ptq.Q.astype(np.float32))
        out.add(f"{L}/scales", ptq.grid.delta.astype(np.float32))
        out.add(f"{L}/zeros", ptq.grid.zero.astype(np.float32))
        if config.save_codes:
            out.add(f"{L}/codes", ptq.codes)
        if mode == "init":
            out.add(f"{L}/A", res.A.astype(np.float16))
            out.add(f"{L}/B", res.B.astype(np.float16))
            rows.append(LayerReport.from_result(res))
        else:
            rows.append({"layer_id": L, "obj_weighted": ptq.obj_weighted, "obj_plain": ptq.obj_plain})

    echo = config.echo()
    report = RunReport(layers=rows, config=echo) if mode == "init" and rows else None
    metadata = {"tool": "calibq", "version": __version__, "mode": mode, "config": echo}
    if report is not None:
        metadata["report"] = report.to_dict()
    elif rows:
        metadata["layers"] = rows
    if failures:
        metadata["failures"] = failures
    out.metadata = metadata
    write_bundle(out, config.output)
    return status, report


def gram_bundle(source: str, destination: str, block_rows: int = 4096) -> int:
    """Replace every ``L/acts`` entry with a float32 ``L/gram``; other entries are copied."""
    bundle = read_bundle(source)
    out = TensorBundle(metadata=dict(bundle.metadata))
    converted = 0
    for name in bundle.names():
        if not name.endswith("/acts"):
            out.add(name, bundle[name])
            continue
        layer = name[: -len("/acts")]
        if f"{layer}/gram" in bundle:
            raise DataError(f"layer {layer}: has both '/acts' and '/gram'")
        X = bundle[name]
        if X.ndim != 2:
            raise DataError(f"{name}: activations must be 2-D, got shape {X.shape}")
        acc = GramAccumulator(X.shape[1])
        for start in range(0, X.shape[0], block_rows):
            acc.accumulate(X[start : start + block_rows])
        out.add(f"{layer}/gram", acc.sum.astype(np.float32))
        converted += 1
    write_bundle(out, destination)
    return converted


# --- argument parsing --------------------------------------------------------

_FLAG_FIELDS = (
    "input", "output", "layers", "method", "bits", "granularity", "group_size", "magr_alpha",
    "magr_iters", "damp_ratio", "rank", "variant", "altmin_iters", "eig_floor", "workers",
    "keep_going", "save_codes",
)


def _magr_arg(text: str):
    return text if text == "auto" else float(text)


def _add_run_flags(p: argparse.ArgumentParser, with_init: bool) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--input", "-i", help="input bundle with <layer>/W and <layer>/gram or <layer>/acts")
    p.add_argument("--output", "-o", help="output bundle path")
    p.add_argument("--layers", nargs="+", help="layer ids or glob patterns (default: all)")
    p.add_argument("--method", choices=["rtn", "optq"])
    p.add_argument("--bits", type=int)
    p.add_argument("--granularity", choices=GRANULARITIES)
    p.add_argument("--group-size", dest="group_size", type=int)
    p.add_argument("--magr-alpha", dest="magr_alpha", type=_magr_arg, help="0 disables, 'auto' = 1e-3*mean|W|")
    p.add_argument("--magr-iters", dest="magr_iters", type=int)
    p.add_argument("--damp-ratio", dest="damp_ratio", type=float)
    if with_init:
        p.add_argument("--rank", type=int)
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--altmin-iters", dest="altmin_iters", type=int)
        p.add_argument("--eig-floor", dest="eig_floor", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--keep-going", dest="keep_going", action="store_true", default=None)
    p.add_argument("--save-codes", dest="save_codes", action="store_true", default=None)
    p.add_argument("--report", help="also write the report to this path")
    p.add_argument("--format", choices=["json", "csv", "table"], default="json", help="format for --report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calibq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"calibq {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_run_flags(sub.add_parser("init", help="quantize and initialize adapters"), with_init=True)
    _add_run_flags(sub.add_parser("quantize", help="post-training quantization only"), with_init=False)

    rp = sub.add_parser("report", help="render the report stored in an output bundle")
    rp.add_argument("bundle")
    rp.add_argument("--format", choices=["json", "csv", "table"], default="table")
    rp.add_argument("--output", "-o", help="write here instead of stdout")

    vp = sub.add_parser("validate", help="check a config file without running it")
    vp.add_argument("config")

    gp = sub.add_parser("gram", help="precompute Gram matrices from activation bundles")
    gp.add_argument("--input", "-i", required=True)
    gp.add_argument("--output", "-o", required=True)
    return parser


def config_from_args(args: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    config = load_config(args.config) if args.config else RunConfig()
    values = config.to_dict()
    if environ.get("CLOQ_WORKERS"):
        try:
            values["workers"] = int(environ["CLOQ_WORKERS"])
        except ValueError as exc:
            raise ConfigError(f"CLOQ_WORKERS must be an integer, got {environ['CLOQ_WORKERS']!r}") from exc
    for key in _FLAG_FIELDS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return RunConfig.from_dict(values)


def _emit(data: bytes, path: str | None) -> None:
    if path:
        with open(path, "wb") as fh:
            fh.write(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "validate":
            diags = validate(args.config)
            for d in diags:
                print(d)
            return EXIT_CONFIG if diags else EXIT_OK
        if args.command == "gram":
            n = gram_bundle(args.input, args.output)
            log.info("wrote %d gram matrices to %s", n, args.output)
            return EXIT_OK
        if args.command == "report":
            meta = read_bundle(args.bundle).metadata
            if "report" not in meta:
                raise DataError(f"{args.bundle} carries no report (was it written by 'calibq init'?)")
            _emit(emit_report(RunReport.from_dict(meta["report"]), args.format), args.output)
            return EXIT_OK
        config = config_from_args(args)
        status, report = run(config, mode=args.command)
        if report is not None and args.report:
            _emit(emit_report(report, args.format), args.report)
        return status
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, BundleError, CalibrationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
