"""Batch orchestration: enumerate, estimate, prune, solve, verify, report."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import ddp as ddp_mod
from . import gps
from .decomp import Decomposition, enumerate_pure, estimate_compute_time, pareto_front, validate
from .lqr import SaturationConfig, lqr_analysis, lqr_saturated_error
from .systems import ConfigurationError, ControlSystem, load_system

log = logging.getLogger("polydec")

COLUMNS = ("id", "serialization", "err_lqr", "lqr_bar", "err_ddp", "err",
           "time_est", "time_meas", "r_lqr", "r_ddp", "r")
ESTIMATORS = ("lqr", "ddp", "both")


@dataclass(frozen=True)
class RunConfig:
    system: str
    decompositions: str | tuple[str, ...] = "enumerate"
    estimator: str = "lqr"
    prune: str = "none"
    out: str = "polydec-out"
    grid_scale: float | None = None
    horizon: float | None = None
    dt: float = 1e-3
    solve: bool = False
    verify: bool = False
    lqr_bar: bool = True
    artifacts: bool = True
    enumeration_cap: int | None = 100000
    threads: int = 1
    grid: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigurationError(f"estimator must be one of {ESTIMATORS}")
        prune_rule(self.prune)
        if self.grid_scale is not None and not self.grid_scale > 0:
            raise ConfigurationError("grid scale must be positive")
        if (self.horizon is not None and not self.horizon > 0) or not self.dt > 0:
            raise ConfigurationError("horizon and dt must be positive")
        if self.threads < 1:
            raise ConfigurationError("thread count must be positive")
        if not isinstance(self.decompositions, str):
            object.__setattr__(self, "decompositions", tuple(self.decompositions))
            for item in self.decompositions:
                if not str(item).lstrip().startswith("{") and not Path(item).exists():
                    raise ConfigurationError(f"decomposition file not found: {item}")
        unknown = set(self.grid) - {f.name for f in fields(gps.GridConfig)}
        if unknown:
            raise ConfigurationError(f"unknown grid settings {sorted(unknown)}")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(doc)

    def grid_config(self) -> gps.GridConfig:
        return gps.GridConfig(**self.grid)

    def ddp_config(self) -> ddp_mod.DDPConfig:
        return ddp_mod.DDPConfig(horizon=self.horizon, dt=self.dt)


def prune_rule(rule: str) -> tuple[str, int | None]:
    if rule in ("none", "pareto"):
        return rule, None
    if rule.startswith("top:"):
        try:
            n = int(rule[4:])
        except ValueError:
            n = 0
        if n > 0:
            return "top", n
    raise ConfigurationError(f"prune rule must be none, pareto or top:N, got {rule!r}")


def env_threads(default: int = 1) -> int:
    raw = os.environ.get("POLYDEC_THREADS")
    if raw is None:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigurationError(f"POLYDEC_THREADS must be an integer, got {raw!r}") from None


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------


@dataclass
class ReportRow:
    id: int
    serialization: str
    err_lqr: float | None = None
    lqr_bar: float | None = None
    err_ddp: float | None = None
    err: float | None = None
    time_est: float | None = None
    time_meas: float | None = None
    r_lqr: int | None = None
    r_ddp: int | None = None
    r: int | None = None
    errors: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)


@dataclass
class RankingReport:
    system: str
    rows: list[ReportRow]

    @property
    def failed(self) -> bool:
        return any(r.errors for r in self.rows)

    def rank(self) -> "RankingReport":
        """Fill the rank columns; the baseline row (id 0) is not ranked."""
        ranked = [r for r in self.rows if r.id != 0]
        for col, rcol in (("err_lqr", "r_lqr"), ("err_ddp", "r_ddp"), ("err", "r")):
            ranks = dense_rank([getattr(r, col) for r in ranked])
            for r, k in zip(ranked, ranks):
                setattr(r, rcol, k)
        return self

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]


def dense_rank(values) -> list[int | None]:
    """Dense ranks 1..K by ascending value; ties share a rank, inf last, None unranked."""
    present = sorted({v for v in values if v is not None}, key=lambda v: (math.isinf(v), v))
    lookup = {v: k + 1 for k, v in enumerate(present)}
    return [None if v is None else lookup[v] for v in values]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return v


def report_csv(report: RankingReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in report.rows:
        w.writerow([_cell(getattr(row, c)) for c in COLUMNS])
    return buf.getvalue()


def report_dict(report: RankingReport) -> dict:
    rows = []
    for row in report.rows:
        doc = {c: _json_value(getattr(row, c)) for c in COLUMNS if getattr(row, c) is not None}
        if row.errors:
            doc["errors"] = list(row.errors)
        if row.artifacts:
            doc["artifacts"] = list(row.artifacts)
        rows.append(doc)
    return {"system": report.system, "columns": list(COLUMNS), "rows": rows}


def write_report(report: RankingReport, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / "report.csv"
        csv_path.write_text(report_csv(report), encoding="utf-8")
        json_path = directory / "report.json"
        json_path.write_text(json.dumps(report_dict(report), indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {directory}: {exc}") from exc
    return [csv_path, json_path]


def read_report(path: str | Path) -> RankingReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    doc = json.loads(path.read_text(encoding="utf-8"))
    rows = []
    for d in doc["rows"]:
        vals = {}
        for c in COLUMNS:
            v = d.get(c)
            if isinstance(v, str) and c not in ("serialization",):
                v = float(v)
            vals[c] = v
        rows.append(ReportRow(**vals, errors=d.get("errors", []), artifacts=d.get("artifacts", [])))
    return RankingReport(doc["system"], rows)


# --------------------------------------------------------------------------
# Pipeline
# --------------------------------------------------------------------------


def prepare_system(cfg: RunConfig) -> ControlSystem:
    sys = load_system(cfg.system)
    return sys.scaled_grid(cfg.grid_scale) if cfg.grid_scale is not None else sys


def load_decompositions(sys: ControlSystem, cfg: RunConfig) -> list[Decomposition]:
    if cfg.decompositions == "enumerate":
        return list(enumerate_pure(sys, cap=cfg.enumeration_cap))
    out = []
    for item in cfg.decompositions:
        text = item if str(item).lstrip().startswith("{") else Path(item).read_text(encoding="utf-8")
        try:
            docs = [json.loads(text)]
        except json.JSONDecodeError:
            docs = [json.loads(line) for line in text.splitlines() if line.strip()]
        for doc in docs:
            d = Decomposition.from_dict(doc)
            problems = validate(sys, d)
            if problems:
                raise ConfigurationError(f"invalid decomposition {d.to_json()}: {problems}")
            out.append(d)
    return out


def survivors(rows: list[ReportRow], rule: str) -> list[int]:
    """Row positions selected for refinement (the baseline is never pruned)."""
    kind, n = prune_rule(rule)
    cand = [k for k, r in enumerate(rows) if r.id != 0]
    if kind == "none":
        return cand
    err = [rows[k].err_lqr if rows[k].err_lqr is not None else math.inf for k in cand]
    cost = [rows[k].time_est for k in cand]
    if kind == "pareto":
        keep = pareto_front(list(zip(err, cost)))
        return [cand[i] for i in keep]
    order = sorted(range(len(cand)), key=lambda i: (err[i], cost[i], i))
    return sorted(cand[i] for i in order[:n])


def _record(row: ReportRow, stage: str, exc: Exception):
    msg = f"{stage}: {type(exc).__name__}: {exc}"
    log.warning("decomposition %s %s", row.id, msg)
    row.errors.append(msg)


def run_pipeline(cfg: RunConfig, progress=None) -> RankingReport:
    """Run the enabled stages and write the report plus artifacts to ``cfg.out``."""
    sys = prepare_system(cfg)
    decs = [Decomposition.full(sys)] + load_decompositions(sys, cfg)
    rows = [ReportRow(k, d.to_json()) for k, d in enumerate(decs)]
    out = Path(cfg.out)
    note = progress or (lambda *_: None)

    # estimate: LQR value gap, its input-bound bar, relative compute time
    def estimate(k):
        row, d = rows[k], decs[k]
        try:
            row.time_est = estimate_compute_time(sys, d).relative_cost
            analysis = lqr_analysis(sys, d)
            row.err_lqr = float(analysis.err)
            if cfg.lqr_bar and math.isfinite(analysis.err):
                row.lqr_bar = lqr_saturated_error(sys, d, SaturationConfig(horizon=cfg.horizon, dt=cfg.dt)).error
        except Exception as exc:  # noqa: BLE001 - collected per row
            _record(row, "estimate", exc)

    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        list(pool.map(estimate, range(len(decs))))
    note("estimate", len(decs))
    chosen = survivors(rows, cfg.prune)

    if cfg.estimator in ("ddp", "both"):
        dcfg = cfg.ddp_config()
        try:
            full = ddp_mod.build_bundles(sys, decs[0], dcfg)[(0,)]
            rows[0].err_ddp = 0.0
            if cfg.artifacts:
                path = out / "bundles" / "0" / "node0.bundle.pdgrid"
                path.parent.mkdir(parents=True, exist_ok=True)
                rows[0].artifacts.append(str(ddp_mod.save_bundle(path, sys, full).relative_to(out)))
        except Exception as exc:  # noqa: BLE001
            _record(rows[0], "ddp", exc)
            full = None
        for k in chosen if full is not None else []:
            try:
                bundles = ddp_mod.build_bundles(sys, decs[k], dcfg)
                est = ddp_mod.err_ddp(sys, decs[k], dcfg, full_bundle=full, bundles=bundles)
                rows[k].err_ddp = est.err
                if est.stalled:
                    rows[k].errors.append(f"ddp: stalled nodes {list(est.stalled)}")
                if cfg.artifacts:
                    for j, (path_, b) in enumerate(sorted(bundles.items())):
                        p = out / "bundles" / str(k) / f"node{j}.bundle.pdgrid"
                        p.parent.mkdir(parents=True, exist_ok=True)
                        rows[k].artifacts.append(str(ddp_mod.save_bundle(p, sys, b).relative_to(out)))
            except Exception as exc:  # noqa: BLE001
                _record(rows[k], "ddp", exc)
            note("ddp", k)

    if cfg.solve or cfg.verify:
        gcfg = cfg.grid_config()
        dt = gps.backup_dt(sys, gcfg)
        solved = {}
        for k in [0] + chosen:
            try:
                t0 = time.perf_counter()
                pol = gps.solve_decomposition(sys, decs[k], gcfg, dt=dt)
                rows[k].time_meas = time.perf_counter() - t0
                solved[k] = pol
                if cfg.artifacts:
                    paths = gps.save_policy(out / "grids" / str(k), sys, pol)
                    rows[k].artifacts.extend(str(p.relative_to(out)) for p in paths)
            except Exception as exc:  # noqa: BLE001
                _record(rows[k], "solve", exc)
            note("solve", k)
        if cfg.verify and 0 in solved:
            vstar = solved[0].nodes[0].value
            rows[0].err = 0.0
            for k in chosen:
                if k not in solved:
                    continue
                try:
                    vd = gps.evaluate_policy_value(sys, solved[k], gcfg, dt=dt, V0=vstar)
                    rows[k].err = gps.value_error(sys, vd, vstar)
                except Exception as exc:  # noqa: BLE001
                    _record(rows[k], "verify", exc)
                note("verify", k)

    report = RankingReport(sys.name, rows).rank()
    write_report(report, out)
    return report
