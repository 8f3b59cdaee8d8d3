"""Experiment configuration, orchestration and artifact output.

A run is described by an :class:`ExperimentConfig` (loaded from a JSON file
whose unknown keys are rejected).  It expands into a grid of independent
(width, seed) cells; each cell returns one summary row plus the files it
wants written, and a single collector writes everything in grid order, so
the output bytes do not depend on how many worker processes ran the cells.

File names are ``<experiment>-<config hash>-...`` where the hash covers the
whole configuration except the output directory.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import DatasetOnDisk, load_mnist_split, make_synthetic
from .errors import ConfigError, InvalidConfig, NonContractive, NumericFailure
from .flow import METHODS, TRACE_COLUMNS, initial_state, train
from .implicit import feature_map
from .kernel_machine import (
    LOSSES,
    build_frozen_model,
    coupling_gap_train,
    evaluate_test,
    f_hat,
    gen_bound,
    gen_bound_ntk_inf,
    kernel_machine_predictor,
    u_hat,
)
from .model import DataBatch, init_params, predict, PHI_KINDS, SCHEMES
from .ntk import gram, initial_gram, kernel_cross, limiting_ntk_mc

log = logging.getLogger(__name__)

EXPERIMENTS = ("convergence", "coupling_sweep", "genbound", "ntk_limit",
               "mnist_width_sweep")
DT_UNITS = ("lambda_max", "lambda_min", "absolute")
DATASET_KINDS = ("two_cluster_sphere", "random_labels", "mnist")


@dataclasses.dataclass(frozen=True)
class DatasetConfig:
    kind: str = "two_cluster_sphere"
    n: int = 20
    d: int = 10
    separation: float = 2.0
    seed: int = 0
    task_seed: Optional[int] = None
    probes: int = 0
    test_points: int = 0
    images: Optional[str] = None
    labels: Optional[str] = None
    class_a: int = 0
    class_b: int = 1
    test_count: Optional[int] = None


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    m: tuple = (512,)
    gamma0: float = 0.5
    scheme: str = "subgaussian"
    phi_kind: str = "relu"


@dataclasses.dataclass(frozen=True)
class ScheduleConfig:
    """Integration horizon and step.

    With ``t_unit = "lambda_min"`` the horizon is ``t_end / lambda_min(H(0))``;
    with ``dt_unit = "lambda_max"`` the step is ``dt / lambda_max(H(0))`` and
    with ``"lambda_min"`` it is ``dt / lambda_min(H(0))``.
    ``"absolute"`` takes either number as a plain time.
    """

    t_end: float = 50.0
    t_unit: str = "lambda_min"
    dt: float = 0.1
    dt_unit: str = "lambda_max"
    record_every: int = 1
    method: str = "rk4"
    stop_loss: Optional[float] = None


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    dataset: DatasetConfig = DatasetConfig()
    model: ModelConfig = ModelConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    seeds: tuple = (0,)
    delta: float = 0.05
    loss_kind: str = "ramp"
    mc_width: int = 1024
    mc_reps: int = 64
    mc_seed: int = 1000
    output_dir: str = "results"

    def __post_init__(self):
        _validate(self)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def digest(self) -> str:
        """Short content hash of everything except the output directory."""
        return hashlib.sha256(canonical_json(self).encode()).hexdigest()[:12]


def _validate(cfg: ExperimentConfig):
    if cfg.experiment not in EXPERIMENTS:
        raise InvalidConfig(f"unknown experiment {cfg.experiment!r}; choose from {EXPERIMENTS}")
    ds, md, sc = cfg.dataset, cfg.model, cfg.schedule
    if ds.kind not in DATASET_KINDS:
        raise InvalidConfig(f"unknown dataset kind {ds.kind!r}")
    if ds.kind == "mnist" and (ds.images is None or ds.labels is None):
        raise InvalidConfig("mnist datasets need both 'images' and 'labels' paths")
    if ds.n < 1 or ds.d < 1 or ds.probes < 0 or ds.test_points < 0:
        raise InvalidConfig("dataset sizes must be positive")
    if not md.m:
        raise InvalidConfig("model.m must list at least one width")
    if any(int(a) >= int(b) for a, b in zip(md.m, md.m[1:])) or min(md.m) < 1:
        raise InvalidConfig(f"model.m must be strictly increasing positive widths, got {md.m}")
    if not 0.0 < md.gamma0 < 1.0:
        raise InvalidConfig("model.gamma0 must lie in (0, 1)")
    if md.scheme not in SCHEMES or md.phi_kind not in PHI_KINDS:
        raise InvalidConfig(f"unknown scheme/phi_kind {md.scheme!r}/{md.phi_kind!r}")
    if sc.t_unit not in ("lambda_min", "absolute") or sc.dt_unit not in DT_UNITS:
        raise InvalidConfig("t_unit must be lambda_min|absolute and dt_unit "
                            "lambda_max|lambda_min|absolute")
    if sc.t_end <= 0 or sc.dt <= 0 or sc.record_every < 1:
        raise InvalidConfig("t_end, dt and record_every must be positive")
    if sc.method not in METHODS:
        raise InvalidConfig(f"unknown integrator {sc.method!r}")
    if not cfg.seeds:
        raise InvalidConfig("seeds must be non-empty")
    if not 0.0 < cfg.delta < 1.0:
        raise InvalidConfig("delta must lie in (0, 1)")
    if cfg.loss_kind not in LOSSES:
        raise InvalidConfig(f"unknown loss_kind {cfg.loss_kind!r}")
    if cfg.mc_reps < 2 or cfg.mc_width < 1:
        raise InvalidConfig("mc_reps must be >= 2 and mc_width positive")


_SECTIONS = {"dataset": DatasetConfig, "model": ModelConfig, "schedule": ScheduleConfig}


def _build_section(cls, raw, where):
    if not isinstance(raw, dict):
        raise InvalidConfig(f"{where} must be a table/object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise InvalidConfig(f"unknown key(s) in {where}: {', '.join(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    if cls is ModelConfig and "m" in values and not isinstance(values["m"], tuple):
        values["m"] = (values["m"],)
    return cls(**values)


def config_from_dict(raw: dict, base_dir=None) -> ExperimentConfig:
    """Build a config from plain data; relative IDX paths resolve against ``base_dir``."""
    if not isinstance(raw, dict):
        raise InvalidConfig("configuration must be a JSON object")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise InvalidConfig(f"unknown top-level key(s): {', '.join(unknown)}")
    if "experiment" not in raw:
        raise InvalidConfig("missing 'experiment'")
    kw = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kw[key] = _build_section(_SECTIONS[key], value, key)
        elif key == "seeds":
            if not isinstance(value, list) or not all(isinstance(s, int) for s in value):
                raise InvalidConfig("seeds must be a list of integers")
            kw[key] = tuple(value)
        else:
            kw[key] = value
    ds = kw.get("dataset")
    if ds is not None and base_dir is not None:
        fix = {k: str(Path(base_dir, getattr(ds, k)))
               for k in ("images", "labels")
               if getattr(ds, k) is not None and not os.path.isabs(getattr(ds, k))}
        if fix:
            kw["dataset"] = dataclasses.replace(ds, **fix)
    try:
        return ExperimentConfig(**kw)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: not valid JSON ({exc})") from exc
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw, base_dir=path.parent)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["seeds"] = list(cfg.seeds)
    d["model"]["m"] = list(cfg.model.m)
    return d


def canonical_json(cfg: ExperimentConfig) -> str:
    d = config_to_dict(cfg)
    d.pop("output_dir")
    for k in ("images", "labels"):
        if d["dataset"][k] is not None:
            d["dataset"][k] = os.path.basename(d["dataset"][k])
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


# ----------------------------------------------------------------------------
# data

@dataclasses.dataclass(frozen=True, eq=False)
class PreparedData:
    train: DataBatch
    probes: Optional[np.ndarray] = None
    test: Optional[DataBatch] = None


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    ds = cfg.dataset
    if ds.kind == "mnist":
        spec = DatasetOnDisk(images=ds.images, labels=ds.labels, class_a=ds.class_a,
                             class_b=ds.class_b, count=ds.n)
        train_b, test_b = load_mnist_split(spec, seed=ds.seed, test_count=ds.test_count)
        return PreparedData(train=train_b, test=test_b)
    task = ds.seed if ds.task_seed is None else ds.task_seed
    train_b = make_synthetic(ds.kind, ds.n, ds.d, ds.separation, seed=ds.seed, task_seed=task)
    probes = test = None
    if ds.probes:
        n_p = ds.probes + ds.probes % 2
        probes = make_synthetic(ds.kind, n_p, ds.d, ds.separation, seed=(ds.seed, 1),
                                task_seed=task).X[:ds.probes]
    if ds.test_points:
        n_t = ds.test_points + ds.test_points % 2
        t = make_synthetic(ds.kind, n_t, ds.d, ds.separation, seed=(ds.seed, 2), task_seed=task)
        test = DataBatch(X=t.X[:ds.test_points], y=t.y[:ds.test_points])
    return PreparedData(train=train_b, probes=probes, test=test)


def _params(cfg, d, m, seed):
    md = cfg.model
    return init_params(d, m, md.gamma0, md.scheme, seed=seed, phi_kind=md.phi_kind)


def _schedule(cfg, H0):
    sc = cfg.schedule
    t_end = sc.t_end / H0.lambda_min if sc.t_unit == "lambda_min" else sc.t_end
    if sc.dt_unit == "lambda_max":
        dt = sc.dt / H0.lambda_max
    elif sc.dt_unit == "lambda_min":
        dt = sc.dt / H0.lambda_min
    else:
        dt = sc.dt
    if not (math.isfinite(t_end) and t_end > 0):
        raise NumericFailure(f"lambda_min(H(0)) = {H0.lambda_min:.3e} gives no usable horizon")
    return t_end, dt


# ----------------------------------------------------------------------------
# cells

@dataclasses.dataclass(frozen=True, eq=False)
class CellResult:
    m: int
    seed: int
    row: dict
    files: dict  # suffix -> text
    series: dict = dataclasses.field(default_factory=dict)


def trace_csv_text(trace) -> str:
    return _csv_text(TRACE_COLUMNS, zip(*[trace.records[c] for c in TRACE_COLUMNS]))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def _train_cell(cfg, data, m, seed, probes=None, keep_partial=False):
    """Train one (width, seed) cell.  With ``keep_partial`` a run that leaves
    the contraction region returns its partial trace instead of raising."""
    params0 = _params(cfg, data.train.X.shape[1], m, seed)
    state0 = initial_state(data.train, params0)
    H0 = gram(params0, state0.factors)
    t_end, dt = _schedule(cfg, H0)
    left_region = False
    try:
        trace = train(data.train, params0, t_end, dt=dt,
                      record_every=cfg.schedule.record_every, method=cfg.schedule.method,
                      probes=probes, stop_loss=cfg.schedule.stop_loss)
    except NonContractive as exc:
        if not keep_partial:
            raise
        log.warning("m=%d seed=%d left the contraction region: %s", m, seed, exc)
        trace = exc.trace
        left_region = True
    return params0, state0, H0, trace, t_end, left_region


def run_convergence_cell(cfg, data, m, seed) -> CellResult:
    params0, state0, H0, trace, t_end, _ = _train_cell(cfg, data, m, seed)
    ok = bool(np.all(trace.loss <= trace.envelope * (1.0 + 1e-6)))
    row = dict(lambda_min0=H0.lambda_min, lambda_max0=H0.lambda_max, t_end=t_end,
               loss0=trace.loss0, final_loss=float(trace.loss[-1]),
               envelope_ok=ok, max_guard=float(trace.guard.max()),
               steps=trace.steps, rejected=trace.rejected)
    return CellResult(m, seed, row, {"trace.csv": trace_csv_text(trace)},
                      {"t": trace.times, "loss": trace.loss, "guard": trace.guard})


def run_coupling_cell(cfg, data, m, seed) -> CellResult:
    probes = data.probes
    params0, state0, H0, trace, t_end, _ = _train_cell(cfg, data, m, seed, probes=probes)
    model = build_frozen_model(H0, state0.u, data.train.y)
    gaps = coupling_gap_train(trace, model)
    probe_gap = np.full(len(trace), np.nan)
    if probes is not None:
        pf = feature_map(params0, probes)
        k = kernel_cross(params0, state0.factors, pf)
        f0 = predict(params0, pf.z)
        for j, t in enumerate(trace.times):
            probe_gap[j] = np.max(np.abs(trace.probe_u[j] - f_hat(model, k, t, f0)))
    sqrt_m = math.sqrt(m)
    row = dict(lambda_min0=H0.lambda_min, t_end=t_end,
               max_train_gap=float(gaps.max()), probe_gap=float(probe_gap[-1]),
               h_drift_spec=float(trace.h_drift_spec[-1]),
               h_drift_fro=float(trace.h_drift_fro[-1]),
               a_drift_scaled=float(trace.a_drift[-1]) / sqrt_m,
               z_drift_scaled=float(trace.z_drift[-1]) / sqrt_m,
               final_loss=float(trace.loss[-1]), max_guard=float(trace.guard.max()))
    gap_csv = _csv_text(("t", "train_gap", "probe_gap"), zip(trace.times, gaps, probe_gap))
    return CellResult(m, seed, row, {"trace.csv": trace_csv_text(trace), "gaps.csv": gap_csv})


def run_genbound_cell(cfg, data, m, seed) -> CellResult:
    params0 = _params(cfg, data.train.X.shape[1], m, seed)
    state0 = initial_state(data.train, params0)
    H0 = gram(params0, state0.factors)
    model = build_frozen_model(H0, state0.u, data.train.y)
    test_error = None
    if data.test is not None:
        predictor = kernel_machine_predictor(model, params0, state0.factors)
        test_error = evaluate_test(predictor, data.test, cfg.loss_kind)
    report = gen_bound(model, cfg.delta, test_error=test_error)
    row = dict(lambda_min0=H0.lambda_min, b_squared=report.b_squared,
               leading_term=report.leading_term, bound_rhs=report.bound_rhs,
               rademacher=report.rademacher,
               test_error=test_error if test_error is not None else float("nan"))
    return CellResult(m, seed, row, {"bound.json": report.to_json() + "\n"})


def run_ntk_limit_cell(cfg, data, m, seed, H_inf=None, inf_lead=None) -> CellResult:
    params0 = _params(cfg, data.train.X.shape[1], m, seed)
    H0 = initial_gram(params0, data.train.X, method="iterative")
    state0 = initial_state(data.train, params0)
    lead0 = gen_bound(build_frozen_model(H0, state0.u, data.train.y), cfg.delta).leading_term
    row = dict(h_dist_fro=float(np.linalg.norm(H0.H - H_inf)),
               lambda_min0=H0.lambda_min, leading_term=lead0,
               leading_term_inf=inf_lead, leading_gap=abs(lead0 - inf_lead))
    return CellResult(m, seed, row, {})


def run_mnist_cell(cfg, data, m, seed) -> CellResult:
    test = data.test
    probes = test.X if test is not None else None
    params0, state0, H0, trace, t_end, left = _train_cell(cfg, data, m, seed, probes=probes,
                                                          keep_partial=True)
    loss_fn = LOSSES[cfg.loss_kind]
    test_loss = [float(np.mean(loss_fn(u, test.y))) for u in trace.probe_u] if test else []
    thr = cfg.schedule.stop_loss
    reached = thr is not None and trace.loss[-1] < thr
    row = dict(lambda_min0=H0.lambda_min, lambda_max0=H0.lambda_max,
               left_contraction=left,
               time_to_threshold=float(trace.times[-1]) if reached else float("inf"),
               final_loss=float(trace.loss[-1]), steps=trace.steps,
               final_test_loss=test_loss[-1] if test_loss else float("nan"),
               max_guard=float(trace.guard.max()))
    ck = _csv_text(("t", "loss", "test_loss", "guard"),
                   zip(trace.times, trace.loss, test_loss or [float("nan")] * len(trace),
                       trace.guard))
    return CellResult(m, seed, row, {"trace.csv": trace_csv_text(trace), "checkpoints.csv": ck},
                      {"t": trace.times, "loss": trace.loss, "guard": trace.guard,
                       "test_loss": np.asarray(test_loss)})


_CELLS = {
    "convergence": run_convergence_cell,
    "coupling_sweep": run_coupling_cell,
    "genbound": run_genbound_cell,
    "ntk_limit": run_ntk_limit_cell,
    "mnist_width_sweep": run_mnist_cell,
}


def _run_cell(args):
    kind, cfg, data, m, seed, extra = args
    return _CELLS[kind](cfg, data, m, seed, **extra)


# ----------------------------------------------------------------------------
# orchestration

@dataclasses.dataclass(frozen=True, eq=False)
class RunResult:
    config: ExperimentConfig
    out_dir: Path
    prefix: str
    cells: tuple
    manifest: dict

    def rows(self):
        return [dict(m=c.m, seed=c.seed, **c.row) for c in self.cells]

    def column(self, name):
        """Summary values as an array indexed ``[width, seed]``."""
        ms, seeds = self.config.model.m, self.config.seeds
        out = np.full((len(ms), len(seeds)), np.nan)
        for c in self.cells:
            out[ms.index(c.m), seeds.index(c.seed)] = c.row[name]
        return out

    def median(self, name):
        return np.median(self.column(name), axis=1)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _Collector:
    def __init__(self, out_dir: Path, prefix: str, cfg):
        self.out_dir = out_dir
        self.prefix = prefix
        self.cfg = cfg
        self.written = []

    def write(self, suffix, text):
        path = self.out_dir / f"{self.prefix}-{suffix}"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        self.written.append(path)
        return path

    def manifest(self, status, error=None):
        m = {
            "experiment": self.cfg.experiment,
            "config_hash": self.cfg.digest(),
            "package_version": __version__,
            "status": status,
            "error": error,
            "config": config_to_dict(dataclasses.replace(self.cfg, output_dir="")),
            "files": [{"name": p.name, "sha256": _sha256(p)} for p in self.written],
        }
        m["config"].pop("output_dir")
        for k in ("images", "labels"):
            if m["config"]["dataset"][k] is not None:
                m["config"]["dataset"][k] = os.path.basename(m["config"]["dataset"][k])
        path = self.out_dir / f"{self.prefix}-manifest.json"
        path.write_text(json.dumps(m, indent=2) + "\n", encoding="utf-8")
        return m


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads=1,
                   plots=True) -> RunResult:
    """Run every (width, seed) cell of ``cfg`` and write its artifacts.

    On failure a manifest with ``status = "failed"`` lists whatever was
    written before the error, then the error propagates.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    prefix = f"{cfg.experiment}-{cfg.digest()}"
    col = _Collector(out, prefix, cfg)
    cells = []
    try:
        data = prepare_data(cfg)
        extra = {}
        if cfg.experiment == "ntk_limit":
            extra = _ntk_limit_shared(cfg, data, col)
        jobs = [(cfg.experiment, cfg, data, m, s, extra)
                for m in cfg.model.m for s in cfg.seeds]
        if threads > 1 and len(jobs) > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
                results = pool.map(_run_cell, jobs)
                for res in results:
                    _collect(col, res, cells)
        else:
            for job in jobs:
                _collect(col, _run_cell(job), cells)
        _write_summary(col, cells)
        if plots:
            _write_plots(col, cfg, cells)
    except (ConfigError, NumericFailure, ValueError, OSError) as exc:
        col.manifest("failed", f"{type(exc).__name__}: {exc}")
        raise
    manifest = col.manifest("ok")
    return RunResult(cfg, out, prefix, tuple(cells), manifest)


def _collect(col, res: CellResult, cells):
    log.info("cell m=%d seed=%d done", res.m, res.seed)
    for suffix, text in res.files.items():
        col.write(f"m{res.m}-s{res.seed}-{suffix}", text)
    cells.append(res)


def _ntk_limit_shared(cfg, data, col):
    md = cfg.model
    est = limiting_ntk_mc(data.train.X.shape[1], md.scheme, md.gamma0, data.train.X,
                          cfg.mc_width, cfg.mc_reps, seed=cfg.mc_seed, phi_kind=md.phi_kind)
    report = gen_bound_ntk_inf(est, data.train.y, cfg.delta)
    col.write("limit-bound.json", report.to_json() + "\n")
    return {"H_inf": est.H_inf, "inf_lead": report.leading_term}


def _write_summary(col, cells):
    if not cells:
        return
    keys = list(cells[0].row)
    rows = [[c.m, c.seed] + [c.row[k] for k in keys] for c in cells]
    col.write("summary.csv", _csv_text(["m", "seed"] + keys, rows))


def _write_plots(col, cfg, cells):
    from . import plots

    exp = cfg.experiment
    path = col.out_dir / f"{col.prefix}-plot.svg"
    if exp in ("convergence", "mnist_width_sweep"):
        series = {f"m={c.m} seed={c.seed}": (c.series["t"], c.series["loss"]) for c in cells}
        plots.line_plot(path, series, "t", "loss", logy=True, title="training loss")
        guard = {f"m={c.m} seed={c.seed}": (c.series["t"], c.series["guard"]) for c in cells}
        plots.line_plot(col.out_dir / f"{col.prefix}-guard.svg", guard, "t",
                        "gamma ||A(t)||", title="operator norm of gamma A")
    elif exp in ("coupling_sweep", "ntk_limit"):
        names = (("max_train_gap", "probe_gap", "h_drift_spec") if exp == "coupling_sweep"
                 else ("h_dist_fro", "leading_gap"))
        ms = np.asarray(cfg.model.m, dtype=float)
        series = {}
        for name in names:
            med = [np.median([c.row[name] for c in cells if c.m == m]) for m in cfg.model.m]
            series[name] = (ms, np.asarray(med))
        plots.line_plot(path, series, "m", "median over seeds", logx=True, logy=True,
                        title="width scaling")
    elif exp == "genbound":
        labels = [f"m={c.m} s={c.seed}" for c in cells]
        plots.bar_chart(path, labels, {"leading term": [c.row["leading_term"] for c in cells],
                                       "test error": [c.row["test_error"] for c in cells]},
                        title="bound vs test error")
