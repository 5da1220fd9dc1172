"""Datasets, experiment configuration, sweeps and scaling studies."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import (
    RecorderOptions,
    RegimeReport,
    RegimeTolerances,
    classify_regime,
    general_residual_corrections,
    simulate,
)
from .errors import ConfigError, NQMError
from .kernel import critical_lr, rank2_eigenstructure, tangent_kernel
from .models import (
    AnchoredModelState,
    Dataset,
    Family,
    GeneralQuadraticModel,
    build_random_gqm,
    make_rng,
    ntk_initialize,
    predict,
)

THREADS_ENV = "NQMLAB_THREADS"
BUNDLED_CSV = "twoclass_synthetic.csv"


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


def gen_gaussian_1d(n: int, seed: int = 0) -> Dataset:
    """Balanced 1-D two-class data: ``x ~ N(2y, 1)`` with labels ``y = +-1``."""
    if n < 2 or n % 2:
        raise ValueError("n must be an even integer >= 2")
    rng = make_rng(seed, 11)
    y = np.repeat([-1.0, 1.0], n // 2)
    rng.shuffle(y)
    x = rng.normal(2.0 * y, 1.0)
    return Dataset(x[:, None], y)


def gen_single_example(d: int, seed: int = 0, label: float = 0.0) -> Dataset:
    """One example with ``x ~ N(0, I_d)`` rescaled to ``|x|^2 = d``."""
    rng = make_rng(seed, 12)
    x = rng.standard_normal(d)
    x *= np.sqrt(d) / np.linalg.norm(x)
    return Dataset(x[None, :], [label])


def make_twoclass_synthetic(n: int = 1200, d: int = 8, seed: int = 2024, flip: float = 0.1):
    """Rows ``features..., label`` for a noisy two-class problem.

    Inputs are Gaussian; the label is the sign of a fixed nonlinear score
    (a linear term plus a product of two coordinates), with a fraction
    ``flip`` of labels flipped.
    """
    rng = make_rng(seed, 13)
    X = rng.standard_normal((n, d))
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    score = X @ direction + 0.8 * X[:, 0] * X[:, 1]
    y = np.where(score >= 0, 1.0, -1.0)
    flips = rng.random(n) < flip
    y[flips] *= -1
    return X, y


def write_twoclass_csv(path, X, y) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        for row, lab in zip(X, y):
            w.writerow([f"{v:.10g}" for v in row] + [int(lab)])
    return path


def bundled_twoclass_path() -> Path:
    return Path(str(resources.files("nqmlab") / "data" / BUNDLED_CSV))


class DataFormatError(NQMError, ValueError):
    """A CSV row could not be parsed; ``line`` is 1-based."""

    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


def load_twoclass_csv(path, n_train: int, n_test: int, seed: int = 0):
    """Read ``features..., label`` rows and split them deterministically.

    Labels in ``{0, 1}`` are mapped to ``{-1, +1}``. Rows are scaled to unit
    norm. Returns ``(train, test)``.
    """
    path = Path(path)
    rows, labels = [], []
    width = None
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise DataFormatError(lineno, "need at least one feature and a label")
            if len(row) != width:
                raise DataFormatError(lineno, f"expected {width} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise DataFormatError(lineno, str(exc)) from None
            if not all(np.isfinite(vals)):
                raise DataFormatError(lineno, "non-finite value")
            rows.append(vals[:-1])
            labels.append(vals[-1])
    if not rows:
        raise DataFormatError(0, "file has no data rows")
    X = np.asarray(rows)
    y = np.asarray(labels)
    uniq = set(np.unique(y).tolist())
    if uniq <= {0.0, 1.0}:
        y = 2.0 * y - 1.0
    elif not uniq <= {-1.0, 1.0}:
        raise DataFormatError(0, f"labels must be in {{-1, 1}} or {{0, 1}}, got {sorted(uniq)}")
    if n_train < 1 or n_test < 0 or n_train + n_test > len(y):
        raise ValueError(f"requested {n_train}+{n_test} rows but file has {len(y)}")
    norms = np.linalg.norm(X, axis=1)
    norms[norms == 0] = 1.0
    X = X / norms[:, None]
    perm = make_rng(seed, 14).permutation(len(y))
    tr, te = perm[:n_train], perm[n_train : n_train + n_test]
    train = Dataset(X[tr], y[tr])
    test = Dataset(X[te], y[te]) if n_test else None
    return train, test


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class DatasetSpec:
    kind: str = "synthetic-1d"
    n_train: int = 128
    n_test: int = 0
    seed: int = 0
    path: Optional[str] = None
    d: int = 5
    label: float = 0.0
    p: int = 100
    gamma: float = 1e-3


@dataclass
class ModelSpec:
    families: list = field(default_factory=lambda: ["nqm"])
    width_grid: list = field(default_factory=lambda: [5000])


@dataclass
class TrainSpec:
    eta_grid: Optional[list] = None
    eta_count: int = 10
    max_steps: int = 1000
    optimizer: str = "gd"
    batch_size: int = 32
    engine: str = "gd"
    eval_every: int = 5
    kernel_every: int = 0
    stop_at_floor: bool = True
    keep_trajectories: bool = False


@dataclass
class StudySpec:
    delta: float = 1.0
    subcritical_factor: float = 1.0
    gamma_grid: list = field(default_factory=lambda: [1e-4, 1e-3, 1e-2])
    gqm_eta: float = 2.8
    eigenspace_eta_factor: float = 1.5


@dataclass
class ToleranceSpec:
    rise_factor: float = 2.0
    tol_rise: float = 1e-6
    divergence_threshold: float = 1e12
    conv_rel: float = 1e-3
    plateau_rel: float = 1e-8
    plateau_window: int = 20


@dataclass
class ExperimentConfig:
    """Everything a sweep or study needs; serializes to and from plain JSON.

    ``train.eta_grid = None`` requests an automatic grid built from the
    initial kernel (see :func:`auto_eta_grid`).
    """

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    study: StudySpec = field(default_factory=StudySpec)
    tolerances: ToleranceSpec = field(default_factory=ToleranceSpec)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "out"
    threads: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """Hash of everything that affects results; ``threads`` is left out."""
        doc = self.to_dict()
        doc.pop("threads")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        cfg = _build(cls, doc, "")
        validate_config(cfg)
        return cfg

    def regime_tolerances(self) -> RegimeTolerances:
        return RegimeTolerances(**asdict(self.tolerances))


def _build(cls, doc, prefix):
    if not isinstance(doc, dict):
        raise ConfigError(prefix or "<root>", "expected an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, val in doc.items():
        path = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(path, "unknown key")
        default = known[key].default_factory() if callable(known[key].default_factory) else known[key].default
        if is_dataclass(default):
            kwargs[key] = _build(type(default), val, path + ".")
        else:
            kwargs[key] = val
    return cls(**kwargs)


_FAMILIES = {f.value for f in Family}
_KINDS = {"synthetic-1d", "csv-twoclass", "gqm-random", "single-example"}


def validate_config(cfg: ExperimentConfig) -> None:
    """Raise :class:`ConfigError` naming the first invalid field."""

    def need(cond, path, msg):
        if not cond:
            raise ConfigError(path, msg)

    ds = cfg.dataset
    need(ds.kind in _KINDS, "dataset.kind", f"must be one of {sorted(_KINDS)}")
    need(isinstance(ds.n_train, int) and ds.n_train >= 1, "dataset.n_train", "must be a positive integer")
    need(isinstance(ds.n_test, int) and ds.n_test >= 0, "dataset.n_test", "must be a nonnegative integer")
    need(ds.kind != "csv-twoclass" or ds.path is None or isinstance(ds.path, str), "dataset.path", "must be a string")
    need(ds.kind != "synthetic-1d" or ds.n_train % 2 == 0, "dataset.n_train", "must be even for synthetic-1d")
    need(isinstance(ds.d, int) and ds.d >= 1, "dataset.d", "must be a positive integer")
    need(isinstance(ds.p, int) and ds.p >= 1, "dataset.p", "must be a positive integer")
    need(_num(ds.gamma) and ds.gamma >= 0, "dataset.gamma", "must be nonnegative")
    fams = cfg.model.families
    need(isinstance(fams, list) and fams and all(f in _FAMILIES for f in fams), "model.families",
         f"must be a nonempty subset of {sorted(_FAMILIES)}")
    wg = cfg.model.width_grid
    need(isinstance(wg, list) and wg and all(isinstance(w, int) and w >= 1 for w in wg), "model.width_grid",
         "must be a nonempty list of positive integers")
    tr = cfg.train
    if tr.eta_grid is not None:
        g = tr.eta_grid
        need(isinstance(g, list) and g and all(_num(e) and e > 0 for e in g), "train.eta_grid",
             "must be a nonempty list of positive numbers or null")
        need(all(a < b for a, b in zip(g, g[1:])), "train.eta_grid", "must be strictly increasing")
    need(isinstance(tr.eta_count, int) and tr.eta_count >= 8, "train.eta_count", "must be an integer >= 8")
    need(isinstance(tr.max_steps, int) and tr.max_steps >= 1, "train.max_steps", "must be a positive integer")
    need(tr.optimizer in ("gd", "sgd"), "train.optimizer", "must be 'gd' or 'sgd'")
    need(isinstance(tr.batch_size, int) and tr.batch_size >= 1, "train.batch_size", "must be a positive integer")
    need(tr.engine in ("gd", "scalar", "multi"), "train.engine", "must be 'gd', 'scalar' or 'multi'")
    need(isinstance(tr.eval_every, int) and tr.eval_every >= 1, "train.eval_every", "must be a positive integer")
    need(isinstance(tr.kernel_every, int) and tr.kernel_every >= 0, "train.kernel_every", "must be >= 0")
    st = cfg.study
    need(_num(st.delta) and 0 < st.delta < 2, "study.delta", "must lie in (0, 2)")
    need(isinstance(st.gamma_grid, list) and st.gamma_grid and all(_num(g) and g > 0 for g in st.gamma_grid),
         "study.gamma_grid", "must be a nonempty list of positive numbers")
    need(_num(st.gqm_eta) and st.gqm_eta > 0, "study.gqm_eta", "must be positive")
    need(_num(st.eigenspace_eta_factor) and st.eigenspace_eta_factor > 0, "study.eigenspace_eta_factor",
         "must be positive")
    need(isinstance(cfg.seeds, list) and cfg.seeds and all(isinstance(s, int) for s in cfg.seeds), "seeds",
         "must be a nonempty list of integers")
    need(isinstance(cfg.threads, int) and cfg.threads >= 1, "threads", "must be a positive integer")
    for f in fields(ToleranceSpec):
        val = getattr(cfg.tolerances, f.name)
        need(_num(val) and val > 0, f"tolerances.{f.name}", "must be positive")


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and np.isfinite(x)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


_ALIASES = {"model.width": ("model.width_grid", lambda v: [v]), "train.eta": ("train.eta_grid", lambda v: [v])}


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key=value`` strings with dotted keys to a config dictionary.

    Values are parsed as JSON when possible and kept as strings otherwise.
    Unknown keys are rejected.
    """
    doc = json.loads(json.dumps(doc))
    template = ExperimentConfig().to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        val = _parse_value(raw)
        if key in _ALIASES:
            key, wrap = _ALIASES[key]
            val = wrap(val)
        parts = key.split(".")
        tmpl, node = template, doc
        for i, part in enumerate(parts):
            if not isinstance(tmpl, dict) or part not in tmpl:
                raise ConfigError(key, "unknown key")
            if i == len(parts) - 1:
                node[part] = val
            else:
                tmpl = tmpl[part]
                node = node.setdefault(part, {})
    return doc


def load_config(path=None, overrides=()) -> ExperimentConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from None
        except OSError as exc:
            raise ConfigError("<file>", str(exc)) from None
    return ExperimentConfig.from_dict(apply_overrides(doc, overrides))


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def build_data(spec: DatasetSpec):
    """``(train, test)`` for a dataset spec; ``test`` may be None."""
    if spec.kind == "synthetic-1d":
        train = gen_gaussian_1d(spec.n_train, spec.seed)
        test = gen_gaussian_1d(spec.n_test + spec.n_test % 2, spec.seed + 1_000_003) if spec.n_test else None
        return train, test
    if spec.kind == "csv-twoclass":
        path = spec.path or bundled_twoclass_path()
        return load_twoclass_csv(path, spec.n_train, spec.n_test, spec.seed)
    if spec.kind == "single-example":
        return gen_single_example(spec.d, spec.seed, spec.label), None
    model = build_random_gqm(spec.p, spec.seed, spec.gamma)
    return Dataset(model.reference_input[None, :], [0.0]), None


def build_state(family: str, width: int, d: int, seed: int, train: Dataset):
    """Fresh NTK-initialized state of the given family anchored at its own init."""
    params = ntk_initialize(width, d, seed)
    return AnchoredModelState.create(Family(family), params, train.inputs)


def auto_eta_grid(eta_c: float, count: int = 10) -> list:
    """Learning rates in all three bands around ``eta_c`` (with ``eta_max ~ 2 eta_c``).

    At least three points are sub-critical, three lie in ``(eta_c, 2 eta_c)``
    and two beyond ``2 eta_c``; extra points go to the two lower bands.
    """
    count = max(8, int(count))
    n_super = 2
    n_band = 3 + (count - 8) // 2
    n_sub = count - n_super - n_band
    sub = np.linspace(0.3, 0.95, n_sub)
    band = np.linspace(1.1, 1.9, n_band)
    sup = np.linspace(2.2, 2.6, n_super)
    return [float(eta_c * f) for f in np.concatenate([sub, band, sup])]


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------


@dataclass
class SweepCell:
    family: str
    width: int
    eta: float
    seed: int
    regime: Optional[str] = None
    report: Optional[dict] = None
    best_train_loss: float = float("nan")
    best_test_loss: float = float("nan")
    best_test_accuracy: float = float("nan")
    lambda_max0: float = float("nan")
    lambda_max_final: float = float("nan")
    error: Optional[str] = None
    trajectory: Optional[dict] = field(default=None, repr=False)


@dataclass
class SweepResult:
    """Per-cell results in grid order (family, width, eta, seed)."""

    cells: list
    eta_grid: list
    eta_critical: float
    config_hash: str

    def to_json(self) -> str:
        doc = {
            "config_hash": self.config_hash,
            "eta_grid": self.eta_grid,
            "eta_critical": self.eta_critical,
            "cells": [_clean({k: v for k, v in asdict(c).items() if k != "trajectory"}) for c in self.cells],
        }
        return json.dumps(doc, sort_keys=True)

    def curve(self, family: str, width: Optional[int] = None, key: str = "best_test_loss"):
        """``(etas, mean, std)`` over seeds; NaN where every seed diverged."""
        etas, means, stds = [], [], []
        for eta in self.eta_grid:
            vals = [getattr(c, key) for c in self.cells
                    if c.family == family and c.eta == eta and (width is None or c.width == width)]
            vals = np.asarray(vals, dtype=np.float64)
            fin = vals[np.isfinite(vals)]
            etas.append(eta)
            if fin.size == 0 or fin.size < vals.size:
                means.append(float("nan"))
                stds.append(float("nan"))
            else:
                means.append(float(fin.mean()))
                stds.append(float(fin.std()))
        return np.asarray(etas), np.asarray(means), np.asarray(stds)


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if np.isfinite(f) else repr(f)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _run_cell(cfg_dict: dict, family: str, width: int, eta: float, seed: int) -> SweepCell:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    cell = SweepCell(family, width, eta, seed)
    try:
        train, test = build_data(cfg.dataset)
        if family == Family.GQM.value:
            state = build_random_gqm(cfg.dataset.p, cfg.dataset.seed + seed, cfg.dataset.gamma)
        else:
            state = build_state(family, width, train.d, seed, train)
        tr = cfg.train
        opt = RecorderOptions(
            kernel_every=tr.kernel_every,
            stop_at_floor=tr.stop_at_floor,
            divergence_threshold=cfg.tolerances.divergence_threshold,
            eval_data=test,
            eval_every=tr.eval_every,
            batch_size=tr.batch_size if tr.optimizer == "sgd" else None,
            seed=seed,
        )
        traj = simulate(state, train, eta, tr.max_steps, opt, tr.engine)
        thr = critical_lr(tangent_kernel(state, train))
        rep = classify_regime(traj, thr, cfg.regime_tolerances())
        cell.regime = rep.regime
        cell.report = rep.to_dict()
        fin = traj.loss[np.isfinite(traj.loss)]
        cell.best_train_loss = float(fin.min()) if fin.size else float("nan")
        diverged = rep.regime == "Divergent"
        if traj.test_loss.size and not diverged:
            cell.best_test_loss = float(np.min(traj.test_loss))
            cell.best_test_accuracy = float(np.max(traj.test_accuracy))
        lam = traj.lambda1[np.isfinite(traj.lambda1)]
        if lam.size:
            cell.lambda_max0, cell.lambda_max_final = float(lam[0]), float(lam[-1])
        if tr.keep_trajectories:
            cell.trajectory = {
                "step": traj.step.tolist(),
                "loss": traj.loss.tolist(),
                "lambda1": traj.lambda1.tolist(),
                "lambda2": traj.lambda2.tolist(),
            }
    except NQMError as exc:
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell


def _run_cells(cfg: ExperimentConfig, keys) -> list:
    doc = cfg.to_dict()
    threads = max(1, int(cfg.threads))
    if threads == 1 or len(keys) <= 1:
        return [_run_cell(doc, *k) for k in keys]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_run_cell, doc, *k) for k in keys]
        # merge in grid order, not completion order
        return [f.result() for f in futures]


def reference_thresholds(cfg: ExperimentConfig):
    """Thresholds of the initial kernel for the first width and seed."""
    train, _ = build_data(cfg.dataset)
    fam = cfg.model.families[0]
    if fam == Family.GQM.value:
        state = build_random_gqm(cfg.dataset.p, cfg.dataset.seed + cfg.seeds[0], cfg.dataset.gamma)
    else:
        state = build_state(Family.NQM.value, cfg.model.width_grid[0], train.d, cfg.seeds[0], train)
    return critical_lr(tangent_kernel(state, train))


def lr_sweep(config: ExperimentConfig) -> SweepResult:
    """Train every (family, width, eta, seed) cell and record its regime and best losses.

    A cell that raises a package error is kept with its ``error`` field set;
    the sweep goes on.
    """
    thr = reference_thresholds(config)
    grid = config.train.eta_grid or auto_eta_grid(thr.eta_critical, config.train.eta_count)
    keys = [(fam, w, float(eta), s) for fam in config.model.families for w in config.model.width_grid
            for eta in grid for s in config.seeds]
    cells = _run_cells(config, keys)
    return SweepResult(cells, [float(e) for e in grid], thr.eta_critical, config.config_hash())


# --------------------------------------------------------------------------
# scaling studies
# --------------------------------------------------------------------------


@dataclass
class StudyTable:
    """Rows of a study plus an optional fitted log-log slope."""

    columns: list
    rows: list
    slope: Optional[float] = None

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([_fmt(row[c]) for c in self.columns])
        return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _peak_run(state, data, eta, steps, engine, tol):
    opt = RecorderOptions(kernel_every=0, divergence_threshold=tol.divergence_threshold)
    traj = simulate(state, data, eta, steps, opt, engine)
    rep = classify_regime(traj, None, tol)
    lam = traj.lambda1[np.isfinite(traj.lambda1)]
    return traj, rep, float(lam[0]), float(lam[-1])


def width_scaling_study(config: ExperimentConfig, eta_factor: Optional[float] = None) -> StudyTable:
    """Peak loss and kernel drop across widths at a fixed ``delta = eta lam0 - 2``.

    Each seed gets its own initialization and ``eta = (2 + delta)/lam0`` (or
    ``eta_factor/lam0`` when given, e.g. 1 for a sub-critical control). The
    slope is a least-squares fit of ``log(mean peak)`` on ``log(m)``.
    """
    widths = config.model.width_grid
    if len(widths) < 2:
        raise ConfigError("model.width_grid", "width study needs at least two widths")
    train, _ = build_data(config.dataset)
    tol = config.regime_tolerances()
    factor = 2.0 + config.study.delta if eta_factor is None else float(eta_factor)
    engine = config.train.engine
    if engine == "gd" and train.n == 1:
        engine = "scalar"
    rows = []
    for m in widths:
        peaks, ratios, drops, rel_drops, regimes = [], [], [], [], []
        for s in config.seeds:
            state = build_state(Family.NQM.value, m, train.d, s, train)
            lam0 = tangent_kernel(state, train).lambda_max
            traj, rep, l0, l1 = _peak_run(state, train, factor / lam0, config.train.max_steps, engine, tol)
            peaks.append(rep.peak_loss)
            ratios.append(rep.peak_loss / rep.initial_loss)
            drops.append(l0 - l1)
            rel_drops.append((l0 - l1) / l0)
            regimes.append(rep.regime)
        rows.append({
            "width": m,
            "mean_peak_loss": float(np.mean(peaks)),
            "std_peak_loss": float(np.std(peaks)),
            "mean_peak_ratio": float(np.mean(ratios)),
            "mean_kernel_drop": float(np.mean(drops)),
            "mean_rel_kernel_drop": float(np.mean(rel_drops)),
            "regimes": ";".join(regimes),
        })
    lm = np.log([r["width"] for r in rows])
    lp = np.log([r["mean_peak_loss"] for r in rows])
    slope = float(np.polyfit(lm, lp, 1)[0]) if np.all(np.isfinite(lp)) else float("nan")
    cols = ["width", "mean_peak_loss", "std_peak_loss", "mean_peak_ratio", "mean_kernel_drop",
            "mean_rel_kernel_drop", "regimes"]
    return StudyTable(cols, rows, slope)


def gamma_scaling_study(config: ExperimentConfig) -> StudyTable:
    """Peak loss and kernel drop of the random quadratic model across ``gamma``.

    Uses ``dataset.p`` and ``dataset.seed`` for the instance, label 0 and the
    learning rate ``study.gqm_eta``.
    """
    gammas = config.study.gamma_grid
    tol = config.regime_tolerances()
    rows = []
    for gamma in gammas:
        peaks, drops, regimes = [], [], []
        for s in config.seeds:
            model = build_random_gqm(config.dataset.p, config.dataset.seed + s, gamma)
            data = Dataset(model.reference_input[None, :], [0.0])
            traj, rep, l0, l1 = _peak_run(model, data, config.study.gqm_eta, config.train.max_steps, "gd", tol)
            peaks.append(rep.peak_loss)
            drops.append(l0 - l1 if np.isfinite(l1) else float("nan"))
            regimes.append(rep.regime)
        rows.append({
            "gamma": float(gamma),
            "mean_peak_loss": float(np.mean(peaks)),
            "mean_kernel_drop": float(np.mean(drops)),
            "regimes": ";".join(regimes),
        })
    return StudyTable(["gamma", "mean_peak_loss", "mean_kernel_drop", "regimes"], rows)


def top_eigenspace_study(config: ExperimentConfig, seed: Optional[int] = None) -> StudyTable:
    """Corrections confined to the top kernel eigendirection along one run.

    Columns are ``step, p1_rf_p1, p1_rk_p1, pi1_loss, loss`` with ``p1`` the
    unit top eigenvector of the current kernel. For the NQM the corrections
    come from the closed forms. For the network they are measured:
    ``R_K = K(t) - K(t+1)``, and ``R_f`` is the rank-one matrix
    ``e r' / |r|^2`` that maps the residual ``r`` to the observed deviation
    ``e`` from the linear update.
    """
    family = config.model.families[0]
    if family not in (Family.NQM.value, Family.NETWORK.value):
        raise ConfigError("model.families", "eigenspace study needs nqm or network")
    seed = config.seeds[0] if seed is None else seed
    train, _ = build_data(config.dataset)
    state = build_state(family, config.model.width_grid[0], train.d, seed, train)
    eta = config.study.eigenspace_eta_factor * critical_lr(tangent_kernel(state, train)).eta_critical
    y = train.labels
    rows = []
    from .dynamics import gd_step  # local to keep the module import graph flat

    snap = tangent_kernel(state, train)
    out = predict(state, train)
    for t in range(config.train.max_steps + 1):
        r = out - y
        loss = 0.5 * float(r @ r)
        p1 = _top_direction(snap, train)
        if not np.isfinite(loss) or loss > config.tolerances.divergence_threshold:
            break
        nxt = gd_step(state, train, eta, t)
        snap_next = tangent_kernel(nxt, train)
        out_next = predict(nxt, train)
        if family == Family.NQM.value:
            R_f, R_K = general_residual_corrections(state, train, eta)
            rf = float(p1 @ R_f @ p1)
            rk = float(p1 @ R_K @ p1)
        else:
            e = (out_next - y) - (r - eta * snap.K @ r)
            rr = float(r @ r)
            rf = float((p1 @ e) * (p1 @ r) / rr) if rr > 0 else 0.0
            rk = float(p1 @ (snap.K - snap_next.K) @ p1)
        rows.append({"step": t, "p1_rf_p1": rf, "p1_rk_p1": rk, "pi1_loss": 0.5 * float(r @ p1) ** 2, "loss": loss})
        if config.train.stop_at_floor and loss <= max(1e-10 * rows[0]["loss"], 1e-14):
            break
        state, snap, out = nxt, snap_next, out_next
    return StudyTable(["step", "p1_rf_p1", "p1_rk_p1", "pi1_loss", "loss"], rows)


def _top_direction(snap, data: Dataset):
    if data.d == 1 and data.n > 1:
        p1, p2 = rank2_eigenstructure(data)
        cands = [p for p in (p1, p2) if np.any(p)]
        cands = [p / np.linalg.norm(p) for p in cands]
        return max(cands, key=lambda p: float(p @ snap.K @ p))
    return snap.eigenvectors[:, 0]
