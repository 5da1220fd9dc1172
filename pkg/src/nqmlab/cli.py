"""Command-line entry point.

Every command resolves a configuration (JSON file, then ``--set`` overrides),
writes its artifacts under ``--out`` and finishes with a ``manifest.json``
listing each file once together with the configuration hash.

Exit codes: 0 success (diverged sweep cells are data, not failures), 1 failed
``verify`` checks, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import RecorderOptions, classify_regime, simulate, write_reports_jsonl
from .errors import ConfigError, DegenerateKernelError, NQMError
from .experiments import (
    ExperimentConfig,
    StudyTable,
    apply_overrides,
    build_data,
    build_state,
    default_threads,
    gamma_scaling_study,
    lr_sweep,
    top_eigenspace_study,
    width_scaling_study,
)
from .kernel import critical_lr, tangent_kernel
from .models import AnchoredModelState, Family, build_random_gqm, save_checkpoint

COMMANDS = ("simulate", "sweep", "thresholds", "width-study", "gamma-study", "eigenspace-study", "verify")
PLOT_STYLES = {
    "fig3": ["eta", "step", "loss", "lambda1", "lambda2"],
    "fig4": ["family", "eta", "best_test_loss", "stddev"],
    "fig6": None,
}


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------


class Manifest:
    def __init__(self, command: str, cfg: ExperimentConfig, overrides):
        self.doc = {
            "command": command,
            "config_hash": cfg.config_hash(),
            "config": cfg.to_dict(),
            "overrides": list(overrides or ()),
            "seeds": list(cfg.seeds),
            "versions": {
                "nqmlab": __version__,
                "numpy": np.__version__,
                "python": platform.python_version(),
            },
            "files": [],
        }

    def add(self, path: Path, kind: str):
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        self.doc["files"].append({"path": Path(path).name, "kind": kind, "sha256": digest})

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        path.write_text(json.dumps(self.doc, indent=1, sort_keys=True) + "\n")
        return path


def emit_plot_data(result, style: str, path) -> Path:
    """Write one tidy CSV for a figure style; no plotting happens here.

    ``fig3``: ``eta,step,loss,lambda1,lambda2`` from a sweep that kept its
    trajectories. ``fig4``: ``family,eta,best_test_loss,stddev`` (mean and
    spread over seeds, empty where a seed diverged). ``fig6``: the columns of
    a study table.
    """
    if style not in PLOT_STYLES:
        raise ValueError(f"unknown plot style {style!r}")
    path = Path(path)
    try:
        fh = path.open("w", newline="")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror}") from exc
    with fh:
        w = csv.writer(fh)
        if style == "fig6":
            if not isinstance(result, StudyTable):
                raise TypeError("fig6 style expects a study table")
            w.writerow(result.columns)
            for row in result.rows:
                w.writerow([_cell(row[c]) for c in result.columns])
            return path
        w.writerow(PLOT_STYLES[style])
        if result is None:
            return path
        if style == "fig3":
            for c in result.cells:
                if c.trajectory is None:
                    continue
                tr = c.trajectory
                for k in range(len(tr["step"])):
                    w.writerow([_cell(c.eta), tr["step"][k], _cell(tr["loss"][k]), _cell(tr["lambda1"][k]),
                                _cell(tr["lambda2"][k])])
        else:
            families = list(dict.fromkeys(c.family for c in result.cells))
            for fam in families:
                etas, mean, std = result.curve(fam)
                for e, mu, sd in zip(etas, mean, std):
                    w.writerow([fam, _cell(e), _cell(mu) if np.isfinite(mu) else "", _cell(sd) if np.isfinite(sd) else ""])
    return path


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _first_state(cfg: ExperimentConfig, train):
    fam = cfg.model.families[0]
    seed = cfg.seeds[0]
    if fam == Family.GQM.value:
        return build_random_gqm(cfg.dataset.p, cfg.dataset.seed + seed, cfg.dataset.gamma)
    return build_state(fam, cfg.model.width_grid[0], train.d, seed, train)


def cmd_thresholds(cfg, out: Path, manifest: Manifest):
    train, _ = build_data(cfg.dataset)
    state = _first_state(cfg, train)
    snap = tangent_kernel(state, train)
    thr = critical_lr(snap)
    doc = thr.to_dict()
    doc["lambda_max"] = snap.lambda_max
    doc["two_over_lambda"] = [d["two_over"] for d in doc["per_direction"][:2]]
    path = out / "thresholds.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    manifest.add(path, "thresholds")
    print(json.dumps(doc, sort_keys=True))


def cmd_simulate(cfg, out: Path, manifest: Manifest):
    train, test = build_data(cfg.dataset)
    state = _first_state(cfg, train)
    thr = critical_lr(tangent_kernel(state, train))
    eta = cfg.train.eta_grid[0] if cfg.train.eta_grid else 0.5 * thr.eta_critical
    tr = cfg.train
    opt = RecorderOptions(
        kernel_every=tr.kernel_every,
        stop_at_floor=tr.stop_at_floor,
        divergence_threshold=cfg.tolerances.divergence_threshold,
        eval_data=test,
        eval_every=tr.eval_every,
        batch_size=tr.batch_size if tr.optimizer == "sgd" else None,
        seed=cfg.seeds[0],
    )
    traj = simulate(state, train, eta, tr.max_steps, opt, tr.engine)
    rep = classify_regime(traj, thr, cfg.regime_tolerances())
    manifest.add(traj.to_csv(out / "trajectory.csv"), "trajectory")
    manifest.add(write_reports_jsonl([rep], out / "reports.jsonl"), "regime-reports")
    if isinstance(traj.final_state, AnchoredModelState):
        manifest.add(save_checkpoint(traj.final_state, out / "checkpoint.json", seed=cfg.seeds[0]), "checkpoint")
    print(json.dumps({"eta": eta, "regime": rep.regime, "steps": len(traj), "stop_reason": traj.stop_reason}))


def cmd_sweep(cfg, out: Path, manifest: Manifest):
    result = lr_sweep(cfg)
    path = out / "sweep.json"
    path.write_text(result.to_json() + "\n")
    manifest.add(path, "sweep")
    reports = [c for c in result.cells if c.report is not None]
    rpath = out / "reports.jsonl"
    with rpath.open("w") as fh:
        for c in reports:
            fh.write(json.dumps({"family": c.family, "width": c.width, "eta": c.eta, "seed": c.seed,
                                 "report": _jsonable(c.report)}, sort_keys=True) + "\n")
    manifest.add(rpath, "regime-reports")
    manifest.add(emit_plot_data(result, "fig4", out / "fig4.csv"), "plot:fig4")
    if cfg.train.keep_trajectories:
        manifest.add(emit_plot_data(result, "fig3", out / "fig3.csv"), "plot:fig3")
    failed = sum(c.error is not None for c in result.cells)
    print(json.dumps({"cells": len(result.cells), "failed": failed, "eta_critical": result.eta_critical}))


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=float).replace("NaN", '"nan"').replace("Infinity", '"inf"'))


def cmd_table(fn, name):
    def run(cfg, out: Path, manifest: Manifest):
        table = fn(cfg)
        manifest.add(emit_plot_data(table, "fig6", out / f"{name}.csv"), f"table:{name}")
        summary = {"rows": len(table.rows)}
        if table.slope is not None:
            summary["slope"] = table.slope
        print(json.dumps(summary))

    return run


def cmd_verify(cfg, out: Path, manifest: Manifest):
    from .verify import run_checks

    results = run_checks(cfg)
    path = out / "verify.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "passed", "detail"])
        for name, ok, detail in results:
            w.writerow([name, int(ok), detail])
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    manifest.add(path, "verify")
    return 0 if all(ok for _, ok, _ in results) else 1


HANDLERS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "thresholds": cmd_thresholds,
    "width-study": cmd_table(width_scaling_study, "width_study"),
    "gamma-study": cmd_table(gamma_scaling_study, "gamma_study"),
    "eigenspace-study": cmd_table(top_eigenspace_study, "eigenspace"),
    "verify": cmd_verify,
}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nqmlab", description="Neural quadratic model laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="JSON config (or a previous manifest.json)")
        p.add_argument("--out", type=Path, default=None, help="output directory (default: config output_dir)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, repeatable")
        p.add_argument("--seeds", type=int, default=None, help="use seeds 0..N-1")
        p.add_argument("--threads", type=int, default=None, help="worker processes (env NQMLAB_THREADS)")
    return parser


def resolve_config(args) -> tuple:
    doc = {}
    if args.config is not None:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("--config", str(exc)) from None
        if isinstance(doc, dict) and "config_hash" in doc and "config" in doc:
            doc = doc["config"]
    overrides = list(args.overrides)
    if args.seeds is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds", "must be positive")
        overrides.append("seeds=" + json.dumps(list(range(args.seeds))))
    threads = args.threads if args.threads is not None else default_threads()
    overrides.append(f"threads={int(threads)}")
    cfg = ExperimentConfig.from_dict(apply_overrides(doc, overrides))
    return cfg, overrides


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, overrides = resolve_config(args)
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out is not None else Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create {out}: {exc}", file=sys.stderr)
        return 2
    manifest = Manifest(args.command, cfg, overrides)
    run_id = f"{args.command}:{cfg.config_hash()}"
    try:
        status = HANDLERS[args.command](cfg, out, manifest) or 0
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, DegenerateKernelError) as exc:
        print(f"numeric failure in run {run_id}: {exc}", file=sys.stderr)
        return 3
    except (NQMError, ValueError) as exc:
        print(f"invalid input in run {run_id}: {exc}", file=sys.stderr)
        return 2
    manifest.write(out)
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
