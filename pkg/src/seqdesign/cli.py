"""Command-line interface: ``seqdesign {solve,run,replicate,interactive,report}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import bandit as bd
from . import config as cf
from . import harness as hs
from . import models as mz
from .design import CriterionSpec, round_design, runs_to_points
from .models import ObservationSet

OUT_ENV = "SEQDESIGN_OUT_DIR"
DEFAULT_OUT = "seqdesign-out"
log = logging.getLogger("seqdesign")


class UsageError(Exception):
    pass


# --- small file helpers -----------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, raw_config: dict | None, files: list[Path], extra=None) -> Path:
    manifest = {
        "tool": "seqdesign",
        "version": __version__,
        "command": command,
        "config": raw_config,
        "seed": None if raw_config is None else raw_config.get("seed"),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "outputs": {p.name: _sha256(p) for p in sorted(files)},
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out_dir or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _raw_config(args) -> dict:
    """Config mapping from a preset, a TOML file or a manifest, plus CLI overrides."""
    if args.preset and args.config:
        raise UsageError("give either a config file or --preset, not both")
    if args.preset:
        raw = cf.preset(args.preset)
    elif args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        if path.suffix == ".json":
            raw = json.loads(path.read_text()).get("config") or {}
            raw = cf.merge({}, raw)
        else:
            raw = cf.load_file(path)
    else:
        raise UsageError("a config file or --preset is required")
    over = {"seed": args.seed, "replications": args.replications}
    if getattr(args, "true_index", None) is not None:
        over["true_index"] = args.true_index
        raw.pop("true_models", None)
    if getattr(args, "workers", None) is not None:
        over["workers"] = args.workers
    raw = cf.merge(raw, over)
    raw.setdefault("seed", hs.SimConfig.seed)
    return raw


def _config_for(raw: dict, true: int) -> hs.SimConfig:
    base = {k: v for k, v in raw.items() if k not in ("true_models", "workers")}
    base["true_index"] = true
    return hs.SimConfig(**base).validate()


# --- solve ------------------------------------------------------------------

def cmd_solve(args) -> int:
    from .design import Design
    from .solver import solve_locally_optimal

    try:
        model = mz.model_from_id(args.model)
        crit = CriterionSpec.parse(args.criterion)
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from None
    grid = None
    if args.grid is not None:
        if args.grid < 2:
            raise UsageError("--grid needs at least 2 points per axis")
        sp = model.space
        axes = [np.linspace(sp.lower[d], sp.upper[d], args.grid) for d in model.active_dims]
        mesh = np.meshgrid(*axes, indexing="ij")
        grid = np.column_stack([m.ravel() for m in mesh])
    rep = solve_locally_optimal(model, crit, grid=grid, tol=args.tol)
    text = rep.to_text()
    sys.stdout.write(text)
    if args.out_dir or os.environ.get(OUT_ENV):
        out = _out_dir(args)
        path = out / "design.tsv"
        path.write_text(text)
        write_manifest(out, "solve", None, [path],
                       {"model": args.model, "criterion": args.criterion, "grid": args.grid, "tol": args.tol})
    assert isinstance(rep.design, Design)
    if not rep.converged:
        print(f"error: solver did not reach the requested gap ({rep.equivalence_gap:.3g})", file=sys.stderr)
        return 1
    return 0


# --- run ----------------------------------------------------------------------

TRIAL_COLUMNS = ["replicate", "true_index", "stages", "n", "efficiency", "proof_bound", "acc",
                 "bic_selected", "final_model", "final_correct", "misselections", "cost"]


def cmd_run(args) -> int:
    raw = _raw_config(args)
    cfg, trues, _ = cf.build(raw)
    out = _out_dir(args)
    files = []
    stream_path = out / "stages.jsonl"
    rows = []
    with open(stream_path, "w") as fh:
        for true in trues:
            c = _config_for(raw, true)
            res = hs.run_trial(c, args.replicate)
            for rec in res.records:
                d = rec.to_dict()
                d["true_index"] = true
                fh.write(json.dumps(d, sort_keys=True) + "\n")
            rows.append([res.metrics[k] for k in TRIAL_COLUMNS])
            print(_headline_trial(c, res))
    files.append(stream_path)
    files.append(write_csv(out / "trial.csv", TRIAL_COLUMNS, rows))
    write_manifest(out, "run", raw, files, {"replicate": args.replicate})
    return 0


def _headline_trial(cfg, res) -> str:
    m = res.metrics
    ids = [mm.id for mm in hs.suite_context(cfg.suite, cfg.criterion, cfg.uniform_points).models]
    return (f"true={ids[cfg.true_index]} stages={m['stages']} n={m['n']} "
            f"efficiency={m['efficiency']:.4f} final={ids[m['final_model']]} "
            f"misselections={m['misselections']} cost={m['cost']:g}")


# --- replicate ----------------------------------------------------------------

SUMMARY_COLUMNS = ["true_index", "model", "replications", "mean_efficiency", "mean_proof_bound",
                   "selection_accuracy", "final_model_accuracy", "mean_cost", "optimal_cost"]


def cmd_replicate(args) -> int:
    raw = _raw_config(args)
    _, trues, workers = cf.build(raw)
    out = _out_dir(args)
    files: list[Path] = []
    summaries = {}
    trial_rows = []
    for true in trues:
        cfg = _config_for(raw, true)
        ids = [m.id for m in hs.suite_context(cfg.suite, cfg.criterion, cfg.uniform_points).models]
        s = hs.replicate(cfg, workers=workers)
        summaries[true] = (ids[true], s)
        trial_rows += [[m[k] for k in TRIAL_COLUMNS] for m in s.trials]
        comps = list(s.comparison_efficiency)
        files.append(write_csv(
            out / f"fig_efficiency_{ids[true]}.csv", ["n", "sequential"] + comps,
            [[n, e] + [s.comparison_efficiency[c] for c in comps] for n, e in zip(s.checkpoints, s.efficiency_by_T)],
        ))
        files.append(write_csv(
            out / f"misselections_{ids[true]}.csv", ["stage", "mean_misselections"],
            [[t + 1, v] for t, v in enumerate(s.misselect_counts)],
        ))
        print(f"true={ids[true]} R={len(s.trials)} efficiency={s.mean_efficiency:.4f} "
              f"ACC={s.selection_accuracy:.3f} final={s.final_model_accuracy:.3f} cost={s.mean_cost:g} "
              + " ".join(f"{k}={v:.4f}" for k, v in s.comparison_efficiency.items()))
    files.append(write_csv(out / "trials.csv", TRIAL_COLUMNS, trial_rows))
    files.append(write_csv(out / "summary.csv", SUMMARY_COLUMNS, [
        [t, mid, len(s.trials), s.mean_efficiency, s.mean_proof_bound, s.selection_accuracy,
         s.final_model_accuracy, s.mean_cost, s.optimal_cost] for t, (mid, s) in summaries.items()
    ]))
    files.append(write_csv(out / "fig_accuracy.csv", ["model", "acc", "final_model_accuracy"], [
        [mid, s.selection_accuracy, s.final_model_accuracy] for mid, s in summaries.values()
    ]))
    comps = sorted({c for _, s in summaries.values() for c in s.comparison_cost})
    files.append(write_csv(out / "fig_cost.csv", ["model", "sequential", "optimal"] + comps, [
        [mid, s.mean_cost, s.optimal_cost] + [s.comparison_cost.get(c, math.nan) for c in comps]
        for mid, s in summaries.values()
    ]))
    if not args.no_figures:
        files += render_report(out)
    write_manifest(out, "replicate", raw, files)
    return 0


# --- report -------------------------------------------------------------------

def render_report(run_dir: Path) -> list[Path]:
    from . import plotting

    made = []
    for path in sorted(run_dir.glob("fig_efficiency_*.csv")):
        header, rows = read_csv(path)
        n = [int(r[0]) for r in rows]
        series = {h: [float(r[i]) for r in rows] for i, h in enumerate(header) if i > 0}
        made += plotting.efficiency_curves(n, series, path.with_suffix(""), title=path.stem.split("_")[-1])
    acc = run_dir / "fig_accuracy.csv"
    if acc.exists():
        header, rows = read_csv(acc)
        made += plotting.bars([r[0] for r in rows], {h: [float(r[i]) for r in rows] for i, h in enumerate(header) if i > 0},
                              acc.with_suffix(""), "probability")
    cost = run_dir / "fig_cost.csv"
    if cost.exists():
        header, rows = read_csv(cost)
        made += plotting.bars([r[0] for r in rows], {h: [float(r[i]) for r in rows] for i, h in enumerate(header) if i > 0},
                              cost.with_suffix(""), "cost")
    return made


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"{run_dir} is not a directory")
    made = render_report(run_dir)
    summary = run_dir / "summary.csv"
    if summary.exists():
        header, rows = read_csv(summary)
        print("\t".join(header))
        for r in rows:
            print("\t".join(r))
    for p in made:
        print(f"wrote {p}")
    if not made:
        print("error: no figure data found", file=sys.stderr)
        return 1
    return 0


# --- interactive --------------------------------------------------------------

def _fmt_point(x) -> str:
    return "(" + ", ".join("free" if math.isnan(v) else f"{v:.6g}" for v in x) + ")"


class Session:
    """Resumable interactive state, stored as JSON after every answered run."""

    def __init__(self, path: Path, raw: dict):
        self.path = path
        self.raw = raw
        self.state = None
        self.records: list[dict] = []
        self.pending: dict | None = None
        self.pretest: dict | None = None

    def save(self):
        data = {"config": self.raw, "state": self.state.to_dict(), "records": self.records,
                "pending": self.pending, "pretest": self.pretest}
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(data, indent=1, sort_keys=True))
        tmp.replace(self.path)

    @classmethod
    def load(cls, path: Path) -> "Session":
        data = json.loads(path.read_text())
        s = cls(path, data["config"])
        s.state = bd.BanditState.from_dict(data["state"])
        s.records = data["records"]
        s.pending = data["pending"]
        s.pretest = data["pretest"]
        return s


def _ask_float(prompt: str, reader, writer) -> float:
    while True:
        text = reader(prompt)
        try:
            v = float(text.strip())
        except ValueError:
            writer(f"  not a number: {text!r}, try again")
            continue
        if math.isfinite(v):
            return v
        writer("  value must be finite, try again")


def _collect_answers(block: dict, noise, reader, writer, session: Session):
    planned = np.array([[math.nan if v is None else v for v in row] for row in block["planned"]])
    answers = block.setdefault("answers", [])
    while len(answers) < len(planned):
        i = len(answers)
        x = planned[i].copy()
        for d in noise:
            if math.isnan(x[d]):
                x[d] = _ask_float(f"  run {i + 1}/{len(planned)} {_fmt_point(planned[i])} observed x{d + 1}> ", reader, writer)
        y = _ask_float(f"  run {i + 1}/{len(planned)} {_fmt_point(x)} y> ", reader, writer)
        answers.append({"x": x.tolist(), "y": y})
        session.save()
    return planned, answers


def interactive_session(raw: dict, session_path: Path, reader=input, writer=print) -> int:
    cfg = _config_for(raw, raw.get("true_index", 0))
    ctx = hs.suite_context(cfg.suite, cfg.criterion, cfg.uniform_points)
    ids = [m.id for m in ctx.models]
    noise = ctx.models[0].noise_dims
    if session_path.exists():
        session = Session.load(session_path)
        if session.raw != raw:
            writer("note: resuming with the configuration stored in the session file")
        cfg = _config_for(session.raw, session.raw.get("true_index", 0))
        writer(f"resuming session at stage {session.state.t}")
    else:
        session = Session(session_path, raw)
        session.state = bd.init(ctx.K)
        session.save()
    pretest = None
    if cfg.pretest_n > 0:
        if session.pretest is None or len(session.pretest.get("answers", [])) < cfg.pretest_n:
            if session.pretest is None:
                runs = round_design(ctx.unif, cfg.pretest_n, min_one=cfg.pretest_n >= ctx.unif.size)
                session.pretest = {"planned": bd._nan_list(runs_to_points(runs))}
                session.save()
            writer(f"pretest: {cfg.pretest_n} runs on the uniform design")
        _, ans = _collect_answers(session.pretest, noise, reader, writer, session)
        pretest = ObservationSet(np.array([a["x"] for a in ans]), np.array([a["y"] for a in ans]), 0)
    total = sum(len(r["y"]) for r in session.records)
    while session.state.t <= cfg.T:
        t = session.state.t
        left = None if cfg.budget is None else cfg.budget - total
        if left is not None and left <= 0:
            break
        if session.pending is None:
            arm = bd.select_arm(session.state, hs.stream(cfg.seed, 0, t, hs.STREAM_ARM))
            size = cfg.n_t if isinstance(cfg.n_t, int) else cfg.n_t[arm]
            size -= cfg.pretest_n
            partial = left is not None and size > left
            size = min(size, left) if left is not None else size
            rho, share, design = bd.stage_design(session.state, arm, ctx.optimal, ctx.unif, cfg.rho_mode)
            planned = runs_to_points(bd.plan_stage(design, size, allow_partial=partial))
            session.pending = {"arm": arm, "planned": bd._nan_list(planned), "answers": []}
            session.save()
        arm = session.pending["arm"]
        planned = np.array([[math.nan if v is None else v for v in row] for row in session.pending["planned"]])
        writer(f"stage {t}: design from {ids[arm]}, {len(planned)} runs")
        uniq, counts = np.unique(planned, axis=0, return_counts=True)
        for x, c in zip(uniq, counts):
            writer(f"  {_fmt_point(x)} x {c}")
        _, answers = _collect_answers(session.pending, noise, reader, writer, session)
        queue = iter(answers)

        def replay(_x, q=queue):
            a = next(q)
            return np.array(a["x"]), a["y"]

        # same arguments as the simulator, so the stage plan is rebuilt identically
        rec, state = bd.run_stage(
            session.state, ctx.optimal, ctx.unif, cfg.n_t, replay, ctx.models, np.random.default_rng(0),
            eval_mode=cfg.eval_mode, rho_mode=cfg.rho_mode, level=cfg.gof_level,
            pretest=pretest, budget_left=left, arm=arm,
        )
        session.records.append(rec.to_dict())
        session.state = state
        session.pending = None
        session.save()
        total += rec.data.n
        sel = rec.scores.selected
        writer(f"  selected: {ids[sel] if sel is not None else 'none'}")
        writer("  posteriors: " + "  ".join(f"{ids[j]} a={state.a[j]} b={state.b[j]}" for j in range(ctx.K)))
        agg = _aggregate_from_dicts(session.records)
        writer("  aggregate design:")
        for x, w in zip(agg.points, agg.weights):
            writer(f"    {_fmt_point(x)} {w:.4f}")
    if session.records:
        writer(f"done: final model {ids[bd.final_model(session.state)]} after {session.state.t - 1} stages")
    return 0


def _aggregate_from_dicts(records: list[dict]):
    from .design import Design, mix

    designs, sizes = [], []
    for r in records:
        pts = np.array([[math.nan if v is None else v for v in row] for row in r["hybrid"]["points"]])
        designs.append(Design(pts, np.array(r["hybrid"]["weights"])))
        sizes.append(len(r["y"]))
    total = float(sum(sizes))
    return mix(designs, [s / total for s in sizes])


def cmd_interactive(args) -> int:
    raw = _raw_config(args)
    raw.pop("true_models", None)
    out = _out_dir(args)
    session_path = Path(args.session) if args.session else out / "session.json"
    try:
        code = interactive_session(raw, session_path)
    except (EOFError, KeyboardInterrupt):
        print(f"\nsession saved to {session_path}; rerun the same command to resume")
        return 0
    write_manifest(out, "interactive", raw, [session_path] if session_path.parent == out else [])
    return code


# --- entry point --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seqdesign", description="Sequential optimal design under model uncertainty.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("config", nargs="?", help="TOML config or a manifest.json to replay")
            sp.add_argument("--preset", help=f"built-in config: {', '.join(sorted(cf.PRESETS))}")
            sp.add_argument("--seed", type=int)
            sp.add_argument("--replications", type=int)
        sp.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")

    s = sub.add_parser("solve", help="locally optimal design for one model")
    s.add_argument("model", help="model id, e.g. emax:delta=3 or multivariate-linear:M2")
    s.add_argument("criterion", nargs="?", default="D", help="D, A or phi:q")
    s.add_argument("--grid", type=int, help="points per axis of a custom candidate grid")
    s.add_argument("--tol", type=float, default=1e-7)
    common(s, config=False)
    s.set_defaults(func=cmd_solve)

    r = sub.add_parser("run", help="one simulated trial per true model, with the stage stream")
    common(r)
    r.add_argument("--true-index", type=int)
    r.add_argument("--replicate", type=int, default=0, help="replicate index (selects the seed stream)")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("replicate", help="Monte Carlo replication with figure data")
    common(rp)
    rp.add_argument("--true-index", type=int)
    rp.add_argument("--workers", type=int)
    rp.add_argument("--no-figures", action="store_true")
    rp.set_defaults(func=cmd_replicate)

    it = sub.add_parser("interactive", help="stage-by-stage session with real responses")
    common(it)
    it.add_argument("--session", help="session file (default <out-dir>/session.json)")
    it.set_defaults(func=cmd_interactive)

    rep = sub.add_parser("report", help="render figures from a replicate output directory")
    rep.add_argument("run_dir")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, cf.ConfigError) as exc:
        print(f"seqdesign: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        if args.verbose:
            raise
        print(f"seqdesign: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
