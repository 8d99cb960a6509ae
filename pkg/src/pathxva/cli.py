"""Command-line batch driver.

``pathxva full`` runs simulate, CVA, the selected schemes, twin validation
and error bounds, then exports CSV/JSON (and PNG figures unless disabled).
Every artifact carries the config hash and the seed.  Exit codes: 0 success,
1 configuration error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .absde import read_csv, write_csv
from .config import ConfigError, config_hash, default_config_dict, parse_config
from .market import ScenarioCube, TimeGrid, build_portfolio, build_scenarios
from .nn import TrainConfig, load_heads, save_heads
from .validation import global_bounds, xva_lipschitz_estimate, xva_twin_report
from .xva import (METRICS, XvaConfig, collect_heads, compute_cva, explicit_from_heads,
                  solve_xva_explicit, solve_xva_picard)

logger = logging.getLogger("pathxva")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
THETA_RANGE = (3, 12)
SUMMARY_FORMAT = "pathxva-summary-v1"
ENV_OUT = "PATHXVA_OUT"


class PhaseError(Exception):
    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"{phase}: {cause}")
        self.phase = phase
        self.cause = cause


# --- run configuration ----------------------------------------------------------------

@dataclass
class RunConfig:
    config_path: Optional[str] = None
    overrides: tuple = ()
    theta: int = 5
    n_paths: int = 16384
    n_inner: int = 8
    seed: int = 1
    scheme: str = "both"
    picard_iters: int = 4
    alpha: Optional[float] = None
    hurdle: Optional[float] = None
    cva_mode: str = "intensity"
    train: TrainConfig = field(default_factory=TrainConfig)
    out: Path = Path("pathxva-out")
    validate: bool = False
    bounds: bool = False
    plots: bool = False
    save_cube: bool = False

    def __post_init__(self):
        lo, hi = THETA_RANGE
        if not lo <= self.theta <= hi:
            raise ConfigError(f"theta must lie in [{lo}, {hi}] (got {self.theta})")
        if self.n_paths < 2 or self.n_inner < 1:
            raise ConfigError("need at least 2 outer paths and 1 inner branch")
        if self.scheme not in ("explicit", "picard", "both"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.picard_iters < 1:
            raise ConfigError("Picard iteration count must be >= 1")
        if self.config_path is not None and not Path(self.config_path).is_file():
            raise ConfigError(f"config file not found: {self.config_path}")

    def effective_config(self) -> dict:
        """Model file contents after ``--set`` overrides and alpha/hurdle flags."""
        if self.config_path is None:
            raw = default_config_dict()
        else:
            try:
                raw = json.loads(Path(self.config_path).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{self.config_path}: invalid JSON ({exc})") from exc
        raw.pop("_doc", None)
        for item in self.overrides:
            apply_override(raw, item)
        if self.alpha is not None:
            raw["alpha"] = self.alpha
        if self.hurdle is not None:
            raw["hurdle_rate"] = self.hurdle
        return raw

    def run_params(self) -> dict:
        return {"theta": self.theta, "n_paths": self.n_paths, "n_inner": self.n_inner,
                "seed": self.seed, "scheme": self.scheme, "picard_iters": self.picard_iters,
                "cva_mode": self.cva_mode, "train": train_dict(self.train)}


def train_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(d["hidden"])
    return d


def apply_override(raw: dict, item: str):
    """``a.b.0.c=<json>`` sets a nested entry (list indices allowed)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, text = item.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    parts = key.strip().split(".")
    node = raw
    try:
        for p in parts[:-1]:
            node = node[int(p)] if isinstance(node, list) else node[p]
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            if last not in node:
                raise KeyError(last)
            node[last] = value
    except (KeyError, IndexError, ValueError, TypeError) as exc:
        raise ConfigError(f"override {item!r} does not match the config layout") from exc


# --- staging and phases -----------------------------------------------------------------

class Staging:
    """Artifacts are written to a hidden directory and moved into place on success."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.dir = self.out / f".staging-{os.getpid()}"

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        if self.dir.exists():
            shutil.rmtree(self.dir)
        self.dir.mkdir()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            for item in sorted(self.dir.iterdir()):
                dest = self.out / item.name
                if dest.is_dir():
                    shutil.rmtree(dest)
                os.replace(item, dest)
        shutil.rmtree(self.dir, ignore_errors=True)
        return False

    def path(self, name: str) -> Path:
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


class Timer:
    def __init__(self):
        self.phases = {}

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        logger.info("phase %s started", name)
        try:
            yield
        except (ConfigError, PhaseError):
            raise
        except Exception as exc:
            raise PhaseError(name, exc) from exc
        finally:
            self.phases[name] = round(time.perf_counter() - t0, 3)
        logger.info("phase %s done in %.1fs", name, self.phases[name])


def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def _finite_or_raise(values: dict, what: str):
    for k, v in values.items():
        if not np.isfinite(v):
            raise FloatingPointError(f"{what} {k} is not finite")


# --- the pipeline ---------------------------------------------------------------------------

@dataclass
class Context:
    run: RunConfig
    raw: dict
    model_cfg: object
    chash: str
    rhash: str
    timer: Timer
    cube: Optional[ScenarioCube] = None

    @property
    def tag(self) -> dict:
        return {"config_hash": self.chash, "run_hash": self.rhash, "seed": self.run.seed}

    def xva_config(self, scheme: str) -> XvaConfig:
        return XvaConfig(self.model_cfg.alpha, self.model_cfg.hurdle_rate, scheme,
                         self.run.picard_iters, self.run.cva_mode)


def resolve(run: RunConfig, timer: Timer) -> Context:
    with timer.phase("config"):
        raw = run.effective_config()
        model_cfg = parse_config(raw)
    return Context(run, raw, model_cfg, config_hash(raw),
                   config_hash({"config": raw, "run": run.run_params()}), timer)


def simulate_phase(ctx: Context, cube_path: Optional[str] = None) -> ScenarioCube:
    run = ctx.run
    with ctx.timer.phase("simulate"):
        if cube_path is not None:
            cube = ScenarioCube.load(cube_path)
            if cube.meta.get("config_hash") != ctx.chash:
                raise ConfigError("scenario cube was generated from a different config")
        else:
            model = ctx.model_cfg.model
            grid = TimeGrid.for_model(model, run.theta)
            ps = ctx.model_cfg.portfolio
            portfolio = build_portfolio(ps.seed, ps.n_swaps, model, grid, ps)
            cube = build_scenarios(model, grid, portfolio, run.n_paths, run.n_inner, run.seed)
            cube.meta = dict(ctx.tag)
    ctx.cube = cube
    return cube


def solve_phase(ctx: Context):
    run, cube = ctx.run, ctx.cube
    train = run.train
    with ctx.timer.phase("cva"):
        cva = compute_cva(cube, ctx.xva_config("explicit"), train)
    surfaces, profile = [], []

    def record(surf):
        _finite_or_raise(surf.time0, f"{surf.scheme} j={surf.iteration}")
        profile.extend(surf.profile_rows(run.theta))

    if run.scheme in ("explicit", "both"):
        with ctx.timer.phase("explicit"):
            surfaces.append(solve_xva_explicit(cube, cva, ctx.xva_config("explicit"), train))
            record(surfaces[-1])
    if run.scheme in ("picard", "both"):
        with ctx.timer.phase("picard"):
            surfaces += solve_xva_picard(cube, cva, ctx.xva_config("picard"), train,
                                         on_iteration=record)
    return cva, surfaces, profile


def summary_dict(ctx: Context, surfaces: list) -> dict:
    run, grid = ctx.run, ctx.cube.grid
    results = [{"scheme": s.scheme, "j": s.iteration,
                **{k.upper(): float(s.time0[k.upper()]) for k in METRICS},
                "VaR": float(s.time0["VaR"])} for s in surfaces]
    out = {"format": SUMMARY_FORMAT, **ctx.tag, "theta": run.theta, "grid": grid.to_dict(),
           "n_outer": ctx.cube.n_outer, "n_inner": ctx.cube.n_inner,
           "alpha": ctx.model_cfg.alpha, "hurdle_rate": ctx.model_cfg.hurdle_rate,
           "cva_mode": run.cva_mode, "train": train_dict(run.train), "results": results}
    explicit = [s for s in surfaces if s.scheme == "explicit"]
    if explicit:
        e = explicit[0]
        out["train_loss0"] = {k: float(e.train_loss[k][0]) for k in ("fva", "kva")}
        ref = e.time0["FVA"]
        gaps = {f"j{s.iteration}": relative_gap(ref, s.time0["FVA"]) for s in surfaces
                if s.scheme == "picard"}
        if gaps:
            out["picard_vs_explicit_fva0"] = gaps
    return out


def relative_gap(ref: float, value: float) -> Optional[float]:
    return None if ref == 0 else float((value - ref) / abs(ref))


def twin_phase(ctx: Context, cva, surfaces: list, staging: Staging):
    explicit = [s for s in surfaces if s.scheme == "explicit"]
    if not explicit:
        raise ConfigError("twin validation needs the explicit scheme")
    with ctx.timer.phase("validate"):
        cfg = ctx.xva_config("explicit")
        reports = xva_twin_report(ctx.cube, cva, explicit[0], cfg, ctx.run.seed)
        rows = reports["fva"].rows() + reports["kva"].rows()
        grid = ctx.cube.grid
        header = {**ctx.tag, "theta": ctx.run.theta, "dt": grid.dt, "m": grid.m,
                  "alpha": cfg.alpha, "lipschitz_f": xva_lipschitz_estimate(ctx.cube, cfg.hurdle_rate),
                  "lipschitz_phi": 1.0}
        path = write_csv(staging.path("twin.csv"), rows, header)
    return rows, header, path


def bounds_rows(twin_rows: list, header: dict, target: str, lipschitz_f=None, lipschitz_phi=None):
    rows = sorted((r for r in twin_rows if r["target"] == target), key=lambda r: int(r["step"]))
    if not rows:
        raise ConfigError(f"twin table has no rows for target {target!r}")
    twin = np.array([float(r["twin_mse"]) for r in rows])
    eps = np.sign(twin) * np.sqrt(np.abs(twin))
    lf = float(header["lipschitz_f"]) if lipschitz_f is None else lipschitz_f
    lp = float(header["lipschitz_phi"]) if lipschitz_phi is None else lipschitz_phi
    table = global_bounds(eps, None, lipschitz_f=lf, dt=float(header["dt"]), lam_phi=lp,
                          alpha=float(header["alpha"]), m=int(header["m"]))
    return [{"target": target, **r} for r in table.rows()], {"lipschitz_f": lf, "lipschitz_phi": lp}


def export_solution(ctx: Context, cva, surfaces: list, rows: list, staging: Staging):
    with ctx.timer.phase("export"):
        summary = summary_dict(ctx, surfaces)
        write_json(staging.path("summary.json"), summary)
        write_csv(staging.path("profiles.csv"), rows, ctx.tag)
        save_heads(staging.path("heads"), collect_heads(cva, surfaces), meta=ctx.tag)
        write_json(staging.path("run.json"), run_manifest(ctx))
    return summary, rows


def run_manifest(ctx: Context) -> dict:
    return {**ctx.tag, "config": ctx.raw, "run": ctx.run.run_params()}


def render_plots(ctx: Context, staging: Staging, profile: list, twin: Optional[list]):
    with ctx.timer.phase("plots"):
        from . import plotting
        tag = f"config_hash={ctx.chash} seed={ctx.run.seed}"
        fig_dir = staging.path("figures/.keep").parent
        plotting.plot_profiles(profile, fig_dir, tag)
        if twin:
            plotting.plot_twin(twin, fig_dir, tag)


def write_timings(ctx: Context, staging: Staging):
    write_json(staging.path("timings.json"), {**ctx.tag, "phases_seconds": ctx.timer.phases})


def cmd_simulate(run: RunConfig, args) -> int:
    timer = Timer()
    ctx = resolve(run, timer)
    with Staging(run.out) as st:
        cube = simulate_phase(ctx)
        with timer.phase("export"):
            cube.save(st.path("cube"))
            write_json(st.path("run.json"), run_manifest(ctx))
        write_timings(ctx, st)
    print(f"scenario cube written to {run.out / 'cube.bin'}")
    return EXIT_OK


def cmd_solve(run: RunConfig, args) -> int:
    timer = Timer()
    ctx = resolve(run, timer)
    with Staging(run.out) as st:
        simulate_phase(ctx, getattr(args, "cube", None))
        if run.save_cube:
            ctx.cube.save(st.path("cube"))
        cva, surfaces, profile = solve_phase(ctx)
        summary, profile = export_solution(ctx, cva, surfaces, profile, st)
        twin = None
        if run.validate or run.bounds:
            twin, header, _ = twin_phase(ctx, cva, surfaces, st)
        if run.bounds:
            with timer.phase("bounds"):
                rows = []
                for target in ("fva", "kva"):
                    rows += bounds_rows(twin, header, target)[0]
                write_csv(st.path("bounds.csv"), rows, {**header, "bound_kind": "partial"})
        if run.plots:
            render_plots(ctx, st, profile, twin)
        write_timings(ctx, st)
    print_summary(summary)
    return EXIT_OK


def print_summary(summary: dict):
    print(f"config_hash={summary['config_hash']} seed={summary['seed']} theta={summary['theta']}")
    print(f"{'scheme':<10}{'j':>3}" + "".join(f"{m.upper():>14}" for m in METRICS))
    for r in summary["results"]:
        print(f"{r['scheme']:<10}{r['j']:>3}" + "".join(f"{r[m.upper()]:>14.6f}" for m in METRICS))


def _run_dir_file(path: Path, name: str) -> Path:
    path = Path(path)
    return path / name if path.is_dir() else path


def cmd_validate(args) -> int:
    run_dir = Path(args.run)
    manifest = json.loads(_run_dir_file(run_dir, "run.json").read_text())
    summary = json.loads(_run_dir_file(run_dir, "summary.json").read_text())
    params = manifest["run"]
    run = RunConfig(theta=params["theta"], n_paths=params["n_paths"], n_inner=params["n_inner"],
                    seed=params["seed"], scheme=params["scheme"], picard_iters=params["picard_iters"],
                    cva_mode=params["cva_mode"], out=Path(args.out or run_dir))
    timer = Timer()
    raw = manifest["config"]
    with timer.phase("config"):
        model_cfg = parse_config(raw)
    ctx = Context(run, raw, model_cfg, config_hash(raw), manifest["run_hash"], timer)
    if ctx.chash != summary["config_hash"]:
        raise ConfigError("run.json and summary.json disagree on the config hash")
    explicit = [r for r in summary["results"] if r["scheme"] == "explicit"]
    if not explicit:
        raise ConfigError("twin validation needs an explicit-scheme run")
    cube_file = run_dir / "cube.json"
    with Staging(run.out) as st:
        simulate_phase(ctx, str(run_dir / "cube") if cube_file.exists() else None)
        with timer.phase("load"):
            heads = load_heads(run_dir / "heads")
            cva, surf = explicit_from_heads(ctx.cube, heads, explicit[0], ctx.xva_config("explicit"),
                                            summary.get("train_loss0"))
        twin, _, _ = twin_phase(ctx, cva, [surf], st)
        if args.plots:
            render_plots(ctx, st, [], twin)
        write_timings(ctx, st)
    print(f"twin table with {len(twin)} rows written to {run.out / 'twin.csv'}")
    return EXIT_OK


def read_csv_header(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            k, _, v = line[1:].strip().partition("=")
            out[k.strip()] = v.strip()
    return out


def cmd_bounds(args) -> int:
    header = read_csv_header(args.twin)
    missing = {"dt", "m", "alpha"} - set(header)
    if args.lipschitz_f is None:
        missing |= {"lipschitz_f"} - set(header)
    if missing:
        raise ConfigError(f"twin CSV header lacks {sorted(missing)}")
    header.setdefault("lipschitz_phi", "1.0")
    twin = read_csv(args.twin)
    out = Path(args.out or os.environ.get(ENV_OUT) or Path(args.twin).parent)
    rows, consts = [], {}
    with Staging(out) as st:
        for target in args.target:
            r, consts = bounds_rows(twin, header, target, args.lipschitz_f, args.lipschitz_phi)
            rows += r
        keep = {k: header[k] for k in ("config_hash", "run_hash", "seed") if k in header}
        write_csv(st.path("bounds.csv"), rows, {**keep, **consts, "dt": header["dt"], "m": header["m"],
                                               "alpha": header["alpha"], "bound_kind": "partial"})
    print(f"bounds for {', '.join(args.target)} written to {out / 'bounds.csv'}")
    return EXIT_OK


# --- compare ------------------------------------------------------------------------------

def _load_summary(path) -> tuple:
    p = _run_dir_file(Path(path), "summary.json")
    if not p.is_file():
        raise ConfigError(f"summary not found: {p}")
    summary = json.loads(p.read_text())
    prof = p.parent / "profiles.csv"
    return summary, (read_csv(prof) if prof.is_file() else [])


def _parse_select(text: Optional[str]):
    if text is None:
        return None
    scheme, _, j = text.partition(":")
    return scheme, int(j or 0)


def compare_summaries(a: dict, b: dict, prof_a=(), prof_b=(), force: bool = False,
                      select_a=None, select_b=None) -> dict:
    """Per-metric time-0 differences and per-step profile deviations, ``b - a``."""
    if a.get("config_hash") != b.get("config_hash") and not force:
        raise ConfigError("config hashes differ (use --force to compare anyway)")
    if a["grid"]["horizon"] != b["grid"]["horizon"]:
        raise ConfigError("runs have different horizons; grids are not comparable")
    res_a = {(r["scheme"], r["j"]): r for r in a["results"]}
    res_b = {(r["scheme"], r["j"]): r for r in b["results"]}
    if select_a or select_b:
        pairs = [(select_a or select_b, select_b or select_a)]
    else:
        pairs = [(k, k) for k in res_a if k in res_b]
    if not pairs:
        raise ConfigError("no common (scheme, iteration) results to compare")
    report = {"config_hash_a": a.get("config_hash"), "config_hash_b": b.get("config_hash"),
              "hash_match": a.get("config_hash") == b.get("config_hash"),
              "theta_a": a.get("theta"), "theta_b": b.get("theta"), "pairs": []}
    for ka, kb in pairs:
        if ka not in res_a or kb not in res_b:
            raise ConfigError(f"result {ka} or {kb} not present")
        metrics = {}
        for m in (x.upper() for x in METRICS):
            va, vb = float(res_a[ka][m]), float(res_b[kb][m])
            metrics[m] = {"a": va, "b": vb, "abs_diff": vb - va, "rel_diff": relative_gap(va, vb)}
        entry = {"a": f"{ka[0]}:{ka[1]}", "b": f"{kb[0]}:{kb[1]}", "time0": metrics}
        dev = _profile_deviation(prof_a, prof_b, ka, kb)
        if dev:
            entry["profile_max_abs_dev"] = dev
        report["pairs"].append(entry)
    return report


def _profile_deviation(prof_a, prof_b, ka, kb) -> dict:
    def index(rows, key):
        out = {}
        for r in rows:
            if (r["scheme"], int(r["j"])) == key:
                out[(r["metric"], round(float(r["time"]), 9))] = float(r["mean"])
        return out
    ia, ib = index(prof_a, ka), index(prof_b, kb)
    dev = {}
    for key in set(ia) & set(ib):
        dev[key[0]] = max(dev.get(key[0], 0.0), abs(ib[key] - ia[key]))
    return dict(sorted(dev.items()))


def cmd_compare(args) -> int:
    a, pa = _load_summary(args.a)
    b, pb = _load_summary(args.b)
    report = compare_summaries(a, b, pa, pb, args.force, _parse_select(args.select_a),
                               _parse_select(args.select_b))
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# --- argument parsing -------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _run_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run")
    g.add_argument("--config", help="model JSON file (default: shipped parameters)")
    g.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. bank.theta=0 or clients.0.xi=0.1")
    g.add_argument("--zero-funding-spread", action="store_true", help="force the bank spread to 0")
    g.add_argument("--zero-default-intensity", action="store_true",
                   help="force all client intensities to 0")
    g.add_argument("--theta", type=int, default=5, help="pricing grid exponent (n = 2^theta)")
    g.add_argument("--paths", type=int, default=16384, help="outer market paths")
    g.add_argument("--inner", type=int, default=8, help="inner default branches per outer path")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--scheme", choices=("explicit", "picard", "both"), default="both")
    g.add_argument("--picard-iters", type=int, default=4)
    g.add_argument("--alpha", type=float, help="ES level for economic capital")
    g.add_argument("--hurdle", type=float, help="hurdle rate")
    g.add_argument("--cva-mode", choices=("intensity", "indicator"), default="intensity")
    g.add_argument("--out", help=f"output directory (default ${ENV_OUT} or ./pathxva-out)")
    t = p.add_argument_group("training")
    t.add_argument("--epochs", type=int, default=16)
    t.add_argument("--batch-size", type=int, default=4096)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--hidden", default="38", help="comma-separated hidden widths")
    t.add_argument("--lr-schedule", choices=("constant", "linear"), default="constant")
    t.add_argument("--es-mode", choices=("centered", "indicator"), default="centered")
    t.add_argument("--train-seed", type=int, default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pathxva", description="Path-dependent XVA by neural ABSDE regression.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _run_options()
    sub.add_parser("simulate", parents=[common], help="simulate and save a scenario cube")
    s = sub.add_parser("solve", parents=[common], help="CVA pre-pass and XVA schemes")
    s.add_argument("--cube", help="saved cube prefix (skips simulation)")
    s.add_argument("--validate", action="store_true", help="also write twin errors")
    s.add_argument("--bounds", action="store_true", help="also write global error bounds")
    s.add_argument("--plots", action="store_true", help="render PNG figures")
    s.add_argument("--save-cube", action="store_true")
    f = sub.add_parser("full", parents=[common], help="solve with validation, bounds and figures")
    f.add_argument("--no-validate", dest="validate", action="store_false")
    f.add_argument("--no-bounds", dest="bounds", action="store_false")
    f.add_argument("--no-plots", dest="plots", action="store_false")
    f.add_argument("--save-cube", action="store_true")
    v = sub.add_parser("validate", help="twin errors for a finished run directory")
    v.add_argument("run", help="run directory written by solve/full")
    v.add_argument("--out")
    v.add_argument("--plots", action="store_true")
    b = sub.add_parser("bounds", help="global bounds from a twin-error CSV")
    b.add_argument("twin", help="twin.csv")
    b.add_argument("--target", action="append", choices=("fva", "kva"))
    b.add_argument("--lipschitz-f", type=float)
    b.add_argument("--lipschitz-phi", type=float)
    b.add_argument("--out")
    c = sub.add_parser("compare", help="diff two summaries")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--force", action="store_true", help="compare despite differing config hashes")
    c.add_argument("--select-a", metavar="SCHEME[:J]")
    c.add_argument("--select-b", metavar="SCHEME[:J]")
    c.add_argument("--out", help="also write the report to this file")
    return parser


def run_config_from_args(args) -> RunConfig:
    overrides = list(args.overrides)
    raw_needed = args.zero_funding_spread or args.zero_default_intensity
    hidden = tuple(int(h) for h in str(args.hidden).split(",") if h.strip())
    try:
        train = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                            hidden=hidden, lr_schedule=args.lr_schedule, es_mode=args.es_mode,
                            seed=args.train_seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = args.out or os.environ.get(ENV_OUT) or "pathxva-out"
    run = RunConfig(config_path=args.config, overrides=tuple(overrides), theta=args.theta,
                    n_paths=args.paths, n_inner=args.inner, seed=args.seed, scheme=args.scheme,
                    picard_iters=args.picard_iters, alpha=args.alpha, hurdle=args.hurdle,
                    cva_mode=args.cva_mode, train=train, out=Path(out),
                    validate=getattr(args, "validate", False), bounds=getattr(args, "bounds", False),
                    plots=getattr(args, "plots", False), save_cube=getattr(args, "save_cube", False))
    if raw_needed:
        extra = []
        raw = run.effective_config()
        if args.zero_funding_spread:
            extra += ["bank.theta=0", "bank.lambda0=0", "bank.xi=0"]
        if args.zero_default_intensity:
            extra += [f"clients.{k}.{f}=0" for k in range(len(raw["clients"]))
                      for f in ("theta", "lambda0", "xi")]
        run.overrides = tuple(overrides + extra)
    return run


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command in ("simulate", "solve", "full"):
            run = run_config_from_args(args)
            return cmd_simulate(run, args) if args.command == "simulate" else cmd_solve(run, args)
        if args.command == "validate":
            return cmd_validate(args)
        if args.command == "bounds":
            args.target = args.target or ["fva", "kva"]
            return cmd_bounds(args)
        return cmd_compare(args)
    except ConfigError as exc:
        print(f"pathxva: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PhaseError as exc:
        cause = exc.cause
        if isinstance(cause, (ConfigError, FileNotFoundError)) or (
                isinstance(cause, ValueError) and not isinstance(cause, ArithmeticError)
                and exc.phase == "config"):
            print(f"pathxva: configuration error in phase {exc.phase}: {cause}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"pathxva: numerical failure in phase {exc.phase}: {type(cause).__name__}: {cause}",
              file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"pathxva: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
