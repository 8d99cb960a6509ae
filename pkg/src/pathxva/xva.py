"""CVA, FVA, KVA and economic capital on a hierarchical scenario cube.

All amounts at ``t_i`` are in time-``t_i`` domestic units; one-step cash
flows are discounted with the pathwise factor ``D_i = beta_{i+1} / beta_i``
and the one-year loss window is accumulated on ``beta``-deflated
increments.

Two schemes are provided.  The explicit one uses time-``t_{i+1}`` capital
and KVA inside the step-``i`` FVA/KVA labels and is run through the
generic solver of :mod:`pathxva.absde`.  The Picard one starts from zero
capital and re-solves the whole backward pass ``J`` times, each pass
reading the previous pass at the same date.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .absde import (AbsdeProblem, RollingWindow, Schedule, StepHeads, _fit, _head_cfg,
                    solve_explicit, summary_rows, tail_heads)
from .market import ScenarioCube
from .nn import TrainConfig, empirical_var_es

logger = logging.getLogger(__name__)

METRICS = ("cva", "fva", "kva", "ec")


@dataclass(frozen=True)
class XvaConfig:
    alpha: float = 0.85
    hurdle_rate: float = 0.10
    scheme: str = "explicit"
    picard_iters: int = 4
    cva_mode: str = "intensity"

    def __post_init__(self):
        if not 0.5 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (1/2, 1)")
        if self.hurdle_rate < 0:
            raise ValueError("hurdle rate must be non-negative")
        if self.picard_iters < 1:
            raise ValueError("Picard iteration count must be >= 1")
        if self.scheme not in ("explicit", "picard"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.cva_mode not in ("indicator", "intensity"):
            raise ValueError(f"unknown CVA label mode {self.cva_mode!r}")


class RunningLossWindow(RollingWindow):
    """Rolling one-year window of deflated loss increments per path."""


# --- elementary maps ---------------------------------------------------------

def funding_term(dt, spread, alive, mtm, cva, fva_ref, capital):
    """``dt * spread * (sum_c J MtM - CVA - FVA - capital)^+``."""
    exposure = np.einsum("sc,sc->s", alive, mtm)
    return dt * spread * np.maximum(exposure - cva - fva_ref - capital, 0.0)


def settlement(mtm, defaults):
    """Positive exposure of names defaulting in ``(t_i, t_{i+1}]``."""
    return np.einsum("sc,sc->s", np.maximum(mtm, 0.0), defaults)


def loss_increment(disc, cva_i, cva_next, settled, fva_i, fva_next, funding):
    """One-step loss in time-``t_i`` units.

    ``D CVA_{i+1} - CVA_i + D settled + D FVA_{i+1} - FVA_i + funding``.
    """
    return disc * cva_next - cva_i + disc * settled + disc * fva_next - fva_i + funding


def fva_label(disc, fva_next, funding):
    return disc * fva_next + funding


def kva_label(disc, dt, hurdle, kva_next, capital):
    return np.exp(-hurdle * dt) * disc * (kva_next + hurdle * dt * capital)


def xva_driver(t, y, rho, spread, alive, mtm, cva, hurdle):
    """Generator for ``Y = (FVA, e^{-r_h t} KVA)`` with ES argument ``rho``."""
    y1, y2 = y[..., 0], y[..., 1]
    exposure = np.einsum("...c,...c->...", alive, mtm)
    f1 = spread * np.maximum(exposure - cva - y1 - np.maximum(rho, np.exp(hurdle * t) * y2), 0.0)
    f2 = hurdle * np.maximum(np.exp(-hurdle * t) * rho, y2)
    return np.stack([f1, f2], axis=-1)


# --- per-step views of the cube -----------------------------------------------

class XvaState:
    """Sample-level inputs of the XVA equations, cached one step at a time."""

    def __init__(self, cube: ScenarioCube):
        self.cube = cube
        self.n_samples = cube.n_samples
        self._cache = {}

    def step(self, i: int) -> dict:
        if i not in self._cache:
            if len(self._cache) > 3:
                self._cache.pop(max(self._cache))
            c = self.cube
            d = {"alive": c.alive(i), "mtm": c.mtm_samples(i), "spread": c.bank_spread(i),
                 "beta": c.discount_samples(i)}
            if i < c.grid.n:
                d["disc"] = c.outer(c.discount[:, i + 1] / c.discount[:, i])
                d["defaults"] = c.defaults_between(i)
                d["dhaz"] = c.outer(c.cum_hazard[:, i + 1] - c.cum_hazard[:, i])
            self._cache[i] = d
        return self._cache[i]

    def features(self, i: int) -> np.ndarray:
        return self.cube.features(i)


# --- results -------------------------------------------------------------------

@dataclass
class CvaResult:
    values: np.ndarray     # (n+1, samples)
    heads: dict
    cva0: float
    labels0: np.ndarray
    mode: str


@dataclass
class XvaSurfaces:
    """Pathwise XVA values per pricing step (rows) and sample (columns)."""

    scheme: str
    iteration: int
    times: np.ndarray
    cva: np.ndarray
    fva: np.ndarray
    kva: np.ndarray
    var: np.ndarray
    ec: np.ndarray
    heads: dict = field(default_factory=dict)
    time0: dict = field(default_factory=dict)
    train_loss: dict = field(default_factory=dict)

    def profile_rows(self, theta: int) -> list:
        rows = []
        for name in METRICS:
            rows += summary_rows(getattr(self, name), self.times, name.upper(), scheme=self.scheme,
                                 theta=theta, j=self.iteration)
        return rows

    def drop_paths(self):
        """Release pathwise arrays (keeps heads and time-0 values)."""
        for name in ("cva", "fva", "kva", "var", "ec"):
            setattr(self, name, None)


# --- CVA -------------------------------------------------------------------------

def cva_cashflows(state: XvaState, i: int, mode: str) -> np.ndarray:
    """Default losses over ``(t_i, t_{i+1}]`` discounted to ``t_i``."""
    s, s1 = state.step(i), state.step(i + 1)
    exposure = np.maximum(s1["mtm"], 0.0)
    if mode == "indicator":
        loss = np.einsum("sc,sc->s", exposure, s["defaults"])
    else:
        loss = np.einsum("sc,sc,sc->s", s["alive"], exposure, -np.expm1(-s["dhaz"]))
    return s["disc"] * loss


def compute_cva(cube: ScenarioCube, cfg: XvaConfig, train: TrainConfig) -> CvaResult:
    """Least-squares regression of cumulative discounted default losses."""
    if cfg.cva_mode == "intensity" and not np.isfinite(cube.cum_hazard).all():
        raise ValueError("intensity-mode CVA needs integrated intensities")
    state = XvaState(cube)
    n, N = cube.grid.n, cube.n_samples
    values = np.zeros((n + 1, N))
    label = np.zeros(N)
    heads, prev = {}, None
    for i in range(n - 1, -1, -1):
        label = cva_cashflows(state, i, cfg.cva_mode) + state.step(i)["disc"] * label
        if i == 0:
            values[0] = label.mean()
            break
        x = state.features(i)
        h = _fit(i, "cva", x, label, _head_cfg(train, N, train.seed + 104729 + 13 * i, loss="ls"), prev)
        heads[i] = prev = h
        values[i] = h(x)
    return CvaResult(values, heads, float(values[0, 0]), label, cfg.cva_mode)


# --- explicit scheme -----------------------------------------------------------------

def xva_problem(cube: ScenarioCube, cva: CvaResult, cfg: XvaConfig) -> AbsdeProblem:
    """The (FVA, KVA) system with its loss-window increment, for :func:`solve_explicit`."""
    r = cfg.hurdle_rate

    def labels(i, t, dt, state, y_next, rho_next):
        s = state.step(i)
        capital = np.maximum(rho_next, y_next[:, 1])
        fund = funding_term(dt, s["spread"], s["alive"], s["mtm"], cva.values[i], y_next[:, 0], capital)
        return np.stack([fva_label(s["disc"], y_next[:, 0], fund),
                         kva_label(s["disc"], dt, r, y_next[:, 1], capital)], axis=1)

    def increment(i, state, dm1):
        s = state.step(i)
        settled = settlement(s["mtm"], s["defaults"])
        return s["disc"] * cva.values[i + 1] - cva.values[i] + s["disc"] * settled + dm1

    def driver(i, t, state, y, rho):
        s = state.step(i)
        scaled = np.stack([y[:, 0], np.exp(-r * t) * y[:, 1]], axis=1)
        return xva_driver(t, scaled, rho, s["spread"], s["alive"], s["mtm"], cva.values[i], r)

    return AbsdeProblem(
        dim=2, terminal=lambda state: np.zeros((state.n_samples, 2)), driver=driver,
        increment=increment, alpha=cfg.alpha, lipschitz_f=0.0, lipschitz_phi=1.0,
        labels=labels, deflator=lambda i, state: state.step(i)["beta"], names=("fva", "kva"))


def solve_xva_explicit(cube: ScenarioCube, cva: CvaResult, cfg: XvaConfig,
                       train: TrainConfig) -> XvaSurfaces:
    state = XvaState(cube)
    out = solve_explicit(xva_problem(cube, cva, cfg), state, Schedule.from_grid(cube.grid), train,
                         store_martingale=False)
    surf = XvaSurfaces("explicit", 0, cube.grid.times, cva.values, out.y[:, :, 0], out.y[:, :, 1],
                       out.var, out.rho)
    surf.heads = {"cva": cva.heads, "xva": out.heads}
    surf.time0 = {"CVA": cva.cva0, "FVA": float(out.y0[0]), "KVA": float(out.y0[1]), "EC": out.rho0,
                  "VaR": out.var0}
    surf.train_loss = {"fva": out.train_losses(0), "kva": out.train_losses(1)}
    return surf


# --- Picard scheme --------------------------------------------------------------------

def solve_xva_picard(cube: ScenarioCube, cva: CvaResult, cfg: XvaConfig, train: TrainConfig,
                     keep_paths: str = "last", on_iteration=None) -> list:
    """Iterations ``j = 1..J``; returns one :class:`XvaSurfaces` per iteration.

    ``keep_paths`` = "last" keeps pathwise arrays of the final iteration only,
    "all" keeps every iteration.  ``on_iteration(surf)`` is called while the
    pathwise arrays of each iteration are still available.
    """
    state = XvaState(cube)
    grid = cube.grid
    n, N, dt, r = grid.n, cube.n_samples, grid.dt, cfg.hurdle_rate
    prev_iter: Optional[XvaSurfaces] = None
    results = []
    for j in range(1, cfg.picard_iters + 1):
        t0 = time.perf_counter()
        fva = np.zeros((n + 1, N))
        kva = np.zeros((n + 1, N))
        var = np.zeros((n + 1, N))
        ec = np.zeros((n + 1, N))
        window = RunningLossWindow(grid.m, N)
        heads = {}
        warm = prev_iter.heads["xva"].get(n - 1) if prev_iter is not None else None
        loss = {"fva": np.full(n + 1, np.nan), "kva": np.full(n + 1, np.nan)}
        for i in range(n - 1, -1, -1):
            s = state.step(i)
            if j == 1:
                fva_ref, kva_ref, ec_ref = fva[i + 1], kva[i + 1], 0.0
            else:
                fva_ref, kva_ref, ec_ref = prev_iter.fva[i], prev_iter.kva[i], prev_iter.ec[i]
            capital = np.maximum(ec_ref, kva_ref)
            fund = funding_term(dt, s["spread"], s["alive"], s["mtm"], cva.values[i], fva_ref, capital)
            lab_f = fva_label(s["disc"], fva[i + 1], fund)
            lab_k = kva_label(s["disc"], dt, r, kva[i + 1], capital)
            if i > 0:
                x = state.features(i)
                base = train.seed + 7919 * i + 1_000_003 * j
                hf = _fit(i, "fva", x, lab_f, _head_cfg(train, N, base, loss="ls"),
                          warm.y[0] if warm else None)
                hk = _fit(i, "kva", x, lab_k, _head_cfg(train, N, base + 4, loss="ls"),
                          warm.y[1] if warm else None)
                fva[i], kva[i] = hf(x), hk(x)
                loss["fva"][i], loss["kva"][i] = hf.train_loss, hk.train_loss
                step_heads = StepHeads([hf, hk])
            else:
                fva[0], kva[0] = lab_f.mean(), lab_k.mean()
                loss["fva"][0] = np.mean((lab_f - fva[0]) ** 2)
                loss["kva"][0] = np.mean((lab_k - kva[0]) ** 2)
            settled = settlement(s["mtm"], s["defaults"])
            inc = loss_increment(s["disc"], cva.values[i], cva.values[i + 1], settled, fva[i],
                                 fva[i + 1], fund)
            total = window.push(s["beta"] * inc)
            phi = total / s["beta"]
            if i > 0:
                vh, eh, var[i], ec[i] = tail_heads(i, x, phi, cfg.alpha, train, warm, base + 8)
                step_heads.var, step_heads.es = vh, eh
                heads[i] = warm = step_heads
            else:
                var[0], ec[0] = empirical_var_es(phi, cfg.alpha)
        surf = XvaSurfaces("picard", j, grid.times, cva.values, fva, kva, var, ec,
                           heads={"cva": cva.heads, "xva": heads}, train_loss=loss)
        surf.time0 = {"CVA": cva.cva0, "FVA": float(fva[0, 0]), "KVA": float(kva[0, 0]),
                      "EC": float(ec[0, 0]), "VaR": float(var[0, 0])}
        logger.info("picard j=%d FVA0=%.6g (%.1fs)", j, surf.time0["FVA"], time.perf_counter() - t0)
        if on_iteration is not None:
            on_iteration(surf)
        if prev_iter is not None and keep_paths != "all":
            prev_iter.drop_paths()
        results.append(surf)
        prev_iter = surf
    return results


def solve_xva(cube: ScenarioCube, cfg: XvaConfig, train: TrainConfig, cva: Optional[CvaResult] = None):
    """CVA pre-pass followed by the configured scheme; always returns a list of surfaces."""
    cva = cva if cva is not None else compute_cva(cube, cfg, train)
    if cfg.scheme == "explicit":
        return [solve_xva_explicit(cube, cva, cfg, train)]
    return solve_xva_picard(cube, cva, cfg, train)


# --- persistence of trained heads ----------------------------------------------------------

def collect_heads(cva: CvaResult, surfaces: list) -> list:
    """All trained heads, tagged with scheme and iteration in their metadata."""
    out = []
    for i in sorted(cva.heads):
        h = cva.heads[i]
        h.meta = {**h.meta, "scheme": "cva", "j": 0}
        out.append(h)
    for surf in surfaces:
        for i in sorted(surf.heads["xva"]):
            sh = surf.heads["xva"][i]
            for h in [*sh.y, sh.var, sh.es]:
                if h is not None:
                    h.meta = {**h.meta, "scheme": surf.scheme, "j": surf.iteration}
                    out.append(h)
    return out


def explicit_from_heads(cube: ScenarioCube, heads: list, time0: dict, cfg: XvaConfig,
                        train_loss0: Optional[dict] = None):
    """Re-evaluate saved explicit-scheme heads on ``cube``; returns ``(cva, surfaces)``."""
    grid = cube.grid
    n, N = grid.n, cube.n_samples
    table = {}
    for h in heads:
        if h.meta.get("scheme") in ("cva", "explicit"):
            table[(h.meta["target"], int(h.meta["step"]))] = h
    arrays = {k: np.zeros((n + 1, N)) for k in ("cva", "fva", "kva", "var", "ec")}
    names = {"cva": "cva", "fva": "fva", "kva": "kva", "var": "var", "ec": "es"}
    for i in range(1, n):
        x = cube.features(i)
        for key, target in names.items():
            if (target, i) not in table:
                raise ValueError(f"saved heads lack {target!r} at step {i}")
            arrays[key][i] = table[(target, i)](x)
    for key, name in (("cva", "CVA"), ("fva", "FVA"), ("kva", "KVA"), ("ec", "EC")):
        arrays[key][0] = time0[name]
    arrays["var"][0] = time0.get("VaR", np.nan)
    cva_heads = {i: table[("cva", i)] for i in range(1, n)}
    cva = CvaResult(arrays["cva"], cva_heads, float(time0["CVA"]), None, cfg.cva_mode)
    xva_heads = {i: StepHeads([table[("fva", i)], table[("kva", i)]], table[("var", i)], table[("es", i)])
                 for i in range(1, n)}
    surf = XvaSurfaces("explicit", 0, grid.times, arrays["cva"], arrays["fva"], arrays["kva"],
                       arrays["var"], arrays["ec"], heads={"cva": cva_heads, "xva": xva_heads},
                       time0=dict(time0))
    for key in ("fva", "kva"):
        loss = np.full(n + 1, np.nan)
        for i in range(1, n):
            loss[i] = table[(key, i)].train_loss
        if train_loss0 is not None:
            loss[0] = train_loss0[key]
        surf.train_loss[key] = loss
    return cva, surf
