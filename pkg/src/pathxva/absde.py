"""Explicit backward simulation/regression scheme for anticipated BSDEs.

The anticipated term is the conditional expected shortfall of a window sum
of per-step increments that may depend on the martingale part of the
solution.  Each backward step regresses, in this order,

1. every component of the explicit label ``Y_{i+1} + f(t_i, X_i, Y_{i+1}, rho_{i+1}) dt``;
2. updates the pathwise martingale ``M_i = M_{i+1} + Y_i - label``;
3. the VaR (pinball loss) and then the ES (least squares) of the window
   sum over steps ``i .. min(i + m, n) - 1``.

Heads at step ``i`` are warm-started from step ``i + 1``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .nn import Head, TrainConfig, TrainingDivergence, empirical_var_es, nn_regress, save_heads, tail_labels

logger = logging.getLogger(__name__)

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


class StateProvider(Protocol):
    n_samples: int

    def features(self, i: int) -> np.ndarray: ...


class PathArray:
    """State provider backed by a dense (samples, times, features) array."""

    def __init__(self, paths: np.ndarray):
        paths = np.asarray(paths, float)
        if paths.ndim == 2:
            paths = paths[:, :, None]
        self.paths = paths
        self.n_samples = paths.shape[0]

    def features(self, i: int) -> np.ndarray:
        return self.paths[:, i, :]


@dataclass(frozen=True)
class Schedule:
    """Uniform pricing grid seen by the solver."""

    n: int
    dt: float
    m: int

    def __post_init__(self):
        if self.n < 1 or self.m < 1 or self.dt <= 0:
            raise ValueError("invalid schedule")

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.dt

    @classmethod
    def from_grid(cls, grid) -> "Schedule":
        return cls(grid.n, grid.dt, grid.m)


@dataclass
class AbsdeProblem:
    """Vector ABSDE with an expected-shortfall anticipated term.

    ``driver(i, t, state, y, rho)`` evaluates the generator on all samples
    at step ``i``.  ``increment(i, state, dm1)`` returns the per-step
    contribution to the anticipated window, ``dm1`` being the increment
    ``M_{i+1} - M_i`` of the first martingale component.  ``labels`` may
    replace the default explicit label map, and ``deflator(i, state)``
    weights window terms (the window at ``i`` sums ``w_k inc_k / w_i``).
    """

    dim: int
    terminal: Callable
    driver: Callable
    increment: Optional[Callable] = None
    alpha: float = 0.85
    lipschitz_f: float = 0.0
    lipschitz_phi: float = 0.0
    labels: Optional[Callable] = None
    deflator: Optional[Callable] = None
    names: Sequence[str] = ()

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be >= 1")
        if not 0.5 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (1/2, 1)")
        if self.lipschitz_f < 0 or self.lipschitz_phi < 0:
            raise ValueError("Lipschitz constants must be non-negative")
        if not self.names:
            self.names = tuple(f"y{k}" for k in range(self.dim))

    def label_map(self, i, t, dt, state, y_next, rho_next):
        if self.labels is not None:
            return self.labels(i, t, dt, state, y_next, rho_next)
        return y_next + self.driver(i, t, state, y_next, rho_next) * dt


class RollingWindow:
    """Per-path sum of the last ``m`` pushed vectors, O(1) per update.

    Pushes happen in decreasing time, so after pushing step ``i`` the sum
    covers steps ``i .. min(i + m, n) - 1``.
    """

    def __init__(self, m: int, n_paths: int):
        if m < 1:
            raise ValueError("window length must be >= 1")
        self.m = m
        self.buffer = np.zeros((m, n_paths))
        self.count = 0
        self.total = np.zeros(n_paths)

    def push(self, values: np.ndarray) -> np.ndarray:
        slot = self.count % self.m
        if self.count >= self.m:
            self.total -= self.buffer[slot]
        self.buffer[slot] = values
        self.total += values
        self.count += 1
        return self.total

    def direct_sum(self) -> np.ndarray:
        k = min(self.count, self.m)
        order = [(self.count - 1 - j) % self.m for j in range(k)]
        return self.buffer[order].sum(axis=0) if k else np.zeros_like(self.total)


def window_labels(increments: np.ndarray, i: int, m: int, n: int) -> np.ndarray:
    """``sum_{k=i}^{min(i+m, n)-1} increments[k]`` via rolling updates from ``n - 1``."""
    increments = np.asarray(increments, float)
    win = RollingWindow(m, increments.shape[1] if increments.ndim > 1 else 1)
    total = np.zeros(win.total.shape)
    for k in range(n - 1, i - 1, -1):
        total = win.push(np.atleast_1d(increments[k]))
    return total.copy() if increments.ndim > 1 else float(total[0])


def direct_window_sum(increments: np.ndarray, i: int, m: int, n: int) -> np.ndarray:
    return np.asarray(increments, float)[i:min(i + m, n)].sum(axis=0)


@dataclass
class StepHeads:
    y: list
    var: Optional[Head] = None
    es: Optional[Head] = None


@dataclass
class SolveOutput:
    """Trained heads and pathwise evaluations on the training samples.

    Arrays are indexed by pricing step: ``y`` is (n+1, samples, dim),
    ``rho``/``var`` are (n+1, samples), ``martingale`` is (n+1, samples, dim).
    Row 0 holds the time-0 quantities (identical across samples).
    """

    schedule: Schedule
    heads: dict
    y: np.ndarray
    rho: np.ndarray
    var: np.ndarray
    martingale: np.ndarray
    y0: np.ndarray
    rho0: float
    var0: float
    names: Sequence[str] = ()
    labels0: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def train_losses(self, k: int = 0) -> np.ndarray:
        out = np.full(self.schedule.n + 1, np.nan)
        for i, h in self.heads.items():
            out[i] = h.y[k].train_loss
        if self.labels0 is not None:
            out[0] = float(np.mean((self.labels0[:, k] - self.y0[k]) ** 2))
        return out


def _head_cfg(cfg: TrainConfig, n_samples: int, seed: int, **kw) -> TrainConfig:
    return cfg.but(batch_size=min(cfg.batch_size, n_samples), seed=seed, **kw)


def _fit(step, name, x, y, cfg, init):
    try:
        head = nn_regress(x, y, cfg, init=None if init is None else init.params)
    except TrainingDivergence as exc:
        raise TrainingDivergence(f"step {step}, head {name}: {exc}") from exc
    head.meta = {"step": int(step), "target": name}
    return head


def tail_heads(step, x, labels, alpha, cfg, prev: Optional[StepHeads], seed):
    """VaR head by pinball loss, then ES head by least squares on transformed labels."""
    n = len(labels)
    qcfg = _head_cfg(cfg, n, seed + 2, loss="qle", alpha=alpha)
    var_head = _fit(step, "var", x, labels, qcfg, prev.var if prev else None)
    var = var_head(x)
    ecfg = _head_cfg(cfg, n, seed + 3, loss="ls")
    es_head = _fit(step, "es", x, tail_labels(labels, var, alpha, cfg.es_mode), ecfg,
                   prev.es if prev else None)
    return var_head, es_head, var, es_head(x)


def solve_explicit(problem: AbsdeProblem, state, schedule: Schedule, cfg: TrainConfig,
                   store_martingale: bool = True) -> SolveOutput:
    """Backward loop ``i = n-1 .. 1`` with regressions, then sample means at ``t_0``."""
    n, dt, m = schedule.n, schedule.dt, schedule.m
    times = schedule.times
    N, l = state.n_samples, problem.dim
    y = np.zeros((n + 1, N, l))
    rho = np.zeros((n + 1, N))
    var = np.zeros((n + 1, N))
    mart = np.zeros((n + 1, N, l)) if store_martingale else None
    y[n] = problem.terminal(state)
    m_next = np.zeros((N, l))
    window = RollingWindow(m, N)
    heads, prev = {}, None
    labels0 = None

    for i in range(n - 1, -1, -1):
        xi = np.asarray(problem.label_map(i, times[i], dt, state, y[i + 1], rho[i + 1]), float)
        xi = xi.reshape(N, l)
        if i > 0:
            x = state.features(i)
            step_heads = StepHeads([])
            for k in range(l):
                hcfg = _head_cfg(cfg, N, cfg.seed + 7919 * i + 4 * k, loss="ls")
                h = _fit(i, problem.names[k], x, xi[:, k], hcfg, prev.y[k] if prev else None)
                step_heads.y.append(h)
                y[i, :, k] = h(x)
        else:
            labels0 = xi
            y[0] = xi.mean(axis=0)
        m_cur = m_next + y[i] - xi
        if mart is not None:
            mart[i] = m_cur
        if problem.increment is not None:
            inc = np.asarray(problem.increment(i, state, m_next[:, 0] - m_cur[:, 0]), float)
            w = problem.deflator(i, state) if problem.deflator is not None else None
            total = window.push(inc if w is None else w * inc)
            phi = total if w is None else total / w
            if i > 0:
                var_head, es_head, var[i], rho[i] = tail_heads(
                    i, x, phi, problem.alpha, cfg, prev, cfg.seed + 7919 * i + 4 * l)
                step_heads.var, step_heads.es = var_head, es_head
            else:
                v0, e0 = empirical_var_es(phi, problem.alpha)
                var[0], rho[0] = v0, e0
        if i > 0:
            heads[i] = step_heads
            prev = step_heads
            logger.debug("step %d: %s", i, [h.train_loss for h in step_heads.y])
        m_next = m_cur

    return SolveOutput(schedule, heads, y, rho, var, mart, y[0, 0].copy(), float(rho[0, 0]),
                       float(var[0, 0]), tuple(problem.names), labels0)


def time0_estimate(problem: AbsdeProblem, out: SolveOutput, state) -> np.ndarray:
    """Sample mean of the explicit label at ``t_0`` (no regression: ``X_0`` is deterministic)."""
    s = out.schedule
    xi = problem.label_map(0, 0.0, s.dt, state, out.y[1], out.rho[1])
    return np.asarray(xi, float).reshape(state.n_samples, problem.dim).mean(axis=0)


def summary_rows(values: np.ndarray, times: np.ndarray, name: str, **extra) -> list:
    """Per-step mean, std and quantile band of pathwise values (steps x samples)."""
    rows = []
    for i, t in enumerate(times):
        v = values[i]
        q = np.quantile(v, QUANTILES)
        rows.append({**extra, "metric": name, "step": i, "time": float(t), "mean": float(v.mean()),
                     "std": float(v.std()), **{f"q{int(100 * a):02d}": float(x) for a, x in zip(QUANTILES, q)}})
    return rows


def write_csv(path, rows: list, header: Optional[dict] = None):
    """CSV with optional ``# key=value`` comment lines before the header row."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        for k, v in (header or {}).items():
            fh.write(f"# {k}={v}\n")
        if not rows:
            return path
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def save_solution(out: SolveOutput, prefix, header: Optional[dict] = None):
    """Heads manifest plus a per-step summary CSV of Y components and rho."""
    prefix = Path(prefix)
    heads = []
    for i in sorted(out.heads):
        h = out.heads[i]
        heads.extend(h.y)
        heads.extend(x for x in (h.var, h.es) if x is not None)
    save_heads(prefix.with_name(prefix.name + "_heads"), heads)
    times = out.schedule.times
    rows = []
    for k, name in enumerate(out.names):
        rows += summary_rows(out.y[:, :, k], times, name)
    rows += summary_rows(out.rho, times, "rho")
    return write_csv(prefix.with_name(prefix.name + "_summary.csv"), rows, header)
