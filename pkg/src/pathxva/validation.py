"""A-posteriori error control.

Local errors come from twin Monte Carlo: with two successors of the same
state, drawn independently given that state,

    E[(Y - E[xi | X])^2] = E[Y^2 - Y (xi1 + xi2) + xi1 xi2],

which needs no nested simulation.  Global bounds propagate local errors
backwards through the non-negative polynomial weights ``P``/``Q``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .market import ScenarioCube, simulate_successors
from .xva import CvaResult, XvaConfig, XvaSurfaces, funding_term, fva_label, kva_label

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


# --- twin estimator ---------------------------------------------------------------

def twin_terms(y_hat, xi1, xi2) -> np.ndarray:
    y_hat, xi1, xi2 = (np.asarray(a, float) for a in (y_hat, xi1, xi2))
    return y_hat * y_hat - y_hat * (xi1 + xi2) + xi1 * xi2


def twin_local_error(y_hat, xi1, xi2, n_inner: int = 1):
    """Estimate of ``E[(y_hat - E[xi | X])^2]`` and its standard error.

    Samples sharing an outer path (``n_inner`` consecutive rows) are
    averaged first so the standard error accounts for their dependence.
    """
    terms = twin_terms(y_hat, xi1, xi2)
    if terms.ndim > 1:
        terms = terms.sum(axis=1)
    if len(terms) % n_inner:
        raise ValueError("sample count is not a multiple of the inner count")
    clusters = terms.reshape(-1, n_inner).mean(axis=1)
    k = len(clusters)
    se = float(clusters.std(ddof=1) / np.sqrt(k)) if k > 1 else float("nan")
    return float(terms.mean()), se


@dataclass
class TwinReport:
    """Per-step twin estimates for one regressed quantity."""

    target: str
    steps: np.ndarray
    times: np.ndarray
    twin: np.ndarray          # signed estimate of E[eps^2]
    stderr: np.ndarray
    train_mse: np.ndarray     # L2 training loss of the same head
    norm: np.ndarray          # L2 norm of the regressed values

    def normalized(self):
        """(twin RMSE, training RMSE) divided by the L2 norm where it exceeds the floor."""
        ok = self.norm > NORM_FLOOR
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(ok, np.sqrt(np.maximum(self.twin, 0.0)) / self.norm, np.nan)
            l = np.where(ok, np.sqrt(self.train_mse) / self.norm, np.nan)
        return t, l

    def rows(self) -> list:
        nt, nl = self.normalized()
        out = []
        for k in range(len(self.steps)):
            out.append({"target": self.target, "step": int(self.steps[k]), "time": float(self.times[k]),
                        "twin_mse": float(self.twin[k]), "twin_stderr": float(self.stderr[k]),
                        "twin_rmse": float(np.sqrt(max(self.twin[k], 0.0))),
                        "train_mse": float(self.train_mse[k]), "value_l2": float(self.norm[k]),
                        "twin_rmse_normalized": float(nt[k]), "train_rmse_normalized": float(nl[k])})
        return out

    def below_training_loss(self, n_sigma: float = 3.0) -> np.ndarray:
        """Per step: twin estimate not above the training loss at ``n_sigma``."""
        slack = n_sigma * np.nan_to_num(self.stderr) + 1e-12 * np.maximum(self.train_mse, 1.0)
        return self.twin - slack <= self.train_mse


def _successor_features(cube: ScenarioCube, succ) -> np.ndarray:
    return np.concatenate([cube.outer(succ.diffusions), succ.alive_next], axis=1)


def xva_twin_report(cube: ScenarioCube, cva: CvaResult, surf: XvaSurfaces, cfg: XvaConfig,
                    seed: int, steps: Optional[Sequence[int]] = None) -> dict:
    """Twin local errors of the explicit FVA and KVA regressions.

    Labels on each branch are built with the engine's own label maps, so the
    estimate targets exactly the regression problem that was solved.
    """
    if surf.scheme != "explicit" or surf.fva is None:
        raise ValueError("twin report needs pathwise explicit-scheme surfaces")
    grid = cube.grid
    n, dt, r = grid.n, grid.dt, cfg.hurdle_rate
    heads = surf.heads["xva"]
    steps = list(range(n)) if steps is None else list(steps)
    acc = {k: {"twin": [], "se": [], "mse": [], "norm": []} for k in ("fva", "kva")}
    for i in steps:
        branches = simulate_successors(cube, i, seed)
        alive, mtm = cube.alive(i), cube.mtm_samples(i)
        spread = cube.bank_spread(i)
        xi = {"fva": [], "kva": []}
        for succ in branches:
            disc = cube.outer(succ.discount)
            if i + 1 < n:
                x1 = _successor_features(cube, succ)
                h = heads[i + 1]
                f_next, k_next, ec_next = h.y[0](x1), h.y[1](x1), h.es(x1)
            else:
                f_next = k_next = ec_next = np.zeros(cube.n_samples)
            capital = np.maximum(ec_next, k_next)
            fund = funding_term(dt, spread, alive, mtm, cva.values[i], f_next, capital)
            xi["fva"].append(fva_label(disc, f_next, fund))
            xi["kva"].append(kva_label(disc, dt, r, k_next, capital))
        for name, values in (("fva", surf.fva), ("kva", surf.kva)):
            y_hat = values[i]
            est, se = twin_local_error(y_hat, xi[name][0], xi[name][1], cube.n_inner)
            a = acc[name]
            a["twin"].append(est)
            a["se"].append(se)
            a["mse"].append(surf.train_loss[name][i])
            a["norm"].append(float(np.sqrt(np.mean(y_hat ** 2))))
        logger.debug("twin step %d done", i)
    steps_arr = np.array(steps)
    return {name: TwinReport(name, steps_arr, grid.times[steps_arr], np.array(a["twin"]),
                             np.array(a["se"]), np.array(a["mse"]), np.array(a["norm"]))
            for name, a in acc.items()}


def xva_lipschitz_estimate(cube: ScenarioCube, hurdle_rate: float, quantile: float = 0.99) -> float:
    """Heuristic Lipschitz constant of the XVA driver in ``y``.

    The funding part has slope ``spread * (1 + e^{r_h T})``; the spread is
    unbounded, so its ``quantile`` across paths and steps stands in for a bound.
    """
    spread = float(np.quantile(cube.diffusions[:, :, -1], quantile))
    return spread * (1.0 + float(np.exp(hurdle_rate * cube.grid.horizon))) + hurdle_rate


# --- polynomial weights -----------------------------------------------------------------

@dataclass
class PolyTables:
    """``p0[i], p1[i], q0[i], q1[i]`` for ``i = 1..n`` (index 0 unused, NaN)."""

    x: float
    lam_phi: float
    alpha: float
    p0: np.ndarray
    p1: np.ndarray
    q0: np.ndarray
    q1: np.ndarray

    @property
    def n(self) -> int:
        return len(self.p0) - 1


def _check_poly_args(x, lam_phi, alpha):
    if x < 0:
        raise ValueError("x must be non-negative")
    if lam_phi < 0:
        raise ValueError("Lambda_Phi must be non-negative")
    if not 0.5 < alpha < 1.0:
        raise ValueError("alpha must lie in (1/2, 1)")


def poly_tables(x: float, lam_phi: float, alpha: float, n: int) -> PolyTables:
    """Weights generated by the backward recursions (``n >= 1``)."""
    _check_poly_args(x, lam_phi, alpha)
    if n < 1:
        raise ValueError("n must be >= 1")
    a = lam_phi / (1.0 - alpha)
    p0, p1, q0, q1 = (np.full(n + 1, np.nan) for _ in range(4))
    p0[1], p1[1], q0[1], q1[1] = 1.0, a, 0.0, 1.0
    for i in range(2, n + 1):
        p0[i] = (1 + x) * p0[i - 1] + x * p1[i - 1]
        p1[i] = 2 * a * p0[i]
        q0[i] = (1 + x) * q0[i - 1] + x * q1[i - 1]
        q1[i] = 2 * a * q0[i]
    return PolyTables(x, lam_phi, alpha, p0, p1, q0, q1)


def poly_closed_form(x: float, lam_phi: float, alpha: float, n: int) -> PolyTables:
    _check_poly_args(x, lam_phi, alpha)
    a = lam_phi / (1.0 - alpha)
    i = np.arange(2, n + 1)
    g = (1 + (1 + 2 * a) * x) ** (i - 2)
    head = 1 + (1 + a) * x
    p0, p1, q0, q1 = (np.full(n + 1, np.nan) for _ in range(4))
    p0[1], p1[1], q0[1], q1[1] = 1.0, a, 0.0, 1.0
    p0[2:] = head * g
    p1[2:] = 2 * a * head * g
    q0[2:] = x * g
    q1[2:] = 2 * a * x * g
    return PolyTables(x, lam_phi, alpha, p0, p1, q0, q1)


def lemma_sides(x: float, m: int, i: int, lam_phi: float, alpha: float) -> dict:
    """Left and right sides of the six weight inequalities at index ``i``.

    The ratio-type items are compared after multiplying through by
    ``Lambda_Phi`` so ``Lambda_Phi = 0`` is allowed.  Items outside their
    range of validity map to ``None``.
    """
    if m < 1 or i < 1:
        raise ValueError("need m >= 1 and i >= 1")
    t = poly_tables(x, lam_phi, alpha, i + 1)
    lam, c = lam_phi, 1.0 - alpha
    out = {
        "i": ((1 + x) * t.p0[i] + x * t.p1[i], t.p0[i + 1]),
        "ii": ((1 + x) * t.q0[i] + x * t.q1[i], t.q0[i + 1]),
        "iii": None, "iv": None, "v": None, "vi": None,
    }
    if i <= m:
        sp = np.sum(t.p0[1:i] + t.p1[1:i])
        sq = np.sum(t.q0[1:i] + t.q1[1:i])
        out["iii"] = (lam * (t.p0[i] + x * sp), c * t.p1[i])
        out["iv"] = (lam * (t.q0[i] + x * sq), c * t.q1[i])
    else:
        sp = np.sum(t.p0[i - m:i] + t.p1[i - m:i])
        sq = np.sum(t.q0[i - m:i] + t.q1[i - m:i])
        out["v"] = (lam * (t.p0[i] + t.p0[i - m] + x * sp), c * t.p1[i])
        out["vi"] = (lam * (t.q0[i] + t.q0[i - m] + x * sq), c * t.q1[i])
    return out


def lemma_inequalities(x: float, m: int, i: int, lam_phi: float, alpha: float,
                       rtol: float = 1e-12) -> dict:
    """Six booleans (``None`` where an item does not apply at ``i``)."""
    res = {}
    for k, sides in lemma_sides(x, m, i, lam_phi, alpha).items():
        if sides is None:
            res[k] = None
        else:
            lhs, rhs = sides
            res[k] = bool(lhs <= rhs + rtol * max(abs(lhs), abs(rhs), 1e-300))
    return res


# --- global bounds ---------------------------------------------------------------------

def _clamped(values, name):
    v = np.asarray(values, float)
    if np.any(v < 0):
        warnings.warn(f"{name}: {int(np.sum(v < 0))} negative local error(s) clamped to 0",
                      RuntimeWarning, stacklevel=3)
        v = np.maximum(v, 0.0)
    return v


@dataclass
class ErrorBoundTable:
    lipschitz_f: float
    lam_phi: float
    alpha: float
    dt: float
    m: int
    n: int
    tables: PolyTables
    eps: np.ndarray           # sqrt E[eps^2] per step q = 0..n-1
    e: np.ndarray             # sqrt E[e^2] per step (zeros if unknown)
    b0: np.ndarray
    b1: np.ndarray
    geometric: np.ndarray     # bound without anticipation
    partial: bool = True

    def rows(self) -> list:
        t = self.tables
        out = []
        for q in range(self.n):
            i = q + 1
            out.append({"step": q, "time": q * self.dt, "eps_rmse": float(self.eps[q]),
                        "e_rmse": float(self.e[q]), "P0": float(t.p0[i]), "P1": float(t.p1[i]),
                        "Q0": float(t.q0[i]), "Q1": float(t.q1[i]), "B0": float(self.b0[q]),
                        "B1": float(self.b1[q]), "geometric": float(self.geometric[q]),
                        "bound_kind": "partial" if self.partial else "full"})
        return out


def geometric_bound(eps, x: float) -> np.ndarray:
    """``sum_{k >= q} (1 + x)^{k - q} eps_k`` for every ``q``."""
    eps = _clamped(eps, "eps")
    n = len(eps)
    out = np.zeros(n)
    acc = 0.0
    for q in range(n - 1, -1, -1):
        acc = eps[q] + (1 + x) * acc
        out[q] = acc
    return out


def global_bounds(eps, e=None, *, lipschitz_f: float, dt: float, lam_phi: float, alpha: float,
                  m: int = 1) -> ErrorBoundTable:
    """``B0_q, B1_q`` from local RMS errors ``eps`` (and optionally ``e``), ``q = 0..n-1``."""
    eps = _clamped(eps, "eps")
    n = len(eps)
    partial = e is None
    e = np.zeros(n) if e is None else _clamped(e, "e")
    if len(e) != n:
        raise ValueError("eps and e tables differ in length")
    x = lipschitz_f * dt
    t = poly_tables(x, lam_phi, alpha, n)
    b0, b1 = np.zeros(n), np.zeros(n)
    for q in range(n):
        k = n - q
        b0[q] = t.p0[1:k + 1] @ eps[q:] + t.q0[1:k + 1] @ e[q:]
        b1[q] = t.p1[1:k + 1] @ eps[q:] + t.q1[1:k + 1] @ e[q:]
    return ErrorBoundTable(lipschitz_f, lam_phi, alpha, dt, m, n, t, eps, e, b0, b1,
                           geometric_bound(eps, x), partial)
