"""Hybrid market/credit scenario generation.

Diffusive factors live on a fine simulation grid of ``2**sim_exponent``
steps; everything consumed downstream (factors, cumulative hazards,
discount factors, netting-set values) is stored only at the coarser
pricing times ``i * T / 2**theta``.  Because the fine grid does not depend
on ``theta`` for ``theta <= sim_exponent``, runs at different pricing
resolutions see the very same paths.

Random numbers come from one Philox stream per outer path, keyed by
``(seed, purpose, step, path)``, so results do not depend on how paths are
batched.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, ModelParams, PortfolioSettings

logger = logging.getLogger(__name__)

STREAM_DIFFUSION = 0
STREAM_DEFAULTS = 1
STREAM_TWINS = 2


def path_generator(seed: int, stream: int, path: int, step: int = 0) -> np.random.Generator:
    """Counter-based generator for one (purpose, step, path) triple."""
    if not (0 <= path < 2**32 and 0 <= step < 2**24 and 0 <= stream < 2**8):
        raise ValueError("stream key out of range")
    key = [int(seed) % 2**64, (stream << 56) | (step << 32) | path]
    return np.random.Generator(np.random.Philox(key=key))


# --- grids -----------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Nested pricing / simulation grids on ``[0, horizon]``.

    ``theta`` sets the pricing step ``horizon / 2**theta``; the simulation
    grid uses ``2**max(theta, sim_exponent, schedule_exponent)`` steps so
    it contains both the pricing grid and the swap schedule lattice.
    """

    horizon: float = 10.0
    theta: int = 5
    sim_exponent: int = 8
    schedule_exponent: int = 5

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if self.theta < 0:
            raise ConfigError("theta must be non-negative")

    @classmethod
    def for_model(cls, model: ModelParams, theta: int) -> "TimeGrid":
        return cls(model.horizon, theta, model.sim_exponent, model.schedule_exponent)

    @property
    def fine_exponent(self) -> int:
        return max(self.theta, self.sim_exponent, self.schedule_exponent)

    @property
    def n(self) -> int:
        return 2 ** self.theta

    @property
    def n_fine(self) -> int:
        return 2 ** self.fine_exponent

    @property
    def coarsening(self) -> int:
        return 2 ** (self.fine_exponent - self.theta)

    @property
    def lattice_stride(self) -> int:
        """Fine steps between two swap-schedule lattice dates."""
        return 2 ** (self.fine_exponent - self.schedule_exponent)

    @property
    def n_lattice(self) -> int:
        return 2 ** self.schedule_exponent

    @property
    def dt(self) -> float:
        return self.horizon / self.n

    @property
    def fine_dt(self) -> float:
        return self.horizon / self.n_fine

    @property
    def m(self) -> int:
        """ES window length in pricing steps (one year, rounded)."""
        return max(1, int(np.floor(1.0 / self.dt + 0.5)))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.dt

    def window_end(self, i: int) -> int:
        return min(i + self.m, self.n)

    def tick(self, i: int) -> int:
        """Fine-grid index of pricing time ``i``."""
        return i * self.coarsening

    def to_dict(self) -> dict:
        return {"horizon": self.horizon, "theta": self.theta,
                "sim_exponent": self.sim_exponent, "schedule_exponent": self.schedule_exponent}


# --- Vasicek zero-coupon bonds ---------------------------------------------

def vasicek_zcb(a, b, sigma, tau, r):
    """Price at ``t`` of a bond paying 1 at ``t + tau`` given short rate ``r``."""
    a = np.asarray(a, float)
    tau = np.asarray(tau, float)
    bfac = -np.expm1(-a * tau) / a
    log_a = (b - sigma**2 / (2 * a**2)) * (bfac - tau) - sigma**2 * bfac**2 / (4 * a)
    return np.exp(log_a - bfac * r)


# --- portfolio -------------------------------------------------------------

@dataclass(frozen=True)
class Swap:
    notional: float
    maturity: float
    counterparty: int
    currency: int
    fixed_rate: float
    tenor: float
    payer: bool
    pay_idx: tuple = ()     # payment dates as schedule-lattice indices
    start_idx: tuple = ()   # accrual start of each period (lattice index)

    def accruals(self, lattice_dt: float) -> np.ndarray:
        return (np.array(self.pay_idx) - np.array(self.start_idx)) * lattice_dt


@dataclass(frozen=True)
class PortfolioSpec:
    swaps: tuple
    n_clients: int
    lattice_dt: float

    def __len__(self):
        return len(self.swaps)

    def to_dict(self) -> dict:
        return {"n_clients": self.n_clients, "lattice_dt": self.lattice_dt,
                "swaps": [{k: (list(v) if isinstance(v, tuple) else v)
                           for k, v in s.__dict__.items()} for s in self.swaps]}


def _schedule(mat_idx: int, tenor_idx: int):
    pays = list(range(mat_idx, 0, -tenor_idx))[::-1]
    starts = [0] + pays[:-1]
    return tuple(pays), tuple(starts)


def par_rate(model: ModelParams, currency: int, pay_idx, start_idx, lattice_dt: float) -> float:
    e = currency
    pays = np.array(pay_idx) * lattice_dt
    acc = (np.array(pay_idx) - np.array(start_idx)) * lattice_dt
    p = vasicek_zcb(model.rate_a[e], model.rate_b[e], model.rate_sigma[e], pays, model.rate_r0[e])
    return float((1.0 - p[-1]) / (acc @ p))


def build_portfolio(seed: int, n_swaps: int, model: ModelParams, grid: TimeGrid,
                    settings: Optional[PortfolioSettings] = None) -> PortfolioSpec:
    """Random at-par swaps on the schedule lattice, deterministic in ``seed``."""
    if n_swaps < 1:
        raise ConfigError("n_swaps must be >= 1")
    model.validate()
    settings = settings or PortfolioSettings(n_swaps=n_swaps, seed=seed)
    lat = grid.horizon / grid.n_lattice
    rng = np.random.default_rng(seed)
    lo = max(1, int(np.ceil(settings.min_maturity / lat - 1e-9)))
    tenors = [max(1, int(round(p / lat))) for p in settings.payment_intervals]
    swaps = []
    for _ in range(n_swaps):
        mat_idx = int(rng.integers(lo, grid.n_lattice + 1))
        cpty = int(rng.integers(model.n_clients))
        ccy = int(rng.integers(model.n_econ))
        notional = float(rng.uniform(settings.notional_min, settings.notional_max))
        tenor_idx = tenors[int(rng.integers(len(tenors)))]
        payer = bool(rng.integers(2))
        pays, starts = _schedule(mat_idx, tenor_idx)
        k = par_rate(model, ccy, pays, starts, lat)
        swaps.append(Swap(notional, mat_idx * lat, cpty, ccy, k, tenor_idx * lat, payer, pays, starts))
    return PortfolioSpec(tuple(swaps), model.n_clients, lat)


def price_swaps_at(portfolio: PortfolioSpec, model: ModelParams, grid: TimeGrid, tick: int,
                   rates: np.ndarray, fx: np.ndarray, resets: np.ndarray) -> np.ndarray:
    """Netting-set values in domestic units at fine tick ``tick``.

    ``rates`` is (paths, n_econ), ``fx`` is (paths, n_fx) and ``resets``
    holds short rates at the schedule lattice dates, (paths, n_lattice + 1,
    n_econ); only dates up to ``tick`` are read.
    """
    n_paths = rates.shape[0]
    if fx.shape[1] != model.n_fx:
        raise ConfigError("FX rates missing for foreign currencies")
    stride = grid.lattice_stride
    lat = portfolio.lattice_dt
    t = tick * grid.fine_dt
    lat_times = np.arange(grid.n_lattice + 1) * lat
    out = np.zeros((n_paths, portfolio.n_clients))
    by_ccy = {}
    for s in portfolio.swaps:
        by_ccy.setdefault(s.currency, []).append(s)
    for e, swaps in sorted(by_ccy.items()):
        if e > 0 and e - 1 >= fx.shape[1]:
            raise ConfigError(f"no FX rate for currency {e}")
        a, b, sig = model.rate_a[e], model.rate_b[e], model.rate_sigma[e]
        first = tick // stride + 1  # first lattice date strictly after t
        if first > grid.n_lattice:
            continue
        tau = lat_times[first:] - t
        pm = vasicek_zcb(a, b, sig, tau[None, :], rates[:, e:e + 1])
        conv = fx[:, e - 1] if e > 0 else None
        for s in swaps:
            pays = np.array(s.pay_idx)
            rem = pays * stride > tick
            if not rem.any():
                continue
            pays_r = pays[rem]
            starts_r = np.array(s.start_idx)[rem]
            acc = (pays_r - starts_r) * lat
            p_rem = pm[:, pays_r - first]
            k0, s0 = pays_r[0], starts_r[0]
            p_reset = vasicek_zcb(a, b, sig, (k0 - s0) * lat, resets[:, s0, e])
            floating = p_rem[:, 0] / p_reset - p_rem[:, -1]
            fixed = s.fixed_rate * (p_rem @ acc)
            v = s.notional * (floating - fixed)
            if not s.payer:
                v = -v
            if conv is not None:
                v = v * conv
            out[:, s.counterparty] += v
    return out


# --- diffusions ------------------------------------------------------------

def correlation_factor(corr: np.ndarray) -> np.ndarray:
    """Lower factor ``L`` with ``L @ L.T == corr``.

    Falls back to a symmetric eigendecomposition for singular PSD matrices.
    """
    corr = np.asarray(corr, float)
    try:
        return np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(corr)
        if w.min() < -1e-10:
            raise ConfigError("correlation matrix is not positive semi-definite")
        return v * np.sqrt(np.clip(w, 0.0, None))


class _Stepper:
    """Exact-in-mean transitions of all factors over one fine step."""

    def __init__(self, model: ModelParams, dt: float):
        self.model = model
        self.dt = dt
        rs, xs, cs, bk = model.slices()
        self.rs, self.xs, self.ks = rs, xs, slice(cs.start, bk + 1)
        a, sig = model.rate_a, model.rate_sigma
        corr = model.correlation
        # quanto drift of foreign short rates under the domestic measure
        quanto = np.zeros(model.n_econ)
        for e in range(1, model.n_econ):
            quanto[e] = corr[e, xs.start + e - 1] * sig[e] * model.fx_sigma[e - 1]
        self.r_level = model.rate_b - quanto / a
        self.r_decay = np.exp(-a * dt)
        self.r_std = sig * np.sqrt(-np.expm1(-2 * a * dt) / (2 * a))
        self.x_sigma = model.fx_sigma
        kappa = np.append(model.cl_kappa, model.bank_kappa)
        self.k_theta = np.append(model.cl_theta, model.bank_theta)
        self.k_xi = np.append(model.cl_xi, model.bank_xi)
        self.k_decay = np.exp(-kappa * dt)
        with np.errstate(divide="ignore", invalid="ignore"):
            var = np.where(kappa > 0, -np.expm1(-2 * kappa * dt) / (2 * kappa), dt)
        self.k_std = np.sqrt(var)
        self.chol = correlation_factor(corr)

    def initial(self, n_paths: int) -> np.ndarray:
        m = self.model
        x0 = np.concatenate([m.rate_r0, m.fx_x0, m.cl_lambda0, [m.bank_lambda0]])
        return np.tile(x0, (n_paths, 1))

    def step(self, state: np.ndarray, z: np.ndarray):
        """Advance ``state`` in place; returns (domestic-rate, client-hazard) integrals."""
        dt = self.dt
        w = z @ self.chol.T
        r = state[:, self.rs]
        r_new = self.r_level + (r - self.r_level) * self.r_decay + self.r_std * w[:, self.rs]
        if self.model.n_fx:
            r_avg = 0.5 * (r + r_new)
            carry = r_avg[:, :1] - r_avg[:, 1:]
            sx = self.x_sigma
            state[:, self.xs] *= np.exp((carry - 0.5 * sx**2) * dt + sx * np.sqrt(dt) * w[:, self.xs])
        lam = state[:, self.ks]
        lp = np.maximum(lam, 0.0)
        lam_new = np.maximum(self.k_theta + (lp - self.k_theta) * self.k_decay
                             + self.k_xi * np.sqrt(lp) * self.k_std * w[:, self.ks], 0.0)
        int_r = 0.5 * (r[:, 0] + r_new[:, 0]) * dt
        int_h = 0.5 * (lam[:, :-1] + lam_new[:, :-1]) * dt
        state[:, self.rs] = r_new
        state[:, self.ks] = lam_new
        return int_r, int_h


@dataclass
class DiffusionLayers:
    """Pricing-time snapshots produced by :func:`simulate_diffusions`."""

    diffusions: np.ndarray   # (paths, n+1, factors)
    cum_hazard: np.ndarray   # (paths, n+1, clients)
    discount: np.ndarray     # (paths, n+1)
    resets: np.ndarray       # (paths, n_lattice+1, n_econ)


def _draw_normals(seed, stream, paths, shape, step=0):
    out = np.empty((len(paths), *shape))
    for j, p in enumerate(paths):
        out[j] = path_generator(seed, stream, int(p), step).standard_normal(shape)
    return out


def simulate_diffusions(model: ModelParams, grid: TimeGrid, n_paths: int, seed: int,
                        chunk: int = 1024) -> DiffusionLayers:
    if n_paths < 1:
        raise ConfigError("n_paths must be >= 1")
    stepper = _Stepper(model, grid.fine_dt)
    d, n, c = model.n_factors, grid.n, model.n_clients
    diff = np.empty((n_paths, n + 1, d))
    hz = np.empty((n_paths, n + 1, c))
    disc = np.empty((n_paths, n + 1))
    resets = np.empty((n_paths, grid.n_lattice + 1, model.n_econ))
    for lo in range(0, n_paths, chunk):
        idx = np.arange(lo, min(lo + chunk, n_paths))
        z = _draw_normals(seed, STREAM_DIFFUSION, idx, (grid.n_fine, d))
        state = stepper.initial(len(idx))
        int_r = np.zeros(len(idx))
        h = np.zeros((len(idx), c))
        diff[idx, 0], hz[idx, 0], disc[idx, 0] = state, 0.0, 1.0
        resets[idx, 0] = state[:, stepper.rs]
        for k in range(grid.n_fine):
            dr, dh = stepper.step(state, z[:, k])
            int_r += dr
            h += dh
            kk = k + 1
            if kk % grid.coarsening == 0:
                i = kk // grid.coarsening
                diff[idx, i], hz[idx, i], disc[idx, i] = state, h, np.exp(-int_r)
            if kk % grid.lattice_stride == 0:
                resets[idx, kk // grid.lattice_stride] = state[:, stepper.rs]
    return DiffusionLayers(diff, hz, disc, resets)


def simulate_defaults(cum_hazard: np.ndarray, n_inner: int, seed: int) -> np.ndarray:
    """Pricing index of each default, ``n + 1`` for survival.

    Index ``i`` means the default happened in ``(t_{i-1}, t_i]``: the first
    pricing time at which the integrated intensity reaches the client's
    Exp(1) threshold.  Shape (outer, inner, clients), int16/int32.
    """
    if n_inner < 1:
        raise ConfigError("n_inner must be >= 1")
    n_outer, n1, c = cum_hazard.shape
    dtype = np.int16 if n1 < 2**15 - 1 else np.int32
    out = np.empty((n_outer, n_inner, c), dtype=dtype)
    for p in range(n_outer):
        thresh = path_generator(seed, STREAM_DEFAULTS, p).standard_exponential((n_inner, c))
        for k in range(c):
            out[p, :, k] = np.searchsorted(cum_hazard[p, :, k], thresh[:, k], side="left")
    return out


def price_mtm(portfolio: PortfolioSpec, model: ModelParams, grid: TimeGrid,
              layers: DiffusionLayers) -> np.ndarray:
    rs, xs, _, _ = model.slices()
    n_paths = layers.diffusions.shape[0]
    out = np.empty((n_paths, grid.n + 1, portfolio.n_clients))
    for i in range(grid.n + 1):
        snap = layers.diffusions[:, i]
        out[:, i] = price_swaps_at(portfolio, model, grid, grid.tick(i), snap[:, rs], snap[:, xs],
                                   layers.resets)
    return out


# --- scenario cube ---------------------------------------------------------

@dataclass
class ScenarioCube:
    """Read-only hierarchical scenarios: outer market paths x inner default sets.

    Regression samples are ordered ``outer * n_inner + inner``.
    """

    model: ModelParams
    grid: TimeGrid
    portfolio: PortfolioSpec
    diffusions: np.ndarray
    cum_hazard: np.ndarray
    discount: np.ndarray
    resets: np.ndarray
    mtm: np.ndarray
    default_index: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("diffusions", "cum_hazard", "discount", "resets", "mtm", "default_index"):
            getattr(self, name).setflags(write=False)

    @property
    def n_outer(self) -> int:
        return self.diffusions.shape[0]

    @property
    def n_inner(self) -> int:
        return self.default_index.shape[1]

    @property
    def n_samples(self) -> int:
        return self.n_outer * self.n_inner

    @property
    def n_clients(self) -> int:
        return self.mtm.shape[2]

    @property
    def n_features(self) -> int:
        return self.diffusions.shape[2] + self.n_clients

    def outer(self, arr: np.ndarray) -> np.ndarray:
        """Broadcast a per-outer-path array to samples."""
        return np.repeat(arr, self.n_inner, axis=0)

    def alive(self, i: int) -> np.ndarray:
        """Survival indicators at ``t_i``, (samples, clients)."""
        return (self.default_index > i).reshape(self.n_samples, -1).astype(float)

    def defaults_between(self, i: int) -> np.ndarray:
        """Indicators of defaults in ``(t_i, t_{i+1}]``, (samples, clients)."""
        return (self.default_index == i + 1).reshape(self.n_samples, -1).astype(float)

    def features(self, i: int) -> np.ndarray:
        return np.concatenate([self.outer(self.diffusions[:, i]), self.alive(i)], axis=1)

    def bank_spread(self, i: int) -> np.ndarray:
        return self.outer(self.diffusions[:, i, -1])

    def mtm_samples(self, i: int) -> np.ndarray:
        return self.outer(self.mtm[:, i])

    def discount_samples(self, i: int) -> np.ndarray:
        return self.outer(self.discount[:, i])

    # persistence
    _ARRAYS = ("diffusions", "cum_hazard", "discount", "resets", "mtm", "default_index")

    def save(self, prefix) -> tuple:
        """Flat little-endian binary ``<prefix>.bin`` plus ``<prefix>.json`` sidecar."""
        prefix = Path(prefix)
        layout, offset = {}, 0
        bin_path = prefix.with_suffix(".bin")
        with open(bin_path, "wb") as fh:
            for name in self._ARRAYS:
                arr = getattr(self, name)
                dt = "<i4" if arr.dtype.kind == "i" else "<f8"
                data = np.ascontiguousarray(arr, dtype=dt)
                layout[name] = {"offset": offset, "shape": list(arr.shape), "dtype": dt}
                fh.write(data.tobytes())
                offset += data.nbytes
        side = {"format": "pathxva-cube-v1", "binary": bin_path.name, "seed": self.seed,
                "arrays": layout, "grid": self.grid.to_dict(), "model": self.model.to_dict(),
                "portfolio": self.portfolio.to_dict(), "meta": self.meta,
                "axes": "paths x pricing times x channels; default_index is outer x inner x clients"}
        json_path = prefix.with_suffix(".json")
        json_path.write_text(json.dumps(side, indent=1))
        return bin_path, json_path

    @classmethod
    def load(cls, prefix) -> "ScenarioCube":
        prefix = Path(prefix)
        side = json.loads(prefix.with_suffix(".json").read_text())
        raw = prefix.with_suffix(".bin").read_bytes()
        arrays = {}
        for name, spec in side["arrays"].items():
            count = int(np.prod(spec["shape"]))
            a = np.frombuffer(raw, dtype=spec["dtype"], count=count, offset=spec["offset"])
            arrays[name] = a.reshape(spec["shape"]).copy()
        arrays["default_index"] = arrays["default_index"].astype(np.int32)
        model = ModelParams(**side["model"])
        grid = TimeGrid(**side["grid"])
        p = side["portfolio"]
        swaps = tuple(Swap(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in s.items()})
                      for s in p["swaps"])
        portfolio = PortfolioSpec(swaps, p["n_clients"], p["lattice_dt"])
        return cls(model, grid, portfolio, seed=side["seed"], meta=side.get("meta", {}), **arrays)


def build_scenarios(model: ModelParams, grid: TimeGrid, portfolio: PortfolioSpec,
                    n_outer: int, n_inner: int, seed: int) -> ScenarioCube:
    layers = simulate_diffusions(model, grid, n_outer, seed)
    mtm = price_mtm(portfolio, model, grid, layers)
    idx = simulate_defaults(layers.cum_hazard, n_inner, seed)
    return ScenarioCube(model, grid, portfolio, layers.diffusions, layers.cum_hazard,
                        layers.discount, layers.resets, mtm, idx, seed)


# --- one-step successors (twin validation) ---------------------------------

@dataclass
class Successors:
    """One simulated branch from every outer state at ``t_i`` to ``t_{i+1}``."""

    diffusions: np.ndarray    # (outer, factors) at t_{i+1}
    hazard_inc: np.ndarray    # (outer, clients) integrated intensity over the step
    discount: np.ndarray      # (outer,) one-step discount factor
    mtm: np.ndarray           # (outer, clients) at t_{i+1}
    default_event: np.ndarray  # (samples, clients) default in (t_i, t_{i+1}]
    alive_next: np.ndarray    # (samples, clients) survival at t_{i+1}


def simulate_successors(cube: ScenarioCube, i: int, seed: int, n_branches: int = 2) -> list:
    """``n_branches`` conditionally independent successors of each state at ``t_i``.

    Inner default scenarios are redrawn per branch for names alive at
    ``t_i``, with the memoryless one-step default probability.
    """
    grid, model = cube.grid, cube.model
    if not 0 <= i < grid.n:
        raise ValueError(f"step {i} has no successor")
    stepper = _Stepper(model, grid.fine_dt)
    nsub, c, d = grid.coarsening, cube.n_clients, cube.diffusions.shape[2]
    n_outer, n_inner = cube.n_outer, cube.n_inner
    draws = np.empty((n_outer, n_branches, nsub * d + n_inner * c))
    for p in range(n_outer):
        g = path_generator(seed, STREAM_TWINS, p, step=i)
        draws[p, :, :nsub * d] = g.standard_normal((n_branches, nsub * d))
        draws[p, :, nsub * d:] = g.random((n_branches, n_inner * c))
    alive = cube.alive(i)
    k0 = grid.tick(i)
    out = []
    for br in range(n_branches):
        z = draws[:, br, :nsub * d].reshape(n_outer, nsub, d)
        u = draws[:, br, nsub * d:].reshape(n_outer * n_inner, c)
        state = cube.diffusions[:, i].copy()
        resets = None
        int_r = np.zeros(n_outer)
        h = np.zeros((n_outer, c))
        for k in range(nsub):
            dr, dh = stepper.step(state, z[:, k])
            int_r += dr
            h += dh
            tick = k0 + k + 1
            if tick % grid.lattice_stride == 0:
                if resets is None:
                    resets = np.array(cube.resets)
                resets[:, tick // grid.lattice_stride] = state[:, stepper.rs]
        rs, xs, _, _ = model.slices()
        mtm = price_swaps_at(cube.portfolio, model, grid, k0 + nsub, state[:, rs], state[:, xs],
                             cube.resets if resets is None else resets)
        p_def = -np.expm1(-np.repeat(h, n_inner, axis=0))
        event = alive * (u < p_def)
        out.append(Successors(state, h, np.exp(-int_r), mtm, event, alive - event))
    return out
