"""Model parameters, JSON config loading and reproducibility hashing."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


DEFAULT_MODEL_FILE = "default_model.json"


@dataclass(frozen=True)
class ModelParams:
    """Coefficients of the hybrid market/credit model.

    Economy 0 is domestic; FX ``x`` (0-based) converts economy ``x + 1`` into
    domestic units.  Factor order in the correlation matrix: rates, FX,
    client intensities, bank spread.
    """

    rate_a: np.ndarray
    rate_b: np.ndarray
    rate_sigma: np.ndarray
    rate_r0: np.ndarray
    fx_sigma: np.ndarray
    fx_x0: np.ndarray
    cl_kappa: np.ndarray
    cl_theta: np.ndarray
    cl_xi: np.ndarray
    cl_lambda0: np.ndarray
    bank_kappa: float
    bank_theta: float
    bank_xi: float
    bank_lambda0: float
    correlation: np.ndarray
    horizon: float = 10.0
    sim_exponent: int = 8
    schedule_exponent: int = 5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (list, tuple, np.ndarray)):
                arr = np.array(v, dtype=float)
                arr.setflags(write=False)
                object.__setattr__(self, f.name, arr)
        self.validate()

    @property
    def n_econ(self) -> int:
        return len(self.rate_a)

    @property
    def n_fx(self) -> int:
        return len(self.fx_sigma)

    @property
    def n_clients(self) -> int:
        return len(self.cl_kappa)

    @property
    def n_factors(self) -> int:
        return self.n_econ + self.n_fx + self.n_clients + 1

    def slices(self):
        """Index ranges of (rates, fx, clients, bank) in the factor vector."""
        e, x, c = self.n_econ, self.n_fx, self.n_clients
        return slice(0, e), slice(e, e + x), slice(e + x, e + x + c), e + x + c

    def validate(self):
        e = self.n_econ
        if e < 1:
            raise ConfigError("need at least one economy")
        for name in ("rate_b", "rate_sigma", "rate_r0"):
            if len(getattr(self, name)) != e:
                raise ConfigError(f"{name} must have one entry per economy")
        if self.n_fx != e - 1 or len(self.fx_x0) != self.n_fx:
            raise ConfigError("need exactly one FX rate per foreign economy")
        c = self.n_clients
        for name in ("cl_theta", "cl_xi", "cl_lambda0"):
            if len(getattr(self, name)) != c:
                raise ConfigError(f"{name} must have one entry per client")
        if np.any(self.rate_a <= 0):
            raise ConfigError("Vasicek mean-reversion speeds must be positive")
        vols = np.concatenate([self.rate_sigma, self.fx_sigma, self.cl_xi, [self.bank_xi]])
        if np.any(vols < 0):
            raise ConfigError("volatilities must be non-negative")
        if np.any(self.fx_x0 <= 0):
            raise ConfigError("FX spots must be positive")
        cir = np.concatenate([self.cl_kappa, self.cl_theta, self.cl_lambda0,
                              [self.bank_kappa, self.bank_theta, self.bank_lambda0]])
        if np.any(cir < 0):
            raise ConfigError("CIR speeds, levels and initial values must be non-negative")
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        corr = self.correlation
        d = self.n_factors
        if corr.shape != (d, d):
            raise ConfigError(f"correlation must be {d}x{d}, got {corr.shape}")
        if not np.allclose(corr, corr.T, atol=1e-12, rtol=0):
            raise ConfigError("correlation matrix is not symmetric")
        if not np.allclose(np.diag(corr), 1.0, atol=1e-12, rtol=0):
            raise ConfigError("correlation matrix must have unit diagonal")
        if np.linalg.eigvalsh(corr).min() < -1e-10:
            raise ConfigError("correlation matrix is not positive semi-definite")

    def but(self, **kw) -> "ModelParams":
        return replace(self, **kw)

    def without_funding_spread(self) -> "ModelParams":
        return self.but(bank_theta=0.0, bank_lambda0=0.0, bank_xi=0.0)

    def without_client_defaults(self) -> "ModelParams":
        z = np.zeros(self.n_clients)
        return self.but(cl_theta=z, cl_lambda0=z, cl_xi=z)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def block_correlation(n_econ: int, n_fx: int, n_credit: int, rates=0.0, fx=0.0,
                      credit=0.0, rates_fx=0.0, rates_credit=0.0, fx_credit=0.0) -> np.ndarray:
    """Equicorrelated blocks for (rates, fx, credit) factor groups."""
    groups = np.repeat([0, 1, 2], [n_econ, n_fx, n_credit])
    within = {0: rates, 1: fx, 2: credit}
    across = {(0, 1): rates_fx, (0, 2): rates_credit, (1, 2): fx_credit}
    d = len(groups)
    corr = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            gi, gj = groups[i], groups[j]
            if i == j:
                corr[i, j] = 1.0
            elif gi == gj:
                corr[i, j] = within[gi]
            else:
                corr[i, j] = across[(min(gi, gj), max(gi, gj))]
    return corr


@dataclass(frozen=True)
class PortfolioSettings:
    n_swaps: int = 100
    seed: int = 7
    notional_min: float = 1000.0
    notional_max: float = 10000.0
    payment_intervals: tuple = (0.3125, 0.625)
    min_maturity: float = 0.9375

    def __post_init__(self):
        if self.n_swaps < 1:
            raise ConfigError("n_swaps must be >= 1")
        if not 0 < self.notional_min <= self.notional_max:
            raise ConfigError("invalid notional range")
        object.__setattr__(self, "payment_intervals", tuple(float(p) for p in self.payment_intervals))


@dataclass
class ModelConfig:
    """Everything read from one model file."""

    model: ModelParams
    portfolio: PortfolioSettings
    alpha: float = 0.85
    hurdle_rate: float = 0.10
    raw: dict = field(default_factory=dict)


def _model_from_dict(d: dict) -> ModelParams:
    try:
        rates, fxs, clients, bank = d["rates"], d["fx"], d["clients"], d["bank"]
        corr = d.get("correlation", {})
        if isinstance(corr, dict):
            corr = block_correlation(len(rates), len(fxs), len(clients) + 1, **corr)
        return ModelParams(
            rate_a=[r["a"] for r in rates], rate_b=[r["b"] for r in rates],
            rate_sigma=[r["sigma"] for r in rates], rate_r0=[r["r0"] for r in rates],
            fx_sigma=[x["sigma"] for x in fxs], fx_x0=[x["x0"] for x in fxs],
            cl_kappa=[c["kappa"] for c in clients], cl_theta=[c["theta"] for c in clients],
            cl_xi=[c["xi"] for c in clients], cl_lambda0=[c["lambda0"] for c in clients],
            bank_kappa=bank["kappa"], bank_theta=bank["theta"], bank_xi=bank["xi"],
            bank_lambda0=bank["lambda0"], correlation=corr,
            horizon=float(d.get("horizon", 10.0)),
            sim_exponent=int(d.get("sim_exponent", 8)),
            schedule_exponent=int(d.get("schedule_exponent", 5)),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed model config: missing or invalid {exc}") from exc


def parse_config(d: dict) -> ModelConfig:
    model = _model_from_dict(d)
    try:
        port = PortfolioSettings(**d.get("portfolio", {}))
    except TypeError as exc:
        raise ConfigError(f"malformed portfolio section: {exc}") from exc
    alpha = float(d.get("alpha", 0.85))
    hurdle = float(d.get("hurdle_rate", 0.10))
    if not 0.5 < alpha < 1.0:
        raise ConfigError("alpha must lie in (1/2, 1)")
    if hurdle < 0:
        raise ConfigError("hurdle rate must be non-negative")
    return ModelConfig(model, port, alpha, hurdle, copy.deepcopy(d))


def default_config_dict() -> dict:
    text = resources.files("pathxva").joinpath("data", DEFAULT_MODEL_FILE).read_text()
    return json.loads(text)


def load_config(path: Optional[str] = None) -> ModelConfig:
    """Read a model file; ``None`` selects the shipped defaults."""
    if path is None:
        return parse_config(default_config_dict())
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return parse_config(d)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()
