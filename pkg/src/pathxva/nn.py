"""Feed-forward regression networks trained from scratch with numpy.

One scalar-output network ("head") is trained per regression target and
time step.  Two losses are supported:

* ``ls``  -- mean squared error, estimates a conditional expectation;
* ``qle`` -- pinball loss ``(y - z)^+ + (1 - alpha) z``, estimates the
  conditional ``alpha``-quantile (value-at-risk).

Conditional expected shortfall is obtained by a second ``ls`` regression of
the labels produced by :func:`es_labels`.

Inputs are standardised per column and labels are mapped to zero mean and
unit scale before training.  Both losses are equivariant under that affine
map, so the minimiser is unchanged; the map is stored on the :class:`Head`
and undone on evaluation.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LOSS_KINDS = ("ls", "qle")


class TrainingDivergence(ArithmeticError):
    """Raised when a training loss becomes non-finite."""


@dataclass
class MlpParams:
    """Weights and biases of a ``dims[0] -> ... -> 1`` softplus network.

    All parameters live in one flat float64 vector so that optimiser
    updates are a single vectorised operation; ``weights``/``biases`` are
    views into it.  ``weights[l]`` has shape ``(dims[l+1], dims[l])``.
    """

    dims: tuple
    flat: np.ndarray
    activation: str = "softplus"

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ValueError(f"invalid layer dims {self.dims}")
        if self.dims[-1] != 1:
            raise ValueError("output layer must have width 1")
        if self.activation != "softplus":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.flat.shape != (param_count(self.dims),):
            raise ValueError("flat parameter vector has the wrong length")
        self.weights, self.biases = [], []
        offset = 0
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            w = self.flat[offset:offset + fan_in * fan_out].reshape(fan_out, fan_in)
            offset += fan_in * fan_out
            b = self.flat[offset:offset + fan_out]
            offset += fan_out
            self.weights.append(w)
            self.biases.append(b)

    @property
    def n_hidden(self) -> int:
        return len(self.dims) - 2

    def copy(self) -> "MlpParams":
        return MlpParams(self.dims, self.flat.copy(), self.activation)


def param_count(dims: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def init_mlp(dims: Sequence[int], seed: int) -> MlpParams:
    """He-scaled Gaussian weights (variance ``2 / fan_in``), zero biases."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"invalid layer dims {dims}")
    rng = np.random.default_rng(seed)
    params = MlpParams(dims, np.zeros(param_count(dims)))
    for w in params.weights:
        w[...] = rng.standard_normal(w.shape) * np.sqrt(2.0 / w.shape[1])
    return params


def softplus(x):
    """``log(1 + e^x)`` without overflow for large ``x``."""
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.dims[0]:
        raise ValueError(f"expected features of shape (n, {params.dims[0]}), got {x.shape}")
    if np.isnan(x).any():
        raise ValueError("NaN in network input")
    a = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        a = softplus(a @ w.T + b)
    return (a @ params.weights[-1].T + params.biases[-1])[:, 0]


def _softplus_and_slope(z):
    act = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    slope = 0.5 * (1 + np.tanh(0.5 * z))
    return act, slope


def _loss_and_grad(params: MlpParams, x, y, kind: str, alpha: float, grad: np.ndarray):
    """Batch loss; writes the gradient w.r.t. ``params.flat`` into ``grad``."""
    slopes, acts = [], [x]
    a = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        a, s = _softplus_and_slope(a @ w.T + b)
        slopes.append(s)
        acts.append(a)
    out = (a @ params.weights[-1].T + params.biases[-1])[:, 0]
    n = len(y)
    if kind == "ls":
        r = out - y
        loss = float(r @ r) / n
        g = (2.0 / n) * r
    else:
        r = y - out
        loss = float(np.maximum(r, 0).sum() + (1.0 - alpha) * out.sum()) / n
        # subgradient of (.)^+ taken as 0 at the kink
        g = ((1.0 - alpha) - (r > 0)) / n

    gw, gb = _grad_views(params, grad)
    delta = g.astype(grad.dtype, copy=False)[:, None]
    for layer in range(len(params.weights) - 1, -1, -1):
        gw[layer][...] = delta.T @ acts[layer]
        gb[layer][...] = delta.sum(axis=0)
        if layer:
            w = params.weights[layer]
            back = delta * w if w.shape[0] == 1 else delta @ w
            delta = back * slopes[layer - 1]
    return loss


def _grad_views(params: MlpParams, grad: np.ndarray):
    g = MlpParams(params.dims, grad, params.activation)
    return g.weights, g.biases


def loss_and_gradient(params: MlpParams, x, y, kind: str = "ls", alpha: float = 0.5):
    """Loss of one batch and its gradient as an :class:`MlpParams`."""
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    grad = np.zeros_like(params.flat)
    loss = _loss_and_grad(params, np.asarray(x, float), np.asarray(y, float), kind, alpha, grad)
    return loss, MlpParams(params.dims, grad, params.activation)


def batch_loss(params: MlpParams, x, y, kind: str = "ls", alpha: float = 0.5) -> float:
    out = forward(params, x)
    if kind == "ls":
        return float(np.mean((out - y) ** 2))
    return float(np.mean(np.maximum(y - out, 0.0) + (1.0 - alpha) * out))


@dataclass
class TrainConfig:
    """Hyper-parameters of one regression."""

    loss: str = "ls"
    alpha: float = 0.85
    epochs: int = 16
    batch_size: int = 4096
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: tuple = (38,)
    seed: int = 0
    dtype: str = "float32"
    es_mode: str = "centered"
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if not 0.5 < self.alpha < 1.0:
            raise ValueError("quantile level must lie in (1/2, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError(f"unknown learning-rate schedule {self.lr_schedule!r}")
        if self.es_mode not in ("centered", "indicator"):
            raise ValueError(f"unknown ES label mode {self.es_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported training dtype {self.dtype!r}")
        self.hidden = tuple(int(h) for h in self.hidden)

    def but(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass
class Head:
    """A trained network together with its input/output affine maps."""

    params: MlpParams
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_loc: float
    y_scale: float
    kind: str = "ls"
    alpha: float = 0.5
    train_loss: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, float) - self.x_mean) / self.x_scale
        return self.y_loc + self.y_scale * forward(self.params, z)


def _standardise(x: np.ndarray):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return mean, scale


def nn_regress(features: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
               init: Optional[MlpParams] = None) -> Head:
    """Train one head by Adam (or plain SGD) over a fixed batch partition.

    ``init`` warm-starts from previously trained parameters (copied, never
    mutated); otherwise weights are drawn by :func:`init_mlp` from
    ``cfg.seed``.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError(f"features {x.shape} and labels {y.shape} do not match")
    n = x.shape[0]
    if n < cfg.batch_size:
        raise ValueError(f"{n} samples is fewer than the batch size {cfg.batch_size}")
    if not np.isfinite(y).all():
        raise TrainingDivergence("non-finite regression labels")

    dims = (x.shape[1], *cfg.hidden, 1)
    if init is not None:
        if init.dims != dims:
            raise ValueError(f"warm start dims {init.dims} do not match {dims}")
        params = init.copy()
    else:
        params = init_mlp(dims, cfg.seed)

    x_mean, x_scale = _standardise(x)
    y_loc = float(y.mean())
    y_scale = float(y.std())
    alpha = cfg.alpha if cfg.loss == "qle" else 0.5

    if np.ptp(y) == 0.0:
        # constant labels: the exact minimiser of either loss is that constant
        params.weights[-1][...] = 0.0
        params.biases[-1][...] = 0.0
        return Head(params, x_mean, x_scale, y_loc, 1.0, cfg.loss, alpha, 0.0)
    if y_scale < 1e-300:
        y_scale = 1.0

    dt = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    xs = ((x[perm] - x_mean) / x_scale).astype(dt)
    ys = ((y[perm] - y_loc) / y_scale).astype(dt)
    starts = range(0, n, cfg.batch_size)

    work = MlpParams(dims, params.flat.astype(dt), params.activation)
    grad = np.zeros_like(work.flat)
    m = np.zeros_like(work.flat)
    v = np.zeros_like(work.flat)
    step = 0
    total_steps = cfg.epochs * len(starts)
    # overflow is reported through the divergence check below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            for b, s in enumerate(starts):
                eta = cfg.learning_rate
                if cfg.lr_schedule == "linear":
                    eta *= 1.0 - (epoch * len(starts) + b) / total_steps
                xb, yb = xs[s:s + cfg.batch_size], ys[s:s + cfg.batch_size]
                loss = _loss_and_grad(work, xb, yb, cfg.loss, alpha, grad)
                if not np.isfinite(loss) or not np.isfinite(grad).all():
                    raise TrainingDivergence(
                        f"{cfg.loss} loss became non-finite at epoch {epoch} batch {b} "
                        f"(loss={loss}, label scale={y_scale:.3g})")
                if cfg.optimizer == "sgd":
                    work.flat -= eta * grad
                    continue
                step += 1
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * grad
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * grad * grad
                lr = eta * np.sqrt(1.0 - cfg.beta2 ** step) / (1.0 - cfg.beta1 ** step)
                work.flat -= lr * m / (np.sqrt(v) + cfg.eps * np.sqrt(1.0 - cfg.beta2 ** step))

    params.flat[...] = work.flat
    head = Head(params, x_mean, x_scale, y_loc, y_scale, cfg.loss, alpha)
    fitted = head(x)
    if cfg.loss == "ls":
        head.train_loss = float(np.mean((fitted - y) ** 2))
    else:
        head.train_loss = float(np.mean(np.maximum(y - fitted, 0.0) + (1.0 - alpha) * fitted))
    if not np.isfinite(head.train_loss):
        raise TrainingDivergence(f"non-finite final {cfg.loss} loss")
    return head


def es_labels(labels: np.ndarray, var_values: np.ndarray, alpha: float) -> np.ndarray:
    """Map labels to ``labels * 1{labels >= VaR} / (1 - alpha)``.

    A least-squares regression of the result on the features estimates the
    conditional expected shortfall at level ``alpha``.
    """
    if not 0.5 < alpha < 1.0:
        raise ValueError("quantile level must lie in (1/2, 1)")
    labels = np.asarray(labels, float)
    var_values = np.asarray(var_values, float)
    if labels.shape != var_values.shape:
        raise ValueError("labels and VaR values differ in shape")
    return np.where(labels >= var_values, labels, 0.0) / (1.0 - alpha)


def tail_labels(labels: np.ndarray, var_values: np.ndarray, alpha: float,
                mode: str = "centered") -> np.ndarray:
    """ES regression labels.

    ``indicator`` is :func:`es_labels` itself.  ``centered`` applies the same
    map to ``labels - VaR`` and adds ``VaR`` back; by translation
    equivariance of ES both have the conditional ES as regression target,
    but the centred form is insensitive to first-order VaR errors.
    """
    if mode == "indicator":
        return es_labels(labels, var_values, alpha)
    if mode != "centered":
        raise ValueError(f"unknown ES label mode {mode!r}")
    excess = np.asarray(labels, float) - np.asarray(var_values, float)
    return var_values + es_labels(excess, np.zeros_like(excess), alpha)


def empirical_var_es(sample: np.ndarray, alpha: float):
    """Left ``alpha``-quantile and tail mean of a 1-d sample (sort-based)."""
    s = np.sort(np.asarray(sample, float))
    n = len(s)
    k = int(np.ceil(alpha * n)) - 1
    var = s[max(k, 0)]
    es = float(s[s >= var].mean())
    return float(var), es


# --- persistence -----------------------------------------------------------

def save_heads(prefix, heads: Sequence[Head], meta: Optional[dict] = None) -> tuple:
    """Write heads to ``<prefix>.bin`` (little-endian float64) + ``<prefix>.json``."""
    prefix = Path(prefix)
    chunks, entries, offset = [], [], 0
    for head in heads:
        parts = {
            "params": head.params.flat,
            "x_mean": head.x_mean,
            "x_scale": head.x_scale,
        }
        entry = {
            "dims": list(head.params.dims),
            "activation": head.params.activation,
            "kind": head.kind,
            "alpha": head.alpha,
            "y_loc": head.y_loc,
            "y_scale": head.y_scale,
            "train_loss": head.train_loss,
            "meta": head.meta,
        }
        for name, arr in parts.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            entry[name] = [offset, int(arr.size)]
            offset += arr.size
            chunks.append(arr)
        entries.append(entry)
    blob = np.concatenate(chunks) if chunks else np.zeros(0, "<f8")
    bin_path = prefix.with_suffix(".bin")
    json_path = prefix.with_suffix(".json")
    blob.astype("<f8").tofile(bin_path)
    json_path.write_text(json.dumps({"format": "pathxva-heads-v1", "dtype": "<f8",
                                     "binary": bin_path.name, "meta": meta or {},
                                     "heads": entries}, indent=1))
    return bin_path, json_path


def load_heads(prefix) -> list:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    blob = np.fromfile(prefix.with_suffix(".bin"), dtype="<f8")
    heads = []
    for e in manifest["heads"]:
        def take(name):
            off, size = e[name]
            return blob[off:off + size].astype(float)
        params = MlpParams(tuple(e["dims"]), take("params"), e["activation"])
        heads.append(Head(params, take("x_mean"), take("x_scale"), e["y_loc"], e["y_scale"],
                          e["kind"], e["alpha"], e["train_loss"], e.get("meta", {})))
    return heads
