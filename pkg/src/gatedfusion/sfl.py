"""Gated fusion classifier.

The auxiliary vector ``a`` (4 features) is mapped to a gating vector over
the embedding dimensions, the embedding ``x`` is modulated by it
element-wise, and a logistic head reads the result::

    g = sigmoid(W_g a + b_g)          # (D,)  every entry in (0, 1)
    p = sigmoid(w_c . (x * g) + b_c)  # P(class 1)

Training minimises mean binary cross-entropy with Adam on shuffled
mini-batches, early-stopping on a held-out slice of the training rows.
Everything runs in float64.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .data import stratified_split
from .errors import ConfigError, FormatError, TrainingError

MODEL_MAGIC = b"SFLM"
N_AUX = 4
LOSS_EPS = 1e-12
# largest float below 1 and smallest normal float: keep the gate inside (0, 1) under saturation
_GATE_HI = np.nextafter(1.0, 0.0)
_GATE_LO = np.finfo(np.float64).tiny


@dataclass
class SflParams:
    gate_weights: np.ndarray  # (D, 4)
    gate_bias: np.ndarray  # (D,)
    head_weights: np.ndarray  # (D,)
    head_bias: float

    @property
    def dim(self) -> int:
        return self.head_weights.shape[0]

    @classmethod
    def zeros(cls, dim: int, n_aux: int = N_AUX) -> "SflParams":
        return cls(np.zeros((dim, n_aux)), np.zeros(dim), np.zeros(dim), 0.0)

    @classmethod
    def glorot(cls, dim: int, rng: np.random.Generator, n_aux: int = N_AUX) -> "SflParams":
        gate_limit = np.sqrt(6.0 / (n_aux + dim))
        head_limit = np.sqrt(6.0 / (dim + 1))
        return cls(
            gate_weights=rng.uniform(-gate_limit, gate_limit, size=(dim, n_aux)),
            gate_bias=np.zeros(dim),
            head_weights=rng.uniform(-head_limit, head_limit, size=dim),
            head_bias=0.0,
        )

    def copy(self) -> "SflParams":
        return SflParams(
            self.gate_weights.copy(),
            self.gate_bias.copy(),
            self.head_weights.copy(),
            float(self.head_bias),
        )

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [self.gate_weights.ravel(), self.gate_bias, self.head_weights, [self.head_bias]]
        )

    @classmethod
    def from_flat(cls, vec: np.ndarray, dim: int, n_aux: int = N_AUX) -> "SflParams":
        vec = np.asarray(vec, dtype=np.float64)
        k = dim * n_aux
        return cls(
            gate_weights=vec[:k].reshape(dim, n_aux).copy(),
            gate_bias=vec[k : k + dim].copy(),
            head_weights=vec[k + dim : k + 2 * dim].copy(),
            head_bias=float(vec[k + 2 * dim]),
        )

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.flat()).all())


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 50
    early_stop_patience: int = 5
    validation_fraction: float = 0.1
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be at least 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in [0, 1)")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown sfl config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainTrace:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    epochs_run: int = 0
    best_epoch: int = 0


@dataclass
class Gradients:
    gate_weights: np.ndarray
    gate_bias: np.ndarray
    head_weights: np.ndarray
    head_bias: float

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [self.gate_weights.ravel(), self.gate_bias, self.head_weights, [self.head_bias]]
        )


def gate(params: SflParams, f_struct) -> np.ndarray:
    """Gating vector(s) for one aux row or a batch of rows."""
    a = np.asarray(f_struct, dtype=np.float64)
    return np.clip(expit(a @ params.gate_weights.T + params.gate_bias), _GATE_LO, _GATE_HI)


def fuse(f_deep, g) -> np.ndarray:
    x = np.asarray(f_deep, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.shape != g.shape:
        raise ValueError(f"cannot fuse shapes {x.shape} and {g.shape}")
    return x * g


def forward(params: SflParams, f_deep, f_struct):
    fused = fuse(f_deep, gate(params, f_struct))
    return expit(fused @ params.head_weights + params.head_bias)


def loss(probabilities, labels) -> float:
    p = np.clip(np.asarray(probabilities, dtype=np.float64), LOSS_EPS, 1.0 - LOSS_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def backward(params: SflParams, deep, aux, labels) -> Gradients:
    """Exact gradient of mean BCE over the batch.

    With ``delta = p - y`` the head gradients are ``delta * fused`` and the
    gate pre-activation receives ``delta * w_c * x * g * (1 - g)``.
    """
    deep = np.asarray(deep, dtype=np.float64)
    aux = np.asarray(aux, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n = y.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    g = gate(params, aux)
    fused = deep * g
    p = expit(fused @ params.head_weights + params.head_bias)
    delta = p - y
    d_pre = delta[:, None] * params.head_weights * deep * g * (1.0 - g)
    return Gradients(
        gate_weights=d_pre.T @ aux / n,
        gate_bias=d_pre.mean(axis=0),
        head_weights=fused.T @ delta / n,
        head_bias=float(delta.mean()),
    )


def predict_proba(params: SflParams, deep, aux, batch_size: Optional[int] = None) -> np.ndarray:
    deep = np.atleast_2d(np.asarray(deep, dtype=np.float64))
    aux = np.atleast_2d(np.asarray(aux, dtype=np.float64))
    if deep.shape[1] != params.dim or aux.shape[1] != params.gate_weights.shape[1]:
        raise ValueError("input widths do not match the model")
    if batch_size is None:
        return forward(params, deep, aux)
    return np.concatenate(
        [
            forward(params, deep[i : i + batch_size], aux[i : i + batch_size])
            for i in range(0, deep.shape[0], batch_size)
        ]
    )


class _Adam:
    def __init__(self, params: SflParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = np.zeros_like(params.flat())
        self.v = np.zeros_like(self.m)
        self.t = 0

    def step(self, flat: np.ndarray, grad: np.ndarray) -> np.ndarray:
        c = self.cfg
        self.t += 1
        self.m = c.adam_beta1 * self.m + (1 - c.adam_beta1) * grad
        self.v = c.adam_beta2 * self.v + (1 - c.adam_beta2) * grad * grad
        m_hat = self.m / (1 - c.adam_beta1**self.t)
        v_hat = self.v / (1 - c.adam_beta2**self.t)
        return flat - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.adam_epsilon)


def _validation_carve(labels: np.ndarray, cfg: TrainConfig):
    if cfg.validation_fraction == 0:
        idx = np.arange(labels.size)
        return idx, idx[:0]
    split = stratified_split(labels, cfg.validation_fraction, seed=cfg.seed)
    return split.train_indices, split.test_indices


def train(
    deep,
    aux,
    labels,
    config: Optional[TrainConfig] = None,
    init: Optional[SflParams] = None,
) -> tuple[SflParams, TrainTrace]:
    """Fit the gated classifier.

    A stratified ``validation_fraction`` slice of the rows is held out for
    early stopping; the parameters from the epoch with the lowest validation
    loss are returned. With no validation slice the training loss is
    monitored instead. Shuffling and initialisation draw from ``config.seed``.
    """
    cfg = config or TrainConfig()
    deep = np.asarray(deep, dtype=np.float64)
    aux = np.asarray(aux, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if np.unique(y).size < 2:
        raise TrainingError("training data must contain both classes")
    if deep.shape[0] != aux.shape[0] or deep.shape[0] != y.shape[0]:
        raise TrainingError("deep, aux and labels must have the same number of rows")

    fit_idx, val_idx = _validation_carve(y, cfg)
    rng = np.random.default_rng(cfg.seed)
    params = init.copy() if init is not None else SflParams.glorot(deep.shape[1], rng, aux.shape[1])
    dim, n_aux = params.dim, params.gate_weights.shape[1]
    xf, af, yf = deep[fit_idx], aux[fit_idx], y[fit_idx]
    xv, av, yv = deep[val_idx], aux[val_idx], y[val_idx]
    batch = min(cfg.batch_size, fit_idx.size)

    def monitored(p: SflParams) -> float:
        if val_idx.size:
            return loss(forward(p, xv, av), yv)
        return loss(forward(p, xf, af), yf)

    opt = _Adam(params, cfg)
    flat = params.flat()
    best, best_loss = params.copy(), monitored(params)
    trace = TrainTrace()
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(fit_idx.size)
        for start in range(0, order.size, batch):
            rows = order[start : start + batch]
            current = SflParams.from_flat(flat, dim, n_aux)
            grad = backward(current, xf[rows], af[rows], yf[rows]).flat()
            flat = opt.step(flat, grad)
        params = SflParams.from_flat(flat, dim, n_aux)
        if not params.is_finite():
            raise TrainingError(f"parameters diverged at epoch {epoch}")
        trace.train_loss.append(loss(forward(params, xf, af), yf))
        trace.val_loss.append(monitored(params) if val_idx.size else trace.train_loss[-1])
        trace.epochs_run = epoch
        if trace.val_loss[-1] < best_loss:
            best, best_loss = params.copy(), trace.val_loss[-1]
            trace.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    return best, trace


# ---------------------------------------------------------------- persistence


def data_checksum(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_model(
    path,
    params: SflParams,
    config: Optional[TrainConfig] = None,
    checksums: Optional[dict] = None,
) -> None:
    """Write the ``SFLM`` blob plus a ``<path>.json`` sidecar.

    Blob layout (little-endian): magic, u32 D, then gate_weights (D x 4),
    gate_bias (D), head_weights (D) and head_bias as float64.
    """
    if params.gate_weights.shape[1] != N_AUX:
        raise ValueError("the SFLM format stores exactly 4 auxiliary inputs")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", params.dim))
        fh.write(params.flat().astype("<f8").tobytes())
    sidecar = {
        "format": "SFLM",
        "dim": params.dim,
        "train_config": asdict(config) if config is not None else None,
        "data_checksums": checksums or {},
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_model(path) -> SflParams:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not an SFLM model file")
    (dim,) = struct.unpack_from("<I", raw, 4)
    expected = 8 + 8 * (dim * N_AUX + 2 * dim + 1)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return SflParams.from_flat(np.frombuffer(raw, dtype="<f8", offset=8), dim)
