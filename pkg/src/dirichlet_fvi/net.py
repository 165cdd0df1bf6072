"""Fully connected ReLU classifier with hand-written backprop and Adam.

Inputs are batched as ``(n, d)``; a single ``(d,)`` vector is accepted and
treated as a batch of one. Weight matrices are stored ``(fan_in, fan_out)``
so a layer computes ``h @ W + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, DataError, TrainingError
from .numerics import Rng

__all__ = [
    "ALPHA_EPS",
    "Architecture",
    "MlpParams",
    "ForwardTrace",
    "init_params",
    "forward",
    "alpha_head",
    "alpha_head_backward",
    "backward",
    "backward_logits",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]

ALPHA_EPS = 1e-3
_EXP_CLAMP = 15.0
_HEADS = ("softplus", "exp")
CHECKPOINT_FORMAT = "dirichlet-fvi-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_sizes: tuple[int, ...]
    output_dim: int

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 2 or any(h < 1 for h in self.hidden_sizes):
            raise ConfigurationError(
                f"invalid architecture {self.input_dim} -> {list(self.hidden_sizes)} -> {self.output_dim}"
            )
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_sizes, self.output_dim]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_sizes": list(self.hidden_sizes),
            "output_dim": self.output_dim,
        }


@dataclass
class MlpParams:
    """Layer weights and biases plus Adam moments.

    ``weights[i]`` has shape ``(fan_in, fan_out)`` and ``biases[i]`` shape
    ``(fan_out,)``. ``m`` and ``v`` mirror ``arrays()`` one to one.
    """

    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        sizes = self.arch.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(self.weights):
            raise ConfigurationError("layer count does not match architecture")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ConfigurationError(f"layer {i} has shapes {w.shape}, {b.shape}")
        if not self.m:
            self.m = [np.zeros_like(p) for p in self.arrays()]
            self.v = [np.zeros_like(p) for p in self.arrays()]

    def arrays(self) -> list[np.ndarray]:
        """Parameters in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.arrays()])

    def with_flat(self, flat) -> "MlpParams":
        """Copy with parameters replaced from a flat vector; Adam state kept."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ConfigurationError(f"expected {self.n_params} values, got {flat.size}")
        arrays = _unflatten(flat, self.arrays())
        return MlpParams(
            self.arch,
            arrays[0::2],
            arrays[1::2],
            [x.copy() for x in self.m],
            [x.copy() for x in self.v],
            self.step,
        )


def _unflatten(flat, like):
    out, pos = [], 0
    for p in like:
        out.append(flat[pos : pos + p.size].reshape(p.shape).copy())
        pos += p.size
    return out


@dataclass
class ForwardTrace:
    x: np.ndarray
    pre: list[np.ndarray]
    act: list[np.ndarray]
    masks: list[np.ndarray | None]
    logits: np.ndarray
    squeeze: bool = False


def init_params(arch: Architecture, rng: Rng) -> MlpParams:
    """He-normal weights, zero biases."""
    sizes = arch.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(arch, weights, biases)


def forward(params: MlpParams, x, mode="eval", dropout_rate=0.0, rng=None):
    """Run the trunk and return ``(logits, trace)``.

    ``mode`` is ``"train"``, ``"eval"`` or ``"mc_sample"``. Dropout masks
    hidden activations in the first and last modes only, with inverted
    scaling so that eval needs no rescale.
    """
    if mode not in ("train", "eval", "mc_sample"):
        raise ConfigurationError(f"unknown forward mode {mode!r}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigurationError("dropout_rate must lie in [0, 1)")
    xa = np.asarray(x, dtype=np.float64)
    squeeze = xa.ndim == 1
    if squeeze:
        xa = xa[None, :]
    if xa.ndim != 2 or xa.shape[1] != params.arch.input_dim:
        raise DataError(f"expected inputs with {params.arch.input_dim} features, got shape {np.shape(x)}")
    if not np.all(np.isfinite(xa)):
        raise DataError("non-finite input features")
    use_dropout = dropout_rate > 0.0 and mode != "eval"
    if use_dropout and rng is None:
        raise ConfigurationError("dropout requires an rng")

    pre, act, masks = [], [xa], []
    h = xa
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre.append(z)
        if i == last:
            break
        h = np.maximum(z, 0.0)
        if use_dropout:
            keep = (rng.uniform(size=h.shape) >= dropout_rate).astype(np.float64)
            keep /= 1.0 - dropout_rate
            h = h * keep
            masks.append(keep)
        else:
            masks.append(None)
        act.append(h)
    logits = pre[-1]
    trace = ForwardTrace(xa, pre, act, masks, logits, squeeze)
    return (logits[0] if squeeze else logits), trace


def alpha_head(logits, head="softplus") -> np.ndarray:
    """Map logits to Dirichlet concentrations, bounded below by ``ALPHA_EPS``."""
    z = np.asarray(logits, dtype=np.float64)
    if head == "softplus":
        return np.logaddexp(0.0, z) + ALPHA_EPS
    if head == "exp":
        return np.exp(np.clip(z, -_EXP_CLAMP, _EXP_CLAMP)) + ALPHA_EPS
    raise ConfigurationError(f"alpha head must be one of {_HEADS}, got {head!r}")


def alpha_head_backward(logits, d_alpha, head="softplus") -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if head == "softplus":
        # d softplus / dz = sigmoid(z), evaluated without overflow
        return d_alpha * np.exp(-np.logaddexp(0.0, -z))
    if head == "exp":
        inside = np.abs(z) <= _EXP_CLAMP
        return d_alpha * np.where(inside, np.exp(np.clip(z, -_EXP_CLAMP, _EXP_CLAMP)), 0.0)
    raise ConfigurationError(f"alpha head must be one of {_HEADS}, got {head!r}")


def backward_logits(params: MlpParams, trace: ForwardTrace, d_logits) -> list[np.ndarray]:
    """Parameter gradients given the loss gradient w.r.t. the logits.

    Returned in ``MlpParams.arrays()`` order.
    """
    g = np.asarray(d_logits, dtype=np.float64)
    if trace.squeeze and g.ndim == 1:
        g = g[None, :]
    if g.shape != trace.logits.shape:
        raise RuntimeError(f"upstream gradient shape {g.shape} != logits {trace.logits.shape}")
    n_layers = len(params.weights)
    grads = [None] * (2 * n_layers)
    for i in range(n_layers - 1, -1, -1):
        grads[2 * i] = trace.act[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i == 0:
            break
        g = g @ params.weights[i].T
        if trace.masks[i - 1] is not None:
            g = g * trace.masks[i - 1]
        g = g * (trace.pre[i - 1] > 0.0)
    return grads


def backward(params: MlpParams, trace: ForwardTrace, d_alpha, head="softplus") -> list[np.ndarray]:
    """Parameter gradients given the loss gradient w.r.t. the concentrations."""
    logits = trace.logits[0] if trace.squeeze else trace.logits
    d_logits = alpha_head_backward(logits, np.asarray(d_alpha, dtype=np.float64), head)
    return backward_logits(params, trace, d_logits)


def adam_step(params: MlpParams, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> MlpParams:
    """One bias-corrected Adam update; returns a new ``MlpParams``."""
    if lr <= 0:
        raise ConfigurationError("learning rate must be positive")
    current = params.arrays()
    if len(grads) != len(current):
        raise RuntimeError("gradient list does not match parameters")
    for g, p in zip(grads, current):
        if g.shape != p.shape:
            raise RuntimeError(f"gradient shape {g.shape} != parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient")
    t = params.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(current, grads, params.m, params.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return MlpParams(params.arch, new_p[0::2], new_p[1::2], new_m, new_v, t)


def save_checkpoint(path, params: MlpParams, **meta) -> None:
    """Write a JSON checkpoint.

    ``meta`` is stored verbatim under ``"meta"`` (method, alpha head,
    standardization constants, class labels, ...). Floats are written with
    ``repr`` precision so a load reproduces them bit-exactly.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": params.arch.to_dict(),
        "params": params.flat().tolist(),
        "adam": {
            "step": params.step,
            "m": np.concatenate([x.ravel() for x in params.m]).tolist(),
            "v": np.concatenate([x.ravel() for x in params.v]).tolist(),
        },
        "meta": meta,
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[MlpParams, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    a = doc["architecture"]
    arch = Architecture(a["input_dim"], tuple(a["hidden_sizes"]), a["output_dim"])
    sizes = arch.layer_sizes
    like = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        like += [np.empty((fan_in, fan_out)), np.empty(fan_out)]
    arrays = _unflatten(np.asarray(doc["params"], dtype=np.float64), like)
    m = _unflatten(np.asarray(doc["adam"]["m"], dtype=np.float64), like)
    v = _unflatten(np.asarray(doc["adam"]["v"], dtype=np.float64), like)
    params = MlpParams(arch, arrays[0::2], arrays[1::2], m, v, int(doc["adam"]["step"]))
    return params, doc.get("meta", {})
