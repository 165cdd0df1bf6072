"""fELBO training with OOD measure points, plus the softmax baselines.

The estimators follow the scikit-learn API (``fit`` / ``predict`` /
``predict_proba`` / ``get_params``) and expect standardized features, so
they compose with ``StandardScaler`` in a ``Pipeline`` when the inputs are
raw.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import dirichlet
from .data import Dataset, gen_ood_train
from .exceptions import ConfigurationError, DomainError, TrainingError
from .net import (
    Architecture,
    adam_step,
    alpha_head,
    backward,
    backward_logits,
    forward,
    init_params,
)
from .numerics import Rng, digamma_trigamma, ln_gamma

__all__ = [
    "FsviConfig",
    "FelboResult",
    "MeasurePointBatch",
    "felbo_loss",
    "sample_measure_points",
    "softmax",
    "FunctionalVIClassifier",
    "StandardClassifier",
    "MCDropoutClassifier",
    "DeepEnsembleClassifier",
    "train_fsvi",
    "train_standard",
    "train_mc_dropout",
    "train_ensemble",
    "predict_mc_dropout",
    "predict_ensemble",
]

# sub-stream keys for Rng.stream
_INIT, _SHUFFLE, _OOD, _DROPOUT = 1, 2, 3, 4


@dataclass
class FsviConfig:
    hidden_sizes: tuple[int, ...] = (64, 64)
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    kl_weight: float = 0.01
    kl_warmup_epochs: int = 0
    ood_points_per_batch: int | None = 1024
    ood_std: float = 2.0
    alpha_head: str = "exp"
    dropout_rate: float = 0.1

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.epochs < 0 or self.batch_size < 1 or self.kl_warmup_epochs < 0:
            raise ConfigurationError("epochs/warmup must be >= 0 and batch_size >= 1")
        if self.kl_weight < 0:
            raise ConfigurationError("kl_weight must be >= 0")
        if self.ood_points_per_batch is not None and self.ood_points_per_batch < 0:
            raise ConfigurationError("ood_points_per_batch must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass
class FelboResult:
    loss: float
    nll: float
    kl: float
    grad_in: np.ndarray
    grad_ood: np.ndarray


@dataclass
class MeasurePointBatch:
    in_x: np.ndarray
    in_y: np.ndarray
    ood_x: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))


def felbo_loss(alphas_in, labels, alphas_ood, lam) -> FelboResult:
    """Negative fELBO for one batch and its gradient w.r.t. every alpha.

    ``loss = mean_i NLL(alpha_i, y_i) + lam * mean_j KL(alpha_j || prior)``,
    with ``j`` running over in-distribution and OOD points together. OOD
    points only enter the KL term.
    """
    a_in = dirichlet.check_alpha(np.atleast_2d(alphas_in))
    k = a_in.shape[1]
    a_ood = np.asarray(alphas_ood, dtype=np.float64).reshape(-1, k)
    if a_ood.size:
        dirichlet.check_alpha(a_ood)
    n_in = a_in.shape[0]
    if n_in == 0:
        raise TrainingError("felbo_loss needs at least one in-distribution point")
    n_all = n_in + a_ood.shape[0]

    y = dirichlet._labels(np.asarray(labels), a_in)
    a = np.concatenate([a_in, a_ood])
    a0 = a.sum(axis=1)
    # one special-function pass over every component and every row sum
    psi, tri = digamma_trigamma(np.concatenate([a.ravel(), a0]))
    psi_a, psi_0 = psi[: a.size].reshape(a.shape), psi[a.size :]
    tri_a, tri_0 = tri[: a.size].reshape(a.shape), tri[a.size :]
    rows = np.arange(n_in)

    nll = float(np.mean(psi_0[:n_in] - psi_a[rows, y]))
    lg = ln_gamma(np.concatenate([a.ravel(), a0]))
    kl_rows = (
        lg[a.size :]
        - lg[: a.size].reshape(a.shape).sum(axis=1)
        - math.lgamma(k)
        + np.sum((a - 1.0) * (psi_a - psi_0[:, None]), axis=1)
    )
    kl = float(np.sum(np.maximum(kl_rows, 0.0)) / n_all)

    g_kl = (a - 1.0) * tri_a - (a0 - k)[:, None] * tri_0[:, None]
    g = (lam / n_all) * g_kl
    g_nll = np.repeat(tri_0[:n_in, None], k, axis=1)
    g_nll[rows, y] -= tri_a[rows, y]
    grad_in = g[:n_in] + g_nll / n_in
    grad_ood = g[n_in:]
    return FelboResult(nll + lam * kl, nll, kl, grad_in, grad_ood)


def sample_measure_points(features, labels, batch_indices, ood_generator, n_ood, rng) -> MeasurePointBatch:
    """The minibatch itself plus ``n_ood`` fresh draws from ``ood_generator``.

    ``ood_generator(n, rng)`` must return an ``(n, d)`` array.
    """
    idx = np.asarray(batch_indices)
    in_x, in_y = features[idx], labels[idx]
    if n_ood < 0:
        raise ConfigurationError("n_ood must be >= 0")
    if n_ood == 0:
        return MeasurePointBatch(in_x, in_y, np.empty((0, features.shape[1])))
    return MeasurePointBatch(in_x, in_y, np.asarray(ood_generator(n_ood, rng)))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class _TrunkClassifier(ClassifierMixin, BaseEstimator):
    """Shared minibatch/Adam loop over the ReLU trunk.

    Subclasses provide ``_batch(params, xb, yb, epoch)`` returning
    ``(grads, nll, kl, lam)`` and ``_scores(params, X)`` returning class
    probabilities in eval mode.
    """

    _dropout = 0.0

    def _validate_common(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("need epochs >= 0, batch_size >= 1 and lr > 0")
        if not 0.0 <= self._dropout < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self._validate_common()
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ConfigurationError("need at least two classes to fit")
        self.n_features_in_ = X.shape[1]
        arch = Architecture(X.shape[1], tuple(self.hidden_sizes), self.classes_.size)
        root = Rng(self.random_state)
        self._n_train = X.shape[0]
        self._setup(root, X.shape[1])
        params = init_params(arch, root.stream(_INIT))
        shuffle_rng = root.stream(_SHUFFLE)
        self._dropout_rng = root.stream(_DROPOUT)
        log = []
        n = X.shape[0]
        for epoch in range(self.epochs):
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(n)
            sums = np.zeros(2)
            lam = 0.0
            for b, start in enumerate(range(0, n, self.batch_size)):
                idx = order[start : start + self.batch_size]
                try:
                    with np.errstate(invalid="ignore", over="ignore"):
                        grads, nll, kl, lam = self._batch(params, X, y_enc, idx, epoch)
                except DomainError as exc:
                    raise TrainingError(f"non-finite network output at epoch {epoch}, batch {b}: {exc}") from None
                if not (np.isfinite(nll) and np.isfinite(kl)):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b} (nll={nll}, kl={kl})")
                try:
                    params = adam_step(params, grads, self.lr)
                except TrainingError as exc:
                    raise TrainingError(f"{exc} at epoch {epoch}, batch {b}") from None
                sums += np.array([nll, kl]) * idx.size
            acc = float(np.mean(np.argmax(self._scores(params, X), axis=1) == y_enc))
            log.append(
                {
                    "epoch": epoch,
                    "loss_nll": float(sums[0] / n),
                    "loss_kl": float(sums[1] / n),
                    "lambda": float(lam),
                    "train_acc": acc,
                    "wall_ms": round(1000.0 * (time.perf_counter() - t0), 3),
                }
            )
        self.params_ = params
        self.log_ = log
        return self

    def _setup(self, root, dim):
        pass

    def _check_X(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model expects {self.n_features_in_}")
        return X

    def predict_proba(self, X):
        X = self._check_X(X)
        return self._scores(self.params_, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


class FunctionalVIClassifier(_TrunkClassifier):
    """Dirichlet-output classifier trained on the negative fELBO.

    The trunk outputs concentrations ``alpha(x)``; training minimises the
    expected cross-entropy under ``Dir(alpha)`` on labelled points plus a
    KL pull towards the flat Dirichlet at both the labelled points and
    Gaussian OOD measure points.

    Parameters
    ----------
    hidden_sizes : tuple of int, default=(64, 64)
    epochs : int, default=200
    batch_size : int, default=128
    lr : float, default=1e-3
        Adam step size.
    kl_weight : float, default=0.01
        Weight of the mean KL term relative to the mean NLL term. The KL
        at labelled points caps confidence, so values near 1 leave the
        model badly underconfident.
    kl_warmup_epochs : int, default=0
        Linear ramp of the KL weight from 0 over this many epochs.
    ood_points_per_batch : int or None, default=1024
        OOD measure points per minibatch; ``None`` means ``batch_size``.
    ood_std : float, default=2.0
        Standard deviation of the Gaussian OOD generator.
    alpha_head : {"softplus", "exp"}, default="exp"
        ``exp`` lets concentrations grow quickly enough to reach high
        confidence; ``softplus`` trains markedly underconfident.
    random_state : int, default=0
    """

    def __init__(
        self,
        hidden_sizes=(64, 64),
        epochs=200,
        batch_size=128,
        lr=1e-3,
        kl_weight=0.01,
        kl_warmup_epochs=0,
        ood_points_per_batch=1024,
        ood_std=2.0,
        alpha_head="exp",
        random_state=0,
    ):
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.kl_weight = kl_weight
        self.kl_warmup_epochs = kl_warmup_epochs
        self.ood_points_per_batch = ood_points_per_batch
        self.ood_std = ood_std
        self.alpha_head = alpha_head
        self.random_state = random_state

    def _setup(self, root, dim):
        if self.kl_weight < 0:
            raise ConfigurationError("kl_weight must be >= 0")
        if self.alpha_head not in ("softplus", "exp"):
            raise ConfigurationError(f"unknown alpha head {self.alpha_head!r}")
        self._ood_rng = root.stream(_OOD)
        self._n_ood = self.batch_size if self.ood_points_per_batch is None else int(self.ood_points_per_batch)
        self._dim = dim

    def _lambda(self, epoch):
        if self.kl_warmup_epochs > 0:
            return self.kl_weight * min(1.0, (epoch + 1) / self.kl_warmup_epochs)
        return float(self.kl_weight)

    def _ood(self, n, rng):
        return gen_ood_train(self._dim, n, rng, std=self.ood_std)

    def _batch(self, params, X, y, idx, epoch):
        mp = sample_measure_points(X, y, idx, self._ood, self._n_ood, self._ood_rng)
        xs = np.concatenate([mp.in_x, mp.ood_x]) if mp.ood_x.size else mp.in_x
        logits, trace = forward(params, xs, "train")
        alphas = alpha_head(logits, self.alpha_head)
        n_in = mp.in_x.shape[0]
        lam = self._lambda(epoch)
        res = felbo_loss(alphas[:n_in], mp.in_y, alphas[n_in:], lam)
        d_alpha = np.concatenate([res.grad_in, res.grad_ood])
        return backward(params, trace, d_alpha, self.alpha_head), res.nll, res.kl, lam

    def _alpha(self, params, X):
        logits, _ = forward(params, X, "eval")
        return alpha_head(logits, self.alpha_head)

    def _scores(self, params, X):
        return dirichlet.predictive_mean(self._alpha(params, X))

    def predict_alpha(self, X):
        """Dirichlet concentrations, shape ``(n, K)``."""
        X = self._check_X(X)
        return self._alpha(self.params_, X)

    def output_entropy(self, X):
        return dirichlet.output_entropy(self.predict_alpha(X))

    def differential_entropy(self, X):
        return dirichlet.differential_entropy(self.predict_alpha(X))


class StandardClassifier(_TrunkClassifier):
    """Softmax trunk trained with mean cross-entropy.

    ``dropout_rate`` > 0 trains with dropout; prediction stays
    deterministic (eval mode).
    """

    def __init__(self, hidden_sizes=(64, 64), epochs=200, batch_size=128, lr=1e-3, dropout_rate=0.0, random_state=0):
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.dropout_rate = dropout_rate
        self.random_state = random_state

    @property
    def _dropout(self):
        return self.dropout_rate

    def _batch(self, params, X, y, idx, epoch):
        logits, trace = forward(params, X[idx], "train", self.dropout_rate, self._dropout_rng)
        p = softmax(logits)
        rows = np.arange(idx.size)
        ce = float(np.mean(-np.log(np.maximum(p[rows, y[idx]], 1e-300))))
        d_logits = p.copy()
        d_logits[rows, y[idx]] -= 1.0
        d_logits /= idx.size
        return backward_logits(params, trace, d_logits), ce, 0.0, 0.0

    def _logits(self, params, X):
        return forward(params, X, "eval")[0]

    def _scores(self, params, X):
        return softmax(self._logits(params, X))


class MCDropoutClassifier(StandardClassifier):
    """Dropout-trained softmax trunk; predictions average ``n_passes``
    stochastic forward passes with dropout left on."""

    def __init__(
        self,
        hidden_sizes=(64, 64),
        epochs=200,
        batch_size=128,
        lr=1e-3,
        dropout_rate=0.1,
        n_passes=32,
        random_state=0,
    ):
        super().__init__(hidden_sizes, epochs, batch_size, lr, dropout_rate, random_state)
        self.n_passes = n_passes

    def predict_proba(self, X):
        X = self._check_X(X)
        return predict_mc_dropout(self, X, self.n_passes, Rng(self.random_state).stream(_DROPOUT + 100))


class DeepEnsembleClassifier(ClassifierMixin, BaseEstimator):
    """Average of ``n_members`` softmax trunks seeded ``random_state + i``."""

    def __init__(self, n_members=5, hidden_sizes=(64, 64), epochs=200, batch_size=128, lr=1e-3, random_state=0):
        self.n_members = n_members
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y):
        if self.n_members < 1:
            raise DomainError("ensemble size must be >= 1")
        root = Rng(self.random_state)
        self.estimators_ = [
            StandardClassifier(
                self.hidden_sizes, self.epochs, self.batch_size, self.lr, 0.0, root.spawn(i).seed
            ).fit(X, y)
            for i in range(self.n_members)
        ]
        self.classes_ = self.estimators_[0].classes_
        self.n_features_in_ = self.estimators_[0].n_features_in_
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "estimators_")
        return predict_ensemble(self, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


def predict_mc_dropout(model: StandardClassifier, X, n_passes: int, rng: Rng) -> np.ndarray:
    """Mean softmax over ``n_passes`` dropout-active forward passes.

    Each pass draws its masks from its own stream seeded from ``rng``, and
    passes are accumulated in index order.
    """
    if n_passes < 1:
        raise DomainError("need at least one MC pass")
    X = model._check_X(X)
    seeds = [int(s) for s in rng._bits.random_raw(n_passes)]
    acc = np.zeros((X.shape[0], model.classes_.size))
    for s in seeds:
        logits, _ = forward(model.params_, X, "mc_sample", model.dropout_rate, Rng(s))
        acc += softmax(logits)
    return acc / n_passes


def predict_ensemble(ensemble: DeepEnsembleClassifier, X) -> np.ndarray:
    probs = [m.predict_proba(X) for m in ensemble.estimators_]
    out = np.zeros_like(probs[0])
    for p in probs:
        out += p
    return out / len(probs)


def _xy(dataset: Dataset):
    return dataset.features, dataset.labels


def train_fsvi(dataset: Dataset, config: FsviConfig):
    """Fit a ``FunctionalVIClassifier``; returns ``(model, log)``."""
    model = FunctionalVIClassifier(
        hidden_sizes=config.hidden_sizes,
        epochs=config.epochs,
        batch_size=config.batch_size,
        lr=config.lr,
        kl_weight=config.kl_weight,
        kl_warmup_epochs=config.kl_warmup_epochs,
        ood_points_per_batch=config.ood_points_per_batch,
        ood_std=config.ood_std,
        alpha_head=config.alpha_head,
        random_state=config.seed,
    ).fit(*_xy(dataset))
    return model, model.log_


def train_standard(dataset: Dataset, config: FsviConfig):
    model = StandardClassifier(
        config.hidden_sizes, config.epochs, config.batch_size, config.lr, 0.0, config.seed
    ).fit(*_xy(dataset))
    return model, model.log_


def train_mc_dropout(dataset: Dataset, config: FsviConfig, n_passes: int = 32):
    if config.dropout_rate <= 0:
        raise ConfigurationError("MC dropout needs dropout_rate > 0")
    model = MCDropoutClassifier(
        config.hidden_sizes, config.epochs, config.batch_size, config.lr, config.dropout_rate, n_passes, config.seed
    ).fit(*_xy(dataset))
    return model, model.log_


def train_ensemble(dataset: Dataset, config: FsviConfig, size: int = 5):
    model = DeepEnsembleClassifier(
        size, config.hidden_sizes, config.epochs, config.batch_size, config.lr, config.seed
    ).fit(*_xy(dataset))
    return model, [m.log_ for m in model.estimators_]
