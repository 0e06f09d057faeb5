"""Desk-scale losses with optional analytic-gradient oracles.

Every objective evaluates ``loss(store, batch)`` where ``batch`` is an index
array into its dataset (``None`` means the full dataset). Analytic gradients
exist only for testing and theory checks; the zeroth-order path never calls
them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .paramspace import ParamStore
from .randcore import NoiseStream

DATASET_KINDS = ("synthetic-linear", "synthetic-blobs", "two-moons-like")
METRICS = ("accuracy", "macro_f1")


class MissingOracleError(RuntimeError):
    pass


class EmptyBatchError(ValueError):
    pass


# --- datasets ----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic-linear"
    n_examples: int = 200
    dim: int = 2
    classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {DATASET_KINDS}")
        if self.n_examples < 1 or self.dim < 1:
            raise ValueError("dataset needs at least one example and one feature")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.kind != "synthetic-blobs" and self.classes != 2:
            raise ValueError(f"{self.kind} is binary only")
        if self.kind == "two-moons-like" and self.dim < 2:
            raise ValueError("two-moons-like needs dim >= 2")


@dataclass
class Dataset:
    X: np.ndarray
    labels: np.ndarray  # int class ids in [0, classes)
    classes: int

    @property
    def n_examples(self) -> int:
        return self.X.shape[0]

    @property
    def signs(self) -> np.ndarray:
        """Binary labels mapped to -1/+1."""
        return 2.0 * self.labels - 1.0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"feature_{j}" for j in range(self.X.shape[1])] + ["label"])
            for row, lab in zip(self.X, self.labels):
                w.writerow([repr(float(v)) for v in row] + [int(lab)])


def _uniforms(stream: NoiseStream, count: int) -> np.ndarray:
    bits = stream.raw_u64(count) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * 2.0**-53


def make_dataset(spec: DatasetSpec) -> Dataset:
    """Synthetic data regenerated bit-for-bit from ``spec.seed``."""
    s = NoiseStream(spec.seed)
    n, dim = spec.n_examples, spec.dim
    if spec.kind == "synthetic-linear":
        w = s.normals(dim)
        X = s.normals(n * dim).reshape(n, dim)
        labels = (X @ w > 0).astype(np.int64)
    elif spec.kind == "synthetic-blobs":
        centers = 3.0 * s.normals(spec.classes * dim).reshape(spec.classes, dim)
        labels = np.arange(n, dtype=np.int64) % spec.classes
        X = centers[labels] + s.normals(n * dim).reshape(n, dim)
    else:
        labels = np.arange(n, dtype=np.int64) % 2
        angle = math.pi * _uniforms(s, n)
        X = 0.1 * s.normals(n * dim).reshape(n, dim)
        upper = labels == 0
        X[:, 0] += np.where(upper, np.cos(angle), 1.0 - np.cos(angle))
        X[:, 1] += np.where(upper, np.sin(angle), 0.5 - np.sin(angle))
    return Dataset(X, labels, spec.classes)


# --- base --------------------------------------------------------------------


class Objective:
    """Loss over a parameter store and a minibatch of dataset indices."""

    dataset_size: int = 1

    def __init__(self):
        self.evals = 0

    def __call__(self, store: ParamStore, batch: np.ndarray | None = None) -> float:
        self.evals += 1
        return float(self.loss(store, self._batch(batch)))

    def _batch(self, batch) -> np.ndarray:
        if batch is None:
            return np.arange(self.dataset_size)
        batch = np.asarray(batch, dtype=np.int64)
        if batch.size == 0:
            raise EmptyBatchError("batch is empty")
        return batch

    def loss(self, store: ParamStore, batch: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, store: ParamStore, batch: np.ndarray | None = None) -> np.ndarray:
        raise MissingOracleError(f"{type(self).__name__} has no analytic gradient")

    def per_example_grads(self, store: ParamStore) -> np.ndarray:
        return np.stack([self.grad(store, np.array([i])) for i in range(self.dataset_size)])

    def per_example_grad_norm_max(self, store: ParamStore) -> float:
        return float(np.sqrt((self.per_example_grads(store) ** 2).sum(axis=1).max()))

    def init_store(self, seed: int = 0, scale: float = 0.0) -> ParamStore:
        raise NotImplementedError


# --- quadratic ---------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticSpec:
    eigenvalues: tuple[float, ...]
    shift: tuple[float, ...] | None = None


class Quadratic(Objective):
    """``0.5 * sum(lam * (theta - mu)**2)`` over a single parameter group ``theta``."""

    dataset_size = 1

    def __init__(self, eigenvalues: Sequence[float], shift: Sequence[float] | None = None):
        super().__init__()
        lam = np.asarray(eigenvalues, dtype=np.float64)
        if lam.ndim != 1 or lam.size == 0:
            raise ValueError("eigenvalues must be a non-empty list")
        if np.any(lam < 0):
            raise ValueError("eigenvalues must be non-negative")
        if not np.any(lam > 0):
            raise ValueError("all-zero spectrum has no curvature")
        self.eigenvalues = lam
        self.shift = np.zeros_like(lam) if shift is None else np.asarray(shift, dtype=np.float64)
        if self.shift.shape != lam.shape:
            raise ValueError("shift must match the eigenvalue count")

    @property
    def dim(self) -> int:
        return self.eigenvalues.size

    @property
    def smoothness(self) -> float:
        return float(self.eigenvalues.max())

    @property
    def effective_rank(self) -> float:
        return float(self.eigenvalues.sum() / self.eigenvalues.max())

    @property
    def pl_constant(self) -> float:
        return float(self.eigenvalues[self.eigenvalues > 0].min())

    def loss(self, store, batch):
        diff = np.asarray(store.values, dtype=np.float64) - self.shift
        return 0.5 * np.dot(self.eigenvalues, diff * diff)

    def grad(self, store, batch=None):
        return self.eigenvalues * (np.asarray(store.values, dtype=np.float64) - self.shift)

    def per_example_grads(self, store):
        return self.grad(store)[None, :]

    def init_store(self, seed: int = 0, scale: float = 1.0, dtype=np.float64,
                   group_sizes: Sequence[int] | None = None) -> ParamStore:
        """Optimum plus ``scale`` times Gaussian noise.

        With ``group_sizes`` the vector is cut into groups ``g0, g1, ...``;
        the loss only sees the concatenation.
        """
        theta = self.shift + scale * NoiseStream(seed).normals(self.dim)
        return self.store_from(theta, dtype=dtype, group_sizes=group_sizes)

    def store_from(self, theta, dtype=np.float64, group_sizes: Sequence[int] | None = None) -> ParamStore:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} values, got shape {theta.shape}")
        if group_sizes is None:
            return ParamStore.from_arrays({"theta": theta}, dtype=dtype)
        if sum(group_sizes) != self.dim:
            raise ValueError(f"group sizes {list(group_sizes)} do not sum to {self.dim}")
        cuts = np.cumsum([0, *group_sizes])
        return ParamStore.from_arrays({f"g{i}": theta[a:b] for i, (a, b) in enumerate(zip(cuts[:-1], cuts[1:]))},
                                      dtype=dtype)


def make_quadratic(spec: QuadraticSpec) -> Quadratic:
    return Quadratic(spec.eigenvalues, spec.shift)


def rank_r_spectrum(d: int, r: int, ell: float = 1.0) -> np.ndarray:
    """``r`` eigenvalues equal to ``ell`` followed by ``d - r`` zeros: effective rank exactly r."""
    if not 1 <= r <= d:
        raise ValueError(f"need 1 <= r <= d, got r={r}, d={d}")
    lam = np.zeros(d)
    lam[:r] = ell
    return lam


# --- linear classifier ---------------------------------------------------------


class Logistic(Objective):
    """Linear predictor ``f(x) = w.x`` with exp-margin or log-sigmoid loss.

    ``form="exp"`` is mean(exp(-y f)); ``form="logsigmoid"`` is
    mean(log(1 + exp(-y f))). Labels are taken as -1/+1.
    """

    def __init__(self, data: Dataset, form: str = "exp"):
        super().__init__()
        if data.classes != 2:
            raise ValueError("logistic objective needs binary labels")
        if form not in ("exp", "logsigmoid"):
            raise ValueError(f"unknown form {form!r}")
        self.data = data
        self.form = form
        self.dataset_size = data.n_examples
        self._y = data.signs

    def _margins(self, store, batch):
        w = np.asarray(store.view("w"), dtype=np.float64)
        return self._y[batch] * (self.data.X[batch] @ w)

    def loss(self, store, batch):
        m = self._margins(store, batch)
        if self.form == "exp":
            return np.exp(-m).mean()
        return np.logaddexp(0.0, -m).mean()

    def _coef(self, store, batch):
        # dloss_i/dmargin_i
        m = self._margins(store, batch)
        if self.form == "exp":
            return -np.exp(-m)
        return -0.5 * (1.0 - np.tanh(0.5 * m))  # -sigmoid(-m), overflow-free

    def grad(self, store, batch=None):
        batch = self._batch(batch)
        c = self._coef(store, batch) * self._y[batch]
        return c @ self.data.X[batch] / batch.size

    def per_example_grads(self, store):
        idx = np.arange(self.dataset_size)
        return (self._coef(store, idx) * self._y)[:, None] * self.data.X

    def hessian(self, store) -> np.ndarray:
        """Full-batch Hessian (exp form): mean of exp(-m_i) x_i x_i^T."""
        if self.form != "exp":
            raise NotImplementedError("Hessian provided for the exp form only")
        idx = np.arange(self.dataset_size)
        e = np.exp(-self._margins(store, idx))
        X = self.data.X
        return (X * e[:, None]).T @ X / self.dataset_size

    def predict(self, store, batch) -> np.ndarray:
        w = np.asarray(store.view("w"), dtype=np.float64)
        return (self.data.X[batch] @ w > 0).astype(np.int64)

    def init_store(self, seed: int = 0, scale: float = 0.0, dtype=np.float64) -> ParamStore:
        w = scale * NoiseStream(seed).normals(self.data.X.shape[1])
        return ParamStore.from_arrays({"w": w}, dtype=dtype)


def make_logistic(data: Dataset | DatasetSpec, form: str = "exp") -> Logistic:
    if isinstance(data, DatasetSpec):
        data = make_dataset(data)
    return Logistic(data, form)


# --- MLP -----------------------------------------------------------------------


class MLP(Objective):
    """tanh multilayer perceptron with groups ``W1, b1, ..., WL, bL``.

    Weights are read through :meth:`ParamStore.effective`, so attached
    low-rank adapters take part in both the forward pass and the backprop
    oracle.
    """

    def __init__(self, layers: Sequence[int], data: Dataset, loss: str = "square", targets: np.ndarray | None = None):
        super().__init__()
        layers = list(layers)
        if len(layers) < 3:
            raise ValueError("need an input, at least one hidden layer and an output")
        if layers[0] != data.X.shape[1]:
            raise ValueError(f"input width {layers[0]} does not match data dimension {data.X.shape[1]}")
        if loss not in ("square", "cross-entropy"):
            raise ValueError(f"unknown loss {loss!r}")
        out = layers[-1]
        if loss == "cross-entropy" and out != 1 and out != data.classes:
            raise ValueError(f"cross-entropy output width must be 1 (binary) or {data.classes}")
        if loss == "cross-entropy" and out == 1 and data.classes != 2:
            raise ValueError("single-output cross-entropy needs binary labels")
        self.layers = layers
        self.data = data
        self.loss_kind = loss
        self.dataset_size = data.n_examples
        if targets is None:
            if out == 1:
                targets = data.signs[:, None]
            else:
                targets = np.eye(out)[data.labels % out]
        targets = np.asarray(targets, dtype=np.float64).reshape(data.n_examples, out)
        self.targets = targets

    @property
    def n_layers(self) -> int:
        return len(self.layers) - 1

    def group_names(self) -> list[str]:
        names = []
        for k in range(1, self.n_layers + 1):
            names += [f"W{k}", f"b{k}"]
        return names

    def _forward(self, store, X):
        acts = [X]
        h = X
        for k in range(1, self.n_layers + 1):
            W = np.asarray(store.effective(f"W{k}"), dtype=np.float64)
            b = np.asarray(store.view(f"b{k}"), dtype=np.float64)
            z = h @ W + b
            h = np.tanh(z) if k < self.n_layers else z
            acts.append(h)
        return acts

    def _loss_and_dout(self, out, batch):
        m = batch.size
        if self.loss_kind == "square":
            diff = out - self.targets[batch]
            return 0.5 * (diff * diff).sum() / m, diff / m
        if out.shape[1] == 1:
            y = self.data.signs[batch][:, None]
            marg = y * out
            return np.logaddexp(0.0, -marg).sum() / m, -y * 0.5 * (1.0 - np.tanh(0.5 * marg)) / m
        shifted = out - out.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        lab = self.data.labels[batch]
        p = np.exp(logp)
        p[np.arange(m), lab] -= 1.0
        return -logp[np.arange(m), lab].sum() / m, p / m

    def loss(self, store, batch):
        out = self._forward(store, self.data.X[batch])[-1]
        return self._loss_and_dout(out, batch)[0]

    def logits(self, store, batch) -> np.ndarray:
        return self._forward(store, self.data.X[batch])[-1]

    def predict(self, store, batch) -> np.ndarray:
        out = self.logits(store, batch)
        if out.shape[1] == 1:
            return (out[:, 0] > 0).astype(np.int64)
        return out.argmax(axis=1)

    def grad(self, store, batch=None):
        batch = self._batch(batch)
        acts = self._forward(store, self.data.X[batch])
        _, delta = self._loss_and_dout(acts[-1], batch)
        g = np.zeros(store.size)
        for k in range(self.n_layers, 0, -1):
            dW = acts[k - 1].T @ delta
            db = delta.sum(axis=0)
            self._scatter(store, g, f"W{k}", dW)
            gb = store.group(f"b{k}")
            g[gb.offset:gb.stop] = db
            if k > 1:
                W = np.asarray(store.effective(f"W{k}"), dtype=np.float64)
                delta = (delta @ W.T) * (1.0 - acts[k - 1] ** 2)
        return g

    @staticmethod
    def _scatter(store, g, name, dW):
        gw = store.group(name)
        g[gw.offset:gw.stop] = dW.ravel()
        spec = store.adapters.get(name)
        if spec is None:
            return
        a = np.asarray(store.view(f"{name}.lora_A"), dtype=np.float64)
        b = np.asarray(store.view(f"{name}.lora_B"), dtype=np.float64)
        ga, gb = store.group(f"{name}.lora_A"), store.group(f"{name}.lora_B")
        g[ga.offset:ga.stop] = (spec.scaling * dW @ b.T).ravel()
        g[gb.offset:gb.stop] = (spec.scaling * a.T @ dW).ravel()

    def init_store(self, seed: int = 0, scale: float | None = None, dtype=np.float64) -> ParamStore:
        """Weights ~ N(0, 1/fan_in) (or ``scale``), biases zero."""
        s = NoiseStream(seed)
        arrays = {}
        for k in range(1, self.n_layers + 1):
            fan_in, fan_out = self.layers[k - 1], self.layers[k]
            std = 1.0 / math.sqrt(fan_in) if scale is None else scale
            arrays[f"W{k}"] = std * s.normals(fan_in * fan_out).reshape(fan_in, fan_out)
            arrays[f"b{k}"] = np.zeros(fan_out)
        return ParamStore.from_arrays(arrays, dtype=dtype)


def make_mlp(layers: Sequence[int], data: Dataset | DatasetSpec, loss: str = "square",
             targets: np.ndarray | None = None) -> MLP:
    if isinstance(data, DatasetSpec):
        data = make_dataset(data)
    return MLP(layers, data, loss, targets)


# --- non-differentiable metrics ----------------------------------------------------


def accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(truth)))


def macro_f1(pred: np.ndarray, truth: np.ndarray) -> float:
    """Unweighted mean over labels present in either array of 2TP / (2TP + FP + FN)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    scores = []
    for c in np.union1d(pred, truth):
        tp = np.sum((pred == c) & (truth == c))
        fp = np.sum((pred == c) & (truth != c))
        fn = np.sum((pred != c) & (truth == c))
        scores.append(2.0 * tp / (2.0 * tp + fp + fn))
    return float(np.mean(scores))


class MetricObjective(Objective):
    """Negated accuracy or macro-F1 of a classifier; piecewise constant in theta."""

    def __init__(self, predictor: Logistic | MLP, metric: str = "accuracy"):
        super().__init__()
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
        self.predictor = predictor
        self.metric = metric
        self.dataset_size = predictor.dataset_size

    def loss(self, store, batch):
        pred = self.predictor.predict(store, batch)
        truth = self.predictor.data.labels[batch]
        if self.metric == "accuracy":
            return -accuracy(pred, truth)
        return -macro_f1(pred, truth)

    def init_store(self, seed: int = 0, scale: float = 0.0, dtype=np.float64) -> ParamStore:
        return self.predictor.init_store(seed, scale, dtype=dtype)


def make_metric_objective(predictor, metric: str = "accuracy") -> MetricObjective:
    return MetricObjective(predictor, metric)


# --- gradient covariance ----------------------------------------------------------


def estimate_sigma_trace(obj: Objective, store: ParamStore) -> float:
    """Trace of the per-example gradient covariance over the whole dataset.

    ``(1/N) sum_i ||g_i - g_mean||^2``: the covariance of a single-example
    gradient drawn uniformly, i.e. ``B * Cov(minibatch gradient)`` for a
    batch of ``B`` examples drawn with replacement.
    """
    try:
        G = obj.per_example_grads(store)
    except MissingOracleError:
        raise
    except NotImplementedError as exc:
        raise MissingOracleError(f"{type(obj).__name__} has no per-example gradients") from exc
    centered = G - G.mean(axis=0)
    return float((centered * centered).sum() / G.shape[0])


def finite_difference_grad(obj: Objective, store: ParamStore, batch=None, h: float = 1e-5) -> np.ndarray:
    """Central differences along every coordinate. Test oracle."""
    probe = store.copy()
    out = np.empty(store.size)
    for i in range(store.size):
        orig = probe.values[i]
        probe.values[i] = orig + h
        up = obj.loss(probe, obj._batch(batch))
        probe.values[i] = orig - h
        down = obj.loss(probe, obj._batch(batch))
        probe.values[i] = orig
        out[i] = (up - down) / (2 * h)
    return out
