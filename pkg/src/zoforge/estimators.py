"""Zeroth-order gradient estimators.

Every estimator here perturbs the store in place, evaluates the loss, and
leaves the store where it found it (up to floating-point rounding of the
+eps / -2eps / +eps walk). Only scalars leave an estimator: the projected
gradient(s) together with the seeds that regenerate their directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .objectives import Objective
from .paramspace import ParamStore, apply_direction, direction_vector
from .randcore import NOISE_LANE, derive_step_seed, probe_seed

KINDS = ("spsa", "one_point", "variance_modified", "expectation_modified")
SCALE_SOURCES = ("ones", "param_norm_per_group", "grad_norm_per_group", "external")
SCALE_REFRESH = ("never", "per_epoch")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, which: str, value: float, step: int | None = None):
        self.which = which
        self.value = value
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"non-finite loss in {which} evaluation{where}: {value}")


@dataclass(frozen=True)
class EstimatorConfig:
    kind: str = "spsa"
    n: int = 1
    epsilon: float = 1e-3
    z_dist: str = "gaussian"
    scale_source: str = "ones"
    scale_refresh: str = "never"
    scale_probes: int = 8
    external_scale: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}; expected one of {KINDS}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.z_dist not in ("gaussian", "sphere"):
            raise ValueError(f"unknown z distribution {self.z_dist!r}")
        if self.scale_source not in SCALE_SOURCES:
            raise ValueError(f"unknown scale source {self.scale_source!r}; expected one of {SCALE_SOURCES}")
        if self.scale_refresh not in SCALE_REFRESH:
            raise ValueError(f"unknown scale refresh {self.scale_refresh!r}")
        if self.scale_probes < 1:
            raise ValueError("scale_probes must be >= 1")
        if self.kind == "one_point" and self.n != 1:
            raise ValueError("the one-point estimator uses a single probe")
        if self.scale_source == "external" and not self.external_scale:
            raise ValueError("external scale source needs external_scale values")

    @property
    def scaled(self) -> bool:
        return self.kind in ("variance_modified", "expectation_modified")


@dataclass
class GradRecord:
    step: int
    seeds: tuple[int, ...]
    projected_grads: np.ndarray
    epsilon: float
    losses: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.projected_grads = np.asarray(self.projected_grads, dtype=np.float64)
        if len(self.seeds) != self.projected_grads.size:
            raise ValueError("seeds and projected_grads must have equal length")

    @property
    def n(self) -> int:
        return len(self.seeds)

    def __eq__(self, other):
        if not isinstance(other, GradRecord):
            return NotImplemented
        return (self.step == other.step and tuple(self.seeds) == tuple(other.seeds)
                and np.array_equal(self.projected_grads, other.projected_grads) and self.epsilon == other.epsilon)


@dataclass(frozen=True)
class ScaleVector:
    """Positive per-group scalars, expanded blockwise when materialized."""

    values: Mapping[str, float]

    def __post_init__(self):
        for name, v in self.values.items():
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"scale for group {name!r} must be positive and finite, got {v}")

    @classmethod
    def ones(cls, store: ParamStore) -> "ScaleVector":
        return cls({g.name: 1.0 for g in store.groups})

    def reciprocal(self) -> dict[str, float]:
        return {k: 1.0 / v for k, v in self.values.items()}

    def scaled(self, c: float) -> "ScaleVector":
        return ScaleVector({k: c * v for k, v in self.values.items()})

    def expand(self, store: ParamStore) -> np.ndarray:
        out = np.empty(store.size)
        for g in store.groups:
            out[g.offset:g.stop] = self.values.get(g.name, 1.0)
        return out


def _checked(value: float, which: str) -> float:
    if not math.isfinite(value):
        raise NonFiniteLossError(which, value)
    return value


def spsa_projected_grad(store: ParamStore, obj: Objective, batch, epsilon: float, seed: int,
                        mask: Iterable[str] | None = None, z_dist: str = "gaussian",
                        group_scale: Mapping[str, float] | None = None) -> float:
    """``(L(theta + eps z) - L(theta - eps z)) / (2 eps)`` with exactly two evaluations.

    The store is walked +eps, -2eps, +eps along the seed's direction. If an
    evaluation is non-finite the store is still reset before the error is
    raised.
    """
    loss_plus, loss_minus = spsa_losses(store, obj, batch, epsilon, seed, mask, z_dist, group_scale)
    return (loss_plus - loss_minus) / (2.0 * epsilon)


def spsa_losses(store: ParamStore, obj: Objective, batch, epsilon: float, seed: int,
                mask: Iterable[str] | None = None, z_dist: str = "gaussian",
                group_scale: Mapping[str, float] | None = None) -> tuple[float, float]:
    """The two perturbed losses behind :func:`spsa_projected_grad`."""
    def perturb(c):
        apply_direction(store, seed, c, mask, z_dist, group_scale)

    perturb(epsilon)
    loss_plus = obj(store, batch)
    if not math.isfinite(loss_plus):
        perturb(-epsilon)
        raise NonFiniteLossError("plus", loss_plus)
    perturb(-2.0 * epsilon)
    loss_minus = obj(store, batch)
    perturb(epsilon)
    _checked(loss_minus, "minus")
    return loss_plus, loss_minus


def spsa_walk(store: ParamStore, epsilon: float, seed: int, mask: Iterable[str] | None = None,
              z_dist: str = "gaussian", group_scale: Mapping[str, float] | None = None) -> None:
    """The parameter arithmetic of one SPSA probe with the evaluations left out.

    The walk does not restore theta bit-for-bit, so replay re-runs it to stay
    bit-identical with training.
    """
    apply_direction(store, seed, epsilon, mask, z_dist, group_scale)
    apply_direction(store, seed, -2.0 * epsilon, mask, z_dist, group_scale)
    apply_direction(store, seed, epsilon, mask, z_dist, group_scale)


def one_point_walk(store: ParamStore, epsilon: float, seed: int, mask: Iterable[str] | None = None,
                   z_dist: str = "gaussian") -> None:
    apply_direction(store, seed, epsilon, mask, z_dist)
    apply_direction(store, seed, -epsilon, mask, z_dist)


def probe_seeds(step_seed: int, n: int) -> tuple[int, ...]:
    return tuple(probe_seed(step_seed, j) for j in range(n))


def n_spsa(store: ParamStore, obj: Objective, batch, config: EstimatorConfig, step_seed: int, step: int = 0,
           mask: Iterable[str] | None = None, group_scale: Mapping[str, float] | None = None) -> GradRecord:
    """n sequential SPSA probes on the same batch, one derived seed each.

    The implied gradient estimate is ``(1/n) sum_j pg_j z_j``; the 1/n is the
    consumer's job.
    """
    seeds = probe_seeds(step_seed, config.n)
    pgs = np.empty(config.n)
    losses = np.empty((config.n, 2))
    eps = config.epsilon
    for j, s in enumerate(seeds):
        try:
            lp, lm = spsa_losses(store, obj, batch, eps, s, mask, config.z_dist, group_scale)
        except NonFiniteLossError as exc:
            exc.step = step
            raise
        losses[j] = lp, lm
        pgs[j] = (lp - lm) / (2.0 * eps)
    return GradRecord(step, seeds, pgs, eps, losses)


class OnePointEstimator:
    """``(L(theta_t + eps z_t; B_t) - L(theta_{t-1} + eps z_{t-1}; B_{t-1})) / eps``.

    One evaluation per call. The first call has nothing to difference against
    and returns 0 after caching its loss.
    """

    def __init__(self):
        self.prev_loss: float | None = None
        self.prev_seed: int | None = None

    def reset(self) -> None:
        self.prev_loss = None
        self.prev_seed = None

    def __call__(self, store: ParamStore, obj: Objective, batch, epsilon: float, seed: int,
                 mask: Iterable[str] | None = None, z_dist: str = "gaussian") -> float:
        apply_direction(store, seed, epsilon, mask, z_dist)
        loss = obj(store, batch)
        apply_direction(store, seed, -epsilon, mask, z_dist)
        _checked(loss, "perturbed")
        pg = 0.0 if self.prev_loss is None else (loss - self.prev_loss) / epsilon
        self.prev_loss = loss
        self.prev_seed = seed
        return pg


def one_point_projected_grad(state: OnePointEstimator, store, obj, batch, epsilon, seed, mask=None,
                             z_dist="gaussian") -> float:
    return state(store, obj, batch, epsilon, seed, mask, z_dist)


def variance_modified_spsa(store: ParamStore, obj: Objective, batch, epsilon: float, seed: int, dvec: ScaleVector,
                           mask=None, z_dist: str = "gaussian") -> float:
    """Perturb along ``d^-1 * z``. The unbiased estimate is ``pg * (d * z)``."""
    return spsa_projected_grad(store, obj, batch, epsilon, seed, mask, z_dist, dvec.reciprocal())


def expectation_modified_spsa(store: ParamStore, obj: Objective, batch, epsilon: float, seed: int, dvec: ScaleVector,
                              mask=None, z_dist: str = "gaussian") -> float:
    """Same probe as the variance-modified form; the estimate ``pg * z`` targets ``D^-1 grad``."""
    return spsa_projected_grad(store, obj, batch, epsilon, seed, mask, z_dist, dvec.reciprocal())


def update_scale(kind: str, dvec: ScaleVector | None) -> dict[str, float] | None:
    """Per-group multiplier applied to z when turning a projected gradient into an update."""
    if kind == "variance_modified":
        return dict(dvec.values)
    return None


def perturb_scale(kind: str, dvec: ScaleVector | None) -> dict[str, float] | None:
    if kind in ("variance_modified", "expectation_modified"):
        return dvec.reciprocal()
    return None


def zo_group_grad_norm(store: ParamStore, obj: Objective, batch, epsilon: float, seed: int, group: str,
                       z_dist: str = "gaussian") -> float:
    """``|pg|`` with z supported on one group; E[pg^2] is the group's squared gradient norm."""
    store.group(group)
    return abs(spsa_projected_grad(store, obj, batch, epsilon, seed, {group}, z_dist))


def compute_scale_vector(config: EstimatorConfig, store: ParamStore, obj: Objective | None = None, batch=None,
                         seed: int = 0, mask=None) -> ScaleVector:
    """Build the per-group scale from ``config.scale_source``.

    External values are listed per store group in layout order; the computed
    sources cover the active groups only.

    ``grad_norm_per_group`` costs ``2 * scale_probes`` evaluations per group.
    """
    groups = store.active_groups(mask)
    src = config.scale_source
    if src == "ones":
        return ScaleVector({g.name: 1.0 for g in groups})
    if src == "external":
        vals = config.external_scale
        if len(vals) != len(store.groups):
            raise ValueError(f"external scale has {len(vals)} entries for {len(store.groups)} groups")
        return ScaleVector({g.name: float(v) for g, v in zip(store.groups, vals)})
    if src == "param_norm_per_group":
        return ScaleVector({g.name: float(np.linalg.norm(np.asarray(store.view(g.name), dtype=np.float64)))
                            for g in groups})
    if obj is None:
        raise ValueError("grad_norm_per_group needs an objective")
    out = {}
    for gi, g in enumerate(groups):
        sq = 0.0
        for k in range(config.scale_probes):
            s = derive_step_seed(seed, gi * config.scale_probes + k, NOISE_LANE)
            sq += zo_group_grad_norm(store, obj, batch, config.epsilon, s, g.name, config.z_dist) ** 2
        out[g.name] = math.sqrt(sq / config.scale_probes)
    return ScaleVector(out)


def materialize(store: ParamStore, record: GradRecord, mask=None, z_dist: str = "gaussian",
                group_scale: Mapping[str, float] | None = None) -> np.ndarray:
    """Dense ``(1/n) sum_j pg_j (s * z_j)``. Oracle and test use only."""
    out = np.zeros(store.size)
    for s, pg in zip(record.seeds, record.projected_grads):
        out += pg * direction_vector(store, s, mask, z_dist, group_scale)
    return out / record.n
