"""ZO-SGD, EMA momentum and Adam driven by projected gradients, plus the training loop.

A step's gradient estimate never exists as a stored vector. It is described
by a :class:`StepDirection`: the probe seeds, one scalar weight per probe, the
active mask and the per-group multipliers. ``apply_update`` turns that into a
parameter change and is shared verbatim by training and replay, which is what
makes replay bit-exact.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .estimators import (EstimatorConfig, GradRecord, NonFiniteLossError, OnePointEstimator, ScaleVector,
                         compute_scale_vector, n_spsa, one_point_walk, perturb_scale, spsa_walk,
                         update_scale)
from .objectives import Objective
from .paramspace import ParamStore, apply_direction
from .randcore import BATCH_LANE, NOISE_LANE, derive_step_seed, sample_minibatch, seeded_axpy, sphere_factor

ALGOS = ("sgd", "momentum", "adam")
LR_SCHEDULES = ("constant", "linear_decay")
N_SCHEDULES = ("constant", "linear_increase")
HISTORY_MODES = ("dense", "reconstruct")
PRECISIONS = ("bf16", "f32", "f64")
METRICS_HEADER = ("step", "loss", "lr", "n", "grad_norm_est", "elapsed_ns")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, reason: str):
        self.step = step
        self.reason = reason
        super().__init__(f"diverged at step {step}: {reason}")


class ConfigError(ValueError):
    pass


# --- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    algo: str = "sgd"
    lr: float = 1e-3
    lr_schedule: str = "constant"
    weight_decay: float = 0.0
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    n_schedule: str = "constant"
    n_final: int | None = None
    couple_lr_to_n: bool = False
    history_mode: str = "dense"
    window: int | None = None

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algo {self.algo!r}; expected one of {ALGOS}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.n_schedule not in N_SCHEDULES:
            raise ConfigError(f"unknown n_schedule {self.n_schedule!r}")
        if self.history_mode not in HISTORY_MODES:
            raise ConfigError(f"unknown history_mode {self.history_mode!r}")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if not self.weight_decay >= 0:
            raise ConfigError("weight_decay must be >= 0")
        for name in ("beta", "beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ConfigError(f"{name} must be in [0, 1), got {b}")
        if not self.eps_adam > 0:
            raise ConfigError("eps_adam must be > 0")
        if self.n_schedule == "linear_increase" and (self.n_final is None or self.n_final < 1):
            raise ConfigError("linear_increase needs n_final >= 1")
        if self.window is not None and self.window < 1:
            raise ConfigError("window must be >= 1")

    @property
    def decay_rates(self) -> tuple[float, ...]:
        if self.algo == "adam":
            return (self.beta1, self.beta2)
        if self.algo == "momentum":
            return (self.beta,)
        return ()

    @property
    def history_window(self) -> int:
        """Reconstruction window; by default every dropped term weighs below 1e-8."""
        if self.window is not None:
            return self.window
        return default_window(max(self.decay_rates, default=0.0))


def default_window(beta: float, tol: float = 1e-8) -> int:
    if beta <= 0.0:
        return 1
    return max(1, math.ceil(math.log(tol) / math.log(beta)))


@dataclass(frozen=True)
class Stage:
    steps: int
    mask: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"stage needs a positive step budget, got {self.steps}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    steps: int = 1000
    batch_size: int | None = None
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    eval_every: int = 0
    stages: tuple[Stage, ...] | None = None
    grad_precision: str = "f64"
    divergence_factor: float = 1e6
    timing: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")
        if self.grad_precision not in PRECISIONS:
            raise ConfigError(f"unknown grad_precision {self.grad_precision!r}; expected one of {PRECISIONS}")
        if self.stages is not None:
            total = sum(s.steps for s in self.stages)
            if total != self.steps:
                raise ConfigError(f"stage budgets sum to {total}, expected {self.steps}")

    @property
    def stage_list(self) -> tuple[Stage, ...]:
        return self.stages if self.stages is not None else (Stage(self.steps),)

    def mask_at(self, t: int) -> tuple[str, ...] | None:
        for stage in self.stage_list:
            if t < stage.steps:
                return stage.mask
            t -= stage.steps
        raise IndexError("step past the end of the run")


# --- schedules -------------------------------------------------------------------


def lr_at(opt: OptimizerConfig, t: int, total: int) -> float:
    if not 0 <= t < total:
        raise IndexError(f"step {t} outside [0, {total})")
    if opt.lr_schedule == "constant":
        return opt.lr
    return opt.lr * (1.0 - t / total)


def n_at(opt: OptimizerConfig, n0: int, t: int, total: int) -> int:
    if not 0 <= t < total:
        raise IndexError(f"step {t} outside [0, {total})")
    if opt.n_schedule == "constant":
        return n0
    frac = t / (total - 1) if total > 1 else 1.0
    return max(1, math.floor(n0 + (opt.n_final - n0) * frac + 0.5))


def max_n(opt: OptimizerConfig, n0: int, total: int) -> int:
    if opt.n_schedule == "constant":
        return n0
    return max(n_at(opt, n0, 0, total), n_at(opt, n0, total - 1, total))


def effective_lr(opt: OptimizerConfig, n0: int, t: int, total: int) -> float:
    lr = lr_at(opt, t, total)
    if opt.couple_lr_to_n:
        lr = lr * n_at(opt, n0, t, total) / n0
    return lr


# --- quantization ------------------------------------------------------------------


def quantize(value: float, precision: str) -> float:
    """Round-trip a scalar through the trajectory storage format."""
    if precision == "f64":
        return float(value)
    with np.errstate(over="ignore"):
        f32 = np.array([value], dtype=np.float32)
    if precision == "bf16":
        f32 = (f32.view(np.uint32) & np.uint32(0xFFFF0000)).view(np.float32)
    return float(f32[0])


# --- update arithmetic ---------------------------------------------------------------


@dataclass(frozen=True)
class StepDirection:
    """One step's estimate ``sum_j weights[j] * (scale * factor_j * z(seeds[j]))``."""

    seeds: tuple[int, ...]
    weights: tuple[float, ...]
    mask: tuple[str, ...] | None
    z_dist: str
    group_scale: tuple[tuple[str, float], ...] | None
    active: tuple[tuple[str, int, int], ...]  # (name, offset within active set, length)
    factors: tuple[float, ...]

    @classmethod
    def build(cls, store: ParamStore, seeds, weights, mask, z_dist, group_scale=None) -> "StepDirection":
        groups = store.active_groups(mask)
        active, pos = [], 0
        for g in groups:
            active.append((g.name, pos, g.length))
            pos += g.length
        factors = tuple(sphere_factor(s, pos) if z_dist == "sphere" else 1.0 for s in seeds)
        scale = None if group_scale is None else tuple(sorted((k, float(v)) for k, v in group_scale.items()))
        return cls(tuple(seeds), tuple(float(w) for w in weights), None if mask is None else tuple(mask),
                   z_dist, scale, tuple(active), factors)

    def scale_of(self, name: str) -> float:
        if self.group_scale is None:
            return 1.0
        return dict(self.group_scale)[name]

    def add_to(self, store: ParamStore, coeff: float) -> None:
        """``theta += coeff * estimate`` probe by probe."""
        scale = None if self.group_scale is None else dict(self.group_scale)
        for s, w in zip(self.seeds, self.weights):
            apply_direction(store, s, coeff * w, self.mask, self.z_dist, scale)

    def group_block(self, name: str, out: np.ndarray) -> bool:
        """Accumulate this step's estimate restricted to group ``name`` into ``out``.

        Returns False (leaving ``out`` alone) when the group was inactive.
        """
        for gname, pos, length in self.active:
            if gname == name:
                break
        else:
            return False
        scale = self.scale_of(name)
        for s, w, f in zip(self.seeds, self.weights, self.factors):
            seeded_axpy(s, pos, out, 0, length, w * scale, f)
        return True


@dataclass
class OptimizerState:
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    history: deque | None = None
    audit: Callable[[str, int], None] | None = None

    def persistent_vectors(self) -> list[np.ndarray]:
        return [a for a in (self.m, self.v) if a is not None]


def init_state(opt: OptimizerConfig, store: ParamStore) -> OptimizerState:
    state = OptimizerState()
    if opt.algo == "sgd":
        return state
    if opt.history_mode == "dense":
        state.m = np.zeros(store.size)
        if opt.algo == "adam":
            state.v = np.zeros(store.size)
    else:
        state.history = deque(maxlen=opt.history_window)
    return state


def _dense_estimate(store: ParamStore, direction: StepDirection) -> np.ndarray:
    scratch = ParamStore(np.zeros(store.size), store.groups, store.adapters)
    direction.add_to(scratch, 1.0)
    return scratch.values


def apply_update(store: ParamStore, state: OptimizerState, opt: OptimizerConfig, direction: StepDirection,
                 lr: float) -> None:
    """Advance the optimizer by one step: update, then decoupled weight decay."""
    state.t += 1
    if opt.algo == "sgd":
        direction.add_to(store, -lr)
    elif opt.history_mode == "dense":
        _dense_moment_step(store, state, opt, direction, lr)
    else:
        _reconstruct_step(store, state, opt, direction, lr)
    if opt.weight_decay > 0.0:
        keep = 1.0 - lr * opt.weight_decay
        for g in store.active_groups(direction.mask):
            store.values[g.offset:g.stop] *= keep


def _moment_delta(opt: OptimizerConfig, t: int, m: np.ndarray, v: np.ndarray | None) -> np.ndarray:
    if opt.algo == "momentum":
        return m
    m_hat = m / (1.0 - opt.beta1 ** t)
    v_hat = v / (1.0 - opt.beta2 ** t)
    return m_hat / (np.sqrt(v_hat) + opt.eps_adam)


def _dense_moment_step(store, state, opt, direction, lr):
    g = _dense_estimate(store, direction)
    b1 = opt.beta if opt.algo == "momentum" else opt.beta1
    state.m *= b1
    state.m += (1.0 - b1) * g
    if state.v is not None:
        state.v *= opt.beta2
        state.v += (1.0 - opt.beta2) * (g * g)
    for g_desc in store.active_groups(direction.mask):
        sl = slice(g_desc.offset, g_desc.stop)
        v = None if state.v is None else state.v[sl]
        store.values[sl] -= lr * _moment_delta(opt, state.t, state.m[sl], v)


def _reconstruct_step(store, state, opt, direction, lr):
    state.history.append(direction)
    b1 = opt.beta if opt.algo == "momentum" else opt.beta1
    for g_desc in store.active_groups(direction.mask):
        length = g_desc.length
        if state.audit is not None:
            state.audit(g_desc.name, 3 * length)
        m = np.zeros(length)
        v = np.zeros(length) if opt.algo == "adam" else None
        block = np.empty(length)
        for past in state.history:
            block[:] = 0.0
            past.group_block(g_desc.name, block)
            m *= b1
            m += (1.0 - b1) * block
            if v is not None:
                v *= opt.beta2
                v += (1.0 - opt.beta2) * (block * block)
        sl = slice(g_desc.offset, g_desc.stop)
        store.values[sl] -= lr * _moment_delta(opt, state.t, m, v)


# --- training loop ---------------------------------------------------------------------


@dataclass
class TrainResult:
    store: ParamStore
    records: list[GradRecord]
    metrics: list[tuple]
    run: RunConfig
    opt: OptimizerConfig
    initial_loss: float
    final_loss: float
    layout_hash: int
    n_header: int

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)

    def trajectory_bytes(self) -> bytes:
        from .trajectory import encode

        return encode(self)


def metrics_to_csv(rows: Iterable[tuple]) -> str:
    lines = [",".join(METRICS_HEADER)]
    for step, loss, lr, n, gn, ns in rows:
        lines.append(f"{step},{loss!r},{lr!r},{n},{gn!r},{ns}")
    return "\n".join(lines) + "\n"


def step_batch(run: RunConfig, t: int, dataset_size: int) -> np.ndarray | None:
    if run.batch_size is None or run.batch_size >= dataset_size:
        return None
    return sample_minibatch(derive_step_seed(run.seed, t, BATCH_LANE), dataset_size, run.batch_size)


def epoch_length(run: RunConfig, dataset_size: int) -> int:
    if run.batch_size is None or run.batch_size >= dataset_size:
        return 1
    return math.ceil(dataset_size / run.batch_size)


def scale_due(est: EstimatorConfig, t: int, epoch: int) -> bool:
    if not est.scaled:
        return False
    if t == 0:
        return True
    return est.scale_refresh == "per_epoch" and t % epoch == 0


def train(run: RunConfig, opt: OptimizerConfig, obj: Objective, store: ParamStore,
          state: OptimizerState | None = None, on_step: Callable[[int, ParamStore], None] | None = None) -> TrainResult:
    """Run every stage in order, mutating ``store`` in place.

    Raises :class:`DivergenceError` when a loss is non-finite or exceeds
    ``divergence_factor`` times the initial loss.
    """
    est = run.estimator
    T = run.steps
    layout = store.layout_hash()
    state = state if state is not None else init_state(opt, store)
    one_point = OnePointEstimator() if est.kind == "one_point" else None
    N = obj.dataset_size
    epoch = epoch_length(run, N)
    dvec: ScaleVector | None = None
    records: list[GradRecord] = []
    metrics: list[tuple] = []
    initial = obj(store, None)
    if not math.isfinite(initial):
        raise DivergenceError(0, f"initial loss is {initial}")
    limit = run.divergence_factor * initial if initial > 0 else math.inf
    t0 = time.perf_counter_ns() if run.timing else 0
    last_loss = initial

    for t in range(T):
        mask = run.mask_at(t)
        batch = step_batch(run, t, N)
        step_seed = derive_step_seed(run.seed, t, NOISE_LANE)
        n_t = n_at(opt, est.n, t, T)
        lr = effective_lr(opt, est.n, t, T)
        if scale_due(est, t, epoch):
            dvec = compute_scale_vector(est, store, obj, batch, derive_step_seed(step_seed, 0, 2), mask)
        try:
            if one_point is not None:
                pg = one_point(store, obj, batch, est.epsilon, step_seed, mask, est.z_dist)
                rec = GradRecord(t, (step_seed,), [pg], est.epsilon, np.array([one_point.prev_loss]))
            else:
                rec = n_spsa(store, obj, batch, est if n_t == est.n else replace(est, n=n_t), step_seed, t, mask,
                             perturb_scale(est.kind, dvec))
        except NonFiniteLossError as exc:
            raise DivergenceError(t, str(exc)) from exc
        if rec.losses is not None and rec.losses.max() > limit:
            raise DivergenceError(t, f"loss {rec.losses.max()!r} exceeds {run.divergence_factor:g} x initial")
        q = np.array([quantize(p, run.grad_precision) for p in rec.projected_grads])
        if not np.isfinite(q).all():
            raise DivergenceError(t, "non-finite projected gradient")
        rec = GradRecord(t, rec.seeds, q, rec.epsilon, rec.losses)
        records.append(rec)
        direction = StepDirection.build(store, rec.seeds, q / n_t, mask, est.z_dist, update_scale(est.kind, dvec))
        apply_update(store, state, opt, direction, lr)
        if on_step is not None:
            on_step(t, store)
        if (run.eval_every and (t + 1) % run.eval_every == 0) or t == T - 1:
            last_loss = obj(store, None)
            if not math.isfinite(last_loss) or last_loss > limit:
                raise DivergenceError(t, f"evaluation loss {last_loss!r}")
            elapsed = time.perf_counter_ns() - t0 if run.timing else 0
            gn = float(np.sqrt(np.mean(q * q)))
            metrics.append((t + 1, last_loss, lr, n_t, gn, elapsed))

    return TrainResult(store, records, metrics, run, opt, initial, last_loss, layout, max_n(opt, est.n, T))


def replay_updates(store: ParamStore, records: Sequence[GradRecord], run: RunConfig, opt: OptimizerConfig,
                   state: OptimizerState | None = None, dataset_size: int | None = None) -> ParamStore:
    """Re-apply a run's updates from its scalars alone. Makes no objective calls.

    ``dataset_size`` is only needed for scaled estimators that refresh their
    scale every epoch under minibatching.
    """
    est = run.estimator
    if est.scaled and est.scale_source == "grad_norm_per_group":
        raise ConfigError("runs with grad_norm_per_group scaling need loss evaluations to replay")
    T = len(records)
    state = state if state is not None else init_state(opt, store)
    epoch = 1
    if est.scaled and est.scale_refresh == "per_epoch" and run.batch_size is not None:
        if dataset_size is None:
            raise ConfigError("replay of per-epoch scale refresh needs the dataset size")
        epoch = epoch_length(run, dataset_size)
    dvec = None
    for t, rec in enumerate(records):
        mask = run.mask_at(t)
        n_t = n_at(opt, est.n, t, T)
        lr = effective_lr(opt, est.n, t, T)
        if est.scaled:
            if scale_due(est, t, epoch):
                dvec = compute_scale_vector(est, store, None, None, 0, mask)
        seeds = rec.seeds[:n_t]
        weights = rec.projected_grads[:n_t] / n_t
        if est.kind == "one_point":
            one_point_walk(store, est.epsilon, seeds[0], mask, est.z_dist)
        else:
            scale = perturb_scale(est.kind, dvec)
            for s in seeds:
                spsa_walk(store, est.epsilon, s, mask, est.z_dist, scale)
        direction = StepDirection.build(store, seeds, weights, mask, est.z_dist, update_scale(est.kind, dvec))
        apply_update(store, state, opt, direction, lr)
    return store
