"""Monte Carlo and closed-form checks of the estimator moments and convergence theory.

Each suite returns a list of :class:`CheckReport` and can drop CSV evidence
into a directory. Monte Carlo work is split into fixed-size chunks keyed by
sample index; chunks may run on a thread pool, but they are always reduced in
index order, so reports do not depend on the worker count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .estimators import (EstimatorConfig, ScaleVector, expectation_modified_spsa, materialize, n_spsa,
                         spsa_projected_grad, variance_modified_spsa)
from .objectives import (DatasetSpec, Logistic, Objective, Quadratic, estimate_sigma_trace, make_dataset,
                         rank_r_spectrum)
from .optimizers import OptimizerConfig, RunConfig, step_batch, train
from .paramspace import ParamStore, apply_projected_grad, direction_vector
from .randcore import NOISE_LANE, NoiseStream, derive_step_seed

CHUNK = 500
RULES = ("rel", "abs", "le", "ge", "band")


# --- constants -----------------------------------------------------------------


def gamma_sphere(d: int, r: float, n: int) -> float:
    """Slowdown constant of the one-step descent bound for sphere directions."""
    return (d * r + d - 2) / (n * (d + 2)) + 1.0


def gamma_gaussian(r: float, n: int) -> float:
    return (r + n + 1) / n


def norm_ratio_sphere(d: int, n: int) -> float:
    return (d + n - 1) / n


def norm_ratio_gaussian(d: int, n: int) -> float:
    return (d + n + 1) / n


def theory_lr(ell: float, gamma: float) -> float:
    """Step size that maximizes the guaranteed one-step decrease, 1 / (ell * gamma)."""
    return 1.0 / (ell * gamma)


def sgd_iterations(ell: float, mu: float, alpha: float, batch: int, gap0: float, target: float) -> float:
    """First-order iteration count ``max(2 ell/mu, 2 ell alpha/(mu^2 B)) * log(gap0/target)``."""
    return max(2 * ell / mu, 2 * ell * alpha / (mu * mu * batch)) * math.log(gap0 / target)


@dataclass(frozen=True)
class TheoryParams:
    ell: float
    r: float
    mu: float
    d: int
    n: int = 1
    alpha: float = 0.0
    G: float = 0.0

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("effective rank must be >= 1")
        if self.mu > 0 and self.ell < self.mu:
            raise ValueError("smoothness must be >= PL constant")

    @classmethod
    def of_quadratic(cls, q: Quadratic, n: int = 1) -> "TheoryParams":
        return cls(q.smoothness, q.effective_rank, q.pl_constant, q.dim, n)

    @property
    def gamma(self) -> float:
        return gamma_sphere(self.d, self.r, self.n)

    @property
    def lr(self) -> float:
        return theory_lr(self.ell, self.gamma)

    @property
    def sgd_lr(self) -> float:
        return min(1.0 / self.ell, self.mu / (self.ell * self.alpha)) if self.alpha > 0 else 1.0 / self.ell

    @property
    def zo_lr_rule(self) -> float:
        """``n / (d + n - 1)`` times the first-order step size."""
        return self.n / (self.d + self.n - 1) * self.sgd_lr


# --- reports -----------------------------------------------------------------------


@dataclass
class CheckReport:
    suite: str
    name: str
    measured: float
    predicted: float
    tol: float
    rule: str = "rel"
    samples: int = 0
    se: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}")

    @property
    def passed(self) -> bool:
        m, p, tol = self.measured, self.predicted, self.tol
        if not math.isfinite(m):
            return False
        if self.rule == "rel":
            return abs(m - p) <= tol * abs(p)
        if self.rule == "abs":
            return abs(m - p) <= tol
        if self.rule == "le":
            return m <= p + tol
        if self.rule == "ge":
            return m >= p - tol
        return p / tol <= m <= p * tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"SUITE {self.suite}.{self.name} {status} measured={self.measured:.6g} "
                f"predicted={self.predicted:.6g} tol={self.tol:.6g}")

    def row(self) -> dict:
        return {"suite": self.suite, "name": self.name, "rule": self.rule, "measured": repr(self.measured),
                "predicted": repr(self.predicted), "tol": repr(self.tol), "samples": self.samples,
                "se": repr(self.se), "pass": int(self.passed)}


def write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# --- Monte Carlo plumbing ------------------------------------------------------------


def mc_reduce(fn: Callable[[int, int], np.ndarray], samples: int, workers: int = 1, chunk: int = CHUNK) -> np.ndarray:
    """Sum ``fn(start, stop)`` over fixed chunks of ``range(samples)`` in index order."""
    bounds = [(a, min(a + chunk, samples)) for a in range(0, samples, chunk)]
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: fn(*b), bounds))
    else:
        parts = [fn(a, b) for a, b in bounds]
    total = np.zeros_like(parts[0])
    for p in parts:
        total = total + p
    return total


def sample_seed(master: int, i: int) -> int:
    return derive_step_seed(master, i, NOISE_LANE)


# --- moment checks -------------------------------------------------------------------------


def check_norm_ratio(obj: Objective, theta: ParamStore, n: int, z_dist: str, samples: int, seed: int = 0,
                     workers: int = 1, tol: float = 0.05, name: str | None = None) -> CheckReport:
    """E||g_hat||^2 / E||grad(theta; B)||^2 against the closed form for the sampler."""
    cfg = EstimatorConfig(n=n, epsilon=1e-3, z_dist=z_dist)
    g = obj.grad(theta)
    gsq = float(g @ g)
    d = theta.active_count()

    def chunk(a, b):
        st = theta.copy()
        acc = np.zeros(2)
        for i in range(a, b):
            rec = n_spsa(st, obj, None, cfg, sample_seed(seed, i))
            gh = materialize(st, rec, z_dist=z_dist)
            x = float(gh @ gh) / gsq
            acc += (x, x * x)
        return acc

    s1, s2 = mc_reduce(chunk, samples, workers)
    mean = s1 / samples
    se = math.sqrt(max(s2 / samples - mean * mean, 0.0) / samples)
    pred = norm_ratio_sphere(d, n) if z_dist == "sphere" else norm_ratio_gaussian(d, n)
    return CheckReport("normratio", name or f"{z_dist}_d{d}_n{n}", mean, pred, tol, "rel", samples, se,
                       {"d": d, "n": n, "z_dist": z_dist})


def check_gaussian_covariance(obj: Quadratic, theta: ParamStore, samples: int, seed: int = 0, workers: int = 1,
                              tol: float = 0.05) -> tuple[CheckReport, list[dict]]:
    """Entrywise E[g_hat g_hat^T] against 2 g g^T + ||g||^2 I (full batch, n = 1, Gaussian z)."""
    g = obj.grad(theta)
    d = g.size
    pred = 2.0 * np.outer(g, g) + (g @ g) * np.eye(d)

    def chunk(a, b):
        st = theta.copy()
        acc = np.zeros((2, d, d))
        for i in range(a, b):
            s = sample_seed(seed, i)
            pg = spsa_projected_grad(st, obj, None, 1e-3, s)
            gh = pg * direction_vector(st, s)
            outer = np.outer(gh, gh)
            acc[0] += outer
            acc[1] += outer * outer
        return acc

    s = mc_reduce(chunk, samples, workers)
    mean = s[0] / samples
    se = np.sqrt(np.maximum(s[1] / samples - mean * mean, 0.0) / samples)
    rel = np.abs(mean - pred) / np.abs(pred)
    rows = [{"i": i, "j": j, "measured": repr(mean[i, j]), "predicted": repr(pred[i, j]), "se": repr(se[i, j]),
             "rel_err": repr(rel[i, j])} for i in range(d) for j in range(d)]
    worst = np.unravel_index(np.argmax(rel), rel.shape)
    rep = CheckReport("gausscov", f"entrywise_d{d}", float(rel.max()), 0.0, tol, "le", samples,
                      float(se[worst] / abs(pred[worst])), {"worst_entry": tuple(int(k) for k in worst)})
    return rep, rows


def _mean_estimate(theta: ParamStore, samples: int, seed: int, workers: int,
                   one: Callable[[ParamStore, int], np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    d = theta.size

    def chunk(a, b):
        st = theta.copy()
        acc = np.zeros((2, d))
        for i in range(a, b):
            gh = one(st, sample_seed(seed, i))
            acc[0] += gh
            acc[1] += gh * gh
        return acc

    s = mc_reduce(chunk, samples, workers)
    mean = s[0] / samples
    se = np.sqrt(np.maximum(s[1] / samples - mean * mean, 0.0) / samples)
    return mean, se


def estimator_sampler(kind: str, obj: Objective, n: int = 1, dvec: ScaleVector | None = None,
                      z_dist: str = "gaussian", epsilon: float = 1e-3) -> Callable[[ParamStore, int], np.ndarray]:
    """Function ``(store, seed) -> g_hat`` for one draw of the named estimator."""
    if kind == "spsa":
        cfg = EstimatorConfig(n=n, epsilon=epsilon, z_dist=z_dist)
        return lambda st, s: materialize(st, n_spsa(st, obj, None, cfg, s), z_dist=z_dist)
    if kind == "variance_modified":
        def one(st, s):
            pg = variance_modified_spsa(st, obj, None, epsilon, s, dvec, z_dist=z_dist)
            return pg * direction_vector(st, s, None, z_dist, dict(dvec.values))
        return one
    if kind == "expectation_modified":
        def one(st, s):
            pg = expectation_modified_spsa(st, obj, None, epsilon, s, dvec, z_dist=z_dist)
            return pg * direction_vector(st, s, None, z_dist)
        return one
    raise ValueError(f"no sampler for {kind!r}")


def check_unbiasedness(obj: Objective, theta: ParamStore, kind: str, samples: int, seed: int = 0, workers: int = 1,
                       n: int = 1, dvec: ScaleVector | None = None, target: np.ndarray | None = None,
                       name: str | None = None) -> CheckReport:
    """Largest per-coordinate |mean - target| / SE; passes when it is at most 3.

    ``target`` defaults to the oracle gradient.
    """
    mean, se = _mean_estimate(theta, samples, seed, workers, estimator_sampler(kind, obj, n, dvec))
    target = obj.grad(theta) if target is None else target
    z = np.abs(mean - target) / np.maximum(se, 1e-300)
    return CheckReport("unbiased", name or kind, float(z.max()), 0.0, 3.0, "le", samples, 1.0,
                       {"mean": mean.tolist(), "target": list(map(float, target))})


# --- descent bound ------------------------------------------------------------------------


def check_descent_bound(obj: Quadratic, theta: ParamStore, lr: float, n: int, samples: int, seed: int = 0,
                        workers: int = 1, name: str = "descent") -> tuple[CheckReport, CheckReport]:
    """One ZO-SGD step from a fixed point against the sphere-direction descent bound.

    Returns the zeroth-order report and the first-order (oracle gradient)
    descent-lemma report for contrast.
    """
    g = obj.grad(theta)
    gsq = float(g @ g)
    ell, d, r = obj.smoothness, theta.size, obj.effective_rank
    gam = gamma_sphere(d, r, n)
    bound = -lr * gsq + 0.5 * lr * lr * ell * gam * gsq
    base_loss = obj.loss(theta, None)
    cfg = EstimatorConfig(n=n, epsilon=1e-3, z_dist="sphere")

    def chunk(a, b):
        st = theta.copy()
        acc = np.zeros(2)
        for i in range(a, b):
            rec = n_spsa(st, obj, None, cfg, sample_seed(seed, i))
            for s, pg in zip(rec.seeds, rec.projected_grads):
                apply_projected_grad(st, s, -lr * pg / n, z_dist="sphere")
            delta = obj.loss(st, None) - base_loss
            st.values[:] = theta.values
            acc += (delta, delta * delta)
        return acc

    s1, s2 = mc_reduce(chunk, samples, workers)
    mean = s1 / samples
    se = math.sqrt(max(s2 / samples - mean * mean, 0.0) / samples) if samples else 0.0
    zo = CheckReport("descent", name, mean, bound, 3.0 * se, "le", samples, se,
                     {"d": d, "r": r, "n": n, "lr": lr, "gamma": gam})
    fo_step = ParamStore(theta.values - lr * g, theta.groups)
    fo_delta = obj.loss(fo_step, None) - base_loss
    fo_bound = -lr * gsq + 0.5 * lr * lr * ell * gsq
    fo = CheckReport("descent", f"{name}_first_order", fo_delta, fo_bound, 1e-12 * max(1.0, abs(fo_bound)), "le", 1)
    return zo, fo


# --- rank scaling -----------------------------------------------------------------------------


def iterations_to_target(d: int, r: int, seed: int, rel_target: float = 1e-6, n: int = 1,
                         max_steps: int = 100000) -> int:
    """ZO-SGD steps on the noise-free rank-r quadratic until L <= rel_target * L0, at the theory step size."""
    q = Quadratic(rank_r_spectrum(d, r))
    tp = TheoryParams.of_quadratic(q, n)
    st = q.init_store(seed=derive_step_seed(seed, 0, 3))
    cfg = EstimatorConfig(n=n, epsilon=1e-3, z_dist="sphere")
    target = rel_target * q.loss(st, None)
    for t in range(max_steps):
        rec = n_spsa(st, q, None, cfg, derive_step_seed(seed, t, NOISE_LANE))
        for s, pg in zip(rec.seeds, rec.projected_grads):
            apply_projected_grad(st, s, -tp.lr * pg / n, z_dist="sphere")
        if q.loss(st, None) <= target:
            return t + 1
    return max_steps


def mean_iterations(d: int, r: int, seed: int, reps: int, workers: int = 1, rel_target: float = 1e-6) -> float:
    seeds = [derive_step_seed(seed, k, 4) for k in range(reps)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            its = list(pool.map(lambda s: iterations_to_target(d, r, s, rel_target), seeds))
    else:
        its = [iterations_to_target(d, r, s, rel_target) for s in seeds]
    return float(np.mean(its))


def rank_scaling_experiment(r_list: Sequence[int] = (4, 8, 16, 32), d_fixed: int = 512,
                            d_list: Sequence[int] = (128, 1024), r_fixed: int = 8, reps: int = 3, seed: int = 0,
                            workers: int = 1, rel_target: float = 1e-6) -> tuple[list[CheckReport], list[dict]]:
    rows = []
    by_r = {}
    for r in r_list:
        by_r[r] = mean_iterations(d_fixed, r, seed, reps, workers, rel_target)
        rows.append({"d": d_fixed, "r": r, "iterations": by_r[r], "gamma": gamma_sphere(d_fixed, r, 1)})
    by_d = {}
    for d in d_list:
        by_d[d] = mean_iterations(d, r_fixed, seed, reps, workers, rel_target)
        rows.append({"d": d, "r": r_fixed, "iterations": by_d[d], "gamma": gamma_sphere(d, r_fixed, 1)})

    rs = np.array(list(by_r), dtype=float)
    its = np.array([by_r[r] for r in by_r])
    slope, icept = np.polyfit(rs, its, 1)
    fitted = slope * rs + icept
    r2 = 1.0 - np.sum((its - fitted) ** 2) / np.sum((its - its.mean()) ** 2)
    # an r-proportional model through the smallest r predicts slope its[0]/r[0]
    pred_slope = its[0] / rs[0]
    lo, hi = min(r_list), max(r_list)
    reports = [
        CheckReport("rankscale", "linear_fit_r2", float(r2), 0.9, 0.0, "ge", len(r_list) * reps),
        CheckReport("rankscale", "slope_vs_proportional", float(slope / pred_slope), 1.0, 2.0, "band"),
    ]
    if 4 in by_r and 16 in by_r:
        reports.append(CheckReport("rankscale", f"ratio_r16_r4_d{d_fixed}", by_r[16] / by_r[4], 4.0, 2.0, "band",
                                   reps, extra={"gamma_ratio": gamma_sphere(d_fixed, 16, 1) / gamma_sphere(d_fixed, 4, 1)}))
    else:
        reports.append(CheckReport("rankscale", f"ratio_r{hi}_r{lo}_d{d_fixed}", by_r[hi] / by_r[lo], hi / lo, 2.0,
                                   "band", reps))
    dv = list(by_d.values())
    reports.append(CheckReport("rankscale", f"d_flatness_r{r_fixed}", max(dv) / min(dv), 1.0, 0.3, "le", reps))
    return reports, rows


def check_single_mode_contraction(d: int = 32, lr: float | None = None, samples: int = 20000, seed: int = 0,
                                  workers: int = 1) -> CheckReport:
    """Rank-1 quadratic: mean per-step ratio L+/L against 1 - 2 lr + lr^2 * 3d/(d+2)."""
    lam = rank_r_spectrum(d, 1)
    q = Quadratic(lam)
    lr = theory_lr(1.0, gamma_sphere(d, 1.0, 1)) if lr is None else lr
    theta = q.store_from(np.eye(d)[0])
    L0 = q.loss(theta, None)

    def chunk(a, b):
        st = theta.copy()
        acc = np.zeros(2)
        for i in range(a, b):
            s = sample_seed(seed, i)
            pg = spsa_projected_grad(st, q, None, 1e-3, s, z_dist="sphere")
            apply_projected_grad(st, s, -lr * pg, z_dist="sphere")
            x = q.loss(st, None) / L0
            st.values[:] = theta.values
            acc += (x, x * x)
        return acc

    s1, s2 = mc_reduce(chunk, samples, workers)
    mean = s1 / samples
    se = math.sqrt(max(s2 / samples - mean * mean, 0.0) / samples)
    pred = 1.0 - 2.0 * lr + lr * lr * 3.0 * d / (d + 2)
    return CheckReport("rankscale", f"single_mode_contraction_d{d}", mean, pred, 0.05, "rel", samples, se)


# --- covariance trace bound --------------------------------------------------------------------


def check_sigma_trace_bound(n_examples: int = 50, dim: int = 5, steps: int = 200, seed: int = 0,
                            lr: float = 0.05) -> tuple[CheckReport, list[dict]]:
    """tr Sigma <= alpha * (L - L*) along a ZO training trajectory of the exp-margin loss.

    The data are separable, so L* = 0. ``alpha = N * ell * r`` with ell and r
    the largest Hessian operator norm and effective rank seen on the path.
    """
    data = make_dataset(DatasetSpec("synthetic-linear", n_examples, dim, 2, seed))
    obj = Logistic(data, "exp")
    snaps: list[np.ndarray] = []
    store = obj.init_store()
    snaps.append(store.values.copy())
    run = RunConfig(seed=seed, steps=steps, estimator=EstimatorConfig(epsilon=1e-3))
    train(run, OptimizerConfig(lr=lr), obj, store, on_step=lambda t, st: snaps.append(st.values.copy()))
    rows = []
    ells, ranks = [], []
    for th in snaps:
        st = ParamStore(th.copy(), store.groups)
        H = obj.hessian(st)
        eig = np.linalg.eigvalsh(H)
        ells.append(eig[-1])
        ranks.append(eig.sum() / eig[-1])
        rows.append({"step": len(rows), "sigma_trace": estimate_sigma_trace(obj, st), "loss": obj.loss(st, None),
                     "ell": eig[-1], "r": eig.sum() / eig[-1]})
    alpha = n_examples * max(ells) * max(ranks)
    worst = 0.0
    for row in rows:
        row["alpha"] = alpha
        ratio = row["sigma_trace"] / (alpha * row["loss"])
        row["ratio"] = ratio
        worst = max(worst, ratio)
    rep = CheckReport("sigmatrace", f"exp_margin_N{n_examples}", worst, 1.0, 0.0, "le", len(rows),
                      extra={"alpha": alpha})
    return rep, rows


# --- first-order baseline ------------------------------------------------------------------------


def sgd_baseline(run: RunConfig, lr: float, obj: Objective, store: ParamStore) -> list[tuple[int, float]]:
    """Oracle-gradient minibatch SGD on the same batch sequence as a ZO run. Returns (step, loss) rows."""
    rows = [(0, obj.loss(store, obj._batch(None)))]
    for t in range(run.steps):
        batch = step_batch(run, t, obj.dataset_size)
        g = obj.grad(store, batch)
        for gd in store.active_groups(run.mask_at(t)):
            store.values[gd.offset:gd.stop] -= lr * g[gd.offset:gd.stop]
        rows.append((t + 1, obj.loss(store, obj._batch(None))))
    return rows


def check_sgd_rate(ell: float = 1.0, mu: float = 0.25, steps: int = 20) -> CheckReport:
    """Full-batch GD at lr = 1/ell contracts the slowest mode by exactly 1 - mu/ell per step."""
    q = Quadratic([ell, mu])
    st = q.store_from([0.0, 1.0])
    rows = sgd_baseline(RunConfig(steps=steps), 1.0 / ell, q, st)
    losses = np.array([r[1] for r in rows])
    per_step = np.sqrt(losses[1:] / losses[:-1])
    pred = 1.0 - mu / ell
    return CheckReport("sgdbaseline", "gd_geometric_rate", float(np.max(np.abs(per_step - pred))), 0.0, 1e-12, "le",
                       steps)


def check_zo_vs_sgd_decrease(d: int = 50, n: int = 1, samples: int = 10000, seed: int = 0,
                             workers: int = 1) -> CheckReport:
    """Expected one-step decrease of ZO-SGD at the scaled step size over that of GD; expect 1/gamma."""
    q = Quadratic(np.ones(d))
    tp = TheoryParams.of_quadratic(q, n)
    theta = q.init_store(seed=derive_step_seed(seed, 0, 5))
    L0 = q.loss(theta, None)
    g = q.grad(theta)
    fo = L0 - q.loss(ParamStore(theta.values - tp.sgd_lr * g, theta.groups), None)
    lr = tp.zo_lr_rule
    cfg = EstimatorConfig(n=n, epsilon=1e-3, z_dist="sphere")

    def chunk(a, b):
        st = theta.copy()
        acc = np.zeros(2)
        for i in range(a, b):
            rec = n_spsa(st, q, None, cfg, sample_seed(seed, i))
            for s, pg in zip(rec.seeds, rec.projected_grads):
                apply_projected_grad(st, s, -lr * pg / n, z_dist="sphere")
            x = L0 - q.loss(st, None)
            st.values[:] = theta.values
            acc += (x, x * x)
        return acc

    s1, s2 = mc_reduce(chunk, samples, workers)
    mean = s1 / samples
    se = math.sqrt(max(s2 / samples - mean * mean, 0.0) / samples)
    return CheckReport("sgdbaseline", f"decrease_ratio_d{d}_n{n}", mean / fo, 1.0 / tp.gamma, 0.2, "rel", samples,
                       se / fo)


# --- suites -----------------------------------------------------------------------------------------


def _quadratic_at(d: int, seed: int, spread: bool = True) -> tuple[Quadratic, ParamStore]:
    s = NoiseStream(derive_step_seed(seed, d, 6))
    lam = 0.5 + np.abs(s.normals(d)) if spread else np.ones(d)
    q = Quadratic(lam)
    return q, q.store_from(s.normals(d))


def suite_normratio(seed=0, workers=1, samples=10000):
    reports = []
    for d, n in ((10, 1), (10, 4), (100, 1)):
        q, theta = _quadratic_at(d, seed)
        reports.append(check_norm_ratio(q, theta, n, "sphere", samples, seed, workers))
    return reports, [r.row() for r in reports]


def suite_gausscov(seed=0, workers=1, samples=100000):
    q = Quadratic(np.ones(5))
    theta = q.store_from(np.ones(5))
    rep, rows = check_gaussian_covariance(q, theta, samples, seed, workers)
    return [rep], rows


def suite_unbiased(seed=0, workers=1, samples=20000):
    q, theta = _quadratic_at(5, seed)
    theta = q.store_from(theta.values, group_sizes=(2, 3))
    g = q.grad(theta)
    dvec = ScaleVector({"g0": float(np.linalg.norm(theta.values[:2])), "g1": float(np.linalg.norm(theta.values[2:]))})
    dexp = ScaleVector({"g0": 3.0, "g1": 0.5})
    target = g / dexp.expand(theta)
    reports = [
        check_unbiasedness(q, theta, "spsa", samples, seed, workers),
        check_unbiasedness(q, theta, "spsa", samples, seed, workers, n=4, name="n_spsa_4"),
        check_unbiasedness(q, theta, "variance_modified", samples, seed, workers, dvec=dvec),
        check_unbiasedness(q, theta, "expectation_modified", samples, seed, workers, dvec=dexp, target=target,
                           name="expectation_modified_targets_scaled_grad"),
    ]
    bias = check_unbiasedness(q, theta, "expectation_modified", samples, seed, workers, dvec=dexp)
    reports.append(CheckReport("unbiased", "expectation_modified_is_biased", bias.measured, 3.0, 0.0, "ge", samples,
                               extra=bias.extra))
    return reports, [r.row() for r in reports]


def descent_configs(seed: int = 0) -> list[tuple[int, int, float]]:
    """Five (d, r, lr multiple of 1/(ell gamma)) settings for the one-step bound."""
    return [(100, 2, 1.0), (50, 5, 1.0), (20, 20, 1.0), (100, 10, 2.0), (30, 3, 0.5)]


def suite_descent(seed=0, workers=1, samples=10000):
    reports = []
    for k, (d, r, mult) in enumerate(descent_configs(seed)):
        s = NoiseStream(derive_step_seed(seed, k, 7))
        lam = np.zeros(d)
        lam[:r] = 1.0
        q = Quadratic(lam)
        theta = q.store_from(s.normals(d))
        tp = TheoryParams.of_quadratic(q)
        reports.extend(check_descent_bound(q, theta, mult * tp.lr, 1, samples, seed + k, workers,
                                           name=f"d{d}_r{r}_lrx{mult:g}"))
    return reports, [r.row() for r in reports]


def suite_rankscale(seed=0, workers=1, reps=3):
    reports, rows = rank_scaling_experiment(seed=seed, workers=workers, reps=reps)
    reports.append(check_single_mode_contraction(seed=seed, workers=workers))
    return reports, rows


def suite_sigmatrace(seed=0, workers=1):
    rep, rows = check_sigma_trace_bound(seed=seed)
    return [rep], rows


def suite_sgdbaseline(seed=0, workers=1):
    reports = [check_sgd_rate(), check_zo_vs_sgd_decrease(seed=seed, workers=workers)]
    return reports, [r.row() for r in reports]


SUITES: dict[str, Callable] = {
    "normratio": suite_normratio,
    "gausscov": suite_gausscov,
    "unbiased": suite_unbiased,
    "descent": suite_descent,
    "rankscale": suite_rankscale,
    "sigmatrace": suite_sigmatrace,
    "sgdbaseline": suite_sgdbaseline,
}


def run_suite(name: str, seed: int = 0, workers: int = 1, csv_dir: str | Path | None = None) -> list[CheckReport]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; valid: {', '.join(SUITES)}")
    reports, rows = SUITES[name](seed=seed, workers=workers)
    if csv_dir is not None:
        out = Path(csv_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / f"{name}.csv", rows)
        write_csv(out / f"{name}_reports.csv", [r.row() for r in reports])
    return reports
