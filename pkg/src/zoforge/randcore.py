"""Deterministic random streams.

Everything random in the package flows through here: xoshiro256++ seeded by a
splitmix64 expansion, Box-Muller normals with both members of each pair
consumed (cosine first), and stateless seed derivation so that any training
step can be replayed without replaying the steps before it.

The hot loops are numba kernels. ``ReferenceStream`` is a pure-Python
implementation of the same generator that the tests use as an oracle.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from numba import njit, uint64

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
TWO_PI = 2.0 * math.pi
INV_2_53 = 1.0 / 9007199254740992.0

NOISE_LANE = 0
BATCH_LANE = 1


class InvalidDimensionError(ValueError):
    pass


class InvalidBatchError(ValueError):
    pass


def splitmix64_mix(x: int) -> int:
    """The splitmix64 finalizer (output mixing) applied to a 64-bit word."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * _MIX1) & MASK64
    x = ((x ^ (x >> 27)) * _MIX2) & MASK64
    return x ^ (x >> 31)


def derive_step_seed(master: int, step: int, lane: int) -> int:
    """Seed for ``(step, lane)`` of a run, as a pure function of the master seed.

    lane 0 drives the perturbation noise and lane 1 the minibatch draw.
    """
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if lane < 0:
        raise ValueError(f"lane must be non-negative, got {lane}")
    offset = ((step + 1) * GOLDEN + lane) & MASK64
    return splitmix64_mix((master & MASK64) ^ offset)


def probe_seed(step_seed: int, probe: int) -> int:
    """Seed of the ``probe``-th perturbation in an n-SPSA step.

    Probe 0 uses the step seed itself, so a single-probe step is plain SPSA.
    """
    if probe == 0:
        return step_seed
    return derive_step_seed(step_seed, probe, NOISE_LANE)


def expand_seed(seed: int) -> tuple[int, int, int, int]:
    """Four xoshiro256 state words from a 64-bit seed via splitmix64."""
    state = seed & MASK64
    words = []
    for _ in range(4):
        state = (state + GOLDEN) & MASK64
        words.append(splitmix64_mix(state))
    return tuple(words)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class ReferenceStream:
    """Scalar-at-a-time pure-Python twin of :class:`NoiseStream`.

    Slow; exists so the compiled kernels have something independent to be
    checked against.
    """

    def __init__(self, seed: int):
        self.s = list(expand_seed(seed))
        self.spare: float | None = None

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[0] + s[3]) & MASK64, 23) + s[0]) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def next_uniform(self) -> float:
        while True:
            bits = self.next_u64() >> 11
            if bits:
                return bits * INV_2_53

    def next_normal(self) -> float:
        if self.spare is not None:
            z, self.spare = self.spare, None
            return z
        u1 = self.next_uniform()
        u2 = self.next_uniform()
        radius = math.sqrt(-2.0 * math.log(u1))
        angle = TWO_PI * u2
        self.spare = radius * math.sin(angle)
        return radius * math.cos(angle)


# --- compiled kernels -------------------------------------------------------
# state is uint64[4]; aux is float64[2] holding (has_spare, spare_value).


@njit(inline="always")
def _k_rotl(x, k):
    return (x << uint64(k)) | (x >> uint64(64 - k))


@njit(inline="always")
def _k_next(state):
    s0 = state[0]
    s1 = state[1]
    s2 = state[2]
    s3 = state[3]
    result = _k_rotl(s0 + s3, 23) + s0
    t = s1 << uint64(17)
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _k_rotl(s3, 45)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3
    return result


@njit(inline="always")
def _k_uniform(state):
    while True:
        bits = _k_next(state) >> uint64(11)
        if bits != uint64(0):
            return float(bits) * INV_2_53


@njit(inline="always")
def _k_normal(state, aux):
    if aux[0] != 0.0:
        aux[0] = 0.0
        return aux[1]
    u1 = _k_uniform(state)
    u2 = _k_uniform(state)
    radius = math.sqrt(-2.0 * math.log(u1))
    angle = TWO_PI * u2
    aux[0] = 1.0
    aux[1] = radius * math.sin(angle)
    return radius * math.cos(angle)


@njit(cache=True, nogil=True)
def _k_fill_normals(state, aux, out):
    for i in range(out.shape[0]):
        out[i] = _k_normal(state, aux)


@njit(cache=True, nogil=True)
def _k_skip_normals(state, aux, count):
    for _ in range(count):
        _k_normal(state, aux)


@njit(cache=True, nogil=True)
def _k_sumsq_normals(state, aux, count):
    acc = 0.0
    for _ in range(count):
        z = _k_normal(state, aux)
        acc += z * z
    return acc


@njit(cache=True, nogil=True)
def _k_axpy_normals(state, aux, values, start, length, coeff, factor):
    # values[start:start+length] += coeff * (factor * z)
    for i in range(start, start + length):
        values[i] += coeff * (factor * _k_normal(state, aux))


@njit(cache=True, nogil=True)
def _k_fill_u64(state, out):
    for i in range(out.shape[0]):
        out[i] = _k_next(state)


@njit(cache=True, nogil=True)
def _k_bounded(state, bound):
    # unbiased integer in [0, bound) by rejection
    b = uint64(bound)
    threshold = (uint64(0) - b) % b
    while True:
        x = _k_next(state)
        if x >= threshold:
            return x % b


@njit(cache=True, nogil=True)
def _k_partial_shuffle(state, pool, count):
    n = pool.shape[0]
    for i in range(count):
        j = i + np.int64(_k_bounded(state, n - i))
        tmp = pool[i]
        pool[i] = pool[j]
        pool[j] = tmp


@njit(inline="always")
def _k_mix(x):
    x = (x ^ (x >> uint64(30))) * uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> uint64(27))) * uint64(0x94D049BB133111EB)
    return x ^ (x >> uint64(31))


@njit(inline="always")
def _k_expand(seed, state):
    x = seed
    for i in range(4):
        x += uint64(0x9E3779B97F4A7C15)
        state[i] = _k_mix(x)


@njit(cache=True, nogil=True)
def _k_seed_state(seed, state):
    _k_expand(seed, state)


@njit(cache=True, nogil=True)
def _k_seeded_axpy(seed, skip, values, start, length, coeff, factor):
    # fresh stream from seed, discard `skip` normals, then axpy the next `length`
    state = np.empty(4, dtype=np.uint64)
    _k_expand(seed, state)
    aux = np.zeros(2)
    for _ in range(skip):
        _k_normal(state, aux)
    for i in range(start, start + length):
        values[i] += coeff * (factor * _k_normal(state, aux))


def seeded_axpy(seed: int, skip: int, values: np.ndarray, start: int, length: int, coeff: float,
                factor: float = 1.0) -> None:
    """Same as ``NoiseStream(seed)`` then ``skip(skip)`` then ``axpy(...)``, in one compiled call."""
    _k_seeded_axpy(np.uint64(seed & MASK64), skip, values, start, length, float(coeff), float(factor))


class NoiseStream:
    """Replayable standard-normal stream keyed by a 64-bit seed.

    ``cursor`` counts the scalars emitted so far. Drawing ``k`` values in one
    call leaves the stream exactly where ``k`` single draws would.
    """

    __slots__ = ("seed", "state", "aux", "cursor")

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self.state = np.empty(4, dtype=np.uint64)
        _k_seed_state(np.uint64(self.seed), self.state)
        self.aux = np.zeros(2, dtype=np.float64)
        self.cursor = 0

    def next_standard_normal(self) -> float:
        out = np.empty(1)
        _k_fill_normals(self.state, self.aux, out)
        self.cursor += 1
        return float(out[0])

    def normals(self, count: int) -> np.ndarray:
        out = np.empty(count)
        _k_fill_normals(self.state, self.aux, out)
        self.cursor += count
        return out

    def skip(self, count: int) -> None:
        _k_skip_normals(self.state, self.aux, count)
        self.cursor += count

    def sum_of_squares(self, count: int) -> float:
        acc = _k_sumsq_normals(self.state, self.aux, count)
        self.cursor += count
        return float(acc)

    def axpy(self, values: np.ndarray, start: int, length: int, coeff: float, factor: float = 1.0) -> None:
        """``values[start:start+length] += coeff * factor * z`` using the next ``length`` normals."""
        _k_axpy_normals(self.state, self.aux, values, start, length, coeff, factor)
        self.cursor += length

    def raw_u64(self, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.uint64)
        _k_fill_u64(self.state, out)
        return out


@lru_cache(maxsize=1024)
def sphere_factor(seed: int, d: int) -> float:
    """Scale that maps the first ``d`` normals of ``seed`` onto the radius-sqrt(d) sphere."""
    if d < 1:
        raise InvalidDimensionError(f"sphere dimension must be >= 1, got {d}")
    return math.sqrt(d / NoiseStream(seed).sum_of_squares(d))


def sample_sphere(seed: int, d: int) -> np.ndarray:
    """d normals rescaled to squared norm d."""
    factor = sphere_factor(seed, d)
    return NoiseStream(seed).normals(d) * factor


def sample_gaussian(seed: int, d: int) -> np.ndarray:
    if d < 1:
        raise InvalidDimensionError(f"dimension must be >= 1, got {d}")
    return NoiseStream(seed).normals(d)


def sample_direction(seed: int, d: int, z_dist: str) -> np.ndarray:
    if z_dist == "gaussian":
        return sample_gaussian(seed, d)
    if z_dist == "sphere":
        return sample_sphere(seed, d)
    raise ValueError(f"unknown z distribution {z_dist!r}")


def sample_minibatch(seed: int, dataset_size: int, batch_size: int) -> np.ndarray:
    """``batch_size`` distinct indices from ``range(dataset_size)``, uniform without replacement."""
    if dataset_size < 1:
        raise InvalidBatchError(f"dataset must be non-empty, got size {dataset_size}")
    if not 1 <= batch_size <= dataset_size:
        raise InvalidBatchError(f"batch size {batch_size} not in [1, {dataset_size}]")
    state = np.array(expand_seed(seed), dtype=np.uint64)
    pool = np.arange(dataset_size, dtype=np.int64)
    _k_partial_shuffle(state, pool, batch_size)
    return pool[:batch_size].copy()
