"""Binary trajectory codec and zero-evaluation replay.

Layout (little-endian), 92-byte header then payload::

    0  magic b"MZOT"          4
    4  version = 1            1
    5  grad precision id      1   0=bf16 1=f32 2=f64
    6  optimizer id           1   0=sgd 1=momentum 2=adam
    7  z distribution id      1   0=gaussian 1=sphere
    8  master seed            8   u64
    16 steps T                4   u32
    20 probes n               2   u16
    22 reserved               2
    24 epsilon                8   f64
    32 base learning rate     8   f64
    40 lr schedule id         1   0=constant 1=linear_decay
    41 reserved               7
    48 weight decay           8   f64
    56 beta1                  8   f64
    64 beta2                  8   f64
    72 eps_adam               8   f64
    80 group layout hash      8   u64
    88 CRC32 of bytes 0..87   4   u32
    92 payload                T*n scalars, step-major

Seeds are not stored; they are re-derived from the master seed.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .estimators import EstimatorConfig, GradRecord, probe_seeds
from .optimizers import (ALGOS, LR_SCHEDULES, OptimizerConfig, RunConfig, TrainResult, init_state,
                         replay_updates)
from .paramspace import ParamStore
from .randcore import NOISE_LANE, derive_step_seed

MAGIC = b"MZOT"
VERSION = 1
HEADER_SIZE = 92
PRECISION_IDS = {"bf16": 0, "f32": 1, "f64": 2}
PRECISION_WIDTH = {"bf16": 2, "f32": 4, "f64": 8}
Z_IDS = {"gaussian": 0, "sphere": 1}
_HEADER = struct.Struct("<4sBBBBQIHHddB7xddddQ")
assert _HEADER.size == 88


class TrajectoryError(ValueError):
    pass


class BadMagicError(TrajectoryError):
    pass


class VersionError(TrajectoryError):
    pass


class ChecksumError(TrajectoryError):
    pass


class TruncatedError(TrajectoryError):
    pass


class TrailingBytesError(TrajectoryError):
    pass


class LayoutMismatchError(TrajectoryError):
    def __init__(self, expected: int, found: int):
        self.expected = expected
        self.found = found
        super().__init__(f"group layout hash mismatch: trajectory {expected:#018x}, parameters {found:#018x}")


@dataclass(frozen=True)
class Header:
    grad_precision: str
    optimizer: str
    z_dist: str
    master_seed: int
    steps: int
    n: int
    epsilon: float
    lr: float
    lr_schedule: str
    weight_decay: float
    beta1: float
    beta2: float
    eps_adam: float
    layout_hash: int
    version: int = VERSION

    def pack(self) -> bytes:
        body = _HEADER.pack(MAGIC, self.version, PRECISION_IDS[self.grad_precision], ALGOS.index(self.optimizer),
                            Z_IDS[self.z_dist], self.master_seed, self.steps, self.n, 0, self.epsilon, self.lr,
                            LR_SCHEDULES.index(self.lr_schedule), self.weight_decay, self.beta1, self.beta2,
                            self.eps_adam, self.layout_hash)
        return body + struct.pack("<I", zlib.crc32(body))

    @property
    def width(self) -> int:
        return PRECISION_WIDTH[self.grad_precision]

    def optimizer_config(self, base: OptimizerConfig | None = None) -> OptimizerConfig:
        """Header fields laid over ``base`` (which supplies everything the header lacks)."""
        base = base or OptimizerConfig()
        fields = dict(algo=self.optimizer, lr=self.lr, lr_schedule=self.lr_schedule, weight_decay=self.weight_decay,
                      beta1=self.beta1, beta2=self.beta2, eps_adam=self.eps_adam)
        if self.optimizer == "momentum":
            fields["beta"] = self.beta1
        return replace(base, **fields)

    def run_config(self, base: RunConfig | None = None) -> RunConfig:
        if base is None:
            est = EstimatorConfig(n=max(self.n, 1), epsilon=self.epsilon, z_dist=self.z_dist)
            return RunConfig(seed=self.master_seed, steps=max(self.steps, 1), estimator=est,
                             grad_precision=self.grad_precision)
        est = replace(base.estimator, epsilon=self.epsilon, z_dist=self.z_dist)
        return replace(base, seed=self.master_seed, estimator=est, grad_precision=self.grad_precision)


@dataclass
class Trajectory:
    header: Header
    projected_grads: np.ndarray  # (T, n) float64, zero-padded past each step's probe count

    @property
    def records(self) -> list[GradRecord]:
        h = self.header
        out = []
        for t in range(h.steps):
            seeds = probe_seeds(derive_step_seed(h.master_seed, t, NOISE_LANE), h.n)
            out.append(GradRecord(t, seeds, self.projected_grads[t], h.epsilon))
        return out

    @property
    def size_bytes(self) -> int:
        return HEADER_SIZE + self.header.steps * self.header.n * self.header.width


def header_for(result: TrainResult) -> Header:
    opt, run = result.opt, result.run
    beta1 = opt.beta if opt.algo == "momentum" else opt.beta1
    return Header(run.grad_precision, opt.algo, run.estimator.z_dist, run.seed, len(result.records), result.n_header,
                  run.estimator.epsilon, opt.lr, opt.lr_schedule, opt.weight_decay, beta1, opt.beta2, opt.eps_adam,
                  result.layout_hash)


def _payload_matrix(records, n: int) -> np.ndarray:
    pgs = np.zeros((len(records), n))
    for t, rec in enumerate(records):
        pgs[t, :rec.n] = rec.projected_grads
    return pgs


def encode_trajectory(traj: Trajectory) -> bytes:
    h = traj.header
    pgs = np.asarray(traj.projected_grads, dtype=np.float64).reshape(h.steps, h.n)
    if h.grad_precision == "f64":
        payload = pgs.astype("<f8").tobytes()
    elif h.grad_precision == "f32":
        payload = pgs.astype("<f4").tobytes()
    else:
        bits = pgs.astype(np.float32).view(np.uint32) >> np.uint32(16)
        payload = bits.astype("<u2").tobytes()
    return h.pack() + payload


def encode(result: TrainResult) -> bytes:
    h = header_for(result)
    return encode_trajectory(Trajectory(h, _payload_matrix(result.records, h.n)))


def decode(data: bytes) -> Trajectory:
    if len(data) < HEADER_SIZE:
        raise TruncatedError(f"file is {len(data)} bytes, shorter than the {HEADER_SIZE}-byte header")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if data[4] != VERSION:
        raise VersionError(f"unsupported version {data[4]}, expected {VERSION}")
    (stored_crc,) = struct.unpack_from("<I", data, 88)
    actual = zlib.crc32(data[:88])
    if stored_crc != actual:
        raise ChecksumError(f"header CRC mismatch: stored {stored_crc:#010x}, computed {actual:#010x}")
    (_, version, prec, opt_id, z_id, seed, steps, n, _, eps, lr, sched, wd, b1, b2, eps_adam,
     layout) = _HEADER.unpack_from(data, 0)
    try:
        precision = {v: k for k, v in PRECISION_IDS.items()}[prec]
        z_dist = {v: k for k, v in Z_IDS.items()}[z_id]
        optimizer = ALGOS[opt_id]
        lr_schedule = LR_SCHEDULES[sched]
    except (KeyError, IndexError) as exc:
        raise TrajectoryError(f"invalid enum value in header: {exc}") from None
    h = Header(precision, optimizer, z_dist, seed, steps, n, eps, lr, lr_schedule, wd, b1, b2, eps_adam, layout,
               version)
    expected = HEADER_SIZE + steps * n * h.width
    if len(data) < expected:
        raise TruncatedError(f"payload truncated: {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise TrailingBytesError(f"{len(data) - expected} unexpected bytes after payload")
    raw = data[HEADER_SIZE:]
    if precision == "f64":
        pgs = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    elif precision == "f32":
        pgs = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    else:
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << np.uint32(16)
        pgs = bits.view(np.float32).astype(np.float64)
    return Trajectory(h, pgs.reshape(steps, n))


def write(path: str | Path, data: bytes) -> None:
    Path(path).write_bytes(data)


def read(path: str | Path) -> Trajectory:
    return decode(Path(path).read_bytes())


def replay(traj: Trajectory | bytes, theta0: ParamStore, opt: OptimizerConfig | None = None,
           run: RunConfig | None = None, dataset_size: int | None = None) -> ParamStore:
    """Rebuild the final parameters from ``theta0`` without any loss evaluation.

    Header fields always win. ``opt`` and ``run`` supply what the header does
    not carry: history mode, n schedule, stages and estimator kind.
    """
    if isinstance(traj, (bytes, bytearray)):
        traj = decode(bytes(traj))
    h = traj.header
    found = theta0.layout_hash()
    if found != h.layout_hash:
        raise LayoutMismatchError(h.layout_hash, found)
    store = theta0.copy()
    if h.steps == 0:
        return store
    opt_cfg = h.optimizer_config(opt)
    run_cfg = h.run_config(run)
    if run_cfg.steps != h.steps:
        raise TrajectoryError(f"run config has {run_cfg.steps} steps, trajectory has {h.steps}")
    return replay_updates(store, traj.records, run_cfg, opt_cfg, init_state(opt_cfg, store), dataset_size)


def inspect(traj: Trajectory | bytes) -> str:
    """Header fields one per line, then ``step,probe,pg`` rows."""
    if isinstance(traj, (bytes, bytearray)):
        traj = decode(bytes(traj))
    h = traj.header
    lines = [
        f"magic={MAGIC.decode()}",
        f"version={h.version}",
        f"grad_precision={h.grad_precision}",
        f"optimizer={h.optimizer}",
        f"z_dist={h.z_dist}",
        f"master_seed={h.master_seed}",
        f"steps={h.steps}",
        f"n={h.n}",
        f"epsilon={h.epsilon!r}",
        f"lr={h.lr!r}",
        f"lr_schedule={h.lr_schedule}",
        f"weight_decay={h.weight_decay!r}",
        f"beta1={h.beta1!r}",
        f"beta2={h.beta2!r}",
        f"eps_adam={h.eps_adam!r}",
        f"layout_hash={h.layout_hash:#018x}",
        "step,probe,pg",
    ]
    for t in range(h.steps):
        for j in range(h.n):
            lines.append(f"{t},{j},{traj.projected_grads[t, j]!r}")
    return "\n".join(lines) + "\n"
