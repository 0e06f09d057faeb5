"""Flat parameter storage with named groups and in-place perturbation.

A :class:`ParamStore` is a single contiguous float vector cut into named
groups. Perturbation and update both walk the *active* groups in their fixed
construction order and consume one noise scalar per active coordinate, so a
seed always maps to the same direction as long as the active set is the same.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .randcore import NoiseStream, seeded_axpy, sphere_factor

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
Z_DISTS = ("gaussian", "sphere")


class UnknownGroupError(KeyError):
    pass


class ShapeMismatchError(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class GroupDesc:
    name: str
    offset: int
    length: int
    trainable: bool = True
    shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.length < 1:
            raise ValueError(f"group {self.name!r} must have positive length")
        if self.shape is not None and math.prod(self.shape) != self.length:
            raise ShapeMismatchError(f"group {self.name!r}: shape {self.shape} does not hold {self.length} values")

    @property
    def stop(self) -> int:
        return self.offset + self.length


@dataclass(frozen=True)
class AdapterSpec:
    target_group: str
    rank: int
    alpha: float
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"adapter rank must be >= 1, got {self.rank}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


class ParamStore:
    """Contiguous parameter vector plus an ordered, gap-free group table."""

    def __init__(self, values: np.ndarray, groups: Sequence[GroupDesc], adapters: Mapping[str, AdapterSpec] | None = None):
        values = np.ascontiguousarray(values)
        if values.dtype not in (np.float64, np.float32):
            raise TypeError(f"values must be float64 or float32, got {values.dtype}")
        if values.ndim != 1 or values.size == 0:
            raise ValueError("values must be a non-empty 1-D array")
        pos = 0
        names = set()
        for g in groups:
            if g.offset != pos:
                raise ValueError(f"group {g.name!r} starts at {g.offset}, expected {pos}")
            if g.name in names:
                raise ValueError(f"duplicate group name {g.name!r}")
            names.add(g.name)
            pos = g.stop
        if pos != values.size:
            raise ValueError(f"groups cover {pos} entries but store has {values.size}")
        self.values = values
        self.groups: list[GroupDesc] = list(groups)
        self.adapters: dict[str, AdapterSpec] = dict(adapters or {})
        self._index = {g.name: i for i, g in enumerate(self.groups)}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
                    frozen: Iterable[str] = (), dtype=np.float64) -> "ParamStore":
        items = list(arrays.items()) if isinstance(arrays, Mapping) else list(arrays)
        frozen = set(frozen)
        groups, chunks, pos = [], [], 0
        for name, arr in items:
            arr = np.asarray(arr, dtype=np.float64)
            groups.append(GroupDesc(name, pos, arr.size, name not in frozen, tuple(arr.shape)))
            chunks.append(arr.ravel())
            pos += arr.size
        return cls(np.concatenate(chunks).astype(dtype), groups)

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def group(self, name: str) -> GroupDesc:
        try:
            return self.groups[self._index[name]]
        except KeyError:
            raise UnknownGroupError(name) from None

    def view(self, name: str) -> np.ndarray:
        """Writable view of a group, reshaped when the group has a shape."""
        g = self.group(name)
        v = self.values[g.offset:g.stop]
        return v.reshape(g.shape) if g.shape else v

    def effective(self, name: str) -> np.ndarray:
        """Weight as seen by the model: base plus the scaled low-rank delta if one is attached."""
        base = self.view(name)
        spec = self.adapters.get(name)
        if spec is None:
            return base
        a = self.view(f"{name}.lora_A")
        b = self.view(f"{name}.lora_B")
        return base + spec.scaling * (a @ b)

    def copy(self) -> "ParamStore":
        return ParamStore(self.values.copy(), self.groups, self.adapters)

    def set_trainable(self, name: str, flag: bool) -> None:
        i = self._index.get(name)
        if i is None:
            raise UnknownGroupError(name)
        g = self.groups[i]
        self.groups[i] = GroupDesc(g.name, g.offset, g.length, flag, g.shape)

    def active_groups(self, mask: Iterable[str] | None = None) -> list[GroupDesc]:
        """Groups touched by perturbation, in construction order.

        ``mask=None`` selects the groups flagged trainable; otherwise exactly the
        named groups are selected, regardless of flags.
        """
        if mask is None:
            out = [g for g in self.groups if g.trainable]
        else:
            wanted = set(mask)
            for name in wanted:
                if name not in self._index:
                    raise UnknownGroupError(name)
            out = [g for g in self.groups if g.name in wanted]
        if not out:
            raise EmptyMaskError("no active parameter groups")
        return out

    def active_count(self, mask: Iterable[str] | None = None) -> int:
        return sum(g.length for g in self.active_groups(mask))

    def active_indices(self, mask: Iterable[str] | None = None) -> np.ndarray:
        return np.concatenate([np.arange(g.offset, g.stop) for g in self.active_groups(mask)])

    def layout_hash(self) -> int:
        """FNV-1a 64 over (name, NUL, offset u64le, length u64le) for each group in order."""
        h = FNV_OFFSET
        for g in self.groups:
            h = fnv1a64(g.name.encode("utf-8") + b"\0" + struct.pack("<QQ", g.offset, g.length), h)
        return h

    # --- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.write_bytes(self.values.astype("<f8").tobytes())
        meta = {
            "dtype": str(self.values.dtype),
            "groups": [
                {"name": g.name, "offset": g.offset, "length": g.length, "trainable": g.trainable,
                 "shape": list(g.shape) if g.shape else None}
                for g in self.groups
            ],
            "adapters": [asdict(a) for a in self.adapters.values()],
        }
        sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ParamStore":
        path = Path(path)
        meta = json.loads(sidecar(path).read_text())
        values = np.frombuffer(path.read_bytes(), dtype="<f8").astype(meta.get("dtype", "float64"))
        groups = [GroupDesc(g["name"], g["offset"], g["length"], g["trainable"],
                            tuple(g["shape"]) if g.get("shape") else None) for g in meta["groups"]]
        adapters = {a["target_group"]: AdapterSpec(**a) for a in meta.get("adapters", [])}
        return cls(values, groups, adapters)

    def __repr__(self) -> str:
        names = ", ".join(g.name for g in self.groups)
        return f"ParamStore(d={self.size}, dtype={self.dtype}, groups=[{names}])"


def sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def apply_direction(store: ParamStore, seed: int, coeff: float, mask: Iterable[str] | None = None,
                    z_dist: str = "gaussian", group_scale: Mapping[str, float] | None = None) -> None:
    """``theta_active += coeff * s_g * z`` where z is the seed's direction over the active groups.

    ``group_scale`` optionally multiplies each group's block by a constant
    (used by the scaled estimators). Sphere directions are normalized over the
    whole active set, so the normalization depends on the mask but not on the
    scales.
    """
    if z_dist not in Z_DISTS:
        raise ValueError(f"unknown z distribution {z_dist!r}")
    groups = store.active_groups(mask)
    factor = 1.0
    if z_dist == "sphere":
        factor = sphere_factor(seed, sum(g.length for g in groups))
    coeff = float(coeff)
    if len(groups) == 1 and group_scale is None:
        g = groups[0]
        seeded_axpy(seed, 0, store.values, g.offset, g.length, coeff, factor)
        return
    stream = NoiseStream(seed)
    for g in groups:
        c = coeff if group_scale is None else coeff * float(group_scale[g.name])
        stream.axpy(store.values, g.offset, g.length, c, factor)


def perturb_in_place(store: ParamStore, epsilon: float, seed: int, mask: Iterable[str] | None = None,
                     z_dist: str = "gaussian", group_scale: Mapping[str, float] | None = None) -> None:
    apply_direction(store, seed, epsilon, mask, z_dist, group_scale)


def apply_projected_grad(store: ParamStore, seed: int, coeff: float, mask: Iterable[str] | None = None,
                         z_dist: str = "gaussian", group_scale: Mapping[str, float] | None = None) -> None:
    """Caller passes ``coeff = -lr * projected_grad`` (or any optimizer-shaped scalar)."""
    apply_direction(store, seed, coeff, mask, z_dist, group_scale)


def direction_vector(store: ParamStore, seed: int, mask: Iterable[str] | None = None, z_dist: str = "gaussian",
                     group_scale: Mapping[str, float] | None = None) -> np.ndarray:
    """Full-length z (zeros on inactive coordinates). Oracle and test use only."""
    probe = ParamStore(np.zeros(store.size), store.groups, store.adapters)
    apply_direction(probe, seed, 1.0, mask, z_dist, group_scale)
    return probe.values


def attach_low_rank_adapter(store: ParamStore, spec: AdapterSpec) -> ParamStore:
    """New store with ``<target>.lora_A`` (m x r) and ``<target>.lora_B`` (r x n) appended.

    The base group is frozen, A is Gaussian with scale 1/sqrt(r) and B is zero,
    so the effective weight starts equal to the base weight.
    """
    target = store.group(spec.target_group)
    if target.shape is None or len(target.shape) != 2:
        raise ShapeMismatchError(f"group {target.name!r} is not a matrix (shape {target.shape})")
    if spec.target_group in store.adapters:
        raise ValueError(f"group {target.name!r} already has an adapter")
    m, n = target.shape
    if spec.rank > min(m, n):
        raise ShapeMismatchError(f"rank {spec.rank} exceeds min{target.shape}")
    a_init = NoiseStream(spec.seed).normals(m * spec.rank) / math.sqrt(spec.rank)
    b_init = np.zeros(spec.rank * n)
    groups = [GroupDesc(g.name, g.offset, g.length, False if g.name == target.name else g.trainable, g.shape)
              for g in store.groups]
    pos = store.size
    groups.append(GroupDesc(f"{target.name}.lora_A", pos, m * spec.rank, True, (m, spec.rank)))
    groups.append(GroupDesc(f"{target.name}.lora_B", pos + m * spec.rank, spec.rank * n, True, (spec.rank, n)))
    values = np.concatenate([store.values, a_init.astype(store.dtype), b_init.astype(store.dtype)])
    adapters = dict(store.adapters)
    adapters[target.name] = spec
    return ParamStore(values, groups, adapters)
