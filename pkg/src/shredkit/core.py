"""Domain types shared across the package and the SHRDSNAP snapshot format."""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class FieldId(str, enum.Enum):
    VELOCITY_X = "VELOCITY_X"
    VELOCITY_Y = "VELOCITY_Y"
    TEMPERATURE = "TEMPERATURE"
    FLUX = "FLUX"
    PRECURSOR = "PRECURSOR"


ALL_FIELDS = tuple(FieldId)


class Region(enum.IntEnum):
    CORE = 0
    REFLECTOR = 1


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VALIDATION = "VALIDATION"
    TEST = "TEST"


@dataclass(frozen=True, eq=False)
class Grid2D:
    """Uniform cell-centred grid on ``[x0, x1] x [y0, y1]``.

    Node ``(i, j)`` sits at the centre of cell ``i`` along x and ``j`` along y.
    Nodes are flattened x-fastest: ``n = j * nx + i``.
    """

    nx: int
    ny: int
    x0: float = 0.0
    x1: float = 1.0
    y0: float = 0.0
    y1: float = 2.0
    region_label: np.ndarray | None = None

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs nx, ny >= 2, got {self.nx}x{self.ny}")
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("grid bounds must be strictly ordered")
        if self.region_label is None:
            labels = np.full(self.n_nodes, Region.CORE, dtype=np.int8)
        else:
            labels = np.asarray(self.region_label, dtype=np.int8).reshape(-1)
            if labels.shape != (self.n_nodes,):
                raise ValueError("region_label must have one entry per node")
            if not np.isin(labels, [Region.CORE, Region.REFLECTOR]).all():
                raise ValueError("region labels must be CORE or REFLECTOR")
        labels = labels.copy()
        labels.setflags(write=False)
        object.__setattr__(self, "region_label", labels)

    @classmethod
    def with_reflector(cls, nx: int, ny: int, thickness: float = 0.1,
                       x0: float = 0.0, x1: float = 1.0,
                       y0: float = 0.0, y1: float = 2.0) -> "Grid2D":
        """Grid whose outer frame of the given physical thickness is REFLECTOR."""
        g = cls(nx, ny, x0, x1, y0, y1)
        x, y = g.node_coordinates()
        outer = ((x - x0 < thickness) | (x1 - x < thickness)
                 | (y - y0 < thickness) | (y1 - y < thickness))
        labels = np.where(outer, Region.REFLECTOR, Region.CORE)
        return cls(nx, ny, x0, x1, y0, y1, labels)

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def hx(self) -> float:
        return (self.x1 - self.x0) / self.nx

    @property
    def hy(self) -> float:
        return (self.y1 - self.y0) / self.ny

    def node_coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.x0 + (np.arange(self.nx) + 0.5) * self.hx
        ys = self.y0 + (np.arange(self.ny) + 0.5) * self.hy
        X, Y = np.meshgrid(xs, ys)
        return X.reshape(-1), Y.reshape(-1)

    def positions(self, region: Region | None = None) -> np.ndarray:
        x, y = self.node_coordinates()
        pts = np.column_stack([x, y])
        if region is None:
            return pts
        return pts[self.region_label == region]

    def contains(self, p) -> bool:
        return (self.x0 <= p[0] <= self.x1) and (self.y0 <= p[1] <= self.y1)

    def normalize(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        lo = np.array([self.x0, self.y0])
        span = np.array([self.x1 - self.x0, self.y1 - self.y0])
        return (p - lo) / span

    def area_weights(self) -> np.ndarray:
        return np.full(self.n_nodes, self.hx * self.hy)

    def __eq__(self, other):
        if not isinstance(other, Grid2D):
            return NotImplemented
        return ((self.nx, self.ny, self.x0, self.x1, self.y0, self.y1)
                == (other.nx, other.ny, other.x0, other.x1, other.y0, other.y1)
                and np.array_equal(self.region_label, other.region_label))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ParametricCase:
    """All field snapshots (``N_h x N_t``) for one value of the pump time constant."""

    tau: float
    dt: float
    fields: dict

    def __post_init__(self):
        if not self.fields:
            raise ValueError("a case needs at least one field")
        shapes = set()
        frozen = {}
        for key, mat in self.fields.items():
            fid = FieldId(key)
            arr = np.array(mat, dtype=np.float64, order="F")
            if arr.ndim != 2:
                raise ValueError(f"{fid.value}: snapshots must be a 2-D matrix")
            if not np.isfinite(arr).all():
                raise ValueError(f"{fid.value}: non-finite entry")
            arr.setflags(write=False)
            frozen[fid] = arr
            shapes.add(arr.shape)
        if len(shapes) != 1:
            raise ValueError(f"field matrices disagree in shape: {sorted(shapes)}")
        n_h, n_t = shapes.pop()
        if n_h < 1 or n_t < 1:
            raise ValueError("empty snapshot matrix")
        object.__setattr__(self, "fields", frozen)

    @property
    def n_h(self) -> int:
        return next(iter(self.fields.values())).shape[0]

    @property
    def n_t(self) -> int:
        return next(iter(self.fields.values())).shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_t) * self.dt

    def __eq__(self, other):
        if not isinstance(other, ParametricCase):
            return NotImplemented
        if (struct.pack("<dd", self.tau, self.dt) != struct.pack("<dd", other.tau, other.dt)
                or list(self.fields) != list(other.fields)):
            return False
        return all(self.fields[k].tobytes("F") == other.fields[k].tobytes("F")
                   for k in self.fields)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ParametricDataset:
    grid: Grid2D
    cases: list
    split: list
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.cases) != len(self.split):
            raise ValueError("one split tag per case required")
        if not self.cases:
            raise ValueError("dataset has no cases")
        ref = self.cases[0]
        for c in self.cases:
            if c.n_h != self.grid.n_nodes:
                raise ValueError("case node count does not match the grid")
            if c.n_t < 2:
                raise ValueError("dataset cases need N_t >= 2")
            if c.dt != ref.dt or c.n_t != ref.n_t or list(c.fields) != list(ref.fields):
                raise ValueError("cases must share dt, N_t and field set")
        taus = [c.tau for c in self.cases]
        if len(set(taus)) != len(taus):
            raise ValueError("tau values must be distinct")
        tags = [Split(s) for s in self.split]
        if len(self.cases) >= 3 and set(tags) != set(Split):
            raise ValueError("each split must be non-empty when N_p >= 3")
        object.__setattr__(self, "split", tags)
        object.__setattr__(self, "cases", list(self.cases))

    @property
    def fields(self) -> tuple:
        return tuple(self.cases[0].fields)

    @property
    def n_t(self) -> int:
        return self.cases[0].n_t

    @property
    def dt(self) -> float:
        return self.cases[0].dt

    def cases_in(self, which: Split) -> list:
        """Cases of one split, sorted by tau."""
        which = Split(which)
        sel = [c for c, s in zip(self.cases, self.split) if s == which]
        return sorted(sel, key=lambda c: c.tau)


# ---------------------------------------------------------------------------
# SHRDSNAP binary format

SNAP_MAGIC = b"SHRDSNAP"
SNAP_VERSION = 1


class SnapshotFormatError(ValueError):
    """Base class for malformed snapshot/basis/model files."""


class BadMagicError(SnapshotFormatError):
    pass


class TruncatedFileError(SnapshotFormatError):
    pass


class UnsupportedVersionError(SnapshotFormatError):
    pass


class SizeMismatchError(SnapshotFormatError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


class _Reader:
    """Cursor over an in-memory buffer that raises TruncatedFileError on overrun."""

    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.path}: truncated (wanted {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]

    def string(self) -> str:
        n = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def expect_end(self):
        if self.pos != len(self.buf):
            raise SizeMismatchError(
                f"{self.path}: {len(self.buf) - self.pos} unexpected trailing bytes")


def read_header(buf: bytes, path, magic: bytes, version: int) -> _Reader:
    r = _Reader(buf, path)
    if len(buf) < len(magic) or buf[:len(magic)] != magic:
        raise BadMagicError(f"{path}: bad magic, expected {magic!r}")
    r.take(len(magic))
    v = r.unpack("<I")
    if v != version:
        raise UnsupportedVersionError(f"{path}: unsupported version {v}")
    return r


def _pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def snapshot_bytes(case: ParametricCase) -> bytes:
    parts = [SNAP_MAGIC,
             struct.pack("<IQQddI", SNAP_VERSION, case.n_h, case.n_t, case.dt, case.tau,
                         len(case.fields))]
    parts += [_pack_string(fid.value) for fid in case.fields]
    parts += [np.asarray(m, dtype="<f8").tobytes(order="F") for m in case.fields.values()]
    return b"".join(parts)


def write_snapshot_file(case: ParametricCase, path) -> None:
    for fid, m in case.fields.items():
        if not np.isfinite(m).all():
            raise ValueError(f"{fid.value}: non-finite entry")
    atomic_write_bytes(path, snapshot_bytes(case))


def read_snapshot_file(path) -> ParametricCase:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    r = read_header(buf, path, SNAP_MAGIC, SNAP_VERSION)
    n_h, n_t, dt, tau, n_fields = r.unpack("<QQddI")
    names = [r.string() for _ in range(n_fields)]
    expected = r.pos + 8 * n_h * n_t * n_fields
    if len(buf) < expected:
        raise TruncatedFileError(f"{path}: truncated payload ({len(buf)} of {expected} bytes)")
    fields = {}
    for name in names:
        fields[FieldId(name)] = r.f64(n_h * n_t).reshape((n_h, n_t), order="F")
    r.expect_end()
    return ParametricCase(tau=tau, dt=dt, fields=fields)
