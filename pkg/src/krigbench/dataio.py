"""Sensor-field ingestion, normalization, missing patterns, and synthetic GP fields.

File formats:
  csv-wide      header row `node_0..node_{N-1}`, one row per timestep; a cell is
                missing when empty or literally "NaN".
  packed-binary magic "KRGF", u32 version=1, u32 N, u32 T, little-endian f64
                values row-major (node-major), then N*T mask bytes.
Both formats require a coordinate sidecar `<stem>.coords.csv` with columns
`node_id,x,y[,capacity]`.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateScaleError, NumericalError, ParseError, ShapeError

ROLE_TRAIN = "train"
ROLE_VAL = "val"
ROLE_TEST = "test"

NORM_CAPACITY = "per-node-min-max-by-capacity"
NORM_ZSCORE = "global-z-score"

_MAGIC = b"KRGF"
_JITTERS = (1e-10, 1e-8, 1e-6)


@dataclass
class FieldMeta:
    name: str = ""
    capacity: np.ndarray | None = None  # per node, sensor units, strictly positive
    interval: str | None = None  # e.g. "5min", "1h"
    start_time: str | None = None  # ISO date, needed for month-calendar splits


@dataclass
class SensorField:
    """Node coordinates plus an N x T value matrix with an availability mask."""

    coords: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    meta: FieldMeta = dc_field(default_factory=FieldMeta)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.coords.ndim != 2:
            raise ShapeError("coords must be (N, d)")
        if self.values.shape != self.mask.shape:
            raise ShapeError("values and mask must have identical shape")
        if self.coords.shape[0] != self.values.shape[0]:
            raise ShapeError(
                f"coords rows ({self.coords.shape[0]}) != value rows ({self.values.shape[0]})"
            )
        if self.meta.capacity is not None:
            cap = np.asarray(self.meta.capacity, dtype=float)
            if cap.shape != (self.n_nodes,):
                raise ShapeError("capacity must be one entry per node")
            if np.any(cap <= 0):
                raise ConfigError("capacity must be strictly positive per node")
            self.meta.capacity = cap

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Normalizer:
    """Reversible value transform; parameters come from training cells only."""

    kind: str
    scale: np.ndarray  # per node for capacity kind, single-element for z-score
    offset: np.ndarray

    def transform(self, values: np.ndarray, nodes: np.ndarray | None = None) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        scale, offset = self._aligned(values, nodes)
        return (values - offset) / scale

    def inverse(self, values: np.ndarray, nodes: np.ndarray | None = None) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        scale, offset = self._aligned(values, nodes)
        return values * scale + offset

    def _aligned(self, values: np.ndarray, nodes: np.ndarray | None):
        if self.kind == NORM_ZSCORE:
            return self.scale[0], self.offset[0]
        if nodes is None:
            if values.shape[0] != self.scale.shape[0]:
                raise ShapeError("per-node normalizer needs node ids for partial rows")
            nodes = np.arange(self.scale.shape[0])
        nodes = np.asarray(nodes, dtype=int)
        shape = [len(nodes)] + [1] * (values.ndim - 1)
        return self.scale[nodes].reshape(shape), self.offset[nodes].reshape(shape)


def fit_normalizer(field: SensorField, split, kind: str, log=None) -> Normalizer:
    """Fit on training-node, training-period cells only (observed ones)."""
    from .splits import SplitPlan  # deferred, avoids an import cycle

    assert isinstance(split, SplitPlan)
    train_nodes = split.nodes(ROLE_TRAIN)
    train_steps = split.steps(ROLE_TRAIN)
    if log is not None:
        log.record_values("train", train_nodes, train_steps)
    cells_mask = field.mask[np.ix_(train_nodes, train_steps)]
    cells = field.values[np.ix_(train_nodes, train_steps)][cells_mask]

    if kind == NORM_CAPACITY:
        if field.meta.capacity is None:
            raise ConfigError("capacity normalization requires per-node capacity metadata")
        cap = field.meta.capacity
        if np.any(cap == 0):
            raise DegenerateScaleError("zero capacity")
        return Normalizer(kind=kind, scale=cap.copy(), offset=np.zeros_like(cap))
    if kind == NORM_ZSCORE:
        if cells.size == 0:
            raise ConfigError("no observed training cells to fit on")
        mean = float(cells.mean())
        std = float(cells.std())  # population std
        if std == 0.0:
            raise DegenerateScaleError("zero variance over fitting cells")
        return Normalizer(kind=kind, scale=np.array([std]), offset=np.array([mean]))
    raise ConfigError(f"unknown normalizer kind {kind!r}")


def make_missing_pattern(n_nodes: int, ratios, seed: int) -> np.ndarray:
    """Seeded node-role assignment: shuffle ids, slice by floor(ratio * N).

    Returns an (N,) array of role strings train/val/test.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ConfigError("ratios must be a (train, val, test) triple")
    if any(r <= 0 for r in ratios):
        raise ConfigError("every ratio must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    if n_nodes < 3:
        raise ConfigError("need at least 3 nodes to split three ways")
    perm = np.random.default_rng(seed).permutation(n_nodes)
    n_train = int(np.floor(ratios[0] * n_nodes))
    n_val = int(np.floor(ratios[1] * n_nodes))
    roles = np.empty(n_nodes, dtype="<U5")
    roles[perm[:n_train]] = ROLE_TRAIN
    roles[perm[n_train : n_train + n_val]] = ROLE_VAL
    roles[perm[n_train + n_val :]] = ROLE_TEST
    return roles


def _chol_with_jitter(k: np.ndarray) -> np.ndarray:
    for jitter in _JITTERS:
        try:
            return np.linalg.cholesky(k + jitter * np.eye(k.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("covariance not positive definite after jitter escalation")


def synth_gp_field(
    n_nodes: int,
    n_steps: int,
    length_scale: float,
    temporal_rho: float,
    noise_std: float,
    seed: int,
) -> SensorField:
    """Ground-truth field: spatial GP columns evolved by a stationary AR(1).

    Coordinates are uniform in the unit square. Each column has marginal law
    N(0, K) with K = exp(-d^2 / length_scale^2); consecutive columns correlate
    with coefficient temporal_rho. Observation noise is added on top.
    """
    if n_nodes < 4:
        raise ConfigError("need at least 4 nodes")
    if not -1.0 < temporal_rho < 1.0:
        raise ConfigError("temporal_rho must lie in (-1, 1)")
    if length_scale <= 0:
        raise ConfigError("length_scale must be positive")
    if noise_std < 0:
        raise ConfigError("noise_std must be nonnegative")

    rng = np.random.default_rng(seed)
    coords = rng.random((n_nodes, 2))
    from .geometry import pairwise_distances

    dist = pairwise_distances(coords)
    kernel = np.exp(-(dist**2) / length_scale**2)
    chol = _chol_with_jitter(kernel)

    values = np.empty((n_nodes, n_steps))
    state = chol @ rng.standard_normal(n_nodes)
    values[:, 0] = state
    innovation_scale = np.sqrt(1.0 - temporal_rho**2)
    for t in range(1, n_steps):
        state = temporal_rho * state + innovation_scale * (chol @ rng.standard_normal(n_nodes))
        values[:, t] = state
    if noise_std > 0:
        values = values + noise_std * rng.standard_normal(values.shape)

    return SensorField(
        coords=coords,
        values=values,
        mask=np.ones_like(values, dtype=bool),
        meta=FieldMeta(name=f"synthetic-gp-{seed}"),
    )


def _coords_sidecar(path: Path) -> Path:
    return path.with_name(path.stem + ".coords.csv")


def _load_coords(path: Path):
    if not path.exists():
        raise ParseError(f"coordinate sidecar missing: {path}")
    rows = []
    capacities = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "node_id":
            raise ParseError(f"bad sidecar header in {path}", line=1)
        has_capacity = len(header) >= 4 and header[3] == "capacity"
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((float(row[1]), float(row[2])))
                if has_capacity:
                    capacities.append(float(row[3]))
            except (IndexError, ValueError) as exc:
                raise ParseError(f"bad coordinate row: {exc}", line=lineno) from exc
    coords = np.asarray(rows)
    capacity = np.asarray(capacities) if has_capacity else None
    return coords, capacity


def _parse_cell(token: str, lineno: int) -> float:
    token = token.strip()
    if token == "" or token.lower() == "nan":
        return np.nan
    try:
        return float(token)
    except ValueError as exc:
        raise ParseError(f"unparseable value {token!r}", line=lineno) from exc


def load_field(path, format: str = "csv-wide") -> SensorField:
    """Load a sensor field plus its coordinate sidecar."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"no such file: {path}")
    coords, capacity = _load_coords(_coords_sidecar(path))

    if format == "csv-wide":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise ParseError("empty file", line=1)
            n = len(header)
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != n:
                    raise ParseError(f"expected {n} cells, found {len(row)}", line=lineno)
                rows.append([_parse_cell(tok, lineno) for tok in row])
        values = np.asarray(rows).T  # stored time-major, kept node-major
        mask = ~np.isnan(values)
        values = np.where(mask, values, 0.0)
    elif format == "packed-binary":
        raw = path.read_bytes()
        if raw[:4] != _MAGIC:
            raise ParseError("bad magic; not a KRGF file")
        version, n, t = struct.unpack_from("<III", raw, 4)
        if version != 1:
            raise ParseError(f"unsupported KRGF version {version}")
        offset = 16
        values = np.frombuffer(raw, dtype="<f8", count=n * t, offset=offset).reshape(n, t)
        offset += 8 * n * t
        mask = np.frombuffer(raw, dtype=np.uint8, count=n * t, offset=offset).reshape(n, t) != 0
        values = values.copy()
        mask = mask.copy()
    else:
        raise ConfigError(f"unknown format {format!r}")

    if coords.shape[0] != values.shape[0]:
        raise ShapeError(
            f"coords rows ({coords.shape[0]}) != value rows ({values.shape[0]})"
        )
    meta = FieldMeta(name=path.stem, capacity=capacity)
    return SensorField(coords=coords, values=values, mask=mask, meta=meta)


def save_field(field: SensorField, path, format: str = "csv-wide") -> None:
    """Write a field and its coordinate sidecar in the requested format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(_coords_sidecar(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        if field.meta.capacity is not None:
            writer.writerow(["node_id", "x", "y", "capacity"])
            for i in range(field.n_nodes):
                writer.writerow(
                    [i, repr(float(field.coords[i, 0])), repr(float(field.coords[i, 1])),
                     repr(float(field.meta.capacity[i]))]
                )
        else:
            writer.writerow(["node_id", "x", "y"])
            for i in range(field.n_nodes):
                writer.writerow([i, repr(float(field.coords[i, 0])), repr(float(field.coords[i, 1]))])

    if format == "csv-wide":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"node_{i}" for i in range(field.n_nodes)])
            for t in range(field.n_steps):
                writer.writerow(
                    [
                        repr(float(field.values[i, t])) if field.mask[i, t] else "NaN"
                        for i in range(field.n_nodes)
                    ]
                )
    elif format == "packed-binary":
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<III", 1, field.n_nodes, field.n_steps))
            fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
            fh.write(field.mask.astype(np.uint8).tobytes())
    else:
        raise ConfigError(f"unknown format {format!r}")
