"""Classical references: mean imputation, KNN interpolation, ordinary kriging.

All three consume the same split plan and read only phase-view cells, so they
are directly comparable to the model under the leakage audit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .dataio import SensorField
from .errors import ConfigError, NumericalError
from .geometry import pairwise_distances
from .splits import AccessLog, FieldReader, SplitPlan, phase_views

_JITTERS = (0.0, 1e-10, 1e-8, 1e-6)


@dataclass(frozen=True)
class GpKernelSpec:
    family: str = "squared-exponential"
    length_scale: float | None = None  # None resolves to the pairwise-std rule
    nugget: float = 1e-6

    def __post_init__(self):
        if self.family != "squared-exponential":
            raise ConfigError(f"unsupported kernel family {self.family!r}")
        if self.length_scale is not None and self.length_scale <= 0:
            raise ConfigError("length_scale must be positive")
        if self.nugget < 0:
            raise ConfigError("nugget must be nonnegative")


@dataclass(frozen=True)
class BaselinePredictions:
    """Predictions at the phase's target cells, axes (target node, target step)."""

    nodes: np.ndarray
    steps: np.ndarray
    values: np.ndarray


def mean_baseline(
    field: SensorField, plan: SplitPlan, phase: str, log: AccessLog | None = None
) -> BaselinePredictions:
    """Every target cell gets the mean of the observed input values at its step."""
    view = phase_views(plan, phase)
    reader = FieldReader(field, phase, log)
    vals, mask = reader.values(view.input_nodes, view.target_steps)
    counts = mask.sum(axis=0).astype(float)
    sums = np.where(mask, vals, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore"):
        col_mean = np.where(counts > 0, sums / counts, np.nan)
    values = np.broadcast_to(col_mean, (len(view.target_nodes), len(view.target_steps))).copy()
    return BaselinePredictions(view.target_nodes, view.target_steps, values)


def knn_baseline(
    field: SensorField,
    plan: SplitPlan,
    phase: str,
    k: int = 10,
    log: AccessLog | None = None,
) -> BaselinePredictions:
    """Unweighted mean of the k geographically nearest input nodes, per step."""
    view = phase_views(plan, phase)
    if k > len(view.input_nodes):
        raise ConfigError(f"k={k} exceeds the {len(view.input_nodes)} input nodes")
    reader = FieldReader(field, phase, log)
    input_coords = reader.coords(view.input_nodes)
    target_coords = reader.coords(view.target_nodes)
    vals, mask = reader.values(view.input_nodes, view.target_steps)

    values = np.empty((len(view.target_nodes), len(view.target_steps)))
    positions = np.arange(len(view.input_nodes))
    for i, tc in enumerate(target_coords):
        dist = np.linalg.norm(input_coords - tc, axis=1)
        order = np.lexsort((view.input_nodes, dist))[:k]
        chosen_vals = vals[order]
        chosen_mask = mask[order]
        counts = chosen_mask.sum(axis=0).astype(float)
        sums = np.where(chosen_mask, chosen_vals, 0.0).sum(axis=0)
        with np.errstate(invalid="ignore"):
            values[i] = np.where(counts > 0, sums / counts, np.nan)
    return BaselinePredictions(view.target_nodes, view.target_steps, values)


def _factor_with_jitter(k_oo: np.ndarray, nugget: float):
    base = k_oo + nugget * np.eye(k_oo.shape[0])
    last_exc = None
    for jitter in _JITTERS:
        try:
            return cho_factor(base + jitter * np.eye(k_oo.shape[0]), lower=True)
        except np.linalg.LinAlgError as exc:
            last_exc = exc
    cond = float(np.linalg.cond(base))
    raise NumericalError(
        f"kernel factorization failed after jitter escalation: {last_exc}",
        condition_estimate=cond,
    )


def okriging(
    field: SensorField,
    plan: SplitPlan,
    phase: str,
    kernel: GpKernelSpec | None = None,
    center: bool = True,
    log: AccessLog | None = None,
) -> BaselinePredictions:
    """Gaussian-process conditional mean per timestep, solved via Cholesky.

    With centering on, inputs are de-meaned per step and the mean re-added to
    the predictions, which makes constant fields reproduce exactly.
    """
    kernel = kernel or GpKernelSpec()
    view = phase_views(plan, phase)
    if len(view.input_nodes) < 2:
        raise ConfigError("okriging needs at least 2 input nodes")
    reader = FieldReader(field, phase, log)
    input_coords = reader.coords(view.input_nodes)
    target_coords = reader.coords(view.target_nodes)
    vals, mask = reader.values(view.input_nodes, view.target_steps)

    if kernel.length_scale is None:
        all_coords = np.vstack([input_coords, target_coords])
        dist_all = pairwise_distances(all_coords)
        length_scale = float(dist_all[np.triu_indices_from(dist_all, k=1)].std())
    else:
        length_scale = kernel.length_scale

    def k_of(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        diff = a[:, None, :] - b[None, :, :]
        return np.exp(-np.einsum("ijk,ijk->ij", diff, diff) / length_scale**2)

    k_oo_full = k_of(input_coords, input_coords)
    k_uo_full = k_of(target_coords, input_coords)

    values = np.full((len(view.target_nodes), len(view.target_steps)), np.nan)
    # One factorization per distinct availability pattern, shared across steps.
    patterns: dict[bytes, np.ndarray] = {}
    for t in range(mask.shape[1]):
        patterns.setdefault(mask[:, t].tobytes(), mask[:, t])
    for key, avail in patterns.items():
        idx = np.flatnonzero(avail)
        if idx.size < 2:
            continue
        factor = _factor_with_jitter(k_oo_full[np.ix_(idx, idx)], kernel.nugget)
        k_uo = k_uo_full[:, idx]
        cols = np.flatnonzero([mask[:, t].tobytes() == key for t in range(mask.shape[1])])
        x = vals[np.ix_(idx, cols)]
        if center:
            means = x.mean(axis=0)
            values[:, cols] = k_uo @ cho_solve(factor, x - means) + means
        else:
            values[:, cols] = k_uo @ cho_solve(factor, x)
    return BaselinePredictions(view.target_nodes, view.target_steps, values)
