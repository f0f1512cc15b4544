"""Scoring (MAE/RMSE/MAPE, test-to-validation ratio) and graph-shift diagnostics.

The shift report quantifies how much the propagation operator and the pairwise
distance law change when unseen nodes join the graph: spectral drift of the
observed block, per-node degree deltas from cross-block edges, a Wasserstein
divergence between the O-O and U-O distance populations, and the induced
kernel-expectation gap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import wasserstein_distance

from .errors import ConfigError, UndefinedRatioError
from .graph import SpatialGraph, block_partition, sym_normalize

MAPE_FLOOR = 1e-4


@dataclass(frozen=True)
class MetricReport:
    mae: float
    rmse: float
    mape: float | None  # percent; absent when every truth is below the floor
    cell_count: int
    phase: str = ""
    per_timestep: list | None = None

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "mape": self.mape,
            "cell_count": self.cell_count,
            "phase": self.phase,
            "per_timestep": self.per_timestep,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


@dataclass(frozen=True)
class ShiftReport:
    spectral_drift: float
    degree_shift: np.ndarray
    distance_divergence: float
    kernel_gap: float
    no_cross_block_edges: bool
    target_support_changed: bool

    def to_dict(self) -> dict:
        return {
            "spectral_drift": self.spectral_drift,
            "degree_shift": [float(x) for x in self.degree_shift],
            "distance_divergence": self.distance_divergence,
            "kernel_gap": self.kernel_gap,
            "degenerate_flags": {
                "no_cross_block_edges": self.no_cross_block_edges,
                "target_support_changed": self.target_support_changed,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _metric_accumulate(pred: np.ndarray, truth: np.ndarray, mape_floor: float):
    err = pred - truth
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err**2).mean()))
    eligible = np.abs(truth) > mape_floor
    if eligible.any():
        mape = float(100.0 * (np.abs(err[eligible]) / np.abs(truth[eligible])).mean())
    else:
        mape = None
    return mae, rmse, mape


def score(
    pred: np.ndarray,
    truth: np.ndarray,
    cells: np.ndarray | None = None,
    phase: str = "",
    mape_floor: float = MAPE_FLOOR,
    per_timestep: bool = False,
) -> MetricReport:
    """MAE, RMSE, and percent MAPE over the flagged cells.

    MAPE skips cells whose truth magnitude is below `mape_floor` and is reported
    as absent (None) when no cell qualifies.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if cells is None:
        cells = np.ones(pred.shape, dtype=bool)
    cells = np.asarray(cells, dtype=bool)
    if not cells.any():
        raise ConfigError("score needs a nonempty cell set")

    mae, rmse, mape = _metric_accumulate(pred[cells], truth[cells], mape_floor)
    breakdown = None
    if per_timestep and pred.ndim == 2:
        breakdown = []
        for t in range(pred.shape[1]):
            col = cells[:, t]
            if not col.any():
                breakdown.append(None)
                continue
            m, r, p = _metric_accumulate(pred[col, t], truth[col, t], mape_floor)
            breakdown.append({"mae": m, "rmse": r, "mape": p})
    return MetricReport(
        mae=mae,
        rmse=rmse,
        mape=mape,
        cell_count=int(cells.sum()),
        phase=phase,
        per_timestep=breakdown,
    )


def generalization_ratio(test_report: MetricReport, val_report: MetricReport) -> float:
    """Test MAE over validation MAE; lower means validation predicts test better."""
    if val_report.mae == 0:
        raise UndefinedRatioError("validation MAE is zero; ratio undefined")
    return test_report.mae / val_report.mae


def _sorted_real_spectrum(matrix: np.ndarray) -> np.ndarray:
    return np.sort(np.linalg.eigvals(matrix).real)


def shift_report(graph_full: SpatialGraph, observed_ids) -> ShiftReport:
    """Diagnostics comparing the observed-only operator with the enlarged one.

    The observed-only graph is rebuilt with the full graph's resolved kernel so
    the comparison isolates topology, and the spectra compared are both over the
    observed block (same dimension).
    """
    obs = np.asarray(observed_ids, dtype=int)
    if obs.size == 0 or obs.size >= graph_full.n_nodes:
        raise ConfigError("observed_ids must be a nonempty strict subset of the nodes")
    blocks = block_partition(graph_full, obs)

    a_hat_full = sym_normalize(graph_full.adjacency)
    restricted = a_hat_full[np.ix_(obs, obs)]
    a_hat_oo = sym_normalize(blocks.a_oo_rebuilt)
    drift = float(
        np.max(np.abs(_sorted_real_spectrum(restricted) - _sorted_real_spectrum(a_hat_oo)))
    )

    degree_shift = blocks.a_ou.sum(axis=1)

    obs_coords = graph_full.coords[obs]
    unseen_coords = graph_full.coords[blocks.unseen_ids]
    diff_oo = obs_coords[:, None, :] - obs_coords[None, :, :]
    d_oo = np.sqrt(np.einsum("ijk,ijk->ij", diff_oo, diff_oo))
    d_oo = d_oo[np.triu_indices_from(d_oo, k=1)]
    diff_uo = unseen_coords[:, None, :] - obs_coords[None, :, :]
    d_uo = np.sqrt(np.einsum("ijk,ijk->ij", diff_uo, diff_uo)).ravel()
    divergence = float(wasserstein_distance(d_oo, d_uo))

    sigma = graph_full.sigma_used
    kernel_gap = float(
        abs(np.exp(-(d_oo**2) / sigma**2).mean() - np.exp(-(d_uo**2) / sigma**2).mean())
    )

    no_cross = bool(np.all(blocks.a_ou == 0) and np.all(blocks.a_uo == 0))
    return ShiftReport(
        spectral_drift=drift,
        degree_shift=degree_shift,
        distance_divergence=divergence,
        kernel_gap=kernel_gap,
        no_cross_block_edges=no_cross,
        target_support_changed=blocks.unseen_ids.size > 0,
    )
