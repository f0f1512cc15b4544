"""The STGC stack: temporal windowing, graph convolution, exact gradients, training loop.

One layer computes relu(FC(GC(concat(H), A))) where concat stacks each step
with its m predecessors and successors (zero blocks past the boundary), and
GC(Z, A) = A^T Z W applies neighbor aggregation along columns of A (see the
edge-orientation note in the graph module). A linear readout maps the final
hidden width to one output channel.

Activations are cached on the forward pass so the backward pass is exact
reverse-mode differentiation, verified against finite differences in the tests.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    CheckpointNotFoundError,
    ConfigError,
    ContractViolationError,
    ParseError,
    ShapeError,
    TrainingAbortError,
)

_BETA1 = 0.9
_BETA2 = 0.999
_EPS = 1e-8
_MAGIC = b"STGC"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    temporal_halfwidth: int = 1
    hidden_dim: int = 64
    window_size: int = 24
    in_channels: int = 1

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("need at least one layer")
        if self.window_size <= 2 * self.temporal_halfwidth:
            raise ConfigError("window_size must exceed 2 * temporal_halfwidth")
        if min(self.hidden_dim, self.in_channels) < 1:
            raise ConfigError("hidden_dim and in_channels must be positive")


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 1e-4
    clip_threshold: float = 1.0
    max_epochs: int = 300
    patience: int = 50
    batch_size: int = 32
    mask_fraction: float = 0.25
    seed: int = 42

    def __post_init__(self):
        if not 0 < self.patience < self.max_epochs:
            raise ConfigError("patience must lie in (0, max_epochs)")
        if not 0 < self.mask_fraction < 1:
            raise ConfigError("mask_fraction must lie in (0, 1)")


@dataclass
class StgcModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    version: int = 0

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.copy() for name, p in self.params.items()}

    def load_snapshot(self, snapshot: dict[str, np.ndarray]) -> None:
        for name in self.params:
            self.params[name] = snapshot[name].copy()
        self.version += 1

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = config.in_channels
    width = 2 * config.temporal_halfwidth + 1
    for layer in range(config.n_layers):
        shapes[f"layer{layer}/gc_w"] = (width * c_in, config.hidden_dim)
        shapes[f"layer{layer}/fc_w"] = (config.hidden_dim, config.hidden_dim)
        shapes[f"layer{layer}/fc_b"] = (config.hidden_dim,)
        c_in = config.hidden_dim
    shapes["readout/w"] = (config.hidden_dim, 1)
    shapes["readout/b"] = (1,)
    return shapes


def init_model(config: ModelConfig, seed: int) -> StgcModel:
    """Glorot-style normal init for weights, zeros for biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("b"):
            params[name] = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            std = np.sqrt(2.0 / (fan_in + fan_out))
            params[name] = std * rng.standard_normal(shape)
    return StgcModel(config=config, params=params)


def temporal_concat(z: np.ndarray, m: int) -> np.ndarray:
    """Stack each timestep with its m neighbors on either side along the channel axis.

    Input (..., T, C) becomes (..., T, (2m+1)C); out-of-range neighbors are zero
    blocks. m=0 is the identity.
    """
    z = np.asarray(z, dtype=float)
    if m < 0:
        raise ConfigError("m must be nonnegative")
    t, c = z.shape[-2], z.shape[-1]
    if t <= 2 * m:
        raise ShapeError(f"time axis {t} too short for halfwidth {m}")
    if m == 0:
        return z.copy()
    out = np.zeros(z.shape[:-1] + ((2 * m + 1) * c,))
    for j, offset in enumerate(range(-m, m + 1)):
        lo = max(0, -offset)
        hi = t - max(0, offset)
        out[..., lo:hi, j * c : (j + 1) * c] = z[..., lo + offset : hi + offset, :]
    return out


def _temporal_concat_adjoint(d_out: np.ndarray, m: int, c: int) -> np.ndarray:
    t = d_out.shape[-2]
    dz = np.zeros(d_out.shape[:-1] + (c,))
    for j, offset in enumerate(range(-m, m + 1)):
        lo = max(0, -offset)
        hi = t - max(0, offset)
        dz[..., lo + offset : hi + offset, :] += d_out[..., lo:hi, j * c : (j + 1) * c]
    return dz


def _aggregate(adj: np.ndarray, z: np.ndarray) -> np.ndarray:
    # out[b, v] = sum_u adj[u, v] z[b, u]: message passing along columns.
    return np.moveaxis(np.tensordot(adj, z, axes=([0], [1])), 0, 1)


def _aggregate_adjoint(adj: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    return np.moveaxis(np.tensordot(adj, d_out, axes=([1], [1])), 0, 1)


def stgc_forward(
    model: StgcModel, inputs: np.ndarray, adjacency_per_layer: list[np.ndarray]
) -> tuple[np.ndarray, dict]:
    """Forward pass returning predictions and the cache needed for exact gradients.

    `inputs` is (N, W, C) or batched (B, N, W, C); the adjacency list must hold
    one already masked/dropped matrix per layer.
    """
    cfg = model.config
    x = np.asarray(inputs, dtype=float)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError("inputs must be (N, W, C) or (B, N, W, C)")
    if x.shape[-1] != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {x.shape[-1]}")
    if len(adjacency_per_layer) != cfg.n_layers:
        raise ShapeError(
            f"need {cfg.n_layers} adjacency matrices, got {len(adjacency_per_layer)}"
        )
    n = x.shape[1]
    for adj in adjacency_per_layer:
        if adj.shape != (n, n):
            raise ShapeError(f"adjacency shape {adj.shape} does not match {n} nodes")

    m = cfg.temporal_halfwidth
    h = x
    layers = []
    for layer in range(cfg.n_layers):
        zc = temporal_concat(h, m)
        p = zc @ model.params[f"layer{layer}/gc_w"]
        u = _aggregate(adjacency_per_layer[layer], p)
        f = u @ model.params[f"layer{layer}/fc_w"] + model.params[f"layer{layer}/fc_b"]
        relu_mask = f > 0
        h = f * relu_mask
        layers.append({"zc": zc, "u": u, "relu_mask": relu_mask})
    pred = h @ model.params["readout/w"] + model.params["readout/b"]

    cache = {
        "layers": layers,
        "h_last": h,
        "adjacency": list(adjacency_per_layer),
        "squeeze": squeeze,
        "version": model.version,
    }
    return (pred[0] if squeeze else pred), cache


def backward(model: StgcModel, cache: dict, loss_adjoint: np.ndarray) -> dict[str, np.ndarray]:
    """Exact parameter gradients for the forward pass that produced `cache`.

    Inputs are treated as constants (stop-gradient at the network boundary), so
    clamped features never contribute to parameter gradients.
    """
    if cache["version"] != model.version:
        raise ContractViolationError("cache is stale: parameters changed since the forward pass")
    cfg = model.config
    m = cfg.temporal_halfwidth
    d_pred = np.asarray(loss_adjoint, dtype=float)
    if cache["squeeze"]:
        d_pred = d_pred[None]

    grads: dict[str, np.ndarray] = {}
    h_last = cache["h_last"]
    grads["readout/w"] = np.tensordot(h_last, d_pred, axes=([0, 1, 2], [0, 1, 2]))
    grads["readout/b"] = d_pred.sum(axis=(0, 1, 2))
    d_h = d_pred @ model.params["readout/w"].T

    for layer in range(cfg.n_layers - 1, -1, -1):
        entry = cache["layers"][layer]
        d_f = d_h * entry["relu_mask"]
        grads[f"layer{layer}/fc_b"] = d_f.sum(axis=(0, 1, 2))
        grads[f"layer{layer}/fc_w"] = np.tensordot(entry["u"], d_f, axes=([0, 1, 2], [0, 1, 2]))
        d_u = d_f @ model.params[f"layer{layer}/fc_w"].T
        d_p = _aggregate_adjoint(cache["adjacency"][layer], d_u)
        grads[f"layer{layer}/gc_w"] = np.tensordot(
            entry["zc"], d_p, axes=([0, 1, 2], [0, 1, 2])
        )
        if layer > 0:
            d_zc = d_p @ model.params[f"layer{layer}/gc_w"].T
            d_h = _temporal_concat_adjoint(d_zc, m, cfg.hidden_dim)
    return grads


def mae_loss(pred: np.ndarray, target: np.ndarray, cells: np.ndarray) -> float:
    """Mean absolute error over the cells flagged true."""
    cells = np.asarray(cells, dtype=bool)
    count = int(cells.sum())
    if count == 0:
        raise ConfigError("mae_loss needs a nonempty cell set")
    diff = np.abs(np.asarray(pred) - np.asarray(target))
    return float(diff[cells].sum() / count)


def mae_adjoint(pred: np.ndarray, target: np.ndarray, cells: np.ndarray,
                count: int | None = None) -> np.ndarray:
    """dLoss/dPred for the MAE above; `count` overrides the denominator when the
    mean runs over a larger cell set than this tensor covers."""
    cells = np.asarray(cells, dtype=bool)
    if count is None:
        count = int(cells.sum())
    adj = np.sign(np.asarray(pred) - np.asarray(target)) / count
    return np.where(cells, adj, 0.0)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = dc_field(default_factory=dict)
    v: dict[str, np.ndarray] = dc_field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    clip: float,
) -> None:
    """Global-norm clip then one Adam update; mutates params and state in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAbortError(f"non-finite gradient in parameter {name!r}")
    gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    scale = clip / gnorm if gnorm > clip else 1.0

    state.t += 1
    bias1 = 1.0 - _BETA1**state.t
    bias2 = 1.0 - _BETA2**state.t
    for name, g in grads.items():
        g = g * scale
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        state.m[name] = _BETA1 * state.m[name] + (1.0 - _BETA1) * g
        state.v[name] = _BETA2 * state.v[name] + (1.0 - _BETA2) * g * g
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + _EPS)
        if not np.all(np.isfinite(params[name])):
            raise TrainingAbortError(f"non-finite value in parameter {name!r} after update")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    wallclock: float


@dataclass
class EarlyStopResult:
    best_snapshot: object
    best_epoch: int
    best_val_mae: float
    history: list[EpochRecord]


def early_stop_loop(
    trainer: TrainerConfig,
    train_fn: Callable[[int], float],
    validate_fn: Callable[[int], float],
    snapshot_fn: Callable[[], object],
) -> EarlyStopResult:
    """Validate after every epoch; keep the lowest-MAE snapshot; stop after
    `patience` consecutive epochs without strict improvement."""
    best_snapshot = None
    best_mae = np.inf
    best_epoch = 0
    stale = 0
    history: list[EpochRecord] = []
    started = time.perf_counter()
    for epoch in range(1, trainer.max_epochs + 1):
        train_loss = train_fn(epoch)
        val_mae = validate_fn(epoch)
        history.append(EpochRecord(epoch, train_loss, val_mae, time.perf_counter() - started))
        if val_mae < best_mae:
            best_mae = val_mae
            best_epoch = epoch
            best_snapshot = snapshot_fn()
            stale = 0
        else:
            stale += 1
            if stale >= trainer.patience:
                break
    return EarlyStopResult(
        best_snapshot=best_snapshot,
        best_epoch=best_epoch,
        best_val_mae=float(best_mae),
        history=history,
    )


def save_checkpoint(model: StgcModel, path, meta: dict) -> None:
    """Versioned binary checkpoint plus a JSON metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    chunks = [
        _MAGIC,
        struct.pack(
            "<IIIIII",
            1,
            cfg.n_layers,
            cfg.temporal_halfwidth,
            cfg.hidden_dim,
            cfg.window_size,
            cfg.in_channels,
        ),
        struct.pack("<I", len(model.params)),
    ]
    for name, p in model.params.items():
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", p.ndim))
        chunks.append(struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    sidecar = path.with_name(path.name + ".meta.json")
    sidecar.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_checkpoint(path) -> tuple[StgcModel, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointNotFoundError(f"no checkpoint at {path}")
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise ParseError("bad magic; not an STGC checkpoint")
    version, n_layers, m, d, window, c_in = struct.unpack_from("<IIIIII", raw, 4)
    if version != 1:
        raise ParseError(f"unsupported checkpoint version {version}")
    config = ModelConfig(
        n_layers=n_layers,
        temporal_halfwidth=m,
        hidden_dim=d,
        window_size=window,
        in_channels=c_in,
    )
    offset = 4 + 24
    (n_params,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode()
        offset += name_len
        (ndim,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        size = int(np.prod(shape))
        params[name] = (
            np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape).copy()
        )
        offset += 8 * size
    sidecar = path.with_name(path.name + ".meta.json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return StgcModel(config=config, params=params), meta
