"""Distribution-robust training: node perturbation, edge dropping, two-pass pseudo-labels.

One iteration (a) samples a batch of training-period windows, (b) perturbs the
node coordinates inside their midpoint domains and rebuilds the adjacency,
(c) runs a first kriging pass with a masked train subset plus all validation
nodes hidden, freezing the validation predictions, (d) runs a second pass with
a disjoint masked subset and the validation features clamped to those frozen
pseudo-labels, (e) averages the absolute errors of both passes over the masked
training cells, and (f) takes one clipped Adam step. Switches turn each of the
three augmentations off independently, giving the eight ablation variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .dataio import NORM_ZSCORE, SensorField, fit_normalizer
from .errors import ConfigError, DegenerateBatchError
from .geometry import NodeDomain, knn, node_domain, sample_in_domain
from .graph import GraphBuilderParams, SpatialGraph, build_graph, drop_edges, pairwise_distances
from .model import (
    AdamState,
    EarlyStopResult,
    ModelConfig,
    StgcModel,
    TrainerConfig,
    adam_step,
    backward,
    early_stop_loop,
    init_model,
    stgc_forward,
)
from .splits import AccessLog, FieldReader, SplitPlan, phase_views, window_starts

ABLATIONS = {
    "m0": (False, False, False),
    "m1": (True, False, False),
    "m2": (False, True, False),
    "m3": (False, False, True),
    "m4": (True, True, False),
    "m5": (True, False, True),
    "m6": (False, True, True),
    "m7": (True, True, True),
    "drik": (True, True, True),
}


@dataclass(frozen=True)
class DrikConfig:
    enable_np: bool = True
    enable_ed: bool = True
    enable_sa: bool = True
    mask_fraction: float = 0.25
    graph: GraphBuilderParams = dc_field(default_factory=GraphBuilderParams)
    perturb_every: int = 1

    def __post_init__(self):
        if not 0 < self.mask_fraction < 1:
            raise ConfigError("mask_fraction must lie in (0, 1)")
        if self.perturb_every < 1:
            raise ConfigError("perturb_every must be >= 1")


def ablation_config(name: str, graph: GraphBuilderParams, mask_fraction: float = 0.25,
                    perturb_every: int = 1) -> DrikConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; expected m0..m7 or drik")
    enable_np, enable_ed, enable_sa = ABLATIONS[name]
    return DrikConfig(
        enable_np=enable_np,
        enable_ed=enable_ed,
        enable_sa=enable_sa,
        mask_fraction=mask_fraction,
        graph=graph,
        perturb_every=perturb_every,
    )


@dataclass(frozen=True)
class PassPlan:
    """Disjoint masked subsets for the two kriging passes (graph positions)."""

    m1: np.ndarray
    m2: np.ndarray

    def __post_init__(self):
        if np.intersect1d(self.m1, self.m2).size:
            raise ConfigError("pass masks must be disjoint")

    def pass_of(self, v: int) -> int:
        return 1 if v in self.m1 else 2


def compute_domains(coords: np.ndarray, params: GraphBuilderParams) -> list[NodeDomain]:
    """Midpoint-hull domains from the unperturbed coordinates' neighbor structure."""
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[0]
    if params.kind == "knn-row-normalized":
        nbrs = knn(coords, min(params.k, n - 1))
        return [node_domain(v, coords, nbrs[v]) for v in range(n)]
    dist = pairwise_distances(coords)
    from .graph import resolve_delta

    delta = resolve_delta(params, dist)
    domains = []
    for v in range(n):
        within = np.flatnonzero((dist[v] <= delta) & (np.arange(n) != v))
        if within.size == 0:
            row = dist[v].copy()
            row[v] = np.inf
            within = np.array([int(np.argmin(row))])
        domains.append(node_domain(v, coords, within))
    return domains


def perturb_and_rebuild(
    coords: np.ndarray,
    params: GraphBuilderParams,
    rng: np.random.Generator,
    domains: list[NodeDomain] | None = None,
) -> tuple[np.ndarray, SpatialGraph]:
    """Resample every node inside its domain and rebuild the adjacency.

    Domains come from the original coordinates and are reused across iterations,
    so perturbations never compound.
    """
    coords = np.asarray(coords, dtype=float)
    if domains is None:
        domains = compute_domains(coords, params)
    perturbed = np.stack([sample_in_domain(dom, rng) for dom in domains])
    return perturbed, build_graph(perturbed, params)


def edge_drop_schedule(
    adjacency: np.ndarray, masked: np.ndarray, n_layers: int, enabled: bool
) -> list[np.ndarray]:
    """Per-layer adjacency: full row drop before layer 0, masked-masked after."""
    if not enabled or masked.size == 0:
        return [adjacency] * n_layers
    first = drop_edges(adjacency, masked, layer=0)
    later = drop_edges(adjacency, masked, layer=1)
    return [first] + [later] * (n_layers - 1)


@dataclass
class PassOneResult:
    preds: np.ndarray
    frozen_val: np.ndarray  # detached copy; constant within the iteration
    cache: dict
    adjacencies: list[np.ndarray]


def pseudo_label_pass(
    model: StgcModel,
    inputs: np.ndarray,
    adjacency: np.ndarray,
    masked: np.ndarray,
    val_index: np.ndarray,
    edge_drop: bool,
) -> PassOneResult:
    """First kriging pass: hide the masked rows, predict everywhere, detach the
    validation predictions so no gradient can flow back through them."""
    x = np.array(inputs, copy=True)
    hide = np.union1d(masked, val_index).astype(int)
    if hide.size:
        x[:, hide] = 0.0
    adjacencies = edge_drop_schedule(adjacency, hide, model.config.n_layers, edge_drop)
    preds, cache = stgc_forward(model, x, adjacencies)
    frozen_val = preds[:, val_index].copy()
    return PassOneResult(preds=preds, frozen_val=frozen_val, cache=cache, adjacencies=adjacencies)


def two_pass_eval(
    model: StgcModel,
    x_base: np.ndarray,
    target: np.ndarray,
    observed: np.ndarray,
    adjacency: np.ndarray,
    plan_masks: PassPlan,
    val_index: np.ndarray,
    edge_drop: bool,
    frozen_val: np.ndarray | None = None,
    want_grads: bool = True,
):
    """Both kriging passes and the combined masked-cell MAE.

    `x_base` is (B, N, W, 1) with validation rows already zero; `target` and
    `observed` are (B, N, W, 1) with meaningful entries at training rows. When
    `frozen_val` is given, pass 1 is skipped and the clamp uses it directly,
    which is what makes the loss a pure function of the parameters for
    finite-difference checks.

    Returns (loss, grads, frozen_val, cells_used).
    """
    two_passes = val_index.size > 0
    cells1 = np.zeros(x_base.shape, dtype=bool)
    cells1[:, plan_masks.m1] = True
    cells1 &= observed
    cells2 = np.zeros(x_base.shape, dtype=bool)
    if two_passes:
        cells2[:, plan_masks.m2] = True
        cells2 &= observed
    count = int(cells1.sum()) + int(cells2.sum())
    if count == 0:
        raise DegenerateBatchError("no observed masked cells in this batch")

    pass1 = pseudo_label_pass(model, x_base, adjacency, plan_masks.m1, val_index, edge_drop)
    preds1 = pass1.preds
    if frozen_val is None:
        frozen_val = pass1.frozen_val

    loss_sum = float(np.abs(preds1 - target)[cells1].sum())
    grads = None

    if two_passes:
        x2 = np.array(x_base, copy=True)
        x2[:, plan_masks.m2] = 0.0
        x2[:, val_index] = frozen_val
        adjs2 = edge_drop_schedule(adjacency, plan_masks.m2, model.config.n_layers, edge_drop)
        preds2, cache2 = stgc_forward(model, x2, adjs2)
        loss_sum += float(np.abs(preds2 - target)[cells2].sum())

    loss = loss_sum / count
    if want_grads:
        adj1 = np.where(cells1, np.sign(preds1 - target) / count, 0.0)
        grads = backward(model, pass1.cache, adj1)
        if two_passes:
            adj2 = np.where(cells2, np.sign(preds2 - target) / count, 0.0)
            g2 = backward(model, cache2, adj2)
            for name in grads:
                grads[name] = grads[name] + g2[name]
    return loss, grads, frozen_val, count


@dataclass(frozen=True)
class PredictionResult:
    nodes: np.ndarray
    steps: np.ndarray
    values_norm: np.ndarray
    values: np.ndarray


def _contiguous_runs(steps: np.ndarray) -> list[np.ndarray]:
    if steps.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(steps) != 1) + 1
    return np.split(steps, breaks)


def krige_predict(
    model: StgcModel,
    field: SensorField,
    plan: SplitPlan,
    phase: str,
    cfg: DrikConfig,
    normalizer=None,
    log: AccessLog | None = None,
    selection_phase: str | None = None,
) -> PredictionResult:
    """Inference: unperturbed graph over input and target nodes, no edge drops.

    `selection_phase` overrides which cells are predicted while the reads stay
    logged under `phase`; it exists to reproduce the mis-wired 2x2 early-stopping
    protocol in the leakage audit's negative control.
    """
    view = phase_views(plan, selection_phase or phase)
    reader = FieldReader(field, phase, log)
    if normalizer is None:
        normalizer = fit_normalizer(field, plan, NORM_ZSCORE)

    # Targets that are also inputs (2x3 temporal-only validation) share a row.
    input_set = set(int(v) for v in view.input_nodes)
    extra = np.array([v for v in view.target_nodes if int(v) not in input_set], dtype=int)
    node_row = {int(v): i for i, v in enumerate(view.input_nodes)}
    node_row.update({int(v): len(view.input_nodes) + i for i, v in enumerate(extra)})
    target_rows = np.array([node_row[int(v)] for v in view.target_nodes], dtype=int)

    input_coords = reader.coords(view.input_nodes)
    graph_coords = (
        np.vstack([input_coords, reader.coords(extra)]) if extra.size else input_coords
    )
    graph = build_graph(graph_coords, cfg.graph)
    adjacencies = [graph.adjacency] * model.config.n_layers

    n_in = len(view.input_nodes)
    preds_norm = np.empty((len(view.target_nodes), len(view.target_steps)))
    col = 0
    for run in _contiguous_runs(view.target_steps):
        vals, mask = reader.values(view.input_nodes, run)
        x = np.zeros((graph.n_nodes, len(run), 1))
        x[:n_in, :, 0] = np.where(mask, normalizer.transform(vals, view.input_nodes), 0.0)
        out, _ = stgc_forward(model, x, adjacencies)
        preds_norm[:, col : col + len(run)] = out[target_rows, :, 0]
        col += len(run)
    values = normalizer.inverse(preds_norm, view.target_nodes)
    return PredictionResult(
        nodes=view.target_nodes,
        steps=view.target_steps,
        values_norm=preds_norm,
        values=values,
    )


@dataclass
class TrainResult:
    model: StgcModel
    normalizer: object
    best_epoch: int
    best_val_mae: float
    history: list
    log: AccessLog | None


class DrikTrainer:
    """Owns one model and one optimizer; single-threaded over iterations."""

    def __init__(
        self,
        field: SensorField,
        plan: SplitPlan,
        model_cfg: ModelConfig,
        trainer_cfg: TrainerConfig,
        drik_cfg: DrikConfig,
        normalizer_kind: str = NORM_ZSCORE,
        log: AccessLog | None = None,
        selection_phase: str = "validate",
    ):
        if drik_cfg.enable_sa and plan.scheme != "3x3":
            raise ConfigError("subgraph addition needs the 3x3 scheme (validation topology)")
        phase_views(plan, selection_phase)  # fail fast on unsupported schemes

        self.field = field
        self.plan = plan
        self.model_cfg = model_cfg
        self.trainer_cfg = trainer_cfg
        self.drik_cfg = drik_cfg
        self.log = log
        self.selection_phase = selection_phase

        self.reader_train = FieldReader(field, "train", log)
        self.normalizer = fit_normalizer(field, plan, normalizer_kind, log)

        self.train_nodes = plan.nodes("train")
        self.val_nodes = plan.nodes("val") if drik_cfg.enable_sa else np.empty(0, dtype=int)
        self.active_nodes = np.concatenate([self.train_nodes, self.val_nodes])
        self.n_train = len(self.train_nodes)
        self.train_index = np.arange(self.n_train)
        self.val_index = np.arange(self.n_train, len(self.active_nodes))

        coords = self.reader_train.coords(self.active_nodes)
        self.base_graph = build_graph(coords, drik_cfg.graph)
        self.domains = compute_domains(coords, drik_cfg.graph) if drik_cfg.enable_np else None

        self.model = init_model(model_cfg, trainer_cfg.seed)
        self.adam = AdamState()
        self.rng = np.random.default_rng(trainer_cfg.seed)
        self.starts = window_starts(plan, "train", model_cfg.window_size)
        if self.starts.size == 0:
            raise ConfigError("training period shorter than one window")
        self._iteration = 0
        self._current_adjacency = self.base_graph.adjacency

    def _sample_pass_plan(self, rng: np.random.Generator) -> PassPlan:
        size = max(1, int(np.floor(self.drik_cfg.mask_fraction * self.n_train)))
        m1 = np.sort(rng.choice(self.n_train, size=size, replace=False))
        if self.drik_cfg.enable_sa:
            rest = np.setdiff1d(self.train_index, m1)
            m2 = np.sort(rng.choice(rest, size=min(size, rest.size), replace=False))
        else:
            m2 = np.empty(0, dtype=int)
        return PassPlan(m1=m1, m2=m2)

    def _batch_tensors(self, starts: np.ndarray):
        w = self.model_cfg.window_size
        n_active = len(self.active_nodes)
        b = len(starts)
        x = np.zeros((b, n_active, w, 1))
        target = np.zeros((b, n_active, w, 1))
        observed = np.zeros((b, n_active, w, 1), dtype=bool)
        for i, s in enumerate(starts):
            vals, mask = self.reader_train.values(self.train_nodes, np.arange(s, s + w))
            norm = np.where(mask, self.normalizer.transform(vals, self.train_nodes), 0.0)
            x[i, : self.n_train, :, 0] = norm
            target[i, : self.n_train, :, 0] = norm
            observed[i, : self.n_train, :, 0] = mask
        return x, target, observed

    def _iteration_adjacency(self, rng: np.random.Generator) -> np.ndarray:
        if not self.drik_cfg.enable_np:
            return self.base_graph.adjacency
        if self._iteration % self.drik_cfg.perturb_every == 0:
            _, graph = perturb_and_rebuild(
                self.base_graph.coords, self.drik_cfg.graph, rng, self.domains
            )
            self._current_adjacency = graph.adjacency
        return self._current_adjacency

    def iteration(self, starts: np.ndarray) -> float:
        """One batch: perturb, two passes, clipped Adam step. Returns the loss."""
        x, target, observed = self._batch_tensors(starts)
        adjacency = self._iteration_adjacency(self.rng)
        plan_masks = self._sample_pass_plan(self.rng)
        hidden = plan_masks.m1.size + plan_masks.m2.size
        if hidden >= self.n_train:
            plan_masks = self._sample_pass_plan(self.rng)  # one resample, then abort
            if plan_masks.m1.size + plan_masks.m2.size >= self.n_train:
                raise DegenerateBatchError(
                    "mask sampling left no unmasked training sources; lower mask_fraction"
                )
        loss, grads, _, _ = two_pass_eval(
            self.model,
            x,
            target,
            observed,
            adjacency,
            plan_masks,
            self.val_index,
            self.drik_cfg.enable_ed,
        )
        adam_step(
            self.model.params,
            grads,
            self.adam,
            self.trainer_cfg.learning_rate,
            self.trainer_cfg.clip_threshold,
        )
        self.model.version += 1
        self._iteration += 1
        return loss

    def train_epoch(self, epoch: int) -> float:
        order = self.rng.permutation(self.starts)
        losses = []
        for i in range(0, len(order), self.trainer_cfg.batch_size):
            losses.append(self.iteration(order[i : i + self.trainer_cfg.batch_size]))
        return float(np.mean(losses))

    def validate(self, epoch: int) -> float:
        view = phase_views(self.plan, self.selection_phase)
        preds = krige_predict(
            self.model,
            self.field,
            self.plan,
            "validate",
            self.drik_cfg,
            self.normalizer,
            self.log,
            selection_phase=self.selection_phase,
        )
        reader = FieldReader(self.field, "validate", self.log)
        truth, mask = reader.values(view.target_nodes, view.target_steps)
        err = np.abs(preds.values - truth)[mask]
        return float(err.mean())

    def train(self) -> TrainResult:
        result: EarlyStopResult = early_stop_loop(
            self.trainer_cfg,
            self.train_epoch,
            self.validate,
            self.model.snapshot,
        )
        if result.best_snapshot is not None:
            self.model.load_snapshot(result.best_snapshot)
        return TrainResult(
            model=self.model,
            normalizer=self.normalizer,
            best_epoch=result.best_epoch,
            best_val_mae=result.best_val_mae,
            history=result.history,
            log=self.log,
        )


def train_model(
    field: SensorField,
    plan: SplitPlan,
    model_cfg: ModelConfig,
    trainer_cfg: TrainerConfig,
    drik_cfg: DrikConfig,
    normalizer_kind: str = NORM_ZSCORE,
    log: AccessLog | None = None,
    selection_phase: str = "validate",
) -> TrainResult:
    """Train with early stopping on the validation phase; returns the best model."""
    trainer = DrikTrainer(
        field, plan, model_cfg, trainer_cfg, drik_cfg, normalizer_kind, log, selection_phase
    )
    return trainer.train()
