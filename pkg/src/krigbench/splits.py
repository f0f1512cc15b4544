"""Spatio-temporal partitions (3x3, 2x3, 2x2), phase views, and the leakage audit.

The usable sets sit on the diagonal of the role grid: training fits on
(train nodes x train period); validation predicts (val nodes x val period) from
(train nodes x val period); testing predicts (test nodes x test period) from
(train nodes x test period). Everything off-diagonal except the phase inputs
stays unused.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .dataio import ROLE_TEST, ROLE_TRAIN, ROLE_VAL, SensorField, make_missing_pattern
from .errors import ConfigError, ParseError, UnsupportedPhaseError

SCHEMES = ("3x3", "2x3", "2x2")
TEMPORAL_MODES = ("contiguous-ratio", "month-calendar")
PHASES = ("train", "validate", "test")

# Month-calendar rule: held-out months spread across the seasons.
_TEST_MONTHS = frozenset({3, 6, 9, 12})
_VAL_MONTHS = frozenset({2, 5, 8, 11})

_INTERVALS = {
    "1min": timedelta(minutes=1),
    "5min": timedelta(minutes=5),
    "15min": timedelta(minutes=15),
    "30min": timedelta(minutes=30),
    "1h": timedelta(hours=1),
    "1d": timedelta(days=1),
}


@dataclass(frozen=True)
class SplitPlan:
    node_roles: np.ndarray  # (N,) strings
    period_roles: np.ndarray  # (T,) strings
    scheme: str
    temporal_mode: str

    def nodes(self, role: str) -> np.ndarray:
        return np.flatnonzero(self.node_roles == role)

    def steps(self, role: str) -> np.ndarray:
        return np.flatnonzero(self.period_roles == role)

    @property
    def n_nodes(self) -> int:
        return len(self.node_roles)

    @property
    def n_steps(self) -> int:
        return len(self.period_roles)


@dataclass(frozen=True)
class PhaseView:
    """Nodes and steps legally readable in one protocol phase."""

    phase: str
    input_nodes: np.ndarray
    input_steps: np.ndarray
    target_nodes: np.ndarray
    target_steps: np.ndarray

    def input_cells(self) -> set[tuple[int, int]]:
        return {(int(v), int(t)) for v in self.input_nodes for t in self.input_steps}

    def target_cells(self) -> set[tuple[int, int]]:
        return {(int(v), int(t)) for v in self.target_nodes for t in self.target_steps}


def _two_way_roles(n: int, train_fraction: float, seed: int) -> np.ndarray:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(train_fraction * n))
    roles = np.empty(n, dtype="<U5")
    roles[perm[:n_train]] = ROLE_TRAIN
    roles[perm[n_train:]] = ROLE_TEST
    return roles


def _calendar_roles(field: SensorField) -> np.ndarray:
    meta = field.meta
    if meta.start_time is None or meta.interval is None:
        raise ConfigError("month-calendar split needs start_time and interval metadata")
    if meta.interval not in _INTERVALS:
        raise ConfigError(f"unknown interval {meta.interval!r}")
    start = datetime.fromisoformat(meta.start_time)
    step = _INTERVALS[meta.interval]
    roles = np.empty(field.n_steps, dtype="<U5")
    for t in range(field.n_steps):
        month = (start + t * step).month
        if month in _TEST_MONTHS:
            roles[t] = ROLE_TEST
        elif month in _VAL_MONTHS:
            roles[t] = ROLE_VAL
        else:
            roles[t] = ROLE_TRAIN
    return roles


def make_split(
    field: SensorField,
    node_ratios,
    period_ratios,
    scheme: str = "3x3",
    seed: int = 42,
    temporal_mode: str = "contiguous-ratio",
) -> SplitPlan:
    """Assign every node and timestep a role under the requested scheme.

    Contiguous-ratio mode slices the time axis chronologically
    train -> val -> test with floor arithmetic; month-calendar mode applies the
    fixed month rule. Two-way schemes fold the validation ratio into training.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {scheme!r}")
    if temporal_mode not in TEMPORAL_MODES:
        raise ConfigError(f"unknown temporal mode {temporal_mode!r}")
    if field.n_steps < 3:
        raise ConfigError("need at least 3 timesteps")

    n, t = field.n_nodes, field.n_steps
    if scheme == "3x3":
        node_roles = make_missing_pattern(n, node_ratios, seed)
    else:
        node_roles = _two_way_roles(n, node_ratios[0] + node_ratios[1], seed)

    if temporal_mode == "month-calendar":
        period_roles = _calendar_roles(field)
        if scheme == "2x2":
            period_roles = np.where(period_roles == ROLE_VAL, ROLE_TRAIN, period_roles)
    else:
        period_roles = np.empty(t, dtype="<U5")
        if scheme == "2x2":
            n_train = int(np.floor((period_ratios[0] + period_ratios[1]) * t))
            period_roles[:n_train] = ROLE_TRAIN
            period_roles[n_train:] = ROLE_TEST
        else:
            n_train = int(np.floor(period_ratios[0] * t))
            n_val = int(np.floor(period_ratios[1] * t))
            period_roles[:n_train] = ROLE_TRAIN
            period_roles[n_train : n_train + n_val] = ROLE_VAL
            period_roles[n_train + n_val :] = ROLE_TEST

    return SplitPlan(
        node_roles=node_roles,
        period_roles=period_roles,
        scheme=scheme,
        temporal_mode=temporal_mode,
    )


def phase_views(plan: SplitPlan, phase: str) -> PhaseView:
    """Input and target cell sets for one phase of the protocol."""
    if phase not in PHASES:
        raise ConfigError(f"unknown phase {phase!r}")
    train_nodes = plan.nodes(ROLE_TRAIN)
    if phase == "train":
        steps = plan.steps(ROLE_TRAIN)
        return PhaseView("train", train_nodes, steps, train_nodes, steps)
    if phase == "validate":
        if plan.scheme == "2x2":
            raise UnsupportedPhaseError("2x2 scheme has no validation phase")
        steps = plan.steps(ROLE_VAL)
        if plan.scheme == "2x3":
            # Temporal-only validation: reconstruct training nodes in the held-out period.
            return PhaseView("validate", train_nodes, steps, train_nodes, steps)
        return PhaseView("validate", train_nodes, steps, plan.nodes(ROLE_VAL), steps)
    steps = plan.steps(ROLE_TEST)
    return PhaseView("test", train_nodes, steps, plan.nodes(ROLE_TEST), steps)


def window_starts(plan: SplitPlan, role: str, window: int) -> np.ndarray:
    """Start indices tiling each maximal run of `role` steps with disjoint windows."""
    steps = plan.steps(role)
    if steps.size == 0:
        return np.empty(0, dtype=int)
    starts = []
    run_start = steps[0]
    prev = steps[0]
    for s in steps[1:]:
        if s != prev + 1:
            starts.extend(range(run_start, prev - window + 2, window))
            run_start = s
        prev = s
    starts.extend(range(run_start, prev - window + 2, window))
    return np.asarray(starts, dtype=int)


class AccessLog:
    """Aggregated record of which cells each phase read, and how.

    Value reads are flagged per (phase, node, step); coordinate reads per
    (phase, node). Logs merge, so per-worker buffers can be combined before
    the audit.
    """

    def __init__(self, n_nodes: int, n_steps: int):
        self.n_nodes = n_nodes
        self.n_steps = n_steps
        self.value_reads: dict[str, np.ndarray] = {}
        self.coord_reads: dict[str, np.ndarray] = {}
        self.counts: dict[tuple[str, str], int] = {}

    def record_values(self, phase: str, nodes, steps) -> None:
        if phase not in PHASES:
            raise ConfigError(f"unknown phase {phase!r}")
        flags = self.value_reads.setdefault(phase, np.zeros((self.n_nodes, self.n_steps), bool))
        nodes = np.asarray(nodes, dtype=int)
        steps = np.asarray(steps, dtype=int)
        flags[np.ix_(nodes, steps)] = True
        self.counts[(phase, "value")] = self.counts.get((phase, "value"), 0) + nodes.size * steps.size

    def record_coords(self, phase: str, nodes) -> None:
        if phase not in PHASES:
            raise ConfigError(f"unknown phase {phase!r}")
        flags = self.coord_reads.setdefault(phase, np.zeros(self.n_nodes, bool))
        nodes = np.asarray(nodes, dtype=int)
        flags[nodes] = True
        self.counts[(phase, "coordinate")] = self.counts.get((phase, "coordinate"), 0) + nodes.size

    def merge(self, other: "AccessLog") -> None:
        for phase, flags in other.value_reads.items():
            mine = self.value_reads.setdefault(phase, np.zeros((self.n_nodes, self.n_steps), bool))
            mine |= flags
        for phase, flags in other.coord_reads.items():
            mine = self.coord_reads.setdefault(phase, np.zeros(self.n_nodes, bool))
            mine |= flags
        for key, count in other.counts.items():
            self.counts[key] = self.counts.get(key, 0) + count


class FieldReader:
    """Phase-scoped accessor: the sanctioned route to field data during a run."""

    def __init__(self, field: SensorField, phase: str, log: AccessLog | None = None):
        if phase not in PHASES:
            raise ConfigError(f"unknown phase {phase!r}")
        self.field = field
        self.phase = phase
        self.log = log

    def values(self, nodes, steps) -> tuple[np.ndarray, np.ndarray]:
        nodes = np.asarray(nodes, dtype=int)
        steps = np.asarray(steps, dtype=int)
        if self.log is not None:
            self.log.record_values(self.phase, nodes, steps)
        idx = np.ix_(nodes, steps)
        return self.field.values[idx], self.field.mask[idx]

    def coords(self, nodes) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=int)
        if self.log is not None:
            self.log.record_coords(self.phase, nodes)
        return self.field.coords[nodes]


@dataclass
class AuditVerdict:
    passed: bool
    violations: list[str] = dc_field(default_factory=list)
    read_counts: dict = dc_field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.passed


def audit_leakage(plan: SplitPlan, log: AccessLog) -> AuditVerdict:
    """FAIL iff a test cell was value-read during training or validation, or a
    validation-node value was read during training. Coordinate (topology)
    reads never fail the audit."""
    violations: list[str] = []
    test_node = plan.node_roles == ROLE_TEST
    test_step = plan.period_roles == ROLE_TEST
    val_node = plan.node_roles == ROLE_VAL

    for phase in ("train", "validate"):
        flags = log.value_reads.get(phase)
        if flags is None:
            continue
        touched_test = flags & (test_node[:, None] | test_step[None, :])
        if touched_test.any():
            v, t = np.argwhere(touched_test)[0]
            violations.append(
                f"{phase} phase read test cell (node {v}, step {t}) "
                f"plus {int(touched_test.sum()) - 1} more"
            )
        if phase == "train":
            touched_val = flags & val_node[:, None]
            if touched_val.any():
                v, t = np.argwhere(touched_val)[0]
                violations.append(
                    f"train phase read validation-node value (node {v}, step {t}) "
                    f"plus {int(touched_val.sum()) - 1} more"
                )

    counts = {f"{phase}/{kind}": n for (phase, kind), n in sorted(log.counts.items())}
    return AuditVerdict(passed=not violations, violations=violations, read_counts=counts)


def write_split(plan: SplitPlan, path) -> None:
    """Plain-text export so every method consumes a byte-identical plan."""
    lines = ["[meta]", f"scheme,{plan.scheme}", f"temporal_mode,{plan.temporal_mode}", "[nodes]"]
    for v, role in enumerate(plan.node_roles):
        lines.append(f"{role},{v}")
    lines.append("[periods]")
    roles = plan.period_roles
    start = 0
    for t in range(1, len(roles) + 1):
        if t == len(roles) or roles[t] != roles[start]:
            lines.append(f"{roles[start]},{start},{t}")
            start = t
    Path(path).write_text("\n".join(lines) + "\n")


def read_split(path) -> SplitPlan:
    text = Path(path).read_text().splitlines()
    section = None
    meta: dict[str, str] = {}
    node_entries: list[tuple[str, int]] = []
    period_entries: list[tuple[str, int, int]] = []
    for lineno, line in enumerate(text, start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("["):
            section = line.strip("[]")
            continue
        parts = line.split(",")
        try:
            if section == "meta":
                meta[parts[0]] = parts[1]
            elif section == "nodes":
                node_entries.append((parts[0], int(parts[1])))
            elif section == "periods":
                period_entries.append((parts[0], int(parts[1]), int(parts[2])))
            else:
                raise ParseError("content before any section header", line=lineno)
        except (IndexError, ValueError) as exc:
            raise ParseError(f"bad split row: {exc}", line=lineno) from exc

    n = max(v for _, v in node_entries) + 1
    node_roles = np.empty(n, dtype="<U5")
    for role, v in node_entries:
        node_roles[v] = role
    t = max(end for _, _, end in period_entries)
    period_roles = np.empty(t, dtype="<U5")
    for role, s, e in period_entries:
        period_roles[s:e] = role
    return SplitPlan(
        node_roles=node_roles,
        period_roles=period_roles,
        scheme=meta.get("scheme", "3x3"),
        temporal_mode=meta.get("temporal_mode", "contiguous-ratio"),
    )
