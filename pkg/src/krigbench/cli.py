"""Experiment orchestration: config file, subcommands, artifacts, sweep harness.

Config is a single YAML file of nested sections (dataset, split, graph, model,
trainer, drik, synth, baselines, normalizer, output_dir); unknown keys are
rejected. Every artifact records the config hash. Errors leave as one JSON
object on stderr with a machine-readable `error` kind and a nonzero exit
status (2 for a missing checkpoint).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import yaml

from .baselines import GpKernelSpec, knn_baseline, mean_baseline, okriging
from .dataio import (
    NORM_ZSCORE,
    SensorField,
    fit_normalizer,
    load_field,
    save_field,
    synth_gp_field,
)
from .drik import DrikConfig, ablation_config, krige_predict, train_model
from .errors import CheckpointNotFoundError, ConfigError, KrigbenchError
from .evalshift import MetricReport, score
from .graph import GraphBuilderParams, build_graph, export_edges
from .model import ModelConfig, TrainerConfig, load_checkpoint, save_checkpoint
from .splits import AccessLog, FieldReader, SplitPlan, audit_leakage, make_split, phase_views, write_split

SWEEP_RATIOS = (0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875)
MODEL_METHODS = ("drik", "m0", "m1", "m2", "m3", "m4", "m5", "m6", "m7")
BASELINE_METHODS = ("mean", "knn", "okriging")


@dataclass(frozen=True)
class DatasetSection:
    path: str = "dataset.csv"
    format: str = "csv-wide"


@dataclass(frozen=True)
class SplitSection:
    scheme: str = "3x3"
    node_ratios: tuple = (0.6, 0.2, 0.2)
    period_ratios: tuple = (0.7, 0.1, 0.2)
    seed: int = 42
    temporal_mode: str = "contiguous-ratio"


@dataclass(frozen=True)
class SynthSection:
    n_nodes: int = 60
    n_steps: int = 2000
    length_scale: float = 0.3
    temporal_rho: float = 0.8
    noise_std: float = 0.02
    seed: int = 42


@dataclass(frozen=True)
class DrikSection:
    enable_np: bool = True
    enable_ed: bool = True
    enable_sa: bool = True
    perturb_every: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = dc_field(default_factory=DatasetSection)
    split: SplitSection = dc_field(default_factory=SplitSection)
    graph: GraphBuilderParams = dc_field(default_factory=GraphBuilderParams)
    model: ModelConfig = dc_field(default_factory=ModelConfig)
    trainer: TrainerConfig = dc_field(default_factory=TrainerConfig)
    drik: DrikSection = dc_field(default_factory=DrikSection)
    synth: SynthSection = dc_field(default_factory=SynthSection)
    baselines: tuple = ("mean", "knn", "okriging")
    normalizer: str = NORM_ZSCORE
    output_dir: str = "out"

    def hash(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def drik_config(self, method: str = "drik") -> DrikConfig:
        if method not in MODEL_METHODS:
            raise ConfigError(f"unknown model method {method!r}")
        cfg = ablation_config(
            method, self.graph, self.trainer.mask_fraction, self.drik.perturb_every
        )
        if method == "drik":
            # Honor explicit switch overrides from the drik section.
            cfg = dataclasses.replace(
                cfg,
                enable_np=self.drik.enable_np,
                enable_ed=self.drik.enable_ed,
                enable_sa=self.drik.enable_sa,
            )
        return cfg


_SECTIONS = {
    "dataset": DatasetSection,
    "split": SplitSection,
    "graph": GraphBuilderParams,
    "model": ModelConfig,
    "trainer": TrainerConfig,
    "drik": DrikSection,
    "synth": SynthSection,
}


def _build_section(cls, data: dict, context: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {context!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {context!r}: {unknown}")
    coerced = {
        key: tuple(value) if isinstance(value, list) else value for key, value in data.items()
    }
    return cls(**coerced)


def load_config(path) -> ExperimentConfig:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    known = set(_SECTIONS) | {"baselines", "normalizer", "output_dir"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build_section(cls, raw[name], name)
    if "baselines" in raw:
        bad = sorted(set(raw["baselines"]) - set(BASELINE_METHODS))
        if bad:
            raise ConfigError(f"unknown baselines: {bad}")
        kwargs["baselines"] = tuple(raw["baselines"])
    if "normalizer" in raw:
        kwargs["normalizer"] = raw["normalizer"]
    if "output_dir" in raw:
        kwargs["output_dir"] = raw["output_dir"]
    return ExperimentConfig(**kwargs)


def _override(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(
            cfg,
            split=dataclasses.replace(cfg.split, seed=args.seed),
            trainer=dataclasses.replace(cfg.trainer, seed=args.seed),
        )
    if getattr(args, "out", None) is not None:
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    return cfg


def _load_field_and_plan(cfg: ExperimentConfig) -> tuple[SensorField, SplitPlan]:
    field = load_field(cfg.dataset.path, cfg.dataset.format)
    plan = make_split(
        field,
        cfg.split.node_ratios,
        cfg.split.period_ratios,
        cfg.split.scheme,
        cfg.split.seed,
        cfg.split.temporal_mode,
    )
    return field, plan


def _write_predictions(
    out_dir: Path, stem: str, nodes, steps, values_norm, values,
    truth_norm, truth, truth_mask,
):
    """Normalized file plus its denormalized twin, both `node_id,timestep,prediction,truth`."""
    for suffix, preds, tru in (
        (".norm.csv", values_norm, truth_norm),
        (".csv", values, truth),
    ):
        with open(out_dir / (stem + suffix), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["node_id", "timestep", "prediction", "truth"])
            for i, v in enumerate(nodes):
                for j, t in enumerate(steps):
                    row = [int(v), int(t), repr(float(preds[i, j]))]
                    if truth_mask[i, j]:
                        row.append(repr(float(tru[i, j])))
                    else:
                        row.append("")
                    writer.writerow(row)


def _write_manifest(out_dir: Path, command: str, cfg: ExperimentConfig, **extra) -> None:
    """Per-command manifest tying the directory's artifacts to the config hash."""
    payload = {"command": command, "config_hash": cfg.hash(), **extra}
    (out_dir / f"manifest_{command}.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n"
    )


def _score_against_truth(field, plan, phase, nodes, steps, values, log=None) -> MetricReport:
    reader = FieldReader(field, phase, log)
    truth, mask = reader.values(nodes, steps)
    finite = np.isfinite(values)
    return score(values, truth, cells=mask & finite, phase=phase)


def _render_report(out_dir: Path, phase: str) -> None:
    """Markdown table (method rows x metric columns) over metric files present."""
    rows = []
    for path in sorted(out_dir.glob(f"metrics_{phase}*.json")):
        data = json.loads(path.read_text())
        name = path.stem.replace(f"metrics_{phase}", "").lstrip("_") or "model"
        rows.append((name, data))
    if not rows:
        return
    lines = ["| Method | MAE | RMSE | MAPE |", "| --- | --- | --- | --- |"]
    for name, data in rows:
        mape = "-" if data["mape"] is None else f"{data['mape']:.3f}"
        lines.append(f"| {name} | {data['mae']:.4f} | {data['rmse']:.4f} | {mape} |")
    (out_dir / f"report_{phase}.md").write_text("\n".join(lines) + "\n")


def cmd_synth(args) -> int:
    cfg = _override(load_config(args.config), args)
    s = cfg.synth
    field = synth_gp_field(
        s.n_nodes, s.n_steps, s.length_scale, s.temporal_rho, s.noise_std, s.seed
    )
    save_field(field, cfg.dataset.path, cfg.dataset.format)
    print(f"wrote {cfg.dataset.path} ({s.n_nodes} nodes x {s.n_steps} steps)")
    return 0


def cmd_split(args) -> int:
    cfg = _override(load_config(args.config), args)
    _, plan = _load_field_and_plan(cfg)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_split(plan, out_dir / "split.txt")
    _write_manifest(out_dir, "split", cfg)
    print(f"wrote {out_dir / 'split.txt'}")
    return 0


def cmd_train(args) -> int:
    cfg = _override(load_config(args.config), args)
    method = args.method or "drik"
    field, plan = _load_field_and_plan(cfg)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_split(plan, out_dir / "split.txt")

    log = AccessLog(field.n_nodes, field.n_steps)
    result = train_model(
        field,
        plan,
        cfg.model,
        cfg.trainer,
        cfg.drik_config(method),
        cfg.normalizer,
        log,
    )
    save_checkpoint(
        result.model,
        out_dir / "checkpoint.stgc",
        {
            "epoch": result.best_epoch,
            "val_mae": result.best_val_mae,
            "seed": cfg.trainer.seed,
            "config_hash": cfg.hash(),
            "method": method,
        },
    )
    with open(out_dir / "epochs.jsonl", "w") as fh:
        for rec in result.history:
            fh.write(
                json.dumps(
                    {
                        "epoch": rec.epoch,
                        "train_loss": rec.train_loss,
                        "val_mae": rec.val_mae,
                        "wallclock": rec.wallclock,
                    }
                )
                + "\n"
            )
    verdict = audit_leakage(plan, log)
    (out_dir / "audit.json").write_text(
        json.dumps(
            {
                "passed": verdict.passed,
                "violations": verdict.violations,
                "read_counts": verdict.read_counts,
            },
            sort_keys=True,
            indent=2,
        )
        + "\n"
    )
    _write_manifest(out_dir, "train", cfg, method=method, seed=cfg.trainer.seed)
    print(
        f"trained {method}: best epoch {result.best_epoch}, "
        f"val MAE {result.best_val_mae:.6f}, audit {'PASS' if verdict.passed else 'FAIL'}"
    )
    return 0


def cmd_evaluate(args) -> int:
    cfg = _override(load_config(args.config), args)
    phase = args.phase
    out_dir = Path(cfg.output_dir)
    model, _meta = load_checkpoint(out_dir / "checkpoint.stgc")
    field, plan = _load_field_and_plan(cfg)
    normalizer = fit_normalizer(field, plan, cfg.normalizer)
    preds = krige_predict(model, field, plan, phase, cfg.drik_config("drik"), normalizer)
    reader = FieldReader(field, phase)
    truth, mask = reader.values(preds.nodes, preds.steps)
    _write_predictions(
        out_dir, f"predictions_{phase}", preds.nodes, preds.steps,
        preds.values_norm, preds.values,
        normalizer.transform(truth, preds.nodes), truth, mask,
    )
    report = score(preds.values, truth, cells=mask, phase=phase)
    (out_dir / f"metrics_{phase}.json").write_text(report.to_json())
    _write_manifest(out_dir, "evaluate", cfg, phase=phase)
    _render_report(out_dir, phase)
    print(f"{phase} MAE {report.mae:.6f} RMSE {report.rmse:.6f}")
    return 0


def cmd_baseline(args) -> int:
    cfg = _override(load_config(args.config), args)
    phase = args.phase
    methods = [args.method] if args.method else list(cfg.baselines)
    field, plan = _load_field_and_plan(cfg)
    normalizer = fit_normalizer(field, plan, cfg.normalizer)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for method in methods:
        result = _run_baseline(method, field, plan, phase)
        reader = FieldReader(field, phase)
        truth, mask = reader.values(result.nodes, result.steps)
        values_norm = normalizer.transform(result.values, result.nodes)
        _write_predictions(
            out_dir, f"predictions_{phase}_{method}", result.nodes, result.steps,
            values_norm, result.values,
            normalizer.transform(truth, result.nodes), truth, mask,
        )
        finite = np.isfinite(result.values)
        report = score(result.values, truth, cells=mask & finite, phase=phase)
        (out_dir / f"metrics_{phase}_{method}.json").write_text(report.to_json())
        print(f"{method} {phase} MAE {report.mae:.6f} RMSE {report.rmse:.6f}")
    _write_manifest(out_dir, "baseline", cfg, phase=phase, methods=methods)
    _render_report(out_dir, phase)
    return 0


def cmd_shift(args) -> int:
    from .evalshift import shift_report

    cfg = _override(load_config(args.config), args)
    phase = args.phase
    field, plan = _load_field_and_plan(cfg)
    view = phase_views(plan, phase)
    input_set = set(int(v) for v in view.input_nodes)
    extra = [int(v) for v in view.target_nodes if int(v) not in input_set]
    if not extra:
        raise ConfigError(f"phase {phase!r} adds no nodes beyond the inputs; nothing to diagnose")
    coords = np.vstack([field.coords[view.input_nodes], field.coords[extra]])
    full = build_graph(coords, cfg.graph)
    report = shift_report(full, np.arange(len(view.input_nodes)))
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"shift_{phase}.json").write_text(report.to_json())
    export_edges(full, out_dir / f"graph_{phase}.csv")
    _write_manifest(out_dir, "shift", cfg, phase=phase)
    print(
        f"shift[{phase}]: spectral drift {report.spectral_drift:.6f}, "
        f"distance divergence {report.distance_divergence:.6f}"
    )
    return 0


def alpha_to_node_ratios(alpha: float) -> tuple[float, float, float]:
    """Missing ratio -> node split. Test fraction alpha/(1+alpha) keeps the
    3:1:1 correspondence at alpha=0.25; the rest splits 3:1 train:val."""
    if not 0 < alpha < 1:
        raise ConfigError("missing ratio must lie in (0, 1)")
    test = alpha / (1.0 + alpha)
    return (0.75 * (1.0 - test), 0.25 * (1.0 - test), test)


def _sweep_point(payload: dict) -> list[dict]:
    cfg: ExperimentConfig = payload["cfg"]
    alpha = payload["alpha"]
    index = payload["index"]
    method = payload["method"]
    seed = cfg.split.seed ^ index
    point_cfg = dataclasses.replace(
        cfg,
        split=dataclasses.replace(
            cfg.split, node_ratios=alpha_to_node_ratios(alpha), seed=seed
        ),
        trainer=dataclasses.replace(cfg.trainer, seed=seed),
        output_dir=str(Path(cfg.output_dir) / f"ratio_{alpha:.3f}"),
    )
    field, plan = _load_field_and_plan(point_cfg)
    out_dir = Path(point_cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []

    result = train_model(
        field, plan, point_cfg.model, point_cfg.trainer,
        point_cfg.drik_config(method), point_cfg.normalizer,
    )
    preds = krige_predict(
        result.model, field, plan, "test", point_cfg.drik_config(method), result.normalizer
    )
    report = _score_against_truth(field, plan, "test", preds.nodes, preds.steps, preds.values)
    rows.append({"ratio": alpha, "method": method, **_metric_row(report)})

    for name in point_cfg.baselines:
        b = _run_baseline(name, field, plan, "test")
        rep = _score_against_truth(field, plan, "test", b.nodes, b.steps, b.values)
        rows.append({"ratio": alpha, "method": name, **_metric_row(rep)})
    return rows


def _run_baseline(name: str, field, plan, phase: str):
    if name == "mean":
        return mean_baseline(field, plan, phase)
    if name == "knn":
        k = min(10, len(phase_views(plan, phase).input_nodes))
        return knn_baseline(field, plan, phase, k=k)
    if name == "okriging":
        return okriging(field, plan, phase, GpKernelSpec())
    raise ConfigError(f"unknown baseline {name!r}")


def _metric_row(report: MetricReport) -> dict:
    return {
        "mae": report.mae,
        "rmse": report.rmse,
        "mape": "" if report.mape is None else report.mape,
    }


def cmd_sweep(args) -> int:
    cfg = _override(load_config(args.config), args)
    method = args.method or "drik"
    ratios = SWEEP_RATIOS
    workers = int(os.environ.get("KRIGBENCH_THREADS", "1"))
    payloads = [
        {"cfg": cfg, "alpha": alpha, "index": i, "method": method}
        for i, alpha in enumerate(ratios)
    ]
    started = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            all_rows = [row for rows in pool.map(_sweep_point, payloads) for row in rows]
    else:
        all_rows = [row for payload in payloads for row in _sweep_point(payload)]

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["ratio", "method", "mae", "rmse", "mape"])
        writer.writeheader()
        writer.writerows(all_rows)
    _write_manifest(out_dir, "sweep", cfg, method=method, ratios=list(ratios))
    print(f"sweep over {len(ratios)} ratios done in {time.perf_counter() - started:.1f}s")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="krigbench",
        description="Leakage-free 3x3 inductive kriging benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config YAML")
        p.add_argument("--seed", type=int, default=None, help="override split/trainer seed")
        p.add_argument("--out", default=None, help="override output directory")

    p = sub.add_parser("synth", help="write a synthetic GP dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write the split plan file")
    common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train DRIK or an ablation")
    common(p)
    p.add_argument("--method", choices=MODEL_METHODS, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a phase")
    common(p)
    p.add_argument("--phase", choices=("validate", "test"), required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="run classical baselines on a phase")
    common(p)
    p.add_argument("--phase", choices=("validate", "test"), required=True)
    p.add_argument("--method", choices=BASELINE_METHODS, default=None)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("shift", help="shift diagnostics for a phase's enlarged graph")
    common(p)
    p.add_argument("--phase", choices=("validate", "test"), required=True)
    p.set_defaults(func=cmd_shift)

    p = sub.add_parser("sweep", help="repeat the pipeline over missing ratios")
    common(p)
    p.add_argument("--method", choices=MODEL_METHODS, default=None)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KrigbenchError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return 2 if isinstance(exc, CheckpointNotFoundError) else 1


if __name__ == "__main__":
    sys.exit(main())
