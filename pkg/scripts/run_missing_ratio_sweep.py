#!/usr/bin/env python3
"""Missing-ratio sweep: repeat train/evaluate over alpha in {12.5%..87.5%}.

Thin wrapper over `krigbench sweep`; writes a combined CSV of test metrics per
(ratio, method). Worker parallelism is capped by KRIGBENCH_THREADS.
"""

import argparse
from pathlib import Path

import yaml

from krigbench.cli import main as cli_main
from run_synthetic_experiment import DEFAULT_CONFIG


def run(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=None)
    parser.add_argument("--method", default="drik")
    parser.add_argument("--out", default="runs/sweep")
    args = parser.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.config:
        cfg_path = Path(args.config)
    else:
        cfg = dict(DEFAULT_CONFIG)
        cfg["dataset"] = {"path": str(out / "data.csv"), "format": "csv-wide"}
        cfg["output_dir"] = str(out)
        cfg_path = out / "config.yaml"
        cfg_path.write_text(yaml.safe_dump(cfg))

    assert cli_main(["synth", "--config", str(cfg_path)]) == 0
    assert cli_main(["sweep", "--config", str(cfg_path), "--method", args.method,
                     "--out", str(out)]) == 0
    print((out / "sweep.csv").read_text())


if __name__ == "__main__":
    run()
