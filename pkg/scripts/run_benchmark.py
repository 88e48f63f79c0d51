"""Run the seeded pretrain-vs-random benchmark and write tables, t-tests and verdicts.

Usage: python3 scripts/run_benchmark.py [--seeds 0,1,2,3,4] [--out bench_out] [key=value ...]

Trailing ``key=value`` pairs override fields of the benchmark's training run.
"""

import argparse
import dataclasses
import json
import logging
import time
from pathlib import Path

from mrialign.benchmark import (BenchmarkConfig, ablation_verdict, explainability_verdict,
                                run_benchmark, transfer_verdict)
from mrialign.training import TrainRunConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--arms", default="random,full,global-only,local-only")
    ap.add_argument("--out", default="bench_out")
    ap.add_argument("overrides", nargs="*", help="TrainRunConfig field overrides, key=value")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = BenchmarkConfig()
    changes = dict(kv.split("=", 1) for kv in args.overrides)
    run = TrainRunConfig.from_mapping({**dataclasses.asdict(base.run), **changes})
    cfg = dataclasses.replace(base, run=run, seeds=tuple(int(s) for s in args.seeds.split(",")),
                              arms=tuple(args.arms.split(",")))

    start = time.time()
    result = run_benchmark(cfg)
    report = result.report()
    others = [a for a in cfg.arms if a != "random"]
    for arm in others:
        report.compare(arm, "random", "external")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tables = []
    for split in ("internal", "external"):
        (out / f"metrics_{split}.csv").write_text(report.table_csv(split))
        tables.append(report.render_table(split, title=split.capitalize()))
    (out / "ttests.csv").write_text(report.ttest_csv())
    (out / "report.json").write_text(report.to_json() + "\n")

    verdicts = []
    if {"random", "full"} <= set(cfg.arms):
        verdicts += [transfer_verdict(result), explainability_verdict(result)]
    if {"full", "global-only", "local-only"} <= set(cfg.arms):
        verdicts.append(ablation_verdict(result))
    lines = [f"{'PASS' if v.passed else 'FAIL'} {v.name}: {v.detail}" for v in verdicts]
    lines.append(f"wall time {time.time() - start:.1f}s")
    (out / "verdicts.txt").write_text("\n".join(lines) + "\n")
    (out / "run_config.txt").write_text(cfg.run.to_text())
    print("\n".join(tables + lines))
    print(json.dumps({"out": str(out)}))


if __name__ == "__main__":
    main()
