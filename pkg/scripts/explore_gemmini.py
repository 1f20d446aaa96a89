#!/usr/bin/env python3
"""Sweep the tuning space for the bundled 16x16 accelerator, print the
leaderboard, and verify the best schedule end to end.

Usage:
    python3 scripts/explore_gemmini.py [--workload workloads/gemm_128.yaml]
"""

import argparse
import pathlib
import subprocess
import sys
import tempfile

import yaml

ROOT = pathlib.Path(__file__).resolve().parent.parent
ARCH = ROOT / "configs" / "gemmini16.yaml"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workload", default=str(ROOT / "workloads" /
                                              "gemm_128.yaml"))
    ap.add_argument("--granularity", type=int, default=2)
    ap.add_argument("--top", type=int, default=8)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as td:
        report = pathlib.Path(td) / "report.yaml"
        mapping = pathlib.Path(td) / "best.yaml"
        subprocess.run(
            [sys.executable, "-m", "gemmsched.cli", "explore",
             "--arch", str(ARCH), "--workload", args.workload,
             "--granularity", str(args.granularity),
             "--top", str(args.top), "-o", str(report)],
            check=True)
        doc = yaml.safe_load(report.read_text())

        print(f"\n{doc['arch']}  "
              f"N={doc['workload']['N']} C={doc['workload']['C']} "
              f"K={doc['workload']['K']}")
        print(f"space: {doc['space']['tuning_points']} tuning points, "
              f"{doc['space']['candidates']} candidates")
        print(f"{'rank':>4}  {'dataflow':<18} {'db':<3} "
              f"{'proxy bytes':>12} {'cycles':>12}")
        for row in doc["ranking"]:
            print(f"{row['rank']:>4}  {row['dataflow']:<18} "
                  f"{str(row['double_buffered']):<3} "
                  f"{row['proxy_traffic_bytes']:>12} "
                  f"{row['modeled_cycles']:>12.0f}")

        best = doc["ranking"][0]["mapping"]
        mapping.write_text(yaml.safe_dump(best, sort_keys=False))
        print("\nverifying the best schedule:")
        subprocess.run(
            [sys.executable, "-m", "gemmsched.cli", "run",
             "--arch", str(ARCH), "--workload", args.workload,
             "--mapping", str(mapping)],
            check=True)


if __name__ == "__main__":
    main()
