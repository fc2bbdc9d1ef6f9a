"""Reference-count, inter-frame-attention and slot-count ablations on the synthetic benchmark.

Each row trains from scratch with the same seed and budget and reports
held-out AP. Results are appended to ``<out>/ablations.jsonl``.

    python3 scripts/ablations.py --iterations 5000 --only base n_ref=1
"""

import argparse
import json
import time
from pathlib import Path

from svis import config as C
from svis.data import make_benchmark
from svis.evaluation import APReport
from svis.inference import evaluate_clips
from svis.train import train

from recipe import BASE, BENCHMARK

ROWS = {
    "base": [],
    "n_ref=1": ["n_ref=1"],
    "n_ref=2": ["n_ref=2"],
    "no_inter": ["inter_p2c=false", "inter_c2c_c2p=false"],
    "no_inter_p2c": ["inter_p2c=false"],
    "no_inter_c2c_c2p": ["inter_c2c_c2p=false"],
    "no_pairwise_matching": ["pairwise_matching=false"],
    "alt=1": ["n_alt=1"],
    "alt=3": ["n_alt=3"],
    "slots=5": ["slots=5"],
    "slots=25": ["slots=25"],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=5000)
    ap.add_argument("--only", nargs="*", choices=sorted(ROWS), help="subset of rows to run")
    ap.add_argument("--out", type=Path, default=Path("runs/ablations"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    clips = make_benchmark(**BENCHMARK)
    test = [c for c in clips if c.split == "test"]
    print(f"{'row':22s}{APReport.header()}  switches  minutes")
    for name in args.only or list(ROWS):
        cfg = C.apply_overrides(BASE.replace(iterations=args.iterations), ROWS[name])
        start = time.perf_counter()
        params = train(cfg, clips)
        minutes = (time.perf_counter() - start) / 60
        report, switches = evaluate_clips(test, params, cfg)
        print(f"{name:22s}{report.row()}  {switches:8d}  {minutes:7.1f}", flush=True)
        with open(args.out / "ablations.jsonl", "a") as fh:
            fh.write(json.dumps({"row": name, "iterations": args.iterations, "ap": report.ap,
                                 "ap50": report.ap50, "ap75": report.ap75, "ar1": report.ar1,
                                 "ar10": report.ar10, "id_switches": switches, "minutes": minutes}) + "\n")


if __name__ == "__main__":
    main()
